// portfolio.hpp
//
// Factor forecasts, moment estimates, long-only tangency weights, benchmark
// covariances and a daily-rebalanced backtest with drift-adjusted turnover.

#pragma once

#include "marketgan/factor.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace marketgan::portfolio {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class ForecastMethod { RollingAverage, Var1, Perturbed };
const char* to_string(ForecastMethod m);
ForecastMethod forecast_method_from_string(const std::string& s);

struct ForecastSpec {
    ForecastMethod method = ForecastMethod::RollingAverage;
    std::size_t window = 252;
    double r2 = 1.0;  ///< perturbed mode only, in (0, 1]
    std::uint64_t seed = 0;

    void validate() const;
};

/// Mean of the last `window` rows.
Vector rolling_average_forecast(const Matrix& history, std::size_t window);

struct VarFit {
    Vector intercept;
    Matrix coef;  ///< F_{t+1} = intercept + coef F_t
};

/// Per-equation OLS of F_t on (1, F_{t-1}) over the last `window` rows.
/// Throws factor::SingularDesignError when the lagged design is degenerate.
VarFit fit_var1(const Matrix& history, std::size_t window);

/// Noise std per factor so that regressing F on F + eta has the target R^2:
/// Var(eta_k) = Var(F_k) (1 - R^2) / R^2, Var with 1/(n-1).
Vector perturbation_std(const Matrix& factor_sample, double r2);

/// Produces F~_{t+1} for a decision at row t of a factor panel.
class FactorForecaster {
public:
    /// `factors` is the full T x K panel; the perturbation scale is set from
    /// it once. Rolling and VAR forecasts only read rows 0..t.
    FactorForecaster(const ForecastSpec& spec, const Matrix& factors);

    Vector forecast(std::size_t t);
    /// Number of VAR fits that fell back to the rolling average.
    std::size_t fallbacks() const noexcept { return fallbacks_; }
    const ForecastSpec& spec() const noexcept { return spec_; }
    const Vector& noise_std() const noexcept { return noise_std_; }

private:
    ForecastSpec spec_;
    const Matrix* factors_;
    Vector noise_std_;
    std::mt19937_64 rng_;
    std::size_t fallbacks_ = 0;
};

struct MomentEstimate {
    Vector mean;
    Matrix cov;  ///< 1/(n-1), symmetric
};

/// Sample mean and covariance of generated return vectors (rows).
MomentEstimate synthetic_moments(const Matrix& samples);

/// Moments of `num_samples` bootstrap draws at fixed coefficients and factors.
MomentEstimate bootstrap_moments(const factor::CoefficientSet& coeffs, const Vector& factors_next,
                                 std::size_t num_samples = 10000, std::uint64_t seed = 0);

struct TangencyResult {
    Vector weights;
    bool min_variance_fallback = false;  ///< no asset had a positive expected return
    std::size_t iterations = 0;
};

/// Maximizes w'mu / sqrt(w'Sigma w) over the simplex. Solved exactly as
/// min y'Sigma y s.t. mu'y = 1, y >= 0 by a primal active-set method, then
/// w = y / sum(y). A ridge of 1e-8 tr(Sigma)/N is added to Sigma.
TangencyResult tangency_long_only(const Vector& mu, const Matrix& sigma);

/// Long-only minimum-variance weights (same solver with mu = 1).
Vector min_variance_long_only(const Matrix& sigma);

double sharpe(const Vector& w, const Vector& mu, const Matrix& sigma);

Matrix sample_covariance(const Matrix& returns);

struct ShrinkageEstimate {
    Matrix cov;
    double intensity = 1.0;  ///< weight on the scaled-identity target, in [0, 1]
};

/// Ledoit-Wolf (2004) shrinkage toward mean-variance times identity, on
/// demeaned data with 1/T normalization.
ShrinkageEstimate ledoit_wolf(const Matrix& returns);

/// beta cov(F) beta' + diag(sigma^2) from one OLS fit over the window.
Matrix factor_model_covariance(const Matrix& returns, const Matrix& factors);

enum class CovarianceKind { Sample, LedoitWolf, Factor };
const char* to_string(CovarianceKind k);

Matrix benchmark_covariance(const Matrix& returns, const Matrix& factors, CovarianceKind kind);

struct PerformanceReport {
    double sharpe = 0.0;             ///< NaN when the return std is zero
    bool sharpe_defined = true;
    double annual_return = 0.0;      ///< 252 x mean daily return
    double annual_std = 0.0;         ///< sqrt(252) x daily std (1/(n-1))
    double max_drawdown = 0.0;       ///< <= 0, on wealth starting at 1
    double daily_turnover = 0.0;     ///< mean over rebalances
    double monthly_turnover = 0.0;   ///< 21 x daily_turnover
};

struct BacktestResult {
    Matrix weights;         ///< S x N, row s held over return row s
    Vector gross_returns;   ///< w_s' r_s
    Vector turnover;        ///< entry 0 is 0; later entries sum |w_s - drifted w_{s-1}|
    Vector net_returns;     ///< gross - cost * turnover
    PerformanceReport report;
};

/// Throws std::invalid_argument on missing returns or weights off the simplex.
BacktestResult backtest(const Matrix& weights, const Matrix& returns, double cost_bps = 0.0);

PerformanceReport performance(const Vector& daily_returns, const Vector& turnover);

} // namespace marketgan::portfolio
