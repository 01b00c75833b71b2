// factor.hpp
//
// Rolling-window OLS factor regressions, factor-implied covariances and the
// Gaussian-residual factor bootstrap.

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace marketgan::factor {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// alpha (N), beta (N x K), sigma (N) at a single date.
struct CoefficientSet {
    Vector alpha;
    Matrix beta;
    Vector sigma;

    std::size_t num_assets() const noexcept { return static_cast<std::size_t>(alpha.size()); }
    std::size_t num_factors() const noexcept { return static_cast<std::size_t>(beta.cols()); }
    bool all_finite() const;
};

class SingularDesignError : public std::runtime_error {
public:
    SingularDesignError(std::size_t date_index, std::size_t asset);
    std::size_t date_index() const noexcept { return date_; }
    std::size_t asset() const noexcept { return asset_; }

private:
    std::size_t date_;
    std::size_t asset_;
};

/// Coefficients exist for date indices [first, first + sets.size()).
struct RollingCoefficients {
    std::size_t window = 0;
    std::size_t first = 0;
    std::vector<CoefficientSet> sets;

    bool has(std::size_t t) const noexcept { return t >= first && t - first < sets.size(); }
    const CoefficientSet& at(std::size_t t) const;
    std::size_t end() const noexcept { return first + sets.size(); }
};

/// Single OLS fit of each return column on the factor columns (with intercept).
/// sigma uses rows - K - 1 degrees of freedom.
CoefficientSet ols(const Matrix& returns, const Matrix& factors);

/// Coefficients at t use rows (t - window, t]. Rows with insufficient history
/// get no entry. Throws SingularDesignError when a window's factors are
/// constant or collinear, std::invalid_argument on missing values.
RollingCoefficients rolling_ols(const Matrix& returns, const Matrix& factors, std::size_t window = 252);

/// beta * cov(F) * beta' + diag(sigma^2), cov(F) with 1/(n-1).
Matrix factor_covariance(const CoefficientSet& coeffs, const Matrix& factor_window);

/// r = (alpha + beta F) + sigma * eps, elementwise over assets.
Vector assemble_returns(const CoefficientSet& coeffs, const Vector& factors_next, const Vector& eps);

/// rows x cols standard normal draws from mt19937_64(seed), row-major order.
Matrix standard_normal(std::size_t rows, std::size_t cols, std::uint64_t seed);

/// num_samples rows of alpha + beta F + sigma * eps with eps ~ N(0, I).
/// Uses standard_normal(num_samples, N, seed) as the residual draws.
Matrix bootstrap_generate(const CoefficientSet& coeffs, const Vector& factors_next, std::size_t num_samples,
                          std::uint64_t seed);

/// CSV with columns date, asset, alpha, beta_1..beta_K, sigma.
void write_coefficients_csv(const std::string& path, const std::vector<std::string>& dates,
                            const std::vector<std::string>& assets, const RollingCoefficients& coeffs);

} // namespace marketgan::factor
