// metrics.hpp
//
// Evaluation of synthetic return panels against real data. Panels are T x N
// matrices (rows are dates); a path set is a vector of such panels.

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace marketgan::metrics {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using PathSet = std::vector<Matrix>;

/// Raised when a statistic needs variation that the data does not have.
class DegenerateDataError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

struct ErrorPair {
    double rmse = 0.0;
    double mae = 0.0;
};

/// Errors pooled over paths, dates and assets.
ErrorPair rmse_mae(const Matrix& real, const PathSet& paths);

struct Moments {
    double mean = 0.0;
    double variance = 0.0;  ///< 1/(n-1)
    double skewness = 0.0;
    double kurtosis = 0.0;  ///< raw, 3 for a Gaussian
};

/// Throws std::invalid_argument for fewer than 4 points and
/// DegenerateDataError for zero variance.
Moments moments(const Vector& series);

enum class CurveKind { ACF, VC, Lev };
const char* to_string(CurveKind kind);

/// Pearson correlation of (a_{t+lag}, b_t) over the overlapping pairs.
double lagged_correlation(const Vector& a, const Vector& b, std::size_t lag);

/// values(k - 1) holds lag k for k = 1..max_lag.
struct StylizedCurve {
    CurveKind kind = CurveKind::ACF;
    Vector values;
};

/// ACF: Corr(r_{t+k}, r_t); VC: Corr(r^2_{t+k}, r^2_t); Lev: Corr(r^2_{t+k}, r_t).
StylizedCurve stylized_curve(const Vector& series, CurveKind kind, std::size_t max_lag = 100);

/// Mean over synthetic curves of the Euclidean distance to the real curve.
double stylized_score(const StylizedCurve& real, const std::vector<StylizedCurve>& synthetic);

/// Per-asset stylized scores averaged over assets.
double stylized_panel_score(const Matrix& real, const PathSet& paths, CurveKind kind, std::size_t max_lag = 100);

Matrix cross_corr(const Matrix& panel);

/// Entry (i, j): share of dates with r_j below its empirical lower `1 - q`
/// quantile on which r_i is also below its own.
Matrix extreme_cross_corr(const Matrix& panel, double q = 0.95);

/// Linear-interpolation sample quantile, p in [0, 1].
double quantile(Vector values, double p);

/// Frobenius distance between the real matrix and the mean over paths.
double xcorr_score(const Matrix& real, const PathSet& paths);
double xcorr_extreme_score(const Matrix& real, const PathSet& paths, double q = 0.95);

struct Gaussian {
    Vector mean;
    Matrix cov;
};

/// Sample mean and 1/(n-1) covariance of the rows.
Gaussian sample_moments(const Matrix& samples);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
double fid_squared(const Gaussian& a, const Gaussian& b);

struct FidResult {
    double fid = 0.0;  ///< sqrt of fid_squared
    double fid_squared = 0.0;
};

/// Rows of each matrix are samples.
FidResult fid(const Matrix& real, const Matrix& synthetic);

/// 1-D Wasserstein-1 between two empirical distributions. Equal sizes use
/// sorted differences; otherwise quantiles are matched on a common grid.
double wasserstein1(Vector a, Vector b);

/// Average 1-D Wasserstein-1 over random unit directions.
double swd(const Matrix& real, const Matrix& synthetic, std::size_t num_projections = 100, std::uint64_t seed = 0);

/// sqrt((x - mu)' S^-1 (x - mu)); a ridge of 1e-10 tr(S)/N is added when S is
/// not safely invertible.
double mahalanobis(const Vector& x, const Vector& mu, const Matrix& sigma);

/// Average over synthetic rows of the distance to the real sample moments.
double mahalanobis_score(const Matrix& real, const Matrix& synthetic);

/// Dynamic time warping with Euclidean row cost; rows are time steps.
double dtw(const Matrix& x, const Matrix& y);
double dtw(const Vector& x, const Vector& y);

/// Non-overlapping sums over blocks of `horizon` rows; a trailing partial
/// block is dropped.
Matrix aggregate_returns(const Matrix& panel, std::size_t horizon);

/// Per-date mean across assets.
Vector equal_weight_series(const Matrix& panel);

/// Counts in `bins` equal-width bins over [lo, hi]; values outside are clamped
/// into the edge bins.
std::vector<std::size_t> histogram(const Vector& values, std::size_t bins, double lo, double hi);

struct ReportOptions {
    std::size_t max_lag = 100;
    std::size_t num_projections = 100;
    std::uint64_t projection_seed = 0;
    double tail_quantile = 0.95;
};

/// One row of the model comparison table; every entry is averaged over paths.
struct MetricReport {
    double fid = 0.0;
    double swd = 0.0;
    double md = 0.0;
    double dtw = 0.0;
    double acf = 0.0;
    double vc = 0.0;
    double lev = 0.0;
    double xcorr = 0.0;
    double xcorr_e = 0.0;
    std::size_t num_paths = 0;
    bool low_sample = false;  ///< fewer than two paths

    static const std::vector<std::string>& keys();
    double value(const std::string& key) const;
};

MetricReport evaluate(const Matrix& real, const PathSet& paths, const ReportOptions& options = {});

} // namespace marketgan::metrics
