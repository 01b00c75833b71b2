#include "marketgan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace marketgan::metrics {

namespace {

void require_paths(const Matrix& real, const PathSet& paths) {
    if (paths.empty()) throw std::invalid_argument("metrics: empty path set");
    for (const auto& p : paths) {
        if (p.cols() != real.cols()) throw std::invalid_argument("metrics: path has a different number of assets");
    }
}

Eigen::SelfAdjointEigenSolver<Matrix> psd_eigen(const Matrix& s, const char* what) {
    const Matrix sym = 0.5 * (s + s.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
    if (es.info() != Eigen::Success) throw std::runtime_error(std::string(what) + ": eigen decomposition failed");
    const double scale = std::max(es.eigenvalues().cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
    if (es.eigenvalues().minCoeff() < -1e-9 * scale) {
        throw std::runtime_error(std::string(what) + ": matrix is not positive semidefinite");
    }
    return es;
}

Matrix psd_sqrt(const Matrix& s) {
    const auto es = psd_eigen(s, "fid");
    const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

void add_ridge(Matrix& cov) {
    const double n = static_cast<double>(cov.rows());
    const double tr = cov.trace();
    cov.diagonal().array() += 1e-10 * (tr > 0.0 ? tr : 1.0) / n;
}

} // namespace

ErrorPair rmse_mae(const Matrix& real, const PathSet& paths) {
    if (paths.empty()) throw std::invalid_argument("rmse_mae: empty path set");
    double sq = 0.0, ab = 0.0;
    for (const auto& p : paths) {
        if (p.rows() != real.rows() || p.cols() != real.cols()) throw std::invalid_argument("rmse_mae: shape mismatch");
        const Eigen::ArrayXXd d = p.array() - real.array();
        sq += d.square().sum();
        ab += d.abs().sum();
    }
    const double n = static_cast<double>(paths.size()) * static_cast<double>(real.size());
    return {std::sqrt(sq / n), ab / n};
}

Moments moments(const Vector& x) {
    const Eigen::Index n = x.size();
    if (n < 4) throw std::invalid_argument("moments: need at least 4 observations");
    Moments m;
    m.mean = x.mean();
    const Eigen::ArrayXd c = x.array() - m.mean;
    const double m2 = c.square().mean();
    m.variance = c.square().sum() / static_cast<double>(n - 1);
    if (!(m2 > 0.0)) throw DegenerateDataError("moments: zero variance, skewness and kurtosis undefined");
    m.skewness = c.cube().mean() / std::pow(m2, 1.5);
    m.kurtosis = c.square().square().mean() / (m2 * m2);
    return m;
}

const char* to_string(CurveKind kind) {
    switch (kind) {
    case CurveKind::ACF: return "acf";
    case CurveKind::VC: return "vc";
    case CurveKind::Lev: return "lev";
    }
    return "?";
}

double lagged_correlation(const Vector& a, const Vector& b, std::size_t lag) {
    if (a.size() != b.size()) throw std::invalid_argument("lagged_correlation: length mismatch");
    const auto L = static_cast<Eigen::Index>(lag);
    const Eigen::Index n = a.size() - L;
    if (n < 2) throw std::invalid_argument("lagged_correlation: series too short for lag");
    const Eigen::ArrayXd x = a.segment(L, n).array() - a.segment(L, n).mean();
    const Eigen::ArrayXd y = b.head(n).array() - b.head(n).mean();
    const double sxx = x.square().sum(), syy = y.square().sum();
    if (!(sxx > 0.0) || !(syy > 0.0)) throw DegenerateDataError("lagged_correlation: zero variance");
    return std::clamp((x * y).sum() / (std::sqrt(sxx) * std::sqrt(syy)), -1.0, 1.0);
}

StylizedCurve stylized_curve(const Vector& series, CurveKind kind, std::size_t max_lag) {
    if (static_cast<std::size_t>(series.size()) <= max_lag + 1) {
        throw std::invalid_argument("stylized_curve: series must be longer than max_lag + 1");
    }
    const Vector sq = series.array().square();
    StylizedCurve c;
    c.kind = kind;
    c.values.resize(static_cast<Eigen::Index>(max_lag));
    for (std::size_t k = 1; k <= max_lag; ++k) {
        double v = 0.0;
        switch (kind) {
        case CurveKind::ACF: v = lagged_correlation(series, series, k); break;
        case CurveKind::VC: v = lagged_correlation(sq, sq, k); break;
        case CurveKind::Lev: v = lagged_correlation(sq, series, k); break;
        }
        c.values(static_cast<Eigen::Index>(k - 1)) = v;
    }
    return c;
}

double stylized_score(const StylizedCurve& real, const std::vector<StylizedCurve>& synthetic) {
    if (synthetic.empty()) throw std::invalid_argument("stylized_score: no synthetic curves");
    double sum = 0.0;
    for (const auto& s : synthetic) {
        if (s.values.size() != real.values.size() || s.kind != real.kind) {
            throw std::invalid_argument("stylized_score: curve mismatch");
        }
        sum += (s.values - real.values).norm();
    }
    return sum / static_cast<double>(synthetic.size());
}

double stylized_panel_score(const Matrix& real, const PathSet& paths, CurveKind kind, std::size_t max_lag) {
    require_paths(real, paths);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < real.cols(); ++i) {
        const auto r = stylized_curve(real.col(i), kind, max_lag);
        std::vector<StylizedCurve> syn;
        syn.reserve(paths.size());
        for (const auto& p : paths) syn.push_back(stylized_curve(p.col(i), kind, max_lag));
        sum += stylized_score(r, syn);
    }
    return sum / static_cast<double>(real.cols());
}

Matrix cross_corr(const Matrix& panel) {
    if (panel.rows() < 2) throw std::invalid_argument("cross_corr: need at least two dates");
    const Matrix c = panel.rowwise() - panel.colwise().mean();
    const Vector sd = c.colwise().norm();
    for (Eigen::Index i = 0; i < sd.size(); ++i) {
        if (!(sd(i) > 0.0)) throw DegenerateDataError("cross_corr: asset " + std::to_string(i) + " has zero variance");
    }
    Matrix out = c.transpose() * c;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        for (Eigen::Index j = 0; j < out.cols(); ++j) {
            out(i, j) = i == j ? 1.0 : std::clamp(out(i, j) / (sd(i) * sd(j)), -1.0, 1.0);
        }
    }
    return 0.5 * (out + out.transpose());
}

double quantile(Vector values, double p) {
    if (values.size() == 0) throw std::invalid_argument("quantile: empty input");
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("quantile: p outside [0, 1]");
    std::sort(values.begin(), values.end());
    const double pos = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<Eigen::Index>(std::floor(pos));
    const Eigen::Index hi = std::min<Eigen::Index>(lo + 1, values.size() - 1);
    const double w = pos - static_cast<double>(lo);
    return w == 0.0 ? values(lo) : values(lo) + w * (values(hi) - values(lo));
}

Matrix extreme_cross_corr(const Matrix& panel, double q) {
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("extreme_cross_corr: q must lie in (0, 1)");
    const Eigen::Index N = panel.cols();
    Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> tail(panel.rows(), N);
    for (Eigen::Index i = 0; i < N; ++i) {
        const double thr = quantile(panel.col(i), 1.0 - q);
        tail.col(i) = panel.col(i).array() < thr;
    }
    Matrix out(N, N);
    for (Eigen::Index j = 0; j < N; ++j) {
        const auto cond = tail.col(j).count();
        if (cond == 0) {
            throw DegenerateDataError("extreme_cross_corr: no tail observations for asset " + std::to_string(j));
        }
        for (Eigen::Index i = 0; i < N; ++i) {
            out(i, j) = static_cast<double>((tail.col(i) && tail.col(j)).count()) / static_cast<double>(cond);
        }
    }
    return out;
}

namespace {

double mean_matrix_distance(const Matrix& real, const std::vector<Matrix>& mats) {
    Matrix mean = Matrix::Zero(real.rows(), real.cols());
    for (const auto& m : mats) mean += m;
    mean /= static_cast<double>(mats.size());
    return (real - mean).norm();
}

} // namespace

double xcorr_score(const Matrix& real, const PathSet& paths) {
    require_paths(real, paths);
    std::vector<Matrix> mats;
    for (const auto& p : paths) mats.push_back(cross_corr(p));
    return mean_matrix_distance(cross_corr(real), mats);
}

double xcorr_extreme_score(const Matrix& real, const PathSet& paths, double q) {
    require_paths(real, paths);
    std::vector<Matrix> mats;
    for (const auto& p : paths) mats.push_back(extreme_cross_corr(p, q));
    return mean_matrix_distance(extreme_cross_corr(real, q), mats);
}

Gaussian sample_moments(const Matrix& samples) {
    if (samples.rows() < 2) throw std::invalid_argument("sample_moments: need at least two samples");
    Gaussian g;
    g.mean = samples.colwise().mean().transpose();
    const Matrix c = samples.rowwise() - g.mean.transpose();
    g.cov = (c.transpose() * c) / static_cast<double>(samples.rows() - 1);
    return g;
}

double fid_squared(const Gaussian& a, const Gaussian& b) {
    if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows()) {
        throw std::invalid_argument("fid: dimension mismatch");
    }
    // Identical moments are at distance zero by definition; skip the
    // round-off of the matrix square roots.
    if (a.mean == b.mean && a.cov == b.cov) return 0.0;
    psd_eigen(b.cov, "fid");
    const Matrix ra = psd_sqrt(a.cov);
    const auto es = psd_eigen(ra * b.cov * ra, "fid");
    const double cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double v = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    return std::max(v, 0.0);
}

FidResult fid(const Matrix& real, const Matrix& synthetic) {
    if (real.cols() != synthetic.cols()) throw std::invalid_argument("fid: dimension mismatch");
    Gaussian a = sample_moments(real), b = sample_moments(synthetic);
    if (real.rows() <= real.cols()) add_ridge(a.cov);
    if (synthetic.rows() <= synthetic.cols()) add_ridge(b.cov);
    FidResult r;
    r.fid_squared = fid_squared(a, b);
    r.fid = std::sqrt(r.fid_squared);
    return r;
}

double wasserstein1(Vector a, Vector b) {
    if (a.size() == 0 || b.size() == 0) throw std::invalid_argument("wasserstein1: empty sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a.size() == b.size()) return (a - b).cwiseAbs().mean();
    const Eigen::Index M = std::max(a.size(), b.size());
    auto q = [](const Vector& s, double u) {
        const double pos = u * static_cast<double>(s.size() - 1);
        const auto lo = static_cast<Eigen::Index>(std::floor(pos));
        const Eigen::Index hi = std::min<Eigen::Index>(lo + 1, s.size() - 1);
        return s(lo) + (pos - static_cast<double>(lo)) * (s(hi) - s(lo));
    };
    double sum = 0.0;
    for (Eigen::Index j = 0; j < M; ++j) {
        const double u = static_cast<double>(j) / static_cast<double>(M - 1);
        sum += std::abs(q(a, u) - q(b, u));
    }
    return sum / static_cast<double>(M);
}

double swd(const Matrix& real, const Matrix& synthetic, std::size_t num_projections, std::uint64_t seed) {
    if (real.cols() != synthetic.cols()) throw std::invalid_argument("swd: dimension mismatch");
    if (num_projections == 0) throw std::invalid_argument("swd: need at least one projection");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    Vector dir(real.cols());
    double sum = 0.0;
    for (std::size_t l = 0; l < num_projections; ++l) {
        do {
            for (Eigen::Index j = 0; j < dir.size(); ++j) dir(j) = n01(rng);
        } while (dir.norm() == 0.0);
        dir.normalize();
        sum += wasserstein1(real * dir, synthetic * dir);
    }
    return sum / static_cast<double>(num_projections);
}

double mahalanobis(const Vector& x, const Vector& mu, const Matrix& sigma) {
    if (x.size() != mu.size() || sigma.rows() != x.size() || sigma.cols() != x.size()) {
        throw std::invalid_argument("mahalanobis: dimension mismatch");
    }
    Matrix s = 0.5 * (sigma + sigma.transpose());
    Eigen::LDLT<Matrix> ldlt(s);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || !(ldlt.rcond() > 1e-12)) {
        add_ridge(s);
        ldlt.compute(s);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || !(ldlt.rcond() > 0.0)) {
            throw std::runtime_error("mahalanobis: covariance is singular after ridge");
        }
    }
    const Vector d = x - mu;
    return std::sqrt(std::max(d.dot(ldlt.solve(d)), 0.0));
}

double mahalanobis_score(const Matrix& real, const Matrix& synthetic) {
    if (real.cols() != synthetic.cols()) throw std::invalid_argument("mahalanobis_score: dimension mismatch");
    if (synthetic.rows() == 0) throw std::invalid_argument("mahalanobis_score: no synthetic samples");
    const Gaussian g = sample_moments(real);
    Matrix s = g.cov;
    Eigen::LDLT<Matrix> ldlt(s);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || !(ldlt.rcond() > 1e-12)) {
        add_ridge(s);
        ldlt.compute(s);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || !(ldlt.rcond() > 0.0)) {
            throw std::runtime_error("mahalanobis_score: covariance is singular after ridge");
        }
    }
    const Matrix d = (synthetic.rowwise() - g.mean.transpose()).transpose();
    const Matrix solved = ldlt.solve(d);
    double sum = 0.0;
    for (Eigen::Index t = 0; t < d.cols(); ++t) sum += std::sqrt(std::max(d.col(t).dot(solved.col(t)), 0.0));
    return sum / static_cast<double>(d.cols());
}

double dtw(const Matrix& x, const Matrix& y) {
    if (x.rows() == 0 || y.rows() == 0) throw std::invalid_argument("dtw: empty series");
    if (x.cols() != y.cols()) throw std::invalid_argument("dtw: dimension mismatch");
    const Eigen::Index n = x.rows(), m = y.rows();
    std::vector<double> prev(static_cast<std::size_t>(m)), cur(static_cast<std::size_t>(m));
    auto cost = [&](Eigen::Index i, Eigen::Index j) { return (x.row(i) - y.row(j)).norm(); };
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < m; ++j) {
            const double c = cost(i, j);
            const auto jj = static_cast<std::size_t>(j);
            if (i == 0 && j == 0) {
                cur[jj] = c;
            } else if (i == 0) {
                cur[jj] = c + cur[jj - 1];
            } else if (j == 0) {
                cur[jj] = c + prev[jj];
            } else {
                cur[jj] = c + std::min({prev[jj], cur[jj - 1], prev[jj - 1]});
            }
        }
        std::swap(prev, cur);
    }
    return prev.back();
}

double dtw(const Vector& x, const Vector& y) { return dtw(Matrix(x), Matrix(y)); }

Matrix aggregate_returns(const Matrix& panel, std::size_t horizon) {
    if (horizon == 0) throw std::invalid_argument("aggregate_returns: horizon must be positive");
    const auto h = static_cast<Eigen::Index>(horizon);
    if (panel.rows() < h) throw std::invalid_argument("aggregate_returns: fewer rows than the horizon");
    const Eigen::Index blocks = panel.rows() / h;
    Matrix out(blocks, panel.cols());
    for (Eigen::Index b = 0; b < blocks; ++b) out.row(b) = panel.middleRows(b * h, h).colwise().sum();
    return out;
}

Vector equal_weight_series(const Matrix& panel) {
    if (panel.cols() == 0) throw std::invalid_argument("equal_weight_series: no assets");
    return panel.rowwise().mean();
}

std::vector<std::size_t> histogram(const Vector& values, std::size_t bins, double lo, double hi) {
    if (bins == 0 || !(hi > lo)) throw std::invalid_argument("histogram: need bins > 0 and hi > lo");
    std::vector<std::size_t> counts(bins, 0);
    const double width = (hi - lo) / static_cast<double>(bins);
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (std::isnan(values(i))) continue;
        const double pos = std::floor((values(i) - lo) / width);
        const auto b = static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
        ++counts[b];
    }
    return counts;
}

const std::vector<std::string>& MetricReport::keys() {
    static const std::vector<std::string> k{"fid", "swd", "md", "dtw", "acf", "vc", "lev", "xcorr", "xcorr_e"};
    return k;
}

double MetricReport::value(const std::string& key) const {
    if (key == "fid") return fid;
    if (key == "swd") return swd;
    if (key == "md") return md;
    if (key == "dtw") return dtw;
    if (key == "acf") return acf;
    if (key == "vc") return vc;
    if (key == "lev") return lev;
    if (key == "xcorr") return xcorr;
    if (key == "xcorr_e") return xcorr_e;
    throw std::out_of_range("unknown metric key " + key);
}

MetricReport evaluate(const Matrix& real, const PathSet& paths, const ReportOptions& o) {
    require_paths(real, paths);
    MetricReport r;
    r.num_paths = paths.size();
    r.low_sample = paths.size() < 2;
    const double P = static_cast<double>(paths.size());
    for (const auto& p : paths) {
        r.fid += metrics::fid(real, p).fid / P;
        r.swd += metrics::swd(real, p, o.num_projections, o.projection_seed) / P;
        r.md += mahalanobis_score(real, p) / P;
        r.dtw += metrics::dtw(real, p) / P;
    }
    r.acf = stylized_panel_score(real, paths, CurveKind::ACF, o.max_lag);
    r.vc = stylized_panel_score(real, paths, CurveKind::VC, o.max_lag);
    r.lev = stylized_panel_score(real, paths, CurveKind::Lev, o.max_lag);
    r.xcorr = xcorr_score(real, paths);
    r.xcorr_e = xcorr_extreme_score(real, paths, o.tail_quantile);
    return r;
}

} // namespace marketgan::metrics
