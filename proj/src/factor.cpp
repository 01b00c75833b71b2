#include "marketgan/factor.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>

namespace marketgan::factor {

bool CoefficientSet::all_finite() const { return alpha.allFinite() && beta.allFinite() && sigma.allFinite(); }

SingularDesignError::SingularDesignError(std::size_t date_index, std::size_t asset)
    : std::runtime_error("singular factor design in window ending at row " + std::to_string(date_index) +
                         " (asset " + std::to_string(asset) + ")"),
      date_(date_index),
      asset_(asset) {}

const CoefficientSet& RollingCoefficients::at(std::size_t t) const {
    if (!has(t)) throw std::out_of_range("no coefficients for row " + std::to_string(t));
    return sets[t - first];
}

namespace {

// Centered normal equations shared by all assets. Returns false when the
// factor cross-product is numerically singular.
bool solve_window(const Matrix& r, const Matrix& f, CoefficientSet& out) {
    const auto n = r.rows();
    const auto K = f.cols();
    const auto N = r.cols();
    const Eigen::RowVectorXd fbar = f.colwise().mean();
    const Eigen::RowVectorXd rbar = r.colwise().mean();
    const Matrix fc = f.rowwise() - fbar;
    const Matrix sff = fc.transpose() * fc;
    for (Eigen::Index k = 0; k < K; ++k) {
        const double scale = f.col(k).squaredNorm();
        if (!(sff(k, k) > 1e-12 * scale) || sff(k, k) <= 0.0) return false;
    }
    Eigen::LDLT<Matrix> ldlt(sff);
    if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-12)) return false;
    const Matrix sfr = fc.transpose() * (r.rowwise() - rbar);
    out.beta = ldlt.solve(sfr).transpose();
    out.alpha = (rbar - fbar * out.beta.transpose()).transpose();
    out.sigma.resize(N);
    const double dof = static_cast<double>(n - K - 1);
    for (Eigen::Index i = 0; i < N; ++i) {
        double ss = 0.0;
        for (Eigen::Index t = 0; t < n; ++t) {
            const double e = r(t, i) - out.alpha(i) - f.row(t).dot(out.beta.row(i));
            ss += e * e;
        }
        out.sigma(i) = std::sqrt(ss / dof);
    }
    return true;
}

} // namespace

CoefficientSet ols(const Matrix& returns, const Matrix& factors) {
    if (returns.rows() != factors.rows()) throw std::invalid_argument("ols: row count mismatch");
    if (returns.rows() < factors.cols() + 2) throw std::invalid_argument("ols: need at least K + 2 observations");
    if (!returns.allFinite() || !factors.allFinite()) throw std::invalid_argument("ols: missing values in window");
    CoefficientSet c;
    if (!solve_window(returns, factors, c)) throw SingularDesignError(static_cast<std::size_t>(returns.rows() - 1), 0);
    return c;
}

RollingCoefficients rolling_ols(const Matrix& returns, const Matrix& factors, std::size_t window) {
    if (returns.rows() != factors.rows()) throw std::invalid_argument("rolling_ols: row count mismatch");
    const auto K = static_cast<std::size_t>(factors.cols());
    if (window < K + 2) throw std::invalid_argument("rolling_ols: window must be at least K + 2");
    if (!returns.allFinite() || !factors.allFinite()) {
        throw std::invalid_argument("rolling_ols: missing values (impute before regression)");
    }
    RollingCoefficients rc;
    rc.window = window;
    rc.first = window - 1;
    const auto T = static_cast<std::size_t>(returns.rows());
    if (T < window) {
        rc.first = T;
        return rc;
    }
    rc.sets.reserve(T - window + 1);
    const auto w = static_cast<Eigen::Index>(window);
    for (std::size_t t = window - 1; t < T; ++t) {
        const auto start = static_cast<Eigen::Index>(t + 1 - window);
        CoefficientSet c;
        if (!solve_window(returns.middleRows(start, w), factors.middleRows(start, w), c)) {
            throw SingularDesignError(t, 0);
        }
        rc.sets.push_back(std::move(c));
    }
    return rc;
}

Matrix factor_covariance(const CoefficientSet& coeffs, const Matrix& factor_window) {
    if (factor_window.rows() < 2) throw std::invalid_argument("factor_covariance: need at least two factor rows");
    if (factor_window.cols() != coeffs.beta.cols()) throw std::invalid_argument("factor_covariance: K mismatch");
    const Matrix centered = factor_window.rowwise() - factor_window.colwise().mean();
    const Matrix cov_f = centered.transpose() * centered / static_cast<double>(factor_window.rows() - 1);
    Matrix sigma = coeffs.beta * cov_f * coeffs.beta.transpose();
    sigma = 0.5 * (sigma + sigma.transpose()).eval();
    sigma.diagonal() += coeffs.sigma.array().square().matrix();
    return sigma;
}

Vector assemble_returns(const CoefficientSet& coeffs, const Vector& factors_next, const Vector& eps) {
    const auto N = coeffs.alpha.size();
    const auto K = coeffs.beta.cols();
    if (coeffs.beta.rows() != N || coeffs.sigma.size() != N || eps.size() != N || factors_next.size() != K) {
        throw std::invalid_argument("assemble_returns: dimension mismatch");
    }
    Vector r(N);
    for (Eigen::Index i = 0; i < N; ++i) {
        double bf = 0.0;
        for (Eigen::Index k = 0; k < K; ++k) bf += coeffs.beta(i, k) * factors_next(k);
        r(i) = (coeffs.alpha(i) + bf) + coeffs.sigma(i) * eps(i);
    }
    return r;
}

Matrix standard_normal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix out(rows, cols);
    for (std::size_t s = 0; s < rows; ++s) {
        for (std::size_t i = 0; i < cols; ++i) out(s, i) = normal(rng);
    }
    return out;
}

Matrix bootstrap_generate(const CoefficientSet& coeffs, const Vector& factors_next, std::size_t num_samples,
                          std::uint64_t seed) {
    if (!coeffs.all_finite()) throw std::invalid_argument("bootstrap_generate: non-finite coefficients");
    const Matrix eps = standard_normal(num_samples, coeffs.num_assets(), seed);
    Matrix out(num_samples, coeffs.num_assets());
    for (std::size_t s = 0; s < num_samples; ++s) {
        out.row(s) = assemble_returns(coeffs, factors_next, eps.row(s).transpose()).transpose();
    }
    return out;
}

void write_coefficients_csv(const std::string& path, const std::vector<std::string>& dates,
                            const std::vector<std::string>& assets, const RollingCoefficients& coeffs) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << std::setprecision(17);
    const std::size_t K = coeffs.sets.empty() ? 0 : coeffs.sets.front().num_factors();
    os << "date,asset,alpha";
    for (std::size_t k = 1; k <= K; ++k) os << ",beta_" << k;
    os << ",sigma\n";
    for (std::size_t t = coeffs.first; t < coeffs.end(); ++t) {
        const auto& c = coeffs.at(t);
        for (std::size_t i = 0; i < c.num_assets(); ++i) {
            os << dates.at(t) << ',' << assets.at(i) << ',' << c.alpha(i);
            for (std::size_t k = 0; k < K; ++k) os << ',' << c.beta(i, k);
            os << ',' << c.sigma(i) << '\n';
        }
    }
}

} // namespace marketgan::factor
