#include "marketgan/portfolio.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace marketgan::portfolio {

const char* to_string(ForecastMethod m) {
    switch (m) {
    case ForecastMethod::RollingAverage: return "rolling_average";
    case ForecastMethod::Var1: return "var1";
    case ForecastMethod::Perturbed: return "perturbed";
    }
    return "?";
}

ForecastMethod forecast_method_from_string(const std::string& s) {
    if (s == "rolling_average") return ForecastMethod::RollingAverage;
    if (s == "var1") return ForecastMethod::Var1;
    if (s == "perturbed") return ForecastMethod::Perturbed;
    throw std::invalid_argument("unknown forecast method '" + s + "'");
}

void ForecastSpec::validate() const {
    if (window < 2) throw std::invalid_argument("forecast window must be at least 2");
    if (!(r2 > 0.0 && r2 <= 1.0)) throw std::invalid_argument("target R^2 must lie in (0, 1]");
}

Vector rolling_average_forecast(const Matrix& history, std::size_t window) {
    const auto w = static_cast<Eigen::Index>(window);
    if (window == 0 || history.rows() < w) throw std::invalid_argument("rolling_average_forecast: history shorter than window");
    return history.bottomRows(w).colwise().mean().transpose();
}

VarFit fit_var1(const Matrix& history, std::size_t window) {
    const auto w = static_cast<Eigen::Index>(window);
    if (window < 3 || history.rows() < w) throw std::invalid_argument("fit_var1: history shorter than window");
    const Matrix block = history.bottomRows(w);
    const auto c = factor::ols(block.bottomRows(w - 1), block.topRows(w - 1));
    return {c.alpha, c.beta};
}

Vector perturbation_std(const Matrix& factor_sample, double r2) {
    if (!(r2 > 0.0 && r2 <= 1.0)) throw std::invalid_argument("perturbation_std: R^2 must lie in (0, 1]");
    if (factor_sample.rows() < 2) throw std::invalid_argument("perturbation_std: need at least two rows");
    const Matrix c = factor_sample.rowwise() - factor_sample.colwise().mean();
    const Vector var = c.colwise().squaredNorm().transpose() / static_cast<double>(factor_sample.rows() - 1);
    return (var * ((1.0 - r2) / r2)).cwiseSqrt();
}

FactorForecaster::FactorForecaster(const ForecastSpec& spec, const Matrix& factors)
    : spec_(spec), factors_(&factors), rng_(spec.seed) {
    spec_.validate();
    if (spec_.method == ForecastMethod::Perturbed) noise_std_ = perturbation_std(factors, spec_.r2);
}

Vector FactorForecaster::forecast(std::size_t t) {
    const Matrix& F = *factors_;
    const auto tt = static_cast<Eigen::Index>(t);
    if (tt >= F.rows()) throw std::out_of_range("FactorForecaster: date beyond the factor panel");
    switch (spec_.method) {
    case ForecastMethod::RollingAverage:
        return rolling_average_forecast(F.topRows(tt + 1), spec_.window);
    case ForecastMethod::Var1: {
        const Matrix history = F.topRows(tt + 1);
        try {
            const auto fit = fit_var1(history, spec_.window);
            return fit.intercept + fit.coef * history.row(tt).transpose();
        } catch (const factor::SingularDesignError&) {
            ++fallbacks_;
            return rolling_average_forecast(history, spec_.window);
        }
    }
    case ForecastMethod::Perturbed: {
        if (tt + 1 >= F.rows()) throw std::out_of_range("FactorForecaster: no realized factor after the last date");
        Vector f = F.row(tt + 1).transpose();
        if (spec_.r2 == 1.0) return f;
        std::normal_distribution<double> n01;
        for (Eigen::Index k = 0; k < f.size(); ++k) f(k) += noise_std_(k) * n01(rng_);
        return f;
    }
    }
    throw std::logic_error("unreachable");
}

MomentEstimate synthetic_moments(const Matrix& samples) {
    if (samples.rows() < 2) throw std::invalid_argument("synthetic_moments: need at least two samples");
    MomentEstimate m;
    m.mean = samples.colwise().mean().transpose();
    const Matrix c = samples.rowwise() - m.mean.transpose();
    m.cov = (c.transpose() * c) / static_cast<double>(samples.rows() - 1);
    m.cov = 0.5 * (m.cov + m.cov.transpose());
    return m;
}

MomentEstimate bootstrap_moments(const factor::CoefficientSet& coeffs, const Vector& factors_next,
                                 std::size_t num_samples, std::uint64_t seed) {
    return synthetic_moments(factor::bootstrap_generate(coeffs, factors_next, num_samples, seed));
}

namespace {

// min y'Sy s.t. a'y = 1, y >= 0, for positive definite S and max(a) > 0.
Vector simplex_qp(const Vector& a, const Matrix& S, std::size_t& iterations) {
    const Eigen::Index N = a.size();
    Eigen::Index start = 0;
    a.maxCoeff(&start);
    Vector y = Vector::Zero(N);
    y(start) = 1.0 / a(start);
    std::vector<bool> bound(static_cast<std::size_t>(N), true);
    bound[static_cast<std::size_t>(start)] = false;

    const std::size_t max_iter = 100 * static_cast<std::size_t>(N) + 100;
    for (iterations = 1; iterations <= max_iter; ++iterations) {
        std::vector<Eigen::Index> free;
        for (Eigen::Index i = 0; i < N; ++i) {
            if (!bound[static_cast<std::size_t>(i)]) free.push_back(i);
        }
        const auto nf = static_cast<Eigen::Index>(free.size());
        Matrix sff(nf, nf);
        Vector af(nf), yf(nf);
        for (Eigen::Index r = 0; r < nf; ++r) {
            af(r) = a(free[static_cast<std::size_t>(r)]);
            yf(r) = y(free[static_cast<std::size_t>(r)]);
            for (Eigen::Index c = 0; c < nf; ++c) sff(r, c) = S(free[static_cast<std::size_t>(r)], free[static_cast<std::size_t>(c)]);
        }
        const Vector x = sff.ldlt().solve(af);
        const double denom = af.dot(x);
        if (!(denom > 0.0) || !x.allFinite()) throw std::runtime_error("tangency: degenerate subproblem");
        const Vector target = x / denom;

        if (target.minCoeff() >= 0.0) {
            for (Eigen::Index r = 0; r < nf; ++r) y(free[static_cast<std::size_t>(r)]) = target(r);
            const Vector g = S * y;
            const double nu = y.dot(g);
            Eigen::Index release = -1;
            double worst = -1e-12 * std::max(nu, std::numeric_limits<double>::min()) * (1.0 + a.cwiseAbs().maxCoeff());
            for (Eigen::Index i = 0; i < N; ++i) {
                if (!bound[static_cast<std::size_t>(i)]) continue;
                const double lambda = g(i) - nu * a(i);
                if (lambda < worst) {
                    worst = lambda;
                    release = i;
                }
            }
            if (release < 0) return y;
            bound[static_cast<std::size_t>(release)] = false;
            continue;
        }

        // Step toward the subspace minimizer until a weight hits zero.
        double step = 1.0;
        Eigen::Index blocking = -1;
        for (Eigen::Index r = 0; r < nf; ++r) {
            const double p = target(r) - yf(r);
            if (p < 0.0) {
                const double s = -yf(r) / p;
                if (s < step) {
                    step = s;
                    blocking = r;
                }
            }
        }
        for (Eigen::Index r = 0; r < nf; ++r) {
            y(free[static_cast<std::size_t>(r)]) = yf(r) + step * (target(r) - yf(r));
        }
        if (blocking >= 0) {
            const Eigen::Index i = free[static_cast<std::size_t>(blocking)];
            y(i) = 0.0;
            bound[static_cast<std::size_t>(i)] = true;
        }
        for (Eigen::Index i = 0; i < N; ++i) y(i) = std::max(y(i), 0.0);
    }
    throw std::runtime_error("tangency: active-set iteration limit reached");
}

Matrix ridged(const Matrix& sigma) {
    Matrix s = 0.5 * (sigma + sigma.transpose());
    const double tr = s.trace() / static_cast<double>(s.rows());
    s.diagonal().array() += 1e-8 * (tr > 0.0 ? tr : 1.0);
    return s;
}

void check_square(const Vector& mu, const Matrix& sigma) {
    if (mu.size() == 0 || sigma.rows() != mu.size() || sigma.cols() != mu.size()) {
        throw std::invalid_argument("portfolio: mu and sigma dimensions disagree");
    }
    if (!mu.allFinite() || !sigma.allFinite()) throw std::invalid_argument("portfolio: non-finite moments");
}

} // namespace

TangencyResult tangency_long_only(const Vector& mu, const Matrix& sigma) {
    check_square(mu, sigma);
    const Matrix s = ridged(sigma);
    TangencyResult r;
    Vector a = mu;
    if (!(mu.maxCoeff() > 0.0)) {
        r.min_variance_fallback = true;
        a = Vector::Ones(mu.size());
    }
    const Vector y = simplex_qp(a, s, r.iterations);
    r.weights = y / y.sum();
    return r;
}

Vector min_variance_long_only(const Matrix& sigma) {
    const Vector ones = Vector::Ones(sigma.rows());
    check_square(ones, sigma);
    std::size_t it = 0;
    const Vector y = simplex_qp(ones, ridged(sigma), it);
    return y / y.sum();
}

double sharpe(const Vector& w, const Vector& mu, const Matrix& sigma) {
    return w.dot(mu) / std::sqrt(w.dot(sigma * w));
}

Matrix sample_covariance(const Matrix& returns) {
    if (returns.rows() < 2) throw std::invalid_argument("sample_covariance: need at least two rows");
    const Matrix c = returns.rowwise() - returns.colwise().mean();
    const Matrix s = (c.transpose() * c) / static_cast<double>(returns.rows() - 1);
    return 0.5 * (s + s.transpose());
}

ShrinkageEstimate ledoit_wolf(const Matrix& returns) {
    if (returns.rows() < 1 || returns.cols() < 1) throw std::invalid_argument("ledoit_wolf: empty window");
    const auto T = static_cast<double>(returns.rows());
    const auto N = static_cast<double>(returns.cols());
    const Matrix x = returns.rowwise() - returns.colwise().mean();
    Matrix s = (x.transpose() * x) / T;
    s = 0.5 * (s + s.transpose());
    const double m = s.trace() / N;
    Matrix target = Matrix::Identity(s.rows(), s.cols()) * m;
    const double d2 = (s - target).squaredNorm() / N;
    ShrinkageEstimate out;
    if (!(d2 > 0.0)) {
        out.intensity = 1.0;
        out.cov = target;
        return out;
    }
    const double s_norm2 = s.squaredNorm();
    double bbar2 = 0.0;
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const Vector xt = x.row(t).transpose();
        const double xx = xt.squaredNorm();
        bbar2 += (xx * xx - 2.0 * xt.dot(s * xt) + s_norm2) / N;
    }
    bbar2 /= T * T;
    const double b2 = std::min(bbar2, d2);
    out.intensity = std::clamp(b2 / d2, 0.0, 1.0);
    out.cov = out.intensity * target + (1.0 - out.intensity) * s;
    return out;
}

Matrix factor_model_covariance(const Matrix& returns, const Matrix& factors) {
    return factor::factor_covariance(factor::ols(returns, factors), factors);
}

const char* to_string(CovarianceKind k) {
    switch (k) {
    case CovarianceKind::Sample: return "sample";
    case CovarianceKind::LedoitWolf: return "ledoit_wolf";
    case CovarianceKind::Factor: return "factor";
    }
    return "?";
}

Matrix benchmark_covariance(const Matrix& returns, const Matrix& factors, CovarianceKind kind) {
    if (returns.rows() < 2) throw std::invalid_argument("benchmark_covariance: window too short");
    switch (kind) {
    case CovarianceKind::Sample: return sample_covariance(returns);
    case CovarianceKind::LedoitWolf: return ledoit_wolf(returns).cov;
    case CovarianceKind::Factor: return factor_model_covariance(returns, factors);
    }
    throw std::logic_error("unreachable");
}

PerformanceReport performance(const Vector& r, const Vector& turnover) {
    PerformanceReport p;
    const Eigen::Index n = r.size();
    if (n == 0) throw std::invalid_argument("performance: empty return series");
    const double mean = r.mean();
    p.annual_return = 252.0 * mean;
    const double sd = n > 1 ? std::sqrt((r.array() - mean).square().sum() / static_cast<double>(n - 1)) : 0.0;
    p.annual_std = std::sqrt(252.0) * sd;
    if (sd > 0.0) {
        p.sharpe = p.annual_return / p.annual_std;
    } else {
        p.sharpe = std::numeric_limits<double>::quiet_NaN();
        p.sharpe_defined = false;
    }
    double wealth = 1.0, peak = 1.0, mdd = 0.0;
    for (Eigen::Index s = 0; s < n; ++s) {
        wealth *= 1.0 + r(s);
        peak = std::max(peak, wealth);
        mdd = std::min(mdd, wealth / peak - 1.0);
    }
    p.max_drawdown = mdd;
    if (turnover.size() > 1) p.daily_turnover = turnover.tail(turnover.size() - 1).mean();
    p.monthly_turnover = 21.0 * p.daily_turnover;
    return p;
}

BacktestResult backtest(const Matrix& weights, const Matrix& returns, double cost_bps) {
    if (weights.rows() != returns.rows() || weights.cols() != returns.cols() || weights.rows() == 0) {
        throw std::invalid_argument("backtest: weights and returns must have the same non-empty shape");
    }
    if (!(cost_bps >= 0.0)) throw std::invalid_argument("backtest: cost_bps must be non-negative");
    const Eigen::Index S = returns.rows();
    for (Eigen::Index s = 0; s < S; ++s) {
        if (!returns.row(s).allFinite()) throw std::invalid_argument("backtest: missing return on row " + std::to_string(s));
        if (!weights.row(s).allFinite() || weights.row(s).minCoeff() < -1e-12 || std::abs(weights.row(s).sum() - 1.0) > 1e-9) {
            throw std::invalid_argument("backtest: weights on row " + std::to_string(s) + " are not on the simplex");
        }
    }
    BacktestResult b;
    b.weights = weights;
    b.gross_returns.resize(S);
    b.turnover = Vector::Zero(S);
    const double c = cost_bps * 1e-4;
    Vector drifted;
    for (Eigen::Index s = 0; s < S; ++s) {
        const Vector w = weights.row(s).transpose();
        if (s > 0) b.turnover(s) = (w - drifted).cwiseAbs().sum();
        const Vector r = returns.row(s).transpose();
        b.gross_returns(s) = w.dot(r);
        drifted = w.cwiseProduct((Vector::Ones(w.size()) + r)) / (1.0 + b.gross_returns(s));
    }
    b.net_returns = b.gross_returns - c * b.turnover;
    b.report = performance(b.net_returns, b.turnover);
    return b;
}

} // namespace marketgan::portfolio
