#include "marketgan/dataio.hpp"

#include "marketgan/factor.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace marketgan::data {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool all_digits(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

int to_int(std::string_view s) {
    int v = 0;
    std::from_chars(s.data(), s.data() + s.size(), v);
    return v;
}

std::string number_text(double v) {
    if (std::isnan(v)) return "NA";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

} // namespace

Date parse_date(std::string_view text) {
    text = trim(text);
    if (text.size() != 10 || text[4] != '-' || text[7] != '-' || !all_digits(text.substr(0, 4)) ||
        !all_digits(text.substr(5, 2)) || !all_digits(text.substr(8, 2))) {
        throw std::invalid_argument("not an ISO date (YYYY-MM-DD): '" + std::string(text) + "'");
    }
    const Date d{std::chrono::year{to_int(text.substr(0, 4))},
                 std::chrono::month{static_cast<unsigned>(to_int(text.substr(5, 2)))},
                 std::chrono::day{static_cast<unsigned>(to_int(text.substr(8, 2)))}};
    if (!d.ok()) throw std::invalid_argument("invalid calendar date '" + std::string(text) + "'");
    return d;
}

std::string format_date(Date d) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(d.year()), static_cast<unsigned>(d.month()),
                  static_cast<unsigned>(d.day()));
    return buf;
}

std::size_t Panel::column_index(std::string_view name) const {
    for (std::size_t j = 0; j < columns.size(); ++j) {
        if (columns[j] == name) return j;
    }
    throw std::out_of_range("no column named '" + std::string(name) + "'");
}

Panel Panel::slice_rows(std::size_t begin, std::size_t end) const {
    if (begin > end || end > rows()) throw std::out_of_range("Panel::slice_rows: bad range");
    Panel p;
    p.dates.assign(dates.begin() + static_cast<std::ptrdiff_t>(begin), dates.begin() + static_cast<std::ptrdiff_t>(end));
    p.columns = columns;
    p.values = values.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin));
    return p;
}

void Panel::validate() const {
    if (static_cast<std::size_t>(values.rows()) != dates.size() ||
        static_cast<std::size_t>(values.cols()) != columns.size()) {
        throw std::invalid_argument("panel shape does not match its dates and columns");
    }
    for (std::size_t t = 1; t < dates.size(); ++t) {
        if (!(dates[t - 1] < dates[t])) throw std::invalid_argument("panel dates must be strictly increasing");
    }
}

Panel parse_csv(std::string_view text, const std::string& source) {
    Panel p;
    std::vector<double> cells;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    bool header_seen = false;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (trim(line).empty()) {
            if (pos > text.size()) break;
            continue;
        }
        const auto fields = split_fields(line);
        const std::string where = source + ":" + std::to_string(line_no);
        if (!header_seen) {
            if (fields.size() < 2) throw CsvError(where + ": header needs a date column and at least one series");
            for (std::size_t j = 1; j < fields.size(); ++j) {
                const auto name = trim(fields[j]);
                if (name.empty()) throw CsvError(where + ": empty column name");
                p.columns.emplace_back(name);
            }
            header_seen = true;
            continue;
        }
        if (fields.size() != p.columns.size() + 1) {
            throw CsvError(where + ": expected " + std::to_string(p.columns.size() + 1) + " fields, found " +
                           std::to_string(fields.size()));
        }
        try {
            p.dates.push_back(parse_date(fields[0]));
        } catch (const std::invalid_argument& e) {
            throw CsvError(where + ": " + e.what());
        }
        for (std::size_t j = 1; j < fields.size(); ++j) {
            const auto cell = trim(fields[j]);
            if (cell.empty() || cell == "NA" || cell == "\"\"") {
                cells.push_back(kNaN);
                continue;
            }
            double v = 0.0;
            const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || !std::isfinite(v)) {
                throw CsvError(where + ": non-numeric cell '" + std::string(cell) + "' in column " + p.columns[j - 1]);
            }
            cells.push_back(v);
        }
    }
    if (!header_seen) throw CsvError(source + ": empty file");
    p.values.resize(static_cast<Eigen::Index>(p.dates.size()), static_cast<Eigen::Index>(p.columns.size()));
    for (std::size_t t = 0; t < p.dates.size(); ++t) {
        for (std::size_t j = 0; j < p.columns.size(); ++j) {
            p.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = cells[t * p.columns.size() + j];
        }
    }
    try {
        p.validate();
    } catch (const std::invalid_argument& e) {
        throw CsvError(source + ": " + e.what());
    }
    return p;
}

Panel read_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CsvError("cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_csv(ss.str(), path);
}

void write_csv(const std::string& path, const Panel& panel) {
    panel.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CsvError("cannot write " + path);
    os << "date";
    for (const auto& c : panel.columns) os << ',' << c;
    os << '\n';
    for (std::size_t t = 0; t < panel.rows(); ++t) {
        os << format_date(panel.dates[t]);
        for (std::size_t j = 0; j < panel.cols(); ++j) {
            os << ',' << number_text(panel.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)));
        }
        os << '\n';
    }
}

const std::vector<std::string>& covariate_names() {
    static const std::vector<std::string> names{"dp", "ep", "bm", "tbl", "tms", "dfy", "ntis", "svar"};
    return names;
}

Panel forward_fill_covariates(const Panel& raw, const std::vector<Date>& calendar) {
    raw.validate();
    Panel out;
    out.dates = calendar;
    out.columns = raw.columns;
    out.values = Matrix::Constant(static_cast<Eigen::Index>(calendar.size()), static_cast<Eigen::Index>(raw.cols()), kNaN);
    Eigen::RowVectorXd latest = Eigen::RowVectorXd::Constant(static_cast<Eigen::Index>(raw.cols()), kNaN);
    std::size_t next = 0;
    for (std::size_t t = 0; t < calendar.size(); ++t) {
        while (next < raw.rows() && raw.dates[next] <= calendar[t]) {
            for (Eigen::Index j = 0; j < latest.size(); ++j) {
                const double v = raw.values(static_cast<Eigen::Index>(next), j);
                if (!std::isnan(v)) latest(j) = v;
            }
            ++next;
        }
        for (Eigen::Index j = 0; j < latest.size(); ++j) {
            if (std::isnan(latest(j))) {
                throw CoverageError("covariate '" + raw.columns[static_cast<std::size_t>(j)] +
                                    "' has no observation on or before " + format_date(calendar[t]));
            }
        }
        out.values.row(static_cast<Eigen::Index>(t)) = latest;
    }
    return out;
}

Standardizer Standardizer::fit(const Matrix& rows) {
    if (rows.rows() < 2) throw std::invalid_argument("Standardizer::fit needs at least two rows");
    Standardizer s;
    s.mean = rows.colwise().mean().transpose();
    s.scale.resize(rows.cols());
    for (Eigen::Index j = 0; j < rows.cols(); ++j) {
        const double var = (rows.col(j).array() - s.mean(j)).square().sum() / static_cast<double>(rows.rows() - 1);
        s.scale(j) = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
    if (x.cols() != mean.size()) throw std::invalid_argument("Standardizer::apply: column mismatch");
    return ((x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
}

void MarketDataset::validate() const {
    returns.validate();
    factors.validate();
    covariates.validate();
    if (factors.dates != returns.dates || covariates.dates != returns.dates) {
        throw std::invalid_argument("returns, factors and covariates must share one calendar");
    }
    if (missing.rows() != returns.values.rows() || missing.cols() != returns.values.cols()) {
        throw std::invalid_argument("missing mask shape mismatch");
    }
    if (!factors.values.allFinite()) throw std::invalid_argument("factor panel has missing values");
    if (!covariates.values.allFinite()) throw std::invalid_argument("covariate panel has missing values");
    for (Eigen::Index t = 0; t < returns.values.rows(); ++t) {
        for (Eigen::Index i = 0; i < returns.values.cols(); ++i) {
            if (std::isnan(returns.values(t, i)) != missing(t, i)) {
                throw std::invalid_argument("returns contain missing values outside the missing mask");
            }
        }
    }
}

MarketDataset load_dataset(const std::string& returns_csv, const std::string& factors_csv,
                           const std::string& covariates_csv, const LoadOptions& options) {
    MarketDataset ds;
    ds.returns = read_csv(returns_csv);
    const Panel factors = read_csv(factors_csv);
    if (factors.dates != ds.returns.dates) throw CsvError(factors_csv + ": calendar differs from " + returns_csv);

    std::vector<std::string> names = options.factor_columns;
    if (names.empty()) {
        for (const auto& c : factors.columns) {
            if (!options.risk_free_column || c != *options.risk_free_column) names.push_back(c);
        }
    }
    ds.factors.dates = factors.dates;
    ds.factors.columns = names;
    ds.factors.values.resize(factors.values.rows(), static_cast<Eigen::Index>(names.size()));
    for (std::size_t k = 0; k < names.size(); ++k) {
        ds.factors.values.col(static_cast<Eigen::Index>(k)) =
            factors.values.col(static_cast<Eigen::Index>(factors.column_index(names[k])));
    }
    if (options.risk_free_column) {
        const Vector rf = factors.values.col(static_cast<Eigen::Index>(factors.column_index(*options.risk_free_column)));
        if (!rf.allFinite()) throw CsvError(factors_csv + ": risk-free column has missing values");
        ds.returns.values.colwise() -= rf;
    }
    ds.covariates = forward_fill_covariates(read_csv(covariates_csv), ds.returns.dates);
    ds.missing = ds.returns.values.array().isNaN();
    ds.validate();
    return ds;
}

Vector impute_column(const Vector& returns, const Matrix& factors, const Matrix& covariates, const Vector& alpha,
                     const Matrix& beta, std::size_t k_neighbors) {
    const Eigen::Index T = returns.size();
    if (factors.rows() != T || covariates.rows() != T || alpha.size() != T || beta.rows() != T ||
        beta.cols() != factors.cols()) {
        throw std::invalid_argument("impute_column: row or column mismatch");
    }
    if (k_neighbors == 0) throw std::invalid_argument("impute_column: k_neighbors must be positive");
    std::vector<Eigen::Index> observed;
    for (Eigen::Index t = 0; t < T; ++t) {
        if (!std::isnan(returns(t))) observed.push_back(t);
    }
    Vector out = returns;
    if (observed.size() == static_cast<std::size_t>(T)) return out;
    if (observed.empty()) throw std::invalid_argument("impute_column: no observed rows");
    const std::size_t k = std::min(k_neighbors, observed.size());
    std::vector<std::pair<double, Eigen::Index>> dist(observed.size());
    for (Eigen::Index t = 0; t < T; ++t) {
        if (!std::isnan(returns(t))) continue;
        for (std::size_t j = 0; j < observed.size(); ++j) {
            dist[j] = {(covariates.row(t) - covariates.row(observed[j])).squaredNorm(), observed[j]};
        }
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const Eigen::Index d = dist[j].second;
            sum += alpha(d) + beta.row(d).dot(factors.row(t));
        }
        out(t) = sum / static_cast<double>(k);
    }
    return out;
}

ImputationResult impute_missing_returns(const Panel& returns, const Matrix& factors, const Matrix& covariates,
                                        std::size_t k_neighbors, std::size_t window) {
    returns.validate();
    const auto T = static_cast<Eigen::Index>(returns.rows());
    const Eigen::Index K = factors.cols();
    if (factors.rows() != T || covariates.rows() != T) throw std::invalid_argument("impute: calendar mismatch");
    ImputationResult res;
    res.returns.dates = returns.dates;
    std::vector<Vector> kept;
    for (std::size_t i = 0; i < returns.cols(); ++i) {
        const Vector col = returns.values.col(static_cast<Eigen::Index>(i));
        std::vector<Eigen::Index> obs;
        for (Eigen::Index t = 0; t < T; ++t) {
            if (!std::isnan(col(t))) obs.push_back(t);
        }
        if (obs.size() < static_cast<std::size_t>(K + 2)) {
            res.excluded.push_back(returns.columns[i]);
            continue;
        }
        if (obs.size() == static_cast<std::size_t>(T)) {
            res.returns.columns.push_back(returns.columns[i]);
            kept.push_back(col);
            continue;
        }
        auto gather = [&](std::size_t from, std::size_t to, Matrix& r, Matrix& f) {
            r.resize(static_cast<Eigen::Index>(to - from), 1);
            f.resize(static_cast<Eigen::Index>(to - from), K);
            for (std::size_t j = from; j < to; ++j) {
                r(static_cast<Eigen::Index>(j - from), 0) = col(obs[j]);
                f.row(static_cast<Eigen::Index>(j - from)) = factors.row(obs[j]);
            }
        };
        Matrix r, f;
        gather(0, obs.size(), r, f);
        factor::CoefficientSet full;
        try {
            full = factor::ols(r, f);
        } catch (const factor::SingularDesignError&) {
            res.excluded.push_back(returns.columns[i]);
            continue;
        }
        Vector alpha = Vector::Constant(T, kNaN);
        Matrix beta = Matrix::Constant(T, K, kNaN);
        for (std::size_t j = 0; j < obs.size(); ++j) {
            factor::CoefficientSet c = full;
            if (j + 1 >= window) {
                gather(j + 1 - window, j + 1, r, f);
                try {
                    c = factor::ols(r, f);
                } catch (const factor::SingularDesignError&) {
                    c = full;
                }
            }
            alpha(obs[j]) = c.alpha(0);
            beta.row(obs[j]) = c.beta.row(0);
        }
        const Vector filled = impute_column(col, factors, covariates, alpha, beta, k_neighbors);
        res.filled += static_cast<std::size_t>(T) - obs.size();
        res.returns.columns.push_back(returns.columns[i]);
        kept.push_back(filled);
    }
    res.returns.values.resize(T, static_cast<Eigen::Index>(kept.size()));
    for (std::size_t j = 0; j < kept.size(); ++j) res.returns.values.col(static_cast<Eigen::Index>(j)) = kept[j];
    return res;
}

SplitSpec split_train_validation(std::size_t begin, std::size_t end) {
    if (end < begin + 8) throw std::invalid_argument("split_train_validation: need at least 8 rows");
    const std::size_t n = end - begin;
    const std::size_t validation = (n + 4) / 8;
    SplitSpec s;
    s.train_begin = begin;
    s.train_end = end - validation;
    s.validation_begin = s.train_end;
    s.validation_end = end;
    return s;
}

void FixtureSpec::validate() const {
    if (num_dates < 2 || num_assets == 0 || num_factors == 0) throw std::invalid_argument("fixture: empty dimensions");
    if (!(residual_correlation >= 0.0 && residual_correlation < 1.0)) {
        throw std::invalid_argument("fixture: residual_correlation must lie in [0, 1)");
    }
    if (!(leverage >= -1.0 && leverage <= 1.0)) throw std::invalid_argument("fixture: leverage must lie in [-1, 1]");
    if (!(std::abs(vol_persistence) < 1.0) || !(std::abs(beta_persistence) < 1.0)) {
        throw std::invalid_argument("fixture: persistence must lie in (-1, 1)");
    }
    if (!(sigma_level >= 0.0) || !(vol_of_vol >= 0.0) || !(factor_vol >= 0.0) || !(beta_drift >= 0.0)) {
        throw std::invalid_argument("fixture: scales must be non-negative");
    }
    if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw std::invalid_argument("fixture: missing_rate in [0, 1)");
}

namespace {

std::vector<Date> weekday_calendar(Date start, std::size_t n) {
    std::vector<Date> out;
    out.reserve(n);
    std::chrono::sys_days d{start};
    while (out.size() < n) {
        const std::chrono::weekday wd{d};
        if (wd != std::chrono::Saturday && wd != std::chrono::Sunday) out.emplace_back(d);
        d += std::chrono::days{1};
    }
    return out;
}

} // namespace

Fixture simulate_market(const FixtureSpec& spec) {
    spec.validate();
    const auto T = static_cast<Eigen::Index>(spec.num_dates);
    const auto N = static_cast<Eigen::Index>(spec.num_assets);
    const auto K = static_cast<Eigen::Index>(spec.num_factors);
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> n01(0.0, 1.0);

    Vector alpha(N);
    Matrix beta_bar(N, K), dev(N, K);
    Vector h(N);
    const double h_sd = spec.vol_of_vol / std::sqrt(1.0 - spec.vol_persistence * spec.vol_persistence);
    for (Eigen::Index i = 0; i < N; ++i) {
        alpha(i) = spec.alpha_scale * n01(rng);
        for (Eigen::Index k = 0; k < K; ++k) {
            beta_bar(i, k) = (k == 0 ? spec.beta_mean : 0.0) + spec.beta_dispersion * n01(rng);
            dev(i, k) = spec.beta_drift * n01(rng);
        }
        h(i) = h_sd * n01(rng);
    }
    const double beta_innov = spec.beta_drift * std::sqrt(1.0 - spec.beta_persistence * spec.beta_persistence);
    const double rho = spec.residual_correlation;
    const double lev = spec.leverage;

    Fixture fx;
    GroundTruth& gt = fx.truth;
    gt.alpha.resize(T, N);
    gt.beta.resize(T, N * K);
    gt.sigma.resize(T, N);
    gt.eps.resize(T, N);
    Matrix returns(T, N), factors(T, K);
    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index k = 0; k < K; ++k) factors(t, k) = spec.factor_mean + spec.factor_vol * n01(rng);
        const double common = n01(rng);
        for (Eigen::Index i = 0; i < N; ++i) {
            const double e = std::sqrt(rho) * common + std::sqrt(1.0 - rho) * n01(rng);
            const double sigma = spec.sigma_level * std::exp(h(i));
            double bf = 0.0;
            for (Eigen::Index k = 0; k < K; ++k) {
                const double b = beta_bar(i, k) + dev(i, k);
                gt.beta(t, i * K + k) = b;
                bf += b * factors(t, k);
            }
            gt.alpha(t, i) = alpha(i);
            gt.sigma(t, i) = sigma;
            gt.eps(t, i) = e;
            returns(t, i) = (alpha(i) + bf) + sigma * e;
        }
        for (Eigen::Index i = 0; i < N; ++i) {
            for (Eigen::Index k = 0; k < K; ++k) dev(i, k) = spec.beta_persistence * dev(i, k) + beta_innov * n01(rng);
            const double shock = lev * gt.eps(t, i) + std::sqrt(1.0 - lev * lev) * n01(rng);
            h(i) = spec.vol_persistence * h(i) + spec.vol_of_vol * shock;
        }
    }

    const auto calendar = weekday_calendar(spec.start, spec.num_dates);
    std::vector<std::string> assets, factor_names;
    for (Eigen::Index i = 0; i < N; ++i) assets.push_back("A" + std::to_string(i + 1));
    static const char* kFactorNames[] = {"MKT", "SMB", "HML", "RMW", "CMA"};
    for (Eigen::Index k = 0; k < K; ++k) {
        factor_names.push_back(k < 5 ? kFactorNames[k] : "F" + std::to_string(k + 1));
    }

    // Monthly covariates released on the first trading day of each month.
    const auto& cov_names = covariate_names();
    const std::vector<double> level{0.02, 0.05, 0.3, 0.02, 0.015, 0.01, 0.01, 0.002};
    const std::vector<double> spread{0.005, 0.01, 0.05, 0.01, 0.005, 0.003, 0.01, 0.001};
    Panel& raw = fx.raw_covariates;
    raw.columns = cov_names;
    std::vector<double> state(cov_names.size());
    for (std::size_t j = 0; j < state.size(); ++j) state[j] = level[j] + spread[j] * n01(rng);
    std::vector<std::vector<double>> rows;
    for (std::size_t t = 0; t < calendar.size(); ++t) {
        if (t > 0 && calendar[t].month() == calendar[t - 1].month()) continue;
        if (t > 0) {
            for (std::size_t j = 0; j < state.size(); ++j) {
                state[j] = level[j] + 0.9 * (state[j] - level[j]) + spread[j] * std::sqrt(1.0 - 0.81) * n01(rng);
            }
        }
        raw.dates.push_back(calendar[t]);
        rows.push_back(state);
    }
    raw.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cov_names.size()));
    for (std::size_t m = 0; m < rows.size(); ++m) {
        for (std::size_t j = 0; j < cov_names.size(); ++j) {
            raw.values(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(j)) = rows[m][j];
        }
    }

    fx.complete_returns = Panel{calendar, assets, returns};
    MarketDataset& ds = fx.dataset;
    ds.returns = fx.complete_returns;
    ds.factors = Panel{calendar, factor_names, factors};
    ds.covariates = forward_fill_covariates(raw, calendar);
    if (spec.missing_rate > 0.0) {
        std::bernoulli_distribution drop(spec.missing_rate);
        for (Eigen::Index t = 0; t < T; ++t) {
            for (Eigen::Index i = 0; i < N; ++i) {
                if (drop(rng)) ds.returns.values(t, i) = kNaN;
            }
        }
    }
    ds.missing = ds.returns.values.array().isNaN();
    ds.validate();
    return fx;
}

void write_fixture(const std::string& directory, const Fixture& fixture) {
    namespace fs = std::filesystem;
    fs::create_directories(directory);
    const fs::path dir(directory);
    const auto& ds = fixture.dataset;
    write_csv((dir / "returns.csv").string(), ds.returns);
    write_csv((dir / "factors.csv").string(), ds.factors);
    write_csv((dir / "covariates.csv").string(), fixture.raw_covariates);

    std::ofstream os((dir / "truth.csv").string(), std::ios::binary);
    if (!os) throw CsvError("cannot write truth.csv in " + directory);
    const std::size_t N = ds.num_assets(), K = ds.num_factors();
    os << "date,asset,alpha";
    for (std::size_t k = 1; k <= K; ++k) os << ",beta_" << k;
    os << ",sigma,eps\n";
    const auto& gt = fixture.truth;
    for (std::size_t t = 0; t < ds.num_dates(); ++t) {
        const auto tt = static_cast<Eigen::Index>(t);
        for (std::size_t i = 0; i < N; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            os << format_date(ds.calendar()[t]) << ',' << ds.returns.columns[i] << ',' << number_text(gt.alpha(tt, ii));
            for (std::size_t k = 0; k < K; ++k) os << ',' << number_text(gt.beta(tt, static_cast<Eigen::Index>(i * K + k)));
            os << ',' << number_text(gt.sigma(tt, ii)) << ',' << number_text(gt.eps(tt, ii)) << '\n';
        }
    }
}

} // namespace marketgan::data
