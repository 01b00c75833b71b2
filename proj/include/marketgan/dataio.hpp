// dataio.hpp
//
// Dated panels, strict CSV I/O, covariate forward-fill and standardization,
// nearest-neighbour return imputation, and a simulated market for tests.

#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace marketgan::data {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Date = std::chrono::year_month_day;
using MissingMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Parses YYYY-MM-DD; throws std::invalid_argument otherwise.
Date parse_date(std::string_view text);
std::string format_date(Date d);

class CsvError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CoverageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Rows are dates, columns are named series. Missing cells are NaN.
struct Panel {
    std::vector<Date> dates;
    std::vector<std::string> columns;
    Matrix values;

    std::size_t rows() const noexcept { return dates.size(); }
    std::size_t cols() const noexcept { return columns.size(); }
    std::size_t column_index(std::string_view name) const;  ///< throws std::out_of_range
    Panel slice_rows(std::size_t begin, std::size_t end) const;
    void validate() const;
};

/// Header "date,<names...>"; cells are numbers, "" or "NA" (missing).
Panel read_csv(const std::string& path);
Panel parse_csv(std::string_view text, const std::string& source = "<memory>");
void write_csv(const std::string& path, const Panel& panel);

/// The eight macro predictors, in conditioning order.
const std::vector<std::string>& covariate_names();

/// Step function: each calendar date carries the latest observation dated on
/// or before it. Throws CoverageError if the first date has no prior value.
Panel forward_fill_covariates(const Panel& raw, const std::vector<Date>& calendar);

struct Standardizer {
    Vector mean;
    Vector scale;

    /// Column mean and sample std over the given rows; zero std maps to 1.
    static Standardizer fit(const Matrix& rows);
    Matrix apply(const Matrix& x) const;
};

struct MarketDataset {
    Panel returns;     ///< excess returns, NaN where missing
    Panel factors;     ///< K factor columns
    Panel covariates;  ///< daily, forward-filled, not standardized
    MissingMask missing;

    const std::vector<Date>& calendar() const noexcept { return returns.dates; }
    std::size_t num_dates() const noexcept { return returns.rows(); }
    std::size_t num_assets() const noexcept { return returns.cols(); }
    std::size_t num_factors() const noexcept { return factors.cols(); }
    void validate() const;
};

struct LoadOptions {
    std::vector<std::string> factor_columns;  ///< empty: all except the risk-free column
    std::optional<std::string> risk_free_column;  ///< subtracted from returns when present
};

/// Returns and factors must share the calendar; covariates are monthly and
/// forward-filled onto it.
MarketDataset load_dataset(const std::string& returns_csv, const std::string& factors_csv,
                           const std::string& covariates_csv, const LoadOptions& options = {});

/// Fill of one asset column. For each missing row, the k observed rows
/// nearest in covariate space (ties: earlier row first) contribute
/// alpha_d + beta_d . F_missing; the fill is the mean of those values.
/// alpha: per-row intercepts, beta: per-row loadings (T x K), valid on
/// observed rows.
Vector impute_column(const Vector& returns, const Matrix& factors, const Matrix& covariates, const Vector& alpha,
                     const Matrix& beta, std::size_t k_neighbors);

struct ImputationResult {
    Panel returns;                      ///< included assets only, no missing cells
    std::vector<std::string> excluded;  ///< assets with fewer than K + 2 observations
    std::size_t filled = 0;
};

/// Per-row coefficients come from an OLS over the asset's last `window`
/// observations up to that row, or the full-sample fit while fewer than
/// window rows are available. `covariates` should already be standardized.
ImputationResult impute_missing_returns(const Panel& returns, const Matrix& factors, const Matrix& covariates,
                                        std::size_t k_neighbors = 5, std::size_t window = 252);

/// Half-open row ranges; validation is the most recent block.
struct SplitSpec {
    std::size_t train_begin = 0, train_end = 0;
    std::size_t validation_begin = 0, validation_end = 0;

    std::size_t train_size() const noexcept { return train_end - train_begin; }
    std::size_t validation_size() const noexcept { return validation_end - validation_begin; }
};

/// 7:1 split of [begin, end) by count, validation last.
SplitSpec split_train_validation(std::size_t begin, std::size_t end);

/// Ground-truth factor model for the simulated market. Row t uses the
/// coefficients of t - 1 and the factor and residual shocks of t.
struct FixtureSpec {
    std::size_t num_dates = 4000;
    std::size_t num_assets = 5;
    std::size_t num_factors = 1;
    std::uint64_t seed = 1;
    Date start{std::chrono::year{2000}, std::chrono::January, std::chrono::day{3}};

    double factor_mean = 0.0003;
    double factor_vol = 0.01;
    double alpha_scale = 0.0001;
    double beta_mean = 1.0;
    double beta_dispersion = 0.3;
    double beta_drift = 0.1;          ///< stationary std of the beta deviation
    double beta_persistence = 0.995;
    double sigma_level = 0.012;
    double vol_persistence = 0.95;    ///< AR(1) coefficient of log sigma
    double vol_of_vol = 0.1;          ///< innovation std of log sigma
    double leverage = -0.5;           ///< correlation of log-vol innovations with the last shock
    double residual_correlation = 0.0;
    double missing_rate = 0.0;

    void validate() const;
};

struct GroundTruth {
    Matrix alpha;  ///< T x N
    Matrix beta;   ///< T x (N K), asset-major
    Matrix sigma;  ///< T x N
    Matrix eps;    ///< T x N standardized residual shocks
};

struct Fixture {
    MarketDataset dataset;
    Panel raw_covariates;  ///< monthly releases
    Panel complete_returns;  ///< before missing cells were removed
    GroundTruth truth;
};

Fixture simulate_market(const FixtureSpec& spec);

/// Writes returns.csv, factors.csv, covariates.csv (monthly) and truth.csv.
void write_fixture(const std::string& directory, const Fixture& fixture);

} // namespace marketgan::data
