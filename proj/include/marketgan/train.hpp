// train.hpp
//
// Adversarial training of the generator and critic, correlation-based model
// selection, fine-tuning, rolling retraining, and path generation.
//
// Positions: a position u models the return realized at date u + 1, using the
// rolling coefficients and covariates of date u and the factors of u + 1.

#pragma once

#include "marketgan/dataio.hpp"
#include "marketgan/factor.hpp"
#include "marketgan/netgen.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace marketgan::train {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using netgen::Critic;
using netgen::CriticConfig;
using netgen::Generator;
using netgen::GeneratorConfig;

struct TrainConfig {
    std::size_t epochs = 300;
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.0;
    double adam_beta2 = 0.9;
    double adam_epsilon = 1e-8;
    std::size_t n_critic = 5;
    std::size_t n_generator = 1;
    double lambda = 10.0;
    std::size_t window = 0;             ///< T_L; 0 means RFS + 4 * 252
    std::size_t stride = 1;             ///< spacing of candidate window starts
    std::size_t batches_per_epoch = 0;  ///< 0: one pass over the shuffled starts
    std::size_t validation_paths = 10;
    std::size_t patience = 0;           ///< 0 disables early stopping
    std::size_t fine_tune_epochs = 10;
    double fine_tune_lr_scale = 0.1;
    double return_scale = 1.0;          ///< multiplies returns before the critic
    std::size_t rolling_epochs = 50;
    std::size_t rolling_patience = 20;
    std::size_t rolling_step = 63;

    void validate() const;
    std::size_t resolved_window(const GeneratorConfig& g) const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CriticConfig& c);
CriticConfig critic_config_from_json(const nlohmann::json& j);

/// Independent random streams of a run.
struct Seeds {
    std::uint64_t init = 1;
    std::uint64_t data = 2;
    std::uint64_t latent = 3;
    std::uint64_t dropout = 4;
};

/// Half-open range of positions.
struct PositionRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const noexcept { return end - begin; }
};

/// Everything the generator is conditioned on, on one calendar.
struct TrainingData {
    Matrix returns;     ///< T x N, no missing cells
    Matrix factors;     ///< T x K
    Matrix covariates;  ///< T x d_y, standardized
    factor::RollingCoefficients coeffs;
    std::vector<std::string> assets;
    std::vector<data::Date> dates;

    std::size_t num_dates() const noexcept { return static_cast<std::size_t>(returns.rows()); }
    std::size_t num_assets() const noexcept { return static_cast<std::size_t>(returns.cols()); }
    std::size_t num_factors() const noexcept { return static_cast<std::size_t>(factors.cols()); }
    std::size_t covariate_dim() const noexcept { return static_cast<std::size_t>(covariates.cols()); }
    /// Every position with coefficients and a following return.
    PositionRange positions() const;
    /// Realized returns r_{u+1} for u in the range, as rows.
    Matrix realized(PositionRange r) const;
};

struct PrepareOptions {
    std::size_t coefficient_window = 252;
    std::size_t k_neighbors = 5;
    std::size_t standardize_end = 0;  ///< covariate moments use rows [0, end); 0 means all rows
};

/// Imputes missing returns, standardizes covariates and fits rolling OLS.
/// Assets excluded by imputation are reported in `excluded`.
TrainingData prepare(const data::MarketDataset& ds, const PrepareOptions& options = {},
                     std::vector<std::string>* excluded = nullptr);

/// The 7:1 split of a position range, validation last.
std::pair<PositionRange, PositionRange> split(PositionRange r);

/// Conditioning and real returns for windows of length T starting at each
/// position in `starts`. z is drawn from `latent`.
struct Batch {
    netgen::GeneratorInputs inputs;
    ad::Tensor real;  ///< [B, N, T]
};
Batch make_batch(const TrainingData& d, const std::vector<std::size_t>& starts, std::size_t T, std::size_t latent_dim,
                 std::mt19937_64& latent);

/// Adam with bias correction over a fixed parameter list.
class Adam {
public:
    Adam() = default;
    Adam(std::vector<ad::Parameter*> params, double lr, double beta1, double beta2, double eps);

    void step();
    void zero_grad();
    double learning_rate() const noexcept { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }
    std::size_t steps() const noexcept { return t_; }

    nlohmann::json state() const;
    void load_state(const nlohmann::json& j);

private:
    std::vector<ad::Parameter*> params_;
    std::vector<ad::Tensor> m_, v_;
    double lr_ = 1e-3, beta1_ = 0.0, beta2_ = 0.9, eps_ = 1e-8;
    std::size_t t_ = 0;
};

/// Generated returns over a position range, one L x N matrix per path.
/// Each path is preceded by up to RFS - 1 positions of context, and runs
/// in eval mode.
std::vector<Matrix> generate_paths(Generator& gen, const TrainingData& d, PositionRange r, std::size_t num_paths,
                                   std::mt19937_64& latent);

/// `num_samples` draws of r_{u+1} given information up to date u, with the
/// factor realization at u + 1 replaced by `factors_next`. Runs in eval mode
/// over a context of up to RFS positions ending at u.
Matrix sample_next_returns(Generator& gen, const TrainingData& d, std::size_t u, const Vector& factors_next,
                           std::size_t num_samples, std::mt19937_64& latent);

/// Bootstrap paths: rolling coefficients, realized factors, N(0, I) residuals.
std::vector<Matrix> bootstrap_paths(const TrainingData& d, PositionRange r, std::size_t num_paths, std::uint64_t seed);

/// ||corr(real) - mean_p corr(path_p)||_F. Zero-variance assets raise
/// metrics::DegenerateDataError naming the asset.
double correlation_gap(const Matrix& real, const std::vector<Matrix>& paths, const std::vector<std::string>& assets);

class TrainingDivergedError : public std::runtime_error {
public:
    TrainingDivergedError(const std::string& what, nlohmann::json snapshot)
        : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
    const nlohmann::json& snapshot() const noexcept { return snapshot_; }

private:
    nlohmann::json snapshot_;
};

struct LogRow {
    std::string phase;
    std::size_t epoch = 0;
    std::size_t batch = 0;
    double critic_loss = 0.0;
    double generator_loss = 0.0;
    double wasserstein = 0.0;
    std::optional<double> validation_score;
};

void write_log_csv(const std::string& path, const std::vector<LogRow>& log);

struct FitSummary {
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;
    double best_score = 0.0;
    bool early_stopped = false;
};

class Trainer {
public:
    Trainer(const GeneratorConfig& g, const CriticConfig& c, const TrainConfig& t, const Seeds& seeds);
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    /// One epoch of critic and generator updates on windows inside `range`.
    /// With `end_inside` the windows only need their last position in range.
    void train_epoch(const TrainingData& d, PositionRange range, bool end_inside = false);

    double validation_score(const TrainingData& d, PositionRange validation);

    /// Trains until config().epochs (or early stop), scoring after every
    /// epoch; leaves the best-scoring parameters in place.
    FitSummary fit(const TrainingData& d, PositionRange train, PositionRange validation);
    FitSummary fit(const TrainingData& d, PositionRange train, PositionRange validation, std::size_t epochs,
                   std::size_t patience);

    /// Continues training on windows ending in the validation slice at the
    /// scaled learning rate.
    void fine_tune(const TrainingData& d, PositionRange validation);

    Generator& generator() { return gen_; }
    Critic& critic() { return critic_; }
    const TrainConfig& config() const noexcept { return config_; }
    const std::vector<LogRow>& log() const noexcept { return log_; }
    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t window() const noexcept { return window_; }
    const Seeds& seeds() const noexcept { return seeds_; }
    void set_learning_rate(double lr);
    /// Called after every scored epoch of fit(), e.g. to write a resumable
    /// checkpoint.
    void set_epoch_callback(std::function<void(const Trainer&)> cb) { on_epoch_ = std::move(cb); }
    /// Forgets the best-so-far snapshot, e.g. before a new rolling quarter.
    void reset_selection();
    double generator_learning_rate() const noexcept { return gen_opt_.learning_rate(); }
    double critic_learning_rate() const noexcept { return critic_opt_.learning_rate(); }

    nlohmann::json checkpoint() const;
    void save(const std::string& path) const;
    /// Restores a checkpoint written by save(); configs must match.
    void restore(const nlohmann::json& j);
    static std::unique_ptr<Trainer> load(const std::string& path);

private:
    void step_critic(const TrainingData& d, const std::vector<std::size_t>& starts, double& loss, double& w);
    void step_generator(const TrainingData& d, const std::vector<std::size_t>& starts, double& loss);
    std::vector<ad::Tensor> snapshot() const;
    void restore_snapshot(const std::vector<ad::Tensor>& s);
    std::vector<ad::Parameter*> all_parameters();
    std::vector<std::size_t> window_starts(const TrainingData& d, PositionRange range, bool end_inside) const;
    FitSummary fit_until(const TrainingData& d, PositionRange train, PositionRange validation, std::size_t target,
                         std::size_t patience);

    GeneratorConfig gen_config_;
    CriticConfig critic_config_;
    TrainConfig config_;
    Seeds seeds_;
    Generator gen_;
    Critic critic_;
    Adam gen_opt_, critic_opt_;
    std::mt19937_64 data_rng_, latent_rng_, dropout_rng_;
    std::size_t window_ = 0;
    std::size_t epoch_ = 0;
    std::string phase_ = "train";

    // model selection
    double best_score_ = 0.0;
    std::size_t best_epoch_ = 0;
    std::size_t since_best_ = 0;
    bool has_best_ = false;
    std::vector<ad::Tensor> best_;
    std::vector<LogRow> log_;
    std::function<void(const Trainer&)> on_epoch_;
};

struct RollingCheckpoint {
    std::size_t quarter = 0;
    PositionRange train, validation;
    nlohmann::json checkpoint;
    FitSummary summary;
};

/// Quarterly schedule: the in-sample window [first, end) moves forward by
/// `rolling_step` positions per quarter until `last_end`. Each quarter
/// warm-starts from the previous parameters, trains with early stopping and
/// fine-tunes. Quarters whose window cannot hold a training batch are skipped
/// and listed in `skipped`.
std::vector<RollingCheckpoint> rolling_retrain(Trainer& trainer, const TrainingData& d, PositionRange initial,
                                               std::size_t last_end, std::vector<std::size_t>* skipped = nullptr);

} // namespace marketgan::train
