#include "marketgan/train.hpp"

#include "marketgan/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace marketgan::train {

namespace {

using ad::Tensor;
using ad::Var;
using nlohmann::json;

std::string rng_state(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

void set_rng_state(std::mt19937_64& rng, const std::string& s) {
    std::istringstream is(s);
    is >> rng;
    if (!is) throw std::runtime_error("checkpoint has a malformed random state");
}

std::string format_number(double v) {
    if (!std::isfinite(v)) return "NA";
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.storage()}}; }

Tensor tensor_from_json(const json& j) {
    return Tensor(j.at("shape").get<ad::Shape>(), j.at("data").get<std::vector<double>>());
}

// Validation scores reuse one latent stream so epochs are compared on the
// same draws.
constexpr std::uint64_t kValidationStream = 0x5a17a11d5eedULL;

} // namespace

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
        fail("Adam betas must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) fail("adam_epsilon must be positive");
    if (n_critic == 0) fail("n_critic must be at least 1");
    if (n_generator > n_critic) fail("n_critic must be at least n_generator");
    if (!(lambda >= 0.0)) fail("lambda must be non-negative");
    if (stride == 0) fail("stride must be positive");
    if (validation_paths == 0) fail("validation_paths must be positive");
    if (!(fine_tune_lr_scale > 0.0)) fail("fine_tune_lr_scale must be positive");
    if (!(return_scale > 0.0)) fail("return_scale must be positive");
    if (rolling_step == 0) fail("rolling_step must be positive");
}

std::size_t TrainConfig::resolved_window(const GeneratorConfig& g) const {
    return window != 0 ? window : g.receptive_field() + 4 * 252;
}

json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_epsilon", c.adam_epsilon},
            {"n_critic", c.n_critic},
            {"n_generator", c.n_generator},
            {"lambda", c.lambda},
            {"window", c.window},
            {"stride", c.stride},
            {"batches_per_epoch", c.batches_per_epoch},
            {"validation_paths", c.validation_paths},
            {"patience", c.patience},
            {"fine_tune_epochs", c.fine_tune_epochs},
            {"fine_tune_lr_scale", c.fine_tune_lr_scale},
            {"return_scale", c.return_scale},
            {"rolling_epochs", c.rolling_epochs},
            {"rolling_patience", c.rolling_patience},
            {"rolling_step", c.rolling_step}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.n_critic = j.value("n_critic", c.n_critic);
    c.n_generator = j.value("n_generator", c.n_generator);
    c.lambda = j.value("lambda", c.lambda);
    c.window = j.value("window", c.window);
    c.stride = j.value("stride", c.stride);
    c.batches_per_epoch = j.value("batches_per_epoch", c.batches_per_epoch);
    c.validation_paths = j.value("validation_paths", c.validation_paths);
    c.patience = j.value("patience", c.patience);
    c.fine_tune_epochs = j.value("fine_tune_epochs", c.fine_tune_epochs);
    c.fine_tune_lr_scale = j.value("fine_tune_lr_scale", c.fine_tune_lr_scale);
    c.return_scale = j.value("return_scale", c.return_scale);
    c.rolling_epochs = j.value("rolling_epochs", c.rolling_epochs);
    c.rolling_patience = j.value("rolling_patience", c.rolling_patience);
    c.rolling_step = j.value("rolling_step", c.rolling_step);
    return c;
}

json to_json(const GeneratorConfig& c) {
    return {{"num_assets", c.num_assets},
            {"num_factors", c.num_factors},
            {"latent_dim", c.latent_dim},
            {"covariate_dim", c.covariate_dim},
            {"hidden", c.hidden},
            {"blocks", c.blocks},
            {"kernel_size", c.kernel_size},
            {"dilation_base", c.dilation_base},
            {"residual_hidden", c.residual_hidden},
            {"residual_blocks", c.residual_blocks},
            {"dropout", c.dropout},
            {"init_std", c.init_std},
            {"weight_norm", c.weight_norm}};
}

GeneratorConfig generator_config_from_json(const json& j) {
    GeneratorConfig c;
    c.num_assets = j.value("num_assets", c.num_assets);
    c.num_factors = j.value("num_factors", c.num_factors);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.covariate_dim = j.value("covariate_dim", c.covariate_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.blocks = j.value("blocks", c.blocks);
    c.kernel_size = j.value("kernel_size", c.kernel_size);
    c.dilation_base = j.value("dilation_base", c.dilation_base);
    c.residual_hidden = j.value("residual_hidden", c.residual_hidden);
    c.residual_blocks = j.value("residual_blocks", c.residual_blocks);
    c.dropout = j.value("dropout", c.dropout);
    c.init_std = j.value("init_std", c.init_std);
    c.weight_norm = j.value("weight_norm", c.weight_norm);
    return c;
}

json to_json(const CriticConfig& c) {
    return {{"num_assets", c.num_assets},
            {"covariate_dim", c.covariate_dim},
            {"window", c.window},
            {"hidden", c.hidden},
            {"blocks", c.blocks},
            {"kernel_size", c.kernel_size},
            {"dilation_base", c.dilation_base},
            {"dropout", c.dropout},
            {"init_std", c.init_std},
            {"weight_norm", c.weight_norm}};
}

CriticConfig critic_config_from_json(const json& j) {
    CriticConfig c;
    c.num_assets = j.value("num_assets", c.num_assets);
    c.covariate_dim = j.value("covariate_dim", c.covariate_dim);
    c.window = j.value("window", c.window);
    c.hidden = j.value("hidden", c.hidden);
    c.blocks = j.value("blocks", c.blocks);
    c.kernel_size = j.value("kernel_size", c.kernel_size);
    c.dilation_base = j.value("dilation_base", c.dilation_base);
    c.dropout = j.value("dropout", c.dropout);
    c.init_std = j.value("init_std", c.init_std);
    c.weight_norm = j.value("weight_norm", c.weight_norm);
    return c;
}

// ---------------------------------------------------------------------------
// Data

PositionRange TrainingData::positions() const {
    const std::size_t T = num_dates();
    if (coeffs.sets.empty() || T < 2) return {0, 0};
    const std::size_t end = std::min(coeffs.end(), T - 1);
    return {coeffs.first, std::max(coeffs.first, end)};
}

Matrix TrainingData::realized(PositionRange r) const {
    if (r.end > num_dates() - 1 || r.begin > r.end) throw std::out_of_range("realized: position range outside the data");
    return returns.middleRows(static_cast<Eigen::Index>(r.begin + 1), static_cast<Eigen::Index>(r.size()));
}

TrainingData prepare(const data::MarketDataset& ds, const PrepareOptions& options, std::vector<std::string>* excluded) {
    ds.validate();
    const std::size_t T = ds.num_dates();
    const std::size_t fit_end = options.standardize_end == 0 ? T : std::min(options.standardize_end, T);
    if (fit_end < 2) throw std::invalid_argument("prepare: need at least two rows to standardize covariates");
    const auto stdz = data::Standardizer::fit(ds.covariates.values.topRows(static_cast<Eigen::Index>(fit_end)));
    TrainingData d;
    d.covariates = stdz.apply(ds.covariates.values);
    d.factors = ds.factors.values;
    auto imputed = data::impute_missing_returns(ds.returns, d.factors, d.covariates, options.k_neighbors,
                                                options.coefficient_window);
    if (imputed.returns.cols() == 0) throw std::invalid_argument("prepare: every asset was excluded");
    d.returns = imputed.returns.values;
    d.assets = imputed.returns.columns;
    d.dates = ds.calendar();
    d.coeffs = factor::rolling_ols(d.returns, d.factors, options.coefficient_window);
    if (excluded != nullptr) *excluded = imputed.excluded;
    return d;
}

std::pair<PositionRange, PositionRange> split(PositionRange r) {
    const auto s = data::split_train_validation(r.begin, r.end);
    return {{s.train_begin, s.train_end}, {s.validation_begin, s.validation_end}};
}

Batch make_batch(const TrainingData& d, const std::vector<std::size_t>& starts, std::size_t T, std::size_t latent_dim,
                 std::mt19937_64& latent) {
    const std::size_t B = starts.size(), N = d.num_assets(), K = d.num_factors(), dy = d.covariate_dim();
    const auto range = d.positions();
    for (std::size_t s : starts) {
        if (s < range.begin || s + T > range.end)
            throw std::out_of_range("make_batch: window at " + std::to_string(s) + " leaves the usable positions");
    }
    Batch out;
    auto& in = out.inputs;
    in.y = Tensor({B, dy, T});
    in.alpha_hat = Tensor({B, N, T});
    in.beta_hat = Tensor({B, N * K, T});
    in.sigma_hat = Tensor({B, N, T});
    in.factors_next = Tensor({B, K, T});
    out.real = Tensor({B, N, T});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t u = starts[b] + t;
            const auto& c = d.coeffs.at(u);
            for (std::size_t j = 0; j < dy; ++j) in.y[(b * dy + j) * T + t] = d.covariates(u, j);
            for (std::size_t i = 0; i < N; ++i) {
                in.alpha_hat[(b * N + i) * T + t] = c.alpha(i);
                in.sigma_hat[(b * N + i) * T + t] = c.sigma(i);
                out.real[(b * N + i) * T + t] = d.returns(u + 1, i);
                for (std::size_t k = 0; k < K; ++k) in.beta_hat[(b * N * K + i * K + k) * T + t] = c.beta(i, k);
            }
            for (std::size_t k = 0; k < K; ++k) in.factors_next[(b * K + k) * T + t] = d.factors(u + 1, k);
        }
    }
    in.z = ad::random_normal({B, latent_dim, T + 1}, latent);
    return out;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<ad::Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto w = params_[i]->value.data();
        auto g = params_[i]->grad.data();
        auto m = m_[i].data();
        auto v = v_[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (auto* p : params_) p->grad.fill(0.0);
}

json Adam::state() const {
    json m = json::array(), v = json::array();
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m.push_back(tensor_json(m_[i]));
        v.push_back(tensor_json(v_[i]));
    }
    return {{"lr", lr_}, {"beta1", beta1_}, {"beta2", beta2_}, {"epsilon", eps_}, {"step", t_}, {"m", m}, {"v", v}};
}

void Adam::load_state(const json& j) {
    const auto& m = j.at("m");
    const auto& v = j.at("v");
    if (m.size() != params_.size() || v.size() != params_.size())
        throw std::runtime_error("optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i] = tensor_from_json(m[i]);
        v_[i] = tensor_from_json(v[i]);
        if (m_[i].shape() != params_[i]->value.shape() || v_[i].shape() != params_[i]->value.shape())
            throw std::runtime_error("optimizer state shape mismatch for " + params_[i]->name);
    }
    lr_ = j.at("lr").get<double>();
    beta1_ = j.at("beta1").get<double>();
    beta2_ = j.at("beta2").get<double>();
    eps_ = j.at("epsilon").get<double>();
    t_ = j.at("step").get<std::size_t>();
}

// ---------------------------------------------------------------------------
// Paths

std::vector<Matrix> generate_paths(Generator& gen, const TrainingData& d, PositionRange r, std::size_t num_paths,
                                   std::mt19937_64& latent) {
    const auto all = d.positions();
    if (r.begin < all.begin || r.end > all.end || r.begin >= r.end)
        throw std::out_of_range("generate_paths: range outside the usable positions");
    const std::size_t rfs = gen.config().receptive_field();
    const std::size_t context = std::min(r.begin - all.begin, rfs - 1);
    const std::size_t start = r.begin - context;
    const std::size_t T = r.end - start, N = d.num_assets();
    constexpr std::size_t kChunk = 8;

    std::vector<Matrix> paths;
    paths.reserve(num_paths);
    while (paths.size() < num_paths) {
        const std::size_t B = std::min(kChunk, num_paths - paths.size());
        Batch batch = make_batch(d, std::vector<std::size_t>(B, start), T, gen.config().latent_dim, latent);
        ad::Graph g;
        ad::Graph::NoGradScope no_grad(g);
        const auto out = gen.forward(g, batch.inputs, {});
        const Tensor& v = out.returns.value();
        for (std::size_t b = 0; b < B; ++b) {
            Matrix p(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(N));
            for (std::size_t t = context; t < T; ++t)
                for (std::size_t i = 0; i < N; ++i) p(t - context, i) = v[(b * N + i) * T + t];
            paths.push_back(std::move(p));
        }
    }
    return paths;
}

Matrix sample_next_returns(Generator& gen, const TrainingData& d, std::size_t u, const Vector& factors_next,
                           std::size_t num_samples, std::mt19937_64& latent) {
    const auto all = d.positions();
    if (u < all.begin || u >= d.num_dates() || !d.coeffs.has(u))
        throw std::out_of_range("sample_next_returns: no coefficients at position " + std::to_string(u));
    const std::size_t K = d.num_factors(), N = d.num_assets();
    if (static_cast<std::size_t>(factors_next.size()) != K) throw std::invalid_argument("sample_next_returns: factor size");
    const std::size_t context = std::min(u - all.begin, gen.config().receptive_field() - 1);
    const std::size_t start = u - context, T = context + 1;
    constexpr std::size_t kChunk = 512;

    // make_batch needs r_{u+1}; build the conditioning by hand so u may be the last date.
    auto conditioning = [&](std::size_t B) {
        netgen::GeneratorInputs in;
        in.y = Tensor({B, d.covariate_dim(), T});
        in.alpha_hat = Tensor({B, N, T});
        in.beta_hat = Tensor({B, N * K, T});
        in.sigma_hat = Tensor({B, N, T});
        in.factors_next = Tensor({B, K, T});
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t t = 0; t < T; ++t) {
                const std::size_t v = start + t;
                const auto& c = d.coeffs.at(v);
                for (std::size_t j = 0; j < d.covariate_dim(); ++j)
                    in.y[(b * d.covariate_dim() + j) * T + t] = d.covariates(v, j);
                for (std::size_t i = 0; i < N; ++i) {
                    in.alpha_hat[(b * N + i) * T + t] = c.alpha(i);
                    in.sigma_hat[(b * N + i) * T + t] = c.sigma(i);
                    for (std::size_t k = 0; k < K; ++k) in.beta_hat[(b * N * K + i * K + k) * T + t] = c.beta(i, k);
                }
                for (std::size_t k = 0; k < K; ++k)
                    in.factors_next[(b * K + k) * T + t] = t + 1 == T ? factors_next(k) : d.factors(v + 1, k);
            }
        }
        in.z = ad::random_normal({B, gen.config().latent_dim, T + 1}, latent);
        return in;
    };

    Matrix out(static_cast<Eigen::Index>(num_samples), static_cast<Eigen::Index>(N));
    for (std::size_t done = 0; done < num_samples;) {
        const std::size_t B = std::min(kChunk, num_samples - done);
        const auto in = conditioning(B);
        ad::Graph g;
        ad::Graph::NoGradScope no_grad(g);
        const Tensor& v = gen.forward(g, in, {}).returns.value();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < N; ++i) out(done + b, i) = v[(b * N + i) * T + T - 1];
        done += B;
    }
    return out;
}

std::vector<Matrix> bootstrap_paths(const TrainingData& d, PositionRange r, std::size_t num_paths, std::uint64_t seed) {
    const auto all = d.positions();
    if (r.begin < all.begin || r.end > all.end || r.begin >= r.end)
        throw std::out_of_range("bootstrap_paths: range outside the usable positions");
    const std::size_t N = d.num_assets();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Matrix> paths;
    Vector eps(N);
    for (std::size_t p = 0; p < num_paths; ++p) {
        Matrix path(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(N));
        for (std::size_t u = r.begin; u < r.end; ++u) {
            for (std::size_t i = 0; i < N; ++i) eps(i) = normal(rng);
            path.row(u - r.begin) = factor::assemble_returns(d.coeffs.at(u), d.factors.row(u + 1).transpose(), eps);
        }
        paths.push_back(std::move(path));
    }
    return paths;
}

double correlation_gap(const Matrix& real, const std::vector<Matrix>& paths, const std::vector<std::string>& assets) {
    if (paths.empty()) throw std::invalid_argument("correlation_gap: no paths");
    auto check = [&](const Matrix& m, const std::string& what) {
        if (m.cols() != real.cols()) throw std::invalid_argument("correlation_gap: asset count mismatch");
        for (Eigen::Index i = 0; i < m.cols(); ++i) {
            const double mean = m.col(i).mean();
            if ((m.col(i).array() - mean).square().sum() == 0.0 || !std::isfinite(mean)) {
                const std::string name =
                    static_cast<std::size_t>(i) < assets.size() ? assets[i] : "#" + std::to_string(i);
                throw metrics::DegenerateDataError("asset " + name + " has zero variance in " + what);
            }
        }
    };
    check(real, "the real returns");
    Matrix mean = Matrix::Zero(real.cols(), real.cols());
    for (std::size_t p = 0; p < paths.size(); ++p) {
        check(paths[p], "generated path " + std::to_string(p));
        mean += metrics::cross_corr(paths[p]);
    }
    mean /= static_cast<double>(paths.size());
    return (metrics::cross_corr(real) - mean).norm();
}

void write_log_csv(const std::string& path, const std::vector<LogRow>& log) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << "phase,epoch,batch,critic_loss,generator_loss,wasserstein,validation_score\n";
    for (const auto& r : log) {
        os << r.phase << ',' << r.epoch << ',' << r.batch << ',' << format_number(r.critic_loss) << ','
           << format_number(r.generator_loss) << ',' << format_number(r.wasserstein) << ','
           << (r.validation_score ? format_number(*r.validation_score) : std::string("NA")) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const GeneratorConfig& g, const CriticConfig& c, const TrainConfig& t, const Seeds& seeds)
    : gen_config_(g), critic_config_(c), config_(t), seeds_(seeds), data_rng_(seeds.data), latent_rng_(seeds.latent),
      dropout_rng_(seeds.dropout) {
    config_.validate();
    window_ = config_.resolved_window(gen_config_);
    if (critic_config_.window != window_) {
        throw std::invalid_argument("critic window " + std::to_string(critic_config_.window) +
                                    " differs from the training window " + std::to_string(window_));
    }
    if (critic_config_.num_assets != gen_config_.num_assets || critic_config_.covariate_dim != gen_config_.covariate_dim)
        throw std::invalid_argument("generator and critic disagree on assets or covariates");
    std::mt19937_64 init(seeds.init);
    gen_ = Generator(gen_config_, init);
    critic_ = Critic(critic_config_, init);
    gen_opt_ = Adam(gen_.parameters(), config_.learning_rate, config_.adam_beta1, config_.adam_beta2,
                    config_.adam_epsilon);
    critic_opt_ = Adam(critic_.parameters(), config_.learning_rate, config_.adam_beta1, config_.adam_beta2,
                       config_.adam_epsilon);
}

void Trainer::set_learning_rate(double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    gen_opt_.set_learning_rate(lr);
    critic_opt_.set_learning_rate(lr);
}

std::vector<ad::Parameter*> Trainer::all_parameters() {
    auto p = gen_.parameters();
    auto c = critic_.parameters();
    p.insert(p.end(), c.begin(), c.end());
    return p;
}

std::vector<Tensor> Trainer::snapshot() const {
    auto* self = const_cast<Trainer*>(this);
    std::vector<Tensor> out;
    for (auto* p : self->all_parameters()) out.push_back(p->value);
    return out;
}

void Trainer::restore_snapshot(const std::vector<Tensor>& s) {
    auto params = all_parameters();
    if (s.size() != params.size()) throw std::logic_error("snapshot does not match the parameter list");
    for (std::size_t i = 0; i < s.size(); ++i) params[i]->value = s[i];
}

std::vector<std::size_t> Trainer::window_starts(const TrainingData& d, PositionRange range, bool end_inside) const {
    const auto all = d.positions();
    const std::size_t T = window_;
    std::size_t lo = range.begin;
    if (end_inside) lo = range.begin + 1 >= T ? range.begin + 1 - T : 0;
    lo = std::max(lo, all.begin);
    const std::size_t hi_end = std::min(range.end, all.end);
    std::vector<std::size_t> starts;
    for (std::size_t s = lo; s + T <= hi_end; s += config_.stride) starts.push_back(s);
    if (starts.empty()) {
        throw std::invalid_argument("position range [" + std::to_string(range.begin) + ", " +
                                    std::to_string(range.end) + ") cannot hold a window of " + std::to_string(T));
    }
    return starts;
}

void Trainer::step_critic(const TrainingData& d, const std::vector<std::size_t>& starts, double& loss, double& w) {
    Batch batch = make_batch(d, starts, window_, gen_config_.latent_dim, latent_rng_);
    const std::size_t B = starts.size();
    Tensor u({B});
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (auto& v : u.data()) v = unif(latent_rng_);
    const tcn::RunContext ctx{tcn::Mode::Train, &dropout_rng_};

    Tensor fake;
    {
        ad::Graph g;
        ad::Graph::NoGradScope no_grad(g);
        fake = gen_.forward(g, batch.inputs, ctx).returns.value();
    }
    const double s = config_.return_scale;
    if (s != 1.0) {
        for (auto& v : fake.data()) v *= s;
        for (auto& v : batch.real.data()) v *= s;
    }
    critic_opt_.zero_grad();
    ad::Graph g;
    netgen::CriticLossParts parts;
    Var l = netgen::critic_loss(g, critic_, g.constant(std::move(batch.real)), g.constant(std::move(fake)),
                                g.constant(batch.inputs.y), u, config_.lambda, ctx, &parts);
    loss = l.value().item();
    w = parts.wasserstein.value().item();
    if (!std::isfinite(loss)) return;
    g.backward(l);
    critic_opt_.step();
}

void Trainer::step_generator(const TrainingData& d, const std::vector<std::size_t>& starts, double& loss) {
    Batch batch = make_batch(d, starts, window_, gen_config_.latent_dim, latent_rng_);
    const tcn::RunContext ctx{tcn::Mode::Train, &dropout_rng_};
    gen_opt_.zero_grad();
    ad::Graph g;
    Var fake = gen_.forward(g, batch.inputs, ctx).returns;
    if (config_.return_scale != 1.0) fake = g.scale(fake, config_.return_scale);
    Var l = netgen::generator_loss(g, critic_, fake, g.constant(batch.inputs.y), ctx);
    loss = l.value().item();
    if (!std::isfinite(loss)) return;
    g.backward(l);
    critic_opt_.zero_grad();
    gen_opt_.step();
}

void Trainer::train_epoch(const TrainingData& d, PositionRange range, bool end_inside) {
    auto starts = window_starts(d, range, end_inside);
    std::shuffle(starts.begin(), starts.end(), data_rng_);
    const std::size_t B = config_.batch_size;
    const std::size_t per_iteration = B * config_.n_critic;
    const std::size_t iterations =
        config_.batches_per_epoch != 0 ? config_.batches_per_epoch : std::max<std::size_t>(1, starts.size() / per_iteration);
    std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);

    std::size_t cursor = 0;
    std::vector<std::size_t> batch(B);
    for (std::size_t it = 0; it < iterations; ++it) {
        LogRow row;
        row.phase = phase_;
        row.epoch = epoch_;
        row.batch = it;
        row.generator_loss = std::numeric_limits<double>::quiet_NaN();
        for (std::size_t c = 0; c < config_.n_critic; ++c) {
            for (auto& s : batch) {
                s = starts[cursor];
                cursor = (cursor + 1) % starts.size();
            }
            double loss = 0.0, w = 0.0;
            step_critic(d, batch, loss, w);
            if (!std::isfinite(loss)) {
                throw TrainingDivergedError("critic loss became non-finite at epoch " + std::to_string(epoch_) +
                                                ", batch " + std::to_string(it),
                                            checkpoint());
            }
            row.critic_loss += loss / static_cast<double>(config_.n_critic);
            row.wasserstein += w / static_cast<double>(config_.n_critic);
        }
        for (std::size_t k = 0; k < config_.n_generator; ++k) {
            for (auto& s : batch) s = starts[pick(data_rng_)];
            double loss = 0.0;
            step_generator(d, batch, loss);
            if (!std::isfinite(loss)) {
                throw TrainingDivergedError("generator loss became non-finite at epoch " + std::to_string(epoch_) +
                                                ", batch " + std::to_string(it),
                                            checkpoint());
            }
            row.generator_loss = loss;
        }
        log_.push_back(row);
    }
    ++epoch_;
}

double Trainer::validation_score(const TrainingData& d, PositionRange validation) {
    std::mt19937_64 latent(seeds_.latent ^ kValidationStream);
    const auto paths = generate_paths(gen_, d, validation, config_.validation_paths, latent);
    return correlation_gap(d.realized(validation), paths, d.assets);
}

void Trainer::reset_selection() {
    has_best_ = false;
    best_score_ = 0.0;
    best_epoch_ = 0;
    since_best_ = 0;
    best_.clear();
}

FitSummary Trainer::fit_until(const TrainingData& d, PositionRange train, PositionRange validation, std::size_t target,
                              std::size_t patience) {
    FitSummary summary;
    while (epoch_ < target) {
        train_epoch(d, train);
        ++summary.epochs_run;
        const double score = validation_score(d, validation);
        if (!log_.empty()) log_.back().validation_score = score;
        if (!has_best_ || score < best_score_) {
            has_best_ = true;
            best_score_ = score;
            best_epoch_ = epoch_;
            since_best_ = 0;
            best_ = snapshot();
        } else {
            ++since_best_;
        }
        if (on_epoch_) on_epoch_(*this);
        if (patience != 0 && since_best_ >= patience) {
            summary.early_stopped = true;
            break;
        }
    }
    if (has_best_) restore_snapshot(best_);
    summary.best_epoch = best_epoch_;
    summary.best_score = best_score_;
    return summary;
}

FitSummary Trainer::fit(const TrainingData& d, PositionRange train, PositionRange validation) {
    return fit_until(d, train, validation, config_.epochs, config_.patience);
}

FitSummary Trainer::fit(const TrainingData& d, PositionRange train, PositionRange validation, std::size_t epochs,
                        std::size_t patience) {
    return fit_until(d, train, validation, epoch_ + epochs, patience);
}

void Trainer::fine_tune(const TrainingData& d, PositionRange validation) {
    const std::string prev = phase_;
    phase_ = "fine_tune";
    set_learning_rate(config_.learning_rate * config_.fine_tune_lr_scale);
    for (std::size_t e = 0; e < config_.fine_tune_epochs; ++e) train_epoch(d, validation, true);
    phase_ = prev;
}

json Trainer::checkpoint() const {
    auto* self = const_cast<Trainer*>(this);
    json best = json::array();
    for (const auto& t : best_) best.push_back(tensor_json(t));
    return {{"format", "marketgan.trainer"},
            {"version", tcn::kCheckpointVersion},
            {"generator_config", to_json(gen_config_)},
            {"critic_config", to_json(critic_config_)},
            {"train_config", to_json(config_)},
            {"seeds", {{"init", seeds_.init}, {"data", seeds_.data}, {"latent", seeds_.latent}, {"dropout", seeds_.dropout}}},
            {"epoch", epoch_},
            {"phase", phase_},
            {"generator", tcn::parameters_to_json(self->gen_.parameters())},
            {"critic", tcn::parameters_to_json(self->critic_.parameters())},
            {"generator_optimizer", gen_opt_.state()},
            {"critic_optimizer", critic_opt_.state()},
            {"rng", {{"data", rng_state(data_rng_)}, {"latent", rng_state(latent_rng_)}, {"dropout", rng_state(dropout_rng_)}}},
            {"selection",
             {{"has_best", has_best_},
              {"best_score", best_score_},
              {"best_epoch", best_epoch_},
              {"since_best", since_best_},
              {"best", best}}}};
}

void Trainer::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << checkpoint().dump() << '\n';
    if (!os) throw std::runtime_error("failed writing " + path);
}

void Trainer::restore(const json& j) {
    if (j.value("format", "") != "marketgan.trainer") throw std::runtime_error("not a trainer checkpoint");
    if (j.value("version", 0) != tcn::kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
    if (j.at("generator_config") != to_json(gen_config_) || j.at("critic_config") != to_json(critic_config_))
        throw std::runtime_error("checkpoint architecture differs from this trainer");
    tcn::parameters_from_json(j.at("generator"), gen_.parameters());
    tcn::parameters_from_json(j.at("critic"), critic_.parameters());
    gen_opt_.load_state(j.at("generator_optimizer"));
    critic_opt_.load_state(j.at("critic_optimizer"));
    set_rng_state(data_rng_, j.at("rng").at("data").get<std::string>());
    set_rng_state(latent_rng_, j.at("rng").at("latent").get<std::string>());
    set_rng_state(dropout_rng_, j.at("rng").at("dropout").get<std::string>());
    epoch_ = j.at("epoch").get<std::size_t>();
    phase_ = j.value("phase", "train");
    const auto& sel = j.at("selection");
    has_best_ = sel.at("has_best").get<bool>();
    best_score_ = sel.at("best_score").get<double>();
    best_epoch_ = sel.at("best_epoch").get<std::size_t>();
    since_best_ = sel.at("since_best").get<std::size_t>();
    best_.clear();
    for (const auto& t : sel.at("best")) best_.push_back(tensor_from_json(t));
    if (!best_.empty() && best_.size() != all_parameters().size())
        throw std::runtime_error("checkpoint best snapshot does not match the parameter list");
}

std::unique_ptr<Trainer> Trainer::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    const json j = json::parse(is);
    if (j.value("format", "") != "marketgan.trainer") throw std::runtime_error(path + " is not a trainer checkpoint");
    Seeds seeds;
    const auto& s = j.at("seeds");
    seeds.init = s.at("init").get<std::uint64_t>();
    seeds.data = s.at("data").get<std::uint64_t>();
    seeds.latent = s.at("latent").get<std::uint64_t>();
    seeds.dropout = s.at("dropout").get<std::uint64_t>();
    auto t = std::make_unique<Trainer>(generator_config_from_json(j.at("generator_config")),
                                       critic_config_from_json(j.at("critic_config")),
                                       train_config_from_json(j.at("train_config")), seeds);
    t->restore(j);
    return t;
}

std::vector<RollingCheckpoint> rolling_retrain(Trainer& trainer, const TrainingData& d, PositionRange initial,
                                               std::size_t last_end, std::vector<std::size_t>* skipped) {
    const auto& cfg = trainer.config();
    const auto all = d.positions();
    last_end = std::min(last_end, all.end);
    std::vector<RollingCheckpoint> out;
    for (std::size_t q = 1;; ++q) {
        const std::size_t end = initial.end + q * cfg.rolling_step;
        if (end > last_end) break;
        const std::size_t span = initial.size();
        const std::size_t begin = std::max(all.begin, end >= span ? end - span : 0);
        const auto [tr, va] = [&] {
            try {
                return split({begin, end});
            } catch (const std::invalid_argument&) {
                return std::pair<PositionRange, PositionRange>{};
            }
        }();
        if (tr.size() < trainer.window() || va.size() == 0) {
            if (skipped != nullptr) skipped->push_back(q);
            continue;
        }
        trainer.set_learning_rate(cfg.learning_rate);
        trainer.reset_selection();
        RollingCheckpoint rc;
        rc.quarter = q;
        rc.train = tr;
        rc.validation = va;
        rc.summary = trainer.fit(d, tr, va, cfg.rolling_epochs, cfg.rolling_patience);
        trainer.fine_tune(d, va);
        rc.checkpoint = trainer.checkpoint();
        out.push_back(std::move(rc));
    }
    return out;
}

} // namespace marketgan::train
