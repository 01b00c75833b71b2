#include "marketgan/cli.hpp"

#include "marketgan/dataio.hpp"
#include "marketgan/metrics.hpp"
#include "marketgan/portfolio.hpp"
#include "marketgan/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>
#include <utility>

namespace marketgan::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::string num(double v) {
    if (!std::isfinite(v)) return "NA";
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

std::string num(std::size_t v) { return std::to_string(v); }

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_matrix_csv(const fs::path& path, const Matrix& m, const std::vector<std::string>& names) {
    std::ostringstream os;
    os << "row";
    for (const auto& n : names) os << ',' << n;
    os << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        os << (static_cast<std::size_t>(i) < names.size() ? names[i] : std::to_string(i));
        for (Eigen::Index j = 0; j < m.cols(); ++j) os << ',' << num(m(i, j));
        os << '\n';
    }
    write_text(path, os.str());
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces

struct Prepared {
    train::TrainingData data;
    train::PositionRange in_sample;
    train::PositionRange test;
    std::vector<std::string> excluded;
};

data::MarketDataset load_market(const Config& c) {
    std::string returns = c.str("data.returns"), factors = c.str("data.factors"), covs = c.str("data.covariates");
    const std::string dir = c.str("data.dir");
    if (!dir.empty()) {
        if (returns.empty()) returns = (fs::path(dir) / "returns.csv").string();
        if (factors.empty()) factors = (fs::path(dir) / "factors.csv").string();
        if (covs.empty()) covs = (fs::path(dir) / "covariates.csv").string();
    }
    if (returns.empty() || factors.empty() || covs.empty())
        throw ConfigError("set data.dir or all of data.returns, data.factors and data.covariates");
    data::LoadOptions lo;
    if (!c.str("data.risk_free").empty()) lo.risk_free_column = c.str("data.risk_free");
    auto ds = data::load_dataset(returns, factors, covs, lo);
    const std::size_t K = c.size("factors");
    if (ds.num_factors() < K) {
        throw ConfigError("factors=" + std::to_string(K) + " but the factor file has " +
                          std::to_string(ds.num_factors()) + " columns");
    }
    ds.factors.columns.resize(K);
    ds.factors.values = Matrix(ds.factors.values.leftCols(static_cast<Eigen::Index>(K)));
    return ds;
}

Prepared prepare(const Config& c) {
    const auto ds = load_market(c);
    const std::size_t T = ds.num_dates();
    const std::size_t test_days = c.size("data.test_days");
    if (test_days + 2 >= T) throw ConfigError("data.test_days leaves no in-sample data");
    train::PrepareOptions po;
    po.coefficient_window = c.size("data.coefficient_window");
    po.k_neighbors = c.size("data.k_neighbors");
    po.standardize_end = T - test_days;
    Prepared p;
    p.data = train::prepare(ds, po, &p.excluded);
    const auto all = p.data.positions();
    if (all.size() <= test_days) throw ConfigError("data.test_days exceeds the usable positions");
    p.test = {all.end - test_days, all.end};
    p.in_sample = {all.begin, p.test.begin};
    return p;
}

netgen::GeneratorConfig generator_config(const Config& c, const train::TrainingData& d) {
    netgen::GeneratorConfig g;
    g.num_assets = d.num_assets();
    g.num_factors = d.num_factors();
    g.covariate_dim = d.covariate_dim();
    g.latent_dim = c.size("gen.latent_dim");
    g.hidden = c.size("gen.hidden");
    g.blocks = c.size("gen.blocks");
    g.kernel_size = c.size("gen.kernel_size");
    g.dilation_base = c.size("gen.dilation_base");
    g.residual_hidden = c.size("gen.residual_hidden");
    g.residual_blocks = c.size("gen.residual_blocks");
    g.dropout = c.real("gen.dropout");
    g.init_std = c.real("gen.init_std");
    g.weight_norm = c.flag("gen.weight_norm");
    return g;
}

train::TrainConfig train_config(const Config& c) {
    train::TrainConfig t;
    t.epochs = c.size("train.epochs");
    t.batch_size = c.size("train.batch_size");
    t.learning_rate = c.real("train.learning_rate");
    t.adam_beta1 = c.real("train.adam_beta1");
    t.adam_beta2 = c.real("train.adam_beta2");
    t.adam_epsilon = c.real("train.adam_epsilon");
    t.n_critic = c.size("train.n_critic");
    t.n_generator = c.size("train.n_generator");
    t.lambda = c.real("train.lambda");
    t.window = c.size("train.window");
    t.stride = c.size("train.stride");
    t.batches_per_epoch = c.size("train.batches_per_epoch");
    t.validation_paths = c.size("train.validation_paths");
    t.patience = c.size("train.patience");
    t.fine_tune_epochs = c.size("train.fine_tune_epochs");
    t.fine_tune_lr_scale = c.real("train.fine_tune_lr_scale");
    t.return_scale = c.real("train.return_scale");
    t.rolling_epochs = c.size("train.rolling_epochs");
    t.rolling_patience = c.size("train.rolling_patience");
    t.rolling_step = c.size("train.rolling_step");
    t.validate();
    return t;
}

netgen::CriticConfig critic_config(const Config& c, const netgen::GeneratorConfig& g, std::size_t window) {
    netgen::CriticConfig k;
    k.num_assets = g.num_assets;
    k.covariate_dim = g.covariate_dim;
    k.window = window;
    k.hidden = c.size("critic.hidden");
    k.blocks = c.size("critic.blocks");
    k.kernel_size = c.size("critic.kernel_size");
    k.dilation_base = c.size("critic.dilation_base");
    k.dropout = c.real("critic.dropout");
    k.init_std = c.real("critic.init_std");
    k.weight_norm = c.flag("critic.weight_norm");
    return k;
}

fs::path output_dir(const Config& c) {
    fs::path out = c.str("out");
    if (out.empty()) throw ConfigError("out must not be empty");
    fs::create_directories(out);
    write_text(out / "config.resolved", c.dump());
    return out;
}

std::size_t worker_count() {
    const char* env = std::getenv("MARKETGAN_WORKERS");
    if (env == nullptr || *env == '\0') return 1;
    std::size_t n = 0;
    const std::string_view s(env);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
    if (ec != std::errc() || p != s.data() + s.size() || n == 0)
        throw ConfigError("MARKETGAN_WORKERS must be a positive integer");
    return n;
}

/// Runs tasks[i] for every i on `workers` threads.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& task) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) task(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace

// ---------------------------------------------------------------------------
// Configuration

KeyValues parse_config(std::string_view text, const std::string& source) {
    KeyValues out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key=value");
        const std::string key = trim(std::string_view(t).substr(0, eq));
        const std::string value = trim(std::string_view(t).substr(eq + 1));
        if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
        if (!out.emplace(key, value).second)
            throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key " + key);
    }
    return out;
}

KeyValues read_config_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot read config " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str(), path);
}

const std::vector<std::string>& seed_streams() {
    static const std::vector<std::string> s{"data", "dropout", "init", "latent", "perturbation", "projections"};
    return s;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view stream) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char ch : stream) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(splitmix64(master) ^ h);
}

const KeyValues& default_config() {
    static const KeyValues d = [] {
        const netgen::GeneratorConfig g;
        const netgen::CriticConfig k;
        const train::TrainConfig t;
        const data::FixtureSpec f;
        KeyValues m{
            {"seed", "1"},
            {"out", "out"},
            {"factors", "1"},
            {"data.dir", ""},
            {"data.returns", ""},
            {"data.factors", ""},
            {"data.covariates", ""},
            {"data.risk_free", ""},
            {"data.coefficient_window", "252"},
            {"data.k_neighbors", "5"},
            {"data.test_days", "504"},
            {"fixture.num_dates", num(f.num_dates)},
            {"fixture.num_assets", num(f.num_assets)},
            {"fixture.num_factors", "5"},
            {"fixture.residual_correlation", "0.4"},
            {"fixture.missing_rate", num(f.missing_rate)},
            {"fixture.sigma_level", num(f.sigma_level)},
            {"fixture.vol_of_vol", num(f.vol_of_vol)},
            {"fixture.beta_drift", num(f.beta_drift)},
            {"gen.latent_dim", num(g.latent_dim)},
            {"gen.hidden", num(g.hidden)},
            {"gen.blocks", num(g.blocks)},
            {"gen.kernel_size", num(g.kernel_size)},
            {"gen.dilation_base", num(g.dilation_base)},
            {"gen.residual_hidden", num(g.residual_hidden)},
            {"gen.residual_blocks", num(g.residual_blocks)},
            {"gen.dropout", num(g.dropout)},
            {"gen.init_std", num(g.init_std)},
            {"gen.weight_norm", g.weight_norm ? "true" : "false"},
            {"critic.hidden", num(k.hidden)},
            {"critic.blocks", num(k.blocks)},
            {"critic.kernel_size", num(k.kernel_size)},
            {"critic.dilation_base", num(k.dilation_base)},
            {"critic.dropout", num(k.dropout)},
            {"critic.init_std", num(k.init_std)},
            {"critic.weight_norm", k.weight_norm ? "true" : "false"},
            {"train.resume", ""},
            {"train.rolling", "false"},
            {"evaluate.checkpoint", ""},
            {"evaluate.bootstrap", "false"},
            {"evaluate.reference", "data"},
            {"evaluate.paths", "100"},
            {"evaluate.max_lag", "100"},
            {"evaluate.projections", "100"},
            {"evaluate.tail_quantile", "0.95"},
            {"evaluate.histogram_bins", "50"},
            {"backtest.models", "benchmark,bootstrap"},
            {"backtest.checkpoint", ""},
            {"backtest.forecasts", "rolling_average,var1,perturbed"},
            {"backtest.forecast_window", "252"},
            {"backtest.r2", "1,0.5,0.1,0.01,0.001"},
            {"backtest.covariances", "sample,ledoit_wolf,factor"},
            {"backtest.cost_bps", "0"},
            {"backtest.samples", "10000"},
            {"backtest.days", "252"},
            {"backtest.history", "756"},
        };
        const json tj = train::to_json(t);
        for (const auto& [key, value] : tj.items()) m["train." + key] = num(value.get<double>());
        for (const auto& s : seed_streams()) m["seed." + s] = "auto";
        return m;
    }();
    return d;
}

Config Config::resolve(const KeyValues& file, const KeyValues& overrides) {
    Config c;
    c.values_ = default_config();
    for (const auto* layer : {&file, &overrides}) {
        for (const auto& [k, v] : *layer) {
            auto it = c.values_.find(k);
            if (it == c.values_.end()) throw ConfigError("unknown config key " + k);
            it->second = v;
        }
    }
    const auto master = c.u64("seed");
    for (const auto& s : seed_streams()) {
        auto& v = c.values_["seed." + s];
        if (v == "auto") v = std::to_string(derive_seed(master, s));
        else c.u64("seed." + s);
    }
    const auto K = c.size("factors");
    if (K != 1 && K != 3 && K != 5) throw ConfigError("factors must be 1, 3 or 5");
    return c;
}

const std::string& Config::str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key " + key);
    return it->second;
}

std::uint64_t Config::u64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size())
        throw ConfigError(key + " must be a non-negative integer, got '" + s + "'");
    return v;
}

std::size_t Config::size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

double Config::real(const std::string& key) const {
    const auto& s = str(key);
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v))
        throw ConfigError(key + " must be a finite number, got '" + s + "'");
    return v;
}

bool Config::flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + " must be true or false, got '" + s + "'");
}

std::vector<std::string> Config::list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<double> Config::reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : list(key)) {
        double v = 0.0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": '" + s + "' is not a number");
        out.push_back(v);
    }
    return out;
}

std::string Config::dump() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// fixture

int cmd_fixture(const Config& c, std::ostream& log) {
    data::FixtureSpec f;
    f.num_dates = c.size("fixture.num_dates");
    f.num_assets = c.size("fixture.num_assets");
    f.num_factors = c.size("fixture.num_factors");
    f.residual_correlation = c.real("fixture.residual_correlation");
    f.missing_rate = c.real("fixture.missing_rate");
    f.sigma_level = c.real("fixture.sigma_level");
    f.vol_of_vol = c.real("fixture.vol_of_vol");
    f.beta_drift = c.real("fixture.beta_drift");
    f.seed = c.u64("seed.data");
    try {
        f.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    const auto out = output_dir(c);
    data::write_fixture(out.string(), data::simulate_market(f));
    log << "fixture: " << f.num_dates << " dates, " << f.num_assets << " assets, " << f.num_factors
        << " factors -> " << out.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const Config& c, std::ostream& log) {
    const auto tc = train_config(c);
    const auto p = prepare(c);
    const auto gc = generator_config(c, p.data);
    const auto cc = critic_config(c, gc, tc.resolved_window(gc));
    const auto out = output_dir(c);
    train::Seeds seeds{c.u64("seed.init"), c.u64("seed.data"), c.u64("seed.latent"), c.u64("seed.dropout")};

    train::Trainer trainer(gc, cc, tc, seeds);
    if (!c.str("train.resume").empty()) {
        std::ifstream is(c.str("train.resume"));
        if (!is) throw std::runtime_error("cannot read checkpoint " + c.str("train.resume"));
        trainer.restore(json::parse(is));
        log << "resuming at epoch " << trainer.epoch() << "\n";
    }
    const auto [tr, va] = train::split(p.in_sample);
    const fs::path ckpt = out / "checkpoint.json";
    trainer.set_epoch_callback([&](const train::Trainer& t) {
        t.save(ckpt.string());
        const auto& last = t.log().back();
        log << "epoch " << t.epoch() << " critic " << num(last.critic_loss) << " generator "
            << num(last.generator_loss) << " validation " << num(last.validation_score.value_or(NAN)) << "\n";
    });

    json summary;
    try {
        const auto s = trainer.fit(p.data, tr, va);
        if (tc.fine_tune_epochs > 0) trainer.fine_tune(p.data, va);
        trainer.save(ckpt.string());
        summary = {{"epochs", trainer.epoch()},
                   {"epochs_run", s.epochs_run},
                   {"best_epoch", s.best_epoch},
                   {"best_validation_score", s.best_score},
                   {"early_stopped", s.early_stopped},
                   {"window", trainer.window()},
                   {"receptive_field", gc.receptive_field()},
                   {"train_positions", {tr.begin, tr.end}},
                   {"validation_positions", {va.begin, va.end}},
                   {"test_positions", {p.test.begin, p.test.end}},
                   {"assets", p.data.assets},
                   {"excluded_assets", p.excluded}};
        if (c.flag("train.rolling")) {
            fs::create_directories(out / "rolling");
            std::vector<std::size_t> skipped;
            const auto cps = train::rolling_retrain(trainer, p.data, p.in_sample, p.data.positions().end, &skipped);
            json q = json::array();
            for (const auto& cp : cps) {
                const auto name = "quarter_" + std::to_string(cp.quarter) + ".json";
                write_text(out / "rolling" / name, cp.checkpoint.dump() + "\n");
                q.push_back({{"quarter", cp.quarter},
                             {"checkpoint", "rolling/" + name},
                             {"best_validation_score", cp.summary.best_score}});
            }
            summary["rolling"] = {{"quarters", q}, {"skipped", skipped}};
        }
    } catch (const train::TrainingDivergedError& e) {
        write_text(out / "diverged.json", e.snapshot().dump() + "\n");
        train::write_log_csv((out / "log.csv").string(), trainer.log());
        throw;
    }
    train::write_log_csv((out / "log.csv").string(), trainer.log());
    write_json(out / "summary.json", summary);
    log << "trained " << trainer.epoch() << " epochs -> " << ckpt.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// evaluate

int cmd_evaluate(const Config& c, std::ostream& log) {
    auto p = prepare(c);
    const std::size_t num_paths = c.size("evaluate.paths");
    if (num_paths == 0) throw ConfigError("evaluate.paths must be positive");
    const bool bootstrap = c.flag("evaluate.bootstrap");
    const auto latent_seed = c.u64("seed.latent");

    metrics::PathSet paths;
    std::string model;
    if (bootstrap) {
        model = "bootstrap";
        paths = train::bootstrap_paths(p.data, p.test, num_paths, latent_seed);
    } else {
        const auto& path = c.str("evaluate.checkpoint");
        if (path.empty()) throw ConfigError("evaluate needs evaluate.checkpoint or evaluate.bootstrap=true");
        if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
        auto trainer = train::Trainer::load(path);
        std::mt19937_64 latent(latent_seed);
        paths = train::generate_paths(trainer->generator(), p.data, p.test, num_paths, latent);
        model = "marketgan";
    }

    Matrix real;
    const auto& reference = c.str("evaluate.reference");
    if (reference == "data") real = p.data.realized(p.test);
    else if (reference == "bootstrap") real = train::bootstrap_paths(p.data, p.test, 1, latent_seed).front();
    else throw ConfigError("evaluate.reference must be data or bootstrap");

    metrics::ReportOptions ro;
    ro.max_lag = c.size("evaluate.max_lag");
    ro.num_projections = c.size("evaluate.projections");
    ro.projection_seed = c.u64("seed.projections");
    ro.tail_quantile = c.real("evaluate.tail_quantile");
    const auto report = metrics::evaluate(real, paths, ro);

    const auto out = output_dir(c);
    json m = json::object();
    for (const auto& k : metrics::MetricReport::keys()) m[k] = report.value(k);
    write_json(out / "report.json", {{"model", model},
                                     {"reference", reference},
                                     {"metrics", m},
                                     {"num_paths", report.num_paths},
                                     {"low_sample", report.low_sample},
                                     {"test_positions", {p.test.begin, p.test.end}},
                                     {"first_date", data::format_date(p.data.dates[p.test.begin + 1])},
                                     {"last_date", data::format_date(p.data.dates[p.test.end])}});

    // curves: real and path-averaged stylized curves per asset
    {
        std::ostringstream os;
        os << "asset,kind,lag,real,synthetic\n";
        for (Eigen::Index i = 0; i < real.cols(); ++i) {
            for (auto kind : {metrics::CurveKind::ACF, metrics::CurveKind::VC, metrics::CurveKind::Lev}) {
                const auto rc = metrics::stylized_curve(real.col(i), kind, ro.max_lag);
                Vector mean = Vector::Zero(rc.values.size());
                for (const auto& path : paths) mean += metrics::stylized_curve(path.col(i), kind, ro.max_lag).values;
                mean /= static_cast<double>(paths.size());
                for (Eigen::Index l = 0; l < rc.values.size(); ++l) {
                    os << p.data.assets[i] << ',' << metrics::to_string(kind) << ',' << l + 1 << ','
                       << num(rc.values(l)) << ',' << num(mean(l)) << '\n';
                }
            }
        }
        write_text(out / "curves.csv", os.str());
    }
    // dependence matrices
    {
        Matrix xs = Matrix::Zero(real.cols(), real.cols()), xe = xs;
        for (const auto& path : paths) {
            xs += metrics::cross_corr(path);
            xe += metrics::extreme_cross_corr(path, ro.tail_quantile);
        }
        xs /= static_cast<double>(paths.size());
        xe /= static_cast<double>(paths.size());
        write_matrix_csv(out / "xcorr_real.csv", metrics::cross_corr(real), p.data.assets);
        write_matrix_csv(out / "xcorr_synthetic.csv", xs, p.data.assets);
        write_matrix_csv(out / "xcorr_extreme_real.csv", metrics::extreme_cross_corr(real, ro.tail_quantile),
                         p.data.assets);
        write_matrix_csv(out / "xcorr_extreme_synthetic.csv", xe, p.data.assets);
    }
    // equal-weight return histogram
    {
        const std::size_t bins = c.size("evaluate.histogram_bins");
        if (bins == 0) throw ConfigError("evaluate.histogram_bins must be positive");
        const Vector ew = metrics::equal_weight_series(real);
        double lo = ew.minCoeff(), hi = ew.maxCoeff();
        if (!(hi > lo)) hi = lo + 1e-12;
        const auto hr = metrics::histogram(ew, bins, lo, hi);
        std::vector<std::size_t> hs(bins, 0);
        for (const auto& path : paths) {
            const auto h = metrics::histogram(metrics::equal_weight_series(path), bins, lo, hi);
            for (std::size_t b = 0; b < bins; ++b) hs[b] += h[b];
        }
        std::ostringstream os;
        os << "bin,lower,upper,real,synthetic\n";
        const double w = (hi - lo) / static_cast<double>(bins);
        for (std::size_t b = 0; b < bins; ++b) {
            os << b << ',' << num(lo + w * static_cast<double>(b)) << ',' << num(lo + w * static_cast<double>(b + 1))
               << ',' << hr[b] << ',' << num(static_cast<double>(hs[b]) / static_cast<double>(paths.size())) << '\n';
        }
        write_text(out / "histogram.csv", os.str());
    }
    log << model << ": " << report.num_paths << " paths, xcorr " << num(report.xcorr)
        << (report.low_sample ? " (low sample)" : "") << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// backtest

namespace {

struct Cell {
    std::string model;     // benchmark, bootstrap, marketgan
    std::string variant;   // covariance kind or forecast
    double r2 = 1.0;
    std::string name() const {
        if (variant == "perturbed") return model + "/perturbed_r2_" + num(r2);
        return model + "/" + variant;
    }
};

portfolio::CovarianceKind covariance_kind(const std::string& s) {
    if (s == "sample") return portfolio::CovarianceKind::Sample;
    if (s == "ledoit_wolf") return portfolio::CovarianceKind::LedoitWolf;
    if (s == "factor") return portfolio::CovarianceKind::Factor;
    throw ConfigError("unknown covariance kind " + s);
}

std::vector<Cell> grid(const Config& c) {
    std::vector<Cell> cells;
    for (const auto& model : c.list("backtest.models")) {
        if (model == "benchmark") {
            for (const auto& k : c.list("backtest.covariances")) {
                covariance_kind(k);
                cells.push_back({model, k, 1.0});
            }
        } else if (model == "bootstrap" || model == "marketgan") {
            for (const auto& f : c.list("backtest.forecasts")) {
                const auto method = portfolio::forecast_method_from_string(f);
                if (method == portfolio::ForecastMethod::Perturbed) {
                    for (double r2 : c.reals("backtest.r2")) {
                        if (!(r2 > 0.0 && r2 <= 1.0)) throw ConfigError("backtest.r2 values must lie in (0, 1]");
                        cells.push_back({model, f, r2});
                    }
                } else {
                    cells.push_back({model, f, 1.0});
                }
            }
        } else {
            throw ConfigError("unknown backtest model " + model);
        }
    }
    if (cells.empty()) throw ConfigError("backtest grid is empty");
    return cells;
}

portfolio::BacktestResult run_cell(const Config& c, const Cell& cell, const train::TrainingData& d,
                                   train::PositionRange days) {
    const std::size_t N = d.num_assets();
    Matrix weights(static_cast<Eigen::Index>(days.size()), static_cast<Eigen::Index>(N));
    const Matrix realized = d.realized(days);

    if (cell.model == "benchmark") {
        const std::size_t h = c.size("backtest.history");
        if (h < 2 || days.begin + 1 < h) throw std::invalid_argument("not enough history before the backtest");
        const auto kind = covariance_kind(cell.variant);
        for (std::size_t u = days.begin; u < days.end; ++u) {
            const auto lo = static_cast<Eigen::Index>(u + 1 - h);
            const Matrix r = d.returns.middleRows(lo, static_cast<Eigen::Index>(h));
            const Matrix f = d.factors.middleRows(lo, static_cast<Eigen::Index>(h));
            const Vector mu = r.colwise().mean().transpose();
            weights.row(u - days.begin) = portfolio::tangency_long_only(mu, portfolio::benchmark_covariance(r, f, kind))
                                              .weights.transpose();
        }
    } else {
        portfolio::ForecastSpec spec;
        spec.method = portfolio::forecast_method_from_string(cell.variant);
        spec.window = c.size("backtest.forecast_window");
        spec.r2 = cell.r2;
        spec.seed = c.u64("seed.perturbation");
        spec.validate();
        if (days.begin + 1 < spec.window) throw std::invalid_argument("not enough factor history before the backtest");
        portfolio::FactorForecaster forecaster(spec, d.factors);
        const std::size_t samples = c.size("backtest.samples");
        const auto latent = c.u64("seed.latent");
        std::unique_ptr<train::Trainer> model;
        if (cell.model == "marketgan") {
            const auto& path = c.str("backtest.checkpoint");
            if (path.empty()) throw std::invalid_argument("marketgan cells need backtest.checkpoint");
            model = train::Trainer::load(path);
        }
        for (std::size_t u = days.begin; u < days.end; ++u) {
            const Vector f = forecaster.forecast(u);
            const auto seed = derive_seed(latent, "day" + std::to_string(u));
            portfolio::MomentEstimate m;
            if (model) {
                std::mt19937_64 rng(seed);
                m = portfolio::synthetic_moments(train::sample_next_returns(model->generator(), d, u, f, samples, rng));
            } else {
                m = portfolio::bootstrap_moments(d.coeffs.at(u), f, samples, seed);
            }
            weights.row(u - days.begin) = portfolio::tangency_long_only(m.mean, m.cov).weights.transpose();
        }
    }
    return portfolio::backtest(weights, realized, c.real("backtest.cost_bps"));
}

json performance_json(const portfolio::PerformanceReport& r) {
    return {{"sharpe", r.sharpe_defined ? json(r.sharpe) : json(nullptr)},
            {"sharpe_defined", r.sharpe_defined},
            {"annual_return", r.annual_return},
            {"annual_std", r.annual_std},
            {"max_drawdown", r.max_drawdown},
            {"daily_turnover", r.daily_turnover},
            {"monthly_turnover", r.monthly_turnover}};
}

} // namespace

int cmd_backtest(const Config& c, std::ostream& log) {
    const auto cells = grid(c);
    const auto p = prepare(c);
    const std::size_t n_days = c.size("backtest.days");
    const auto all = p.data.positions();
    if (n_days == 0 || n_days > all.size()) throw ConfigError("backtest.days must be in [1, usable positions]");
    const train::PositionRange days{all.end - n_days, all.end};
    const auto out = output_dir(c);
    const auto workers = worker_count();

    struct Outcome {
        std::optional<portfolio::BacktestResult> result;
        std::string error;
    };
    std::vector<Outcome> outcomes(cells.size());
    parallel_for(cells.size(), workers, [&](std::size_t i) {
        try {
            outcomes[i].result = run_cell(c, cells[i], p.data, days);
        } catch (const std::exception& e) {
            outcomes[i].error = e.what();
        }
    });

    std::ostringstream table;
    table << "cell,model,variant,r2,status,sharpe,annual_return,annual_std,max_drawdown,monthly_turnover,error\n";
    json summary = json::array();
    std::size_t failures = 0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto& cell = cells[i];
        const fs::path dir = out / "cells" / cell.name();
        fs::create_directories(dir);
        json entry = {{"cell", cell.name()}, {"model", cell.model}, {"variant", cell.variant}, {"r2", cell.r2}};
        table << cell.name() << ',' << cell.model << ',' << cell.variant << ',' << num(cell.r2) << ',';
        if (const auto& r = outcomes[i].result) {
            entry["status"] = "ok";
            entry["performance"] = performance_json(r->report);
            write_json(dir / "summary.json", entry);
            std::ostringstream w, ret;
            w << "date";
            for (const auto& a : p.data.assets) w << ',' << a;
            w << '\n';
            ret << "date,gross,turnover,net\n";
            for (Eigen::Index s = 0; s < r->weights.rows(); ++s) {
                const auto date = data::format_date(p.data.dates[days.begin + static_cast<std::size_t>(s) + 1]);
                w << date;
                for (Eigen::Index j = 0; j < r->weights.cols(); ++j) w << ',' << num(r->weights(s, j));
                w << '\n';
                ret << date << ',' << num(r->gross_returns(s)) << ',' << num(r->turnover(s)) << ','
                    << num(r->net_returns(s)) << '\n';
            }
            write_text(dir / "weights.csv", w.str());
            write_text(dir / "returns.csv", ret.str());
            const auto& q = r->report;
            table << "ok," << num(q.sharpe) << ',' << num(q.annual_return) << ',' << num(q.annual_std) << ','
                  << num(q.max_drawdown) << ',' << num(q.monthly_turnover) << ",\n";
        } else {
            ++failures;
            entry["status"] = "error";
            entry["error"] = outcomes[i].error;
            write_json(dir / "summary.json", entry);
            std::string msg = outcomes[i].error;
            for (auto& ch : msg)
                if (ch == ',' || ch == '\n') ch = ';';
            table << "error,NA,NA,NA,NA,NA," << msg << '\n';
            log << "cell " << cell.name() << " failed: " << outcomes[i].error << "\n";
        }
        summary.push_back(entry);
    }
    write_text(out / "grid.csv", table.str());
    write_json(out / "report.json", {{"cells", summary},
                                     {"failed", failures},
                                     {"backtest_positions", {days.begin, days.end}},
                                     {"cost_bps", c.real("backtest.cost_bps")}});
    log << cells.size() - failures << " of " << cells.size() << " cells succeeded\n";
    return failures == 0 ? kOk : kCellFailures;
}

// ---------------------------------------------------------------------------
// entry point

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Factor-structured conditional market generator: fixtures, training, evaluation, backtests"};
    app.require_subcommand(1);
    std::string config_path, out_dir, r2;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> factors, paths;
    std::optional<double> cost;
    std::vector<std::string> sets;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value config file");
        sub->add_option("--seed", seed, "master seed");
        sub->add_option("--factors", factors, "factor count K")->check(CLI::IsMember({1, 3, 5}));
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--paths", paths, "number of synthetic paths");
        sub->add_option("--r2", r2, "comma-separated target R^2 list");
        sub->add_option("--cost-bps", cost, "transaction cost in basis points");
        sub->add_option("--set", sets, "extra key=value overrides");
    };
    const std::pair<const char*, const char*> subs[] = {
        {"fixture", "write a synthetic factor market to the output directory"},
        {"train", "fit the generator and critic, write a checkpoint"},
        {"evaluate", "score synthetic paths against the test slice"},
        {"backtest", "run the portfolio grid over the test slice"},
    };
    for (const auto& [name, desc] : subs) add_common(app.add_subcommand(name, desc));

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        const auto chosen = app.get_subcommands();
        out << (chosen.empty() ? app.help() : chosen.front()->help());
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n";
        return kConfigFailure;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        KeyValues over;
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + s);
            over[trim(std::string_view(s).substr(0, eq))] = trim(std::string_view(s).substr(eq + 1));
        }
        if (seed) over["seed"] = std::to_string(*seed);
        if (factors) over["factors"] = std::to_string(*factors);
        if (!out_dir.empty()) over["out"] = out_dir;
        if (paths) over["evaluate.paths"] = std::to_string(*paths);
        if (!r2.empty()) over["backtest.r2"] = r2;
        if (cost) over["backtest.cost_bps"] = num(*cost);
        const auto file = config_path.empty() ? KeyValues{} : read_config_file(config_path);
        const auto cfg = Config::resolve(file, over);
        if (command == "fixture") return cmd_fixture(cfg, out);
        if (command == "train") return cmd_train(cfg, out);
        if (command == "evaluate") return cmd_evaluate(cfg, out);
        return cmd_backtest(cfg, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigFailure;
    } catch (const std::exception& e) {
        err << command << " failed: " << e.what() << "\n";
        return kRuntimeFailure;
    }
}

} // namespace marketgan::cli
