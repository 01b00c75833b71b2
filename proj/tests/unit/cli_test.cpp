#include "marketgan/cli.hpp"

#include "marketgan/dataio.hpp"
#include "marketgan/factor.hpp"
#include "marketgan/metrics.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace marketgan;
using cli::Config;
using cli::KeyValues;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("marketgan_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

// Small market and networks so a full train/evaluate/backtest cycle takes well under a second.
KeyValues small(const fs::path& data_dir) {
    return {{"fixture.num_dates", "900"},
            {"fixture.num_factors", "3"},
            {"data.dir", data_dir.string()},
            {"data.coefficient_window", "100"},
            {"data.test_days", "150"},
            {"gen.latent_dim", "3"},
            {"gen.hidden", "4"},
            {"gen.blocks", "2"},
            {"gen.residual_hidden", "4"},
            {"gen.residual_blocks", "2"},
            {"gen.init_std", "0.05"},
            {"critic.hidden", "4"},
            {"critic.blocks", "2"},
            {"critic.init_std", "0.05"},
            {"train.window", "16"},
            {"train.batch_size", "4"},
            {"train.batches_per_epoch", "2"},
            {"train.n_critic", "2"},
            {"train.validation_paths", "2"},
            {"train.epochs", "2"},
            {"train.fine_tune_epochs", "1"},
            {"train.return_scale", "100"},
            {"evaluate.paths", "3"},
            {"evaluate.max_lag", "10"},
            {"evaluate.projections", "20"},
            {"backtest.days", "20"},
            {"backtest.history", "120"},
            {"backtest.forecast_window", "100"},
            {"backtest.samples", "200"},
            {"backtest.r2", "1,0.1"}};
}

Config with(KeyValues base, const KeyValues& extra) {
    for (const auto& [k, v] : extra) base[k] = v;
    return Config::resolve({}, base);
}

/// Writes a fixture once per test binary.
const fs::path& fixture_dir() {
    static const fs::path dir = [] {
        auto d = scratch("fixture");
        std::ostringstream log;
        EXPECT_EQ(cli::cmd_fixture(with(small(d), {{"out", d.string()}}), log), cli::kOk);
        return d;
    }();
    return dir;
}

} // namespace

TEST(ConfigParse, CommentsBlankLinesAndWhitespace) {
    const auto kv = cli::parse_config("# header\n\n a = 1 \nb=two # note\r\nc =\n");
    ASSERT_EQ(kv.size(), 3u);
    EXPECT_EQ(kv.at("a"), "1");
    EXPECT_EQ(kv.at("b"), "two");
    EXPECT_EQ(kv.at("c"), "");
}

TEST(ConfigParse, RejectsMalformedLines) {
    EXPECT_THROW(cli::parse_config("novalue\n"), cli::ConfigError);
    EXPECT_THROW(cli::parse_config("= 3\n"), cli::ConfigError);
    EXPECT_THROW(cli::parse_config("a=1\na=2\n"), cli::ConfigError);
}

TEST(ConfigResolve, OverridesBeatFileBeatDefaults) {
    const auto c = Config::resolve({{"train.epochs", "7"}, {"factors", "3"}}, {{"factors", "5"}});
    EXPECT_EQ(c.size("train.epochs"), 7u);
    EXPECT_EQ(c.size("factors"), 5u);
    EXPECT_EQ(c.size("train.batch_size"), 128u);
    EXPECT_DOUBLE_EQ(c.real("train.adam_beta2"), 0.9);
}

TEST(ConfigResolve, UnknownKeysAndBadValuesRejected) {
    EXPECT_THROW(Config::resolve({{"train.epoch", "3"}}, {}), cli::ConfigError);
    EXPECT_THROW(Config::resolve({}, {{"factors", "2"}}), cli::ConfigError);
    EXPECT_THROW(Config::resolve({}, {{"seed", "-1"}}), cli::ConfigError);
    const auto c = Config::resolve({}, {{"train.epochs", "ten"}, {"gen.weight_norm", "maybe"}});
    EXPECT_THROW(c.size("train.epochs"), cli::ConfigError);
    EXPECT_THROW(c.flag("gen.weight_norm"), cli::ConfigError);
    EXPECT_THROW(c.str("nope"), cli::ConfigError);
}

TEST(ConfigResolve, DumpIsSortedAndComplete) {
    const auto c = Config::resolve({}, {});
    std::istringstream is(c.dump());
    std::string line, prev;
    std::size_t n = 0;
    while (std::getline(is, line)) {
        const auto key = line.substr(0, line.find('='));
        EXPECT_LT(prev, key);
        prev = key;
        ++n;
    }
    EXPECT_EQ(n, cli::default_config().size());
}

TEST(ConfigResolve, ListsAndReals) {
    const auto c = Config::resolve({}, {{"backtest.r2", " 1, 0.5 ,0.01"}});
    EXPECT_EQ(c.reals("backtest.r2"), (std::vector<double>{1.0, 0.5, 0.01}));
    EXPECT_EQ(c.list("backtest.covariances"), (std::vector<std::string>{"sample", "ledoit_wolf", "factor"}));
}

TEST(Seeds, AutoStreamsAreDerivedDistinctAndStable) {
    const auto a = Config::resolve({}, {{"seed", "42"}});
    const auto b = Config::resolve({}, {{"seed", "42"}});
    const auto c = Config::resolve({}, {{"seed", "43"}});
    std::set<std::uint64_t> seen;
    for (const auto& s : cli::seed_streams()) {
        const auto key = "seed." + s;
        EXPECT_EQ(a.u64(key), cli::derive_seed(42, s));
        EXPECT_EQ(a.u64(key), b.u64(key));
        EXPECT_NE(a.u64(key), c.u64(key));
        seen.insert(a.u64(key));
    }
    EXPECT_EQ(seen.size(), cli::seed_streams().size());
}

TEST(Seeds, ExplicitStreamSeedKept) {
    const auto c = Config::resolve({}, {{"seed.latent", "77"}});
    EXPECT_EQ(c.u64("seed.latent"), 77u);
    EXPECT_EQ(c.u64("seed.data"), cli::derive_seed(1, "data"));
}

TEST(Fixture, DeterministicWithRequestedShape) {
    const auto a = scratch("fx_a"), b = scratch("fx_b");
    std::ostringstream log;
    ASSERT_EQ(cli::cmd_fixture(with(small(a), {{"out", a.string()}}), log), cli::kOk);
    ASSERT_EQ(cli::cmd_fixture(with(small(b), {{"out", b.string()}}), log), cli::kOk);
    for (const char* f : {"returns.csv", "factors.csv", "covariates.csv", "truth.csv"})
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
    const auto returns = data::read_csv((a / "returns.csv").string());
    const auto factors = data::read_csv((a / "factors.csv").string());
    EXPECT_EQ(returns.rows(), 900u);
    EXPECT_EQ(returns.cols(), 5u);
    EXPECT_EQ(factors.cols(), 3u);
    EXPECT_TRUE(fs::exists(a / "config.resolved"));
}

TEST(Fixture, ZeroResidualScaleMatchesFactorPart) {
    const auto d = scratch("fx_sigma0");
    std::ostringstream log;
    ASSERT_EQ(cli::cmd_fixture(with(small(d), {{"out", d.string()}, {"fixture.sigma_level", "0"},
                                               {"fixture.beta_drift", "0"}, {"fixture.num_factors", "1"}}),
                               log),
              cli::kOk);
    auto ds = data::load_dataset((d / "returns.csv").string(), (d / "factors.csv").string(),
                                 (d / "covariates.csv").string());
    // With no residual and constant betas each return column is exactly affine in the factor.
    const auto fit = factor::ols(ds.returns.values, ds.factors.values);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_LT(fit.sigma(static_cast<Eigen::Index>(i)), 1e-12);
}

TEST(Fixture, InvalidSpecIsConfigError) {
    std::ostringstream log;
    const auto d = scratch("fx_bad");
    EXPECT_THROW(cli::cmd_fixture(with(small(d), {{"out", d.string()}, {"fixture.residual_correlation", "1.5"}}), log),
                 cli::ConfigError);
}

TEST(Train, WritesCheckpointLogAndSummary) {
    const auto out = scratch("train");
    std::ostringstream log;
    const auto c = with(small(fixture_dir()), {{"out", out.string()}, {"train.epochs", "1"},
                                                {"train.fine_tune_epochs", "0"}});
    ASSERT_EQ(cli::cmd_train(c, log), cli::kOk);
    const auto summary = read_json(out / "summary.json");
    EXPECT_EQ(summary["epochs"], 1);
    EXPECT_EQ(summary["test_positions"][1].get<std::size_t>() - summary["test_positions"][0].get<std::size_t>(),
              150u);
    EXPECT_EQ(summary["validation_positions"][1], summary["test_positions"][0]);
    // header plus one row per batch of the single epoch
    std::istringstream csv(slurp(out / "log.csv"));
    std::string line;
    std::size_t rows = 0;
    while (std::getline(csv, line)) ++rows;
    EXPECT_EQ(rows, 1u + 2u);
    EXPECT_EQ(read_json(out / "checkpoint.json")["epoch"], 1);
}

TEST(Train, SameSeedSameBytes) {
    const auto a = scratch("train_a"), b = scratch("train_b");
    std::ostringstream log;
    ASSERT_EQ(cli::cmd_train(with(small(fixture_dir()), {{"out", a.string()}}), log), cli::kOk);
    ASSERT_EQ(cli::cmd_train(with(small(fixture_dir()), {{"out", b.string()}}), log), cli::kOk);
    EXPECT_EQ(slurp(a / "checkpoint.json"), slurp(b / "checkpoint.json"));
    EXPECT_EQ(slurp(a / "log.csv"), slurp(b / "log.csv"));
    const auto c = scratch("train_c");
    ASSERT_EQ(cli::cmd_train(with(small(fixture_dir()), {{"out", c.string()}, {"seed", "9"}}), log), cli::kOk);
    EXPECT_NE(slurp(a / "checkpoint.json"), slurp(c / "checkpoint.json"));
}

TEST(Train, ResumeMatchesStraightRun) {
    const auto straight = scratch("resume_straight"), first = scratch("resume_first"), rest = scratch("resume_rest");
    std::ostringstream log;
    auto cfg = small(fixture_dir());
    cfg["train.fine_tune_epochs"] = "0";
    cfg["train.epochs"] = "3";
    ASSERT_EQ(cli::cmd_train(with(cfg, {{"out", straight.string()}}), log), cli::kOk);
    ASSERT_EQ(cli::cmd_train(with(cfg, {{"out", first.string()}, {"train.epochs", "1"}}), log), cli::kOk);
    ASSERT_EQ(cli::cmd_train(with(cfg, {{"out", rest.string()}, {"train.resume", (first / "checkpoint.json").string()}}),
                             log),
              cli::kOk);
    auto resumed = read_json(rest / "checkpoint.json");
    auto direct = read_json(straight / "checkpoint.json");
    EXPECT_EQ(resumed["epoch"], 3);
    EXPECT_EQ(resumed, direct);
}

TEST(Train, RollingWritesQuarterCheckpoints) {
    const auto out = scratch("rolling");
    std::ostringstream log;
    ASSERT_EQ(cli::cmd_train(with(small(fixture_dir()), {{"out", out.string()}, {"train.rolling", "true"},
                                                          {"train.rolling_epochs", "1"}, {"train.rolling_step", "63"}}),
                             log),
              cli::kOk);
    const auto summary = read_json(out / "summary.json");
    const auto& q = summary["rolling"]["quarters"];
    ASSERT_EQ(q.size(), 2u);  // 150 test positions hold two 63-day steps
    for (const auto& e : q) EXPECT_TRUE(fs::exists(out / e["checkpoint"].get<std::string>()));
}

TEST(Train, MissingDataIsConfigError) {
    std::ostringstream log;
    EXPECT_THROW(cli::cmd_train(Config::resolve({}, {{"out", scratch("nodata").string()}}), log), cli::ConfigError);
    EXPECT_THROW(cli::cmd_train(with(small(fixture_dir()), {{"out", scratch("k5").string()}, {"factors", "5"}}), log),
                 cli::ConfigError);
}

TEST(Evaluate, BootstrapAgainstItselfScoresZero) {
    const auto out = scratch("eval_self");
    std::ostringstream log;
    ASSERT_EQ(cli::cmd_evaluate(with(small(fixture_dir()), {{"out", out.string()},
                                                             {"evaluate.bootstrap", "true"},
                                                             {"evaluate.reference", "bootstrap"},
                                                             {"evaluate.paths", "1"}}),
                                log),
              cli::kOk);
    const auto r = read_json(out / "report.json");
    ASSERT_EQ(r["metrics"].size(), 9u);
    // MD measures points against moments, so it stays positive on identical samples.
    for (const auto& key : metrics::MetricReport::keys()) {
        if (key == "md") EXPECT_GT(r["metrics"][key].get<double>(), 0.0);
        else EXPECT_NEAR(r["metrics"][key].get<double>(), 0.0, 1e-9) << key;
    }
    EXPECT_TRUE(r["low_sample"].get<bool>());
    EXPECT_EQ(r["num_paths"], 1);
}

TEST(Evaluate, CheckpointWritesAllArtifacts) {
    const auto tr = scratch("eval_train"), out = scratch("eval_gan");
    std::ostringstream log;
    const auto base = small(fixture_dir());
    ASSERT_EQ(cli::cmd_train(with(base, {{"out", tr.string()}}), log), cli::kOk);
    ASSERT_EQ(cli::cmd_evaluate(with(base, {{"out", out.string()},
                                            {"evaluate.checkpoint", (tr / "checkpoint.json").string()}}),
                                log),
              cli::kOk);
    const auto r = read_json(out / "report.json");
    EXPECT_FALSE(r["low_sample"].get<bool>());
    EXPECT_EQ(r["num_paths"], 3);
    for (const char* f : {"curves.csv", "histogram.csv", "xcorr_real.csv", "xcorr_synthetic.csv",
                          "xcorr_extreme_real.csv", "xcorr_extreme_synthetic.csv"})
        EXPECT_TRUE(fs::exists(out / f)) << f;
    // 5 assets x 3 curve kinds x 10 lags plus the header
    std::istringstream curves(slurp(out / "curves.csv"));
    std::string line;
    std::size_t rows = 0;
    while (std::getline(curves, line)) ++rows;
    EXPECT_EQ(rows, 1u + 5u * 3u * 10u);
}

TEST(Evaluate, NeedsCheckpointOrBootstrap) {
    std::ostringstream log;
    EXPECT_THROW(cli::cmd_evaluate(with(small(fixture_dir()), {{"out", scratch("eval_none").string()}}), log),
                 cli::ConfigError);
    EXPECT_THROW(cli::cmd_evaluate(with(small(fixture_dir()), {{"out", scratch("eval_missing").string()},
                                                                {"evaluate.checkpoint", "/nonexistent.json"}}),
                                   log),
                 std::runtime_error);
}

TEST(Backtest, BenchmarkAndBootstrapGridWithoutCheckpoint) {
    const auto out = scratch("bt");
    std::ostringstream log;
    ASSERT_EQ(cli::cmd_backtest(with(small(fixture_dir()), {{"out", out.string()}}), log), cli::kOk);
    const auto r = read_json(out / "report.json");
    // 3 covariance kinds + rolling, var1 and two perturbed cells
    ASSERT_EQ(r["cells"].size(), 7u);
    EXPECT_EQ(r["failed"], 0);
    for (const auto& cell : r["cells"]) {
        const fs::path dir = out / "cells" / cell["cell"].get<std::string>();
        EXPECT_TRUE(fs::exists(dir / "weights.csv"));
        EXPECT_TRUE(fs::exists(dir / "returns.csv"));
    }
    // weights are long-only and sum to one on every day
    const auto w = data::read_csv((out / "cells" / "benchmark" / "sample" / "weights.csv").string());
    ASSERT_EQ(w.rows(), 20u);
    for (Eigen::Index s = 0; s < w.values.rows(); ++s) {
        EXPECT_NEAR(w.values.row(s).sum(), 1.0, 1e-9);
        EXPECT_GE(w.values.row(s).minCoeff(), 0.0);
    }
}

TEST(Backtest, DeterministicAcrossRunsAndWorkers) {
    const auto a = scratch("bt_a"), b = scratch("bt_b");
    std::ostringstream log;
    ASSERT_EQ(cli::cmd_backtest(with(small(fixture_dir()), {{"out", a.string()}}), log), cli::kOk);
    ::setenv("MARKETGAN_WORKERS", "3", 1);
    const int rc = cli::cmd_backtest(with(small(fixture_dir()), {{"out", b.string()}}), log);
    ::unsetenv("MARKETGAN_WORKERS");
    ASSERT_EQ(rc, cli::kOk);
    EXPECT_EQ(slurp(a / "grid.csv"), slurp(b / "grid.csv"));
    EXPECT_EQ(slurp(a / "report.json"), slurp(b / "report.json"));
    EXPECT_EQ(slurp(a / "cells/bootstrap/perturbed_r2_0.1/weights.csv"),
              slurp(b / "cells/bootstrap/perturbed_r2_0.1/weights.csv"));
}

TEST(Backtest, FailingCellReportedWithoutStoppingOthers) {
    const auto out = scratch("bt_fail");
    std::ostringstream log;
    const auto c = with(small(fixture_dir()), {{"out", out.string()}, {"backtest.models", "benchmark,marketgan"},
                                                {"backtest.forecasts", "rolling_average"}});
    EXPECT_EQ(cli::cmd_backtest(c, log), cli::kCellFailures);
    const auto r = read_json(out / "report.json");
    EXPECT_EQ(r["failed"], 1);
    EXPECT_EQ(r["cells"][3]["status"], "error");
    EXPECT_EQ(r["cells"][0]["status"], "ok");
}

TEST(Backtest, UnknownModelOrRangeIsConfigError) {
    std::ostringstream log;
    const auto d = small(fixture_dir());
    EXPECT_THROW(cli::cmd_backtest(with(d, {{"out", scratch("bt_x").string()}, {"backtest.models", "lstm"}}), log),
                 cli::ConfigError);
    EXPECT_THROW(cli::cmd_backtest(with(d, {{"out", scratch("bt_y").string()}, {"backtest.r2", "0"}}), log),
                 cli::ConfigError);
}

TEST(Run, ExitCodes) {
    std::ostringstream out, err;
    EXPECT_EQ(cli::run({}, out, err), cli::kConfigFailure);
    EXPECT_EQ(cli::run({"train", "--factors", "2"}, out, err), cli::kConfigFailure);
    EXPECT_EQ(cli::run({"train", "--set", "bogus=1"}, out, err), cli::kConfigFailure);
    EXPECT_NE(err.str().find("bogus"), std::string::npos);
    const auto d = scratch("run_fx");
    EXPECT_EQ(cli::run({"fixture", "--out", d.string(), "--set", "fixture.num_dates=300"}, out, err), cli::kOk);
    EXPECT_TRUE(fs::exists(d / "returns.csv"));
    const auto bad = scratch("run_bad");
    EXPECT_EQ(cli::run({"train", "--out", bad.string(), "--set", "data.dir=" + scratch("nowhere").string()}, out, err),
              cli::kRuntimeFailure);
}

TEST(Run, FlagsMapToConfigKeys) {
    const auto d = scratch("run_flags");
    const auto cfg = scratch("run_flags.cfg");
    { std::ofstream(cfg) << "fixture.num_dates = 300\nseed = 5\n"; }
    std::ostringstream out, err;
    ASSERT_EQ(cli::run({"fixture", "--config", cfg.string(), "--seed", "8", "--out", d.string(), "--cost-bps", "5",
                        "--r2", "0.5", "--paths", "4", "--factors", "3"},
                       out, err),
              cli::kOk)
        << err.str();
    const auto resolved = cli::parse_config(slurp(d / "config.resolved"));
    EXPECT_EQ(resolved.at("seed"), "8");
    EXPECT_EQ(resolved.at("fixture.num_dates"), "300");
    EXPECT_EQ(resolved.at("backtest.cost_bps"), "5");
    EXPECT_EQ(resolved.at("backtest.r2"), "0.5");
    EXPECT_EQ(resolved.at("evaluate.paths"), "4");
    EXPECT_EQ(resolved.at("factors"), "3");
    EXPECT_EQ(resolved.at("seed.data"), std::to_string(cli::derive_seed(8, "data")));
}
