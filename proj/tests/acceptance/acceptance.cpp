// Acceptance gate. Runs each criterion at its stated tolerance and time budget
// and prints one PASS/FAIL line per criterion. Criteria can be selected by
// number on the command line; the default runs all of them.

#include "marketgan/autodiff.hpp"
#include "marketgan/cli.hpp"
#include "marketgan/factor.hpp"
#include "marketgan/metrics.hpp"
#include "marketgan/netgen.hpp"
#include "marketgan/portfolio.hpp"
#include "marketgan/tcn.hpp"
#include "marketgan/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace marketgan;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    Matrix m(rows, cols);
    for (Eigen::Index t = 0; t < rows; ++t)
        for (Eigen::Index i = 0; i < cols; ++i) m(t, i) = scale * n01(rng);
    return m;
}

// Zero biases put padded positions on a ReLU kink where differences are meaningless.
template <class Model>
void randomize_biases(Model& m, std::mt19937_64& rng) {
    for (auto* p : m.parameters())
        if (p->name.ends_with("bias")) p->value = ad::random_normal(p->value.shape(), rng, 0.3);
}

netgen::GeneratorInputs random_inputs(const netgen::GeneratorConfig& c, std::size_t B, std::size_t T,
                                      std::mt19937_64& rng) {
    netgen::GeneratorInputs in;
    const std::size_t N = c.num_assets, K = c.num_factors;
    in.z = ad::random_normal({B, c.latent_dim, T + 1}, rng);
    in.y = ad::random_normal({B, c.covariate_dim, T}, rng);
    in.alpha_hat = ad::random_normal({B, N, T}, rng, 0.001);
    in.beta_hat = ad::random_normal({B, N * K, T}, rng);
    in.sigma_hat = ad::random_normal({B, N, T}, rng, 0.01);
    in.factors_next = ad::random_normal({B, K, T}, rng, 0.01);
    return in;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
    using ad::Graph;
    using ad::Var;
    using V = std::vector<Var>;
    const double eps = 1e-5, tol = 1e-4;
    double worst = 0.0;
    std::string worst_name;
    auto record = [&](const std::string& name, double err) {
        if (!(err <= worst)) {
            worst = err;
            worst_name = name;
        }
    };

    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(500 + seed);
        auto rn = [&](ad::Shape s) { return ad::random_normal(std::move(s), rng); };
        auto positive = [&](ad::Shape s) {
            auto t = ad::random_normal(std::move(s), rng);
            for (auto& v : t.data()) v = 0.5 + std::abs(v);
            return t;
        };
        const auto mask = rn({3, 4});
        const std::vector<std::pair<std::string, std::function<double()>>> prims{
            {"add", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.add(in[0], in[1])}; }, {rn({2, 3}), rn({2, 3})}, eps); }},
            {"sub", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.sub(in[0], in[1])}; }, {rn({2, 3}), rn({2, 3})}, eps); }},
            {"mul", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.mul(in[0], in[1])}; }, {rn({2, 3}), rn({2, 3})}, eps); }},
            {"scale", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.scale(in[0], -1.7)}; }, {rn({4})}, eps); }},
            {"add_scalar", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.add_scalar(in[0], 0.3)}; }, {rn({4})}, eps); }},
            {"matmul", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.matmul(in[0], in[1])}; }, {rn({2, 3}), rn({3, 4})}, eps); }},
            {"transpose", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.transpose(in[0])}; }, {rn({2, 3})}, eps); }},
            {"conv", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.conv(in[0], in[1], 2)}; }, {rn({2, 3, 7}), rn({3, 3, 2})}, eps); }},
            {"relu", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.relu(in[0])}; }, {rn({4, 5})}, eps); }},
            {"sum_axes", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.sum_axes(in[0], {0, 2})}; }, {rn({2, 3, 4})}, eps); }},
            {"expand", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.expand(in[0], {2, 3, 4}, {0, 2})}; }, {rn({3})}, eps); }},
            {"mean", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.mean(in[0])}; }, {rn({2, 3})}, eps); }},
            {"square", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.square(in[0])}; }, {rn({5})}, eps); }},
            {"sqrt", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.sqrt(in[0])}; }, {positive({5})}, eps); }},
            {"reciprocal", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.reciprocal(in[0])}; }, {positive({5})}, eps); }},
            {"concat", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.concat({in[0], in[1]}, 1)}; }, {rn({2, 3, 2}), rn({2, 1, 2})}, eps); }},
            {"slice", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.slice(in[0], 2, 1, 4)}; }, {rn({2, 3, 5})}, eps); }},
            {"reshape", [&] { return ad::gradient_check([](Graph& g, const V& in) { return V{g.reshape(in[0], {6, 2})}; }, {rn({2, 3, 2})}, eps); }},
            {"apply_mask", [&] { return ad::gradient_check([&](Graph& g, const V& in) { return V{g.apply_mask(in[0], mask)}; }, {rn({3, 4})}, eps); }},
            {"grad_norm_second_order", [&] {
                 return ad::gradient_check(
                     [](Graph& g, const V& in) {
                         Var y = g.relu(g.conv(in[0], in[1], 1));
                         Var d = g.sum(g.square(g.conv(y, in[2], 2)));
                         auto gx = g.grad(d, {in[0]}, true);
                         return V{g.sum(g.square(gx[0]))};
                     },
                     {rn({2, 2, 6}), rn({2, 2, 3}), rn({2, 3, 1})}, eps);
             }},
        };
        for (const auto& [name, check] : prims) record(name, check());

        // network layers: weight-normalized causal conv, residual block, full TCN
        {
            auto cfg = tcn::TcnConfig::uniform(2, 3, 2, 2, 2, 2, 0.0);
            cfg.init_std = 0.3;
            tcn::TcnNetwork net("n", cfg, rng);
            randomize_biases(net, rng);
            const auto x = rn({2, 2, 9});
            record("tcn_network", ad::gradient_check_parameters(
                                      [&](Graph& g) { return g.sum(g.square(net.forward(g, g.constant(x), {}).output)); },
                                      net.parameters(), eps));
        }
        // critic loss with gradient penalty
        {
            netgen::CriticConfig cc;
            cc.num_assets = 2;
            cc.covariate_dim = 2;
            cc.window = 5;
            cc.hidden = 3;
            cc.blocks = 2;
            cc.dropout = 0.0;
            cc.init_std = 0.5;
            netgen::Critic critic(cc, rng);
            randomize_biases(critic, rng);
            const auto real = rn({3, 2, 5}), fake = rn({3, 2, 5}), y = rn({3, 2, 5});
            std::uniform_real_distribution<double> u01;
            const ad::Tensor u({3}, {u01(rng), u01(rng), u01(rng)});
            record("critic_loss_wgan_gp", ad::gradient_check_parameters(
                                              [&](Graph& g) {
                                                  return netgen::critic_loss(g, critic, g.constant(real), g.constant(fake),
                                                                             g.constant(y), u, 10.0, {});
                                              },
                                              critic.parameters(), eps));
            // generator through the critic
            netgen::GeneratorConfig gc;
            gc.num_assets = 2;
            gc.num_factors = 1;
            gc.latent_dim = 3;
            gc.covariate_dim = 2;
            gc.hidden = 4;
            gc.blocks = 2;
            gc.residual_hidden = 3;
            gc.residual_blocks = 2;
            gc.dropout = 0.0;
            gc.init_std = 0.3;
            netgen::Generator gen(gc, rng);
            randomize_biases(gen, rng);
            const auto in = random_inputs(gc, 2, 5, rng);
            record("generator_loss", ad::gradient_check_parameters(
                                         [&](Graph& g) {
                                             auto out = gen.forward(g, in, {});
                                             return netgen::generator_loss(g, critic, out.returns, g.constant(in.y), {});
                                         },
                                         gen.parameters(), eps));
        }
    }
    return {worst < tol, "worst relative error " + fmt(worst) + " (" + worst_name + "), tolerance " + fmt(tol)};
}

Outcome receptive_field() {
    const auto a = tcn::receptive_field(2, 2, 6), b = tcn::receptive_field(1, 1, 6);
    bool ok = a == 127 && b == 1;
    std::size_t configs = 0, mismatches = 0;
    std::mt19937_64 rng(7);
    for (std::size_t k = 1; k <= 3; ++k) {
        for (std::size_t D = 1; D <= 2; ++D) {
            for (std::size_t L = 1; L <= 3; ++L) {
                ++configs;
                tcn::TcnNetwork net("n", tcn::TcnConfig::uniform(1, 2, 1, k, D, L, 0.0), rng);
                for (auto* p : net.parameters())
                    for (auto& v : p->value.data()) v = 0.1 + std::abs(v);
                const std::size_t rfs = net.receptive_field();
                const std::size_t T = rfs + 6;
                ad::Tensor base({1, 1, T}, 1.0);
                ad::Graph g0;
                const auto y0 = net.forward(g0, g0.constant(base), {}).output.value();
                // empirical window: outputs that move when input t moves
                std::size_t widest = 0;
                bool causal = true;
                for (std::size_t t = 0; t < T; ++t) {
                    auto x = base;
                    x[t] += 0.5;
                    ad::Graph g;
                    const auto y = net.forward(g, g.constant(x), {}).output.value();
                    for (std::size_t u = 0; u < T; ++u) {
                        if (y[u] == y0[u]) continue;
                        if (u < t) causal = false;
                        else widest = std::max(widest, u - t + 1);
                    }
                }
                if (!causal || widest != rfs) ++mismatches;
            }
        }
    }
    ok = ok && mismatches == 0;
    return {ok, "RFS(2,2,6)=" + std::to_string(a) + " RFS(1,1,6)=" + std::to_string(b) + ", empirical mismatches " +
                    std::to_string(mismatches) + "/" + std::to_string(configs)};
}

Outcome bootstrap_oracle() {
    factor::CoefficientSet c;
    c.alpha = Vector(3);
    c.alpha << 0.001, -0.0005, 0.0;
    c.beta = Matrix(3, 1);
    c.beta << 1.1, 0.7, -0.4;
    c.sigma = Vector(3);
    c.sigma << 0.02, 0.01, 0.03;
    Vector f(1);
    f << 0.015;
    const std::size_t n = 1000000;
    const Matrix draws = factor::bootstrap_generate(c, f, n, 77);
    const Vector mean = draws.colwise().mean().transpose();
    const Vector expected = c.alpha + c.beta * f;
    double worst_se = 0.0;
    for (int i = 0; i < 3; ++i)
        worst_se = std::max(worst_se, std::abs(mean(i) - expected(i)) / (c.sigma(i) / std::sqrt(double(n))));
    const Matrix centered = draws.rowwise() - mean.transpose();
    const Matrix cov = centered.transpose() * centered / double(n - 1);
    const Matrix target = c.sigma.array().square().matrix().asDiagonal();
    const double rel = (cov - target).norm() / target.norm();
    return {worst_se < 4.0 && rel < 0.01,
            "mean error " + fmt(worst_se) + " SE (limit 4), covariance Frobenius relative error " + fmt(rel) +
                " (limit 0.01)"};
}

Outcome metric_identities() {
    const Matrix real = gaussian(300, 4, 21, 0.01);
    const metrics::PathSet self{real, real};
    std::vector<std::pair<std::string, double>> zeros{
        {"fid", metrics::fid(real, real).fid},
        {"swd", metrics::swd(real, real, 50, 3)},
        {"dtw", metrics::dtw(real, real)},
        {"acf", metrics::stylized_panel_score(real, self, metrics::CurveKind::ACF, 50)},
        {"vc", metrics::stylized_panel_score(real, self, metrics::CurveKind::VC, 50)},
        {"lev", metrics::stylized_panel_score(real, self, metrics::CurveKind::Lev, 50)},
        {"rmse", metrics::rmse_mae(real, self).rmse},
        {"mae", metrics::rmse_mae(real, self).mae},
    };
    bool ok = true;
    std::string nonzero;
    for (const auto& [k, v] : zeros) {
        if (v != 0.0) {
            ok = false;
            nonzero += " " + k + "=" + fmt(v);
        }
    }
    const metrics::Gaussian a{Vector::Zero(1), Matrix::Constant(1, 1, 1.0)};
    const metrics::Gaussian b{Vector::Ones(1), Matrix::Constant(1, 1, 4.0)};
    const double f2 = metrics::fid_squared(a, b);
    Vector x(2), y(3);
    x << 0, 1;
    y << 0, 0, 1;
    const double d = metrics::dtw(x, y);
    ok = ok && std::abs(f2 - 2.0) <= 1e-9 && d == 0.0;
    return {ok, "self-comparison " + (nonzero.empty() ? std::string("all exactly 0") : "nonzero:" + nonzero) +
                    ", FID^2 " + fmt(f2) + ", DTW " + fmt(d)};
}

Outcome tail_dependence() {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u01;
    Matrix p(1000000, 3);
    for (Eigen::Index t = 0; t < p.rows(); ++t)
        for (Eigen::Index i = 0; i < 3; ++i) p(t, i) = u01(rng);
    double worst = 0.0;
    const Matrix e = metrics::extreme_cross_corr(p);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            if (i != j) worst = std::max(worst, std::abs(e(i, j) - 0.05));
    Matrix q = gaussian(2000, 2, 32);
    q.col(1) = q.col(0).array().exp();  // comonotone, not identical
    const double co = metrics::extreme_cross_corr(q)(0, 1);
    return {worst <= 0.002 && co == 1.0,
            "max |off-diagonal - 0.05| " + fmt(worst) + " (limit 0.002), comonotone " + fmt(co)};
}

Outcome zero_head_reduction() {
    netgen::GeneratorConfig gc;
    gc.num_assets = 4;
    gc.num_factors = 2;
    gc.latent_dim = 3;
    gc.covariate_dim = 2;
    gc.hidden = 5;
    gc.blocks = 2;
    gc.residual_hidden = 4;
    gc.residual_blocks = 2;
    gc.dropout = 0.0;
    std::mt19937_64 rng(41);
    netgen::Generator gen(gc, rng);
    for (auto* head : {&gen.head_alpha(), &gen.head_beta(), &gen.head_sigma()}) {
        std::vector<ad::Parameter*> ps;
        head->collect(ps);
        for (auto* p : ps) p->value.fill(0.0);
        head->set_bias(0.0);
    }
    factor::CoefficientSet hat;
    hat.alpha = gaussian(4, 1, 42, 0.001).col(0);
    hat.beta = gaussian(4, 2, 43).array() + 1.0;
    hat.sigma = gaussian(4, 1, 44, 0.01).col(0).cwiseAbs().array() + 0.005;
    const Vector f = gaussian(2, 1, 45, 0.01).col(0);
    const std::size_t N = 4, K = 2, T = 2000;
    const std::uint64_t seed = 46;
    const Matrix boot = factor::bootstrap_generate(hat, f, T, seed);
    const Matrix eps = factor::standard_normal(T, N, seed);

    auto in = random_inputs(gc, 1, T, rng);
    in.eps_override = ad::Tensor({1, N, T});
    for (std::size_t u = 0; u < T; ++u) {
        for (std::size_t i = 0; i < N; ++i) {
            in.alpha_hat[i * T + u] = hat.alpha(i);
            in.sigma_hat[i * T + u] = hat.sigma(i);
            in.eps_override[i * T + u] = eps(u, i);
            for (std::size_t k = 0; k < K; ++k) in.beta_hat[(i * K + k) * T + u] = hat.beta(i, k);
        }
        for (std::size_t k = 0; k < K; ++k) in.factors_next[k * T + u] = f(k);
    }
    ad::Graph g;
    const auto out = gen.forward(g, in, {});
    std::size_t differ = 0;
    for (std::size_t u = 0; u < T; ++u)
        for (std::size_t i = 0; i < N; ++i)
            if (out.returns.value()[i * T + u] != boot(u, i)) ++differ;
    return {differ == 0, std::to_string(differ) + " of " + std::to_string(N * T) + " returns differ bitwise"};
}

Outcome perturbation_calibration() {
    const Matrix F = gaussian(1000001, 1, 51, 0.01);
    double worst = 0.0;
    std::string detail;
    for (double r2 : {0.5, 0.1, 0.01}) {
        portfolio::FactorForecaster fc({portfolio::ForecastMethod::Perturbed, 252, r2, 52}, F);
        const Eigen::Index n = F.rows() - 1;
        Vector y(n), x(n);
        for (Eigen::Index t = 0; t < n; ++t) {
            y(t) = F(t + 1, 0);
            x(t) = fc.forecast(static_cast<std::size_t>(t))(0);
        }
        const Vector yc = y.array() - y.mean(), xc = x.array() - x.mean();
        const double c = yc.dot(xc);
        const double got = c * c / (yc.squaredNorm() * xc.squaredNorm());
        worst = std::max(worst, std::abs(got - r2));
        detail += " R2(" + fmt(r2) + ")=" + fmt(got);
    }
    return {worst <= 0.01, "empirical" + detail + ", max deviation " + fmt(worst) + " (limit 0.01)"};
}

double grid_best_sharpe(const Vector& mu, const Matrix& S) {
    double best = -1e300;
    const int n = 1000;
    Vector w(mu.size());
    if (mu.size() == 2) {
        for (int i = 0; i <= n; ++i) {
            w << i / double(n), 1 - i / double(n);
            best = std::max(best, portfolio::sharpe(w, mu, S));
        }
    } else {
        for (int i = 0; i <= n; ++i) {
            for (int j = 0; i + j <= n; ++j) {
                w << i / double(n), j / double(n), (n - i - j) / double(n);
                best = std::max(best, portfolio::sharpe(w, mu, S));
            }
        }
    }
    return best;
}

Outcome portfolio_oracle() {
    std::mt19937_64 rng(61);
    std::normal_distribution<double> n01;
    double worst = 0.0;
    std::size_t instances = 0;
    for (int trial = 0; trial < 230; ++trial) {
        const Eigen::Index N = trial < 200 ? 2 : 3;
        const Matrix A = gaussian(N + 3, N, 600 + static_cast<std::uint64_t>(trial));
        const Matrix S = A.transpose() * A / double(N + 3);
        Vector mu(N);
        for (Eigen::Index i = 0; i < N; ++i) mu(i) = n01(rng);
        if (mu.maxCoeff() <= 0) mu(0) = std::abs(mu(0)) + 0.1;
        const auto r = portfolio::tangency_long_only(mu, S);
        const double s = portfolio::sharpe(r.weights, mu, S);
        double gap = std::abs(s - grid_best_sharpe(mu, S));
        if (std::abs(r.weights.sum() - 1.0) > 1e-9 || r.weights.minCoeff() < -1e-12) gap = 1e300;
        worst = std::max(worst, gap);
        ++instances;
    }
    Matrix w(2, 2);
    w << 1, 0, 0, 1;
    const double turnover = portfolio::backtest(w, Matrix::Zero(2, 2)).turnover(1);
    return {worst <= 1e-4 && turnover == 2.0, std::to_string(instances) + " instances, max |Sharpe - grid optimum| " +
                                                   fmt(worst) + " (limit 1e-4), full-switch turnover " + fmt(turnover)};
}

Outcome fixture_experiment() {
    const std::size_t seeds = 5, paths = 100;
    std::size_t wins = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
        data::FixtureSpec fs;
        fs.num_assets = 5;
        fs.num_factors = 1;
        fs.num_dates = 4000;
        fs.residual_correlation = 0.4;
        fs.seed = 100 + seed;
        const auto d = train::prepare(data::simulate_market(fs).dataset);
        const auto all = d.positions();
        const train::PositionRange test{all.end - 500, all.end};
        const auto [tr, va] = train::split({all.begin, test.begin});

        netgen::GeneratorConfig g;
        g.num_assets = 5;
        g.num_factors = 1;
        g.covariate_dim = d.covariate_dim();
        g.hidden = 16;
        g.blocks = 3;
        g.residual_hidden = 16;
        g.residual_blocks = 3;
        g.init_std = 0.05;
        train::TrainConfig t;
        t.epochs = 150;
        t.batch_size = 32;
        t.window = 64;
        t.batches_per_epoch = 4;
        t.return_scale = 100.0;
        t.fine_tune_epochs = 10;
        netgen::CriticConfig c;
        c.num_assets = 5;
        c.covariate_dim = d.covariate_dim();
        c.window = t.window;
        c.hidden = 16;
        c.blocks = 3;
        c.init_std = 0.05;
        train::Trainer trainer(g, c, t, {seed, seed + 10, seed + 20, seed + 30});
        trainer.fit(d, tr, va);
        trainer.fine_tune(d, va);

        std::mt19937_64 latent(1000 + seed);
        const auto gan = train::generate_paths(trainer.generator(), d, test, paths, latent);
        const auto boot = train::bootstrap_paths(d, test, paths, 2000 + seed);
        const Matrix real = d.realized(test);
        const double sg = metrics::xcorr_score(real, gan), sb = metrics::xcorr_score(real, boot);
        if (sg < sb) ++wins;
        detail += " seed" + std::to_string(seed) + ":" + fmt(sg) + "/" + fmt(sb);
        std::cerr << "  criterion 9 seed " << seed << ": marketgan " << sg << " bootstrap " << sb << std::endl;
    }
    return {wins >= 4, std::to_string(wins) + "/" + std::to_string(seeds) +
                           " seeds beat the bootstrap (XCorr marketgan/bootstrap:" + detail + ")"};
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "marketgan_acceptance_determinism";
    fs::remove_all(root);
    const cli::KeyValues base{{"fixture.num_dates", "1500"},
                              {"fixture.num_factors", "1"},
                              {"data.dir", (root / "data").string()},
                              {"data.test_days", "252"},
                              {"gen.hidden", "8"},
                              {"gen.blocks", "3"},
                              {"gen.residual_hidden", "8"},
                              {"gen.residual_blocks", "2"},
                              {"gen.init_std", "0.05"},
                              {"critic.hidden", "8"},
                              {"critic.blocks", "3"},
                              {"critic.init_std", "0.05"},
                              {"train.window", "32"},
                              {"train.batch_size", "16"},
                              {"train.batches_per_epoch", "4"},
                              {"train.epochs", "5"},
                              {"train.fine_tune_epochs", "2"},
                              {"train.return_scale", "100"},
                              {"backtest.models", "benchmark,bootstrap,marketgan"},
                              {"backtest.days", "63"},
                              {"backtest.samples", "2000"},
                              {"seed", "2024"}};
    auto with = [&](const std::string& out, const std::string& ckpt = "") {
        auto kv = base;
        kv["out"] = (root / out).string();
        if (!ckpt.empty()) kv["backtest.checkpoint"] = ckpt;
        return cli::Config::resolve({}, kv);
    };
    std::ostringstream log;
    cli::cmd_fixture(with("data"), log);

    auto pipeline = [&](const std::string& tag) {
        const auto t0 = std::chrono::steady_clock::now();
        cli::cmd_train(with("train_" + tag), log);
        const int rc = cli::cmd_backtest(with("bt_" + tag, (root / ("train_" + tag) / "checkpoint.json").string()), log);
        if (rc != cli::kOk) throw std::runtime_error("backtest cells failed:\n" + log.str());
        return seconds_since(t0);
    };
    const double first = pipeline("a");
    const double second = pipeline("b");

    std::size_t compared = 0;
    std::vector<std::string> differ;
    auto compare = [&](const fs::path& a, const fs::path& b) {
        ++compared;
        if (slurp(a) != slurp(b) || !fs::exists(a)) differ.push_back(a.lexically_relative(root).string());
    };
    compare(root / "train_a" / "checkpoint.json", root / "train_b" / "checkpoint.json");
    compare(root / "train_a" / "log.csv", root / "train_b" / "log.csv");
    compare(root / "train_a" / "summary.json", root / "train_b" / "summary.json");
    for (const auto& e : fs::recursive_directory_iterator(root / "bt_a")) {
        if (!e.is_regular_file() || e.path().filename() == "config.resolved") continue;
        compare(e.path(), root / "bt_b" / e.path().lexically_relative(root / "bt_a"));
    }
    const bool ok = differ.empty() && compared > 10 && second < 2.0 * first;
    std::string detail = std::to_string(compared) + " files compared, " + std::to_string(differ.size()) +
                         " differ; rerun " + fmt(second) + " s vs first run " + fmt(first) + " s";
    for (const auto& d : differ) detail += " [" + d + "]";
    return {ok, detail};
}

struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> run;
};

} // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "gradient correctness", 60, gradients},
        {2, "receptive field", 60, receptive_field},
        {3, "bootstrap oracle", 60, bootstrap_oracle},
        {4, "metric identities", 60, metric_identities},
        {5, "tail-dependence baseline", 60, tail_dependence},
        {6, "zero-head reduction to bootstrap", 60, zero_head_reduction},
        {7, "perturbation calibration", 60, perturbation_calibration},
        {8, "portfolio oracle", 300, portfolio_oracle},
        {9, "fixture cross-correlation experiment", 1800, fixture_experiment},
        {10, "determinism", 0, determinism},  // budget is relative, checked inside
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

    int failures = 0;
    for (const auto& c : all) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = seconds_since(t0);
        if (c.budget_seconds > 0 && secs > c.budget_seconds) {
            o.pass = false;
            o.detail += "; over time budget " + fmt(c.budget_seconds) + " s";
        }
        if (!o.pass) ++failures;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail
                  << " [" << std::fixed << std::setprecision(1) << secs << " s]" << std::defaultfloat << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
