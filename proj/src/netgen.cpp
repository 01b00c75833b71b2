#include "marketgan/netgen.hpp"

#include <cmath>
#include <stdexcept>

namespace marketgan::netgen {

void GeneratorConfig::validate() const {
    if (num_assets == 0 || num_factors == 0) throw std::invalid_argument("generator needs N >= 1 and K >= 1");
    if (latent_dim == 0) throw std::invalid_argument("latent_dim must be positive");
    backbone().validate();
    residual().validate();
}

tcn::TcnConfig GeneratorConfig::backbone() const {
    tcn::TcnConfig c = tcn::TcnConfig::uniform(latent_dim + covariate_dim, hidden, 1, kernel_size, dilation_base,
                                               blocks, dropout);
    c.init_std = init_std;
    c.weight_norm = weight_norm;
    return c;
}

tcn::TcnConfig GeneratorConfig::residual() const {
    tcn::TcnConfig c =
        tcn::TcnConfig::uniform(latent_dim + covariate_dim, residual_hidden, num_assets, 1, 1, residual_blocks, dropout);
    c.init_std = init_std;
    c.weight_norm = weight_norm;
    return c;
}

void CriticConfig::validate() const {
    if (num_assets == 0) throw std::invalid_argument("critic needs N >= 1");
    if (window == 0) throw std::invalid_argument("critic window must be positive");
    network().validate();
}

tcn::TcnConfig CriticConfig::network() const {
    tcn::TcnConfig c =
        tcn::TcnConfig::uniform(num_assets + covariate_dim, hidden, 1, kernel_size, dilation_base, blocks, dropout);
    c.init_std = init_std;
    c.weight_norm = weight_norm;
    return c;
}

Generator::Generator(const GeneratorConfig& config, std::mt19937_64& rng) : config_(config) {
    config_.validate();
    const std::size_t N = config_.num_assets, K = config_.num_factors, H = config_.hidden;
    backbone_ = tcn::TcnTrunk("gen.backbone", config_.backbone(), rng);
    head_alpha_ = tcn::CausalConv("gen.head_alpha", H, N, 1, 1, false, config_.init_std, rng);
    head_beta_ = tcn::CausalConv("gen.head_beta", H, N * K, 1, 1, false, config_.init_std, rng);
    head_sigma_ = tcn::CausalConv("gen.head_sigma", H, N, 1, 1, false, config_.init_std, rng);
    residual_ = tcn::TcnNetwork("gen.residual", config_.residual(), rng);
}

std::array<Var, 3> Generator::heads(Graph& g, Var z_window, Var y_window, const RunContext& ctx) {
    Var h = backbone_.forward(g, g.concat({z_window, y_window}, 1), ctx);
    return {head_alpha_.forward(g, h), head_beta_.forward(g, h), head_sigma_.forward(g, h)};
}

Var Generator::residuals(Graph& g, Var z_next, Var y, const RunContext& ctx) {
    return residual_.forward(g, g.concat({z_next, y}, 1), ctx).output;
}

GeneratorOutputs Generator::forward(Graph& g, const GeneratorInputs& in, const RunContext& ctx) {
    const std::size_t B = in.batch(), T = in.length();
    const std::size_t N = config_.num_assets, K = config_.num_factors;
    auto expect = [](const Tensor& t, ad::Shape s, const char* what) {
        if (t.shape() != s) {
            throw ad::DimensionError(std::string("generator input ") + what + ": expected " + ad::shape_string(s) +
                                     ", got " + ad::shape_string(t.shape()));
        }
    };
    expect(in.z, {B, config_.latent_dim, T + 1}, "z");
    expect(in.y, {B, config_.covariate_dim, T}, "y");
    expect(in.alpha_hat, {B, N, T}, "alpha_hat");
    expect(in.beta_hat, {B, N * K, T}, "beta_hat");
    expect(in.sigma_hat, {B, N, T}, "sigma_hat");
    expect(in.factors_next, {B, K, T}, "factors_next");

    GeneratorOutputs out;
    Var z = g.constant(in.z);
    Var y = g.constant(in.y);
    Var z_coef = g.slice(z, 2, 0, T);
    Var z_next = g.slice(z, 2, 1, T + 1);
    auto [fa, fb, fs] = heads(g, z_coef, y, ctx);
    out.f_alpha = fa;
    out.f_beta = fb;
    out.f_sigma = fs;
    out.alpha = g.mul(g.constant(in.alpha_hat), g.add_scalar(fa, 1.0));
    out.beta = g.mul(g.constant(in.beta_hat), g.add_scalar(fb, 1.0));
    out.sigma = g.mul(g.constant(in.sigma_hat), g.add_scalar(fs, 1.0));
    if (in.eps_override.empty()) {
        out.eps = residuals(g, z_next, y, ctx);
    } else {
        expect(in.eps_override, {B, N, T}, "eps_override");
        out.eps = g.constant(in.eps_override);
    }

    Var beta4 = g.reshape(out.beta, {B, N, K, T});
    Var f4 = g.expand(g.constant(in.factors_next), {B, N, K, T}, {1});
    Var bf = g.sum_axes(g.mul(beta4, f4), {2});
    out.returns = g.add(g.add(out.alpha, bf), g.mul(out.sigma, out.eps));
    out.shorter_than_receptive_field = T < config_.receptive_field();
    return out;
}

std::vector<Parameter*> Generator::parameters() {
    std::vector<Parameter*> out;
    backbone_.collect(out);
    head_alpha_.collect(out);
    head_beta_.collect(out);
    head_sigma_.collect(out);
    residual_.collect(out);
    return out;
}

CoefficientSet generate_coefficients(Generator& gen, const Tensor& z_window, const Tensor& y_window,
                                     const CoefficientSet& hat) {
    const auto& c = gen.config();
    const std::size_t N = c.num_assets, K = c.num_factors;
    if (hat.num_assets() != N || hat.num_factors() != K || static_cast<std::size_t>(hat.beta.rows()) != N ||
        static_cast<std::size_t>(hat.sigma.size()) != N) {
        throw ad::DimensionError("generate_coefficients: hat coefficients do not match N, K");
    }
    if (!hat.all_finite()) throw std::invalid_argument("generate_coefficients: non-finite hat coefficients");
    if (z_window.rank() != 2 || y_window.rank() != 2 || z_window.dim(0) != c.latent_dim ||
        y_window.dim(0) != c.covariate_dim || z_window.dim(1) != y_window.dim(1) || z_window.dim(1) == 0) {
        throw ad::DimensionError("generate_coefficients: expected z [d_z, W] and y [d_y, W]");
    }
    const std::size_t W = z_window.dim(1);
    Graph g;
    Graph::NoGradScope no_grad(g);
    Var z = g.constant(z_window.reshaped({1, c.latent_dim, W}));
    Var y = g.constant(y_window.reshaped({1, c.covariate_dim, W}));
    const auto h = gen.heads(g, z, y, {});
    const Tensor& fa = h[0].value();
    const Tensor& fb = h[1].value();
    const Tensor& fs = h[2].value();
    CoefficientSet out;
    out.alpha.resize(N);
    out.sigma.resize(N);
    out.beta.resize(N, K);
    for (std::size_t i = 0; i < N; ++i) {
        out.alpha(i) = hat.alpha(i) * (fa[i * W + W - 1] + 1.0);
        out.sigma(i) = hat.sigma(i) * (fs[i * W + W - 1] + 1.0);
        for (std::size_t k = 0; k < K; ++k) out.beta(i, k) = hat.beta(i, k) * (fb[(i * K + k) * W + W - 1] + 1.0);
    }
    return out;
}

factor::Vector generate_residuals(Generator& gen, const Tensor& z_next, const Tensor& y_t) {
    const auto& c = gen.config();
    if (z_next.size() != c.latent_dim || y_t.size() != c.covariate_dim) {
        throw ad::DimensionError("generate_residuals: expected z [d_z] and y [d_y]");
    }
    Graph g;
    Graph::NoGradScope no_grad(g);
    Var eps = gen.residuals(g, g.constant(z_next.reshaped({1, c.latent_dim, 1})),
                            g.constant(y_t.reshaped({1, c.covariate_dim, 1})), {});
    factor::Vector out(c.num_assets);
    for (std::size_t i = 0; i < c.num_assets; ++i) out(i) = eps.value()[i];
    return out;
}

Critic::Critic(const CriticConfig& config, std::mt19937_64& rng) : config_(config) {
    config_.validate();
    net_ = tcn::TcnNetwork("critic.tcn", config_.network(), rng);
    readout_ = Parameter("critic.readout", ad::random_normal({config_.window, 1}, rng, config_.init_std));
    readout_bias_ = Parameter("critic.readout_bias", Tensor({1}));
}

Var Critic::score(Graph& g, Var returns, Var y, const RunContext& ctx) {
    const auto& s = returns.shape();
    if (s.size() != 3 || s[1] != config_.num_assets || s[2] != config_.window) {
        throw ad::DimensionError("critic expects returns [B, " + std::to_string(config_.num_assets) + ", " +
                                 std::to_string(config_.window) + "], got " + ad::shape_string(s));
    }
    const std::size_t B = s[0];
    Var h = net_.forward(g, g.concat({returns, y}, 1), ctx).output;  // [B, 1, T_L]
    Var lin = g.matmul(g.reshape(h, {B, config_.window}), g.parameter(readout_));
    return g.add(lin, g.expand(g.parameter(readout_bias_), {B, 1}, {0}));
}

std::vector<Parameter*> Critic::parameters() {
    std::vector<Parameter*> out;
    net_.collect(out);
    out.push_back(&readout_);
    out.push_back(&readout_bias_);
    return out;
}

double critic_score(Critic& critic, const Tensor& returns, const Tensor& y) {
    const auto& c = critic.config();
    if (returns.rank() != 2 || y.rank() != 2) throw ad::DimensionError("critic_score: expected [N, T_L] and [d_y, T_L]");
    Graph g;
    Graph::NoGradScope no_grad(g);
    Var r = g.constant(returns.reshaped({1, returns.dim(0), returns.dim(1)}));
    Var yy = g.constant(y.reshaped({1, c.covariate_dim, y.dim(1)}));
    return critic.score(g, r, yy, {}).value().item();
}

Var gradient_penalty(Graph& g, const std::function<Var(Graph&, Var)>& critic, Var x, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("gradient penalty coefficient must be non-negative");
    Var total = g.sum(critic(g, x));
    Var gx = g.grad(total, {x}, true).front();
    Var sq = g.square(gx);
    const std::size_t rank = x.shape().size();
    if (rank > 1) {
        std::vector<std::size_t> axes;
        for (std::size_t a = 1; a < rank; ++a) axes.push_back(a);
        sq = g.sum_axes(sq, axes);
    }
    Var dev = g.add_scalar(g.sqrt(sq), -1.0);
    return g.scale(g.mean(g.square(dev)), lambda);
}

Tensor interpolate(const Tensor& real, const Tensor& fake, const Tensor& u) {
    if (real.shape() != fake.shape() || real.rank() == 0 || u.size() != real.dim(0)) {
        throw ad::DimensionError("interpolate: real, fake and u disagree");
    }
    Tensor out(real.shape());
    const std::size_t per = real.size() / real.dim(0);
    for (std::size_t b = 0; b < real.dim(0); ++b) {
        for (std::size_t j = 0; j < per; ++j) {
            const std::size_t i = b * per + j;
            out[i] = u[b] * real[i] + (1.0 - u[b]) * fake[i];
        }
    }
    return out;
}

Var critic_loss(Graph& g, Critic& critic, Var real, Var fake, Var y, const Tensor& u, double lambda,
                const RunContext& ctx, CriticLossParts* parts) {
    if (lambda < 0.0) throw std::invalid_argument("gradient penalty coefficient must be non-negative");
    Var d_real = g.mean(critic.score(g, real, y, ctx));
    Var d_fake = g.mean(critic.score(g, fake, y, ctx));
    Var x = g.input(interpolate(real.value(), fake.value(), u));
    const RunContext no_dropout{tcn::Mode::Eval, nullptr};
    Var penalty = gradient_penalty(
        g, [&](Graph& gg, Var xt) { return critic.score(gg, xt, y, no_dropout); }, x, lambda);
    if (parts != nullptr) {
        parts->wasserstein = g.sub(d_real, d_fake);
        parts->penalty = penalty;
    }
    return g.add(g.sub(d_fake, d_real), penalty);
}

Var generator_loss(Graph& g, Critic& critic, Var fake, Var y, const RunContext& ctx) {
    return g.scale(g.mean(critic.score(g, fake, y, ctx)), -1.0);
}

WganLosses wgan_gp_losses(Critic& critic, const Tensor& real, const Tensor& fake, const Tensor& y, double lambda,
                          std::mt19937_64& rng) {
    if (lambda < 0.0) throw std::invalid_argument("gradient penalty coefficient must be non-negative");
    if (real.shape() != fake.shape()) throw ad::DimensionError("wgan_gp_losses: real and fake batches differ in shape");
    const std::size_t B = real.dim(0);
    Tensor u({B});
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (auto& v : u.data()) v = unif(rng);

    Graph g;
    const RunContext eval{};
    CriticLossParts parts;
    Var yv = g.constant(y);
    Var cl = critic_loss(g, critic, g.constant(real), g.constant(fake), yv, u, lambda, eval, &parts);
    Var gl = generator_loss(g, critic, g.constant(fake), yv, eval);

    WganLosses out;
    out.critic_loss = cl.value().item();
    out.generator_loss = gl.value().item();
    out.wasserstein = parts.wasserstein.value().item();
    out.penalty = parts.penalty.value().item();
    out.record.u = u;
    out.record.interpolant = interpolate(real, fake, u);
    return out;
}

} // namespace marketgan::netgen
