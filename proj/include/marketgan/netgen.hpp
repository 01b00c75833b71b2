// netgen.hpp
//
// Factor-structured conditional generator and the WGAN-GP critic.
//
// Batch layout: every sequence tensor is [B, channels, T] and position u of a
// window pairs the conditioning data at date u (coefficients, covariates) with
// the return realized at u + 1.

#pragma once

#include "marketgan/factor.hpp"
#include "marketgan/tcn.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <random>

namespace marketgan::netgen {

using ad::Graph;
using ad::Parameter;
using ad::Tensor;
using ad::Var;
using factor::CoefficientSet;
using tcn::RunContext;

struct GeneratorConfig {
    std::size_t num_assets = 1;
    std::size_t num_factors = 1;
    std::size_t latent_dim = 10;
    std::size_t covariate_dim = 8;
    std::size_t hidden = 80;
    std::size_t blocks = 6;
    std::size_t kernel_size = 2;
    std::size_t dilation_base = 2;
    std::size_t residual_hidden = 80;
    std::size_t residual_blocks = 6;
    double dropout = 0.2;
    double init_std = 0.5;
    bool weight_norm = true;

    void validate() const;
    tcn::TcnConfig backbone() const;
    tcn::TcnConfig residual() const;
    std::size_t receptive_field() const { return tcn::receptive_field(backbone()); }
};

struct CriticConfig {
    std::size_t num_assets = 1;
    std::size_t covariate_dim = 8;
    std::size_t window = 1;  ///< T_L, fixed by the final linear map
    std::size_t hidden = 160;
    std::size_t blocks = 6;
    std::size_t kernel_size = 2;
    std::size_t dilation_base = 2;
    double dropout = 0.2;
    double init_std = 0.5;
    bool weight_norm = true;

    void validate() const;
    tcn::TcnConfig network() const;
};

/// Conditioning windows for a batch of B sequences of length T.
struct GeneratorInputs {
    Tensor z;             ///< [B, d_z, T + 1]: z_u for u = s .. s + T
    Tensor y;             ///< [B, d_y, T]
    Tensor alpha_hat;     ///< [B, N, T]
    Tensor beta_hat;      ///< [B, N * K, T], asset-major (i * K + k)
    Tensor sigma_hat;     ///< [B, N, T]
    Tensor factors_next;  ///< [B, K, T]: F_{u+1}
    Tensor eps_override;  ///< optional [B, N, T] replacing the residual network output

    std::size_t batch() const { return z.dim(0); }
    std::size_t length() const { return y.dim(2); }
};

struct GeneratorOutputs {
    Var returns;  ///< [B, N, T]: r_{u+1}
    Var alpha, beta, sigma, eps;
    Var f_alpha, f_beta, f_sigma;
    bool shorter_than_receptive_field = false;
};

class Generator {
public:
    Generator() = default;
    Generator(const GeneratorConfig& config, std::mt19937_64& rng);

    GeneratorOutputs forward(Graph& g, const GeneratorInputs& in, const RunContext& ctx);

    /// Head outputs f_alpha [B,N,T], f_beta [B,N*K,T], f_sigma [B,N,T].
    std::array<Var, 3> heads(Graph& g, Var z_window, Var y_window, const RunContext& ctx);
    /// Residual draws [B, N, T] from z_{u+1} and y_u.
    Var residuals(Graph& g, Var z_next, Var y, const RunContext& ctx);

    std::vector<Parameter*> parameters();
    const GeneratorConfig& config() const noexcept { return config_; }
    tcn::TcnTrunk& backbone() { return backbone_; }
    tcn::CausalConv& head_alpha() { return head_alpha_; }
    tcn::CausalConv& head_beta() { return head_beta_; }
    tcn::CausalConv& head_sigma() { return head_sigma_; }
    tcn::TcnNetwork& residual_net() { return residual_; }

private:
    GeneratorConfig config_;
    tcn::TcnTrunk backbone_;
    tcn::CausalConv head_alpha_, head_beta_, head_sigma_;
    tcn::TcnNetwork residual_;
};

/// hat * (1 + f) at the last position of the window. z_window: [d_z, W],
/// y_window: [d_y, W]. Non-finite hat values raise std::invalid_argument.
CoefficientSet generate_coefficients(Generator& gen, const Tensor& z_window, const Tensor& y_window,
                                     const CoefficientSet& hat);

/// Residual vector for one step from z_next [d_z] and y_t [d_y].
factor::Vector generate_residuals(Generator& gen, const Tensor& z_next, const Tensor& y_t);

using factor::assemble_returns;

class Critic {
public:
    Critic() = default;
    Critic(const CriticConfig& config, std::mt19937_64& rng);

    /// returns [B, N, T_L], y [B, d_y, T_L] -> scores [B, 1]
    Var score(Graph& g, Var returns, Var y, const RunContext& ctx);

    std::vector<Parameter*> parameters();
    const CriticConfig& config() const noexcept { return config_; }
    tcn::TcnNetwork& network() { return net_; }
    Parameter& readout() { return readout_; }
    Parameter& readout_bias() { return readout_bias_; }

private:
    CriticConfig config_;
    tcn::TcnNetwork net_;
    Parameter readout_;       // [T_L, 1]
    Parameter readout_bias_;  // [1]
};

/// Score of a single window: returns [N, T_L], y [d_y, T_L].
double critic_score(Critic& critic, const Tensor& returns, const Tensor& y);

/// lambda * mean_b (||d D(x_b) / d x_b|| - 1)^2 for a differentiable x [B, ...];
/// `critic` maps x to per-sample scores of shape [B] or [B, 1].
Var gradient_penalty(Graph& g, const std::function<Var(Graph&, Var)>& critic, Var x, double lambda);

/// u * real + (1 - u) * fake, with one u per sample (u has shape [B]).
Tensor interpolate(const Tensor& real, const Tensor& fake, const Tensor& u);

struct PenaltyRecord {
    Tensor u;
    Tensor interpolant;
};

struct CriticLossParts {
    Var wasserstein;  ///< mean D(real) - mean D(fake)
    Var penalty;
};

/// mean D(fake) - mean D(real) + gradient penalty. The penalty pass runs
/// without dropout. Throws std::invalid_argument for lambda < 0.
Var critic_loss(Graph& g, Critic& critic, Var real, Var fake, Var y, const Tensor& u, double lambda,
                const RunContext& ctx, CriticLossParts* parts = nullptr);

/// -mean D(fake)
Var generator_loss(Graph& g, Critic& critic, Var fake, Var y, const RunContext& ctx);

struct WganLosses {
    double critic_loss = 0.0;
    double generator_loss = 0.0;
    double wasserstein = 0.0;  ///< mean D(real) - mean D(fake)
    double penalty = 0.0;
    PenaltyRecord record;
};

/// Evaluates both losses on fixed batches; u ~ U(0, 1) per sample from rng.
WganLosses wgan_gp_losses(Critic& critic, const Tensor& real, const Tensor& fake, const Tensor& y, double lambda,
                          std::mt19937_64& rng);

} // namespace marketgan::netgen
