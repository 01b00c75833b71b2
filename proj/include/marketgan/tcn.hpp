// tcn.hpp
//
// Temporal convolutional networks: causal dilated convolutions with zero
// left-padding, residual blocks, and 1x1 input/output projections.

#pragma once

#include "marketgan/autodiff.hpp"

#include <json.hpp>

#include <cstddef>
#include <random>
#include <string>
#include <vector>

namespace marketgan::tcn {

using ad::Graph;
using ad::Parameter;
using ad::Tensor;
using ad::Var;

struct TcnConfig {
    std::size_t input_channels = 1;
    std::vector<std::size_t> channels{80, 80, 80, 80, 80, 80};  ///< width of each residual block
    std::size_t output_channels = 1;
    std::size_t kernel_size = 2;
    std::size_t dilation_base = 2;
    double dropout = 0.2;
    double init_std = 0.5;
    bool weight_norm = true;

    std::size_t num_blocks() const noexcept { return channels.size(); }
    void validate() const;

    static TcnConfig uniform(std::size_t in, std::size_t hidden, std::size_t out, std::size_t kernel,
                             std::size_t dilation, std::size_t blocks, double dropout = 0.2);
};

/// 1 + 2(k-1)(D^L - 1)/(D - 1); for D = 1 the limit 1 + 2(k-1)L.
std::size_t receptive_field(std::size_t kernel_size, std::size_t dilation_base, std::size_t num_blocks);
std::size_t receptive_field(const TcnConfig& config);

/// Raw causal dilated convolution on a single sequence.
/// x: [C_in, T], weights: [k, C_in, C_out], bias: [C_out] -> [C_out, T].
/// Throws std::domain_error on non-finite input.
Tensor dilated_causal_conv(const Tensor& x, const Tensor& weights, const Tensor& bias, std::size_t dilation);

enum class Mode { Train, Eval };

/// Dropout is active only in Train mode with a non-null rng.
struct RunContext {
    Mode mode = Mode::Eval;
    std::mt19937_64* dropout_rng = nullptr;
};

Var dropout(Graph& g, Var x, double rate, const RunContext& ctx);

/// Causal convolution layer, optionally weight-normalized:
/// W[:, :, o] = magnitude[o] * direction[:, :, o] / ||direction[:, :, o]||.
class CausalConv {
public:
    CausalConv() = default;
    CausalConv(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation,
               bool weight_norm, double init_std, std::mt19937_64& rng);

    Var forward(Graph& g, Var x);
    /// Effective kernel [k, C_in, C_out] after normalization.
    Tensor effective_weight() const;
    /// Overwrites the effective kernel (magnitude absorbs the norm).
    void set_weight(const Tensor& w);
    void set_bias(double b);

    void collect(std::vector<Parameter*>& out);
    std::size_t dilation() const noexcept { return dilation_; }
    std::size_t kernel() const noexcept { return kernel_; }

private:
    Var weight(Graph& g);

    std::size_t kernel_ = 1;
    std::size_t dilation_ = 1;
    bool weight_norm_ = false;
    Parameter direction_;  // plain weight when weight_norm_ is false
    Parameter magnitude_;
    Parameter bias_;
};

/// g(X) = ReLU(Conv2(Dropout(ReLU(Conv1(X))))) + Res(X)
class ResidualBlock {
public:
    ResidualBlock() = default;
    ResidualBlock(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation,
                  double dropout, bool weight_norm, double init_std, std::mt19937_64& rng);

    Var forward(Graph& g, Var x, const RunContext& ctx);
    void collect(std::vector<Parameter*>& out);

    CausalConv& conv1() { return conv1_; }
    CausalConv& conv2() { return conv2_; }
    bool has_projection() const noexcept { return has_projection_; }

private:
    CausalConv conv1_;
    CausalConv conv2_;
    CausalConv projection_;
    bool has_projection_ = false;
    double dropout_ = 0.0;
};

/// phi_I followed by the residual blocks; produces features of width channels.back().
class TcnTrunk {
public:
    TcnTrunk() = default;
    TcnTrunk(std::string name, const TcnConfig& config, std::mt19937_64& rng);

    Var forward(Graph& g, Var x, const RunContext& ctx);
    void collect(std::vector<Parameter*>& out);

    const TcnConfig& config() const noexcept { return config_; }
    CausalConv& input_map() { return input_map_; }
    std::vector<ResidualBlock>& blocks() { return blocks_; }

private:
    TcnConfig config_;
    CausalConv input_map_;
    std::vector<ResidualBlock> blocks_;
};

struct TcnResult {
    Var output;
    /// Input shorter than the receptive field: every output carries padding.
    bool shorter_than_receptive_field = false;
};

/// f(X) = phi_O o g_L o ... o g_1 o phi_I (X)
class TcnNetwork {
public:
    TcnNetwork() = default;
    TcnNetwork(std::string name, const TcnConfig& config, std::mt19937_64& rng);

    /// x: [B, C_in, T] -> [B, C_out, T]
    TcnResult forward(Graph& g, Var x, const RunContext& ctx);
    void collect(std::vector<Parameter*>& out);
    std::vector<Parameter*> parameters();

    const TcnConfig& config() const noexcept { return trunk_.config(); }
    std::size_t receptive_field() const { return tcn::receptive_field(config()); }
    TcnTrunk& trunk() { return trunk_; }
    CausalConv& output_map() { return output_map_; }
    const std::string& name() const noexcept { return name_; }

private:
    std::string name_;
    TcnTrunk trunk_;
    CausalConv output_map_;
};

// Serialization.
nlohmann::json to_json(const TcnConfig& config);
TcnConfig tcn_config_from_json(const nlohmann::json& j);
nlohmann::json parameters_to_json(const std::vector<Parameter*>& params);
/// Restores values by name; throws std::runtime_error on missing names or shape mismatch.
void parameters_from_json(const nlohmann::json& j, const std::vector<Parameter*>& params);

inline constexpr int kCheckpointVersion = 1;

void save_network(const std::string& path, TcnNetwork& net);
TcnNetwork load_network(const std::string& path);

} // namespace marketgan::tcn
