// tcn.cpp

#include "marketgan/tcn.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

namespace marketgan::tcn {

void TcnConfig::validate() const {
    if (input_channels == 0 || output_channels == 0) throw std::invalid_argument("TCN channel counts must be positive");
    if (kernel_size < 1) throw std::invalid_argument("kernel_size must be >= 1");
    if (dilation_base < 1) throw std::invalid_argument("dilation_base must be >= 1");
    if (channels.empty()) throw std::invalid_argument("TCN needs at least one residual block");
    for (auto c : channels) {
        if (c == 0) throw std::invalid_argument("block widths must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout rate must lie in [0, 1)");
    if (!(init_std >= 0.0)) throw std::invalid_argument("init_std must be non-negative");
}

TcnConfig TcnConfig::uniform(std::size_t in, std::size_t hidden, std::size_t out, std::size_t kernel,
                             std::size_t dilation, std::size_t blocks, double dropout) {
    TcnConfig c;
    c.input_channels = in;
    c.channels.assign(blocks, hidden);
    c.output_channels = out;
    c.kernel_size = kernel;
    c.dilation_base = dilation;
    c.dropout = dropout;
    return c;
}

std::size_t receptive_field(std::size_t k, std::size_t D, std::size_t L) {
    if (k < 1 || D < 1 || L < 1) throw std::invalid_argument("receptive_field: k, D, L must be >= 1");
    if (D == 1) return 1 + 2 * (k - 1) * L;
    std::size_t geometric = 0;  // 1 + D + ... + D^{L-1} = (D^L - 1)/(D - 1)
    std::size_t power = 1;
    for (std::size_t l = 0; l < L; ++l) {
        geometric += power;
        power *= D;
    }
    return 1 + 2 * (k - 1) * geometric;
}

std::size_t receptive_field(const TcnConfig& config) {
    return receptive_field(config.kernel_size, config.dilation_base, config.num_blocks());
}

Tensor dilated_causal_conv(const Tensor& x, const Tensor& weights, const Tensor& bias, std::size_t dilation) {
    if (x.rank() != 2 || weights.rank() != 3 || bias.rank() != 1 || weights.dim(1) != x.dim(0) ||
        weights.dim(2) != bias.dim(0)) {
        throw ad::DimensionError("dilated_causal_conv: incompatible shapes");
    }
    if (dilation < 1) throw std::invalid_argument("dilation must be >= 1");
    for (double v : x.data()) {
        if (!std::isfinite(v)) throw std::domain_error("dilated_causal_conv: non-finite input");
    }
    Graph g;
    Var in = g.constant(x.reshaped({1, x.dim(0), x.dim(1)}));
    Var y = g.conv(in, g.constant(weights), dilation);
    const std::size_t co = weights.dim(2), T = x.dim(1);
    Var b = g.expand(g.constant(bias), {1, co, T}, {0, 2});
    return g.add(y, b).value().reshaped({co, T});
}

Var dropout(Graph& g, Var x, double rate, const RunContext& ctx) {
    if (ctx.mode != Mode::Train || rate <= 0.0 || ctx.dropout_rng == nullptr) return x;
    Tensor mask(x.shape());
    std::bernoulli_distribution keep(1.0 - rate);
    const double scale = 1.0 / (1.0 - rate);
    for (auto& m : mask.data()) m = keep(*ctx.dropout_rng) ? scale : 0.0;
    return g.apply_mask(x, std::move(mask));
}

CausalConv::CausalConv(std::string name, std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation,
                       bool weight_norm, double init_std, std::mt19937_64& rng)
    : kernel_(kernel), dilation_(dilation), weight_norm_(weight_norm) {
    Tensor v = ad::random_normal({kernel, in, out}, rng, init_std);
    if (weight_norm_) {
        Tensor mag({out});
        for (std::size_t o = 0; o < out; ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < kernel * in; ++i) s += v[i * out + o] * v[i * out + o];
            mag[o] = std::sqrt(s);
        }
        magnitude_ = Parameter(name + ".magnitude", std::move(mag));
        direction_ = Parameter(name + ".direction", std::move(v));
    } else {
        direction_ = Parameter(name + ".weight", std::move(v));
    }
    bias_ = Parameter(name + ".bias", Tensor({out}));
}

Var CausalConv::weight(Graph& g) {
    Var v = g.parameter(direction_);
    if (!weight_norm_) return v;
    const ad::Shape shape = direction_.value.shape();
    Var norm = g.sqrt(g.sum_axes(g.square(v), {0, 1}));
    Var factor = g.mul(g.parameter(magnitude_), g.reciprocal(norm));
    return g.mul(v, g.expand(factor, shape, {0, 1}));
}

Var CausalConv::forward(Graph& g, Var x) {
    Var y = g.conv(x, weight(g), dilation_);
    const ad::Shape& s = y.shape();
    return g.add(y, g.expand(g.parameter(bias_), s, {0, 2}));
}

Tensor CausalConv::effective_weight() const {
    if (!weight_norm_) return direction_.value;
    Tensor w = direction_.value;
    const std::size_t out = w.dim(2), rows = w.dim(0) * w.dim(1);
    for (std::size_t o = 0; o < out; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < rows; ++i) s += w[i * out + o] * w[i * out + o];
        const double f = s > 0.0 ? magnitude_.value[o] / std::sqrt(s) : 0.0;
        for (std::size_t i = 0; i < rows; ++i) w[i * out + o] *= f;
    }
    return w;
}

void CausalConv::set_weight(const Tensor& w) {
    if (w.shape() != direction_.value.shape()) throw ad::DimensionError("set_weight: shape mismatch");
    direction_.value = w;
    if (weight_norm_) {
        const std::size_t out = w.dim(2), rows = w.dim(0) * w.dim(1);
        for (std::size_t o = 0; o < out; ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < rows; ++i) s += w[i * out + o] * w[i * out + o];
            magnitude_.value[o] = std::sqrt(s);
        }
    }
}

void CausalConv::set_bias(double b) { bias_.value.fill(b); }

void CausalConv::collect(std::vector<Parameter*>& out) {
    out.push_back(&direction_);
    if (weight_norm_) out.push_back(&magnitude_);
    out.push_back(&bias_);
}

ResidualBlock::ResidualBlock(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
                             std::size_t dilation, double dropout, bool weight_norm, double init_std,
                             std::mt19937_64& rng)
    : conv1_(name + ".conv1", in, out, kernel, dilation, weight_norm, init_std, rng),
      conv2_(name + ".conv2", out, out, kernel, dilation, weight_norm, init_std, rng),
      has_projection_(in != out),
      dropout_(dropout) {
    if (has_projection_) projection_ = CausalConv(name + ".residual", in, out, 1, 1, false, init_std, rng);
}

Var ResidualBlock::forward(Graph& g, Var x, const RunContext& ctx) {
    Var h = g.relu(conv1_.forward(g, x));
    h = dropout(g, h, dropout_, ctx);
    h = g.relu(conv2_.forward(g, h));
    Var skip = has_projection_ ? projection_.forward(g, x) : x;
    return g.add(h, skip);
}

void ResidualBlock::collect(std::vector<Parameter*>& out) {
    conv1_.collect(out);
    conv2_.collect(out);
    if (has_projection_) projection_.collect(out);
}

TcnTrunk::TcnTrunk(std::string name, const TcnConfig& config, std::mt19937_64& rng) : config_(config) {
    config_.validate();
    const std::size_t c0 = config_.channels.front();
    input_map_ = CausalConv(name + ".input", config_.input_channels, c0, 1, 1, false, config_.init_std, rng);
    std::size_t in = c0;
    std::size_t dilation = 1;
    for (std::size_t l = 0; l < config_.num_blocks(); ++l) {
        const std::size_t out = config_.channels[l];
        blocks_.emplace_back(name + ".block" + std::to_string(l), in, out, config_.kernel_size, dilation,
                             config_.dropout, config_.weight_norm, config_.init_std, rng);
        in = out;
        dilation *= config_.dilation_base;
    }
}

Var TcnTrunk::forward(Graph& g, Var x, const RunContext& ctx) {
    const ad::Shape& s = x.shape();
    if (s.size() != 3 || s[1] != config_.input_channels) {
        throw ad::DimensionError("TCN expects [B, " + std::to_string(config_.input_channels) + ", T], got " +
                                 ad::shape_string(s));
    }
    Var h = input_map_.forward(g, x);
    for (auto& block : blocks_) h = block.forward(g, h, ctx);
    return h;
}

void TcnTrunk::collect(std::vector<Parameter*>& out) {
    input_map_.collect(out);
    for (auto& b : blocks_) b.collect(out);
}

TcnNetwork::TcnNetwork(std::string name, const TcnConfig& config, std::mt19937_64& rng)
    : name_(name),
      trunk_(name, config, rng),
      output_map_(name + ".output", config.channels.back(), config.output_channels, 1, 1, false, config.init_std,
                  rng) {}

TcnResult TcnNetwork::forward(Graph& g, Var x, const RunContext& ctx) {
    TcnResult r;
    r.output = output_map_.forward(g, trunk_.forward(g, x, ctx));
    r.shorter_than_receptive_field = x.shape()[2] < receptive_field();
    return r;
}

void TcnNetwork::collect(std::vector<Parameter*>& out) {
    trunk_.collect(out);
    output_map_.collect(out);
}

std::vector<Parameter*> TcnNetwork::parameters() {
    std::vector<Parameter*> out;
    collect(out);
    return out;
}

nlohmann::json to_json(const TcnConfig& c) {
    return {{"input_channels", c.input_channels}, {"channels", c.channels},     {"output_channels", c.output_channels},
            {"kernel_size", c.kernel_size},       {"dilation_base", c.dilation_base}, {"dropout", c.dropout},
            {"init_std", c.init_std},             {"weight_norm", c.weight_norm}};
}

TcnConfig tcn_config_from_json(const nlohmann::json& j) {
    TcnConfig c;
    c.input_channels = j.at("input_channels").get<std::size_t>();
    c.channels = j.at("channels").get<std::vector<std::size_t>>();
    c.output_channels = j.at("output_channels").get<std::size_t>();
    c.kernel_size = j.at("kernel_size").get<std::size_t>();
    c.dilation_base = j.at("dilation_base").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.init_std = j.at("init_std").get<double>();
    c.weight_norm = j.at("weight_norm").get<bool>();
    c.validate();
    return c;
}

nlohmann::json parameters_to_json(const std::vector<Parameter*>& params) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto* p : params) {
        out.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"data", p->value.storage()}});
    }
    return out;
}

void parameters_from_json(const nlohmann::json& j, const std::vector<Parameter*>& params) {
    std::map<std::string, const nlohmann::json*> by_name;
    for (const auto& e : j) by_name[e.at("name").get<std::string>()] = &e;
    for (auto* p : params) {
        auto it = by_name.find(p->name);
        if (it == by_name.end()) throw std::runtime_error("checkpoint is missing parameter " + p->name);
        const auto shape = it->second->at("shape").get<ad::Shape>();
        if (shape != p->value.shape()) {
            throw std::runtime_error("checkpoint shape mismatch for " + p->name + ": " + ad::shape_string(shape) +
                                     " vs " + ad::shape_string(p->value.shape()));
        }
        p->value = Tensor(shape, it->second->at("data").get<std::vector<double>>());
        p->zero_grad();
    }
}

void save_network(const std::string& path, TcnNetwork& net) {
    nlohmann::json j = {{"format", "marketgan.tcn"},
                        {"version", kCheckpointVersion},
                        {"name", net.name()},
                        {"architecture", to_json(net.config())},
                        {"parameters", parameters_to_json(net.parameters())}};
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << j.dump() << '\n';
}

TcnNetwork load_network(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    const auto j = nlohmann::json::parse(is);
    if (j.value("format", "") != "marketgan.tcn") throw std::runtime_error(path + " is not a TCN checkpoint");
    if (j.value("version", 0) != kCheckpointVersion) throw std::runtime_error(path + ": unsupported checkpoint version");
    std::mt19937_64 rng(0);
    TcnNetwork net(j.value("name", "tcn"), tcn_config_from_json(j.at("architecture")), rng);
    parameters_from_json(j.at("parameters"), net.parameters());
    return net;
}

} // namespace marketgan::tcn
