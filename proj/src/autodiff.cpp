// autodiff.cpp
//
// Forward kernels and differentiation rules. Every rule is written with graph
// operations so that the same code serves first- and second-order passes.
// Convolution, its input-gradient and its weight-gradient form a family that
// is closed under differentiation (all three are bilinear).

#include "marketgan/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

namespace marketgan::ad {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_string(shape_));
    }
}

double Tensor::item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
        throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

const char* op_name(Op op) {
    switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Conv: return "conv";
    case Op::ConvInputGrad: return "conv_input_grad";
    case Op::ConvWeightGrad: return "conv_weight_grad";
    case Op::Relu: return "relu";
    case Op::SumAxes: return "sum_axes";
    case Op::Expand: return "expand";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Reciprocal: return "reciprocal";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Embed: return "embed";
    case Op::Reshape: return "reshape";
    }
    return "?";
}

const Tensor& Var::value() const { return graph->node(*this).value; }
const Shape& Var::shape() const { return graph->node(*this).value.shape(); }
bool Var::requires_grad() const { return graph->node(*this).requires_grad; }

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

void require_rank(const Tensor& a, std::size_t rank, const char* what) {
    if (a.rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_string(a.shape()));
    }
}

// Maps every flat index of `full` onto the flat index of `full` with `axes`
// removed. Accumulation in flat order keeps summation order deterministic.
template <typename F>
void for_each_reduced(const Shape& full, const std::vector<std::size_t>& axes, F&& f) {
    const std::size_t rank = full.size();
    std::vector<char> reduced(rank, 0);
    for (auto a : axes) reduced[a] = 1;
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t d = rank; d-- > 0;) {
        if (!reduced[d]) {
            stride[d] = s;
            s *= full[d];
        }
    }
    const std::size_t n = shape_size(full);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t out = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        f(flat, out);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            out += stride[d];
            if (idx[d] < full[d]) break;
            out -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
}

Shape remove_axes(const Shape& full, const std::vector<std::size_t>& axes) {
    Shape out;
    for (std::size_t d = 0; d < full.size(); ++d) {
        if (std::find(axes.begin(), axes.end(), d) == axes.end()) out.push_back(full[d]);
    }
    return out;
}

std::vector<std::size_t> normalized_axes(std::vector<std::size_t> axes, std::size_t rank) {
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (auto a : axes) {
        if (a >= rank) throw DimensionError("axis " + std::to_string(a) + " out of range for rank " + std::to_string(rank));
    }
    return axes;
}

// Outer/inner extents around `axis` for concat/slice kernels.
std::pair<std::size_t, std::size_t> outer_inner(const Shape& shape, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
    return {outer, inner};
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Each kernel tap is a matrix product over channels: y_b[:, s:] += W_i' x_b[:, :T-s].
Tensor conv_forward(const Tensor& x, const Tensor& w, std::size_t d) {
    const std::size_t B = x.dim(0), Ci = x.dim(1), T = x.dim(2);
    const std::size_t K = w.dim(0), Co = w.dim(2);
    Tensor y({B, Co, T});
    const auto ci = static_cast<Eigen::Index>(Ci), co = static_cast<Eigen::Index>(Co), tt = static_cast<Eigen::Index>(T);
    for (std::size_t b = 0; b < B; ++b) {
        ConstMap xb(x.data().data() + b * Ci * T, ci, tt);
        MutMap yb(y.data().data() + b * Co * T, co, tt);
        for (std::size_t i = 0; i < K; ++i) {
            const auto shift = static_cast<Eigen::Index>(d * i);
            if (shift >= tt) break;
            ConstMap wi(w.data().data() + i * Ci * Co, ci, co);
            yb.rightCols(tt - shift).noalias() += wi.transpose() * xb.leftCols(tt - shift);
        }
    }
    return y;
}

// gx[b,c,s] = sum_{i,o} w[i,c,o] g[b,o,s+d*i]
Tensor conv_input_grad_forward(const Tensor& g, const Tensor& w, std::size_t d) {
    const std::size_t B = g.dim(0), Co = g.dim(1), T = g.dim(2);
    const std::size_t K = w.dim(0), Ci = w.dim(1);
    Tensor gx({B, Ci, T});
    const auto ci = static_cast<Eigen::Index>(Ci), co = static_cast<Eigen::Index>(Co), tt = static_cast<Eigen::Index>(T);
    for (std::size_t b = 0; b < B; ++b) {
        ConstMap gb(g.data().data() + b * Co * T, co, tt);
        MutMap xb(gx.data().data() + b * Ci * T, ci, tt);
        for (std::size_t i = 0; i < K; ++i) {
            const auto shift = static_cast<Eigen::Index>(d * i);
            if (shift >= tt) break;
            ConstMap wi(w.data().data() + i * Ci * Co, ci, co);
            xb.leftCols(tt - shift).noalias() += wi * gb.rightCols(tt - shift);
        }
    }
    return gx;
}

// gw[i,c,o] = sum_{b,t} g[b,o,t] x[b,c,t-d*i]
Tensor conv_weight_grad_forward(const Tensor& x, const Tensor& g, std::size_t d, std::size_t K) {
    const std::size_t B = x.dim(0), Ci = x.dim(1), T = x.dim(2);
    const std::size_t Co = g.dim(1);
    Tensor gw({K, Ci, Co});
    const auto ci = static_cast<Eigen::Index>(Ci), co = static_cast<Eigen::Index>(Co), tt = static_cast<Eigen::Index>(T);
    for (std::size_t i = 0; i < K; ++i) {
        const auto shift = static_cast<Eigen::Index>(d * i);
        if (shift >= tt) continue;
        MutMap wi(gw.data().data() + i * Ci * Co, ci, co);
        for (std::size_t b = 0; b < B; ++b) {
            ConstMap xb(x.data().data() + b * Ci * T, ci, tt);
            ConstMap gb(g.data().data() + b * Co * T, co, tt);
            wi.noalias() += xb.leftCols(tt - shift) * gb.rightCols(tt - shift).transpose();
        }
    }
    return gw;
}

} // namespace

Var Graph::push(Node node) {
    if (no_grad_) node.requires_grad = false;
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

const Graph::Node& Graph::node(Var v) const {
    check_owner(v);
    return nodes_[v.id];
}

void Graph::check_owner(Var v) const {
    if (v.graph != this || v.id >= nodes_.size()) throw StateError("variable does not belong to this graph");
}

Var Graph::input(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
}

Var Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Graph::parameter(Parameter& p) {
    Node n;
    n.value = p.value;
    n.requires_grad = true;
    n.param = &p;
    return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
    const Tensor& x = node(a).value;
    const Tensor& y = node(b).value;
    require_same(x, y, "add");
    Tensor out = x;
    auto o = out.data();
    auto ys = y.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += ys[i];
    Node n;
    n.op = Op::Add;
    n.inputs = {a.id, b.id};
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
    return push(std::move(n));
}

Var Graph::sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var Graph::mul(Var a, Var b) {
    const Tensor& x = node(a).value;
    const Tensor& y = node(b).value;
    require_same(x, y, "mul");
    Tensor out = x;
    auto o = out.data();
    auto ys = y.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= ys[i];
    Node n;
    n.op = Op::Mul;
    n.inputs = {a.id, b.id};
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
    return push(std::move(n));
}

Var Graph::scale(Var a, double c) {
    Tensor out = node(a).value;
    for (auto& v : out.data()) v *= c;
    Node n;
    n.op = Op::Scale;
    n.inputs = {a.id};
    n.scalar = c;
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::add_scalar(Var a, double c) {
    Tensor out = node(a).value;
    for (auto& v : out.data()) v += c;
    Node n;
    n.op = Op::AddScalar;
    n.inputs = {a.id};
    n.scalar = c;
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::matmul(Var a, Var b) {
    const Tensor& x = node(a).value;
    const Tensor& y = node(b).value;
    require_rank(x, 2, "matmul");
    require_rank(y, 2, "matmul");
    if (x.dim(1) != y.dim(0)) {
        throw DimensionError("matmul: inner dimensions differ " + shape_string(x.shape()) + " x " +
                             shape_string(y.shape()));
    }
    const std::size_t m = x.dim(0), k = x.dim(1), p = y.dim(1);
    Tensor out({m, p});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            const double xv = x[i * k + j];
            for (std::size_t c = 0; c < p; ++c) out[i * p + c] += xv * y[j * p + c];
        }
    }
    Node n;
    n.op = Op::MatMul;
    n.inputs = {a.id, b.id};
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
    return push(std::move(n));
}

Var Graph::transpose(Var a) {
    const Tensor& x = node(a).value;
    require_rank(x, 2, "transpose");
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    Node n;
    n.op = Op::Transpose;
    n.inputs = {a.id};
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::conv(Var x, Var w, std::size_t dilation) {
    const Tensor& xv = node(x).value;
    const Tensor& wv = node(w).value;
    require_rank(xv, 3, "conv input");
    require_rank(wv, 3, "conv weight");
    if (xv.dim(1) != wv.dim(1)) {
        throw DimensionError("conv: input channels " + std::to_string(xv.dim(1)) + " vs weight " +
                             shape_string(wv.shape()));
    }
    if (dilation == 0) throw DimensionError("conv: dilation must be positive");
    Node n;
    n.op = Op::Conv;
    n.inputs = {x.id, w.id};
    n.dilation = dilation;
    n.value = conv_forward(xv, wv, dilation);
    n.requires_grad = nodes_[x.id].requires_grad || nodes_[w.id].requires_grad;
    return push(std::move(n));
}

Var Graph::conv_input_grad(Var g, Var w, std::size_t dilation, std::size_t /*length*/) {
    const Tensor& gv = node(g).value;
    const Tensor& wv = node(w).value;
    if (gv.rank() != 3 || wv.rank() != 3 || gv.dim(1) != wv.dim(2)) {
        throw DimensionError("conv_input_grad: incompatible shapes");
    }
    Node n;
    n.op = Op::ConvInputGrad;
    n.inputs = {g.id, w.id};
    n.dilation = dilation;
    n.value = conv_input_grad_forward(gv, wv, dilation);
    n.requires_grad = nodes_[g.id].requires_grad || nodes_[w.id].requires_grad;
    return push(std::move(n));
}

Var Graph::conv_weight_grad(Var x, Var g, std::size_t dilation, std::size_t kernel) {
    const Tensor& xv = node(x).value;
    const Tensor& gv = node(g).value;
    if (xv.rank() != 3 || gv.rank() != 3 || xv.dim(0) != gv.dim(0) || xv.dim(2) != gv.dim(2)) {
        throw DimensionError("conv_weight_grad: incompatible shapes");
    }
    Node n;
    n.op = Op::ConvWeightGrad;
    n.inputs = {x.id, g.id};
    n.dilation = dilation;
    n.shape_attr = {kernel};
    n.value = conv_weight_grad_forward(xv, gv, dilation, kernel);
    n.requires_grad = nodes_[x.id].requires_grad || nodes_[g.id].requires_grad;
    return push(std::move(n));
}

Var Graph::relu(Var a) {
    Tensor out = node(a).value;
    for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
    Node n;
    n.op = Op::Relu;
    n.inputs = {a.id};
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::sum_axes(Var a, std::vector<std::size_t> axes) {
    const Tensor& x = node(a).value;
    axes = normalized_axes(std::move(axes), x.rank());
    Tensor out(remove_axes(x.shape(), axes));
    auto xs = x.data();
    auto os = out.data();
    for_each_reduced(x.shape(), axes, [&](std::size_t flat, std::size_t r) { os[r] += xs[flat]; });
    Node n;
    n.op = Op::SumAxes;
    n.inputs = {a.id};
    n.axes = std::move(axes);
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::expand(Var a, Shape shape, std::vector<std::size_t> axes) {
    const Tensor& x = node(a).value;
    axes = normalized_axes(std::move(axes), shape.size());
    if (remove_axes(shape, axes) != x.shape()) {
        throw DimensionError("expand: " + shape_string(x.shape()) + " is not " + shape_string(shape) +
                             " with the given axes removed");
    }
    Tensor out(shape);
    auto xs = x.data();
    auto os = out.data();
    for_each_reduced(shape, axes, [&](std::size_t flat, std::size_t r) { os[flat] = xs[r]; });
    Node n;
    n.op = Op::Expand;
    n.inputs = {a.id};
    n.axes = std::move(axes);
    n.shape_attr = std::move(shape);
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::sum(Var a) {
    std::vector<std::size_t> axes(node(a).value.rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    return sum_axes(a, std::move(axes));
}

Var Graph::mean(Var a) {
    const std::size_t n = node(a).value.size();
    if (n == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var Graph::square(Var a) {
    Tensor out = node(a).value;
    for (auto& v : out.data()) v *= v;
    Node n;
    n.op = Op::Square;
    n.inputs = {a.id};
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::sqrt(Var a) {
    Tensor out = node(a).value;
    for (auto& v : out.data()) {
        if (v < 0.0) throw std::domain_error("sqrt of negative value");
        v = std::sqrt(v);
    }
    Node n;
    n.op = Op::Sqrt;
    n.inputs = {a.id};
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::reciprocal(Var a) {
    Tensor out = node(a).value;
    for (auto& v : out.data()) v = v == 0.0 ? 0.0 : 1.0 / v;
    Node n;
    n.op = Op::Reciprocal;
    n.inputs = {a.id};
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const Shape& first = node(parts[0]).value.shape();
    if (axis >= first.size()) throw DimensionError("concat axis out of range");
    Shape shape = first;
    shape[axis] = 0;
    bool rg = false;
    for (auto p : parts) {
        const Shape& s = node(p).value.shape();
        if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != first[d]) {
                throw DimensionError("concat: shape mismatch " + shape_string(s) + " vs " + shape_string(first));
            }
        }
        shape[axis] += s[axis];
        rg = rg || nodes_[p.id].requires_grad;
    }
    Tensor out(shape);
    auto [outer, inner] = outer_inner(shape, axis);
    std::size_t offset = 0;
    Node n;
    for (auto p : parts) {
        const Tensor& x = nodes_[p.id].value;
        const std::size_t len = x.dim(axis);
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(x.data().data() + o * len * inner, len * inner,
                        out.data().data() + (o * shape[axis] + offset) * inner);
        }
        offset += len;
        n.inputs.push_back(p.id);
    }
    n.op = Op::Concat;
    n.axis = axis;
    n.value = std::move(out);
    n.requires_grad = rg;
    return push(std::move(n));
}

Var Graph::slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
    const Tensor& x = node(a).value;
    if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
        throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                             shape_string(x.shape()));
    }
    Shape shape = x.shape();
    shape[axis] = end - begin;
    Tensor out(shape);
    auto [outer, inner] = outer_inner(x.shape(), axis);
    const std::size_t full = x.dim(axis), len = end - begin;
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(x.data().data() + (o * full + begin) * inner, len * inner, out.data().data() + o * len * inner);
    }
    Node n;
    n.op = Op::Slice;
    n.inputs = {a.id};
    n.axis = axis;
    n.begin = begin;
    n.end = end;
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::embed(Var a, Shape full_shape, std::size_t axis, std::size_t begin) {
    const Tensor& x = node(a).value;
    const std::size_t len = x.dim(axis);
    Tensor out(full_shape);
    auto [outer, inner] = outer_inner(full_shape, axis);
    const std::size_t full = full_shape[axis];
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(x.data().data() + o * len * inner, len * inner, out.data().data() + (o * full + begin) * inner);
    }
    Node n;
    n.op = Op::Embed;
    n.inputs = {a.id};
    n.axis = axis;
    n.begin = begin;
    n.end = begin + len;
    n.shape_attr = std::move(full_shape);
    n.value = std::move(out);
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::reshape(Var a, Shape shape) {
    Node n;
    n.op = Op::Reshape;
    n.inputs = {a.id};
    n.value = node(a).value.reshaped(std::move(shape));
    n.requires_grad = nodes_[a.id].requires_grad;
    return push(std::move(n));
}

Var Graph::apply_mask(Var a, Tensor mask) { return mul(a, constant(std::move(mask))); }

std::vector<Var> Graph::input_grads(std::size_t id, Var g, const std::vector<char>& needed) {
    // Copy what is needed: pushing nodes may reallocate nodes_.
    const Op op = nodes_[id].op;
    const std::vector<std::size_t> in = nodes_[id].inputs;
    const std::size_t dilation = nodes_[id].dilation;
    const std::size_t axis = nodes_[id].axis;
    const std::size_t begin = nodes_[id].begin;
    const double scalar = nodes_[id].scalar;
    const std::vector<std::size_t> axes = nodes_[id].axes;
    const Shape shape_attr = nodes_[id].shape_attr;

    std::vector<Var> out(in.size());
    auto want = [&](std::size_t k) { return needed[in[k]] != 0; };
    auto v = [&](std::size_t k) { return Var{this, in[k]}; };
    const Var self{this, id};

    switch (op) {
    case Op::Leaf: break;
    case Op::Add:
        if (want(0)) out[0] = g;
        if (want(1)) out[1] = g;
        break;
    case Op::Mul:
        if (want(0)) out[0] = mul(g, v(1));
        if (want(1)) out[1] = mul(g, v(0));
        break;
    case Op::Scale:
        out[0] = scale(g, scalar);
        break;
    case Op::AddScalar:
        out[0] = g;
        break;
    case Op::MatMul:
        if (want(0)) out[0] = matmul(g, transpose(v(1)));
        if (want(1)) out[1] = matmul(transpose(v(0)), g);
        break;
    case Op::Transpose:
        out[0] = transpose(g);
        break;
    case Op::Conv: {
        const std::size_t kernel = nodes_[in[1]].value.dim(0);
        if (want(0)) out[0] = conv_input_grad(g, v(1), dilation, 0);
        if (want(1)) out[1] = conv_weight_grad(v(0), g, dilation, kernel);
        break;
    }
    case Op::ConvInputGrad: {
        // inputs: (upstream gradient G, weight W); output X-shaped.
        const std::size_t kernel = nodes_[in[1]].value.dim(0);
        if (want(0)) out[0] = conv(g, v(1), dilation);
        if (want(1)) out[1] = conv_weight_grad(g, v(0), dilation, kernel);
        break;
    }
    case Op::ConvWeightGrad:
        // inputs: (X, upstream gradient G); output W-shaped.
        if (want(0)) out[0] = conv_input_grad(v(1), g, dilation, 0);
        if (want(1)) out[1] = conv(v(0), g, dilation);
        break;
    case Op::Relu: {
        Tensor mask = nodes_[in[0]].value;
        for (auto& x : mask.data()) x = x > 0.0 ? 1.0 : 0.0;
        out[0] = mul(g, constant(std::move(mask)));
        break;
    }
    case Op::SumAxes:
        out[0] = expand(g, nodes_[in[0]].value.shape(), axes);
        break;
    case Op::Expand:
        out[0] = sum_axes(g, axes);
        break;
    case Op::Square:
        out[0] = mul(g, scale(v(0), 2.0));
        break;
    case Op::Sqrt:
        out[0] = mul(g, scale(reciprocal(self), 0.5));
        break;
    case Op::Reciprocal:
        out[0] = mul(g, scale(square(self), -1.0));
        break;
    case Op::Concat: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
            const std::size_t len = nodes_[in[k]].value.dim(axis);
            if (want(k)) out[k] = slice(g, axis, offset, offset + len);
            offset += len;
        }
        break;
    }
    case Op::Slice:
        out[0] = embed(g, nodes_[in[0]].value.shape(), axis, begin);
        break;
    case Op::Embed: {
        const std::size_t len = nodes_[in[0]].value.dim(axis);
        out[0] = slice(g, axis, begin, begin + len);
        break;
    }
    case Op::Reshape:
        out[0] = reshape(g, nodes_[in[0]].value.shape());
        break;
    }
    (void)shape_attr;
    return out;
}

std::vector<Var> Graph::grad(Var output, const std::vector<Var>& wrt, bool create_graph) {
    return grad(output, wrt, Tensor(node(output).value.shape(), 1.0), create_graph);
}

std::vector<Var> Graph::grad(Var output, const std::vector<Var>& wrt, const Tensor& seed, bool create_graph) {
    check_owner(output);
    if (seed.shape() != nodes_[output.id].value.shape()) {
        throw DimensionError("seed shape " + shape_string(seed.shape()) + " does not match output " +
                             shape_string(nodes_[output.id].value.shape()));
    }
    const std::size_t n = output.id + 1;

    // needed[i]: node i requires grad and lies on a path from some wrt node.
    std::vector<char> needed(n, 0);
    for (auto w : wrt) {
        check_owner(w);
        if (w.id < n && nodes_[w.id].requires_grad) needed[w.id] = 1;
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (needed[i] || !nodes_[i].requires_grad) continue;
        for (auto j : nodes_[i].inputs) {
            if (needed[j]) {
                needed[i] = 1;
                break;
            }
        }
    }

    std::optional<NoGradScope> scope;
    if (!create_graph) scope.emplace(*this);

    std::vector<std::optional<std::size_t>> grads(n);
    if (needed[output.id]) grads[output.id] = constant(seed).id;

    for (std::size_t id = n; id-- > 0;) {
        if (!grads[id] || !needed[id] || nodes_[id].op == Op::Leaf) continue;
        auto in_grads = input_grads(id, Var{this, *grads[id]}, needed);
        const std::vector<std::size_t> in = nodes_[id].inputs;
        for (std::size_t k = 0; k < in.size(); ++k) {
            if (!in_grads[k].valid() || !needed[in[k]]) continue;
            auto& slot = grads[in[k]];
            slot = slot ? add(Var{this, *slot}, in_grads[k]).id : in_grads[k].id;
        }
    }

    std::vector<Var> result;
    result.reserve(wrt.size());
    for (auto w : wrt) {
        if (w.id < n && grads[w.id]) {
            result.push_back(Var{this, *grads[w.id]});
        } else {
            result.push_back(constant(Tensor(nodes_[w.id].value.shape())));
        }
    }
    return result;
}

void Graph::backward(Var output) { backward(output, Tensor(node(output).value.shape(), 1.0)); }

void Graph::backward(Var output, const Tensor& seed) {
    check_owner(output);
    std::vector<Var> leaves;
    for (std::size_t i = 0; i <= output.id; ++i) {
        if (nodes_[i].op == Op::Leaf && nodes_[i].requires_grad) leaves.push_back(Var{this, i});
    }
    auto grads = grad(output, leaves, seed, false);
    leaf_grads_.assign(nodes_.size(), Tensor());
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        const Tensor& gv = nodes_[grads[k].id].value;
        Node& leaf = nodes_[leaves[k].id];
        if (leaf.param != nullptr) {
            Parameter& p = *leaf.param;
            if (p.grad.shape() != p.value.shape()) p.zero_grad();
            auto dst = p.grad.data();
            auto src = gv.data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
        leaf_grads_[leaves[k].id] = gv;
    }
}

Tensor Graph::grad_of(Var leaf) const {
    check_owner(leaf);
    if (leaf.id < leaf_grads_.size() && !leaf_grads_[leaf.id].empty()) return leaf_grads_[leaf.id];
    return Tensor(nodes_[leaf.id].value.shape());
}

Function::Function(Builder builder, std::vector<Shape> input_shapes)
    : builder_(std::move(builder)), input_shapes_(std::move(input_shapes)) {}

std::vector<Tensor> Function::forward(const std::vector<Tensor>& inputs) {
    if (inputs.size() != input_shapes_.size()) {
        throw DimensionError("expected " + std::to_string(input_shapes_.size()) + " inputs, got " +
                             std::to_string(inputs.size()));
    }
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].shape() != input_shapes_[i]) {
            throw DimensionError("input " + std::to_string(i) + " has shape " + shape_string(inputs[i].shape()) +
                                 ", expected " + shape_string(input_shapes_[i]));
        }
    }
    graph_ = std::make_unique<Graph>();
    inputs_.clear();
    for (const auto& t : inputs) inputs_.push_back(graph_->input(t));
    outputs_ = builder_(*graph_, inputs_);
    std::vector<Tensor> out;
    out.reserve(outputs_.size());
    for (auto v : outputs_) out.push_back(v.value());
    return out;
}

std::vector<Tensor> Function::backward(const Tensor& seed) {
    if (!graph_) throw StateError("backward called before forward");
    if (outputs_.size() != 1) throw ContractError("backward requires a single output");
    auto grads = graph_->grad(outputs_[0], inputs_, seed, false);
    std::vector<Tensor> out;
    out.reserve(grads.size());
    for (auto g : grads) out.push_back(g.value());
    return out;
}

namespace {

double relative_error(double a, double n, double floor = 1e-6) {
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    return std::abs(a - n) / denom;
}

Var reduce_to_scalar(Graph& g, Var y) {
    if (y.value().size() == 1) return g.sum(y);
    std::mt19937_64 rng(0x5eed);
    return g.sum(g.mul(y, g.constant(random_normal(y.shape(), rng))));
}

} // namespace

double gradient_check(const Function::Builder& builder, const std::vector<Tensor>& inputs, double epsilon) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
    auto evaluate = [&](const std::vector<Tensor>& xs) {
        Graph g;
        std::vector<Var> vs;
        for (const auto& x : xs) vs.push_back(g.input(x));
        auto outs = builder(g, vs);
        if (outs.empty()) throw ContractError("builder returned no outputs");
        return reduce_to_scalar(g, outs[0]).value().item();
    };

    Graph g;
    std::vector<Var> vs;
    for (const auto& x : inputs) vs.push_back(g.input(x));
    auto outs = builder(g, vs);
    if (outs.empty()) throw ContractError("builder returned no outputs");
    Var loss = reduce_to_scalar(g, outs[0]);
    auto analytic = g.grad(loss, vs, false);

    double worst = 0.0;
    std::vector<Tensor> probe = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double x0 = inputs[k][i];
            probe[k][i] = x0 + epsilon;
            const double up = evaluate(probe);
            probe[k][i] = x0 - epsilon;
            const double down = evaluate(probe);
            probe[k][i] = x0;
            const double numeric = (up - down) / (2.0 * epsilon);
            worst = std::max(worst, relative_error(analytic[k].value()[i], numeric));
        }
    }
    return worst;
}

double gradient_check_parameters(const std::function<Var(Graph&)>& loss, const std::vector<Parameter*>& params,
                                 double epsilon, double floor) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
    for (auto* p : params) p->zero_grad();
    {
        Graph g;
        Var l = loss(g);
        if (l.value().size() != 1) throw ContractError("loss must be scalar");
        g.backward(l);
    }
    double worst = 0.0;
    for (auto* p : params) {
        const Tensor analytic = p->grad;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double x0 = p->value[i];
            p->value[i] = x0 + epsilon;
            double up, down;
            {
                Graph g;
                up = loss(g).value().item();
            }
            p->value[i] = x0 - epsilon;
            {
                Graph g;
                down = loss(g).value().item();
            }
            p->value[i] = x0;
            worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * epsilon), floor));
        }
    }
    return worst;
}

Tensor random_normal(Shape shape, std::mt19937_64& rng, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

} // namespace marketgan::ad
