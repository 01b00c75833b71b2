// autodiff.hpp
//
// Define-by-run reverse-mode differentiation over dense double tensors.
//
// A Graph records every operation in insertion order, which is also a valid
// topological order. Gradients are themselves built out of graph operations,
// so a gradient can be differentiated again (needed by the critic's gradient
// penalty, where the norm of dD/dx enters a loss that is differentiated with
// respect to the critic parameters).

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace marketgan::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Dense row-major array of doubles.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value) { return Tensor({}, std::vector<double>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// Value of a single-element tensor.
    double item() const;

    void fill(double value);
    Tensor reshaped(Shape shape) const;

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

/// Trainable tensor owned by a module. The graph reads `value` when the
/// parameter is bound and adds into `grad` after a backward pass.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad = Tensor(value.shape()); }
};

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    Transpose,
    Conv,
    ConvInputGrad,
    ConvWeightGrad,
    Relu,
    SumAxes,
    Expand,
    Square,
    Sqrt,
    Reciprocal,
    Concat,
    Slice,
    Embed,
    Reshape,
};

const char* op_name(Op op);

class Graph;

/// Handle to a node of a Graph.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const;
    bool requires_grad() const;
    bool valid() const noexcept { return graph != nullptr; }
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Leaves
    Var input(Tensor value);     ///< differentiable leaf
    Var constant(Tensor value);  ///< non-differentiable leaf
    Var parameter(Parameter& p); ///< differentiable leaf bound to a module parameter

    // Primitives. Binary elementwise ops require identical shapes; use
    // expand() for broadcasting.
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var add_scalar(Var a, double c);
    Var matmul(Var a, Var b);  ///< [m,k] x [k,n]
    Var transpose(Var a);      ///< 2-D transpose
    /// Causal dilated convolution. x: [B, Cin, T], w: [k, Cin, Cout] -> [B, Cout, T].
    /// y[b,o,t] = sum_{i,c} w[i,c,o] * x[b,c,t - d*i], zero for negative times.
    Var conv(Var x, Var w, std::size_t dilation);
    Var relu(Var a);
    /// Sums over the listed axes, removing them.
    Var sum_axes(Var a, std::vector<std::size_t> axes);
    /// Inverse of sum_axes: inserts the listed axes of `shape` by replication.
    Var expand(Var a, Shape shape, std::vector<std::size_t> axes);
    Var sum(Var a);  ///< total sum, scalar
    Var mean(Var a); ///< total mean, scalar
    Var square(Var a);
    Var sqrt(Var a);        ///< derivative at 0 is taken as 0
    Var reciprocal(Var a);  ///< 1/x with 1/0 := 0
    Var concat(const std::vector<Var>& parts, std::size_t axis);
    Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
    Var reshape(Var a, Shape shape);
    /// Multiplies by a fixed (already scaled) dropout mask.
    Var apply_mask(Var a, Tensor mask);

    /// Gradients of `output` with respect to `wrt`, seeded by `seed` (a tensor
    /// of output's shape). With create_graph the returned gradients are
    /// differentiable graph nodes. Inputs that `output` does not depend on
    /// receive zeros.
    std::vector<Var> grad(Var output, const std::vector<Var>& wrt, const Tensor& seed, bool create_graph = false);
    std::vector<Var> grad(Var output, const std::vector<Var>& wrt, bool create_graph = false);

    /// Full backward pass from a scalar output: accumulates into every bound
    /// Parameter's grad, and makes leaf gradients available via grad_of().
    void backward(Var output);
    void backward(Var output, const Tensor& seed);
    /// Gradient stored for a leaf by the last backward(); zeros if none.
    Tensor grad_of(Var leaf) const;

    std::size_t size() const noexcept { return nodes_.size(); }
    Op op_of(std::size_t id) const { return nodes_.at(id).op; }

    /// Nodes created while a NoGradScope is alive never require grad.
    class NoGradScope {
    public:
        explicit NoGradScope(Graph& g) : g_(g), prev_(g.no_grad_) { g_.no_grad_ = true; }
        ~NoGradScope() { g_.no_grad_ = prev_; }
        NoGradScope(const NoGradScope&) = delete;
        NoGradScope& operator=(const NoGradScope&) = delete;

    private:
        Graph& g_;
        bool prev_;
    };

private:
    friend struct Var;

    struct Node {
        Op op = Op::Leaf;
        std::vector<std::size_t> inputs;
        Tensor value;
        bool requires_grad = false;
        Parameter* param = nullptr;
        // attributes
        std::size_t dilation = 1;
        std::size_t axis = 0;
        std::size_t begin = 0;
        std::size_t end = 0;
        double scalar = 0.0;
        std::vector<std::size_t> axes;
        Shape shape_attr;
    };

    Var push(Node node);
    const Node& node(Var v) const;
    void check_owner(Var v) const;
    std::vector<Var> input_grads(std::size_t id, Var g, const std::vector<char>& needed);
    Var conv_input_grad(Var g, Var w, std::size_t dilation, std::size_t length);
    Var conv_weight_grad(Var x, Var g, std::size_t dilation, std::size_t kernel);
    Var embed(Var a, Shape full, std::size_t axis, std::size_t begin);

    std::vector<Node> nodes_;
    std::vector<Tensor> leaf_grads_;
    bool no_grad_ = false;
};

/// A differentiable program with explicit forward/backward phases.
class Function {
public:
    using Builder = std::function<std::vector<Var>(Graph&, const std::vector<Var>&)>;

    Function(Builder builder, std::vector<Shape> input_shapes);

    std::vector<Tensor> forward(const std::vector<Tensor>& inputs);
    /// Gradients of the single output with respect to each input.
    std::vector<Tensor> backward(const Tensor& seed);

private:
    Builder builder_;
    std::vector<Shape> input_shapes_;
    std::unique_ptr<Graph> graph_;
    std::vector<Var> inputs_;
    std::vector<Var> outputs_;
};

/// Worst relative discrepancy between backward() and central differences.
/// Non-scalar outputs are reduced with fixed pseudo-random weights.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6).
double gradient_check(const Function::Builder& builder, const std::vector<Tensor>& inputs, double epsilon);

/// Same check against parameters read by `loss`. `floor` replaces 1e-6 in the
/// denominator, for losses whose rounding noise exceeds it.
double gradient_check_parameters(const std::function<Var(Graph&)>& loss, const std::vector<Parameter*>& params,
                                 double epsilon, double floor = 1e-6);

Tensor random_normal(Shape shape, std::mt19937_64& rng, double stddev = 1.0);

} // namespace marketgan::ad
