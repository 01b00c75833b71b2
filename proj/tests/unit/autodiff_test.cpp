#include "marketgan/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace marketgan::ad {
namespace {

Tensor vec(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
}

TEST(Forward, IdentityAffineAndSumOfSquares) {
    Function identity([](Graph&, const std::vector<Var>& in) { return std::vector<Var>{in[0]}; }, {{3}});
    EXPECT_EQ(identity.forward({vec({1, 2, 3})})[0], vec({1, 2, 3}));

    Function affine([](Graph& g, const std::vector<Var>& in) { return std::vector<Var>{g.add_scalar(g.scale(in[0], 2.0), 1.0)}; },
                    {{1}});
    EXPECT_EQ(affine.forward({vec({0})})[0][0], 1.0);

    Function sumsq([](Graph& g, const std::vector<Var>& in) { return std::vector<Var>{g.sum(g.square(in[0]))}; }, {{2}});
    EXPECT_EQ(sumsq.forward({vec({1, 2})})[0].item(), 5.0);
}

TEST(Forward, ShapeMismatchIsDimensionError) {
    Function f([](Graph&, const std::vector<Var>& in) { return std::vector<Var>{in[0]}; }, {{3}});
    EXPECT_THROW(f.forward({vec({1, 2})}), DimensionError);
    Graph g;
    EXPECT_THROW(g.add(g.input(vec({1, 2})), g.input(vec({1, 2, 3}))), DimensionError);
}

TEST(Backward, AnalyticCases) {
    Function sumsq([](Graph& g, const std::vector<Var>& in) { return std::vector<Var>{g.sum(g.square(in[0]))}; }, {{2}});
    sumsq.forward({vec({1, 2})});
    EXPECT_EQ(sumsq.backward(Tensor::scalar(1.0))[0], vec({2, 4}));

    Function constant([](Graph& g, const std::vector<Var>&) { return std::vector<Var>{g.constant(Tensor::scalar(3.0))}; },
                      {{2}});
    constant.forward({vec({1, 2})});
    EXPECT_EQ(constant.backward(Tensor::scalar(1.0))[0], vec({0, 0}));

    Function relu([](Graph& g, const std::vector<Var>& in) { return std::vector<Var>{g.relu(in[0])}; }, {{2}});
    relu.forward({vec({-1, 2})});
    EXPECT_EQ(relu.backward(vec({1, 1}))[0], vec({0, 1}));
}

TEST(Backward, BeforeForwardIsStateError) {
    Function f([](Graph&, const std::vector<Var>& in) { return std::vector<Var>{in[0]}; }, {{1}});
    EXPECT_THROW(f.backward(vec({1})), StateError);
}

TEST(InputGradientNorm, HandCases) {
    // D(x) = x on a scalar input: gradient 1, penalty 0.
    {
        Graph g;
        Var x = g.input(vec({0.7}));
        Var d = g.sum(x);
        auto gx = g.grad(d, {x}, true);
        Var norm = g.sqrt(g.sum(g.square(gx[0])));
        EXPECT_DOUBLE_EQ(norm.value().item(), 1.0);
    }
    // D(x) = sum(x) on R^4: norm 2, penalty lambda * (2 - 1)^2.
    {
        Graph g;
        Var x = g.input(vec({0.1, -0.3, 2.0, 5.0}));
        auto gx = g.grad(g.sum(x), {x}, true);
        Var norm = g.sqrt(g.sum(g.square(gx[0])));
        EXPECT_DOUBLE_EQ(norm.value().item(), 2.0);
        const double lambda = 10.0;
        Var penalty = g.scale(g.square(g.add_scalar(norm, -1.0)), lambda);
        EXPECT_DOUBLE_EQ(penalty.value().item(), lambda);
    }
    // D(x) = 0: norm 0, penalty lambda.
    {
        Graph g;
        Var x = g.input(vec({1.0, 2.0}));
        Var d = g.sum(g.scale(x, 0.0));
        auto gx = g.grad(d, {x}, true);
        Var norm = g.sqrt(g.sum(g.square(gx[0])));
        EXPECT_EQ(norm.value().item(), 0.0);
        Var penalty = g.scale(g.square(g.add_scalar(norm, -1.0)), 10.0);
        EXPECT_DOUBLE_EQ(penalty.value().item(), 10.0);
    }
}

TEST(DoubleBackward, GradientOfGradientNorm) {
    // f(x) = sum(w * x^2) => df/dx = 2 w x, ||.||^2 = 4 sum w^2 x^2,
    // d/dw ||.||^2 = 8 w x^2.
    Graph g;
    Var w = g.input(vec({0.5, -1.5, 2.0}));
    Var x = g.input(vec({1.0, 2.0, -0.5}));
    Var f = g.sum(g.mul(w, g.square(x)));
    auto gx = g.grad(f, {x}, true);
    Var n2 = g.sum(g.square(gx[0]));
    auto gw = g.grad(n2, {w}, false);
    const std::vector<double> xs{1.0, 2.0, -0.5}, ws{0.5, -1.5, 2.0};
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(gw[0].value()[i], 8.0 * ws[i] * xs[i] * xs[i], 1e-12);
}

// Finite-difference property check over every primitive on random inputs.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchCentralDifferences) {
    std::mt19937_64 rng(1000 + GetParam());
    auto rn = [&](Shape s) { return random_normal(std::move(s), rng); };
    auto positive = [&](Shape s) {
        Tensor t = random_normal(std::move(s), rng);
        for (auto& v : t.data()) v = 0.5 + std::abs(v);
        return t;
    };
    const double eps = 1e-6;
    const double tol = 1e-4;
    using V = std::vector<Var>;

    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.add(in[0], in[1])}; }, {rn({2, 3}), rn({2, 3})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.mul(in[0], in[1])}; }, {rn({2, 3}), rn({2, 3})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.matmul(in[0], in[1])}; }, {rn({2, 3}), rn({3, 4})}, eps),
              tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.conv(in[0], in[1], 2)}; }, {rn({2, 3, 7}), rn({3, 3, 2})},
                             eps),
              tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.relu(in[0])}; }, {rn({4, 5})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.sum_axes(in[0], {0, 2})}; }, {rn({2, 3, 4})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.mean(in[0])}; }, {rn({2, 3})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.expand(in[0], {2, 3, 4}, {0, 2})}; }, {rn({3})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.square(in[0])}; }, {rn({5})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.sqrt(in[0])}; }, {positive({5})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.reciprocal(in[0])}; }, {positive({5})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.concat({in[0], in[1]}, 1)}; }, {rn({2, 3, 2}), rn({2, 1, 2})},
                             eps),
              tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.slice(in[0], 2, 1, 4)}; }, {rn({2, 3, 5})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.reshape(in[0], {6, 2})}; }, {rn({2, 3, 2})}, eps), tol);
    EXPECT_LT(gradient_check([](Graph& g, const V& in) { return V{g.transpose(in[0])}; }, {rn({2, 3})}, eps), tol);
    Tensor mask = rn({3, 4});
    EXPECT_LT(gradient_check([&](Graph& g, const V& in) { return V{g.apply_mask(in[0], mask)}; }, {rn({3, 4})}, eps), tol);

    // Second order through the convolution family: d/dw of ||dD/dx||^2.
    EXPECT_LT(gradient_check(
                  [](Graph& g, const V& in) {
                      Var y = g.relu(g.conv(in[0], in[1], 1));
                      Var d = g.sum(g.square(g.conv(y, in[2], 2)));
                      auto gx = g.grad(d, {in[0]}, true);
                      return V{g.sum(g.square(gx[0]))};
                  },
                  {rn({2, 2, 6}), rn({2, 2, 3}), rn({2, 3, 1})}, eps),
              tol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Range(0, 5));

TEST(GradientCheck, LinearLayerMeetsTolerance) {
    std::mt19937_64 rng(7);
    const double err = gradient_check(
        [](Graph& g, const std::vector<Var>& in) { return std::vector<Var>{g.matmul(in[0], in[1])}; },
        {random_normal({3, 4}, rng), random_normal({4, 2}, rng)}, 1e-5);
    EXPECT_LT(err, 1e-6);
}

TEST(GradientCheck, DilatedConvMeetsTolerance) {
    std::mt19937_64 rng(8);
    const double err = gradient_check(
        [](Graph& g, const std::vector<Var>& in) { return std::vector<Var>{g.conv(in[0], in[1], 4)}; },
        {random_normal({2, 3, 12}, rng), random_normal({3, 3, 4}, rng)}, 1e-5);
    EXPECT_LT(err, 1e-5);
}

TEST(Properties, ForwardIsBitDeterministic) {
    std::mt19937_64 rng(3);
    Tensor x = random_normal({2, 3, 9}, rng), w = random_normal({2, 3, 4}, rng);
    auto run = [&] {
        Graph g;
        return g.relu(g.conv(g.input(x), g.input(w), 2)).value();
    };
    EXPECT_EQ(run(), run());
}

TEST(Properties, BackwardIsLinearInTheOutput) {
    std::mt19937_64 rng(4);
    Tensor x = random_normal({5}, rng);
    const double a = 0.7, b = -2.3;
    auto grad_of = [&](auto build) {
        Graph g;
        Var v = g.input(x);
        g.backward(build(g, v));
        return g.grad_of(v);
    };
    auto f = [](Graph& g, Var v) { return g.sum(g.square(v)); };
    auto h = [](Graph& g, Var v) { return g.sum(g.relu(g.mul(v, v))); };
    const Tensor gf = grad_of(f), gh = grad_of(h);
    const Tensor gc = grad_of([&](Graph& g, Var v) { return g.add(g.scale(f(g, v), a), g.scale(h(g, v), b)); });
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gh[i], 1e-12);
}

TEST(Parameters, BackwardAccumulatesIntoParameterGrad) {
    Parameter p("w", vec({1.0, -2.0}));
    for (int rep = 0; rep < 2; ++rep) {
        Graph g;
        g.backward(g.sum(g.square(g.parameter(p))));
    }
    EXPECT_EQ(p.grad, vec({4.0, -8.0}));
}

} // namespace
} // namespace marketgan::ad
