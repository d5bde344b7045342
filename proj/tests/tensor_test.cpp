#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "dsrpgo/errors.hpp"
#include "dsrpgo/tensor.hpp"

using namespace dsrpgo;

namespace {

Tensor vec(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
}

}  // namespace

TEST(Primitive, SoftmaxOfUniformInputIsUniform) {
    const Tensor y = softmax(vec({1, 1, 1}));
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Primitive, SigmoidAndSiluAtZero) {
    EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
    EXPECT_DOUBLE_EQ(silu(Tensor::scalar(0.0)).item(), 0.0);
}

TEST(Primitive, CausalConvUsesLeftZeroPadding) {
    const Tensor x({3, 1}, {1, 0, 0});
    const Tensor k({1, 2}, {1, 0.5});
    const Tensor y = causal_conv1d(x, k);
    ASSERT_EQ(y.shape(), (Shape{3, 1}));
    EXPECT_DOUBLE_EQ(y.data()[0], 1.0);
    EXPECT_DOUBLE_EQ(y.data()[1], 0.5);
    EXPECT_DOUBLE_EQ(y.data()[2], 0.0);
}

TEST(Primitive, ShapeMismatchNamesOpAndDimensions) {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("3 vs 4"), std::string::npos);
    }
    EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
    EXPECT_THROW(concat({Tensor::zeros({2, 3}), Tensor::zeros({3, 3})}, 1), ShapeError);
    EXPECT_THROW(slice(Tensor::zeros({2, 3}), 1, 2, 5), ShapeError);
    EXPECT_THROW(reshape(Tensor::zeros({2, 3}), {4}), ShapeError);
}

TEST(Primitive, DomainViolationsThrowInsteadOfNaN) {
    EXPECT_THROW(log(vec({1.0, 0.0})), DomainError);
    EXPECT_THROW(log(vec({-1.0})), DomainError);
    EXPECT_THROW(exp(vec({1000.0})), DomainError);
    EXPECT_THROW(div(vec({1.0}), vec({0.0})), DomainError);
}

TEST(Primitive, BroadcastAddReducesGradientOverBroadcastAxes) {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor b({3}, {10, 20, 30}, true);
    const Tensor y = add(x, b);
    EXPECT_DOUBLE_EQ(y.data()[4], 25.0);
    backward(sum(y));
    for (double g : b.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Primitive, ReverseIsAnExactInvolution) {
    Rng rng(3);
    const Tensor x = Tensor::normal({4, 5, 3}, 1.0, rng);
    for (int axis = 0; axis < 3; ++axis) {
        const Tensor back = reverse(reverse(x, axis), axis);
        ASSERT_EQ(std::memcmp(back.data().data(), x.data().data(), x.numel() * sizeof(double)), 0);
    }
}

TEST(Primitive, DropoutIdentityCases) {
    Rng rng(5);
    const Tensor x = Tensor::normal({10, 10}, 1.0, rng);
    const Tensor a = dropout(x, 0.0, rng, true);
    const Tensor b = dropout(x, 0.7, rng, false);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        EXPECT_EQ(a.data()[i], x.data()[i]);
        EXPECT_EQ(b.data()[i], x.data()[i]);
    }
}

TEST(Primitive, DropoutScalesKeptEntries) {
    Rng rng(9);
    const Tensor x = Tensor::full({2000}, 1.0);
    const Tensor y = dropout(x, 0.25, rng, true);
    std::size_t kept = 0;
    for (double v : y.data()) {
        if (v != 0.0) {
            EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
            ++kept;
        }
    }
    EXPECT_NEAR(static_cast<double>(kept) / 2000.0, 0.75, 0.04);
}

TEST(Primitive, DispatchMatchesDirectCalls) {
    Rng rng(2);
    const Tensor a = Tensor::normal({3, 4}, 1.0, rng);
    const Tensor b = Tensor::normal({4, 2}, 1.0, rng);
    const Tensor direct = matmul(a, b);
    const Tensor viaKind = primitive_forward(OpKind::matmul, {a, b});
    for (std::size_t i = 0; i < direct.numel(); ++i) EXPECT_EQ(direct.data()[i], viaKind.data()[i]);
    OpAttrs attrs;
    attrs.axis = 0;
    const Tensor s = primitive_forward(OpKind::softmax, {a}, attrs);
    EXPECT_NEAR(s.data()[0] + s.data()[4] + s.data()[8], 1.0, 1e-12);
}

// --- backward ---------------------------------------------------------------

TEST(Backward, SquareOfThreeGivesSix) {
    Tensor x = vec({3.0}).set_requires_grad(true);
    backward(sum(mul(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SigmoidSlopeAtZero) {
    Tensor x = Tensor::scalar(0.0, true);
    backward(sigmoid(x));
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Backward, NonScalarLossThrows) {
    Tensor x = vec({1.0, 2.0}).set_requires_grad(true);
    EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Backward, SharedLeafGradientsAccumulate) {
    Tensor x = vec({2.0}).set_requires_grad(true);
    // x used by three consumers: x*x + 3x
    const Tensor y = add(mul(x, x), scale(x, 3.0));
    backward(sum(y));
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
    // a second pass accumulates on the leaf
    backward(sum(scale(x, 1.0)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Backward, GraphIsTopologicalWithEachNodeOnce) {
    Tensor x = vec({1.0, 2.0}).set_requires_grad(true);
    const Tensor h = sigmoid(x);
    const Tensor loss = sum(add(h, mul(h, h)));  // h reached along two paths
    const Graph g = Graph::trace(loss);
    EXPECT_EQ(g.size(), 5u);  // x, h, h*h, h + h*h, sum
    const auto& nodes = g.nodes();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        for (const auto& in : nodes[i]->inputs) {
            const auto pos = std::find(nodes.begin(), nodes.end(), in.get()) - nodes.begin();
            EXPECT_LT(static_cast<std::size_t>(pos), i);
        }
    }
    EXPECT_TRUE(g.contains(x));
    EXPECT_TRUE(g.contains(loss));
}

TEST(Backward, NoGradGuardSuppressesRecording) {
    Tensor x = vec({1.0}).set_requires_grad(true);
    NoGradGuard guard;
    const Tensor y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.is_leaf());
}

// --- gradient checks --------------------------------------------------------

TEST(GradCheck, SoftmaxOfMatmul) {
    Rng rng(11);
    const Tensor a = Tensor::normal({4, 4}, 1.0, rng);
    const Tensor b = Tensor::normal({4, 4}, 1.0, rng);
    const auto report = grad_check([](const std::vector<Tensor>& in) { return softmax(matmul(in[0], in[1])); }, {a, b});
    EXPECT_TRUE(report.passed);
    EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(GradCheck, IdentityIsExact) {
    Rng rng(12);
    const Tensor a = Tensor::normal({5}, 1.0, rng);
    const auto report = grad_check([](const std::vector<Tensor>& in) { return in[0]; }, {a});
    EXPECT_LT(report.max_rel_error, 1e-9);
}

TEST(GradCheck, LayerNormVector) {
    Rng rng(13);
    const Tensor a = Tensor::normal({8}, 1.0, rng);
    const auto report = grad_check([](const std::vector<Tensor>& in) { return layer_norm(in[0]); }, {a});
    EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(GradCheck, DetectsAWrongGradient) {
    // x^2 with a backward that reports 3x instead of 2x
    auto wrong_square = [](const std::vector<Tensor>& in) {
        const auto xd = in[0].data();
        std::vector<double> out(xd.size());
        for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * xd[i];
        return make_result("wrong_square", in[0].shape(), std::move(out), {in[0]}, [](detail::Node& self) {
            auto& g = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 3.0 * self.inputs[0]->data[i];
        });
    };
    const auto report = grad_check(wrong_square, {vec({0.5, -1.5, 2.0})});
    EXPECT_FALSE(report.passed);
}

// Every differentiable primitive against central differences over 100 seeds.
TEST(GradCheckProperty, EveryPrimitiveOverManySeeds) {
    struct Case {
        std::string name;
        std::function<std::vector<Tensor>(Rng&)> inputs;
        TensorFn f;
    };
    auto normal = [](Shape s) { return [s](Rng& r) { return std::vector<Tensor>{Tensor::normal(s, 1.0, r)}; }; };
    auto normal2 = [](Shape s1, Shape s2) {
        return [s1, s2](Rng& r) { return std::vector<Tensor>{Tensor::normal(s1, 1.0, r), Tensor::normal(s2, 1.0, r)}; };
    };
    const std::vector<Case> cases = {
        {"matmul", normal2({3, 4}, {4, 2}), [](auto& in) { return matmul(in[0], in[1]); }},
        {"batched_matmul", normal2({2, 3, 4}, {2, 4, 2}), [](auto& in) { return matmul(in[0], in[1]); }},
        {"add", normal2({3, 4}, {4}), [](auto& in) { return add(in[0], in[1]); }},
        {"sub", normal2({3, 1}, {3, 4}), [](auto& in) { return sub(in[0], in[1]); }},
        {"hadamard", normal2({2, 3}, {2, 3}), [](auto& in) { return mul(in[0], in[1]); }},
        {"div",
         [](Rng& r) {
             auto b = Tensor::uniform({2, 3}, 0.5, 2.0, r);
             return std::vector<Tensor>{Tensor::normal({2, 3}, 1.0, r), b};
         },
         [](auto& in) { return div(in[0], in[1]); }},
        {"scalar_mul", normal({5}), [](auto& in) { return scale(in[0], -1.7); }},
        {"exp", normal({5}), [](auto& in) { return exp(in[0]); }},
        {"log", [](Rng& r) { return std::vector<Tensor>{Tensor::uniform({5}, 0.2, 3.0, r)}; },
         [](auto& in) { return log(in[0]); }},
        {"sigmoid", normal({6}), [](auto& in) { return sigmoid(in[0]); }},
        {"silu", normal({6}), [](auto& in) { return silu(in[0]); }},
        {"softplus", normal({6}), [](auto& in) { return softplus(in[0]); }},
        {"softmax", normal({3, 4}), [](auto& in) { return softmax(in[0], 0); }},
        {"layer_norm", normal({3, 5}), [](auto& in) { return layer_norm(in[0], -1); }},
        {"causal_conv1d", normal2({2, 5, 3}, {3, 4}), [](auto& in) { return causal_conv1d(in[0], in[1]); }},
        {"concat", normal2({2, 3}, {2, 2}), [](auto& in) { return concat({in[0], in[1]}, 1); }},
        {"slice", normal({3, 6}), [](auto& in) { return slice(in[0], 1, 2, 5); }},
        {"reshape", normal({3, 4}), [](auto& in) { return reshape(in[0], {2, 6}); }},
        {"transpose", normal({2, 3, 4}), [](auto& in) { return permute(in[0], {2, 0, 1}); }},
        {"reverse", normal({4, 3}), [](auto& in) { return reverse(in[0], 0); }},
        {"sum", normal({3, 4}), [](auto& in) { return sum(in[0], 1); }},
        {"mean", normal({3, 4}), [](auto& in) { return mean(in[0], 0, true); }},
    };
    for (const auto& c : cases) {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng rng(seed);
            GradCheckOptions opts;
            opts.seed = seed;
            const auto report = grad_check(c.f, c.inputs(rng), opts);
            worst = std::max(worst, report.max_rel_error);
        }
        EXPECT_LT(worst, 1e-4) << c.name;
    }
}

// --- invariants -------------------------------------------------------------

TEST(Invariant, SoftmaxRowsAreDistributions) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const Tensor x = Tensor::normal({4, 7}, 5.0, rng);
        const Tensor y = softmax(x, -1);
        for (std::size_t r = 0; r < 4; ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                const double v = y.data()[r * 7 + c];
                EXPECT_GE(v, 0.0);
                total += v;
            }
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
}

TEST(Invariant, LayerNormStandardizes) {
    // eps sits inside the square root, so the unit-variance bar is met once the
    // input variance dominates eps (here std 10, variance ~100).
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const Tensor x = Tensor::normal({3, 16}, 10.0, rng);
        const Tensor y = layer_norm(x, -1, 1e-5);
        for (std::size_t r = 0; r < 3; ++r) {
            double mu = 0.0;
            double var = 0.0;
            for (std::size_t c = 0; c < 16; ++c) mu += y.data()[r * 16 + c];
            mu /= 16.0;
            for (std::size_t c = 0; c < 16; ++c) var += std::pow(y.data()[r * 16 + c] - mu, 2);
            var /= 16.0;
            EXPECT_NEAR(mu, 0.0, 1e-9);
            EXPECT_NEAR(var, 1.0, 1e-6);
        }
    }
}

TEST(Invariant, ForwardValuesStayFinite) {
    Rng rng(21);
    const Tensor x = Tensor::normal({4, 8}, 30.0, rng);
    for (const Tensor& y : {sigmoid(x), silu(x), softplus(x), softmax(x), layer_norm(x)}) {
        for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
    }
}
