#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dsrpgo/errors.hpp"
#include "dsrpgo/rng.hpp"
#include "dsrpgo/ssm.hpp"

using namespace dsrpgo;
using namespace dsrpgo::ssm;

namespace {

// (e^z - 1)/z as a truncated power series; independent of zoh_gain.
double series_gain(double z) {
    double term = 1.0;
    double acc = 1.0;
    for (int k = 1; k < 40; ++k) {
        term *= z / (k + 1);
        acc += term;
    }
    return acc;
}

SsmParams random_stable(Rng& rng, std::size_t state) {
    SsmParams p;
    for (std::size_t i = 0; i < state; ++i) {
        p.a.push_back(-rng.uniform(0.01, 3.0));
        p.b.push_back(rng.normal());
        p.c.push_back(rng.normal());
    }
    p.d = rng.normal();
    p.delta = rng.uniform(1e-3, 1.0);
    return p;
}

std::vector<double> random_sequence(Rng& rng, std::size_t length) {
    std::vector<double> x(length);
    for (double& v : x) v = rng.normal();
    return x;
}

Discretized scalar_disc(double abar, double bbar, double cbar, double d) {
    Discretized disc;
    disc.a_bar = {abar};
    disc.b_bar = {bbar};
    disc.c_bar = {cbar};
    disc.d = d;
    return disc;
}

}  // namespace

TEST(Discretize, VanishingStateMatrixGivesEulerStep) {
    SsmParams p{{0.0}, {2.5}, {1.0}, 0.0, 1.0};
    const auto disc = discretize(p);
    EXPECT_DOUBLE_EQ(disc.a_bar[0], 1.0);
    EXPECT_DOUBLE_EQ(disc.b_bar[0], 2.5);
    p.a = {-1e-9};
    EXPECT_NEAR(discretize(p).b_bar[0], 2.5 * series_gain(-1e-9), 1e-15);
}

TEST(Discretize, ScalarExampleAgainstSeries) {
    SsmParams p{{-2.0}, {1.0}, {0.7}, 0.0, 0.5};
    const auto disc = discretize(p);
    EXPECT_NEAR(disc.a_bar[0], 0.367879, 1e-6);
    EXPECT_NEAR(disc.b_bar[0], 0.316060, 1e-6);
    EXPECT_NEAR(disc.b_bar[0], series_gain(-1.0) * 0.5, 1e-12);
    EXPECT_DOUBLE_EQ(disc.c_bar[0], 0.7);
}

TEST(Discretize, ExactForScalarAAcrossRange) {
    Rng rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const double a = -rng.uniform(0.0, 5.0);
        const double delta = rng.uniform(1e-4, 2.0);
        const double b = rng.normal();
        SsmParams p{{a}, {b}, {1.0}, 0.0, delta};
        const auto disc = discretize(p);
        EXPECT_NEAR(disc.a_bar[0], std::exp(delta * a), 1e-12);
        const double expected = a == 0.0 ? delta * b : (std::exp(delta * a) - 1.0) / a * b;
        EXPECT_NEAR(disc.b_bar[0], expected, 1e-12);
    }
}

TEST(Discretize, RejectsNonPositiveTimescale) {
    SsmParams p{{-1.0}, {1.0}, {1.0}, 0.0, 0.0};
    EXPECT_THROW(discretize(p), ValidationError);
    p.delta = -0.1;
    EXPECT_THROW(discretize(p), ValidationError);
}

TEST(ZohGain, DerivativeMatchesFiniteDifference) {
    for (double z : {-3.0, -0.5, -1e-2, -5e-4, 0.0, 2e-4, 0.3}) {
        const double h = 1e-5;
        const double fd = (series_gain(z + h) - series_gain(z - h)) / (2 * h);
        EXPECT_NEAR(zoh_gain_derivative(z), fd, 1e-8) << z;
        EXPECT_NEAR(zoh_gain(z), series_gain(z), 1e-12) << z;
    }
}

TEST(ScanRecurrent, HandExample) {
    const std::vector<double> x{1.0, 1.0};
    const auto disc = scalar_disc(0.5, 1.0, 1.0, 0.0);
    ScanState state;
    EXPECT_DOUBLE_EQ(scan_step(state, x[0], disc), 1.0);
    EXPECT_DOUBLE_EQ(state.h[0], 1.0);
    EXPECT_DOUBLE_EQ(scan_step(state, x[1], disc), 1.5);
    EXPECT_DOUBLE_EQ(state.h[0], 1.5);
    EXPECT_EQ(state.t, 2u);
    EXPECT_EQ(scan_recurrent(x, disc), (std::vector<double>{1.0, 1.5}));
}

TEST(ScanRecurrent, PureSkipAndZeroInput) {
    const std::vector<double> x{0.3, -1.2, 4.0};
    EXPECT_EQ(scan_recurrent(x, scalar_disc(0.9, 0.4, 0.0, 1.0)), x);
    const std::vector<double> zeros(5, 0.0);
    EXPECT_EQ(scan_recurrent(zeros, scalar_disc(0.9, 0.4, 2.0, 1.0)), zeros);
}

TEST(ScanConvolutional, HandExample) {
    const auto disc = scalar_disc(0.5, 1.0, 1.0, 0.0);
    EXPECT_EQ(convolution_kernel(disc, 3), (std::vector<double>{1.0, 0.5, 0.25}));
    EXPECT_EQ(scan_convolutional(std::vector<double>{1.0, 0.0}, disc), (std::vector<double>{1.0, 0.5}));
    const std::vector<double> x{0.5, 2.0, -1.0};
    EXPECT_EQ(scan_convolutional(x, scalar_disc(0.5, 1.0, 0.0, 1.5)), (std::vector<double>{0.75, 3.0, -1.5}));
}

TEST(ScanProperty, RecurrenceConvolutionDuality) {
    Rng rng(42);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto p = random_stable(rng, 1 + rng.below(8));
        const auto x = random_sequence(rng, 1 + rng.below(64));
        const auto yr = scan_recurrent(x, p);
        const auto yc = scan_convolutional(x, p);
        ASSERT_EQ(yr.size(), x.size());
        for (std::size_t t = 0; t < x.size(); ++t) worst = std::max(worst, std::abs(yr[t] - yc[t]));
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(ScanProperty, StateStaysWithinGeometricBound) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = random_stable(rng, 4);
        const auto disc = discretize(p);
        double bnorm = 0.0;
        double amax = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            bnorm += disc.b_bar[i] * disc.b_bar[i];
            amax = std::max(amax, std::abs(disc.a_bar[i]));
        }
        const double bound = std::sqrt(bnorm) * 1.0 / (1.0 - amax);
        ScanState state;
        for (int t = 0; t < 10000; ++t) {
            const double y = scan_step(state, rng.uniform(-1.0, 1.0), disc);
            ASSERT_TRUE(std::isfinite(y));
            double hn = 0.0;
            for (double h : state.h) hn += h * h;
            ASSERT_LE(std::sqrt(hn), bound * (1.0 + 1e-12));
        }
    }
}

TEST(ScanProperty, LinearInInput) {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const auto p = random_stable(rng, 1 + rng.below(6));
        const std::size_t len = 1 + rng.below(40);
        const auto x = random_sequence(rng, len);
        const auto z = random_sequence(rng, len);
        const double alpha = rng.uniform(-3.0, 3.0);
        std::vector<double> ax(len);
        std::vector<double> xz(len);
        for (std::size_t t = 0; t < len; ++t) {
            ax[t] = alpha * x[t];
            xz[t] = x[t] + z[t];
        }
        const auto yx = scan_recurrent(x, p);
        const auto yz = scan_recurrent(z, p);
        const auto yax = scan_recurrent(ax, p);
        const auto yxz = scan_recurrent(xz, p);
        for (std::size_t t = 0; t < len; ++t) {
            EXPECT_NEAR(yax[t], alpha * yx[t], 1e-9);
            EXPECT_NEAR(yxz[t], yx[t] + yz[t], 1e-9);
        }
    }
}

// --- selective scan ---------------------------------------------------------

TEST(SelectiveScan, SingleTokenMatchesHandStep) {
    const Tensor u({1, 1, 1}, {0.8});
    const Tensor delta({1, 1, 1}, {0.5});
    const Tensor a({1, 2}, {-2.0, -0.5});
    const Tensor b({1, 1, 2}, {1.0, 0.3});
    const Tensor c({1, 1, 2}, {0.4, -1.1});
    const Tensor d({1}, {0.25});
    const Tensor y = selective_scan(u, delta, a, b, c, d);
    double expected = 0.25 * 0.8;
    const double av[] = {-2.0, -0.5};
    const double bv[] = {1.0, 0.3};
    const double cv[] = {0.4, -1.1};
    for (int s = 0; s < 2; ++s) {
        const double bbar = (std::exp(0.5 * av[s]) - 1.0) / av[s] * bv[s];
        expected += cv[s] * bbar * 0.8;
    }
    EXPECT_NEAR(y.item(), expected, 1e-14);
}

TEST(SelectiveScan, ConstantProjectionsReduceToRecurrentScan) {
    Rng rng(4);
    const std::size_t L = 9;
    const std::size_t S = 3;
    const auto p = random_stable(rng, S);
    const auto x = random_sequence(rng, L);
    std::vector<double> bvals;
    std::vector<double> cvals;
    for (std::size_t t = 0; t < L; ++t) {
        bvals.insert(bvals.end(), p.b.begin(), p.b.end());
        cvals.insert(cvals.end(), p.c.begin(), p.c.end());
    }
    const Tensor y = selective_scan(Tensor({1, L, 1}, x), Tensor::full({1, L, 1}, p.delta), Tensor({1, S}, p.a),
                                    Tensor({1, L, S}, bvals), Tensor({1, L, S}, cvals), Tensor({1}, {p.d}));
    const auto expected = scan_recurrent(x, p);
    for (std::size_t t = 0; t < L; ++t) EXPECT_NEAR(y.data()[t], expected[t], 1e-12);
}

TEST(SelectiveScan, GradientMatchesFiniteDifferences) {
    Rng rng(5);
    const std::size_t L = 4;
    const std::size_t C = 2;
    const std::size_t S = 4;
    const std::vector<Tensor> inputs = {
        Tensor::normal({1, L, C}, 1.0, rng),
        Tensor::uniform({1, L, C}, 0.1, 1.0, rng),
        Tensor::uniform({C, S}, -2.0, -0.2, rng),
        Tensor::normal({1, L, S}, 1.0, rng),
        Tensor::normal({1, L, S}, 1.0, rng),
        Tensor::normal({C}, 1.0, rng),
    };
    const auto report = grad_check(
        [](const std::vector<Tensor>& in) { return selective_scan(in[0], in[1], in[2], in[3], in[4], in[5]); },
        inputs);
    EXPECT_LT(report.max_rel_error, 1e-4);
    for (const auto& e : report.entries) EXPECT_TRUE(e.passed) << "input " << e.input;
}

TEST(SelectiveScan, GradientPropertyOverSeeds) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Rng rng(seed);
        const std::size_t n = 1 + rng.below(2);
        const std::size_t L = 1 + rng.below(6);
        const std::size_t C = 1 + rng.below(3);
        const std::size_t S = 1 + rng.below(4);
        const std::vector<Tensor> inputs = {
            Tensor::normal({n, L, C}, 1.0, rng),          Tensor::uniform({n, L, C}, 0.05, 1.5, rng),
            Tensor::uniform({C, S}, -3.0, -0.1, rng),     Tensor::normal({n, L, S}, 1.0, rng),
            Tensor::normal({n, L, S}, 1.0, rng),          Tensor::normal({C}, 1.0, rng),
        };
        GradCheckOptions opts;
        opts.seed = seed;
        const auto report = grad_check(
            [](const std::vector<Tensor>& in) { return selective_scan(in[0], in[1], in[2], in[3], in[4], in[5]); },
            inputs, opts);
        EXPECT_LT(report.max_rel_error, 1e-4) << "seed " << seed;
    }
}

TEST(SelectiveScan, RejectsNonPositiveTimescale) {
    EXPECT_THROW(selective_scan(Tensor::zeros({1, 2, 1}), Tensor::zeros({1, 2, 1}), Tensor::full({1, 1}, -1.0),
                                Tensor::zeros({1, 2, 1}), Tensor::zeros({1, 2, 1}), Tensor::zeros({1})),
                 DomainError);
}

TEST(SelectiveSsmModule, InitializationFollowsContract) {
    Rng rng(6);
    SelectiveSsm m(5, 4, rng);
    ASSERT_EQ(m.a_log.shape(), (Shape{5, 4}));
    for (std::size_t ch = 0; ch < 5; ++ch) {
        for (std::size_t s = 0; s < 4; ++s) {
            EXPECT_NEAR(-std::exp(m.a_log.data()[ch * 4 + s]), -static_cast<double>(s + 1), 1e-12);
        }
    }
    // delta at zero input equals softplus(bias), inside [1e-3, 0.1]
    for (double bias : m.delta_proj.bias.data()) {
        const double delta = std::log1p(std::exp(bias));
        EXPECT_GE(delta, 1e-3 - 1e-12);
        EXPECT_LE(delta, 0.1 + 1e-12);
    }
    for (double d : m.d.data()) EXPECT_EQ(d, 1.0);
}

TEST(SelectiveSsmModule, ZeroInputGivesZeroOutput) {
    Rng rng(7);
    SelectiveSsm m(3, 4, rng);
    const Tensor y = m.forward(Tensor::zeros({2, 5, 3}));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(SelectiveSsmModule, ParameterGradientsMatchFiniteDifferences) {
    Rng rng(8);
    SelectiveSsm m(2, 4, rng);
    const Tensor x = Tensor::normal({1, 4, 2}, 1.0, rng);
    nn::ParamList params;
    m.collect("ssm", params);
    std::vector<Tensor> leaves;
    for (auto& p : params) leaves.push_back(p.tensor);
    const auto report = grad_check_closure([&]() { return m.forward(x); }, leaves);
    EXPECT_LT(report.max_rel_error, 1e-4);
}
