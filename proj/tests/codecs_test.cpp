#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dsrpgo/codecs.hpp"
#include "dsrpgo/errors.hpp"

using namespace dsrpgo;
using namespace dsrpgo::codecs;

namespace {

CodecConfig tiny() {
    CodecConfig c;
    c.latent = 4;
    c.token = 2;
    c.mamba_inner = 4;
    c.mamba_state = 2;
    c.attn_blocks = 2;
    c.attn_heads = 1;
    return c;
}

CodecConfig small() {
    CodecConfig c;
    c.latent = 16;
    c.token = 8;
    c.mamba_inner = 8;
    c.mamba_state = 4;
    c.attn_blocks = 2;
    c.attn_heads = 2;
    return c;
}

Tensor binary(Shape s, Rng& rng) {
    Tensor t = Tensor::zeros(s);
    for (auto& v : t.mutable_data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    return t;
}

std::vector<Tensor> params_of(const nn::ParamList& list) {
    std::vector<Tensor> out;
    for (const auto& p : list) out.push_back(p.tensor);
    return out;
}

double grad_norm(const Tensor& t) {
    if (!t.has_grad()) return 0.0;
    double n = 0.0;
    for (double g : t.grad()) n += g * g;
    return std::sqrt(n);
}

}  // namespace

TEST(BceLoss, MidpointOfSingleDimension) {
    EXPECT_NEAR(bce_loss(Tensor({1, 1}, {0.5}), Tensor({1, 1}, {1.0})).item(), 0.693147, 1e-6);
}

TEST(BceLoss, HandExample) {
    const double v = bce_loss(Tensor({1, 2}, {0.9, 0.2}), Tensor({1, 2}, {1.0, 0.0})).item();
    EXPECT_NEAR(v, -std::log(0.9) - std::log(0.8), 1e-12);
    EXPECT_NEAR(v, 0.328504, 1e-6);
}

TEST(BceLoss, SoftTargetAtMidpoint) {
    const double v = bce_loss(Tensor({1, 3}, {0.5, 0.5, 0.5}), Tensor({1, 3}, {0.5, 0.5, 0.5})).item();
    EXPECT_NEAR(v, 3 * 0.693147, 3e-6);
}

TEST(BceLoss, PerfectBinaryReconstructionHitsClampFloor) {
    const Tensor x({2, 3}, {1, 0, 1, 0, 0, 1});
    const double v = bce_loss(x, x).item();
    EXPECT_NEAR(v, 3 * -std::log(1 - kProbClamp), 1e-15);
    EXPECT_LT(v, 1e-6);
}

TEST(BceLoss, AveragesOverProteinsNotDimensions) {
    const Tensor p({2, 1}, {0.5, 0.5});
    const Tensor y({2, 1}, {1.0, 1.0});
    EXPECT_NEAR(bce_loss(p, y).item(), 0.693147, 1e-6);
}

TEST(BceLoss, RejectsShapeMismatch) {
    EXPECT_THROW(bce_loss(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
}

TEST(BceLossProperty, NonnegativeAndStationaryAtTarget) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const Tensor y = Tensor::uniform({3, 4}, 0.0, 1.0, rng);
        const Tensor p = Tensor::uniform({3, 4}, 0.01, 0.99, rng);
        EXPECT_GE(bce_loss(p, y).item(), 0.0);
        Tensor at = Tensor({3, 4}, std::vector<double>(y.data().begin(), y.data().end()), true);
        backward(bce_loss(at, y));
        for (double g : at.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
        // soft-target BCE is minimized at p = y
        EXPECT_LE(bce_loss(y, y).item(), bce_loss(p, y).item());
    }
}

TEST(BceLossProperty, GradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        const Tensor y = binary({3, 5}, rng);
        const Tensor p = Tensor::uniform({3, 5}, 0.05, 0.95, rng);
        const auto report = grad_check([&](const std::vector<Tensor>& in) { return bce_loss(in[0], y); }, {p});
        EXPECT_LT(report.max_rel_error, 1e-4);
    }
}

TEST(BceLossProperty, InvariantToProteinOrder) {
    Rng rng(3);
    const Tensor y = Tensor::uniform({4, 3}, 0.0, 1.0, rng);
    const Tensor p = Tensor::uniform({4, 3}, 0.05, 0.95, rng);
    const std::vector<std::size_t> order{2, 0, 3, 1};
    std::vector<Tensor> py;
    std::vector<Tensor> pp;
    for (std::size_t i : order) {
        py.push_back(slice(y, 0, i, i + 1));
        pp.push_back(slice(p, 0, i, i + 1));
    }
    EXPECT_NEAR(bce_loss(concat(pp, 0), concat(py, 0)).item(), bce_loss(p, y).item(), 1e-12);
}

// --- PSSI -------------------------------------------------------------------

TEST(Pssi, ShapesAndRange) {
    Rng rng(1);
    PssiCodec codec({10, 7}, small(), rng);
    const std::vector<Tensor> sources{binary({5, 10}, rng), binary({5, 7}, rng)};
    const auto latents = codec.encode(sources, {});
    ASSERT_EQ(latents.size(), 2u);
    for (const auto& z : latents) EXPECT_EQ(z.shape(), (Shape{5, 16}));
    const auto recon = codec.decode(latents, {});
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(recon[k].shape(), sources[k].shape());
        for (double v : recon[k].data()) {
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
    }
    EXPECT_THROW(codec.encode({binary({5, 9}, rng), sources[1]}, {}), ShapeError);
    EXPECT_THROW(codec.encode({sources[0]}, {}), ShapeError);
}

TEST(Pssi, DeterministicForSeedAndInEvalMode) {
    Rng r1(2);
    Rng r2(2);
    PssiCodec a({6}, small(), r1);
    PssiCodec b({6}, small(), r2);
    for (auto& l : {&a.encoders[0].mlp.fc1, &a.encoders[0].mlp.fc2, &b.encoders[0].mlp.fc1, &b.encoders[0].mlp.fc2}) {
        for (auto& v : l->bias.mutable_data()) v = 0.0;
    }
    const std::vector<Tensor> zeros{Tensor::zeros({3, 6})};
    const auto za = a.encode(zeros, {});
    const auto zb = b.encode(zeros, {});
    const auto za2 = a.encode(zeros, {});
    for (std::size_t i = 0; i < za[0].numel(); ++i) {
        EXPECT_EQ(za[0].data()[i], zb[0].data()[i]);
        EXPECT_EQ(za[0].data()[i], za2[0].data()[i]);
    }
    // every protein gets the same latent from an all-zero input
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(za[0].data()[j], za[0].data()[16 + j]);
}

TEST(Pssi, LossGradientReachesEveryEncoderParameter) {
    Rng rng(3);
    PssiCodec codec({10, 7}, small(), rng);
    const std::vector<Tensor> sources{binary({4, 10}, rng), binary({4, 7}, rng)};
    backward(codec.loss(sources, {}));
    nn::ParamList params;
    codec.collect(params);
    for (const auto& p : params) {
        if (p.name.rfind("pssi.enc", 0) == 0) EXPECT_GT(grad_norm(p.tensor), 0.0) << p.name;
    }
}

TEST(Pssi, LossIsSumOfPerSourceBce) {
    Rng rng(4);
    PssiCodec codec({5, 3}, small(), rng);
    const std::vector<Tensor> sources{binary({4, 5}, rng), binary({4, 3}, rng)};
    const auto recon = codec.reconstruct(sources, {});
    const double expected = bce_loss(recon[0], sources[0]).item() + bce_loss(recon[1], sources[1]).item();
    EXPECT_NEAR(codec.loss(sources, {}).item(), expected, 1e-12);
}

TEST(Pssi, GradientMatchesFiniteDifferences) {
    Rng rng(5);
    PssiCodec codec({6, 5}, tiny(), rng);
    const std::vector<Tensor> sources{binary({2, 6}, rng), binary({2, 5}, rng)};
    nn::ParamList params;
    codec.collect(params);
    GradCheckOptions opts;
    opts.sample = 100;
    const auto report = grad_check_closure([&]() { return codec.loss(sources, {}); }, params_of(params), opts);
    EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Pssi, DropoutOnlyActsInTraining) {
    Rng rng(6);
    PssiCodec codec({6}, small(), rng);
    const std::vector<Tensor> sources{binary({3, 6}, rng)};
    Rng drop(1);
    const nn::Context eval{false, 0.5, &drop};
    const nn::Context train{true, 0.5, &drop};
    const double e1 = codec.loss(sources, eval).item();
    const double e2 = codec.loss(sources, eval).item();
    EXPECT_EQ(e1, e2);
    EXPECT_NE(codec.loss(sources, train).item(), e1);
}

// --- PSeI -------------------------------------------------------------------

TEST(Psei, ShapesAndRange) {
    Rng rng(7);
    PseiCodec codec(12, small(), rng);
    const Tensor x = Tensor::uniform({5, 12}, 0.0, 1.0, rng);
    const Tensor z = codec.encode(x, {});
    EXPECT_EQ(z.shape(), (Shape{5, 16}));
    const Tensor r = codec.decode(z, {});
    EXPECT_EQ(r.shape(), x.shape());
    for (double v : r.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(Psei, DeterministicForSeed) {
    Rng r1(8);
    Rng r2(8);
    PseiCodec a(6, small(), r1);
    PseiCodec b(6, small(), r2);
    Rng data(0);
    const Tensor x = Tensor::uniform({3, 6}, 0.0, 1.0, data);
    const Tensor ya = a.reconstruct(x, {});
    const Tensor yb = b.reconstruct(x, {});
    for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya.data()[i], yb.data()[i]);
}

TEST(Psei, DefaultEncoderHasSixBlocks) {
    Rng rng(9);
    PseiCodec codec(8, CodecConfig{}, rng);
    EXPECT_EQ(codec.encoder.blocks.blocks.size(), 6u);
    EXPECT_EQ(codec.decoder.blocks.blocks.size(), 6u);
}

TEST(Psei, TinyEncoderGradientMatchesFiniteDifferences) {
    Rng rng(10);
    const PseiEncoder enc(8, tiny(), rng);
    const Tensor x = Tensor::uniform({2, 8}, 0.0, 1.0, rng);
    const auto input_report = grad_check([&](const std::vector<Tensor>& in) { return enc.forward(in[0], {}); }, {x});
    EXPECT_LT(input_report.max_rel_error, 1e-4);
    nn::ParamList params;
    enc.collect("enc", params);
    GradCheckOptions opts;
    opts.sample = 100;
    const auto report = grad_check_closure([&]() { return enc.forward(x, {}); }, params_of(params), opts);
    EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Psei, LossGradientMatchesFiniteDifferences) {
    Rng rng(11);
    PseiCodec codec(8, tiny(), rng);
    const Tensor x = Tensor::uniform({2, 8}, 0.0, 1.0, rng);
    nn::ParamList params;
    codec.collect(params);
    GradCheckOptions opts;
    opts.sample = 100;
    const auto report = grad_check_closure([&]() { return codec.loss(x, {}); }, params_of(params), opts);
    EXPECT_LT(report.max_rel_error, 1e-4);
}
