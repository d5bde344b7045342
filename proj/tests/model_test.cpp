#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "dsrpgo/codecs.hpp"
#include "dsrpgo/errors.hpp"
#include "dsrpgo/model.hpp"

using namespace dsrpgo;
using namespace dsrpgo::model;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.codec.latent = 8;
    c.codec.token = 4;
    c.codec.mamba_inner = 4;
    c.codec.mamba_state = 2;
    c.codec.attn_blocks = 1;
    c.codec.attn_heads = 2;
    c.ppi_width = 6;
    c.attr_width = 5;
    c.seq_width = 7;
    c.terms = 4;
    c.msl_blocks = 1;
    c.msl_heads = 2;
    c.binm_heads = 2;
    c.gate_hidden = 8;
    c.expert_hidden = 8;
    c.expert_out = 4;
    c.predictor_hidden = 8;
    return c;
}

ModalFeatures random_features(const ModelConfig& c, std::size_t n, Rng& rng) {
    return {Tensor::uniform({n, c.ppi_width}, 0.0, 1.0, rng), Tensor::uniform({n, c.attr_width}, 0.0, 1.0, rng),
            Tensor::uniform({n, c.seq_width}, 0.0, 1.0, rng)};
}

Tensor random_labels(std::size_t n, std::size_t m, Rng& rng) {
    Tensor t = Tensor::zeros({n, m});
    for (auto& v : t.mutable_data()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    return t;
}

double grad_norm(const Tensor& t) {
    if (!t.has_grad()) return 0.0;
    double n = 0.0;
    for (double g : t.grad()) n += g * g;
    return std::sqrt(n);
}

double group_grad_norm(const DsrpgoModel& m, const std::string& group) {
    nn::ParamList params;
    m.collect(params);
    double total = 0.0;
    for (const auto& p : params) {
        if (DsrpgoModel::group_of(p.name) == group) total += grad_norm(p.tensor);
    }
    return total;
}

void expect_weights(const GateDecision& d, const std::vector<double>& expected) {
    ASSERT_EQ(d.weights.size(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(d.weights[i], expected[i], 1e-15) << i;
}

}  // namespace

// --- expert selection -------------------------------------------------------

TEST(SelectExperts, SingleSurvivor) {
    const std::vector<double> p{0.7, 0.2, 0.1};
    const auto d = select_experts(p, 0.5);
    EXPECT_EQ(d.active, (std::vector<std::size_t>{0}));
    expect_weights(d, {1.0, 0.0, 0.0});
    EXPECT_FALSE(d.fallback);
}

TEST(SelectExperts, TwoSurvivorsRenormalize) {
    const std::vector<double> p{0.5, 0.3, 0.2};
    const auto d = select_experts(p, 0.25);
    EXPECT_EQ(d.active, (std::vector<std::size_t>{0, 1}));
    expect_weights(d, {0.625, 0.375, 0.0});
}

TEST(SelectExperts, ZeroThresholdKeepsEverything) {
    const std::vector<double> p{0.5, 0.3, 0.2};
    const auto d = select_experts(p, 0.0);
    EXPECT_EQ(d.active.size(), 3u);
    expect_weights(d, p);
}

TEST(SelectExperts, EmptySetFallsBackToTopExpert) {
    const std::vector<double> p{0.4, 0.35, 0.25};
    const auto d = select_experts(p, 0.5);
    EXPECT_TRUE(d.fallback);
    EXPECT_EQ(d.active, (std::vector<std::size_t>{0}));
    expect_weights(d, {1.0, 0.0, 0.0});
}

TEST(SelectExperts, RejectsThresholdOutsideUnitInterval) {
    const std::vector<double> p{0.5, 0.5};
    EXPECT_THROW(select_experts(p, -0.1), ValidationError);
    EXPECT_THROW(select_experts(p, 1.1), ValidationError);
}

TEST(SelectExpertsProperty, WeightsNormalizedAndThresholdMonotone) {
    Rng rng(1);
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t v = 2 + rng.below(7);
        const Tensor logits = Tensor::normal({v}, 2.0, rng);
        const Tensor p = softmax(logits);
        const double t1 = rng.uniform();
        const double t2 = t1 + rng.uniform() * (1.0 - t1);
        const auto d1 = select_experts(p.data(), t1);
        const auto d2 = select_experts(p.data(), t2);
        double total = 0.0;
        for (std::size_t i = 0; i < v; ++i) {
            total += d1.weights[i];
            const bool in_set = std::find(d1.active.begin(), d1.active.end(), i) != d1.active.end();
            if (!in_set) EXPECT_EQ(d1.weights[i], 0.0);
            EXPECT_GE(d1.weights[i], 0.0);
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
        if (!d1.fallback && !d2.fallback) {
            for (std::size_t i : d2.active) {
                EXPECT_NE(std::find(d1.active.begin(), d1.active.end(), i), d1.active.end());
            }
        }
        // shifting every logit leaves the decision unchanged
        const Tensor shifted = softmax(add_scalar(logits, rng.uniform(-5.0, 5.0)));
        const auto ds = select_experts(shifted.data(), t1);
        if (ds.active == d1.active) {
            for (std::size_t i = 0; i < v; ++i) EXPECT_NEAR(ds.weights[i], d1.weights[i], 1e-9);
        } else {
            // only possible when a confidence sits within rounding of t1
            bool borderline = false;
            for (double q : p.data()) borderline = borderline || std::abs(q - t1) < 1e-12;
            EXPECT_TRUE(borderline);
        }
    }
}

// --- asymmetric loss --------------------------------------------------------

TEST(AsymmetricLoss, ReducesToBceWithoutFocusing) {
    EXPECT_NEAR(asymmetric_loss(Tensor({1, 1}, {0.5}), Tensor({1, 1}, {1.0}), 0, 0).item(), 0.693147, 1e-6);
}

TEST(AsymmetricLoss, PositiveFocusingScalesLoss) {
    const double v = asymmetric_loss(Tensor({1, 1}, {0.5}), Tensor({1, 1}, {1.0}), 2, 0).item();
    EXPECT_NEAR(v, 0.25 * std::log(2.0), 1e-12);
    EXPECT_NEAR(v, 0.173287, 1e-6);
}

TEST(AsymmetricLoss, ConfidentPositiveCostsNothing) {
    EXPECT_LT(asymmetric_loss(Tensor({1, 1}, {1.0}), Tensor({1, 1}, {1.0}), 0, 4).item(), 1e-6);
    EXPECT_LT(asymmetric_loss(Tensor({1, 1}, {0.999999}), Tensor({1, 1}, {1.0}), 0, 4).item(), 1e-5);
}

TEST(AsymmetricLossProperty, EqualsMeanBceWithoutFocusing) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(seed);
        const std::size_t n = 1 + rng.below(6);
        const std::size_t m = 1 + rng.below(6);
        const Tensor p = Tensor::uniform({n, m}, 0.0, 1.0, rng);
        const Tensor y = random_labels(n, m, rng);
        const double bce = codecs::bce_loss(p, y).item() / static_cast<double>(m);
        EXPECT_NEAR(asymmetric_loss(p, y, 0, 0).item(), bce, 1e-12);
    }
}

TEST(AsymmetricLossProperty, GradientMatchesFiniteDifferences) {
    const double gammas[][2] = {{0, 0}, {0, 4}, {2, 4}, {1.5, 0.5}};
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        Rng rng(seed);
        const Tensor p = Tensor::uniform({3, 4}, 0.02, 0.98, rng);
        const Tensor y = random_labels(3, 4, rng);
        for (const auto& g : gammas) {
            const auto report = grad_check(
                [&](const std::vector<Tensor>& in) { return asymmetric_loss(in[0], y, g[0], g[1]); }, {p});
            EXPECT_LT(report.max_rel_error, 1e-4) << "seed " << seed << " gp " << g[0] << " gn " << g[1];
        }
    }
}

// --- model ------------------------------------------------------------------

TEST(Model, ShapesAndDefaultThreshold) {
    Rng rng(2);
    const auto cfg = tiny_config();
    DsrpgoModel m(cfg, rng);
    EXPECT_EQ(cfg.channels(), 6u);
    EXPECT_DOUBLE_EQ(cfg.effective_threshold(), 1.0 / 6.0);
    ForwardTrace trace;
    const Tensor scores = m.forward(random_features(cfg, 3, rng), {}, &trace);
    EXPECT_EQ(scores.shape(), (Shape{3, 4}));
    EXPECT_EQ(trace.msl.shape(), (Shape{3, 3, 8}));
    EXPECT_EQ(trace.mil.shape(), (Shape{3, 3, 8}));
    EXPECT_EQ(trace.x_dsm.shape(), (Shape{3, 6, 8}));
    EXPECT_EQ(trace.fused.shape(), (Shape{3, 24}));
    ASSERT_EQ(trace.gates.size(), 3u);
    for (double s : scores.data()) {
        EXPECT_GT(s, 0.0);
        EXPECT_LT(s, 1.0);
    }
}

TEST(Model, GateInvariantsHoldOnEveryForward) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        auto cfg = tiny_config();
        cfg.threshold = rng.uniform(0.0, 0.5);
        DsrpgoModel m(cfg, rng);
        ForwardTrace trace;
        m.forward(random_features(cfg, 4, rng), {}, &trace);
        const std::size_t e = cfg.expert_out;
        for (std::size_t i = 0; i < 4; ++i) {
            const auto& g = trace.gates[i];
            double ptotal = 0.0;
            double wtotal = 0.0;
            for (double q : g.confidences) ptotal += q;
            for (double w : g.weights) wtotal += w;
            EXPECT_NEAR(ptotal, 1.0, 1e-9);
            EXPECT_NEAR(wtotal, 1.0, 1e-9);
            // unselected experts contribute zero blocks
            for (std::size_t k = 0; k < 6; ++k) {
                if (g.weights[k] != 0.0) continue;
                for (std::size_t j = 0; j < e; ++j) EXPECT_EQ(trace.fused.data()[i * 6 * e + k * e + j], 0.0);
            }
        }
    }
}

TEST(Model, MslBranchIsEquivariantToModalityOrder) {
    Rng rng(3);
    const auto cfg = tiny_config();
    DsrpgoModel m(cfg, rng);
    const Tensor tokens = Tensor::normal({2, 3, 8}, 1.0, rng);
    const Tensor permuted = concat({slice(tokens, 1, 2, 3), slice(tokens, 1, 0, 1), slice(tokens, 1, 1, 2)}, 1);
    const Tensor y = m.msl.forward(tokens, {});
    const Tensor py = m.msl.forward(permuted, {});
    const std::size_t src[] = {2, 0, 1};
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t e = 0; e < 8; ++e)
                EXPECT_NEAR(py.data()[(b * 3 + c) * 8 + e], y.data()[(b * 3 + src[c]) * 8 + e], 1e-9);
}

TEST(Model, MslGradientReachesAllModalities) {
    Rng rng(4);
    auto cfg = tiny_config();
    cfg.branch = Branch::msl_only;
    DsrpgoModel m(cfg, rng);
    const auto x = random_features(cfg, 3, rng);
    ForwardTrace trace;
    m.forward(x, {}, &trace);
    backward(sum(trace.msl));
    backward(m.loss(x, random_labels(3, 4, rng), {}));
    for (const char* g : {"enc.ppi", "enc.attr", "enc.seq"}) EXPECT_GT(group_grad_norm(m, g), 0.0) << g;
}

TEST(Model, MilWithZeroOutputMapsPassesProjectionsThrough) {
    Rng rng(5);
    auto cfg = tiny_config();
    DsrpgoModel m(cfg, rng);
    m.mil.cross_1to2.output.zero();
    m.mil.cross_2to1.output.zero();
    const auto x = random_features(cfg, 2, rng);
    ForwardTrace trace;
    m.forward(x, {}, &trace);
    const Tensor zp = m.enc_ppi.forward(x.ppi, {});
    const Tensor zs = m.enc_seq.forward(x.seq, {});
    const Tensor za = m.enc_attr.forward(x.attr, {});
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t e = 0; e < 8; ++e) {
            EXPECT_EQ(trace.mil.data()[(b * 3 + 0) * 8 + e], zp.data()[b * 8 + e]);
            EXPECT_EQ(trace.mil.data()[(b * 3 + 1) * 8 + e], zs.data()[b * 8 + e]);
            EXPECT_EQ(trace.mil.data()[(b * 3 + 2) * 8 + e], za.data()[b * 8 + e]);
        }
    }
}

TEST(Model, SequenceChannelOfMilReachesPpiPathway) {
    Rng rng(6);
    auto cfg = tiny_config();
    cfg.branch = Branch::mil_only;
    DsrpgoModel m(cfg, rng);
    ForwardTrace trace;
    m.forward(random_features(cfg, 2, rng), {}, &trace);
    const Tensor w = Tensor::normal({2, 1, 8}, 1.0, rng);
    backward(sum(mul(slice(trace.mil, 1, 1, 2), w)));
    EXPECT_GT(group_grad_norm(m, "enc.ppi"), 0.0);
    EXPECT_GT(group_grad_norm(m, "mil"), 0.0);
}

TEST(Model, ZeroPredictorGivesHalf) {
    Rng rng(7);
    const auto cfg = tiny_config();
    DsrpgoModel m(cfg, rng);
    m.predictor.fc2.zero();
    const Tensor scores = m.forward(random_features(cfg, 3, rng), {});
    for (double s : scores.data()) EXPECT_EQ(s, 0.5);
}

TEST(Model, EvalForwardIsDeterministic) {
    Rng rng(8);
    const auto cfg = tiny_config();
    DsrpgoModel m(cfg, rng);
    const auto x = random_features(cfg, 3, rng);
    Rng drop(3);
    const nn::Context eval{false, 0.3, &drop};
    const Tensor a = m.forward(x, eval);
    const Tensor b = m.forward(x, eval);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Model, EveryAblationBuildsAndRuns) {
    struct Variant {
        Branch branch;
        bool binm, dsm, spatial, sequence;
        std::size_t channels;
    };
    const Variant variants[] = {
        {Branch::both, true, true, true, true, 6},    {Branch::msl_only, true, true, true, true, 3},
        {Branch::mil_only, true, true, true, true, 3}, {Branch::both, false, true, true, true, 6},
        {Branch::both, true, false, true, true, 6},   {Branch::both, true, true, false, true, 2},
        {Branch::both, true, true, true, false, 4},
    };
    for (const auto& v : variants) {
        Rng rng(9);
        auto cfg = tiny_config();
        cfg.branch = v.branch;
        cfg.use_binm = v.binm;
        cfg.use_dsm = v.dsm;
        cfg.use_spatial = v.spatial;
        cfg.use_sequence = v.sequence;
        EXPECT_EQ(cfg.channels(), v.channels);
        DsrpgoModel m(cfg, rng);
        const auto x = random_features(cfg, 2, rng);
        const Tensor loss = m.loss(x, random_labels(2, 4, rng), {});
        EXPECT_TRUE(std::isfinite(loss.item()));
        backward(loss);
        EXPECT_GT(group_grad_norm(m, "predictor"), 0.0);
    }
}

TEST(Model, FullGradientMatchesFiniteDifferences) {
    Rng rng(10);
    const auto cfg = tiny_config();
    DsrpgoModel m(cfg, rng);
    const auto x = random_features(cfg, 2, rng);
    const Tensor y = random_labels(2, 4, rng);
    nn::ParamList params;
    m.collect(params);
    std::vector<Tensor> leaves;
    for (auto& p : params) leaves.push_back(p.tensor);
    GradCheckOptions opts;
    opts.sample = 100;
    const auto report = grad_check_closure([&]() { return m.loss(x, y, {}); }, leaves, opts);
    EXPECT_LT(report.max_rel_error, 1e-3);
}

TEST(Model, ConfigJsonRoundTrip) {
    auto cfg = tiny_config();
    cfg.branch = Branch::mil_only;
    cfg.use_dsm = false;
    cfg.threshold = 0.3;
    const nlohmann::json j = cfg;
    const auto back = j.get<ModelConfig>();
    EXPECT_EQ(nlohmann::json(back).dump(), j.dump());
    EXPECT_THROW(parse_branch("neither"), ValidationError);
}

// --- pretrained weights -----------------------------------------------------

namespace {

TensorMap as_map(const nn::ParamList& list) {
    TensorMap out;
    for (const auto& p : list) out[p.name] = p.tensor;
    return out;
}

}  // namespace

TEST(LoadPretrained, CopiesEncodersAndReportsGroups) {
    Rng rng(11);
    const auto cfg = tiny_config();
    codecs::PssiCodec pssi({cfg.ppi_width, cfg.attr_width}, cfg.codec, rng);
    codecs::PseiCodec psei(cfg.seq_width, cfg.codec, rng);
    nn::ParamList pssi_params;
    nn::ParamList psei_params;
    pssi.collect(pssi_params);
    psei.collect(psei_params);
    DsrpgoModel m(cfg, rng);
    const auto manifest = load_pretrained(m, as_map(pssi_params), as_map(psei_params));
    EXPECT_EQ(manifest.loaded_groups, (std::vector<std::string>{"enc.ppi", "enc.attr", "enc.seq"}));
    EXPECT_EQ(manifest.fresh_groups, (std::vector<std::string>{"msl", "mil", "dsm", "predictor"}));

    const auto pssi_map = as_map(pssi_params);
    const auto psei_map = as_map(psei_params);
    nn::ParamList params;
    m.collect(params);
    for (const auto& p : params) {
        const auto it = manifest.sources.find(p.name);
        if (it == manifest.sources.end()) continue;
        const Tensor& src = it->second.rfind("pssi", 0) == 0 ? pssi_map.at(it->second) : psei_map.at(it->second);
        ASSERT_EQ(std::memcmp(src.data().data(), p.tensor.data().data(), src.numel() * sizeof(double)), 0) << p.name;
    }
    // loaded encoders reproduce the pretrained latents
    const Tensor x = Tensor::uniform({2, cfg.ppi_width}, 0.0, 1.0, rng);
    const Tensor a = m.enc_ppi.forward(x, {});
    const Tensor b = pssi.encoders[0].forward(x, {});
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(LoadPretrained, MismatchNamesIncompatibleGroups) {
    Rng rng(12);
    const auto cfg = tiny_config();
    codecs::PssiCodec pssi({cfg.ppi_width + 1, cfg.attr_width}, cfg.codec, rng);
    auto other = cfg.codec;
    other.latent = 12;
    codecs::PseiCodec psei(cfg.seq_width, other, rng);
    nn::ParamList pssi_params;
    nn::ParamList psei_params;
    pssi.collect(pssi_params);
    psei.collect(psei_params);
    DsrpgoModel m(cfg, rng);
    try {
        load_pretrained(m, as_map(pssi_params), as_map(psei_params));
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("enc.ppi"), std::string::npos);
        EXPECT_NE(msg.find("enc.seq"), std::string::npos);
        EXPECT_EQ(msg.find("enc.attr"), std::string::npos);
    }
}
