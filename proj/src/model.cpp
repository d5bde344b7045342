#include "dsrpgo/model.hpp"

#include <algorithm>
#include <cmath>

#include "dsrpgo/errors.hpp"

namespace dsrpgo::codecs {

void to_json(nlohmann::json& j, const CodecConfig& c) {
    j = {{"latent", c.latent},           {"token", c.token},
         {"mamba_inner", c.mamba_inner}, {"mamba_state", c.mamba_state},
         {"attn_blocks", c.attn_blocks}, {"attn_heads", c.attn_heads}};
}

void from_json(const nlohmann::json& j, CodecConfig& c) {
    c.latent = j.value("latent", c.latent);
    c.token = j.value("token", c.token);
    c.mamba_inner = j.value("mamba_inner", c.mamba_inner);
    c.mamba_state = j.value("mamba_state", c.mamba_state);
    c.attn_blocks = j.value("attn_blocks", c.attn_blocks);
    c.attn_heads = j.value("attn_heads", c.attn_heads);
}

}  // namespace dsrpgo::codecs

namespace dsrpgo::model {

std::string branch_name(Branch b) {
    switch (b) {
        case Branch::both: return "both";
        case Branch::msl_only: return "msl-only";
        case Branch::mil_only: return "mil-only";
    }
    return "both";
}

Branch parse_branch(const std::string& text) {
    if (text == "both") return Branch::both;
    if (text == "msl-only") return Branch::msl_only;
    if (text == "mil-only") return Branch::mil_only;
    throw ValidationError("unknown branch '" + text + "' (expected both, msl-only or mil-only)");
}

std::vector<Modality> ModelConfig::modalities() const {
    std::vector<Modality> out;
    if (use_spatial) out.push_back(Modality::ppi);
    if (use_sequence) out.push_back(Modality::sequence);
    if (use_spatial) out.push_back(Modality::attribute);
    return out;
}

std::size_t ModelConfig::channels() const {
    return modalities().size() * (branch == Branch::both ? 2 : 1);
}

double ModelConfig::effective_threshold() const {
    return threshold < 0.0 ? 1.0 / static_cast<double>(channels()) : threshold;
}

void ModelConfig::validate() const {
    if (!use_spatial && !use_sequence) throw ValidationError("model: at least one modality must be enabled");
    if (terms == 0) throw ValidationError("model: number of GO terms must be positive");
    if (use_spatial && (ppi_width == 0 || attr_width == 0)) throw ValidationError("model: spatial widths must be positive");
    if (use_sequence && seq_width == 0) throw ValidationError("model: sequence width must be positive");
    if (threshold > 1.0) throw ValidationError("model: DSM threshold must lie in [0, 1]");
    if (gamma_pos < 0.0 || gamma_neg < 0.0) throw ValidationError("model: focusing parameters must be >= 0");
    if (codec.latent == 0 || codec.token == 0) throw ValidationError("model: latent and token widths must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"codec", c.codec},
         {"ppi_width", c.ppi_width},
         {"attr_width", c.attr_width},
         {"seq_width", c.seq_width},
         {"terms", c.terms},
         {"msl_blocks", c.msl_blocks},
         {"msl_heads", c.msl_heads},
         {"binm_heads", c.binm_heads},
         {"gate_hidden", c.gate_hidden},
         {"expert_hidden", c.expert_hidden},
         {"expert_out", c.expert_out},
         {"predictor_hidden", c.predictor_hidden},
         {"threshold", c.threshold},
         {"gamma_pos", c.gamma_pos},
         {"gamma_neg", c.gamma_neg},
         {"branch", branch_name(c.branch)},
         {"use_binm", c.use_binm},
         {"use_dsm", c.use_dsm},
         {"use_spatial", c.use_spatial},
         {"use_sequence", c.use_sequence}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    if (j.contains("codec")) j.at("codec").get_to(c.codec);
    c.ppi_width = j.value("ppi_width", c.ppi_width);
    c.attr_width = j.value("attr_width", c.attr_width);
    c.seq_width = j.value("seq_width", c.seq_width);
    c.terms = j.value("terms", c.terms);
    c.msl_blocks = j.value("msl_blocks", c.msl_blocks);
    c.msl_heads = j.value("msl_heads", c.msl_heads);
    c.binm_heads = j.value("binm_heads", c.binm_heads);
    c.gate_hidden = j.value("gate_hidden", c.gate_hidden);
    c.expert_hidden = j.value("expert_hidden", c.expert_hidden);
    c.expert_out = j.value("expert_out", c.expert_out);
    c.predictor_hidden = j.value("predictor_hidden", c.predictor_hidden);
    c.threshold = j.value("threshold", c.threshold);
    c.gamma_pos = j.value("gamma_pos", c.gamma_pos);
    c.gamma_neg = j.value("gamma_neg", c.gamma_neg);
    if (j.contains("branch")) c.branch = parse_branch(j.at("branch").get<std::string>());
    c.use_binm = j.value("use_binm", c.use_binm);
    c.use_dsm = j.value("use_dsm", c.use_dsm);
    c.use_spatial = j.value("use_spatial", c.use_spatial);
    c.use_sequence = j.value("use_sequence", c.use_sequence);
}

// --- selection --------------------------------------------------------------

GateDecision select_experts(std::span<const double> confidences, double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
        throw ValidationError("DSM threshold " + std::to_string(threshold) + " outside [0, 1]");
    }
    if (confidences.empty()) throw ValidationError("DSM: no experts");
    GateDecision d;
    d.confidences.assign(confidences.begin(), confidences.end());
    d.threshold = threshold;
    d.weights.assign(confidences.size(), 0.0);
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        if (confidences[i] >= threshold) d.active.push_back(i);
    }
    if (d.active.empty()) {
        d.fallback = true;
        const auto top = std::max_element(confidences.begin(), confidences.end()) - confidences.begin();
        d.active.push_back(static_cast<std::size_t>(top));
    }
    // Extended precision keeps the renormalized weights correctly rounded.
    long double total = 0.0L;
    for (std::size_t i : d.active) total += confidences[i];
    for (std::size_t i : d.active) {
        d.weights[i] = total > 0.0L ? static_cast<double>(confidences[i] / total) : 1.0 / d.active.size();
    }
    return d;
}

Tensor asymmetric_loss(const Tensor& scores, const Tensor& labels, double gamma_pos, double gamma_neg) {
    if (scores.shape() != labels.shape() || scores.rank() != 2) {
        throw ShapeError("asymmetric_loss: scores " + shape_str(scores.shape()) + " vs labels " +
                         shape_str(labels.shape()));
    }
    const double count = static_cast<double>(scores.numel());
    const auto p = scores.data();
    const auto y = labels.data();
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double q = std::clamp(p[i], codecs::kProbClamp, 1.0 - codecs::kProbClamp);
        total -= y[i] * std::pow(1.0 - q, gamma_pos) * std::log(q);
        total -= (1.0 - y[i]) * std::pow(q, gamma_neg) * std::log(1.0 - q);
    }
    return make_result(
        "asymmetric_loss", Shape{}, {total / count}, {scores, labels},
        [count, gamma_pos, gamma_neg](detail::Node& self) {
            auto& np = *self.inputs[0];
            if (!np.requires_grad) return;
            const auto& y = self.inputs[1]->data;
            auto& g = np.grad_buffer();
            const double scale = self.grad[0] / count;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double q = np.data[i];
                if (q < codecs::kProbClamp || q > 1.0 - codecs::kProbClamp) continue;
                double d = 0.0;
                // d/dq of -(1-q)^gp log q
                double pos = -std::pow(1.0 - q, gamma_pos) / q;
                if (gamma_pos != 0.0) pos += gamma_pos * std::pow(1.0 - q, gamma_pos - 1.0) * std::log(q);
                // d/dq of -q^gn log(1-q)
                double neg = std::pow(q, gamma_neg) / (1.0 - q);
                if (gamma_neg != 0.0) neg -= gamma_neg * std::pow(q, gamma_neg - 1.0) * std::log(1.0 - q);
                d = y[i] * pos + (1.0 - y[i]) * neg;
                g[i] += scale * d;
            }
        });
}

SelectionModule::SelectionModule(std::size_t channels, std::size_t width, const ModelConfig& config, Rng& rng)
    : gate(channels * width, config.gate_hidden, channels, rng) {
    for (std::size_t i = 0; i < channels; ++i) {
        experts.emplace_back(channels * width, config.expert_hidden, config.expert_out, rng);
    }
}

Tensor SelectionModule::confidences(const Tensor& x_dsm, const nn::Context& ctx) const {
    const Tensor flat = reshape(x_dsm, {x_dsm.dim(0), x_dsm.dim(1) * x_dsm.dim(2)});
    return softmax(gate.forward(flat, ctx), -1);
}

Tensor SelectionModule::forward(const Tensor& x_dsm, double threshold, const nn::Context& ctx,
                                std::vector<GateDecision>* gates) const {
    const std::size_t n = x_dsm.dim(0);
    const std::size_t v = experts.size();
    if (x_dsm.rank() != 3 || x_dsm.dim(1) != v) {
        throw ShapeError("DSM: expected [N, " + std::to_string(v) + ", D], got " + shape_str(x_dsm.shape()));
    }
    const Tensor flat = reshape(x_dsm, {n, x_dsm.dim(1) * x_dsm.dim(2)});
    const Tensor p = softmax(gate.forward(flat, ctx), -1);

    std::vector<double> mask(n * v, 0.0);
    const auto pd = p.data();
    if (gates != nullptr) gates->clear();
    for (std::size_t i = 0; i < n; ++i) {
        auto decision = select_experts(pd.subspan(i * v, v), threshold);
        for (std::size_t e : decision.active) mask[i * v + e] = 1.0;
        if (gates != nullptr) gates->push_back(std::move(decision));
    }
    const Tensor masked = mul(p, Tensor({n, v}, std::move(mask)));
    const Tensor weights = div(masked, sum(masked, 1, true));

    std::vector<Tensor> blocks;
    blocks.reserve(v);
    for (std::size_t e = 0; e < v; ++e) {
        blocks.push_back(mul(experts[e].forward(flat, ctx), slice(weights, 1, e, e + 1)));
    }
    return concat(blocks, 1);
}

void SelectionModule::collect(const std::string& prefix, nn::ParamList& out) const {
    gate.collect(prefix + ".gate", out);
    for (std::size_t e = 0; e < experts.size(); ++e) experts[e].collect(prefix + ".expert." + std::to_string(e), out);
}

// --- model ------------------------------------------------------------------

DsrpgoModel::DsrpgoModel(const ModelConfig& config, Rng& rng) : config_(config) {
    config.validate();
    const std::size_t d = config.codec.latent;
    if (config.use_spatial) {
        enc_ppi = codecs::PssiSourceEncoder(config.ppi_width, config.codec, rng);
        enc_attr = codecs::PssiSourceEncoder(config.attr_width, config.codec, rng);
    }
    if (config.use_sequence) enc_seq = codecs::PseiEncoder(config.seq_width, config.codec, rng);
    if (config.branch != Branch::mil_only) msl = attention::SelfAttentionStack({d, config.msl_heads}, config.msl_blocks, rng);
    const bool cross = config.use_binm && config.use_spatial && config.use_sequence;
    if (config.branch != Branch::msl_only && cross) mil = attention::Binm({d, config.binm_heads}, rng);
    const std::size_t v = config.channels();
    std::size_t predictor_in = v * d;
    if (config.use_dsm) {
        dsm = SelectionModule(v, d, config, rng);
        predictor_in = v * config.expert_out;
    }
    predictor = nn::Mlp(predictor_in, config.predictor_hidden, config.terms, rng);
}

std::vector<Tensor> DsrpgoModel::modality_tokens(const ModalFeatures& x, const nn::Context& ctx) const {
    std::vector<Tensor> tokens;
    for (Modality m : config_.modalities()) {
        Tensor z;
        switch (m) {
            case Modality::ppi: z = enc_ppi.forward(x.ppi, ctx); break;
            case Modality::sequence: z = enc_seq.forward(x.seq, ctx); break;
            case Modality::attribute: z = enc_attr.forward(x.attr, ctx); break;
        }
        tokens.push_back(reshape(z, {z.dim(0), 1, z.dim(1)}));
    }
    return tokens;
}

Tensor DsrpgoModel::forward(const ModalFeatures& x, const nn::Context& ctx, ForwardTrace* trace) const {
    const auto tokens = modality_tokens(x, ctx);
    std::vector<Tensor> parts;

    Tensor msl_out;
    if (config_.branch != Branch::mil_only) {
        msl_out = msl.forward(concat(tokens, 1), ctx);
        parts.push_back(msl_out);
    }

    Tensor mil_out;
    if (config_.branch != Branch::msl_only) {
        const bool cross = config_.use_binm && config_.use_spatial && config_.use_sequence;
        if (cross) {
            // spatial side: [PPI, attribute]; sequence side: [sequence]
            const Tensor spatial = concat({tokens[0], tokens[2]}, 1);
            const auto [spatial_out, seq_out] = mil.forward(spatial, tokens[1]);
            mil_out = concat({slice(spatial_out, 1, 0, 1), seq_out, slice(spatial_out, 1, 1, 2)}, 1);
        } else {
            mil_out = concat(tokens, 1);
        }
        parts.push_back(mil_out);
    }

    const Tensor x_dsm = parts.size() == 1 ? parts[0] : concat(parts, 1);
    const std::size_t n = x_dsm.dim(0);
    Tensor fused;
    std::vector<GateDecision> gates;
    if (config_.use_dsm) {
        fused = dsm.forward(x_dsm, config_.effective_threshold(), ctx, trace ? &gates : nullptr);
    } else {
        fused = reshape(x_dsm, {n, x_dsm.dim(1) * x_dsm.dim(2)});
    }
    const Tensor scores = sigmoid(predictor.forward(nn::apply_dropout(fused, ctx), ctx));
    if (trace != nullptr) {
        trace->msl = msl_out;
        trace->mil = mil_out;
        trace->x_dsm = x_dsm;
        trace->fused = fused;
        trace->gates = std::move(gates);
    }
    return scores;
}

Tensor DsrpgoModel::loss(const ModalFeatures& x, const Tensor& labels, const nn::Context& ctx) const {
    return asymmetric_loss(forward(x, ctx), labels, config_.gamma_pos, config_.gamma_neg);
}

void DsrpgoModel::collect(nn::ParamList& out) const {
    if (config_.use_spatial) {
        enc_ppi.collect("enc.ppi", out);
        enc_attr.collect("enc.attr", out);
    }
    if (config_.use_sequence) enc_seq.collect("enc.seq", out);
    if (config_.branch != Branch::mil_only) msl.collect("msl", out);
    if (config_.branch != Branch::msl_only && config_.use_binm && config_.use_spatial && config_.use_sequence) {
        mil.collect("mil", out);
    }
    if (config_.use_dsm) dsm.collect("dsm", out);
    predictor.collect("predictor", out);
}

std::string DsrpgoModel::group_of(const std::string& name) {
    const auto first = name.find('.');
    if (first == std::string::npos) return name;
    const std::string head = name.substr(0, first);
    if (head != "enc") return head;
    const auto second = name.find('.', first + 1);
    return name.substr(0, second);
}

// --- pretrained weights -----------------------------------------------------

void to_json(nlohmann::json& j, const LoadManifest& m) {
    j = {{"loaded_groups", m.loaded_groups}, {"fresh_groups", m.fresh_groups}, {"sources", m.sources}};
}

namespace {

std::string source_name(const std::string& param) {
    auto swap_prefix = [&](const std::string& from, const std::string& to) -> std::string {
        if (param.rfind(from, 0) == 0) return to + param.substr(from.size());
        return {};
    };
    if (auto s = swap_prefix("enc.ppi.", "pssi.enc.0."); !s.empty()) return s;
    if (auto s = swap_prefix("enc.attr.", "pssi.enc.1."); !s.empty()) return s;
    if (auto s = swap_prefix("enc.seq.", "psei.enc."); !s.empty()) return s;
    return {};
}

}  // namespace

LoadManifest load_pretrained(DsrpgoModel& model, const TensorMap& pssi, const TensorMap& psei) {
    nn::ParamList params;
    model.collect(params);
    LoadManifest manifest;
    std::map<std::string, std::vector<std::string>> problems;
    std::vector<std::pair<Tensor, const Tensor*>> copies;
    for (auto& p : params) {
        const std::string src = source_name(p.name);
        const std::string group = DsrpgoModel::group_of(p.name);
        if (src.empty()) {
            if (std::find(manifest.fresh_groups.begin(), manifest.fresh_groups.end(), group) ==
                manifest.fresh_groups.end()) {
                manifest.fresh_groups.push_back(group);
            }
            continue;
        }
        const TensorMap& pool = src.rfind("pssi.", 0) == 0 ? pssi : psei;
        const auto it = pool.find(src);
        if (it == pool.end()) {
            problems[group].push_back(src + " missing");
            continue;
        }
        if (it->second.shape() != p.tensor.shape()) {
            problems[group].push_back(src + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                                      shape_str(p.tensor.shape()));
            continue;
        }
        copies.emplace_back(p.tensor, &it->second);
        manifest.sources[p.name] = src;
        if (std::find(manifest.loaded_groups.begin(), manifest.loaded_groups.end(), group) ==
            manifest.loaded_groups.end()) {
            manifest.loaded_groups.push_back(group);
        }
    }
    if (!problems.empty()) {
        std::string msg = "incompatible pretrained checkpoint for groups:";
        for (const auto& [group, issues] : problems) {
            msg += " " + group + " (" + issues.front();
            if (issues.size() > 1) msg += ", +" + std::to_string(issues.size() - 1) + " more";
            msg += ")";
        }
        throw ValidationError(msg);
    }
    for (auto& [dst, src] : copies) {
        auto d = dst.mutable_data();
        std::copy(src->data().begin(), src->data().end(), d.begin());
    }
    return manifest;
}

}  // namespace dsrpgo::model
