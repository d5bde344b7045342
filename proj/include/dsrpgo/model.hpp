#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dsrpgo/attention.hpp"
#include "dsrpgo/codecs.hpp"
#include "dsrpgo/nn.hpp"
#include "dsrpgo/tensor.hpp"
#include "json.hpp"

namespace dsrpgo::codecs {
void to_json(nlohmann::json& j, const CodecConfig& c);
void from_json(const nlohmann::json& j, CodecConfig& c);
}  // namespace dsrpgo::codecs

namespace dsrpgo::model {

enum class Branch { both, msl_only, mil_only };

std::string branch_name(Branch b);
Branch parse_branch(const std::string& text);

enum class Modality { ppi, sequence, attribute };

struct ModelConfig {
    codecs::CodecConfig codec;
    std::size_t ppi_width = 0;
    std::size_t attr_width = 0;
    std::size_t seq_width = 0;
    std::size_t terms = 0;

    std::size_t msl_blocks = 2;
    std::size_t msl_heads = 4;
    std::size_t binm_heads = 4;
    std::size_t gate_hidden = 64;
    std::size_t expert_hidden = 64;
    std::size_t expert_out = 32;
    std::size_t predictor_hidden = 128;

    // Negative means 1 / (number of experts).
    double threshold = -1.0;
    double gamma_pos = 0.0;
    double gamma_neg = 4.0;

    Branch branch = Branch::both;
    bool use_binm = true;
    bool use_dsm = true;
    bool use_spatial = true;
    bool use_sequence = true;

    /// Active modalities in channel order (PPI, sequence, attribute).
    std::vector<Modality> modalities() const;
    /// Number of feature-map channels entering the selection module.
    std::size_t channels() const;
    double effective_threshold() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Per-protein inputs, row-aligned: [N, ppi_width], [N, attr_width], [N, seq_width].
struct ModalFeatures {
    Tensor ppi;
    Tensor attr;
    Tensor seq;
};

/// Outcome of thresholded expert selection for one protein.
struct GateDecision {
    std::vector<double> confidences;
    double threshold = 0.0;
    std::vector<std::size_t> active;  // ascending expert indices
    std::vector<double> weights;      // zero outside `active`, sums to 1
    bool fallback = false;            // no confidence reached the threshold
};

/// Keeps experts whose confidence reaches t and renormalizes their weights.
/// With no survivor, keeps the single most confident expert (lowest index on
/// ties). t outside [0, 1] is a ValidationError.
GateDecision select_experts(std::span<const double> confidences, double threshold);

/// (1/(N M)) sum [-y (1-p)^gp log p - (1-y) p^gn log(1-p)], scores clamped
/// to [1e-7, 1 - 1e-7]. Labels receive no gradient.
Tensor asymmetric_loss(const Tensor& scores, const Tensor& labels, double gamma_pos, double gamma_neg);

struct ForwardTrace {
    Tensor msl;    // [N, channels, D] or undefined
    Tensor mil;    // [N, channels, D] or undefined
    Tensor x_dsm;  // [N, V, D]
    Tensor fused;  // predictor input
    std::vector<GateDecision> gates;
};

/// Dynamic selection: softmax gate over V experts, thresholded active set,
/// fixed-width concatenation of weighted expert outputs.
class SelectionModule {
public:
    SelectionModule() = default;
    SelectionModule(std::size_t channels, std::size_t width, const ModelConfig& config, Rng& rng);

    /// x_dsm [N, V, D] -> [N, V * expert_out]
    Tensor forward(const Tensor& x_dsm, double threshold, const nn::Context& ctx,
                   std::vector<GateDecision>* gates = nullptr) const;
    /// Softmax gate confidences [N, V].
    Tensor confidences(const Tensor& x_dsm, const nn::Context& ctx) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;

    nn::Mlp gate;
    std::vector<nn::Mlp> experts;
};

class DsrpgoModel {
public:
    DsrpgoModel() = default;
    DsrpgoModel(const ModelConfig& config, Rng& rng);

    /// Scores [N, terms] in (0, 1).
    Tensor forward(const ModalFeatures& x, const nn::Context& ctx, ForwardTrace* trace = nullptr) const;
    Tensor loss(const ModalFeatures& x, const Tensor& labels, const nn::Context& ctx) const;

    void collect(nn::ParamList& out) const;
    /// Parameter group of a parameter name: enc.ppi, enc.attr, enc.seq, msl, mil, dsm, predictor.
    static std::string group_of(const std::string& name);

    const ModelConfig& config() const { return config_; }

    codecs::PssiSourceEncoder enc_ppi;
    codecs::PssiSourceEncoder enc_attr;
    codecs::PseiEncoder enc_seq;
    attention::SelfAttentionStack msl;
    attention::Binm mil;
    SelectionModule dsm;
    nn::Mlp predictor;

private:
    std::vector<Tensor> modality_tokens(const ModalFeatures& x, const nn::Context& ctx) const;

    ModelConfig config_;
};

using TensorMap = std::map<std::string, Tensor>;

struct LoadManifest {
    std::vector<std::string> loaded_groups;
    std::vector<std::string> fresh_groups;
    std::map<std::string, std::string> sources;  // model parameter -> checkpoint tensor
};

void to_json(nlohmann::json& j, const LoadManifest& m);

/// Copies pretrained encoder weights into the model: enc.ppi <- pssi.enc.0,
/// enc.attr <- pssi.enc.1, enc.seq <- psei.enc. Missing tensors or shape
/// mismatches raise a ValidationError naming every incompatible group.
LoadManifest load_pretrained(DsrpgoModel& model, const TensorMap& pssi, const TensorMap& psei);

}  // namespace dsrpgo::model
