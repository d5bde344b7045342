#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dsrpgo/attention.hpp"
#include "dsrpgo/bimamba.hpp"
#include "dsrpgo/nn.hpp"
#include "dsrpgo/tensor.hpp"

namespace dsrpgo::codecs {

/// Reconstructions are clamped to [kProbClamp, 1 - kProbClamp] before logs.
inline constexpr double kProbClamp = 1e-7;

struct CodecConfig {
    std::size_t latent = 64;  // D
    std::size_t token = 16;   // token width for tokenization
    std::size_t mamba_inner = 32;
    std::size_t mamba_state = 4;
    std::size_t attn_blocks = 6;
    std::size_t attn_heads = 2;
};

/// Sample-wise binary cross-entropy: (1/N) sum_i sum_j BCE(recon_ij, target_ij)
/// for recon, target of shape [N, H]. Targets may be soft (in [0, 1]) and do
/// not receive gradients.
Tensor bce_loss(const Tensor& recon, const Tensor& target);

/// Spatial-source encoder: MLP to width D, tokenize, BiMamba, per-token
/// Linear + Norm, mean over tokens. [N, H] -> [N, D].
class PssiSourceEncoder {
public:
    PssiSourceEncoder() = default;
    PssiSourceEncoder(std::size_t input_width, const CodecConfig& config, Rng& rng);

    Tensor forward(const Tensor& x, const nn::Context& ctx) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;
    std::size_t input_width() const { return mlp.fc1.in_features(); }

    nn::Mlp mlp;
    bimamba::BiMambaBlock mamba;
    nn::Linear token_proj;
    nn::LayerNorm norm;

private:
    std::size_t token_ = 16;
};

/// [N, D] -> [N, H] in (0, 1): Linear, tokenize, BiMamba, flatten,
/// Linear + Norm, Linear head, sigmoid.
class PssiSourceDecoder {
public:
    PssiSourceDecoder() = default;
    PssiSourceDecoder(std::size_t output_width, const CodecConfig& config, Rng& rng);

    Tensor forward(const Tensor& latent, const nn::Context& ctx) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;

    nn::Linear lift;
    bimamba::BiMambaBlock mamba;
    nn::Linear mix;
    nn::LayerNorm norm;
    nn::Linear head;

private:
    std::size_t token_ = 16;
    std::size_t latent_ = 64;
};

/// Encoder-decoder over K spatial sources, one latent per source.
class PssiCodec {
public:
    PssiCodec() = default;
    PssiCodec(const std::vector<std::size_t>& source_widths, const CodecConfig& config, Rng& rng);

    std::vector<Tensor> encode(const std::vector<Tensor>& sources, const nn::Context& ctx) const;
    std::vector<Tensor> decode(const std::vector<Tensor>& latents, const nn::Context& ctx) const;
    std::vector<Tensor> reconstruct(const std::vector<Tensor>& sources, const nn::Context& ctx) const;
    /// Sum over sources of bce_loss.
    Tensor loss(const std::vector<Tensor>& sources, const nn::Context& ctx) const;

    void collect(nn::ParamList& out) const;  // names under "pssi."

    std::vector<PssiSourceEncoder> encoders;
    std::vector<PssiSourceDecoder> decoders;
};

/// Sequence encoder: MLP to width D, tokenize, self-attention stack, flatten.
/// [N, H] -> [N, D].
class PseiEncoder {
public:
    PseiEncoder() = default;
    PseiEncoder(std::size_t input_width, const CodecConfig& config, Rng& rng);

    Tensor forward(const Tensor& x, const nn::Context& ctx) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;
    std::size_t input_width() const { return mlp.fc1.in_features(); }

    nn::Mlp mlp;
    attention::SelfAttentionStack blocks;

private:
    std::size_t token_ = 16;
    std::size_t latent_ = 64;
};

/// [N, D] -> [N, H] in (0, 1): tokenize, self-attention stack, flatten, MLP, sigmoid.
class PseiDecoder {
public:
    PseiDecoder() = default;
    PseiDecoder(std::size_t output_width, const CodecConfig& config, Rng& rng);

    Tensor forward(const Tensor& latent, const nn::Context& ctx) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;

    attention::SelfAttentionStack blocks;
    nn::Mlp mlp;

private:
    std::size_t token_ = 16;
    std::size_t latent_ = 64;
};

class PseiCodec {
public:
    PseiCodec() = default;
    PseiCodec(std::size_t embed_width, const CodecConfig& config, Rng& rng);

    Tensor encode(const Tensor& x, const nn::Context& ctx) const { return encoder.forward(x, ctx); }
    Tensor decode(const Tensor& z, const nn::Context& ctx) const { return decoder.forward(z, ctx); }
    Tensor reconstruct(const Tensor& x, const nn::Context& ctx) const { return decode(encode(x, ctx), ctx); }
    Tensor loss(const Tensor& x, const nn::Context& ctx) const;

    void collect(nn::ParamList& out) const;  // names under "psei."

    PseiEncoder encoder;
    PseiDecoder decoder;
};

}  // namespace dsrpgo::codecs
