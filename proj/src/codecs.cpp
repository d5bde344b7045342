#include "dsrpgo/codecs.hpp"

#include <algorithm>
#include <cmath>

#include "dsrpgo/errors.hpp"

namespace dsrpgo::codecs {

namespace {

bimamba::BiMambaConfig mamba_config(const CodecConfig& c) {
    bimamba::BiMambaConfig m;
    m.width = c.token;
    m.inner = c.mamba_inner;
    m.state = c.mamba_state;
    return m;
}

attention::MhaConfig attn_config(const CodecConfig& c) { return {c.token, c.attn_heads, true}; }

void check_width(const Tensor& x, std::size_t width, const char* who) {
    if (x.rank() != 2 || x.dim(1) != width) {
        throw ShapeError(std::string(who) + ": expected [N, " + std::to_string(width) + "], got " +
                         shape_str(x.shape()));
    }
}

}  // namespace

Tensor bce_loss(const Tensor& recon, const Tensor& target) {
    if (recon.shape() != target.shape() || recon.rank() != 2) {
        throw ShapeError("bce_loss: reconstruction " + shape_str(recon.shape()) + " vs target " +
                         shape_str(target.shape()));
    }
    const double n = static_cast<double>(recon.dim(0));
    const auto p = recon.data();
    const auto y = target.data();
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
        total -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
    }
    return make_result("bce_loss", Shape{}, {total / n}, {recon, target}, [n](detail::Node& self) {
        auto& np = *self.inputs[0];
        if (!np.requires_grad) return;
        const auto& y = self.inputs[1]->data;
        auto& g = np.grad_buffer();
        const double scale = self.grad[0] / n;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double q = np.data[i];
            if (q < kProbClamp || q > 1.0 - kProbClamp) continue;  // clamped: flat
            g[i] += scale * ((1.0 - y[i]) / (1.0 - q) - y[i] / q);
        }
    });
}

// --- PSSI -------------------------------------------------------------------

PssiSourceEncoder::PssiSourceEncoder(std::size_t input_width, const CodecConfig& config, Rng& rng)
    : mlp(input_width, config.latent, config.latent, rng),
      mamba(mamba_config(config), rng),
      token_proj(config.token, config.latent, rng),
      norm(config.latent),
      token_(config.token) {}

Tensor PssiSourceEncoder::forward(const Tensor& x, const nn::Context& ctx) const {
    check_width(x, input_width(), "PSSI encoder");
    const Tensor tokens = bimamba::tokenize(mlp.forward(x, ctx), token_);
    const Tensor mixed = norm.forward(token_proj.forward(mamba.forward(tokens)));
    return mean(mixed, 1);
}

void PssiSourceEncoder::collect(const std::string& prefix, nn::ParamList& out) const {
    mlp.collect(prefix + ".mlp", out);
    mamba.collect(prefix + ".mamba", out);
    token_proj.collect(prefix + ".token_proj", out);
    norm.collect(prefix + ".norm", out);
}

PssiSourceDecoder::PssiSourceDecoder(std::size_t output_width, const CodecConfig& config, Rng& rng)
    : lift(config.latent, config.latent, rng),
      mamba(mamba_config(config), rng),
      mix(config.latent, config.latent, rng),
      norm(config.latent),
      head(config.latent, output_width, rng),
      token_(config.token),
      latent_(config.latent) {}

Tensor PssiSourceDecoder::forward(const Tensor& latent, const nn::Context& ctx) const {
    check_width(latent, latent_, "PSSI decoder");
    const Tensor tokens = bimamba::tokenize(lift.forward(latent), token_);
    const Tensor flat = bimamba::flatten_tokens(mamba.forward(tokens), latent_);
    const Tensor hidden = nn::apply_dropout(norm.forward(mix.forward(flat)), ctx);
    return sigmoid(head.forward(hidden));
}

void PssiSourceDecoder::collect(const std::string& prefix, nn::ParamList& out) const {
    lift.collect(prefix + ".lift", out);
    mamba.collect(prefix + ".mamba", out);
    mix.collect(prefix + ".mix", out);
    norm.collect(prefix + ".norm", out);
    head.collect(prefix + ".head", out);
}

PssiCodec::PssiCodec(const std::vector<std::size_t>& source_widths, const CodecConfig& config, Rng& rng) {
    for (std::size_t w : source_widths) encoders.emplace_back(w, config, rng);
    for (std::size_t w : source_widths) decoders.emplace_back(w, config, rng);
}

std::vector<Tensor> PssiCodec::encode(const std::vector<Tensor>& sources, const nn::Context& ctx) const {
    if (sources.size() != encoders.size()) {
        throw ShapeError("PSSI: expected " + std::to_string(encoders.size()) + " sources, got " +
                         std::to_string(sources.size()));
    }
    std::vector<Tensor> latents;
    for (std::size_t k = 0; k < sources.size(); ++k) latents.push_back(encoders[k].forward(sources[k], ctx));
    return latents;
}

std::vector<Tensor> PssiCodec::decode(const std::vector<Tensor>& latents, const nn::Context& ctx) const {
    std::vector<Tensor> out;
    for (std::size_t k = 0; k < latents.size(); ++k) out.push_back(decoders.at(k).forward(latents[k], ctx));
    return out;
}

std::vector<Tensor> PssiCodec::reconstruct(const std::vector<Tensor>& sources, const nn::Context& ctx) const {
    return decode(encode(sources, ctx), ctx);
}

Tensor PssiCodec::loss(const std::vector<Tensor>& sources, const nn::Context& ctx) const {
    const auto recon = reconstruct(sources, ctx);
    Tensor total = bce_loss(recon[0], sources[0]);
    for (std::size_t k = 1; k < recon.size(); ++k) total = add(total, bce_loss(recon[k], sources[k]));
    return total;
}

void PssiCodec::collect(nn::ParamList& out) const {
    for (std::size_t k = 0; k < encoders.size(); ++k) encoders[k].collect("pssi.enc." + std::to_string(k), out);
    for (std::size_t k = 0; k < decoders.size(); ++k) decoders[k].collect("pssi.dec." + std::to_string(k), out);
}

// --- PSeI -------------------------------------------------------------------

PseiEncoder::PseiEncoder(std::size_t input_width, const CodecConfig& config, Rng& rng)
    : mlp(input_width, config.latent, config.latent, rng),
      blocks(attn_config(config), config.attn_blocks, rng),
      token_(config.token),
      latent_(config.latent) {}

Tensor PseiEncoder::forward(const Tensor& x, const nn::Context& ctx) const {
    check_width(x, input_width(), "PSeI encoder");
    const Tensor tokens = bimamba::tokenize(mlp.forward(x, ctx), token_);
    return bimamba::flatten_tokens(blocks.forward(tokens, ctx), latent_);
}

void PseiEncoder::collect(const std::string& prefix, nn::ParamList& out) const {
    mlp.collect(prefix + ".mlp", out);
    blocks.collect(prefix + ".attn", out);
}

PseiDecoder::PseiDecoder(std::size_t output_width, const CodecConfig& config, Rng& rng)
    : blocks(attn_config(config), config.attn_blocks, rng),
      mlp(config.latent, config.latent, output_width, rng),
      token_(config.token),
      latent_(config.latent) {}

Tensor PseiDecoder::forward(const Tensor& latent, const nn::Context& ctx) const {
    check_width(latent, latent_, "PSeI decoder");
    const Tensor tokens = bimamba::tokenize(latent, token_);
    const Tensor flat = bimamba::flatten_tokens(blocks.forward(tokens, ctx), latent_);
    return sigmoid(mlp.forward(flat, ctx));
}

void PseiDecoder::collect(const std::string& prefix, nn::ParamList& out) const {
    blocks.collect(prefix + ".attn", out);
    mlp.collect(prefix + ".mlp", out);
}

PseiCodec::PseiCodec(std::size_t embed_width, const CodecConfig& config, Rng& rng)
    : encoder(embed_width, config, rng), decoder(embed_width, config, rng) {}

Tensor PseiCodec::loss(const Tensor& x, const nn::Context& ctx) const { return bce_loss(reconstruct(x, ctx), x); }

void PseiCodec::collect(nn::ParamList& out) const {
    encoder.collect("psei.enc", out);
    decoder.collect("psei.dec", out);
}

}  // namespace dsrpgo::codecs
