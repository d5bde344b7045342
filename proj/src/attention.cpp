#include "dsrpgo/attention.hpp"

#include <cmath>

#include "dsrpgo/errors.hpp"

namespace dsrpgo::attention {

namespace {

// [N, L, H * Dh] -> [N * H, L, Dh]
Tensor split_heads(const Tensor& x, std::size_t heads) {
    const std::size_t n = x.dim(0);
    const std::size_t l = x.dim(1);
    const std::size_t dh = x.dim(2) / heads;
    return reshape(permute(reshape(x, {n, l, heads, dh}), {0, 2, 1, 3}), {n * heads, l, dh});
}

// [N * H, L, Dh] -> [N, L, H * Dh]
Tensor merge_heads(const Tensor& x, std::size_t n, std::size_t heads) {
    const std::size_t l = x.dim(1);
    const std::size_t dh = x.dim(2);
    return reshape(permute(reshape(x, {n, heads, l, dh}), {0, 2, 1, 3}), {n, l, heads * dh});
}

}  // namespace

MultiHeadAttention::MultiHeadAttention(const MhaConfig& config, Rng& rng)
    : query(config.width, config.width, rng),
      key(config.width, config.width, rng),
      value(config.width, config.width, rng),
      output(config.width, config.width, rng),
      config_(config) {
    if (config.heads == 0 || config.width % config.heads != 0) {
        throw ValidationError("attention: width " + std::to_string(config.width) + " is not divisible by " +
                              std::to_string(config.heads) + " heads");
    }
}

Tensor MultiHeadAttention::forward(const Tensor& queries_from, const Tensor& keys_values_from,
                                   MhaDetail* detail) const {
    const std::size_t w = config_.width;
    if (queries_from.rank() != 3 || keys_values_from.rank() != 3 || queries_from.dim(2) != w ||
        keys_values_from.dim(2) != w) {
        throw ShapeError("attention: expected [N, L, " + std::to_string(w) + "] inputs, got " +
                         shape_str(queries_from.shape()) + " and " + shape_str(keys_values_from.shape()));
    }
    if (queries_from.dim(0) != keys_values_from.dim(0)) {
        throw ShapeError("attention: batch sizes differ, " + shape_str(queries_from.shape()) + " vs " +
                         shape_str(keys_values_from.shape()));
    }
    const std::size_t n = queries_from.dim(0);
    const std::size_t h = config_.heads;
    const Tensor q = split_heads(query.forward(queries_from), h);
    const Tensor k = split_heads(key.forward(keys_values_from), h);
    const Tensor v = split_heads(value.forward(keys_values_from), h);
    Tensor scores = matmul(q, transpose(k, -2, -1));
    if (config_.scaled) scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(config_.head_width())));
    const Tensor weights = softmax(scores, -1);
    const Tensor heads = merge_heads(matmul(weights, v), n, h);
    if (detail != nullptr) {
        detail->weights = reshape(weights, {n, h, queries_from.dim(1), keys_values_from.dim(1)});
        detail->heads = heads;
    }
    return output.forward(heads);
}

void MultiHeadAttention::collect(const std::string& prefix, nn::ParamList& out) const {
    query.collect(prefix + ".q", out);
    key.collect(prefix + ".k", out);
    value.collect(prefix + ".v", out);
    output.collect(prefix + ".out", out);
}

SelfAttentionBlock::SelfAttentionBlock(const MhaConfig& config, Rng& rng)
    : msa(config, rng),
      attn_linear(config.width, config.width, rng),
      inner_norm(config.width),
      mix_linear(config.width, config.width, rng),
      outer_norm(config.width) {}

Tensor SelfAttentionBlock::forward(const Tensor& x, const nn::Context& ctx) const {
    const Tensor attended = nn::apply_dropout(attn_linear.forward(msa.forward(x, x)), ctx);
    const Tensor inner = inner_norm.forward(add(x, attended));
    const Tensor mixed = nn::apply_dropout(mix_linear.forward(inner), ctx);
    return outer_norm.forward(add(inner, mixed));
}

void SelfAttentionBlock::collect(const std::string& prefix, nn::ParamList& out) const {
    msa.collect(prefix + ".msa", out);
    attn_linear.collect(prefix + ".attn_linear", out);
    inner_norm.collect(prefix + ".inner_norm", out);
    mix_linear.collect(prefix + ".mix_linear", out);
    outer_norm.collect(prefix + ".outer_norm", out);
}

SelfAttentionStack::SelfAttentionStack(const MhaConfig& config, std::size_t depth, Rng& rng) {
    blocks.reserve(depth);
    for (std::size_t i = 0; i < depth; ++i) blocks.emplace_back(config, rng);
}

Tensor SelfAttentionStack::forward(const Tensor& x, const nn::Context& ctx) const {
    Tensor y = x;
    for (const auto& block : blocks) y = block.forward(y, ctx);
    return y;
}

void SelfAttentionStack::collect(const std::string& prefix, nn::ParamList& out) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + "." + std::to_string(i), out);
}

std::pair<Tensor, Tensor> binm(const Tensor& branch1, const Tensor& branch2, const MultiHeadAttention& cross_1to2,
                               const MultiHeadAttention& cross_2to1) {
    Tensor first = add(branch1, cross_1to2.forward(branch1, branch2));
    Tensor second = add(branch2, cross_2to1.forward(branch2, branch1));
    return {std::move(first), std::move(second)};
}

Binm::Binm(const MhaConfig& config, Rng& rng) : cross_1to2(config, rng), cross_2to1(config, rng) {}

std::pair<Tensor, Tensor> Binm::forward(const Tensor& branch1, const Tensor& branch2) const {
    return binm(branch1, branch2, cross_1to2, cross_2to1);
}

void Binm::collect(const std::string& prefix, nn::ParamList& out) const {
    cross_1to2.collect(prefix + ".cross_1to2", out);
    cross_2to1.collect(prefix + ".cross_2to1", out);
}

}  // namespace dsrpgo::attention
