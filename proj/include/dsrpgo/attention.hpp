#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dsrpgo/nn.hpp"
#include "dsrpgo/tensor.hpp"

namespace dsrpgo::attention {

struct MhaConfig {
    std::size_t width = 16;
    std::size_t heads = 2;
    // When false the 1/sqrt(head width) factor is dropped from the scores.
    bool scaled = true;

    std::size_t head_width() const { return width / heads; }
};

/// Per-call internals, exposed for inspection.
struct MhaDetail {
    Tensor weights;  // [N, heads, Lq, Lk], rows sum to one
    Tensor heads;    // [N, Lq, width] concatenated head outputs before the output map
};

/// Multi-head attention with queries from one sequence and keys/values from
/// another; self-attention passes the same sequence twice. Heads are
/// contiguous slices of the width axis.
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(const MhaConfig& config, Rng& rng);

    /// queries_from: [N, Lq, width], keys_values_from: [N, Lk, width] -> [N, Lq, width]
    Tensor forward(const Tensor& queries_from, const Tensor& keys_values_from, MhaDetail* detail = nullptr) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;

    const MhaConfig& config() const { return config_; }

    nn::Linear query;
    nn::Linear key;
    nn::Linear value;
    nn::Linear output;

private:
    MhaConfig config_;
};

/// out = N2(inner + L2(inner)), inner = N1(x + L1(MSA(x))).
class SelfAttentionBlock {
public:
    SelfAttentionBlock() = default;
    SelfAttentionBlock(const MhaConfig& config, Rng& rng);

    Tensor forward(const Tensor& x, const nn::Context& ctx) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;

    MultiHeadAttention msa;
    nn::Linear attn_linear;
    nn::LayerNorm inner_norm;
    nn::Linear mix_linear;
    nn::LayerNorm outer_norm;
};

class SelfAttentionStack {
public:
    SelfAttentionStack() = default;
    SelfAttentionStack(const MhaConfig& config, std::size_t depth, Rng& rng);

    Tensor forward(const Tensor& x, const nn::Context& ctx) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;

    std::vector<SelfAttentionBlock> blocks;
};

/// Bidirectional interaction: each branch queries the other.
///   first  = branch1 + cross_1to2(Q: branch1, K/V: branch2)
///   second = branch2 + cross_2to1(Q: branch2, K/V: branch1)
std::pair<Tensor, Tensor> binm(const Tensor& branch1, const Tensor& branch2, const MultiHeadAttention& cross_1to2,
                               const MultiHeadAttention& cross_2to1);

class Binm {
public:
    Binm() = default;
    Binm(const MhaConfig& config, Rng& rng);

    std::pair<Tensor, Tensor> forward(const Tensor& branch1, const Tensor& branch2) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;

    MultiHeadAttention cross_1to2;
    MultiHeadAttention cross_2to1;
};

}  // namespace dsrpgo::attention
