#pragma once

#include <cstddef>
#include <string>

#include "dsrpgo/nn.hpp"
#include "dsrpgo/ssm.hpp"
#include "dsrpgo/tensor.hpp"

namespace dsrpgo::bimamba {

enum class Direction { forward, backward };

/// Positional reordering of a token sequence [..., L, W]: identity for
/// forward, token-order reversal for backward.
Tensor reorder(const Tensor& x, Direction direction);

/// Chunks [N, W] into [N, ceil(W / token_width), token_width] with zero
/// right-padding.
Tensor tokenize(const Tensor& x, std::size_t token_width);
/// Inverse of tokenize: [N, L, T] -> [N, width], dropping any padding.
Tensor flatten_tokens(const Tensor& tokens, std::size_t width);

struct BiMambaConfig {
    std::size_t width = 16;
    std::size_t inner = 32;
    std::size_t state = 4;
    std::size_t conv_width = 4;
    bool zero_init_output = false;
};

/// Intermediate activations of one forward pass.
struct BiMambaTrace {
    Tensor gate;             // SiLU(gate projection of x)
    Tensor branch_forward;   // SSM_f(SiLU(conv_f(proj x)))
    Tensor branch_backward;  // reversed SSM_b(SiLU(conv_b(reversed proj x)))
    Tensor fused;            // output projection of the gated sum
};

/// Bidirectional selective-scan block over token sequences [N, L, width].
/// Output = x + W_out(branch_f * g + branch_b * g + g). Directional
/// branches carry their own conv and SSM parameters.
class BiMambaBlock {
public:
    BiMambaBlock() = default;
    BiMambaBlock(const BiMambaConfig& config, Rng& rng);

    Tensor forward(const Tensor& x, BiMambaTrace* trace = nullptr) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;

    const BiMambaConfig& config() const { return config_; }

    nn::Linear in_proj;
    nn::Linear gate_proj;
    nn::Linear out_proj;
    Tensor conv_forward;  // [inner, conv_width]
    Tensor conv_forward_bias;
    Tensor conv_backward;
    Tensor conv_backward_bias;
    ssm::SelectiveSsm ssm_forward;
    ssm::SelectiveSsm ssm_backward;

private:
    Tensor directional(const Tensor& projected, const Tensor& kernel, const Tensor& bias,
                       const ssm::SelectiveSsm& scan) const;

    BiMambaConfig config_;
};

}  // namespace dsrpgo::bimamba
