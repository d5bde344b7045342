#include "dsrpgo/bimamba.hpp"

#include <cmath>

#include "dsrpgo/errors.hpp"

namespace dsrpgo::bimamba {

Tensor reorder(const Tensor& x, Direction direction) {
    if (x.rank() < 2) throw ShapeError("reorder: expected a token sequence [..., L, W], got " + shape_str(x.shape()));
    return direction == Direction::forward ? x : reverse(x, -2);
}

Tensor tokenize(const Tensor& x, std::size_t token_width) {
    if (x.rank() != 2) throw ShapeError("tokenize: expected [N, W], got " + shape_str(x.shape()));
    if (token_width == 0) throw ValidationError("tokenize: token width must be positive");
    const std::size_t n = x.dim(0);
    const std::size_t w = x.dim(1);
    const std::size_t tokens = (w + token_width - 1) / token_width;
    const std::size_t padded = tokens * token_width;
    Tensor flat = x;
    if (padded != w) flat = concat({x, Tensor::zeros({n, padded - w})}, 1);
    return reshape(flat, {n, tokens, token_width});
}

Tensor flatten_tokens(const Tensor& tokens, std::size_t width) {
    if (tokens.rank() != 3) throw ShapeError("flatten_tokens: expected [N, L, T], got " + shape_str(tokens.shape()));
    const std::size_t n = tokens.dim(0);
    const std::size_t total = tokens.dim(1) * tokens.dim(2);
    if (width > total) throw ShapeError("flatten_tokens: width exceeds token payload");
    Tensor flat = reshape(tokens, {n, total});
    return width == total ? flat : slice(flat, 1, 0, width);
}

BiMambaBlock::BiMambaBlock(const BiMambaConfig& config, Rng& rng)
    : in_proj(config.width, config.inner, rng),
      gate_proj(config.width, config.inner, rng),
      out_proj(config.inner, config.width, rng),
      config_(config) {
    if (config.conv_width < 1) throw ValidationError("BiMamba: conv kernel width must be >= 1");
    const double bound = 1.0 / std::sqrt(static_cast<double>(config.conv_width));
    conv_forward = Tensor::uniform({config.inner, config.conv_width}, -bound, bound, rng, true);
    conv_forward_bias = Tensor::zeros({config.inner}, true);
    conv_backward = Tensor::uniform({config.inner, config.conv_width}, -bound, bound, rng, true);
    conv_backward_bias = Tensor::zeros({config.inner}, true);
    ssm_forward = ssm::SelectiveSsm(config.inner, config.state, rng);
    ssm_backward = ssm::SelectiveSsm(config.inner, config.state, rng);
    if (config.zero_init_output) out_proj.zero();
}

Tensor BiMambaBlock::directional(const Tensor& projected, const Tensor& kernel, const Tensor& bias,
                                 const ssm::SelectiveSsm& scan) const {
    return scan.forward(silu(add(causal_conv1d(projected, kernel), bias)));
}

Tensor BiMambaBlock::forward(const Tensor& x, BiMambaTrace* trace) const {
    if (x.rank() != 3 || x.dim(2) != config_.width) {
        throw ShapeError("BiMamba: expected [N, L, " + std::to_string(config_.width) + "], got " +
                         shape_str(x.shape()));
    }
    const Tensor projected = in_proj.forward(x);
    const Tensor gate = silu(gate_proj.forward(x));
    const Tensor branch_f =
        reorder(directional(reorder(projected, Direction::forward), conv_forward, conv_forward_bias, ssm_forward),
                Direction::forward);
    const Tensor branch_b =
        reorder(directional(reorder(projected, Direction::backward), conv_backward, conv_backward_bias, ssm_backward),
                Direction::backward);
    const Tensor mixed = add(add(mul(branch_f, gate), mul(branch_b, gate)), gate);
    const Tensor fused = out_proj.forward(mixed);
    if (trace != nullptr) {
        trace->gate = gate;
        trace->branch_forward = branch_f;
        trace->branch_backward = branch_b;
        trace->fused = fused;
    }
    return add(x, fused);
}

void BiMambaBlock::collect(const std::string& prefix, nn::ParamList& out) const {
    in_proj.collect(prefix + ".in_proj", out);
    gate_proj.collect(prefix + ".gate_proj", out);
    out.push_back({prefix + ".conv_f", conv_forward});
    out.push_back({prefix + ".conv_f_bias", conv_forward_bias});
    out.push_back({prefix + ".conv_b", conv_backward});
    out.push_back({prefix + ".conv_b_bias", conv_backward_bias});
    ssm_forward.collect(prefix + ".ssm_f", out);
    ssm_backward.collect(prefix + ".ssm_b", out);
    out_proj.collect(prefix + ".out_proj", out);
}

}  // namespace dsrpgo::bimamba
