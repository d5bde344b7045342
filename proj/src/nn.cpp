#include "dsrpgo/nn.hpp"

#include <cmath>

#include "dsrpgo/errors.hpp"

namespace dsrpgo::nn {

Tensor apply_dropout(const Tensor& x, const Context& ctx) {
    if (!ctx.training || ctx.dropout == 0.0) return x;
    if (ctx.rng == nullptr) throw ValidationError("dropout requested without an Rng in the forward context");
    return dropout(x, ctx.dropout, *ctx.rng, true);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = Tensor::uniform({in, out}, -bound, bound, rng, true);
    if (bias) this->bias = Tensor::uniform({out}, -bound, bound, rng, true);
}

Tensor Linear::forward(const Tensor& x) const {
    if (x.shape().back() != in_features()) {
        throw ShapeError("Linear: input width " + std::to_string(x.shape().back()) + " does not match " +
                         std::to_string(in_features()));
    }
    Tensor y;
    if (x.rank() == 1) {
        y = reshape(matmul(reshape(x, {1, x.dim(0)}), weight), {out_features()});
    } else {
        y = matmul(x, weight);
    }
    return bias.defined() ? add(y, bias) : y;
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

void Linear::zero() {
    for (auto& v : weight.mutable_data()) v = 0.0;
    if (bias.defined()) {
        for (auto& v : bias.mutable_data()) v = 0.0;
    }
}

LayerNorm::LayerNorm(std::size_t width, double eps)
    : gamma(Tensor::full({width}, 1.0, true)), beta(Tensor::zeros({width}, true)), eps(eps) {}

Tensor LayerNorm::forward(const Tensor& x) const { return add(mul(layer_norm(x, -1, eps), gamma), beta); }

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

Tensor Mlp::forward(const Tensor& x, const Context& ctx) const {
    return fc2.forward(apply_dropout(silu(fc1.forward(x)), ctx));
}

void Mlp::collect(const std::string& prefix, ParamList& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

std::size_t count_parameters(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

}  // namespace dsrpgo::nn
