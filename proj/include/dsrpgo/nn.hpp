#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dsrpgo/rng.hpp"
#include "dsrpgo/tensor.hpp"

namespace dsrpgo::nn {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

/// Per-call forward state: whether dropout is active and where its
/// randomness comes from.
struct Context {
    bool training = false;
    double dropout = 0.0;
    Rng* rng = nullptr;
};

Tensor apply_dropout(const Tensor& x, const Context& ctx);

/// y = x W + b over the last axis; W is [in, out].
class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true);

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
    void zero();

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }

    Tensor weight;
    Tensor bias;  // undefined when constructed without bias
};

/// Layer normalization over the last axis with learned scale and shift.
class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t width, double eps = 1e-5);

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;

    Tensor gamma;
    Tensor beta;
    double eps = 1e-5;
};

/// Two-layer perceptron: Linear -> SiLU -> dropout -> Linear.
class Mlp {
public:
    Mlp() = default;
    Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);

    Tensor forward(const Tensor& x, const Context& ctx) const;
    void collect(const std::string& prefix, ParamList& out) const;

    Linear fc1;
    Linear fc2;
};

std::size_t count_parameters(const ParamList& params);

}  // namespace dsrpgo::nn
