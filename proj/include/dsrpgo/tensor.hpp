#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dsrpgo/rng.hpp"

namespace dsrpgo {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One vertex of the dynamic computation graph. A Tensor is a shared handle
// to a Node; `inputs` keeps producers alive for as long as a consumer is
// reachable, so a loss tensor owns its whole graph.
struct Node {
    std::string op = "leaf";
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's `grad` and accumulates into the inputs' grads.
    std::function<void(Node& self)> backward;

    // Returns `grad`, allocating it as zeros on first use.
    std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);
    static Tensor normal(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Direct write access. Intended for parameters and test fixtures; mutating
    // a tensor that already feeds a recorded graph invalidates that graph.
    std::span<double> mutable_data();
    double item() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool value);
    bool is_leaf() const;
    const std::string& op() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    // Copy of the values with no graph history.
    Tensor detach() const;

    detail::Node* node() const noexcept { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }
    static Tensor from_node(std::shared_ptr<detail::Node> node);

private:
    std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Builds an op result. The node is connected to `inputs` only when grad mode
/// is on and some input requires grad; otherwise `backward` is dropped.
/// Fused operations outside this file use this to register themselves.
Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward);

// ---------------------------------------------------------------------------
// Primitive operations. Binary elementwise ops broadcast numpy-style.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // hadamard
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);

Tensor softmax(const Tensor& x, int axis = -1);
// Normalization only; learned scale and shift are applied by nn::LayerNorm.
Tensor layer_norm(const Tensor& x, int axis = -1, double eps = 1e-5);

// Depthwise causal convolution with left zero padding.
// x: [..., L, C], kernel: [C, w]; y[t, c] = sum_k kernel[c, k] * x[t - k, c].
Tensor causal_conv1d(const Tensor& x, const Tensor& kernel);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& x, int axis_a = -2, int axis_b = -1);
Tensor reverse(const Tensor& x, int axis);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);

// Inverted dropout: kept entries are scaled by 1/(1-rate). Identity when
// `training` is false or rate is 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Name-driven dispatch over the primitive set, used by the gradient-check
// command to enumerate operations uniformly.

enum class OpKind {
    matmul, add, sub, hadamard, scalar_mul, exp, log, sigmoid, silu, softplus, softmax,
    layer_norm, causal_conv1d, concat, slice, reshape, transpose, reverse, sum, mean, dropout,
};

struct OpAttrs {
    int axis = -1;
    double scalar = 1.0;
    double eps = 1e-5;
    std::size_t begin = 0;
    std::size_t end = 0;
    Shape shape;
    double rate = 0.0;
    bool training = true;
    Rng* rng = nullptr;
};

Tensor primitive_forward(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});
const char* op_name(OpKind kind);

// ---------------------------------------------------------------------------
// Reverse mode.

/// Topologically ordered view of the graph reachable from a root tensor.
/// Inputs always precede their consumers.
class Graph {
public:
    static Graph trace(const Tensor& root);

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<detail::Node*>& nodes() const noexcept { return nodes_; }
    bool contains(const Tensor& t) const;

private:
    std::vector<detail::Node*> nodes_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// Throws ShapeError when `loss` is not a single element.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Lower bound on the relative-error denominator so that components whose
    // true derivative is ~0 are judged on absolute error instead.
    double denominator_floor = 1e-5;
    // When nonzero, only this many randomly chosen elements are checked.
    std::size_t sample = 0;
    std::uint64_t seed = 1234;
};

struct GradCheckEntry {
    std::size_t input = 0;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    bool passed = true;
};

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients of `f` at `inputs` against central
/// differences. Non-scalar outputs are reduced by a fixed random projection.
GradCheckReport grad_check(const TensorFn& f, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options = {});

/// Same check for a closure over existing tensors (typically parameters); the
/// listed tensors are perturbed in place and restored afterwards.
GradCheckReport grad_check_closure(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                   const GradCheckOptions& options = {});

}  // namespace dsrpgo
