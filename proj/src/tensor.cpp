#include "dsrpgo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "dsrpgo/errors.hpp"

namespace dsrpgo {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t normalize_axis(const char* op, int axis, std::size_t rank) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        std::ostringstream msg;
        msg << op << ": axis " << axis << " out of range for rank " << rank;
        throw ShapeError(msg.str());
    }
    return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// --- broadcasting --------------------------------------------------------

struct Broadcast {
    Shape out;
    std::vector<std::size_t> stride_a;
    std::vector<std::size_t> stride_b;
    bool same = false;
};

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
    Broadcast p;
    if (a == b) {
        p.out = a;
        p.same = true;
        return p;
    }
    const std::size_t rank = std::max(a.size(), b.size());
    p.out.assign(rank, 1);
    p.stride_a.assign(rank, 0);
    p.stride_b.assign(rank, 0);
    const auto sa = contiguous_strides(a);
    const auto sb = contiguous_strides(b);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t oa = rank - a.size();
        const std::size_t ob = rank - b.size();
        const std::size_t da = i >= oa ? a[i - oa] : 1;
        const std::size_t db = i >= ob ? b[i - ob] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                             shape_str(b) + " (dimension " + std::to_string(i) + ": " +
                             std::to_string(da) + " vs " + std::to_string(db) + ")");
        }
        p.out[i] = std::max(da, db);
        if (i >= oa && da != 1) p.stride_a[i] = sa[i - oa];
        if (i >= ob && db != 1) p.stride_b[i] = sb[i - ob];
    }
    return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
    const std::size_t total = shape_numel(p.out);
    if (p.same) {
        for (std::size_t i = 0; i < total; ++i) f(i, i, i);
        return;
    }
    const std::size_t rank = p.out.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t o = 0; o < total; ++o) {
        f(o, ia, ib);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += p.stride_a[d];
            ib += p.stride_b[d];
            if (idx[d] < p.out[d]) break;
            ia -= p.stride_a[d] * idx[d];
            ib -= p.stride_b[d] * idx[d];
            idx[d] = 0;
        }
    }
}

// Elementwise binary op. `da`/`db` return the local partial derivative given
// (a, b, y).
template <class Fwd, class Da, class Db>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
    auto plan = std::make_shared<Broadcast>(plan_broadcast(name, a.shape(), b.shape()));
    std::vector<double> out(shape_numel(plan->out));
    const auto ad = a.data();
    const auto bd = b.data();
    for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(ad[i], bd[j]); });
    Shape shape = plan->out;
    return make_result(name, std::move(shape), std::move(out), {a, b}, [plan, da, db](detail::Node& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        const bool ga = na.requires_grad;
        const bool gb = nb.requires_grad;
        double* gad = ga ? na.grad_buffer().data() : nullptr;
        double* gbd = gb ? nb.grad_buffer().data() : nullptr;
        const auto& g = self.grad;
        for_each_broadcast(*plan, [&](std::size_t o, std::size_t i, std::size_t j) {
            const double x = na.data[i];
            const double y = nb.data[j];
            if (ga) gad[i] += g[o] * da(x, y, self.data[o]);
            if (gb) gbd[j] += g[o] * db(x, y, self.data[o]);
        });
    });
}

template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
    return make_result(name, x.shape(), std::move(out), {x}, [deriv](detail::Node& self) {
        auto& in = *self.inputs[0];
        auto& gi = in.grad_buffer();
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i] * deriv(in.data[i], self.data[i]);
    });
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::vector<double>& detail::Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("Tensor: shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values but " + std::to_string(data.size()) + " were given");
    }
    for (auto d : shape) {
        if (d == 0) throw ShapeError("Tensor: zero-sized dimension in " + shape_str(shape));
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor(Shape{}, {value}, requires_grad); }

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::normal(Shape shape, double stddev, Rng& rng, bool requires_grad) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = stddev * rng.normal();
    return Tensor(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const {
    if (!node_) throw ShapeError("Tensor: use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("Tensor::dim: axis out of range for " + shape_str(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
    shape();
    return node_->data;
}

std::span<double> Tensor::mutable_data() {
    shape();
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("Tensor::item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
    shape();
    node_->requires_grad = value;
    return *this;
}

bool Tensor::is_leaf() const { return node_ && node_->inputs.empty(); }

const std::string& Tensor::op() const {
    shape();
    return node_->op;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw Error("grad", "Tensor::grad: no gradient has been accumulated");
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    shape();
    return node_->grad_buffer();
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(std::string op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward) {
    auto node = std::make_shared<detail::Node>();
    node->op = std::move(op);
    node->shape = std::move(shape);
    node->data = std::move(data);
    const bool track =
        g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (track) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor::from_node(std::move(node));
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
    }
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t k = sa.back();
    const std::size_t kb = sb[sb.size() - 2];
    const std::size_t n = sb.back();
    if (k != kb) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(sa) + " x " + shape_str(sb) + " (" +
                         std::to_string(k) + " vs " + std::to_string(kb) + ")");
    }
    const bool shared_b = sb.size() == 2;
    if (!shared_b && !std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2)) {
        throw ShapeError("matmul: batch dimensions differ, " + shape_str(sa) + " x " + shape_str(sb));
    }
    const std::size_t batch = shape_numel(sa) / (m * k);
    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);

    std::vector<double> out(batch * m * n, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t bt = 0; bt < batch; ++bt) {
        const double* Ab = A + bt * m * k;
        const double* Bb = shared_b ? B : B + bt * k * n;
        double* Cb = out.data() + bt * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            double* crow = Cb + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = Ab[i * k + p];
                const double* brow = Bb + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }

    return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                       [batch, m, k, n, shared_b](detail::Node& self) {
                           auto& na = *self.inputs[0];
                           auto& nb = *self.inputs[1];
                           const double* G = self.grad.data();
                           if (na.requires_grad) {
                               double* GA = na.grad_buffer().data();
                               for (std::size_t bt = 0; bt < batch; ++bt) {
                                   const double* Bb = shared_b ? nb.data.data() : nb.data.data() + bt * k * n;
                                   const double* Gb = G + bt * m * n;
                                   double* GAb = GA + bt * m * k;
                                   for (std::size_t i = 0; i < m; ++i) {
                                       for (std::size_t p = 0; p < k; ++p) {
                                           double acc = 0.0;
                                           for (std::size_t j = 0; j < n; ++j) acc += Gb[i * n + j] * Bb[p * n + j];
                                           GAb[i * k + p] += acc;
                                       }
                                   }
                               }
                           }
                           if (nb.requires_grad) {
                               double* GB = nb.grad_buffer().data();
                               for (std::size_t bt = 0; bt < batch; ++bt) {
                                   const double* Ab = na.data.data() + bt * m * k;
                                   const double* Gb = G + bt * m * n;
                                   double* GBb = shared_b ? GB : GB + bt * k * n;
                                   for (std::size_t i = 0; i < m; ++i) {
                                       for (std::size_t p = 0; p < k; ++p) {
                                           const double av = Ab[i * k + p];
                                           for (std::size_t j = 0; j < n; ++j) GBb[p * n + j] += av * Gb[i * n + j];
                                       }
                                   }
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "hadamard", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    for (double v : b.data()) {
        if (v == 0.0) throw DomainError("div: division by zero");
    }
    return binary(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

Tensor scale(const Tensor& x, double factor) {
    return unary(
        "scalar_mul", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
    return unary(
        "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& x) {
    for (double v : x.data()) {
        if (!std::isfinite(std::exp(v))) throw DomainError("exp: result overflows for input " + std::to_string(v));
    }
    return unary(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    for (double v : x.data()) {
        if (!(v > 0.0)) throw DomainError("log: input " + std::to_string(v) + " is not positive");
    }
    return unary(
        "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
    return unary(
        "silu", x, [](double v) { return v * stable_sigmoid(v); },
        [](double v, double) {
            const double s = stable_sigmoid(v);
            return s + v * s * (1.0 - s);
        });
}

Tensor softplus(const Tensor& x) {
    return unary(
        "softplus", x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
        [](double v, double) { return stable_sigmoid(v); });
}

// ---------------------------------------------------------------------------
// normalizations

Tensor softmax(const Tensor& x, int axis) {
    const std::size_t ax = normalize_axis("softmax", axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double mx = xd[base];
            for (std::size_t a = 1; a < s.len; ++a) mx = std::max(mx, xd[base + a * s.inner]);
            double total = 0.0;
            for (std::size_t a = 0; a < s.len; ++a) {
                const double e = std::exp(xd[base + a * s.inner] - mx);
                out[base + a * s.inner] = e;
                total += e;
            }
            for (std::size_t a = 0; a < s.len; ++a) out[base + a * s.inner] /= total;
        }
    }
    return make_result("softmax", x.shape(), std::move(out), {x}, [s](detail::Node& self) {
        auto& gi = self.inputs[0]->grad_buffer();
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.len * s.inner + i;
                double dot = 0.0;
                for (std::size_t a = 0; a < s.len; ++a) dot += g[base + a * s.inner] * y[base + a * s.inner];
                for (std::size_t a = 0; a < s.len; ++a) {
                    const std::size_t q = base + a * s.inner;
                    gi[q] += y[q] * (g[q] - dot);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, int axis, double eps) {
    const std::size_t ax = normalize_axis("layer_norm", axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    auto inv_std = std::make_shared<std::vector<double>>(s.outer * s.inner);
    const double n = static_cast<double>(s.len);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double mu = 0.0;
            for (std::size_t a = 0; a < s.len; ++a) mu += xd[base + a * s.inner];
            mu /= n;
            double var = 0.0;
            for (std::size_t a = 0; a < s.len; ++a) {
                const double d = xd[base + a * s.inner] - mu;
                var += d * d;
            }
            var /= n;
            const double r = 1.0 / std::sqrt(var + eps);
            (*inv_std)[o * s.inner + i] = r;
            for (std::size_t a = 0; a < s.len; ++a) out[base + a * s.inner] = (xd[base + a * s.inner] - mu) * r;
        }
    }
    return make_result("layer_norm", x.shape(), std::move(out), {x}, [s, inv_std, n](detail::Node& self) {
        auto& gi = self.inputs[0]->grad_buffer();
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.len * s.inner + i;
                double mg = 0.0;
                double mgy = 0.0;
                for (std::size_t a = 0; a < s.len; ++a) {
                    const std::size_t q = base + a * s.inner;
                    mg += g[q];
                    mgy += g[q] * y[q];
                }
                mg /= n;
                mgy /= n;
                const double r = (*inv_std)[o * s.inner + i];
                for (std::size_t a = 0; a < s.len; ++a) {
                    const std::size_t q = base + a * s.inner;
                    gi[q] += r * (g[q] - mg - y[q] * mgy);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// convolution

Tensor causal_conv1d(const Tensor& x, const Tensor& kernel) {
    const auto& sx = x.shape();
    const auto& sk = kernel.shape();
    if (sx.size() < 2 || sk.size() != 2 || sk[0] != sx.back()) {
        throw ShapeError("causal_conv1d: expected x [..., L, C] and kernel [C, w], got " + shape_str(sx) + " and " +
                         shape_str(sk));
    }
    const std::size_t C = sx.back();
    const std::size_t L = sx[sx.size() - 2];
    const std::size_t B = shape_numel(sx) / (L * C);
    const std::size_t w = sk[1];
    const auto xd = x.data();
    const auto kd = kernel.data();
    std::vector<double> out(xd.size(), 0.0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < L; ++t) {
            for (std::size_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::size_t k = 0; k < w && k <= t; ++k) acc += kd[c * w + k] * xd[(b * L + t - k) * C + c];
                out[(b * L + t) * C + c] = acc;
            }
        }
    }
    return make_result("causal_conv1d", sx, std::move(out), {x, kernel}, [B, L, C, w](detail::Node& self) {
        auto& nx = *self.inputs[0];
        auto& nk = *self.inputs[1];
        double* gx = nx.requires_grad ? nx.grad_buffer().data() : nullptr;
        double* gk = nk.requires_grad ? nk.grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t t = 0; t < L; ++t) {
                for (std::size_t c = 0; c < C; ++c) {
                    const double g = self.grad[(b * L + t) * C + c];
                    for (std::size_t k = 0; k < w && k <= t; ++k) {
                        const std::size_t src = (b * L + t - k) * C + c;
                        if (gx) gx[src] += nk.data[c * w + k] * g;
                        if (gk) gk[c * w + k] += nx.data[src] * g;
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// structural

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t ax = normalize_axis("concat", axis, parts[0].rank());
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    std::vector<std::size_t> lens;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch, " + shape_str(s));
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != ax && s[d] != parts[0].shape()[d]) {
                throw ShapeError("concat: dimension " + std::to_string(d) + " differs, " +
                                 shape_str(parts[0].shape()) + " vs " + shape_str(s));
            }
        }
        lens.push_back(s[ax]);
        out_shape[ax] += s[ax];
    }
    const AxisSplit so = split_at(out_shape, ax);
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto pd = parts[p].data();
        const std::size_t block = lens[p] * so.inner;
        for (std::size_t o = 0; o < so.outer; ++o) {
            std::copy_n(pd.begin() + o * block, block, out.begin() + o * so.len * so.inner + offset);
        }
        offset += block;
    }
    return make_result("concat", std::move(out_shape), std::move(out), parts, [so, lens](detail::Node& self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < self.inputs.size(); ++p) {
            auto& in = *self.inputs[p];
            const std::size_t block = lens[p] * so.inner;
            if (in.requires_grad) {
                auto& gi = in.grad_buffer();
                for (std::size_t o = 0; o < so.outer; ++o) {
                    const double* src = self.grad.data() + o * so.len * so.inner + offset;
                    for (std::size_t q = 0; q < block; ++q) gi[o * block + q] += src[q];
                }
            }
            offset += block;
        }
    });
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = normalize_axis("slice", axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    if (begin >= end || end > s.len) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                         std::to_string(ax) + " of " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[ax] = end - begin;
    const std::size_t block = (end - begin) * s.inner;
    const auto xd = x.data();
    std::vector<double> out(s.outer * block);
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(xd.begin() + o * s.len * s.inner + begin * s.inner, block, out.begin() + o * block);
    }
    return make_result("slice", std::move(out_shape), std::move(out), {x}, [s, begin, block](detail::Node& self) {
        auto& gi = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
            double* dst = gi.data() + o * s.len * s.inner + begin * s.inner;
            for (std::size_t q = 0; q < block; ++q) dst[q] += self.grad[o * block + q];
        }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    const auto xd = x.data();
    return make_result("reshape", std::move(shape), std::vector<double>(xd.begin(), xd.end()), {x},
                       [](detail::Node& self) {
                           auto& gi = self.inputs[0]->grad_buffer();
                           for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
                       });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
    const auto& sx = x.shape();
    const std::size_t rank = sx.size();
    std::vector<bool> seen(rank, false);
    if (order.size() != rank) throw ShapeError("permute: order length differs from rank of " + shape_str(sx));
    for (auto d : order) {
        if (d >= rank || seen[d]) throw ShapeError("permute: invalid axis order for " + shape_str(sx));
        seen[d] = true;
    }
    Shape out_shape(rank);
    for (std::size_t d = 0; d < rank; ++d) out_shape[d] = sx[order[d]];
    const auto in_strides = contiguous_strides(sx);
    // stride in the input for each output axis
    auto src_strides = std::make_shared<std::vector<std::size_t>>(rank);
    for (std::size_t d = 0; d < rank; ++d) (*src_strides)[d] = in_strides[order[d]];

    const std::size_t total = x.numel();
    auto gather = std::make_shared<std::vector<std::size_t>>(total);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < total; ++o) {
        (*gather)[o] = src;
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            src += (*src_strides)[d];
            if (idx[d] < out_shape[d]) break;
            src -= (*src_strides)[d] * idx[d];
            idx[d] = 0;
        }
    }
    const auto xd = x.data();
    std::vector<double> out(total);
    for (std::size_t o = 0; o < total; ++o) out[o] = xd[(*gather)[o]];
    return make_result("transpose", std::move(out_shape), std::move(out), {x}, [gather](detail::Node& self) {
        auto& gi = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < gather->size(); ++o) gi[(*gather)[o]] += self.grad[o];
    });
}

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
    const std::size_t a = normalize_axis("transpose", axis_a, x.rank());
    const std::size_t b = normalize_axis("transpose", axis_b, x.rank());
    std::vector<std::size_t> order(x.rank());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::swap(order[a], order[b]);
    return permute(x, order);
}

Tensor reverse(const Tensor& x, int axis) {
    const std::size_t ax = normalize_axis("reverse", axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t a = 0; a < s.len; ++a) {
            const std::size_t src = (o * s.len + a) * s.inner;
            const std::size_t dst = (o * s.len + (s.len - 1 - a)) * s.inner;
            std::copy_n(xd.begin() + src, s.inner, out.begin() + dst);
        }
    }
    return make_result("reverse", x.shape(), std::move(out), {x}, [s](detail::Node& self) {
        auto& gi = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t a = 0; a < s.len; ++a) {
                const std::size_t src = (o * s.len + a) * s.inner;
                const std::size_t dst = (o * s.len + (s.len - 1 - a)) * s.inner;
                for (std::size_t i = 0; i < s.inner; ++i) gi[src + i] += self.grad[dst + i];
            }
        }
    });
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
    const std::size_t ax = normalize_axis("sum", axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    Shape out_shape = x.shape();
    if (keepdim) {
        out_shape[ax] = 1;
    } else {
        out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    }
    const auto xd = x.data();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t a = 0; a < s.len; ++a) {
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xd[(o * s.len + a) * s.inner + i];
        }
    }
    return make_result("sum", std::move(out_shape), std::move(out), {x}, [s](detail::Node& self) {
        auto& gi = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t a = 0; a < s.len; ++a) {
                for (std::size_t i = 0; i < s.inner; ++i) gi[(o * s.len + a) * s.inner + i] += self.grad[o * s.inner + i];
            }
        }
    });
}

Tensor sum(const Tensor& x) {
    const auto xd = x.data();
    double total = 0.0;
    for (double v : xd) total += v;
    return make_result("sum", Shape{}, {total}, {x}, [](detail::Node& self) {
        auto& gi = self.inputs[0]->grad_buffer();
        for (auto& g : gi) g += self.grad[0];
    });
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
    const std::size_t ax = normalize_axis("mean", axis, x.rank());
    return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.shape()[ax]));
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) throw ValidationError("dropout: rate must lie in [0, 1)");
    if (!training || rate == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<double>>(x.numel());
    for (auto& m : *mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
    const auto xd = x.data();
    std::vector<double> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * (*mask)[i];
    return make_result("dropout", x.shape(), std::move(out), {x}, [mask](detail::Node& self) {
        auto& gi = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// dispatch

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::matmul: return "matmul";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::hadamard: return "hadamard";
        case OpKind::scalar_mul: return "scalar_mul";
        case OpKind::exp: return "exp";
        case OpKind::log: return "log";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::silu: return "silu";
        case OpKind::softplus: return "softplus";
        case OpKind::softmax: return "softmax";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::causal_conv1d: return "causal_conv1d";
        case OpKind::concat: return "concat";
        case OpKind::slice: return "slice";
        case OpKind::reshape: return "reshape";
        case OpKind::transpose: return "transpose";
        case OpKind::reverse: return "reverse";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::dropout: return "dropout";
    }
    return "unknown";
}

Tensor primitive_forward(OpKind kind, const std::vector<Tensor>& in, const OpAttrs& at) {
    auto need = [&](std::size_t n) {
        if (in.size() != n) {
            throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                             std::to_string(in.size()));
        }
    };
    switch (kind) {
        case OpKind::matmul: need(2); return matmul(in[0], in[1]);
        case OpKind::add: need(2); return add(in[0], in[1]);
        case OpKind::sub: need(2); return sub(in[0], in[1]);
        case OpKind::hadamard: need(2); return mul(in[0], in[1]);
        case OpKind::scalar_mul: need(1); return scale(in[0], at.scalar);
        case OpKind::exp: need(1); return exp(in[0]);
        case OpKind::log: need(1); return log(in[0]);
        case OpKind::sigmoid: need(1); return sigmoid(in[0]);
        case OpKind::silu: need(1); return silu(in[0]);
        case OpKind::softplus: need(1); return softplus(in[0]);
        case OpKind::softmax: need(1); return softmax(in[0], at.axis);
        case OpKind::layer_norm: need(1); return layer_norm(in[0], at.axis, at.eps);
        case OpKind::causal_conv1d: need(2); return causal_conv1d(in[0], in[1]);
        case OpKind::concat: return concat(in, at.axis);
        case OpKind::slice: need(1); return slice(in[0], at.axis, at.begin, at.end);
        case OpKind::reshape: need(1); return reshape(in[0], at.shape);
        case OpKind::transpose: need(1); return transpose(in[0]);
        case OpKind::reverse: need(1); return reverse(in[0], at.axis);
        case OpKind::sum: need(1); return sum(in[0], at.axis);
        case OpKind::mean: need(1); return mean(in[0], at.axis);
        case OpKind::dropout:
            need(1);
            if (at.rng == nullptr) throw ValidationError("dropout: an Rng is required");
            return dropout(in[0], at.rate, *at.rng, at.training);
    }
    throw ValidationError("primitive_forward: unknown op");
}

// ---------------------------------------------------------------------------
// reverse mode

Graph Graph::trace(const Tensor& root) {
    Graph g;
    if (!root.defined()) return g;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            g.nodes_.push_back(node);
            stack.pop_back();
        }
    }
    return g;
}

bool Graph::contains(const Tensor& t) const {
    return std::find(nodes_.begin(), nodes_.end(), t.node()) != nodes_.end();
}

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    const Graph graph = Graph::trace(loss);
    for (auto* n : graph.nodes()) {
        if (!n->inputs.empty()) n->grad.clear();
    }
    loss.node()->grad_buffer()[0] += 1.0;
    const auto& nodes = graph.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// gradient checking

GradCheckReport grad_check_closure(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                   const GradCheckOptions& options) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Rng rng(options.seed);
    Tensor out = f();
    std::vector<double> weights;
    Tensor loss;
    if (out.numel() == 1) {
        weights = {1.0};
        loss = reshape(out, Shape{});
    } else {
        Tensor w = Tensor::normal(out.shape(), 1.0, rng);
        weights.assign(w.data().begin(), w.data().end());
        loss = sum(mul(out, w));
    }
    backward(loss);
    out = Tensor();
    loss = Tensor();

    std::vector<std::vector<double>> analytic;
    for (auto& p : params) {
        if (p.has_grad()) {
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        } else {
            analytic.emplace_back(p.numel(), 0.0);
        }
    }

    auto projected = [&]() {
        NoGradGuard guard;
        const Tensor y = f();
        const auto yd = y.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < yd.size(); ++i) acc += yd[i] * weights[i];
        return acc;
    };

    std::vector<std::pair<std::size_t, std::size_t>> targets;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t e = 0; e < params[p].numel(); ++e) targets.emplace_back(p, e);
    }
    if (options.sample > 0 && options.sample < targets.size()) {
        // partial Fisher-Yates
        for (std::size_t i = 0; i < options.sample; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(targets.size() - i));
            std::swap(targets[i], targets[j]);
        }
        targets.resize(options.sample);
    }

    GradCheckReport report;
    report.entries.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) report.entries[p].input = p;
    for (auto [p, e] : targets) {
        auto values = params[p].mutable_data();
        const double original = values[e];
        values[e] = original + options.step;
        const double fp = projected();
        values[e] = original - options.step;
        const double fm = projected();
        values[e] = original;
        const double numeric = (fp - fm) / (2.0 * options.step);
        const double a = analytic[p][e];
        const double abs_err = std::abs(a - numeric);
        const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
        const double rel = abs_err / denom;
        auto& entry = report.entries[p];
        ++entry.checked;
        entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
        entry.max_rel_error = std::max(entry.max_rel_error, rel);
    }
    for (auto& entry : report.entries) {
        entry.passed = entry.max_rel_error < options.tolerance;
        report.passed = report.passed && entry.passed;
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    }
    return report;
}

GradCheckReport grad_check(const TensorFn& f, const std::vector<Tensor>& inputs, const GradCheckOptions& options) {
    std::vector<Tensor> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(t.detach().set_requires_grad(true));
    return grad_check_closure([&]() { return f(leaves); }, leaves, options);
}

}  // namespace dsrpgo
