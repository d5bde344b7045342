#include "dsrpgo/ssm.hpp"

#include <cmath>
#include <memory>

#include "dsrpgo/errors.hpp"

namespace dsrpgo::ssm {

double zoh_gain(double z) {
    if (std::abs(z) < 1e-6) return 1.0 + z / 2.0 + z * z / 6.0;
    return std::expm1(z) / z;
}

double zoh_gain_derivative(double z) {
    if (std::abs(z) < 1e-3) return 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
    return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

Discretized discretize(const SsmParams& p) {
    if (!(p.delta > 0.0)) throw ValidationError("discretize: timescale delta must be positive");
    const std::size_t n = p.state_size();
    if (p.b.size() != n || p.c.size() != n) {
        throw ShapeError("discretize: A, B and C must share the state size " + std::to_string(n));
    }
    Discretized out;
    out.a_bar.resize(n);
    out.b_bar.resize(n);
    out.c_bar = p.c;
    out.d = p.d;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = p.delta * p.a[i];
        out.a_bar[i] = std::exp(z);
        out.b_bar[i] = zoh_gain(z) * p.delta * p.b[i];
    }
    return out;
}

double scan_step(ScanState& state, double x, const Discretized& disc) {
    if (state.h.empty()) state.h.assign(disc.a_bar.size(), 0.0);
    double y = disc.d * x;
    for (std::size_t i = 0; i < state.h.size(); ++i) {
        state.h[i] = disc.a_bar[i] * state.h[i] + disc.b_bar[i] * x;
        y += disc.c_bar[i] * state.h[i];
    }
    ++state.t;
    return y;
}

std::vector<double> scan_recurrent(std::span<const double> x, const Discretized& disc) {
    ScanState state;
    std::vector<double> y;
    y.reserve(x.size());
    for (double v : x) y.push_back(scan_step(state, v, disc));
    return y;
}

std::vector<double> scan_recurrent(std::span<const double> x, const SsmParams& params) {
    return scan_recurrent(x, discretize(params));
}

std::vector<double> convolution_kernel(const Discretized& disc, std::size_t length) {
    std::vector<double> kernel(length, 0.0);
    std::vector<double> power(disc.a_bar.size(), 1.0);  // A_bar^k, elementwise
    for (std::size_t k = 0; k < length; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < power.size(); ++i) {
            acc += disc.c_bar[i] * power[i] * disc.b_bar[i];
            power[i] *= disc.a_bar[i];
        }
        kernel[k] = acc;
    }
    return kernel;
}

std::vector<double> scan_convolutional(std::span<const double> x, const Discretized& disc) {
    const auto kernel = convolution_kernel(disc, x.size());
    std::vector<double> y(x.size());
    for (std::size_t t = 0; t < x.size(); ++t) {
        double acc = disc.d * x[t];
        for (std::size_t k = 0; k <= t; ++k) acc += kernel[k] * x[t - k];
        y[t] = acc;
    }
    return y;
}

std::vector<double> scan_convolutional(std::span<const double> x, const SsmParams& params) {
    return scan_convolutional(x, discretize(params));
}

// ---------------------------------------------------------------------------

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                      const Tensor& d) {
    const auto& su = u.shape();
    if (su.size() != 3) throw ShapeError("selective_scan: u must be [N, L, C], got " + shape_str(su));
    const std::size_t N = su[0];
    const std::size_t L = su[1];
    const std::size_t C = su[2];
    if (a.rank() != 2 || a.dim(0) != C) {
        throw ShapeError("selective_scan: A must be [C, S] with C = " + std::to_string(C) + ", got " +
                         shape_str(a.shape()));
    }
    const std::size_t S = a.dim(1);
    if (delta.shape() != su) throw ShapeError("selective_scan: delta shape " + shape_str(delta.shape()) + " != u shape");
    const Shape sbc{N, L, S};
    if (b.shape() != sbc || c.shape() != sbc) {
        throw ShapeError("selective_scan: B and C must be " + shape_str(sbc) + ", got " + shape_str(b.shape()) +
                         " and " + shape_str(c.shape()));
    }
    if (d.shape() != Shape{C}) throw ShapeError("selective_scan: D must be [C], got " + shape_str(d.shape()));
    for (double v : delta.data()) {
        if (!(v > 0.0)) throw DomainError("selective_scan: timescale must be positive");
    }

    const auto ud = u.data();
    const auto dd = delta.data();
    const auto ad = a.data();
    const auto bd = b.data();
    const auto cd = c.data();
    const auto skip = d.data();

    // hidden states [N, L, C, S], kept for the reverse pass
    auto hist = std::make_shared<std::vector<double>>(N * L * C * S);
    std::vector<double> out(N * L * C, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t ch = 0; ch < C; ++ch) {
            for (std::size_t s = 0; s < S; ++s) {
                double h = 0.0;
                for (std::size_t t = 0; t < L; ++t) {
                    const std::size_t tok = (n * L + t) * C + ch;
                    const std::size_t bc = (n * L + t) * S + s;
                    const double z = dd[tok] * ad[ch * S + s];
                    h = std::exp(z) * h + zoh_gain(z) * dd[tok] * bd[bc] * ud[tok];
                    (*hist)[tok * S + s] = h;
                    out[tok] += cd[bc] * h;
                }
            }
            for (std::size_t t = 0; t < L; ++t) {
                const std::size_t tok = (n * L + t) * C + ch;
                out[tok] += skip[ch] * ud[tok];
            }
        }
    }

    return make_result(
        "selective_scan", su, std::move(out), {u, delta, a, b, c, d}, [N, L, C, S, hist](detail::Node& self) {
            auto& nu = *self.inputs[0];
            auto& ndelta = *self.inputs[1];
            auto& na = *self.inputs[2];
            auto& nb = *self.inputs[3];
            auto& nc = *self.inputs[4];
            auto& nd = *self.inputs[5];
            double* gu = nu.requires_grad ? nu.grad_buffer().data() : nullptr;
            double* gdelta = ndelta.requires_grad ? ndelta.grad_buffer().data() : nullptr;
            double* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
            double* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
            double* gc = nc.requires_grad ? nc.grad_buffer().data() : nullptr;
            double* gd = nd.requires_grad ? nd.grad_buffer().data() : nullptr;
            const auto& g = self.grad;
            const auto& H = *hist;

            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t ch = 0; ch < C; ++ch) {
                    for (std::size_t t = 0; t < L; ++t) {
                        const std::size_t tok = (n * L + t) * C + ch;
                        if (gd) gd[ch] += nu.data[tok] * g[tok];
                        if (gu) gu[tok] += nd.data[ch] * g[tok];
                    }
                    for (std::size_t s = 0; s < S; ++s) {
                        const double a_cs = na.data[ch * S + s];
                        double carry = 0.0;  // dL/dh_t arriving from step t+1
                        for (std::size_t t = L; t-- > 0;) {
                            const std::size_t tok = (n * L + t) * C + ch;
                            const std::size_t bc = (n * L + t) * S + s;
                            const double dt = ndelta.data[tok];
                            const double x = nu.data[tok];
                            const double bv = nb.data[bc];
                            const double z = dt * a_cs;
                            const double abar = std::exp(z);
                            const double gain = zoh_gain(z);
                            const double h = H[tok * S + s];
                            const double h_prev = t > 0 ? H[(tok - C) * S + s] : 0.0;

                            if (gc) gc[bc] += h * g[tok];
                            const double gh = carry + nc.data[bc] * g[tok];

                            // h = abar * h_prev + gain * dt * b * x
                            double gz = gh * h_prev * abar;
                            const double gbb = gh * x;
                            if (gu) gu[tok] += gh * gain * dt * bv;
                            if (gb) gb[bc] += gbb * gain * dt;
                            gz += gbb * dt * bv * zoh_gain_derivative(z);
                            if (gdelta) gdelta[tok] += gbb * gain * bv + gz * a_cs;
                            if (ga) ga[ch * S + s] += gz * dt;
                            carry = abar * gh;
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------

namespace {

double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

}  // namespace

SelectiveSsm::SelectiveSsm(std::size_t channels, std::size_t state, Rng& rng)
    : delta_proj(channels, channels, rng), b_proj(channels, state, rng, false), c_proj(channels, state, rng, false) {
    std::vector<double> alog(channels * state);
    for (std::size_t ch = 0; ch < channels; ++ch) {
        for (std::size_t s = 0; s < state; ++s) {
            // A = -(1..S), evenly spaced
            const double value = state == 1 ? 1.0
                                            : 1.0 + static_cast<double>(s) * (static_cast<double>(state) - 1.0) /
                                                        static_cast<double>(state - 1);
            alog[ch * state + s] = std::log(value);
        }
    }
    a_log = Tensor({channels, state}, std::move(alog), true);

    // Initial timescales log-uniform in [1e-3, 0.1], encoded through the bias.
    const double lo = std::log(1e-3);
    const double hi = std::log(0.1);
    for (auto& v : delta_proj.bias.mutable_data()) v = inverse_softplus(std::exp(rng.uniform(lo, hi)));
    d = Tensor::full({channels}, 1.0, true);
}

Tensor SelectiveSsm::forward(const Tensor& u) const {
    const Tensor delta = softplus(delta_proj.forward(u));
    const Tensor a = scale(exp(a_log), -1.0);
    return selective_scan(u, delta, a, b_proj.forward(u), c_proj.forward(u), d);
}

void SelectiveSsm::collect(const std::string& prefix, nn::ParamList& out) const {
    out.push_back({prefix + ".a_log", a_log});
    delta_proj.collect(prefix + ".delta_proj", out);
    b_proj.collect(prefix + ".b_proj", out);
    c_proj.collect(prefix + ".c_proj", out);
    out.push_back({prefix + ".d", d});
}

}  // namespace dsrpgo::ssm
