#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dsrpgo/nn.hpp"
#include "dsrpgo/tensor.hpp"

namespace dsrpgo::ssm {

/// Continuous-time diagonal state-space parameters for one channel.
/// `a` holds the diagonal of A; stable systems have every entry < 0.
struct SsmParams {
    std::vector<double> a;
    std::vector<double> b;
    std::vector<double> c;
    double d = 0.0;
    double delta = 1.0;

    std::size_t state_size() const { return a.size(); }
};

/// Zero-order-hold discretization of an SsmParams.
struct Discretized {
    std::vector<double> a_bar;
    std::vector<double> b_bar;
    std::vector<double> c_bar;
    double d = 0.0;
};

struct ScanState {
    std::vector<double> h;
    std::size_t t = 0;
};

/// (e^z - 1) / z, continuous at z = 0 (series below |z| < 1e-6).
double zoh_gain(double z);
/// d/dz of zoh_gain.
double zoh_gain_derivative(double z);

/// A_bar = exp(delta A), B_bar = (delta A)^-1 (exp(delta A) - I) delta B, C_bar = C.
Discretized discretize(const SsmParams& params);

/// One recurrence step: h <- A_bar h + B_bar x, returns y = C_bar h + D x.
double scan_step(ScanState& state, double x, const Discretized& disc);

/// Left-to-right recurrence from h = 0.
std::vector<double> scan_recurrent(std::span<const double> x, const SsmParams& params);
std::vector<double> scan_recurrent(std::span<const double> x, const Discretized& disc);

/// K[k] = C_bar A_bar^k B_bar for k < length.
std::vector<double> convolution_kernel(const Discretized& disc, std::size_t length);

/// y = x * K + D x with kernel length equal to the sequence length.
std::vector<double> scan_convolutional(std::span<const double> x, const SsmParams& params);
std::vector<double> scan_convolutional(std::span<const double> x, const Discretized& disc);

/// Differentiable input-dependent scan over a batch of sequences.
///   u, delta: [N, L, C]   per-token input and timescale (delta > 0)
///   a:        [C, S]      continuous diagonal state matrix per channel
///   b, c:     [N, L, S]   per-token input and output maps
///   d:        [C]         skip coefficient
/// Returns y: [N, L, C] with h_t = exp(delta_t a) h_{t-1} + zoh(delta_t a) delta_t b_t u_t and
/// y_t = c_t . h_t + d u_t, evaluated channel by channel.
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& b, const Tensor& c,
                      const Tensor& d);

/// Learned projections producing delta, B and C from the scanned input, plus
/// A = -exp(a_log) and the skip D.
class SelectiveSsm {
public:
    SelectiveSsm() = default;
    SelectiveSsm(std::size_t channels, std::size_t state, Rng& rng);

    /// u: [N, L, channels] -> [N, L, channels]
    Tensor forward(const Tensor& u) const;
    void collect(const std::string& prefix, nn::ParamList& out) const;

    Tensor a_log;  // [channels, state]
    nn::Linear delta_proj;
    nn::Linear b_proj;
    nn::Linear c_proj;
    Tensor d;  // [channels]
};

}  // namespace dsrpgo::ssm
