#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iterator>
#include <set>
#include <utility>
#include <vector>

#include "dsrpgo/matrix.hpp"
#include "dsrpgo/rng.hpp"

namespace oracles {

using dsrpgo::Matrix;
using dsrpgo::Rng;

// Brute-force oracles: set arithmetic per threshold, no sorting or sweeps.

inline std::set<std::size_t> predicted_set(const Matrix& s, std::size_t i, double tau) {
    std::set<std::size_t> out;
    for (std::size_t j = 0; j < s.cols; ++j)
        if (s.at(i, j) >= tau) out.insert(j);
    return out;
}

inline std::set<std::size_t> true_set(const Matrix& y, std::size_t i) {
    std::set<std::size_t> out;
    for (std::size_t j = 0; j < y.cols; ++j)
        if (y.at(i, j) == 1.0) out.insert(j);
    return out;
}

inline std::size_t overlap(const std::set<std::size_t>& a, const std::set<std::size_t>& b) {
    std::vector<std::size_t> both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    return both.size();
}

inline double oracle_fmax(const Matrix& s, const Matrix& y) {
    double best = 0.0;
    for (int k = 0; k <= 100; ++k) {
        double tau = k / 100.0;
        std::vector<double> precisions, recalls;
        for (std::size_t i = 0; i < s.rows; ++i) {
            auto p = predicted_set(s, i, tau);
            auto t = true_set(y, i);
            if (!p.empty()) precisions.push_back(double(overlap(p, t)) / double(p.size()));
            if (!t.empty()) recalls.push_back(double(overlap(p, t)) / double(t.size()));
        }
        if (precisions.empty()) continue;
        double P = 0, R = 0;
        for (double v : precisions) P += v;
        for (double v : recalls) R += v;
        P /= double(precisions.size());
        R /= double(recalls.size());
        if (P + R > 0) best = std::max(best, 2 * P * R / (P + R));
    }
    return best;
}

inline double oracle_ap(const std::vector<double>& s, const std::vector<double>& y) {
    std::set<double, std::greater<>> levels(s.begin(), s.end());
    double npos = 0;
    for (double v : y) npos += v;
    double area = 0, prev_r = 0;
    for (double tau : levels) {
        double tp = 0, taken = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s[i] >= tau) {
                taken += 1;
                tp += y[i];
            }
        double r = tp / npos;
        area += (r - prev_r) * (tp / taken);
        prev_r = r;
    }
    return area;
}

inline double oracle_macro(const Matrix& s, const Matrix& y, std::size_t* skipped) {
    double sum = 0;
    std::size_t used = 0;
    *skipped = 0;
    for (std::size_t j = 0; j < s.cols; ++j) {
        std::vector<double> col_s, col_y;
        for (std::size_t i = 0; i < s.rows; ++i) {
            col_s.push_back(s.at(i, j));
            col_y.push_back(y.at(i, j));
        }
        if (std::count(col_y.begin(), col_y.end(), 1.0) == 0) {
            ++*skipped;
            continue;
        }
        sum += oracle_ap(col_s, col_y);
        ++used;
    }
    return sum / double(used);
}

inline std::pair<double, double> oracle_f1_acc(const Matrix& s, const Matrix& y) {
    double f1 = 0, acc = 0;
    for (std::size_t i = 0; i < s.rows; ++i) {
        auto p = predicted_set(s, i, 0.5);
        auto t = true_set(y, i);
        f1 += (p.empty() && t.empty()) ? 1.0 : 2.0 * double(overlap(p, t)) / double(p.size() + t.size());
        acc += (p == t) ? 1.0 : 0.0;
    }
    return {f1 / double(s.rows), acc / double(s.rows)};
}

inline double oracle_db(const Matrix& x, const std::vector<std::size_t>& c) {
    std::set<std::size_t> ids(c.begin(), c.end());
    std::vector<std::vector<double>> cent;
    std::vector<double> sigma;
    for (std::size_t id : ids) {
        std::vector<double> mean(x.cols, 0.0);
        double n = 0;
        for (std::size_t i = 0; i < x.rows; ++i)
            if (c[i] == id) {
                n += 1;
                for (std::size_t t = 0; t < x.cols; ++t) mean[t] += x.at(i, t);
            }
        for (double& v : mean) v /= n;
        double sc = 0;
        for (std::size_t i = 0; i < x.rows; ++i)
            if (c[i] == id) {
                double d2 = 0;
                for (std::size_t t = 0; t < x.cols; ++t) d2 += std::pow(x.at(i, t) - mean[t], 2);
                sc += std::sqrt(d2);
            }
        cent.push_back(mean);
        sigma.push_back(sc / n);
    }
    double total = 0;
    for (std::size_t a = 0; a < cent.size(); ++a) {
        double worst = -1;
        for (std::size_t b = 0; b < cent.size(); ++b) {
            if (a == b) continue;
            double d2 = 0;
            for (std::size_t t = 0; t < x.cols; ++t) d2 += std::pow(cent[a][t] - cent[b][t], 2);
            worst = std::max(worst, (sigma[a] + sigma[b]) / std::sqrt(d2));
        }
        total += worst;
    }
    return total / double(cent.size());
}

// Random instance with N <= 10, M <= 5; half the seeds quantize scores to
// force ties and grid-aligned values.
struct Instance {
    Matrix scores;
    Matrix labels;
};

inline Instance random_instance(std::uint64_t seed) {
    Rng rng(seed);
    std::size_t n = 1 + rng.below(10);
    std::size_t mm = 1 + rng.below(5);
    bool quantize = rng.bernoulli(0.5);
    double density = 0.2 + 0.6 * rng.uniform();
    Instance inst{Matrix(n, mm), Matrix(n, mm)};
    for (double& v : inst.scores.values) {
        v = rng.uniform();
        if (quantize) v = std::floor(v * 10.0) / 10.0;
    }
    for (double& v : inst.labels.values) v = rng.bernoulli(density) ? 1.0 : 0.0;
    inst.labels.values[rng.below(n * mm)] = 1.0;
    return inst;
}

}  // namespace oracles
