#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace dsrpgo::gradcheck {

struct Row {
    std::string op;
    std::size_t checked = 0;  // gradient components compared
    double max_rel_error = 0.0;
    bool passed = true;
};

struct SuiteOptions {
    std::uint64_t seed = 1;
    double tolerance = 1e-4;
    // Elements sampled per closure check over module parameters; 0 checks all.
    std::size_t sample = 0;
    // Appends an op whose backward is deliberately wrong (negative control).
    bool inject_wrong_grad = false;
};

/// Central-difference checks over every primitive and every module at tiny
/// widths: selective scan, BiMamba, attention, BInM, codecs, selection
/// module, asymmetric loss and the full model.
std::vector<Row> run_suite(const SuiteOptions& options = {});

bool all_passed(const std::vector<Row>& rows);

/// Picks a threshold whose selection is stable under small perturbations:
/// the midpoint between sorted confidences that maximizes the distance to
/// every confidence. `confidences` holds rows of V values.
double stable_threshold(const std::vector<std::vector<double>>& confidences);

}  // namespace dsrpgo::gradcheck
