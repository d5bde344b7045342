#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dsrpgo/matrix.hpp"
#include "json.hpp"

namespace dsrpgo::metrics {

struct FmaxResult {
    double value = 0.0;
    double threshold = 0.0;
};

/// Protein-centric Fmax over thresholds k / (grid_points - 1). A protein
/// predicts a term when its score is >= the threshold. Precision averages
/// over proteins with at least one prediction (thresholds with none are
/// skipped); recall averages over proteins with at least one label. The
/// first threshold reaching the maximum is reported.
FmaxResult fmax(const Matrix& scores, const Matrix& labels, std::size_t grid_points = 101);

/// Step-wise area under the precision-recall curve (average precision):
/// sum over distinct score levels, highest first, of (R_k - R_{k-1}) P_k.
/// Tied scores enter together. Requires at least one positive.
double average_precision(std::span<const double> scores, std::span<const double> labels);

/// AUPR over the flattened score/label pairs.
double aupr_micro(const Matrix& scores, const Matrix& labels);

struct MacroAupr {
    double value = 0.0;
    std::size_t skipped = 0;         // terms without positives
    std::vector<double> per_term;    // NaN for skipped terms
};

/// Mean of per-term AUPR over terms with at least one positive.
MacroAupr aupr_macro(const Matrix& scores, const Matrix& labels);

struct F1Acc {
    double f1 = 0.0;
    double acc = 0.0;
};

/// Example-based F1 averaged over proteins (a protein with empty predicted
/// and true sets scores 1) and subset accuracy, both at `threshold` (>=).
F1Acc f1_acc(const Matrix& scores, const Matrix& labels, double threshold = 0.5);

/// Davies-Bouldin index with Euclidean centroids and mean member-to-centroid
/// distance as scatter. Needs >= 2 clusters; coincident centroids raise.
double davies_bouldin(const Matrix& embeddings, std::span<const std::size_t> clusters);

/// Cluster ids keyed by identical label rows, numbered by first appearance.
std::vector<std::size_t> clusters_from_labels(const Matrix& labels);

struct EvalReport {
    FmaxResult fmax;
    double m_aupr = 0.0;
    double M_aupr = 0.0;
    std::size_t macro_skipped = 0;
    double f1 = 0.0;
    double acc = 0.0;
    std::vector<std::string> terms;
    std::vector<double> per_term_aupr;
    std::vector<std::pair<std::string, double>> db_scores;  // NaN when undefined
};

/// All ranking and set metrics for one score/label pair.
EvalReport evaluate(const Matrix& scores, const Matrix& labels, const std::vector<std::string>& terms = {});

/// Line-oriented key<TAB>value text; F1/ACC definitions flagged in the header.
std::string report_text(const EvalReport& r);
nlohmann::json report_json(const EvalReport& r);

}  // namespace dsrpgo::metrics
