#include "dsrpgo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "dsrpgo/errors.hpp"

namespace dsrpgo::metrics {
namespace {

void check_pair(const Matrix& scores, const Matrix& labels, const char* what) {
    if (scores.rows != labels.rows || scores.cols != labels.cols)
        throw ShapeError(std::string(what) + ": scores " + std::to_string(scores.rows) + "x" +
                         std::to_string(scores.cols) + " vs labels " + std::to_string(labels.rows) + "x" +
                         std::to_string(labels.cols));
    if (scores.values.size() != scores.rows * scores.cols || labels.values.size() != labels.rows * labels.cols)
        throw ShapeError(std::string(what) + ": matrix storage does not match its shape");
}

void require_positive(const Matrix& labels, const char* what) {
    bool any = std::any_of(labels.values.begin(), labels.values.end(), [](double v) { return v > 0.5; });
    if (!any) throw ValidationError(std::string(what) + ": labels contain no positive entry");
}

bool positive(double label) { return label > 0.5; }

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

FmaxResult fmax(const Matrix& scores, const Matrix& labels, std::size_t grid_points) {
    check_pair(scores, labels, "fmax");
    require_positive(labels, "fmax");
    if (grid_points < 2) throw ValidationError("fmax: threshold grid needs at least 2 points");

    std::vector<std::size_t> truth(labels.rows, 0);
    std::size_t labelled = 0;
    for (std::size_t i = 0; i < labels.rows; ++i) {
        for (double y : labels.row(i)) truth[i] += positive(y) ? 1 : 0;
        if (truth[i] > 0) ++labelled;
    }

    FmaxResult best;
    bool have = false;
    for (std::size_t k = 0; k < grid_points; ++k) {
        double tau = static_cast<double>(k) / static_cast<double>(grid_points - 1);
        double precision_sum = 0.0;
        double recall_sum = 0.0;
        std::size_t predicting = 0;
        for (std::size_t i = 0; i < scores.rows; ++i) {
            std::size_t predicted = 0;
            std::size_t hit = 0;
            for (std::size_t j = 0; j < scores.cols; ++j) {
                if (scores.at(i, j) >= tau) {
                    ++predicted;
                    if (positive(labels.at(i, j))) ++hit;
                }
            }
            if (predicted > 0) {
                ++predicting;
                precision_sum += static_cast<double>(hit) / static_cast<double>(predicted);
            }
            if (truth[i] > 0) recall_sum += static_cast<double>(hit) / static_cast<double>(truth[i]);
        }
        if (predicting == 0) continue;
        double p = precision_sum / static_cast<double>(predicting);
        double r = recall_sum / static_cast<double>(labelled);
        double f = (p + r > 0.0) ? 2.0 * p * r / (p + r) : 0.0;
        if (!have || f > best.value) {
            best = {f, tau};
            have = true;
        }
    }
    return best;
}

double average_precision(std::span<const double> scores, std::span<const double> labels) {
    if (scores.size() != labels.size()) throw ShapeError("average_precision: length mismatch");
    std::size_t total_pos = 0;
    for (double y : labels) total_pos += positive(y) ? 1 : 0;
    if (total_pos == 0) throw ValidationError("average_precision: no positive label");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double ap = 0.0;
    double prev_recall = 0.0;
    std::size_t taken = 0;
    std::size_t hits = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        double level = scores[order[i]];
        while (i < order.size() && scores[order[i]] == level) {
            ++taken;
            if (positive(labels[order[i]])) ++hits;
            ++i;
        }
        double recall = static_cast<double>(hits) / static_cast<double>(total_pos);
        double precision = static_cast<double>(hits) / static_cast<double>(taken);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

double aupr_micro(const Matrix& scores, const Matrix& labels) {
    check_pair(scores, labels, "aupr_micro");
    require_positive(labels, "aupr_micro");
    return average_precision(scores.values, labels.values);
}

MacroAupr aupr_macro(const Matrix& scores, const Matrix& labels) {
    check_pair(scores, labels, "aupr_macro");
    require_positive(labels, "aupr_macro");
    MacroAupr out;
    out.per_term.assign(scores.cols, std::numeric_limits<double>::quiet_NaN());
    std::vector<double> s(scores.rows);
    std::vector<double> y(scores.rows);
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t j = 0; j < scores.cols; ++j) {
        bool any = false;
        for (std::size_t i = 0; i < scores.rows; ++i) {
            s[i] = scores.at(i, j);
            y[i] = labels.at(i, j);
            any = any || positive(y[i]);
        }
        if (!any) {
            ++out.skipped;
            continue;
        }
        out.per_term[j] = average_precision(s, y);
        sum += out.per_term[j];
        ++used;
    }
    out.value = sum / static_cast<double>(used);
    return out;
}

F1Acc f1_acc(const Matrix& scores, const Matrix& labels, double threshold) {
    check_pair(scores, labels, "f1_acc");
    if (scores.rows == 0) throw ValidationError("f1_acc: no proteins");
    double f1_sum = 0.0;
    std::size_t exact = 0;
    for (std::size_t i = 0; i < scores.rows; ++i) {
        std::size_t predicted = 0;
        std::size_t truth = 0;
        std::size_t hit = 0;
        bool same = true;
        for (std::size_t j = 0; j < scores.cols; ++j) {
            bool p = scores.at(i, j) >= threshold;
            bool y = positive(labels.at(i, j));
            predicted += p ? 1 : 0;
            truth += y ? 1 : 0;
            hit += (p && y) ? 1 : 0;
            same = same && (p == y);
        }
        f1_sum += (predicted + truth == 0) ? 1.0
                                           : 2.0 * static_cast<double>(hit) / static_cast<double>(predicted + truth);
        exact += same ? 1 : 0;
    }
    double n = static_cast<double>(scores.rows);
    return {f1_sum / n, static_cast<double>(exact) / n};
}

double davies_bouldin(const Matrix& embeddings, std::span<const std::size_t> clusters) {
    if (clusters.size() != embeddings.rows) throw ShapeError("davies_bouldin: one cluster id per row required");
    std::map<std::size_t, std::size_t> index;
    for (std::size_t c : clusters) index.emplace(c, index.size());
    std::size_t k = index.size();
    if (k < 2) throw ValidationError("davies_bouldin: at least 2 clusters required, got " + std::to_string(k));

    // Centroids are accumulated as offsets from each cluster's first member,
    // so a cluster of identical rows has exactly zero scatter.
    std::size_t d = embeddings.cols;
    Matrix centroid(k, d);
    std::vector<std::size_t> count(k, 0);
    std::vector<std::size_t> anchor(k, 0);
    for (std::size_t i = 0; i < embeddings.rows; ++i) {
        std::size_t c = index.at(clusters[i]);
        if (count[c]++ == 0) anchor[c] = i;
        for (std::size_t t = 0; t < d; ++t) centroid.at(c, t) += embeddings.at(i, t) - embeddings.at(anchor[c], t);
    }
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t t = 0; t < d; ++t)
            centroid.at(c, t) = embeddings.at(anchor[c], t) + centroid.at(c, t) / static_cast<double>(count[c]);

    auto dist = [d](std::span<const double> a, std::span<const double> b) {
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += (a[t] - b[t]) * (a[t] - b[t]);
        return std::sqrt(s);
    };

    std::vector<double> scatter(k, 0.0);
    for (std::size_t i = 0; i < embeddings.rows; ++i) {
        std::size_t c = index.at(clusters[i]);
        scatter[c] += dist(embeddings.row(i), centroid.row(c));
    }
    for (std::size_t c = 0; c < k; ++c) scatter[c] /= static_cast<double>(count[c]);

    double total = 0.0;
    for (std::size_t a = 0; a < k; ++a) {
        double worst = 0.0;
        for (std::size_t b = 0; b < k; ++b) {
            if (a == b) continue;
            double sep = dist(centroid.row(a), centroid.row(b));
            if (sep == 0.0) throw ValidationError("davies_bouldin: two clusters share a centroid");
            worst = std::max(worst, (scatter[a] + scatter[b]) / sep);
        }
        total += worst;
    }
    return total / static_cast<double>(k);
}

std::vector<std::size_t> clusters_from_labels(const Matrix& labels) {
    std::map<std::vector<bool>, std::size_t> ids;
    std::vector<std::size_t> out(labels.rows);
    for (std::size_t i = 0; i < labels.rows; ++i) {
        std::vector<bool> key(labels.cols);
        for (std::size_t j = 0; j < labels.cols; ++j) key[j] = positive(labels.at(i, j));
        out[i] = ids.emplace(std::move(key), ids.size()).first->second;
    }
    return out;
}

EvalReport evaluate(const Matrix& scores, const Matrix& labels, const std::vector<std::string>& terms) {
    EvalReport r;
    r.fmax = fmax(scores, labels);
    r.m_aupr = aupr_micro(scores, labels);
    MacroAupr macro = aupr_macro(scores, labels);
    r.M_aupr = macro.value;
    r.macro_skipped = macro.skipped;
    r.per_term_aupr = std::move(macro.per_term);
    F1Acc fa = f1_acc(scores, labels);
    r.f1 = fa.f1;
    r.acc = fa.acc;
    if (!terms.empty() && terms.size() != labels.cols)
        throw ShapeError("evaluate: " + std::to_string(terms.size()) + " term names for " +
                         std::to_string(labels.cols) + " columns");
    r.terms = terms;
    if (r.terms.empty())
        for (std::size_t j = 0; j < labels.cols; ++j) r.terms.push_back("term" + std::to_string(j));
    return r;
}

std::string report_text(const EvalReport& r) {
    std::ostringstream out;
    out << "# f1: example-based F1 at tau=0.5 (artifact-defined)\n";
    out << "# acc: subset accuracy at tau=0.5 (artifact-defined)\n";
    out << "fmax\t" << fmt(r.fmax.value) << "\n";
    out << "fmax_threshold\t" << fmt(r.fmax.threshold) << "\n";
    out << "m-aupr\t" << fmt(r.m_aupr) << "\n";
    out << "M-aupr\t" << fmt(r.M_aupr) << "\n";
    out << "M-aupr_skipped_terms\t" << r.macro_skipped << "\n";
    out << "f1\t" << fmt(r.f1) << "\n";
    out << "acc\t" << fmt(r.acc) << "\n";
    for (std::size_t j = 0; j < r.per_term_aupr.size(); ++j) {
        std::string name = j < r.terms.size() ? r.terms[j] : "term" + std::to_string(j);
        out << "aupr[" << name << "]\t" << (std::isnan(r.per_term_aupr[j]) ? "skipped" : fmt(r.per_term_aupr[j]))
            << "\n";
    }
    for (const auto& [name, v] : r.db_scores) out << "db[" << name << "]\t" << (std::isnan(v) ? "n/a" : fmt(v)) << "\n";
    return out.str();
}

nlohmann::json report_json(const EvalReport& r) {
    nlohmann::json j;
    j["definitions"] = {{"f1", "example-based F1 at tau=0.5 (artifact-defined)"},
                        {"acc", "subset accuracy at tau=0.5 (artifact-defined)"}};
    j["fmax"] = r.fmax.value;
    j["fmax_threshold"] = r.fmax.threshold;
    j["m_aupr"] = r.m_aupr;
    j["M_aupr"] = r.M_aupr;
    j["M_aupr_skipped_terms"] = r.macro_skipped;
    j["f1"] = r.f1;
    j["acc"] = r.acc;
    nlohmann::json per = nlohmann::json::array();
    for (std::size_t i = 0; i < r.per_term_aupr.size(); ++i) {
        nlohmann::json e;
        e["term"] = i < r.terms.size() ? r.terms[i] : "term" + std::to_string(i);
        if (std::isnan(r.per_term_aupr[i]))
            e["aupr"] = nullptr;
        else
            e["aupr"] = r.per_term_aupr[i];
        per.push_back(e);
    }
    j["per_term_aupr"] = per;
    nlohmann::json db = nlohmann::json::array();
    for (const auto& [name, v] : r.db_scores) {
        nlohmann::json e = {{"embedding", name}};
        if (std::isnan(v))
            e["db"] = nullptr;
        else
            e["db"] = v;
        db.push_back(e);
    }
    j["db_scores"] = db;
    return j;
}

}  // namespace dsrpgo::metrics
