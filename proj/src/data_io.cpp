#include "dsrpgo/data_io.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dsrpgo/rng.hpp"

namespace dsrpgo::data {
namespace fs = std::filesystem;

std::string code_name(DataErrorCode code) {
    switch (code) {
        case DataErrorCode::missing_file: return "missing_file";
        case DataErrorCode::parse: return "parse";
        case DataErrorCode::row_count: return "row_count";
        case DataErrorCode::column_count: return "column_count";
        case DataErrorCode::nan_value: return "nan_value";
        case DataErrorCode::non_binary: return "non_binary";
        case DataErrorCode::negative_value: return "negative_value";
        case DataErrorCode::duplicate_id: return "duplicate_id";
        case DataErrorCode::alignment: return "alignment";
        case DataErrorCode::unknown_tag: return "unknown_tag";
        case DataErrorCode::empty_split: return "empty_split";
    }
    return "unknown";
}

DataError::DataError(DataErrorCode code, const std::string& message)
    : Error(code == DataErrorCode::missing_file ? "io" : "validation", code_name(code) + ": " + message),
      code_(code) {}

std::string tag_name(SplitTag tag) {
    switch (tag) {
        case SplitTag::train: return "train";
        case SplitTag::valid: return "valid";
        case SplitTag::test: return "test";
        case SplitTag::pretrain_only: return "pretrain-only";
    }
    return "train";
}

SplitTag parse_tag(const std::string& text) {
    if (text == "train") return SplitTag::train;
    if (text == "valid") return SplitTag::valid;
    if (text == "test") return SplitTag::test;
    if (text == "pretrain-only") return SplitTag::pretrain_only;
    throw DataError(DataErrorCode::unknown_tag, "split tag '" + text + "' is not train, valid, test or pretrain-only");
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t tab = line.find('\t', start);
        out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return out;
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    return lines;
}

double parse_value(const std::string& field, const std::string& where) {
    if (field.empty()) throw DataError(DataErrorCode::parse, where + ": empty field");
    errno = 0;
    char* end = nullptr;
    double v = std::strtod(field.c_str(), &end);
    if (end != field.c_str() + field.size() || errno == ERANGE)
        throw DataError(DataErrorCode::parse, where + ": '" + field + "' is not a number");
    if (!std::isfinite(v)) throw DataError(DataErrorCode::nan_value, where + ": non-finite value '" + field + "'");
    return v;
}

std::size_t parse_count(const std::string& field, const std::string& where) {
    if (field.empty() || field.find_first_not_of("0123456789") != std::string::npos)
        throw DataError(DataErrorCode::parse, where + ": bad dimension '" + field + "'");
    return static_cast<std::size_t>(std::stoull(field));
}

std::pair<std::size_t, std::size_t> parse_header(const std::vector<std::string>& lines, const std::string& source) {
    if (lines.empty() || lines[0].empty() || lines[0][0] != '#')
        throw DataError(DataErrorCode::parse, source + ": missing '#rows<TAB>cols' header");
    auto dims = split_fields(lines[0].substr(1));
    if (dims.size() != 2) throw DataError(DataErrorCode::parse, source + ": header must declare rows and cols");
    return {parse_count(dims[0], source + " header"), parse_count(dims[1], source + " header")};
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(DataErrorCode::missing_file, "cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

std::string list_text(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& s : items) out += s + "\n";
    return out;
}

std::vector<std::string> parse_list(const std::string& text, const std::string& source) {
    auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i)
        if (lines[i].empty() || lines[i].find('\t') != std::string::npos)
            throw DataError(DataErrorCode::parse, source + " line " + std::to_string(i + 1) + ": bad identifier");
    return lines;
}

void check_rows(const Matrix& m, std::size_t n, const std::string& source) {
    if (m.rows != n)
        throw DataError(DataErrorCode::row_count,
                        source + ": " + std::to_string(m.rows) + " rows for " + std::to_string(n) + " ids");
}

void check_binary(const Matrix& m, const std::string& source) {
    for (std::size_t i = 0; i < m.values.size(); ++i)
        if (m.values[i] != 0.0 && m.values[i] != 1.0)
            throw DataError(DataErrorCode::non_binary, source + ": entry (" + std::to_string(i / m.cols) + ", " +
                                                           std::to_string(i % m.cols) + ") = " + fmt(m.values[i]));
}

std::string labels_text(const ProteinDataset& ds) {
    std::size_t rows = 0;
    for (bool b : ds.has_labels) rows += b ? 1 : 0;
    std::string out = "#" + std::to_string(rows) + "\t" + std::to_string(ds.labels.cols) + "\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (!ds.has_labels[i]) continue;
        out += ds.ids[i];
        for (double v : ds.labels.row(i)) out += "\t" + fmt(v);
        out += "\n";
    }
    return out;
}

std::string splits_text(const ProteinDataset& ds) {
    std::string out = "#" + std::to_string(ds.size()) + "\t2\n";
    for (std::size_t i = 0; i < ds.size(); ++i) out += ds.ids[i] + "\t" + tag_name(ds.split[i]) + "\n";
    return out;
}

std::string norm_text(const NormConstants& c) {
    Matrix m(2, c.min.size());
    for (std::size_t j = 0; j < c.min.size(); ++j) {
        m.at(0, j) = c.min[j];
        m.at(1, j) = c.max[j];
    }
    return matrix_tsv(m);
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

NormConstants fit_normalization(const Matrix& raw) {
    NormConstants c;
    c.min.assign(raw.cols, 0.0);
    c.max.assign(raw.cols, 0.0);
    for (std::size_t j = 0; j < raw.cols; ++j) {
        for (std::size_t i = 0; i < raw.rows; ++i) {
            double v = raw.at(i, j);
            if (i == 0 || v < c.min[j]) c.min[j] = v;
            if (i == 0 || v > c.max[j]) c.max[j] = v;
        }
    }
    return c;
}

Matrix apply_normalization(const Matrix& raw, const NormConstants& c) {
    if (c.min.size() != raw.cols || c.max.size() != raw.cols)
        throw ShapeError("apply_normalization: constants for " + std::to_string(c.min.size()) + " dims, matrix has " +
                         std::to_string(raw.cols));
    Matrix out(raw.rows, raw.cols);
    for (std::size_t i = 0; i < raw.rows; ++i)
        for (std::size_t j = 0; j < raw.cols; ++j) {
            double span = c.max[j] - c.min[j];
            out.at(i, j) = span > 0.0 ? (raw.at(i, j) - c.min[j]) / span : 0.0;
        }
    return out;
}

std::vector<std::size_t> ProteinDataset::indices(SplitTag tag) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (split[i] == tag) out.push_back(i);
    return out;
}

void ProteinDataset::normalize_sequences() {
    seq_norm = fit_normalization(seq_raw);
    seq_embed = apply_normalization(seq_raw, seq_norm);
}

void ProteinDataset::validate() const {
    std::size_t n = ids.size();
    std::set<std::string> seen;
    for (const auto& id : ids)
        if (!seen.insert(id).second) throw DataError(DataErrorCode::duplicate_id, "protein id '" + id + "' repeats");
    check_rows(ppi, n, "ppi.tsv");
    if (ppi.cols != n)
        throw DataError(DataErrorCode::column_count, "ppi.tsv: " + std::to_string(ppi.cols) + " columns for " +
                                                         std::to_string(n) + " ids");
    check_rows(attributes, n, "attributes.tsv");
    check_rows(seq_raw, n, "seq_embed.tsv");
    check_rows(labels, n, "labels.tsv");
    if (has_labels.size() != n || split.size() != n || seq_embed.rows != n)
        throw DataError(DataErrorCode::row_count, "dataset tables are not row-aligned to ids");
    if (labels.cols != terms.size())
        throw DataError(DataErrorCode::column_count, "labels.tsv: " + std::to_string(labels.cols) + " columns for " +
                                                         std::to_string(terms.size()) + " terms");
    for (const Matrix* m : {&ppi, &attributes, &seq_raw, &labels})
        for (double v : m->values)
            if (!std::isfinite(v)) throw DataError(DataErrorCode::nan_value, "non-finite matrix entry");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (ppi.at(i, j) < 0.0)
                throw DataError(DataErrorCode::negative_value, "ppi.tsv: negative weight for " + ids[i]);
            if (std::abs(ppi.at(i, j) - ppi.at(j, i)) > 1e-9)
                throw DataError(DataErrorCode::alignment, "ppi matrix is not symmetric at " + ids[i] + ", " + ids[j]);
        }
    check_binary(attributes, "attributes.tsv");
    check_binary(labels, "labels.tsv");
    for (std::size_t i = 0; i < n; ++i)
        if (split[i] != SplitTag::pretrain_only && !has_labels[i])
            throw DataError(DataErrorCode::alignment,
                            "protein '" + ids[i] + "' is tagged " + tag_name(split[i]) + " but has no label row");
}

Matrix ppi_features(const ProteinDataset& ds) {
    double top = 0.0;
    for (double v : ds.ppi.values) top = std::max(top, v);
    Matrix out = ds.ppi;
    if (top > 0.0)
        for (double& v : out.values) v /= top;
    return out;
}

Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
    Matrix out(rows.size(), m.cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= m.rows) throw ShapeError("take_rows: row " + std::to_string(rows[r]) + " out of range");
        std::copy(m.row(rows[r]).begin(), m.row(rows[r]).end(), out.row(r).begin());
    }
    return out;
}

std::string matrix_tsv(const Matrix& m) {
    std::string out = "#" + std::to_string(m.rows) + "\t" + std::to_string(m.cols) + "\n";
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            if (j) out += "\t";
            out += fmt(m.at(i, j));
        }
        out += "\n";
    }
    return out;
}

Matrix parse_matrix_tsv(const std::string& text, const std::string& source) {
    auto lines = split_lines(text);
    auto [rows, cols] = parse_header(lines, source);
    if (lines.size() - 1 != rows)
        throw DataError(DataErrorCode::row_count, source + ": header declares " + std::to_string(rows) +
                                                      " rows, found " + std::to_string(lines.size() - 1));
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        auto fields = split_fields(lines[i + 1]);
        if (cols == 0 && fields.size() == 1 && fields[0].empty()) continue;
        if (fields.size() != cols)
            throw DataError(DataErrorCode::column_count, source + " row " + std::to_string(i + 1) + ": " +
                                                             std::to_string(fields.size()) + " fields, expected " +
                                                             std::to_string(cols));
        for (std::size_t j = 0; j < cols; ++j)
            m.at(i, j) = parse_value(fields[j], source + " row " + std::to_string(i + 1));
    }
    return m;
}

std::uint64_t fingerprint(const ProteinDataset& ds) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const std::string& s) {
        for (unsigned char ch : s) {
            h ^= ch;
            h *= 1099511628211ULL;
        }
        h ^= 0xff;
        h *= 1099511628211ULL;
    };
    mix(list_text(ds.ids));
    mix(matrix_tsv(ds.ppi));
    mix(matrix_tsv(ds.attributes));
    mix(matrix_tsv(ds.seq_raw));
    mix(labels_text(ds));
    mix(list_text(ds.terms));
    mix(splits_text(ds));
    return h;
}

ProteinDataset load_dataset(const fs::path& dir) {
    for (const char* name :
         {"ids.txt", "ppi.tsv", "attributes.tsv", "seq_embed.tsv", "labels.tsv", "terms.txt", "splits.tsv"})
        if (!fs::exists(dir / name)) throw DataError(DataErrorCode::missing_file, (dir / name).string() + " not found");

    ProteinDataset ds;
    ds.ids = parse_list(read_file(dir / "ids.txt"), "ids.txt");
    std::size_t n = ds.ids.size();
    std::map<std::string, std::size_t> row_of;
    for (std::size_t i = 0; i < n; ++i)
        if (!row_of.emplace(ds.ids[i], i).second)
            throw DataError(DataErrorCode::duplicate_id, "ids.txt: '" + ds.ids[i] + "' repeats");

    Matrix raw_ppi = parse_matrix_tsv(read_file(dir / "ppi.tsv"), "ppi.tsv");
    check_rows(raw_ppi, n, "ppi.tsv");
    if (raw_ppi.cols != n)
        throw DataError(DataErrorCode::column_count, "ppi.tsv: " + std::to_string(raw_ppi.cols) + " columns for " +
                                                         std::to_string(n) + " ids");
    ds.ppi = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (raw_ppi.at(i, j) < 0.0)
                throw DataError(DataErrorCode::negative_value, "ppi.tsv: negative weight in row of " + ds.ids[i]);
            ds.ppi.at(i, j) = i == j ? raw_ppi.at(i, i) : 0.5 * (raw_ppi.at(i, j) + raw_ppi.at(j, i));
        }

    ds.attributes = parse_matrix_tsv(read_file(dir / "attributes.tsv"), "attributes.tsv");
    check_rows(ds.attributes, n, "attributes.tsv");
    check_binary(ds.attributes, "attributes.tsv");

    ds.seq_raw = parse_matrix_tsv(read_file(dir / "seq_embed.tsv"), "seq_embed.tsv");
    check_rows(ds.seq_raw, n, "seq_embed.tsv");
    ds.normalize_sequences();

    ds.terms = parse_list(read_file(dir / "terms.txt"), "terms.txt");

    auto label_lines = split_lines(read_file(dir / "labels.tsv"));
    auto [label_rows, label_cols] = parse_header(label_lines, "labels.tsv");
    if (label_lines.size() - 1 != label_rows)
        throw DataError(DataErrorCode::row_count, "labels.tsv: header declares " + std::to_string(label_rows) +
                                                      " rows, found " + std::to_string(label_lines.size() - 1));
    if (label_cols != ds.terms.size())
        throw DataError(DataErrorCode::column_count, "labels.tsv: " + std::to_string(label_cols) +
                                                         " columns for " + std::to_string(ds.terms.size()) + " terms");
    ds.labels = Matrix(n, label_cols);
    ds.has_labels.assign(n, false);
    for (std::size_t r = 1; r < label_lines.size(); ++r) {
        auto fields = split_fields(label_lines[r]);
        std::string where = "labels.tsv row " + std::to_string(r);
        if (fields.size() != label_cols + 1)
            throw DataError(DataErrorCode::column_count, where + ": expected id plus " + std::to_string(label_cols) +
                                                             " values");
        auto it = row_of.find(fields[0]);
        if (it == row_of.end()) throw DataError(DataErrorCode::alignment, where + ": unknown protein '" + fields[0] + "'");
        if (ds.has_labels[it->second])
            throw DataError(DataErrorCode::duplicate_id, where + ": second label row for '" + fields[0] + "'");
        ds.has_labels[it->second] = true;
        for (std::size_t j = 0; j < label_cols; ++j) {
            double v = parse_value(fields[j + 1], where);
            if (v != 0.0 && v != 1.0)
                throw DataError(DataErrorCode::non_binary, where + ": label " + fields[j + 1] + " for '" + fields[0] + "'");
            ds.labels.at(it->second, j) = v;
        }
    }

    auto split_lines_ = split_lines(read_file(dir / "splits.tsv"));
    auto [split_rows, split_cols] = parse_header(split_lines_, "splits.tsv");
    if (split_cols != 2) throw DataError(DataErrorCode::column_count, "splits.tsv: expected 2 columns (id, tag)");
    if (split_rows != n || split_lines_.size() - 1 != n)
        throw DataError(DataErrorCode::row_count, "splits.tsv: " + std::to_string(split_lines_.size() - 1) +
                                                      " rows for " + std::to_string(n) + " ids");
    ds.split.assign(n, SplitTag::train);
    std::vector<bool> tagged(n, false);
    for (std::size_t r = 1; r < split_lines_.size(); ++r) {
        auto fields = split_fields(split_lines_[r]);
        if (fields.size() != 2)
            throw DataError(DataErrorCode::column_count, "splits.tsv row " + std::to_string(r) + ": expected id and tag");
        auto it = row_of.find(fields[0]);
        if (it == row_of.end())
            throw DataError(DataErrorCode::alignment, "splits.tsv: unknown protein '" + fields[0] + "'");
        if (tagged[it->second]) throw DataError(DataErrorCode::duplicate_id, "splits.tsv: '" + fields[0] + "' repeats");
        tagged[it->second] = true;
        ds.split[it->second] = parse_tag(fields[1]);
    }

    ds.validate();
    return ds;
}

void save_dataset(const ProteinDataset& ds, const fs::path& dir) {
    ds.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    write_file(dir / "ids.txt", list_text(ds.ids));
    write_file(dir / "ppi.tsv", matrix_tsv(ds.ppi));
    write_file(dir / "attributes.tsv", matrix_tsv(ds.attributes));
    write_file(dir / "seq_embed.tsv", matrix_tsv(ds.seq_raw));
    write_file(dir / "seq_norm.tsv", norm_text(ds.seq_norm));
    write_file(dir / "labels.tsv", labels_text(ds));
    write_file(dir / "terms.txt", list_text(ds.terms));
    write_file(dir / "splits.tsv", splits_text(ds));
}

void SynthSpec::validate() const {
    if (n_proteins == 0) throw ValidationError("synth: n_proteins must be positive");
    if (n_terms == 0) throw ValidationError("synth: n_terms must be positive");
    if (n_clusters == 0 || n_clusters > n_proteins)
        throw ValidationError("synth: n_clusters must be in [1, n_proteins], got " + std::to_string(n_clusters));
    if (attr_width == 0 || seq_width == 0) throw ValidationError("synth: feature widths must be positive");
    if (!(noise >= 0.0 && noise < 1.0)) throw ValidationError("synth: noise must lie in [0, 1), got " + fmt(noise));
}

ProteinDataset synth_dataset(const SynthSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::size_t n = spec.n_proteins, k = spec.n_clusters, m = spec.n_terms;

    std::vector<std::size_t> cluster(n);
    for (std::size_t i = 0; i < n; ++i) cluster[i] = i % k;
    shuffle(cluster, rng);

    // Label sets: term j is always owned by cluster j % k, plus random extras.
    // Sets are redrawn until distinct from earlier clusters, so label-keyed
    // clusters match the generating groups whenever 2^m - 1 >= k.
    Matrix proto_labels(k, m);
    for (std::size_t c = 0; c < k; ++c) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            for (std::size_t j = 0; j < m; ++j)
                proto_labels.at(c, j) = (j % k == c || rng.bernoulli(0.15)) ? 1.0 : 0.0;
            bool any = false;
            for (std::size_t j = 0; j < m; ++j) any = any || proto_labels.at(c, j) == 1.0;
            if (!any) proto_labels.at(c, rng.below(m)) = 1.0;
            bool unique = true;
            for (std::size_t p = 0; p < c && unique; ++p)
                unique = !std::equal(proto_labels.row(p).begin(), proto_labels.row(p).end(),
                                     proto_labels.row(c).begin());
            if (unique) break;
        }
    }

    Matrix proto_attr(k, spec.attr_width);
    for (double& v : proto_attr.values) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    Matrix proto_seq(k, spec.seq_width);
    // Bimodal centres (+-1 per dimension) keep normalized embeddings near the
    // ends of [0, 1], where a reconstruction BCE can approach zero. Members
    // flip the sign of a dimension with probability noise / 2 and add a small
    // Gaussian jitter.
    for (double& v : proto_seq.values) v = rng.bernoulli(0.5) ? 1.0 : -1.0;

    ProteinDataset ds;
    for (std::size_t i = 0; i < n; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "P%05zu", i);
        ds.ids.push_back(buf);
    }
    for (std::size_t j = 0; j < m; ++j) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "GO:%07zu", j + 1);
        ds.terms.push_back(buf);
    }

    // Binary edges: a dense within-cluster block with self-loops (so
    // noise-free rows of a cluster coincide); each off-diagonal edge flips
    // with probability noise / 2.
    ds.ppi = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.ppi.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            double v = cluster[i] == cluster[j] ? 1.0 : 0.0;
            if (rng.bernoulli(0.5 * spec.noise)) v = 1.0 - v;
            ds.ppi.at(i, j) = v;
            ds.ppi.at(j, i) = v;
        }
    }

    ds.attributes = Matrix(n, spec.attr_width);
    ds.seq_raw = Matrix(n, spec.seq_width);
    ds.labels = Matrix(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t c = cluster[i];
        for (std::size_t a = 0; a < spec.attr_width; ++a) {
            double v = proto_attr.at(c, a);
            if (rng.bernoulli(0.5 * spec.noise)) v = 1.0 - v;
            ds.attributes.at(i, a) = v;
        }
        for (std::size_t e = 0; e < spec.seq_width; ++e) {
            double sign = rng.bernoulli(0.5 * spec.noise) ? -1.0 : 1.0;
            ds.seq_raw.at(i, e) = sign * proto_seq.at(c, e) + 0.25 * spec.noise * rng.normal();
        }
        for (std::size_t j = 0; j < m; ++j) ds.labels.at(i, j) = proto_labels.at(c, j);
    }
    ds.has_labels.assign(n, true);
    ds.split.assign(n, SplitTag::train);
    ds.normalize_sequences();
    ds.validate();
    return ds;
}

SplitReport split_dataset(ProteinDataset& ds, const std::array<double, 3>& fractions, std::uint64_t seed) {
    double total = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0)) throw ValidationError("split fractions must be nonnegative");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1, got " + fmt(total));

    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.has_labels[i]) pool.push_back(i);
    Rng rng(seed);
    shuffle(pool, rng);

    // The small epsilon keeps products such as 10 * 0.7 from flooring to 6.
    auto share = [&](double f) {
        return static_cast<std::size_t>(std::floor(static_cast<double>(pool.size()) * f + 1e-9));
    };
    SplitReport rep;
    rep.train = share(fractions[0]);
    rep.valid = std::min(share(fractions[1]), pool.size() - rep.train);
    rep.test = pool.size() - rep.train - rep.valid;
    const char* names[3] = {"train", "valid", "test"};
    std::size_t counts[3] = {rep.train, rep.valid, rep.test};
    for (int s = 0; s < 3; ++s)
        if (fractions[s] > 0.0 && counts[s] == 0)
            throw DataError(DataErrorCode::empty_split, std::string(names[s]) + " split is empty for " +
                                                            std::to_string(pool.size()) + " labelled proteins");

    for (std::size_t r = 0; r < pool.size(); ++r) {
        SplitTag tag = r < rep.train ? SplitTag::train : r < rep.train + rep.valid ? SplitTag::valid : SplitTag::test;
        ds.split[pool[r]] = tag;
    }
    for (std::size_t j = 0; j < ds.labels.cols; ++j) {
        bool present = false;
        for (std::size_t i : ds.indices(SplitTag::train)) present = present || ds.labels.at(i, j) == 1.0;
        if (!present) rep.train_absent_terms.push_back(ds.terms[j]);
    }
    return rep;
}

}  // namespace dsrpgo::data
