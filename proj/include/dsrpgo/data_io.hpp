#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dsrpgo/errors.hpp"
#include "dsrpgo/matrix.hpp"

namespace dsrpgo::data {

enum class DataErrorCode {
    missing_file,
    parse,
    row_count,
    column_count,
    nan_value,
    non_binary,
    negative_value,
    duplicate_id,
    alignment,
    unknown_tag,
    empty_split,
};

std::string code_name(DataErrorCode code);

/// Structured dataset error. Missing files are I/O failures; every other code
/// is a validation failure.
class DataError : public Error {
public:
    DataError(DataErrorCode code, const std::string& message);
    DataErrorCode code() const noexcept { return code_; }

private:
    DataErrorCode code_;
};

enum class SplitTag { train, valid, test, pretrain_only };

std::string tag_name(SplitTag tag);
SplitTag parse_tag(const std::string& text);

/// Per-dimension min-max constants; constant dimensions map to 0.
struct NormConstants {
    std::vector<double> min;
    std::vector<double> max;
};

NormConstants fit_normalization(const Matrix& raw);
Matrix apply_normalization(const Matrix& raw, const NormConstants& c);

struct ProteinDataset {
    std::vector<std::string> ids;
    Matrix ppi;         // N x N, symmetric, nonnegative
    Matrix attributes;  // N x A, binary
    Matrix seq_raw;     // N x E as stored on disk
    Matrix seq_embed;   // N x E, min-max normalized
    NormConstants seq_norm;
    Matrix labels;      // N x M, binary; rows without labels are zero
    std::vector<bool> has_labels;
    std::vector<std::string> terms;
    std::vector<SplitTag> split;

    std::size_t size() const { return ids.size(); }
    std::vector<std::size_t> indices(SplitTag tag) const;
    /// Raises DataError on any broken invariant.
    void validate() const;
    /// Recomputes seq_norm and seq_embed from seq_raw.
    void normalize_sequences();
};

/// PPI rows scaled by the largest entry, so every value lies in [0, 1].
Matrix ppi_features(const ProteinDataset& ds);

/// Rows of `m` at `rows`, in order.
Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows);

/// 64-bit FNV-1a over the canonical serialization of every file.
std::uint64_t fingerprint(const ProteinDataset& ds);

/// Reads a dataset directory: ids.txt, ppi.tsv, attributes.tsv,
/// seq_embed.tsv, labels.tsv, terms.txt, splits.tsv.
ProteinDataset load_dataset(const std::filesystem::path& dir);

/// Writes the canonical form of every file plus seq_norm.tsv (min row, max row).
void save_dataset(const ProteinDataset& ds, const std::filesystem::path& dir);

/// Canonical TSV text of a matrix: "#rows\tcols" then rows of %.17g values.
std::string matrix_tsv(const Matrix& m);
Matrix parse_matrix_tsv(const std::string& text, const std::string& source);

struct SynthSpec {
    std::size_t n_proteins = 64;
    std::size_t n_terms = 8;
    std::size_t n_clusters = 8;
    std::size_t attr_width = 16;
    std::size_t seq_width = 16;
    double noise = 0.3;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Clustered synthetic dataset: members of a cluster share a label set, a
/// dense PPI block, an attribute prototype and a sequence centre, each
/// perturbed by `noise`. All proteins are tagged train.
ProteinDataset synth_dataset(const SynthSpec& spec);

struct SplitReport {
    std::size_t train = 0;
    std::size_t valid = 0;
    std::size_t test = 0;
    std::vector<std::string> train_absent_terms;
};

/// Shuffled three-way assignment of labelled proteins. Counts are
/// floor(n * f_train), floor(n * f_valid) and the remainder to test.
/// A split with a positive fraction that receives no protein is an error.
SplitReport split_dataset(ProteinDataset& ds, const std::array<double, 3>& fractions, std::uint64_t seed);

}  // namespace dsrpgo::data
