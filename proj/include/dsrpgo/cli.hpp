#pragma once

#include <exception>
#include <iosfwd>
#include <string>
#include <vector>

#include "dsrpgo/model.hpp"

namespace dsrpgo::cli {

/// Stable process exit codes.
enum ExitCode : int { kOk = 0, kValidation = 1, kDivergence = 2, kIo = 3 };

/// Maps a library error to its exit code: validation and shape errors 1,
/// divergence and domain errors 2, I/O errors 3.
int exit_code_for(const std::exception& e);

/// Runs one subcommand. `args` excludes the program name. Human-readable
/// progress goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// One configuration of the ablation table.
struct Ablation {
    std::string id;  // accepted by --only
    model::Branch branch = model::Branch::both;
    bool use_binm = true;
    bool use_dsm = true;
    bool use_spatial = true;
    bool use_sequence = true;
    bool pretrained = true;
};

/// The eight rows in table order: MSLB, MILB, MSLB+MILB, w/o-BInM, w/o-DSM,
/// w/o-SP-F, w/o-SE-F, w/o-pretrain.
const std::vector<Ablation>& ablations();

model::ModelConfig apply(const Ablation& a, model::ModelConfig base);

}  // namespace dsrpgo::cli
