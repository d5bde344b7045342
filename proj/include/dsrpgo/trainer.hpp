#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "dsrpgo/checkpoint.hpp"
#include "dsrpgo/codecs.hpp"
#include "dsrpgo/data_io.hpp"
#include "dsrpgo/model.hpp"
#include "dsrpgo/nn.hpp"
#include "json.hpp"

namespace dsrpgo::train {

enum class Phase { pretrain, finetune };

std::string phase_name(Phase p);

/// Two-stage learning-rate schedule plus the optimizer and batching knobs.
struct Schedule {
    Phase phase = Phase::finetune;
    std::size_t stage1_epochs = 50;
    std::size_t stage2_epochs = 50;
    double stage1_lr = 1e-3;
    double stage2_lr = 1e-4;
    double dropout = 0.3;
    std::size_t batch_size = 0;  // 0 trains full-batch
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double max_grad_norm = 0.0;  // 0 disables clipping
    std::uint64_t seed = 1;

    std::size_t total_epochs() const { return stage1_epochs + stage2_epochs; }
    /// Rate used for 0-based epoch `epoch`.
    double lr_at(std::size_t epoch) const { return epoch < stage1_epochs ? stage1_lr : stage2_lr; }
    void validate() const;

    /// 200 epochs: 100 at 1e-3 then 100 at 1e-4, dropout 0.1.
    static Schedule pretrain_default();
    /// 100 epochs: 50 at 1e-3 then 50 at 1e-4, dropout 0.3.
    static Schedule finetune_default();
};

void to_json(nlohmann::json& j, const Schedule& s);
void from_json(const nlohmann::json& j, Schedule& s);

struct AdamState {
    std::size_t step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

/// One AdamW update with bias correction; decay multiplies the parameter by
/// (1 - lr * weight_decay) before the moment step. Parameters without a
/// gradient see a zero gradient. A non-finite gradient raises
/// DivergenceError naming the parameter.
void optimizer_step(const nn::ParamList& params, AdamState& state, double lr, double weight_decay,
                    double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
double clip_grad_norm(const nn::ParamList& params, double max_norm);

/// Optimizer moments and RNG position: everything besides the parameters
/// that a resumed run needs.
struct LoopState {
    std::size_t epoch = 0;  // completed epochs
    AdamState adam;
    Rng rng;
};

void add_loop_state(ckpt::Checkpoint& c, const LoopState& s, const nn::ParamList& params);
LoopState read_loop_state(const ckpt::Checkpoint& c, const nn::ParamList& params);

struct CurveRow {
    std::size_t epoch = 0;  // 1-based
    double lr = 0.0;
    double loss = 0.0;
};

/// Model inputs for a set of dataset rows.
struct Features {
    Matrix ppi;
    Matrix attr;
    Matrix seq;
    Matrix labels;

    model::ModalFeatures modal() const;
};

Features gather(const data::ProteinDataset& ds, const std::vector<std::size_t>& rows);
std::vector<std::size_t> all_rows(const data::ProteinDataset& ds);

// ---- pretraining --------------------------------------------------------

struct CodecRun {
    std::vector<CurveRow> curve;
    double initial_loss = 0.0;  // dropout off, all pretraining proteins
    double final_loss = 0.0;
    ckpt::Checkpoint checkpoint;
};

struct PretrainResult {
    codecs::PssiCodec pssi;
    codecs::PseiCodec psei;
    CodecRun pssi_run;
    CodecRun psei_run;
};

/// Separate reconstruction runs for the spatial and sequence codecs over
/// every protein in the dataset. A non-finite loss raises DivergenceError
/// naming the epoch.
PretrainResult pretrain(const data::ProteinDataset& ds, const codecs::CodecConfig& codec, const Schedule& schedule);

/// Codec parameters of a pretraining checkpoint keyed by parameter name.
model::TensorMap tensors_of(const ckpt::Checkpoint& c);

// ---- fine-tuning --------------------------------------------------------

struct Scores {
    double fmax = std::numeric_limits<double>::quiet_NaN();
    double m_aupr = std::numeric_limits<double>::quiet_NaN();
    double M_aupr = std::numeric_limits<double>::quiet_NaN();
    double f1 = std::numeric_limits<double>::quiet_NaN();
    double acc = std::numeric_limits<double>::quiet_NaN();
};

/// Metrics when labels hold a positive, NaN otherwise.
Scores score(const Matrix& predictions, const Matrix& labels);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double lr = 0.0;
    double loss = 0.0;
    Scores train;
    Scores valid;
};

void to_json(nlohmann::json& j, const EpochRecord& r);
void from_json(const nlohmann::json& j, EpochRecord& r);

struct FinetuneOptions {
    model::ModelConfig model;
    Schedule schedule = Schedule::finetune_default();
    const ckpt::Checkpoint* pssi = nullptr;  // both or neither
    const ckpt::Checkpoint* psei = nullptr;
    bool track_train = true;                 // eval-mode train metrics every epoch
    const ckpt::Checkpoint* resume = nullptr;
    std::size_t stop_after = std::numeric_limits<std::size_t>::max();
    std::function<void(const EpochRecord&)> on_epoch;
};

struct FinetuneResult {
    model::DsrpgoModel model;  // best-epoch parameters
    std::vector<EpochRecord> curve;
    std::size_t best_epoch = 0;
    double best_fmax = std::numeric_limits<double>::quiet_NaN();
    std::string selection;  // "valid-fmax", "train-fmax" or "last"
    model::LoadManifest manifest;
    ckpt::Checkpoint model_checkpoint;  // best parameters
    ckpt::Checkpoint state_checkpoint;  // resumable training state
};

/// Fits the full model to the train split with the asymmetric loss, scoring
/// the valid split after every epoch and retaining the best-valid-Fmax
/// parameters (train Fmax, then the last epoch, when no valid split exists).
FinetuneResult finetune(const data::ProteinDataset& ds, const FinetuneOptions& options);

/// Config fingerprint of a fine-tuning run: model config, schedule, pretrained
/// checkpoint fingerprints and dataset content.
std::string finetune_fingerprint(const data::ProteinDataset& ds, const FinetuneOptions& options);

/// Restores a model saved in a model checkpoint.
model::DsrpgoModel load_model(const ckpt::Checkpoint& c);

/// Eval-mode predictions and trace.
Matrix predict(const model::DsrpgoModel& m, const Features& f, model::ForwardTrace* trace = nullptr);

Matrix to_matrix(const Tensor& t);

}  // namespace dsrpgo::train
