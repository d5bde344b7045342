#include "dsrpgo/cli.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "dsrpgo/checkpoint.hpp"
#include "dsrpgo/data_io.hpp"
#include "dsrpgo/errors.hpp"
#include "dsrpgo/gradcheck.hpp"
#include "dsrpgo/metrics.hpp"
#include "dsrpgo/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dsrpgo::cli {

int exit_code_for(const std::exception& e) {
    if (const auto* err = dynamic_cast<const Error*>(&e)) {
        const std::string& k = err->kind();
        if (k == "io") return kIo;
        if (k == "divergence" || k == "domain") return kDivergence;
        return kValidation;
    }
    if (dynamic_cast<const fs::filesystem_error*>(&e)) return kIo;
    return kValidation;
}

const std::vector<Ablation>& ablations() {
    static const std::vector<Ablation> rows = [] {
        std::vector<Ablation> r;
        Ablation msl;
        msl.id = "MSLB";
        msl.branch = model::Branch::msl_only;
        r.push_back(msl);
        Ablation mil;
        mil.id = "MILB";
        mil.branch = model::Branch::mil_only;
        r.push_back(mil);
        Ablation full;
        full.id = "MSLB+MILB";
        r.push_back(full);
        Ablation a = full;
        a.id = "w/o-BInM";
        a.use_binm = false;
        r.push_back(a);
        a = full;
        a.id = "w/o-DSM";
        a.use_dsm = false;
        r.push_back(a);
        a = full;
        a.id = "w/o-SP-F";
        a.use_spatial = false;
        r.push_back(a);
        a = full;
        a.id = "w/o-SE-F";
        a.use_sequence = false;
        r.push_back(a);
        a = full;
        a.id = "w/o-pretrain";
        a.pretrained = false;
        r.push_back(a);
        return r;
    }();
    return rows;
}

model::ModelConfig apply(const Ablation& a, model::ModelConfig base) {
    base.branch = a.branch;
    base.use_binm = base.use_binm && a.use_binm;
    base.use_dsm = base.use_dsm && a.use_dsm;
    base.use_spatial = base.use_spatial && a.use_spatial;
    base.use_sequence = base.use_sequence && a.use_sequence;
    return base;
}

namespace {

// ---- flag registry ----------------------------------------------------------

// Binds long flags to config keys one-to-one. Values from a --config file
// become the defaults, so explicit flags override them.
class FlagSet {
public:
    FlagSet(CLI::App* app, json preset) : app_(app), preset_(std::move(preset)) {}

    template <typename T>
    void option(const std::string& key, T fallback, const std::string& help, bool hidden = false) {
        auto holder = std::make_shared<T>(std::move(fallback));
        if (preset_.contains(key)) {
            try {
                *holder = preset_.at(key).get<T>();
            } catch (const json::exception& e) {
                throw ValidationError("config key '" + key + "': " + e.what());
            }
        }
        CLI::Option* o = app_->add_option("--" + key, *holder, help)->capture_default_str();
        if (hidden) o->group("");
        readers_.emplace_back(key, [holder] { return json(*holder); });
        holders_.push_back(holder);
    }

    void flag(const std::string& key, const std::string& help, bool hidden = false) {
        auto holder = std::make_shared<bool>(false);
        if (preset_.contains(key)) {
            if (!preset_.at(key).is_boolean()) throw ValidationError("config key '" + key + "' must be a boolean");
            *holder = preset_.at(key).get<bool>();
        }
        CLI::Option* o = app_->add_flag("--" + key, *holder, help);
        if (hidden) o->group("");
        readers_.emplace_back(key, [holder] { return json(*holder); });
        holders_.push_back(holder);
    }

    /// True when the key was set on the command line or by the config file.
    bool given(const std::string& key) const { return app_->count("--" + key) > 0 || preset_.contains(key); }

    json resolved() const {
        json j = json::object();
        for (const auto& [key, read] : readers_) j[key] = read();
        return j;
    }

    void check_preset() const {
        static const std::set<std::string> reserved = {"command", "timestamp", "threads"};
        for (const auto& [key, value] : preset_.items()) {
            if (reserved.count(key)) continue;
            bool known = std::any_of(readers_.begin(), readers_.end(), [&](const auto& r) { return r.first == key; });
            if (!known) throw ValidationError("unknown key '" + key + "' in config file");
        }
    }

    CLI::App* app() const { return app_; }

private:
    CLI::App* app_;
    json preset_;
    std::vector<std::pair<std::string, std::function<json()>>> readers_;
    std::vector<std::shared_ptr<void>> holders_;
};

// ---- shared helpers ---------------------------------------------------------

std::string num(double v) {
    if (std::isnan(v)) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string short_num(double v) {
    if (std::isnan(v)) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string utc_now() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("write failed for " + path.string());
}

std::size_t thread_cap() {
    const char* env = std::getenv("DSRPGO_THREADS");
    if (env == nullptr) return 1;
    const std::string text(env);
    std::size_t pos = 0;
    unsigned long long n = 0;
    try {
        n = std::stoull(text, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (text.empty() || pos != text.size() || n == 0 || text.front() == '-')
        throw ValidationError("DSRPGO_THREADS must be a positive integer, got '" + text + "'");
    return n;
}

// Paths identify inputs and outputs but not the computation, so they stay
// out of the config fingerprint.
const std::set<std::string> kPathKeys = {"out", "data", "pretrained", "model", "resume", "scores"};

struct RunContext {
    std::string command;
    json config;
    bool timestamps = true;
    std::size_t threads = 1;
    std::ostream* out = nullptr;

    std::string fingerprint() const {
        json j = config;
        for (const auto& k : kPathKeys) j.erase(k);
        j.erase("no-timestamp");
        j["command"] = command;
        return ckpt::fingerprint_of(j.dump());
    }

    std::uint64_t seed() const { return config.contains("seed") ? config.at("seed").get<std::uint64_t>() : 0; }

    std::string str(const std::string& k) const { return config.at(k).get<std::string>(); }
    bool flag(const std::string& k) const { return config.at(k).get<bool>(); }
    double real(const std::string& k) const { return config.at(k).get<double>(); }
    std::size_t count(const std::string& k) const { return config.at(k).get<std::size_t>(); }
    long long integer(const std::string& k) const { return config.at(k).get<long long>(); }

    fs::path out_dir() const {
        const std::string o = str("out");
        if (o.empty()) throw ValidationError(command + ": --out is required");
        return o;
    }

    /// Provenance comment block for emitted tables.
    std::string header(const std::vector<std::pair<std::string, std::string>>& extra = {}) const {
        std::string h = "# dsrpgo " + command + "\n# fingerprint: " + fingerprint() + "\n";
        if (config.contains("seed")) h += "# seed: " + std::to_string(seed()) + "\n";
        for (const auto& [k, v] : extra) h += "# " + k + ": " + v + "\n";
        if (timestamps) h += "# timestamp: " + utc_now() + "\n";
        return h;
    }

    void write_resolved(const fs::path& dir) const {
        json j = config;
        j["command"] = command;
        j["threads"] = threads;
        if (timestamps) j["timestamp"] = utc_now();
        fs::create_directories(dir);
        write_text(dir / "resolved-config.json", j.dump(2) + "\n");
    }
};

// ---- common flag groups -----------------------------------------------------

void schedule_flags(FlagSet& f, train::Phase phase) {
    const train::Schedule d =
        phase == train::Phase::pretrain ? train::Schedule::pretrain_default() : train::Schedule::finetune_default();
    f.option<long long>("epochs", -1, "total epochs split evenly over the two stages (-1 keeps the stage flags)");
    f.option<std::size_t>("epochs-stage1", d.stage1_epochs, "epochs at the first learning rate");
    f.option<std::size_t>("epochs-stage2", d.stage2_epochs, "epochs at the second learning rate");
    f.option<double>("lr-stage1", d.stage1_lr, "first-stage learning rate");
    f.option<double>("lr-stage2", d.stage2_lr, "second-stage learning rate");
    f.option<double>("dropout", d.dropout, "dropout rate during training");
    f.option<std::size_t>("batch-size", d.batch_size, "mini-batch size (0 trains full-batch)");
    f.option<double>("weight-decay", d.weight_decay, "decoupled weight decay");
    f.option<double>("max-grad-norm", d.max_grad_norm, "gradient clipping norm (0 disables)");
    f.option<std::uint64_t>("seed", d.seed, "random seed");
}

void codec_flags(FlagSet& f) {
    const codecs::CodecConfig d;
    f.option<std::size_t>("latent", d.latent, "latent width D");
    f.option<std::size_t>("token", d.token, "token width");
    f.option<std::size_t>("mamba-inner", d.mamba_inner, "BiMamba inner width");
    f.option<std::size_t>("mamba-state", d.mamba_state, "selective-scan state size");
    f.option<std::size_t>("attn-blocks", d.attn_blocks, "self-attention blocks per sequence codec stage");
    f.option<std::size_t>("attn-heads", d.attn_heads, "attention heads in the sequence codec");
}

void model_flags(FlagSet& f) {
    const model::ModelConfig d;
    f.option<std::size_t>("msl-blocks", d.msl_blocks, "self-attention blocks in the shared-learning branch");
    f.option<std::size_t>("msl-heads", d.msl_heads, "attention heads in the shared-learning branch");
    f.option<std::size_t>("binm-heads", d.binm_heads, "attention heads in the interaction module");
    f.option<std::size_t>("gate-hidden", d.gate_hidden, "hidden width of the selection gate");
    f.option<std::size_t>("expert-hidden", d.expert_hidden, "hidden width of each expert");
    f.option<std::size_t>("expert-out", d.expert_out, "output width of each expert");
    f.option<std::size_t>("predictor-hidden", d.predictor_hidden, "hidden width of the predictor");
    f.option<double>("threshold", d.threshold, "expert selection threshold t (negative means 1/experts)");
    f.option<double>("gamma-pos", d.gamma_pos, "positive focusing exponent");
    f.option<double>("gamma-neg", d.gamma_neg, "negative focusing exponent");
    f.option<std::string>("branch", model::branch_name(d.branch), "both, msl-only or mil-only");
    f.flag("no-binm", "drop the interaction module");
    f.flag("no-dsm", "replace dynamic selection with plain concatenation");
    f.flag("no-spatial", "drop the PPI and attribute inputs");
    f.flag("no-sequence", "drop the sequence input");
}

// Splits --epochs into the stage counts, the first stage taking the odd epoch.
void resolve_epochs(json& c) {
    const long long e = c.at("epochs").get<long long>();
    if (e < -1) throw ValidationError("--epochs must be >= 0");
    if (e >= 0) {
        c["epochs-stage1"] = static_cast<std::size_t>((e + 1) / 2);
        c["epochs-stage2"] = static_cast<std::size_t>(e / 2);
    }
}

train::Schedule schedule_from(const RunContext& r, train::Phase phase) {
    train::Schedule s =
        phase == train::Phase::pretrain ? train::Schedule::pretrain_default() : train::Schedule::finetune_default();
    s.phase = phase;
    s.stage1_epochs = r.count("epochs-stage1");
    s.stage2_epochs = r.count("epochs-stage2");
    s.stage1_lr = r.real("lr-stage1");
    s.stage2_lr = r.real("lr-stage2");
    s.dropout = r.real("dropout");
    s.batch_size = r.count("batch-size");
    s.weight_decay = r.real("weight-decay");
    s.max_grad_norm = r.real("max-grad-norm");
    s.seed = r.seed();
    s.validate();
    return s;
}

codecs::CodecConfig codec_from(const RunContext& r) {
    codecs::CodecConfig c;
    c.latent = r.count("latent");
    c.token = r.count("token");
    c.mamba_inner = r.count("mamba-inner");
    c.mamba_state = r.count("mamba-state");
    c.attn_blocks = r.count("attn-blocks");
    c.attn_heads = r.count("attn-heads");
    return c;
}

model::ModelConfig model_from(const RunContext& r) {
    model::ModelConfig m;
    m.codec = codec_from(r);
    m.msl_blocks = r.count("msl-blocks");
    m.msl_heads = r.count("msl-heads");
    m.binm_heads = r.count("binm-heads");
    m.gate_hidden = r.count("gate-hidden");
    m.expert_hidden = r.count("expert-hidden");
    m.expert_out = r.count("expert-out");
    m.predictor_hidden = r.count("predictor-hidden");
    m.threshold = r.real("threshold");
    m.gamma_pos = r.real("gamma-pos");
    m.gamma_neg = r.real("gamma-neg");
    m.branch = model::parse_branch(r.str("branch"));
    m.use_binm = !r.flag("no-binm");
    m.use_dsm = !r.flag("no-dsm");
    m.use_spatial = !r.flag("no-spatial");
    m.use_sequence = !r.flag("no-sequence");
    return m;
}

struct Pretrained {
    ckpt::Checkpoint pssi;
    ckpt::Checkpoint psei;
};

Pretrained load_pretrained_dir(const fs::path& dir) {
    Pretrained p;
    p.pssi = ckpt::load(dir / "pssi.ckpt");
    p.psei = ckpt::load(dir / "psei.ckpt");
    return p;
}

// Codec widths not set explicitly follow the pretrained checkpoint.
void adopt_codec(json& c, const FlagSet& f, const ckpt::Checkpoint& pssi) {
    if (!pssi.meta.contains("codec")) return;
    const auto codec = pssi.meta.at("codec").get<codecs::CodecConfig>();
    const json cj = codec;
    const std::map<std::string, std::string> keys = {{"latent", "latent"},           {"token", "token"},
                                                     {"mamba-inner", "mamba_inner"}, {"mamba-state", "mamba_state"},
                                                     {"attn-blocks", "attn_blocks"}, {"attn-heads", "attn_heads"}};
    for (const auto& [flag, field] : keys)
        if (!f.given(flag)) c[flag] = cj.at(field);
}

std::string curve_tsv(const RunContext& r, const std::string& codec, const std::vector<train::CurveRow>& curve,
                      const std::string& dataset_fp) {
    std::string s = r.header({{"codec", codec}, {"dataset", dataset_fp}});
    s += "epoch\tlr\tloss\n";
    for (const auto& row : curve) s += std::to_string(row.epoch) + "\t" + num(row.lr) + "\t" + num(row.loss) + "\n";
    return s;
}

std::string metrics_row(std::size_t epoch, double lr, double loss, const std::string& split, const train::Scores& s) {
    return std::to_string(epoch) + "\t" + num(lr) + "\t" + num(loss) + "\t" + split + "\t" + num(s.fmax) + "\t" +
           num(s.m_aupr) + "\t" + num(s.M_aupr) + "\t" + num(s.f1) + "\t" + num(s.acc) + "\n";
}

std::string metrics_tsv(const RunContext& r, const train::FinetuneResult& res, bool has_valid, bool track_train,
                        const std::string& dataset_fp) {
    std::string s = r.header({{"dataset", dataset_fp},
                              {"best_epoch", std::to_string(res.best_epoch)},
                              {"selection", res.selection}});
    s += "epoch\tlr\tloss\tsplit\tfmax\tm-aupr\tM-aupr\tf1\tacc\n";
    for (const auto& e : res.curve) {
        if (track_train) s += metrics_row(e.epoch, e.lr, e.loss, "train", e.train);
        if (has_valid) s += metrics_row(e.epoch, e.lr, e.loss, "valid", e.valid);
    }
    return s;
}

void require_test_split(const data::ProteinDataset& ds) {
    if (ds.indices(data::SplitTag::test).empty())
        throw data::DataError(data::DataErrorCode::empty_split, "dataset has no test split; evaluation needs one");
}

Matrix flatten_rows(const Tensor& t) {
    const std::size_t n = t.dim(0);
    return train::to_matrix(reshape(t, {n, t.numel() / n}));
}

double db_or_nan(const Matrix& emb, const std::vector<std::size_t>& clusters) {
    try {
        return metrics::davies_bouldin(emb, clusters);
    } catch (const ValidationError&) {
        return std::nan("");
    }
}

/// Raw-input, branch and fused embeddings scored against the label clusters.
std::vector<std::pair<std::string, double>> db_scores(const train::Features& f, const model::ForwardTrace* trace) {
    const auto clusters = metrics::clusters_from_labels(f.labels);
    const double nan = std::nan("");
    std::vector<std::pair<std::string, double>> out = {
        {"o_PPI", db_or_nan(f.ppi, clusters)},
        {"o_Attribute", db_or_nan(f.attr, clusters)},
        {"o_Sequence", db_or_nan(f.seq, clusters)},
    };
    auto learned = [&](const Tensor* t) { return t && t->defined() ? db_or_nan(flatten_rows(*t), clusters) : nan; };
    out.emplace_back("MSL", learned(trace ? &trace->msl : nullptr));
    out.emplace_back("MIL", learned(trace ? &trace->mil : nullptr));
    out.emplace_back("DSM", learned(trace ? &trace->fused : nullptr));
    return out;
}

// ---- synth ------------------------------------------------------------------

void synth_flags(FlagSet& f) {
    const data::SynthSpec d;
    f.option<std::size_t>("proteins", d.n_proteins, "number of proteins");
    f.option<std::size_t>("terms", d.n_terms, "number of GO terms");
    f.option<std::size_t>("clusters", d.n_clusters, "number of latent clusters");
    f.option<std::size_t>("attr-width", d.attr_width, "attribute bag-of-words width");
    f.option<std::size_t>("seq-width", d.seq_width, "sequence embedding width");
    f.option<double>("noise", d.noise, "perturbation level in [0, 1)");
    f.option<std::uint64_t>("seed", d.seed, "random seed");
    f.option<std::string>("split", "0.8,0.1,0.1", "train,valid,test fractions");
    f.option<std::string>("out", "", "output dataset directory");
    f.flag("force", "write into a non-empty output directory");
    f.flag("no-timestamp", "omit timestamps from emitted files");
}

std::array<double, 3> parse_fractions(const std::string& text) {
    std::array<double, 3> f{};
    std::stringstream ss(text);
    std::string part;
    std::size_t i = 0;
    while (std::getline(ss, part, ',')) {
        if (i == 3) throw ValidationError("--split takes three comma-separated fractions, got '" + text + "'");
        try {
            std::size_t pos = 0;
            f[i] = std::stod(part, &pos);
            if (pos != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw ValidationError("--split: '" + part + "' is not a number");
        }
        ++i;
    }
    if (i != 3) throw ValidationError("--split takes three comma-separated fractions, got '" + text + "'");
    return f;
}

int cmd_synth(RunContext& r) {
    data::SynthSpec spec;
    spec.n_proteins = r.count("proteins");
    spec.n_terms = r.count("terms");
    spec.n_clusters = r.count("clusters");
    spec.attr_width = r.count("attr-width");
    spec.seq_width = r.count("seq-width");
    spec.noise = r.real("noise");
    spec.seed = r.seed();
    spec.validate();
    const auto fractions = parse_fractions(r.str("split"));
    const fs::path out = r.out_dir();
    if (fs::exists(out) && !fs::is_empty(out) && !r.flag("force"))
        throw ValidationError("output directory " + out.string() + " is not empty (pass --force to overwrite)");

    auto ds = data::synth_dataset(spec);
    const auto split = data::split_dataset(ds, fractions, spec.seed);
    data::save_dataset(ds, out);
    r.write_resolved(out);

    auto& o = *r.out;
    o << "synthetic dataset written to " << out.string() << "\n";
    o << "proteins " << ds.size() << ", terms " << ds.terms.size() << ", clusters " << spec.n_clusters
      << ", noise " << spec.noise << "\n";
    o << "split train " << split.train << ", valid " << split.valid << ", test " << split.test << "\n";
    if (!split.train_absent_terms.empty()) {
        o << "terms without a train positive:";
        for (const auto& t : split.train_absent_terms) o << " " << t;
        o << "\n";
    }
    o << "dataset fingerprint " << hex64(data::fingerprint(ds)) << "\n";
    return kOk;
}

// ---- pretrain ---------------------------------------------------------------

void pretrain_flags(FlagSet& f) {
    f.option<std::string>("data", "", "dataset directory");
    f.option<std::string>("out", "", "output directory for checkpoints and curves");
    schedule_flags(f, train::Phase::pretrain);
    codec_flags(f);
    f.flag("no-timestamp", "omit timestamps from emitted files");
}

int cmd_pretrain(RunContext& r) {
    resolve_epochs(r.config);
    const fs::path out = r.out_dir();
    const auto ds = data::load_dataset(r.str("data"));
    const auto schedule = schedule_from(r, train::Phase::pretrain);
    const auto codec = codec_from(r);
    auto& o = *r.out;
    o << "pretraining on " << ds.size() << " proteins, " << schedule.total_epochs() << " epochs (" << schedule.stage1_epochs
      << " at lr " << schedule.stage1_lr << ", then " << schedule.stage2_epochs << " at lr " << schedule.stage2_lr
      << ")\n";

    const auto res = train::pretrain(ds, codec, schedule);
    const std::string dfp = hex64(data::fingerprint(ds));
    fs::create_directories(out);
    ckpt::save(res.pssi_run.checkpoint, out / "pssi.ckpt");
    ckpt::save(res.psei_run.checkpoint, out / "psei.ckpt");
    write_text(out / "pssi_curve.tsv", curve_tsv(r, "pssi", res.pssi_run.curve, dfp));
    write_text(out / "psei_curve.tsv", curve_tsv(r, "psei", res.psei_run.curve, dfp));
    r.write_resolved(out);

    auto line = [&](const char* name, const train::CodecRun& run) {
        o << name << " loss " << short_num(run.initial_loss) << " -> " << short_num(run.final_loss) << " (ratio "
          << short_num(run.initial_loss > 0 ? run.final_loss / run.initial_loss : std::nan("")) << ")\n";
    };
    line("L_sp", res.pssi_run);
    line("L_se", res.psei_run);
    o << "checkpoints written to " << out.string() << "\n";
    return kOk;
}

// ---- finetune ---------------------------------------------------------------

void finetune_common_flags(FlagSet& f) {
    f.option<std::string>("data", "", "dataset directory");
    f.option<std::string>("out", "", "output directory");
    f.option<std::string>("pretrained", "", "directory holding pssi.ckpt and psei.ckpt");
    f.flag("no-pretrained", "train every parameter from scratch");
    schedule_flags(f, train::Phase::finetune);
    codec_flags(f);
    model_flags(f);
    f.flag("no-timestamp", "omit timestamps from emitted files");
}

void finetune_flags_full(FlagSet& f) {
    finetune_common_flags(f);
    f.option<std::string>("resume", "", "state.ckpt of an interrupted run to continue");
    f.option<long long>("stop-after", -1, "stop once this many epochs are complete (-1 runs the schedule)");
    f.flag("no-track-train", "skip per-epoch train-split metrics");
}

// Loads the pretrained pair named by the flags; nullptr-free when absent.
std::unique_ptr<Pretrained> pretrained_from(RunContext& r, const FlagSet& f, bool wanted = true) {
    const std::string dir = r.str("pretrained");
    const bool none = r.flag("no-pretrained");
    if (!dir.empty() && none) throw ValidationError("pass either --pretrained DIR or --no-pretrained, not both");
    if (!wanted || none) return nullptr;
    if (dir.empty()) throw ValidationError(r.command + ": pass --pretrained DIR or --no-pretrained");
    auto p = std::make_unique<Pretrained>(load_pretrained_dir(dir));
    adopt_codec(r.config, f, p->pssi);
    return p;
}

int cmd_finetune(RunContext& r, const FlagSet& f) {
    resolve_epochs(r.config);
    const fs::path out = r.out_dir();
    const auto ds = data::load_dataset(r.str("data"));
    const auto pre = pretrained_from(r, f);

    train::FinetuneOptions opts;
    opts.model = model_from(r);
    opts.schedule = schedule_from(r, train::Phase::finetune);
    opts.track_train = !r.flag("no-track-train");
    if (pre) {
        opts.pssi = &pre->pssi;
        opts.psei = &pre->psei;
    }
    ckpt::Checkpoint resume;
    if (!r.str("resume").empty()) {
        resume = ckpt::load(r.str("resume"));
        opts.resume = &resume;
    }
    const long long stop = r.integer("stop-after");
    if (stop < -1) throw ValidationError("--stop-after must be >= 0");
    if (stop >= 0) opts.stop_after = static_cast<std::size_t>(stop);

    auto& o = *r.out;
    const std::size_t total = opts.schedule.total_epochs();
    opts.on_epoch = [&](const train::EpochRecord& e) {
        if (e.epoch % 10 == 0 || e.epoch == total)
            o << "epoch " << e.epoch << " lr " << e.lr << " loss " << short_num(e.loss) << " train fmax "
              << short_num(e.train.fmax) << " valid fmax " << short_num(e.valid.fmax) << "\n";
    };
    o << "fine-tuning " << (pre ? "from pretrained encoders" : "from scratch") << ", " << total << " epochs\n";
    const auto res = train::finetune(ds, opts);

    const std::string dfp = hex64(data::fingerprint(ds));
    fs::create_directories(out);
    ckpt::save(res.model_checkpoint, out / "model.ckpt");
    ckpt::save(res.state_checkpoint, out / "state.ckpt");
    const bool has_valid = !ds.indices(data::SplitTag::valid).empty();
    write_text(out / "metrics.tsv", metrics_tsv(r, res, has_valid, opts.track_train, dfp));
    json manifest = res.manifest;
    manifest["pretrained"] = pre ? json(r.str("pretrained")) : json(nullptr);
    manifest["best_epoch"] = res.best_epoch;
    manifest["best_fmax"] = std::isnan(res.best_fmax) ? json(nullptr) : json(res.best_fmax);
    manifest["selection"] = res.selection;
    manifest["epochs_completed"] = res.curve.empty() ? 0 : res.curve.back().epoch;
    manifest["fingerprint"] = res.model_checkpoint.fingerprint;
    write_text(out / "manifest.json", manifest.dump(2) + "\n");
    r.write_resolved(out);

    o << "best epoch " << res.best_epoch << " (" << res.selection << " " << short_num(res.best_fmax) << ")\n";
    o << "model written to " << (out / "model.ckpt").string() << "\n";
    return kOk;
}

// ---- eval -------------------------------------------------------------------

void eval_flags(FlagSet& f) {
    f.option<std::string>("data", "", "dataset directory");
    f.option<std::string>("model", "", "model.ckpt from finetune");
    f.option<std::string>("scores", "", "score matrix TSV for the test rows, instead of a model");
    f.option<std::string>("out", "", "output directory for the report");
    f.flag("no-timestamp", "omit timestamps from emitted files");
}

int cmd_eval(RunContext& r) {
    const fs::path out = r.out_dir();
    const auto ds = data::load_dataset(r.str("data"));
    require_test_split(ds);
    const bool has_model = !r.str("model").empty();
    const bool has_scores = !r.str("scores").empty();
    if (has_model == has_scores) throw ValidationError("eval: pass exactly one of --model or --scores");

    const auto rows = ds.indices(data::SplitTag::test);
    const auto f = train::gather(ds, rows);
    Matrix scores;
    model::ForwardTrace trace;
    bool traced = false;
    if (has_model) {
        const auto mc = ckpt::load(r.str("model"));
        const auto m = train::load_model(mc);
        scores = train::predict(m, f, &trace);
        traced = true;
    } else {
        std::ifstream in(r.str("scores"), std::ios::binary);
        if (!in) throw IoError("cannot open " + r.str("scores"));
        std::stringstream buf;
        buf << in.rdbuf();
        scores = data::parse_matrix_tsv(buf.str(), r.str("scores"));
        if (scores.rows != rows.size() || scores.cols != ds.terms.size())
            throw ShapeError("--scores holds " + std::to_string(scores.rows) + "x" + std::to_string(scores.cols) +
                             ", test split needs " + std::to_string(rows.size()) + "x" +
                             std::to_string(ds.terms.size()));
    }

    auto report = metrics::evaluate(scores, f.labels, ds.terms);
    report.db_scores = db_scores(f, traced ? &trace : nullptr);
    fs::create_directories(out);
    const std::string dfp = hex64(data::fingerprint(ds));
    write_text(out / "report.txt", r.header({{"dataset", dfp}, {"split", "test"}}) + metrics::report_text(report));
    json rj = metrics::report_json(report);
    rj["fingerprint"] = r.fingerprint();
    rj["dataset"] = dfp;
    rj["test_proteins"] = rows.size();
    write_text(out / "report.json", rj.dump(2) + "\n");

    std::string pred = r.header({{"dataset", dfp}, {"split", "test"}}) + "id";
    for (const auto& t : ds.terms) pred += "\t" + t;
    pred += "\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        pred += ds.ids[rows[i]];
        for (double v : scores.row(i)) pred += "\t" + num(v);
        pred += "\n";
    }
    write_text(out / "predictions.tsv", pred);
    r.write_resolved(out);

    auto& o = *r.out;
    o << "test proteins " << rows.size() << "\n";
    o << "fmax " << short_num(report.fmax.value) << "  m-aupr " << short_num(report.m_aupr) << "  M-aupr "
      << short_num(report.M_aupr) << "  f1 " << short_num(report.f1) << "  acc " << short_num(report.acc) << "\n";
    o << "db";
    for (const auto& [name, v] : report.db_scores) o << "  " << name << " " << short_num(v);
    o << "\nreport written to " << (out / "report.txt").string() << "\n";
    return kOk;
}

// ---- gradcheck --------------------------------------------------------------

void gradcheck_flags(FlagSet& f) {
    f.option<std::uint64_t>("seed", 1, "random seed for inputs and parameters");
    f.option<double>("tolerance", 1e-4, "maximum relative error");
    f.option<std::size_t>("sample", 0, "parameter elements sampled per module (0 checks all)");
    f.option<std::string>("out", "", "optional directory for gradcheck.tsv");
    f.flag("inject-wrong-grad", "append an op with a deliberately wrong backward", true);
    f.flag("no-timestamp", "omit timestamps from emitted files");
}

int cmd_gradcheck(RunContext& r) {
    gradcheck::SuiteOptions opts;
    opts.seed = r.seed();
    opts.tolerance = r.real("tolerance");
    opts.sample = r.count("sample");
    opts.inject_wrong_grad = r.flag("inject-wrong-grad");
    if (!(opts.tolerance > 0)) throw ValidationError("--tolerance must be positive");
    const auto rows = gradcheck::run_suite(opts);

    std::string table = "op\tchecked\tmax_rel_error\tstatus\n";
    for (const auto& row : rows)
        table += row.op + "\t" + std::to_string(row.checked) + "\t" + num(row.max_rel_error) + "\t" +
                 (row.passed ? "pass" : "FAIL") + "\n";
    const bool ok = gradcheck::all_passed(rows);
    auto& o = *r.out;
    o << table;
    o << (ok ? "all " : "FAILED: ") << std::count_if(rows.begin(), rows.end(), [](const auto& x) { return x.passed; })
      << "/" << rows.size() << " operations within " << opts.tolerance << "\n";
    if (!r.str("out").empty()) {
        const fs::path out = r.str("out");
        fs::create_directories(out);
        write_text(out / "gradcheck.tsv", r.header() + table);
        r.write_resolved(out);
    }
    return ok ? kOk : kValidation;
}

// ---- ablate -----------------------------------------------------------------

void ablate_flags(FlagSet& f) {
    finetune_common_flags(f);
    f.option<std::string>("only", "", "run a single configuration (e.g. w/o-DSM)");
}

int cmd_ablate(RunContext& r, const FlagSet& f) {
    resolve_epochs(r.config);
    const fs::path out = r.out_dir();
    const auto ds = data::load_dataset(r.str("data"));
    require_test_split(ds);

    std::vector<Ablation> rows;
    const std::string only = r.str("only");
    for (const auto& a : ablations())
        if (only.empty() || a.id == only) rows.push_back(a);
    if (rows.empty()) {
        std::string names;
        for (const auto& a : ablations()) names += " " + a.id;
        throw ValidationError("--only '" + only + "' is not a configuration; choose from:" + names);
    }
    const bool need_pretrained = std::any_of(rows.begin(), rows.end(), [](const Ablation& a) { return a.pretrained; });
    const auto pre = pretrained_from(r, f, need_pretrained);
    if (need_pretrained && !pre)
        throw ValidationError("ablate: rows other than w/o-pretrain need --pretrained DIR");

    const auto base = model_from(r);
    const auto schedule = schedule_from(r, train::Phase::finetune);
    const auto test = train::gather(ds, ds.indices(data::SplitTag::test));
    const std::string dfp = hex64(data::fingerprint(ds));

    auto& o = *r.out;
    std::string table = r.header({{"dataset", dfp}, {"split", "test"}}) + "config\tfmax\tm-aupr\tM-aupr\tf1\tacc\n";
    json detail = json::array();
    for (const auto& a : rows) {
        train::FinetuneOptions opts;
        opts.model = apply(a, base);
        opts.schedule = schedule;
        if (a.pretrained) {
            opts.pssi = &pre->pssi;
            opts.psei = &pre->psei;
        }
        const auto res = train::finetune(ds, opts);
        const auto s = train::score(train::predict(res.model, test), test.labels);
        table += a.id + "\t" + num(s.fmax) + "\t" + num(s.m_aupr) + "\t" + num(s.M_aupr) + "\t" + num(s.f1) + "\t" +
                 num(s.acc) + "\n";
        const double train_fmax = res.curve.empty() ? std::nan("") : res.curve.back().train.fmax;
        detail.push_back({{"config", a.id},
                          {"model", res.model.config()},
                          {"best_epoch", res.best_epoch},
                          {"selection", res.selection},
                          {"final_train_fmax", std::isnan(train_fmax) ? json(nullptr) : json(train_fmax)},
                          {"test_fmax", std::isnan(s.fmax) ? json(nullptr) : json(s.fmax)}});
        o << a.id << ": test fmax " << short_num(s.fmax) << ", final train fmax " << short_num(train_fmax)
          << ", best epoch " << res.best_epoch << "\n";
    }
    fs::create_directories(out);
    write_text(out / "ablation.tsv", table);
    write_text(out / "ablation.json", detail.dump(2) + "\n");
    r.write_resolved(out);
    o << "table written to " << (out / "ablation.tsv").string() << "\n";
    return kOk;
}

// ---- dispatch ---------------------------------------------------------------

struct PreScan {
    std::string command;
    std::string config_path;
};

PreScan prescan(const std::vector<std::string>& args) {
    PreScan p;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (p.command.empty() && !a.empty() && a[0] != '-') p.command = a;
        if (a == "--config" && i + 1 < args.size()) p.config_path = args[i + 1];
        if (a.rfind("--config=", 0) == 0) p.config_path = a.substr(9);
    }
    return p;
}

json load_config(const std::string& path, const std::string& command) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError("config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw ValidationError("config " + path + " must hold a JSON object");
    if (j.contains("command") && j.at("command") != command)
        throw ValidationError("config " + path + " is for '" + j.at("command").get<std::string>() + "', not '" +
                              command + "'");
    return j;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        const PreScan scan = prescan(args);
        const json preset = scan.config_path.empty() ? json::object() : load_config(scan.config_path, scan.command);

        CLI::App app{"Multimodal protein function prediction: pretraining, fine-tuning and evaluation"};
        app.name("dsrpgo");
        app.require_subcommand(1);

        struct Command {
            CLI::App* sub;
            std::unique_ptr<FlagSet> flags;
            std::function<int(RunContext&, const FlagSet&)> handler;
        };
        std::vector<Command> commands;
        std::string config_path;
        auto add = [&](const std::string& name, const std::string& help, void (*define)(FlagSet&),
                       std::function<int(RunContext&, const FlagSet&)> handler) {
            CLI::App* sub = app.add_subcommand(name, help);
            auto flags = std::make_unique<FlagSet>(sub, name == scan.command ? preset : json::object());
            sub->add_option("--config", config_path, "JSON file of flag values (explicit flags win)");
            define(*flags);
            commands.push_back({sub, std::move(flags), std::move(handler)});
        };
        add("synth", "generate a clustered synthetic dataset", synth_flags,
            [](RunContext& r, const FlagSet&) { return cmd_synth(r); });
        add("pretrain", "reconstructive pretraining of the spatial and sequence codecs", pretrain_flags,
            [](RunContext& r, const FlagSet&) { return cmd_pretrain(r); });
        add("finetune", "train the prediction model on the train split", finetune_flags_full, cmd_finetune);
        add("eval", "score the test split and report metrics and cluster quality", eval_flags,
            [](RunContext& r, const FlagSet&) { return cmd_eval(r); });
        add("gradcheck", "compare analytic gradients with central differences", gradcheck_flags,
            [](RunContext& r, const FlagSet&) { return cmd_gradcheck(r); });
        add("ablate", "run the component ablation table", ablate_flags, cmd_ablate);

        std::vector<std::string> argv_store = {"dsrpgo"};
        argv_store.insert(argv_store.end(), args.begin(), args.end());
        std::vector<char*> argv;
        for (auto& a : argv_store) argv.push_back(a.data());
        try {
            app.parse(static_cast<int>(argv.size()), argv.data());
        } catch (const CLI::ParseError& e) {
            const int code = app.exit(e, out, err);
            return code == 0 ? kOk : kValidation;
        }

        for (auto& c : commands) {
            if (!c.sub->parsed()) continue;
            c.flags->check_preset();
            RunContext ctx;
            ctx.command = c.sub->get_name();
            ctx.config = c.flags->resolved();
            ctx.timestamps = !ctx.config.at("no-timestamp").get<bool>();
            ctx.threads = thread_cap();
            ctx.out = &out;
            return c.handler(ctx, *c.flags);
        }
        return kValidation;
    } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        std::string kind = "error";
        if (const auto* de = dynamic_cast<const data::DataError*>(&e))
            kind = "data error (" + data::code_name(de->code()) + ")";
        else if (const auto* le = dynamic_cast<const Error*>(&e))
            kind = le->kind() + " error";
        err << "dsrpgo: " << kind << ": " << e.what() << "\n";
        return code;
    }
}

}  // namespace dsrpgo::cli
