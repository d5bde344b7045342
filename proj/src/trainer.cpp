#include "dsrpgo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dsrpgo/errors.hpp"
#include "dsrpgo/metrics.hpp"

namespace dsrpgo::train {
namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double num_of(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

nlohmann::json norm_json(const data::NormConstants& c) { return {{"min", c.min}, {"max", c.max}}; }

Tensor tensor_of(const Matrix& m) { return Tensor({m.rows, m.cols}, m.values); }

void zero_grads(const nn::ParamList& params) {
    for (const auto& p : params) const_cast<Tensor&>(p.tensor).zero_grad();
}

using LossFn = std::function<Tensor(const std::vector<std::size_t>& rows, const nn::Context& ctx)>;

// One epoch of (mini-)batch AdamW steps; returns the row-weighted mean loss.
double run_epoch(const nn::ParamList& params, const Schedule& s, LoopState& st, std::size_t items,
                 const LossFn& loss_fn) {
    double lr = s.lr_at(st.epoch);
    std::vector<std::size_t> order(items);
    for (std::size_t i = 0; i < items; ++i) order[i] = i;
    std::size_t batch = (s.batch_size == 0 || s.batch_size >= items) ? items : s.batch_size;
    if (batch < items)
        for (std::size_t i = items; i > 1; --i) std::swap(order[i - 1], order[st.rng.below(i)]);

    double total = 0.0;
    for (std::size_t begin = 0; begin < items; begin += batch) {
        std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                      order.begin() + static_cast<std::ptrdiff_t>(std::min(items, begin + batch)));
        zero_grads(params);
        nn::Context ctx{true, s.dropout, &st.rng};
        Tensor loss;
        try {
            loss = loss_fn(rows, ctx);
        } catch (const DomainError& e) {
            throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(st.epoch + 1));
        }
        double value = loss.item();
        if (!std::isfinite(value))
            throw DivergenceError("non-finite loss at epoch " + std::to_string(st.epoch + 1));
        backward(loss);
        if (s.max_grad_norm > 0.0) clip_grad_norm(params, s.max_grad_norm);
        try {
            optimizer_step(params, st.adam, lr, s.weight_decay, s.beta1, s.beta2, s.eps);
        } catch (const DivergenceError& e) {
            throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(st.epoch + 1));
        }
        total += value * static_cast<double>(rows.size());
    }
    ++st.epoch;
    return items ? total / static_cast<double>(items) : 0.0;
}

bool is_identity(const std::vector<std::size_t>& rows, std::size_t n) {
    if (rows.size() != n) return false;
    for (std::size_t i = 0; i < n; ++i)
        if (rows[i] != i) return false;
    return true;
}

}  // namespace

std::string phase_name(Phase p) { return p == Phase::pretrain ? "pretrain" : "finetune"; }

void Schedule::validate() const {
    if (!(stage1_lr >= 0.0) || !(stage2_lr >= 0.0)) throw ValidationError("schedule: learning rates must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("schedule: dropout must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ValidationError("schedule: weight decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ValidationError("schedule: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ValidationError("schedule: eps must be positive");
    if (!(max_grad_norm >= 0.0)) throw ValidationError("schedule: max_grad_norm must be >= 0");
}

Schedule Schedule::pretrain_default() {
    Schedule s;
    s.phase = Phase::pretrain;
    s.stage1_epochs = 100;
    s.stage2_epochs = 100;
    s.stage1_lr = 1e-3;
    s.stage2_lr = 1e-4;
    s.dropout = 0.1;
    return s;
}

Schedule Schedule::finetune_default() { return Schedule{}; }

void to_json(nlohmann::json& j, const Schedule& s) {
    j = {{"phase", phase_name(s.phase)},
         {"stage1_epochs", s.stage1_epochs},
         {"stage2_epochs", s.stage2_epochs},
         {"stage1_lr", s.stage1_lr},
         {"stage2_lr", s.stage2_lr},
         {"dropout", s.dropout},
         {"batch_size", s.batch_size},
         {"weight_decay", s.weight_decay},
         {"beta1", s.beta1},
         {"beta2", s.beta2},
         {"eps", s.eps},
         {"max_grad_norm", s.max_grad_norm},
         {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, Schedule& s) {
    Schedule d = j.value("phase", std::string("finetune")) == "pretrain" ? Schedule::pretrain_default()
                                                                         : Schedule::finetune_default();
    s = d;
    s.stage1_epochs = j.value("stage1_epochs", d.stage1_epochs);
    s.stage2_epochs = j.value("stage2_epochs", d.stage2_epochs);
    s.stage1_lr = j.value("stage1_lr", d.stage1_lr);
    s.stage2_lr = j.value("stage2_lr", d.stage2_lr);
    s.dropout = j.value("dropout", d.dropout);
    s.batch_size = j.value("batch_size", d.batch_size);
    s.weight_decay = j.value("weight_decay", d.weight_decay);
    s.beta1 = j.value("beta1", d.beta1);
    s.beta2 = j.value("beta2", d.beta2);
    s.eps = j.value("eps", d.eps);
    s.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
    s.seed = j.value("seed", d.seed);
}

void optimizer_step(const nn::ParamList& params, AdamState& state, double lr, double weight_decay, double beta1,
                    double beta2, double eps) {
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad())
            if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in parameter " + p.name);
    }
    ++state.step;
    double t = static_cast<double>(state.step);
    double c1 = 1.0 - std::pow(beta1, t);
    double c2 = 1.0 - std::pow(beta2, t);
    for (const auto& p : params) {
        std::size_t n = p.tensor.numel();
        auto& m = state.m[p.name];
        auto& v = state.v[p.name];
        m.resize(n, 0.0);
        v.resize(n, 0.0);
        auto w = const_cast<Tensor&>(p.tensor).mutable_data();
        bool has = p.tensor.has_grad();
        auto g = has ? p.tensor.grad() : std::span<const double>{};
        for (std::size_t i = 0; i < n; ++i) {
            double gi = has ? g[i] : 0.0;
            w[i] *= 1.0 - lr * weight_decay;
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
}

double clip_grad_norm(const nn::ParamList& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        if (p.tensor.has_grad())
            for (double g : p.tensor.grad()) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double f = max_norm / norm;
        for (const auto& p : params)
            if (p.tensor.has_grad())
                for (double& g : const_cast<Tensor&>(p.tensor).mutable_grad()) g *= f;
    }
    return norm;
}

void add_loop_state(ckpt::Checkpoint& c, const LoopState& s, const nn::ParamList& params) {
    c.meta["loop"] = {{"epoch", s.epoch}, {"adam_step", s.adam.step}, {"rng", s.rng.state()}};
    for (const auto& p : params) {
        auto m = s.adam.m.count(p.name) ? s.adam.m.at(p.name) : std::vector<double>(p.tensor.numel(), 0.0);
        auto v = s.adam.v.count(p.name) ? s.adam.v.at(p.name) : std::vector<double>(p.tensor.numel(), 0.0);
        c.add("adam.m/" + p.name, p.tensor.shape(), std::move(m));
        c.add("adam.v/" + p.name, p.tensor.shape(), std::move(v));
    }
}

LoopState read_loop_state(const ckpt::Checkpoint& c, const nn::ParamList& params) {
    LoopState s;
    const auto& loop = c.meta.at("loop");
    s.epoch = loop.at("epoch").get<std::size_t>();
    s.adam.step = loop.at("adam_step").get<std::size_t>();
    s.rng.set_state(loop.at("rng").get<std::string>());
    for (const auto& p : params) {
        s.adam.m[p.name] = c.at("adam.m/" + p.name).values;
        s.adam.v[p.name] = c.at("adam.v/" + p.name).values;
    }
    return s;
}

model::ModalFeatures Features::modal() const { return {tensor_of(ppi), tensor_of(attr), tensor_of(seq)}; }

Features gather(const data::ProteinDataset& ds, const std::vector<std::size_t>& rows) {
    return {data::take_rows(data::ppi_features(ds), rows), data::take_rows(ds.attributes, rows),
            data::take_rows(ds.seq_embed, rows), data::take_rows(ds.labels, rows)};
}

std::vector<std::size_t> all_rows(const data::ProteinDataset& ds) {
    std::vector<std::size_t> rows(ds.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return rows;
}

Matrix to_matrix(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("to_matrix: rank-2 tensor required, got " + shape_str(t.shape()));
    return Matrix(t.dim(0), t.dim(1), std::vector<double>(t.data().begin(), t.data().end()));
}

// ---- pretraining --------------------------------------------------------

PretrainResult pretrain(const data::ProteinDataset& ds, const codecs::CodecConfig& codec, const Schedule& schedule) {
    schedule.validate();
    if (ds.size() == 0) throw ValidationError("pretrain: dataset is empty");
    Features all = gather(ds, all_rows(ds));
    std::size_t n = ds.size();
    std::string dataset_fp = hex64(data::fingerprint(ds));

    PretrainResult out;
    Rng init_sp(derive_seed(schedule.seed, 10));
    Rng init_se(derive_seed(schedule.seed, 20));
    out.pssi = codecs::PssiCodec({all.ppi.cols, all.attr.cols}, codec, init_sp);
    out.psei = codecs::PseiCodec(all.seq.cols, codec, init_se);

    std::vector<Tensor> full_sources{tensor_of(all.ppi), tensor_of(all.attr)};
    Tensor full_seq = tensor_of(all.seq);

    auto sp_loss = [&](const std::vector<std::size_t>& rows, const nn::Context& ctx) {
        if (is_identity(rows, n)) return out.pssi.loss(full_sources, ctx);
        return out.pssi.loss({tensor_of(data::take_rows(all.ppi, rows)), tensor_of(data::take_rows(all.attr, rows))},
                             ctx);
    };
    auto se_loss = [&](const std::vector<std::size_t>& rows, const nn::Context& ctx) {
        if (is_identity(rows, n)) return out.psei.loss(full_seq, ctx);
        return out.psei.loss(tensor_of(data::take_rows(all.seq, rows)), ctx);
    };

    auto run = [&](const std::string& kind, const nn::ParamList& params, const LossFn& fn, std::uint64_t stream,
                   const nlohmann::json& shape_meta) {
        CodecRun r;
        nn::Context eval_ctx;
        {
            NoGradGuard guard;
            r.initial_loss = fn(all_rows(ds), eval_ctx).item();
        }
        LoopState st;
        st.rng = Rng(derive_seed(schedule.seed, stream));
        while (st.epoch < schedule.total_epochs()) {
            double lr = schedule.lr_at(st.epoch);
            double loss = run_epoch(params, schedule, st, n, fn);
            r.curve.push_back({st.epoch, lr, loss});
        }
        {
            NoGradGuard guard;
            r.final_loss = fn(all_rows(ds), eval_ctx).item();
        }
        nlohmann::json fp = {{"kind", kind}, {"codec", codec}, {"schedule", schedule}, {"dataset", dataset_fp}};
        fp.update(shape_meta);
        r.checkpoint.fingerprint = ckpt::fingerprint_of(fp.dump());
        r.checkpoint.meta = fp;
        r.checkpoint.meta["phase"] = "pretrain";
        r.checkpoint.meta["epochs_completed"] = st.epoch;
        r.checkpoint.meta["seq_norm"] = norm_json(ds.seq_norm);
        r.checkpoint.meta["initial_loss"] = r.initial_loss;
        r.checkpoint.meta["final_loss"] = r.final_loss;
        ckpt::add_params(r.checkpoint, params);
        return r;
    };

    nn::ParamList sp_params;
    out.pssi.collect(sp_params);
    out.pssi_run = run("pssi", sp_params, sp_loss, 11, {{"source_widths", {all.ppi.cols, all.attr.cols}}});
    nn::ParamList se_params;
    out.psei.collect(se_params);
    out.psei_run = run("psei", se_params, se_loss, 21, {{"embed_width", all.seq.cols}});
    return out;
}

model::TensorMap tensors_of(const ckpt::Checkpoint& c) {
    model::TensorMap out;
    for (const auto& g : c.groups)
        if (g.name.rfind("adam.", 0) != 0) out.emplace(g.name, Tensor(g.shape, g.values));
    return out;
}

// ---- fine-tuning --------------------------------------------------------

Scores score(const Matrix& predictions, const Matrix& labels) {
    Scores s;
    bool any = std::any_of(labels.values.begin(), labels.values.end(), [](double v) { return v > 0.5; });
    if (!any || labels.rows == 0) return s;
    s.fmax = metrics::fmax(predictions, labels).value;
    s.m_aupr = metrics::aupr_micro(predictions, labels);
    s.M_aupr = metrics::aupr_macro(predictions, labels).value;
    auto fa = metrics::f1_acc(predictions, labels);
    s.f1 = fa.f1;
    s.acc = fa.acc;
    return s;
}

namespace {

nlohmann::json scores_json(const Scores& s) {
    return {{"fmax", num(s.fmax)}, {"m_aupr", num(s.m_aupr)}, {"M_aupr", num(s.M_aupr)}, {"f1", num(s.f1)},
            {"acc", num(s.acc)}};
}

Scores scores_of(const nlohmann::json& j) {
    return {num_of(j.at("fmax")), num_of(j.at("m_aupr")), num_of(j.at("M_aupr")), num_of(j.at("f1")),
            num_of(j.at("acc"))};
}

model::ModelConfig resolve_widths(const data::ProteinDataset& ds, model::ModelConfig cfg) {
    auto fill = [](std::size_t& field, std::size_t actual, const char* name) {
        if (field != 0 && field != actual)
            throw ValidationError(std::string("model config ") + name + " = " + std::to_string(field) +
                                  " but the dataset provides " + std::to_string(actual));
        field = actual;
    };
    fill(cfg.ppi_width, ds.size(), "ppi_width");
    fill(cfg.attr_width, ds.attributes.cols, "attr_width");
    fill(cfg.seq_width, ds.seq_embed.cols, "seq_width");
    fill(cfg.terms, ds.labels.cols, "terms");
    cfg.validate();
    return cfg;
}

}  // namespace

void to_json(nlohmann::json& j, const EpochRecord& r) {
    j = {{"epoch", r.epoch}, {"lr", r.lr}, {"loss", num(r.loss)}, {"train", scores_json(r.train)},
         {"valid", scores_json(r.valid)}};
}

void from_json(const nlohmann::json& j, EpochRecord& r) {
    r.epoch = j.at("epoch").get<std::size_t>();
    r.lr = j.at("lr").get<double>();
    r.loss = num_of(j.at("loss"));
    r.train = scores_of(j.at("train"));
    r.valid = scores_of(j.at("valid"));
}

std::string finetune_fingerprint(const data::ProteinDataset& ds, const FinetuneOptions& options) {
    nlohmann::json j = {{"model", resolve_widths(ds, options.model)},
                        {"schedule", options.schedule},
                        {"dataset", hex64(data::fingerprint(ds))},
                        {"pssi", options.pssi ? options.pssi->fingerprint : ""},
                        {"psei", options.psei ? options.psei->fingerprint : ""}};
    return ckpt::fingerprint_of(j.dump());
}

Matrix predict(const model::DsrpgoModel& m, const Features& f, model::ForwardTrace* trace) {
    NoGradGuard guard;
    nn::Context ctx;
    return to_matrix(m.forward(f.modal(), ctx, trace));
}

model::DsrpgoModel load_model(const ckpt::Checkpoint& c) {
    if (c.meta.value("kind", std::string()) != "model")
        throw ValidationError("checkpoint is not a model checkpoint (kind '" + c.meta.value("kind", std::string()) +
                              "')");
    model::ModelConfig cfg = c.meta.at("model").get<model::ModelConfig>();
    Rng rng(0);
    model::DsrpgoModel m(cfg, rng);
    nn::ParamList params;
    m.collect(params);
    ckpt::restore_params(c, params);
    return m;
}

FinetuneResult finetune(const data::ProteinDataset& ds, const FinetuneOptions& options) {
    const Schedule& s = options.schedule;
    s.validate();
    if (static_cast<bool>(options.pssi) != static_cast<bool>(options.psei))
        throw ValidationError("finetune: pass both pretrained checkpoints or neither");
    model::ModelConfig cfg = resolve_widths(ds, options.model);
    std::string fingerprint = finetune_fingerprint(ds, options);

    FinetuneResult out;
    Rng init(derive_seed(s.seed, 1));
    out.model = model::DsrpgoModel(cfg, init);
    if (options.pssi) {
        out.manifest = model::load_pretrained(out.model, tensors_of(*options.pssi), tensors_of(*options.psei));
    } else {
        out.manifest.fresh_groups = {"enc.ppi", "enc.attr", "enc.seq", "msl", "mil", "dsm", "predictor"};
    }
    nn::ParamList params;
    out.model.collect(params);

    auto train_rows = ds.indices(data::SplitTag::train);
    auto valid_rows = ds.indices(data::SplitTag::valid);
    if (train_rows.empty()) throw data::DataError(data::DataErrorCode::empty_split, "finetune: train split is empty");
    Features train_f = gather(ds, train_rows);
    Features valid_f = gather(ds, valid_rows);
    model::ModalFeatures train_x = train_f.modal();
    Tensor train_y = tensor_of(train_f.labels);

    out.selection = !valid_rows.empty() ? "valid-fmax" : options.track_train ? "train-fmax" : "last";

    LoopState st;
    st.rng = Rng(derive_seed(s.seed, 2));
    std::vector<std::vector<double>> best;
    auto snapshot = [&] {
        best.clear();
        for (const auto& p : params) best.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    };

    if (options.resume) {
        const auto& r = *options.resume;
        if (r.fingerprint != fingerprint)
            throw ValidationError("resume checkpoint fingerprint " + r.fingerprint + " does not match run config " +
                                  fingerprint + " (config drift)");
        ckpt::restore_params(r, params);
        st = read_loop_state(r, params);
        out.curve = r.meta.at("curve").get<std::vector<EpochRecord>>();
        out.best_epoch = r.meta.at("best_epoch").get<std::size_t>();
        out.best_fmax = num_of(r.meta.at("best_fmax"));
        if (out.best_epoch > 0) {
            best.clear();
            for (const auto& p : params) best.push_back(r.at("best/" + p.name).values);
        }
    }

    auto loss_fn = [&](const std::vector<std::size_t>& rows, const nn::Context& ctx) {
        if (is_identity(rows, train_rows.size())) return out.model.loss(train_x, train_y, ctx);
        Features sub{data::take_rows(train_f.ppi, rows), data::take_rows(train_f.attr, rows),
                     data::take_rows(train_f.seq, rows), data::take_rows(train_f.labels, rows)};
        return out.model.loss(sub.modal(), tensor_of(sub.labels), ctx);
    };

    while (st.epoch < s.total_epochs() && st.epoch < options.stop_after) {
        EpochRecord rec;
        rec.lr = s.lr_at(st.epoch);
        rec.loss = run_epoch(params, s, st, train_rows.size(), loss_fn);
        rec.epoch = st.epoch;
        if (options.track_train) rec.train = score(predict(out.model, train_f), train_f.labels);
        if (!valid_rows.empty()) rec.valid = score(predict(out.model, valid_f), valid_f.labels);

        // Strict improvement keeps the earliest epoch among ties.
        double key = out.selection == "valid-fmax" ? rec.valid.fmax : rec.train.fmax;
        bool better = out.selection == "last" || out.best_epoch == 0 ||
                      (std::isfinite(key) && (!std::isfinite(out.best_fmax) || key > out.best_fmax));
        if (better) {
            out.best_epoch = rec.epoch;
            out.best_fmax = key;
            snapshot();
        }
        out.curve.push_back(rec);
        if (options.on_epoch) options.on_epoch(rec);
    }

    nlohmann::json seq_norm = norm_json(ds.seq_norm);
    std::string dataset_fp = hex64(data::fingerprint(ds));

    ckpt::Checkpoint& state = out.state_checkpoint;
    state.fingerprint = fingerprint;
    state.meta = {{"kind", "finetune-state"}, {"phase", "finetune"},      {"model", cfg},
                  {"schedule", s},            {"dataset", dataset_fp},     {"seq_norm", seq_norm},
                  {"curve", out.curve},       {"best_epoch", out.best_epoch}, {"best_fmax", num(out.best_fmax)},
                  {"selection", out.selection}};
    ckpt::add_params(state, params);
    add_loop_state(state, st, params);
    if (out.best_epoch > 0)
        for (std::size_t i = 0; i < params.size(); ++i)
            state.add("best/" + params[i].name, params[i].tensor.shape(), best[i]);

    if (out.best_epoch > 0)
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto w = const_cast<Tensor&>(params[i].tensor).mutable_data();
            std::copy(best[i].begin(), best[i].end(), w.begin());
        }

    ckpt::Checkpoint& mc = out.model_checkpoint;
    mc.fingerprint = fingerprint;
    mc.meta = {{"kind", "model"},          {"phase", "finetune"},        {"model", cfg},
               {"schedule", s},            {"dataset", dataset_fp},      {"seq_norm", seq_norm},
               {"best_epoch", out.best_epoch}, {"best_fmax", num(out.best_fmax)}, {"selection", out.selection},
               {"manifest", out.manifest}};
    ckpt::add_params(mc, params);
    return out;
}

}  // namespace dsrpgo::train
