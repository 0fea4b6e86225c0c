#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bridgeseg/adam.hpp"
#include "bridgeseg/checkpoint.hpp"
#include "bridgeseg/config.hpp"
#include "bridgeseg/data.hpp"
#include "bridgeseg/ema.hpp"
#include "bridgeseg/errors.hpp"
#include "bridgeseg/eval.hpp"
#include "bridgeseg/graph.hpp"
#include "bridgeseg/losses.hpp"
#include "bridgeseg/nets.hpp"

namespace bridgeseg {

enum class Method { Lsb, Oracle, SourceOnly, Pl };
enum class AlignVariant { SourceTarget, BridgeTarget };
enum class LrSchedule { Constant, StepDecay };

inline std::string method_name(Method m) {
    switch (m) {
        case Method::Lsb: return "lsb";
        case Method::Oracle: return "oracle";
        case Method::SourceOnly: return "source_only";
        default: return "pl";
    }
}

inline Method method_from_name(const std::string& s) {
    if (s == "lsb") return Method::Lsb;
    if (s == "oracle") return Method::Oracle;
    if (s == "source_only") return Method::SourceOnly;
    if (s == "pl") return Method::Pl;
    throw ConfigError("unknown method '" + s + "' (expected lsb, oracle, source_only or pl)");
}

inline std::string align_variant_name(AlignVariant v) {
    return v == AlignVariant::SourceTarget ? "source_target" : "bridge_target";
}

inline AlignVariant align_variant_from_name(const std::string& s) {
    if (s == "source_target") return AlignVariant::SourceTarget;
    if (s == "bridge_target") return AlignVariant::BridgeTarget;
    throw ConfigError("unknown align variant '" + s +
                      "' (expected source_target or bridge_target)");
}

inline std::string lr_schedule_name(LrSchedule s) {
    return s == LrSchedule::Constant ? "constant" : "step_decay";
}

inline LrSchedule lr_schedule_from_name(const std::string& s) {
    if (s == "constant") return LrSchedule::Constant;
    if (s == "step_decay") return LrSchedule::StepDecay;
    throw ConfigError("unknown lr schedule '" + s + "' (expected constant or step_decay)");
}

struct RunConfig {
    Method method = Method::Lsb;
    bool use_con = true;
    bool use_ali = true;
    bool use_ph = true;   // source projection present
    bool use_pphi = true; // target projection present
    AlignVariant align_variant = AlignVariant::SourceTarget;
    LossWeights weights;
    double alpha_max = 0.999;
    std::size_t steps = 3200; // per stage for multi-stage baselines
    std::size_t batch_size = 16;
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    LrSchedule lr_schedule = LrSchedule::Constant;
    std::uint64_t seed = 1;
    std::size_t eval_every = 200;
    std::vector<std::size_t> hidden_dims{64, 64};
    std::size_t feat_dim = 32;
    std::size_t proj_dim = 16;
    Activation activation = Activation::Tanh;

    bool operator==(const RunConfig&) const = default;

    void validate() const {
        weights.validate();
        if (steps < 1) throw ConfigError("RunConfig: steps must be >= 1");
        if (batch_size < 1) throw ConfigError("RunConfig: batch_size must be >= 1");
        if (eval_every < 1) throw ConfigError("RunConfig: eval_every must be >= 1");
        if (lr <= 0) throw ConfigError("RunConfig: lr must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("RunConfig: betas must lie in [0, 1)");
        if (eps <= 0) throw ConfigError("RunConfig: eps must be positive");
        if (alpha_max < 0 || alpha_max > 1)
            throw ConfigError("RunConfig: alpha_max must lie in [0, 1]");
        if (!use_ph && !use_pphi)
            throw ConfigError("RunConfig: at most one projection can be removed "
                              "(use_ph and use_pphi are both false)");
        if (feat_dim == 0 || proj_dim == 0)
            throw ConfigError("RunConfig: feature dims must be positive");
    }

    // Dimension of the shared space. Removing one projection makes the other
    // branch project straight into the remaining branch's feature space.
    std::size_t shared_dim() const { return (use_ph && use_pphi) ? proj_dim : feat_dim; }

    NetworkSpec source_net_spec(const BenchmarkSpec& data) const {
        NetworkSpec s;
        s.input_dim = data.d1;
        s.hidden_dims = hidden_dims;
        s.feat_dim = feat_dim;
        s.num_classes = data.classes;
        s.activation = activation;
        s.identity_projection = !use_ph;
        s.proj_dim = use_ph ? shared_dim() : feat_dim;
        return s;
    }

    NetworkSpec target_net_spec(const BenchmarkSpec& data) const {
        NetworkSpec s;
        s.input_dim = data.d2;
        s.hidden_dims = hidden_dims;
        s.feat_dim = feat_dim;
        s.num_classes = data.classes;
        s.activation = activation;
        s.identity_projection = !use_pphi;
        s.proj_dim = use_pphi ? shared_dim() : feat_dim;
        return s;
    }

    // Short human-readable tag for reports; names the ablation, if any.
    std::string label() const {
        std::string l = method_name(method);
        if (method != Method::Lsb) return l;
        if (!use_con && !use_ali) return l + " (seg only)";
        if (!use_con) l += " (w/o con)";
        if (!use_ali) l += " (w/o ali)";
        if (!use_ph) l += " (w/o p_h)";
        if (!use_pphi) l += " (w/o p_phi)";
        if (align_variant == AlignVariant::BridgeTarget) l += " (ali B,T)";
        return l;
    }
};

inline RunConfig run_config_from_config(const KeyValueConfig& kv) {
    RunConfig c;
    c.method = method_from_name(kv.get_string("train.method", method_name(c.method)));
    c.steps = kv.get_count("train.steps", c.steps);
    c.batch_size = kv.get_count("train.batch_size", c.batch_size);
    c.seed = kv.get_u64("train.seed", c.seed);
    c.eval_every = kv.get_count("train.eval_every", c.eval_every);
    c.lr_schedule =
        lr_schedule_from_name(kv.get_string("train.lr_schedule", lr_schedule_name(c.lr_schedule)));
    c.lr = kv.get_double("optim.lr", c.lr);
    c.beta1 = kv.get_double("optim.beta1", c.beta1);
    c.beta2 = kv.get_double("optim.beta2", c.beta2);
    c.eps = kv.get_double("optim.eps", c.eps);
    c.weights.lambda_c = kv.get_double("loss.lambda_c", c.weights.lambda_c);
    c.weights.lambda_a = kv.get_double("loss.lambda_a", c.weights.lambda_a);
    c.weights.lambda_w = kv.get_double("loss.lambda_w", c.weights.lambda_w);
    c.alpha_max = kv.get_double("ema.alpha_max", c.alpha_max);
    c.use_con = kv.get_bool("ablation.use_con", c.use_con);
    c.use_ali = kv.get_bool("ablation.use_ali", c.use_ali);
    c.use_ph = kv.get_bool("ablation.use_ph", c.use_ph);
    c.use_pphi = kv.get_bool("ablation.use_pphi", c.use_pphi);
    c.align_variant = align_variant_from_name(
        kv.get_string("ablation.align_variant", align_variant_name(c.align_variant)));
    c.hidden_dims = kv.get_count_list("net.hidden_dims", c.hidden_dims);
    c.feat_dim = kv.get_count("net.feat_dim", c.feat_dim);
    c.proj_dim = kv.get_count("net.proj_dim", c.proj_dim);
    c.activation = activation_from_name(kv.get_string("net.activation", activation_name(c.activation)));
    c.validate();
    return c;
}

namespace detail {
inline std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string join_counts(const std::vector<std::size_t>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(xs[i]);
    }
    return s;
}
} // namespace detail

// Flat key-value echo of every field; parsing this back yields an equal
// RunConfig, which is what makes runs reconstructible from their summaries.
inline std::vector<std::pair<std::string, std::string>> run_config_to_entries(
    const RunConfig& c) {
    using detail::fmt_g17;
    std::vector<std::pair<std::string, std::string>> e;
    e.emplace_back("train.method", method_name(c.method));
    e.emplace_back("train.steps", std::to_string(c.steps));
    e.emplace_back("train.batch_size", std::to_string(c.batch_size));
    e.emplace_back("train.seed", std::to_string(c.seed));
    e.emplace_back("train.eval_every", std::to_string(c.eval_every));
    e.emplace_back("train.lr_schedule", lr_schedule_name(c.lr_schedule));
    e.emplace_back("optim.lr", fmt_g17(c.lr));
    e.emplace_back("optim.beta1", fmt_g17(c.beta1));
    e.emplace_back("optim.beta2", fmt_g17(c.beta2));
    e.emplace_back("optim.eps", fmt_g17(c.eps));
    e.emplace_back("loss.lambda_c", fmt_g17(c.weights.lambda_c));
    e.emplace_back("loss.lambda_a", fmt_g17(c.weights.lambda_a));
    e.emplace_back("loss.lambda_w", fmt_g17(c.weights.lambda_w));
    e.emplace_back("ema.alpha_max", fmt_g17(c.alpha_max));
    e.emplace_back("ablation.use_con", c.use_con ? "true" : "false");
    e.emplace_back("ablation.use_ali", c.use_ali ? "true" : "false");
    e.emplace_back("ablation.use_ph", c.use_ph ? "true" : "false");
    e.emplace_back("ablation.use_pphi", c.use_pphi ? "true" : "false");
    e.emplace_back("ablation.align_variant", align_variant_name(c.align_variant));
    e.emplace_back("net.hidden_dims", detail::join_counts(c.hidden_dims));
    e.emplace_back("net.feat_dim", std::to_string(c.feat_dim));
    e.emplace_back("net.proj_dim", std::to_string(c.proj_dim));
    e.emplace_back("net.activation", activation_name(c.activation));
    return e;
}

struct MetricsRecord {
    std::size_t step = 0;
    double seg_s = 0.0;
    double seg_b = 0.0;
    double con = 0.0;
    double ali = 0.0;
    double total = 0.0;
    bool has_val_src = false;
    bool has_val_tgt = false;
    double val_miou_src = 0.0;
    double val_miou_tgt = 0.0;
    double wall_clock_sec = 0.0;
};

inline std::string metrics_csv_header() {
    return "step,seg_s,seg_b,con,ali,total,val_miou_src,val_miou_tgt";
}

inline std::string metrics_csv_row(const MetricsRecord& r) {
    using detail::fmt_g17;
    std::string row = std::to_string(r.step);
    row += "," + fmt_g17(r.seg_s);
    row += "," + fmt_g17(r.seg_b);
    row += "," + fmt_g17(r.con);
    row += "," + fmt_g17(r.ali);
    row += "," + fmt_g17(r.total);
    row += ",";
    if (r.has_val_src) row += fmt_g17(r.val_miou_src);
    row += ",";
    if (r.has_val_tgt) row += fmt_g17(r.val_miou_tgt);
    return row;
}

// Mutable state of one LSB run. The optimizer owns moments for the
// concatenation of source-then-target parameters, so one adam_step covers
// both branches and both projections.
struct TrainState {
    ParamSet source;
    ParamSet target;
    TeacherState teacher;
    AdamState opt;
    std::size_t step = 0;

    std::vector<Tensor> all_params() const {
        std::vector<Tensor> p = source.trainable();
        for (Tensor& t : target.trainable()) p.push_back(t);
        return p;
    }
};

struct StepBatches {
    Batch source;
    Batch bridge;
    Batch target;
};

// Instrumentation hook for verifying the per-step phase order.
struct StepTrace {
    std::vector<std::string> phases;
};

inline TrainState init_lsb_state(const Dataset& ds, const RunConfig& cfg) {
    TrainState st;
    st.source = init_params(cfg.source_net_spec(ds.spec), Role::Source,
                            derive_key(cfg.seed, "init.source"));
    st.target = init_params(cfg.target_net_spec(ds.spec), Role::Target,
                            derive_key(cfg.seed, "init.target"));
    st.teacher = init_teacher(st.source, cfg.alpha_max);
    std::vector<Tensor> params = st.all_params();
    st.opt = AdamState::for_params(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    return st;
}

inline double effective_lr(const RunConfig& cfg, std::size_t step_in_stage) {
    if (cfg.lr_schedule == LrSchedule::StepDecay && step_in_stage >= (cfg.steps * 4) / 5)
        return cfg.lr * 0.1;
    return cfg.lr;
}

namespace detail {

struct SceneOffsets {
    std::vector<std::size_t> offset;
    std::vector<std::size_t> size;
};

inline SceneOffsets scene_offsets(const Batch& b) {
    SceneOffsets so;
    std::size_t off = 0;
    for (const Scene* s : b.scenes) {
        so.offset.push_back(off);
        so.size.push_back(s->n);
        off += s->n;
    }
    return so;
}

inline std::vector<std::size_t> slice_labels(const std::vector<std::size_t>& all,
                                             std::size_t off, std::size_t n) {
    return std::vector<std::size_t>(all.begin() + static_cast<std::ptrdiff_t>(off),
                                    all.begin() + static_cast<std::ptrdiff_t>(off + n));
}

inline void check_finite(const MetricsRecord& r) {
    if (std::isfinite(r.seg_s) && std::isfinite(r.seg_b) && std::isfinite(r.con) &&
        std::isfinite(r.ali) && std::isfinite(r.total))
        return;
    throw NumericError("non-finite loss at step " + std::to_string(r.step) +
                       ": seg_s=" + fmt_g17(r.seg_s) + " seg_b=" + fmt_g17(r.seg_b) +
                       " con=" + fmt_g17(r.con) + " ali=" + fmt_g17(r.ali) +
                       " total=" + fmt_g17(r.total));
}

} // namespace detail

// One LSB training step: all losses on the three sampled batches, one
// backward pass, one Adam update over every trainable parameter, then the
// EMA teacher update. Strictly in that order.
inline MetricsRecord train_step(TrainState& st, const StepBatches& batches,
                                const RunConfig& cfg, StepTrace* trace = nullptr) {
    auto t_start = std::chrono::steady_clock::now();
    std::size_t num_classes = st.source.spec.num_classes;
    MetricsRecord rec;
    rec.step = st.step;

    std::vector<Tensor> params = st.all_params();
    for (Tensor& p : params) p.zero_grad();

    Graph g;
    LossParts parts;

    // Source batch: supervised segmentation per scene.
    Tensor xs = batches.source.stack_m1();
    std::vector<std::size_t> ys = batches.source.train_labels();
    Tensor feats_s = extract_features(g, st.source, xs);
    Tensor lp_s = classify(g, st.source, feats_s);
    detail::SceneOffsets so_s = detail::scene_offsets(batches.source);
    for (std::size_t i = 0; i < so_s.offset.size(); ++i) {
        LabelMatrix lm(detail::slice_labels(ys, so_s.offset[i], so_s.size[i]), num_classes,
                       LabelSource::GroundTruth);
        parts.seg_src.push_back(
            seg_loss_source(g, g.slice_rows(lp_s, so_s.offset[i], so_s.size[i]), lm));
    }

    // Bridge batch: teacher pseudo-labels drive the target branch; the
    // consistency loss couples the two projections on the paired views.
    Tensor xbs = batches.bridge.stack_m1();
    Tensor xbt = batches.bridge.stack_m2();
    LabelMatrix pseudo_b = teacher_pseudo_label(st.teacher, xbs);
    Tensor feats_bt = extract_features(g, st.target, xbt);
    Tensor lp_bt = classify(g, st.target, feats_bt);
    detail::SceneOffsets so_b = detail::scene_offsets(batches.bridge);
    for (std::size_t i = 0; i < so_b.offset.size(); ++i) {
        LabelMatrix lm(detail::slice_labels(pseudo_b.labels(), so_b.offset[i], so_b.size[i]),
                       num_classes, LabelSource::TeacherPseudo);
        parts.seg_bridge.push_back(
            seg_loss_bridge(g, g.slice_rows(lp_bt, so_b.offset[i], so_b.size[i]), lm));
    }
    Tensor proj_bt;
    if (cfg.use_con || (cfg.use_ali && cfg.align_variant == AlignVariant::BridgeTarget))
        proj_bt = project(g, st.target, feats_bt);
    if (cfg.use_con) {
        Tensor feats_bs = extract_features(g, st.source, xbs);
        Tensor proj_bs = project(g, st.source, feats_bs);
        std::vector<Tensor> proj_params = st.source.projection_params();
        for (Tensor& t : st.target.projection_params()) proj_params.push_back(t);
        for (std::size_t i = 0; i < so_b.offset.size(); ++i)
            parts.con.push_back(consistency_loss(
                g, g.slice_rows(proj_bs, so_b.offset[i], so_b.size[i]),
                g.slice_rows(proj_bt, so_b.offset[i], so_b.size[i]), proj_params,
                cfg.weights.lambda_w));
    }

    // Target batch: current-net pseudo-labels feed only the centroids.
    Tensor xt = batches.target.stack_m2();
    Tensor feats_t = extract_features(g, st.target, xt);
    Tensor lp_t = classify(g, st.target, feats_t);
    std::vector<std::size_t> pseudo_t = argmax_rows(lp_t);
    if (cfg.use_ali) {
        Tensor proj_t = project(g, st.target, feats_t);
        Centroids ct = class_centroids(
            g, proj_t, LabelMatrix(pseudo_t, num_classes, LabelSource::TargetPseudo));
        if (cfg.align_variant == AlignVariant::SourceTarget) {
            Tensor proj_s = project(g, st.source, feats_s);
            Centroids cs =
                class_centroids(g, proj_s, LabelMatrix(ys, num_classes, LabelSource::GroundTruth));
            parts.ali = alignment_loss(g, cs, ct);
        } else {
            std::vector<std::size_t> pseudo_bt = argmax_rows(lp_bt);
            Centroids cb = class_centroids(
                g, proj_bt, LabelMatrix(pseudo_bt, num_classes, LabelSource::TargetPseudo));
            parts.ali = alignment_loss(g, cb, ct);
        }
    }

    Tensor total = total_loss(g, parts, cfg.weights);
    auto term_mean = [](const std::vector<Tensor>& xs) {
        double s = 0.0;
        for (const Tensor& t : xs) s += t.value();
        return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
    };
    rec.seg_s = term_mean(parts.seg_src);
    rec.seg_b = term_mean(parts.seg_bridge);
    rec.con = term_mean(parts.con);
    rec.ali = parts.ali.valid() ? parts.ali.value() : 0.0;
    rec.total = total.value();
    if (trace) trace->phases.push_back("losses");
    detail::check_finite(rec);

    g.backward(total);
    if (trace) trace->phases.push_back("backward");

    adam_step(params, st.opt);
    if (trace) trace->phases.push_back("optimizer");

    ema_update(st.teacher, st.source);
    if (trace) trace->phases.push_back("ema");

    st.step += 1;
    rec.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return rec;
}

struct TrainResult {
    // End-of-run state.
    ParamSet final_source;
    ParamSet final_target;
    TeacherState final_teacher;
    bool has_source = true;
    bool has_teacher = false;
    // Snapshot at the best target-val mIoU.
    ParamSet best_source;
    ParamSet best_target;
    double best_val_miou_tgt = -1.0;
    std::size_t best_step = 0;
    std::vector<MetricsRecord> metrics;
};

inline TrainResult train_lsb(const Dataset& ds, const RunConfig& cfg) {
    cfg.validate();
    if (cfg.method != Method::Lsb) throw ContractError("train_lsb: cfg.method is not lsb");
    TrainState st = init_lsb_state(ds, cfg);
    BatchSampler sampler_s(ds.split(Domain::S, Split::Train), derive_key(cfg.seed, "batch.S"));
    BatchSampler sampler_b(ds.split(Domain::B, Split::Train), derive_key(cfg.seed, "batch.B"));
    BatchSampler sampler_t(ds.split(Domain::T, Split::Train), derive_key(cfg.seed, "batch.T"));

    TrainResult res;
    res.has_teacher = true;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        st.opt.lr = effective_lr(cfg, step);
        StepBatches batches{sampler_s.next(cfg.batch_size), sampler_b.next(cfg.batch_size),
                            sampler_t.next(cfg.batch_size)};
        MetricsRecord rec = train_step(st, batches, cfg);
        bool eval_now = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        if (eval_now) {
            rec.has_val_src = true;
            rec.val_miou_src =
                eval_split_miou(st.source, ds.split(Domain::S, Split::Val), 1).miou_percent;
            rec.has_val_tgt = true;
            rec.val_miou_tgt =
                eval_split_miou(st.target, ds.split(Domain::T, Split::Val), 2).miou_percent;
            if (rec.val_miou_tgt > res.best_val_miou_tgt) {
                res.best_val_miou_tgt = rec.val_miou_tgt;
                res.best_step = step + 1;
                res.best_source = st.source.clone_as(Role::Source);
                res.best_target = st.target.clone_as(Role::Target);
            }
        }
        res.metrics.push_back(rec);
    }
    res.final_source = st.source;
    res.final_target = st.target;
    res.final_teacher = st.teacher;
    return res;
}

namespace detail {

// Copy a split, replace labels by net predictions on the given modality, and
// mark the copies trainer-visible. Used by the pseudo-label baselines; the
// originals keep their ground truth hidden.
inline SplitData pseudo_labeled_copy(const SplitData& split, const ParamSet& net,
                                     int modality) {
    SplitData out;
    out.scenes.reserve(split.scenes.size());
    for (const Scene& sc : split.scenes) {
        Scene c = sc;
        Batch b = single_scene_batch(sc);
        Tensor x = modality == 1 ? b.stack_m1() : b.stack_m2();
        std::vector<std::size_t> pred = predict_labels(net, x);
        for (std::size_t i = 0; i < pred.size(); ++i)
            c.labels[i] = static_cast<std::uint16_t>(pred[i]);
        c.labels_trainer_visible = true;
        out.scenes.push_back(std::move(c));
    }
    return out;
}

struct StageSpec {
    ParamSet* net = nullptr;
    int modality = 2;
    const SplitData* train_split = nullptr;
    std::uint64_t batch_key = 0;
    const SplitData* val_split = nullptr;
    int val_modality = 2;
    bool record_as_source = false; // which CSV loss/val columns this stage fills
    std::size_t step_offset = 0;
    bool track_best = false;
};

// Plain supervised cross-entropy training of one branch on one split.
inline void supervised_stage(const RunConfig& cfg, const StageSpec& sp, TrainResult& res) {
    AdamState opt =
        AdamState::for_params(sp.net->trainable(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    BatchSampler sampler(*sp.train_split, sp.batch_key);
    std::size_t num_classes = sp.net->spec.num_classes;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        auto t_start = std::chrono::steady_clock::now();
        opt.lr = effective_lr(cfg, step);
        Batch b = sampler.next(cfg.batch_size);
        std::vector<Tensor> params = sp.net->trainable();
        for (Tensor& p : params) p.zero_grad();
        Graph g;
        Tensor x = sp.modality == 1 ? b.stack_m1() : b.stack_m2();
        std::vector<std::size_t> ys = b.train_labels();
        Tensor lp = classify(g, *sp.net, extract_features(g, *sp.net, x));
        SceneOffsets so = scene_offsets(b);
        LossParts parts;
        for (std::size_t i = 0; i < so.offset.size(); ++i) {
            const Scene* sc = b.scenes[i];
            LabelSource tag = sc->domain == Domain::B   ? LabelSource::TeacherPseudo
                              : sc->domain == Domain::T && cfg.method != Method::Oracle
                                  ? LabelSource::TargetPseudo
                                  : LabelSource::GroundTruth;
            LabelMatrix lm(slice_labels(ys, so.offset[i], so.size[i]), num_classes, tag);
            Tensor li = seg_loss(g, g.slice_rows(lp, so.offset[i], so.size[i]), lm);
            (sp.record_as_source ? parts.seg_src : parts.seg_bridge).push_back(li);
        }
        Tensor total = total_loss(g, parts, cfg.weights);
        MetricsRecord rec;
        rec.step = sp.step_offset + step;
        rec.total = total.value();
        (sp.record_as_source ? rec.seg_s : rec.seg_b) = rec.total;
        check_finite(rec);
        g.backward(total);
        adam_step(params, opt);

        bool eval_now = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        if (eval_now && sp.val_split) {
            double v = eval_split_miou(*sp.net, *sp.val_split, sp.val_modality).miou_percent;
            if (sp.record_as_source) {
                rec.has_val_src = true;
                rec.val_miou_src = v;
            } else {
                rec.has_val_tgt = true;
                rec.val_miou_tgt = v;
            }
            if (sp.track_best && v > res.best_val_miou_tgt) {
                res.best_val_miou_tgt = v;
                res.best_step = sp.step_offset + step + 1;
                res.best_target = sp.net->clone_as(Role::Target);
            }
        }
        rec.wall_clock_sec =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        res.metrics.push_back(rec);
    }
}

} // namespace detail

// Oracle, Source-Only and PL pipelines. Stage step budgets all equal
// cfg.steps; records continue the step numbering across stages.
inline TrainResult train_baseline(const Dataset& ds, const RunConfig& cfg) {
    cfg.validate();
    TrainResult res;

    if (cfg.method == Method::Oracle) {
        // Supervised training of the target net on labeled target data. The
        // one place ground truth of T is unlocked.
        SplitData t_train = ds.split(Domain::T, Split::Train);
        for (Scene& sc : t_train.scenes) sc.labels_trainer_visible = true;
        ParamSet target = init_params(cfg.target_net_spec(ds.spec), Role::Target,
                                      derive_key(cfg.seed, "init.target"));
        detail::StageSpec sp;
        sp.net = &target;
        sp.modality = 2;
        sp.train_split = &t_train;
        sp.batch_key = derive_key(cfg.seed, "oracle.batch.T");
        sp.val_split = &ds.split(Domain::T, Split::Val);
        sp.val_modality = 2;
        sp.record_as_source = true; // ground-truth supervised loss
        sp.track_best = true;
        detail::supervised_stage(cfg, sp, res);
        res.final_target = target;
        res.has_source = false;
        return res;
    }

    if (cfg.method != Method::SourceOnly && cfg.method != Method::Pl)
        throw ContractError("train_baseline: method must be oracle, source_only or pl");

    // Stage 1: source net on labeled S. Shared bit-exactly by source_only
    // and pl (identical keys).
    ParamSet source = init_params(cfg.source_net_spec(ds.spec), Role::Source,
                                  derive_key(cfg.seed, "init.source"));
    {
        detail::StageSpec sp;
        sp.net = &source;
        sp.modality = 1;
        sp.train_split = &ds.split(Domain::S, Split::Train);
        sp.batch_key = derive_key(cfg.seed, "stage1.batch.S");
        sp.val_split = &ds.split(Domain::S, Split::Val);
        sp.val_modality = 1;
        sp.record_as_source = true;
        sp.step_offset = 0;
        detail::supervised_stage(cfg, sp, res);
    }

    // Stage 2: freeze the source net, pseudo-label bridge scenes with it
    // directly (no EMA), train the target net on the modality-2 views.
    SplitData b_pseudo =
        detail::pseudo_labeled_copy(ds.split(Domain::B, Split::Train), source, 1);
    ParamSet target = init_params(cfg.target_net_spec(ds.spec), Role::Target,
                                  derive_key(cfg.seed, "init.target"));
    {
        detail::StageSpec sp;
        sp.net = &target;
        sp.modality = 2;
        sp.train_split = &b_pseudo;
        sp.batch_key = derive_key(cfg.seed, "stage2.batch.B");
        sp.val_split = &ds.split(Domain::T, Split::Val);
        sp.val_modality = 2;
        sp.record_as_source = false;
        sp.step_offset = cfg.steps;
        sp.track_best = cfg.method == Method::SourceOnly;
        detail::supervised_stage(cfg, sp, res);
    }

    if (cfg.method == Method::Pl) {
        // Stage 3: pseudo-label T with the stage-2 target net, then retrain a
        // fresh target net on the union of bridge and target pseudo-labels.
        SplitData t_pseudo =
            detail::pseudo_labeled_copy(ds.split(Domain::T, Split::Train), target, 2);
        SplitData pool = b_pseudo;
        for (Scene& sc : t_pseudo.scenes) pool.scenes.push_back(std::move(sc));
        ParamSet target3 = init_params(cfg.target_net_spec(ds.spec), Role::Target,
                                       derive_key(cfg.seed, "pl.stage3.init.target"));
        detail::StageSpec sp;
        sp.net = &target3;
        sp.modality = 2;
        sp.train_split = &pool;
        sp.batch_key = derive_key(cfg.seed, "pl.stage3.batch.BT");
        sp.val_split = &ds.split(Domain::T, Split::Val);
        sp.val_modality = 2;
        sp.record_as_source = false;
        sp.step_offset = 2 * cfg.steps;
        sp.track_best = true;
        detail::supervised_stage(cfg, sp, res);
        target = target3;
    }

    res.final_source = source;
    res.final_target = target;
    res.has_source = true;
    return res;
}

inline TrainResult train_run(const Dataset& ds, const RunConfig& cfg) {
    return cfg.method == Method::Lsb ? train_lsb(ds, cfg) : train_baseline(ds, cfg);
}

// ---- run artifacts ----

struct RunArtifacts {
    std::filesystem::path out_dir;
    std::filesystem::path metrics_csv;
    std::filesystem::path summary_json;
    std::filesystem::path checkpoint_best;
    std::filesystem::path checkpoint_final;
    double test_miou_tgt = 0.0;
};

inline std::string benchmark_id(const BenchmarkSpec& spec) {
    return "C" + std::to_string(spec.classes) + "_k" + std::to_string(spec.latent_dim) +
           "_d" + std::to_string(spec.d1) + "x" + std::to_string(spec.d2) + "_seed" +
           std::to_string(spec.seed);
}

// Full run: train, write metrics CSV, checkpoints and the JSON summary.
// Everything except wall-clock fields is deterministic in (dataset, cfg).
inline RunArtifacts run_training(const Dataset& ds, const RunConfig& cfg,
                                 const std::filesystem::path& out_dir,
                                 const std::string& data_dir = "") {
    auto t_start = std::chrono::steady_clock::now();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw ConfigError(out_dir.string() + ": cannot create run directory: " + ec.message());

    TrainResult res = train_run(ds, cfg);

    RunArtifacts art;
    art.out_dir = out_dir;
    art.metrics_csv = out_dir / "metrics.csv";
    art.summary_json = out_dir / "summary.json";
    art.checkpoint_best = out_dir / "checkpoint_best.lsbp";
    art.checkpoint_final = out_dir / "checkpoint_final.lsbp";

    std::string csv = metrics_csv_header() + "\n";
    for (const MetricsRecord& r : res.metrics) csv += metrics_csv_row(r) + "\n";
    detail::spit(art.metrics_csv, csv);

    std::vector<std::pair<std::string, const ParamSet*>> final_branches;
    std::vector<std::pair<std::string, const ParamSet*>> best_branches;
    if (res.has_source) {
        final_branches.emplace_back("source", &res.final_source);
        if (res.best_source.cls_w.valid()) best_branches.emplace_back("source", &res.best_source);
    }
    final_branches.emplace_back("target", &res.final_target);
    best_branches.emplace_back("target", &res.best_target);
    if (res.has_teacher) final_branches.emplace_back("teacher", &res.final_teacher.teacher);
    write_checkpoint(art.checkpoint_final, final_branches, cfg.activation);
    write_checkpoint(art.checkpoint_best, best_branches, cfg.activation);

    IouReport test = eval_split_miou(res.best_target, ds.split(Domain::T, Split::Test), 2);
    art.test_miou_tgt = test.miou_percent;

    nlohmann::json summary;
    summary["format_version"] = 1;
    summary["method"] = method_name(cfg.method);
    summary["label"] = cfg.label();
    summary["seed"] = cfg.seed;
    nlohmann::json cfg_echo;
    for (const auto& [k, v] : run_config_to_entries(cfg)) cfg_echo[k] = v;
    summary["config"] = cfg_echo;
    summary["data_dir"] = data_dir;
    summary["benchmark_id"] = benchmark_id(ds.spec);
    summary["benchmark"] = detail::spec_to_manifest(ds.spec);
    summary["best"] = {{"step", res.best_step}, {"val_miou_tgt", res.best_val_miou_tgt}};
    summary["test"] = {{"domain", "T"},
                       {"miou", test.miou_percent},
                       {"per_class_iou", test.per_class},
                       {"included", test.included}};
    if (res.has_source) {
        IouReport test_src = eval_split_miou(res.best_source.cls_w.valid() ? res.best_source
                                                                           : res.final_source,
                                             ds.split(Domain::S, Split::Test), 1);
        summary["test_source"] = {{"domain", "S"},
                                  {"miou", test_src.miou_percent},
                                  {"per_class_iou", test_src.per_class},
                                  {"included", test_src.included}};
    }
    summary["wall_clock_sec"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    detail::spit(art.summary_json, summary.dump(2) + "\n");
    return art;
}

} // namespace bridgeseg
