#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "bridgeseg/data.hpp"
#include "bridgeseg/errors.hpp"
#include "bridgeseg/nets.hpp"
#include "bridgeseg/rng.hpp"

namespace bridgeseg {

// Entry (g, p) counts points with ground truth g predicted as p.
struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::uint64_t> counts; // C x C row-major

    std::uint64_t& at(std::size_t truth, std::size_t pred) {
        return counts[truth * num_classes + pred];
    }
    std::uint64_t at(std::size_t truth, std::size_t pred) const {
        return counts[truth * num_classes + pred];
    }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (std::uint64_t v : counts) t += v;
        return t;
    }
    void add(const ConfusionMatrix& o) {
        if (o.num_classes != num_classes)
            throw ContractError("ConfusionMatrix::add: class count mismatch");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    }
};

inline ConfusionMatrix confusion_matrix(const std::vector<std::size_t>& pred,
                                        const std::vector<std::size_t>& truth,
                                        std::size_t num_classes) {
    if (pred.size() != truth.size())
        throw ContractError("confusion_matrix: " + std::to_string(pred.size()) +
                            " predictions for " + std::to_string(truth.size()) + " labels");
    ConfusionMatrix cm;
    cm.num_classes = num_classes;
    cm.counts.assign(num_classes * num_classes, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] >= num_classes || truth[i] >= num_classes)
            throw ContractError("confusion_matrix: label out of range at point " +
                                std::to_string(i));
        ++cm.at(truth[i], pred[i]);
    }
    return cm;
}

// Per-class IoU = TP / (TP + FP + FN); classes that never appear (TP + FP +
// FN = 0) are excluded from the mean. Mean reported in percent.
struct IouReport {
    std::vector<double> per_class; // 0 for excluded classes
    std::vector<bool> included;
    double miou_percent = 0.0;
};

inline IouReport miou(const ConfusionMatrix& cm) {
    std::size_t c = cm.num_classes;
    IouReport rep;
    rep.per_class.assign(c, 0.0);
    rep.included.assign(c, false);
    double sum = 0.0;
    std::size_t n_included = 0;
    for (std::size_t k = 0; k < c; ++k) {
        std::uint64_t tp = cm.at(k, k);
        std::uint64_t fp = 0, fn = 0;
        for (std::size_t j = 0; j < c; ++j) {
            if (j == k) continue;
            fp += cm.at(j, k);
            fn += cm.at(k, j);
        }
        std::uint64_t denom = tp + fp + fn;
        if (denom == 0) continue;
        rep.included[k] = true;
        rep.per_class[k] = static_cast<double>(tp) / static_cast<double>(denom);
        sum += rep.per_class[k];
        ++n_included;
    }
    if (n_included == 0)
        throw NumericError("miou: every class is empty, metric undefined");
    rep.miou_percent = 100.0 * sum / static_cast<double>(n_included);
    return rep;
}

// mIoU of a network over a whole split; modality picks which feature block
// feeds the net (1 for the source branch, 2 for the target branch).
inline IouReport eval_split_miou(const ParamSet& net, const SplitData& split, int modality) {
    if (split.scenes.empty()) throw ContractError("eval_split_miou: empty split");
    std::size_t c = net.spec.num_classes;
    ConfusionMatrix cm;
    cm.num_classes = c;
    cm.counts.assign(c * c, 0);
    for (const Scene& sc : split.scenes) {
        Batch b = single_scene_batch(sc);
        Tensor x = modality == 1 ? b.stack_m1() : b.stack_m2();
        std::vector<std::size_t> pred = predict_labels(net, x);
        std::vector<std::size_t> truth;
        truth.reserve(sc.n);
        for (std::uint16_t y : sc.labels_for_eval()) truth.push_back(y);
        cm.add(confusion_matrix(pred, truth, c));
    }
    return miou(cm);
}

inline double eval_split_accuracy(const ParamSet& net, const SplitData& split, int modality) {
    if (split.scenes.empty()) throw ContractError("eval_split_accuracy: empty split");
    std::uint64_t correct = 0, total = 0;
    for (const Scene& sc : split.scenes) {
        Batch b = single_scene_batch(sc);
        Tensor x = modality == 1 ? b.stack_m1() : b.stack_m2();
        std::vector<std::size_t> pred = predict_labels(net, x);
        const auto& truth = sc.labels_for_eval();
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == truth[i]) ++correct;
        total += pred.size();
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

// Projected features of every point of a split, one row per point.
inline std::vector<std::vector<double>> projected_features(const ParamSet& net,
                                                           const SplitData& split,
                                                           int modality) {
    std::vector<std::vector<double>> rows;
    for (const Scene& sc : split.scenes) {
        Batch b = single_scene_batch(sc);
        Tensor x = modality == 1 ? b.stack_m1() : b.stack_m2();
        Graph g;
        Tensor proj = project(g, net, extract_features(g, net, x));
        for (std::size_t i = 0; i < proj.rows(); ++i) {
            std::vector<double> row(proj.cols());
            for (std::size_t j = 0; j < proj.cols(); ++j) row[j] = proj.at(i, j);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

// Mean L2 distance between the two branches' projected features over the
// paired views of a bridge split. This is the observable stand-in for the
// cross-modal discrepancy term of the error bound.
inline double modality_gap(const ParamSet& source, const ParamSet& target,
                           const SplitData& bridge) {
    if (bridge.scenes.empty()) throw ContractError("modality_gap: empty bridge split");
    double sum = 0.0;
    std::size_t n = 0;
    for (const Scene& sc : bridge.scenes) {
        Batch b = single_scene_batch(sc);
        Graph g;
        Tensor ps = project(g, source, extract_features(g, source, b.stack_m1()));
        Tensor pt = project(g, target, extract_features(g, target, b.stack_m2()));
        if (ps.cols() != pt.cols())
            throw ContractError("modality_gap: branches project into different dims (" +
                                ps.shape_str() + " vs " + pt.shape_str() + ")");
        for (std::size_t i = 0; i < ps.rows(); ++i) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < ps.cols(); ++j) {
                double d = ps.at(i, j) - pt.at(i, j);
                d2 += d * d;
            }
            sum += std::sqrt(d2);
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

namespace detail {

// Lexicographic comparison used to make the probe's result independent of
// argument order: floating-point training is not exactly symmetric under
// swapping, so the two sets are put in a canonical order first.
inline bool feature_set_less(const std::vector<std::vector<double>>& a,
                             const std::vector<std::vector<double>>& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != b[i].size()) return a[i].size() < b[i].size();
        for (std::size_t j = 0; j < a[i].size(); ++j)
            if (a[i][j] != b[i][j]) return a[i][j] < b[i][j];
    }
    return false;
}

} // namespace detail

// Proxy A-distance between two feature sets: train a logistic linear probe to
// tell them apart on half the data, measure error on the held-out half, and
// return 2 * (1 - 2 * err), clamped to [0, 2]. Fully deterministic given the
// seed; symmetric in its arguments.
inline double proxy_domain_distance(const std::vector<std::vector<double>>& set_a,
                                    const std::vector<std::vector<double>>& set_b,
                                    std::uint64_t seed = 0) {
    if (set_a.size() < 4 || set_b.size() < 4)
        throw ContractError("proxy_domain_distance: each set needs at least 4 points");
    const std::vector<std::vector<double>>* first = &set_a;
    const std::vector<std::vector<double>>* second = &set_b;
    if (detail::feature_set_less(*second, *first)) std::swap(first, second);
    std::size_t dim = first->front().size();
    for (const auto& row : *first)
        if (row.size() != dim) throw ContractError("proxy_domain_distance: ragged features");
    for (const auto& row : *second)
        if (row.size() != dim) throw ContractError("proxy_domain_distance: ragged features");

    // Identical per-size shuffles for both sets, then a 50/50 head/tail split.
    auto split_half = [&](const std::vector<std::vector<double>>& rows) {
        std::vector<std::size_t> order(rows.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_key(seed, "probe.shuffle"));
        rng.shuffle(order);
        std::size_t half = rows.size() / 2;
        std::pair<std::vector<const std::vector<double>*>, std::vector<const std::vector<double>*>> out;
        for (std::size_t i = 0; i < rows.size(); ++i)
            (i < half ? out.first : out.second).push_back(&rows[order[i]]);
        return out;
    };
    auto [train_a, test_a] = split_half(*first);
    auto [train_b, test_b] = split_half(*second);

    // Standardize with training statistics. Per-set partial sums are combined
    // with single commutative additions so the result cannot depend on which
    // argument was which.
    std::size_t n_train = train_a.size() + train_b.size();
    std::vector<double> mean(dim, 0.0), var(dim, 0.0);
    auto accumulate_mean = [&](const std::vector<const std::vector<double>*>& rows,
                               std::vector<double>& acc) {
        for (const auto* row : rows)
            for (std::size_t j = 0; j < dim; ++j) acc[j] += (*row)[j];
    };
    std::vector<double> sum_a(dim, 0.0), sum_b(dim, 0.0);
    accumulate_mean(train_a, sum_a);
    accumulate_mean(train_b, sum_b);
    for (std::size_t j = 0; j < dim; ++j)
        mean[j] = (sum_a[j] + sum_b[j]) / static_cast<double>(n_train);
    auto accumulate_var = [&](const std::vector<const std::vector<double>*>& rows,
                              std::vector<double>& acc) {
        for (const auto* row : rows)
            for (std::size_t j = 0; j < dim; ++j) {
                double d = (*row)[j] - mean[j];
                acc[j] += d * d;
            }
    };
    std::vector<double> var_a(dim, 0.0), var_b(dim, 0.0);
    accumulate_var(train_a, var_a);
    accumulate_var(train_b, var_b);
    std::vector<double> inv_std(dim);
    for (std::size_t j = 0; j < dim; ++j) {
        var[j] = (var_a[j] + var_b[j]) / static_cast<double>(n_train);
        inv_std[j] = 1.0 / std::sqrt(var[j] + 1e-8);
    }

    // Full-batch logistic regression from zero init: label 0 for the first
    // set, 1 for the second, small L2 for stability on separable data.
    std::vector<double> w(dim, 0.0);
    double bias = 0.0;
    const double lr = 1.0;
    const double l2 = 1e-4;
    const int iters = 400;
    auto margin = [&](const std::vector<double>& row) {
        double z = bias;
        for (std::size_t j = 0; j < dim; ++j) z += w[j] * (row[j] - mean[j]) * inv_std[j];
        return z;
    };
    std::vector<double> gw(dim);
    for (int it = 0; it < iters; ++it) {
        std::vector<double> gw_a(dim, 0.0), gw_b(dim, 0.0);
        double gb_a = 0.0, gb_b = 0.0;
        auto accumulate_grad = [&](const std::vector<const std::vector<double>*>& rows,
                                   double label, std::vector<double>& gacc, double& gbacc) {
            for (const auto* row : rows) {
                double r = 1.0 / (1.0 + std::exp(-margin(*row))) - label;
                for (std::size_t j = 0; j < dim; ++j)
                    gacc[j] += r * ((*row)[j] - mean[j]) * inv_std[j];
                gbacc += r;
            }
        };
        accumulate_grad(train_a, 0.0, gw_a, gb_a);
        accumulate_grad(train_b, 1.0, gw_b, gb_b);
        double inv_n = 1.0 / static_cast<double>(n_train);
        for (std::size_t j = 0; j < dim; ++j)
            w[j] -= lr * ((gw_a[j] + gw_b[j]) * inv_n + l2 * w[j]);
        bias -= lr * (gb_a + gb_b) * inv_n;
    }

    std::uint64_t errors_a = 0, errors_b = 0;
    for (const auto* row : test_a)
        if (margin(*row) > 0.0) ++errors_a; // predicted set 1, truth set 0
    for (const auto* row : test_b)
        if (!(margin(*row) > 0.0)) ++errors_b;
    double err = static_cast<double>(errors_a + errors_b) /
                 static_cast<double>(test_a.size() + test_b.size());
    double dist = 2.0 * (1.0 - 2.0 * err);
    return std::clamp(dist, 0.0, 2.0);
}

// Observable pieces of the target-error bound, plus an explicit list of the
// constants the bound needs that cannot be measured from data.
struct BoundReport {
    double source_error_proxy = 0.0; // 1 - source accuracy on S-val
    double modality_gap = 0.0;       // mean projected L2 over B-val pairs
    double proxy_dist_s_b = 0.0;     // source-modality projected features, S-val vs B-val
    double proxy_dist_b_t = 0.0;     // target-modality projected features, B-val vs T-val
    std::vector<std::string> unobservable{"L", "lambda_s", "lambda_t",
                                          "h_delta_h_distance"};

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["source_error_proxy"] = source_error_proxy;
        j["modality_gap"] = modality_gap;
        j["proxy_dist_s_b"] = proxy_dist_s_b;
        j["proxy_dist_b_t"] = proxy_dist_b_t;
        j["unobservable"] = unobservable;
        return j;
    }

    std::string to_markdown() const {
        std::string md;
        md += "| term | value |\n|---|---|\n";
        auto row = [&](const std::string& name, double v) {
            md += "| " + name + " | " + std::to_string(v) + " |\n";
        };
        row("source error proxy (1 - S-val accuracy)", source_error_proxy);
        row("modality gap (mean projected L2, B-val)", modality_gap);
        row("proxy distance S-B (modality 1)", proxy_dist_s_b);
        row("proxy distance B-T (modality 2)", proxy_dist_b_t);
        md += "| unobservable |";
        for (const std::string& u : unobservable) md += " " + u;
        md += " |\n";
        return md;
    }
};

inline BoundReport bound_report(const ParamSet& source, const ParamSet& target,
                                const Dataset& ds, std::uint64_t seed = 0) {
    BoundReport rep;
    rep.source_error_proxy =
        1.0 - eval_split_accuracy(source, ds.split(Domain::S, Split::Val), 1);
    rep.modality_gap = modality_gap(source, target, ds.split(Domain::B, Split::Val));
    rep.proxy_dist_s_b = proxy_domain_distance(
        projected_features(source, ds.split(Domain::S, Split::Val), 1),
        projected_features(source, ds.split(Domain::B, Split::Val), 1), seed);
    rep.proxy_dist_b_t = proxy_domain_distance(
        projected_features(target, ds.split(Domain::B, Split::Val), 2),
        projected_features(target, ds.split(Domain::T, Split::Val), 2), seed);
    return rep;
}

} // namespace bridgeseg
