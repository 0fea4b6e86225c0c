#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bridgeseg/ema.hpp"
#include "bridgeseg/errors.hpp"
#include "bridgeseg/graph.hpp"
#include "bridgeseg/nets.hpp"
#include "bridgeseg/tensor.hpp"

namespace bridgeseg {

// Where a label vector came from. Segmentation losses check this so that the
// source loss can never silently train on pseudo-labels and the bridge loss
// can never train on ground truth.
enum class LabelSource { GroundTruth, TeacherPseudo, TargetPseudo };

// Hard labels for a batch plus their one-hot form (C x N, one column per
// point, each column summing to exactly 1).
class LabelMatrix {
public:
    LabelMatrix(std::vector<std::size_t> labels, std::size_t num_classes, LabelSource src)
        : labels_(std::move(labels)), num_classes_(num_classes), source_(src) {
        if (num_classes_ < 2) throw ContractError("LabelMatrix: need at least 2 classes");
        for (std::size_t y : labels_)
            if (y >= num_classes_)
                throw ContractError("LabelMatrix: label " + std::to_string(y) +
                                    " out of range for " + std::to_string(num_classes_) +
                                    " classes");
    }

    std::size_t num_points() const { return labels_.size(); }
    std::size_t num_classes() const { return num_classes_; }
    LabelSource source() const { return source_; }
    const std::vector<std::size_t>& labels() const { return labels_; }

    Tensor onehot() const {
        Tensor m(num_classes_, labels_.size());
        for (std::size_t i = 0; i < labels_.size(); ++i) m.at(labels_[i], i) = 1.0;
        return m;
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes_, 0);
        for (std::size_t y : labels_) ++counts[y];
        return counts;
    }

private:
    std::vector<std::size_t> labels_;
    std::size_t num_classes_;
    LabelSource source_;
};

// Teacher predictions on the source-modality view of a bridge batch, as hard
// one-hot pseudo-labels. No gradient flows into the teacher.
inline LabelMatrix teacher_pseudo_label(const TeacherState& st, const Tensor& x_bridge_src) {
    return LabelMatrix(predict_labels(st.teacher, x_bridge_src),
                       st.teacher.spec.num_classes, LabelSource::TeacherPseudo);
}

namespace detail {
// Mean negative log-probability of the labeled class.
inline Tensor cross_entropy(Graph& g, const Tensor& logprobs, const LabelMatrix& labels) {
    if (labels.num_points() == 0)
        throw ContractError("cross_entropy: empty batch");
    if (logprobs.rows() != labels.num_points() || logprobs.cols() != labels.num_classes())
        throw ShapeError("cross_entropy: log-probs are " + logprobs.shape_str() +
                         ", labels expect " + std::to_string(labels.num_points()) + "x" +
                         std::to_string(labels.num_classes()));
    return g.scale(g.mean(g.gather_cols(logprobs, labels.labels())), -1.0);
}
} // namespace detail

// Supervised loss of the source branch; refuses anything but ground truth.
inline Tensor seg_loss_source(Graph& g, const Tensor& logprobs, const LabelMatrix& labels) {
    if (labels.source() != LabelSource::GroundTruth)
        throw ContractError("seg_loss_source: labels must be ground truth");
    return detail::cross_entropy(g, logprobs, labels);
}

// Bridge loss of the target branch; trains only on teacher pseudo-labels.
inline Tensor seg_loss_bridge(Graph& g, const Tensor& logprobs, const LabelMatrix& labels) {
    if (labels.source() != LabelSource::TeacherPseudo)
        throw ContractError("seg_loss_bridge: labels must be teacher pseudo-labels");
    return detail::cross_entropy(g, logprobs, labels);
}

// Generic supervised loss for baseline stages that train on whatever labels
// their recipe produced (oracle ground truth, direct pseudo-labels).
inline Tensor seg_loss(Graph& g, const Tensor& logprobs, const LabelMatrix& labels) {
    return detail::cross_entropy(g, logprobs, labels);
}

// Mean squared distance between paired rows of the two projected feature
// matrices, plus lambda_w times the squared Frobenius norms of the given
// projection parameters (weights and biases of both branches), added once
// per pair of points... i.e. once inside the per-point mean, so the
// regularizer enters the total with coefficient exactly lambda_w.
inline Tensor consistency_loss(Graph& g, const Tensor& proj_src, const Tensor& proj_tgt,
                               const std::vector<Tensor>& proj_params, double lambda_w) {
    if (proj_src.rows() != proj_tgt.rows() || proj_src.cols() != proj_tgt.cols())
        throw ShapeError("consistency_loss: projections are " + proj_src.shape_str() +
                         " vs " + proj_tgt.shape_str());
    if (proj_src.rows() == 0) throw ContractError("consistency_loss: empty batch");
    Tensor d = g.sub(proj_src, proj_tgt);
    Tensor data_term = g.scale(g.sum_squares(d), 1.0 / static_cast<double>(proj_src.rows()));
    if (proj_params.empty() || lambda_w == 0.0) return data_term;
    Tensor reg = g.sum_squares(proj_params[0]);
    for (std::size_t k = 1; k < proj_params.size(); ++k)
        reg = g.add(reg, g.sum_squares(proj_params[k]));
    return g.add(data_term, g.scale(reg, lambda_w));
}

// Per-class means of projected features, weighted by hard labels. The label
// weights are constants; gradients flow only through the features.
struct Centroids {
    std::size_t num_classes = 0;
    std::vector<bool> present;     // class has at least one point in the batch
    std::vector<Tensor> centroid;  // 1 x shared_dim graph nodes, valid where present
};

inline Centroids class_centroids(Graph& g, const Tensor& proj, const LabelMatrix& labels) {
    if (proj.rows() != labels.num_points())
        throw ShapeError("class_centroids: " + std::to_string(labels.num_points()) +
                         " labels for " + proj.shape_str() + " features");
    Centroids out;
    out.num_classes = labels.num_classes();
    out.present.assign(out.num_classes, false);
    out.centroid.resize(out.num_classes);
    std::vector<std::size_t> counts = labels.class_counts();
    for (std::size_t c = 0; c < out.num_classes; ++c) {
        if (counts[c] == 0) continue;
        out.present[c] = true;
        Tensor w(1, labels.num_points()); // constant row of label weights / count
        double inv = 1.0 / static_cast<double>(counts[c]);
        for (std::size_t i = 0; i < labels.num_points(); ++i)
            if (labels.labels()[i] == c) w.data()[i] = inv;
        out.centroid[c] = g.matmul(w, proj);
    }
    return out;
}

// Mean over classes present on both sides of (1 - cos(m_src_c, m_tgt_c)).
// No shared class gives a constant zero contribution.
inline Tensor alignment_loss(Graph& g, const Centroids& src, const Centroids& tgt) {
    if (src.num_classes != tgt.num_classes)
        throw ContractError("alignment_loss: class count mismatch");
    std::vector<std::size_t> shared;
    for (std::size_t c = 0; c < src.num_classes; ++c)
        if (src.present[c] && tgt.present[c]) shared.push_back(c);
    if (shared.empty()) return Tensor::scalar(0.0);
    Tensor acc;
    for (std::size_t c : shared) {
        Tensor one_minus = g.sub(Tensor::scalar(1.0),
                                 g.cosine_similarity(src.centroid[c], tgt.centroid[c]));
        acc = acc.valid() ? g.add(acc, one_minus) : one_minus;
    }
    return g.scale(acc, 1.0 / static_cast<double>(shared.size()));
}

struct LossWeights {
    double lambda_c = 4.0;  // consistency
    double lambda_a = 0.1;  // alignment
    double lambda_w = 0.01; // projection norm inside the consistency loss

    bool operator==(const LossWeights&) const = default;

    void validate() const {
        if (lambda_c < 0 || lambda_a < 0 || lambda_w < 0)
            throw ConfigError("LossWeights: weights must be non-negative");
    }
};

// Per-scene loss terms of one training step. Disabled terms are simply left
// out of their list; `ali` stays an invalid handle when alignment is off.
struct LossParts {
    std::vector<Tensor> seg_src;
    std::vector<Tensor> seg_bridge;
    std::vector<Tensor> con;
    Tensor ali;
};

namespace detail {
inline Tensor mean_of(Graph& g, const std::vector<Tensor>& xs) {
    Tensor acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = g.add(acc, xs[i]);
    return g.scale(acc, 1.0 / static_cast<double>(xs.size()));
}
} // namespace detail

// total = mean(seg_src) + lambda_a * ali + mean(seg_bridge) + lambda_c * mean(con)
// Scene lists are averaged rather than summed so the magnitude does not
// depend on the batch size.
inline Tensor total_loss(Graph& g, const LossParts& parts, const LossWeights& w) {
    if (parts.seg_src.empty() && parts.seg_bridge.empty() && parts.con.empty() &&
        !parts.ali.valid())
        throw ContractError("total_loss: no loss terms");
    Tensor acc;
    auto add_in = [&](Tensor t) { acc = acc.valid() ? g.add(acc, t) : t; };
    if (!parts.seg_src.empty()) add_in(detail::mean_of(g, parts.seg_src));
    if (parts.ali.valid()) add_in(g.scale(parts.ali, w.lambda_a));
    if (!parts.seg_bridge.empty()) add_in(detail::mean_of(g, parts.seg_bridge));
    if (!parts.con.empty()) add_in(g.scale(detail::mean_of(g, parts.con), w.lambda_c));
    return acc;
}

} // namespace bridgeseg
