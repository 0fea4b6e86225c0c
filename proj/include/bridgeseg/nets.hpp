#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "bridgeseg/errors.hpp"
#include "bridgeseg/graph.hpp"
#include "bridgeseg/rng.hpp"
#include "bridgeseg/tensor.hpp"

namespace bridgeseg {

enum class Activation { Tanh, Relu };

inline std::string activation_name(Activation a) {
    return a == Activation::Tanh ? "tanh" : "relu";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    throw ConfigError("unknown activation '" + s + "' (expected tanh or relu)");
}

enum class Role { Source, Target, Teacher };

// Architecture of one branch: MLP feature extractor applied per point, a
// linear classifier head, and a linear projection into the shared space.
// identity_projection drops the projection layer; the shared space is then
// the feature space itself.
struct NetworkSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims{64, 64};
    std::size_t feat_dim = 32;
    std::size_t num_classes = 0;
    std::size_t proj_dim = 16;
    Activation activation = Activation::Tanh;
    bool identity_projection = false;

    // Dimension of the space consistency/alignment are computed in.
    std::size_t shared_dim() const { return identity_projection ? feat_dim : proj_dim; }

    void validate() const {
        if (input_dim == 0) throw ConfigError("NetworkSpec: input_dim must be positive");
        if (feat_dim == 0) throw ConfigError("NetworkSpec: feat_dim must be positive");
        if (num_classes < 2) throw ConfigError("NetworkSpec: need at least 2 classes");
        if (!identity_projection && proj_dim == 0)
            throw ConfigError("NetworkSpec: proj_dim must be positive");
        for (std::size_t h : hidden_dims)
            if (h == 0) throw ConfigError("NetworkSpec: hidden dims must be positive");
    }

    bool operator==(const NetworkSpec&) const = default;
};

// Weights of one branch. Layer weights are stored out x in, biases 1 x out.
struct ParamSet {
    NetworkSpec spec;
    Role role = Role::Source;
    std::vector<Tensor> hidden_w;
    std::vector<Tensor> hidden_b;
    Tensor cls_w, cls_b;
    Tensor proj_w, proj_b; // invalid handles when identity_projection

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        for (std::size_t l = 0; l < hidden_w.size(); ++l) {
            out.push_back(hidden_w[l]);
            out.push_back(hidden_b[l]);
        }
        out.push_back(cls_w);
        out.push_back(cls_b);
        if (proj_w.valid()) {
            out.push_back(proj_w);
            out.push_back(proj_b);
        }
        return out;
    }

    // Weight and bias tensors of the projection layer, for the consistency
    // regularizer. Empty when the projection is the identity.
    std::vector<Tensor> projection_params() const {
        if (!proj_w.valid()) return {};
        return {proj_w, proj_b};
    }

    std::vector<std::pair<std::string, Tensor>> named() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t l = 0; l < hidden_w.size(); ++l) {
            out.emplace_back("extractor." + std::to_string(l) + ".weight", hidden_w[l]);
            out.emplace_back("extractor." + std::to_string(l) + ".bias", hidden_b[l]);
        }
        out.emplace_back("classifier.weight", cls_w);
        out.emplace_back("classifier.bias", cls_b);
        if (proj_w.valid()) {
            out.emplace_back("projection.weight", proj_w);
            out.emplace_back("projection.bias", proj_b);
        }
        return out;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const Tensor& t : trainable()) n += t.size();
        return n;
    }

    void zero_grads() {
        for (Tensor t : trainable()) t.zero_grad();
    }

    void set_requires_grad(bool b) {
        for (Tensor t : trainable()) t.set_requires_grad(b);
    }

    // Deep copy. Teacher copies do not require grad.
    ParamSet clone_as(Role new_role) const {
        ParamSet c;
        c.spec = spec;
        c.role = new_role;
        bool rg = new_role != Role::Teacher;
        for (const Tensor& w : hidden_w) {
            Tensor t = w.detached_copy();
            t.set_requires_grad(rg);
            c.hidden_w.push_back(t);
        }
        for (const Tensor& b : hidden_b) {
            Tensor t = b.detached_copy();
            t.set_requires_grad(rg);
            c.hidden_b.push_back(t);
        }
        c.cls_w = cls_w.detached_copy();
        c.cls_b = cls_b.detached_copy();
        c.cls_w.set_requires_grad(rg);
        c.cls_b.set_requires_grad(rg);
        if (proj_w.valid()) {
            c.proj_w = proj_w.detached_copy();
            c.proj_b = proj_b.detached_copy();
            c.proj_w.set_requires_grad(rg);
            c.proj_b.set_requires_grad(rg);
        }
        return c;
    }
};

namespace detail {
inline Tensor xavier_init(std::size_t out_dim, std::size_t in_dim, Rng& rng) {
    Tensor w(out_dim, in_dim, true);
    double bound = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
    for (std::size_t i = 0; i < w.size(); ++i)
        w.data()[i] = rng.next_uniform(-bound, bound);
    return w;
}
} // namespace detail

// Xavier-uniform weights, zero biases, deterministic in the key.
inline ParamSet init_params(const NetworkSpec& spec, Role role, std::uint64_t key) {
    spec.validate();
    ParamSet p;
    p.spec = spec;
    p.role = role;
    Rng rng(key);
    std::size_t in = spec.input_dim;
    for (std::size_t h : spec.hidden_dims) {
        p.hidden_w.push_back(detail::xavier_init(h, in, rng));
        p.hidden_b.push_back(Tensor(1, h, true));
        in = h;
    }
    p.hidden_w.push_back(detail::xavier_init(spec.feat_dim, in, rng));
    p.hidden_b.push_back(Tensor(1, spec.feat_dim, true));
    p.cls_w = detail::xavier_init(spec.num_classes, spec.feat_dim, rng);
    p.cls_b = Tensor(1, spec.num_classes, true);
    if (!spec.identity_projection) {
        p.proj_w = detail::xavier_init(spec.proj_dim, spec.feat_dim, rng);
        p.proj_b = Tensor(1, spec.proj_dim, true);
    }
    if (role == Role::Teacher) p.set_requires_grad(false);
    return p;
}

// Per-point features for a batch x (N x input_dim): affine + activation per
// hidden layer, affine + activation into feat_dim.
inline Tensor extract_features(Graph& g, const ParamSet& p, const Tensor& x) {
    if (x.cols() != p.spec.input_dim)
        throw ShapeError("extract_features: input is " + x.shape_str() + ", expected cols " +
                         std::to_string(p.spec.input_dim));
    Tensor h = x;
    for (std::size_t l = 0; l < p.hidden_w.size(); ++l) {
        h = g.add_row(g.matmul_nt(h, p.hidden_w[l]), p.hidden_b[l]);
        h = p.spec.activation == Activation::Tanh ? g.tanh(h) : g.relu(h);
    }
    return h;
}

// Class log-probabilities (N x C): linear head + row-wise log-softmax.
inline Tensor classify(Graph& g, const ParamSet& p, const Tensor& feats) {
    if (feats.cols() != p.spec.feat_dim)
        throw ShapeError("classify: features are " + feats.shape_str() + ", expected cols " +
                         std::to_string(p.spec.feat_dim));
    return g.log_softmax_rows(g.add_row(g.matmul_nt(feats, p.cls_w), p.cls_b));
}

inline bool proj_present(const ParamSet& p) { return p.proj_w.valid(); }

// Projection into the shared space (N x shared_dim). Identity projections
// pass features through untouched.
inline Tensor project(Graph& g, const ParamSet& p, const Tensor& feats) {
    if (feats.cols() != p.spec.feat_dim)
        throw ShapeError("project: features are " + feats.shape_str() + ", expected cols " +
                         std::to_string(p.spec.feat_dim));
    if (!proj_present(p)) return feats;
    return g.add_row(g.matmul_nt(feats, p.proj_w), p.proj_b);
}

// Hard labels by row-wise argmax of the class scores; ties break to the
// lowest class index.
inline std::vector<std::size_t> argmax_rows(const Tensor& scores) {
    std::vector<std::size_t> out(scores.rows());
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < scores.cols(); ++j)
            if (scores.at(i, j) > scores.at(i, best)) best = j;
        out[i] = best;
    }
    return out;
}

inline std::vector<std::size_t> predict_labels(const ParamSet& p, const Tensor& x) {
    Graph g; // throwaway graph; nothing here requires grad when p is a teacher,
             // and for students the nodes are simply never backpropagated
    Tensor lp = classify(g, p, extract_features(g, p, x));
    return argmax_rows(lp);
}

} // namespace bridgeseg
