#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bridgeseg/data.hpp" // byte helpers
#include "bridgeseg/errors.hpp"
#include "bridgeseg/nets.hpp"
#include "bridgeseg/tensor.hpp"

namespace bridgeseg {

// Checkpoint file: magic "LSBP", version u16, then one record per tensor:
// name length u16, name bytes, rows u32, cols u32, f64 values row-major.
// Everything little-endian. Branch tensors are namespaced ("source.",
// "target.", "teacher."); "meta.activation" stores the activation id.

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void write_checkpoint_raw(const std::filesystem::path& path,
                                 const NamedTensors& tensors) {
    std::string buf;
    buf += "LSBP";
    detail::put_u16(buf, 1);
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff)
            throw ContractError("write_checkpoint: tensor name too long");
        detail::put_u16(buf, static_cast<std::uint16_t>(name.size()));
        buf += name;
        detail::put_u32(buf, static_cast<std::uint32_t>(t.rows()));
        detail::put_u32(buf, static_cast<std::uint32_t>(t.cols()));
        for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64(buf, t.data()[i]);
    }
    detail::spit(path, buf);
}

inline NamedTensors read_checkpoint_raw(const std::filesystem::path& path) {
    std::string buf = detail::slurp(path);
    detail::ByteReader r{buf, path.string()};
    if (r.bytes(4) != "LSBP")
        throw FormatError(path.string() + ": bad magic, not a checkpoint file");
    std::uint16_t version = r.u16();
    if (version != 1)
        throw FormatError(path.string() + ": unsupported checkpoint version " +
                          std::to_string(version));
    NamedTensors out;
    while (r.pos < buf.size()) {
        std::uint16_t name_len = r.u16();
        std::string name = r.bytes(name_len);
        std::uint32_t rows = r.u32();
        std::uint32_t cols = r.u32();
        Tensor t(rows, cols);
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = r.f64();
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

// Branches are written in the given order; within a branch, tensor order is
// the ParamSet enumeration order. Keeping the order fixed makes checkpoints
// of identical runs byte-identical.
inline void write_checkpoint(const std::filesystem::path& path,
                             const std::vector<std::pair<std::string, const ParamSet*>>& branches,
                             Activation activation) {
    NamedTensors tensors;
    for (const auto& [prefix, params] : branches)
        for (const auto& [name, t] : params->named())
            tensors.emplace_back(prefix + "." + name, t);
    tensors.emplace_back("meta.activation",
                         Tensor::scalar(activation == Activation::Tanh ? 0.0 : 1.0));
    write_checkpoint_raw(path, tensors);
}

// Rebuilds one branch from "<prefix>." records. The architecture is inferred
// from the tensor shapes; activation comes from the meta record.
inline ParamSet paramset_from_checkpoint(const NamedTensors& records,
                                         const std::string& prefix, Role role,
                                         const std::string& context) {
    std::map<std::string, Tensor> by_name;
    bool any = false;
    for (const auto& [name, t] : records) {
        if (name.rfind(prefix + ".", 0) == 0) {
            by_name[name.substr(prefix.size() + 1)] = t;
            any = true;
        }
    }
    if (!any)
        throw FormatError(context + ": checkpoint has no '" + prefix + "' branch");

    auto take = [&](const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw FormatError(context + ": checkpoint branch '" + prefix + "' is missing '" +
                              name + "'");
        Tensor t = it->second;
        by_name.erase(it);
        return t;
    };

    ParamSet p;
    p.role = role;
    std::size_t layer = 0;
    while (by_name.count("extractor." + std::to_string(layer) + ".weight")) {
        p.hidden_w.push_back(take("extractor." + std::to_string(layer) + ".weight"));
        p.hidden_b.push_back(take("extractor." + std::to_string(layer) + ".bias"));
        ++layer;
    }
    if (p.hidden_w.empty())
        throw FormatError(context + ": checkpoint branch '" + prefix + "' has no extractor");
    p.cls_w = take("classifier.weight");
    p.cls_b = take("classifier.bias");
    bool has_proj = by_name.count("projection.weight") > 0;
    if (has_proj) {
        p.proj_w = take("projection.weight");
        p.proj_b = take("projection.bias");
    }
    if (!by_name.empty())
        throw FormatError(context + ": checkpoint branch '" + prefix +
                          "' has unexpected tensor '" + by_name.begin()->first + "'");

    NetworkSpec spec;
    spec.input_dim = p.hidden_w.front().cols();
    spec.hidden_dims.clear();
    for (std::size_t l = 0; l + 1 < p.hidden_w.size(); ++l)
        spec.hidden_dims.push_back(p.hidden_w[l].rows());
    spec.feat_dim = p.hidden_w.back().rows();
    spec.num_classes = p.cls_w.rows();
    spec.identity_projection = !has_proj;
    spec.proj_dim = has_proj ? p.proj_w.rows() : spec.feat_dim;
    p.spec = spec;
    spec.validate();

    bool rg = role != Role::Teacher;
    p.set_requires_grad(rg);
    return p;
}

inline Activation activation_from_checkpoint(const NamedTensors& records,
                                             const std::string& context) {
    for (const auto& [name, t] : records)
        if (name == "meta.activation") return t.value() == 0.0 ? Activation::Tanh : Activation::Relu;
    throw FormatError(context + ": checkpoint has no meta.activation record");
}

inline bool checkpoint_has_branch(const NamedTensors& records, const std::string& prefix) {
    for (const auto& [name, t] : records)
        if (name.rfind(prefix + ".", 0) == 0) return true;
    return false;
}

} // namespace bridgeseg
