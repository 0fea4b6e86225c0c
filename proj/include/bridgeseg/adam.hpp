#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bridgeseg/errors.hpp"
#include "bridgeseg/tensor.hpp"

namespace bridgeseg {

// Adam with bias correction. Moment buffers are aligned with the parameter
// list the state was created for; the same list (same shapes, same order)
// must be passed to every step.
struct AdamState {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long t = 0; // completed steps
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    static AdamState for_params(const std::vector<Tensor>& params, double lr = 0.001,
                                double beta1 = 0.9, double beta2 = 0.999,
                                double eps = 1e-8) {
        AdamState st;
        st.lr = lr;
        st.beta1 = beta1;
        st.beta2 = beta2;
        st.eps = eps;
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const Tensor& p : params) {
            st.m.emplace_back(p.size(), 0.0);
            st.v.emplace_back(p.size(), 0.0);
        }
        return st;
    }
};

// One Adam update over the given parameters, in place. Every parameter must
// carry a materialized gradient (an all-zero gradient is fine, a missing one
// is a caller bug).
inline void adam_step(std::vector<Tensor>& params, AdamState& st) {
    if (params.size() != st.m.size())
        throw ContractError("adam_step: state built for " + std::to_string(st.m.size()) +
                            " tensors, got " + std::to_string(params.size()));
    st.t += 1;
    double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
    double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params[k];
        if (p.size() != st.m[k].size())
            throw ContractError("adam_step: tensor " + std::to_string(k) +
                                " changed size since state creation");
        if (!p.has_grad())
            throw ContractError("adam_step: tensor " + std::to_string(k) +
                                " has no gradient");
        const double* g = p.grad().data();
        double* x = p.data();
        double* mk = st.m[k].data();
        double* vk = st.v[k].data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            mk[i] = st.beta1 * mk[i] + (1.0 - st.beta1) * g[i];
            vk[i] = st.beta2 * vk[i] + (1.0 - st.beta2) * g[i] * g[i];
            double mhat = mk[i] / bc1;
            double vhat = vk[i] / bc2;
            x[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

} // namespace bridgeseg
