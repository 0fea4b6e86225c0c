#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "bridgeseg/errors.hpp"
#include "bridgeseg/tensor.hpp"

namespace bridgeseg {

struct GradCheckResult {
    bool pass = true;
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
};

// Central finite differences against analytic gradients.
//
// loss_fn must rebuild the whole forward pass from the current parameter
// values and return the scalar loss; it is called twice per coordinate with a
// parameter perturbed by +/- step. analytic[k] holds d(loss)/d(params[k]) as
// computed by the tape, matching params order. Relative error uses
// |a - n| / max(floor, |a| + |n|).
inline GradCheckResult finite_diff_check(std::vector<Tensor>& params,
                                         const std::vector<std::string>& names,
                                         const std::vector<Tensor>& analytic,
                                         const std::function<double()>& loss_fn,
                                         double step = 1e-5, double tol = 1e-4,
                                         double floor_ = 1e-8) {
    if (params.size() != analytic.size() || params.size() != names.size())
        throw ContractError("finite_diff_check: params/names/analytic size mismatch");
    GradCheckResult res;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params[k];
        if (analytic[k].size() != p.size())
            throw ContractError("finite_diff_check: analytic gradient for " + names[k] +
                                " has wrong size");
        for (std::size_t i = 0; i < p.size(); ++i) {
            double saved = p.data()[i];
            p.data()[i] = saved + step;
            double up = loss_fn();
            p.data()[i] = saved - step;
            double down = loss_fn();
            p.data()[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("finite_diff_check: non-finite loss while probing " +
                                   names[k] + "[" + std::to_string(i) + "]");
            double numeric = (up - down) / (2.0 * step);
            double a = analytic[k].data()[i];
            double denom = std::abs(a) + std::abs(numeric);
            if (denom < floor_) denom = floor_;
            double rel = std::abs(a - numeric) / denom;
            ++res.coords_checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = names[k];
                res.worst_index = i;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
    }
    res.pass = res.max_rel_err <= tol;
    return res;
}

} // namespace bridgeseg
