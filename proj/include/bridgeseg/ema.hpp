#pragma once

#include <algorithm>
#include <cstdint>

#include "bridgeseg/errors.hpp"
#include "bridgeseg/nets.hpp"

namespace bridgeseg {

// Exponential-moving-average copy of the source branch. `step` counts
// completed EMA updates; the very first update runs with alpha = 0, which
// makes the teacher an exact copy of the student after step one.
struct TeacherState {
    ParamSet teacher;
    double alpha_max = 0.999;
    long long step = 0;
};

inline double alpha_at_step(long long t, double alpha_max) {
    if (t < 0) throw ContractError("alpha_at_step: negative step");
    double ramp = 1.0 - 1.0 / static_cast<double>(t + 1);
    return std::min(ramp, alpha_max);
}

inline TeacherState init_teacher(const ParamSet& student, double alpha_max = 0.999) {
    if (student.role != Role::Source)
        throw ContractError("init_teacher: teacher shadows the source branch");
    TeacherState st;
    st.teacher = student.clone_as(Role::Teacher);
    st.alpha_max = alpha_max;
    st.step = 0;
    return st;
}

// theta_teacher <- alpha * theta_teacher + (1 - alpha) * theta_student,
// elementwise over every weight and bias, then advance the step counter.
inline void ema_update(TeacherState& st, const ParamSet& student) {
    if (!(student.spec == st.teacher.spec))
        throw ContractError("ema_update: student/teacher architecture mismatch");
    double alpha = alpha_at_step(st.step, st.alpha_max);
    std::vector<Tensor> tp = st.teacher.trainable();
    std::vector<Tensor> sp = student.trainable();
    for (std::size_t k = 0; k < tp.size(); ++k) {
        double* t = tp[k].data();
        const double* s = sp[k].data();
        for (std::size_t i = 0; i < tp[k].size(); ++i)
            t[i] = alpha * t[i] + (1.0 - alpha) * s[i];
    }
    st.step += 1;
}

} // namespace bridgeseg
