#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bridgeseg/errors.hpp"

namespace bridgeseg {

class Graph;

namespace detail {
struct TensorStorage {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    std::vector<double> grad; // empty until materialized
    bool requires_grad = false;
    const Graph* producer = nullptr; // graph whose node produced this tensor
};
} // namespace detail

// Dense 2-D double matrix, row-major. Copies share storage (handle semantics),
// which is what lets the tape's backward closures write into the same buffers
// the caller still holds.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::size_t rows, std::size_t cols, bool requires_grad = false)
        : s_(std::make_shared<detail::TensorStorage>()) {
        s_->rows = rows;
        s_->cols = cols;
        s_->values.assign(rows * cols, 0.0);
        s_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v) {
        Tensor t(1, 1);
        t.data()[0] = v;
        return t;
    }

    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows,
                            bool requires_grad = false) {
        std::size_t r = rows.size();
        std::size_t c = r == 0 ? 0 : rows.begin()->size();
        Tensor t(r, c, requires_grad);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c)
                throw ShapeError("Tensor::from_rows: ragged rows");
            std::size_t j = 0;
            for (double v : row) t.at(i, j++) = v;
            ++i;
        }
        return t;
    }

    static Tensor row_vector(const std::vector<double>& v, bool requires_grad = false) {
        Tensor t(1, v.size(), requires_grad);
        for (std::size_t j = 0; j < v.size(); ++j) t.data()[j] = v[j];
        return t;
    }

    static Tensor filled(std::size_t rows, std::size_t cols, double v,
                         bool requires_grad = false) {
        Tensor t(rows, cols, requires_grad);
        for (double& x : t.values_mutable()) x = v;
        return t;
    }

    bool valid() const { return static_cast<bool>(s_); }
    std::size_t rows() const { return s_->rows; }
    std::size_t cols() const { return s_->cols; }
    std::size_t size() const { return s_->rows * s_->cols; }

    // A const Tensor is a const handle, not a read-only matrix; mutators are
    // const so that copies captured in backward closures can write through.
    double& at(std::size_t i, std::size_t j) const { return s_->values[i * s_->cols + j]; }

    double* data() const { return s_->values.data(); }
    std::span<const double> values() const { return s_->values; }
    std::span<double> values_mutable() const { return s_->values; }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool b) const { s_->requires_grad = b; }

    bool has_grad() const { return !s_->grad.empty(); }

    void ensure_grad() const {
        if (s_->grad.empty()) s_->grad.assign(size(), 0.0);
    }
    void zero_grad() const { s_->grad.assign(size(), 0.0); }
    void clear_grad() const { s_->grad.clear(); }

    double* grad_data() const {
        ensure_grad();
        return s_->grad.data();
    }
    std::span<const double> grad() const {
        if (s_->grad.empty())
            throw ContractError("Tensor::grad: gradient has not been materialized");
        return s_->grad;
    }

    // Value of a 1x1 tensor.
    double value() const {
        if (rows() != 1 || cols() != 1)
            throw ContractError("Tensor::value: tensor is " + shape_str() + ", expected 1x1");
        return s_->values[0];
    }

    double grad_value() const {
        if (rows() != 1 || cols() != 1)
            throw ContractError("Tensor::grad_value: tensor is " + shape_str() + ", expected 1x1");
        return grad()[0];
    }

    // Deep copy with fresh storage, detached from any graph.
    Tensor detached_copy() const {
        Tensor t(rows(), cols(), false);
        t.s_->values = s_->values;
        return t;
    }

    std::string shape_str() const {
        if (!s_) return "<null>";
        return std::to_string(rows()) + "x" + std::to_string(cols());
    }

    bool same_storage(const Tensor& o) const { return s_ == o.s_; }

    const Graph* producer() const { return s_->producer; }
    void mark_produced_by(const Graph* g) const { s_->producer = g; }

private:
    std::shared_ptr<detail::TensorStorage> s_;
};

} // namespace bridgeseg
