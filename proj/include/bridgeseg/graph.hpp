#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "bridgeseg/errors.hpp"
#include "bridgeseg/tensor.hpp"

namespace bridgeseg {

namespace detail {

// C(n x m) (+)= A(n x k) * B(k x m)
inline void gemm_nn(const double* a, std::size_t n, std::size_t k,
                    const double* b, std::size_t m, double* c, bool accumulate) {
    if (!accumulate)
        for (std::size_t i = 0; i < n * m; ++i) c[i] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            double aip = arow[p];
            const double* brow = b + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
        }
    }
}

// C(n x m) (+)= A(n x k) * B(m x k)^T
inline void gemm_nt(const double* a, std::size_t n, std::size_t k,
                    const double* b, std::size_t m, double* c, bool accumulate) {
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            if (accumulate)
                crow[j] += acc;
            else
                crow[j] = acc;
        }
    }
}

// C(k x m) (+)= A(n x k)^T * B(n x m)
inline void gemm_tn(const double* a, std::size_t n, std::size_t k,
                    const double* b, std::size_t m, double* c, bool accumulate) {
    if (!accumulate)
        for (std::size_t i = 0; i < k * m; ++i) c[i] = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
        const double* arow = a + p * k;
        const double* brow = b + p * m;
        for (std::size_t i = 0; i < k; ++i) {
            double api = arow[i];
            double* crow = c + i * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += api * brow[j];
        }
    }
}

} // namespace detail

// Reverse-mode tape over Tensor. A graph is built fresh for every training
// step: primitives compute values eagerly and, when any input requires grad,
// record a closure that propagates the output gradient back to the inputs.
// backward() replays the closures in reverse recording order. Summations run
// in a fixed sequential order, so identical inputs give bit-identical results.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    std::size_t node_count() const { return nodes_.size(); }

    // ---- elementwise and structural primitives ----

    Tensor add(const Tensor& a, const Tensor& b) {
        require_same_shape("add", a, b);
        Tensor out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i)
            out.data()[i] = a.data()[i] + b.data()[i];
        return record("add", out, {a, b}, [a, b, out]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad_data();
                for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad_data();
                for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[i];
            }
        });
    }

    Tensor sub(const Tensor& a, const Tensor& b) {
        require_same_shape("sub", a, b);
        Tensor out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i)
            out.data()[i] = a.data()[i] - b.data()[i];
        return record("sub", out, {a, b}, [a, b, out]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad_data();
                for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad_data();
                for (std::size_t i = 0; i < b.size(); ++i) gb[i] -= g[i];
            }
        });
    }

    Tensor mul(const Tensor& a, const Tensor& b) {
        require_same_shape("mul", a, b);
        Tensor out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i)
            out.data()[i] = a.data()[i] * b.data()[i];
        return record("mul", out, {a, b}, [a, b, out]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad_data();
                for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                double* gb = b.grad_data();
                for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[i] * a.data()[i];
            }
        });
    }

    Tensor scale(const Tensor& a, double s) {
        Tensor out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
        return record("scale", out, {a}, [a, out, s]() mutable {
            if (!a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad_data();
            for (std::size_t i = 0; i < a.size(); ++i) ga[i] += s * g[i];
        });
    }

    // Broadcast-add a 1 x C row vector onto every row of an N x C matrix.
    Tensor add_row(const Tensor& m, const Tensor& row) {
        if (row.rows() != 1 || row.cols() != m.cols())
            throw ShapeError("add_row: shape mismatch (" + m.shape_str() + " vs " +
                             row.shape_str() + ")");
        Tensor out(m.rows(), m.cols());
        for (std::size_t i = 0; i < m.rows(); ++i)
            for (std::size_t j = 0; j < m.cols(); ++j)
                out.at(i, j) = m.at(i, j) + row.at(0, j);
        return record("add_row", out, {m, row}, [m, row, out]() mutable {
            const double* g = out.grad().data();
            if (m.requires_grad()) {
                double* gm = m.grad_data();
                for (std::size_t i = 0; i < m.size(); ++i) gm[i] += g[i];
            }
            if (row.requires_grad()) {
                double* gr = row.grad_data();
                std::size_t c = out.cols();
                for (std::size_t i = 0; i < out.rows(); ++i)
                    for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
            }
        });
    }

    // ---- matrix products ----

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.cols() != b.rows())
            throw ShapeError("matmul: shape mismatch (" + a.shape_str() + " vs " +
                             b.shape_str() + ")");
        Tensor out(a.rows(), b.cols());
        detail::gemm_nn(a.data(), a.rows(), a.cols(), b.data(), b.cols(), out.data(), false);
        return record("matmul", out, {a, b}, [a, b, out]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) // dA += dY * B^T
                detail::gemm_nt(g, out.rows(), out.cols(), b.data(), b.rows(),
                                a.grad_data(), true);
            if (b.requires_grad()) // dB += A^T * dY
                detail::gemm_tn(a.data(), a.rows(), a.cols(), g, out.cols(),
                                b.grad_data(), true);
        });
    }

    // a * b^T, for weight matrices stored out x in.
    Tensor matmul_nt(const Tensor& a, const Tensor& b) {
        if (a.cols() != b.cols())
            throw ShapeError("matmul_nt: shape mismatch (" + a.shape_str() + " vs " +
                             b.shape_str() + ")");
        Tensor out(a.rows(), b.rows());
        detail::gemm_nt(a.data(), a.rows(), a.cols(), b.data(), b.rows(), out.data(), false);
        return record("matmul_nt", out, {a, b}, [a, b, out]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) // dA += dY * B
                detail::gemm_nn(g, out.rows(), out.cols(), b.data(), b.cols(),
                                a.grad_data(), true);
            if (b.requires_grad()) // dB += dY^T * A
                detail::gemm_tn(g, out.rows(), out.cols(), a.data(), a.cols(),
                                b.grad_data(), true);
        });
    }

    // ---- nonlinearities ----

    Tensor tanh(const Tensor& a) {
        Tensor out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::tanh(a.data()[i]);
        return record("tanh", out, {a}, [a, out]() mutable {
            if (!a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad_data();
            for (std::size_t i = 0; i < a.size(); ++i) {
                double y = out.data()[i];
                ga[i] += (1.0 - y * y) * g[i];
            }
        });
    }

    Tensor relu(const Tensor& a) {
        Tensor out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i)
            out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
        return record("relu", out, {a}, [a, out]() mutable {
            if (!a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad_data();
            for (std::size_t i = 0; i < a.size(); ++i)
                if (a.data()[i] > 0.0) ga[i] += g[i];
        });
    }

    Tensor log(const Tensor& a) {
        Tensor out(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::log(a.data()[i]);
        return record("log", out, {a}, [a, out]() mutable {
            if (!a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad_data();
            for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i] / a.data()[i];
        });
    }

    // Row-wise log-softmax with the usual max subtraction for stability.
    Tensor log_softmax_rows(const Tensor& a) {
        if (a.cols() == 0) throw ShapeError("log_softmax_rows: zero columns");
        Tensor out(a.rows(), a.cols());
        std::size_t c = a.cols();
        for (std::size_t i = 0; i < a.rows(); ++i) {
            const double* x = a.data() + i * c;
            double* y = out.data() + i * c;
            double mx = x[0];
            for (std::size_t j = 1; j < c; ++j)
                if (x[j] > mx) mx = x[j];
            double sum = 0.0;
            for (std::size_t j = 0; j < c; ++j) sum += std::exp(x[j] - mx);
            double lse = mx + std::log(sum);
            for (std::size_t j = 0; j < c; ++j) y[j] = x[j] - lse;
        }
        return record("log_softmax_rows", out, {a}, [a, out]() mutable {
            if (!a.requires_grad()) return;
            const double* g = out.grad().data();
            double* ga = a.grad_data();
            std::size_t c = out.cols();
            for (std::size_t i = 0; i < out.rows(); ++i) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < c; ++j) gsum += g[i * c + j];
                for (std::size_t j = 0; j < c; ++j) {
                    double soft = std::exp(out.data()[i * c + j]);
                    ga[i * c + j] += g[i * c + j] - soft * gsum;
                }
            }
        });
    }

    // ---- reductions ----

    Tensor sum(const Tensor& a) {
        Tensor out(1, 1);
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
        out.data()[0] = acc;
        return record("sum", out, {a}, [a, out]() mutable {
            if (!a.requires_grad()) return;
            double g = out.grad()[0];
            double* ga = a.grad_data();
            for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g;
        });
    }

    Tensor mean(const Tensor& a) {
        if (a.size() == 0) throw NumericError("mean: empty tensor");
        Tensor out(1, 1);
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
        out.data()[0] = acc / static_cast<double>(a.size());
        return record("mean", out, {a}, [a, out]() mutable {
            if (!a.requires_grad()) return;
            double g = out.grad()[0] / static_cast<double>(a.size());
            double* ga = a.grad_data();
            for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g;
        });
    }

    Tensor sum_squares(const Tensor& a) {
        Tensor out(1, 1);
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * a.data()[i];
        out.data()[0] = acc;
        return record("sum_squares", out, {a}, [a, out]() mutable {
            if (!a.requires_grad()) return;
            double g = out.grad()[0];
            double* ga = a.grad_data();
            for (std::size_t i = 0; i < a.size(); ++i) ga[i] += 2.0 * a.data()[i] * g;
        });
    }

    // Cosine similarity of two equal-length vectors (1 x d or d x 1).
    // Exactly zero norm on either side is a degenerate input and throws.
    Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
        if (u.rows() != 1 && u.cols() != 1)
            throw ShapeError("cosine_similarity: first input " + u.shape_str() +
                             " is not a vector");
        if (v.rows() != 1 && v.cols() != 1)
            throw ShapeError("cosine_similarity: second input " + v.shape_str() +
                             " is not a vector");
        if (u.size() != v.size())
            throw ShapeError("cosine_similarity: shape mismatch (" + u.shape_str() +
                             " vs " + v.shape_str() + ")");
        double dot = 0.0, uu = 0.0, vv = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            dot += u.data()[i] * v.data()[i];
            uu += u.data()[i] * u.data()[i];
            vv += v.data()[i] * v.data()[i];
        }
        if (uu == 0.0 || vv == 0.0)
            throw NumericError("cosine_similarity: zero-norm vector");
        double nu = std::sqrt(uu), nv = std::sqrt(vv);
        double cosv = dot / (nu * nv);
        Tensor out(1, 1);
        out.data()[0] = cosv;
        return record("cosine_similarity", out, {u, v},
                      [u, v, out, nu, nv, cosv]() mutable {
                          double g = out.grad()[0];
                          if (u.requires_grad()) {
                              double* gu = u.grad_data();
                              for (std::size_t i = 0; i < u.size(); ++i)
                                  gu[i] += g * (v.data()[i] / (nu * nv) -
                                                cosv * u.data()[i] / (nu * nu));
                          }
                          if (v.requires_grad()) {
                              double* gv = v.grad_data();
                              for (std::size_t i = 0; i < v.size(); ++i)
                                  gv[i] += g * (u.data()[i] / (nu * nv) -
                                                cosv * v.data()[i] / (nv * nv));
                          }
                      });
    }

    // ---- row selection / assembly ----

    Tensor concat_rows(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw ContractError("concat_rows: no inputs");
        std::size_t c = parts.front().cols();
        std::size_t r = 0;
        for (const Tensor& p : parts) {
            if (p.cols() != c)
                throw ShapeError("concat_rows: shape mismatch (" +
                                 parts.front().shape_str() + " vs " + p.shape_str() + ")");
            r += p.rows();
        }
        Tensor out(r, c);
        std::size_t off = 0;
        for (const Tensor& p : parts) {
            for (std::size_t i = 0; i < p.size(); ++i) out.data()[off + i] = p.data()[i];
            off += p.size();
        }
        return record("concat_rows", out, parts, [parts, out]() mutable {
            const double* g = out.grad().data();
            std::size_t off = 0;
            for (const Tensor& p : parts) {
                if (p.requires_grad()) {
                    double* gp = p.grad_data();
                    for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
                }
                off += p.size();
            }
        });
    }

    Tensor select_row(const Tensor& m, std::size_t row) {
        if (row >= m.rows())
            throw ContractError("select_row: row " + std::to_string(row) +
                                " out of range for " + m.shape_str());
        Tensor out(1, m.cols());
        for (std::size_t j = 0; j < m.cols(); ++j) out.data()[j] = m.at(row, j);
        return record("select_row", out, {m}, [m, out, row]() mutable {
            if (!m.requires_grad()) return;
            const double* g = out.grad().data();
            double* gm = m.grad_data();
            for (std::size_t j = 0; j < m.cols(); ++j) gm[row * m.cols() + j] += g[j];
        });
    }

    Tensor slice_rows(const Tensor& m, std::size_t first, std::size_t count) {
        if (first + count > m.rows())
            throw ContractError("slice_rows: range [" + std::to_string(first) + ", " +
                                std::to_string(first + count) + ") out of range for " +
                                m.shape_str());
        Tensor out(count, m.cols());
        for (std::size_t i = 0; i < count * m.cols(); ++i)
            out.data()[i] = m.data()[first * m.cols() + i];
        return record("slice_rows", out, {m}, [m, out, first]() mutable {
            if (!m.requires_grad()) return;
            const double* g = out.grad().data();
            double* gm = m.grad_data();
            std::size_t base = first * m.cols();
            for (std::size_t i = 0; i < out.size(); ++i) gm[base + i] += g[i];
        });
    }

    // out[i, 0] = m[i, col_of_row[i]]
    Tensor gather_cols(const Tensor& m, const std::vector<std::size_t>& col_of_row) {
        if (col_of_row.size() != m.rows())
            throw ContractError("gather_cols: " + std::to_string(col_of_row.size()) +
                                " indices for " + m.shape_str());
        for (std::size_t i = 0; i < col_of_row.size(); ++i)
            if (col_of_row[i] >= m.cols())
                throw ContractError("gather_cols: index " + std::to_string(col_of_row[i]) +
                                    " out of range for " + m.shape_str());
        Tensor out(m.rows(), 1);
        for (std::size_t i = 0; i < m.rows(); ++i) out.data()[i] = m.at(i, col_of_row[i]);
        return record("gather_cols", out, {m}, [m, out, col_of_row]() mutable {
            if (!m.requires_grad()) return;
            const double* g = out.grad().data();
            double* gm = m.grad_data();
            for (std::size_t i = 0; i < out.rows(); ++i)
                gm[i * m.cols() + col_of_row[i]] += g[i];
        });
    }

    // ---- backward ----

    // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients of
    // node outputs are recomputed from scratch on every call; gradients of
    // leaves accumulate across calls, so callers zero them between steps.
    void backward(const Tensor& loss) {
        if (loss.rows() != 1 || loss.cols() != 1)
            throw ContractError("backward: loss must be 1x1, got " + loss.shape_str());
        if (loss.producer() != this)
            throw ContractError("backward: loss tensor was not produced by this graph");
        for (Node& n : nodes_) n.out.clear_grad();
        Tensor l = loss;
        l.grad_data()[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
            if (it->out.has_grad()) it->back();
        // Leaves that require grad but sit on no path to the loss still end up
        // with a materialized all-zero gradient.
        for (Node& n : nodes_)
            for (Tensor& in : n.ins)
                if (in.requires_grad() && !in.has_grad()) in.ensure_grad();
    }

private:
    struct Node {
        const char* op;
        Tensor out;
        std::vector<Tensor> ins;
        std::function<void()> back;
    };

    Tensor record(const char* op, Tensor out, std::vector<Tensor> ins,
                  std::function<void()> back) {
        bool any = false;
        for (const Tensor& t : ins)
            if (t.requires_grad()) any = true;
        if (!any) return out;
        out.set_requires_grad(true);
        out.mark_produced_by(this);
        nodes_.push_back(Node{op, out, std::move(ins), std::move(back)});
        return out;
    }

    static void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
        if (a.rows() != b.rows() || a.cols() != b.cols())
            throw ShapeError(std::string(op) + ": shape mismatch (" + a.shape_str() +
                             " vs " + b.shape_str() + ")");
    }

    std::vector<Node> nodes_;
};

} // namespace bridgeseg
