#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "bridgeseg/adam.hpp"
#include "bridgeseg/errors.hpp"
#include "bridgeseg/grad_check.hpp"
#include "bridgeseg/graph.hpp"
#include "bridgeseg/rng.hpp"
#include "bridgeseg/tensor.hpp"

using namespace bridgeseg;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, bool rg = true) {
    Tensor t(rows, cols, rg);
    for (double& v : t.values_mutable()) v = rng.next_uniform(-1.5, 1.5);
    return t;
}

// Runs one backward pass to collect analytic gradients, then verifies every
// coordinate of every parameter with central differences. build() must
// reconstruct the loss from the current parameter values on each call.
GradCheckResult check_gradients(std::vector<Tensor> params,
                                const std::vector<std::string>& names,
                                const std::function<Tensor(Graph&)>& build,
                                double step = 1e-5, double tol = 1e-4) {
    Graph g;
    Tensor loss = build(g);
    g.backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params) {
        Tensor copy(p.rows(), p.cols());
        auto src = p.grad();
        std::copy(src.begin(), src.end(), copy.values_mutable().begin());
        analytic.push_back(copy);
    }
    auto value_fn = [&]() {
        Graph fresh;
        return build(fresh).value();
    };
    return finite_diff_check(params, names, analytic, value_fn, step, tol);
}

} // namespace

TEST_CASE("tensor construction and scalar access", "[tensor]") {
    Tensor a = Tensor::from_rows({{1.0, 2.0}, {3.0, 4.0}});
    REQUIRE(a.rows() == 2);
    REQUIRE(a.cols() == 2);
    REQUIRE(a.at(1, 0) == 3.0);
    REQUIRE(a.shape_str() == "2x2");

    Tensor s = Tensor::scalar(2.5);
    REQUIRE(s.value() == 2.5);
    REQUIRE_THROWS_AS(a.value(), ContractError);

    Tensor f = Tensor::filled(2, 3, -1.0);
    for (double v : f.values()) REQUIRE(v == -1.0);

    Tensor r = Tensor::row_vector({5.0, 6.0});
    REQUIRE(r.rows() == 1);
    REQUIRE(r.at(0, 1) == 6.0);
}

TEST_CASE("tensors are shared handles; detached_copy severs storage", "[tensor]") {
    Tensor a = Tensor::from_rows({{1.0, 2.0}});
    Tensor alias = a;
    alias.at(0, 0) = 9.0;
    REQUIRE(a.at(0, 0) == 9.0);
    REQUIRE(a.same_storage(alias));

    Tensor copy = a.detached_copy();
    REQUIRE_FALSE(copy.same_storage(a));
    copy.at(0, 1) = -7.0;
    REQUIRE(a.at(0, 1) == 2.0);
}

TEST_CASE("gradient access requires materialization", "[tensor]") {
    Tensor a = Tensor::from_rows({{1.0}}, true);
    REQUIRE_FALSE(a.has_grad());
    REQUIRE_THROWS_AS(a.grad(), ContractError);
    a.ensure_grad();
    REQUIRE(a.grad()[0] == 0.0);
}

TEST_CASE("matmul forward on a fixed example", "[graph]") {
    Graph g;
    Tensor a = Tensor::from_rows({{1.0, 2.0}, {3.0, 4.0}});
    Tensor b = Tensor::from_rows({{1.0}, {1.0}});
    Tensor c = g.matmul(a, b);
    REQUIRE(c.rows() == 2);
    REQUIRE(c.cols() == 1);
    REQUIRE(c.at(0, 0) == 3.0);
    REQUIRE(c.at(1, 0) == 7.0);
}

TEST_CASE("matmul_nt matches matmul against the transpose", "[graph]") {
    Rng rng(derive_key(7, "matmul_nt"));
    Tensor a = random_tensor(rng, 3, 4, false);
    Tensor b = random_tensor(rng, 2, 4, false);
    Tensor bt(4, 2);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 4; ++j) bt.at(j, i) = b.at(i, j);
    Graph g;
    Tensor lhs = g.matmul_nt(a, b);
    Tensor rhs = g.matmul(a, bt);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            REQUIRE_THAT(lhs.at(i, j), WithinAbs(rhs.at(i, j), 1e-12));
}

TEST_CASE("elementwise ops and row broadcast", "[graph]") {
    Graph g;
    Tensor a = Tensor::from_rows({{1.0, -2.0}, {0.5, 4.0}});
    Tensor b = Tensor::from_rows({{2.0, 3.0}, {-1.0, 0.25}});
    Tensor sum = g.add(a, b);
    Tensor diff = g.sub(a, b);
    Tensor prod = g.mul(a, b);
    Tensor scaled = g.scale(a, -2.0);
    REQUIRE(sum.at(0, 0) == 3.0);
    REQUIRE(diff.at(0, 1) == -5.0);
    REQUIRE(prod.at(1, 0) == -0.5);
    REQUIRE(scaled.at(1, 1) == -8.0);

    Tensor bias = Tensor::row_vector({10.0, 20.0});
    Tensor shifted = g.add_row(a, bias);
    REQUIRE(shifted.at(0, 0) == 11.0);
    REQUIRE(shifted.at(1, 1) == 24.0);
}

TEST_CASE("log_softmax of a uniform row is -log(n)", "[graph]") {
    Graph g;
    Tensor a = Tensor::from_rows({{0.0, 0.0}});
    Tensor ls = g.log_softmax_rows(a);
    const double expect = -std::log(2.0);
    REQUIRE_THAT(ls.at(0, 0), WithinAbs(expect, 1e-12));
    REQUIRE_THAT(ls.at(0, 1), WithinAbs(expect, 1e-12));
}

TEST_CASE("exp(log_softmax) rows sum to one", "[graph][property]") {
    Rng rng(derive_key(11, "softmax.rows"));
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t cols = 2 + rng.next_below(6);
        Tensor a(3, cols);
        for (double& v : a.values_mutable()) v = rng.next_uniform(-30.0, 30.0);
        Graph g;
        Tensor ls = g.log_softmax_rows(a);
        for (std::size_t i = 0; i < 3; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < cols; ++j) total += std::exp(ls.at(i, j));
            REQUIRE_THAT(total, WithinAbs(1.0, 1e-9));
        }
    }
}

TEST_CASE("sum gradient is all ones and sum_squares doubles the input", "[graph]") {
    Graph g;
    Tensor v = Tensor::from_rows({{3.0, 4.0}}, true);
    Tensor n2 = g.sum_squares(v);
    REQUIRE_THAT(n2.value(), WithinAbs(25.0, 1e-12));
    g.backward(n2);
    REQUIRE_THAT(v.grad()[0], WithinAbs(6.0, 1e-12));
    REQUIRE_THAT(v.grad()[1], WithinAbs(8.0, 1e-12));

    Graph g2;
    Tensor m = Tensor::from_rows({{1.0, 2.0}, {3.0, 4.0}}, true);
    Tensor s = g2.sum(m);
    REQUIRE_THAT(s.value(), WithinAbs(10.0, 1e-12));
    g2.backward(s);
    for (double gv : m.grad()) REQUIRE(gv == 1.0);

    Graph g3;
    Tensor m2 = Tensor::from_rows({{2.0, 4.0}}, true);
    Tensor mu = g3.mean(m2);
    REQUIRE_THAT(mu.value(), WithinAbs(3.0, 1e-12));
    g3.backward(mu);
    REQUIRE_THAT(m2.grad()[0], WithinAbs(0.5, 1e-12));
}

TEST_CASE("cosine similarity of a vector with itself is one", "[graph]") {
    Graph g;
    Tensor v = Tensor::from_rows({{0.3, -1.2, 2.0}});
    REQUIRE_THAT(g.cosine_similarity(v, v).value(), WithinAbs(1.0, 1e-12));

    Tensor u = Tensor::from_rows({{1.0, 0.0}});
    Tensor w = Tensor::from_rows({{0.0, 5.0}});
    REQUIRE_THAT(g.cosine_similarity(u, w).value(), WithinAbs(0.0, 1e-12));
}

TEST_CASE("row selection and slicing route gradients to their source rows", "[graph]") {
    Tensor m = Tensor::from_rows({{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}}, true);
    Graph g;
    Tensor mid = g.slice_rows(m, 1, 2);
    REQUIRE(mid.rows() == 2);
    REQUIRE(mid.at(0, 0) == 3.0);
    REQUIRE(mid.at(1, 1) == 6.0);
    Tensor row = g.select_row(m, 0);
    REQUIRE(row.at(0, 1) == 2.0);

    Tensor loss = g.add(g.sum(mid), g.scale(g.sum(row), 3.0));
    g.backward(loss);
    auto gr = m.grad();
    REQUIRE(gr[0] == 3.0);
    REQUIRE(gr[1] == 3.0);
    REQUIRE(gr[2] == 1.0);
    REQUIRE(gr[5] == 1.0);
}

TEST_CASE("gather_cols picks one entry per row and scatters gradient back", "[graph]") {
    Tensor m = Tensor::from_rows({{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}}, true);
    Graph g;
    Tensor picked = g.gather_cols(m, {2, 0});
    REQUIRE(picked.rows() == 2);
    REQUIRE(picked.cols() == 1);
    REQUIRE(picked.at(0, 0) == 3.0);
    REQUIRE(picked.at(1, 0) == 4.0);
    g.backward(g.sum(picked));
    auto gr = m.grad();
    REQUIRE(gr[2] == 1.0);
    REQUIRE(gr[3] == 1.0);
    REQUIRE(gr[0] == 0.0);
    REQUIRE(gr[4] == 0.0);
}

TEST_CASE("concat_rows stacks blocks and splits gradients", "[graph]") {
    Tensor a = Tensor::from_rows({{1.0, 2.0}}, true);
    Tensor b = Tensor::from_rows({{3.0, 4.0}, {5.0, 6.0}}, true);
    Graph g;
    Tensor cat = g.concat_rows({a, b});
    REQUIRE(cat.rows() == 3);
    REQUIRE(cat.at(2, 1) == 6.0);
    Tensor weights = Tensor::from_rows({{1.0, 1.0}, {2.0, 2.0}, {3.0, 3.0}});
    g.backward(g.sum(g.mul(cat, weights)));
    REQUIRE(a.grad()[0] == 1.0);
    REQUIRE(b.grad()[0] == 2.0);
    REQUIRE(b.grad()[2] == 3.0);
}

TEST_CASE("shape mismatches name the operation and both shapes", "[graph][errors]") {
    Graph g;
    Tensor a(2, 3);
    Tensor b(2, 2);
    REQUIRE_THROWS_MATCHES(g.matmul(a, b), ShapeError,
                           Catch::Matchers::MessageMatches(ContainsSubstring("matmul") &&
                                                           ContainsSubstring("2x3") &&
                                                           ContainsSubstring("2x2")));
    REQUIRE_THROWS_AS(g.add(a, b), ShapeError);
    REQUIRE_THROWS_AS(g.add_row(a, Tensor(1, 2)), ShapeError);
    REQUIRE_THROWS_AS(g.cosine_similarity(Tensor(2, 2), Tensor(2, 2)), ShapeError);
    REQUIRE_THROWS_AS(g.gather_cols(a, {0, 5}), ContractError);
}

TEST_CASE("backward demands a scalar produced by the same graph", "[graph][errors]") {
    Graph g;
    Tensor a = Tensor::from_rows({{1.0, 2.0}}, true);
    Tensor vec = g.scale(a, 2.0);
    REQUIRE_THROWS_AS(g.backward(vec), ContractError);

    Graph other;
    Tensor loss = other.sum(a);
    REQUIRE_THROWS_AS(g.backward(loss), ContractError);
    REQUIRE_NOTHROW(other.backward(loss));
}

TEST_CASE("a leaf with no path to the loss gets an exactly zero gradient", "[graph]") {
    Tensor used = Tensor::from_rows({{1.0, 2.0}}, true);
    Tensor unused = Tensor::from_rows({{3.0, 4.0}}, true);
    Graph g;
    Tensor loss = g.sum_squares(used);
    g.sum(unused); // participates in the tape but not in the loss
    g.backward(loss);
    REQUIRE(unused.has_grad());
    for (double gv : unused.grad()) REQUIRE(gv == 0.0);
}

TEST_CASE("repeated backward accumulates into leaf gradients", "[graph]") {
    Tensor v = Tensor::from_rows({{3.0}}, true);
    Graph g;
    Tensor loss = g.sum_squares(v);
    g.backward(loss);
    REQUIRE_THAT(v.grad()[0], WithinAbs(6.0, 1e-12));
    g.backward(loss);
    REQUIRE_THAT(v.grad()[0], WithinAbs(12.0, 1e-12));
    v.zero_grad();
    g.backward(loss);
    REQUIRE_THAT(v.grad()[0], WithinAbs(6.0, 1e-12));
}

TEST_CASE("finite differences confirm every primitive's backward rule", "[graph][gradcheck]") {
    Rng rng(derive_key(23, "primitive.grads"));
    Tensor a = random_tensor(rng, 3, 4);
    Tensor b = random_tensor(rng, 3, 4);
    Tensor w = random_tensor(rng, 4, 2);
    Tensor bias = random_tensor(rng, 1, 2);
    Tensor u = random_tensor(rng, 1, 4);
    Tensor v = random_tensor(rng, 1, 4);

    auto build = [&](Graph& g) {
        Tensor mixed = g.mul(g.add(a, b), g.sub(a, g.scale(b, 0.7)));
        Tensor lin = g.add_row(g.matmul(g.tanh(mixed), w), bias);
        Tensor lsm = g.log_softmax_rows(lin);
        Tensor picked = g.gather_cols(lsm, {0, 1, 0});
        Tensor relud = g.relu(g.matmul_nt(mixed, g.concat_rows({u, v, u, v})));
        Tensor cos = g.cosine_similarity(u, v);
        Tensor logpart = g.sum(g.log(g.add(g.mul(v, v), Tensor::filled(1, 4, 0.5))));
        return g.add(g.add(g.mean(relud), g.scale(g.sum(picked), 0.25)),
                     g.add(g.scale(cos, 2.0),
                           g.add(logpart, g.scale(g.sum_squares(w), 0.1))));
    };
    auto res = check_gradients({a, b, w, bias, u, v}, {"a", "b", "w", "bias", "u", "v"}, build);
    INFO("worst " << res.worst_param << "[" << res.worst_index << "] analytic "
                  << res.worst_analytic << " numeric " << res.worst_numeric);
    REQUIRE(res.coords_checked >= 20);
    REQUIRE(res.pass);
}

TEST_CASE("cross-entropy through a two-layer net matches finite differences", "[graph][gradcheck]") {
    Rng rng(derive_key(29, "toy.net"));
    Tensor x = random_tensor(rng, 4, 3, false);
    Tensor w1 = random_tensor(rng, 3, 5);
    Tensor b1 = random_tensor(rng, 1, 5);
    Tensor w2 = random_tensor(rng, 5, 3);
    Tensor b2 = random_tensor(rng, 1, 3);
    std::vector<std::size_t> labels = {0, 2, 1, 2};

    auto build = [&](Graph& g) {
        Tensor h = g.tanh(g.add_row(g.matmul(x, w1), b1));
        Tensor logits = g.add_row(g.matmul(h, w2), b2);
        Tensor ls = g.log_softmax_rows(logits);
        return g.scale(g.mean(g.gather_cols(ls, labels)), -1.0);
    };
    auto res = check_gradients({w1, b1, w2, b2}, {"w1", "b1", "w2", "b2"}, build);
    INFO("max rel err " << res.max_rel_err);
    REQUIRE(res.pass);
}

TEST_CASE("quadratic objective passes a tight gradient check", "[graph][gradcheck]") {
    Rng rng(derive_key(31, "quadratic"));
    Tensor A = random_tensor(rng, 4, 4, false);
    Tensor bvec = random_tensor(rng, 4, 1, false);
    Tensor x = random_tensor(rng, 4, 1);
    auto build = [&](Graph& g) { return g.sum_squares(g.sub(g.matmul(A, x), bvec)); };
    auto res = check_gradients({x}, {"x"}, build, 1e-6, 1e-6);
    INFO("max rel err " << res.max_rel_err);
    REQUIRE(res.pass);
}

TEST_CASE("finite_diff_check flags a corrupted analytic gradient", "[gradcheck]") {
    Tensor x = Tensor::from_rows({{1.0, 2.0}}, true);
    Tensor wrong(1, 2);
    wrong.values_mutable()[0] = 2.0; // true gradient of sum_squares is 2x = [2, 4]
    wrong.values_mutable()[1] = 40.0;
    std::vector<Tensor> params = {x};
    auto res = finite_diff_check(params, {"x"}, {wrong}, [&]() {
        Graph g;
        return g.sum_squares(x).value();
    });
    REQUIRE_FALSE(res.pass);
    REQUIRE(res.worst_param == "x");
    REQUIRE(res.worst_index == 1);
}

TEST_CASE("adam leaves parameters untouched when gradients are zero", "[adam]") {
    Tensor w = Tensor::from_rows({{0.25, -1.5}, {3.0, 0.0}}, true);
    std::vector<Tensor> params = {w};
    AdamState st = AdamState::for_params(params);
    Tensor before = w.detached_copy();
    for (int i = 0; i < 3; ++i) {
        w.zero_grad();
        adam_step(params, st);
    }
    for (std::size_t i = 0; i < w.size(); ++i)
        REQUIRE(w.values()[i] == before.values()[i]);
    REQUIRE(st.t == 3);
}

TEST_CASE("first adam step moves a unit-gradient scalar by lr/(1+eps)", "[adam]") {
    Tensor theta = Tensor::from_rows({{1.0}}, true);
    std::vector<Tensor> params = {theta};
    AdamState st = AdamState::for_params(params, 0.001);
    theta.ensure_grad();
    theta.grad_data()[0] = 1.0;
    adam_step(params, st);
    const double expect = 1.0 - 0.001 / (1.0 + 1e-8);
    REQUIRE_THAT(theta.value(), WithinAbs(expect, 1e-15));
}

TEST_CASE("ten adam steps on theta^2 shrink theta monotonically", "[adam]") {
    // Independent scalar recurrence for the same update rule, kept separate
    // from the library implementation on purpose.
    double ref = 1.0, m = 0.0, v = 0.0;
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<double> expected;
    for (int t = 1; t <= 10; ++t) {
        double grad = 2.0 * ref;
        m = b1 * m + (1.0 - b1) * grad;
        v = b2 * v + (1.0 - b2) * grad * grad;
        double mhat = m / (1.0 - std::pow(b1, t));
        double vhat = v / (1.0 - std::pow(b2, t));
        ref -= lr * mhat / (std::sqrt(vhat) + eps);
        expected.push_back(ref);
    }

    Tensor theta = Tensor::from_rows({{1.0}}, true);
    std::vector<Tensor> params = {theta};
    AdamState st = AdamState::for_params(params, lr);
    double prev = std::abs(theta.value());
    for (int t = 0; t < 10; ++t) {
        Graph g;
        Tensor loss = g.sum_squares(theta);
        theta.zero_grad();
        g.backward(loss);
        adam_step(params, st);
        REQUIRE_THAT(theta.value(), WithinAbs(expected[static_cast<std::size_t>(t)], 1e-12));
        REQUIRE(std::abs(theta.value()) < prev);
        prev = std::abs(theta.value());
    }
}

TEST_CASE("adam validates parameter bookkeeping", "[adam][errors]") {
    Tensor w = Tensor::from_rows({{1.0}}, true);
    std::vector<Tensor> params = {w};
    AdamState st = AdamState::for_params(params);
    SECTION("missing gradient") {
        w.clear_grad();
        REQUIRE_THROWS_AS(adam_step(params, st), ContractError);
    }
    SECTION("parameter count mismatch") {
        Tensor extra = Tensor::from_rows({{2.0}}, true);
        extra.ensure_grad();
        w.ensure_grad();
        std::vector<Tensor> two = {w, extra};
        REQUIRE_THROWS_AS(adam_step(two, st), ContractError);
    }
}
