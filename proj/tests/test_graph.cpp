#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "hvae/graph.hpp"
#include "hvae/rng.hpp"

using hvae::Graph;
using hvae::Rng;
using hvae::Tensor;

namespace {

Tensor<double> random_tensor(int r, int c, Rng& rng, double scale = 1.0) {
    Tensor<double> t(r, c);
    for (auto& x : t.v) x = rng.gauss() * scale;
    return t;
}

// Central finite differences against the analytic gradient of a scalar-valued
// function of a set of input tensors.
void check_gradients(std::vector<Tensor<double>> inputs,
                     const std::function<Graph<double>::Ref(Graph<double>&,
                                                            const std::vector<Graph<double>::Ref>&)>& f,
                     double tol = 1e-6) {
    const double h = 1e-5;
    std::vector<Tensor<double>> grads;
    {
        Graph<double> g;
        std::vector<Graph<double>::Ref> refs;
        grads.resize(inputs.size());
        for (size_t i = 0; i < inputs.size(); ++i) {
            grads[i] = Tensor<double>(inputs[i].rows, inputs[i].cols);
            refs.push_back(g.leaf(inputs[i], &grads[i]));
        }
        g.backward(f(g, refs));
    }
    auto eval = [&](const std::vector<Tensor<double>>& ins) {
        Graph<double> g;
        std::vector<Graph<double>::Ref> refs;
        for (const auto& t : ins) refs.push_back(g.leaf(t, nullptr));
        return g.val(f(g, refs)).v[0];
    };
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (size_t k = 0; k < inputs[i].v.size(); ++k) {
            auto plus = inputs, minus = inputs;
            plus[i].v[k] += h;
            minus[i].v[k] -= h;
            const double fd = (eval(plus) - eval(minus)) / (2 * h);
            CHECK(std::abs(fd - grads[i].v[k]) <
                  tol * std::max({1.0, std::abs(fd), std::abs(grads[i].v[k])}));
        }
    }
}

}  // namespace

TEST_CASE("matmul chain gradient") {
    Rng rng(1);
    check_gradients({random_tensor(3, 4, rng), random_tensor(4, 5, rng), random_tensor(3, 5, rng)},
                    [](Graph<double>& g, const std::vector<int>& r) {
                        return g.sum_all(g.mul(g.matmul(r[0], r[1]), r[2]));
                    });
}

TEST_CASE("matmul_nt gradient") {
    Rng rng(2);
    check_gradients({random_tensor(3, 4, rng), random_tensor(5, 4, rng)},
                    [](Graph<double>& g, const std::vector<int>& r) {
                        return g.sum_all(g.softplus(g.matmul_nt(r[0], r[1])));
                    });
}

TEST_CASE("softmax gradient with mask") {
    Rng rng(3);
    Tensor<double> mask(3, 3);
    mask(0, 2) = -1e30;
    mask(1, 2) = -1e30;
    check_gradients({random_tensor(3, 3, rng), random_tensor(3, 3, rng)},
                    [mask](Graph<double>& g, const std::vector<int>& r) {
                        return g.sum_all(g.mul(g.softmax_rows(r[0], &mask), r[1]));
                    });
}

TEST_CASE("softmax rows are stochastic under mask") {
    Rng rng(4);
    Graph<double> g;
    Tensor<double> mask(2, 5);
    mask(0, 3) = -1e30;
    auto x = g.input(random_tensor(2, 5, rng));
    auto s = g.softmax_rows(x, &mask);
    for (int i = 0; i < 2; ++i) {
        double sum = 0;
        for (int j = 0; j < 5; ++j) sum += g.val(s)(i, j);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(g.val(s)(0, 3) < 1e-12);
}

TEST_CASE("layernorm gradient") {
    Rng rng(5);
    check_gradients({random_tensor(4, 6, rng), random_tensor(1, 6, rng),
                     random_tensor(1, 6, rng), random_tensor(4, 6, rng)},
                    [](Graph<double>& g, const std::vector<int>& r) {
                        return g.sum_all(g.mul(g.layernorm(r[0], r[1], r[2]), r[3]));
                    });
}

TEST_CASE("cross entropy gradient") {
    Rng rng(6);
    std::vector<int> targets{1, 0, 3};
    check_gradients({random_tensor(3, 4, rng)},
                    [targets](Graph<double>& g, const std::vector<int>& r) {
                        return g.cross_entropy_sum(r[0], targets);
                    });
}

TEST_CASE("kl_diag_sum gradient") {
    Rng rng(7);
    auto mq = random_tensor(2, 3, rng);
    auto mp = random_tensor(2, 3, rng);
    Tensor<double> sq(2, 3), sp(2, 3);
    for (auto& x : sq.v) x = 0.5 + std::abs(rng.gauss());
    for (auto& x : sp.v) x = 0.5 + std::abs(rng.gauss());
    check_gradients({mq, sq, mp, sp}, [](Graph<double>& g, const std::vector<int>& r) {
        return g.kl_diag_sum(r[0], r[1], r[2], r[3]);
    });
}

TEST_CASE("structural ops gradient") {
    Rng rng(8);
    check_gradients({random_tensor(2, 3, rng), random_tensor(3, 3, rng), random_tensor(2, 2, rng)},
                    [](Graph<double>& g, const std::vector<int>& r) {
                        auto cat = g.concat_rows({r[0], r[1]});
                        auto sl = g.slice_rows(cat, 1, 3);
                        auto cc = g.concat_cols(sl, r[2]);
                        auto pick = g.slice_cols(cc, 1, 4);
                        return g.sum_all(g.relu(pick));
                    });
}

TEST_CASE("gather_rows gradient accumulates repeated ids") {
    Rng rng(9);
    std::vector<int> ids{0, 2, 2, 1};
    check_gradients({random_tensor(3, 4, rng)},
                    [ids](Graph<double>& g, const std::vector<int>& r) {
                        return g.sum_all(g.softplus(g.gather_rows(r[0], ids)));
                    });
}

TEST_CASE("kl_diag_sum rejects nonpositive std") {
    Graph<double> g;
    auto m = g.input(Tensor<double>(1, 2));
    Tensor<double> bad(1, 2);
    bad.v = {1.0, 0.0};
    auto s = g.input(bad);
    Tensor<double> ok(1, 2);
    ok.v = {1.0, 1.0};
    auto sp = g.input(ok);
    CHECK_THROWS_AS(g.kl_diag_sum(m, s, m, sp), std::domain_error);
}
