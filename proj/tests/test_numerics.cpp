// Tensor, autodiff and optimizer tests. Gradient correctness is checked
// against central finite differences (h = 1e-5, f64) via fd_check below,
// which rebuilds the graph from perturbed parameter values; the oracle is
// independent of the backward implementation.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "falcon/autodiff.hpp"
#include "falcon/optim.hpp"
#include "falcon/rng.hpp"
#include "falcon/tensor.hpp"

using namespace falcon;

namespace {

Tensor random_tensor(std::vector<size_t> shape, Rng& rng, double scale = 0.5) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = rng.normal() * scale;
    return t;
}

// Max |analytic - fd| / max(1, |analytic|, |fd|) over every parameter
// element. `build` must reconstruct the identical graph from the given
// parameter values.
template <class BuildFn>
double fd_check(std::vector<Tensor> params, BuildFn build, double h = 1e-5) {
    num::Tape tape;
    std::vector<num::Var> vars;
    for (const Tensor& p : params) vars.push_back(tape.param(p));
    num::Var loss = build(tape, vars);
    tape.backward(loss);
    std::vector<Tensor> grads = tape.param_grads();

    auto eval = [&](const std::vector<Tensor>& ps) {
        num::Tape t2;
        std::vector<num::Var> vs;
        for (const Tensor& p : ps) vs.push_back(t2.param(p));
        return t2.value(build(t2, vs)).item();
    };

    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        for (size_t j = 0; j < params[pi].numel(); ++j) {
            const double orig = params[pi].data[j];
            params[pi].data[j] = orig + h;
            const double fp = eval(params);
            params[pi].data[j] = orig - h;
            const double fm = eval(params);
            params[pi].data[j] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double g = grads[pi].data[j];
            const double rel = std::fabs(g - fd) / std::max({1.0, std::fabs(g), std::fabs(fd)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace

// ----------------------------------------------------------------- softmax

TEST_CASE("softmax_stable matches hand oracle") {
    // symmetry
    Tensor s = softmax_stable(Tensor::row_vector({0.0, 0.0}));
    CHECK(s.data[0] == Catch::Approx(0.5).margin(1e-15));
    CHECK(s.data[1] == Catch::Approx(0.5).margin(1e-15));

    // closed form e^x / sum(e^x), recomputed independently here
    const std::vector<double> x = {1.0, 2.0, 3.0};
    double denom = 0.0;
    for (double v : x) denom += std::exp(v);
    Tensor out = softmax_stable(Tensor::row_vector(x));
    for (size_t i = 0; i < 3; ++i)
        CHECK(out.data[i] == Catch::Approx(std::exp(x[i]) / denom).margin(1e-15));
    // frozen values
    CHECK(out.data[0] == Catch::Approx(0.09003057).margin(1e-8));
    CHECK(out.data[1] == Catch::Approx(0.24472847).margin(1e-8));
    CHECK(out.data[2] == Catch::Approx(0.66524096).margin(1e-8));
}

TEST_CASE("softmax_stable survives large logits via max subtraction") {
    Tensor out = softmax_stable(Tensor::row_vector({1000.0, 1000.0, 0.0}));
    REQUIRE(out.all_finite());
    CHECK(out.data[0] == Catch::Approx(0.5).margin(1e-12));
    CHECK(out.data[1] == Catch::Approx(0.5).margin(1e-12));
    CHECK(out.data[2] <= 1e-300);
}

TEST_CASE("softmax_stable rejects non-finite input") {
    CHECK_THROWS_AS(softmax_stable(Tensor::row_vector({1.0, std::nan("")})), InvalidInputError);
    CHECK_THROWS_AS(softmax_stable(Tensor::row_vector({1.0, HUGE_VAL})), InvalidInputError);
}

TEST_CASE("softmax sums to one and is permutation-equivariant") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const size_t n = 2 + rng.below(9);
        std::vector<double> x(n);
        for (double& v : x) v = rng.normal() * 10.0;
        Tensor out = softmax_stable(Tensor::row_vector(x));
        double sum = 0.0;
        for (double v : out.data) sum += v;
        CHECK(std::fabs(sum - 1.0) <= 1e-12);
        for (double v : out.data) CHECK(v >= 0.0);

        // rotate and compare
        std::vector<double> xr(x.begin() + 1, x.end());
        xr.push_back(x[0]);
        Tensor outr = softmax_stable(Tensor::row_vector(xr));
        for (size_t i = 0; i < n; ++i)
            CHECK(outr.data[i] == Catch::Approx(out.data[(i + 1) % n]).margin(1e-15));
    }
}

// ---------------------------------------------------------------- backward

TEST_CASE("backward: analytic derivatives of simple graphs") {
    {
        num::Tape t;
        num::Var x = t.param(Tensor::scalar(3.0));
        num::Var y = num::mul(t, x, x);
        t.backward(y);
        CHECK(t.grad(x).item() == Catch::Approx(6.0).margin(1e-14));
    }
    {
        num::Tape t;
        num::Var x = t.param(Tensor::scalar(2.0));
        num::Var y = t.param(Tensor::scalar(5.0));
        num::Var z = num::mul(t, x, y);
        t.backward(z);
        CHECK(t.grad(x).item() == Catch::Approx(5.0).margin(1e-14));
        CHECK(t.grad(y).item() == Catch::Approx(2.0).margin(1e-14));
    }
    {
        // diamond: f = x*x + x -> f' = 2x + 1
        num::Tape t;
        num::Var x = t.param(Tensor::scalar(1.5));
        num::Var f = num::add(t, num::mul(t, x, x), x);
        t.backward(f);
        CHECK(t.grad(x).item() == Catch::Approx(4.0).margin(1e-14));
    }
}

TEST_CASE("backward contract errors") {
    num::Tape t;
    num::Var x = t.param(Tensor::row_vector({1.0, 2.0}));
    num::Var y = num::scale(t, x, 2.0);
    CHECK_THROWS_AS(t.backward(y), ContractError);  // not scalar
    CHECK_THROWS_AS(t.backward(num::Var{1234}), ContractError);  // not on tape
    CHECK_THROWS_AS(t.backward(num::Var{-1}), ContractError);
}

TEST_CASE("non-participating parameters get zero gradients") {
    num::Tape t;
    num::Var x = t.param(Tensor::scalar(3.0));
    num::Var unused = t.param(Tensor::row_vector({1.0, 2.0, 3.0}));
    num::Var y = num::mul(t, x, x);
    t.backward(y);
    for (double v : t.grad(unused).data) CHECK(v == 0.0);
}

TEST_CASE("two-layer perceptron with 17 parameters matches finite differences") {
    // 2 -> 4 (tanh) -> 1 with biases: 8 + 4 + 4 + 1 = 17 parameters
    Rng rng(11);
    std::vector<Tensor> params = {random_tensor({2, 4}, rng), random_tensor({4}, rng),
                                  random_tensor({4, 1}, rng), random_tensor({1}, rng)};
    Tensor input = random_tensor({1, 2}, rng);
    const double max_rel = fd_check(params, [&](num::Tape& t, const std::vector<num::Var>& v) {
        num::Var h = num::tanh_op(
            t, num::add_row_broadcast(t, num::matmul(t, t.leaf(input), v[0]), v[1]));
        num::Var out = num::add_row_broadcast(t, num::matmul(t, h, v[2]), v[3]);
        return num::sum_all(t, out);
    });
    CHECK(max_rel <= 1e-5);
}

TEST_CASE("gradients of every primitive match finite differences over random graphs") {
    // >= 20 random graphs across scenarios; each scenario exercises a
    // different op subset.
    size_t graphs = 0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed * 977);

        // elementwise + broadcasting + norm + activation stack
        {
            std::vector<Tensor> params = {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng),
                                          random_tensor({4}, rng), random_tensor({4}, rng)};
            const double mr = fd_check(params, [&](num::Tape& t, const std::vector<num::Var>& v) {
                num::Var a = num::mul(t, v[0], v[1]);
                num::Var b = num::sub(t, a, num::scale(t, v[0], 0.3));
                num::Var c = num::layer_norm(t, b);
                num::Var d = num::mul_row_broadcast(t, c, v[2]);
                num::Var e = num::add_row_broadcast(t, d, v[3]);
                num::Var f = num::gelu(t, e);
                return num::mean_all(t, f);
            });
            CHECK(mr <= 1e-5);
            ++graphs;
        }

        // matmul + softmax + log
        {
            std::vector<Tensor> params = {random_tensor({3, 5}, rng), random_tensor({5, 4}, rng)};
            const double mr = fd_check(params, [&](num::Tape& t, const std::vector<num::Var>& v) {
                num::Var m = num::matmul(t, v[0], v[1]);
                num::Var sm = num::softmax_rows(t, m);
                num::Var lg = num::log_op(t, num::add_scalar(t, sm, 1.0));
                return num::sum_all(t, lg);
            });
            CHECK(mr <= 1e-5);
            ++graphs;
        }

        // log_softmax + exp + tanh + linear_combination
        {
            std::vector<Tensor> params = {random_tensor({2, 6}, rng), random_tensor({2, 6}, rng)};
            const double mr = fd_check(params, [&](num::Tape& t, const std::vector<num::Var>& v) {
                num::Var ls = num::log_softmax_rows(t, v[0]);
                num::Var ex = num::exp_op(t, num::scale(t, v[1], 0.1));
                num::Var th = num::tanh_op(t, ex);
                num::Var combo = num::linear_combination(t, ls, 0.7, th, 0.3);
                return num::mean_all(t, combo);
            });
            CHECK(mr <= 1e-5);
            ++graphs;
        }

        // single-head attention with a block mask
        {
            Tensor mask = Tensor::full({3, 3}, 1.0);
            mask.at(0, 1) = 0.0;
            mask.at(0, 2) = 0.0;
            std::vector<Tensor> params = {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng),
                                          random_tensor({3, 2}, rng)};
            const double mr = fd_check(params, [&](num::Tape& t, const std::vector<num::Var>& v) {
                num::Var att = num::scaled_dot_product_attention(t, v[0], v[1], v[2], mask);
                return num::sum_all(t, num::gelu(t, att));
            });
            CHECK(mr <= 1e-5);
            ++graphs;
        }

        // batched multi-head attention (batch=2, heads=2)
        {
            Tensor mask = Tensor::full({3, 3}, 1.0);
            mask.at(0, 1) = 0.0;
            mask.at(0, 2) = 0.0;
            std::vector<Tensor> params = {random_tensor({6, 4}, rng), random_tensor({6, 4}, rng),
                                          random_tensor({6, 4}, rng)};
            const double mr = fd_check(params, [&](num::Tape& t, const std::vector<num::Var>& v) {
                num::Var att = num::masked_multihead_attention(t, v[0], v[1], v[2], mask, 2, 3, 2);
                return num::mean_all(t, att);
            });
            CHECK(mr <= 1e-5);
            ++graphs;
        }

        // segment_weighted_sum + reshape + gather_rows
        {
            std::vector<Tensor> params = {random_tensor({6, 3}, rng), random_tensor({6, 1}, rng),
                                          random_tensor({4, 3}, rng)};
            const double mr = fd_check(params, [&](num::Tape& t, const std::vector<num::Var>& v) {
                num::Var w = num::softmax_rows(t, num::reshape(t, v[1], {2, 3}));
                num::Var pooled = num::segment_weighted_sum(t, v[0], w, 2, 3);
                num::Var rows = num::gather_rows(t, v[2], {1, 3});
                return num::sum_all(t, num::mul(t, pooled, rows));
            });
            CHECK(mr <= 1e-5);
            ++graphs;
        }

        // cross-entropy
        {
            std::vector<Tensor> params = {random_tensor({4, 3}, rng, 1.0)};
            const double mr = fd_check(params, [&](num::Tape& t, const std::vector<num::Var>& v) {
                return num::cross_entropy_mean(t, v[0], {0, 2, 1, 2});
            });
            CHECK(mr <= 1e-5);
            ++graphs;
        }

        // distillation loss at T=4 against a fixed teacher
        {
            Tensor teacher = Tensor::zeros({3, 4});
            for (size_t b = 0; b < 3; ++b) {
                std::vector<double> z(4);
                for (double& v : z) v = rng.normal();
                Tensor sm = softmax_stable(Tensor::row_vector(z));
                std::copy(sm.data.begin(), sm.data.end(), teacher.row_ptr(b));
            }
            std::vector<Tensor> params = {random_tensor({3, 4}, rng, 1.0)};
            const double mr = fd_check(params, [&](num::Tape& t, const std::vector<num::Var>& v) {
                return num::kd_loss_mean(t, v[0], teacher, 4.0);
            });
            CHECK(mr <= 1e-5);
            ++graphs;
        }
    }
    CHECK(graphs >= 20);
}

// --------------------------------------------------------------- attention

TEST_CASE("attention with a single allowed position returns that V row") {
    Rng rng(3);
    Tensor q = random_tensor({2, 4}, rng);
    Tensor k = random_tensor({3, 4}, rng);
    Tensor v = random_tensor({3, 5}, rng);
    Tensor mask = Tensor::zeros({2, 3});
    mask.at(0, 2) = 1.0;
    mask.at(1, 0) = 1.0;
    num::Tape t;
    num::Var out = num::scaled_dot_product_attention(t, t.leaf(q), t.leaf(k), t.leaf(v), mask);
    const Tensor& ov = t.value(out);
    for (size_t j = 0; j < 5; ++j) {
        CHECK(ov.at(0, j) == v.at(2, j));
        CHECK(ov.at(1, j) == v.at(0, j));
    }
}

TEST_CASE("attention weights for masked-out positions are exactly zero") {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor q = random_tensor({4, 6}, rng, 3.0);
        Tensor k = random_tensor({4, 6}, rng, 3.0);
        Tensor mask = Tensor::zeros({4, 4});
        for (size_t i = 0; i < 4; ++i) {
            mask.at(i, rng.below(4)) = 1.0;  // ensure one allowed
            for (size_t j = 0; j < 4; ++j)
                if (rng.uniform() < 0.5) mask.at(i, j) = 1.0;
        }
        Tensor w = num::attention_weights_plain(q, k, mask);
        for (size_t i = 0; i < 4; ++i) {
            double sum = 0.0;
            for (size_t j = 0; j < 4; ++j) {
                if (mask.at(i, j) == 0.0) CHECK(w.at(i, j) == 0.0);
                sum += w.at(i, j);
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-12));
        }
    }
}

TEST_CASE("attention rejects rows with all positions forbidden") {
    Rng rng(9);
    Tensor q = random_tensor({2, 3}, rng);
    Tensor k = random_tensor({2, 3}, rng);
    Tensor v = random_tensor({2, 3}, rng);
    Tensor mask = Tensor::full({2, 2}, 1.0);
    mask.at(1, 0) = 0.0;
    mask.at(1, 1) = 0.0;
    num::Tape t;
    CHECK_THROWS_AS(
        num::scaled_dot_product_attention(t, t.leaf(q), t.leaf(k), t.leaf(v), mask),
        ContractError);
}

// --------------------------------------------------------------- layernorm

TEST_CASE("layer_norm closed form on [1,2,3]") {
    Tensor out = layer_norm_plain(Tensor::row_vector({1.0, 2.0, 3.0}));
    // population variance 2/3; values +-sqrt(3/2) up to the 1e-5 epsilon
    CHECK(out.data[0] == Catch::Approx(-1.2247).margin(1e-3));
    CHECK(out.data[1] == Catch::Approx(0.0).margin(1e-12));
    CHECK(out.data[2] == Catch::Approx(1.2247).margin(1e-3));
}

TEST_CASE("layer_norm rows have mean 0 and unit variance") {
    Rng rng(21);
    Tensor x = random_tensor({5, 16}, rng, 4.0);
    Tensor out = layer_norm_plain(x);
    for (size_t i = 0; i < 5; ++i) {
        double mean = 0.0, var = 0.0;
        for (size_t j = 0; j < 16; ++j) mean += out.at(i, j);
        mean /= 16.0;
        for (size_t j = 0; j < 16; ++j) var += (out.at(i, j) - mean) * (out.at(i, j) - mean);
        var /= 16.0;
        CHECK(std::fabs(mean) <= 1e-12);
        CHECK(var == Catch::Approx(1.0).margin(1e-4));
    }
}

TEST_CASE("matmul identity") {
    Tensor eye = Tensor::zeros({3, 3});
    for (size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    Rng rng(2);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor out = matmul(eye, a);
    for (size_t i = 0; i < a.numel(); ++i) CHECK(out.data[i] == a.data[i]);
    CHECK_THROWS_AS(matmul(a, a), ContractError);
}

// --------------------------------------------------------------- optimizer

TEST_CASE("Adam: zero gradient leaves parameters unchanged") {
    Tensor p = Tensor::row_vector({1.0, -2.0, 3.0});
    std::vector<Tensor*> params = {&p};
    num::OptimizerState opt = num::OptimizerState::adam(0.1);
    opt.init(params);
    opt.step(params, {Tensor::zeros({3})});
    CHECK(p.data[0] == 1.0);
    CHECK(p.data[1] == -2.0);
    CHECK(p.data[2] == 3.0);
    CHECK(opt.step_count == 1);
}

TEST_CASE("Adam single step closed form") {
    // g=1, lr=0.1: mhat=1, vhat=1 -> p = -lr/(1+eps)
    Tensor p = Tensor::scalar(0.0);
    std::vector<Tensor*> params = {&p};
    num::OptimizerState opt = num::OptimizerState::adam(0.1);
    opt.init(params);
    opt.step(params, {Tensor::scalar(1.0)});
    const double expected = -0.1 * 1.0 / (1.0 + 1e-8);
    CHECK(p.item() == Catch::Approx(expected).margin(1e-15));
    CHECK(p.item() == Catch::Approx(-0.1).margin(1e-8));
}

TEST_CASE("AdamW decoupled weight decay") {
    Tensor p = Tensor::scalar(1.0);
    std::vector<Tensor*> params = {&p};
    num::OptimizerState opt = num::OptimizerState::adamw(1e-4, 1e-4);
    opt.init(params);
    opt.step(params, {Tensor::scalar(0.0)});
    CHECK(p.item() == Catch::Approx(1.0 - 1e-4 * 1e-4).margin(1e-15));
}

TEST_CASE("optimizer updates are deterministic and reject shape mismatch") {
    Rng rng(33);
    Tensor p1 = random_tensor({4, 3}, rng);
    Tensor p2 = p1;
    Tensor g = random_tensor({4, 3}, rng);
    std::vector<Tensor*> a = {&p1}, b = {&p2};
    num::OptimizerState o1 = num::OptimizerState::adamw(1e-3, 1e-2);
    num::OptimizerState o2 = num::OptimizerState::adamw(1e-3, 1e-2);
    o1.init(a);
    o2.init(b);
    for (int i = 0; i < 5; ++i) {
        o1.step(a, {g});
        o2.step(b, {g});
    }
    for (size_t i = 0; i < p1.numel(); ++i) CHECK(p1.data[i] == p2.data[i]);

    CHECK_THROWS_AS(o1.step(a, {Tensor::zeros({2, 2})}), ContractError);
}
