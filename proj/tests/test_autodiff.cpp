// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctxrank/autodiff.hpp"
#include "ctxrank/nn.hpp"

#include <array>
#include <cmath>
#include <vector>

using namespace ctxrank;
using ad::ParamTensor;
using ad::Tape;
using ad::Var;

TEST_CASE("gradient of the squared norm is 2x") {
    ParamTensor x("x", (Matrix(2, 1) << 1.0, -2.0).finished());
    std::array<ParamTensor*, 1> params{&x};
    const double loss = ad::grad(
        [&](Tape& t) { return t.squared_error(t.param(x), t.constant(Matrix::Zero(2, 1))); },
        params);
    CHECK(loss == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(x.grad(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(x.grad(1, 0) == doctest::Approx(-4.0).epsilon(1e-12));
}

TEST_CASE("a loss that ignores a parameter leaves its gradient at zero") {
    ParamTensor w("w", (Matrix(2, 2) << 1, 2, 3, 4).finished());
    w.grad.setConstant(9.0);  // stale grads must be cleared
    std::array<ParamTensor*, 1> params{&w};
    const double loss = ad::grad([&](Tape& t) { return t.scalar(5.0); }, params);
    CHECK(loss == 5.0);
    CHECK(w.grad.isZero(0.0));
}

TEST_CASE("affine + sigmoid + cross-entropy gradients match finite differences") {
    Rng rng(11);
    ParamTensor w("w", ad::glorot(1, 3, rng));
    ParamTensor b("b", Matrix::Zero(1, 1));
    Matrix x(3, 1);
    x << 0.2, -0.4, 0.7;
    std::array<ParamTensor*, 2> params{&w, &b};
    auto loss_fn = [&](Tape& t) {
        const Var z = t.affine(t.param(w), t.constant(x), t.param(b));
        return t.bce(t.sigmoid(z), 1.0);
    };
    CHECK(ad::grad_check(loss_fn, params, 1e-5) < 1e-6);
}

TEST_CASE("gradient checks on a quadratic are exact to roundoff") {
    Rng rng(5);
    ParamTensor w("w", ad::glorot(3, 4, rng));
    const Matrix x = rng.normal_vector(4);
    const Matrix y = rng.normal_vector(3);
    std::array<ParamTensor*, 1> params{&w};
    auto loss_fn = [&](Tape& t) {
        return t.squared_error(t.matmul(t.param(w), t.constant(x)), t.constant(y));
    };
    CHECK(ad::grad_check(loss_fn, params, 1e-4) < 1e-8);
}

TEST_CASE("two-layer mlp with cross-entropy passes the gradient check") {
    Rng rng(17);
    nn::Mlp mlp("mlp", 4, {8}, 1, rng, nn::Activation::Gelu);
    const Matrix x = rng.normal_vector(4);
    auto params = mlp.params();
    auto loss_fn = [&](Tape& t) {
        const Var z = mlp.forward(t, t.constant(x));
        return t.bce(t.sigmoid(z), 0.0);
    };
    CHECK(ad::grad_check(loss_fn, std::span<ParamTensor* const>(params), 1e-5) < 1e-4);
}

TEST_CASE("every tape primitive passes a gradient check") {
    Rng rng(23);
    ParamTensor a("a", ad::glorot(3, 4, rng));
    ParamTensor b("b", ad::glorot(3, 4, rng));
    ParamTensor c("c", ad::glorot(4, 1, rng));
    std::array<ParamTensor*, 3> params{&a, &b, &c};

    const Matrix target = Matrix::Constant(3, 1, 0.3);
    std::vector<std::function<Var(Tape&)>> losses = {
        [&](Tape& t) { return t.mean_all(t.add(t.param(a), t.param(b))); },
        [&](Tape& t) { return t.mean_all(t.sub(t.param(a), t.param(b))); },
        [&](Tape& t) { return t.mean_all(t.scale(t.param(a), -1.7)); },
        [&](Tape& t) {
            return t.squared_error(t.matmul(t.param(a), t.param(c)), t.constant(target));
        },
        [&](Tape& t) {  // both transpose flags
            const Var m = t.matmul(t.param(a), t.param(b), false, true);
            return t.mean_all(t.matmul(m, m, true, false));
        },
        [&](Tape& t) { return t.mean_all(t.relu(t.matmul(t.param(a), t.param(c)))); },
        [&](Tape& t) { return t.mean_all(t.gelu(t.matmul(t.param(a), t.param(c)))); },
        [&](Tape& t) { return t.mean_all(t.sigmoid(t.param(a))); },
        [&](Tape& t) { return t.mean_all(t.row_softmax(t.param(a))); },
        [&](Tape& t) {
            const std::array<Var, 2> parts{t.matmul(t.param(a), t.param(c)), t.param(c)};
            return t.mean_all(t.concat(std::span<const Var>(parts)));
        },
        [&](Tape& t) { return t.mean_all(t.mean_rows(t.param(a))); },
        [&](Tape& t) { return t.squared_error(t.row(t.param(a), 1), t.constant(Matrix::Zero(4, 1))); },
        [&](Tape& t) {
            const Var z = t.mean_all(t.matmul(t.param(a), t.param(c)));
            return t.bce(t.sigmoid(z), 1.0);
        },
    };
    for (auto& fn : losses) {
        CHECK(ad::grad_check(fn, params, 1e-5) < 1e-3);
    }
}

TEST_CASE("matmul transpose flags match explicit transposes") {
    Rng rng(31);
    const Matrix a = ad::glorot(3, 5, rng);
    const Matrix b = ad::glorot(3, 5, rng);
    Tape t;
    const Var va = t.constant(a);
    const Var vb = t.constant(b);
    CHECK(t.value(t.matmul(va, vb, false, true)).isApprox(a * b.transpose(), 1e-14));
    CHECK(t.value(t.matmul(va, vb, true, false)).isApprox(a.transpose() * b, 1e-14));
}

TEST_CASE("cross-entropy clamps extreme predictions instead of overflowing") {
    ParamTensor z("z", Matrix::Constant(1, 1, 60.0));  // sigmoid ≈ 1 − 1e-26
    std::array<ParamTensor*, 1> params{&z};
    const double loss =
        ad::grad([&](Tape& t) { return t.bce(t.sigmoid(t.param(z)), 0.0); }, params);
    CHECK(std::isfinite(loss));
    CHECK(std::isfinite(z.grad(0, 0)));
    CHECK_THROWS_AS(ad::eval_loss([&](Tape& t) { return t.bce(t.scalar(0.5), 0.3); }),
                    InvalidArgument);
}

TEST_CASE("backward requires a scalar loss") {
    Tape t;
    const Var m = t.constant(Matrix::Zero(2, 2));
    CHECK_THROWS_AS(t.backward(m), InvalidArgument);
}

TEST_CASE("directional derivatives via central differences") {
    const Vector x = (Vector(2) << 1.0, 2.0).finished();
    const Vector dir = (Vector(2) << 1.0, 1.0).finished();

    const Vector d_id = ad::jvp([](const Vector& v) { return v; }, x, dir);
    CHECK(d_id.isApprox(dir, 1e-9));

    const Vector d_sq = ad::jvp(
        [](const Vector& v) { return Vector(v.array().square()); }, x, dir);
    CHECK(d_sq(0) == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(d_sq(1) == doctest::Approx(4.0).epsilon(1e-9));

    const Vector d_zero = ad::jvp([](const Vector& v) { return v; }, x, Vector::Zero(2));
    CHECK(d_zero.isZero(1e-12));
}

TEST_CASE("gradient checker validates its step size") {
    ParamTensor x("x", Matrix::Ones(1, 1));
    std::array<ParamTensor*, 1> params{&x};
    auto loss_fn = [&](Tape& t) { return t.mean_all(t.param(x)); };
    CHECK_THROWS_AS(ad::grad_check(loss_fn, params, 1e-8), InvalidArgument);
    CHECK_THROWS_AS(ad::grad_check(loss_fn, params, 1e-2), InvalidArgument);
}

TEST_CASE("sgd applies lr times gradient") {
    ParamTensor p("p", Matrix::Constant(1, 1, 1.0));
    p.grad.setConstant(2.0);
    std::array<ParamTensor*, 1> params{&p};
    ad::Optimizer opt({.method = ad::OptMethod::Sgd, .lr = 0.1});
    opt.step(params);
    CHECK(p.values(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(p.grad.isZero(0.0));  // consumed

    // Zero gradient moves nothing.
    opt.step(params);
    CHECK(p.values(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("adam's first step has magnitude lr") {
    ParamTensor p("p", Matrix::Zero(2, 1));
    p.grad << 3.0, -0.25;
    std::array<ParamTensor*, 1> params{&p};
    ad::Optimizer opt({.method = ad::OptMethod::Adam, .lr = 1e-3});
    opt.step(params);
    // mhat/sqrt(vhat) = sign(g) on the first step, up to the eps guard.
    CHECK(p.values(0, 0) == doctest::Approx(-1e-3).epsilon(1e-6));
    CHECK(p.values(1, 0) == doctest::Approx(1e-3).epsilon(1e-6));
    CHECK(opt.step_index() == 1);
}

TEST_CASE("zero learning rate is a no-op update") {
    ParamTensor p("p", Matrix::Constant(2, 1, 1.5));
    p.grad.setConstant(4.0);
    std::array<ParamTensor*, 1> params{&p};
    ad::Optimizer opt({.method = ad::OptMethod::Adam, .lr = 0.0});
    opt.step(params);
    CHECK(p.values(0, 0) == 1.5);
    CHECK(p.values(1, 0) == 1.5);
    CHECK(p.grad.isZero(0.0));

    ad::Optimizer bad({.lr = -1.0});
    p.grad.setConstant(1.0);
    CHECK_THROWS_AS(bad.step(params), InvalidArgument);
}

TEST_CASE("optimizer rejects non-finite gradients") {
    ParamTensor p("p", Matrix::Zero(1, 1));
    p.grad.setConstant(std::numeric_limits<double>::infinity());
    std::array<ParamTensor*, 1> params{&p};
    ad::Optimizer opt({});
    CHECK_THROWS_AS(opt.step(params), RuntimeError);
}

TEST_CASE("glorot init has the expected spread") {
    Rng rng(3);
    const Matrix m = ad::glorot(40, 60, rng);
    const double sd = std::sqrt(m.array().square().mean());
    CHECK(sd == doctest::Approx(std::sqrt(2.0 / 100.0)).epsilon(0.15));
}
