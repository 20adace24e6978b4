// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctxrank/pce.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

using namespace ctxrank;
using pce::AttentionParams;
using pce::FlowConfig;
using pce::FlowSample;
using pce::GuidanceSignal;
using pce::VelocityFieldParams;

namespace {

/// Identity projections, zeroed FFN: the block reduces to target + attended.
AttentionParams passthrough_attention(Eigen::Index d) {
    Rng rng(1);
    AttentionParams p("attn", d, 4, rng);
    p.w_q.values = Matrix::Identity(d, d);
    p.w_k.values = Matrix::Identity(d, d);
    p.w_v.values = Matrix::Identity(d, d);
    p.w_o.values = Matrix::Identity(d, d);
    p.ffn1.weight.values.setZero();
    p.ffn1.bias.values.setZero();
    p.ffn2.weight.values.setZero();
    p.ffn2.bias.values.setZero();
    return p;
}

/// Single affine velocity net u = W·[e; g; r; t] + b with explicit values.
VelocityFieldParams affine_field(Eigen::Index d, Eigen::Index d_g, const Matrix& w,
                                 const Vector& b) {
    Rng rng(1);
    VelocityFieldParams p("vf", d, d_g, rng, {});
    p.net.layers[0].weight.values = w;
    p.net.layers[0].bias.values = b;
    return p;
}

}  // namespace

TEST_CASE("attention over a single behavior puts all weight on it") {
    Rng rng(7);
    AttentionParams p("attn", 3, 5, rng);
    Matrix seq(1, 3);
    seq << 0.4, -1.0, 2.0;
    const Embedding target = rng.normal_vector(3);

    const auto r = pce::target_attention_detailed(seq, target, p);
    REQUIRE(r.weights.size() == 1);
    CHECK(r.weights(0) == 1.0);
    CHECK(r.attended.isApprox(p.w_v.values * seq.row(0).transpose(), 1e-12));

    // Full block by hand: residual + output projection + FFN.
    const Embedding res1 = target + p.w_o.values * r.attended;
    Embedding expect = res1 + p.ffn2.weight.values *
                                  (p.ffn1.weight.values * res1 + p.ffn1.bias.values)
                                      .unaryExpr([](double x) {
                                          return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
                                      }) +
                       p.ffn2.bias.values;
    CHECK(r.output.isApprox(expect, 1e-9));
}

TEST_CASE("identical behaviors split the attention evenly") {
    const auto p = passthrough_attention(2);
    Matrix seq(2, 2);
    seq << 1.0, 2.0, 1.0, 2.0;
    const Embedding target = (Embedding(2) << 0.3, -0.4).finished();
    const auto r = pce::target_attention_detailed(seq, target, p);
    CHECK(r.weights(0) == 0.5);
    CHECK(r.weights(1) == 0.5);
    CHECK(r.attended.isApprox(average_pool(seq), 1e-12));
    CHECK(r.output.isApprox(Embedding(target + r.attended), 1e-12));
}

TEST_CASE("attention weights match a hand-rolled softmax") {
    const Eigen::Index d = 4;
    const auto p = passthrough_attention(d);
    Rng rng(13);
    Matrix seq(3, d);
    for (Eigen::Index i = 0; i < seq.size(); ++i) seq(i / d, i % d) = rng.normal();
    const Embedding target = rng.normal_vector(d);

    Vector scores(3);
    for (int j = 0; j < 3; ++j) {
        scores(j) = seq.row(j).dot(target) / std::sqrt(static_cast<double>(d));
    }
    const double mx = scores.maxCoeff();
    Vector w = (scores.array() - mx).exp();
    w /= w.sum();
    const Embedding attended = seq.transpose() * w;

    const auto r = pce::target_attention_detailed(seq, target, p);
    CHECK(r.weights.isApprox(w, 1e-12));
    CHECK(r.attended.isApprox(attended, 1e-12));
    CHECK(r.output.isApprox(Embedding(target + attended), 1e-12));
    CHECK(r.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("the attention tape twin reproduces the plain forward") {
    Rng rng(19);
    AttentionParams p("attn", 5, 7, rng);
    Matrix seq(4, 5);
    for (Eigen::Index i = 0; i < seq.size(); ++i) seq(i / 5, i % 5) = rng.normal();
    const Embedding target = rng.normal_vector(5);

    const Embedding plain = pce::target_attention(seq, target, p);
    CHECK(plain.isApprox(pce::target_attention_detailed(seq, target, p).output, 1e-14));

    ad::Tape t;
    const ad::Var out = pce::target_attention(t, p, seq, t.constant(target));
    CHECK(t.value(out).isApprox(plain, 1e-12));

    auto params = p.params();
    auto loss_fn = [&](ad::Tape& tape) {
        return tape.mean_all(pce::target_attention(tape, p, seq, tape.constant(target)));
    };
    CHECK(ad::grad_check(loss_fn, std::span<ad::ParamTensor* const>(params), 1e-5) < 1e-3);
}

TEST_CASE("attention validates its inputs") {
    Rng rng(3);
    AttentionParams p("attn", 3, 4, rng);
    const Embedding target = rng.normal_vector(3);
    CHECK_THROWS_AS(pce::target_attention_detailed(Matrix(0, 3), target, p), InvalidArgument);
    CHECK_THROWS_AS(pce::target_attention_detailed(Matrix::Ones(2, 4), target, p),
                    InvalidArgument);
    CHECK_THROWS_AS(
        pce::target_attention_detailed(Matrix::Ones(kMaxSequenceLength + 1, 3), target, p),
        InvalidArgument);
    p.head_count = 2;
    CHECK_THROWS_AS(pce::target_attention_detailed(Matrix::Ones(2, 3), target, p),
                    InvalidArgument);
}

TEST_CASE("average interest is the element-wise mean") {
    const Embedding ex = (Embedding(2) << 1.0, 0.0).finished();
    const Embedding ey = (Embedding(2) << 0.0, 1.0).finished();
    std::vector<Embedding> one = {ex};
    CHECK(pce::avg_interest(one) == ex);

    std::vector<Embedding> two = {ex, ey};
    const Embedding m = pce::avg_interest(two);
    CHECK(m(0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(m(1) == doctest::Approx(0.5).epsilon(1e-15));

    Rng rng(5);
    std::vector<Embedding> many;
    Embedding sum = Embedding::Zero(3);
    for (int i = 0; i < 5; ++i) {
        many.push_back(rng.normal_vector(3));
        sum += many.back();
    }
    CHECK(pce::avg_interest(many).isApprox(Embedding(sum / 5.0), 1e-14));

    CHECK_THROWS_AS(pce::avg_interest({}), InvalidArgument);
    std::vector<Embedding> ragged = {ex, Embedding::Ones(3)};
    CHECK_THROWS_AS(pce::avg_interest(ragged), InvalidArgument);
}

TEST_CASE("logit-normal times stay in (0,1) with the documented median") {
    Rng rng(101);
    std::vector<double> draws(100000);
    for (double& t : draws) {
        t = pce::sample_t_logitnormal(-0.4, 1.2, rng);
        CHECK(t > 0.0);
        CHECK(t < 1.0);
    }
    std::nth_element(draws.begin(), draws.begin() + draws.size() / 2, draws.end());
    const double median = draws[draws.size() / 2];
    CHECK(median == doctest::Approx(1.0 / (1.0 + std::exp(0.4))).epsilon(0.025));

    // As sigma shrinks the distribution collapses onto logistic(mu).
    Rng tight_rng(7);
    const double tight = pce::sample_t_logitnormal(-0.4, 1e-9, tight_rng);
    CHECK(tight == doctest::Approx(1.0 / (1.0 + std::exp(0.4))).epsilon(1e-6));
}

TEST_CASE("time pairs are ordered and tie with probability p_equal") {
    FlowConfig cfg;
    Rng rng(202);
    int equal = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const auto [r, t] = pce::sample_rt_pair(cfg, rng);
        CHECK(t >= r);
        CHECK(r > 0.0);
        CHECK(t < 1.0);
        if (r == t) ++equal;
    }
    const double frac = static_cast<double>(equal) / n;
    CHECK(std::abs(frac - cfg.p_equal) <= 0.02);

    cfg.p_equal = 1.0;
    Rng all_rng(3);
    for (int i = 0; i < 100; ++i) {
        const auto [r, t] = pce::sample_rt_pair(cfg, all_rng);
        CHECK(r == t);
    }
}

TEST_CASE("flow config validation pins the legal ranges") {
    FlowConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.p_drop = 1.0;  // probability-one dropout would never train the conditional path
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    cfg.p_drop = 0.1;
    cfg.sigma = 0.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    cfg.sigma = 1.2;
    cfg.p_equal = 1.1;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    cfg.p_equal = 0.25;
    cfg.euler_steps = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    cfg.euler_steps = 100;
    cfg.omega = -0.1;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

TEST_CASE("guidance null tokens must be all zeros") {
    CHECK_NOTHROW(pce::null_guidance(4).validate());
    GuidanceSignal bad{Embedding::Ones(4), true};
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    GuidanceSignal cond{Embedding::Ones(4), false};
    CHECK_NOTHROW(cond.validate());
}

TEST_CASE("the interpolation path connects source and target linearly") {
    const Embedding e0 = (Embedding(2) << 0.0, 2.0).finished();
    const Embedding e1 = (Embedding(2) << 2.0, 0.0).finished();

    const auto at0 = pce::cfm_path(e0, e1, 0.0);
    CHECK(at0.e_t == e0);
    CHECK(at0.v.isApprox(Embedding(e1 - e0), 1e-15));

    const auto at1 = pce::cfm_path(e0, e1, 1.0);
    CHECK(at1.e_t.isApprox(e1, 1e-15));

    const auto mid = pce::cfm_path(e0, e1, 0.5);
    CHECK(mid.e_t(0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(mid.e_t(1) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(mid.v.isApprox(at0.v, 1e-15));

    CHECK_THROWS_AS(pce::cfm_path(e0, e1, -0.1), InvalidArgument);
    CHECK_THROWS_AS(pce::cfm_path(e0, e1, 1.1), InvalidArgument);
    CHECK_THROWS_AS(pce::cfm_path(e0, Embedding::Ones(3), 0.5), InvalidArgument);
}

TEST_CASE("the mean-velocity regression target follows its defining identity") {
    const Eigen::Index d = 2, d_g = 1;
    const Embedding e = (Embedding(2) << 0.7, -0.2).finished();
    const Vector g = Vector::Ones(1);
    const Embedding v = (Embedding(2) << 1.5, -3.0).finished();

    SUBCASE("r == t collapses to the path velocity for any network") {
        Rng rng(5);
        VelocityFieldParams p("vf", d, d_g, rng, {8});
        const Embedding tgt = pce::meanflow_target(p, e, g, 0.37, 0.37, v);
        CHECK(tgt == v);
    }
    SUBCASE("a constant field has zero total derivative") {
        const Vector bias = (Vector(2) << 4.0, -1.0).finished();
        const auto p = affine_field(d, d_g, Matrix::Zero(d, d + d_g + 2), bias);
        const Embedding tgt = pce::meanflow_target(p, e, g, 0.2, 0.9, v);
        CHECK(tgt.isApprox(v, 1e-12));
    }
    SUBCASE("a field linear in t subtracts (t-r) times its slope") {
        Matrix w = Matrix::Zero(d, d + d_g + 2);
        const Vector slope = (Vector(2) << 0.5, -2.0).finished();
        w.col(d + d_g + 1) = slope;  // the t input column
        const auto p = affine_field(d, d_g, w, Vector::Zero(d));
        const Embedding tgt = pce::meanflow_target(p, e, g, 0.0, 1.0, v);
        CHECK(tgt.isApprox(Embedding(v - slope), 1e-9));
    }
    SUBCASE("r must not exceed t") {
        Rng rng(5);
        VelocityFieldParams p("vf", d, d_g, rng, {8});
        CHECK_THROWS_AS(pce::meanflow_target(p, e, g, 0.9, 0.2, v), InvalidArgument);
    }
}

TEST_CASE("the flow-matching regression loss passes a gradient check") {
    Rng rng(29);
    const Eigen::Index d = 3, d_g = 2;
    VelocityFieldParams p("vf", d, d_g, rng, {8});
    const Embedding e0 = rng.normal_vector(d);
    const Embedding e1 = rng.normal_vector(d);
    const Vector g = rng.normal_vector(d_g);
    const double r = 0.2, t = 0.8;
    const auto path = pce::cfm_path(e0, e1, t);

    // The regression target is gradient-stopped: freeze it at the current
    // parameters so finite differences see the same function as backward.
    const Embedding u_tgt = pce::meanflow_target(p, path.e_t, g, r, t, path.v);
    auto loss_fn = [&](ad::Tape& tape) {
        const ad::Var pred = p.forward(tape, path.e_t, g, r, t);
        return tape.squared_error(pred, tape.constant(u_tgt));
    };
    auto params = p.params();
    CHECK(ad::grad_check(loss_fn, std::span<ad::ParamTensor* const>(params), 1e-4) < 1e-3);

    // meanflow_loss computes exactly this residual at the current values.
    ad::Tape tape;
    const double direct = tape.scalar_value(pce::meanflow_loss(tape, p, path, g, r, t));
    const double frozen = ad::eval_loss(loss_fn);
    CHECK(direct == doctest::Approx(frozen).epsilon(1e-12));
}

TEST_CASE("training the velocity field on a point mass reaches the target") {
    Rng rng(41);
    VelocityFieldParams p("vf", 2, 0, rng, {32, 32});
    const Embedding e_avg = (Embedding(2) << 0.0, 0.0).finished();
    const Embedding e_last = (Embedding(2) << 1.0, -1.0).finished();
    std::vector<FlowSample> pairs = {{e_avg, e_last, Embedding::Zero(0)}};

    FlowConfig cfg;
    cfg.p_drop = 0.0;
    Rng train_rng(1);
    const auto losses = pce::train_velocity_field(p, pairs, cfg, 2000, train_rng);
    REQUIRE(losses.size() == 2000);
    CHECK(losses.back() < losses.front());

    const Embedding sampled = pce::one_step_sample(p, e_avg, pce::null_guidance(0), cfg);
    CHECK((sampled - e_last).norm() < 0.05);
}

TEST_CASE("zero training epochs change nothing") {
    Rng rng(43);
    VelocityFieldParams p("vf", 2, 2, rng, {8});
    std::vector<Matrix> before;
    for (auto* t : p.params()) before.push_back(t->values);

    std::vector<FlowSample> pairs = {
        {Embedding::Zero(2), Embedding::Ones(2), Embedding::Ones(2)}};
    Rng train_rng(1);
    const auto losses = pce::train_velocity_field(p, pairs, FlowConfig{}, 0, train_rng);
    CHECK(losses.empty());
    auto params = p.params();
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i]->values == before[i]);

    Rng rng2(44);
    VelocityFieldParams q("vf", 2, 2, rng2, {8});
    CHECK_THROWS_AS(pce::train_velocity_field(q, {}, FlowConfig{}, 1, train_rng),
                    InvalidArgument);
}

TEST_CASE("guidance dropout gates the conditioning input") {
    const auto make_pairs = [] {
        Rng rng(9);
        std::vector<FlowSample> pairs;
        for (int i = 0; i < 40; ++i) {
            pairs.push_back({rng.normal_vector(2), rng.normal_vector(2),
                             (Embedding(2) << 1.0, -1.0).finished()});
        }
        return pairs;
    };
    const auto pairs = make_pairs();

    FlowConfig keep;
    keep.p_drop = 0.0;
    Rng rng_a(4);
    VelocityFieldParams a("vf", 2, 2, rng_a, {});
    const Matrix w0 = a.net.layers[0].weight.values;
    Rng train_a(11);
    (void)pce::train_velocity_field(a, pairs, keep, 3, train_a);
    // With dropout off, every step feeds the guidance columns.
    CHECK((a.net.layers[0].weight.values.middleCols(2, 2) - w0.middleCols(2, 2)).norm() > 1e-9);

    FlowConfig drop = keep;
    drop.p_drop = 0.5;
    Rng rng_b(4);
    VelocityFieldParams b("vf", 2, 2, rng_b, {});
    Rng train_b(11);
    (void)pce::train_velocity_field(b, pairs, drop, 3, train_b);
    CHECK((a.net.layers[0].weight.values - b.net.layers[0].weight.values).norm() > 1e-12);
}

TEST_CASE("velocity-field training is reproducible for a fixed seed") {
    Rng data_rng(6);
    std::vector<FlowSample> pairs;
    for (int i = 0; i < 10; ++i) {
        pairs.push_back({data_rng.normal_vector(2), data_rng.normal_vector(2),
                         data_rng.normal_vector(2)});
    }
    auto run = [&pairs] {
        Rng init(77);
        VelocityFieldParams p("vf", 2, 2, init, {8});
        Rng train_rng(5);
        return pce::train_velocity_field(p, pairs, FlowConfig{}, 3, train_rng);
    };
    CHECK(run() == run());
}

TEST_CASE("guided and unguided velocities combine linearly") {
    const Embedding u_c = (Embedding(1) << 1.0).finished();
    const Embedding u_u = (Embedding(1) << 0.0).finished();
    CHECK(pce::cfg_combine(u_c, u_u, 0.0) == u_u);
    CHECK(pce::cfg_combine(u_c, u_u, 2.0)(0) == doctest::Approx(2.0).epsilon(1e-15));

    Rng rng(3);
    const Embedding u = rng.normal_vector(4);
    for (double omega : {0.0, 1.0, 7.0}) {
        CHECK(pce::cfg_combine(u, u, omega).isApprox(u, 1e-15));
    }
    CHECK(pce::cfg_combine(u, Embedding(0.5 * u), 1.0).isApprox(u, 1e-15));

    CHECK_THROWS_AS(pce::cfg_combine(u_c, u_u, -1.0), InvalidArgument);
    CHECK_THROWS_AS(pce::cfg_combine(u_c, Embedding::Ones(2), 1.0), InvalidArgument);
}

TEST_CASE("euler integration reproduces closed-form flows") {
    const Embedding e0 = (Embedding(2) << 1.0, -2.0).finished();

    const Embedding still = pce::euler_integrate(
        [](const Embedding& e, double) { return Embedding(Embedding::Zero(e.size())); }, e0,
        50);
    CHECK(still == e0);

    const Embedding goal = (Embedding(2) << 3.0, 4.0).finished();
    for (int steps : {1, 7, 100}) {
        const Embedding reached = pce::euler_integrate(
            [&](const Embedding&, double) { return Embedding(goal - e0); }, e0, steps);
        CHECK(reached.isApprox(goal, 1e-12));
    }

    // d e/dt = −e over unit time: (1 − 1/K)^K → e⁻¹.
    const Embedding decayed = pce::euler_integrate(
        [](const Embedding& e, double) { return Embedding(-e); }, e0, 1000);
    const double factor = decayed(0) / e0(0);
    CHECK(std::abs(factor - std::exp(-1.0)) / std::exp(-1.0) < 1e-3);

    CHECK_THROWS_AS(pce::euler_integrate(
                        [](const Embedding& e, double) { return e; }, e0, 0),
                    InvalidArgument);
}

TEST_CASE("sampling with a constant field lands source plus bias") {
    const Eigen::Index d = 2, d_g = 2;
    const Vector bias = (Vector(2) << 0.3, -0.7).finished();
    auto p = affine_field(d, d_g, Matrix::Zero(d, d + d_g + 2), bias);

    FlowConfig cfg;
    cfg.omega = 0.0;
    const Embedding e0 = (Embedding(2) << 1.0, 1.0).finished();
    const GuidanceSignal g{(Embedding(2) << 0.5, 0.5).finished(), false};

    const Embedding one = pce::one_step_sample(p, e0, g, cfg);
    CHECK(one.isApprox(Embedding(e0 + bias), 1e-12));

    const Embedding multi = pce::euler_integrate(p, e0, g, cfg);
    CHECK(multi.isApprox(Embedding(e0 + bias), 1e-9));
}

TEST_CASE("guidance strength mixes conditional and null velocities at inference") {
    const Eigen::Index d = 2, d_g = 2;
    Rng rng(55);
    Matrix w(d, d + d_g + 2);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i / w.cols(), i % w.cols()) = rng.normal();
    const Vector bias = rng.normal_vector(d);
    auto p = affine_field(d, d_g, w, bias);

    const Embedding e0 = rng.normal_vector(d);
    const Embedding g = rng.normal_vector(d_g);
    FlowConfig cfg;
    cfg.omega = 2.0;

    const Vector u_cond = p.forward(e0, g, 0.0, 1.0);
    const Vector u_null = p.forward(e0, Vector::Zero(d_g), 0.0, 1.0);
    const Embedding expect = e0 + (u_null + cfg.omega * (u_cond - u_null));
    CHECK(pce::one_step_sample(p, e0, GuidanceSignal{g, false}, cfg).isApprox(expect, 1e-12));

    // The null token opts out of guidance entirely.
    const Embedding plain = pce::one_step_sample(p, e0, pce::null_guidance(d_g), cfg);
    CHECK(plain.isApprox(Embedding(e0 + u_null), 1e-12));
}

TEST_CASE("the personalized embedding stacks global then instant interest") {
    const Embedding a = (Embedding(1) << 1.0).finished();
    const Embedding b = (Embedding(1) << 2.0).finished();
    const Embedding f = pce::pce_fuse(a, b);
    REQUIRE(f.size() == 2);
    CHECK(f(0) == 1.0);
    CHECK(f(1) == 2.0);

    const Embedding g = pce::pce_fuse(Embedding::Ones(3), Embedding::Zero(3));
    CHECK(g.size() == 6);
    CHECK(g.head(3).isApprox(Embedding::Ones(3), 1e-15));

    CHECK_THROWS_AS(pce::pce_fuse(Embedding(0), a), InvalidArgument);
    CHECK_THROWS_AS(pce::pce_fuse(a, Embedding(0)), InvalidArgument);
}
