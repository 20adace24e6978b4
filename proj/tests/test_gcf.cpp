// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctxrank/gcf.hpp"

#include <array>
#include <vector>

using namespace ctxrank;
using gcf::ContextKind;
using gcf::FusionHead;
using gcf::LoraAdapter;

TEST_CASE("default per-context ranks reflect context volatility") {
    CHECK(gcf::default_rank(ContextKind::Static) == gcf::kRankStatic);
    CHECK(gcf::default_rank(ContextKind::Dynamic) == gcf::kRankDynamic);
    CHECK(gcf::default_rank(ContextKind::Personalized) == gcf::kRankPersonalized);
    CHECK(gcf::default_rank(ContextKind::Collective) == gcf::kRankCollective);
    CHECK(gcf::kRankDynamic > gcf::kRankStatic);
}

TEST_CASE("fresh adapters start as the identity") {
    Rng rng(5);
    LoraAdapter adapter("lora", ContextKind::Dynamic, 4, 2, rng);
    const Embedding e = rng.normal_vector(4);
    CHECK(gcf::lora_transform(e, adapter) == e);  // B starts at zero
    CHECK(adapter.param_count() == 2 * (4 + 4));
}

TEST_CASE("the adapter adds its low-rank correction") {
    Rng rng(5);
    LoraAdapter adapter("lora", ContextKind::Static, 2, 1, rng);
    adapter.a.values << 1.0, 0.0;  // 1×2
    adapter.b.values << 2.0, 0.0;  // 2×1
    const Embedding e = (Embedding(2) << 1.0, 2.0).finished();
    const Embedding out = gcf::lora_transform(e, adapter);
    CHECK(out(0) == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(out(1) == doctest::Approx(2.0).epsilon(1e-15));

    CHECK_THROWS_AS(gcf::lora_transform(Embedding::Ones(3), adapter), InvalidArgument);
}

TEST_CASE("rank zero means identity with no trainable values") {
    Rng rng(5);
    LoraAdapter adapter("lora", ContextKind::Collective, 6, 0, rng);
    CHECK(adapter.params().empty());
    CHECK(adapter.param_count() == 0);
    const Embedding e = rng.normal_vector(6);
    CHECK(gcf::lora_transform(e, adapter) == e);

    CHECK_THROWS_AS(LoraAdapter("bad", ContextKind::Static, 4, -1, rng), InvalidArgument);
    CHECK_THROWS_AS(LoraAdapter("bad", ContextKind::Static, 4, 5, rng), InvalidArgument);
}

TEST_CASE("the adapter tape twin matches the plain path and trains") {
    Rng rng(7);
    LoraAdapter adapter("lora", ContextKind::Personalized, 5, 2, rng);
    adapter.b.values = ad::glorot(5, 2, rng);  // leave the identity regime
    const Embedding e = rng.normal_vector(5);
    const Embedding plain = gcf::lora_transform(e, adapter);

    ad::Tape t;
    const ad::Var out = gcf::lora_transform(t, t.constant(e), adapter);
    CHECK(t.value(out).isApprox(plain, 1e-13));

    const Embedding target = rng.normal_vector(5);
    auto params = adapter.params();
    auto loss_fn = [&](ad::Tape& tape) {
        return tape.squared_error(gcf::lora_transform(tape, tape.constant(e), adapter),
                                  tape.constant(target));
    };
    CHECK(ad::grad_check(loss_fn, std::span<ad::ParamTensor* const>(params), 1e-5) < 1e-6);
}

TEST_CASE("a single identity layer makes fusion a plain projection") {
    Rng rng(11);
    FusionHead head("fuse", 8, 3, rng, {});
    head.mlp.layers[0].weight.values = Matrix::Identity(3, 8);
    head.mlp.layers[0].bias.values.setZero();

    const Embedding e_s = (Embedding(2) << 1.0, 2.0).finished();
    const Embedding e_d = (Embedding(2) << 3.0, 4.0).finished();
    const Embedding e_p = (Embedding(2) << 5.0, 6.0).finished();
    const Embedding e_c = (Embedding(2) << 7.0, 8.0).finished();
    const Embedding out = gcf::fuse(e_s, e_d, e_p, e_c, head);
    REQUIRE(out.size() == 3);
    CHECK(out(0) == 1.0);  // the head sees [e_s; e_d; e_p; e_c] in that order
    CHECK(out(1) == 2.0);
    CHECK(out(2) == 3.0);
}

TEST_CASE("zero inputs map to zero through zero-bias layers") {
    Rng rng(13);
    FusionHead head("fuse", 8, 4, rng, {16});  // biases init at zero
    const Embedding z = Embedding::Zero(2);
    CHECK(gcf::fuse(z, z, z, z, head).isZero(0.0));
}

TEST_CASE("fusion is sensitive to which slot a context fills") {
    Rng rng(17);
    FusionHead head("fuse", 8, 4, rng, {16});
    const Embedding a = rng.normal_vector(2);
    const Embedding b = rng.normal_vector(2);
    const Embedding c = rng.normal_vector(2);
    const Embedding d = rng.normal_vector(2);
    const Embedding ordered = gcf::fuse(a, b, c, d, head);
    const Embedding swapped = gcf::fuse(b, a, c, d, head);
    CHECK((ordered - swapped).norm() > 1e-9);

    CHECK_THROWS_AS(gcf::fuse(a, b, c, Embedding::Ones(3), head), InvalidArgument);
}

TEST_CASE("the fusion tape twin matches the plain path and trains") {
    Rng rng(19);
    FusionHead head("fuse", 6, 3, rng, {8});
    std::array<Embedding, 4> es = {rng.normal_vector(2), rng.normal_vector(2),
                                   rng.normal_vector(1), rng.normal_vector(1)};
    const Embedding plain = gcf::fuse(es[0], es[1], es[2], es[3], head);

    ad::Tape t;
    const ad::Var out = gcf::fuse(t, head, t.constant(es[0]), t.constant(es[1]),
                                  t.constant(es[2]), t.constant(es[3]));
    CHECK(t.value(out).isApprox(plain, 1e-12));

    auto params = head.mlp.params();
    auto loss_fn = [&](ad::Tape& tape) {
        return tape.mean_all(gcf::fuse(tape, head, tape.constant(es[0]), tape.constant(es[1]),
                                       tape.constant(es[2]), tape.constant(es[3])));
    };
    CHECK(ad::grad_check(loss_fn, std::span<ad::ParamTensor* const>(params), 1e-5) < 1e-3);
}
