// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ctxrank/core.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

using namespace ctxrank;

TEST_CASE("cosine similarity matches the direct formula") {
    Embedding a(3), b(3);
    a << 1.0, 0.0, 0.0;
    b << 1.0, 0.0, 0.0;
    CHECK(cosine_sim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

    b << 0.0, 1.0, 0.0;
    CHECK(cosine_sim(a, b) == doctest::Approx(0.0).epsilon(1e-12));

    a << 1.0, 2.0, 2.0;
    b << 2.0, 2.0, 1.0;
    CHECK(cosine_sim(a, b) == doctest::Approx(8.0 / 9.0).epsilon(1e-12));

    // Scale invariance.
    CHECK(cosine_sim(a, Embedding(7.5 * b)) ==
          doctest::Approx(cosine_sim(a, b)).epsilon(1e-12));
}

TEST_CASE("cosine similarity rejects degenerate input") {
    Embedding a(3), b(2);
    a << 1.0, 2.0, 3.0;
    b << 1.0, 2.0;
    CHECK_THROWS_AS(cosine_sim(a, b), InvalidArgument);
    CHECK_THROWS_AS(cosine_sim(a, Embedding(Embedding::Zero(3))), InvalidArgument);
    Embedding bad(3);
    bad << 1.0, std::numeric_limits<double>::quiet_NaN(), 0.0;
    CHECK_THROWS_AS(cosine_sim(a, bad), InvalidArgument);
}

TEST_CASE("average pooling is the column mean") {
    Matrix h(2, 2);
    h << 1.0, 3.0, 3.0, 5.0;
    const Embedding p = average_pool(h);
    REQUIRE(p.size() == 2);
    CHECK(p(0) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(p(1) == doctest::Approx(4.0).epsilon(1e-15));

    Matrix one(1, 2);
    one << 7.0, 7.0;
    const Embedding q = average_pool(one);
    CHECK(q(0) == 7.0);
    CHECK(q(1) == 7.0);

    Rng rng(3);
    Matrix r(3, 2);
    for (Eigen::Index i = 0; i < r.size(); ++i) r(i / 2, i % 2) = rng.normal();
    const Embedding got = average_pool(r);
    for (Eigen::Index c = 0; c < 2; ++c) {
        double sum = 0.0;
        for (Eigen::Index i = 0; i < 3; ++i) sum += r(i, c);
        CHECK(got(c) == doctest::Approx(sum / 3.0).epsilon(1e-14));
    }

    CHECK_THROWS_AS(average_pool(Matrix(0, 4)), InvalidArgument);
}

TEST_CASE("concat preserves order and total length") {
    Embedding a(1), b(2);
    a << 1.0;
    b << 2.0, 3.0;
    const Embedding ab = concat({a, b});
    REQUIRE(ab.size() == 3);
    CHECK(ab(0) == 1.0);
    CHECK(ab(1) == 2.0);
    CHECK(ab(2) == 3.0);

    const Embedding ba = concat({b, a});
    CHECK(ba(0) == 2.0);
    CHECK(ba(2) == 1.0);

    const Embedding solo = concat({b});
    CHECK(solo == b);

    std::vector<Embedding> parts = {a, b, ab};
    CHECK(concat(std::span<const Embedding>(parts)).size() == 6);

    CHECK_THROWS_AS(concat(std::span<const Embedding>{}), InvalidArgument);
}

TEST_CASE("fnv1a hash matches its reference constants") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("ab") != fnv1a64("ba"));
}

TEST_CASE("seeded rng streams are reproducible and in range") {
    Rng a(42), b(42);
    for (int i = 0; i < 200; ++i) {
        const double u = a.uniform();
        CHECK(u == b.uniform());
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    for (int i = 0; i < 200; ++i) CHECK(a.normal() == b.normal());
    for (std::size_t n : {1u, 2u, 17u}) {
        for (int i = 0; i < 50; ++i) CHECK(a.index(n) < n);
    }
    CHECK(a.normal_vector(5).size() == 5);

    std::vector<int> xs = {1, 2, 3, 4, 5, 6, 7};
    auto ys = xs;
    a.shuffle(ys);
    auto sorted = ys;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == xs);
}

TEST_CASE("hashed feature vectors are deterministic per (seed, token)") {
    const Vector v1 = hashed_feature_vector(7, "flavor=spicy", 16);
    const Vector v2 = hashed_feature_vector(7, "flavor=spicy", 16);
    const Vector v3 = hashed_feature_vector(7, "flavor=sweet", 16);
    const Vector v4 = hashed_feature_vector(8, "flavor=spicy", 16);
    REQUIRE(v1.size() == 16);
    CHECK(v1 == v2);
    CHECK((v1 - v3).norm() > 1e-6);
    CHECK((v1 - v4).norm() > 1e-6);
}

TEST_CASE("tokenize splits on the feature separators") {
    const auto toks = tokenize("a b|c=d,e");
    REQUIRE(toks.size() == 5);
    CHECK(toks[0] == "a");
    CHECK(toks[4] == "e");
    CHECK(tokenize("").empty());
    CHECK(tokenize(" |=,;:\t\n").empty());
    const auto kv = tokenize("hour=12|weather=rainy");
    REQUIRE(kv.size() == 4);
    CHECK(kv[1] == "12");
    CHECK(kv[2] == "weather");
}

TEST_CASE("sigmoid is stable and symmetric") {
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(sigmoid(40.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sigmoid(-40.0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(sigmoid(-800.0) >= 0.0);  // no overflow
    CHECK(sigmoid(800.0) <= 1.0);
    for (double x : {-3.0, -0.5, 0.7, 2.2}) {
        CHECK(sigmoid(-x) == doctest::Approx(1.0 - sigmoid(x)).epsilon(1e-12));
    }
    CHECK(logistic(1.3) == sigmoid(1.3));
}

TEST_CASE("behavior events validate ids and timestamps") {
    BehaviorEvent e{"i1", "s1", "a1", 100, {{"flavor", "spicy"}}};
    CHECK_NOTHROW(e.validate());
    e.timestamp = -1;
    CHECK_THROWS_AS(e.validate(), InvalidArgument);
    e.timestamp = 0;
    e.store_id.clear();
    CHECK_THROWS_AS(e.validate(), InvalidArgument);
}

TEST_CASE("context bundles enforce dynamic features and sequence cap") {
    ContextBundle ctx;
    ctx.dynamic_features = {{"hour", "12"}};
    CHECK_NOTHROW(ctx.validate());

    ctx.behavior_sequence.assign(kMaxSequenceLength,
                                 BehaviorEvent{"i", "s", "a", 1, {}});
    CHECK_NOTHROW(ctx.validate());
    ctx.behavior_sequence.push_back(BehaviorEvent{"i", "s", "a", 1, {}});
    CHECK_THROWS_AS(ctx.validate(), InvalidArgument);

    ctx.behavior_sequence.clear();
    ctx.dynamic_features.clear();
    CHECK_THROWS_AS(ctx.validate(), InvalidArgument);
}
