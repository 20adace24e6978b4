// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctxrank/common.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace ctxrank {

/// Dense embedding vector. All entries must be finite.
using Embedding = Vector;

/// Token-position hidden states, one row per position.
using HiddenMatrix = Matrix;

inline constexpr int kDefaultDim = 32;
inline constexpr int kMaxSequenceLength = 300;

/// cosine_sim(a, b) = a.b / (|a||b|). Requires equal dims and nonzero norms.
template <typename DerivedA, typename DerivedB>
double cosine_sim(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
    require(a.size() == b.size(), "cosine_sim: dimension mismatch");
    require(all_finite(a) && all_finite(b), "cosine_sim: non-finite input");
    const double na = a.norm();
    const double nb = b.norm();
    require(na > 0.0 && nb > 0.0, "cosine_sim: zero-norm input (degenerate encoder output)");
    return a.dot(b) / (na * nb);
}

/// Column-wise mean over the rows of a hidden-state matrix.
template <typename Derived>
Embedding average_pool(const Eigen::MatrixBase<Derived>& h) {
    require(h.rows() >= 1, "average_pool: empty matrix");
    require(all_finite(h), "average_pool: non-finite input");
    return h.colwise().mean().transpose();
}

/// Concatenates embeddings in order; result dim is the sum of part dims.
inline Embedding concat(std::span<const Embedding> parts) {
    require(!parts.empty(), "concat: empty part list");
    Eigen::Index total = 0;
    for (const auto& p : parts) total += p.size();
    Embedding out(total);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.segment(at, p.size()) = p;
        at += p.size();
    }
    return out;
}

inline Embedding concat(std::initializer_list<Embedding> parts) {
    std::vector<Embedding> v(parts);
    return concat(std::span<const Embedding>(v));
}

/// One enriched click event in a behavior log.
struct BehaviorEvent {
    std::string item_id;
    std::string store_id;
    std::string aoi_id;
    std::int64_t timestamp = 0;  // seconds
    std::map<std::string, std::string> attrs;

    void validate() const {
        require(timestamp >= 0, "BehaviorEvent: negative timestamp");
        require(!item_id.empty() && !store_id.empty() && !aoi_id.empty(),
                "BehaviorEvent: empty id");
    }
};

using BehaviorSequence = std::vector<BehaviorEvent>;

/// Per-request context quadruple: static, dynamic, personalized, collective.
struct ContextBundle {
    std::map<std::string, std::string> static_features;
    std::map<std::string, std::string> dynamic_features;
    BehaviorSequence behavior_sequence;

    struct CollectiveRefs {
        std::string user_id;
        std::string aoi_id;
        std::vector<std::string> store_ids;
    } collective_refs;

    void validate(std::size_t max_seq_len = kMaxSequenceLength) const {
        require(!dynamic_features.empty(), "ContextBundle: dynamic_features empty");
        require(behavior_sequence.size() <= max_seq_len,
                "ContextBundle: behavior sequence exceeds max length");
    }
};

}  // namespace ctxrank
