// SPDX-License-Identifier: Apache-2.0
//
// Contextual fusion: low-rank residual adapters (one per context family,
// rank chosen by context volatility) and the fusion MLP over the
// concatenated adapted embeddings.

#pragma once

#include "ctxrank/autodiff.hpp"
#include "ctxrank/core.hpp"
#include "ctxrank/nn.hpp"

#include <string>
#include <vector>

namespace ctxrank::gcf {

enum class ContextKind { Static, Dynamic, Personalized, Collective };

/// Fast-changing contexts get more adapter capacity than stable ones.
inline constexpr int kRankStatic = 2;
inline constexpr int kRankDynamic = 8;
inline constexpr int kRankPersonalized = 8;
inline constexpr int kRankCollective = 2;

inline int default_rank(ContextKind kind) {
    switch (kind) {
        case ContextKind::Dynamic:
        case ContextKind::Personalized:
            return 8;
        case ContextKind::Static:
        case ContextKind::Collective:
            return 2;
    }
    throw InvalidArgument("default_rank: unknown context kind");
}

/// Residual adapter e' = e + B·A·e. Rank 0 is the identity. B starts at
/// zero so a fresh adapter passes its input through unchanged.
struct LoraAdapter {
    ad::ParamTensor a;  // rank×d_i
    ad::ParamTensor b;  // d×rank
    int rank = 0;
    ContextKind context_kind = ContextKind::Static;

    LoraAdapter() = default;
    LoraAdapter(const std::string& name, ContextKind kind, Eigen::Index d_i, int rank,
                Rng& rng);

    Eigen::Index input_dim() const { return rank > 0 ? a.values.cols() : 0; }
    /// rank·(d_i + d) trainable values; 0 for the identity adapter.
    std::size_t param_count() const {
        return static_cast<std::size_t>(a.values.size() + b.values.size());
    }
    std::vector<ad::ParamTensor*> params();
};

Embedding lora_transform(const Embedding& e, const LoraAdapter& adapter);
ad::Var lora_transform(ad::Tape& tape, LoraAdapter& adapter, ad::Var e);

/// MLP over [e_s'; e_d'; e_p'; e_c'] — the order is fixed.
struct FusionHead {
    nn::Mlp mlp;

    FusionHead() = default;
    FusionHead(const std::string& name, Eigen::Index input_dim, Eigen::Index output_dim,
               Rng& rng, const std::vector<Eigen::Index>& hidden = {64});

    std::vector<ad::ParamTensor*> params() { return mlp.params(); }
};

Embedding fuse(const Embedding& e_s, const Embedding& e_d, const Embedding& e_p,
               const Embedding& e_c, const FusionHead& head);
ad::Var fuse(ad::Tape& tape, FusionHead& head, ad::Var e_s, ad::Var e_d, ad::Var e_p,
             ad::Var e_c);

}  // namespace ctxrank::gcf
