// SPDX-License-Identifier: Apache-2.0

#include "ctxrank/gcf.hpp"

#include <array>

namespace ctxrank::gcf {

LoraAdapter::LoraAdapter(const std::string& name, ContextKind kind, Eigen::Index d_i,
                         int rank_, Rng& rng)
    : rank(rank_), context_kind(kind) {
    require(d_i >= 1, "LoraAdapter: input dim must be positive");
    require(rank_ >= 0, "LoraAdapter: rank must be nonnegative");
    require(rank_ <= d_i, "LoraAdapter: rank exceeds dimension");
    if (rank_ > 0) {
        a = ad::ParamTensor(name + ".A", ad::glorot(rank_, d_i, rng));
        b = ad::ParamTensor(name + ".B", Matrix::Zero(d_i, rank_));
    }
}

std::vector<ad::ParamTensor*> LoraAdapter::params() {
    if (rank == 0) return {};
    return {&a, &b};
}

Embedding lora_transform(const Embedding& e, const LoraAdapter& adapter) {
    if (adapter.rank == 0) return e;
    require(e.size() == adapter.a.values.cols(), "lora_transform: input dim mismatch");
    require(adapter.b.values.rows() == e.size(),
            "lora_transform: residual add needs matching output dim");
    return e + adapter.b.values * (adapter.a.values * e);
}

ad::Var lora_transform(ad::Tape& tape, LoraAdapter& adapter, ad::Var e) {
    if (adapter.rank == 0) return e;
    require(tape.value(e).rows() == adapter.a.values.cols(),
            "lora_transform: input dim mismatch");
    return tape.add(e, tape.matmul(tape.param(adapter.b),
                                   tape.matmul(tape.param(adapter.a), e)));
}

FusionHead::FusionHead(const std::string& name, Eigen::Index input_dim,
                       Eigen::Index output_dim, Rng& rng,
                       const std::vector<Eigen::Index>& hidden)
    : mlp(name, input_dim, hidden, output_dim, rng, nn::Activation::Gelu) {}

namespace {

void check_fuse_inputs(Eigen::Index total, const FusionHead& head) {
    require(total == head.mlp.input_dim(),
            "fuse: concatenated width does not match the fusion head");
}

}  // namespace

Embedding fuse(const Embedding& e_s, const Embedding& e_d, const Embedding& e_p,
               const Embedding& e_c, const FusionHead& head) {
    require(e_s.size() > 0 && e_d.size() > 0 && e_p.size() > 0 && e_c.size() > 0,
            "fuse: missing context embedding");
    check_fuse_inputs(e_s.size() + e_d.size() + e_p.size() + e_c.size(), head);
    return head.mlp.forward(concat({e_s, e_d, e_p, e_c}));
}

ad::Var fuse(ad::Tape& tape, FusionHead& head, ad::Var e_s, ad::Var e_d, ad::Var e_p,
             ad::Var e_c) {
    const std::array<ad::Var, 4> parts{e_s, e_d, e_p, e_c};
    Eigen::Index total = 0;
    for (ad::Var v : parts) {
        require(tape.value(v).rows() > 0, "fuse: missing context embedding");
        total += tape.value(v).rows();
    }
    check_fuse_inputs(total, head);
    return head.mlp.forward(tape, tape.concat(parts));
}

}  // namespace ctxrank::gcf
