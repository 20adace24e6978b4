// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctxrank/autodiff.hpp"

#include <string>
#include <vector>

namespace ctxrank::nn {

enum class Activation { Identity, Relu, Gelu };

double activate(Activation act, double x);

/// One affine layer, weight (out x in) plus bias (out x 1).
struct Dense {
    ad::ParamTensor weight;
    ad::ParamTensor bias;

    Dense() = default;
    Dense(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng);

    Vector forward(const Vector& x) const;
    ad::Var forward(ad::Tape& tape, ad::Var x);
};

/// Fully connected stack with a fixed hidden activation and identity output.
/// forward() and the tape forward compute the same function; training uses
/// the tape, inference the plain path.
struct Mlp {
    std::vector<Dense> layers;
    Activation hidden_activation = Activation::Gelu;

    Mlp() = default;
    Mlp(const std::string& name, Eigen::Index in, const std::vector<Eigen::Index>& hidden,
        Eigen::Index out, Rng& rng, Activation act = Activation::Gelu);

    Vector forward(const Vector& x) const;
    ad::Var forward(ad::Tape& tape, ad::Var x);

    std::vector<ad::ParamTensor*> params();
    Eigen::Index input_dim() const;
    Eigen::Index output_dim() const;
};

}  // namespace ctxrank::nn
