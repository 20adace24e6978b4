// SPDX-License-Identifier: Apache-2.0

#include "ctxrank/nn.hpp"

#include <cmath>

namespace ctxrank::nn {

double activate(Activation act, double x) {
    switch (act) {
        case Activation::Identity: return x;
        case Activation::Relu: return x > 0.0 ? x : 0.0;
        case Activation::Gelu: return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    }
    return x;
}

Dense::Dense(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng)
    : weight(name + ".weight", ad::glorot(out, in, rng)),
      bias(name + ".bias", Matrix::Zero(out, 1)) {}

Vector Dense::forward(const Vector& x) const {
    require(x.size() == weight.values.cols(), "Dense: input dim mismatch");
    return weight.values * x + bias.values;
}

ad::Var Dense::forward(ad::Tape& tape, ad::Var x) {
    return tape.affine(tape.param(weight), x, tape.param(bias));
}

Mlp::Mlp(const std::string& name, Eigen::Index in, const std::vector<Eigen::Index>& hidden,
         Eigen::Index out, Rng& rng, Activation act)
    : hidden_activation(act) {
    Eigen::Index prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        layers.emplace_back(name + ".l" + std::to_string(i), prev, hidden[i], rng);
        prev = hidden[i];
    }
    layers.emplace_back(name + ".l" + std::to_string(hidden.size()), prev, out, rng);
}

Vector Mlp::forward(const Vector& x) const {
    require(!layers.empty(), "Mlp: uninitialized");
    Vector h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i].forward(h);
        if (i + 1 < layers.size()) {
            for (Eigen::Index j = 0; j < h.size(); ++j) h[j] = activate(hidden_activation, h[j]);
        }
    }
    return h;
}

ad::Var Mlp::forward(ad::Tape& tape, ad::Var x) {
    require(!layers.empty(), "Mlp: uninitialized");
    ad::Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        h = layers[i].forward(tape, h);
        if (i + 1 < layers.size()) {
            switch (hidden_activation) {
                case Activation::Identity: break;
                case Activation::Relu: h = tape.relu(h); break;
                case Activation::Gelu: h = tape.gelu(h); break;
            }
        }
    }
    return h;
}

std::vector<ad::ParamTensor*> Mlp::params() {
    std::vector<ad::ParamTensor*> out;
    for (Dense& l : layers) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

Eigen::Index Mlp::input_dim() const {
    require(!layers.empty(), "Mlp: uninitialized");
    return layers.front().weight.values.cols();
}

Eigen::Index Mlp::output_dim() const {
    require(!layers.empty(), "Mlp: uninitialized");
    return layers.back().weight.values.rows();
}

}  // namespace ctxrank::nn
