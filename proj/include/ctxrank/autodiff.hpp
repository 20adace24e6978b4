// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctxrank/common.hpp"

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace ctxrank::ad {

/// Named trainable tensor. Vectors are stored as n-by-1 matrices.
struct ParamTensor {
    std::string name;
    Matrix values;
    Matrix grad;

    ParamTensor() = default;
    ParamTensor(std::string name_, Matrix values_)
        : name(std::move(name_)), values(std::move(values_)) {
        grad = Matrix::Zero(values.rows(), values.cols());
    }

    std::vector<Eigen::Index> shape() const { return {values.rows(), values.cols()}; }
    Eigen::Index size() const { return values.size(); }
    void zero_grad() { grad.setZero(); }
};

/// Handle to a tape node.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over a fixed primitive set: affine/matmul, elementwise
/// relu/gelu/sigmoid, row softmax, concat, means, squared error, binary
/// cross-entropy, plus row selection for embedding tables. Single-use,
/// single-threaded; nodes only reference earlier nodes, so one reverse pass
/// visits each node exactly once in reverse topological order.
class Tape {
public:
    Var constant(Matrix m);
    Var scalar(double x);

    /// Leaf bound to a ParamTensor; backward accumulates into p.grad.
    /// Repeated calls with the same tensor return the same node.
    Var param(ParamTensor& p);

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var scale(Var a, double s);
    Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);
    Var affine(Var w, Var x, Var b);  // w*x + b
    Var relu(Var a);
    Var gelu(Var a);
    Var sigmoid(Var a);
    Var row_softmax(Var a);
    Var concat(std::span<const Var> parts);  // stacks column vectors
    Var mean_rows(Var a);                    // column means, returned as a column
    Var mean_all(Var a);                     // scalar mean over all entries
    Var row(Var table, Eigen::Index r);      // r-th row as a column vector
    Var squared_error(Var a, Var b);         // sum of squared differences
    Var bce(Var pred, double label);         // pred is a scalar in (0,1)

    const Matrix& value(Var v) const;
    const Matrix& grad_of(Var v) const;
    double scalar_value(Var v) const;

    /// Seeds d(loss)/d(loss) = 1 and replays the tape backwards.
    void backward(Var loss);

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::function<void()> backprop;  // empty for leaves without params
        ParamTensor* bound = nullptr;
    };

    Var push(Matrix value, std::function<void()> backprop = {});
    Node& node(Var v);
    const Node& node(Var v) const;

    std::vector<Node> nodes_;
    std::map<ParamTensor*, int> param_nodes_;
};

/// Builds the loss with a fresh tape, runs backward, fills param grads
/// (previous grads are cleared first). Returns the loss value.
double grad(const std::function<Var(Tape&)>& loss_fn, std::span<ParamTensor* const> params);

/// Forward-only evaluation of a tape-built scalar loss.
double eval_loss(const std::function<Var(Tape&)>& loss_fn);

/// Compares reverse-mode gradients against central finite differences,
/// componentwise over all params. Returns the worst relative error with
/// denominator max(|analytic|, |numeric|, 1e-8). eps must be in [1e-7, 1e-3].
double grad_check(const std::function<Var(Tape&)>& loss_fn,
                  std::span<ParamTensor* const> params, double eps);

/// Directional derivative of fn at x along dir, by central differences with
/// h = 1e-4 * (1 + |x|).
Vector jvp(const std::function<Vector(const Vector&)>& fn, const Vector& x, const Vector& dir);

enum class OptMethod { Sgd, Adam };

struct OptimizerConfig {
    OptMethod method = OptMethod::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// SGD / Adam with bias correction. step() consumes and zeroes grads.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    void step(std::span<ParamTensor* const> params);
    long step_index() const { return step_; }

private:
    struct State {
        Matrix m, v;
    };
    OptimizerConfig cfg_;
    std::map<ParamTensor*, State> state_;
    long step_ = 0;
};

/// Glorot-style init: N(0, sqrt(2 / (fan_in + fan_out))).
Matrix glorot(Eigen::Index rows, Eigen::Index cols, Rng& rng);

}  // namespace ctxrank::ad
