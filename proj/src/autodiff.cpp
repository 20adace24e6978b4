// SPDX-License-Identifier: Apache-2.0

#include "ctxrank/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace ctxrank::ad {

namespace {

constexpr double kBceClamp = 1e-12;

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

}  // namespace

Var Tape::push(Matrix value, std::function<void()> backprop) {
    check(value.allFinite(), "Tape: non-finite value produced");
    Node n;
    n.value = std::move(value);
    n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(Var v) {
    require(v.valid() && v.id < static_cast<int>(nodes_.size()), "Tape: invalid var");
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
    require(v.valid() && v.id < static_cast<int>(nodes_.size()), "Tape: invalid var");
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::constant(Matrix m) { return push(std::move(m)); }

Var Tape::scalar(double x) { return push(Matrix::Constant(1, 1, x)); }

Var Tape::param(ParamTensor& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{it->second};
    Var v = push(p.values);
    node(v).bound = &p;
    param_nodes_[&p] = v.id;
    return v;
}

Var Tape::add(Var a, Var b) {
    const Matrix& va = node(a).value;
    const Matrix& vb = node(b).value;
    require(va.rows() == vb.rows() && va.cols() == vb.cols(), "add: shape mismatch");
    Var out = push(va + vb);
    node(out).backprop = [this, a, b, out] {
        const Matrix& g = nodes_[out.id].grad;
        nodes_[a.id].grad += g;
        nodes_[b.id].grad += g;
    };
    return out;
}

Var Tape::sub(Var a, Var b) {
    const Matrix& va = node(a).value;
    const Matrix& vb = node(b).value;
    require(va.rows() == vb.rows() && va.cols() == vb.cols(), "sub: shape mismatch");
    Var out = push(va - vb);
    node(out).backprop = [this, a, b, out] {
        const Matrix& g = nodes_[out.id].grad;
        nodes_[a.id].grad += g;
        nodes_[b.id].grad -= g;
    };
    return out;
}

Var Tape::scale(Var a, double s) {
    Var out = push(node(a).value * s);
    node(out).backprop = [this, a, s, out] { nodes_[a.id].grad += s * nodes_[out.id].grad; };
    return out;
}

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
    const Matrix& va = node(a).value;
    const Matrix& vb = node(b).value;
    const Eigen::Index inner_a = trans_a ? va.rows() : va.cols();
    const Eigen::Index inner_b = trans_b ? vb.cols() : vb.rows();
    require(inner_a == inner_b, "matmul: inner dimension mismatch");

    Matrix value;
    if (!trans_a && !trans_b) value = va * vb;
    else if (trans_a && !trans_b) value = va.transpose() * vb;
    else if (!trans_a && trans_b) value = va * vb.transpose();
    else value = va.transpose() * vb.transpose();

    Var out = push(std::move(value));
    node(out).backprop = [this, a, b, trans_a, trans_b, out] {
        const Matrix& g = nodes_[out.id].grad;
        const Matrix& va = nodes_[a.id].value;
        const Matrix& vb = nodes_[b.id].value;
        if (!trans_a && !trans_b) {
            nodes_[a.id].grad.noalias() += g * vb.transpose();
            nodes_[b.id].grad.noalias() += va.transpose() * g;
        } else if (trans_a && !trans_b) {
            nodes_[a.id].grad.noalias() += vb * g.transpose();
            nodes_[b.id].grad.noalias() += va * g;
        } else if (!trans_a && trans_b) {
            nodes_[a.id].grad.noalias() += g * vb;
            nodes_[b.id].grad.noalias() += g.transpose() * va;
        } else {
            nodes_[a.id].grad.noalias() += vb.transpose() * g.transpose();
            nodes_[b.id].grad.noalias() += g.transpose() * va.transpose();
        }
    };
    return out;
}

Var Tape::affine(Var w, Var x, Var b) { return add(matmul(w, x), b); }

Var Tape::relu(Var a) {
    Var out = push(node(a).value.cwiseMax(0.0));
    node(out).backprop = [this, a, out] {
        const Matrix& va = nodes_[a.id].value;
        nodes_[a.id].grad.array() +=
            nodes_[out.id].grad.array() * (va.array() > 0.0).cast<double>();
    };
    return out;
}

Var Tape::gelu(Var a) {
    Var out = push(node(a).value.unaryExpr([](double x) { return gelu_scalar(x); }));
    node(out).backprop = [this, a, out] {
        const Matrix& va = nodes_[a.id].value;
        nodes_[a.id].grad.array() +=
            nodes_[out.id].grad.array() *
            va.unaryExpr([](double x) { return gelu_grad_scalar(x); }).array();
    };
    return out;
}

Var Tape::sigmoid(Var a) {
    Var out = push(node(a).value.unaryExpr([](double x) { return ctxrank::sigmoid(x); }));
    node(out).backprop = [this, a, out] {
        const Matrix& s = nodes_[out.id].value;
        nodes_[a.id].grad.array() +=
            nodes_[out.id].grad.array() * s.array() * (1.0 - s.array());
    };
    return out;
}

Var Tape::row_softmax(Var a) {
    const Matrix& va = node(a).value;
    Matrix value(va.rows(), va.cols());
    for (Eigen::Index i = 0; i < va.rows(); ++i) {
        const double m = va.row(i).maxCoeff();
        Eigen::RowVectorXd e = (va.row(i).array() - m).exp();
        value.row(i) = e / e.sum();
    }
    Var out = push(std::move(value));
    node(out).backprop = [this, a, out] {
        const Matrix& s = nodes_[out.id].value;
        const Matrix& g = nodes_[out.id].grad;
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
            const double dot = g.row(i).dot(s.row(i));
            nodes_[a.id].grad.row(i).array() +=
                s.row(i).array() * (g.row(i).array() - dot);
        }
    };
    return out;
}

Var Tape::concat(std::span<const Var> parts) {
    require(!parts.empty(), "concat: empty part list");
    Eigen::Index total = 0;
    for (Var p : parts) {
        require(node(p).value.cols() == 1, "concat: parts must be column vectors");
        total += node(p).value.rows();
    }
    Matrix value(total, 1);
    Eigen::Index at = 0;
    for (Var p : parts) {
        value.block(at, 0, node(p).value.rows(), 1) = node(p).value;
        at += node(p).value.rows();
    }
    std::vector<Var> owned(parts.begin(), parts.end());
    Var out = push(std::move(value));
    node(out).backprop = [this, owned, out] {
        const Matrix& g = nodes_[out.id].grad;
        Eigen::Index at = 0;
        for (Var p : owned) {
            const Eigen::Index n = nodes_[p.id].value.rows();
            nodes_[p.id].grad += g.block(at, 0, n, 1);
            at += n;
        }
    };
    return out;
}

Var Tape::mean_rows(Var a) {
    const Matrix& va = node(a).value;
    require(va.rows() >= 1, "mean_rows: empty matrix");
    Var out = push(va.colwise().mean().transpose());
    node(out).backprop = [this, a, out] {
        const Matrix& g = nodes_[out.id].grad;  // cols x 1
        const double inv = 1.0 / static_cast<double>(nodes_[a.id].value.rows());
        nodes_[a.id].grad.noalias() +=
            Matrix::Ones(nodes_[a.id].value.rows(), 1) * (g.transpose() * inv);
    };
    return out;
}

Var Tape::mean_all(Var a) {
    const Matrix& va = node(a).value;
    require(va.size() >= 1, "mean_all: empty matrix");
    Var out = push(Matrix::Constant(1, 1, va.mean()));
    node(out).backprop = [this, a, out] {
        const double g = nodes_[out.id].grad(0, 0);
        nodes_[a.id].grad.array() += g / static_cast<double>(nodes_[a.id].value.size());
    };
    return out;
}

Var Tape::row(Var table, Eigen::Index r) {
    const Matrix& vt = node(table).value;
    require(r >= 0 && r < vt.rows(), "row: index out of range");
    Var out = push(vt.row(r).transpose());
    node(out).backprop = [this, table, r, out] {
        nodes_[table.id].grad.row(r) += nodes_[out.id].grad.transpose();
    };
    return out;
}

Var Tape::squared_error(Var a, Var b) {
    const Matrix& va = node(a).value;
    const Matrix& vb = node(b).value;
    require(va.rows() == vb.rows() && va.cols() == vb.cols(), "squared_error: shape mismatch");
    Var out = push(Matrix::Constant(1, 1, (va - vb).squaredNorm()));
    node(out).backprop = [this, a, b, out] {
        const double g = nodes_[out.id].grad(0, 0);
        const Matrix diff = nodes_[a.id].value - nodes_[b.id].value;
        nodes_[a.id].grad += 2.0 * g * diff;
        nodes_[b.id].grad -= 2.0 * g * diff;
    };
    return out;
}

Var Tape::bce(Var pred, double label) {
    const Matrix& vp = node(pred).value;
    require(vp.size() == 1, "bce: prediction must be a scalar");
    require(label == 0.0 || label == 1.0, "bce: label must be 0 or 1");
    const double p = std::clamp(vp(0, 0), kBceClamp, 1.0 - kBceClamp);
    const double loss = -(label * std::log(p) + (1.0 - label) * std::log(1.0 - p));
    Var out = push(Matrix::Constant(1, 1, loss));
    node(out).backprop = [this, pred, label, out] {
        const double raw = nodes_[pred.id].value(0, 0);
        if (raw <= kBceClamp || raw >= 1.0 - kBceClamp) return;  // clamped: flat
        const double g = nodes_[out.id].grad(0, 0);
        nodes_[pred.id].grad(0, 0) += g * (raw - label) / (raw * (1.0 - raw));
    };
    return out;
}

const Matrix& Tape::value(Var v) const { return node(v).value; }

const Matrix& Tape::grad_of(Var v) const { return node(v).grad; }

double Tape::scalar_value(Var v) const {
    const Matrix& m = node(v).value;
    require(m.size() == 1, "scalar_value: not a scalar node");
    return m(0, 0);
}

void Tape::backward(Var loss) {
    Node& l = node(loss);
    require(l.value.size() == 1, "backward: loss must be a scalar");
    check(std::isfinite(l.value(0, 0)), "backward: non-finite loss");
    l.grad(0, 0) = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->backprop) it->backprop();
        if (it->bound) it->bound->grad += it->grad;
    }
}

double grad(const std::function<Var(Tape&)>& loss_fn, std::span<ParamTensor* const> params) {
    for (ParamTensor* p : params) p->zero_grad();
    Tape tape;
    Var loss = loss_fn(tape);
    const double value = tape.scalar_value(loss);
    check(std::isfinite(value), "grad: non-finite loss");
    tape.backward(loss);
    return value;
}

double eval_loss(const std::function<Var(Tape&)>& loss_fn) {
    Tape tape;
    return tape.scalar_value(loss_fn(tape));
}

double grad_check(const std::function<Var(Tape&)>& loss_fn,
                  std::span<ParamTensor* const> params, double eps) {
    require(eps >= 1e-7 && eps <= 1e-3, "grad_check: eps out of [1e-7, 1e-3]");
    grad(loss_fn, params);

    std::vector<Matrix> analytic;
    analytic.reserve(params.size());
    for (ParamTensor* p : params) analytic.push_back(p->grad);

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        ParamTensor& p = *params[pi];
        for (Eigen::Index i = 0; i < p.values.size(); ++i) {
            const double saved = p.values(i);
            p.values(i) = saved + eps;
            const double up = eval_loss(loss_fn);
            p.values(i) = saved - eps;
            const double down = eval_loss(loss_fn);
            p.values(i) = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[pi](i);
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

Vector jvp(const std::function<Vector(const Vector&)>& fn, const Vector& x, const Vector& dir) {
    require(x.size() == dir.size(), "jvp: direction dim mismatch");
    const double h = 1e-4 * (1.0 + x.norm());
    const Vector up = fn(x + h * dir);
    const Vector down = fn(x - h * dir);
    Vector out = (up - down) / (2.0 * h);
    check(out.allFinite(), "jvp: non-finite output");
    return out;
}

void Optimizer::step(std::span<ParamTensor* const> params) {
    // lr == 0 is a legal no-op update (frozen-parameter runs still consume grads).
    require(cfg_.lr >= 0.0, "Optimizer: lr must be nonnegative");
    ++step_;
    for (ParamTensor* p : params) {
        check(p->grad.allFinite(), "Optimizer: non-finite grad for " + p->name);
        if (cfg_.method == OptMethod::Sgd) {
            p->values -= cfg_.lr * p->grad;
        } else {
            State& s = state_[p];
            if (s.m.size() == 0) {
                s.m = Matrix::Zero(p->values.rows(), p->values.cols());
                s.v = Matrix::Zero(p->values.rows(), p->values.cols());
            }
            s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * p->grad;
            s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
            const Matrix mhat = s.m / bc1;
            const Matrix vhat = s.v / bc2;
            p->values.array() -= cfg_.lr * mhat.array() / (vhat.array().sqrt() + cfg_.eps);
        }
        check(p->values.allFinite(), "Optimizer: non-finite values for " + p->name);
        p->zero_grad();
    }
}

Matrix glorot(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(rows + cols));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal(0.0, stddev);
    return m;
}

}  // namespace ctxrank::ad
