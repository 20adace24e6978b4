// SPDX-License-Identifier: Apache-2.0

#include "ctxrank/pce.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ctxrank::pce {

namespace {

Vector gelu_vec(const Vector& x) {
    return x.unaryExpr([](double v) { return nn::activate(nn::Activation::Gelu, v); });
}

}  // namespace

AttentionParams::AttentionParams(const std::string& name, Eigen::Index d,
                                 Eigen::Index ffn_hidden, Rng& rng)
    : w_q(name + ".w_q", ad::glorot(d, d, rng)),
      w_k(name + ".w_k", ad::glorot(d, d, rng)),
      w_v(name + ".w_v", ad::glorot(d, d, rng)),
      w_o(name + ".w_o", ad::glorot(d, d, rng)),
      ffn1(name + ".ffn1", d, ffn_hidden, rng),
      ffn2(name + ".ffn2", ffn_hidden, d, rng) {}

std::vector<ad::ParamTensor*> AttentionParams::params() {
    return {&w_q, &w_k, &w_v, &w_o, &ffn1.weight, &ffn1.bias, &ffn2.weight, &ffn2.bias};
}

namespace {

void check_attention_inputs(const Matrix& seq, const Embedding& target_ad,
                            const AttentionParams& params) {
    require(params.head_count == 1, "target_attention: only head_count == 1 is supported");
    const Eigen::Index d = params.dim();
    require(seq.rows() >= 1, "target_attention: empty behavior sequence");
    require(static_cast<std::size_t>(seq.rows()) <= kMaxSequenceLength,
            "target_attention: sequence longer than the 300-event cap");
    require(seq.cols() == d && target_ad.size() == d,
            "target_attention: dim mismatch between sequence, target, and projections");
}

}  // namespace

AttentionResult target_attention_detailed(const Matrix& seq, const Embedding& target_ad,
                                          const AttentionParams& params) {
    check_attention_inputs(seq, target_ad, params);
    const Eigen::Index d = params.dim();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    const Vector q = params.w_q.values * target_ad;
    const Matrix keys = seq * params.w_k.values.transpose();    // N×d, row j = W_k·h_j
    const Matrix values = seq * params.w_v.values.transpose();  // N×d

    Vector scores = keys * q * inv_sqrt_d;
    const double m = scores.maxCoeff();
    Vector weights = (scores.array() - m).exp();
    weights /= weights.sum();

    AttentionResult out;
    out.weights = weights;
    out.attended = values.transpose() * weights;
    const Vector res1 = target_ad + params.w_o.values * out.attended;
    const Vector f = params.ffn2.forward(gelu_vec(params.ffn1.forward(res1)));
    out.output = res1 + f;
    return out;
}

Embedding target_attention(const Matrix& seq, const Embedding& target_ad,
                           const AttentionParams& params) {
    return target_attention_detailed(seq, target_ad, params).output;
}

ad::Var target_attention(ad::Tape& tape, AttentionParams& params, const Matrix& seq,
                         ad::Var target_ad) {
    check_attention_inputs(seq, tape.value(target_ad), params);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.dim()));

    const ad::Var hist = tape.constant(seq);
    const ad::Var q = tape.matmul(tape.param(params.w_q), target_ad);      // d×1
    const ad::Var keys = tape.matmul(hist, tape.param(params.w_k), false, true);    // N×d
    const ad::Var values = tape.matmul(hist, tape.param(params.w_v), false, true);  // N×d
    const ad::Var scores = tape.scale(tape.matmul(q, keys, true, true), inv_sqrt_d);  // 1×N
    const ad::Var weights = tape.row_softmax(scores);
    const ad::Var attended = tape.matmul(weights, values);  // 1×d
    const ad::Var proj = tape.matmul(tape.param(params.w_o), attended, false, true);  // d×1
    const ad::Var res1 = tape.add(target_ad, proj);
    const ad::Var f = params.ffn2.forward(tape, tape.gelu(params.ffn1.forward(tape, res1)));
    return tape.add(res1, f);
}

Embedding avg_interest(std::span<const Embedding> seq) {
    require(!seq.empty(), "avg_interest: empty behavior history");
    const Eigen::Index d = seq.front().size();
    Embedding sum = Embedding::Zero(d);
    for (const Embedding& e : seq) {
        require(e.size() == d, "avg_interest: embedding dim mismatch");
        sum += e;
    }
    return sum / static_cast<double>(seq.size());
}

VelocityFieldParams::VelocityFieldParams(const std::string& name, Eigen::Index d,
                                         Eigen::Index d_g, Rng& rng,
                                         const std::vector<Eigen::Index>& hidden)
    : dim(d),
      guidance_dim(d_g),
      net(name, d + d_g + 2, hidden, d, rng, nn::Activation::Gelu) {
    require(d >= 1, "VelocityFieldParams: dim must be positive");
    require(d_g >= 0, "VelocityFieldParams: guidance_dim must be nonnegative");
}

namespace {

Vector pack_flow_input(const VelocityFieldParams& p, const Vector& e, const Vector& g,
                       double r, double t) {
    require(e.size() == p.dim, "velocity field: state dim mismatch");
    require(g.size() == p.guidance_dim, "velocity field: guidance dim mismatch");
    Vector x(p.dim + p.guidance_dim + 2);
    x.head(p.dim) = e;
    if (p.guidance_dim > 0) x.segment(p.dim, p.guidance_dim) = g;
    x[p.dim + p.guidance_dim] = r;
    x[p.dim + p.guidance_dim + 1] = t;
    return x;
}

}  // namespace

Vector VelocityFieldParams::forward(const Vector& e, const Vector& g, double r,
                                    double t) const {
    return net.forward(pack_flow_input(*this, e, g, r, t));
}

ad::Var VelocityFieldParams::forward(ad::Tape& tape, const Vector& e, const Vector& g,
                                     double r, double t) {
    return net.forward(tape, tape.constant(pack_flow_input(*this, e, g, r, t)));
}

double sample_t_logitnormal(double mu, double sigma, Rng& rng) {
    require(sigma > 0.0, "sample_t_logitnormal: sigma must be positive");
    return logistic(mu + sigma * rng.normal());
}

std::pair<double, double> sample_rt_pair(const FlowConfig& cfg, Rng& rng) {
    double r = sample_t_logitnormal(cfg.mu, cfg.sigma, rng);
    double t = sample_t_logitnormal(cfg.mu, cfg.sigma, rng);
    if (r > t) std::swap(r, t);
    if (rng.uniform() < cfg.p_equal) r = t;
    return {r, t};
}

PathPoint cfm_path(const Embedding& e0, const Embedding& e1, double t) {
    require(e0.size() == e1.size(), "cfm_path: endpoint dim mismatch");
    require(t >= 0.0 && t <= 1.0, "cfm_path: t out of [0, 1]");
    return PathPoint{(1.0 - t) * e0 + t * e1, e1 - e0};
}

Embedding meanflow_target(const VelocityFieldParams& u_net, const Embedding& e_t,
                          const Vector& g, double r, double t, const Embedding& v_target) {
    require(r <= t, "meanflow_target: requires r <= t");
    if (r == t) return v_target;

    const Eigen::Index d = e_t.size();
    Vector x(d + 2);
    x.head(d) = e_t;
    x[d] = r;
    x[d + 1] = t;
    Vector dir = Vector::Zero(d + 2);
    dir.head(d) = v_target;
    dir[d + 1] = 1.0;

    const auto fn = [&](const Vector& xx) {
        return u_net.forward(xx.head(d), g, xx[d], xx[d + 1]);
    };
    const Vector du = ad::jvp(fn, x, dir);
    check(all_finite(du), "meanflow_target: non-finite total derivative");
    return v_target - (t - r) * du;
}

ad::Var meanflow_loss(ad::Tape& tape, VelocityFieldParams& params, const PathPoint& path,
                      const Vector& g, double r, double t) {
    // Target frozen at the current parameter values (stop-gradient).
    const Embedding u_tgt = meanflow_target(params, path.e_t, g, r, t, path.v);
    const ad::Var pred = params.forward(tape, path.e_t, g, r, t);
    return tape.squared_error(pred, tape.constant(u_tgt));
}

std::vector<double> train_velocity_field(VelocityFieldParams& params,
                                         std::span<const FlowSample> pairs,
                                         const FlowConfig& cfg, int epochs, Rng& rng,
                                         const ad::OptimizerConfig& opt) {
    cfg.validate();
    require(!pairs.empty(), "train_velocity_field: empty training pairs");
    require(epochs >= 0, "train_velocity_field: negative epoch count");
    for (const FlowSample& s : pairs) {
        require(s.e_avg.size() == params.dim && s.e_last.size() == params.dim,
                "train_velocity_field: sample dim mismatch");
        require(s.g_ins.size() == params.guidance_dim,
                "train_velocity_field: guidance dim mismatch");
    }

    const auto tensors = params.params();
    ad::Optimizer optimizer(opt);
    const Embedding null_token = Embedding::Zero(params.guidance_dim);

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<double> epoch_losses;
    epoch_losses.reserve(static_cast<std::size_t>(epochs));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t idx : order) {
            const FlowSample& s = pairs[idx];
            const auto [r, t] = sample_rt_pair(cfg, rng);
            const PathPoint path = cfm_path(s.e_avg, s.e_last, t);
            const bool drop = rng.uniform() < cfg.p_drop;
            const Vector& g = drop ? null_token : s.g_ins;

            const double loss = ad::grad(
                [&](ad::Tape& tape) { return meanflow_loss(tape, params, path, g, r, t); },
                tensors);
            check(std::isfinite(loss), "train_velocity_field: loss diverged");
            optimizer.step(tensors);
            epoch_loss += loss;
        }
        epoch_losses.push_back(epoch_loss / static_cast<double>(pairs.size()));
    }
    if (!epoch_losses.empty()) {
        log_info("train_velocity_field: final mean loss " + std::to_string(epoch_losses.back()));
    }
    return epoch_losses;
}

Embedding cfg_combine(const Embedding& u_cond, const Embedding& u_uncond, double omega) {
    require(u_cond.size() == u_uncond.size(), "cfg_combine: dim mismatch");
    require(omega >= 0.0, "cfg_combine: omega must be nonnegative");
    return u_uncond + omega * (u_cond - u_uncond);
}

Embedding euler_integrate(const std::function<Embedding(const Embedding&, double)>& field,
                          const Embedding& e0, int steps) {
    require(steps >= 1, "euler_integrate: steps must be >= 1");
    const double h = 1.0 / static_cast<double>(steps);
    Embedding e = e0;
    for (int k = 0; k < steps; ++k) {
        e += h * field(e, static_cast<double>(k) * h);
        check(all_finite(e), "euler_integrate: non-finite state");
    }
    return e;
}

Embedding euler_integrate(const VelocityFieldParams& u_net, const Embedding& e0,
                          const GuidanceSignal& g, const FlowConfig& cfg) {
    cfg.validate();
    g.validate();
    const bool use_cfg = cfg.omega > 0.0 && !g.null_flag;
    const Embedding null_token = Embedding::Zero(u_net.guidance_dim);
    const auto field = [&](const Embedding& e, double t) -> Embedding {
        const Vector u = u_net.forward(e, g.g_ins, t, t);
        if (!use_cfg) return u;
        return cfg_combine(u, u_net.forward(e, null_token, t, t), cfg.omega);
    };
    return euler_integrate(field, e0, cfg.euler_steps);
}

Embedding one_step_sample(const VelocityFieldParams& u_net, const Embedding& e_avg,
                          const GuidanceSignal& g, const FlowConfig& cfg) {
    cfg.validate();
    g.validate();
    Vector u = u_net.forward(e_avg, g.g_ins, 0.0, 1.0);
    if (cfg.omega > 0.0 && !g.null_flag) {
        const Vector u_uncond =
            u_net.forward(e_avg, Embedding::Zero(u_net.guidance_dim), 0.0, 1.0);
        u = cfg_combine(u, u_uncond, cfg.omega);
    }
    Embedding out = e_avg + u;
    check(all_finite(out), "one_step_sample: non-finite output");
    return out;
}

Embedding pce_fuse(const Embedding& e_global, const Embedding& e_instant) {
    require(e_global.size() > 0 && e_instant.size() > 0, "pce_fuse: missing component");
    return concat({e_global, e_instant});
}

}  // namespace ctxrank::pce
