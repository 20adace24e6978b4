// SPDX-License-Identifier: Apache-2.0
//
// Personalized context: target attention over behavior sequences for the
// global interest, and a conditional flow-matching model (mean-velocity
// variant, classifier-free guidance) for the instant interest.

#pragma once

#include "ctxrank/autodiff.hpp"
#include "ctxrank/core.hpp"
#include "ctxrank/nn.hpp"

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ctxrank::pce {

/// Single decoder block: query from the candidate ad, keys/values from the
/// behavior sequence, output projection, residual, position-wise FFN.
struct AttentionParams {
    ad::ParamTensor w_q, w_k, w_v, w_o;  // d×d projections
    nn::Dense ffn1, ffn2;                // d → ffn_hidden → d
    int head_count = 1;

    AttentionParams() = default;
    AttentionParams(const std::string& name, Eigen::Index d, Eigen::Index ffn_hidden, Rng& rng);

    Eigen::Index dim() const { return w_q.values.rows(); }
    std::vector<ad::ParamTensor*> params();
};

struct AttentionResult {
    Embedding output;   // block output, dim d
    Vector weights;     // softmax row over the sequence (sums to 1)
    Embedding attended; // weighted value sum, before the output projection
};

/// seq: one behavior embedding per row (N×d), N ≥ 1, N ≤ kMaxSequenceLength.
AttentionResult target_attention_detailed(const Matrix& seq, const Embedding& target_ad,
                                          const AttentionParams& params);
Embedding target_attention(const Matrix& seq, const Embedding& target_ad,
                           const AttentionParams& params);
/// Tape twin of target_attention for training; seq is an N×d constant.
ad::Var target_attention(ad::Tape& tape, AttentionParams& params, const Matrix& seq,
                         ad::Var target_ad);

/// Element-wise mean of the behavior embeddings (history minus the last
/// interaction at training time).
Embedding avg_interest(std::span<const Embedding> seq);

struct FlowConfig {
    double omega = 2.0;    // classifier-free guidance scale
    double mu = -0.4;      // logit-normal location
    double sigma = 1.2;    // logit-normal scale
    double p_equal = 0.25; // fraction of r == t draws
    double p_drop = 0.1;   // guidance dropout during training
    int euler_steps = 100;

    void validate() const {
        require(omega >= 0.0, "FlowConfig: omega must be nonnegative");
        require(sigma > 0.0, "FlowConfig: sigma must be positive");
        require(p_equal >= 0.0 && p_equal <= 1.0, "FlowConfig: p_equal out of [0, 1]");
        require(p_drop >= 0.0 && p_drop < 1.0, "FlowConfig: p_drop out of [0, 1)");
        require(euler_steps >= 1, "FlowConfig: euler_steps must be >= 1");
    }
};

/// Conditioning vector for the flow; the null token is all-zeros with the
/// flag set and stands for "no guidance" in classifier-free training.
struct GuidanceSignal {
    Embedding g_ins;
    bool null_flag = false;

    void validate() const {
        if (null_flag) {
            require(g_ins.isZero(0.0), "GuidanceSignal: null token must be all zeros");
        }
    }
};

inline GuidanceSignal null_guidance(Eigen::Index guidance_dim) {
    return GuidanceSignal{Embedding::Zero(guidance_dim), true};
}

/// Mean-velocity network u_θ([e; g; r; t]) → d. With r == t this is the
/// instantaneous field.
struct VelocityFieldParams {
    Eigen::Index dim = 0;
    Eigen::Index guidance_dim = 0;
    nn::Mlp net;

    VelocityFieldParams() = default;
    VelocityFieldParams(const std::string& name, Eigen::Index d, Eigen::Index d_g, Rng& rng,
                        const std::vector<Eigen::Index>& hidden = {64, 64});

    Vector forward(const Vector& e, const Vector& g, double r, double t) const;
    ad::Var forward(ad::Tape& tape, const Vector& e, const Vector& g, double r, double t);
    std::vector<ad::ParamTensor*> params() { return net.params(); }
};

/// t = logistic(mu + sigma·z), z ~ N(0,1); support (0,1).
double sample_t_logitnormal(double mu, double sigma, Rng& rng);

/// Two independent logit-normal draws, swapped so t ≥ r, then r := t with
/// probability p_equal.
std::pair<double, double> sample_rt_pair(const FlowConfig& cfg, Rng& rng);

struct PathPoint {
    Embedding e_t;
    Embedding v;  // path velocity e1 − e0
};

/// Linear interpolation path e_t = (1−t)·e0 + t·e1.
PathPoint cfm_path(const Embedding& e0, const Embedding& e1, double t);

/// u_tgt = v − (t−r)·D[u_net](e_t, g, r, t), total derivative taken along
/// (de = v, dr = 0, dt = 1) by finite-difference jvp; exact v when r == t.
/// The result is a constant target (gradient-stopped) for the regression.
Embedding meanflow_target(const VelocityFieldParams& u_net, const Embedding& e_t,
                          const Vector& g, double r, double t, const Embedding& v_target);

struct FlowSample {
    Embedding e_avg;   // path source
    Embedding e_last;  // path target
    Embedding g_ins;   // instant context of the target interaction
};

/// One regression term ‖u_θ(e_t, g, r, t) − u_tgt‖² with u_tgt frozen at the
/// current parameter values.
ad::Var meanflow_loss(ad::Tape& tape, VelocityFieldParams& params, const PathPoint& path,
                      const Vector& g, double r, double t);

/// Adam training loop over single-sample steps; `epochs` full passes in a
/// shuffled order. Returns the mean loss of each epoch (last entry is the
/// final training loss).
std::vector<double> train_velocity_field(VelocityFieldParams& params,
                                         std::span<const FlowSample> pairs,
                                         const FlowConfig& cfg, int epochs, Rng& rng,
                                         const ad::OptimizerConfig& opt = {});

/// u_uncond + ω·(u_cond − u_uncond).
Embedding cfg_combine(const Embedding& u_cond, const Embedding& u_uncond, double omega);

/// K explicit Euler steps of d e/dt = field(e, t) from t=0 to t=1.
Embedding euler_integrate(const std::function<Embedding(const Embedding&, double)>& field,
                          const Embedding& e0, int steps);

/// Euler integration of the trained instantaneous field u_θ(·, g, t, t),
/// CFG-combined against the null token when ω > 0 and g is conditional.
Embedding euler_integrate(const VelocityFieldParams& u_net, const Embedding& e0,
                          const GuidanceSignal& g, const FlowConfig& cfg);

/// e_instant = e_avg + ũ(e_avg, g, 0, 1) with ũ the CFG combination of the
/// conditional and null-token mean velocities.
Embedding one_step_sample(const VelocityFieldParams& u_net, const Embedding& e_avg,
                          const GuidanceSignal& g, const FlowConfig& cfg);

/// e_p = [e_global; e_instant], dim 2d.
Embedding pce_fuse(const Embedding& e_global, const Embedding& e_instant);

}  // namespace ctxrank::pce
