// SPDX-License-Identifier: Apache-2.0
//
// End-to-end assembly: synthetic world with known true logits, the rank
// model combining all four context branches, two-stage training, AUC /
// RelaImpr evaluation, and the ablation protocol.

#pragma once

#include "ctxrank/autodiff.hpp"
#include "ctxrank/cce.hpp"
#include "ctxrank/core.hpp"
#include "ctxrank/dce.hpp"
#include "ctxrank/gcf.hpp"
#include "ctxrank/nn.hpp"
#include "ctxrank/pce.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ctxrank::pipeline {

/// An AUC delta of 1e-4 is treated as statistically significant and 1e-3 as
/// practically significant; evaluation reports both thresholds.
inline constexpr double kStatSignificantAuc = 1e-4;
inline constexpr double kPracticalSignificantAuc = 1e-3;

inline constexpr int kHourBuckets = 6;  // 4-hour slots

std::string hour_bucket_token(int hour);  // 0..23 → "b0".."b5"

struct WorldConfig {
    std::size_t n_users = 1000;
    std::size_t n_stores = 200;
    std::size_t n_aois = 10;
    std::size_t n_items = 1000;
    std::size_t n_categories = 8;
    std::size_t min_history = 20;
    std::size_t max_history = 40;
    // Cold-start share: light users have too little history for the
    // sequence branches, so the collective branch has to carry them.
    double light_user_fraction = 0.3;
    std::size_t light_min_history = 2;
    std::size_t light_max_history = 5;
    double promo_rate = 0.25;
    double holiday_rate = 0.08;

    // True-logit term scales. The dynamic×category interaction is the
    // context-sensitive signal the contextual branches are meant to capture.
    double bias_ctr = -1.1;
    double scale_age = 0.5;
    double scale_quality = 0.6;
    double scale_dyn = 0.5;
    double scale_inter = 0.9;
    double scale_aoi = 0.7;
    // Per-AOI base demand: constant across a user's candidates, so it never
    // shapes history choices, only realized rates — the collective branch is
    // the cheap way to pick it up.
    double scale_aoi_base = 0.8;
    double scale_pref = 1.0;
    double bias_cvr = -0.9;
    double scale_age_cvr = 0.5;
    double scale_aoi_cvr = 0.4;
    double scale_quality_cvr = 0.7;
    double price_slope_cvr = -0.03;

    void validate() const;
};

struct DynContext {
    int hour = 12;  // 0..23
    std::string weather = "sunny";
    std::string holiday = "none";

    std::map<std::string, std::string> features() const;  // DCE feature map
};

/// Fully specified generator: entity attributes, ground-truth weight
/// tables, per-user behavior histories, and the aggregated context logs the
/// knowledge base is built from. Regeneration from (config, seed) is
/// bit-identical.
struct SyntheticWorld {
    struct User {
        std::string id;
        std::size_t aoi = 0;
        std::string age_band;  // young | mid | senior
        std::string gender;    // f | m
        Vector pref;           // per-category personal taste
    };
    struct Store {
        std::string id;
        std::size_t aoi = 0;
        double quality = 0.0;
        double delivery_base = 30.0;
    };
    struct Item {
        std::string id;
        std::size_t store = 0;
        std::size_t category = 0;
        double price = 0.0;
    };

    WorldConfig config;
    std::uint64_t seed = 0;

    std::vector<User> users;
    std::vector<Store> stores;
    std::vector<Item> items;
    std::vector<std::string> categories;
    std::vector<std::vector<std::size_t>> aoi_items;  // candidate pool per AOI

    std::map<std::string, std::size_t> user_index;
    std::map<std::string, std::size_t> store_index;
    std::map<std::string, std::size_t> item_index;

    // Ground-truth tables.
    Matrix w_age;                  // age band × category
    Matrix w_dyn;                  // weather × hour bucket (candidate-independent)
    std::vector<Matrix> w_inter;   // per weather: hour bucket × category
    Matrix w_aoi;                  // AOI × category
    Vector b_aoi;                  // per-AOI base demand
    Matrix w_age_cvr;              // age band × category
    Matrix w_aoi_cvr;              // AOI × category

    std::vector<BehaviorSequence> histories;  // per user, chronological
    std::vector<dce::LogRecord> logs;         // one per simulated behavior

    double ctr_logit(std::size_t user, std::size_t item, const DynContext& ctx) const;
    double cvr_logit(std::size_t user, std::size_t item, const DynContext& ctx) const;

    std::string price_band(double price) const;
};

SyntheticWorld generate_world(const WorldConfig& config, std::uint64_t seed);

struct Sample {
    ContextBundle context;
    std::string item_id;
    std::string store_id;
    std::string category;
    double price = 0.0;
    int label_click = 0;
    int label_convert = 0;
    double true_ctr_logit = 0.0;  // generator-side truth, kept for oracles
    double true_cvr_logit = 0.0;

    void validate() const;
};

using Dataset = std::vector<Sample>;

Dataset generate_interactions(const SyntheticWorld& world, std::size_t n);
Dataset generate_interactions(const SyntheticWorld& world, std::size_t n, std::uint64_t seed);

/// Scoring-time bundle for (user, item) under the given dynamic features;
/// labels and true logits stay at their defaults. Unknown ids are errors.
Sample assemble_sample(const SyntheticWorld& world, const std::string& user_id,
                       const std::string& item_id,
                       const std::map<std::string, std::string>& dyn_features);

void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

/// 80/20 split on a hash of the user id, so no user appears on both sides.
std::pair<Dataset, Dataset> split_by_user(Dataset data);

// ---------------------------------------------------------------------------

enum class Variant {
    Full,
    NoDce,
    NoCce,
    NoPce,
    NoGcf,
    BaselineAvgpool,
    BaselineTargetAttn,
};

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);
std::vector<Variant> all_variants();

struct ModelConfig {
    Variant variant = Variant::Full;
    Eigen::Index d_static = 16;
    Eigen::Index d_dce = 16;        // knowledge-base embedding dim
    Eigen::Index d_behavior = 16;   // fixed behavior featurizer dim
    Eigen::Index d_collective = 16; // store/AOI/user profile dim
    Eigen::Index d_guidance = 8;
    Eigen::Index d_fused = 32;
    Eigen::Index ffn_hidden = 32;
    std::vector<Eigen::Index> fusion_hidden{64};
    std::vector<Eigen::Index> flow_hidden{64, 64};
    int rank_static = gcf::kRankStatic;
    int rank_dynamic = gcf::kRankDynamic;
    int rank_personalized = gcf::kRankPersonalized;
    int rank_collective = gcf::kRankCollective;
    double tau = dce::kDefaultTau;
    double beta = cce::kDefaultBeta;
    pce::FlowConfig flow;
    std::uint64_t init_seed = 1;

    void validate() const;
};

/// Trainable embedding table addressed by feature token ("age=young", ...).
struct TokenTable {
    ad::ParamTensor table;  // vocab × d
    std::map<std::string, Eigen::Index> index;

    Eigen::Index row_of(const std::string& token) const;
};

/// Deterministic, non-trainable featurizer shared by the behavior encoder
/// and the guidance signal; results are memoized.
class Featurizer {
  public:
    Featurizer() = default;
    Featurizer(std::uint64_t seed, Eigen::Index d_behavior, Eigen::Index d_guidance);
    Featurizer(Featurizer&& other) noexcept;
    Featurizer& operator=(Featurizer&& other) noexcept;

    Embedding item_embedding(const std::string& item_id, const std::string& category) const;
    Embedding event_embedding(const BehaviorEvent& event) const;
    Embedding guidance(const std::map<std::string, std::string>& dyn_features) const;
    /// One row per event, most recent kMaxSequenceLength only.
    Matrix history_matrix(const BehaviorSequence& seq) const;

    Eigen::Index behavior_dim() const { return d_behavior_; }
    Eigen::Index guidance_dim() const { return d_guidance_; }

  private:
    std::uint64_t seed_ = 0;
    Eigen::Index d_behavior_ = 0;
    Eigen::Index d_guidance_ = 0;
    mutable std::mutex mu_;
    mutable std::map<std::string, Embedding> item_cache_;
    mutable std::map<std::string, Embedding> guidance_cache_;
};

struct ScoreResult {
    double pctr = 0.0;
    double pcvr = 0.0;
    bool instant_fallback = false;  // <2 behaviors: e_instant := e_avg
    dce::InferOutcome kb_outcome = dce::InferOutcome::Miss;
    std::uint64_t kb_version = 0;
};

/// The assembled ranker. Owns its world copy (entity attributes, histories)
/// so scoring by id works in serving, plus the knowledge base and the
/// collective embedding caches.
class RankModel {
  public:
    RankModel(SyntheticWorld world, const ModelConfig& config);
    RankModel(RankModel&&) noexcept;
    RankModel& operator=(RankModel&&) noexcept;

    ScoreResult score(const Sample& sample);
    /// All samples must share one dynamic context; the knowledge base is
    /// queried exactly once, so every result carries the same KB version.
    std::vector<ScoreResult> score_batch(std::span<const Sample> samples);
    /// Tape twin of score; pushes pCTR/pCVR nodes and returns them.
    std::pair<ad::Var, ad::Var> score_graph(ad::Tape& tape, const Sample& sample);

    std::vector<ad::ParamTensor*> trainable_params();

    const SyntheticWorld& world() const { return world_; }
    const ModelConfig& model_config() const { return config_; }
    dce::KnowledgeBase& kb() { return kb_; }
    const dce::HashedContextEncoder& kb_encoder() const { return kb_encoder_; }
    dce::HashedContextEncoder& kb_encoder() { return kb_encoder_; }
    pce::VelocityFieldParams& flow_field() { return flow_; }
    const Featurizer& featurizer() const { return featurizer_; }
    std::map<std::string, Embedding> user_profiles() const;

    /// Flow-matching triples (e_avg, e_last, g_ins), one per user with at
    /// least two behaviors.
    std::vector<pce::FlowSample> flow_training_pairs() const;
    /// Rebuild store/AOI/user embeddings and swap the snapshot in atomically;
    /// safe against concurrent score() calls (CCE cache refresh).
    void refresh_collective_cache();
    std::vector<cce::CachedEmbedding> collective_cache_rows() const;
    /// Installs a previously saved cache as the current snapshot.
    void install_collective_cache(std::span<const cce::CachedEmbedding> rows);

    Embedding static_embedding(const Sample& sample) const;
    std::vector<std::string> static_tokens(const Sample& sample) const;
    Embedding collective_embedding(const std::string& user_id) const;
    Embedding dce_embedding(const std::map<std::string, std::string>& dyn_features,
                            dce::InferOutcome* outcome = nullptr,
                            std::uint64_t* version = nullptr);

    friend void save_model(const RankModel& model, const std::string& path);
    friend RankModel load_model(const std::string& path);

  private:
    struct Branches;  // raw embeddings of the four context branches
    /// Immutable collective-embedding snapshot, swapped atomically on refresh.
    struct CollectiveCache {
        std::map<std::string, Embedding> stores;
        std::map<std::string, Embedding> aois;
        std::map<std::string, Embedding> users;
    };

    Branches branches(const Sample& sample, ScoreResult* trace,
                      const dce::InferResult* shared_dce);
    ScoreResult score_one(const Sample& sample, const dce::InferResult* shared_dce);
    Embedding instant_embedding(const Sample& sample, bool* fallback);
    std::shared_ptr<const CollectiveCache> collective_snapshot() const;
    void swap_collective(std::shared_ptr<const CollectiveCache> next);

    SyntheticWorld world_;
    ModelConfig config_;
    Featurizer featurizer_;

    TokenTable static_table_;
    pce::AttentionParams attention_;
    pce::VelocityFieldParams flow_;
    gcf::LoraAdapter ada_s_, ada_d_, ada_p_, ada_c_;
    gcf::FusionHead fusion_;
    nn::Dense ctr_head_, cvr_head_;

    dce::HashedContextEncoder kb_encoder_;
    cce::HashedTextEncoder cce_encoder_;
    dce::KnowledgeBase kb_;
    mutable std::mutex collective_mu_;  // guards the snapshot pointer only
    std::shared_ptr<const CollectiveCache> collective_;
};

struct TrainOptions {
    double lr = 1e-3;       // ranker stage
    double flow_lr = 1e-3;  // velocity-field stage
    int batch = 64;
    int stage1_epochs = 3;
    int stage2_epochs = 2;
    std::uint64_t seed = 1;
    std::string checkpoint_path;  // written before aborting on divergence

    void validate() const;
};

TrainOptions desk_preset();
TrainOptions paper_preset();  // production-scale settings: lr 2e-5, batch 512

struct TrainReport {
    std::vector<double> stage1_epoch_losses;
    std::vector<double> stage2_batch_losses;
};

TrainReport train(RankModel& model, const Dataset& data, const TrainOptions& opt);

struct EvalReport {
    double ctr_auc = 0.0;
    double cvr_auc = 0.0;
    std::size_t n = 0;
    std::size_t n_clicked = 0;
};

EvalReport evaluate(RankModel& model, const Dataset& data);

// ---------------------------------------------------------------------------

/// Probability that a random positive outranks a random negative, ties 1/2.
double auc(std::span<const double> scores, std::span<const int> labels);
/// O(n²) pairwise reference; exact match with auc() is asserted in tests.
double auc_bruteforce(std::span<const double> scores, std::span<const int> labels);

/// ((auc_model − 0.5) / (auc_base − 0.5) − 1) × 100.
double rela_impr(double auc_model, double auc_base);

/// AUC of the generator's true logits against the realized labels.
double bayes_optimal_auc(const SyntheticWorld& world, std::span<const Sample> samples);

struct AblationRow {
    std::string variant;
    double ctr_auc = 0.0;
    double cvr_auc = 0.0;
    double rela_impr_ctr = 0.0;  // vs the full model
    double rela_impr_cvr = 0.0;
};

struct AblationConfig {
    WorldConfig world;
    std::uint64_t world_seed = 7;
    std::size_t n_train = 50000;
    std::size_t n_val = 10000;
    ModelConfig model;
    TrainOptions train;
};

/// Train every requested variant on the identical dataset/budget and report
/// AUCs plus RelaImpr against the full model (trained implicitly if absent).
std::vector<AblationRow> run_ablation(const AblationConfig& config,
                                      std::span<const Variant> variants);

void save_ablation_csv(std::span<const AblationRow> rows, const std::string& path);

void save_model(const RankModel& model, const std::string& path);
RankModel load_model(const std::string& path);

}  // namespace ctxrank::pipeline
