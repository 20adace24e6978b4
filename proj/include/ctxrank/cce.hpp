// SPDX-License-Identifier: Apache-2.0
//
// Collective context: AOI-level training samples, text rendering of behavior
// histories, and multi-granularity embeddings (store, AOI, user profile).

#pragma once

#include "ctxrank/core.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace ctxrank::cce {

inline constexpr double kDefaultBeta = 0.5;
/// Events per store kept for the inference-time rendering window.
inline constexpr std::size_t kStoreRecentWindow = 50;

/// Aggregated supervision target for one AOI.
struct CollectiveLabel {
    std::map<std::string, double> taste_distribution;
    double avg_order_value = 0.0;
    double price_sensitivity = 0.0;  // fraction of promotion-tagged clicks
    std::map<std::string, double> demographics;
    std::vector<int> peak_hours;  // hour buckets above mean frequency

    void validate() const;
    bool operator==(const CollectiveLabel&) const = default;
};

struct AoiRecord {
    std::string aoi_id;
    std::vector<std::string> stores;
    BehaviorSequence behaviors;  // chronological, 60-day window
    CollectiveLabel label;

    void validate() const;
};

/// Pluggable text → hidden-state encoder. Implementations must be
/// deterministic for a fixed seed and safe for concurrent reads.
class TextEncoder {
  public:
    virtual ~TextEncoder() = default;
    /// One hidden row per rendered line of `text`.
    virtual HiddenMatrix encode(const std::string& text) const = 0;
};

/// Feature-hash stand-in for a fine-tuned language model: each line of the
/// rendered text maps to one pseudo-hidden row.
class HashedTextEncoder final : public TextEncoder {
  public:
    explicit HashedTextEncoder(std::uint64_t seed, Eigen::Index dim = kDefaultDim)
        : seed_(seed), dim_(dim) {
        require(dim >= 1, "HashedTextEncoder: dim must be positive");
    }

    HiddenMatrix encode(const std::string& text) const override;
    Eigen::Index dim() const { return dim_; }

  private:
    std::uint64_t seed_;
    Eigen::Index dim_;
};

enum class PromptTemplate { Train, Infer };

/// Aggregate behaviors into the collective label: normalized flavor counts,
/// mean order value, promotion fraction, normalized demographic groups, and
/// peak hour buckets (frequency strictly above the 24-bucket mean).
CollectiveLabel build_collective_label(std::span<const BehaviorEvent> behaviors);

/// Deterministic chronological rendering, one behavior per line, wrapped in
/// the train or infer prompt template. Input order does not matter; segments
/// are emitted in timestamp order (stable for ties).
std::string concat_format(std::span<const BehaviorEvent> behaviors, PromptTemplate tpl);

struct TrainingPair {
    std::string aoi_id;
    std::string x;
    CollectiveLabel y;
};

struct TrainingSet {
    std::vector<TrainingPair> pairs;
    std::size_t skipped = 0;  // AOIs dropped for having no behaviors
};

/// One (x_a, y_a) pair per AOI with behaviors; empty AOIs are skipped and
/// counted. Pairs are consumed by an external fine-tuner.
TrainingSet make_training_set(std::span<const AoiRecord> aois);

void save_training_set(const TrainingSet& set, const std::string& path);
TrainingSet load_training_set(const std::string& path);

/// average_pool(encode(concat_format(recent, infer))).
Embedding store_embedding(const TextEncoder& encoder, std::span<const BehaviorEvent> recent);

/// Same pipeline over the AOI's complete behavior set.
Embedding aoi_embedding(const TextEncoder& encoder, const AoiRecord& aoi);

/// e_u = (1/|S_u|) Σ_s (β·e_s^store + (1−β)·e_{A(s)}^AOI); pairs are
/// (store embedding, owning-AOI embedding).
Embedding user_profile(std::span<const std::pair<Embedding, Embedding>> store_embs,
                       double beta = kDefaultBeta);

/// Row in the serving-side embedding cache file.
struct CachedEmbedding {
    std::string scope;  // "store" | "aoi" | "user"
    std::string id;
    Embedding embedding;
};

void save_embedding_cache(std::span<const CachedEmbedding> rows, const std::string& path);
std::vector<CachedEmbedding> load_embedding_cache(const std::string& path);

}  // namespace ctxrank::cce
