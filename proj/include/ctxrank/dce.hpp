// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ctxrank/core.hpp"

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ctxrank::dce {

/// Structured knowledge compiled for one dynamic context.
struct KnowledgeSnippet {
    std::string popular_categories;
    std::string delivery_estimates;
    std::string price_sensitivity;
    std::string seasonal_patterns;

    bool empty() const {
        return popular_categories.empty() && delivery_estimates.empty() &&
               price_sensitivity.empty() && seasonal_patterns.empty();
    }
    std::string to_text() const;
    bool operator==(const KnowledgeSnippet&) const = default;
};

/// One cached quadruple: retrieval key, canonical context text, its snippet
/// and the precomputed context-aware embedding.
struct KnowledgeEntry {
    Embedding key;
    std::string context;
    KnowledgeSnippet snippet;
    Embedding embedding;
    std::uint64_t inserted_at = 0;
};

/// Pluggable context encoder: a cheap key embedder and an expensive
/// reasoning path producing pseudo hidden states. Implementations must be
/// deterministic given the same input and seed, and safe for concurrent use.
class ContextEncoder {
public:
    virtual ~ContextEncoder() = default;
    virtual Embedding embed(const std::string& context_text) const = 0;
    virtual HiddenMatrix reason(const std::string& prompt_text) const = 0;
};

/// Default stub: seeded feature hashing for keys, one pseudo hidden row per
/// token for reasoning. reason_delay_ms simulates LLM latency so cache
/// benchmarks have signal.
class HashedContextEncoder final : public ContextEncoder {
public:
    HashedContextEncoder(std::uint64_t seed, Eigen::Index key_dim, Eigen::Index hidden_dim,
                         int reason_delay_ms = 0)
        : seed_(seed), key_dim_(key_dim), hidden_dim_(hidden_dim),
          reason_delay_ms_(reason_delay_ms) {}

    Embedding embed(const std::string& context_text) const override;
    HiddenMatrix reason(const std::string& prompt_text) const override;

    Eigen::Index key_dim() const { return key_dim_; }
    Eigen::Index hidden_dim() const { return hidden_dim_; }
    std::uint64_t seed() const { return seed_; }
    int reason_delay_ms() const { return reason_delay_ms_; }
    /// Not safe while reason() may run concurrently; set before serving.
    void set_reason_delay_ms(int ms) { reason_delay_ms_ = ms; }

private:
    std::uint64_t seed_;
    Eigen::Index key_dim_;
    Eigen::Index hidden_dim_;
    int reason_delay_ms_ = 0;
};

/// Deterministic "key=value|..." rendering with keys sorted lexicographically.
/// "hour" is required; all other features are optional.
std::string canonical_context(const std::map<std::string, std::string>& features);

/// Deterministic prompt embedding the context text and snippet.
std::string format_prompt(const std::string& context_text, const KnowledgeSnippet& snippet);

struct ContextSnippet {
    std::map<std::string, std::string> features;
    KnowledgeSnippet snippet;
};

/// One impression-log line used for weekly rebuilds.
struct LogRecord {
    std::map<std::string, std::string> context;
    std::string category;
    double price = 0.0;
    bool promo = false;
    double delivery_minutes = 0.0;
};

/// Groups log records by canonical context and compiles one snippet per
/// group (top categories, delivery estimate, promo share, holiday pattern).
/// Groups appear in first-occurrence order.
std::vector<ContextSnippet> aggregate_logs(std::span<const LogRecord> logs);

struct KbStatsSnapshot {
    std::uint64_t hits = 0;
    std::uint64_t misses = 0;
    std::uint64_t encoder_calls = 0;  // reason() invocations
    std::uint64_t miss_failures = 0;
};

enum class InferOutcome { Hit, Miss };

struct InferResult {
    Embedding embedding;
    InferOutcome outcome = InferOutcome::Miss;
    std::uint64_t kb_version = 0;
};

struct Retrieved {
    KnowledgeEntry entry;
    double similarity = 0.0;
    std::uint64_t kb_version = 0;
};

/// Threshold-gated semantic cache. Readers work on immutable entry-set
/// snapshots; apply_updates and rebuild swap in a new snapshot atomically, so
/// a query observes exactly one entry-set version. Misses enqueue pending
/// entries that stay invisible until apply_updates.
class KnowledgeBase {
public:
    explicit KnowledgeBase(double tau, Eigen::Index dim = kDefaultDim);

    /// Builds entries in input order; the encoder's reason path runs once per
    /// context. Duplicate canonical contexts are an error.
    static KnowledgeBase build(std::span<const ContextSnippet> contexts,
                               const ContextEncoder& encoder, double tau);

    /// Nearest entry by cosine similarity; ties break toward the smallest
    /// inserted_at. Empty KB yields nullopt (drives the miss path).
    std::optional<Retrieved> retrieve(const Embedding& key_query) const;

    /// Cache protocol: hit iff best similarity is strictly above tau.
    InferResult infer(const std::map<std::string, std::string>& dynamic_features,
                      const ContextEncoder& encoder);

    /// Drains pending into the entry set atomically. Duplicate canonical
    /// contexts keep the earliest entry. Returns the number applied.
    std::size_t apply_updates();

    /// Aggregates logs, builds a fresh entry set and swaps it in atomically;
    /// stats reset. On any failure the old state is untouched.
    void rebuild(std::span<const LogRecord> recent_logs, const ContextEncoder& encoder);

    void save(const std::string& path) const;
    static KnowledgeBase load(const std::string& path);

    double tau() const { return tau_; }
    Eigen::Index dim() const { return dim_; }
    std::size_t entry_count() const { return snapshot()->entries.size(); }
    std::size_t pending_count() const;
    std::uint64_t version() const { return snapshot()->version; }
    std::vector<KnowledgeEntry> entries_copy() const { return snapshot()->entries; }
    KbStatsSnapshot stats() const;

    KnowledgeBase(KnowledgeBase&& other) noexcept;
    KnowledgeBase& operator=(KnowledgeBase&& other) noexcept;
    KnowledgeBase(const KnowledgeBase&) = delete;
    KnowledgeBase& operator=(const KnowledgeBase&) = delete;

private:
    struct EntrySet {
        std::vector<KnowledgeEntry> entries;
        std::uint64_t version = 0;
    };

    std::shared_ptr<const EntrySet> snapshot() const;
    void swap_entries(std::vector<KnowledgeEntry> entries);
    static std::optional<Retrieved> scan(const EntrySet& set, const Embedding& key_query);

    double tau_ = 0.95;
    Eigen::Index dim_ = kDefaultDim;

    mutable std::mutex mu_;  // guards entries_ pointer, pending_, counter_
    std::shared_ptr<const EntrySet> entries_;
    std::vector<KnowledgeEntry> pending_;
    std::uint64_t counter_ = 0;  // next inserted_at

    std::atomic<std::uint64_t> hits_{0};
    std::atomic<std::uint64_t> misses_{0};
    std::atomic<std::uint64_t> encoder_calls_{0};
    std::atomic<std::uint64_t> miss_failures_{0};
};

inline constexpr double kDefaultTau = 0.95;

}  // namespace ctxrank::dce
