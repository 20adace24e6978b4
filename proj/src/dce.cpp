// SPDX-License-Identifier: Apache-2.0

#include "ctxrank/dce.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

namespace ctxrank::dce {

namespace {

constexpr std::uint64_t kEmbedSalt = 0x6b65795f656d62ull;    // key embedder stream
constexpr std::uint64_t kReasonSalt = 0x726561736f6e21ull;   // reasoning stream
constexpr std::size_t kMaxReasonRows = 256;

std::vector<double> to_std(const Embedding& e) {
    return std::vector<double>(e.data(), e.data() + e.size());
}

Embedding from_std(const std::vector<double>& v) {
    Embedding e(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) e[static_cast<Eigen::Index>(i)] = v[i];
    return e;
}

nlohmann::json snippet_to_json(const KnowledgeSnippet& s) {
    return {{"popular_categories", s.popular_categories},
            {"delivery_estimates", s.delivery_estimates},
            {"price_sensitivity", s.price_sensitivity},
            {"seasonal_patterns", s.seasonal_patterns}};
}

KnowledgeSnippet snippet_from_json(const nlohmann::json& j) {
    KnowledgeSnippet s;
    s.popular_categories = j.at("popular_categories").get<std::string>();
    s.delivery_estimates = j.at("delivery_estimates").get<std::string>();
    s.price_sensitivity = j.at("price_sensitivity").get<std::string>();
    s.seasonal_patterns = j.at("seasonal_patterns").get<std::string>();
    return s;
}

}  // namespace

std::string KnowledgeSnippet::to_text() const {
    std::ostringstream os;
    os << "categories=" << popular_categories << "|delivery=" << delivery_estimates
       << "|price_sens=" << price_sensitivity << "|seasonal=" << seasonal_patterns;
    return os.str();
}

Embedding HashedContextEncoder::embed(const std::string& context_text) const {
    const auto tokens = tokenize(context_text);
    require(!tokens.empty(), "HashedContextEncoder::embed: empty context text");
    Embedding sum = Embedding::Zero(key_dim_);
    for (const auto& tok : tokens) {
        sum += hashed_feature_vector(hash_mix(seed_, kEmbedSalt), tok, key_dim_);
    }
    const double norm = sum.norm();
    check(norm > 0.0, "HashedContextEncoder::embed: degenerate zero-norm key");
    return sum / norm;
}

HiddenMatrix HashedContextEncoder::reason(const std::string& prompt_text) const {
    if (reason_delay_ms_ > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(reason_delay_ms_));
    }
    auto tokens = tokenize(prompt_text);
    if (tokens.empty()) tokens.push_back("<empty>");
    if (tokens.size() > kMaxReasonRows) tokens.resize(kMaxReasonRows);
    HiddenMatrix h(static_cast<Eigen::Index>(tokens.size()), hidden_dim_);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        h.row(static_cast<Eigen::Index>(i)) =
            hashed_feature_vector(hash_mix(seed_, kReasonSalt), tokens[i], hidden_dim_)
                .transpose();
    }
    return h;
}

std::string canonical_context(const std::map<std::string, std::string>& features) {
    require(features.count("hour") > 0, "canonical_context: missing required key 'hour'");
    std::ostringstream os;
    bool first = true;
    for (const auto& [k, v] : features) {  // std::map iterates in sorted key order
        if (!first) os << '|';
        os << k << '=' << v;
        first = false;
    }
    return os.str();
}

std::string format_prompt(const std::string& context_text, const KnowledgeSnippet& snippet) {
    std::ostringstream os;
    os << "given the dynamic context {" << context_text << "} and prior knowledge {"
       << snippet.to_text() << "} describe the expected ordering preferences.";
    return os.str();
}

std::vector<ContextSnippet> aggregate_logs(std::span<const LogRecord> logs) {
    struct Group {
        std::map<std::string, std::string> features;
        std::map<std::string, std::size_t> category_counts;
        double delivery_sum = 0.0;
        std::size_t promo_count = 0;
        std::size_t n = 0;
    };
    std::vector<std::string> order;
    std::map<std::string, Group> groups;
    for (const LogRecord& rec : logs) {
        const std::string key = canonical_context(rec.context);
        auto [it, inserted] = groups.try_emplace(key);
        if (inserted) {
            order.push_back(key);
            it->second.features = rec.context;
        }
        Group& g = it->second;
        if (!rec.category.empty()) ++g.category_counts[rec.category];
        g.delivery_sum += rec.delivery_minutes;
        if (rec.promo) ++g.promo_count;
        ++g.n;
    }

    std::vector<ContextSnippet> out;
    out.reserve(order.size());
    for (const std::string& key : order) {
        const Group& g = groups.at(key);
        ContextSnippet cs;
        cs.features = g.features;

        std::vector<std::pair<std::string, std::size_t>> cats(g.category_counts.begin(),
                                                              g.category_counts.end());
        std::stable_sort(cats.begin(), cats.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        std::ostringstream pc;
        for (std::size_t i = 0; i < cats.size() && i < 3; ++i) {
            if (i) pc << ',';
            pc << cats[i].first;
        }
        cs.snippet.popular_categories = pc.str();

        const double mean_delivery = g.n ? g.delivery_sum / static_cast<double>(g.n) : 0.0;
        const long mid = std::lround(mean_delivery);
        cs.snippet.delivery_estimates =
            std::to_string(std::max(0L, mid - 5)) + "-" + std::to_string(mid + 5) + " min";

        const double promo_frac = g.n ? static_cast<double>(g.promo_count) / g.n : 0.0;
        cs.snippet.price_sensitivity =
            promo_frac < 0.2 ? "low" : (promo_frac < 0.5 ? "medium" : "high");

        auto holiday = g.features.find("holiday");
        cs.snippet.seasonal_patterns =
            (holiday != g.features.end() && !holiday->second.empty() &&
             holiday->second != "none")
                ? "holiday " + holiday->second
                : "regular day";
        out.push_back(std::move(cs));
    }
    return out;
}

KnowledgeBase::KnowledgeBase(double tau, Eigen::Index dim) : tau_(tau), dim_(dim) {
    require(tau >= 0.0 && tau <= 1.0, "KnowledgeBase: tau out of [0, 1]");
    require(dim >= 1, "KnowledgeBase: dim must be positive");
    entries_ = std::make_shared<EntrySet>();
}

KnowledgeBase::KnowledgeBase(KnowledgeBase&& other) noexcept {
    std::lock_guard<std::mutex> lock(other.mu_);
    tau_ = other.tau_;
    dim_ = other.dim_;
    entries_ = std::move(other.entries_);
    pending_ = std::move(other.pending_);
    counter_ = other.counter_;
    hits_ = other.hits_.load();
    misses_ = other.misses_.load();
    encoder_calls_ = other.encoder_calls_.load();
    miss_failures_ = other.miss_failures_.load();
}

KnowledgeBase& KnowledgeBase::operator=(KnowledgeBase&& other) noexcept {
    if (this == &other) return *this;
    std::scoped_lock lock(mu_, other.mu_);
    tau_ = other.tau_;
    dim_ = other.dim_;
    entries_ = std::move(other.entries_);
    pending_ = std::move(other.pending_);
    counter_ = other.counter_;
    hits_ = other.hits_.load();
    misses_ = other.misses_.load();
    encoder_calls_ = other.encoder_calls_.load();
    miss_failures_ = other.miss_failures_.load();
    return *this;
}

std::shared_ptr<const KnowledgeBase::EntrySet> KnowledgeBase::snapshot() const {
    std::lock_guard<std::mutex> lock(mu_);
    return entries_;
}

void KnowledgeBase::swap_entries(std::vector<KnowledgeEntry> entries) {
    std::lock_guard<std::mutex> lock(mu_);
    auto next = std::make_shared<EntrySet>();
    next->entries = std::move(entries);
    next->version = entries_->version + 1;
    entries_ = std::move(next);
}

KnowledgeBase KnowledgeBase::build(std::span<const ContextSnippet> contexts,
                                   const ContextEncoder& encoder, double tau) {
    KnowledgeBase kb(tau);
    std::vector<KnowledgeEntry> entries;
    entries.reserve(contexts.size());
    std::set<std::string> seen;
    for (const ContextSnippet& cs : contexts) {
        KnowledgeEntry e;
        e.context = canonical_context(cs.features);
        require(seen.insert(e.context).second,
                "build_kb: duplicate canonical context: " + e.context);
        e.snippet = cs.snippet;
        e.key = encoder.embed(e.context);
        kb.encoder_calls_.fetch_add(1, std::memory_order_relaxed);
        e.embedding = average_pool(encoder.reason(format_prompt(e.context, e.snippet)));
        e.inserted_at = entries.size();
        entries.push_back(std::move(e));
    }
    if (!entries.empty()) kb.dim_ = entries.front().embedding.size();
    kb.counter_ = entries.size();
    kb.swap_entries(std::move(entries));
    return kb;
}

std::optional<Retrieved> KnowledgeBase::scan(const EntrySet& set, const Embedding& key_query) {
    if (set.entries.empty()) return std::nullopt;
    const KnowledgeEntry* best = nullptr;
    double best_sim = 0.0;
    for (const KnowledgeEntry& e : set.entries) {  // ordered by inserted_at
        const double sim = cosine_sim(key_query, e.key);
        if (!best || sim > best_sim) {
            best = &e;
            best_sim = sim;
        }
    }
    return Retrieved{*best, best_sim, set.version};
}

std::optional<Retrieved> KnowledgeBase::retrieve(const Embedding& key_query) const {
    return scan(*snapshot(), key_query);
}

InferResult KnowledgeBase::infer(const std::map<std::string, std::string>& dynamic_features,
                                 const ContextEncoder& encoder) {
    const std::string context = canonical_context(dynamic_features);
    const Embedding key_query = encoder.embed(context);
    const auto set = snapshot();
    const auto best = scan(*set, key_query);

    if (best && best->similarity > tau_) {
        hits_.fetch_add(1, std::memory_order_relaxed);
        return InferResult{best->entry.embedding, InferOutcome::Hit, set->version};
    }

    const KnowledgeSnippet snippet = best ? best->entry.snippet : KnowledgeSnippet{};
    Embedding generated;
    try {
        encoder_calls_.fetch_add(1, std::memory_order_relaxed);
        generated = average_pool(encoder.reason(format_prompt(context, snippet)));
    } catch (...) {
        miss_failures_.fetch_add(1, std::memory_order_relaxed);
        throw;
    }

    {
        std::lock_guard<std::mutex> lock(mu_);
        KnowledgeEntry e;
        e.key = key_query;
        e.context = context;
        e.snippet = snippet;
        e.embedding = generated;
        e.inserted_at = counter_++;
        pending_.push_back(std::move(e));
    }
    misses_.fetch_add(1, std::memory_order_relaxed);
    return InferResult{generated, InferOutcome::Miss, set->version};
}

std::size_t KnowledgeBase::apply_updates() {
    std::lock_guard<std::mutex> lock(mu_);
    if (pending_.empty()) return 0;

    std::set<std::string> present;
    for (const KnowledgeEntry& e : entries_->entries) present.insert(e.context);

    auto next = std::make_shared<EntrySet>();
    next->entries = entries_->entries;
    std::size_t applied = 0;
    for (KnowledgeEntry& e : pending_) {
        if (!present.insert(e.context).second) continue;  // earliest wins
        next->entries.push_back(std::move(e));
        ++applied;
    }
    pending_.clear();
    next->version = entries_->version + 1;
    entries_ = std::move(next);
    return applied;
}

void KnowledgeBase::rebuild(std::span<const LogRecord> recent_logs,
                            const ContextEncoder& encoder) {
    const auto contexts = aggregate_logs(recent_logs);

    // Build the fresh entry set before touching shared state.
    std::vector<KnowledgeEntry> entries;
    entries.reserve(contexts.size());
    std::set<std::string> seen;
    for (const ContextSnippet& cs : contexts) {
        KnowledgeEntry e;
        e.context = canonical_context(cs.features);
        require(seen.insert(e.context).second,
                "rebuild: duplicate canonical context: " + e.context);
        e.snippet = cs.snippet;
        e.key = encoder.embed(e.context);
        e.embedding = average_pool(encoder.reason(format_prompt(e.context, e.snippet)));
        e.inserted_at = entries.size();
        entries.push_back(std::move(e));
    }

    {
        std::lock_guard<std::mutex> lock(mu_);
        auto next = std::make_shared<EntrySet>();
        next->entries = std::move(entries);
        next->version = entries_->version + 1;
        if (!next->entries.empty()) dim_ = next->entries.front().embedding.size();
        counter_ = next->entries.size();
        entries_ = std::move(next);
        pending_.clear();
    }
    hits_.store(0);
    misses_.store(0);
    encoder_calls_.store(0);
    miss_failures_.store(0);
}

std::size_t KnowledgeBase::pending_count() const {
    std::lock_guard<std::mutex> lock(mu_);
    return pending_.size();
}

KbStatsSnapshot KnowledgeBase::stats() const {
    KbStatsSnapshot s;
    s.hits = hits_.load();
    s.misses = misses_.load();
    s.encoder_calls = encoder_calls_.load();
    s.miss_failures = miss_failures_.load();
    return s;
}

void KnowledgeBase::save(const std::string& path) const {
    const auto set = snapshot();
    std::ofstream out(path);
    check(out.good(), "KnowledgeBase::save: cannot open " + path);
    nlohmann::json header = {{"version", 1}, {"dim", dim_}, {"tau", tau_}};
    out << header.dump() << '\n';
    for (const KnowledgeEntry& e : set->entries) {
        nlohmann::json j = {{"key", to_std(e.key)},
                            {"context", e.context},
                            {"snippet", snippet_to_json(e.snippet)},
                            {"embedding", to_std(e.embedding)},
                            {"inserted_at", e.inserted_at}};
        out << j.dump() << '\n';
    }
    check(out.good(), "KnowledgeBase::save: write failed for " + path);
}

KnowledgeBase KnowledgeBase::load(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "KnowledgeBase::load: cannot open " + path);
    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "KnowledgeBase::load: missing header");
    const auto header = nlohmann::json::parse(line);
    check(header.at("version").get<int>() == 1, "KnowledgeBase::load: unsupported version");

    KnowledgeBase kb(header.at("tau").get<double>(), header.at("dim").get<Eigen::Index>());
    std::vector<KnowledgeEntry> entries;
    std::uint64_t max_inserted = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        KnowledgeEntry e;
        e.key = from_std(j.at("key").get<std::vector<double>>());
        e.context = j.at("context").get<std::string>();
        e.snippet = snippet_from_json(j.at("snippet"));
        e.embedding = from_std(j.at("embedding").get<std::vector<double>>());
        e.inserted_at = j.at("inserted_at").get<std::uint64_t>();
        max_inserted = std::max(max_inserted, e.inserted_at + 1);
        entries.push_back(std::move(e));
    }
    kb.counter_ = max_inserted;
    kb.swap_entries(std::move(entries));
    return kb;
}

}  // namespace ctxrank::dce
