// SPDX-License-Identifier: Apache-2.0

#include "ctxrank/cce.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace ctxrank::cce {

namespace {

constexpr std::uint64_t kLineSalt = 0x63636520726f77ull;  // one row per line

void check_distribution(const std::map<std::string, double>& dist, const char* what) {
    if (dist.empty()) return;
    double sum = 0.0;
    for (const auto& [k, v] : dist) {
        require(v >= 0.0, std::string(what) + ": negative mass for " + k);
        sum += v;
    }
    require(std::abs(sum - 1.0) <= 1e-9, std::string(what) + ": does not sum to 1");
}

int hour_bucket(std::int64_t timestamp) {
    return static_cast<int>((timestamp % 86400) / 3600);
}

nlohmann::json label_to_json(const CollectiveLabel& y) {
    return {{"taste", y.taste_distribution},
            {"avg_order_value", y.avg_order_value},
            {"price_sensitivity", y.price_sensitivity},
            {"demographics", y.demographics},
            {"peak_hours", y.peak_hours}};
}

CollectiveLabel label_from_json(const nlohmann::json& j) {
    CollectiveLabel y;
    y.taste_distribution = j.at("taste").get<std::map<std::string, double>>();
    y.avg_order_value = j.at("avg_order_value").get<double>();
    y.price_sensitivity = j.at("price_sensitivity").get<double>();
    y.demographics = j.at("demographics").get<std::map<std::string, double>>();
    y.peak_hours = j.at("peak_hours").get<std::vector<int>>();
    return y;
}

}  // namespace

void CollectiveLabel::validate() const {
    check_distribution(taste_distribution, "CollectiveLabel.taste_distribution");
    check_distribution(demographics, "CollectiveLabel.demographics");
    require(price_sensitivity >= 0.0 && price_sensitivity <= 1.0,
            "CollectiveLabel.price_sensitivity out of [0, 1]");
    for (int h : peak_hours) {
        require(h >= 0 && h < 24, "CollectiveLabel.peak_hours: bucket out of range");
    }
}

void AoiRecord::validate() const {
    require(!aoi_id.empty(), "AoiRecord: empty aoi_id");
    const std::set<std::string> store_set(stores.begin(), stores.end());
    std::int64_t prev = std::numeric_limits<std::int64_t>::min();
    for (const BehaviorEvent& b : behaviors) {
        b.validate();
        require(b.timestamp >= prev, "AoiRecord: behaviors not sorted by timestamp");
        prev = b.timestamp;
        require(store_set.count(b.store_id) > 0,
                "AoiRecord: behavior store " + b.store_id + " not in AOI store list");
    }
    label.validate();
}

HiddenMatrix HashedTextEncoder::encode(const std::string& text) const {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    require(!lines.empty(), "HashedTextEncoder::encode: empty text");
    // Bag-of-tokens per line, so lines sharing tokens ("flavor=c2") land near
    // each other — the similarity structure a real text encoder would give.
    HiddenMatrix h(static_cast<Eigen::Index>(lines.size()), dim_);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const auto tokens = tokenize(lines[i]);
        require(!tokens.empty(), "HashedTextEncoder::encode: blank line content");
        Embedding row = Embedding::Zero(dim_);
        for (const auto& tok : tokens) {
            row += hashed_feature_vector(hash_mix(seed_, kLineSalt), tok, dim_);
        }
        const double norm = row.norm();
        h.row(static_cast<Eigen::Index>(i)) =
            (norm > 0.0 ? Embedding(row / norm) : row).transpose();
    }
    return h;
}

CollectiveLabel build_collective_label(std::span<const BehaviorEvent> behaviors) {
    require(!behaviors.empty(), "build_collective_label: empty behaviors");

    CollectiveLabel y;
    std::map<std::string, std::size_t> flavor_counts;
    std::map<std::string, std::size_t> group_counts;
    std::array<std::size_t, 24> hour_counts{};
    double price_sum = 0.0;
    std::size_t price_n = 0;
    std::size_t promo_n = 0;

    for (const BehaviorEvent& b : behaviors) {
        if (auto it = b.attrs.find("flavor"); it != b.attrs.end()) ++flavor_counts[it->second];
        if (auto it = b.attrs.find("group"); it != b.attrs.end()) ++group_counts[it->second];
        if (auto it = b.attrs.find("price"); it != b.attrs.end()) {
            price_sum += std::stod(it->second);
            ++price_n;
        }
        if (auto it = b.attrs.find("promo"); it != b.attrs.end() && it->second == "1") ++promo_n;
        ++hour_counts[static_cast<std::size_t>(hour_bucket(b.timestamp))];
    }

    const auto normalize = [](const std::map<std::string, std::size_t>& counts) {
        std::map<std::string, double> out;
        std::size_t total = 0;
        for (const auto& [k, n] : counts) total += n;
        for (const auto& [k, n] : counts) {
            out[k] = static_cast<double>(n) / static_cast<double>(total);
        }
        return out;
    };
    y.taste_distribution = normalize(flavor_counts);
    y.demographics = normalize(group_counts);
    y.avg_order_value = price_n ? price_sum / static_cast<double>(price_n) : 0.0;
    y.price_sensitivity = static_cast<double>(promo_n) / static_cast<double>(behaviors.size());

    const double mean_freq = static_cast<double>(behaviors.size()) / 24.0;
    for (int h = 0; h < 24; ++h) {
        if (static_cast<double>(hour_counts[static_cast<std::size_t>(h)]) > mean_freq) {
            y.peak_hours.push_back(h);
        }
    }
    y.validate();
    return y;
}

std::string concat_format(std::span<const BehaviorEvent> behaviors, PromptTemplate tpl) {
    require(!behaviors.empty(), "concat_format: empty behaviors");
    std::vector<const BehaviorEvent*> ordered;
    ordered.reserve(behaviors.size());
    for (const BehaviorEvent& b : behaviors) ordered.push_back(&b);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const BehaviorEvent* a, const BehaviorEvent* b) {
                         return a->timestamp < b->timestamp;
                     });

    std::ostringstream os;
    os << (tpl == PromptTemplate::Train ? "task=summarize_collective_profile"
                                        : "task=describe_recent_interests")
       << '\n';
    for (const BehaviorEvent* b : ordered) {
        os << "behavior item=" << b->item_id << "|store=" << b->store_id
           << "|time=" << b->timestamp;
        for (const auto& [k, v] : b->attrs) os << '|' << k << '=' << v;
        os << '\n';
    }
    return os.str();
}

TrainingSet make_training_set(std::span<const AoiRecord> aois) {
    TrainingSet set;
    for (const AoiRecord& aoi : aois) {
        if (aoi.behaviors.empty()) {
            log_warn("make_training_set: AOI " + aoi.aoi_id + " has no behaviors, skipped");
            ++set.skipped;
            continue;
        }
        set.pairs.push_back(
            {aoi.aoi_id, concat_format(aoi.behaviors, PromptTemplate::Train), aoi.label});
    }
    return set;
}

void save_training_set(const TrainingSet& set, const std::string& path) {
    std::ofstream out(path);
    check(out.good(), "save_training_set: cannot open " + path);
    for (const TrainingPair& p : set.pairs) {
        nlohmann::json j = {{"aoi_id", p.aoi_id}, {"x", p.x}, {"y", label_to_json(p.y)}};
        out << j.dump() << '\n';
    }
    check(out.good(), "save_training_set: write failed for " + path);
}

TrainingSet load_training_set(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "load_training_set: cannot open " + path);
    TrainingSet set;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        set.pairs.push_back({j.at("aoi_id").get<std::string>(), j.at("x").get<std::string>(),
                             label_from_json(j.at("y"))});
    }
    return set;
}

Embedding store_embedding(const TextEncoder& encoder, std::span<const BehaviorEvent> recent) {
    require(!recent.empty(), "store_embedding: empty behavior window");
    return average_pool(encoder.encode(concat_format(recent, PromptTemplate::Infer)));
}

Embedding aoi_embedding(const TextEncoder& encoder, const AoiRecord& aoi) {
    require(!aoi.behaviors.empty(), "aoi_embedding: AOI " + aoi.aoi_id + " has no behaviors");
    return average_pool(encoder.encode(concat_format(aoi.behaviors, PromptTemplate::Infer)));
}

Embedding user_profile(std::span<const std::pair<Embedding, Embedding>> store_embs,
                       double beta) {
    require(!store_embs.empty(), "user_profile: empty store list");
    require(beta >= 0.0 && beta <= 1.0, "user_profile: beta out of [0, 1]");
    const Eigen::Index dim = store_embs.front().first.size();
    Embedding sum = Embedding::Zero(dim);
    for (const auto& [e_store, e_aoi] : store_embs) {
        require(e_store.size() == dim && e_aoi.size() == dim,
                "user_profile: embedding dim mismatch");
        sum += beta * e_store + (1.0 - beta) * e_aoi;
    }
    return sum / static_cast<double>(store_embs.size());
}

void save_embedding_cache(std::span<const CachedEmbedding> rows, const std::string& path) {
    std::ofstream out(path);
    check(out.good(), "save_embedding_cache: cannot open " + path);
    for (const CachedEmbedding& row : rows) {
        require(row.scope == "store" || row.scope == "aoi" || row.scope == "user",
                "save_embedding_cache: unknown scope " + row.scope);
        nlohmann::json j = {
            {"scope", row.scope},
            {"id", row.id},
            {"embedding",
             std::vector<double>(row.embedding.data(), row.embedding.data() + row.embedding.size())}};
        out << j.dump() << '\n';
    }
    check(out.good(), "save_embedding_cache: write failed for " + path);
}

std::vector<CachedEmbedding> load_embedding_cache(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "load_embedding_cache: cannot open " + path);
    std::vector<CachedEmbedding> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        CachedEmbedding row;
        row.scope = j.at("scope").get<std::string>();
        row.id = j.at("id").get<std::string>();
        const auto vals = j.at("embedding").get<std::vector<double>>();
        row.embedding = Embedding(static_cast<Eigen::Index>(vals.size()));
        for (std::size_t i = 0; i < vals.size(); ++i) {
            row.embedding[static_cast<Eigen::Index>(i)] = vals[i];
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace ctxrank::cce
