// SPDX-License-Identifier: Apache-2.0

#include "ctxrank/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace ctxrank::pipeline {

namespace {

constexpr std::uint64_t kWorldSalt = 0x776f726c64ull;
constexpr std::uint64_t kDataSalt = 0x73616d706c6573ull;
constexpr std::uint64_t kInitSalt = 0x696e6974ull;
constexpr std::uint64_t kFeatSalt = 0x66656174ull;
constexpr std::uint64_t kKbSalt = 0x6b62656e63ull;
constexpr std::uint64_t kCceSalt = 0x636365656e63ull;
constexpr std::uint64_t kItemSalt = 0x6974656dull;
constexpr std::uint64_t kCatSalt = 0x636174ull;
constexpr std::uint64_t kGuideSalt = 0x6775696465ull;
constexpr std::uint64_t kStage1Salt = 0x73746167653161ull;
constexpr std::uint64_t kStage2Salt = 0x73746167653262ull;
constexpr std::uint64_t kAblDataSalt = 0x61626c64617461ull;

const std::array<std::string, 3> kAgeBands = {"young", "mid", "senior"};
const std::array<std::string, 2> kGenders = {"f", "m"};
const std::array<std::string, 4> kWeathers = {"sunny", "rain", "snow", "hot"};

std::size_t weather_index(const std::string& w) {
    for (std::size_t i = 0; i < kWeathers.size(); ++i) {
        if (kWeathers[i] == w) return i;
    }
    throw InvalidArgument("unknown weather token: " + w);
}

std::size_t age_index(const std::string& band) {
    for (std::size_t i = 0; i < kAgeBands.size(); ++i) {
        if (kAgeBands[i] == band) return i;
    }
    throw InvalidArgument("unknown age band: " + band);
}

std::string format_price(double p) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", p);
    return buf;
}

/// Users order mostly around lunch and dinner.
int sample_hour(Rng& rng) {
    const double r = rng.uniform();
    if (r < 0.35) return 11 + static_cast<int>(rng.index(3));
    if (r < 0.75) return 18 + static_cast<int>(rng.index(3));
    return static_cast<int>(rng.index(24));
}

double gumbel(Rng& rng) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    return -std::log(-std::log(u));
}

DynContext dyn_from_features(const std::map<std::string, std::string>& f) {
    DynContext ctx;
    const std::string hour = f.at("hour");
    require(hour.size() >= 2 && hour[0] == 'b', "dynamic features: malformed hour bucket");
    ctx.hour = std::stoi(hour.substr(1)) * (24 / kHourBuckets) + 1;
    ctx.weather = f.at("weather");
    ctx.holiday = f.count("holiday") ? f.at("holiday") : "none";
    return ctx;
}

struct VariantSpec {
    bool dce = false;
    bool cce = false;
    bool attention = false;
    bool flow = false;
    bool adapters = false;
    bool fusion_mlp = false;
};

VariantSpec spec_of(Variant v) {
    switch (v) {
        case Variant::Full:
            return {true, true, true, true, true, true};
        case Variant::NoDce:
            return {false, true, true, true, true, true};
        case Variant::NoCce:
            return {true, false, true, true, true, true};
        case Variant::NoPce:
            return {true, true, false, false, true, true};
        case Variant::NoGcf:
            return {true, true, true, true, false, false};
        case Variant::BaselineAvgpool:
            return {false, false, false, false, false, true};
        case Variant::BaselineTargetAttn:
            return {false, false, true, false, false, true};
    }
    throw InvalidArgument("unknown variant");
}

Eigen::Index personalized_width(const ModelConfig& c) {
    const VariantSpec spec = spec_of(c.variant);
    return (spec.attention && spec.flow) ? 2 * c.d_behavior : c.d_behavior;
}

}  // namespace

std::string hour_bucket_token(int hour) {
    require(hour >= 0 && hour < 24, "hour_bucket_token: hour out of range");
    return "b" + std::to_string(hour / (24 / kHourBuckets));
}

void WorldConfig::validate() const {
    require(n_users > 0 && n_stores > 0 && n_aois > 0 && n_items > 0 && n_categories > 0,
            "WorldConfig: counts must be positive");
    require(n_stores >= n_aois, "WorldConfig: need at least one store per AOI");
    require(n_items >= n_stores, "WorldConfig: need at least one item per store");
    require(min_history >= 1 && max_history >= min_history,
            "WorldConfig: bad history window");
    require(light_min_history >= 1 && light_max_history >= light_min_history,
            "WorldConfig: bad light-user history window");
    require(light_user_fraction >= 0.0 && light_user_fraction <= 1.0,
            "WorldConfig: light_user_fraction out of [0, 1]");
    require(promo_rate >= 0.0 && promo_rate <= 1.0 && holiday_rate >= 0.0 &&
                holiday_rate <= 1.0,
            "WorldConfig: rates out of [0, 1]");
}

std::map<std::string, std::string> DynContext::features() const {
    return {{"hour", hour_bucket_token(hour)}, {"weather", weather}, {"holiday", holiday}};
}

std::string SyntheticWorld::price_band(double price) const {
    if (price < 15.0) return "low";
    if (price < 30.0) return "mid";
    return "high";
}

double SyntheticWorld::ctr_logit(std::size_t user, std::size_t item,
                                 const DynContext& ctx) const {
    const User& u = users.at(user);
    const Item& it = items.at(item);
    const Store& st = stores.at(it.store);
    const auto wi = static_cast<Eigen::Index>(weather_index(ctx.weather));
    const auto hb = static_cast<Eigen::Index>(ctx.hour / (24 / kHourBuckets));
    const auto cat = static_cast<Eigen::Index>(it.category);
    const WorldConfig& c = config;

    double z = c.bias_ctr;
    z += c.scale_age * w_age(static_cast<Eigen::Index>(age_index(u.age_band)), cat);
    z += c.scale_quality * st.quality;
    z += c.scale_dyn * w_dyn(wi, hb);
    z += c.scale_inter * w_inter[static_cast<std::size_t>(wi)](hb, cat);
    z += c.scale_aoi * w_aoi(static_cast<Eigen::Index>(u.aoi), cat);
    z += c.scale_aoi_base * b_aoi(static_cast<Eigen::Index>(u.aoi));
    z += c.scale_pref * u.pref[cat];
    if (ctx.holiday == "festival") z += 0.2;
    return z;
}

double SyntheticWorld::cvr_logit(std::size_t user, std::size_t item,
                                 const DynContext&) const {
    const User& u = users.at(user);
    const Item& it = items.at(item);
    const Store& st = stores.at(it.store);
    const auto cat = static_cast<Eigen::Index>(it.category);
    const WorldConfig& c = config;

    double z = c.bias_cvr;
    z += c.scale_age_cvr * w_age_cvr(static_cast<Eigen::Index>(age_index(u.age_band)), cat);
    z += c.scale_quality_cvr * st.quality;
    z += c.scale_aoi_cvr * w_aoi_cvr(static_cast<Eigen::Index>(u.aoi), cat);
    z += c.price_slope_cvr * (it.price - 25.0);
    return z;
}

SyntheticWorld generate_world(const WorldConfig& config, std::uint64_t seed) {
    config.validate();
    SyntheticWorld w;
    w.config = config;
    w.seed = seed;
    Rng rng(hash_mix(seed, kWorldSalt));

    w.categories.reserve(config.n_categories);
    for (std::size_t c = 0; c < config.n_categories; ++c) {
        w.categories.push_back("c" + std::to_string(c));
    }

    const auto n_cat = static_cast<Eigen::Index>(config.n_categories);
    w.users.reserve(config.n_users);
    for (std::size_t i = 0; i < config.n_users; ++i) {
        SyntheticWorld::User u;
        u.id = "u" + std::to_string(i);
        u.aoi = i % config.n_aois;
        u.age_band = kAgeBands[rng.index(kAgeBands.size())];
        u.gender = kGenders[rng.index(kGenders.size())];
        u.pref = rng.normal_vector(n_cat);
        w.user_index[u.id] = i;
        w.users.push_back(std::move(u));
    }

    w.stores.reserve(config.n_stores);
    for (std::size_t i = 0; i < config.n_stores; ++i) {
        SyntheticWorld::Store s;
        s.id = "s" + std::to_string(i);
        s.aoi = i % config.n_aois;  // every store lands in exactly one AOI
        s.quality = rng.normal();
        s.delivery_base = 20.0 + 20.0 * rng.uniform();
        w.store_index[s.id] = i;
        w.stores.push_back(std::move(s));
    }

    w.aoi_items.resize(config.n_aois);
    w.items.reserve(config.n_items);
    for (std::size_t i = 0; i < config.n_items; ++i) {
        SyntheticWorld::Item it;
        it.id = "i" + std::to_string(i);
        it.store = i % config.n_stores;
        it.category = rng.index(config.n_categories);
        it.price = 5.0 + 45.0 * rng.uniform();
        w.item_index[it.id] = i;
        w.aoi_items[w.stores[it.store].aoi].push_back(i);
        w.items.push_back(std::move(it));
    }

    const auto n_hb = static_cast<Eigen::Index>(kHourBuckets);
    const auto n_weather = static_cast<Eigen::Index>(kWeathers.size());
    const auto n_age = static_cast<Eigen::Index>(kAgeBands.size());
    const auto n_aoi = static_cast<Eigen::Index>(config.n_aois);
    const auto normal_matrix = [&rng](Eigen::Index r, Eigen::Index c) {
        Matrix m(r, c);
        for (Eigen::Index i = 0; i < r; ++i) {
            for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
        }
        return m;
    };
    w.w_age = normal_matrix(n_age, n_cat);
    w.w_dyn = normal_matrix(n_weather, n_hb);
    for (Eigen::Index wi = 0; wi < n_weather; ++wi) w.w_inter.push_back(normal_matrix(n_hb, n_cat));
    w.w_aoi = normal_matrix(n_aoi, n_cat);
    w.b_aoi = rng.normal_vector(n_aoi);
    w.w_age_cvr = normal_matrix(n_age, n_cat);
    w.w_aoi_cvr = normal_matrix(n_aoi, n_cat);

    // Behavior histories: each event picks the softmax-best candidate in the
    // user's AOI under that event's context (Gumbel-max sampling), so the
    // histories actually carry the personal-taste and context signals.
    w.histories.resize(config.n_users);
    for (std::size_t ui = 0; ui < config.n_users; ++ui) {
        const SyntheticWorld::User& user = w.users[ui];
        const auto& pool = w.aoi_items[user.aoi];
        require(!pool.empty(), "generate_world: AOI without items");
        const bool light = rng.bernoulli(config.light_user_fraction);
        const std::size_t lo = light ? config.light_min_history : config.min_history;
        const std::size_t hi = light ? config.light_max_history : config.max_history;
        const std::size_t len = lo + rng.index(hi - lo + 1);
        BehaviorSequence& hist = w.histories[ui];
        hist.reserve(len);
        for (std::size_t j = 0; j < len; ++j) {
            DynContext ctx;
            ctx.hour = sample_hour(rng);
            ctx.weather = kWeathers[rng.index(kWeathers.size())];
            ctx.holiday = rng.bernoulli(config.holiday_rate) ? "festival" : "none";

            const std::size_t n_cand = std::min<std::size_t>(30, pool.size());
            std::size_t best = pool[rng.index(pool.size())];
            double best_score = -1e300;
            for (std::size_t k = 0; k < n_cand; ++k) {
                const std::size_t cand = pool[rng.index(pool.size())];
                const double s = w.ctr_logit(ui, cand, ctx) + gumbel(rng);
                if (s > best_score) {
                    best_score = s;
                    best = cand;
                }
            }

            const SyntheticWorld::Item& item = w.items[best];
            const SyntheticWorld::Store& store = w.stores[item.store];
            BehaviorEvent ev;
            ev.item_id = item.id;
            ev.store_id = store.id;
            ev.aoi_id = "a" + std::to_string(store.aoi);
            ev.timestamp = static_cast<std::int64_t>(j + 1) * 86400 + ctx.hour * 3600 +
                           static_cast<std::int64_t>(rng.index(3600));
            ev.attrs["flavor"] = w.categories[item.category];
            ev.attrs["price"] = format_price(item.price);
            ev.attrs["promo"] = rng.bernoulli(config.promo_rate) ? "1" : "0";
            ev.attrs["group"] = user.gender + "_" + user.age_band;
            ev.attrs["hour"] = hour_bucket_token(ctx.hour);
            ev.attrs["weather"] = ctx.weather;
            ev.attrs["holiday"] = ctx.holiday;

            dce::LogRecord log;
            log.context = ctx.features();
            log.category = w.categories[item.category];
            log.price = item.price;
            log.promo = ev.attrs["promo"] == "1";
            log.delivery_minutes = store.delivery_base + 10.0 * rng.uniform();
            w.logs.push_back(std::move(log));

            hist.push_back(std::move(ev));
        }
    }
    return w;
}

void Sample::validate() const {
    context.validate();
    require(label_click == 0 || label_click == 1, "Sample: label_click not in {0,1}");
    require(label_convert == 0 || label_convert == 1, "Sample: label_convert not in {0,1}");
    require(label_convert <= label_click, "Sample: conversion without click");
    require(!item_id.empty() && !store_id.empty(), "Sample: missing candidate ids");
}

Sample assemble_sample(const SyntheticWorld& world, const std::string& user_id,
                       const std::string& item_id,
                       const std::map<std::string, std::string>& dyn_features) {
    const auto uit = world.user_index.find(user_id);
    require(uit != world.user_index.end(), "unknown user: " + user_id);
    const auto iit = world.item_index.find(item_id);
    require(iit != world.item_index.end(), "unknown item: " + item_id);
    const SyntheticWorld::User& user = world.users[uit->second];
    const SyntheticWorld::Item& item = world.items[iit->second];
    const SyntheticWorld::Store& store = world.stores[item.store];

    Sample s;
    s.item_id = item.id;
    s.store_id = store.id;
    s.category = world.categories[item.category];
    s.price = item.price;

    // Store identity deliberately stays out of the static features: store and
    // location effects reach the model through the collective embeddings, not
    // through a per-store trainable row.
    s.context.static_features = {{"age", user.age_band},
                                 {"gender", user.gender},
                                 {"cat", s.category},
                                 {"price", world.price_band(item.price)}};
    s.context.dynamic_features = dyn_features;

    const BehaviorSequence& hist = world.histories[uit->second];
    require(!hist.empty(), "assemble_sample: user has no behavior history");
    const std::size_t keep = std::min<std::size_t>(hist.size(), kMaxSequenceLength);
    s.context.behavior_sequence.assign(hist.end() - static_cast<std::ptrdiff_t>(keep),
                                       hist.end());

    s.context.collective_refs.user_id = user.id;
    s.context.collective_refs.aoi_id = "a" + std::to_string(user.aoi);
    std::set<std::string> store_set;
    for (const BehaviorEvent& ev : s.context.behavior_sequence) store_set.insert(ev.store_id);
    s.context.collective_refs.store_ids.assign(store_set.begin(), store_set.end());
    return s;
}

Dataset generate_interactions(const SyntheticWorld& world, std::size_t n) {
    return generate_interactions(world, n, hash_mix(world.seed, kDataSalt));
}

Dataset generate_interactions(const SyntheticWorld& world, std::size_t n,
                              std::uint64_t seed) {
    Rng rng(hash_mix(seed, kDataSalt));
    Dataset data;
    data.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t ui = rng.index(world.config.n_users);
        const SyntheticWorld::User& user = world.users[ui];

        DynContext ctx;
        ctx.hour = sample_hour(rng);
        ctx.weather = kWeathers[rng.index(kWeathers.size())];
        ctx.holiday = rng.bernoulli(world.config.holiday_rate) ? "festival" : "none";

        const auto& pool = world.aoi_items[user.aoi];
        const std::size_t ii = pool[rng.index(pool.size())];
        const SyntheticWorld::Item& item = world.items[ii];

        const double zc = world.ctr_logit(ui, ii, ctx);
        const double zv = world.cvr_logit(ui, ii, ctx);
        const int click = rng.bernoulli(sigmoid(zc)) ? 1 : 0;
        const int convert = (click == 1 && rng.bernoulli(sigmoid(zv))) ? 1 : 0;

        Sample s = assemble_sample(world, user.id, item.id, ctx.features());
        s.true_ctr_logit = zc;
        s.true_cvr_logit = zv;
        s.label_click = click;
        s.label_convert = convert;

        s.validate();
        data.push_back(std::move(s));
    }
    return data;
}

namespace {

nlohmann::json sample_to_json(const Sample& s) {
    nlohmann::json behaviors = nlohmann::json::array();
    for (const BehaviorEvent& ev : s.context.behavior_sequence) {
        behaviors.push_back({{"item", ev.item_id},
                             {"store", ev.store_id},
                             {"aoi", ev.aoi_id},
                             {"ts", ev.timestamp},
                             {"attrs", ev.attrs}});
    }
    return {{"user_id", s.context.collective_refs.user_id},
            {"aoi_id", s.context.collective_refs.aoi_id},
            {"store_ids", s.context.collective_refs.store_ids},
            {"static", s.context.static_features},
            {"dynamic", s.context.dynamic_features},
            {"behaviors", std::move(behaviors)},
            {"item_id", s.item_id},
            {"store_id", s.store_id},
            {"category", s.category},
            {"price", s.price},
            {"label_click", s.label_click},
            {"label_convert", s.label_convert},
            {"true_logits", std::array<double, 2>{s.true_ctr_logit, s.true_cvr_logit}}};
}

Sample sample_from_json(const nlohmann::json& j) {
    Sample s;
    s.context.collective_refs.user_id = j.at("user_id").get<std::string>();
    s.context.collective_refs.aoi_id = j.at("aoi_id").get<std::string>();
    s.context.collective_refs.store_ids = j.at("store_ids").get<std::vector<std::string>>();
    s.context.static_features = j.at("static").get<std::map<std::string, std::string>>();
    s.context.dynamic_features = j.at("dynamic").get<std::map<std::string, std::string>>();
    for (const auto& b : j.at("behaviors")) {
        BehaviorEvent ev;
        ev.item_id = b.at("item").get<std::string>();
        ev.store_id = b.at("store").get<std::string>();
        ev.aoi_id = b.at("aoi").get<std::string>();
        ev.timestamp = b.at("ts").get<std::int64_t>();
        ev.attrs = b.at("attrs").get<std::map<std::string, std::string>>();
        s.context.behavior_sequence.push_back(std::move(ev));
    }
    s.item_id = j.at("item_id").get<std::string>();
    s.store_id = j.at("store_id").get<std::string>();
    s.category = j.at("category").get<std::string>();
    s.price = j.at("price").get<double>();
    s.label_click = j.at("label_click").get<int>();
    s.label_convert = j.at("label_convert").get<int>();
    const auto logits = j.at("true_logits").get<std::array<double, 2>>();
    s.true_ctr_logit = logits[0];
    s.true_cvr_logit = logits[1];
    s.validate();
    return s;
}

}  // namespace

void save_dataset(const Dataset& data, const std::string& path) {
    std::ofstream out(path);
    check(out.good(), "save_dataset: cannot open " + path);
    nlohmann::json header = {
        {"format", "ctxrank-dataset"}, {"version", 1}, {"count", data.size()}};
    out << header.dump() << '\n';
    for (const Sample& s : data) out << sample_to_json(s).dump() << '\n';
    check(out.good(), "save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "load_dataset: cannot open " + path);
    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "load_dataset: missing header");
    const auto header = nlohmann::json::parse(line);
    check(header.at("format").get<std::string>() == "ctxrank-dataset" &&
              header.at("version").get<int>() == 1,
          "load_dataset: unsupported file format");
    Dataset data;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        data.push_back(sample_from_json(nlohmann::json::parse(line)));
    }
    check(data.size() == header.at("count").get<std::size_t>(),
          "load_dataset: row count does not match header");
    return data;
}

std::pair<Dataset, Dataset> split_by_user(Dataset data) {
    Dataset train, val;
    for (Sample& s : data) {
        if (fnv1a64(s.context.collective_refs.user_id) % 5 == 4) {
            val.push_back(std::move(s));
        } else {
            train.push_back(std::move(s));
        }
    }
    return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::NoDce: return "no_dce";
        case Variant::NoCce: return "no_cce";
        case Variant::NoPce: return "no_pce";
        case Variant::NoGcf: return "no_gcf";
        case Variant::BaselineAvgpool: return "baseline_avgpool";
        case Variant::BaselineTargetAttn: return "baseline_target_attn";
    }
    throw InvalidArgument("unknown variant");
}

Variant parse_variant(const std::string& name) {
    for (Variant v : all_variants()) {
        if (variant_name(v) == name) return v;
    }
    throw InvalidArgument("unknown variant: " + name);
}

std::vector<Variant> all_variants() {
    return {Variant::Full,  Variant::NoDce, Variant::NoCce,
            Variant::NoPce, Variant::NoGcf, Variant::BaselineAvgpool,
            Variant::BaselineTargetAttn};
}

void ModelConfig::validate() const {
    require(d_static >= 1 && d_dce >= 1 && d_behavior >= 1 && d_collective >= 1 &&
                d_guidance >= 0 && d_fused >= 1 && ffn_hidden >= 1,
            "ModelConfig: dims must be positive");
    require(rank_static >= 0 && rank_dynamic >= 0 && rank_personalized >= 0 &&
                rank_collective >= 0,
            "ModelConfig: ranks must be nonnegative");
    require(tau >= 0.0 && tau <= 1.0, "ModelConfig: tau out of [0, 1]");
    require(beta >= 0.0 && beta <= 1.0, "ModelConfig: beta out of [0, 1]");
    flow.validate();
}

Eigen::Index TokenTable::row_of(const std::string& token) const {
    const auto it = index.find(token);
    require(it != index.end(), "static encoder: unknown feature token " + token);
    return it->second;
}

Featurizer::Featurizer(std::uint64_t seed, Eigen::Index d_behavior, Eigen::Index d_guidance)
    : seed_(seed), d_behavior_(d_behavior), d_guidance_(d_guidance) {}

Featurizer::Featurizer(Featurizer&& other) noexcept {
    std::lock_guard<std::mutex> lock(other.mu_);
    seed_ = other.seed_;
    d_behavior_ = other.d_behavior_;
    d_guidance_ = other.d_guidance_;
    item_cache_ = std::move(other.item_cache_);
    guidance_cache_ = std::move(other.guidance_cache_);
}

Featurizer& Featurizer::operator=(Featurizer&& other) noexcept {
    if (this != &other) {
        std::scoped_lock lock(mu_, other.mu_);
        seed_ = other.seed_;
        d_behavior_ = other.d_behavior_;
        d_guidance_ = other.d_guidance_;
        item_cache_ = std::move(other.item_cache_);
        guidance_cache_ = std::move(other.guidance_cache_);
    }
    return *this;
}

Embedding Featurizer::item_embedding(const std::string& item_id,
                                     const std::string& category) const {
    const std::string key = item_id + "\x1f" + category;
    std::lock_guard<std::mutex> lock(mu_);
    auto it = item_cache_.find(key);
    if (it != item_cache_.end()) return it->second;
    // Shared category component + item-specific component: histories expose
    // category tastes while items stay distinguishable.
    Embedding e =
        (hashed_feature_vector(hash_mix(seed_, kCatSalt), "cat=" + category, d_behavior_) +
         hashed_feature_vector(hash_mix(seed_, kItemSalt), "item=" + item_id, d_behavior_)) /
        std::sqrt(2.0);
    item_cache_.emplace(key, e);
    return e;
}

Embedding Featurizer::event_embedding(const BehaviorEvent& event) const {
    const auto it = event.attrs.find("flavor");
    return item_embedding(event.item_id, it != event.attrs.end() ? it->second : "");
}

Embedding Featurizer::guidance(const std::map<std::string, std::string>& dyn_features) const {
    const std::string key = dce::canonical_context(dyn_features);
    std::lock_guard<std::mutex> lock(mu_);
    auto it = guidance_cache_.find(key);
    if (it != guidance_cache_.end()) return it->second;
    Embedding g = hashed_feature_vector(hash_mix(seed_, kGuideSalt), key, d_guidance_);
    guidance_cache_.emplace(key, g);
    return g;
}

Matrix Featurizer::history_matrix(const BehaviorSequence& seq) const {
    require(!seq.empty(), "history_matrix: empty behavior sequence");
    const std::size_t keep = std::min<std::size_t>(seq.size(), kMaxSequenceLength);
    Matrix h(static_cast<Eigen::Index>(keep), d_behavior_);
    const std::size_t first = seq.size() - keep;
    for (std::size_t i = 0; i < keep; ++i) {
        h.row(static_cast<Eigen::Index>(i)) = event_embedding(seq[first + i]).transpose();
    }
    return h;
}

// ---------------------------------------------------------------------------

namespace {

template <typename F>
auto stage(const char* tag, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const std::exception& e) {
        throw RuntimeError(std::string("[") + tag + "] " + e.what());
    }
}

}  // namespace

RankModel::RankModel(SyntheticWorld world, const ModelConfig& config)
    : world_(std::move(world)),
      config_(config),
      featurizer_(hash_mix(config.init_seed, kFeatSalt), config.d_behavior, config.d_guidance),
      kb_encoder_(hash_mix(config.init_seed, kKbSalt), 16, config.d_dce, 0),
      cce_encoder_(hash_mix(config.init_seed, kCceSalt), config.d_collective),
      kb_(config.tau, config.d_dce) {
    config_.validate();
    const VariantSpec spec = spec_of(config_.variant);
    Rng rng(hash_mix(config_.init_seed, kInitSalt));

    // Feature vocabulary: every token static_tokens() can emit.
    std::vector<std::string> vocab;
    for (const auto& a : kAgeBands) vocab.push_back("age=" + a);
    for (const auto& g : kGenders) vocab.push_back("gender=" + g);
    for (const auto& c : world_.categories) vocab.push_back("cat=" + c);
    for (const char* p : {"low", "mid", "high"}) vocab.push_back(std::string("price=") + p);
    static_table_.table = ad::ParamTensor(
        "static_table", ad::glorot(static_cast<Eigen::Index>(vocab.size()), config_.d_static, rng));
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        static_table_.index[vocab[i]] = static_cast<Eigen::Index>(i);
    }

    if (spec.attention) {
        attention_ = pce::AttentionParams("attention", config_.d_behavior, config_.ffn_hidden, rng);
    }
    if (spec.flow) {
        flow_ = pce::VelocityFieldParams("flow", config_.d_behavior, config_.d_guidance, rng,
                                         config_.flow_hidden);
    }

    const Eigen::Index p_width = personalized_width(config_);
    Eigen::Index total = config_.d_static + p_width;
    if (spec.dce) total += config_.d_dce;
    if (spec.cce) total += config_.d_collective;

    if (spec.adapters) {
        ada_s_ = gcf::LoraAdapter("adapter_static", gcf::ContextKind::Static, config_.d_static,
                                  config_.rank_static, rng);
        if (spec.dce) {
            ada_d_ = gcf::LoraAdapter("adapter_dynamic", gcf::ContextKind::Dynamic,
                                      config_.d_dce, config_.rank_dynamic, rng);
        }
        ada_p_ = gcf::LoraAdapter("adapter_personalized", gcf::ContextKind::Personalized,
                                  p_width, config_.rank_personalized, rng);
        if (spec.cce) {
            ada_c_ = gcf::LoraAdapter("adapter_collective", gcf::ContextKind::Collective,
                                      config_.d_collective, config_.rank_collective, rng);
        }
    }

    const Eigen::Index head_in = spec.fusion_mlp ? config_.d_fused : total;
    if (spec.fusion_mlp) {
        fusion_ = gcf::FusionHead("fusion", total, config_.d_fused, rng, config_.fusion_hidden);
    }
    ctr_head_ = nn::Dense("ctr_head", head_in, 1, rng);
    cvr_head_ = nn::Dense("cvr_head", head_in, 1, rng);

    if (spec.dce) {
        const auto contexts = dce::aggregate_logs(world_.logs);
        kb_ = dce::KnowledgeBase::build(contexts, kb_encoder_, config_.tau);
    }
    if (spec.cce) refresh_collective_cache();
}

RankModel::RankModel(RankModel&& other) noexcept
    : world_(std::move(other.world_)),
      config_(std::move(other.config_)),
      featurizer_(std::move(other.featurizer_)),
      static_table_(std::move(other.static_table_)),
      attention_(std::move(other.attention_)),
      flow_(std::move(other.flow_)),
      ada_s_(std::move(other.ada_s_)),
      ada_d_(std::move(other.ada_d_)),
      ada_p_(std::move(other.ada_p_)),
      ada_c_(std::move(other.ada_c_)),
      fusion_(std::move(other.fusion_)),
      ctr_head_(std::move(other.ctr_head_)),
      cvr_head_(std::move(other.cvr_head_)),
      kb_encoder_(std::move(other.kb_encoder_)),
      cce_encoder_(std::move(other.cce_encoder_)),
      kb_(std::move(other.kb_)),
      collective_(other.collective_snapshot()) {}

RankModel& RankModel::operator=(RankModel&& other) noexcept {
    if (this != &other) {
        world_ = std::move(other.world_);
        config_ = std::move(other.config_);
        featurizer_ = std::move(other.featurizer_);
        static_table_ = std::move(other.static_table_);
        attention_ = std::move(other.attention_);
        flow_ = std::move(other.flow_);
        ada_s_ = std::move(other.ada_s_);
        ada_d_ = std::move(other.ada_d_);
        ada_p_ = std::move(other.ada_p_);
        ada_c_ = std::move(other.ada_c_);
        fusion_ = std::move(other.fusion_);
        ctr_head_ = std::move(other.ctr_head_);
        cvr_head_ = std::move(other.cvr_head_);
        kb_encoder_ = std::move(other.kb_encoder_);
        cce_encoder_ = std::move(other.cce_encoder_);
        kb_ = std::move(other.kb_);
        swap_collective(other.collective_snapshot());
    }
    return *this;
}

std::shared_ptr<const RankModel::CollectiveCache> RankModel::collective_snapshot() const {
    std::lock_guard<std::mutex> lock(collective_mu_);
    return collective_;
}

void RankModel::swap_collective(std::shared_ptr<const CollectiveCache> next) {
    std::lock_guard<std::mutex> lock(collective_mu_);
    collective_ = std::move(next);
}

std::vector<std::string> RankModel::static_tokens(const Sample& sample) const {
    std::vector<std::string> tokens;
    for (const auto& [k, v] : sample.context.static_features) tokens.push_back(k + "=" + v);
    return tokens;
}

Embedding RankModel::static_embedding(const Sample& sample) const {
    const auto tokens = static_tokens(sample);
    require(!tokens.empty(), "static encoder: no feature tokens");
    Embedding sum = Embedding::Zero(config_.d_static);
    for (const auto& tok : tokens) {
        sum += static_table_.table.values.row(static_table_.row_of(tok)).transpose();
    }
    return sum / static_cast<double>(tokens.size());
}

Embedding RankModel::collective_embedding(const std::string& user_id) const {
    const auto snap = collective_snapshot();
    require(snap != nullptr, "collective cache: not built");
    const auto it = snap->users.find(user_id);
    require(it != snap->users.end(), "collective cache: unknown user " + user_id);
    return it->second;
}

std::map<std::string, Embedding> RankModel::user_profiles() const {
    const auto snap = collective_snapshot();
    return snap ? snap->users : std::map<std::string, Embedding>{};
}

Embedding RankModel::dce_embedding(const std::map<std::string, std::string>& dyn_features,
                                   dce::InferOutcome* outcome, std::uint64_t* version) {
    const dce::InferResult r = kb_.infer(dyn_features, kb_encoder_);
    if (outcome) *outcome = r.outcome;
    if (version) *version = r.kb_version;
    return r.embedding;
}

Embedding RankModel::instant_embedding(const Sample& sample, bool* fallback) {
    const BehaviorSequence& seq = sample.context.behavior_sequence;
    const Matrix h = featurizer_.history_matrix(seq);
    const Embedding e_avg = average_pool(h);
    if (seq.size() < 2) {
        // Too little history to have trained a transport for this user shape;
        // fall back to the average interest directly.
        if (fallback) *fallback = true;
        return e_avg;
    }
    if (fallback) *fallback = false;
    const pce::GuidanceSignal g{featurizer_.guidance(sample.context.dynamic_features), false};
    return pce::one_step_sample(flow_, e_avg, g, config_.flow);
}

struct RankModel::Branches {
    Embedding e_s;
    Embedding e_d;  // empty when the variant drops the branch
    Embedding e_p;
    Embedding e_c;  // empty when the variant drops the branch
};

RankModel::Branches RankModel::branches(const Sample& sample, ScoreResult* trace,
                                        const dce::InferResult* shared_dce) {
    const VariantSpec spec = spec_of(config_.variant);
    Branches b;
    b.e_s = stage("static", [&] { return static_embedding(sample); });
    if (spec.dce) {
        b.e_d = stage("dce", [&] {
            if (shared_dce) {
                if (trace) {
                    trace->kb_outcome = shared_dce->outcome;
                    trace->kb_version = shared_dce->kb_version;
                }
                return shared_dce->embedding;
            }
            return dce_embedding(sample.context.dynamic_features,
                                 trace ? &trace->kb_outcome : nullptr,
                                 trace ? &trace->kb_version : nullptr);
        });
    }
    b.e_p = stage("pce", [&] {
        const Matrix h = featurizer_.history_matrix(sample.context.behavior_sequence);
        if (spec.attention && spec.flow) {
            const Embedding target = featurizer_.item_embedding(sample.item_id, sample.category);
            const Embedding e_global = pce::target_attention(h, target, attention_);
            bool fb = false;
            const Embedding e_instant = instant_embedding(sample, &fb);
            if (trace) trace->instant_fallback = fb;
            return pce::pce_fuse(e_global, e_instant);
        }
        if (spec.attention) {  // baseline_target_attn
            const Embedding target = featurizer_.item_embedding(sample.item_id, sample.category);
            return pce::target_attention(h, target, attention_);
        }
        return average_pool(h);  // no_pce and baseline_avgpool
    });
    if (spec.cce) {
        b.e_c = stage("cce",
                      [&] { return collective_embedding(sample.context.collective_refs.user_id); });
    }
    return b;
}

ScoreResult RankModel::score(const Sample& sample) { return score_one(sample, nullptr); }

std::vector<ScoreResult> RankModel::score_batch(std::span<const Sample> samples) {
    require(!samples.empty(), "score_batch: no samples");
    const auto& dyn = samples.front().context.dynamic_features;
    for (const Sample& s : samples) {
        require(s.context.dynamic_features == dyn,
                "score_batch: samples must share one dynamic context");
    }
    std::optional<dce::InferResult> shared;
    if (spec_of(config_.variant).dce) {
        shared = stage("dce", [&] { return kb_.infer(dyn, kb_encoder_); });
    }
    std::vector<ScoreResult> out;
    out.reserve(samples.size());
    for (const Sample& s : samples) {
        out.push_back(score_one(s, shared ? &*shared : nullptr));
    }
    return out;
}

ScoreResult RankModel::score_one(const Sample& sample, const dce::InferResult* shared_dce) {
    sample.validate();
    const VariantSpec spec = spec_of(config_.variant);
    ScoreResult result;
    Branches b = branches(sample, &result, shared_dce);

    return stage("gcf", [&] {
        std::vector<Embedding> parts;
        if (spec.adapters) {
            parts.push_back(gcf::lora_transform(b.e_s, ada_s_));
            if (spec.dce) parts.push_back(gcf::lora_transform(b.e_d, ada_d_));
            parts.push_back(gcf::lora_transform(b.e_p, ada_p_));
            if (spec.cce) parts.push_back(gcf::lora_transform(b.e_c, ada_c_));
        } else {
            parts.push_back(b.e_s);
            if (spec.dce) parts.push_back(b.e_d);
            parts.push_back(b.e_p);
            if (spec.cce) parts.push_back(b.e_c);
        }
        const Embedding rep = concat(std::span<const Embedding>(parts));
        const Embedding fused = spec.fusion_mlp ? fusion_.mlp.forward(rep) : rep;
        result.pctr = sigmoid(ctr_head_.forward(fused)[0]);
        result.pcvr = sigmoid(cvr_head_.forward(fused)[0]);
        return result;
    });
}

std::pair<ad::Var, ad::Var> RankModel::score_graph(ad::Tape& tape, const Sample& sample) {
    const VariantSpec spec = spec_of(config_.variant);

    // Static branch: mean of trainable table rows.
    const auto tokens = static_tokens(sample);
    const ad::Var table = tape.param(static_table_.table);
    ad::Var e_s = tape.row(table, static_table_.row_of(tokens.front()));
    for (std::size_t i = 1; i < tokens.size(); ++i) {
        e_s = tape.add(e_s, tape.row(table, static_table_.row_of(tokens[i])));
    }
    e_s = tape.scale(e_s, 1.0 / static_cast<double>(tokens.size()));

    std::vector<ad::Var> parts;
    const auto adapted = [&](ad::Var v, gcf::LoraAdapter& ada) {
        return spec.adapters ? gcf::lora_transform(tape, ada, v) : v;
    };
    parts.push_back(adapted(e_s, ada_s_));

    if (spec.dce) {
        const Embedding e_d = dce_embedding(sample.context.dynamic_features);
        parts.push_back(adapted(tape.constant(e_d), ada_d_));
    }

    const Matrix h = featurizer_.history_matrix(sample.context.behavior_sequence);
    ad::Var e_p{};
    if (spec.attention) {
        const Embedding target = featurizer_.item_embedding(sample.item_id, sample.category);
        const ad::Var e_global = pce::target_attention(tape, attention_, h, tape.constant(target));
        if (spec.flow) {
            const Embedding e_instant = instant_embedding(sample, nullptr);
            const std::array<ad::Var, 2> both{e_global, tape.constant(e_instant)};
            e_p = tape.concat(both);
        } else {
            e_p = e_global;
        }
    } else {
        e_p = tape.constant(average_pool(h));
    }
    parts.push_back(adapted(e_p, ada_p_));

    if (spec.cce) {
        const Embedding e_c = collective_embedding(sample.context.collective_refs.user_id);
        parts.push_back(adapted(tape.constant(e_c), ada_c_));
    }

    const ad::Var rep = tape.concat(parts);
    const ad::Var fused = spec.fusion_mlp ? fusion_.mlp.forward(tape, rep) : rep;
    const ad::Var pctr = tape.sigmoid(ctr_head_.forward(tape, fused));
    const ad::Var pcvr = tape.sigmoid(cvr_head_.forward(tape, fused));
    return {pctr, pcvr};
}

std::vector<ad::ParamTensor*> RankModel::trainable_params() {
    const VariantSpec spec = spec_of(config_.variant);
    std::vector<ad::ParamTensor*> out{&static_table_.table};
    if (spec.attention) {
        for (auto* p : attention_.params()) out.push_back(p);
    }
    if (spec.adapters) {
        for (auto* p : ada_s_.params()) out.push_back(p);
        if (spec.dce) {
            for (auto* p : ada_d_.params()) out.push_back(p);
        }
        for (auto* p : ada_p_.params()) out.push_back(p);
        if (spec.cce) {
            for (auto* p : ada_c_.params()) out.push_back(p);
        }
    }
    if (spec.fusion_mlp) {
        for (auto* p : fusion_.params()) out.push_back(p);
    }
    out.push_back(&ctr_head_.weight);
    out.push_back(&ctr_head_.bias);
    out.push_back(&cvr_head_.weight);
    out.push_back(&cvr_head_.bias);
    return out;
}

std::vector<pce::FlowSample> RankModel::flow_training_pairs() const {
    std::vector<pce::FlowSample> pairs;
    for (const BehaviorSequence& hist : world_.histories) {
        if (hist.size() < 2) continue;
        const BehaviorEvent& last = hist.back();
        std::vector<Embedding> before;
        before.reserve(hist.size() - 1);
        for (std::size_t i = 0; i + 1 < hist.size(); ++i) {
            before.push_back(featurizer_.event_embedding(hist[i]));
        }
        pce::FlowSample s;
        s.e_avg = pce::avg_interest(before);
        s.e_last = featurizer_.event_embedding(last);
        std::map<std::string, std::string> dyn{{"hour", last.attrs.at("hour")},
                                               {"weather", last.attrs.at("weather")},
                                               {"holiday", last.attrs.at("holiday")}};
        s.g_ins = featurizer_.guidance(dyn);
        pairs.push_back(std::move(s));
    }
    return pairs;
}

void RankModel::refresh_collective_cache() {
    auto next = std::make_shared<CollectiveCache>();
    std::map<std::string, Embedding>& stores = next->stores;
    std::map<std::string, Embedding>& aois = next->aois;
    std::map<std::string, Embedding>& users = next->users;

    // Per-AOI records aggregated from every user history.
    std::map<std::string, cce::AoiRecord> records;
    for (std::size_t a = 0; a < world_.config.n_aois; ++a) {
        cce::AoiRecord rec;
        rec.aoi_id = "a" + std::to_string(a);
        records[rec.aoi_id] = std::move(rec);
    }
    for (const auto& s : world_.stores) {
        records["a" + std::to_string(s.aoi)].stores.push_back(s.id);
    }
    std::map<std::string, BehaviorSequence> per_store;
    for (const BehaviorSequence& hist : world_.histories) {
        for (const BehaviorEvent& ev : hist) {
            records[ev.aoi_id].behaviors.push_back(ev);
            per_store[ev.store_id].push_back(ev);
        }
    }

    const auto by_time = [](const BehaviorEvent& a, const BehaviorEvent& b) {
        return a.timestamp < b.timestamp;
    };
    for (auto& [aoi_id, rec] : records) {
        if (rec.behaviors.empty()) continue;
        std::stable_sort(rec.behaviors.begin(), rec.behaviors.end(), by_time);
        rec.label = cce::build_collective_label(rec.behaviors);
        aois[aoi_id] = cce::aoi_embedding(cce_encoder_, rec);
    }
    for (auto& [store_id, events] : per_store) {
        std::stable_sort(events.begin(), events.end(), by_time);
        const std::size_t keep = std::min<std::size_t>(events.size(), cce::kStoreRecentWindow);
        const std::span<const BehaviorEvent> recent(events.data() + (events.size() - keep),
                                                    keep);
        stores[store_id] = cce::store_embedding(cce_encoder_, recent);
    }
    for (std::size_t ui = 0; ui < world_.users.size(); ++ui) {
        const BehaviorSequence& hist = world_.histories[ui];
        if (hist.empty()) continue;
        std::set<std::string> visited;
        for (const BehaviorEvent& ev : hist) visited.insert(ev.store_id);
        std::vector<std::pair<Embedding, Embedding>> pairs;
        for (const auto& sid : visited) {
            const auto se = stores.find(sid);
            if (se == stores.end()) continue;
            const auto& aoi_id = "a" + std::to_string(world_.stores[world_.store_index.at(sid)].aoi);
            pairs.emplace_back(se->second, aois.at(aoi_id));
        }
        if (pairs.empty()) continue;
        users[world_.users[ui].id] = cce::user_profile(pairs, config_.beta);
    }

    swap_collective(std::move(next));
}

std::vector<cce::CachedEmbedding> RankModel::collective_cache_rows() const {
    const auto snap = collective_snapshot();
    std::vector<cce::CachedEmbedding> rows;
    if (!snap) return rows;
    for (const auto& [id, e] : snap->stores) rows.push_back({"store", id, e});
    for (const auto& [id, e] : snap->aois) rows.push_back({"aoi", id, e});
    for (const auto& [id, e] : snap->users) rows.push_back({"user", id, e});
    return rows;
}

void RankModel::install_collective_cache(std::span<const cce::CachedEmbedding> rows) {
    auto next = std::make_shared<CollectiveCache>();
    for (const cce::CachedEmbedding& row : rows) {
        if (row.scope == "store") {
            next->stores[row.id] = row.embedding;
        } else if (row.scope == "aoi") {
            next->aois[row.id] = row.embedding;
        } else if (row.scope == "user") {
            next->users[row.id] = row.embedding;
        } else {
            throw InvalidArgument("install_collective_cache: unknown scope " + row.scope);
        }
    }
    swap_collective(std::move(next));
}

// ---------------------------------------------------------------------------

void TrainOptions::validate() const {
    require(lr >= 0.0 && flow_lr >= 0.0, "TrainOptions: negative learning rate");
    require(batch >= 1, "TrainOptions: batch must be >= 1");
    require(stage1_epochs >= 0 && stage2_epochs >= 0, "TrainOptions: negative epochs");
}

TrainOptions desk_preset() { return TrainOptions{}; }

TrainOptions paper_preset() {
    TrainOptions opt;
    opt.lr = 2e-5;
    opt.batch = 512;
    return opt;
}

TrainReport train(RankModel& model, const Dataset& data, const TrainOptions& opt) {
    opt.validate();
    require(!data.empty(), "train: empty dataset");
    const VariantSpec spec = spec_of(model.model_config().variant);
    TrainReport report;

    if (spec.flow && opt.stage1_epochs > 0) {
        const auto pairs = model.flow_training_pairs();
        if (!pairs.empty()) {
            Rng rng(hash_mix(opt.seed, kStage1Salt));
            ad::OptimizerConfig oc;
            oc.lr = opt.flow_lr;
            report.stage1_epoch_losses = pce::train_velocity_field(
                model.flow_field(), pairs, model.model_config().flow, opt.stage1_epochs, rng, oc);
        } else {
            log_warn("train: no users with >= 2 behaviors; flow stage skipped");
        }
    }

    const auto params = model.trainable_params();
    ad::OptimizerConfig oc;
    oc.lr = opt.lr;
    ad::Optimizer optimizer(oc);
    Rng rng(hash_mix(opt.seed, kStage2Salt));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 0; epoch < opt.stage2_epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch));
            const auto batch_loss = [&](ad::Tape& tape) {
                ad::Var total{};
                for (std::size_t i = start; i < end; ++i) {
                    const Sample& s = data[order[i]];
                    const auto [pctr, pcvr] = model.score_graph(tape, s);
                    ad::Var term = tape.bce(pctr, s.label_click);
                    if (s.label_click == 1) {
                        term = tape.add(term, tape.bce(pcvr, s.label_convert));
                    }
                    total = (i == start) ? term : tape.add(total, term);
                }
                return tape.scale(total, 1.0 / static_cast<double>(end - start));
            };
            double loss = 0.0;
            try {
                loss = ad::grad(batch_loss, params);
                optimizer.step(params);
            } catch (const std::exception&) {
                if (!opt.checkpoint_path.empty()) save_model(model, opt.checkpoint_path);
                throw;
            }
            report.stage2_batch_losses.push_back(loss);
        }
    }
    return report;
}

EvalReport evaluate(RankModel& model, const Dataset& data) {
    require(!data.empty(), "evaluate: empty dataset");
    std::vector<double> ctr_scores, cvr_scores;
    std::vector<int> ctr_labels, cvr_labels;
    ctr_scores.reserve(data.size());
    ctr_labels.reserve(data.size());
    for (const Sample& s : data) {
        const ScoreResult r = model.score(s);
        ctr_scores.push_back(r.pctr);
        ctr_labels.push_back(s.label_click);
        if (s.label_click == 1) {
            cvr_scores.push_back(r.pcvr);
            cvr_labels.push_back(s.label_convert);
        }
    }
    EvalReport report;
    report.n = data.size();
    report.n_clicked = cvr_labels.size();
    report.ctr_auc = auc(ctr_scores, ctr_labels);
    report.cvr_auc = auc(cvr_scores, cvr_labels);
    return report;
}

// ---------------------------------------------------------------------------

double auc(std::span<const double> scores, std::span<const int> labels) {
    require(scores.size() == labels.size(), "auc: size mismatch");
    require(!scores.empty(), "auc: empty input");
    std::size_t n_pos = 0;
    for (int l : labels) {
        require(l == 0 || l == 1, "auc: labels must be 0/1");
        n_pos += static_cast<std::size_t>(l);
    }
    const std::size_t n_neg = labels.size() - n_pos;
    require(n_pos > 0 && n_neg > 0, "AUC undefined: single-class labels");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Average ranks over tie groups; ranks are 1-based.
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[idx[k]] == 1) pos_rank_sum += avg_rank;
        }
        i = j + 1;
    }
    const double u = pos_rank_sum -
                     static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auc_bruteforce(std::span<const double> scores, std::span<const int> labels) {
    require(scores.size() == labels.size(), "auc_bruteforce: size mismatch");
    double wins = 0.0;
    std::size_t n_pos = 0, n_neg = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) {
            ++n_pos;
        } else {
            ++n_neg;
        }
    }
    require(n_pos > 0 && n_neg > 0, "AUC undefined: single-class labels");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < labels.size(); ++j) {
            if (labels[j] != 0) continue;
            if (scores[i] > scores[j]) {
                wins += 1.0;
            } else if (scores[i] == scores[j]) {
                wins += 0.5;
            }
        }
    }
    return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double rela_impr(double auc_model, double auc_base) {
    require(auc_base > 0.5, "rela_impr: baseline AUC must exceed 0.5");
    return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0;
}

double bayes_optimal_auc(const SyntheticWorld& world, std::span<const Sample> samples) {
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(samples.size());
    labels.reserve(samples.size());
    for (const Sample& s : samples) {
        const std::size_t ui = world.user_index.at(s.context.collective_refs.user_id);
        const std::size_t ii = world.item_index.at(s.item_id);
        const DynContext ctx = dyn_from_features(s.context.dynamic_features);
        scores.push_back(world.ctr_logit(ui, ii, ctx));
        labels.push_back(s.label_click);
    }
    return auc(scores, labels);
}

std::vector<AblationRow> run_ablation(const AblationConfig& config,
                                      std::span<const Variant> variants) {
    require(!variants.empty(), "run_ablation: no variants requested");
    const SyntheticWorld world = generate_world(config.world, config.world_seed);

    const std::size_t need = config.n_train + config.n_val;
    Dataset all = generate_interactions(world, need + need / 3 + 64,
                                        hash_mix(config.world_seed, kAblDataSalt));
    auto [train_set, val_set] = split_by_user(std::move(all));
    require(train_set.size() >= config.n_train && val_set.size() >= config.n_val,
            "run_ablation: user split smaller than requested sizes");
    train_set.resize(config.n_train);
    val_set.resize(config.n_val);

    std::map<Variant, EvalReport> memo;
    const auto result_of = [&](Variant v) -> const EvalReport& {
        auto it = memo.find(v);
        if (it != memo.end()) return it->second;
        ModelConfig mc = config.model;
        mc.variant = v;
        RankModel model(world, mc);
        train(model, train_set, config.train);
        EvalReport report = evaluate(model, val_set);
        log_info("ablation " + variant_name(v) + ": ctr_auc " +
                 std::to_string(report.ctr_auc) + " cvr_auc " + std::to_string(report.cvr_auc));
        return memo.emplace(v, report).first->second;
    };

    const EvalReport full = result_of(Variant::Full);
    std::vector<AblationRow> rows;
    rows.reserve(variants.size());
    for (Variant v : variants) {
        const EvalReport& r = result_of(v);
        AblationRow row;
        row.variant = variant_name(v);
        row.ctr_auc = r.ctr_auc;
        row.cvr_auc = r.cvr_auc;
        row.rela_impr_ctr = rela_impr(r.ctr_auc, full.ctr_auc);
        row.rela_impr_cvr = rela_impr(r.cvr_auc, full.cvr_auc);
        rows.push_back(std::move(row));
    }
    return rows;
}

void save_ablation_csv(std::span<const AblationRow> rows, const std::string& path) {
    std::ofstream out(path);
    check(out.good(), "save_ablation_csv: cannot open " + path);
    out << "variant,ctr_auc,cvr_auc,rela_impr_ctr,rela_impr_cvr\n";
    out << std::fixed << std::setprecision(6);
    for (const AblationRow& r : rows) {
        out << r.variant << ',' << r.ctr_auc << ',' << r.cvr_auc << ',' << r.rela_impr_ctr
            << ',' << r.rela_impr_cvr << '\n';
    }
    check(out.good(), "save_ablation_csv: write failed for " + path);
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json world_config_to_json(const WorldConfig& c) {
    return {{"n_users", c.n_users},
            {"n_stores", c.n_stores},
            {"n_aois", c.n_aois},
            {"n_items", c.n_items},
            {"n_categories", c.n_categories},
            {"min_history", c.min_history},
            {"max_history", c.max_history},
            {"light_user_fraction", c.light_user_fraction},
            {"light_min_history", c.light_min_history},
            {"light_max_history", c.light_max_history},
            {"promo_rate", c.promo_rate},
            {"holiday_rate", c.holiday_rate},
            {"bias_ctr", c.bias_ctr},
            {"scale_age", c.scale_age},
            {"scale_quality", c.scale_quality},
            {"scale_dyn", c.scale_dyn},
            {"scale_inter", c.scale_inter},
            {"scale_aoi", c.scale_aoi},
            {"scale_aoi_base", c.scale_aoi_base},
            {"scale_pref", c.scale_pref},
            {"bias_cvr", c.bias_cvr},
            {"scale_age_cvr", c.scale_age_cvr},
            {"scale_aoi_cvr", c.scale_aoi_cvr},
            {"scale_quality_cvr", c.scale_quality_cvr},
            {"price_slope_cvr", c.price_slope_cvr}};
}

WorldConfig world_config_from_json(const nlohmann::json& j) {
    WorldConfig c;
    c.n_users = j.at("n_users").get<std::size_t>();
    c.n_stores = j.at("n_stores").get<std::size_t>();
    c.n_aois = j.at("n_aois").get<std::size_t>();
    c.n_items = j.at("n_items").get<std::size_t>();
    c.n_categories = j.at("n_categories").get<std::size_t>();
    c.min_history = j.at("min_history").get<std::size_t>();
    c.max_history = j.at("max_history").get<std::size_t>();
    c.light_user_fraction = j.at("light_user_fraction").get<double>();
    c.light_min_history = j.at("light_min_history").get<std::size_t>();
    c.light_max_history = j.at("light_max_history").get<std::size_t>();
    c.promo_rate = j.at("promo_rate").get<double>();
    c.holiday_rate = j.at("holiday_rate").get<double>();
    c.bias_ctr = j.at("bias_ctr").get<double>();
    c.scale_age = j.at("scale_age").get<double>();
    c.scale_quality = j.at("scale_quality").get<double>();
    c.scale_dyn = j.at("scale_dyn").get<double>();
    c.scale_inter = j.at("scale_inter").get<double>();
    c.scale_aoi = j.at("scale_aoi").get<double>();
    c.scale_aoi_base = j.at("scale_aoi_base").get<double>();
    c.scale_pref = j.at("scale_pref").get<double>();
    c.bias_cvr = j.at("bias_cvr").get<double>();
    c.scale_age_cvr = j.at("scale_age_cvr").get<double>();
    c.scale_aoi_cvr = j.at("scale_aoi_cvr").get<double>();
    c.scale_quality_cvr = j.at("scale_quality_cvr").get<double>();
    c.price_slope_cvr = j.at("price_slope_cvr").get<double>();
    return c;
}

std::vector<Eigen::Index> to_index_vec(const nlohmann::json& j) {
    std::vector<Eigen::Index> out;
    for (const auto& v : j) out.push_back(v.get<Eigen::Index>());
    return out;
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"variant", variant_name(c.variant)},
            {"d_static", c.d_static},
            {"d_dce", c.d_dce},
            {"d_behavior", c.d_behavior},
            {"d_collective", c.d_collective},
            {"d_guidance", c.d_guidance},
            {"d_fused", c.d_fused},
            {"ffn_hidden", c.ffn_hidden},
            {"fusion_hidden", c.fusion_hidden},
            {"flow_hidden", c.flow_hidden},
            {"rank_static", c.rank_static},
            {"rank_dynamic", c.rank_dynamic},
            {"rank_personalized", c.rank_personalized},
            {"rank_collective", c.rank_collective},
            {"tau", c.tau},
            {"beta", c.beta},
            {"flow",
             {{"omega", c.flow.omega},
              {"mu", c.flow.mu},
              {"sigma", c.flow.sigma},
              {"p_equal", c.flow.p_equal},
              {"p_drop", c.flow.p_drop},
              {"euler_steps", c.flow.euler_steps}}},
            {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.d_static = j.at("d_static").get<Eigen::Index>();
    c.d_dce = j.at("d_dce").get<Eigen::Index>();
    c.d_behavior = j.at("d_behavior").get<Eigen::Index>();
    c.d_collective = j.at("d_collective").get<Eigen::Index>();
    c.d_guidance = j.at("d_guidance").get<Eigen::Index>();
    c.d_fused = j.at("d_fused").get<Eigen::Index>();
    c.ffn_hidden = j.at("ffn_hidden").get<Eigen::Index>();
    c.fusion_hidden = to_index_vec(j.at("fusion_hidden"));
    c.flow_hidden = to_index_vec(j.at("flow_hidden"));
    c.rank_static = j.at("rank_static").get<int>();
    c.rank_dynamic = j.at("rank_dynamic").get<int>();
    c.rank_personalized = j.at("rank_personalized").get<int>();
    c.rank_collective = j.at("rank_collective").get<int>();
    c.tau = j.at("tau").get<double>();
    c.beta = j.at("beta").get<double>();
    const auto& f = j.at("flow");
    c.flow.omega = f.at("omega").get<double>();
    c.flow.mu = f.at("mu").get<double>();
    c.flow.sigma = f.at("sigma").get<double>();
    c.flow.p_equal = f.at("p_equal").get<double>();
    c.flow.p_drop = f.at("p_drop").get<double>();
    c.flow.euler_steps = f.at("euler_steps").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
}

std::vector<ad::ParamTensor*> all_param_tensors(RankModel& m);

}  // namespace

void save_model(const RankModel& model, const std::string& path) {
    auto& m = const_cast<RankModel&>(model);  // tensor values are read, not written
    nlohmann::json j;
    j["format"] = "ctxrank-model";
    j["version"] = 1;
    j["world"] = world_config_to_json(model.world_.config);
    j["world_seed"] = model.world_.seed;
    j["config"] = model_config_to_json(model.config_);

    nlohmann::json params = nlohmann::json::array();
    for (ad::ParamTensor* p : all_param_tensors(m)) {
        std::vector<double> values(p->values.data(), p->values.data() + p->values.size());
        params.push_back({{"name", p->name},
                          {"rows", p->values.rows()},
                          {"cols", p->values.cols()},
                          {"values", std::move(values)}});
    }
    j["params"] = std::move(params);

    std::ofstream out(path);
    check(out.good(), "save_model: cannot open " + path);
    out << j.dump() << '\n';
    check(out.good(), "save_model: write failed for " + path);
}

RankModel load_model(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "load_model: cannot open " + path);
    nlohmann::json j;
    in >> j;
    check(j.at("format").get<std::string>() == "ctxrank-model" &&
              j.at("version").get<int>() == 1,
          "load_model: unsupported file format");

    const WorldConfig wc = world_config_from_json(j.at("world"));
    const ModelConfig mc = model_config_from_json(j.at("config"));
    RankModel model(generate_world(wc, j.at("world_seed").get<std::uint64_t>()), mc);

    std::map<std::string, ad::ParamTensor*> by_name;
    for (ad::ParamTensor* p : all_param_tensors(model)) by_name[p->name] = p;
    for (const auto& pj : j.at("params")) {
        const auto name = pj.at("name").get<std::string>();
        const auto it = by_name.find(name);
        check(it != by_name.end(), "load_model: unexpected tensor " + name);
        ad::ParamTensor* p = it->second;
        const auto rows = pj.at("rows").get<Eigen::Index>();
        const auto cols = pj.at("cols").get<Eigen::Index>();
        check(rows == p->values.rows() && cols == p->values.cols(),
              "load_model: shape mismatch for " + name);
        const auto values = pj.at("values").get<std::vector<double>>();
        check(static_cast<Eigen::Index>(values.size()) == rows * cols,
              "load_model: value count mismatch for " + name);
        for (Eigen::Index c = 0, k = 0; c < cols; ++c) {
            for (Eigen::Index r = 0; r < rows; ++r, ++k) {
                p->values(r, c) = values[static_cast<std::size_t>(k)];
            }
        }
    }
    return model;
}

namespace {

std::vector<ad::ParamTensor*> all_param_tensors(RankModel& m) {
    const VariantSpec spec = spec_of(m.model_config().variant);
    std::vector<ad::ParamTensor*> out = m.trainable_params();
    if (spec.flow) {
        for (auto* p : m.flow_field().params()) out.push_back(p);
    }
    return out;
}

}  // namespace

}  // namespace ctxrank::pipeline
