// SPDX-License-Identifier: Apache-2.0

#include "ctxrank/serving.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <numeric>
#include <thread>

namespace ctxrank::serving {

namespace {

using nlohmann::json;

/// Request validation failure carrying the offending field path.
struct BadField {
    std::string field;
    std::string message;
};

json error_body(const std::string& message, const std::string& field = "") {
    json j = {{"error", message}};
    if (!field.empty()) j["field"] = field;
    return j;
}

Reply reply_json(int status, const json& j) { return {status, j.dump(), "application/json"}; }

const json& member(const json& j, const char* key, const std::string& path) {
    if (!j.is_object()) throw BadField{path.empty() ? key : path, "expected a JSON object"};
    const auto it = j.find(key);
    if (it == j.end()) {
        throw BadField{path.empty() ? key : path + "." + key, "missing required field"};
    }
    return *it;
}

std::string get_string(const json& j, const char* key, const std::string& path) {
    const json& v = member(j, key, path);
    if (!v.is_string()) {
        throw BadField{path.empty() ? key : path + "." + key, "expected a string"};
    }
    return v.get<std::string>();
}

ScoreRequest parse_score_request(const json& j) {
    ScoreRequest r;
    r.request_id = get_string(j, "request_id", "");
    r.user_id = get_string(j, "user_id", "");

    const json& dyn = member(j, "dynamic", "");
    if (!dyn.is_object()) throw BadField{"dynamic", "expected an object of strings"};
    for (const auto& [k, v] : dyn.items()) {
        if (!v.is_string()) throw BadField{"dynamic." + k, "expected a string"};
        r.dynamic_features[k] = v.get<std::string>();
    }
    if (!r.dynamic_features.count("hour")) {
        throw BadField{"dynamic.hour", "missing required field"};
    }

    const json& cands = member(j, "candidates", "");
    if (!cands.is_array()) throw BadField{"candidates", "expected an array"};
    for (std::size_t i = 0; i < cands.size(); ++i) {
        const std::string path = "candidates[" + std::to_string(i) + "]";
        const json& c = cands[i];
        if (!c.is_object()) throw BadField{path, "expected an object"};
        ScoreCandidate cand;
        cand.item_id = get_string(c, "item_id", path);
        if (c.contains("store_id")) {
            if (!c["store_id"].is_string()) throw BadField{path + ".store_id", "expected a string"};
            cand.store_id = c["store_id"].get<std::string>();
        }
        r.candidates.push_back(std::move(cand));
    }
    try {
        r.validate();
    } catch (const std::exception& e) {
        throw BadField{"candidates", e.what()};
    }
    return r;
}

dce::LogRecord parse_log_record(const json& j, const std::string& path) {
    dce::LogRecord rec;
    const json& ctx = member(j, "context", path);
    if (!ctx.is_object()) throw BadField{path + ".context", "expected an object of strings"};
    for (const auto& [k, v] : ctx.items()) {
        if (!v.is_string()) throw BadField{path + ".context." + k, "expected a string"};
        rec.context[k] = v.get<std::string>();
    }
    const json& cat = member(j, "category", path);
    if (!cat.is_string()) throw BadField{path + ".category", "expected a string"};
    rec.category = cat.get<std::string>();
    const json& price = member(j, "price", path);
    if (!price.is_number()) throw BadField{path + ".price", "expected a number"};
    rec.price = price.get<double>();
    const json& promo = member(j, "promo", path);
    if (!promo.is_boolean()) throw BadField{path + ".promo", "expected a boolean"};
    rec.promo = promo.get<bool>();
    const json& dl = member(j, "delivery_minutes", path);
    if (!dl.is_number()) throw BadField{path + ".delivery_minutes", "expected a number"};
    rec.delivery_minutes = dl.get<double>();
    return rec;
}

std::pair<std::string, int> split_target(const std::string& target) {
    const auto colon = target.rfind(':');
    require(colon != std::string::npos && colon + 1 < target.size(),
            "target must be host:port, got " + target);
    const std::string host = target.substr(0, colon);
    int port = 0;
    try {
        port = std::stoi(target.substr(colon + 1));
    } catch (const std::exception&) {
        throw InvalidArgument("target must be host:port, got " + target);
    }
    require(!host.empty() && port > 0 && port < 65536, "target must be host:port, got " + target);
    return {host, port};
}

}  // namespace

void ScoreRequest::validate() const {
    require(!request_id.empty(), "request_id must be non-empty");
    require(!user_id.empty(), "user_id must be non-empty");
    require(!dynamic_features.empty(), "dynamic context must be non-empty");
    require(!candidates.empty(), "at least one candidate is required");
    for (const ScoreCandidate& c : candidates) {
        require(!c.item_id.empty(), "candidate item_id must be non-empty");
    }
}

void LatencyReport::validate() const {
    require(tp50 <= tp90 && tp90 <= tp99, "latency percentiles must be nondecreasing");
    require(hit_rate >= 0.0 && hit_rate <= 1.0, "hit_rate out of [0, 1]");
}

double nearest_rank_percentile(std::span<const double> values, double pct) {
    require(!values.empty(), "nearest_rank_percentile: empty input");
    require(pct > 0.0 && pct <= 100.0, "nearest_rank_percentile: pct out of (0, 100]");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    // Multiply before dividing so integer-valued ranks stay exact in doubles.
    const double exact = pct * static_cast<double>(sorted.size()) / 100.0;
    auto rank = static_cast<std::size_t>(std::ceil(exact));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

void ServeOptions::validate() const {
    require(!host.empty(), "ServeOptions: empty host");
    require(port >= 0 && port < 65536, "ServeOptions: port out of range");
    require(reason_delay_ms >= 0, "ServeOptions: negative reason delay");
    require(kb_apply_interval_ms >= 0 && cce_refresh_interval_ms >= 0,
            "ServeOptions: negative update interval");
}

// ---------------------------------------------------------------------------

struct Server::Impl {
    httplib::Server http;
    std::thread listener;
    std::vector<std::thread> updaters;
    std::mutex mu;
    std::condition_variable cv;
    bool stopping = false;

    /// Runs fn every interval_ms until stop; used by the KB and cache updaters.
    void spawn_updater(int interval_ms, std::function<void()> fn) {
        updaters.emplace_back([this, interval_ms, fn = std::move(fn)] {
            std::unique_lock<std::mutex> lock(mu);
            while (!cv.wait_for(lock, std::chrono::milliseconds(interval_ms),
                                [this] { return stopping; })) {
                lock.unlock();
                try {
                    fn();
                } catch (const std::exception& e) {
                    log_warn(std::string("background update failed: ") + e.what());
                }
                lock.lock();
            }
        });
    }
};

Server::Server(pipeline::RankModel model, const ServeOptions& options)
    : model_(std::move(model)), options_(options), impl_(std::make_unique<Impl>()) {
    options_.validate();
    model_.kb_encoder().set_reason_delay_ms(options_.reason_delay_ms);
}

Server::~Server() { stop(); }

Reply Server::handle_health() const { return {200, "ok", "text/plain"}; }

Reply Server::handle_score(const std::string& body) {
    json req;
    try {
        req = json::parse(body);
    } catch (const json::parse_error& e) {
        return reply_json(400, error_body(std::string("malformed JSON: ") + e.what()));
    }

    ScoreRequest r;
    try {
        r = parse_score_request(req);
    } catch (const BadField& bad) {
        return reply_json(400, error_body(bad.message, bad.field));
    }

    const pipeline::SyntheticWorld& world = model_.world();
    if (!world.user_index.count(r.user_id)) {
        return reply_json(404, error_body("unknown user: " + r.user_id));
    }
    std::vector<pipeline::Sample> samples;
    samples.reserve(r.candidates.size());
    for (const ScoreCandidate& c : r.candidates) {
        const auto it = world.item_index.find(c.item_id);
        if (it == world.item_index.end()) {
            return reply_json(404, error_body("unknown item: " + c.item_id));
        }
        const std::string& store = world.stores[world.items[it->second].store].id;
        if (!c.store_id.empty() && c.store_id != store) {
            return reply_json(404, error_body("unknown store " + c.store_id + " for item " +
                                              c.item_id));
        }
        samples.push_back(
            pipeline::assemble_sample(world, r.user_id, c.item_id, r.dynamic_features));
    }

    std::vector<pipeline::ScoreResult> results;
    try {
        results = model_.score_batch(samples);
    } catch (const std::exception& e) {
        return reply_json(500, error_body(e.what()));
    }

    json out;
    out["request_id"] = r.request_id;
    const bool kb_on = model_.model_config().variant != pipeline::Variant::BaselineAvgpool &&
                       model_.model_config().variant != pipeline::Variant::BaselineTargetAttn &&
                       model_.model_config().variant != pipeline::Variant::NoDce;
    out["kb"] = !kb_on                ? "off"
                : results.front().kb_outcome == dce::InferOutcome::Hit ? "hit"
                                                                       : "miss";
    out["kb_version"] = results.front().kb_version;
    json rows = json::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
        rows.push_back({{"item_id", samples[i].item_id},
                        {"store_id", samples[i].store_id},
                        {"pctr", results[i].pctr},
                        {"pcvr", results[i].pcvr}});
    }
    out["results"] = std::move(rows);
    return reply_json(200, out);
}

Reply Server::handle_kb_stats() const {
    const dce::KnowledgeBase& kb = const_cast<pipeline::RankModel&>(model_).kb();
    const dce::KbStatsSnapshot s = kb.stats();
    return reply_json(200, json{{"hits", s.hits},
                                {"misses", s.misses},
                                {"encoder_calls", s.encoder_calls},
                                {"miss_failures", s.miss_failures},
                                {"entries", kb.entry_count()},
                                {"pending", kb.pending_count()},
                                {"version", kb.version()},
                                {"tau", kb.tau()}});
}

Reply Server::handle_kb_apply() {
    try {
        const std::size_t applied = model_.kb().apply_updates();
        return reply_json(200, json{{"applied", applied},
                                    {"entries", model_.kb().entry_count()},
                                    {"version", model_.kb().version()}});
    } catch (const std::exception& e) {
        return reply_json(500, error_body(std::string("[dce] ") + e.what()));
    }
}

Reply Server::handle_kb_rebuild(const std::string& body) {
    json req;
    try {
        req = json::parse(body);
    } catch (const json::parse_error& e) {
        return reply_json(400, error_body(std::string("malformed JSON: ") + e.what()));
    }
    std::vector<dce::LogRecord> records;
    try {
        const json& logs = member(req, "logs", "");
        if (!logs.is_array()) throw BadField{"logs", "expected an array"};
        if (logs.empty()) throw BadField{"logs", "at least one log record is required"};
        for (std::size_t i = 0; i < logs.size(); ++i) {
            records.push_back(parse_log_record(logs[i], "logs[" + std::to_string(i) + "]"));
        }
    } catch (const BadField& bad) {
        return reply_json(400, error_body(bad.message, bad.field));
    }
    try {
        model_.kb().rebuild(records, model_.kb_encoder());
    } catch (const std::exception& e) {
        return reply_json(500, error_body(std::string("[dce] ") + e.what()));
    }
    return reply_json(200, json{{"entries", model_.kb().entry_count()},
                                {"version", model_.kb().version()}});
}

Reply Server::handle_meta() const {
    const pipeline::WorldConfig& w = model_.world().config;
    return reply_json(200, json{{"n_users", w.n_users},
                                {"n_items", w.n_items},
                                {"n_stores", w.n_stores},
                                {"variant", pipeline::variant_name(model_.model_config().variant)},
                                {"tau", model_.model_config().tau}});
}

int Server::start() {
    httplib::Server& http = impl_->http;
    const auto wrap = [](Reply r, httplib::Response& res) {
        res.status = r.status;
        res.set_content(r.body, r.content_type);
    };
    http.Get("/healthz", [this, wrap](const httplib::Request&, httplib::Response& res) {
        wrap(handle_health(), res);
    });
    http.Post("/v1/score", [this, wrap](const httplib::Request& req, httplib::Response& res) {
        wrap(handle_score(req.body), res);
    });
    http.Get("/v1/kb/stats", [this, wrap](const httplib::Request&, httplib::Response& res) {
        wrap(handle_kb_stats(), res);
    });
    http.Post("/v1/kb/apply", [this, wrap](const httplib::Request&, httplib::Response& res) {
        wrap(handle_kb_apply(), res);
    });
    http.Post("/v1/kb/rebuild", [this, wrap](const httplib::Request& req, httplib::Response& res) {
        wrap(handle_kb_rebuild(req.body), res);
    });
    http.Get("/v1/meta", [this, wrap](const httplib::Request&, httplib::Response& res) {
        wrap(handle_meta(), res);
    });

    int port = options_.port;
    if (port == 0) {
        port = http.bind_to_any_port(options_.host);
        check(port > 0, "serve: failed to bind to an ephemeral port on " + options_.host);
    } else {
        check(http.bind_to_port(options_.host, port),
              "serve: failed to bind " + options_.host + ":" + std::to_string(port));
    }
    impl_->listener = std::thread([this] { impl_->http.listen_after_bind(); });
    impl_->http.wait_until_ready();

    if (options_.kb_apply_interval_ms > 0) {
        impl_->spawn_updater(options_.kb_apply_interval_ms, [this] { model_.kb().apply_updates(); });
    }
    if (options_.cce_refresh_interval_ms > 0) {
        impl_->spawn_updater(options_.cce_refresh_interval_ms,
                             [this] { model_.refresh_collective_cache(); });
    }
    log_info("serving on " + options_.host + ":" + std::to_string(port));
    return port;
}

void Server::wait() {
    if (impl_->listener.joinable()) impl_->listener.join();
}

void Server::stop() {
    {
        std::lock_guard<std::mutex> lock(impl_->mu);
        if (impl_->stopping) return;
        impl_->stopping = true;
    }
    impl_->cv.notify_all();
    for (std::thread& t : impl_->updaters) {
        if (t.joinable()) t.join();
    }
    impl_->updaters.clear();
    impl_->http.stop();
    if (impl_->listener.joinable()) impl_->listener.join();
}

Server make_server(const std::string& model_path, const std::string& kb_path,
                   const std::string& cce_cache_path, const ServeOptions& options) {
    pipeline::RankModel model = pipeline::load_model(model_path);
    if (!kb_path.empty()) {
        model.kb() = dce::KnowledgeBase::load(kb_path);
        require(model.kb().dim() == model.model_config().d_dce,
                "serve: knowledge-base dim does not match the model");
    }
    if (!cce_cache_path.empty()) {
        model.install_collective_cache(cce::load_embedding_cache(cce_cache_path));
    }
    return Server(std::move(model), options);
}

void serve(const std::string& model_path, const std::string& kb_path,
           const std::string& cce_cache_path, const std::string& bind_address,
           ServeOptions options) {
    const auto [host, port] = split_target(bind_address);
    options.host = host;
    options.port = port;
    Server server = make_server(model_path, kb_path, cce_cache_path, options);
    server.start();
    server.wait();
}

// ---------------------------------------------------------------------------

void BenchOptions::validate() const {
    require(n_requests > 0, "BenchOptions: n_requests must be positive");
    require(concurrency >= 1, "BenchOptions: concurrency must be >= 1");
    require(warm_fraction >= 0.0 && warm_fraction <= 1.0,
            "BenchOptions: warm_fraction out of [0, 1]");
}

LatencyReport bench(const std::string& target, const BenchOptions& options) {
    options.validate();
    const auto [host, port] = split_target(target);

    httplib::Client probe(host, port);
    probe.set_connection_timeout(5, 0);
    auto meta = probe.Get("/v1/meta");
    check(meta && meta->status == 200, "bench: target unreachable: " + target);
    const json meta_j = json::parse(meta->body);
    const auto n_users = meta_j.at("n_users").get<std::size_t>();
    const auto n_items = meta_j.at("n_items").get<std::size_t>();

    const json warm_ctx = {{"hour", "b2"}, {"weather", "sunny"}, {"holiday", "none"}};
    const auto make_body = [&](std::size_t k, const std::string& user, const std::string& item,
                               bool warm) {
        json dyn = warm_ctx;
        if (!warm) dyn["nonce"] = "z" + std::to_string(k);  // unique context: always a miss
        return json{{"request_id", "bench-" + std::to_string(k)},
                    {"user_id", user},
                    {"dynamic", std::move(dyn)},
                    {"candidates", json::array({{{"item_id", item}}})}}
            .dump();
    };

    // Untimed warm-up: insert the warm context and publish it.
    {
        auto res = probe.Post("/v1/score", make_body(0, "u0", "i0", true), "application/json");
        check(res && res->status == 200, "bench: warm-up request failed");
        auto applied = probe.Post("/v1/kb/apply", "", "application/json");
        check(applied && applied->status == 200, "bench: warm-up apply failed");
    }

    struct Planned {
        std::string body;
    };
    Rng rng(options.seed);
    const auto warm_count =
        static_cast<std::size_t>(std::llround(options.warm_fraction *
                                              static_cast<double>(options.n_requests)));
    std::vector<Planned> plan;
    plan.reserve(options.n_requests);
    for (std::size_t k = 0; k < options.n_requests; ++k) {
        const std::string user = "u" + std::to_string(rng.index(n_users));
        const std::string item = "i" + std::to_string(rng.index(n_items));
        plan.push_back({make_body(k + 1, user, item, k < warm_count)});
    }
    rng.shuffle(plan);

    std::vector<double> latencies(plan.size(), 0.0);
    std::vector<int> hit(plan.size(), 0);
    std::atomic<std::size_t> next{0};
    std::vector<std::string> failures;
    std::mutex failure_mu;

    const auto worker = [&] {
        httplib::Client client(host, port);
        client.set_connection_timeout(5, 0);
        for (;;) {
            const std::size_t k = next.fetch_add(1);
            if (k >= plan.size()) break;
            const auto t0 = std::chrono::steady_clock::now();
            auto res = client.Post("/v1/score", plan[k].body, "application/json");
            const auto t1 = std::chrono::steady_clock::now();
            if (!res || res->status != 200) {
                std::lock_guard<std::mutex> lock(failure_mu);
                failures.push_back("request " + std::to_string(k) + " failed" +
                                   (res ? " with status " + std::to_string(res->status) : ""));
                continue;
            }
            latencies[k] = std::chrono::duration<double, std::milli>(t1 - t0).count();
            hit[k] = json::parse(res->body).at("kb").get<std::string>() == "hit" ? 1 : 0;
        }
    };
    std::vector<std::thread> threads;
    for (int t = 0; t < options.concurrency; ++t) threads.emplace_back(worker);
    for (std::thread& t : threads) t.join();
    check(failures.empty(),
          "bench: " + std::to_string(failures.size()) + " requests failed; first: " +
              (failures.empty() ? "" : failures.front()));

    LatencyReport report;
    report.count = latencies.size();
    report.tp50 = nearest_rank_percentile(latencies, 50.0);
    report.tp90 = nearest_rank_percentile(latencies, 90.0);
    report.tp99 = nearest_rank_percentile(latencies, 99.0);
    report.hit_rate = static_cast<double>(std::accumulate(hit.begin(), hit.end(), 0)) /
                      static_cast<double>(hit.size());
    report.validate();
    return report;
}

LatencyReport bench(const std::string& target, std::size_t n_requests, int concurrency,
                    double warm_fraction) {
    BenchOptions options;
    options.n_requests = n_requests;
    options.concurrency = concurrency;
    options.warm_fraction = warm_fraction;
    return bench(target, options);
}

}  // namespace ctxrank::serving
