// SPDX-License-Identifier: Apache-2.0
//
// HTTP scoring service: a real-time pipeline querying the knowledge base and
// the collective embedding cache, background update tasks, and a latency
// benchmark client with nearest-rank percentiles.

#pragma once

#include "ctxrank/pipeline.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ctxrank::serving {

struct ScoreCandidate {
    std::string item_id;
    std::string store_id;  // optional; must match the item's store when given
};

struct ScoreRequest {
    std::string request_id;  // client-chosen, unique per connection
    std::string user_id;
    std::map<std::string, std::string> dynamic_features;
    std::vector<ScoreCandidate> candidates;

    void validate() const;  // at least one candidate, non-empty ids
};

struct LatencyReport {
    std::size_t count = 0;
    double tp50 = 0.0;  // milliseconds
    double tp90 = 0.0;
    double tp99 = 0.0;
    double hit_rate = 0.0;  // knowledge-base cache hit fraction

    void validate() const;  // tp50 <= tp90 <= tp99, hit_rate in [0, 1]
};

/// Value at rank ceil(pct/100 · n) of the sorted data, pct in (0, 100].
double nearest_rank_percentile(std::span<const double> values, double pct);

/// Transport-free handler result, so tests can drive the protocol directly.
struct Reply {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

struct ServeOptions {
    std::string host = "127.0.0.1";
    int port = 8080;                  // 0 picks an ephemeral port
    int reason_delay_ms = 1;          // simulated reasoning latency on KB misses
    int kb_apply_interval_ms = 0;     // 0 disables the background updater
    int cce_refresh_interval_ms = 0;  // 0 = load-time cache only

    void validate() const;
};

/// HTTP front end over a RankModel.
///
/// Endpoints: POST /v1/score, GET /v1/kb/stats, POST /v1/kb/apply,
/// POST /v1/kb/rebuild, GET /v1/meta, GET /healthz. Malformed input yields
/// 400 with the offending field path, unknown ids 404, and internal failures
/// 500 tagged with the responsible module.
class Server {
  public:
    Server(pipeline::RankModel model, const ServeOptions& options);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds and serves on a background thread; returns the bound port.
    int start();
    /// Blocks until stop() is called from another thread (or a signal handler).
    void wait();
    void stop();

    Reply handle_health() const;
    Reply handle_score(const std::string& body);
    Reply handle_kb_stats() const;
    Reply handle_kb_apply();
    Reply handle_kb_rebuild(const std::string& body);
    Reply handle_meta() const;

    pipeline::RankModel& model() { return model_; }
    const ServeOptions& options() const { return options_; }

  private:
    struct Impl;  // owns the httplib server and background update threads

    pipeline::RankModel model_;
    ServeOptions options_;
    std::unique_ptr<Impl> impl_;
};

/// Loads the model (and optional knowledge-base / collective-cache files;
/// empty paths keep the artifacts rebuilt from the embedded world) and
/// assembles a server.
Server make_server(const std::string& model_path, const std::string& kb_path,
                   const std::string& cce_cache_path, const ServeOptions& options);

/// Blocking entry point: serve until the process is interrupted.
void serve(const std::string& model_path, const std::string& kb_path,
           const std::string& cce_cache_path, const std::string& bind_address,
           ServeOptions options = {});

struct BenchOptions {
    std::size_t n_requests = 200;
    int concurrency = 4;
    double warm_fraction = 1.0;  // share of requests reusing one warmed context
    std::uint64_t seed = 1;

    void validate() const;
};

/// Issues n timed requests against a live service at "host:port". The warm
/// share reuses a context that was inserted and applied during an untimed
/// warm-up; the rest carry a unique context and always miss.
LatencyReport bench(const std::string& target, const BenchOptions& options);
LatencyReport bench(const std::string& target, std::size_t n_requests, int concurrency,
                    double warm_fraction);

}  // namespace ctxrank::serving
