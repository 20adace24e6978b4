// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: gen-data, build-kb, train, eval, ablate, serve,
// bench. Every subcommand reads one optional JSON config file; flags override
// config values. Exit codes: 0 success, 1 validation/usage error, 2 runtime
// error.

#include "ctxrank/serving.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using nlohmann::json;
using namespace ctxrank;

struct CliState {
    json config;  // parsed --config file (empty object when absent)

    std::optional<std::uint64_t> seed;
    std::optional<double> tau;
    std::optional<double> beta;
    std::optional<double> omega;
    std::optional<int> steps;
    std::string preset = "desk";
    std::string bind = "127.0.0.1:8080";
};

const json& section(const json& config, const char* name) {
    static const json empty = json::object();
    const auto it = config.find(name);
    return it == config.end() ? empty : *it;
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    const auto it = j.find(key);
    if (it != j.end()) out = it->get<T>();
}

pipeline::WorldConfig world_config(const CliState& s) {
    pipeline::WorldConfig c;
    const json& j = section(s.config, "world");
    maybe(j, "n_users", c.n_users);
    maybe(j, "n_stores", c.n_stores);
    maybe(j, "n_aois", c.n_aois);
    maybe(j, "n_items", c.n_items);
    maybe(j, "n_categories", c.n_categories);
    maybe(j, "min_history", c.min_history);
    maybe(j, "max_history", c.max_history);
    maybe(j, "light_user_fraction", c.light_user_fraction);
    maybe(j, "light_min_history", c.light_min_history);
    maybe(j, "light_max_history", c.light_max_history);
    maybe(j, "promo_rate", c.promo_rate);
    maybe(j, "holiday_rate", c.holiday_rate);
    c.validate();
    return c;
}

std::uint64_t world_seed(const CliState& s) {
    std::uint64_t seed = 7;
    maybe(section(s.config, "world"), "seed", seed);
    if (s.seed) seed = *s.seed;
    return seed;
}

pipeline::ModelConfig model_config(const CliState& s) {
    pipeline::ModelConfig c;
    const json& j = section(s.config, "model");
    std::string variant = pipeline::variant_name(c.variant);
    maybe(j, "variant", variant);
    c.variant = pipeline::parse_variant(variant);
    maybe(j, "d_static", c.d_static);
    maybe(j, "d_dce", c.d_dce);
    maybe(j, "d_behavior", c.d_behavior);
    maybe(j, "d_collective", c.d_collective);
    maybe(j, "d_guidance", c.d_guidance);
    maybe(j, "d_fused", c.d_fused);
    maybe(j, "ffn_hidden", c.ffn_hidden);
    maybe(j, "rank_static", c.rank_static);
    maybe(j, "rank_dynamic", c.rank_dynamic);
    maybe(j, "rank_personalized", c.rank_personalized);
    maybe(j, "rank_collective", c.rank_collective);
    maybe(j, "tau", c.tau);
    maybe(j, "beta", c.beta);
    maybe(j, "init_seed", c.init_seed);
    const json& f = section(s.config, "flow");
    maybe(f, "omega", c.flow.omega);
    maybe(f, "mu", c.flow.mu);
    maybe(f, "sigma", c.flow.sigma);
    maybe(f, "p_equal", c.flow.p_equal);
    maybe(f, "p_drop", c.flow.p_drop);
    maybe(f, "euler_steps", c.flow.euler_steps);

    if (s.tau) c.tau = *s.tau;
    if (s.beta) c.beta = *s.beta;
    if (s.omega) c.flow.omega = *s.omega;
    if (s.steps) c.flow.euler_steps = *s.steps;
    if (s.seed) c.init_seed = *s.seed;
    c.validate();
    return c;
}

pipeline::TrainOptions train_options(const CliState& s) {
    pipeline::TrainOptions t =
        s.preset == "paper" ? pipeline::paper_preset() : pipeline::desk_preset();
    const json& j = section(s.config, "train");
    maybe(j, "lr", t.lr);
    maybe(j, "flow_lr", t.flow_lr);
    maybe(j, "batch", t.batch);
    maybe(j, "stage1_epochs", t.stage1_epochs);
    maybe(j, "stage2_epochs", t.stage2_epochs);
    maybe(j, "seed", t.seed);
    maybe(j, "checkpoint_path", t.checkpoint_path);
    if (s.seed) t.seed = *s.seed;
    t.validate();
    return t;
}

serving::ServeOptions serve_options(const CliState& s) {
    serving::ServeOptions o;
    const json& j = section(s.config, "serve");
    maybe(j, "reason_delay_ms", o.reason_delay_ms);
    maybe(j, "kb_apply_interval_ms", o.kb_apply_interval_ms);
    maybe(j, "cce_refresh_interval_ms", o.cce_refresh_interval_ms);
    return o;
}

int cmd_gen_data(const CliState& s, const std::string& out, std::size_t count) {
    const auto world = pipeline::generate_world(world_config(s), world_seed(s));
    const auto data = pipeline::generate_interactions(world, count);
    pipeline::save_dataset(data, out);
    std::cout << "wrote " << data.size() << " samples to " << out << "\n";
    return 0;
}

int cmd_build_kb(const CliState& s, const std::string& out, const std::string& cce_out) {
    auto world = pipeline::generate_world(world_config(s), world_seed(s));
    pipeline::RankModel model(std::move(world), model_config(s));
    model.kb().save(out);
    std::cout << "knowledge base: " << model.kb().entry_count() << " entries (tau "
              << model.kb().tau() << ") -> " << out << "\n";
    if (!cce_out.empty()) {
        const auto rows = model.collective_cache_rows();
        cce::save_embedding_cache(rows, cce_out);
        std::cout << "collective cache: " << rows.size() << " embeddings -> " << cce_out << "\n";
    }
    return 0;
}

void print_eval(const pipeline::EvalReport& r) {
    std::printf("ctr_auc %.4f  cvr_auc %.4f  (n=%zu, clicked=%zu)\n", r.ctr_auc, r.cvr_auc,
                r.n, r.n_clicked);
    std::printf("significance thresholds: statistical ±%.4f AUC, practical ±%.3f AUC\n",
                pipeline::kStatSignificantAuc, pipeline::kPracticalSignificantAuc);
}

int cmd_train(const CliState& s, const std::string& out, const std::string& data_path,
              std::size_t count) {
    auto world = pipeline::generate_world(world_config(s), world_seed(s));
    pipeline::Dataset data = data_path.empty()
                                 ? pipeline::generate_interactions(world, count)
                                 : pipeline::load_dataset(data_path);
    auto [train_set, val_set] = pipeline::split_by_user(std::move(data));
    require(!train_set.empty() && !val_set.empty(), "train: user split left a side empty");

    pipeline::RankModel model(std::move(world), model_config(s));
    const auto t0 = std::chrono::steady_clock::now();
    const auto report = pipeline::train(model, train_set, train_options(s));
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!report.stage1_epoch_losses.empty()) {
        std::printf("flow stage: %zu epochs, final loss %.6f\n",
                    report.stage1_epoch_losses.size(), report.stage1_epoch_losses.back());
    }
    if (!report.stage2_batch_losses.empty()) {
        std::printf("ranker stage: %zu batches, final loss %.6f\n",
                    report.stage2_batch_losses.size(), report.stage2_batch_losses.back());
    }
    std::printf("trained on %zu samples in %.1fs\n", train_set.size(), secs);
    print_eval(pipeline::evaluate(model, val_set));
    if (!out.empty()) {
        pipeline::save_model(model, out);
        std::cout << "model -> " << out << "\n";
    }
    return 0;
}

int cmd_eval(const CliState&, const std::string& model_path, const std::string& data_path,
             std::size_t count) {
    pipeline::RankModel model = pipeline::load_model(model_path);
    pipeline::Dataset data;
    if (data_path.empty()) {
        // Evaluate on the held-out side of the embedded world's interactions.
        data = pipeline::generate_interactions(model.world(), count);
        data = pipeline::split_by_user(std::move(data)).second;
    } else {
        data = pipeline::load_dataset(data_path);
    }
    require(!data.empty(), "eval: no samples to evaluate");
    print_eval(pipeline::evaluate(model, data));
    return 0;
}

int cmd_ablate(const CliState& s, const std::string& out, const std::string& variants_csv) {
    pipeline::AblationConfig cfg;
    cfg.world = world_config(s);
    cfg.world_seed = world_seed(s);
    cfg.model = model_config(s);
    cfg.train = train_options(s);
    const json& j = section(s.config, "ablation");
    maybe(j, "n_train", cfg.n_train);
    maybe(j, "n_val", cfg.n_val);

    std::vector<pipeline::Variant> variants;
    if (variants_csv.empty()) {
        variants = pipeline::all_variants();
    } else {
        std::stringstream ss(variants_csv);
        std::string name;
        while (std::getline(ss, name, ',')) variants.push_back(pipeline::parse_variant(name));
    }

    const auto rows = pipeline::run_ablation(cfg, variants);
    std::printf("%-22s %8s %8s %14s %14s\n", "variant", "ctr_auc", "cvr_auc", "rela_impr_ctr",
                "rela_impr_cvr");
    for (const auto& r : rows) {
        std::printf("%-22s %8.4f %8.4f %13.2f%% %13.2f%%\n", r.variant.c_str(), r.ctr_auc,
                    r.cvr_auc, r.rela_impr_ctr, r.rela_impr_cvr);
    }
    if (!out.empty()) {
        pipeline::save_ablation_csv(rows, out);
        std::cout << "table -> " << out << "\n";
    }
    return 0;
}

int cmd_serve(const CliState& s, const std::string& model_path, const std::string& kb_path,
              const std::string& cce_path) {
    serving::serve(model_path, kb_path, cce_path, s.bind, serve_options(s));
    return 0;
}

int cmd_bench(const CliState& s, std::size_t requests, int concurrency, double warm) {
    serving::BenchOptions o;
    const json& j = section(s.config, "bench");
    maybe(j, "n_requests", o.n_requests);
    maybe(j, "concurrency", o.concurrency);
    maybe(j, "warm_fraction", o.warm_fraction);
    if (requests) o.n_requests = requests;
    if (concurrency) o.concurrency = concurrency;
    if (warm >= 0.0) o.warm_fraction = warm;
    if (s.seed) o.seed = *s.seed;

    const auto report = serving::bench(s.bind, o);
    std::printf("requests %zu  tp50 %.3fms  tp90 %.3fms  tp99 %.3fms  hit_rate %.3f\n",
                report.count, report.tp50, report.tp90, report.tp99, report.hit_rate);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ctxrank: contextual takeout-ad ranking pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    CliState s;
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    std::uint64_t seed_flag = 0;
    auto* seed_opt = app.add_option("--seed", seed_flag, "master seed override");
    double tau_flag = 0, beta_flag = 0, omega_flag = 0;
    int steps_flag = 0;
    auto* tau_opt = app.add_option("--tau", tau_flag, "knowledge-base similarity threshold");
    auto* beta_opt = app.add_option("--beta", beta_flag, "store/AOI mixing weight");
    auto* omega_opt = app.add_option("--omega", omega_flag, "guidance strength");
    auto* steps_opt = app.add_option("--steps", steps_flag, "Euler integration steps");
    app.add_option("--preset", s.preset, "training preset")
        ->check(CLI::IsMember({"desk", "paper"}));
    auto* bind_opt = app.add_option("--bind", s.bind, "host:port to serve on / benchmark");

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic interaction dataset");
    std::string gen_out = "dataset.jsonl";
    std::size_t gen_count = 10000;
    gen->add_option("--out", gen_out, "output JSONL path");
    gen->add_option("--count", gen_count, "number of samples");

    auto* bkb = app.add_subcommand("build-kb", "aggregate logs and build the knowledge base");
    std::string bkb_out = "kb.jsonl", bkb_cce;
    bkb->add_option("--out", bkb_out, "knowledge-base output path");
    bkb->add_option("--cce-out", bkb_cce, "also write the collective embedding cache");

    auto* trn = app.add_subcommand("train", "train the ranker (flow stage first)");
    std::string trn_out = "model.json", trn_data;
    std::size_t trn_count = 12000;
    trn->add_option("--out", trn_out, "model output path");
    trn->add_option("--data", trn_data, "train on an existing dataset file");
    trn->add_option("--count", trn_count, "samples to generate when --data is absent");

    auto* evl = app.add_subcommand("eval", "evaluate a trained model");
    std::string evl_model = "model.json", evl_data;
    std::size_t evl_count = 12000;
    evl->add_option("--model", evl_model, "model path");
    evl->add_option("--data", evl_data, "evaluate on an existing dataset file");
    evl->add_option("--count", evl_count, "samples to generate when --data is absent");

    auto* abl = app.add_subcommand("ablate", "train and compare model variants");
    std::string abl_out = "ablation.csv", abl_variants;
    abl->add_option("--out", abl_out, "CSV output path");
    abl->add_option("--variants", abl_variants, "comma-separated variant list (default: all)");

    auto* srv = app.add_subcommand("serve", "serve a trained model over HTTP");
    std::string srv_model = "model.json", srv_kb, srv_cce;
    srv->add_option("--model", srv_model, "model path");
    srv->add_option("--kb", srv_kb, "knowledge-base file (default: rebuild from the world)");
    srv->add_option("--cce-cache", srv_cce, "collective cache file");

    auto* bch = app.add_subcommand("bench", "benchmark a running service");
    std::size_t bch_requests = 0;
    int bch_concurrency = 0;
    double bch_warm = -1.0;
    bch->add_option("--requests", bch_requests, "number of timed requests");
    bch->add_option("--concurrency", bch_concurrency, "client threads");
    bch->add_option("--warm", bch_warm, "fraction of requests on the warmed context")
        ->check(CLI::Range(0.0, 1.0));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }
    (void)bind_opt;

    try {
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            in >> s.config;
        } else {
            s.config = json::object();
        }
        if (*seed_opt) s.seed = seed_flag;
        if (*tau_opt) s.tau = tau_flag;
        if (*beta_opt) s.beta = beta_flag;
        if (*omega_opt) s.omega = omega_flag;
        if (*steps_opt) s.steps = steps_flag;

        if (app.got_subcommand(gen)) return cmd_gen_data(s, gen_out, gen_count);
        if (app.got_subcommand(bkb)) return cmd_build_kb(s, bkb_out, bkb_cce);
        if (app.got_subcommand(trn)) return cmd_train(s, trn_out, trn_data, trn_count);
        if (app.got_subcommand(evl)) return cmd_eval(s, evl_model, evl_data, evl_count);
        if (app.got_subcommand(abl)) return cmd_ablate(s, abl_out, abl_variants);
        if (app.got_subcommand(srv)) return cmd_serve(s, srv_model, srv_kb, srv_cce);
        if (app.got_subcommand(bch)) return cmd_bench(s, bch_requests, bch_concurrency, bch_warm);
        std::cerr << app.help();
        return 1;
    } catch (const ctxrank::InvalidArgument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
}
