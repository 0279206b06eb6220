// moelab command-line entry point.
//
// Subcommands: train, check, analyze, place, bench.
// Exit codes: 0 ok, 1 assertion/runtime failure, 2 usage or config error.
// Every subcommand writes byte-reproducible artifacts; wall-clock data goes
// to a separate sidecar (run_info.json / bench.json).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include <moelab/config.hpp>
#include <moelab/placement.hpp>
#include <moelab/theory.hpp>
#include <moelab/trainer.hpp>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace moelab;

namespace {

std::string resolve_out_dir(const std::string &flag_value, const std::string &config_value)
{
    if (!flag_value.empty())
        return flag_value;
    if (const char *env = std::getenv("OUTPUT_DIR"); env && *env)
        return env;
    return config_value;
}

void write_text(const std::string &path, const std::string &text)
{
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open for writing: " + path);
    f << text;
    require(f.good(), "write failure: " + path);
}

json report_json(const BoundReport &r)
{
    json ctx = json::object();
    for (const auto &[k, v] : r.context)
        ctx[k] = v;
    return json{ { "name", r.name }, { "lhs", r.lhs },     { "rhs", r.rhs },
                 { "slack", r.slack }, { "holds", r.holds }, { "context", ctx } };
}

RunConfig load_effective_config(const std::string &config_path, std::uint64_t seed_override,
                                bool seed_given)
{
    RunConfig cfg = config_path.empty() ? default_run_config() : load_config(config_path);
    if (seed_given) {
        cfg.seed = seed_override;
        cfg.synth.seed = cfg.corpus_seed();
        cfg.train.seed = cfg.batch_seed();
    }
    cfg.validate();
    return cfg;
}

RoutingTrace load_trace_checked(const std::string &path)
{
    try {
        return read_trace(path);
    } catch (const Error &e) {
        throw UsageError(e.what());
    }
}

int cmd_train(const std::string &config_path, std::uint64_t seed, bool seed_given,
              const std::string &out_flag)
{
    RunConfig cfg = load_effective_config(config_path, seed, seed_given);
    const std::string out_dir = resolve_out_dir(out_flag, cfg.out_dir);
    if (out_dir.empty())
        throw UsageError("no output directory: pass --out, set OUTPUT_DIR, or set [run] out_dir");
    cfg.out_dir = out_dir;
    fs::create_directories(out_dir);

    const std::string echo = emit_config(cfg);
    write_text(out_dir + "/config.echo.txt", echo);

    const auto t0 = std::chrono::steady_clock::now();
    Corpus corpus = generate_corpus(cfg.synth);
    write_corpus(corpus, out_dir + "/corpus.bin");

    Rng init(cfg.init_seed());
    MoeModel model = MoeModel::init(cfg.model, init);
    plant_embeddings(model, corpus.allocation, cfg.synth.embed_sep, Rng(cfg.plant_seed()));

    TrainResult result = train(model, corpus, cfg.train, out_dir, echo);
    const auto t1 = std::chrono::steady_clock::now();
    const double seconds = std::chrono::duration<double>(t1 - t0).count();

    json info{ { "wall_seconds", seconds },
               { "steps", cfg.train.steps },
               { "checkpoints", result.checkpoint_steps } };
    write_text(out_dir + "/run_info.json", info.dump(2) + "\n");

    std::printf("trained %zu steps; final task=%.6f lb=%.6f z=%.6f sp=%.6f cp=%.6f\n",
                cfg.train.steps, result.final_loss.task, result.final_loss.lb, result.final_loss.z,
                result.final_loss.sp, result.final_loss.cp);
    std::printf("artifacts in %s (metrics.csv, %zu checkpoints, traces)\n", out_dir.c_str(),
                result.checkpoint_steps.size());
    return 0;
}

int cmd_check(const std::string &suite, std::uint64_t seed, const std::string &out_flag)
{
    const auto names = suite_names();
    if (suite != "all" && std::find(names.begin(), names.end(), suite) == names.end()) {
        std::string known = "all";
        for (const auto &n : names)
            known += ", " + n;
        throw UsageError("unknown suite '" + suite + "' (known: " + known + ")");
    }

    const auto reports = run_suite(suite, seed);
    std::string lines;
    bool all_hold = true;
    for (const BoundReport &r : reports) {
        const std::string line = report_json(r).dump();
        std::printf("%s\n", line.c_str());
        lines += line + "\n";
        if (report_applicable(r) && !r.holds)
            all_hold = false;
    }
    const std::string out_dir = resolve_out_dir(out_flag, "");
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(out_dir + "/checks.jsonl", lines);
    }
    std::fprintf(stderr, "%zu reports, %s\n", reports.size(),
                 all_hold ? "all applicable bounds hold" : "BOUND VIOLATION");
    return all_hold ? 0 : 1;
}

std::string matrix_csv(const Tensor &m)
{
    std::string out;
    char buf[64];
    for (std::size_t r = 0; r < m.rows(); r++) {
        for (std::size_t c = 0; c < m.cols(); c++) {
            std::snprintf(buf, sizeof(buf), "%.17g", m.at(r, c));
            out += buf;
            out += c + 1 < m.cols() ? "," : "\n";
        }
    }
    return out;
}

int cmd_analyze(const std::vector<std::string> &trace_paths, const std::string &out_flag)
{
    RoutingTrace trace = load_trace_checked(trace_paths[0]);
    const std::string out_dir = resolve_out_dir(out_flag, "");
    if (!out_dir.empty())
        fs::create_directories(out_dir);

    json analysis;
    analysis["trace"] = trace_paths[0];
    analysis["steps"] = trace.step_count();
    analysis["batch"] = trace.batch;
    analysis["layers"] = trace.layers;
    analysis["experts"] = trace.experts;
    analysis["top_k"] = trace.top_k;

    json kappas = json::array();
    for (std::size_t l = 0; l + 1 < trace.layers; l++) {
        std::vector<std::uint32_t> c_l, c_l1;
        for (std::size_t s = 0; s < trace.step_count(); s++)
            for (std::size_t i = 0; i < trace.batch; i++) {
                c_l.push_back(trace.top1(s, l, i));
                c_l1.push_back(trace.top1(s, l + 1, i));
            }
        KappaResult k = coupling_coefficient(c_l, c_l1, trace.experts);
        kappas.push_back(json{ { "layer", l }, { "kappa", k.kappa }, { "perm", k.perm } });
        std::printf("layers %zu->%zu: kappa=%.6f\n", l, l + 1, k.kappa);

        const Tensor heatmap = conditional_activation_matrix(trace, l);
        if (!out_dir.empty())
            write_text(out_dir + "/heatmap_layer" + std::to_string(l) + ".csv", matrix_csv(heatmap));
    }
    analysis["kappa"] = kappas;

    if (trace_paths.size() == 2) {
        RoutingTrace other = load_trace_checked(trace_paths[1]);
        const double stability = stability_fraction(trace, other);
        analysis["stability_fraction"] = stability;
        std::printf("stability fraction vs %s: %.6f\n", trace_paths[1].c_str(), stability);
    }
    if (!out_dir.empty())
        write_text(out_dir + "/analysis.json", analysis.dump(2) + "\n");
    return 0;
}

json cost_json(const CostReport &cost)
{
    return json{ { "local_fraction", cost.local_fraction },
                 { "remote_dispatches", cost.remote_dispatches },
                 { "est_throughput_ratio", cost.est_throughput_ratio } };
}

int cmd_place(const std::string &trace_path, std::size_t shards, const std::string &config_path,
              const std::string &out_flag)
{
    RoutingTrace trace = load_trace_checked(trace_path);

    std::size_t seq_positions = 0; // whole step as one sequence unless a config says otherwise
    double penalty = 0.1;
    if (!config_path.empty()) {
        RunConfig cfg = load_config(config_path);
        seq_positions = cfg.synth.seq_len - 1; // traces hold the input positions of each sequence
        penalty = cfg.remote_penalty;
        if (shards == 0)
            shards = cfg.shards;
    }
    if (shards == 0)
        throw UsageError("pass --shards N (or a --config with a [placement] section)");

    CoActivationGraph graph = build_graph(trace);
    Placement placed = partition(graph, shards);
    Placement rr = round_robin_placement(trace.layers, trace.experts, shards);
    CostReport cost = bucket_and_score(trace, placed, seq_positions, penalty);
    CostReport rr_cost = bucket_and_score(trace, rr, seq_positions, penalty);

    json placement_json{ { "shards", placed.shards },
                         { "capacity", placed.capacity },
                         { "assign", placed.assign } };
    json cost_report{ { "path_aware", cost_json(cost) },
                      { "round_robin", cost_json(rr_cost) },
                      { "remote_penalty", penalty },
                      { "seq_positions", seq_positions } };

    const std::string out_dir = resolve_out_dir(out_flag, "");
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(out_dir + "/placement.json", placement_json.dump(2) + "\n");
        write_text(out_dir + "/cost.json", cost_report.dump(2) + "\n");
    } else {
        std::printf("%s\n", placement_json.dump(2).c_str());
    }
    std::printf("path-aware local_fraction=%.6f vs round-robin %.6f (%zu shards)\n",
                cost.local_fraction, rr_cost.local_fraction, shards);
    return 0;
}

int cmd_bench(const std::string &config_path, std::uint64_t seed, bool seed_given,
              const std::string &out_flag)
{
    RunConfig cfg = load_effective_config(config_path, seed, seed_given);
    cfg.train.steps = 30;
    cfg.train.eval_every = cfg.train.steps;
    cfg.train.checkpoint_every = cfg.train.steps;

    auto timed_run = [&](const LossWeights &weights) {
        RunConfig run = cfg;
        run.train.weights = weights;
        Corpus corpus = generate_corpus(run.synth);
        Rng init(run.init_seed());
        MoeModel model = MoeModel::init(run.model, init);
        plant_embeddings(model, corpus.allocation, run.synth.embed_sep, Rng(run.plant_seed()));
        // warmup pass to fault in allocations
        RunConfig warm = run;
        warm.train.steps = 5;
        warm.train.eval_every = warm.train.checkpoint_every = 5;
        {
            MoeModel copy = model;
            train(copy, corpus, warm.train);
        }
        const auto t0 = std::chrono::steady_clock::now();
        train(model, corpus, run.train);
        const auto t1 = std::chrono::steady_clock::now();
        return std::chrono::duration<double, std::milli>(t1 - t0).count() /
               static_cast<double>(run.train.steps);
    };

    LossWeights base = cfg.train.weights;
    base.lambda_sp = 0.0;
    base.lambda_cp = 0.0;
    const double ms_base = timed_run(base);
    const double ms_full = timed_run(cfg.train.weights);
    const double ratio = ms_full / ms_base;

    std::printf("objective                 ms/iteration   ratio\n");
    std::printf("lb (+z)                   %12.3f   %.4f\n", ms_base, 1.0);
    std::printf("lb (+z) + sp + cp         %12.3f   %.4f\n", ms_full, ratio);
    std::printf("sp+cp overhead: %.2f%% of step time (reported, not asserted)\n",
                100.0 * (ratio - 1.0));

    const std::string out_dir = resolve_out_dir(out_flag, "");
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        json bench{ { "ms_per_iteration_base", ms_base },
                    { "ms_per_iteration_sp_cp", ms_full },
                    { "ratio", ratio },
                    { "steps", cfg.train.steps } };
        write_text(out_dir + "/bench.json", bench.dump(2) + "\n");
    }
    return 0;
}

} // namespace

int main(int argc, char **argv)
{
    CLI::App app{ "moelab: a deterministic mixture-of-experts laboratory" };
    app.require_subcommand(1);

    std::string config_path, out_dir, suite = "all";
    std::uint64_t seed = 0;
    std::size_t shards = 0;
    std::vector<std::string> traces;

    auto *train_cmd = app.add_subcommand("train", "generate a corpus and train a model");
    train_cmd->add_option("--config", config_path, "run configuration file")->required();
    auto *train_seed = train_cmd->add_option("--seed", seed, "override the run seed");
    train_cmd->add_option("--out", out_dir, "output directory");

    auto *check_cmd = app.add_subcommand("check", "run bound-validation suites");
    check_cmd->add_option("--suite", suite, "suite name or 'all'");
    check_cmd->add_option("--seed", seed, "suite seed")->default_val(20260810ull);
    check_cmd->add_option("--out", out_dir, "also write checks.jsonl here");

    auto *analyze_cmd = app.add_subcommand("analyze", "routing-trace diagnostics");
    analyze_cmd->add_option("trace", traces, "trace file (optionally a second for stability)")
            ->expected(1, 2)
            ->required();
    analyze_cmd->add_option("--out", out_dir, "write heatmaps and analysis.json here");

    auto *place_cmd = app.add_subcommand("place", "path-aware expert placement from a trace");
    place_cmd->add_option("trace", traces, "trace file")->expected(1)->required();
    place_cmd->add_option("--shards", shards, "number of simulated shards");
    place_cmd->add_option("--config", config_path, "run config providing seq_len and penalty");
    place_cmd->add_option("--out", out_dir, "write placement.json and cost.json here");

    auto *bench_cmd = app.add_subcommand("bench", "measure the sp+cp step-time overhead");
    bench_cmd->add_option("--config", config_path, "run configuration file");
    auto *bench_seed = bench_cmd->add_option("--seed", seed, "override the run seed");
    bench_cmd->add_option("--out", out_dir, "write bench.json here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        // CLI11 prints its own message; --help lands here with exit code 0
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train_cmd->parsed())
            return cmd_train(config_path, seed, !train_seed->empty(), out_dir);
        if (check_cmd->parsed())
            return cmd_check(suite, seed, out_dir);
        if (analyze_cmd->parsed())
            return cmd_analyze(traces, out_dir);
        if (place_cmd->parsed())
            return cmd_place(traces[0], shards, config_path, out_dir);
        if (bench_cmd->parsed())
            return cmd_bench(config_path, seed, !bench_seed->empty(), out_dir);
    } catch (const UsageError &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const Error &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception &e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return 2;
}
