// laqlab: command-line front end for the eviction lab.
//
//   laqlab gen-trace      write a synthetic divergence trace
//   laqlab run            policy x budget grid, recall (and decode in toy mode)
//   laqlab recall-sweep   recall of a sliding query window along one trace
//   laqlab ablate         grid repeated over lookahead settings
//   laqlab latency        per-stage timing of the toy pipeline
//   laqlab export-queries dump Q-cache and response queries for plotting
//
// Exit status: 0 when every cell succeeded, 1 when some cell failed,
// 2 on bad arguments or unreadable inputs.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "laq/experiment.hpp"

namespace fs = std::filesystem;
using namespace laq;

namespace {

struct CommonArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> policies;
    std::vector<std::size_t> budgets;
    std::optional<std::size_t> steps;
    std::string mode;  // raw | softmax
    std::string format = "json";
    std::vector<std::string> traces;
    bool toy = false;
};

void add_common(CLI::App* app, CommonArgs& a) {
    app->add_option("--config", a.config, "JSON experiment config")->check(CLI::ExistingFile);
    app->add_option("--seed", a.seed, "base seed");
    app->add_option("--out", a.out, "output directory (stdout when omitted)");
    app->add_option("--policy", a.policies, "policy id, repeatable");
    app->add_option("--budget", a.budgets, "KV budget per head, repeatable");
    app->add_option("--steps", a.steps, "lookahead steps");
    app->add_option("--mode", a.mode, "score mode")->check(CLI::IsMember({"raw", "softmax"}));
    app->add_option("--format", a.format, "output format")->check(CLI::IsMember({"json", "csv"}));
    app->add_option("--trace", a.traces, "KVTR trace file, repeatable")->check(CLI::ExistingFile);
    app->add_flag("--toy", a.toy, "run the toy model instead of replaying traces");
}

ExperimentConfig build_config(const CommonArgs& a) {
    ExperimentConfig c = a.config.empty() ? ExperimentConfig{} : load_experiment_config(a.config);
    if (a.toy) c.mode = RunMode::toy;
    if (a.seed) c.seed = *a.seed;
    if (!a.policies.empty()) {
        c.policies.clear();
        for (const auto& p : a.policies) c.policies.push_back(parse_policy(p));
    }
    if (!a.budgets.empty()) c.budgets = a.budgets;
    if (a.steps) c.policy.lookahead_steps = *a.steps;
    if (!a.mode.empty()) c.policy.score_mode = parse_score_mode(a.mode);
    if (!a.traces.empty()) c.traces = a.traces;
    if (!a.out.empty()) c.out_dir = a.out;
    c.validate();
    return c;
}

// Writes `text` to <out>/<stem>.<ext>, or to stdout when no directory is set.
void emit(const std::string& out, const std::string& stem, const std::string& ext, const std::string& text) {
    if (out.empty()) {
        std::cout << text;
        if (!text.empty() && text.back() != '\n') std::cout << '\n';
        return;
    }
    fs::create_directories(out);
    const fs::path path = fs::path(out) / (stem + "." + ext);
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    if (!text.empty() && text.back() != '\n') f << '\n';
    std::cerr << "wrote " << path.string() << '\n';
}

void report_failures(const ResultRecord& r) {
    for (const Cell& c : r.cells)
        if (!c.ok) std::cerr << "cell failed: " << c.source << " " << to_string(c.policy) << " B=" << c.budget << ": "
                             << c.error << '\n';
}

int cmd_run(const CommonArgs& a) {
    const ExperimentConfig c = build_config(a);
    const ResultRecord r = run_experiment(c);
    if (a.format == "csv") emit(c.out_dir, "result", "csv", result_csv(r));
    else emit(c.out_dir, "result", "json", result_json(r).dump(2));
    report_failures(r);
    return r.failures() == 0 ? 0 : 1;
}

int cmd_latency(CommonArgs a) {
    a.toy = true;
    const ExperimentConfig c = build_config(a);
    const ResultRecord r = run_experiment(c);
    json rows = json::array();
    std::ostringstream csv;
    csv << "source,policy,budget,status";
    for (auto name : kStageNames) csv << ',' << name << "_s," << name << "_fraction";
    csv << '\n';
    for (const Cell& cell : r.cells) {
        json row{{"source", cell.source}, {"policy", to_string(cell.policy)}, {"budget", cell.budget}, {"ok", cell.ok}};
        csv << csv_escape(cell.source) << ',' << to_string(cell.policy) << ',' << cell.budget << ','
            << (cell.ok ? "ok" : "failed");
        if (cell.latency) {
            row["latency"] = latency_json(*cell.latency);
            for (std::size_t i = 0; i < 4; ++i) csv << ',' << cell.latency->seconds[i] << ',' << cell.latency->fractions[i];
        } else {
            row["error"] = cell.error;
            csv << ",,,,,,,,";
        }
        csv << '\n';
        rows.push_back(std::move(row));
    }
    if (a.format == "csv") emit(c.out_dir, "latency", "csv", csv.str());
    else emit(c.out_dir, "latency", "json", json{{"schema_version", kSchemaVersion}, {"cells", rows}}.dump(2));
    report_failures(r);
    return r.failures() == 0 ? 0 : 1;
}

struct GenArgs {
    std::string out;
    SyntheticParams p;
};

int cmd_gen_trace(const GenArgs& g) {
    const SyntheticTrace s = gen_synthetic_trace(g.p);
    if (const auto parent = fs::path(g.out).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_trace(s.bundle, g.out);
    std::cerr << "wrote " << g.out << " (" << g.p.layers << "x" << g.p.heads << " heads, T_input " << g.p.t_input
              << ", " << g.p.needle_count << " needles)\n";
    return 0;
}

struct SweepArgs {
    std::size_t window = 8;
    std::string source = "response";
};

TraceBundle first_trace(const ExperimentConfig& c) {
    if (!c.traces.empty()) return read_trace(c.traces.front());
    SyntheticParams p = c.synthetic;
    p.seed = c.seed;
    return gen_synthetic_trace(p).bundle;
}

int cmd_sweep(const CommonArgs& a, const SweepArgs& s) {
    const ExperimentConfig c = build_config(a);
    const TraceBundle b = first_trace(c);
    const SweepCurve curve =
        window_recall_sweep(b, s.window, c.budgets.front(), c.policy.score_mode,
                            s.source == "lookahead" ? ResponseSource::lookahead : ResponseSource::response);
    if (a.format == "csv") emit(c.out_dir, "sweep", "csv", sweep_csv(curve));
    else emit(c.out_dir, "sweep", "json", sweep_json(curve).dump(2));
    return 0;
}

struct AblateArgs {
    std::vector<std::size_t> steps{1, 2, 4, 8};
    std::vector<std::string> lookahead_policies;
    std::vector<std::size_t> lookahead_budgets;
    std::vector<std::string> sources;
};

int cmd_ablate(CommonArgs a, const AblateArgs& x) {
    a.steps.reset();
    AblationConfig ab;
    ab.base = build_config(a);
    ab.steps = x.steps;
    for (const auto& p : x.lookahead_policies) ab.lookahead_policies.push_back(parse_policy(p));
    ab.lookahead_budgets = x.lookahead_budgets;
    for (const auto& s : x.sources)
        ab.qcache_sources.push_back(s == "lookahead" ? ResponseSource::lookahead : ResponseSource::response);
    const auto vs = run_ablation(ab);
    if (a.format == "csv") emit(ab.base.out_dir, "ablation", "csv", ablation_csv(vs));
    else emit(ab.base.out_dir, "ablation", "json", ablation_json(vs).dump(2));
    std::size_t failed = 0;
    for (const auto& v : vs) {
        report_failures(v.result);
        failed += v.result.failures();
    }
    return failed == 0 ? 0 : 1;
}

void dump_rows(std::ostream& csv, json& arr, const std::string& kind, const Grid<Mat>& g, std::size_t rows) {
    for (std::size_t l = 0; l < g.layers(); ++l)
        for (std::size_t h = 0; h < g.heads(); ++h) {
            const Mat& m = g.at(l, h);
            for (std::size_t r = 0; r < std::min(rows, m.rows()); ++r) {
                csv << kind << ',' << l << ',' << h << ',' << r;
                std::vector<float> v(m.row(r).begin(), m.row(r).end());
                for (float x : v) csv << ',' << x;
                csv << '\n';
                arr.push_back({{"kind", kind}, {"layer", l}, {"head", h}, {"index", r}, {"query", v}});
            }
        }
}

int cmd_export(const CommonArgs& a) {
    const ExperimentConfig c = build_config(a);
    Grid<Mat> qcache, response;
    std::size_t steps = c.policy.lookahead_steps;
    if (c.mode == RunMode::toy) {
        const Model model = init_model(c.model);
        const auto prompt = detail::random_prompt(c.prompt_len, c.model.vocab, derive_seed(c.seed, 0));
        const PrefillResult pre = prefill(model, prompt);
        qcache = run_lookahead(model, pre, c.policy).qcache.queries;
        response = golden_run(model, pre, c.decode_steps).queries.queries;
    } else {
        const TraceBundle b = first_trace(c);
        qcache = c.qcache_source == ResponseSource::lookahead ? b.lookahead_queries : b.response_queries;
        response = b.response_queries;
    }
    std::ostringstream csv;
    csv << "kind,layer,head,index,values...\n";
    json arr = json::array();
    dump_rows(csv, arr, "qcache", qcache, steps);
    dump_rows(csv, arr, "response", response, std::numeric_limits<std::size_t>::max());
    if (a.format == "csv") emit(c.out_dir, "queries", "csv", csv.str());
    else emit(c.out_dir, "queries", "json", json{{"schema_version", kSchemaVersion}, {"rows", arr}}.dump());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache eviction lab: lookahead Q-cache and baseline policies"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-trace", "write a synthetic divergence trace");
    gen_cmd->add_option("--out", gen.out, "output .kvtr path")->required();
    gen_cmd->add_option("--seed", gen.p.seed);
    gen_cmd->add_option("--layers", gen.p.layers);
    gen_cmd->add_option("--heads", gen.p.heads);
    gen_cmd->add_option("--head-dim", gen.p.head_dim);
    gen_cmd->add_option("--t-input", gen.p.t_input);
    gen_cmd->add_option("--t-response", gen.p.t_response);
    gen_cmd->add_option("--t-lookahead", gen.p.t_lookahead);
    gen_cmd->add_option("--needles", gen.p.needle_count);
    gen_cmd->add_option("--groups", gen.p.needle_groups);
    gen_cmd->add_option("--divergence", gen.p.divergence);
    gen_cmd->add_option("--lookahead-mix", gen.p.lookahead_mix);
    gen_cmd->add_option("--noise", gen.p.noise);

    CommonArgs run_args, sweep_args, ablate_args, latency_args, export_args;
    auto* run_cmd = app.add_subcommand("run", "policy x budget grid");
    add_common(run_cmd, run_args);

    SweepArgs sweep;
    auto* sweep_cmd = app.add_subcommand("recall-sweep", "recall of a sliding query window (first --budget is used)");
    add_common(sweep_cmd, sweep_args);
    sweep_cmd->add_option("--window", sweep.window, "window length in queries")->check(CLI::PositiveNumber);
    sweep_cmd->add_option("--source", sweep.source, "record the window slides into")
        ->check(CLI::IsMember({"response", "lookahead"}));

    AblateArgs ablate;
    auto* ablate_cmd = app.add_subcommand("ablate", "repeat the grid over lookahead settings");
    add_common(ablate_cmd, ablate_args);
    ablate_cmd->add_option("--step", ablate.steps, "lookahead steps to try, repeatable");
    ablate_cmd->add_option("--lookahead-policy", ablate.lookahead_policies, "repeatable");
    ablate_cmd->add_option("--lookahead-budget", ablate.lookahead_budgets, "repeatable");
    ablate_cmd->add_option("--qcache-source", ablate.sources, "lookahead|response, repeatable")
        ->check(CLI::IsMember({"response", "lookahead"}));

    auto* latency_cmd = app.add_subcommand("latency", "per-stage timing of the toy pipeline");
    add_common(latency_cmd, latency_args);

    auto* export_cmd = app.add_subcommand("export-queries", "dump Q-cache and response queries");
    add_common(export_cmd, export_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen_cmd) return cmd_gen_trace(gen);
        if (*run_cmd) return cmd_run(run_args);
        if (*sweep_cmd) return cmd_sweep(sweep_args, sweep);
        if (*ablate_cmd) return cmd_ablate(ablate_args, ablate);
        if (*latency_cmd) return cmd_latency(latency_args);
        if (*export_cmd) return cmd_export(export_args);
    } catch (const TraceError& e) {
        std::cerr << "laqlab: trace error (" << to_string(e.code()) << "): " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "laqlab: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
