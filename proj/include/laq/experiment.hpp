#pragma once

// Experiment grids over (trace, policy, budget), JSON/CSV reports, and the
// Q-cache length / quality ablations.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "laq/metrics.hpp"
#include "laq/model.hpp"
#include "laq/pipeline.hpp"
#include "laq/policies.hpp"
#include "laq/rng.hpp"
#include "laq/synthetic.hpp"
#include "laq/trace.hpp"

namespace laq {

using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

enum class RunMode { toy, trace };

struct ExperimentConfig {
    RunMode mode = RunMode::trace;
    std::vector<PolicyId> policies{PolicyId::snapkv, PolicyId::laq, PolicyId::laq_pp};
    std::vector<std::size_t> budgets{8, 16, 32, 64};
    PolicyConfig policy;
    std::uint64_t seed = 0;

    // trace mode: files to replay, or `synthetic_count` generated traces
    std::vector<std::string> traces;
    SyntheticParams synthetic;
    std::size_t synthetic_count = 1;
    ResponseSource qcache_source = ResponseSource::lookahead;

    // toy mode
    ModelConfig model;
    std::size_t prompt_len = 256;
    std::size_t decode_steps = 32;
    std::size_t prompts = 1;

    std::string out_dir;

    void validate() const {
        if (policies.empty()) throw std::invalid_argument("ExperimentConfig: no policies");
        if (budgets.empty()) throw std::invalid_argument("ExperimentConfig: no budgets");
        for (std::size_t b : budgets)
            if (b == 0) throw std::invalid_argument("ExperimentConfig: budgets must be positive");
        for (const auto& t : traces)
            if (!std::filesystem::exists(t)) throw std::invalid_argument("ExperimentConfig: trace not found: " + t);
        if (mode == RunMode::toy && (prompt_len == 0 || decode_steps == 0 || prompts == 0)) {
            throw std::invalid_argument("ExperimentConfig: prompt_len, decode_steps and prompts must be >= 1");
        }
    }
};

struct Cell {
    std::string source;
    PolicyId policy = PolicyId::full;
    std::size_t budget = 0;
    bool ok = false;
    std::string error;
    std::optional<RecallReport> recall;
    std::optional<LatencyReport> latency;
    std::vector<TokenId> transcript;
    std::vector<TokenId> lookahead_tokens;
    std::vector<std::string> notes;
};

struct ResultRecord {
    ExperimentConfig config;
    std::vector<Cell> cells;

    std::size_t failures() const {
        std::size_t n = 0;
        for (const auto& c : cells) n += c.ok ? 0 : 1;
        return n;
    }
};

// Config <-> JSON -------------------------------------------------------------

inline json policy_config_json(const PolicyConfig& p) {
    json j{{"budget", p.budget},
           {"window_len", p.window_len},
           {"lookahead_steps", p.lookahead_steps},
           {"sink_count", p.sink_count},
           {"pool_kernel", p.pool_kernel},
           {"score_mode", to_string(p.score_mode)},
           {"keep_window", p.keep_window},
           {"lookahead_policy", to_string(p.lookahead_policy)},
           {"lookahead_budget", p.lookahead_budget}};
    j["pyramid_floor"] = p.pyramid_floor ? json(*p.pyramid_floor) : json(nullptr);
    return j;
}

inline void read_policy_config(const json& j, PolicyConfig& p) {
    p.budget = j.value("budget", p.budget);
    p.window_len = j.value("window_len", p.window_len);
    p.lookahead_steps = j.value("lookahead_steps", p.lookahead_steps);
    p.sink_count = j.value("sink_count", p.sink_count);
    p.pool_kernel = j.value("pool_kernel", p.pool_kernel);
    if (j.contains("score_mode")) p.score_mode = parse_score_mode(j["score_mode"].get<std::string>());
    p.keep_window = j.value("keep_window", p.keep_window);
    if (j.contains("pyramid_floor") && !j["pyramid_floor"].is_null()) p.pyramid_floor = j["pyramid_floor"].get<std::size_t>();
    if (j.contains("lookahead_policy")) p.lookahead_policy = parse_policy(j["lookahead_policy"].get<std::string>());
    p.lookahead_budget = j.value("lookahead_budget", p.lookahead_budget);
}

inline json synthetic_json(const SyntheticParams& s) {
    return {{"layers", s.layers},         {"heads", s.heads},
            {"head_dim", s.head_dim},     {"t_input", s.t_input},
            {"t_response", s.t_response}, {"t_lookahead", s.t_lookahead},
            {"vocab", s.vocab},           {"needle_count", s.needle_count},
            {"needle_groups", s.needle_groups}, {"divergence", s.divergence},
            {"lookahead_mix", s.lookahead_mix}, {"noise", s.noise},
            {"seed", s.seed}};
}

inline void read_synthetic(const json& j, SyntheticParams& s) {
    s.layers = j.value("layers", s.layers);
    s.heads = j.value("heads", s.heads);
    s.head_dim = j.value("head_dim", s.head_dim);
    s.t_input = j.value("t_input", s.t_input);
    s.t_response = j.value("t_response", s.t_response);
    s.t_lookahead = j.value("t_lookahead", s.t_lookahead);
    s.vocab = j.value("vocab", s.vocab);
    s.needle_count = j.value("needle_count", s.needle_count);
    s.needle_groups = j.value("needle_groups", s.needle_groups);
    s.divergence = j.value("divergence", s.divergence);
    s.lookahead_mix = j.value("lookahead_mix", s.lookahead_mix);
    s.noise = j.value("noise", s.noise);
    s.seed = j.value("seed", s.seed);
}

inline json model_json(const ModelConfig& m) {
    return {{"vocab", m.vocab},       {"layers", m.layers},   {"heads", m.heads},
            {"head_dim", m.head_dim}, {"mlp_mult", m.mlp_mult}, {"max_pos", m.max_pos},
            {"seed", m.seed},         {"rope_enabled", m.rope_enabled}};
}

inline void read_model(const json& j, ModelConfig& m) {
    m.vocab = j.value("vocab", m.vocab);
    m.layers = j.value("layers", m.layers);
    m.heads = j.value("heads", m.heads);
    m.head_dim = j.value("head_dim", m.head_dim);
    m.mlp_mult = j.value("mlp_mult", m.mlp_mult);
    m.max_pos = j.value("max_pos", m.max_pos);
    m.seed = j.value("seed", m.seed);
    m.rope_enabled = j.value("rope_enabled", m.rope_enabled);
    m.model_dim = j.value("model_dim", m.model_dim);
}

inline json config_json(const ExperimentConfig& c) {
    json pol = json::array();
    for (PolicyId p : c.policies) pol.push_back(to_string(p));
    json j{{"mode", c.mode == RunMode::toy ? "toy" : "trace"},
           {"policies", pol},
           {"budgets", c.budgets},
           {"policy", policy_config_json(c.policy)},
           {"seed", c.seed}};
    if (c.mode == RunMode::trace) {
        j["traces"] = c.traces;
        j["synthetic"] = synthetic_json(c.synthetic);
        j["synthetic_count"] = c.synthetic_count;
        j["qcache_source"] = c.qcache_source == ResponseSource::lookahead ? "lookahead" : "response";
    } else {
        j["model"] = model_json(c.model);
        j["prompt_len"] = c.prompt_len;
        j["decode_steps"] = c.decode_steps;
        j["prompts"] = c.prompts;
    }
    return j;
}

inline ExperimentConfig parse_experiment_config(const json& j) {
    ExperimentConfig c;
    if (j.contains("schema_version") && j["schema_version"].get<int>() != kSchemaVersion) {
        throw std::invalid_argument("config: unsupported schema_version");
    }
    if (j.contains("mode")) {
        const auto m = j["mode"].get<std::string>();
        if (m == "toy" || m == "toy-model") c.mode = RunMode::toy;
        else if (m == "trace" || m == "trace-replay") c.mode = RunMode::trace;
        else throw std::invalid_argument("config: unknown mode '" + m + "'");
    }
    if (j.contains("policies")) {
        c.policies.clear();
        for (const auto& p : j["policies"]) c.policies.push_back(parse_policy(p.get<std::string>()));
    }
    if (j.contains("budgets")) c.budgets = j["budgets"].get<std::vector<std::size_t>>();
    if (j.contains("policy")) read_policy_config(j["policy"], c.policy);
    c.seed = j.value("seed", c.seed);
    if (j.contains("traces")) c.traces = j["traces"].get<std::vector<std::string>>();
    if (j.contains("synthetic")) read_synthetic(j["synthetic"], c.synthetic);
    c.synthetic_count = j.value("synthetic_count", c.synthetic_count);
    if (j.contains("qcache_source")) {
        const auto s = j["qcache_source"].get<std::string>();
        if (s == "lookahead") c.qcache_source = ResponseSource::lookahead;
        else if (s == "response") c.qcache_source = ResponseSource::response;
        else throw std::invalid_argument("config: unknown qcache_source '" + s + "'");
    }
    if (j.contains("model")) read_model(j["model"], c.model);
    c.prompt_len = j.value("prompt_len", c.prompt_len);
    c.decode_steps = j.value("decode_steps", c.decode_steps);
    c.prompts = j.value("prompts", c.prompts);
    c.out_dir = j.value("out_dir", c.out_dir);
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config " + path);
    return parse_experiment_config(json::parse(f));
}

// Results -> JSON / CSV ---------------------------------------------------------

inline json recall_json(const RecallReport& r) {
    json per_layer = json::array();
    for (std::size_t l = 0; l < r.per_head.layers(); ++l) {
        json row = json::array();
        for (std::size_t h = 0; h < r.per_head.heads(); ++h) row.push_back(r.per_head.at(l, h));
        per_layer.push_back(row);
    }
    return {{"mean", r.mean},
            {"per_head", per_layer},
            {"degenerate", r.degenerate},
            {"budget", r.budget},
            {"window", r.window},
            {"score_mode", to_string(r.mode)}};
}

inline json latency_json(const LatencyReport& r) {
    json j = json::object();
    for (std::size_t i = 0; i < 4; ++i) {
        j[std::string(kStageNames[i])] = {{"seconds", r.seconds[i]}, {"fraction", r.fractions[i]}};
    }
    j["lookahead_fraction"] = r.fraction(Stage::lookahead);
    return j;
}

inline json cell_json(const Cell& c) {
    json j{{"source", c.source}, {"policy", to_string(c.policy)}, {"budget", c.budget}, {"ok", c.ok}};
    if (!c.ok) j["error"] = c.error;
    if (c.recall) j["recall"] = recall_json(*c.recall);
    if (c.latency) j["latency"] = latency_json(*c.latency);
    if (!c.transcript.empty()) j["transcript"] = c.transcript;
    if (!c.lookahead_tokens.empty()) j["lookahead_tokens"] = c.lookahead_tokens;
    if (!c.notes.empty()) j["notes"] = c.notes;
    return j;
}

inline json result_json(const ResultRecord& r) {
    json cells = json::array();
    for (const auto& c : r.cells) cells.push_back(cell_json(c));
    return {{"schema_version", kSchemaVersion},
            {"config", config_json(r.config)},
            {"cells", cells},
            {"summary", {{"cells", r.cells.size()}, {"failed", r.failures()}}}};
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return out + "\"";
}

inline std::string result_csv(const ResultRecord& r) {
    std::ostringstream os;
    std::size_t layers = 0;
    for (const auto& c : r.cells)
        if (c.recall) layers = std::max(layers, c.recall->per_head.layers());
    os << "source,policy,budget,status,mean_recall";
    for (std::size_t l = 0; l < layers; ++l) os << ",layer" << l << "_recall";
    os << ",lookahead_fraction,error\n";
    for (const auto& c : r.cells) {
        os << csv_escape(c.source) << ',' << to_string(c.policy) << ',' << c.budget << ','
           << (c.ok ? "ok" : "failed") << ',';
        if (c.recall) os << c.recall->mean;
        for (std::size_t l = 0; l < layers; ++l) {
            os << ',';
            if (c.recall && l < c.recall->per_head.layers()) os << c.recall->layer_mean(l);
        }
        os << ',';
        if (c.latency) os << c.latency->fraction(Stage::lookahead);
        os << ',' << csv_escape(c.error) << '\n';
    }
    return os.str();
}

inline json sweep_json(const SweepCurve& c) {
    json pts = json::array();
    for (const auto& p : c.points) pts.push_back({{"start", p.start}, {"mean_recall", p.mean_recall}, {"layer_means", p.layer_means}});
    return {{"schema_version", kSchemaVersion},
            {"window_len", c.window_len},
            {"budget", c.budget},
            {"score_mode", to_string(c.mode)},
            {"points", pts}};
}

inline std::string sweep_csv(const SweepCurve& c) {
    std::ostringstream os;
    os << "start,mean_recall";
    const std::size_t layers = c.points.empty() ? 0 : c.points.front().layer_means.size();
    for (std::size_t l = 0; l < layers; ++l) os << ",layer" << l << "_recall";
    os << '\n';
    for (const auto& p : c.points) {
        os << p.start << ',' << p.mean_recall;
        for (double v : p.layer_means) os << ',' << v;
        os << '\n';
    }
    return os.str();
}

// Running ------------------------------------------------------------------------

namespace detail {

struct TraceSource {
    std::string name;
    TraceBundle bundle;
};

inline std::vector<TraceSource> load_traces(const ExperimentConfig& cfg) {
    std::vector<TraceSource> out;
    for (const auto& path : cfg.traces) out.push_back({path, read_trace(path)});
    if (cfg.traces.empty()) {
        for (std::size_t i = 0; i < cfg.synthetic_count; ++i) {
            SyntheticParams p = cfg.synthetic;
            p.seed = cfg.seed + i;
            out.push_back({"synthetic:" + std::to_string(p.seed), gen_synthetic_trace(p).bundle});
        }
    }
    return out;
}

inline std::vector<TokenId> random_prompt(std::size_t len, std::size_t vocab, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<TokenId> out(len);
    for (auto& t : out) t = static_cast<TokenId>(rng.below(vocab));
    return out;
}

inline void run_trace_cells(const ExperimentConfig& cfg, ResultRecord& rec) {
    for (const auto& src : load_traces(cfg)) {
        const TraceBundle& b = src.bundle;
        const KVCacheStore cache = cache_from_trace(b);
        const Grid<QuerySet> prefill_q = input_query_sets(b);
        const Grid<QuerySet> response_q = response_query_sets(b);
        for (PolicyId pid : cfg.policies)
            for (std::size_t budget : cfg.budgets) {
                Cell cell;
                cell.source = src.name;
                cell.policy = pid;
                cell.budget = budget;
                try {
                    PolicyConfig pc = cfg.policy;
                    pc.budget = budget;
                    std::optional<QCache> q;
                    if (uses_lookahead(pid)) {
                        const Grid<Mat>& rows =
                            cfg.qcache_source == ResponseSource::lookahead ? b.lookahead_queries : b.response_queries;
                        q = qcache_from_rows(rows, pc.lookahead_steps, static_cast<Position>(b.meta.t_input));
                    }
                    ScoredSelection sel = select_policy(pid, {cache, prefill_q, q ? &*q : nullptr}, pc);
                    Selection gold = gold_selection(response_q, cache, budget, pc.score_mode);
                    RecallReport r = recall(sel.selection, gold);
                    r.window = pc.window_len;
                    r.mode = pc.score_mode;
                    cell.recall = std::move(r);
                    cell.notes = std::move(sel.notes);
                    cell.ok = true;
                } catch (const std::exception& e) {
                    cell.error = e.what();
                }
                rec.cells.push_back(std::move(cell));
            }
    }
}

inline void run_toy_cells(const ExperimentConfig& cfg, ResultRecord& rec) {
    const Model model = init_model(cfg.model);
    for (std::size_t i = 0; i < cfg.prompts; ++i) {
        const std::uint64_t pseed = derive_seed(cfg.seed, i);
        const auto prompt = random_prompt(cfg.prompt_len, cfg.model.vocab, pseed);
        const PrefillResult pre = prefill(model, prompt);
        const Continuation gold_run = golden_run(model, pre, cfg.decode_steps);
        const Grid<QuerySet> response_q = as_query_sets(gold_run.queries);
        const std::string name = "toy:" + std::to_string(pseed);
        for (PolicyId pid : cfg.policies)
            for (std::size_t budget : cfg.budgets) {
                Cell cell;
                cell.source = name;
                cell.policy = pid;
                cell.budget = budget;
                try {
                    PolicyConfig pc = cfg.policy;
                    pc.budget = budget;
                    PipelineResult res = run_pipeline(model, prompt, pid, pc, cfg.decode_steps);
                    Selection gold = gold_selection(response_q, res.prefill.cache, budget, pc.score_mode);
                    RecallReport r = recall(res.selection.selection, gold);
                    r.window = pc.window_len;
                    r.mode = pc.score_mode;
                    cell.recall = std::move(r);
                    cell.latency = res.latency;
                    cell.transcript = res.transcript;
                    if (res.lookahead) cell.lookahead_tokens = res.lookahead->pseudo_tokens;
                    cell.notes = std::move(res.selection.notes);
                    cell.ok = true;
                } catch (const std::exception& e) {
                    cell.error = e.what();
                }
                rec.cells.push_back(std::move(cell));
            }
    }
}

} // namespace detail

inline ResultRecord run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    ResultRecord rec{cfg, {}};
    if (cfg.mode == RunMode::trace) detail::run_trace_cells(cfg, rec);
    else detail::run_toy_cells(cfg, rec);
    return rec;
}

// Drop wall-clock fields so two runs of the same config compare equal.
inline json strip_timing(json j) {
    if (j.is_object()) {
        j.erase("latency");
        for (auto& [k, v] : j.items()) v = strip_timing(v);
    } else if (j.is_array()) {
        for (auto& v : j) v = strip_timing(v);
    }
    return j;
}

// Ablations ------------------------------------------------------------------------

struct AblationConfig {
    ExperimentConfig base;
    std::vector<std::size_t> steps{1, 2, 4, 8};
    std::vector<PolicyId> lookahead_policies;          // empty: base setting only
    std::vector<std::size_t> lookahead_budgets;        // empty: base setting only
    std::vector<ResponseSource> qcache_sources;        // trace mode; empty: base setting only
};

struct AblationVariant {
    std::size_t steps = 0;
    PolicyId lookahead_policy = PolicyId::snapkv;
    std::size_t lookahead_budget = 0;
    ResponseSource qcache_source = ResponseSource::lookahead;
    ResultRecord result;
};

inline std::vector<AblationVariant> run_ablation(const AblationConfig& ab) {
    auto lps = ab.lookahead_policies.empty() ? std::vector<PolicyId>{ab.base.policy.lookahead_policy}
                                             : ab.lookahead_policies;
    auto lbs = ab.lookahead_budgets.empty() ? std::vector<std::size_t>{ab.base.policy.lookahead_budget}
                                            : ab.lookahead_budgets;
    auto srcs = ab.qcache_sources.empty() ? std::vector<ResponseSource>{ab.base.qcache_source} : ab.qcache_sources;
    std::vector<AblationVariant> out;
    for (std::size_t s : ab.steps)
        for (PolicyId lp : lps)
            for (std::size_t lb : lbs)
                for (ResponseSource src : srcs) {
                    ExperimentConfig c = ab.base;
                    c.policy.lookahead_steps = s;
                    c.policy.lookahead_policy = lp;
                    c.policy.lookahead_budget = lb;
                    c.qcache_source = src;
                    out.push_back({s, lp, lb, src, run_experiment(c)});
                }
    return out;
}

inline json ablation_json(const std::vector<AblationVariant>& vs) {
    json arr = json::array();
    for (const auto& v : vs) {
        json cells = json::array();
        for (const auto& c : v.result.cells) cells.push_back(cell_json(c));
        arr.push_back({{"lookahead_steps", v.steps},
                       {"lookahead_policy", to_string(v.lookahead_policy)},
                       {"lookahead_budget", v.lookahead_budget},
                       {"qcache_source", v.qcache_source == ResponseSource::lookahead ? "lookahead" : "response"},
                       {"cells", cells}});
    }
    return {{"schema_version", kSchemaVersion}, {"variants", arr}};
}

inline std::string ablation_csv(const std::vector<AblationVariant>& vs) {
    std::ostringstream os;
    os << "lookahead_steps,lookahead_policy,lookahead_budget,qcache_source,source,policy,budget,status,mean_recall\n";
    for (const auto& v : vs)
        for (const auto& c : v.result.cells) {
            os << v.steps << ',' << to_string(v.lookahead_policy) << ',' << v.lookahead_budget << ','
               << (v.qcache_source == ResponseSource::lookahead ? "lookahead" : "response") << ','
               << csv_escape(c.source) << ',' << to_string(c.policy) << ',' << c.budget << ','
               << (c.ok ? "ok" : "failed") << ',';
            if (c.recall) os << c.recall->mean;
            os << '\n';
        }
    return os.str();
}

} // namespace laq
