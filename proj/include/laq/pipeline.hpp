#pragma once

// End-to-end toy-model runs: prefill, optional lookahead, re-eviction from the
// full prefill cache, and greedy decoding over the evicted cache, with each
// stage timed.

#include <chrono>
#include <optional>
#include <span>
#include <vector>

#include "laq/kvcache.hpp"
#include "laq/metrics.hpp"
#include "laq/model.hpp"
#include "laq/policies.hpp"

namespace laq {

class StageClock {
public:
    StageClock() : origin_(std::chrono::steady_clock::now()) {}
    double now() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - origin_).count(); }

private:
    std::chrono::steady_clock::time_point origin_;
};

struct PipelineResult {
    PrefillResult prefill;                   // holds the untouched full cache
    std::optional<LookaheadResult> lookahead;
    ScoredSelection selection;
    std::vector<TokenId> transcript;         // decode-phase tokens, first one from prefill
    std::vector<StageEvent> events;
    LatencyReport latency;
};

inline bool uses_lookahead(PolicyId id) { return id == PolicyId::laq || id == PolicyId::laq_pp; }

inline PipelineResult run_pipeline(const Model& model, std::span<const TokenId> prompt, PolicyId policy,
                                   const PolicyConfig& cfg, std::size_t decode_steps) {
    StageClock clock;
    PipelineResult res;

    double t0 = clock.now();
    res.prefill = prefill(model, prompt);
    double t1 = clock.now();
    res.events.push_back({Stage::prefill, t0, t1});

    if (uses_lookahead(policy)) res.lookahead = run_lookahead(model, res.prefill, cfg);
    double t2 = clock.now();
    res.events.push_back({Stage::lookahead, t1, uses_lookahead(policy) ? t2 : t1});

    const KVCacheStore& full = res.prefill.cache;
    res.selection = select_policy(policy, {full, res.prefill.queries, res.lookahead ? &res.lookahead->qcache : nullptr},
                                  cfg);
    KVCacheStore evicted = apply_selection(full, res.selection.selection).materialize();
    double t3 = clock.now();
    res.events.push_back({Stage::re_evict, t2, t3});

    const Position start = full.head(0, 0).positions.back() + 1;
    res.transcript = decode_in_place(model, evicted, res.prefill.next_token, start, decode_steps);
    double t4 = clock.now();
    res.events.push_back({Stage::decode, t3, t4});

    res.latency = latency_breakdown(res.events);
    return res;
}

// Unrestricted greedy continuation whose queries form the gold response set.
inline Continuation golden_run(const Model& model, const PrefillResult& pre, std::size_t steps) {
    const Position start = pre.cache.head(0, 0).positions.back() + 1;
    return decode_greedy(model, CacheView::full(pre.cache), pre.next_token, start, steps);
}

inline Grid<QuerySet> as_query_sets(const QCache& q) {
    Grid<QuerySet> out(q.queries.layers(), q.queries.heads());
    for (std::size_t l = 0; l < out.layers(); ++l)
        for (std::size_t h = 0; h < out.heads(); ++h) out.at(l, h) = q.head(l, h);
    return out;
}

} // namespace laq
