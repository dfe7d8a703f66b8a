#pragma once

// KV-cache eviction policies.
//
// Every scored policy reduces, per head, to: sum attention scores over some
// query set, optionally pool, force-keep the trailing prefill window, and
// fill the remaining budget by score. What changes between policies is the
// query set:
//
//   h2o        all prefill queries (causal)
//   snapkv     last window_len prefill queries, pooled
//   pyramidkv  snapkv with a per-layer linear budget schedule
//   laq        lookahead queries Q only
//   laq_pp     window queries W followed by Q
//
// streaming keeps sink tokens plus the most recent ones and does no scoring.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "laq/grid.hpp"
#include "laq/kvcache.hpp"
#include "laq/model.hpp"
#include "laq/tensor.hpp"

namespace laq {

enum class PolicyId { full, streaming, h2o, snapkv, pyramidkv, laq, laq_pp };

inline constexpr std::array<std::pair<PolicyId, std::string_view>, 7> kPolicyNames{{
    {PolicyId::full, "full"},
    {PolicyId::streaming, "streaming"},
    {PolicyId::h2o, "h2o"},
    {PolicyId::snapkv, "snapkv"},
    {PolicyId::pyramidkv, "pyramidkv"},
    {PolicyId::laq, "laq"},
    {PolicyId::laq_pp, "laq_pp"},
}};

inline std::string_view to_string(PolicyId id) {
    for (const auto& [p, name] : kPolicyNames)
        if (p == id) return name;
    return "unknown";
}

inline PolicyId parse_policy(std::string_view name) {
    for (const auto& [p, n] : kPolicyNames)
        if (n == name) return p;
    throw std::invalid_argument("unknown policy '" + std::string(name) +
                                "' (expected full, streaming, h2o, snapkv, pyramidkv, laq, laq_pp)");
}

enum class ScoreMode { raw, softmax };

inline std::string_view to_string(ScoreMode m) { return m == ScoreMode::raw ? "raw" : "softmax"; }

inline ScoreMode parse_score_mode(std::string_view s) {
    if (s == "raw") return ScoreMode::raw;
    if (s == "softmax") return ScoreMode::softmax;
    throw std::invalid_argument("unknown score mode '" + std::string(s) + "' (expected raw or softmax)");
}

struct PolicyConfig {
    std::size_t budget = 64;
    std::size_t window_len = 8;
    std::size_t lookahead_steps = 8;
    std::size_t sink_count = 4;
    std::size_t pool_kernel = 7;
    ScoreMode score_mode = ScoreMode::softmax;
    bool keep_window = true;
    // Smallest per-layer budget of the pyramid schedule. Unset means
    // max(budget / 2, window_len if keep_window), capped at budget.
    std::optional<std::size_t> pyramid_floor;
    PolicyId lookahead_policy = PolicyId::snapkv;
    std::size_t lookahead_budget = 16;

    std::size_t effective_floor() const {
        if (pyramid_floor) return *pyramid_floor;
        std::size_t m = budget / 2;
        if (keep_window) m = std::max(m, window_len);
        return std::min(m, budget);
    }

    std::size_t forced_window() const { return keep_window ? window_len : 0; }

    void validate_for(PolicyId id) const {
        if (pool_kernel == 0 || pool_kernel % 2 == 0) {
            throw std::invalid_argument("PolicyConfig: pool_kernel must be odd, got " + std::to_string(pool_kernel));
        }
        switch (id) {
        case PolicyId::full:
            return;
        case PolicyId::streaming:
            if (sink_count + 1 > budget) {
                throw std::invalid_argument("PolicyConfig: streaming needs budget >= sink_count + 1");
            }
            return;
        case PolicyId::pyramidkv:
            if (effective_floor() > budget) {
                throw std::invalid_argument("PolicyConfig: pyramid_floor " + std::to_string(effective_floor()) +
                                            " exceeds budget " + std::to_string(budget));
            }
            if (keep_window && effective_floor() < window_len) {
                throw std::invalid_argument("PolicyConfig: pyramid_floor below window_len with keep_window");
            }
            [[fallthrough]];
        default:
            if (keep_window && budget < window_len) {
                throw std::invalid_argument("PolicyConfig: budget " + std::to_string(budget) +
                                            " < window_len " + std::to_string(window_len) + " with keep_window");
            }
        }
    }
};

struct ScoreOptions {
    std::optional<float> scale;             // default 1/sqrt(head_dim)
    std::span<const Position> query_positions;
    std::span<const Position> key_positions;  // masking applies when both are given
};

// Column sums of scaled q.k^T (raw) or of per-query softmax rows (softmax).
// With positions, key j is invisible to query i when key_pos[j] > query_pos[i].
inline ScoreVec attn_score_sum(const Mat& queries, const Mat& keys, ScoreMode mode, const ScoreOptions& opts = {}) {
    if (queries.rows() == 0) throw std::invalid_argument("attn_score_sum: empty query set");
    if (queries.cols() != keys.cols()) {
        throw std::invalid_argument("attn_score_sum: query width " + std::to_string(queries.cols()) +
                                    " != key width " + std::to_string(keys.cols()));
    }
    const bool masked = !opts.query_positions.empty() && !opts.key_positions.empty();
    if (masked && (opts.query_positions.size() != queries.rows() || opts.key_positions.size() != keys.rows())) {
        throw std::invalid_argument("attn_score_sum: position lists do not match row counts");
    }
    const float scale = opts.scale.value_or(1.0f / std::sqrt(static_cast<float>(keys.cols())));
    const std::size_t t = keys.rows();
    ScoreVec scores(t, 0.0f);
    std::vector<float> row;
    std::vector<std::size_t> visible;
    for (std::size_t i = 0; i < queries.rows(); ++i) {
        visible.clear();
        for (std::size_t j = 0; j < t; ++j)
            if (!masked || opts.key_positions[j] <= opts.query_positions[i]) visible.push_back(j);
        row.resize(visible.size());
        for (std::size_t v = 0; v < visible.size(); ++v) row[v] = dot(queries.row(i), keys.row(visible[v])) * scale;
        if (mode == ScoreMode::softmax) softmax_inplace(row);
        for (std::size_t v = 0; v < visible.size(); ++v) scores[visible[v]] += row[v];
    }
    return scores;
}

inline ScoreVec attn_score_sum(const QuerySet& queries, const HeadKV& keys, ScoreMode mode) {
    return attn_score_sum(queries.rows, keys.keys, mode, {std::nullopt, queries.positions, keys.positions});
}

// Keep the last `forced` indices, fill up to `budget` with the best of the rest.
inline IndexList select_with_forced_tail(std::span<const float> scores, std::size_t budget, std::size_t forced) {
    const std::size_t t = scores.size();
    if (budget >= t) return top_k_indices(scores, t);
    forced = std::min(forced, t);
    if (forced > budget) throw std::invalid_argument("select_with_forced_tail: forced window larger than budget");
    IndexList out = top_k_indices(scores.first(t - forced), budget - forced);
    for (std::size_t i = t - forced; i < t; ++i) out.push_back(i);
    return out;
}

struct HeadSelection {
    IndexList indices;
    ScoreVec scores;
};

// Pool the evictable prefix (everything before the forced tail) and select.
// Forced-tail entries keep their unpooled sums in the reported scores.
inline HeadSelection pooled_selection(ScoreVec sums, std::size_t budget, const PolicyConfig& cfg) {
    const std::size_t t = sums.size();
    const std::size_t forced = std::min(cfg.forced_window(), t);
    ScoreVec pooled = pool_avg_1d(std::span<const float>(sums).first(t - forced), cfg.pool_kernel);
    std::copy(pooled.begin(), pooled.end(), sums.begin());
    IndexList idx = select_with_forced_tail(sums, budget, forced);
    return {std::move(idx), std::move(sums)};
}

inline HeadSelection select_h2o_head(const QuerySet& all_queries, const HeadKV& kv, std::size_t budget,
                                     const PolicyConfig& cfg) {
    ScoreVec s = attn_score_sum(all_queries, kv, cfg.score_mode);
    IndexList idx = select_with_forced_tail(s, budget, cfg.forced_window());
    return {std::move(idx), std::move(s)};
}

inline HeadSelection select_snapkv_head(const QuerySet& window_queries, const HeadKV& kv, std::size_t budget,
                                        const PolicyConfig& cfg) {
    return pooled_selection(attn_score_sum(window_queries, kv, cfg.score_mode), budget, cfg);
}

inline IndexList streaming_indices(std::size_t t, std::size_t budget, std::size_t sinks) {
    IndexList out;
    if (budget >= t) {
        for (std::size_t i = 0; i < t; ++i) out.push_back(i);
        return out;
    }
    sinks = std::min(sinks, budget);
    for (std::size_t i = 0; i < sinks; ++i) out.push_back(i);
    for (std::size_t i = t - (budget - sinks); i < t; ++i) out.push_back(i);
    return out;
}

enum class LaqVariant { laq, laq_pp };

// Re-eviction for one head, scored by the lookahead queries alone (laq) or by
// the observation window followed by them (laq_pp).
inline HeadSelection select_laq_head(const QuerySet& lookahead, const QuerySet& window, const HeadKV& kv,
                                     std::size_t budget, const PolicyConfig& cfg, LaqVariant variant) {
    if (variant == LaqVariant::laq) {
        if (lookahead.empty()) throw std::invalid_argument("select_laq: empty Q-cache");
        return pooled_selection(attn_score_sum(lookahead, kv, cfg.score_mode), budget, cfg);
    }
    return pooled_selection(attn_score_sum(union_windows(window, lookahead), kv, cfg.score_mode), budget, cfg);
}

// Per-layer budgets b_l = m + (2B - 2m)(L-1-l)/(L-1), largest-remainder
// rounded so they sum to L*B. Layer 0 is the shallowest and gets the most.
inline std::vector<std::size_t> pyramid_budgets(std::size_t layers, std::size_t budget, std::size_t floor) {
    if (layers == 0) throw std::invalid_argument("pyramid_budgets: layers must be >= 1");
    if (floor > budget) {
        throw std::invalid_argument("pyramid_budgets: floor " + std::to_string(floor) + " > budget " +
                                    std::to_string(budget));
    }
    if (layers == 1) return {budget};
    const std::size_t den = layers - 1;
    std::vector<std::size_t> out(layers);
    std::vector<std::size_t> rem(layers);
    std::size_t total = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t num = floor * den + (2 * budget - 2 * floor) * (den - l);
        out[l] = num / den;
        rem[l] = num % den;
        total += out[l];
    }
    std::size_t missing = layers * budget - total;
    std::vector<std::size_t> order(layers);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t i = 0; i < missing; ++i) ++out[order[i]];
    return out;
}

struct ScoredSelection {
    Selection selection;
    Grid<ScoreVec> scores;            // empty grid for unscored policies
    std::vector<std::string> notes;
};

inline Grid<QuerySet> trailing_window(const Grid<QuerySet>& prefill_queries, std::size_t w) {
    Grid<QuerySet> out(prefill_queries.layers(), prefill_queries.heads());
    for (std::size_t l = 0; l < out.layers(); ++l)
        for (std::size_t h = 0; h < out.heads(); ++h) out.at(l, h) = prefill_queries.at(l, h).last(w);
    return out;
}

namespace detail {

template <class HeadFn>
ScoredSelection select_per_head(const KVCacheStore& cache, const std::vector<std::size_t>& budgets, HeadFn&& fn) {
    ScoredSelection out;
    out.selection.indices = Grid<IndexList>(cache.layers(), cache.heads());
    out.selection.budgets = budgets;
    out.scores = Grid<ScoreVec>(cache.layers(), cache.heads());
    for (std::size_t l = 0; l < cache.layers(); ++l)
        for (std::size_t h = 0; h < cache.heads(); ++h) {
            HeadSelection hs = fn(l, h, budgets[l]);
            out.selection.indices.at(l, h) = std::move(hs.indices);
            out.scores.at(l, h) = std::move(hs.scores);
        }
    return out;
}

inline void require_geometry(const Grid<QuerySet>& q, const KVCacheStore& cache, const char* who) {
    if (!q.same_shape(cache.layers(), cache.heads())) {
        throw std::invalid_argument(std::string(who) + ": query geometry does not match cache");
    }
}

} // namespace detail

inline ScoredSelection select_h2o(const Grid<QuerySet>& all_queries, const KVCacheStore& cache,
                                  const PolicyConfig& cfg) {
    cfg.validate_for(PolicyId::h2o);
    detail::require_geometry(all_queries, cache, "select_h2o");
    return detail::select_per_head(cache, std::vector<std::size_t>(cache.layers(), cfg.budget),
                                   [&](std::size_t l, std::size_t h, std::size_t b) {
                                       return select_h2o_head(all_queries.at(l, h), cache.head(l, h), b, cfg);
                                   });
}

inline ScoredSelection select_snapkv(const Grid<QuerySet>& window_queries, const KVCacheStore& cache,
                                     const PolicyConfig& cfg) {
    cfg.validate_for(PolicyId::snapkv);
    detail::require_geometry(window_queries, cache, "select_snapkv");
    return detail::select_per_head(cache, std::vector<std::size_t>(cache.layers(), cfg.budget),
                                   [&](std::size_t l, std::size_t h, std::size_t b) {
                                       return select_snapkv_head(window_queries.at(l, h), cache.head(l, h), b, cfg);
                                   });
}

inline ScoredSelection select_pyramidkv(const Grid<QuerySet>& window_queries, const KVCacheStore& cache,
                                        const PolicyConfig& cfg) {
    cfg.validate_for(PolicyId::pyramidkv);
    detail::require_geometry(window_queries, cache, "select_pyramidkv");
    // A budget that covers the whole prompt keeps everything on every layer;
    // the schedule only redistributes budgets that actually force eviction.
    auto budgets = cfg.budget >= cache.length() ? std::vector<std::size_t>(cache.layers(), cfg.budget)
                                                : pyramid_budgets(cache.layers(), cfg.budget, cfg.effective_floor());
    return detail::select_per_head(cache, std::move(budgets),
                                   [&](std::size_t l, std::size_t h, std::size_t b) {
                                       return select_snapkv_head(window_queries.at(l, h), cache.head(l, h), b, cfg);
                                   });
}

inline Selection select_streaming(std::size_t layers, std::size_t heads, std::size_t t, const PolicyConfig& cfg) {
    cfg.validate_for(PolicyId::streaming);
    return {Grid<IndexList>(layers, heads, streaming_indices(t, cfg.budget, cfg.sink_count)),
            std::vector<std::size_t>(layers, cfg.budget)};
}

inline ScoredSelection select_laq(const QCache& qcache, const KVCacheStore& cache, const PolicyConfig& cfg,
                                  LaqVariant variant, const Grid<QuerySet>& window_queries) {
    const PolicyId id = variant == LaqVariant::laq ? PolicyId::laq : PolicyId::laq_pp;
    cfg.validate_for(id);
    detail::require_geometry(window_queries, cache, "select_laq");
    if (!qcache.queries.same_shape(cache.layers(), cache.heads())) {
        throw std::invalid_argument("select_laq: Q-cache geometry does not match cache");
    }
    if (qcache.steps() == 0 && variant == LaqVariant::laq) throw std::invalid_argument("select_laq: empty Q-cache");
    for (const Mat& m : qcache.queries)
        if (m.rows() != qcache.steps() || (m.rows() > 0 && m.cols() != cache.head_dim()))
            throw std::invalid_argument("select_laq: Q-cache rows do not match geometry");
    ScoredSelection out = detail::select_per_head(
        cache, std::vector<std::size_t>(cache.layers(), cfg.budget), [&](std::size_t l, std::size_t h, std::size_t b) {
            return select_laq_head(qcache.head(l, h), window_queries.at(l, h), cache.head(l, h), b, cfg, variant);
        });
    if (qcache.steps() == 0) out.notes.push_back("laq_pp with empty Q-cache: window-only (snapkv) selection");
    return out;
}

struct PolicyInputs {
    const KVCacheStore& cache;
    const Grid<QuerySet>& prefill_queries;  // every prefill position, ascending
    const QCache* qcache = nullptr;         // required for laq / laq_pp
};

inline ScoredSelection select_policy(PolicyId id, const PolicyInputs& in, const PolicyConfig& cfg) {
    const KVCacheStore& cache = in.cache;
    switch (id) {
    case PolicyId::full: {
        ScoredSelection s;
        s.selection = select_all(cache.layers(), cache.heads(), cache.length());
        return s;
    }
    case PolicyId::streaming: {
        ScoredSelection s;
        s.selection = select_streaming(cache.layers(), cache.heads(), cache.length(), cfg);
        return s;
    }
    case PolicyId::h2o:
        return select_h2o(in.prefill_queries, cache, cfg);
    case PolicyId::snapkv:
        return select_snapkv(trailing_window(in.prefill_queries, cfg.window_len), cache, cfg);
    case PolicyId::pyramidkv:
        return select_pyramidkv(trailing_window(in.prefill_queries, cfg.window_len), cache, cfg);
    case PolicyId::laq:
    case PolicyId::laq_pp:
        if (!in.qcache) throw std::invalid_argument("select_policy: laq policies need a Q-cache");
        return select_laq(*in.qcache, cache, cfg, id == PolicyId::laq ? LaqVariant::laq : LaqVariant::laq_pp,
                          trailing_window(in.prefill_queries, cfg.window_len));
    }
    throw std::invalid_argument("select_policy: unknown policy");
}

struct LookaheadResult {
    QCache qcache;
    std::vector<TokenId> pseudo_tokens;  // the tokens whose queries fill qcache
    Selection low_budget;                // view used while generating them
};

// Cheap pseudo-response: evict to lookahead_budget with lookahead_policy,
// greedily decode lookahead_steps tokens against that view, keep their
// queries. The prefill cache is only read; lookahead K/V live in a scratch
// store that is dropped on return.
inline LookaheadResult run_lookahead(const Model& model, const PrefillResult& pre, const PolicyConfig& cfg) {
    const PolicyId lp = cfg.lookahead_policy;
    if (lp == PolicyId::laq || lp == PolicyId::laq_pp) {
        throw std::invalid_argument("run_lookahead: lookahead_policy must be one of full, streaming, h2o, snapkv, "
                                    "pyramidkv");
    }
    PolicyConfig la = cfg;
    la.budget = cfg.lookahead_budget;
    la.pyramid_floor.reset();
    ScoredSelection low = select_policy(lp, {pre.cache, pre.queries, nullptr}, la);

    const KVCacheStore& cache = pre.cache;
    const Position start = cache.head(0, 0).positions.back() + 1;
    Continuation c = decode_greedy(model, apply_selection(cache, low.selection), pre.next_token, start,
                                   cfg.lookahead_steps);
    return {std::move(c.queries), std::move(c.tokens), std::move(low.selection)};
}

} // namespace laq
