#pragma once

// Recall instrumentation: gold selections from the full response, recall of
// a predicted selection against gold, the sliding-window recall sweep, and
// the stage latency breakdown.

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "laq/grid.hpp"
#include "laq/kvcache.hpp"
#include "laq/policies.hpp"
#include "laq/tensor.hpp"

namespace laq {

// Top-budget of summed attention over every response query, per head.
inline Selection gold_selection(const Grid<QuerySet>& response_queries, const KVCacheStore& cache, std::size_t budget,
                                ScoreMode mode) {
    if (!response_queries.same_shape(cache.layers(), cache.heads())) {
        throw std::invalid_argument("gold_selection: response record geometry does not match cache");
    }
    Selection sel{Grid<IndexList>(cache.layers(), cache.heads()), std::vector<std::size_t>(cache.layers(), budget)};
    for (std::size_t l = 0; l < cache.layers(); ++l)
        for (std::size_t h = 0; h < cache.heads(); ++h) {
            const QuerySet& r = response_queries.at(l, h);
            if (r.empty()) throw std::invalid_argument("gold_selection: missing response record");
            sel.indices.at(l, h) = top_k_indices(attn_score_sum(r, cache.head(l, h), mode), budget);
        }
    return sel;
}

struct RecallReport {
    Grid<double> per_head;
    double mean = 0.0;
    bool degenerate = false;  // some head had an empty gold set (recall defined as 1)
    std::size_t budget = 0;
    std::size_t window = 0;
    ScoreMode mode = ScoreMode::softmax;

    double layer_mean(std::size_t layer) const {
        double s = 0.0;
        for (std::size_t h = 0; h < per_head.heads(); ++h) s += per_head.at(layer, h);
        return s / static_cast<double>(per_head.heads());
    }
};

// |a ∩ b| for ascending index lists.
inline std::size_t intersection_size(const IndexList& a, const IndexList& b) {
    std::size_t i = 0, j = 0, n = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) {
            ++i;
        } else if (b[j] < a[i]) {
            ++j;
        } else {
            ++n;
            ++i;
            ++j;
        }
    }
    return n;
}

inline RecallReport recall(const Selection& pred, const Selection& gold) {
    if (!pred.indices.same_shape(gold.indices)) throw std::invalid_argument("recall: selection geometry mismatch");
    RecallReport rep;
    rep.per_head = Grid<double>(gold.layers(), gold.heads());
    rep.budget = gold.budgets.empty() ? 0 : gold.budgets.front();
    double sum = 0.0;
    for (std::size_t l = 0; l < gold.layers(); ++l)
        for (std::size_t h = 0; h < gold.heads(); ++h) {
            const IndexList& g = gold.at(l, h);
            double r = 1.0;
            if (g.empty()) {
                rep.degenerate = true;
            } else {
                r = static_cast<double>(intersection_size(pred.at(l, h), g)) / static_cast<double>(g.size());
            }
            rep.per_head.at(l, h) = r;
            sum += r;
        }
    rep.mean = gold.indices.size() ? sum / static_cast<double>(gold.indices.size()) : 1.0;
    return rep;
}

struct SweepPoint {
    long long start = 0;  // relative to the first response token
    double mean_recall = 0.0;
    std::vector<double> layer_means;
};

struct SweepCurve {
    std::vector<SweepPoint> points;
    std::size_t window_len = 0;
    std::size_t budget = 0;
    ScoreMode mode = ScoreMode::softmax;
};

// Query record seen by the sweep: input rows followed by response rows.
struct QueryRecord {
    Grid<QuerySet> input;
    Grid<QuerySet> response;
};

// Slide a window of `window_len` queries from the start of the input record
// to the end of the response record, scoring each window against gold.
// `gold` overrides the gold set, e.g. when the window slides over a
// pseudo-response but recall is measured against the real one.
inline SweepCurve window_recall_sweep(const QueryRecord& record, const KVCacheStore& cache, std::size_t window_len,
                                      std::size_t budget, ScoreMode mode, const Selection* gold_override = nullptr) {
    if (window_len == 0) throw std::invalid_argument("window_recall_sweep: window_len must be >= 1");
    const Grid<QuerySet>& in = record.input;
    const Grid<QuerySet>& resp = record.response;
    if (!in.same_shape(cache.layers(), cache.heads()) || !resp.same_shape(in)) {
        throw std::invalid_argument("window_recall_sweep: record geometry does not match cache");
    }
    const std::size_t t_in = in.at(0, 0).size();
    const std::size_t t_resp = resp.at(0, 0).size();
    if (window_len > t_in + t_resp) {
        throw std::invalid_argument("window_recall_sweep: window_len " + std::to_string(window_len) +
                                    " exceeds record of " + std::to_string(t_in + t_resp));
    }
    const Selection gold = gold_override ? *gold_override : gold_selection(resp, cache, budget, mode);

    Grid<QuerySet> combined(in.layers(), in.heads());
    for (std::size_t l = 0; l < in.layers(); ++l)
        for (std::size_t h = 0; h < in.heads(); ++h) combined.at(l, h) = union_windows(in.at(l, h), resp.at(l, h));

    SweepCurve curve{{}, window_len, budget, mode};
    for (std::size_t start = 0; start + window_len <= t_in + t_resp; ++start) {
        Selection pred{Grid<IndexList>(in.layers(), in.heads()), std::vector<std::size_t>(in.layers(), budget)};
        for (std::size_t l = 0; l < in.layers(); ++l)
            for (std::size_t h = 0; h < in.heads(); ++h) {
                QuerySet w = take_window(combined.at(l, h), {start, window_len, WindowSource::input});
                pred.indices.at(l, h) = top_k_indices(attn_score_sum(w, cache.head(l, h), mode), budget);
            }
        RecallReport rep = recall(pred, gold);
        SweepPoint pt{static_cast<long long>(start) - static_cast<long long>(t_in), rep.mean, {}};
        for (std::size_t l = 0; l < in.layers(); ++l) pt.layer_means.push_back(rep.layer_mean(l));
        curve.points.push_back(std::move(pt));
    }
    return curve;
}

inline const SweepPoint& point_at(const SweepCurve& c, long long start) {
    for (const auto& p : c.points)
        if (p.start == start) return p;
    throw std::out_of_range("SweepCurve: no point at start " + std::to_string(start));
}

enum class Stage { prefill, lookahead, re_evict, decode };
inline constexpr std::array<std::string_view, 4> kStageNames{"prefill", "lookahead", "re_evict", "decode"};

struct StageEvent {
    Stage stage;
    double begin = 0.0;  // seconds, any monotone clock
    double end = 0.0;
};

struct LatencyReport {
    std::array<double, 4> seconds{};
    std::array<double, 4> fractions{};

    double total() const { return seconds[0] + seconds[1] + seconds[2] + seconds[3]; }
    double fraction(Stage s) const { return fractions[static_cast<std::size_t>(s)]; }
    double duration(Stage s) const { return seconds[static_cast<std::size_t>(s)]; }
};

inline LatencyReport latency_breakdown(const std::vector<StageEvent>& events) {
    LatencyReport rep;
    std::array<bool, 4> seen{};
    double last = -std::numeric_limits<double>::infinity();
    for (const StageEvent& e : events) {
        if (!(e.end >= e.begin) || e.begin < last) {
            throw std::invalid_argument("latency_breakdown: event timestamps are not monotone");
        }
        last = e.end;
        const auto i = static_cast<std::size_t>(e.stage);
        seen[i] = true;
        rep.seconds[i] += e.end - e.begin;
    }
    for (std::size_t i = 0; i < 4; ++i)
        if (!seen[i]) throw std::invalid_argument("latency_breakdown: missing stage " + std::string(kStageNames[i]));
    const double total = rep.total();
    if (!(total > 0.0)) throw std::invalid_argument("latency_breakdown: total duration is zero");
    for (std::size_t i = 0; i < 4; ++i) rep.fractions[i] = rep.seconds[i] / total;
    return rep;
}

} // namespace laq
