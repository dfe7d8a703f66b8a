#include <gtest/gtest.h>

#include <numeric>

#include "laq/metrics.hpp"
#include "laq/rng.hpp"
#include "laq/synthetic.hpp"
#include "oracle.hpp"

using namespace laq;

namespace {

KVCacheStore one_head_cache(const Mat& keys) {
    KVCacheStore c(1, 1, keys.cols());
    for (std::size_t i = 0; i < keys.rows(); ++i) c.head(0, 0).append(keys.row(i), keys.row(i), Position(i));
    return c;
}

QuerySet at_positions(const Mat& q, Position first) {
    QuerySet s{q, {}};
    for (std::size_t i = 0; i < q.rows(); ++i) s.positions.push_back(first + Position(i));
    return s;
}

Selection single(IndexList idx, std::size_t budget) {
    return {Grid<IndexList>(1, 1, std::move(idx)), {budget}};
}

} // namespace

TEST(Gold, HandCase) {
    KVCacheStore c = one_head_cache(Mat{{2, 0}, {0, 1}, {1, 1}});
    Grid<QuerySet> r(1, 1, at_positions(Mat{{1, 0}, {0, 1}}, 3));
    EXPECT_EQ(gold_selection(r, c, 2, ScoreMode::raw).at(0, 0), (IndexList{0, 2}));
    EXPECT_EQ(gold_selection(r, c, 5, ScoreMode::raw).at(0, 0), (IndexList{0, 1, 2}));
}

TEST(Gold, RejectsMissingResponse) {
    KVCacheStore c = one_head_cache(Mat{{1, 0}});
    Grid<QuerySet> r(1, 1, QuerySet{Mat(0, 2), {}});
    EXPECT_THROW(gold_selection(r, c, 1, ScoreMode::raw), std::invalid_argument);
    Grid<QuerySet> wrong(2, 1, at_positions(Mat{{1, 0}}, 1));
    EXPECT_THROW(gold_selection(wrong, c, 1, ScoreMode::raw), std::invalid_argument);
}

TEST(Recall, HandValues) {
    EXPECT_DOUBLE_EQ(recall(single({0, 1, 2}, 3), single({1, 2, 5}, 3)).mean, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(recall(single({0, 1}, 2), single({0, 1}, 2)).mean, 1.0);
    EXPECT_DOUBLE_EQ(recall(single({3, 4}, 2), single({0, 1}, 2)).mean, 0.0);
    auto empty = recall(single({}, 0), single({}, 0));
    EXPECT_DOUBLE_EQ(empty.mean, 1.0);
    EXPECT_TRUE(empty.degenerate);
}

TEST(Recall, PerHeadAndLayerMeans) {
    Selection gold{Grid<IndexList>(2, 2, IndexList{0, 1}), {2, 2}};
    Selection pred = gold;
    pred.indices.at(1, 0) = {0, 7};
    pred.indices.at(1, 1) = {8, 9};
    auto rep = recall(pred, gold);
    EXPECT_DOUBLE_EQ(rep.layer_mean(0), 1.0);
    EXPECT_DOUBLE_EQ(rep.layer_mean(1), 0.25);
    EXPECT_DOUBLE_EQ(rep.mean, 0.625);
    EXPECT_THROW(recall(single({0}, 1), gold), std::invalid_argument);
}

TEST(Recall, MatchesSetOracle) {
    SplitMix64 rng(31);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t t = 1 + rng.below(64), d = 2 + rng.below(6);
        const std::size_t b = 1 + rng.below(t);
        Mat k = oracle::random_mat(rng, t, d, 2.0f);
        Mat rq = oracle::random_mat(rng, 1 + rng.below(8), d, 2.0f);
        Mat wq = oracle::random_mat(rng, 1 + rng.below(8), d, 2.0f);
        const ScoreMode mode = rng.below(2) ? ScoreMode::raw : ScoreMode::softmax;
        KVCacheStore c = one_head_cache(k);
        Grid<QuerySet> r(1, 1, at_positions(rq, Position(t)));
        Grid<QuerySet> w(1, 1, at_positions(wq, Position(t)));
        Selection gold = gold_selection(r, c, b, mode);
        Selection pred = gold_selection(w, c, b, mode);

        std::vector<Position> kp(t), rp(rq.rows()), wp(wq.rows());
        std::iota(kp.begin(), kp.end(), 0);
        std::iota(rp.begin(), rp.end(), Position(t));
        std::iota(wp.begin(), wp.end(), Position(t));
        const float scale = 1.0f / std::sqrt(float(d));
        const bool sm = mode == ScoreMode::softmax;
        auto g = oracle::as_vector(oracle::top_k(oracle::score_sum(rq, rp, k, kp, sm, scale), b));
        auto p = oracle::as_vector(oracle::top_k(oracle::score_sum(wq, wp, k, kp, sm, scale), b));
        ASSERT_EQ(gold.at(0, 0), g);
        ASSERT_EQ(pred.at(0, 0), p);
        EXPECT_DOUBLE_EQ(recall(pred, gold).mean, oracle::recall(p, g));
    }
}

TEST(Recall, InvariantUnderKeyRelabeling) {
    SplitMix64 rng(32);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t t = 4 + rng.below(30);
        std::vector<std::size_t> perm(t);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        for (std::size_t i = t; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
        auto relabel = [&](const IndexList& a) {
            IndexList out;
            for (std::size_t i : a) out.push_back(perm[i]);
            std::sort(out.begin(), out.end());
            return out;
        };
        IndexList g = top_k_indices(std::vector<float>(t, 0.0f), 1 + rng.below(t));
        IndexList p;
        for (std::size_t i = 0; i < t; ++i)
            if (rng.below(2)) p.push_back(i);
        EXPECT_DOUBLE_EQ(recall(single(p, g.size()), single(g, g.size())).mean,
                         recall(single(relabel(p), g.size()), single(relabel(g), g.size())).mean);
    }
}

namespace {

QueryRecord random_record(SplitMix64& rng, std::size_t t_in, std::size_t t_resp, std::size_t d, KVCacheStore& cache) {
    Mat k = oracle::random_mat(rng, t_in, d, 2.0f);
    cache = one_head_cache(k);
    return {Grid<QuerySet>(1, 1, at_positions(oracle::random_mat(rng, t_in, d, 2.0f), 0)),
            Grid<QuerySet>(1, 1, at_positions(oracle::random_mat(rng, t_resp, d, 2.0f), Position(t_in)))};
}

} // namespace

TEST(Sweep, FlatAtFullBudget) {
    SplitMix64 rng(33);
    KVCacheStore cache;
    QueryRecord rec = random_record(rng, 40, 12, 4, cache);
    auto curve = window_recall_sweep(rec, cache, 4, 40, ScoreMode::softmax);
    ASSERT_EQ(curve.points.size(), 40u + 12u - 4u + 1u);
    EXPECT_EQ(curve.points.front().start, -40);
    for (const auto& p : curve.points) EXPECT_DOUBLE_EQ(p.mean_recall, 1.0);
}

TEST(Sweep, ResponseWindowAtStartZeroIsGold) {
    SplitMix64 rng(34);
    for (ScoreMode mode : {ScoreMode::raw, ScoreMode::softmax}) {
        KVCacheStore cache;
        QueryRecord rec = random_record(rng, 30, 6, 5, cache);
        auto curve = window_recall_sweep(rec, cache, 6, 7, mode);
        EXPECT_DOUBLE_EQ(point_at(curve, 0).mean_recall, 1.0);
        EXPECT_THROW(point_at(curve, 1), std::out_of_range);
    }
}

TEST(Sweep, RejectsOversizedWindow) {
    SplitMix64 rng(35);
    KVCacheStore cache;
    QueryRecord rec = random_record(rng, 5, 2, 3, cache);
    EXPECT_THROW(window_recall_sweep(rec, cache, 8, 2, ScoreMode::raw), std::invalid_argument);
    EXPECT_THROW(window_recall_sweep(rec, cache, 0, 2, ScoreMode::raw), std::invalid_argument);
}

TEST(Sweep, SyntheticGapBetweenInputAndResponseWindows) {
    SyntheticParams p;
    p.seed = 5;
    SyntheticTrace s = gen_synthetic_trace(p);
    auto curve = window_recall_sweep(s.bundle, 8, 1024, ScoreMode::softmax);
    ASSERT_FALSE(curve.points.empty());
    // Budget above the prompt length saturates: every window recovers gold.
    for (const auto& pt : curve.points) EXPECT_DOUBLE_EQ(pt.mean_recall, 1.0);
    auto tight = window_recall_sweep(s.bundle, 8, p.needle_count, ScoreMode::softmax);
    EXPECT_GE(point_at(tight, 0).mean_recall - point_at(tight, -8).mean_recall, 0.3);
}

TEST(Latency, HandBreakdown) {
    auto rep = latency_breakdown({{Stage::prefill, 0.0, 1.0},
                                  {Stage::lookahead, 1.0, 1.5},
                                  {Stage::re_evict, 1.5, 2.0},
                                  {Stage::decode, 2.0, 4.0}});
    EXPECT_DOUBLE_EQ(rep.fraction(Stage::prefill), 0.25);
    EXPECT_DOUBLE_EQ(rep.fraction(Stage::lookahead), 0.125);
    EXPECT_DOUBLE_EQ(rep.fraction(Stage::re_evict), 0.125);
    EXPECT_DOUBLE_EQ(rep.fraction(Stage::decode), 0.5);
    EXPECT_DOUBLE_EQ(rep.total(), 4.0);
}

TEST(Latency, ZeroLengthStageAndRepeatedEvents) {
    auto rep = latency_breakdown({{Stage::prefill, 0.0, 1.0},
                                  {Stage::lookahead, 1.0, 1.0},
                                  {Stage::re_evict, 1.0, 2.0},
                                  {Stage::decode, 2.0, 3.0},
                                  {Stage::decode, 3.0, 4.0}});
    EXPECT_DOUBLE_EQ(rep.fraction(Stage::lookahead), 0.0);
    EXPECT_DOUBLE_EQ(rep.fraction(Stage::decode), 0.5);
    double sum = 0.0;
    for (double f : rep.fractions) sum += f;
    EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Latency, RejectsBadTimelines) {
    EXPECT_THROW(latency_breakdown({{Stage::prefill, 0.0, 1.0}, {Stage::decode, 1.0, 2.0}}), std::invalid_argument);
    EXPECT_THROW(latency_breakdown({{Stage::prefill, 0.0, 1.0},
                                    {Stage::lookahead, 0.5, 1.5},
                                    {Stage::re_evict, 1.5, 2.0},
                                    {Stage::decode, 2.0, 3.0}}),
                 std::invalid_argument);
    EXPECT_THROW(latency_breakdown({{Stage::prefill, 0.0, 0.0},
                                    {Stage::lookahead, 0.0, 0.0},
                                    {Stage::re_evict, 0.0, 0.0},
                                    {Stage::decode, 0.0, 0.0}}),
                 std::invalid_argument);
}
