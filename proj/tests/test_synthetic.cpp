#include <gtest/gtest.h>

#include "laq/policies.hpp"
#include "laq/synthetic.hpp"

using namespace laq;

namespace {

double laq_recall(const SyntheticTrace& s, std::size_t steps, std::size_t budget) {
    const TraceBundle& b = s.bundle;
    KVCacheStore cache = cache_from_trace(b);
    PolicyConfig cfg;
    cfg.budget = budget;
    cfg.pool_kernel = 1;
    cfg.keep_window = false;
    QCache q = qcache_from_rows(b.lookahead_queries, steps, b.meta.t_input);
    Grid<QuerySet> window = trailing_window(input_query_sets(b), 8);
    auto pred = select_laq(q, cache, cfg, LaqVariant::laq, window);
    auto gold = gold_selection(response_query_sets(b), cache, budget, ScoreMode::softmax);
    return recall(pred.selection, gold).mean;
}

} // namespace

TEST(Synthetic, GoldIsTheNeedleSet) {
    SyntheticParams p;
    p.seed = 11;
    SyntheticTrace s = gen_synthetic_trace(p);
    KVCacheStore cache = cache_from_trace(s.bundle);
    Selection gold = gold_selection(response_query_sets(s.bundle), cache, p.needle_count, ScoreMode::softmax);
    EXPECT_EQ(gold.indices, s.needles);
    Selection prompt = gold_selection(input_query_sets(s.bundle), cache, p.needle_count, ScoreMode::softmax);
    EXPECT_EQ(prompt.indices, s.distractors);
}

TEST(Synthetic, InputWindowsMissAndResponseWindowRecovers) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        SyntheticParams p;
        p.seed = seed;
        p.t_input = 128;
        SyntheticTrace s = gen_synthetic_trace(p);
        auto curve = window_recall_sweep(s.bundle, 8, p.needle_count, ScoreMode::softmax);
        for (const auto& pt : curve.points) {
            if (pt.start + 8 <= 0) {
                EXPECT_DOUBLE_EQ(pt.mean_recall, 0.0) << "start " << pt.start;
            } else if (pt.start >= 0) {
                EXPECT_DOUBLE_EQ(pt.mean_recall, 1.0) << "start " << pt.start;
            }
        }
    }
}

TEST(Synthetic, LookaheadRecallGrowsWithSteps) {
    SyntheticParams p;
    p.seed = 2;
    SyntheticTrace s = gen_synthetic_trace(p);
    for (std::size_t steps : {1u, 2u, 4u, 8u})
        EXPECT_DOUBLE_EQ(laq_recall(s, steps, p.needle_count), double(steps) / 8.0) << steps << " steps";
}

TEST(Synthetic, DeterministicPerSeed) {
    SyntheticParams p;
    p.t_input = 64;
    p.seed = 9;
    EXPECT_EQ(gen_synthetic_trace(p).bundle, gen_synthetic_trace(p).bundle);
    SyntheticParams q = p;
    q.seed = 10;
    EXPECT_NE(gen_synthetic_trace(p).bundle, gen_synthetic_trace(q).bundle);
}

TEST(Synthetic, RejectsInfeasibleParameters) {
    SyntheticParams p;
    p.t_input = 15;
    EXPECT_THROW(gen_synthetic_trace(p), std::invalid_argument);
    p = {};
    p.head_dim = 9;
    EXPECT_THROW(gen_synthetic_trace(p), std::invalid_argument);
    p = {};
    p.lookahead_mix = 1.0f;
    EXPECT_THROW(gen_synthetic_trace(p), std::invalid_argument);
    p = {};
    p.needle_count = 0;
    EXPECT_THROW(gen_synthetic_trace(p), std::invalid_argument);
}
