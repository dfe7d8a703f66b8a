#include <gtest/gtest.h>

#include <set>

#include "laq/model.hpp"
#include "laq/policies.hpp"
#include "laq/rng.hpp"
#include "oracle.hpp"

using namespace laq;

namespace {

HeadKV make_head(const Mat& keys) {
    HeadKV hk(keys.cols());
    for (std::size_t i = 0; i < keys.rows(); ++i) hk.append(keys.row(i), keys.row(i), static_cast<Position>(i));
    return hk;
}

QuerySet after_keys(const Mat& q, Position first) {
    QuerySet s{q, {}};
    for (std::size_t i = 0; i < q.rows(); ++i) s.positions.push_back(first + static_cast<Position>(i));
    return s;
}

KVCacheStore store_of(const std::vector<Mat>& heads_keys, std::size_t layers, std::size_t heads) {
    KVCacheStore c(layers, heads, heads_keys.front().cols());
    for (std::size_t l = 0; l < layers; ++l)
        for (std::size_t h = 0; h < heads; ++h) c.head(l, h) = make_head(heads_keys[l * heads + h]);
    return c;
}

PolicyConfig plain(std::size_t budget) {
    PolicyConfig c;
    c.budget = budget;
    c.keep_window = false;
    c.pool_kernel = 1;
    c.score_mode = ScoreMode::raw;
    return c;
}

// Random single-head instance for oracle comparisons.
struct Instance {
    Mat keys;
    Mat queries;  // one per prefill position
    Mat lookahead;
    PolicyConfig cfg;
};

Instance random_instance(SplitMix64& rng) {
    Instance in;
    const std::size_t t = 1 + rng.below(40);
    const std::size_t d = 2 + rng.below(7);
    in.keys = oracle::random_mat(rng, t, d, 2.0f);
    in.queries = oracle::random_mat(rng, t, d, 2.0f);
    in.lookahead = oracle::random_mat(rng, rng.below(9), d, 2.0f);
    in.cfg.window_len = 1 + rng.below(std::min<std::size_t>(t, 10));
    in.cfg.keep_window = rng.below(2) == 0;
    in.cfg.budget = (in.cfg.keep_window ? in.cfg.window_len : 0) + rng.below(t + 4);
    in.cfg.pool_kernel = 1 + 2 * rng.below(4);
    in.cfg.score_mode = rng.below(2) ? ScoreMode::raw : ScoreMode::softmax;
    return in;
}

std::vector<Position> iota_pos(std::size_t n, Position first = 0) {
    std::vector<Position> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = first + static_cast<Position>(i);
    return p;
}

} // namespace

// --- attn_score_sum -----------------------------------------------------------

TEST(AttnScoreSum, HandDotProducts) {
    Mat q{{1, 0}, {0, 1}};
    Mat k{{2, 0}, {0, 1}, {1, 1}};
    auto s = attn_score_sum(q, k, ScoreMode::raw, {1.0f, {}, {}});
    EXPECT_EQ(s, (ScoreVec{2, 1, 2}));
}

TEST(AttnScoreSum, SingleQuerySoftmaxIsOneRow) {
    SplitMix64 rng(1);
    Mat q = oracle::random_mat(rng, 1, 4);
    Mat k = oracle::random_mat(rng, 9, 4);
    auto s = attn_score_sum(q, k, ScoreMode::softmax);
    Mat logits = matmul_bt(q, k);
    for (float& v : logits.data()) v *= 0.5f;
    Mat row = softmax_rows(logits);
    float sum = 0.0f;
    for (std::size_t j = 0; j < 9; ++j) {
        EXPECT_NEAR(s[j], row(0, j), 1e-7);
        sum += s[j];
    }
    EXPECT_NEAR(sum, 1.0f, 1e-6);
}

TEST(AttnScoreSum, DuplicatedQueriesDoubleRawScores) {
    SplitMix64 rng(2);
    Mat q = oracle::random_mat(rng, 3, 5);
    Mat k = oracle::random_mat(rng, 7, 5);
    Mat qq = q;
    for (std::size_t r = 0; r < 3; ++r) qq.append_row(q.row(r));
    auto once = attn_score_sum(Mat{{1, 1, 1, 1, 1}}, k, ScoreMode::raw);
    (void)once;
    auto a = attn_score_sum(q, k, ScoreMode::raw, {1.0f, {}, {}});
    auto b = attn_score_sum(qq, k, ScoreMode::raw, {1.0f, {}, {}});
    for (std::size_t j = 0; j < 7; ++j) EXPECT_NEAR(b[j], 2.0f * a[j], 1e-5f * std::max(1.0f, std::abs(a[j])));
}

TEST(AttnScoreSum, CausalMaskHidesFutureKeys) {
    Mat q{{1, 0}};
    Mat k{{1, 0}, {5, 0}, {9, 0}};
    std::vector<Position> qp{1}, kp{0, 1, 2};
    auto s = attn_score_sum(q, k, ScoreMode::softmax, {1.0f, qp, kp});
    EXPECT_EQ(s[2], 0.0f);
    EXPECT_NEAR(s[0] + s[1], 1.0f, 1e-6);
}

TEST(AttnScoreSum, RejectsEmptyOrMismatched) {
    EXPECT_THROW(attn_score_sum(Mat(0, 2), Mat(3, 2), ScoreMode::raw), std::invalid_argument);
    EXPECT_THROW(attn_score_sum(Mat(1, 3), Mat(3, 2), ScoreMode::raw), std::invalid_argument);
}

TEST(AttnScoreSum, MatchesDoubleLoopOracleExactly) {
    SplitMix64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t t = 1 + rng.below(30), d = 1 + rng.below(8), nq = 1 + rng.below(10);
        Mat k = oracle::random_mat(rng, t, d, 3.0f);
        Mat q = oracle::random_mat(rng, nq, d, 3.0f);
        auto kp = iota_pos(t);
        std::vector<Position> qp;
        for (std::size_t i = 0; i < nq; ++i) qp.push_back(static_cast<Position>(rng.below(t + 3)));
        const float scale = 1.0f / std::sqrt(static_cast<float>(d));
        for (ScoreMode m : {ScoreMode::raw, ScoreMode::softmax}) {
            auto got = attn_score_sum(q, k, m, {std::nullopt, qp, kp});
            EXPECT_EQ(got, oracle::score_sum(q, qp, k, kp, m == ScoreMode::softmax, scale));
        }
    }
}

// --- h2o / snapkv ------------------------------------------------------------

TEST(H2O, FullBudgetKeepsEverything) {
    SplitMix64 rng(4);
    Mat k = oracle::random_mat(rng, 12, 4);
    PolicyConfig cfg;
    cfg.budget = 12;
    auto hs = select_h2o_head(after_keys(oracle::random_mat(rng, 12, 4), 0), make_head(k), 12, cfg);
    EXPECT_EQ(hs.indices, top_k_indices(std::vector<float>(12, 0.0f), 12));
}

TEST(H2O, UniformKeysResolveTiesToLowerIndex) {
    Mat k(6, 3);
    for (float& v : k.data()) v = 0.5f;
    auto hs = select_h2o_head(after_keys(Mat{{1, 2, 3}}, 10), make_head(k), 2, plain(2));
    EXPECT_EQ(hs.indices, (IndexList{0, 1}));
}

TEST(H2O, HandCase) {
    Mat k{{2, 0}, {0, 1}, {1, 1}};
    PolicyConfig cfg = plain(2);
    // d_h = 2 here, so the default 1/sqrt(2) scale multiplies [2, 1, 2]; order is unchanged.
    auto hs = select_h2o_head(after_keys(Mat{{1, 0}, {0, 1}}, 3), make_head(k), 2, cfg);
    EXPECT_EQ(hs.indices, (IndexList{0, 2}));
}

TEST(H2O, KeepWindowForcesTail) {
    Mat k{{9, 0}, {8, 0}, {0, 0}, {0, 0}, {0, 0}};
    PolicyConfig cfg = plain(3);
    cfg.keep_window = true;
    cfg.window_len = 2;
    auto hs = select_h2o_head(after_keys(Mat{{1, 0}}, 5), make_head(k), 3, cfg);
    EXPECT_EQ(hs.indices, (IndexList{0, 3, 4}));
    cfg.budget = 1;
    EXPECT_THROW(cfg.validate_for(PolicyId::h2o), std::invalid_argument);
}

TEST(SnapKV, WholeWindowReducesToPooledH2O) {
    SplitMix64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t t = 4 + rng.below(20);
        Mat k = oracle::random_mat(rng, t, 4);
        QuerySet all = after_keys(oracle::random_mat(rng, t, 4), 0);
        PolicyConfig cfg;
        cfg.keep_window = false;
        cfg.window_len = t;
        cfg.pool_kernel = 5;
        const std::size_t b = 1 + rng.below(t);
        auto snap = select_snapkv_head(all.last(t), make_head(k), b, cfg);
        auto h2o = select_h2o_head(all, make_head(k), b, cfg);
        EXPECT_EQ(snap.indices, top_k_indices(pool_avg_1d(h2o.scores, 5), b));
    }
}

TEST(SnapKV, KernelOneWindowOne) {
    SplitMix64 rng(6);
    Mat k = oracle::random_mat(rng, 10, 4);
    QuerySet all = after_keys(oracle::random_mat(rng, 10, 4), 0);
    PolicyConfig cfg;
    cfg.window_len = 1;
    cfg.pool_kernel = 1;
    auto hs = select_snapkv_head(all.last(1), make_head(k), 4, cfg);
    // The single window query at position 9 sees every key: one softmax row.
    Mat row = all.rows.slice_rows(9, 1);
    auto probs = attn_score_sum(row, k, ScoreMode::softmax);
    IndexList expect = top_k_indices(std::span<const float>(probs).first(9), 3);
    expect.push_back(9);
    EXPECT_EQ(hs.indices, expect);
}

// --- streaming / pyramid -----------------------------------------------------

TEST(Streaming, SinksPlusRecent) {
    EXPECT_EQ(streaming_indices(10, 4, 2), (IndexList{0, 1, 8, 9}));
    EXPECT_EQ(streaming_indices(5, 9, 2), (IndexList{0, 1, 2, 3, 4}));
    EXPECT_EQ(streaming_indices(9, 3, 0), (IndexList{6, 7, 8}));
    PolicyConfig cfg;
    cfg.budget = 4;
    cfg.sink_count = 4;
    EXPECT_THROW(select_streaming(1, 1, 10, cfg), std::invalid_argument);
}

TEST(Pyramid, HandSchedule) {
    EXPECT_EQ(pyramid_budgets(4, 4, 2), (std::vector<std::size_t>{6, 5, 3, 2}));
    EXPECT_EQ(pyramid_budgets(1, 17, 3), (std::vector<std::size_t>{17}));
    EXPECT_EQ(pyramid_budgets(5, 8, 8), (std::vector<std::size_t>(5, 8)));
    EXPECT_THROW(pyramid_budgets(3, 4, 5), std::invalid_argument);
}

TEST(Pyramid, SumPreservedAndWithinOneOfLinearSchedule) {
    SplitMix64 rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t layers = 1 + rng.below(32), b = rng.below(257), m = rng.below(b + 1);
        auto bs = pyramid_budgets(layers, b, m);
        std::size_t sum = 0;
        for (std::size_t l = 0; l < layers; ++l) {
            sum += bs[l];
            EXPECT_GE(bs[l], m);
            if (layers > 1) {
                const double exact = double(m) + double(2 * b - 2 * m) * double(layers - 1 - l) / double(layers - 1);
                EXPECT_LT(std::abs(double(bs[l]) - exact), 1.0);
            }
            if (l > 0) {
                EXPECT_LE(bs[l], bs[l - 1]);
            }
        }
        EXPECT_EQ(sum, layers * b);
    }
}

TEST(PyramidKV, FlatScheduleEqualsSnapKV) {
    SplitMix64 rng(8);
    std::vector<Mat> keys;
    for (int i = 0; i < 6; ++i) keys.push_back(oracle::random_mat(rng, 30, 4));
    KVCacheStore cache = store_of(keys, 3, 2);
    Grid<QuerySet> w(3, 2);
    for (auto& q : w) q = after_keys(oracle::random_mat(rng, 4, 4), 26);
    PolicyConfig cfg;
    cfg.budget = 12;
    cfg.window_len = 4;
    cfg.pyramid_floor = 12;
    auto a = select_pyramidkv(w, cache, cfg);
    auto b = select_snapkv(w, cache, cfg);
    EXPECT_EQ(a.selection.indices, b.selection.indices);
}

TEST(PyramidKV, PerLayerSizesFollowSchedule) {
    SplitMix64 rng(9);
    std::vector<Mat> keys;
    for (int i = 0; i < 8; ++i) keys.push_back(oracle::random_mat(rng, 16, 4));
    KVCacheStore cache = store_of(keys, 4, 2);
    Grid<QuerySet> w(4, 2);
    for (auto& q : w) q = after_keys(oracle::random_mat(rng, 2, 4), 14);
    PolicyConfig cfg;
    cfg.budget = 4;
    cfg.window_len = 2;
    cfg.pyramid_floor = 2;
    auto s = select_pyramidkv(w, cache, cfg);
    const std::vector<std::size_t> expect{6, 5, 3, 2};
    EXPECT_EQ(s.selection.budgets, expect);
    for (std::size_t l = 0; l < 4; ++l)
        for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(s.selection.at(l, h).size(), expect[l]);
}

// --- LAQ -------------------------------------------------------------------------

TEST(LAQ, HandCaseSingleLookaheadQuery) {
    KVCacheStore cache = store_of({Mat{{1, 0}, {0, 1}}}, 1, 1);
    QCache q{Grid<Mat>(1, 1, Mat{{1, 0}}), {2}};
    Grid<QuerySet> w(1, 1, QuerySet{Mat(0, 2), {}});
    auto s = select_laq(q, cache, plain(1), LaqVariant::laq, w);
    EXPECT_EQ(s.selection.at(0, 0), (IndexList{0}));
}

TEST(LAQ, ResponseQueriesReproduceGold) {
    SplitMix64 rng(10);
    KVCacheStore cache = store_of({oracle::random_mat(rng, 40, 6), oracle::random_mat(rng, 40, 6)}, 1, 2);
    QCache r{Grid<Mat>(1, 2), iota_pos(12, 40)};
    for (auto& m : r.queries) m = oracle::random_mat(rng, 12, 6);
    Grid<QuerySet> w(1, 2, QuerySet{Mat(0, 6), {}});
    auto s = select_laq(r, cache, plain(10), LaqVariant::laq, w);
    for (std::size_t h = 0; h < 2; ++h) {
        auto gold = oracle::top_k(oracle::score_sum(r.queries.at(0, h), r.step_positions, cache.head(0, h).keys,
                                                    cache.head(0, h).positions, false, 1.0f / std::sqrt(6.0f)),
                                  10);
        EXPECT_EQ(s.selection.at(0, h), oracle::as_vector(gold));
    }
}

TEST(LAQ, PlusPlusWithoutLookaheadEqualsSnapKV) {
    SplitMix64 rng(11);
    std::vector<Mat> keys;
    for (int i = 0; i < 4; ++i) keys.push_back(oracle::random_mat(rng, 25, 4));
    KVCacheStore cache = store_of(keys, 2, 2);
    Grid<QuerySet> w(2, 2);
    for (auto& q : w) q = after_keys(oracle::random_mat(rng, 8, 4), 17);
    PolicyConfig cfg;
    cfg.budget = 12;
    QCache empty{Grid<Mat>(2, 2, Mat(0, 4)), {}};
    auto a = select_laq(empty, cache, cfg, LaqVariant::laq_pp, w);
    auto b = select_snapkv(w, cache, cfg);
    EXPECT_EQ(a.selection, b.selection);
    EXPECT_EQ(a.scores, b.scores);
    EXPECT_FALSE(a.notes.empty());
    EXPECT_THROW(select_laq(empty, cache, cfg, LaqVariant::laq, w), std::invalid_argument);
}

TEST(LAQ, RejectsQCacheGeometryMismatch) {
    KVCacheStore cache = store_of({Mat{{1, 0}, {0, 1}}}, 1, 1);
    Grid<QuerySet> w(1, 1, QuerySet{Mat(0, 2), {}});
    QCache wrong_dim{Grid<Mat>(1, 1, Mat{{1, 0, 0}}), {2}};
    EXPECT_THROW(select_laq(wrong_dim, cache, plain(1), LaqVariant::laq, w), std::invalid_argument);
    QCache wrong_grid{Grid<Mat>(2, 1, Mat{{1, 0}}), {2}};
    EXPECT_THROW(select_laq(wrong_grid, cache, plain(1), LaqVariant::laq, w), std::invalid_argument);
}

// --- policy-wide properties --------------------------------------------------

TEST(PolicyProperties, EverySelectMatchesNaiveOracle) {
    SplitMix64 rng(12);
    for (int trial = 0; trial < 300; ++trial) {
        Instance in = random_instance(rng);
        const std::size_t t = in.keys.rows();
        const std::size_t d = in.keys.cols();
        const float scale = 1.0f / std::sqrt(static_cast<float>(d));
        const bool sm = in.cfg.score_mode == ScoreMode::softmax;
        const std::size_t w = in.cfg.window_len;
        const std::size_t forced = in.cfg.keep_window ? w : 0;
        HeadKV kv = make_head(in.keys);
        QuerySet all = after_keys(in.queries, 0);
        QuerySet win = all.last(w);
        QuerySet la = after_keys(in.lookahead, static_cast<Position>(t));
        const auto kp = iota_pos(t);

        // h2o: causal sums over every prefill query, no pooling
        auto h2o = select_h2o_head(all, kv, in.cfg.budget, in.cfg);
        EXPECT_EQ(h2o.indices, oracle::as_vector(oracle::forced_tail_select(
                                   oracle::score_sum(in.queries, kp, in.keys, kp, sm, scale), in.cfg.budget, forced, 1)));

        // snapkv: window sums, pooled prefix
        auto snap = select_snapkv_head(win, kv, in.cfg.budget, in.cfg);
        auto win_scores = oracle::score_sum(win.rows, win.positions, in.keys, kp, sm, scale);
        EXPECT_EQ(snap.indices, oracle::as_vector(oracle::forced_tail_select(win_scores, in.cfg.budget, forced,
                                                                            in.cfg.pool_kernel)));

        // laq / laq_pp
        if (!la.empty()) {
            auto laq = select_laq_head(la, win, kv, in.cfg.budget, in.cfg, LaqVariant::laq);
            EXPECT_EQ(laq.indices, oracle::as_vector(oracle::forced_tail_select(
                                       oracle::score_sum(la.rows, la.positions, in.keys, kp, sm, scale),
                                       in.cfg.budget, forced, in.cfg.pool_kernel)));
        }
        Mat wq = win.rows;
        std::vector<Position> wp = win.positions;
        for (std::size_t r = 0; r < la.size(); ++r) {
            wq.append_row(la.rows.row(r));
            wp.push_back(la.positions[r]);
        }
        auto pp = select_laq_head(la, win, kv, in.cfg.budget, in.cfg, LaqVariant::laq_pp);
        EXPECT_EQ(pp.indices, oracle::as_vector(oracle::forced_tail_select(oracle::score_sum(wq, wp, in.keys, kp, sm, scale),
                                                                          in.cfg.budget, forced, in.cfg.pool_kernel)));

        // streaming: explicit set
        std::set<std::size_t> st;
        const std::size_t sinks = 1 + rng.below(4);
        for (std::size_t i = 0; i < t; ++i)
            if (in.cfg.budget >= t || i < sinks || i + (in.cfg.budget - std::min(sinks, in.cfg.budget)) >= t) st.insert(i);
        if (in.cfg.budget >= sinks + 1) {
            EXPECT_EQ(streaming_indices(t, in.cfg.budget, sinks), oracle::as_vector(st));
        }

        // budget exactness and window guarantee
        for (const auto* hs : {&h2o, &snap, &pp}) {
            EXPECT_EQ(hs->indices.size(), std::min(in.cfg.budget, t));
            if (in.cfg.keep_window) {
                for (std::size_t i = t - std::min(w, t); i < t; ++i)
                    EXPECT_TRUE(std::binary_search(hs->indices.begin(), hs->indices.end(), i));
            }
        }
    }
}

TEST(PolicyProperties, SaturationSelectsEverything) {
    SplitMix64 rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        Instance in = random_instance(rng);
        const std::size_t t = in.keys.rows();
        HeadKV kv = make_head(in.keys);
        QuerySet all = after_keys(in.queries, 0);
        QuerySet la = after_keys(oracle::random_mat(rng, 2, in.keys.cols()), static_cast<Position>(t));
        const std::size_t b = t + rng.below(5);
        IndexList every = top_k_indices(std::vector<float>(t, 0.0f), t);
        PolicyConfig cfg = in.cfg;
        EXPECT_EQ(select_h2o_head(all, kv, b, cfg).indices, every);
        EXPECT_EQ(select_snapkv_head(all.last(cfg.window_len), kv, b, cfg).indices, every);
        EXPECT_EQ(select_laq_head(la, all.last(cfg.window_len), kv, b, cfg, LaqVariant::laq).indices, every);
        EXPECT_EQ(select_laq_head(la, all.last(cfg.window_len), kv, b, cfg, LaqVariant::laq_pp).indices, every);
        EXPECT_EQ(streaming_indices(t, b, 4), every);
    }
}

TEST(PolicyProperties, NestedInBudget) {
    SplitMix64 rng(14);
    for (int trial = 0; trial < 50; ++trial) {
        Instance in = random_instance(rng);
        HeadKV kv = make_head(in.keys);
        QuerySet all = after_keys(in.queries, 0);
        PolicyConfig cfg = in.cfg;
        IndexList prev = select_snapkv_head(all.last(cfg.window_len), kv, cfg.forced_window(), cfg).indices;
        for (std::size_t b = cfg.forced_window() + 1; b <= in.keys.rows(); ++b) {
            IndexList cur = select_snapkv_head(all.last(cfg.window_len), kv, b, cfg).indices;
            EXPECT_TRUE(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
            prev = cur;
        }
    }
}

TEST(PolicyProperties, RawModeInvariantToPositiveQueryScaling) {
    SplitMix64 rng(15);
    for (int trial = 0; trial < 50; ++trial) {
        Instance in = random_instance(rng);
        in.cfg.score_mode = ScoreMode::raw;
        HeadKV kv = make_head(in.keys);
        QuerySet all = after_keys(in.queries, 0);
        QuerySet scaled = all;
        for (float& v : scaled.rows.data()) v *= 4.0f;  // power of two keeps products exact
        EXPECT_EQ(select_h2o_head(all, kv, in.cfg.budget, in.cfg).indices,
                  select_h2o_head(scaled, kv, in.cfg.budget, in.cfg).indices);
        EXPECT_EQ(select_snapkv_head(all.last(in.cfg.window_len), kv, in.cfg.budget, in.cfg).indices,
                  select_snapkv_head(scaled.last(in.cfg.window_len), kv, in.cfg.budget, in.cfg).indices);
    }
}

TEST(PolicyIds, ParseRoundTrip) {
    for (const auto& [id, name] : kPolicyNames) EXPECT_EQ(parse_policy(name), id);
    EXPECT_THROW(parse_policy("snap"), std::invalid_argument);
    EXPECT_EQ(parse_score_mode("raw"), ScoreMode::raw);
    EXPECT_THROW(parse_score_mode("logits"), std::invalid_argument);
}

// --- lookahead on the toy model ------------------------------------------------

namespace {

struct ToyFixture {
    Model model = init_model([] {
        ModelConfig c;
        c.vocab = 40;
        c.layers = 2;
        c.heads = 2;
        c.head_dim = 8;
        c.max_pos = 256;
        c.seed = 3;
        return c;
    }());
    std::vector<TokenId> prompt() const {
        SplitMix64 rng(21);
        std::vector<TokenId> p(48);
        for (auto& t : p) t = static_cast<TokenId>(rng.below(40));
        return p;
    }
};

} // namespace

TEST(Lookahead, CapturesConfiguredStepsAndLeavesCacheIntact) {
    ToyFixture fx;
    auto pre = prefill(fx.model, fx.prompt());
    const KVCacheStore snapshot = pre.cache;
    PolicyConfig cfg;
    cfg.lookahead_budget = 16;
    auto la = run_lookahead(fx.model, pre, cfg);
    EXPECT_EQ(la.qcache.steps(), 8u);
    for (const Mat& q : la.qcache.queries) EXPECT_EQ(q.rows(), 8u);
    EXPECT_EQ(la.qcache.step_positions.front(), 48);
    EXPECT_EQ(pre.cache, snapshot);
    EXPECT_EQ(la.low_budget.at(0, 0).size(), 16u);
}

TEST(Lookahead, FullPolicyEqualsUnrestrictedContinuation) {
    ToyFixture fx;
    auto pre = prefill(fx.model, fx.prompt());
    PolicyConfig cfg;
    cfg.lookahead_policy = PolicyId::full;
    cfg.lookahead_budget = 48;
    auto la = run_lookahead(fx.model, pre, cfg);
    KVCacheStore grown = pre.cache;
    EXPECT_EQ(la.pseudo_tokens, decode_in_place(fx.model, grown, pre.next_token, 48, 8));
}

TEST(Lookahead, DeterministicQCache) {
    ToyFixture fx;
    auto pre = prefill(fx.model, fx.prompt());
    PolicyConfig cfg;
    for (PolicyId lp : {PolicyId::streaming, PolicyId::snapkv, PolicyId::h2o, PolicyId::pyramidkv}) {
        cfg.lookahead_policy = lp;
        EXPECT_EQ(run_lookahead(fx.model, pre, cfg).qcache, run_lookahead(fx.model, pre, cfg).qcache);
    }
    cfg.lookahead_policy = PolicyId::laq;
    EXPECT_THROW(run_lookahead(fx.model, pre, cfg), std::invalid_argument);
    cfg.lookahead_policy = PolicyId::snapkv;
    cfg.lookahead_budget = 4;
    EXPECT_THROW(run_lookahead(fx.model, pre, cfg), std::invalid_argument);
}

TEST(SelectPolicy, DispatchesEveryIdWithExactBudgets) {
    ToyFixture fx;
    auto pre = prefill(fx.model, fx.prompt());
    PolicyConfig cfg;
    cfg.budget = 20;
    auto la = run_lookahead(fx.model, pre, cfg);
    for (const auto& [id, name] : kPolicyNames) {
        auto s = select_policy(id, {pre.cache, pre.queries, &la.qcache}, cfg);
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t h = 0; h < 2; ++h) {
                const std::size_t want = id == PolicyId::full ? 48 : std::min<std::size_t>(s.selection.budgets[l], 48);
                EXPECT_EQ(s.selection.at(l, h).size(), want) << name;
            }
    }
    EXPECT_THROW(select_policy(PolicyId::laq, {pre.cache, pre.queries, nullptr}, cfg), std::invalid_argument);
}
