#pragma once

// Deterministic toy decoder-only transformer.
//
// Pre-norm blocks (RMSNorm without gain), multi-head attention with optional
// rotary embedding, SiLU MLP, untied output head. Keys stored in the cache
// and captured queries are post-projection and post-rotary, i.e. exactly the
// vectors attention multiplies. Rows are treated as row vectors: y = x * W.
//
// Weight layout, in initialization order (D = heads * head_dim, F = mlp_mult * D):
//
//   name              shape        init
//   embedding         vocab x D    U(-1, 1)
//   layer.{l}.wq      D x D        U(-1/sqrt(D), 1/sqrt(D))
//   layer.{l}.wk      D x D        U(-1/sqrt(D), 1/sqrt(D))
//   layer.{l}.wv      D x D        U(-1/sqrt(D), 1/sqrt(D))
//   layer.{l}.wo      D x D        U(-1/sqrt(D), 1/sqrt(D))
//   layer.{l}.w_up    D x F        U(-1/sqrt(D), 1/sqrt(D))
//   layer.{l}.w_down  F x D        U(-1/sqrt(F), 1/sqrt(F))
//   lm_head           D x vocab    U(-1/sqrt(D), 1/sqrt(D))
//
// All values come from one SplitMix64 stream seeded with config.seed, drawn
// in the order above, row-major within each tensor.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "laq/grid.hpp"
#include "laq/kvcache.hpp"
#include "laq/rng.hpp"
#include "laq/tensor.hpp"

namespace laq {

using TokenId = std::uint32_t;

struct ModelConfig {
    std::size_t vocab = 64;
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t head_dim = 16;
    std::size_t mlp_mult = 2;
    std::size_t max_pos = 1024;
    std::uint64_t seed = 0;
    bool rope_enabled = true;
    std::size_t model_dim = 0;  // 0 = heads * head_dim

    std::size_t dim() const { return heads * head_dim; }

    void validate() const {
        if (vocab == 0 || layers == 0 || heads == 0 || head_dim == 0 || mlp_mult == 0 || max_pos == 0) {
            throw std::invalid_argument("ModelConfig: all counts must be >= 1");
        }
        if (model_dim != 0 && model_dim != dim()) {
            throw std::invalid_argument("ModelConfig: model_dim " + std::to_string(model_dim) +
                                        " != heads * head_dim = " + std::to_string(dim()));
        }
        if (rope_enabled && head_dim % 2 != 0) {
            throw std::invalid_argument("ModelConfig: rotary embedding needs an even head_dim");
        }
    }
};

struct WeightShape {
    std::string name;
    std::size_t rows;
    std::size_t cols;
};

inline std::vector<WeightShape> weight_layout(const ModelConfig& cfg) {
    const std::size_t d = cfg.dim();
    const std::size_t f = cfg.mlp_mult * d;
    std::vector<WeightShape> out{{"embedding", cfg.vocab, d}};
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer." + std::to_string(l) + ".";
        out.push_back({p + "wq", d, d});
        out.push_back({p + "wk", d, d});
        out.push_back({p + "wv", d, d});
        out.push_back({p + "wo", d, d});
        out.push_back({p + "w_up", d, f});
        out.push_back({p + "w_down", f, d});
    }
    out.push_back({"lm_head", d, cfg.vocab});
    return out;
}

struct LayerWeights {
    Mat wq, wk, wv, wo, w_up, w_down;
    bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
    Mat embedding;
    std::vector<LayerWeights> layers;
    Mat lm_head;

    // Tensors in layout order, for audits and serialization.
    std::vector<const Mat*> tensors() const {
        std::vector<const Mat*> out{&embedding};
        for (const auto& lw : layers) {
            for (const Mat* m : {&lw.wq, &lw.wk, &lw.wv, &lw.wo, &lw.w_up, &lw.w_down}) out.push_back(m);
        }
        out.push_back(&lm_head);
        return out;
    }

    bool operator==(const ModelWeights&) const = default;
};

class Model {
public:
    Model(ModelConfig config, ModelWeights weights) : config_(config), weights_(std::move(weights)) {}

    const ModelConfig& config() const { return config_; }
    const ModelWeights& weights() const { return weights_; }

private:
    ModelConfig config_;
    ModelWeights weights_;
};

inline Model init_model(const ModelConfig& config) {
    config.validate();
    SplitMix64 rng(config.seed);
    auto draw = [&](std::size_t rows, std::size_t cols, float bound) {
        Mat m(rows, cols);
        for (float& v : m.data()) v = rng.symmetric(bound);
        return m;
    };
    const std::size_t d = config.dim();
    const std::size_t f = config.mlp_mult * d;
    const float bd = 1.0f / std::sqrt(static_cast<float>(d));
    const float bf = 1.0f / std::sqrt(static_cast<float>(f));

    ModelWeights w;
    w.embedding = draw(config.vocab, d, 1.0f);
    for (std::size_t l = 0; l < config.layers; ++l) {
        LayerWeights lw;
        lw.wq = draw(d, d, bd);
        lw.wk = draw(d, d, bd);
        lw.wv = draw(d, d, bd);
        lw.wo = draw(d, d, bd);
        lw.w_up = draw(d, f, bd);
        lw.w_down = draw(f, d, bf);
        w.layers.push_back(std::move(lw));
    }
    w.lm_head = draw(d, config.vocab, bd);
    return Model(config, std::move(w));
}

namespace detail {

inline std::vector<float> rms_norm(std::span<const float> x) {
    float ss = 0.0f;
    for (float v : x) ss += v * v;
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + 1e-6f);
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv;
    return out;
}

inline std::vector<float> vec_mat(std::span<const float> x, const Mat& w) {
    std::vector<float> out(w.cols(), 0.0f);
    for (std::size_t k = 0; k < w.rows(); ++k) {
        const float xk = x[k];
        auto row = w.row(k);
        for (std::size_t j = 0; j < w.cols(); ++j) out[j] += xk * row[j];
    }
    return out;
}

inline void rope(std::span<float> v, Position pos) {
    const std::size_t d = v.size();
    for (std::size_t i = 0; i + 1 < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(pos) * freq;
        const float c = static_cast<float>(std::cos(angle));
        const float s = static_cast<float>(std::sin(angle));
        const float a = v[i];
        const float b = v[i + 1];
        v[i] = a * c - b * s;
        v[i + 1] = a * s + b * c;
    }
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

inline TokenId argmax_token(std::span<const float> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return static_cast<TokenId>(best);
}

// x += silu(rms(x) * w_up) * w_down
inline void mlp_residual(std::span<float> x, const LayerWeights& lw) {
    auto h = rms_norm(x);
    auto up = vec_mat(h, lw.w_up);
    for (float& u : up) u = silu(u);
    auto down = vec_mat(up, lw.w_down);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += down[j];
}

// Per-head projection slices with rotary applied to q and k.
struct HeadProjections {
    std::vector<float> q, k, v;  // D each, heads concatenated
};

inline HeadProjections project(std::span<const float> x, const LayerWeights& lw, const ModelConfig& cfg,
                               Position pos) {
    auto h = rms_norm(x);
    HeadProjections p{vec_mat(h, lw.wq), vec_mat(h, lw.wk), vec_mat(h, lw.wv)};
    if (cfg.rope_enabled) {
        for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
            rope(std::span<float>(p.q).subspan(hd * cfg.head_dim, cfg.head_dim), pos);
            rope(std::span<float>(p.k).subspan(hd * cfg.head_dim, cfg.head_dim), pos);
        }
    }
    return p;
}

inline std::vector<float> output_logits(std::span<const float> x, const Model& model) {
    auto h = rms_norm(x);
    return vec_mat(h, model.weights().lm_head);
}

} // namespace detail

struct PrefillResult {
    KVCacheStore cache;
    Grid<QuerySet> queries;           // per layer/head: T x head_dim, positions 0..T-1
    std::vector<float> last_hidden;
    std::vector<float> logits;        // at the last prompt position
    TokenId next_token = 0;
    std::optional<Grid<Mat>> attention;  // T x T probabilities, when requested
};

struct PrefillOptions {
    bool capture_attention = false;
};

inline PrefillResult prefill(const Model& model, std::span<const TokenId> tokens, PrefillOptions opts = {}) {
    const ModelConfig& cfg = model.config();
    const std::size_t t = tokens.size();
    if (t == 0 || t > cfg.max_pos) {
        throw std::invalid_argument("prefill: length " + std::to_string(t) + " outside [1, " +
                                    std::to_string(cfg.max_pos) + "]");
    }
    const std::size_t d = cfg.dim();
    const std::size_t dh = cfg.head_dim;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    PrefillResult res;
    res.cache = KVCacheStore(cfg.layers, cfg.heads, dh);
    res.queries = Grid<QuerySet>(cfg.layers, cfg.heads);
    if (opts.capture_attention) res.attention = Grid<Mat>(cfg.layers, cfg.heads, Mat(t, t));

    Mat x(t, d);
    for (std::size_t i = 0; i < t; ++i) {
        if (tokens[i] >= cfg.vocab) throw std::invalid_argument("prefill: token id out of vocabulary");
        auto src = model.weights().embedding.row(tokens[i]);
        std::copy(src.begin(), src.end(), x.row(i).begin());
    }

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = model.weights().layers[l];
        std::vector<detail::HeadProjections> proj;
        proj.reserve(t);
        for (std::size_t i = 0; i < t; ++i) proj.push_back(detail::project(x.row(i), lw, cfg, static_cast<Position>(i)));

        for (std::size_t h = 0; h < cfg.heads; ++h) {
            HeadKV& hk = res.cache.head(l, h);
            QuerySet& qs = res.queries.at(l, h);
            qs.rows = Mat(0, dh);
            for (std::size_t i = 0; i < t; ++i) {
                auto off = static_cast<std::ptrdiff_t>(h * dh);
                std::span<const float> k(proj[i].k.data() + off, dh);
                std::span<const float> v(proj[i].v.data() + off, dh);
                hk.append(k, v, static_cast<Position>(i));
                qs.rows.append_row(std::span<const float>(proj[i].q.data() + off, dh));
                qs.positions.push_back(static_cast<Position>(i));
            }
        }

        Mat attn_out(t, d);
        std::vector<float> probs;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const HeadKV& hk = res.cache.head(l, h);
            const QuerySet& qs = res.queries.at(l, h);
            for (std::size_t i = 0; i < t; ++i) {
                probs.assign(i + 1, 0.0f);
                for (std::size_t j = 0; j <= i; ++j) probs[j] = dot(qs.rows.row(i), hk.keys.row(j)) * scale;
                softmax_inplace(probs);
                auto out = attn_out.row(i).subspan(h * dh, dh);
                for (std::size_t j = 0; j <= i; ++j) {
                    auto v = hk.values.row(j);
                    for (std::size_t c = 0; c < dh; ++c) out[c] += probs[j] * v[c];
                }
                if (res.attention) {
                    auto dst = res.attention->at(l, h).row(i);
                    std::copy(probs.begin(), probs.end(), dst.begin());
                }
            }
        }
        for (std::size_t i = 0; i < t; ++i) {
            auto o = detail::vec_mat(attn_out.row(i), lw.wo);
            auto xi = x.row(i);
            for (std::size_t j = 0; j < d; ++j) xi[j] += o[j];
            detail::mlp_residual(xi, lw);
        }
    }

    auto last = x.row(t - 1);
    res.last_hidden.assign(last.begin(), last.end());
    res.logits = detail::output_logits(last, model);
    res.next_token = detail::argmax_token(res.logits);
    return res;
}

struct StepOutput {
    TokenId next_token = 0;
    Position position = 0;
    Grid<std::vector<float>> queries;           // per layer/head, head_dim each
    StepKV new_kv;
    std::vector<float> logits;
    std::optional<Grid<std::vector<float>>> attention_logits;  // scaled q.k over view rows, then self
};

struct StepOptions {
    bool capture_attention_logits = false;
};

inline StepOutput decode_step(const Model& model, const CacheView& view, TokenId token, Position position,
                              StepOptions opts = {}) {
    const ModelConfig& cfg = model.config();
    if (position < 0 || static_cast<std::size_t>(position) >= cfg.max_pos) {
        throw std::invalid_argument("decode_step: position " + std::to_string(position) + " outside max_pos");
    }
    if (token >= cfg.vocab) throw std::invalid_argument("decode_step: token id out of vocabulary");
    if (view.layers() == 0 || view.heads() == 0) throw std::invalid_argument("decode_step: empty cache view");
    if (view.layers() != cfg.layers || view.heads() != cfg.heads || view.head_dim() != cfg.head_dim) {
        throw std::invalid_argument("decode_step: cache geometry does not match model");
    }
    for (std::size_t l = 0; l < cfg.layers; ++l)
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const HeadView& hv = view.head(l, h);
            if (hv.size() == 0) throw std::invalid_argument("decode_step: empty cache view");
            for (std::size_t r = 1; r < hv.size(); ++r)
                if (hv.position(r) <= hv.position(r - 1))
                    throw std::invalid_argument("decode_step: cache positions not strictly increasing");
            if (hv.position(hv.size() - 1) >= position)
                throw std::invalid_argument("decode_step: position not after cached positions");
        }

    const std::size_t d = cfg.dim();
    const std::size_t dh = cfg.head_dim;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    StepOutput out;
    out.position = position;
    out.queries = Grid<std::vector<float>>(cfg.layers, cfg.heads);
    out.new_kv = StepKV{Grid<std::vector<float>>(cfg.layers, cfg.heads), Grid<std::vector<float>>(cfg.layers, cfg.heads),
                        position};
    if (opts.capture_attention_logits) out.attention_logits = Grid<std::vector<float>>(cfg.layers, cfg.heads);

    auto emb = model.weights().embedding.row(token);
    std::vector<float> x(emb.begin(), emb.end());
    std::vector<float> logits;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const LayerWeights& lw = model.weights().layers[l];
        auto p = detail::project(x, lw, cfg, position);
        std::vector<float> attn_out(d, 0.0f);
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const HeadView& hv = view.head(l, h);
            const auto off = static_cast<std::ptrdiff_t>(h * dh);
            std::span<const float> q(p.q.data() + off, dh);
            std::span<const float> k(p.k.data() + off, dh);
            std::span<const float> v(p.v.data() + off, dh);
            out.queries.at(l, h).assign(q.begin(), q.end());
            out.new_kv.keys.at(l, h).assign(k.begin(), k.end());
            out.new_kv.values.at(l, h).assign(v.begin(), v.end());

            const std::size_t n = hv.size();
            logits.assign(n + 1, 0.0f);
            for (std::size_t r = 0; r < n; ++r) logits[r] = dot(q, hv.key(r)) * scale;
            logits[n] = dot(q, k) * scale;
            if (out.attention_logits) out.attention_logits->at(l, h) = logits;
            softmax_inplace(logits);
            auto dst = std::span<float>(attn_out).subspan(h * dh, dh);
            for (std::size_t r = 0; r <= n; ++r) {
                auto vr = r < n ? hv.value(r) : v;
                for (std::size_t c = 0; c < dh; ++c) dst[c] += logits[r] * vr[c];
            }
        }
        auto o = detail::vec_mat(attn_out, lw.wo);
        for (std::size_t j = 0; j < d; ++j) x[j] += o[j];
        detail::mlp_residual(x, lw);
    }
    out.logits = detail::output_logits(x, model);
    out.next_token = detail::argmax_token(out.logits);
    return out;
}

// Greedy continuation against a read-only context. New keys/values go to a
// scratch store that the caller may drop; the context is never modified.
struct Continuation {
    std::vector<TokenId> tokens;  // tokens fed, one per step
    QCache queries;               // their captured queries
    TokenId next_token = 0;       // produced by the last step
    KVCacheStore scratch;
};

inline Continuation decode_greedy(const Model& model, const CacheView& context, TokenId first, Position start,
                                  std::size_t steps) {
    const ModelConfig& cfg = model.config();
    Continuation c;
    c.scratch = KVCacheStore(cfg.layers, cfg.heads, cfg.head_dim);
    c.queries.queries = Grid<Mat>(cfg.layers, cfg.heads, Mat(0, cfg.head_dim));
    TokenId tok = first;
    for (std::size_t s = 0; s < steps; ++s) {
        const Position pos = start + static_cast<Position>(s);
        StepOutput o = decode_step(model, context.with_extension(c.scratch), tok, pos);
        c.tokens.push_back(tok);
        c.queries.step_positions.push_back(pos);
        for (std::size_t l = 0; l < cfg.layers; ++l)
            for (std::size_t h = 0; h < cfg.heads; ++h) c.queries.queries.at(l, h).append_row(o.queries.at(l, h));
        c.scratch.append_step(o.new_kv);
        tok = o.next_token;
    }
    c.next_token = tok;
    return c;
}

// Greedy decoding that grows `cache` in place (final decode after eviction).
inline std::vector<TokenId> decode_in_place(const Model& model, KVCacheStore& cache, TokenId first, Position start,
                                            std::size_t steps) {
    std::vector<TokenId> fed;
    TokenId tok = first;
    for (std::size_t s = 0; s < steps; ++s) {
        const Position pos = start + static_cast<Position>(s);
        StepOutput o = decode_step(model, CacheView::full(cache), tok, pos);
        fed.push_back(tok);
        cache.append_step(o.new_kv);
        tok = o.next_token;
    }
    return fed;
}

} // namespace laq
