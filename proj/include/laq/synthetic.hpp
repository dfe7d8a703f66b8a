#pragma once

// Synthetic traces with a controlled gap between what the prompt queries
// attend to and what the response queries attend to.
//
// Per head, the head_dim axes are split into
//   [0, G)         one direction per needle group
//   G              the distractor direction
//   (G, head_dim)  bounded noise
// Keys: distractors sit at positions [0, needle_count) along the distractor
// axis; needles sit at random later positions, needle i on the axis of
// group i mod G; every other key is pure noise.
// Queries: prompt queries point at the distractor axis, response queries at
// all group axes at once, and lookahead (pseudo-response) step s at group
// s mod G with a weaker pull `lookahead_mix` toward the distractor axis.
// Structure and noise are orthogonal, so with dominant dot product z and
// noise bound eps = (head_dim - G - 1) * noise^2 every dominant scaled logit
// beats every non-dominant one by at least divergence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "laq/grid.hpp"
#include "laq/rng.hpp"
#include "laq/trace.hpp"

namespace laq {

struct SyntheticParams {
    std::uint32_t layers = 2;
    std::uint32_t heads = 4;
    std::uint32_t head_dim = 16;
    std::uint32_t t_input = 512;
    std::uint32_t t_response = 32;
    std::uint32_t t_lookahead = 8;
    std::uint32_t vocab = 256;
    std::uint32_t needle_count = 8;
    std::uint32_t needle_groups = 8;
    float divergence = 6.0f;
    float lookahead_mix = 0.1f;
    float noise = 0.05f;
    std::uint64_t seed = 0;

    std::uint32_t groups() const { return std::min(needle_groups, needle_count); }
};

struct SyntheticTrace {
    TraceBundle bundle;
    Grid<IndexList> needles;      // ascending positions per head
    Grid<IndexList> distractors;
};

inline SyntheticTrace gen_synthetic_trace(const SyntheticParams& p) {
    if (p.layers == 0 || p.heads == 0 || p.t_input == 0 || p.vocab == 0) {
        throw std::invalid_argument("gen_synthetic_trace: sizes must be >= 1");
    }
    if (p.needle_count == 0 || p.needle_groups == 0) {
        throw std::invalid_argument("gen_synthetic_trace: needle_count and needle_groups must be >= 1");
    }
    if (2ull * p.needle_count > p.t_input) {
        throw std::invalid_argument("gen_synthetic_trace: " + std::to_string(p.needle_count) + " needles + " +
                                    std::to_string(p.needle_count) + " distractors exceed t_input " +
                                    std::to_string(p.t_input));
    }
    const std::uint32_t g = p.groups();
    if (p.head_dim < g + 2) {
        throw std::invalid_argument("gen_synthetic_trace: head_dim " + std::to_string(p.head_dim) + " < groups + 2");
    }
    if (!(p.divergence > 0.0f) || p.noise < 0.0f || p.lookahead_mix < 0.0f || p.lookahead_mix >= 1.0f) {
        throw std::invalid_argument("gen_synthetic_trace: need divergence > 0, noise >= 0, 0 <= lookahead_mix < 1");
    }

    const std::uint32_t d = p.head_dim;
    const std::uint32_t axis_distractor = g;
    const float eps = static_cast<float>(d - g - 1) * p.noise * p.noise;
    const float z = p.divergence * std::sqrt(static_cast<float>(d)) + 2.0f * eps;
    const float amp = std::sqrt(z);

    SyntheticTrace out;
    TraceBundle& b = out.bundle;
    b.meta = {p.layers, p.heads, d, p.t_input, p.t_response, p.t_lookahead, p.vocab,
              "synthetic divergence trace seed=" + std::to_string(p.seed) +
                  " needles=" + std::to_string(p.needle_count) + " divergence=" + std::to_string(p.divergence)};
    b.input_queries = Grid<Mat>(p.layers, p.heads);
    b.response_queries = Grid<Mat>(p.layers, p.heads);
    b.lookahead_queries = Grid<Mat>(p.layers, p.heads);
    b.keys = Grid<Mat>(p.layers, p.heads);
    b.values = Grid<Mat>(p.layers, p.heads);
    out.needles = Grid<IndexList>(p.layers, p.heads);
    out.distractors = Grid<IndexList>(p.layers, p.heads);

    SplitMix64 tok_rng(derive_seed(p.seed, 0xA11CE));
    for (std::uint32_t i = 0; i < p.t_input; ++i) b.input_tokens.push_back(static_cast<std::uint32_t>(tok_rng.below(p.vocab)));
    for (std::uint32_t i = 0; i < p.t_response; ++i)
        b.response_tokens.push_back(static_cast<std::uint32_t>(tok_rng.below(p.vocab)));

    for (std::uint32_t l = 0; l < p.layers; ++l)
        for (std::uint32_t h = 0; h < p.heads; ++h) {
            SplitMix64 rng(derive_seed(p.seed, 1 + l * 4096ull + h));
            auto noisy_row = [&](Mat& m, std::size_t r) {
                auto row = m.row(r);
                for (std::uint32_t c = g + 1; c < d; ++c) row[c] = rng.symmetric(p.noise);
            };

            // Needle positions: distinct draws from [needle_count, t_input).
            std::vector<std::uint32_t> needle_pos;
            std::vector<bool> taken(p.t_input, false);
            while (needle_pos.size() < p.needle_count) {
                auto pos = static_cast<std::uint32_t>(p.needle_count + rng.below(p.t_input - p.needle_count));
                if (taken[pos]) continue;
                taken[pos] = true;
                needle_pos.push_back(pos);
            }

            Mat& keys = b.keys.at(l, h);
            keys = Mat(p.t_input, d);
            for (std::uint32_t i = 0; i < p.t_input; ++i) noisy_row(keys, i);
            for (std::uint32_t i = 0; i < p.needle_count; ++i) {
                keys(i, axis_distractor) = amp;
                out.distractors.at(l, h).push_back(i);
            }
            for (std::uint32_t i = 0; i < p.needle_count; ++i) keys(needle_pos[i], i % g) = amp;
            IndexList& nl = out.needles.at(l, h);
            nl.assign(needle_pos.begin(), needle_pos.end());
            std::sort(nl.begin(), nl.end());

            Mat& values = b.values.at(l, h);
            values = Mat(p.t_input, d);
            for (float& v : values.data()) v = rng.symmetric(1.0f);

            Mat& iq = b.input_queries.at(l, h);
            iq = Mat(p.t_input, d);
            for (std::uint32_t i = 0; i < p.t_input; ++i) {
                noisy_row(iq, i);
                iq(i, axis_distractor) = amp;
            }

            Mat& rq = b.response_queries.at(l, h);
            rq = Mat(p.t_response, d);
            for (std::uint32_t s = 0; s < p.t_response; ++s) {
                noisy_row(rq, s);
                for (std::uint32_t c = 0; c < g; ++c) rq(s, c) = amp;
            }

            Mat& lq = b.lookahead_queries.at(l, h);
            lq = Mat(p.t_lookahead, d);
            for (std::uint32_t s = 0; s < p.t_lookahead; ++s) {
                noisy_row(lq, s);
                lq(s, s % g) = amp;
                lq(s, axis_distractor) = p.lookahead_mix * amp;
            }
        }
    validate_trace(b);
    return out;
}

} // namespace laq
