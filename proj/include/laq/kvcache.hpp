#pragma once

// Key/value storage, query records and budgeted selection views.
//
// A CacheView never copies key or value rows: it holds a pointer to the
// backing store plus an index list per head. The store must outlive every
// view built on it. materialize() is the only path that copies rows, and it
// reports every copied element to kv_elements_copied().

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "laq/grid.hpp"
#include "laq/tensor.hpp"

namespace laq {

using Position = std::int64_t;

namespace detail {
inline std::atomic<std::uint64_t>& kv_copy_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}
} // namespace detail

// Number of key/value floats copied out of a store since process start.
inline std::uint64_t kv_elements_copied() { return detail::kv_copy_counter().load(); }

inline bool strictly_increasing(std::span<const Position> p) {
    return std::adjacent_find(p.begin(), p.end(), [](Position a, Position b) { return a >= b; }) == p.end();
}

// Query rows together with the absolute positions of the tokens that
// produced them.
struct QuerySet {
    Mat rows;
    std::vector<Position> positions;

    std::size_t size() const { return rows.rows(); }
    bool empty() const { return rows.rows() == 0; }

    void check() const {
        if (positions.size() != rows.rows()) {
            throw std::invalid_argument("QuerySet: " + std::to_string(rows.rows()) + " rows but " +
                                        std::to_string(positions.size()) + " positions");
        }
    }

    // Rows [first, first + count).
    QuerySet slice(std::size_t first, std::size_t count) const {
        return {rows.slice_rows(first, count),
                std::vector<Position>(positions.begin() + static_cast<std::ptrdiff_t>(first),
                                      positions.begin() + static_cast<std::ptrdiff_t>(first + count))};
    }

    QuerySet last(std::size_t count) const {
        count = std::min(count, size());
        return slice(size() - count, count);
    }

    bool operator==(const QuerySet&) const = default;
};

// Keys, values and original absolute positions of one attention head.
struct HeadKV {
    Mat keys;
    Mat values;
    std::vector<Position> positions;

    explicit HeadKV(std::size_t head_dim = 0) : keys(0, head_dim), values(0, head_dim) {}

    std::size_t size() const { return positions.size(); }
    std::size_t head_dim() const { return keys.cols(); }

    void append(std::span<const float> key, std::span<const float> value, Position pos) {
        if (!positions.empty() && pos <= positions.back()) {
            throw std::invalid_argument("HeadKV::append: position " + std::to_string(pos) +
                                        " not after " + std::to_string(positions.back()));
        }
        keys.append_row(key);
        values.append_row(value);
        positions.push_back(pos);
    }

    void check() const {
        if (keys.rows() != positions.size() || values.rows() != positions.size()) {
            throw std::invalid_argument("HeadKV: keys/values/positions lengths disagree");
        }
        if (keys.cols() != values.cols()) throw std::invalid_argument("HeadKV: key/value widths disagree");
        if (!strictly_increasing(positions)) throw std::invalid_argument("HeadKV: positions not strictly increasing");
    }

    bool operator==(const HeadKV&) const = default;
};

// One new key/value row per layer/head, produced by a single decode step.
struct StepKV {
    Grid<std::vector<float>> keys;
    Grid<std::vector<float>> values;
    Position position = 0;
};

class KVCacheStore {
public:
    KVCacheStore() = default;
    KVCacheStore(std::size_t layers, std::size_t heads, std::size_t head_dim)
        : heads_(layers, heads, HeadKV(head_dim)), head_dim_(head_dim) {}

    std::size_t layers() const { return heads_.layers(); }
    std::size_t heads() const { return heads_.heads(); }
    std::size_t head_dim() const { return head_dim_; }

    HeadKV& head(std::size_t layer, std::size_t h) { return heads_.at(layer, h); }
    const HeadKV& head(std::size_t layer, std::size_t h) const { return heads_.at(layer, h); }
    const Grid<HeadKV>& grid() const { return heads_; }

    // Entries held by one head. Heads may differ after a per-layer eviction.
    std::size_t length(std::size_t layer = 0, std::size_t h = 0) const { return heads_.at(layer, h).size(); }

    void append_step(const StepKV& step) {
        if (!step.keys.same_shape(layers(), heads()) || !step.values.same_shape(layers(), heads())) {
            throw std::invalid_argument("append_step: step geometry does not match cache");
        }
        for (const HeadKV& hk : heads_) {
            if (!hk.positions.empty() && step.position <= hk.positions.back()) {
                throw std::invalid_argument("append_step: position " + std::to_string(step.position) +
                                            " is not after last cached position " +
                                            std::to_string(hk.positions.back()));
            }
        }
        for (std::size_t l = 0; l < layers(); ++l)
            for (std::size_t h = 0; h < heads(); ++h)
                heads_.at(l, h).append(step.keys.at(l, h), step.values.at(l, h), step.position);
    }

    void check() const {
        for (const HeadKV& hk : heads_) {
            hk.check();
            if (hk.head_dim() != head_dim_) throw std::invalid_argument("KVCacheStore: head_dim mismatch");
        }
    }

    bool operator==(const KVCacheStore&) const = default;

private:
    Grid<HeadKV> heads_;
    std::size_t head_dim_ = 0;
};

// Retained index sets (ascending, into the prefill cache) per layer/head.
struct Selection {
    Grid<IndexList> indices;
    std::vector<std::size_t> budgets;  // per layer

    std::size_t layers() const { return indices.layers(); }
    std::size_t heads() const { return indices.heads(); }
    const IndexList& at(std::size_t layer, std::size_t h) const { return indices.at(layer, h); }

    bool operator==(const Selection&) const = default;
};

// Every index of a T-entry cache, for all heads.
inline Selection select_all(std::size_t layers, std::size_t heads, std::size_t length) {
    IndexList all(length);
    for (std::size_t i = 0; i < length; ++i) all[i] = i;
    return {Grid<IndexList>(layers, heads, all), std::vector<std::size_t>(layers, length)};
}

// Read-only window onto one head: selected rows of a base head, optionally
// followed by every row of an extension head.
class HeadView {
public:
    HeadView() = default;
    HeadView(const HeadKV* base, std::shared_ptr<const IndexList> rows, const HeadKV* extension = nullptr)
        : base_(base), rows_(std::move(rows)), extension_(extension) {}

    std::size_t base_size() const { return rows_ ? rows_->size() : (base_ ? base_->size() : 0); }
    std::size_t size() const { return base_size() + (extension_ ? extension_->size() : 0); }
    std::size_t head_dim() const { return base_ ? base_->head_dim() : 0; }

    std::span<const float> key(std::size_t r) const {
        auto [h, i] = locate(r);
        return h->keys.row(i);
    }
    std::span<const float> value(std::size_t r) const {
        auto [h, i] = locate(r);
        return h->values.row(i);
    }
    Position position(std::size_t r) const {
        auto [h, i] = locate(r);
        return h->positions[i];
    }
    // Row index into the base head for r < base_size().
    std::size_t base_index(std::size_t r) const { return rows_ ? (*rows_)[r] : r; }

    const HeadKV* base() const { return base_; }
    const HeadKV* extension() const { return extension_; }
    const std::shared_ptr<const IndexList>& row_list() const { return rows_; }

private:
    std::pair<const HeadKV*, std::size_t> locate(std::size_t r) const {
        const std::size_t nb = base_size();
        if (r < nb) return {base_, base_index(r)};
        return {extension_, r - nb};
    }

    const HeadKV* base_ = nullptr;
    std::shared_ptr<const IndexList> rows_;  // null = all rows
    const HeadKV* extension_ = nullptr;
};

class CacheView {
public:
    CacheView() = default;

    static CacheView full(const KVCacheStore& store) {
        CacheView v;
        v.heads_ = Grid<HeadView>(store.layers(), store.heads());
        for (std::size_t l = 0; l < store.layers(); ++l)
            for (std::size_t h = 0; h < store.heads(); ++h) v.heads_.at(l, h) = HeadView(&store.head(l, h), nullptr);
        v.head_dim_ = store.head_dim();
        return v;
    }

    std::size_t layers() const { return heads_.layers(); }
    std::size_t heads() const { return heads_.heads(); }
    std::size_t head_dim() const { return head_dim_; }
    const HeadView& head(std::size_t layer, std::size_t h) const { return heads_.at(layer, h); }
    std::size_t length(std::size_t layer = 0, std::size_t h = 0) const { return heads_.at(layer, h).size(); }

    bool has_extension() const {
        return heads_.size() > 0 && heads_.at(0, 0).extension() != nullptr;
    }

    // The same selection followed by every row of `ext` (scratch decode growth).
    CacheView with_extension(const KVCacheStore& ext) const {
        if (!ext.grid().same_shape(heads_)) throw std::invalid_argument("with_extension: geometry mismatch");
        CacheView v = *this;
        for (std::size_t l = 0; l < layers(); ++l)
            for (std::size_t h = 0; h < heads(); ++h) {
                const HeadView& hv = heads_.at(l, h);
                v.heads_.at(l, h) = HeadView(hv.base(), hv.row_list(), &ext.head(l, h));
            }
        return v;
    }

    std::vector<Position> positions(std::size_t layer, std::size_t h) const {
        const HeadView& hv = heads_.at(layer, h);
        std::vector<Position> out(hv.size());
        for (std::size_t r = 0; r < hv.size(); ++r) out[r] = hv.position(r);
        return out;
    }

    // Copy the visible rows into a standalone store (destructive-eviction mode).
    KVCacheStore materialize() const {
        KVCacheStore out(layers(), heads(), head_dim_);
        std::uint64_t copied = 0;
        for (std::size_t l = 0; l < layers(); ++l)
            for (std::size_t h = 0; h < heads(); ++h) {
                const HeadView& hv = heads_.at(l, h);
                HeadKV& dst = out.head(l, h);
                for (std::size_t r = 0; r < hv.size(); ++r) {
                    dst.append(hv.key(r), hv.value(r), hv.position(r));
                    copied += 2 * head_dim_;
                }
            }
        detail::kv_copy_counter() += copied;
        return out;
    }

private:
    friend CacheView apply_selection(const CacheView& view, const Selection& sel);

    Grid<HeadView> heads_;
    std::size_t head_dim_ = 0;
};

namespace detail {
inline void check_selection_rows(const IndexList& rows, std::size_t limit, std::size_t layer, std::size_t h) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= limit) {
            throw std::out_of_range("apply_selection: index " + std::to_string(rows[i]) + " >= " +
                                    std::to_string(limit) + " at layer " + std::to_string(layer) + " head " +
                                    std::to_string(h));
        }
        if (i > 0 && rows[i] <= rows[i - 1]) {
            throw std::invalid_argument("apply_selection: indices not strictly ascending at layer " +
                                        std::to_string(layer) + " head " + std::to_string(h));
        }
    }
}
} // namespace detail

// Compose a selection over an existing view. Indices refer to the view's rows.
inline CacheView apply_selection(const CacheView& view, const Selection& sel) {
    if (view.has_extension()) throw std::invalid_argument("apply_selection: cannot select from an extended view");
    if (!sel.indices.same_shape(view.layers(), view.heads())) {
        throw std::invalid_argument("apply_selection: selection geometry does not match cache");
    }
    CacheView out = view;
    for (std::size_t l = 0; l < view.layers(); ++l)
        for (std::size_t h = 0; h < view.heads(); ++h) {
            const HeadView& hv = view.heads_.at(l, h);
            const IndexList& pick = sel.at(l, h);
            detail::check_selection_rows(pick, hv.size(), l, h);
            auto rows = std::make_shared<IndexList>(pick.size());
            for (std::size_t i = 0; i < pick.size(); ++i) (*rows)[i] = hv.base_index(pick[i]);
            out.heads_.at(l, h) = HeadView(hv.base(), std::move(rows));
        }
    return out;
}

inline CacheView apply_selection(const KVCacheStore& cache, const Selection& sel) {
    return apply_selection(CacheView::full(cache), sel);
}

// Query vectors captured during lookahead decoding.
struct QCache {
    Grid<Mat> queries;                 // per layer/head: steps x head_dim
    std::vector<Position> step_positions;

    std::size_t steps() const { return step_positions.size(); }

    QuerySet head(std::size_t layer, std::size_t h) const { return {queries.at(layer, h), step_positions}; }

    // First `count` steps only.
    QCache prefix(std::size_t count) const {
        if (count > steps()) throw std::out_of_range("QCache::prefix: only " + std::to_string(steps()) + " steps");
        QCache out{Grid<Mat>(queries.layers(), queries.heads()),
                   std::vector<Position>(step_positions.begin(),
                                         step_positions.begin() + static_cast<std::ptrdiff_t>(count))};
        for (std::size_t l = 0; l < queries.layers(); ++l)
            for (std::size_t h = 0; h < queries.heads(); ++h) out.queries.at(l, h) = queries.at(l, h).slice_rows(0, count);
        return out;
    }

    bool operator==(const QCache&) const = default;
};

enum class WindowSource { input, response };

// A contiguous run of rows from the input or response query record.
struct WindowSpec {
    std::size_t start = 0;
    std::size_t length = 0;
    WindowSource source = WindowSource::input;
};

inline QuerySet take_window(const QuerySet& record, const WindowSpec& w) {
    if (w.start + w.length > record.size()) {
        throw std::out_of_range("take_window: window [" + std::to_string(w.start) + ", " +
                                std::to_string(w.start + w.length) + ") exceeds record of " +
                                std::to_string(record.size()));
    }
    return record.slice(w.start, w.length);
}

// Window rows followed by lookahead rows.
inline QuerySet union_windows(const QuerySet& window, const QuerySet& lookahead) {
    window.check();
    lookahead.check();
    if (window.empty()) return lookahead;
    if (lookahead.empty()) return window;
    if (window.rows.cols() != lookahead.rows.cols()) {
        throw std::invalid_argument("union_windows: head_dim " + std::to_string(window.rows.cols()) + " vs " +
                                    std::to_string(lookahead.rows.cols()));
    }
    QuerySet out = window;
    for (std::size_t r = 0; r < lookahead.size(); ++r) {
        out.rows.append_row(lookahead.rows.row(r));
        out.positions.push_back(lookahead.positions[r]);
    }
    return out;
}

inline Grid<QuerySet> union_windows(const Grid<QuerySet>& window, const QCache& q) {
    if (!q.queries.same_shape(window)) throw std::invalid_argument("union_windows: layer/head geometry mismatch");
    Grid<QuerySet> out(window.layers(), window.heads());
    for (std::size_t l = 0; l < window.layers(); ++l)
        for (std::size_t h = 0; h < window.heads(); ++h) out.at(l, h) = union_windows(window.at(l, h), q.head(l, h));
    return out;
}

} // namespace laq
