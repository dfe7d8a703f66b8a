#pragma once

// TraceBundle and the KVTR binary trace format.
//
// All integers little-endian, all tensors IEEE-754 binary32 little-endian,
// row-major.
//
//   header
//     char[4]  magic "KVTR"
//     u16      version (1)
//     u32      layers, heads, head_dim, t_input, t_response, t_lookahead, vocab
//     u32      section_count
//     u32      provenance byte length, then that many UTF-8 bytes
//     u64      payload byte length
//   payload    section_count sections, each:
//     u16      name byte length, then the name
//     u8       dtype (0 = f32, 1 = u32)
//     u8       rank
//     u32      dims[rank]
//     4 * prod(dims) bytes of data
//   trailer
//     u64      FNV-1a 64 of the payload bytes
//
// Sections: "input_tokens" [t_input] u32, "response_tokens" [t_response]
// u32, then for every layer l and head h, in that order,
// "input_queries.l.h" [t_input, head_dim], "response_queries.l.h"
// [t_response, head_dim], "lookahead_queries.l.h" [t_lookahead, head_dim]
// (omitted when t_lookahead = 0), "keys.l.h" and "values.l.h"
// [t_input, head_dim]. Readers ignore unknown section names.
//
// Input rows sit at absolute positions 0..t_input-1. Response and lookahead
// rows are two alternative continuations and both start at t_input.

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "laq/grid.hpp"
#include "laq/kvcache.hpp"
#include "laq/metrics.hpp"
#include "laq/tensor.hpp"

namespace laq {

struct TraceMeta {
    std::uint32_t layers = 0;
    std::uint32_t heads = 0;
    std::uint32_t head_dim = 0;
    std::uint32_t t_input = 0;
    std::uint32_t t_response = 0;
    std::uint32_t t_lookahead = 0;
    std::uint32_t vocab = 0;
    std::string provenance;

    bool operator==(const TraceMeta&) const = default;
};

struct TraceBundle {
    TraceMeta meta;
    Grid<Mat> input_queries;
    Grid<Mat> response_queries;
    Grid<Mat> lookahead_queries;  // pseudo-response from a low-budget run; may have 0 rows
    Grid<Mat> keys;
    Grid<Mat> values;
    std::vector<std::uint32_t> input_tokens;
    std::vector<std::uint32_t> response_tokens;

    bool operator==(const TraceBundle&) const = default;
};

enum class TraceErrc { io, bad_magic, unsupported_version, truncated, shape_mismatch, checksum_mismatch, malformed,
                       non_finite };

inline const char* to_string(TraceErrc e) {
    switch (e) {
    case TraceErrc::io: return "io error";
    case TraceErrc::bad_magic: return "bad magic";
    case TraceErrc::unsupported_version: return "unsupported version";
    case TraceErrc::truncated: return "truncation";
    case TraceErrc::shape_mismatch: return "shape mismatch";
    case TraceErrc::checksum_mismatch: return "checksum mismatch";
    case TraceErrc::malformed: return "malformed section";
    case TraceErrc::non_finite: return "non-finite value";
    }
    return "unknown";
}

class TraceError : public std::runtime_error {
public:
    TraceError(TraceErrc code, const std::string& detail)
        : std::runtime_error(std::string("trace: ") + to_string(code) + ": " + detail), code_(code) {}
    TraceErrc code() const { return code_; }

private:
    TraceErrc code_;
};

inline constexpr std::uint16_t kTraceVersion = 1;

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Structural check shared by the writer and the reader.
inline void validate_trace(const TraceBundle& b) {
    const TraceMeta& m = b.meta;
    auto check_grid = [&](const Grid<Mat>& g, std::uint32_t rows, const char* what) {
        if (!g.same_shape(m.layers, m.heads)) {
            throw TraceError(TraceErrc::shape_mismatch, std::string(what) + ": layer/head grid disagrees with header");
        }
        for (const Mat& x : g) {
            if (x.rows() != rows || x.cols() != m.head_dim) {
                throw TraceError(TraceErrc::shape_mismatch,
                                 std::string(what) + ": " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                                     " != " + std::to_string(rows) + "x" + std::to_string(m.head_dim));
            }
            if (!x.all_finite()) throw TraceError(TraceErrc::non_finite, what);
        }
    };
    check_grid(b.input_queries, m.t_input, "input_queries");
    check_grid(b.response_queries, m.t_response, "response_queries");
    check_grid(b.lookahead_queries, m.t_lookahead, "lookahead_queries");
    check_grid(b.keys, m.t_input, "keys");
    check_grid(b.values, m.t_input, "values");
    if (b.input_tokens.size() != m.t_input || b.response_tokens.size() != m.t_response) {
        throw TraceError(TraceErrc::shape_mismatch, "token lists disagree with header");
    }
}

namespace detail {

class ByteWriter {
public:
    std::vector<std::uint8_t> bytes;

    void u8(std::uint8_t v) { bytes.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void str(std::string_view s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

    std::uint8_t u8() { return need(1)[0]; }
    std::uint16_t u16() { return static_cast<std::uint16_t>(le(need(2), 2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(need(4), 4)); }
    std::uint64_t u64() { return le(need(8), 8); }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(std::size_t n) {
        const std::uint8_t* p = need(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }

private:
    const std::uint8_t* need(std::size_t n) {
        if (remaining() < n) {
            throw TraceError(TraceErrc::truncated, "need " + std::to_string(n) + " bytes at offset " +
                                                       std::to_string(pos_) + ", have " + std::to_string(remaining()));
        }
        const std::uint8_t* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }
    static std::uint64_t le(const std::uint8_t* p, int n) {
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        return v;
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

inline std::string section_name(const char* kind, std::size_t l, std::size_t h) {
    return std::string(kind) + "." + std::to_string(l) + "." + std::to_string(h);
}

inline void put_tensor(ByteWriter& w, const std::string& name, const Mat& m) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
    w.u8(0);
    w.u8(2);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (float v : m.data()) w.f32(v);
}

inline void put_tokens(ByteWriter& w, const std::string& name, const std::vector<std::uint32_t>& t) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.str(name);
    w.u8(1);
    w.u8(1);
    w.u32(static_cast<std::uint32_t>(t.size()));
    for (std::uint32_t v : t) w.u32(v);
}

struct RawSection {
    std::uint8_t dtype = 0;
    std::vector<std::uint32_t> dims;
    std::vector<std::uint32_t> words;
};

} // namespace detail

inline std::vector<std::uint8_t> encode_trace(const TraceBundle& b) {
    validate_trace(b);
    const TraceMeta& m = b.meta;
    detail::ByteWriter payload;
    std::uint32_t sections = 2;
    detail::put_tokens(payload, "input_tokens", b.input_tokens);
    detail::put_tokens(payload, "response_tokens", b.response_tokens);
    for (std::size_t l = 0; l < m.layers; ++l)
        for (std::size_t h = 0; h < m.heads; ++h) {
            detail::put_tensor(payload, detail::section_name("input_queries", l, h), b.input_queries.at(l, h));
            detail::put_tensor(payload, detail::section_name("response_queries", l, h), b.response_queries.at(l, h));
            sections += 2;
            if (m.t_lookahead > 0) {
                detail::put_tensor(payload, detail::section_name("lookahead_queries", l, h),
                                   b.lookahead_queries.at(l, h));
                ++sections;
            }
            detail::put_tensor(payload, detail::section_name("keys", l, h), b.keys.at(l, h));
            detail::put_tensor(payload, detail::section_name("values", l, h), b.values.at(l, h));
            sections += 2;
        }

    detail::ByteWriter out;
    out.str("KVTR");
    out.u16(kTraceVersion);
    for (std::uint32_t v : {m.layers, m.heads, m.head_dim, m.t_input, m.t_response, m.t_lookahead, m.vocab, sections})
        out.u32(v);
    out.u32(static_cast<std::uint32_t>(m.provenance.size()));
    out.str(m.provenance);
    out.u64(payload.bytes.size());
    out.bytes.insert(out.bytes.end(), payload.bytes.begin(), payload.bytes.end());
    out.u64(fnv1a64(payload.bytes));
    return out.bytes;
}

inline TraceBundle decode_trace(std::span<const std::uint8_t> data) {
    detail::ByteReader r(data);
    if (data.size() < 4 || std::memcmp(data.data(), "KVTR", 4) != 0) {
        throw TraceError(TraceErrc::bad_magic, "file does not start with KVTR");
    }
    r.str(4);
    const std::uint16_t version = r.u16();
    if (version != kTraceVersion) {
        throw TraceError(TraceErrc::unsupported_version, "version " + std::to_string(version));
    }
    TraceBundle b;
    TraceMeta& m = b.meta;
    m.layers = r.u32();
    m.heads = r.u32();
    m.head_dim = r.u32();
    m.t_input = r.u32();
    m.t_response = r.u32();
    m.t_lookahead = r.u32();
    m.vocab = r.u32();
    const std::uint32_t section_count = r.u32();
    m.provenance = r.str(r.u32());
    const std::uint64_t payload_len = r.u64();
    if (r.remaining() < 8 || r.remaining() - 8 != payload_len) {
        throw TraceError(TraceErrc::truncated, "header declares " + std::to_string(payload_len) +
                                                   " payload bytes, file holds " +
                                                   std::to_string(r.remaining() < 8 ? 0 : r.remaining() - 8));
    }
    const auto payload = data.subspan(r.offset(), payload_len);
    {
        detail::ByteReader tail(data.subspan(r.offset() + payload_len));
        if (tail.u64() != fnv1a64(payload)) throw TraceError(TraceErrc::checksum_mismatch, "payload checksum");
    }

    std::map<std::string, detail::RawSection> sections;
    detail::ByteReader pr(payload);
    for (std::uint32_t s = 0; s < section_count; ++s) {
        std::string name = pr.str(pr.u16());
        detail::RawSection sec;
        sec.dtype = pr.u8();
        if (sec.dtype > 1) throw TraceError(TraceErrc::malformed, name + ": unknown dtype");
        const std::uint8_t rank = pr.u8();
        std::uint64_t count = 1;
        for (std::uint8_t i = 0; i < rank; ++i) {
            sec.dims.push_back(pr.u32());
            count *= sec.dims.back();
        }
        if (count * 4 > pr.remaining()) {
            throw TraceError(TraceErrc::shape_mismatch, name + ": shape record exceeds payload");
        }
        sec.words.resize(count);
        for (auto& w : sec.words) w = pr.u32();
        if (!sections.emplace(std::move(name), std::move(sec)).second) {
            throw TraceError(TraceErrc::malformed, "duplicate section");
        }
    }
    if (pr.remaining() != 0) throw TraceError(TraceErrc::malformed, "trailing bytes after last section");

    auto take = [&](const std::string& name, std::uint8_t dtype, std::vector<std::uint32_t> dims) -> detail::RawSection& {
        auto it = sections.find(name);
        if (it == sections.end()) throw TraceError(TraceErrc::shape_mismatch, "missing section " + name);
        if (it->second.dtype != dtype) throw TraceError(TraceErrc::malformed, name + ": wrong dtype");
        if (it->second.dims != dims) throw TraceError(TraceErrc::shape_mismatch, name + ": shape disagrees with header");
        return it->second;
    };
    auto take_mat = [&](const char* kind, std::size_t l, std::size_t h, std::uint32_t rows) {
        auto& sec = take(detail::section_name(kind, l, h), 0, {rows, m.head_dim});
        std::vector<float> v(sec.words.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::bit_cast<float>(sec.words[i]);
        return Mat(rows, m.head_dim, std::move(v));
    };

    b.input_tokens = take("input_tokens", 1, {m.t_input}).words;
    b.response_tokens = take("response_tokens", 1, {m.t_response}).words;
    b.input_queries = Grid<Mat>(m.layers, m.heads);
    b.response_queries = Grid<Mat>(m.layers, m.heads);
    b.lookahead_queries = Grid<Mat>(m.layers, m.heads, Mat(0, m.head_dim));
    b.keys = Grid<Mat>(m.layers, m.heads);
    b.values = Grid<Mat>(m.layers, m.heads);
    for (std::size_t l = 0; l < m.layers; ++l)
        for (std::size_t h = 0; h < m.heads; ++h) {
            b.input_queries.at(l, h) = take_mat("input_queries", l, h, m.t_input);
            b.response_queries.at(l, h) = take_mat("response_queries", l, h, m.t_response);
            if (m.t_lookahead > 0) b.lookahead_queries.at(l, h) = take_mat("lookahead_queries", l, h, m.t_lookahead);
            b.keys.at(l, h) = take_mat("keys", l, h, m.t_input);
            b.values.at(l, h) = take_mat("values", l, h, m.t_input);
        }
    validate_trace(b);
    return b;
}

inline void write_trace(const TraceBundle& b, const std::string& path) {
    const auto bytes = encode_trace(b);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw TraceError(TraceErrc::io, "cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw TraceError(TraceErrc::io, "write failed for " + path);
}

inline TraceBundle read_trace(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw TraceError(TraceErrc::io, "cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_trace(bytes);
}

// Replay helpers ------------------------------------------------------------

inline KVCacheStore cache_from_trace(const TraceBundle& b) {
    const TraceMeta& m = b.meta;
    KVCacheStore c(m.layers, m.heads, m.head_dim);
    for (std::size_t l = 0; l < m.layers; ++l)
        for (std::size_t h = 0; h < m.heads; ++h) {
            HeadKV& hk = c.head(l, h);
            hk.keys = b.keys.at(l, h);
            hk.values = b.values.at(l, h);
            hk.positions.resize(m.t_input);
            for (std::size_t i = 0; i < m.t_input; ++i) hk.positions[i] = static_cast<Position>(i);
        }
    return c;
}

inline Grid<QuerySet> query_sets(const Grid<Mat>& rows, Position first_position) {
    Grid<QuerySet> out(rows.layers(), rows.heads());
    for (std::size_t l = 0; l < rows.layers(); ++l)
        for (std::size_t h = 0; h < rows.heads(); ++h) {
            QuerySet& q = out.at(l, h);
            q.rows = rows.at(l, h);
            q.positions.resize(q.rows.rows());
            for (std::size_t i = 0; i < q.positions.size(); ++i) q.positions[i] = first_position + static_cast<Position>(i);
        }
    return out;
}

inline Grid<QuerySet> input_query_sets(const TraceBundle& b) { return query_sets(b.input_queries, 0); }
inline Grid<QuerySet> response_query_sets(const TraceBundle& b) {
    return query_sets(b.response_queries, static_cast<Position>(b.meta.t_input));
}
inline Grid<QuerySet> lookahead_query_sets(const TraceBundle& b) {
    return query_sets(b.lookahead_queries, static_cast<Position>(b.meta.t_input));
}

// First `steps` rows of the lookahead (or response) record as a Q-cache.
inline QCache qcache_from_rows(const Grid<Mat>& rows, std::size_t steps, Position first_position) {
    QCache q{Grid<Mat>(rows.layers(), rows.heads()), {}};
    for (std::size_t l = 0; l < rows.layers(); ++l)
        for (std::size_t h = 0; h < rows.heads(); ++h) {
            const Mat& m = rows.at(l, h);
            if (m.rows() < steps) {
                throw std::invalid_argument("qcache_from_rows: record has " + std::to_string(m.rows()) +
                                            " rows, need " + std::to_string(steps));
            }
            q.queries.at(l, h) = m.slice_rows(0, steps);
        }
    for (std::size_t s = 0; s < steps; ++s) q.step_positions.push_back(first_position + static_cast<Position>(s));
    return q;
}

enum class ResponseSource { response, lookahead };

inline SweepCurve window_recall_sweep(const TraceBundle& b, std::size_t window_len, std::size_t budget,
                                      ScoreMode mode, ResponseSource source = ResponseSource::response) {
    QueryRecord rec{input_query_sets(b),
                    source == ResponseSource::response ? response_query_sets(b) : lookahead_query_sets(b)};
    if (rec.response.at(0, 0).empty()) throw std::invalid_argument("window_recall_sweep: trace has no response record");
    KVCacheStore cache = cache_from_trace(b);
    if (source == ResponseSource::response) return window_recall_sweep(rec, cache, window_len, budget, mode);
    const Selection gold = gold_selection(response_query_sets(b), cache, budget, mode);
    return window_recall_sweep(rec, cache, window_len, budget, mode, &gold);
}

} // namespace laq
