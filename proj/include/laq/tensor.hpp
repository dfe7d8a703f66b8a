#pragma once

// Dense float kernels shared by the model, the policies and the metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace laq {

using ScoreVec = std::vector<float>;
using IndexList = std::vector<std::size_t>;

// Row-major matrix of finite floats.
class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
    Mat(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw std::invalid_argument("Mat: data length " + std::to_string(data_.size()) +
                                        " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }
    Mat(std::initializer_list<std::initializer_list<float>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw std::invalid_argument("Mat: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return rows_ == 0; }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<const float> data() const { return data_; }
    std::span<float> data() { return data_; }

    void append_row(std::span<const float> values) {
        if (rows_ == 0 && cols_ == 0) cols_ = values.size();
        if (values.size() != cols_) {
            throw std::invalid_argument("Mat::append_row: width " + std::to_string(values.size()) +
                                        " != " + std::to_string(cols_));
        }
        data_.insert(data_.end(), values.begin(), values.end());
        ++rows_;
    }

    // Rows [first, first + count) as a new matrix.
    Mat slice_rows(std::size_t first, std::size_t count) const {
        if (first + count > rows_) throw std::out_of_range("Mat::slice_rows: range past end");
        return Mat(count, cols_,
                   std::vector<float>(data_.begin() + static_cast<std::ptrdiff_t>(first * cols_),
                                      data_.begin() + static_cast<std::ptrdiff_t>((first + count) * cols_)));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
    }

    bool operator==(const Mat&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// Sequential float dot product. Every scoring path goes through here so that
// independent reimplementations summing in the same order agree bit-for-bit.
inline float dot(std::span<const float> a, std::span<const float> b) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                                    std::to_string(b.rows()) + " differ");
    }
    Mat out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto dst = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const float aik = a(i, k);
            auto src = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
        }
    }
    return out;
}

// a * b^T, i.e. out(i, j) = dot(a.row(i), b.row(j)).
inline Mat matmul_bt(const Mat& a, const Mat& b) {
    if (a.cols() != b.cols()) {
        throw std::invalid_argument("matmul_bt: widths " + std::to_string(a.cols()) + " and " +
                                    std::to_string(b.cols()) + " differ");
    }
    Mat out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
    return out;
}

// Numerically stable in-place softmax.
inline void softmax_inplace(std::span<float> row) {
    if (row.empty()) return;
    const float mx = *std::max_element(row.begin(), row.end());
    float sum = 0.0f;
    for (float& v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (float& v : row) v /= sum;
}

inline Mat softmax_rows(const Mat& m) {
    Mat out = m;
    for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
    return out;
}

// Indices of the k largest scores, ties to the lower index, returned ascending.
inline IndexList top_k_indices(std::span<const float> scores, std::size_t k) {
    IndexList idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (k < idx.size()) {
        auto better = [&](std::size_t a, std::size_t b) {
            return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
        };
        std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
        idx.resize(k);
        std::sort(idx.begin(), idx.end());
    }
    return idx;
}

// Centered moving average with windows clipped at the edges. Window sums are
// accumulated in double so a constant input comes back unchanged.
inline ScoreVec pool_avg_1d(std::span<const float> scores, std::size_t kernel) {
    if (kernel == 0 || kernel % 2 == 0) {
        throw std::invalid_argument("pool_avg_1d: kernel must be odd and >= 1, got " + std::to_string(kernel));
    }
    const std::size_t n = scores.size();
    const std::size_t half = kernel / 2;
    ScoreVec out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(n - 1, i + half);
        double sum = 0.0;
        for (std::size_t j = lo; j <= hi; ++j) sum += scores[j];
        out[i] = static_cast<float>(sum / static_cast<double>(hi - lo + 1));
    }
    return out;
}

} // namespace laq
