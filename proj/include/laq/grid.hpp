#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace laq {

// One value per (layer, head), layer-major.
template <class T>
class Grid {
public:
    Grid() = default;
    Grid(std::size_t layers, std::size_t heads, const T& init = T{})
        : layers_(layers), heads_(heads), cells_(layers * heads, init) {}

    std::size_t layers() const { return layers_; }
    std::size_t heads() const { return heads_; }
    std::size_t size() const { return cells_.size(); }

    T& at(std::size_t layer, std::size_t head) { return cells_[index(layer, head)]; }
    const T& at(std::size_t layer, std::size_t head) const { return cells_[index(layer, head)]; }

    auto begin() { return cells_.begin(); }
    auto end() { return cells_.end(); }
    auto begin() const { return cells_.begin(); }
    auto end() const { return cells_.end(); }

    bool same_shape(std::size_t layers, std::size_t heads) const { return layers_ == layers && heads_ == heads; }
    template <class U>
    bool same_shape(const Grid<U>& other) const {
        return layers_ == other.layers() && heads_ == other.heads();
    }

    bool operator==(const Grid&) const = default;

private:
    std::size_t index(std::size_t layer, std::size_t head) const {
        if (layer >= layers_ || head >= heads_) {
            throw std::out_of_range("Grid: (" + std::to_string(layer) + ", " + std::to_string(head) +
                                    ") outside " + std::to_string(layers_) + "x" + std::to_string(heads_));
        }
        return layer * heads_ + head;
    }

    std::size_t layers_ = 0;
    std::size_t heads_ = 0;
    std::vector<T> cells_;
};

} // namespace laq
