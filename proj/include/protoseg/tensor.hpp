#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace protoseg {

using Real = double;

/// Height/width pair used for resolutions and grids.
struct Shape2 {
    int height = 0;
    int width = 0;

    bool operator==(const Shape2&) const = default;
    std::string str() const
    {
        return std::to_string(height) + "x" + std::to_string(width);
    }
};

/// Dense row-major N-d array of Real. Owns its storage.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, Real fill = 0);
    Tensor(std::vector<int> shape, std::vector<Real> values);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const;
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    Real* data() { return data_.data(); }
    const Real* data() const { return data_.data(); }
    std::span<Real> values() { return data_; }
    std::span<const Real> values() const { return data_; }

    Real& operator[](std::size_t i) { return data_[i]; }
    Real operator[](std::size_t i) const { return data_[i]; }

    /// Element access for rank-3 tensors (channel, row, col).
    Real& at(int c, int y, int x)
    {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }
    Real at(int c, int y, int x) const
    {
        return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
    }

    Tensor reshaped(std::vector<int> shape) const;
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

    void fill(Real v);
    bool all_finite() const;

    static std::size_t numel(const std::vector<int>& shape);

private:
    std::vector<int> shape_;
    std::vector<Real> data_;
};

std::string shape_str(const std::vector<int>& shape);

/// Row-major 2D grid (rows = height, cols = width).
template <class T>
class Grid2 {
public:
    Grid2() = default;
    Grid2(int height, int width, T fill = T{})
        : h_(height), w_(width), v_(static_cast<std::size_t>(height) * width, fill)
    {
        if (height < 0 || width < 0) {
            throw std::invalid_argument("Grid2: negative dimensions");
        }
    }

    int height() const { return h_; }
    int width() const { return w_; }
    Shape2 shape() const { return {h_, w_}; }
    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    T& operator()(int y, int x) { return v_[static_cast<std::size_t>(y) * w_ + x]; }
    const T& operator()(int y, int x) const
    {
        return v_[static_cast<std::size_t>(y) * w_ + x];
    }
    T& operator[](std::size_t i) { return v_[i]; }
    const T& operator[](std::size_t i) const { return v_[i]; }

    std::vector<T>& values() { return v_; }
    const std::vector<T>& values() const { return v_; }

    bool operator==(const Grid2&) const = default;

private:
    int h_ = 0;
    int w_ = 0;
    std::vector<T> v_;
};

using Image = Grid2<Real>;
using Mask = Grid2<std::uint8_t>;
using LabelMap = Grid2<std::int32_t>;

/// 3D array stored slice-major: index = (z * height + y) * width + x.
/// This matches NIfTI voxel order with x = column, y = row.
template <class T>
class Volume {
public:
    Volume() = default;
    Volume(int height, int width, int depth, T fill = T{})
        : h_(height), w_(width), d_(depth),
          v_(static_cast<std::size_t>(height) * width * depth, fill)
    {
    }

    int height() const { return h_; }
    int width() const { return w_; }
    int depth() const { return d_; }
    std::size_t size() const { return v_.size(); }

    T& operator()(int y, int x, int z)
    {
        return v_[(static_cast<std::size_t>(z) * h_ + y) * w_ + x];
    }
    const T& operator()(int y, int x, int z) const
    {
        return v_[(static_cast<std::size_t>(z) * h_ + y) * w_ + x];
    }

    std::vector<T>& values() { return v_; }
    const std::vector<T>& values() const { return v_; }

    Grid2<T> slice(int z) const
    {
        Grid2<T> out(h_, w_);
        const std::size_t off = static_cast<std::size_t>(z) * h_ * w_;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_[off + i];
        return out;
    }

    void set_slice(int z, const Grid2<T>& s)
    {
        if (s.height() != h_ || s.width() != w_) {
            throw std::invalid_argument("Volume::set_slice: shape mismatch");
        }
        const std::size_t off = static_cast<std::size_t>(z) * h_ * w_;
        for (std::size_t i = 0; i < s.size(); ++i) v_[off + i] = s[i];
    }

    bool same_shape(int h, int w, int d) const { return h == h_ && w == w_ && d == d_; }
    bool operator==(const Volume&) const = default;

private:
    int h_ = 0;
    int w_ = 0;
    int d_ = 0;
    std::vector<T> v_;
};

/// 64-bit FNV-1a over raw bytes; used for content addressing and weight digests.
class Fnv1a {
public:
    void update(const void* bytes, std::size_t n);
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t value() const { return h_; }
    std::string hex() const;

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::string digest_hex(std::string_view text);

}  // namespace protoseg
