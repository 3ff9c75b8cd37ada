#include "protoseg/tensor.hpp"

#include <cmath>
#include <cstdio>

namespace protoseg {

std::size_t Tensor::numel(const std::vector<int>& shape)
{
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape, Real fill)
    : shape_(std::move(shape)), data_(numel(shape_), fill)
{
}

Tensor::Tensor(std::vector<int> shape, std::vector<Real> values)
    : shape_(std::move(shape)), data_(std::move(values))
{
    if (data_.size() != numel(shape_)) {
        throw std::invalid_argument("Tensor: value count " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_str());
    }
}

int Tensor::dim(int axis) const
{
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) throw std::out_of_range("Tensor::dim: bad axis");
    return shape_[axis];
}

Tensor Tensor::reshaped(std::vector<int> shape) const
{
    if (numel(shape) != data_.size()) {
        throw std::invalid_argument("Tensor::reshaped: " + shape_str() + " -> " +
                                    protoseg::shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

std::string Tensor::shape_str() const { return protoseg::shape_str(shape_); }

void Tensor::fill(Real v)
{
    for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const
{
    for (Real x : data_) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

std::string shape_str(const std::vector<int>& shape)
{
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void Fnv1a::update(const void* bytes, std::size_t n)
{
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h_ ^= p[i];
        h_ *= 0x100000001b3ULL;
    }
}

std::string Fnv1a::hex() const
{
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h_));
    return buf;
}

std::string digest_hex(std::string_view text)
{
    Fnv1a h;
    h.update(text);
    return h.hex();
}

}  // namespace protoseg
