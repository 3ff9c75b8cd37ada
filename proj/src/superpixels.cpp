// Felzenszwalb-Huttenlocher graph-based segmentation on a single-channel
// image with intensities in [0, 1]. The scale parameter follows the usual
// 8-bit convention (threshold k = scale / 255 on unit intensities).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "protoseg/data_pipeline.hpp"

namespace protoseg::data {

namespace {

class DisjointSets {
public:
    explicit DisjointSets(int n) : parent_(n), size_(n, 1)
    {
        std::iota(parent_.begin(), parent_.end(), 0);
    }

    int find(int x)
    {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }

    // Joins two roots; the larger set absorbs the smaller (ties keep `a`).
    int join(int a, int b)
    {
        if (size_[a] < size_[b]) std::swap(a, b);
        parent_[b] = a;
        size_[a] += size_[b];
        return a;
    }

    int size(int root) const { return size_[root]; }

private:
    std::vector<int> parent_;
    std::vector<int> size_;
};

struct Edge {
    int a;
    int b;
    Real w;
};

int reflect_index(int i, int n)
{
    // scipy.ndimage "reflect": d c b a | a b c d | d c b a
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

Image gaussian_smooth(const Image& in, Real sigma)
{
    if (sigma <= 0) return in;
    const int radius = static_cast<int>(4.0 * sigma + 0.5);
    std::vector<Real> k(2 * radius + 1);
    Real sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[i + radius];
    }
    for (auto& v : k) v /= sum;
    const int h = in.height(), w = in.width();
    Image tmp(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            Real s = 0;
            for (int i = -radius; i <= radius; ++i) s += k[i + radius] * in(y, reflect_index(x + i, w));
            tmp(y, x) = s;
        }
    }
    Image out(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            Real s = 0;
            for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp(reflect_index(y + i, h), x);
            out(y, x) = s;
        }
    }
    return out;
}

}  // namespace

SuperpixelMap generate_superpixels(const Image& image, const FelzenszwalbParams& params)
{
    for (Real v : image.values()) {
        if (!std::isfinite(v)) throw std::invalid_argument("generate_superpixels: non-finite pixel");
    }
    if (params.scale < 0 || params.sigma < 0 || params.min_size < 0) {
        throw std::invalid_argument("generate_superpixels: parameters must be non-negative");
    }
    const int h = image.height(), w = image.width();
    SuperpixelMap out;
    out.segments = LabelMap(h, w, 0);
    if (h == 0 || w == 0) return out;

    const Image smooth = gaussian_smooth(image, params.sigma);
    std::vector<Edge> edges;
    edges.reserve(static_cast<std::size_t>(h) * w * 4);
    auto id = [w](int y, int x) { return y * w + x; };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const Real v = smooth(y, x);
            if (x + 1 < w) edges.push_back({id(y, x), id(y, x + 1), std::abs(v - smooth(y, x + 1))});
            if (y + 1 < h) edges.push_back({id(y, x), id(y + 1, x), std::abs(v - smooth(y + 1, x))});
            if (x + 1 < w && y + 1 < h) {
                edges.push_back({id(y, x), id(y + 1, x + 1), std::abs(v - smooth(y + 1, x + 1))});
            }
            if (x + 1 < w && y > 0) {
                edges.push_back({id(y, x), id(y - 1, x + 1), std::abs(v - smooth(y - 1, x + 1))});
            }
        }
    }
    std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) { return a.w < b.w; });

    const Real k = params.scale / 255.0;
    const int n = h * w;
    DisjointSets sets(n);
    std::vector<Real> threshold(n, k);
    for (const Edge& e : edges) {
        int a = sets.find(e.a);
        int b = sets.find(e.b);
        if (a == b) continue;
        if (e.w <= threshold[a] && e.w <= threshold[b]) {
            const int root = sets.join(a, b);
            threshold[root] = e.w + k / sets.size(root);
        }
    }
    for (const Edge& e : edges) {
        int a = sets.find(e.a);
        int b = sets.find(e.b);
        if (a != b && (sets.size(a) < params.min_size || sets.size(b) < params.min_size)) {
            sets.join(a, b);
        }
    }

    std::vector<int> remap(n, -1);
    int next = 0;
    for (int i = 0; i < n; ++i) {
        const int r = sets.find(i);
        if (remap[r] < 0) remap[r] = next++;
        out.segments[i] = remap[r];
    }
    out.num_segments = next;
    return out;
}

std::vector<int> SuperpixelMap::region_sizes() const
{
    std::vector<int> sizes(num_segments, 0);
    for (auto v : segments.values()) ++sizes.at(v);
    return sizes;
}

Mask SuperpixelMap::region(int id) const
{
    if (id < 0 || id >= num_segments) throw std::out_of_range("SuperpixelMap::region: bad id");
    Mask m(segments.height(), segments.width(), 0);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = segments[i] == id ? 1 : 0;
    return m;
}

}  // namespace protoseg::data
