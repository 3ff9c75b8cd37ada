#include "protoseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace protoseg::kernels {

int max_threads()
{
#if defined(_OPENMP)
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace parallel {

namespace {

constexpr int kColBlock = 256;

void transpose(int rows, int cols, const Real* in, Real* out)
{
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            out[static_cast<std::size_t>(c) * rows + r] = in[static_cast<std::size_t>(r) * cols + c];
        }
    }
}

// Row-major C[M,N] (+)= A[M,K] B[K,N]. Columns are tiled so a K x kColBlock
// panel of B stays cache resident while four rows of A stream over it.
void gemm_nn(int m, int n, int k, const Real* a, const Real* b, Real* c, bool accumulate)
{
    const int row_groups = (m + 3) / 4;
    for (int j0 = 0; j0 < n; j0 += kColBlock) {
        const int jn = std::min(kColBlock, n - j0);
#pragma omp parallel for schedule(static)
        for (int g = 0; g < row_groups; ++g) {
            const int i0 = g * 4;
            const int rows = std::min(4, m - i0);
            Real acc[4][kColBlock];
            for (int r = 0; r < rows; ++r) {
                const Real* src = c + static_cast<std::size_t>(i0 + r) * n + j0;
                for (int j = 0; j < jn; ++j) acc[r][j] = accumulate ? src[j] : 0;
            }
            if (rows == 4) {
                const Real* a0 = a + static_cast<std::size_t>(i0) * k;
                const Real* a1 = a0 + k;
                const Real* a2 = a1 + k;
                const Real* a3 = a2 + k;
                for (int p = 0; p < k; ++p) {
                    const Real* bp = b + static_cast<std::size_t>(p) * n + j0;
                    const Real v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
                    for (int j = 0; j < jn; ++j) {
                        const Real bv = bp[j];
                        acc[0][j] += v0 * bv;
                        acc[1][j] += v1 * bv;
                        acc[2][j] += v2 * bv;
                        acc[3][j] += v3 * bv;
                    }
                }
            } else {
                for (int r = 0; r < rows; ++r) {
                    const Real* ar = a + static_cast<std::size_t>(i0 + r) * k;
                    for (int p = 0; p < k; ++p) {
                        const Real* bp = b + static_cast<std::size_t>(p) * n + j0;
                        const Real v = ar[p];
                        for (int j = 0; j < jn; ++j) acc[r][j] += v * bp[j];
                    }
                }
            }
            for (int r = 0; r < rows; ++r) {
                Real* dst = c + static_cast<std::size_t>(i0 + r) * n + j0;
                for (int j = 0; j < jn; ++j) dst[j] = acc[r][j];
            }
        }
    }
}

struct Tap {
    int i0;
    int i1;
    Real w1;
};

std::vector<Tap> taps(int in_size, int out_size)
{
    std::vector<Tap> t(out_size);
    for (int o = 0; o < out_size; ++o) {
        Real src = (o + Real(0.5)) * static_cast<Real>(in_size) / out_size - Real(0.5);
        if (src < 0) src = 0;
        int i0 = static_cast<int>(src);
        if (i0 > in_size - 1) i0 = in_size - 1;
        t[o] = {i0, std::min(i0 + 1, in_size - 1), src - i0};
    }
    return t;
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const Real* a, const Real* b,
          Real* c, bool accumulate)
{
    if (m == 0 || n == 0) return;
    std::vector<Real> a_packed;
    std::vector<Real> b_packed;
    if (trans_a) {
        a_packed.resize(static_cast<std::size_t>(m) * k);
        transpose(k, m, a, a_packed.data());
        a = a_packed.data();
    }
    if (trans_b) {
        b_packed.resize(static_cast<std::size_t>(k) * n);
        transpose(n, k, b, b_packed.data());
        b = b_packed.data();
    }
    gemm_nn(m, n, k, a, b, c, accumulate);
}

void im2col(const ConvGeometry& g, const Real* image, Real* cols)
{
    const int oh = g.out_height();
    const int ow = g.out_width();
    const int rows = g.col_rows();
#pragma omp parallel for schedule(static)
    for (int row = 0; row < rows; ++row) {
        const int kx = row % g.kernel_w;
        const int ky = (row / g.kernel_w) % g.kernel_h;
        const int c = row / (g.kernel_w * g.kernel_h);
        Real* out = cols + static_cast<std::size_t>(row) * oh * ow;
        const Real* plane = image + static_cast<std::size_t>(c) * g.height * g.width;
        for (int y = 0; y < oh; ++y) {
            const int iy = y * g.stride - g.pad + ky * g.dilation;
            Real* dst = out + static_cast<std::size_t>(y) * ow;
            if (iy < 0 || iy >= g.height) {
                std::fill(dst, dst + ow, Real(0));
                continue;
            }
            const Real* src = plane + static_cast<std::size_t>(iy) * g.width;
            for (int x = 0; x < ow; ++x) {
                const int ix = x * g.stride - g.pad + kx * g.dilation;
                dst[x] = (ix >= 0 && ix < g.width) ? src[ix] : 0;
            }
        }
    }
}

void col2im(const ConvGeometry& g, const Real* cols, Real* image)
{
    const int oh = g.out_height();
    const int ow = g.out_width();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < g.channels; ++c) {
        Real* plane = image + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ky = 0; ky < g.kernel_h; ++ky) {
            for (int kx = 0; kx < g.kernel_w; ++kx) {
                const int row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                const Real* in = cols + static_cast<std::size_t>(row) * oh * ow;
                for (int y = 0; y < oh; ++y) {
                    const int iy = y * g.stride - g.pad + ky * g.dilation;
                    if (iy < 0 || iy >= g.height) continue;
                    Real* dst = plane + static_cast<std::size_t>(iy) * g.width;
                    const Real* src = in + static_cast<std::size_t>(y) * ow;
                    for (int x = 0; x < ow; ++x) {
                        const int ix = x * g.stride - g.pad + kx * g.dilation;
                        if (ix >= 0 && ix < g.width) dst[ix] += src[x];
                    }
                }
            }
        }
    }
}

namespace {

std::vector<Real> row_norms(int rows, int cols, const Real* m)
{
    std::vector<Real> out(rows);
    for (int r = 0; r < rows; ++r) {
        Real s = 0;
        for (int c = 0; c < cols; ++c) s += m[static_cast<std::size_t>(r) * cols + c] * m[static_cast<std::size_t>(r) * cols + c];
        out[r] = std::sqrt(s);
    }
    return out;
}

std::vector<Real> column_norms(int rows, int cols, const Real* m)
{
    std::vector<Real> out(cols, 0);
    for (int r = 0; r < rows; ++r) {
        const Real* row = m + static_cast<std::size_t>(r) * cols;
#pragma omp parallel for schedule(static)
        for (int c = 0; c < cols; ++c) out[c] += row[c] * row[c];
    }
    for (auto& v : out) v = std::sqrt(v);
    return out;
}

}  // namespace

void cosine_maps(int protos_n, int dim, int pixels, const Real* protos, const Real* feats,
                 Real scale, Real eps, Real* out)
{
    const auto pn = row_norms(protos_n, dim, protos);
    const auto fn = column_norms(dim, pixels, feats);
    gemm_nn(protos_n, pixels, dim, protos, feats, out, false);
#pragma omp parallel for schedule(static)
    for (int l = 0; l < protos_n; ++l) {
        Real* row = out + static_cast<std::size_t>(l) * pixels;
        for (int i = 0; i < pixels; ++i) row[i] = scale * row[i] / (pn[l] * fn[i] + eps);
    }
}

void cosine_maps_backward(int protos_n, int dim, int pixels, const Real* protos,
                          const Real* feats, Real scale, Real eps, const Real* grad_out,
                          Real* grad_protos, Real* grad_feats)
{
    const auto pn = row_norms(protos_n, dim, protos);
    const auto fn = column_norms(dim, pixels, feats);
    const std::size_t total = static_cast<std::size_t>(protos_n) * pixels;
    std::vector<Real> dots(total);
    gemm_nn(protos_n, pixels, dim, protos, feats, dots.data(), false);

    // d out / d p = G f - K |f| p/|p|, d out / d f = G p - K |p| f/|f|
    std::vector<Real> gmat(total);
    std::vector<Real> kmat(total);
#pragma omp parallel for schedule(static)
    for (int l = 0; l < protos_n; ++l) {
        for (int i = 0; i < pixels; ++i) {
            const std::size_t idx = static_cast<std::size_t>(l) * pixels + i;
            const Real den = pn[l] * fn[i] + eps;
            gmat[idx] = scale * grad_out[idx] / den;
            kmat[idx] = scale * grad_out[idx] * dots[idx] / (den * den);
        }
    }
    // grad_protos[P,D] += G[P,HW] feats[D,HW]^T
    gemm(false, true, protos_n, dim, pixels, gmat.data(), feats, grad_protos, true);
#pragma omp parallel for schedule(static)
    for (int l = 0; l < protos_n; ++l) {
        if (pn[l] <= 0) continue;
        Real s = 0;
        for (int i = 0; i < pixels; ++i) s += kmat[static_cast<std::size_t>(l) * pixels + i] * fn[i];
        for (int d = 0; d < dim; ++d) {
            grad_protos[static_cast<std::size_t>(l) * dim + d] -= s * protos[static_cast<std::size_t>(l) * dim + d] / pn[l];
        }
    }
    // grad_feats[D,HW] += protos[P,D]^T G[P,HW]
    gemm(true, false, dim, pixels, protos_n, protos, gmat.data(), grad_feats, true);
    std::vector<Real> col(pixels, 0);
    for (int l = 0; l < protos_n; ++l) {
        const Real* krow = kmat.data() + static_cast<std::size_t>(l) * pixels;
        for (int i = 0; i < pixels; ++i) col[i] += krow[i] * pn[l];
    }
#pragma omp parallel for schedule(static)
    for (int d = 0; d < dim; ++d) {
        Real* row = grad_feats + static_cast<std::size_t>(d) * pixels;
        const Real* frow = feats + static_cast<std::size_t>(d) * pixels;
        for (int i = 0; i < pixels; ++i) {
            if (fn[i] > 0) row[i] -= col[i] * frow[i] / fn[i];
        }
    }
}

void window_mean(int channels, int h, int w, int wh, int ww, const Real* in, Real* out)
{
    const int gh = window_count(h, wh);
    const int gw = window_count(w, ww);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        const Real* plane = in + static_cast<std::size_t>(c) * h * w;
        Real* dst = out + static_cast<std::size_t>(c) * gh * gw;
        for (int m = 0; m < gh; ++m) {
            const int y1 = std::min(h, (m + 1) * wh);
            for (int n = 0; n < gw; ++n) {
                const int x1 = std::min(w, (n + 1) * ww);
                Real s = 0;
                for (int y = m * wh; y < y1; ++y) {
                    for (int x = n * ww; x < x1; ++x) s += plane[y * w + x];
                }
                dst[m * gw + n] = s / ((y1 - m * wh) * (x1 - n * ww));
            }
        }
    }
}

void window_mean_backward(int channels, int h, int w, int wh, int ww, const Real* grad_out,
                          Real* grad_in)
{
    const int gh = window_count(h, wh);
    const int gw = window_count(w, ww);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        const Real* src = grad_out + static_cast<std::size_t>(c) * gh * gw;
        Real* plane = grad_in + static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < h; ++y) {
            const int m = y / wh;
            const int ch = std::min(h, (m + 1) * wh) - m * wh;
            for (int x = 0; x < w; ++x) {
                const int n = x / ww;
                const int cw = std::min(w, (n + 1) * ww) - n * ww;
                plane[y * w + x] += src[m * gw + n] / (ch * cw);
            }
        }
    }
}

void resize_bilinear(int channels, int h, int w, int oh, int ow, const Real* in, Real* out)
{
    const auto ty = taps(h, oh);
    const auto tx = taps(w, ow);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        const Real* src = in + static_cast<std::size_t>(c) * h * w;
        Real* dst = out + static_cast<std::size_t>(c) * oh * ow;
        for (int y = 0; y < oh; ++y) {
            const Tap& a = ty[y];
            const Real* r0 = src + static_cast<std::size_t>(a.i0) * w;
            const Real* r1 = src + static_cast<std::size_t>(a.i1) * w;
            for (int x = 0; x < ow; ++x) {
                const Tap& b = tx[x];
                const Real top = (1 - b.w1) * r0[b.i0] + b.w1 * r0[b.i1];
                const Real bot = (1 - b.w1) * r1[b.i0] + b.w1 * r1[b.i1];
                dst[y * ow + x] = (1 - a.w1) * top + a.w1 * bot;
            }
        }
    }
}

void resize_bilinear_backward(int channels, int h, int w, int oh, int ow,
                              const Real* grad_out, Real* grad_in)
{
    const auto ty = taps(h, oh);
    const auto tx = taps(w, ow);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < channels; ++c) {
        const Real* src = grad_out + static_cast<std::size_t>(c) * oh * ow;
        Real* dst = grad_in + static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < oh; ++y) {
            const Tap& a = ty[y];
            for (int x = 0; x < ow; ++x) {
                const Tap& b = tx[x];
                const Real g = src[y * ow + x];
                dst[a.i0 * w + b.i0] += g * (1 - a.w1) * (1 - b.w1);
                dst[a.i0 * w + b.i1] += g * (1 - a.w1) * b.w1;
                dst[a.i1 * w + b.i0] += g * a.w1 * (1 - b.w1);
                dst[a.i1 * w + b.i1] += g * a.w1 * b.w1;
            }
        }
    }
}

}  // namespace parallel
}  // namespace protoseg::kernels
