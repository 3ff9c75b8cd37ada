#include "protoseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace protoseg::kernels::serial {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const Real* a, const Real* b,
          Real* c, bool accumulate)
{
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            Real acc = 0;
            for (int p = 0; p < k; ++p) {
                const Real av = trans_a ? a[static_cast<std::size_t>(p) * m + i]
                                        : a[static_cast<std::size_t>(i) * k + p];
                const Real bv = trans_b ? b[static_cast<std::size_t>(j) * k + p]
                                        : b[static_cast<std::size_t>(p) * n + j];
                acc += av * bv;
            }
            Real& dst = c[static_cast<std::size_t>(i) * n + j];
            dst = accumulate ? dst + acc : acc;
        }
    }
}

void im2col(const ConvGeometry& g, const Real* image, Real* cols)
{
    const int oh = g.out_height();
    const int ow = g.out_width();
    for (int c = 0; c < g.channels; ++c) {
        for (int ky = 0; ky < g.kernel_h; ++ky) {
            for (int kx = 0; kx < g.kernel_w; ++kx) {
                const int row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                Real* out = cols + static_cast<std::size_t>(row) * oh * ow;
                for (int y = 0; y < oh; ++y) {
                    const int iy = y * g.stride - g.pad + ky * g.dilation;
                    for (int x = 0; x < ow; ++x) {
                        const int ix = x * g.stride - g.pad + kx * g.dilation;
                        const bool inside = iy >= 0 && iy < g.height && ix >= 0 && ix < g.width;
                        out[y * ow + x] =
                            inside ? image[(static_cast<std::size_t>(c) * g.height + iy) * g.width + ix]
                                   : 0;
                    }
                }
            }
        }
    }
}

void col2im(const ConvGeometry& g, const Real* cols, Real* image)
{
    const int oh = g.out_height();
    const int ow = g.out_width();
    for (int c = 0; c < g.channels; ++c) {
        for (int ky = 0; ky < g.kernel_h; ++ky) {
            for (int kx = 0; kx < g.kernel_w; ++kx) {
                const int row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                const Real* in = cols + static_cast<std::size_t>(row) * oh * ow;
                for (int y = 0; y < oh; ++y) {
                    const int iy = y * g.stride - g.pad + ky * g.dilation;
                    if (iy < 0 || iy >= g.height) continue;
                    for (int x = 0; x < ow; ++x) {
                        const int ix = x * g.stride - g.pad + kx * g.dilation;
                        if (ix < 0 || ix >= g.width) continue;
                        image[(static_cast<std::size_t>(c) * g.height + iy) * g.width + ix] +=
                            in[y * ow + x];
                    }
                }
            }
        }
    }
}

void cosine_maps(int protos_n, int dim, int pixels, const Real* protos, const Real* feats,
                 Real scale, Real eps, Real* out)
{
    for (int l = 0; l < protos_n; ++l) {
        Real pn = 0;
        for (int d = 0; d < dim; ++d) pn += protos[l * dim + d] * protos[l * dim + d];
        pn = std::sqrt(pn);
        for (int i = 0; i < pixels; ++i) {
            Real dot = 0;
            Real fn = 0;
            for (int d = 0; d < dim; ++d) {
                const Real f = feats[static_cast<std::size_t>(d) * pixels + i];
                dot += protos[l * dim + d] * f;
                fn += f * f;
            }
            out[static_cast<std::size_t>(l) * pixels + i] = scale * dot / (pn * std::sqrt(fn) + eps);
        }
    }
}

void cosine_maps_backward(int protos_n, int dim, int pixels, const Real* protos,
                          const Real* feats, Real scale, Real eps, const Real* grad_out,
                          Real* grad_protos, Real* grad_feats)
{
    for (int l = 0; l < protos_n; ++l) {
        const Real* p = protos + static_cast<std::size_t>(l) * dim;
        Real pn = 0;
        for (int d = 0; d < dim; ++d) pn += p[d] * p[d];
        pn = std::sqrt(pn);
        for (int i = 0; i < pixels; ++i) {
            const Real g = grad_out[static_cast<std::size_t>(l) * pixels + i];
            Real dot = 0;
            Real fn = 0;
            for (int d = 0; d < dim; ++d) {
                const Real f = feats[static_cast<std::size_t>(d) * pixels + i];
                dot += p[d] * f;
                fn += f * f;
            }
            fn = std::sqrt(fn);
            const Real den = pn * fn + eps;
            const Real k = scale * g / den;
            const Real kn = scale * g * dot / (den * den);
            for (int d = 0; d < dim; ++d) {
                const Real f = feats[static_cast<std::size_t>(d) * pixels + i];
                Real gp = k * f;
                if (pn > 0) gp -= kn * fn * p[d] / pn;
                Real gf = k * p[d];
                if (fn > 0) gf -= kn * pn * f / fn;
                grad_protos[static_cast<std::size_t>(l) * dim + d] += gp;
                grad_feats[static_cast<std::size_t>(d) * pixels + i] += gf;
            }
        }
    }
}

void window_mean(int channels, int h, int w, int wh, int ww, const Real* in, Real* out)
{
    const int gh = window_count(h, wh);
    const int gw = window_count(w, ww);
    for (int c = 0; c < channels; ++c) {
        for (int m = 0; m < gh; ++m) {
            for (int n = 0; n < gw; ++n) {
                const int y1 = std::min(h, (m + 1) * wh);
                const int x1 = std::min(w, (n + 1) * ww);
                Real s = 0;
                for (int y = m * wh; y < y1; ++y) {
                    for (int x = n * ww; x < x1; ++x) {
                        s += in[(static_cast<std::size_t>(c) * h + y) * w + x];
                    }
                }
                const int count = (y1 - m * wh) * (x1 - n * ww);
                out[(static_cast<std::size_t>(c) * gh + m) * gw + n] = s / count;
            }
        }
    }
}

void window_mean_backward(int channels, int h, int w, int wh, int ww, const Real* grad_out,
                          Real* grad_in)
{
    const int gh = window_count(h, wh);
    const int gw = window_count(w, ww);
    for (int c = 0; c < channels; ++c) {
        for (int y = 0; y < h; ++y) {
            const int m = y / wh;
            const int ch = std::min(h, (m + 1) * wh) - m * wh;
            for (int x = 0; x < w; ++x) {
                const int n = x / ww;
                const int cw = std::min(w, (n + 1) * ww) - n * ww;
                grad_in[(static_cast<std::size_t>(c) * h + y) * w + x] +=
                    grad_out[(static_cast<std::size_t>(c) * gh + m) * gw + n] / (ch * cw);
            }
        }
    }
}

namespace {

struct Tap {
    int i0;
    int i1;
    Real w1;
};

Tap source_tap(int o, int in_size, int out_size)
{
    Real src = (o + Real(0.5)) * static_cast<Real>(in_size) / out_size - Real(0.5);
    if (src < 0) src = 0;
    int i0 = static_cast<int>(src);
    if (i0 > in_size - 1) i0 = in_size - 1;
    const int i1 = std::min(i0 + 1, in_size - 1);
    return {i0, i1, src - i0};
}

}  // namespace

void resize_bilinear(int channels, int h, int w, int oh, int ow, const Real* in, Real* out)
{
    for (int c = 0; c < channels; ++c) {
        const Real* src = in + static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < oh; ++y) {
            const Tap ty = source_tap(y, h, oh);
            for (int x = 0; x < ow; ++x) {
                const Tap tx = source_tap(x, w, ow);
                const Real top = (1 - tx.w1) * src[ty.i0 * w + tx.i0] + tx.w1 * src[ty.i0 * w + tx.i1];
                const Real bot = (1 - tx.w1) * src[ty.i1 * w + tx.i0] + tx.w1 * src[ty.i1 * w + tx.i1];
                out[(static_cast<std::size_t>(c) * oh + y) * ow + x] = (1 - ty.w1) * top + ty.w1 * bot;
            }
        }
    }
}

void resize_bilinear_backward(int channels, int h, int w, int oh, int ow,
                              const Real* grad_out, Real* grad_in)
{
    for (int c = 0; c < channels; ++c) {
        Real* dst = grad_in + static_cast<std::size_t>(c) * h * w;
        for (int y = 0; y < oh; ++y) {
            const Tap ty = source_tap(y, h, oh);
            for (int x = 0; x < ow; ++x) {
                const Tap tx = source_tap(x, w, ow);
                const Real g = grad_out[(static_cast<std::size_t>(c) * oh + y) * ow + x];
                dst[ty.i0 * w + tx.i0] += g * (1 - ty.w1) * (1 - tx.w1);
                dst[ty.i0 * w + tx.i1] += g * (1 - ty.w1) * tx.w1;
                dst[ty.i1 * w + tx.i0] += g * ty.w1 * (1 - tx.w1);
                dst[ty.i1 * w + tx.i1] += g * ty.w1 * tx.w1;
            }
        }
    }
}

}  // namespace protoseg::kernels::serial
