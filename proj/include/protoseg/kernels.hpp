#pragma once

// Numeric kernels behind the autodiff ops. Every kernel exists twice:
// `serial` is the straightforward reference kept for testing, `parallel`
// is the OpenMP version used by the library. Both must agree to rounding.

#include "protoseg/tensor.hpp"

namespace protoseg::kernels {

struct ConvGeometry {
    int channels = 0;
    int height = 0;
    int width = 0;
    int kernel_h = 1;
    int kernel_w = 1;
    int stride = 1;
    int pad = 0;
    int dilation = 1;

    int out_height() const
    {
        return (height + 2 * pad - dilation * (kernel_h - 1) - 1) / stride + 1;
    }
    int out_width() const
    {
        return (width + 2 * pad - dilation * (kernel_w - 1) - 1) / stride + 1;
    }
    int col_rows() const { return channels * kernel_h * kernel_w; }
    int col_cols() const { return out_height() * out_width(); }
};

// Window grid for non-overlapping pooling; edge windows may be partial.
inline int window_count(int extent, int window) { return (extent + window - 1) / window; }

namespace serial {

/// C[M,N] = op(A) * op(B) (+ C when accumulate). op(A) is M x K, op(B) is K x N.
/// A is stored M x K (or K x M when trans_a), B is K x N (or N x K when trans_b).
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const Real* a, const Real* b,
          Real* c, bool accumulate);

void im2col(const ConvGeometry& g, const Real* image, Real* cols);
/// Scatter-adds columns back into image (image must be zero-initialized by caller
/// when a fresh gradient is wanted).
void col2im(const ConvGeometry& g, const Real* cols, Real* image);

/// out[p, i] = scale * <protos[p,:], feats[:, i]> / (|protos[p]| |feats[:,i]| + eps)
void cosine_maps(int protos_n, int dim, int pixels, const Real* protos, const Real* feats,
                 Real scale, Real eps, Real* out);
void cosine_maps_backward(int protos_n, int dim, int pixels, const Real* protos,
                          const Real* feats, Real scale, Real eps, const Real* grad_out,
                          Real* grad_protos, Real* grad_feats);

/// Mean over non-overlapping (wh, ww) windows; partial edge windows average over
/// their actual extent. in: [C,H,W], out: [C, ceil(H/wh), ceil(W/ww)].
void window_mean(int channels, int h, int w, int wh, int ww, const Real* in, Real* out);
void window_mean_backward(int channels, int h, int w, int wh, int ww, const Real* grad_out,
                          Real* grad_in);

/// Bilinear resize with half-pixel centers (align_corners = false).
void resize_bilinear(int channels, int h, int w, int oh, int ow, const Real* in, Real* out);
void resize_bilinear_backward(int channels, int h, int w, int oh, int ow,
                              const Real* grad_out, Real* grad_in);

}  // namespace serial

namespace parallel {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const Real* a, const Real* b,
          Real* c, bool accumulate);
void im2col(const ConvGeometry& g, const Real* image, Real* cols);
void col2im(const ConvGeometry& g, const Real* cols, Real* image);
void cosine_maps(int protos_n, int dim, int pixels, const Real* protos, const Real* feats,
                 Real scale, Real eps, Real* out);
void cosine_maps_backward(int protos_n, int dim, int pixels, const Real* protos,
                          const Real* feats, Real scale, Real eps, const Real* grad_out,
                          Real* grad_protos, Real* grad_feats);
void window_mean(int channels, int h, int w, int wh, int ww, const Real* in, Real* out);
void window_mean_backward(int channels, int h, int w, int wh, int ww, const Real* grad_out,
                          Real* grad_in);
void resize_bilinear(int channels, int h, int w, int oh, int ow, const Real* in, Real* out);
void resize_bilinear_backward(int channels, int h, int w, int oh, int ow,
                              const Real* grad_out, Real* grad_in);

}  // namespace parallel

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace protoseg::kernels
