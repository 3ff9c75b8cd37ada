#pragma once

// Small reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a graph node holding a value and (after backward) a
// gradient. Leaves created with requires_grad = true are trainable
// parameters; every op records a backward closure when any input requires a
// gradient and recording is enabled (see NoGradGuard).

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "protoseg/kernels.hpp"
#include "protoseg/tensor.hpp"

namespace protoseg::ad {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    /// Direct write access, used by optimizers on leaf parameters.
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad = Tensor(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::vector<int>& shape() const { return node_->value.shape(); }
    int dim(int axis) const { return node_->value.dim(axis); }

    const std::shared_ptr<Node>& node() const { return node_; }

    /// Deep copy of the value as a new leaf (no graph history).
    Var detach() const { return Var(node_->value, false); }

private:
    std::shared_ptr<Node> node_;
    friend Var make_result(Tensor, std::vector<Var>, std::function<void(Node&)>);
};

/// Adds g into the node's gradient (allocating it on first use).
void accumulate(Node& node, const Tensor& g);

/// Runs reverse-mode accumulation from a scalar root (seed gradient 1).
void backward(const Var& root);

bool grad_enabled();

/// Disables graph recording for its lifetime (eval mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var parameter(Tensor t) { return Var(std::move(t), true); }

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Real s);
Var relu(const Var& a);
Var gelu(const Var& a);

// Shape
Var reshape(const Var& a, std::vector<int> shape);
Var transpose(const Var& a);  // rank-2
Var slice_rows(const Var& a, int start, int count);  // rank-2
Var slice_cols(const Var& a, int start, int count);  // rank-2
Var concat_rows(const std::vector<Var>& parts);  // rank-2, equal column counts
Var concat_cols(const std::vector<Var>& parts);  // rank-2, equal row counts
/// Stacks equal-shape tensors along a new leading axis.
Var stack(const std::vector<Var>& parts);
/// Zero-pads a [C,H,W] tensor at the bottom/right.
Var pad_bottom_right(const Var& a, int pad_h, int pad_w);
/// Top-left crop of a [C,H,W] tensor.
Var crop_top_left(const Var& a, int h, int w);

// Linear algebra
Var matmul(const Var& a, const Var& b);  // [M,K] x [K,N]
/// x[N,in] W[out,in]^T + b[out]; bias may be undefined.
Var linear(const Var& x, const Var& w, const Var& b);
Var add_rowvec(const Var& x, const Var& v);  // x[N,D] + v[D]
Var mul_rowvec(const Var& x, const Var& v);  // x[N,D] * v[D]

// Image ops on [C,H,W]
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad,
           int dilation);
Var window_mean(const Var& x, int window_h, int window_w);
Var resize_bilinear(const Var& x, int out_h, int out_w);

// Normalization / reductions
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps);  // rows of [N,D]
Var softmax_rows(const Var& x);        // last axis of [N,M]
Var softmax_leading(const Var& x);     // axis 0 of [C,...]
Var sum_leading(const Var& x);         // axis 0 of [C,...] -> [...]
Var sum_all(const Var& x);             // -> scalar [1]
Var add_scalars(const Var& a, const Var& b);

// Prototype-network primitives
/// Mask-weighted mean of a [D,H,W] map: sum_hw m f / sum_hw m -> [D]. Weights sum > 0.
Var masked_mean(const Var& features, const Tensor& weights);
/// Picks cells (row, col) out of a [D,gh,gw] grid -> [P, D].
Var gather_cells(const Var& grid, const std::vector<std::pair<int, int>>& cells);
/// scale * cos(protos[p], feats[:,h,w]) -> [P,H,W].
Var cosine_maps(const Var& protos, const Var& features, Real scale, Real eps);
/// Mean over pixels of -sum_j target_j log(max(p_j, eps)); probs/target [J,H,W].
Var cross_entropy(const Var& probs, const Tensor& target, Real eps);

}  // namespace protoseg::ad
