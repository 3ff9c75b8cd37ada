#include "protoseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace protoseg::ad {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool cond, const std::string& what)
{
    if (!cond) throw std::invalid_argument(what);
}

void require_rank(const Var& v, int rank, const char* op)
{
    require(v.defined(), std::string(op) + ": undefined input");
    require(v.value().rank() == rank, std::string(op) + ": expected rank " +
                                          std::to_string(rank) + ", got " +
                                          v.value().shape_str());
}

void acc_input(Node& self, std::size_t i, const Tensor& g)
{
    Node& in = *self.inputs[i];
    if (in.requires_grad) accumulate(in, g);
}

Node& input(Node& self, std::size_t i) { return *self.inputs[i]; }

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>())
{
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward)
{
    Var out(std::move(value), false);
    if (!g_grad_enabled) return out;
    bool any = false;
    for (const auto& v : inputs) any = any || v.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (auto& v : inputs) out.node_->inputs.push_back(v.node_);
    out.node_->backward = std::move(backward);
    return out;
}

void accumulate(Node& node, const Tensor& g)
{
    if (node.grad.empty()) {
        if (!g.same_shape(node.value)) {
            throw std::logic_error("accumulate: gradient shape " + g.shape_str() +
                                   " != value shape " + node.value.shape_str());
        }
        node.grad = g;
        return;
    }
    Real* dst = node.grad.data();
    const Real* src = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

void backward(const Var& root)
{
    require(root.defined() && root.value().size() == 1, "backward: root must be a scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    accumulate(*root.node(), Tensor(root.value().shape(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // Free intermediate gradients; leaves keep theirs for the optimizer.
    for (Node* n : order) {
        if (n->backward) n->grad = Tensor();
    }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b)
{
    require(a.value().same_shape(b.value()), "add: shape mismatch " + a.value().shape_str() +
                                                 " vs " + b.value().shape_str());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        acc_input(self, 0, self.grad);
        acc_input(self, 1, self.grad);
    });
}

Var sub(const Var& a, const Var& b)
{
    require(a.value().same_shape(b.value()), "sub: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        acc_input(self, 0, self.grad);
        Tensor neg = self.grad;
        for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -neg[i];
        acc_input(self, 1, neg);
    });
}

Var mul(const Var& a, const Var& b)
{
    require(a.value().same_shape(b.value()), "mul: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = input(self, 0).value;
        const Tensor& bv = input(self, 1).value;
        Tensor ga(av.shape());
        Tensor gb(bv.shape());
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] = self.grad[i] * bv[i];
            gb[i] = self.grad[i] * av[i];
        }
        acc_input(self, 0, ga);
        acc_input(self, 1, gb);
    });
}

Var scale(const Var& a, Real s)
{
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return make_result(std::move(out), {a}, [s](Node& self) {
        Tensor g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
        acc_input(self, 0, g);
    });
}

Var relu(const Var& a)
{
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0 ? out[i] : 0;
    return make_result(std::move(out), {a}, [](Node& self) {
        const Tensor& x = input(self, 0).value;
        Tensor g(x.shape());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = x[i] > 0 ? self.grad[i] : 0;
        acc_input(self, 0, g);
    });
}

Var gelu(const Var& a)
{
    constexpr Real inv_sqrt2 = 0.70710678118654752440;
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real x = out[i];
        out[i] = 0.5 * x * (1 + std::erf(x * inv_sqrt2));
    }
    return make_result(std::move(out), {a}, [](Node& self) {
        constexpr Real inv_sqrt2 = 0.70710678118654752440;
        constexpr Real inv_sqrt2pi = 0.39894228040143267794;
        const Tensor& x = input(self, 0).value;
        Tensor g(x.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const Real cdf = 0.5 * (1 + std::erf(x[i] * inv_sqrt2));
            const Real pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
            g[i] = self.grad[i] * (cdf + x[i] * pdf);
        }
        acc_input(self, 0, g);
    });
}

// ---------------------------------------------------------------------- shape

Var reshape(const Var& a, std::vector<int> shape)
{
    Tensor out = a.value().reshaped(std::move(shape));
    return make_result(std::move(out), {a}, [](Node& self) {
        acc_input(self, 0, self.grad.reshaped(input(self, 0).value.shape()));
    });
}

namespace {

Tensor transpose2d(const Tensor& t)
{
    const int r = t.dim(0);
    const int c = t.dim(1);
    Tensor out({c, r});
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = t[static_cast<std::size_t>(i) * c + j];
    }
    return out;
}

}  // namespace

Var transpose(const Var& a)
{
    require_rank(a, 2, "transpose");
    return make_result(transpose2d(a.value()), {a}, [](Node& self) {
        acc_input(self, 0, transpose2d(self.grad));
    });
}

Var slice_rows(const Var& a, int start, int count)
{
    require_rank(a, 2, "slice_rows");
    const int rows = a.dim(0);
    const int cols = a.dim(1);
    require(start >= 0 && count >= 0 && start + count <= rows, "slice_rows: out of range");
    Tensor out({count, cols});
    std::copy_n(a.value().data() + static_cast<std::size_t>(start) * cols,
                static_cast<std::size_t>(count) * cols, out.data());
    return make_result(std::move(out), {a}, [start, rows, cols](Node& self) {
        Tensor g({rows, cols});
        std::copy_n(self.grad.data(), self.grad.size(), g.data() + static_cast<std::size_t>(start) * cols);
        acc_input(self, 0, g);
    });
}

Var slice_cols(const Var& a, int start, int count)
{
    require_rank(a, 2, "slice_cols");
    const int rows = a.dim(0);
    const int cols = a.dim(1);
    require(start >= 0 && count >= 0 && start + count <= cols, "slice_cols: out of range");
    Tensor out({rows, count});
    for (int r = 0; r < rows; ++r) {
        std::copy_n(a.value().data() + static_cast<std::size_t>(r) * cols + start, count,
                    out.data() + static_cast<std::size_t>(r) * count);
    }
    return make_result(std::move(out), {a}, [start, rows, cols, count](Node& self) {
        Tensor g({rows, cols});
        for (int r = 0; r < rows; ++r) {
            std::copy_n(self.grad.data() + static_cast<std::size_t>(r) * count, count,
                        g.data() + static_cast<std::size_t>(r) * cols + start);
        }
        acc_input(self, 0, g);
    });
}

Var concat_rows(const std::vector<Var>& parts)
{
    require(!parts.empty(), "concat_rows: no inputs");
    const int cols = parts[0].dim(1);
    int rows = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_rows");
        require(p.dim(1) == cols, "concat_rows: column mismatch");
        rows += p.dim(0);
    }
    Tensor out({rows, cols});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.value().data(), p.value().size(), out.data() + off);
        off += p.value().size();
    }
    return make_result(std::move(out), parts, [](Node& self) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < self.inputs.size(); ++i) {
            const Tensor& v = self.inputs[i]->value;
            Tensor g(v.shape());
            std::copy_n(self.grad.data() + off, v.size(), g.data());
            off += v.size();
            acc_input(self, i, g);
        }
    });
}

Var concat_cols(const std::vector<Var>& parts)
{
    require(!parts.empty(), "concat_cols: no inputs");
    const int rows = parts[0].dim(0);
    int cols = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_cols");
        require(p.dim(0) == rows, "concat_cols: row mismatch");
        cols += p.dim(1);
    }
    Tensor out({rows, cols});
    int c0 = 0;
    for (const auto& p : parts) {
        const int pc = p.dim(1);
        for (int r = 0; r < rows; ++r) {
            std::copy_n(p.value().data() + static_cast<std::size_t>(r) * pc, pc,
                        out.data() + static_cast<std::size_t>(r) * cols + c0);
        }
        c0 += pc;
    }
    return make_result(std::move(out), parts, [rows, cols](Node& self) {
        int c0 = 0;
        for (std::size_t i = 0; i < self.inputs.size(); ++i) {
            const Tensor& v = self.inputs[i]->value;
            const int pc = v.dim(1);
            Tensor g(v.shape());
            for (int r = 0; r < rows; ++r) {
                std::copy_n(self.grad.data() + static_cast<std::size_t>(r) * cols + c0, pc,
                            g.data() + static_cast<std::size_t>(r) * pc);
            }
            c0 += pc;
            acc_input(self, i, g);
        }
    });
}

Var stack(const std::vector<Var>& parts)
{
    require(!parts.empty(), "stack: no inputs");
    const auto& shape0 = parts[0].shape();
    for (const auto& p : parts) {
        require(p.shape() == shape0, "stack: shape mismatch " + shape_str(p.shape()) + " vs " +
                                         shape_str(shape0));
    }
    std::vector<int> shape{static_cast<int>(parts.size())};
    shape.insert(shape.end(), shape0.begin(), shape0.end());
    Tensor out(shape);
    const std::size_t n = parts[0].value().size();
    for (std::size_t i = 0; i < parts.size(); ++i) {
        std::copy_n(parts[i].value().data(), n, out.data() + i * n);
    }
    return make_result(std::move(out), parts, [n](Node& self) {
        for (std::size_t i = 0; i < self.inputs.size(); ++i) {
            Tensor g(self.inputs[i]->value.shape());
            std::copy_n(self.grad.data() + i * n, n, g.data());
            acc_input(self, i, g);
        }
    });
}

Var pad_bottom_right(const Var& a, int pad_h, int pad_w)
{
    require_rank(a, 3, "pad_bottom_right");
    if (pad_h == 0 && pad_w == 0) return a;
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    Tensor out({c, h + pad_h, w + pad_w});
    for (int k = 0; k < c; ++k) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) out.at(k, y, x) = a.value().at(k, y, x);
        }
    }
    return make_result(std::move(out), {a}, [c, h, w](Node& self) {
        Tensor g({c, h, w});
        for (int k = 0; k < c; ++k) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) g.at(k, y, x) = self.grad.at(k, y, x);
            }
        }
        acc_input(self, 0, g);
    });
}

Var crop_top_left(const Var& a, int h, int w)
{
    require_rank(a, 3, "crop_top_left");
    const int c = a.dim(0), ih = a.dim(1), iw = a.dim(2);
    require(h <= ih && w <= iw, "crop_top_left: crop larger than input");
    if (h == ih && w == iw) return a;
    Tensor out({c, h, w});
    for (int k = 0; k < c; ++k) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) out.at(k, y, x) = a.value().at(k, y, x);
        }
    }
    return make_result(std::move(out), {a}, [c, h, w, ih, iw](Node& self) {
        Tensor g({c, ih, iw});
        for (int k = 0; k < c; ++k) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) g.at(k, y, x) = self.grad.at(k, y, x);
            }
        }
        acc_input(self, 0, g);
    });
}

// ------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b)
{
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    require(b.dim(0) == k, "matmul: inner dimension mismatch " + a.value().shape_str() + " x " +
                               b.value().shape_str());
    Tensor out({m, n});
    kernels::parallel::gemm(false, false, m, n, k, a.value().data(), b.value().data(), out.data(),
                            false);
    return make_result(std::move(out), {a, b}, [m, n, k](Node& self) {
        Node& an = input(self, 0);
        Node& bn = input(self, 1);
        if (an.requires_grad) {
            Tensor ga({m, k});
            kernels::parallel::gemm(false, true, m, k, n, self.grad.data(), bn.value.data(),
                                    ga.data(), false);
            accumulate(an, ga);
        }
        if (bn.requires_grad) {
            Tensor gb({k, n});
            kernels::parallel::gemm(true, false, k, n, m, an.value.data(), self.grad.data(),
                                    gb.data(), false);
            accumulate(bn, gb);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b)
{
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    const int n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    require(w.dim(1) == in, "linear: weight " + w.value().shape_str() + " incompatible with input " +
                                x.value().shape_str());
    const bool has_bias = b.defined();
    if (has_bias) require(b.value().size() == static_cast<std::size_t>(out_dim), "linear: bias size");
    Tensor out({n, out_dim});
    kernels::parallel::gemm(false, true, n, out_dim, in, x.value().data(), w.value().data(),
                            out.data(), false);
    if (has_bias) {
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < out_dim; ++c) out[static_cast<std::size_t>(r) * out_dim + c] += b.value()[c];
        }
    }
    std::vector<Var> inputs{x, w};
    if (has_bias) inputs.push_back(b);
    return make_result(std::move(out), inputs, [n, in, out_dim, has_bias](Node& self) {
        Node& xn = input(self, 0);
        Node& wn = input(self, 1);
        if (xn.requires_grad) {
            Tensor gx({n, in});
            kernels::parallel::gemm(false, false, n, in, out_dim, self.grad.data(), wn.value.data(),
                                    gx.data(), false);
            accumulate(xn, gx);
        }
        if (wn.requires_grad) {
            Tensor gw({out_dim, in});
            kernels::parallel::gemm(true, false, out_dim, in, n, self.grad.data(), xn.value.data(),
                                    gw.data(), false);
            accumulate(wn, gw);
        }
        if (has_bias && self.inputs[2]->requires_grad) {
            Tensor gb({out_dim});
            for (int r = 0; r < n; ++r) {
                for (int c = 0; c < out_dim; ++c) gb[c] += self.grad[static_cast<std::size_t>(r) * out_dim + c];
            }
            accumulate(*self.inputs[2], gb.reshaped(self.inputs[2]->value.shape()));
        }
    });
}

Var add_rowvec(const Var& x, const Var& v)
{
    require_rank(x, 2, "add_rowvec");
    const int n = x.dim(0), d = x.dim(1);
    require(v.value().size() == static_cast<std::size_t>(d), "add_rowvec: size mismatch");
    Tensor out = x.value();
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(r) * d + c] += v.value()[c];
    }
    return make_result(std::move(out), {x, v}, [n, d](Node& self) {
        acc_input(self, 0, self.grad);
        if (self.inputs[1]->requires_grad) {
            Tensor g(self.inputs[1]->value.shape());
            for (int r = 0; r < n; ++r) {
                for (int c = 0; c < d; ++c) g[c] += self.grad[static_cast<std::size_t>(r) * d + c];
            }
            accumulate(*self.inputs[1], g);
        }
    });
}

Var mul_rowvec(const Var& x, const Var& v)
{
    require_rank(x, 2, "mul_rowvec");
    const int n = x.dim(0), d = x.dim(1);
    require(v.value().size() == static_cast<std::size_t>(d), "mul_rowvec: size mismatch");
    Tensor out = x.value();
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(r) * d + c] *= v.value()[c];
    }
    return make_result(std::move(out), {x, v}, [n, d](Node& self) {
        const Tensor& xv = input(self, 0).value;
        const Tensor& vv = input(self, 1).value;
        if (self.inputs[0]->requires_grad) {
            Tensor g(xv.shape());
            for (int r = 0; r < n; ++r) {
                for (int c = 0; c < d; ++c) {
                    g[static_cast<std::size_t>(r) * d + c] = self.grad[static_cast<std::size_t>(r) * d + c] * vv[c];
                }
            }
            accumulate(*self.inputs[0], g);
        }
        if (self.inputs[1]->requires_grad) {
            Tensor g(vv.shape());
            for (int r = 0; r < n; ++r) {
                for (int c = 0; c < d; ++c) {
                    g[c] += self.grad[static_cast<std::size_t>(r) * d + c] * xv[static_cast<std::size_t>(r) * d + c];
                }
            }
            accumulate(*self.inputs[1], g);
        }
    });
}

// ------------------------------------------------------------------ image ops

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad, int dilation)
{
    require_rank(x, 3, "conv2d");
    require_rank(weight, 4, "conv2d weight");
    kernels::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), weight.dim(2), weight.dim(3),
                            stride,   pad,      dilation};
    const int out_c = weight.dim(0);
    require(weight.dim(1) == g.channels, "conv2d: weight expects " +
                                             std::to_string(weight.dim(1)) + " channels, input has " +
                                             std::to_string(g.channels));
    require(g.out_height() > 0 && g.out_width() > 0, "conv2d: empty output");
    const bool has_bias = bias.defined();
    const int oh = g.out_height(), ow = g.out_width();
    const int ck = g.col_rows(), hw = g.col_cols();

    const bool pointwise = g.kernel_h == 1 && g.kernel_w == 1 && stride == 1 && pad == 0;
    auto cols = std::make_shared<Tensor>();
    const Real* col_ptr = x.value().data();
    if (!pointwise) {
        *cols = Tensor({ck, hw});
        kernels::parallel::im2col(g, x.value().data(), cols->data());
        col_ptr = cols->data();
    }
    Tensor out({out_c, oh, ow});
    kernels::parallel::gemm(false, false, out_c, hw, ck, weight.value().data(), col_ptr,
                            out.data(), false);
    if (has_bias) {
        for (int o = 0; o < out_c; ++o) {
            Real* row = out.data() + static_cast<std::size_t>(o) * hw;
            const Real bv = bias.value()[o];
            for (int i = 0; i < hw; ++i) row[i] += bv;
        }
    }
    std::vector<Var> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    if (!grad_enabled()) return Var(std::move(out));
    return make_result(std::move(out), inputs,
                       [g, out_c, ck, hw, has_bias, pointwise, cols](Node& self) {
                           Node& xn = input(self, 0);
                           Node& wn = input(self, 1);
                           const Real* col_ptr = pointwise ? xn.value.data() : cols->data();
                           if (wn.requires_grad) {
                               Tensor gw(wn.value.shape());
                               kernels::parallel::gemm(false, true, out_c, ck, hw, self.grad.data(),
                                                       col_ptr, gw.data(), false);
                               accumulate(wn, gw);
                           }
                           if (xn.requires_grad) {
                               Tensor gcols({ck, hw});
                               kernels::parallel::gemm(true, false, ck, hw, out_c, wn.value.data(),
                                                       self.grad.data(), gcols.data(), false);
                               if (pointwise) {
                                   accumulate(xn, gcols.reshaped(xn.value.shape()));
                               } else {
                                   Tensor gx(xn.value.shape());
                                   kernels::parallel::col2im(g, gcols.data(), gx.data());
                                   accumulate(xn, gx);
                               }
                           }
                           if (has_bias && self.inputs[2]->requires_grad) {
                               Tensor gb(self.inputs[2]->value.shape());
                               for (int o = 0; o < out_c; ++o) {
                                   Real s = 0;
                                   const Real* row = self.grad.data() + static_cast<std::size_t>(o) * hw;
                                   for (int i = 0; i < hw; ++i) s += row[i];
                                   gb[o] = s;
                               }
                               accumulate(*self.inputs[2], gb);
                           }
                       });
}

Var window_mean(const Var& x, int window_h, int window_w)
{
    require_rank(x, 3, "window_mean");
    require(window_h > 0 && window_w > 0, "window_mean: window must be positive");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int gh = kernels::window_count(h, window_h);
    const int gw = kernels::window_count(w, window_w);
    Tensor out({c, gh, gw});
    kernels::parallel::window_mean(c, h, w, window_h, window_w, x.value().data(), out.data());
    return make_result(std::move(out), {x}, [c, h, w, window_h, window_w](Node& self) {
        Tensor g({c, h, w});
        kernels::parallel::window_mean_backward(c, h, w, window_h, window_w, self.grad.data(),
                                                g.data());
        acc_input(self, 0, g);
    });
}

Var resize_bilinear(const Var& x, int out_h, int out_w)
{
    require_rank(x, 3, "resize_bilinear");
    require(out_h > 0 && out_w > 0, "resize_bilinear: target must be positive");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h == out_h && w == out_w) return x;
    Tensor out({c, out_h, out_w});
    kernels::parallel::resize_bilinear(c, h, w, out_h, out_w, x.value().data(), out.data());
    return make_result(std::move(out), {x}, [c, h, w, out_h, out_w](Node& self) {
        Tensor g({c, h, w});
        kernels::parallel::resize_bilinear_backward(c, h, w, out_h, out_w, self.grad.data(),
                                                    g.data());
        acc_input(self, 0, g);
    });
}

// ---------------------------------------------------- normalization/reduction

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps)
{
    require_rank(x, 2, "layer_norm");
    const int n = x.dim(0), d = x.dim(1);
    require(gamma.value().size() == static_cast<std::size_t>(d) &&
                beta.value().size() == static_cast<std::size_t>(d),
            "layer_norm: affine size mismatch");
    auto xhat = std::make_shared<Tensor>(x.value().shape());
    auto inv_std = std::make_shared<std::vector<Real>>(n);
    Tensor out({n, d});
    for (int r = 0; r < n; ++r) {
        const Real* row = x.value().data() + static_cast<std::size_t>(r) * d;
        Real mean = 0;
        for (int c = 0; c < d; ++c) mean += row[c];
        mean /= d;
        Real var = 0;
        for (int c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= d;
        const Real is = 1 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (int c = 0; c < d; ++c) {
            const Real xh = (row[c] - mean) * is;
            (*xhat)[static_cast<std::size_t>(r) * d + c] = xh;
            out[static_cast<std::size_t>(r) * d + c] = xh * gamma.value()[c] + beta.value()[c];
        }
    }
    return make_result(std::move(out), {x, gamma, beta}, [n, d, xhat, inv_std](Node& self) {
        const Tensor& gv = input(self, 1).value;
        if (self.inputs[1]->requires_grad || self.inputs[2]->requires_grad) {
            Tensor gg(gv.shape());
            Tensor gb(gv.shape());
            for (int r = 0; r < n; ++r) {
                for (int c = 0; c < d; ++c) {
                    const std::size_t i = static_cast<std::size_t>(r) * d + c;
                    gg[c] += self.grad[i] * (*xhat)[i];
                    gb[c] += self.grad[i];
                }
            }
            acc_input(self, 1, gg);
            acc_input(self, 2, gb);
        }
        if (self.inputs[0]->requires_grad) {
            Tensor gx({n, d});
            for (int r = 0; r < n; ++r) {
                Real mean_g = 0;
                Real mean_gx = 0;
                for (int c = 0; c < d; ++c) {
                    const std::size_t i = static_cast<std::size_t>(r) * d + c;
                    const Real dxh = self.grad[i] * gv[c];
                    mean_g += dxh;
                    mean_gx += dxh * (*xhat)[i];
                }
                mean_g /= d;
                mean_gx /= d;
                for (int c = 0; c < d; ++c) {
                    const std::size_t i = static_cast<std::size_t>(r) * d + c;
                    const Real dxh = self.grad[i] * gv[c];
                    gx[i] = (*inv_std)[r] * (dxh - mean_g - (*xhat)[i] * mean_gx);
                }
            }
            accumulate(*self.inputs[0], gx);
        }
    });
}

Var softmax_rows(const Var& x)
{
    require_rank(x, 2, "softmax_rows");
    const int n = x.dim(0), m = x.dim(1);
    Tensor out({n, m});
    for (int r = 0; r < n; ++r) {
        const Real* row = x.value().data() + static_cast<std::size_t>(r) * m;
        Real* dst = out.data() + static_cast<std::size_t>(r) * m;
        const Real mx = *std::max_element(row, row + m);
        Real s = 0;
        for (int c = 0; c < m; ++c) {
            dst[c] = std::exp(row[c] - mx);
            s += dst[c];
        }
        for (int c = 0; c < m; ++c) dst[c] /= s;
    }
    return make_result(std::move(out), {x}, [n, m](Node& self) {
        // y is recomputed from the stored output: self.value
        Tensor g({n, m});
        for (int r = 0; r < n; ++r) {
            const Real* y = self.value.data() + static_cast<std::size_t>(r) * m;
            const Real* gy = self.grad.data() + static_cast<std::size_t>(r) * m;
            Real dot = 0;
            for (int c = 0; c < m; ++c) dot += gy[c] * y[c];
            for (int c = 0; c < m; ++c) g[static_cast<std::size_t>(r) * m + c] = y[c] * (gy[c] - dot);
        }
        acc_input(self, 0, g);
    });
}

Var softmax_leading(const Var& x)
{
    require(x.defined() && x.value().rank() >= 1, "softmax_leading: bad input");
    const int c = x.dim(0);
    const std::size_t plane = x.value().size() / std::max(c, 1);
    Tensor out(x.value().shape());
    const Real* in = x.value().data();
    for (std::size_t i = 0; i < plane; ++i) {
        Real mx = in[i];
        for (int k = 1; k < c; ++k) mx = std::max(mx, in[k * plane + i]);
        Real s = 0;
        for (int k = 0; k < c; ++k) {
            const Real e = std::exp(in[k * plane + i] - mx);
            out[k * plane + i] = e;
            s += e;
        }
        for (int k = 0; k < c; ++k) out[k * plane + i] /= s;
    }
    return make_result(std::move(out), {x}, [c, plane](Node& self) {
        Tensor g(self.value.shape());
        for (std::size_t i = 0; i < plane; ++i) {
            Real dot = 0;
            for (int k = 0; k < c; ++k) dot += self.grad[k * plane + i] * self.value[k * plane + i];
            for (int k = 0; k < c; ++k) {
                g[k * plane + i] = self.value[k * plane + i] * (self.grad[k * plane + i] - dot);
            }
        }
        acc_input(self, 0, g);
    });
}

Var sum_leading(const Var& x)
{
    require(x.defined() && x.value().rank() >= 2, "sum_leading: rank must be >= 2");
    const int c = x.dim(0);
    std::vector<int> shape(x.shape().begin() + 1, x.shape().end());
    Tensor out(shape);
    const std::size_t plane = out.size();
    for (int k = 0; k < c; ++k) {
        for (std::size_t i = 0; i < plane; ++i) out[i] += x.value()[k * plane + i];
    }
    return make_result(std::move(out), {x}, [c, plane](Node& self) {
        Tensor g(self.inputs[0]->value.shape());
        for (int k = 0; k < c; ++k) {
            std::copy_n(self.grad.data(), plane, g.data() + k * plane);
        }
        acc_input(self, 0, g);
    });
}

Var sum_all(const Var& x)
{
    Real s = 0;
    for (Real v : x.value().values()) s += v;
    return make_result(Tensor({1}, {s}), {x}, [](Node& self) {
        Tensor g(self.inputs[0]->value.shape(), self.grad[0]);
        acc_input(self, 0, g);
    });
}

Var add_scalars(const Var& a, const Var& b)
{
    require(a.value().size() == 1 && b.value().size() == 1, "add_scalars: inputs must be scalars");
    return make_result(Tensor({1}, {a.value()[0] + b.value()[0]}), {a, b}, [](Node& self) {
        acc_input(self, 0, Tensor(self.inputs[0]->value.shape(), self.grad[0]));
        acc_input(self, 1, Tensor(self.inputs[1]->value.shape(), self.grad[0]));
    });
}

// ------------------------------------------------ prototype-network primitives

Var masked_mean(const Var& features, const Tensor& weights)
{
    require_rank(features, 3, "masked_mean");
    const int d = features.dim(0), h = features.dim(1), w = features.dim(2);
    require(weights.size() == static_cast<std::size_t>(h) * w,
            "masked_mean: weight map " + weights.shape_str() + " does not match features " +
                features.value().shape_str());
    Real wsum = 0;
    for (Real v : weights.values()) wsum += v;
    require(wsum > 0, "masked_mean: mask has no weight");
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Tensor out({d});
    for (int k = 0; k < d; ++k) {
        const Real* plane = features.value().data() + k * hw;
        Real s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += weights[i] * plane[i];
        out[k] = s / wsum;
    }
    auto wcopy = std::make_shared<Tensor>(weights);
    return make_result(std::move(out), {features}, [d, hw, wsum, wcopy](Node& self) {
        Tensor g(self.inputs[0]->value.shape());
        for (int k = 0; k < d; ++k) {
            const Real gk = self.grad[k] / wsum;
            Real* plane = g.data() + k * hw;
            for (std::size_t i = 0; i < hw; ++i) plane[i] = gk * (*wcopy)[i];
        }
        acc_input(self, 0, g);
    });
}

Var gather_cells(const Var& grid, const std::vector<std::pair<int, int>>& cells)
{
    require_rank(grid, 3, "gather_cells");
    const int d = grid.dim(0), gh = grid.dim(1), gw = grid.dim(2);
    for (const auto& [m, n] : cells) {
        require(m >= 0 && m < gh && n >= 0 && n < gw, "gather_cells: cell out of range");
    }
    const int p = static_cast<int>(cells.size());
    Tensor out({p, d});
    for (int i = 0; i < p; ++i) {
        for (int k = 0; k < d; ++k) out[static_cast<std::size_t>(i) * d + k] = grid.value().at(k, cells[i].first, cells[i].second);
    }
    return make_result(std::move(out), {grid}, [cells, d](Node& self) {
        Tensor g(self.inputs[0]->value.shape());
        for (std::size_t i = 0; i < cells.size(); ++i) {
            for (int k = 0; k < d; ++k) g.at(k, cells[i].first, cells[i].second) += self.grad[i * d + k];
        }
        acc_input(self, 0, g);
    });
}

Var cosine_maps(const Var& protos, const Var& features, Real scale_factor, Real eps)
{
    require_rank(protos, 2, "cosine_maps protos");
    require_rank(features, 3, "cosine_maps features");
    const int p = protos.dim(0), d = protos.dim(1);
    const int h = features.dim(1), w = features.dim(2);
    require(features.dim(0) == d, "cosine_maps: prototype dimension " + std::to_string(d) +
                                      " != feature channels " + std::to_string(features.dim(0)));
    Tensor out({p, h, w});
    kernels::parallel::cosine_maps(p, d, h * w, protos.value().data(), features.value().data(),
                                   scale_factor, eps, out.data());
    return make_result(std::move(out), {protos, features}, [p, d, h, w, scale_factor, eps](Node& self) {
        Node& pn = input(self, 0);
        Node& fn = input(self, 1);
        Tensor gp(pn.value.shape());
        Tensor gf(fn.value.shape());
        kernels::parallel::cosine_maps_backward(p, d, h * w, pn.value.data(), fn.value.data(),
                                                scale_factor, eps, self.grad.data(), gp.data(),
                                                gf.data());
        acc_input(self, 0, gp);
        acc_input(self, 1, gf);
    });
}

Var cross_entropy(const Var& probs, const Tensor& target, Real eps)
{
    require(probs.defined() && probs.value().rank() == 3, "cross_entropy: probs must be [J,H,W]");
    require(probs.value().same_shape(target), "cross_entropy: target " + target.shape_str() +
                                                  " does not match prediction " +
                                                  probs.value().shape_str());
    const std::size_t pixels = static_cast<std::size_t>(probs.dim(1)) * probs.dim(2);
    Real loss = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i] != 0) loss -= target[i] * std::log(std::max(probs.value()[i], eps));
    }
    loss /= static_cast<Real>(pixels);
    auto t = std::make_shared<Tensor>(target);
    return make_result(Tensor({1}, {loss}), {probs}, [t, pixels, eps](Node& self) {
        const Tensor& pv = self.inputs[0]->value;
        Tensor g(pv.shape());
        const Real s = self.grad[0] / static_cast<Real>(pixels);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if ((*t)[i] != 0 && pv[i] > eps) g[i] = -s * (*t)[i] / pv[i];
        }
        acc_input(self, 0, g);
    });
}

}  // namespace protoseg::ad
