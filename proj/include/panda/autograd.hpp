#pragma once

// Reverse-mode autodiff over dense tensors. Each op returns a Var holding the
// result and a closure that routes the upstream gradient to its parents.
// Graphs are rebuilt per forward pass and freed once the root Var dies.
// Everything is templated on the scalar so the same network code runs in
// float for training and double for finite-difference verification.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "panda/tensor.hpp"

namespace panda::ag {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>::zeros(value.shape());
    }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
inline void accum_grad(const NodePtr<T>& p, const Tensor<T>& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad.add_(g);
}

template <typename T>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<T> v, bool requires_grad = false) : n_(std::make_shared<Node<T>>()) {
        n_->value = std::move(v);
        n_->requires_grad = requires_grad;
    }

    static Var from_node(NodePtr<T> n) {
        Var v;
        v.n_ = std::move(n);
        return v;
    }

    bool defined() const { return n_ != nullptr; }
    const Tensor<T>& value() const { return n_->value; }
    Tensor<T>& value() { return n_->value; }
    const Tensor<T>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    NodePtr<T> node() const { return n_; }

    void zero_grad() {
        if (n_) {
            n_->ensure_grad();
            n_->grad.fill(T(0));
        }
    }

    Var detach() const {
        Var v(n_->value, false);
        return v;
    }

private:
    NodePtr<T> n_;
};

// ---------------------------------------------------------------------------
// graph walk
// ---------------------------------------------------------------------------

template <typename T>
inline std::vector<Node<T>*> topo_order(const NodePtr<T>& root) {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // iterative post-order DFS
    std::vector<std::pair<Node<T>*, size_t>> stack;
    if (seen.insert(root.get()).second) stack.emplace_back(root.get(), 0);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

template <typename T>
inline void backward(const Var<T>& root) {
    if (root.value().numel() != 1)
        raise(ErrorCode::Internal, "backward root must be scalar");
    auto order = topo_order(root.node());
    root.node()->ensure_grad();
    root.node()->grad.fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

template <typename T>
inline NodePtr<T> make_op(Tensor<T> value, std::vector<NodePtr<T>> parents,
                          std::function<void(Node<T>&)> backward_fn) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    n->parents = std::move(parents);
    if (rg) n->backward_fn = std::move(backward_fn);
    return n;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.value().shape(), b.value().shape(), "add");
    Tensor<T> out = a.value();
    out.add_(b.value());
    auto pa = a.node(), pb = b.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
        accum_grad(pa, n.grad);
        accum_grad(pb, n.grad);
    }));
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.value().shape(), b.value().shape(), "sub");
    Tensor<T> out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    auto pa = a.node(), pb = b.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
        accum_grad(pa, n.grad);
        if (pb->requires_grad) {
            Tensor<T> g = n.grad;
            g.scale_(T(-1));
            accum_grad(pb, g);
        }
    }));
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.value().shape(), b.value().shape(), "mul");
    Tensor<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    auto pa = a.node(), pb = b.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa, pb}, [pa, pb](Node<T>& n) {
        if (pa->requires_grad) {
            Tensor<T> g(n.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * pb->value[i];
            accum_grad(pa, g);
        }
        if (pb->requires_grad) {
            Tensor<T> g(n.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * pa->value[i];
            accum_grad(pb, g);
        }
    }));
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a.value();
    out.scale_(s);
    auto pa = a.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa}, [pa, s](Node<T>& n) {
        Tensor<T> g = n.grad;
        g.scale_(s);
        accum_grad(pa, g);
    }));
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    return scale(a, T(-1));
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
    Tensor<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        T v = a.value()[i];
        out[i] = v > T(0) ? v : slope * v;
    }
    auto pa = a.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa}, [pa, slope](Node<T>& n) {
        Tensor<T> g(n.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i)
            g[i] = n.grad[i] * (pa->value[i] > T(0) ? T(1) : slope);
        accum_grad(pa, g);
    }));
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    return leaky_relu(a, T(0));
}

template <typename T>
Var<T> tanh_op(const Var<T>& a) {
    Tensor<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(a.value()[i]);
    auto pa = a.node();
    auto n = make_op<T>(std::move(out), {pa}, nullptr);
    if (n->requires_grad) {
        NodePtr<T> self_weak = n;  // safe: closure lives on the node itself
        n->backward_fn = [pa](Node<T>& nd) {
            Tensor<T> g(nd.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) {
                T y = nd.value[i];
                g[i] = nd.grad[i] * (T(1) - y * y);
            }
            accum_grad(pa, g);
        };
    }
    return Var<T>::from_node(n);
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        double v = static_cast<double>(a.value()[i]);
        out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-v)));
    }
    auto pa = a.node();
    auto n = make_op<T>(std::move(out), {pa}, nullptr);
    if (n->requires_grad) {
        n->backward_fn = [pa](Node<T>& nd) {
            Tensor<T> g(nd.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) {
                T y = nd.value[i];
                g[i] = nd.grad[i] * y * (T(1) - y);
            }
            accum_grad(pa, g);
        };
    }
    return Var<T>::from_node(n);
}

template <typename T>
Var<T> exp_op(const Var<T>& a) {
    Tensor<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(a.value()[i]);
    auto pa = a.node();
    auto n = make_op<T>(std::move(out), {pa}, nullptr);
    if (n->requires_grad) {
        n->backward_fn = [pa](Node<T>& nd) {
            Tensor<T> g(nd.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = nd.grad[i] * nd.value[i];
            accum_grad(pa, g);
        };
    }
    return Var<T>::from_node(n);
}

// log of x clamped to [eps, 1-eps]; gradient is zero in the clamped region
template <typename T>
Var<T> log_clamped(const Var<T>& a, T eps) {
    Tensor<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        T v = std::min(std::max(a.value()[i], eps), T(1) - eps);
        out[i] = std::log(v);
    }
    auto pa = a.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa}, [pa, eps](Node<T>& n) {
        Tensor<T> g(n.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
            T v = pa->value[i];
            g[i] = (v > eps && v < T(1) - eps) ? n.grad[i] / v : T(0);
        }
        accum_grad(pa, g);
    }));
}

// log(1 - x) with the same clamping rule
template <typename T>
Var<T> log_one_minus_clamped(const Var<T>& a, T eps) {
    Tensor<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        T v = std::min(std::max(T(1) - a.value()[i], eps), T(1) - eps);
        out[i] = std::log(v);
    }
    auto pa = a.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa}, [pa, eps](Node<T>& n) {
        Tensor<T> g(n.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
            T v = T(1) - pa->value[i];
            g[i] = (v > eps && v < T(1) - eps) ? -n.grad[i] / v : T(0);
        }
        accum_grad(pa, g);
    }));
}

// sign(x) * (sqrt(|x|+eps) - sqrt(eps)): the classic signed square root made
// continuous through zero so the map stays differentiable-in-practice
template <typename T>
Var<T> signed_sqrt(const Var<T>& a, T eps) {
    Tensor<T> out(a.value().shape());
    T root_eps = std::sqrt(eps);
    for (int64_t i = 0; i < out.numel(); ++i) {
        T v = a.value()[i];
        T s = v >= T(0) ? T(1) : T(-1);
        out[i] = s * (std::sqrt(std::abs(v) + eps) - root_eps);
    }
    auto pa = a.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa}, [pa, eps](Node<T>& n) {
        Tensor<T> g(n.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i)
            g[i] = n.grad[i] / (T(2) * std::sqrt(std::abs(pa->value[i]) + eps));
        accum_grad(pa, g);
    }));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(a.value().sum()));
    auto pa = a.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa}, [pa](Node<T>& n) {
        Tensor<T> g(pa->value.shape(), n.grad[0]);
        accum_grad(pa, g);
    }));
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    T inv = T(1) / static_cast<T>(a.value().numel());
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(a.value().sum()) * inv);
    auto pa = a.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa}, [pa, inv](Node<T>& n) {
        Tensor<T> g(pa->value.shape(), n.grad[0] * inv);
        accum_grad(pa, g);
    }));
}

// mean over the batch of per-sample L2 norms; dim 0 is the batch
template <typename T>
Var<T> batch_l2_mean(const Var<T>& a) {
    int n_batch = a.value().dim(0);
    int64_t per = a.value().numel() / n_batch;
    std::vector<T> norms(static_cast<size_t>(n_batch));
    double total = 0;
    for (int n = 0; n < n_batch; ++n) {
        double s = 0;
        const T* p = a.value().data() + int64_t(n) * per;
        for (int64_t i = 0; i < per; ++i) s += double(p[i]) * double(p[i]);
        norms[size_t(n)] = static_cast<T>(std::sqrt(s));
        total += std::sqrt(s);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / n_batch));
    auto pa = a.node();
    return Var<T>::from_node(
        make_op<T>(std::move(out), {pa}, [pa, norms, n_batch, per](Node<T>& n) {
            Tensor<T> g(pa->value.shape());
            T scale = n.grad[0] / static_cast<T>(n_batch);
            for (int b = 0; b < n_batch; ++b) {
                if (norms[size_t(b)] <= T(0)) continue;
                T inv = scale / norms[size_t(b)];
                const T* src = pa->value.data() + int64_t(b) * per;
                T* dst = g.data() + int64_t(b) * per;
                for (int64_t i = 0; i < per; ++i) dst[i] = src[i] * inv;
            }
            accum_grad(pa, g);
        }));
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
    Tensor<T> out = a.value().reshaped(s);
    auto pa = a.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {pa}, [pa](Node<T>& n) {
        accum_grad(pa, n.grad.reshaped(pa->value.shape()));
    }));
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.value().shape();
    const auto& sb = b.value().shape();
    if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        raise(ErrorCode::ShapeMismatch,
              "concat_channels " + shape_str(sa) + " vs " + shape_str(sb));
    int N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
    Tensor<T> out(Shape{N, Ca + Cb, H, W});
    int64_t hw = int64_t(H) * W;
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.value().data() + int64_t(n) * Ca * hw, Ca * hw,
                    out.data() + int64_t(n) * (Ca + Cb) * hw);
        std::copy_n(b.value().data() + int64_t(n) * Cb * hw, Cb * hw,
                    out.data() + int64_t(n) * (Ca + Cb) * hw + Ca * hw);
    }
    auto pa = a.node(), pb = b.node();
    return Var<T>::from_node(
        make_op<T>(std::move(out), {pa, pb}, [pa, pb, N, Ca, Cb, hw](Node<T>& n) {
            if (pa->requires_grad) {
                Tensor<T> g(pa->value.shape());
                for (int b = 0; b < N; ++b)
                    std::copy_n(n.grad.data() + int64_t(b) * (Ca + Cb) * hw, Ca * hw,
                                g.data() + int64_t(b) * Ca * hw);
                accum_grad(pa, g);
            }
            if (pb->requires_grad) {
                Tensor<T> g(pb->value.shape());
                for (int b = 0; b < N; ++b)
                    std::copy_n(n.grad.data() + int64_t(b) * (Ca + Cb) * hw + Ca * hw, Cb * hw,
                                g.data() + int64_t(b) * Cb * hw);
                accum_grad(pb, g);
            }
        }));
}

// ---------------------------------------------------------------------------
// im2col plumbing shared by conv and transposed conv
// ---------------------------------------------------------------------------

template <typename T>
inline void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int OH, int OW, T* col) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                int row = (c * kh + ki) * kw + kj;
                T* dst = col + int64_t(row) * OH * OW;
                for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        std::fill_n(dst + int64_t(oh) * OW, OW, T(0));
                        continue;
                    }
                    const T* src = x + (int64_t(c) * H + ih) * W;
                    T* d = dst + int64_t(oh) * OW;
                    for (int ow = 0; ow < OW; ++ow) {
                        int iw = ow * stride - pad + kj;
                        d[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
inline void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int OH, int OW, T* x) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                int row = (c * kh + ki) * kw + kj;
                const T* src = col + int64_t(row) * OH * OW;
                for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    T* dst = x + (int64_t(c) * H + ih) * W;
                    const T* s = src + int64_t(oh) * OW;
                    for (int ow = 0; ow < OW; ++ow) {
                        int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < W) dst[iw] += s[ow];
                    }
                }
            }
        }
    }
}

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

inline int convt_out_dim(int in, int k, int stride, int pad) {
    return (in - 1) * stride - 2 * pad + k;
}

// x: [N, Cin, H, W], w: [Cout, Cin, kh, kw], b: [Cout] (may be undefined)
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    const auto& xs = x.value().shape();
    const auto& ws = w.value().shape();
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
        raise(ErrorCode::ShapeMismatch, "conv2d x " + shape_str(xs) + " w " + shape_str(ws));
    int N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    int Cout = ws[0], kh = ws[2], kw = ws[3];
    int OH = conv_out_dim(H, kh, stride, pad), OW = conv_out_dim(W, kw, stride, pad);
    if (OH <= 0 || OW <= 0) raise(ErrorCode::ShapeMismatch, "conv2d output would be empty");
    int K = Cin * kh * kw;
    int64_t ohw = int64_t(OH) * OW;

    Tensor<T> out(Shape{N, Cout, OH, OW});
    auto cols = std::make_shared<Tensor<T>>(Shape{N, K, OH, OW});
    CMapM<T> wm(w.value().data(), Cout, K);
    for (int n = 0; n < N; ++n) {
        T* col = cols->data() + int64_t(n) * K * ohw;
        im2col(x.value().data() + int64_t(n) * Cin * H * W, Cin, H, W, kh, kw, stride, pad, OH,
               OW, col);
        CMapM<T> cm(col, K, ohw);
        MapM<T> om(out.data() + int64_t(n) * Cout * ohw, Cout, ohw);
        om.noalias() = wm * cm;
    }
    if (b.defined()) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < Cout; ++c) {
                T bias = b.value()[c];
                T* p = out.data() + (int64_t(n) * Cout + c) * ohw;
                for (int64_t i = 0; i < ohw; ++i) p[i] += bias;
            }
    }

    auto px = x.node(), pw = w.node();
    auto pb = b.defined() ? b.node() : nullptr;
    std::vector<NodePtr<T>> parents{px, pw};
    if (pb) parents.push_back(pb);
    return Var<T>::from_node(make_op<T>(
        std::move(out), std::move(parents),
        [px, pw, pb, cols, N, Cin, H, W, Cout, kh, kw, stride, pad, OH, OW, K,
         ohw](Node<T>& nd) {
            CMapM<T> wm(pw->value.data(), Cout, K);
            Tensor<T> dw_acc;
            bool need_dw = pw->requires_grad;
            if (need_dw) dw_acc = Tensor<T>::zeros(pw->value.shape());
            Tensor<T> dx_acc;
            bool need_dx = px->requires_grad;
            if (need_dx) dx_acc = Tensor<T>::zeros(px->value.shape());
            Tensor<T> dcol(Shape{K, OH, OW});
            for (int n = 0; n < N; ++n) {
                CMapM<T> gm(nd.grad.data() + int64_t(n) * Cout * ohw, Cout, ohw);
                const T* col = cols->data() + int64_t(n) * K * ohw;
                CMapM<T> cm(col, K, ohw);
                if (need_dw) {
                    MapM<T> dwm(dw_acc.data(), Cout, K);
                    dwm.noalias() += gm * cm.transpose();
                }
                if (need_dx) {
                    MapM<T> dcm(dcol.data(), K, ohw);
                    dcm.noalias() = wm.transpose() * gm;
                    col2im_add(dcol.data(), Cin, H, W, kh, kw, stride, pad, OH, OW,
                               dx_acc.data() + int64_t(n) * Cin * H * W);
                }
            }
            if (need_dw) accum_grad(pw, dw_acc);
            if (need_dx) accum_grad(px, dx_acc);
            if (pb && pb->requires_grad) {
                Tensor<T> db(Shape{Cout});
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < Cout; ++c) {
                        const T* p = nd.grad.data() + (int64_t(n) * Cout + c) * ohw;
                        double s = 0;
                        for (int64_t i = 0; i < ohw; ++i) s += double(p[i]);
                        db[c] += static_cast<T>(s);
                    }
                accum_grad(pb, db);
            }
        }));
}

// x: [N, Cin, H, W], w: [Cin, Cout, kh, kw], b: [Cout]
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
    const auto& xs = x.value().shape();
    const auto& ws = w.value().shape();
    if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[0])
        raise(ErrorCode::ShapeMismatch,
              "conv_transpose2d x " + shape_str(xs) + " w " + shape_str(ws));
    int N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    int Cout = ws[1], kh = ws[2], kw = ws[3];
    int OH = convt_out_dim(H, kh, stride, pad), OW = convt_out_dim(W, kw, stride, pad);
    int K = Cout * kh * kw;
    int64_t ihw = int64_t(H) * W;
    int64_t ohw = int64_t(OH) * OW;

    Tensor<T> out(Shape{N, Cout, OH, OW});
    Tensor<T> col(Shape{K, H, W});
    CMapM<T> wm(w.value().data(), Cin, K);
    for (int n = 0; n < N; ++n) {
        CMapM<T> xm(x.value().data() + int64_t(n) * Cin * ihw, Cin, ihw);
        MapM<T> cm(col.data(), K, ihw);
        cm.noalias() = wm.transpose() * xm;
        col2im_add(col.data(), Cout, OH, OW, kh, kw, stride, pad, H, W,
                   out.data() + int64_t(n) * Cout * ohw);
    }
    if (b.defined()) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < Cout; ++c) {
                T bias = b.value()[c];
                T* p = out.data() + (int64_t(n) * Cout + c) * ohw;
                for (int64_t i = 0; i < ohw; ++i) p[i] += bias;
            }
    }

    auto px = x.node(), pw = w.node();
    auto pb = b.defined() ? b.node() : nullptr;
    std::vector<NodePtr<T>> parents{px, pw};
    if (pb) parents.push_back(pb);
    return Var<T>::from_node(make_op<T>(
        std::move(out), std::move(parents),
        [px, pw, pb, N, Cin, H, W, Cout, kh, kw, stride, pad, OH, OW, K, ihw,
         ohw](Node<T>& nd) {
            Tensor<T> dcol(Shape{K, H, W});
            Tensor<T> dw_acc;
            bool need_dw = pw->requires_grad;
            if (need_dw) dw_acc = Tensor<T>::zeros(pw->value.shape());
            Tensor<T> dx_acc;
            bool need_dx = px->requires_grad;
            if (need_dx) dx_acc = Tensor<T>::zeros(px->value.shape());
            CMapM<T> wm(pw->value.data(), Cin, K);
            for (int n = 0; n < N; ++n) {
                // gather upstream grad into column form: this is im2col over the output
                im2col(nd.grad.data() + int64_t(n) * Cout * ohw, Cout, OH, OW, kh, kw, stride,
                       pad, H, W, dcol.data());
                CMapM<T> dcm(dcol.data(), K, ihw);
                if (need_dx) {
                    MapM<T> dxm(dx_acc.data() + int64_t(n) * Cin * ihw, Cin, ihw);
                    dxm.noalias() = wm * dcm;
                }
                if (need_dw) {
                    CMapM<T> xm(px->value.data() + int64_t(n) * Cin * ihw, Cin, ihw);
                    MapM<T> dwm(dw_acc.data(), Cin, K);
                    dwm.noalias() += xm * dcm.transpose();
                }
            }
            if (need_dw) accum_grad(pw, dw_acc);
            if (need_dx) accum_grad(px, dx_acc);
            if (pb && pb->requires_grad) {
                Tensor<T> db(Shape{Cout});
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < Cout; ++c) {
                        const T* p = nd.grad.data() + (int64_t(n) * Cout + c) * ohw;
                        double s = 0;
                        for (int64_t i = 0; i < ohw; ++i) s += double(p[i]);
                        db[c] += static_cast<T>(s);
                    }
                accum_grad(pb, db);
            }
        }));
}

// x: [N, F], w: [O, F], b: [O]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& xs = x.value().shape();
    const auto& ws = w.value().shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
        raise(ErrorCode::ShapeMismatch, "linear x " + shape_str(xs) + " w " + shape_str(ws));
    int N = xs[0], F = xs[1], O = ws[0];
    Tensor<T> out(Shape{N, O});
    CMapM<T> xm(x.value().data(), N, F);
    CMapM<T> wm(w.value().data(), O, F);
    MapM<T> om(out.data(), N, O);
    om.noalias() = xm * wm.transpose();
    if (b.defined())
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < O; ++o) out[int64_t(n) * O + o] += b.value()[o];

    auto px = x.node(), pw = w.node();
    auto pb = b.defined() ? b.node() : nullptr;
    std::vector<NodePtr<T>> parents{px, pw};
    if (pb) parents.push_back(pb);
    return Var<T>::from_node(
        make_op<T>(std::move(out), std::move(parents), [px, pw, pb, N, F, O](Node<T>& nd) {
            CMapM<T> gm(nd.grad.data(), N, O);
            if (px->requires_grad) {
                Tensor<T> dx(Shape{N, F});
                MapM<T> dxm(dx.data(), N, F);
                CMapM<T> wm(pw->value.data(), O, F);
                dxm.noalias() = gm * wm;
                accum_grad(px, dx);
            }
            if (pw->requires_grad) {
                Tensor<T> dw(Shape{O, F});
                MapM<T> dwm(dw.data(), O, F);
                CMapM<T> xm(px->value.data(), N, F);
                dwm.noalias() = gm.transpose() * xm;
                accum_grad(pw, dw);
            }
            if (pb && pb->requires_grad) {
                Tensor<T> db(Shape{O});
                for (int n = 0; n < N; ++n)
                    for (int o = 0; o < O; ++o) db[o] += nd.grad[int64_t(n) * O + o];
                accum_grad(pb, db);
            }
        }));
}

// ---------------------------------------------------------------------------
// pooling / attention
// ---------------------------------------------------------------------------

template <typename T>
Var<T> maxpool2d(const Var<T>& x, int k, int stride) {
    const auto& xs = x.value().shape();
    int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    int OH = (H - k) / stride + 1, OW = (W - k) / stride + 1;
    Tensor<T> out(Shape{N, C, OH, OW});
    auto argmax = std::make_shared<std::vector<int64_t>>(out.numel());
    int64_t oi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow, ++oi) {
                    T best = -std::numeric_limits<T>::infinity();
                    int64_t bi = -1;
                    for (int ki = 0; ki < k; ++ki)
                        for (int kj = 0; kj < k; ++kj) {
                            int ih = oh * stride + ki, iw = ow * stride + kj;
                            int64_t idx = ((int64_t(n) * C + c) * H + ih) * W + iw;
                            if (x.value()[idx] > best) {
                                best = x.value()[idx];
                                bi = idx;
                            }
                        }
                    out[oi] = best;
                    (*argmax)[size_t(oi)] = bi;
                }
    auto px = x.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {px}, [px, argmax](Node<T>& nd) {
        Tensor<T> g(px->value.shape());
        for (int64_t i = 0; i < nd.grad.numel(); ++i)
            g[(*argmax)[size_t(i)]] += nd.grad[i];
        accum_grad(px, g);
    }));
}

// max over everything but the batch dim: [N, ...] -> [N]
template <typename T>
Var<T> global_max(const Var<T>& x) {
    int N = x.value().dim(0);
    int64_t per = x.value().numel() / N;
    Tensor<T> out(Shape{N});
    auto argmax = std::make_shared<std::vector<int64_t>>(size_t(N));
    for (int n = 0; n < N; ++n) {
        const T* p = x.value().data() + int64_t(n) * per;
        int64_t bi = 0;
        for (int64_t i = 1; i < per; ++i)
            if (p[i] > p[bi]) bi = i;
        out[n] = p[bi];
        (*argmax)[size_t(n)] = int64_t(n) * per + bi;
    }
    auto px = x.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {px}, [px, argmax, N](Node<T>& nd) {
        Tensor<T> g(px->value.shape());
        for (int n = 0; n < N; ++n) g[(*argmax)[size_t(n)]] += nd.grad[n];
        accum_grad(px, g);
    }));
}

// spatial average: [N, C, H, W] -> [N, C]
template <typename T>
Var<T> spatial_mean(const Var<T>& x) {
    const auto& xs = x.value().shape();
    int N = xs[0], C = xs[1];
    int64_t hw = int64_t(xs[2]) * xs[3];
    Tensor<T> out(Shape{N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = x.value().data() + (int64_t(n) * C + c) * hw;
            double s = 0;
            for (int64_t i = 0; i < hw; ++i) s += double(p[i]);
            out[int64_t(n) * C + c] = static_cast<T>(s / double(hw));
        }
    auto px = x.node();
    return Var<T>::from_node(make_op<T>(std::move(out), {px}, [px, N, C, hw](Node<T>& nd) {
        Tensor<T> g(px->value.shape());
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                T v = nd.grad[int64_t(n) * C + c] / static_cast<T>(hw);
                T* dst = g.data() + (int64_t(n) * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) dst[i] = v;
            }
        accum_grad(px, g);
    }));
}

// bilinear attention pooling, raw part: out[n,m,c] = mean_hw(maps[n,m]*features[n,c])
template <typename T>
Var<T> bap_pool(const Var<T>& features, const Var<T>& maps) {
    const auto& fs = features.value().shape();
    const auto& ms = maps.value().shape();
    if (fs.size() != 4 || ms.size() != 4 || fs[0] != ms[0] || fs[2] != ms[2] || fs[3] != ms[3])
        raise(ErrorCode::ShapeMismatch, "bap_pool f " + shape_str(fs) + " m " + shape_str(ms));
    int N = fs[0], C = fs[1], M = ms[1];
    int64_t hw = int64_t(fs[2]) * fs[3];
    T inv = T(1) / static_cast<T>(hw);
    Tensor<T> out(Shape{N, M, C});
    for (int n = 0; n < N; ++n) {
        CMapM<T> mm(maps.value().data() + int64_t(n) * M * hw, M, hw);
        CMapM<T> fm(features.value().data() + int64_t(n) * C * hw, C, hw);
        MapM<T> om(out.data() + int64_t(n) * M * C, M, C);
        om.noalias() = (mm * fm.transpose()) * inv;
    }
    auto pf = features.node(), pm = maps.node();
    return Var<T>::from_node(
        make_op<T>(std::move(out), {pf, pm}, [pf, pm, N, C, M, hw, inv](Node<T>& nd) {
            for (int n = 0; n < N; ++n) {
                CMapM<T> gm(nd.grad.data() + int64_t(n) * M * C, M, C);
                if (pf->requires_grad) {
                    pf->ensure_grad();
                    CMapM<T> mm(pm->value.data() + int64_t(n) * M * hw, M, hw);
                    MapM<T> dfm(pf->grad.data() + int64_t(n) * C * hw, C, hw);
                    dfm.noalias() += (gm.transpose() * mm) * inv;
                }
                if (pm->requires_grad) {
                    pm->ensure_grad();
                    CMapM<T> fm(pf->value.data() + int64_t(n) * C * hw, C, hw);
                    MapM<T> dmm(pm->grad.data() + int64_t(n) * M * hw, M, hw);
                    dmm.noalias() += (gm * fm) * inv;
                }
            }
        }));
}

// L2-normalizes each trailing row of a [N, M, C] tensor; zero rows stay zero
template <typename T>
Var<T> row_l2_normalize(const Var<T>& x) {
    const auto& xs = x.value().shape();
    int rows = 1;
    for (size_t i = 0; i + 1 < xs.size(); ++i) rows *= xs[i];
    int C = xs.back();
    Tensor<T> out(xs);
    auto norms = std::make_shared<std::vector<T>>(size_t(rows));
    for (int r = 0; r < rows; ++r) {
        const T* p = x.value().data() + int64_t(r) * C;
        double s = 0;
        for (int c = 0; c < C; ++c) s += double(p[c]) * double(p[c]);
        T nrm = static_cast<T>(std::sqrt(s));
        (*norms)[size_t(r)] = nrm;
        T* q = out.data() + int64_t(r) * C;
        if (nrm > T(1e-12)) {
            for (int c = 0; c < C; ++c) q[c] = p[c] / nrm;
        } else {
            std::fill_n(q, C, T(0));
        }
    }
    auto px = x.node();
    return Var<T>::from_node(
        make_op<T>(std::move(out), {px}, [px, norms, rows, C](Node<T>& nd) {
            Tensor<T> g(px->value.shape());
            for (int r = 0; r < rows; ++r) {
                T nrm = (*norms)[size_t(r)];
                if (nrm <= T(1e-12)) continue;
                const T* gr = nd.grad.data() + int64_t(r) * C;
                const T* yr = nd.value.data() + int64_t(r) * C;
                double dot = 0;
                for (int c = 0; c < C; ++c) dot += double(gr[c]) * double(yr[c]);
                T* dst = g.data() + int64_t(r) * C;
                for (int c = 0; c < C; ++c)
                    dst[c] = (gr[c] - yr[c] * static_cast<T>(dot)) / nrm;
            }
            accum_grad(px, g);
        }));
}

// group normalization over [N, C, H, W]; gamma/beta are [C]
template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, T eps) {
    const auto& xs = x.value().shape();
    int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (C % groups != 0) raise(ErrorCode::ShapeMismatch, "group_norm channels % groups != 0");
    int cg = C / groups;
    int64_t glen = int64_t(cg) * H * W;
    int64_t hw = int64_t(H) * W;

    auto xhat = std::make_shared<Tensor<T>>(xs);
    auto inv_std = std::make_shared<std::vector<T>>(size_t(N) * groups);
    Tensor<T> out(xs);
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const T* p = x.value().data() + (int64_t(n) * C + int64_t(g) * cg) * hw;
            double s = 0, s2 = 0;
            for (int64_t i = 0; i < glen; ++i) {
                s += double(p[i]);
                s2 += double(p[i]) * double(p[i]);
            }
            double m = s / double(glen);
            double var = s2 / double(glen) - m * m;
            T istd = static_cast<T>(1.0 / std::sqrt(var + double(eps)));
            (*inv_std)[size_t(n) * groups + g] = istd;
            T* xh = xhat->data() + (int64_t(n) * C + int64_t(g) * cg) * hw;
            for (int64_t i = 0; i < glen; ++i) xh[i] = static_cast<T>((double(p[i]) - m)) * istd;
        }
        for (int c = 0; c < C; ++c) {
            T ga = gamma.value()[c], be = beta.value()[c];
            const T* xh = xhat->data() + (int64_t(n) * C + c) * hw;
            T* o = out.data() + (int64_t(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) o[i] = ga * xh[i] + be;
        }
    }
    auto px = x.node(), pg = gamma.node(), pb = beta.node();
    return Var<T>::from_node(make_op<T>(
        std::move(out), {px, pg, pb},
        [px, pg, pb, xhat, inv_std, N, C, H, W, groups, cg, glen, hw](Node<T>& nd) {
            if (pg->requires_grad || pb->requires_grad) {
                Tensor<T> dgamma(Shape{C}), dbeta(Shape{C});
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const T* gr = nd.grad.data() + (int64_t(n) * C + c) * hw;
                        const T* xh = xhat->data() + (int64_t(n) * C + c) * hw;
                        double sg = 0, sb = 0;
                        for (int64_t i = 0; i < hw; ++i) {
                            sg += double(gr[i]) * double(xh[i]);
                            sb += double(gr[i]);
                        }
                        dgamma[c] += static_cast<T>(sg);
                        dbeta[c] += static_cast<T>(sb);
                    }
                if (pg->requires_grad) accum_grad(pg, dgamma);
                if (pb->requires_grad) accum_grad(pb, dbeta);
            }
            if (!px->requires_grad) return;
            Tensor<T> dx(px->value.shape());
            std::vector<T> dxh(static_cast<size_t>(glen));
            for (int n = 0; n < N; ++n) {
                for (int g = 0; g < groups; ++g) {
                    // dxhat = dy * gamma (channel-wise within the group)
                    for (int cc = 0; cc < cg; ++cc) {
                        int c = g * cg + cc;
                        T ga = pg->value[c];
                        const T* gr = nd.grad.data() + (int64_t(n) * C + c) * hw;
                        T* d = dxh.data() + int64_t(cc) * hw;
                        for (int64_t i = 0; i < hw; ++i) d[i] = gr[i] * ga;
                    }
                    const T* xh = xhat->data() + (int64_t(n) * C + int64_t(g) * cg) * hw;
                    double m1 = 0, m2 = 0;
                    for (int64_t i = 0; i < glen; ++i) {
                        m1 += double(dxh[size_t(i)]);
                        m2 += double(dxh[size_t(i)]) * double(xh[i]);
                    }
                    m1 /= double(glen);
                    m2 /= double(glen);
                    T istd = (*inv_std)[size_t(n) * groups + g];
                    T* d = dx.data() + (int64_t(n) * C + int64_t(g) * cg) * hw;
                    for (int64_t i = 0; i < glen; ++i)
                        d[i] = istd * static_cast<T>(double(dxh[size_t(i)]) - m1 -
                                                     double(xh[i]) * m2);
                }
            }
            accum_grad(px, dx);
        }));
}

// mean softmax cross-entropy over [N, K] logits with integer labels
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    const auto& ls = logits.value().shape();
    int N = ls[0], K = ls[1];
    auto probs = std::make_shared<Tensor<T>>(ls);
    double loss = 0;
    for (int n = 0; n < N; ++n) {
        const T* p = logits.value().data() + int64_t(n) * K;
        T mx = p[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, p[k]);
        double z = 0;
        for (int k = 0; k < K; ++k) z += std::exp(double(p[k] - mx));
        for (int k = 0; k < K; ++k)
            (*probs)[int64_t(n) * K + k] = static_cast<T>(std::exp(double(p[k] - mx)) / z);
        loss -= std::log(std::max(double((*probs)[int64_t(n) * K + labels[size_t(n)]]), 1e-300));
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss / N));
    auto pl = logits.node();
    auto lab = std::make_shared<std::vector<int>>(labels);
    return Var<T>::from_node(
        make_op<T>(std::move(out), {pl}, [pl, probs, lab, N, K](Node<T>& nd) {
            Tensor<T> g(pl->value.shape());
            T s = nd.grad[0] / static_cast<T>(N);
            for (int n = 0; n < N; ++n)
                for (int k = 0; k < K; ++k) {
                    T t = (k == (*lab)[size_t(n)]) ? T(1) : T(0);
                    g[int64_t(n) * K + k] = s * ((*probs)[int64_t(n) * K + k] - t);
                }
            accum_grad(pl, g);
        }));
}

}  // namespace panda::ag
