#pragma once

// Minimal tape-free reverse-mode autodiff over row-major float matrices.
//
// Activations of a batch of sequences are stored as [B*L x C] matrices with
// the rows of sequence b occupying [b*L, (b+1)*L). Ops that need the sequence
// structure (convolution, pooling, attention, broadcasts) take B and L
// explicitly. Each result node keeps shared ownership of its parents and a
// closure that pushes its gradient into them; backward() walks the graph in
// reverse topological order.

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "../errors.hpp"

namespace trajweaver::nn {

using Real = float;
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Mat& grad_buffer() {
        if (grad.rows() != value.rows() || grad.cols() != value.cols()) grad = Mat::Zero(value.rows(), value.cols());
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    const Mat& value() const { return node_->value; }
    Mat& value_mut() { return node_->value; }
    const Mat& grad() const { return node_->grad; }
    Mat& grad_buffer() { return node_->grad_buffer(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

    void zero_grad() { node_->grad.setZero(node_->value.rows(), node_->value.cols()); }

private:
    std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// Grad mode

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline Var constant(Mat m) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    return Var(std::move(n));
}

inline Var parameter(Mat m) {
    auto n = std::make_shared<Node>();
    n->value = std::move(m);
    n->requires_grad = true;
    n->grad = Mat::Zero(n->value.rows(), n->value.cols());
    return Var(std::move(n));
}

namespace detail {

template <class Backward>
Var make_op(Mat value, std::vector<Var> inputs, Backward&& bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_enabled_flag()) {
        bool any = false;
        for (const auto& v : inputs) any = any || v.requires_grad();
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(inputs.size());
            for (auto& v : inputs) n->parents.push_back(v.shared());
            n->backward = std::forward<Backward>(bw);
        }
    }
    return Var(std::move(n));
}

inline bool wants(const Node& n, std::size_t i) { return n.parents[i]->requires_grad; }
inline Mat& pgrad(Node& n, std::size_t i) { return n.parents[i]->grad_buffer(); }
inline const Mat& pval(const Node& n, std::size_t i) { return n.parents[i]->value; }

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ShapeError(what);
}

}  // namespace detail

/// Accumulates d(root)/d(leaf) into every reachable node that requires grad.
/// `root` must be 1x1.
inline void backward(const Var& root) {
    detail::require(root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
    if (!root.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->grad_buffer().setConstant(1.0f);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() != 0) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Dense algebra

inline Var matmul(const Var& a, const Var& b) {
    detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Mat out;
    out.noalias() = a.value() * b.value();
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0).noalias() += n.grad * detail::pval(n, 1).transpose();
        if (detail::wants(n, 1)) detail::pgrad(n, 1).noalias() += detail::pval(n, 0).transpose() * n.grad;
    });
}

/// x W + b, b broadcast over rows.
inline Var linear(const Var& x, const Var& W, const Var& b) {
    detail::require(x.cols() == W.rows(), "linear: input width " + std::to_string(x.cols()) + " != " +
                                              std::to_string(W.rows()));
    Mat out;
    out.noalias() = x.value() * W.value();
    out.rowwise() += b.value().row(0);
    return detail::make_op(std::move(out), {x, W, b}, [](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0).noalias() += n.grad * detail::pval(n, 1).transpose();
        if (detail::wants(n, 1)) detail::pgrad(n, 1).noalias() += detail::pval(n, 0).transpose() * n.grad;
        if (detail::wants(n, 2)) detail::pgrad(n, 2).row(0) += n.grad.colwise().sum();
    });
}

inline Var add(const Var& a, const Var& b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    return detail::make_op(a.value() + b.value(), {a, b}, [](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0) += n.grad;
        if (detail::wants(n, 1)) detail::pgrad(n, 1) += n.grad;
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    return detail::make_op(a.value() - b.value(), {a, b}, [](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0) += n.grad;
        if (detail::wants(n, 1)) detail::pgrad(n, 1) -= n.grad;
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
    return detail::make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0) += n.grad.cwiseProduct(detail::pval(n, 1));
        if (detail::wants(n, 1)) detail::pgrad(n, 1) += n.grad.cwiseProduct(detail::pval(n, 0));
    });
}

/// 1 - a
inline Var one_minus(const Var& a) {
    Mat out = (1.0f - a.value().array()).matrix();
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0) -= n.grad;
    });
}

inline Var scale(const Var& a, Real s) {
    return detail::make_op(a.value() * s, {a}, [s](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0) += n.grad * s;
    });
}

// ---------------------------------------------------------------------------
// Activations

inline Var sigmoid(const Var& a) {
    Mat out = (1.0f / (1.0f + (-a.value().array()).exp())).matrix();
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (detail::wants(n, 0))
            detail::pgrad(n, 0).array() += n.grad.array() * n.value.array() * (1.0f - n.value.array());
    });
}

inline Var tanh(const Var& a) {
    Mat out = a.value().array().tanh().matrix();
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0).array() += n.grad.array() * (1.0f - n.value.array().square());
    });
}

inline Var silu(const Var& a) {
    const auto x = a.value().array();
    Mat sig = (1.0f / (1.0f + (-x).exp())).matrix();
    Mat out = (x * sig.array()).matrix();
    return detail::make_op(std::move(out), {a}, [sig = std::move(sig)](Node& n) {
        if (detail::wants(n, 0)) {
            const auto s = sig.array();
            const auto x = detail::pval(n, 0).array();
            detail::pgrad(n, 0).array() += n.grad.array() * (s * (1.0f + x * (1.0f - s)));
        }
    });
}

/// Per-row layer normalization with affine gamma/beta ([1 x C]).
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-5f) {
    const Eigen::Index C = x.cols();
    detail::require(gamma.cols() == C && beta.cols() == C, "layer_norm: affine width mismatch");
    const auto& X = x.value();
    Eigen::Matrix<Real, Eigen::Dynamic, 1> mean = X.rowwise().mean();
    Mat xhat = X.colwise() - mean;
    Eigen::Matrix<Real, Eigen::Dynamic, 1> inv_std =
        ((xhat.array().square().rowwise().sum() / static_cast<Real>(C)) + eps).rsqrt().matrix();
    xhat.array().colwise() *= inv_std.array();
    Mat out = xhat.array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    return detail::make_op(std::move(out), {x, gamma, beta},
                           [xhat = std::move(xhat), inv_std = std::move(inv_std), C](Node& n) {
                               const auto& g = n.grad;
                               if (detail::wants(n, 1))
                                   detail::pgrad(n, 1).row(0) += g.cwiseProduct(xhat).colwise().sum();
                               if (detail::wants(n, 2)) detail::pgrad(n, 2).row(0) += g.colwise().sum();
                               if (detail::wants(n, 0)) {
                                   Mat gx = g.array().rowwise() * detail::pval(n, 1).row(0).array();
                                   Eigen::Matrix<Real, Eigen::Dynamic, 1> m1 = gx.rowwise().mean();
                                   Eigen::Matrix<Real, Eigen::Dynamic, 1> m2 =
                                       gx.cwiseProduct(xhat).rowwise().sum() / static_cast<Real>(C);
                                   Mat dx = gx.colwise() - m1;
                                   dx.array() -= xhat.array().colwise() * m2.array();
                                   dx.array().colwise() *= inv_std.array();
                                   detail::pgrad(n, 0) += dx;
                               }
                           });
}

// ---------------------------------------------------------------------------
// Column plumbing

inline Var concat_cols(const std::vector<Var>& parts) {
    detail::require(!parts.empty(), "concat_cols: no inputs");
    const Eigen::Index R = parts[0].rows();
    Eigen::Index C = 0;
    for (const auto& p : parts) {
        detail::require(p.rows() == R, "concat_cols: row count mismatch");
        C += p.cols();
    }
    Mat out(R, C);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return detail::make_op(std::move(out), parts, [](Node& n) {
        Eigen::Index off = 0;
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
            const Eigen::Index w = n.parents[i]->value.cols();
            if (detail::wants(n, i)) detail::pgrad(n, i) += n.grad.middleCols(off, w);
            off += w;
        }
    });
}

inline Var slice_cols(const Var& x, Eigen::Index offset, Eigen::Index width) {
    detail::require(offset >= 0 && offset + width <= x.cols(), "slice_cols: out of range");
    Mat out = x.value().middleCols(offset, width);
    return detail::make_op(std::move(out), {x}, [offset, width](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0).middleCols(offset, width) += n.grad;
    });
}

/// Adds row b of v ([B x C]) to every row of sequence b in x ([B*L x C]).
inline Var add_per_sequence(const Var& x, const Var& v, Eigen::Index B, Eigen::Index L) {
    detail::require(x.rows() == B * L && v.rows() == B && v.cols() == x.cols(), "add_per_sequence: shape mismatch");
    Mat out = x.value();
    for (Eigen::Index b = 0; b < B; ++b) out.middleRows(b * L, L).rowwise() += v.value().row(b);
    return detail::make_op(std::move(out), {x, v}, [B, L](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0) += n.grad;
        if (detail::wants(n, 1)) {
            Mat& gv = detail::pgrad(n, 1);
            for (Eigen::Index b = 0; b < B; ++b) gv.row(b) += n.grad.middleRows(b * L, L).colwise().sum();
        }
    });
}

// ---------------------------------------------------------------------------
// Sequence ops

/// 1-D convolution with kernel 3, stride 1 and zero padding inside each
/// sequence. W is [3*Cin x Cout] with row blocks for offsets -1, 0, +1.
inline Var conv1d_k3(const Var& x, const Var& W, const Var& b, Eigen::Index B, Eigen::Index L) {
    const Eigen::Index C = x.cols();
    detail::require(x.rows() == B * L, "conv1d: rows != B*L");
    detail::require(W.rows() == 3 * C, "conv1d: weight rows != 3*Cin");
    Mat cols = Mat::Zero(B * L, 3 * C);
    const auto& X = x.value();
    for (Eigen::Index s = 0; s < B; ++s) {
        const Eigen::Index r0 = s * L;
        if (L > 1) {
            cols.block(r0 + 1, 0, L - 1, C) = X.middleRows(r0, L - 1);
            cols.block(r0, 2 * C, L - 1, C) = X.middleRows(r0 + 1, L - 1);
        }
        cols.block(r0, C, L, C) = X.middleRows(r0, L);
    }
    Mat out;
    out.noalias() = cols * W.value();
    out.rowwise() += b.value().row(0);
    return detail::make_op(std::move(out), {x, W, b}, [cols = std::move(cols), B, L, C](Node& n) {
        if (detail::wants(n, 1)) detail::pgrad(n, 1).noalias() += cols.transpose() * n.grad;
        if (detail::wants(n, 2)) detail::pgrad(n, 2).row(0) += n.grad.colwise().sum();
        if (detail::wants(n, 0)) {
            Mat gcols;
            gcols.noalias() = n.grad * detail::pval(n, 1).transpose();
            Mat& gx = detail::pgrad(n, 0);
            for (Eigen::Index s = 0; s < B; ++s) {
                const Eigen::Index r0 = s * L;
                gx.middleRows(r0, L) += gcols.block(r0, C, L, C);
                if (L > 1) {
                    gx.middleRows(r0, L - 1) += gcols.block(r0 + 1, 0, L - 1, C);
                    gx.middleRows(r0 + 1, L - 1) += gcols.block(r0, 2 * C, L - 1, C);
                }
            }
        }
    });
}

/// Averages row pairs (2j, 2j+1); sequences must have even length.
inline Var avg_pool2(const Var& x) {
    detail::require(x.rows() % 2 == 0, "avg_pool2: odd row count");
    const Eigen::Index R = x.rows() / 2;
    Mat out(R, x.cols());
    for (Eigen::Index r = 0; r < R; ++r) out.row(r) = 0.5f * (x.value().row(2 * r) + x.value().row(2 * r + 1));
    return detail::make_op(std::move(out), {x}, [R](Node& n) {
        if (!detail::wants(n, 0)) return;
        Mat& g = detail::pgrad(n, 0);
        for (Eigen::Index r = 0; r < R; ++r) {
            g.row(2 * r) += 0.5f * n.grad.row(r);
            g.row(2 * r + 1) += 0.5f * n.grad.row(r);
        }
    });
}

/// Nearest-neighbour upsampling: row j -> rows 2j, 2j+1.
inline Var upsample2(const Var& x) {
    const Eigen::Index R = x.rows();
    Mat out(2 * R, x.cols());
    for (Eigen::Index r = 0; r < R; ++r) {
        out.row(2 * r) = x.value().row(r);
        out.row(2 * r + 1) = x.value().row(r);
    }
    return detail::make_op(std::move(out), {x}, [R](Node& n) {
        if (!detail::wants(n, 0)) return;
        Mat& g = detail::pgrad(n, 0);
        for (Eigen::Index r = 0; r < R; ++r) g.row(r) += n.grad.row(2 * r) + n.grad.row(2 * r + 1);
    });
}

/// Multi-head scaled dot-product attention. q: [B*Lq x D], k, v: [B*Lk x D];
/// heads split D evenly. Each sequence attends only within itself.
inline Var attention(const Var& q, const Var& k, const Var& v, Eigen::Index B, Eigen::Index Lq, Eigen::Index Lk,
                     Eigen::Index heads) {
    const Eigen::Index D = q.cols();
    detail::require(k.cols() == D && v.cols() == D, "attention: width mismatch");
    detail::require(q.rows() == B * Lq && k.rows() == B * Lk && v.rows() == B * Lk, "attention: row mismatch");
    detail::require(heads > 0 && D % heads == 0, "attention: width not divisible by heads");
    const Eigen::Index dh = D / heads;
    const Real sc = 1.0f / std::sqrt(static_cast<Real>(dh));

    std::vector<Mat> probs(static_cast<std::size_t>(B * heads));
    Mat out(B * Lq, D);
    for (Eigen::Index s = 0; s < B; ++s)
        for (Eigen::Index h = 0; h < heads; ++h) {
            const auto Q = q.value().block(s * Lq, h * dh, Lq, dh);
            const auto K = k.value().block(s * Lk, h * dh, Lk, dh);
            const auto V = v.value().block(s * Lk, h * dh, Lk, dh);
            Mat S;
            S.noalias() = (Q * K.transpose()) * sc;
            for (Eigen::Index r = 0; r < Lq; ++r) {
                const Real mx = S.row(r).maxCoeff();
                S.row(r) = (S.row(r).array() - mx).exp().matrix();
                S.row(r) /= S.row(r).sum();
            }
            out.block(s * Lq, h * dh, Lq, dh).noalias() = S * V;
            probs[static_cast<std::size_t>(s * heads + h)] = std::move(S);
        }
    return detail::make_op(std::move(out), {q, k, v}, [probs = std::move(probs), B, Lq, Lk, heads, dh, sc](Node& n) {
        const auto& Qv = detail::pval(n, 0);
        const auto& Kv = detail::pval(n, 1);
        const auto& Vv = detail::pval(n, 2);
        const bool gq = detail::wants(n, 0), gk = detail::wants(n, 1), gv = detail::wants(n, 2);
        for (Eigen::Index s = 0; s < B; ++s)
            for (Eigen::Index h = 0; h < heads; ++h) {
                const Mat& P = probs[static_cast<std::size_t>(s * heads + h)];
                const auto dO = n.grad.block(s * Lq, h * dh, Lq, dh);
                if (gv) detail::pgrad(n, 2).block(s * Lk, h * dh, Lk, dh).noalias() += P.transpose() * dO;
                if (!gq && !gk) continue;
                Mat dP;
                dP.noalias() = dO * Vv.block(s * Lk, h * dh, Lk, dh).transpose();
                Eigen::Matrix<Real, Eigen::Dynamic, 1> rs = dP.cwiseProduct(P).rowwise().sum();
                Mat dS = P.cwiseProduct(dP.colwise() - rs) * sc;
                if (gq) detail::pgrad(n, 0).block(s * Lq, h * dh, Lq, dh).noalias() += dS * Kv.block(s * Lk, h * dh, Lk, dh);
                if (gk)
                    detail::pgrad(n, 1).block(s * Lk, h * dh, Lk, dh).noalias() +=
                        dS.transpose() * Qv.block(s * Lq, h * dh, Lq, dh);
            }
    });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean squared error over rows with mask = 1 and all columns. Returns 1x1.
inline Var masked_mse(const Var& pred, const Mat& target, const std::vector<Real>& mask) {
    detail::require(pred.rows() == target.rows() && pred.cols() == target.cols(), "masked_mse: shape mismatch");
    detail::require(static_cast<Eigen::Index>(mask.size()) == pred.rows(), "masked_mse: mask length mismatch");
    double count = 0.0;
    for (Real m : mask) count += m;
    if (count <= 0.0) throw InvalidArgument("masked_mse: empty mask");
    const double denom = count * static_cast<double>(pred.cols());
    Mat diff = pred.value() - target;
    double acc = 0.0;
    for (Eigen::Index r = 0; r < diff.rows(); ++r) {
        if (mask[static_cast<std::size_t>(r)] == 0.0f) {
            diff.row(r).setZero();
            continue;
        }
        acc += static_cast<double>(diff.row(r).squaredNorm());
    }
    Mat out(1, 1);
    out(0, 0) = static_cast<Real>(acc / denom);
    return detail::make_op(std::move(out), {pred}, [diff = std::move(diff), denom](Node& n) {
        if (detail::wants(n, 0)) detail::pgrad(n, 0) += diff * static_cast<Real>(2.0 * n.grad(0, 0) / denom);
    });
}

}  // namespace trajweaver::nn
