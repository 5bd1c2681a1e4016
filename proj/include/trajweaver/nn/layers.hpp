#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "autograd.hpp"

namespace trajweaver::nn {

using NamedParams = std::vector<std::pair<std::string, Var>>;

inline Mat uniform_init(Eigen::Index rows, Eigen::Index cols, Real bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<Real> U(-bound, bound);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = U(rng);
    return m;
}

struct Linear {
    Var W, b;

    Linear() = default;
    Linear(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng, Real gain = 1.0f) {
        const Real bound = gain / std::sqrt(static_cast<Real>(in));
        W = parameter(uniform_init(in, out, bound, rng));
        b = parameter(uniform_init(1, out, bound, rng));
    }

    Var operator()(const Var& x) const { return linear(x, W, b); }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".W", W);
        out.emplace_back(prefix + ".b", b);
    }
};

struct Conv1d {
    Var W, b;

    Conv1d() = default;
    Conv1d(Eigen::Index in, Eigen::Index out, std::mt19937_64& rng, Real gain = 1.0f) {
        const Real bound = gain / std::sqrt(static_cast<Real>(3 * in));
        W = parameter(uniform_init(3 * in, out, bound, rng));
        b = parameter(uniform_init(1, out, bound, rng));
    }

    Var operator()(const Var& x, Eigen::Index B, Eigen::Index L) const { return conv1d_k3(x, W, b, B, L); }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".W", W);
        out.emplace_back(prefix + ".b", b);
    }
};

struct LayerNorm {
    Var gamma, beta;

    LayerNorm() = default;
    explicit LayerNorm(Eigen::Index C) {
        gamma = parameter(Mat::Ones(1, C));
        beta = parameter(Mat::Zero(1, C));
    }

    Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }

    void collect(const std::string& prefix, NamedParams& out) const {
        out.emplace_back(prefix + ".gamma", gamma);
        out.emplace_back(prefix + ".beta", beta);
    }
};

/// Pre-norm residual block with time-embedding injection:
///   x + conv2(silu(norm2(conv1(silu(norm1(x))) + proj(temb))))
struct ResBlock {
    LayerNorm norm1, norm2;
    Conv1d conv1, conv2;
    Linear temb_proj;

    ResBlock() = default;
    ResBlock(Eigen::Index width, Eigen::Index temb_width, std::mt19937_64& rng)
        : norm1(width), norm2(width), conv1(width, width, rng), conv2(width, width, rng, 0.5f),
          temb_proj(temb_width, width, rng) {}

    Var operator()(const Var& x, const Var& temb, Eigen::Index B, Eigen::Index L) const {
        Var h = conv1(silu(norm1(x)), B, L);
        h = add_per_sequence(h, temb_proj(temb), B, L);
        h = conv2(silu(norm2(h)), B, L);
        return add(x, h);
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        norm1.collect(prefix + ".norm1", out);
        conv1.collect(prefix + ".conv1", out);
        temb_proj.collect(prefix + ".temb", out);
        norm2.collect(prefix + ".norm2", out);
        conv2.collect(prefix + ".conv2", out);
    }
};

/// Pre-norm multi-head self-attention with residual.
struct SelfAttention {
    LayerNorm norm;
    Linear qkv, proj;
    Eigen::Index heads = 1;

    SelfAttention() = default;
    SelfAttention(Eigen::Index width, Eigen::Index n_heads, std::mt19937_64& rng)
        : norm(width), qkv(width, 3 * width, rng), proj(width, width, rng, 0.5f), heads(n_heads) {}

    Var operator()(const Var& x, Eigen::Index B, Eigen::Index L) const {
        const Eigen::Index D = x.cols();
        Var h = qkv(norm(x));
        Var a = attention(slice_cols(h, 0, D), slice_cols(h, D, D), slice_cols(h, 2 * D, D), B, L, L, heads);
        return add(x, proj(a));
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        norm.collect(prefix + ".norm", out);
        qkv.collect(prefix + ".qkv", out);
        proj.collect(prefix + ".proj", out);
    }
};

/// Position-wise GRU cell (PyTorch gate convention):
///   r = sig(x Wr + h Ur), z = sig(x Wz + h Uz), n = tanh(x Wn + r * (h Un))
///   h' = (1 - z) * n + z * h
struct GRUCell {
    Linear input_map;   // in -> 3H
    Linear hidden_map;  // H -> 3H
    Eigen::Index hidden = 0;

    GRUCell() = default;
    GRUCell(Eigen::Index in, Eigen::Index H, std::mt19937_64& rng)
        : input_map(in, 3 * H, rng), hidden_map(H, 3 * H, rng), hidden(H) {}

    Var operator()(const Var& x, const Var& h) const {
        const Eigen::Index H = hidden;
        Var gx = input_map(x);
        Var gh = hidden_map(h);
        Var r = sigmoid(add(slice_cols(gx, 0, H), slice_cols(gh, 0, H)));
        Var z = sigmoid(add(slice_cols(gx, H, H), slice_cols(gh, H, H)));
        Var n = tanh(add(slice_cols(gx, 2 * H, H), mul(r, slice_cols(gh, 2 * H, H))));
        return add(mul(one_minus(z), n), mul(z, h));
    }

    void collect(const std::string& prefix, NamedParams& out) const {
        input_map.collect(prefix + ".input", out);
        hidden_map.collect(prefix + ".hidden", out);
    }
};

/// Adam with global gradient-norm clipping.
class Adam {
public:
    Adam(NamedParams params, double lr, double clip = 1.0, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), clip_(clip), b1_(beta1), b2_(beta2), eps_(eps) {
        for (const auto& [name, p] : params_) {
            m_.push_back(Mat::Zero(p.rows(), p.cols()));
            v_.push_back(Mat::Zero(p.rows(), p.cols()));
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    double grad_norm() const {
        double s = 0.0;
        for (const auto& [name, p] : params_) s += static_cast<double>(p.grad().squaredNorm());
        return std::sqrt(s);
    }

    /// Applies one update; returns the pre-clip gradient norm.
    double step() {
        const double norm = grad_norm();
        const Real factor = (clip_ > 0.0 && norm > clip_) ? static_cast<Real>(clip_ / norm) : 1.0f;
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        const Real step_size = static_cast<Real>(lr_ * std::sqrt(c2) / c1);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Var& p = params_[i].second;
            const Mat g = p.grad() * factor;
            m_[i] = static_cast<Real>(b1_) * m_[i] + static_cast<Real>(1.0 - b1_) * g;
            v_[i] = static_cast<Real>(b2_) * v_[i] + static_cast<Real>(1.0 - b2_) * g.cwiseProduct(g);
            p.value_mut().array() -=
                step_size * m_[i].array() / (v_[i].array().sqrt() + static_cast<Real>(eps_));
        }
        return norm;
    }

    void set_lr(double lr) { lr_ = lr; }

private:
    NamedParams params_;
    std::vector<Mat> m_, v_;
    double lr_, clip_, b1_, b2_, eps_;
    long t_ = 0;
};

}  // namespace trajweaver::nn
