#include <gtest/gtest.h>

#include <functional>
#include <random>

#include <trajweaver/nn/layers.hpp>

using namespace trajweaver::nn;

namespace {

Mat randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, Real sd = 1.0f) {
    std::normal_distribution<Real> N(0.0f, sd);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = N(rng);
    return m;
}

// Central differences on up to `probes` entries of every input; the scalar is
// the mean squared distance of f's output to a fixed random target.
void check_gradients(const std::function<Var(const std::vector<Var>&)>& f, std::vector<Var> inputs,
                     std::uint64_t seed = 1, int probes = 12, Real h = 5e-3f, double rtol = 3e-2, double atol = 2e-3) {
    std::mt19937_64 rng(seed);
    const Var out0 = f(inputs);
    const Mat target = randn(out0.rows(), out0.cols(), rng);
    const std::vector<Real> mask(static_cast<std::size_t>(out0.rows()), 1.0f);
    auto loss = [&] { return static_cast<double>(masked_mse(f(inputs), target, mask).value()(0, 0)); };

    for (auto& v : inputs) v.zero_grad();
    backward(masked_mse(f(inputs), target, mask));

    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Var& v = inputs[k];
        const Mat analytic = v.grad();
        std::uniform_int_distribution<Eigen::Index> pick(0, v.value().size() - 1);
        for (int p = 0; p < probes; ++p) {
            const Eigen::Index idx = pick(rng);
            Real& x = v.value_mut().data()[idx];
            const Real saved = x;
            x = saved + h;
            const double up = loss();
            x = saved - h;
            const double down = loss();
            x = saved;
            const double numeric = (up - down) / (2.0 * static_cast<double>(h));
            const double a = static_cast<double>(analytic.data()[idx]);
            EXPECT_NEAR(a, numeric, atol + rtol * std::max(std::abs(a), std::abs(numeric)))
                << "input " << k << " entry " << idx;
        }
    }
}

}  // namespace

TEST(Autograd, MatmulAddSubMul) {
    std::mt19937_64 rng(1);
    check_gradients(
        [](const std::vector<Var>& in) {
            return mul(sub(add(matmul(in[0], in[1]), in[2]), in[3]), in[2]);
        },
        {parameter(randn(5, 4, rng)), parameter(randn(4, 3, rng)), parameter(randn(5, 3, rng)),
         parameter(randn(5, 3, rng))});
}

TEST(Autograd, Elementwise) {
    std::mt19937_64 rng(2);
    check_gradients(
        [](const std::vector<Var>& in) {
            return concat_cols({sigmoid(in[0]), tanh(in[0]), silu(in[0]), one_minus(in[0]), scale(in[0], 0.7f)});
        },
        {parameter(randn(6, 3, rng))});
}

TEST(Autograd, LayerNorm) {
    std::mt19937_64 rng(3);
    check_gradients([](const std::vector<Var>& in) { return layer_norm(in[0], in[1], in[2]); },
                    {parameter(randn(7, 5, rng)), parameter(randn(1, 5, rng)), parameter(randn(1, 5, rng))});
}

TEST(Autograd, SliceConcatBroadcast) {
    std::mt19937_64 rng(4);
    check_gradients(
        [](const std::vector<Var>& in) {
            Var s = concat_cols({slice_cols(in[0], 1, 2), slice_cols(in[0], 0, 1)});
            return add_per_sequence(s, in[1], 2, 4);
        },
        {parameter(randn(8, 4, rng)), parameter(randn(2, 3, rng))});
}

TEST(Autograd, Conv1dAndPooling) {
    std::mt19937_64 rng(5);
    check_gradients(
        [](const std::vector<Var>& in) { return upsample2(avg_pool2(conv1d_k3(in[0], in[1], in[2], 2, 6))); },
        {parameter(randn(12, 3, rng)), parameter(randn(9, 4, rng, 0.5f)), parameter(randn(1, 4, rng))});
}

TEST(Autograd, Conv1dDoesNotLeakAcrossSequences) {
    std::mt19937_64 rng(6);
    Var x = parameter(randn(8, 2, rng)), W = parameter(randn(6, 2, rng)), b = parameter(randn(1, 2, rng));
    Var y = conv1d_k3(x, W, b, 2, 4);
    Mat x2 = x.value();
    x2.row(4).setConstant(100.0f);  // first row of sequence 1
    Var y2 = conv1d_k3(constant(x2), W, b, 2, 4);
    EXPECT_TRUE(y.value().topRows(4).isApprox(y2.value().topRows(4)));
}

TEST(Autograd, Attention) {
    std::mt19937_64 rng(7);
    check_gradients(
        [](const std::vector<Var>& in) { return attention(in[0], in[1], in[2], 2, 3, 4, 2); },
        {parameter(randn(6, 4, rng)), parameter(randn(8, 4, rng)), parameter(randn(8, 4, rng))});
}

TEST(Autograd, LayersEndToEnd) {
    std::mt19937_64 rng(8);
    ResBlock rb(4, 3, rng);
    SelfAttention sa(4, 2, rng);
    GRUCell gru(4, 4, rng);
    Var x = parameter(randn(8, 4, rng)), temb = parameter(randn(2, 3, rng)), h = parameter(randn(8, 4, rng));
    check_gradients(
        [&](const std::vector<Var>& in) { return gru(sa(rb(in[0], in[1], 2, 4), 2, 4), in[2]); },
        {x, temb, h}, 9);
    NamedParams ps;
    gru.collect("gru", ps);
    std::vector<Var> weights;
    for (auto& [n, p] : ps) weights.push_back(p);
    check_gradients([&](const std::vector<Var>&) { return gru(sa(rb(x, temb, 2, 4), 2, 4), h); }, weights, 10);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
    Var p = parameter(Mat::Ones(2, 2));
    {
        NoGradGuard g;
        EXPECT_FALSE(tanh(p).requires_grad());
    }
    EXPECT_TRUE(tanh(p).requires_grad());
}

TEST(Autograd, ShapeErrors) {
    Var a = constant(Mat::Ones(2, 3)), b = constant(Mat::Ones(2, 2));
    EXPECT_THROW(matmul(a, b), trajweaver::ShapeError);
    EXPECT_THROW(add(a, b), trajweaver::ShapeError);
    EXPECT_THROW(backward(a), trajweaver::ShapeError);
    EXPECT_THROW(avg_pool2(constant(Mat::Ones(3, 1))), trajweaver::ShapeError);
}

TEST(Adam, ClipsAndDescends) {
    Var w = parameter(Mat::Constant(1, 1, 3.0f));
    Adam opt({{"w", w}}, 0.1, 1.0);
    for (int i = 0; i < 200; ++i) {
        opt.zero_grad();
        backward(masked_mse(w, Mat::Zero(1, 1), {1.0f}));
        opt.step();
    }
    EXPECT_LT(std::abs(w.value()(0, 0)), 0.05f);
}
