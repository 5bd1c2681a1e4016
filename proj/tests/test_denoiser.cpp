#include <gtest/gtest.h>

#include <cmath>

#include <trajweaver/denoiser.hpp>

using namespace trajweaver;

namespace {

DenoiserConfig tiny(FusionMode mode = FusionMode::Add) {
    DenoiserConfig c;
    c.levels = 3;
    c.base_width = 8;
    c.res_blocks = 1;
    c.heads = 2;
    c.time_width = 8;
    c.fusion = mode;
    c.T = 50;
    return c;
}

nn::Mat random_input(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> N(0.0f, 1.0f);
    nn::Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = N(rng);
    return m;
}

std::vector<nn::Var> zero_state(const DenoiserConfig& c, std::size_t B, std::size_t L) {
    std::vector<nn::Var> s;
    for (const auto& m : PropagationState::zeros(c, B, L).levels) s.push_back(nn::constant(m));
    return s;
}

AggregatedCondition random_condition(std::size_t L, std::uint64_t seed) {
    const auto data = synth_generate(1, L, seed);
    auto norm = NormStats::from_dataset(data);
    norm.residual_scale = 0.01;
    const auto r = sparsify(data[0], 0.5, seed);
    const auto e = encode_task({r.sparse, r.query, {}, norm}, EmbedderRegistry::defaults(), r.truth);
    return e.condition(e.truth, 0);
}

}  // namespace

TEST(Denoiser, ShapeSweepOverLengths) {
    const auto cfg = tiny();
    SPDMNet net(cfg, 10, 1);
    nn::NoGradGuard g;
    for (std::size_t L : {64u, 128u, 256u, 512u}) {
        const std::size_t B = 2;
        const std::vector<long> t{3, 40};
        auto out = net.forward(nn::constant(random_input(B * L, 10, L)), t, zero_state(cfg, B, L), B, L);
        EXPECT_EQ(out.eps.rows(), static_cast<Eigen::Index>(B * L));
        EXPECT_EQ(out.eps.cols(), 2);
        EXPECT_TRUE(out.eps.value().allFinite());
        ASSERT_EQ(out.state.size(), cfg.levels);
        for (std::size_t i = 0; i < cfg.levels; ++i) {
            EXPECT_EQ(out.state[i].rows(), static_cast<Eigen::Index>(B * (L >> i)));
            EXPECT_EQ(out.state[i].cols(), static_cast<Eigen::Index>(cfg.state_width(i)));
            EXPECT_TRUE(out.state[i].value().allFinite());
        }
    }
}

TEST(Denoiser, ConfigurationErrors) {
    const auto cfg = tiny();
    SPDMNet net(cfg, 10, 1);
    nn::NoGradGuard g;
    const std::vector<long> t{1};
    EXPECT_THROW(net.forward(nn::constant(random_input(30, 10, 1)), t, zero_state(cfg, 1, 30), 1, 30), InvalidArgument);
    EXPECT_THROW(net.forward(nn::constant(random_input(32, 9, 1)), t, zero_state(cfg, 1, 32), 1, 32), ShapeError);
    EXPECT_THROW(net.forward(nn::constant(random_input(32, 10, 1)), t, zero_state(cfg, 1, 64), 1, 32), ShapeError);
    const std::vector<long> bad{50};
    EXPECT_THROW(net.forward(nn::constant(random_input(32, 10, 1)), bad, zero_state(cfg, 1, 32), 1, 32), OutOfRange);
    auto c = tiny();
    c.base_width = 6;
    c.heads = 5;
    EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(Denoiser, DeterministicBitForBit) {
    const auto cond = random_condition(64, 3);
    Denoiser a(tiny(), EmbedderRegistry::defaults().layout(), 5);
    Denoiser b(tiny(), EmbedderRegistry::defaults().layout(), 5);
    const auto s = a.zero_state(1, cond.L);
    const auto [ea, sa] = a.denoise_forward(cond, 10, s);
    const auto [ea2, sa2] = a.denoise_forward(cond, 10, s);
    const auto [eb, sb] = b.denoise_forward(cond, 10, s);
    EXPECT_EQ(ea.values, ea2.values);
    EXPECT_EQ(ea.values, eb.values);
    for (std::size_t i = 0; i < sa.levels.size(); ++i) {
        EXPECT_EQ(sa.levels[i], sa2.levels[i]);
        EXPECT_EQ(sa.levels[i], sb.levels[i]);
    }
}

TEST(Denoiser, ZeroStateGivesFiniteOutput) {
    const auto cond = random_condition(40, 4);
    Denoiser d(tiny(), EmbedderRegistry::defaults().layout(), 2);
    const auto [eps, s] = d.denoise_forward(cond, 49, d.zero_state(1, cond.L));
    ASSERT_EQ(eps.values.size(), 2 * cond.L);
    for (double v : eps.values) EXPECT_TRUE(std::isfinite(v));
    EXPECT_TRUE(s.all_finite());
}

TEST(Denoiser, PadsToLengthMultiple) {
    const auto cond = random_condition(62, 6);
    Denoiser d(tiny(), EmbedderRegistry::defaults().layout(), 2);
    const auto s = d.zero_state(1, cond.L);
    EXPECT_EQ(s.length, 64u);
    const auto [eps, next] = d.denoise_forward(cond, 5, s);
    EXPECT_EQ(eps.values.size(), 2 * 62u);
    EXPECT_EQ(next.length, 64u);
}

TEST(Denoiser, StateCausality) {
    const auto cond_a = random_condition(64, 7), cond_b = random_condition(64, 8);
    Denoiser d(tiny(), EmbedderRegistry::defaults().layout(), 3);
    const auto s0 = d.zero_state(1, 64);
    // identical history -> identical state
    auto h1 = d.denoise_forward(cond_a, 20, s0).second;
    auto h2 = d.denoise_forward(cond_a, 20, s0).second;
    const auto out1 = d.denoise_forward(cond_a, 19, h1);
    const auto out2 = d.denoise_forward(cond_a, 19, h2);
    EXPECT_EQ(out1.first.values, out2.first.values);
    // differing history -> divergence at the next step
    auto h3 = d.denoise_forward(cond_b, 20, s0).second;
    const auto out3 = d.denoise_forward(cond_a, 19, h3);
    EXPECT_NE(out1.first.values, out3.first.values);
}

TEST(Denoiser, SeveredStateIgnoresIncomingState) {
    auto cfg = tiny();
    cfg.state_enabled = false;
    const auto cond = random_condition(64, 9);
    Denoiser d(cfg, EmbedderRegistry::defaults().layout(), 3);
    auto s = d.zero_state(1, 64);
    const auto a = d.denoise_forward(cond, 10, s).first;
    for (auto& l : s.levels) l.setConstant(0.7f);
    EXPECT_EQ(d.denoise_forward(cond, 10, s).first.values, a.values);
}

TEST(Denoiser, StateBoundedOverFiftySteps) {
    const auto cond = random_condition(64, 10);
    Denoiser d(tiny(), EmbedderRegistry::defaults().layout(), 4);
    auto s = d.zero_state(1, 64);
    for (long t = 49; t >= 0; --t) {
        s = d.denoise_forward(cond, t, s).second;
        EXPECT_LT(s.max_abs(), 10.0) << "step " << t;
    }
}

TEST(Fusion, AllModesFiniteAtEveryLevelShape) {
    for (auto mode : {FusionMode::Add, FusionMode::Concat, FusionMode::CrossAttention}) {
        const auto cfg = tiny(mode);
        std::mt19937_64 rng(1);
        for (std::size_t i = 0; i < cfg.levels; ++i) {
            const auto W = static_cast<Eigen::Index>(cfg.width(i)), S = static_cast<Eigen::Index>(cfg.state_width(i));
            StateFusion f(mode, W, S, rng);
            const std::size_t Li = 64 >> i;
            nn::Var h = nn::constant(random_input(2 * Li, cfg.width(i), i));
            nn::Var st = nn::constant(random_input(2 * Li, cfg.state_width(i), 10 + i));
            auto out = f(h, st, 2, static_cast<Eigen::Index>(Li));
            EXPECT_EQ(out.cols(), W) << to_string(mode);
            EXPECT_EQ(out.rows(), h.rows());
            EXPECT_TRUE(out.value().allFinite());
            nn::Var wrong = nn::constant(random_input(Li, cfg.state_width(i), 3));
            EXPECT_THROW(f(h, wrong, 2, static_cast<Eigen::Index>(Li)), ShapeError);
        }
    }
}

TEST(Fusion, AddWithZeroStateAddsProjectionBias) {
    std::mt19937_64 rng(2);
    StateFusion f(FusionMode::Add, 6, 3, rng);
    nn::Var h = nn::constant(random_input(8, 6, 1));
    auto out = f(h, nn::constant(nn::Mat::Zero(8, 3)), 1, 8);
    for (Eigen::Index r = 0; r < 8; ++r)
        for (Eigen::Index c = 0; c < 6; ++c)
            EXPECT_FLOAT_EQ(out.value()(r, c), h.value()(r, c) + f.proj.b.value()(0, c));
}

TEST(StateUpdate, ShapesPreservedAndZeroInputFinite) {
    const auto cfg = tiny();
    std::mt19937_64 rng(3);
    std::vector<nn::GRUCell> cells;
    std::vector<nn::Var> feats, inc;
    for (std::size_t i = 0; i < cfg.levels; ++i) {
        const auto W = static_cast<Eigen::Index>(cfg.width(i)), S = static_cast<Eigen::Index>(cfg.state_width(i));
        cells.emplace_back(W, S, rng);
        feats.push_back(nn::constant(nn::Mat::Zero(64 >> i, W)));
        inc.push_back(nn::constant(nn::Mat::Zero(64 >> i, S)));
    }
    const auto out = update_state(cells, feats, inc);
    for (std::size_t i = 0; i < cfg.levels; ++i) {
        EXPECT_EQ(out[i].rows(), inc[i].rows());
        EXPECT_EQ(out[i].cols(), inc[i].cols());
        EXPECT_TRUE(out[i].value().allFinite());
        EXPECT_LT(out[i].value().cwiseAbs().maxCoeff(), 1.0f);
    }
    feats.pop_back();
    EXPECT_THROW(update_state(cells, feats, inc), ShapeError);
}

TEST(TimeEmbed, InjectiveOverAllSteps) {
    DenoiserConfig cfg;  // default widths
    cfg.T = 500;
    cfg.levels = 1;
    cfg.res_blocks = 1;
    cfg.base_width = 8;
    cfg.heads = 1;
    SPDMNet net(cfg, 6, 11);
    nn::NoGradGuard g;
    std::vector<long> all(500);
    for (long t = 0; t < 500; ++t) all[static_cast<std::size_t>(t)] = t;
    const nn::Mat E = net.time_embed(all).value();
    EXPECT_TRUE(E.allFinite());
    double min_dist = 1e30;
    for (Eigen::Index a = 0; a < E.rows(); ++a)
        for (Eigen::Index b = a + 1; b < E.rows(); ++b)
            min_dist = std::min(min_dist, static_cast<double>((E.row(a) - E.row(b)).norm()));
    EXPECT_GT(min_dist, 0.0);
    EXPECT_GT(std::abs(static_cast<double>(E.row(0).norm() - E.row(499).norm())), 1e-3);
}

TEST(Denoiser, StateOverheadWithinFifteenPercent) {
    DenoiserConfig cfg;  // library defaults
    SPDMNet net(cfg, EmbedderRegistry::defaults().layout().channels(), 1);
    const double with = static_cast<double>(net.parameter_count(true));
    const double without = static_cast<double>(net.parameter_count(false));
    EXPECT_LE(with / without - 1.0, 0.15);
}

TEST(Denoiser, ParametersJsonRoundTrip) {
    Denoiser a(tiny(), EmbedderRegistry::defaults().layout(), 1);
    Denoiser b(tiny(), EmbedderRegistry::defaults().layout(), 2);
    b.parameters_from_json(a.parameters_to_json());
    const auto cond = random_condition(64, 12);
    EXPECT_EQ(a.denoise_forward(cond, 3, a.zero_state(1, 64)).first.values,
              b.denoise_forward(cond, 3, b.zero_state(1, 64)).first.values);
    auto other = tiny();
    other.base_width = 16;
    Denoiser c(other, EmbedderRegistry::defaults().layout(), 1);
    EXPECT_THROW(c.parameters_from_json(a.parameters_to_json()), CompatibilityError);
}

TEST(Denoiser, LayoutMismatchRejected) {
    Denoiser d(tiny(), EmbedderRegistry::defaults().layout(), 1);
    const std::vector<double> tau(128, 0.0), prior(128, 0.0), mask(64, 0.0), time(64, 0.0);
    const auto cond = assemble(tau, prior, mask, time, {{"other", 4, std::vector<double>(256, 0.0)}});
    EXPECT_THROW(d.denoise_forward(cond, 0, d.zero_state(1, 64)), CompatibilityError);
}
