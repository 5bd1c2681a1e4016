#pragma once

// State-propagating denoiser: Net(A_t, t, s_t) -> (eps_hat, s_{t-1}).
//
// A 1-D UNet over the condition sequence. Level i runs at length L / 2^i and
// width base * 2^i. On the encoder path each level fuses its incoming state
// sequence f^i; after the decoder path of the level a GRU cell takes the
// decoder features as input and f^i as hidden state to produce the outgoing
// f^i. Self-attention runs at the bottleneck only.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conditioning.hpp"
#include "diffusion_math.hpp"
#include "errors.hpp"
#include "nn/autograd.hpp"
#include "nn/layers.hpp"

namespace trajweaver {

enum class FusionMode { Add, Concat, CrossAttention };

inline std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::Add: return "add";
        case FusionMode::Concat: return "concat";
        case FusionMode::CrossAttention: return "cross-attention";
    }
    return "?";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "add") return FusionMode::Add;
    if (s == "concat") return FusionMode::Concat;
    if (s == "cross-attention" || s == "cross") return FusionMode::CrossAttention;
    throw InvalidArgument("unknown fusion mode '" + s + "'");
}

struct DenoiserConfig {
    std::size_t levels = 3;
    std::size_t base_width = 64;
    std::size_t res_blocks = 2;
    std::size_t heads = 4;
    FusionMode fusion = FusionMode::Add;
    std::size_t time_width = 64;
    std::size_t state_divisor = 2;  // state width at level i = width_i / state_divisor
    std::size_t T = 500;            // valid step indices are [0, T)
    bool state_enabled = true;      // false: fusion skipped, state never read
    // Scale of the prior's local bends shown to the network, in normalized
    // units; the trainer sets it from the data. 0 means unit scale.
    double residual_scale = 0.0;

    std::size_t width(std::size_t level) const { return base_width << level; }
    std::size_t state_width(std::size_t level) const { return std::max<std::size_t>(1, width(level) / state_divisor); }
    std::size_t length_multiple() const { return std::size_t{1} << (levels - 1); }

    void validate() const {
        if (levels < 1 || levels > 8) throw InvalidArgument("denoiser: levels must lie in [1, 8]");
        if (base_width < 1 || res_blocks < 1 || time_width < 2 || state_divisor < 1 || T < 2)
            throw InvalidArgument("denoiser: invalid widths or step count");
        if (heads < 1 || width(levels - 1) % heads != 0)
            throw InvalidArgument("denoiser: bottleneck width not divisible by heads");
        if (!(residual_scale >= 0.0) || !std::isfinite(residual_scale))
            throw InvalidArgument("denoiser: residual_scale must be finite and non-negative");
    }
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
    j = {{"levels", c.levels},         {"base_width", c.base_width},     {"res_blocks", c.res_blocks},
         {"heads", c.heads},           {"fusion", to_string(c.fusion)}, {"time_width", c.time_width},
         {"state_divisor", c.state_divisor}, {"T", c.T},                 {"state_enabled", c.state_enabled},
         {"residual_scale", c.residual_scale}};
}

inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
    j.at("levels").get_to(c.levels);
    j.at("base_width").get_to(c.base_width);
    j.at("res_blocks").get_to(c.res_blocks);
    j.at("heads").get_to(c.heads);
    c.fusion = parse_fusion_mode(j.at("fusion").get<std::string>());
    j.at("time_width").get_to(c.time_width);
    j.at("state_divisor").get_to(c.state_divisor);
    j.at("T").get_to(c.T);
    j.at("state_enabled").get_to(c.state_enabled);
    c.residual_scale = j.value("residual_scale", 0.0);
}

/// Multi-scale state for a batch: level i is [B * L/2^i x state_width(i)].
struct PropagationState {
    std::vector<nn::Mat> levels;
    std::size_t batch = 0;
    std::size_t length = 0;  // padded length at level 0
    long t = -1;             // step that will consume this state; -1 when unset

    static PropagationState zeros(const DenoiserConfig& cfg, std::size_t B, std::size_t L) {
        PropagationState s;
        s.batch = B;
        s.length = L;
        for (std::size_t i = 0; i < cfg.levels; ++i)
            s.levels.push_back(nn::Mat::Zero(static_cast<Eigen::Index>(B * (L >> i)),
                                             static_cast<Eigen::Index>(cfg.state_width(i))));
        return s;
    }

    /// Single-sample view of sample b.
    PropagationState slice(std::size_t b) const {
        PropagationState s;
        s.batch = 1;
        s.length = length;
        s.t = t;
        for (std::size_t i = 0; i < levels.size(); ++i) {
            const auto Li = static_cast<Eigen::Index>(length >> i);
            s.levels.push_back(levels[i].middleRows(static_cast<Eigen::Index>(b) * Li, Li));
        }
        return s;
    }

    static PropagationState stack(std::span<const PropagationState> parts) {
        if (parts.empty()) throw ShapeError("PropagationState::stack: nothing to stack");
        PropagationState s;
        s.length = parts[0].length;
        for (const auto& p : parts) {
            if (p.length != s.length || p.levels.size() != parts[0].levels.size())
                throw ShapeError("PropagationState::stack: incompatible parts");
            s.batch += p.batch;
        }
        for (std::size_t i = 0; i < parts[0].levels.size(); ++i) {
            Eigen::Index rows = 0;
            for (const auto& p : parts) rows += p.levels[i].rows();
            nn::Mat m(rows, parts[0].levels[i].cols());
            Eigen::Index off = 0;
            for (const auto& p : parts) {
                m.middleRows(off, p.levels[i].rows()) = p.levels[i];
                off += p.levels[i].rows();
            }
            s.levels.push_back(std::move(m));
        }
        return s;
    }

    double max_abs() const {
        double m = 0.0;
        for (const auto& l : levels) m = std::max(m, static_cast<double>(l.cwiseAbs().maxCoeff()));
        return m;
    }

    bool all_finite() const {
        for (const auto& l : levels)
            if (!l.allFinite()) return false;
        return true;
    }
};

/// How state level f^i enters the block features h at the same resolution.
struct StateFusion {
    FusionMode mode = FusionMode::Add;
    nn::Linear proj;           // add: S->W, concat: (W+S)->W, cross: output S->W
    nn::Linear query, key, value;  // cross-attention only

    StateFusion() = default;
    StateFusion(FusionMode m, Eigen::Index W, Eigen::Index S, std::mt19937_64& rng) : mode(m) {
        switch (mode) {
            case FusionMode::Add: proj = nn::Linear(S, W, rng); break;
            case FusionMode::Concat: proj = nn::Linear(W + S, W, rng); break;
            case FusionMode::CrossAttention:
                query = nn::Linear(W, S, rng);
                key = nn::Linear(S, S, rng);
                value = nn::Linear(S, S, rng);
                proj = nn::Linear(S, W, rng, 0.5f);
                break;
        }
    }

    nn::Var operator()(const nn::Var& h, const nn::Var& f, Eigen::Index B, Eigen::Index L) const {
        if (h.rows() != f.rows()) throw ShapeError("fuse_state: feature/state length mismatch");
        switch (mode) {
            case FusionMode::Add: return nn::add(h, proj(f));
            case FusionMode::Concat: return proj(nn::concat_cols({h, f}));
            case FusionMode::CrossAttention:
                return nn::add(h, proj(nn::attention(query(h), key(f), value(f), B, L, L, 1)));
        }
        return h;
    }

    void collect(const std::string& prefix, nn::NamedParams& out) const {
        proj.collect(prefix + ".proj", out);
        if (mode == FusionMode::CrossAttention) {
            query.collect(prefix + ".query", out);
            key.collect(prefix + ".key", out);
            value.collect(prefix + ".value", out);
        }
    }
};

/// Sinusoidal features of a step index (width must be even-friendly; odd
/// widths drop the last cosine).
inline std::vector<double> sinusoidal_step_features(long t, std::size_t width) {
    std::vector<double> out(width);
    const std::size_t half = width / 2;
    for (std::size_t k = 0; k < half; ++k) {
        const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
        out[k] = std::sin(static_cast<double>(t) * f);
        out[half + k] = std::cos(static_cast<double>(t) * f);
    }
    return out;
}

class SPDMNet {
public:
    struct Output {
        nn::Var eps;                // [B*L x 2]
        std::vector<nn::Var> state; // per level
    };

    SPDMNet() = default;

    SPDMNet(const DenoiserConfig& cfg, std::size_t in_channels, std::uint64_t seed) : cfg_(cfg), in_(in_channels) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        const auto W = [&](std::size_t i) { return static_cast<Eigen::Index>(cfg_.width(i)); };
        const auto S = [&](std::size_t i) { return static_cast<Eigen::Index>(cfg_.state_width(i)); };
        const auto TW = static_cast<Eigen::Index>(cfg_.time_width);

        time_fc1_ = nn::Linear(TW, TW, rng);
        time_fc2_ = nn::Linear(TW, TW, rng);
        conv_in_ = nn::Conv1d(static_cast<Eigen::Index>(in_ + kDetailChannels), W(0), rng);
        for (std::size_t i = 0; i < cfg_.levels; ++i) {
            Level lv;
            if (i > 0) lv.down = nn::Linear(W(i - 1), W(i), rng);
            lv.fuse = StateFusion(cfg_.fusion, W(i), S(i), rng);
            for (std::size_t r = 0; r < cfg_.res_blocks; ++r) lv.enc.emplace_back(W(i), TW, rng);
            if (i + 1 < cfg_.levels) lv.up = nn::Linear(W(i + 1), W(i), rng);
            lv.merge = nn::Linear(2 * W(i), W(i), rng);
            for (std::size_t r = 0; r < cfg_.res_blocks; ++r) lv.dec.emplace_back(W(i), TW, rng);
            lv.gru = nn::GRUCell(W(i), S(i), rng);
            levels_.push_back(std::move(lv));
        }
        mid_attn_ = nn::SelfAttention(W(cfg_.levels - 1), static_cast<Eigen::Index>(cfg_.heads), rng);
        out_norm_ = nn::LayerNorm(W(0));
        out_ = nn::Linear(W(0), 2, rng, 0.1f);
    }

    const DenoiserConfig& config() const noexcept { return cfg_; }
    std::size_t in_channels() const noexcept { return in_; }
    void set_state_enabled(bool on) { cfg_.state_enabled = on; }

    /// Learned time embedding: sinusoid(t) -> Linear -> SiLU -> Linear. [B x TW]
    nn::Var time_embed(std::span<const long> t) const {
        const auto TW = static_cast<Eigen::Index>(cfg_.time_width);
        nn::Mat feats(static_cast<Eigen::Index>(t.size()), TW);
        for (std::size_t b = 0; b < t.size(); ++b) {
            if (t[b] < 0 || static_cast<std::size_t>(t[b]) >= cfg_.T)
                throw OutOfRange("time_embed: step " + std::to_string(t[b]) + " outside [0, " +
                                 std::to_string(cfg_.T) + ")");
            const auto f = sinusoidal_step_features(t[b], cfg_.time_width);
            for (Eigen::Index c = 0; c < TW; ++c) feats(static_cast<Eigen::Index>(b), c) = static_cast<nn::Real>(f[c]);
        }
        return time_fc2_(nn::silu(time_fc1_(nn::constant(std::move(feats)))));
    }

    Output forward(const nn::Var& x, std::span<const long> t, const std::vector<nn::Var>& state, std::size_t B,
                   std::size_t L) const {
        if (L % cfg_.length_multiple() != 0)
            throw InvalidArgument("denoiser: length " + std::to_string(L) + " not divisible by " +
                                  std::to_string(cfg_.length_multiple()));
        if (x.rows() != static_cast<Eigen::Index>(B * L) || x.cols() != static_cast<Eigen::Index>(in_))
            throw ShapeError("denoiser: input must be [B*L x " + std::to_string(in_) + "]");
        if (t.size() != B) throw ShapeError("denoiser: one step index per sample required");
        if (state.size() != cfg_.levels) throw ShapeError("denoiser: state level count mismatch");
        for (std::size_t i = 0; i < cfg_.levels; ++i)
            if (state[i].rows() != static_cast<Eigen::Index>(B * (L >> i)) ||
                state[i].cols() != static_cast<Eigen::Index>(cfg_.state_width(i)))
                throw ShapeError("denoiser: state level " + std::to_string(i) + " has shape " +
                                 std::to_string(state[i].rows()) + "x" + std::to_string(state[i].cols()));

        const auto Bi = static_cast<Eigen::Index>(B);
        const nn::Var temb = time_embed(t);
        nn::Var h = conv_in_(nn::constant(input_features(x.value(), B, L)), Bi, static_cast<Eigen::Index>(L));
        std::vector<nn::Var> skips;
        for (std::size_t i = 0; i < cfg_.levels; ++i) {
            const auto Li = static_cast<Eigen::Index>(L >> i);
            const Level& lv = levels_[i];
            if (i > 0) h = lv.down(nn::avg_pool2(h));
            if (cfg_.state_enabled) h = lv.fuse(h, state[i], Bi, Li);
            for (const auto& blk : lv.enc) h = blk(h, temb, Bi, Li);
            skips.push_back(h);
        }
        h = mid_attn_(h, Bi, static_cast<Eigen::Index>(L >> (cfg_.levels - 1)));
        std::vector<nn::Var> next(cfg_.levels);
        for (std::size_t ii = cfg_.levels; ii-- > 0;) {
            const auto Li = static_cast<Eigen::Index>(L >> ii);
            const Level& lv = levels_[ii];
            if (ii + 1 < cfg_.levels) h = lv.up(nn::upsample2(h));
            h = lv.merge(nn::concat_cols({h, skips[ii]}));
            for (const auto& blk : lv.dec) h = blk(h, temb, Bi, Li);
            next[ii] = lv.gru(h, state[ii]);
        }
        return {out_(nn::silu(out_norm_(h))), std::move(next)};
    }

    nn::NamedParams parameters() const {
        nn::NamedParams p;
        time_fc1_.collect("time.fc1", p);
        time_fc2_.collect("time.fc2", p);
        conv_in_.collect("conv_in", p);
        for (std::size_t i = 0; i < levels_.size(); ++i) {
            const std::string pre = "level" + std::to_string(i);
            const Level& lv = levels_[i];
            if (i > 0) lv.down.collect(pre + ".down", p);
            lv.fuse.collect(pre + ".state_fuse", p);
            for (std::size_t r = 0; r < lv.enc.size(); ++r) lv.enc[r].collect(pre + ".enc" + std::to_string(r), p);
            if (i + 1 < levels_.size()) lv.up.collect(pre + ".up", p);
            lv.merge.collect(pre + ".merge", p);
            for (std::size_t r = 0; r < lv.dec.size(); ++r) lv.dec[r].collect(pre + ".dec" + std::to_string(r), p);
            lv.gru.collect(pre + ".state_gru", p);
        }
        mid_attn_.collect("mid_attn", p);
        out_norm_.collect("out.norm", p);
        out_.collect("out.proj", p);
        return p;
    }

    /// Parameters belonging to the state machinery (fusion + recurrent cells).
    static bool is_state_param(const std::string& name) {
        return name.find(".state_fuse") != std::string::npos || name.find(".state_gru") != std::string::npos;
    }
    static bool is_recurrent_param(const std::string& name) { return name.find(".state_gru") != std::string::npos; }

    std::size_t parameter_count(bool include_state = true) const {
        std::size_t n = 0;
        for (const auto& [name, v] : parameters())
            if (include_state || !is_state_param(name)) n += static_cast<std::size_t>(v.value().size());
        return n;
    }

private:
    // The prior is shown relative to the sequence's first row, and two extra
    // channels carry its local bend (row minus the mean of its neighbours),
    // both in units of residual_scale.
    static constexpr Eigen::Index kPriorCol = 2;
    static constexpr double kPriorSpread = 16.0;
    static constexpr Eigen::Index kDetailChannels = 2;

    nn::Mat input_features(const nn::Mat& x, std::size_t B, std::size_t L) const {
        const double s = cfg_.residual_scale > 0.0 ? cfg_.residual_scale : 1.0;
        const Eigen::Index C = x.cols();
        nn::Mat in = nn::Mat::Zero(x.rows(), C + kDetailChannels);
        in.leftCols(C) = x;
        const auto Li = static_cast<Eigen::Index>(L);
        for (std::size_t b = 0; b < B; ++b) {
            const auto r0 = static_cast<Eigen::Index>(b * L);
            Eigen::Index end = r0 + Li;  // first padding row
            while (end > r0 && x.row(end - 1).isZero(0.0)) --end;
            for (Eigen::Index c = 0; c < 2; ++c) {
                const double origin = x(r0, kPriorCol + c);
                for (Eigen::Index r = r0; r < end; ++r) {
                    const double prior = x(r, kPriorCol + c);
                    in(r, kPriorCol + c) = static_cast<nn::Real>((prior - origin) / (kPriorSpread * s));
                    if (r > r0 && r + 1 < end) {
                        const double mid = 0.5 * (x(r - 1, kPriorCol + c) + x(r + 1, kPriorCol + c));
                        in(r, C + c) = static_cast<nn::Real>((prior - mid) / s);
                    }
                }
            }
        }
        return in;
    }

    struct Level {
        nn::Linear down, up, merge;
        StateFusion fuse;
        std::vector<nn::ResBlock> enc, dec;
        nn::GRUCell gru;
    };

    DenoiserConfig cfg_;
    std::size_t in_ = 0;
    nn::Linear time_fc1_, time_fc2_;
    nn::Conv1d conv_in_;
    std::vector<Level> levels_;
    nn::SelfAttention mid_attn_;
    nn::LayerNorm out_norm_;
    nn::Linear out_;
};

/// Stand-alone state update used by the network after each decoder level;
/// exposed for tests of the recurrent path.
inline std::vector<nn::Var> update_state(const std::vector<nn::GRUCell>& cells, const std::vector<nn::Var>& features,
                                         const std::vector<nn::Var>& incoming) {
    if (cells.size() != features.size() || features.size() != incoming.size())
        throw ShapeError("update_state: level count mismatch");
    std::vector<nn::Var> out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (features[i].rows() != incoming[i].rows() || incoming[i].cols() != cells[i].hidden)
            throw ShapeError("update_state: level " + std::to_string(i) + " shape mismatch");
        out.push_back(cells[i](features[i], incoming[i]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch packing between AggregatedCondition (double, unpadded) and network
// matrices (float, padded).

inline std::size_t padded_length(std::size_t L, const DenoiserConfig& cfg) {
    const std::size_t m = cfg.length_multiple();
    return (L + m - 1) / m * m;
}

/// Stacks conditions into [B*Lp x C]; rows beyond each L are zero.
inline nn::Mat pack_conditions(std::span<const AggregatedCondition* const> conds, std::size_t Lp) {
    if (conds.empty()) throw ShapeError("pack_conditions: empty batch");
    const std::size_t C = conds[0]->layout.channels();
    nn::Mat m = nn::Mat::Zero(static_cast<Eigen::Index>(conds.size() * Lp), static_cast<Eigen::Index>(C));
    for (std::size_t b = 0; b < conds.size(); ++b) {
        const auto& c = *conds[b];
        if (c.layout.channels() != C) throw ShapeError("pack_conditions: channel count differs within batch");
        if (c.L > Lp) throw ShapeError("pack_conditions: sequence longer than padded length");
        for (std::size_t i = 0; i < c.L; ++i)
            for (std::size_t ch = 0; ch < C; ++ch)
                m(static_cast<Eigen::Index>(b * Lp + i), static_cast<Eigen::Index>(ch)) =
                    static_cast<nn::Real>(c.data[i * C + ch]);
    }
    return m;
}

struct EpsPrediction {
    std::vector<double> values;  // [L x 2]
};

/// Inference wrapper binding a network to a condition layout.
class Denoiser {
public:
    Denoiser(const DenoiserConfig& cfg, ConditionLayout layout, std::uint64_t seed)
        : layout_(std::move(layout)), net_(cfg, layout_.channels(), seed) {}

    const DenoiserConfig& config() const noexcept { return net_.config(); }
    const ConditionLayout& layout() const noexcept { return layout_; }
    SPDMNet& net() noexcept { return net_; }
    const SPDMNet& net() const noexcept { return net_; }

    PropagationState zero_state(std::size_t B, std::size_t L) const {
        return PropagationState::zeros(config(), B, padded_length(L, config()));
    }

    struct BatchResult {
        std::vector<EpsPrediction> eps;
        PropagationState state;
    };

    /// Evaluation-mode forward for a batch of equal-length conditions.
    BatchResult denoise_forward(std::span<const AggregatedCondition* const> conds, std::span<const long> t,
                                const PropagationState& state) const {
        nn::NoGradGuard guard;
        if (conds.empty()) throw ShapeError("denoise_forward: empty batch");
        const std::size_t L = conds[0]->L;
        for (const auto* c : conds) {
            if (c->L != L) throw ShapeError("denoise_forward: batch sequences differ in length");
            if (!(c->layout == layout_))
                throw CompatibilityError("denoise_forward: condition layout differs from the model's");
        }
        const std::size_t Lp = padded_length(L, config());
        if (state.batch != conds.size() || state.length != Lp)
            throw ShapeError("denoise_forward: state is for batch " + std::to_string(state.batch) + " x length " +
                             std::to_string(state.length) + ", input is " + std::to_string(conds.size()) + " x " +
                             std::to_string(Lp));
        std::vector<nn::Var> s;
        for (const auto& lvl : state.levels) s.push_back(nn::constant(lvl));
        auto out = net_.forward(nn::constant(pack_conditions(conds, Lp)), t, s, conds.size(), Lp);

        BatchResult r;
        r.state.batch = conds.size();
        r.state.length = Lp;
        for (auto& v : out.state) r.state.levels.push_back(v.value());
        const auto& E = out.eps.value();
        for (std::size_t b = 0; b < conds.size(); ++b) {
            EpsPrediction p;
            p.values.resize(2 * L);
            for (std::size_t i = 0; i < L; ++i) {
                p.values[2 * i] = E(static_cast<Eigen::Index>(b * Lp + i), 0);
                p.values[2 * i + 1] = E(static_cast<Eigen::Index>(b * Lp + i), 1);
            }
            r.eps.push_back(std::move(p));
        }
        return r;
    }

    std::pair<EpsPrediction, PropagationState> denoise_forward(const AggregatedCondition& cond, long t,
                                                               const PropagationState& state) const {
        const AggregatedCondition* c = &cond;
        const long ts[1] = {t};
        auto r = denoise_forward(std::span<const AggregatedCondition* const>(&c, 1), ts, state);
        return {std::move(r.eps[0]), std::move(r.state)};
    }

    nlohmann::json parameters_to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [name, v] : net_.parameters()) {
            const auto& m = v.value();
            std::vector<float> data(m.data(), m.data() + m.size());
            j[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
        }
        return j;
    }

    void parameters_from_json(const nlohmann::json& j) {
        for (auto& [name, v] : net_.parameters()) {
            if (!j.contains(name)) throw CompatibilityError("checkpoint lacks parameter '" + name + "'");
            const auto& e = j.at(name);
            const auto rows = e.at("rows").get<Eigen::Index>();
            const auto cols = e.at("cols").get<Eigen::Index>();
            if (rows != v.rows() || cols != v.cols())
                throw CompatibilityError("parameter '" + name + "' shape differs from configuration");
            const auto data = e.at("data").get<std::vector<float>>();
            if (static_cast<Eigen::Index>(data.size()) != rows * cols)
                throw CompatibilityError("parameter '" + name + "' has wrong element count");
            nn::Var p = v;
            std::copy(data.begin(), data.end(), p.value_mut().data());
        }
    }

private:
    ConditionLayout layout_;
    SPDMNet net_;
};

}  // namespace trajweaver
