#pragma once

// Aggregated condition A_t: every per-position input of the denoiser laid out
// as channels of one [L x C] row-major array,
//
//   noisy_xy(2) | prior_xy(2) | mask(1) | time(1) | context blocks ...
//
// Observed rows (mask = 0) carry their exact normalized coordinates in
// noisy_xy at every step; only the mask = 1 rows of noisy_xy ever change.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "rng.hpp"
#include "traj_data.hpp"

namespace trajweaver {

struct ChannelSpan {
    std::string name;
    std::size_t offset = 0;
    std::size_t width = 0;

    friend bool operator==(const ChannelSpan&, const ChannelSpan&) = default;
};

inline constexpr const char* kNoisyXY = "noisy_xy";
inline constexpr const char* kPriorXY = "prior_xy";
inline constexpr const char* kMask = "mask";
inline constexpr const char* kTime = "time";

class ConditionLayout {
public:
    ConditionLayout() = default;

    /// Fixed blocks followed by the given context blocks, in order.
    explicit ConditionLayout(const std::vector<std::pair<std::string, std::size_t>>& contexts) {
        push(kNoisyXY, 2);
        push(kPriorXY, 2);
        push(kMask, 1);
        push(kTime, 1);
        for (const auto& [name, width] : contexts) push(name, width);
    }

    std::size_t channels() const noexcept { return total_; }
    const std::vector<ChannelSpan>& spans() const noexcept { return spans_; }

    const ChannelSpan& at(const std::string& name) const {
        for (const auto& s : spans_)
            if (s.name == name) return s;
        throw InvalidArgument("condition layout has no block named '" + name + "'");
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& s : spans_) j.push_back({s.name, s.width});
        return j;
    }

    static ConditionLayout from_json(const nlohmann::json& j) {
        ConditionLayout l;
        for (const auto& e : j) l.push(e.at(0).get<std::string>(), e.at(1).get<std::size_t>());
        return l;
    }

    friend bool operator==(const ConditionLayout&, const ConditionLayout&) = default;

private:
    void push(const std::string& name, std::size_t width) {
        for (const auto& s : spans_)
            if (s.name == name) throw InvalidArgument("duplicate condition block '" + name + "'");
        if (width == 0) throw InvalidArgument("condition block '" + name + "' has zero width");
        spans_.push_back({name, total_, width});
        total_ += width;
    }

    std::vector<ChannelSpan> spans_;
    std::size_t total_ = 0;
};

struct AggregatedCondition {
    std::vector<double> data;  // L x channels, row-major
    ConditionLayout layout;
    std::size_t L = 0;
    long t = 0;

    double at(std::size_t row, std::size_t channel) const { return data[row * layout.channels() + channel]; }
    double& at(std::size_t row, std::size_t channel) { return data[row * layout.channels() + channel]; }
    double mask(std::size_t row) const { return at(row, layout.at(kMask).offset); }
};

// ---------------------------------------------------------------------------
// Context embedders

/// What an embedder may read: the merged timeline (normalized) and the raw
/// per-task context payloads.
struct EmbedInput {
    std::span<const double> norm_times;
    const RawContexts& contexts;
};

class ContextEmbedder {
public:
    virtual ~ContextEmbedder() = default;
    virtual std::string name() const = 0;
    virtual std::size_t width() const = 0;
    /// Returns [L x width] row-major, L = norm_times.size().
    virtual std::vector<double> embed(const EmbedInput& in) const = 0;
    virtual nlohmann::json describe() const = 0;
};

/// Sinusoidal features of the normalized timestamp: sin/cos at frequencies
/// pi * 2^k, k = 0, 1, ...
class TimeEmbedder final : public ContextEmbedder {
public:
    explicit TimeEmbedder(std::size_t width, std::string name = "time_embed") : width_(width), name_(std::move(name)) {
        if (width_ == 0) throw InvalidArgument("time_embedder: width must be positive");
    }
    std::string name() const override { return name_; }
    std::size_t width() const override { return width_; }

    std::vector<double> embed(const EmbedInput& in) const override {
        std::vector<double> out(in.norm_times.size() * width_);
        for (std::size_t i = 0; i < in.norm_times.size(); ++i)
            for (std::size_t c = 0; c < width_; ++c) {
                const double f = M_PI * std::ldexp(1.0, static_cast<int>(c / 2));
                const double a = f * in.norm_times[i];
                out[i * width_ + c] = (c % 2 == 0) ? std::sin(a) : std::cos(a);
            }
        return out;
    }

    nlohmann::json describe() const override { return {{"type", "time"}, {"name", name_}, {"width", width_}}; }

private:
    std::size_t width_;
    std::string name_;
};

/// Per-trajectory categorical context (e.g. a user ID) looked up in a
/// seeded table and broadcast along the timeline. Row 0 is "unknown".
class IdEmbedder final : public ContextEmbedder {
public:
    IdEmbedder(std::string name, std::string key, std::size_t n_ids, std::size_t width, std::uint64_t seed)
        : name_(std::move(name)), key_(std::move(key)), n_ids_(n_ids), width_(width), seed_(seed) {
        if (width_ == 0) throw InvalidArgument("id_embedder: width must be positive");
        Rng rng(seed_);
        std::normal_distribution<double> N(0.0, 0.5);
        table_.resize((n_ids_ + 1) * width_);
        for (auto& v : table_) v = std::clamp(N(rng), -1.0, 1.0);
    }
    std::string name() const override { return name_; }
    std::size_t width() const override { return width_; }

    std::size_t row_for(const RawContexts& ctx) const {
        auto it = ctx.find(key_);
        if (it == ctx.end() || !it->second.is_number_integer()) return 0;
        const auto id = it->second.get<long long>();
        if (id < 0 || static_cast<std::size_t>(id) >= n_ids_) return 0;
        return static_cast<std::size_t>(id) + 1;
    }

    std::vector<double> embed(const EmbedInput& in) const override {
        const std::size_t row = row_for(in.contexts);
        std::vector<double> out(in.norm_times.size() * width_);
        for (std::size_t i = 0; i < in.norm_times.size(); ++i)
            std::copy_n(table_.begin() + static_cast<std::ptrdiff_t>(row * width_), width_,
                        out.begin() + static_cast<std::ptrdiff_t>(i * width_));
        return out;
    }

    nlohmann::json describe() const override {
        return {{"type", "id"}, {"name", name_}, {"key", key_}, {"n_ids", n_ids_}, {"width", width_}, {"seed", seed_}};
    }

private:
    std::string name_, key_;
    std::size_t n_ids_, width_;
    std::uint64_t seed_;
    std::vector<double> table_;
};

/// Ordered set of embedders; order determines the layout.
class EmbedderRegistry {
public:
    EmbedderRegistry() = default;
    EmbedderRegistry(EmbedderRegistry&&) = default;
    EmbedderRegistry& operator=(EmbedderRegistry&&) = default;

    EmbedderRegistry& add(std::shared_ptr<const ContextEmbedder> e) {
        for (const auto& x : items_)
            if (x->name() == e->name()) throw InvalidArgument("embedder '" + e->name() + "' registered twice");
        items_.push_back(std::move(e));
        return *this;
    }

    const std::vector<std::shared_ptr<const ContextEmbedder>>& items() const noexcept { return items_; }

    ConditionLayout layout() const {
        std::vector<std::pair<std::string, std::size_t>> blocks;
        for (const auto& e : items_) blocks.emplace_back(e->name(), e->width());
        return ConditionLayout(blocks);
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& e : items_) j.push_back(e->describe());
        return j;
    }

    static EmbedderRegistry from_json(const nlohmann::json& j) {
        EmbedderRegistry r;
        for (const auto& d : j) {
            const auto type = d.at("type").get<std::string>();
            if (type == "time")
                r.add(std::make_shared<TimeEmbedder>(d.at("width").get<std::size_t>(), d.at("name").get<std::string>()));
            else if (type == "id")
                r.add(std::make_shared<IdEmbedder>(d.at("name").get<std::string>(), d.at("key").get<std::string>(),
                                                   d.at("n_ids").get<std::size_t>(), d.at("width").get<std::size_t>(),
                                                   d.at("seed").get<std::uint64_t>()));
            else
                throw CompatibilityError("unknown embedder type '" + type + "'");
        }
        return r;
    }

    /// Default set used by the CLI: one sinusoidal time embedder.
    static EmbedderRegistry defaults() {
        EmbedderRegistry r;
        r.add(std::make_shared<TimeEmbedder>(4));
        return r;
    }

private:
    std::vector<std::shared_ptr<const ContextEmbedder>> items_;
};

// ---------------------------------------------------------------------------
// Assembly

/// 1 at query rows, 0 at observed rows.
inline std::vector<double> build_mask(std::size_t sparse_len, std::span<const std::size_t> query_positions,
                                      std::size_t L) {
    if (sparse_len + query_positions.size() != L)
        throw ShapeError("build_mask: sparse + query lengths do not sum to L");
    std::vector<double> mask(L, 0.0);
    for (std::size_t p : query_positions) {
        if (p >= L) throw OutOfRange("build_mask: query position " + std::to_string(p) + " >= L");
        if (mask[p] != 0.0) throw InvalidArgument("build_mask: duplicate query position " + std::to_string(p));
        mask[p] = 1.0;
    }
    return mask;
}

struct EmbeddingBlock {
    std::string name;
    std::size_t width = 0;
    std::vector<double> data;  // L x width
};

/// Channel-wise concatenation in layout order. tau_t and prior are [L x 2].
inline AggregatedCondition assemble(std::span<const double> tau_t, std::span<const double> prior,
                                    std::span<const double> mask, std::span<const double> time,
                                    const std::vector<EmbeddingBlock>& embeddings, long t = 0) {
    const std::size_t L = mask.size();
    auto check = [L](std::size_t got, std::size_t width, const std::string& name) {
        if (got != L * width)
            throw ShapeError("assemble: block '" + name + "' has " + std::to_string(got) + " values, expected " +
                             std::to_string(L * width));
    };
    check(tau_t.size(), 2, kNoisyXY);
    check(prior.size(), 2, kPriorXY);
    check(time.size(), 1, kTime);
    std::vector<std::pair<std::string, std::size_t>> ctx;
    for (const auto& e : embeddings) {
        check(e.data.size(), e.width, e.name);
        ctx.emplace_back(e.name, e.width);
    }
    for (double m : mask)
        if (m != 0.0 && m != 1.0) throw InvalidArgument("assemble: mask entries must be 0 or 1");

    AggregatedCondition c;
    c.layout = ConditionLayout(ctx);
    c.L = L;
    c.t = t;
    const std::size_t C = c.layout.channels();
    c.data.assign(L * C, 0.0);
    for (std::size_t i = 0; i < L; ++i) {
        double* row = c.data.data() + i * C;
        row[0] = tau_t[2 * i];
        row[1] = tau_t[2 * i + 1];
        row[2] = prior[2 * i];
        row[3] = prior[2 * i + 1];
        row[4] = mask[i];
        row[5] = time[i];
        std::size_t off = 6;
        for (const auto& e : embeddings) {
            std::copy_n(e.data.begin() + static_cast<std::ptrdiff_t>(i * e.width), e.width, row + off);
            off += e.width;
        }
    }
    return c;
}

/// New condition with the noisy_xy channels of mask = 1 rows replaced by
/// `x_query` ([m x 2], rows in timeline order). Nothing else changes.
inline AggregatedCondition refresh(const AggregatedCondition& cond, std::span<const double> x_query,
                                   std::optional<long> t = std::nullopt) {
    AggregatedCondition out = cond;
    const std::size_t C = cond.layout.channels();
    const std::size_t noisy = cond.layout.at(kNoisyXY).offset;
    const std::size_t mask = cond.layout.at(kMask).offset;
    std::size_t k = 0;
    for (std::size_t i = 0; i < cond.L; ++i) {
        if (cond.data[i * C + mask] != 1.0) continue;
        if (2 * k + 1 >= x_query.size())
            throw ShapeError("refresh: fewer values than mask = 1 rows");
        out.data[i * C + noisy] = x_query[2 * k];
        out.data[i * C + noisy + 1] = x_query[2 * k + 1];
        ++k;
    }
    if (2 * k != x_query.size()) throw ShapeError("refresh: more values than mask = 1 rows");
    if (t) out.t = *t;
    return out;
}

/// FNV-1a over every channel except noisy_xy at mask = 1 rows.
inline std::uint64_t fixed_checksum(const AggregatedCondition& cond) {
    const std::size_t C = cond.layout.channels();
    const std::size_t noisy = cond.layout.at(kNoisyXY).offset;
    const std::size_t mask = cond.layout.at(kMask).offset;
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < cond.L; ++i) {
        const bool query = cond.data[i * C + mask] == 1.0;
        for (std::size_t c = 0; c < C; ++c) {
            if (query && (c == noisy || c == noisy + 1)) continue;
            std::uint64_t bits;
            std::memcpy(&bits, &cond.data[i * C + c], sizeof bits);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xFF;
                h *= 0x100000001B3ULL;
            }
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Encoded task: everything about one recovery problem that stays fixed
// across denoising steps, in normalized units.

struct EncodedTask {
    MergedTimeline timeline;
    std::vector<double> observed_xy;  // [L x 2] frame values; query rows, and all rows in the residual frame, zero
    std::vector<double> prior_xy;     // [L x 2]
    std::vector<double> mask;         // [L]
    std::vector<double> norm_time;    // [L]
    std::vector<double> truth;        // [m x 2] in the diffusion frame, empty when unknown
    double residual_scale = 0.0;      // diffusion frame, see NormStats
    AggregatedCondition base;         // A_t with query rows of noisy_xy at 0

    std::size_t L() const noexcept { return mask.size(); }
    std::size_t m() const noexcept { return timeline.query_positions.size(); }

    /// Normalized coordinate of query value `v` (channel c of query q).
    double to_normalized(double v, std::size_t q, std::size_t c) const {
        return residual_scale > 0.0 ? prior_xy[2 * timeline.query_positions[q] + c] + residual_scale * v : v;
    }
    double to_frame(double u, std::size_t q, std::size_t c) const {
        return residual_scale > 0.0 ? (u - prior_xy[2 * timeline.query_positions[q] + c]) / residual_scale : u;
    }

    AggregatedCondition condition(std::span<const double> x_query, long t) const { return refresh(base, x_query, t); }
};

inline EncodedTask encode_task(const RecoveryTask& task, const EmbedderRegistry& embedders,
                               std::span<const XY> truth = {}) {
    EncodedTask e;
    e.timeline = merge_timeline(task.sparse, task.query);
    const std::size_t L = e.timeline.times.size();
    const Trajectory prior = linear_prior(task.sparse, task.query);

    e.observed_xy.assign(2 * L, 0.0);
    e.prior_xy.resize(2 * L);
    e.norm_time.resize(L);
    for (std::size_t i = 0; i < L; ++i) {
        const auto& p = prior.points[i];
        const XY u = normalize_xy(p.lng, p.lat, task.norm);
        e.prior_xy[2 * i] = u[0];
        e.prior_xy[2 * i + 1] = u[1];
        e.norm_time[i] = normalize_time(e.timeline.times[i], task.norm);
    }
    e.residual_scale = task.norm.residual_scale;
    for (std::size_t k = 0; k < task.sparse.size() && e.residual_scale == 0.0; ++k) {
        const auto& p = task.sparse.points[k];
        const XY u = normalize_xy(p.lng, p.lat, task.norm);
        const std::size_t row = e.timeline.sparse_positions[k];
        e.observed_xy[2 * row] = u[0];
        e.observed_xy[2 * row + 1] = u[1];
    }
    e.mask = build_mask(task.sparse.size(), e.timeline.query_positions, L);

    if (!truth.empty()) {
        if (truth.size() != e.m()) throw ShapeError("encode_task: truth size differs from query size");
        e.truth.reserve(2 * truth.size());
        for (std::size_t q = 0; q < truth.size(); ++q) {
            const XY u = normalize_xy(truth[q][0], truth[q][1], task.norm);
            e.truth.push_back(e.to_frame(u[0], q, 0));
            e.truth.push_back(e.to_frame(u[1], q, 1));
        }
    }

    std::vector<EmbeddingBlock> blocks;
    const EmbedInput in{e.norm_time, task.contexts};
    for (const auto& emb : embedders.items()) {
        auto data = emb->embed(in);
        blocks.push_back({emb->name(), emb->width(), std::move(data)});
    }
    e.base = assemble(e.observed_xy, e.prior_xy, e.mask, e.norm_time, blocks, 0);
    return e;
}

}  // namespace trajweaver
