#pragma once

// Recovery rollouts. Query rows start as unit Gaussian noise at step T-1 and
// are denoised down to the clean estimate; observed rows never change.
//
//   ddpm    - every step, ancestral posterior sampling, state threaded
//   ddim    - deterministic jumps over a sub-schedule, state reset each step
//   sp-ddim - as ddim but the emitted state feeds the next visited step

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "conditioning.hpp"
#include "denoiser.hpp"
#include "diffusion_math.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "traj_data.hpp"

namespace trajweaver {

enum class SamplerKind { DDPM, DDIM, SPDDIM };

inline std::string to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::DDPM: return "ddpm";
        case SamplerKind::DDIM: return "ddim";
        case SamplerKind::SPDDIM: return "sp-ddim";
    }
    return "?";
}

inline SamplerKind parse_sampler_kind(const std::string& s) {
    if (s == "ddpm") return SamplerKind::DDPM;
    if (s == "ddim") return SamplerKind::DDIM;
    if (s == "sp-ddim" || s == "spddim") return SamplerKind::SPDDIM;
    throw InvalidArgument("unknown sampler '" + s + "'");
}

struct SamplerSpec {
    SamplerKind kind = SamplerKind::SPDDIM;
    std::size_t steps = 21;
    std::uint64_t seed = 0;

    void validate(std::size_t T) const {
        if (kind == SamplerKind::DDPM && steps != T)
            throw InvalidArgument("sampler: ddpm visits every step, so steps must equal T = " + std::to_string(T));
        if (steps < 2 || steps > T)
            throw InvalidArgument("sampler: steps must lie in [2, " + std::to_string(T) + "]");
    }
};

/// Evenly spaced indices from T-1 down to 0 inclusive, rounded to integers.
inline std::vector<long> make_step_schedule(std::size_t T, std::size_t steps) {
    if (steps < 2 || steps > T) throw InvalidArgument("make_step_schedule: need 2 <= steps <= T");
    std::vector<long> out(steps);
    const double span = static_cast<double>(T - 1);
    for (std::size_t i = 0; i < steps; ++i)
        out[i] = static_cast<long>(std::llround(span - span * static_cast<double>(i) / static_cast<double>(steps - 1)));
    return out;
}

// ---------------------------------------------------------------------------
// Predictors

/// Source of noise predictions for a batch of conditions.
class EpsPredictor {
public:
    virtual ~EpsPredictor() = default;
    virtual PropagationState initial_state(std::size_t B, std::size_t L) const = 0;
    virtual Denoiser::BatchResult predict(std::span<const AggregatedCondition* const> conds, std::span<const long> t,
                                          const PropagationState& state) const = 0;
};

class ModelPredictor final : public EpsPredictor {
public:
    explicit ModelPredictor(std::shared_ptr<const Denoiser> model) : model_(std::move(model)) {}

    PropagationState initial_state(std::size_t B, std::size_t L) const override { return model_->zero_state(B, L); }

    Denoiser::BatchResult predict(std::span<const AggregatedCondition* const> conds, std::span<const long> t,
                                  const PropagationState& state) const override {
        return model_->denoise_forward(conds, t, state);
    }

private:
    std::shared_ptr<const Denoiser> model_;
};

/// Knows the clean query coordinates and returns the noise that maps them
/// onto the current noisy values: a perfect denoiser.
class OraclePredictor final : public EpsPredictor {
public:
    OraclePredictor(std::vector<std::vector<double>> truths, const NoiseSchedule& sched)
        : truths_(std::move(truths)), sched_(&sched) {}

    PropagationState initial_state(std::size_t B, std::size_t L) const override {
        PropagationState s;
        s.batch = B;
        s.length = L;
        return s;
    }

    Denoiser::BatchResult predict(std::span<const AggregatedCondition* const> conds, std::span<const long> t,
                                  const PropagationState& state) const override {
        Denoiser::BatchResult r;
        r.state = state;
        for (std::size_t b = 0; b < conds.size(); ++b) {
            const auto& c = *conds[b];
            const std::size_t C = c.layout.channels();
            const std::size_t noisy = c.layout.at(kNoisyXY).offset;
            std::vector<double> xq;
            std::vector<std::size_t> rows;
            for (std::size_t i = 0; i < c.L; ++i)
                if (c.mask(i) == 1.0) {
                    xq.push_back(c.data[i * C + noisy]);
                    xq.push_back(c.data[i * C + noisy + 1]);
                    rows.push_back(i);
                }
            const Array eps = implied_noise(xq, truths_.at(b), t[b], *sched_);
            EpsPrediction p;
            p.values.assign(2 * c.L, 0.0);
            for (std::size_t q = 0; q < rows.size(); ++q) {
                p.values[2 * rows[q]] = eps[2 * q];
                p.values[2 * rows[q] + 1] = eps[2 * q + 1];
            }
            r.eps.push_back(std::move(p));
        }
        return r;
    }

private:
    std::vector<std::vector<double>> truths_;
    const NoiseSchedule* sched_;
};

// ---------------------------------------------------------------------------
// Rollout

/// Called at every visited step with the step index and the batch's A_t.
using StepObserver = std::function<void(long, std::span<const AggregatedCondition>, const PropagationState&)>;

struct RolloutOptions {
    StepObserver observer;
    bool sever_state = false;  // force a zero incoming state at every step
};

/// Runs one rollout over a batch of equal-length encoded tasks and returns
/// the query values ([m x 2]) of each task in its diffusion frame.
inline std::vector<Array> rollout(std::span<const EncodedTask> tasks, const EpsPredictor& predictor,
                                  const SamplerSpec& spec, const NoiseSchedule& sched,
                                  const RolloutOptions& opts = {}) {
    spec.validate(sched.T());
    if (tasks.empty()) return {};
    const std::size_t B = tasks.size();
    const std::size_t L = tasks[0].L();
    for (const auto& t : tasks)
        if (t.L() != L) throw ShapeError("rollout: batch tasks differ in merged length");

    const std::vector<long> visited = spec.kind == SamplerKind::DDPM ? make_step_schedule(sched.T(), sched.T())
                                                                     : make_step_schedule(sched.T(), spec.steps);
    Rng init_rng(derive_seed(spec.seed, "init-noise"));
    Rng rollout_rng(derive_seed(spec.seed, "rollout-noise"));

    std::vector<Array> x(B);
    for (std::size_t b = 0; b < B; ++b) x[b] = gaussian_vector(init_rng, 2 * tasks[b].m());

    const PropagationState zero = predictor.initial_state(B, L);
    PropagationState state = zero;
    const bool thread_state = spec.kind != SamplerKind::DDIM && !opts.sever_state;

    for (std::size_t v = 0; v < visited.size(); ++v) {
        const long t = visited[v];
        std::vector<AggregatedCondition> conds;
        conds.reserve(B);
        for (std::size_t b = 0; b < B; ++b) conds.push_back(tasks[b].condition(x[b], t));
        if (opts.observer) opts.observer(t, conds, state);

        std::vector<const AggregatedCondition*> ptrs;
        for (const auto& c : conds) ptrs.push_back(&c);
        const std::vector<long> ts(B, t);
        auto pred = predictor.predict(ptrs, ts, thread_state ? state : zero);

        const long t_prev = v + 1 < visited.size() ? visited[v + 1] : -1;
        for (std::size_t b = 0; b < B; ++b) {
            const auto& qpos = tasks[b].timeline.query_positions;
            Array eps(2 * qpos.size());
            for (std::size_t q = 0; q < qpos.size(); ++q) {
                eps[2 * q] = pred.eps[b].values[2 * qpos[q]];
                eps[2 * q + 1] = pred.eps[b].values[2 * qpos[q] + 1];
            }
            if (spec.kind == SamplerKind::DDPM) {
                const Array z = t > 0 ? gaussian_vector(rollout_rng, eps.size()) : Array{};
                x[b] = ddpm_step(x[b], eps, t, z, sched);
            } else {
                x[b] = ddim_step(x[b], eps, t, t_prev, sched);
            }
            for (double val : x[b])
                if (!std::isfinite(val)) throw NumericError(t, "non-finite value in rollout");
        }
        if (thread_state) {
            state = std::move(pred.state);
            state.t = t_prev;
        }
    }
    return x;
}

/// Merged trajectory: sparse points copied verbatim, query rows denormalized
/// from the rollout output.
inline Trajectory compose_recovered(const RecoveryTask& task, const EncodedTask& enc, std::span<const double> xq) {
    Trajectory out;
    out.points.resize(enc.L());
    for (std::size_t i = 0; i < task.sparse.size(); ++i) out.points[enc.timeline.sparse_positions[i]] = task.sparse.points[i];
    for (std::size_t q = 0; q < enc.m(); ++q) {
        const XY d = denormalize_xy({enc.to_normalized(xq[2 * q], q, 0), enc.to_normalized(xq[2 * q + 1], q, 1)},
                                    task.norm);
        out.points[enc.timeline.query_positions[q]] = {d[0], d[1], task.query.times[q]};
    }
    return out;
}

/// Recovers a batch of tasks with a trained checkpoint. Tasks are grouped by
/// merged length; groups are split into chunks of at most `max_batch`.
inline std::vector<Trajectory> recover(std::span<const RecoveryTask> tasks, const Checkpoint& ckpt,
                                       const SamplerSpec& spec, const EmbedderRegistry& embedders,
                                       std::size_t max_batch = 64, const RolloutOptions& opts = {}) {
    ckpt.check_compatible(embedders);
    spec.validate(ckpt.schedule.T());
    std::vector<EncodedTask> enc;
    enc.reserve(tasks.size());
    for (const auto& t : tasks) enc.push_back(encode_task(t, embedders));
    for (const auto& e : enc)
        if (!(e.base.layout == ckpt.model->layout()))
            throw CompatibilityError("recover: task layout differs from checkpoint layout");

    ModelPredictor predictor(ckpt.model);
    std::vector<Trajectory> out(tasks.size());
    std::vector<bool> done(tasks.size(), false);
    std::uint64_t chunk = 0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        if (done[i]) continue;
        std::vector<std::size_t> group;
        for (std::size_t j = i; j < tasks.size() && group.size() < max_batch; ++j)
            if (!done[j] && enc[j].L() == enc[i].L()) group.push_back(j);
        std::vector<EncodedTask> batch;
        for (std::size_t j : group) batch.push_back(enc[j]);
        SamplerSpec s = spec;
        s.seed = derive_seed(spec.seed, chunk++);
        const auto xs = rollout(batch, predictor, s, ckpt.schedule, opts);
        for (std::size_t g = 0; g < group.size(); ++g) {
            out[group[g]] = compose_recovered(tasks[group[g]], enc[group[g]], xs[g]);
            done[group[g]] = true;
        }
    }
    return out;
}

/// Recovers with the checkpoint's own embedders.
inline std::vector<Trajectory> recover(std::span<const RecoveryTask> tasks, const Checkpoint& ckpt,
                                       const SamplerSpec& spec, std::size_t max_batch = 64,
                                       const RolloutOptions& opts = {}) {
    return recover(tasks, ckpt, spec, ckpt.embedders, max_batch, opts);
}

inline Trajectory recover(const RecoveryTask& task, const Checkpoint& ckpt, const SamplerSpec& spec) {
    return recover(std::span<const RecoveryTask>(&task, 1), ckpt, spec)[0];
}

/// SP-DDIM rollout: recover with kind forced to sp-ddim.
inline std::vector<Trajectory> sp_ddim_rollout(std::span<const RecoveryTask> tasks, const Checkpoint& ckpt,
                                               std::size_t steps, std::uint64_t seed) {
    return recover(tasks, ckpt, SamplerSpec{SamplerKind::SPDDIM, steps, seed});
}

}  // namespace trajweaver
