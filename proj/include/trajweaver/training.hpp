#pragma once

// Joint multi-step training of the state-propagating denoiser.
//
// Every batch slot owns one sample, its noise chain, a private step index t
// and the state carried in from the previous iteration. An iteration trains
// the k adjacent steps t, t-1, ..., t-k+1 of each slot in one graph (state
// flows between them), applies one optimizer update, then moves t down by
// one. The state handed to the next iteration is the one emitted by step t,
// which is exactly what step t-1 consumes; it is detached from the graph.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "conditioning.hpp"
#include "denoiser.hpp"
#include "diffusion_math.hpp"
#include "errors.hpp"
#include "nn/layers.hpp"
#include "rng.hpp"
#include "traj_data.hpp"

namespace trajweaver {

enum class BatchMode { Shared, Consecutive, Uniform };

inline std::string to_string(BatchMode m) {
    switch (m) {
        case BatchMode::Shared: return "shared";
        case BatchMode::Consecutive: return "consecutive";
        case BatchMode::Uniform: return "uniform";
    }
    return "?";
}

inline BatchMode parse_batch_mode(const std::string& s) {
    if (s == "shared") return BatchMode::Shared;
    if (s == "consecutive") return BatchMode::Consecutive;
    if (s == "uniform") return BatchMode::Uniform;
    throw InvalidArgument("unknown batch mode '" + s + "'");
}

struct TrainConfig {
    std::size_t T = 500;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::size_t k = 2;  // steps per iteration
    std::size_t batch_size = 32;
    double learning_rate = 2e-4;
    double grad_clip = 1.0;
    BatchMode batch_mode = BatchMode::Uniform;
    std::size_t max_iterations = 1000;
    std::uint64_t seed = 0;
    double sparsity = 0.5;
    bool lazy_noise_chain = false;
    bool residual_frame = true;  // diffuse query rows relative to the linear prior

    void validate() const {
        if (k < 2) throw InvalidArgument("train: steps per iteration must be >= 2");
        if (k > T) throw InvalidArgument("train: steps per iteration exceeds T");
        if (batch_size < 1) throw InvalidArgument("train: batch size must be positive");
        if (!(learning_rate > 0.0)) throw InvalidArgument("train: learning rate must be positive");
        if (!(sparsity > 0.0 && sparsity < 1.0)) throw InvalidArgument("train: sparsity must lie in (0, 1)");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"T", c.T},
         {"beta_start", c.beta_start},
         {"beta_end", c.beta_end},
         {"k", c.k},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"grad_clip", c.grad_clip},
         {"batch_mode", to_string(c.batch_mode)},
         {"max_iterations", c.max_iterations},
         {"seed", c.seed},
         {"sparsity", c.sparsity},
         {"lazy_noise_chain", c.lazy_noise_chain},
         {"residual_frame", c.residual_frame}};
}

// ---------------------------------------------------------------------------
// Batch management

/// Step bookkeeping for the batch slots, independent of the sample payloads.
class BatchManager {
public:
    BatchManager(BatchMode mode, std::size_t batch, std::size_t T, std::size_t k)
        : mode_(mode), batch_(batch), T_(static_cast<long>(T)), k_(static_cast<long>(k)) {
        if (k < 1 || k > T) throw InvalidArgument("BatchManager: need 1 <= k <= T");
    }

    BatchMode mode() const noexcept { return mode_; }
    long top() const noexcept { return T_ - 1; }
    long lowest_start() const noexcept { return k_ - 1; }

    /// shared: every slot at T-1. consecutive: T-1, T-2, ... so slots reload on
    /// successive iterations. uniform: evenly spread, floor((B - i - 1/2) T / B).
    std::vector<long> initial_steps() const {
        std::vector<long> t(batch_);
        const long span = T_ - k_ + 1;
        for (std::size_t i = 0; i < batch_; ++i) {
            switch (mode_) {
                case BatchMode::Shared: t[i] = T_ - 1; break;
                case BatchMode::Consecutive: t[i] = T_ - 1 - static_cast<long>(i) % span; break;
                case BatchMode::Uniform: {
                    const double pos = (static_cast<double>(batch_ - i) - 0.5) * static_cast<double>(T_) /
                                       static_cast<double>(batch_);
                    t[i] = std::max(static_cast<long>(std::floor(pos)), k_ - 1);
                    break;
                }
            }
        }
        return t;
    }

    /// Decrements every slot; slots that can no longer fit k steps restart at
    /// T-1. Returns which slots restarted.
    std::vector<bool> advance(std::span<long> t) const {
        std::vector<bool> reload(t.size(), false);
        for (std::size_t i = 0; i < t.size(); ++i) {
            --t[i];
            if (t[i] < k_ - 1) {
                t[i] = T_ - 1;
                reload[i] = true;
            }
        }
        return reload;
    }

    /// Steps trained by a slot whose top step is t.
    std::vector<long> trained_steps(long t) const {
        std::vector<long> s;
        for (long j = 0; j < k_; ++j) s.push_back(t - j);
        return s;
    }

private:
    BatchMode mode_;
    std::size_t batch_;
    long T_, k_;
};

/// Simulates the slot process for `iterations` and returns how often each
/// step index was trained.
inline std::vector<std::size_t> simulate_trained_histogram(const BatchManager& bm, std::size_t T,
                                                           std::size_t iterations) {
    std::vector<std::size_t> hist(T, 0);
    auto t = bm.initial_steps();
    for (std::size_t it = 0; it < iterations; ++it) {
        for (long top : t)
            for (long s : bm.trained_steps(top)) ++hist[static_cast<std::size_t>(s)];
        bm.advance(t);
    }
    return hist;
}

// ---------------------------------------------------------------------------
// Slots

/// Eager or lazily re-folded noise chain behind one accessor.
class SlotNoise {
public:
    SlotNoise() = default;
    SlotNoise(std::size_t n, const NoiseSchedule& s, std::uint64_t seed, bool lazy) {
        if (lazy)
            lazy_.emplace(n, s, seed);
        else
            eager_ = std::make_shared<NoiseChain>(build_noise_chain(n, s, seed));
    }

    Array multi(long t) const { return eager_ ? eager_->multi[static_cast<std::size_t>(t)] : lazy_->multi(t); }
    bool lazy() const noexcept { return lazy_.has_value(); }

private:
    std::shared_ptr<const NoiseChain> eager_;
    std::optional<LazyNoiseChain> lazy_;
};

struct SampleSlot {
    EncodedTask task;
    SlotNoise noise;
    long t = 0;
    PropagationState state;  // batch of one
    std::size_t sample_index = 0;
    std::uint64_t load_serial = 0;
};

/// Noisy query coordinates at step t from the slot's chain.
inline Array diffused_query(const SampleSlot& slot, long t, const NoiseSchedule& s) {
    return forward_jump(slot.task.truth, t, slot.noise.multi(t), s);
}

struct IterationResult {
    double loss = 0.0;
    std::vector<double> step_losses;  // one per trained step, top first
    double grad_norm = 0.0;
    double recurrent_grad_norm = 0.0;
};

/// One joint k-step update over the batch. With `apply_update` false the
/// gradients are computed and left in place but parameters and slots are
/// untouched. Slots must all have t >= k-1 and share one sequence length.
inline IterationResult train_iteration(std::span<SampleSlot> slots, Denoiser& model, nn::Adam* optimizer,
                                       std::size_t k, const NoiseSchedule& sched, bool apply_update = true) {
    if (slots.empty()) throw InvalidArgument("train_iteration: empty batch");
    const std::size_t B = slots.size();
    const std::size_t L = slots[0].task.L();
    const std::size_t Lp = padded_length(L, model.config());
    for (const auto& s : slots) {
        if (s.t < static_cast<long>(k) - 1) throw InvalidArgument("train_iteration: slot step below k-1");
        if (s.task.L() != L) throw ShapeError("train_iteration: slots differ in sequence length");
        if (s.task.truth.empty()) throw InvalidArgument("train_iteration: slot without ground truth");
    }

    const SPDMNet& net = model.net();
    auto params = net.parameters();
    for (auto& [name, p] : params) p.zero_grad();

    std::vector<PropagationState> carried;
    carried.reserve(B);
    for (const auto& s : slots) carried.push_back(s.state);
    const PropagationState stacked = PropagationState::stack(carried);
    std::vector<nn::Var> state;
    for (const auto& lvl : stacked.levels) state.push_back(nn::constant(lvl));

    std::vector<nn::Real> mask(B * Lp, 0.0f);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < L; ++i) mask[b * Lp + i] = static_cast<nn::Real>(slots[b].task.mask[i]);

    IterationResult result;
    nn::Var total;
    std::vector<nn::Mat> handoff;
    for (std::size_t j = 0; j < k; ++j) {
        std::vector<long> steps(B);
        std::vector<AggregatedCondition> conds;
        conds.reserve(B);
        nn::Mat target = nn::Mat::Zero(static_cast<Eigen::Index>(B * Lp), 2);
        for (std::size_t b = 0; b < B; ++b) {
            const auto& slot = slots[b];
            steps[b] = slot.t - static_cast<long>(j);
            const Array eps = slot.noise.multi(steps[b]);
            const Array xq = forward_jump(slot.task.truth, steps[b], eps, sched);
            conds.push_back(slot.task.condition(xq, steps[b]));
            const auto& qpos = slot.task.timeline.query_positions;
            for (std::size_t q = 0; q < qpos.size(); ++q) {
                target(static_cast<Eigen::Index>(b * Lp + qpos[q]), 0) = static_cast<nn::Real>(eps[2 * q]);
                target(static_cast<Eigen::Index>(b * Lp + qpos[q]), 1) = static_cast<nn::Real>(eps[2 * q + 1]);
            }
        }
        std::vector<const AggregatedCondition*> ptrs;
        for (const auto& c : conds) ptrs.push_back(&c);
        auto out = net.forward(nn::constant(pack_conditions(ptrs, Lp)), steps, state, B, Lp);
        nn::Var loss = nn::masked_mse(out.eps, target, mask);
        result.step_losses.push_back(static_cast<double>(loss.value()(0, 0)));
        total = (j == 0) ? loss : nn::add(total, loss);
        if (j == 0)
            for (const auto& v : out.state) handoff.push_back(v.value());
        state = std::move(out.state);
    }
    result.loss = static_cast<double>(total.value()(0, 0));
    if (!std::isfinite(result.loss)) throw NumericError(slots[0].t, "training loss is not finite");

    nn::backward(total);
    double gsq = 0.0, rsq = 0.0;
    for (const auto& [name, p] : params) {
        const double n2 = static_cast<double>(p.grad().squaredNorm());
        gsq += n2;
        if (SPDMNet::is_recurrent_param(name)) rsq += n2;
    }
    result.grad_norm = std::sqrt(gsq);
    result.recurrent_grad_norm = std::sqrt(rsq);

    if (!apply_update) return result;
    if (optimizer) optimizer->step();

    PropagationState next;
    next.batch = B;
    next.length = Lp;
    next.levels = std::move(handoff);
    for (std::size_t b = 0; b < B; ++b) {
        slots[b].state = next.slice(b);
        slots[b].state.t = slots[b].t - 1;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Trainer

struct LogRow {
    std::size_t iteration = 0;
    double loss = 0.0;
    double mean_t = 0.0;
    double wall_seconds = 0.0;
};

inline void write_log_csv(std::span<const LogRow> rows, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "iteration,mean_loss,mean_t,wall_seconds\n";
    for (const auto& r : rows) os << r.iteration << ',' << r.loss << ',' << r.mean_t << ',' << r.wall_seconds << '\n';
}

/// RMS of (truth - linear prior) per coordinate over sparsified samples, in
/// normalized units.
inline double estimate_residual_scale(std::span<const Trajectory> data, double sparsity, const NormStats& norm,
                                      std::uint64_t seed, std::size_t max_samples = 512) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < std::min(max_samples, data.size()); ++i) {
        const auto sp = sparsify(data[i], sparsity, derive_seed(seed, i));
        const Trajectory prior = linear_prior(sp.sparse, sp.query);
        const auto merged = merge_timeline(sp.sparse, sp.query);
        for (std::size_t q = 0; q < sp.truth.size(); ++q) {
            const auto& p = prior.points[merged.query_positions[q]];
            const XY a = normalize_xy(p.lng, p.lat, norm), b = normalize_xy(sp.truth[q][0], sp.truth[q][1], norm);
            acc += (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]);
            n += 2;
        }
    }
    const double rms = n > 0 ? std::sqrt(acc / static_cast<double>(n)) : 0.0;
    return std::max(rms, 1e-6);
}

class Trainer {
public:
    Trainer(std::vector<Trajectory> dataset, const TrainConfig& cfg, const DenoiserConfig& net_cfg,
            EmbedderRegistry embedders, std::optional<NormStats> norm = std::nullopt)
        : data_(std::move(dataset)), cfg_(cfg), embedders_(std::move(embedders)),
          manager_(cfg.batch_mode, cfg.batch_size, cfg.T, cfg.k) {
        cfg_.validate();
        if (data_.empty()) throw InvalidArgument("train: dataset is empty");
        for (std::size_t i = 0; i < data_.size(); ++i) validate_trajectory(data_[i], "trajectory " + std::to_string(i));
        const std::size_t L = data_[0].size();
        for (const auto& tr : data_)
            if (tr.size() != L) throw InvalidArgument("train: all trajectories must share one length");
        norm_ = norm ? *norm : NormStats::from_dataset(data_);
        sched_ = make_schedule(cfg_.T, cfg_.beta_start, cfg_.beta_end);
        DenoiserConfig nc = net_cfg;
        nc.T = cfg_.T;
        if (!cfg_.residual_frame)
            norm_.residual_scale = 0.0;
        else if (norm_.residual_scale == 0.0)
            norm_.residual_scale =
                estimate_residual_scale(data_, cfg_.sparsity, norm_, derive_seed(cfg_.seed, "scale"));
        if (nc.residual_scale == 0.0)
            nc.residual_scale = cfg_.residual_frame
                                    ? norm_.residual_scale
                                    : estimate_residual_scale(data_, cfg_.sparsity, norm_, derive_seed(cfg_.seed, "scale"));
        model_ = std::make_shared<Denoiser>(nc, embedders_.layout(), derive_seed(cfg_.seed, "init"));

        optimizer_ = std::make_unique<nn::Adam>(model_->net().parameters(), cfg_.learning_rate, cfg_.grad_clip);

        order_.resize(data_.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        data_rng_.seed(derive_seed(cfg_.seed, "data"));
        std::shuffle(order_.begin(), order_.end(), data_rng_);

        const auto init = manager_.initial_steps();
        slots_.resize(cfg_.batch_size);
        for (std::size_t b = 0; b < slots_.size(); ++b) {
            load(slots_[b]);
            slots_[b].t = init[b];
        }
    }

    const TrainConfig& config() const noexcept { return cfg_; }
    const NoiseSchedule& schedule() const noexcept { return sched_; }
    const NormStats& norm() const noexcept { return norm_; }
    Denoiser& model() noexcept { return *model_; }
    std::shared_ptr<Denoiser> model_ptr() const noexcept { return model_; }
    std::span<SampleSlot> slots() noexcept { return slots_; }
    std::span<const SampleSlot> slots() const noexcept { return slots_; }
    const BatchManager& manager() const noexcept { return manager_; }
    const std::vector<LogRow>& log() const noexcept { return log_; }
    std::size_t iteration() const noexcept { return iteration_; }

    /// Trains one iteration, then advances every slot's step.
    IterationResult step() {
        if (!clock_started_) {
            start_ = std::chrono::steady_clock::now();
            clock_started_ = true;
        }
        double mean_t = 0.0;
        for (const auto& s : slots_) mean_t += static_cast<double>(s.t);
        mean_t /= static_cast<double>(slots_.size());

        auto r = train_iteration(slots_, *model_, optimizer_.get(), cfg_.k, sched_);
        std::vector<long> ts;
        for (const auto& s : slots_) ts.push_back(s.t);
        const auto reload = manager_.advance(ts);
        for (std::size_t b = 0; b < slots_.size(); ++b) {
            if (reload[b]) load(slots_[b]);
            slots_[b].t = ts[b];
        }
        ++iteration_;
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        log_.push_back({iteration_, r.loss / static_cast<double>(cfg_.k), mean_t, wall});
        return r;
    }

    void run(const std::function<void(const LogRow&)>& on_iteration = {}) {
        while (iteration_ < cfg_.max_iterations) {
            step();
            if (on_iteration) on_iteration(log_.back());
        }
    }

    Checkpoint checkpoint() const {
        Checkpoint c;
        c.model = model_;
        c.schedule = sched_;
        c.embedders = EmbedderRegistry::from_json(embedders_.to_json());
        c.norm = norm_;
        c.train_echo = cfg_;
        return c;
    }

private:
    void load(SampleSlot& slot) {
        if (cursor_ == order_.size()) {
            std::shuffle(order_.begin(), order_.end(), data_rng_);
            cursor_ = 0;
        }
        const std::size_t idx = order_[cursor_++];
        const std::uint64_t serial = loads_++;
        const auto sp = sparsify(data_[idx], cfg_.sparsity, derive_seed(derive_seed(cfg_.seed, "sparsify"), serial));
        RecoveryTask task{sp.sparse, sp.query, {}, norm_};
        slot.task = encode_task(task, embedders_, sp.truth);
        slot.noise = SlotNoise(2 * slot.task.m(), sched_, derive_seed(derive_seed(cfg_.seed, "noise"), serial),
                               cfg_.lazy_noise_chain);
        slot.t = manager_.top();
        slot.state = model_->zero_state(1, slot.task.L());
        slot.state.t = slot.t;
        slot.sample_index = idx;
        slot.load_serial = serial;
    }

    std::vector<Trajectory> data_;
    TrainConfig cfg_;
    EmbedderRegistry embedders_;
    BatchManager manager_;
    NormStats norm_;
    NoiseSchedule sched_;
    std::shared_ptr<Denoiser> model_;
    std::unique_ptr<nn::Adam> optimizer_;
    std::vector<SampleSlot> slots_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::uint64_t loads_ = 0;
    Rng data_rng_;
    std::vector<LogRow> log_;
    std::size_t iteration_ = 0;
    std::chrono::steady_clock::time_point start_;
    bool clock_started_ = false;
};

/// Runs a full training job and returns the resulting checkpoint.
inline Checkpoint train(std::vector<Trajectory> dataset, const TrainConfig& cfg, const DenoiserConfig& net_cfg,
                        EmbedderRegistry embedders = EmbedderRegistry::defaults(),
                        std::vector<LogRow>* log_out = nullptr,
                        const std::function<void(const LogRow&)>& on_iteration = {}) {
    Trainer trainer(std::move(dataset), cfg, net_cfg, std::move(embedders));
    trainer.run(on_iteration);
    if (log_out) *log_out = trainer.log();
    return trainer.checkpoint();
}

}  // namespace trajweaver
