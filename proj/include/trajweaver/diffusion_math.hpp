#pragma once

// Noise schedules and the closed-form algebra of the diffusion / denoising
// chains. Conventions used throughout the library:
//
//   x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps_multi[t],   t in [0, T)
//   abar_t = prod_{i=0..t} alpha_i,   abar_{-1} := 1
//
// so forward_step(x_t, t) produces the sample one index above, and step -1
// denotes the clean signal.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "rng.hpp"

namespace trajweaver {

using Array = std::vector<double>;

class NoiseSchedule {
public:
    NoiseSchedule() = default;

    static NoiseSchedule linear(std::size_t T, double beta_start, double beta_end) {
        if (T < 2) throw InvalidArgument("make_schedule: T must be >= 2");
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
            throw InvalidArgument("make_schedule: need 0 < beta_start <= beta_end < 1");
        NoiseSchedule s;
        s.beta_start_ = beta_start;
        s.beta_end_ = beta_end;
        s.beta_.resize(T);
        s.alpha_.resize(T);
        s.alpha_bar_.resize(T);
        double prod = 1.0;
        for (std::size_t t = 0; t < T; ++t) {
            const double frac = static_cast<double>(t) / static_cast<double>(T - 1);
            s.beta_[t] = beta_start + frac * (beta_end - beta_start);
            s.alpha_[t] = 1.0 - s.beta_[t];
            prod *= s.alpha_[t];
            s.alpha_bar_[t] = prod;
        }
        return s;
    }

    std::size_t T() const noexcept { return beta_.size(); }
    double beta_start() const noexcept { return beta_start_; }
    double beta_end() const noexcept { return beta_end_; }

    double beta(long t) const { return beta_[check(t)]; }
    double alpha(long t) const { return alpha_[check(t)]; }
    double alpha_bar(long t) const { return alpha_bar_[check(t)]; }
    /// abar_{t-1}, with abar_{-1} = 1.
    double alpha_bar_prev(long t) const { return t == 0 ? 1.0 : alpha_bar_[check(t - 1)]; }
    /// abar at t, accepting t = -1 (clean signal).
    double alpha_bar_or_one(long t) const { return t == -1 ? 1.0 : alpha_bar(t); }

    std::span<const double> betas() const noexcept { return beta_; }
    std::span<const double> alphas() const noexcept { return alpha_; }
    std::span<const double> alpha_bars() const noexcept { return alpha_bar_; }

    std::size_t check(long t) const {
        if (t < 0 || static_cast<std::size_t>(t) >= beta_.size())
            throw OutOfRange("diffusion step " + std::to_string(t) + " outside [0, " +
                             std::to_string(beta_.size()) + ")");
        return static_cast<std::size_t>(t);
    }

private:
    double beta_start_ = 0.0, beta_end_ = 0.0;
    std::vector<double> beta_, alpha_, alpha_bar_;
};

inline NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end) {
    return NoiseSchedule::linear(T, beta_start, beta_end);
}

inline nlohmann::json schedule_descriptor(const NoiseSchedule& s) {
    return {{"T", s.T()}, {"beta_start", s.beta_start()}, {"beta_end", s.beta_end()}};
}

inline NoiseSchedule schedule_from_descriptor(const nlohmann::json& j) {
    return make_schedule(j.at("T").get<std::size_t>(), j.at("beta_start").get<double>(),
                         j.at("beta_end").get<double>());
}

namespace detail {
inline void same_size(std::span<const double> a, std::span<const double> b, const char* op) {
    if (a.size() != b.size())
        throw ShapeError(std::string(op) + ": size mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
}
}  // namespace detail

/// One diffusion step: x_{t+1} = sqrt(alpha_t) x_t + sqrt(beta_t) eps.
inline Array forward_step(std::span<const double> x_t, long t, std::span<const double> eps,
                          const NoiseSchedule& s) {
    detail::same_size(x_t, eps, "forward_step");
    const double a = std::sqrt(s.alpha(t)), b = std::sqrt(s.beta(t));
    Array out(x_t.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x_t[i] + b * eps[i];
    return out;
}

/// Closed form: x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps_multi.
inline Array forward_jump(std::span<const double> x0, long t, std::span<const double> eps_multi,
                          const NoiseSchedule& s) {
    detail::same_size(x0, eps_multi, "forward_jump");
    const double ab = s.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Array out(x0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps_multi[i];
    return out;
}

/// Multi-step noise at t from the one at t-1 and the single-step noise of step t.
inline Array compose_noise(std::span<const double> eps_multi_prev, std::span<const double> eps_single, long t,
                           const NoiseSchedule& s) {
    detail::same_size(eps_multi_prev, eps_single, "compose_noise");
    if (t == 0) throw OutOfRange("compose_noise: no multi-step noise precedes step 0");
    const double c_prev = std::sqrt(s.alpha(t)) * std::sqrt(1.0 - s.alpha_bar(t - 1));
    const double c_single = std::sqrt(s.beta(t));
    const double denom = std::sqrt(1.0 - s.alpha_bar(t));
    Array out(eps_single.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (c_prev * eps_multi_prev[i] + c_single * eps_single[i]) / denom;
    return out;
}

/// Single-step noises for every step, seeded per step so any entry can be
/// regenerated on its own.
inline Array single_step_noise(std::size_t n, long t, std::uint64_t seed) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(t)));
    return gaussian_vector(rng, n);
}

struct NoiseChain {
    std::vector<Array> single;  // single[t]: noise of the step t -> t+1
    std::vector<Array> multi;   // multi[t]:  equivalent noise x_0 -> x_t

    std::size_t T() const noexcept { return single.size(); }
};

inline NoiseChain build_noise_chain(std::size_t n, const NoiseSchedule& s, std::uint64_t seed) {
    NoiseChain c;
    c.single.reserve(s.T());
    c.multi.reserve(s.T());
    for (std::size_t t = 0; t < s.T(); ++t) c.single.push_back(single_step_noise(n, static_cast<long>(t), seed));
    c.multi.push_back(c.single[0]);
    for (std::size_t t = 1; t < s.T(); ++t)
        c.multi.push_back(compose_noise(c.multi[t - 1], c.single[t], static_cast<long>(t), s));
    return c;
}

/// Memory-light chain holding only the seed; multi(t) re-folds the compose
/// recursion from step 0. Produces the same values as build_noise_chain.
class LazyNoiseChain {
public:
    LazyNoiseChain(std::size_t n, const NoiseSchedule& s, std::uint64_t seed) : n_(n), sched_(&s), seed_(seed) {}

    Array single(long t) const {
        sched_->check(t);
        return single_step_noise(n_, t, seed_);
    }

    Array multi(long t) const {
        sched_->check(t);
        Array cur = single_step_noise(n_, 0, seed_);
        for (long k = 1; k <= t; ++k) cur = compose_noise(cur, single_step_noise(n_, k, seed_), k, *sched_);
        return cur;
    }

    std::size_t size() const noexcept { return n_; }

private:
    std::size_t n_;
    const NoiseSchedule* sched_;
    std::uint64_t seed_;
};

/// Ancestral denoising step from x_t to x_{t-1} (x_0 when t == 0):
///   mean = (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)
///   std  = sqrt(beta_t (1 - abar_{t-1}) / (1 - abar_t))
/// `z` may be empty, meaning zero.
inline Array ddpm_step(std::span<const double> x_t, std::span<const double> eps_pred, long t,
                       std::span<const double> z, const NoiseSchedule& s) {
    detail::same_size(x_t, eps_pred, "ddpm_step");
    if (!z.empty()) detail::same_size(x_t, z, "ddpm_step");
    const double beta = s.beta(t), ab = s.alpha_bar(t);
    const double coef = beta / std::sqrt(1.0 - ab);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
    const double sigma = std::sqrt(beta * (1.0 - s.alpha_bar_prev(t)) / (1.0 - ab));
    Array out(x_t.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (x_t[i] - coef * eps_pred[i]) * inv_sqrt_alpha;
        if (!z.empty()) out[i] += sigma * z[i];
    }
    return out;
}

inline double ddpm_sigma(long t, const NoiseSchedule& s) {
    return std::sqrt(s.beta(t) * (1.0 - s.alpha_bar_prev(t)) / (1.0 - s.alpha_bar(t)));
}

/// Deterministic (eta = 0) DDIM jump from t_next down to t_prev; t_prev = -1
/// lands on the clean estimate.
inline Array ddim_step(std::span<const double> x_next, std::span<const double> eps_pred, long t_next, long t_prev,
                       const NoiseSchedule& s) {
    detail::same_size(x_next, eps_pred, "ddim_step");
    if (!(t_prev < t_next)) throw InvalidArgument("ddim_step: t_prev must be below t_next");
    if (t_prev < -1) throw OutOfRange("ddim_step: t_prev below -1");
    const double ab_next = s.alpha_bar(t_next);
    const double ab_prev = s.alpha_bar_or_one(t_prev);
    const double sn = std::sqrt(1.0 - ab_next), an = std::sqrt(ab_next);
    const double sp = std::sqrt(1.0 - ab_prev), ap = std::sqrt(ab_prev);
    Array out(x_next.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x0_hat = (x_next[i] - sn * eps_pred[i]) / an;
        out[i] = ap * x0_hat + sp * eps_pred[i];
    }
    return out;
}

/// Noise that maps x_0 onto the given x_t exactly; the prediction a perfect
/// denoiser would make.
inline Array implied_noise(std::span<const double> x_t, std::span<const double> x0, long t, const NoiseSchedule& s) {
    detail::same_size(x_t, x0, "implied_noise");
    const double ab = s.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Array out(x_t.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - a * x0[i]) / b;
    return out;
}

}  // namespace trajweaver
