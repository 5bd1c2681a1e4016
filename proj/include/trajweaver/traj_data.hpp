#pragma once

// Trajectory containers, sparsification, the linear-interpolation prior,
// min-max normalization, a synthetic path generator and JSONL dataset I/O.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "rng.hpp"

namespace trajweaver {

struct TrajPoint {
    double lng = 0.0;  // degrees
    double lat = 0.0;  // degrees
    double time = 0.0; // seconds

    friend bool operator==(const TrajPoint&, const TrajPoint&) = default;
};

using XY = std::array<double, 2>;

struct Trajectory {
    std::vector<TrajPoint> points;

    std::size_t size() const noexcept { return points.size(); }
    bool empty() const noexcept { return points.empty(); }

    std::vector<double> times() const {
        std::vector<double> out;
        out.reserve(points.size());
        for (const auto& p : points) out.push_back(p.time);
        return out;
    }

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Throws ValidationError unless the trajectory has >= 2 points with strictly
/// increasing, finite timestamps.
inline void validate_trajectory(const Trajectory& traj, const std::string& label = "trajectory") {
    if (traj.size() < 2) throw ValidationError(label + ": needs at least 2 points");
    for (std::size_t i = 0; i < traj.size(); ++i) {
        const auto& p = traj.points[i];
        if (!std::isfinite(p.lng) || !std::isfinite(p.lat) || !std::isfinite(p.time))
            throw ValidationError(label + ": non-finite value at point " + std::to_string(i));
        if (i > 0 && !(p.time > traj.points[i - 1].time))
            throw ValidationError(label + ": timestamps not strictly increasing at point " +
                                  std::to_string(i));
    }
}

struct Query {
    std::vector<double> times;
};

using RawContexts = std::map<std::string, nlohmann::json>;

struct NormStats {
    double lng_min = 0.0, lng_max = 1.0;
    double lat_min = 0.0, lat_max = 1.0;
    double t_min = 0.0, t_max = 1.0;
    // > 0: query rows are diffused as (coordinate - linear prior) / residual_scale
    // in normalized units; 0: the normalized coordinates themselves.
    double residual_scale = 0.0;

    void validate() const {
        if (!(lng_max > lng_min) || !(lat_max > lat_min) || !(t_max > t_min))
            throw InvalidArgument("NormStats: every axis needs max > min");
        if (!(residual_scale >= 0.0) || !std::isfinite(residual_scale))
            throw InvalidArgument("NormStats: residual_scale must be finite and non-negative");
    }

    static NormStats from_dataset(std::span<const Trajectory> data) {
        if (data.empty()) throw InvalidArgument("NormStats: empty dataset");
        NormStats s{+INFINITY, -INFINITY, +INFINITY, -INFINITY, +INFINITY, -INFINITY};
        for (const auto& tr : data)
            for (const auto& p : tr.points) {
                s.lng_min = std::min(s.lng_min, p.lng);
                s.lng_max = std::max(s.lng_max, p.lng);
                s.lat_min = std::min(s.lat_min, p.lat);
                s.lat_max = std::max(s.lat_max, p.lat);
                s.t_min = std::min(s.t_min, p.time);
                s.t_max = std::max(s.t_max, p.time);
            }
        s.validate();
        return s;
    }

    friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline void to_json(nlohmann::json& j, const NormStats& s) {
    j = nlohmann::json{{"lng_min", s.lng_min}, {"lng_max", s.lng_max}, {"lat_min", s.lat_min},
                       {"lat_max", s.lat_max}, {"t_min", s.t_min},     {"t_max", s.t_max},
                       {"residual_scale", s.residual_scale}};
}

inline void from_json(const nlohmann::json& j, NormStats& s) {
    j.at("lng_min").get_to(s.lng_min);
    j.at("lng_max").get_to(s.lng_max);
    j.at("lat_min").get_to(s.lat_min);
    j.at("lat_max").get_to(s.lat_max);
    j.at("t_min").get_to(s.t_min);
    j.at("t_max").get_to(s.t_max);
    s.residual_scale = j.value("residual_scale", 0.0);
    s.validate();
}

struct RecoveryTask {
    Trajectory sparse;
    Query query;
    RawContexts contexts;
    NormStats norm;
};

// ---------------------------------------------------------------------------
// Normalization

namespace detail {
inline double to_unit(double v, double lo, double hi) { return 2.0 * (v - lo) / (hi - lo) - 1.0; }
inline double from_unit(double u, double lo, double hi) { return lo + (u + 1.0) * 0.5 * (hi - lo); }
}  // namespace detail

/// Normalized point: (lng, lat, time), each axis mapped affinely onto [-1, 1].
using NormPoint = std::array<double, 3>;

inline std::vector<NormPoint> normalize(const Trajectory& traj, const NormStats& s) {
    s.validate();
    std::vector<NormPoint> out;
    out.reserve(traj.size());
    for (const auto& p : traj.points)
        out.push_back({detail::to_unit(p.lng, s.lng_min, s.lng_max),
                       detail::to_unit(p.lat, s.lat_min, s.lat_max),
                       detail::to_unit(p.time, s.t_min, s.t_max)});
    return out;
}

inline Trajectory denormalize(std::span<const NormPoint> pts, const NormStats& s) {
    s.validate();
    Trajectory out;
    out.points.reserve(pts.size());
    for (const auto& p : pts)
        out.points.push_back({detail::from_unit(p[0], s.lng_min, s.lng_max),
                              detail::from_unit(p[1], s.lat_min, s.lat_max),
                              detail::from_unit(p[2], s.t_min, s.t_max)});
    return out;
}

inline XY normalize_xy(double lng, double lat, const NormStats& s) {
    return {detail::to_unit(lng, s.lng_min, s.lng_max), detail::to_unit(lat, s.lat_min, s.lat_max)};
}

inline XY denormalize_xy(const XY& u, const NormStats& s) {
    return {detail::from_unit(u[0], s.lng_min, s.lng_max), detail::from_unit(u[1], s.lat_min, s.lat_max)};
}

inline double normalize_time(double t, const NormStats& s) { return detail::to_unit(t, s.t_min, s.t_max); }

// ---------------------------------------------------------------------------
// Timeline merging and the linear prior

/// Sparse and query timestamps merged into one sorted timeline.
struct MergedTimeline {
    std::vector<double> times;
    std::vector<std::size_t> sparse_positions;  // row of sparse point i
    std::vector<std::size_t> query_positions;   // row of query time j
};

inline MergedTimeline merge_timeline(const Trajectory& sparse, const Query& query) {
    validate_trajectory(sparse, "sparse trajectory");
    for (std::size_t j = 1; j < query.times.size(); ++j)
        if (!(query.times[j] > query.times[j - 1]))
            throw ValidationError("query: timestamps not strictly increasing at " + std::to_string(j));
    const double lo = sparse.points.front().time;
    const double hi = sparse.points.back().time;
    for (double q : query.times)
        if (!(q >= lo && q <= hi))
            throw OutOfRange("query time " + std::to_string(q) + " outside sparse span [" +
                             std::to_string(lo) + ", " + std::to_string(hi) + "]");

    MergedTimeline m;
    const std::size_t L = sparse.size() + query.times.size();
    m.times.reserve(L);
    std::size_t i = 0, j = 0;
    while (i < sparse.size() || j < query.times.size()) {
        const bool take_sparse =
            j == query.times.size() || (i < sparse.size() && sparse.points[i].time < query.times[j]);
        if (i < sparse.size() && j < query.times.size() && sparse.points[i].time == query.times[j])
            throw InvalidArgument("query time " + std::to_string(query.times[j]) +
                                  " duplicates a sparse timestamp");
        if (take_sparse) {
            m.sparse_positions.push_back(m.times.size());
            m.times.push_back(sparse.points[i++].time);
        } else {
            m.query_positions.push_back(m.times.size());
            m.times.push_back(query.times[j++]);
        }
    }
    return m;
}

/// Merged trajectory where query rows hold the time-weighted linear
/// interpolation of their bracketing sparse points.
inline Trajectory linear_prior(const Trajectory& sparse, const Query& query) {
    const MergedTimeline m = merge_timeline(sparse, query);
    Trajectory out;
    out.points.resize(m.times.size());
    for (std::size_t i = 0; i < m.sparse_positions.size(); ++i)
        out.points[m.sparse_positions[i]] = sparse.points[i];
    std::size_t seg = 0;
    for (std::size_t j = 0; j < query.times.size(); ++j) {
        const double t = query.times[j];
        while (seg + 2 < sparse.size() && sparse.points[seg + 1].time < t) ++seg;
        const auto& a = sparse.points[seg];
        const auto& b = sparse.points[seg + 1];
        const double w = (t - a.time) / (b.time - a.time);
        out.points[m.query_positions[j]] = {a.lng + w * (b.lng - a.lng), a.lat + w * (b.lat - a.lat), t};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sparsification

struct SparsifyResult {
    Trajectory sparse;
    Query query;
    std::vector<XY> truth;  // (lng, lat) at each query time
};

/// Removes floor(sparsity * L) interior points chosen uniformly at random.
inline SparsifyResult sparsify(const Trajectory& dense, double sparsity, std::uint64_t seed) {
    if (!(sparsity > 0.0 && sparsity < 1.0)) throw InvalidArgument("sparsify: sparsity must lie in (0, 1)");
    const std::size_t L = dense.size();
    if (L < 4) throw InvalidArgument("sparsify: dense trajectory needs at least 4 points");
    const auto n_remove = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(L)));
    if (n_remove < 1) throw InvalidArgument("sparsify: sparsity removes no points");
    if (n_remove > L - 2) throw InvalidArgument("sparsify: cannot remove more than the interior points");

    std::vector<std::size_t> interior(L - 2);
    std::iota(interior.begin(), interior.end(), std::size_t{1});
    Rng rng(seed);
    // Partial Fisher-Yates: the first n_remove entries are a uniform subset.
    for (std::size_t k = 0; k < n_remove; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, interior.size() - 1);
        std::swap(interior[k], interior[pick(rng)]);
    }
    std::vector<bool> removed(L, false);
    for (std::size_t k = 0; k < n_remove; ++k) removed[interior[k]] = true;

    SparsifyResult r;
    for (std::size_t i = 0; i < L; ++i) {
        const auto& p = dense.points[i];
        if (removed[i]) {
            r.query.times.push_back(p.time);
            r.truth.push_back({p.lng, p.lat});
        } else {
            r.sparse.points.push_back(p);
        }
    }
    return r;
}

/// Inverse of sparsify: merges truth back at the query times.
inline Trajectory reassemble(const Trajectory& sparse, const Query& query, std::span<const XY> truth) {
    if (truth.size() != query.times.size()) throw ShapeError("reassemble: truth/query size mismatch");
    const MergedTimeline m = merge_timeline(sparse, query);
    Trajectory out;
    out.points.resize(m.times.size());
    for (std::size_t i = 0; i < m.sparse_positions.size(); ++i) out.points[m.sparse_positions[i]] = sparse.points[i];
    for (std::size_t j = 0; j < m.query_positions.size(); ++j)
        out.points[m.query_positions[j]] = {truth[j][0], truth[j][1], query.times[j]};
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct BoundingBox {
    double lng_min, lng_max, lat_min, lat_max;
};

/// Fixed synthetic region (roughly 9 x 11 km).
inline constexpr BoundingBox kSynthBox{108.90, 109.00, 34.20, 34.30};

/// Smooth 2-D paths: linear drift plus low-frequency sinusoids plus a bounded,
/// mean-reverting random walk on velocity; jittered sampling intervals.
inline std::vector<Trajectory> synth_generate(std::size_t n, std::size_t length, std::uint64_t seed) {
    if (length < 8) throw InvalidArgument("synth_generate: length must be at least 8");
    const auto& box = kSynthBox;
    const double w = box.lng_max - box.lng_min;
    const double h = box.lat_max - box.lat_min;

    std::vector<Trajectory> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        Rng rng(derive_seed(seed, k));
        std::uniform_real_distribution<double> U(0.0, 1.0);
        std::normal_distribution<double> N(0.0, 1.0);

        const double cx = 0.35 + 0.3 * U(rng), cy = 0.35 + 0.3 * U(rng);
        const double heading = 2.0 * M_PI * U(rng);
        const double drift = 0.05 + 0.10 * U(rng);
        const int n_waves = 2;
        std::array<double, 2> amp_x{}, amp_y{}, freq{}, ph_x{}, ph_y{};
        for (int q = 0; q < n_waves; ++q) {
            amp_x[q] = (0.03 + 0.05 * U(rng)) / (q + 1);
            amp_y[q] = (0.03 + 0.05 * U(rng)) / (q + 1);
            freq[q] = 0.5 + 1.5 * U(rng) + q;  // cycles per trajectory
            ph_x[q] = 2.0 * M_PI * U(rng);
            ph_y[q] = 2.0 * M_PI * U(rng);
        }
        const double dt_mean = 5.0 + 10.0 * U(rng);
        double t = 600.0 * U(rng);
        double rw_x = 0.0, rw_y = 0.0, rv_x = 0.0, rv_y = 0.0;
        const double rw_step = 0.0002, rw_bound = 0.02;

        std::vector<double> times(length);
        for (auto& ti : times) {
            ti = t;
            t += dt_mean * (0.5 + U(rng));
        }

        Trajectory tr;
        tr.points.reserve(length);
        for (std::size_t i = 0; i < length; ++i) {
            const double u = (times[i] - times.front()) / (times.back() - times.front());
            double x = cx + drift * (u - 0.5) * std::cos(heading);
            double y = cy + drift * (u - 0.5) * std::sin(heading);
            for (int q = 0; q < n_waves; ++q) {
                x += amp_x[q] * std::sin(2.0 * M_PI * freq[q] * u + ph_x[q]);
                y += amp_y[q] * std::sin(2.0 * M_PI * freq[q] * u + ph_y[q]);
            }
            rv_x = 0.9 * rv_x + rw_step * N(rng);
            rv_y = 0.9 * rv_y + rw_step * N(rng);
            rw_x = std::clamp(0.98 * rw_x + rv_x, -rw_bound, rw_bound);
            rw_y = std::clamp(0.98 * rw_y + rv_y, -rw_bound, rw_bound);
            x = std::clamp(x + rw_x, 0.0, 1.0);
            y = std::clamp(y + rw_y, 0.0, 1.0);
            tr.points.push_back({box.lng_min + x * w, box.lat_min + y * h, times[i]});
        }
        out.push_back(std::move(tr));
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSONL I/O

inline nlohmann::json trajectory_to_json(const Trajectory& tr) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : tr.points) pts.push_back({p.lng, p.lat, p.time});
    return nlohmann::json{{"points", std::move(pts)}};
}

inline Trajectory trajectory_from_json(const nlohmann::json& j) {
    Trajectory tr;
    const auto& pts = j.at("points");
    if (!pts.is_array()) throw InvalidArgument("\"points\" must be an array");
    tr.points.reserve(pts.size());
    for (const auto& p : pts) {
        if (!p.is_array() || p.size() != 3) throw InvalidArgument("each point must be [lng, lat, time]");
        tr.points.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
    }
    return tr;
}

inline void save_jsonl(std::span<const Trajectory> data, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    for (const auto& tr : data) os << trajectory_to_json(tr).dump() << '\n';
    if (!os) throw IoError("write failed: " + path);
}

/// Blank lines are skipped. Throws ParseError (with line number) on malformed
/// JSON and ValidationError naming the trajectory index on bad timestamps.
inline std::vector<Trajectory> load_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("file not found or unreadable: " + path);
    std::vector<Trajectory> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        Trajectory tr;
        try {
            tr = trajectory_from_json(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(lineno, e.what());
        } catch (const InvalidArgument& e) {
            throw ParseError(lineno, e.what());
        }
        validate_trajectory(tr, "trajectory " + std::to_string(out.size()));
        out.push_back(std::move(tr));
    }
    return out;
}

}  // namespace trajweaver
