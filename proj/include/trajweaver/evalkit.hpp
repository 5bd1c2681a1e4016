#pragma once

// Recovery metrics (MSE, NDTW, JSD), workload estimators and the
// linear-interpolation baseline.
//
// Conventions: MSE is the mean over (query rows x 2 coordinates) in
// normalized space; NDTW is the DTW distance with Euclidean point cost in
// normalized space divided by the truth length; JSD compares 64 x 64
// occupancy histograms over the dataset box, natural log.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "traj_data.hpp"

namespace trajweaver {

/// Mean squared error over mask = 1 rows; inputs are [L x 2].
inline double mse_metric(std::span<const double> recovered, std::span<const double> truth,
                         std::span<const double> mask) {
    if (recovered.size() != truth.size() || recovered.size() != 2 * mask.size())
        throw ShapeError("mse_metric: misaligned inputs");
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] != 1.0) continue;
        for (int c = 0; c < 2; ++c) {
            const double d = recovered[2 * i + c] - truth[2 * i + c];
            acc += d * d;
        }
        n += 2;
    }
    if (n == 0) throw InvalidArgument("mse_metric: no query rows");
    return acc / static_cast<double>(n);
}

/// Normalized [L x 2] coordinates of a trajectory.
inline std::vector<double> normalized_xy(const Trajectory& tr, const NormStats& s) {
    std::vector<double> out;
    out.reserve(2 * tr.size());
    for (const auto& p : tr.points) {
        const XY u = normalize_xy(p.lng, p.lat, s);
        out.push_back(u[0]);
        out.push_back(u[1]);
    }
    return out;
}

/// Trajectory-level MSE; timelines must match point for point.
inline double mse_metric(const Trajectory& recovered, const Trajectory& truth, std::span<const double> mask,
                         const NormStats& s) {
    if (recovered.size() != truth.size()) throw ShapeError("mse_metric: trajectories differ in length");
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (recovered.points[i].time != truth.points[i].time)
            throw ShapeError("mse_metric: timelines differ at row " + std::to_string(i));
    return mse_metric(normalized_xy(recovered, s), normalized_xy(truth, s), mask);
}

/// Raw DTW distance with Euclidean point cost.
inline double dtw_distance(std::span<const XY> a, std::span<const XY> b) {
    if (a.empty() || b.empty()) throw InvalidArgument("dtw: empty input");
    const std::size_t n = a.size(), m = b.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
    prev[0] = 0.0;
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = inf;
        for (std::size_t j = 1; j <= m; ++j) {
            const double cost = std::hypot(a[i - 1][0] - b[j - 1][0], a[i - 1][1] - b[j - 1][1]);
            cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

inline double ndtw_metric(std::span<const XY> recovered, std::span<const XY> truth) {
    return dtw_distance(recovered, truth) / static_cast<double>(truth.size());
}

inline std::vector<XY> normalized_points(const Trajectory& tr, const NormStats& s) {
    std::vector<XY> out;
    out.reserve(tr.size());
    for (const auto& p : tr.points) out.push_back(normalize_xy(p.lng, p.lat, s));
    return out;
}

// ---------------------------------------------------------------------------
// JSD

struct JsdGrid {
    std::size_t bins = 64;
    double smoothing = 0.0;  // added to every bin probability before renormalizing
};

inline std::vector<double> occupancy_histogram(std::span<const Trajectory> set, const NormStats& box,
                                               const JsdGrid& grid) {
    std::vector<double> h(grid.bins * grid.bins, 0.0);
    std::size_t n = 0;
    const auto bin = [&](double v, double lo, double hi) {
        const double u = (v - lo) / (hi - lo);
        const auto k = static_cast<long>(std::floor(u * static_cast<double>(grid.bins)));
        return static_cast<std::size_t>(std::clamp(k, 0L, static_cast<long>(grid.bins) - 1));
    };
    for (const auto& tr : set)
        for (const auto& p : tr.points) {
            h[bin(p.lat, box.lat_min, box.lat_max) * grid.bins + bin(p.lng, box.lng_min, box.lng_max)] += 1.0;
            ++n;
        }
    if (n == 0) throw InvalidArgument("jsd: empty point set");
    const double denom = static_cast<double>(n) * (1.0 + grid.smoothing * static_cast<double>(h.size()));
    for (auto& v : h) v = (v + grid.smoothing * static_cast<double>(n)) / denom;
    return h;
}

/// Jensen-Shannon divergence of two discrete distributions, nats.
inline double jsd_distributions(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw ShapeError("jsd: histogram sizes differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        const double a = p[i] > 0.0 ? p[i] * std::log(p[i] / m) : 0.0;
        const double b = q[i] > 0.0 ? q[i] * std::log(q[i] / m) : 0.0;
        acc += a + b;
    }
    return std::max(0.0, 0.5 * acc);
}

inline double jsd_metric(std::span<const Trajectory> recovered, std::span<const Trajectory> truth, const NormStats& box,
                         const JsdGrid& grid = {}) {
    if (recovered.empty() || truth.empty()) throw InvalidArgument("jsd: empty set");
    box.validate();
    return jsd_distributions(occupancy_histogram(recovered, box, grid), occupancy_histogram(truth, box, grid));
}

// ---------------------------------------------------------------------------
// Workload estimation

inline constexpr double kEarthRadiusKm = 6371.0;

inline double haversine_km(double lng1, double lat1, double lng2, double lat2) {
    const double rad = M_PI / 180.0;
    const double dlat = (lat2 - lat1) * rad, dlng = (lng2 - lng1) * rad;
    const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                     std::cos(lat1 * rad) * std::cos(lat2 * rad) * std::sin(dlng / 2) * std::sin(dlng / 2);
    return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(a)));
}

struct SpeedDistance {
    double avg_speed_mps = 0.0;
    double distance_km = 0.0;
};

inline SpeedDistance speed_and_distance(const Trajectory& tr) {
    if (tr.size() < 2) throw InvalidArgument("speed_and_distance: need at least 2 points");
    const double duration = tr.points.back().time - tr.points.front().time;
    if (!(duration > 0.0)) throw InvalidArgument("speed_and_distance: zero duration");
    double km = 0.0;
    for (std::size_t i = 1; i < tr.size(); ++i)
        km += haversine_km(tr.points[i - 1].lng, tr.points[i - 1].lat, tr.points[i].lng, tr.points[i].lat);
    return {km * 1000.0 / duration, km};
}

/// Linear-interpolation recoverer used as the comparison floor.
inline Trajectory baseline_linear(const RecoveryTask& task) { return linear_prior(task.sparse, task.query); }

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
    double mse = 0.0;
    double ndtw = 0.0;
    double jsd = 0.0;
    std::size_t n_trajectories = 0;
    nlohmann::json config = nlohmann::json::object();

    nlohmann::json to_json() const {
        return {{"mse", mse}, {"ndtw", ndtw}, {"jsd", jsd}, {"n_trajectories", n_trajectories}, {"config", config}};
    }

    std::string to_table() const {
        std::ostringstream os;
        os << std::left << std::setw(16) << "metric" << std::right << std::setw(16) << "value" << '\n';
        os << std::string(32, '-') << '\n';
        os << std::scientific << std::setprecision(6);
        os << std::left << std::setw(16) << "MSE" << std::right << std::setw(16) << mse << '\n';
        os << std::left << std::setw(16) << "NDTW" << std::right << std::setw(16) << ndtw << '\n';
        os << std::left << std::setw(16) << "JSD" << std::right << std::setw(16) << jsd << '\n';
        os << std::left << std::setw(16) << "trajectories" << std::right << std::setw(16) << n_trajectories << '\n';
        return os.str();
    }
};

/// Corpus metrics. `masks[i]` marks the query rows of recovered[i] /
/// truth[i], which must share timelines.
inline EvalReport evaluate(std::span<const Trajectory> recovered, std::span<const Trajectory> truth,
                           std::span<const std::vector<double>> masks, const NormStats& norm) {
    if (recovered.size() != truth.size() || masks.size() != truth.size())
        throw ShapeError("evaluate: recovered, truth and mask sets differ in size");
    if (truth.empty()) throw InvalidArgument("evaluate: empty corpus");
    EvalReport r;
    r.n_trajectories = truth.size();
    double mse_sum = 0.0, mse_n = 0.0, ndtw_sum = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        double q = 0.0;
        for (double m : masks[i]) q += m;
        if (q > 0.0) {
            mse_sum += mse_metric(recovered[i], truth[i], masks[i], norm) * q;
            mse_n += q;
        }
        const auto a = normalized_points(recovered[i], norm), b = normalized_points(truth[i], norm);
        ndtw_sum += ndtw_metric(a, b);
    }
    r.mse = mse_n > 0.0 ? mse_sum / mse_n : 0.0;
    r.ndtw = ndtw_sum / static_cast<double>(truth.size());
    r.jsd = jsd_metric(recovered, truth, norm);
    return r;
}

}  // namespace trajweaver
