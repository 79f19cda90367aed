#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gsi3/random.hpp"
#include "gsi3/splat.hpp"

namespace gsi3 {

using PointSet = std::vector<Eigen::Vector3d>;

namespace detail {

inline double point_distance(const Eigen::Vector3d& a, const Eigen::Vector3d& b) { return (a - b).norm(); }

/// Uniform grid over a point set for exact nearest-neighbor queries.
class PointGrid {
public:
    explicit PointGrid(std::span<const Eigen::Vector3d> pts) : pts_(pts) {
        lo_ = pts[0];
        Eigen::Vector3d hi = pts[0];
        for (const auto& p : pts) {
            lo_ = lo_.cwiseMin(p);
            hi = hi.cwiseMax(p);
        }
        const Eigen::Vector3d span = (hi - lo_).cwiseMax(1e-12);
        // About two points per cell for a surface-like distribution.
        const double target_cells = std::max(1.0, static_cast<double>(pts.size()) / 2.0);
        double cell = std::cbrt(span.prod() / target_cells);
        cell = std::max(cell, span.maxCoeff() / 256.0);
        cell_ = cell;
        for (int k = 0; k < 3; ++k) dims_[k] = std::max(1, static_cast<int>(std::floor(span[k] / cell_)) + 1);
        const std::size_t n_cells = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
        start_.assign(n_cells + 1, 0);
        std::vector<std::size_t> cell_of(pts.size());
        for (std::size_t i = 0; i < pts.size(); ++i) {
            const auto c = cell_coords(pts[i]);
            cell_of[i] = index(c[0], c[1], c[2]);
            ++start_[cell_of[i] + 1];
        }
        for (std::size_t c = 0; c < n_cells; ++c) start_[c + 1] += start_[c];
        order_.resize(pts.size());
        std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
        for (std::size_t i = 0; i < pts.size(); ++i) order_[fill[cell_of[i]]++] = i;
    }

    /// Exact distance from q to the nearest grid point.
    [[nodiscard]] double nearest(const Eigen::Vector3d& q) const {
        // Queries outside the grid start from the nearest boundary cell; rings beyond r
        // stay at least r * cell away either way.
        const std::array<int, 3> c = cell_coords(q);
        int max_ring = 0;
        for (int k = 0; k < 3; ++k) max_ring = std::max({max_ring, std::abs(c[k]), std::abs(dims_[k] - 1 - c[k])});
        double best = std::numeric_limits<double>::infinity();
        for (int r = 0; r <= max_ring; ++r) {
            visit_ring(c, r, q, best);
            // Cells beyond ring r are at least r * cell away from q. The margin guards
            // against rounding in the computed distances.
            if (best < r * cell_ * (1.0 - 1e-9)) break;
        }
        return best;
    }

private:
    [[nodiscard]] std::array<int, 3> cell_coords(const Eigen::Vector3d& p) const {
        std::array<int, 3> c;
        for (int k = 0; k < 3; ++k)
            c[k] = std::clamp(static_cast<int>(std::floor((p[k] - lo_[k]) / cell_)), 0, dims_[k] - 1);
        return c;
    }
    [[nodiscard]] std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * dims_[1] + y) * dims_[0] + x;
    }

    void visit_cell(int x, int y, int z, const Eigen::Vector3d& q, double& best) const {
        if (x < 0 || y < 0 || z < 0 || x >= dims_[0] || y >= dims_[1] || z >= dims_[2]) return;
        const std::size_t c = index(x, y, z);
        for (std::size_t k = start_[c]; k < start_[c + 1]; ++k)
            best = std::min(best, point_distance(q, pts_[order_[k]]));
    }

    void visit_ring(const std::array<int, 3>& c, int r, const Eigen::Vector3d& q, double& best) const {
        for (int dz = -r; dz <= r; ++dz)
            for (int dy = -r; dy <= r; ++dy) {
                const bool face = std::abs(dz) == r || std::abs(dy) == r;
                if (face) {
                    for (int dx = -r; dx <= r; ++dx) visit_cell(c[0] + dx, c[1] + dy, c[2] + dz, q, best);
                } else {
                    visit_cell(c[0] - r, c[1] + dy, c[2] + dz, q, best);
                    if (r > 0) visit_cell(c[0] + r, c[1] + dy, c[2] + dz, q, best);
                }
            }
    }

    std::span<const Eigen::Vector3d> pts_;
    Eigen::Vector3d lo_;
    double cell_ = 1.0;
    std::array<int, 3> dims_{1, 1, 1};
    std::vector<std::size_t> start_;
    std::vector<std::size_t> order_;
};

inline void require_points(std::span<const Eigen::Vector3d> p, std::span<const Eigen::Vector3d> q, const char* who) {
    if (p.empty() || q.empty()) throw std::invalid_argument(std::string(who) + ": point sets must be non-empty");
}

} // namespace detail

/// Symmetric Chamfer distance 0.5 * (mean_p min_q |p-q| + mean_q min_p |p-q|) using grids.
inline double chamfer(std::span<const Eigen::Vector3d> p, std::span<const Eigen::Vector3d> q) {
    detail::require_points(p, q, "chamfer");
    const detail::PointGrid gp(p), gq(q);
    double a = 0.0, b = 0.0;
    for (const auto& x : p) a += gq.nearest(x);
    for (const auto& x : q) b += gp.nearest(x);
    return 0.5 * (a / static_cast<double>(p.size()) + b / static_cast<double>(q.size()));
}

/// All-pairs reference implementation of chamfer().
inline double chamfer_brute_force(std::span<const Eigen::Vector3d> p, std::span<const Eigen::Vector3d> q) {
    detail::require_points(p, q, "chamfer_brute_force");
    auto directed = [](std::span<const Eigen::Vector3d> from, std::span<const Eigen::Vector3d> to) {
        double sum = 0.0;
        for (const auto& x : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& y : to) best = std::min(best, detail::point_distance(x, y));
            sum += best;
        }
        return sum / static_cast<double>(from.size());
    };
    return 0.5 * (directed(p, q) + directed(q, p));
}

/// n points from the Gaussians with opacity > 0.5, assigned round-robin; each point is
/// the mean plus a covariance draw truncated to Mahalanobis radius 1.
inline PointSet sample_points(const GaussianCloud& cloud, std::size_t n, std::uint64_t seed) {
    if (cloud.empty()) throw std::invalid_argument("sample_points: empty cloud");
    std::vector<std::size_t> opaque;
    for (std::size_t i = 0; i < cloud.size(); ++i)
        if (cloud.get(i).opacity() > 0.5) opaque.push_back(i);
    if (opaque.empty())
        throw std::runtime_error("sample_points: none of the " + std::to_string(cloud.size()) +
                                 " Gaussians has opacity above 0.5");
    Rng rng({seed, 0x73616d70ULL});
    PointSet pts;
    pts.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const Gaussian g = cloud.get(opaque[k % opaque.size()]);
        const Eigen::Matrix3d m = g.rotation_matrix() * g.scale().asDiagonal();
        Eigen::Vector3d z;
        do {
            z = {rng.normal(), rng.normal(), rng.normal()};
        } while (z.squaredNorm() > 1.0);
        pts.push_back(g.position + m * z);
    }
    return pts;
}

} // namespace gsi3
