#pragma once

// Breadth-first grouping of points that share a semantic label and whose
// centroid votes (p + offset) chain together within a strict radius.

#include <algorithm>
#include <deque>
#include <numeric>
#include <set>
#include <vector>

#include "dyco/grid_index.hpp"

namespace dyco {

struct Cluster {
    std::vector<std::uint32_t> members;
    Vec3 centroid{};
    int label = 0;

    std::size_t size() const { return members.size(); }
};

struct ClusteringConfig {
    double radius = 0.2;
    std::set<int> stuff_labels{0};
    /// Clusters smaller than this are dropped downstream.
    std::size_t min_report_size = 50;
    /// Labels must lie in [0, num_classes); 0 disables the upper bound.
    int num_classes = 0;
    /// Average shifted rather than original coordinates for the centroid.
    bool centroid_from_shifted = false;
};

namespace detail {

inline void check_cluster_inputs(const std::vector<Vec3>& coords, const std::vector<Vec3>& offsets,
                                 const std::vector<int>& labels, const ClusteringConfig& cfg) {
    if (coords.size() != offsets.size() || coords.size() != labels.size())
        throw Error("clustering: length mismatch (" + std::to_string(coords.size()) + " coords, " +
                    std::to_string(offsets.size()) + " offsets, " + std::to_string(labels.size()) + " labels)");
    if (!(cfg.radius > 0.0)) throw Error("clustering: radius must be positive");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || (cfg.num_classes > 0 && labels[i] >= cfg.num_classes))
            throw Error("clustering: label " + std::to_string(labels[i]) + " out of range at point " + std::to_string(i));
}

inline std::vector<Vec3> shifted_coords(const std::vector<Vec3>& coords, const std::vector<Vec3>& offsets) {
    std::vector<Vec3> out(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i)
        for (int k = 0; k < 3; ++k) out[i][k] = coords[i][k] + offsets[i][k];
    return out;
}

inline void finish_cluster(Cluster& c, const std::vector<Vec3>& coords, const std::vector<Vec3>& shifted,
                           const ClusteringConfig& cfg) {
    const auto& src = cfg.centroid_from_shifted ? shifted : coords;
    Vec3 sum{};
    for (auto i : c.members)
        for (int k = 0; k < 3; ++k) sum[k] += src[i][k];
    for (int k = 0; k < 3; ++k) c.centroid[k] = sum[k] / static_cast<double>(c.members.size());
}

}  // namespace detail

/// Clusters in first-visited order; members in BFS visiting order, which
/// matches a scan of candidates in ascending point index.
inline std::vector<Cluster> cluster_homogeneous(const std::vector<Vec3>& coords, const std::vector<Vec3>& offsets,
                                                const std::vector<int>& labels, const ClusteringConfig& cfg) {
    detail::check_cluster_inputs(coords, offsets, labels, cfg);
    const std::size_t n = coords.size();
    std::vector<Vec3> shifted = detail::shifted_coords(coords, offsets);
    std::vector<char> visited(n, 0);
    for (std::size_t i = 0; i < n; ++i)
        if (cfg.stuff_labels.count(labels[i])) visited[i] = 1;

    const GridIndex index(shifted, cfg.radius);
    std::vector<Cluster> clusters;
    std::deque<std::uint32_t> queue;
    std::vector<std::uint32_t> nbrs;
    for (std::size_t i = 0; i < n; ++i) {
        if (visited[i]) continue;
        Cluster c;
        c.label = labels[i];
        visited[i] = 1;
        queue.push_back(static_cast<std::uint32_t>(i));
        c.members.push_back(static_cast<std::uint32_t>(i));
        while (!queue.empty()) {
            const auto k = queue.front();
            queue.pop_front();
            index.radius_neighbors(shifted[k], cfg.radius, nbrs);
            std::sort(nbrs.begin(), nbrs.end());
            for (auto j : nbrs) {
                if (visited[j] || labels[j] != labels[k]) continue;
                visited[j] = 1;
                queue.push_back(j);
                c.members.push_back(j);
            }
        }
        detail::finish_cluster(c, coords, shifted, cfg);
        clusters.push_back(std::move(c));
    }
    return clusters;
}

/// Clusters sorted by smallest member, members ascending.
inline std::vector<Cluster> canonicalize(std::vector<Cluster> clusters) {
    for (auto& c : clusters) std::sort(c.members.begin(), c.members.end());
    std::sort(clusters.begin(), clusters.end(),
              [](const Cluster& a, const Cluster& b) { return a.members.front() < b.members.front(); });
    return clusters;
}

/// Union-find over all same-label pairs with shifted distance < r. O(N^2).
inline std::vector<Cluster> cluster_bruteforce_oracle(const std::vector<Vec3>& coords, const std::vector<Vec3>& offsets,
                                                      const std::vector<int>& labels, const ClusteringConfig& cfg) {
    detail::check_cluster_inputs(coords, offsets, labels, cfg);
    const std::size_t n = coords.size();
    std::vector<Vec3> shifted = detail::shifted_coords(coords, offsets);
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    auto is_stuff = [&](std::size_t i) { return cfg.stuff_labels.count(labels[i]) > 0; };
    const double r2 = cfg.radius * cfg.radius;
    for (std::size_t i = 0; i < n; ++i) {
        if (is_stuff(i)) continue;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (is_stuff(j) || labels[i] != labels[j]) continue;
            if (distance_sq(shifted[i], shifted[j]) < r2) {
                const auto a = find(i), b = find(j);
                if (a != b) parent[std::max(a, b)] = std::min(a, b);
            }
        }
    }
    std::vector<Cluster> clusters;
    std::vector<std::int64_t> slot(n, -1);
    for (std::size_t i = 0; i < n; ++i) {
        if (is_stuff(i)) continue;
        const auto root = find(i);
        if (slot[root] < 0) {
            slot[root] = static_cast<std::int64_t>(clusters.size());
            clusters.emplace_back();
            clusters.back().label = labels[i];
        }
        clusters[static_cast<std::size_t>(slot[root])].members.push_back(static_cast<std::uint32_t>(i));
    }
    for (auto& c : clusters) detail::finish_cluster(c, coords, shifted, cfg);
    return canonicalize(std::move(clusters));
}

}  // namespace dyco
