#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "dyco/tensor.hpp"

namespace dyco {

using Vec3 = std::array<double, 3>;

inline double distance_sq(const Vec3& a, const Vec3& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

struct CellKey {
    std::int64_t x = 0, y = 0, z = 0;
    bool operator==(const CellKey&) const = default;
};

struct CellKeyHash {
    std::size_t operator()(const CellKey& k) const noexcept {
        auto h = static_cast<std::uint64_t>(k.x) * 0x9E3779B97F4A7C15ULL;
        h ^= static_cast<std::uint64_t>(k.y) * 0xC2B2AE3D27D4EB4FULL + (h << 6) + (h >> 2);
        h ^= static_cast<std::uint64_t>(k.z) * 0x165667B19E3779F9ULL + (h << 6) + (h >> 2);
        return static_cast<std::size_t>(h);
    }
};

/// Uniform hash grid over a fixed point set. Point i lives in cell
/// floor(coords[i] / cell_size).
class GridIndex {
public:
    GridIndex(std::vector<Vec3> coords, double cell_size) : cell_size_(cell_size), coords_(std::move(coords)) {
        if (!(cell_size_ > 0.0) || !std::isfinite(cell_size_)) throw Error("grid index: cell size must be positive");
        cells_.reserve(coords_.size());
        for (std::size_t i = 0; i < coords_.size(); ++i) {
            for (double c : coords_[i])
                if (!std::isfinite(c)) throw Error("grid index: non-finite coordinate at point " + std::to_string(i));
            cells_[cell_of(coords_[i])].push_back(static_cast<std::uint32_t>(i));
        }
    }

    CellKey cell_of(const Vec3& p) const {
        return {static_cast<std::int64_t>(std::floor(p[0] / cell_size_)),
                static_cast<std::int64_t>(std::floor(p[1] / cell_size_)),
                static_cast<std::int64_t>(std::floor(p[2] / cell_size_))};
    }

    /// Indices with Euclidean distance strictly below r, in unspecified order.
    std::vector<std::uint32_t> radius_neighbors(const Vec3& query, double r) const {
        std::vector<std::uint32_t> out;
        radius_neighbors(query, r, out);
        return out;
    }

    void radius_neighbors(const Vec3& query, double r, std::vector<std::uint32_t>& out) const {
        out.clear();
        if (!(r > 0.0)) throw Error("grid index: radius must be positive");
        const auto rings = static_cast<std::int64_t>(std::ceil(r / cell_size_));
        const CellKey c = cell_of(query);
        const double r2 = r * r;
        for (std::int64_t dx = -rings; dx <= rings; ++dx)
            for (std::int64_t dy = -rings; dy <= rings; ++dy)
                for (std::int64_t dz = -rings; dz <= rings; ++dz) {
                    auto it = cells_.find(CellKey{c.x + dx, c.y + dy, c.z + dz});
                    if (it == cells_.end()) continue;
                    for (auto i : it->second)
                        if (distance_sq(coords_[i], query) < r2) out.push_back(i);
                }
    }

    double cell_size() const { return cell_size_; }
    std::size_t size() const { return coords_.size(); }
    std::size_t cell_count() const { return cells_.size(); }
    const std::vector<Vec3>& coords() const { return coords_; }
    const std::unordered_map<CellKey, std::vector<std::uint32_t>, CellKeyHash>& cells() const { return cells_; }

private:
    double cell_size_;
    std::vector<Vec3> coords_;
    std::unordered_map<CellKey, std::vector<std::uint32_t>, CellKeyHash> cells_;
};

inline GridIndex build_grid_index(std::vector<Vec3> coords, double cell_size) {
    return GridIndex(std::move(coords), cell_size);
}

}  // namespace dyco
