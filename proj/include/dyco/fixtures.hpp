#pragma once

// Random inputs for property tests and self-checks.

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "dyco/metrics.hpp"

namespace dyco::fixtures {

struct ClusterInput {
    std::vector<Vec3> coords;
    std::vector<Vec3> offsets;
    std::vector<int> labels;
    double radius = 0.2;
};

/// Points in a box with random offsets and labels; stuff label 0 included.
inline ClusterInput random_cluster_input(Rng& rng, std::size_t max_points, int classes, double r_lo, double r_hi) {
    ClusterInput in;
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, max_points)(rng);
    const double extent = std::uniform_real_distribution<double>(0.5, 4.0)(rng);
    std::uniform_real_distribution<double> pos(0.0, extent), off(-0.3, 0.3);
    std::uniform_int_distribution<int> lab(0, classes);
    for (std::size_t i = 0; i < n; ++i) {
        in.coords.push_back({pos(rng), pos(rng), pos(rng)});
        in.offsets.push_back({off(rng), off(rng), off(rng)});
        in.labels.push_back(lab(rng));
    }
    in.radius = std::uniform_real_distribution<double>(r_lo, r_hi)(rng);
    return in;
}

struct EvalSet {
    std::vector<EvalInstance> preds;
    std::vector<EvalInstance> gts;
    std::vector<std::vector<Vec3>> coords;
};

/// A few scenes of disjoint ground-truth instances; predictions are noisy
/// copies, merges, fragments and spurious blobs with occasionally tied scores.
inline EvalSet random_eval_set(Rng& rng, int classes = 3) {
    EvalSet set;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t scenes = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
    for (std::size_t s = 0; s < scenes; ++s) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(20, 80)(rng);
        std::vector<Vec3> coords(n);
        for (auto& p : coords) p = {unit(rng) * 4, unit(rng) * 4, unit(rng)};
        set.coords.push_back(coords);
        std::vector<std::uint32_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<std::uint32_t>(i);
        std::shuffle(perm.begin(), perm.end(), rng);
        const std::size_t k = std::uniform_int_distribution<std::size_t>(0, 5)(rng);
        std::size_t at = 0;
        const std::size_t gt_begin = set.gts.size();
        for (std::size_t g = 0; g < k && at + 2 < n; ++g) {
            const std::size_t len = std::uniform_int_distribution<std::size_t>(2, std::min<std::size_t>(15, n - at))(rng);
            EvalInstance gt{s, std::uniform_int_distribution<int>(1, classes)(rng), 1.0,
                            {perm.begin() + static_cast<long>(at), perm.begin() + static_cast<long>(at + len)}};
            std::sort(gt.points.begin(), gt.points.end());
            at += len;
            set.gts.push_back(gt);
        }
        const std::size_t np = std::uniform_int_distribution<std::size_t>(0, 8)(rng);
        for (std::size_t p = 0; p < np; ++p) {
            EvalInstance pred{s, std::uniform_int_distribution<int>(1, classes)(rng), 0.0, {}};
            pred.score = unit(rng) < 0.2 ? 0.5 : std::round(unit(rng) * 20.0) / 20.0;
            std::vector<bool> mask(n, false);
            if (gt_begin < set.gts.size() && unit(rng) < 0.7) {
                const auto& src = set.gts[std::uniform_int_distribution<std::size_t>(gt_begin, set.gts.size() - 1)(rng)];
                if (unit(rng) < 0.6) pred.category = src.category;
                for (auto i : src.points) mask[i] = unit(rng) < 0.8;
            }
            const std::size_t extra = std::uniform_int_distribution<std::size_t>(0, 6)(rng);
            for (std::size_t e = 0; e < extra; ++e) mask[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)] = true;
            pred.points = mask_points(mask);
            if (pred.points.empty()) pred.points.push_back(static_cast<std::uint32_t>(perm[0]));
            set.preds.push_back(std::move(pred));
        }
    }
    return set;
}

/// Overlapping random masks over `n` points with scores drawn from a coarse grid.
inline std::vector<InstancePrediction> random_instance_predictions(Rng& rng, std::size_t n, std::size_t count) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<InstancePrediction> out;
    for (std::size_t k = 0; k < count; ++k) {
        InstancePrediction p;
        p.mask.assign(n, false);
        const std::size_t start = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        const std::size_t len = std::uniform_int_distribution<std::size_t>(1, n - start)(rng);
        for (std::size_t i = start; i < start + len; ++i) p.mask[i] = unit(rng) < 0.9;
        p.mask[start] = true;
        p.category = std::uniform_int_distribution<int>(1, 3)(rng);
        p.score = std::round(unit(rng) * 10.0) / 10.0;
        p.source_cluster = k;
        out.push_back(std::move(p));
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

/// Ground truth of a scene as (non-NMSed) perfect predictions.
inline std::vector<InstancePrediction> perfect_predictions(const PointScene& scene) {
    std::vector<InstancePrediction> out;
    for (const auto& g : gt_instances(scene, 0)) {
        InstancePrediction p;
        p.mask.assign(scene.size(), false);
        for (auto i : g.points) p.mask[i] = true;
        p.category = g.category;
        p.score = 1.0;
        p.source_cluster = out.size();
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace dyco::fixtures
