#pragma once

// Synthetic scenes: surface-sampled boxes, spheres and ellipsoids resting on a
// floor plane (the stuff class, id 0), with per-point ground truth.
//
// Scene file layout (little-endian):
//   u32 version | u32 N | u32 C | u32 I | u64 seed |
//   N records of: f64 xyz[3] | f64 features[I] | i32 semantic | i32 instance | f64 centroid[3]

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dyco/binary_io.hpp"
#include "dyco/grid_index.hpp"

namespace dyco {

enum class ShapeKind { Box, Sphere, Ellipsoid };

inline const char* shape_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::Box: return "box";
        case ShapeKind::Sphere: return "sphere";
        case ShapeKind::Ellipsoid: return "ellipsoid";
    }
    return "?";
}

/// One generated object. `extent` holds half-sizes (box) or radii (sphere, ellipsoid).
struct ShapeInstance {
    ShapeKind kind = ShapeKind::Sphere;
    Vec3 center{};
    Vec3 extent{};
    int label = 1;
    int id = 0;

    /// Residual of the implicit surface equation at p; zero on the surface.
    double surface_residual(const Vec3& p) const {
        Vec3 q{};
        for (int k = 0; k < 3; ++k) q[k] = (p[k] - center[k]) / extent[k];
        if (kind == ShapeKind::Box)
            return std::max({std::fabs(q[0]), std::fabs(q[1]), std::fabs(q[2])}) - 1.0;
        return std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]) - 1.0;
    }

    /// Horizontal bounding radius.
    double footprint() const { return std::hypot(extent[0], extent[1]); }
};

struct SceneConfig {
    int min_instances = 4;
    int max_instances = 8;
    std::vector<ShapeKind> shapes{ShapeKind::Box, ShapeKind::Sphere, ShapeKind::Ellipsoid};
    /// Instance classes are 1..thing_classes; class 0 is stuff.
    int thing_classes = 4;
    /// Full object size range, meters.
    double size_min = 0.3;
    double size_max = 0.6;
    /// Minimum distance between centroids of same-class instances.
    double d_min = 1.0;
    /// Clearance between any two objects' footprints.
    double gap = 0.1;
    double floor_size = 4.0;
    /// Floor points per square meter.
    double stuff_density = 25.0;
    bool walls = false;
    /// Stddev of Gaussian noise added to oracle offsets.
    double offset_noise = 0.0;
    /// Probability that the class feature channel reports a random class.
    double label_noise = 0.05;
    double feature_noise = 0.05;
    int min_points = 120;
    int max_points = 220;
    std::uint64_t seed = 1;
    /// Layouts tried before giving up.
    int max_retries = 200;

    int num_classes() const { return thing_classes + 1; }
};

inline constexpr std::size_t kSceneFeatureDim = 7;
inline constexpr std::uint32_t kSceneFileVersion = 1;

struct PointScene {
    std::vector<Vec3> coords;
    /// Row-major N x feature_dim: xyz, surface normal, class channel.
    std::vector<double> features;
    std::size_t feature_dim = kSceneFeatureDim;
    int num_classes = 5;
    std::vector<int> gt_semantic;
    std::vector<int> gt_instance;
    std::vector<Vec3> gt_centroids;
    std::uint64_t seed = 0;
    /// Generator metadata; not serialized.
    std::vector<ShapeInstance> instances;

    std::size_t size() const { return coords.size(); }
    double feature(std::size_t i, std::size_t j) const { return features[i * feature_dim + j]; }

    bool operator==(const PointScene& o) const {
        return coords == o.coords && features == o.features && feature_dim == o.feature_dim &&
               num_classes == o.num_classes && gt_semantic == o.gt_semantic && gt_instance == o.gt_instance &&
               gt_centroids == o.gt_centroids && seed == o.seed;
    }
};

/// Distinct ids of non-stuff ground-truth instances, ascending.
inline std::vector<int> instance_ids(const PointScene& s) {
    std::vector<int> ids;
    for (int id : s.gt_instance)
        if (id >= 0) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
}

namespace detail {

inline Vec3 random_direction(Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (;;) {
        Vec3 d{n(rng), n(rng), n(rng)};
        const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        if (len > 1e-12) return {d[0] / len, d[1] / len, d[2] / len};
    }
}

inline void sample_surface(const ShapeInstance& s, Rng& rng, Vec3& p, Vec3& normal) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    if (s.kind == ShapeKind::Box) {
        const auto& h = s.extent;
        const double area[3] = {h[1] * h[2], h[0] * h[2], h[0] * h[1]};
        std::uniform_real_distribution<double> pick(0.0, 2.0 * (area[0] + area[1] + area[2]));
        double a = pick(rng);
        int axis = 0;
        double sign = 1.0;
        for (int face = 0; face < 6; ++face) {
            const double fa = area[face / 2];
            if (a < fa || face == 5) {
                axis = face / 2;
                sign = face % 2 ? -1.0 : 1.0;
                break;
            }
            a -= fa;
        }
        Vec3 q{u(rng), u(rng), u(rng)};
        q[axis] = sign;
        normal = {0.0, 0.0, 0.0};
        normal[axis] = sign;
        for (int k = 0; k < 3; ++k) p[k] = s.center[k] + q[k] * h[k];
        return;
    }
    const Vec3 d = random_direction(rng);
    Vec3 n{};
    for (int k = 0; k < 3; ++k) {
        p[k] = s.center[k] + s.extent[k] * d[k];
        n[k] = d[k] / s.extent[k];
    }
    const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    normal = {n[0] / len, n[1] / len, n[2] / len};
}

}  // namespace detail

/// Per-scene seed derived from a dataset seed and scene index (splitmix64).
inline std::uint64_t scene_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline void validate(const SceneConfig& cfg) {
    if (!(cfg.d_min > 0.0)) throw Error("scene config: d_min must be positive");
    if (cfg.offset_noise < 0.0 || cfg.label_noise < 0.0 || cfg.feature_noise < 0.0 || cfg.stuff_density < 0.0)
        throw Error("scene config: noise and density parameters must be non-negative");
    if (cfg.min_instances < 0 || cfg.max_instances < cfg.min_instances)
        throw Error("scene config: bad instance count range");
    if (cfg.min_points < 1 || cfg.max_points < cfg.min_points) throw Error("scene config: bad points-per-instance range");
    if (!(cfg.size_min > 0.0) || cfg.size_max < cfg.size_min) throw Error("scene config: bad size range");
    if (cfg.thing_classes < 1 || cfg.shapes.empty()) throw Error("scene config: need at least one class and shape");
}

namespace detail {

/// One draw of layout and points from `rng`.
inline PointScene sample_scene(const SceneConfig& cfg, Rng& rng) {
    std::uniform_int_distribution<int> count_dist(cfg.min_instances, cfg.max_instances);
    std::uniform_int_distribution<int> class_dist(1, cfg.thing_classes);
    std::uniform_real_distribution<double> size_dist(cfg.size_min, cfg.size_max);
    std::uniform_int_distribution<int> pts_dist(cfg.min_points, cfg.max_points);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    PointScene scene;
    scene.seed = cfg.seed;
    scene.num_classes = cfg.num_classes();
    const int count = count_dist(rng);
    const double half = cfg.floor_size / 2.0;

    // Instances are placed one at a time by rejection sampling; when one finds
    // no free spot, the whole layout is redrawn.
    constexpr int kSpotAttempts = 200;
    bool done = false;
    for (int layout = 0; layout < cfg.max_retries && !done; ++layout) {
        scene.instances.clear();
        done = true;
        for (int k = 0; k < count && done; ++k) {
            ShapeInstance inst;
            inst.label = class_dist(rng);
            inst.kind = cfg.shapes[static_cast<std::size_t>(inst.label - 1) % cfg.shapes.size()];
            inst.id = k;
            const double base = size_dist(rng) / 2.0;
            if (inst.kind == ShapeKind::Sphere)
                inst.extent = {base, base, base};
            else
                inst.extent = {base, size_dist(rng) / 2.0, size_dist(rng) / 2.0};
            bool placed = false;
            const double reach = half - inst.footprint();
            for (int attempt = 0; attempt < kSpotAttempts && !placed && reach > 0.0; ++attempt) {
                std::uniform_real_distribution<double> pos(-reach, reach);
                inst.center = {pos(rng), pos(rng), inst.extent[2]};
                placed = true;
                for (const auto& o : scene.instances) {
                    const double d = std::hypot(inst.center[0] - o.center[0], inst.center[1] - o.center[1]);
                    if (d < inst.footprint() + o.footprint() + cfg.gap ||
                        (o.label == inst.label &&
                         std::sqrt(distance_sq(inst.center, o.center)) < cfg.d_min + cfg.size_max)) {
                        placed = false;
                        break;
                    }
                }
            }
            if (placed) scene.instances.push_back(inst);
            else done = false;
        }
    }
    if (!done)
        throw Error("generate_scene: could not place " + std::to_string(count) + " instances in " +
                    std::to_string(cfg.max_retries) + " layouts (seed " + std::to_string(cfg.seed) + ")");

    auto push_point = [&](const Vec3& p, const Vec3& n, int label, int instance) {
        scene.coords.push_back(p);
        int reported = label;
        if (unit(rng) < cfg.label_noise)
            reported = std::uniform_int_distribution<int>(0, cfg.thing_classes)(rng);
        const double channel = static_cast<double>(reported) / cfg.thing_classes + cfg.feature_noise * noise(rng);
        for (double v : {p[0], p[1], p[2], n[0], n[1], n[2], channel}) scene.features.push_back(v);
        scene.gt_semantic.push_back(label);
        scene.gt_instance.push_back(instance);
    };

    const auto floor_points = static_cast<int>(std::lround(cfg.stuff_density * cfg.floor_size * cfg.floor_size));
    std::uniform_real_distribution<double> fpos(-half, half);
    for (int i = 0; i < floor_points; ++i) push_point({fpos(rng), fpos(rng), 0.0}, {0.0, 0.0, 1.0}, 0, -1);
    if (cfg.walls) {
        std::uniform_real_distribution<double> wz(0.0, 1.5);
        const auto wall_points = static_cast<int>(std::lround(cfg.stuff_density * cfg.floor_size * 1.5));
        for (int i = 0; i < wall_points; ++i) push_point({-half, fpos(rng), wz(rng)}, {1.0, 0.0, 0.0}, 0, -1);
    }

    for (const auto& inst : scene.instances) {
        const int n = pts_dist(rng);
        for (int i = 0; i < n; ++i) {
            Vec3 p{}, normal{};
            detail::sample_surface(inst, rng, p, normal);
            push_point(p, normal, inst.label, inst.id);
        }
    }

    // Per-point centroid: the mean of the instance's sampled points.
    scene.gt_centroids = scene.coords;
    std::vector<Vec3> sums(scene.instances.size(), Vec3{});
    std::vector<double> counts(scene.instances.size(), 0.0);
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const int id = scene.gt_instance[i];
        if (id < 0) continue;
        for (int k = 0; k < 3; ++k) sums[static_cast<std::size_t>(id)][k] += scene.coords[i][k];
        counts[static_cast<std::size_t>(id)] += 1.0;
    }
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const int id = scene.gt_instance[i];
        if (id < 0) continue;
        for (int k = 0; k < 3; ++k)
            scene.gt_centroids[i][k] = sums[static_cast<std::size_t>(id)][k] / counts[static_cast<std::size_t>(id)];
    }
    if (scene.size() == 0) throw Error("generate_scene: scene has no points");
    return scene;
}

/// Same-class ground-truth centroids at least d_min apart.
inline bool centroids_separated(const PointScene& scene, double d_min) {
    std::vector<Vec3> ctr(scene.instances.size());
    std::vector<int> label(scene.instances.size(), -1);
    for (std::size_t i = 0; i < scene.size(); ++i)
        if (scene.gt_instance[i] >= 0) {
            ctr[static_cast<std::size_t>(scene.gt_instance[i])] = scene.gt_centroids[i];
            label[static_cast<std::size_t>(scene.gt_instance[i])] = scene.gt_semantic[i];
        }
    for (std::size_t a = 0; a < ctr.size(); ++a)
        for (std::size_t b = a + 1; b < ctr.size(); ++b)
            if (label[a] == label[b] && distance_sq(ctr[a], ctr[b]) < d_min * d_min) return false;
    return true;
}

}  // namespace detail

/// Deterministic per seed. Center spacing makes a centroid violation very
/// unlikely; one still triggers a fresh draw.
inline PointScene generate_scene(const SceneConfig& cfg) {
    validate(cfg);
    Rng rng(cfg.seed);
    for (int round = 0; round < cfg.max_retries; ++round) {
        PointScene scene = detail::sample_scene(cfg, rng);
        if (detail::centroids_separated(scene, cfg.d_min)) return scene;
    }
    throw Error("generate_scene: same-class centroids closer than d_min in " + std::to_string(cfg.max_retries) +
                " draws (seed " + std::to_string(cfg.seed) + ")");
}

struct OraclePredictions {
    /// N x C one-hot logits scaled by 10.
    std::vector<double> semantic_logits;
    std::vector<Vec3> offsets;
};

inline OraclePredictions oracle_predictions(const PointScene& scene, double offset_noise = 0.0,
                                            std::uint64_t seed = 0) {
    OraclePredictions out;
    const auto c = static_cast<std::size_t>(scene.num_classes);
    out.semantic_logits.assign(scene.size() * c, 0.0);
    out.offsets.resize(scene.size());
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < scene.size(); ++i) {
        out.semantic_logits[i * c + static_cast<std::size_t>(scene.gt_semantic[i])] = 10.0;
        for (int k = 0; k < 3; ++k) {
            out.offsets[i][k] = scene.gt_centroids[i][k] - scene.coords[i][k];
            if (offset_noise > 0.0) out.offsets[i][k] += offset_noise * noise(rng);
        }
    }
    return out;
}

/// Scenes `first .. first+count-1` of the dataset keyed by `base_seed`.
inline std::vector<PointScene> generate_dataset(SceneConfig cfg, std::uint64_t base_seed, std::size_t first,
                                                std::size_t count) {
    std::vector<PointScene> out;
    out.reserve(count);
    for (std::size_t i = first; i < first + count; ++i) {
        cfg.seed = scene_seed(base_seed, i);
        out.push_back(generate_scene(cfg));
    }
    return out;
}

inline std::vector<char> encode_scene(const PointScene& s) {
    io::ByteWriter w;
    w.u32(kSceneFileVersion);
    w.u32(static_cast<std::uint32_t>(s.size()));
    w.u32(static_cast<std::uint32_t>(s.num_classes));
    w.u32(static_cast<std::uint32_t>(s.feature_dim));
    w.u64(s.seed);
    for (std::size_t i = 0; i < s.size(); ++i) {
        for (double v : s.coords[i]) w.f64(v);
        for (std::size_t j = 0; j < s.feature_dim; ++j) w.f64(s.feature(i, j));
        w.i32(s.gt_semantic[i]);
        w.i32(s.gt_instance[i]);
        for (double v : s.gt_centroids[i]) w.f64(v);
    }
    return w.buffer();
}

inline PointScene decode_scene(std::vector<char> bytes) {
    io::ByteReader r(std::move(bytes), "scene file");
    const auto version = r.u32();
    if (version != kSceneFileVersion) throw Error("scene file: unsupported version " + std::to_string(version));
    PointScene s;
    const auto n = r.u32();
    s.num_classes = static_cast<int>(r.u32());
    s.feature_dim = r.u32();
    s.seed = r.u64();
    const std::size_t record = 8 * (3 + s.feature_dim + 3) + 8;
    if (r.remaining() != record * n) throw Error("scene file: expected " + std::to_string(n) + " point records");
    s.coords.resize(n);
    s.features.resize(static_cast<std::size_t>(n) * s.feature_dim);
    s.gt_semantic.resize(n);
    s.gt_instance.resize(n);
    s.gt_centroids.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (double& v : s.coords[i]) v = r.f64();
        for (std::size_t j = 0; j < s.feature_dim; ++j) s.features[i * s.feature_dim + j] = r.f64();
        s.gt_semantic[i] = r.i32();
        s.gt_instance[i] = r.i32();
        for (double& v : s.gt_centroids[i]) v = r.f64();
    }
    return s;
}

inline void save_scene(const std::string& path, const PointScene& s) { io::write_file(path, encode_scene(s)); }
inline PointScene load_scene(const std::string& path) { return decode_scene(io::read_file(path)); }

}  // namespace dyco
