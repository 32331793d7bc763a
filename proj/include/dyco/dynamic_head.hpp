#pragma once

// Per-cluster filter generation and the dynamic instance decoder.
//
// A cluster's points are mean-pooled into a fixed g*g*g grid over the
// cluster's bounding box. Two occupancy-masked 3x3x3 convolutions, a mean
// over occupied voxels and an MLP produce one flat filter vector. The vector
// is read as a stack of 1x1 convolutions (a per-point MLP) applied to
// [F_mask | p - centroid] on the points sharing the cluster's label.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dyco/clustering.hpp"
#include "dyco/nn.hpp"

namespace dyco {

/// Decoder stack shape: (D'+3) -> H -> ... -> H -> 1 over `layers` layers.
struct FilterLayout {
    std::size_t mask_dim = 16;
    std::size_t hidden = 16;
    std::size_t layers = 3;

    std::size_t in_dim() const { return mask_dim + 3; }

    /// (in, out) for each layer.
    std::vector<std::pair<std::size_t, std::size_t>> layer_dims() const {
        if (layers == 0) throw Error("filter layout: at least one layer required");
        std::vector<std::pair<std::size_t, std::size_t>> dims;
        std::size_t in = in_dim();
        for (std::size_t l = 0; l < layers; ++l) {
            const std::size_t out = l + 1 == layers ? 1 : hidden;
            dims.emplace_back(in, out);
            in = out;
        }
        return dims;
    }

    bool operator==(const FilterLayout&) const = default;
};

using LayerDims = std::vector<std::pair<std::size_t, std::size_t>>;

inline std::size_t param_count(const LayerDims& dims) {
    std::size_t total = 0;
    for (auto [in, out] : dims) total += in * out + out;
    return total;
}

inline std::size_t param_count(const FilterLayout& layout) { return param_count(layout.layer_dims()); }

struct FilterVector {
    std::vector<double> flat;
    FilterLayout layout;
};

struct LayerFilter {
    Tensor weight;  // out x in
    Tensor bias;    // out
};

/// Packing order per layer: weights row-major (out x in), then biases.
inline std::vector<LayerFilter> unpack_filters(const std::vector<double>& flat, const LayerDims& dims) {
    if (flat.size() != param_count(dims))
        throw Error("unpack_filters: vector has " + std::to_string(flat.size()) + " values, layout needs " +
                    std::to_string(param_count(dims)));
    std::vector<LayerFilter> layers;
    std::size_t pos = 0;
    for (auto [in, out] : dims) {
        LayerFilter lf{Tensor(Shape{out, in}), Tensor(Shape{out})};
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), in * out, lf.weight.values().begin());
        pos += in * out;
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), out, lf.bias.values().begin());
        pos += out;
        layers.push_back(std::move(lf));
    }
    return layers;
}

inline std::vector<LayerFilter> unpack_filters(const FilterVector& fv) {
    return unpack_filters(fv.flat, fv.layout.layer_dims());
}

inline FilterVector pack_filters(const std::vector<LayerFilter>& layers, const FilterLayout& layout) {
    FilterVector fv{{}, layout};
    for (const auto& l : layers) {
        fv.flat.insert(fv.flat.end(), l.weight.values().begin(), l.weight.values().end());
        fv.flat.insert(fv.flat.end(), l.bias.values().begin(), l.bias.values().end());
    }
    if (fv.flat.size() != param_count(layout)) throw Error("pack_filters: layers do not match layout");
    return fv;
}

/// f_pos = p - centroid for every point.
inline std::vector<Vec3> position_embed(const std::vector<Vec3>& coords, const Vec3& centroid) {
    std::vector<Vec3> out(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i)
        for (int k = 0; k < 3; ++k) out[i][k] = coords[i][k] - centroid[k];
    return out;
}

/// Voxel cell of every cluster member over the cluster's bounding box.
struct VoxelAssignment {
    std::size_t grid = 14;
    std::vector<std::int64_t> cell_of_member;
    std::vector<std::uint8_t> occupancy;  // g^3
    Vec3 lo{};
    Vec3 hi{};

    std::size_t occupied() const {
        return static_cast<std::size_t>(std::count(occupancy.begin(), occupancy.end(), std::uint8_t{1}));
    }
};

inline constexpr double kDegenerateExtent = 1e-6;

inline VoxelAssignment assign_voxels(const Cluster& cluster, const std::vector<Vec3>& coords, std::size_t g) {
    if (cluster.members.empty()) throw Error("voxelize_cluster: empty cluster");
    if (g == 0) throw Error("voxelize_cluster: grid size must be positive");
    VoxelAssignment va;
    va.grid = g;
    va.lo = va.hi = coords.at(cluster.members.front());
    for (auto i : cluster.members)
        for (int k = 0; k < 3; ++k) {
            va.lo[k] = std::min(va.lo[k], coords.at(i)[k]);
            va.hi[k] = std::max(va.hi[k], coords.at(i)[k]);
        }
    Vec3 extent{};
    for (int k = 0; k < 3; ++k) extent[k] = std::max(va.hi[k] - va.lo[k], kDegenerateExtent);
    va.occupancy.assign(g * g * g, 0);
    const auto gi = static_cast<std::int64_t>(g);
    for (auto i : cluster.members) {
        std::int64_t idx[3];
        for (int k = 0; k < 3; ++k) {
            const auto c = static_cast<std::int64_t>(std::floor((coords[i][k] - va.lo[k]) / extent[k] * static_cast<double>(g)));
            idx[k] = std::clamp<std::int64_t>(c, 0, gi - 1);
        }
        const std::int64_t cell = (idx[0] * gi + idx[1]) * gi + idx[2];
        va.cell_of_member.push_back(cell);
        va.occupancy[static_cast<std::size_t>(cell)] = 1;
    }
    return va;
}

struct ClusterVoxelGrid {
    Tensor features;  // [g^3, D]
    VoxelAssignment assignment;
};

/// Graph form: mean of F_b rows per occupied voxel, [g^3, D].
inline Node voxel_features(Graph& g, Node fb, const Cluster& cluster, const VoxelAssignment& va) {
    std::vector<std::int64_t> rows(cluster.members.begin(), cluster.members.end());
    return g.segment_mean(g.gather_rows(fb, std::move(rows)), va.cell_of_member, va.grid * va.grid * va.grid);
}

inline ClusterVoxelGrid voxelize_cluster(const Cluster& cluster, const std::vector<Vec3>& coords, const Tensor& fb,
                                         std::size_t g) {
    ClusterVoxelGrid out{Tensor(), assign_voxels(cluster, coords, g)};
    Graph graph;
    const Node f = graph.constant(fb);
    const Node v = voxel_features(graph, f, cluster, out.assignment);
    out.features = evaluate(graph, {}).value(v);
    return out;
}

struct GeneratorConfig {
    std::size_t in_channels = 32;
    std::size_t channels = 32;
    std::size_t hidden = 64;
    std::size_t grid = 14;
};

inline void init_generator(Params& params, const GeneratorConfig& cfg, const FilterLayout& layout, Rng& rng) {
    const double conv_std1 = std::sqrt(2.0 / (27.0 * static_cast<double>(cfg.in_channels)));
    const double conv_std2 = std::sqrt(2.0 / (27.0 * static_cast<double>(cfg.channels)));
    params["gw.conv1.w"] = random_normal(Shape{27, cfg.in_channels, cfg.channels}, conv_std1, rng);
    params["gw.conv1.b"] = Tensor(Shape{cfg.channels});
    params["gw.conv2.w"] = random_normal(Shape{27, cfg.channels, cfg.channels}, conv_std2, rng);
    params["gw.conv2.b"] = Tensor(Shape{cfg.channels});
    init_linear(params, "gw.fc1", cfg.channels, cfg.hidden, rng);
    init_linear(params, "gw.fc2", cfg.hidden, param_count(layout), rng, 0.25);
}

/// G_w on a voxelized cluster: [g^3, D] -> flat filter vector [param_count(layout)].
inline Node generate_filters(ParamNodes& p, Node voxels, const VoxelAssignment& va, const FilterLayout& layout) {
    Graph& g = p.graph();
    const std::size_t grid = va.grid;
    const Node c1 = g.relu(g.conv3d(voxels, p("gw.conv1.w"), p("gw.conv1.b"), grid, va.occupancy));
    const Node c2 = g.conv3d(c1, p("gw.conv2.w"), p("gw.conv2.b"), grid, va.occupancy);
    std::vector<std::int64_t> pool(va.occupancy.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = va.occupancy[i] ? 0 : -1;
    const Node pooled = g.segment_mean(c2, std::move(pool), 1);
    const Node flat = linear(p, "gw.fc2", g.relu(linear(p, "gw.fc1", pooled)));
    const std::size_t n = param_count(layout);
    if (g.shape(flat) != Shape{1, n})
        throw Error("generate_filters: generator emits " + shape_str(g.shape(flat)) + ", layout needs " +
                    std::to_string(n) + " parameters");
    return g.reshape(flat, Shape{n});
}

/// Decoder on the selected rows: logits [rows] for inputs [F_mask | f_pos].
inline Node decode_rows(Graph& g, Node mask_features, const std::vector<std::int64_t>& rows,
                        const std::vector<Vec3>& fpos_rows, Node filters, const FilterLayout& layout) {
    const auto& ms = g.shape(mask_features);
    if (ms.size() != 2 || ms[1] != layout.mask_dim)
        throw Error("decode_instance: mask features " + shape_str(ms) + " do not match layout D'=" +
                    std::to_string(layout.mask_dim));
    if (g.shape(filters) != Shape{param_count(layout)})
        throw Error("decode_instance: filter vector " + shape_str(g.shape(filters)) + " does not match layout");
    const std::size_t k = rows.size();
    Tensor pos(Shape{k, 3});
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t c = 0; c < 3; ++c) pos.at(i, c) = fpos_rows[i][c];
    Node x = g.concat({g.gather_rows(mask_features, rows), g.constant(std::move(pos))});
    std::size_t at = 0;
    const auto dims = layout.layer_dims();
    for (std::size_t l = 0; l < dims.size(); ++l) {
        const auto [in, out] = dims[l];
        const Node w = g.reshape(g.slice_flat(filters, at, at + in * out), Shape{out, in});
        at += in * out;
        const Node b = g.slice_flat(filters, at, at + out);
        at += out;
        x = g.add(g.matmul(x, g.transpose(w)), b);
        if (l + 1 < dims.size()) x = g.relu(x);
    }
    return g.reshape(x, Shape{k});
}

struct DecodedMask {
    std::vector<double> logits;         // N, zero off-category
    std::vector<double> probabilities;  // N, zero off-category
    std::vector<bool> mask;             // probabilities > threshold

    std::size_t count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

inline constexpr double kMaskThreshold = 0.5;

/// Tensor form of the decoder: m = sigmoid(conv(W, [F_mask | f_pos])) x b.
inline DecodedMask decode_instance(const Tensor& mask_features, const std::vector<Vec3>& fpos, const FilterVector& fv,
                                   const std::vector<bool>& category_mask, double threshold = kMaskThreshold) {
    const std::size_t n = mask_features.rows();
    if (mask_features.rank() != 2 || mask_features.cols() != fv.layout.mask_dim)
        throw Error("decode_instance: mask features " + shape_str(mask_features.shape()) +
                    " do not match layout D'=" + std::to_string(fv.layout.mask_dim));
    if (fpos.size() != n || category_mask.size() != n) throw Error("decode_instance: length mismatch");
    DecodedMask out{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), std::vector<bool>(n, false)};
    std::vector<std::int64_t> rows;
    std::vector<Vec3> pos;
    for (std::size_t i = 0; i < n; ++i)
        if (category_mask[i]) {
            rows.push_back(static_cast<std::int64_t>(i));
            pos.push_back(fpos[i]);
        }
    if (rows.empty()) return out;
    Graph g;
    const Node f = g.constant(mask_features);
    const Node w = g.constant(Tensor::vector(fv.flat));
    const Node logits = decode_rows(g, f, rows, pos, w, fv.layout);
    const Tensor values = evaluate(g, {}).value(logits);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto i = static_cast<std::size_t>(rows[k]);
        out.logits[i] = values[k];
        out.probabilities[i] = 1.0 / (1.0 + std::exp(-values[k]));
        out.mask[i] = out.probabilities[i] > threshold;
    }
    return out;
}

}  // namespace dyco
