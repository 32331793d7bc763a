#pragma once

// Desk-scale backbone: a PointNet-style per-point encoder with a global
// context channel, a transformer over pooled grid tokens, and the semantic,
// offset and mask-feature heads.

#include <cmath>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "dyco/nn.hpp"
#include "dyco/scene.hpp"

namespace dyco {

struct BackboneConfig {
    std::size_t feature_dim = kSceneFeatureDim;
    std::size_t num_classes = 5;
    std::size_t width = 32;
    std::size_t mask_dim = 16;
    std::size_t heads = 4;
    std::size_t transformer_layers = 2;
    std::size_t ffn_hidden = 64;
    double token_cell = 1.0;

    AttentionConfig attention() const { return {width, heads, ffn_hidden, 3}; }
};

struct BackboneNodes {
    Node features;         // F_b after the bottleneck, N x D
    Node semantic_logits;  // N x C
    Node offsets;          // N x 3
    Node mask_features;    // N x D'
};

inline void init_backbone(Params& params, const BackboneConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.width;
    init_linear(params, "enc.in", 3 + cfg.feature_dim, d, rng);
    init_linear(params, "enc.hidden", d, d, rng);
    init_linear(params, "enc.ctx", 2 * d, d, rng);
    for (std::size_t l = 0; l < cfg.transformer_layers; ++l)
        init_attention(params, "tf" + std::to_string(l), cfg.attention(), rng);
    init_linear(params, "head.seg1", d, d, rng);
    init_linear(params, "head.seg2", d, cfg.num_classes, rng, 0.5);
    init_linear(params, "head.off1", d, d, rng);
    init_linear(params, "head.off2", d, 3, rng, 0.1);
    init_linear(params, "head.mask", d, cfg.mask_dim, rng);
}

/// Scene coordinates with the per-scene mean removed.
inline std::vector<Vec3> centered_coords(const std::vector<Vec3>& coords) {
    Vec3 mean{};
    for (const auto& p : coords)
        for (int k = 0; k < 3; ++k) mean[k] += p[k];
    for (double& m : mean) m /= static_cast<double>(coords.size());
    std::vector<Vec3> out(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i)
        for (int k = 0; k < 3; ++k) out[i][k] = coords[i][k] - mean[k];
    return out;
}

/// Per-point MLP over (centered coords, features), joined with a global mean
/// of the hidden features: N x D.
inline Node encode_points(ParamNodes& p, const std::vector<Vec3>& coords, const std::vector<double>& features,
                          const BackboneConfig& cfg) {
    Graph& g = p.graph();
    const std::size_t n = coords.size();
    if (n == 0) throw Error("encode_points: scene has no points");
    if (features.size() != n * cfg.feature_dim)
        throw Error("encode_points: expected " + std::to_string(n * cfg.feature_dim) + " feature values, got " +
                    std::to_string(features.size()));
    const auto centered = centered_coords(coords);
    const std::size_t in = 3 + cfg.feature_dim;
    Tensor x(Shape{n, in});
    for (std::size_t i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) x.at(i, static_cast<std::size_t>(k)) = centered[i][k];
        for (std::size_t j = 0; j < cfg.feature_dim; ++j) x.at(i, 3 + j) = features[i * cfg.feature_dim + j];
    }
    const Node h0 = g.relu(linear(p, "enc.in", g.constant(std::move(x))));
    const Node h1 = g.relu(linear(p, "enc.hidden", h0));
    const Node global = g.gather_rows(g.reshape(g.mean_rows(h1), Shape{1, cfg.width}),
                                      std::vector<std::int64_t>(n, 0));
    return g.relu(linear(p, "enc.ctx", g.concat({h1, global})));
}

/// Assignment of points to occupied cells of a uniform token grid.
struct TokenGrid {
    std::vector<std::int64_t> token_of_point;
    std::vector<Vec3> centers;  // mean centered coordinate of each token's points

    std::size_t size() const { return centers.size(); }
};

inline TokenGrid build_token_grid(const std::vector<Vec3>& centered, double cell) {
    if (!(cell > 0.0)) throw Error("bottleneck: token cell must be positive");
    std::map<std::tuple<std::int64_t, std::int64_t, std::int64_t>, std::int64_t> slots;
    std::vector<std::tuple<std::int64_t, std::int64_t, std::int64_t>> keys(centered.size());
    for (std::size_t i = 0; i < centered.size(); ++i) {
        keys[i] = {static_cast<std::int64_t>(std::floor(centered[i][0] / cell)),
                   static_cast<std::int64_t>(std::floor(centered[i][1] / cell)),
                   static_cast<std::int64_t>(std::floor(centered[i][2] / cell))};
        slots.emplace(keys[i], 0);
    }
    // Tokens ordered by cell key, so the assignment does not depend on point order.
    std::int64_t next = 0;
    for (auto& [key, slot] : slots) slot = next++;
    TokenGrid grid;
    grid.token_of_point.resize(centered.size());
    grid.centers.assign(slots.size(), Vec3{});
    std::vector<double> counts(slots.size(), 0.0);
    for (std::size_t i = 0; i < centered.size(); ++i) {
        const auto t = slots.at(keys[i]);
        grid.token_of_point[i] = t;
        for (int k = 0; k < 3; ++k) grid.centers[static_cast<std::size_t>(t)][k] += centered[i][k];
        counts[static_cast<std::size_t>(t)] += 1.0;
    }
    for (std::size_t t = 0; t < grid.size(); ++t)
        for (int k = 0; k < 3; ++k) grid.centers[t][k] /= counts[t];
    return grid;
}

/// Pools F_b into grid tokens, runs the attention layers with relative
/// position bias from token-center differences, and adds each token's output
/// back to its member points.
inline Node bottleneck_transformer(ParamNodes& p, Node features, const std::vector<Vec3>& coords,
                                   const BackboneConfig& cfg) {
    Graph& g = p.graph();
    const TokenGrid grid = build_token_grid(centered_coords(coords), cfg.token_cell);
    const std::size_t t = grid.size();
    Node tokens = g.segment_mean(features, grid.token_of_point, t);
    if (cfg.transformer_layers == 0) return features;
    Tensor rel(Shape{t, t, 3});
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j)
            for (std::size_t k = 0; k < 3; ++k) rel[(i * t + j) * 3 + k] = grid.centers[i][k] - grid.centers[j][k];
    const Node rel_node = g.constant(std::move(rel));
    for (std::size_t l = 0; l < cfg.transformer_layers; ++l)
        tokens = attention_block(p, "tf" + std::to_string(l), tokens, rel_node, cfg.attention());
    return g.add(features, g.gather_rows(tokens, grid.token_of_point));
}

inline BackboneNodes heads(ParamNodes& p, Node features) {
    Graph& g = p.graph();
    BackboneNodes out;
    out.features = features;
    out.semantic_logits = linear(p, "head.seg2", g.relu(linear(p, "head.seg1", features)));
    out.offsets = linear(p, "head.off2", g.relu(linear(p, "head.off1", features)));
    out.mask_features = linear(p, "head.mask", features);
    return out;
}

inline BackboneNodes build_backbone(ParamNodes& p, const PointScene& scene, const BackboneConfig& cfg) {
    const Node fb = encode_points(p, scene.coords, scene.features, cfg);
    return heads(p, bottleneck_transformer(p, fb, scene.coords, cfg));
}

/// l_seg: row-wise argmax, ties to the smaller class id.
inline std::vector<int> argmax_labels(const Tensor& logits) {
    std::vector<int> labels(logits.rows());
    const std::size_t c = logits.cols();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (logits[i * c + j] > logits[i * c + best]) best = j;
        labels[i] = static_cast<int>(best);
    }
    return labels;
}

/// Row-wise softmax of a concrete logits tensor.
inline Tensor softmax_rows(const Tensor& logits) {
    Tensor out(logits.shape());
    const std::size_t c = logits.cols();
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        double mx = logits[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[i * c + j] - mx);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = std::exp(logits[i * c + j] - mx) / z;
    }
    return out;
}

}  // namespace dyco
