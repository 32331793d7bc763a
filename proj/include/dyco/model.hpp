#pragma once

// Full forward pass for one scene. The backbone is evaluated first; its
// semantic and offset predictions drive clustering, and the per-cluster
// generator and decoder nodes are then appended to the same graph so that
// gradients reach the backbone through F_b and F_mask.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dyco/backbone.hpp"
#include "dyco/clustering.hpp"
#include "dyco/dynamic_head.hpp"

namespace dyco {

struct ModelConfig {
    BackboneConfig backbone;
    GeneratorConfig generator;
    FilterLayout layout;

    /// Keeps dependent widths consistent (G_w input = D, layout D' = mask head).
    ModelConfig& sync() {
        generator.in_channels = backbone.width;
        layout.mask_dim = backbone.mask_dim;
        return *this;
    }
};

inline constexpr const char* kModelMetaName = "meta.model";

inline Tensor encode_model_config(const ModelConfig& c) {
    return Tensor::vector({static_cast<double>(c.backbone.feature_dim), static_cast<double>(c.backbone.num_classes),
                           static_cast<double>(c.backbone.width), static_cast<double>(c.backbone.mask_dim),
                           static_cast<double>(c.backbone.heads), static_cast<double>(c.backbone.transformer_layers),
                           static_cast<double>(c.backbone.ffn_hidden), c.backbone.token_cell,
                           static_cast<double>(c.generator.channels), static_cast<double>(c.generator.hidden),
                           static_cast<double>(c.generator.grid), static_cast<double>(c.layout.hidden),
                           static_cast<double>(c.layout.layers)});
}

inline ModelConfig decode_model_config(const Tensor& t) {
    if (t.size() != 13) throw Error("model config: expected 13 entries, got " + std::to_string(t.size()));
    auto z = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
    ModelConfig c;
    c.backbone.feature_dim = z(0);
    c.backbone.num_classes = z(1);
    c.backbone.width = z(2);
    c.backbone.mask_dim = z(3);
    c.backbone.heads = z(4);
    c.backbone.transformer_layers = z(5);
    c.backbone.ffn_hidden = z(6);
    c.backbone.token_cell = t[7];
    c.generator.channels = z(8);
    c.generator.hidden = z(9);
    c.generator.grid = z(10);
    c.layout.hidden = z(11);
    c.layout.layers = z(12);
    return c.sync();
}

struct Model {
    ModelConfig config;
    Params params;
};

inline Model init_model(ModelConfig cfg, std::uint64_t seed) {
    cfg.sync();
    Model m{cfg, {}};
    Rng rng(seed);
    init_backbone(m.params, cfg.backbone, rng);
    init_generator(m.params, cfg.generator, cfg.layout, rng);
    m.params[kModelMetaName] = encode_model_config(cfg);
    return m;
}

/// Rebuilds a model from checkpoint parameters.
inline Model model_from_params(Params params) {
    auto it = params.find(kModelMetaName);
    if (it == params.end()) throw Error("model: parameters carry no '" + std::string(kModelMetaName) + "' entry");
    Model m{decode_model_config(it->second), std::move(params)};
    return m;
}

/// Semantic logits and offsets that replace the heads' predictions.
struct PredictionOverride {
    std::vector<double> semantic_logits;  // N x C
    std::vector<Vec3> offsets;
};

struct ForwardOptions {
    ClusteringConfig clustering;
    /// Clusters smaller than this get no filters.
    std::size_t min_cluster = 10;
    /// Ablation: when > 0, skip clustering and seed one filter at each of this
    /// many sampled foreground points (centroid = the point's centroid vote).
    std::size_t filter_seeds = 0;
    std::uint64_t seed = 0;
    std::optional<PredictionOverride> override_predictions;
};

struct ClusterDecode {
    std::size_t cluster = 0;                // index into ForwardPass::clusters
    std::vector<std::int64_t> rows;         // points with l_seg == l_C
    Node filters;
    Node logits;                            // [rows.size()]
};

struct ForwardPass {
    Graph graph;
    Evaluation eval;
    BackboneNodes nodes;
    std::vector<int> labels;       // l_seg
    std::vector<Vec3> offsets;     // offsets used for clustering
    Tensor semantic_probs;         // N x C
    std::vector<Cluster> clusters; // every cluster found
    std::vector<ClusterDecode> decodes;
};

namespace detail {

inline std::vector<Cluster> seed_clusters(const std::vector<Vec3>& coords, const std::vector<Vec3>& offsets,
                                          const std::vector<int>& labels, const ForwardOptions& opt) {
    std::vector<std::uint32_t> fg;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (!opt.clustering.stuff_labels.count(labels[i])) fg.push_back(static_cast<std::uint32_t>(i));
    Rng rng(opt.seed);
    std::shuffle(fg.begin(), fg.end(), rng);
    if (fg.size() > opt.filter_seeds) fg.resize(opt.filter_seeds);
    std::sort(fg.begin(), fg.end());
    std::vector<Cluster> out;
    for (auto i : fg) {
        Cluster c;
        c.members = {i};
        c.label = labels[i];
        for (int k = 0; k < 3; ++k) c.centroid[k] = coords[i][k] + offsets[i][k];
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace detail

inline ForwardPass run_forward(const PointScene& scene, const Model& model, const ForwardOptions& opt) {
    ForwardPass fp;
    ParamNodes p(fp.graph, model.params);
    fp.nodes = build_backbone(p, scene, model.config.backbone);
    evaluate(fp.graph, model.params, fp.eval);

    const std::size_t n = scene.size();
    const std::size_t c = model.config.backbone.num_classes;
    if (opt.override_predictions) {
        const auto& o = *opt.override_predictions;
        if (o.semantic_logits.size() != n * c || o.offsets.size() != n)
            throw Error("forward: override predictions do not match the scene");
        const Tensor logits(Shape{n, c}, o.semantic_logits);
        fp.labels = argmax_labels(logits);
        fp.semantic_probs = softmax_rows(logits);
        fp.offsets = o.offsets;
    } else {
        const Tensor& logits = fp.eval.value(fp.nodes.semantic_logits);
        fp.labels = argmax_labels(logits);
        fp.semantic_probs = softmax_rows(logits);
        const Tensor& off = fp.eval.value(fp.nodes.offsets);
        fp.offsets.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < 3; ++k) fp.offsets[i][k] = off.at(i, k);
    }

    fp.clusters = opt.filter_seeds > 0 ? detail::seed_clusters(scene.coords, fp.offsets, fp.labels, opt)
                                       : cluster_homogeneous(scene.coords, fp.offsets, fp.labels, opt.clustering);

    const auto& layout = model.config.layout;
    for (std::size_t z = 0; z < fp.clusters.size(); ++z) {
        const Cluster& cl = fp.clusters[z];
        if (cl.size() < opt.min_cluster) continue;
        ClusterDecode d;
        d.cluster = z;
        const VoxelAssignment va = assign_voxels(cl, scene.coords, model.config.generator.grid);
        d.filters = generate_filters(p, voxel_features(fp.graph, fp.nodes.features, cl, va), va, layout);
        std::vector<Vec3> pos;
        for (std::size_t i = 0; i < n; ++i)
            if (fp.labels[i] == cl.label) {
                d.rows.push_back(static_cast<std::int64_t>(i));
                pos.push_back({scene.coords[i][0] - cl.centroid[0], scene.coords[i][1] - cl.centroid[1],
                               scene.coords[i][2] - cl.centroid[2]});
            }
        d.logits = decode_rows(fp.graph, fp.nodes.mask_features, d.rows, pos, d.filters, layout);
        fp.decodes.push_back(std::move(d));
    }
    evaluate(fp.graph, model.params, fp.eval);
    return fp;
}

}  // namespace dyco
