#pragma once

// Effective run configuration: built-in defaults, overridden by a JSON config
// file, overridden by command-line flags.

#include <string>

#include <json.hpp>

#include "dyco/losses.hpp"
#include "dyco/pipeline.hpp"

namespace dyco::cli {

struct RunConfig {
    std::uint64_t seed = 1;
    std::size_t jobs = 1;
    SceneConfig scene;
    ModelConfig model;
    TrainConfig train;
    InferenceConfig inference;
    double offset_noise = 0.0;  // oracle votes in sweep-radius

    RunConfig() {
        train.steps = 3000;
        train.warmup_steps = 600;
        // Synthetic desk scenes: small clusters are normal, so the preset is 10.
        inference.min_cluster = 10;
        inference.clustering.radius = 0.2;
    }
};

namespace detail {

template <class T>
void take(const nlohmann::json& j, const char* key, T& field) {
    if (j.contains(key)) field = j.at(key).get<T>();
}

inline const nlohmann::json& section(const nlohmann::json& j, const char* key) {
    static const nlohmann::json empty = nlohmann::json::object();
    return j.contains(key) ? j.at(key) : empty;
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
    const auto& s = c.scene;
    const auto& m = c.model;
    const auto& t = c.train;
    const auto& i = c.inference;
    return {
        {"seed", c.seed},
        {"jobs", c.jobs},
        {"scene",
         {{"min_instances", s.min_instances}, {"max_instances", s.max_instances}, {"thing_classes", s.thing_classes},
          {"size_min", s.size_min}, {"size_max", s.size_max}, {"d_min", s.d_min}, {"gap", s.gap},
          {"floor_size", s.floor_size}, {"stuff_density", s.stuff_density}, {"walls", s.walls},
          {"label_noise", s.label_noise}, {"feature_noise", s.feature_noise}, {"min_points", s.min_points},
          {"max_points", s.max_points}}},
        {"model",
         {{"width", m.backbone.width}, {"mask_dim", m.backbone.mask_dim}, {"heads", m.backbone.heads},
          {"transformer_layers", m.backbone.transformer_layers}, {"ffn_hidden", m.backbone.ffn_hidden},
          {"token_cell", m.backbone.token_cell}, {"generator_channels", m.generator.channels},
          {"generator_hidden", m.generator.hidden}, {"grid", m.generator.grid}, {"filter_hidden", m.layout.hidden},
          {"layers", m.layout.layers}}},
        {"train",
         {{"lr", t.lr}, {"steps", t.steps}, {"warmup_steps", t.warmup_steps}, {"batch", t.batch},
          {"train_min_cluster", t.loss.forward.min_cluster},
          {"centroid_norm", t.loss.centroid_norm == CentroidNorm::L1 ? "l1" : "euclidean"}}},
        {"inference",
         {{"radius", i.clustering.radius}, {"min_cluster", i.min_cluster}, {"nms_iou", i.nms_iou},
          {"decoder", i.decoder == DecoderMode::Learned ? "learned" : "membership"},
          {"filter_seeds", i.filter_seeds}}},
        {"offset_noise", c.offset_noise},
    };
}

/// Overrides every field present in `j`; absent fields keep their value.
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
    using detail::section;
    using detail::take;
    take(j, "seed", c.seed);
    take(j, "jobs", c.jobs);
    take(j, "offset_noise", c.offset_noise);
    const auto& s = section(j, "scene");
    take(s, "min_instances", c.scene.min_instances);
    take(s, "max_instances", c.scene.max_instances);
    take(s, "thing_classes", c.scene.thing_classes);
    take(s, "size_min", c.scene.size_min);
    take(s, "size_max", c.scene.size_max);
    take(s, "d_min", c.scene.d_min);
    take(s, "gap", c.scene.gap);
    take(s, "floor_size", c.scene.floor_size);
    take(s, "stuff_density", c.scene.stuff_density);
    take(s, "walls", c.scene.walls);
    take(s, "label_noise", c.scene.label_noise);
    take(s, "feature_noise", c.scene.feature_noise);
    take(s, "min_points", c.scene.min_points);
    take(s, "max_points", c.scene.max_points);
    const auto& m = section(j, "model");
    take(m, "width", c.model.backbone.width);
    take(m, "mask_dim", c.model.backbone.mask_dim);
    take(m, "heads", c.model.backbone.heads);
    take(m, "transformer_layers", c.model.backbone.transformer_layers);
    take(m, "ffn_hidden", c.model.backbone.ffn_hidden);
    take(m, "token_cell", c.model.backbone.token_cell);
    take(m, "generator_channels", c.model.generator.channels);
    take(m, "generator_hidden", c.model.generator.hidden);
    take(m, "grid", c.model.generator.grid);
    take(m, "filter_hidden", c.model.layout.hidden);
    take(m, "layers", c.model.layout.layers);
    const auto& t = section(j, "train");
    take(t, "lr", c.train.lr);
    take(t, "steps", c.train.steps);
    take(t, "warmup_steps", c.train.warmup_steps);
    take(t, "batch", c.train.batch);
    take(t, "train_min_cluster", c.train.loss.forward.min_cluster);
    if (t.contains("centroid_norm")) {
        const auto v = t.at("centroid_norm").get<std::string>();
        if (v != "l1" && v != "euclidean") throw Error("config: centroid_norm must be 'l1' or 'euclidean'");
        c.train.loss.centroid_norm = v == "l1" ? CentroidNorm::L1 : CentroidNorm::Euclidean;
    }
    const auto& i = section(j, "inference");
    take(i, "radius", c.inference.clustering.radius);
    take(i, "min_cluster", c.inference.min_cluster);
    take(i, "nms_iou", c.inference.nms_iou);
    take(i, "filter_seeds", c.inference.filter_seeds);
    if (i.contains("decoder")) {
        const auto v = i.at("decoder").get<std::string>();
        if (v != "learned" && v != "membership") throw Error("config: decoder must be 'learned' or 'membership'");
        c.inference.decoder = v == "learned" ? DecoderMode::Learned : DecoderMode::Membership;
    }
}

/// Range checks shared by config files and flags.
inline void validate(RunConfig& c) {
    if (!(c.inference.clustering.radius > 0.0)) throw Error("radius must be positive");
    if (!(c.inference.nms_iou > 0.0 && c.inference.nms_iou <= 1.0)) throw Error("nms-iou must lie in (0, 1]");
    if (c.model.generator.grid == 0) throw Error("grid must be positive");
    if (c.model.layout.layers == 0) throw Error("layers must be positive");
    if (c.model.backbone.mask_dim == 0) throw Error("mask-dim must be positive");
    if (c.jobs == 0) throw Error("jobs must be positive");
    if (c.train.warmup_steps > c.train.steps) throw Error("warmup_steps exceeds steps");
    if (!(c.train.lr >= 0.0)) throw Error("lr must be non-negative");
    c.model.backbone.num_classes = static_cast<std::size_t>(c.scene.num_classes());
    c.model.sync();
    dyco::validate(c.scene);
}

}  // namespace dyco::cli
