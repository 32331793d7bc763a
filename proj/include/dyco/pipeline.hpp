#pragma once

// Inference: forward pass, per-cluster decoding, scoring, cluster-size filter
// and class-agnostic mask NMS. Also the prediction file format.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyco/model.hpp"

namespace dyco {

struct InstancePrediction {
    std::vector<bool> mask;
    int category = 0;
    double score = 0.0;
    std::size_t source_cluster = 0;

    std::size_t support() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
    bool operator==(const InstancePrediction&) const = default;
};

inline double mask_iou(const std::vector<bool>& a, const std::vector<bool>& b) {
    if (a.size() != b.size())
        throw Error("mask_iou: masks over " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " points");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] && b[i];
        uni += a[i] || b[i];
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Mean probability of `category` over the mask's points.
inline double score_instance(const std::vector<bool>& mask, const Tensor& semantic_probs, int category) {
    const std::size_t c = semantic_probs.cols();
    if (semantic_probs.rows() != mask.size()) throw Error("score_instance: mask and probabilities disagree on N");
    if (category < 0 || static_cast<std::size_t>(category) >= c)
        throw Error("score_instance: category " + std::to_string(category) + " out of range");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) {
            sum += semantic_probs[i * c + static_cast<std::size_t>(category)];
            ++count;
        }
    if (count == 0) throw Error("score_instance: empty mask");
    return std::clamp(sum / static_cast<double>(count), 0.0, 1.0);
}

/// Greedy class-agnostic NMS; ties in score go to the smaller source cluster.
inline std::vector<InstancePrediction> nms(std::vector<InstancePrediction> preds, double iou_threshold) {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw Error("nms: threshold must lie in (0, 1]");
    std::stable_sort(preds.begin(), preds.end(), [](const auto& a, const auto& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.source_cluster < b.source_cluster;
    });
    std::vector<InstancePrediction> kept;
    for (auto& p : preds) {
        bool keep = true;
        for (const auto& k : kept)
            if (mask_iou(p.mask, k.mask) >= iou_threshold) {
                keep = false;
                break;
            }
        if (keep) kept.push_back(std::move(p));
    }
    return kept;
}

enum class DecoderMode {
    Learned,     // dynamic filters from the generator
    Membership,  // mask = cluster members (oracle harness)
};

struct InferenceConfig {
    ClusteringConfig clustering;
    std::size_t min_cluster = 50;
    double nms_iou = 0.3;
    double mask_threshold = kMaskThreshold;
    DecoderMode decoder = DecoderMode::Learned;
    std::size_t filter_seeds = 0;
    std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<InstancePrediction> membership_predictions(const std::vector<Cluster>& clusters,
                                                              const Tensor& probs, std::size_t n,
                                                              std::size_t min_cluster) {
    std::vector<InstancePrediction> out;
    for (std::size_t z = 0; z < clusters.size(); ++z) {
        const auto& cl = clusters[z];
        if (cl.size() < min_cluster) continue;
        InstancePrediction p;
        p.mask.assign(n, false);
        for (auto i : cl.members) p.mask[i] = true;
        p.category = cl.label;
        p.source_cluster = z;
        p.score = score_instance(p.mask, probs, cl.label);
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace detail

struct InferenceOutput {
    std::vector<InstancePrediction> predictions;  // after the size filter and NMS
    std::vector<Cluster> clusters;                // every cluster found
};

/// Inference straight from per-point predictions with membership masks; needs
/// no model parameters.
inline InferenceOutput infer_from_predictions(const PointScene& scene, const PredictionOverride& predictions,
                                              const InferenceConfig& cfg) {
    const std::size_t n = scene.size();
    if (predictions.offsets.size() != n || n == 0 || predictions.semantic_logits.size() % n != 0)
        throw Error("inference: predictions do not match the scene");
    const Tensor logits(Shape{n, predictions.semantic_logits.size() / n}, predictions.semantic_logits);
    const auto labels = argmax_labels(logits);
    InferenceOutput out;
    out.clusters = cluster_homogeneous(scene.coords, predictions.offsets, labels, cfg.clustering);
    out.predictions =
        nms(detail::membership_predictions(out.clusters, softmax_rows(logits), n, cfg.min_cluster), cfg.nms_iou);
    return out;
}

inline InferenceOutput infer_scene(const PointScene& scene, const Model& model, const InferenceConfig& cfg,
                                   const std::optional<PredictionOverride>& override_predictions = {}) {
    ForwardOptions fwd;
    fwd.clustering = cfg.clustering;
    fwd.min_cluster = cfg.decoder == DecoderMode::Learned ? cfg.min_cluster : static_cast<std::size_t>(-1);
    fwd.filter_seeds = cfg.filter_seeds;
    fwd.seed = cfg.seed;
    fwd.override_predictions = override_predictions;
    ForwardPass fp = run_forward(scene, model, fwd);
    const std::size_t n = scene.size();
    InferenceOutput out;

    if (cfg.decoder == DecoderMode::Membership) {
        out.predictions =
            nms(detail::membership_predictions(fp.clusters, fp.semantic_probs, n, cfg.min_cluster), cfg.nms_iou);
    } else {
        // p > t on the sigmoid is logit > log(t / (1 - t)).
        const double cut = std::log(cfg.mask_threshold / (1.0 - cfg.mask_threshold));
        std::vector<InstancePrediction> preds;
        for (const auto& d : fp.decodes) {
            const Tensor& logits = fp.eval.value(d.logits);
            InstancePrediction p;
            p.mask.assign(n, false);
            for (std::size_t k = 0; k < d.rows.size(); ++k)
                if (logits[k] > cut) p.mask[static_cast<std::size_t>(d.rows[k])] = true;
            if (p.support() == 0) continue;
            p.category = fp.clusters[d.cluster].label;
            p.source_cluster = d.cluster;
            p.score = score_instance(p.mask, fp.semantic_probs, p.category);
            preds.push_back(std::move(p));
        }
        out.predictions = nms(std::move(preds), cfg.nms_iou);
    }
    out.clusters = std::move(fp.clusters);
    return out;
}

inline std::vector<InstancePrediction> run_inference(const PointScene& scene, const Model& model,
                                                     const InferenceConfig& cfg,
                                                     const std::optional<PredictionOverride>& override_predictions = {}) {
    return infer_scene(scene, model, cfg, override_predictions).predictions;
}

// Prediction files: JSON lines. The first line carries free-form metadata
// (the effective run configuration); every following line is one instance
// with its mask run-length encoded as [start, length] pairs over point indices.

struct ScenePredictions {
    std::uint32_t scene = 0;
    std::uint32_t num_points = 0;
    std::vector<InstancePrediction> instances;

    bool operator==(const ScenePredictions&) const = default;
};

struct PredictionFile {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<ScenePredictions> scenes;
};

inline std::vector<std::pair<std::uint32_t, std::uint32_t>> rle_encode(const std::vector<bool>& mask) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> runs;
    for (std::size_t i = 0; i < mask.size();) {
        if (!mask[i]) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < mask.size() && mask[j]) ++j;
        runs.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j - i));
        i = j;
    }
    return runs;
}

inline std::vector<bool> rle_decode(const std::vector<std::pair<std::uint32_t, std::uint32_t>>& runs, std::size_t n) {
    std::vector<bool> mask(n, false);
    for (auto [start, len] : runs) {
        if (static_cast<std::size_t>(start) + len > n) throw Error("predictions: run exceeds point count");
        for (std::uint32_t k = 0; k < len; ++k) mask[start + k] = true;
    }
    return mask;
}

inline std::string encode_predictions(const PredictionFile& file) {
    std::string out = nlohmann::json{{"meta", file.meta}}.dump() + "\n";
    for (const auto& s : file.scenes) {
        // A scene with no instances still gets a record so its point count survives.
        if (s.instances.empty()) out += nlohmann::json{{"scene", s.scene}, {"points", s.num_points}}.dump() + "\n";
        for (const auto& p : s.instances) {
            if (p.mask.size() != s.num_points) throw Error("predictions: mask size differs from scene point count");
            nlohmann::json j;
            j["scene"] = s.scene;
            j["points"] = s.num_points;
            j["category"] = p.category;
            j["score"] = p.score;
            j["cluster"] = p.source_cluster;
            j["rle"] = rle_encode(p.mask);
            out += j.dump() + "\n";
        }
    }
    return out;
}

inline PredictionFile decode_predictions(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    PredictionFile file;
    std::size_t line_no = 0;
    try {
        if (!std::getline(in, line)) throw Error("predictions: empty file");
        ++line_no;
        const auto head = nlohmann::json::parse(line);
        if (!head.contains("meta")) throw Error("predictions: first line has no 'meta' record");
        file.meta = head.at("meta");
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            const auto scene = j.at("scene").get<std::uint32_t>();
            const auto points = j.at("points").get<std::uint32_t>();
            if (file.scenes.empty() || file.scenes.back().scene != scene)
                file.scenes.push_back({scene, points, {}});
            auto& s = file.scenes.back();
            if (s.num_points != points) throw Error("predictions: inconsistent point count for scene");
            if (!j.contains("rle")) continue;
            InstancePrediction p;
            p.category = j.at("category").get<int>();
            p.score = j.at("score").get<double>();
            p.source_cluster = j.at("cluster").get<std::size_t>();
            p.mask = rle_decode(j.at("rle").get<std::vector<std::pair<std::uint32_t, std::uint32_t>>>(), points);
            s.instances.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error("predictions: line " + std::to_string(line_no) + ": " + e.what());
    }
    return file;
}

inline void save_predictions(const std::string& path, const PredictionFile& file) {
    const std::string text = encode_predictions(file);
    io::write_file(path, std::vector<char>(text.begin(), text.end()));
}

inline PredictionFile load_predictions(const std::string& path) {
    const auto bytes = io::read_file(path);
    return decode_predictions(std::string(bytes.begin(), bytes.end()));
}

}  // namespace dyco
