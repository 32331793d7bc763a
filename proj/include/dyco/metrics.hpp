#pragma once

// Instance segmentation metrics pooled over scenes: AP at IoU thresholds,
// mAP, coverage, precision/recall at 0.5, and box detection AP.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyco/pipeline.hpp"

namespace dyco {

/// One predicted or ground-truth instance. `points` is sorted and unique.
struct EvalInstance {
    std::size_t scene = 0;
    int category = 0;
    double score = 1.0;
    std::vector<std::uint32_t> points;
};

inline std::vector<std::uint32_t> mask_points(const std::vector<bool>& mask) {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) out.push_back(static_cast<std::uint32_t>(i));
    return out;
}

inline double point_set_iou(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
    std::size_t i = 0, j = 0, inter = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) ++i;
        else if (b[j] < a[i]) ++j;
        else {
            ++inter;
            ++i;
            ++j;
        }
    }
    const std::size_t uni = a.size() + b.size() - inter;
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Ground-truth instances of one scene (stuff excluded).
inline std::vector<EvalInstance> gt_instances(const PointScene& scene, std::size_t scene_index) {
    std::map<int, EvalInstance> by_id;
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const int id = scene.gt_instance[i];
        if (id < 0) continue;
        auto& inst = by_id[id];
        inst.scene = scene_index;
        inst.category = scene.gt_semantic[i];
        inst.points.push_back(static_cast<std::uint32_t>(i));
    }
    std::vector<EvalInstance> out;
    for (auto& [id, inst] : by_id) out.push_back(std::move(inst));
    return out;
}

inline std::vector<EvalInstance> eval_predictions(const std::vector<InstancePrediction>& preds, std::size_t scene_index) {
    std::vector<EvalInstance> out;
    for (const auto& p : preds) out.push_back({scene_index, p.category, p.score, mask_points(p.mask)});
    return out;
}

using IouFn = std::function<double(const EvalInstance&, const EvalInstance&)>;

inline double mask_iou_fn(const EvalInstance& a, const EvalInstance& b) {
    return a.scene == b.scene ? point_set_iou(a.points, b.points) : 0.0;
}

struct MatchResult {
    std::vector<std::size_t> order;  // prediction indices, score descending
    std::vector<bool> tp;            // aligned with order
    std::size_t num_gt = 0;
};

/// Greedy matching of class-`c` predictions, highest score first, each to the
/// unmatched ground truth of highest IoU >= threshold (ties to the earlier GT).
inline MatchResult match_class(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts,
                               int category, double threshold, const IouFn& iou = mask_iou_fn) {
    MatchResult r;
    std::vector<std::size_t> gt_idx;
    for (std::size_t g = 0; g < gts.size(); ++g)
        if (gts[g].category == category) gt_idx.push_back(g);
    r.num_gt = gt_idx.size();
    for (std::size_t p = 0; p < preds.size(); ++p)
        if (preds[p].category == category) r.order.push_back(p);
    std::stable_sort(r.order.begin(), r.order.end(),
                     [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
    std::vector<bool> used(gt_idx.size(), false);
    for (auto p : r.order) {
        double best = -1.0;
        std::size_t best_k = 0;
        for (std::size_t k = 0; k < gt_idx.size(); ++k) {
            if (used[k] || gts[gt_idx[k]].scene != preds[p].scene) continue;
            const double v = iou(preds[p], gts[gt_idx[k]]);
            if (v >= threshold && v > best) {
                best = v;
                best_k = k;
            }
        }
        r.tp.push_back(best >= 0.0);
        if (best >= 0.0) used[best_k] = true;
    }
    return r;
}

/// Area under the all-point interpolated precision-recall curve. Undefined
/// (nullopt) when the class has neither predictions nor ground truth.
inline std::optional<double> average_precision(const std::vector<EvalInstance>& preds,
                                               const std::vector<EvalInstance>& gts, double threshold, int category,
                                               const IouFn& iou = mask_iou_fn) {
    const MatchResult m = match_class(preds, gts, category, threshold, iou);
    if (m.num_gt == 0) return m.order.empty() ? std::nullopt : std::optional<double>(0.0);
    const std::size_t n = m.tp.size();
    std::vector<double> precision(n), recall(n);
    std::size_t tp = 0;
    for (std::size_t k = 0; k < n; ++k) {
        tp += m.tp[k];
        precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
        recall[k] = static_cast<double>(tp) / static_cast<double>(m.num_gt);
    }
    for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        ap += (recall[k] - prev_recall) * precision[k];
        prev_recall = recall[k];
    }
    return ap;
}

inline std::vector<double> map_thresholds() {
    std::vector<double> t;
    for (int k = 0; k < 10; ++k) t.push_back((50.0 + 5.0 * k) / 100.0);
    return t;
}

inline std::vector<int> categories_of(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts) {
    std::set<int> cats;
    for (const auto& p : preds) cats.insert(p.category);
    for (const auto& g : gts) cats.insert(g.category);
    return {cats.begin(), cats.end()};
}

/// Mean of the defined per-class APs; 0 when none is defined.
inline double class_mean_ap(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts,
                            double threshold, const IouFn& iou = mask_iou_fn) {
    double sum = 0.0;
    std::size_t count = 0;
    for (int c : categories_of(preds, gts))
        if (auto ap = average_precision(preds, gts, threshold, c, iou)) {
            sum += *ap;
            ++count;
        }
    return count ? sum / static_cast<double>(count) : 0.0;
}

struct Coverage {
    double mcov = 0.0;
    double mwcov = 0.0;
};

/// Each ground truth's best IoU against any prediction of the same scene.
inline Coverage coverage_metrics(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts) {
    if (gts.empty()) throw Error("coverage: no ground-truth instances");
    double sum = 0.0, weighted = 0.0, total = 0.0;
    for (const auto& g : gts) {
        double best = 0.0;
        for (const auto& p : preds) best = std::max(best, mask_iou_fn(p, g));
        sum += best;
        weighted += static_cast<double>(g.points.size()) * best;
        total += static_cast<double>(g.points.size());
    }
    return {sum / static_cast<double>(gts.size()), total > 0.0 ? weighted / total : 0.0};
}

struct PrecRec {
    double mprec = 0.0;
    double mrec = 0.0;
};

/// Class means at IoU 0.5. Precision averages over classes with predictions or
/// ground truth (no predictions counts as 0); recall over classes with ground truth.
inline PrecRec prec_rec_at50(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts) {
    double psum = 0.0, rsum = 0.0;
    std::size_t pc = 0, rc = 0;
    for (int c : categories_of(preds, gts)) {
        const MatchResult m = match_class(preds, gts, c, 0.5);
        const double tp = static_cast<double>(std::count(m.tp.begin(), m.tp.end(), true));
        psum += m.order.empty() ? 0.0 : tp / static_cast<double>(m.order.size());
        ++pc;
        if (m.num_gt > 0) {
            rsum += tp / static_cast<double>(m.num_gt);
            ++rc;
        }
    }
    return {pc ? psum / static_cast<double>(pc) : 0.0, rc ? rsum / static_cast<double>(rc) : 0.0};
}

struct Box3 {
    Vec3 lo{};
    Vec3 hi{};
    bool operator==(const Box3&) const = default;
};

inline Box3 box_from_points(const std::vector<std::uint32_t>& points, const std::vector<Vec3>& coords) {
    if (points.empty()) throw Error("boxes_from_masks: empty mask");
    Box3 b{coords.at(points[0]), coords.at(points[0])};
    for (auto i : points)
        for (int k = 0; k < 3; ++k) {
            b.lo[k] = std::min(b.lo[k], coords.at(i)[k]);
            b.hi[k] = std::max(b.hi[k], coords.at(i)[k]);
        }
    return b;
}

inline std::vector<Box3> boxes_from_masks(const std::vector<EvalInstance>& instances,
                                          const std::vector<std::vector<Vec3>>& scene_coords) {
    std::vector<Box3> out;
    for (const auto& inst : instances) out.push_back(box_from_points(inst.points, scene_coords.at(inst.scene)));
    return out;
}

/// Axis-aligned box IoU. Two identical boxes score 1 even with zero volume.
inline double box_iou(const Box3& a, const Box3& b) {
    if (a == b) return 1.0;
    double inter = 1.0, va = 1.0, vb = 1.0;
    for (int k = 0; k < 3; ++k) {
        inter *= std::max(0.0, std::min(a.hi[k], b.hi[k]) - std::max(a.lo[k], b.lo[k]));
        va *= a.hi[k] - a.lo[k];
        vb *= b.hi[k] - b.lo[k];
    }
    const double uni = va + vb - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

/// Class-mean AP with boxes fitted to every mask.
inline double detection_ap(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts,
                           const std::vector<std::vector<Vec3>>& scene_coords, double threshold) {
    // Box each instance once; the IoU callback looks boxes up by address.
    const auto pb = boxes_from_masks(preds, scene_coords);
    const auto gb = boxes_from_masks(gts, scene_coords);
    auto box_of = [&](const EvalInstance& e) -> const Box3& {
        if (!preds.empty() && &e >= &preds.front() && &e <= &preds.back())
            return pb[static_cast<std::size_t>(&e - preds.data())];
        return gb[static_cast<std::size_t>(&e - gts.data())];
    };
    const IouFn iou = [&](const EvalInstance& p, const EvalInstance& g) {
        return p.scene == g.scene ? box_iou(box_of(p), box_of(g)) : 0.0;
    };
    return class_mean_ap(preds, gts, threshold, iou);
}

struct EvalReport {
    std::vector<double> thresholds;                          // 0.25 followed by 0.50..0.95
    std::map<int, std::vector<std::optional<double>>> ap;    // per class, aligned with thresholds
    double map = 0.0;
    double ap50 = 0.0;
    double ap25 = 0.0;
    double mcov = 0.0;
    double mwcov = 0.0;
    double mprec = 0.0;
    double mrec = 0.0;
    double det_ap25 = 0.0;
    double det_ap50 = 0.0;
    std::size_t num_predictions = 0;
    std::size_t num_ground_truth = 0;

    /// Every headline figure, in report order.
    std::vector<std::pair<std::string, double>> headline() const {
        return {{"mAP", map},       {"AP@50", ap50}, {"AP@25", ap25},         {"mCov", mcov},
                {"mWCov", mwcov},   {"mPrec", mprec}, {"mRec", mrec},         {"detAP@25", det_ap25},
                {"detAP@50", det_ap50}};
    }
};

inline EvalReport evaluate_instances(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts,
                                     const std::vector<std::vector<Vec3>>& scene_coords) {
    EvalReport r;
    r.num_predictions = preds.size();
    r.num_ground_truth = gts.size();
    r.thresholds = {0.25};
    for (double t : map_thresholds()) r.thresholds.push_back(t);
    for (int c : categories_of(preds, gts))
        for (double t : r.thresholds) r.ap[c].push_back(average_precision(preds, gts, t, c));

    auto mean_at = [&](std::size_t ti) {
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& [c, aps] : r.ap)
            if (aps[ti]) {
                sum += *aps[ti];
                ++count;
            }
        return count ? sum / static_cast<double>(count) : 0.0;
    };
    r.ap25 = mean_at(0);
    r.ap50 = mean_at(1);
    for (std::size_t ti = 1; ti < r.thresholds.size(); ++ti) r.map += mean_at(ti);
    r.map /= static_cast<double>(r.thresholds.size() - 1);
    if (!gts.empty()) {
        const Coverage cov = coverage_metrics(preds, gts);
        r.mcov = cov.mcov;
        r.mwcov = cov.mwcov;
    }
    const PrecRec pr = prec_rec_at50(preds, gts);
    r.mprec = pr.mprec;
    r.mrec = pr.mrec;
    r.det_ap25 = detection_ap(preds, gts, scene_coords, 0.25);
    r.det_ap50 = detection_ap(preds, gts, scene_coords, 0.5);
    return r;
}

inline nlohmann::json report_json(const EvalReport& r) {
    nlohmann::json j;
    for (const auto& [name, v] : r.headline()) j[name] = v;
    j["predictions"] = r.num_predictions;
    j["ground_truth"] = r.num_ground_truth;
    j["thresholds"] = r.thresholds;
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [c, aps] : r.ap) {
        nlohmann::json row = nlohmann::json::array();
        for (const auto& v : aps) row.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
        per_class[std::to_string(c)] = row;
    }
    j["ap_per_class"] = per_class;
    return j;
}

inline std::string report_text(const EvalReport& r) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    for (const auto& [name, v] : r.headline()) out << std::left << std::setw(10) << name << std::right << std::setw(8) << v << "\n";
    out << "\nclass";
    for (double t : r.thresholds) out << std::setw(8) << std::setprecision(2) << t;
    out << std::setprecision(4) << "\n";
    for (const auto& [c, aps] : r.ap) {
        out << std::left << std::setw(5) << c << std::right;
        for (const auto& v : aps) {
            if (v) out << std::setw(8) << *v;
            else out << std::setw(8) << "-";
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace dyco
