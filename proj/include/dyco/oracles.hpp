#pragma once

// Slow, straight-line reference implementations used to cross-check the
// library. Each one recomputes its answer from first principles and shares no
// helper with the code it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "dyco/metrics.hpp"

namespace dyco::oracle {

/// Parameter total of a (D'+3) -> H x (L-1) -> 1 stack, summed layer by layer.
inline std::size_t filter_param_sum(std::size_t mask_dim, std::size_t hidden, std::size_t layers) {
    std::size_t total = 0;
    std::size_t fan_in = mask_dim + 3;
    for (std::size_t l = 1; l <= layers; ++l) {
        const std::size_t fan_out = l == layers ? 1 : hidden;
        for (std::size_t o = 0; o < fan_out; ++o) total += fan_in + 1;
        fan_in = fan_out;
    }
    return total;
}

/// All point indices within strict distance r of `query`, ascending.
inline std::vector<std::uint32_t> linear_scan(const std::vector<Vec3>& coords, const Vec3& query, double r) {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const double dx = coords[i][0] - query[0], dy = coords[i][1] - query[1], dz = coords[i][2] - query[2];
        if (dx * dx + dy * dy + dz * dz < r * r) out.push_back(static_cast<std::uint32_t>(i));
    }
    return out;
}

inline double set_iou(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
    const std::set<std::uint32_t> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    std::size_t inter = 0;
    for (auto v : sa) inter += sb.count(v);
    const std::size_t uni = sa.size() + sb.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// AP by brute force: true positives of every prediction prefix are recounted
/// from scratch, then precision is maximized over all prefixes reaching each
/// recall level. Returns -1 for the undefined case.
inline double average_precision_prefixes(const std::vector<EvalInstance>& preds, const std::vector<EvalInstance>& gts,
                                         double threshold, int category) {
    std::vector<const EvalInstance*> ranked;
    for (const auto& p : preds)
        if (p.category == category) ranked.push_back(&p);
    std::vector<const EvalInstance*> truth;
    for (const auto& g : gts)
        if (g.category == category) truth.push_back(&g);
    if (truth.empty()) return ranked.empty() ? -1.0 : 0.0;
    // Insertion sort by score, stable for ties.
    for (std::size_t i = 1; i < ranked.size(); ++i)
        for (std::size_t j = i; j > 0 && ranked[j]->score > ranked[j - 1]->score; --j) std::swap(ranked[j], ranked[j - 1]);

    std::vector<double> prec, rec;
    for (std::size_t k = 1; k <= ranked.size(); ++k) {
        std::vector<bool> taken(truth.size(), false);
        std::size_t tp = 0;
        for (std::size_t i = 0; i < k; ++i) {
            int best = -1;
            double best_iou = 0.0;
            for (std::size_t g = 0; g < truth.size(); ++g) {
                if (taken[g] || truth[g]->scene != ranked[i]->scene) continue;
                const double v = set_iou(ranked[i]->points, truth[g]->points);
                if (v >= threshold && (best < 0 || v > best_iou)) {
                    best = static_cast<int>(g);
                    best_iou = v;
                }
            }
            if (best >= 0) {
                taken[static_cast<std::size_t>(best)] = true;
                ++tp;
            }
        }
        prec.push_back(static_cast<double>(tp) / static_cast<double>(k));
        rec.push_back(static_cast<double>(tp) / static_cast<double>(truth.size()));
    }
    std::set<double> levels(rec.begin(), rec.end());
    double ap = 0.0, prev = 0.0;
    for (double r : levels) {
        double best = 0.0;
        for (std::size_t k = 0; k < rec.size(); ++k)
            if (rec[k] >= r) best = std::max(best, prec[k]);
        ap += (r - prev) * best;
        prev = r;
    }
    return ap;
}

/// NMS reference: survivors are decided rank by rank against a full IoU table.
inline std::vector<std::size_t> nms_survivors(const std::vector<InstancePrediction>& preds, double threshold) {
    const std::size_t n = preds.size();
    std::vector<std::vector<double>> iou(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            std::size_t inter = 0, uni = 0;
            for (std::size_t p = 0; p < preds[i].mask.size(); ++p) {
                inter += preds[i].mask[p] && preds[j].mask[p];
                uni += preds[i].mask[p] || preds[j].mask[p];
            }
            iou[i][j] = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
        }
    auto before = [&](std::size_t a, std::size_t b) {
        if (preds[a].score != preds[b].score) return preds[a].score > preds[b].score;
        if (preds[a].source_cluster != preds[b].source_cluster)
            return preds[a].source_cluster < preds[b].source_cluster;
        return a < b;
    };
    std::vector<std::size_t> rank(n);
    for (std::size_t i = 0; i < n; ++i) rank[i] = i;
    std::sort(rank.begin(), rank.end(), before);
    std::vector<std::size_t> kept;
    for (auto i : rank) {
        bool suppressed = false;
        for (auto k : kept) suppressed = suppressed || iou[i][k] >= threshold;
        if (!suppressed) kept.push_back(i);
    }
    return kept;
}

/// Decoder as explicit per-point loops over the flat filter vector.
inline std::vector<double> decode_logits(const Tensor& mask_features, const std::vector<Vec3>& fpos,
                                         const std::vector<double>& flat, std::size_t mask_dim, std::size_t hidden,
                                         std::size_t layers, const std::vector<bool>& category) {
    const std::size_t n = fpos.size();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (!category[i]) continue;
        std::vector<double> x(mask_dim + 3);
        for (std::size_t j = 0; j < mask_dim; ++j) x[j] = mask_features[i * mask_dim + j];
        for (std::size_t j = 0; j < 3; ++j) x[mask_dim + j] = fpos[i][j];
        std::size_t offset = 0;
        for (std::size_t l = 0; l < layers; ++l) {
            const std::size_t fan_in = x.size();
            const std::size_t fan_out = l + 1 == layers ? 1 : hidden;
            const std::size_t bias_at = offset + fan_out * fan_in;
            std::vector<double> y(fan_out);
            for (std::size_t o = 0; o < fan_out; ++o) {
                double s = flat[bias_at + o];
                for (std::size_t j = 0; j < fan_in; ++j) s += flat[offset + o * fan_in + j] * x[j];
                y[o] = l + 1 == layers ? s : std::max(0.0, s);
            }
            offset = bias_at + fan_out;
            x = y;
        }
        out[i] = x[0];
    }
    return out;
}

/// Mean feature per voxel via explicit bucketing of each point.
inline std::vector<std::vector<double>> voxel_means(const std::vector<Vec3>& coords,
                                                    const std::vector<std::uint32_t>& members, const Tensor& fb,
                                                    std::size_t g) {
    Vec3 lo = coords[members[0]], hi = coords[members[0]];
    for (auto m : members)
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::min(lo[k], coords[m][k]);
            hi[k] = std::max(hi[k], coords[m][k]);
        }
    const std::size_t d = fb.cols();
    std::vector<std::vector<double>> sums(g * g * g, std::vector<double>(d, 0.0));
    std::vector<double> counts(g * g * g, 0.0);
    for (auto m : members) {
        std::size_t idx[3];
        for (int k = 0; k < 3; ++k) {
            const double ext = std::max(hi[k] - lo[k], 1e-6);
            double cell = std::floor((coords[m][k] - lo[k]) / ext * static_cast<double>(g));
            cell = std::clamp(cell, 0.0, static_cast<double>(g - 1));
            idx[k] = static_cast<std::size_t>(cell);
        }
        const std::size_t v = (idx[0] * g + idx[1]) * g + idx[2];
        for (std::size_t j = 0; j < d; ++j) sums[v][j] += fb[m * d + j];
        counts[v] += 1.0;
    }
    for (std::size_t v = 0; v < sums.size(); ++v)
        if (counts[v] > 0.0)
            for (double& s : sums[v]) s /= counts[v];
    return sums;
}

inline double cross_entropy(const std::vector<double>& logits, std::size_t c, const std::vector<int>& labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[i * c + j]);
        total -= logits[i * c + static_cast<std::size_t>(labels[i])] - std::log(z);
    }
    return total / static_cast<double>(labels.size());
}

inline double centroid_distance(const std::vector<Vec3>& coords, const std::vector<Vec3>& offsets,
                                const std::vector<Vec3>& centroids, const std::vector<bool>& valid) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        if (!valid[i]) continue;
        double sq = 0.0;
        for (int k = 0; k < 3; ++k) {
            const double r = coords[i][k] + offsets[i][k] - centroids[i][k];
            sq += r * r;
        }
        total += std::sqrt(sq);
        ++count;
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

/// One cluster's logits, 0/1 targets and 0/1 category indicator.
struct MaskCase {
    std::vector<double> logits, target, indicator;
};

inline double mask_bce(const std::vector<MaskCase>& cases) {
    if (cases.empty()) return 0.0;
    double total = 0.0;
    for (const auto& c : cases) {
        double sum = 0.0, nz = 0.0;
        for (std::size_t j = 0; j < c.logits.size(); ++j) {
            if (c.indicator[j] == 0.0) continue;
            const double p = 1.0 / (1.0 + std::exp(-c.logits[j]));
            sum -= c.target[j] * std::log(p) + (1.0 - c.target[j]) * std::log(1.0 - p);
            nz += 1.0;
        }
        if (nz > 0.0) total += sum / nz;
    }
    return total / static_cast<double>(cases.size());
}

inline double dice(const std::vector<MaskCase>& cases) {
    if (cases.empty()) return 0.0;
    double total = 0.0;
    for (const auto& c : cases) {
        double pq = 0.0, pp = 0.0, qq = 0.0;
        for (std::size_t j = 0; j < c.logits.size(); ++j) {
            if (c.indicator[j] == 0.0) continue;
            const double p = 1.0 / (1.0 + std::exp(-c.logits[j]));
            pq += p * c.target[j];
            pp += p * p;
            qq += c.target[j] * c.target[j];
        }
        total += 1.0 - 2.0 * pq / (pp + qq + 1e-6);
    }
    return total / static_cast<double>(cases.size());
}

/// Plurality ground-truth id per cluster by histogram; -1 when background wins.
inline std::vector<int> plurality_targets(const std::vector<Cluster>& clusters, const std::vector<int>& gt_instance) {
    std::vector<int> out;
    for (const auto& c : clusters) {
        int max_id = -1;
        for (auto m : c.members) max_id = std::max(max_id, gt_instance[m]);
        std::vector<std::size_t> hist(static_cast<std::size_t>(max_id + 2), 0);  // slot 0 is background
        for (auto m : c.members) ++hist[static_cast<std::size_t>(gt_instance[m] + 1)];
        std::size_t best = 0;
        for (std::size_t h = 1; h < hist.size(); ++h)
            if (hist[h] > hist[best]) best = h;
        out.push_back(static_cast<int>(best) - 1);
    }
    return out;
}

}  // namespace dyco::oracle
