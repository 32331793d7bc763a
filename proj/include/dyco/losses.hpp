#pragma once

// Training objectives: semantic cross-entropy, centroid-vote regression,
// per-cluster masked BCE and dice, their sum, and the Adam training loop.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "dyco/model.hpp"

namespace dyco {

/// Mean cross-entropy of logits [N, C] against labels.
inline Node semantic_loss(Graph& g, Node logits, const std::vector<int>& labels) {
    const auto& s = g.shape(logits);
    if (s.size() != 2 || s[0] != labels.size())
        throw Error("semantic_loss: logits " + shape_str(s) + " vs " + std::to_string(labels.size()) + " labels");
    Tensor onehot(s);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= s[1])
            throw Error("semantic_loss: label " + std::to_string(labels[i]) + " out of range at point " + std::to_string(i));
        onehot.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    const Node picked = g.sum(g.mul(g.log_softmax(logits), g.constant(std::move(onehot))));
    return g.scale(picked, -1.0 / static_cast<double>(labels.size()));
}

enum class CentroidNorm { Euclidean, L1 };

/// (1/N_v) sum over valid points of |p + o - ctr|; zero when no point is valid.
inline Node centroid_loss(Graph& g, Node offsets, const std::vector<Vec3>& coords, const std::vector<Vec3>& gt_centroids,
                          const std::vector<bool>& valid, CentroidNorm norm = CentroidNorm::Euclidean) {
    const std::size_t n = coords.size();
    if (g.shape(offsets) != Shape{n, 3} || gt_centroids.size() != n || valid.size() != n)
        throw Error("centroid_loss: inputs do not describe the same " + std::to_string(n) + " points");
    Tensor target(Shape{n, 3});
    Tensor weight(Shape{n});
    std::size_t nv = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < 3; ++k) target.at(i, k) = gt_centroids[i][k] - coords[i][k];
        if (valid[i]) {
            weight[i] = 1.0;
            ++nv;
        }
    }
    const Node residual = g.sub(offsets, g.constant(std::move(target)));
    Node per_point;
    if (norm == CentroidNorm::Euclidean) {
        per_point = g.row_norm(residual);
    } else {
        Tensor ones(Shape{3, 1}, 1.0);
        per_point = g.reshape(g.matmul(g.abs(residual), g.constant(std::move(ones))), Shape{n});
    }
    const Node total = g.sum(g.mul(per_point, g.constant(std::move(weight))));
    return g.scale(total, nv ? 1.0 / static_cast<double>(nv) : 0.0);
}

/// Ground-truth instance behind each cluster, or -1 when the cluster is ignored.
/// Plurality vote over members; ties go to the smaller id (background -1 included).
inline std::vector<int> assign_targets(const std::vector<Cluster>& clusters, const std::vector<int>& gt_instance) {
    std::vector<int> out;
    out.reserve(clusters.size());
    for (const auto& c : clusters) {
        std::map<int, std::size_t> votes;
        for (auto i : c.members) ++votes[gt_instance.at(i)];
        int best = -1;
        std::size_t best_count = 0;
        for (const auto& [id, count] : votes)
            if (count > best_count) {
                best = id;
                best_count = count;
            }
        out.push_back(best < 0 ? -1 : best);
    }
    return out;
}

/// One cluster's contribution: logits over some rows with 0/1 targets and a
/// 0/1 indicator of the rows that count (l_seg == l_C).
struct MaskTerm {
    Node logits;
    Tensor target;
    Tensor indicator;
};

/// (1/Z') sum_z (1/N_z) sum_j ind_j * BCE(m_j, t_j). Terms with N_z = 0 add zero.
inline Node mask_loss(Graph& g, const std::vector<MaskTerm>& terms) {
    if (terms.empty()) return g.constant(Tensor::scalar(0.0));
    Node total = g.constant(Tensor::scalar(0.0));
    for (const auto& t : terms) {
        double nz = 0.0;
        for (double v : t.indicator.values()) nz += v;
        if (nz == 0.0) continue;
        const Node bce = g.bce_logits(t.logits, g.constant(t.target));
        const Node s = g.sum(g.mul(bce, g.constant(t.indicator)));
        total = g.add(total, g.scale(s, 1.0 / nz));
    }
    return g.scale(total, 1.0 / static_cast<double>(terms.size()));
}

inline constexpr double kDiceEps = 1e-6;

/// mean_z [1 - 2 sum(p q) / (sum p^2 + sum q^2 + eps)] over indicated rows.
inline Node dice_loss(Graph& g, const std::vector<MaskTerm>& terms) {
    if (terms.empty()) return g.constant(Tensor::scalar(0.0));
    Node total = g.constant(Tensor::scalar(0.0));
    for (const auto& t : terms) {
        const Node ind = g.constant(t.indicator);
        const Node prob = g.mul(g.sigmoid(t.logits), ind);
        double qq = 0.0;
        Tensor q = t.target;
        for (std::size_t i = 0; i < q.size(); ++i) {
            q[i] *= t.indicator[i];
            qq += q[i] * q[i];
        }
        const Node inter = g.sum(g.mul(prob, g.constant(std::move(q))));
        const Node denom = g.add(g.sum(g.mul(prob, prob)), g.constant(Tensor::scalar(qq + kDiceEps)));
        const Node one = g.constant(Tensor::scalar(1.0));
        total = g.add(total, g.sub(one, g.scale(g.div(inter, denom), 2.0)));
    }
    return g.scale(total, 1.0 / static_cast<double>(terms.size()));
}

struct LossBreakdown {
    double seg = 0.0;
    double ctr = 0.0;
    double mask = 0.0;
    double dice = 0.0;
    double total = 0.0;
};

struct LossConfig {
    ForwardOptions forward;
    CentroidNorm centroid_norm = CentroidNorm::Euclidean;
    /// Mask and dice terms are replaced by exact zeros.
    bool warmup = false;
};

struct LossGraph {
    ForwardPass pass;
    Node seg, ctr, mask, dice, total;
    std::vector<int> targets;  // per cluster in pass.clusters

    LossBreakdown breakdown() const {
        auto v = [&](Node n) { return pass.eval.value(n).item(); };
        return {v(seg), v(ctr), v(mask), v(dice), v(total)};
    }
};

/// Builds and evaluates the full loss graph for one scene. Clustering is a
/// non-differentiable selection taken from this forward pass; re-evaluating
/// the graph with other parameters keeps the clusters fixed.
inline LossGraph build_loss(const PointScene& scene, const Model& model, const LossConfig& cfg) {
    LossGraph lg;
    ForwardOptions fwd = cfg.forward;
    if (cfg.warmup) fwd.min_cluster = static_cast<std::size_t>(-1);  // no decoding needed
    lg.pass = run_forward(scene, model, fwd);
    Graph& g = lg.pass.graph;

    lg.seg = semantic_loss(g, lg.pass.nodes.semantic_logits, scene.gt_semantic);
    std::vector<bool> valid(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) valid[i] = scene.gt_instance[i] >= 0;
    lg.ctr = centroid_loss(g, lg.pass.nodes.offsets, scene.coords, scene.gt_centroids, valid, cfg.centroid_norm);

    lg.targets = assign_targets(lg.pass.clusters, scene.gt_instance);
    std::vector<MaskTerm> terms;
    if (!cfg.warmup)
        for (const auto& d : lg.pass.decodes) {
            const int target = lg.targets[d.cluster];
            if (target < 0) continue;
            MaskTerm t{d.logits, Tensor(Shape{d.rows.size()}), Tensor(Shape{d.rows.size()}, 1.0)};
            for (std::size_t k = 0; k < d.rows.size(); ++k)
                t.target[k] = scene.gt_instance[static_cast<std::size_t>(d.rows[k])] == target ? 1.0 : 0.0;
            terms.push_back(std::move(t));
        }
    lg.mask = mask_loss(g, terms);
    lg.dice = dice_loss(g, terms);
    lg.total = g.add(g.add(lg.seg, lg.ctr), g.add(lg.mask, lg.dice));
    evaluate(g, model.params, lg.pass.eval);
    return lg;
}

inline LossBreakdown total_loss(const PointScene& scene, const Model& model, const LossConfig& cfg) {
    return build_loss(scene, model, cfg).breakdown();
}

struct TrainConfig {
    double lr = 1e-3;
    std::size_t steps = 3000;
    std::size_t warmup_steps = 600;
    std::uint64_t seed = 7;
    std::size_t batch = 1;
    std::size_t jobs = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    LossConfig loss;
};

struct LossRecord {
    std::size_t step = 0;
    LossBreakdown loss;
};

/// Adam over the parameters that receive gradients.
class Adam {
public:
    Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(Params& params, const Gradients& grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (const auto& [name, g] : grads) {
            Tensor& p = params.find(name)->second;
            auto& m = m_.try_emplace(name, g.shape()).first->second;
            auto& v = v_.try_emplace(name, g.shape()).first->second;
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
                v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
                p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            }
        }
    }

private:
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, Tensor, std::less<>> m_, v_;
};

namespace detail {

struct SceneGrad {
    LossBreakdown loss;
    Gradients grads;
};

inline SceneGrad scene_gradient(const PointScene& scene, const Model& model, const LossConfig& cfg) {
    LossGraph lg = build_loss(scene, model, cfg);
    return {lg.breakdown(), backward(lg.pass.graph, lg.pass.eval, lg.total)};
}

}  // namespace detail

using StepCallback = std::function<void(const LossRecord&)>;

/// Deterministic for a fixed seed regardless of `jobs`: per-scene gradients
/// are reduced in batch order.
inline std::vector<LossRecord> train(Model& model, const std::vector<PointScene>& scenes, const TrainConfig& cfg,
                                     const StepCallback& on_step = {}) {
    if (scenes.empty()) throw Error("train: no scenes");
    if (cfg.warmup_steps > cfg.steps) throw Error("train: warmup_steps exceeds steps");
    if (cfg.batch == 0) throw Error("train: batch must be positive");
    Adam opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    Rng rng(cfg.seed);
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    auto next_scene = [&] {
        if (cursor == order.size()) {
            order.resize(scenes.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        return order[cursor++];
    };

    std::vector<LossRecord> curve;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        LossConfig lc = cfg.loss;
        lc.warmup = step <= cfg.warmup_steps;
        lc.forward.seed = cfg.seed + step;
        std::vector<std::size_t> picks(cfg.batch);
        for (auto& s : picks) s = next_scene();

        std::vector<detail::SceneGrad> parts(picks.size());
        const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, picks.size()));
        if (jobs == 1) {
            for (std::size_t b = 0; b < picks.size(); ++b) parts[b] = detail::scene_gradient(scenes[picks[b]], model, lc);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t j = 0; j < jobs; ++j)
                pool.emplace_back([&, j] {
                    for (std::size_t b = j; b < picks.size(); b += jobs)
                        parts[b] = detail::scene_gradient(scenes[picks[b]], model, lc);
                });
            for (auto& t : pool) t.join();
        }

        LossRecord rec{step, {}};
        Gradients sum;
        const double inv = 1.0 / static_cast<double>(picks.size());
        for (auto& part : parts) {
            rec.loss.seg += part.loss.seg * inv;
            rec.loss.ctr += part.loss.ctr * inv;
            rec.loss.mask += part.loss.mask * inv;
            rec.loss.dice += part.loss.dice * inv;
            for (auto& [name, g] : part.grads) {
                auto [it, fresh] = sum.try_emplace(name, g.shape());
                for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i] * inv;
            }
        }
        rec.loss.total = rec.loss.seg + rec.loss.ctr + rec.loss.mask + rec.loss.dice;
        if (!std::isfinite(rec.loss.total)) throw Error("train: non-finite loss at step " + std::to_string(step));
        opt.step(model.params, sum);
        curve.push_back(rec);
        if (on_step) on_step(rec);
    }
    return curve;
}

}  // namespace dyco
