#pragma once

// Oracle-equivalence suites: each compares a library routine against its
// straight-line reference over many seeded random inputs.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dyco/checkpoint.hpp"
#include "dyco/fixtures.hpp"
#include "dyco/grad_suite.hpp"
#include "dyco/oracles.hpp"

namespace dyco {

struct CheckResult {
    std::string name;
    bool passed = true;
    std::size_t cases = 0;
    std::string detail;  // first failure
};

namespace selfcheck_detail {

class Recorder {
public:
    explicit Recorder(std::string name) { r_.name = std::move(name); }

    void expect(bool ok, const std::string& what) {
        ++r_.cases;
        if (!ok && r_.passed) {
            r_.passed = false;
            r_.detail = what;
        }
    }

    CheckResult result() const { return r_; }

private:
    CheckResult r_;
};

inline std::string seed_note(std::uint64_t seed) { return " (seed " + std::to_string(seed) + ")"; }

}  // namespace selfcheck_detail

inline CheckResult check_param_count() {
    selfcheck_detail::Recorder rec("param_count");
    rec.expect(param_count(FilterLayout{8, 8, 3}) == 177, "D'=8, H=8, L=3 does not give 177");
    for (std::size_t d : {2, 4, 8, 16, 32})
        for (std::size_t l = 2; l <= 5; ++l)
            for (std::size_t h : {d, std::size_t{8}, std::size_t{16}})
                rec.expect(param_count(FilterLayout{d, h, l}) == oracle::filter_param_sum(d, h, l),
                           "mismatch at D'=" + std::to_string(d) + " H=" + std::to_string(h) + " L=" + std::to_string(l));
    return rec.result();
}

inline CheckResult check_grid_index(std::size_t seeds, std::uint64_t base) {
    selfcheck_detail::Recorder rec("grid_index");
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto seed = scene_seed(base, s);
        Rng rng(seed);
        std::uniform_real_distribution<double> u(-2.0, 2.0), cell(0.05, 1.0), rad(0.01, 1.5);
        std::vector<Vec3> pts(std::uniform_int_distribution<std::size_t>(0, 500)(rng));
        for (auto& p : pts) p = {u(rng), u(rng), u(rng)};
        const GridIndex index(pts, cell(rng));
        for (int q = 0; q < 20; ++q) {
            const Vec3 query{u(rng), u(rng), u(rng)};
            const double r = rad(rng);
            auto got = index.radius_neighbors(query, r);
            std::sort(got.begin(), got.end());
            rec.expect(got == oracle::linear_scan(pts, query, r), "radius query differs from linear scan" +
                                                                      selfcheck_detail::seed_note(seed));
        }
    }
    return rec.result();
}

inline bool same_partition(const std::vector<Cluster>& a, const std::vector<Cluster>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].members != b[i].members || a[i].label != b[i].label) return false;
    return true;
}

inline CheckResult check_clustering(std::size_t seeds, std::uint64_t base, std::size_t max_points = 1000) {
    selfcheck_detail::Recorder rec("clustering");
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto seed = scene_seed(base, s);
        Rng rng(seed);
        const auto in = fixtures::random_cluster_input(rng, max_points, 4, 0.05, 0.5);
        ClusteringConfig cfg;
        cfg.radius = in.radius;
        const auto fast = canonicalize(cluster_homogeneous(in.coords, in.offsets, in.labels, cfg));
        const auto slow = cluster_bruteforce_oracle(in.coords, in.offsets, in.labels, cfg);
        rec.expect(same_partition(fast, slow), "partition differs from union-find oracle" + selfcheck_detail::seed_note(seed));
    }
    return rec.result();
}

inline CheckResult check_average_precision(std::size_t seeds, std::uint64_t base, double tol = 1e-10) {
    selfcheck_detail::Recorder rec("average_precision");
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto seed = scene_seed(base, s);
        Rng rng(seed);
        const auto set = fixtures::random_eval_set(rng);
        for (double t : {0.25, 0.5, 0.75})
            for (int c = 1; c <= 3; ++c) {
                const auto got = average_precision(set.preds, set.gts, t, c);
                const double want = oracle::average_precision_prefixes(set.preds, set.gts, t, c);
                const bool ok = got ? std::fabs(*got - want) <= tol : want < 0.0;
                rec.expect(ok, "class " + std::to_string(c) + " at IoU " + std::to_string(t) +
                                   " differs from prefix oracle" + selfcheck_detail::seed_note(seed));
            }
    }
    return rec.result();
}

inline CheckResult check_nms(std::size_t seeds, std::uint64_t base) {
    selfcheck_detail::Recorder rec("nms");
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto seed = scene_seed(base, s);
        Rng rng(seed);
        const auto preds = fixtures::random_instance_predictions(rng, 40, 12);
        const double t = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
        const auto kept = nms(preds, t);
        const auto ref = oracle::nms_survivors(preds, t);
        bool ok = kept.size() == ref.size();
        for (std::size_t i = 0; ok && i < kept.size(); ++i) ok = kept[i] == preds[ref[i]];
        rec.expect(ok, "kept set differs from reference" + selfcheck_detail::seed_note(seed));
    }
    return rec.result();
}

inline CheckResult check_decoder(std::size_t seeds, std::uint64_t base, double tol = 1e-12) {
    selfcheck_detail::Recorder rec("decoder");
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto seed = scene_seed(base, s);
        Rng rng(seed);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        const FilterLayout layout{std::uniform_int_distribution<std::size_t>(1, 16)(rng),
                                  std::uniform_int_distribution<std::size_t>(1, 16)(rng),
                                  std::uniform_int_distribution<std::size_t>(1, 5)(rng)};
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 60)(rng);
        Tensor f(Shape{n, layout.mask_dim});
        for (double& v : f.values()) v = u(rng);
        std::vector<Vec3> pos(n);
        for (auto& p : pos) p = {u(rng), u(rng), u(rng)};
        FilterVector fv{std::vector<double>(param_count(layout)), layout};
        for (double& v : fv.flat) v = u(rng);
        std::vector<bool> cat(n);
        for (std::size_t i = 0; i < n; ++i) cat[i] = u(rng) > -0.3;
        const auto got = decode_instance(f, pos, fv, cat);
        const auto want = oracle::decode_logits(f, pos, fv.flat, layout.mask_dim, layout.hidden, layout.layers, cat);
        double worst = 0.0;
        bool confined = true;
        for (std::size_t i = 0; i < n; ++i) {
            worst = std::max(worst, std::fabs(got.logits[i] - want[i]));
            if (!cat[i] && (got.mask[i] || got.probabilities[i] != 0.0)) confined = false;
        }
        rec.expect(worst <= tol, "decoder differs from loop oracle by " + std::to_string(worst) +
                                     selfcheck_detail::seed_note(seed));
        rec.expect(confined, "mask support escapes the category mask" + selfcheck_detail::seed_note(seed));
        rec.expect(unpack_filters(fv).size() == layout.layers &&
                       pack_filters(unpack_filters(fv), layout).flat == fv.flat,
                   "filter pack/unpack round trip" + selfcheck_detail::seed_note(seed));
    }
    return rec.result();
}

inline CheckResult check_voxelization(std::size_t seeds, std::uint64_t base) {
    selfcheck_detail::Recorder rec("voxelization");
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto seed = scene_seed(base, s);
        Rng rng(seed);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 200)(rng);
        const std::size_t g = std::uniform_int_distribution<std::size_t>(1, 14)(rng);
        std::vector<Vec3> coords(n);
        for (auto& p : coords) p = {u(rng), u(rng), 0.3 * u(rng)};
        Tensor fb(Shape{n, 4});
        for (double& v : fb.values()) v = u(rng);
        Cluster cl;
        for (std::size_t i = 0; i < n; ++i)
            if (u(rng) > -0.5 || cl.members.empty()) cl.members.push_back(static_cast<std::uint32_t>(i));
        const auto grid = voxelize_cluster(cl, coords, fb, g);
        const auto want = oracle::voxel_means(coords, cl.members, fb, g);
        double worst = 0.0;
        for (std::size_t v = 0; v < want.size(); ++v)
            for (std::size_t j = 0; j < 4; ++j) worst = std::max(worst, std::fabs(grid.features[v * 4 + j] - want[v][j]));
        rec.expect(worst <= 1e-12, "voxel means differ from bucketing oracle" + selfcheck_detail::seed_note(seed));
    }
    return rec.result();
}

inline CheckResult check_losses(std::size_t seeds, std::uint64_t base, double tol = 1e-10) {
    selfcheck_detail::Recorder rec("losses");
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto seed = scene_seed(base, s);
        Rng rng(seed);
        std::uniform_real_distribution<double> u(-3.0, 3.0);
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 30)(rng);
        const std::size_t c = std::uniform_int_distribution<std::size_t>(2, 6)(rng);

        Graph g;
        std::vector<double> logits(n * c);
        for (double& v : logits) v = u(rng);
        std::vector<int> labels(n);
        for (auto& l : labels) l = std::uniform_int_distribution<int>(0, static_cast<int>(c) - 1)(rng);
        const Node ce = semantic_loss(g, g.constant(Tensor(Shape{n, c}, logits)), labels);

        std::vector<Vec3> coords(n), offsets(n), centroids(n);
        Tensor off(Shape{n, 3});
        std::vector<bool> valid(n);
        for (std::size_t i = 0; i < n; ++i) {
            coords[i] = {u(rng), u(rng), u(rng)};
            offsets[i] = {u(rng), u(rng), u(rng)};
            centroids[i] = {u(rng), u(rng), u(rng)};
            for (int k = 0; k < 3; ++k) off.at(i, static_cast<std::size_t>(k)) = offsets[i][k];
            valid[i] = u(rng) > -1.0;
        }
        const Node ctr = centroid_loss(g, g.constant(off), coords, centroids, valid);

        std::vector<MaskTerm> terms;
        std::vector<oracle::MaskCase> cases;
        const std::size_t z = std::uniform_int_distribution<std::size_t>(0, 4)(rng);
        for (std::size_t k = 0; k < z; ++k) {
            const std::size_t m = std::uniform_int_distribution<std::size_t>(1, 20)(rng);
            oracle::MaskCase mc;
            for (std::size_t j = 0; j < m; ++j) {
                mc.logits.push_back(u(rng));
                mc.target.push_back(u(rng) > 0.0 ? 1.0 : 0.0);
                mc.indicator.push_back(u(rng) > -2.0 ? 1.0 : 0.0);
            }
            terms.push_back({g.constant(Tensor::vector(mc.logits)), Tensor::vector(mc.target), Tensor::vector(mc.indicator)});
            cases.push_back(std::move(mc));
        }
        const Node ml = mask_loss(g, terms);
        const Node dl = dice_loss(g, terms);
        const Evaluation ev = evaluate(g, {});
        const std::string note = selfcheck_detail::seed_note(seed);
        rec.expect(std::fabs(ev.value(ce).item() - oracle::cross_entropy(logits, c, labels)) <= tol, "cross-entropy" + note);
        rec.expect(std::fabs(ev.value(ctr).item() - oracle::centroid_distance(coords, offsets, centroids, valid)) <= tol,
                   "centroid loss" + note);
        rec.expect(std::fabs(ev.value(ml).item() - oracle::mask_bce(cases)) <= tol, "mask loss" + note);
        rec.expect(std::fabs(ev.value(dl).item() - oracle::dice(cases)) <= tol, "dice loss" + note);
    }
    return rec.result();
}

inline CheckResult check_assign_targets(std::size_t seeds, std::uint64_t base) {
    selfcheck_detail::Recorder rec("assign_targets");
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto seed = scene_seed(base, s);
        Rng rng(seed);
        const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 100)(rng);
        std::vector<int> gt(n);
        for (auto& v : gt) v = std::uniform_int_distribution<int>(-1, 4)(rng);
        std::vector<Cluster> clusters(std::uniform_int_distribution<std::size_t>(1, 6)(rng));
        for (std::size_t i = 0; i < n; ++i)
            clusters[std::uniform_int_distribution<std::size_t>(0, clusters.size() - 1)(rng)].members.push_back(
                static_cast<std::uint32_t>(i));
        std::erase_if(clusters, [](const Cluster& c) { return c.members.empty(); });
        rec.expect(assign_targets(clusters, gt) == oracle::plurality_targets(clusters, gt),
                   "plurality targets differ from histogram oracle" + selfcheck_detail::seed_note(seed));
    }
    return rec.result();
}

inline CheckResult check_serialization(std::size_t seeds, std::uint64_t base) {
    selfcheck_detail::Recorder rec("serialization");
    for (std::size_t s = 0; s < seeds; ++s) {
        const auto seed = scene_seed(base, s);
        SceneConfig sc;
        sc.seed = seed;
        sc.min_points = 5;
        sc.max_points = 30;
        sc.stuff_density = 3.0;
        const PointScene scene = generate_scene(sc);
        const auto bytes = encode_scene(scene);
        const auto again = encode_scene(decode_scene(bytes));
        rec.expect(bytes == again && decode_scene(bytes) == scene, "scene round trip" + selfcheck_detail::seed_note(seed));

        const Model model = init_model(grad_detail::tiny_model_config(), seed);
        const auto ck = encode_checkpoint(model.params);
        rec.expect(encode_checkpoint(decode_checkpoint(ck)) == ck, "checkpoint round trip" + selfcheck_detail::seed_note(seed));

        Rng rng(seed);
        PredictionFile file;
        file.meta = {{"seed", seed}};
        for (std::uint32_t k = 0; k < 3; ++k) {
            auto preds = fixtures::random_instance_predictions(rng, 25 + k, k * 2);
            for (auto& p : preds) p.score = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
            file.scenes.push_back({k, 25 + k, preds});
        }
        const std::string text = encode_predictions(file);
        const auto back = decode_predictions(text);
        rec.expect(encode_predictions(back) == text && back.scenes == file.scenes,
                   "prediction round trip" + selfcheck_detail::seed_note(seed));
    }
    return rec.result();
}

inline std::vector<CheckResult> run_selfcheck(std::size_t seeds, std::uint64_t base) {
    return {check_param_count(),
            check_grid_index(seeds, base),
            check_clustering(seeds, base + 1),
            check_average_precision(seeds, base + 2),
            check_nms(seeds, base + 3),
            check_decoder(seeds, base + 4),
            check_voxelization(seeds, base + 5),
            check_losses(seeds, base + 6),
            check_assign_targets(seeds, base + 7),
            check_serialization(std::max<std::size_t>(1, seeds / 10), base + 8)};
}

}  // namespace dyco
