#include <cmath>

#include <gtest/gtest.h>

#include "dyco/grad_suite.hpp"
#include "dyco/oracles.hpp"
#include "dyco/selfcheck.hpp"

using namespace dyco;

namespace {

double value(Graph& g, Node n, const Bindings& b = {}) { return evaluate(g, b).value(n).item(); }

Tensor column(const std::vector<Vec3>& v) {
    Tensor t(Shape{v.size(), 3});
    for (std::size_t i = 0; i < v.size(); ++i)
        for (std::size_t k = 0; k < 3; ++k) t.at(i, k) = v[i][k];
    return t;
}

Cluster cluster_of(std::vector<std::uint32_t> members) {
    Cluster c;
    c.members = std::move(members);
    return c;
}

}  // namespace

TEST(SemanticLoss, UniformLogitsGiveLogC) {
    Graph g;
    const Node l = semantic_loss(g, g.constant(Tensor(Shape{5, 4})), {0, 1, 2, 3, 1});
    EXPECT_NEAR(value(g, l), std::log(4.0), 1e-15);
    EXPECT_NEAR(value(g, l), 1.3863, 1e-4);
}

TEST(SemanticLoss, ConfidentCorrectIsNearZero) {
    Tensor logits(Shape{3, 3}, -50.0);
    for (std::size_t i = 0; i < 3; ++i) logits.at(i, i) = 50.0;
    Graph g;
    const Node l = semantic_loss(g, g.constant(logits), {0, 1, 2});
    EXPECT_LT(value(g, l), 1e-40);
    EXPECT_GE(value(g, l), 0.0);
}

TEST(SemanticLoss, LabelOutOfRange) {
    Graph g;
    EXPECT_THROW(semantic_loss(g, g.constant(Tensor(Shape{2, 3})), {0, 3}), Error);
    EXPECT_THROW(semantic_loss(g, g.constant(Tensor(Shape{2, 3})), {-1, 0}), Error);
    EXPECT_THROW(semantic_loss(g, g.constant(Tensor(Shape{2, 3})), {0}), Error);
}

TEST(CentroidLoss, Examples) {
    Graph g;
    const std::vector<Vec3> coords{{1, 1, 1}, {0, 0, 0}};
    const std::vector<Vec3> ctr{{4, 5, 1}, {9, 9, 9}};
    const Node off = g.constant(Tensor(Shape{2, 3}));
    const Node single = centroid_loss(g, off, coords, ctr, {true, false});
    const Node exact = centroid_loss(g, g.constant(column({{3, 4, 0}, {9, 9, 9}})), coords, ctr, {true, true});
    const Node none = centroid_loss(g, off, coords, ctr, {false, false});
    const auto ev = evaluate(g, {});
    EXPECT_DOUBLE_EQ(ev.value(single).item(), 5.0);
    EXPECT_EQ(ev.value(exact).item(), 0.0);
    EXPECT_EQ(ev.value(none).item(), 0.0);
}

TEST(CentroidLoss, L1Variant) {
    Graph g;
    const Node l = centroid_loss(g, g.constant(Tensor(Shape{1, 3})), {{1, 1, 1}}, {{4, 5, 1}}, {true}, CentroidNorm::L1);
    EXPECT_DOUBLE_EQ(value(g, l), 7.0);
}

TEST(CentroidLoss, LengthMismatch) {
    Graph g;
    EXPECT_THROW(centroid_loss(g, g.constant(Tensor(Shape{2, 3})), {{0, 0, 0}}, {{0, 0, 0}}, {true}), Error);
}

TEST(AssignTargets, Examples) {
    const std::vector<int> gt{0, 0, 0, 1, 1, -1, -1, -1, 1, 1};
    // Subset of one instance; 60/40 split; background plurality; tie toward the smaller id.
    const std::vector<Cluster> clusters{cluster_of({0, 1}), cluster_of({3, 4, 8, 0, 1}), cluster_of({5, 6, 0}),
                                        cluster_of({2, 9}), cluster_of({7, 3})};
    EXPECT_EQ(assign_targets(clusters, gt), (std::vector<int>{0, 1, -1, 0, -1}));
}

TEST(AssignTargets, MatchesHistogramOracle) {
    const auto r = check_assign_targets(300, 5);
    EXPECT_TRUE(r.passed) << r.detail;
}

TEST(MaskLoss, ZeroLogitsGiveLog2) {
    Graph g;
    std::vector<MaskTerm> terms;
    terms.push_back({g.constant(Tensor(Shape{4})), Tensor::vector({1, 0, 1, 1}), Tensor::vector({1, 1, 1, 0})});
    terms.push_back({g.constant(Tensor(Shape{2})), Tensor::vector({0, 1}), Tensor::vector({1, 1})});
    EXPECT_NEAR(value(g, mask_loss(g, terms)), std::log(2.0), 1e-15);
}

TEST(MaskLoss, PerfectPredictionsVanish) {
    Graph g;
    std::vector<MaskTerm> terms;
    terms.push_back({g.constant(Tensor::vector({40, -40, 40})), Tensor::vector({1, 0, 1}), Tensor::vector({1, 1, 1})});
    EXPECT_LT(value(g, mask_loss(g, terms)), 1e-15);
    EXPECT_LT(value(g, dice_loss(g, terms)), 1e-6);
}

TEST(MaskLoss, ClusterWithoutCategoryPointsAddsZero) {
    Graph g;
    std::vector<MaskTerm> terms;
    terms.push_back({g.constant(Tensor(Shape{2})), Tensor::vector({1, 0}), Tensor::vector({1, 1})});
    terms.push_back({g.constant(Tensor::vector({3, 3})), Tensor::vector({1, 0}), Tensor::vector({0, 0})});
    EXPECT_NEAR(value(g, mask_loss(g, terms)), std::log(2.0) / 2.0, 1e-15);
    Graph e;
    EXPECT_EQ(value(e, mask_loss(e, {})), 0.0);
    EXPECT_EQ(value(e, dice_loss(e, {})), 0.0);
}

TEST(DiceLoss, EqualAndDisjoint) {
    Graph g;
    std::vector<MaskTerm> equal, disjoint;
    equal.push_back({g.constant(Tensor::vector({60, -60, 60})), Tensor::vector({1, 0, 1}), Tensor::vector({1, 1, 1})});
    disjoint.push_back({g.constant(Tensor::vector({-60, 60, -60})), Tensor::vector({1, 0, 1}), Tensor::vector({1, 1, 1})});
    EXPECT_NEAR(value(g, dice_loss(g, equal)), 0.0, 1e-6);
    EXPECT_NEAR(value(g, dice_loss(g, disjoint)), 1.0, 1e-12);
}

TEST(Losses, MatchScalarLoopOracles) {
    const auto r = check_losses(300, 9);
    EXPECT_TRUE(r.passed) << r.detail;
}

TEST(MaskLoss, OffCategoryLogitsDoNotMatter) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Rng rng(seed);
        const std::size_t n = grad_detail::pick(2, 20, rng);
        Tensor target(Shape{n}), ind(Shape{n});
        for (std::size_t i = 0; i < n; ++i) {
            target[i] = static_cast<double>(grad_detail::pick(0, 1, rng));
            ind[i] = i == 0 ? 1.0 : static_cast<double>(grad_detail::pick(0, 1, rng));
        }
        Graph g;
        const Node m = g.input("m", Shape{n});
        const Node ml = mask_loss(g, {{m, target, ind}});
        const Node dl = dice_loss(g, {{m, target, ind}});
        const Node both = g.add(ml, dl);
        Tensor a = grad_detail::uniform(Shape{n}, -3, 3, rng);
        Tensor b = a;
        for (std::size_t i = 0; i < n; ++i)
            if (ind[i] == 0.0) b[i] += 10.0 * (grad_detail::uniform(Shape{1}, -1, 1, rng)[0]);
        const auto ea = evaluate(g, {{"m", a}});
        const auto eb = evaluate(g, {{"m", b}});
        EXPECT_EQ(ea.value(ml).item(), eb.value(ml).item());
        EXPECT_EQ(ea.value(dl).item(), eb.value(dl).item());
        const auto ga = backward(g, ea, both).at("m");
        const auto gb = backward(g, eb, both).at("m");
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_EQ(ga[i], gb[i]);
            if (ind[i] == 0.0) {
                EXPECT_EQ(ga[i], 0.0);
            }
        }
    }
}

TEST(Losses, PerfectPredictionsOnASceneVanish) {
    auto sc = grad_detail::tiny_scene_config(3);
    const PointScene scene = generate_scene(sc);
    const std::size_t n = scene.size(), c = static_cast<std::size_t>(scene.num_classes);
    Tensor logits(Shape{n, c}, -40.0);
    Tensor off(Shape{n, 3});
    std::vector<bool> valid(n);
    for (std::size_t i = 0; i < n; ++i) {
        logits.at(i, static_cast<std::size_t>(scene.gt_semantic[i])) = 40.0;
        valid[i] = scene.gt_instance[i] >= 0;
        for (std::size_t k = 0; k < 3; ++k) off.at(i, k) = scene.gt_centroids[i][k] - scene.coords[i][k];
    }
    Graph g;
    std::vector<MaskTerm> terms;
    for (int id : instance_ids(scene)) {
        Tensor q(Shape{n}), m(Shape{n}), ind(Shape{n});
        for (std::size_t i = 0; i < n; ++i) {
            const bool same_class = scene.gt_semantic[i] == scene.gt_semantic[static_cast<std::size_t>(
                std::find(scene.gt_instance.begin(), scene.gt_instance.end(), id) - scene.gt_instance.begin())];
            ind[i] = same_class ? 1.0 : 0.0;
            q[i] = scene.gt_instance[i] == id ? 1.0 : 0.0;
            m[i] = q[i] > 0 ? 40.0 : -40.0;
        }
        terms.push_back({g.constant(m), q, ind});
    }
    ASSERT_FALSE(terms.empty());
    const Node total = g.add(g.add(semantic_loss(g, g.constant(logits), scene.gt_semantic),
                                   centroid_loss(g, g.constant(off), scene.coords, scene.gt_centroids, valid)),
                             g.add(mask_loss(g, terms), dice_loss(g, terms)));
    EXPECT_LT(value(g, total), 1e-6);
}

namespace {

Model tiny_model(std::uint64_t seed) {
    auto cfg = grad_detail::tiny_model_config();
    return init_model(cfg, seed);
}

std::vector<PointScene> tiny_scenes(std::size_t n) {
    std::vector<PointScene> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(grad_detail::tiny_scene_config(100 + i)));
    return out;
}

}  // namespace

TEST(TotalLoss, WarmupZeroesMaskTerms) {
    const auto scenes = tiny_scenes(3);
    const Model m = tiny_model(1);
    LossConfig cfg;
    cfg.forward.min_cluster = 1;
    cfg.warmup = true;
    for (const auto& s : scenes) {
        const auto b = total_loss(s, m, cfg);
        EXPECT_EQ(b.mask, 0.0);
        EXPECT_EQ(b.dice, 0.0);
        EXPECT_EQ(b.total, b.seg + b.ctr);
    }
}

TEST(TotalLoss, AdditiveNonNegativeFinite) {
    const auto scenes = tiny_scenes(6);
    std::size_t with_masks = 0;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        Model m = tiny_model(seed);
        Rng rng(seed);
        grad_detail::jitter(m.params, rng);
        LossConfig cfg;
        cfg.forward.min_cluster = 1;
        cfg.forward.clustering.radius = 0.3;
        for (const auto& s : scenes) {
            const auto b = total_loss(s, m, cfg);
            with_masks += b.mask > 0.0;
            EXPECT_EQ(b.total, (b.seg + b.ctr) + (b.mask + b.dice));
            for (double v : {b.seg, b.ctr, b.mask, b.dice, b.total}) {
                EXPECT_TRUE(std::isfinite(v));
                EXPECT_GE(v, 0.0);
            }
        }
    }
    EXPECT_GT(with_masks, 0u);
}

TEST(TotalLoss, GradientCheck) {
    const auto r = run_gradient_suite(20, 41, "total_loss");
    ASSERT_EQ(r.size(), 1u);
    EXPECT_LE(r[0].worst.max_rel_error, 1e-4) << "at " << r[0].worst.leaf << "[" << r[0].worst.index << "]";
}

TEST(Train, ZeroLearningRateLeavesParamsAndCurveFlat) {
    const auto scenes = tiny_scenes(1);
    Model m = tiny_model(2);
    const Params before = m.params;
    TrainConfig tc;
    tc.lr = 0.0;
    tc.steps = 5;
    tc.warmup_steps = 0;
    tc.loss.forward.min_cluster = 1;
    const auto curve = train(m, scenes, tc);
    ASSERT_EQ(curve.size(), 5u);
    for (const auto& r : curve) EXPECT_EQ(r.loss.total, curve[0].loss.total);
    EXPECT_EQ(m.params, before);
}

TEST(Train, SameSeedIsBitIdentical) {
    const auto scenes = tiny_scenes(3);
    TrainConfig tc;
    tc.steps = 12;
    tc.warmup_steps = 4;
    tc.batch = 2;
    tc.loss.forward.min_cluster = 1;
    Model a = tiny_model(3), b = tiny_model(3);
    const auto ca = train(a, scenes, tc);
    tc.jobs = 2;
    const auto cb = train(b, scenes, tc);
    for (std::size_t i = 0; i < ca.size(); ++i) {
        EXPECT_EQ(ca[i].loss.total, cb[i].loss.total) << "step " << ca[i].step;
        EXPECT_EQ(ca[i].loss.mask, cb[i].loss.mask);
    }
    EXPECT_EQ(a.params, b.params);
}

TEST(Train, Errors) {
    const auto scenes = tiny_scenes(1);
    Model m = tiny_model(4);
    TrainConfig tc;
    tc.steps = 3;
    tc.warmup_steps = 4;
    EXPECT_THROW(train(m, scenes, tc), Error);
    tc.warmup_steps = 0;
    EXPECT_THROW(train(m, {}, tc), Error);
    m.params.at("head.seg2.b")[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train(m, scenes, tc);
        FAIL() << "expected divergence";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
    }
}

TEST(Train, TwoScenesHalveTheLossIn200Steps) {
    const auto scenes = generate_dataset(SceneConfig{}, 7, 0, 2);
    Model m = init_model(ModelConfig{}, 7);
    TrainConfig tc;
    tc.steps = 200;
    tc.warmup_steps = 40;
    tc.seed = 7;
    const auto curve = train(m, scenes, tc);
    ASSERT_EQ(curve.size(), 200u);
    EXPECT_LT(curve[199].loss.total, 0.5 * curve[0].loss.total);
    // Regression fixture.
    EXPECT_NEAR(curve[0].loss.total, 3.1723212046338825, 1e-9);
    EXPECT_NEAR(curve[99].loss.total, 0.82813215763076664, 1e-7);
    EXPECT_NEAR(curve[199].loss.total, 0.30289633427895329, 1e-7);
}
