#include <numeric>

#include <gtest/gtest.h>

#include "dyco/grad_suite.hpp"
#include "dyco/pipeline.hpp"
#include "dyco/selfcheck.hpp"
#include "support.hpp"

using namespace dyco;

namespace {

std::vector<bool> mask_of(std::size_t n, std::initializer_list<std::size_t> on) {
    std::vector<bool> m(n, false);
    for (auto i : on) m[i] = true;
    return m;
}

InstancePrediction pred(std::vector<bool> mask, double score, std::size_t cluster, int category = 1) {
    InstancePrediction p;
    p.mask = std::move(mask);
    p.score = score;
    p.source_cluster = cluster;
    p.category = category;
    return p;
}

InferenceConfig oracle_config(double radius) {
    InferenceConfig c;
    c.clustering.radius = radius;
    c.min_cluster = 10;
    c.decoder = DecoderMode::Membership;
    return c;
}

PredictionOverride as_override(const OraclePredictions& o) { return {o.semantic_logits, o.offsets}; }

}  // namespace

TEST(MaskIou, Examples) {
    const auto a = mask_of(20, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    const auto b = mask_of(20, {5, 6, 7, 8, 9, 10, 11, 12, 13, 14});
    EXPECT_EQ(mask_iou(a, a), 1.0);
    EXPECT_EQ(mask_iou(a, mask_of(20, {15, 16})), 0.0);
    EXPECT_DOUBLE_EQ(mask_iou(a, b), 1.0 / 3.0);
    EXPECT_EQ(mask_iou(mask_of(4, {}), mask_of(4, {})), 0.0);
    EXPECT_THROW(mask_iou(a, mask_of(19, {})), Error);
}

TEST(ScoreInstance, Examples) {
    Tensor probs(Shape{4, 4}, 0.25);
    EXPECT_DOUBLE_EQ(score_instance(mask_of(4, {0, 2}), probs, 3), 0.25);
    Tensor sure(Shape{3, 2});
    for (std::size_t i = 0; i < 3; ++i) sure.at(i, 1) = 1.0;
    EXPECT_EQ(score_instance(mask_of(3, {0, 1, 2}), sure, 1), 1.0);
    EXPECT_THROW(score_instance(mask_of(4, {}), probs, 0), Error);
    EXPECT_THROW(score_instance(mask_of(4, {1}), probs, 4), Error);
}

TEST(ScoreInstance, MatchesLoop) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Rng rng(seed);
        const std::size_t n = grad_detail::pick(1, 40, rng), c = grad_detail::pick(2, 5, rng);
        const Tensor probs = softmax_rows(grad_detail::uniform(Shape{n, c}, -3, 3, rng));
        std::vector<bool> m(n);
        for (std::size_t i = 0; i < n; ++i) m[i] = i == 0 || grad_detail::pick(0, 1, rng) == 1;
        const int cat = static_cast<int>(grad_detail::pick(0, c - 1, rng));
        double sum = 0.0, count = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (m[i]) {
                sum += probs.at(i, static_cast<std::size_t>(cat));
                count += 1.0;
            }
        EXPECT_NEAR(score_instance(m, probs, cat), sum / count, 1e-15);
    }
}

TEST(Nms, IdenticalMasksKeepHigherScore) {
    const auto m = mask_of(6, {1, 2, 3});
    const auto kept = nms({pred(m, 0.8, 0), pred(m, 0.9, 1)}, 0.3);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_EQ(kept[0].score, 0.9);
}

TEST(Nms, TiesGoToSmallerCluster) {
    const auto m = mask_of(6, {1, 2, 3});
    const auto kept = nms({pred(m, 0.5, 4), pred(m, 0.5, 2)}, 0.3);
    ASSERT_EQ(kept.size(), 1u);
    EXPECT_EQ(kept[0].source_cluster, 2u);
}

TEST(Nms, DisjointAllKeptAcrossClasses) {
    const auto kept = nms({pred(mask_of(6, {0, 1}), 0.2, 0, 1), pred(mask_of(6, {2, 3}), 0.9, 1, 2),
                           pred(mask_of(6, {4}), 0.5, 2, 1)},
                          0.3);
    EXPECT_EQ(kept.size(), 3u);
    // Class-agnostic: same masks with different classes still suppress.
    EXPECT_EQ(nms({pred(mask_of(6, {0, 1}), 0.2, 0, 1), pred(mask_of(6, {0, 1}), 0.9, 1, 2)}, 0.3).size(), 1u);
}

TEST(Nms, ThresholdRange) {
    EXPECT_THROW(nms({}, 0.0), Error);
    EXPECT_THROW(nms({}, 1.5), Error);
    EXPECT_NO_THROW(nms({}, 1.0));
}

TEST(Nms, MatchesQuadraticOracle) {
    const auto r = check_nms(300, 13);
    EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Nms, AntichainAndSuppressionWitness) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const double t = 0.1 * static_cast<double>(grad_detail::pick(1, 10, rng));
        const auto preds = fixtures::random_instance_predictions(rng, 30, grad_detail::pick(1, 12, rng));
        const auto kept = nms(preds, t);
        for (std::size_t a = 0; a < kept.size(); ++a)
            for (std::size_t b = a + 1; b < kept.size(); ++b) EXPECT_LT(mask_iou(kept[a].mask, kept[b].mask), t);
        for (const auto& p : preds) {
            if (std::find(kept.begin(), kept.end(), p) != kept.end()) continue;
            bool witness = false;
            for (const auto& k : kept)
                witness = witness || (mask_iou(p.mask, k.mask) >= t &&
                                      (k.score > p.score || (k.score == p.score && k.source_cluster < p.source_cluster)));
            EXPECT_TRUE(witness) << "seed " << seed;
        }
    }
}

TEST(Inference, NoThingPointsGiveNoPredictions) {
    auto cfg = grad_detail::tiny_scene_config(4);
    PointScene scene = generate_scene(cfg);
    auto o = oracle_predictions(scene);
    // Every point predicted as stuff.
    const auto c = static_cast<std::size_t>(scene.num_classes);
    for (std::size_t i = 0; i < scene.size(); ++i)
        for (std::size_t k = 0; k < c; ++k) o.semantic_logits[i * c + k] = k == 0 ? 10.0 : 0.0;
    EXPECT_TRUE(infer_from_predictions(scene, as_override(o), oracle_config(0.2)).predictions.empty());
    const Model m = init_model(grad_detail::tiny_model_config(), 1);
    InferenceConfig learned;
    learned.min_cluster = 1;
    EXPECT_TRUE(run_inference(scene, m, learned, as_override(o)).empty());
}

TEST(Inference, OracleInputsRecoverGroundTruth) {
    const auto scenes = generate_dataset(SceneConfig{}, 3, 0, 10);
    for (std::size_t s = 0; s < scenes.size(); ++s) {
        const auto& scene = scenes[s];
        const auto out = infer_from_predictions(scene, as_override(oracle_predictions(scene)), oracle_config(0.5));
        const auto gt = fixtures::perfect_predictions(scene);
        ASSERT_EQ(out.predictions.size(), gt.size()) << "scene " << s;
        for (const auto& g : gt) {
            const auto it = std::find_if(out.predictions.begin(), out.predictions.end(),
                                         [&](const InstancePrediction& p) { return p.mask == g.mask; });
            ASSERT_NE(it, out.predictions.end()) << "scene " << s;
            EXPECT_EQ(it->category, g.category);
            EXPECT_GE(it->score, 0.99);
        }
    }
}

TEST(Inference, MembershipDecoderThroughModelMatchesParameterFreePath) {
    const auto scene = generate_dataset(SceneConfig{}, 5, 0, 1)[0];
    const auto o = as_override(oracle_predictions(scene));
    ModelConfig mc;
    mc.backbone.num_classes = static_cast<std::size_t>(scene.num_classes);
    const Model m = init_model(mc.sync(), 2);
    EXPECT_EQ(run_inference(scene, m, oracle_config(0.5), o),
              infer_from_predictions(scene, o, oracle_config(0.5)).predictions);
}

TEST(Inference, PointOrderDoesNotChangePredictions) {
    const auto scene = generate_dataset(SceneConfig{}, 8, 0, 1)[0];
    const auto o = oracle_predictions(scene, 0.05, 3);
    std::vector<std::size_t> perm(scene.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(8);
    std::shuffle(perm.begin(), perm.end(), rng);
    PointScene shuffled = scene;
    OraclePredictions so = o;
    const auto c = static_cast<std::size_t>(scene.num_classes);
    for (std::size_t r = 0; r < perm.size(); ++r) {
        const std::size_t i = perm[r];
        shuffled.coords[r] = scene.coords[i];
        shuffled.gt_semantic[r] = scene.gt_semantic[i];
        shuffled.gt_instance[r] = scene.gt_instance[i];
        shuffled.gt_centroids[r] = scene.gt_centroids[i];
        for (std::size_t j = 0; j < scene.feature_dim; ++j)
            shuffled.features[r * scene.feature_dim + j] = scene.features[i * scene.feature_dim + j];
        for (std::size_t k = 0; k < c; ++k) so.semantic_logits[r * c + k] = o.semantic_logits[i * c + k];
        so.offsets[r] = o.offsets[i];
    }
    for (auto mode : {DecoderMode::Membership, DecoderMode::Learned}) {
        auto cfg = oracle_config(0.3);
        cfg.decoder = mode;
        cfg.mask_threshold = 0.3;  // the untrained decoder sits just below 0.5
        ModelConfig mc = grad_detail::tiny_model_config();
        mc.backbone.num_classes = c;
        const Model model = init_model(mc.sync(), 4);
        const auto a = run_inference(scene, model, cfg, as_override(o));
        const auto b = run_inference(shuffled, model, cfg, as_override(so));
        ASSERT_EQ(a.size(), b.size());
        ASSERT_FALSE(a.empty());
        for (const auto& pb : b) {
            std::vector<bool> back(scene.size());
            for (std::size_t r = 0; r < perm.size(); ++r) back[perm[r]] = pb.mask[r];
            const auto it = std::find_if(a.begin(), a.end(), [&](const auto& pa) { return pa.mask == back; });
            ASSERT_NE(it, a.end());
            EXPECT_EQ(it->category, pb.category);
            EXPECT_NEAR(it->score, pb.score, 1e-12);
        }
    }
}

TEST(Inference, ScoresInUnitInterval) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto scene = generate_scene(grad_detail::tiny_scene_config(seed));
        Model m = init_model(grad_detail::tiny_model_config(), seed);
        Rng rng(seed);
        grad_detail::jitter(m.params, rng);
        InferenceConfig cfg;
        cfg.min_cluster = 1;
        cfg.clustering.radius = 0.3;
        for (const auto& p : run_inference(scene, m, cfg)) {
            EXPECT_GE(p.score, 0.0);
            EXPECT_LE(p.score, 1.0);
            EXPECT_GT(p.support(), 0u);
        }
    }
}

TEST(Inference, TrainedModelRegression) {
    std::vector<PointScene> scenes;
    for (int i = 0; i < 4; ++i) scenes.push_back(generate_scene(grad_detail::tiny_scene_config(100 + i)));
    Model m = init_model(grad_detail::tiny_model_config(), 5);
    TrainConfig tc;
    tc.steps = 400;
    tc.warmup_steps = 80;
    tc.lr = 3e-3;
    tc.loss.forward.min_cluster = 3;
    tc.loss.forward.clustering.radius = 0.2;
    train(m, scenes, tc);
    InferenceConfig ic;
    ic.min_cluster = 3;
    ic.clustering.radius = 0.2;

    struct Pinned {
        int category;
        double score;
        std::vector<std::pair<std::uint32_t, std::uint32_t>> rle;
    };
    const std::vector<std::vector<Pinned>> want{
        {{1, 0.99655209449171844, {{9, 15}}}, {2, 0.96324487388287605, {{24, 14}}}},
        {{1, 0.9593496736065168, {{3, 1}, {9, 16}}}, {1, 0.95281511378866424, {{25, 13}}}},
        {{2, 0.94151351182344223, {{9, 16}}}, {2, 0.93524994380440141, {{3, 1}, {25, 12}}}},
        {{1, 0.98000466437526812, {{9, 16}}}, {1, 0.96886897894015955, {{1, 1}, {25, 13}}}},
    };
    for (std::size_t s = 0; s < scenes.size(); ++s) {
        const auto got = run_inference(scenes[s], m, ic);
        ASSERT_EQ(got.size(), want[s].size()) << "scene " << s;
        for (std::size_t k = 0; k < got.size(); ++k) {
            EXPECT_EQ(got[k].category, want[s][k].category);
            EXPECT_NEAR(got[k].score, want[s][k].score, 1e-9);
            EXPECT_EQ(rle_encode(got[k].mask), want[s][k].rle) << "scene " << s << " instance " << k;
        }
    }
}

TEST(PredictionFile, RunLengthEncoding) {
    const auto m = mask_of(10, {0, 1, 2, 5, 9});
    const auto runs = rle_encode(m);
    EXPECT_EQ(runs, (std::vector<std::pair<std::uint32_t, std::uint32_t>>{{0, 3}, {5, 1}, {9, 1}}));
    EXPECT_EQ(rle_decode(runs, 10), m);
    EXPECT_TRUE(rle_encode(mask_of(4, {})).empty());
    EXPECT_THROW(rle_decode({{8, 3}}, 10), Error);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(seed);
        std::vector<bool> r(grad_detail::pick(0, 200, rng));
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = grad_detail::pick(0, 2, rng) == 0;
        EXPECT_EQ(rle_decode(rle_encode(r), r.size()), r);
    }
}

TEST(PredictionFile, RoundTripIsExact) {
    dyco::testing::TempDir dir;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        PredictionFile f;
        f.meta = {{"seed", seed}, {"note", "x"}};
        for (std::uint32_t s = 0; s < 3; ++s) {
            const auto n = static_cast<std::uint32_t>(grad_detail::pick(1, 50, rng));
            ScenePredictions sp{s, n, s == 1 ? std::vector<InstancePrediction>{}
                                             : fixtures::random_instance_predictions(rng, n, grad_detail::pick(1, 5, rng))};
            for (auto& p : sp.instances) p.score = grad_detail::uniform(Shape{1}, 0, 1, rng)[0];
            f.scenes.push_back(sp);
        }
        const std::string path = dir.file("p.jsonl");
        save_predictions(path, f);
        const auto back = load_predictions(path);
        EXPECT_EQ(back.meta, f.meta);
        EXPECT_EQ(back.scenes, f.scenes);
        EXPECT_EQ(encode_predictions(back), encode_predictions(f));
    }
}

TEST(PredictionFile, MalformedInputRejected) {
    EXPECT_THROW(decode_predictions(""), Error);
    EXPECT_THROW(decode_predictions("{\"x\":1}\n"), Error);
    EXPECT_THROW(decode_predictions("{\"meta\":{}}\n{\"scene\":0}\n"), Error);
    EXPECT_THROW(decode_predictions("{\"meta\":{}}\nnot json\n"), Error);
}
