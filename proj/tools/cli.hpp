#pragma once

// dyco command-line front end: gen, train, infer, eval, sweep-radius,
// grad-check and selfcheck.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dyco/checkpoint.hpp"
#include "dyco/grad_suite.hpp"
#include "dyco/metrics.hpp"
#include "dyco/selfcheck.hpp"
#include "run_config.hpp"

namespace dyco::cli {

namespace fs = std::filesystem;

/// Bad invocation: reported with usage, exit status 2.
class UsageError : public Error {
public:
    using Error::Error;
};

/// A check ran and missed its tolerance: exit status 1.
class ToleranceFailure : public Error {
public:
    using Error::Error;
};

inline constexpr const char* kDatasetManifest = "dataset.json";

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be written
/// to slot i, so the outcome does not depend on the job count.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(jobs);
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j)
        pool.emplace_back([&, j] {
            try {
                for (std::size_t i = j; i < n; i += jobs) fn(i);
            } catch (...) {
                errors[j] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline std::string scene_file_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene_%05zu.bin", index);
    return buf;
}

/// Scene files of a dataset directory in name order.
inline std::vector<fs::path> list_scenes(const std::string& dir) {
    if (!fs::is_directory(dir)) throw Error("not a directory: " + dir);
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("scene_", 0) == 0 && e.path().extension() == ".bin") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    if (out.empty()) throw Error("no scene files in " + dir);
    return out;
}

inline std::vector<PointScene> load_scenes(const std::string& dir, std::size_t jobs) {
    const auto paths = list_scenes(dir);
    std::vector<PointScene> scenes(paths.size());
    parallel_for(paths.size(), jobs, [&](std::size_t i) { scenes[i] = load_scene(paths[i].string()); });
    return scenes;
}

inline void write_text(const std::string& path, const std::string& text) {
    io::write_file(path, std::vector<char>(text.begin(), text.end()));
}

inline void require_distinct(const std::vector<std::string>& paths) {
    for (std::size_t i = 0; i < paths.size(); ++i)
        for (std::size_t j = i + 1; j < paths.size(); ++j)
            if (!paths[i].empty() && fs::weakly_canonical(paths[i]) == fs::weakly_canonical(paths[j]))
                throw UsageError("output paths must differ: " + paths[i]);
}

inline PredictionOverride to_override(const OraclePredictions& o) { return {o.semantic_logits, o.offsets}; }

/// Flag values; unset ones leave the config untouched.
struct Flags {
    std::string config_path;
    std::optional<double> radius, nms_iou, lr, offset_noise;
    std::optional<std::size_t> grid, mask_dim, layers, min_cluster, jobs, steps, warmup, batch;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> decoder;
};

inline RunConfig effective_config(const Flags& f) {
    RunConfig c;
    if (!f.config_path.empty()) {
        const auto bytes = io::read_file(f.config_path);
        try {
            apply_json(c, nlohmann::json::parse(bytes.begin(), bytes.end()));
        } catch (const nlohmann::json::exception& e) {
            throw UsageError("config " + f.config_path + ": " + e.what());
        }
    }
    if (f.seed) c.seed = *f.seed;
    if (f.jobs) c.jobs = *f.jobs;
    if (f.radius) c.inference.clustering.radius = *f.radius;
    if (f.nms_iou) c.inference.nms_iou = *f.nms_iou;
    if (f.min_cluster) c.inference.min_cluster = *f.min_cluster;
    if (f.grid) c.model.generator.grid = *f.grid;
    if (f.mask_dim) c.model.backbone.mask_dim = *f.mask_dim;
    if (f.layers) c.model.layout.layers = *f.layers;
    if (f.lr) c.train.lr = *f.lr;
    if (f.steps) c.train.steps = *f.steps;
    if (f.warmup) c.train.warmup_steps = *f.warmup;
    if (f.batch) c.train.batch = *f.batch;
    if (f.offset_noise) c.offset_noise = *f.offset_noise;
    if (f.decoder) c.inference.decoder = *f.decoder == "membership" ? DecoderMode::Membership : DecoderMode::Learned;
    try {
        validate(c);
    } catch (const UsageError&) {
        throw;
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    return c;
}

/// The scene section of a dataset's manifest, when one exists, so that
/// downstream commands see the generator settings the data was made with.
inline void adopt_dataset_config(RunConfig& c, const std::string& dir) {
    const fs::path manifest = fs::path(dir) / kDatasetManifest;
    if (!fs::exists(manifest)) return;
    const auto bytes = io::read_file(manifest.string());
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    if (j.contains("config") && j["config"].contains("scene"))
        apply_json(c, nlohmann::json{{"scene", j["config"]["scene"]}});
    c.model.backbone.num_classes = static_cast<std::size_t>(c.scene.num_classes());
    c.model.sync();
}

// ---------------------------------------------------------------------------

struct GenArgs {
    std::size_t scenes = 0;
    std::size_t first = 0;
    std::string out;
};

inline int cmd_gen(const RunConfig& c, const GenArgs& a, std::ostream& out) {
    fs::create_directories(a.out);
    std::vector<std::string> names(a.scenes);
    parallel_for(a.scenes, c.jobs, [&](std::size_t k) {
        SceneConfig sc = c.scene;
        sc.seed = scene_seed(c.seed, a.first + k);
        names[k] = scene_file_name(a.first + k);
        save_scene((fs::path(a.out) / names[k]).string(), generate_scene(sc));
    });
    const nlohmann::json manifest{{"config", to_json(c)}, {"first", a.first}, {"scenes", names}};
    write_text((fs::path(a.out) / kDatasetManifest).string(), manifest.dump(2) + "\n");
    out << "wrote " << a.scenes << " scenes to " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string data, out, curve;
};

inline std::string curve_record(const LossRecord& r) {
    nlohmann::json j{{"step", r.step},       {"seg", r.loss.seg},   {"ctr", r.loss.ctr},
                     {"mask", r.loss.mask},  {"dice", r.loss.dice}, {"total", r.loss.total}};
    return j.dump();
}

inline int cmd_train(RunConfig c, const TrainArgs& a, std::ostream& out) {
    const std::string curve = a.curve.empty() ? a.out + ".curve.jsonl" : a.curve;
    require_distinct({a.out, curve});
    adopt_dataset_config(c, a.data);
    const auto scenes = load_scenes(a.data, c.jobs);
    Model model = init_model(c.model, c.seed);
    TrainConfig tc = c.train;
    tc.seed = c.seed;
    tc.jobs = c.jobs;
    std::string text = nlohmann::json{{"config", to_json(c)}}.dump() + "\n";
    const auto records = train(model, scenes, tc, [&](const LossRecord& r) {
        if (r.step == 1 || r.step % 100 == 0 || r.step == tc.steps)
            out << "step " << r.step << "  total " << std::setprecision(6) << r.loss.total << "\n";
    });
    for (const auto& r : records) text += curve_record(r) + "\n";
    save_checkpoint(a.out, model.params);
    write_text(curve, text);
    out << "checkpoint " << a.out << ", loss curve " << curve << "\n";
    return 0;
}

struct InferArgs {
    std::string data, checkpoint, out;
    bool oracle = false;
};

inline Model load_model_checked(const std::string& path, const Flags& f) {
    Model m = model_from_params(load_checkpoint(path));
    auto clash = [&](const std::optional<std::size_t>& flag, std::size_t have, const char* name) {
        if (flag && *flag != have)
            throw UsageError(std::string("--") + name + " " + std::to_string(*flag) + " disagrees with checkpoint value " +
                             std::to_string(have));
    };
    clash(f.grid, m.config.generator.grid, "grid");
    clash(f.mask_dim, m.config.backbone.mask_dim, "mask-dim");
    clash(f.layers, m.config.layout.layers, "layers");
    return m;
}

/// Predictions for every scene; learned model unless only oracle votes are asked for.
inline std::vector<InferenceOutput> infer_all(const std::vector<PointScene>& scenes, const RunConfig& c,
                                              const std::optional<Model>& model, bool oracle) {
    std::vector<InferenceOutput> outs(scenes.size());
    parallel_for(scenes.size(), c.jobs, [&](std::size_t i) {
        std::optional<PredictionOverride> votes;
        if (oracle) votes = to_override(oracle_predictions(scenes[i], c.offset_noise, scene_seed(c.seed, i)));
        if (model) outs[i] = infer_scene(scenes[i], *model, c.inference, votes);
        else outs[i] = infer_from_predictions(scenes[i], *votes, c.inference);
    });
    return outs;
}

inline int cmd_infer(RunConfig c, const InferArgs& a, const Flags& f, std::ostream& out) {
    adopt_dataset_config(c, a.data);
    if (a.checkpoint.empty() && !a.oracle) throw UsageError("infer needs --checkpoint or --oracle");
    std::optional<Model> model;
    if (!a.checkpoint.empty()) model = load_model_checked(a.checkpoint, f);
    if (!model) c.inference.decoder = DecoderMode::Membership;
    const auto scenes = load_scenes(a.data, c.jobs);
    const auto outs = infer_all(scenes, c, model, a.oracle);
    PredictionFile file;
    file.meta = {{"config", to_json(c)}, {"checkpoint", a.checkpoint}, {"oracle", a.oracle}};
    std::size_t total = 0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        file.scenes.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(scenes[i].size()),
                               outs[i].predictions});
        total += outs[i].predictions.size();
    }
    save_predictions(a.out, file);
    out << "wrote " << total << " instances over " << scenes.size() << " scenes to " << a.out << "\n";
    return 0;
}

inline EvalReport evaluate_scenes(const std::vector<PointScene>& scenes,
                                  const std::vector<std::vector<InstancePrediction>>& preds) {
    std::vector<EvalInstance> p, g;
    std::vector<std::vector<Vec3>> coords;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        for (auto& e : eval_predictions(preds[i], i)) p.push_back(std::move(e));
        for (auto& e : gt_instances(scenes[i], i)) g.push_back(std::move(e));
        coords.push_back(scenes[i].coords);
    }
    return evaluate_instances(p, g, coords);
}

struct EvalArgs {
    std::string data, predictions, out;
};

inline int cmd_eval(const RunConfig& c, const EvalArgs& a, std::ostream& out) {
    const auto scenes = load_scenes(a.data, c.jobs);
    const auto file = load_predictions(a.predictions);
    std::vector<std::vector<InstancePrediction>> preds(scenes.size());
    for (const auto& s : file.scenes) {
        if (s.scene >= scenes.size()) throw Error("predictions name scene " + std::to_string(s.scene) + " beyond the dataset");
        if (s.num_points != scenes[s.scene].size())
            throw Error("predictions for scene " + std::to_string(s.scene) + " cover a different point count");
        preds[s.scene] = s.instances;
    }
    const EvalReport report = evaluate_scenes(scenes, preds);
    nlohmann::json j = report_json(report);
    j["config"] = to_json(c);
    j["predictions_meta"] = file.meta;
    if (!a.out.empty()) write_text(a.out, j.dump(2) + "\n");
    out << report_text(report);
    return 0;
}

struct SweepArgs {
    std::string data, checkpoint, out;
    std::vector<double> radii;
    bool oracle = false;
};

/// Mean over clusters of the share of members from the cluster's most common
/// ground-truth instance (stuff counts as one group).
inline double mean_purity(const std::vector<Cluster>& clusters, const PointScene& scene, double& weight) {
    double sum = 0.0;
    weight = 0.0;
    for (const auto& cl : clusters) {
        std::map<int, std::size_t> hist;
        for (auto m : cl.members) ++hist[scene.gt_instance[m]];
        std::size_t best = 0;
        for (const auto& [id, n] : hist) best = std::max(best, n);
        sum += static_cast<double>(best) / static_cast<double>(cl.size());
        weight += 1.0;
    }
    return sum;
}

inline int cmd_sweep(RunConfig c, const SweepArgs& a, const Flags& f, std::ostream& out) {
    adopt_dataset_config(c, a.data);
    if (a.checkpoint.empty() && !a.oracle) throw UsageError("sweep-radius needs --checkpoint or --oracle");
    std::optional<Model> model;
    if (!a.checkpoint.empty()) model = load_model_checked(a.checkpoint, f);
    if (!model) c.inference.decoder = DecoderMode::Membership;
    std::vector<double> radii = a.radii;
    if (radii.empty())
        for (double k : {0.25, 0.5, 0.75}) radii.push_back(k * c.scene.d_min);
    const auto scenes = load_scenes(a.data, c.jobs);

    std::ostringstream table;
    table << "# " << nlohmann::json{{"config", to_json(c)}, {"checkpoint", a.checkpoint}, {"oracle", a.oracle}}.dump()
          << "\n";
    table << std::left << std::setw(10) << "radius" << std::setw(10) << "mAP" << std::setw(10) << "AP@50"
          << std::setw(10) << "clusters" << "purity\n";
    table << std::fixed;
    for (double r : radii) {
        if (!(r > 0.0)) throw UsageError("radii must be positive");
        RunConfig rc = c;
        rc.inference.clustering.radius = r;
        const auto outs = infer_all(scenes, rc, model, a.oracle);
        std::vector<std::vector<InstancePrediction>> preds;
        std::size_t clusters = 0;
        double purity = 0.0, weight = 0.0;
        for (std::size_t i = 0; i < scenes.size(); ++i) {
            preds.push_back(outs[i].predictions);
            std::vector<Cluster> kept;
            for (const auto& cl : outs[i].clusters)
                if (cl.size() >= rc.inference.min_cluster) kept.push_back(cl);
            clusters += kept.size();
            double w = 0.0;
            purity += mean_purity(kept, scenes[i], w);
            weight += w;
        }
        const EvalReport rep = evaluate_scenes(scenes, preds);
        table << std::setprecision(4) << std::setw(10) << r << std::setprecision(6) << std::setw(10) << rep.map
              << std::setw(10) << rep.ap50 << std::setw(10) << clusters << (weight > 0 ? purity / weight : 0.0) << "\n";
    }
    if (!a.out.empty()) write_text(a.out, table.str());
    out << table.str();
    return 0;
}

struct GradArgs {
    std::size_t instances = 20;
    std::string only;
    double tol = 1e-4;
    double epsilon = 1e-5;
    std::size_t max_coords = 200;
};

inline int cmd_grad_check(const RunConfig& c, const GradArgs& a, std::ostream& out) {
    GradCheckOptions opt;
    opt.epsilon = a.epsilon;
    opt.max_coords = a.max_coords;
    const auto results = run_gradient_suite(a.instances, c.seed, a.only, opt);
    if (results.empty()) throw UsageError("unknown gradient case '" + a.only + "'");
    std::string failed;
    double worst = 0.0;
    for (const auto& r : results) {
        const bool ok = r.worst.max_rel_error <= a.tol;
        worst = std::max(worst, r.worst.max_rel_error);
        out << std::left << std::setw(18) << r.name << std::right << std::setw(5) << r.instances << std::setw(4)
            << r.redrawn << "  max rel err "
            << std::scientific << std::setprecision(3) << r.worst.max_rel_error << std::defaultfloat << "  "
            << (ok ? "ok" : "FAIL at " + r.worst.leaf + "[" + std::to_string(r.worst.index) + "]") << "\n";
        if (!ok && failed.empty()) failed = r.name;
    }
    out << "max error " << std::scientific << worst << std::defaultfloat << "\n";
    if (!failed.empty()) throw ToleranceFailure("gradient check '" + failed + "' exceeds tolerance");
    return 0;
}

inline int cmd_selfcheck(const RunConfig& c, std::size_t seeds, std::ostream& out) {
    std::string failed;
    for (const auto& r : run_selfcheck(seeds, c.seed)) {
        out << std::left << std::setw(20) << r.name << std::right << std::setw(7) << r.cases << "  "
            << (r.passed ? "ok" : "FAIL: " + r.detail) << "\n";
        if (!r.passed && failed.empty()) failed = r.name + ": " + r.detail;
    }
    if (!failed.empty()) throw ToleranceFailure("selfcheck " + failed);
    return 0;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"dyco: point cloud instance segmentation with dynamic convolution"};
    app.require_subcommand(1);
    app.fallthrough();
    Flags f;
    app.add_option("--config", f.config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--seed", f.seed, "Base seed");
    app.add_option("--jobs", f.jobs, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--radius", f.radius, "Clustering radius, meters")->check(CLI::PositiveNumber);
    app.add_option("--grid", f.grid, "Voxel grid size g")->check(CLI::PositiveNumber);
    app.add_option("--mask-dim", f.mask_dim, "Mask feature width D'")->check(CLI::PositiveNumber);
    app.add_option("--layers", f.layers, "Decoder layers L")->check(CLI::PositiveNumber);
    app.add_option("--nms-iou", f.nms_iou, "NMS IoU threshold")->check(CLI::Range(1e-9, 1.0));
    app.add_option("--min-cluster", f.min_cluster, "Smallest cluster kept at inference");

    GenArgs gen;
    auto* g = app.add_subcommand("gen", "Generate synthetic scenes");
    g->add_option("--scenes", gen.scenes, "Number of scenes")->required()->check(CLI::PositiveNumber);
    g->add_option("--first", gen.first, "Index of the first scene");
    g->add_option("--out", gen.out, "Output directory")->required();

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Train a model on a scene directory");
    t->add_option("--data", tr.data, "Scene directory")->required();
    t->add_option("--out", tr.out, "Checkpoint path")->required();
    t->add_option("--curve", tr.curve, "Loss curve path (default <out>.curve.jsonl)");
    t->add_option("--steps", f.steps, "Optimizer steps")->check(CLI::PositiveNumber);
    t->add_option("--warmup", f.warmup, "Steps with semantic and centroid losses only");
    t->add_option("--lr", f.lr, "Adam learning rate")->check(CLI::NonNegativeNumber);
    t->add_option("--batch", f.batch, "Scenes per step")->check(CLI::PositiveNumber);

    InferArgs inf;
    auto* in = app.add_subcommand("infer", "Predict instances");
    in->add_option("--data", inf.data, "Scene directory")->required();
    in->add_option("--checkpoint", inf.checkpoint, "Model checkpoint")->check(CLI::ExistingFile);
    in->add_option("--out", inf.out, "Prediction file")->required();
    in->add_flag("--oracle", inf.oracle, "Use ground-truth semantics and centroid votes");
    in->add_option("--offset-noise", f.offset_noise, "Gaussian noise on oracle votes, meters")
        ->check(CLI::NonNegativeNumber);
    in->add_option("--decoder", f.decoder, "learned or membership")->check(CLI::IsMember({"learned", "membership"}));

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Score predictions against ground truth");
    e->add_option("--data", ev.data, "Scene directory")->required();
    e->add_option("--predictions", ev.predictions, "Prediction file")->required()->check(CLI::ExistingFile);
    e->add_option("--out", ev.out, "JSON report path");

    SweepArgs sw;
    auto* s = app.add_subcommand("sweep-radius", "Metrics across clustering radii");
    s->add_option("--data", sw.data, "Scene directory")->required();
    s->add_option("--checkpoint", sw.checkpoint, "Model checkpoint")->check(CLI::ExistingFile);
    s->add_flag("--oracle", sw.oracle, "Use ground-truth semantics and centroid votes");
    s->add_option("--offset-noise", f.offset_noise, "Gaussian noise on oracle votes, meters")
        ->check(CLI::NonNegativeNumber);
    s->add_option("--radii", sw.radii, "Radii, meters (default 0.25, 0.5, 0.75 x d_min)");
    s->add_option("--out", sw.out, "Table path");

    GradArgs ga;
    auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient suite");
    gc->add_option("--instances", ga.instances, "Random instances per case")->check(CLI::PositiveNumber);
    gc->add_option("--case", ga.only, "Run one case only");
    gc->add_option("--tol", ga.tol, "Maximum relative error")->check(CLI::PositiveNumber);
    gc->add_option("--epsilon", ga.epsilon, "Central difference step")->check(CLI::Range(1e-7, 1e-3));
    gc->add_option("--max-coords", ga.max_coords, "Coordinates sampled per instance (0 = all)");

    std::size_t seeds = 100;
    auto* sc = app.add_subcommand("selfcheck", "Oracle equivalence suites");
    sc->add_option("--seeds", seeds, "Random cases per suite")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& ex) {
        err << "error: " << ex.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        const RunConfig c = effective_config(f);
        if (g->parsed()) return cmd_gen(c, gen, out);
        if (t->parsed()) return cmd_train(c, tr, out);
        if (in->parsed()) return cmd_infer(c, inf, f, out);
        if (e->parsed()) return cmd_eval(c, ev, out);
        if (s->parsed()) return cmd_sweep(c, sw, f, out);
        if (gc->parsed()) return cmd_grad_check(c, ga, out);
        if (sc->parsed()) return cmd_selfcheck(c, seeds, out);
    } catch (const UsageError& ex) {
        err << "error: " << ex.what() << "\n\n" << app.help();
        return 2;
    } catch (const ToleranceFailure& ex) {
        err << "FAILED: " << ex.what() << "\n";
        return 1;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace dyco::cli
