#include "fundus/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

#include "fundus/error.hpp"
#include "fundus/explain.hpp"
#include "fundus/trainer.hpp"

namespace fundus::cli {

namespace {

namespace fs = std::filesystem;
using ad::Tensor;

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << text;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

/// Record paths rewritten relative to the directory the manifest is written to.
datasets::Manifest rebase(const datasets::Manifest& m, const fs::path& dir) {
    auto out = m;
    const auto target = fs::absolute(dir);
    for (auto& r : out.records) {
        r.path = fs::relative(fs::absolute(m.resolve(r.path)), target).generic_string();
        if (!r.lesion_mask.empty())
            r.lesion_mask = fs::relative(fs::absolute(m.resolve(r.lesion_mask)), target).generic_string();
    }
    out.base_dir = target;
    return out;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
    std::string config, manifest;
    std::vector<std::pair<std::string, std::string>> flags;  // config key, value
    std::vector<std::string> sets;
};

void add_train(CLI::App& app, TrainArgs& a, std::function<void()>& action, std::ostream& out) {
    auto* cmd = app.add_subcommand("train", "Train one stage (vit, vit+mask, ganomaly)");
    cmd->add_option("--config", a.config, "key=value config file; flags override it");
    cmd->add_option("--manifest", a.manifest, "Dataset manifest")->required();
    const std::vector<std::pair<std::string, std::string>> keys{
        {"--stage", "stage"},           {"--preset", "preset"},
        {"--augment", "augment"},       {"--epochs", "epochs"},
        {"--lr", "lr"},                 {"--warmup", "warmup"},
        {"--batch-size", "batch_size"}, {"--seed", "seed"},
        {"--val", "val_frac"},          {"--test", "test_frac"},
        {"--stratify", "stratify"},     {"--beta1", "beta1"},
        {"--lambda", "lambda"},         {"--mask-lr", "mask_lr"},
        {"--mask-width", "mask_width"}, {"--init-checkpoint", "init_checkpoint"},
        {"--variant", "gan.variant"},   {"--latent", "gan.latent"},
        {"--mask-checkpoint", "mask_checkpoint"}, {"--resume", "resume"},
        {"--out", "output_dir"},
    };
    auto values = std::make_shared<std::vector<std::string>>(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i)
        cmd->add_option(keys[i].first, (*values)[i], "config key " + keys[i].second);
    cmd->add_option("--set", a.sets, "Extra config entries as key=value");

    action = [cmd, keys, values, &a, &out] {
        for (std::size_t i = 0; i < keys.size(); ++i)
            if (cmd->count(keys[i].first)) a.flags.emplace_back(keys[i].second, (*values)[i]);
        trainer::ExperimentConfig cfg;
        if (!a.config.empty()) cfg = trainer::read_config(a.config);
        for (const auto& [k, v] : a.flags) trainer::set_key(cfg, k, v);
        for (const auto& kv : a.sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            trainer::set_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (!cfg.seed) throw ConfigError("train: missing required --seed (or seed= in --config)");
        if (cfg.output_dir.empty()) throw ConfigError("train: missing --out (or output_dir= in --config)");
        cfg.validate();
        const auto manifest = datasets::read_manifest(a.manifest);
        const auto result = trainer::train_stage(cfg, manifest);
        trainer::write_outputs(cfg.output_dir, result);
        out << "stage " << trainer::stage_name(cfg.stage) << ": " << result.log.epochs.size() << " epochs, "
            << result.train_count << " train / " << result.val_count << " val";
        if (cfg.stage == trainer::Stage::ganomaly)
            out << ", " << result.excluded_non_normal << " non-Normal records excluded";
        out << "\ncheckpoint " << (fs::path(cfg.output_dir) / "final.ckpt").string() << " checksum " << std::hex
            << io::checksum(result.final_checkpoint) << std::dec << "\n";
    };
}

// ---- eval / anomaly-score --------------------------------------------------

struct EvalArgs {
    std::string checkpoint, manifest, split = "test", out, scores;
};

void add_eval(CLI::App& app, EvalArgs& a, std::function<void()>& action, std::ostream& out) {
    auto* cmd = app.add_subcommand("eval", "Metrics of a checkpoint on a manifest split");
    cmd->add_option("--checkpoint", a.checkpoint)->required();
    cmd->add_option("--manifest", a.manifest)->required();
    cmd->add_option("--split", a.split, "train, val, test or all")->capture_default_str();
    cmd->add_option("--out", a.out, "Report file (stdout when omitted)");
    cmd->add_option("--scores", a.scores, "Per-record score file");
    action = [&a, &out] {
        const auto split = trainer::parse_split_name(a.split);
        const auto ck = io::read_checkpoint(a.checkpoint);
        const auto r = trainer::evaluate(ck, datasets::read_manifest(a.manifest), split);
        if (a.out.empty())
            out << r.text;
        else
            write_text(a.out, r.text);
        if (!a.scores.empty()) calibration::write_scores(a.scores, r.scores);
    };
}

struct ScoreArgs {
    std::string checkpoint, manifest, split = "test", out, maps;
};

void add_anomaly_score(CLI::App& app, ScoreArgs& a, std::function<void()>& action, std::ostream& out) {
    auto* cmd = app.add_subcommand("anomaly-score", "Anomaly scores of a ganomaly checkpoint");
    cmd->add_option("--checkpoint", a.checkpoint)->required();
    cmd->add_option("--manifest", a.manifest)->required();
    cmd->add_option("--split", a.split, "train, val, test or all")->capture_default_str();
    cmd->add_option("--out", a.out, "Score file (id, label, score)")->required();
    cmd->add_option("--maps", a.maps, "Directory for per-image reconstruction-error PNGs");
    action = [&a, &out] {
        const auto ck = io::read_checkpoint(a.checkpoint);
        if (ck.get("stage") != "ganomaly") throw ConfigError("anomaly-score needs a ganomaly checkpoint");
        const auto manifest = datasets::read_manifest(a.manifest);
        const auto r = trainer::evaluate(ck, manifest, trainer::parse_split_name(a.split));
        calibration::write_scores(a.out, r.scores);
        if (!a.maps.empty()) {
            ensure_dir(a.maps);
            const auto g = trainer::load_generator(ck);
            const auto side = g.config().image_side;
            for (const auto& s : r.scores) {
                const auto img = imaging::load_and_standardize(manifest.resolve(s.id), side).pixels;
                const auto name = fs::path(s.id).stem().string() + "_recon.png";
                explain::export_map(fs::path(a.maps) / name, explain::reconstruction_error(img, g));
            }
        }
        out << r.scores.size() << " scores written to " << a.out << "\n";
        if (r.auc) out << "auc " << *r.auc << "\n";
    };
}

// ---- calibrate -------------------------------------------------------------

struct CalibrateArgs {
    std::string scores, apply, out, backend = "kde", normal = "Normal";
    std::size_t bins = 64;
    std::optional<double> prior;
};

void add_calibrate(CLI::App& app, CalibrateArgs& a, std::function<void()>& action, std::ostream& out) {
    auto* cmd = app.add_subcommand("calibrate", "Fit score densities and map scores to P(pathology)");
    cmd->add_option("--scores", a.scores, "Score file used for fitting")->required();
    cmd->add_option("--apply", a.apply, "Score file to calibrate (defaults to --scores)");
    cmd->add_option("--out", a.out, "Output directory")->required();
    cmd->add_option("--backend", a.backend, "kde or histogram")->capture_default_str();
    cmd->add_option("--bins", a.bins, "Histogram backend bins")->capture_default_str();
    cmd->add_option("--prior", a.prior, "P(pathology); empirical frequency when omitted");
    cmd->add_option("--normal-label", a.normal, "Label of the healthy class")->capture_default_str();
    action = [&a, &out] {
        calibration::FitOptions opt;
        opt.backend = calibration::parse_backend(a.backend);
        opt.bins = a.bins;
        opt.prior_pathology = a.prior;
        std::vector<double> healthy, pathology;
        for (const auto& r : calibration::read_scores(a.scores))
            (r.label == a.normal ? healthy : pathology).push_back(r.score);
        const auto model = calibration::fit(healthy, pathology, opt);

        const auto targets = calibration::read_scores(a.apply.empty() ? a.scores : a.apply);
        ensure_dir(a.out);
        std::ostringstream cal;
        cal << "id\tlabel\tscore\tposterior\n";
        std::map<std::string, std::vector<double>> by_label;
        for (const auto& r : targets) {
            cal << r.id << '\t' << r.label << '\t' << r.score << '\t' << calibration::posterior(model, r.score)
                << '\n';
            by_label[r.label].push_back(r.score);
        }
        write_text(fs::path(a.out) / "calibrated.tsv", cal.str());
        const auto summary = calibration::format_summary(calibration::per_class_mean_posterior(by_label, model));
        write_text(fs::path(a.out) / "summary.tsv", summary);
        write_text(fs::path(a.out) / "histogram.tsv", calibration::score_histogram(model, healthy, pathology));
        out << summary;
    };
}

// ---- explain ---------------------------------------------------------------

struct ExplainArgs {
    std::string method, image, checkpoint, out, panel;
    std::optional<int> cls;
    std::size_t steps = 256, block = 0;
    std::optional<float> baseline;
    std::string ig_baseline = "black";
};

imaging::Image channel_mean_image(const imaging::Image& img) {
    imaging::Image out(img.height, img.width);
    for (std::size_t c = 0; c < 3; ++c) {
        const auto first = img.data.begin() + std::ptrdiff_t(c * img.plane());
        const double mean = std::accumulate(first, first + std::ptrdiff_t(img.plane()), 0.0) / double(img.plane());
        std::fill_n(out.data.begin() + std::ptrdiff_t(c * img.plane()), img.plane(), float(mean));
    }
    return out;
}

void export_outputs(const ExplainArgs& a, const imaging::Image& img, const explain::SaliencyMap& map) {
    explain::export_map(a.out, map);
    if (!a.panel.empty()) explain::export_panel(a.panel, img, {map});
}

Tensor<float> class_column(const Tensor<float>& probs, int cls) {
    return ad::reshape(ad::slice(probs, 1, std::size_t(cls), 1), {probs.shape()[0]});
}

void add_explain(CLI::App& app, ExplainArgs& a, std::function<void()>& action, std::ostream& out) {
    auto* cmd = app.add_subcommand("explain", "Saliency map of one image");
    cmd->add_option("--method", a.method)
        ->required()
        ->check(CLI::IsMember({"occlusion8", "occlusion16", "intgrad", "gradcam", "mask", "recon"}));
    cmd->add_option("--image", a.image)->required();
    cmd->add_option("--checkpoint", a.checkpoint)->required();
    cmd->add_option("--out", a.out, "Map PNG")->required();
    cmd->add_option("--panel", a.panel, "Also write image and map side by side");
    cmd->add_option("--class", a.cls, "Explained class index (predicted class by default)");
    cmd->add_option("--steps", a.steps, "Integrated-gradients steps")->capture_default_str();
    cmd->add_option("--block", a.block, "Grad-CAM block index (default: last)");
    cmd->add_option("--baseline", a.baseline, "Occlusion fill value (default: image mean)");
    cmd->add_option("--ig-baseline", a.ig_baseline, "Integrated-gradients baseline: black or mean (per-channel image mean)")
        ->check(CLI::IsMember({"black", "mean"}))
        ->capture_default_str();
    action = [cmd, &a, &out] {
        const auto ck = io::read_checkpoint(a.checkpoint);
        const auto stage = trainer::parse_stage(ck.get("stage"));
        explain::SaliencyMap map;

        if (a.method == "recon") {
            if (stage != trainer::Stage::ganomaly) throw ConfigError("method recon needs a ganomaly checkpoint");
            const auto g = trainer::load_generator(ck);
            const auto img = imaging::load_and_standardize(a.image, g.config().image_side).pixels;
            map = explain::reconstruction_error(img, g);
            export_outputs(a, img, map);
            return;
        }
        if (stage == trainer::Stage::ganomaly) throw ConfigError("method " + a.method + " needs a classifier checkpoint");
        const auto clf = trainer::load_classifier(ck);
        const auto img = imaging::load_and_standardize(a.image, clf.config().image_side).pixels;
        std::optional<unet::MaskUNet<float>> masker;
        if (stage == trainer::Stage::vit_mask) masker.emplace(trainer::load_masker(ck));

        if (a.method == "mask") {
            if (!masker) throw ConfigError("method mask needs a vit+mask checkpoint");
            map = explain::attention_mask(img, *masker);
            export_outputs(a, img, map);
            return;
        }

        explain::ScoreFn<float> probs = [&](const Tensor<float>& x) {
            return ad::softmax(clf.forward(masker ? unet::apply_mask(masker->forward(x), x) : x), 1);
        };
        const auto x = imaging::to_tensor<float>(std::span(&img, 1));
        int cls;
        {
            ad::NoGradGuard guard;
            const auto pt = probs(x);
            const auto p = pt.data();
            cls = a.cls.value_or(int(std::max_element(p.begin(), p.end()) - p.begin()));
            if (cls < 0 || std::size_t(cls) >= p.size())
                throw ConfigError("--class " + std::to_string(cls) + " outside [0, " + std::to_string(p.size()) + ")");
            out << "class " << cls << " probability " << p[std::size_t(cls)] << "\n";
        }
        const explain::ScoreFn<float> score = [&](const Tensor<float>& x) { return class_column(probs(x), cls); };

        if (a.method == "occlusion8" || a.method == "occlusion16") {
            const std::size_t patch = a.method == "occlusion8" ? 8 : 16;
            const float fill = a.baseline.value_or(
                float(std::accumulate(img.data.begin(), img.data.end(), 0.0) / double(img.data.size())));
            map = explain::occlusion(img, score, patch, fill).impact;
        } else if (a.method == "intgrad") {
            const auto base = a.ig_baseline == "mean" ? channel_mean_image(img) : imaging::Image(img.height, img.width);
            map = explain::integrated_gradients(img, score, base, a.steps);
        } else {
            if (masker) throw ConfigError("gradcam is defined on plain vit checkpoints");
            const auto depth = clf.config().depth;
            map = explain::grad_cam(img, clf, cmd->count("--block") ? a.block : depth - 1, cls);
        }
        export_outputs(a, img, map);
    };
}

// ---- augment-preview -------------------------------------------------------

struct PreviewArgs {
    std::string image, out, policy = "color";
    std::uint64_t seed = 0;
    std::size_t count = 4, side = 224;
};

void add_preview(CLI::App& app, PreviewArgs& a, std::function<void()>& action, std::ostream& out) {
    auto* cmd = app.add_subcommand("augment-preview", "Original and augmented copies side by side");
    cmd->add_option("--image", a.image)->required();
    cmd->add_option("--out", a.out, "Panel PNG")->required();
    cmd->add_option("--policy", a.policy, "none, geometric, color, hist_eq, laplace (cumulative)")->capture_default_str();
    cmd->add_option("--seed", a.seed)->required();
    cmd->add_option("--count", a.count, "Augmented copies")->capture_default_str();
    cmd->add_option("--side", a.side, "Standardised side")->capture_default_str();
    action = [&a, &out] {
        imaging::AugmentationPolicy p;
        p.stage = imaging::parse_stage(a.policy);
        p.seed = a.seed;
        p.validate();
        const auto img = imaging::load_and_standardize(a.image, a.side).pixels;
        std::vector<imaging::Image> tiles{img};
        for (std::size_t k = 0; k < a.count; ++k) tiles.push_back(imaging::augment(img, p, 0, k));
        imaging::write_png(a.out, imaging::hconcat(tiles));
        out << "wrote " << a.out << "\n";
    };
}

// ---- gen-shapes / split ----------------------------------------------------

struct ShapesArgs {
    datasets::ShapesOptions opt;
    std::string out;
};

void add_gen_shapes(CLI::App& app, ShapesArgs& a, std::function<void()>& action, std::ostream& out) {
    auto* cmd = app.add_subcommand("gen-shapes", "Write the synthetic shapes corpus");
    cmd->add_option("--out", a.out, "Output directory")->required();
    cmd->add_option("--n-healthy", a.opt.n_healthy)->capture_default_str();
    cmd->add_option("--n-anomalous", a.opt.n_anomalous)->capture_default_str();
    cmd->add_option("--side", a.opt.side)->capture_default_str();
    cmd->add_option("--seed", a.opt.seed)->required();
    cmd->add_option("--tag", a.opt.dataset_tag, "Dataset tag")->capture_default_str();
    action = [&a, &out] {
        const auto m = datasets::generate_shapes_dataset(a.opt, a.out);
        out << m.records.size() << " records in " << (fs::path(a.out) / "manifest.tsv").string() << "\n";
    };
}

struct SplitArgs {
    std::string manifest, out, stratify = "label_dataset";
    datasets::SplitSpec spec;
    bool keep_all = false;
};

void add_split(CLI::App& app, SplitArgs& a, std::function<void()>& action, std::ostream& out) {
    auto* cmd = app.add_subcommand("split", "Quality filter and stratified train/val/test split");
    cmd->add_option("--manifest", a.manifest)->required();
    cmd->add_option("--out", a.out, "Directory for train.tsv, val.tsv, test.tsv")->required();
    cmd->add_option("--val", a.spec.val_frac)->capture_default_str();
    cmd->add_option("--test", a.spec.test_frac)->capture_default_str();
    cmd->add_option("--seed", a.spec.seed)->required();
    cmd->add_option("--stratify", a.stratify, "label or label_dataset")
        ->check(CLI::IsMember({"label", "label_dataset"}))
        ->capture_default_str();
    cmd->add_flag("--keep-low-quality", a.keep_all, "Skip the quality filter");
    action = [&a, &out] {
        a.spec.stratify_by = a.stratify == "label" ? datasets::StratifyBy::label : datasets::StratifyBy::label_dataset;
        try {
            a.spec.validate();
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
        auto m = datasets::read_manifest(a.manifest);
        datasets::QualityReport q;
        if (!a.keep_all) m = datasets::filter_quality(m, &q);
        const auto s = datasets::stratified_split(m, a.spec);
        ensure_dir(a.out);
        for (const auto& [name, part] : {std::pair{"train", &s.train}, {"val", &s.val}, {"test", &s.test}}) {
            datasets::write_manifest(fs::path(a.out) / (std::string(name) + ".tsv"), rebase(*part, a.out));
            out << name << ' ' << part->records.size() << '\n';
        }
        if (q.removed) out << "quality-filtered " << q.removed << '\n';
    };
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Fundus classification, attention masks, anomaly detection and explanations", "fundus"};
    app.require_subcommand(1);
    std::map<std::string, std::function<void()>> actions;

    TrainArgs train;
    EvalArgs eval;
    ScoreArgs score;
    CalibrateArgs calibrate;
    ExplainArgs expl;
    PreviewArgs preview;
    ShapesArgs shapes;
    SplitArgs split;
    add_train(app, train, actions["train"], out);
    add_eval(app, eval, actions["eval"], out);
    add_anomaly_score(app, score, actions["anomaly-score"], out);
    add_calibrate(app, calibrate, actions["calibrate"], out);
    add_explain(app, expl, actions["explain"], out);
    add_preview(app, preview, actions["augment-preview"], out);
    add_gen_shapes(app, shapes, actions["gen-shapes"], out);
    add_split(app, split, actions["split"], out);

    if (args.empty() || (args[0].rfind("-", 0) != 0 && !actions.count(args[0]))) {
        if (!args.empty()) err << "unknown subcommand '" << args[0] << "'\n";
        err << app.help();
        return usage_error;
    }
    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(std::move(reversed));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage_error;
    }
    try {
        actions.at(app.get_subcommands().front()->get_name())();
    } catch (const ConfigError& e) {
        err << "usage error: " << e.what() << "\n";
        return usage_error;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return data_error;
    }
    return ok;
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace fundus::cli
