#pragma once

// Experiment configuration, the three training stages and evaluation.
//
// Config files are line-oriented `key=value` text; `#` starts a comment and
// blank lines are ignored. format_config() lists every key.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fundus/calibration.hpp"
#include "fundus/checkpoint.hpp"
#include "fundus/datasets.hpp"
#include "fundus/ganomaly.hpp"
#include "fundus/imaging.hpp"
#include "fundus/metrics.hpp"
#include "fundus/optim.hpp"
#include "fundus/unet.hpp"
#include "fundus/vit.hpp"

namespace fundus::trainer {

namespace fs = std::filesystem;

enum class Stage { vit, vit_mask, ganomaly };
Stage parse_stage(const std::string& name);
std::string stage_name(Stage s);

struct ExperimentConfig {
    Stage stage = Stage::vit;
    std::string preset = "toy";  // toy | b16
    imaging::AugmentationPolicy augmentation;
    std::optional<int> epochs;  // 30 for classifiers, 100 for ganomaly
    double lr = 1e-5;
    int warmup = 5;
    std::size_t batch_size = 16;
    std::optional<std::uint64_t> seed;
    datasets::SplitSpec split;
    bool quality_filter = true;
    std::optional<double> beta1;  // 0.9 for classifiers, 0.5 for ganomaly

    // vit+mask
    double lambda = 1e-4;
    double mask_lr = 1e-3;
    std::size_t mask_width = 32;
    std::string init_checkpoint;

    // ganomaly
    ganomaly::GanomalyConfig gan;
    std::string mask_checkpoint;

    std::string resume;
    std::string output_dir;

    int total_epochs() const;
    double adam_beta1() const;
    optim::ScheduleConfig schedule() const;
    optim::ScheduleConfig mask_schedule() const;
    vit::ViTConfig vit_config(std::size_t n_classes) const;
    /// Throws ConfigError; the seed has no default.
    void validate() const;
};

/// Throws ConfigError on an unknown key or an unparsable value.
void set_key(ExperimentConfig& cfg, const std::string& key, const std::string& value);
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig read_config(const fs::path& path, ExperimentConfig base = {});
/// Every key in a fixed order, with stage defaults made explicit.
std::string format_config(const ExperimentConfig& cfg);

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    double train_loss = 0, train_acc = 0;
    double val_loss = 0, val_acc = 0;
    /// Stage-specific columns (per-dataset validation accuracy, discriminator loss).
    std::map<std::string, double> extra;
};

struct RunLog {
    std::vector<EpochRecord> epochs;
    /// Tab-separated, header row first; missing values print as nan.
    std::string format() const;
};

/// Checkpoint headers echo the config under "config.<key>", leaving out
/// file locations (init_checkpoint, mask_checkpoint, resume, output_dir) so
/// identical runs in different directories produce identical bytes.
struct TrainResult {
    io::Checkpoint final_checkpoint;
    io::Checkpoint best_checkpoint;  // highest validation accuracy; final for ganomaly
    RunLog log;
    std::size_t train_count = 0, val_count = 0;
    std::size_t excluded_quality = 0;
    std::size_t excluded_non_normal = 0;
};

/// Quality filter then stratified split under the config seed.
datasets::Split prepare_split(const ExperimentConfig& cfg, const datasets::Manifest& manifest,
                              std::size_t* excluded_quality = nullptr);

TrainResult train_stage(const ExperimentConfig& cfg, const datasets::Manifest& manifest);
/// Uses the given partitions as they are.
TrainResult train_stage(const ExperimentConfig& cfg, const datasets::Split& split);

/// final.ckpt, best.ckpt, runlog.tsv and config.txt.
void write_outputs(const fs::path& dir, const TrainResult& result);

ExperimentConfig config_from_checkpoint(const io::Checkpoint& ckpt);
std::vector<std::string> classes_from_checkpoint(const io::Checkpoint& ckpt);
vit::ViT<float> load_classifier(const io::Checkpoint& ckpt);
unet::MaskUNet<float> load_masker(const io::Checkpoint& ckpt);
ganomaly::Generator<float> load_generator(const io::Checkpoint& ckpt);

enum class SplitName { train, val, test, all };
SplitName parse_split_name(const std::string& name);

struct EvalResult {
    std::optional<metrics::EvalReport> report;  // classifier stages
    std::optional<double> auc;
    std::vector<calibration::ScoreRecord> scores;  // per record: class-1 probability or anomaly score
    std::string text;
};

/// Classifier stages: pooled and per-dataset metrics (vit+mask classifies
/// M * x). Ganomaly: anomaly scores with Normal as the negative class.
/// Throws DataError on an empty split.
EvalResult evaluate(const io::Checkpoint& ckpt, const datasets::Manifest& records);
EvalResult evaluate(const io::Checkpoint& ckpt, const datasets::Manifest& manifest, SplitName split);

}  // namespace fundus::trainer
