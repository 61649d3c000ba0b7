#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fundus/error.hpp"
#include "fundus/trainer.hpp"

using namespace fundus;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("fundus_" + name)) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

trainer::ExperimentConfig toy_config(int epochs, double lr) {
    trainer::ExperimentConfig c;
    c.seed = 7;
    c.epochs = epochs;
    c.warmup = 1;
    c.lr = lr;
    c.batch_size = 8;
    return c;
}

datasets::Manifest only(const datasets::Manifest& m, std::size_t n) {
    auto out = m;
    out.records.resize(n);
    return out;
}

}  // namespace

TEST(Config, ParsesKeyValueWithComments) {
    const auto c = trainer::parse_config(
        "# experiment\n"
        "stage = ganomaly\n"
        "seed=7   # trailing comment\n"
        "\n"
        "gan.variant=kl+mask\n"
        "gan.widths=8,16,32,64\n"
        "lr=2e-4\n");
    EXPECT_EQ(c.stage, trainer::Stage::ganomaly);
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.gan.variant, ganomaly::Variant::kl_mask);
    EXPECT_EQ(c.gan.widths[3], 64u);
    EXPECT_EQ(c.lr, 2e-4);
    EXPECT_EQ(c.total_epochs(), 100);
    EXPECT_EQ(c.adam_beta1(), 0.5);
}

TEST(Config, StageDefaults) {
    trainer::ExperimentConfig c;
    EXPECT_EQ(c.lr, 1e-5);
    EXPECT_EQ(c.warmup, 5);
    EXPECT_EQ(c.total_epochs(), 30);
    EXPECT_EQ(c.split.val_frac, 0.15);
    EXPECT_EQ(c.split.test_frac, 0.15);
    EXPECT_EQ(c.lambda, 1e-4);
    EXPECT_EQ(c.batch_size, 16u);
}

TEST(Config, FormatIsAFixedPoint) {
    auto c = trainer::parse_config("seed=3\nstage=vit+mask\nlambda=0.001\ninit_checkpoint=a.ckpt\naugment=geometric\n");
    const auto text = trainer::format_config(c);
    EXPECT_EQ(trainer::format_config(trainer::parse_config(text)), text);
    EXPECT_NE(text.find("lambda=0.001\n"), std::string::npos);
    EXPECT_NE(text.find("augment=geometric\n"), std::string::npos);
}

TEST(Config, Errors) {
    EXPECT_THROW(trainer::parse_config("colour=blue\n"), ConfigError);
    EXPECT_THROW(trainer::parse_config("lr=fast\n"), ConfigError);
    EXPECT_THROW(trainer::parse_config("epochs=3.5\n"), ConfigError);
    EXPECT_THROW(trainer::parse_config("just words\n"), ConfigError);
    EXPECT_THROW(trainer::parse_config("gan.widths=1,2,3\n"), ConfigError);

    trainer::ExperimentConfig no_seed;
    try {
        no_seed.validate();
        FAIL() << "missing seed accepted";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos);
    }
    auto c = trainer::parse_config("seed=1\nepochs=5\nwarmup=5\n");
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(trainer::parse_config("seed=1\nstage=vit+mask\n").validate(), ConfigError);
    EXPECT_THROW(trainer::parse_config("seed=1\nstage=ganomaly\ngan.variant=kl+mask\n").validate(), ConfigError);
}

TEST(RunLog, FormatsNanAndExtras) {
    trainer::RunLog log;
    trainer::EpochRecord r;
    r.epoch = 0;
    r.lr = 0.5;
    r.train_loss = 1;
    r.train_acc = std::nan("");
    r.val_loss = 2;
    r.val_acc = 0.25;
    r.extra["val_acc:a"] = 1;
    log.epochs.push_back(r);
    EXPECT_EQ(log.format(), "epoch\tlr\ttrain_loss\ttrain_acc\tval_loss\tval_acc\tval_acc:a\n0\t0.5\t1\tnan\t2\t0.25\t1\n");
}

class ShapesCorpus : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("trainer_corpus");
        manifest_ = new datasets::Manifest(datasets::generate_shapes_dataset(
            {.n_healthy = 40, .n_anomalous = 40, .side = 64, .seed = 5}, dir_->path()));
    }
    static void TearDownTestSuite() {
        delete manifest_;
        delete dir_;
    }
    static TempDir* dir_;
    static datasets::Manifest* manifest_;
};
TempDir* ShapesCorpus::dir_ = nullptr;
datasets::Manifest* ShapesCorpus::manifest_ = nullptr;

TEST_F(ShapesCorpus, LearningRateTraceFollowsSchedule) {
    auto cfg = toy_config(4, 1e-3);
    const auto r = trainer::train_stage(cfg, *manifest_);
    ASSERT_EQ(r.log.epochs.size(), 4u);
    for (int e = 0; e < 4; ++e) {
        EXPECT_EQ(r.log.epochs[std::size_t(e)].epoch, e);
        EXPECT_EQ(r.log.epochs[std::size_t(e)].lr, optim::lr_at(e, cfg.schedule()));
    }
    EXPECT_EQ(r.train_count, 56u);
    EXPECT_EQ(r.val_count, 12u);
    EXPECT_EQ(r.log.epochs[0].extra.count("val_acc:shapes"), 1u);
}

TEST_F(ShapesCorpus, SameSeedSameCheckpoint) {
    const auto cfg = toy_config(2, 1e-3);
    const auto a = trainer::train_stage(cfg, *manifest_);
    const auto b = trainer::train_stage(cfg, *manifest_);
    EXPECT_EQ(io::checksum(a.final_checkpoint), io::checksum(b.final_checkpoint));
    EXPECT_EQ(a.log.format(), b.log.format());
    auto other = cfg;
    other.seed = 8;
    EXPECT_NE(io::checksum(trainer::train_stage(other, *manifest_).final_checkpoint),
              io::checksum(a.final_checkpoint));
}

TEST_F(ShapesCorpus, ResumeMatchesUninterrupted) {
    TempDir tmp("trainer_resume");
    auto cfg = toy_config(5, 1e-3);
    const auto straight = trainer::train_stage(cfg, *manifest_);
    const int best_epoch = std::stoi(straight.best_checkpoint.get("epoch"));
    ASSERT_LT(best_epoch, 4);
    io::write_checkpoint(tmp.path() / "mid.ckpt", straight.best_checkpoint);

    cfg.resume = (tmp.path() / "mid.ckpt").string();
    const auto resumed = trainer::train_stage(cfg, *manifest_);
    ASSERT_EQ(resumed.log.epochs.size(), std::size_t(4 - best_epoch));
    EXPECT_EQ(resumed.log.epochs.front().epoch, best_epoch + 1);
    EXPECT_EQ(io::checksum(resumed.final_checkpoint), io::checksum(straight.final_checkpoint));
    EXPECT_EQ(resumed.log.epochs.back().train_loss, straight.log.epochs.back().train_loss);
}

TEST_F(ShapesCorpus, TrainLossDropsOnShapes) {
    auto cfg = toy_config(30, 1e-3);
    cfg.warmup = 5;
    cfg.batch_size = 16;
    const auto r = trainer::train_stage(cfg, *manifest_);
    const double initial = r.log.epochs.front().train_loss, final = r.log.epochs.back().train_loss;
    EXPECT_LT(final, 0.3 * initial) << initial << " -> " << final;
}

TEST_F(ShapesCorpus, MemorisesTenImages) {
    std::vector<std::size_t> pick{0, 1, 2, 3, 4, 40, 41, 42, 43, 44};
    datasets::Manifest ten = *manifest_;
    ten.records.clear();
    for (auto i : pick) ten.records.push_back(manifest_->records[i]);
    auto cfg = toy_config(150, 1e-3);
    cfg.batch_size = 10;
    const auto r = trainer::train_stage(cfg, datasets::Split{ten, {}, {}});
    const auto ev = trainer::evaluate(r.final_checkpoint, ten);
    ASSERT_TRUE(ev.report);
    EXPECT_EQ(ev.report->accuracy, 1.0);
    EXPECT_EQ(ev.report->cm.total(), 10u);
}

TEST_F(ShapesCorpus, PerDatasetSupportsSumToPooled) {
    auto m = *manifest_;
    for (std::size_t i = 0; i < m.records.size(); ++i) m.records[i].dataset = i % 3 ? "A" : "B";
    const auto r = trainer::train_stage(toy_config(2, 1e-3), datasets::Split{only(m, 60), {}, {}});
    const auto ev = trainer::evaluate(r.final_checkpoint, m);
    ASSERT_TRUE(ev.report);
    ASSERT_EQ(ev.report->per_dataset.size(), 2u);
    for (std::size_t c = 0; c < 2; ++c) {
        std::uint64_t parts = 0;
        for (const auto& d : ev.report->per_dataset) parts += d.cm.row_sum(c);
        EXPECT_EQ(parts, ev.report->cm.row_sum(c));
    }
    EXPECT_NE(ev.text.find("dataset.A.accuracy"), std::string::npos);
    EXPECT_TRUE(ev.auc.has_value());
}

TEST_F(ShapesCorpus, EvaluateRejectsEmptySplit) {
    const auto r = trainer::train_stage(toy_config(2, 1e-3), datasets::Split{only(*manifest_, 16), {}, {}});
    datasets::Manifest empty = *manifest_;
    empty.records.clear();
    EXPECT_THROW(trainer::evaluate(r.final_checkpoint, empty), DataError);
}

TEST_F(ShapesCorpus, MaskStageNeedsClassifierCheckpoint) {
    TempDir tmp("trainer_mask");
    auto vit_cfg = toy_config(2, 1e-3);
    const auto base = trainer::train_stage(vit_cfg, *manifest_);
    io::write_checkpoint(tmp.path() / "vit.ckpt", base.final_checkpoint);

    auto cfg = toy_config(2, 1e-5);
    cfg.stage = trainer::Stage::vit_mask;
    cfg.mask_width = 4;
    cfg.init_checkpoint = (tmp.path() / "missing.ckpt").string();
    EXPECT_THROW(trainer::train_stage(cfg, *manifest_), DataError);

    cfg.init_checkpoint = (tmp.path() / "vit.ckpt").string();
    const auto r = trainer::train_stage(cfg, *manifest_);
    EXPECT_EQ(r.final_checkpoint.get("stage"), "vit+mask");
    EXPECT_TRUE(r.final_checkpoint.find("mask.output.conv.bias"));
    EXPECT_EQ(r.log.epochs.back().extra.count("train_mask_l1"), 1u);
    const auto ev = trainer::evaluate(r.final_checkpoint, *manifest_, trainer::SplitName::test);
    EXPECT_EQ(ev.report->cm.total(), 12u);

    // the mask stage itself cannot seed another mask stage
    io::write_checkpoint(tmp.path() / "mask.ckpt", r.final_checkpoint);
    cfg.init_checkpoint = (tmp.path() / "mask.ckpt").string();
    EXPECT_THROW(trainer::train_stage(cfg, *manifest_), ConfigError);
}

TEST_F(ShapesCorpus, GanomalyUsesNormalRecordsOnly) {
    auto m = *manifest_;
    m.classes = {"Normal", "Lesion", "DR"};
    m.records[40].label = "DR";
    m.records[41].label = "DR";
    m.records[42].label = "DR";
    auto cfg = toy_config(1, 2e-4);
    cfg.warmup = 0;
    cfg.stage = trainer::Stage::ganomaly;
    cfg.gan.widths = {4, 8, 8, 8};
    cfg.gan.latent_dim = 8;
    const auto split = trainer::prepare_split(cfg, m);
    std::size_t non_normal = 0;
    for (const auto* part : {&split.train, &split.val})
        for (const auto& r : part->records) non_normal += r.label != "Normal";
    const auto r = trainer::train_stage(cfg, m);
    EXPECT_EQ(r.excluded_non_normal, non_normal);
    EXPECT_EQ(r.train_count, 28u);
    EXPECT_EQ(r.final_checkpoint.get("excluded_non_normal"), std::to_string(non_normal));

    const auto ev = trainer::evaluate(r.final_checkpoint, m, trainer::SplitName::test);
    EXPECT_TRUE(ev.auc.has_value());
    EXPECT_EQ(ev.scores.size(), split.test.records.size());
    EXPECT_NE(ev.text.find("score_mean.Normal"), std::string::npos);
}

TEST_F(ShapesCorpus, KlMaskNeedsMaskCheckpointOfMatchingSide) {
    TempDir tmp("trainer_klmask");
    auto cfg = toy_config(1, 2e-4);
    cfg.warmup = 0;
    cfg.stage = trainer::Stage::ganomaly;
    cfg.gan.variant = ganomaly::Variant::kl_mask;
    cfg.gan.widths = {4, 8, 8, 8};
    cfg.gan.latent_dim = 8;
    cfg.mask_checkpoint = (tmp.path() / "none.ckpt").string();
    EXPECT_THROW(trainer::train_stage(cfg, *manifest_), DataError);

    const auto vit = trainer::train_stage(toy_config(2, 1e-3), *manifest_);
    io::write_checkpoint(tmp.path() / "vit.ckpt", vit.final_checkpoint);
    cfg.mask_checkpoint = (tmp.path() / "vit.ckpt").string();
    EXPECT_THROW(trainer::train_stage(cfg, *manifest_), ConfigError);

    auto mcfg = toy_config(2, 1e-5);
    mcfg.stage = trainer::Stage::vit_mask;
    mcfg.mask_width = 4;
    mcfg.init_checkpoint = (tmp.path() / "vit.ckpt").string();
    io::write_checkpoint(tmp.path() / "mask.ckpt", trainer::train_stage(mcfg, *manifest_).final_checkpoint);
    cfg.mask_checkpoint = (tmp.path() / "mask.ckpt").string();
    const auto r = trainer::train_stage(cfg, *manifest_);
    EXPECT_GT(r.log.epochs[0].extra.at("train_mask"), 0.0);
}

TEST_F(ShapesCorpus, WritesRunOutputs) {
    TempDir tmp("trainer_outputs");
    const auto r = trainer::train_stage(toy_config(2, 1e-3), *manifest_);
    trainer::write_outputs(tmp.path() / "run", r);
    for (const char* f : {"final.ckpt", "best.ckpt", "runlog.tsv", "config.txt"})
        EXPECT_TRUE(fs::exists(tmp.path() / "run" / f)) << f;
    const auto back = io::read_checkpoint(tmp.path() / "run" / "final.ckpt");
    EXPECT_EQ(io::checksum(back), io::checksum(r.final_checkpoint));
    EXPECT_EQ(trainer::config_from_checkpoint(back).seed, 7u);
}
