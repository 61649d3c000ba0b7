#include "fundus/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "fundus/error.hpp"

namespace fundus::trainer {

Stage parse_stage(const std::string& name) {
    if (name == "vit") return Stage::vit;
    if (name == "vit+mask" || name == "vit_mask") return Stage::vit_mask;
    if (name == "ganomaly") return Stage::ganomaly;
    throw ConfigError("unknown stage '" + name + "' (vit, vit+mask, ganomaly)");
}

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::vit: return "vit";
        case Stage::vit_mask: return "vit+mask";
        case Stage::ganomaly: return "ganomaly";
    }
    return "?";
}

SplitName parse_split_name(const std::string& name) {
    if (name == "train") return SplitName::train;
    if (name == "val") return SplitName::val;
    if (name == "test") return SplitName::test;
    if (name == "all") return SplitName::all;
    throw ConfigError("unknown split '" + name + "' (train, val, test, all)");
}

// ---- configuration ---------------------------------------------------------

int ExperimentConfig::total_epochs() const { return epochs.value_or(stage == Stage::ganomaly ? 100 : 30); }

double ExperimentConfig::adam_beta1() const { return beta1.value_or(stage == Stage::ganomaly ? 0.5 : 0.9); }

optim::ScheduleConfig ExperimentConfig::schedule() const { return {lr, total_epochs(), warmup}; }

optim::ScheduleConfig ExperimentConfig::mask_schedule() const { return {mask_lr, total_epochs(), warmup}; }

vit::ViTConfig ExperimentConfig::vit_config(std::size_t n_classes) const {
    if (preset == "toy") return vit::ViTConfig::toy(n_classes);
    if (preset == "b16") return vit::ViTConfig::b16(n_classes);
    throw ConfigError("unknown preset '" + preset + "' (toy, b16)");
}

void ExperimentConfig::validate() const {
    if (!seed) throw ConfigError("missing required setting 'seed'");
    auto check = [](auto&& f) {
        try {
            f();
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
    };
    check([&] { schedule().validate(); });
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (preset != "toy" && preset != "b16") throw ConfigError("unknown preset '" + preset + "' (toy, b16)");
    check([&] { augmentation.validate(); });
    if (stage == Stage::vit_mask) {
        if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative");
        check([&] { mask_schedule().validate(); });
        if (init_checkpoint.empty()) throw ConfigError("stage vit+mask needs init_checkpoint (a vit checkpoint)");
    }
    if (stage == Stage::ganomaly) {
        check([&] { gan.validate(); });
        if (gan.variant == ganomaly::Variant::kl_mask && mask_checkpoint.empty())
            throw ConfigError("variant kl+mask needs mask_checkpoint (a vit+mask checkpoint)");
    }
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& value) {
    N out{};
    const auto* end = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError("bad value '" + value + "' for " + key);
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw ConfigError("bad boolean '" + v + "' for " + key);
}

std::string num(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

std::string score_mode_name(ganomaly::ScoreMode m) { return m == ganomaly::ScoreMode::latent ? "latent" : "blended"; }

}  // namespace

void set_key(ExperimentConfig& c, const std::string& key, const std::string& v) {
    auto dbl = [&] { return parse_number<double>(key, v); };
    auto u64 = [&] { return parse_number<std::uint64_t>(key, v); };
    auto i32 = [&] { return parse_number<int>(key, v); };
    if (key == "stage") c.stage = parse_stage(v);
    else if (key == "preset") c.preset = v;
    else if (key == "augment") c.augmentation.stage = imaging::parse_stage(v);
    else if (key == "epochs") c.epochs = i32();
    else if (key == "lr") c.lr = dbl();
    else if (key == "warmup") c.warmup = i32();
    else if (key == "batch_size") c.batch_size = std::size_t(u64());
    else if (key == "seed") c.seed = u64();
    else if (key == "val_frac") c.split.val_frac = dbl();
    else if (key == "test_frac") c.split.test_frac = dbl();
    else if (key == "stratify") {
        if (v == "label") c.split.stratify_by = datasets::StratifyBy::label;
        else if (v == "label_dataset") c.split.stratify_by = datasets::StratifyBy::label_dataset;
        else throw ConfigError("bad value '" + v + "' for stratify (label, label_dataset)");
    } else if (key == "quality_filter") c.quality_filter = parse_bool(key, v);
    else if (key == "beta1") c.beta1 = dbl();
    else if (key == "lambda") c.lambda = dbl();
    else if (key == "mask_lr") c.mask_lr = dbl();
    else if (key == "mask_width") c.mask_width = std::size_t(u64());
    else if (key == "init_checkpoint") c.init_checkpoint = v;
    else if (key == "gan.variant") c.gan.variant = ganomaly::parse_variant(v);
    else if (key == "gan.side") c.gan.image_side = std::size_t(u64());
    else if (key == "gan.latent") c.gan.latent_dim = std::size_t(u64());
    else if (key == "gan.widths") {
        std::istringstream in(v);
        std::string part;
        std::size_t i = 0;
        while (std::getline(in, part, ',')) {
            if (i == 4) throw ConfigError("gan.widths needs exactly 4 values");
            c.gan.widths[i++] = std::size_t(parse_number<std::uint64_t>(key, trim(part)));
        }
        if (i != 4) throw ConfigError("gan.widths needs exactly 4 values");
    } else if (key == "gan.w_rec") c.gan.weights.rec = dbl();
    else if (key == "gan.w_adv") c.gan.weights.adv = dbl();
    else if (key == "gan.w_lat") c.gan.weights.lat = dbl();
    else if (key == "gan.w_kl") c.gan.weights.kl = dbl();
    else if (key == "gan.w_mask") c.gan.weights.mask = dbl();
    else if (key == "gan.score") c.gan.score_mode = ganomaly::parse_score_mode(v);
    else if (key == "mask_checkpoint") c.mask_checkpoint = v;
    else if (key == "resume") c.resume = v;
    else if (key == "output_dir") c.output_dir = v;
    else throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        set_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return base;
}

ExperimentConfig read_config(const fs::path& path, ExperimentConfig base) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

std::string format_config(const ExperimentConfig& c) {
    std::ostringstream os;
    auto kv = [&](const std::string& k, const std::string& v) { os << k << '=' << v << '\n'; };
    kv("stage", stage_name(c.stage));
    kv("preset", c.preset);
    kv("augment", imaging::stage_name(c.augmentation.stage));
    kv("epochs", std::to_string(c.total_epochs()));
    kv("lr", num(c.lr));
    kv("warmup", std::to_string(c.warmup));
    kv("batch_size", std::to_string(c.batch_size));
    if (c.seed) kv("seed", std::to_string(*c.seed));
    kv("val_frac", num(c.split.val_frac));
    kv("test_frac", num(c.split.test_frac));
    kv("stratify", c.split.stratify_by == datasets::StratifyBy::label ? "label" : "label_dataset");
    kv("quality_filter", c.quality_filter ? "true" : "false");
    kv("beta1", num(c.adam_beta1()));
    kv("lambda", num(c.lambda));
    kv("mask_lr", num(c.mask_lr));
    kv("mask_width", std::to_string(c.mask_width));
    kv("init_checkpoint", c.init_checkpoint);
    kv("gan.variant", ganomaly::variant_name(c.gan.variant));
    kv("gan.side", std::to_string(c.gan.image_side));
    kv("gan.latent", std::to_string(c.gan.latent_dim));
    kv("gan.widths", std::to_string(c.gan.widths[0]) + "," + std::to_string(c.gan.widths[1]) + "," +
                         std::to_string(c.gan.widths[2]) + "," + std::to_string(c.gan.widths[3]));
    kv("gan.w_rec", num(c.gan.weights.rec));
    kv("gan.w_adv", num(c.gan.weights.adv));
    kv("gan.w_lat", num(c.gan.weights.lat));
    kv("gan.w_kl", num(c.gan.weights.kl));
    kv("gan.w_mask", num(c.gan.weights.mask));
    kv("gan.score", score_mode_name(c.gan.score_mode));
    kv("mask_checkpoint", c.mask_checkpoint);
    kv("resume", c.resume);
    kv("output_dir", c.output_dir);
    return os.str();
}

// ---- run log ---------------------------------------------------------------

std::string RunLog::format() const {
    std::ostringstream os;
    os.precision(9);
    std::vector<std::string> extra;
    if (!epochs.empty())
        for (const auto& [k, v] : epochs.front().extra) extra.push_back(k);
    os << "epoch\tlr\ttrain_loss\ttrain_acc\tval_loss\tval_acc";
    for (const auto& k : extra) os << '\t' << k;
    os << '\n';
    auto cell = [&](double v) {
        if (std::isnan(v)) os << "\tnan";
        else os << '\t' << v;
    };
    for (const auto& e : epochs) {
        os << e.epoch;
        cell(e.lr);
        cell(e.train_loss);
        cell(e.train_acc);
        cell(e.val_loss);
        cell(e.val_acc);
        for (const auto& k : extra) {
            const auto it = e.extra.find(k);
            cell(it == e.extra.end() ? std::nan("") : it->second);
        }
        os << '\n';
    }
    return os.str();
}

// ---- data ------------------------------------------------------------------

datasets::Split prepare_split(const ExperimentConfig& cfg, const datasets::Manifest& manifest,
                              std::size_t* excluded_quality) {
    if (!cfg.seed) throw ConfigError("missing required setting 'seed'");
    datasets::QualityReport q;
    const auto kept = cfg.quality_filter ? datasets::filter_quality(manifest, &q) : manifest;
    if (excluded_quality) *excluded_quality = q.removed;
    auto spec = cfg.split;
    spec.seed = *cfg.seed;
    return datasets::stratified_split(kept, spec);
}

namespace {

constexpr float kNaN = std::numeric_limits<float>::quiet_NaN();
constexpr std::size_t kEvalBatch = 32;

struct LabelledSet {
    std::vector<imaging::Image> images;
    std::vector<int> labels;
    std::vector<std::string> tags;
};

LabelledSet load_set(const datasets::Manifest& m, const std::vector<std::string>& classes, std::size_t side,
                     bool need_labels) {
    LabelledSet s;
    s.images = datasets::load_images(m, side);
    for (const auto& r : m.records) {
        int label = -1;
        if (need_labels) {
            const auto it = std::find(classes.begin(), classes.end(), r.label);
            if (it == classes.end()) throw DataError("label '" + r.label + "' is not a model class");
            label = int(it - classes.begin());
        }
        s.labels.push_back(label);
        s.tags.push_back(r.dataset);
    }
    return s;
}

ad::Tensor<float> make_batch(const LabelledSet& set, const std::vector<std::size_t>& idx,
                             const imaging::AugmentationPolicy* aug, std::uint64_t epoch) {
    std::vector<imaging::Image> images;
    images.reserve(idx.size());
    for (auto i : idx)
        images.push_back(aug && aug->stage != imaging::Stage::none ? imaging::augment(set.images[i], *aug, i, epoch)
                                                                  : set.images[i]);
    return imaging::to_tensor<float>(images);
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch, std::mt19937_64* shuffle) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) std::shuffle(order.begin(), order.end(), *shuffle);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch)
        out.emplace_back(order.begin() + long(s), order.begin() + long(std::min(n, s + batch)));
    return out;
}

std::vector<int> pick(const std::vector<int>& v, const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    for (auto i : idx) out.push_back(v[i]);
    return out;
}

std::size_t correct(const ad::Tensor<float>& logits, const std::vector<int>& labels, std::vector<int>* preds = nullptr) {
    const std::size_t c = logits.dim(1);
    std::size_t hits = 0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        const auto row = logits.data().subspan(b * c, c);
        const int p = int(std::max_element(row.begin(), row.end()) - row.begin());
        if (preds) preds->push_back(p);
        hits += p == labels[b];
    }
    return hits;
}

std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string part;
    while (std::getline(in, part, ',')) out.push_back(part);
    return out;
}

io::Checkpoint base_checkpoint(const ExperimentConfig& cfg, const std::vector<std::string>& classes, int epoch) {
    io::Checkpoint ck;
    ck.header["format"] = "fundus";
    ck.header["stage"] = stage_name(cfg.stage);
    ck.header["classes"] = join(classes);
    ck.header["epoch"] = std::to_string(epoch);
    std::istringstream in(format_config(cfg));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        const auto key = line.substr(0, eq);
        if (key == "init_checkpoint" || key == "mask_checkpoint" || key == "resume" || key == "output_dir") continue;
        ck.header["config." + key] = line.substr(eq + 1);
    }
    return ck;
}

void require_stage(const io::Checkpoint& ck, Stage expect, const std::string& what) {
    if (ck.get("stage") != stage_name(expect))
        throw ConfigError(what + " must be a " + stage_name(expect) + " checkpoint, got " + ck.get("stage"));
}

struct ResumePoint {
    int start_epoch = 0;
    std::optional<io::Checkpoint> ckpt;
};

ResumePoint resume_point(const ExperimentConfig& cfg) {
    ResumePoint r;
    if (cfg.resume.empty()) return r;
    r.ckpt = io::read_checkpoint(cfg.resume);
    require_stage(*r.ckpt, cfg.stage, "resume");
    r.start_epoch = std::stoi(r.ckpt->get("epoch")) + 1;
    return r;
}

std::map<std::string, std::size_t> tag_counts(const std::vector<std::string>& tags) {
    std::map<std::string, std::size_t> m;
    for (const auto& t : tags) ++m[t];
    return m;
}

TrainResult train_classifier(const ExperimentConfig& cfg, const datasets::Split& split) {
    const bool with_mask = cfg.stage == Stage::vit_mask;
    const auto& classes = split.train.classes;
    const auto vcfg = cfg.vit_config(classes.size());
    const std::uint64_t seed = *cfg.seed;

    vit::ViT<float> clf(vcfg, imaging::stream_seed(seed, 1));
    std::optional<unet::MaskUNet<float>> masker;
    if (with_mask) {
        const auto init = io::read_checkpoint(cfg.init_checkpoint);
        require_stage(init, Stage::vit, "init_checkpoint");
        if (classes_from_checkpoint(init) != classes)
            throw ConfigError("init_checkpoint classes differ from the manifest classes");
        io::load_params(init, "clf.", clf.params());
        masker.emplace(unet::UNetConfig{cfg.mask_width, vcfg.image_side}, imaging::stream_seed(seed, 2));
    }
    const optim::AdamOptions adam_opt{cfg.adam_beta1(), 0.999, 1e-8};
    optim::Adam<float> adam_clf(clf.params(), adam_opt);
    std::optional<optim::Adam<float>> adam_mask;
    if (with_mask) adam_mask.emplace(masker->params(), adam_opt);

    const auto rp = resume_point(cfg);
    if (rp.ckpt) {
        io::load_params(*rp.ckpt, "clf.", clf.params());
        io::load_adam(*rp.ckpt, "clf", adam_clf, clf.params());
        if (with_mask) {
            io::load_params(*rp.ckpt, "mask.", masker->params());
            io::load_adam(*rp.ckpt, "mask", *adam_mask, masker->params());
        }
    }

    const auto train = load_set(split.train, classes, vcfg.image_side, true);
    const auto val = load_set(split.val, classes, vcfg.image_side, true);
    if (train.images.empty()) throw DataError("training split is empty");
    auto aug = cfg.augmentation;
    aug.seed = seed;

    auto snapshot = [&](int epoch) {
        auto ck = base_checkpoint(cfg, classes, epoch);
        io::store_params(ck, "clf.", clf.params());
        io::store_adam(ck, "clf", adam_clf, clf.params());
        if (with_mask) {
            io::store_params(ck, "mask.", masker->params());
            io::store_adam(ck, "mask", *adam_mask, masker->params());
        }
        return ck;
    };

    TrainResult result;
    result.train_count = train.images.size();
    result.val_count = val.images.size();
    double best_acc = -1;
    const auto val_tags = tag_counts(val.tags);
    for (int epoch = rp.start_epoch; epoch < cfg.total_epochs(); ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = optim::lr_at(epoch, cfg.schedule());
        const double mask_lr = with_mask ? optim::lr_at(epoch, cfg.mask_schedule()) : 0.0;
        std::mt19937_64 shuffle(imaging::stream_seed(seed, 3, std::uint64_t(epoch)));
        double loss_sum = 0, ce_sum = 0, l1_sum = 0;
        std::size_t hits = 0;
        for (const auto& idx : batches(train.images.size(), cfg.batch_size, &shuffle)) {
            const auto x = make_batch(train, idx, &aug, std::uint64_t(epoch));
            const auto y = pick(train.labels, idx);
            ad::Tensor<float> loss, logits;
            if (with_mask) {
                auto cl = unet::composite_loss(clf, *masker, x, y, cfg.lambda);
                loss = cl.total;
                logits = cl.logits;
                ce_sum += double(cl.ce.item()) * double(idx.size());
                l1_sum += double(cl.l1.item()) * double(idx.size());
            } else {
                logits = clf.forward(x);
                loss = vit::classification_loss(logits, y);
            }
            loss.backward();
            adam_clf.step(rec.lr);
            clf.params().zero_grad();
            if (with_mask) {
                adam_mask->step(mask_lr);
                masker->params().zero_grad();
            }
            loss_sum += double(loss.item()) * double(idx.size());
            hits += correct(logits, y);
        }
        const double n = double(train.images.size());
        rec.train_loss = loss_sum / n;
        rec.train_acc = double(hits) / n;
        if (with_mask) {
            rec.extra["train_ce"] = ce_sum / n;
            rec.extra["train_mask_l1"] = l1_sum / n;
            rec.extra["mask_lr"] = mask_lr;
        }

        rec.val_loss = rec.val_acc = kNaN;
        for (const auto& [tag, count] : val_tags) rec.extra["val_acc:" + tag] = 0;
        if (!val.images.empty()) {
            ad::NoGradGuard guard;
            double vloss = 0;
            std::size_t vhits = 0;
            std::map<std::string, std::size_t> tag_hits;
            for (const auto& idx : batches(val.images.size(), kEvalBatch, nullptr)) {
                const auto x = make_batch(val, idx, nullptr, 0);
                const auto y = pick(val.labels, idx);
                ad::Tensor<float> loss, logits;
                if (with_mask) {
                    auto cl = unet::composite_loss(clf, *masker, x, y, cfg.lambda);
                    loss = cl.total;
                    logits = cl.logits;
                } else {
                    logits = clf.forward(x);
                    loss = vit::classification_loss(logits, y);
                }
                vloss += double(loss.item()) * double(idx.size());
                std::vector<int> preds;
                vhits += correct(logits, y, &preds);
                for (std::size_t k = 0; k < idx.size(); ++k) tag_hits[val.tags[idx[k]]] += preds[k] == y[k];
            }
            rec.val_loss = vloss / double(val.images.size());
            rec.val_acc = double(vhits) / double(val.images.size());
            for (const auto& [tag, count] : val_tags) rec.extra["val_acc:" + tag] = double(tag_hits[tag]) / double(count);
        }
        result.log.epochs.push_back(rec);
        if (!val.images.empty() && rec.val_acc > best_acc) {
            best_acc = rec.val_acc;
            result.best_checkpoint = snapshot(epoch);
        }
    }
    result.final_checkpoint = snapshot(cfg.total_epochs() - 1);
    if (result.best_checkpoint.arrays.empty()) result.best_checkpoint = result.final_checkpoint;
    return result;
}

std::vector<float> compute_masks(const unet::MaskUNet<float>& masker, const std::vector<imaging::Image>& images) {
    ad::NoGradGuard guard;
    std::vector<float> out;
    for (std::size_t s = 0; s < images.size(); s += kEvalBatch) {
        const std::size_t n = std::min(kEvalBatch, images.size() - s);
        const auto m = masker.forward(imaging::to_tensor<float>(std::span(images).subspan(s, n)));
        out.insert(out.end(), m.data().begin(), m.data().end());
    }
    return out;
}

TrainResult train_ganomaly(const ExperimentConfig& cfg, const datasets::Split& split) {
    TrainResult result;
    std::size_t removed_train = 0, removed_val = 0;
    const auto train_m = datasets::filter_label(split.train, "Normal", &removed_train);
    const auto val_m = datasets::filter_label(split.val, "Normal", &removed_val);
    result.excluded_non_normal = removed_train + removed_val;
    const std::uint64_t seed = *cfg.seed;
    const auto& gcfg = cfg.gan;
    const std::size_t side = gcfg.image_side;

    const auto train = load_set(train_m, {}, side, false);
    const auto val = load_set(val_m, {}, side, false);
    if (train.images.empty()) throw DataError("no Normal records in the training split");

    std::vector<float> masks;
    if (gcfg.variant == ganomaly::Variant::kl_mask) {
        const auto mck = io::read_checkpoint(cfg.mask_checkpoint);
        require_stage(mck, Stage::vit_mask, "mask_checkpoint");
        const auto masker = load_masker(mck);
        if (masker.config().image_side != side)
            throw ConfigError("mask network side " + std::to_string(masker.config().image_side) +
                              " differs from gan.side " + std::to_string(side));
        masks = compute_masks(masker, train.images);
    }

    ganomaly::Generator<float> g(gcfg, imaging::stream_seed(seed, 4));
    ganomaly::Discriminator<float> d(gcfg, imaging::stream_seed(seed, 5));
    const optim::AdamOptions adam_opt{cfg.adam_beta1(), 0.999, 1e-8};
    optim::Adam<float> og(g.params(), adam_opt), od(d.params(), adam_opt);
    const auto rp = resume_point(cfg);
    if (rp.ckpt) {
        io::load_params(*rp.ckpt, "gen.", g.params());
        io::load_params(*rp.ckpt, "disc.", d.params());
        io::load_adam(*rp.ckpt, "gen", og, g.params());
        io::load_adam(*rp.ckpt, "disc", od, d.params());
    }
    auto aug = cfg.augmentation;
    aug.seed = seed;
    const auto classes = split.train.classes;

    result.train_count = train.images.size();
    result.val_count = val.images.size();
    for (int epoch = rp.start_epoch; epoch < cfg.total_epochs(); ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = optim::lr_at(epoch, cfg.schedule());
        std::mt19937_64 shuffle(imaging::stream_seed(seed, 3, std::uint64_t(epoch)));
        std::mt19937_64 noise(imaging::stream_seed(seed, 6, std::uint64_t(epoch)));
        ganomaly::StepStats<float> sum;
        for (const auto& idx : batches(train.images.size(), cfg.batch_size, &shuffle)) {
            const auto x = make_batch(train, idx, &aug, std::uint64_t(epoch));
            std::optional<ad::Tensor<float>> mb;
            if (!masks.empty()) {
                const std::size_t plane = side * side;
                std::vector<float> v;
                for (auto i : idx) v.insert(v.end(), masks.begin() + long(i * plane), masks.begin() + long((i + 1) * plane));
                mb = ad::Tensor<float>::from({idx.size(), 1, side, side}, std::move(v));
            }
            const auto st = ganomaly::train_step(g, d, og, od, x, mb ? &*mb : nullptr, noise, rec.lr);
            const double w = double(idx.size());
            sum.rec += st.rec * w;
            sum.adv += st.adv * w;
            sum.lat += st.lat * w;
            sum.kl += st.kl * w;
            sum.mask += st.mask * w;
            sum.total += st.total * w;
            sum.disc += st.disc * w;
        }
        const double n = double(train.images.size());
        rec.train_loss = sum.total / n;
        rec.train_acc = rec.val_acc = kNaN;
        rec.extra["train_rec"] = sum.rec / n;
        rec.extra["train_adv"] = sum.adv / n;
        rec.extra["train_lat"] = sum.lat / n;
        rec.extra["train_kl"] = sum.kl / n;
        rec.extra["train_mask"] = sum.mask / n;
        rec.extra["train_disc"] = sum.disc / n;
        rec.val_loss = kNaN;
        if (!val.images.empty()) {
            double s = 0;
            for (const auto& idx : batches(val.images.size(), kEvalBatch, nullptr))
                for (const auto& r : ganomaly::anomaly_score(g, make_batch(val, idx, nullptr, 0))) s += r.score;
            rec.val_loss = s / double(val.images.size());
        }
        result.log.epochs.push_back(rec);
    }
    auto ck = base_checkpoint(cfg, classes, cfg.total_epochs() - 1);
    io::store_params(ck, "gen.", g.params());
    io::store_params(ck, "disc.", d.params());
    io::store_adam(ck, "gen", og, g.params());
    io::store_adam(ck, "disc", od, d.params());
    ck.header["excluded_non_normal"] = std::to_string(result.excluded_non_normal);
    result.final_checkpoint = ck;
    result.best_checkpoint = ck;
    return result;
}

}  // namespace

TrainResult train_stage(const ExperimentConfig& cfg, const datasets::Split& split) {
    cfg.validate();
    return cfg.stage == Stage::ganomaly ? train_ganomaly(cfg, split) : train_classifier(cfg, split);
}

TrainResult train_stage(const ExperimentConfig& cfg, const datasets::Manifest& manifest) {
    cfg.validate();
    std::size_t removed = 0;
    const auto split = prepare_split(cfg, manifest, &removed);
    auto r = train_stage(cfg, split);
    r.excluded_quality = removed;
    return r;
}

void write_outputs(const fs::path& dir, const TrainResult& result) {
    fs::create_directories(dir);
    io::write_checkpoint(dir / "final.ckpt", result.final_checkpoint);
    io::write_checkpoint(dir / "best.ckpt", result.best_checkpoint);
    std::ofstream log(dir / "runlog.tsv");
    log << result.log.format();
    std::ofstream conf(dir / "config.txt");
    conf << format_config(config_from_checkpoint(result.final_checkpoint));
    if (!log || !conf) throw DataError("cannot write run outputs into " + dir.string());
}

// ---- checkpoints -> models -------------------------------------------------

ExperimentConfig config_from_checkpoint(const io::Checkpoint& ck) {
    ExperimentConfig cfg;
    for (const auto& [k, v] : ck.header)
        if (k.rfind("config.", 0) == 0) set_key(cfg, k.substr(7), v);
    return cfg;
}

std::vector<std::string> classes_from_checkpoint(const io::Checkpoint& ck) { return split_commas(ck.get("classes")); }

vit::ViT<float> load_classifier(const io::Checkpoint& ck) {
    if (ck.get("stage") == "ganomaly") throw ConfigError("checkpoint holds no classifier");
    const auto cfg = config_from_checkpoint(ck);
    vit::ViT<float> m(cfg.vit_config(classes_from_checkpoint(ck).size()), 0);
    io::load_params(ck, "clf.", m.params());
    return m;
}

unet::MaskUNet<float> load_masker(const io::Checkpoint& ck) {
    require_stage(ck, Stage::vit_mask, "mask source");
    const auto cfg = config_from_checkpoint(ck);
    unet::MaskUNet<float> m({cfg.mask_width, cfg.vit_config(2).image_side}, 0);
    io::load_params(ck, "mask.", m.params());
    return m;
}

ganomaly::Generator<float> load_generator(const io::Checkpoint& ck) {
    require_stage(ck, Stage::ganomaly, "detector source");
    ganomaly::Generator<float> g(config_from_checkpoint(ck).gan, 0);
    io::load_params(ck, "gen.", g.params());
    return g;
}

// ---- evaluation ------------------------------------------------------------

EvalResult evaluate(const io::Checkpoint& ck, const datasets::Manifest& records) {
    if (records.records.empty()) throw DataError("evaluation split is empty");
    const auto cfg = config_from_checkpoint(ck);
    const auto classes = classes_from_checkpoint(ck);
    EvalResult result;
    std::ostringstream text;
    text << std::fixed << std::setprecision(6);

    if (cfg.stage == Stage::ganomaly) {
        const auto g = load_generator(ck);
        const auto set = load_set(records, {}, cfg.gan.image_side, false);
        std::vector<double> scores;
        for (const auto& idx : batches(set.images.size(), kEvalBatch, nullptr))
            for (const auto& r : ganomaly::anomaly_score(g, make_batch(set, idx, nullptr, 0))) scores.push_back(r.score);
        std::map<std::string, std::vector<metrics::ScoredLabel>> by_tag;
        std::vector<metrics::ScoredLabel> pooled;
        std::map<std::string, std::vector<double>> by_label;
        std::size_t normal = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            const auto& r = records.records[i];
            const bool positive = r.label != "Normal";
            normal += !positive;
            pooled.push_back({scores[i], positive});
            by_tag[r.dataset].push_back({scores[i], positive});
            by_label[r.label].push_back(scores[i]);
            result.scores.push_back({r.path, r.label, scores[i]});
        }
        auto has_both = [](const std::vector<metrics::ScoredLabel>& v) {
            return std::any_of(v.begin(), v.end(), [](auto s) { return s.positive; }) &&
                   std::any_of(v.begin(), v.end(), [](auto s) { return !s.positive; });
        };
        text << "samples\t" << scores.size() << '\n';
        text << "normal\t" << normal << '\n';
        text << "anomalous\t" << scores.size() - normal << '\n';
        if (has_both(pooled)) {
            result.auc = metrics::auc(pooled);
            text << "auc\t" << *result.auc << '\n';
        }
        for (const auto& [tag, v] : by_tag) {
            text << "dataset." << tag << ".samples\t" << v.size() << '\n';
            if (has_both(v)) text << "dataset." << tag << ".auc\t" << metrics::auc(v) << '\n';
        }
        for (const auto& [label, v] : by_label)
            text << "score_mean." << label << '\t' << std::accumulate(v.begin(), v.end(), 0.0) / double(v.size())
                 << '\n';
        result.text = text.str();
        return result;
    }

    const auto clf = load_classifier(ck);
    std::optional<unet::MaskUNet<float>> masker;
    if (cfg.stage == Stage::vit_mask) masker.emplace(load_masker(ck));
    const auto set = load_set(records, classes, clf.config().image_side, true);
    std::map<std::string, metrics::ConfusionMatrix> cms;
    std::vector<metrics::ScoredLabel> pooled;
    ad::NoGradGuard guard;
    for (const auto& idx : batches(set.images.size(), kEvalBatch, nullptr)) {
        auto x = make_batch(set, idx, nullptr, 0);
        if (masker) x = unet::apply_mask(masker->forward(x), x);
        const auto logits = clf.forward(x);
        const auto probs = ad::softmax(logits, 1);
        std::vector<int> preds;
        const auto y = pick(set.labels, idx);
        correct(logits, y, &preds);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            auto& cm = cms.try_emplace(set.tags[idx[k]], classes.size()).first->second;
            cm.add(std::size_t(y[k]), std::size_t(preds[k]));
            const double p1 = classes.size() > 1 ? double(probs.data()[k * classes.size() + 1]) : 0.0;
            pooled.push_back({p1, y[k] == 1});
            const auto& r = records.records[idx[k]];
            result.scores.push_back({r.path, r.label, p1});
        }
    }
    std::optional<double> auc;
    if (classes.size() == 2) {
        const auto pos = std::count_if(pooled.begin(), pooled.end(), [](auto s) { return s.positive; });
        if (pos > 0 && std::size_t(pos) < pooled.size()) auc = metrics::auc(pooled);
    }
    std::vector<std::pair<std::string, metrics::ConfusionMatrix>> parts(cms.begin(), cms.end());
    result.report = metrics::make_report(classes, parts, auc);
    result.auc = auc;
    result.text = metrics::format_report(*result.report);
    return result;
}

EvalResult evaluate(const io::Checkpoint& ck, const datasets::Manifest& manifest, SplitName split) {
    const auto cfg = config_from_checkpoint(ck);
    if (split == SplitName::all)
        return evaluate(ck, cfg.quality_filter ? datasets::filter_quality(manifest) : manifest);
    const auto parts = prepare_split(cfg, manifest);
    return evaluate(ck, split == SplitName::train ? parts.train : split == SplitName::val ? parts.val : parts.test);
}

}  // namespace fundus::trainer
