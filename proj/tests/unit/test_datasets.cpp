#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "fundus/datasets.hpp"
#include "fundus/error.hpp"

using namespace fundus;
namespace ds = fundus::datasets;
namespace fs = std::filesystem;

namespace {

ds::Manifest synthetic(const std::map<std::pair<std::string, std::string>, int>& strata) {
    ds::Manifest m;
    int id = 0;
    for (const auto& [key, n] : strata)
        for (int i = 0; i < n; ++i) m.records.push_back({"img" + std::to_string(id++) + ".png", key.first, key.second});
    return m;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("fundus_ds_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(Split, SingleStratumOfHundred) {
    auto s = ds::stratified_split(synthetic({{{"Normal", "A"}, 100}}), {.seed = 1});
    EXPECT_EQ(s.train.records.size(), 70u);
    EXPECT_EQ(s.val.records.size(), 15u);
    EXPECT_EQ(s.test.records.size(), 15u);
}

TEST(Split, ProportionsHoldPerStratum) {
    auto m = synthetic({{{"Normal", "A"}, 20}, {{"DR", "B"}, 20}});
    auto s = ds::stratified_split(m, {.seed = 2});
    for (const std::string label : {"Normal", "DR"}) {
        auto count = [&](const ds::Manifest& part) {
            return std::count_if(part.records.begin(), part.records.end(),
                                 [&](const ds::Record& r) { return r.label == label; });
        };
        EXPECT_EQ(count(s.train), 14);
        EXPECT_EQ(count(s.val), 3);
        EXPECT_EQ(count(s.test), 3);
    }
}

TEST(Split, DisjointExhaustiveDeterministic) {
    auto m = synthetic({{{"Normal", "A"}, 37}, {{"Normal", "B"}, 11}, {{"DR", "A"}, 23}, {{"AMD", "B"}, 5}});
    auto a = ds::stratified_split(m, {.seed = 7});
    auto b = ds::stratified_split(m, {.seed = 7});
    auto c = ds::stratified_split(m, {.seed = 8});
    std::multiset<std::string> all;
    for (const auto* part : {&a.train, &a.val, &a.test})
        for (const auto& r : part->records) all.insert(r.path);
    EXPECT_EQ(all.size(), m.records.size());
    EXPECT_EQ(std::set<std::string>(all.begin(), all.end()).size(), m.records.size());
    EXPECT_EQ(ds::format_manifest(a.val), ds::format_manifest(b.val));
    EXPECT_EQ(ds::format_manifest(a.test), ds::format_manifest(b.test));
    EXPECT_NE(ds::format_manifest(a.val) + ds::format_manifest(a.test),
              ds::format_manifest(c.val) + ds::format_manifest(c.test));
}

TEST(Split, LabelOnlyStratification) {
    auto m = synthetic({{{"Normal", "A"}, 10}, {{"Normal", "B"}, 10}});
    auto s = ds::stratified_split(m, {.seed = 3, .stratify_by = ds::StratifyBy::label});
    EXPECT_EQ(s.val.records.size(), 3u);
    EXPECT_EQ(s.test.records.size(), 3u);
}

TEST(Split, Errors) {
    EXPECT_THROW(ds::stratified_split(synthetic({{{"Normal", "A"}, 2}}), {}), DataError);
    EXPECT_THROW(ds::stratified_split(synthetic({{{"Normal", "A"}, 10}}), {.val_frac = 0.6, .test_frac = 0.4}),
                 ConfigError);
    EXPECT_THROW(ds::stratified_split(synthetic({{{"Normal", "A"}, 10}}), {.val_frac = 0.0}), ConfigError);
}

TEST(Quality, FivesStyleManifest) {
    auto m = synthetic({{{"Normal", "FIVES"}, 200}, {{"DR", "FIVES"}, 200}, {{"Glaucoma", "FIVES"}, 200},
                        {{"AMD", "FIVES"}, 200}});
    for (std::size_t i = 0; i < 208; ++i) m.records[(i * 389) % 800].quality_ok = false;
    ds::QualityReport rep;
    auto kept = ds::filter_quality(m, &rep);
    EXPECT_EQ(kept.records.size(), 592u);
    EXPECT_EQ(rep.kept, 592u);
    EXPECT_EQ(rep.removed, 208u);
}

TEST(Quality, TrivialCases) {
    auto m = synthetic({{{"Normal", "A"}, 5}});
    EXPECT_EQ(ds::format_manifest(ds::filter_quality(m)), ds::format_manifest(m));
    EXPECT_TRUE(ds::filter_quality(ds::Manifest{}).records.empty());
}

TEST(Manifest, RoundTripAndVocabulary) {
    auto dir = scratch("manifest");
    ds::Manifest m;
    m.classes = {"Normal", "Lesion"};
    m.records = {{"a.png", "Normal", "shapes", true, ""}, {"b.png", "Lesion", "shapes", false, "b_mask.png"}};
    ds::write_manifest(dir / "m.tsv", m);
    auto r = ds::read_manifest(dir / "m.tsv");
    EXPECT_EQ(r.classes, m.classes);
    ASSERT_EQ(r.records.size(), 2u);
    EXPECT_FALSE(r.records[1].quality_ok);
    EXPECT_EQ(r.records[1].lesion_mask, "b_mask.png");
    EXPECT_EQ(r.resolve("a.png"), dir / "a.png");
    EXPECT_EQ(r.class_index("Lesion"), 1);
    fs::remove_all(dir);
}

TEST(Manifest, RejectsBadInput) {
    auto dir = scratch("badmanifest");
    auto write = [&](const std::string& text) {
        std::ofstream(dir / "m.tsv") << text;
        return dir / "m.tsv";
    };
    EXPECT_THROW(ds::read_manifest(write("path\tlabel\tdataset\tquality_ok\na.png\tCat\tX\t1\n")), DataError);
    EXPECT_THROW(ds::read_manifest(write("path\tlabel\tdataset\tquality_ok\na.png\tDR\tX\t1\na.png\tDR\tX\t1\n")),
                 DataError);
    EXPECT_THROW(ds::read_manifest(write("path\tlabel\tdataset\tquality_ok\na.png\tDR\tX\tmaybe\n")), DataError);
    EXPECT_THROW(ds::read_manifest(write("a.png\tDR\tX\t1\n")), DataError);
    EXPECT_THROW(ds::read_manifest(dir / "missing.tsv"), DataError);
    auto ok = ds::read_manifest(write("# classes: Cat,Dog\npath\tlabel\tdataset\tquality_ok\na.png\tDog\tX\ttrue\n"));
    EXPECT_EQ(ok.class_index("Dog"), 1);
    fs::remove_all(dir);
}

TEST(Shapes, MasksAndClassContrast) {
    auto samples = ds::generate_shapes({.n_healthy = 50, .n_anomalous = 50, .side = 64, .seed = 3});
    double mean_h = 0, mean_a = 0;
    for (const auto& s : samples) {
        const double m = std::accumulate(s.image.data.begin(), s.image.data.end(), 0.0) / double(s.image.data.size());
        (s.anomalous ? mean_a : mean_h) += m / 50;
        const double area = std::accumulate(s.lesion_mask.begin(), s.lesion_mask.end(), 0.0);
        if (s.anomalous) EXPECT_GT(area, 0.0);
        else EXPECT_EQ(area, 0.0);
        for (float v : s.image.data) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    }
    EXPECT_GT(mean_a, mean_h);
}

TEST(Shapes, SeededAndOrderIndependent) {
    auto a = ds::generate_shapes({.n_healthy = 4, .n_anomalous = 2, .side = 32, .seed = 11});
    auto b = ds::generate_shapes({.n_healthy = 4, .n_anomalous = 2, .side = 32, .seed = 11});
    auto c = ds::generate_shapes({.n_healthy = 6, .n_anomalous = 0, .side = 32, .seed = 11});
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].image, b[i].image);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a[i].image, c[i].image);
    EXPECT_THROW(ds::generate_shapes({.n_healthy = 1, .side = 16}), DomainError);
}

TEST(Shapes, DatasetOnDisk) {
    auto dir = scratch("shapes");
    auto m = ds::generate_shapes_dataset({.n_healthy = 3, .n_anomalous = 2, .side = 32, .seed = 5}, dir);
    auto r = ds::read_manifest(dir / "manifest.tsv");
    EXPECT_EQ(r.classes, (std::vector<std::string>{"Normal", "Lesion"}));
    ASSERT_EQ(r.records.size(), 5u);
    auto images = ds::load_images(r, 32);
    auto direct = ds::generate_shapes({.n_healthy = 3, .n_anomalous = 2, .side = 32, .seed = 5});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t k = 0; k < images[i].data.size(); ++k)
            ASSERT_NEAR(images[i].data[k], direct[i].image.data[k], 0.5 / 255 + 1e-6);
    auto mask = ds::load_lesion_mask(r, r.records[4], 32);
    EXPECT_EQ(mask, direct[4].lesion_mask);
    EXPECT_TRUE(ds::load_lesion_mask(r, r.records[0], 32).empty());

    auto single = ds::generate_shapes_dataset({.n_healthy = 3, .n_anomalous = 0, .side = 32, .seed = 5}, dir / "h");
    EXPECT_EQ(single.classes.size(), 1u);
    fs::remove_all(dir);
}

TEST(Scan, ClassFolders) {
    auto dir = scratch("scan");
    fs::create_directories(dir / "DR");
    fs::create_directories(dir / "Normal");
    imaging::write_png(dir / "DR" / "x.png", imaging::Image(4, 4, 0.5f));
    imaging::write_png(dir / "Normal" / "y.png", imaging::Image(4, 4, 0.5f));
    std::ofstream(dir / "Normal" / "notes.txt") << "skip";
    auto m = ds::scan_directory(dir);
    EXPECT_EQ(m.classes, (std::vector<std::string>{"DR", "Normal"}));
    ASSERT_EQ(m.records.size(), 2u);
    EXPECT_EQ(m.records[1].path, "Normal/y.png");
    EXPECT_EQ(m.records[0].dataset, "fundus_ds_scan");
    fs::remove_all(dir);
}
