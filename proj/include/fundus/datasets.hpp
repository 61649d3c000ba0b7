#pragma once

// Manifests, quality filtering, stratified splits and the synthetic shapes
// corpus.
//
// Manifest format (UTF-8, tab separated, one record per line):
//
//   # classes: Normal,Lesion          optional; sets the class vocabulary
//   path  label  dataset  quality_ok  [lesion_mask]
//   img/0001.png  Normal  shapes  1
//
// The first non-comment line is the column header. quality_ok is 1/0 or
// true/false. Relative paths resolve against the manifest's directory.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fundus/imaging.hpp"

namespace fundus::datasets {

namespace fs = std::filesystem;

/// Normal, DR, Glaucoma, AMD, MS, RP, DE
const std::vector<std::string>& default_classes();

struct Record {
    std::string path;
    std::string label;
    std::string dataset;
    bool quality_ok = true;
    std::string lesion_mask;  // optional
};

struct Manifest {
    std::vector<std::string> classes = default_classes();
    std::vector<Record> records;
    fs::path base_dir;

    /// Index of label in the vocabulary; throws DataError when absent.
    int class_index(const std::string& label) const;
    fs::path resolve(const std::string& path) const;
    /// Throws DataError on unknown labels or duplicate paths.
    void validate() const;
};

Manifest read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const Manifest& m);
std::string format_manifest(const Manifest& m);

struct QualityReport {
    std::size_t kept = 0;
    std::size_t removed = 0;
};
Manifest filter_quality(const Manifest& m, QualityReport* report = nullptr);

/// Keeps only records with the given label.
Manifest filter_label(const Manifest& m, const std::string& label, std::size_t* removed = nullptr);

enum class StratifyBy { label, label_dataset };

struct SplitSpec {
    double val_frac = 0.15;
    double test_frac = 0.15;
    std::uint64_t seed = 0;
    StratifyBy stratify_by = StratifyBy::label_dataset;

    void validate() const;
};

struct Split {
    Manifest train, val, test;
};

/// Per stratum: floor(n * frac) to val and test, the remainder to train.
/// Throws DataError for a stratum with fewer than 3 records.
Split stratified_split(const Manifest& m, const SplitSpec& spec);

/// Manifest of every PNG/PPM under root/<class>/; the class vocabulary is the
/// sorted set of folder names and the dataset tag is root's name.
Manifest scan_directory(const fs::path& root);

struct ShapesSample {
    imaging::Image image;
    std::vector<float> lesion_mask;  // side*side, 1 inside lesions
    bool anomalous = false;
};

/// One fundus-like image: a lit disk with an optic disc and dark vessels;
/// anomalous samples add bright blobs and their mask.
ShapesSample render_shape(std::size_t side, bool anomalous, std::mt19937_64& rng);

struct ShapesOptions {
    std::size_t n_healthy = 100;
    std::size_t n_anomalous = 100;
    std::size_t side = 64;
    std::uint64_t seed = 0;
    std::string dataset_tag = "shapes";
};

/// Labels Normal / Lesion. Sample i uses its own stream, so the corpus is
/// independent of generation order.
std::vector<ShapesSample> generate_shapes(const ShapesOptions& opt);

/// Writes images, lesion masks and manifest.tsv into out_dir and returns the
/// manifest.
Manifest generate_shapes_dataset(const ShapesOptions& opt, const fs::path& out_dir);

/// Loads and standardises every record's image.
std::vector<imaging::Image> load_images(const Manifest& m, std::size_t side);
/// Lesion mask of a record resized to side x side (nearest), or empty.
std::vector<float> load_lesion_mask(const Manifest& m, const Record& r, std::size_t side);

}  // namespace fundus::datasets
