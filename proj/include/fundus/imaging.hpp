#pragma once

// RGB images in [0,1], file I/O, standardisation and the augmentation stages.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fundus/tensor.hpp"

namespace fundus::imaging {

/// Planar RGB image, channel-major (3 x H x W), values in [0,1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> data;

    Image() = default;
    Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), data(3 * h * w, fill) {}

    std::size_t plane() const { return height * width; }
    float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const {
        return data[(c * height + y) * width + x];
    }
    bool operator==(const Image&) const = default;
};

struct ImageSample {
    Image pixels;
    int label = 0;
    std::string dataset_tag;
    bool quality_ok = true;
};

// ---- I/O -------------------------------------------------------------------

/// PNG (RGB, RGBA with alpha dropped, or palette) or binary PPM (P6). Throws
/// DataError for unreadable files and for grayscale images.
Image read_image(const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);
void write_ppm(const std::filesystem::path& path, const Image& img);
/// 8-bit grayscale PNG of a single-channel map in [0,1] (values clamped).
void write_gray_png(const std::filesystem::path& path, std::span<const float> values,
                    std::size_t height, std::size_t width);
/// Any PNG converted to one luminance channel in [0,1]; height/width set.
std::vector<float> read_gray_png(const std::filesystem::path& path, std::size_t& height,
                                 std::size_t& width);

// ---- standardisation -------------------------------------------------------

/// Centered square crop of the shorter side.
Image center_crop_square(const Image& img);
/// Bilinear resize with pixel-center alignment; edges clamp.
Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w);
/// Center crop then resize to side x side.
Image standardize(const Image& img, std::size_t side);
ImageSample load_and_standardize(const std::filesystem::path& path, std::size_t side = 224);

// ---- augmentation ----------------------------------------------------------

enum class Interp { bilinear, nearest };

enum class Stage { none, geometric, geometric_color, hist_eq, laplace };
Stage parse_stage(const std::string& name);
std::string stage_name(Stage s);

struct AugmentationPolicy {
    Stage stage = Stage::none;
    std::uint64_t seed = 0;
    double translation_frac = 0.10;
    double rotation_min_deg = 0.0;
    double rotation_max_deg = 360.0;
    double flip_prob = 0.5;
    double brightness_min = 0.8, brightness_max = 1.2;
    double contrast_min = 0.8, contrast_max = 1.2;
    double blur_sigma_min = 0.0, blur_sigma_max = 1.5;
    double laplace_strength = 1.0;
    Interp interp = Interp::bilinear;

    void validate() const;
};

struct GeometricParams {
    bool flip = false;
    double theta_deg = 0.0;
    double dx = 0.0;  // pixels
    double dy = 0.0;
};

struct ColorParams {
    double brightness = 1.0;
    double contrast = 1.0;
    double sigma = 0.0;
};

GeometricParams sample_geometric(std::mt19937_64& rng, const AugmentationPolicy& p, std::size_t side);
ColorParams sample_color(std::mt19937_64& rng, const AugmentationPolicy& p);

/// Flip, then rotate counter-clockwise (as displayed) by theta about the
/// image center, then translate. Uncovered pixels are 0.
Image apply_geometric(const Image& img, const GeometricParams& g, Interp interp = Interp::bilinear);
/// Brightness scale, contrast about the image mean, Gaussian blur, clamp.
Image apply_color(const Image& img, const ColorParams& c);

Image augment_geometric(const Image& img, std::mt19937_64& rng, const AugmentationPolicy& p = {});
Image augment_color(const Image& img, std::mt19937_64& rng, const AugmentationPolicy& p = {});

/// Normalised 1-D Gaussian taps for radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);
/// Separable Gaussian blur with replicate borders. sigma <= 0 is identity.
Image gaussian_blur(const Image& img, double sigma);

/// Per-channel 256-bin CDF remap.
Image hist_equalize(const Image& img);
/// img - strength * laplacian(img), replicate padding, clamped.
Image laplace_enhance(const Image& img, double strength = 1.0);

/// Seed of the independent stream for (seed, sample index, epoch).
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t epoch = 0);

/// The full stage pipeline for one sample, using its own RNG stream.
Image augment(const Image& img, const AugmentationPolicy& p, std::uint64_t index,
              std::uint64_t epoch = 0);

// ---- conversions -----------------------------------------------------------

/// Stack images of identical size into [B,3,H,W].
template <typename T>
ad::Tensor<T> to_tensor(std::span<const Image> images);
/// Sample b of a [B,3,H,W] tensor.
template <typename T>
Image from_tensor(const ad::Tensor<T>& batch, std::size_t b);

/// Side-by-side concatenation; all images must share the same height.
Image hconcat(std::span<const Image> images);
/// Single-channel map replicated to gray RGB.
Image gray_to_rgb(std::span<const float> values, std::size_t height, std::size_t width);

}  // namespace fundus::imaging
