#include "fundus/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

namespace fundus::imaging {

namespace {

float clamp01(double v) { return float(std::clamp(v, 0.0, 1.0)); }
std::uint8_t to_byte(float v) { return std::uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

struct PngImage {
    png_image im{};
    PngImage() { im.version = PNG_IMAGE_VERSION; }
    ~PngImage() { png_image_free(&im); }
};

}  // namespace

Image read_png(const std::filesystem::path& path) {
    PngImage p;
    if (!png_image_begin_read_from_file(&p.im, path.c_str()))
        throw DataError("cannot read PNG " + path.string() + ": " + p.im.message);
    if (!(p.im.format & PNG_FORMAT_FLAG_COLOR))
        throw DataError("not an RGB image: " + path.string());
    p.im.format = PNG_FORMAT_RGBA;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(p.im));
    if (!png_image_finish_read(&p.im, nullptr, buf.data(), 0, nullptr))
        throw DataError("cannot decode PNG " + path.string() + ": " + p.im.message);
    Image img(p.im.height, p.im.width);
    const std::size_t n = img.plane();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) img.data[c * n + i] = float(buf[4 * i + c]) / 255.0f;
    return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
    const std::size_t n = img.plane();
    std::vector<png_byte> buf(3 * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) buf[3 * i + c] = to_byte(img.data[c * n + i]);
    PngImage p;
    p.im.width = png_uint_32(img.width);
    p.im.height = png_uint_32(img.height);
    p.im.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&p.im, path.c_str(), 0, buf.data(), 0, nullptr))
        throw DataError("cannot write PNG " + path.string() + ": " + p.im.message);
}

void write_gray_png(const std::filesystem::path& path, std::span<const float> values,
                    std::size_t height, std::size_t width) {
    if (values.size() != height * width) throw ShapeError("gray map size mismatch");
    std::vector<png_byte> buf(values.size());
    std::transform(values.begin(), values.end(), buf.begin(), to_byte);
    PngImage p;
    p.im.width = png_uint_32(width);
    p.im.height = png_uint_32(height);
    p.im.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&p.im, path.c_str(), 0, buf.data(), 0, nullptr))
        throw DataError("cannot write PNG " + path.string() + ": " + p.im.message);
}

std::vector<float> read_gray_png(const std::filesystem::path& path, std::size_t& height,
                                 std::size_t& width) {
    PngImage p;
    if (!png_image_begin_read_from_file(&p.im, path.c_str()))
        throw DataError("cannot read PNG " + path.string() + ": " + p.im.message);
    p.im.format = PNG_FORMAT_GRAY;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(p.im));
    if (!png_image_finish_read(&p.im, nullptr, buf.data(), 0, nullptr))
        throw DataError("cannot decode PNG " + path.string() + ": " + p.im.message);
    height = p.im.height;
    width = p.im.width;
    std::vector<float> out(buf.size());
    std::transform(buf.begin(), buf.end(), out.begin(), [](png_byte b) { return float(b) / 255.0f; });
    return out;
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(char(ch));
    }
    return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    const std::string magic = ppm_token(in);
    if (magic == "P5") throw DataError("not an RGB image: " + path.string());
    if (magic != "P6") throw DataError("unsupported PPM variant in " + path.string());
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(ppm_token(in));
        h = std::stoul(ppm_token(in));
        maxval = std::stoul(ppm_token(in));
    } catch (const std::exception&) {
        throw DataError("malformed PPM header in " + path.string());
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 65535)
        throw DataError("malformed PPM header in " + path.string());
    const std::size_t bps = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(3 * w * h * bps);
    if (!in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size())))
        throw DataError("truncated PPM " + path.string());
    Image img(h, w);
    const std::size_t n = img.plane();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            const std::size_t k = 3 * i + c;
            const double v = bps == 1 ? buf[k] : (buf[2 * k] << 8 | buf[2 * k + 1]);
            img.data[c * n + i] = float(v / double(maxval));
        }
    return img;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    const std::size_t n = img.plane();
    std::vector<unsigned char> buf(3 * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) buf[3 * i + c] = to_byte(img.data[c * n + i]);
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
}

Image read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (in.gcount() >= 8 && static_cast<unsigned char>(magic[0]) == 0x89 && magic[1] == 'P' &&
        magic[2] == 'N' && magic[3] == 'G')
        return read_png(path);
    if (in.gcount() >= 2 && magic[0] == 'P') return read_ppm(path);
    throw DataError("unrecognised image format: " + path.string());
}

// ---- standardisation -------------------------------------------------------

Image center_crop_square(const Image& img) {
    const std::size_t s = std::min(img.height, img.width);
    const std::size_t y0 = (img.height - s) / 2, x0 = (img.width - s) / 2;
    Image out(s, s);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    return out;
}

Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
    if (img.height == 0 || img.width == 0 || out_h == 0 || out_w == 0)
        throw ShapeError("resize of empty image");
    if (out_h == img.height && out_w == img.width) return img;
    Image out(out_h, out_w);
    const double sy = double(img.height) / double(out_h), sx = double(img.width) / double(out_w);
    std::vector<std::size_t> x0(out_w), x1(out_w);
    std::vector<double> fx(out_w);
    for (std::size_t x = 0; x < out_w; ++x) {
        const double s = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(img.width - 1));
        x0[x] = std::size_t(s);
        x1[x] = std::min(x0[x] + 1, img.width - 1);
        fx[x] = s - double(x0[x]);
    }
    for (std::size_t y = 0; y < out_h; ++y) {
        const double s = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(img.height - 1));
        const std::size_t y0 = std::size_t(s), y1 = std::min(y0 + 1, img.height - 1);
        const double fy = s - double(y0);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t x = 0; x < out_w; ++x) {
                const double top = img.at(c, y0, x0[x]) * (1 - fx[x]) + img.at(c, y0, x1[x]) * fx[x];
                const double bot = img.at(c, y1, x0[x]) * (1 - fx[x]) + img.at(c, y1, x1[x]) * fx[x];
                out.at(c, y, x) = float(top * (1 - fy) + bot * fy);
            }
    }
    return out;
}

Image standardize(const Image& img, std::size_t side) {
    return resize_bilinear(center_crop_square(img), side, side);
}

ImageSample load_and_standardize(const std::filesystem::path& path, std::size_t side) {
    ImageSample s;
    s.pixels = standardize(read_image(path), side);
    return s;
}

// ---- augmentation ----------------------------------------------------------

Stage parse_stage(const std::string& name) {
    if (name == "none") return Stage::none;
    if (name == "geometric") return Stage::geometric;
    if (name == "color" || name == "geometric+color") return Stage::geometric_color;
    if (name == "hist_eq") return Stage::hist_eq;
    if (name == "laplace") return Stage::laplace;
    throw ConfigError("unknown augmentation stage '" + name + "'");
}

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::none: return "none";
        case Stage::geometric: return "geometric";
        case Stage::geometric_color: return "color";
        case Stage::hist_eq: return "hist_eq";
        case Stage::laplace: return "laplace";
    }
    return "none";
}

void AugmentationPolicy::validate() const {
    if (!(translation_frac >= 0 && translation_frac <= 1))
        throw ConfigError("translation_frac must lie in [0,1]");
    if (rotation_min_deg > rotation_max_deg || brightness_min > brightness_max ||
        contrast_min > contrast_max || blur_sigma_min > blur_sigma_max)
        throw ConfigError("augmentation range with min > max");
    if (blur_sigma_min < 0 || brightness_min < 0 || contrast_min < 0)
        throw ConfigError("augmentation factors must be non-negative");
    if (!(flip_prob >= 0 && flip_prob <= 1)) throw ConfigError("flip_prob must lie in [0,1]");
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>{lo, hi}(rng);
}

}  // namespace

GeometricParams sample_geometric(std::mt19937_64& rng, const AugmentationPolicy& p, std::size_t side) {
    GeometricParams g;
    g.flip = std::bernoulli_distribution{p.flip_prob}(rng);
    g.theta_deg = uniform(rng, p.rotation_min_deg, p.rotation_max_deg);
    const double t = p.translation_frac * double(side);
    g.dx = uniform(rng, -t, t);
    g.dy = uniform(rng, -t, t);
    return g;
}

ColorParams sample_color(std::mt19937_64& rng, const AugmentationPolicy& p) {
    ColorParams c;
    c.brightness = uniform(rng, p.brightness_min, p.brightness_max);
    c.contrast = uniform(rng, p.contrast_min, p.contrast_max);
    c.sigma = uniform(rng, p.blur_sigma_min, p.blur_sigma_max);
    return c;
}

Image apply_geometric(const Image& img, const GeometricParams& g, Interp interp) {
    const std::size_t H = img.height, W = img.width;
    Image out(H, W, 0.0f);
    const double cx = (double(W) - 1) / 2, cy = (double(H) - 1) / 2;
    const double th = g.theta_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            // Invert translate, then rotate (y axis points down, so a
            // displayed counter-clockwise turn is clockwise in (x,y)).
            const double u = double(x) - g.dx - cx, v = double(y) - g.dy - cy;
            double sx = cs * u - sn * v + cx;
            const double sy = sn * u + cs * v + cy;
            if (g.flip) sx = double(W) - 1 - sx;
            if (interp == Interp::nearest) {
                const long ix = std::lround(sx), iy = std::lround(sy);
                if (ix < 0 || iy < 0 || ix >= long(W) || iy >= long(H)) continue;
                for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = img.at(c, iy, ix);
                continue;
            }
            constexpr double tol = 1e-9;
            if (sx < -tol || sy < -tol || sx > double(W) - 1 + tol || sy > double(H) - 1 + tol) continue;
            const double csx = std::clamp(sx, 0.0, double(W) - 1), csy = std::clamp(sy, 0.0, double(H) - 1);
            const std::size_t x0 = std::size_t(csx), y0 = std::size_t(csy);
            const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
            const double fx = csx - double(x0), fy = csy - double(y0);
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
                const double bot = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
                out.at(c, y, x) = float(top * (1 - fy) + bot * fy);
            }
        }
    return out;
}

std::vector<double> gaussian_kernel(double sigma) {
    if (sigma <= 0) return {1.0};
    const int r = int(std::ceil(3 * sigma));
    std::vector<double> k(2 * r + 1);
    double s = 0;
    for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-double(i * i) / (2 * sigma * sigma));
    for (auto& v : k) v /= s;
    return k;
}

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0) return img;
    const auto k = gaussian_kernel(sigma);
    const long r = long(k.size() / 2);
    const long H = long(img.height), W = long(img.width);
    Image tmp(img.height, img.width), out(img.height, img.width);
    for (std::size_t c = 0; c < 3; ++c) {
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W; ++x) {
                double acc = 0;
                for (long i = -r; i <= r; ++i) acc += k[i + r] * img.at(c, y, std::clamp(x + i, 0L, W - 1));
                tmp.at(c, y, x) = float(acc);
            }
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W; ++x) {
                double acc = 0;
                for (long i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(c, std::clamp(y + i, 0L, H - 1), x);
                out.at(c, y, x) = float(acc);
            }
    }
    return out;
}

Image apply_color(const Image& img, const ColorParams& c) {
    Image out = img;
    if (c.brightness != 1.0 || c.contrast != 1.0) {
        double mean = 0;
        for (float v : img.data) mean += v;
        mean = mean * c.brightness / double(img.data.size());
        for (auto& v : out.data) v = float((double(v) * c.brightness - mean) * c.contrast + mean);
    }
    out = gaussian_blur(out, c.sigma);
    for (auto& v : out.data) v = clamp01(v);
    return out;
}

Image augment_geometric(const Image& img, std::mt19937_64& rng, const AugmentationPolicy& p) {
    return apply_geometric(img, sample_geometric(rng, p, img.width), p.interp);
}

Image augment_color(const Image& img, std::mt19937_64& rng, const AugmentationPolicy& p) {
    return apply_color(img, sample_color(rng, p));
}

Image hist_equalize(const Image& img) {
    Image out = img;
    const std::size_t n = img.plane();
    if (n == 0) return out;
    for (std::size_t c = 0; c < 3; ++c) {
        std::array<std::size_t, 256> hist{};
        auto bin = [](float v) { return std::min<std::size_t>(255, std::size_t(std::max(0.0f, v) * 256.0f)); };
        for (std::size_t i = 0; i < n; ++i) ++hist[bin(img.data[c * n + i])];
        std::array<float, 256> cdf{};
        std::size_t run = 0;
        for (std::size_t b = 0; b < 256; ++b) {
            run += hist[b];
            cdf[b] = float(double(run) / double(n));
        }
        for (std::size_t i = 0; i < n; ++i) out.data[c * n + i] = cdf[bin(img.data[c * n + i])];
    }
    return out;
}

Image laplace_enhance(const Image& img, double strength) {
    Image out(img.height, img.width);
    const long H = long(img.height), W = long(img.width);
    for (std::size_t c = 0; c < 3; ++c)
        for (long y = 0; y < H; ++y)
            for (long x = 0; x < W; ++x) {
                const double v = img.at(c, y, x);
                const double lap = double(img.at(c, std::max(y - 1, 0L), x)) +
                                   img.at(c, std::min(y + 1, H - 1), x) +
                                   img.at(c, y, std::max(x - 1, 0L)) +
                                   img.at(c, y, std::min(x + 1, W - 1)) - 4 * v;
                out.at(c, y, x) = clamp01(v - strength * lap);
            }
    return out;
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t epoch) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return mix(mix(mix(seed) ^ index) ^ epoch);
}

Image augment(const Image& img, const AugmentationPolicy& p, std::uint64_t index, std::uint64_t epoch) {
    if (p.stage == Stage::none) return img;
    std::mt19937_64 rng(stream_seed(p.seed, index, epoch));
    Image out = augment_geometric(img, rng, p);
    if (p.stage == Stage::geometric) return out;
    out = augment_color(out, rng, p);
    if (p.stage == Stage::hist_eq) out = hist_equalize(out);
    if (p.stage == Stage::laplace) out = laplace_enhance(out, p.laplace_strength);
    return out;
}

// ---- conversions -----------------------------------------------------------

template <typename T>
ad::Tensor<T> to_tensor(std::span<const Image> images) {
    if (images.empty()) throw ShapeError("to_tensor of an empty batch");
    const std::size_t H = images[0].height, W = images[0].width;
    std::vector<T> v;
    v.reserve(images.size() * 3 * H * W);
    for (const auto& img : images) {
        if (img.height != H || img.width != W) throw ShapeError("batch images differ in size");
        v.insert(v.end(), img.data.begin(), img.data.end());
    }
    return ad::Tensor<T>::from({images.size(), 3, H, W}, std::move(v));
}

template <typename T>
Image from_tensor(const ad::Tensor<T>& batch, std::size_t b) {
    if (batch.rank() != 4 || batch.dim(1) != 3 || b >= batch.dim(0))
        throw ShapeError("from_tensor expects [B,3,H,W]");
    Image img(batch.dim(2), batch.dim(3));
    const auto src = batch.data().subspan(b * img.data.size(), img.data.size());
    std::transform(src.begin(), src.end(), img.data.begin(), [](T v) { return float(v); });
    return img;
}

template ad::Tensor<float> to_tensor<float>(std::span<const Image>);
template ad::Tensor<double> to_tensor<double>(std::span<const Image>);
template Image from_tensor<float>(const ad::Tensor<float>&, std::size_t);
template Image from_tensor<double>(const ad::Tensor<double>&, std::size_t);

Image hconcat(std::span<const Image> images) {
    if (images.empty()) throw ShapeError("hconcat of no images");
    const std::size_t H = images[0].height;
    std::size_t W = 0;
    for (const auto& im : images) {
        if (im.height != H) throw ShapeError("hconcat images differ in height");
        W += im.width;
    }
    Image out(H, W);
    std::size_t x0 = 0;
    for (const auto& im : images) {
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < H; ++y)
                std::copy_n(&im.data[(c * H + y) * im.width], im.width, &out.at(c, y, x0));
        x0 += im.width;
    }
    return out;
}

Image gray_to_rgb(std::span<const float> values, std::size_t height, std::size_t width) {
    if (values.size() != height * width) throw ShapeError("gray map size mismatch");
    Image out(height, width);
    for (std::size_t c = 0; c < 3; ++c)
        std::transform(values.begin(), values.end(), out.data.begin() + long(c * values.size()), clamp01);
    return out;
}

}  // namespace fundus::imaging
