#include "fundus/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "fundus/error.hpp"

namespace fundus::datasets {

const std::vector<std::string>& default_classes() {
    static const std::vector<std::string> c{"Normal", "DR", "Glaucoma", "AMD", "MS", "RP", "DE"};
    return c;
}

int Manifest::class_index(const std::string& label) const {
    auto it = std::find(classes.begin(), classes.end(), label);
    if (it == classes.end()) throw DataError("label '" + label + "' not in class vocabulary");
    return int(it - classes.begin());
}

fs::path Manifest::resolve(const std::string& path) const {
    fs::path p(path);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

void Manifest::validate() const {
    std::set<std::string> seen;
    for (const auto& r : records) {
        class_index(r.label);
        if (!seen.insert(r.path).second) throw DataError("duplicate manifest path " + r.path);
    }
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(trim(cur));
    return out;
}

bool parse_bool(const std::string& v, const std::string& where) {
    if (v == "1" || v == "true" || v == "True" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "False" || v == "no") return false;
    throw DataError(where + ": quality_ok must be 1/0 or true/false, got '" + v + "'");
}

}  // namespace

Manifest read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    Manifest m;
    m.base_dir = path.parent_path();
    std::string line;
    bool header = true;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        if (line[0] == '#') {
            const std::string body = trim(line.substr(1));
            if (body.rfind("classes:", 0) == 0) {
                m.classes = split(trim(body.substr(8)), ',');
                std::erase_if(m.classes, [](const std::string& c) { return c.empty(); });
                if (m.classes.empty()) throw DataError(where + ": empty class list");
            }
            continue;
        }
        auto cols = split(line, '\t');
        if (header) {
            header = false;
            if (cols.size() < 4 || cols[0] != "path" || cols[1] != "label")
                throw DataError(where + ": expected header 'path\tlabel\tdataset\tquality_ok'");
            continue;
        }
        if (cols.size() < 4 || cols.size() > 5)
            throw DataError(where + ": expected 4 or 5 tab-separated columns");
        Record r{cols[0], cols[1], cols[2], parse_bool(cols[3], where), cols.size() == 5 ? cols[4] : ""};
        if (r.path.empty()) throw DataError(where + ": empty path");
        m.records.push_back(std::move(r));
    }
    m.validate();
    return m;
}

std::string format_manifest(const Manifest& m) {
    std::ostringstream os;
    os << "# classes: ";
    for (std::size_t i = 0; i < m.classes.size(); ++i) os << (i ? "," : "") << m.classes[i];
    os << "\npath\tlabel\tdataset\tquality_ok\tlesion_mask\n";
    for (const auto& r : m.records)
        os << r.path << '\t' << r.label << '\t' << r.dataset << '\t' << (r.quality_ok ? 1 : 0) << '\t'
           << r.lesion_mask << '\n';
    return os.str();
}

void write_manifest(const fs::path& path, const Manifest& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write manifest " + path.string());
    out << format_manifest(m);
}

Manifest filter_quality(const Manifest& m, QualityReport* report) {
    Manifest out = m;
    out.records.clear();
    for (const auto& r : m.records)
        if (r.quality_ok) out.records.push_back(r);
    if (report) *report = {out.records.size(), m.records.size() - out.records.size()};
    return out;
}

Manifest filter_label(const Manifest& m, const std::string& label, std::size_t* removed) {
    Manifest out = m;
    out.records.clear();
    for (const auto& r : m.records)
        if (r.label == label) out.records.push_back(r);
    if (removed) *removed = m.records.size() - out.records.size();
    return out;
}

void SplitSpec::validate() const {
    if (!(val_frac > 0 && val_frac < 1 && test_frac > 0 && test_frac < 1 && val_frac + test_frac < 1))
        throw ConfigError("split fractions must lie in (0,1) with val + test < 1");
}

Split stratified_split(const Manifest& m, const SplitSpec& spec) {
    spec.validate();
    std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        strata[{r.label, spec.stratify_by == StratifyBy::label_dataset ? r.dataset : ""}].push_back(i);
    }
    std::vector<int> part(m.records.size(), 0);  // 0 train, 1 val, 2 test
    std::mt19937_64 rng(spec.seed);
    for (auto& [key, idx] : strata) {
        if (idx.size() < 3)
            throw DataError("stratum (" + key.first + (key.second.empty() ? "" : ", " + key.second) +
                            ") has " + std::to_string(idx.size()) + " records; at least 3 required");
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto n_val = std::size_t(std::floor(double(idx.size()) * spec.val_frac + 1e-9));
        const auto n_test = std::size_t(std::floor(double(idx.size()) * spec.test_frac + 1e-9));
        for (std::size_t j = 0; j < n_val; ++j) part[idx[j]] = 1;
        for (std::size_t j = n_val; j < n_val + n_test; ++j) part[idx[j]] = 2;
    }
    Split s{m, m, m};
    s.train.records.clear();
    s.val.records.clear();
    s.test.records.clear();
    for (std::size_t i = 0; i < m.records.size(); ++i)
        (part[i] == 0 ? s.train : part[i] == 1 ? s.val : s.test).records.push_back(m.records[i]);
    return s;
}

Manifest scan_directory(const fs::path& root) {
    if (!fs::is_directory(root)) throw DataError("not a directory: " + root.string());
    Manifest m;
    m.base_dir = root;
    m.classes.clear();
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    const std::string tag = fs::absolute(root).lexically_normal().filename().string();
    for (const auto& d : dirs) {
        const std::string label = d.filename().string();
        m.classes.push_back(label);
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(d)) {
            if (!e.is_regular_file()) continue;
            auto ext = e.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
            if (ext == ".png" || ext == ".ppm") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
            m.records.push_back({fs::relative(f, root).generic_string(), label, tag, true, ""});
    }
    if (m.classes.empty()) throw DataError("no class folders under " + root.string());
    return m;
}

// ---- synthetic shapes ------------------------------------------------------

namespace {

double smoothstep(double e0, double e1, double x) {
    const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3 - 2 * t);
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    const double t = len2 > 0 ? std::clamp(((px - ax) * vx + (py - ay) * vy) / len2, 0.0, 1.0) : 0.0;
    return std::hypot(px - ax - t * vx, py - ay - t * vy);
}

}  // namespace

ShapesSample render_shape(std::size_t side, bool anomalous, std::mt19937_64& rng) {
    if (side < 32) throw DomainError("shapes side must be at least 32");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto U = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
    const double S = double(side);

    const double cx = S / 2 + U(-0.03, 0.03) * S, cy = S / 2 + U(-0.03, 0.03) * S;
    const double R = 0.44 * S * U(0.95, 1.05);
    const double gain = U(0.85, 1.1);
    const double base[3] = {0.78 * gain, 0.36 * gain, 0.18 * gain};

    const double od_side = u(rng) < 0.5 ? -1.0 : 1.0;
    const double od_x = cx + od_side * 0.55 * R, od_y = cy + U(-0.1, 0.1) * R;
    const double od_r = 0.13 * R * U(0.9, 1.1);

    struct Vessel {
        std::vector<std::pair<double, double>> pts;
        double width;
    };
    std::vector<Vessel> vessels;
    const int n_vessels = 4 + int(u(rng) * 3);
    for (int v = 0; v < n_vessels; ++v) {
        Vessel ves;
        ves.width = S * U(0.012, 0.02);
        double phi = (od_side > 0 ? std::numbers::pi : 0.0) + U(-1.3, 1.3);
        const double bend = U(-1.2, 1.2);
        const double len = R * U(0.9, 1.4);
        double x = od_x, y = od_y;
        ves.pts.push_back({x, y});
        for (int k = 1; k <= 16; ++k) {
            phi += bend / 16;
            x += std::cos(phi) * len / 16;
            y += std::sin(phi) * len / 16;
            ves.pts.push_back({x, y});
        }
        vessels.push_back(std::move(ves));
    }

    struct Blob {
        double x, y, r;
    };
    std::vector<Blob> blobs;
    if (anomalous) {
        const int n_blobs = 1 + int(u(rng) * 3);
        while (int(blobs.size()) < n_blobs) {
            const double a = U(0, 2 * std::numbers::pi), rr = 0.7 * R * std::sqrt(u(rng));
            const Blob b{cx + rr * std::cos(a), cy + rr * std::sin(a), S * U(0.06, 0.11)};
            if (std::hypot(b.x - od_x, b.y - od_y) < od_r + b.r) continue;
            blobs.push_back(b);
        }
    }

    ShapesSample s;
    s.anomalous = anomalous;
    s.image = imaging::Image(side, side);
    s.lesion_mask.assign(side * side, 0.0f);
    std::normal_distribution<double> noise(0.0, 0.01);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const double px = double(x) + 0.5, py = double(y) + 0.5;
            const double r = std::hypot(px - cx, py - cy);
            const double inside = 1.0 - smoothstep(R - 1.0, R + 1.0, r);
            double col[3];
            const double shade = 1.0 - 0.35 * (r / R) * (r / R);
            for (int c = 0; c < 3; ++c) col[c] = base[c] * shade;

            const double od = 1.0 - smoothstep(od_r - 1.0, od_r + 1.0, std::hypot(px - od_x, py - od_y));
            const double od_col[3] = {0.97, 0.86, 0.55};
            for (int c = 0; c < 3; ++c) col[c] = col[c] * (1 - 0.9 * od) + od_col[c] * 0.9 * od;

            double dark = 0;
            for (const auto& v : vessels) {
                double d = 1e9;
                for (std::size_t k = 1; k < v.pts.size(); ++k)
                    d = std::min(d, segment_distance(px, py, v.pts[k - 1].first, v.pts[k - 1].second,
                                                     v.pts[k].first, v.pts[k].second));
                dark = std::max(dark, 1.0 - smoothstep(v.width * 0.5, v.width * 0.5 + 1.0, d));
            }
            for (int c = 0; c < 3; ++c) col[c] *= 1.0 - 0.5 * dark * (1 - od);

            double lesion = 0;
            for (const auto& b : blobs)
                lesion = std::max(lesion, 1.0 - smoothstep(b.r * 0.7, b.r, std::hypot(px - b.x, py - b.y)));
            const double les_col[3] = {1.0, 0.95, 0.72};
            for (int c = 0; c < 3; ++c) col[c] = col[c] * (1 - 0.9 * lesion) + les_col[c] * 0.9 * lesion;
            if (lesion > 0.5) s.lesion_mask[y * side + x] = 1.0f;

            for (int c = 0; c < 3; ++c)
                s.image.at(c, y, x) = float(std::clamp(col[c] * inside + noise(rng) * inside, 0.0, 1.0));
        }
    return s;
}

std::vector<ShapesSample> generate_shapes(const ShapesOptions& opt) {
    std::vector<ShapesSample> out;
    out.reserve(opt.n_healthy + opt.n_anomalous);
    for (std::size_t i = 0; i < opt.n_healthy + opt.n_anomalous; ++i) {
        std::mt19937_64 rng(imaging::stream_seed(opt.seed, i));
        out.push_back(render_shape(opt.side, i >= opt.n_healthy, rng));
    }
    return out;
}

Manifest generate_shapes_dataset(const ShapesOptions& opt, const fs::path& out_dir) {
    fs::create_directories(out_dir / "images");
    Manifest m;
    m.base_dir = out_dir;
    m.classes = opt.n_anomalous > 0 ? std::vector<std::string>{"Normal", "Lesion"}
                                    : std::vector<std::string>{"Normal"};
    const auto samples = generate_shapes(opt);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        char name[64];
        const std::size_t k = s.anomalous ? i - opt.n_healthy : i;
        std::snprintf(name, sizeof name, "%s_%04zu", s.anomalous ? "lesion" : "healthy", k);
        Record r{std::string("images/") + name + ".png", s.anomalous ? "Lesion" : "Normal", opt.dataset_tag,
                 true, ""};
        imaging::write_png(out_dir / r.path, s.image);
        if (s.anomalous) {
            r.lesion_mask = std::string("images/") + name + "_mask.png";
            imaging::write_gray_png(out_dir / r.lesion_mask, s.lesion_mask, opt.side, opt.side);
        }
        m.records.push_back(std::move(r));
    }
    write_manifest(out_dir / "manifest.tsv", m);
    return m;
}

std::vector<imaging::Image> load_images(const Manifest& m, std::size_t side) {
    std::vector<imaging::Image> out;
    out.reserve(m.records.size());
    for (const auto& r : m.records) out.push_back(imaging::standardize(imaging::read_image(m.resolve(r.path)), side));
    return out;
}

std::vector<float> load_lesion_mask(const Manifest& m, const Record& r, std::size_t side) {
    if (r.lesion_mask.empty()) return {};
    std::size_t h = 0, w = 0;
    const auto raw = imaging::read_gray_png(m.resolve(r.lesion_mask), h, w);
    std::vector<float> out(side * side);
    for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
            const std::size_t sy = std::min(h - 1, y * h / side), sx = std::min(w - 1, x * w / side);
            out[y * side + x] = raw[sy * w + sx] > 0.5f ? 1.0f : 0.0f;
        }
    return out;
}

}  // namespace fundus::datasets
