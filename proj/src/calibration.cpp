#include "fundus/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "fundus/error.hpp"

namespace fundus::calibration {

Backend parse_backend(const std::string& name) {
    if (name == "kde") return Backend::kde;
    if (name == "histogram" || name == "hist") return Backend::histogram;
    throw ConfigError("unknown calibration backend '" + name + "'");
}

namespace {

double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const std::size_t i = std::size_t(pos);
    const double f = pos - double(i);
    return i + 1 < v.size() ? v[i] * (1 - f) + v[i + 1] * f : v[i];
}

double sample_sd(std::span<const double> xs) {
    const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
    double ss = 0;
    for (double x : xs) ss += (x - m) * (x - m);
    return xs.size() > 1 ? std::sqrt(ss / double(xs.size() - 1)) : 0.0;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace

double silverman_bandwidth(std::span<const double> xs) {
    if (xs.empty()) return 0.0;
    const double sd = sample_sd(xs);
    std::vector<double> v(xs.begin(), xs.end());
    const double iqr = quantile(v, 0.75) - quantile(v, 0.25);
    const double spread = iqr > 0 ? std::min(sd, iqr / 1.34) : sd;
    return 0.9 * spread * std::pow(double(xs.size()), -0.2);
}

Density Density::kde(std::vector<double> samples, double bandwidth, double lo, double hi) {
    if (!(bandwidth > 0)) throw DomainError("KDE bandwidth must be positive");
    Density d;
    d.backend_ = Backend::kde;
    d.lo_ = lo;
    d.hi_ = hi;
    d.bandwidth_ = bandwidth;
    d.weights_.resize(samples.size());
    const double n = double(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double z = normal_cdf((hi - samples[i]) / bandwidth) - normal_cdf((lo - samples[i]) / bandwidth);
        d.weights_[i] = 1.0 / (n * z * bandwidth);
    }
    d.samples_ = std::move(samples);
    return d;
}

Density Density::histogram(std::span<const double> samples, std::size_t bins, double lo, double hi) {
    if (bins == 0 || !(hi > lo)) throw DomainError("histogram needs bins > 0 and a non-empty range");
    Density d;
    d.backend_ = Backend::histogram;
    d.lo_ = lo;
    d.hi_ = hi;
    d.bins_.assign(bins, 0.0);
    const double width = (hi - lo) / double(bins);
    for (double s : samples) {
        const auto b = std::min(bins - 1, std::size_t(std::max(0.0, (s - lo) / width)));
        d.bins_[b] += 1.0;
    }
    for (auto& b : d.bins_) b /= double(samples.size()) * width;
    return d;
}

double Density::operator()(double a) const {
    if (backend_ == Backend::histogram) {
        if (a < lo_ || a > hi_) return 0.0;
        const double width = (hi_ - lo_) / double(bins_.size());
        return bins_[std::min(bins_.size() - 1, std::size_t((a - lo_) / width))];
    }
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    double s = 0;
    for (std::size_t i = 0; i < samples_.size(); ++i) {
        const double z = (a - samples_[i]) / bandwidth_;
        s += weights_[i] * std::exp(-0.5 * z * z);
    }
    return s * inv_sqrt_2pi;
}

double Density::integral(std::size_t steps) const {
    if (backend_ == Backend::histogram) {
        const double width = (hi_ - lo_) / double(bins_.size());
        return std::accumulate(bins_.begin(), bins_.end(), 0.0) * width;
    }
    const double dx = (hi_ - lo_) / double(steps);
    double s = 0.5 * ((*this)(lo_) + (*this)(hi_));
    for (std::size_t i = 1; i < steps; ++i) s += (*this)(lo_ + dx * double(i));
    return s * dx;
}

CalibrationModel fit(std::span<const double> healthy, std::span<const double> pathology,
                     const FitOptions& opt) {
    if (healthy.size() < opt.min_samples || pathology.size() < opt.min_samples)
        throw DomainError("calibration needs at least " + std::to_string(opt.min_samples) +
                          " scores per class");
    for (auto set : {healthy, pathology})
        for (double s : set)
            if (!std::isfinite(s)) throw DomainError("non-finite anomaly score");

    const double h_h = silverman_bandwidth(healthy), h_p = silverman_bandwidth(pathology);
    if (opt.backend == Backend::kde && (h_h <= 0 || h_p <= 0))
        throw DomainError("zero-variance score class cannot be fitted with the KDE backend");

    CalibrationModel m;
    m.backend = opt.backend;
    const double h = std::max(h_h, h_p);
    const auto [hmin, hmax] = std::minmax_element(healthy.begin(), healthy.end());
    const auto [pmin, pmax] = std::minmax_element(pathology.begin(), pathology.end());
    m.support_lo = std::min(*hmin, *pmin) - 3 * h;
    m.support_hi = std::max(*hmax, *pmax) + 3 * h;
    if (!(m.support_hi > m.support_lo)) throw DomainError("degenerate score support");

    const double p = opt.prior_pathology.value_or(double(pathology.size()) /
                                                  double(healthy.size() + pathology.size()));
    if (!(p >= 0 && p <= 1)) throw DomainError("prior_pathology must lie in [0,1]");
    m.prior_pathology = p;
    m.prior_healthy = 1.0 - p;

    if (opt.backend == Backend::kde) {
        m.healthy = Density::kde({healthy.begin(), healthy.end()}, h_h, m.support_lo, m.support_hi);
        m.pathology = Density::kde({pathology.begin(), pathology.end()}, h_p, m.support_lo, m.support_hi);
    } else {
        m.healthy = Density::histogram(healthy, opt.bins, m.support_lo, m.support_hi);
        m.pathology = Density::histogram(pathology, opt.bins, m.support_lo, m.support_hi);
    }
    return m;
}

double posterior(const CalibrationModel& m, double a) {
    const double num = m.prior_pathology * m.pathology(a);
    const double den = num + m.prior_healthy * m.healthy(a);
    if (!(den > 0) || !std::isfinite(den)) return m.prior_pathology;
    return std::clamp(num / den, 0.0, 1.0);
}

MeanStd mean_std(std::span<const double> values) {
    if (values.empty()) throw DomainError("mean of an empty group");
    MeanStd r;
    r.n = values.size();
    r.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(r.n);
    r.std = sample_sd(values);
    return r;
}

std::string format_mean_std(const MeanStd& m, int decimals) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(decimals);
    os << m.mean << "±" << m.std;
    return os.str();
}

std::vector<GroupSummary> per_class_mean_posterior(
    const std::map<std::string, std::vector<double>>& scores_by_label, const CalibrationModel& model) {
    std::vector<GroupSummary> rows;
    for (const auto& [label, scores] : scores_by_label) {
        if (scores.empty()) throw DomainError("empty score group '" + label + "'");
        std::vector<double> post(scores.size());
        std::transform(scores.begin(), scores.end(), post.begin(),
                       [&](double a) { return posterior(model, a); });
        rows.push_back({label, mean_std(post)});
    }
    return rows;
}

std::string format_summary(const std::vector<GroupSummary>& rows) {
    std::ostringstream os;
    os << "label\tn\tmean\tstd\tsummary\n";
    for (const auto& r : rows) {
        std::ostringstream num;
        num.setf(std::ios::fixed);
        num.precision(6);
        num << r.posterior.mean << '\t' << r.posterior.std;
        os << r.label << '\t' << r.posterior.n << '\t' << num.str() << '\t'
           << format_mean_std(r.posterior) << '\n';
    }
    return os.str();
}

std::string score_histogram(const CalibrationModel& model, std::span<const double> healthy,
                            std::span<const double> pathology, std::size_t bins) {
    if (bins == 0) throw DomainError("histogram needs at least one bin");
    const double lo = model.support_lo, width = (model.support_hi - lo) / double(bins);
    std::vector<std::size_t> ch(bins, 0), cp(bins, 0);
    auto bin = [&](double s) { return std::min(bins - 1, std::size_t(std::max(0.0, (s - lo) / width))); };
    for (double s : healthy) ++ch[bin(s)];
    for (double s : pathology) ++cp[bin(s)];
    std::ostringstream os;
    os.precision(9);
    os << "bin_lo\tbin_hi\thealthy\tpathology\n";
    for (std::size_t b = 0; b < bins; ++b)
        os << lo + width * double(b) << '\t' << lo + width * double(b + 1) << '\t' << ch[b] << '\t' << cp[b]
           << '\n';
    return os.str();
}

std::vector<ScoreRecord> read_scores(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open score file " + path.string());
    std::vector<ScoreRecord> out;
    std::string line;
    bool header = true;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        if (header) {
            header = false;
            if (line.rfind("id\t", 0) == 0) continue;
        }
        std::istringstream ls(line);
        ScoreRecord r;
        std::string score;
        if (!std::getline(ls, r.id, '\t') || !std::getline(ls, r.label, '\t') || !std::getline(ls, score, '\t'))
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected id, label, score");
        try {
            r.score = std::stod(score);
        } catch (const std::exception&) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad score '" + score + "'");
        }
        out.push_back(std::move(r));
    }
    return out;
}

void write_scores(const std::filesystem::path& path, const std::vector<ScoreRecord>& records) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(17);
    out << "id\tlabel\tscore\n";
    for (const auto& r : records) out << r.id << '\t' << r.label << '\t' << r.score << '\n';
}

}  // namespace fundus::calibration
