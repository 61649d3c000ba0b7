#pragma once

// Bayesian calibration of raw anomaly scores into P(pathology | score).

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fundus::calibration {

enum class Backend { kde, histogram };
Backend parse_backend(const std::string& name);

struct FitOptions {
    Backend backend = Backend::kde;
    std::size_t bins = 64;
    /// P(pathology). Empirical class frequency when unset.
    std::optional<double> prior_pathology;
    std::size_t min_samples = 10;
};

/// Silverman's rule 0.9 min(sd, IQR/1.34) n^(-1/5), falling back to sd when
/// the IQR is zero. Returns 0 for a zero-variance sample.
double silverman_bandwidth(std::span<const double> xs);

/// Class-conditional density on a shared support grid.
class Density {
public:
    Density() = default;
    /// KDE: Gaussian kernels, each renormalised to its mass on [lo, hi].
    static Density kde(std::vector<double> samples, double bandwidth, double lo, double hi);
    /// Equal-width histogram over [lo, hi]; zero outside.
    static Density histogram(std::span<const double> samples, std::size_t bins, double lo, double hi);

    double operator()(double a) const;
    /// Trapezoid integral over [lo, hi] with `steps` intervals.
    double integral(std::size_t steps = 20000) const;

    Backend backend() const { return backend_; }
    double bandwidth() const { return bandwidth_; }
    const std::vector<double>& bin_density() const { return bins_; }

private:
    Backend backend_ = Backend::kde;
    double lo_ = 0, hi_ = 0, bandwidth_ = 0;
    std::vector<double> samples_, weights_;  // kde: per-sample 1/(n Z_i h)
    std::vector<double> bins_;               // histogram: density per bin
};

struct CalibrationModel {
    Density healthy, pathology;
    double prior_healthy = 0.5, prior_pathology = 0.5;
    double support_lo = 0, support_hi = 0;
    Backend backend = Backend::kde;
};

/// Throws DomainError with fewer than min_samples scores in a class, for a
/// zero-variance class under the KDE backend, or for a prior outside [0,1].
CalibrationModel fit(std::span<const double> healthy, std::span<const double> pathology,
                     const FitOptions& opt = {});

/// pi_p f_p(a) / (pi_p f_p(a) + pi_h f_h(a)); the prior when both vanish.
double posterior(const CalibrationModel& model, double a);

struct MeanStd {
    double mean = 0, std = 0;
    std::size_t n = 0;
};
/// Mean and sample standard deviation (0 for a single value). Throws
/// DomainError on an empty group.
MeanStd mean_std(std::span<const double> values);
/// "0.80±0.14"
std::string format_mean_std(const MeanStd& m, int decimals = 2);

struct GroupSummary {
    std::string label;
    MeanStd posterior;
};
/// Mean ± std of calibrated posteriors per label, in label order.
std::vector<GroupSummary> per_class_mean_posterior(
    const std::map<std::string, std::vector<double>>& scores_by_label, const CalibrationModel& model);
/// Tab-separated `label  n  mean  std  summary` table.
std::string format_summary(const std::vector<GroupSummary>& rows);

/// Score histogram of both classes over the model's support grid:
/// `bin_lo  bin_hi  healthy  pathology` counts per line.
std::string score_histogram(const CalibrationModel& model, std::span<const double> healthy,
                            std::span<const double> pathology, std::size_t bins = 32);

struct ScoreRecord {
    std::string id;
    std::string label;
    double score = 0;
};
/// Tab-separated `id  label  score` with a header line; '#' comments ignored.
std::vector<ScoreRecord> read_scores(const std::filesystem::path& path);
void write_scores(const std::filesystem::path& path, const std::vector<ScoreRecord>& records);

}  // namespace fundus::calibration
