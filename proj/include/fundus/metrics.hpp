#pragma once

// Classification and ranking statistics.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fundus::metrics {

/// C x C counts; rows are true classes, columns predicted classes.
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t classes) : n_(classes), counts_(classes * classes, 0) {}
    static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows);

    void add(std::size_t truth, std::size_t predicted, std::uint64_t count = 1);
    std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * n_ + predicted]; }
    std::size_t classes() const { return n_; }
    std::uint64_t total() const;
    std::uint64_t trace() const;
    std::uint64_t row_sum(std::size_t truth) const;
    std::uint64_t col_sum(std::size_t predicted) const;
    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::size_t n_ = 0;
    std::vector<std::uint64_t> counts_;
};

/// trace / total. Throws DomainError on an empty matrix.
double accuracy(const ConfusionMatrix& cm);
/// Per-class F1 = 2PR/(P+R); 0 where P+R = 0.
std::vector<double> per_class_f1(const ConfusionMatrix& cm);
/// Support-weighted mean of per-class F1. Throws DomainError on an empty matrix.
double weighted_f1(const ConfusionMatrix& cm);
/// Multi-class (Gorodkin) MCC; 0 when the denominator vanishes.
double mcc(const ConfusionMatrix& cm);

struct ScoredLabel {
    double value;
    bool positive;
};

/// Mann-Whitney AUC with ties counted 1/2. Throws DomainError unless both
/// classes are present.
double auc(std::span<const ScoredLabel> scores);

struct TTestResult {
    double t;
    double p;  // two-sided
    std::size_t dof;
};

/// Paired t-test on per-fold metric values. Zero-variance differences give
/// t = 0, p = 1 for a zero mean and t = ±inf, p = 0 otherwise.
TTestResult paired_ttest_kfold(std::span<const double> a, std::span<const double> b);

/// Regularised incomplete beta I_x(a, b) by continued fraction.
double incomplete_beta(double a, double b, double x);
/// CDF of Student's t with nu degrees of freedom.
double student_t_cdf(double t, double nu);

struct DatasetBreakdown {
    std::string tag;
    ConfusionMatrix cm;
    double accuracy = 0, weighted_f1 = 0, mcc = 0;
};

struct EvalReport {
    std::vector<std::string> class_names;
    ConfusionMatrix cm;
    double accuracy = 0, weighted_f1 = 0, mcc = 0;
    std::optional<double> auc;
    std::vector<DatasetBreakdown> per_dataset;
};

/// Pooled and per-dataset metrics; the pooled matrix is the sum of the parts.
EvalReport make_report(std::vector<std::string> class_names,
                       const std::vector<std::pair<std::string, ConfusionMatrix>>& per_dataset,
                       std::optional<double> auc = std::nullopt);

/// One `key<TAB>value` record per line, then the confusion grid.
std::string format_report(const EvalReport& report);
/// Tab-separated grid with class names as header row and first column.
std::string format_confusion(const ConfusionMatrix& cm, const std::vector<std::string>& names);

}  // namespace fundus::metrics
