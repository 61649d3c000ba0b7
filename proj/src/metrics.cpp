#include "fundus/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "fundus/error.hpp"

namespace fundus::metrics {

ConfusionMatrix ConfusionMatrix::from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows.size()) throw ShapeError("confusion matrix must be square");
        for (std::size_t c = 0; c < rows.size(); ++c) cm.counts_[r * cm.n_ + c] = rows[r][c];
    }
    return cm;
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::uint64_t count) {
    if (truth >= n_ || predicted >= n_) throw ShapeError("class index outside confusion matrix");
    counts_[truth * n_ + predicted] += count;
}

std::uint64_t ConfusionMatrix::total() const {
    return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t(0));
}

std::uint64_t ConfusionMatrix::trace() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < n_; ++i) t += at(i, i);
    return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t truth) const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < n_; ++c) s += at(truth, c);
    return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t predicted) const {
    std::uint64_t s = 0;
    for (std::size_t r = 0; r < n_; ++r) s += at(r, predicted);
    return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (other.n_ != n_) throw ShapeError("confusion matrices differ in class count");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
}

double accuracy(const ConfusionMatrix& cm) {
    const auto total = cm.total();
    if (total == 0) throw DomainError("accuracy of an empty confusion matrix");
    return double(cm.trace()) / double(total);
}

std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
    std::vector<double> f1(cm.classes(), 0.0);
    for (std::size_t k = 0; k < cm.classes(); ++k) {
        const double tp = double(cm.at(k, k));
        const auto pred = cm.col_sum(k), truth = cm.row_sum(k);
        const double p = pred ? tp / double(pred) : 0.0;
        const double r = truth ? tp / double(truth) : 0.0;
        f1[k] = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    }
    return f1;
}

double weighted_f1(const ConfusionMatrix& cm) {
    const auto total = cm.total();
    if (total == 0) throw DomainError("weighted F1 of an empty confusion matrix");
    const auto f1 = per_class_f1(cm);
    double s = 0;
    for (std::size_t k = 0; k < cm.classes(); ++k) s += f1[k] * double(cm.row_sum(k));
    return s / double(total);
}

double mcc(const ConfusionMatrix& cm) {
    const double s = double(cm.total()), c = double(cm.trace());
    double pt = 0, pp = 0, tt = 0;
    for (std::size_t k = 0; k < cm.classes(); ++k) {
        const double p = double(cm.col_sum(k)), t = double(cm.row_sum(k));
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    const double den = (s * s - pp) * (s * s - tt);
    if (den <= 0) return 0.0;
    return (c * s - pt) / std::sqrt(den);
}

double auc(std::span<const ScoredLabel> scores) {
    std::vector<ScoredLabel> v(scores.begin(), scores.end());
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.value < b.value; });
    std::uint64_t n_pos = 0, n_neg = 0;
    // Twice the rank sum of positives; midranks of tie blocks are half-integers.
    std::uint64_t twice_rank_sum = 0;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        std::uint64_t pos_in_block = 0;
        while (j < v.size() && v[j].value == v[i].value) pos_in_block += v[j++].positive;
        // ranks i+1 .. j, midrank (i+1+j)/2
        twice_rank_sum += pos_in_block * (i + 1 + j);
        n_pos += pos_in_block;
        n_neg += (j - i) - pos_in_block;
        i = j;
    }
    if (n_pos == 0 || n_neg == 0) throw DomainError("AUC needs both positive and negative scores");
    const std::uint64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    return double(twice_u) / (2.0 * double(n_pos) * double(n_neg));
}

double incomplete_beta(double a, double b, double x) {
    if (!(a > 0 && b > 0)) throw DomainError("incomplete beta needs a, b > 0");
    if (x <= 0) return 0.0;
    if (x >= 1) return 1.0;
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    // Lentz continued fraction; I_x(a,b) = 1 - I_{1-x}(b,a) above the switch point.
    auto cf = [](double a, double b, double x) {
        constexpr double tiny = 1e-300, eps = 1e-16;
        double c = 1.0, d = 1.0 - (a + b) * x / (a + 1);
        if (std::abs(d) < tiny) d = tiny;
        d = 1.0 / d;
        double h = d;
        for (int m = 1; m <= 10000; ++m) {
            const double m2 = 2.0 * m;
            double aa = m * (b - m) * x / ((a + m2 - 1) * (a + m2));
            d = 1.0 + aa * d;
            if (std::abs(d) < tiny) d = tiny;
            c = 1.0 + aa / c;
            if (std::abs(c) < tiny) c = tiny;
            d = 1.0 / d;
            h *= d * c;
            aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1));
            d = 1.0 + aa * d;
            if (std::abs(d) < tiny) d = tiny;
            c = 1.0 + aa / c;
            if (std::abs(c) < tiny) c = tiny;
            d = 1.0 / d;
            const double del = d * c;
            h *= del;
            if (std::abs(del - 1.0) < eps) break;
        }
        return h;
    };
    if (x < (a + 1) / (a + b + 2)) return std::exp(log_front) * cf(a, b, x) / a;
    return 1.0 - std::exp(log_front) * cf(b, a, 1 - x) / b;
}

double student_t_cdf(double t, double nu) {
    if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
    const double tail = 0.5 * incomplete_beta(nu / 2, 0.5, nu / (nu + t * t));
    return t > 0 ? 1.0 - tail : tail;
}

TTestResult paired_ttest_kfold(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("paired t-test needs equal-length samples");
    const std::size_t k = a.size();
    if (k < 2) throw DomainError("paired t-test needs at least 2 folds");
    std::vector<double> d(k);
    for (std::size_t i = 0; i < k; ++i) d[i] = a[i] - b[i];
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / double(k);
    double ss = 0;
    for (double x : d) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / double(k - 1));
    const std::size_t dof = k - 1;
    if (sd == 0) {
        if (mean == 0) return {0.0, 1.0, dof};
        return {mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity(),
                0.0, dof};
    }
    const double t = mean / (sd / std::sqrt(double(k)));
    const double nu = double(dof);
    const double p = incomplete_beta(nu / 2, 0.5, nu / (nu + t * t));
    return {t, std::min(1.0, p), dof};
}

EvalReport make_report(std::vector<std::string> class_names,
                       const std::vector<std::pair<std::string, ConfusionMatrix>>& per_dataset,
                       std::optional<double> auc_value) {
    EvalReport r;
    r.cm = ConfusionMatrix(class_names.size());
    r.class_names = std::move(class_names);
    for (const auto& [tag, cm] : per_dataset) {
        r.cm += cm;
        DatasetBreakdown d{tag, cm};
        if (cm.total() > 0) {
            d.accuracy = accuracy(cm);
            d.weighted_f1 = weighted_f1(cm);
            d.mcc = mcc(cm);
        }
        r.per_dataset.push_back(std::move(d));
    }
    r.accuracy = accuracy(r.cm);
    r.weighted_f1 = weighted_f1(r.cm);
    r.mcc = mcc(r.cm);
    r.auc = auc_value;
    return r;
}

std::string format_confusion(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
    std::ostringstream os;
    for (const auto& n : names) os << '\t' << n;
    os << '\n';
    for (std::size_t r = 0; r < cm.classes(); ++r) {
        os << (r < names.size() ? names[r] : std::to_string(r));
        for (std::size_t c = 0; c < cm.classes(); ++c) os << '\t' << cm.at(r, c);
        os << '\n';
    }
    return os.str();
}

std::string format_report(const EvalReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6);
    os << "samples\t" << r.cm.total() << '\n';
    os << "accuracy\t" << r.accuracy << '\n';
    os << "weighted_f1\t" << r.weighted_f1 << '\n';
    os << "mcc\t" << r.mcc << '\n';
    if (r.auc) os << "auc\t" << *r.auc << '\n';
    for (const auto& d : r.per_dataset) {
        os << "dataset." << d.tag << ".samples\t" << d.cm.total() << '\n';
        os << "dataset." << d.tag << ".accuracy\t" << d.accuracy << '\n';
        os << "dataset." << d.tag << ".weighted_f1\t" << d.weighted_f1 << '\n';
        os << "dataset." << d.tag << ".mcc\t" << d.mcc << '\n';
    }
    os << "confusion\n" << format_confusion(r.cm, r.class_names);
    return os.str();
}

}  // namespace fundus::metrics
