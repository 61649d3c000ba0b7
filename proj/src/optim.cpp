#include "fundus/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace fundus::optim {

template <typename T>
Adam<T>::Adam(nn::ParamList<T>& params, AdamOptions opt) : params_(&params), opt_(opt) {
    for (const auto& p : params.items()) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

template <typename T>
void Adam<T>::step(double lr) {
    auto& items = params_->items();
    if (items.size() != m_.size()) throw std::logic_error("Adam: parameter list changed size");
    for (const auto& p : items)
        if (!p.tensor.has_grad()) throw std::logic_error("Adam: missing gradient for " + p.name);
    ++step_;
    const double b1 = opt_.beta1, b2 = opt_.beta2;
    const double c1 = 1.0 - std::pow(b1, double(step_));
    const double c2 = 1.0 - std::pow(b2, double(step_));
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto w = items[i].tensor.mutable_data();
        auto g = items[i].tensor.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = double(g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            w[j] = T(double(w[j]) - lr * mhat / (std::sqrt(vhat) + opt_.eps));
        }
    }
}

void ScheduleConfig::validate() const {
    if (!(base_lr > 0)) throw std::invalid_argument("schedule: base_lr must be > 0");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs)
        throw std::invalid_argument("schedule: need 0 <= warmup_epochs < total_epochs");
}

double lr_at(double epoch, const ScheduleConfig& cfg) {
    cfg.validate();
    if (!(epoch >= 0.0) || epoch > double(cfg.total_epochs))
        throw std::out_of_range("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(cfg.total_epochs) + "]");
    const double warm = double(cfg.warmup_epochs);
    if (epoch < warm) return cfg.base_lr * epoch / warm;
    const double progress = (epoch - warm) / (double(cfg.total_epochs) - warm);
    return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template class Adam<float>;
template class Adam<double>;

}  // namespace fundus::optim
