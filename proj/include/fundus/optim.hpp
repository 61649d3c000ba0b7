#pragma once

#include <cstdint>
#include <vector>

#include "fundus/nn.hpp"

namespace fundus::optim {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam. Moment buffers are kept in double regardless of the
/// parameter precision.
template <typename T>
class Adam {
public:
    explicit Adam(nn::ParamList<T>& params, AdamOptions opt = {});

    /// One update of every parameter with learning rate lr. Throws
    /// std::logic_error when a parameter has no gradient buffer. The caller
    /// zeroes gradients afterwards.
    void step(double lr);

    std::uint64_t step_count() const { return step_; }
    const AdamOptions& options() const { return opt_; }

    // Exposed for checkpointing.
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    void set_step_count(std::uint64_t s) { step_ = s; }

private:
    nn::ParamList<T>* params_;
    AdamOptions opt_;
    std::uint64_t step_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

struct ScheduleConfig {
    double base_lr = 1e-5;
    int total_epochs = 30;
    int warmup_epochs = 5;

    void validate() const;
};

/// Linear warm-up from 0 to base_lr over warmup_epochs, then half-cosine
/// decay to 0 at total_epochs. epoch may be fractional.
double lr_at(double epoch, const ScheduleConfig& cfg);

}  // namespace fundus::optim
