#pragma once

#include "rlrc/tensor.hpp"

#include <cstdint>
#include <vector>

namespace rlrc {

struct AdamConfig {
    float learning_rate = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    // Global gradient-norm clip; <= 0 disables.
    float max_grad_norm = 0.0f;
};

// Adam with bias correction. Holds non-owning pointers to the parameters it
// updates; the owner must keep them alive and at fixed addresses.
class Adam {
public:
    Adam(std::vector<Tensor *> params, AdamConfig config);

    // Applies one update from the accumulated gradients, then zeroes them.
    // Returns the pre-clip global gradient norm.
    double step();
    void zero_grad();

    std::int64_t step_count() const { return step_; }
    const AdamConfig & config() const { return config_; }
    void set_learning_rate(float lr) { config_.learning_rate = lr; }
    const std::vector<float> & first_moment(std::size_t i) const { return m_[i]; }
    const std::vector<float> & second_moment(std::size_t i) const { return v_[i]; }

private:
    std::vector<Tensor *> params_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    AdamConfig config_;
    std::int64_t step_ = 0;
};

}  // namespace rlrc
