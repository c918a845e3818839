#include "rlrc/optim.hpp"

#include <cmath>

namespace rlrc {

Adam::Adam(std::vector<Tensor *> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Tensor * p : params_) {
        if (!p->requires_grad()) {
            throw Error("Adam given a parameter that does not require grad, shape " + shape_str(p->shape()));
        }
        m_.emplace_back(p->numel(), 0.0f);
        v_.emplace_back(p->numel(), 0.0f);
    }
}

double Adam::step() {
    double sq = 0.0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor & p = *params_[i];
        if (!p.has_grad()) {
            throw Error("Adam step with missing gradient for parameter " + std::to_string(i) + " of shape " +
                        shape_str(p.shape()));
        }
        if (m_[i].size() != p.numel()) {
            throw ShapeError("Adam moment buffer no longer matches parameter " + std::to_string(i) + " shape " +
                             shape_str(p.shape()));
        }
        auto g = p.grad();
        require_finite(g, "Adam gradient");
        for (float x : g) {
            sq += static_cast<double>(x) * x;
        }
    }
    const double norm = std::sqrt(sq);
    float clip = 1.0f;
    if (config_.max_grad_norm > 0.0f && norm > config_.max_grad_norm) {
        clip = static_cast<float>(config_.max_grad_norm / norm);
    }

    ++step_;
    const float b1 = config_.beta1, b2 = config_.beta2;
    const double bc1 = 1.0 - std::pow(static_cast<double>(b1), static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(b2), static_cast<double>(step_));
    const float lr = config_.learning_rate;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor & p = *params_[i];
        auto w = p.data();
        auto g = p.grad();
        auto & m = m_[i];
        auto & v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const float gj = g[j] * clip;
            m[j] = b1 * m[j] + (1.0f - b1) * gj;
            v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + config_.eps));
        }
        p.zero_grad();
    }
    return norm;
}

void Adam::zero_grad() {
    for (Tensor * p : params_) {
        p->zero_grad();
    }
}

}  // namespace rlrc
