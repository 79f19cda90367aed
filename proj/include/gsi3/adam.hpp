#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace gsi3 {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-15;
};

/// First/second moment estimates and step count for one parameter vector.
struct AdamState {
    std::vector<double> m, v;
    long step = 0;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update. Element i uses lr[i % lr.size()], which lets a
/// strided parameter block (e.g. one Gaussian) carry per-group learning rates.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
                      std::span<const double> lr, const AdamConfig& cfg = {}) {
    if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size())
        throw std::invalid_argument("adam_step: shape mismatch");
    if (lr.empty()) throw std::invalid_argument("adam_step: no learning rate");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    const std::size_t period = lr.size();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= lr[i % period] * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
}

inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
    adam_step(params, grads, state, std::span<const double>(&lr, 1), cfg);
}

} // namespace gsi3
