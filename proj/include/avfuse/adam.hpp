#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "avfuse/matrix.hpp"

namespace avfuse {

/// A named view onto one parameter (or gradient) matrix. Optimizer state is
/// kept positionally, so the block list must be enumerated in a fixed order.
struct NamedBlock {
    std::string name;
    Matrix* value = nullptr;
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step_count = 0;
    std::vector<Matrix> first_moment;
    std::vector<Matrix> second_moment;
};

/// One Adam update with bias correction over aligned parameter/gradient
/// block lists. Moment buffers are allocated lazily on the first step.
inline void adam_step(AdamState& state, const std::vector<NamedBlock>& params,
                      const std::vector<NamedBlock>& grads, double lr) {
    if (params.size() != grads.size())
        throw std::invalid_argument("adam_step: parameter/gradient block count mismatch");
    if (lr < 0.0) throw std::invalid_argument("adam_step: negative learning rate");

    if (state.first_moment.empty()) {
        state.first_moment.reserve(params.size());
        state.second_moment.reserve(params.size());
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.value->rows, p.value->cols);
            state.second_moment.emplace_back(p.value->rows, p.value->cols);
        }
    }
    if (state.first_moment.size() != params.size())
        throw std::invalid_argument("adam_step: state was initialized for a different block list");

    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].value->same_shape(*grads[i].value))
            throw std::invalid_argument("adam_step: shape mismatch in block '" + params[i].name +
                                        "'");
        if (!grads[i].value->all_finite())
            throw std::runtime_error("adam_step: non-finite gradient in block '" + params[i].name +
                                     "'");
    }

    ++state.step_count;
    const double bc1 = 1.0 - std::pow(state.beta1, state.step_count);
    const double bc2 = 1.0 - std::pow(state.beta2, state.step_count);

    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i].value;
        const Matrix& g = *grads[i].value;
        Matrix& m = state.first_moment[i];
        Matrix& v = state.second_moment[i];
        for (std::size_t k = 0; k < p.data.size(); ++k) {
            m.data[k] = state.beta1 * m.data[k] + (1.0 - state.beta1) * g.data[k];
            v.data[k] = state.beta2 * v.data[k] + (1.0 - state.beta2) * g.data[k] * g.data[k];
            const double m_hat = m.data[k] / bc1;
            const double v_hat = v.data[k] / bc2;
            p.data[k] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

/// Scales all gradient blocks so their global L2 norm is at most `max_norm`.
/// Returns the norm observed before clipping.
inline double clip_global_norm(const std::vector<NamedBlock>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (double v : g.value->data) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (const auto& g : grads)
            for (double& v : g.value->data) v *= scale;
    }
    return norm;
}

}  // namespace avfuse
