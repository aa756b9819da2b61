#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "avfuse/matrix.hpp"
#include "avfuse/rng.hpp"

namespace avfuse {

enum class Mode { Train, Eval };

// ---- dense layer ----

/// Affine map y = x W^T + b. Weight is out×in, bias 1×out, inputs are
/// batches of row vectors.
struct DenseLayer {
    Matrix weight;  // out x in
    Matrix bias;    // 1 x out

    DenseLayer() = default;
    DenseLayer(std::size_t out_dim, std::size_t in_dim)
        : weight(out_dim, in_dim), bias(1, out_dim) {}

    std::size_t in_dim() const { return weight.cols; }
    std::size_t out_dim() const { return weight.rows; }

    /// He-uniform weights, zero bias.
    void init_kaiming_uniform(Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in_dim()));
        for (double& w : weight.data) w = rng.uniform(-bound, bound);
        bias.fill(0.0);
    }
};

inline Matrix dense_forward(const DenseLayer& layer, const Matrix& x) {
    if (x.cols != layer.in_dim())
        throw std::invalid_argument("dense_forward: input has " + std::to_string(x.cols) +
                                    " features, layer expects " + std::to_string(layer.in_dim()));
    Matrix y = matmul_nt(x, layer.weight);
    for (std::size_t r = 0; r < y.rows; ++r)
        for (std::size_t c = 0; c < y.cols; ++c) y(r, c) += layer.bias(0, c);
    return y;
}

struct DenseBackward {
    Matrix input_grad;   // same shape as x
    Matrix weight_grad;  // out x in
    Matrix bias_grad;    // 1 x out
};

inline DenseBackward dense_backward(const DenseLayer& layer, const Matrix& x,
                                    const Matrix& upstream) {
    if (x.cols != layer.in_dim() || upstream.cols != layer.out_dim() || upstream.rows != x.rows)
        throw std::invalid_argument("dense_backward: inconsistent shapes");
    DenseBackward out;
    out.input_grad = matmul(upstream, layer.weight);   // (B x out)(out x in)
    out.weight_grad = matmul_tn(upstream, x);          // (out x B)(B x in)
    out.bias_grad = Matrix(1, layer.out_dim());
    for (std::size_t r = 0; r < upstream.rows; ++r)
        for (std::size_t c = 0; c < upstream.cols; ++c) out.bias_grad(0, c) += upstream(r, c);
    return out;
}

// ---- activations ----

inline Matrix relu(const Matrix& x) {
    Matrix y = x;
    for (double& v : y.data) v = std::max(0.0, v);
    return y;
}

inline Matrix relu_backward(const Matrix& pre_activation, const Matrix& upstream) {
    if (!pre_activation.same_shape(upstream))
        throw std::invalid_argument("relu_backward: shape mismatch");
    Matrix g = upstream;
    for (std::size_t i = 0; i < g.data.size(); ++i)
        if (pre_activation.data[i] <= 0.0) g.data[i] = 0.0;
    return g;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Max-subtracted softmax; outputs are positive and sum to 1.
inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty input");
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

/// d(loss)/d(logits) given softmax outputs and d(loss)/d(weights), per row.
inline void softmax_backward_row(std::span<const double> weights, std::span<const double> upstream,
                                 std::span<double> logit_grad) {
    double inner = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) inner += upstream[i] * weights[i];
    for (std::size_t i = 0; i < weights.size(); ++i)
        logit_grad[i] = weights[i] * (upstream[i] - inner);
}

inline std::vector<double> l2_normalize(std::span<const double> v) {
    const double n = norm2(v);
    if (n <= kNormTolerance)
        throw std::invalid_argument("l2_normalize: vector norm below tolerance");
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x /= n;
    return out;
}

/// Zero-preserving variant used on the fusion input path, where an absent
/// modality arrives as an all-zero embedding and must pass through.
inline std::vector<double> l2_normalize_or_zero(std::span<const double> v) {
    const double n = norm2(v);
    std::vector<double> out(v.begin(), v.end());
    if (n <= kNormTolerance) return out;
    for (double& x : out) x /= n;
    return out;
}

// ---- batch normalization ----

struct BatchNormState {
    Matrix gamma;         // 1 x F
    Matrix beta;          // 1 x F
    Matrix running_mean;  // 1 x F
    Matrix running_var;   // 1 x F
    double eps = 1e-5;
    double momentum = 0.1;

    BatchNormState() = default;
    explicit BatchNormState(std::size_t features)
        : gamma(1, features, 1.0),
          beta(1, features, 0.0),
          running_mean(1, features, 0.0),
          running_var(1, features, 1.0) {}

    std::size_t features() const { return gamma.cols; }
};

struct BatchNormCache {
    Mode mode = Mode::Train;
    Matrix xhat;                  // B x F, normalized input
    std::vector<double> inv_std;  // F, 1/sqrt(var + eps) actually used
};

/// Train mode normalizes by batch statistics (biased variance) and, when
/// `update_running`, folds them into the running stats (unbiased variance,
/// torch convention). Eval mode normalizes by the running stats.
inline Matrix batchnorm_forward(BatchNormState& state, const Matrix& x, Mode mode,
                                bool update_running = true, BatchNormCache* cache = nullptr) {
    const std::size_t features = state.features();
    if (x.cols != features) throw std::invalid_argument("batchnorm_forward: feature mismatch");
    const std::size_t b = x.rows;

    std::vector<double> mean(features, 0.0), var(features, 0.0);
    if (mode == Mode::Train) {
        if (b < 2)
            throw std::invalid_argument("batchnorm_forward: train mode needs batch size >= 2");
        for (std::size_t r = 0; r < b; ++r)
            for (std::size_t c = 0; c < features; ++c) mean[c] += x(r, c);
        for (double& m : mean) m /= static_cast<double>(b);
        for (std::size_t r = 0; r < b; ++r)
            for (std::size_t c = 0; c < features; ++c) {
                const double d = x(r, c) - mean[c];
                var[c] += d * d;
            }
        for (double& v : var) v /= static_cast<double>(b);
        if (update_running) {
            const double unbias = static_cast<double>(b) / static_cast<double>(b - 1);
            for (std::size_t c = 0; c < features; ++c) {
                state.running_mean(0, c) =
                    (1.0 - state.momentum) * state.running_mean(0, c) + state.momentum * mean[c];
                state.running_var(0, c) = (1.0 - state.momentum) * state.running_var(0, c) +
                                          state.momentum * var[c] * unbias;
            }
        }
    } else {
        for (std::size_t c = 0; c < features; ++c) {
            mean[c] = state.running_mean(0, c);
            var[c] = state.running_var(0, c);
        }
    }

    std::vector<double> inv_std(features);
    for (std::size_t c = 0; c < features; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + state.eps);

    Matrix y(b, features);
    Matrix xhat(b, features);
    for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < features; ++c) {
            xhat(r, c) = (x(r, c) - mean[c]) * inv_std[c];
            y(r, c) = state.gamma(0, c) * xhat(r, c) + state.beta(0, c);
        }
    if (cache) {
        cache->mode = mode;
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

struct BatchNormBackward {
    Matrix input_grad;
    Matrix gamma_grad;
    Matrix beta_grad;
};

inline BatchNormBackward batchnorm_backward(const BatchNormState& state,
                                            const BatchNormCache& cache, const Matrix& upstream) {
    const std::size_t features = state.features();
    const std::size_t b = upstream.rows;
    if (!cache.xhat.same_shape(upstream))
        throw std::invalid_argument("batchnorm_backward: shape mismatch");

    BatchNormBackward out;
    out.gamma_grad = Matrix(1, features);
    out.beta_grad = Matrix(1, features);
    out.input_grad = Matrix(b, features);

    for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < features; ++c) {
            out.gamma_grad(0, c) += upstream(r, c) * cache.xhat(r, c);
            out.beta_grad(0, c) += upstream(r, c);
        }

    if (cache.mode == Mode::Eval) {
        for (std::size_t r = 0; r < b; ++r)
            for (std::size_t c = 0; c < features; ++c)
                out.input_grad(r, c) = upstream(r, c) * state.gamma(0, c) * cache.inv_std[c];
        return out;
    }

    // Train mode: gradient through the batch mean and variance as well.
    std::vector<double> sum_dxhat(features, 0.0), sum_dxhat_xhat(features, 0.0);
    for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < features; ++c) {
            const double dxhat = upstream(r, c) * state.gamma(0, c);
            sum_dxhat[c] += dxhat;
            sum_dxhat_xhat[c] += dxhat * cache.xhat(r, c);
        }
    const double inv_b = 1.0 / static_cast<double>(b);
    for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < features; ++c) {
            const double dxhat = upstream(r, c) * state.gamma(0, c);
            out.input_grad(r, c) =
                cache.inv_std[c] * inv_b *
                (static_cast<double>(b) * dxhat - sum_dxhat[c] -
                 cache.xhat(r, c) * sum_dxhat_xhat[c]);
        }
    return out;
}

}  // namespace avfuse
