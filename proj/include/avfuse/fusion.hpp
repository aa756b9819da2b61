#pragma once

#include <array>
#include <stdexcept>
#include <vector>

#include "avfuse/dataset.hpp"
#include "avfuse/matrix.hpp"
#include "avfuse/nn.hpp"
#include "avfuse/rng.hpp"

namespace avfuse {

inline constexpr std::size_t kTransformDim = 512;
inline constexpr std::size_t kFusedDim = 2 * kTransformDim;

/// dense -> ReLU -> batchnorm -> dense. The modality transforms map into the
/// shared 512-dimensional space; the age head reuses the same topology with
/// its own dimensions.
struct TransformStack {
    DenseLayer fc1;
    BatchNormState bn;
    DenseLayer fc2;

    TransformStack() = default;
    explicit TransformStack(std::size_t in_dim, std::size_t hidden_dim = kTransformDim,
                            std::size_t out_dim = kTransformDim)
        : fc1(hidden_dim, in_dim), bn(hidden_dim), fc2(out_dim, hidden_dim) {}

    void init(Rng& rng) {
        fc1.init_kaiming_uniform(rng);
        fc2.init_kaiming_uniform(rng);
    }
};

/// All learnable fusion parameters: two modality transforms plus the linear
/// attention layer over their concatenation.
struct AfnParams {
    TransformStack audio{kAudioDim};
    TransformStack visual{kVisualDim};
    DenseLayer attention{2, kFusedDim};

    /// Kaiming-uniform transforms; attention starts at zero so both
    /// modalities open with equal weight.
    static AfnParams make(Rng& rng) {
        AfnParams p;
        p.audio.init(rng);
        p.visual.init(rng);
        return p;
    }

    static AfnParams zeros_like(const AfnParams&) { return AfnParams{}; }
};

struct FusedEmbedding {
    std::vector<double> vector;  // kFusedDim, unit norm
    std::array<double, 2> attention_weights{0.5, 0.5};
};

namespace detail {

struct StackCache {
    Matrix input_norm;  // B x in, after zero-preserving L2 normalization
    Matrix pre_act;     // B x 512, fc1 output
    Matrix activated;   // B x 512
    BatchNormCache bn;
    Matrix bn_out;  // B x 512
    Matrix out;     // B x 512
};

inline Matrix stack_forward(TransformStack& stack, const Matrix& input_norm, Mode mode,
                            bool update_running, StackCache* cache) {
    Matrix pre = dense_forward(stack.fc1, input_norm);
    Matrix act = relu(pre);
    BatchNormCache bn_cache;
    Matrix bn_out = batchnorm_forward(stack.bn, act, mode, update_running, &bn_cache);
    Matrix out = dense_forward(stack.fc2, bn_out);
    if (cache) {
        cache->input_norm = input_norm;
        cache->pre_act = std::move(pre);
        cache->activated = std::move(act);
        cache->bn = std::move(bn_cache);
        cache->bn_out = std::move(bn_out);
        cache->out = out;
    }
    return out;
}

inline Matrix stack_backward(const TransformStack& stack, const StackCache& cache,
                             const Matrix& upstream, TransformStack& grads) {
    auto d2 = dense_backward(stack.fc2, cache.bn_out, upstream);
    grads.fc2.weight = std::move(d2.weight_grad);
    grads.fc2.bias = std::move(d2.bias_grad);
    auto dbn = batchnorm_backward(stack.bn, cache.bn, d2.input_grad);
    grads.bn.gamma = std::move(dbn.gamma_grad);
    grads.bn.beta = std::move(dbn.beta_grad);
    const Matrix dact = relu_backward(cache.pre_act, dbn.input_grad);
    auto d1 = dense_backward(stack.fc1, cache.input_norm, dact);
    grads.fc1.weight = std::move(d1.weight_grad);
    grads.fc1.bias = std::move(d1.bias_grad);
    return std::move(d1.input_grad);
}

}  // namespace detail

struct FusionCache {
    detail::StackCache audio;
    detail::StackCache visual;
    Matrix concat;             // B x 1024, [e_a, e_v]
    Matrix attention_weights;  // B x 2
    Matrix gated;              // B x 1024, pre-normalization
    std::vector<double> gated_norm;
    Matrix fused;  // B x 1024, unit rows
};

/// Normalizes each raw embedding row (zero rows pass through), runs both
/// transform stacks, applies softmax modality attention as multiplicative
/// gates, concatenates and L2-normalizes. Returns the B x 1024 fused batch.
inline Matrix fuse_batch_forward(AfnParams& params, const Matrix& audio_raw,
                                 const Matrix& visual_raw, Mode mode, bool update_running = true,
                                 FusionCache* cache = nullptr) {
    if (audio_raw.cols != kAudioDim || visual_raw.cols != kVisualDim ||
        audio_raw.rows != visual_raw.rows)
        throw std::invalid_argument("fuse_batch_forward: bad input shapes");
    const std::size_t b = audio_raw.rows;

    Matrix audio_norm(b, kAudioDim), visual_norm(b, kVisualDim);
    for (std::size_t r = 0; r < b; ++r) {
        const auto an = l2_normalize_or_zero(audio_raw.row(r));
        const auto vn = l2_normalize_or_zero(visual_raw.row(r));
        std::copy(an.begin(), an.end(), audio_norm.row(r).begin());
        std::copy(vn.begin(), vn.end(), visual_norm.row(r).begin());
    }

    FusionCache local;
    FusionCache& c = cache ? *cache : local;
    const Matrix e_a = detail::stack_forward(params.audio, audio_norm, mode, update_running,
                                             &c.audio);
    const Matrix e_v = detail::stack_forward(params.visual, visual_norm, mode, update_running,
                                             &c.visual);

    c.concat = Matrix(b, kFusedDim);
    for (std::size_t r = 0; r < b; ++r) {
        std::copy(e_a.row(r).begin(), e_a.row(r).end(), c.concat.row(r).begin());
        std::copy(e_v.row(r).begin(), e_v.row(r).end(),
                  c.concat.row(r).begin() + kTransformDim);
    }

    const Matrix logits = dense_forward(params.attention, c.concat);
    c.attention_weights = Matrix(b, 2);
    for (std::size_t r = 0; r < b; ++r) {
        const auto w = softmax(logits.row(r));
        c.attention_weights(r, 0) = w[0];
        c.attention_weights(r, 1) = w[1];
    }

    c.gated = Matrix(b, kFusedDim);
    c.gated_norm.assign(b, 0.0);
    c.fused = Matrix(b, kFusedDim);
    for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t i = 0; i < kTransformDim; ++i) {
            c.gated(r, i) = c.attention_weights(r, 0) * e_a(r, i);
            c.gated(r, kTransformDim + i) = c.attention_weights(r, 1) * e_v(r, i);
        }
        const double n = norm2(c.gated.row(r));
        if (n <= kNormTolerance)
            throw std::runtime_error("fuse_batch_forward: degenerate all-zero fused vector at row " +
                                     std::to_string(r));
        c.gated_norm[r] = n;
        for (std::size_t i = 0; i < kFusedDim; ++i) c.fused(r, i) = c.gated(r, i) / n;
    }
    return c.fused;
}

/// Analytic gradients of fuse_batch_forward for every fusion parameter, given
/// d(loss)/d(fused batch). Input gradients are not produced; upstream
/// encoders are outside this network.
inline AfnParams fuse_batch_backward(const AfnParams& params, const FusionCache& cache,
                                     const Matrix& upstream) {
    const std::size_t b = upstream.rows;
    if (!upstream.same_shape(cache.fused))
        throw std::invalid_argument("fuse_batch_backward: upstream shape mismatch");

    // Through the row-wise normalization: dg = (du - e (e.du)) / |g|.
    Matrix d_gated(b, kFusedDim);
    for (std::size_t r = 0; r < b; ++r) {
        const double inner = dot(cache.fused.row(r), upstream.row(r));
        for (std::size_t i = 0; i < kFusedDim; ++i)
            d_gated(r, i) = (upstream(r, i) - cache.fused(r, i) * inner) / cache.gated_norm[r];
    }

    // Gating: g = [a0 * e_a, a1 * e_v].
    Matrix d_ea(b, kTransformDim), d_ev(b, kTransformDim);
    Matrix d_att(b, 2);
    for (std::size_t r = 0; r < b; ++r) {
        double da0 = 0.0, da1 = 0.0;
        for (std::size_t i = 0; i < kTransformDim; ++i) {
            const double ea = cache.concat(r, i);
            const double ev = cache.concat(r, kTransformDim + i);
            da0 += d_gated(r, i) * ea;
            da1 += d_gated(r, kTransformDim + i) * ev;
            d_ea(r, i) = cache.attention_weights(r, 0) * d_gated(r, i);
            d_ev(r, i) = cache.attention_weights(r, 1) * d_gated(r, kTransformDim + i);
        }
        d_att(r, 0) = da0;
        d_att(r, 1) = da1;
    }

    Matrix d_logits(b, 2);
    for (std::size_t r = 0; r < b; ++r)
        softmax_backward_row(cache.attention_weights.row(r), d_att.row(r), d_logits.row(r));

    AfnParams grads;  // default-constructed shapes match the architecture
    auto datt = dense_backward(params.attention, cache.concat, d_logits);
    grads.attention.weight = std::move(datt.weight_grad);
    grads.attention.bias = std::move(datt.bias_grad);
    for (std::size_t r = 0; r < b; ++r)
        for (std::size_t i = 0; i < kTransformDim; ++i) {
            d_ea(r, i) += datt.input_grad(r, i);
            d_ev(r, i) += datt.input_grad(r, kTransformDim + i);
        }

    detail::stack_backward(params.audio, cache.audio, d_ea, grads.audio);
    detail::stack_backward(params.visual, cache.visual, d_ev, grads.visual);
    return grads;
}

/// Softmax-rescaled modality scores from the linear attention layer applied
/// to the concatenated transformed representations.
inline std::array<double, 2> attention_weights(const DenseLayer& attention,
                                               std::span<const double> e_audio,
                                               std::span<const double> e_visual) {
    if (e_audio.size() != kTransformDim || e_visual.size() != kTransformDim)
        throw std::invalid_argument("attention_weights: expected 512-d transformed inputs");
    Matrix z(1, kFusedDim);
    std::copy(e_audio.begin(), e_audio.end(), z.row(0).begin());
    std::copy(e_visual.begin(), e_visual.end(), z.row(0).begin() + kTransformDim);
    const Matrix logits = dense_forward(attention, z);
    const auto w = softmax(logits.row(0));
    return {w[0], w[1]};
}

/// Single-modality transform of one embedding (batch of one).
inline std::vector<double> transform_modality(TransformStack& stack,
                                              const std::vector<double>& emb,
                                              Mode mode = Mode::Eval) {
    Matrix input(1, emb.size());
    const auto normed = l2_normalize_or_zero(emb);
    std::copy(normed.begin(), normed.end(), input.row(0).begin());
    const Matrix out = detail::stack_forward(stack, input, mode, false, nullptr);
    return {out.row(0).begin(), out.row(0).end()};
}

/// Eval-mode fusion of a single utterance pair, as used for scoring.
inline FusedEmbedding fuse_forward(AfnParams& params, const UtterancePair& pair) {
    Matrix audio(1, kAudioDim), visual(1, kVisualDim);
    if (pair.audio_emb.size() != kAudioDim || pair.visual_emb.size() != kVisualDim)
        throw std::invalid_argument("fuse_forward: embedding dimensions do not match the network");
    std::copy(pair.audio_emb.begin(), pair.audio_emb.end(), audio.row(0).begin());
    std::copy(pair.visual_emb.begin(), pair.visual_emb.end(), visual.row(0).begin());
    FusionCache cache;
    const Matrix fused = fuse_batch_forward(params, audio, visual, Mode::Eval, false, &cache);
    FusedEmbedding out;
    out.vector.assign(fused.row(0).begin(), fused.row(0).end());
    out.attention_weights = {cache.attention_weights(0, 0), cache.attention_weights(0, 1)};
    return out;
}

/// Raw batch inputs as matrices, row ji = j*M + i.
inline std::pair<Matrix, Matrix> batch_inputs(const Batch& batch) {
    Matrix audio(batch.pairs.size(), kAudioDim), visual(batch.pairs.size(), kVisualDim);
    for (std::size_t r = 0; r < batch.pairs.size(); ++r) {
        std::copy(batch.pairs[r].audio_emb.begin(), batch.pairs[r].audio_emb.end(),
                  audio.row(r).begin());
        std::copy(batch.pairs[r].visual_emb.begin(), batch.pairs[r].visual_emb.end(),
                  visual.row(r).begin());
    }
    return {std::move(audio), std::move(visual)};
}

}  // namespace avfuse
