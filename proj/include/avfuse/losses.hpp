#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "avfuse/fusion.hpp"
#include "avfuse/matrix.hpp"
#include "avfuse/nn.hpp"

namespace avfuse {

inline constexpr std::size_t kAgeHiddenDim = 256;

// ---- scaled-cosine similarity against speaker centroids ----

/// Learnable scale/offset of the similarity matrix. Scale is clamped
/// positive after every optimizer step.
struct Ge2eParams {
    Matrix scale{1, 1, 10.0};
    Matrix offset{1, 1, -5.0};

    double w() const { return scale(0, 0); }
    double b() const { return offset(0, 0); }

    void clamp_scale(double floor = 1e-4) {
        if (scale(0, 0) < floor) scale(0, 0) = floor;
    }
};

/// (N*M) x N scaled cosine similarities, row ji = j*M + i.
struct SimilarityMatrix {
    Matrix values;
    std::size_t n = 0;
    std::size_t m = 0;
};

/// Per-speaker arithmetic mean of the M embeddings (the full centroid,
/// including the query embedding itself).
inline Matrix compute_centroids(const Matrix& embeddings, std::size_t n, std::size_t m) {
    if (m < 1 || n < 1 || embeddings.rows != n * m)
        throw std::invalid_argument("compute_centroids: embeddings are not an NxM batch");
    Matrix centroids(n, embeddings.cols);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < m; ++i) {
            const auto row = embeddings.row(j * m + i);
            for (std::size_t d = 0; d < embeddings.cols; ++d) centroids(j, d) += row[d];
        }
        for (std::size_t d = 0; d < embeddings.cols; ++d)
            centroids(j, d) /= static_cast<double>(m);
    }
    return centroids;
}

inline SimilarityMatrix similarity_matrix(const Matrix& embeddings, const Matrix& centroids,
                                          const Ge2eParams& params) {
    if (centroids.cols != embeddings.cols)
        throw std::invalid_argument("similarity_matrix: dimension mismatch");
    const std::size_t n = centroids.rows;
    if (embeddings.rows % n != 0)
        throw std::invalid_argument("similarity_matrix: rows not divisible by speaker count");
    SimilarityMatrix sim;
    sim.n = n;
    sim.m = embeddings.rows / n;
    sim.values = Matrix(embeddings.rows, n);
    for (std::size_t r = 0; r < embeddings.rows; ++r)
        for (std::size_t k = 0; k < n; ++k)
            sim.values(r, k) =
                params.w() * cosine_similarity(embeddings.row(r), centroids.row(k)) + params.b();
    return sim;
}

// ---- contrastive loss over the similarity matrix ----

struct Ge2eLossResult {
    double loss = 0.0;
    Matrix sim_grad;  // d(loss)/dS, at most 2 nonzero entries per row
};

/// Per embedding: 1 - sigmoid(positive similarity) + sigmoid of the hardest
/// wrong-speaker similarity; summed over all N*M embeddings. The max is
/// subdifferentiable; ties route the gradient to the lowest speaker index.
inline Ge2eLossResult ge2e_mm_loss(const SimilarityMatrix& sim) {
    if (sim.n < 2)
        throw std::invalid_argument("ge2e_mm_loss: need at least 2 speakers for the negative term");
    Ge2eLossResult out;
    out.sim_grad = Matrix(sim.values.rows, sim.values.cols);
    for (std::size_t r = 0; r < sim.values.rows; ++r) {
        const std::size_t j = r / sim.m;
        std::size_t hardest = j == 0 ? 1 : 0;
        for (std::size_t k = 0; k < sim.n; ++k) {
            if (k == j) continue;
            if (sim.values(r, k) > sim.values(r, hardest)) hardest = k;
        }
        const double s_pos = sim.values(r, j);
        const double s_neg = sim.values(r, hardest);
        const double sig_pos = sigmoid(s_pos);
        const double sig_neg = sigmoid(s_neg);
        out.loss += 1.0 - sig_pos + sig_neg;
        out.sim_grad(r, j) -= sig_pos * (1.0 - sig_pos);
        out.sim_grad(r, hardest) += sig_neg * (1.0 - sig_neg);
    }
    return out;
}

// ---- full composition: embeddings -> centroids -> similarity -> loss ----

struct Ge2eOptions {
    /// Leave-one-out centroid for the positive term (the query embedding is
    /// excluded from its own centroid). Off by default: the full-centroid
    /// form is the primary definition.
    bool exclusive_positive_centroid = false;
};

struct Ge2eResult {
    double loss = 0.0;
    Matrix embedding_grad;  // (N*M) x D
    Matrix scale_grad{1, 1};
    Matrix offset_grad{1, 1};
    SimilarityMatrix sim;
};

namespace detail {

struct CosineBackward {
    // d cos(u, c) contributions for both arguments.
    static void accumulate(std::span<const double> u, std::span<const double> c, double upstream,
                           std::span<double> du, std::span<double> dc) {
        const double nu = norm2(u), nc = norm2(c);
        const double inv = 1.0 / (nu * nc);
        const double cos_uc = dot(u, c) * inv;
        for (std::size_t d = 0; d < u.size(); ++d) {
            du[d] += upstream * (c[d] * inv - cos_uc * u[d] / (nu * nu));
            dc[d] += upstream * (u[d] * inv - cos_uc * c[d] / (nc * nc));
        }
    }
};

}  // namespace detail

/// GE2E-MM loss with analytic gradients through the whole chain, including
/// the dependence of every centroid on every embedding of its speaker.
inline Ge2eResult ge2e_mm(const Matrix& embeddings, std::size_t n, std::size_t m,
                          const Ge2eParams& params, const Ge2eOptions& opts = {}) {
    if (n < 2) throw std::invalid_argument("ge2e_mm: need at least 2 speakers");
    if (opts.exclusive_positive_centroid && m < 2)
        throw std::invalid_argument("ge2e_mm: exclusive positive centroid needs M >= 2");
    const std::size_t d = embeddings.cols;
    const Matrix centroids = compute_centroids(embeddings, n, m);

    Ge2eResult out;
    out.sim = similarity_matrix(embeddings, centroids, params);

    // Leave-one-out positives replace the diagonal-block entries.
    Matrix excl_centroids;  // (N*M) x D, row r holds c_{j(r)} without e_r
    if (opts.exclusive_positive_centroid) {
        excl_centroids = Matrix(n * m, d);
        for (std::size_t r = 0; r < n * m; ++r) {
            const std::size_t j = r / m;
            for (std::size_t dd = 0; dd < d; ++dd)
                excl_centroids(r, dd) =
                    (centroids(j, dd) * static_cast<double>(m) - embeddings(r, dd)) /
                    static_cast<double>(m - 1);
            out.sim.values(r, j) =
                params.w() * cosine_similarity(embeddings.row(r), excl_centroids.row(r)) +
                params.b();
        }
    }

    const Ge2eLossResult loss = ge2e_mm_loss(out.sim);
    out.loss = loss.loss;

    // Chain rule back to embeddings, scale and offset.
    out.embedding_grad = Matrix(n * m, d);
    Matrix centroid_grad(n, d);
    double dw = 0.0, db = 0.0;
    for (std::size_t r = 0; r < n * m; ++r) {
        const std::size_t j = r / m;
        for (std::size_t k = 0; k < n; ++k) {
            const double ds = loss.sim_grad(r, k);
            if (ds == 0.0) continue;
            const bool is_excl_positive = opts.exclusive_positive_centroid && k == j;
            const auto centroid =
                is_excl_positive ? excl_centroids.row(r) : std::span<const double>(centroids.row(k));
            const double cos_rk = cosine_similarity(embeddings.row(r), centroid);
            dw += ds * cos_rk;
            db += ds;
            const double dcos = ds * params.w();
            if (is_excl_positive) {
                // Route centroid gradient straight to the M-1 contributors.
                std::vector<double> dc(d, 0.0);
                detail::CosineBackward::accumulate(embeddings.row(r), centroid, dcos,
                                                   out.embedding_grad.row(r), dc);
                for (std::size_t i = 0; i < m; ++i) {
                    const std::size_t rr = j * m + i;
                    if (rr == r) continue;
                    for (std::size_t dd = 0; dd < d; ++dd)
                        out.embedding_grad(rr, dd) += dc[dd] / static_cast<double>(m - 1);
                }
            } else {
                detail::CosineBackward::accumulate(embeddings.row(r), centroid, dcos,
                                                   out.embedding_grad.row(r),
                                                   centroid_grad.row(k));
            }
        }
    }
    // Full centroids: c_k = mean of speaker k's embeddings.
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t dd = 0; dd < d; ++dd)
                out.embedding_grad(j * m + i, dd) +=
                    centroid_grad(j, dd) / static_cast<double>(m);

    out.scale_grad(0, 0) = dw;
    out.offset_grad(0, 0) = db;
    return out;
}

// ---- triplet baseline ----

struct TripletConfig {
    double margin = 0.2;

    void validate() const {
        if (margin <= 0.0) throw std::invalid_argument("TripletConfig: margin must be positive");
    }
};

struct TripletTerm {
    double value = 0.0;
    std::vector<double> anchor_grad;
    std::vector<double> positive_grad;
    std::vector<double> negative_grad;
};

/// max(0, |a-p|^2 - |a-n|^2 + margin) for one triplet.
inline TripletTerm triplet_term(std::span<const double> anchor, std::span<const double> positive,
                                std::span<const double> negative, const TripletConfig& cfg) {
    cfg.validate();
    const std::size_t d = anchor.size();
    if (positive.size() != d || negative.size() != d)
        throw std::invalid_argument("triplet_term: dimension mismatch");
    double dp = 0.0, dn = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        dp += (anchor[i] - positive[i]) * (anchor[i] - positive[i]);
        dn += (anchor[i] - negative[i]) * (anchor[i] - negative[i]);
    }
    TripletTerm out;
    out.anchor_grad.assign(d, 0.0);
    out.positive_grad.assign(d, 0.0);
    out.negative_grad.assign(d, 0.0);
    const double raw = dp - dn + cfg.margin;
    if (raw <= 0.0) return out;
    out.value = raw;
    for (std::size_t i = 0; i < d; ++i) {
        out.anchor_grad[i] = 2.0 * (negative[i] - positive[i]);
        out.positive_grad[i] = 2.0 * (positive[i] - anchor[i]);
        out.negative_grad[i] = 2.0 * (anchor[i] - negative[i]);
    }
    return out;
}

struct TripletResult {
    double loss = 0.0;
    Matrix embedding_grad;
    std::size_t active_triplets = 0;
};

/// Batch-mined triplet loss: every embedding anchors one triplet built from
/// its hardest (farthest) in-batch positive and hardest (closest) in-batch
/// negative; terms are summed. Ties break toward the lowest row index.
inline TripletResult triplet_loss(const Matrix& embeddings, std::size_t n, std::size_t m,
                                  const TripletConfig& cfg) {
    cfg.validate();
    if (embeddings.rows != n * m) throw std::invalid_argument("triplet_loss: not an NxM batch");
    TripletResult out;
    out.embedding_grad = Matrix(n * m, embeddings.cols);

    auto sq_dist = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t dd = 0; dd < embeddings.cols; ++dd) {
            const double diff = embeddings(a, dd) - embeddings(b, dd);
            s += diff * diff;
        }
        return s;
    };

    bool any_valid = false;
    for (std::size_t r = 0; r < n * m; ++r) {
        const std::size_t j = r / m;
        std::ptrdiff_t hardest_pos = -1, hardest_neg = -1;
        double worst_pos = -1.0, best_neg = 0.0;
        for (std::size_t q = 0; q < n * m; ++q) {
            if (q == r) continue;
            const double dist = sq_dist(r, q);
            if (q / m == j) {
                if (dist > worst_pos) {
                    worst_pos = dist;
                    hardest_pos = static_cast<std::ptrdiff_t>(q);
                }
            } else if (hardest_neg < 0 || dist < best_neg) {
                best_neg = dist;
                hardest_neg = static_cast<std::ptrdiff_t>(q);
            }
        }
        if (hardest_pos < 0 || hardest_neg < 0) continue;
        any_valid = true;
        const std::size_t p = static_cast<std::size_t>(hardest_pos);
        const std::size_t g = static_cast<std::size_t>(hardest_neg);
        const TripletTerm term =
            triplet_term(embeddings.row(r), embeddings.row(p), embeddings.row(g), cfg);
        if (term.value > 0.0) ++out.active_triplets;
        out.loss += term.value;
        for (std::size_t dd = 0; dd < embeddings.cols; ++dd) {
            out.embedding_grad(r, dd) += term.anchor_grad[dd];
            out.embedding_grad(p, dd) += term.positive_grad[dd];
            out.embedding_grad(g, dd) += term.negative_grad[dd];
        }
    }
    if (!any_valid)
        throw std::invalid_argument(
            "triplet_loss: batch contains no valid triplet (need a positive and a negative)");
    return out;
}

// ---- auxiliary age regression ----

/// dense(1024->256) -> ReLU -> batchnorm -> dense(256->1), sigmoid output.
struct AgeHeadParams {
    TransformStack stack{kFusedDim, kAgeHiddenDim, 1};

    static AgeHeadParams make(Rng& rng) {
        AgeHeadParams p;
        p.stack.init(rng);
        return p;
    }
};

struct AgeLossResult {
    double loss = 0.0;
    Matrix fused_grad;  // gradient into the fused embeddings
    AgeHeadParams grads;
    std::vector<double> predictions;  // per utterance, in (0,1)
    std::size_t labeled_count = 0;
};

/// Mean squared error over utterances whose speaker carries an age label.
/// Unlabeled utterances contribute neither loss nor gradient; with no labels
/// at all the loss is exactly zero.
inline AgeLossResult aux_age_loss(AgeHeadParams& head, const Matrix& fused,
                                  const std::vector<std::optional<double>>& age_labels,
                                  std::size_t n, std::size_t m, Mode mode,
                                  bool update_running = true) {
    if (fused.rows != n * m || age_labels.size() != n)
        throw std::invalid_argument("aux_age_loss: batch shape mismatch");

    detail::StackCache cache;
    const Matrix raw = detail::stack_forward(head.stack, fused, mode, update_running, &cache);

    AgeLossResult out;
    out.fused_grad = Matrix(fused.rows, fused.cols);
    out.predictions.resize(fused.rows);
    for (std::size_t r = 0; r < fused.rows; ++r) out.predictions[r] = sigmoid(raw(r, 0));
    for (std::size_t j = 0; j < n; ++j)
        if (age_labels[j]) out.labeled_count += m;
    if (out.labeled_count == 0) return out;  // grads stay zero

    Matrix d_raw(fused.rows, 1);
    for (std::size_t r = 0; r < fused.rows; ++r) {
        const auto& label = age_labels[r / m];
        if (!label) continue;
        const double p = out.predictions[r];
        const double err = p - *label;
        out.loss += err * err;
        d_raw(r, 0) = 2.0 * err / static_cast<double>(out.labeled_count) * p * (1.0 - p);
    }
    out.loss /= static_cast<double>(out.labeled_count);

    TransformStack grads;
    out.fused_grad = detail::stack_backward(head.stack, cache, d_raw, grads);
    out.grads.stack = std::move(grads);
    return out;
}

// ---- multi-task combination ----

struct MtlConfig {
    double gamma = 0.015;

    void validate() const {
        if (gamma < 0.0 || gamma > 1.0)
            throw std::invalid_argument("MtlConfig: gamma outside [0,1]");
    }
};

inline double mtl_loss(double l_g, double l_aux, const MtlConfig& cfg) {
    cfg.validate();
    return cfg.gamma * l_g + (1.0 - cfg.gamma) * l_aux;
}

}  // namespace avfuse
