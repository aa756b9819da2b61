#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <vector>

#include "avfuse/matrix.hpp"

namespace avfuse {

struct TrialScore {
    int label = 0;  // 1 = target (same speaker), 0 = nontarget
    double score = 0.0;
};

inline double cosine_score(std::span<const double> a, std::span<const double> b) {
    return cosine_similarity(a, b);
}

// ---- equal error rate ----

struct EerResult {
    double eer = 0.0;
    double threshold = 0.0;
};

/// Sweeps every achievable operating point: candidate thresholds are the
/// sorted unique scores plus +inf. FNR(t) counts targets below t, FPR(t)
/// counts nontargets at or above t. Returns (FPR+FNR)/2 at the threshold
/// minimizing |FPR-FNR|, ties resolved toward the lower threshold.
inline EerResult eer(const std::vector<TrialScore>& scores) {
    std::vector<double> targets, nontargets;
    for (const auto& s : scores) (s.label == 1 ? targets : nontargets).push_back(s.score);
    if (targets.empty() || nontargets.empty())
        throw std::invalid_argument("eer: need at least one target and one nontarget trial");
    std::sort(targets.begin(), targets.end());
    std::sort(nontargets.begin(), nontargets.end());

    std::vector<double> candidates;
    candidates.reserve(scores.size() + 1);
    for (double v : targets) candidates.push_back(v);
    for (double v : nontargets) candidates.push_back(v);
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    candidates.push_back(std::numeric_limits<double>::infinity());

    EerResult best;
    double best_gap = std::numeric_limits<double>::infinity();
    for (double t : candidates) {
        const auto below = [&](const std::vector<double>& v) {
            return static_cast<double>(std::lower_bound(v.begin(), v.end(), t) - v.begin());
        };
        const double fnr = below(targets) / static_cast<double>(targets.size());
        const double fpr = (static_cast<double>(nontargets.size()) - below(nontargets)) /
                           static_cast<double>(nontargets.size());
        const double gap = std::abs(fpr - fnr);
        if (gap < best_gap) {
            best_gap = gap;
            best.eer = 0.5 * (fpr + fnr);
            best.threshold = t;
        }
    }
    return best;
}

// ---- distance distributions (per reference speaker) ----

struct DistanceDistributions {
    std::vector<double> intraclass;  // all unordered pairs within the reference speaker
    std::vector<double> interclass;  // reference centroid vs every other speaker centroid
};

inline double euclidean(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

/// `groups` holds one embedding matrix per speaker (rows = utterances).
inline DistanceDistributions distance_distributions(const std::vector<Matrix>& groups,
                                                    std::size_t reference) {
    if (reference >= groups.size())
        throw std::invalid_argument("distance_distributions: reference speaker out of range");
    const Matrix& ref = groups[reference];
    if (ref.rows < 2)
        throw std::invalid_argument("distance_distributions: reference speaker needs >= 2 utterances");

    DistanceDistributions out;
    for (std::size_t i = 0; i < ref.rows; ++i)
        for (std::size_t j = i + 1; j < ref.rows; ++j)
            out.intraclass.push_back(euclidean(ref.row(i), ref.row(j)));

    auto centroid = [](const Matrix& g) {
        std::vector<double> c(g.cols, 0.0);
        for (std::size_t r = 0; r < g.rows; ++r)
            for (std::size_t d = 0; d < g.cols; ++d) c[d] += g(r, d);
        for (double& v : c) v /= static_cast<double>(g.rows);
        return c;
    };
    const std::vector<double> ref_centroid = centroid(ref);
    for (std::size_t s = 0; s < groups.size(); ++s) {
        if (s == reference) continue;
        out.interclass.push_back(euclidean(ref_centroid, centroid(groups[s])));
    }
    return out;
}

// ---- cluster validity indices ----

namespace detail {

struct Clusters {
    std::vector<std::vector<std::size_t>> members;  // by cluster
    std::vector<std::vector<double>> centroids;
};

inline Clusters group_by_label(const Matrix& points, const std::vector<int>& labels) {
    if (points.rows != labels.size())
        throw std::invalid_argument("cluster indices: points/labels size mismatch");
    if (points.rows == 0) throw std::invalid_argument("cluster indices: empty input");
    std::vector<int> unique = labels;
    std::sort(unique.begin(), unique.end());
    unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
    if (unique.size() < 2) throw std::invalid_argument("cluster indices: need >= 2 clusters");

    Clusters out;
    out.members.resize(unique.size());
    for (std::size_t r = 0; r < points.rows; ++r) {
        const std::size_t c = static_cast<std::size_t>(
            std::lower_bound(unique.begin(), unique.end(), labels[r]) - unique.begin());
        out.members[c].push_back(r);
    }
    out.centroids.assign(unique.size(), std::vector<double>(points.cols, 0.0));
    for (std::size_t c = 0; c < out.members.size(); ++c) {
        for (std::size_t r : out.members[c])
            for (std::size_t d = 0; d < points.cols; ++d) out.centroids[c][d] += points(r, d);
        for (double& v : out.centroids[c]) v /= static_cast<double>(out.members[c].size());
    }
    return out;
}

}  // namespace detail

/// Mean silhouette over all points (Euclidean); singleton clusters and 0/0
/// degeneracies score 0 by convention.
inline double silhouette(const Matrix& points, const std::vector<int>& labels) {
    const auto clusters = detail::group_by_label(points, labels);
    double total = 0.0;
    for (std::size_t c = 0; c < clusters.members.size(); ++c) {
        for (std::size_t r : clusters.members[c]) {
            if (clusters.members[c].size() < 2) continue;  // singleton scores 0
            double a = 0.0;
            for (std::size_t q : clusters.members[c])
                if (q != r) a += euclidean(points.row(r), points.row(q));
            a /= static_cast<double>(clusters.members[c].size() - 1);

            double b = std::numeric_limits<double>::infinity();
            for (std::size_t o = 0; o < clusters.members.size(); ++o) {
                if (o == c) continue;
                double mean = 0.0;
                for (std::size_t q : clusters.members[o])
                    mean += euclidean(points.row(r), points.row(q));
                b = std::min(b, mean / static_cast<double>(clusters.members[o].size()));
            }
            const double denom = std::max(a, b);
            total += denom > 0.0 ? (b - a) / denom : 0.0;
        }
    }
    return total / static_cast<double>(points.rows);
}

/// Between/within dispersion ratio scaled by (n-k)/(k-1).
inline double calinski_harabasz(const Matrix& points, const std::vector<int>& labels) {
    const auto clusters = detail::group_by_label(points, labels);
    const std::size_t n = points.rows, k = clusters.members.size();
    if (n <= k) throw std::invalid_argument("calinski_harabasz: need more points than clusters");

    std::vector<double> grand(points.cols, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t d = 0; d < points.cols; ++d) grand[d] += points(r, d);
    for (double& v : grand) v /= static_cast<double>(n);

    double between = 0.0, within = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        double dist = 0.0;
        for (std::size_t d = 0; d < points.cols; ++d)
            dist += (clusters.centroids[c][d] - grand[d]) * (clusters.centroids[c][d] - grand[d]);
        between += static_cast<double>(clusters.members[c].size()) * dist;
        for (std::size_t r : clusters.members[c])
            for (std::size_t d = 0; d < points.cols; ++d)
                within += (points(r, d) - clusters.centroids[c][d]) *
                          (points(r, d) - clusters.centroids[c][d]);
    }
    if (within <= 0.0)
        throw std::invalid_argument("calinski_harabasz: zero within-cluster dispersion");
    return (between / static_cast<double>(k - 1)) / (within / static_cast<double>(n - k));
}

/// Mean over clusters of the worst (s_i + s_j) / d_ij ratio.
inline double davies_bouldin(const Matrix& points, const std::vector<int>& labels) {
    const auto clusters = detail::group_by_label(points, labels);
    const std::size_t k = clusters.members.size();

    std::vector<double> scatter(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t r : clusters.members[c])
            scatter[c] += euclidean(points.row(r), clusters.centroids[c]);
        scatter[c] /= static_cast<double>(clusters.members[c].size());
    }

    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (i == j) continue;
            const double d = euclidean(clusters.centroids[i], clusters.centroids[j]);
            if (d <= 0.0)
                throw std::invalid_argument("davies_bouldin: coincident cluster centroids");
            worst = std::max(worst, (scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    return total / static_cast<double>(k);
}

// ---- plot-ready exports ----

struct Histogram {
    double lo = 0.0;
    double hi = 2.0;
    double bin_width = 0.02;
    std::vector<std::size_t> intraclass;
    std::vector<std::size_t> interclass;
};

inline Histogram make_histogram(const DistanceDistributions& dd, double bin_width = 0.02,
                                double lo = 0.0, double hi = 2.0) {
    if (bin_width <= 0.0 || hi <= lo) throw std::invalid_argument("make_histogram: bad bin spec");
    Histogram h;
    h.lo = lo;
    h.hi = hi;
    h.bin_width = bin_width;
    const std::size_t bins = static_cast<std::size_t>(std::ceil((hi - lo) / bin_width));
    h.intraclass.assign(bins, 0);
    h.interclass.assign(bins, 0);
    auto drop = [&](std::vector<std::size_t>& counts, double v) {
        if (v < lo || v > hi) return;  // out of plotting range
        std::size_t bin = static_cast<std::size_t>((v - lo) / bin_width);
        if (bin >= counts.size()) bin = counts.size() - 1;  // top edge
        ++counts[bin];
    };
    for (double v : dd.intraclass) drop(h.intraclass, v);
    for (double v : dd.interclass) drop(h.interclass, v);
    return h;
}

inline void write_histogram_csv(const Histogram& h, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write histogram: " + path.string());
    out << "bin_left,bin_right,intraclass_count,interclass_count\n";
    char buf[128];
    for (std::size_t b = 0; b < h.intraclass.size(); ++b) {
        std::snprintf(buf, sizeof buf, "%.6g,%.6g,%zu,%zu\n", h.lo + h.bin_width * b,
                      h.lo + h.bin_width * (b + 1), h.intraclass[b], h.interclass[b]);
        out << buf;
    }
}

inline void write_scores_csv(const std::vector<TrialScore>& scores,
                             const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write scores: " + path.string());
    out << "label,score\n";
    char buf[64];
    for (const auto& s : scores) {
        std::snprintf(buf, sizeof buf, "%d,%.9g\n", s.label, s.score);
        out << buf;
    }
}

}  // namespace avfuse
