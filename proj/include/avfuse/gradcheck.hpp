#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "avfuse/matrix.hpp"
#include "avfuse/rng.hpp"

namespace avfuse {

/// Pairs a mutable parameter matrix with the analytic gradient claimed for it.
struct GradCheckBlock {
    std::string name;
    Matrix* value = nullptr;
    const Matrix* analytic = nullptr;
};

struct GradCheckOptions {
    double step = 1e-5;
    /// 0 checks every coordinate; otherwise a seeded random sample of up to
    /// this many coordinates per block.
    std::size_t max_coords_per_block = 0;
    std::uint64_t sample_seed = 0;
    /// Coordinates whose first probe exceeds this are re-probed with steps
    /// step/16 and step/256. A ReLU-kink crossing or curvature artifact
    /// collapses under a smaller step; a wrong analytic gradient does not.
    double refine_trigger = 1e-4;
    /// Agreement floor: |analytic - numeric| below this counts as a match.
    /// Central differences on an O(10) readout carry ~1e-9 cancellation
    /// noise, which would otherwise swamp structurally-zero gradients
    /// (e.g. a pre-batchnorm bias, absorbed by the batch mean).
    double abs_tolerance = 1e-7;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::string worst_block;
    std::size_t worst_index = 0;
};

/// Central finite differences against analytic gradients. `forward` must be a
/// pure function of the block values; each probed coordinate is perturbed in
/// place and restored.
inline GradCheckReport grad_check(const std::function<double()>& forward,
                                  const std::vector<GradCheckBlock>& blocks,
                                  const GradCheckOptions& opts = {}) {
    GradCheckReport report;
    Rng sampler(opts.sample_seed);
    for (const auto& block : blocks) {
        if (!block.value->same_shape(*block.analytic))
            throw std::invalid_argument("grad_check: analytic gradient shape mismatch in '" +
                                        block.name + "'");
        std::vector<std::size_t> coords;
        const std::size_t total = block.value->data.size();
        if (opts.max_coords_per_block == 0 || total <= opts.max_coords_per_block) {
            coords.resize(total);
            for (std::size_t i = 0; i < total; ++i) coords[i] = i;
        } else {
            for (std::size_t i = 0; i < opts.max_coords_per_block; ++i)
                coords.push_back(sampler.uniform_index(total));
        }
        for (std::size_t idx : coords) {
            double& x = block.value->data[idx];
            const double saved = x;
            const double analytic = block.analytic->data[idx];
            auto probe = [&](double h) {
                x = saved + h;
                const double f_plus = forward();
                x = saved - h;
                const double f_minus = forward();
                x = saved;
                const double numeric = (f_plus - f_minus) / (2.0 * h);
                if (std::abs(analytic - numeric) <= opts.abs_tolerance) return 0.0;
                return std::abs(analytic - numeric) /
                       std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            };
            double rel = probe(opts.step);
            for (double div : {16.0, 256.0}) {
                if (rel <= opts.refine_trigger) break;
                rel = std::min(rel, probe(opts.step / div));
            }
            ++report.coords_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_block = block.name;
                report.worst_index = idx;
            }
        }
    }
    return report;
}

}  // namespace avfuse
