#pragma once

// Training objectives: pixel cross-entropy, the mask-weighted soft
// segmentation and consistency losses, and Gaussian-kernel MMD feature
// alignment on the paste patch and on whole feature maps.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dsp/image.hpp"
#include "dsp/paste.hpp"
#include "dsp/tensor.hpp"

namespace dsp {

struct LossBreakdown {
    double seg = 0.0;
    double seg_soft = 0.0;
    double cons = 0.0;
    double paste_mmd = 0.0;
    double global_mmd = 0.0;
    double total = 0.0;
    double lambda_feature = 0.0;
};

struct MmdConfig {
    /// Fixed Gaussian bandwidth sigma. When empty the bandwidth is chosen per
    /// call: sigma^2 = median of pooled pairwise squared distances.
    std::optional<double> bandwidth;
};

/// Mean of -log p(y) over non-ignored pixels. All pixels ignored -> 0 (with a
/// warning). log_probs is [H, W, C].
Tensor seg_loss(Tape& tape, const Tensor& log_probs, const LabelMap& labels);

/// Σ [w_p CE(paste_label) + w_b CE(base_label)] / Σ (w_p [paste valid] + w_b [base valid]).
/// With no ignored pixels the denominator is the pixel count.
Tensor weighted_pair_loss(Tape& tape, const Tensor& log_probs, const MixedLabels& labels);

/// Mixed-source loss: paste labels weighted by M, source labels by 1 - M.
Tensor seg_soft_loss(Tape& tape, const Tensor& log_probs, const LabelMap& paste_label, const LabelMap& source_label,
                     const PasteMask& mask);
/// Mixed-target loss: paste labels weighted by M, teacher pseudo-labels by 1 - M.
Tensor consistency_loss(Tape& tape, const Tensor& log_probs, const LabelMap& paste_label,
                        const LabelMap& pseudo_label, const PasteMask& mask);

/// Squared distance median heuristic over all unordered pairs of the pooled
/// rows. Falls back to the mean positive squared distance when the median is
/// zero, and to 1 when all rows coincide.
double median_heuristic_sigma2(const Tensor& a, const Tensor& b);

/// Biased V-statistic MMD^2 between the rows of a [n, F] and b [m, F] with
/// k(x, y) = exp(-|x - y|^2 / (2 sigma^2)), clamped at 0. An undefined input
/// (empty sample set) yields 0 with a warning. Gradients flow through the
/// median-heuristic bandwidth as well.
Tensor mmd2(Tape& tape, const Tensor& a, const Tensor& b, const MmdConfig& config = {});

/// Average-pools the soft mask values to a feature grid `factor` times coarser.
std::vector<double> pool_mask(const PasteMask& mask, std::size_t factor);

struct FeatureAlignment {
    Tensor paste;   // MMD between mask-weighted feature vectors on the pooled support
    Tensor global;  // MMD between all feature vectors
};

/// f_ps and f_pt are [h, w, F]; the mask is at image resolution and must be
/// an integer multiple of (h, w).
FeatureAlignment feature_alignment(Tape& tape, const Tensor& f_ps, const Tensor& f_pt, const PasteMask& mask,
                                   const MmdConfig& config = {});

/// seg + seg_soft + cons + lambda * (paste + global).
Tensor total_objective(Tape& tape, const Tensor& seg, const Tensor& seg_soft, const Tensor& cons, const Tensor& paste,
                       const Tensor& global, double lambda_feature);

/// Loss log columns: iteration,seg,seg_soft,cons,paste_mmd,global_mmd,total,lr
std::string loss_csv_header();
/// One CSV line (with trailing newline). Values use 17 significant digits so
/// the log is an exact record of the doubles.
std::string loss_csv_row(std::size_t iteration, const LossBreakdown& losses, double lr);

}  // namespace dsp
