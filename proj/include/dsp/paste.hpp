#pragma once

// Dual soft-paste composition: build the paste mask and composite template
// from an iteration draw, then blend the same patch into a source image and
// a target image with opacity beta.

#include <span>
#include <utility>
#include <vector>

#include "dsp/domains.hpp"
#include "dsp/image.hpp"
#include "dsp/sampling.hpp"

namespace dsp {

/// Soft mask storing the binary support and the opacity; value(i) is beta on
/// the support and exactly 0 elsewhere.
struct PasteMask {
    std::size_t height = 0;
    std::size_t width = 0;
    double beta = 1.0;
    std::vector<std::uint8_t> support;

    PasteMask() = default;
    PasteMask(std::size_t h, std::size_t w, double beta_) : height(h), width(w), beta(beta_), support(h * w, 0) {}

    double value(std::size_t pixel) const { return support[pixel] ? beta : 0.0; }
    std::vector<double> values() const;
    std::size_t support_size() const;
    /// Same support with a different opacity.
    PasteMask with_beta(double b) const;
};

struct CompositeTemplate {
    Image image;     // template with tail-item pixels copied in
    LabelMap label;  // matching labels
};

/// Per-pixel pair of (paste label, weight M) and (base label, weight 1 - M).
struct MixedLabels {
    LabelMap paste_label;
    LabelMap base_label;
    std::vector<double> paste_weight;
    std::vector<double> base_weight;
};

struct MixedPair {
    Image source_mixed;  // x_ps
    Image target_mixed;  // x_pt
    MixedLabels source_labels;
    MixedLabels target_labels;
};

/// Support = template pixels whose class was chosen, unioned with tail-item
/// pixels whose class is one of the drawn tail classes. Tail pixels (image
/// and label) overwrite the template; later tail picks overwrite earlier.
/// Throws std::invalid_argument on size mismatch or beta outside [0, 1].
std::pair<PasteMask, CompositeTemplate> build_mask(const IterationSample& sample, std::span<const DatasetItem> source,
                                                   double beta);

/// M ⊙ template + (1 - M) ⊙ base per pixel and channel; pixels off the
/// support are copied from `base` unchanged.
Image mix_image(const Image& base, const PasteMask& mask, const Image& template_image);
MixedLabels mix_labels(const PasteMask& mask, const LabelMap& template_label, const LabelMap& base_label);

MixedPair mix(const Image& source_image, const LabelMap& source_label, const Image& target_image,
              const LabelMap& target_pseudo_label, const PasteMask& mask, const CompositeTemplate& tmpl);

}  // namespace dsp
