#pragma once

// Long-tail class statistics over the labeled source split and the
// per-iteration draw of a paste template plus long-tail items.

#include <cstdint>
#include <span>
#include <vector>

#include "dsp/domains.hpp"
#include "dsp/image.hpp"
#include "dsp/rng.hpp"

namespace dsp {

struct ClassStats {
    std::size_t classes = 0;
    std::size_t images = 0;                        // N
    std::vector<double> frequency;                 // p_i
    std::vector<std::vector<bool>> occurrence;     // [class][image]: class present (>= 1 pixel)
    std::vector<std::uint64_t> pixel_count;        // per-class pixel totals
};

/// Throws std::invalid_argument on an empty label list.
ClassStats compute_stats(std::span<const LabelMap> labels, std::size_t classes);
ClassStats compute_stats(std::span<const DatasetItem> source, std::size_t classes);

/// Classes present in a label map (ignore label excluded), ascending.
std::vector<std::uint8_t> present_classes(const LabelMap& label, std::size_t classes);

struct LongTailIndex {
    std::size_t classes = 0;
    std::size_t K = 0;
    /// The K least frequent classes, ordered by (frequency, class id).
    std::vector<std::uint8_t> tail_classes;
    /// items[i] lists the source indices containing tail_classes[i].
    std::vector<std::vector<std::size_t>> items;

    const std::vector<std::size_t>& items_for(std::uint8_t cls) const;
    bool is_tail(std::uint8_t cls) const;
};

/// Throws std::invalid_argument unless 1 <= K < classes.
LongTailIndex build_index(const ClassStats& stats, std::size_t K);

struct TailPick {
    std::uint8_t cls;
    std::size_t item;
};

struct IterationSample {
    std::size_t template_item = 0;
    std::vector<std::uint8_t> chosen_classes;  // ascending
    std::vector<TailPick> tails;               // in draw order; later entries paste over earlier
};

/// Number of classes to select from a template with `present` classes:
/// ceil(present / 2), at least one when any class is present.
std::size_t half_class_count(std::size_t present);

/// Template drawn uniformly from `source`, half of its classes chosen
/// uniformly, then up to k distinct tail classes (uniform among those with
/// a nonempty item list) with one uniformly drawn item each.
IterationSample draw_iteration(const LongTailIndex& index, std::span<const DatasetItem> source, std::size_t k,
                               Rng& rng);

}  // namespace dsp
