#include "dsp/sampling.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

#include "dsp/log.hpp"

namespace dsp {

ClassStats compute_stats(std::span<const LabelMap> labels, std::size_t classes) {
    if (labels.empty()) throw std::invalid_argument("compute_stats: source split is empty");
    if (classes == 0 || classes > 255) throw std::invalid_argument("compute_stats: class count must be in [1, 255]");
    ClassStats stats;
    stats.classes = classes;
    stats.images = labels.size();
    stats.occurrence.assign(classes, std::vector<bool>(labels.size(), false));
    stats.pixel_count.assign(classes, 0);
    for (std::size_t j = 0; j < labels.size(); ++j) {
        for (std::uint8_t v : labels[j].data) {
            if (v == kIgnoreLabel) continue;
            if (v >= classes) {
                throw std::invalid_argument("compute_stats: label " + std::to_string(v) + " in image " +
                                            std::to_string(j) + " exceeds class count");
            }
            stats.occurrence[v][j] = true;
            ++stats.pixel_count[v];
        }
    }
    stats.frequency.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        const auto hits = std::count(stats.occurrence[c].begin(), stats.occurrence[c].end(), true);
        stats.frequency[c] = static_cast<double>(hits) / static_cast<double>(labels.size());
    }
    return stats;
}

ClassStats compute_stats(std::span<const DatasetItem> source, std::size_t classes) {
    std::vector<LabelMap> labels;
    labels.reserve(source.size());
    for (const auto& item : source) {
        if (!item.label) throw std::invalid_argument("compute_stats: item " + item.id + " has no label");
        labels.push_back(*item.label);
    }
    return compute_stats(std::span<const LabelMap>(labels), classes);
}

std::vector<std::uint8_t> present_classes(const LabelMap& label, std::size_t classes) {
    std::vector<bool> seen(classes, false);
    for (std::uint8_t v : label.data) {
        if (v != kIgnoreLabel && v < classes) seen[v] = true;
    }
    std::vector<std::uint8_t> out;
    for (std::size_t c = 0; c < classes; ++c) {
        if (seen[c]) out.push_back(static_cast<std::uint8_t>(c));
    }
    return out;
}

const std::vector<std::size_t>& LongTailIndex::items_for(std::uint8_t cls) const {
    for (std::size_t i = 0; i < tail_classes.size(); ++i) {
        if (tail_classes[i] == cls) return items[i];
    }
    throw std::out_of_range("LongTailIndex: class " + std::to_string(cls) + " is not a tail class");
}

bool LongTailIndex::is_tail(std::uint8_t cls) const {
    return std::find(tail_classes.begin(), tail_classes.end(), cls) != tail_classes.end();
}

LongTailIndex build_index(const ClassStats& stats, std::size_t K) {
    if (K < 1 || K >= stats.classes) {
        throw std::invalid_argument("build_index: K=" + std::to_string(K) + " outside [1, " +
                                    std::to_string(stats.classes) + ")");
    }
    std::vector<std::size_t> order(stats.classes);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return stats.frequency[a] < stats.frequency[b]; });
    LongTailIndex index;
    index.classes = stats.classes;
    index.K = K;
    for (std::size_t i = 0; i < K; ++i) {
        const auto cls = order[i];
        index.tail_classes.push_back(static_cast<std::uint8_t>(cls));
        std::vector<std::size_t> hits;
        for (std::size_t j = 0; j < stats.images; ++j) {
            if (stats.occurrence[cls][j]) hits.push_back(j);
        }
        index.items.push_back(std::move(hits));
    }
    return index;
}

std::size_t half_class_count(std::size_t present) { return (present + 1) / 2; }

IterationSample draw_iteration(const LongTailIndex& index, std::span<const DatasetItem> source, std::size_t k,
                               Rng& rng) {
    if (source.empty()) throw std::invalid_argument("draw_iteration: source split is empty");
    if (k > index.K) {
        throw std::invalid_argument("draw_iteration: k=" + std::to_string(k) + " exceeds K=" + std::to_string(index.K));
    }
    IterationSample sample;
    sample.template_item = static_cast<std::size_t>(rng.index(source.size()));
    const auto& tmpl = source[sample.template_item];
    if (!tmpl.label) throw std::invalid_argument("draw_iteration: template item " + tmpl.id + " has no label");

    // Partial Fisher-Yates: the first `want` entries are a uniform subset.
    auto present = present_classes(*tmpl.label, index.classes);
    const std::size_t want = half_class_count(present.size());
    for (std::size_t i = 0; i < want; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.index(present.size() - i));
        std::swap(present[i], present[j]);
    }
    sample.chosen_classes.assign(present.begin(), present.begin() + static_cast<long>(want));
    std::sort(sample.chosen_classes.begin(), sample.chosen_classes.end());

    std::vector<std::size_t> order(index.tail_classes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < order.size() && sample.tails.size() < k; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.index(order.size() - i));
        std::swap(order[i], order[j]);
        const auto& pool = index.items[order[i]];
        if (pool.empty()) continue;
        sample.tails.push_back(TailPick{index.tail_classes[order[i]], pool[rng.index(pool.size())]});
    }
    if (sample.tails.size() < k) {
        log::warn("draw_iteration: only " + std::to_string(sample.tails.size()) + " of " + std::to_string(k) +
                  " tail classes have source items");
    }
    return sample;
}

}  // namespace dsp
