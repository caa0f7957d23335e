#include "dsp/paste.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace dsp {

std::vector<double> PasteMask::values() const {
    std::vector<double> out(support.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(i);
    return out;
}

std::size_t PasteMask::support_size() const {
    return static_cast<std::size_t>(std::count(support.begin(), support.end(), std::uint8_t{1}));
}

PasteMask PasteMask::with_beta(double b) const {
    PasteMask m = *this;
    m.beta = b;
    return m;
}

namespace {

void check_beta(double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("paste: beta must be in [0, 1]");
}

void check_size(const std::string& what, std::size_t h, std::size_t w, std::size_t eh, std::size_t ew) {
    if (h != eh || w != ew) {
        throw std::invalid_argument("paste: " + what + " is " + std::to_string(h) + "x" + std::to_string(w) +
                                    ", expected " + std::to_string(eh) + "x" + std::to_string(ew));
    }
}

}  // namespace

std::pair<PasteMask, CompositeTemplate> build_mask(const IterationSample& sample, std::span<const DatasetItem> source,
                                                   double beta) {
    check_beta(beta);
    if (sample.template_item >= source.size()) throw std::invalid_argument("paste: template index out of range");
    const auto& tmpl = source[sample.template_item];
    if (!tmpl.label) throw std::invalid_argument("paste: template item has no label");
    const std::size_t H = tmpl.image.height, W = tmpl.image.width;
    check_size("template label", tmpl.label->height, tmpl.label->width, H, W);

    PasteMask mask(H, W, beta);
    CompositeTemplate comp{tmpl.image, *tmpl.label};
    const auto& chosen = sample.chosen_classes;
    for (std::size_t p = 0; p < H * W; ++p) {
        if (std::find(chosen.begin(), chosen.end(), comp.label.data[p]) != chosen.end()) mask.support[p] = 1;
    }

    std::vector<std::uint8_t> tail_set;
    for (const auto& t : sample.tails) tail_set.push_back(t.cls);
    const std::size_t C = tmpl.image.channels;
    for (const auto& t : sample.tails) {
        if (t.item >= source.size()) throw std::invalid_argument("paste: tail item index out of range");
        const auto& item = source[t.item];
        if (!item.label) throw std::invalid_argument("paste: tail item " + item.id + " has no label");
        check_size("tail image " + item.id, item.image.height, item.image.width, H, W);
        check_size("tail label " + item.id, item.label->height, item.label->width, H, W);
        if (item.image.channels != C) throw std::invalid_argument("paste: channel count mismatch for " + item.id);
        for (std::size_t p = 0; p < H * W; ++p) {
            const auto cls = item.label->data[p];
            if (std::find(tail_set.begin(), tail_set.end(), cls) == tail_set.end()) continue;
            mask.support[p] = 1;
            comp.label.data[p] = cls;
            std::copy_n(item.image.data.begin() + static_cast<long>(p * C), C,
                        comp.image.data.begin() + static_cast<long>(p * C));
        }
    }
    return {std::move(mask), std::move(comp)};
}

Image mix_image(const Image& base, const PasteMask& mask, const Image& template_image) {
    check_beta(mask.beta);
    check_size("base image", base.height, base.width, mask.height, mask.width);
    check_size("template image", template_image.height, template_image.width, mask.height, mask.width);
    if (base.channels != template_image.channels) throw std::invalid_argument("paste: channel count mismatch");
    Image out = base;
    const std::size_t C = base.channels;
    const double b = mask.beta, rest = 1.0 - mask.beta;
    for (std::size_t p = 0; p < mask.support.size(); ++p) {
        if (!mask.support[p]) continue;
        for (std::size_t c = 0; c < C; ++c) {
            const double v = b * template_image.data[p * C + c] + rest * base.data[p * C + c];
            out.data[p * C + c] = std::clamp(v, 0.0, 1.0);
        }
    }
    return out;
}

MixedLabels mix_labels(const PasteMask& mask, const LabelMap& template_label, const LabelMap& base_label) {
    check_size("template label", template_label.height, template_label.width, mask.height, mask.width);
    check_size("base label", base_label.height, base_label.width, mask.height, mask.width);
    MixedLabels out{template_label, base_label, mask.values(), {}};
    out.base_weight.resize(out.paste_weight.size());
    for (std::size_t p = 0; p < out.paste_weight.size(); ++p) out.base_weight[p] = 1.0 - out.paste_weight[p];
    return out;
}

MixedPair mix(const Image& source_image, const LabelMap& source_label, const Image& target_image,
              const LabelMap& target_pseudo_label, const PasteMask& mask, const CompositeTemplate& tmpl) {
    MixedPair pair;
    pair.source_mixed = mix_image(source_image, mask, tmpl.image);
    pair.target_mixed = mix_image(target_image, mask, tmpl.image);
    pair.source_labels = mix_labels(mask, tmpl.label, source_label);
    pair.target_labels = mix_labels(mask, tmpl.label, target_pseudo_label);
    return pair;
}

}  // namespace dsp
