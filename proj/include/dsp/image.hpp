#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dsp/tensor.hpp"

namespace dsp {

/// H×W×channels intensities, row-major, channel-last. Values live in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<double> data;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c = 3, double fill = 0.0)
        : height(h), width(w), channels(c), data(h * w * c, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * channels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }
    std::size_t pixels() const { return height * width; }

    Tensor to_tensor() const { return Tensor({height, width, channels}, data); }

    friend bool operator==(const Image&, const Image&) = default;
};

/// H×W class ids; kIgnoreLabel (255) marks pixels excluded from losses and metrics.
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> data;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
    std::size_t pixels() const { return height * width; }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace dsp
