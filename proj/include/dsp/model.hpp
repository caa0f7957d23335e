#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dsp/image.hpp"
#include "dsp/tensor.hpp"

namespace dsp {

/// Ordered name -> tensor collection for one network.
class ParamSet {
public:
    void add(std::string name, Tensor value);

    std::size_t size() const { return entries_.size(); }
    bool contains(const std::string& name) const;
    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    /// Deep copy. `requires_grad` applies to every copied tensor.
    ParamSet clone(bool requires_grad) const;
    /// Same names and shapes, all zeros, no grad.
    ParamSet zeros_like() const;

    /// Throws std::invalid_argument unless both sets have identical names,
    /// order and shapes.
    static void check_compatible(const ParamSet& a, const ParamSet& b, const std::string& context);

    /// Element-wise bitwise equality of names, shapes and data.
    friend bool operator==(const ParamSet& a, const ParamSet& b);

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

struct SegNetConfig {
    std::size_t classes = 8;
    std::size_t feature_width = 32;
    std::size_t in_channels = 3;
};

struct Prediction {
    Tensor features;   // [H/4, W/4, F], encoder output
    Tensor log_probs;  // [H, W, C]
};

/// Four 3×3 conv-relu blocks (strides 2, 2, 1, 1) followed by a 1×1 class
/// head, ×4 bilinear upsampling and per-pixel log-softmax.
class SegNet {
public:
    static constexpr int kDownsample = 4;
    static constexpr int kBlocks = 4;

    explicit SegNet(SegNetConfig config = {});

    const SegNetConfig& config() const { return config_; }

    /// He-normal weights, zero biases. Parameters require grad.
    ParamSet init_params(std::uint64_t seed) const;

    /// Runs the network on a [H, W, in_channels] tensor. Throws
    /// std::invalid_argument when H or W is not divisible by 4.
    Prediction predict(Tape& tape, const ParamSet& params, const Tensor& image) const;
    Prediction predict(Tape& tape, const ParamSet& params, const Image& image) const;

    /// True for parameters trained at the feature-extractor learning rate.
    static bool is_encoder_param(const std::string& name);

private:
    SegNetConfig config_;
};

/// teacher <- alpha * teacher + (1 - alpha) * student, element-wise.
void ema_update(ParamSet& teacher, const ParamSet& student, double alpha);

/// Per-pixel argmax over the class axis of [H, W, C]; ties go to the
/// smallest class id.
LabelMap argmax_labels(const Tensor& scores);

// --- checkpoint file -------------------------------------------------------

struct Checkpoint {
    std::uint32_t classes = 0;
    std::uint32_t feature_width = 0;
    std::uint64_t step = 0;
    ParamSet student;
    ParamSet teacher;
    ParamSet momentum;  // optimizer state; may be empty
};

/// Binary layout (little-endian):
///   "DSPCKPT1" | u32 classes | u32 feature_width | u64 step | u32 entries |
///   entries × { u32 name_len | name (UTF-8) | u32 rank | u32 extents[rank] | f64 data[] }
/// Entry names carry a "student/", "teacher/" or "momentum/" prefix.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dsp
