#pragma once

// Procedural paired segmentation domains: one scene layout distribution,
// two appearance styles (labeled source, unlabeled target).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dsp/image.hpp"

namespace dsp {

inline constexpr std::size_t kSceneClasses = 8;

enum class SceneClass : std::uint8_t { Background, Ground, Road, Building, Vehicle, Person, Sign, Bike };

const std::array<std::string, kSceneClasses>& scene_class_names();

/// Layout distribution. Background, ground and road are horizontal bands
/// present in every image; the remaining classes are spawned as shapes.
struct SceneSpec {
    std::size_t height = 64;
    std::size_t width = 64;
    /// Per-instance spawn probability per class. Entries for the three band
    /// classes are ignored (bands are always drawn).
    std::array<double, kSceneClasses> spawn_probs{1.0, 1.0, 1.0, 0.85, 0.6, 0.15, 0.10, 0.08};
    /// Maximum instance count per object class.
    std::array<int, kSceneClasses> max_instances{0, 0, 0, 3, 2, 1, 1, 1};

    std::size_t classes() const { return kSceneClasses; }
    void validate() const;
};

using Rgb = std::array<double, 3>;

struct DomainStyle {
    std::array<Rgb, kSceneClasses> palette{};
    double hue_degrees = 0.0;        // rotation about the gray axis
    double gamma = 1.0;              // applied as v^gamma
    double noise = 0.0;              // std-dev of additive Gaussian noise
    double texture_frequency = 1.0;  // scales every class texture
    double texture_amplitude = 0.12;
    double instance_jitter = 0.08;   // per-instance brightness spread

    static DomainStyle source();
    static DomainStyle target();
    void validate() const;
};

enum class Split { Source, Target, Eval };

std::string split_name(Split split);
Split parse_split(const std::string& name);

struct DatasetItem {
    std::string id;
    Split split = Split::Source;
    Image image;
    /// Present for Source and Eval items; never for Target.
    std::optional<LabelMap> label;

    friend bool operator==(const DatasetItem&, const DatasetItem&) = default;
};

/// Renders `n` scenes. Item i derives its own layout and appearance streams
/// from (seed, i), so the result is independent of generation order. Image
/// values are rounded to float32 precision so files round-trip exactly.
std::vector<DatasetItem> generate(const SceneSpec& spec, const DomainStyle& style, std::size_t n,
                                  std::uint64_t seed, Split split);

/// All three splits of a benchmark.
struct Dataset {
    std::vector<DatasetItem> source;
    std::vector<DatasetItem> target;
    std::vector<DatasetItem> eval;

    std::vector<DatasetItem> all() const;
    friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct DataConfig {
    std::size_t n_source = 500;
    std::size_t n_target = 500;
    std::size_t n_eval = 200;
    std::uint64_t seed = 7;
    SceneSpec scene;
    DomainStyle source_style = DomainStyle::source();
    DomainStyle target_style = DomainStyle::target();
};

/// Source split uses the source style; target and eval splits use the target
/// style. Each split draws layouts from its own seed stream.
Dataset make_dataset(const DataConfig& config);

// --- files -----------------------------------------------------------------

/// Writes manifest.json plus one .img per item and one .lbl per labeled item.
void write_dataset(const std::vector<DatasetItem>& items, const std::filesystem::path& dir);
/// Reads a directory written by write_dataset. Throws DataError on any
/// inconsistency (missing file, unknown magic, malformed header, truncation).
std::vector<DatasetItem> read_dataset(const std::filesystem::path& dir);
Dataset split_dataset(std::vector<DatasetItem> items);

/// "DSPIMG1" | u32 H | u32 W | u32 channels | f32 data (row-major, channel-last)
void write_image_file(const std::filesystem::path& path, const Image& image);
Image read_image_file(const std::filesystem::path& path);
/// "DSPLBL1" | u32 H | u32 W | u8 class ids
void write_label_file(const std::filesystem::path& path, const LabelMap& label);
LabelMap read_label_file(const std::filesystem::path& path);

/// Binary PPM/PGM writers for visual inspection.
void write_ppm(const std::filesystem::path& path, const Image& image);
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& gray);

// --- augmentation ----------------------------------------------------------

struct AugmentConfig {
    double jitter = 0.0;      // brightness/contrast/saturation spread and hue fraction
    double blur_sigma = 0.0;  // maximum Gaussian blur sigma
    double blur_prob = 0.5;
};

/// Rotates colors about the gray axis by `degrees`.
Image rotate_hue(const Image& image, double degrees);
/// Separable Gaussian blur with radius ceil(3 sigma) and edge-clamped borders.
/// sigma <= 0 returns the input unchanged.
Image gaussian_blur(const Image& image, double sigma);
/// Random color jitter followed (with probability blur_prob) by a random
/// blur. Output clamped to [0, 1]. With jitter == 0 and blur_sigma == 0 the
/// input is returned unchanged.
Image augment(const Image& image, const AugmentConfig& config, std::uint64_t seed);

}  // namespace dsp
