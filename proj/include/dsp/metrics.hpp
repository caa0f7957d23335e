#pragma once

// Segmentation evaluation (confusion matrix, per-class IoU, mIoU), run
// reports, ablation and sweep tables, and SVG plots.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsp/domains.hpp"
#include "dsp/model.hpp"
#include "dsp/trainer.hpp"

namespace dsp {

/// Rows are ground truth, columns are predictions. Ignore pixels are skipped.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t classes = kSceneClasses);

    std::size_t classes() const { return classes_; }
    void add(const LabelMap& truth, const LabelMap& prediction);
    void merge(const ConfusionMatrix& other);

    std::uint64_t at(std::size_t truth, std::size_t prediction) const { return counts_[truth * classes_ + prediction]; }
    std::uint64_t total() const;
    /// TP / (TP + FP + FN); empty when the class is neither present nor predicted.
    std::optional<double> iou(std::size_t cls) const;

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    std::size_t classes_;
    std::vector<std::uint64_t> counts_;
};

struct Report {
    std::string mode;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::size_t iterations = 0;
    std::vector<std::string> class_names;
    std::vector<std::optional<double>> per_class_iou;
    double miou = 0.0;
    std::vector<std::size_t> excluded;                    // classes with zero union
    std::vector<std::pair<std::size_t, double>> series;  // (step, mIoU)

    friend bool operator==(const Report&, const Report&) = default;
};

/// Per-class IoU and mIoU over classes with nonzero union. Metadata fields
/// are left empty.
Report make_report(const ConfusionMatrix& cm);

nlohmann::ordered_json to_json(const Report& report);
Report report_from_json(const nlohmann::json& j);
void save_report(const std::filesystem::path& path, const Report& report);
Report load_report(const std::filesystem::path& path);

/// Confusion matrix of `params` on labeled items. Throws DataError on an
/// empty split or an unlabeled item.
ConfusionMatrix confusion(const SegNet& net, const ParamSet& params, std::span<const DatasetItem> items,
                          std::size_t threads = 1);
Report evaluate(const SegNet& net, const ParamSet& params, std::span<const DatasetItem> items,
                std::size_t threads = 1);

/// Mean IoU over the listed classes, skipping undefined entries (NaN when
/// none is defined).
double mean_iou(const Report& report, std::span<const std::uint8_t> classes);

/// Trains, evaluates the student on the eval split and fills the metadata.
/// With eval_every > 0 the report carries an mIoU series. With an output
/// directory report.json is written next to the training outputs.
struct TrainOutcome {
    RunResult run;
    Report report;
};
TrainOutcome train_and_evaluate(const RunConfig& config, const Dataset& data, const RunOptions& options = {});

/// Maps a config to its evaluation report. Lets callers cache runs.
using Runner = std::function<Report(const RunConfig&)>;
Runner default_runner(const Dataset& data);

double median(std::vector<double> values);

struct TableRow {
    std::string label;  // mode name or swept value
    double value = 0.0; // swept value (0 for ablation rows)
    std::vector<Report> runs;
    double median_miou = 0.0;
    std::vector<std::optional<double>> median_iou;  // per class, over runs where defined
};

/// One run per (mode, seed); rows in `modes` order with medians over seeds.
std::vector<TableRow> ablate(const RunConfig& base, std::span<const Mode> modes, std::span<const std::uint64_t> seeds,
                             const Runner& runner);

enum class SweepParam { Beta, K };
std::string sweep_param_name(SweepParam p);
SweepParam parse_sweep_param(const std::string& name);

/// One run per (value, seed) with `param` overridden. Values are validated
/// through RunConfig::validate.
std::vector<TableRow> sweep(const RunConfig& base, SweepParam param, std::span<const double> values,
                            std::span<const std::uint64_t> seeds, const Runner& runner);

/// label,median_miou,runs,<class names...> with one line per row.
void write_table_csv(const std::filesystem::path& path, const std::vector<TableRow>& rows);

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};
/// Standalone SVG line chart.
void write_line_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                    const std::string& y_label, const std::vector<Series>& series);

}  // namespace dsp
