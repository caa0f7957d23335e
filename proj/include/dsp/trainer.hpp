#pragma once

// Mean-teacher training with dual soft-paste: run configuration, one
// optimizer step, and the full run loop with logging, checkpoints and resume.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsp/domains.hpp"
#include "dsp/losses.hpp"
#include "dsp/model.hpp"
#include "dsp/sampling.hpp"

namespace dsp {

/// Ablation ladder. Each mode enables a superset of the previous loss terms.
enum class Mode { SourceOnly, MeanTeacher, SinglePaste, DualHard, DualSoft, DspFull };

std::string mode_name(Mode mode);
/// Throws ConfigError listing the valid names.
Mode parse_mode(const std::string& name);
const std::vector<Mode>& all_modes();

struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t iterations = 3000;
    std::size_t batch_size = 2;
    double beta = 0.8;
    double alpha = 0.99;
    double lambda_feature = 0.005;
    std::size_t k = 2;
    std::size_t K = 3;
    double lr_encoder = 2.5e-3;
    double lr_head = 2.5e-4;
    double poly_power = 0.9;
    double momentum = 0.9;
    bool nesterov = true;
    double weight_decay = 5e-4;
    bool augment = true;
    AugmentConfig augment_config{0.2, 1.0, 0.5};
    Mode mode = Mode::DspFull;
    /// Source-only steps before the target-side terms switch on; stands in
    /// for the pretrained backbone a from-scratch network lacks. Values at or
    /// past `iterations` make every step source-only.
    std::size_t warmup_iterations = 500;
    /// Side of the random square crop applied per batch item to every
    /// student input, its labels and the paste mask; 0 trains on full frames.
    std::size_t crop_size = 0;
    std::size_t feature_width = 32;
    /// Fixed MMD bandwidth; the median heuristic is used when empty.
    std::optional<double> mmd_bandwidth;
    std::size_t checkpoint_every = 1000;  // 0 disables periodic checkpoints
    std::size_t eval_every = 0;           // 0 disables the mIoU series
    std::size_t threads = 1;
    DataConfig data;

    /// Throws ConfigError naming the field and its valid range.
    void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& config);
/// Missing fields keep their defaults; unknown fields are rejected. The
/// result is validated.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);
/// 16 hex digits of FNV-1a over the canonical JSON form (threads excluded).
std::string config_hash(const RunConfig& config);

/// base * (1 - t / total)^power for 0 <= t <= total.
double lr_schedule(std::size_t t, std::size_t total, double base, double power);

/// Hard argmax of the teacher prediction; ties go to the smallest class id.
LabelMap pseudo_label(const SegNet& net, const ParamSet& teacher, const Image& target_image);

struct TrainState {
    std::uint64_t step = 0;
    ParamSet student;
    ParamSet teacher;
    ParamSet momentum;
};

class Trainer {
public:
    /// Builds class statistics and the long-tail index from data.source.
    /// `data` must outlive the trainer.
    Trainer(RunConfig config, const Dataset& data);

    const RunConfig& config() const { return config_; }
    const SegNet& net() const { return net_; }
    const LongTailIndex& index() const { return index_; }

    TrainState initial_state() const;

    /// One optimizer step: per-item losses and gradients (optionally on
    /// worker threads), reduction in item order, SGD update, EMA update.
    /// Returns the batch-mean loss breakdown. Throws NumericalError when a
    /// loss component is not finite.
    LossBreakdown step(TrainState& state) const;

    /// Loss breakdown and per-parameter gradients for one batch item, before
    /// any update. Exposed for tests.
    struct ItemResult {
        LossBreakdown losses;
        std::vector<std::vector<double>> grads;  // ParamSet order
    };
    ItemResult item_step(const TrainState& state, std::size_t item) const;

    /// Restores a state from a checkpoint, checking it matches this network.
    TrainState restore(const Checkpoint& ckpt) const;
    Checkpoint snapshot(const TrainState& state) const;

private:
    RunConfig config_;
    const Dataset* data_;
    SegNet net_;
    LongTailIndex index_;
};

struct LossRow {
    std::size_t iteration = 0;
    LossBreakdown losses;
    double lr = 0.0;
};

struct RunOptions {
    /// Output directory for loss.csv and checkpoints; nothing is written when empty.
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume;
    /// Stop early after this many steps in total (for interrupted-run tests).
    std::optional<std::size_t> stop_at;
    /// Called every eval_every steps and after the last step.
    std::function<void(std::size_t step, const TrainState& state)> on_eval;
};

struct RunResult {
    TrainState state;
    std::vector<LossRow> rows;  // rows produced by this invocation
};

/// Trains from scratch or from options.resume. With an output directory the
/// loss log is written to loss.csv (rows at or past the resume step are
/// replaced), periodic checkpoints to checkpoint_<step>.bin and the final
/// state to checkpoint.bin.
RunResult run_training(const RunConfig& config, const Dataset& data, const RunOptions& options = {});

}  // namespace dsp
