#include "dsp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "dsp/errors.hpp"
#include "dsp/log.hpp"
#include "dsp/paste.hpp"
#include "dsp/rng.hpp"

namespace dsp {

namespace {

// Square crop window shared by every student input of one batch item.
struct Window {
    std::size_t y0 = 0, x0 = 0, size = 0;  // size 0: full frame
};

Image crop(const Image& im, const Window& w) {
    if (!w.size) return im;
    Image out(w.size, w.size, im.channels);
    for (std::size_t y = 0; y < w.size; ++y) {
        const auto row = im.data.begin() + static_cast<long>(((w.y0 + y) * im.width + w.x0) * im.channels);
        std::copy(row, row + static_cast<long>(w.size * im.channels), out.data.begin() + static_cast<long>(y * w.size * im.channels));
    }
    return out;
}

LabelMap crop(const LabelMap& l, const Window& w) {
    if (!w.size) return l;
    LabelMap out(w.size, w.size);
    for (std::size_t y = 0; y < w.size; ++y)
        for (std::size_t x = 0; x < w.size; ++x) out.at(y, x) = l.at(w.y0 + y, w.x0 + x);
    return out;
}

PasteMask crop(const PasteMask& m, const Window& w) {
    if (!w.size) return m;
    PasteMask out(w.size, w.size, m.beta);
    for (std::size_t y = 0; y < w.size; ++y)
        for (std::size_t x = 0; x < w.size; ++x) out.support[y * w.size + x] = m.support[(w.y0 + y) * m.width + w.x0 + x];
    return out;
}

constexpr std::pair<Mode, const char*> kModeNames[] = {
    {Mode::SourceOnly, "source_only"}, {Mode::MeanTeacher, "mt"},       {Mode::SinglePaste, "single_paste"},
    {Mode::DualHard, "dual_hard"},     {Mode::DualSoft, "dual_soft"},   {Mode::DspFull, "dsp_full"},
};

[[noreturn]] void bad_field(const std::string& field, const std::string& range, const std::string& got) {
    throw ConfigError("config field '" + field + "' must be " + range + ", got " + got);
}

std::string num(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

void check_range(const std::string& field, double v, double lo, double hi, bool lo_open, bool hi_open) {
    const bool ok = (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi) && std::isfinite(v);
    if (!ok) {
        const std::string hi_s = std::isinf(hi) ? "inf" : num(hi);
        bad_field(field, std::string("in ") + (lo_open ? "(" : "[") + num(lo) + ", " + hi_s + (hi_open ? ")" : "]"),
                  num(v));
    }
}

void check_at_least(const std::string& field, std::size_t v, std::size_t lo) {
    if (v < lo) bad_field(field, ">= " + std::to_string(lo), std::to_string(v));
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Reads j[key] into out when present, converting type errors to ConfigError.
template <typename T>
void read_field(const nlohmann::json& j, const std::string& prefix, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) throw nlohmann::json::type_error::create(302, "expected a boolean", nullptr);
        } else if constexpr (std::is_unsigned_v<T>) {
            const bool ok = it->is_number_unsigned() || (it->is_number_integer() && it->get<std::int64_t>() >= 0);
            if (!ok) throw nlohmann::json::type_error::create(302, "expected a non-negative integer", nullptr);
        } else if constexpr (std::is_same_v<T, double>) {
            if (!it->is_number()) throw nlohmann::json::type_error::create(302, "expected a number", nullptr);
        }
        out = it->get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config field '" + prefix + key + "' has the wrong type: " + it->dump());
    }
}

void reject_unknown(const nlohmann::json& j, const std::string& prefix, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError("config " + (prefix.empty() ? std::string("root") : "'" + prefix + "'") +
                                          " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) throw ConfigError("config has unknown field '" + prefix + key + "'");
    }
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct ModeTerms {
    bool teacher = false;     // pseudo-labels and consistency term
    bool paste = false;       // target stream gets the pasted patch
    bool dual = false;        // source stream gets the patch too (seg_soft)
    bool alignment = false;   // MMD feature terms
};

ModeTerms terms_for(Mode mode) {
    switch (mode) {
        case Mode::SourceOnly: return {};
        case Mode::MeanTeacher: return {true, false, false, false};
        case Mode::SinglePaste: return {true, true, false, false};
        case Mode::DualHard:
        case Mode::DualSoft: return {true, true, true, false};
        case Mode::DspFull: return {true, true, true, true};
    }
    return {};
}

void check_finite(const LossBreakdown& l, std::uint64_t step) {
    const std::pair<const char*, double> parts[] = {{"seg", l.seg},           {"seg_soft", l.seg_soft},
                                                    {"cons", l.cons},         {"paste_mmd", l.paste_mmd},
                                                    {"global_mmd", l.global_mmd}, {"total", l.total}};
    for (const auto& [name, v] : parts) {
        if (!std::isfinite(v)) {
            throw NumericalError("non-finite " + std::string(name) + " loss (" + num(v) + ") at step " +
                                 std::to_string(step));
        }
    }
}

}  // namespace

std::string mode_name(Mode mode) {
    for (const auto& [m, name] : kModeNames) {
        if (m == mode) return name;
    }
    return "unknown";
}

Mode parse_mode(const std::string& name) {
    std::string valid;
    for (const auto& [m, n] : kModeNames) {
        if (name == n) return m;
        valid += (valid.empty() ? "" : ", ") + std::string(n);
    }
    throw ConfigError("unknown mode '" + name + "' (expected one of: " + valid + ")");
}

const std::vector<Mode>& all_modes() {
    static const std::vector<Mode> modes = {Mode::SourceOnly, Mode::MeanTeacher, Mode::SinglePaste,
                                            Mode::DualHard,   Mode::DualSoft,    Mode::DspFull};
    return modes;
}

void RunConfig::validate() const {
    check_at_least("iterations", iterations, 1);
    check_at_least("batch_size", batch_size, 1);
    check_range("beta", beta, 0.0, 1.0, false, false);
    check_range("alpha", alpha, 0.0, 1.0, false, true);
    check_range("lambda_feature", lambda_feature, 0.0, kInf, false, true);
    if (K < 1 || K >= kSceneClasses) bad_field("K", "in [1, " + std::to_string(kSceneClasses - 1) + "]", std::to_string(K));
    if (k > K) bad_field("k", "in [0, K=" + std::to_string(K) + "]", std::to_string(k));
    check_range("lr_encoder", lr_encoder, 0.0, kInf, true, true);
    check_range("lr_head", lr_head, 0.0, kInf, true, true);
    check_range("poly_power", poly_power, 0.0, kInf, true, true);
    check_range("momentum", momentum, 0.0, 1.0, false, true);
    check_range("weight_decay", weight_decay, 0.0, kInf, false, true);
    check_range("augment.jitter", augment_config.jitter, 0.0, 1.0, false, true);
    if (augment_config.blur_sigma != 0.0) check_range("augment.blur_sigma", augment_config.blur_sigma, 0.15, 10.0, false, false);
    check_range("augment.blur_prob", augment_config.blur_prob, 0.0, 1.0, false, false);
    check_at_least("feature_width", feature_width, 1);
    if (crop_size % 4 != 0 || crop_size > std::min(data.scene.height, data.scene.width)) {
        bad_field("crop_size", "0 (full frame) or a multiple of 4 no larger than the image",
                  std::to_string(crop_size));
    }
    if (mmd_bandwidth) check_range("mmd_bandwidth", *mmd_bandwidth, 0.0, kInf, true, true);
    check_at_least("threads", threads, 1);
    check_at_least("data.n_source", data.n_source, 1);
    check_at_least("data.n_target", data.n_target, 1);
    check_at_least("data.n_eval", data.n_eval, 1);
}

nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["iterations"] = c.iterations;
    j["batch_size"] = c.batch_size;
    j["mode"] = mode_name(c.mode);
    j["warmup_iterations"] = c.warmup_iterations;
    j["beta"] = c.beta;
    j["alpha"] = c.alpha;
    j["lambda_feature"] = c.lambda_feature;
    j["k"] = c.k;
    j["K"] = c.K;
    j["lr_encoder"] = c.lr_encoder;
    j["lr_head"] = c.lr_head;
    j["poly_power"] = c.poly_power;
    j["momentum"] = c.momentum;
    j["nesterov"] = c.nesterov;
    j["weight_decay"] = c.weight_decay;
    j["augment"] = {{"enabled", c.augment},
                    {"jitter", c.augment_config.jitter},
                    {"blur_sigma", c.augment_config.blur_sigma},
                    {"blur_prob", c.augment_config.blur_prob}};
    j["crop_size"] = c.crop_size;
    j["feature_width"] = c.feature_width;
    j["mmd_bandwidth"] = c.mmd_bandwidth ? nlohmann::ordered_json(*c.mmd_bandwidth) : nlohmann::ordered_json(nullptr);
    j["checkpoint_every"] = c.checkpoint_every;
    j["eval_every"] = c.eval_every;
    j["threads"] = c.threads;
    j["data"] = {{"n_source", c.data.n_source},
                 {"n_target", c.data.n_target},
                 {"n_eval", c.data.n_eval},
                 {"seed", c.data.seed}};
    return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    reject_unknown(j, "", {"seed", "iterations", "batch_size", "mode", "warmup_iterations", "beta", "alpha", "lambda_feature", "k", "K",
                           "lr_encoder", "lr_head", "poly_power", "momentum", "nesterov", "weight_decay", "augment",
                           "crop_size", "feature_width", "mmd_bandwidth", "checkpoint_every", "eval_every", "threads", "data"});
    RunConfig c;
    read_field(j, "", "seed", c.seed);
    read_field(j, "", "iterations", c.iterations);
    read_field(j, "", "batch_size", c.batch_size);
    if (auto it = j.find("mode"); it != j.end()) {
        if (!it->is_string()) throw ConfigError("config field 'mode' must be a string");
        c.mode = parse_mode(it->get<std::string>());
    }
    read_field(j, "", "warmup_iterations", c.warmup_iterations);
    read_field(j, "", "beta", c.beta);
    read_field(j, "", "alpha", c.alpha);
    read_field(j, "", "lambda_feature", c.lambda_feature);
    read_field(j, "", "k", c.k);
    read_field(j, "", "K", c.K);
    read_field(j, "", "lr_encoder", c.lr_encoder);
    read_field(j, "", "lr_head", c.lr_head);
    read_field(j, "", "poly_power", c.poly_power);
    read_field(j, "", "momentum", c.momentum);
    read_field(j, "", "nesterov", c.nesterov);
    read_field(j, "", "weight_decay", c.weight_decay);
    if (auto it = j.find("augment"); it != j.end()) {
        reject_unknown(*it, "augment.", {"enabled", "jitter", "blur_sigma", "blur_prob"});
        read_field(*it, "augment.", "enabled", c.augment);
        read_field(*it, "augment.", "jitter", c.augment_config.jitter);
        read_field(*it, "augment.", "blur_sigma", c.augment_config.blur_sigma);
        read_field(*it, "augment.", "blur_prob", c.augment_config.blur_prob);
    }
    read_field(j, "", "crop_size", c.crop_size);
    read_field(j, "", "feature_width", c.feature_width);
    if (auto it = j.find("mmd_bandwidth"); it != j.end() && !it->is_null()) {
        double bw = 0.0;
        read_field(j, "", "mmd_bandwidth", bw);
        c.mmd_bandwidth = bw;
    }
    read_field(j, "", "checkpoint_every", c.checkpoint_every);
    read_field(j, "", "eval_every", c.eval_every);
    read_field(j, "", "threads", c.threads);
    if (auto it = j.find("data"); it != j.end()) {
        reject_unknown(*it, "data.", {"n_source", "n_target", "n_eval", "seed"});
        read_field(*it, "data.", "n_source", c.data.n_source);
        read_field(*it, "data.", "n_target", c.data.n_target);
        read_field(*it, "data.", "n_eval", c.data.n_eval);
        read_field(*it, "data.", "seed", c.data.seed);
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write config file " + path.string());
    out << to_json(config).dump(2) << '\n';
}

std::string config_hash(const RunConfig& config) {
    auto j = to_json(config);
    j.erase("threads");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

double lr_schedule(std::size_t t, std::size_t total, double base, double power) {
    if (total == 0 || t > total) throw std::invalid_argument("lr_schedule: need 0 <= t <= total and total > 0");
    return base * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(total), power);
}

LabelMap pseudo_label(const SegNet& net, const ParamSet& teacher, const Image& target_image) {
    Tape tape;
    const ParamSet frozen = teacher.clone(false);
    return argmax_labels(net.predict(tape, frozen, target_image).log_probs);
}

Trainer::Trainer(RunConfig config, const Dataset& data)
    : config_(std::move(config)), data_(&data), net_(SegNetConfig{kSceneClasses, config_.feature_width, 3}) {
    config_.validate();
    if (data.source.empty()) throw DataError("trainer: source split is empty");
    if (data.target.empty()) throw DataError("trainer: target split is empty");
    index_ = build_index(compute_stats(std::span<const DatasetItem>(data.source), kSceneClasses), config_.K);
    if (config_.mode != Mode::SourceOnly && config_.warmup_iterations >= config_.iterations) {
        log::warn("trainer: warmup_iterations (" + std::to_string(config_.warmup_iterations) + ") covers all " +
                  std::to_string(config_.iterations) + " iterations; no target-side terms will be trained");
    }
}

TrainState Trainer::initial_state() const {
    TrainState s;
    s.student = net_.init_params(derive_seed(config_.seed, stream::kInit));
    s.teacher = s.student.clone(false);
    s.momentum = s.student.zeros_like();
    return s;
}

Trainer::ItemResult Trainer::item_step(const TrainState& state, std::size_t item) const {
    const auto& cfg = config_;
    const ModeTerms terms = state.step < cfg.warmup_iterations ? ModeTerms{} : terms_for(cfg.mode);
    const std::uint64_t g = state.step * cfg.batch_size + item;
    const std::span<const DatasetItem> source(data_->source);

    Rng batch_rng(derive_seed(cfg.seed, stream::kBatch, g));
    const auto& src = data_->source[batch_rng.index(data_->source.size())];
    const auto& tgt = data_->target[batch_rng.index(data_->target.size())];
    if (!src.label) throw DataError("trainer: source item " + src.id + " has no label");
    auto aug = [&](const Image& im, std::uint64_t slot) {
        return cfg.augment ? augment(im, cfg.augment_config, derive_seed(cfg.seed, stream::kAugment, g * 4 + slot)) : im;
    };

    Window win;
    if (cfg.crop_size) {
        if (cfg.crop_size > std::min({src.image.height, src.image.width, tgt.image.height, tgt.image.width})) {
            throw DataError("trainer: crop_size " + std::to_string(cfg.crop_size) + " exceeds the image size");
        }
        Rng crop_rng(derive_seed(cfg.seed, stream::kAugment, g * 4 + 3));
        win.size = cfg.crop_size;
        win.y0 = crop_rng.index(src.image.height - win.size + 1);
        win.x0 = crop_rng.index(src.image.width - win.size + 1);
    }
    const Image x_s = crop(src.image, win), x_t = crop(tgt.image, win);
    const LabelMap y_s = crop(*src.label, win);

    Tape tape;
    const Tensor zero = Tensor::scalar(0.0);
    Tensor seg = seg_loss(tape, net_.predict(tape, state.student, x_s).log_probs, y_s);
    Tensor seg_soft = zero, cons = zero, paste = zero, global = zero;

    if (terms.teacher) {
        const LabelMap y_t = pseudo_label(net_, state.teacher, x_t);
        if (!terms.paste) {
            cons = seg_loss(tape, net_.predict(tape, state.student, aug(x_t, 0)).log_probs, y_t);
        } else {
            const bool single = cfg.mode == Mode::SinglePaste;
            const double beta = single || cfg.mode == Mode::DualHard ? 1.0 : cfg.beta;
            Rng draw_rng(derive_seed(cfg.seed, stream::kSampling, g));
            const auto sample = draw_iteration(index_, source, single ? 0 : cfg.k, draw_rng);
            const auto [full_mask, full_tmpl] = build_mask(sample, source, beta);
            const PasteMask mask = crop(full_mask, win);
            const CompositeTemplate tmpl{crop(full_tmpl.image, win), crop(full_tmpl.label, win)};

            const auto pred_pt = net_.predict(tape, state.student, aug(mix_image(x_t, mask, tmpl.image), 1));
            cons = consistency_loss(tape, pred_pt.log_probs, tmpl.label, y_t, mask);
            if (terms.dual) {
                const auto pred_ps =
                    net_.predict(tape, state.student, aug(mix_image(x_s, mask, tmpl.image), 2));
                seg_soft = seg_soft_loss(tape, pred_ps.log_probs, tmpl.label, y_s, mask);
                if (terms.alignment) {
                    MmdConfig mmd{cfg.mmd_bandwidth};
                    const auto fa = feature_alignment(tape, pred_ps.features, pred_pt.features, mask, mmd);
                    paste = fa.paste;
                    global = fa.global;
                }
            }
        }
    }
    const Tensor total = total_objective(tape, seg, seg_soft, cons, paste, global, cfg.lambda_feature);

    ItemResult r;
    r.losses = {seg.item(), seg_soft.item(), cons.item(), paste.item(), global.item(), total.item(),
                cfg.lambda_feature};
    check_finite(r.losses, state.step);
    const Gradients grads = tape.backward(total);
    for (const auto& [name, p] : state.student) r.grads.push_back(grads[p]);
    return r;
}

LossBreakdown Trainer::step(TrainState& state) const {
    const auto& cfg = config_;
    if (state.step >= cfg.iterations) throw std::logic_error("Trainer::step: schedule already finished");
    const std::size_t B = cfg.batch_size;
    std::vector<ItemResult> items(B);
    const std::size_t workers = std::min(cfg.threads, B);
    if (workers <= 1) {
        for (std::size_t i = 0; i < B; ++i) items[i] = item_step(state, i);
    } else {
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < B; i += workers) items[i] = item_step(state, i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    // Fixed item order for both gradients and logged losses.
    LossBreakdown mean;
    mean.lambda_feature = cfg.lambda_feature;
    const double inv = 1.0 / static_cast<double>(B);
    for (const auto& r : items) {
        mean.seg += r.losses.seg;
        mean.seg_soft += r.losses.seg_soft;
        mean.cons += r.losses.cons;
        mean.paste_mmd += r.losses.paste_mmd;
        mean.global_mmd += r.losses.global_mmd;
        mean.total += r.losses.total;
    }
    mean.seg *= inv;
    mean.seg_soft *= inv;
    mean.cons *= inv;
    mean.paste_mmd *= inv;
    mean.global_mmd *= inv;
    mean.total *= inv;

    const double lr_enc = lr_schedule(state.step, cfg.iterations, cfg.lr_encoder, cfg.poly_power);
    const double lr_head = lr_schedule(state.step, cfg.iterations, cfg.lr_head, cfg.poly_power);
    std::size_t pi = 0;
    auto mom = state.momentum.begin();
    for (auto it = state.student.begin(); it != state.student.end(); ++it, ++mom, ++pi) {
        const double lr = SegNet::is_encoder_param(it->first) ? lr_enc : lr_head;
        auto theta = it->second.mutable_data();
        auto v = mom->second.mutable_data();
        for (std::size_t e = 0; e < theta.size(); ++e) {
            double grad = 0.0;
            for (const auto& r : items) grad += r.grads[pi][e];
            grad = grad * inv + cfg.weight_decay * theta[e];
            v[e] = cfg.momentum * v[e] + grad;
            theta[e] -= lr * (cfg.nesterov ? grad + cfg.momentum * v[e] : v[e]);
        }
    }
    ema_update(state.teacher, state.student, cfg.alpha);
    ++state.step;
    return mean;
}

TrainState Trainer::restore(const Checkpoint& ckpt) const {
    if (ckpt.classes != net_.config().classes || ckpt.feature_width != net_.config().feature_width) {
        throw DataError("checkpoint network (" + std::to_string(ckpt.classes) + " classes, width " +
                        std::to_string(ckpt.feature_width) + ") does not match the config (" +
                        std::to_string(net_.config().classes) + " classes, width " +
                        std::to_string(net_.config().feature_width) + ")");
    }
    if (ckpt.step > config_.iterations) {
        throw ConfigError("checkpoint step " + std::to_string(ckpt.step) + " exceeds iterations " +
                          std::to_string(config_.iterations));
    }
    const TrainState fresh = initial_state();
    TrainState s;
    s.step = ckpt.step;
    try {
        ParamSet::check_compatible(fresh.student, ckpt.student, "checkpoint student");
        ParamSet::check_compatible(fresh.teacher, ckpt.teacher, "checkpoint teacher");
        if (ckpt.momentum.size()) ParamSet::check_compatible(fresh.momentum, ckpt.momentum, "checkpoint momentum");
    } catch (const std::invalid_argument& e) {
        throw DataError(e.what());
    }
    s.student = ckpt.student.clone(true);
    s.teacher = ckpt.teacher.clone(false);
    s.momentum = ckpt.momentum.size() ? ckpt.momentum.clone(false) : fresh.momentum;
    return s;
}

Checkpoint Trainer::snapshot(const TrainState& state) const {
    Checkpoint c;
    c.classes = static_cast<std::uint32_t>(net_.config().classes);
    c.feature_width = static_cast<std::uint32_t>(net_.config().feature_width);
    c.step = state.step;
    c.student = state.student.clone(false);
    c.teacher = state.teacher.clone(false);
    c.momentum = state.momentum.clone(false);
    return c;
}

namespace {

// Keeps the header and rows for iterations before `step` from an earlier log.
std::string kept_log_prefix(const std::filesystem::path& csv, std::uint64_t step) {
    std::string out = loss_csv_header();
    std::ifstream in(csv);
    if (!in) return out;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto iter = std::stoull(line.substr(0, line.find(',')));
        if (iter < step) out += line + '\n';
    }
    return out;
}

std::filesystem::path periodic_name(const std::filesystem::path& dir, std::uint64_t step) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "checkpoint_%06llu.bin", static_cast<unsigned long long>(step));
    return dir / buf;
}

}  // namespace

RunResult run_training(const RunConfig& config, const Dataset& data, const RunOptions& options) {
    const Trainer trainer(config, data);
    RunResult result;
    result.state = options.resume ? trainer.restore(load_checkpoint(*options.resume)) : trainer.initial_state();
    auto& state = result.state;
    const std::size_t end = std::min(config.iterations, options.stop_at.value_or(config.iterations));

    std::ofstream csv;
    const bool files = !options.out_dir.empty();
    if (files) {
        std::filesystem::create_directories(options.out_dir);
        save_run_config(options.out_dir / "config.json", config);
        const auto path = options.out_dir / "loss.csv";
        const std::string prefix =
            options.resume ? kept_log_prefix(path, state.step) : loss_csv_header();
        csv.open(path, std::ios::binary | std::ios::trunc);
        if (!csv) throw DataError("cannot write loss log " + path.string());
        csv << prefix;
    }
    log::info("training " + mode_name(config.mode) + " seed " + std::to_string(config.seed) + " from step " +
              std::to_string(state.step) + " to " + std::to_string(end));

    std::optional<std::uint64_t> last_eval;
    while (state.step < end) {
        const std::size_t t = state.step;
        LossRow row{t, trainer.step(state), lr_schedule(t, config.iterations, config.lr_encoder, config.poly_power)};
        if (files) {
            csv << loss_csv_row(row.iteration, row.losses, row.lr);
            csv.flush();
        }
        result.rows.push_back(row);
        if (files && config.checkpoint_every && state.step % config.checkpoint_every == 0) {
            save_checkpoint(periodic_name(options.out_dir, state.step), trainer.snapshot(state));
        }
        if (options.on_eval && config.eval_every && state.step % config.eval_every == 0) {
            options.on_eval(state.step, state);
            last_eval = state.step;
        }
    }
    if (files) save_checkpoint(options.out_dir / "checkpoint.bin", trainer.snapshot(state));
    if (options.on_eval && last_eval != state.step) options.on_eval(state.step, state);
    return result;
}

}  // namespace dsp
