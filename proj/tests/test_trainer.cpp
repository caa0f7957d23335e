#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "dsp/errors.hpp"
#include "dsp/log.hpp"
#include "dsp/trainer.hpp"

using namespace dsp;
namespace fs = std::filesystem;

namespace {

struct QuietLog {
    log::Level prev = log::level();
    QuietLog() { log::set_level(log::Level::Quiet); }
    ~QuietLog() { log::set_level(prev); }
};

const Dataset& tiny_data() {
    static const Dataset d = [] {
        DataConfig c;
        c.n_source = 24;
        c.n_target = 12;
        c.n_eval = 4;
        c.seed = 2;
        return make_dataset(c);
    }();
    return d;
}

RunConfig tiny_config(Mode mode) {
    RunConfig c;
    c.mode = mode;
    c.iterations = 50;
    c.warmup_iterations = 0;
    c.feature_width = 8;
    c.checkpoint_every = 0;
    c.data.n_source = 24;
    c.data.n_target = 12;
    c.data.n_eval = 4;
    c.data.seed = 2;
    return c;
}

fs::path temp_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "dsp_test_trainer" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

RunOptions in_dir(const fs::path& dir) {
    RunOptions o;
    o.out_dir = dir;
    return o;
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

std::string config_error(const nlohmann::json& j) {
    try {
        run_config_from_json(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("lr schedule examples") {
    CHECK(lr_schedule(0, 3000, 2.5e-3, 0.9) == 2.5e-3);
    CHECK(lr_schedule(3000, 3000, 2.5e-3, 0.9) == 0.0);
    const double half = lr_schedule(1500, 3000, 2.5e-3, 0.9);
    CHECK(std::abs(half - 2.5e-3 * std::pow(0.5, 0.9)) < 1e-18);
    CHECK(std::abs(half - 1.3397e-3) < 5e-8);
}

TEST_CASE("pseudo labels: one-hot, tie-break and scalar argmax oracle") {
    SegNet net({8, 4, 3});
    const Image img = tiny_data().target[0].image;

    ParamSet one_hot = net.init_params(1);
    for (auto& d : one_hot.at("head.weight").mutable_data()) d = 0.0;
    auto bias = one_hot.at("head.bias").mutable_data();
    std::fill(bias.begin(), bias.end(), 0.0);
    bias[3] = 5.0;
    const LabelMap l3 = pseudo_label(net, one_hot, img);
    CHECK(std::all_of(l3.data.begin(), l3.data.end(), [](auto v) { return v == 3; }));

    bias[3] = 0.0;
    bias[2] = bias[5] = 4.0;
    const LabelMap tie = pseudo_label(net, one_hot, img);
    CHECK(std::all_of(tie.data.begin(), tie.data.end(), [](auto v) { return v == 2; }));

    const ParamSet teacher = net.init_params(9).clone(false);
    const LabelMap y = pseudo_label(net, teacher, img);
    Tape tape;
    const Tensor lp = net.predict(tape, teacher, img).log_probs;
    for (std::size_t p = 0; p < y.pixels(); ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < 8; ++c)
            if (lp[p * 8 + c] > lp[p * 8 + best]) best = c;
        CHECK(y.data[p] == best);
    }
}

TEST_CASE("disabled loss terms are exactly zero in every mode") {
    const Dataset& d = tiny_data();
    for (Mode m : all_modes()) {
        const Trainer tr(tiny_config(m), d);
        const TrainState s = tr.initial_state();
        for (std::size_t item = 0; item < 2; ++item) {
            const LossBreakdown l = tr.item_step(s, item).losses;
            CAPTURE(mode_name(m));
            CHECK(l.seg > 0.0);
            const bool teacher = m != Mode::SourceOnly;
            const bool dual = m == Mode::DualHard || m == Mode::DualSoft || m == Mode::DspFull;
            const bool align = m == Mode::DspFull;
            CHECK((l.cons > 0.0) == teacher);
            CHECK((l.seg_soft > 0.0) == dual);
            CHECK((l.global_mmd > 0.0) == align);
            if (!teacher) CHECK(l.cons == 0.0);
            if (!dual) CHECK(l.seg_soft == 0.0);
            if (!align) {
                CHECK(l.paste_mmd == 0.0);
                CHECK(l.global_mmd == 0.0);
            }
            CHECK(std::abs(l.total - (l.seg + l.seg_soft + l.cons + l.lambda_feature * (l.paste_mmd + l.global_mmd))) <
                  1e-12);
        }
    }
}

TEST_CASE("warm-up steps are source-only") {
    RunConfig c = tiny_config(Mode::DspFull);
    c.warmup_iterations = 3;
    const Trainer tr(c, tiny_data());
    TrainState s = tr.initial_state();
    const Trainer plain(tiny_config(Mode::SourceOnly), tiny_data());
    CHECK(tr.item_step(s, 0).losses.seg == plain.item_step(s, 0).losses.seg);
    CHECK(tr.item_step(s, 0).losses.cons == 0.0);
    s.step = 3;
    CHECK(tr.item_step(s, 0).losses.cons > 0.0);
}

TEST_CASE("lambda zero leaves only the pixel losses in the total") {
    RunConfig c = tiny_config(Mode::DspFull);
    c.lambda_feature = 0.0;
    const Trainer tr(c, tiny_data());
    const TrainState s = tr.initial_state();
    const LossBreakdown l = tr.item_step(s, 1).losses;
    CHECK(l.global_mmd > 0.0);
    CHECK(std::abs(l.total - (l.seg + l.seg_soft + l.cons)) < 1e-12);

    // Doubling lambda doubles exactly the feature contribution.
    RunConfig c1 = tiny_config(Mode::DspFull), c2 = c1;
    c2.lambda_feature = 2 * c1.lambda_feature;
    const LossBreakdown l1 = Trainer(c1, tiny_data()).item_step(s, 1).losses;
    const LossBreakdown l2 = Trainer(c2, tiny_data()).item_step(s, 1).losses;
    CHECK(std::abs((l2.total - l.total) - 2 * (l1.total - l.total)) < 1e-12);
}

TEST_CASE("dual_soft at beta 1 equals dual_hard") {
    RunConfig soft = tiny_config(Mode::DualSoft);
    soft.beta = 1.0;
    const RunConfig hard = tiny_config(Mode::DualHard);
    const Trainer a(soft, tiny_data()), b(hard, tiny_data());
    const TrainState s = a.initial_state();
    for (std::size_t item = 0; item < 2; ++item) {
        const auto ra = a.item_step(s, item), rb = b.item_step(s, item);
        CHECK(ra.losses.total == rb.losses.total);
        CHECK(ra.grads == rb.grads);
    }
}

TEST_CASE("teacher changes only through the EMA update") {
    const Trainer tr(tiny_config(Mode::DspFull), tiny_data());
    TrainState s = tr.initial_state();
    s.teacher = tr.net().init_params(77).clone(false);
    const ParamSet teacher0 = s.teacher.clone(false);
    (void)tr.item_step(s, 0);
    CHECK(s.teacher == teacher0);
    tr.step(s);
    ParamSet expect = teacher0.clone(false);
    ema_update(expect, s.student, tr.config().alpha);
    CHECK(s.teacher == expect);
    CHECK(s.step == 1);
}

TEST_CASE("step applies Nesterov SGD with per-group learning rates") {
    RunConfig c = tiny_config(Mode::MeanTeacher);
    const Trainer tr(c, tiny_data());
    TrainState s = tr.initial_state();
    // Non-zero momentum so both terms of the update are exercised.
    s.momentum = tr.net().init_params(5).clone(false);
    const TrainState before{s.step, s.student.clone(true), s.teacher.clone(false), s.momentum.clone(false)};
    const auto r0 = tr.item_step(s, 0), r1 = tr.item_step(s, 1);
    tr.step(s);
    std::size_t pi = 0;
    for (const auto& [name, p] : before.student) {
        const double lr = SegNet::is_encoder_param(name) ? c.lr_encoder : c.lr_head;
        const auto& v0 = before.momentum.at(name);
        for (std::size_t e = 0; e < p.size(); e += 7) {
            const double g = 0.5 * (r0.grads[pi][e] + r1.grads[pi][e]) + c.weight_decay * p[e];
            const double v = c.momentum * v0[e] + g;
            CHECK(s.momentum.at(name)[e] == v);
            CHECK(std::abs(s.student.at(name)[e] - (p[e] - lr * (g + c.momentum * v))) < 1e-15);
        }
        ++pi;
    }
}

TEST_CASE("two 50-step runs produce byte-identical loss logs") {
    const RunConfig c = tiny_config(Mode::DspFull);
    const fs::path a = temp_dir("det_a"), b = temp_dir("det_b");
    run_training(c, tiny_data(), in_dir(a));
    run_training(c, tiny_data(), in_dir(b));
    const std::string la = read_file(a / "loss.csv");
    CHECK(std::count(la.begin(), la.end(), '\n') == 51);
    CHECK(la == read_file(b / "loss.csv"));
    CHECK(read_file(a / "checkpoint.bin") == read_file(b / "checkpoint.bin"));
}

TEST_CASE("worker threads do not change results") {
    RunConfig c = tiny_config(Mode::DspFull);
    c.iterations = 5;
    const fs::path a = temp_dir("thr_1"), b = temp_dir("thr_2");
    run_training(c, tiny_data(), in_dir(a));
    c.threads = 2;
    run_training(c, tiny_data(), in_dir(b));
    CHECK(read_file(a / "loss.csv") == read_file(b / "loss.csv"));
    CHECK(read_file(a / "checkpoint.bin") == read_file(b / "checkpoint.bin"));
}

TEST_CASE("resumed training reproduces the uninterrupted trajectory") {
    RunConfig c = tiny_config(Mode::DspFull);
    c.iterations = 20;
    c.warmup_iterations = 4;
    c.checkpoint_every = 10;
    const fs::path full = temp_dir("full"), part = temp_dir("part");
    const RunResult ref = run_training(c, tiny_data(), in_dir(full));

    RunOptions stop = in_dir(part);
    stop.stop_at = 13;
    run_training(c, tiny_data(), stop);
    CHECK(fs::exists(part / "checkpoint_000010.bin"));
    CHECK(read_file(part / "checkpoint_000010.bin") == read_file(full / "checkpoint_000010.bin"));

    RunOptions resume = in_dir(part);
    resume.resume = part / "checkpoint_000010.bin";
    const RunResult res = run_training(c, tiny_data(), resume);
    CHECK(res.rows.size() == 10);
    CHECK(res.state.student == ref.state.student);
    CHECK(res.state.teacher == ref.state.teacher);
    CHECK(res.state.momentum == ref.state.momentum);
    CHECK(read_file(part / "loss.csv") == read_file(full / "loss.csv"));
    CHECK(read_file(part / "checkpoint.bin") == read_file(full / "checkpoint.bin"));
}

TEST_CASE("checkpoint from a different network is rejected") {
    const Trainer tr(tiny_config(Mode::DspFull), tiny_data());
    RunConfig other = tiny_config(Mode::DspFull);
    other.feature_width = 4;
    const Trainer tr2(other, tiny_data());
    CHECK_THROWS_AS(tr.restore(tr2.snapshot(tr2.initial_state())), DataError);
}

TEST_CASE("a diverging run names the non-finite loss") {
    RunConfig c = tiny_config(Mode::SourceOnly);
    c.lr_encoder = 1e12;
    c.lr_head = 1e12;
    CHECK_THROWS_WITH_AS(run_training(c, tiny_data(), {}), doctest::Contains("non-finite"), NumericalError);
}

TEST_CASE("config json round-trip and hash") {
    RunConfig c = tiny_config(Mode::SinglePaste);
    c.mmd_bandwidth = 0.5;
    c.augment_config.blur_sigma = 0.8;
    const RunConfig r = run_config_from_json(nlohmann::json::parse(to_json(c).dump()));
    CHECK(to_json(r) == to_json(c));
    CHECK(config_hash(r) == config_hash(c));
    CHECK(config_hash(c).size() == 16);
    RunConfig t = c;
    t.threads = 4;
    CHECK(config_hash(t) == config_hash(c));
    t.seed = 1;
    CHECK(config_hash(t) != config_hash(c));

    const fs::path dir = temp_dir("cfg");
    save_run_config(dir / "c.json", c);
    CHECK(to_json(load_run_config(dir / "c.json")) == to_json(c));
}

TEST_CASE("config validation names the field and range") {
    CHECK(config_error({{"beta", 1.5}}) == "config field 'beta' must be in [0, 1], got 1.5");
    CHECK(config_error({{"alpha", 1.0}}).find("'alpha'") != std::string::npos);
    CHECK(config_error({{"mode", "dspfull"}}).find("source_only") != std::string::npos);
    CHECK(config_error({{"betta", 0.5}}) == "config has unknown field 'betta'");
    CHECK(config_error({{"iterations", -3}}).find("'iterations'") != std::string::npos);
    CHECK(config_error({{"data", {{"n_source", 0}}}}).find("'data.n_source'") != std::string::npos);
    CHECK(config_error({{"k", 3}, {"K", 2}}).find("'k'") != std::string::npos);
    CHECK(config_error({{"lr_head", 0.0}}).find("'lr_head'") != std::string::npos);
    CHECK(config_error({{"augment", {{"colour", 1}}}}) == "config has unknown field 'augment.colour'");
    CHECK(config_error({{"beta", 0.6}, {"warmup_iterations", 10}}).empty());

    try {
        load_run_config("/nonexistent/dir/run.json");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("/nonexistent/dir/run.json") != std::string::npos);
    }
}

TEST_CASE("trainer warns when warm-up covers the whole run") {
    QuietLog q;
    RunConfig c = tiny_config(Mode::DspFull);
    c.warmup_iterations = 50;
    const Trainer tr(c, tiny_data());
    TrainState s = tr.initial_state();
    s.step = 49;
    CHECK(tr.item_step(s, 0).losses.cons == 0.0);
}

TEST_CASE("beta endpoints coincide with mt and dual_hard in the logged terms") {
    // Augmentation off so the streams see the same pixels.
    RunConfig mt = tiny_config(Mode::MeanTeacher);
    mt.augment = false;
    RunConfig zero = tiny_config(Mode::DspFull);
    zero.augment = false;
    zero.beta = 0.0;
    const Trainer a(mt, tiny_data()), b(zero, tiny_data());
    const TrainState s = a.initial_state();
    for (std::size_t item = 0; item < 2; ++item) {
        const LossBreakdown lm = a.item_step(s, item).losses, lz = b.item_step(s, item).losses;
        CHECK(std::abs(lz.cons - lm.cons) < 1e-12);
        // The mixed source equals the source image, so seg_soft repeats seg.
        CHECK(std::abs(lz.seg_soft - lz.seg) < 1e-12);
        CHECK(lz.paste_mmd == 0.0);
    }

    RunConfig hard = tiny_config(Mode::DualHard);
    RunConfig one = tiny_config(Mode::DspFull);
    one.beta = 1.0;
    const Trainer h(hard, tiny_data()), o(one, tiny_data());
    for (std::size_t item = 0; item < 2; ++item) {
        const LossBreakdown lh = h.item_step(s, item).losses, lo = o.item_step(s, item).losses;
        CHECK(lh.seg_soft == lo.seg_soft);
        CHECK(lh.cons == lo.cons);
    }
}

TEST_CASE("crop_size: full-size crop is the full frame, smaller crops train") {
    RunConfig full = tiny_config(Mode::DspFull);
    RunConfig same = full;
    same.crop_size = 64;
    const Trainer a(full, tiny_data()), b(same, tiny_data());
    const TrainState s = a.initial_state();
    for (std::size_t item = 0; item < 2; ++item) {
        const auto ra = a.item_step(s, item), rb = b.item_step(s, item);
        CHECK(ra.losses.total == rb.losses.total);
        CHECK(ra.grads == rb.grads);
    }

    RunConfig small = full;
    small.crop_size = 32;
    small.iterations = 4;
    const RunResult r1 = run_training(small, tiny_data()), r2 = run_training(small, tiny_data());
    CHECK(r1.state.student == r2.state.student);
    CHECK(std::isfinite(r1.rows.back().losses.total));
    CHECK_FALSE(r1.state.student == run_training([&] { auto c = small; c.crop_size = 0; return c; }(), tiny_data()).state.student);

    CHECK(config_error({{"crop_size", 30}}).find("'crop_size'") != std::string::npos);
    CHECK(config_error({{"crop_size", 68}}).find("'crop_size'") != std::string::npos);
    CHECK(config_error({{"crop_size", 32}}).empty());
}
