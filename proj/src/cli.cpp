#include "dsp/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <optional>
#include <iostream>
#include <sstream>

#include "dsp/domains.hpp"
#include "dsp/errors.hpp"
#include "dsp/log.hpp"
#include "dsp/metrics.hpp"
#include "dsp/paste.hpp"
#include "dsp/sampling.hpp"
#include "dsp/trainer.hpp"

namespace dsp::cli {

namespace {

struct Flags {
    std::string config;
    std::string out;
    std::string data;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> threads;
    std::string mode;
    std::optional<std::size_t> iters;
    std::string resume;
    std::string checkpoint;
    std::string param;
    std::vector<double> values;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> modes;
    std::string run_dir;
    bool quiet = false;
};

void add_config(CLI::App* app, Flags& f) { app->add_option("--config", f.config, "run config (JSON)"); }
void add_out(CLI::App* app, Flags& f, bool required) {
    auto* o = app->add_option("--out", f.out, "output directory");
    if (required) o->required();
}
void add_data(CLI::App* app, Flags& f) {
    app->add_option("--data", f.data, "dataset directory (default: generate from the config)");
}
void add_run_flags(CLI::App* app, Flags& f) {
    app->add_option("--seed", f.seed, "override the config seed");
    app->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
    app->add_option("--mode", f.mode, "ablation mode override");
    app->add_option("--iters", f.iters, "iteration count override")->check(CLI::PositiveNumber);
}

RunConfig resolve_config(const Flags& f) {
    RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
    if (f.seed) c.seed = *f.seed;
    if (f.threads) c.threads = *f.threads;
    if (!f.mode.empty()) c.mode = parse_mode(f.mode);
    if (f.iters) c.iterations = *f.iters;
    c.validate();
    return c;
}

Dataset resolve_data(const Flags& f, const RunConfig& c) {
    if (!f.data.empty()) return split_dataset(read_dataset(f.data));
    return make_dataset(c.data);
}

std::filesystem::path out_dir(const Flags& f) {
    std::filesystem::create_directories(f.out);
    return f.out;
}

void print_report(const Report& r) {
    std::printf("%-12s %s\n", "class", "IoU");
    for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
        if (r.per_class_iou[c]) std::printf("%-12s %.4f\n", r.class_names[c].c_str(), *r.per_class_iou[c]);
        else std::printf("%-12s excluded (never present or predicted)\n", r.class_names[c].c_str());
    }
    std::printf("mIoU %.4f over %zu classes\n", r.miou, r.per_class_iou.size() - r.excluded.size());
}

void print_table(const std::string& header, const std::vector<TableRow>& rows) {
    std::printf("%-14s %-12s %s\n", header.c_str(), "median_mIoU", "runs (mIoU per seed)");
    for (const auto& row : rows) {
        std::printf("%-14s %-12.4f", row.label.c_str(), row.median_miou);
        for (const auto& r : row.runs) std::printf(" %.4f", r.miou);
        std::printf("\n");
    }
}

// Runs land in <out>/runs/<mode>_b<beta>_k<k>_s<seed> with their own logs.
Runner file_runner(const Dataset& data, const std::filesystem::path& out) {
    return [&data, out](const RunConfig& c) {
        std::ostringstream name;
        name << mode_name(c.mode) << "_b" << c.beta << "_k" << c.k << "_s" << c.seed;
        RunOptions opts;
        opts.out_dir = out / "runs" / name.str();
        const auto report = train_and_evaluate(c, data, opts).report;
        std::printf("  %-32s mIoU %.4f\n", name.str().c_str(), report.miou);
        std::fflush(stdout);
        return report;
    };
}

int cmd_gen_data(const Flags& f) {
    RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
    if (f.seed) c.data.seed = *f.seed;
    const Dataset data = make_dataset(c.data);
    write_dataset(data.all(), out_dir(f));
    std::printf("wrote %zu source, %zu target, %zu eval items to %s\n", data.source.size(), data.target.size(),
                data.eval.size(), f.out.c_str());
    return kOk;
}

int cmd_stats(const Flags& f) {
    const RunConfig c = resolve_config(f);
    const Dataset data = resolve_data(f, c);
    const auto stats = compute_stats(std::span<const DatasetItem>(data.source), kSceneClasses);
    const auto index = build_index(stats, c.K);
    const auto& names = scene_class_names();
    nlohmann::ordered_json j;
    j["images"] = stats.images;
    std::printf("%-12s %-10s %-10s %s\n", "class", "frequency", "pixels", "tail");
    for (std::size_t k = 0; k < kSceneClasses; ++k) {
        const bool tail = index.is_tail(static_cast<std::uint8_t>(k));
        std::printf("%-12s %-10.4f %-10llu %s\n", names[k].c_str(), stats.frequency[k],
                    static_cast<unsigned long long>(stats.pixel_count[k]), tail ? "yes" : "");
        j["classes"].push_back({{"name", names[k]},
                                {"frequency", stats.frequency[k]},
                                {"pixels", stats.pixel_count[k]},
                                {"tail", tail}});
    }
    j["tail_classes"] = index.tail_classes;
    if (!f.out.empty()) {
        std::ofstream out(out_dir(f) / "stats.json");
        out << j.dump(2) << '\n';
    }
    return kOk;
}

std::vector<std::uint8_t> label_to_gray(const LabelMap& label) {
    std::vector<std::uint8_t> g(label.data.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = label.data[i] == kIgnoreLabel ? 255 : static_cast<std::uint8_t>(label.data[i] * 255 / (kSceneClasses - 1));
    }
    return g;
}

int cmd_paste_demo(const Flags& f) {
    const RunConfig c = resolve_config(f);
    const Dataset data = resolve_data(f, c);
    const std::span<const DatasetItem> source(data.source);
    const auto index = build_index(compute_stats(source, kSceneClasses), c.K);
    Rng rng(derive_seed(c.seed, stream::kSampling, 0));
    const auto sample = draw_iteration(index, source, c.k, rng);
    const auto [mask, tmpl] = build_mask(sample, source, c.beta);
    const auto& xs = data.source[rng.index(data.source.size())];
    const auto& xt = data.target[rng.index(data.target.size())];
    const auto pair = mix(xs.image, *xs.label, xt.image, LabelMap(mask.height, mask.width, 0), mask, tmpl);

    const auto dir = out_dir(f);
    write_ppm(dir / "source.ppm", xs.image);
    write_ppm(dir / "target.ppm", xt.image);
    write_ppm(dir / "template.ppm", tmpl.image);
    write_ppm(dir / "source_mixed.ppm", pair.source_mixed);
    write_ppm(dir / "target_mixed.ppm", pair.target_mixed);
    std::vector<std::uint8_t> m(mask.support.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<std::uint8_t>(std::lround(255.0 * mask.value(i)));
    write_pgm(dir / "mask.pgm", mask.height, mask.width, m);
    write_pgm(dir / "template_label.pgm", tmpl.label.height, tmpl.label.width, label_to_gray(tmpl.label));

    std::printf("template %s, chosen classes:", data.source[sample.template_item].id.c_str());
    for (auto k : sample.chosen_classes) std::printf(" %s", scene_class_names()[k].c_str());
    std::printf("\ntail picks:");
    for (const auto& t : sample.tails) std::printf(" %s<-%s", scene_class_names()[t.cls].c_str(), data.source[t.item].id.c_str());
    std::printf("\nmask support %zu of %zu pixels, beta %.3f; images written to %s\n", mask.support_size(),
                mask.support.size(), mask.beta, f.out.c_str());
    return kOk;
}

int cmd_train(const Flags& f) {
    const RunConfig c = resolve_config(f);
    const Dataset data = resolve_data(f, c);
    RunOptions opts;
    opts.out_dir = out_dir(f);
    if (!f.resume.empty()) opts.resume = f.resume;
    const auto outcome = train_and_evaluate(c, data, opts);
    print_report(outcome.report);
    std::printf("outputs in %s (loss.csv, checkpoint.bin, report.json)\n", f.out.c_str());
    return kOk;
}

int cmd_eval(const Flags& f) {
    const RunConfig c = resolve_config(f);
    const Dataset data = resolve_data(f, c);
    const Checkpoint ckpt = load_checkpoint(f.checkpoint);
    const SegNet net(SegNetConfig{ckpt.classes, ckpt.feature_width, 3});
    Report r = evaluate(net, ckpt.student, data.eval, c.threads);
    r.mode = mode_name(c.mode);
    r.seed = c.seed;
    r.config_hash = config_hash(c);
    r.iterations = ckpt.step;
    print_report(r);
    if (!f.out.empty()) save_report(out_dir(f) / "report.json", r);
    return kOk;
}

std::vector<std::uint64_t> seeds_or_default(const Flags& f) {
    return f.seeds.empty() ? std::vector<std::uint64_t>{0, 1, 2} : f.seeds;
}

int cmd_ablate(const Flags& f) {
    const RunConfig c = resolve_config(f);
    const Dataset data = resolve_data(f, c);
    std::vector<Mode> modes;
    for (const auto& m : f.modes) modes.push_back(parse_mode(m));
    if (modes.empty()) modes = {Mode::SourceOnly, Mode::MeanTeacher, Mode::SinglePaste, Mode::DspFull};
    const auto dir = out_dir(f);
    const auto seeds = seeds_or_default(f);
    const auto rows = ablate(c, modes, seeds, file_runner(data, dir));
    write_table_csv(dir / "ablation.csv", rows);
    print_table("mode", rows);
    return kOk;
}

int cmd_sweep(const Flags& f) {
    const RunConfig c = resolve_config(f);
    const Dataset data = resolve_data(f, c);
    const SweepParam p = parse_sweep_param(f.param);
    std::vector<double> values = f.values;
    if (values.empty()) values = p == SweepParam::Beta ? std::vector<double>{0.0, 0.6, 0.8, 1.0} : std::vector<double>{0, 1, 2, 3};
    const auto dir = out_dir(f);
    const auto seeds = seeds_or_default(f);
    const auto rows = sweep(c, p, values, seeds, file_runner(data, dir));
    const std::string name = sweep_param_name(p);
    write_table_csv(dir / ("sweep_" + name + ".csv"), rows);
    Series s{"median mIoU", {}};
    for (const auto& row : rows) s.points.emplace_back(row.value, row.median_miou);
    write_line_svg(dir / ("sweep_" + name + ".svg"), "mIoU vs " + name, name, "median mIoU", {s});
    print_table(name, rows);
    return kOk;
}

// Reads loss.csv from a run directory into named series.
std::vector<Series> read_loss_series(const std::filesystem::path& csv) {
    std::ifstream in(csv);
    if (!in) throw DataError("cannot open loss log " + csv.string());
    std::string line;
    std::getline(in, line);
    if (line + "\n" != loss_csv_header()) throw DataError("unexpected loss log header in " + csv.string());
    std::vector<Series> out = {{"seg", {}}, {"seg_soft", {}}, {"cons", {}}, {"total", {}}};
    const int cols[] = {1, 2, 3, 6};
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> v;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
        if (v.size() != 8) throw DataError("malformed loss log row in " + csv.string() + ": " + line);
        for (std::size_t k = 0; k < out.size(); ++k) out[k].points.emplace_back(v[0], v[cols[k]]);
    }
    return out;
}

int cmd_report(const Flags& f) {
    const std::filesystem::path dir = f.run_dir;
    const Report r = load_report(dir / "report.json");
    std::printf("run %s: mode %s, seed %llu, config %s, %zu iterations\n", dir.string().c_str(), r.mode.c_str(),
                static_cast<unsigned long long>(r.seed), r.config_hash.c_str(), r.iterations);
    print_report(r);
    if (!r.excluded.empty()) {
        std::printf("excluded classes:");
        for (auto k : r.excluded) std::printf(" %s", r.class_names[k].c_str());
        std::printf("\n");
    }
    const auto target = f.out.empty() ? dir : out_dir(f);
    if (std::filesystem::exists(dir / "loss.csv")) {
        auto series = read_loss_series(dir / "loss.csv");
        // Thin long logs to at most ~600 points per curve.
        for (auto& s : series) {
            const std::size_t stride = std::max<std::size_t>(1, s.points.size() / 600);
            std::vector<std::pair<double, double>> kept;
            for (std::size_t i = 0; i < s.points.size(); i += stride) kept.push_back(s.points[i]);
            s.points = std::move(kept);
        }
        write_line_svg(target / "convergence_loss.svg", "training losses (" + r.mode + ")", "iteration", "loss",
                       series);
    }
    if (!r.series.empty()) {
        Series s{"mIoU", {}};
        for (const auto& [step, m] : r.series) s.points.emplace_back(static_cast<double>(step), m);
        write_line_svg(target / "convergence_miou.svg", "eval mIoU (" + r.mode + ")", "iteration", "mIoU", {s});
    }
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"dual soft-paste domain adaptation at desk scale", "dsp"};
    app.require_subcommand(1);
    Flags f;
    app.add_flag("--quiet", f.quiet, "suppress warnings");

    auto* gen = app.add_subcommand("gen-data", "generate the toy benchmark and write it to disk");
    add_config(gen, f);
    add_out(gen, f, true);
    gen->add_option("--seed", f.seed, "override the data seed");

    auto* stats = app.add_subcommand("stats", "class frequencies and long-tail classes of the source split");
    add_config(stats, f);
    add_data(stats, f);
    add_out(stats, f, false);

    auto* demo = app.add_subcommand("paste-demo", "write one dual soft-paste draw as images");
    add_config(demo, f);
    add_data(demo, f);
    add_out(demo, f, true);

    auto* train = app.add_subcommand("train", "train one run");
    add_config(train, f);
    add_data(train, f);
    add_out(train, f, true);
    train->add_option("--resume", f.resume, "checkpoint to continue from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
    add_config(eval, f);
    add_data(eval, f);
    add_out(eval, f, false);
    eval->add_option("--checkpoint", f.checkpoint, "checkpoint file")->required();

    auto* abl = app.add_subcommand("ablate", "train each mode for each seed and tabulate medians");
    add_config(abl, f);
    add_data(abl, f);
    add_out(abl, f, true);
    abl->add_option("--modes", f.modes, "modes (default: source_only mt single_paste dsp_full)")->delimiter(',');
    abl->add_option("--seeds", f.seeds, "seeds (default: 0,1,2)")->delimiter(',');

    auto* sw = app.add_subcommand("sweep", "sweep beta or k");
    add_config(sw, f);
    add_data(sw, f);
    add_out(sw, f, true);
    sw->add_option("--param", f.param, "beta or k")->required();
    sw->add_option("--values", f.values, "values to sweep")->delimiter(',');
    sw->add_option("--seeds", f.seeds, "seeds (default: 0,1,2)")->delimiter(',');

    auto* rep = app.add_subcommand("report", "print a run report and write convergence plots");
    rep->add_option("--run", f.run_dir, "run directory holding report.json and loss.csv")->required();
    add_out(rep, f, false);

    for (auto* sub : {stats, demo, train, eval, abl, sw}) add_run_flags(sub, f);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << " (run with --help)\n";
        return kUsage;
    }

    if (f.quiet) log::set_level(log::Level::Quiet);
    try {
        if (gen->parsed()) return cmd_gen_data(f);
        if (stats->parsed()) return cmd_stats(f);
        if (demo->parsed()) return cmd_paste_demo(f);
        if (train->parsed()) return cmd_train(f);
        if (eval->parsed()) return cmd_eval(f);
        if (abl->parsed()) return cmd_ablate(f);
        if (sw->parsed()) return cmd_sweep(f);
        if (rep->parsed()) return cmd_report(f);
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kNumerical;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kDataOrConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kDataOrConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kDataOrConfig;
    }
    return kUsage;
}

}  // namespace dsp::cli
