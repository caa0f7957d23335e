#include "dsp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include "dsp/errors.hpp"
#include "dsp/log.hpp"

namespace dsp {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
    if (classes == 0 || classes > 255) throw std::invalid_argument("ConfusionMatrix: class count must be in [1, 255]");
}

void ConfusionMatrix::add(const LabelMap& truth, const LabelMap& prediction) {
    if (truth.height != prediction.height || truth.width != prediction.width) {
        throw std::invalid_argument("ConfusionMatrix::add: label and prediction sizes differ");
    }
    for (std::size_t p = 0; p < truth.data.size(); ++p) {
        const auto t = truth.data[p], q = prediction.data[p];
        if (t == kIgnoreLabel) continue;
        if (t >= classes_ || q >= classes_) {
            throw std::invalid_argument("ConfusionMatrix::add: class id out of range at pixel " + std::to_string(p));
        }
        ++counts_[t * classes_ + q];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw std::invalid_argument("ConfusionMatrix::merge: class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
}

std::optional<double> ConfusionMatrix::iou(std::size_t cls) const {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < classes_; ++j) {
        row += at(cls, j);
        col += at(j, cls);
    }
    const std::uint64_t tp = at(cls, cls);
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(uni);
}

Report make_report(const ConfusionMatrix& cm) {
    Report r;
    const auto& names = scene_class_names();
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < cm.classes(); ++c) {
        r.class_names.push_back(c < names.size() ? names[c] : "class_" + std::to_string(c));
        r.per_class_iou.push_back(cm.iou(c));
        if (r.per_class_iou.back()) {
            s += *r.per_class_iou.back();
            ++n;
        } else {
            r.excluded.push_back(c);
        }
    }
    r.miou = n ? s / static_cast<double>(n) : 0.0;
    return r;
}

nlohmann::ordered_json to_json(const Report& r) {
    nlohmann::ordered_json j;
    j["mode"] = r.mode;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    j["iterations"] = r.iterations;
    j["miou"] = r.miou;
    nlohmann::ordered_json per = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < r.per_class_iou.size(); ++c) {
        const auto& v = r.per_class_iou[c];
        per.push_back({{"class", r.class_names.at(c)},
                       {"iou", v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr)}});
    }
    j["per_class"] = per;
    j["excluded"] = r.excluded;
    nlohmann::ordered_json series = nlohmann::ordered_json::array();
    for (const auto& [step, m] : r.series) series.push_back({step, m});
    j["series"] = series;
    return j;
}

Report report_from_json(const nlohmann::json& j) {
    try {
        Report r;
        r.mode = j.at("mode").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.iterations = j.at("iterations").get<std::size_t>();
        r.miou = j.at("miou").get<double>();
        for (const auto& e : j.at("per_class")) {
            r.class_names.push_back(e.at("class").get<std::string>());
            const auto& v = e.at("iou");
            r.per_class_iou.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
        }
        r.excluded = j.at("excluded").get<std::vector<std::size_t>>();
        for (const auto& p : j.at("series")) r.series.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<double>());
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed report: ") + e.what());
    }
}

void save_report(const std::filesystem::path& path, const Report& report) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write report " + path.string());
    // The JSON writer emits shortest round-trip digits, so doubles reload exactly.
    out << to_json(report).dump(2) << '\n';
}

Report load_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open report " + path.string());
    try {
        return report_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("report " + path.string() + " is not valid JSON: " + e.what());
    }
}

ConfusionMatrix confusion(const SegNet& net, const ParamSet& params, std::span<const DatasetItem> items,
                          std::size_t threads) {
    if (items.empty()) throw DataError("evaluate: eval split is empty");
    for (const auto& item : items) {
        if (!item.label) throw DataError("evaluate: item " + item.id + " has no ground truth");
    }
    const ParamSet frozen = params.clone(false);
    const std::size_t workers = std::max<std::size_t>(1, std::min(threads, items.size()));
    std::vector<ConfusionMatrix> parts(workers, ConfusionMatrix(net.config().classes));
    auto work = [&](std::size_t w) {
        for (std::size_t i = w; i < items.size(); i += workers) {
            Tape tape;
            parts[w].add(*items[i].label, argmax_labels(net.predict(tape, frozen, items[i].image).log_probs));
        }
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
    }
    // Integer counts: the merge order cannot change the result.
    ConfusionMatrix cm(net.config().classes);
    for (const auto& p : parts) cm.merge(p);
    return cm;
}

Report evaluate(const SegNet& net, const ParamSet& params, std::span<const DatasetItem> items, std::size_t threads) {
    return make_report(confusion(net, params, items, threads));
}

double mean_iou(const Report& report, std::span<const std::uint8_t> classes) {
    double s = 0.0;
    std::size_t n = 0;
    for (auto c : classes) {
        if (c < report.per_class_iou.size() && report.per_class_iou[c]) {
            s += *report.per_class_iou[c];
            ++n;
        }
    }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

TrainOutcome train_and_evaluate(const RunConfig& config, const Dataset& data, const RunOptions& options) {
    const SegNet net(SegNetConfig{kSceneClasses, config.feature_width, 3});
    std::vector<std::pair<std::size_t, double>> series;
    RunOptions opts = options;
    if (config.eval_every) {
        opts.on_eval = [&](std::size_t step, const TrainState& state) {
            if (options.on_eval) options.on_eval(step, state);
            series.emplace_back(step, evaluate(net, state.student, data.eval, config.threads).miou);
        };
    }
    TrainOutcome out;
    out.run = run_training(config, data, opts);
    out.report = evaluate(net, out.run.state.student, data.eval, config.threads);
    out.report.mode = mode_name(config.mode);
    out.report.seed = config.seed;
    out.report.config_hash = config_hash(config);
    out.report.iterations = out.run.state.step;
    out.report.series = std::move(series);
    if (!options.out_dir.empty()) save_report(options.out_dir / "report.json", out.report);
    return out;
}

Runner default_runner(const Dataset& data) {
    return [&data](const RunConfig& config) { return train_and_evaluate(config, data).report; };
}

double median(std::vector<double> values) {
    if (values.empty()) throw std::invalid_argument("median: no values");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

TableRow summarize(std::string label, double value, std::vector<Report> runs) {
    TableRow row;
    row.label = std::move(label);
    row.value = value;
    std::vector<double> m;
    for (const auto& r : runs) m.push_back(r.miou);
    row.median_miou = median(m);
    const std::size_t C = runs.front().per_class_iou.size();
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> v;
        for (const auto& r : runs) {
            if (r.per_class_iou[c]) v.push_back(*r.per_class_iou[c]);
        }
        row.median_iou.push_back(v.empty() ? std::nullopt : std::optional<double>(median(v)));
    }
    row.runs = std::move(runs);
    return row;
}

std::string format_value(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

}  // namespace

std::vector<TableRow> ablate(const RunConfig& base, std::span<const Mode> modes, std::span<const std::uint64_t> seeds,
                             const Runner& runner) {
    if (modes.empty() || seeds.empty()) throw ConfigError("ablate: need at least one mode and one seed");
    std::vector<TableRow> rows;
    for (Mode mode : modes) {
        std::vector<Report> runs;
        for (auto seed : seeds) {
            RunConfig c = base;
            c.mode = mode;
            c.seed = seed;
            runs.push_back(runner(c));
        }
        rows.push_back(summarize(mode_name(mode), 0.0, std::move(runs)));
    }
    return rows;
}

std::string sweep_param_name(SweepParam p) { return p == SweepParam::Beta ? "beta" : "k"; }

SweepParam parse_sweep_param(const std::string& name) {
    if (name == "beta") return SweepParam::Beta;
    if (name == "k") return SweepParam::K;
    throw ConfigError("unknown sweep parameter '" + name + "' (expected beta or k)");
}

std::vector<TableRow> sweep(const RunConfig& base, SweepParam param, std::span<const double> values,
                            std::span<const std::uint64_t> seeds, const Runner& runner) {
    if (values.empty() || seeds.empty()) throw ConfigError("sweep: need at least one value and one seed");
    std::vector<TableRow> rows;
    for (double v : values) {
        RunConfig c = base;
        if (param == SweepParam::Beta) {
            c.beta = v;
        } else {
            if (!(v >= 0.0) || v != std::floor(v)) throw ConfigError("sweep: k values must be non-negative integers");
            c.k = static_cast<std::size_t>(v);
        }
        c.validate();
        std::vector<Report> runs;
        for (auto seed : seeds) {
            c.seed = seed;
            runs.push_back(runner(c));
        }
        rows.push_back(summarize(format_value(v), v, std::move(runs)));
    }
    return rows;
}

void write_table_csv(const std::filesystem::path& path, const std::vector<TableRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write table " + path.string());
    out << "label,median_miou,runs";
    const auto& names = rows.empty() ? std::vector<std::string>{} : rows.front().runs.front().class_names;
    for (const auto& n : names) out << ',' << n;
    out << '\n';
    char buf[64];
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof buf, "%.6f", row.median_miou);
        out << row.label << ',' << buf << ',' << row.runs.size();
        for (const auto& v : row.median_iou) {
            if (v) {
                std::snprintf(buf, sizeof buf, "%.6f", *v);
                out << ',' << buf;
            } else {
                out << ',';
            }
        }
        out << '\n';
    }
}

namespace {

std::string escape_xml(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

void write_line_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                    const std::string& y_label, const std::vector<Series>& series) {
    constexpr double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x0 -= 0.5, x1 += 0.5;
    if (y1 == y0) y0 -= 0.5, y1 += 0.5;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write plot " + path.string());
    char buf[256];
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << escape_xml(title)
        << "</text>\n";
    std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"none\" stroke=\"#444\"/>\n",
                  L, T, W - L - R, H - T - B);
    out << buf;
    for (int i = 0; i <= 4; ++i) {
        const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
        std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\" font-size=\"11\">%.4g</text>\n",
                      px(xv), H - B + 16, xv);
        out << buf;
        std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\" font-size=\"11\">%.4g</text>\n",
                      L - 6, py(yv) + 4, yv);
        out << buf;
    }
    out << "<text x=\"" << L + (W - L - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
        << escape_xml(x_label) << "</text>\n";
    out << "<text x=\"16\" y=\"" << T + (H - T - B) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
        << T + (H - T - B) / 2 << ")\">" << escape_xml(y_label) << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = colors[i % std::size(colors)];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : series[i].points) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(x), py(y));
            out << buf;
        }
        out << "\"/>\n";
        if (series[i].points.size() <= 12) {
            for (const auto& [x, y] : series[i].points) {
                if (!std::isfinite(x) || !std::isfinite(y)) continue;
                std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\"/>\n", px(x), py(y),
                              color);
                out << buf;
            }
        }
        const double ly = T + 14 + 18.0 * static_cast<double>(i);
        std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"%s\" stroke-width=\"2\"/>\n",
                      W - R + 10, ly - 4, W - R + 30, ly - 4, color);
        out << buf;
        out << "<text x=\"" << W - R + 36 << "\" y=\"" << ly << "\" font-size=\"11\">" << escape_xml(series[i].name)
            << "</text>\n";
    }
    out << "</svg>\n";
}

}  // namespace dsp
