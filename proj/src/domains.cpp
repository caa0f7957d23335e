#include "dsp/domains.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "binary_io.hpp"
#include "dsp/errors.hpp"
#include "dsp/rng.hpp"

namespace dsp {

const std::array<std::string, kSceneClasses>& scene_class_names() {
    static const std::array<std::string, kSceneClasses> names{"background", "ground", "road",   "building",
                                                              "vehicle",    "person", "sign",   "bike"};
    return names;
}

void SceneSpec::validate() const {
    if (height < 16 || width < 16 || height % 4 || width % 4) {
        throw ConfigError("scene: height and width must be >= 16 and divisible by 4");
    }
    for (std::size_t c = 0; c < kSceneClasses; ++c) {
        if (!(spawn_probs[c] >= 0.0 && spawn_probs[c] <= 1.0)) {
            throw ConfigError("scene: spawn_probs[" + std::to_string(c) + "] must be in [0, 1]");
        }
        if (max_instances[c] < 0 || max_instances[c] > 16) {
            throw ConfigError("scene: max_instances[" + std::to_string(c) + "] must be in [0, 16]");
        }
    }
}

DomainStyle DomainStyle::source() {
    DomainStyle s;
    s.palette = {{
        {0.55, 0.75, 0.95},  // background: pale sky blue
        {0.40, 0.62, 0.30},  // ground: grass green
        {0.36, 0.36, 0.40},  // road: asphalt gray
        {0.72, 0.46, 0.34},  // building: brick
        {0.20, 0.30, 0.78},  // vehicle: blue paint
        {0.92, 0.70, 0.55},  // person: skin tone
        {0.95, 0.85, 0.12},  // sign: yellow
        {0.82, 0.16, 0.22},  // bike: red
    }};
    s.hue_degrees = 0.0;
    s.gamma = 1.0;
    s.noise = 0.02;
    s.texture_frequency = 1.0;
    return s;
}

DomainStyle DomainStyle::target() {
    DomainStyle s;
    s.palette = {{
        {0.70, 0.72, 0.80},  // overcast sky
        {0.50, 0.55, 0.28},  // dry grass
        {0.30, 0.28, 0.30},  // darker asphalt
        {0.52, 0.26, 0.20},  // dark weathered brick
        {0.25, 0.45, 0.60},  // teal paint
        {0.85, 0.62, 0.52},
        {0.92, 0.72, 0.10},
        {0.75, 0.22, 0.35},
    }};
    s.hue_degrees = 30.0;
    s.gamma = 0.8;
    s.noise = 0.05;
    s.texture_frequency = 1.3;
    return s;
}

void DomainStyle::validate() const {
    for (const auto& rgb : palette) {
        for (double v : rgb) {
            if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("style: palette values must be in [0, 1]");
        }
    }
    if (!(gamma > 0.0)) throw ConfigError("style: gamma must be > 0");
    if (!(noise >= 0.0)) throw ConfigError("style: noise must be >= 0");
    if (!(texture_frequency > 0.0)) throw ConfigError("style: texture_frequency must be > 0");
    if (!(texture_amplitude >= 0.0) || !(instance_jitter >= 0.0)) {
        throw ConfigError("style: texture_amplitude and instance_jitter must be >= 0");
    }
}

std::string split_name(Split split) {
    switch (split) {
        case Split::Source: return "source";
        case Split::Target: return "target";
        case Split::Eval: return "eval";
    }
    return "?";
}

Split parse_split(const std::string& name) {
    if (name == "source") return Split::Source;
    if (name == "target") return Split::Target;
    if (name == "eval") return Split::Eval;
    throw DataError("unknown split tag: " + name);
}

// --- rendering -------------------------------------------------------------

namespace {

struct Instance {
    std::uint8_t cls;
    double brightness;
    double phase;
};

struct Layout {
    LabelMap label;
    std::vector<std::uint16_t> owner;  // instance index per pixel
    std::vector<Instance> instances;
};

std::array<double, 9> hue_matrix(double degrees) {
    const double a = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    const double k = (1.0 - c) / 3.0, r = std::sqrt(1.0 / 3.0) * s;
    return {c + k, k - r, k + r, k + r, c + k, k - r, k - r, k + r, c + k};
}

void apply_hue(double* rgb, const std::array<double, 9>& m) {
    const double r = rgb[0], g = rgb[1], b = rgb[2];
    rgb[0] = m[0] * r + m[1] * g + m[2] * b;
    rgb[1] = m[3] * r + m[4] * g + m[5] * b;
    rgb[2] = m[6] * r + m[7] * g + m[8] * b;
}

Layout draw_layout(const SceneSpec& spec, Rng& rng) {
    const auto H = static_cast<long>(spec.height), W = static_cast<long>(spec.width);
    Layout lay;
    lay.label = LabelMap(spec.height, spec.width);
    lay.owner.assign(spec.height * spec.width, 0);
    auto new_instance = [&](SceneClass cls) {
        lay.instances.push_back(Instance{static_cast<std::uint8_t>(cls), 0.0, rng.uniform(0.0, 2.0 * std::numbers::pi)});
        return static_cast<std::uint16_t>(lay.instances.size() - 1);
    };
    auto paint = [&](long y, long x, std::uint16_t inst) {
        if (y < 0 || y >= H || x < 0 || x >= W) return;
        lay.label.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = lay.instances[inst].cls;
        lay.owner[static_cast<std::size_t>(y * W + x)] = inst;
    };

    // Bands scale with image height; defaults are tuned for 64 rows.
    const double hs = static_cast<double>(H) / 64.0;
    const long horizon = static_cast<long>(std::lround((18.0 + static_cast<double>(rng.index(13))) * hs));
    const double road_top = static_cast<double>(horizon) + (8.0 + static_cast<double>(rng.index(13))) * hs;
    const double slope = rng.uniform(-0.15, 0.15);
    const auto bg = new_instance(SceneClass::Background);
    const auto ground = new_instance(SceneClass::Ground);
    const auto road = new_instance(SceneClass::Road);
    for (long y = 0; y < H; ++y) {
        for (long x = 0; x < W; ++x) {
            const double edge = road_top + slope * (static_cast<double>(x) - static_cast<double>(W) / 2.0);
            paint(y, x, y < horizon ? bg : (static_cast<double>(y) < edge ? ground : road));
        }
    }

    auto spawn_count = [&](SceneClass cls) {
        const auto c = static_cast<std::size_t>(cls);
        int n = 0;
        for (int i = 0; i < spec.max_instances[c]; ++i) n += rng.bernoulli(spec.spawn_probs[c]) ? 1 : 0;
        return n;
    };
    auto urange = [&](double lo, double hi) { return hi > lo ? rng.uniform(lo, hi) : lo; };

    for (int n = spawn_count(SceneClass::Building); n > 0; --n) {
        const auto inst = new_instance(SceneClass::Building);
        const long w = std::lround(urange(8, 20) * hs), h = std::lround(urange(10, 24) * hs);
        const long x0 = std::lround(urange(0, static_cast<double>(W - w)));
        const long bottom = horizon + static_cast<long>(rng.index(5));
        for (long y = bottom - h; y < bottom; ++y)
            for (long x = x0; x < x0 + w; ++x) paint(y, x, inst);
    }
    for (int n = spawn_count(SceneClass::Vehicle); n > 0; --n) {
        const auto inst = new_instance(SceneClass::Vehicle);
        const long w = std::lround(urange(10, 18) * hs), h = std::lround(urange(6, 10) * hs);
        const long x0 = std::lround(urange(0, static_cast<double>(W - w)));
        const long bottom = std::lround(urange(road_top + 6.0 * hs, static_cast<double>(H)));
        for (long y = bottom - h; y < bottom; ++y)
            for (long x = x0; x < x0 + w; ++x) paint(y, x, inst);
    }
    for (int n = spawn_count(SceneClass::Person); n > 0; --n) {
        const auto inst = new_instance(SceneClass::Person);
        const double ry = urange(5, 8) * hs, rx = urange(2.5, 4) * hs;
        const double cx = urange(4, static_cast<double>(W) - 4);
        const double cy = urange(static_cast<double>(horizon) + 6 * hs, static_cast<double>(H) - 6 * hs);
        for (long y = static_cast<long>(cy - ry) - 1; y <= static_cast<long>(cy + ry) + 1; ++y)
            for (long x = static_cast<long>(cx - rx) - 1; x <= static_cast<long>(cx + rx) + 1; ++x) {
                const double dy = (static_cast<double>(y) + 0.5 - cy) / ry, dx = (static_cast<double>(x) + 0.5 - cx) / rx;
                if (dx * dx + dy * dy <= 1.0) paint(y, x, inst);
            }
    }
    for (int n = spawn_count(SceneClass::Sign); n > 0; --n) {
        const auto inst = new_instance(SceneClass::Sign);
        const double s = urange(7, 11) * hs;
        const double cx = urange(s / 2, static_cast<double>(W) - s / 2);
        const double top = urange(static_cast<double>(horizon) - 4 * hs, static_cast<double>(H) - s - 2);
        for (long y = static_cast<long>(top); y <= static_cast<long>(top + s); ++y) {
            const double half = (static_cast<double>(y) + 0.5 - top) / s * s / 2.0;
            if (half <= 0) continue;
            for (long x = static_cast<long>(cx - half); x <= static_cast<long>(cx + half); ++x) {
                if (std::abs(static_cast<double>(x) + 0.5 - cx) <= half) paint(y, x, inst);
            }
        }
    }
    for (int n = spawn_count(SceneClass::Bike); n > 0; --n) {
        const auto inst = new_instance(SceneClass::Bike);
        const double r = urange(3, 4.5) * hs;
        const double cx = urange(2.4 * r, static_cast<double>(W) - 2.4 * r);
        const double cy = urange(static_cast<double>(horizon) + 8 * hs, static_cast<double>(H) - r - 1);
        for (const double wx : {cx - 1.3 * r, cx + 1.3 * r}) {
            for (long y = static_cast<long>(cy - r) - 1; y <= static_cast<long>(cy + r) + 1; ++y)
                for (long x = static_cast<long>(wx - r) - 1; x <= static_cast<long>(wx + r) + 1; ++x) {
                    const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - wx;
                    if (dx * dx + dy * dy <= r * r) paint(y, x, inst);
                }
        }
    }
    return lay;
}

double texture(std::uint8_t cls, double x, double y, double f, double phase, double height) {
    switch (static_cast<SceneClass>(cls)) {
        case SceneClass::Background: return 0.5 - y / height;
        case SceneClass::Ground: return std::sin(0.9 * f * x + phase) * std::sin(0.9 * f * y);
        case SceneClass::Road: return std::sin(1.2 * f * y + phase);
        case SceneClass::Building: {
            const double wx = std::sin(1.1 * f * x + phase), wy = std::sin(1.1 * f * y);
            return (wx > 0 && wy > 0) ? -1.0 : 0.4;
        }
        case SceneClass::Vehicle: return std::cos(0.5 * f * x + phase);
        case SceneClass::Person: return 0.0;
        case SceneClass::Sign: return std::sin(0.8 * f * (x + y) + phase);
        case SceneClass::Bike: return 0.5 * std::sin(1.5 * f * x + phase);
    }
    return 0.0;
}

Image render(const Layout& lay, const DomainStyle& style, Rng& rng) {
    const std::size_t H = lay.label.height, W = lay.label.width;
    std::vector<Instance> inst = lay.instances;
    for (auto& i : inst) i.brightness = 1.0 + style.instance_jitter * rng.uniform(-1.0, 1.0);
    const auto hue = hue_matrix(style.hue_degrees);
    const bool rotate = style.hue_degrees != 0.0;
    Image img(H, W, 3);
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            const auto& in = inst[lay.owner[y * W + x]];
            const auto& base = style.palette[in.cls];
            const double t = style.texture_amplitude *
                             texture(in.cls, static_cast<double>(x), static_cast<double>(y), style.texture_frequency,
                                     in.phase, static_cast<double>(H));
            double rgb[3];
            for (int c = 0; c < 3; ++c) rgb[c] = base[c] * in.brightness + t + style.noise * rng.normal();
            if (rotate) apply_hue(rgb, hue);
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(rgb[c], 0.0, 1.0);
                if (style.gamma != 1.0) v = std::pow(v, style.gamma);
                img.at(y, x, static_cast<std::size_t>(c)) = static_cast<double>(static_cast<float>(v));
            }
        }
    }
    return img;
}

}  // namespace

std::vector<DatasetItem> generate(const SceneSpec& spec, const DomainStyle& style, std::size_t n,
                                  std::uint64_t seed, Split split) {
    spec.validate();
    style.validate();
    if (n < 1) throw ConfigError("generate: item count must be >= 1");
    std::vector<DatasetItem> items(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng layout_rng(derive_seed(seed, stream::kGenerate, 2 * i));
        Rng look_rng(derive_seed(seed, stream::kGenerate, 2 * i + 1));
        Layout lay = draw_layout(spec, layout_rng);
        auto& item = items[i];
        char id[32];
        std::snprintf(id, sizeof id, "%s_%05zu", split_name(split).c_str(), i);
        item.id = id;
        item.split = split;
        item.image = render(lay, style, look_rng);
        if (split != Split::Target) item.label = std::move(lay.label);
    }
    return items;
}

std::vector<DatasetItem> Dataset::all() const {
    std::vector<DatasetItem> out;
    out.reserve(source.size() + target.size() + eval.size());
    out.insert(out.end(), source.begin(), source.end());
    out.insert(out.end(), target.begin(), target.end());
    out.insert(out.end(), eval.begin(), eval.end());
    return out;
}

Dataset make_dataset(const DataConfig& config) {
    Dataset ds;
    ds.source = generate(config.scene, config.source_style, config.n_source, derive_seed(config.seed, 1), Split::Source);
    ds.target = generate(config.scene, config.target_style, config.n_target, derive_seed(config.seed, 2), Split::Target);
    ds.eval = generate(config.scene, config.target_style, config.n_eval, derive_seed(config.seed, 3), Split::Eval);
    return ds;
}

Dataset split_dataset(std::vector<DatasetItem> items) {
    Dataset ds;
    for (auto& item : items) {
        switch (item.split) {
            case Split::Source: ds.source.push_back(std::move(item)); break;
            case Split::Target: ds.target.push_back(std::move(item)); break;
            case Split::Eval: ds.eval.push_back(std::move(item)); break;
        }
    }
    return ds;
}

// --- files -----------------------------------------------------------------

namespace {

constexpr char kImgMagic[7] = {'D', 'S', 'P', 'I', 'M', 'G', '1'};
constexpr char kLblMagic[7] = {'D', 'S', 'P', 'L', 'B', 'L', '1'};
constexpr int kManifestVersion = 1;

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    return is;
}

void check_magic(std::istream& is, const char (&magic)[7], const std::filesystem::path& path) {
    char buf[7];
    io::get_bytes(is, buf, sizeof buf, "magic of " + path.string());
    if (std::memcmp(buf, magic, sizeof buf) != 0) throw DataError("unknown magic in " + path.string());
}

void check_eof(std::istream& is, const std::filesystem::path& path) {
    if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes in " + path.string());
}

}  // namespace

void write_image_file(const std::filesystem::path& path, const Image& image) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os.write(kImgMagic, sizeof kImgMagic);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(image.height));
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(image.width));
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(image.channels));
    for (double v : image.data) io::put<float>(os, static_cast<float>(v));
    if (!os) throw DataError("failed writing " + path.string());
}

Image read_image_file(const std::filesystem::path& path) {
    auto is = open_in(path);
    check_magic(is, kImgMagic, path);
    const auto h = io::get<std::uint32_t>(is, "height in " + path.string());
    const auto w = io::get<std::uint32_t>(is, "width in " + path.string());
    const auto c = io::get<std::uint32_t>(is, "channels in " + path.string());
    if (h == 0 || w == 0 || c == 0 || h > 16384 || w > 16384 || c > 4) {
        throw DataError("malformed header in " + path.string() + ": " + std::to_string(h) + "x" + std::to_string(w) +
                        "x" + std::to_string(c));
    }
    Image img(h, w, c);
    std::vector<float> raw(img.data.size());
    io::get_bytes(is, reinterpret_cast<char*>(raw.data()), raw.size() * sizeof(float), "pixel data of " + path.string());
    std::copy(raw.begin(), raw.end(), img.data.begin());
    check_eof(is, path);
    return img;
}

void write_label_file(const std::filesystem::path& path, const LabelMap& label) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os.write(kLblMagic, sizeof kLblMagic);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(label.height));
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(label.width));
    os.write(reinterpret_cast<const char*>(label.data.data()), static_cast<std::streamsize>(label.data.size()));
    if (!os) throw DataError("failed writing " + path.string());
}

LabelMap read_label_file(const std::filesystem::path& path) {
    auto is = open_in(path);
    check_magic(is, kLblMagic, path);
    const auto h = io::get<std::uint32_t>(is, "height in " + path.string());
    const auto w = io::get<std::uint32_t>(is, "width in " + path.string());
    if (h == 0 || w == 0 || h > 16384 || w > 16384) {
        throw DataError("malformed header in " + path.string() + ": " + std::to_string(h) + "x" + std::to_string(w));
    }
    LabelMap lab(h, w);
    io::get_bytes(is, reinterpret_cast<char*>(lab.data.data()), lab.data.size(), "label data of " + path.string());
    check_eof(is, path);
    return lab;
}

void write_dataset(const std::vector<DatasetItem>& items, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "dsp-dataset";
    manifest["version"] = kManifestVersion;
    manifest["classes"] = kSceneClasses;
    manifest["class_names"] = scene_class_names();
    auto& list = manifest["items"] = nlohmann::json::array();
    for (const auto& item : items) {
        if (item.split == Split::Target && item.label) {
            throw DataError("target item " + item.id + " carries a label; target labels must stay quarantined");
        }
        if (item.split != Split::Target && !item.label) throw DataError("labeled split item " + item.id + " has no label");
        nlohmann::json entry{{"id", item.id}, {"split", split_name(item.split)}, {"image", item.id + ".img"}};
        write_image_file(dir / (item.id + ".img"), item.image);
        if (item.label) {
            entry["label"] = item.id + ".lbl";
            write_label_file(dir / (item.id + ".lbl"), *item.label);
        }
        list.push_back(std::move(entry));
    }
    std::ofstream os(dir / "manifest.json", std::ios::trunc);
    if (!os) throw DataError("cannot write manifest in " + dir.string());
    os << manifest.dump(1) << '\n';
}

std::vector<DatasetItem> read_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream is(manifest_path);
    if (!is) throw DataError("missing manifest: " + manifest_path.string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    std::vector<DatasetItem> items;
    try {
        if (manifest.at("format") != "dsp-dataset") throw DataError("manifest format is not dsp-dataset");
        if (manifest.at("version").get<int>() != kManifestVersion) {
            throw DataError("unsupported manifest version " + manifest.at("version").dump());
        }
        if (manifest.at("classes").get<std::size_t>() != kSceneClasses) {
            throw DataError("manifest class count " + manifest.at("classes").dump() + " != " + std::to_string(kSceneClasses));
        }
        for (const auto& entry : manifest.at("items")) {
            DatasetItem item;
            item.id = entry.at("id").get<std::string>();
            item.split = parse_split(entry.at("split").get<std::string>());
            const auto img_path = dir / entry.at("image").get<std::string>();
            if (!std::filesystem::exists(img_path)) {
                throw DataError("item " + item.id + ": missing image file " + img_path.string());
            }
            item.image = read_image_file(img_path);
            if (item.split != Split::Target) {
                if (!entry.contains("label")) throw DataError("item " + item.id + ": labeled split without label file");
                const auto lbl_path = dir / entry.at("label").get<std::string>();
                if (!std::filesystem::exists(lbl_path)) {
                    throw DataError("item " + item.id + ": missing label file " + lbl_path.string());
                }
                item.label = read_label_file(lbl_path);
                if (item.label->height != item.image.height || item.label->width != item.image.width) {
                    throw DataError("item " + item.id + ": label and image sizes differ");
                }
            }
            items.push_back(std::move(item));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
    return items;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    for (std::size_t p = 0; p < image.pixels(); ++p) {
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = image.channels == 3 ? image.data[p * 3 + c] : image.data[p * image.channels];
            os.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
        }
    }
}

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& gray) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os << "P5\n" << width << ' ' << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
}

// --- augmentation ----------------------------------------------------------

Image rotate_hue(const Image& image, double degrees) {
    if (image.channels != 3) throw std::invalid_argument("rotate_hue: expected 3 channels");
    Image out = image;
    const auto m = hue_matrix(degrees);
    for (std::size_t p = 0; p < out.pixels(); ++p) apply_hue(out.data.data() + p * 3, m);
    return out;
}

Image gaussian_blur(const Image& image, double sigma) {
    if (!(sigma > 0.0)) return image;
    const long r = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double total = 0.0;
    for (long i = -r; i <= r; ++i) total += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    for (auto& v : k) v /= total;
    const auto H = static_cast<long>(image.height), W = static_cast<long>(image.width);
    const auto C = image.channels;
    Image tmp(image.height, image.width, C), out(image.height, image.width, C);
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0.0;
                for (long i = -r; i <= r; ++i) {
                    const long xx = std::clamp(x + i, 0L, W - 1);
                    s += k[static_cast<std::size_t>(i + r)] * image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(xx), c);
                }
                tmp.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = s;
            }
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0.0;
                for (long i = -r; i <= r; ++i) {
                    const long yy = std::clamp(y + i, 0L, H - 1);
                    s += k[static_cast<std::size_t>(i + r)] * tmp.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(x), c);
                }
                out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = s;
            }
    return out;
}

Image augment(const Image& image, const AugmentConfig& config, std::uint64_t seed) {
    if (!(config.jitter >= 0.0 && config.jitter < 1.0)) throw std::invalid_argument("augment: jitter must be in [0, 1)");
    Rng rng(seed);
    Image out = image;
    if (config.jitter > 0.0 && image.channels == 3) {
        const double j = config.jitter;
        const double brightness = rng.uniform(1.0 - j, 1.0 + j);
        const double contrast = rng.uniform(1.0 - j, 1.0 + j);
        const double saturation = rng.uniform(1.0 - j, 1.0 + j);
        const double hue = rng.uniform(-j, j) * 60.0;
        double mean_gray = 0.0;
        for (std::size_t p = 0; p < out.pixels(); ++p) {
            const double* px = out.data.data() + p * 3;
            mean_gray += (px[0] + px[1] + px[2]) / 3.0;
        }
        mean_gray = mean_gray * brightness / static_cast<double>(out.pixels());
        const auto m = hue_matrix(hue);
        for (std::size_t p = 0; p < out.pixels(); ++p) {
            double* px = out.data.data() + p * 3;
            for (int c = 0; c < 3; ++c) px[c] = mean_gray + contrast * (px[c] * brightness - mean_gray);
            const double g = (px[0] + px[1] + px[2]) / 3.0;
            for (int c = 0; c < 3; ++c) px[c] = g + saturation * (px[c] - g);
            apply_hue(px, m);
        }
    }
    if (config.blur_sigma > 0.0 && rng.bernoulli(config.blur_prob)) {
        out = gaussian_blur(out, rng.uniform(0.15, config.blur_sigma));
    }
    for (auto& v : out.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

}  // namespace dsp
