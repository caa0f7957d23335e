#include "dsp/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "binary_io.hpp"
#include "dsp/rng.hpp"

namespace dsp {

void ParamSet::add(std::string name, Tensor value) {
    if (contains(name)) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
    entries_.emplace_back(std::move(name), std::move(value));
}

bool ParamSet::contains(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return true;
    }
    return false;
}

const Tensor& ParamSet::at(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return t;
    }
    throw std::out_of_range("ParamSet: no parameter named " + name);
}

Tensor& ParamSet::at(const std::string& name) {
    return const_cast<Tensor&>(std::as_const(*this).at(name));
}

ParamSet ParamSet::clone(bool requires_grad) const {
    ParamSet out;
    for (const auto& [n, t] : entries_) out.add(n, Tensor(t.shape(), {t.data().begin(), t.data().end()}, requires_grad));
    return out;
}

ParamSet ParamSet::zeros_like() const {
    ParamSet out;
    for (const auto& [n, t] : entries_) out.add(n, Tensor::zeros(t.shape()));
    return out;
}

void ParamSet::check_compatible(const ParamSet& a, const ParamSet& b, const std::string& context) {
    if (a.size() != b.size()) {
        throw std::invalid_argument(context + ": parameter count " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& [na, ta] = a.entries_[i];
        const auto& [nb, tb] = b.entries_[i];
        if (na != nb) throw std::invalid_argument(context + ": parameter name mismatch " + na + " vs " + nb);
        if (ta.shape() != tb.shape()) {
            throw std::invalid_argument(context + ": shape mismatch for " + na + " " + shape_str(ta.shape()) +
                                        " vs " + shape_str(tb.shape()));
        }
    }
}

bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& [na, ta] = a.entries_[i];
        const auto& [nb, tb] = b.entries_[i];
        if (na != nb || ta.shape() != tb.shape()) return false;
        if (std::memcmp(ta.data().data(), tb.data().data(), ta.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

// --- SegNet ----------------------------------------------------------------

namespace {

constexpr int kStrides[SegNet::kBlocks] = {2, 2, 1, 1};

std::string block_name(int i, const char* what) { return "encoder." + std::to_string(i) + "." + what; }

}  // namespace

SegNet::SegNet(SegNetConfig config) : config_(config) {
    if (config_.classes < 2 || config_.classes > 254) throw std::invalid_argument("SegNet: classes must be in [2, 254]");
    if (config_.feature_width < 1) throw std::invalid_argument("SegNet: feature_width must be >= 1");
}

ParamSet SegNet::init_params(std::uint64_t seed) const {
    Rng rng(derive_seed(seed, stream::kInit));
    ParamSet params;
    auto he = [&](Shape shape, std::size_t fan_in) {
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        std::vector<double> v(numel(shape));
        for (auto& x : v) x = sd * rng.normal();
        return Tensor(std::move(shape), std::move(v), true);
    };
    const std::size_t F = config_.feature_width;
    std::size_t cin = config_.in_channels;
    for (int i = 0; i < kBlocks; ++i) {
        params.add(block_name(i, "weight"), he({3, 3, cin, F}, 9 * cin));
        params.add(block_name(i, "bias"), Tensor::zeros({F}, true));
        cin = F;
    }
    {
        const double sd = std::sqrt(1.0 / static_cast<double>(F));
        std::vector<double> v(F * config_.classes);
        for (auto& x : v) x = sd * rng.normal();
        params.add("head.weight", Tensor({1, 1, F, config_.classes}, std::move(v), true));
    }
    params.add("head.bias", Tensor::zeros({config_.classes}, true));
    return params;
}

Prediction SegNet::predict(Tape& tape, const ParamSet& params, const Tensor& image) const {
    if (image.rank() != 3 || image.dim(2) != config_.in_channels) {
        throw std::invalid_argument("SegNet::predict: expected [H, W, " + std::to_string(config_.in_channels) +
                                    "] input, got " + shape_str(image.shape()));
    }
    if (image.dim(0) % kDownsample || image.dim(1) % kDownsample) {
        throw std::invalid_argument("SegNet::predict: image size " + shape_str(image.shape()) +
                                    " is not divisible by " + std::to_string(kDownsample));
    }
    Tensor h = image;
    for (int i = 0; i < kBlocks; ++i) {
        h = relu(tape, conv2d(tape, h, params.at(block_name(i, "weight")), params.at(block_name(i, "bias")),
                              kStrides[i], 1));
    }
    Prediction out;
    out.features = h;
    Tensor logits = conv2d(tape, h, params.at("head.weight"), params.at("head.bias"), 1, 0);
    out.log_probs = log_softmax(tape, bilinear_upsample(tape, logits, kDownsample));
    return out;
}

Prediction SegNet::predict(Tape& tape, const ParamSet& params, const Image& image) const {
    return predict(tape, params, image.to_tensor());
}

bool SegNet::is_encoder_param(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

void ema_update(ParamSet& teacher, const ParamSet& student, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("ema_update: alpha must be in [0, 1]");
    ParamSet::check_compatible(teacher, student, "ema_update");
    auto s = student.begin();
    for (auto t = teacher.begin(); t != teacher.end(); ++t, ++s) {
        auto dst = t->second.mutable_data();
        const auto src = s->second.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = alpha * dst[i] + (1.0 - alpha) * src[i];
    }
}

LabelMap argmax_labels(const Tensor& scores) {
    if (scores.rank() != 3) throw ShapeError("argmax_labels: expected [H, W, C], got " + shape_str(scores.shape()));
    const std::size_t C = scores.dim(2);
    LabelMap out(scores.dim(0), scores.dim(1));
    for (std::size_t p = 0; p < out.pixels(); ++p) {
        const double* row = scores.data().data() + p * C;
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c) {
            if (row[c] > row[best]) best = c;
        }
        out.data[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

// --- checkpoint ------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'D', 'S', 'P', 'C', 'K', 'P', 'T', '1'};

void write_entries(std::ostream& os, const std::string& prefix, const ParamSet& set) {
    for (const auto& [name, t] : set) {
        const std::string full = prefix + name;
        io::put<std::uint32_t>(os, static_cast<std::uint32_t>(full.size()));
        os.write(full.data(), static_cast<std::streamsize>(full.size()));
        io::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
        os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    os.write(kCkptMagic, sizeof kCkptMagic);
    io::put<std::uint32_t>(os, ckpt.classes);
    io::put<std::uint32_t>(os, ckpt.feature_width);
    io::put<std::uint64_t>(os, ckpt.step);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.student.size() + ckpt.teacher.size() + ckpt.momentum.size()));
    write_entries(os, "student/", ckpt.student);
    write_entries(os, "teacher/", ckpt.teacher);
    write_entries(os, "momentum/", ckpt.momentum);
    if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path.string());
    char magic[8];
    io::get_bytes(is, magic, sizeof magic, "checkpoint magic");
    if (std::memcmp(magic, kCkptMagic, sizeof magic) != 0) {
        throw io::FormatError("unknown checkpoint magic in " + path.string());
    }
    Checkpoint ckpt;
    ckpt.classes = io::get<std::uint32_t>(is, "class count");
    ckpt.feature_width = io::get<std::uint32_t>(is, "feature width");
    ckpt.step = io::get<std::uint64_t>(is, "step");
    const auto entries = io::get<std::uint32_t>(is, "entry count");
    for (std::uint32_t e = 0; e < entries; ++e) {
        const auto len = io::get<std::uint32_t>(is, "name length");
        if (len == 0 || len > 4096) throw io::FormatError("malformed parameter name length in " + path.string());
        std::string name(len, '\0');
        io::get_bytes(is, name.data(), len, "parameter name");
        const auto rank = io::get<std::uint32_t>(is, "rank of " + name);
        if (rank == 0 || rank > 8) throw io::FormatError("malformed rank for " + name);
        Shape shape(rank);
        for (auto& ext : shape) {
            ext = io::get<std::uint32_t>(is, "extent of " + name);
            if (ext == 0) throw io::FormatError("zero extent for " + name);
        }
        std::vector<double> data(numel(shape));
        io::get_bytes(is, reinterpret_cast<char*>(data.data()), data.size() * sizeof(double), "data of " + name);
        const auto slash = name.find('/');
        if (slash == std::string::npos) throw io::FormatError("parameter without section prefix: " + name);
        const std::string section = name.substr(0, slash), pname = name.substr(slash + 1);
        if (section == "student") ckpt.student.add(pname, Tensor(std::move(shape), std::move(data), true));
        else if (section == "teacher") ckpt.teacher.add(pname, Tensor(std::move(shape), std::move(data)));
        else if (section == "momentum") ckpt.momentum.add(pname, Tensor(std::move(shape), std::move(data)));
        else throw io::FormatError("unknown checkpoint section: " + section);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw io::FormatError("trailing bytes in checkpoint " + path.string());
    ParamSet::check_compatible(ckpt.student, ckpt.teacher, "checkpoint student/teacher");
    if (ckpt.momentum.size()) ParamSet::check_compatible(ckpt.student, ckpt.momentum, "checkpoint momentum");
    return ckpt;
}

}  // namespace dsp
