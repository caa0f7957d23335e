#include "dsp/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace dsp {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

[[noreturn]] void shape_fail(const std::string& op, const std::string& detail) {
    throw ShapeError(op + ": " + detail);
}

void require_rank(const std::string& op, const Tensor& t, std::size_t rank, const char* what) {
    if (!t.defined()) shape_fail(op, std::string(what) + " is undefined");
    if (t.rank() != rank) {
        shape_fail(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                           shape_str(t.shape()));
    }
}

void require_same(const std::string& op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        shape_fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

}  // namespace

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
    for (auto e : shape) {
        if (e == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
    }
    if (numel(shape) != data.size()) {
        throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                         " values but data has " + std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

std::vector<double> Gradients::operator[](const Tensor& t) const {
    if (const auto* g = find(t)) return *g;
    return std::vector<double>(t.size(), 0.0);
}

const std::vector<double>* Gradients::find(const Tensor& t) const {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? nullptr : &it->second;
}

Tensor Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
    const bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!needs) return output;
    output.set_requires_grad(true);
    nodes_.push_back(Node{std::move(inputs), output, std::move(backward)});
    return output;
}

Gradients Tape::backward(const Tensor& loss) const {
    if (!loss.defined() || loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be a scalar tensor, got shape " +
                                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    Gradients result;
    auto& grads = result.grads_;
    // Every tensor the tape has seen that requires grad starts at zero, so
    // unreachable leaves report zeros rather than being absent.
    for (const auto& node : nodes_) {
        for (const auto& in : node.inputs) {
            if (in.requires_grad()) grads.try_emplace(in.id(), in.size(), 0.0);
        }
    }
    if (loss.requires_grad()) grads[loss.id()] = std::vector<double>{1.0};
    else grads.try_emplace(loss.id(), 1, 0.0);

    std::vector<std::vector<double>*> grad_in;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        auto out = grads.find(it->output.id());
        if (out == grads.end()) continue;
        grad_in.assign(it->inputs.size(), nullptr);
        for (std::size_t i = 0; i < it->inputs.size(); ++i) {
            const auto& in = it->inputs[i];
            if (in.requires_grad()) grad_in[i] = &grads.try_emplace(in.id(), in.size(), 0.0).first->second;
        }
        it->backward(out->second, grad_in);
    }
    return result;
}

// --- ops -------------------------------------------------------------------

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    const std::string op = "conv2d";
    require_rank(op, x, 3, "input");
    require_rank(op, weight, 4, "weight");
    require_rank(op, bias, 1, "bias");
    if (stride < 1 || pad < 0) shape_fail(op, "stride must be >= 1 and pad >= 0");
    const auto H = static_cast<long>(x.dim(0)), W = static_cast<long>(x.dim(1)), Cin = static_cast<long>(x.dim(2));
    const auto K = static_cast<long>(weight.dim(0)), Cout = static_cast<long>(weight.dim(3));
    if (static_cast<long>(weight.dim(1)) != K || static_cast<long>(weight.dim(2)) != Cin ||
        static_cast<long>(bias.dim(0)) != Cout) {
        shape_fail(op, "input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()) +
                           " and bias " + shape_str(bias.shape()));
    }
    if (H + 2 * pad < K || W + 2 * pad < K) {
        shape_fail(op, "kernel " + std::to_string(K) + " larger than padded input " + shape_str(x.shape()));
    }
    const long Ho = (H + 2 * pad - K) / stride + 1;
    const long Wo = (W + 2 * pad - K) / stride + 1;
    const long P = Ho * Wo;
    const long Kc = K * K * Cin;
    const bool pointwise = K == 1 && stride == 1 && pad == 0;

    // im2col: one row per output pixel, columns ordered (ky, kx, ci) to match
    // the weight layout.
    auto col = std::make_shared<std::vector<double>>();
    if (!pointwise) {
        col->assign(static_cast<std::size_t>(P * Kc), 0.0);
        const double* xd = x.data().data();
        for (long oy = 0; oy < Ho; ++oy) {
            for (long ox = 0; ox < Wo; ++ox) {
                double* row = col->data() + (oy * Wo + ox) * Kc;
                for (long ky = 0; ky < K; ++ky) {
                    const long iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    for (long kx = 0; kx < K; ++kx) {
                        const long ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= W) continue;
                        std::copy_n(xd + (iy * W + ix) * Cin, Cin, row + (ky * K + kx) * Cin);
                    }
                }
            }
        }
    }
    const double* col_ptr = pointwise ? x.data().data() : col->data();

    std::vector<double> out(static_cast<std::size_t>(P * Cout));
    {
        ConstMapMat cm(col_ptr, P, Kc);
        ConstMapMat wm(weight.data().data(), Kc, Cout);
        MapMat om(out.data(), P, Cout);
        om.noalias() = cm * wm;
        Eigen::Map<const Eigen::RowVectorXd> bv(bias.data().data(), Cout);
        om.rowwise() += bv;
    }
    Tensor result({static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo), static_cast<std::size_t>(Cout)},
                  std::move(out));

    return tape.record(
        {x, weight, bias}, result,
        [=](std::span<const double> g, std::span<std::vector<double>*> gin) {
            ConstMapMat gm(g.data(), P, Cout);
            const double* cp = pointwise ? x.data().data() : col->data();
            ConstMapMat cm(cp, P, Kc);
            if (gin[1]) {
                MapMat gw(gin[1]->data(), Kc, Cout);
                gw.noalias() += cm.transpose() * gm;
            }
            if (gin[2]) {
                // Plain loop: Eigen reductions pick their summation order from
                // the buffer alignment, which would break bitwise determinism.
                std::vector<double> acc(static_cast<std::size_t>(Cout), 0.0);
                for (long p = 0; p < P; ++p) {
                    for (long c = 0; c < Cout; ++c) acc[c] += g[p * Cout + c];
                }
                for (long c = 0; c < Cout; ++c) (*gin[2])[c] += acc[c];
            }
            if (gin[0]) {
                ConstMapMat wm(weight.data().data(), Kc, Cout);
                if (pointwise) {
                    MapMat gx(gin[0]->data(), P, Kc);
                    gx.noalias() += gm * wm.transpose();
                    return;
                }
                RowMat gcol(P, Kc);
                gcol.noalias() = gm * wm.transpose();
                double* gx = gin[0]->data();
                for (long oy = 0; oy < Ho; ++oy) {
                    for (long ox = 0; ox < Wo; ++ox) {
                        const double* row = gcol.data() + (oy * Wo + ox) * Kc;
                        for (long ky = 0; ky < K; ++ky) {
                            const long iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (long kx = 0; kx < K; ++kx) {
                                const long ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= W) continue;
                                const double* src = row + (ky * K + kx) * Cin;
                                double* dst = gx + (iy * W + ix) * Cin;
                                for (long c = 0; c < Cin; ++c) dst[c] += src[c];
                            }
                        }
                    }
                }
            }
        });
}

Tensor relu(Tape& tape, const Tensor& x) {
    std::vector<double> out(x.size());
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
    Tensor result(x.shape(), std::move(out));
    return tape.record({x}, result, [x](std::span<const double> g, std::span<std::vector<double>*> gin) {
        auto& gx = *gin[0];
        const auto xd = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xd[i] > 0.0) gx[i] += g[i];
        }
    });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Tensor result(a.shape(), std::move(out));
    return tape.record({a, b}, result, [](std::span<const double> g, std::span<std::vector<double>*> gin) {
        for (auto* gi : gin) {
            if (!gi) continue;
            for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
        }
    });
}

Tensor mul_scalar(Tape& tape, const Tensor& x, double s) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
    Tensor result(x.shape(), std::move(out));
    return tape.record({x}, result, [s](std::span<const double> g, std::span<std::vector<double>*> gin) {
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
    });
}

Tensor elementwise_mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same("elementwise_mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tensor result(a.shape(), std::move(out));
    return tape.record({a, b}, result, [a, b](std::span<const double> g, std::span<std::vector<double>*> gin) {
        if (gin[0]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * b[i];
        }
        if (gin[1]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * a[i];
        }
    });
}

Tensor avg_pool2d(Tape& tape, const Tensor& x, int k) {
    const std::string op = "avg_pool2d";
    require_rank(op, x, 3, "input");
    if (k < 1) shape_fail(op, "window must be >= 1");
    const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2), kk = static_cast<std::size_t>(k);
    if (H % kk || W % kk) shape_fail(op, "input " + shape_str(x.shape()) + " not divisible by window " + std::to_string(k));
    const std::size_t Ho = H / kk, Wo = W / kk;
    const double inv = 1.0 / static_cast<double>(kk * kk);
    std::vector<double> out(Ho * Wo * C, 0.0);
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t xx = 0; xx < W; ++xx) {
            const double* src = x.data().data() + (y * W + xx) * C;
            double* dst = out.data() + ((y / kk) * Wo + xx / kk) * C;
            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
        }
    }
    for (auto& v : out) v *= inv;
    Tensor result({Ho, Wo, C}, std::move(out));
    return tape.record({x}, result, [=](std::span<const double> g, std::span<std::vector<double>*> gin) {
        auto& gx = *gin[0];
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t xx = 0; xx < W; ++xx) {
                const double* src = g.data() + ((y / kk) * Wo + xx / kk) * C;
                double* dst = gx.data() + (y * W + xx) * C;
                for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
            }
        }
    });
}

namespace {

struct Interp {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w1;  // weight of i1; i0 gets 1 - w1
};

Interp interp_axis(std::size_t in, std::size_t factor) {
    Interp r;
    const std::size_t out = in * factor;
    r.i0.resize(out);
    r.i1.resize(out);
    r.w1.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        if (src < 0.0) src = 0.0;
        auto lo = static_cast<std::size_t>(std::floor(src));
        if (lo > in - 1) lo = in - 1;
        r.i0[o] = lo;
        r.i1[o] = std::min(lo + 1, in - 1);
        r.w1[o] = src - static_cast<double>(lo);
    }
    return r;
}

}  // namespace

Tensor bilinear_upsample(Tape& tape, const Tensor& x, int factor) {
    const std::string op = "bilinear_upsample";
    require_rank(op, x, 3, "input");
    if (factor < 1) shape_fail(op, "factor must be >= 1");
    const std::size_t h = x.dim(0), w = x.dim(1), C = x.dim(2), f = static_cast<std::size_t>(factor);
    const std::size_t Ho = h * f, Wo = w * f;
    auto ry = std::make_shared<Interp>(interp_axis(h, f));
    auto rx = std::make_shared<Interp>(interp_axis(w, f));
    std::vector<double> out(Ho * Wo * C);
    const double* xd = x.data().data();
    for (std::size_t oy = 0; oy < Ho; ++oy) {
        const double wy1 = ry->w1[oy], wy0 = 1.0 - wy1;
        const double* r0 = xd + ry->i0[oy] * w * C;
        const double* r1 = xd + ry->i1[oy] * w * C;
        for (std::size_t ox = 0; ox < Wo; ++ox) {
            const double wx1 = rx->w1[ox], wx0 = 1.0 - wx1;
            const std::size_t a = rx->i0[ox] * C, b = rx->i1[ox] * C;
            double* dst = out.data() + (oy * Wo + ox) * C;
            for (std::size_t c = 0; c < C; ++c) {
                dst[c] = wy0 * (wx0 * r0[a + c] + wx1 * r0[b + c]) + wy1 * (wx0 * r1[a + c] + wx1 * r1[b + c]);
            }
        }
    }
    Tensor result({Ho, Wo, C}, std::move(out));
    return tape.record({x}, result, [=](std::span<const double> g, std::span<std::vector<double>*> gin) {
        double* gx = gin[0]->data();
        for (std::size_t oy = 0; oy < Ho; ++oy) {
            const double wy1 = ry->w1[oy], wy0 = 1.0 - wy1;
            double* r0 = gx + ry->i0[oy] * w * C;
            double* r1 = gx + ry->i1[oy] * w * C;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                const double wx1 = rx->w1[ox], wx0 = 1.0 - wx1;
                const std::size_t a = rx->i0[ox] * C, b = rx->i1[ox] * C;
                const double* src = g.data() + (oy * Wo + ox) * C;
                for (std::size_t c = 0; c < C; ++c) {
                    r0[a + c] += wy0 * wx0 * src[c];
                    r0[b + c] += wy0 * wx1 * src[c];
                    r1[a + c] += wy1 * wx0 * src[c];
                    r1[b + c] += wy1 * wx1 * src[c];
                }
            }
        }
    });
}

Tensor log_softmax(Tape& tape, const Tensor& x) {
    if (!x.defined() || x.rank() < 1) shape_fail("log_softmax", "input must have rank >= 1");
    const std::size_t C = x.shape().back();
    const std::size_t rows = x.size() / C;
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.data().data() + r * C;
        double* dst = out.data() + r * C;
        const double mx = *std::max_element(src, src + C);
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += std::exp(src[c] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t c = 0; c < C; ++c) dst[c] = src[c] - lse;
    }
    Tensor result(x.shape(), std::move(out));
    return tape.record({x}, result, [result, C, rows](std::span<const double> g, std::span<std::vector<double>*> gin) {
        auto& gx = *gin[0];
        const auto y = result.data();
        for (std::size_t r = 0; r < rows; ++r) {
            double gs = 0.0;
            for (std::size_t c = 0; c < C; ++c) gs += g[r * C + c];
            for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += g[r * C + c] - std::exp(y[r * C + c]) * gs;
        }
    });
}

Tensor gather_nll(Tape& tape, const Tensor& log_probs, std::span<const std::uint8_t> labels) {
    const std::string op = "gather_nll";
    if (!log_probs.defined() || log_probs.rank() < 2) shape_fail(op, "log_probs must have rank >= 2");
    const std::size_t C = log_probs.shape().back();
    const std::size_t rows = log_probs.size() / C;
    if (labels.size() != rows) {
        shape_fail(op, "log_probs " + shape_str(log_probs.shape()) + " needs " + std::to_string(rows) +
                           " labels, got " + std::to_string(labels.size()));
    }
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        if (lab[r] == kIgnoreLabel) continue;
        if (lab[r] >= C) shape_fail(op, "label " + std::to_string(lab[r]) + " out of range for " + std::to_string(C) + " classes");
        out[r] = -log_probs[r * C + lab[r]];
    }
    Shape shape(log_probs.shape().begin(), log_probs.shape().end() - 1);
    Tensor result(std::move(shape), std::move(out));
    return tape.record({log_probs}, result,
                       [lab = std::move(lab), C](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           auto& gx = *gin[0];
                           for (std::size_t r = 0; r < lab.size(); ++r) {
                               if (lab[r] != kIgnoreLabel) gx[r * C + lab[r]] -= g[r];
                           }
                       });
}

Tensor sum(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return tape.record({x}, Tensor::scalar(s), [](std::span<const double> g, std::span<std::vector<double>*> gin) {
        for (auto& v : *gin[0]) v += g[0];
    });
}

Tensor mean(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    return tape.record({x}, Tensor::scalar(s * inv),
                       [inv](std::span<const double> g, std::span<std::vector<double>*> gin) {
                           for (auto& v : *gin[0]) v += g[0] * inv;
                       });
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
    return tape.record({x}, result, [](std::span<const double> g, std::span<std::vector<double>*> gin) {
        auto& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Tensor gather_rows_scaled(Tape& tape, const Tensor& x, std::span<const std::size_t> rows,
                          std::span<const double> scale) {
    const std::string op = "gather_rows_scaled";
    if (!x.defined() || x.rank() < 2) shape_fail(op, "input must have rank >= 2");
    if (rows.size() != scale.size()) shape_fail(op, "rows and scale lengths differ");
    if (rows.empty()) shape_fail(op, "no rows selected");
    const std::size_t F = x.shape().back();
    const std::size_t n = x.size() / F;
    std::vector<std::size_t> r(rows.begin(), rows.end());
    std::vector<double> s(scale.begin(), scale.end());
    std::vector<double> out(r.size() * F);
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (r[i] >= n) shape_fail(op, "row " + std::to_string(r[i]) + " out of range for " + shape_str(x.shape()));
        for (std::size_t f = 0; f < F; ++f) out[i * F + f] = s[i] * x[r[i] * F + f];
    }
    Tensor result({r.size(), F}, std::move(out));
    return tape.record({x}, result,
                       [r = std::move(r), s = std::move(s), F](std::span<const double> g,
                                                               std::span<std::vector<double>*> gin) {
                           auto& gx = *gin[0];
                           for (std::size_t i = 0; i < r.size(); ++i) {
                               for (std::size_t f = 0; f < F; ++f) gx[r[i] * F + f] += s[i] * g[i * F + f];
                           }
                       });
}

}  // namespace dsp
