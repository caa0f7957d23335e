#pragma once

// Dense row-major float64 tensors with a tape-based reverse-mode autodiff.
//
// Layout convention for images and feature maps is channel-last: [H, W, C].
// Every differentiable op takes the Tape it should record on; nothing is
// recorded when no input requires a gradient, so inference paths (teacher,
// evaluation) pay no bookkeeping cost.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dsp {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when an op receives incompatible shapes. The message names the op.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class Tape;

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t size() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    /// In-place write access. Reserved for optimizer updates and test setup;
    /// mutating a tensor that a live tape saved for backward is undefined.
    std::span<double> mutable_data() { return impl_->data; }

    double operator[](std::size_t i) const { return impl_->data[i]; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

    /// Identity of the underlying storage; used to key gradients.
    const void* id() const { return impl_.get(); }

    /// Deep copy that never requires grad.
    Tensor detach() const;

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

/// Result of Tape::backward. Lookup by tensor; tensors the loss does not
/// depend on yield all-zero gradients.
class Gradients {
public:
    std::vector<double> operator[](const Tensor& t) const;
    const std::vector<double>* find(const Tensor& t) const;

private:
    std::unordered_map<const void*, std::vector<double>> grads_;
    friend class Tape;
};

class Tape {
public:
    /// grad_in[i] is null when input i does not require a gradient; otherwise
    /// it is a zero-initialised (or partially accumulated) buffer to add into.
    using BackwardFn =
        std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> grad_in)>;

    /// Registers `output` as produced from `inputs`. If any input requires a
    /// gradient the node is appended and `output` is marked requires_grad.
    Tensor record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward);

    /// Reverse sweep from a scalar loss. Throws std::invalid_argument when the
    /// loss is not a single-element tensor.
    Gradients backward(const Tensor& loss) const;

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        std::vector<Tensor> inputs;
        Tensor output;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

// --- ops -------------------------------------------------------------------

/// x [H, W, Cin], weight [k, k, Cin, Cout], bias [Cout] -> [Ho, Wo, Cout].
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);
Tensor relu(Tape& tape, const Tensor& x);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul_scalar(Tape& tape, const Tensor& x, double s);
Tensor elementwise_mul(Tape& tape, const Tensor& a, const Tensor& b);
/// Non-overlapping k×k mean pooling over the first two axes of [H, W, C].
Tensor avg_pool2d(Tape& tape, const Tensor& x, int k);
/// Bilinear upsampling of [h, w, C] by an integer factor (half-pixel centers,
/// edge-clamped sampling).
Tensor bilinear_upsample(Tape& tape, const Tensor& x, int factor);
/// Log-softmax along the last axis, computed with max subtraction.
Tensor log_softmax(Tape& tape, const Tensor& x);
/// Per-position negative log-likelihood: log_probs [..., C], one label per
/// position -> [...] holding -log_probs[y]; label 255 yields 0.
Tensor gather_nll(Tape& tape, const Tensor& log_probs, std::span<const std::uint8_t> labels);
Tensor mean(Tape& tape, const Tensor& x);
Tensor sum(Tape& tape, const Tensor& x);
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
/// Treats x as rows of its last axis ([N, F]) and returns [rows.size(), F] with
/// row i equal to scale[i] * x[rows[i]].
Tensor gather_rows_scaled(Tape& tape, const Tensor& x, std::span<const std::size_t> rows,
                          std::span<const double> scale);

inline constexpr std::uint8_t kIgnoreLabel = 255;

}  // namespace dsp
