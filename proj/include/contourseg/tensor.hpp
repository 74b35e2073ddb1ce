#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "contourseg/common.hpp"

namespace contourseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches this tensor
  bool requires_grad = false;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense N-D tensor of 64-bit reals, row-major. Copying a Tensor copies the
// handle; the storage is shared. Ops record onto the thread's active
// GradTape (see TapeScope) when any input requires grad.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t extent(std::size_t axis) const { return impl_->shape[axis]; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad; }
  void zero_grad() {
    if (impl_) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  // Scalar access; throws ShapeError unless numel() == 1.
  double item() const;

  double at(std::initializer_list<std::size_t> index) const;

  // Throws NumericError naming `what` if any element is NaN/Inf.
  void check_finite(const char* what) const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class GradTape;
};

// Reverse-mode tape. Ops append one record per call while a TapeScope is
// active; backward() replays records in reverse order. Replay order equals
// recording order, so gradients are bitwise reproducible.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Seeds d(root)/d(root) = 1 and accumulates into the grad of every
  // recorded tensor; leaf grads are accumulated (callers zero_grad params
  // between steps). root must be scalar.
  void backward(const Tensor& root);

  std::size_t num_recorded() const { return records_.size(); }
  void clear() { records_.clear(); }

  struct Record {
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    // Reads output->grad, accumulates into inputs' grads.
    std::function<void()> backward;
  };

  void record(Record rec) { records_.push_back(std::move(rec)); }

 private:
  std::vector<Record> records_;
};

// Activates a tape on the current thread for its lifetime. Tapes are
// thread-local by construction and must not be shared across threads.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

GradTape* active_tape();

// ---- Elementwise ops (same shape, or limited broadcasting where noted) ----

// add/sub/mul/div support same-rank broadcasting: axes of extent 1 stretch.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);  // ties route grad to a

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor pow_scalar(const Tensor& a, double exponent);
Tensor clamp_min(const Tensor& a, double lo);  // max(a, lo) elementwise

Tensor neg(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) {
  return divide(a, b);
}

// ---- Reductions (sequential accumulation in index order) ----

Tensor sum(const Tensor& a);                      // -> scalar
Tensor sum(const Tensor& a, std::span<const int> axes, bool keepdims);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::span<const int> axes, bool keepdims);
Tensor reduce_max(const Tensor& a, std::span<const int> axes, bool keepdims);
Tensor reduce_min(const Tensor& a, std::span<const int> axes, bool keepdims);

// ---- Shape ops ----

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, int axis);
std::vector<Tensor> split(const Tensor& a, int axis,
                          std::span<const std::size_t> sizes);

// ---- Softmax / normalization ----

// Max-subtracted softmax along `axis`; rows sum to 1 within 1e-12.
Tensor softmax(const Tensor& a, int axis);

// Per-(sample, channel) normalization over spatial axes with learnable
// per-channel gamma/beta. Input [N,C,...]; gamma/beta shape [C].
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps = 1e-5);

// Per-sample min-max rescale of all non-batch elements to [0,1]; a sample
// with constant input maps to all zeros. Input [N,...].
Tensor minmax_normalize(const Tensor& x);

// ---- Convolution / pooling / resampling on [N,C,D,H,W] ----

// Cross-correlation. weight [K,C,kd,kh,kw], bias [K] or undefined Tensor.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 1, int dilation = 1);
// Per-axis padding variant (used for separable kernels).
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int pad_d, int pad_h, int pad_w, int dilation);

Tensor max_pool3d(const Tensor& input, int kernel, int stride);
Tensor avg_pool3d(const Tensor& input, int kernel, int stride);

Tensor upsample3d_nearest(const Tensor& input, int factor);
Tensor upsample3d_trilinear(const Tensor& input, int factor);

}  // namespace contourseg
