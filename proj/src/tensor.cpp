#include "contourseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

namespace contourseg {

int max_threads() {
  static const int cached = [] {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("CONTOURSEG_THREADS")) {
      const int cap = std::atoi(env);
      if (cap >= 1 && cap < hw) hw = cap;
      if (cap >= 1 && hw < 1) hw = cap;
    }
    return hw;
  }();
  return cached;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

thread_local GradTape* g_active_tape = nullptr;

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;

bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void record_unary(const Tensor& input, Tensor& output, std::function<void()> fn) {
  output.impl()->requires_grad = true;
  g_active_tape->record({{input.impl()}, output.impl(), std::move(fn)});
}

void record_binary(const Tensor& a, const Tensor& b, Tensor& output, std::function<void()> fn) {
  output.impl()->requires_grad = true;
  g_active_tape->record({{a.impl(), b.impl()}, output.impl(), std::move(fn)});
}

void record_many(std::vector<ImplPtr> inputs, Tensor& output, std::function<void()> fn) {
  output.impl()->requires_grad = true;
  g_active_tape->record({std::move(inputs), output.impl(), std::move(fn)});
}

// Skip a record whose output never received gradient (dead branch).
bool has_incoming_grad(const ImplPtr& out) { return !out->grad.empty(); }

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  auto impl = std::make_shared<Impl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl()->data.begin(), t.impl()->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (!impl_ || impl_->data.size() != 1) {
    throw ShapeError("item() requires a single-element tensor, got " +
                     (impl_ ? shape_str(impl_->shape) : std::string("undefined")));
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != ndim()) throw ShapeError("index rank mismatch");
  const auto strides = row_major_strides(impl_->shape);
  std::size_t off = 0, axis = 0;
  for (std::size_t i : index) {
    if (i >= impl_->shape[axis]) throw ShapeError("index out of range");
    off += i * strides[axis++];
  }
  return impl_->data[off];
}

void Tensor::check_finite(const char* what) const {
  for (double v : impl_->data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value in ") + what);
    }
  }
}

TapeScope::TapeScope(GradTape& tape) : previous_(g_active_tape) {
  g_active_tape = &tape;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

GradTape* active_tape() { return g_active_tape; }

void GradTape::backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward root must be scalar, got " + shape_str(root.shape()));
  }
  // Reset non-leaf grads so repeated backward calls accumulate only into
  // leaves and never compound through intermediates.
  for (Record& rec : records_) rec.output->grad.clear();
  root.impl()->ensure_grad();
  root.impl()->grad[0] += 1.0;
  for (std::size_t i = records_.size(); i-- > 0;) {
    Record& rec = records_[i];
    if (!has_incoming_grad(rec.output)) continue;
    rec.backward();
  }
}

// ---------------------------------------------------------------------------
// Broadcasting machinery
// ---------------------------------------------------------------------------

namespace {

struct BroadcastPlan {
  Shape out_shape;
  std::vector<std::size_t> stride_a;  // 0 on stretched axes
  std::vector<std::size_t> stride_b;
  bool same_shape = false;
};

BroadcastPlan make_broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  if (a == b) {
    BroadcastPlan plan;
    plan.out_shape = a;
    plan.same_shape = true;
    return plan;
  }
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  BroadcastPlan plan;
  plan.out_shape.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) {
      plan.out_shape[i] = a[i];
    } else if (a[i] == 1 || b[i] == 1) {
      plan.out_shape[i] = std::max(a[i], b[i]);
    } else {
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
    }
  }
  const auto sa = row_major_strides(a);
  const auto sb = row_major_strides(b);
  plan.stride_a.resize(a.size());
  plan.stride_b.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    plan.stride_a[i] = (a[i] == 1 && plan.out_shape[i] != 1) ? 0 : sa[i];
    plan.stride_b[i] = (b[i] == 1 && plan.out_shape[i] != 1) ? 0 : sb[i];
  }
  return plan;
}

// Calls visit(out_index, a_offset, b_offset) for every output element in
// row-major order. Sequential by construction.
template <class Visit>
void for_each_broadcast(const BroadcastPlan& plan, Visit visit) {
  const std::size_t rank = plan.out_shape.size();
  const std::size_t total = shape_numel(plan.out_shape);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off_a = 0, off_b = 0;
  for (std::size_t i = 0; i < total; ++i) {
    visit(i, off_a, off_b);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      off_a += plan.stride_a[ax];
      off_b += plan.stride_b[ax];
      if (idx[ax] < plan.out_shape[ax]) break;
      off_a -= plan.stride_a[ax] * plan.out_shape[ax];
      off_b -= plan.stride_b[ax] * plan.out_shape[ax];
      idx[ax] = 0;
    }
  }
}

enum class BinKind { Add, Sub, Mul, Div, Max };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
  const BroadcastPlan plan = make_broadcast_plan(a.shape(), b.shape(), name);
  Tensor out = Tensor::zeros(plan.out_shape);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();

  auto eval = [kind](double x, double y) {
    switch (kind) {
      case BinKind::Add: return x + y;
      case BinKind::Sub: return x - y;
      case BinKind::Mul: return x * y;
      case BinKind::Div: return x / y;
      case BinKind::Max: return x >= y ? x : y;
    }
    return 0.0;
  };

  if (plan.same_shape) {
    const std::size_t n = out.numel();
    switch (kind) {
      case BinKind::Add: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinKind::Sub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinKind::Mul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
      case BinKind::Div: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
      case BinKind::Max: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] >= pb[i] ? pa[i] : pb[i]; break;
    }
  } else {
    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      po[i] = eval(pa[ia], pb[ib]);
    });
  }
  if (kind == BinKind::Div) out.check_finite("divide");

  if (tracing({&a, &b})) {
    auto ia = a.impl(), ib = b.impl(), io = out.impl();
    auto fn = [ia, ib, io, plan, kind]() {
      const std::vector<double>& g = io->grad;
      const bool need_a = ia->requires_grad;
      const bool need_b = ib->requires_grad;
      if (need_a) ia->ensure_grad();
      if (need_b) ib->ensure_grad();
      auto accum = [&](std::size_t i, std::size_t oa, std::size_t ob) {
        const double gi = g[i];
        switch (kind) {
          case BinKind::Add:
            if (need_a) ia->grad[oa] += gi;
            if (need_b) ib->grad[ob] += gi;
            break;
          case BinKind::Sub:
            if (need_a) ia->grad[oa] += gi;
            if (need_b) ib->grad[ob] -= gi;
            break;
          case BinKind::Mul:
            if (need_a) ia->grad[oa] += gi * ib->data[ob];
            if (need_b) ib->grad[ob] += gi * ia->data[oa];
            break;
          case BinKind::Div: {
            const double inv = 1.0 / ib->data[ob];
            if (need_a) ia->grad[oa] += gi * inv;
            if (need_b) ib->grad[ob] -= gi * ia->data[oa] * inv * inv;
            break;
          }
          case BinKind::Max:
            if (ia->data[oa] >= ib->data[ob]) {
              if (need_a) ia->grad[oa] += gi;
            } else {
              if (need_b) ib->grad[ob] += gi;
            }
            break;
        }
      };
      if (plan.same_shape) {
        const std::size_t n = g.size();
        for (std::size_t i = 0; i < n; ++i) accum(i, i, i);
      } else {
        for_each_broadcast(plan, accum);
      }
    };
    Tensor a_copy = a, b_copy = b;
    record_binary(a_copy, b_copy, out, std::move(fn));
  }
  return out;
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd_factor, const char* name, bool check = false) {
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (check) out.check_finite(name);
  if (tracing({&a})) {
    auto ia = a.impl(), io = out.impl();
    auto fn = [ia, io, bwd_factor]() {
      ia->ensure_grad();
      const std::size_t m = io->grad.size();
      for (std::size_t i = 0; i < m; ++i) {
        ia->grad[i] += io->grad[i] * bwd_factor(ia->data[i], io->data[i]);
      }
    };
    Tensor a_copy = a;
    record_unary(a_copy, out, std::move(fn));
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }
Tensor divide(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Div, "divide"); }
Tensor maximum(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Max, "maximum"); }

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; },
                  [](double, double) { return 1.0; }, "add_scalar");
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x * s; },
                  [s](double, double) { return s; }, "mul_scalar");
}

Tensor pow_scalar(const Tensor& a, double exponent) {
  return unary_op(a, [exponent](double x) { return std::pow(x, exponent); },
                  [exponent](double x, double) { return exponent * std::pow(x, exponent - 1.0); },
                  "pow_scalar", /*check=*/true);
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_op(a, [lo](double x) { return x >= lo ? x : lo; },
                  [lo](double x, double) { return x >= lo ? 1.0 : 0.0; }, "clamp_min");
}

Tensor neg(const Tensor& a) {
  return unary_op(a, [](double x) { return -x; },
                  [](double, double) { return -1.0; }, "neg");
}

Tensor log(const Tensor& a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; }, "log", /*check=*/true);
}

Tensor exp(const Tensor& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; }, "exp", /*check=*/true);
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a,
                  [](double x) {
                    // Stable in both tails.
                    if (x >= 0.0) {
                      const double e = std::exp(-x);
                      return 1.0 / (1.0 + e);
                    }
                    const double e = std::exp(x);
                    return e / (1.0 + e);
                  },
                  [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {

// Normalizes an axis list into a keep/reduce bitmap.
std::vector<bool> reduce_map(const Shape& shape, std::span<const int> axes) {
  std::vector<bool> reduced(shape.size(), false);
  for (int ax : axes) {
    if (ax < 0 || static_cast<std::size_t>(ax) >= shape.size()) {
      throw ShapeError("reduction axis " + std::to_string(ax) + " out of range for " + shape_str(shape));
    }
    reduced[static_cast<std::size_t>(ax)] = true;
  }
  return reduced;
}

Shape reduced_shape(const Shape& shape, const std::vector<bool>& reduced, bool keepdims) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (reduced[i]) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(shape[i]);
    }
  }
  if (out.empty()) out.push_back(1);
  return out;
}

// Maps each input linear index to its output linear index.
template <class Visit>
void for_each_reduce(const Shape& shape, const std::vector<bool>& reduced, Visit visit) {
  const std::size_t rank = shape.size();
  std::vector<std::size_t> out_stride(rank, 0);
  std::size_t acc = 1;
  for (std::size_t i = rank; i-- > 0;) {
    if (!reduced[i]) {
      out_stride[i] = acc;
      acc *= shape[i];
    }
  }
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = shape_numel(shape);
  std::size_t out_off = 0;
  for (std::size_t i = 0; i < total; ++i) {
    visit(i, out_off);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      out_off += out_stride[ax];
      if (idx[ax] < shape[ax]) break;
      out_off -= out_stride[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (tracing({&a})) {
    auto ia = a.impl(), io = out.impl();
    auto fn = [ia, io]() {
      ia->ensure_grad();
      const double g = io->grad[0];
      for (double& gv : ia->grad) gv += g;
    };
    Tensor a_copy = a;
    record_unary(a_copy, out, std::move(fn));
  }
  return out;
}

Tensor sum(const Tensor& a, std::span<const int> axes, bool keepdims) {
  const auto reduced = reduce_map(a.shape(), axes);
  Tensor out = Tensor::zeros(reduced_shape(a.shape(), reduced, keepdims));
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  for_each_reduce(a.shape(), reduced, [&](std::size_t i, std::size_t o) { po[o] += pa[i]; });
  if (tracing({&a})) {
    auto ia = a.impl(), io = out.impl();
    const Shape shape = a.shape();
    auto fn = [ia, io, shape, reduced]() {
      ia->ensure_grad();
      for_each_reduce(shape, reduced, [&](std::size_t i, std::size_t o) { ia->grad[i] += io->grad[o]; });
    };
    Tensor a_copy = a;
    record_unary(a_copy, out, std::move(fn));
  }
  return out;
}

Tensor mean(const Tensor& a) {
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, std::span<const int> axes, bool keepdims) {
  const auto reduced = reduce_map(a.shape(), axes);
  std::size_t count = 1;
  for (std::size_t i = 0; i < a.ndim(); ++i) {
    if (reduced[i]) count *= a.shape()[i];
  }
  return mul_scalar(sum(a, axes, keepdims), 1.0 / static_cast<double>(count));
}

namespace {

Tensor extremum(const Tensor& a, std::span<const int> axes, bool keepdims, bool is_max) {
  const auto reduced = reduce_map(a.shape(), axes);
  Tensor out = Tensor::full(reduced_shape(a.shape(), reduced, keepdims),
                            is_max ? -std::numeric_limits<double>::infinity()
                                   : std::numeric_limits<double>::infinity());
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  // First occurrence wins on ties (scan order), for deterministic backward.
  std::vector<std::size_t> arg(out.numel(), 0);
  for_each_reduce(a.shape(), reduced, [&](std::size_t i, std::size_t o) {
    const bool better = is_max ? pa[i] > po[o] : pa[i] < po[o];
    if (better) {
      po[o] = pa[i];
      arg[o] = i;
    }
  });
  if (tracing({&a})) {
    auto ia = a.impl(), io = out.impl();
    auto fn = [ia, io, arg]() {
      ia->ensure_grad();
      for (std::size_t o = 0; o < arg.size(); ++o) ia->grad[arg[o]] += io->grad[o];
    };
    Tensor a_copy = a;
    record_unary(a_copy, out, std::move(fn));
  }
  return out;
}

}  // namespace

Tensor reduce_max(const Tensor& a, std::span<const int> axes, bool keepdims) {
  return extremum(a, axes, keepdims, true);
}

Tensor reduce_min(const Tensor& a, std::span<const int> axes, bool keepdims) {
  return extremum(a, axes, keepdims, false);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  Tensor out = Tensor::from_data(std::move(shape),
                                 std::vector<double>(a.data().begin(), a.data().end()));
  if (tracing({&a})) {
    auto ia = a.impl(), io = out.impl();
    auto fn = [ia, io]() {
      ia->ensure_grad();
      for (std::size_t i = 0; i < io->grad.size(); ++i) ia->grad[i] += io->grad[i];
    };
    Tensor a_copy = a;
    record_unary(a_copy, out, std::move(fn));
  }
  return out;
}

namespace {

struct AxisSplit {
  std::size_t outer = 1, axis = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  if (axis < 0 || static_cast<std::size_t>(axis) >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i < static_cast<std::size_t>(axis)) s.outer *= shape[i];
    else if (i == static_cast<std::size_t>(axis)) s.axis = shape[i];
    else s.inner *= shape[i];
  }
  return s;
}

}  // namespace

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  const std::size_t ax = static_cast<std::size_t>(axis);
  if (axis < 0 || ax >= out_shape.size()) {
    throw ShapeError("concat axis out of range");
  }
  std::size_t axis_total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != out_shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < out_shape.size(); ++i) {
      if (i != ax && p.shape()[i] != out_shape[i]) {
        throw ShapeError("concat shape mismatch at axis " + std::to_string(i) + ": " +
                         shape_str(p.shape()) + " vs " + shape_str(out_shape));
      }
    }
    axis_total += p.shape()[ax];
  }
  out_shape[ax] = axis_total;
  Tensor out = Tensor::zeros(out_shape);
  const AxisSplit s = split_at(out_shape, axis);
  double* po = out.mutable_data().data();
  std::size_t axis_off = 0;
  for (const Tensor& p : parts) {
    const std::size_t pa = p.shape()[ax];
    const double* pp = p.data().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < pa; ++j) {
        const double* src = pp + (o * pa + j) * s.inner;
        double* dst = po + (o * s.axis + axis_off + j) * s.inner;
        std::copy(src, src + s.inner, dst);
      }
    }
    axis_off += pa;
  }

  bool any_grad = false;
  for (const Tensor& p : parts) any_grad |= p.requires_grad();
  if (g_active_tape && any_grad) {
    std::vector<ImplPtr> inputs;
    std::vector<std::size_t> part_axis;
    for (const Tensor& p : parts) {
      inputs.push_back(p.impl());
      part_axis.push_back(p.shape()[ax]);
    }
    auto io = out.impl();
    auto fn = [inputs, io, part_axis, s]() {
      std::size_t off = 0;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::size_t pa = part_axis[k];
        if (inputs[k]->requires_grad) {
          inputs[k]->ensure_grad();
          for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t j = 0; j < pa; ++j) {
              const double* src = io->grad.data() + (o * s.axis + off + j) * s.inner;
              double* dst = inputs[k]->grad.data() + (o * pa + j) * s.inner;
              for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
            }
          }
        }
        off += pa;
      }
    };
    record_many(std::move(inputs), out, std::move(fn));
  }
  return out;
}

std::vector<Tensor> split(const Tensor& a, int axis, std::span<const std::size_t> sizes) {
  const AxisSplit s = split_at(a.shape(), axis);
  std::size_t total = 0;
  for (std::size_t sz : sizes) total += sz;
  if (total != s.axis) {
    throw ShapeError("split sizes sum to " + std::to_string(total) + ", axis extent is " +
                     std::to_string(s.axis));
  }
  std::vector<Tensor> outs;
  const double* pa = a.data().data();
  std::size_t axis_off = 0;
  for (std::size_t sz : sizes) {
    Shape shape = a.shape();
    shape[static_cast<std::size_t>(axis)] = sz;
    Tensor part = Tensor::zeros(shape);
    double* pp = part.mutable_data().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t j = 0; j < sz; ++j) {
        const double* src = pa + (o * s.axis + axis_off + j) * s.inner;
        std::copy(src, src + s.inner, pp + (o * sz + j) * s.inner);
      }
    }
    if (tracing({&a})) {
      auto ia = a.impl(), io = part.impl();
      const std::size_t off = axis_off;
      auto fn = [ia, io, off, sz, s]() {
        ia->ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t j = 0; j < sz; ++j) {
            const double* src = io->grad.data() + (o * sz + j) * s.inner;
            double* dst = ia->grad.data() + (o * s.axis + off + j) * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
          }
        }
      };
      Tensor a_copy = a;
      record_unary(a_copy, part, std::move(fn));
    }
    axis_off += sz;
    outs.push_back(std::move(part));
  }
  return outs;
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& a, int axis) {
  const AxisSplit s = split_at(a.shape(), axis);
  Tensor out = Tensor::zeros(a.shape());
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.axis * s.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.axis; ++j) m = std::max(m, pa[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.axis; ++j) {
        const double e = std::exp(pa[base + j * s.inner] - m);
        po[base + j * s.inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::size_t j = 0; j < s.axis; ++j) po[base + j * s.inner] *= inv;
    }
  }
  if (tracing({&a})) {
    auto ia = a.impl(), io = out.impl();
    auto fn = [ia, io, s]() {
      ia->ensure_grad();
      const double* y = io->data.data();
      const double* g = io->grad.data();
      double* gx = ia->grad.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.axis * s.inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < s.axis; ++j) {
            const std::size_t k = base + j * s.inner;
            dot += g[k] * y[k];
          }
          for (std::size_t j = 0; j < s.axis; ++j) {
            const std::size_t k = base + j * s.inner;
            gx[k] += y[k] * (g[k] - dot);
          }
        }
      }
    };
    Tensor a_copy = a;
    record_unary(a_copy, out, std::move(fn));
  }
  return out;
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.ndim() < 3) throw ShapeError("instance_norm expects [N,C,...], got " + shape_str(x.shape()));
  const std::size_t n_batch = x.shape()[0];
  const std::size_t channels = x.shape()[1];
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw ShapeError("instance_norm gamma/beta must have one entry per channel");
  }
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < x.ndim(); ++i) spatial *= x.shape()[i];

  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data().data();
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  double* po = out.mutable_data().data();

  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(n_batch * channels);
  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * spatial;
      double mu = 0.0;
      for (std::size_t i = 0; i < spatial; ++i) mu += px[base + i];
      mu /= static_cast<double>(spatial);
      double var = 0.0;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double d = px[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(spatial);
      const double istd = 1.0 / std::sqrt(var + eps);
      inv_std[n * channels + c] = istd;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double h = (px[base + i] - mu) * istd;
        xhat[base + i] = h;
        po[base + i] = pg[c] * h + pb[c];
      }
    }
  }

  if (tracing({&x, &gamma, &beta})) {
    auto ix = x.impl(), ig = gamma.impl(), ib = beta.impl(), io = out.impl();
    auto fn = [ix, ig, ib, io, xhat = std::move(xhat), inv_std = std::move(inv_std),
               n_batch, channels, spatial]() {
      const double* g = io->grad.data();
      const bool need_x = ix->requires_grad;
      const bool need_g = ig->requires_grad;
      const bool need_b = ib->requires_grad;
      if (need_x) ix->ensure_grad();
      if (need_g) ig->ensure_grad();
      if (need_b) ib->ensure_grad();
      for (std::size_t n = 0; n < n_batch; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t base = (n * channels + c) * spatial;
          double sum_g = 0.0, sum_gh = 0.0;
          for (std::size_t i = 0; i < spatial; ++i) {
            sum_g += g[base + i];
            sum_gh += g[base + i] * xhat[base + i];
          }
          if (need_b) ib->grad[c] += sum_g;
          if (need_g) ig->grad[c] += sum_gh;
          if (need_x) {
            const double scale = ig->data[c] * inv_std[n * channels + c];
            const double mg = sum_g / static_cast<double>(spatial);
            const double mgh = sum_gh / static_cast<double>(spatial);
            for (std::size_t i = 0; i < spatial; ++i) {
              ix->grad[base + i] += scale * (g[base + i] - mg - xhat[base + i] * mgh);
            }
          }
        }
      }
    };
    record_many({x.impl(), gamma.impl(), beta.impl()}, out, std::move(fn));
  }
  return out;
}

Tensor minmax_normalize(const Tensor& x) {
  if (x.ndim() < 1) throw ShapeError("minmax_normalize needs at least rank 1");
  const std::size_t n_batch = x.shape()[0];
  const std::size_t rest = x.numel() / n_batch;
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  std::vector<std::size_t> amin(n_batch, 0), amax(n_batch, 0);
  std::vector<double> range(n_batch, 0.0);
  for (std::size_t n = 0; n < n_batch; ++n) {
    const std::size_t base = n * rest;
    std::size_t imin = 0, imax = 0;
    for (std::size_t i = 1; i < rest; ++i) {
      if (px[base + i] < px[base + imin]) imin = i;
      if (px[base + i] > px[base + imax]) imax = i;
    }
    const double mn = px[base + imin];
    const double r = px[base + imax] - mn;
    amin[n] = base + imin;
    amax[n] = base + imax;
    range[n] = r;
    if (r > 0.0) {
      const double inv = 1.0 / r;
      for (std::size_t i = 0; i < rest; ++i) po[base + i] = (px[base + i] - mn) * inv;
    }
    // Constant input: output stays all-zero.
  }
  if (tracing({&x})) {
    auto ia = x.impl(), io = out.impl();
    auto fn = [ia, io, amin, amax, range, n_batch, rest]() {
      ia->ensure_grad();
      const double* g = io->grad.data();
      const double* y = io->data.data();
      for (std::size_t n = 0; n < n_batch; ++n) {
        if (range[n] <= 0.0) continue;
        const std::size_t base = n * rest;
        const double inv = 1.0 / range[n];
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < rest; ++i) {
          s1 += g[base + i];
          s2 += g[base + i] * y[base + i];
        }
        for (std::size_t i = 0; i < rest; ++i) ia->grad[base + i] += g[base + i] * inv;
        ia->grad[amax[n]] -= s2 * inv;
        ia->grad[amin[n]] -= (s1 - s2) * inv;
      }
    };
    Tensor x_copy = x;
    record_unary(x_copy, out, std::move(fn));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  std::size_t n, c, d, h, w;        // input
  std::size_t k, kd, kh, kw;        // weight
  std::size_t od, oh, ow;           // output
  int stride, pd, ph, pw, dilation;
};

std::size_t conv_extent(std::size_t in, int pad, int dil, std::size_t k, int stride,
                        const char* axis) {
  const long long num = static_cast<long long>(in) + 2LL * pad -
                        static_cast<long long>(dil) * (static_cast<long long>(k) - 1) - 1;
  if (num < 0) {
    throw ShapeError(std::string("conv3d kernel does not fit padded input along ") + axis);
  }
  return static_cast<std::size_t>(num / stride) + 1;
}

ConvDims conv_dims(const Tensor& input, const Tensor& weight, int stride, int pd, int ph,
                   int pw, int dilation) {
  if (input.ndim() != 5) {
    throw ShapeError("conv3d input must be [N,C,D,H,W], got " + shape_str(input.shape()));
  }
  if (weight.ndim() != 5) {
    throw ShapeError("conv3d weight must be [K,C,kd,kh,kw], got " + shape_str(weight.shape()));
  }
  if (stride < 1 || dilation < 1) throw ShapeError("conv3d stride and dilation must be >= 1");
  if (pd < 0 || ph < 0 || pw < 0) throw ShapeError("conv3d padding must be >= 0");
  if (input.shape()[1] != weight.shape()[1]) {
    throw ShapeError("conv3d channel mismatch: input has " + std::to_string(input.shape()[1]) +
                     ", weight expects " + std::to_string(weight.shape()[1]));
  }
  ConvDims cd;
  cd.n = input.shape()[0];
  cd.c = input.shape()[1];
  cd.d = input.shape()[2];
  cd.h = input.shape()[3];
  cd.w = input.shape()[4];
  cd.k = weight.shape()[0];
  cd.kd = weight.shape()[2];
  cd.kh = weight.shape()[3];
  cd.kw = weight.shape()[4];
  cd.stride = stride;
  cd.pd = pd;
  cd.ph = ph;
  cd.pw = pw;
  cd.dilation = dilation;
  cd.od = conv_extent(cd.d, pd, dilation, cd.kd, stride, "D");
  cd.oh = conv_extent(cd.h, ph, dilation, cd.kh, stride, "H");
  cd.ow = conv_extent(cd.w, pw, dilation, cd.kw, stride, "W");
  return cd;
}

// Upper loop bound for a shifted window, clamped so a tap with no overlap
// yields an empty range instead of wrapping negative.
std::size_t window_hi(std::size_t bound, std::size_t extent, long long off) {
  return static_cast<std::size_t>(
      std::max(0LL, std::min<long long>(static_cast<long long>(bound),
                                        static_cast<long long>(extent) - off)));
}

// stride == 1 forward: row-wise shifted AXPY, vectorizable inner loop.
void conv_forward_s1(const ConvDims& cd, const double* in, const double* wt,
                     const double* bias, double* out) {
  const std::size_t in_ch = cd.d * cd.h * cd.w;
  const std::size_t out_ch = cd.od * cd.oh * cd.ow;
  const int dil = cd.dilation;
  for (std::size_t n = 0; n < cd.n; ++n) {
    for (std::size_t k = 0; k < cd.k; ++k) {
      double* out_base = out + (n * cd.k + k) * out_ch;
      const double b = bias ? bias[k] : 0.0;
      std::fill(out_base, out_base + out_ch, b);
      for (std::size_t c = 0; c < cd.c; ++c) {
        const double* in_base = in + (n * cd.c + c) * in_ch;
        const double* w_base = wt + ((k * cd.c + c) * cd.kd) * cd.kh * cd.kw;
        for (std::size_t kd = 0; kd < cd.kd; ++kd) {
          const long long zoff = static_cast<long long>(dil * kd) - cd.pd;
          const std::size_t z0 = static_cast<std::size_t>(std::max(0LL, -zoff));
          const std::size_t z1 = window_hi(cd.od, cd.d, zoff);
          for (std::size_t kh = 0; kh < cd.kh; ++kh) {
            const long long yoff = static_cast<long long>(dil * kh) - cd.ph;
            const std::size_t y0 = static_cast<std::size_t>(std::max(0LL, -yoff));
            const std::size_t y1 = window_hi(cd.oh, cd.h, yoff);
            const double* w_row = w_base + (kd * cd.kh + kh) * cd.kw;
            for (std::size_t zo = z0; zo < z1; ++zo) {
              const std::size_t zi = static_cast<std::size_t>(zo + zoff);
              for (std::size_t yo = y0; yo < y1; ++yo) {
                const std::size_t yi = static_cast<std::size_t>(yo + yoff);
                double* orow = out_base + (zo * cd.oh + yo) * cd.ow;
                const double* irow = in_base + (zi * cd.h + yi) * cd.w;
                for (std::size_t kw = 0; kw < cd.kw; ++kw) {
                  const double wv = w_row[kw];
                  if (wv == 0.0) continue;
                  const long long xoff = static_cast<long long>(dil * kw) - cd.pw;
                  const std::size_t x0 = static_cast<std::size_t>(std::max(0LL, -xoff));
                  const std::size_t x1 = window_hi(cd.ow, cd.w, xoff);
                  const double* ir = irow + xoff;
                  for (std::size_t x = x0; x < x1; ++x) orow[x] += wv * ir[x];
                }
              }
            }
          }
        }
      }
    }
  }
}

// General stride: direct gather, used by strided/test configurations.
void conv_forward_general(const ConvDims& cd, const double* in, const double* wt,
                          const double* bias, double* out) {
  for (std::size_t n = 0; n < cd.n; ++n) {
    for (std::size_t k = 0; k < cd.k; ++k) {
      for (std::size_t zo = 0; zo < cd.od; ++zo) {
        for (std::size_t yo = 0; yo < cd.oh; ++yo) {
          for (std::size_t xo = 0; xo < cd.ow; ++xo) {
            double acc = bias ? bias[k] : 0.0;
            for (std::size_t c = 0; c < cd.c; ++c) {
              for (std::size_t kd = 0; kd < cd.kd; ++kd) {
                const long long zi = static_cast<long long>(zo) * cd.stride - cd.pd +
                                     static_cast<long long>(cd.dilation) * kd;
                if (zi < 0 || zi >= static_cast<long long>(cd.d)) continue;
                for (std::size_t kh = 0; kh < cd.kh; ++kh) {
                  const long long yi = static_cast<long long>(yo) * cd.stride - cd.ph +
                                       static_cast<long long>(cd.dilation) * kh;
                  if (yi < 0 || yi >= static_cast<long long>(cd.h)) continue;
                  for (std::size_t kw = 0; kw < cd.kw; ++kw) {
                    const long long xi = static_cast<long long>(xo) * cd.stride - cd.pw +
                                         static_cast<long long>(cd.dilation) * kw;
                    if (xi < 0 || xi >= static_cast<long long>(cd.w)) continue;
                    acc += in[(((n * cd.c + c) * cd.d + zi) * cd.h + yi) * cd.w + xi] *
                           wt[(((k * cd.c + c) * cd.kd + kd) * cd.kh + kh) * cd.kw + kw];
                  }
                }
              }
            }
            out[(((n * cd.k + k) * cd.od + zo) * cd.oh + yo) * cd.ow + xo] = acc;
          }
        }
      }
    }
  }
}

void conv_backward_input_s1(const ConvDims& cd, const double* gout, const double* wt,
                            double* gin) {
  const std::size_t in_ch = cd.d * cd.h * cd.w;
  const std::size_t out_ch = cd.od * cd.oh * cd.ow;
  const int dil = cd.dilation;
  // d(in[zi,yi,xi]) = sum over kernel taps of w * gout at (zi+p-dil*k).
  for (std::size_t n = 0; n < cd.n; ++n) {
    for (std::size_t c = 0; c < cd.c; ++c) {
      double* gin_base = gin + (n * cd.c + c) * in_ch;
      for (std::size_t k = 0; k < cd.k; ++k) {
        const double* gout_base = gout + (n * cd.k + k) * out_ch;
        const double* w_base = wt + ((k * cd.c + c) * cd.kd) * cd.kh * cd.kw;
        for (std::size_t kd = 0; kd < cd.kd; ++kd) {
          const long long zoff = static_cast<long long>(cd.pd) - static_cast<long long>(dil * kd);
          const std::size_t z0 = static_cast<std::size_t>(std::max(0LL, -zoff));
          const std::size_t z1 = window_hi(cd.d, cd.od, zoff);
          for (std::size_t kh = 0; kh < cd.kh; ++kh) {
            const long long yoff = static_cast<long long>(cd.ph) - static_cast<long long>(dil * kh);
            const std::size_t y0 = static_cast<std::size_t>(std::max(0LL, -yoff));
            const std::size_t y1 = window_hi(cd.h, cd.oh, yoff);
            const double* w_row = w_base + (kd * cd.kh + kh) * cd.kw;
            for (std::size_t zi = z0; zi < z1; ++zi) {
              const std::size_t zo = static_cast<std::size_t>(zi + zoff);
              for (std::size_t yi = y0; yi < y1; ++yi) {
                const std::size_t yo = static_cast<std::size_t>(yi + yoff);
                double* grow = gin_base + (zi * cd.h + yi) * cd.w;
                const double* gorow = gout_base + (zo * cd.oh + yo) * cd.ow;
                for (std::size_t kw = 0; kw < cd.kw; ++kw) {
                  const double wv = w_row[kw];
                  if (wv == 0.0) continue;
                  const long long xoff = static_cast<long long>(cd.pw) -
                                         static_cast<long long>(dil * kw);
                  const std::size_t x0 = static_cast<std::size_t>(std::max(0LL, -xoff));
                  const std::size_t x1 = window_hi(cd.w, cd.ow, xoff);
                  const double* gr = gorow + xoff;
                  for (std::size_t x = x0; x < x1; ++x) grow[x] += wv * gr[x];
                }
              }
            }
          }
        }
      }
    }
  }
}

void conv_backward_weight_s1(const ConvDims& cd, const double* gout, const double* in,
                             double* gwt) {
  const std::size_t in_ch = cd.d * cd.h * cd.w;
  const std::size_t out_ch = cd.od * cd.oh * cd.ow;
  const int dil = cd.dilation;
  for (std::size_t k = 0; k < cd.k; ++k) {
    for (std::size_t c = 0; c < cd.c; ++c) {
      double* gw_base = gwt + ((k * cd.c + c) * cd.kd) * cd.kh * cd.kw;
      for (std::size_t kd = 0; kd < cd.kd; ++kd) {
        const long long zoff = static_cast<long long>(dil * kd) - cd.pd;
        const std::size_t z0 = static_cast<std::size_t>(std::max(0LL, -zoff));
        const std::size_t z1 = window_hi(cd.od, cd.d, zoff);
        for (std::size_t kh = 0; kh < cd.kh; ++kh) {
          const long long yoff = static_cast<long long>(dil * kh) - cd.ph;
          const std::size_t y0 = static_cast<std::size_t>(std::max(0LL, -yoff));
          const std::size_t y1 = window_hi(cd.oh, cd.h, yoff);
          double* gw_row = gw_base + (kd * cd.kh + kh) * cd.kw;
          for (std::size_t kw = 0; kw < cd.kw; ++kw) {
            const long long xoff = static_cast<long long>(dil * kw) - cd.pw;
            const std::size_t x0 = static_cast<std::size_t>(std::max(0LL, -xoff));
            const std::size_t x1 = window_hi(cd.ow, cd.w, xoff);
            double acc = 0.0;
            for (std::size_t n = 0; n < cd.n; ++n) {
              const double* gout_base = gout + (n * cd.k + k) * out_ch;
              const double* in_base = in + (n * cd.c + c) * in_ch;
              for (std::size_t zo = z0; zo < z1; ++zo) {
                const std::size_t zi = static_cast<std::size_t>(zo + zoff);
                for (std::size_t yo = y0; yo < y1; ++yo) {
                  const std::size_t yi = static_cast<std::size_t>(yo + yoff);
                  const double* gorow = gout_base + (zo * cd.oh + yo) * cd.ow;
                  const double* irow = in_base + (zi * cd.h + yi) * cd.w + xoff;
                  double dot = 0.0;
                  for (std::size_t x = x0; x < x1; ++x) dot += gorow[x] * irow[x];
                  acc += dot;
                }
              }
            }
            gw_row[kw] += acc;
          }
        }
      }
    }
  }
}

void conv_backward_general(const ConvDims& cd, const double* gout, const double* in,
                           const double* wt, double* gin, double* gwt) {
  for (std::size_t n = 0; n < cd.n; ++n) {
    for (std::size_t k = 0; k < cd.k; ++k) {
      for (std::size_t zo = 0; zo < cd.od; ++zo) {
        for (std::size_t yo = 0; yo < cd.oh; ++yo) {
          for (std::size_t xo = 0; xo < cd.ow; ++xo) {
            const double g = gout[(((n * cd.k + k) * cd.od + zo) * cd.oh + yo) * cd.ow + xo];
            if (g == 0.0) continue;
            for (std::size_t c = 0; c < cd.c; ++c) {
              for (std::size_t kd = 0; kd < cd.kd; ++kd) {
                const long long zi = static_cast<long long>(zo) * cd.stride - cd.pd +
                                     static_cast<long long>(cd.dilation) * kd;
                if (zi < 0 || zi >= static_cast<long long>(cd.d)) continue;
                for (std::size_t kh = 0; kh < cd.kh; ++kh) {
                  const long long yi = static_cast<long long>(yo) * cd.stride - cd.ph +
                                       static_cast<long long>(cd.dilation) * kh;
                  if (yi < 0 || yi >= static_cast<long long>(cd.h)) continue;
                  for (std::size_t kw = 0; kw < cd.kw; ++kw) {
                    const long long xi = static_cast<long long>(xo) * cd.stride - cd.pw +
                                         static_cast<long long>(cd.dilation) * kw;
                    if (xi < 0 || xi >= static_cast<long long>(cd.w)) continue;
                    const std::size_t ii = (((n * cd.c + c) * cd.d + zi) * cd.h + yi) * cd.w + xi;
                    const std::size_t wi = (((k * cd.c + c) * cd.kd + kd) * cd.kh + kh) * cd.kw + kw;
                    if (gin) gin[ii] += g * wt[wi];
                    if (gwt) gwt[wi] += g * in[ii];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int pad_d, int pad_h, int pad_w, int dilation) {
  const ConvDims cd = conv_dims(input, weight, stride, pad_d, pad_h, pad_w, dilation);
  if (bias.defined() && bias.numel() != cd.k) {
    throw ShapeError("conv3d bias must have one entry per output channel");
  }
  Tensor out = Tensor::zeros({cd.n, cd.k, cd.od, cd.oh, cd.ow});
  const double* pb = bias.defined() ? bias.data().data() : nullptr;
  if (stride == 1) {
    conv_forward_s1(cd, input.data().data(), weight.data().data(), pb,
                    out.mutable_data().data());
  } else {
    conv_forward_general(cd, input.data().data(), weight.data().data(), pb,
                         out.mutable_data().data());
  }

  const Tensor* maybe_bias = bias.defined() ? &bias : nullptr;
  const bool trace = bias.defined() ? tracing({&input, &weight, &bias})
                                    : tracing({&input, &weight});
  (void)maybe_bias;
  if (trace) {
    auto ii = input.impl(), iw = weight.impl(), io = out.impl();
    auto ib = bias.defined() ? bias.impl() : nullptr;
    auto fn = [ii, iw, ib, io, cd]() {
      const double* g = io->grad.data();
      if (ib && ib->requires_grad) {
        ib->ensure_grad();
        const std::size_t out_ch = cd.od * cd.oh * cd.ow;
        for (std::size_t k = 0; k < cd.k; ++k) {
          double acc = 0.0;
          for (std::size_t n = 0; n < cd.n; ++n) {
            const double* base = g + (n * cd.k + k) * out_ch;
            for (std::size_t i = 0; i < out_ch; ++i) acc += base[i];
          }
          ib->grad[k] += acc;
        }
      }
      const bool need_in = ii->requires_grad;
      const bool need_wt = iw->requires_grad;
      if (need_in) ii->ensure_grad();
      if (need_wt) iw->ensure_grad();
      if (cd.stride == 1) {
        if (need_in) conv_backward_input_s1(cd, g, iw->data.data(), ii->grad.data());
        if (need_wt) conv_backward_weight_s1(cd, g, ii->data.data(), iw->grad.data());
      } else {
        conv_backward_general(cd, g, ii->data.data(), iw->data.data(),
                              need_in ? ii->grad.data() : nullptr,
                              need_wt ? iw->grad.data() : nullptr);
      }
    };
    std::vector<ImplPtr> inputs{input.impl(), weight.impl()};
    if (bias.defined()) inputs.push_back(bias.impl());
    record_many(std::move(inputs), out, std::move(fn));
  }
  return out;
}

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding, int dilation) {
  return conv3d(input, weight, bias, stride, padding, padding, padding, dilation);
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

namespace {

struct PoolDims {
  std::size_t n, c, d, h, w, od, oh, ow;
  int kernel, stride;
};

PoolDims pool_dims(const Tensor& input, int kernel, int stride, const char* op) {
  if (input.ndim() != 5) {
    throw ShapeError(std::string(op) + " input must be [N,C,D,H,W], got " + shape_str(input.shape()));
  }
  if (kernel < 1 || stride < 1) throw ShapeError(std::string(op) + " kernel and stride must be >= 1");
  PoolDims pd;
  pd.n = input.shape()[0];
  pd.c = input.shape()[1];
  pd.d = input.shape()[2];
  pd.h = input.shape()[3];
  pd.w = input.shape()[4];
  if (pd.d < static_cast<std::size_t>(kernel) || pd.h < static_cast<std::size_t>(kernel) ||
      pd.w < static_cast<std::size_t>(kernel)) {
    throw ShapeError(std::string(op) + " kernel larger than input extents");
  }
  pd.od = (pd.d - kernel) / stride + 1;
  pd.oh = (pd.h - kernel) / stride + 1;
  pd.ow = (pd.w - kernel) / stride + 1;
  pd.kernel = kernel;
  pd.stride = stride;
  return pd;
}

}  // namespace

Tensor max_pool3d(const Tensor& input, int kernel, int stride) {
  const PoolDims pd = pool_dims(input, kernel, stride, "max_pool3d");
  Tensor out = Tensor::zeros({pd.n, pd.c, pd.od, pd.oh, pd.ow});
  const double* pi = input.data().data();
  double* po = out.mutable_data().data();
  std::vector<std::size_t> arg(out.numel());
  std::size_t o = 0;
  for (std::size_t n = 0; n < pd.n; ++n) {
    for (std::size_t c = 0; c < pd.c; ++c) {
      const std::size_t base = (n * pd.c + c) * pd.d * pd.h * pd.w;
      for (std::size_t zo = 0; zo < pd.od; ++zo) {
        for (std::size_t yo = 0; yo < pd.oh; ++yo) {
          for (std::size_t xo = 0; xo < pd.ow; ++xo, ++o) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_i = 0;
            for (int dz = 0; dz < pd.kernel; ++dz) {
              for (int dy = 0; dy < pd.kernel; ++dy) {
                for (int dx = 0; dx < pd.kernel; ++dx) {
                  const std::size_t zi = zo * pd.stride + dz;
                  const std::size_t yi = yo * pd.stride + dy;
                  const std::size_t xi = xo * pd.stride + dx;
                  const std::size_t ii = base + (zi * pd.h + yi) * pd.w + xi;
                  if (pi[ii] > best) {
                    best = pi[ii];
                    best_i = ii;
                  }
                }
              }
            }
            po[o] = best;
            arg[o] = best_i;
          }
        }
      }
    }
  }
  if (tracing({&input})) {
    auto ii = input.impl(), io = out.impl();
    auto fn = [ii, io, arg = std::move(arg)]() {
      ii->ensure_grad();
      for (std::size_t i = 0; i < arg.size(); ++i) ii->grad[arg[i]] += io->grad[i];
    };
    Tensor in_copy = input;
    record_unary(in_copy, out, std::move(fn));
  }
  return out;
}

Tensor avg_pool3d(const Tensor& input, int kernel, int stride) {
  const PoolDims pd = pool_dims(input, kernel, stride, "avg_pool3d");
  Tensor out = Tensor::zeros({pd.n, pd.c, pd.od, pd.oh, pd.ow});
  const double* pi = input.data().data();
  double* po = out.mutable_data().data();
  const double inv = 1.0 / (static_cast<double>(pd.kernel) * pd.kernel * pd.kernel);
  std::size_t o = 0;
  for (std::size_t n = 0; n < pd.n; ++n) {
    for (std::size_t c = 0; c < pd.c; ++c) {
      const std::size_t base = (n * pd.c + c) * pd.d * pd.h * pd.w;
      for (std::size_t zo = 0; zo < pd.od; ++zo) {
        for (std::size_t yo = 0; yo < pd.oh; ++yo) {
          for (std::size_t xo = 0; xo < pd.ow; ++xo, ++o) {
            double acc = 0.0;
            for (int dz = 0; dz < pd.kernel; ++dz) {
              for (int dy = 0; dy < pd.kernel; ++dy) {
                for (int dx = 0; dx < pd.kernel; ++dx) {
                  const std::size_t zi = zo * pd.stride + dz;
                  const std::size_t yi = yo * pd.stride + dy;
                  const std::size_t xi = xo * pd.stride + dx;
                  acc += pi[base + (zi * pd.h + yi) * pd.w + xi];
                }
              }
            }
            po[o] = acc * inv;
          }
        }
      }
    }
  }
  if (tracing({&input})) {
    auto ii = input.impl(), io = out.impl();
    auto fn = [ii, io, pd, inv]() {
      ii->ensure_grad();
      const double* g = io->grad.data();
      std::size_t o = 0;
      for (std::size_t n = 0; n < pd.n; ++n) {
        for (std::size_t c = 0; c < pd.c; ++c) {
          const std::size_t base = (n * pd.c + c) * pd.d * pd.h * pd.w;
          for (std::size_t zo = 0; zo < pd.od; ++zo) {
            for (std::size_t yo = 0; yo < pd.oh; ++yo) {
              for (std::size_t xo = 0; xo < pd.ow; ++xo, ++o) {
                const double gv = g[o] * inv;
                for (int dz = 0; dz < pd.kernel; ++dz) {
                  for (int dy = 0; dy < pd.kernel; ++dy) {
                    for (int dx = 0; dx < pd.kernel; ++dx) {
                      const std::size_t zi = zo * pd.stride + dz;
                      const std::size_t yi = yo * pd.stride + dy;
                      const std::size_t xi = xo * pd.stride + dx;
                      ii->grad[base + (zi * pd.h + yi) * pd.w + xi] += gv;
                    }
                  }
                }
              }
            }
          }
        }
      }
    };
    Tensor in_copy = input;
    record_unary(in_copy, out, std::move(fn));
  }
  return out;
}

Tensor upsample3d_nearest(const Tensor& input, int factor) {
  if (input.ndim() != 5) throw ShapeError("upsample3d_nearest input must be [N,C,D,H,W]");
  if (factor < 1) throw ShapeError("upsample factor must be >= 1");
  const std::size_t n = input.shape()[0], c = input.shape()[1];
  const std::size_t d = input.shape()[2], h = input.shape()[3], w = input.shape()[4];
  const std::size_t f = static_cast<std::size_t>(factor);
  Tensor out = Tensor::zeros({n, c, d * f, h * f, w * f});
  const double* pi = input.data().data();
  double* po = out.mutable_data().data();
  const std::size_t oh = h * f, ow = w * f;
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const std::size_t base = nc * d * h * w;
    for (std::size_t zo = 0; zo < d * f; ++zo) {
      for (std::size_t yo = 0; yo < oh; ++yo) {
        const std::size_t zi = zo / f, yi = yo / f;
        const double* irow = pi + base + (zi * h + yi) * w;
        for (std::size_t xo = 0; xo < ow; ++xo, ++o) po[o] = irow[xo / f];
      }
    }
  }
  if (tracing({&input})) {
    auto ii = input.impl(), io = out.impl();
    auto fn = [ii, io, n, c, d, h, w, f]() {
      ii->ensure_grad();
      const double* g = io->grad.data();
      const std::size_t oh = h * f, ow = w * f;
      std::size_t o = 0;
      for (std::size_t nc = 0; nc < n * c; ++nc) {
        const std::size_t base = nc * d * h * w;
        for (std::size_t zo = 0; zo < d * f; ++zo) {
          for (std::size_t yo = 0; yo < oh; ++yo) {
            const std::size_t zi = zo / f, yi = yo / f;
            double* grow = ii->grad.data() + base + (zi * h + yi) * w;
            for (std::size_t xo = 0; xo < ow; ++xo, ++o) grow[xo / f] += g[o];
          }
        }
      }
    };
    Tensor in_copy = input;
    record_unary(in_copy, out, std::move(fn));
  }
  return out;
}

namespace {

// Source coordinate for half-pixel-aligned resampling; border replicated.
struct LinearTap {
  std::size_t lo, hi;
  double w_hi;  // weight of hi; lo gets 1 - w_hi
};

std::vector<LinearTap> linear_taps(std::size_t out_extent, std::size_t in_extent, int factor) {
  std::vector<LinearTap> taps(out_extent);
  for (std::size_t o = 0; o < out_extent; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    double lo_f = std::floor(src);
    double frac = src - lo_f;
    long long lo = static_cast<long long>(lo_f);
    long long hi = lo + 1;
    if (lo < 0) {
      lo = 0;
      hi = 0;
      frac = 0.0;
    }
    if (hi >= static_cast<long long>(in_extent)) {
      hi = static_cast<long long>(in_extent) - 1;
      if (lo > hi) lo = hi;
      if (lo == hi) frac = 0.0;
    }
    taps[o] = {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi), frac};
  }
  return taps;
}

}  // namespace

Tensor upsample3d_trilinear(const Tensor& input, int factor) {
  if (input.ndim() != 5) throw ShapeError("upsample3d_trilinear input must be [N,C,D,H,W]");
  if (factor < 1) throw ShapeError("upsample factor must be >= 1");
  const std::size_t n = input.shape()[0], c = input.shape()[1];
  const std::size_t d = input.shape()[2], h = input.shape()[3], w = input.shape()[4];
  const std::size_t f = static_cast<std::size_t>(factor);
  const std::size_t od = d * f, oh = h * f, ow = w * f;
  Tensor out = Tensor::zeros({n, c, od, oh, ow});
  const auto tz = linear_taps(od, d, factor);
  const auto ty = linear_taps(oh, h, factor);
  const auto tx = linear_taps(ow, w, factor);
  const double* pi = input.data().data();
  double* po = out.mutable_data().data();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const std::size_t base = nc * d * h * w;
    for (std::size_t zo = 0; zo < od; ++zo) {
      const LinearTap& az = tz[zo];
      for (std::size_t yo = 0; yo < oh; ++yo) {
        const LinearTap& ay = ty[yo];
        const double* r00 = pi + base + (az.lo * h + ay.lo) * w;
        const double* r01 = pi + base + (az.lo * h + ay.hi) * w;
        const double* r10 = pi + base + (az.hi * h + ay.lo) * w;
        const double* r11 = pi + base + (az.hi * h + ay.hi) * w;
        const double wz1 = az.w_hi, wz0 = 1.0 - wz1;
        const double wy1 = ay.w_hi, wy0 = 1.0 - wy1;
        for (std::size_t xo = 0; xo < ow; ++xo, ++o) {
          const LinearTap& axp = tx[xo];
          const double wx1 = axp.w_hi, wx0 = 1.0 - wx1;
          const double v00 = r00[axp.lo] * wx0 + r00[axp.hi] * wx1;
          const double v01 = r01[axp.lo] * wx0 + r01[axp.hi] * wx1;
          const double v10 = r10[axp.lo] * wx0 + r10[axp.hi] * wx1;
          const double v11 = r11[axp.lo] * wx0 + r11[axp.hi] * wx1;
          po[o] = wz0 * (wy0 * v00 + wy1 * v01) + wz1 * (wy0 * v10 + wy1 * v11);
        }
      }
    }
  }
  if (tracing({&input})) {
    auto ii = input.impl(), io = out.impl();
    auto fn = [ii, io, tz, ty, tx, n, c, d, h, w, od, oh, ow]() {
      ii->ensure_grad();
      const double* g = io->grad.data();
      std::size_t o = 0;
      for (std::size_t nc = 0; nc < n * c; ++nc) {
        const std::size_t base = nc * d * h * w;
        for (std::size_t zo = 0; zo < od; ++zo) {
          const LinearTap& az = tz[zo];
          const double wz1 = az.w_hi, wz0 = 1.0 - wz1;
          for (std::size_t yo = 0; yo < oh; ++yo) {
            const LinearTap& ay = ty[yo];
            const double wy1 = ay.w_hi, wy0 = 1.0 - wy1;
            double* r00 = ii->grad.data() + base + (az.lo * h + ay.lo) * w;
            double* r01 = ii->grad.data() + base + (az.lo * h + ay.hi) * w;
            double* r10 = ii->grad.data() + base + (az.hi * h + ay.lo) * w;
            double* r11 = ii->grad.data() + base + (az.hi * h + ay.hi) * w;
            for (std::size_t xo = 0; xo < ow; ++xo, ++o) {
              const LinearTap& axp = tx[xo];
              const double wx1 = axp.w_hi, wx0 = 1.0 - wx1;
              const double gv = g[o];
              r00[axp.lo] += gv * wz0 * wy0 * wx0;
              r00[axp.hi] += gv * wz0 * wy0 * wx1;
              r01[axp.lo] += gv * wz0 * wy1 * wx0;
              r01[axp.hi] += gv * wz0 * wy1 * wx1;
              r10[axp.lo] += gv * wz1 * wy0 * wx0;
              r10[axp.hi] += gv * wz1 * wy0 * wx1;
              r11[axp.lo] += gv * wz1 * wy1 * wx0;
              r11[axp.hi] += gv * wz1 * wy1 * wx1;
            }
          }
        }
      }
    };
    Tensor in_copy = input;
    record_unary(in_copy, out, std::move(fn));
  }
  return out;
}

}  // namespace contourseg
