#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "attex/errors.hpp"
#include "attex/rng.hpp"

// Dense row-major tensors with reverse-mode differentiation recorded on an
// explicit tape. Scalar type S is float for training and double for
// finite-difference gradient checks. Broadcasting is limited to
// scalar-times-tensor (scale) and row-vector bias (bias_add); every other op
// requires exact shapes, which keeps the backward rules short and auditable.

namespace attex {

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

namespace detail {

template <typename S>
struct TensorData {
  std::vector<int> shape;
  std::vector<S> values;
  std::vector<S> grad;  // same length as values when requires_grad
  bool requires_grad = false;
};

inline int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

}  // namespace detail

template <typename S>
class Tensor;

// Ordered record of differentiable operations. Nodes are appended in program
// order, which is a topological order by construction; backward replays them
// once, in reverse. A tape is consumed by backward() and cannot be reused.
template <typename S>
class Tape {
 public:
  using Node = std::function<void()>;

  void record(Node fn) {
    if (consumed_) throw ContractError("tape already consumed; create a new tape");
    nodes_.push_back(std::move(fn));
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void replay_reverse_and_consume() {
    if (consumed_) throw ContractError("tape already consumed");
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
    consumed_ = true;
  }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

template <typename S>
inline thread_local Tape<S>* g_active_tape = nullptr;

// RAII activation of a tape on the current thread. Ops record themselves only
// while a tape is active and some input requires gradients.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape) : prev_(g_active_tape<S>) { g_active_tape<S> = &tape; }
  ~TapeScope() { g_active_tape<S> = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

template <typename S>
class Tensor {
 public:
  Tensor() : d_(std::make_shared<detail::TensorData<S>>()) {
    d_->shape = {0};
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->values.assign(static_cast<size_t>(detail::shape_numel(t.d_->shape)), S(0));
    if (requires_grad) t.enable_grad();
    return t;
  }

  static Tensor full(std::vector<int> shape, S value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.d_->values) v = value;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<S> values) {
    Tensor t;
    const int64_t n = detail::shape_numel(shape);
    if (n != static_cast<int64_t>(values.size()))
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    return t;
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  static Tensor uniform(std::vector<int> shape, S lo, S hi, Rng& rng, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.d_->values) v = rng.uniform<S>(lo, hi);
    if (requires_grad) t.enable_grad();
    return t;
  }

  const std::vector<int>& shape() const { return d_->shape; }
  int64_t size() const { return static_cast<int64_t>(d_->values.size()); }
  int extent(int axis) const { return d_->shape.at(static_cast<size_t>(axis)); }
  int rank() const { return static_cast<int>(d_->shape.size()); }

  std::vector<S>& values() { return d_->values; }
  const std::vector<S>& values() const { return d_->values; }
  S* data() { return d_->values.data(); }
  const S* data() const { return d_->values.data(); }

  bool requires_grad() const { return d_->requires_grad; }
  void enable_grad() {
    d_->requires_grad = true;
    d_->grad.assign(d_->values.size(), S(0));
  }
  void disable_grad() {
    d_->requires_grad = false;
    d_->grad.clear();
  }
  std::vector<S>& grad() {
    if (!d_->requires_grad) throw ContractError("tensor has no gradient buffer");
    return d_->grad;
  }
  const std::vector<S>& grad() const {
    if (!d_->requires_grad) throw ContractError("tensor has no gradient buffer");
    return d_->grad;
  }
  void zero_grad() {
    if (d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
  }

  S item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(d_->shape));
    return d_->values[0];
  }
  S at(int i) const { return d_->values.at(static_cast<size_t>(i)); }
  S at(int i, int j) const {
    if (rank() != 2) throw ShapeError("at(i,j) on tensor " + shape_str(d_->shape));
    return d_->values[static_cast<size_t>(i) * d_->shape[1] + j];
  }

  // Detached deep copy; never on tape.
  Tensor detach_copy() const {
    Tensor t;
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    return t;
  }

  std::shared_ptr<detail::TensorData<S>> ptr() const { return d_; }
  bool same_data(const Tensor& other) const { return d_ == other.d_; }

 private:
  std::shared_ptr<detail::TensorData<S>> d_;
};

namespace detail {

template <typename S>
inline bool should_record(std::initializer_list<const Tensor<S>*> ins) {
  if (g_active_tape<S> == nullptr) return false;
  for (const Tensor<S>* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

template <typename S>
inline Tensor<S> make_output(std::vector<int> shape, bool rec) {
  Tensor<S> out = Tensor<S>::zeros(std::move(shape));
  if (rec) out.enable_grad();
  return out;
}

// Interprets a rank-1 or rank-2 tensor as a matrix for matmul. Rank-1 tensors
// act as 1xK on the left and Kx1 on the right; the singleton axis is dropped
// from the result shape.
struct MatView {
  int rows;
  int cols;
  bool vec;  // rank-1 operand
};

inline MatView mat_view(const std::vector<int>& shape, bool lhs, const std::vector<int>& other) {
  if (shape.size() == 2) return {shape[0], shape[1], false};
  if (shape.size() == 1) {
    if (lhs) return {1, shape[0], true};
    return {shape[0], 1, true};
  }
  throw ShapeError("matmul operand must be rank 1 or 2, got " + shape_str(shape) +
                   " against " + shape_str(other));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename S>
inline void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "add");
  const bool rec = detail::should_record<S>({&a, &b});
  Tensor<S> out = detail::make_output<S>(a.shape(), rec);
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (rec) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    g_active_tape<S>->record([ad, bd, od] {
      const size_t n = od->values.size();
      if (ad->requires_grad)
        for (size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i];
      if (bd->requires_grad)
        for (size_t i = 0; i < n; ++i) bd->grad[i] += od->grad[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "sub");
  const bool rec = detail::should_record<S>({&a, &b});
  Tensor<S> out = detail::make_output<S>(a.shape(), rec);
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (rec) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    g_active_tape<S>->record([ad, bd, od] {
      const size_t n = od->values.size();
      if (ad->requires_grad)
        for (size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i];
      if (bd->requires_grad)
        for (size_t i = 0; i < n; ++i) bd->grad[i] -= od->grad[i];
    });
  }
  return out;
}

// Hadamard product. Aliased inputs are fine: both accumulations land on the
// same buffer, which is exactly d(x*x) = 2x.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape(a, b, "mul");
  const bool rec = detail::should_record<S>({&a, &b});
  Tensor<S> out = detail::make_output<S>(a.shape(), rec);
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (rec) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    g_active_tape<S>->record([ad, bd, od] {
      const size_t n = od->values.size();
      if (ad->requires_grad)
        for (size_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i] * bd->values[i];
      if (bd->requires_grad)
        for (size_t i = 0; i < n; ++i) bd->grad[i] += od->grad[i] * ad->values[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  const bool rec = detail::should_record<S>({&a});
  Tensor<S> out = detail::make_output<S>(a.shape(), rec);
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * factor;
  if (rec) {
    auto ad = a.ptr();
    auto od = out.ptr();
    g_active_tape<S>->record([ad, od, factor] {
      for (size_t i = 0; i < od->values.size(); ++i) ad->grad[i] += od->grad[i] * factor;
    });
  }
  return out;
}

// Adds row vector v to every row of matrix m.
template <typename S>
Tensor<S> bias_add(const Tensor<S>& m, const Tensor<S>& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.extent(1) != v.extent(0))
    throw ShapeError("bias_add: incompatible " + shape_str(m.shape()) + " and " +
                     shape_str(v.shape()));
  const int rows = m.extent(0), cols = m.extent(1);
  const bool rec = detail::should_record<S>({&m, &v});
  Tensor<S> out = detail::make_output<S>(m.shape(), rec);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out.data()[r * cols + c] = m.data()[r * cols + c] + v.data()[c];
  if (rec) {
    auto md = m.ptr(), vd = v.ptr(), od = out.ptr();
    g_active_tape<S>->record([md, vd, od, rows, cols] {
      if (md->requires_grad)
        for (int i = 0; i < rows * cols; ++i) md->grad[i] += od->grad[i];
      if (vd->requires_grad)
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) vd->grad[c] += od->grad[r * cols + c];
    });
  }
  return out;
}

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary_op(const Tensor<S>& a, Fwd fwd, Bwd bwd_from_out) {
  const bool rec = detail::should_record<S>({&a});
  Tensor<S> out = detail::make_output<S>(a.shape(), rec);
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i]);
  if (rec) {
    auto ad = a.ptr();
    auto od = out.ptr();
    g_active_tape<S>->record([ad, od, bwd_from_out] {
      for (size_t i = 0; i < od->values.size(); ++i)
        ad->grad[i] += od->grad[i] * bwd_from_out(ad->values[i], od->values[i]);
    });
  }
  return out;
}

template <typename S>
Tensor<S> tanh_t(const Tensor<S>& a) {
  return unary_op(
      a, [](S x) { return std::tanh(x); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Tensor<S> sigmoid_t(const Tensor<S>& a) {
  return unary_op(
      a, [](S x) { return S(1) / (S(1) + std::exp(-x)); }, [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> relu_t(const Tensor<S>& a) {
  return unary_op(
      a, [](S x) { return x > S(0) ? x : S(0); }, [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

// |x| with subgradient 0 at x == 0.
template <typename S>
Tensor<S> abs_t(const Tensor<S>& a) {
  return unary_op(
      a, [](S x) { return std::abs(x); },
      [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const detail::MatView va = detail::mat_view(a.shape(), true, b.shape());
  const detail::MatView vb = detail::mat_view(b.shape(), false, a.shape());
  if (va.cols != vb.rows)
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int m = va.rows, k = va.cols, n = vb.cols;

  std::vector<int> out_shape;
  if (va.vec && vb.vec) out_shape = {1};
  else if (va.vec) out_shape = {n};
  else if (vb.vec) out_shape = {m};
  else out_shape = {m, n};

  const bool rec = detail::should_record<S>({&a, &b});
  Tensor<S> out = detail::make_output<S>(out_shape, rec);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const S av = pa[i * k + kk];
      if (av == S(0)) continue;
      const S* prow = pb + kk * n;
      S* porow = po + i * n;
      for (int j = 0; j < n; ++j) porow[j] += av * prow[j];
    }
  }
  if (rec) {
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    g_active_tape<S>->record([ad, bd, od, m, k, n] {
      // dA = dOut * B^T, dB = A^T * dOut
      if (ad->requires_grad) {
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            S acc = S(0);
            for (int j = 0; j < n; ++j) acc += od->grad[i * n + j] * bd->values[kk * n + j];
            ad->grad[i * k + kk] += acc;
          }
      }
      if (bd->requires_grad) {
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const S av = ad->values[i * k + kk];
            if (av == S(0)) continue;
            for (int j = 0; j < n; ++j) bd->grad[kk * n + j] += av * od->grad[i * n + j];
          }
      }
    });
  }
  return out;
}

// Softmax over all entries (callers pass vectors). Inputs must be finite.
template <typename S>
Tensor<S> softmax(const Tensor<S>& v) {
  const int64_t n = v.size();
  if (n < 1) throw ShapeError("softmax: empty input");
  S mx = v.data()[0];
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(v.data()[i])))
      throw NumericError("softmax: non-finite input at index " + std::to_string(i));
    mx = std::max(mx, v.data()[i]);
  }
  const bool rec = detail::should_record<S>({&v});
  Tensor<S> out = detail::make_output<S>(v.shape(), rec);
  S sum = S(0);
  for (int64_t i = 0; i < n; ++i) {
    out.data()[i] = std::exp(v.data()[i] - mx);
    sum += out.data()[i];
  }
  for (int64_t i = 0; i < n; ++i) out.data()[i] /= sum;
  if (rec) {
    auto vd = v.ptr();
    auto od = out.ptr();
    g_active_tape<S>->record([vd, od] {
      const size_t n = od->values.size();
      S dot = S(0);
      for (size_t i = 0; i < n; ++i) dot += od->grad[i] * od->values[i];
      for (size_t i = 0; i < n; ++i) vd->grad[i] += od->values[i] * (od->grad[i] - dot);
    });
  }
  return out;
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& v) {
  const int64_t n = v.size();
  if (n < 1) throw ShapeError("log_softmax: empty input");
  S mx = v.data()[0];
  for (int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(v.data()[i])))
      throw NumericError("log_softmax: non-finite input at index " + std::to_string(i));
    mx = std::max(mx, v.data()[i]);
  }
  const bool rec = detail::should_record<S>({&v});
  Tensor<S> out = detail::make_output<S>(v.shape(), rec);
  S sum = S(0);
  for (int64_t i = 0; i < n; ++i) sum += std::exp(v.data()[i] - mx);
  const S lse = mx + std::log(sum);
  for (int64_t i = 0; i < n; ++i) out.data()[i] = v.data()[i] - lse;
  if (rec) {
    auto vd = v.ptr();
    auto od = out.ptr();
    g_active_tape<S>->record([vd, od] {
      const size_t n = od->values.size();
      S gsum = S(0);
      for (size_t i = 0; i < n; ++i) gsum += od->grad[i];
      for (size_t i = 0; i < n; ++i)
        vd->grad[i] += od->grad[i] - std::exp(od->values[i]) * gsum;
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  const bool rec = detail::should_record<S>({&a});
  Tensor<S> out = detail::make_output<S>({1}, rec);
  S acc = S(0);
  for (int64_t i = 0; i < a.size(); ++i) acc += a.data()[i];
  out.data()[0] = acc;
  if (rec) {
    auto ad = a.ptr();
    auto od = out.ptr();
    g_active_tape<S>->record([ad, od] {
      const S g = od->grad[0];
      for (size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> pick(const Tensor<S>& a, int index) {
  if (index < 0 || index >= a.size())
    throw ContractError("pick: index " + std::to_string(index) + " out of range for " +
                        shape_str(a.shape()));
  const bool rec = detail::should_record<S>({&a});
  Tensor<S> out = detail::make_output<S>({1}, rec);
  out.data()[0] = a.data()[index];
  if (rec) {
    auto ad = a.ptr();
    auto od = out.ptr();
    g_active_tape<S>->record([ad, od, index] { ad->grad[index] += od->grad[0]; });
  }
  return out;
}

// Contiguous slice of the flattened buffer; result is rank 1.
template <typename S>
Tensor<S> slice(const Tensor<S>& a, int offset, int length) {
  if (offset < 0 || length <= 0 || offset + length > a.size())
    throw ShapeError("slice: [" + std::to_string(offset) + "," +
                     std::to_string(offset + length) + ") out of range for " +
                     shape_str(a.shape()));
  const bool rec = detail::should_record<S>({&a});
  Tensor<S> out = detail::make_output<S>({length}, rec);
  for (int i = 0; i < length; ++i) out.data()[i] = a.data()[offset + i];
  if (rec) {
    auto ad = a.ptr();
    auto od = out.ptr();
    g_active_tape<S>->record([ad, od, offset, length] {
      for (int i = 0; i < length; ++i) ad->grad[offset + i] += od->grad[i];
    });
  }
  return out;
}

// Concatenation of flattened tensors into a rank-1 result.
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  int64_t total = 0;
  bool rec = false;
  for (const auto& p : parts) {
    total += p.size();
    rec = rec || p.requires_grad();
  }
  rec = rec && g_active_tape<S> != nullptr;
  Tensor<S> out = detail::make_output<S>({static_cast<int>(total)}, rec);
  int64_t off = 0;
  for (const auto& p : parts) {
    for (int64_t i = 0; i < p.size(); ++i) out.data()[off + i] = p.data()[i];
    off += p.size();
  }
  if (rec) {
    std::vector<std::shared_ptr<detail::TensorData<S>>> ptrs;
    for (const auto& p : parts) ptrs.push_back(p.ptr());
    auto od = out.ptr();
    g_active_tape<S>->record([ptrs, od] {
      size_t off = 0;
      for (const auto& pd : ptrs) {
        if (pd->requires_grad)
          for (size_t i = 0; i < pd->values.size(); ++i) pd->grad[i] += od->grad[off + i];
        off += pd->values.size();
      }
    });
  }
  return out;
}

// Copy with a new shape of equal element count; backward is a pass-through.
template <typename S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<int> new_shape) {
  if (detail::shape_numel(new_shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(new_shape));
  const bool rec = detail::should_record<S>({&a});
  Tensor<S> out = detail::make_output<S>(std::move(new_shape), rec);
  for (int64_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i];
  if (rec) {
    auto ad = a.ptr();
    auto od = out.ptr();
    g_active_tape<S>->record([ad, od] {
      for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

// Selects row `index` of a {N,E} table. Backward scatters into that row only,
// so embedding tables train sparsely.
template <typename S>
Tensor<S> embedding_row(const Tensor<S>& table, int index) {
  if (table.rank() != 2)
    throw ShapeError("embedding_row: table must be rank 2, got " + shape_str(table.shape()));
  const int n = table.extent(0), e = table.extent(1);
  if (index < 0 || index >= n)
    throw ContractError("embedding_row: index " + std::to_string(index) + " out of range [0," +
                        std::to_string(n) + ")");
  const bool rec = detail::should_record<S>({&table});
  Tensor<S> out = detail::make_output<S>({e}, rec);
  for (int i = 0; i < e; ++i) out.data()[i] = table.data()[index * e + i];
  if (rec) {
    auto td = table.ptr();
    auto od = out.ptr();
    g_active_tape<S>->record([td, od, index, e] {
      for (int i = 0; i < e; ++i) td->grad[index * e + i] += od->grad[i];
    });
  }
  return out;
}

// 2-D convolution over {Cin,H,W} with weights {Cout,Cin,kh,kw} and bias
// {Cout}. One tape node covers the whole op.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1)
    throw ShapeError("conv2d: expected x{C,H,W} w{Co,Ci,kh,kw} b{Co}, got " +
                     shape_str(x.shape()) + " " + shape_str(w.shape()) + " " +
                     shape_str(b.shape()));
  const int ci = x.extent(0), h = x.extent(1), wd = x.extent(2);
  const int co = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  if (w.extent(1) != ci || b.extent(0) != co)
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  const bool rec = detail::should_record<S>({&x, &w, &b});
  Tensor<S> out = detail::make_output<S>({co, ho, wo}, rec);
  const S* px = x.data();
  const S* pw = w.data();
  S* po = out.data();
  for (int oc = 0; oc < co; ++oc) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        S acc = b.data()[oc];
        for (int ic = 0; ic < ci; ++ic) {
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += px[(ic * h + iy) * wd + ix] * pw[((oc * ci + ic) * kh + ky) * kw + kx];
            }
          }
        }
        po[(oc * ho + oy) * wo + ox] = acc;
      }
    }
  }
  if (rec) {
    auto xd = x.ptr(), wdp = w.ptr(), bd = b.ptr(), od = out.ptr();
    g_active_tape<S>->record([xd, wdp, bd, od, ci, h, wd, co, kh, kw, ho, wo, stride, pad] {
      for (int oc = 0; oc < co; ++oc) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const S g = od->grad[(oc * ho + oy) * wo + ox];
            if (g == S(0)) continue;
            if (bd->requires_grad) bd->grad[oc] += g;
            for (int ic = 0; ic < ci; ++ic) {
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= wd) continue;
                  const int xi = (ic * h + iy) * wd + ix;
                  const int wi = ((oc * ci + ic) * kh + ky) * kw + kx;
                  if (wdp->requires_grad) wdp->grad[wi] += g * xd->values[xi];
                  if (xd->requires_grad) xd->grad[xi] += g * wdp->values[wi];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients
// accumulate with +=, so parameters used several times (shared attention
// weights) aggregate correctly. The tape is consumed.
template <typename S>
void backward(Tape<S>& tape, const Tensor<S>& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw ContractError("backward: loss is not on the tape (requires_grad is false)");
  const_cast<Tensor<S>&>(loss).grad()[0] += S(1);
  tape.replay_reverse_and_consume();
}

template <typename S>
void backward(const Tensor<S>& loss) {
  if (g_active_tape<S> == nullptr)
    throw ContractError("backward: no active tape on this thread");
  backward(*g_active_tape<S>, loss);
}

}  // namespace attex
