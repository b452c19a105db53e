#include "rawgat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <unordered_set>
#include <utility>

#include "op_support.hpp"

namespace rawgat {

using namespace opdetail;

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    require(d >= 0, ErrorKind::dimension,
            concat_msg("negative dimension in shape ", shape_str(s)));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

namespace detail {

namespace {
thread_local int g_no_grad_depth = 0;
}

bool grad_mode_enabled() { return g_no_grad_depth == 0; }

void push_no_grad() { ++g_no_grad_depth; }
void pop_no_grad() { --g_no_grad_depth; }

}  // namespace detail

NoGradGuard::NoGradGuard() { detail::push_no_grad(); }
NoGradGuard::~NoGradGuard() { detail::pop_no_grad(); }

// ---- TensorT members -------------------------------------------------------

template <class S>
TensorT<S> TensorT<S>::zeros(Shape shape, bool requires_grad) {
  auto n = new_node<S>(std::move(shape), "leaf");
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

template <class S>
TensorT<S> TensorT<S>::full(Shape shape, S value, bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

template <class S>
TensorT<S> TensorT<S>::from_data(Shape shape, std::vector<S> values,
                                 bool requires_grad) {
  const auto want = shape_numel(shape);
  require(static_cast<std::int64_t>(values.size()) == want,
          ErrorKind::dimension,
          concat_msg("from_data: ", values.size(), " values for shape ",
                     shape_str(shape)));
  auto n = std::make_shared<detail::NodeT<S>>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

template <class S>
TensorT<S> TensorT<S>::scalar(S value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

template <class S>
const Shape& TensorT<S>::shape() const {
  check_defined(*this, "shape");
  return node_->shape;
}

template <class S>
std::int64_t TensorT<S>::dim(int axis) const {
  const int a = norm_axis(axis, rank(), "dim");
  return shape()[a];
}

template <class S>
std::int64_t TensorT<S>::numel() const {
  check_defined(*this, "numel");
  return node_->numel();
}

template <class S>
bool TensorT<S>::requires_grad() const {
  check_defined(*this, "requires_grad");
  return node_->requires_grad;
}

template <class S>
void TensorT<S>::set_requires_grad(bool value) {
  check_defined(*this, "set_requires_grad");
  require(node_->parents.empty() && !node_->needs_grad, ErrorKind::contract,
          "set_requires_grad: only leaf tensors can be made trainable");
  node_->requires_grad = value;
}

template <class S>
bool TensorT<S>::needs_grad() const {
  check_defined(*this, "needs_grad");
  return node_->needs_grad || node_->requires_grad;
}

template <class S>
std::vector<S>& TensorT<S>::data() {
  check_defined(*this, "data");
  return node_->data;
}

template <class S>
const std::vector<S>& TensorT<S>::data() const {
  check_defined(*this, "data");
  return node_->data;
}

template <class S>
bool TensorT<S>::has_grad() const {
  return defined() && node_->grad.size() == node_->data.size();
}

template <class S>
std::vector<S>& TensorT<S>::grad() {
  check_defined(*this, "grad");
  require(has_grad(), ErrorKind::contract,
          "grad: no gradient present (did backward run?)");
  return node_->grad;
}

template <class S>
const std::vector<S>& TensorT<S>::grad() const {
  return const_cast<TensorT<S>*>(this)->grad();
}

template <class S>
void TensorT<S>::zero_grad() {
  check_defined(*this, "zero_grad");
  std::vector<S>().swap(node_->grad);
}

template <class S>
S TensorT<S>::item() const {
  check_defined(*this, "item");
  require(numel() == 1, ErrorKind::contract,
          concat_msg("item: tensor has shape ", shape_str(shape())));
  return node_->data[0];
}

// ---- backward driver -------------------------------------------------------

template <class S>
void backward(const TensorT<S>& loss, bool release_graph) {
  check_defined(loss, "backward");
  auto root = loss.node();
  require(root->numel() == 1, ErrorKind::contract,
          concat_msg("backward: loss must be a single element, got shape ",
                     shape_str(root->shape)));
  if (!tracked(root)) return;

  using Node = detail::NodeT<S>;
  using NodePtr = std::shared_ptr<Node>;
  // Post-order: producers before consumers. Entries are pinned so that
  // releasing a consumer's parent links cannot free a node that still has
  // its own backward closure to run.
  std::vector<NodePtr> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<NodePtr, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      const NodePtr& p = n->parents[next++];
      if ((p->requires_grad || p->needs_grad) && seen.insert(p.get()).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(std::move(n));
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = it->get();
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
    if (release_graph) {
      n->backward_fn = nullptr;
      n->parents.clear();
      if (!n->requires_grad) std::vector<S>().swap(n->grad);
      it->reset();  // frees the node now unless a handle still holds it
    }
  }
}

// ---- elementwise -----------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  check_same_shape(a, b, "add");
  auto pa = a.node(), pb = b.node();
  auto out = new_node<S>(pa->shape, "add");
  vec_add(out->data.data(), pa->data.data(), pb->data.data(),
          out->data.size());
  return finish<S>(std::move(out), {pa, pb}, [pa, pb](auto& self) {
    if (tracked(pa)) {
      pa->ensure_grad();
      vec_add_into(pa->grad.data(), self.grad.data(), self.grad.size());
    }
    if (tracked(pb)) {
      pb->ensure_grad();
      vec_add_into(pb->grad.data(), self.grad.data(), self.grad.size());
    }
  });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  check_same_shape(a, b, "sub");
  auto pa = a.node(), pb = b.node();
  auto out = new_node<S>(pa->shape, "sub");
  vec_sub(out->data.data(), pa->data.data(), pb->data.data(),
          out->data.size());
  return finish<S>(std::move(out), {pa, pb}, [pa, pb](auto& self) {
    if (tracked(pa)) {
      pa->ensure_grad();
      vec_add_into(pa->grad.data(), self.grad.data(), self.grad.size());
    }
    if (tracked(pb)) {
      pb->ensure_grad();
      vec_sub_into(pb->grad.data(), self.grad.data(), self.grad.size());
    }
  });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape(a, b, "mul");
  auto pa = a.node(), pb = b.node();
  auto out = new_node<S>(pa->shape, "mul");
  vec_mul(out->data.data(), pa->data.data(), pb->data.data(),
          out->data.size());
  return finish<S>(std::move(out), {pa, pb}, [pa, pb](auto& self) {
    if (tracked(pa)) {
      pa->ensure_grad();
      vec_mac_into(pa->grad.data(), self.grad.data(), pb->data.data(),
                   self.grad.size());
    }
    if (tracked(pb)) {
      pb->ensure_grad();
      vec_mac_into(pb->grad.data(), self.grad.data(), pa->data.data(),
                   self.grad.size());
    }
  });
}

template <class S>
TensorT<S> scale(const TensorT<S>& x, S factor) {
  check_defined(x, "scale");
  auto px = x.node();
  auto out = new_node<S>(px->shape, "scale");
  vec_scale(out->data.data(), px->data.data(), factor, out->data.size());
  return finish<S>(std::move(out), {px}, [px, factor](auto& self) {
    px->ensure_grad();
    vec_axpy_into(px->grad.data(), self.grad.data(), factor,
                  self.grad.size());
  });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& x, S value) {
  check_defined(x, "add_scalar");
  auto px = x.node();
  auto out = new_node<S>(px->shape, "add_scalar");
  for (size_t i = 0; i < out->data.size(); ++i)
    out->data[i] = px->data[i] + value;
  return finish<S>(std::move(out), {px}, [px](auto& self) {
    px->ensure_grad();
    vec_add_into(px->grad.data(), self.grad.data(), self.grad.size());
  });
}

template <class S>
TensorT<S> abs(const TensorT<S>& x) {
  check_defined(x, "abs");
  auto px = x.node();
  auto out = new_node<S>(px->shape, "abs");
  for (size_t i = 0; i < out->data.size(); ++i)
    out->data[i] = std::abs(px->data[i]);
  // Subgradient 0 at exactly 0.
  return finish<S>(std::move(out), {px}, [px](auto& self) {
    px->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const S v = px->data[i];
      if (v > S(0))
        px->grad[i] += self.grad[i];
      else if (v < S(0))
        px->grad[i] -= self.grad[i];
    }
  });
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& x) {
  check_defined(x, "sigmoid");
  auto px = x.node();
  auto out = new_node<S>(px->shape, "sigmoid");
  for (size_t i = 0; i < out->data.size(); ++i) {
    const S v = px->data[i];
    // Branch keeps exp() argument non-positive for stability at both tails.
    out->data[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v))
                             : std::exp(v) / (S(1) + std::exp(v));
  }
  return finish<S>(std::move(out), {px}, [px](auto& self) {
    px->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const S y = self.data[i];
      px->grad[i] += self.grad[i] * y * (S(1) - y);
    }
  });
}

namespace {

// Branch-free single-precision exp for the selu forward path, where libm's
// expf is an opaque call that blocks vectorization. Classic range reduction
// exp(v) = 2^k * exp(r) with k = round(v / ln 2) and a degree-5 polynomial
// for exp(r) on |r| <= ln2/2. The polynomial ends in "+ 1.0f" so
// fast_expf(0) == 1 exactly, which keeps selu(0) == 0 exact. Relative error
// is a few ulp. selu only evaluates it for v <= 0; inputs are clamped at
// -87.0 where expf underflows to ~1e-38 (still a normal float).
inline float fast_expf(float v) {
  v = v < -87.0f ? -87.0f : v;
  const float kf = std::floor(v * 1.44269504088896341f + 0.5f);
  // Split ln2 into a high part exact in float and a low correction so the
  // reduced argument keeps full precision.
  const float r = (v - kf * 0.693359375f) - kf * (-2.12194440e-4f);
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float y = (p * r) * r + r + 1.0f;
  const std::uint32_t bits =
      static_cast<std::uint32_t>(static_cast<std::int32_t>(kf) + 127) << 23;
  float pow2k;
  std::memcpy(&pow2k, &bits, sizeof(pow2k));
  return y * pow2k;
}

}  // namespace

template <class S>
TensorT<S> selu(const TensorT<S>& x) {
  check_defined(x, "selu");
  constexpr S kLambda = S(1.0507009873554805);
  constexpr S kAlpha = S(1.6732632423543772);
  auto px = x.node();
  auto out = new_node<S>(px->shape, "selu");
  const S* xv = px->data.data();
  S* __restrict ov = out->data.data();
  const auto n = out->data.size();
  if constexpr (std::is_same_v<S, float>) {
#pragma omp simd
    for (size_t i = 0; i < n; ++i) {
      const float v = xv[i];
      ov[i] = v > 0.0f ? kLambda * v
                       : kLambda * kAlpha * (fast_expf(v) - 1.0f);
    }
  } else {
    for (size_t i = 0; i < n; ++i) {
      const S v = xv[i];
      ov[i] = v > S(0) ? kLambda * v : kLambda * kAlpha * (std::exp(v) - S(1));
    }
  }
  // For v <= 0 the local slope is lambda*alpha*exp(v) = y + lambda*alpha.
  return finish<S>(std::move(out), {px}, [px](auto& self) {
    px->ensure_grad();
    const S* g = self.grad.data();
    const S* y = self.data.data();
    S* __restrict gx = px->grad.data();
    const size_t n2 = self.grad.size();
#pragma omp simd
    for (size_t i = 0; i < n2; ++i) {
      const S slope = y[i] > S(0) ? kLambda : y[i] + kLambda * kAlpha;
      gx[i] += g[i] * slope;
    }
  });
}

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  check_defined(x, "sum");
  auto px = x.node();
  auto out = new_node<S>(Shape{}, "sum");
  S acc = S(0);
  for (S v : px->data) acc += v;
  out->data[0] = acc;
  return finish<S>(std::move(out), {px}, [px](auto& self) {
    px->ensure_grad();
    const S g = self.grad[0];
    for (auto& gv : px->grad) gv += g;
  });
}

template <class S>
TensorT<S> mean(const TensorT<S>& x) {
  check_defined(x, "mean");
  require(x.numel() > 0, ErrorKind::contract, "mean: empty tensor");
  auto px = x.node();
  auto out = new_node<S>(Shape{}, "mean");
  S acc = S(0);
  for (S v : px->data) acc += v;
  const S inv = S(1) / static_cast<S>(px->data.size());
  out->data[0] = acc * inv;
  return finish<S>(std::move(out), {px}, [px, inv](auto& self) {
    px->ensure_grad();
    const S g = self.grad[0] * inv;
    for (auto& gv : px->grad) gv += g;
  });
}

// ---- structure -------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
  check_defined(x, "reshape");
  require(shape_numel(new_shape) == x.numel(), ErrorKind::dimension,
          concat_msg("reshape: cannot view ", shape_str(x.shape()), " as ",
                     shape_str(new_shape)));
  auto px = x.node();
  auto out = new_node<S>(std::move(new_shape), "reshape");
  out->data = px->data;
  return finish<S>(std::move(out), {px}, [px](auto& self) {
    px->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      px->grad[i] += self.grad[i];
  });
}

template <class S>
TensorT<S> transpose_last2(const TensorT<S>& x) {
  check_defined(x, "transpose_last2");
  require(x.rank() >= 2, ErrorKind::dimension,
          concat_msg("transpose_last2: rank ", x.rank(), " < 2"));
  auto px = x.node();
  Shape out_shape = px->shape;
  const std::int64_t r = out_shape[out_shape.size() - 2];
  const std::int64_t c = out_shape[out_shape.size() - 1];
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  auto out = new_node<S>(std::move(out_shape), "transpose_last2");
  const std::int64_t slabs = px->numel() / (r * c);
  for (std::int64_t s = 0; s < slabs; ++s) {
    const S* src = px->data.data() + s * r * c;
    S* dst = out->data.data() + s * r * c;
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  return finish<S>(std::move(out), {px}, [px, slabs, r, c](auto& self) {
    px->ensure_grad();
    for (std::int64_t s = 0; s < slabs; ++s) {
      const S* g = self.grad.data() + s * r * c;
      S* dst = px->grad.data() + s * r * c;
      for (std::int64_t j = 0; j < c; ++j)
        for (std::int64_t i = 0; i < r; ++i) dst[i * c + j] += g[j * r + i];
    }
  });
}

template <class S>
TensorT<S> concat_last(const TensorT<S>& a, const TensorT<S>& b) {
  check_defined(a, "concat_last");
  check_defined(b, "concat_last");
  require(a.rank() == b.rank() && a.rank() >= 1, ErrorKind::dimension,
          concat_msg("concat_last: rank mismatch ", shape_str(a.shape()),
                     " vs ", shape_str(b.shape())));
  for (int i = 0; i + 1 < a.rank(); ++i)
    require(a.shape()[i] == b.shape()[i], ErrorKind::dimension,
            concat_msg("concat_last: leading dims differ ",
                       shape_str(a.shape()), " vs ", shape_str(b.shape())));
  auto pa = a.node(), pb = b.node();
  const std::int64_t da = a.shape().back();
  const std::int64_t db = b.shape().back();
  Shape out_shape = pa->shape;
  out_shape.back() = da + db;
  auto out = new_node<S>(std::move(out_shape), "concat_last");
  const std::int64_t rows = pa->numel() / std::max<std::int64_t>(da, 1);
  for (std::int64_t rI = 0; rI < rows; ++rI) {
    S* dst = out->data.data() + rI * (da + db);
    std::copy_n(pa->data.data() + rI * da, da, dst);
    std::copy_n(pb->data.data() + rI * db, db, dst + da);
  }
  return finish<S>(std::move(out), {pa, pb}, [pa, pb, rows, da, db](auto& self) {
    for (std::int64_t rI = 0; rI < rows; ++rI) {
      const S* g = self.grad.data() + rI * (da + db);
      if (tracked(pa)) {
        pa->ensure_grad();
        S* ga = pa->grad.data() + rI * da;
        for (std::int64_t i = 0; i < da; ++i) ga[i] += g[i];
      }
      if (tracked(pb)) {
        pb->ensure_grad();
        S* gb = pb->grad.data() + rI * db;
        for (std::int64_t i = 0; i < db; ++i) gb[i] += g[da + i];
      }
    }
  });
}

template <class S>
TensorT<S> scale_axis(const TensorT<S>& x, int axis, const TensorT<S>& v) {
  check_defined(x, "scale_axis");
  check_defined(v, "scale_axis");
  const int a = norm_axis(axis, x.rank(), "scale_axis");
  require(v.rank() == 1 && v.numel() == x.shape()[a], ErrorKind::dimension,
          concat_msg("scale_axis: vector shape ", shape_str(v.shape()),
                     " does not match axis ", axis, " of ",
                     shape_str(x.shape())));
  auto px = x.node(), pv = v.node();
  auto out = new_node<S>(px->shape, "scale_axis");
  const AxisSpan sp = axis_span(px->shape, a);
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t c = 0; c < sp.axis_dim; ++c) {
      const std::int64_t base = (o * sp.axis_dim + c) * sp.inner;
      vec_scale(out->data.data() + base, px->data.data() + base, pv->data[c],
                static_cast<size_t>(sp.inner));
    }
  return finish<S>(std::move(out), {px, pv}, [px, pv, sp](auto& self) {
    if (tracked(px)) px->ensure_grad();
    if (tracked(pv)) pv->ensure_grad();
    const size_t inner = static_cast<size_t>(sp.inner);
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t c = 0; c < sp.axis_dim; ++c) {
        const std::int64_t base = (o * sp.axis_dim + c) * sp.inner;
        const S* g = self.grad.data() + base;
        if (tracked(px))
          vec_axpy_into(px->grad.data() + base, g, pv->data[c], inner);
        if (tracked(pv)) {
          const S* xv = px->data.data() + base;
          S acc = S(0);
#pragma omp simd reduction(+ : acc)
          for (size_t i = 0; i < inner; ++i) acc += g[i] * xv[i];
          pv->grad[c] += acc;
        }
      }
  });
}

template <class S>
TensorT<S> add_axis(const TensorT<S>& x, int axis, const TensorT<S>& v) {
  check_defined(x, "add_axis");
  check_defined(v, "add_axis");
  const int a = norm_axis(axis, x.rank(), "add_axis");
  require(v.rank() == 1 && v.numel() == x.shape()[a], ErrorKind::dimension,
          concat_msg("add_axis: vector shape ", shape_str(v.shape()),
                     " does not match axis ", axis, " of ",
                     shape_str(x.shape())));
  auto px = x.node(), pv = v.node();
  auto out = new_node<S>(px->shape, "add_axis");
  const AxisSpan sp = axis_span(px->shape, a);
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t c = 0; c < sp.axis_dim; ++c) {
      const S f = pv->data[c];
      const std::int64_t base = (o * sp.axis_dim + c) * sp.inner;
      S* __restrict dst = out->data.data() + base;
      const S* src = px->data.data() + base;
#pragma omp simd
      for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] = src[i] + f;
    }
  return finish<S>(std::move(out), {px, pv}, [px, pv, sp](auto& self) {
    if (tracked(px)) {
      px->ensure_grad();
      vec_add_into(px->grad.data(), self.grad.data(), self.grad.size());
    }
    if (tracked(pv)) {
      pv->ensure_grad();
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t c = 0; c < sp.axis_dim; ++c) {
          const S* g = self.grad.data() + (o * sp.axis_dim + c) * sp.inner;
          S acc = S(0);
#pragma omp simd reduction(+ : acc)
          for (std::int64_t i = 0; i < sp.inner; ++i) acc += g[i];
          pv->grad[c] += acc;
        }
    }
  });
}

template <class S>
TensorT<S> scale_rows(const TensorT<S>& x, const TensorT<S>& s) {
  check_defined(x, "scale_rows");
  check_defined(s, "scale_rows");
  require(x.rank() >= 2, ErrorKind::dimension,
          "scale_rows: tensor must have rank >= 2");
  Shape want(x.shape().begin(), x.shape().end() - 1);
  require(s.shape() == want, ErrorKind::dimension,
          concat_msg("scale_rows: scales ", shape_str(s.shape()),
                     " do not match rows of ", shape_str(x.shape())));
  auto px = x.node(), ps = s.node();
  auto out = new_node<S>(px->shape, "scale_rows");
  const std::int64_t d = x.shape().back();
  const std::int64_t rows = px->numel() / d;
  for (std::int64_t rI = 0; rI < rows; ++rI) {
    const S f = ps->data[rI];
    const S* src = px->data.data() + rI * d;
    S* dst = out->data.data() + rI * d;
    for (std::int64_t i = 0; i < d; ++i) dst[i] = src[i] * f;
  }
  return finish<S>(std::move(out), {px, ps}, [px, ps, rows, d](auto& self) {
    if (tracked(px)) px->ensure_grad();
    if (tracked(ps)) ps->ensure_grad();
    for (std::int64_t rI = 0; rI < rows; ++rI) {
      const S* g = self.grad.data() + rI * d;
      if (tracked(px)) {
        const S f = ps->data[rI];
        S* gx = px->grad.data() + rI * d;
        for (std::int64_t i = 0; i < d; ++i) gx[i] += g[i] * f;
      }
      if (tracked(ps)) {
        const S* xv = px->data.data() + rI * d;
        S acc = S(0);
        for (std::int64_t i = 0; i < d; ++i) acc += g[i] * xv[i];
        ps->grad[rI] += acc;
      }
    }
  });
}

namespace {

template <class S>
TensorT<S> gather_rows_impl(const TensorT<S>& x,
                            const std::vector<std::vector<std::int64_t>>& idx,
                            bool batched) {
  auto px = x.node();
  const std::int64_t d = x.shape().back();
  const std::int64_t n_rows = x.shape()[x.rank() - 2];
  const std::int64_t batches = batched ? x.shape()[0] : 1;
  require(static_cast<std::int64_t>(idx.size()) == batches,
          ErrorKind::dimension,
          concat_msg("gather_rows: ", idx.size(), " index lists for ",
                     batches, " batches"));
  const std::int64_t m = static_cast<std::int64_t>(idx[0].size());
  for (const auto& list : idx) {
    require(static_cast<std::int64_t>(list.size()) == m, ErrorKind::dimension,
            "gather_rows: ragged index lists");
    for (auto k : list)
      require(k >= 0 && k < n_rows, ErrorKind::dimension,
              concat_msg("gather_rows: index ", k, " out of range [0, ",
                         n_rows, ")"));
  }
  Shape out_shape = px->shape;
  out_shape[out_shape.size() - 2] = m;
  auto out = new_node<S>(std::move(out_shape), "gather_rows");
  for (std::int64_t b = 0; b < batches; ++b) {
    const S* src = px->data.data() + b * n_rows * d;
    S* dst = out->data.data() + b * m * d;
    for (std::int64_t j = 0; j < m; ++j)
      std::copy_n(src + idx[b][j] * d, d, dst + j * d);
  }
  return finish<S>(std::move(out), {px},
                   [px, idx, batches, n_rows, m, d](auto& self) {
                     px->ensure_grad();
                     for (std::int64_t b = 0; b < batches; ++b) {
                       S* gx = px->grad.data() + b * n_rows * d;
                       const S* g = self.grad.data() + b * m * d;
                       for (std::int64_t j = 0; j < m; ++j) {
                         S* row = gx + idx[b][j] * d;
                         const S* grow = g + j * d;
                         for (std::int64_t i = 0; i < d; ++i)
                           row[i] += grow[i];
                       }
                     }
                   });
}

}  // namespace

template <class S>
TensorT<S> gather_rows(const TensorT<S>& x,
                       const std::vector<std::int64_t>& idx) {
  check_defined(x, "gather_rows");
  require(x.rank() == 2, ErrorKind::dimension,
          concat_msg("gather_rows: expected rank 2, got ",
                     shape_str(x.shape())));
  require(!idx.empty(), ErrorKind::contract, "gather_rows: empty selection");
  return gather_rows_impl(x, {idx}, /*batched=*/false);
}

template <class S>
TensorT<S> gather_rows(const TensorT<S>& x,
                       const std::vector<std::vector<std::int64_t>>& idx) {
  check_defined(x, "gather_rows");
  require(x.rank() == 3, ErrorKind::dimension,
          concat_msg("gather_rows: expected rank 3, got ",
                     shape_str(x.shape())));
  require(!idx.empty() && !idx[0].empty(), ErrorKind::contract,
          "gather_rows: empty selection");
  return gather_rows_impl(x, idx, /*batched=*/true);
}

// ---- contractions ----------------------------------------------------------

namespace {

enum class MatKind { nn, nt, tn };

// Shared driver for the three matmul variants over optional batch dims.
template <class S>
TensorT<S> matmul_impl(const TensorT<S>& a, const TensorT<S>& b,
                       MatKind kind, const char* op) {
  check_defined(a, op);
  check_defined(b, op);
  require((a.rank() == 2 || a.rank() == 3) && (b.rank() == 2 || b.rank() == 3),
          ErrorKind::dimension,
          concat_msg(op, ": operands must be rank 2 or 3, got ",
                     shape_str(a.shape()), " and ", shape_str(b.shape())));
  const bool ba = a.rank() == 3, bb = b.rank() == 3;
  std::int64_t batches = 1;
  if (ba && bb) {
    require(a.shape()[0] == b.shape()[0], ErrorKind::dimension,
            concat_msg(op, ": batch sizes differ ", shape_str(a.shape()),
                       " vs ", shape_str(b.shape())));
    batches = a.shape()[0];
  } else if (ba || bb) {
    batches = ba ? a.shape()[0] : b.shape()[0];
  }

  // Dimensions of the 2D problem per batch.
  const std::int64_t a0 = a.shape()[a.rank() - 2], a1 = a.shape().back();
  const std::int64_t b0 = b.shape()[b.rank() - 2], b1 = b.shape().back();
  std::int64_t m_dim, k_dim, n_dim, k_b;
  switch (kind) {
    case MatKind::nn: m_dim = a0; k_dim = a1; k_b = b0; n_dim = b1; break;
    case MatKind::nt: m_dim = a0; k_dim = a1; n_dim = b0; k_b = b1; break;
    case MatKind::tn: k_dim = a0; m_dim = a1; k_b = b0; n_dim = b1; break;
    default: k_dim = m_dim = n_dim = k_b = 0;
  }
  require(k_dim == k_b, ErrorKind::dimension,
          concat_msg(op, ": inner dimensions differ, ", shape_str(a.shape()),
                     " vs ", shape_str(b.shape())));

  auto pa = a.node(), pb = b.node();
  Shape out_shape = (ba || bb) ? Shape{batches, m_dim, n_dim}
                               : Shape{m_dim, n_dim};
  auto out = new_node<S>(std::move(out_shape), op);
  const std::int64_t sa = ba ? a0 * a1 : 0;
  const std::int64_t sb = bb ? b0 * b1 : 0;
  const std::int64_t so = m_dim * n_dim;
  for (std::int64_t t = 0; t < batches; ++t) {
    const S* ap = pa->data.data() + t * sa;
    const S* bp = pb->data.data() + t * sb;
    S* cp = out->data.data() + t * so;
    switch (kind) {
      case MatKind::nn: mat_nn(cp, ap, bp, m_dim, k_dim, n_dim); break;
      case MatKind::nt: mat_nt(cp, ap, bp, m_dim, k_dim, n_dim); break;
      case MatKind::tn: mat_tn(cp, ap, bp, m_dim, k_dim, n_dim); break;
    }
  }

  return finish<S>(
      std::move(out), {pa, pb},
      [pa, pb, kind, batches, sa, sb, so, m_dim, k_dim, n_dim](auto& self) {
        if (tracked(pa)) pa->ensure_grad();
        if (tracked(pb)) pb->ensure_grad();
        for (std::int64_t t = 0; t < batches; ++t) {
          const S* ap = pa->data.data() + t * sa;
          const S* bp = pb->data.data() + t * sb;
          S* gap = tracked(pa) ? pa->grad.data() + t * sa : nullptr;
          S* gbp = tracked(pb) ? pb->grad.data() + t * sb : nullptr;
          const S* g = self.grad.data() + t * so;
          switch (kind) {
            case MatKind::nn:
              // C = A.B: dA = dC.B^T, dB = A^T.dC
              if (gap) mat_nt(gap, g, bp, m_dim, n_dim, k_dim);
              if (gbp) mat_tn(gbp, ap, g, k_dim, m_dim, n_dim);
              break;
            case MatKind::nt:
              // C = A.B^T: dA = dC.B, dB = dC^T.A
              if (gap) mat_nn(gap, g, bp, m_dim, n_dim, k_dim);
              if (gbp) mat_tn(gbp, g, ap, n_dim, m_dim, k_dim);
              break;
            case MatKind::tn:
              // C = A^T.B: dA = B.dC^T, dB = A.dC
              if (gap) mat_nt(gap, bp, g, k_dim, n_dim, m_dim);
              if (gbp) mat_nn(gbp, ap, g, k_dim, m_dim, n_dim);
              break;
          }
        }
      });
}

}  // namespace

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  return matmul_impl(a, b, MatKind::nn, "matmul");
}

template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
  return matmul_impl(a, b, MatKind::nt, "matmul_nt");
}

template <class S>
TensorT<S> matmul_tn(const TensorT<S>& a, const TensorT<S>& b) {
  return matmul_impl(a, b, MatKind::tn, "matmul_tn");
}

template <class S>
TensorT<S> matvec(const TensorT<S>& x, const TensorT<S>& v) {
  check_defined(x, "matvec");
  check_defined(v, "matvec");
  require(x.rank() >= 1 && v.rank() == 1, ErrorKind::dimension,
          concat_msg("matvec: got ", shape_str(x.shape()), " and ",
                     shape_str(v.shape())));
  const std::int64_t d = x.shape().back();
  require(d == v.numel(), ErrorKind::dimension,
          concat_msg("matvec: last dim ", d, " vs vector length ", v.numel()));
  auto px = x.node(), pv = v.node();
  Shape out_shape(px->shape.begin(), px->shape.end() - 1);
  auto out = new_node<S>(std::move(out_shape), "matvec");
  const std::int64_t rows = out->numel();
  for (std::int64_t rI = 0; rI < rows; ++rI) {
    const S* row = px->data.data() + rI * d;
    const S* vp = pv->data.data();
    S acc = S(0);
#pragma omp simd reduction(+ : acc)
    for (std::int64_t i = 0; i < d; ++i) acc += row[i] * vp[i];
    out->data[rI] = acc;
  }
  return finish<S>(std::move(out), {px, pv}, [px, pv, rows, d](auto& self) {
    if (tracked(px)) px->ensure_grad();
    if (tracked(pv)) pv->ensure_grad();
    for (std::int64_t rI = 0; rI < rows; ++rI) {
      const S g = self.grad[rI];
      if (tracked(px)) {
        S* gx = px->grad.data() + rI * d;
        for (std::int64_t i = 0; i < d; ++i) gx[i] += g * pv->data[i];
      }
      if (tracked(pv)) {
        const S* row = px->data.data() + rI * d;
        for (std::int64_t i = 0; i < d; ++i) pv->grad[i] += g * row[i];
      }
    }
  });
}

// ---- reductions / normalizers ---------------------------------------------

template <class S>
TensorT<S> max_axis(const TensorT<S>& x, int axis) {
  check_defined(x, "max_axis");
  const int a = norm_axis(axis, x.rank(), "max_axis");
  require(x.shape()[a] > 0, ErrorKind::contract, "max_axis: empty axis");
  auto px = x.node();
  Shape out_shape = px->shape;
  out_shape.erase(out_shape.begin() + a);
  auto out = new_node<S>(std::move(out_shape), "max_axis");
  const AxisSpan sp = axis_span(px->shape, a);
  // Flat source index of each output's arg max; ties keep the first hit.
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out->data.size());
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      std::int64_t best_idx = o * sp.axis_dim * sp.inner + i;
      S best = px->data[best_idx];
      for (std::int64_t c = 1; c < sp.axis_dim; ++c) {
        const std::int64_t idx = (o * sp.axis_dim + c) * sp.inner + i;
        if (px->data[idx] > best) {
          best = px->data[idx];
          best_idx = idx;
        }
      }
      out->data[o * sp.inner + i] = best;
      (*argmax)[o * sp.inner + i] = best_idx;
    }
  return finish<S>(std::move(out), {px}, [px, argmax](auto& self) {
    px->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      px->grad[(*argmax)[i]] += self.grad[i];
  });
}

template <class S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
  check_defined(x, "softmax");
  const int a = norm_axis(axis, x.rank(), "softmax");
  require(x.shape()[a] > 0, ErrorKind::contract, "softmax: empty axis");
  auto px = x.node();
  auto out = new_node<S>(px->shape, "softmax");
  const AxisSpan sp = axis_span(px->shape, a);
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.axis_dim * sp.inner + i;
      S mx = px->data[base];
      for (std::int64_t c = 1; c < sp.axis_dim; ++c)
        mx = std::max(mx, px->data[base + c * sp.inner]);
      S denom = S(0);
      for (std::int64_t c = 0; c < sp.axis_dim; ++c) {
        const S e = std::exp(px->data[base + c * sp.inner] - mx);
        out->data[base + c * sp.inner] = e;
        denom += e;
      }
      const S inv = S(1) / denom;
      for (std::int64_t c = 0; c < sp.axis_dim; ++c)
        out->data[base + c * sp.inner] *= inv;
    }
  return finish<S>(std::move(out), {px}, [px, sp](auto& self) {
    px->ensure_grad();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const std::int64_t base = o * sp.axis_dim * sp.inner + i;
        S dot = S(0);
        for (std::int64_t c = 0; c < sp.axis_dim; ++c) {
          const std::int64_t idx = base + c * sp.inner;
          dot += self.grad[idx] * self.data[idx];
        }
        for (std::int64_t c = 0; c < sp.axis_dim; ++c) {
          const std::int64_t idx = base + c * sp.inner;
          px->grad[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
  });
}

template <class S>
TensorT<S> log_softmax(const TensorT<S>& x) {
  check_defined(x, "log_softmax");
  require(x.rank() >= 1 && x.shape().back() > 0, ErrorKind::dimension,
          concat_msg("log_softmax: bad shape ", shape_str(x.shape())));
  auto px = x.node();
  auto out = new_node<S>(px->shape, "log_softmax");
  const std::int64_t d = px->shape.back();
  const std::int64_t rows = px->numel() / d;
  for (std::int64_t rI = 0; rI < rows; ++rI) {
    const S* row = px->data.data() + rI * d;
    S* dst = out->data.data() + rI * d;
    S mx = row[0];
    for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    S denom = S(0);
    for (std::int64_t i = 0; i < d; ++i) denom += std::exp(row[i] - mx);
    const S lse = mx + std::log(denom);
    for (std::int64_t i = 0; i < d; ++i) dst[i] = row[i] - lse;
  }
  return finish<S>(std::move(out), {px}, [px, rows, d](auto& self) {
    px->ensure_grad();
    for (std::int64_t rI = 0; rI < rows; ++rI) {
      const S* g = self.grad.data() + rI * d;
      const S* y = self.data.data() + rI * d;
      S gsum = S(0);
      for (std::int64_t i = 0; i < d; ++i) gsum += g[i];
      S* gx = px->grad.data() + rI * d;
      for (std::int64_t i = 0; i < d; ++i)
        gx[i] += g[i] - std::exp(y[i]) * gsum;
    }
  });
}

// ---- explicit instantiations -----------------------------------------------

#define RAWGAT_INSTANTIATE_TENSOR_OPS(S)                                       \
  template class TensorT<S>;                                                   \
  template void backward<S>(const TensorT<S>&, bool);                          \
  template TensorT<S> add<S>(const TensorT<S>&, const TensorT<S>&);            \
  template TensorT<S> sub<S>(const TensorT<S>&, const TensorT<S>&);            \
  template TensorT<S> mul<S>(const TensorT<S>&, const TensorT<S>&);            \
  template TensorT<S> scale<S>(const TensorT<S>&, S);                          \
  template TensorT<S> add_scalar<S>(const TensorT<S>&, S);                     \
  template TensorT<S> abs<S>(const TensorT<S>&);                               \
  template TensorT<S> sigmoid<S>(const TensorT<S>&);                           \
  template TensorT<S> selu<S>(const TensorT<S>&);                              \
  template TensorT<S> sum<S>(const TensorT<S>&);                               \
  template TensorT<S> mean<S>(const TensorT<S>&);                              \
  template TensorT<S> reshape<S>(const TensorT<S>&, Shape);                    \
  template TensorT<S> transpose_last2<S>(const TensorT<S>&);                   \
  template TensorT<S> concat_last<S>(const TensorT<S>&, const TensorT<S>&);    \
  template TensorT<S> scale_axis<S>(const TensorT<S>&, int, const TensorT<S>&);\
  template TensorT<S> add_axis<S>(const TensorT<S>&, int, const TensorT<S>&);  \
  template TensorT<S> scale_rows<S>(const TensorT<S>&, const TensorT<S>&);     \
  template TensorT<S> gather_rows<S>(const TensorT<S>&,                        \
                                     const std::vector<std::int64_t>&);        \
  template TensorT<S> gather_rows<S>(                                          \
      const TensorT<S>&, const std::vector<std::vector<std::int64_t>>&);       \
  template TensorT<S> matmul<S>(const TensorT<S>&, const TensorT<S>&);         \
  template TensorT<S> matmul_nt<S>(const TensorT<S>&, const TensorT<S>&);      \
  template TensorT<S> matmul_tn<S>(const TensorT<S>&, const TensorT<S>&);      \
  template TensorT<S> matvec<S>(const TensorT<S>&, const TensorT<S>&);         \
  template TensorT<S> max_axis<S>(const TensorT<S>&, int);                     \
  template TensorT<S> softmax<S>(const TensorT<S>&, int);                      \
  template TensorT<S> log_softmax<S>(const TensorT<S>&);

RAWGAT_INSTANTIATE_TENSOR_OPS(float)
RAWGAT_INSTANTIATE_TENSOR_OPS(double)
#undef RAWGAT_INSTANTIATE_TENSOR_OPS

}  // namespace rawgat
