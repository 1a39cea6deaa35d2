#include "vsg/tensor.hpp"

#include "vsg/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace vsg {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;
thread_local std::vector<std::uint8_t>* t_kink_record = nullptr;

template <typename T>
using MapM = Eigen::Map<RowMatrix<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void accumulate(const std::shared_ptr<Node<T>>& in, const ArrayX<T>& g) {
  if (!in->requires_grad) return;
  in->ensure_grad();
  in->grad += g;
}

int normalize_axis(int axis, std::int64_t ndim) {
  if (axis < 0) axis += static_cast<int>(ndim);
  if (axis < 0 || axis >= ndim) throw ShapeError("axis out of range");
  return axis;
}

std::int64_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::int64_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

}  // namespace

std::int64_t numel(const Shape& s) { return prod(s, 0, s.size()); }

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }
bool grad_enabled() { return t_grad_enabled; }

KinkRecorder::KinkRecorder() : prev_(t_kink_record) { t_kink_record = &signs_; }
KinkRecorder::~KinkRecorder() { t_kink_record = prev_; }
std::vector<std::uint8_t>* active_kink_record() { return t_kink_record; }

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = vsg::numel(shape);
  return from_values(std::move(shape), ArrayX<T>::Constant(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_values(Shape shape, ArrayX<T> values, bool requires_grad) {
  for (auto d : shape)
    if (d < 1) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  if (vsg::numel(shape) != values.size())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->id = g_next_id.fetch_add(1);
  return Tensor(std::move(node));
}

template <typename T>
std::int64_t Tensor<T>::dim(std::int64_t axis) const {
  return node_->shape[static_cast<std::size_t>(normalize_axis(static_cast<int>(axis), ndim()))];
}

template <typename T>
ArrayX<T>& Tensor<T>::grad() {
  node_->ensure_grad();
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (has_grad()) node_->grad.setZero();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on a tensor with " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_values(shape(), value(), false);
}

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, ArrayX<T> value, const std::vector<Tensor<T>>& inputs,
                      std::function<void(const Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->id = g_next_id.fetch_add(1);
  node->op = op;
  const bool needs = t_grad_enabled && backward &&
                     std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
std::vector<const Node<T>*> topological_order(const Tensor<T>& root) {
  std::vector<const Node<T>*> nodes;
  std::unordered_set<const Node<T>*> seen;
  std::vector<const Node<T>*> stack{root.node().get()};
  while (!stack.empty()) {
    const Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (const auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(nodes.begin(), nodes.end(), [](const Node<T>* a, const Node<T>* b) { return a->id < b->id; });
  return nodes;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError("backward() needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "()"));
  auto order = topological_order(loss);
  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Element-wise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.begin(), sb.end(), sa.end() - static_cast<std::ptrdiff_t>(sb.size())))
    throw ShapeError("add: " + shape_str(sb) + " is not a trailing suffix of " + shape_str(sa));
  const Eigen::Index m = b.numel();
  const Eigen::Index reps = a.numel() / m;
  ArrayX<T> out = a.value();
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic>>(out.data(), m, reps).colwise() += b.value();
  auto an = a.node(), bn = b.node();
  return make_result<T>("add", sa, std::move(out), {a, b}, [an, bn, m, reps](const Node<T>& self) {
    accumulate(an, self.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      bn->grad += Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic>>(self.grad.data(), m, reps)
                      .rowwise()
                      .sum();
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto an = a.node(), bn = b.node();
  return make_result<T>("sub", a.shape(), a.value() - b.value(), {a, b}, [an, bn](const Node<T>& self) {
    accumulate(an, self.grad);
    accumulate<T>(bn, -self.grad);
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto an = a.node(), bn = b.node();
  return make_result<T>("mul", a.shape(), a.value() * b.value(), {a, b}, [an, bn](const Node<T>& self) {
    accumulate<T>(an, self.grad * bn->value);
    accumulate<T>(bn, self.grad * an->value);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto an = a.node();
  return make_result<T>("scale", a.shape(), a.value() * s, {a},
                        [an, s](const Node<T>& self) { accumulate<T>(an, self.grad * s); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  auto an = a.node();
  if (auto* rec = active_kink_record())
    for (Eigen::Index i = 0; i < a.value().size(); ++i) rec->push_back(a.value()[i] >= T(0));
  ArrayX<T> out = (a.value() >= T(0)).select(a.value(), a.value() * slope);
  return make_result<T>("leaky_relu", a.shape(), std::move(out), {a}, [an, slope](const Node<T>& self) {
    accumulate<T>(an, (an->value >= T(0)).select(self.grad, self.grad * slope));
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  auto an = a.node();
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  ArrayX<T> out = a.value().unaryExpr([inv_sqrt2](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); });
  return make_result<T>("gelu", a.shape(), std::move(out), {a}, [an, inv_sqrt2](const Node<T>& self) {
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * T(M_PI));
    ArrayX<T> d = an->value.unaryExpr([&](T x) {
      return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * std::exp(T(-0.5) * x * x) * inv_sqrt_2pi;
    });
    accumulate<T>(an, self.grad * d);
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, bool training, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout probability must lie in [0, 1)");
  if (!training || p == 0.0) return a;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  const T s = T(1.0 / (1.0 - p));
  ArrayX<T> mask(a.numel());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? s : T(0);
  auto an = a.node();
  ArrayX<T> out = a.value() * mask;
  return make_result<T>("dropout", a.shape(), std::move(out), {a},
                        [an, mask = std::move(mask)](const Node<T>& self) { accumulate<T>(an, self.grad * mask); });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto an = a.node();
  return make_result<T>("reshape", std::move(shape), a.value(), {a},
                        [an](const Node<T>& self) { accumulate(an, self.grad); });
}

namespace {

// Row-major strides.
Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// For every output position of the permuted tensor, the source offset.
std::vector<std::int64_t> permute_index(const Shape& src_shape, const std::vector<int>& order) {
  const std::size_t nd = src_shape.size();
  Shape dst_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) dst_shape[i] = src_shape[static_cast<std::size_t>(order[i])];
  const Shape src_st = strides_of(src_shape);
  Shape step(nd);
  for (std::size_t i = 0; i < nd; ++i) step[i] = src_st[static_cast<std::size_t>(order[i])];
  const auto n = numel(src_shape);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  Shape counter(nd, 0);
  std::int64_t off = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    idx[static_cast<std::size_t>(o)] = off;
    for (std::size_t d = nd; d-- > 0;) {
      ++counter[d];
      off += step[d];
      if (counter[d] < dst_shape[d]) break;
      off -= step[d] * dst_shape[d];
      counter[d] = 0;
    }
  }
  return idx;
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& order) {
  const auto nd = a.ndim();
  if (static_cast<std::int64_t>(order.size()) != nd) throw ShapeError("permute: order length does not match rank");
  std::vector<int> sorted(order);
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < nd; ++i)
    if (sorted[static_cast<std::size_t>(i)] != i) throw ShapeError("permute: order is not a permutation");
  Shape out_shape(static_cast<std::size_t>(nd));
  for (std::size_t i = 0; i < order.size(); ++i) out_shape[i] = a.shape()[static_cast<std::size_t>(order[i])];
  auto idx = std::make_shared<std::vector<std::int64_t>>(permute_index(a.shape(), order));
  ArrayX<T> out(a.numel());
  for (Eigen::Index o = 0; o < out.size(); ++o) out[o] = a.value()[(*idx)[static_cast<std::size_t>(o)]];
  auto an = a.node();
  return make_result<T>("permute", std::move(out_shape), std::move(out), {a}, [an, idx](const Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (Eigen::Index o = 0; o < self.grad.size(); ++o) an->grad[(*idx)[static_cast<std::size_t>(o)]] += self.grad[o];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1) {
  std::vector<int> order(static_cast<std::size_t>(a.ndim()));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[static_cast<std::size_t>(normalize_axis(axis0, a.ndim()))],
            order[static_cast<std::size_t>(normalize_axis(axis1, a.ndim()))]);
  return permute(a, order);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto nd = parts[0].ndim();
  axis = normalize_axis(axis, nd);
  const auto ax = static_cast<std::size_t>(axis);
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < static_cast<std::size_t>(nd); ++d)
      if (d != ax && p.shape()[d] != parts[0].shape()[d])
        throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(parts[0].shape()));
    out_shape[ax] += p.shape()[ax];
  }
  const std::int64_t outer = prod(out_shape, 0, ax);
  const std::int64_t inner_total = prod(out_shape, ax, out_shape.size());
  std::vector<std::int64_t> inner(parts.size()), offset(parts.size());
  std::int64_t acc = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    inner[i] = prod(parts[i].shape(), ax, parts[i].shape().size());
    offset[i] = acc;
    acc += inner[i];
  }
  ArrayX<T> out(numel(out_shape));
  for (std::size_t i = 0; i < parts.size(); ++i)
    for (std::int64_t o = 0; o < outer; ++o)
      out.segment(o * inner_total + offset[i], inner[i]) = parts[i].value().segment(o * inner[i], inner[i]);
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result<T>("concat", std::move(out_shape), std::move(out), parts,
                        [nodes, inner, offset, outer, inner_total](const Node<T>& self) {
                          for (std::size_t i = 0; i < nodes.size(); ++i) {
                            if (!nodes[i]->requires_grad) continue;
                            nodes[i]->ensure_grad();
                            for (std::int64_t o = 0; o < outer; ++o)
                              nodes[i]->grad.segment(o * inner[i], inner[i]) +=
                                  self.grad.segment(o * inner_total + offset[i], inner[i]);
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto an = a.node();
  ArrayX<T> out(1);
  out[0] = a.value().sum();
  return make_result<T>("sum", Shape{1}, std::move(out), {a}, [an](const Node<T>& self) {
    accumulate<T>(an, ArrayX<T>::Constant(an->value.size(), self.grad[0]));
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool batched = a.ndim() == 3;
  if (!((a.ndim() == 2 && b.ndim() == 2) || (a.ndim() == 3 && b.ndim() == 3)))
    throw ShapeError("matmul: expects 2D x 2D or 3D x 3D, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t B = batched ? a.dim(0) : 1;
  const std::int64_t M = a.dim(-2), K = a.dim(-1), N = b.dim(-1);
  if (b.dim(-2) != K || (batched && b.dim(0) != B))
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  ArrayX<T> out(B * M * N);
  for (std::int64_t i = 0; i < B; ++i) {
    MapM<T>(out.data() + i * M * N, M, N).noalias() =
        CMapM<T>(a.data() + i * M * K, M, K) * CMapM<T>(b.data() + i * K * N, K, N);
  }
  Shape shape = batched ? Shape{B, M, N} : Shape{M, N};
  auto an = a.node(), bn = b.node();
  return make_result<T>("matmul", std::move(shape), std::move(out), {a, b}, [an, bn, B, M, K, N](const Node<T>& self) {
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::int64_t i = 0; i < B; ++i) {
      CMapM<T> g(self.grad.data() + i * M * N, M, N);
      if (an->requires_grad)
        MapM<T>(an->grad.data() + i * M * K, M, K).noalias() +=
            g * CMapM<T>(bn->value.data() + i * K * N, K, N).transpose();
      if (bn->requires_grad)
        MapM<T>(bn->grad.data() + i * K * N, K, N).noalias() +=
            CMapM<T>(an->value.data() + i * M * K, M, K).transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.ndim() != 2 || x.dim(-1) != w.dim(0))
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  const std::int64_t in = w.dim(0), out = w.dim(1);
  Shape out_shape = x.shape();
  out_shape.back() = out;
  auto y = matmul(reshape(x, Shape{x.numel() / in, in}), w);
  if (b.defined()) y = add(y, b);
  return reshape(y, std::move(out_shape));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  axis = normalize_axis(axis, a.ndim());
  const auto ax = static_cast<std::size_t>(axis);
  const std::int64_t outer = prod(a.shape(), 0, ax);
  const std::int64_t n = a.shape()[ax];
  const std::int64_t inner = prod(a.shape(), ax + 1, a.shape().size());
  ArrayX<T> out(a.numel());
  const T* src = a.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      T mx = src[base];
      for (std::int64_t k = 1; k < n; ++k) mx = std::max(mx, src[base + k * inner]);
      T s = 0;
      for (std::int64_t k = 0; k < n; ++k) {
        const T e = std::exp(src[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::int64_t k = 0; k < n; ++k) out[base + k * inner] /= s;
    }
  auto an = a.node();
  return make_result<T>("softmax", a.shape(), out, {a}, [an, outer, n, inner](const Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * n * inner + i;
        T dot = 0;
        for (std::int64_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::int64_t k = 0; k < n; ++k)
          an->grad[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

// Normalizes `groups` contiguous runs of `len` values; group g uses the
// scalar affine parameters of channel_of(g).
template <typename T, typename ChannelOf>
Tensor<T> group_normalize(const char* op, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                          std::int64_t groups, std::int64_t len, ChannelOf channel_of) {
  ArrayX<T> xhat(x.numel());
  ArrayX<T> inv_std(groups);
  ArrayX<T> out(x.numel());
  for (std::int64_t g = 0; g < groups; ++g) {
    auto seg = x.value().segment(g * len, len);
    const T mu = seg.mean();
    const T var = (seg - mu).square().mean();
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[g] = inv;
    xhat.segment(g * len, len) = (seg - mu) * inv;
    const auto c = channel_of(g);
    out.segment(g * len, len) = xhat.segment(g * len, len) * gamma.value()[c] + beta.value()[c];
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result<T>(op, x.shape(), std::move(out), {x, gamma, beta},
                        [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), groups, len,
                         channel_of](const Node<T>& self) {
                          if (xn->requires_grad) xn->ensure_grad();
                          if (gn->requires_grad) gn->ensure_grad();
                          if (bn->requires_grad) bn->ensure_grad();
                          for (std::int64_t g = 0; g < groups; ++g) {
                            const auto c = channel_of(g);
                            auto dy = self.grad.segment(g * len, len);
                            auto xh = xhat.segment(g * len, len);
                            if (gn->requires_grad) gn->grad[c] += (dy * xh).sum();
                            if (bn->requires_grad) bn->grad[c] += dy.sum();
                            if (xn->requires_grad) {
                              const T gm = gn->value[c];
                              const T s1 = dy.sum() * gm;
                              const T s2 = (dy * xh).sum() * gm;
                              const T L = static_cast<T>(len);
                              xn->grad.segment(g * len, len) +=
                                  (dy * gm * L - s1 - xh * s2) * (inv_std[g] / L);
                            }
                          }
                        });
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm: affine parameters must have the last-axis size");
  const std::int64_t rows = x.numel() / d;
  ArrayX<T> xhat(x.numel());
  ArrayX<T> inv_std(rows);
  ArrayX<T> out(x.numel());
  for (std::int64_t r = 0; r < rows; ++r) {
    auto seg = x.value().segment(r * d, d);
    const T mu = seg.mean();
    const T inv = T(1) / std::sqrt((seg - mu).square().mean() + eps);
    inv_std[r] = inv;
    xhat.segment(r * d, d) = (seg - mu) * inv;
    out.segment(r * d, d) = xhat.segment(r * d, d) * gamma.value() + beta.value();
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                        [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](const Node<T>& self) {
                          if (xn->requires_grad) xn->ensure_grad();
                          if (gn->requires_grad) gn->ensure_grad();
                          if (bn->requires_grad) bn->ensure_grad();
                          const T D = static_cast<T>(d);
                          for (std::int64_t r = 0; r < rows; ++r) {
                            auto dy = self.grad.segment(r * d, d);
                            auto xh = xhat.segment(r * d, d);
                            if (gn->requires_grad) gn->grad += dy * xh;
                            if (bn->requires_grad) bn->grad += dy;
                            if (xn->requires_grad) {
                              ArrayX<T> dxh = dy * gn->value;
                              xn->grad.segment(r * d, d) +=
                                  (dxh * D - dxh.sum() - xh * (dxh * xh).sum()) * (inv_std[r] / D);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.ndim() < 3) throw ShapeError("instance_norm: expects [N, C, spatial...], got " + shape_str(x.shape()));
  const std::int64_t C = x.dim(1);
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("instance_norm: affine parameters must have C entries");
  const std::int64_t len = x.numel() / (x.dim(0) * C);
  if (len < 2) throw ShapeError("instance_norm: spatial size must be at least 2");
  return group_normalize<T>("instance_norm", x, gamma, beta, eps, x.dim(0) * C, len,
                            [C](std::int64_t g) -> Eigen::Index { return g % C; });
}

// ---------------------------------------------------------------------------

#define VSG_INSTANTIATE(T)                                                                                        \
  template class Tensor<T>;                                                                                       \
  template Tensor<T> make_result<T>(const char*, Shape, ArrayX<T>, const std::vector<Tensor<T>>&,                  \
                                    std::function<void(const Node<T>&)>);                                         \
  template std::vector<const Node<T>*> topological_order<T>(const Tensor<T>&);                                   \
  template void backward<T>(const Tensor<T>&);                                                                    \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                               \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                         \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                                       \
  template Tensor<T> transpose<T>(const Tensor<T>&, int, int);                                                    \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                                               \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                                    \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                                   \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                                           \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                                          \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                                   \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, bool, std::uint64_t);                                   \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                      \
  template Tensor<T> instance_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);

VSG_INSTANTIATE(float)
VSG_INSTANTIATE(double)

#undef VSG_INSTANTIATE

}  // namespace vsg
