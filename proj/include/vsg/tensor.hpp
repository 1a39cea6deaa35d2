#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace vsg {

using Shape = std::vector<std::int64_t>;
using Int3 = std::array<std::int64_t, 3>;

template <typename T>
using ArrayX = Eigen::Array<T, Eigen::Dynamic, 1>;
template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// One recorded operation. Inputs always carry smaller ids than the node that
// consumes them, so descending id order is a reverse topological order.
template <typename T>
struct Node {
  Shape shape;
  ArrayX<T> value;
  ArrayX<T> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads self.grad and accumulates into the inputs' grads.
  std::function<void(const Node& self)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = ArrayX<T>::Zero(value.size());
  }
};

// Dense row-major (last axis fastest) array with reverse-mode autodiff.
// Copies share the underlying node.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_values(Shape shape, ArrayX<T> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(node_->shape.size()); }
  // Negative axes count from the back.
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  ArrayX<T>& value() { return node_->value; }
  const ArrayX<T>& value() const { return node_->value; }
  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }

  // Allocates a zero gradient on first access.
  ArrayX<T>& grad();
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  std::uint64_t id() const { return node_->id; }
  const char* op() const { return node_->op; }
  T item() const;

  // New leaf holding a copy of the values.
  Tensor detach() const;
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// While a NoGradGuard is alive on this thread, ops record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};
bool grad_enabled();

// While alive, leaky_relu appends one byte per input element (1 when >= 0) on
// this thread. Two evaluations with different patterns lie on different sides
// of a kink.
class KinkRecorder {
 public:
  KinkRecorder();
  ~KinkRecorder();
  KinkRecorder(const KinkRecorder&) = delete;
  KinkRecorder& operator=(const KinkRecorder&) = delete;
  const std::vector<std::uint8_t>& signs() const { return signs_; }

 private:
  std::vector<std::uint8_t> signs_;
  std::vector<std::uint8_t>* prev_;
};
std::vector<std::uint8_t>* active_kink_record();

// Builds an op node. `backward` may be empty when no input needs a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, ArrayX<T> value, const std::vector<Tensor<T>>& inputs,
                      std::function<void(const Node<T>&)> backward);

// Graph rooted at `root`, inputs before consumers.
template <typename T>
std::vector<const Node<T>*> topological_order(const Tensor<T>& root);

// Seeds d(loss)/d(loss) = 1 and sweeps the graph in reverse topological order.
// Throws UsageError unless loss is a single element.
template <typename T>
void backward(const Tensor<T>& loss);

// ---------------------------------------------------------------------------
// Element-wise and shape ops

// b must match a's shape or a trailing suffix of it (repeated over leading axes).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& order);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

// [M,K] x [K,N] or batched [B,M,K] x [B,K,N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// x [..., in] times w [in, out] plus b [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis);
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope);
// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);
// Inverted dropout. Identity when !training or p == 0. Throws ParameterError unless 0 <= p < 1.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, bool training, std::uint64_t seed);

// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);
// x [N, C, spatial...]; statistics per (n, c) over the spatial axes.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// ---------------------------------------------------------------------------
// Convolutions (cross-correlation, no kernel flip)

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}
inline std::int64_t conv_transposed_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                               std::int64_t pad) {
  return (in - 1) * stride - 2 * pad + k;
}

// x [N,C,X,Y,Z], w [F,C,k1,k2,k3], b [F] or undefined.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Int3 stride, Int3 pad);
// x [N,F,X,Y,Z], w [F,C,k1,k2,k3] (same layout as the conv it transposes), b [C] or undefined.
template <typename T>
Tensor<T> conv3d_transposed(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Int3 stride, Int3 pad);

}  // namespace vsg
