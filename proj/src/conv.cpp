#include "vsg/error.hpp"
#include "vsg/tensor.hpp"

namespace vsg {

namespace {

template <typename T>
using MapM = Eigen::Map<RowMatrix<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMatrix<T>>;

// Sliding-window geometry of a forward convolution from `in` to `out`.
struct ConvGeometry {
  std::int64_t channels;
  Int3 in, out, k, stride, pad;

  std::int64_t in_voxels() const { return in[0] * in[1] * in[2]; }
  std::int64_t out_voxels() const { return out[0] * out[1] * out[2]; }
  std::int64_t patch_len() const { return channels * k[0] * k[1] * k[2]; }
};

// col[(c,a,b,d), (i,j,l)] = src[c, i*s0-p0+a, j*s1-p1+b, l*s2-p2+d], zero outside.
template <typename T>
void im2col(const T* src, const ConvGeometry& g, T* col) {
  const auto [X, Y, Z] = g.in;
  const auto [Xo, Yo, Zo] = g.out;
  const std::int64_t S = g.out_voxels();
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t a = 0; a < g.k[0]; ++a)
      for (std::int64_t b = 0; b < g.k[1]; ++b)
        for (std::int64_t d = 0; d < g.k[2]; ++d, ++row) {
          T* dst = col + row * S;
          for (std::int64_t i = 0; i < Xo; ++i) {
            const std::int64_t xi = i * g.stride[0] - g.pad[0] + a;
            T* di = dst + i * Yo * Zo;
            if (xi < 0 || xi >= X) {
              std::fill(di, di + Yo * Zo, T(0));
              continue;
            }
            for (std::int64_t j = 0; j < Yo; ++j) {
              const std::int64_t yj = j * g.stride[1] - g.pad[1] + b;
              T* dj = di + j * Zo;
              if (yj < 0 || yj >= Y) {
                std::fill(dj, dj + Zo, T(0));
                continue;
              }
              const T* sj = src + ((c * X + xi) * Y + yj) * Z;
              for (std::int64_t l = 0; l < Zo; ++l) {
                const std::int64_t zl = l * g.stride[2] - g.pad[2] + d;
                dj[l] = (zl >= 0 && zl < Z) ? sj[zl] : T(0);
              }
            }
          }
        }
}

// Adjoint of im2col: scatter-adds columns back onto the source grid.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dst) {
  const auto [X, Y, Z] = g.in;
  const auto [Xo, Yo, Zo] = g.out;
  const std::int64_t S = g.out_voxels();
  std::int64_t row = 0;
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t a = 0; a < g.k[0]; ++a)
      for (std::int64_t b = 0; b < g.k[1]; ++b)
        for (std::int64_t d = 0; d < g.k[2]; ++d, ++row) {
          const T* src = col + row * S;
          for (std::int64_t i = 0; i < Xo; ++i) {
            const std::int64_t xi = i * g.stride[0] - g.pad[0] + a;
            if (xi < 0 || xi >= X) continue;
            for (std::int64_t j = 0; j < Yo; ++j) {
              const std::int64_t yj = j * g.stride[1] - g.pad[1] + b;
              if (yj < 0 || yj >= Y) continue;
              T* dj = dst + ((c * X + xi) * Y + yj) * Z;
              const T* sj = src + (i * Yo + j) * Zo;
              for (std::int64_t l = 0; l < Zo; ++l) {
                const std::int64_t zl = l * g.stride[2] - g.pad[2] + d;
                if (zl >= 0 && zl < Z) dj[zl] += sj[l];
              }
            }
          }
        }
}

void check_conv_args(const Shape& xs, const Shape& ws, Int3 stride, Int3 pad, const char* op) {
  if (xs.size() != 5) throw ShapeError(std::string(op) + ": input must be [N, C, X, Y, Z], got " + shape_str(xs));
  if (ws.size() != 5) throw ShapeError(std::string(op) + ": weight must be [F, C, k1, k2, k3], got " + shape_str(ws));
  for (int a = 0; a < 3; ++a) {
    if (stride[a] < 1) throw ShapeError(std::string(op) + ": stride components must be >= 1");
    if (pad[a] < 0) throw ShapeError(std::string(op) + ": padding must be >= 0");
  }
}

template <typename T>
void check_bias(const Tensor<T>& b, std::int64_t n, const char* op) {
  if (b.defined() && b.numel() != n)
    throw ShapeError(std::string(op) + ": bias must have " + std::to_string(n) + " entries");
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Int3 stride, Int3 pad) {
  check_conv_args(x.shape(), w.shape(), stride, pad, "conv3d");
  const std::int64_t N = x.dim(0), C = x.dim(1), F = w.dim(0);
  if (w.dim(1) != C)
    throw ShapeError("conv3d: weight expects " + std::to_string(w.dim(1)) + " input channels, got " + std::to_string(C));
  check_bias(b, F, "conv3d");
  ConvGeometry g{C, {x.dim(2), x.dim(3), x.dim(4)}, {}, {w.dim(2), w.dim(3), w.dim(4)}, stride, pad};
  for (int a = 0; a < 3; ++a) {
    if (g.in[a] + 2 * pad[a] < g.k[a]) throw ShapeError("conv3d: kernel larger than padded input");
    g.out[a] = conv_out_extent(g.in[a], g.k[a], stride[a], pad[a]);
  }
  const std::int64_t K = g.patch_len(), S = g.out_voxels(), Sin = g.in_voxels();
  ArrayX<T> out(N * F * S);
  RowMatrix<T> col(K, S);
  CMapM<T> wm(w.data(), F, K);
  for (std::int64_t n = 0; n < N; ++n) {
    im2col(x.data() + n * C * Sin, g, col.data());
    MapM<T> om(out.data() + n * F * S, F, S);
    om.noalias() = wm * col;
    if (b.defined()) om.colwise() += b.value().matrix();
  }
  auto xn = x.node(), wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  std::vector<Tensor<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>("conv3d", Shape{N, F, g.out[0], g.out[1], g.out[2]}, std::move(out), inputs,
                        [xn, wn, bn, g, N, F, K, S, Sin](const Node<T>& self) {
                          const std::int64_t C = g.channels;
                          RowMatrix<T> col(K, S);
                          RowMatrix<T> dcol;
                          if (wn->requires_grad) wn->ensure_grad();
                          if (xn->requires_grad) xn->ensure_grad();
                          CMapM<T> wm(wn->value.data(), F, K);
                          for (std::int64_t n = 0; n < N; ++n) {
                            CMapM<T> gm(self.grad.data() + n * F * S, F, S);
                            if (wn->requires_grad) {
                              im2col(xn->value.data() + n * C * Sin, g, col.data());
                              MapM<T>(wn->grad.data(), F, K).noalias() += gm * col.transpose();
                            }
                            if (xn->requires_grad) {
                              dcol.noalias() = wm.transpose() * gm;
                              col2im(dcol.data(), g, xn->grad.data() + n * C * Sin);
                            }
                            if (bn && bn->requires_grad) {
                              bn->ensure_grad();
                              bn->grad += gm.rowwise().sum().array();
                            }
                          }
                        });
}

template <typename T>
Tensor<T> conv3d_transposed(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, Int3 stride, Int3 pad) {
  check_conv_args(x.shape(), w.shape(), stride, pad, "conv3d_transposed");
  const std::int64_t N = x.dim(0), F = x.dim(1), C = w.dim(1);
  if (w.dim(0) != F)
    throw ShapeError("conv3d_transposed: weight expects " + std::to_string(w.dim(0)) + " input channels, got " +
                     std::to_string(F));
  check_bias(b, C, "conv3d_transposed");
  // Geometry of the forward conv this op is the adjoint of: it maps the
  // (larger) output grid back onto the input grid.
  ConvGeometry g{C, {}, {x.dim(2), x.dim(3), x.dim(4)}, {w.dim(2), w.dim(3), w.dim(4)}, stride, pad};
  for (int a = 0; a < 3; ++a) {
    g.in[a] = conv_transposed_out_extent(g.out[a], g.k[a], stride[a], pad[a]);
    if (g.in[a] < 1) throw ShapeError("conv3d_transposed: non-positive output extent");
  }
  const std::int64_t K = g.patch_len(), Sx = g.out_voxels(), So = g.in_voxels();
  ArrayX<T> out = ArrayX<T>::Zero(N * C * So);
  RowMatrix<T> col(K, Sx);
  CMapM<T> wm(w.data(), F, K);
  for (std::int64_t n = 0; n < N; ++n) {
    col.noalias() = wm.transpose() * CMapM<T>(x.data() + n * F * Sx, F, Sx);
    col2im(col.data(), g, out.data() + n * C * So);
    if (b.defined()) MapM<T>(out.data() + n * C * So, C, So).colwise() += b.value().matrix();
  }
  auto xn = x.node(), wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  std::vector<Tensor<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>("conv3d_transposed", Shape{N, C, g.in[0], g.in[1], g.in[2]}, std::move(out), inputs,
                        [xn, wn, bn, g, N, F, C, K, Sx, So](const Node<T>& self) {
                          RowMatrix<T> dcol(K, Sx);
                          if (wn->requires_grad) wn->ensure_grad();
                          if (xn->requires_grad) xn->ensure_grad();
                          CMapM<T> wm(wn->value.data(), F, K);
                          for (std::int64_t n = 0; n < N; ++n) {
                            const T* gout = self.grad.data() + n * C * So;
                            if (wn->requires_grad || xn->requires_grad) im2col(gout, g, dcol.data());
                            if (xn->requires_grad)
                              MapM<T>(xn->grad.data() + n * F * Sx, F, Sx).noalias() += wm * dcol;
                            if (wn->requires_grad)
                              MapM<T>(wn->grad.data(), F, K).noalias() +=
                                  CMapM<T>(xn->value.data() + n * F * Sx, F, Sx) * dcol.transpose();
                            if (bn && bn->requires_grad) {
                              bn->ensure_grad();
                              bn->grad += CMapM<T>(gout, C, So).rowwise().sum().array();
                            }
                          }
                        });
}

template Tensor<float> conv3d<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, Int3, Int3);
template Tensor<double> conv3d<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, Int3,
                                       Int3);
template Tensor<float> conv3d_transposed<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                                Int3, Int3);
template Tensor<double> conv3d_transposed<double>(const Tensor<double>&, const Tensor<double>&,
                                                  const Tensor<double>&, Int3, Int3);

}  // namespace vsg
