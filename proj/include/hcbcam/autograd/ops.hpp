#pragma once

// The op set the camera networks need: convolution, batch normalization,
// ReLU, max pooling, flatten, affine layers, softmax and the two losses,
// plus a few elementwise helpers. Layout is NCHW throughout.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "hcbcam/autograd/tensor.hpp"

namespace hcbcam::ag {

namespace kernel {

// y[0:n] += a * x[0:n]
template <class T>
inline void axpy(std::size_t n, T a, const T* __restrict x, T* __restrict y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// C[M,N] += A[M,Kd] * B[Kd,N], all row-major. Columns are processed in
// tiles so a block of C rows stays cache resident while B streams past.
template <class T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t Kd, const T* A, const T* B, T* C) {
  constexpr std::size_t kTile = 256;
  for (std::size_t j0 = 0; j0 < N; j0 += kTile) {
    const std::size_t nj = std::min(kTile, N - j0);
    std::size_t i = 0;
    for (; i + 4 <= M; i += 4) {
      T* __restrict c0 = C + i * N + j0;
      T* __restrict c1 = c0 + N;
      T* __restrict c2 = c1 + N;
      T* __restrict c3 = c2 + N;
      for (std::size_t k = 0; k < Kd; ++k) {
        const T a0 = A[i * Kd + k], a1 = A[(i + 1) * Kd + k], a2 = A[(i + 2) * Kd + k], a3 = A[(i + 3) * Kd + k];
        const T* __restrict b = B + k * N + j0;
        for (std::size_t j = 0; j < nj; ++j) {
          const T bj = b[j];
          c0[j] += a0 * bj;
          c1[j] += a1 * bj;
          c2[j] += a2 * bj;
          c3[j] += a3 * bj;
        }
      }
    }
    for (; i < M; ++i)
      for (std::size_t k = 0; k < Kd; ++k) axpy(nj, A[i * Kd + k], B + k * N + j0, C + i * N + j0);
  }
}

// Dot product with 16 independent partial sums, combined in a fixed order.
template <class T>
inline T dot(std::size_t n, const T* __restrict a, const T* __restrict b) {
  T acc[16] = {};
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16)
    for (std::size_t l = 0; l < 16; ++l) acc[l] += a[i + l] * b[i + l];
  T s = T(0);
  for (; i < n; ++i) s += a[i] * b[i];
  for (std::size_t l = 0; l < 16; ++l) s += acc[l];
  return s;
}

// C[M,N] += A[M,Kd] * B[N,Kd]^T
template <class T>
void gemm_abt_acc(std::size_t M, std::size_t N, std::size_t Kd, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) C[i * N + j] += dot(Kd, A + i * Kd, B + j * Kd);
}

struct ConvGeom {
  int C, H, W, kh, kw, stride, pad, Ho, Wo;
  std::size_t K() const { return static_cast<std::size_t>(C) * kh * kw; }
  std::size_t P() const { return static_cast<std::size_t>(Ho) * Wo; }
};

// col[k][p], k = (c*kh + i)*kw + j, p = oh*Wo + ow
template <class T>
void im2col(const ConvGeom& g, const T* x, T* col) {
  const std::size_t P = g.P();
  for (int c = 0; c < g.C; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        T* row = col + ((static_cast<std::size_t>(c) * g.kh + i) * g.kw + j) * P;
        for (int oh = 0; oh < g.Ho; ++oh) {
          const int ih = oh * g.stride - g.pad + i;
          T* dst = row + static_cast<std::size_t>(oh) * g.Wo;
          if (ih < 0 || ih >= g.H) {
            std::fill(dst, dst + g.Wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * g.H + ih) * g.W;
          for (int ow = 0; ow < g.Wo; ++ow) {
            const int iw = ow * g.stride - g.pad + j;
            dst[ow] = (iw >= 0 && iw < g.W) ? src[iw] : T(0);
          }
        }
      }
}

// colT[p][k]
template <class T>
void im2col_transposed(const ConvGeom& g, const T* x, T* colT) {
  const std::size_t K = g.K();
  for (int oh = 0; oh < g.Ho; ++oh)
    for (int ow = 0; ow < g.Wo; ++ow) {
      T* dst = colT + (static_cast<std::size_t>(oh) * g.Wo + ow) * K;
      std::size_t k = 0;
      for (int c = 0; c < g.C; ++c)
        for (int i = 0; i < g.kh; ++i) {
          const int ih = oh * g.stride - g.pad + i;
          for (int j = 0; j < g.kw; ++j, ++k) {
            const int iw = ow * g.stride - g.pad + j;
            dst[k] = (ih >= 0 && ih < g.H && iw >= 0 && iw < g.W)
                         ? x[(static_cast<std::size_t>(c) * g.H + ih) * g.W + iw]
                         : T(0);
          }
        }
    }
}

template <class T>
void col2im_add(const ConvGeom& g, const T* col, T* dx) {
  const std::size_t P = g.P();
  for (int c = 0; c < g.C; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        const T* row = col + ((static_cast<std::size_t>(c) * g.kh + i) * g.kw + j) * P;
        for (int oh = 0; oh < g.Ho; ++oh) {
          const int ih = oh * g.stride - g.pad + i;
          if (ih < 0 || ih >= g.H) continue;
          T* dst = dx + (static_cast<std::size_t>(c) * g.H + ih) * g.W;
          const T* src = row + static_cast<std::size_t>(oh) * g.Wo;
          for (int ow = 0; ow < g.Wo; ++ow) {
            const int iw = ow * g.stride - g.pad + j;
            if (iw >= 0 && iw < g.W) dst[iw] += src[ow];
          }
        }
      }
}

}  // namespace kernel

inline int conv_out_extent(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }
inline int pool_out_extent(int in, int k, int stride) { return (in - k) / stride + 1; }

/// Cross-correlation of x (N,C,H,W) with w (F,C,kh,kw) plus bias b (F).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride = 1, int padding = 0) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects 4-d input and weight");
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " + shape_str(x.shape()));
  if (b.numel() != static_cast<std::size_t>(F)) throw ShapeError("conv2d: bias size mismatch");
  if (kh > H + 2 * padding || kw > W + 2 * padding) throw ShapeError("conv2d: kernel larger than padded input");
  const kernel::ConvGeom g{C, H, W, kh, kw, stride, padding, conv_out_extent(H, kh, stride, padding),
                           conv_out_extent(W, kw, stride, padding)};
  const std::size_t K = g.K(), P = g.P();
  const std::size_t in_sz = static_cast<std::size_t>(C) * H * W, out_sz = static_cast<std::size_t>(F) * P;

  std::vector<T> out(static_cast<std::size_t>(N) * out_sz);
  std::vector<T> col(K * P);
  const T* wv = w.values().data();
  const T* bv = b.values().data();
  for (int n = 0; n < N; ++n) {
    kernel::im2col(g, x.values().data() + n * in_sz, col.data());
    T* o = out.data() + n * out_sz;
    for (int f = 0; f < F; ++f) std::fill(o + static_cast<std::size_t>(f) * P, o + (f + 1) * P, bv[f]);
    kernel::gemm_acc<T>(F, P, K, wv, col.data(), o);
  }

  auto xd = x.impl(), wd = w.impl(), bd = b.impl();
  return make_result<T>(
      "conv2d", {N, F, g.Ho, g.Wo}, std::move(out), {xd, wd, bd}, [=](TensorData<T>& o) {
        const T* dy = o.grad.data();
        if (bd->requires_grad) {
          auto& db = bd->grad_buffer();
          for (int n = 0; n < N; ++n)
            for (int f = 0; f < F; ++f) {
              const T* r = dy + n * out_sz + static_cast<std::size_t>(f) * P;
              T s = T(0);
              for (std::size_t p = 0; p < P; ++p) s += r[p];
              db[static_cast<std::size_t>(f)] += s;
            }
        }
        if (wd->requires_grad) {
          auto& dw = wd->grad_buffer();
          std::vector<T> col(K * P);
          for (int n = 0; n < N; ++n) {
            kernel::im2col(g, xd->value.data() + n * in_sz, col.data());
            kernel::gemm_abt_acc<T>(F, K, P, dy + n * out_sz, col.data(), dw.data());
          }
        }
        if (xd->requires_grad) {
          auto& dx = xd->grad_buffer();
          std::vector<T> dcol(K * P), wT(K * static_cast<std::size_t>(F));
          for (int f = 0; f < F; ++f)
            for (std::size_t k = 0; k < K; ++k) wT[k * F + f] = wd->value[static_cast<std::size_t>(f) * K + k];
          for (int n = 0; n < N; ++n) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            kernel::gemm_acc<T>(K, P, F, wT.data(), dy + n * out_sz, dcol.data());
            kernel::col2im_add(g, dcol.data(), dx.data() + n * in_sz);
          }
        }
      });
}

/// Running statistics of a batch-norm layer (not trainable).
template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormState(int channels = 0)
      : running_mean(static_cast<std::size_t>(channels), T(0)), running_var(static_cast<std::size_t>(channels), T(1)) {}
};

enum class Mode { Train, Eval };

/// Per-channel normalization over (N, H, W). Train mode uses batch statistics
/// and updates the running estimates (unbiased variance); eval mode uses the
/// running estimates.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      Mode mode, double momentum = 0.1, double eps = 1e-5) {
  if (x.rank() != 4) throw ShapeError("batchnorm2d expects 4-d input");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t HW = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (gamma.numel() != static_cast<std::size_t>(C) || beta.numel() != static_cast<std::size_t>(C) ||
      state.running_mean.size() != static_cast<std::size_t>(C))
    throw ShapeError("batchnorm2d: parameter size mismatch");
  if (mode == Mode::Train && N < 2) throw ShapeError("batchnorm2d: train mode needs a batch of at least 2");

  const std::size_t M = static_cast<std::size_t>(N) * HW;
  const T* xv = x.values().data();
  std::vector<T> xhat(x.numel()), out(x.numel());
  std::vector<T> invstd(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double s = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = xv + (static_cast<std::size_t>(n) * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      mean = s / static_cast<double>(M);
      double ss = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* p = xv + (static_cast<std::size_t>(n) * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = p[i] - mean;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(M);
      auto& rm = state.running_mean[static_cast<std::size_t>(c)];
      auto& rv = state.running_var[static_cast<std::size_t>(c)];
      rm = static_cast<T>((1.0 - momentum) * rm + momentum * mean);
      rv = static_cast<T>((1.0 - momentum) * rv + momentum * var * static_cast<double>(M) / static_cast<double>(M - 1));
    } else {
      mean = state.running_mean[static_cast<std::size_t>(c)];
      var = state.running_var[static_cast<std::size_t>(c)];
    }
    const double is = 1.0 / std::sqrt(var + eps);
    invstd[static_cast<std::size_t>(c)] = static_cast<T>(is);
    const T g = gamma.values()[static_cast<std::size_t>(c)], bt = beta.values()[static_cast<std::size_t>(c)];
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) {
        const T h = static_cast<T>((xv[off + i] - mean) * is);
        xhat[off + i] = h;
        out[off + i] = g * h + bt;
      }
    }
  }

  auto xd = x.impl(), gd = gamma.impl(), bd = beta.impl();
  auto saved = std::make_shared<std::vector<T>>(std::move(xhat));
  return make_result<T>(
      "batchnorm2d", x.shape(), std::move(out), {xd, gd, bd},
      [=, invstd = std::move(invstd)](TensorData<T>& o) {
        const T* dy = o.grad.data();
        const auto& xh = *saved;
        for (int c = 0; c < C; ++c) {
          double sdy = 0.0, sdyx = 0.0;
          for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
              sdy += dy[off + i];
              sdyx += static_cast<double>(dy[off + i]) * xh[off + i];
            }
          }
          if (gd->requires_grad) gd->grad_buffer()[static_cast<std::size_t>(c)] += static_cast<T>(sdyx);
          if (bd->requires_grad) bd->grad_buffer()[static_cast<std::size_t>(c)] += static_cast<T>(sdy);
          if (!xd->requires_grad) continue;
          auto& dx = xd->grad_buffer();
          const double g = gd->value[static_cast<std::size_t>(c)];
          const double is = invstd[static_cast<std::size_t>(c)];
          if (mode == Mode::Train) {
            // dx = g*is/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
            const double scale = g * is / static_cast<double>(M);
            for (int n = 0; n < N; ++n) {
              const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i)
                dx[off + i] += static_cast<T>(
                    scale * (static_cast<double>(M) * dy[off + i] - sdy - static_cast<double>(xh[off + i]) * sdyx));
            }
          } else {
            for (int n = 0; n < N; ++n) {
              const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
              for (std::size_t i = 0; i < HW; ++i) dx[off + i] += static_cast<T>(g * is * dy[off + i]);
            }
          }
        }
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  auto xd = x.impl();
  return make_result<T>("relu", x.shape(), std::move(out), {xd}, [xd](TensorData<T>& o) {
    auto& dx = xd->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (xd->value[i] > T(0)) dx[i] += o.grad[i];
  });
}

/// Max pooling without padding. Gradient goes to the first maximum in
/// row-major window order.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, int kernel_size, int stride) {
  if (x.rank() != 4) throw ShapeError("maxpool2d expects 4-d input");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kernel_size < 1 || stride < 1 || kernel_size > H || kernel_size > W)
    throw ShapeError("maxpool2d: window does not fit input " + shape_str(x.shape()));
  const int Ho = pool_out_extent(H, kernel_size, stride), Wo = pool_out_extent(W, kernel_size, stride);
  const std::size_t planes = static_cast<std::size_t>(N) * C;
  std::vector<T> out(planes * Ho * Wo);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(out.size());
  const T* xv = x.values().data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = xv + pl * H * W;
    for (int oh = 0; oh < Ho; ++oh)
      for (int ow = 0; ow < Wo; ++ow) {
        std::size_t best = static_cast<std::size_t>(oh * stride) * W + static_cast<std::size_t>(ow * stride);
        for (int i = 0; i < kernel_size; ++i)
          for (int j = 0; j < kernel_size; ++j) {
            const std::size_t idx = static_cast<std::size_t>(oh * stride + i) * W + static_cast<std::size_t>(ow * stride + j);
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (pl * Ho + oh) * Wo + ow;
        out[o] = src[best];
        (*arg)[o] = static_cast<std::uint32_t>(best);
      }
  }
  auto xd = x.impl();
  const std::size_t in_plane = static_cast<std::size_t>(H) * W, out_plane = static_cast<std::size_t>(Ho) * Wo;
  return make_result<T>("maxpool2d", {N, C, Ho, Wo}, std::move(out), {xd}, [=](TensorData<T>& o) {
    auto& dx = xd->grad_buffer();
    for (std::size_t pl = 0; pl < planes; ++pl)
      for (std::size_t i = 0; i < out_plane; ++i)
        dx[pl * in_plane + (*arg)[pl * out_plane + i]] += o.grad[pl * out_plane + i];
  });
}

/// (N, C, H, W) -> (N, C*H*W), channel-major within a sample.
template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("flatten expects a batch dimension");
  const int N = x.dim(0);
  const int D = static_cast<int>(x.numel() / static_cast<std::size_t>(std::max(N, 1)));
  auto xd = x.impl();
  return make_result<T>("flatten", {N, D}, x.storage(), {xd}, [xd](TensorData<T>& o) {
    auto& dx = xd->grad_buffer();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += o.grad[i];
  });
}

/// a (N, D), w (O, D), b (O) -> (N, O)
template <class T>
Tensor<T> linear(const Tensor<T>& a, const Tensor<T>& w, const Tensor<T>& b) {
  if (a.rank() != 2 || w.rank() != 2) throw ShapeError("linear expects 2-d input and weight");
  const int N = a.dim(0), D = a.dim(1), O = w.dim(0);
  if (w.dim(1) != D)
    throw ShapeError("linear: weight " + shape_str(w.shape()) + " does not match input " + shape_str(a.shape()));
  if (b.numel() != static_cast<std::size_t>(O)) throw ShapeError("linear: bias size mismatch");
  std::vector<T> out(static_cast<std::size_t>(N) * O);
  const T* av = a.values().data();
  const T* wv = w.values().data();
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) {
      T s = b.values()[static_cast<std::size_t>(o)];
      const T* ar = av + static_cast<std::size_t>(n) * D;
      const T* wr = wv + static_cast<std::size_t>(o) * D;
      for (int d = 0; d < D; ++d) s += wr[d] * ar[d];
      out[static_cast<std::size_t>(n) * O + o] = s;
    }
  auto ad = a.impl(), wd = w.impl(), bd = b.impl();
  return make_result<T>("linear", {N, O}, std::move(out), {ad, wd, bd}, [=](TensorData<T>& res) {
    const T* dy = res.grad.data();
    const auto Du = static_cast<std::size_t>(D);
    if (bd->requires_grad) {
      auto& db = bd->grad_buffer();
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) db[static_cast<std::size_t>(o)] += dy[static_cast<std::size_t>(n) * O + o];
    }
    if (wd->requires_grad) {
      auto& dw = wd->grad_buffer();
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
          kernel::axpy(Du, dy[static_cast<std::size_t>(n) * O + o], ad->value.data() + n * Du, dw.data() + o * Du);
    }
    if (ad->requires_grad) {
      auto& da = ad->grad_buffer();
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
          kernel::axpy(Du, dy[static_cast<std::size_t>(n) * O + o], wd->value.data() + o * Du, da.data() + n * Du);
    }
  });
}

/// Joins (N, k_j) tensors along the column axis.
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to join");
  const int N = parts.front().dim(0);
  std::vector<int> widths;
  int total = 0;
  std::vector<std::shared_ptr<TensorData<T>>> inputs;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != N) throw ShapeError("concat_cols: row count mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
    inputs.push_back(p.impl());
  }
  std::vector<T> out(static_cast<std::size_t>(N) * total);
  for (int n = 0; n < N; ++n) {
    int col = 0;
    for (std::size_t j = 0; j < parts.size(); ++j) {
      for (int c = 0; c < widths[j]; ++c)
        out[static_cast<std::size_t>(n) * total + col + c] = parts[j].values()[static_cast<std::size_t>(n) * widths[j] + c];
      col += widths[j];
    }
  }
  return make_result<T>("concat_cols", {N, total}, std::move(out), inputs, [=](TensorData<T>& o) {
    int col = 0;
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      if (inputs[j]->requires_grad) {
        auto& g = inputs[j]->grad_buffer();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < widths[j]; ++c)
            g[static_cast<std::size_t>(n) * widths[j] + c] += o.grad[static_cast<std::size_t>(n) * total + col + c];
      }
      col += widths[j];
    }
  });
}

/// Row-wise softmax of (N, K) logits (or a single length-K vector), with the
/// row maximum subtracted before exponentiation.
template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 1 && logits.rank() != 2) throw ShapeError("softmax expects 1-d or 2-d logits");
  const int N = logits.rank() == 1 ? 1 : logits.dim(0);
  const int K = logits.rank() == 1 ? logits.dim(0) : logits.dim(1);
  if (K < 1) throw ShapeError("softmax over an empty axis");
  std::vector<T> out(logits.numel());
  for (int n = 0; n < N; ++n) {
    const T* z = logits.values().data() + static_cast<std::size_t>(n) * K;
    T* p = out.data() + static_cast<std::size_t>(n) * K;
    const T mx = *std::max_element(z, z + K);
    T s = T(0);
    for (int i = 0; i < K; ++i) s += (p[i] = std::exp(z[i] - mx));
    for (int i = 0; i < K; ++i) p[i] /= s;
  }
  auto zd = logits.impl();
  auto probs = std::make_shared<std::vector<T>>(out);
  return make_result<T>("softmax", logits.shape(), std::move(out), {zd}, [=](TensorData<T>& o) {
    auto& dz = zd->grad_buffer();
    for (int n = 0; n < N; ++n) {
      const std::size_t off = static_cast<std::size_t>(n) * K;
      T dot = T(0);
      for (int i = 0; i < K; ++i) dot += (*probs)[off + i] * o.grad[off + i];
      for (int i = 0; i < K; ++i) dz[off + i] += (*probs)[off + i] * (o.grad[off + i] - dot);
    }
  });
}

inline constexpr double kProbClamp = 1e-7;

/// Weighted sum over rows of the mean binary cross entropy between softmax
/// probabilities and one-hot targets:
///   sum_n w_n * ( -1/K sum_i [l_i log p_i + (1 - l_i) log(1 - p_i)] ),
/// probabilities clamped to [1e-7, 1 - 1e-7] first.
template <class T>
Tensor<T> bce_over_softmax(const Tensor<T>& probs, const std::vector<int>& labels, const std::vector<T>& row_weights) {
  const int N = probs.rank() == 1 ? 1 : probs.dim(0);
  const int K = probs.rank() == 1 ? probs.dim(0) : probs.dim(1);
  if (labels.size() != static_cast<std::size_t>(N) || row_weights.size() != static_cast<std::size_t>(N))
    throw ShapeError("bce_over_softmax: label/weight count mismatch");
  const T lo = static_cast<T>(kProbClamp), hi = static_cast<T>(1.0 - kProbClamp);
  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    if (labels[static_cast<std::size_t>(n)] < 0 || labels[static_cast<std::size_t>(n)] >= K)
      throw ShapeError("bce_over_softmax: label out of range");
    if (row_weights[static_cast<std::size_t>(n)] == T(0)) continue;
    double s = 0.0;
    for (int i = 0; i < K; ++i) {
      const T p = std::clamp(probs.values()[static_cast<std::size_t>(n) * K + i], lo, hi);
      s += (i == labels[static_cast<std::size_t>(n)]) ? std::log(static_cast<double>(p))
                                                      : std::log(1.0 - static_cast<double>(p));
    }
    loss += static_cast<double>(row_weights[static_cast<std::size_t>(n)]) * (-s / K);
  }
  auto pd = probs.impl();
  return make_result<T>("bce_over_softmax", {}, {static_cast<T>(loss)}, {pd}, [=](TensorData<T>& o) {
    auto& dp = pd->grad_buffer();
    const T up = o.grad[0];
    for (int n = 0; n < N; ++n) {
      const T w = row_weights[static_cast<std::size_t>(n)];
      if (w == T(0)) continue;
      for (int i = 0; i < K; ++i) {
        const std::size_t idx = static_cast<std::size_t>(n) * K + i;
        const T p = pd->value[idx];
        if (p < lo || p > hi) continue;  // clamp is flat outside its range
        const T d = (i == labels[static_cast<std::size_t>(n)]) ? T(1) / p : -T(1) / (T(1) - p);
        dp[idx] += up * w * (-d / static_cast<T>(K));
      }
    }
  });
}

/// Single-sample form with an explicit one-hot target.
template <class T>
Tensor<T> bce_over_softmax(const Tensor<T>& probs, const std::vector<T>& one_hot) {
  if (one_hot.size() != probs.numel()) throw ShapeError("bce_over_softmax: target size mismatch");
  int label = -1;
  for (std::size_t i = 0; i < one_hot.size(); ++i) {
    if (one_hot[i] == T(1)) {
      if (label >= 0) throw ShapeError("bce_over_softmax: target is not one-hot");
      label = static_cast<int>(i);
    } else if (one_hot[i] != T(0)) {
      throw ShapeError("bce_over_softmax: target is not one-hot");
    }
  }
  if (label < 0) throw ShapeError("bce_over_softmax: target is not one-hot");
  return bce_over_softmax(probs, std::vector<int>{label}, std::vector<T>{T(1)});
}

/// Weighted categorical cross entropy on softmax probabilities (ablation switch).
template <class T>
Tensor<T> ce_over_softmax(const Tensor<T>& probs, const std::vector<int>& labels, const std::vector<T>& row_weights) {
  const int N = probs.rank() == 1 ? 1 : probs.dim(0);
  const int K = probs.rank() == 1 ? probs.dim(0) : probs.dim(1);
  if (labels.size() != static_cast<std::size_t>(N) || row_weights.size() != static_cast<std::size_t>(N))
    throw ShapeError("ce_over_softmax: label/weight count mismatch");
  const T lo = static_cast<T>(kProbClamp);
  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    const int l = labels[static_cast<std::size_t>(n)];
    if (l < 0 || l >= K) throw ShapeError("ce_over_softmax: label out of range");
    const T p = std::max(probs.values()[static_cast<std::size_t>(n) * K + l], lo);
    loss -= static_cast<double>(row_weights[static_cast<std::size_t>(n)]) * std::log(static_cast<double>(p));
  }
  auto pd = probs.impl();
  return make_result<T>("ce_over_softmax", {}, {static_cast<T>(loss)}, {pd}, [=](TensorData<T>& o) {
    auto& dp = pd->grad_buffer();
    for (int n = 0; n < N; ++n) {
      const std::size_t idx = static_cast<std::size_t>(n) * K + labels[static_cast<std::size_t>(n)];
      const T p = pd->value[idx];
      if (p < lo) continue;
      dp[idx] -= o.grad[0] * row_weights[static_cast<std::size_t>(n)] / p;
    }
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto ad = a.impl(), bd = b.impl();
  return make_result<T>("add", a.shape(), std::move(out), {ad, bd}, [ad, bd](TensorData<T>& o) {
    for (auto* d : {ad.get(), bd.get()})
      if (d->requires_grad) {
        auto& g = d->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto ad = a.impl(), bd = b.impl();
  return make_result<T>("mul", a.shape(), std::move(out), {ad, bd}, [ad, bd](TensorData<T>& o) {
    if (ad->requires_grad) {
      auto& g = ad->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bd->value[i];
    }
    if (bd->requires_grad) {
      auto& g = bd->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ad->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a.values()[i];
  auto ad = a.impl();
  return make_result<T>("scale", a.shape(), std::move(out), {ad}, [ad, factor](TensorData<T>& o) {
    auto& g = ad->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * o.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  auto ad = a.impl();
  return make_result<T>("sum", {}, {s}, {ad}, [ad](TensorData<T>& o) {
    auto& g = ad->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

}  // namespace hcbcam::ag
