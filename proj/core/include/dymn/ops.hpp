#pragma once

// Forward and backward kernels on plain tensors. Everything here is a pure
// function of its inputs; the autodiff tape (tape.hpp) wraps these.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <type_traits>
#include <vector>

#include "dymn/tensor.hpp"

namespace dymn {

enum class ActKind { relu, hardswish, sigmoid };
enum class Axis { frequency, time };

struct Conv2dGeom {
  int stride_f = 1, stride_t = 1;
  int pad_f = 0, pad_t = 0;
  int groups = 1;
};

inline int conv_out_extent(int in, int pad, int k, int stride) {
  return (in + 2 * pad - k) / stride + 1;
}

// Floor division for possibly negative numerators (C++ '/' truncates to zero,
// which over-extends kernel tap ranges when the kernel exceeds the input).
inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

template <typename T>
void check_conv_args(const TensorT<T>& x, const TensorT<T>& w, const Conv2dGeom& g) {
  check_shape(x.rank() == 4, "conv2d: input must be rank 4, got " + shape_str(x.shape));
  check_shape(w.rank() == 4, "conv2d: weight must be rank 4, got " + shape_str(w.shape));
  const int c_in = x.dim(1), c_out = w.dim(0);
  if (g.groups < 1 || c_in % g.groups != 0 || c_out % g.groups != 0)
    throw ConfigError("conv2d: groups=" + std::to_string(g.groups) + " must divide C_in=" +
                      std::to_string(c_in) + " and C_out=" + std::to_string(c_out));
  check_shape(w.dim(1) == c_in / g.groups,
              "conv2d: weight " + shape_str(w.shape) + " inconsistent with C_in=" +
                  std::to_string(c_in) + " groups=" + std::to_string(g.groups));
  if (g.stride_f < 1 || g.stride_t < 1) throw ConfigError("conv2d: strides must be positive");
  check_shape(x.dim(2) + 2 * g.pad_f >= w.dim(2) && x.dim(3) + 2 * g.pad_t >= w.dim(3),
              "conv2d: padded input " + shape_str(x.shape) + " smaller than kernel " +
                  shape_str(w.shape));
}

// Cross-correlation (no kernel flip). Weight layout C_out x C_in/groups x kF x kT.
template <typename T>
TensorT<T> conv2d_fwd(const TensorT<T>& x, const TensorT<T>& w,
                      const std::type_identity_t<TensorT<T>>* bias,
                      const Conv2dGeom& g) {
  check_conv_args(x, w, g);
  const int B = x.dim(0), C_in = x.dim(1), F = x.dim(2), L = x.dim(3);
  const int C_out = w.dim(0), Cg = w.dim(1), kF = w.dim(2), kT = w.dim(3);
  const int Fo = conv_out_extent(F, g.pad_f, kF, g.stride_f);
  const int To = conv_out_extent(L, g.pad_t, kT, g.stride_t);
  const int cig = C_in / g.groups, cog = C_out / g.groups;
  if (bias) check_shape(bias->rank() == 1 && bias->dim(0) == C_out, "conv2d: bad bias shape");

  // Accumulate each output plane in double so float32 outputs carry a single
  // rounding, keeping the 1e-6 relative contract against the loop oracle.
  TensorT<T> y({B, C_out, Fo, To});
  std::vector<double> acc(static_cast<std::size_t>(Fo) * To);
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < C_out; ++co) {
      const int grp = co / cog;
      std::fill(acc.begin(), acc.end(), bias ? static_cast<double>((*bias)[co]) : 0.0);
      for (int ci = 0; ci < cig; ++ci) {
        const T* xp = &x.at4(b, grp * cig + ci, 0, 0);
        for (int kf = 0; kf < kF; ++kf) {
          for (int kt = 0; kt < kT; ++kt) {
            const double wv = w.at4(co, ci, kf, kt);
            if (wv == 0.0) continue;
            // valid output range so that the tap stays inside the input
            const int fo_lo = std::max(0, ((g.pad_f - kf) + g.stride_f - 1) / g.stride_f);
            const int fo_hi = std::min(Fo - 1, floor_div(F - 1 - kf + g.pad_f, g.stride_f));
            const int to_lo = std::max(0, ((g.pad_t - kt) + g.stride_t - 1) / g.stride_t);
            const int to_hi = std::min(To - 1, floor_div(L - 1 - kt + g.pad_t, g.stride_t));
            for (int fo = fo_lo; fo <= fo_hi; ++fo) {
              const int fi = fo * g.stride_f - g.pad_f + kf;
              const T* xrow = xp + static_cast<std::size_t>(fi) * L;
              double* arow = acc.data() + static_cast<std::size_t>(fo) * To;
              for (int to = to_lo; to <= to_hi; ++to)
                arow[to] += wv * xrow[to * g.stride_t - g.pad_t + kt];
            }
          }
        }
      }
      T* yrow = &y.at4(b, co, 0, 0);
      for (int i = 0; i < Fo * To; ++i) yrow[i] = static_cast<T>(acc[i]);
    }
  }
  return y;
}

template <typename T>
void conv2d_bwd(const TensorT<T>& x, const TensorT<T>& w, const Conv2dGeom& g,
                const TensorT<T>& gy, std::type_identity_t<TensorT<T>>* gx,
                std::type_identity_t<TensorT<T>>* gw, std::type_identity_t<TensorT<T>>* gb) {
  const int B = x.dim(0), C_in = x.dim(1), F = x.dim(2), L = x.dim(3);
  const int C_out = w.dim(0), kF = w.dim(2), kT = w.dim(3);
  const int Fo = gy.dim(2), To = gy.dim(3);
  const int cig = C_in / g.groups, cog = C_out / g.groups;

  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < C_out; ++co) {
      const int grp = co / cog;
      if (gb) {
        T acc = 0;
        const T* gyrow = &gy.at4(b, co, 0, 0);
        for (int i = 0; i < Fo * To; ++i) acc += gyrow[i];
        (*gb)[co] += acc;
      }
      for (int ci = 0; ci < cig; ++ci) {
        const int xc = grp * cig + ci;
        for (int kf = 0; kf < kF; ++kf) {
          for (int kt = 0; kt < kT; ++kt) {
            const int fo_lo = std::max(0, ((g.pad_f - kf) + g.stride_f - 1) / g.stride_f);
            const int fo_hi = std::min(Fo - 1, floor_div(F - 1 - kf + g.pad_f, g.stride_f));
            const int to_lo = std::max(0, ((g.pad_t - kt) + g.stride_t - 1) / g.stride_t);
            const int to_hi = std::min(To - 1, floor_div(L - 1 - kt + g.pad_t, g.stride_t));
            const T wv = w.at4(co, ci, kf, kt);
            T wacc = 0;
            for (int fo = fo_lo; fo <= fo_hi; ++fo) {
              const int fi = fo * g.stride_f - g.pad_f + kf;
              const T* gyrow = &gy.at4(b, co, fo, 0);
              const T* xrow = &x.at4(b, xc, fi, 0);
              T* gxrow = gx ? &gx->at4(b, xc, fi, 0) : nullptr;
              for (int to = to_lo; to <= to_hi; ++to) {
                const int ti = to * g.stride_t - g.pad_t + kt;
                const T gv = gyrow[to];
                if (gw) wacc += gv * xrow[ti];
                if (gxrow) gxrow[ti] += wv * gv;
              }
            }
            if (gw) gw->at4(co, ci, kf, kt) += wacc;
          }
        }
      }
    }
  }
}

// Inference-form batch norm with caller-supplied statistics (per-channel vectors).
template <typename T>
TensorT<T> batch_norm_affine(const TensorT<T>& x, const TensorT<T>& mean, const TensorT<T>& var,
                             const TensorT<T>& gamma, const TensorT<T>& beta, double eps) {
  check_shape(x.rank() >= 2, "batch_norm: input rank must be >= 2");
  const int C = x.dim(1);
  check_shape(mean.size() == C && var.size() == C && gamma.size() == C && beta.size() == C,
              "batch_norm: per-channel vectors must have length C=" + std::to_string(C));
  for (std::int64_t c = 0; c < C; ++c)
    if (var[c] < T(0)) throw NumericError("batch_norm: negative variance at channel " +
                                          std::to_string(c));
  TensorT<T> y(x.shape);
  const std::int64_t inner = x.size() / (x.dim(0) * C);
  for (int b = 0; b < x.dim(0); ++b)
    for (int c = 0; c < C; ++c) {
      const T scale = gamma[c] / static_cast<T>(std::sqrt(static_cast<double>(var[c]) + eps));
      const T shift = beta[c] - mean[c] * scale;
      const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) y[base + i] = x[base + i] * scale + shift;
    }
  return y;
}

// Per-channel batch statistics over (B, spatial...) of a rank>=2 tensor.
template <typename T>
void batch_stats(const TensorT<T>& x, TensorT<T>& mean, TensorT<T>& var) {
  const int B = x.dim(0), C = x.dim(1);
  const std::int64_t inner = x.size() / (static_cast<std::int64_t>(B) * C);
  const std::int64_t n = static_cast<std::int64_t>(B) * inner;
  mean = TensorT<T>({C});
  var = TensorT<T>({C});
  for (int c = 0; c < C; ++c) {
    double acc = 0;
    for (int b = 0; b < B; ++b) {
      const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) acc += x[base + i];
    }
    const double mu = acc / static_cast<double>(n);
    double vacc = 0;
    for (int b = 0; b < B; ++b) {
      const std::int64_t base = (static_cast<std::int64_t>(b) * C + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) {
        const double d = x[base + i] - mu;
        vacc += d * d;
      }
    }
    mean[c] = static_cast<T>(mu);
    var[c] = static_cast<T>(vacc / static_cast<double>(n));
  }
}

template <typename T>
T act_eval(ActKind k, T x) {
  switch (k) {
    case ActKind::relu:
      return std::max(x, T(0));
    case ActKind::hardswish: {
      const T c = std::clamp(x + T(3), T(0), T(6));
      return x * c / T(6);
    }
    case ActKind::sigmoid: {
      if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
      const T e = std::exp(x);
      return e / (T(1) + e);
    }
  }
  return T(0);
}

template <typename T>
T act_grad(ActKind k, T x) {
  switch (k) {
    case ActKind::relu:
      return x > T(0) ? T(1) : T(0);
    case ActKind::hardswish:
      if (x <= T(-3)) return T(0);
      if (x >= T(3)) return T(1);
      return (T(2) * x + T(3)) / T(6);
    case ActKind::sigmoid: {
      const T s = act_eval(ActKind::sigmoid, x);
      return s * (T(1) - s);
    }
  }
  return T(0);
}

template <typename T>
TensorT<T> activation_fwd(const TensorT<T>& x, ActKind k) {
  TensorT<T> y(x.shape);
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = act_eval(k, x[i]);
  return y;
}

// Mean pooling; truncated windows divide by the actual element count.
struct Pool2dGeom {
  int k_f = 1, k_t = 1;
  int stride_f = 1, stride_t = 1;
  int pad_f = 0, pad_t = 0;
};

template <typename T>
TensorT<T> avg_pool2d_fwd(const TensorT<T>& x, const Pool2dGeom& g) {
  check_shape(x.rank() == 4, "avg_pool2d: input must be rank 4");
  const int B = x.dim(0), C = x.dim(1), F = x.dim(2), L = x.dim(3);
  const int Fo = conv_out_extent(F, g.pad_f, g.k_f, g.stride_f);
  const int To = conv_out_extent(L, g.pad_t, g.k_t, g.stride_t);
  TensorT<T> y({B, C, Fo, To});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int fo = 0; fo < Fo; ++fo)
        for (int to = 0; to < To; ++to) {
          const int f0 = std::max(0, fo * g.stride_f - g.pad_f);
          const int f1 = std::min(F, fo * g.stride_f - g.pad_f + g.k_f);
          const int t0 = std::max(0, to * g.stride_t - g.pad_t);
          const int t1 = std::min(L, to * g.stride_t - g.pad_t + g.k_t);
          T acc = 0;
          for (int f = f0; f < f1; ++f)
            for (int t = t0; t < t1; ++t) acc += x.at4(b, c, f, t);
          y.at4(b, c, fo, to) = acc / static_cast<T>((f1 - f0) * (t1 - t0));
        }
  return y;
}

template <typename T>
void avg_pool2d_bwd(const TensorT<T>& x, const Pool2dGeom& g, const TensorT<T>& gy,
                    TensorT<T>& gx) {
  const int B = x.dim(0), C = x.dim(1), F = x.dim(2), L = x.dim(3);
  const int Fo = gy.dim(2), To = gy.dim(3);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int fo = 0; fo < Fo; ++fo)
        for (int to = 0; to < To; ++to) {
          const int f0 = std::max(0, fo * g.stride_f - g.pad_f);
          const int f1 = std::min(F, fo * g.stride_f - g.pad_f + g.k_f);
          const int t0 = std::max(0, to * g.stride_t - g.pad_t);
          const int t1 = std::min(L, to * g.stride_t - g.pad_t + g.k_t);
          const T gv = gy.at4(b, c, fo, to) / static_cast<T>((f1 - f0) * (t1 - t0));
          for (int f = f0; f < f1; ++f)
            for (int t = t0; t < t1; ++t) gx.at4(b, c, f, t) += gv;
        }
}

// Mean over one spatial axis: time pooling keeps B x C x F, frequency pooling keeps B x C x T.
template <typename T>
TensorT<T> axis_pool_fwd(const TensorT<T>& x, Axis over) {
  check_shape(x.rank() == 4, "axis_pool: input must be rank 4");
  const int B = x.dim(0), C = x.dim(1), F = x.dim(2), L = x.dim(3);
  if (over == Axis::time) {
    TensorT<T> y({B, C, F});
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int f = 0; f < F; ++f) {
          T acc = 0;
          const T* row = &x.at4(b, c, f, 0);
          for (int t = 0; t < L; ++t) acc += row[t];
          y.at3(b, c, f) = acc / static_cast<T>(L);
        }
    return y;
  }
  TensorT<T> y({B, C, L});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      for (int t = 0; t < L; ++t) {
        T acc = 0;
        for (int f = 0; f < F; ++f) acc += x.at4(b, c, f, t);
        y.at3(b, c, t) = acc / static_cast<T>(F);
      }
    }
  return y;
}

// y = x W^T + b along the trailing dimension, batched over all leading dims.
template <typename T>
TensorT<T> linear_fwd(const TensorT<T>& x, const TensorT<T>& w,
                      const std::type_identity_t<TensorT<T>>* bias) {
  check_shape(w.rank() == 2, "linear: weight must be rank 2 (out x in)");
  const int in = w.dim(1), out = w.dim(0);
  check_shape(x.dim(x.rank() - 1) == in,
              "linear: trailing extent of " + shape_str(x.shape) + " must equal in=" +
                  std::to_string(in));
  if (bias) check_shape(bias->size() == out, "linear: bad bias length");
  Shape ys = x.shape;
  ys.back() = out;
  TensorT<T> y(ys);
  const std::int64_t rows = x.size() / in;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = &x[r * in];
    T* yr = &y[r * out];
    for (int o = 0; o < out; ++o) {
      double acc = bias ? static_cast<double>((*bias)[o]) : 0.0;
      const T* wr = &w[static_cast<std::int64_t>(o) * in];
      for (int i = 0; i < in; ++i) acc += static_cast<double>(xr[i]) * wr[i];
      yr[o] = static_cast<T>(acc);
    }
  }
  return y;
}

template <typename T>
void linear_bwd(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& gy, TensorT<T>* gx,
                TensorT<T>* gw, TensorT<T>* gb) {
  const int in = w.dim(1), out = w.dim(0);
  const std::int64_t rows = x.size() / in;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = &x[r * in];
    const T* gyr = &gy[r * out];
    T* gxr = gx ? &(*gx)[r * in] : nullptr;
    for (int o = 0; o < out; ++o) {
      const T gv = gyr[o];
      if (gv == T(0)) continue;
      const T* wr = &w[static_cast<std::int64_t>(o) * in];
      T* gwr = gw ? &(*gw)[static_cast<std::int64_t>(o) * in] : nullptr;
      for (int i = 0; i < in; ++i) {
        if (gxr) gxr[i] += gv * wr[i];
        if (gwr) gwr[i] += gv * xr[i];
      }
      if (gb) (*gb)[o] += gv;
    }
  }
}

// Softmax with temperature along the trailing dimension of a rank-2 tensor.
template <typename T>
TensorT<T> softmax_temp_fwd(const TensorT<T>& z, double tau) {
  if (tau <= 0) throw ConfigError("softmax temperature must be positive");
  check_shape(z.rank() == 2, "softmax_temp: input must be rank 2");
  const int B = z.dim(0), K = z.dim(1);
  TensorT<T> y({B, K});
  for (int b = 0; b < B; ++b) {
    T mx = z.at2(b, 0);
    for (int k = 1; k < K; ++k) mx = std::max(mx, z.at2(b, k));
    T denom = 0;
    for (int k = 0; k < K; ++k) {
      const T e = std::exp((z.at2(b, k) - mx) / static_cast<T>(tau));
      y.at2(b, k) = e;
      denom += e;
    }
    for (int k = 0; k < K; ++k) y.at2(b, k) /= denom;
  }
  return y;
}

}  // namespace dymn
