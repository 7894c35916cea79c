#include "strega/kernels.hpp"

#include <Eigen/Core>
#include <omp.h>

#include <vector>

namespace strega::kernels {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

int thread_count() { return omp_get_max_threads(); }

void require_rank(const Dims& d, std::size_t rank, const char* what) {
  if (d.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     dims_to_string(d));
  }
}

// col[(c*K + kh)*K + kw][oh*Wo + ow] = x[c][oh*s - p + kh][ow*s - p + kw], zero outside.
template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  const auto ih_lim = static_cast<std::ptrdiff_t>(h);
  const auto iw_lim = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < cin; ++c) {
    const T* xc = x + c * h * w;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        T* row = col + ((c * k + kh) * k + kw) * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride + kh) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oh * wo;
          if (ih < 0 || ih >= ih_lim) {
            std::fill(dst, dst + wo, T{0});
            continue;
          }
          const T* src = xc + ih * w;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kw) - static_cast<std::ptrdiff_t>(pad);
            dst[ow] = (iw < 0 || iw >= iw_lim) ? T{0} : src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
                std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
  const auto ih_lim = static_cast<std::ptrdiff_t>(h);
  const auto iw_lim = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < cin; ++c) {
    T* xc = x + c * h * w;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        const T* row = col + ((c * k + kh) * k + kw) * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * stride + kh) - static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= ih_lim) continue;
          T* dst = xc + ih * w;
          const T* src = row + oh * wo;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kw) - static_cast<std::ptrdiff_t>(pad);
            if (iw >= 0 && iw < iw_lim) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("stride must be positive");
  if (in + 2 * pad < kernel) throw ShapeError("kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

std::size_t conv_transpose_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t pad) {
  const std::size_t full = (in - 1) * stride + kernel;
  if (full <= 2 * pad) throw ShapeError("transposed convolution output would be empty");
  return full - 2 * pad;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                         std::size_t stride, std::size_t pad) {
  require_rank(x.dims(), 4, "conv2d input");
  require_rank(w.dims(), 4, "conv2d weights");
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) throw ShapeError("conv2d: input channels do not match weights", 1);
  if (w.dim(3) != k) throw ShapeError("conv2d: kernel must be square", 3);
  if (bias && bias->size() != cout) throw ShapeError("conv2d: bias length does not match output channels", 0);
  const std::size_t ho = conv_out_extent(h, k, stride, pad);
  const std::size_t wo = conv_out_extent(wd, k, stride, pad);
  const std::size_t patch = cin * k * k, npos = ho * wo;

  Tensor<T> y({batch, cout, ho, wo});
  CMapMat<T> wm(w.data(), cout, patch);
#pragma omp parallel
  {
    std::vector<T> col(patch * npos);
#pragma omp for schedule(static)
    for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(batch); ++b) {
      im2col(x.data() + b * cin * h * wd, cin, h, wd, k, stride, pad, ho, wo, col.data());
      MapMat<T> ym(y.data() + b * cout * npos, cout, npos);
      ym.noalias() = wm * CMapMat<T>(col.data(), patch, npos);
      if (bias) {
        for (std::size_t c = 0; c < cout; ++c) ym.row(c).array() += (*bias)[c];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& gy, const Tensor<T>& w, std::size_t in_h,
                                std::size_t in_w, std::size_t stride, std::size_t pad) {
  require_rank(gy.dims(), 4, "conv2d_backward_input gradient");
  require_rank(w.dims(), 4, "conv2d_backward_input weights");
  const std::size_t batch = gy.dim(0), cout = gy.dim(1), ho = gy.dim(2), wo = gy.dim(3);
  const std::size_t cin = w.dim(1), k = w.dim(2);
  if (w.dim(0) != cout) throw ShapeError("conv2d backward: gradient channels do not match weights", 1);
  if (conv_out_extent(in_h, k, stride, pad) != ho) throw ShapeError("conv2d backward: height mismatch", 2);
  if (conv_out_extent(in_w, k, stride, pad) != wo) throw ShapeError("conv2d backward: width mismatch", 3);
  const std::size_t patch = cin * k * k, npos = ho * wo;

  Tensor<T> gx({batch, cin, in_h, in_w});
  CMapMat<T> wm(w.data(), cout, patch);
#pragma omp parallel
  {
    std::vector<T> col(patch * npos);
#pragma omp for schedule(static)
    for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(batch); ++b) {
      MapMat<T> colm(col.data(), patch, npos);
      colm.noalias() = wm.transpose() * CMapMat<T>(gy.data() + b * cout * npos, cout, npos);
      col2im_add(col.data(), cin, in_h, in_w, k, stride, pad, ho, wo, gx.data() + b * cin * in_h * in_w);
    }
  }
  return gx;
}

template <typename T>
void conv2d_backward_weights(const Tensor<T>& x, const Tensor<T>& gy, std::size_t stride,
                             std::size_t pad, Tensor<T>& gw, Tensor<T>* gb) {
  require_rank(x.dims(), 4, "conv2d_backward_weights input");
  require_rank(gy.dims(), 4, "conv2d_backward_weights gradient");
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = gy.dim(1), ho = gy.dim(2), wo = gy.dim(3);
  if (gy.dim(0) != batch) throw ShapeError("conv2d backward: batch mismatch", 0);
  if (gw.rank() != 4 || gw.dim(0) != cout || gw.dim(1) != cin) {
    throw ShapeError("conv2d backward: weight gradient has wrong shape " + dims_to_string(gw.dims()));
  }
  const std::size_t k = gw.dim(2);
  if (conv_out_extent(h, k, stride, pad) != ho) throw ShapeError("conv2d backward: height mismatch", 2);
  if (conv_out_extent(wd, k, stride, pad) != wo) throw ShapeError("conv2d backward: width mismatch", 3);
  const std::size_t patch = cin * k * k, npos = ho * wo;

  const int nt = thread_count();
  std::vector<RowMat<T>> partial(static_cast<std::size_t>(nt));
#pragma omp parallel
  {
    const auto tid = static_cast<std::size_t>(omp_get_thread_num());
    RowMat<T>& acc = partial[tid];
    acc.setZero(cout, patch);
    std::vector<T> col(patch * npos);
#pragma omp for schedule(static)
    for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(batch); ++b) {
      im2col(x.data() + b * cin * h * wd, cin, h, wd, k, stride, pad, ho, wo, col.data());
      acc.noalias() += CMapMat<T>(gy.data() + b * cout * npos, cout, npos) *
                       CMapMat<T>(col.data(), patch, npos).transpose();
    }
  }
  MapMat<T> gwm(gw.data(), cout, patch);
  for (const auto& p : partial) {
    if (p.size()) gwm += p;
  }
  if (gb) {
    Tensor<T> sums({cout});
    channel_sums(gy, sums);
    for (std::size_t c = 0; c < cout; ++c) (*gb)[c] += sums[c];
  }
}

template <typename T>
void channel_sums(const Tensor<T>& t, Tensor<T>& out) {
  const std::size_t batch = t.dim(0), ch = t.dim(1);
  const std::size_t plane = t.size() / (batch * ch);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(ch); ++c) {
    T s = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* p = t.data() + (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
    }
    out[c] = s;
  }
}

template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x.dims(), 2, "dense input");
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in) throw ShapeError("dense: input width does not match weights", 1);
  Tensor<T> y({batch, out});
  MapMat<T> ym(y.data(), batch, out);
  ym.noalias() = CMapMat<T>(x.data(), batch, in) * CMapMat<T>(w.data(), out, in).transpose();
  for (std::size_t r = 0; r < batch; ++r) {
    for (std::size_t c = 0; c < out; ++c) ym(r, c) += b[c];
  }
  return y;
}

template <typename T>
Tensor<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy,
                         Tensor<T>& gw, Tensor<T>& gb) {
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (gy.dim(0) != batch || gy.dim(1) != out) throw ShapeError("dense backward: gradient shape mismatch", 1);
  CMapMat<T> gym(gy.data(), batch, out);
  Tensor<T> gx({batch, in});
  MapMat<T>(gx.data(), batch, in).noalias() = gym * CMapMat<T>(w.data(), out, in);
  MapMat<T>(gw.data(), out, in).noalias() += gym.transpose() * CMapMat<T>(x.data(), batch, in);
  for (std::size_t r = 0; r < batch; ++r) {
    for (std::size_t c = 0; c < out; ++c) gb[c] += gym(r, c);
  }
  return gx;
}

template <typename T>
void batch_norm_train(const Tensor<T>& x, T eps, Tensor<T>& xhat, Tensor<T>& mean, Tensor<T>& var,
                      Tensor<T>& inv_std) {
  const std::size_t batch = x.dim(0), ch = x.dim(1);
  const std::size_t plane = x.size() / (batch * ch);
  const std::size_t n = batch * plane;
  if (n < 2) throw DegenerateInputError("batch_norm: training needs at least two values per channel");
  xhat = Tensor<T>(x.dims());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(ch); ++c) {
    // Accumulate in double so float storage does not bias the statistics.
    double s = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* p = x.data() + (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
    }
    const double m = s / static_cast<double>(n);
    double ss = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* p = x.data() + (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = p[i] - m;
        ss += d * d;
      }
    }
    const double v = ss / static_cast<double>(n);
    const double is = 1.0 / std::sqrt(v + static_cast<double>(eps));
    mean[c] = static_cast<T>(m);
    var[c] = static_cast<T>(v);
    inv_std[c] = static_cast<T>(is);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* p = x.data() + (b * ch + c) * plane;
      T* q = xhat.data() + (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) q[i] = static_cast<T>((p[i] - m) * is);
    }
  }
}

template <typename T>
Tensor<T> channel_affine(const Tensor<T>& xhat, const Tensor<T>& gamma, const Tensor<T>& beta) {
  const std::size_t batch = xhat.dim(0), ch = xhat.dim(1);
  const std::size_t plane = xhat.size() / (batch * ch);
  Tensor<T> y(xhat.dims());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(ch); ++c) {
    const T g = gamma[c], bt = beta[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const T* p = xhat.data() + (b * ch + c) * plane;
      T* q = y.data() + (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) q[i] = g * p[i] + bt;
    }
  }
  return y;
}

template <typename T>
Tensor<T> batch_norm_backward(const Tensor<T>& gy, const Tensor<T>& xhat, const Tensor<T>& inv_std,
                              const Tensor<T>& gamma, Tensor<T>& ggamma, Tensor<T>& gbeta) {
  const std::size_t batch = gy.dim(0), ch = gy.dim(1);
  const std::size_t plane = gy.size() / (batch * ch);
  const T n = static_cast<T>(batch * plane);
  Tensor<T> gx(gy.dims());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(ch); ++c) {
    T sum_g = 0, sum_gx = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* g = gy.data() + (b * ch + c) * plane;
      const T* xh = xhat.data() + (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += g[i];
        sum_gx += g[i] * xh[i];
      }
    }
    ggamma[c] += sum_gx;
    gbeta[c] += sum_g;
    const T scale = gamma[c] * inv_std[c] / n;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* g = gy.data() + (b * ch + c) * plane;
      const T* xh = xhat.data() + (b * ch + c) * plane;
      T* out = gx.data() + (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) out[i] = scale * (n * g[i] - sum_g - xh[i] * sum_gx);
    }
  }
  return gx;
}

template <typename T>
void leaky_relu_inplace(Tensor<T>& x, T slope) {
  T* p = x.data();
  const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    if (p[i] < T{0}) p[i] *= slope;
  }
}

template <typename T>
void leaky_relu_backward_inplace(Tensor<T>& gy, const Tensor<T>& y, T slope) {
  T* g = gy.data();
  const T* p = y.data();
  const auto n = static_cast<std::ptrdiff_t>(gy.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    if (p[i] < T{0}) g[i] *= slope;
  }
}

#define STREGA_INSTANTIATE_KERNELS(T)                                                          \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,      \
                                    std::size_t, std::size_t);                                 \
  template Tensor<T> conv2d_backward_input(const Tensor<T>&, const Tensor<T>&, std::size_t,    \
                                           std::size_t, std::size_t, std::size_t);             \
  template void conv2d_backward_weights(const Tensor<T>&, const Tensor<T>&, std::size_t,       \
                                        std::size_t, Tensor<T>&, Tensor<T>*);                  \
  template void channel_sums(const Tensor<T>&, Tensor<T>&);                                    \
  template Tensor<T> dense_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> dense_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                    Tensor<T>&, Tensor<T>&);                                   \
  template void batch_norm_train(const Tensor<T>&, T, Tensor<T>&, Tensor<T>&, Tensor<T>&,      \
                                 Tensor<T>&);                                                  \
  template Tensor<T> channel_affine(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> batch_norm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                         const Tensor<T>&, Tensor<T>&, Tensor<T>&);            \
  template void leaky_relu_inplace(Tensor<T>&, T);                                             \
  template void leaky_relu_backward_inplace(Tensor<T>&, const Tensor<T>&, T);

STREGA_INSTANTIATE_KERNELS(float)
STREGA_INSTANTIATE_KERNELS(double)

}  // namespace strega::kernels
