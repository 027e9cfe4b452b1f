#include "dagnas/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace dagnas {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace ops {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<Mat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const Mat<T>>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename T>
void require_rank4(const Var<T>& x, const char* op) {
  require(x.value().rank() == 4, std::string(op) + ": expected NCHW input, got " + shape_str(x.shape()));
}

template <typename T>
Tensor<T>& grad_of(ag::Node<T>& self, std::size_t i) {
  return self.inputs[i]->ensure_grad();
}

template <typename T>
bool wants_grad(const ag::Node<T>& self, std::size_t i) {
  return i < self.inputs.size() && self.inputs[i] && self.inputs[i]->requires_grad;
}

// Output positions o in [lo, hi) whose input index o * stride + offset lies in [0, n).
inline void tap_range(int n, int out, int stride, int offset, int& lo, int& hi) {
  lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  hi = n - 1 - offset >= 0 ? (n - 1 - offset) / stride + 1 : 0;
  hi = std::min(hi, out);
  if (hi < lo) hi = lo;
}

// Short runs (the padding margins) are written inline; the build keeps GCC
// from turning these loops into libc calls.
template <typename T>
inline void zero_run(T* p, int count) {
  for (int i = 0; i < count; ++i) p[i] = T(0);
}

// Column buffer [cin * k * k, n * ho * wo] of a batch for a SAME-padded window op.
template <typename T>
void im2col(const T* x, int n, int cin, int h, int w, int k, int stride, int ho, int wo, T* col) {
  const int pt = same_pad_begin(h, k, stride);
  const int pl = same_pad_begin(w, k, stride);
  const std::size_t pix = static_cast<std::size_t>(ho) * wo, cols = pix * n;
  for (int c = 0; c < cin; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        T* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * cols;
        int lo, hi;
        tap_range(w, wo, stride, kj - pl, lo, hi);
        for (int s = 0; s < n; ++s) {
          const T* xs = x + (static_cast<std::size_t>(s) * cin + c) * h * w;
          for (int oh = 0; oh < ho; ++oh) {
            T* o = row + s * pix + static_cast<std::size_t>(oh) * wo;
            const int ih = oh * stride - pt + ki;
            if (ih < 0 || ih >= h) {
              zero_run(o, wo);
              continue;
            }
            zero_run(o, lo);
            zero_run(o + hi, wo - hi);
            const T* xr = xs + static_cast<std::ptrdiff_t>(ih) * w + (kj - pl);
            if (stride == 1) {
              for (int ow = lo; ow < hi; ++ow) o[ow] = xr[ow];
            } else {
              for (int ow = lo; ow < hi; ++ow) o[ow] = xr[ow * stride];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int n, int cin, int h, int w, int k, int stride, int ho, int wo, T* dx) {
  const int pt = same_pad_begin(h, k, stride);
  const int pl = same_pad_begin(w, k, stride);
  const std::size_t pix = static_cast<std::size_t>(ho) * wo, cols = pix * n;
  for (int c = 0; c < cin; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const T* row = col + static_cast<std::size_t>((c * k + ki) * k + kj) * cols;
        int lo, hi;
        tap_range(w, wo, stride, kj - pl, lo, hi);
        for (int s = 0; s < n; ++s) {
          T* xs = dx + (static_cast<std::size_t>(s) * cin + c) * h * w;
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride - pt + ki;
            if (ih < 0 || ih >= h) continue;
            const T* o = row + s * pix + static_cast<std::size_t>(oh) * wo;
            T* xr = xs + static_cast<std::ptrdiff_t>(ih) * w + (kj - pl);
            if (stride == 1) {
              for (int ow = lo; ow < hi; ++ow) xr[ow] += o[ow];
            } else {
              for (int ow = lo; ow < hi; ++ow) xr[ow * stride] += o[ow];
            }
          }
        }
      }
    }
  }
}

// Reusable per-thread buffer for passes that record no graph.
template <typename T>
T* scratch(std::size_t size) {
  thread_local std::vector<T> buffer;
  if (buffer.size() < size) buffer.resize(size);
  return buffer.data();
}

// NCHW <-> channel-major [C, N * HW]
template <typename T>
void to_channel_major(const T* x, int n, int c, std::size_t hw, T* out) {
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch)
      std::copy(x + (static_cast<std::size_t>(s) * c + ch) * hw, x + (static_cast<std::size_t>(s) * c + ch + 1) * hw,
                out + (static_cast<std::size_t>(ch) * n + s) * hw);
}

template <typename T>
void from_channel_major(const T* cm, int n, int c, std::size_t hw, T* x, bool accumulate) {
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch) {
      const T* src = cm + (static_cast<std::size_t>(ch) * n + s) * hw;
      T* dst = x + (static_cast<std::size_t>(s) * c + ch) * hw;
      if (accumulate) {
        for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
      } else {
        std::copy(src, src + hw, dst);
      }
    }
}

}  // namespace

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  return ag::make_result<T>(std::move(y), {x}, [](ag::Node<T>& self) {
    const T* __restrict xv = self.inputs[0]->value.data();
    const T* __restrict g = self.grad.data();
    T* __restrict gx = grad_of(self, 0).data();
    const std::size_t size = self.grad.size();
    for (std::size_t i = 0; i < size; ++i) gx[i] += xv[i] > T(0) ? g[i] : T(0);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-xv[i]));
  return ag::make_result<T>(std::move(y), {x}, [](ag::Node<T>& self) {
    const T* __restrict y = self.value.data();
    const T* __restrict g = self.grad.data();
    T* __restrict gx = grad_of(self, 0).data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  const T* __restrict av = a.value().data();
  const T* __restrict bv = b.value().data();
  T* __restrict yv = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) yv[i] = av[i] + bv[i];
  return ag::make_result<T>(std::move(y), {a, b}, [](ag::Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(self, k)) continue;
      T* __restrict gi = grad_of(self, k).data();
      const T* __restrict g = self.grad.data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride) {
  require_rank4(x, "conv2d");
  require(w.value().rank() == 4 && w.value().dim(2) == w.value().dim(3), "conv2d: kernel must be [Cout, Cin, k, k]");
  require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  const int n = x.value().dim(0), cin = x.value().dim(1), h = x.value().dim(2), wd = x.value().dim(3);
  const int cout = w.value().dim(0), k = w.value().dim(2);
  require(w.value().dim(1) == cin, "conv2d: channel mismatch, input has " + std::to_string(cin) +
                                       " channels but kernel expects " + std::to_string(w.value().dim(1)));
  const bool has_bias = static_cast<bool>(bias);
  if (has_bias) require(bias.value().size() == static_cast<std::size_t>(cout), "conv2d: bias size mismatch");
  const int ho = same_out(h, stride), wo = same_out(wd, stride);
  const int patch = cin * k * k;
  const std::size_t pix = static_cast<std::size_t>(ho) * wo, cols = pix * n;
  const bool direct = (k == 1 && stride == 1);

  // One GEMM over the whole batch: [Cout, patch] x [patch, N * pix]. The
  // column buffer is kept for backward only while gradients are recorded.
  const std::size_t col_size = static_cast<std::size_t>(patch) * cols;
  std::shared_ptr<T[]> col;
  T* colp;
  if (ag::grad_enabled()) {
    col.reset(new T[col_size]);
    colp = col.get();
  } else {
    colp = scratch<T>(col_size);
  }
  if (direct) {
    to_channel_major(x.value().data(), n, cin, pix, colp);
  } else {
    im2col(x.value().data(), n, cin, h, wd, k, stride, ho, wo, colp);
  }
  Mat<T> ycm = CMapMat<T>(w.value().data(), cout, patch) * CMapMat<T>(colp, patch, static_cast<Eigen::Index>(cols));
  if (has_bias) {
    for (int c = 0; c < cout; ++c) ycm.row(c).array() += bias.value()[c];
  }
  Tensor<T> y({n, cout, ho, wo});
  from_channel_major(ycm.data(), n, cout, pix, y.data(), false);
  return ag::make_result<T>(std::move(y), {x, w, bias}, [=](ag::Node<T>& self) {
    const bool gx_on = wants_grad(self, 0), gw_on = wants_grad(self, 1), gb_on = has_bias && wants_grad(self, 2);
    Mat<T> dy(cout, static_cast<Eigen::Index>(cols));
    to_channel_major(self.grad.data(), n, cout, pix, dy.data());
    if (gb_on) {
      T* gb = grad_of(self, 2).data();
      for (int c = 0; c < cout; ++c) gb[c] += dy.row(c).sum();
    }
    if (gw_on) {
      MapMat<T>(grad_of(self, 1).data(), cout, patch).noalias() +=
          dy * CMapMat<T>(col.get(), patch, static_cast<Eigen::Index>(cols)).transpose();
    }
    if (gx_on) {
      Mat<T> dcol = CMapMat<T>(self.inputs[1]->value.data(), cout, patch).transpose() * dy;
      T* gx = grad_of(self, 0).data();
      if (direct) {
        from_channel_major(dcol.data(), n, cin, pix, gx, true);
      } else {
        col2im(dcol.data(), n, cin, h, wd, k, stride, ho, wo, gx);
      }
    }
  });
}

template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride) {
  require_rank4(x, "depthwise_conv2d");
  require(stride == 1 || stride == 2, "depthwise_conv2d: stride must be 1 or 2");
  const int n = x.value().dim(0), c = x.value().dim(1), h = x.value().dim(2), wd = x.value().dim(3);
  require(w.value().rank() == 4 && w.value().dim(0) == c && w.value().dim(1) == 1,
          "depthwise_conv2d: channel mismatch, kernel " + shape_str(w.shape()) + " for input " + shape_str(x.shape()));
  const int k = w.value().dim(2);
  const bool has_bias = static_cast<bool>(bias);
  const int ho = same_out(h, stride), wo = same_out(wd, stride);
  const int pt = same_pad_begin(h, k, stride), pl = same_pad_begin(wd, k, stride);

  Tensor<T> y({n, c, ho, wo});
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const T* xp = xv + (static_cast<std::size_t>(s) * c + ch) * h * wd;
      const T* kp = wv + static_cast<std::size_t>(ch) * k * k;
      T* yp = y.data() + (static_cast<std::size_t>(s) * c + ch) * ho * wo;
      if (has_bias) std::fill(yp, yp + static_cast<std::size_t>(ho) * wo, bias.value()[ch]);
      for (int ki = 0; ki < k; ++ki) {
        for (int kj = 0; kj < k; ++kj) {
          const T kv = kp[ki * k + kj];
          int lo, hi;
          tap_range(wd, wo, stride, kj - pl, lo, hi);
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride - pt + ki;
            if (ih < 0 || ih >= h) continue;
            const T* __restrict xr = xp + static_cast<std::ptrdiff_t>(ih) * wd + (kj - pl);
            T* __restrict yr = yp + static_cast<std::size_t>(oh) * wo;
            if (stride == 1) {
              for (int ow = lo; ow < hi; ++ow) yr[ow] += kv * xr[ow];
            } else {
              for (int ow = lo; ow < hi; ++ow) yr[ow] += kv * xr[ow * stride];
            }
          }
        }
      }
    }
  }
  return ag::make_result<T>(std::move(y), {x, w, bias}, [=](ag::Node<T>& self) {
    const T* xv = self.inputs[0]->value.data();
    const T* wv = self.inputs[1]->value.data();
    const bool gx_on = wants_grad(self, 0), gw_on = wants_grad(self, 1), gb_on = has_bias && wants_grad(self, 2);
    T* gx = gx_on ? grad_of(self, 0).data() : nullptr;
    T* gw = gw_on ? grad_of(self, 1).data() : nullptr;
    T* gb = gb_on ? grad_of(self, 2).data() : nullptr;
    std::vector<T> tap_acc(gw_on ? static_cast<std::size_t>(k) * k * wo : 0);
    for (int ch = 0; ch < c; ++ch) {
      const T* kp = wv + static_cast<std::size_t>(ch) * k * k;
      std::fill(tap_acc.begin(), tap_acc.end(), T(0));
      for (int s = 0; s < n; ++s) {
        const std::size_t in_off = (static_cast<std::size_t>(s) * c + ch) * h * wd;
        const T* dy = self.grad.data() + (static_cast<std::size_t>(s) * c + ch) * ho * wo;
        if (gb_on) {
          T acc = 0;
#pragma omp simd reduction(+ : acc)
          for (int i = 0; i < ho * wo; ++i) acc += dy[i];
          gb[ch] += acc;
        }
        for (int ki = 0; ki < k; ++ki) {
          for (int kj = 0; kj < k; ++kj) {
            const T kv = kp[ki * k + kj];
            T* __restrict ta = gw_on ? tap_acc.data() + static_cast<std::size_t>(ki * k + kj) * wo : nullptr;
            int lo, hi;
            tap_range(wd, wo, stride, kj - pl, lo, hi);
            for (int oh = 0; oh < ho; ++oh) {
              const int ih = oh * stride - pt + ki;
              if (ih < 0 || ih >= h) continue;
              const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(in_off) + static_cast<std::ptrdiff_t>(ih) * wd + (kj - pl);
              const T* __restrict g = dy + static_cast<std::size_t>(oh) * wo;
              if (gw_on) {
                const T* __restrict xr = xv + base;
                if (stride == 1) {
                  for (int ow = lo; ow < hi; ++ow) ta[ow] += g[ow] * xr[ow];
                } else {
                  for (int ow = lo; ow < hi; ++ow) ta[ow] += g[ow] * xr[2 * ow];
                }
              }
              if (gx_on) {
                T* __restrict xr = gx + base;
                if (stride == 1) {
                  for (int ow = lo; ow < hi; ++ow) xr[ow] += g[ow] * kv;
                } else {
                  for (int ow = lo; ow < hi; ++ow) xr[2 * ow] += g[ow] * kv;
                }
              }
            }
          }
        }
      }
      if (gw_on) {
        for (int t = 0; t < k * k; ++t) {
          const T* ta = tap_acc.data() + static_cast<std::size_t>(t) * wo;
          T acc = 0;
          for (int ow = 0; ow < wo; ++ow) acc += ta[ow];
          gw[static_cast<std::size_t>(ch) * k * k + t] += acc;
        }
      }
    }
  });
}

template <typename T>
Var<T> depthwise_separable_conv(const Var<T>& x, const Var<T>& dw_w, const Var<T>& dw_b, const Var<T>& pw_w,
                                const Var<T>& pw_b, int stride) {
  return conv2d(depthwise_conv2d(x, dw_w, dw_b, stride), pw_w, pw_b, 1);
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>* running_mean,
                  Tensor<T>* running_var, const BatchNormOptions& opt) {
  require_rank4(x, "batch_norm");
  const int n = x.value().dim(0), c = x.value().dim(1), hw = x.value().dim(2) * x.value().dim(3);
  require(gamma.value().size() == static_cast<std::size_t>(c) && beta.value().size() == static_cast<std::size_t>(c),
          "batch_norm: scale/shift size mismatch");
  if (opt.training && n < 2) throw std::invalid_argument("batch_norm: training mode needs a batch of at least 2");
  if (!opt.training && (!running_mean || !running_var)) {
    throw std::invalid_argument("batch_norm: eval mode needs running statistics");
  }
  const std::size_t m = static_cast<std::size_t>(n) * hw;
  Tensor<T> xhat(x.shape());
  Tensor<T> y(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  const T* xv = x.value().data();
  for (int ch = 0; ch < c; ++ch) {
    T mean, var;
    if (opt.training) {
      double sum = 0;
      for (int s = 0; s < n; ++s) {
        const T* p = xv + (static_cast<std::size_t>(s) * c + ch) * hw;
#pragma omp simd reduction(+ : sum)
        for (int i = 0; i < hw; ++i) sum += p[i];
      }
      mean = static_cast<T>(sum / static_cast<double>(m));
      double sq = 0;
      for (int s = 0; s < n; ++s) {
        const T* p = xv + (static_cast<std::size_t>(s) * c + ch) * hw;
#pragma omp simd reduction(+ : sq)
        for (int i = 0; i < hw; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      var = static_cast<T>(sq / static_cast<double>(m));
      if (running_mean && running_var) {
        const T mom = static_cast<T>(opt.momentum);
        const T unbiased = m > 1 ? static_cast<T>(sq / static_cast<double>(m - 1)) : var;
        (*running_mean)[ch] = mom * (*running_mean)[ch] + (T(1) - mom) * mean;
        (*running_var)[ch] = mom * (*running_var)[ch] + (T(1) - mom) * unbiased;
      }
    } else {
      mean = (*running_mean)[ch];
      var = (*running_var)[ch];
    }
    const T is = T(1) / std::sqrt(var + static_cast<T>(opt.eps));
    inv_std[ch] = is;
    const T g = gamma.value()[ch], b = beta.value()[ch];
    T* __restrict xh = xhat.data();
    T* __restrict yv = y.data();
    for (int s = 0; s < n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) {
        xh[off + i] = (xv[off + i] - mean) * is;
        yv[off + i] = g * xh[off + i] + b;
      }
    }
  }
  const bool training = opt.training;
  return ag::make_result<T>(
      std::move(y), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](ag::Node<T>& self) {
        const T* gam = self.inputs[1]->value.data();
        const T* __restrict dy = self.grad.data();
        const T* __restrict xh = xhat.data();
        const bool gx_on = wants_grad(self, 0), gg_on = wants_grad(self, 1), gb_on = wants_grad(self, 2);
        T* __restrict gx = gx_on ? grad_of(self, 0).data() : nullptr;
        T* gg = gg_on ? grad_of(self, 1).data() : nullptr;
        T* gb = gb_on ? grad_of(self, 2).data() : nullptr;
        for (int ch = 0; ch < c; ++ch) {
          T sum_dy = 0, sum_dy_xhat = 0;
          for (int s = 0; s < n; ++s) {
            const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
#pragma omp simd reduction(+ : sum_dy, sum_dy_xhat)
            for (int i = 0; i < hw; ++i) {
              sum_dy += dy[off + i];
              sum_dy_xhat += dy[off + i] * xh[off + i];
            }
          }
          if (gg_on) gg[ch] += sum_dy_xhat;
          if (gb_on) gb[ch] += sum_dy;
          if (!gx_on) continue;
          const T scale = gam[ch] * inv_std[ch];
          const T mt = static_cast<T>(m);
          for (int s = 0; s < n; ++s) {
            const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
            if (training) {
              const T mean_dy = sum_dy / mt, mean_dy_xhat = sum_dy_xhat / mt;
              for (int i = 0; i < hw; ++i) gx[off + i] += scale * (dy[off + i] - mean_dy - xh[off + i] * mean_dy_xhat);
            } else {
              for (int i = 0; i < hw; ++i) gx[off + i] += scale * dy[off + i];
            }
          }
        }
      });
}

constexpr std::uint32_t kNoRoute = std::numeric_limits<std::uint32_t>::max();

template <typename T>
Var<T> pool(const Var<T>& x, PoolKind kind, int size, int stride) {
  require_rank4(x, "pool");
  require(stride == 1 || stride == 2, "pool: stride must be 1 or 2");
  const int n = x.value().dim(0), c = x.value().dim(1), h = x.value().dim(2), wd = x.value().dim(3);
  const int ho = same_out(h, stride), wo = same_out(wd, stride);
  const int pt = same_pad_begin(h, size, stride), pl = same_pad_begin(wd, size, stride);
  const std::size_t opix = static_cast<std::size_t>(ho) * wo;
  // In-bounds window size per output position (AVG divides by it).
  std::vector<T> count(opix);
  for (int oh = 0; oh < ho; ++oh) {
    const int rows = std::min(oh * stride - pt + size, h) - std::max(oh * stride - pt, 0);
    for (int ow = 0; ow < wo; ++ow) {
      const int cols = std::min(ow * stride - pl + size, wd) - std::max(ow * stride - pl, 0);
      count[static_cast<std::size_t>(oh) * wo + ow] = static_cast<T>(rows * cols);
    }
  }
  const bool is_max = kind == PoolKind::Max;
  Tensor<T> y({n, c, ho, wo}, is_max ? -std::numeric_limits<T>::infinity() : T(0));
  // MAX: flat input index of the first maximal element in row-major window
  // order, recorded only when a graph is being built.
  const bool record = is_max && ag::grad_enabled();
  std::vector<std::uint32_t> route(record ? y.size() : 0, kNoRoute);
  const T* xv = x.value().data();
  for (int p = 0; p < n * c; ++p) {
    const std::size_t in_off = static_cast<std::size_t>(p) * h * wd;
    T* yp = y.data() + static_cast<std::size_t>(p) * opix;
    std::uint32_t* rp = record ? route.data() + static_cast<std::size_t>(p) * opix : nullptr;
    for (int ki = 0; ki < size; ++ki) {
      for (int kj = 0; kj < size; ++kj) {
        int lo, hi;
        tap_range(wd, wo, stride, kj - pl, lo, hi);
        for (int oh = 0; oh < ho; ++oh) {
          const int ih = oh * stride - pt + ki;
          if (ih < 0 || ih >= h) continue;
          const std::size_t base = in_off + static_cast<std::size_t>(ih) * wd;
          T* __restrict yr = yp + static_cast<std::size_t>(oh) * wo;
          const T* __restrict xr = xv + base + (kj - pl);
          if (record) {
            std::uint32_t* __restrict rr = rp + static_cast<std::size_t>(oh) * wo;
            const auto first = static_cast<std::uint32_t>(base + (kj - pl));
            for (int ow = lo; ow < hi; ++ow) {
              const T v = xr[ow * stride];
              const bool take = v > yr[ow] || rr[ow] == kNoRoute;
              yr[ow] = take ? v : yr[ow];
              rr[ow] = take ? first + static_cast<std::uint32_t>(ow * stride) : rr[ow];
            }
          } else if (is_max) {
            if (stride == 1) {
              for (int ow = lo; ow < hi; ++ow) yr[ow] = std::max(yr[ow], xr[ow]);
            } else {
              for (int ow = lo; ow < hi; ++ow) yr[ow] = std::max(yr[ow], xr[2 * ow]);
            }
          } else if (stride == 1) {
            for (int ow = lo; ow < hi; ++ow) yr[ow] += xr[ow];
          } else {
            for (int ow = lo; ow < hi; ++ow) yr[ow] += xr[2 * ow];
          }
        }
      }
    }
    if (!is_max) {
      for (std::size_t i = 0; i < opix; ++i) yp[i] /= count[i];
    }
  }
  return ag::make_result<T>(std::move(y), {x}, [=, route = std::move(route), count = std::move(count)](ag::Node<T>& self) {
    T* gx = grad_of(self, 0).data();
    if (is_max) {
      for (std::size_t o = 0; o < route.size(); ++o) gx[route[o]] += self.grad[o];
      return;
    }
    std::vector<T> share(opix);
    for (int p = 0; p < n * c; ++p) {
      const std::size_t in_off = static_cast<std::size_t>(p) * h * wd;
      const T* gp = self.grad.data() + static_cast<std::size_t>(p) * opix;
      for (std::size_t i = 0; i < opix; ++i) share[i] = gp[i] / count[i];
      for (int ki = 0; ki < size; ++ki) {
        for (int kj = 0; kj < size; ++kj) {
          int lo, hi;
          tap_range(wd, wo, stride, kj - pl, lo, hi);
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride - pt + ki;
            if (ih < 0 || ih >= h) continue;
            T* xr = gx + in_off + static_cast<std::size_t>(ih) * wd + (kj - pl);
            const T* sr = share.data() + static_cast<std::size_t>(oh) * wo;
            for (int ow = lo; ow < hi; ++ow) xr[ow * stride] += sr[ow];
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> subsample(const Var<T>& x, int stride) {
  if (stride == 1) return x;
  require_rank4(x, "subsample");
  const int n = x.value().dim(0), c = x.value().dim(1), h = x.value().dim(2), wd = x.value().dim(3);
  const int ho = same_out(h, stride), wo = same_out(wd, stride);
  Tensor<T> y({n, c, ho, wo});
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) y.at(s, ch, i, j) = x.value().at(s, ch, i * stride, j * stride);
  return ag::make_result<T>(std::move(y), {x}, [=](ag::Node<T>& self) {
    auto& gx = grad_of(self, 0);
    for (int s = 0; s < n; ++s)
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < ho; ++i)
          for (int j = 0; j < wo; ++j) gx.at(s, ch, i * stride, j * stride) += self.grad.at(s, ch, i, j);
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank4(x, "global_avg_pool");
  const int n = x.value().dim(0), c = x.value().dim(1), hw = x.value().dim(2) * x.value().dim(3);
  Tensor<T> y({n, c});
  for (int p = 0; p < n * c; ++p) {
    T acc = 0;
    const T* xp = x.value().data() + static_cast<std::size_t>(p) * hw;
#pragma omp simd reduction(+ : acc)
    for (int i = 0; i < hw; ++i) acc += xp[i];
    y[p] = acc / static_cast<T>(hw);
  }
  return ag::make_result<T>(std::move(y), {x}, [=](ag::Node<T>& self) {
    T* gx = grad_of(self, 0).data();
    for (int p = 0; p < n * c; ++p) {
      const T g = self.grad[p] / static_cast<T>(hw);
      for (int i = 0; i < hw; ++i) gx[static_cast<std::size_t>(p) * hw + i] += g;
    }
  });
}

template <typename T>
Var<T> channel_conv1d(const Var<T>& g, const Var<T>& w, const Var<T>& bias) {
  require(g.value().rank() == 2, "channel_conv1d: expected [N, C] input");
  const int n = g.value().dim(0), c = g.value().dim(1);
  const int k = static_cast<int>(w.value().size());
  if (k % 2 == 0) throw std::invalid_argument("channel_conv1d: kernel size must be odd, got " + std::to_string(k));
  const int pad = k / 2;
  const bool has_bias = static_cast<bool>(bias);
  Tensor<T> y({n, c});
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      T acc = has_bias ? bias.value()[0] : T(0);
      for (int j = 0; j < k; ++j) {
        const int src = ch - pad + j;
        if (src >= 0 && src < c) acc += w.value()[j] * g.value()[static_cast<std::size_t>(s) * c + src];
      }
      y[static_cast<std::size_t>(s) * c + ch] = acc;
    }
  }
  return ag::make_result<T>(std::move(y), {g, w, bias}, [=](ag::Node<T>& self) {
    const auto& gv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    const bool gg_on = wants_grad(self, 0), gw_on = wants_grad(self, 1), gb_on = has_bias && wants_grad(self, 2);
    T* gg = gg_on ? grad_of(self, 0).data() : nullptr;
    T* gw = gw_on ? grad_of(self, 1).data() : nullptr;
    T* gb = gb_on ? grad_of(self, 2).data() : nullptr;
    for (int s = 0; s < n; ++s) {
      for (int ch = 0; ch < c; ++ch) {
        const T d = self.grad[static_cast<std::size_t>(s) * c + ch];
        if (gb_on) gb[0] += d;
        for (int j = 0; j < k; ++j) {
          const int src = ch - pad + j;
          if (src < 0 || src >= c) continue;
          const std::size_t idx = static_cast<std::size_t>(s) * c + src;
          if (gw_on) gw[j] += d * gv[idx];
          if (gg_on) gg[idx] += d * wv[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& a) {
  require_rank4(x, "channel_scale");
  const int n = x.value().dim(0), c = x.value().dim(1), hw = x.value().dim(2) * x.value().dim(3);
  require(a.value().rank() == 2 && a.value().dim(0) == n && a.value().dim(1) == c, "channel_scale: coefficient shape mismatch");
  Tensor<T> y(x.shape());
  for (int p = 0; p < n * c; ++p) {
    const T s = a.value()[p];
    const std::size_t off = static_cast<std::size_t>(p) * hw;
    for (int i = 0; i < hw; ++i) y[off + i] = x.value()[off + i] * s;
  }
  return ag::make_result<T>(std::move(y), {x, a}, [=](ag::Node<T>& self) {
    const T* __restrict xv = self.inputs[0]->value.data();
    const T* __restrict av = self.inputs[1]->value.data();
    const T* __restrict g = self.grad.data();
    const bool gx_on = wants_grad(self, 0), ga_on = wants_grad(self, 1);
    T* __restrict gx = gx_on ? grad_of(self, 0).data() : nullptr;
    T* __restrict ga = ga_on ? grad_of(self, 1).data() : nullptr;
    for (int p = 0; p < n * c; ++p) {
      const std::size_t off = static_cast<std::size_t>(p) * hw;
      if (gx_on) {
        for (int i = 0; i < hw; ++i) gx[off + i] += g[off + i] * av[p];
      }
      if (ga_on) {
        T acc = 0;
#pragma omp simd reduction(+ : acc)
        for (int i = 0; i < hw; ++i) acc += g[off + i] * xv[off + i];
        ga[p] += acc;
      }
    }
  });
}

template <typename T>
FrOutput<T> fr_conv(const Var<T>& x, const FrWeights<T>& wt, int stride, const BatchNormOptions& bn) {
  const int theta = static_cast<int>(wt.eca_w.value().size());
  if (theta % 2 == 0) throw std::invalid_argument("fr_conv: attention kernel size must be odd, got " + std::to_string(theta));
  FrOutput<T> out;
  out.features = relu(batch_norm(conv2d(x, wt.conv_w, Var<T>{}, stride), wt.bn_gamma, wt.bn_beta,
                                 wt.running_mean, wt.running_var, bn));
  out.attention = sigmoid(channel_conv1d(global_avg_pool(out.features), wt.eca_w, wt.eca_b));
  out.output = channel_scale(out.features, out.attention);
  return out;
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require(x.value().rank() == 2 && w.value().rank() == 2 && x.value().dim(1) == w.value().dim(0),
          "linear: shape mismatch " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const int n = x.value().dim(0), f = x.value().dim(1), k = w.value().dim(1);
  const bool has_bias = static_cast<bool>(bias);
  Tensor<T> y({n, k});
  MapMat<T> ym(y.data(), n, k);
  ym.noalias() = CMapMat<T>(x.value().data(), n, f) * CMapMat<T>(w.value().data(), f, k);
  if (has_bias) {
    for (int s = 0; s < n; ++s)
      for (int j = 0; j < k; ++j) ym(s, j) += bias.value()[j];
  }
  return ag::make_result<T>(std::move(y), {x, w, bias}, [=](ag::Node<T>& self) {
    CMapMat<T> dy(self.grad.data(), n, k);
    if (wants_grad(self, 0)) {
      MapMat<T>(grad_of(self, 0).data(), n, f).noalias() +=
          dy * CMapMat<T>(self.inputs[1]->value.data(), f, k).transpose();
    }
    if (wants_grad(self, 1)) {
      MapMat<T>(grad_of(self, 1).data(), f, k).noalias() +=
          CMapMat<T>(self.inputs[0]->value.data(), n, f).transpose() * dy;
    }
    if (has_bias && wants_grad(self, 2)) {
      T* gb = grad_of(self, 2).data();
      for (int s = 0; s < n; ++s)
        for (int j = 0; j < k; ++j) gb[j] += dy(s, j);
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.value().size());
  for (auto& m : mask) m = uniform01(rng) >= rate ? keep_scale : T(0);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.value()[i] * mask[i];
  return ag::make_result<T>(std::move(y), {x}, [mask = std::move(mask)](ag::Node<T>& self) {
    auto& gx = grad_of(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require(logits.rank() == 2, "softmax: expected [N, K] logits");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (int s = 0; s < n; ++s) {
    const T* row = logits.data() + static_cast<std::size_t>(s) * k;
    T* out = p.data() + static_cast<std::size_t>(s) * k;
    const T mx = *std::max_element(row, row + k);
    T z = 0;
    for (int j = 0; j < k; ++j) z += (out[j] = std::exp(row[j] - mx));
    for (int j = 0; j < k; ++j) out[j] /= z;
  }
  return p;
}

namespace {
void check_labels(std::span<const int> labels, int n, int k) {
  require(static_cast<int>(labels.size()) == n, "cross_entropy: label count does not match batch size");
  for (int l : labels) {
    if (l < 0 || l >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
    }
  }
}
}  // namespace

template <typename T>
T cross_entropy(const Tensor<T>& probabilities, std::span<const int> labels) {
  const int n = probabilities.dim(0), k = probabilities.dim(1);
  check_labels(labels, n, k);
  T loss = 0;
  for (int s = 0; s < n; ++s) loss -= std::log(probabilities[static_cast<std::size_t>(s) * k + labels[s]]);
  return loss / static_cast<T>(n);
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const int n = logits.value().dim(0), k = logits.value().dim(1);
  check_labels(labels, n, k);
  Tensor<T> p = softmax(logits.value());
  T loss = 0;
  for (int s = 0; s < n; ++s) {
    const T* row = logits.value().data() + static_cast<std::size_t>(s) * k;
    const T mx = *std::max_element(row, row + k);
    T z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    loss += mx + std::log(z) - row[labels[s]];
  }
  loss /= static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return ag::make_result<T>(Tensor<T>({1}, {loss}), {logits},
                            [=, p = std::move(p), lab = std::move(lab)](ag::Node<T>& self) {
                              auto& g = grad_of(self, 0);
                              const T scale = self.grad[0] / static_cast<T>(n);
                              for (int s = 0; s < n; ++s) {
                                for (int j = 0; j < k; ++j) {
                                  const std::size_t i = static_cast<std::size_t>(s) * k + j;
                                  g[i] += scale * (p[i] - (j == lab[s] ? T(1) : T(0)));
                                }
                              }
                            });
}

int eca_kernel_size(int channels) {
  if (channels < 1) throw std::invalid_argument("eca_kernel_size: channel count must be positive");
  const int t = static_cast<int>(std::abs((std::log2(static_cast<double>(channels)) + 1.0) / 2.0));
  int theta = (t % 2 == 1) ? t : t + 1;
  // keep theta <= C (largest odd value not above C)
  const int cap = (channels % 2 == 1) ? channels : channels - 1;
  return std::max(1, std::min(theta, cap));
}

#define DAGNAS_INSTANTIATE(T)                                                                                  \
  template Var<T> relu(const Var<T>&);                                                                         \
  template Var<T> sigmoid(const Var<T>&);                                                                      \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                           \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int);                                    \
  template Var<T> depthwise_conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int);                          \
  template Var<T> depthwise_separable_conv(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,         \
                                           const Var<T>&, int);                                                \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, Tensor<T>*, Tensor<T>*,              \
                             const BatchNormOptions&);                                                         \
  template Var<T> pool(const Var<T>&, PoolKind, int, int);                                                     \
  template Var<T> subsample(const Var<T>&, int);                                                               \
  template Var<T> global_avg_pool(const Var<T>&);                                                              \
  template Var<T> channel_conv1d(const Var<T>&, const Var<T>&, const Var<T>&);                                 \
  template Var<T> channel_scale(const Var<T>&, const Var<T>&);                                                 \
  template FrOutput<T> fr_conv(const Var<T>&, const FrWeights<T>&, int, const BatchNormOptions&);              \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                         \
  template Var<T> dropout(const Var<T>&, double, bool, Rng&);                                                  \
  template Tensor<T> softmax(const Tensor<T>&);                                                                \
  template T cross_entropy(const Tensor<T>&, std::span<const int>);                                            \
  template Var<T> softmax_cross_entropy(const Var<T>&, std::span<const int>);

DAGNAS_INSTANTIATE(float)
DAGNAS_INSTANTIATE(double)

#undef DAGNAS_INSTANTIATE

}  // namespace ops
}  // namespace dagnas
