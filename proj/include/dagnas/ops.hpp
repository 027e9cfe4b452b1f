#pragma once

#include <span>

#include "dagnas/autograd.hpp"
#include "dagnas/rng.hpp"
#include "dagnas/tensor.hpp"

// Differentiable operations over NCHW tensors. Every windowed op uses SAME
// zero padding: stride 1 preserves (H, W) and stride 2 yields ceil(H/2) x ceil(W/2).
namespace dagnas::ops {

template <typename T>
using Var = ag::Var<T>;

enum class PoolKind { Avg, Max };

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

// Cross-correlation. w is [Cout, Cin, k, k]; bias is [Cout] or an empty Var.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride);

// Per-channel k x k filter. w is [C, 1, k, k]; bias is [C] or empty.
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride);

// Depthwise k x k followed by a pointwise 1 x 1 convolution.
template <typename T>
Var<T> depthwise_separable_conv(const Var<T>& x, const Var<T>& dw_w, const Var<T>& dw_b,
                                const Var<T>& pw_w, const Var<T>& pw_b, int stride);

struct BatchNormOptions {
  bool training = false;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-7;
};

// Per-channel normalization with learnable scale/shift. In training mode the
// batch statistics are used and, when given, running_mean/running_var are
// updated; in eval mode the running statistics are used.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>* running_mean,
                  Tensor<T>* running_var, const BatchNormOptions& opt);

template <typename T>
Var<T> pool(const Var<T>& x, PoolKind kind, int size, int stride);

// Parameter-free identity; with stride 2 keeps every other row and column.
template <typename T>
Var<T> subsample(const Var<T>& x, int stride);

// [N, C, H, W] -> [N, C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

// Convolution along the channel axis of [N, C] with an odd kernel [theta]
// and scalar bias [1], zero padded so the output stays [N, C].
template <typename T>
Var<T> channel_conv1d(const Var<T>& g, const Var<T>& w, const Var<T>& bias);

// y[n, c, h, w] = x[n, c, h, w] * a[n, c]
template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& a);

// Feature-reconstruction convolution: T(x) = relu(bn(conv_k(x))), then
// channel attention a = sigmoid(conv1d_theta(gap(T(x)))) rescales T(x).
template <typename T>
struct FrWeights {
  Var<T> conv_w;  // [C, C, k, k]
  Var<T> bn_gamma;
  Var<T> bn_beta;
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  Var<T> eca_w;  // [theta]
  Var<T> eca_b;  // [1]
};

template <typename T>
struct FrOutput {
  Var<T> features;   // T(x)
  Var<T> attention;  // a, [N, C]
  Var<T> output;     // a * T(x)
};

template <typename T>
FrOutput<T> fr_conv(const Var<T>& x, const FrWeights<T>& weights, int stride,
                    const BatchNormOptions& bn);

// y = x W + b with x [N, F], W [F, K], b [K] (or empty).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

// Inverted dropout in training mode, identity otherwise.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate, bool training, Rng& rng);

// Row-wise softmax of a [N, K] tensor with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

// Mean cross-entropy over rows of probabilities against class indices.
template <typename T>
T cross_entropy(const Tensor<T>& probabilities, std::span<const int> labels);

// Fused softmax + mean cross-entropy; backward is (softmax - onehot) / N.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels);

// Channel-attention kernel size from the channel count (gamma = 2, b = 1):
// t = floor(|(log2 C + 1) / 2|), bumped to the next odd value when even.
int eca_kernel_size(int channels);

}  // namespace dagnas::ops
