#pragma once

// Layer kernels on plain tensors: forward passes plus their hand-written adjoints.
// Layout is NCHW throughout; convolutions are cross-correlations lowered to GEMM via im2col.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mmseg/tensor.hpp"

namespace mmseg {

enum class Padding { same, valid };
enum class Mode { train, eval };

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;

namespace detail {

struct Window {
  Index in_h, in_w, kh, kw, stride, pad, out_h, out_w;
};

// col has rows (c, ky, kx) and columns (oy, ox).
template <typename Scalar>
void im2col(const Scalar* img, Index channels, const Window& g, Scalar* col) {
  const Index cols = g.out_h * g.out_w;
  for (Index c = 0; c < channels; ++c)
    for (Index ky = 0; ky < g.kh; ++ky)
      for (Index kx = 0; kx < g.kw; ++kx) {
        Scalar* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          Scalar* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = img + (c * g.in_h + iy) * g.in_w;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : Scalar(0);
          }
        }
      }
}

// Adjoint of im2col: scatters-adds columns back into the image.
template <typename Scalar>
void col2im(const Scalar* col, Index channels, const Window& g, Scalar* img) {
  const Index cols = g.out_h * g.out_w;
  for (Index c = 0; c < channels; ++c)
    for (Index ky = 0; ky < g.kh; ++ky)
      for (Index kx = 0; kx < g.kw; ++kx) {
        const Scalar* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          Scalar* dst = img + (c * g.in_h + iy) * g.in_w;
          const Scalar* src = row + oy * g.out_w;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
          }
        }
      }
}

inline Window conv_window(Index h, Index w, Index kh, Index kw, Padding padding) {
  if (padding == Padding::same) {
    if (kh % 2 == 0 || kw % 2 == 0)
      throw ShapeError("same padding requires odd kernel extents");
    return {h, w, kh, kw, 1, kh / 2, h, w};
  }
  if (kh > h || kw > w) throw ShapeError("valid convolution kernel larger than input");
  return {h, w, kh, kw, 1, 0, h - kh + 1, w - kw + 1};
}

template <typename Scalar>
void check_bias(const Tensor<Scalar>& bias, Index channels, const char* op) {
  if (!bias.empty()) require_shape(bias, {channels}, std::string(op) + " bias");
}

template <typename Scalar>
void add_channel_bias(Tensor<Scalar>& out, const Tensor<Scalar>& bias) {
  if (bias.empty()) return;
  const Index n = out.dim(0), c = out.dim(1), plane = out.dim(2) * out.dim(3);
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch)
      out.array().segment((i * c + ch) * plane, plane) += bias[ch];
}

template <typename Scalar>
Tensor<Scalar> channel_sums(const Tensor<Scalar>& t) {
  const Index n = t.dim(0), c = t.dim(1), plane = t.dim(2) * t.dim(3);
  Tensor<Scalar> out({c});
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch) out[ch] += t.array().segment((i * c + ch) * plane, plane).sum();
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

template <typename Scalar>
struct Conv2dGrads {
  Tensor<Scalar> input, kernel, bias;
};

/// Cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw]. An empty `bias` means no bias.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, Padding padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  const Index n = input.dim(0), cin = input.dim(1), cout = kernel.dim(0);
  if (kernel.dim(1) != cin)
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                     std::to_string(kernel.dim(1)) + " input channels, input " +
                     shape_str(input.shape()) + " has " + std::to_string(cin));
  detail::check_bias(bias, cout, "conv2d");
  const auto g = detail::conv_window(input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3), padding);
  const Index patch = cin * g.kh * g.kw, cols = g.out_h * g.out_w;

  Tensor<Scalar> out({n, cout, g.out_h, g.out_w});
  RowMatrix<Scalar> col(patch, cols);
  ConstRowMap<Scalar> kmat(kernel.data(), cout, patch);
  for (Index i = 0; i < n; ++i) {
    detail::im2col(input.data() + i * cin * g.in_h * g.in_w, cin, g, col.data());
    RowMap<Scalar>(out.data() + i * cout * cols, cout, cols).noalias() = kmat * col;
  }
  detail::add_channel_bias(out, bias);
  require_finite(out, "conv2d");
  return out;
}

template <typename Scalar>
Conv2dGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                                    bool has_bias, const Tensor<Scalar>& grad_out, Padding padding) {
  const Index n = input.dim(0), cin = input.dim(1), cout = kernel.dim(0);
  const auto g = detail::conv_window(input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3), padding);
  require_shape(grad_out, {n, cout, g.out_h, g.out_w}, "conv2d_backward grad");
  const Index patch = cin * g.kh * g.kw, cols = g.out_h * g.out_w;

  Conv2dGrads<Scalar> grads{Tensor<Scalar>::zeros_like(input), Tensor<Scalar>::zeros_like(kernel), {}};
  RowMatrix<Scalar> col(patch, cols), dcol(patch, cols);
  ConstRowMap<Scalar> kmat(kernel.data(), cout, patch);
  RowMap<Scalar> dk(grads.kernel.data(), cout, patch);
  for (Index i = 0; i < n; ++i) {
    ConstRowMap<Scalar> dy(grad_out.data() + i * cout * cols, cout, cols);
    detail::im2col(input.data() + i * cin * g.in_h * g.in_w, cin, g, col.data());
    dk.noalias() += dy * col.transpose();
    dcol.noalias() = kmat.transpose() * dy;
    detail::col2im(dcol.data(), cin, g, grads.input.data() + i * cin * g.in_h * g.in_w);
  }
  if (has_bias) grads.bias = detail::channel_sums(grad_out);
  return grads;
}

// ---------------------------------------------------------------------------
// conv_transpose2d

namespace detail {
inline Window transpose_window(Index in_h, Index in_w, Index kh, Index kw, Index stride) {
  if (stride < 1) throw ShapeError("conv_transpose2d stride must be positive");
  if (kh < stride || kw < stride || (kh - stride) % 2 || (kw - stride) % 2 || kh != kw)
    throw ShapeError("conv_transpose2d needs a square kernel with extent stride + 2*pad");
  const Index pad = (kh - stride) / 2;
  // Window over the *output* image; its "out" extents are the input extents.
  return {in_h * stride, in_w * stride, kh, kw, stride, pad, in_h, in_w};
}
}  // namespace detail

/// Transposed convolution, [N,Cin,H,W] x [Cin,Cout,k,k] -> [N,Cout,sH,sW].
/// The kernel extent must equal stride + 2*pad so the output is exactly s times larger.
template <typename Scalar>
Tensor<Scalar> conv_transpose2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                                const Tensor<Scalar>& bias, Index stride = 2) {
  require_rank(input, 4, "conv_transpose2d input");
  require_rank(kernel, 4, "conv_transpose2d kernel");
  const Index n = input.dim(0), cin = input.dim(1), cout = kernel.dim(1);
  if (kernel.dim(0) != cin)
    throw ShapeError("conv_transpose2d: kernel " + shape_str(kernel.shape()) +
                     " does not match input channels of " + shape_str(input.shape()));
  detail::check_bias(bias, cout, "conv_transpose2d");
  const auto g = detail::transpose_window(input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3), stride);
  const Index patch = cout * g.kh * g.kw, pixels = g.out_h * g.out_w;

  Tensor<Scalar> out({n, cout, g.in_h, g.in_w});
  RowMatrix<Scalar> col(patch, pixels);
  ConstRowMap<Scalar> kmat(kernel.data(), cin, patch);
  for (Index i = 0; i < n; ++i) {
    col.noalias() = kmat.transpose() * ConstRowMap<Scalar>(input.data() + i * cin * pixels, cin, pixels);
    detail::col2im(col.data(), cout, g, out.data() + i * cout * g.in_h * g.in_w);
  }
  detail::add_channel_bias(out, bias);
  require_finite(out, "conv_transpose2d");
  return out;
}

template <typename Scalar>
Conv2dGrads<Scalar> conv_transpose2d_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                                              bool has_bias, const Tensor<Scalar>& grad_out,
                                              Index stride = 2) {
  const Index n = input.dim(0), cin = input.dim(1), cout = kernel.dim(1);
  const auto g = detail::transpose_window(input.dim(2), input.dim(3), kernel.dim(2), kernel.dim(3), stride);
  require_shape(grad_out, {n, cout, g.in_h, g.in_w}, "conv_transpose2d_backward grad");
  const Index patch = cout * g.kh * g.kw, pixels = g.out_h * g.out_w;

  Conv2dGrads<Scalar> grads{Tensor<Scalar>::zeros_like(input), Tensor<Scalar>::zeros_like(kernel), {}};
  RowMatrix<Scalar> col(patch, pixels);
  ConstRowMap<Scalar> kmat(kernel.data(), cin, patch);
  RowMap<Scalar> dk(grads.kernel.data(), cin, patch);
  for (Index i = 0; i < n; ++i) {
    detail::im2col(grad_out.data() + i * cout * g.in_h * g.in_w, cout, g, col.data());
    ConstRowMap<Scalar> x(input.data() + i * cin * pixels, cin, pixels);
    RowMap<Scalar>(grads.input.data() + i * cin * pixels, cin, pixels).noalias() = kmat * col;
    dk.noalias() += x * col.transpose();
  }
  if (has_bias) grads.bias = detail::channel_sums(grad_out);
  return grads;
}

// ---------------------------------------------------------------------------
// max pooling

template <typename Scalar>
struct PoolResult {
  Tensor<Scalar> output;
  std::vector<Index> argmax;  // flat input offset feeding each output element
};

/// Disjoint 2x2 windows. Ties go to the first maximum in row-major window order.
template <typename Scalar>
PoolResult<Scalar> maxpool2x2(const Tensor<Scalar>& input) {
  require_rank(input, 4, "maxpool2x2 input");
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2)
    throw ShapeError("maxpool2x2 needs even spatial extents, got " + shape_str(input.shape()));
  const Index oh = h / 2, ow = w / 2;
  PoolResult<Scalar> r{Tensor<Scalar>({n, c, oh, ow}), std::vector<Index>(static_cast<std::size_t>(n * c * oh * ow))};
  Index o = 0;
  for (Index plane = 0; plane < n * c; ++plane) {
    const Index base = plane * h * w;
    for (Index y = 0; y < oh; ++y)
      for (Index x = 0; x < ow; ++x, ++o) {
        const Index cand[4] = {base + 2 * y * w + 2 * x, base + 2 * y * w + 2 * x + 1,
                               base + (2 * y + 1) * w + 2 * x, base + (2 * y + 1) * w + 2 * x + 1};
        Index best = cand[0];
        for (int k = 1; k < 4; ++k)
          if (input[cand[k]] > input[best]) best = cand[k];
        r.output[o] = input[best];
        r.argmax[static_cast<std::size_t>(o)] = best;
      }
  }
  return r;
}

template <typename Scalar>
Tensor<Scalar> maxpool2x2_backward(const Shape& input_shape, const std::vector<Index>& argmax,
                                   const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> grad(input_shape);
  for (Index o = 0; o < grad_out.size(); ++o) grad[argmax[static_cast<std::size_t>(o)]] += grad_out[o];
  return grad;
}

// ---------------------------------------------------------------------------
// batch normalization

template <typename Scalar>
struct BatchNormParams {
  Tensor<Scalar> scale, shift, running_mean, running_var;
  Scalar momentum = Scalar(0.9);
  Scalar epsilon = Scalar(1e-5);

  static BatchNormParams identity(Index channels) {
    return {Tensor<Scalar>({channels}, Scalar(1)), Tensor<Scalar>({channels}),
            Tensor<Scalar>({channels}), Tensor<Scalar>({channels}, Scalar(1))};
  }
  Index channels() const { return scale.size(); }
};

template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> normalized;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mean, var, inv_std;
  Mode mode = Mode::train;
};

/// Normalizes with batch statistics (train) or running statistics (eval), then applies
/// scale/shift. Does not touch the running statistics; see `batchnorm`.
template <typename Scalar>
Tensor<Scalar> batchnorm_forward(const Tensor<Scalar>& input, const Tensor<Scalar>& scale,
                                 const Tensor<Scalar>& shift, const BatchNormParams<Scalar>& stats,
                                 Mode mode, BatchNormCache<Scalar>& cache) {
  require_rank(input, 4, "batchnorm input");
  const Index n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  require_shape(scale, {c}, "batchnorm scale");
  require_shape(shift, {c}, "batchnorm shift");
  if (!(stats.epsilon > 0)) throw NumericalError("batchnorm epsilon must be positive");
  cache.mode = mode;
  cache.mean.resize(c);
  cache.var.resize(c);
  if (mode == Mode::train) {
    const Index count = n * plane;
    if (count < 2) throw ShapeError("batchnorm train mode needs N*H*W >= 2");
    for (Index ch = 0; ch < c; ++ch) {
      Scalar sum = 0;
      for (Index i = 0; i < n; ++i) sum += input.array().segment((i * c + ch) * plane, plane).sum();
      const Scalar mean = sum / Scalar(count);
      Scalar sq = 0;
      for (Index i = 0; i < n; ++i)
        sq += (input.array().segment((i * c + ch) * plane, plane) - mean).square().sum();
      cache.mean[ch] = mean;
      cache.var[ch] = sq / Scalar(count);
    }
  } else {
    require_shape(stats.running_mean, {c}, "batchnorm running_mean");
    require_shape(stats.running_var, {c}, "batchnorm running_var");
    cache.mean = stats.running_mean.array();
    cache.var = stats.running_var.array();
  }
  cache.inv_std = (cache.var + stats.epsilon).rsqrt();
  cache.normalized = Tensor<Scalar>(input.shape());
  Tensor<Scalar> out(input.shape());
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (i * c + ch) * plane;
      cache.normalized.array().segment(off, plane) =
          (input.array().segment(off, plane) - cache.mean[ch]) * cache.inv_std[ch];
      out.array().segment(off, plane) = cache.normalized.array().segment(off, plane) * scale[ch] + shift[ch];
    }
  require_finite(out, "batchnorm");
  return out;
}

/// Exponential moving average update; the running variance uses the unbiased estimate.
template <typename Scalar>
void update_running_stats(BatchNormParams<Scalar>& p, const Eigen::Array<Scalar, Eigen::Dynamic, 1>& mean,
                          const Eigen::Array<Scalar, Eigen::Dynamic, 1>& var, Index count) {
  const Scalar unbias = count > 1 ? Scalar(count) / Scalar(count - 1) : Scalar(1);
  p.running_mean.array() = p.momentum * p.running_mean.array() + (1 - p.momentum) * mean;
  p.running_var.array() = p.momentum * p.running_var.array() + (1 - p.momentum) * var * unbias;
}

template <typename Scalar>
Tensor<Scalar> batchnorm(const Tensor<Scalar>& input, BatchNormParams<Scalar>& params, Mode mode,
                         BatchNormCache<Scalar>* cache_out = nullptr) {
  BatchNormCache<Scalar> local;
  BatchNormCache<Scalar>& cache = cache_out ? *cache_out : local;
  Tensor<Scalar> out = batchnorm_forward(input, params.scale, params.shift, params, mode, cache);
  if (mode == Mode::train)
    update_running_stats(params, cache.mean, cache.var, input.dim(0) * input.dim(2) * input.dim(3));
  return out;
}

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input, scale, shift;
};

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm_backward(const Tensor<Scalar>& grad_out, const Tensor<Scalar>& scale,
                                          const BatchNormCache<Scalar>& cache) {
  const Index n = grad_out.dim(0), c = grad_out.dim(1), plane = grad_out.dim(2) * grad_out.dim(3);
  const Scalar count = Scalar(n * plane);
  BatchNormGrads<Scalar> g{Tensor<Scalar>(grad_out.shape()), Tensor<Scalar>({c}), Tensor<Scalar>({c})};
  for (Index ch = 0; ch < c; ++ch) {
    Scalar sum_dy = 0, sum_dy_xhat = 0;
    for (Index i = 0; i < n; ++i) {
      const Index off = (i * c + ch) * plane;
      sum_dy += grad_out.array().segment(off, plane).sum();
      sum_dy_xhat += (grad_out.array().segment(off, plane) * cache.normalized.array().segment(off, plane)).sum();
    }
    g.shift[ch] = sum_dy;
    g.scale[ch] = sum_dy_xhat;
    const Scalar k = scale[ch] * cache.inv_std[ch];
    for (Index i = 0; i < n; ++i) {
      const Index off = (i * c + ch) * plane;
      if (cache.mode == Mode::train)
        g.input.array().segment(off, plane) =
            k * (grad_out.array().segment(off, plane) - sum_dy / count -
                 cache.normalized.array().segment(off, plane) * (sum_dy_xhat / count));
      else
        g.input.array().segment(off, plane) = k * grad_out.array().segment(off, plane);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// pointwise

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.array().max(Scalar(0)));
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& grad_out) {
  return Tensor<Scalar>(x.shape(), (x.array() > Scalar(0)).select(grad_out.array(), Scalar(0)));
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar v = x[i];
    if (v >= 0) {
      y[i] = Scalar(1) / (Scalar(1) + std::exp(-v));
    } else {
      const Scalar e = std::exp(v);
      y[i] = e / (Scalar(1) + e);
    }
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> sigmoid_backward(const Tensor<Scalar>& y, const Tensor<Scalar>& grad_out) {
  return Tensor<Scalar>(y.shape(), grad_out.array() * y.array() * (Scalar(1) - y.array()));
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.array().tanh());
}

template <typename Scalar>
Tensor<Scalar> tanh_backward(const Tensor<Scalar>& y, const Tensor<Scalar>& grad_out) {
  return Tensor<Scalar>(y.shape(), grad_out.array() * (Scalar(1) - y.array().square()));
}

template <typename Scalar>
Tensor<Scalar> elementwise_mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("elementwise_mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<Scalar> out(a.shape(), a.array() * b.array());
  require_finite(out, "elementwise_mul");
  return out;
}

template <typename Scalar>
Tensor<Scalar> elementwise_add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("elementwise_add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<Scalar> out(a.shape(), a.array() + b.array());
  require_finite(out, "elementwise_add");
  return out;
}

// ---------------------------------------------------------------------------
// softmax + weighted cross-entropy

/// Softmax over the class axis of [N,K,H,W].
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  require_rank(logits, 4, "softmax logits");
  const Index n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  Tensor<Scalar> p(logits.shape());
  for (Index i = 0; i < n; ++i) {
    ConstRowMap<Scalar> z(logits.data() + i * k * plane, k, plane);
    RowMap<Scalar> out(p.data() + i * k * plane, k, plane);
    const auto zmax = z.colwise().maxCoeff();
    out = (z.rowwise() - zmax).array().exp().matrix();
    const auto denom = out.colwise().sum().eval();
    out.array().rowwise() /= denom.array();
  }
  return p;
}

template <typename Scalar>
struct SoftmaxCeResult {
  Scalar loss;
  Tensor<Scalar> probabilities;
};

namespace detail {
template <typename Scalar>
void check_ce_inputs(const Tensor<Scalar>& logits, const LabelTensor& labels, const Tensor<Scalar>& weights) {
  require_rank(logits, 4, "softmax_ce logits");
  const Index k = logits.dim(1);
  require_shape(labels, {logits.dim(0), logits.dim(2), logits.dim(3)}, "softmax_ce labels");
  require_shape(weights, {k}, "softmax_ce class weights");
  for (Index i = 0; i < labels.size(); ++i)
    if (labels[i] >= k)
      throw ShapeError("softmax_ce label " + std::to_string(int(labels[i])) + " out of range [0," +
                       std::to_string(k) + ")");
}
}  // namespace detail

/// loss = mean over pixels of weight[label] * -log p[label].
template <typename Scalar>
SoftmaxCeResult<Scalar> softmax_ce_loss(const Tensor<Scalar>& logits, const LabelTensor& labels,
                                        const Tensor<Scalar>& class_weights) {
  detail::check_ce_inputs(logits, labels, class_weights);
  const Index n = logits.dim(0), k = logits.dim(1), plane = logits.dim(2) * logits.dim(3);
  SoftmaxCeResult<Scalar> r{0, softmax(logits)};
  Scalar total = 0;
  for (Index i = 0; i < n; ++i)
    for (Index px = 0; px < plane; ++px) {
      const Index label = labels[i * plane + px];
      // log-softmax evaluated directly for accuracy at saturated logits
      Scalar zmax = -std::numeric_limits<Scalar>::infinity();
      for (Index c = 0; c < k; ++c) zmax = std::max(zmax, logits[(i * k + c) * plane + px]);
      Scalar s = 0;
      for (Index c = 0; c < k; ++c) s += std::exp(logits[(i * k + c) * plane + px] - zmax);
      const Scalar logp = logits[(i * k + label) * plane + px] - zmax - std::log(s);
      total -= class_weights[label] * logp;
    }
  r.loss = total / Scalar(n * plane);
  if (!std::isfinite(r.loss)) throw NumericalError("softmax_ce_loss produced a non-finite loss");
  return r;
}

template <typename Scalar>
Tensor<Scalar> softmax_ce_backward(const Tensor<Scalar>& probabilities, const LabelTensor& labels,
                                   const Tensor<Scalar>& class_weights, Scalar grad_loss = Scalar(1)) {
  const Index n = probabilities.dim(0), k = probabilities.dim(1), plane = probabilities.dim(2) * probabilities.dim(3);
  Tensor<Scalar> g(probabilities.shape());
  const Scalar scale = grad_loss / Scalar(n * plane);
  for (Index i = 0; i < n; ++i)
    for (Index px = 0; px < plane; ++px) {
      const Index label = labels[i * plane + px];
      const Scalar w = class_weights[label] * scale;
      for (Index c = 0; c < k; ++c) {
        const Index off = (i * k + c) * plane + px;
        g[off] = w * (probabilities[off] - (c == label ? Scalar(1) : Scalar(0)));
      }
    }
  return g;
}

}  // namespace mmseg
