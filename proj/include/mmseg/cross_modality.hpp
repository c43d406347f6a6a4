#pragma once

// Modality stacking, the cross-modality convolution (a learned length-M filter per
// channel applied across the modality axis) and multiplicative multi-resolution fusion.

#include <algorithm>
#include <utility>
#include <vector>

#include "mmseg/autograd.hpp"

namespace mmseg {

/// Per-channel filters over the modality axis: weights [C,M], bias [C] (may be empty).
template <typename Scalar>
struct CmcParams {
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;

  Index channels() const { return weights.dim(0); }
  Index modalities() const { return weights.dim(1); }
};

namespace detail {

struct StackLayout {
  Index outer;     // product of extents before C
  Index channels;  // C
  Index modalities;
  Index plane;     // h*w
};

template <typename Scalar>
StackLayout stack_layout(const Tensor<Scalar>& stack) {
  if (stack.rank() < 4) throw ShapeError("expected a modality stack [..., C, M, h, w], got " + shape_str(stack.shape()));
  const Index r = stack.rank();
  StackLayout l{1, stack.dim(r - 4), stack.dim(r - 3), stack.dim(r - 2) * stack.dim(r - 1)};
  l.outer = stack.size() / (l.channels * l.modalities * l.plane);
  return l;
}

template <typename Scalar>
void check_cmc_params(const StackLayout& l, const Tensor<Scalar>& weights, const Tensor<Scalar>& bias) {
  require_shape(weights, {l.channels, l.modalities}, "cmc weights");
  if (!bias.empty()) require_shape(bias, {l.channels}, "cmc bias");
}

}  // namespace detail

/// M maps of shape [..., C, h, w] -> one stack [..., C, M, h, w]; out[c, m] = input_m[c].
template <typename Scalar>
Tensor<Scalar> stack_modalities(const std::vector<Tensor<Scalar>>& per_modality) {
  if (per_modality.empty()) throw ShapeError("stack_modalities needs at least one modality");
  const Shape& shape = per_modality.front().shape();
  if (shape.size() < 3) throw ShapeError("modality features need rank >= 3, got " + shape_str(shape));
  for (const auto& t : per_modality)
    if (t.shape() != shape)
      throw ShapeError("stack_modalities: modality shapes differ, " + shape_str(shape) + " vs " + shape_str(t.shape()));
  const Index plane = shape[shape.size() - 1] * shape[shape.size() - 2];
  const Index blocks = per_modality.front().size() / plane;
  const Index m_count = static_cast<Index>(per_modality.size());
  Shape out_shape = shape;
  out_shape.insert(out_shape.end() - 2, m_count);
  Tensor<Scalar> out(out_shape);
  for (Index b = 0; b < blocks; ++b)
    for (Index m = 0; m < m_count; ++m)
      out.array().segment((b * m_count + m) * plane, plane) =
          per_modality[static_cast<std::size_t>(m)].array().segment(b * plane, plane);
  return out;
}

/// Inverse of stack_modalities.
template <typename Scalar>
std::vector<Tensor<Scalar>> unstack_modalities(const Tensor<Scalar>& stack) {
  const auto l = detail::stack_layout(stack);
  Shape shape = stack.shape();
  shape.erase(shape.end() - 3);
  std::vector<Tensor<Scalar>> out(static_cast<std::size_t>(l.modalities), Tensor<Scalar>(shape));
  const Index blocks = l.outer * l.channels;
  for (Index b = 0; b < blocks; ++b)
    for (Index m = 0; m < l.modalities; ++m)
      out[static_cast<std::size_t>(m)].array().segment(b * l.plane, l.plane) =
          stack.array().segment((b * l.modalities + m) * l.plane, l.plane);
  return out;
}

/// out[..., c, y, x] = sum_m weights[c, m] * stack[..., c, m, y, x] + bias[c].
/// Modality terms are summed in ascending order of value, so the result is independent of
/// the order in which the modalities were stacked.
template <typename Scalar>
Tensor<Scalar> cmc_forward(const Tensor<Scalar>& stack, const Tensor<Scalar>& weights, const Tensor<Scalar>& bias) {
  const auto l = detail::stack_layout(stack);
  detail::check_cmc_params(l, weights, bias);
  Shape out_shape = stack.shape();
  out_shape.erase(out_shape.end() - 3);
  Tensor<Scalar> out(out_shape);
  std::vector<Scalar> terms(static_cast<std::size_t>(l.modalities));
  for (Index o = 0; o < l.outer; ++o)
    for (Index c = 0; c < l.channels; ++c) {
      const Scalar* in = stack.data() + (o * l.channels + c) * l.modalities * l.plane;
      Scalar* dst = out.data() + (o * l.channels + c) * l.plane;
      const Scalar b = bias.empty() ? Scalar(0) : bias[c];
      for (Index p = 0; p < l.plane; ++p) {
        for (Index m = 0; m < l.modalities; ++m)
          terms[static_cast<std::size_t>(m)] = weights[c * l.modalities + m] * in[m * l.plane + p];
        std::sort(terms.begin(), terms.end());
        Scalar acc = terms[0];
        for (std::size_t m = 1; m < terms.size(); ++m) acc += terms[m];
        dst[p] = acc + b;
      }
    }
  require_finite(out, "cmc_forward");
  return out;
}

template <typename Scalar>
Tensor<Scalar> cmc_forward(const Tensor<Scalar>& stack, const CmcParams<Scalar>& params) {
  return cmc_forward(stack, params.weights, params.bias);
}

template <typename Scalar>
struct CmcGrads {
  Tensor<Scalar> stack, weights, bias;
};

template <typename Scalar>
CmcGrads<Scalar> cmc_backward(const Tensor<Scalar>& stack, const Tensor<Scalar>& weights, bool has_bias,
                              const Tensor<Scalar>& grad_out) {
  const auto l = detail::stack_layout(stack);
  CmcGrads<Scalar> g{Tensor<Scalar>(stack.shape()), Tensor<Scalar>(weights.shape()), {}};
  if (has_bias) g.bias = Tensor<Scalar>({l.channels});
  for (Index o = 0; o < l.outer; ++o)
    for (Index c = 0; c < l.channels; ++c) {
      const auto dy = grad_out.array().segment((o * l.channels + c) * l.plane, l.plane);
      const Index base = (o * l.channels + c) * l.modalities * l.plane;
      for (Index m = 0; m < l.modalities; ++m) {
        const Index off = base + m * l.plane;
        g.stack.array().segment(off, l.plane) = weights[c * l.modalities + m] * dy;
        g.weights[c * l.modalities + m] += (dy * stack.array().segment(off, l.plane)).sum();
      }
      if (has_bias) g.bias[c] += dy.sum();
    }
  return g;
}

/// Multi-resolution fusion: elementwise product of a CMC map with the decoder map at the same scale.
template <typename Scalar>
Tensor<Scalar> mrf_fuse(const Tensor<Scalar>& cmc_map, const Tensor<Scalar>& decoder_map) {
  return elementwise_mul(cmc_map, decoder_map);
}

// differentiable forms

template <typename Scalar>
Var<Scalar> stack_modalities(const std::vector<Var<Scalar>>& per_modality) {
  std::vector<Tensor<Scalar>> values;
  values.reserve(per_modality.size());
  for (const auto& v : per_modality) values.push_back(v.value());
  return make_op<Scalar>("stack_modalities", stack_modalities(values), per_modality, [](Node<Scalar>& n) {
    auto parts = unstack_modalities(n.grad);
    for (std::size_t m = 0; m < parts.size(); ++m) n.inputs[m]->accumulate(parts[m]);
  });
}

template <typename Scalar>
Var<Scalar> cmc_forward(const Var<Scalar>& stack, const Var<Scalar>& weights, const Var<Scalar>& bias) {
  const Tensor<Scalar> no_bias;
  Tensor<Scalar> y = cmc_forward(stack.value(), weights.value(), bias.defined() ? bias.value() : no_bias);
  return make_op<Scalar>("cmc", std::move(y), {stack, weights, bias}, [](Node<Scalar>& n) {
    auto g = cmc_backward(n.inputs[0]->value, n.inputs[1]->value, n.input_needs_grad(2), n.grad);
    n.inputs[0]->accumulate(g.stack);
    n.inputs[1]->accumulate(g.weights);
    if (n.input_needs_grad(2)) n.inputs[2]->accumulate(g.bias);
  });
}

template <typename Scalar>
Var<Scalar> mrf_fuse(const Var<Scalar>& cmc_map, const Var<Scalar>& decoder_map) {
  return elementwise_mul(cmc_map, decoder_map);
}

}  // namespace mmseg
