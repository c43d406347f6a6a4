#pragma once

// Convolutional LSTM: the usual LSTM gate equations with every matrix product replaced by
// a same-padded convolution, unrolled over a slice sequence with shared weights.

#include <string>
#include <vector>

#include "mmseg/autograd.hpp"

namespace mmseg {

/// Gate kernels and biases. `T` is Tensor<S> for stored parameters or Var<S> inside a graph.
/// Input kernels are [Ch,Cx,k,k], hidden kernels [Ch,Ch,k,k], biases [Ch].
template <typename T>
struct ConvLstmWeights {
  T w_xi, w_hi, w_xf, w_hf, w_xc, w_hc, w_xo, w_ho;
  T b_i, b_f, b_c, b_o;

  template <typename F>
  void visit(F&& f) {
    f("w_xi", w_xi); f("w_hi", w_hi); f("w_xf", w_xf); f("w_hf", w_hf);
    f("w_xc", w_xc); f("w_hc", w_hc); f("w_xo", w_xo); f("w_ho", w_ho);
    f("b_i", b_i); f("b_f", b_f); f("b_c", b_c); f("b_o", b_o);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<ConvLstmWeights*>(this)->visit([&](const char* name, const T& t) { f(name, t); });
  }
};

template <typename Scalar>
using ConvLstmParams = ConvLstmWeights<Tensor<Scalar>>;

template <typename Scalar>
ConvLstmParams<Scalar> make_convlstm_params(Index input_channels, Index hidden_channels, Index kernel) {
  ConvLstmParams<Scalar> p;
  p.visit([&](const std::string& name, Tensor<Scalar>& t) {
    if (name[0] == 'b')
      t = Tensor<Scalar>({hidden_channels});
    else
      t = Tensor<Scalar>({hidden_channels, name[2] == 'x' ? input_channels : hidden_channels, kernel, kernel});
  });
  return p;
}

template <typename Scalar>
Index parameter_count(const ConvLstmParams<Scalar>& p) {
  Index n = 0;
  p.visit([&](const char*, const Tensor<Scalar>& t) { n += t.size(); });
  return n;
}

template <typename Scalar>
void validate(const ConvLstmParams<Scalar>& p) {
  const Index ch = p.w_xi.dim(0), cx = p.w_xi.dim(1), k = p.w_xi.dim(2);
  p.visit([&](const std::string& name, const Tensor<Scalar>& t) {
    if (name[0] == 'b')
      require_shape(t, {ch}, "convlstm " + name);
    else
      require_shape(t, {ch, name[2] == 'x' ? cx : ch, k, k}, "convlstm " + name);
  });
}

template <typename T>
struct ConvLstmState {
  T h;  // hidden
  T c;  // cell
};

template <typename Scalar>
ConvLstmWeights<Var<Scalar>> bind_lstm(const ConvLstmParams<Scalar>& p, ParamBinder<Scalar>& binder) {
  ConvLstmWeights<Var<Scalar>> v;
  v.w_xi = binder(p.w_xi); v.w_hi = binder(p.w_hi); v.w_xf = binder(p.w_xf); v.w_hf = binder(p.w_hf);
  v.w_xc = binder(p.w_xc); v.w_hc = binder(p.w_hc); v.w_xo = binder(p.w_xo); v.w_ho = binder(p.w_ho);
  v.b_i = binder(p.b_i); v.b_f = binder(p.b_f); v.b_c = binder(p.b_c); v.b_o = binder(p.b_o);
  return v;
}

/// One step on batched maps: x [N,Cx,h,w], state h/c [N,Ch,h,w]. Returns the next state;
/// the step output is `state.h`.
template <typename Scalar>
ConvLstmState<Var<Scalar>> convlstm_step(const Var<Scalar>& x, const ConvLstmState<Var<Scalar>>& state,
                                         const ConvLstmWeights<Var<Scalar>>& w) {
  if (x.shape().size() != 4 || state.h.shape().size() != 4)
    throw ShapeError("convlstm_step expects batched [N,C,h,w] maps");
  if (state.h.shape() != state.c.shape())
    throw ShapeError("convlstm_step: hidden " + shape_str(state.h.shape()) + " and cell " +
                     shape_str(state.c.shape()) + " shapes differ");
  if (x.shape()[0] != state.h.shape()[0] || x.shape()[2] != state.h.shape()[2] || x.shape()[3] != state.h.shape()[3])
    throw ShapeError("convlstm_step: input " + shape_str(x.shape()) + " does not match state " +
                     shape_str(state.h.shape()));
  const Var<Scalar> none;
  auto gate = [&](const Var<Scalar>& wx, const Var<Scalar>& wh, const Var<Scalar>& b) {
    return conv2d(x, wx, b, Padding::same) + conv2d(state.h, wh, none, Padding::same);
  };
  const Var<Scalar> i = sigmoid(gate(w.w_xi, w.w_hi, w.b_i));
  const Var<Scalar> f = sigmoid(gate(w.w_xf, w.w_hf, w.b_f));
  const Var<Scalar> g = tanh(gate(w.w_xc, w.w_hc, w.b_c));
  const Var<Scalar> o = sigmoid(gate(w.w_xo, w.w_ho, w.b_o));
  ConvLstmState<Var<Scalar>> next;
  next.c = state.c * f + i * g;
  next.h = o * tanh(next.c);
  return next;
}

template <typename Scalar>
ConvLstmState<Var<Scalar>> zero_state(const Shape& input_shape, Index hidden_channels) {
  Shape s = input_shape;
  s[1] = hidden_channels;
  return {Var<Scalar>::constant(Tensor<Scalar>(s), "h0"), Var<Scalar>::constant(Tensor<Scalar>(s), "c0")};
}

/// Unrolls over `xs` from a zero state; returns the hidden map of every step.
template <typename Scalar>
std::vector<Var<Scalar>> convlstm_sequence(const std::vector<Var<Scalar>>& xs, const ConvLstmWeights<Var<Scalar>>& w) {
  if (xs.empty()) throw ShapeError("convlstm_sequence needs at least one step");
  auto state = zero_state<Scalar>(xs.front().shape(), w.w_hi.shape()[0]);
  std::vector<Var<Scalar>> hidden;
  hidden.reserve(xs.size());
  for (const auto& x : xs) {
    state = convlstm_step(x, state, w);
    hidden.push_back(state.h);
  }
  return hidden;
}

// Plain-tensor conveniences; no gradients are recorded.

template <typename Scalar>
ConvLstmState<Tensor<Scalar>> convlstm_step(const Tensor<Scalar>& x, const ConvLstmState<Tensor<Scalar>>& state,
                                            const ConvLstmParams<Scalar>& params) {
  ParamBinder<Scalar> binder(false);
  auto next = convlstm_step(Var<Scalar>::constant(x), {Var<Scalar>::constant(state.h), Var<Scalar>::constant(state.c)},
                            bind_lstm(params, binder));
  return {next.h.value(), next.c.value()};
}

template <typename Scalar>
std::vector<Tensor<Scalar>> convlstm_sequence(const std::vector<Tensor<Scalar>>& xs, const ConvLstmParams<Scalar>& params) {
  ParamBinder<Scalar> binder(false);
  std::vector<Var<Scalar>> in;
  for (const auto& x : xs) in.push_back(Var<Scalar>::constant(x));
  std::vector<Tensor<Scalar>> out;
  for (const auto& h : convlstm_sequence(in, bind_lstm(params, binder))) out.push_back(h.value());
  return out;
}

}  // namespace mmseg
