#include "mmseg/gradcheck_suite.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "mmseg/convlstm.hpp"
#include "mmseg/cross_modality.hpp"
#include "mmseg/network.hpp"

namespace mmseg {

namespace {

using VarD = Var<double>;
using Vars = std::vector<VarD>;

class Suite {
 public:
  Suite(std::uint64_t seed, double tolerance) : rng_(seed) {
    report_.tolerance = tolerance;
    opts_.tolerance = tolerance;
    opts_.seed = seed;
  }

  TensorD normal(const Shape& shape, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    TensorD t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng_);
    return t;
  }

  /// Values bounded away from 0 so a probe never crosses the ReLU kink.
  TensorD off_zero(const Shape& shape) {
    std::uniform_real_distribution<double> mag(0.1, 1.5);
    std::bernoulli_distribution sign;
    TensorD t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = sign(rng_) ? mag(rng_) : -mag(rng_);
    return t;
  }

  /// Distinct values at least 0.01 apart so max-pool winners never swap under a probe.
  TensorD spaced(const Shape& shape) {
    TensorD t(shape);
    std::vector<Index> order(static_cast<std::size_t>(t.size()));
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng_);
    for (Index i = 0; i < t.size(); ++i) t[i] = 0.01 * double(order[static_cast<std::size_t>(i)]) - 0.005 * double(t.size());
    return t;
  }

  LabelTensor labels(const Shape& shape, Index classes) {
    std::uniform_int_distribution<int> dist(0, int(classes) - 1);
    LabelTensor t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<std::uint8_t>(dist(rng_));
    return t;
  }

  void check(const std::string& layer, const GradFn& fn, const std::vector<TensorD>& inputs,
             const std::vector<std::string>& names, GradCheckOptions opts) {
    opts.seed = rng_();
    auto r = grad_check(fn, inputs, names, opts);
    for (auto& e : r.entries) {
      e.name = layer + "." + e.name;
      report_.entries.push_back(std::move(e));
    }
  }
  void check(const std::string& layer, const GradFn& fn, const std::vector<TensorD>& inputs,
             const std::vector<std::string>& names) {
    check(layer, fn, inputs, names, opts_);
  }

  GradCheckOptions options() const { return opts_; }
  GradCheckReport take() { return std::move(report_); }

 private:
  std::mt19937_64 rng_;
  GradCheckOptions opts_;
  GradCheckReport report_;
};

ConvLstmWeights<VarD> lstm_from(const Vars& v, std::size_t first) {
  ConvLstmWeights<VarD> w;
  w.visit([&](const char*, VarD& slot) { slot = v[first++]; });
  return w;
}

std::vector<std::string> lstm_names() {
  std::vector<std::string> names;
  ConvLstmParams<double> p;
  p.visit([&](const char* name, TensorD&) { names.emplace_back(name); });
  return names;
}

std::vector<TensorD> lstm_tensors(Suite& s, Index cx, Index ch, Index k) {
  auto p = make_convlstm_params<double>(cx, ch, k);
  std::vector<TensorD> out;
  p.visit([&](const char*, TensorD& t) { out.push_back(s.normal(t.shape(), 0.4)); });
  return out;
}

void layer_checks(Suite& s) {
  for (auto pad : {Padding::same, Padding::valid}) {
    s.check(pad == Padding::same ? "conv2d_same" : "conv2d_valid",
            [pad](const Vars& v) { return conv2d(v[0], v[1], v[2], pad); },
            {s.normal({2, 3, 5, 5}), s.normal({4, 3, 3, 3}), s.normal({4})}, {"input", "kernel", "bias"});
  }
  for (Index k : {2, 4}) {
    s.check("conv_transpose2d_k" + std::to_string(k),
            [](const Vars& v) { return conv_transpose2d(v[0], v[1], v[2], 2); },
            {s.normal({2, 3, 3, 3}), s.normal({3, 4, k, k}), s.normal({4})}, {"input", "kernel", "bias"});
  }
  s.check("maxpool2x2", [](const Vars& v) { return maxpool2x2(v[0]); }, {s.spaced({2, 3, 4, 4})}, {"input"});

  for (auto mode : {Mode::train, Mode::eval}) {
    BatchNormParams<double> stats = BatchNormParams<double>::identity(3);
    stats.running_mean = s.normal({3}, 0.5);
    stats.running_var = TensorD({3}, {0.5, 1.3, 2.0});
    auto scale = s.normal({3});
    scale.array() += 1.0;
    s.check(mode == Mode::train ? "batchnorm_train" : "batchnorm_eval",
            [stats, mode](const Vars& v) { return batchnorm(v[0], v[1], v[2], stats, mode); },
            {s.normal({4, 3, 3, 3}), scale, s.normal({3})}, {"input", "scale", "shift"});
  }

  s.check("relu", [](const Vars& v) { return relu(v[0]); }, {s.off_zero({2, 3, 4, 4})}, {"input"});
  s.check("sigmoid", [](const Vars& v) { return sigmoid(v[0]); }, {s.normal({2, 3, 4, 4}, 2.0)}, {"input"});
  s.check("tanh", [](const Vars& v) { return tanh(v[0]); }, {s.normal({2, 3, 4, 4}, 2.0)}, {"input"});

  {
    const LabelTensor labels = s.labels({2, 3, 3}, 5);
    TensorD weights = s.normal({5}, 0.3);
    weights.array() = weights.array().abs() + 0.5;
    s.check("softmax_ce", [labels, weights](const Vars& v) { return softmax_ce_loss(v[0], labels, weights); },
            {s.normal({2, 5, 3, 3}, 2.0)}, {"logits"});
  }

  s.check("cmc_forward", [](const Vars& v) { return cmc_forward(v[0], v[1], v[2]); },
          {s.normal({2, 3, 4, 3, 3}), s.normal({3, 4}), s.normal({3})}, {"stack", "weights", "bias"});
  s.check("mrf_fuse", [](const Vars& v) { return mrf_fuse(v[0], v[1]); },
          {s.normal({2, 3, 4, 4}), s.normal({2, 3, 4, 4})}, {"cmc_map", "decoder_map"});
}

void lstm_checks(Suite& s) {
  const Index cx = 3, ch = 4, k = 3;
  const auto weights = lstm_tensors(s, cx, ch, k);
  const auto weight_names = lstm_names();

  // one step from a random state; the output couples h and c so both paths are covered
  std::vector<TensorD> inputs{s.normal({2, cx, 4, 4}), s.normal({2, ch, 4, 4}, 0.5), s.normal({2, ch, 4, 4}, 0.5)};
  std::vector<std::string> names{"x", "h", "c"};
  inputs.insert(inputs.end(), weights.begin(), weights.end());
  names.insert(names.end(), weight_names.begin(), weight_names.end());
  s.check("convlstm_step",
          [](const Vars& v) {
            const auto next = convlstm_step(v[0], {v[1], v[2]}, lstm_from(v, 3));
            return next.h + next.c;
          },
          inputs, names);

  // three-step unroll from the zero state
  inputs = {s.normal({1, cx, 4, 4}), s.normal({1, cx, 4, 4}), s.normal({1, cx, 4, 4})};
  names = {"x0", "x1", "x2"};
  inputs.insert(inputs.end(), weights.begin(), weights.end());
  names.insert(names.end(), weight_names.begin(), weight_names.end());
  s.check("convlstm_unroll3",
          [](const Vars& v) { return concat_leading(convlstm_sequence(Vars{v[0], v[1], v[2]}, lstm_from(v, 3))); },
          inputs, names);
}

void end_to_end_check(Suite& s, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.encoder_channels = {2, 3, 3, 4};
  cfg.input_height = cfg.input_width = 16;
  cfg.seed = seed;
  const auto params = init_params<double>(cfg);
  const Index steps = cfg.sequence_length, batch = 1;

  const TensorD images = s.normal({steps * batch, cfg.modality_count, 16, 16});
  const LabelTensor labels = s.labels({steps * batch, 16, 16}, cfg.class_count);
  TensorD class_weights = s.normal({cfg.class_count}, 0.3);
  class_weights.array() = class_weights.array().abs() + 0.5;

  std::vector<TensorD> inputs;
  std::vector<std::string> names;
  params.visit([&](const std::string& name, const TensorD& t, TensorRole role) {
    if (role != TensorRole::trainable) return;
    inputs.push_back(t);
    names.push_back(name);
  });

  auto fn = [&](const Vars& v) {
    ModelParams<double> p = params;
    ParamBinder<double> bind(false);
    std::size_t i = 0;
    p.visit([&](const std::string&, TensorD& t, TensorRole role) {
      if (role != TensorRole::trainable) return;
      t = v[i].value();
      bind.preset(t, v[i++]);
    });
    const auto g = forward_graph(p, cfg, images, batch, Mode::train, bind);
    return softmax_ce_loss(g.logits, labels, class_weights);
  };
  GradCheckOptions opts = s.options();
  opts.step = 1e-5;
  opts.kink_guard = true;
  opts.max_probes = 4;
  s.check("end_to_end", fn, inputs, names, opts);
}

}  // namespace

GradCheckReport run_gradcheck_suite(std::uint64_t seed, double tolerance) {
  Suite s(seed, tolerance);
  layer_checks(s);
  lstm_checks(s);
  end_to_end_check(s, seed);
  return s.take();
}

}  // namespace mmseg
