#pragma once

// The full slice-sequence segmentation model: one encoder per modality, a cross-modality
// convolution after every pooling stage, a convolutional LSTM over the deepest CMC maps,
// and a decoder that upsamples each hidden map and fuses it multiplicatively with the
// CMC map of the matching scale before a per-pixel softmax classifier.
//
// Batched tensors are time-major: sample index n = t * batch + b.

#include <Eigen/QR>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmseg/convlstm.hpp"
#include "mmseg/cross_modality.hpp"

namespace mmseg {

struct ModelConfig {
  Index modality_count = 4;
  Index class_count = 5;
  std::vector<Index> encoder_channels{8, 16, 32, 64};
  Index input_height = 64;
  Index input_width = 64;
  Index sequence_length = 3;
  Index convlstm_kernel = 3;
  bool cmc_bias = true;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;
  std::uint64_t seed = 0;

  Index stages() const { return static_cast<Index>(encoder_channels.size()); }
  Index downsample() const { return Index{1} << stages(); }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct ConvLayer {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
};

template <typename Scalar>
struct EncoderStage {
  ConvLayer<Scalar> conv;
  BatchNormParams<Scalar> bn;
};

/// Transposed convolution (x2), 3x3 convolution, batch norm.
template <typename Scalar>
struct DecoderStage {
  ConvLayer<Scalar> up;
  ConvLayer<Scalar> conv;
  BatchNormParams<Scalar> bn;
};

enum class TensorRole { trainable, buffer };

template <typename Scalar>
struct ModelParams {
  std::vector<std::vector<EncoderStage<Scalar>>> encoders;  // [modality][stage]
  std::vector<CmcParams<Scalar>> cmc;                        // [stage], shallow to deep
  ConvLstmParams<Scalar> lstm;
  std::vector<DecoderStage<Scalar>> decoder;                 // deep to shallow
  ConvLayer<Scalar> classifier;

  /// Visits every non-empty tensor in a fixed order with a stable dotted name.
  template <typename F>
  void visit(F&& f) {
    auto bn = [&](const std::string& prefix, BatchNormParams<Scalar>& p) {
      f(prefix + ".scale", p.scale, TensorRole::trainable);
      f(prefix + ".shift", p.shift, TensorRole::trainable);
      f(prefix + ".running_mean", p.running_mean, TensorRole::buffer);
      f(prefix + ".running_var", p.running_var, TensorRole::buffer);
    };
    auto conv = [&](const std::string& prefix, ConvLayer<Scalar>& c) {
      f(prefix + ".weight", c.weight, TensorRole::trainable);
      if (!c.bias.empty()) f(prefix + ".bias", c.bias, TensorRole::trainable);
    };
    for (std::size_t m = 0; m < encoders.size(); ++m)
      for (std::size_t s = 0; s < encoders[m].size(); ++s) {
        const std::string prefix = "encoder." + std::to_string(m) + "." + std::to_string(s);
        conv(prefix + ".conv", encoders[m][s].conv);
        bn(prefix + ".bn", encoders[m][s].bn);
      }
    for (std::size_t s = 0; s < cmc.size(); ++s) {
      f("cmc." + std::to_string(s) + ".weights", cmc[s].weights, TensorRole::trainable);
      if (!cmc[s].bias.empty()) f("cmc." + std::to_string(s) + ".bias", cmc[s].bias, TensorRole::trainable);
    }
    lstm.visit([&](const char* name, Tensor<Scalar>& t) { f(std::string("lstm.") + name, t, TensorRole::trainable); });
    for (std::size_t j = 0; j < decoder.size(); ++j) {
      const std::string prefix = "decoder." + std::to_string(j);
      conv(prefix + ".up", decoder[j].up);
      conv(prefix + ".conv", decoder[j].conv);
      bn(prefix + ".bn", decoder[j].bn);
    }
    conv("classifier", classifier);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<ModelParams*>(this)->visit(
        [&](const std::string& name, Tensor<Scalar>& t, TensorRole role) { f(name, static_cast<const Tensor<Scalar>&>(t), role); });
  }

  Index trainable_count() const {
    Index n = 0;
    visit([&](const std::string&, const Tensor<Scalar>& t, TensorRole role) {
      if (role == TensorRole::trainable) n += t.size();
    });
    return n;
  }

  template <typename Other>
  ModelParams<Other> cast() const;
};

// ---------------------------------------------------------------------------
// initialization

namespace detail {

template <typename Scalar>
void fill_normal(Tensor<Scalar>& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(normal(rng));
}

/// Kernel [rows, ...] whose flattened rows are orthonormal (needs rows <= row length).
template <typename Scalar>
void fill_orthogonal(Tensor<Scalar>& t, std::mt19937_64& rng) {
  const Index rows = t.dim(0), cols = t.size() / rows;
  if (rows > cols) throw ShapeError("orthogonal init needs at most as many rows as columns");
  std::normal_distribution<double> normal;
  Eigen::MatrixXd g(cols, rows);
  for (Index j = 0; j < rows; ++j)
    for (Index i = 0; i < cols; ++i) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(cols, rows);
  // fix column signs so the result is uniformly distributed over orthogonal frames
  const Eigen::MatrixXd r = qr.matrixQR().topRows(rows).template triangularView<Eigen::Upper>();
  for (Index j = 0; j < rows; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  for (Index i = 0; i < rows; ++i)
    for (Index k = 0; k < cols; ++k) t[i * cols + k] = static_cast<Scalar>(q(k, i));
}

template <typename Scalar>
ConvLayer<Scalar> make_conv(Index cout, Index cin, Index k, double gain, std::mt19937_64& rng) {
  ConvLayer<Scalar> c{Tensor<Scalar>({cout, cin, k, k}), Tensor<Scalar>({cout})};
  fill_normal(c.weight, std::sqrt(gain / double(cin * k * k)), rng);
  return c;
}

template <typename Scalar>
BatchNormParams<Scalar> make_bn(Index channels, const ModelConfig& cfg) {
  auto bn = BatchNormParams<Scalar>::identity(channels);
  bn.momentum = static_cast<Scalar>(cfg.bn_momentum);
  bn.epsilon = static_cast<Scalar>(cfg.bn_epsilon);
  return bn;
}

}  // namespace detail

/// Channel width of the decoder stage `j` output (deep to shallow), mirroring the encoder.
inline Index decoder_width(const ModelConfig& cfg, Index j) {
  const Index s = cfg.stages() - 2 - j;
  return cfg.encoder_channels[static_cast<std::size_t>(s >= 0 ? s : 0)];
}

/// Orthogonal convLSTM kernels, forget-gate bias 1, fan-in scaled normal elsewhere
/// (variance 2/fan_in ahead of ReLUs, 1/fan_in otherwise). Deterministic in `cfg.seed`.
template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const Index stages = cfg.stages();
  const auto& widths = cfg.encoder_channels;
  ModelParams<Scalar> p;

  p.encoders.resize(static_cast<std::size_t>(cfg.modality_count));
  for (auto& enc : p.encoders) {
    Index cin = 1;
    for (Index s = 0; s < stages; ++s) {
      const Index cout = widths[static_cast<std::size_t>(s)];
      enc.push_back({detail::make_conv<Scalar>(cout, cin, 3, 2.0, rng), detail::make_bn<Scalar>(cout, cfg)});
      cin = cout;
    }
  }

  for (Index s = 0; s < stages; ++s) {
    const Index c = widths[static_cast<std::size_t>(s)];
    CmcParams<Scalar> cmc{Tensor<Scalar>({c, cfg.modality_count}), {}};
    detail::fill_normal(cmc.weights, std::sqrt(1.0 / double(cfg.modality_count)), rng);
    if (cfg.cmc_bias) cmc.bias = Tensor<Scalar>({c});
    p.cmc.push_back(std::move(cmc));
  }

  const Index deep = widths.back();
  p.lstm = make_convlstm_params<Scalar>(deep, deep, cfg.convlstm_kernel);
  p.lstm.visit([&](const std::string& name, Tensor<Scalar>& t) {
    if (name[0] == 'w') detail::fill_orthogonal(t, rng);
  });
  p.lstm.b_f.array().setConstant(Scalar(1));

  Index cin = deep;
  for (Index j = 0; j < stages; ++j) {
    const Index cout = decoder_width(cfg, j);
    DecoderStage<Scalar> d;
    d.up = {Tensor<Scalar>({cin, cout, 2, 2}), Tensor<Scalar>({cout})};
    detail::fill_normal(d.up.weight, std::sqrt(1.0 / double(cin)), rng);
    d.conv = detail::make_conv<Scalar>(cout, cout, 3, 2.0, rng);
    d.bn = detail::make_bn<Scalar>(cout, cfg);
    p.decoder.push_back(std::move(d));
    cin = cout;
  }
  p.classifier = detail::make_conv<Scalar>(cfg.class_count, cin, 1, 1.0, rng);
  return p;
}

template <typename Scalar>
template <typename Other>
ModelParams<Other> ModelParams<Scalar>::cast() const {
  ModelParams<Other> out;
  auto conv = [](const ConvLayer<Scalar>& c) { return ConvLayer<Other>{c.weight.template cast<Other>(), c.bias.empty() ? Tensor<Other>() : c.bias.template cast<Other>()}; };
  auto bn = [](const BatchNormParams<Scalar>& b) {
    return BatchNormParams<Other>{b.scale.template cast<Other>(), b.shift.template cast<Other>(),
                                  b.running_mean.template cast<Other>(), b.running_var.template cast<Other>(),
                                  static_cast<Other>(b.momentum), static_cast<Other>(b.epsilon)};
  };
  for (const auto& enc : encoders) {
    out.encoders.emplace_back();
    for (const auto& st : enc) out.encoders.back().push_back({conv(st.conv), bn(st.bn)});
  }
  for (const auto& c : cmc)
    out.cmc.push_back({c.weights.template cast<Other>(), c.bias.empty() ? Tensor<Other>() : c.bias.template cast<Other>()});
  out.lstm.visit([&](const std::string& name, Tensor<Other>& t) {
    lstm.visit([&](const char* src_name, const Tensor<Scalar>& src) {
      if (name == src_name) t = src.template cast<Other>();
    });
  });
  for (const auto& d : decoder) out.decoder.push_back({conv(d.up), conv(d.conv), bn(d.bn)});
  out.classifier = conv(classifier);
  return out;
}

/// Checks every tensor shape against what `cfg` implies.
template <typename Scalar>
void validate_params(const ModelParams<Scalar>& p, const ModelConfig& cfg) {
  ModelConfig shape_only = cfg;
  const auto reference = init_params<float>(shape_only);
  std::vector<std::pair<std::string, Shape>> expected, actual;
  reference.visit([&](const std::string& n, const Tensor<float>& t, TensorRole) { expected.push_back({n, t.shape()}); });
  p.visit([&](const std::string& n, const Tensor<Scalar>& t, TensorRole) { actual.push_back({n, t.shape()}); });
  if (expected != actual) throw FormatError(FormatErrc::config_mismatch, "parameter tensors do not match the model config");
}

// ---------------------------------------------------------------------------
// forward

template <typename Scalar>
struct ForwardGraph {
  Var<Scalar> logits;                 // [T*B, K, H, W]
  std::vector<Var<Scalar>> cmc_maps;  // per stage, [T*B, C_s, H/2^(s+1), W/2^(s+1)]
  std::vector<Var<Scalar>> hidden;    // per timestep, [B, C_deep, ...]
};

namespace detail {

template <typename F>
auto named_layer(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const NumericalError& e) {
    throw NumericalError(name + ": " + e.what());
  }
}

template <typename Scalar>
Tensor<Scalar> select_channel(const Tensor<Scalar>& images, Index channel) {
  const Index n = images.dim(0), c = images.dim(1), plane = images.dim(2) * images.dim(3);
  Tensor<Scalar> out({n, 1, images.dim(2), images.dim(3)});
  for (Index i = 0; i < n; ++i) out.array().segment(i * plane, plane) = images.array().segment((i * c + channel) * plane, plane);
  return out;
}

}  // namespace detail

/// Runs encoder `m` on x [N,1,H,W]; returns the pooled feature map after every stage.
/// With `running` non-null, train-mode batch statistics are folded into its batch norms.
template <typename Scalar>
std::vector<Var<Scalar>> encode_modality(const ModelParams<Scalar>& p, std::size_t m, Var<Scalar> x, Mode mode,
                                         ParamBinder<Scalar>& bind, ModelParams<Scalar>* running = nullptr) {
  std::vector<Var<Scalar>> features;
  for (std::size_t s = 0; s < p.encoders[m].size(); ++s) {
    const auto& st = p.encoders[m][s];
    auto* stats = running ? &running->encoders[m][s].bn : nullptr;
    x = detail::named_layer("encoder." + std::to_string(m) + "." + std::to_string(s), [&] {
      auto y = conv2d(x, bind(st.conv.weight), bind(st.conv.bias), Padding::same);
      y = batchnorm(y, bind(st.bn.scale), bind(st.bn.shift), st.bn, mode, stats);
      return maxpool2x2(relu(y));
    });
    features.push_back(x);
  }
  return features;
}

/// Builds the graph for `images` [T*B, M, H, W] (time-major). Parameters enter through
/// `bind`; pass `running` (usually the same params object) to update batch-norm statistics.
template <typename Scalar>
ForwardGraph<Scalar> forward_graph(const ModelParams<Scalar>& p, const ModelConfig& cfg, const Tensor<Scalar>& images,
                                   Index batch, Mode mode, ParamBinder<Scalar>& bind,
                                   ModelParams<Scalar>* running = nullptr) {
  require_rank(images, 4, "network input");
  const Index n = images.dim(0), h = images.dim(2), w = images.dim(3);
  if (batch <= 0 || n % batch) throw ShapeError("network input leading extent must be T * batch");
  if (images.dim(1) != cfg.modality_count)
    throw ShapeError("network input has " + std::to_string(images.dim(1)) + " modalities, model expects " +
                     std::to_string(cfg.modality_count));
  if (h % cfg.downsample() || w % cfg.downsample())
    throw ShapeError("input extents " + shape_str(images.shape()) + " must be divisible by " +
                     std::to_string(cfg.downsample()));
  const Index steps = n / batch;
  const std::size_t stages = p.cmc.size();

  std::vector<std::vector<Var<Scalar>>> per_modality;  // [m][stage]
  for (std::size_t m = 0; m < p.encoders.size(); ++m)
    per_modality.push_back(encode_modality(p, m, Var<Scalar>::constant(detail::select_channel(images, Index(m))), mode,
                                           bind, running));

  ForwardGraph<Scalar> g;
  for (std::size_t s = 0; s < stages; ++s) {
    std::vector<Var<Scalar>> maps;
    for (const auto& f : per_modality) maps.push_back(f[s]);
    g.cmc_maps.push_back(detail::named_layer("cmc." + std::to_string(s), [&] {
      return cmc_forward(stack_modalities(maps), bind(p.cmc[s].weights), bind(p.cmc[s].bias));
    }));
  }

  const auto lstm = bind_lstm(p.lstm, bind);
  std::vector<Var<Scalar>> xs;
  for (Index t = 0; t < steps; ++t) xs.push_back(narrow_leading(g.cmc_maps.back(), t * batch, batch));
  g.hidden = detail::named_layer("convlstm", [&] { return convlstm_sequence(xs, lstm); });

  Var<Scalar> d = concat_leading(g.hidden);
  for (std::size_t j = 0; j < p.decoder.size(); ++j) {
    const auto& st = p.decoder[j];
    auto* stats = running ? &running->decoder[j].bn : nullptr;
    d = detail::named_layer("decoder." + std::to_string(j), [&] {
      auto y = conv_transpose2d(d, bind(st.up.weight), bind(st.up.bias), 2);
      y = conv2d(y, bind(st.conv.weight), bind(st.conv.bias), Padding::same);
      y = relu(batchnorm(y, bind(st.bn.scale), bind(st.bn.shift), st.bn, mode, stats));
      if (j + 1 < p.decoder.size()) y = mrf_fuse(g.cmc_maps[stages - 2 - j], y);
      return y;
    });
  }
  g.logits = detail::named_layer("classifier", [&] {
    return conv2d(d, bind(p.classifier.weight), bind(p.classifier.bias), Padding::same);
  });
  return g;
}

/// Packs B sequences of T modal slice stacks [M,H,W] into one time-major batch.
template <typename Scalar>
Tensor<Scalar> pack_sequences(const std::vector<std::vector<Tensor<Scalar>>>& sequences) {
  if (sequences.empty() || sequences.front().empty()) throw ShapeError("pack_sequences needs a non-empty batch");
  const Index batch = static_cast<Index>(sequences.size());
  const Index steps = static_cast<Index>(sequences.front().size());
  const Shape& slice = sequences.front().front().shape();
  if (slice.size() != 3) throw ShapeError("modal slice stacks must be [M,H,W]");
  Tensor<Scalar> out({steps * batch, slice[0], slice[1], slice[2]});
  const Index len = shape_size(slice);
  for (Index b = 0; b < batch; ++b) {
    const auto& seq = sequences[static_cast<std::size_t>(b)];
    if (static_cast<Index>(seq.size()) != steps) throw ShapeError("sequences in a batch must share their length");
    for (Index t = 0; t < steps; ++t) {
      require_shape(seq[static_cast<std::size_t>(t)], slice, "modal slice stack");
      out.array().segment((t * batch + b) * len, len) = seq[static_cast<std::size_t>(t)].array();
    }
  }
  return out;
}

/// Eval-mode class probabilities for B sequences: result[b][t] is [K,H,W].
template <typename Scalar>
std::vector<std::vector<Tensor<Scalar>>> forward(const ModelParams<Scalar>& p, const ModelConfig& cfg,
                                                 const std::vector<std::vector<Tensor<Scalar>>>& sequences,
                                                 Mode mode = Mode::eval) {
  ParamBinder<Scalar> bind(false);
  const Index batch = static_cast<Index>(sequences.size());
  auto g = forward_graph(p, cfg, pack_sequences(sequences), batch, mode, bind);
  const Tensor<Scalar> probs = softmax(g.logits.value());
  const Index steps = probs.dim(0) / batch;
  std::vector<std::vector<Tensor<Scalar>>> out(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < steps; ++t) {
      const Tensor<Scalar> one = narrow_leading(probs, t * batch + b, 1);
      out[static_cast<std::size_t>(b)].push_back(one.reshaped({probs.dim(1), probs.dim(2), probs.dim(3)}));
    }
  return out;
}

/// Single-sequence form of forward(): T probability maps [K,H,W].
template <typename Scalar>
std::vector<Tensor<Scalar>> forward(const ModelParams<Scalar>& p, const ModelConfig& cfg,
                                    const std::vector<Tensor<Scalar>>& sequence, Mode mode = Mode::eval) {
  return forward(p, cfg, std::vector<std::vector<Tensor<Scalar>>>{sequence}, mode).front();
}

/// Per-pixel argmax of [N,K,H,W] -> [N,H,W]; the lowest class index wins ties.
template <typename Scalar>
LabelTensor argmax_classes(const Tensor<Scalar>& scores) {
  const Index n = scores.dim(0), k = scores.dim(1), plane = scores.dim(2) * scores.dim(3);
  LabelTensor out({n, scores.dim(2), scores.dim(3)});
  for (Index i = 0; i < n; ++i)
    for (Index px = 0; px < plane; ++px) {
      Index best = 0;
      for (Index c = 1; c < k; ++c)
        if (scores[(i * k + c) * plane + px] > scores[(i * k + best) * plane + px]) best = c;
      out[i * plane + px] = static_cast<std::uint8_t>(best);
    }
  return out;
}

/// Labels a whole volume [M,D,H,W] -> [D,H,W] by sliding non-overlapping windows of `steps`
/// slices over depth. A short final window is padded with its last slice and trimmed.
template <typename Scalar>
LabelTensor predict_volume(const ModelParams<Scalar>& p, const ModelConfig& cfg, const Tensor<Scalar>& volume,
                           Index steps) {
  require_rank(volume, 4, "predict_volume input");
  const Index m = volume.dim(0), depth = volume.dim(1), h = volume.dim(2), w = volume.dim(3);
  if (depth < 1) throw ShapeError("predict_volume needs at least one slice");
  if (steps < 1) throw UsageError("predict_volume needs a positive window length");
  const Index plane = h * w;
  LabelTensor out({depth, h, w});
  ParamBinder<Scalar> bind(false);
  for (Index start = 0; start < depth; start += steps) {
    Tensor<Scalar> window({steps, m, h, w});
    for (Index t = 0; t < steps; ++t) {
      const Index z = std::min(start + t, depth - 1);
      for (Index c = 0; c < m; ++c)
        window.array().segment((t * m + c) * plane, plane) = volume.array().segment((c * depth + z) * plane, plane);
    }
    const auto g = forward_graph(p, cfg, window, 1, Mode::eval, bind);
    const LabelTensor labels = argmax_classes(g.logits.value());
    for (Index t = 0; t < steps && start + t < depth; ++t)
      out.array().segment((start + t) * plane, plane) = labels.array().segment(t * plane, plane);
  }
  return out;
}

}  // namespace mmseg
