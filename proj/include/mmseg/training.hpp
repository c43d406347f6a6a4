#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mmseg/network.hpp"
#include "mmseg/volume.hpp"

namespace mmseg {

// ---------------------------------------------------------------------------
// median frequency balancing

struct ClassWeights {
  std::vector<double> alpha;  // 0 for classes absent from the corpus
  std::vector<double> freq;
  std::vector<bool> present;
  double median_freq = 0;

  template <typename Scalar>
  Tensor<Scalar> tensor() const {
    Tensor<Scalar> t({static_cast<Index>(alpha.size())});
    for (std::size_t c = 0; c < alpha.size(); ++c) t[static_cast<Index>(c)] = static_cast<Scalar>(alpha[c]);
    return t;
  }
};

/// freq(c) = pixels of class c / pixels of the images (2-D slices) containing c;
/// alpha(c) = median over present classes / freq(c). Rank-3 inputs are split into depth slices.
ClassWeights compute_class_weights(const std::vector<LabelTensor>& label_volumes, Index classes);

// ---------------------------------------------------------------------------
// optimizer

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
struct OptimizerState {
  std::vector<Tensor<Scalar>> first, second;
  std::int64_t step = 0;
};

/// One bias-corrected Adam step over parallel lists of parameters and gradients.
template <typename Scalar>
void adam_update(const std::vector<Tensor<Scalar>*>& params, const std::vector<Tensor<Scalar>>& grads,
                 const std::vector<std::string>& names, OptimizerState<Scalar>& state, double lr,
                 const AdamOptions& opt = {}) {
  if (params.size() != grads.size() || params.size() != names.size())
    throw UsageError("adam_update: parameter, gradient and name lists differ in length");
  if (state.first.empty()) {
    for (const auto* p : params) {
      state.first.push_back(Tensor<Scalar>::zeros_like(*p));
      state.second.push_back(Tensor<Scalar>::zeros_like(*p));
    }
  }
  if (state.first.size() != params.size()) throw UsageError("adam_update: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i]->shape() || state.first[i].shape() != params[i]->shape())
      throw ShapeError("adam_update: shape mismatch for " + names[i]);
    if (!grads[i].all_finite()) throw NumericalError("non-finite gradient for " + names[i]);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, double(state.step));
  const auto b1 = Scalar(opt.beta1), b2 = Scalar(opt.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first[i].array();
    auto& v = state.second[i].array();
    const auto& g = grads[i].array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    params[i]->array() -= Scalar(lr) * (m / Scalar(c1)) / ((v / Scalar(c2)).sqrt() + Scalar(opt.epsilon));
  }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before.
template <typename Scalar>
double clip_global_norm(std::vector<Tensor<Scalar>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads) sq += g.array().template cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto scale = Scalar(max_norm / norm);
    for (auto& g : grads) g.array() *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// data and sampling

struct TrainingCase {
  MultiModalVolume image;  // z-scored
  LabelVolume labels;
};

struct TrainingSet {
  std::vector<SliceSequence> sequences;
  std::vector<std::size_t> tumor_sequences;  // indices into `sequences` with any label > 0
  ClassWeights weights;

  static TrainingSet from_cases(const std::vector<TrainingCase>& cases, Index steps, Index stride, Index classes);
};

/// Uniform draw (with replacement) over sequences containing tumor voxels.
std::vector<std::size_t> sample_phase1(const TrainingSet& data, Index batch, std::mt19937_64& rng);
/// Uniform draw (with replacement) over all sequences.
std::vector<std::size_t> sample_natural(const TrainingSet& data, Index batch, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// two-phase schedule

struct TrainConfig {
  Index batch_size = 3;
  Index sequence_length = 3;
  Index sequence_stride = 1;
  double lr_phase1 = 1e-4;
  double lr_phase2 = 1e-6;
  Index phase1_steps = 300;
  Index phase2_steps = 100;
  AdamOptions adam;
  double grad_clip = 5.0;  // <= 0 disables
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TrainConfig& o) const {
    return batch_size == o.batch_size && sequence_length == o.sequence_length && sequence_stride == o.sequence_stride &&
           lr_phase1 == o.lr_phase1 && lr_phase2 == o.lr_phase2 && phase1_steps == o.phase1_steps &&
           phase2_steps == o.phase2_steps && adam.beta1 == o.adam.beta1 && adam.beta2 == o.adam.beta2 &&
           adam.epsilon == o.adam.epsilon && grad_clip == o.grad_clip && seed == o.seed;
  }
};

struct TrainLogRecord {
  int phase = 1;
  Index step = 0;
  double loss = 0;
  double lr = 0;

  /// `phase=<1|2> step=<n> loss=<float> lr=<float>`
  std::string to_line() const;
};

struct TrainResult {
  ModelParams<float> params;
  std::vector<TrainLogRecord> log;
};

struct StepBatch {
  TensorF images;      // [T*B, M, H, W], time-major
  LabelTensor labels;  // [T*B, H, W]
  Index batch = 0;
};

StepBatch assemble_batch(const TrainingSet& data, const std::vector<std::size_t>& picks);

/// One forward/backward pass; returns the loss and fills `grads` (trainable tensors in visit order).
double loss_and_gradients(ModelParams<float>& params, const ModelConfig& model, const StepBatch& batch,
                          const TensorF& class_weights, std::vector<TensorF>& grads);

/// Phase 1: tumor-bearing sequences, median-frequency weights, lr_phase1.
/// Phase 2: all sequences, unit weights, lr_phase2. `on_record` sees every log record as it is produced.
TrainResult run_two_phase(const TrainConfig& config, const ModelConfig& model, ModelParams<float> params,
                          const TrainingSet& data, const std::function<void(const TrainLogRecord&)>& on_record = {});

}  // namespace mmseg
