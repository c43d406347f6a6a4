#include "mmseg/training.hpp"

#include <algorithm>
#include <cstdio>

namespace mmseg {

ClassWeights compute_class_weights(const std::vector<LabelTensor>& label_volumes, Index classes) {
  std::vector<std::int64_t> class_pixels(static_cast<std::size_t>(classes), 0);
  std::vector<std::int64_t> image_pixels(static_cast<std::size_t>(classes), 0);
  std::vector<std::int64_t> in_image(static_cast<std::size_t>(classes));

  for (const auto& vol : label_volumes) {
    if (vol.rank() != 2 && vol.rank() != 3) throw ShapeError("label volumes must be [H,W] or [D,H,W]");
    const Index images = vol.rank() == 3 ? vol.dim(0) : 1;
    const Index plane = vol.size() / images;
    for (Index z = 0; z < images; ++z) {
      std::fill(in_image.begin(), in_image.end(), 0);
      for (Index i = 0; i < plane; ++i) {
        const auto label = vol[z * plane + i];
        if (label >= classes) throw ShapeError("label " + std::to_string(int(label)) + " is not below " + std::to_string(classes));
        ++in_image[label];
      }
      for (std::size_t c = 0; c < in_image.size(); ++c)
        if (in_image[c] > 0) {
          class_pixels[c] += in_image[c];
          image_pixels[c] += plane;
        }
    }
  }

  ClassWeights w;
  std::vector<double> present_freqs;
  for (std::size_t c = 0; c < class_pixels.size(); ++c) {
    const bool present = class_pixels[c] > 0;
    w.present.push_back(present);
    w.freq.push_back(present ? double(class_pixels[c]) / double(image_pixels[c]) : 0.0);
    if (present) present_freqs.push_back(w.freq.back());
  }
  if (present_freqs.empty()) throw UsageError("compute_class_weights: no labelled pixels");
  std::sort(present_freqs.begin(), present_freqs.end());
  const std::size_t n = present_freqs.size();
  w.median_freq = n % 2 ? present_freqs[n / 2] : 0.5 * (present_freqs[n / 2 - 1] + present_freqs[n / 2]);
  for (std::size_t c = 0; c < w.freq.size(); ++c) w.alpha.push_back(w.present[c] ? w.median_freq / w.freq[c] : 0.0);
  return w;
}

TrainingSet TrainingSet::from_cases(const std::vector<TrainingCase>& cases, Index steps, Index stride, Index classes) {
  TrainingSet set;
  std::vector<LabelTensor> label_volumes;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    for (auto& s : extract_sequences(cases[i].image, cases[i].labels, steps, stride)) {
      s.case_index = i;
      if (s.has_tumor()) set.tumor_sequences.push_back(set.sequences.size());
      set.sequences.push_back(std::move(s));
    }
    label_volumes.push_back(cases[i].labels.labels);
  }
  if (set.sequences.empty()) throw UsageError("training set has no sequences");
  set.weights = compute_class_weights(label_volumes, classes);
  return set;
}

std::vector<std::size_t> sample_phase1(const TrainingSet& data, Index batch, std::mt19937_64& rng) {
  if (data.tumor_sequences.empty()) throw UsageError("no sequence contains tumor voxels; phase 1 cannot sample");
  std::uniform_int_distribution<std::size_t> pick(0, data.tumor_sequences.size() - 1);
  std::vector<std::size_t> out;
  for (Index b = 0; b < batch; ++b) out.push_back(data.tumor_sequences[pick(rng)]);
  return out;
}

std::vector<std::size_t> sample_natural(const TrainingSet& data, Index batch, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, data.sequences.size() - 1);
  std::vector<std::size_t> out;
  for (Index b = 0; b < batch; ++b) out.push_back(pick(rng));
  return out;
}

void TrainConfig::validate() const {
  if (batch_size < 1 || sequence_length < 1 || sequence_stride < 1) throw UsageError("batch size, sequence length and stride must be positive");
  if (phase1_steps < 0 || phase2_steps < 0) throw UsageError("step counts must be non-negative");
  if (!(lr_phase1 > 0) || !(lr_phase2 > 0)) throw UsageError("learning rates must be positive");
  if (!(lr_phase2 < lr_phase1)) throw UsageError("lr_phase2 must be lower than lr_phase1");
}

std::string TrainLogRecord::to_line() const {
  char buf[128];
  std::snprintf(buf, sizeof buf, "phase=%d step=%lld loss=%.9g lr=%.9g", phase, static_cast<long long>(step), loss, lr);
  return buf;
}

StepBatch assemble_batch(const TrainingSet& data, const std::vector<std::size_t>& picks) {
  std::vector<std::vector<TensorF>> stacks;
  for (std::size_t i : picks) stacks.push_back(data.sequences.at(i).stacks);
  StepBatch b{pack_sequences(stacks), {}, static_cast<Index>(picks.size())};
  const auto& first = data.sequences[picks.front()].labels.front();
  const Index steps = data.sequences[picks.front()].length(), plane = first.size();
  b.labels = LabelTensor({steps * b.batch, first.dim(0), first.dim(1)});
  for (Index bi = 0; bi < b.batch; ++bi)
    for (Index t = 0; t < steps; ++t)
      b.labels.array().segment((t * b.batch + bi) * plane, plane) =
          data.sequences[picks[static_cast<std::size_t>(bi)]].labels[static_cast<std::size_t>(t)].array();
  return b;
}

double loss_and_gradients(ModelParams<float>& params, const ModelConfig& model, const StepBatch& batch,
                          const TensorF& class_weights, std::vector<TensorF>& grads) {
  ParamBinder<float> bind(true);
  const auto graph = forward_graph(params, model, batch.images, batch.batch, Mode::train, bind, &params);
  const Var<float> loss = softmax_ce_loss(graph.logits, batch.labels, class_weights);
  backward(loss);
  grads.clear();
  params.visit([&](const std::string&, const TensorF& t, TensorRole role) {
    if (role == TensorRole::trainable) grads.push_back(bind.grad_of(t));
  });
  return loss.value()[0];
}

TrainResult run_two_phase(const TrainConfig& config, const ModelConfig& model, ModelParams<float> params,
                          const TrainingSet& data, const std::function<void(const TrainLogRecord&)>& on_record) {
  config.validate();
  if (config.phase1_steps > 0 && data.tumor_sequences.empty())
    throw UsageError("phase 1 needs at least one tumor-bearing sequence");
  std::mt19937_64 rng(config.seed);
  OptimizerState<float> optimizer;
  const TensorF balanced = data.weights.tensor<float>();
  const TensorF unit({model.class_count}, 1.0f);

  std::vector<TensorF*> targets;
  std::vector<std::string> names;
  params.visit([&](const std::string& name, TensorF& t, TensorRole role) {
    if (role == TensorRole::trainable) {
      targets.push_back(&t);
      names.push_back(name);
    }
  });

  TrainResult result;
  std::vector<TensorF> grads;
  const Index total = config.phase1_steps + config.phase2_steps;
  for (Index step = 1; step <= total; ++step) {
    const bool first_phase = step <= config.phase1_steps;
    const double lr = first_phase ? config.lr_phase1 : config.lr_phase2;
    const auto picks = first_phase ? sample_phase1(data, config.batch_size, rng) : sample_natural(data, config.batch_size, rng);
    const StepBatch batch = assemble_batch(data, picks);
    double loss = 0;
    try {
      loss = loss_and_gradients(params, model, batch, first_phase ? balanced : unit, grads);
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss)) throw NumericalError("training diverged at step " + std::to_string(step) + ": loss is not finite");
    clip_global_norm(grads, config.grad_clip);
    adam_update(targets, grads, names, optimizer, lr, config.adam);

    TrainLogRecord rec{first_phase ? 1 : 2, step, loss, lr};
    if (on_record) on_record(rec);
    result.log.push_back(rec);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace mmseg
