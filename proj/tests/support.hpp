#pragma once

#include <random>

#include "mmseg/tensor.hpp"

namespace testing_support {

template <typename Scalar = double>
mmseg::Tensor<Scalar> random_tensor(const mmseg::Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  mmseg::Tensor<Scalar> t(shape);
  for (mmseg::Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

inline mmseg::LabelTensor random_labels(const mmseg::Shape& shape, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(0, classes - 1);
  mmseg::LabelTensor t(shape);
  for (mmseg::Index i = 0; i < t.size(); ++i) t[i] = static_cast<std::uint8_t>(dist(rng));
  return t;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  double worst = 0;
  for (mmseg::Index i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

}  // namespace testing_support
