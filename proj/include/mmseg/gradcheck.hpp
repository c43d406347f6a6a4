#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmseg/autograd.hpp"

namespace mmseg {

struct GradCheckOptions {
  double tolerance = 1e-4;
  /// Central-difference step, relative to max(1, |x|).
  double step = 1e-4;
  /// Denominator floor for the relative error, so vanishing gradients compare absolutely.
  double floor = 1e-6;
  /// Elements probed per input tensor; 0 probes every element.
  Index max_probes = 0;
  /// Also difference at step/2; when the two estimates disagree by more than tolerance/10 the
  /// window straddles a ReLU or max-pool switch. Retry at step/10 and step/100, then replace the probe.
  bool kink_guard = false;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  Index probes = 0;
  Index rejected = 0;  // probes dropped by the kink guard
  bool finite = true;

  bool passed(double tolerance) const { return finite && probes > 0 && max_rel_error <= tolerance; }
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0;

  double max_error() const;
  bool passed() const;
};

/// The function under test maps input Vars to any output; the check contracts the output
/// with a fixed random projection so every output element contributes.
using GradFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of `fn` against central finite differences.
/// rel_err = |analytic - numeric| / max(|analytic|, |numeric|, floor, noise / tolerance), maximized
/// per tensor, where noise = 16 eps max|f| / step bounds the rounding error of the difference.
GradCheckReport grad_check(const GradFn& fn, const std::vector<Tensor<double>>& inputs,
                           const std::vector<std::string>& names, const GradCheckOptions& options = {});

}  // namespace mmseg
