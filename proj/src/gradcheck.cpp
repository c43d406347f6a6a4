#include "mmseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace mmseg {

double GradCheckReport::max_error() const {
  double worst = 0;
  for (const auto& e : entries) worst = std::max(worst, e.finite ? e.max_rel_error : INFINITY);
  return worst;
}

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [&](const GradCheckEntry& e) { return e.passed(tolerance); });
}

namespace {

double projected(const Tensor<double>& out, const Tensor<double>& projection) {
  return (out.array() * projection.array()).sum();
}

double evaluate(const GradFn& fn, const std::vector<Tensor<double>>& inputs, const Tensor<double>& projection) {
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(Var<double>::constant(t));
  return projected(fn(vars).value(), projection);
}

}  // namespace

GradCheckReport grad_check(const GradFn& fn, const std::vector<Tensor<double>>& inputs,
                           const std::vector<std::string>& names, const GradCheckOptions& options) {
  if (names.size() != inputs.size()) throw UsageError("grad_check: one name per input required");
  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  report.tolerance = options.tolerance;

  std::vector<Var<double>> leaves;
  for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(Var<double>::leaf(inputs[i], names[i]));
  Var<double> out = fn(leaves);

  Tensor<double> projection(out.shape(), 1.0);
  if (out.value().size() > 1) {
    std::normal_distribution<double> normal;
    for (Index i = 0; i < projection.size(); ++i) projection[i] = normal(rng);
  }
  backward(out, projection);

  std::vector<Tensor<double>> work = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    GradCheckEntry entry{names[t]};
    const Tensor<double> analytic = leaves[t].grad();
    std::vector<Index> order(static_cast<std::size_t>(inputs[t].size()));
    std::iota(order.begin(), order.end(), Index{0});
    const bool sampled = options.max_probes > 0 && inputs[t].size() > options.max_probes;
    if (sampled) std::shuffle(order.begin(), order.end(), rng);

    double magnitude = 0;  // largest |f| seen, sets the rounding noise of a difference
    auto central = [&](Index i, double h) {
      const double x0 = inputs[t][i];
      work[t][i] = x0 + h;
      const double plus = evaluate(fn, work, projection);
      work[t][i] = x0 - h;
      const double minus = evaluate(fn, work, projection);
      work[t][i] = x0;
      magnitude = std::max({magnitude, std::abs(plus), std::abs(minus)});
      return (plus - minus) / (2 * h);
    };
    auto rounding = [&](double h) { return 16 * std::numeric_limits<double>::epsilon() * magnitude / h; };
    for (Index i : order) {
      if (sampled && entry.probes == options.max_probes) break;
      double h = options.step * std::max(1.0, std::abs(inputs[t][i]));
      double numeric = central(i, h);
      if (options.kink_guard) {
        // a smaller window can clear a switch point sitting close to the probe
        bool smooth = false;
        for (int level = 0; level < 3 && !smooth; ++level, h /= 10) {
          if (level > 0) numeric = central(i, h);
          const double half = central(i, h / 2);
          const double scale = std::max({std::abs(numeric), std::abs(half), options.floor});
          smooth = std::abs(numeric - half) <= options.tolerance / 10 * scale + 4 * rounding(h / 2);
          if (smooth) break;
        }
        if (!smooth) {
          ++entry.rejected;
          continue;
        }
      }
      ++entry.probes;
      const double a = analytic[i];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        entry.finite = false;
        continue;
      }
      // differences below the rounding noise of f carry no information
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor, rounding(h) / options.tolerance});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - numeric) / denom);
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace mmseg
