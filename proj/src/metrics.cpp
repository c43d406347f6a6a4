#include "mmseg/metrics.hpp"

#include <algorithm>
#include <cstdio>

#include "mmseg/error.hpp"

namespace mmseg {

void ConfusionMatrix::add(const LabelTensor& pred, const LabelTensor& truth) {
  if (pred.shape() != truth.shape())
    throw ShapeError("confusion: prediction " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()));
  const Index k = classes();
  for (Index i = 0; i < pred.size(); ++i) {
    if (pred[i] >= k || truth[i] >= k)
      throw ShapeError("confusion: label at voxel " + std::to_string(i) + " is not below " + std::to_string(k));
    ++counts_(truth[i], pred[i]);
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.classes() != classes()) throw ShapeError("confusion matrices of different class counts");
  counts_ += other.counts_;
  return *this;
}

ConfusionMatrix confusion(const LabelTensor& pred, const LabelTensor& truth, Index classes) {
  ConfusionMatrix cm(classes);
  cm.add(pred, truth);
  return cm;
}

IuResult mean_iu(const ConfusionMatrix& cm) {
  IuResult r;
  const auto& c = cm.counts();
  double sum = 0;
  int included = 0;
  for (Index k = 0; k < cm.classes(); ++k) {
    const std::int64_t inter = c(k, k);
    const std::int64_t uni = c.row(k).sum() + c.col(k).sum() - inter;
    if (uni == 0) {
      r.per_class.emplace_back();
      continue;
    }
    const double iu = double(inter) / double(uni);
    r.per_class.emplace_back(iu);
    sum += iu;
    ++included;
  }
  r.mean_iu = included ? sum / included : 1.0;
  return r;
}

bool RegionSpec::contains(std::uint8_t label) const {
  return std::find(labels.begin(), labels.end(), label) != labels.end();
}

void RegionSpec::validate() const {
  if (labels.empty()) throw UsageError("region '" + name + "' has no labels");
  if (contains(0)) throw UsageError("region '" + name + "' must not include label 0");
}

std::vector<RegionSpec> default_regions() {
  return {{"complete", {1, 2, 3, 4}}, {"core", {1, 3, 4}}, {"enhancing", {4}}};
}

RegionCounts region_counts(const LabelTensor& pred, const LabelTensor& truth, const RegionSpec& region) {
  if (pred.shape() != truth.shape())
    throw ShapeError("region_scores: prediction " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()));
  RegionCounts c;
  for (Index i = 0; i < pred.size(); ++i) {
    const bool p = region.contains(pred[i]), t = region.contains(truth[i]);
    c.predicted += p;
    c.truth += t;
    c.overlap += p && t;
  }
  return c;
}

RegionCounts region_counts(const ConfusionMatrix& cm, const RegionSpec& region) {
  RegionCounts c;
  for (Index t = 0; t < cm.classes(); ++t)
    for (Index p = 0; p < cm.classes(); ++p) {
      const bool in_p = region.contains(std::uint8_t(p)), in_t = region.contains(std::uint8_t(t));
      if (in_p) c.predicted += cm(t, p);
      if (in_t) c.truth += cm(t, p);
      if (in_p && in_t) c.overlap += cm(t, p);
    }
  return c;
}

RegionScores scores_from_counts(const RegionCounts& c) {
  if (c.predicted == 0 && c.truth == 0) return {1.0, 1.0, 1.0};
  RegionScores s;
  s.dice = 2.0 * double(c.overlap) / double(c.predicted + c.truth);
  s.ppv = c.predicted ? double(c.overlap) / double(c.predicted) : 0.0;
  s.sensitivity = c.truth ? double(c.overlap) / double(c.truth) : 0.0;
  return s;
}

RegionScores region_scores(const LabelTensor& pred, const LabelTensor& truth, const RegionSpec& region) {
  return scores_from_counts(region_counts(pred, truth, region));
}

MetricsReport make_report(const ConfusionMatrix& cm, const std::vector<RegionSpec>& regions) {
  MetricsReport r{mean_iu(cm), {}};
  for (const auto& region : regions) r.regions.emplace_back(region.name, scores_from_counts(region_counts(cm, region)));
  return r;
}

namespace {
std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

std::string MetricsReport::to_text() const {
  std::string out = "mean_iu = " + number(iu.mean_iu) + "\n";
  for (std::size_t c = 0; c < iu.per_class.size(); ++c)
    out += "iu[" + std::to_string(c) + "] = " + (iu.per_class[c] ? number(*iu.per_class[c]) : std::string("none")) + "\n";
  for (const auto& [name, s] : regions) {
    out += "region[" + name + "].dice = " + number(s.dice) + "\n";
    out += "region[" + name + "].ppv = " + number(s.ppv) + "\n";
    out += "region[" + name + "].sensitivity = " + number(s.sensitivity) + "\n";
  }
  return out;
}

}  // namespace mmseg
