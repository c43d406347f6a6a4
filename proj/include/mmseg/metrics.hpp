#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmseg/tensor.hpp"

namespace mmseg {

/// K x K counts, entry (t, p) = voxels of true class t predicted as p.
class ConfusionMatrix {
 public:
  using Counts = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  explicit ConfusionMatrix(Index classes) : counts_(Counts::Zero(classes, classes)) {}

  Index classes() const { return counts_.rows(); }
  std::int64_t operator()(Index truth, Index pred) const { return counts_(truth, pred); }
  std::int64_t total() const { return counts_.sum(); }
  const Counts& counts() const { return counts_; }

  void add(const LabelTensor& pred, const LabelTensor& truth);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix& other) const { return counts_ == other.counts_; }

 private:
  Counts counts_;
};

ConfusionMatrix confusion(const LabelTensor& pred, const LabelTensor& truth, Index classes);

struct IuResult {
  std::vector<std::optional<double>> per_class;  // empty when the class has an empty union
  double mean_iu = 0;
};

IuResult mean_iu(const ConfusionMatrix& cm);

/// Named set of tumor labels evaluated as one binary region.
struct RegionSpec {
  std::string name;
  std::vector<std::uint8_t> labels;

  bool contains(std::uint8_t label) const;
  void validate() const;
};

/// complete = {1,2,3,4}, core = {1,3,4}, enhancing = {4}.
std::vector<RegionSpec> default_regions();

/// Region-positive set sizes: |P|, |T|, |P n T|.
struct RegionCounts {
  std::int64_t predicted = 0, truth = 0, overlap = 0;
};

struct RegionScores {
  double dice = 0, ppv = 0, sensitivity = 0;
};

RegionCounts region_counts(const LabelTensor& pred, const LabelTensor& truth, const RegionSpec& region);
RegionCounts region_counts(const ConfusionMatrix& cm, const RegionSpec& region);

/// Both regions empty scores 1 across the board; one empty scores 0 where undefined.
RegionScores scores_from_counts(const RegionCounts& c);
RegionScores region_scores(const LabelTensor& pred, const LabelTensor& truth, const RegionSpec& region);

struct MetricsReport {
  IuResult iu;
  std::vector<std::pair<std::string, RegionScores>> regions;

  /// `key = value` lines in fixed order: mean_iu, iu[c]..., region[name].{dice,ppv,sensitivity}.
  std::string to_text() const;
};

MetricsReport make_report(const ConfusionMatrix& cm, const std::vector<RegionSpec>& regions);

}  // namespace mmseg
