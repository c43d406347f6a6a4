#include <doctest.h>

#include "metrics_oracle.hpp"
#include "mmseg/error.hpp"
#include "mmseg/metrics.hpp"
#include "support.hpp"

using namespace mmseg;
using testing_support::random_labels;

namespace {

// `n` voxels, `label` at the listed indices, 0 elsewhere.
LabelTensor marked(Index n, std::initializer_list<Index> at, std::uint8_t label = 1) {
  LabelTensor t({n});
  for (Index i : at) t[i] = label;
  return t;
}

// Random volumes with tumor blobs so every region is usually nonempty and partially overlapping.
LabelTensor blobby(std::mt19937_64& rng, Index n, double tumor_rate) {
  std::bernoulli_distribution tumor(tumor_rate);
  std::uniform_int_distribution<int> cls(1, 4);
  LabelTensor t({n, n, n});
  for (Index i = 0; i < t.size(); ++i) t[i] = tumor(rng) ? std::uint8_t(cls(rng)) : 0;
  return t;
}

}  // namespace

TEST_CASE("confusion matrix counts") {
  const LabelTensor truth({6}, {0, 0, 1, 1, 2, 2}), pred({6}, {0, 1, 1, 1, 0, 2});
  const auto cm = confusion(pred, truth, 3);
  CHECK(cm(0, 0) == 1);
  CHECK(cm(0, 1) == 1);
  CHECK(cm(1, 1) == 2);
  CHECK(cm(2, 0) == 1);
  CHECK(cm(2, 2) == 1);
  CHECK(cm.total() == 6);
  CHECK_THROWS_AS(confusion(pred, LabelTensor({5}), 3), ShapeError);
  CHECK_THROWS_AS(confusion(pred, truth, 2), ShapeError);
}

TEST_CASE("mean_iu") {
  SUBCASE("set-count example: 3 of 4 predicted voxels inside 6 true ones") {
    const auto truth = marked(20, {0, 1, 2, 3, 4, 5});
    const auto pred = marked(20, {3, 4, 5, 10});
    const auto r = mean_iu(confusion(pred, truth, 2));
    REQUIRE(r.per_class[1].has_value());
    CHECK(*r.per_class[1] == doctest::Approx(3.0 / 7.0).epsilon(1e-15));
    // background: 14 true, 16 predicted, 13 shared
    CHECK(*r.per_class[0] == doctest::Approx(13.0 / 17.0).epsilon(1e-15));
    CHECK(r.mean_iu == doctest::Approx((3.0 / 7.0 + 13.0 / 17.0) / 2).epsilon(1e-15));
  }
  SUBCASE("perfect prediction") {
    std::mt19937_64 rng(1);
    const auto t = random_labels({4, 4, 4}, 5, rng);
    const auto r = mean_iu(confusion(t, t, 5));
    CHECK(r.mean_iu == 1.0);
    for (const auto& v : r.per_class)
      if (v) CHECK(*v == 1.0);
  }
  SUBCASE("disjoint prediction of a present class") {
    const auto r = mean_iu(confusion(marked(6, {0, 1}), marked(6, {4, 5}), 2));
    CHECK(*r.per_class[1] == 0.0);
  }
  SUBCASE("classes with an empty union are left out of the mean") {
    const auto t = marked(8, {1, 2}, 3);
    const auto r = mean_iu(confusion(t, t, 5));
    CHECK_FALSE(r.per_class[1].has_value());
    CHECK_FALSE(r.per_class[2].has_value());
    CHECK_FALSE(r.per_class[4].has_value());
    CHECK(r.mean_iu == 1.0);
    const auto half = mean_iu(confusion(marked(8, {1}, 3), t, 5));
    CHECK(half.mean_iu == doctest::Approx((6.0 / 7.0 + 0.5) / 2).epsilon(1e-15));
  }
  SUBCASE("MeanIU is 1 only for a perfect prediction") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      const auto t = random_labels({30}, 3, rng);
      auto p = t;
      p[trial % 30] = std::uint8_t((p[trial % 30] + 1) % 3);
      CHECK(mean_iu(confusion(p, t, 3)).mean_iu < 1.0);
    }
  }
}

TEST_CASE("region scores") {
  const RegionSpec tumor{"t", {1}};
  SUBCASE("set-count example") {
    const auto s = region_scores(marked(20, {3, 4, 5, 10}), marked(20, {0, 1, 2, 3, 4, 5}), tumor);
    CHECK(s.dice == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(s.ppv == 0.75);
    CHECK(s.sensitivity == 0.5);
  }
  SUBCASE("identical nonempty regions score 1") {
    const auto t = marked(10, {2, 7});
    const auto s = region_scores(t, t, tumor);
    CHECK(s.dice == 1.0);
    CHECK(s.ppv == 1.0);
    CHECK(s.sensitivity == 1.0);
  }
  SUBCASE("empty conventions") {
    const LabelTensor none({10});
    const auto both = region_scores(none, none, tumor);
    CHECK(both.dice == 1.0);
    CHECK(both.ppv == 1.0);
    CHECK(both.sensitivity == 1.0);
    const auto missed = region_scores(none, marked(10, {3}), tumor);
    CHECK(missed.dice == 0.0);
    CHECK(missed.ppv == 0.0);
    CHECK(missed.sensitivity == 0.0);
    const auto spurious = region_scores(marked(10, {3}), none, tumor);
    CHECK(spurious.dice == 0.0);
    CHECK(spurious.ppv == 0.0);
    CHECK(spurious.sensitivity == 0.0);
  }
  SUBCASE("region membership binarizes labels") {
    const LabelTensor truth({6}, {0, 1, 2, 3, 4, 4}), pred({6}, {0, 2, 2, 4, 4, 0});
    const auto core = region_scores(pred, truth, RegionSpec{"core", {1, 3, 4}});
    // pred core {3, 4}, truth core {1, 3, 4, 5}
    CHECK(core.ppv == 1.0);
    CHECK(core.sensitivity == 0.5);
    CHECK(core.dice == doctest::Approx(4.0 / 6.0).epsilon(1e-15));
  }
  SUBCASE("shape mismatch") { CHECK_THROWS_AS(region_scores(LabelTensor({4}), LabelTensor({5}), tumor), ShapeError); }
}

TEST_CASE("region definitions") {
  const auto r = default_regions();
  REQUIRE(r.size() == 3);
  CHECK(r[0].name == "complete");
  CHECK(r[0].labels == std::vector<std::uint8_t>{1, 2, 3, 4});
  CHECK(r[1].name == "core");
  CHECK(r[1].labels == std::vector<std::uint8_t>{1, 3, 4});
  CHECK(r[2].name == "enhancing");
  CHECK(r[2].labels == std::vector<std::uint8_t>{4});
  for (const auto& spec : r) CHECK_NOTHROW(spec.validate());
  CHECK_THROWS_AS((RegionSpec{"bad", {}}.validate()), UsageError);
  CHECK_THROWS_AS((RegionSpec{"bad", {0, 1}}.validate()), UsageError);
}

TEST_CASE("metric properties on random volumes") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> rate(0.02, 0.5);
  for (int trial = 0; trial < 40; ++trial) {
    const auto truth = blobby(rng, 8, rate(rng)), pred = blobby(rng, 8, rate(rng));
    const auto cm = confusion(pred, truth, 5);
    CAPTURE(trial);

    const auto iu = mean_iu(cm);
    const auto oracle = testing_support::iu_by_sets(pred, truth, 5);
    double sum = 0;
    int included = 0;
    for (int c = 0; c < 5; ++c) {
      if (oracle.uni[std::size_t(c)] == 0) {
        CHECK_FALSE(iu.per_class[std::size_t(c)].has_value());
        continue;
      }
      const double expected = double(oracle.inter[std::size_t(c)]) / double(oracle.uni[std::size_t(c)]);
      CHECK(*iu.per_class[std::size_t(c)] == expected);
      sum += expected;
      ++included;
    }
    CHECK(iu.mean_iu == doctest::Approx(sum / included).epsilon(1e-15));

    for (const auto& region : default_regions()) {
      const auto direct = region_counts(pred, truth, region);
      const auto via_cm = region_counts(cm, region);
      const auto sets = testing_support::region_by_sets(pred, truth, region);
      CHECK(direct.predicted == sets.predicted);
      CHECK(direct.truth == sets.truth);
      CHECK(direct.overlap == sets.overlap);
      CHECK(via_cm.predicted == sets.predicted);
      CHECK(via_cm.truth == sets.truth);
      CHECK(via_cm.overlap == sets.overlap);

      const auto s = region_scores(pred, truth, region);
      const auto swapped = region_scores(truth, pred, region);
      CHECK(s.dice == swapped.dice);
      CHECK(s.ppv == swapped.sensitivity);
      CHECK(s.sensitivity == swapped.ppv);
      for (double v : {s.dice, s.ppv, s.sensitivity}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      if (s.ppv + s.sensitivity > 0)
        CHECK(std::abs(s.dice - 2 * s.ppv * s.sensitivity / (s.ppv + s.sensitivity)) <= 1e-12);
    }
  }
}

TEST_CASE("confusion aggregation is additive") {
  std::mt19937_64 rng(4);
  ConfusionMatrix total(5);
  LabelTensor all_pred({3, 4, 4, 4}), all_truth({3, 4, 4, 4});
  for (Index k = 0; k < 3; ++k) {
    const auto p = random_labels({4, 4, 4}, 5, rng), t = random_labels({4, 4, 4}, 5, rng);
    total += confusion(p, t, 5);
    all_pred.array().segment(k * 64, 64) = p.array();
    all_truth.array().segment(k * 64, 64) = t.array();
  }
  CHECK(total == confusion(all_pred, all_truth, 5));
  ConfusionMatrix other(4);
  CHECK_THROWS_AS(total += other, ShapeError);
}

TEST_CASE("report text") {
  const LabelTensor truth({6}, {0, 1, 2, 3, 4, 4}), pred({6}, {0, 2, 2, 4, 4, 0});
  const auto report = make_report(confusion(pred, truth, 5), default_regions());
  const auto text = report.to_text();
  const std::vector<std::string> keys{"mean_iu",
                                      "iu[0]",
                                      "iu[1]",
                                      "iu[2]",
                                      "iu[3]",
                                      "iu[4]",
                                      "region[complete].dice",
                                      "region[complete].ppv",
                                      "region[complete].sensitivity",
                                      "region[core].dice",
                                      "region[core].ppv",
                                      "region[core].sensitivity",
                                      "region[enhancing].dice",
                                      "region[enhancing].ppv",
                                      "region[enhancing].sensitivity"};
  std::vector<std::string> seen;
  std::size_t at = 0;
  while (at < text.size()) {
    const auto nl = text.find('\n', at);
    const auto line = text.substr(at, nl - at);
    seen.push_back(line.substr(0, line.find(" = ")));
    at = nl + 1;
  }
  CHECK(seen == keys);
  CHECK(text.find("iu[1] = 0\n") != std::string::npos);
  CHECK(text.find("iu[3] = 0\n") != std::string::npos);
  CHECK(text.find("region[core].ppv = 1\n") != std::string::npos);
  CHECK(text.find("region[core].sensitivity = 0.5\n") != std::string::npos);
  CHECK(text == make_report(confusion(pred, truth, 5), default_regions()).to_text());

  const LabelTensor only_bg({3});
  CHECK(make_report(confusion(only_bg, only_bg, 3), {}).to_text() == "mean_iu = 1\niu[0] = 1\niu[1] = none\niu[2] = none\n");
}
