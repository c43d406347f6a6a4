#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "mmseg/cross_modality.hpp"
#include "mmseg/gradcheck.hpp"
#include "support.hpp"

using namespace mmseg;
using testing_support::max_abs_diff;
using testing_support::random_tensor;

namespace {

std::vector<TensorD> random_maps(Index count, const Shape& shape, std::mt19937_64& rng) {
  std::vector<TensorD> maps;
  for (Index m = 0; m < count; ++m) maps.push_back(random_tensor(shape, rng));
  return maps;
}

// out[c,y,x] = sum_m w[c,m] * input_m[c,y,x] + b[c], straight from the per-modality maps.
TensorD weighted_sum_oracle(const std::vector<TensorD>& maps, const TensorD& w, const TensorD& b) {
  const Index c_count = maps[0].dim(0), h = maps[0].dim(1), wd = maps[0].dim(2);
  TensorD out({c_count, h, wd});
  for (Index c = 0; c < c_count; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < wd; ++x) {
        double acc = b.empty() ? 0.0 : b[c];
        for (std::size_t m = 0; m < maps.size(); ++m) acc += w(c, Index(m)) * maps[m](c, y, x);
        out(c, y, x) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("stack_modalities places modality m in slab m") {
  std::vector<TensorD> maps;
  for (int m = 0; m < 4; ++m) maps.emplace_back(Shape{3, 2, 5}, double(m + 1));
  const auto stack = stack_modalities(maps);
  REQUIRE(stack.shape() == Shape{3, 4, 2, 5});
  for (Index c = 0; c < 3; ++c)
    for (Index m = 0; m < 4; ++m)
      for (Index y = 0; y < 2; ++y)
        for (Index x = 0; x < 5; ++x) CHECK(stack(c, m, y, x) == double(m + 1));
}

TEST_CASE("stack_modalities is pure re-indexing") {
  std::mt19937_64 rng(1);
  SUBCASE("unbatched") {
    const auto maps = random_maps(4, {3, 4, 5}, rng);
    const auto stack = stack_modalities(maps);
    for (Index c = 0; c < 3; ++c)
      for (Index m = 0; m < 4; ++m)
        for (Index y = 0; y < 4; ++y)
          for (Index x = 0; x < 5; ++x) CHECK(stack(c, m, y, x) == maps[std::size_t(m)](c, y, x));
    const auto back = unstack_modalities(stack);
    REQUIRE(back.size() == maps.size());
    for (std::size_t m = 0; m < maps.size(); ++m) CHECK(back[m] == maps[m]);
  }
  SUBCASE("batched round trip") {
    const auto maps = random_maps(3, {2, 5, 4, 4}, rng);
    const auto back = unstack_modalities(stack_modalities(maps));
    for (std::size_t m = 0; m < maps.size(); ++m) CHECK(back[m] == maps[m]);
  }
  SUBCASE("identical inputs give identical slabs") {
    const TensorD one = random_tensor({2, 3, 3}, rng);
    const auto parts = unstack_modalities(stack_modalities(std::vector<TensorD>(4, one)));
    for (const auto& p : parts) CHECK(p == one);
  }
}

TEST_CASE("stack_modalities rejects mismatched shapes") {
  CHECK_THROWS_AS(stack_modalities(std::vector<TensorD>{TensorD({2, 3, 3}), TensorD({2, 3, 4})}), ShapeError);
  CHECK_THROWS_AS(stack_modalities(std::vector<TensorD>{}), ShapeError);
}

TEST_CASE("cmc_forward matches the weighted-sum oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto maps = random_maps(4, {5, 6, 7}, rng);
    const auto w = random_tensor({5, 4}, rng);
    const auto b = random_tensor({5}, rng);
    const auto out = cmc_forward(stack_modalities(maps), w, b);
    CHECK(max_abs_diff(out, weighted_sum_oracle(maps, w, b)) <= 1e-6);
  }
}

TEST_CASE("cmc_forward in single precision agrees with the double oracle") {
  std::mt19937_64 rng(3);
  std::vector<TensorF> maps;
  std::vector<TensorD> widened;
  for (int m = 0; m < 4; ++m) {
    maps.push_back(random_tensor<float>({4, 8, 8}, rng));
    widened.push_back(maps.back().cast<double>());
  }
  const auto w = random_tensor<float>({4, 4}, rng);
  const auto b = random_tensor<float>({4}, rng);
  const auto out = cmc_forward(stack_modalities(maps), w, b);
  CHECK(max_abs_diff(out, weighted_sum_oracle(widened, w.cast<double>(), b.cast<double>())) <= 1e-5);
}

TEST_CASE("one-hot weights select a modality bit-exactly") {
  std::mt19937_64 rng(4);
  const auto maps = random_maps(4, {3, 5, 5}, rng);
  const auto stack = stack_modalities(maps);
  for (Index m = 0; m < 4; ++m) {
    TensorD w({3, 4});
    for (Index c = 0; c < 3; ++c) w(c, m) = 1.0;
    CHECK(cmc_forward(stack, w, TensorD({3})) == maps[std::size_t(m)]);
    CHECK(cmc_forward(stack, w, TensorD()) == maps[std::size_t(m)]);
  }
}

TEST_CASE("quarter weights average the modalities") {
  std::mt19937_64 rng(5);
  const auto maps = random_maps(4, {2, 4, 4}, rng);
  const auto out = cmc_forward(stack_modalities(maps), TensorD({2, 4}, 0.25), TensorD({2}));
  TensorD mean({2, 4, 4});
  for (const auto& m : maps) mean.array() += m.array();
  mean.array() /= 4.0;
  CHECK(max_abs_diff(out, mean) <= 1e-12);
}

TEST_CASE("cmc_forward is linear in the stack without bias") {
  std::mt19937_64 rng(6);
  const auto x = random_tensor({3, 4, 5, 5}, rng);
  const auto y = random_tensor({3, 4, 5, 5}, rng);
  const auto w = random_tensor({3, 4}, rng);
  const double alpha = 0.7, beta = -1.3;
  TensorD combo(x.shape());
  combo.array() = alpha * x.array() + beta * y.array();
  TensorD expected = cmc_forward(x, w, TensorD());
  expected.array() = alpha * expected.array() + beta * cmc_forward(y, w, TensorD()).array();
  CHECK(max_abs_diff(cmc_forward(combo, w, TensorD()), expected) <= 1e-6);
}

TEST_CASE("permuting modalities and weights together leaves the output bit-identical") {
  std::mt19937_64 rng(7);
  const auto maps = random_maps(4, {3, 6, 6}, rng);
  const auto w = random_tensor({3, 4}, rng);
  const auto b = random_tensor({3}, rng);
  const auto reference = cmc_forward(stack_modalities(maps), w, b);
  std::vector<std::size_t> perm{0, 1, 2, 3};
  while (std::next_permutation(perm.begin(), perm.end())) {
    std::vector<TensorD> pm;
    TensorD pw({3, 4});
    for (std::size_t k = 0; k < 4; ++k) {
      pm.push_back(maps[perm[k]]);
      for (Index c = 0; c < 3; ++c) pw(c, Index(k)) = w(c, Index(perm[k]));
    }
    CHECK(cmc_forward(stack_modalities(pm), pw, b) == reference);
  }
}

TEST_CASE("cmc_forward rejects inconsistent parameters") {
  const TensorD stack({3, 4, 2, 2});
  CHECK_THROWS_AS(cmc_forward(stack, TensorD({3, 3}), TensorD({3})), ShapeError);
  CHECK_THROWS_AS(cmc_forward(stack, TensorD({4, 4}), TensorD({4})), ShapeError);
  CHECK_THROWS_AS(cmc_forward(stack, TensorD({3, 4}), TensorD({2})), ShapeError);
  CHECK_THROWS_AS(cmc_forward(TensorD({4, 2, 2}), TensorD({3, 4}), TensorD({3})), ShapeError);
}

TEST_CASE("mrf_fuse") {
  std::mt19937_64 rng(8);
  const auto a = random_tensor({2, 3, 4, 4}, rng);
  const auto b = random_tensor({2, 3, 4, 4}, rng);
  SUBCASE("all-ones decoder map is the identity") { CHECK(mrf_fuse(a, TensorD(a.shape(), 1.0)) == a); }
  SUBCASE("zeros annihilate") {
    const TensorD zero(a.shape());
    CHECK(mrf_fuse(a, zero) == zero);
    CHECK(mrf_fuse(zero, b) == zero);
  }
  SUBCASE("commutative") { CHECK(mrf_fuse(a, b) == mrf_fuse(b, a)); }
  SUBCASE("elementwise product") {
    const auto out = mrf_fuse(a, b);
    for (Index i = 0; i < a.size(); ++i) CHECK(out[i] == a[i] * b[i]);
  }
  SUBCASE("gradient reaches both branches") {
    auto va = Var<double>::leaf(a), vb = Var<double>::leaf(b);
    backward(mrf_fuse(va, vb));
    CHECK(va.grad() == b);
    CHECK(vb.grad() == a);
  }
  SUBCASE("shape mismatch") { CHECK_THROWS_AS(mrf_fuse(a, TensorD({2, 3, 4, 2})), ShapeError); }
}

TEST_CASE("cmc and mrf gradients pass the finite-difference check") {
  std::mt19937_64 rng(9);
  const auto cmc = grad_check(
      [](const std::vector<Var<double>>& v) { return cmc_forward(stack_modalities(std::vector<Var<double>>{v[0], v[1], v[2], v[3]}), v[4], v[5]); },
      {random_tensor({2, 3, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng),
       random_tensor({2, 3, 3, 3}, rng), random_tensor({3, 4}, rng), random_tensor({3}, rng)},
      {"m0", "m1", "m2", "m3", "weights", "bias"});
  CHECK(cmc.passed());
  const auto mrf = grad_check([](const std::vector<Var<double>>& v) { return mrf_fuse(v[0], v[1]); },
                              {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng)}, {"cmc", "decoder"});
  CHECK(mrf.passed());
}
