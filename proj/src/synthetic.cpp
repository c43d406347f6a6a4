#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "mmseg/volume.hpp"

namespace mmseg {

namespace {

// fractions of the edema radius
constexpr double kCoreRadius = 0.7;
constexpr double kNecroticRadius = 0.35;
constexpr int kMaxAttempts = 64;

struct Ellipsoid {
  double cz = 0, cy = 0, cx = 0;  // center (voxels)
  double rz = 1, ry = 1, rx = 1;  // radii (voxels)

  double rho(double z, double y, double x) const { return public_form().rho(z, y, x); }
  PhantomEllipsoid public_form() const { return {{cz, cy, cx}, {rz, ry, rx}}; }
};

struct Tumor {
  Ellipsoid edema;
  double split_angle;  // in-plane direction separating enhancing from non-enhancing core
};

struct Layout {
  Ellipsoid brain;
  std::vector<Tumor> tumors;
};

Layout draw_layout(std::mt19937_64& rng, Index depth, Index height, Index width, const PhantomOptions& opt) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  Layout l;
  l.brain = {(depth - 1) / 2.0, (height - 1) / 2.0, (width - 1) / 2.0,
             depth * between(0.44, 0.48), height * between(0.44, 0.48), width * between(0.44, 0.48)};
  const double brain_volume = 4.0 / 3.0 * std::numbers::pi * l.brain.rz * l.brain.ry * l.brain.rx;

  const int count = 1 + static_cast<int>(unit(rng) * 3.0);
  const double lo = std::max(opt.min_tumor_fraction, 0.03), hi = std::min(opt.max_tumor_fraction, 0.08);
  const double target = between(std::min(lo, hi), hi) * brain_volume;
  std::vector<double> share(static_cast<std::size_t>(count));
  for (auto& s : share) s = between(0.5, 1.0);
  const double share_sum = std::accumulate(share.begin(), share.end(), 0.0);

  for (int i = 0; i < count; ++i) {
    const double volume = target * share[static_cast<std::size_t>(i)] / share_sum;
    const double ry_ratio = between(0.85, 1.15), rz_ratio = between(0.6, 0.9);
    const double rx = std::cbrt(volume / (4.0 / 3.0 * std::numbers::pi * ry_ratio * rz_ratio));
    Tumor t{{0, 0, 0, rx * rz_ratio, rx * ry_ratio, rx}, between(0.0, 2.0 * std::numbers::pi)};
    // place fully inside the brain and clear of earlier tumors, shrinking if space is short
    for (int tries = 0;; ++tries) {
      const double lim_z = std::max(0.0, l.brain.rz - t.edema.rz - 1), lim_y = std::max(0.0, l.brain.ry - t.edema.ry - 1),
                   lim_x = std::max(0.0, l.brain.rx - t.edema.rx - 1);
      t.edema.cz = l.brain.cz + between(-0.7, 0.7) * lim_z;
      t.edema.cy = l.brain.cy + between(-0.7, 0.7) * lim_y;
      t.edema.cx = l.brain.cx + between(-0.7, 0.7) * lim_x;
      const bool inside = std::abs(t.edema.cz - l.brain.cz) / l.brain.rz + t.edema.rz / l.brain.rz <= 1.0 &&
                          std::abs(t.edema.cy - l.brain.cy) / l.brain.ry + t.edema.ry / l.brain.ry <= 1.0 &&
                          std::abs(t.edema.cx - l.brain.cx) / l.brain.rx + t.edema.rx / l.brain.rx <= 1.0;
      bool clear = true;
      for (const auto& other : l.tumors) {
        const double dz = t.edema.cz - other.edema.cz, dy = t.edema.cy - other.edema.cy, dx = t.edema.cx - other.edema.cx;
        const double reach = std::max({t.edema.rz, t.edema.ry, t.edema.rx}) +
                             std::max({other.edema.rz, other.edema.ry, other.edema.rx}) + 1.0;
        if (dz * dz + dy * dy + dx * dx < reach * reach) clear = false;
      }
      if (inside && clear) break;
      if (tries % 16 == 15) {
        t.edema.rz *= 0.9;
        t.edema.ry *= 0.9;
        t.edema.rx *= 0.9;
      }
    }
    l.tumors.push_back(t);
  }
  return l;
}

struct Raster {
  LabelTensor labels;
  std::vector<bool> brain;
  Index brain_voxels = 0, tumor_voxels = 0;
  std::array<Index, kLabelCount> histogram{};
};

Raster rasterize(const Layout& l, Index depth, Index height, Index width) {
  Raster r{LabelTensor({depth, height, width}), std::vector<bool>(static_cast<std::size_t>(depth * height * width))};
  Index i = 0;
  for (Index z = 0; z < depth; ++z)
    for (Index y = 0; y < height; ++y)
      for (Index x = 0; x < width; ++x, ++i) {
        std::uint8_t label = kLabelNormal;
        const bool in_brain = l.brain.rho(double(z), double(y), double(x)) <= 1.0;
        if (in_brain) {
          ++r.brain_voxels;
          for (const auto& t : l.tumors) {
            const double rho = t.edema.rho(double(z), double(y), double(x));
            if (rho > 1.0) continue;
            if (rho > kCoreRadius)
              label = kLabelEdema;
            else if (rho <= kNecroticRadius)
              label = kLabelNecrotic;
            else {
              const double side = (x - t.edema.cx) * std::cos(t.split_angle) + (y - t.edema.cy) * std::sin(t.split_angle);
              label = side >= 0 ? kLabelEnhancing : kLabelNonEnhancing;
            }
            break;
          }
        }
        r.brain[static_cast<std::size_t>(i)] = in_brain;
        r.labels[i] = label;
        ++r.histogram[label];
        if (label != kLabelNormal) ++r.tumor_voxels;
      }
  return r;
}

}  // namespace

double PhantomEllipsoid::rho(double z, double y, double x) const {
  const double dz = (z - center[0]) / radii[0], dy = (y - center[1]) / radii[1], dx = (x - center[2]) / radii[2];
  return std::sqrt(dz * dz + dy * dy + dx * dx);
}

std::array<double, 4> tissue_intensity(std::uint8_t label) {
  //                   FLAIR  T2   T1   T1c
  switch (label) {
    case kLabelEdema: return {2.0, 2.0, 0.8, 1.0};
    case kLabelNonEnhancing: return {1.4, 1.6, 0.5, 1.4};
    case kLabelNecrotic: return {0.7, 2.4, 0.3, 0.5};
    case kLabelEnhancing: return {1.3, 1.3, 1.0, 2.6};
    default: return {1.0, 1.0, 1.0, 1.0};
  }
}

SyntheticCase gen_synthetic_case(std::uint64_t seed, Index depth, Index height, Index width, const PhantomOptions& options) {
  if (depth < 16 || height < 16 || width < 16)
    throw UsageError("synthetic volumes need every extent >= 16, got " + shape_str({depth, height, width}));
  std::mt19937_64 rng(seed);

  Raster best;
  Layout best_layout;
  bool have = false;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Layout layout = draw_layout(rng, depth, height, width, options);
    Raster r = rasterize(layout, depth, height, width);
    const double fraction = double(r.tumor_voxels) / double(std::max<Index>(r.brain_voxels, 1));
    const bool in_range = fraction >= options.min_tumor_fraction && fraction <= options.max_tumor_fraction;
    const bool all_classes = std::all_of(r.histogram.begin() + 1, r.histogram.end(), [](Index n) { return n > 0; });
    if (in_range && (!have || all_classes)) {
      best = std::move(r);
      best_layout = std::move(layout);
      have = true;
      if (all_classes) break;
    }
  }
  if (!have) throw NumericalError("could not place tumors within the requested volume fraction");

  SyntheticCase out{MultiModalVolume{TensorF({4, depth, height, width})}, LabelVolume{std::move(best.labels)},
                    best_layout.brain.public_form(), {}, best.brain_voxels};
  for (const auto& t : best_layout.tumors) out.tumors.push_back(t.edema.public_form());
  std::normal_distribution<double> noise(0.0, options.noise_sigma);
  const Index voxels = depth * height * width;
  for (Index m = 0; m < 4; ++m)
    for (Index i = 0; i < voxels; ++i) {
      const double base = best.brain[static_cast<std::size_t>(i)] ? tissue_intensity(out.labels.labels[i])[static_cast<std::size_t>(m)] : 0.0;
      out.image.data[m * voxels + i] = static_cast<float>(base + noise(rng));
    }
  return out;
}

}  // namespace mmseg
