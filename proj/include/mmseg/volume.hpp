#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "mmseg/tensor.hpp"

namespace mmseg {

inline constexpr std::array<const char*, 4> kModalityNames = {"FLAIR", "T2", "T1", "T1c"};

inline constexpr std::uint8_t kLabelNormal = 0;
inline constexpr std::uint8_t kLabelEdema = 1;
inline constexpr std::uint8_t kLabelNonEnhancing = 2;
inline constexpr std::uint8_t kLabelNecrotic = 3;
inline constexpr std::uint8_t kLabelEnhancing = 4;
inline constexpr Index kLabelCount = 5;

/// Co-registered modalities, [M, D, H, W].
struct MultiModalVolume {
  TensorF data;

  Index modalities() const { return data.dim(0); }
  Index depth() const { return data.dim(1); }
  Index height() const { return data.dim(2); }
  Index width() const { return data.dim(3); }
  /// Depth slice z of every modality, [M, H, W].
  TensorF slice_stack(Index z) const;
};

/// Class ids per voxel, [D, H, W].
struct LabelVolume {
  LabelTensor labels;

  Index depth() const { return labels.dim(0); }
  Index height() const { return labels.dim(1); }
  Index width() const { return labels.dim(2); }
  LabelTensor slice(Index z) const;
};

/// Throws FormatError(invalid_content) if any voxel is >= class_count.
void validate_labels(const LabelTensor& labels, Index class_count = kLabelCount);

/// Per-modality z-score over the whole volume.
void zscore_normalize(MultiModalVolume& volume);

// ---------------------------------------------------------------------------
// MMV1 files: "MMV1", u32 channels, D, H, W (little endian), u8 dtype, raw payload.

enum class VolumeDtype : std::uint8_t { float32 = 0, label8 = 1 };

struct VolumeHeader {
  std::uint32_t channels = 0, depth = 0, height = 0, width = 0;
  VolumeDtype dtype = VolumeDtype::float32;

  static constexpr std::size_t kBytes = 21;
  std::uint64_t payload_bytes() const;
};

void write_volume(const std::string& path, const MultiModalVolume& volume);
void write_volume(const std::string& path, const LabelVolume& volume);

VolumeHeader read_volume_header(const std::string& path);
std::variant<MultiModalVolume, LabelVolume> read_volume(const std::string& path);
MultiModalVolume read_modal_volume(const std::string& path);
LabelVolume read_label_volume(const std::string& path);

// ---------------------------------------------------------------------------
// slice sequences

/// T depth-consecutive modal slice stacks [M,H,W] with their label slices [H,W].
struct SliceSequence {
  std::vector<TensorF> stacks;
  std::vector<LabelTensor> labels;
  Index start = 0;
  std::size_t case_index = 0;

  Index length() const { return static_cast<Index>(stacks.size()); }
  bool has_tumor() const;
};

/// Windows of `steps` consecutive depths starting every `stride` slices; never crosses the volume end.
std::vector<SliceSequence> extract_sequences(const MultiModalVolume& volume, const LabelVolume& labels, Index steps,
                                             Index stride);

// ---------------------------------------------------------------------------
// synthetic phantoms

/// Axis-aligned ellipsoid in voxel coordinates (z, y, x).
struct PhantomEllipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;

  /// Normalized radius; <= 1 inside.
  double rho(double z, double y, double x) const;
};

struct SyntheticCase {
  MultiModalVolume image;
  LabelVolume labels;
  PhantomEllipsoid brain;
  std::vector<PhantomEllipsoid> tumors;  // edema extents
  Index brain_voxels = 0;
};

struct PhantomOptions {
  double noise_sigma = 0.1;
  double min_tumor_fraction = 0.01;
  double max_tumor_fraction = 0.10;
};

/// Ellipsoidal brain with 1-3 tumors. Each tumor is an edema ellipsoid enclosing a core
/// ellipsoid; the core is necrotic at its center and split into enhancing and
/// non-enhancing halves around it. Deterministic in `seed`.
SyntheticCase gen_synthetic_case(std::uint64_t seed, Index depth, Index height, Index width,
                                 const PhantomOptions& options = {});

/// Mean intensity of tissue class `label` in modality order FLAIR, T2, T1, T1c (background is 0).
std::array<double, 4> tissue_intensity(std::uint8_t label);

}  // namespace mmseg
