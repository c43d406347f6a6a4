#include "mmseg/volume.hpp"

#include <cmath>
#include <cstring>

#include "mmseg/binary_io.hpp"

namespace mmseg {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'V', '1'};

std::uint32_t checked_u32(Index v, const char* what) {
  if (v <= 0 || v > Index(UINT32_MAX)) throw ShapeError(std::string("volume ") + what + " out of range");
  return static_cast<std::uint32_t>(v);
}

void write_header(bin::Writer& w, const VolumeHeader& h) {
  w.bytes(kMagic, 4);
  w.u32(h.channels);
  w.u32(h.depth);
  w.u32(h.height);
  w.u32(h.width);
  w.u8(static_cast<std::uint8_t>(h.dtype));
}

VolumeHeader parse_header(bin::Reader& r) {
  r.need(4, "magic");
  if (std::memcmp(r.raw(4, "magic"), kMagic, 4) != 0) throw FormatError(FormatErrc::bad_magic, "not an MMV1 volume");
  VolumeHeader h;
  h.channels = r.u32("header");
  h.depth = r.u32("header");
  h.height = r.u32("header");
  h.width = r.u32("header");
  const std::uint8_t dtype = r.u8("header");
  if (dtype > 1) throw FormatError(FormatErrc::unknown_dtype, "dtype code " + std::to_string(dtype));
  h.dtype = static_cast<VolumeDtype>(dtype);
  if (!h.channels || !h.depth || !h.height || !h.width)
    throw FormatError(FormatErrc::invalid_content, "zero volume extent");
  return h;
}

}  // namespace

std::uint64_t VolumeHeader::payload_bytes() const {
  const std::uint64_t voxels = std::uint64_t(channels) * depth * height * width;
  return voxels * (dtype == VolumeDtype::float32 ? 4u : 1u);
}

TensorF MultiModalVolume::slice_stack(Index z) const {
  const Index m = modalities(), plane = height() * width();
  TensorF out({m, height(), width()});
  for (Index c = 0; c < m; ++c) out.array().segment(c * plane, plane) = data.array().segment((c * depth() + z) * plane, plane);
  return out;
}

LabelTensor LabelVolume::slice(Index z) const {
  const Index plane = height() * width();
  return LabelTensor({height(), width()}, labels.array().segment(z * plane, plane));
}

void validate_labels(const LabelTensor& labels, Index class_count) {
  for (Index i = 0; i < labels.size(); ++i)
    if (labels[i] >= class_count)
      throw FormatError(FormatErrc::invalid_content,
                        "label " + std::to_string(int(labels[i])) + " at voxel " + std::to_string(i) + " is not below " +
                            std::to_string(class_count));
}

void zscore_normalize(MultiModalVolume& volume) {
  const Index len = volume.data.size() / volume.modalities();
  for (Index m = 0; m < volume.modalities(); ++m) {
    auto seg = volume.data.array().segment(m * len, len);
    const double mean = seg.template cast<double>().mean();
    const double var = (seg.template cast<double>() - mean).square().mean();
    const double inv = var > 0 ? 1.0 / std::sqrt(var) : 1.0;
    seg = ((seg.template cast<double>() - mean) * inv).template cast<float>();
  }
}

void write_volume(const std::string& path, const MultiModalVolume& volume) {
  require_rank(volume.data, 4, "modal volume");
  VolumeHeader h{checked_u32(volume.modalities(), "channels"), checked_u32(volume.depth(), "depth"),
                 checked_u32(volume.height(), "height"), checked_u32(volume.width(), "width"), VolumeDtype::float32};
  bin::Writer w;
  w.reserve(VolumeHeader::kBytes + h.payload_bytes());
  write_header(w, h);
  for (Index i = 0; i < volume.data.size(); ++i) w.f32(volume.data[i]);
  bin::write_file_atomic(path, w.buffer());
}

void write_volume(const std::string& path, const LabelVolume& volume) {
  require_rank(volume.labels, 3, "label volume");
  VolumeHeader h{1, checked_u32(volume.depth(), "depth"), checked_u32(volume.height(), "height"),
                 checked_u32(volume.width(), "width"), VolumeDtype::label8};
  bin::Writer w;
  w.reserve(VolumeHeader::kBytes + h.payload_bytes());
  write_header(w, h);
  w.bytes(volume.labels.data(), static_cast<std::size_t>(volume.labels.size()));
  bin::write_file_atomic(path, w.buffer());
}

VolumeHeader read_volume_header(const std::string& path) {
  const auto buf = bin::read_file(path);
  bin::Reader r(buf);
  return parse_header(r);
}

std::variant<MultiModalVolume, LabelVolume> read_volume(const std::string& path) {
  const auto buf = bin::read_file(path);
  bin::Reader r(buf);
  const VolumeHeader h = parse_header(r);
  const std::uint64_t payload = h.payload_bytes();
  if (r.remaining() < payload)
    throw FormatError(FormatErrc::truncated, path + " holds " + std::to_string(r.remaining()) + " payload bytes, header implies " +
                                                 std::to_string(payload));
  if (r.remaining() > payload) throw FormatError(FormatErrc::trailing_data, path + " has bytes past the payload");

  if (h.dtype == VolumeDtype::float32) {
    MultiModalVolume v{TensorF({Index(h.channels), Index(h.depth), Index(h.height), Index(h.width)})};
    for (Index i = 0; i < v.data.size(); ++i) v.data[i] = r.f32("payload");
    return v;
  }
  if (h.channels != 1) throw FormatError(FormatErrc::invalid_content, "label volumes have exactly one channel");
  LabelVolume v{LabelTensor({Index(h.depth), Index(h.height), Index(h.width)})};
  std::memcpy(v.labels.data(), r.raw(static_cast<std::size_t>(payload), "payload"), static_cast<std::size_t>(payload));
  return v;
}

MultiModalVolume read_modal_volume(const std::string& path) {
  auto v = read_volume(path);
  if (!std::holds_alternative<MultiModalVolume>(v))
    throw FormatError(FormatErrc::invalid_content, path + " is a label volume, expected image data");
  return std::get<MultiModalVolume>(std::move(v));
}

LabelVolume read_label_volume(const std::string& path) {
  auto v = read_volume(path);
  if (!std::holds_alternative<LabelVolume>(v))
    throw FormatError(FormatErrc::invalid_content, path + " is an image volume, expected labels");
  return std::get<LabelVolume>(std::move(v));
}

bool SliceSequence::has_tumor() const {
  for (const auto& l : labels)
    if ((l.array() > 0).any()) return true;
  return false;
}

std::vector<SliceSequence> extract_sequences(const MultiModalVolume& volume, const LabelVolume& labels, Index steps,
                                             Index stride) {
  if (volume.depth() != labels.depth() || volume.height() != labels.height() || volume.width() != labels.width())
    throw ShapeError("image " + shape_str(volume.data.shape()) + " and labels " + shape_str(labels.labels.shape()) +
                     " disagree");
  if (steps < 1 || stride < 1) throw UsageError("sequence length and stride must be positive");
  if (steps > volume.depth())
    throw ShapeError("sequence length " + std::to_string(steps) + " exceeds volume depth " + std::to_string(volume.depth()));
  std::vector<SliceSequence> out;
  for (Index start = 0; start + steps <= volume.depth(); start += stride) {
    SliceSequence s;
    s.start = start;
    for (Index t = 0; t < steps; ++t) {
      s.stacks.push_back(volume.slice_stack(start + t));
      s.labels.push_back(labels.slice(start + t));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mmseg
