#include "mmseg/checkpoint.hpp"

#include <map>

#include "mmseg/binary_io.hpp"
#include "mmseg/config.hpp"

namespace mmseg {

namespace {
constexpr char kMagic[4] = {'M', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<char> encode_checkpoint(const ModelParams<float>& params, const ModelConfig& config) {
  validate_params(params, config);
  bin::Writer w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  const std::string text = to_text(config);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.str(text);
  params.visit([&](const std::string& name, const TensorF& t, TensorRole) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (Index i = 0; i < t.size(); ++i) w.f32(t[i]);
  });
  return w.buffer();
}

Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
  bin::Reader r(bytes);
  const std::string magic = r.remaining() >= 4 ? r.str(4, "magic") : std::string();
  if (magic != std::string(kMagic, 4)) throw FormatError(FormatErrc::bad_magic, "not an MMCK checkpoint");
  const auto version = r.u32("version");
  if (version != kVersion)
    throw FormatError(FormatErrc::version_mismatch, "checkpoint version " + std::to_string(version) + ", expected 1");
  const auto text_len = r.u32("config length");
  Checkpoint ck{{}, model_config_from_text(r.str(text_len, "config text"))};

  std::map<std::string, TensorF> tensors;
  while (!r.at_end()) {
    const auto name_len = r.u32("tensor name length");
    std::string name = r.str(name_len, "tensor name");
    const auto ndim = r.u32("tensor rank");
    if (ndim == 0 || ndim > 8) throw FormatError(FormatErrc::invalid_content, "tensor " + name + " has rank " + std::to_string(ndim));
    Shape shape;
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto extent = r.u32("tensor dims");
      if (extent == 0) throw FormatError(FormatErrc::invalid_content, "tensor " + name + " has a zero extent");
      shape.push_back(extent);
      count *= extent;
      if (count > r.remaining()) r.need(count, "tensor payload");
    }
    r.need(count * 4, "tensor payload");
    TensorF t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = r.f32("tensor payload");
    if (!tensors.emplace(name, std::move(t)).second)
      throw FormatError(FormatErrc::name_collision, "tensor '" + name + "' appears twice");
  }

  ck.params = init_params<float>(ck.config);
  std::size_t used = 0;
  ck.params.visit([&](const std::string& name, TensorF& t, TensorRole) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError(FormatErrc::config_mismatch, "missing tensor '" + name + "'");
    if (it->second.shape() != t.shape())
      throw FormatError(FormatErrc::config_mismatch, "tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                                                         ", config implies " + shape_str(t.shape()));
    t = std::move(it->second);
    ++used;
  });
  if (used != tensors.size())
    throw FormatError(FormatErrc::config_mismatch, std::to_string(tensors.size() - used) + " tensors not used by the config");
  return ck;
}

void save_checkpoint(const std::string& path, const ModelParams<float>& params, const ModelConfig& config) {
  bin::write_file_atomic(path, encode_checkpoint(params, config));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(bin::read_file(path)); }

}  // namespace mmseg
