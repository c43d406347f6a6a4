#include "mmseg/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <set>

#include "mmseg/binary_io.hpp"

namespace mmseg {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  while (true) {
    const auto comma = s.find(',');
    out.emplace_back(trim(s.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, std::string_view text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (text.empty() || ec != std::errc() || ptr != end)
    throw UsageError("invalid value '" + std::string(text) + "' for key '" + key + "'");
  return v;
}

bool parse_bool(const std::string& key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw UsageError("invalid boolean '" + std::string(text) + "' for key '" + key + "'");
}

std::string number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, std::string>)
      out += items[i];
    else
      out += std::to_string(+items[i]);
  }
  return out;
}

// Model keys, shared by the checkpoint header and the run config.
bool set_model_key(ModelConfig& m, const std::string& key, const std::string& value) {
  if (key == "modality_count")
    m.modality_count = parse_number<Index>(key, value);
  else if (key == "class_count")
    m.class_count = parse_number<Index>(key, value);
  else if (key == "encoder_channels") {
    m.encoder_channels.clear();
    for (const auto& item : split_list(value)) m.encoder_channels.push_back(parse_number<Index>(key, item));
  } else if (key == "input_height")
    m.input_height = parse_number<Index>(key, value);
  else if (key == "input_width")
    m.input_width = parse_number<Index>(key, value);
  else if (key == "sequence_length")
    m.sequence_length = parse_number<Index>(key, value);
  else if (key == "convlstm_kernel")
    m.convlstm_kernel = parse_number<Index>(key, value);
  else if (key == "cmc_bias")
    m.cmc_bias = parse_bool(key, value);
  else if (key == "bn_momentum")
    m.bn_momentum = parse_number<double>(key, value);
  else if (key == "bn_epsilon")
    m.bn_epsilon = parse_number<double>(key, value);
  else if (key == "seed")
    m.seed = parse_number<std::uint64_t>(key, value);
  else
    return false;
  return true;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  int line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw UsageError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError("config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

void ModelConfig::validate() const {
  if (modality_count < 1) throw UsageError("modality_count must be positive");
  if (class_count < 2 || class_count > 256) throw UsageError("class_count must be in [2, 256]");
  if (encoder_channels.empty() || encoder_channels.size() > 16) throw UsageError("encoder_channels must list 1 to 16 widths");
  for (Index c : encoder_channels)
    if (c < 1) throw UsageError("encoder channel widths must be positive");
  if (input_height < 1 || input_width < 1 || input_height % downsample() || input_width % downsample())
    throw UsageError("input extents " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                     " must be positive multiples of " + std::to_string(downsample()));
  if (sequence_length < 1) throw UsageError("sequence_length must be positive");
  if (convlstm_kernel < 1 || convlstm_kernel % 2 == 0) throw UsageError("convlstm_kernel must be odd and positive");
  if (!(bn_momentum >= 0 && bn_momentum < 1)) throw UsageError("bn_momentum must be in [0, 1)");
  if (!(bn_epsilon > 0)) throw UsageError("bn_epsilon must be positive");
}

std::string to_text(const ModelConfig& m) {
  std::string out;
  out += "modality_count = " + std::to_string(m.modality_count) + "\n";
  out += "class_count = " + std::to_string(m.class_count) + "\n";
  out += "encoder_channels = " + join(m.encoder_channels) + "\n";
  out += "input_height = " + std::to_string(m.input_height) + "\n";
  out += "input_width = " + std::to_string(m.input_width) + "\n";
  out += "sequence_length = " + std::to_string(m.sequence_length) + "\n";
  out += "convlstm_kernel = " + std::to_string(m.convlstm_kernel) + "\n";
  out += std::string("cmc_bias = ") + (m.cmc_bias ? "true" : "false") + "\n";
  out += "bn_momentum = " + number(m.bn_momentum) + "\n";
  out += "bn_epsilon = " + number(m.bn_epsilon) + "\n";
  out += "seed = " + std::to_string(m.seed) + "\n";
  return out;
}

ModelConfig model_config_from_text(std::string_view text) {
  ModelConfig m;
  std::set<std::string> seen;
  try {
    for (const auto& [key, value] : parse_key_values(text)) {
      if (!seen.insert(key).second) throw UsageError("duplicate key '" + key + "'");
      if (!set_model_key(m, key, value)) throw UsageError("unknown key '" + key + "'");
    }
    if (seen.size() != 11) throw UsageError("model config lists " + std::to_string(seen.size()) + " of 11 keys");
    m.validate();
  } catch (const UsageError& e) {
    throw FormatError(FormatErrc::invalid_content, std::string("model config: ") + e.what());
  }
  return m;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "sequence_length") {
    model.sequence_length = train.sequence_length = parse_number<Index>(key, value);
  } else if (key == "seed") {
    model.seed = train.seed = parse_number<std::uint64_t>(key, value);
  } else if (set_model_key(model, key, value)) {
  } else if (key == "batch_size")
    train.batch_size = parse_number<Index>(key, value);
  else if (key == "sequence_stride")
    train.sequence_stride = parse_number<Index>(key, value);
  else if (key == "lr_phase1")
    train.lr_phase1 = parse_number<double>(key, value);
  else if (key == "lr_phase2")
    train.lr_phase2 = parse_number<double>(key, value);
  else if (key == "phase1_steps")
    train.phase1_steps = parse_number<Index>(key, value);
  else if (key == "phase2_steps")
    train.phase2_steps = parse_number<Index>(key, value);
  else if (key == "adam_beta1")
    train.adam.beta1 = parse_number<double>(key, value);
  else if (key == "adam_beta2")
    train.adam.beta2 = parse_number<double>(key, value);
  else if (key == "adam_epsilon")
    train.adam.epsilon = parse_number<double>(key, value);
  else if (key == "grad_clip")
    train.grad_clip = parse_number<double>(key, value);
  else if (key == "modality_order")
    modality_order = split_list(value);
  else if (key == "data_dir")
    data_dir = value;
  else if (key == "out_dir")
    out_dir = value;
  else if (key.starts_with("region.") && key.size() > 7) {
    RegionSpec spec{key.substr(7), {}};
    for (const auto& item : split_list(value)) {
      const auto label = parse_number<unsigned>(key, item);
      if (label > 255) throw UsageError("region label " + item + " out of range");
      spec.labels.push_back(static_cast<std::uint8_t>(label));
    }
    auto it = std::find_if(regions.begin(), regions.end(), [&](const RegionSpec& r) { return r.name == spec.name; });
    if (it != regions.end())
      *it = std::move(spec);
    else
      regions.push_back(std::move(spec));
  } else
    throw UsageError("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (static_cast<Index>(modality_order.size()) != model.modality_count)
    throw UsageError("modality_order names " + std::to_string(modality_order.size()) + " modalities, expected " +
                     std::to_string(model.modality_count));
  for (const auto& r : regions) {
    r.validate();
    for (auto label : r.labels)
      if (label >= model.class_count) throw UsageError("region '" + r.name + "' uses label " + std::to_string(label));
  }
  if (!(train.adam.beta1 >= 0 && train.adam.beta1 < 1 && train.adam.beta2 >= 0 && train.adam.beta2 < 1))
    throw UsageError("adam betas must be in [0, 1)");
  if (!(train.adam.epsilon > 0)) throw UsageError("adam_epsilon must be positive");
}

std::string RunConfig::to_text() const {
  std::string out = "# model\n" + mmseg::to_text(model);
  out += "modality_order = " + join(modality_order) + "\n";
  out += "# training\n";
  out += "batch_size = " + std::to_string(train.batch_size) + "\n";
  out += "sequence_stride = " + std::to_string(train.sequence_stride) + "\n";
  out += "lr_phase1 = " + number(train.lr_phase1) + "\n";
  out += "lr_phase2 = " + number(train.lr_phase2) + "\n";
  out += "phase1_steps = " + std::to_string(train.phase1_steps) + "\n";
  out += "phase2_steps = " + std::to_string(train.phase2_steps) + "\n";
  out += "adam_beta1 = " + number(train.adam.beta1) + "\n";
  out += "adam_beta2 = " + number(train.adam.beta2) + "\n";
  out += "adam_epsilon = " + number(train.adam.epsilon) + "\n";
  out += "grad_clip = " + number(train.grad_clip) + "\n";
  out += "# evaluation\n";
  for (const auto& r : regions) out += "region." + r.name + " = " + join(r.labels) + "\n";
  out += "# paths\n";
  out += "data_dir = " + data_dir + "\n";
  out += "out_dir = " + out_dir + "\n";
  return out;
}

RunConfig parse_run_config(std::string_view text) {
  RunConfig c;
  for (const auto& [key, value] : parse_key_values(text)) c.set(key, value);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  const auto bytes = bin::read_file(path);
  return parse_run_config(std::string_view(bytes.data(), bytes.size()));
}

}  // namespace mmseg
