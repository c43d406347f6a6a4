#include "mmseg/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <regex>

namespace mmseg {

namespace fs = std::filesystem;

std::string case_image_name(std::uint64_t index) { return "case_" + std::to_string(index) + "_img.mmv"; }
std::string case_label_name(std::uint64_t index) { return "case_" + std::to_string(index) + "_lbl.mmv"; }

std::uint64_t case_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

void generate_cases(const std::string& dir, std::uint64_t count, std::uint64_t seed, Index depth, Index height,
                    Index width) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto c = gen_synthetic_case(case_seed(seed, i), depth, height, width);
    write_volume((fs::path(dir) / case_image_name(i)).string(), c.image);
    write_volume((fs::path(dir) / case_label_name(i)).string(), c.labels);
  }
}

std::vector<CaseFiles> find_cases(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("data directory " + dir + " does not exist");
  static const std::regex pattern(R"(case_(\d+)_(img|lbl)\.mmv)");
  std::map<std::uint64_t, CaseFiles> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (!entry.is_regular_file() || !std::regex_match(name, m, pattern)) continue;
    auto& c = found[std::stoull(m[1].str())];
    c.index = std::stoull(m[1].str());
    (m[2] == "img" ? c.image : c.labels) = entry.path().string();
  }
  std::vector<CaseFiles> out;
  for (auto& [index, c] : found) {
    if (c.image.empty() || c.labels.empty())
      throw IoError("case " + std::to_string(index) + " in " + dir + " lacks its " + (c.image.empty() ? "image" : "label") + " file");
    out.push_back(std::move(c));
  }
  if (out.empty()) throw IoError("no case_<i>_img.mmv / case_<i>_lbl.mmv pairs in " + dir);
  return out;
}

TrainingCase load_case(const CaseFiles& files, Index class_count) {
  TrainingCase c{read_modal_volume(files.image), read_label_volume(files.labels)};
  const Shape& img = c.image.data.shape();
  if (Shape(img.begin() + 1, img.end()) != c.labels.labels.shape())
    throw ShapeError("case " + std::to_string(files.index) + ": image " + shape_str(img) + " and labels " +
                     shape_str(c.labels.labels.shape()) + " disagree");
  validate_labels(c.labels.labels, class_count);
  zscore_normalize(c.image);
  return c;
}

}  // namespace mmseg
