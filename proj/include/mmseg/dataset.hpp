#pragma once

// Case directories: `case_<i>_img.mmv` / `case_<i>_lbl.mmv` pairs.

#include <cstdint>
#include <string>
#include <vector>

#include "mmseg/training.hpp"
#include "mmseg/volume.hpp"

namespace mmseg {

struct CaseFiles {
  std::uint64_t index = 0;
  std::string image;
  std::string labels;
};

std::string case_image_name(std::uint64_t index);
std::string case_label_name(std::uint64_t index);

/// Per-case generator seed derived from a run seed (splitmix64 of seed + index).
std::uint64_t case_seed(std::uint64_t seed, std::uint64_t index);

/// Writes `count` synthetic cases into `dir`, creating it if needed.
void generate_cases(const std::string& dir, std::uint64_t count, std::uint64_t seed, Index depth, Index height,
                    Index width);

/// All complete pairs in `dir`, sorted by index. A lone image or label file is an error.
std::vector<CaseFiles> find_cases(const std::string& dir);

/// Reads a pair, checks that the shapes agree and the labels are valid, and z-scores the image.
TrainingCase load_case(const CaseFiles& files, Index class_count = kLabelCount);

}  // namespace mmseg
