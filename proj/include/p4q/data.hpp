// SPDX-License-Identifier: Apache-2.0
#pragma once

// Labelled image sets and the procedural shape dataset.
//
// On disk a split is a manifest of `label<TAB>class_name<TAB>tensor_file`
// lines; each tensor file is a container holding one `image` tensor
// [H, W, C]. Tensor paths are relative to the manifest's directory.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "p4q/tensor.hpp"

namespace p4q {

struct Dataset {
  /// Each [H, W, C] with values in [0, 1].
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  /// Throws DataError when labels or class names break the invariants.
  void validate() const;
  /// Images idx[0], idx[1], ... stacked into [n, H, W, C].
  Tensor stack(const std::vector<std::size_t>& idx) const;
  Tensor stack_all() const;
  /// The samples at positions idx, in that order.
  Dataset subset(const std::vector<std::size_t>& idx) const;
};

/// Most classes synth_dataset can name.
inline constexpr std::size_t kMaxSynthClasses = 32;

/// Class k is color k / 4 painted as shape k % 4, so the first eight classes
/// cover two colors and four shapes.
std::vector<std::string> synth_class_names(std::size_t classes);

/// n_per_class rendered 32×32 RGB images per class: a jittered colored shape on
/// a noisy background. Labels are grouped by class. Same seed, same bytes.
Dataset synth_dataset(std::uint64_t seed, std::size_t classes, std::size_t n_per_class);

/// Writes `<dir>/<split>.manifest` and one tensor file per image under `<dir>/<split>/`.
void save_split(const Dataset& data, const std::filesystem::path& dir, const std::string& split);
/// Reads a manifest; class names are ordered by label and must be consistent.
Dataset load_split(const std::filesystem::path& dir, const std::string& split);

/// Percentage of `query` samples whose nearest `reference` image (pixel L2,
/// first index on ties) carries the same label.
double nearest_neighbor_accuracy(const Dataset& reference, const Dataset& query);

}  // namespace p4q
