// SPDX-License-Identifier: Apache-2.0
#include "p4q/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "p4q/config.hpp"
#include "p4q/container.hpp"
#include "p4q/error.hpp"
#include "p4q/rng.hpp"

namespace p4q {

namespace {

struct Color {
  const char* name;
  std::array<double, 3> rgb;
};

constexpr Color kColors[] = {
    {"red", {0.90, 0.15, 0.15}},    {"green", {0.15, 0.80, 0.20}},  {"blue", {0.20, 0.30, 0.95}},
    {"yellow", {0.95, 0.90, 0.20}}, {"magenta", {0.90, 0.20, 0.85}}, {"cyan", {0.20, 0.90, 0.90}},
    {"orange", {0.95, 0.55, 0.10}}, {"white", {0.95, 0.95, 0.95}},
};

constexpr const char* kShapes[] = {"circle", "square", "triangle", "ring"};
constexpr std::size_t kShapeCount = std::size(kShapes);
constexpr std::size_t kSide = 32;

bool inside(std::size_t shape, double dx, double dy, double r) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case 2: {
      // upward triangle with apex at -r and base at +0.8r
      if (dy < -r || dy > 0.8 * r) return false;
      const double half = (dy + r) / 1.8;
      return std::abs(dx) <= half;
    }
    default: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.45 * r * r;
    }
  }
}

Tensor render(Rng& rng, std::size_t label) {
  const Color& color = kColors[label / kShapeCount];
  const std::size_t shape = label % kShapeCount;
  const double cx = 15.5 + rng.uniform(-4.0, 4.0);
  const double cy = 15.5 + rng.uniform(-4.0, 4.0);
  const double r = rng.uniform(7.0, 11.0);
  std::array<double, 3> tint{};
  for (std::size_t c = 0; c < 3; ++c) tint[c] = std::clamp(color.rgb[c] + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  std::vector<double> px(kSide * kSide * 3);
  for (std::size_t y = 0; y < kSide; ++y)
    for (std::size_t x = 0; x < kSide; ++x) {
      const bool on = inside(shape, static_cast<double>(x) - cx, static_cast<double>(y) - cy, r);
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = rng.uniform(-0.08, 0.08);
        const double base = on ? tint[c] : rng.uniform(0.0, 0.35);
        px[(y * kSide + x) * 3 + c] = std::clamp(base + noise, 0.0, 1.0);
      }
    }
  return Tensor({kSide, kSide, 3}, std::move(px));
}

std::string image_file(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.p4q", i);
  return buf;
}

}  // namespace

void Dataset::validate() const {
  if (class_names.empty()) throw DataError("dataset has no class names");
  if (std::set<std::string>(class_names.begin(), class_names.end()).size() != class_names.size())
    throw DataError("class names must be unique");
  if (labels.size() != images.size()) throw DataError("dataset needs one label per image");
  for (std::size_t y : labels)
    if (y >= class_names.size()) throw DataError("label " + std::to_string(y) + " has no class name");
  for (const auto& im : images)
    if (im.shape() != images.front().shape()) throw DataError("dataset images differ in shape");
}

Tensor Dataset::stack(const std::vector<std::size_t>& idx) const {
  if (idx.empty()) throw DataError("cannot stack an empty selection");
  const Shape& s = images.at(idx.front()).shape();
  const std::size_t per = shape_size(s);
  std::vector<double> out(idx.size() * per);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto v = images.at(idx[i]).values();
    std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  Shape shape{idx.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  return Tensor(std::move(shape), std::move(out));
}

Tensor Dataset::stack_all() const {
  std::vector<std::size_t> idx(size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return stack(idx);
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
  Dataset d;
  d.class_names = class_names;
  for (std::size_t i : idx) {
    d.images.push_back(images.at(i));
    d.labels.push_back(labels.at(i));
  }
  return d;
}

std::vector<std::string> synth_class_names(std::size_t classes) {
  if (classes == 0 || classes > kMaxSynthClasses)
    throw ParameterError("synthetic dataset supports 1.." + std::to_string(kMaxSynthClasses) + " classes");
  std::vector<std::string> names;
  for (std::size_t k = 0; k < classes; ++k)
    names.push_back(std::string(kColors[k / kShapeCount].name) + " " + kShapes[k % kShapeCount]);
  return names;
}

Dataset synth_dataset(std::uint64_t seed, std::size_t classes, std::size_t n_per_class) {
  Dataset d;
  d.class_names = synth_class_names(classes);
  Rng rng(seed);
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t i = 0; i < n_per_class; ++i) {
      d.images.push_back(render(rng, k));
      d.labels.push_back(k);
    }
  return d;
}

void save_split(const Dataset& data, const std::filesystem::path& dir, const std::string& split) {
  data.validate();
  std::filesystem::create_directories(dir / split);
  std::ostringstream manifest;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string rel = split + "/" + image_file(i);
    TensorFile f;
    f.add("image", data.images[i], DType::F64);
    f.save(dir / rel);
    manifest << data.labels[i] << '\t' << data.class_names[data.labels[i]] << '\t' << rel << '\n';
  }
  std::ofstream out(dir / (split + ".manifest"), std::ios::trunc);
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << manifest.str();
}

Dataset load_split(const std::filesystem::path& dir, const std::string& split) {
  const auto path = dir / (split + ".manifest");
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Dataset d;
  std::map<std::size_t, std::string> names;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      fields.push_back(line.substr(start, tab - start));
    fields.push_back(line.substr(start));
    if (fields.size() != 3) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 3 fields");
    const auto label = static_cast<std::size_t>(parse_int(fields[0], "label"));
    if (const auto it = names.find(label); it != names.end() && it->second != fields[1])
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": label " + fields[0] + " renamed");
    names[label] = fields[1];
    d.images.push_back(TensorFile::load(dir / fields[2]).get("image").tensor());
    d.labels.push_back(label);
  }
  if (d.images.empty()) throw DataError(path.string() + " lists no images");
  for (std::size_t k = 0; k < names.size(); ++k) {
    const auto it = names.find(k);
    if (it == names.end()) throw DataError(path.string() + ": labels are not contiguous from 0");
    d.class_names.push_back(it->second);
  }
  d.validate();
  return d;
}

double nearest_neighbor_accuracy(const Dataset& reference, const Dataset& query) {
  if (reference.size() == 0 || query.size() == 0) throw DataError("1-NN needs non-empty sets");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < query.size(); ++q) {
    const auto x = query.images[q].values();
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_label = 0;
    for (std::size_t r = 0; r < reference.size(); ++r) {
      const auto y = reference.images[r].values();
      if (y.size() != x.size()) throw DimensionError("1-NN images differ in shape");
      double d = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) d += (x[i] - y[i]) * (x[i] - y[i]);
      if (d < best) {
        best = d;
        best_label = reference.labels[r];
      }
    }
    if (best_label == query.labels[q]) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(query.size());
}

}  // namespace p4q
