// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary tensor container shared by model checkpoints, adaptation checkpoints
// and dataset images.
//
//   "P4Q1"  version:u32  count:u32
//   per tensor:  name_len:u16  name  rank:u8  extents:u64[rank]  dtype:u8  data
//
// All integers and floats are little-endian. dtype 0 stores f32, 1 stores f64.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "p4q/tensor.hpp"

namespace p4q {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  DType dtype = DType::F64;
  /// Values widened to double; f32 entries hold exactly representable floats.
  std::vector<double> values;

  Tensor tensor() const { return Tensor(shape, values); }
};

/// Ordered set of named tensors with unique names.
class TensorFile {
 public:
  void add(std::string name, const Tensor& t, DType dtype = DType::F64);
  void add(NamedTensor t);

  bool contains(const std::string& name) const;
  /// Throws FormatError naming the missing tensor.
  const NamedTensor& get(const std::string& name) const;
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::uint8_t> serialize() const;
  static TensorFile deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static TensorFile load(const std::filesystem::path& path);

 private:
  std::vector<NamedTensor> entries_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace p4q
