// SPDX-License-Identifier: Apache-2.0
#include "p4q/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "p4q/error.hpp"

namespace p4q {

namespace {

constexpr char kMagic[4] = {'P', '4', 'Q', '1'};

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated container while reading ") + what);
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void TensorFile::add(std::string name, const Tensor& t, DType dtype) {
  NamedTensor e{std::move(name), t.shape(), dtype, {t.values().begin(), t.values().end()}};
  if (dtype == DType::F32)
    for (double& v : e.values) v = static_cast<double>(static_cast<float>(v));
  add(std::move(e));
}

void TensorFile::add(NamedTensor t) {
  if (t.name.empty() || t.name.size() > std::numeric_limits<std::uint16_t>::max())
    throw ParameterError("tensor name must have 1..65535 bytes");
  if (t.shape.size() > std::numeric_limits<std::uint8_t>::max()) throw DimensionError("tensor rank above 255");
  if (shape_size(t.shape) != t.values.size()) throw DimensionError("tensor '" + t.name + "' values do not match shape");
  if (contains(t.name)) throw ParameterError("duplicate tensor name '" + t.name + "'");
  entries_.push_back(std::move(t));
}

bool TensorFile::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const NamedTensor& TensorFile::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw FormatError("container has no tensor named '" + name + "'");
}

std::vector<std::uint8_t> TensorFile::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) put_le<std::uint64_t>(out, d);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    for (double v : e.values) {
      if (e.dtype == DType::F32)
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

TensorFile TensorFile::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.get_string(4, "magic") != std::string(kMagic, 4)) throw FormatError("bad magic, not a P4Q1 container");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("tensor count");
  TensorFile f;
  for (std::uint32_t t = 0; t < count; ++t) {
    NamedTensor e;
    e.name = r.get_string(r.get<std::uint16_t>("name length"), "name");
    const auto rank = r.get<std::uint8_t>("rank");
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto extent = r.get<std::uint64_t>("extent");
      if (extent == 0 || extent > (std::uint64_t{1} << 40)) throw FormatError("implausible extent in '" + e.name + "'");
      e.shape.push_back(static_cast<std::size_t>(extent));
      n *= static_cast<std::size_t>(extent);
      if (n > (std::size_t{1} << 40)) throw FormatError("implausible size of '" + e.name + "'");
    }
    const auto tag = r.get<std::uint8_t>("dtype");
    if (tag > 1) throw FormatError("unknown dtype tag " + std::to_string(tag) + " in '" + e.name + "'");
    e.dtype = static_cast<DType>(tag);
    e.values.resize(n);
    for (auto& v : e.values)
      v = e.dtype == DType::F32 ? static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>("f32 data")))
                                : std::bit_cast<double>(r.get<std::uint64_t>("f64 data"));
    try {
      f.add(std::move(e));
    } catch (const Error& err) {
      throw FormatError(err.what());
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after the last tensor");
  return f;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

void TensorFile::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

TensorFile TensorFile::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

}  // namespace p4q
