#pragma once

// Single-file tensor archive shared by every checkpoint kind.
//
// Layout (little-endian):
//   char[4]  "SFAR"
//   u32      container version (1)
//   str      format tag, e.g. "backbone-v1"
//   str      JSON config echo
//   u64      tensor count
//   per tensor: str name, u8 dtype (0 = f32, 1 = f64), u32 rank, i64 dims[rank], raw data
// where str = u32 byte length + bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "stylefield/core/nn.hpp"

namespace stylefield {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

struct StoredTensor {
  std::string name;
  Shape shape;
  bool f64 = false;
  std::vector<double> data;  // widened; f32 payloads round-trip exactly
};

struct Archive {
  std::string tag;
  nlohmann::json config = nlohmann::json::object();
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  template <class S>
  void put(const std::string& name, const Tensor<S>& t) {
    StoredTensor st;
    st.name = name;
    st.shape = t.shape;
    st.f64 = sizeof(S) == 8;
    st.data.assign(t.data.begin(), t.data.end());
    tensors.push_back(std::move(st));
  }

  template <class S>
  void put(const std::string& name, const std::vector<S>& v) {
    put(name, Tensor<S>(Shape{static_cast<int>(v.size())}, v));
  }

  template <class S>
  Tensor<S> get(const std::string& name) const {
    const StoredTensor* st = find(name);
    if (!st) throw FormatError("archive '" + tag + "' has no tensor '" + name + "'");
    Tensor<S> t;
    t.shape = st->shape;
    t.data.assign(st->data.begin(), st->data.end());
    return t;
  }
};

namespace detail {

inline void write_str(std::ostream& os, const std::string& s) {
  const auto n = static_cast<std::uint32_t>(s.size());
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_pod(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("truncated archive: " + path);
  return v;
}

inline std::string read_str(std::istream& is, const std::string& path) {
  const auto n = read_pod<std::uint32_t>(is, path);
  if (n > (1u << 28)) throw FormatError("implausible string length in archive: " + path);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError("truncated archive: " + path);
  return s;
}

}  // namespace detail

/// Writes to a sibling temp file and renames it over `path`, so readers
/// never observe a partially written checkpoint.
inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open for writing: " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw FormatError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_archive(const Archive& ar, const std::filesystem::path& path) {
  std::ostringstream os(std::ios::binary);
  os.write("SFAR", 4);
  detail::write_pod<std::uint32_t>(os, 1);
  detail::write_str(os, ar.tag);
  detail::write_str(os, ar.config.dump());
  detail::write_pod<std::uint64_t>(os, ar.tensors.size());
  for (const auto& t : ar.tensors) {
    detail::write_str(os, t.name);
    detail::write_pod<std::uint8_t>(os, t.f64 ? 1 : 0);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::write_pod<std::int64_t>(os, d);
    if (t.f64) {
      os.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
    } else {
      std::vector<float> f(t.data.begin(), t.data.end());
      os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
    }
  }
  write_atomic(path, os.str());
}

/// Reads an archive; when `expected_tag` is non-empty a different tag is a FormatError.
inline Archive read_archive(const std::filesystem::path& path, const std::string& expected_tag = {}) {
  const std::string p = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open archive: " + p);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SFAR", 4) != 0) throw FormatError("not a stylefield archive: " + p);
  const auto version = detail::read_pod<std::uint32_t>(is, p);
  if (version != 1) throw FormatError("unsupported archive container version " + std::to_string(version));
  Archive ar;
  ar.tag = detail::read_str(is, p);
  if (!expected_tag.empty() && ar.tag != expected_tag)
    throw FormatError("archive " + p + " has format tag '" + ar.tag + "', expected '" + expected_tag + "'");
  try {
    ar.config = nlohmann::json::parse(detail::read_str(is, p));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad config echo in archive " + p + ": " + e.what());
  }
  const auto count = detail::read_pod<std::uint64_t>(is, p);
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = detail::read_str(is, p);
    const auto dtype = detail::read_pod<std::uint8_t>(is, p);
    if (dtype > 1) throw FormatError("unknown dtype in archive " + p);
    t.f64 = dtype == 1;
    const auto rank = detail::read_pod<std::uint32_t>(is, p);
    if (rank > 8) throw FormatError("implausible tensor rank in archive " + p);
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = detail::read_pod<std::int64_t>(is, p);
      if (d < 0 || d > (1LL << 31)) throw FormatError("bad tensor dimension in archive " + p);
      t.shape.push_back(static_cast<int>(d));
    }
    const std::size_t n = shape_numel(t.shape);
    if (t.f64) {
      t.data.resize(n);
      if (n && !is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * 8)))
        throw FormatError("truncated archive: " + p);
    } else {
      std::vector<float> f(n);
      if (n && !is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(n * 4)))
        throw FormatError("truncated archive: " + p);
      t.data.assign(f.begin(), f.end());
    }
    ar.tensors.push_back(std::move(t));
  }
  return ar;
}

/// Copies every parameter of `ps` into the archive under `prefix + name`.
template <class S>
void store_params(Archive& ar, const nn::ParamStore<S>& ps, const std::string& prefix = {}) {
  for (const auto& [name, v] : ps.entries()) ar.put(prefix + name, v.value());
}

/// Overwrites parameter values from the archive; shapes must match exactly.
template <class S>
void load_params(const Archive& ar, nn::ParamStore<S>& ps, const std::string& prefix = {}) {
  for (const auto& [name, v] : ps.entries()) {
    Tensor<S> t = ar.get<S>(prefix + name);
    if (t.shape != v.shape())
      throw FormatError("shape mismatch for '" + name + "': archive " + shape_str(t.shape) + ", model " +
                        shape_str(v.shape()));
    const_cast<ad::Var<S>&>(v).mutable_value() = std::move(t);
  }
}

}  // namespace stylefield
