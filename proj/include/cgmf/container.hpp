#pragma once

// Single-file tensor container.
//
//   offset 0   8 bytes   magic "CGMFTNSR"
//   offset 8   8 bytes   header length H, unsigned little-endian
//   offset 16  H bytes   UTF-8 JSON header
//   offset 16+H          blob: tensor payloads, little-endian, densely packed
//
// Header:
//   {
//     "format_version": 1,
//     "attributes": { ... free-form ... },
//     "tensors": { "<name>": {"dtype": "f32"|"f64", "shape": [..],
//                             "byte_offset": o, "byte_length": n}, ... }
//   }
//
// Offsets are relative to the blob start. Payloads appear in the order they
// were added; the first starts at 0 and each next one starts where the
// previous ended, so the blob length equals the sum of byte_length.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cgmf/errors.hpp"
#include "json.hpp"

namespace cgmf::io {

inline constexpr char kMagic[8] = {'C', 'G', 'M', 'F', 'T', 'N', 'S', 'R'};
inline constexpr std::int64_t kFormatVersion = 1;

enum class DType { f32, f64 };

inline const char* to_string(DType t) { return t == DType::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw CorruptionError("unknown dtype '" + s + "'");
}

struct TensorRecord {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::size_t> shape;
  std::vector<std::byte> payload;  // little-endian

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

namespace detail {

template <typename U>
void put_le(std::vector<std::byte>& out, U bits) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::byte>((bits >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::byte* p) {
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(std::to_integer<unsigned>(p[i])) << (8 * i);
  return bits;
}

}  // namespace detail

class TensorContainer {
 public:
  nlohmann::json& attributes() { return attributes_; }
  const nlohmann::json& attributes() const { return attributes_; }
  const std::vector<TensorRecord>& tensors() const { return tensors_; }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors_)
      if (t.name == name) return &t;
    return nullptr;
  }

  const TensorRecord& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw SchemaError("tensor '" + name + "' not present in container");
  }

  /// Stores values as `dtype`; f64 values narrowed to f32 when asked.
  template <typename T>
  void add(const std::string& name, std::span<const T> values, std::vector<std::size_t> shape, DType dtype) {
    if (contains(name)) throw std::invalid_argument("duplicate tensor name '" + name + "'");
    TensorRecord rec{name, dtype, std::move(shape), {}};
    if (rec.element_count() != values.size())
      throw DimensionError("tensor '" + name + "': value count does not match shape");
    rec.payload.reserve(values.size() * dtype_size(dtype));
    for (T v : values) {
      if (dtype == DType::f32)
        detail::put_le(rec.payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else
        detail::put_le(rec.payload, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
    }
    tensors_.push_back(std::move(rec));
  }

  /// Decodes a tensor into T. f32 -> f64 widening is exact.
  template <typename T>
  std::vector<T> values(const std::string& name) const {
    const auto& rec = at(name);
    std::vector<T> out(rec.element_count());
    const std::byte* p = rec.payload.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (rec.dtype == DType::f32)
        out[i] = static_cast<T>(std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i)));
      else
        out[i] = static_cast<T>(std::bit_cast<double>(detail::get_le<std::uint64_t>(p + 8 * i)));
    }
    return out;
  }

  std::string header_text() const {
    nlohmann::json header;
    header["format_version"] = kFormatVersion;
    header["attributes"] = attributes_.is_null() ? nlohmann::json::object() : attributes_;
    header["tensors"] = nlohmann::json::object();
    std::size_t offset = 0;
    for (const auto& t : tensors_) {
      header["tensors"][t.name] = {{"dtype", to_string(t.dtype)},
                                   {"shape", t.shape},
                                   {"byte_offset", offset},
                                   {"byte_length", t.payload.size()}};
      offset += t.payload.size();
    }
    return header.dump(2) + "\n";
  }

  std::vector<std::byte> serialize() const {
    const std::string header = header_text();
    std::vector<std::byte> out;
    for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
    detail::put_le(out, static_cast<std::uint64_t>(header.size()));
    for (char c : header) out.push_back(static_cast<std::byte>(c));
    for (const auto& t : tensors_) out.insert(out.end(), t.payload.begin(), t.payload.end());
    return out;
  }

  /// Parses and fully validates a container image; never returns partial content.
  static TensorContainer parse(std::span<const std::byte> bytes) {
    if (bytes.size() < 16) throw CorruptionError("container truncated: shorter than the fixed preamble");
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw CorruptionError("bad magic; not a tensor container");
    const std::uint64_t header_len = detail::get_le<std::uint64_t>(bytes.data() + 8);
    if (header_len > bytes.size() - 16) throw CorruptionError("container truncated inside the header");
    const std::string text(reinterpret_cast<const char*>(bytes.data() + 16), header_len);

    nlohmann::json header;
    try {
      header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw CorruptionError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object() || !header.contains("format_version") || !header["format_version"].is_number_integer())
      throw CorruptionError("header lacks an integer format_version");
    if (header["format_version"].get<std::int64_t>() != kFormatVersion)
      throw SchemaError("unsupported container format_version " + header["format_version"].dump());
    if (!header.contains("tensors") || !header["tensors"].is_object())
      throw CorruptionError("header lacks a tensors table");

    struct Slot {
      std::string name;
      DType dtype;
      std::vector<std::size_t> shape;
      std::uint64_t offset, length;
    };
    std::vector<Slot> slots;
    try {
      for (const auto& [name, entry] : header["tensors"].items()) {
        Slot s{name, parse_dtype(entry.at("dtype").get<std::string>()),
               entry.at("shape").get<std::vector<std::size_t>>(), entry.at("byte_offset").get<std::uint64_t>(),
               entry.at("byte_length").get<std::uint64_t>()};
        std::uint64_t count = 1;
        for (auto d : s.shape) count *= d;
        if (count * dtype_size(s.dtype) != s.length)
          throw CorruptionError("tensor '" + name + "': byte_length disagrees with shape and dtype");
        slots.push_back(std::move(s));
      }
    } catch (const nlohmann::json::exception& e) {
      throw CorruptionError(std::string("malformed tensor entry: ") + e.what());
    }
    std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) { return a.offset < b.offset; });

    const std::size_t blob_start = 16 + header_len;
    const std::uint64_t blob_len = bytes.size() - blob_start;
    std::uint64_t expected = 0;
    for (const auto& s : slots) {
      if (s.offset != expected) throw CorruptionError("tensor '" + s.name + "': payloads overlap or leave gaps");
      expected += s.length;
    }
    if (expected > blob_len) throw CorruptionError("container truncated: blob shorter than the header declares");
    if (expected < blob_len) throw CorruptionError("container has trailing bytes after the last tensor");

    TensorContainer c;
    c.attributes_ = header.value("attributes", nlohmann::json::object());
    for (auto& s : slots) {
      auto first = bytes.begin() + static_cast<std::ptrdiff_t>(blob_start + s.offset);
      c.tensors_.push_back({std::move(s.name), s.dtype, std::move(s.shape),
                            std::vector<std::byte>(first, first + static_cast<std::ptrdiff_t>(s.length))});
    }
    return c;
  }

  /// Writes via a sibling temporary file and rename. Callers must not save to
  /// the same path concurrently.
  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
  }

  static TensorContainer load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
      return parse(std::as_bytes(std::span(raw)));
    } catch (const IoError& e) {
      if (dynamic_cast<const SchemaError*>(&e)) throw SchemaError(path.string() + ": " + e.what());
      throw CorruptionError(path.string() + ": " + e.what());
    }
  }

 private:
  nlohmann::json attributes_ = nlohmann::json::object();
  std::vector<TensorRecord> tensors_;
};

}  // namespace cgmf::io
