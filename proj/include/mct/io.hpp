#pragma once

// MCT1 raw tensor files and flat key=value manifests.
//
// MCT1 layout: "MCT1" | u8 rank | rank x u32 LE dims | f32 LE row-major payload.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <type_traits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mct/error.hpp"
#include "mct/tensor.hpp"

namespace mct::io {

namespace fs = std::filesystem;

inline constexpr std::array<char, 4> kMagic{'M', 'C', 'T', '1'};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

}  // namespace detail

/// Serializes to MCT1 bytes. Values are narrowed to f32.
template <std::floating_point T>
std::string encode(const Tensor<T>& t) {
  if (t.rank() == 0 || t.rank() > 255) {
    throw FormatError("MCT1: unsupported rank " + std::to_string(t.rank()));
  }
  std::string out(kMagic.begin(), kMagic.end());
  out.push_back(static_cast<char>(t.rank()));
  for (auto d : t.shape()) {
    if (d > 0xFFFFFFFFull) throw FormatError("MCT1: dimension exceeds u32");
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + 4 * t.size());
  for (auto v : t.data()) {
    detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline Tensor<float> decode(const std::string& bytes, const std::string& origin = "buffer") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 5 || std::memcmp(p, kMagic.data(), 4) != 0) {
    throw FormatError(origin + ": bad MCT1 magic");
  }
  const std::size_t rank = p[4];
  if (rank == 0) throw FormatError(origin + ": MCT1 rank must be positive");
  if (n < 5 + 4 * rank) throw FormatError(origin + ": truncated MCT1 header");
  Shape shape(rank);
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = detail::get_u32(p + 5 + 4 * i);
    if (shape[i] == 0) throw FormatError(origin + ": zero dimension in MCT1 header");
    if (shape[i] > (n / 4) / count) throw FormatError(origin + ": MCT1 dims exceed file size");
    count *= shape[i];
  }
  const std::size_t header = 5 + 4 * rank;
  if (n - header != 4 * count) {
    throw FormatError(origin + ": MCT1 payload holds " + std::to_string(n - header) +
                      " bytes, header " + shape_str(shape) + " needs " +
                      std::to_string(4 * count));
  }
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(detail::get_u32(p + header + 4 * i));
  }
  return Tensor<float>(std::move(shape), std::move(data));
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

template <std::floating_point T>
void save_tensor(const fs::path& path, const Tensor<T>& t) {
  write_file(path, encode(t));
}

inline Tensor<float> load_tensor(const fs::path& path) {
  return decode(read_file(path), path.string());
}

/// Ordered key=value record. Insertion order is preserved on write.
class Manifest {
 public:
  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = value;
        return;
      }
    }
    entries_.emplace_back(key, value);
  }

  template <class V>
    requires(std::is_arithmetic_v<V>)
  void set(const std::string& key, V value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    set(key, os.str());
  }

  bool has(const std::string& key) const { return find(key) != nullptr; }

  const std::string& get(const std::string& key) const {
    const auto* v = find(key);
    if (!v) throw FormatError("manifest is missing key '" + key + "'");
    return *v;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    const auto* v = find(key);
    return v ? *v : fallback;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
    return out;
  }

  /// Blank lines and lines starting with '#' are ignored.
  static Manifest parse(const std::string& text, const std::string& origin = "manifest") {
    Manifest m;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key=value");
      }
      m.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return m;
  }

  static Manifest load(const fs::path& path) { return parse(read_file(path), path.string()); }
  void save(const fs::path& path) const { write_file(path, str()); }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  }

  const std::string* find(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return &v;
    return nullptr;
  }

  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace mct::io
