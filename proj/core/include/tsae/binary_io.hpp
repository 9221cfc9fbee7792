#pragma once

// Little-endian primitives and the tagged-array container shared by the
// corpus, LM and SAE file formats.
//
// Layout after the 4-byte magic:
//   u32 version
//   u32 header_len, header bytes   ("key=value\n" lines)
//   u32 array_count
//   per array: u32 name_len, name, u64 rows, u64 cols, rows*cols f32

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tsae/numerics.hpp"

namespace tsae::io {

class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void bytes(std::string_view s);
  const std::string& buffer() const noexcept { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string data, std::string context);
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::string bytes(std::size_t n);
  bool at_end() const noexcept { return pos_ == data_.size(); }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n);
  std::string data_;
  std::string context_;
  std::size_t pos_ = 0;
};

using Header = std::map<std::string, std::string>;

struct NamedArray {
  std::string name;
  Matrix value;
};

struct TaggedFile {
  std::uint32_t version = 0;
  Header header;
  std::vector<NamedArray> arrays;

  /// Array by name; FormatError if missing.
  const Matrix& array(std::string_view name) const;
  bool has_array(std::string_view name) const;
  /// Header value by key; FormatError if missing.
  const std::string& field(const std::string& key) const;
};

std::string encode_tagged(std::string_view magic, const TaggedFile& file);
/// Parses and validates magic and version.
TaggedFile decode_tagged(std::string data, std::string_view magic, std::uint32_t version,
                         const std::string& context);

std::string read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames into place.
void write_file(const std::filesystem::path& path, std::string_view data);

/// Shortest round-trip decimal form.
std::string format_real(double v);
double parse_real(const std::string& s, const std::string& context);
std::uint64_t parse_count(const std::string& s, const std::string& context);

}  // namespace tsae::io
