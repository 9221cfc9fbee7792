#include "tsae/binary_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tsae::io {

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::bytes(std::string_view s) { buf_.append(s); }

ByteReader::ByteReader(std::string data, std::string context)
    : data_(std::move(data)), context_(std::move(context)) {}

void ByteReader::need(std::size_t n) {
  if (remaining() < n) {
    throw FormatError(context_ + ": truncated file (needed " + std::to_string(n) +
                      " bytes at offset " + std::to_string(pos_) + ")");
  }
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::string ByteReader::bytes(std::size_t n) {
  need(n);
  std::string s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

const Matrix& TaggedFile::array(std::string_view name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a.value;
  throw FormatError("missing array '" + std::string(name) + "'");
}

bool TaggedFile::has_array(std::string_view name) const {
  for (const auto& a : arrays)
    if (a.name == name) return true;
  return false;
}

const std::string& TaggedFile::field(const std::string& key) const {
  auto it = header.find(key);
  if (it == header.end()) throw FormatError("missing header field '" + key + "'");
  return it->second;
}

std::string encode_tagged(std::string_view magic, const TaggedFile& file) {
  ByteWriter w;
  w.bytes(magic);
  w.u32(file.version);
  std::string header;
  for (const auto& [k, v] : file.header) header += k + "=" + v + "\n";
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header);
  w.u32(static_cast<std::uint32_t>(file.arrays.size()));
  for (const auto& a : file.arrays) {
    w.u32(static_cast<std::uint32_t>(a.name.size()));
    w.bytes(a.name);
    w.u64(a.value.rows());
    w.u64(a.value.cols());
    for (float v : a.value.values()) w.f32(v);
  }
  return w.buffer();
}

TaggedFile decode_tagged(std::string data, std::string_view magic, std::uint32_t version,
                         const std::string& context) {
  ByteReader r(std::move(data), context);
  if (r.remaining() < magic.size()) throw FormatError(context + ": truncated file (no magic)");
  const std::string got = r.bytes(magic.size());
  if (got != magic) {
    throw FormatError(context + ": bad magic, expected '" + std::string(magic) + "'");
  }
  TaggedFile file;
  file.version = r.u32();
  if (file.version != version) {
    throw FormatError(context + ": unsupported version " + std::to_string(file.version) +
                      " (this build reads version " + std::to_string(version) + ")");
  }
  const std::string header = r.bytes(r.u32());
  std::istringstream hs(header);
  std::string line;
  while (std::getline(hs, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(context + ": malformed header line");
    file.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.bytes(r.u32());
    const std::uint64_t rows = r.u64(), cols = r.u64();
    if (cols != 0 && rows > r.remaining() / 4 / cols) {
      throw FormatError(context + ": truncated file (array '" + a.name + "')");
    }
    std::vector<float> values(rows * cols);
    for (auto& v : values) v = r.f32();
    a.value = Matrix(rows, cols, std::move(values));
    file.arrays.push_back(std::move(a));
  }
  if (!r.at_end()) throw FormatError(context + ": trailing bytes after last array");
  return file;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

double parse_real(const std::string& s, const std::string& context) {
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw ArgumentError(context + ": '" + s + "' is not a number");
  }
  return v;
}

std::uint64_t parse_count(const std::string& s, const std::string& context) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw ArgumentError(context + ": '" + s + "' is not a non-negative integer");
  }
  return v;
}

}  // namespace tsae::io
