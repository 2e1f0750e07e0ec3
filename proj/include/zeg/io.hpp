#pragma once

// Little-endian binary helpers and the "ZEGW" weight checkpoint format:
//
//   "ZEGW" | u32 version | record* | [u32 0 | u32 len | config text]
//   record = u32 name_len | name | u32 rank | u32 extent[rank] | f32 payload
//
// A zero name length ends the records and introduces the optional config echo.

#include "zeg/data.hpp"
#include "zeg/graph.hpp"

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

namespace zeg {

class BinaryWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u32(bits);
  }
  void bytes(std::string_view s) { buf_.append(s); }
  void string(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  BinaryReader(std::string data, std::string source) : buf_(std::move(data)), source_(std::move(source)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string string() { return bytes(u32()); }
  bool at_end() const { return pos_ == buf_.size(); }
  const std::string& source() const { return source_; }

  void expect_magic(std::string_view magic) {
    if (buf_.size() < magic.size() || std::string_view(buf_).substr(0, magic.size()) != magic) {
      throw FormatError(source_ + ": bad magic (expected \"" + std::string(magic) + "\")");
    }
    pos_ = magic.size();
  }

  void expect_version(std::uint32_t supported) {
    const std::uint32_t v = u32();
    if (v != supported) {
      throw FormatError(source_ + ": unsupported format version " + std::to_string(v) + " (this build reads version " +
                        std::to_string(supported) + ")");
    }
  }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError(source_ + ": truncated payload at byte " + std::to_string(pos_));
  }

  std::string buf_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);

/// Writes to a temporary sibling, then renames over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);

inline constexpr std::uint32_t kWeightsVersion = 1;

struct WeightRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const WeightRecord&) const = default;
};

struct WeightFile {
  std::vector<WeightRecord> records;
  std::string config_echo;

  const WeightRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
  bool operator==(const WeightFile&) const = default;
};

std::string encode_weights(const WeightFile& file);
WeightFile decode_weights(std::string bytes, const std::string& source);
void save_weights(const WeightFile& file, const std::string& path);
WeightFile load_weights(const std::string& path);

template <typename S>
WeightFile to_weight_file(const std::vector<Parameter<S>*>& params, std::string config_echo = {}) {
  WeightFile file;
  file.config_echo = std::move(config_echo);
  for (const auto* p : params) {
    WeightRecord r{p->name, p->value.shape, {}};
    r.values.reserve(static_cast<std::size_t>(p->value.size()));
    for (Index i = 0; i < p->value.size(); ++i) r.values.push_back(static_cast<float>(p->value[i]));
    file.records.push_back(std::move(r));
  }
  return file;
}

/// Copies matching records into `params`. Every parameter must be present
/// with an identical shape unless `allow_missing` is set.
template <typename S>
void assign_weights(const WeightFile& file, const std::vector<Parameter<S>*>& params, bool allow_missing = false) {
  for (auto* p : params) {
    const WeightRecord* r = file.find(p->name);
    if (r == nullptr) {
      if (allow_missing) continue;
      throw FormatError("checkpoint has no parameter '" + p->name + "'");
    }
    if (r->shape != p->value.shape) {
      throw FormatError("checkpoint parameter '" + p->name + "' has shape " + shape_string(r->shape) + ", model expects " +
                        shape_string(p->value.shape));
    }
    for (Index i = 0; i < p->value.size(); ++i) p->value[i] = static_cast<S>(r->values[static_cast<std::size_t>(i)]);
  }
}

}  // namespace zeg
