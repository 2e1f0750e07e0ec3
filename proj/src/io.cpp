#include "zeg/io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace zeg {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(tmp + ": cannot open for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw FormatError(tmp + ": write failed");
  }
  std::filesystem::rename(tmp, target);
}

std::string encode_weights(const WeightFile& file) {
  BinaryWriter w;
  w.bytes("ZEGW");
  w.u32(kWeightsVersion);
  for (const auto& r : file.records) {
    if (r.name.empty()) throw FormatError("weight record with empty name");
    if (static_cast<Index>(r.values.size()) != numel(r.shape)) {
      throw ShapeError("weight record '" + r.name + "' has " + std::to_string(r.values.size()) + " values for shape " +
                       shape_string(r.shape));
    }
    w.string(r.name);
    w.u32(static_cast<std::uint32_t>(r.shape.size()));
    for (Index e : r.shape) w.u32(static_cast<std::uint32_t>(e));
    for (float v : r.values) w.f32(v);
  }
  w.u32(0);
  w.string(file.config_echo);
  return w.buffer();
}

WeightFile decode_weights(std::string bytes, const std::string& source) {
  BinaryReader r(std::move(bytes), source);
  r.expect_magic("ZEGW");
  r.expect_version(kWeightsVersion);
  WeightFile file;
  for (;;) {
    if (r.at_end()) return file;
    std::string name = r.string();
    if (name.empty()) break;
    WeightRecord rec{std::move(name), {}, {}};
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError(source + ": record '" + rec.name + "' has implausible rank " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) rec.shape.push_back(r.u32());
    rec.values.resize(static_cast<std::size_t>(numel(rec.shape)));
    for (auto& v : rec.values) v = r.f32();
    file.records.push_back(std::move(rec));
  }
  file.config_echo = r.string();
  if (!r.at_end()) throw FormatError(source + ": trailing bytes after config block");
  return file;
}

void save_weights(const WeightFile& file, const std::string& path) { write_file_atomic(path, encode_weights(file)); }

WeightFile load_weights(const std::string& path) { return decode_weights(read_file(path), path); }

}  // namespace zeg
