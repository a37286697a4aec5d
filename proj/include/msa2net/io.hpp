#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "msa2net/common.hpp"
#include "msa2net/ops.hpp"
#include "msa2net/tensor.hpp"

namespace msa2net {

namespace io {

// ---------------------------------------------------------------------------
// MSAT binary tensor format:
//   magic 4D 53 41 54 ("MSAT"), version 01, dtype 01 (float32), ndim 04,
//   four little-endian u32 extents [N,C,H,W], then N*C*H*W little-endian
//   float32 values, row-major.
// ---------------------------------------------------------------------------

inline void put_u32_le(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string encode_msat(const Tensor<float>& t) {
  std::string buf;
  buf.reserve(11 + 16 + t.size() * 4);
  buf += "MSAT";
  buf.push_back('\x01');  // version
  buf.push_back('\x01');  // dtype float32
  buf.push_back('\x04');  // ndim
  const Shape s = t.shape();
  put_u32_le(buf, static_cast<std::uint32_t>(s.n));
  put_u32_le(buf, static_cast<std::uint32_t>(s.c));
  put_u32_le(buf, static_cast<std::uint32_t>(s.h));
  put_u32_le(buf, static_cast<std::uint32_t>(s.w));
  for (const float v : t.vec()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32_le(buf, bits);
  }
  return buf;
}

inline Tensor<float> decode_msat(const std::string& buf,
                                 const std::string& origin) {
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  auto fail = [&](std::size_t offset, const std::string& what) {
    throw FormatError(origin + ": " + what + " at byte offset " +
                      std::to_string(offset));
  };
  if (buf.size() < 23) fail(buf.size(), "truncated MSAT header");
  if (std::memcmp(buf.data(), "MSAT", 4) != 0) fail(0, "bad magic");
  if (p[4] != 0x01) fail(4, "unsupported version");
  if (p[5] != 0x01) fail(5, "unsupported dtype");
  if (p[6] != 0x04) fail(6, "unsupported ndim");
  Shape s;
  s.n = static_cast<int>(get_u32_le(p + 7));
  s.c = static_cast<int>(get_u32_le(p + 11));
  s.h = static_cast<int>(get_u32_le(p + 15));
  s.w = static_cast<int>(get_u32_le(p + 19));
  const std::size_t want = 23 + s.numel() * 4;
  if (buf.size() != want) fail(buf.size(), "payload size mismatch");
  std::vector<float> vals(s.numel());
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const std::uint32_t bits = get_u32_le(p + 23 + i * 4);
    std::memcpy(&vals[i], &bits, 4);
  }
  return Tensor<float>(s, std::move(vals));
}

inline void write_file(const std::filesystem::path& path,
                       const std::string& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw DataError("write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_msat(const std::filesystem::path& path,
                      const Tensor<float>& t) {
  write_file(path, encode_msat(t));
}

inline Tensor<float> load_msat(const std::filesystem::path& path) {
  return decode_msat(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit).
// ---------------------------------------------------------------------------

struct PgmImage {
  int w = 0, h = 0;
  std::vector<std::uint8_t> bytes;
};

inline std::string encode_pgm(const PgmImage& img) {
  std::string buf = "P5\n" + std::to_string(img.w) + " " +
                    std::to_string(img.h) + "\n255\n";
  buf.append(reinterpret_cast<const char*>(img.bytes.data()),
             img.bytes.size());
  return buf;
}

inline PgmImage decode_pgm(const std::string& buf, const std::string& origin) {
  auto fail = [&](std::size_t offset, const std::string& what) {
    throw FormatError(origin + ": " + what + " at byte offset " +
                      std::to_string(offset));
  };
  std::size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < buf.size()) {
      if (buf[pos] == ' ' || buf[pos] == '\n' || buf[pos] == '\t' ||
          buf[pos] == '\r') {
        ++pos;
      } else if (buf[pos] == '#') {  // comment line
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < buf.size() && buf[pos] != ' ' && buf[pos] != '\n' &&
           buf[pos] != '\t' && buf[pos] != '\r')
      ++pos;
    return buf.substr(start, pos - start);
  };
  if (token() != "P5") fail(0, "not a P5 PGM");
  PgmImage img;
  try {
    img.w = std::stoi(token());
    img.h = std::stoi(token());
    const int maxval = std::stoi(token());
    if (maxval != 255) fail(pos, "unsupported maxval");
  } catch (const std::exception&) {
    fail(pos, "bad PGM header");
  }
  if (img.w < 1 || img.h < 1) fail(pos, "bad PGM dimensions");
  ++pos;  // single whitespace after maxval
  const std::size_t want = static_cast<std::size_t>(img.w) * img.h;
  if (buf.size() - pos != want) fail(pos, "payload size mismatch");
  img.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.end());
  return img;
}

inline void save_pgm(const std::filesystem::path& path, const PgmImage& img) {
  write_file(path, encode_pgm(img));
}

inline PgmImage load_pgm(const std::filesystem::path& path) {
  return decode_pgm(read_file(path), path.string());
}

// single-channel [1,1,H,W] in [0,1] <-> 8-bit PGM
template <typename T>
PgmImage tensor_to_pgm(const Tensor<T>& t) {
  PgmImage img;
  img.w = t.w();
  img.h = t.h();
  img.bytes.resize(static_cast<std::size_t>(img.w) * img.h);
  for (std::size_t i = 0; i < img.bytes.size(); ++i) {
    const double v = std::clamp(static_cast<double>(t.data()[i]), 0.0, 1.0);
    img.bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

template <typename T = float>
Tensor<T> pgm_to_tensor(const PgmImage& img) {
  Tensor<T> t({1, 1, img.h, img.w});
  for (std::size_t i = 0; i < img.bytes.size(); ++i)
    t.data()[i] = static_cast<T>(img.bytes[i] / 255.0);
  return t;
}

inline PgmImage labels_to_pgm(const LabelMap& m, int index_in_batch = 0) {
  PgmImage img;
  img.w = m.w;
  img.h = m.h;
  img.bytes.resize(static_cast<std::size_t>(m.w) * m.h);
  const std::size_t base = static_cast<std::size_t>(index_in_batch) * m.h * m.w;
  for (std::size_t i = 0; i < img.bytes.size(); ++i) {
    const std::int32_t v = m.v[base + i];
    if (v < 0 || v > 255) throw DataError("label does not fit in a PGM byte");
    img.bytes[i] = static_cast<std::uint8_t>(v);
  }
  return img;
}

inline LabelMap pgm_to_labels(const PgmImage& img) {
  LabelMap m(1, img.h, img.w);
  for (std::size_t i = 0; i < img.bytes.size(); ++i)
    m.v[i] = static_cast<std::int32_t>(img.bytes[i]);
  return m;
}

// ---------------------------------------------------------------------------
// CSV. Fields are plain tokens (no quoting); every file the tools emit is
// readable back by read_csv.
// ---------------------------------------------------------------------------

using CsvTable = std::vector<std::vector<std::string>>;

inline std::string encode_csv(const CsvTable& rows) {
  std::string out;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += row[i];
    }
    out += '\n';
  }
  return out;
}

inline CsvTable decode_csv(const std::string& text) {
  CsvTable rows;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') continue;  // comment/prologue lines
    std::vector<std::string> row;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      if (comma == std::string::npos) {
        row.push_back(line.substr(start));
        break;
      }
      row.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void save_csv(const std::filesystem::path& path, const CsvTable& rows,
                     const std::string& prologue = "") {
  write_file(path, prologue + encode_csv(rows));
}

inline CsvTable load_csv(const std::filesystem::path& path) {
  return decode_csv(read_file(path));
}

inline void save_json(const std::filesystem::path& path,
                      const nlohmann::json& j) {
  write_file(path, j.dump(2) + "\n");
}

inline nlohmann::json load_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Named-tensor directory: one MSAT file per tensor plus a JSON manifest.
// Shared by model checkpoints and standalone gate parameter dumps.
// ---------------------------------------------------------------------------

inline std::string tensor_file_name(std::size_t idx, const std::string& name) {
  std::string sanitized = name;
  for (char& ch : sanitized)
    if (ch == '.' || ch == '/') ch = '_';
  char prefix[16];
  std::snprintf(prefix, sizeof(prefix), "t%04zu__", idx);
  return std::string(prefix) + sanitized + ".msat";
}

inline void save_named_tensors(
    const std::filesystem::path& dir,
    const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors,
    nlohmann::json manifest_extra) {
  std::filesystem::create_directories(dir);
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, t] = tensors[i];
    const std::string file = tensor_file_name(i, name);
    save_msat(dir / file, *t);
    const Shape s = t->shape();
    list.push_back({{"name", name},
                    {"file", file},
                    {"shape", {s.n, s.c, s.h, s.w}}});
  }
  manifest_extra["format"] = "msa2net-tensors";
  manifest_extra["format_version"] = 1;
  manifest_extra["tensors"] = std::move(list);
  save_json(dir / "manifest.json", manifest_extra);
}

// Loads tensors into the given name->tensor targets; every target must be
// present with a matching shape, unknown names in the manifest are an error.
inline nlohmann::json load_named_tensors(
    const std::filesystem::path& dir,
    const std::vector<std::pair<std::string, Tensor<float>*>>& targets) {
  const nlohmann::json manifest = load_json(dir / "manifest.json");
  if (!manifest.contains("tensors"))
    throw FormatError(dir.string() + "/manifest.json: missing tensors list");
  std::size_t matched = 0;
  for (const auto& entry : manifest["tensors"]) {
    const std::string name = entry.at("name");
    Tensor<float>* target = nullptr;
    for (const auto& [tn, tp] : targets)
      if (tn == name) {
        target = tp;
        break;
      }
    if (!target)
      throw FormatError(dir.string() + ": manifest names unknown tensor '" +
                        name + "'");
    Tensor<float> loaded = load_msat(dir / entry.at("file").get<std::string>());
    if (loaded.shape() != target->shape())
      throw FormatError(dir.string() + ": tensor '" + name + "' has shape " +
                        loaded.shape().str() + ", expected " +
                        target->shape().str());
    *target = std::move(loaded);
    ++matched;
  }
  if (matched != targets.size())
    throw FormatError(dir.string() + ": checkpoint provides " +
                      std::to_string(matched) + " of " +
                      std::to_string(targets.size()) + " expected tensors");
  return manifest;
}

}  // namespace io

}  // namespace msa2net
