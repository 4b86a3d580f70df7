#pragma once

// File formats: raw little-endian float64 fields and byte masks, each with a
// JSON sidecar carrying dims/spacing/origin; CSV tables with fixed columns;
// atomic writes (temp then rename).

#include <cinttypes>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "perfhom/core.hpp"

namespace perfhom {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline void atomic_write_file(const fs::path& path, const std::string& bytes) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json grid_sidecar(const Grid& g) {
  return json{{"dims", {g.nn[0], g.nn[1], g.nn[2]}},
              {"spacing", g.h},
              {"origin", {g.origin[0], g.origin[1], g.origin[2]}},
              {"scalar", "float64-le"}};
}

inline void write_field(const fs::path& path, const ScalarField& f) {
  static_assert(sizeof(double) == 8);
  std::string bytes(reinterpret_cast<const char*>(f.v.data()),
                    f.v.size() * sizeof(double));
  atomic_write_file(path, bytes);
  atomic_write_file(fs::path(path).concat(".json"), grid_sidecar(f.grid).dump(2) + "\n");
}

inline ScalarField read_field(const fs::path& path) {
  const json side = json::parse(read_file(fs::path(path).concat(".json")));
  Grid g;
  g.nn = {side["dims"][0], side["dims"][1], side["dims"][2]};
  g.h = side["spacing"];
  g.origin = {side["origin"][0], side["origin"][1], side["origin"][2]};
  ScalarField f(g);
  const std::string bytes = read_file(path);
  if (bytes.size() != f.v.size() * sizeof(double))
    throw Error("field payload size mismatch: " + path.string());
  std::memcpy(f.v.data(), bytes.data(), bytes.size());
  return f;
}

inline void write_mask(const fs::path& path, const DomainMask& m) {
  std::string bytes(m.cls.size(), '\0');
  for (std::size_t i = 0; i < m.cls.size(); ++i)
    bytes[i] = static_cast<char>(m.cls[i]);
  atomic_write_file(path, bytes);
  json side = grid_sidecar(m.grid);
  side["scalar"] = "uint8";
  side["classes"] = {"interior", "hole", "outside-omega"};
  atomic_write_file(fs::path(path).concat(".json"), side.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// CSV writer with fixed formatting so identical runs emit identical bytes.

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> columns)
      : columns_(std::move(columns)) {
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      if (i) body_ += ',';
      body_ += columns_[i];
    }
    body_ += '\n';
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_.size())
      throw Error("csv: row width mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) body_ += ',';
      body_ += cells[i];
    }
    body_ += '\n';
  }

  static std::string num(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
  }
  static std::string num(int x) { return std::to_string(x); }
  static std::string num(long long x) { return std::to_string(x); }

  void save(const fs::path& path) const { atomic_write_file(path, body_); }
  const std::string& text() const { return body_; }

 private:
  std::vector<std::string> columns_;
  std::string body_;
};

inline std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

}  // namespace perfhom
