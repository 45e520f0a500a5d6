#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "crystalmt/common.hpp"
#include "crystalmt/tensor.hpp"

namespace crystalmt {

using json = nlohmann::json;

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path);
  return os.str();
}

inline void write_text_file(const std::string& path,
                            std::string_view content) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open file for writing: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline json parse_json_text(std::string_view text, const std::string& where) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ParseError(where + ": invalid JSON");
  return j;
}

inline json read_json_file(const std::string& path) {
  return parse_json_text(read_text_file(path), path);
}

inline void write_json_file(const std::string& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

inline const json& require_field(const json& j, const char* key,
                                 const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) {
    throw ParseError(where + ": missing field '" + key + "'");
  }
  return *it;
}

// Shortest decimal form that parses back to the exact same double. Used for
// every double written to CSV so reruns are byte-identical.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) {
    throw ParseError(where + ": not a number: '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.emplace_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline json tensor_to_json(const Tensor& t) {
  json j;
  j["shape"] = t.shape;
  j["data"] = t.data;
  return j;
}

inline Tensor tensor_from_json(const json& j, const std::string& where) {
  Tensor t;
  try {
    t.shape = require_field(j, "shape", where).get<std::vector<std::size_t>>();
    t.data = require_field(j, "data", where).get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ParseError(where + ": bad tensor: " + e.what());
  }
  std::size_t n = 1;
  for (std::size_t d : t.shape) n *= d;
  if (t.shape.empty()) n = 1;
  if (n != t.data.size()) {
    throw ParseError(where + ": tensor shape " + shape_str(t.shape) +
                     " does not match " + std::to_string(t.data.size()) +
                     " values");
  }
  return t;
}

}  // namespace crystalmt
