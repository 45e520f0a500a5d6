#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "crystalmt/common.hpp"
#include "crystalmt/json_util.hpp"

namespace crystalmt::xtal {

using Mat3 = std::array<std::array<double, 3>, 3>;
using Vec3 = std::array<double, 3>;

// Periodic crystal: lattice rows are the Cartesian cell vectors in Angstrom,
// fractional coordinates are kept wrapped to [0, 1).
struct CrystalStructure {
  Mat3 lattice{};
  std::vector<Vec3> frac_coords;
  std::vector<int> atomic_numbers;
  std::string id;

  std::size_t n_atoms() const { return atomic_numbers.size(); }
};

inline double lattice_det(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

inline Mat3 lattice_inverse(const Mat3& m) {
  const double det = lattice_det(m);
  if (std::abs(det) <= 1e-6) {
    throw ValueError("lattice: cell volume |det| <= 1e-6, cannot invert");
  }
  const double inv = 1.0 / det;
  Mat3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv;
  return r;
}

inline double wrap_frac(double f) {
  double w = f - std::floor(f);
  if (w >= 1.0) w = 0.0;  // e.g. f = -1e-17 rounds up
  return w;
}

// Structure document schema:
//   {"id": str, "lattice": [[f;3];3], "frac_coords": [[f;3];N],
//    "atomic_numbers": [int;N]}
inline CrystalStructure parse_structure(const json& doc, int z_max = 100) {
  const std::string where =
      "structure" + (doc.contains("id") && doc["id"].is_string()
                         ? " '" + doc["id"].get<std::string>() + "'"
                         : std::string());
  if (!doc.is_object()) throw ParseError(where + ": document is not an object");

  CrystalStructure s;
  const json& jid = require_field(doc, "id", where);
  if (!jid.is_string()) throw ParseError(where + ": 'id' must be a string");
  s.id = jid.get<std::string>();

  const json& jl = require_field(doc, "lattice", where);
  if (!jl.is_array() || jl.size() != 3) {
    throw ParseError(where + ": 'lattice' must be a 3x3 matrix");
  }
  for (std::size_t r = 0; r < 3; ++r) {
    if (!jl[r].is_array() || jl[r].size() != 3) {
      throw ParseError(where + ": 'lattice' must be a 3x3 matrix");
    }
    for (std::size_t c = 0; c < 3; ++c) {
      if (!jl[r][c].is_number()) {
        throw ParseError(where + ": 'lattice' entries must be numbers");
      }
      s.lattice[r][c] = jl[r][c].get<double>();
    }
  }
  if (std::abs(lattice_det(s.lattice)) <= 1e-6) {
    throw ParseError(where + ": zero-volume cell (|det(lattice)| <= 1e-6)");
  }

  const json& jf = require_field(doc, "frac_coords", where);
  const json& jz = require_field(doc, "atomic_numbers", where);
  if (!jf.is_array() || !jz.is_array()) {
    throw ParseError(where +
                     ": 'frac_coords' and 'atomic_numbers' must be arrays");
  }
  if (jf.size() != jz.size()) {
    throw ParseError(where + ": 'frac_coords' length " +
                     std::to_string(jf.size()) +
                     " != 'atomic_numbers' length " +
                     std::to_string(jz.size()));
  }
  if (jz.empty()) throw ParseError(where + ": structure has no atoms");

  for (std::size_t i = 0; i < jf.size(); ++i) {
    if (!jf[i].is_array() || jf[i].size() != 3) {
      throw ParseError(where + ": 'frac_coords' row " + std::to_string(i) +
                       " must have 3 components");
    }
    Vec3 f{};
    for (std::size_t c = 0; c < 3; ++c) {
      if (!jf[i][c].is_number()) {
        throw ParseError(where + ": 'frac_coords' entries must be numbers");
      }
      f[c] = wrap_frac(jf[i][c].get<double>());
    }
    s.frac_coords.push_back(f);

    if (!jz[i].is_number_integer()) {
      throw ParseError(where + ": 'atomic_numbers' entries must be integers");
    }
    const int z = jz[i].get<int>();
    if (z < 1 || z > z_max) {
      throw ParseError(where + ": atomic number " + std::to_string(z) +
                       " out of range [1, " + std::to_string(z_max) + "]");
    }
    s.atomic_numbers.push_back(z);
  }
  return s;
}

inline CrystalStructure parse_structure_text(std::string_view text,
                                             int z_max = 100) {
  return parse_structure(parse_json_text(text, "structure"), z_max);
}

inline json structure_to_json(const CrystalStructure& s) {
  json j;
  j["id"] = s.id;
  j["lattice"] = s.lattice;
  j["frac_coords"] = s.frac_coords;
  j["atomic_numbers"] = s.atomic_numbers;
  return j;
}

}  // namespace crystalmt::xtal
