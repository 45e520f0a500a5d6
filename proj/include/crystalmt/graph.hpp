#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "crystalmt/common.hpp"
#include "crystalmt/structure.hpp"
#include "crystalmt/tensor.hpp"

namespace crystalmt::xtal {

struct GraphConfig {
  int max_neighbors = 12;
  double cutoff = 8.0;       // Angstrom
  double gauss_step = 0.2;   // spacing of Gaussian centers
  double gauss_width = 0.0;  // <= 0 means "same as gauss_step"
  int z_max = 100;

  double effective_width() const {
    return gauss_width > 0.0 ? gauss_width : gauss_step;
  }

  void validate() const {
    if (max_neighbors < 1) throw ValueError("graph config: max_neighbors < 1");
    if (!(cutoff > 0.0)) throw ValueError("graph config: cutoff must be > 0");
    if (!(gauss_step > 0.0)) {
      throw ValueError("graph config: gauss_step must be > 0");
    }
    if (z_max < 1) throw ValueError("graph config: z_max < 1");
  }
};

struct NeighborEntry {
  std::size_t index;           // neighbor atom index in the cell
  std::array<int, 3> offset;   // lattice image offset of the neighbor
  double distance;             // Angstrom
};

// Up to max_neighbors nearest periodic images per atom, distance <= cutoff,
// sorted by (distance, neighbor index, offset lexicographic). The image
// search range per lattice direction is ceil(cutoff / plane spacing), which
// is exhaustive for wrapped coordinates whatever the cell shape.
inline std::vector<std::vector<NeighborEntry>> periodic_neighbors(
    const CrystalStructure& s, const GraphConfig& cfg) {
  cfg.validate();
  const Mat3 inv = lattice_inverse(s.lattice);

  std::array<int, 3> range{};
  for (int k = 0; k < 3; ++k) {
    // 1/spacing_k = norm of column k of the inverse lattice
    const double inv_spacing = std::sqrt(inv[0][k] * inv[0][k] +
                                         inv[1][k] * inv[1][k] +
                                         inv[2][k] * inv[2][k]);
    range[k] = static_cast<int>(std::ceil(cfg.cutoff * inv_spacing));
  }

  const std::size_t n = s.n_atoms();
  std::vector<std::vector<NeighborEntry>> result(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<NeighborEntry> found;
    for (std::size_t j = 0; j < n; ++j) {
      for (int a = -range[0]; a <= range[0]; ++a) {
        for (int b = -range[1]; b <= range[1]; ++b) {
          for (int c = -range[2]; c <= range[2]; ++c) {
            if (i == j && a == 0 && b == 0 && c == 0) continue;
            const double df0 = s.frac_coords[j][0] + a - s.frac_coords[i][0];
            const double df1 = s.frac_coords[j][1] + b - s.frac_coords[i][1];
            const double df2 = s.frac_coords[j][2] + c - s.frac_coords[i][2];
            double d2 = 0.0;
            for (int cc = 0; cc < 3; ++cc) {
              const double cart = df0 * s.lattice[0][cc] +
                                  df1 * s.lattice[1][cc] +
                                  df2 * s.lattice[2][cc];
              d2 += cart * cart;
            }
            const double d = std::sqrt(d2);
            if (d <= cfg.cutoff) {
              found.push_back({j, {a, b, c}, d});
            }
          }
        }
      }
    }
    std::sort(found.begin(), found.end(),
              [](const NeighborEntry& x, const NeighborEntry& y) {
                return std::tie(x.distance, x.index, x.offset) <
                       std::tie(y.distance, y.index, y.offset);
              });
    if (found.size() > static_cast<std::size_t>(cfg.max_neighbors)) {
      found.resize(static_cast<std::size_t>(cfg.max_neighbors));
    }
    result[i] = std::move(found);
  }
  return result;
}

inline std::size_t bond_feature_len(const GraphConfig& cfg) {
  return static_cast<std::size_t>(
             std::floor(cfg.cutoff / cfg.gauss_step + 1e-9)) +
         1;
}

// Gaussian basis expansion of a bond length: component t is
// exp(-(d - t*step)^2 / width^2) for t = 0 .. floor(cutoff/step).
inline std::vector<double> gaussian_expand(double d, const GraphConfig& cfg) {
  cfg.validate();
  if (d < 0.0 || d > cfg.cutoff) {
    throw ValueError("gaussian_expand: distance " + std::to_string(d) +
                     " outside [0, " + std::to_string(cfg.cutoff) + "]");
  }
  const std::size_t len = bond_feature_len(cfg);
  const double w2 = cfg.effective_width() * cfg.effective_width();
  std::vector<double> out(len);
  for (std::size_t t = 0; t < len; ++t) {
    const double delta = d - static_cast<double>(t) * cfg.gauss_step;
    out[t] = std::exp(-delta * delta / w2);
  }
  return out;
}

using ElementTable = std::map<int, std::vector<double>>;

// One-hot over atomic number by default; an external table (e.g. the CGCNN
// property encoding) overrides when supplied and must cover every Z used.
inline std::vector<double> atom_init_features(
    int z, const GraphConfig& cfg, const ElementTable* table = nullptr) {
  if (z < 1 || z > cfg.z_max) {
    throw ValueError("atom_init_features: atomic number " + std::to_string(z) +
                     " out of range [1, " + std::to_string(cfg.z_max) + "]");
  }
  if (table) {
    auto it = table->find(z);
    if (it == table->end()) {
      throw ValueError("atom_init_features: element table has no entry for Z=" +
                       std::to_string(z));
    }
    return it->second;
  }
  std::vector<double> out(static_cast<std::size_t>(cfg.z_max), 0.0);
  out[static_cast<std::size_t>(z - 1)] = 1.0;
  return out;
}

struct Edge {
  std::size_t i;  // receiving atom
  std::size_t j;  // neighbor atom
  int k;          // multiplicity index among (i, j) bonds
};

// Undirected multigraph of a crystal: per-atom feature rows plus one edge
// per (atom, periodic neighbor) pair. Parallel (i, j) bonds are
// distinguished by k. Immutable after construction.
struct CrystalGraph {
  std::string id;
  std::size_t n_atoms = 0;
  Tensor atom_features;  // n_atoms x d_a
  std::vector<Edge> edges;
  Tensor bond_features;  // edges.size() x d_b, values in (0, 1]

  std::size_t atom_feature_len() const { return atom_features.cols(); }
  std::size_t bond_feature_len() const { return bond_features.cols(); }

  std::vector<std::size_t> degrees() const {
    std::vector<std::size_t> deg(n_atoms, 0);
    for (const Edge& e : edges) deg[e.i]++;
    return deg;
  }
};

inline CrystalGraph build_graph(const CrystalStructure& s,
                                const GraphConfig& cfg,
                                const ElementTable* table = nullptr) {
  cfg.validate();
  CrystalGraph g;
  g.id = s.id;
  g.n_atoms = s.n_atoms();

  std::size_t d_a = 0;
  for (std::size_t i = 0; i < g.n_atoms; ++i) {
    const auto feat = atom_init_features(s.atomic_numbers[i], cfg, table);
    if (i == 0) {
      d_a = feat.size();
      g.atom_features = Tensor({g.n_atoms, d_a});
    } else if (feat.size() != d_a) {
      throw ValueError("build_graph: inconsistent atom feature lengths " +
                       std::to_string(d_a) + " vs " +
                       std::to_string(feat.size()));
    }
    for (std::size_t c = 0; c < d_a; ++c) g.atom_features.at(i, c) = feat[c];
  }

  const auto neighbors = periodic_neighbors(s, cfg);
  std::size_t n_edges = 0;
  for (const auto& list : neighbors) n_edges += list.size();

  const std::size_t d_b = bond_feature_len(cfg);
  g.bond_features = Tensor({n_edges, d_b});
  g.edges.reserve(n_edges);

  std::size_t row = 0;
  std::map<std::pair<std::size_t, std::size_t>, int> multiplicity;
  for (std::size_t i = 0; i < g.n_atoms; ++i) {
    for (const NeighborEntry& nb : neighbors[i]) {
      const int k = multiplicity[{i, nb.index}]++;
      g.edges.push_back({i, nb.index, k});
      const auto feat = gaussian_expand(nb.distance, cfg);
      for (std::size_t c = 0; c < d_b; ++c) g.bond_features.at(row, c) = feat[c];
      ++row;
    }
  }
  return g;
}

}  // namespace crystalmt::xtal
