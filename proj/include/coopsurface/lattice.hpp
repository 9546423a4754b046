#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "types.hpp"

namespace coopsurface {

enum class LatticeKind { Square, Triangular, Honeycomb };

inline const char* to_string(LatticeKind k) {
  switch (k) {
    case LatticeKind::Square: return "square";
    case LatticeKind::Triangular: return "triangular";
    case LatticeKind::Honeycomb: return "honeycomb";
  }
  return "unknown";
}

struct Lattice {
  LatticeKind kind = LatticeKind::Square;
  double spacing = 0.0;  // a for square/triangular, nearest-neighbour distance for honeycomb
  Vec2 a1 = Vec2::Zero();
  Vec2 a2 = Vec2::Zero();
  std::vector<Vec2> basis{Vec2::Zero()};

  double area() const { return std::abs(a1.x() * a2.y() - a1.y() * a2.x()); }
  std::size_t basis_size() const { return basis.size(); }
  bool is_bravais() const { return basis.size() == 1; }

  void validate() const {
    const double scale = a1.norm() * a2.norm();
    require(scale > 0.0 && area() > 1e-12 * scale, ErrorKind::SingularLattice,
            "primitive vectors are degenerate");
    require(!basis.empty() && basis.front().isZero(0.0), ErrorKind::InvalidParameter,
            "basis must start with the zero offset");
  }
};

struct ReciprocalLattice {
  Vec2 g1 = Vec2::Zero();
  Vec2 g2 = Vec2::Zero();
};

inline Lattice make_square(double a) {
  require(a > 0.0 && std::isfinite(a), ErrorKind::InvalidParameter, "square spacing must be positive");
  Lattice lat;
  lat.kind = LatticeKind::Square;
  lat.spacing = a;
  lat.a1 = Vec2(a, 0.0);
  lat.a2 = Vec2(0.0, a);
  return lat;
}

inline Lattice make_triangular(double a) {
  require(a > 0.0 && std::isfinite(a), ErrorKind::InvalidParameter, "triangular spacing must be positive");
  Lattice lat;
  lat.kind = LatticeKind::Triangular;
  lat.spacing = a;
  lat.a1 = Vec2(a, 0.0);
  lat.a2 = Vec2(0.5 * a, 0.5 * std::sqrt(3.0) * a);
  return lat;
}

// Triangular Bravais lattice of length sqrt(3) d_nn with b along a bond.
inline Lattice make_honeycomb(double d_nn) {
  require(d_nn > 0.0 && std::isfinite(d_nn), ErrorKind::InvalidParameter,
          "honeycomb nearest-neighbour spacing must be positive");
  Lattice lat = make_triangular(std::sqrt(3.0) * d_nn);
  lat.kind = LatticeKind::Honeycomb;
  lat.spacing = d_nn;
  lat.basis = {Vec2::Zero(), (lat.a1 + lat.a2) / 3.0};
  return lat;
}

inline Lattice make_lattice(LatticeKind kind, double spacing) {
  switch (kind) {
    case LatticeKind::Square: return make_square(spacing);
    case LatticeKind::Triangular: return make_triangular(spacing);
    case LatticeKind::Honeycomb: return make_honeycomb(spacing);
  }
  throw Error(ErrorKind::InvalidParameter, "unknown lattice kind");
}

inline ReciprocalLattice reciprocal(const Lattice& lat) {
  lat.validate();
  Eigen::Matrix2d a;
  a.col(0) = lat.a1;
  a.col(1) = lat.a2;
  // rows of 2 pi A^{-1} are the g_j
  Eigen::Matrix2d g = 2.0 * kPi * a.inverse();
  return {g.row(0).transpose(), g.row(1).transpose()};
}

// ---------------------------------------------------------------------------
// Brillouin-zone paths

struct BZVertex {
  std::string name;
  Vec2 q;
};

struct BZPath {
  std::vector<BZVertex> vertices;
  std::vector<Vec2> samples;
  std::vector<int> segment;  // segment index per sample (vertex k -> k+1)
  std::vector<double> s;     // cumulative path length per sample
};

inline std::string canonical_vertex(const std::string& name) {
  if (name == "G" || name == "Gamma" || name == "gamma" || name == "\xCE\x93") return "G";
  return name;
}

// Square: X = (pi/a, 0), M = (pi/a, pi/a).
// Triangular frame (a1 along x): K = (4 pi / 3|a1|, 0), M = g2 / 2.
inline Vec2 high_symmetry_point(const Lattice& lat, const std::string& raw) {
  const std::string name = canonical_vertex(raw);
  if (name == "G") return Vec2::Zero();
  if (lat.kind == LatticeKind::Square) {
    const double k = kPi / lat.a1.norm();
    if (name == "X") return Vec2(k, 0.0);
    if (name == "M") return Vec2(k, k);
  } else {
    const double l = lat.a1.norm();
    if (name == "K") return Vec2(4.0 * kPi / (3.0 * l), 0.0);
    if (name == "M") return 0.5 * reciprocal(lat).g2;
  }
  throw Error(ErrorKind::InvalidParameter,
              "vertex '" + raw + "' is not defined for a " + to_string(lat.kind) + " lattice");
}

inline BZPath bz_path(const Lattice& lat, const std::vector<std::string>& names, int samples_per_segment) {
  require(names.size() >= 2, ErrorKind::InvalidParameter, "path needs at least two vertices");
  require(samples_per_segment >= 2, ErrorKind::InvalidParameter, "samples_per_segment must be >= 2");
  BZPath path;
  for (const auto& n : names) path.vertices.push_back({canonical_vertex(n), high_symmetry_point(lat, n)});
  double s0 = 0.0;
  for (std::size_t k = 0; k + 1 < path.vertices.size(); ++k) {
    const Vec2 p = path.vertices[k].q;
    const Vec2 d = path.vertices[k + 1].q - p;
    for (int j = (k == 0 ? 0 : 1); j < samples_per_segment; ++j) {
      const double t = static_cast<double>(j) / (samples_per_segment - 1);
      path.samples.push_back(p + t * d);
      path.segment.push_back(static_cast<int>(k));
      path.s.push_back(s0 + t * d.norm());
    }
    s0 += d.norm();
  }
  return path;
}

// ---------------------------------------------------------------------------
// Finite arrays

struct EmitterSet {
  Lattice lattice;
  int n1 = 0;
  int n2 = 0;
  std::vector<Vec3> positions;  // every site, occupied or not
  std::vector<char> occupied;
  std::vector<int> sublattice;

  std::size_t size() const { return positions.size(); }
  std::size_t occupied_count() const {
    std::size_t c = 0;
    for (char o : occupied) c += o ? 1 : 0;
    return c;
  }
  std::vector<Vec3> occupied_positions() const {
    std::vector<Vec3> out;
    out.reserve(occupied_count());
    for (std::size_t i = 0; i < positions.size(); ++i)
      if (occupied[i]) out.push_back(positions[i]);
    return out;
  }
  // Transverse extent of the occupied sites.
  Vec2 extent() const {
    Vec2 lo = Vec2::Constant(1e300), hi = Vec2::Constant(-1e300);
    for (std::size_t i = 0; i < positions.size(); ++i) {
      if (!occupied[i]) continue;
      lo = lo.cwiseMin(positions[i].head<2>());
      hi = hi.cwiseMax(positions[i].head<2>());
    }
    return occupied_count() == 0 ? Vec2::Zero() : Vec2(hi - lo);
  }
};

inline EmitterSet finite_array(const Lattice& lat, int n1, int n2, double vacancy_p = 0.0,
                               std::uint64_t seed = 0) {
  lat.validate();
  require(n1 >= 1 && n2 >= 1, ErrorKind::InvalidParameter, "array extent must be at least 1x1");
  require(vacancy_p >= 0.0 && vacancy_p < 1.0, ErrorKind::InvalidParameter, "vacancy probability must be in [0,1)");
  EmitterSet set;
  set.lattice = lat;
  set.n1 = n1;
  set.n2 = n2;
  const std::size_t nb = lat.basis_size();
  set.positions.reserve(static_cast<std::size_t>(n1) * n2 * nb);
  Vec2 centroid = Vec2::Zero();
  for (int i = 0; i < n1; ++i)
    for (int j = 0; j < n2; ++j)
      for (std::size_t nu = 0; nu < nb; ++nu) {
        Vec2 p = i * lat.a1 + j * lat.a2 + lat.basis[nu];
        centroid += p;
        set.positions.emplace_back(p.x(), p.y(), 0.0);
        set.sublattice.push_back(static_cast<int>(nu));
      }
  centroid /= static_cast<double>(set.positions.size());
  for (auto& p : set.positions) p.head<2>() -= centroid;

  // One draw per site regardless of p, so occupancy is nested in p for a fixed seed.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  set.occupied.resize(set.positions.size());
  for (auto& o : set.occupied) o = uni(rng) < vacancy_p ? 0 : 1;
  return set;
}

}  // namespace coopsurface
