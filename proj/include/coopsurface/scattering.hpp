#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "bands.hpp"
#include "greens.hpp"
#include "lattice.hpp"
#include "parallel.hpp"
#include "types.hpp"

namespace coopsurface {

struct JonesMatrix {
  Mat2c t = Mat2c::Identity();
};

// Zero-order radiative rate (3 Gamma0 / 4 pi)(lambda^2 / A)(k0 / q_z) of one unit cell.
inline double zero_order_rate(const Lattice& lat, const Vec2& q) {
  require(q.norm() < kK0, ErrorKind::OutsideLightCone, "|q| >= k0 has no propagating zero order");
  const double qz = std::sqrt(kK0 * kK0 - q.squaredNorm());
  return 3.0 * kGamma0 * kWavelength * kWavelength / (4.0 * kPi * lat.area()) * kK0 / qz;
}

// S(q, Z) = i (Gamma~/2) P_{v(q,Z)} [u^dag M^{-1} u] P_{v+(q)}, u_nu = e^{i q.b_nu}.
inline Tensor3 scattering_matrix(const Lattice& lat, const LatticeResponse& r, int z_sign, double delta,
                                 const ZeemanField& field) {
  require(z_sign == 1 || z_sign == -1, ErrorKind::InvalidParameter, "z_sign must be +1 or -1");
  const double rate = zero_order_rate(lat, r.q);
  const MatXc minv = invert_response(build_M(r, delta, field).m);
  const VecXc u = symmetric_mode(lat, r.q) * std::sqrt(double(lat.basis_size()));
  const Tensor3 inner = project_symmetric(minv, u);
  const Tensor3 p_out = transverse_projector(weyl_vector(r.q, z_sign));
  const Tensor3 p_in = transverse_projector(weyl_vector(r.q, 1.0));
  return kI * (0.5 * rate) * p_out * inner * p_in;
}

inline Tensor3 scattering_matrix(const Lattice& lat, const Vec2& q, int z_sign, double delta,
                                 const ZeemanField& field, const LatticeSumOptions& opt = {}) {
  return scattering_matrix(lat, lattice_response(lat, q, opt), z_sign, delta, field);
}

// Normal incidence: T = 1 + S_red.
inline JonesMatrix jones(const Lattice& lat, const LatticeResponse& r0, double delta, const ZeemanField& field) {
  require(r0.q.isZero(0.0), ErrorKind::InvalidParameter, "jones needs the q = 0 lattice response");
  JonesMatrix j;
  j.t = Mat2c::Identity() + scattering_matrix(lat, r0, 1, delta, field).topLeftCorner<2, 2>();
  return j;
}

inline JonesMatrix jones(const Lattice& lat, double delta, const ZeemanField& field,
                         const LatticeSumOptions& opt = {}) {
  return jones(lat, lattice_response(lat, Vec2::Zero(), opt), delta, field);
}

// Reflected amplitudes, S_red evaluated on the Z < 0 side.
inline Mat2c reflection_matrix(const Lattice& lat, const LatticeResponse& r0, double delta, const ZeemanField& field) {
  return scattering_matrix(lat, r0, -1, delta, field).topLeftCorner<2, 2>();
}

// Square lattice with B along x: the xy block of M(0)^{-1} written through the
// cofactors of the 3x3 problem (x couples to y only through Omega_xy, y to z
// through the field).
inline JonesMatrix jones_square_closed_form(const Lattice& lat, const LatticeResponse& r0, double delta, double bx) {
  require(lat.kind == LatticeKind::Square, ErrorKind::InvalidParameter, "closed form needs a square lattice");
  require(r0.q.isZero(0.0), ErrorKind::InvalidParameter, "closed form needs the q = 0 lattice response");
  const cplx gx = r0.gamma(0, 0), gy = r0.gamma(1, 1), gz = r0.gamma(2, 2), gxy = r0.gamma(0, 1);
  const cplx mx = r0.omega(0, 0) - delta - 0.5 * kI * gx;
  const cplx my = r0.omega(1, 1) - delta - 0.5 * kI * gy;
  const cplx mz = r0.omega(2, 2) - delta - 0.5 * kI * gz;
  const cplx oxy = r0.omega(0, 1) - 0.5 * kI * gxy;
  const cplx det = mx * (my * mz - bx * bx) - oxy * oxy * mz;
  const double g = zero_order_rate(lat, Vec2::Zero());
  const cplx c = kI * (0.5 * g) / det;
  JonesMatrix j;
  j.t(0, 0) = 1.0 + c * (my * mz - bx * bx);
  j.t(1, 1) = 1.0 + c * (mx * mz);
  j.t(0, 1) = j.t(1, 0) = -c * oxy * mz;
  return j;
}

inline JonesMatrix circular_jones(const Lattice& lat, const LatticeResponse& r0, double delta, double bz) {
  return jones(lat, r0, delta, ZeemanField(0.0, 0.0, bz));
}

inline JonesMatrix circular_jones(const Lattice& lat, double delta, double bz, const LatticeSumOptions& opt = {}) {
  return circular_jones(lat, lattice_response(lat, Vec2::Zero(), opt), delta, bz);
}

inline double visibility(const JonesMatrix& j, const CVec2& e_in) {
  const CVec2 out = j.t * e_in;
  const double ix = std::norm(out(0)), iy = std::norm(out(1));
  require(ix + iy > 1e-28 * std::max(1.0, e_in.squaredNorm()), ErrorKind::UndefinedVisibility,
          "no transmitted intensity");
  return (ix - iy) / (ix + iy);
}

inline double wrap_phase(double x) {
  double r = std::remainder(x, 2.0 * kPi);
  if (r <= -kPi) r += 2.0 * kPi;
  return r;
}

struct PhaseObservables {
  double dphi = 0.0;  // wrapped to (-pi, pi]; NaN when undefined
  bool phase_defined = true;
  double intensity = 0.0;
  double intensity_difference = 0.0;
};

inline PhaseObservables phase_observables(const JonesMatrix& j, const CVec2& e_in) {
  const CVec2 out = j.t * e_in;
  PhaseObservables p;
  p.intensity = out.squaredNorm();
  p.intensity_difference = std::norm(out(0)) - std::norm(out(1));
  const double floor = 1e-12 * std::max(1e-300, e_in.norm());
  if (std::abs(out(0)) > floor && std::abs(out(1)) > floor) {
    p.dphi = wrap_phase(std::arg(out(0)) - std::arg(out(1)));
  } else {
    p.phase_defined = false;
    p.dphi = std::numeric_limits<double>::quiet_NaN();
  }
  return p;
}

// ---------------------------------------------------------------------------
// Scans

struct ScanAxis {
  std::string name;
  double min = 0.0;
  double max = 0.0;
  int count = 1;

  double value(int i) const { return count == 1 ? min : min + (max - min) * i / (count - 1); }
  void validate() const {
    require(count >= 1, ErrorKind::InvalidParameter, "axis '" + name + "' needs at least one point");
    require(std::isfinite(min) && std::isfinite(max), ErrorKind::InvalidParameter, "axis '" + name + "' not finite");
    require(count == 1 || max > min, ErrorKind::InvalidParameter, "axis '" + name + "' must be increasing");
  }
};

// Row-major over axes (last axis fastest); NaN marks a failed cell.
struct ScanGrid {
  std::vector<ScanAxis> axes;
  std::vector<std::string> fields;
  std::vector<double> values;
  std::vector<std::string> cell_errors;  // empty string when the cell succeeded

  std::size_t cell_count() const {
    std::size_t n = 1;
    for (const auto& a : axes) n *= static_cast<std::size_t>(a.count);
    return n;
  }
  void allocate() {
    for (const auto& a : axes) a.validate();
    values.assign(cell_count() * fields.size(), std::numeric_limits<double>::quiet_NaN());
    cell_errors.assign(cell_count(), std::string());
  }
  double& at(std::size_t cell, std::size_t field) { return values[cell * fields.size() + field]; }
  double at(std::size_t cell, std::size_t field) const { return values[cell * fields.size() + field]; }
  std::size_t field_index(const std::string& f) const {
    for (std::size_t i = 0; i < fields.size(); ++i)
      if (fields[i] == f) return i;
    throw Error(ErrorKind::InvalidParameter, "no field '" + f + "'");
  }
  std::vector<int> indices(std::size_t cell) const {
    std::vector<int> idx(axes.size());
    for (std::size_t k = axes.size(); k-- > 0;) {
      idx[k] = static_cast<int>(cell % axes[k].count);
      cell /= axes[k].count;
    }
    return idx;
  }
  std::size_t failed_cells() const {
    std::size_t n = 0;
    for (const auto& e : cell_errors) n += e.empty() ? 0 : 1;
    return n;
  }
};

// Nearest-branch continuation of a wrapped phase sequence; restarts after gaps.
inline std::vector<double> unwrap_phase(const std::vector<double>& wrapped) {
  std::vector<double> out(wrapped.size(), std::numeric_limits<double>::quiet_NaN());
  double prev = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < wrapped.size(); ++i) {
    if (!std::isfinite(wrapped[i])) {
      prev = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    out[i] = std::isfinite(prev) ? prev + wrap_phase(wrapped[i] - prev) : wrapped[i];
    prev = out[i];
  }
  return out;
}

struct Ridge {
  double a = 0.0;
  double delta = 0.0;
  double visibility = 0.0;
  double t_xx = 0.0;  // |T_xx|
  double t_yy = 0.0;  // |T_yy|
  bool y_polarizer = true;  // visibility minimum; false for a maximum (x-polarizer)
};

struct PolarizerScan {
  ScanGrid grid;  // axes (a, delta); fields visibility, i_x, i_y
  std::vector<Ridge> ridges;
};

namespace detail {

template <class F>
double golden_section(F&& f, double lo, double hi, bool minimize, double tol = 1e-10) {
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  auto v = [&](double x) { return minimize ? f(x) : -f(x); };
  double c = hi - g * (hi - lo), d = lo + g * (hi - lo);
  double fc = v(c), fd = v(d);
  while (hi - lo > tol) {
    if (fc < fd) {
      hi = d;
      d = c;
      fd = fc;
      c = hi - g * (hi - lo);
      fc = v(c);
    } else {
      lo = c;
      c = d;
      fc = fd;
      d = lo + g * (hi - lo);
      fd = v(d);
    }
  }
  return 0.5 * (lo + hi);
}

inline Ridge make_ridge(const Lattice& lat, const LatticeResponse& r0, double delta, const ZeemanField& f,
                        const CVec2& e_in, bool ypol) {
  const JonesMatrix j = jones(lat, r0, delta, f);
  Ridge rg;
  rg.a = lat.spacing;
  rg.delta = delta;
  rg.visibility = visibility(j, e_in);
  rg.t_xx = std::abs(j.t(0, 0));
  rg.t_yy = std::abs(j.t(1, 1));
  rg.y_polarizer = ypol;
  return rg;
}

// Ridges along one detuning line: the global visibility minimum (when below
// -0.5) and every local maximum above +0.5, refined by golden section.
inline std::vector<Ridge> ridges_on_line(const Lattice& lat, const LatticeResponse& r0, const ScanAxis& d_axis,
                                         const std::vector<double>& vis, const ZeemanField& f, const CVec2& e_in) {
  std::vector<Ridge> out;
  auto vf = [&](double d) {
    try {
      return visibility(jones(lat, r0, d, f), e_in);
    } catch (const Error&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  const int n = d_axis.count;
  int imin = -1;
  for (int i = 0; i < n; ++i)
    if (std::isfinite(vis[i]) && (imin < 0 || vis[i] < vis[imin])) imin = i;
  if (imin >= 0 && vis[imin] < -0.5) {
    const double lo = d_axis.value(std::max(0, imin - 1)), hi = d_axis.value(std::min(n - 1, imin + 1));
    const double d = n > 1 ? golden_section(vf, lo, hi, true) : d_axis.value(imin);
    out.push_back(make_ridge(lat, r0, d, f, e_in, true));
  }
  for (int i = 1; i + 1 < n; ++i) {
    if (!(vis[i] > 0.5 && vis[i] >= vis[i - 1] && vis[i] > vis[i + 1])) continue;
    const double d = golden_section(vf, d_axis.value(i - 1), d_axis.value(i + 1), false);
    out.push_back(make_ridge(lat, r0, d, f, e_in, false));
  }
  return out;
}

}  // namespace detail

// Visibility over (square spacing a, detuning). Lattice sums are computed once
// per spacing; failed cells stay NaN with the error recorded.
inline PolarizerScan polarizer_scan(const ScanAxis& a_axis, const ScanAxis& d_axis, const ZeemanField& field,
                                    const CVec2& e_in, const LatticeSumOptions& opt = {}, unsigned threads = 0) {
  PolarizerScan scan;
  scan.grid.axes = {a_axis, d_axis};
  scan.grid.fields = {"visibility", "i_x", "i_y"};
  scan.grid.allocate();
  require(a_axis.min > 0.0 && a_axis.max < kWavelength, ErrorKind::InvalidParameter,
          "polarizer scan needs subwavelength spacings 0 < a < lambda");
  std::vector<std::vector<Ridge>> row_ridges(a_axis.count);
  parallel_for(
      a_axis.count,
      [&](std::size_t ia) {
        const Lattice lat = make_square(a_axis.value(static_cast<int>(ia)));
        std::vector<double> vis(d_axis.count, std::numeric_limits<double>::quiet_NaN());
        LatticeResponse r0;
        try {
          r0 = lattice_response(lat, Vec2::Zero(), opt);
        } catch (const Error& e) {
          for (int id = 0; id < d_axis.count; ++id) scan.grid.cell_errors[ia * d_axis.count + id] = e.what();
          return;
        }
        for (int id = 0; id < d_axis.count; ++id) {
          const std::size_t cell = ia * d_axis.count + id;
          try {
            const JonesMatrix j = jones(lat, r0, d_axis.value(id), field);
            const CVec2 out = j.t * e_in;
            scan.grid.at(cell, 1) = std::norm(out(0));
            scan.grid.at(cell, 2) = std::norm(out(1));
            vis[id] = scan.grid.at(cell, 0) = visibility(j, e_in);
          } catch (const Error& e) {
            scan.grid.cell_errors[cell] = e.what();
          }
        }
        row_ridges[ia] = detail::ridges_on_line(lat, r0, d_axis, vis, field, e_in);
      },
      threads);
  for (auto& r : row_ridges) scan.ridges.insert(scan.ridges.end(), r.begin(), r.end());
  return scan;
}

// Ridges for a single spacing (finer than any grid row).
inline std::vector<Ridge> polarizer_ridges_at(double a, const ScanAxis& d_axis, const ZeemanField& field,
                                              const CVec2& e_in, const LatticeSumOptions& opt = {}) {
  const Lattice lat = make_square(a);
  const LatticeResponse r0 = lattice_response(lat, Vec2::Zero(), opt);
  std::vector<double> vis(d_axis.count);
  for (int i = 0; i < d_axis.count; ++i) vis[i] = visibility(jones(lat, r0, d_axis.value(i), field), e_in);
  return detail::ridges_on_line(lat, r0, d_axis, vis, field, e_in);
}

namespace detail {

inline void fill_phase_cell(ScanGrid& g, std::size_t cell, const JonesMatrix& j, const CVec2& e_in) {
  const PhaseObservables p = phase_observables(j, e_in);
  g.at(cell, g.field_index("dphi")) = p.dphi;
  g.at(cell, g.field_index("i_out")) = p.intensity;
  g.at(cell, g.field_index("delta_i_out")) = p.intensity_difference;
}

// Unwrapped column along the last axis.
inline void add_unwrapped(ScanGrid& g) {
  const std::size_t fd = g.field_index("dphi"), fu = g.field_index("dphi_unwrapped");
  const std::size_t line = static_cast<std::size_t>(g.axes.back().count);
  for (std::size_t start = 0; start < g.cell_count(); start += line) {
    std::vector<double> w(line);
    for (std::size_t k = 0; k < line; ++k) w[k] = g.at(start + k, fd);
    const auto u = unwrap_phase(w);
    for (std::size_t k = 0; k < line; ++k) g.at(start + k, fu) = u[k];
  }
}

}  // namespace detail

// (a, delta) maps of the phase difference and transmitted intensity.
inline ScanGrid phase_map(const ScanAxis& a_axis, const ScanAxis& d_axis, const ZeemanField& field,
                          const CVec2& e_in, const LatticeSumOptions& opt = {}, unsigned threads = 0) {
  ScanGrid g;
  g.axes = {a_axis, d_axis};
  g.fields = {"dphi", "dphi_unwrapped", "i_out", "delta_i_out"};
  g.allocate();
  require(a_axis.min > 0.0 && a_axis.max < kWavelength, ErrorKind::InvalidParameter,
          "phase map needs subwavelength spacings 0 < a < lambda");
  parallel_for(
      a_axis.count,
      [&](std::size_t ia) {
        const Lattice lat = make_square(a_axis.value(static_cast<int>(ia)));
        LatticeResponse r0;
        try {
          r0 = lattice_response(lat, Vec2::Zero(), opt);
        } catch (const Error& e) {
          for (int id = 0; id < d_axis.count; ++id) g.cell_errors[ia * d_axis.count + id] = e.what();
          return;
        }
        for (int id = 0; id < d_axis.count; ++id) {
          const std::size_t cell = ia * d_axis.count + id;
          try {
            detail::fill_phase_cell(g, cell, jones(lat, r0, d_axis.value(id), field), e_in);
          } catch (const Error& e) {
            g.cell_errors[cell] = e.what();
          }
        }
      },
      threads);
  detail::add_unwrapped(g);
  return g;
}

// Field line muB(t) = offset + t * direction at fixed lattice and detuning.
inline ScanGrid field_line_scan(const Lattice& lat, double delta, const ScanAxis& t_axis, const Vec3& offset,
                                const Vec3& direction, const CVec2& e_in, const LatticeSumOptions& opt = {}) {
  ScanGrid g;
  g.axes = {t_axis};
  g.fields = {"mu_bx", "mu_by", "mu_bz", "dphi", "dphi_unwrapped", "i_out", "delta_i_out"};
  g.allocate();
  const LatticeResponse r0 = lattice_response(lat, Vec2::Zero(), opt);
  for (int i = 0; i < t_axis.count; ++i) {
    const Vec3 b = offset + t_axis.value(i) * direction;
    g.at(i, 0) = b.x();
    g.at(i, 1) = b.y();
    g.at(i, 2) = b.z();
    try {
      detail::fill_phase_cell(g, i, jones(lat, r0, delta, ZeemanField(b)), e_in);
    } catch (const Error& e) {
      g.cell_errors[i] = e.what();
    }
  }
  detail::add_unwrapped(g);
  return g;
}

// Symmetric field line muB(eps) = (eps + anchor, eps, 0).
inline ScanGrid waveplate_scan(const Lattice& lat, double delta, const ScanAxis& eps_axis, const CVec2& e_in,
                               double anchor = -1.75, const LatticeSumOptions& opt = {}) {
  return field_line_scan(lat, delta, eps_axis, Vec3(anchor, 0.0, 0.0), Vec3(1.0, 1.0, 0.0), e_in, opt);
}

}  // namespace coopsurface
