#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "bands.hpp"
#include "greens.hpp"
#include "lattice.hpp"
#include "linalg.hpp"
#include "parallel.hpp"
#include "scattering.hpp"
#include "types.hpp"

namespace coopsurface {

// Incident field E_in = -eta (d = 1), so that the steady state solves M beta = -eta.
struct DriveSpec {
  double delta = 0.0;
  CVec2 eta = CVec2::Zero();
  Vec2 k_par = Vec2::Zero();
  ZeemanField field;

  static DriveSpec from_incident(const CVec2& e_in, double delta, const ZeemanField& f = {},
                                 const Vec2& k_par = Vec2::Zero()) {
    DriveSpec d;
    d.delta = delta;
    d.eta = -e_in;
    d.k_par = k_par;
    d.field = f;
    return d;
  }
  void validate() const {
    require(std::isfinite(delta), ErrorKind::InvalidParameter, "detuning must be finite");
    require(eta.allFinite() && field.muB.allFinite(), ErrorKind::InvalidParameter, "drive must be finite");
    require(k_par.norm() < kK0, ErrorKind::InvalidParameter, "|k_par| must be below k0");
  }
  Vec3 wavevector() const { return Vec3(k_par.x(), k_par.y(), std::sqrt(kK0 * kK0 - k_par.squaredNorm())); }
  CVec3 incident_amplitude() const { return CVec3(-eta(0), -eta(1), 0.0); }
  CVec3 incident_field(const Vec3& r) const { return incident_amplitude() * std::exp(kI * wavevector().dot(r)); }
  CVec3 rabi(const Vec3& r) const { return CVec3(eta(0), eta(1), 0.0) * std::exp(kI * wavevector().dot(r)); }
};

struct DipoleState {
  std::vector<Vec3> positions;  // occupied emitters only
  std::vector<CVec3> beta;
  std::vector<double> beta_z;   // nonlinear runs only
  double residual = 0.0;        // ||M beta + eta|| / ||eta|| for linear solves
  double scattered_power = 0.0; // sum beta^dag Gamma beta
  double extinction = 0.0;      // -2 Im sum eta^* . beta
  bool converged = true;

  double power_balance_error() const {
    const double s = std::max(std::abs(extinction), 1e-300);
    return std::abs(scattered_power - extinction) / s;
  }
};

struct SolveOptions {
  std::size_t max_unknowns = 3 * 71 * 71;
};

namespace detail {

// Field of a unit-prefactor dipole sum at r: (3 pi / k0) sum_j G(r - r_j) beta_j.
// Sets `near` when r lies within `mask` of an emitter.
inline CVec3 dipole_field(const std::vector<Vec3>& pos, const std::vector<CVec3>& beta, const Vec3& r,
                          double mask, bool& near) {
  CVec3 e = CVec3::Zero();
  near = false;
  for (std::size_t j = 0; j < pos.size(); ++j) {
    const Vec3 d = r - pos[j];
    const double dist = d.norm();
    if (dist < mask) {
      near = true;
      continue;
    }
    const GreenRadial g = green_radial(dist);
    const Vec3 u = d / dist;
    const cplx ub = u.x() * beta[j](0) + u.y() * beta[j](1) + u.z() * beta[j](2);
    e += g.iso * beta[j] + (g.dyad * ub) * u.cast<cplx>();
  }
  return kDipolePrefactor * e;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace detail

// Seed of configuration `index` derived from a master seed.
inline std::uint64_t config_seed(std::uint64_t seed, std::uint64_t index) {
  return detail::splitmix64(seed ^ detail::splitmix64(index + 1));
}

// Dense steady state  sum_j' M_jj' beta_j' = -eta_j,  M_jj' = Omega - i Gamma / 2
// off the diagonal and -Delta - i Gamma0 / 2 + M_B on it.
inline DipoleState solve_linear(const std::vector<Vec3>& pos, const DriveSpec& drive, const SolveOptions& opt = {}) {
  drive.validate();
  const std::size_t n = pos.size();
  const std::size_t dim = 3 * n;
  require(dim <= opt.max_unknowns, ErrorKind::ResourceLimit,
          "3N = " + std::to_string(dim) + " exceeds the solver cap " + std::to_string(opt.max_unknowns));
  DipoleState st;
  st.positions = pos;
  if (n == 0) return st;

  const Tensor3 diag = -drive.delta * Tensor3::Identity() - 0.5 * kI * kGamma0 * Tensor3::Identity() +
                       zeeman_matrix(drive.field);
  MatXc m(dim, dim);
  for (std::size_t i = 0; i < n; ++i) {
    m.block<3, 3>(3 * i, 3 * i) = diag;
    for (std::size_t j = i + 1; j < n; ++j) {
      const Tensor3 b = coupling_pair(pos[i] - pos[j]).complex_block();
      m.block<3, 3>(3 * i, 3 * j) = b;
      m.block<3, 3>(3 * j, 3 * i) = b;
    }
  }
  VecXc rhs(dim);
  for (std::size_t i = 0; i < n; ++i) rhs.segment<3>(3 * i) = -drive.rabi(pos[i]);
  const VecXc x = solve_dense(std::move(m), rhs);
  st.beta.resize(n);
  for (std::size_t i = 0; i < n; ++i) st.beta[i] = x.segment<3>(3 * i);

  // Residual and power balance from freshly generated couplings (the LU
  // overwrote the matrix).
  VecXc mx(dim);
  double scattered = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    CVec3 acc = diag * st.beta[i];
    CVec3 gam = kGamma0 * st.beta[i];
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const CouplingBlock c = coupling_pair(pos[i] - pos[j]);
      acc += c.complex_block() * st.beta[j];
      gam += c.gamma.cast<cplx>() * st.beta[j];
    }
    mx.segment<3>(3 * i) = acc;
    scattered += std::real(st.beta[i].dot(gam));
  }
  st.residual = (mx - rhs).norm() / std::max(rhs.norm(), 1e-300);
  st.scattered_power = scattered;
  double ext = 0.0;
  for (std::size_t i = 0; i < n; ++i) ext += std::imag(drive.rabi(pos[i]).dot(st.beta[i]));
  st.extinction = -2.0 * ext;
  return st;
}

inline DipoleState solve_linear(const EmitterSet& set, const DriveSpec& drive, const SolveOptions& opt = {}) {
  return solve_linear(set.occupied_positions(), drive, opt);
}

// ---------------------------------------------------------------------------
// Field maps

struct GridSpec {
  Vec3 origin = Vec3::Zero();  // point (0, 0)
  Vec3 u = Vec3::UnitX();      // edge spanned by the first index
  Vec3 v = Vec3::UnitZ();      // edge spanned by the second index
  int nu = 1;
  int nv = 1;

  std::size_t size() const { return static_cast<std::size_t>(nu) * nv; }
  Vec3 point(int i, int j) const {
    const double s = nu > 1 ? double(i) / (nu - 1) : 0.0;
    const double t = nv > 1 ? double(j) / (nv - 1) : 0.0;
    return origin + s * u + t * v;
  }
  // Index k = j * nu + i (first index fastest).
  Vec3 point(std::size_t k) const { return point(static_cast<int>(k % nu), static_cast<int>(k / nu)); }
  void validate() const {
    require(nu >= 1 && nv >= 1, ErrorKind::InvalidParameter, "grid needs at least one point per axis");
    require(origin.allFinite() && u.allFinite() && v.allFinite(), ErrorKind::InvalidParameter, "grid not finite");
  }

  static GridSpec xz(double x0, double x1, int nx, double z0, double z1, int nz, double y = 0.0) {
    return {Vec3(x0, y, z0), Vec3(x1 - x0, 0, 0), Vec3(0, 0, z1 - z0), nx, nz};
  }
  static GridSpec xy(double x0, double x1, int nx, double y0, double y1, int ny, double z) {
    return {Vec3(x0, y0, z), Vec3(x1 - x0, 0, 0), Vec3(0, y1 - y0, 0), nx, ny};
  }
};

inline constexpr double kFieldMask = 0.05;

struct FieldMap {
  GridSpec grid;
  std::vector<Vec3> points;
  std::vector<CVec3> field;     // total field (coherent average for ensembles)
  std::vector<Vec3> intensity;  // |E_alpha|^2 (averaged for ensembles)
  std::vector<char> masked;     // within kFieldMask of an emitter
};

// E(r) = E_in(r) + (3 pi / k0) sum_j G(r - r_j) beta_j with the full Green tensor.
inline FieldMap field_map(const DipoleState& st, const DriveSpec& drive, const GridSpec& grid, bool include_incident = true,
                          unsigned threads = 0) {
  grid.validate();
  FieldMap fm;
  fm.grid = grid;
  const std::size_t n = grid.size();
  fm.points.resize(n);
  fm.field.assign(n, CVec3::Zero());
  fm.intensity.assign(n, Vec3::Zero());
  fm.masked.assign(n, 0);
  parallel_for(
      n,
      [&](std::size_t k) {
        const Vec3 r = grid.point(k);
        fm.points[k] = r;
        bool near = false;
        CVec3 e = detail::dipole_field(st.positions, st.beta, r, kFieldMask, near);
        if (include_incident) e += drive.incident_field(r);
        if (near) {
          fm.masked[k] = 1;
          e.setConstant(cplx(std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()));
        }
        fm.field[k] = e;
        fm.intensity[k] = e.cwiseAbs2();
      },
      threads);
  return fm;
}

// ---------------------------------------------------------------------------
// Reflectivity by plane-wave fitting

struct ReflectivityOptions {
  double z_sample = 3.0;
  double window = 0.0;   // side of the square fit window; 0 means half the array width
  double spacing = 0.25;
};

struct Reflectivity {
  CVec2 r_amp = CVec2::Zero();  // reflected amplitude / incident amplitude
  CVec2 t_amp = CVec2::Zero();  // 1 + forward scattered amplitude / incident amplitude
  Vec2 R = Vec2::Zero();
  Vec2 T = Vec2::Zero();
  double window = 0.0;
};

namespace detail {

inline std::vector<Vec3> window_points(double window, double spacing, double z) {
  const int n = std::max(1, static_cast<int>(std::floor(window / spacing + 1e-9)) + 1);
  const double half = 0.5 * spacing * (n - 1);
  std::vector<Vec3> pts;
  pts.reserve(static_cast<std::size_t>(n) * n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) pts.emplace_back(-half + i * spacing, -half + j * spacing, z);
  return pts;
}

inline double resolve_window(const DipoleState& st, const ReflectivityOptions& opt) {
  Vec2 lo = Vec2::Constant(1e300), hi = Vec2::Constant(-1e300);
  for (const auto& p : st.positions) {
    lo = lo.cwiseMin(p.head<2>());
    hi = hi.cwiseMax(p.head<2>());
  }
  const double width = st.positions.empty() ? 0.0 : (hi - lo).minCoeff();
  const double w = opt.window > 0.0 ? opt.window : 0.5 * width;
  require(w <= width + 1e-12, ErrorKind::InvalidParameter,
          "fit window " + std::to_string(w) + " exceeds the array width " + std::to_string(width));
  return w;
}

// Average scattered field over the window points, all evaluated in parallel.
inline CVec3 mean_scattered(const DipoleState& st, const std::vector<Vec3>& pts, unsigned threads) {
  std::vector<CVec3> vals(pts.size());
  parallel_for(
      pts.size(),
      [&](std::size_t k) {
        bool near = false;
        vals[k] = dipole_field(st.positions, st.beta, pts[k], 0.0, near);
      },
      threads);
  CVec3 s = CVec3::Zero();
  for (const auto& v : vals) s += v;
  return s / static_cast<double>(std::max<std::size_t>(1, pts.size()));
}

}  // namespace detail

// Normal-incidence plane-wave fit of the scattered field on z = -+z_sample.
inline Reflectivity reflectivity(const DipoleState& st, const DriveSpec& drive, const ReflectivityOptions& opt = {},
                                 unsigned threads = 0) {
  require(drive.k_par.isZero(0.0), ErrorKind::InvalidParameter, "reflectivity fit assumes normal incidence");
  require(opt.z_sample > 0.0 && opt.spacing > 0.0, ErrorKind::InvalidParameter, "z_sample and spacing must be positive");
  Reflectivity out;
  out.window = detail::resolve_window(st, opt);
  const cplx back_phase = std::exp(-kI * (kK0 * opt.z_sample));
  const CVec3 fwd = detail::mean_scattered(st, detail::window_points(out.window, opt.spacing, opt.z_sample), threads) * back_phase;
  const CVec3 bwd = detail::mean_scattered(st, detail::window_points(out.window, opt.spacing, -opt.z_sample), threads) * back_phase;
  const CVec3 ein = drive.incident_amplitude();
  for (int a = 0; a < 2; ++a) {
    if (std::abs(ein(a)) == 0.0) {
      out.r_amp(a) = out.t_amp(a) = cplx(std::numeric_limits<double>::quiet_NaN(), 0.0);
      out.R(a) = out.T(a) = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    out.r_amp(a) = bwd(a) / ein(a);
    out.t_amp(a) = 1.0 + fwd(a) / ein(a);
    out.R(a) = std::norm(out.r_amp(a));
    out.T(a) = std::norm(out.t_amp(a));
  }
  return out;
}

// Fraction of scattered power outside the zero-order (uniform) transverse mode
// on the square window at height z: 1 - |<E>|^2 / <|E|^2> (Parseval).
inline double nonzero_order_fraction(const DipoleState& st, double z, double window, double spacing = 0.25,
                                     unsigned threads = 0) {
  const auto pts = detail::window_points(window, spacing, z);
  std::vector<CVec3> vals(pts.size());
  parallel_for(
      pts.size(),
      [&](std::size_t k) {
        bool near = false;
        vals[k] = detail::dipole_field(st.positions, st.beta, pts[k], 0.0, near);
      },
      threads);
  CVec3 mean = CVec3::Zero();
  double power = 0.0;
  for (const auto& v : vals) {
    mean += v;
    power += v.squaredNorm();
  }
  mean /= static_cast<double>(vals.size());
  power /= static_cast<double>(vals.size());
  return power > 0.0 ? 1.0 - mean.squaredNorm() / power : 0.0;
}

// ---------------------------------------------------------------------------
// Thermal disorder

struct DisorderSpec {
  double sigma_xy = 0.0;
  double sigma_z = 0.0;
  int n_configs = 1;
  std::uint64_t seed = 0;

  void validate() const {
    require(sigma_xy >= 0.0 && sigma_z >= 0.0, ErrorKind::InvalidParameter, "disorder widths must be >= 0");
    require(n_configs >= 1, ErrorKind::InvalidParameter, "n_configs must be >= 1");
  }
};

// Every position displaced by independent Gaussians (per in-plane axis and z).
inline std::vector<Vec3> displaced_positions(const std::vector<Vec3>& pos, const DisorderSpec& dis, int config) {
  std::mt19937_64 rng(config_seed(dis.seed, static_cast<std::uint64_t>(config)));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Vec3> out = pos;
  for (auto& p : out) {
    const double dx = gauss(rng), dy = gauss(rng), dz = gauss(rng);
    p += Vec3(dis.sigma_xy * dx, dis.sigma_xy * dy, dis.sigma_z * dz);
  }
  return out;
}

struct ConfigRecord {
  int index = 0;
  std::uint64_t seed = 0;
  double sigma_xy = 0.0;
  double sigma_z = 0.0;
  double vacancy_p = 0.0;
  Vec2 R = Vec2::Constant(std::numeric_limits<double>::quiet_NaN());
  Vec2 T = Vec2::Constant(std::numeric_limits<double>::quiet_NaN());
  double residual = std::numeric_limits<double>::quiet_NaN();
  double power_balance_error = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

struct ThermalEnsemble {
  FieldMap mean;  // coherent mean field and mean intensity over successful configurations
  std::vector<ConfigRecord> records;
  int succeeded = 0;
};

// Configurations run in order; each solve may itself be large, so the
// parallelism lives in the field evaluation.
inline ThermalEnsemble thermal_ensemble(const EmitterSet& set, const DriveSpec& drive, const DisorderSpec& dis,
                                        const GridSpec& grid, const ReflectivityOptions& ropt = {},
                                        const SolveOptions& sopt = {}, unsigned threads = 0) {
  dis.validate();
  grid.validate();
  ThermalEnsemble ens;
  ens.mean.grid = grid;
  ens.mean.points.resize(grid.size());
  for (std::size_t k = 0; k < grid.size(); ++k) ens.mean.points[k] = grid.point(k);
  ens.mean.field.assign(grid.size(), CVec3::Zero());
  ens.mean.intensity.assign(grid.size(), Vec3::Zero());
  ens.mean.masked.assign(grid.size(), 0);
  const std::vector<Vec3> base = set.occupied_positions();
  for (int c = 0; c < dis.n_configs; ++c) {
    ConfigRecord rec;
    rec.index = c;
    rec.seed = config_seed(dis.seed, static_cast<std::uint64_t>(c));
    rec.sigma_xy = dis.sigma_xy;
    rec.sigma_z = dis.sigma_z;
    try {
      const DipoleState st = solve_linear(displaced_positions(base, dis, c), drive, sopt);
      rec.residual = st.residual;
      rec.power_balance_error = st.power_balance_error();
      const Reflectivity rf = reflectivity(st, drive, ropt, threads);
      rec.R = rf.R;
      rec.T = rf.T;
      const FieldMap fm = field_map(st, drive, grid, true, threads);
      for (std::size_t k = 0; k < grid.size(); ++k) {
        if (fm.masked[k]) {
          ens.mean.masked[k] = 1;
          continue;
        }
        ens.mean.field[k] += fm.field[k];
        ens.mean.intensity[k] += fm.intensity[k];
      }
      ++ens.succeeded;
    } catch (const Error& e) {
      rec.error = e.what();
    }
    ens.records.push_back(rec);
  }
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (ens.mean.masked[k] || ens.succeeded == 0) {
      ens.mean.field[k].setConstant(cplx(std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()));
      ens.mean.intensity[k].setConstant(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    ens.mean.field[k] /= double(ens.succeeded);
    ens.mean.intensity[k] /= double(ens.succeeded);
  }
  return ens;
}

// ---------------------------------------------------------------------------
// Disorder-averaged bands

struct DisorderedBandPoint {
  Vec2 q = Vec2::Zero();
  std::array<cplx, 3> energy{};  // harmonic mean per channel (x, y, z)
  std::array<int, 3> samples{};  // configurations entering each channel
  int excluded = 0;              // zero eigenvalues dropped from the mean
};

// E_q^c = <q| Omega - i Gamma / 2 |q>, |q> = N^{-1/2} sum_i e^{-i q.r_i}|i> over the
// lattice sites r_i while the couplings use the displaced positions. Each
// configuration's 3x3 is diagonalized and eigenvalues are matched to channels by
// content before the harmonic mean N_c / sum_c 1/E.
inline std::vector<DisorderedBandPoint> disordered_bands(const Lattice& lat, int n1, int n2, const DisorderSpec& dis,
                                                         const std::vector<Vec2>& qs, unsigned threads = 0) {
  dis.validate();
  require(n1 >= 20 && n2 >= 20, ErrorKind::InvalidParameter, "disordered bands need at least a 20x20 lattice");
  const EmitterSet set = finite_array(lat, n1, n2, 0.0, 0);
  const std::vector<Vec3>& sites = set.positions;
  const std::size_t n = sites.size(), nq = qs.size();

  std::vector<std::vector<Tensor3>> per_config(static_cast<std::size_t>(dis.n_configs));
  parallel_for(
      static_cast<std::size_t>(dis.n_configs),
      [&](std::size_t c) {
        const std::vector<Vec3> pos = displaced_positions(sites, dis, static_cast<int>(c));
        std::vector<Tensor3> acc(nq, Tensor3::Zero());
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = i + 1; j < n; ++j) {
            const Tensor3 b = coupling_pair(pos[i] - pos[j]).complex_block();
            const Vec2 d = (sites[i] - sites[j]).head<2>();
            for (std::size_t k = 0; k < nq; ++k) acc[k] += (2.0 * std::cos(qs[k].dot(d))) * b;
          }
        for (std::size_t k = 0; k < nq; ++k) {
          acc[k] /= static_cast<double>(n);
          acc[k].diagonal().array() -= 0.5 * kI * kGamma0;
        }
        per_config[c] = std::move(acc);
      },
      threads);

  std::vector<DisorderedBandPoint> out(nq);
  for (std::size_t k = 0; k < nq; ++k) {
    out[k].q = qs[k];
    std::array<cplx, 3> inv_sum{};
    for (int c = 0; c < dis.n_configs; ++c) {
      Eigen::ComplexEigenSolver<Tensor3> es(per_config[c][k]);
      std::array<int, 3> chan{-1, -1, -1};
      std::array<char, 3> taken{0, 0, 0};
      // greedy assignment: largest Cartesian weight first
      for (int step = 0; step < 3; ++step) {
        double best = -1.0;
        int bv = 0, ba = 0;
        for (int v = 0; v < 3; ++v) {
          if (chan[v] >= 0) continue;
          for (int a = 0; a < 3; ++a) {
            if (taken[a]) continue;
            const double w = std::norm(es.eigenvectors()(a, v)) / es.eigenvectors().col(v).squaredNorm();
            if (w > best) {
              best = w;
              bv = v;
              ba = a;
            }
          }
        }
        chan[bv] = ba;
        taken[ba] = 1;
      }
      for (int v = 0; v < 3; ++v) {
        const cplx e = es.eigenvalues()(v);
        if (std::abs(e) < 1e-14) {
          ++out[k].excluded;
          continue;
        }
        inv_sum[chan[v]] += 1.0 / e;
        ++out[k].samples[chan[v]];
      }
    }
    for (int a = 0; a < 3; ++a)
      out[k].energy[a] = out[k].samples[a] > 0 ? double(out[k].samples[a]) / inv_sum[a]
                                               : cplx(std::numeric_limits<double>::quiet_NaN(), 0.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vacancies

struct VacancyRun {
  double p = 0.0;
  EmitterSet emitters;
  DipoleState state;
  FieldMap map;
};

// One configuration per p, all from the same seed (vacancy sets are nested in p).
inline std::vector<VacancyRun> vacancy_runs(const Lattice& lat, int n1, int n2, const std::vector<double>& p_list,
                                            const DriveSpec& drive, const GridSpec& grid, std::uint64_t seed,
                                            const SolveOptions& sopt = {}, unsigned threads = 0) {
  std::vector<VacancyRun> out;
  for (double p : p_list) {
    require(p >= 0.0 && p < 0.5, ErrorKind::InvalidParameter, "vacancy probability must be in [0, 0.5)");
    VacancyRun run;
    run.p = p;
    run.emitters = finite_array(lat, n1, n2, p, seed);
    run.state = solve_linear(run.emitters, drive, sopt);
    run.map = field_map(run.state, drive, grid, true, threads);
    out.push_back(std::move(run));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Saturation (two-level, single polarization)

struct SingleEmitterSteadyState {
  cplx beta;
  double beta_z = -1.0;
};

// Steady state of  d beta/dt = -(G0/2 - i Delta) beta + i beta_z eta,
//                  d beta_z/dt = -G0 (beta_z + 1) - 4 eta Im beta.
inline SingleEmitterSteadyState nonlinear_single(double delta, double eta) {
  require(eta >= 0.0 && std::isfinite(eta) && std::isfinite(delta), ErrorKind::InvalidParameter,
          "eta must be real and non-negative");
  const double l = 0.25 * kGamma0 * kGamma0 + delta * delta;
  SingleEmitterSteadyState s;
  s.beta_z = -1.0 / (1.0 + 2.0 * eta * eta / l);
  s.beta = kI * eta * s.beta_z / (0.5 * kGamma0 - kI * delta);
  return s;
}

struct MeanFieldResult {
  cplx beta;
  double beta_z = -1.0;
  double R = 0.0;
  double T = 1.0;
  int roots = 0;             // steady states found on beta_z in [-1, 0]
  bool multistable = false;
  std::vector<double> root_beta_z;
};

// Uniform-array closure: C = Omega~(0) - i (Gamma~(0) - Gamma0) / 2 on the x channel.
//   0 = -(G0/2 - i Delta) beta + i beta_z (eta + C beta)
//   0 = -G0 (beta_z + 1) - 2 (Gamma~ - G0)|beta|^2 - 4 eta Im beta
// For fixed beta_z the first line is linear in beta, which leaves one real
// equation in beta_z; every sign change on [-1, 0] is a steady state. The branch
// continuing the linear response (beta_z closest to -1) is returned and polished
// by Newton on (Re beta, Im beta, beta_z).
inline MeanFieldResult nonlinear_meanfield(const LatticeResponse& r0, double delta, double eta) {
  require(r0.q.isZero(0.0) && r0.nb == 1, ErrorKind::InvalidParameter, "mean field needs a Bravais q = 0 response");
  require(eta >= 0.0 && std::isfinite(eta), ErrorKind::InvalidParameter, "eta must be real and non-negative");
  const double om = r0.omega(0, 0).real();
  const double gt = r0.gamma(0, 0).real();
  const cplx C(om, -0.5 * (gt - kGamma0));
  const cplx a = 0.5 * kGamma0 - kI * delta;
  auto beta_of = [&](double bz) { return kI * eta * bz / (a - kI * bz * C); };
  auto g = [&](double bz) {
    const cplx b = beta_of(bz);
    return -kGamma0 * (bz + 1.0) - 2.0 * (gt - kGamma0) * std::norm(b) - 4.0 * eta * b.imag();
  };

  MeanFieldResult res;
  if (eta == 0.0) {
    res.beta = 0.0;
    res.beta_z = -1.0;
    res.roots = 1;
    res.root_beta_z = {-1.0};
  }
  if (eta > 0.0) {
    const int ns = 4000;
    double x0 = -1.0, g0 = g(x0);
    if (g0 == 0.0) res.root_beta_z.push_back(x0);
    for (int i = 1; i <= ns; ++i) {
      const double x1 = -1.0 + double(i) / ns, g1 = g(x1);
      if (g1 == 0.0) {
        res.root_beta_z.push_back(x1);
      } else if ((g0 < 0.0) != (g1 < 0.0) && g0 != 0.0) {
        double lo = x0, hi = x1, glo = g0;
        for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
          const double mid = 0.5 * (lo + hi), gm = g(mid);
          if ((gm < 0.0) == (glo < 0.0)) {
            lo = mid;
            glo = gm;
          } else {
            hi = mid;
          }
        }
        res.root_beta_z.push_back(0.5 * (lo + hi));
      }
      x0 = x1;
      g0 = g1;
    }
    res.roots = static_cast<int>(res.root_beta_z.size());
    res.multistable = res.roots > 1;
    require(res.roots >= 1, ErrorKind::ConvergenceFailure, "no mean-field steady state on beta_z in [-1, 0]");
    double bz = res.root_beta_z.front();
    cplx b = beta_of(bz);

    // Newton polish on the full real system.
    auto F = [&](const Eigen::Vector3d& v) {
      const cplx bb(v(0), v(1));
      const double z = v(2);
      const cplx f1 = -a * bb + kI * z * (eta + C * bb);
      const double f2 = -kGamma0 * (z + 1.0) - 2.0 * (gt - kGamma0) * std::norm(bb) - 4.0 * eta * bb.imag();
      return Eigen::Vector3d(f1.real(), f1.imag(), f2);
    };
    Eigen::Vector3d v(b.real(), b.imag(), bz);
    for (int it = 0; it < 20; ++it) {
      const Eigen::Vector3d f = F(v);
      if (f.norm() < 1e-15) break;
      Eigen::Matrix3d J;
      for (int c = 0; c < 3; ++c) {
        Eigen::Vector3d dv = v;
        const double h = 1e-7 * std::max(1.0, std::abs(v(c)));
        dv(c) += h;
        J.col(c) = (F(dv) - f) / h;
      }
      const Eigen::Vector3d step = J.fullPivLu().solve(f);
      if (!step.allFinite()) break;
      v -= step;
    }
    if (F(v).norm() < 1e-10 && v(2) >= -1.0 - 1e-12 && v(2) <= 1e-12) {
      b = cplx(v(0), v(1));
      bz = v(2);
    }
    res.beta = b;
    res.beta_z = bz;
    const cplx r = -kI * (0.5 * gt) * b / eta;  // reflected amplitude relative to E_in = -eta
    res.R = std::norm(r);
    res.T = std::norm(1.0 + r);
  } else {
    // linear limit: beta / eta -> -1 / M(0)_xx
    const cplx m = -delta + om - 0.5 * kI * gt;
    const cplx r = -kI * (0.5 * gt) * (-1.0 / m);
    res.R = std::norm(r);
    res.T = std::norm(1.0 + r);
  }
  return res;
}

inline MeanFieldResult nonlinear_meanfield(const Lattice& lat, double delta, double eta, const ZeemanField& field = {},
                                           const LatticeSumOptions& opt = {}) {
  require(field.muB.allFinite(), ErrorKind::InvalidParameter, "field must be finite");
  // The two-level reduction assumes the field has moved y and z far from the x channel.
  return nonlinear_meanfield(lattice_response(lat, Vec2::Zero(), opt), delta, eta);
}

struct NonlinearOptions {
  double t_max = 400.0;
  double dt = 0.02;
  double tolerance = 1e-8;  // per-step max change
};

struct NonlinearRealspaceResult {
  DipoleState state;  // beta along x, beta_z per emitter
  double R_x = std::numeric_limits<double>::quiet_NaN();
  double T_x = std::numeric_limits<double>::quiet_NaN();
  double t_final = 0.0;
  long steps = 0;
  bool bounds_ok = true;  // -1 <= beta_z <= 0 at every accepted step
};

// Per-emitter classical saturation model on the x transition:
//   d beta_j/dt   = -(G0/2 - i Delta) beta_j + i beta_z_j F_j
//   d beta_z_j/dt = -G0 (beta_z_j + 1) - 4 Im(F_j^* beta_j)
//   F_j = eta_j + sum_{j' != j} (Omega - i Gamma/2)^{xx}_{jj'} beta_j'
// Integrated with RK4 from the uniform mean-field state.
inline NonlinearRealspaceResult nonlinear_realspace(const EmitterSet& set, const DriveSpec& drive,
                                                    const NonlinearOptions& opt = {},
                                                    const ReflectivityOptions& ropt = {}, unsigned threads = 0) {
  drive.validate();
  require(opt.dt > 0.0 && opt.dt <= 0.02 + 1e-15, ErrorKind::InvalidParameter, "dt must be in (0, 0.02]");
  require(opt.t_max > 0.0, ErrorKind::InvalidParameter, "t_max must be positive");
  require(std::abs(drive.eta(1)) == 0.0, ErrorKind::InvalidParameter, "two-level reduction drives x only");
  const std::vector<Vec3> pos = set.occupied_positions();
  const std::size_t n = pos.size();
  require(n * n <= 8000ull * 8000ull, ErrorKind::ResourceLimit, "array too large for the dense nonlinear solver");

  MatXc c = MatXc::Zero(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) c(i, j) = c(j, i) = coupling_pair(pos[i] - pos[j]).complex_block()(0, 0);
  VecXc eta(n);
  for (std::size_t i = 0; i < n; ++i) eta(i) = drive.rabi(pos[i])(0);

  VecXc beta(n);
  Eigen::VectorXd bz(n);
  {
    const double e0 = std::abs(drive.eta(0));
    const cplx ph = e0 > 0.0 ? drive.eta(0) / e0 : cplx(1.0, 0.0);
    const MeanFieldResult mf = nonlinear_meanfield(lattice_response(set.lattice, Vec2::Zero()), drive.delta, e0);
    for (std::size_t i = 0; i < n; ++i) {
      beta(i) = mf.beta * ph * std::exp(kI * drive.wavevector().dot(pos[i]));
      bz(i) = mf.beta_z;
    }
  }
  const cplx a = 0.5 * kGamma0 - kI * drive.delta;
  auto rhs = [&](const VecXc& b, const Eigen::VectorXd& z, VecXc& db, Eigen::VectorXd& dz) {
    const VecXc f = eta + c * b;
    db = -a * b + kI * (z.cast<cplx>().array() * f.array()).matrix();
    for (std::size_t i = 0; i < n; ++i) dz(i) = -kGamma0 * (z(i) + 1.0) - 4.0 * std::imag(std::conj(f(i)) * b(i));
  };

  NonlinearRealspaceResult res;
  VecXc k1(n), k2(n), k3(n), k4(n);
  Eigen::VectorXd l1(n), l2(n), l3(n), l4(n);
  const double h = opt.dt;
  bool converged = false;
  double t = 0.0;
  while (t < opt.t_max - 1e-12) {
    rhs(beta, bz, k1, l1);
    rhs(beta + 0.5 * h * k1, bz + 0.5 * h * l1, k2, l2);
    rhs(beta + 0.5 * h * k2, bz + 0.5 * h * l2, k3, l3);
    rhs(beta + h * k3, bz + h * l3, k4, l4);
    const VecXc db = (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    const Eigen::VectorXd dz = (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
    beta += db;
    bz += dz;
    t += h;
    ++res.steps;
    if (bz.maxCoeff() > 1e-12 || bz.minCoeff() < -1.0 - 1e-12) res.bounds_ok = false;
    const double change = std::max(db.cwiseAbs().maxCoeff(), dz.cwiseAbs().maxCoeff());
    if (change < opt.tolerance) {
      converged = true;
      break;
    }
  }
  res.t_final = t;
  res.state.positions = pos;
  res.state.beta.resize(n);
  res.state.beta_z.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    res.state.beta[i] = CVec3(beta(i), 0.0, 0.0);
    res.state.beta_z[i] = bz(i);
  }
  res.state.converged = converged;
  const Reflectivity rf = reflectivity(res.state, drive, ropt, threads);
  res.R_x = rf.R(0);
  res.T_x = rf.T(0);
  return res;
}

}  // namespace coopsurface
