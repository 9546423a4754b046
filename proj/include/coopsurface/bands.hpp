#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "greens.hpp"
#include "lattice.hpp"
#include "parallel.hpp"
#include "types.hpp"

namespace coopsurface {

struct LatticeSumOptions {
  std::vector<double> damping{0.04, 0.02, 0.01};
  double min_cells = 300.0;  // r_max >= min_cells * shortest primitive
  double tail = 18.0;        // r_max >= tail / (eta_min k0), i.e. weight e^-18 at the cutoff
  double r_max = 0.0;        // explicit radius when > 0
  double tolerance = 5e-3;   // accepted extrapolation residual, Gamma0
  bool strict = true;        // throw on residual > tolerance instead of flagging
  double wood_scale = 0.2;   // shrink damping when an order is within this relative distance of |q+g| = k0
  double min_scale = 0.25;   // floor on that shrink factor

  double radius(const Lattice& lat) const {
    if (r_max > 0.0) return r_max;
    const double eta_min = *std::min_element(damping.begin(), damping.end());
    const double amin = std::min(lat.a1.norm(), lat.a2.norm());
    return std::max(min_cells * amin, tail / (eta_min * kK0));
  }
  void validate() const {
    require(damping.size() >= 2, ErrorKind::InvalidParameter, "need at least two damping levels");
    for (double e : damping) require(e > 0.0, ErrorKind::InvalidParameter, "damping must be positive");
  }
};

namespace detail {

// Smallest | |q+g| - k0 | / k0 over the reciprocal lattice.
inline double wood_distance(const Lattice& lat, const Vec2& q) {
  const ReciprocalLattice rl = reciprocal(lat);
  const double gmin = std::min(rl.g1.norm(), rl.g2.norm());
  const int n = static_cast<int>(std::ceil((q.norm() + 2.0 * kK0) / gmin)) + 2;
  double best = std::numeric_limits<double>::infinity();
  for (int i = -n; i <= n; ++i)
    for (int j = -n; j <= n; ++j) best = std::min(best, std::abs((q + i * rl.g1 + j * rl.g2).norm() - kK0) / kK0);
  return best;
}

// Damping levels scaled down near a Wood anomaly, where the sums converge on a
// length scale 1 / (k0 * distance).
inline LatticeSumOptions adapted_options(const Lattice& lat, const Vec2& q, const LatticeSumOptions& opt) {
  if (opt.wood_scale <= 0.0 || opt.r_max > 0.0) return opt;
  const double s = std::clamp(wood_distance(lat, q) / opt.wood_scale, opt.min_scale, 1.0);
  LatticeSumOptions o = opt;
  for (double& e : o.damping) e *= s;
  return o;
}

// Polynomial extrapolation to x = 0 through all points (Neville). The second
// value is the change against the extrapolant that drops the largest x.
template <class T>
std::pair<T, double> extrapolate_to_zero(const std::vector<double>& x, const std::vector<T>& y) {
  auto neville = [&](std::size_t first) {
    std::vector<T> p(y.begin() + first, y.end());
    const std::size_t m = p.size();
    for (std::size_t k = 1; k < m; ++k)
      for (std::size_t i = 0; i + k < m; ++i) {
        const double xi = x[first + i], xk = x[first + i + k];
        p[i] = (xk * p[i] - xi * p[i + 1]) / (xk - xi);
      }
    return p[0];
  };
  const T best = neville(0);
  const T lower = neville(1);
  return {best, std::abs(best - lower)};
}

// Per damping level: sum over R of e^{-eta k0 |x|} e^{-i q.R} {Re G, Im G}(x),
// x = R + s. Entries stored as (xx, yy, xy, zz); xz = yz = 0 in plane.
struct GreenSums {
  std::vector<std::array<cplx, 4>> re, im;
  std::size_t terms = 0;
};

inline GreenSums damped_green_sums(const Lattice& lat, const ReciprocalLattice& rl, const Vec2& q,
                                   const Vec2& s, bool same_site, const std::vector<double>& etas,
                                   double r_max) {
  const std::size_t L = etas.size();
  GreenSums out;
  out.re.assign(L, {cplx{}, cplx{}, cplx{}, cplx{}});
  out.im.assign(L, {cplx{}, cplx{}, cplx{}, cplx{}});
  std::vector<double> rre(4 * L, 0.0), rim(4 * L, 0.0), ire(4 * L, 0.0), iim(4 * L, 0.0);
  std::vector<double> w(L);

  const double k = kK0, k2 = k * k, pref = 1.0 / (4.0 * kPi * k2);
  const double rr = r_max + s.norm();
  const int m1 = static_cast<int>(std::ceil(rr * rl.g1.norm() / (2.0 * kPi))) + 1;
  const int m2 = static_cast<int>(std::ceil(rr * rl.g2.norm() / (2.0 * kPi))) + 1;
  const bool q_zero = q.isZero(0.0);
  // With s = 0 the summand is even in R: fold onto a half plane with weight 2 cos(q.R).
  const bool fold = same_site;

  for (int i = -m1; i <= m1; ++i) {
    for (int j = -m2; j <= m2; ++j) {
      if (same_site) {
        if (i == 0 && j == 0) continue;
        if (fold && (i < 0 || (i == 0 && j < 0))) continue;
      }
      const Vec2 R = i * lat.a1 + j * lat.a2;
      const Vec2 x = R + s;
      const double r2 = x.squaredNorm();
      if (r2 > r_max * r_max) continue;
      const double r = std::sqrt(r2);
      const double ux = x.x() / r, uy = x.y() / r;
      const double kr = k * r, c = std::cos(kr), sn = std::sin(kr);
      const double ir = 1.0 / r, ir2 = ir * ir, ir3 = ir2 * ir;
      const double A = k2 * ir - ir3, B = k * ir2;
      const double C = -k2 * ir + 3.0 * ir3, D = -3.0 * k * ir2;
      const double iso_re = pref * (A * c - B * sn), iso_im = pref * (A * sn + B * c);
      const double dy_re = pref * (C * c - D * sn), dy_im = pref * (C * sn + D * c);
      const double g_re[4] = {iso_re + dy_re * ux * ux, iso_re + dy_re * uy * uy, dy_re * ux * uy, iso_re};
      const double g_im[4] = {iso_im + dy_im * ux * ux, iso_im + dy_im * uy * uy, dy_im * ux * uy, iso_im};
      double ph_re = 1.0, ph_im = 0.0;
      if (!q_zero) {
        const double qr = q.dot(R);
        ph_re = std::cos(qr);
        ph_im = -std::sin(qr);
      }
      if (fold) {
        ph_re *= 2.0;
        ph_im = 0.0;
      }
      for (std::size_t l = 0; l < L; ++l) w[l] = std::exp(-etas[l] * kr);
      for (std::size_t l = 0; l < L; ++l) {
        const double wr = w[l] * ph_re, wi = w[l] * ph_im;
        for (int e = 0; e < 4; ++e) {
          rre[4 * l + e] += wr * g_re[e];
          rim[4 * l + e] += wi * g_re[e];
          ire[4 * l + e] += wr * g_im[e];
          iim[4 * l + e] += wi * g_im[e];
        }
      }
      ++out.terms;
    }
  }
  for (std::size_t l = 0; l < L; ++l)
    for (int e = 0; e < 4; ++e) {
      out.re[l][e] = {rre[4 * l + e], rim[4 * l + e]};
      out.im[l][e] = {ire[4 * l + e], iim[4 * l + e]};
    }
  return out;
}

inline Tensor3 tensor_from_entries(const std::array<cplx, 4>& e) {
  Tensor3 t = Tensor3::Zero();
  t(0, 0) = e[0];
  t(1, 1) = e[1];
  t(0, 1) = t(1, 0) = e[2];
  t(2, 2) = e[3];
  return t;
}

inline std::vector<Vec2> propagating_orders(const Lattice& lat, const Vec2& q) {
  const ReciprocalLattice rl = reciprocal(lat);
  const double gmin = std::min(rl.g1.norm(), rl.g2.norm());
  // |g| < |q| + k0 for any propagating q + g; bound integer indices generously
  const double area_g = std::abs(rl.g1.x() * rl.g2.y() - rl.g1.y() * rl.g2.x());
  const double hmin = area_g / std::max(rl.g1.norm(), rl.g2.norm());
  const int n = static_cast<int>(std::ceil((q.norm() + kK0) / std::min(gmin, hmin))) + 1;
  std::vector<Vec2> out;
  for (int i = -n; i <= n; ++i)
    for (int j = -n; j <= n; ++j) {
      const Vec2 p = q + i * rl.g1 + j * rl.g2;
      const double rel = std::abs(p.norm() - kK0) / kK0;
      require(rel > 1e-9, ErrorKind::BranchSingularity,
              "a diffraction order lies on the light circle |q + g| = k0");
      if (p.norm() < kK0) out.push_back(p);
    }
  return out;
}

}  // namespace detail

// Phase dressing between sublattices: entries e^{i q.(b_nu - b_nu')}.
inline MatXc sublattice_phase_matrix(const Lattice& lat, const Vec2& q) {
  const std::size_t nb = lat.basis_size();
  MatXc xi(nb, nb);
  for (std::size_t a = 0; a < nb; ++a)
    for (std::size_t b = 0; b < nb; ++b) xi(a, b) = std::exp(kI * q.dot(lat.basis[a] - lat.basis[b]));
  return xi;
}

// Lattice transform of Gamma over the propagating diffraction orders:
// (3 Gamma0 / 4 pi)(lambda^2 / A) sum_g (k0 / q_z) e^{i(q+g).b_nu nu'} P(q+g).
// The in-plane couplings carry no xz / yz part, so P uses the z-even projector.
inline MatXc gamma_tilde(const Lattice& lat, const Vec2& q) {
  lat.validate();
  require(q.norm() < kK0, ErrorKind::OutsideLightCone, "|q| >= k0: no radiative channel");
  const std::size_t nb = lat.basis_size();
  const double pref = 3.0 * kGamma0 * kWavelength * kWavelength / (4.0 * kPi * lat.area());
  MatXc out = MatXc::Zero(3 * nb, 3 * nb);
  for (const Vec2& p : detail::propagating_orders(lat, q)) {
    const double qz = std::sqrt(kK0 * kK0 - p.squaredNorm());
    Eigen::Matrix3d proj = Eigen::Matrix3d::Identity();
    proj(0, 0) -= p.x() * p.x() / (kK0 * kK0);
    proj(1, 1) -= p.y() * p.y() / (kK0 * kK0);
    proj(0, 1) = proj(1, 0) = -p.x() * p.y() / (kK0 * kK0);
    proj(2, 2) -= qz * qz / (kK0 * kK0);
    for (std::size_t a = 0; a < nb; ++a)
      for (std::size_t b = 0; b < nb; ++b) {
        const cplx ph = std::exp(kI * p.dot(lat.basis[a] - lat.basis[b]));
        out.block<3, 3>(3 * a, 3 * b) += (pref * kK0 / qz) * ph * proj.cast<cplx>();
      }
  }
  return out;
}

// q-dependent part of M(q): lattice-summed Omega and Gamma, 3 N_b square,
// index 3 nu + alpha.
struct LatticeResponse {
  Vec2 q = Vec2::Zero();
  std::size_t nb = 1;
  MatXc omega;          // Omega~(q), Hermitian
  MatXc gamma;          // Gamma~(q) used in M: analytic inside the light cone
  MatXc gamma_damped;   // Gamma~(q) from the extrapolated real-space sum
  double omega_residual = 0.0;
  double gamma_residual = 0.0;
  double r_max = 0.0;
  std::size_t terms = 0;
  bool radiative = true;
  bool converged = true;
};

inline LatticeResponse lattice_response(const Lattice& lat, const Vec2& q, const LatticeSumOptions& user = {}) {
  lat.validate();
  user.validate();
  const LatticeSumOptions opt = detail::adapted_options(lat, q, user);
  const ReciprocalLattice rl = reciprocal(lat);
  const std::size_t nb = lat.basis_size();
  LatticeResponse res;
  res.q = q;
  res.nb = nb;
  res.r_max = opt.radius(lat);
  res.omega = MatXc::Zero(3 * nb, 3 * nb);
  res.gamma_damped = MatXc::Zero(3 * nb, 3 * nb);
  for (std::size_t a = 0; a < nb; ++a)
    for (std::size_t b = a; b < nb; ++b) {
      const bool same = a == b;
      const auto sums = detail::damped_green_sums(lat, rl, q, lat.basis[a] - lat.basis[b], same,
                                                  opt.damping, res.r_max);
      res.terms += sums.terms;
      std::vector<Tensor3> re(opt.damping.size()), im(opt.damping.size());
      for (std::size_t l = 0; l < opt.damping.size(); ++l) {
        re[l] = detail::tensor_from_entries(sums.re[l]);
        im[l] = detail::tensor_from_entries(sums.im[l]);
      }
      Tensor3 re0 = Tensor3::Zero(), im0 = Tensor3::Zero();
      double re_err = 0.0, im_err = 0.0;
      for (int e = 0; e < 9; ++e) {
        std::vector<cplx> yr, yi;
        for (std::size_t l = 0; l < opt.damping.size(); ++l) {
          yr.push_back(re[l](e));
          yi.push_back(im[l](e));
        }
        auto [vr, er] = detail::extrapolate_to_zero(opt.damping, yr);
        auto [vi, ei] = detail::extrapolate_to_zero(opt.damping, yi);
        re0(e) = vr;
        im0(e) = vi;
        re_err = std::max(re_err, er);
        im_err = std::max(im_err, ei);
      }
      Tensor3 om = -kDipolePrefactor * re0;
      Tensor3 ga = 2.0 * kDipolePrefactor * im0;
      if (same) ga += kGamma0 * Tensor3::Identity();
      res.omega.block<3, 3>(3 * a, 3 * b) = om;
      res.gamma_damped.block<3, 3>(3 * a, 3 * b) = ga;
      if (!same) {
        res.omega.block<3, 3>(3 * b, 3 * a) = om.conjugate();
        res.gamma_damped.block<3, 3>(3 * b, 3 * a) = ga.conjugate();
      }
      res.omega_residual = std::max(res.omega_residual, kDipolePrefactor * re_err);
      res.gamma_residual = std::max(res.gamma_residual, 2.0 * kDipolePrefactor * im_err);
    }

  res.radiative = q.norm() < kK0;
  bool wood = false;
  if (res.radiative) {
    try {
      res.gamma = gamma_tilde(lat, q);
    } catch (const Error& e) {
      // a diffraction order on the light circle: the analytic form diverges
      if (e.kind() != ErrorKind::BranchSingularity || opt.strict) throw;
      wood = true;
      res.gamma = res.gamma_damped;
    }
  } else {
    res.gamma = res.gamma_damped;
    for (Eigen::Index i = 0; i < res.gamma.size(); ++i) {
      cplx& v = res.gamma(i);
      if (std::abs(v.real()) < 1e-6) v.real(0.0);
      if (std::abs(v.imag()) < 1e-6) v.imag(0.0);
    }
  }
  res.converged = !wood && res.omega_residual <= opt.tolerance &&
                  ((res.radiative && !wood) || res.gamma_residual <= opt.tolerance);
  if (opt.strict && !res.converged)
    throw Error(ErrorKind::ConvergenceFailure,
                "lattice sum at q = (" + std::to_string(q.x()) + ", " + std::to_string(q.y()) +
                    ") did not converge: omega residual " + std::to_string(res.omega_residual) +
                    ", gamma residual " + std::to_string(res.gamma_residual) + " (tolerance " +
                    std::to_string(opt.tolerance) + ")");
  return res;
}

// Omega~(q), 3 N_b square. Throws convergence-failure when the extrapolation
// residual exceeds the tolerance.
inline MatXc omega_tilde(const Lattice& lat, const Vec2& q, const LatticeSumOptions& opt = {}) {
  LatticeSumOptions o = opt;
  o.strict = false;
  LatticeResponse r = lattice_response(lat, q, o);
  if (r.omega_residual > opt.tolerance)
    throw Error(ErrorKind::ConvergenceFailure, "omega_tilde residual " + std::to_string(r.omega_residual) +
                                                   " exceeds tolerance " + std::to_string(opt.tolerance));
  return r.omega;
}

inline Tensor3 zeeman_matrix(const ZeemanField& f) {
  const double bx = f.muB.x(), by = f.muB.y(), bz = f.muB.z();
  Tensor3 m = Tensor3::Zero();
  m(0, 1) = -kI * bz;
  m(1, 0) = kI * bz;
  m(0, 2) = kI * by;
  m(2, 0) = -kI * by;
  m(1, 2) = -kI * bx;
  m(2, 1) = kI * bx;
  return m;
}

struct BlochMatrix {
  Vec2 q = Vec2::Zero();
  MatXc m;
};

inline BlochMatrix build_M(const LatticeResponse& r, double delta, const ZeemanField& field) {
  const Eigen::Index n = static_cast<Eigen::Index>(3 * r.nb);
  BlochMatrix b;
  b.q = r.q;
  b.m = r.omega - 0.5 * kI * r.gamma;
  b.m.diagonal().array() -= delta;
  const Tensor3 mb = zeeman_matrix(field);
  for (Eigen::Index k = 0; k < n; k += 3) b.m.block<3, 3>(k, k) += mb;
  return b;
}

inline BlochMatrix build_M(const Lattice& lat, const Vec2& q, double delta, const ZeemanField& field,
                           const LatticeSumOptions& opt = {}) {
  return build_M(lattice_response(lat, q, opt), delta, field);
}

// ---------------------------------------------------------------------------
// Band structure

struct BandPoint {
  Vec2 q = Vec2::Zero();
  int segment = 0;
  double s = 0.0;
  std::vector<cplx> eigenvalues;  // Re = shift, -2 Im = decay
  std::vector<Vec3> content;      // (|psi_x|^2, |psi_y|^2, |psi_z|^2) summed over sublattices
  MatXc eigenvectors;             // unit columns
  bool converged = true;
  double residual = 0.0;
};

namespace detail {

inline Vec3 polarization_content(const VecXc& v) {
  Vec3 c = Vec3::Zero();
  for (Eigen::Index i = 0; i < v.size(); ++i) c(i % 3) += std::norm(v(i));
  return c / c.sum();
}

// Eigen-decomposition with degenerate subspaces rotated onto Cartesian-pure
// vectors where possible (x before y before z).
inline void diagonalize(const MatXc& m, std::vector<cplx>& vals, MatXc& vecs) {
  Eigen::ComplexEigenSolver<MatXc> es(m);
  require(es.info() == Eigen::Success, ErrorKind::ConvergenceFailure, "eigen-decomposition failed");
  const Eigen::Index n = m.rows();
  vals.assign(es.eigenvalues().data(), es.eigenvalues().data() + n);
  vecs = es.eigenvectors();
  const double scale = 1.0 + m.cwiseAbs().maxCoeff();
  std::vector<char> done(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (done[i]) continue;
    std::vector<Eigen::Index> group{i};
    for (Eigen::Index j = i + 1; j < n; ++j)
      if (!done[j] && std::abs(vals[i] - vals[j]) < 1e-9 * scale) group.push_back(j);
    for (auto g : group) done[g] = 1;
    if (group.size() < 2) continue;
    MatXc v(n, static_cast<Eigen::Index>(group.size()));
    for (std::size_t c = 0; c < group.size(); ++c) v.col(c) = vecs.col(group[c]);
    Eigen::HouseholderQR<MatXc> qr(v);
    MatXc qm = qr.householderQ() * MatXc::Identity(n, v.cols());
    VecXc w(n);
    for (Eigen::Index r = 0; r < n; ++r) w(r) = static_cast<double>(r % 3);
    MatXc h = qm.adjoint() * w.asDiagonal() * qm;
    Eigen::SelfAdjointEigenSolver<MatXc> sa(h);
    MatXc rot = qm * sa.eigenvectors();
    for (std::size_t c = 0; c < group.size(); ++c) vecs.col(group[c]) = rot.col(c);
  }
  for (Eigen::Index c = 0; c < n; ++c) vecs.col(c).normalize();
}

}  // namespace detail

inline BandPoint band_point(const LatticeResponse& r, const ZeemanField& field) {
  BandPoint p;
  p.q = r.q;
  p.converged = r.converged;
  p.residual = std::max(r.omega_residual, r.radiative ? 0.0 : r.gamma_residual);
  const BlochMatrix b = build_M(r, 0.0, field);
  detail::diagonalize(b.m, p.eigenvalues, p.eigenvectors);
  for (Eigen::Index c = 0; c < p.eigenvectors.cols(); ++c)
    p.content.push_back(detail::polarization_content(p.eigenvectors.col(c)));
  return p;
}

// Lattice responses along a path; non-converged samples are flagged, not thrown.
inline std::vector<LatticeResponse> path_responses(const Lattice& lat, const BZPath& path,
                                                   const LatticeSumOptions& opt = {}, unsigned threads = 0) {
  LatticeSumOptions o = opt;
  o.strict = false;
  std::vector<LatticeResponse> out(path.samples.size());
  parallel_for(out.size(), [&](std::size_t i) { out[i] = lattice_response(lat, path.samples[i], o); }, threads);
  return out;
}

// Bands at Delta = 0, ordered along the path by eigenvector overlap.
inline std::vector<BandPoint> band_structure(const std::vector<LatticeResponse>& responses, const BZPath& path,
                                             const ZeemanField& field) {
  require(responses.size() == path.samples.size(), ErrorKind::InvalidParameter, "one response per path sample");
  std::vector<BandPoint> pts(responses.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    pts[i] = band_point(responses[i], field);
    pts[i].segment = path.segment[i];
    pts[i].s = path.s[i];
  }
  if (pts.empty()) return pts;

  auto permute = [](BandPoint& p, const std::vector<std::size_t>& order) {
    std::vector<cplx> ev;
    std::vector<Vec3> ct;
    MatXc vec(p.eigenvectors.rows(), p.eigenvectors.cols());
    for (std::size_t k = 0; k < order.size(); ++k) {
      ev.push_back(p.eigenvalues[order[k]]);
      ct.push_back(p.content[order[k]]);
      vec.col(k) = p.eigenvectors.col(order[k]);
    }
    p.eigenvalues = ev;
    p.content = ct;
    p.eigenvectors = vec;
  };

  const std::size_t nbands = pts[0].eigenvalues.size();
  {
    std::vector<std::size_t> order(nbands);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return pts[0].eigenvalues[a].real() < pts[0].eigenvalues[b].real() - 1e-12;
    });
    permute(pts[0], order);
  }
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const BandPoint& prev = pts[i - 1];
    BandPoint& cur = pts[i];
    const Eigen::MatrixXd ov = (prev.eigenvectors.adjoint() * cur.eigenvectors).cwiseAbs();
    std::vector<std::size_t> order(nbands, nbands);
    std::vector<char> used(nbands, 0);
    for (std::size_t step = 0; step < nbands; ++step) {
      double best = -1.0, best_gap = 0.0;
      std::size_t bi = 0, bj = 0;
      for (std::size_t a = 0; a < nbands; ++a) {
        if (order[a] != nbands) continue;
        for (std::size_t b = 0; b < nbands; ++b) {
          if (used[b]) continue;
          const double o = ov(a, b);
          const double gap = std::abs(prev.eigenvalues[a] - cur.eigenvalues[b]);
          if (o > best + 1e-9 || (std::abs(o - best) <= 1e-9 && gap < best_gap)) {
            best = o;
            best_gap = gap;
            bi = a;
            bj = b;
          }
        }
      }
      order[bi] = bj;
      used[bj] = 1;
    }
    permute(cur, order);
  }
  return pts;
}

inline std::vector<BandPoint> band_structure(const Lattice& lat, const BZPath& path, const ZeemanField& field,
                                             const LatticeSumOptions& opt = {}, unsigned threads = 0) {
  return band_structure(path_responses(lat, path, opt, threads), path, field);
}

// ---------------------------------------------------------------------------
// Polarizability

struct Polarizability {
  Vec2 q = Vec2::Zero();
  MatXc full;     // M(q)^{-1}, 3 N_b square (d = 1)
  Tensor3 alpha;  // symmetric-mode 3x3 block
};

// Plane-wave sublattice vector u_nu = e^{i q.b_nu} / sqrt(N_b).
inline VecXc symmetric_mode(const Lattice& lat, const Vec2& q) {
  const std::size_t nb = lat.basis_size();
  VecXc u(static_cast<Eigen::Index>(nb));
  for (std::size_t a = 0; a < nb; ++a) u(a) = std::exp(kI * q.dot(lat.basis[a])) / std::sqrt(double(nb));
  return u;
}

inline Tensor3 project_symmetric(const MatXc& full, const VecXc& u) {
  Tensor3 out = Tensor3::Zero();
  for (Eigen::Index a = 0; a < u.size(); ++a)
    for (Eigen::Index b = 0; b < u.size(); ++b) out += std::conj(u(a)) * full.block<3, 3>(3 * a, 3 * b) * u(b);
  return out;
}

inline MatXc invert_response(const MatXc& m) {
  Eigen::FullPivLU<MatXc> lu(m);
  require(lu.isInvertible(), ErrorKind::SingularResponse, "M(q) is singular");
  return lu.inverse();
}

inline Polarizability polarizability(const Lattice& lat, const LatticeResponse& r, double delta,
                                     const ZeemanField& field) {
  Polarizability p;
  p.q = r.q;
  p.full = invert_response(build_M(r, delta, field).m);
  p.alpha = project_symmetric(p.full, symmetric_mode(lat, r.q));
  return p;
}

inline Polarizability polarizability(const Lattice& lat, const Vec2& q, double delta, const ZeemanField& field,
                                     const LatticeSumOptions& opt = {}) {
  return polarizability(lat, lattice_response(lat, q, opt), delta, field);
}

}  // namespace coopsurface
