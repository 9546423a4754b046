#pragma once

#include <cmath>

#include "types.hpp"

namespace coopsurface {

// G(R) = iso(R) 1 + dyad(R) R^ R^ for |R| = r > 0.
struct GreenRadial {
  cplx iso;
  cplx dyad;
};

inline GreenRadial green_radial(double r) {
  const double k = kK0;
  const cplx phase = std::exp(kI * (k * r)) / (4.0 * kPi * k * k);
  const double r2 = r * r, r3 = r2 * r;
  return {phase * (k * k / r + kI * k / r2 - 1.0 / r3),
          phase * (-k * k / r - 3.0 * kI * k / r2 + 3.0 / r3)};
}

inline Tensor3 green_real(const Vec3& R) {
  const double r = R.norm();
  require(r > 0.0, ErrorKind::SingularArgument, "green_real at R = 0");
  const GreenRadial g = green_radial(r);
  const Vec3 u = R / r;
  Tensor3 out = g.dyad * (u * u.transpose()).cast<cplx>();
  out.diagonal().array() += g.iso;
  return out;
}

inline Tensor3 green_far(const Vec3& R) {
  const double r = R.norm();
  require(r > 0.0, ErrorKind::SingularArgument, "green_far at R = 0");
  const Vec3 u = R / r;
  const cplx s = std::exp(kI * (kK0 * r)) / (4.0 * kPi * r);
  return s * (Eigen::Matrix3d::Identity() - u * u.transpose()).cast<cplx>();
}

// z-component of the plane-wave vector; evanescent branch i sqrt(q^2 - k0^2).
inline cplx weyl_qz(double q) {
  const double k2 = kK0 * kK0, q2 = q * q;
  require(std::abs(q2 - k2) > 1e-12 * k2, ErrorKind::BranchSingularity, "|q| = k0");
  return q2 < k2 ? cplx(std::sqrt(k2 - q2), 0.0) : cplx(0.0, std::sqrt(q2 - k2));
}

// v(q, Z) = (q_x, q_y, sgn(Z) q_z)
inline CVec3 weyl_vector(const Vec2& q, double z_sign) {
  const cplx qz = weyl_qz(q.norm());
  return CVec3(q.x(), q.y(), (z_sign < 0.0 ? -1.0 : 1.0) * qz);
}

// 1 - v v^T / k0^2 (plain transpose, v may be complex)
inline Tensor3 transverse_projector(const CVec3& v) {
  return Tensor3::Identity() - (v * v.transpose()) / (kK0 * kK0);
}

// Angular-spectrum kernel: G(r_par, Z) = \int d^2q  Gbar(q; Z) e^{i q.r_par}.
inline Tensor3 green_fourier(const Vec2& q, double Z) {
  const CVec3 v = weyl_vector(q, Z);
  const cplx qz = weyl_qz(q.norm());
  return (kI / (8.0 * kPi * kPi)) * std::exp(kI * qz * std::abs(Z)) / qz * transverse_projector(v);
}

struct CouplingBlock {
  Eigen::Matrix3d omega = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d gamma = Eigen::Matrix3d::Zero();

  // Omega - i Gamma / 2, the pair block of the non-Hermitian coupling.
  Tensor3 complex_block() const { return omega.cast<cplx>() - 0.5 * kI * gamma.cast<cplx>(); }
};

// Omega = -(3 pi / k0) Re G, Gamma = (6 pi / k0) Im G. At r = 0 the self shift is
// dropped and Gamma = Gamma0 1.
inline CouplingBlock coupling_pair(const Vec3& r) {
  CouplingBlock c;
  if (r.isZero(0.0)) {
    c.gamma = kGamma0 * Eigen::Matrix3d::Identity();
    return c;
  }
  const Tensor3 g = green_real(r);
  c.omega = -kDipolePrefactor * g.real();
  c.gamma = 2.0 * kDipolePrefactor * g.imag();
  return c;
}

}  // namespace coopsurface
