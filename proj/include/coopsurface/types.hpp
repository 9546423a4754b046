#pragma once

#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace coopsurface {

inline constexpr std::string_view kVersion = "0.1.0";

using cplx = std::complex<double>;
using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using CVec2 = Eigen::Vector2cd;
using CVec3 = Eigen::Vector3cd;
using Tensor3 = Eigen::Matrix3cd;
using Mat2c = Eigen::Matrix2cd;
using MatXc = Eigen::MatrixXcd;
using VecXc = Eigen::VectorXcd;

// Natural units: lambda = 1, Gamma0 = 1.
inline constexpr double kPi = std::numbers::pi;
inline constexpr double kWavelength = 1.0;
inline constexpr double kGamma0 = 1.0;
inline constexpr double kK0 = 2.0 * kPi / kWavelength;
// mu0 omega0^2 d^2 = 3 pi Gamma0 / k0
inline constexpr double kDipolePrefactor = 3.0 * kPi * kGamma0 / kK0;
inline constexpr cplx kI{0.0, 1.0};

enum class ErrorKind {
  InvalidParameter,
  SingularLattice,
  SingularArgument,
  BranchSingularity,
  OutsideLightCone,
  ConvergenceFailure,
  SingularResponse,
  ResourceLimit,
  UndefinedVisibility,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidParameter: return "invalid-parameter";
    case ErrorKind::SingularLattice: return "singular-lattice";
    case ErrorKind::SingularArgument: return "singular-argument";
    case ErrorKind::BranchSingularity: return "branch-singularity";
    case ErrorKind::OutsideLightCone: return "outside-light-cone";
    case ErrorKind::ConvergenceFailure: return "convergence-failure";
    case ErrorKind::SingularResponse: return "singular-response";
    case ErrorKind::ResourceLimit: return "resource-limit";
    case ErrorKind::UndefinedVisibility: return "undefined-visibility";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool ok, ErrorKind kind, const std::string& what) {
  if (!ok) throw Error(kind, what);
}

// Products mu_alpha B_alpha in units of Gamma0 (isotropic moment).
struct ZeemanField {
  Vec3 muB = Vec3::Zero();

  ZeemanField() = default;
  explicit ZeemanField(const Vec3& v) : muB(v) {}
  ZeemanField(double bx, double by, double bz) : muB(bx, by, bz) {}
  bool is_zero() const { return muB.isZero(0.0); }
};

}  // namespace coopsurface
