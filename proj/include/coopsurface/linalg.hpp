#pragma once

#include <complex>
#include <string>
#include <vector>

#define lapack_complex_float std::complex<float>
#define lapack_complex_double std::complex<double>
#include <lapacke.h>

#include "types.hpp"

namespace coopsurface {

// Dense LU solve A x = b (LAPACK zgesv). A is consumed.
inline VecXc solve_dense(MatXc a, const VecXc& b) {
  const lapack_int n = static_cast<lapack_int>(a.rows());
  require(a.cols() == a.rows() && b.size() == a.rows(), ErrorKind::InvalidParameter,
          "solve_dense: dimension mismatch");
  if (n == 0) return VecXc();
  VecXc x = b;
  std::vector<lapack_int> ipiv(static_cast<std::size_t>(n));
  lapack_int info = LAPACKE_zgesv(LAPACK_COL_MAJOR, n, 1, a.data(), n, ipiv.data(), x.data(), n);
  require(info >= 0, ErrorKind::InvalidParameter, "zgesv: illegal argument " + std::to_string(-info));
  require(info == 0, ErrorKind::SingularResponse,
          "coupled-dipole matrix is singular (zero pivot " + std::to_string(info) + ")");
  return x;
}

}  // namespace coopsurface
