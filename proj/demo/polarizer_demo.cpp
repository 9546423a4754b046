// Square array as a polarizer: infinite-lattice Jones matrix, then a finite
// 20x20 array driven at the same point for comparison.
#include <complex>
#include <cstdio>

#include <coopsurface/coopsurface.hpp>

using namespace coopsurface;

int main() {
  const Lattice lat = make_square(0.8);
  const LatticeResponse r0 = lattice_response(lat, Vec2::Zero());
  const double delta = r0.omega(0, 0).real();
  const ZeemanField field(10.0, 0.0, 0.0);

  const JonesMatrix j = jones(lat, r0, delta, field);
  std::printf("a = 0.8 lambda, mu B_x = 10, delta = Omega~xx(0) = %.6f\n", delta);
  std::printf("|T_xx|^2 = %.3e  |T_yy|^2 = %.6f\n", std::norm(j.t(0, 0)), std::norm(j.t(1, 1)));
  const CVec2 diag(1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0));
  std::printf("visibility for diagonal input = %.6f\n", visibility(j, diag));

  const EmitterSet set = finite_array(lat, 20, 20);
  const DriveSpec drive = DriveSpec::from_incident(diag, delta, field);
  const DipoleState st = solve_linear(set, drive);
  const Reflectivity rf = reflectivity(st, drive);
  std::printf("20x20 array: R = (%.4f, %.4f)  T = (%.4f, %.4f)  residual = %.1e\n", rf.R.x(), rf.R.y(), rf.T.x(),
              rf.T.y(), st.residual);
  return 0;
}
