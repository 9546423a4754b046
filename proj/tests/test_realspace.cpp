#include <gtest/gtest.h>

#include <random>

#include <coopsurface/realspace.hpp>

#include "oracles.hpp"

using namespace coopsurface;

namespace {

const Lattice& sq08() {
  static const Lattice lat = make_square(0.8);
  return lat;
}
const LatticeResponse& r08() {
  static const LatticeResponse r = lattice_response(sq08(), Vec2::Zero());
  return r;
}
double omega_xx() { return r08().omega(0, 0).real(); }

void expect_balanced(const DipoleState& st) {
  EXPECT_LT(st.residual, 1e-10);
  EXPECT_LT(st.power_balance_error(), 1e-6);
}

// Independent dense assembly from the textbook Green tensor, solved with Eigen.
std::vector<CVec3> oracle_solve(const std::vector<Vec3>& pos, double delta, const CVec3& eta, const Vec3& muB) {
  const std::size_t n = pos.size();
  Eigen::MatrixXcd m = Eigen::MatrixXcd::Zero(3 * n, 3 * n);
  Eigen::VectorXcd rhs(3 * n);
  Eigen::Matrix3cd mb = Eigen::Matrix3cd::Zero();
  // -i eps_{a b c} muB_c in the (a, b) slot
  mb(0, 1) = -kI * muB.z();
  mb(1, 0) = kI * muB.z();
  mb(1, 2) = -kI * muB.x();
  mb(2, 1) = kI * muB.x();
  mb(2, 0) = -kI * muB.y();
  mb(0, 2) = kI * muB.y();
  for (std::size_t i = 0; i < n; ++i) {
    m.block<3, 3>(3 * i, 3 * i) = mb;
    m.block<3, 3>(3 * i, 3 * i).diagonal().array() += -delta - 0.5 * kI;
    rhs.segment<3>(3 * i) = -eta * std::exp(kI * (kK0 * pos[i].z()));
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const oracle::M3 g = oracle::green(pos[i] - pos[j]);
      m.block<3, 3>(3 * i, 3 * j) = -1.5 * g.real().cast<cplx>() - 0.5 * kI * (3.0 * g.imag()).cast<cplx>();
    }
  }
  const Eigen::VectorXcd x = m.partialPivLu().solve(rhs);
  std::vector<CVec3> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.segment<3>(3 * i);
  return out;
}

}  // namespace

TEST(Realspace, SingleEmitter) {
  DriveSpec d;
  d.eta = CVec2(0.3, 0.0);
  const DipoleState st = solve_linear(std::vector<Vec3>{Vec3::Zero()}, d);
  EXPECT_LT(std::abs(st.beta[0](0) - cplx(0, -2.0 * 0.3)), 1e-14);
  EXPECT_EQ(st.beta[0](1), 0.0);
  expect_balanced(st);
}

TEST(Realspace, MatchesIndependentAssembly) {
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  std::vector<Vec3> pos;
  for (int i = 0; i < 12; ++i) pos.emplace_back(u(rng), u(rng), 0.3 * u(rng));
  DriveSpec d;
  d.delta = 0.4;
  d.eta = CVec2(0.7, cplx(0.1, -0.2));
  d.field = ZeemanField(0.5, -1.0, 0.8);
  const DipoleState st = solve_linear(pos, d);
  const auto ref = oracle_solve(pos, d.delta, CVec3(d.eta(0), d.eta(1), 0.0), d.field.muB);
  for (std::size_t i = 0; i < pos.size(); ++i) EXPECT_LT((st.beta[i] - ref[i]).norm(), 1e-10 * (1 + ref[i].norm()));
  expect_balanced(st);
}

TEST(Realspace, ResourceLimit) {
  SolveOptions o;
  o.max_unknowns = 3 * 99;
  DriveSpec d;
  d.eta = CVec2(1, 0);
  try {
    solve_linear(finite_array(sq08(), 10, 10), d, o);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ResourceLimit);
  }
}

TEST(Realspace, MirrorSymmetricResponse) {
  const EmitterSet set = finite_array(sq08(), 9, 9);
  const DriveSpec d = DriveSpec::from_incident(CVec2(1, 0), 0.1, ZeemanField{});
  const DipoleState st = solve_linear(set, d);
  expect_balanced(st);
  // under x -> -x an x drive keeps beta_x even and beta_y odd
  for (std::size_t i = 0; i < st.positions.size(); ++i) {
    const Vec3 m(-st.positions[i].x(), st.positions[i].y(), 0.0);
    std::size_t j = 0;
    while ((st.positions[j] - m).norm() > 1e-9) ++j;
    EXPECT_LT(std::abs(st.beta[i](0) - st.beta[j](0)), 1e-10);
    EXPECT_LT(std::abs(st.beta[i](1) + st.beta[j](1)), 1e-10);
  }
}

TEST(Realspace, ConvergesToInfiniteLattice) {
  const Vec3 muB(1, 0, 0);
  const DriveSpec d = DriveSpec::from_incident(CVec2(1, 0), omega_xx(), ZeemanField(muB));
  const Eigen::Vector3cd ref = -invert_response(build_M(r08(), d.delta, d.field).m) * Eigen::Vector3cd(d.eta(0), 0, 0);
  double prev = 1e9;
  for (int n : {10, 20}) {
    const DipoleState st = solve_linear(finite_array(sq08(), n, n), d);
    expect_balanced(st);
    double best = 1e9;
    std::size_t c = 0;
    for (std::size_t i = 0; i < st.positions.size(); ++i)
      if (st.positions[i].norm() < best) best = st.positions[i].norm(), c = i;
    const double err = std::abs(st.beta[c](0) - ref(0)) / std::abs(ref(0));
    EXPECT_LT(err, prev);
    prev = err;
  }
  EXPECT_LT(prev, 0.05);
}

TEST(Realspace, FieldMapWithoutEmitters) {
  const DriveSpec d = DriveSpec::from_incident(CVec2(1, cplx(0, 1)), 0.0);
  const FieldMap fm = field_map(DipoleState{}, d, GridSpec::xz(-1, 1, 5, -2, 2, 7), true, 2);
  for (std::size_t k = 0; k < fm.points.size(); ++k) {
    const cplx ph = std::exp(kI * (kK0 * fm.points[k].z()));
    EXPECT_LT(std::abs(fm.field[k](0) - ph), 1e-14);
    EXPECT_LT(std::abs(fm.field[k](1) - kI * ph), 1e-14);
    EXPECT_EQ(fm.field[k](2), 0.0);
    EXPECT_FALSE(fm.masked[k]);
  }
}

TEST(Realspace, FieldMapMasksEmitters) {
  const std::vector<Vec3> pos{Vec3::Zero()};
  DriveSpec d;
  d.eta = CVec2(1, 0);
  const DipoleState st = solve_linear(pos, d);
  const FieldMap fm = field_map(st, d, GridSpec::xz(-0.5, 0.5, 3, -0.5, 0.5, 3));
  EXPECT_TRUE(fm.masked[4]);
  EXPECT_TRUE(std::isnan(fm.intensity[4].x()));
  EXPECT_FALSE(fm.masked[0]);
  // far field of a single dipole along x vs the textbook tensor
  bool near = false;
  const Vec3 r(0.3, 0.2, 4.0);
  const CVec3 e = detail::dipole_field(pos, st.beta, r, kFieldMask, near);
  const CVec3 ref = 1.5 * oracle::green(r) * st.beta[0];
  EXPECT_LT((e - ref).norm(), 1e-12 * ref.norm());
}

TEST(Realspace, ReflectivityLimits) {
  const EmitterSet set = finite_array(sq08(), 20, 20);
  const DriveSpec on = DriveSpec::from_incident(CVec2(1, 0), omega_xx(), ZeemanField(1, 0, 0));
  const DipoleState st = solve_linear(set, on);
  const Reflectivity rf = reflectivity(st, on);
  EXPECT_GT(rf.R(0), 0.95);
  EXPECT_LT(rf.T(0), 0.05);
  EXPECT_NEAR(rf.R(0) + rf.T(0), 1.0, 0.05);
  EXPECT_TRUE(std::isnan(rf.R(1)));

  const DriveSpec off = DriveSpec::from_incident(CVec2(1, 0), 50.0, ZeemanField(1, 0, 0));
  const Reflectivity ro = reflectivity(solve_linear(set, off), off);
  EXPECT_LT(ro.R(0), 0.01);
  EXPECT_NEAR(ro.T(0), 1.0, 0.02);

  ReflectivityOptions too_wide;
  too_wide.window = 100.0;
  try {
    reflectivity(st, on, too_wide);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidParameter);
  }
}

TEST(Realspace, ObliqueDrivePowerBalance) {
  DriveSpec d = DriveSpec::from_incident(CVec2(1, 0.5), 0.2, ZeemanField(0.3, 0, 0.4), Vec2(1.5, -0.7));
  const DipoleState st = solve_linear(finite_array(sq08(), 8, 8), d);
  expect_balanced(st);
  EXPECT_THROW(reflectivity(st, d), Error);
  d.k_par = Vec2(7.0, 0.0);
  EXPECT_THROW(solve_linear(finite_array(sq08(), 2, 2), d), Error);
}

TEST(Realspace, DisorderDeterminismAndZeroWidth) {
  const EmitterSet set = finite_array(sq08(), 8, 8);
  const DriveSpec d = DriveSpec::from_incident(CVec2(1, 0), omega_xx(), ZeemanField(1, 0, 0));
  const GridSpec g = GridSpec::xz(-3, 3, 7, -3, 3, 7, 0.1);
  DisorderSpec zero;
  zero.n_configs = 2;
  const ThermalEnsemble e0 = thermal_ensemble(set, d, zero, g);
  const FieldMap direct = field_map(solve_linear(set, d), d, g);
  for (std::size_t k = 0; k < g.size(); ++k)
    if (!direct.masked[k]) EXPECT_LT((e0.mean.field[k] - direct.field[k]).norm(), 1e-12);

  DisorderSpec dis;
  dis.sigma_xy = 0.1;
  dis.sigma_z = 0.05;
  dis.n_configs = 3;
  dis.seed = 99;
  const ThermalEnsemble a = thermal_ensemble(set, d, dis, g);
  const ThermalEnsemble b = thermal_ensemble(set, d, dis, g, {}, {}, 3);
  ASSERT_EQ(a.records.size(), 3u);
  EXPECT_EQ(a.succeeded, 3);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(a.records[c].seed, b.records[c].seed);
    EXPECT_EQ(a.records[c].R(0), b.records[c].R(0));
    EXPECT_LT(a.records[c].power_balance_error, 1e-6);
    EXPECT_LT(a.records[c].residual, 1e-10);
  }
  for (std::size_t k = 0; k < g.size(); ++k)
    if (!a.mean.masked[k]) EXPECT_EQ(a.mean.intensity[k], b.mean.intensity[k]);
  EXPECT_NE(a.records[0].seed, a.records[1].seed);
  const auto p0 = displaced_positions(set.positions, dis, 0);
  const auto p0b = displaced_positions(set.positions, dis, 0);
  EXPECT_EQ(p0, p0b);
}

TEST(Realspace, DisorderReducesReflectivity) {
  const EmitterSet set = finite_array(sq08(), 14, 14);
  const DriveSpec d = DriveSpec::from_incident(CVec2(1, 0), omega_xx(), ZeemanField(1, 0, 0));
  const GridSpec g = GridSpec::xz(0, 0, 1, 1, 1, 1);
  auto mean_r = [&](double s) {
    DisorderSpec dis;
    dis.sigma_xy = s;
    dis.n_configs = 4;
    dis.seed = 5;
    const ThermalEnsemble e = thermal_ensemble(set, d, dis, g);
    double r = 0;
    for (const auto& rec : e.records) r += rec.R(0);
    return r / e.records.size();
  };
  EXPECT_GT(mean_r(0.0), mean_r(0.15));
}

TEST(Realspace, DisorderedBandsCleanLimit) {
  const std::vector<Vec2> qs{Vec2::Zero(), Vec2(0.5, 0.0)};
  DisorderSpec clean;
  const auto pts = disordered_bands(sq08(), 20, 20, clean, qs, 2);
  // x and y channels at Gamma approach the infinite-lattice eigenvalue
  const cplx ex = r08().omega(0, 0) - 0.5 * kI * r08().gamma(0, 0);
  EXPECT_LT(std::abs(pts[0].energy[0] - pts[0].energy[1]), 1e-10);
  EXPECT_LT(std::abs(pts[0].energy[0].real() - ex.real()), 0.15);
  EXPECT_LT(std::abs(pts[0].energy[0].imag() - ex.imag()), 0.1);
  EXPECT_EQ(pts[0].samples[0], 1);
  EXPECT_THROW(disordered_bands(sq08(), 10, 10, clean, qs), Error);
}

TEST(Realspace, DisorderedBandsTrends) {
  const std::vector<Vec2> qs{Vec2::Zero()};
  auto at = [&](double sxy, double sz) {
    DisorderSpec d;
    d.sigma_xy = sxy;
    d.sigma_z = sz;
    d.n_configs = 6;
    d.seed = 11;
    return disordered_bands(sq08(), 20, 20, d, qs, 4)[0];
  };
  const auto p0 = at(0.0, 0.0), p1 = at(0.1, 0.0), p2 = at(0.15, 0.0);
  EXPECT_LT(-2 * p0.energy[0].imag(), -2 * p1.energy[0].imag());
  EXPECT_LT(-2 * p1.energy[0].imag(), -2 * p2.energy[0].imag());
  const auto pz = at(0.0, 0.1);
  EXPECT_LT(pz.energy[0].real(), p0.energy[0].real());
}

TEST(Realspace, VacancyRuns) {
  const DriveSpec d = DriveSpec::from_incident(CVec2(1, 0), omega_xx(), ZeemanField(1, 0, 0));
  const GridSpec g = GridSpec::xz(-2, 2, 5, -2, 2, 5, 0.1);
  const auto a = vacancy_runs(sq08(), 12, 12, {0.0, 0.1}, d, g, 7);
  const auto b = vacancy_runs(sq08(), 12, 12, {0.0, 0.1}, d, g, 7);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].emitters.occupied_count(), 144u);
  EXPECT_LT(a[1].emitters.occupied_count(), 144u);
  for (std::size_t k = 0; k < g.size(); ++k) EXPECT_EQ(a[1].map.intensity[k], b[1].map.intensity[k]);
  for (const auto& r : a) expect_balanced(r.state);
  const double f0 = nonzero_order_fraction(a[0].state, 3.0, 4.0);
  const double f1 = nonzero_order_fraction(a[1].state, 3.0, 4.0);
  EXPECT_LT(f0, f1);
  EXPECT_THROW(vacancy_runs(sq08(), 4, 4, {0.6}, d, g, 1), Error);
}

TEST(Realspace, NonlinearSingleClosedForm) {
  const auto s = nonlinear_single(0.0, 0.5);
  EXPECT_NEAR(s.beta_z, -1.0 / 3.0, 1e-15);
  EXPECT_LT(std::abs(s.beta - cplx(0, -1.0 / 3.0)), 1e-15);
  // steady state of the single-emitter equations
  for (double delta : {-1.3, 0.0, 0.4}) {
    for (double eta : {0.05, 0.5, 2.0}) {
      const auto t = nonlinear_single(delta, eta);
      const cplx db = -(0.5 - kI * delta) * t.beta + kI * t.beta_z * eta;
      const double dz = -(t.beta_z + 1.0) - 4.0 * eta * t.beta.imag();
      EXPECT_LT(std::abs(db), 1e-14);
      EXPECT_LT(std::abs(dz), 1e-14);
      EXPECT_GE(t.beta_z, -1.0);
      EXPECT_LE(t.beta_z, 0.0);
    }
  }
  // weak drive: the linear response and its Kerr correction
  const double delta = 0.7, eta = 0.05, l = 0.25 + delta * delta;
  const cplx lin = -kI * eta / (0.5 - kI * delta);
  const auto w = nonlinear_single(delta, eta);
  EXPECT_LT(std::abs(w.beta - (1.0 - 2.0 * eta * eta / l) * lin), 10 * std::pow(eta, 5) / (l * l));
  EXPECT_LT(std::abs(nonlinear_single(delta, 1e-7).beta / 1e-7 - lin / eta), 1e-10);
  EXPECT_THROW(nonlinear_single(0.0, -1.0), Error);
}

TEST(Realspace, MeanFieldLimitsAndMonotonicity) {
  const double d = omega_xx();
  const cplx m = -d + r08().omega(0, 0) - 0.5 * kI * r08().gamma(0, 0);
  const cplx r = kI * 0.5 * r08().gamma(0, 0) / m;
  const auto lin = nonlinear_meanfield(r08(), d, 0.0);
  EXPECT_NEAR(lin.R, std::norm(r), 1e-12);
  const auto tiny = nonlinear_meanfield(r08(), d, 1e-6);
  EXPECT_NEAR(tiny.R, lin.R, 1e-6);
  EXPECT_NEAR(lin.R, 1.0, 1e-9);
  double prev = 2.0;
  for (int k = 0; k <= 19; ++k) {
    const double eta = 0.05 + 0.05 * k;
    const auto mf = nonlinear_meanfield(r08(), d, eta);
    EXPECT_LT(mf.R, prev) << eta;
    EXPECT_GE(mf.beta_z, -1.0);
    EXPECT_LE(mf.beta_z, 0.0);
    prev = mf.R;
  }
}

TEST(Realspace, NonlinearRealspaceWeakDrive) {
  const EmitterSet set = finite_array(sq08(), 11, 11);
  DriveSpec d;
  d.delta = omega_xx();
  d.eta = CVec2(0.002, 0.0);
  NonlinearOptions o;
  o.tolerance = 1e-11;
  const auto nl = nonlinear_realspace(set, d, o);
  EXPECT_TRUE(nl.state.converged);
  EXPECT_TRUE(nl.bounds_ok);
  // compare against the x-only linear solve
  const std::size_t n = set.positions.size();
  Eigen::MatrixXcd m = Eigen::MatrixXcd::Zero(n, n);
  Eigen::VectorXcd rhs(n);
  for (std::size_t i = 0; i < n; ++i) {
    m(i, i) = -d.delta - 0.5 * kI;
    rhs(i) = -d.eta(0);
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) m(i, j) = coupling_pair(set.positions[i] - set.positions[j]).complex_block()(0, 0);
  }
  const Eigen::VectorXcd lin = m.partialPivLu().solve(rhs);
  double worst = 0;
  for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(nl.state.beta[i](0) - lin(i)) / std::abs(lin(i)));
  EXPECT_LT(worst, 0.02);
  EXPECT_THROW(nonlinear_realspace(set, d, NonlinearOptions{400, 0.05, 1e-8}), Error);
}
