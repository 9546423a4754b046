#include <exception>
#include <functional>
#include <iostream>
#include <map>
#include <new>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cli_support.hpp"

using namespace coopsurface;
using cli::Config;
using cli::ConfigError;
using cli::CsvWriter;
using cli::fmt;
using cli::KeySpec;
using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

// Everything a command needs besides its parsed configuration.
struct Job {
  const Config& cfg;
  fs::path dir;
  unsigned threads = 0;
  std::vector<std::string> outputs;

  fs::path file(const std::string& name) {
    outputs.push_back(name);
    return dir / name;
  }
};

struct Command {
  std::string name;
  std::string help;
  std::vector<KeySpec> keys;
  std::function<void(Job&)> run;
};

std::vector<KeySpec> with_common(std::vector<KeySpec> keys, const std::string& name) {
  keys.push_back({"out", "coopsurface-" + name, "output directory"});
  keys.push_back({"threads", "0", "worker cap (0: COOPSURFACE_THREADS or hardware)"});
  return keys;
}

std::vector<KeySpec> lattice_keys(const std::string& lattice) {
  return {{"lattice", lattice, "kind:spacing, kind in square|triangular|honeycomb (honeycomb: nearest-neighbour)"},
          {"tolerance", "0.005", "accepted lattice-sum extrapolation residual (Gamma0)"}};
}

std::vector<KeySpec> field_keys(const std::string& prefix, double bx, double by = 0.0, double bz = 0.0) {
  return {{prefix + "x", fmt(bx), "Zeeman product mu B_x (Gamma0)"},
          {prefix + "y", fmt(by), "Zeeman product mu B_y (Gamma0)"},
          {prefix + "z", fmt(bz), "Zeeman product mu B_z (Gamma0)"}};
}

std::vector<KeySpec> axis_keys(const std::string& prefix, double lo, double hi, int n, const std::string& what) {
  return {{prefix + "_min", fmt(lo), what + " lower bound"},
          {prefix + "_max", fmt(hi), what + " upper bound"},
          {prefix + "_count", std::to_string(n), what + " samples"}};
}

std::vector<KeySpec> array_keys(int n) {
  return {{"n1", std::to_string(n), "cells along a1"},
          {"n2", std::to_string(n), "cells along a2"},
          {"max_unknowns", std::to_string(3 * 71 * 71), "cap on 3N for the dense solver"}};
}

std::vector<KeySpec> grid_keys(int nu, int nv) {
  std::vector<KeySpec> k{{"plane", "xz", "map plane: xz or xy"},
                         {"offset", "0", "y of an xz plane or z of an xy plane (lambda)"}};
  for (auto& s : axis_keys("u", -20, 20, nu, "first map axis (x)")) k.push_back(s);
  for (auto& s : axis_keys("v", -10, 10, nv, "second map axis (z or y)")) k.push_back(s);
  return k;
}

std::vector<KeySpec> fit_keys() {
  return {{"z_sample", "3", "height of the plane-wave fit planes (lambda)"},
          {"window", "0", "side of the square fit window (lambda); 0 means half the array width"}};
}

template <class... Ts>
std::vector<KeySpec> join(std::vector<KeySpec> a, const Ts&... rest) {
  (a.insert(a.end(), rest.begin(), rest.end()), ...);
  return a;
}

// ---------------------------------------------------------------------------
// Shared parsing

LatticeSumOptions sum_options(const Config& c) {
  LatticeSumOptions o;
  o.tolerance = c.num("tolerance");
  if (!(o.tolerance > 0.0)) throw ConfigError("tolerance must be positive");
  return o;
}


BZPath parse_path(const Config& c, const Lattice& lat, const std::string& key, const std::string& samples_key) {
  const auto names = c.words(key);
  if (names.size() < 2) throw ConfigError(key + ": need at least two vertices, e.g. G,X,M,G");
  const long n = c.integer(samples_key, 2, 100000);
  try {
    return bz_path(lat, names, static_cast<int>(n));
  } catch (const Error& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

// Re <u|Omega~(0)|u>_xx on the symmetric sublattice mode (Omega~xx(0) for a Bravais lattice).
double resonance(const Lattice& lat, const LatticeResponse& r0) {
  return project_symmetric(r0.omega, symmetric_mode(lat, Vec2::Zero()))(0, 0).real();
}

double parse_delta(const Config& c, const Lattice& lat, const LatticeResponse* r0) {
  const std::string& s = c.str("delta");
  if (s == "resonance") {
    if (!r0) throw ConfigError("delta: 'resonance' is not available here");
    return resonance(lat, *r0);
  }
  return c.num("delta");
}

GridSpec parse_grid(const Config& c) {
  const ScanAxis u = cli::parse_axis(c, "u", "u"), v = cli::parse_axis(c, "v", "v");
  const double off = c.num("offset");
  const std::string& plane = c.str("plane");
  if (plane == "xz") return GridSpec::xz(u.min, u.max, u.count, v.min, v.max, v.count, off);
  if (plane == "xy") return GridSpec::xy(u.min, u.max, u.count, v.min, v.max, v.count, off);
  throw ConfigError("plane: expected xz or xy, got '" + plane + "'");
}

ReflectivityOptions parse_fit(const Config& c) {
  ReflectivityOptions o;
  o.z_sample = c.num("z_sample");
  o.window = c.num("window");
  if (!(o.z_sample > 0.0)) throw ConfigError("z_sample must be positive");
  if (o.window < 0.0) throw ConfigError("window must be >= 0");
  return o;
}

SolveOptions parse_solve(const Config& c) {
  SolveOptions o;
  o.max_unknowns = static_cast<std::size_t>(c.integer("max_unknowns", 3));
  return o;
}

EmitterSet parse_array(const Config& c, const Lattice& lat, double p = 0.0, std::uint64_t seed = 0) {
  const int n1 = static_cast<int>(c.integer("n1", 1, 10000)), n2 = static_cast<int>(c.integer("n2", 1, 10000));
  return finite_array(lat, n1, n2, p, seed);
}

json field_json(const ZeemanField& f) { return json::array({f.muB.x(), f.muB.y(), f.muB.z()}); }
json axis_json(const ScanAxis& a) {
  json j;
  j["name"] = a.name;
  j["min"] = a.min;
  j["max"] = a.max;
  j["count"] = a.count;
  return j;
}
json cplx_json(cplx z) { return json::array({z.real(), z.imag()}); }

void write_field_csv(const fs::path& path, const FieldMap& fm) {
  CsvWriter w(path, {"x", "y", "z", "re_ex", "im_ex", "re_ey", "im_ey", "re_ez", "im_ez", "i_x", "i_y", "i_z",
                     "masked"});
  for (std::size_t k = 0; k < fm.points.size(); ++k) {
    const Vec3& p = fm.points[k];
    const CVec3& e = fm.field[k];
    const Vec3& i = fm.intensity[k];
    w.row({p.x(), p.y(), p.z(), e(0).real(), e(0).imag(), e(1).real(), e(1).imag(), e(2).real(), e(2).imag(), i.x(),
           i.y(), i.z(), fm.masked[k] ? 1.0 : 0.0});
  }
}

// ---------------------------------------------------------------------------
// Commands

void cmd_bands(Job& job) {
  const Config& c = job.cfg;
  const Lattice lat = cli::parse_lattice(c.str("lattice"));
  const BZPath path = parse_path(c, lat, "path", "samples");
  const ZeemanField f = cli::parse_field(c);
  const double delta = c.num("delta");
  const LatticeSumOptions opt = sum_options(c);

  const auto responses = path_responses(lat, path, opt, job.threads);
  const auto pts = band_structure(responses, path, f);

  CsvWriter bw(job.file("bands.csv"), {"segment", "s", "qx", "qy", "band", "re_e", "decay", "psi_x2", "psi_y2",
                                       "psi_z2", "converged", "residual"});
  int unconverged = 0;
  for (const auto& p : pts) {
    unconverged += p.converged ? 0 : 1;
    for (std::size_t b = 0; b < p.eigenvalues.size(); ++b)
      bw.row({double(p.segment), p.s, p.q.x(), p.q.y(), double(b), p.eigenvalues[b].real(),
              -2.0 * p.eigenvalues[b].imag(), p.content[b].x(), p.content[b].y(), p.content[b].z(),
              p.converged ? 1.0 : 0.0, p.residual});
  }

  CsvWriter pw(job.file("polarizability.csv"), {"segment", "s", "qx", "qy", "re_axx", "im_axx", "re_ayy", "im_ayy",
                                                "re_axy", "im_axy", "re_azz", "im_azz"});
  for (std::size_t i = 0; i < responses.size(); ++i) {
    Tensor3 a;
    try {
      a = polarizability(lat, responses[i], delta, f).alpha;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::SingularResponse) throw;
      a.setConstant(cplx(std::numeric_limits<double>::quiet_NaN(), 0.0));
    }
    pw.row({double(path.segment[i]), path.s[i], path.samples[i].x(), path.samples[i].y(), a(0, 0).real(),
            a(0, 0).imag(), a(1, 1).real(), a(1, 1).imag(), a(0, 1).real(), a(0, 1).imag(), a(2, 2).real(),
            a(2, 2).imag()});
  }

  json meta;
  meta["lattice"] = c.str("lattice");
  meta["bands"] = 3 * lat.basis_size();
  meta["field"] = field_json(f);
  meta["polarizability_delta"] = delta;
  json verts = json::array();
  double s = 0.0;
  for (std::size_t k = 0; k < path.vertices.size(); ++k) {
    if (k > 0) s += (path.vertices[k].q - path.vertices[k - 1].q).norm();
    json v;
    v["name"] = path.vertices[k].name;
    v["q"] = json::array({path.vertices[k].q.x(), path.vertices[k].q.y()});
    v["s"] = s;
    verts.push_back(v);
  }
  meta["vertices"] = verts;
  meta["unconverged_samples"] = unconverged;
  meta["columns"] = "decay = -2 Im E; psi_*2 = polarization content summed over sublattices";
  cli::write_json(job.file("bands.json"), meta);
}

void cmd_polarizer(Job& job) {
  const Config& c = job.cfg;
  const ScanAxis a = cli::parse_axis(c, "a", "a"), d = cli::parse_axis(c, "delta", "delta");
  if (!(a.min > 0.0 && a.max < 1.0)) throw ConfigError("a_min/a_max: spacings must satisfy 0 < a < 1 (lambda)");
  const ZeemanField f = cli::parse_field(c);
  const CVec2 e = cli::parse_polarization(c, "e_in");
  const PolarizerScan scan = polarizer_scan(a, d, f, e, sum_options(c), job.threads);

  CsvWriter w(job.file("visibility.csv"), {"a", "delta", "visibility", "i_x", "i_y"});
  for (std::size_t cell = 0; cell < scan.grid.cell_count(); ++cell) {
    const auto idx = scan.grid.indices(cell);
    w.row({a.value(idx[0]), d.value(idx[1]), scan.grid.at(cell, 0), scan.grid.at(cell, 1), scan.grid.at(cell, 2)});
  }
  CsvWriter r(job.file("ridges.csv"), {"a", "delta", "visibility", "abs_t_xx", "abs_t_yy", "kind"});
  for (const Ridge& rg : scan.ridges)
    r.row_strings({fmt(rg.a), fmt(rg.delta), fmt(rg.visibility), fmt(rg.t_xx), fmt(rg.t_yy),
                   rg.y_polarizer ? "y-polarizer" : "x-polarizer"});

  json meta;
  meta["lattice"] = "square";
  meta["axes"] = json::array({axis_json(a), axis_json(d)});
  meta["field"] = field_json(f);
  meta["e_in"] = json::array({e(0).real(), e(1).real()});
  meta["units"] = "a in lambda, delta in Gamma0";
  meta["visibility"] = "(I_x - I_y) / (I_x + I_y) of the transmitted intensities";
  meta["failed_cells"] = scan.grid.failed_cells();
  json errs = json::array();
  for (std::size_t cell = 0; cell < scan.grid.cell_count() && errs.size() < 20; ++cell)
    if (!scan.grid.cell_errors[cell].empty()) {
      const auto idx = scan.grid.indices(cell);
      json x;
      x["a"] = a.value(idx[0]);
      x["delta"] = d.value(idx[1]);
      x["error"] = scan.grid.cell_errors[cell];
      errs.push_back(x);
    }
  meta["first_errors"] = errs;
  cli::write_json(job.file("scan.json"), meta);
}

void write_phase_grid(const fs::path& path, const ScanGrid& g, const std::vector<std::string>& axis_cols) {
  std::vector<std::string> header = axis_cols;
  for (const auto& f : g.fields) header.push_back(f);
  CsvWriter w(path, header);
  for (std::size_t cell = 0; cell < g.cell_count(); ++cell) {
    const auto idx = g.indices(cell);
    std::vector<double> row;
    for (std::size_t k = 0; k < g.axes.size(); ++k) row.push_back(g.axes[k].value(idx[k]));
    for (std::size_t f = 0; f < g.fields.size(); ++f) row.push_back(g.at(cell, f));
    w.row(row);
  }
}

void cmd_waveplate(Job& job) {
  const Config& c = job.cfg;
  const double a = c.num("a");
  if (!(a > 0.0)) throw ConfigError("a must be positive");
  const Lattice lat = make_square(a);
  const double delta = c.num("delta");
  const CVec2 e = cli::parse_polarization(c, "e_in");
  const ScanAxis ma = cli::parse_axis(c, "a", "map_a"), md = cli::parse_axis(c, "delta", "map_delta");
  if (!(ma.min > 0.0 && ma.max < 1.0)) throw ConfigError("map_a_min/map_a_max: need 0 < a < 1 (lambda)");
  const ZeemanField mf = cli::parse_field(c, "map_muB");
  const ScanAxis bx = cli::parse_axis(c, "mu_bx", "bx"), eps = cli::parse_axis(c, "eps", "eps");
  const double anchor = c.num("anchor");
  const LatticeSumOptions opt = sum_options(c);

  write_phase_grid(job.file("phase_map.csv"), phase_map(ma, md, mf, e, opt, job.threads), {"a", "delta"});
  write_phase_grid(job.file("field_line_x.csv"),
                   field_line_scan(lat, delta, bx, Vec3::Zero(), Vec3::UnitX(), e, opt), {"t"});
  write_phase_grid(job.file("field_line_eps.csv"), waveplate_scan(lat, delta, eps, e, anchor, opt), {"eps"});

  json meta;
  meta["lattice"] = "square";
  meta["a"] = a;
  meta["delta"] = delta;
  meta["e_in"] = json::array({e(0).real(), e(1).real()});
  meta["phase_map"] = {{"axes", json::array({axis_json(ma), axis_json(md)})}, {"field", field_json(mf)}};
  meta["field_line_x"] = {{"axis", axis_json(bx)}, {"field", "muB = (t, 0, 0)"}};
  meta["field_line_eps"] = {{"axis", axis_json(eps)}, {"field", "muB = (eps + anchor, eps, 0)"}, {"anchor", anchor}};
  meta["dphi"] = "arg(out_x) - arg(out_y) wrapped to (-pi, pi]; dphi_unwrapped continues along the last axis";
  cli::write_json(job.file("scan.json"), meta);
}

struct LinearSetup {
  Lattice lat;
  LatticeResponse r0;
  double delta = 0.0;
  DriveSpec drive;
};

LinearSetup linear_setup(const Config& c) {
  LinearSetup s;
  s.lat = cli::parse_lattice(c.str("lattice"));
  const LatticeSumOptions opt = sum_options(c);
  const bool need_r0 = c.str("delta") == "resonance";
  if (need_r0) s.r0 = lattice_response(s.lat, Vec2::Zero(), opt);
  s.delta = parse_delta(c, s.lat, need_r0 ? &s.r0 : nullptr);
  s.drive = DriveSpec::from_incident(cli::parse_polarization(c, "e_in"), s.delta, cli::parse_field(c));
  return s;
}

json reflectivity_json(const Reflectivity& r) {
  json j;
  j["R"] = json::array({r.R.x(), r.R.y()});
  j["T"] = json::array({r.T.x(), r.T.y()});
  j["r_amp"] = json::array({cplx_json(r.r_amp(0)), cplx_json(r.r_amp(1))});
  j["t_amp"] = json::array({cplx_json(r.t_amp(0)), cplx_json(r.t_amp(1))});
  j["window"] = r.window;
  return j;
}

void cmd_fieldmap(Job& job) {
  const Config& c = job.cfg;
  const LinearSetup s = linear_setup(c);
  const GridSpec grid = parse_grid(c);
  const ReflectivityOptions fit = parse_fit(c);
  const SolveOptions sopt = parse_solve(c);
  const EmitterSet set = parse_array(c, s.lat);

  const DipoleState st = solve_linear(set, s.drive, sopt);
  write_field_csv(job.file("field.csv"), field_map(st, s.drive, grid, true, job.threads));

  json meta;
  meta["lattice"] = c.str("lattice");
  meta["emitters"] = st.positions.size();
  meta["delta"] = s.delta;
  meta["field"] = field_json(s.drive.field);
  meta["residual"] = st.residual;
  meta["power_balance_error"] = st.power_balance_error();
  meta["reflectivity"] = reflectivity_json(reflectivity(st, s.drive, fit, job.threads));
  if (s.lat.is_bravais() && s.lat.spacing < 1.0) {
    const LatticeResponse r0 = c.str("delta") == "resonance" ? s.r0 : lattice_response(s.lat, Vec2::Zero(), sum_options(c));
    const JonesMatrix jm = jones(s.lat, r0, s.delta, s.drive.field);
    meta["infinite_array_T"] = json::array({json::array({cplx_json(jm.t(0, 0)), cplx_json(jm.t(0, 1))}),
                                            json::array({cplx_json(jm.t(1, 0)), cplx_json(jm.t(1, 1))})});
  }
  cli::write_json(job.file("summary.json"), meta);
}

json record_json(const ConfigRecord& r) {
  json j;
  j["config"] = r.index;
  j["seed"] = r.seed;
  j["sigma_xy"] = r.sigma_xy;
  j["sigma_z"] = r.sigma_z;
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  j["R"] = json::array({num(r.R.x()), num(r.R.y())});
  j["T"] = json::array({num(r.T.x()), num(r.T.y())});
  j["residual"] = num(r.residual);
  j["power_balance_error"] = num(r.power_balance_error);
  j["error"] = r.error.empty() ? json(nullptr) : json(r.error);
  return j;
}

void cmd_disorder(Job& job) {
  const Config& c = job.cfg;
  const LinearSetup s = linear_setup(c);
  const GridSpec grid = parse_grid(c);
  const ReflectivityOptions fit = parse_fit(c);
  const SolveOptions sopt = parse_solve(c);
  const EmitterSet set = parse_array(c, s.lat);
  DisorderSpec dis;
  dis.sigma_xy = c.num("sigma_xy");
  dis.sigma_z = c.num("sigma_z");
  dis.n_configs = static_cast<int>(c.integer("n_configs", 1, 1000000));
  dis.seed = c.seed();
  try {
    dis.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  const bool bands = c.flag("bands");
  BZPath path;
  int bn = 0;
  if (bands) {
    path = parse_path(c, s.lat, "band_path", "band_samples");
    bn = static_cast<int>(c.integer("band_n", 20, 10000));
  }

  const ThermalEnsemble ens = thermal_ensemble(set, s.drive, dis, grid, fit, sopt, job.threads);
  write_field_csv(job.file("field_mean.csv"), ens.mean);
  {
    std::ofstream out(job.file("configs.ndjson"), std::ios::binary);
    for (const auto& r : ens.records) out << record_json(r).dump() << '\n';
  }
  if (bands) {
    const auto pts = disordered_bands(s.lat, bn, bn, dis, path.samples, job.threads);
    CsvWriter w(job.file("disordered_bands.csv"),
                {"segment", "s", "qx", "qy", "channel", "re_e", "decay", "samples", "excluded"});
    for (std::size_t i = 0; i < pts.size(); ++i)
      for (int a = 0; a < 3; ++a)
        w.row({double(path.segment[i]), path.s[i], pts[i].q.x(), pts[i].q.y(), double(a), pts[i].energy[a].real(),
               -2.0 * pts[i].energy[a].imag(), double(pts[i].samples[a]), double(pts[i].excluded)});
  }
  json meta;
  meta["lattice"] = c.str("lattice");
  meta["emitters"] = set.occupied_count();
  meta["delta"] = s.delta;
  meta["field"] = field_json(s.drive.field);
  meta["configurations"] = dis.n_configs;
  meta["succeeded"] = ens.succeeded;
  meta["field_mean"] = "coherent mean of the complex field; i_* columns are mean intensities";
  if (bands) meta["disordered_bands"] = "harmonic mean over configurations per channel (0 = x, 1 = y, 2 = z)";
  cli::write_json(job.file("summary.json"), meta);
  if (ens.succeeded == 0) throw Error(ErrorKind::SingularResponse, "every configuration failed");
}

void cmd_vacancy(Job& job) {
  const Config& c = job.cfg;
  const LinearSetup s = linear_setup(c);
  const GridSpec grid = parse_grid(c);
  const ReflectivityOptions fit = parse_fit(c);
  const SolveOptions sopt = parse_solve(c);
  const auto ps = c.list("p");
  if (ps.empty()) throw ConfigError("p: need at least one vacancy probability");
  for (double p : ps)
    if (!(p >= 0.0 && p < 0.5)) throw ConfigError("p: every value must lie in [0, 0.5)");
  const std::uint64_t seed = c.seed();
  const int n1 = static_cast<int>(c.integer("n1", 1, 10000)), n2 = static_cast<int>(c.integer("n2", 1, 10000));
  const double zs = c.num("spectrum_z");

  const auto runs = vacancy_runs(s.lat, n1, n2, ps, s.drive, grid, seed, sopt, job.threads);
  std::ofstream nd(job.file("runs.ndjson"), std::ios::binary);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    const std::string name = "field_p" + std::to_string(i) + ".csv";
    write_field_csv(job.file(name), r.map);
    const Reflectivity rf = reflectivity(r.state, s.drive, fit, job.threads);
    json j;
    j["p"] = r.p;
    j["file"] = name;
    j["emitters"] = r.emitters.occupied_count();
    j["vacancies"] = r.emitters.size() - r.emitters.occupied_count();
    j["seed"] = seed;
    j["R"] = json::array({rf.R.x(), rf.R.y()});
    j["T"] = json::array({rf.T.x(), rf.T.y()});
    j["nonzero_order_fraction"] = nonzero_order_fraction(r.state, zs, rf.window, 0.25, job.threads);
    j["spectrum_z"] = zs;
    j["residual"] = r.state.residual;
    j["power_balance_error"] = r.state.power_balance_error();
    nd << j.dump() << '\n';
  }
}

void cmd_nonlinear(Job& job) {
  const Config& c = job.cfg;
  const Lattice lat = cli::parse_lattice(c.str("lattice"));
  if (!lat.is_bravais()) throw ConfigError("lattice: the saturation model needs a Bravais lattice");
  const auto etas = c.list("eta");
  if (etas.empty()) throw ConfigError("eta: need at least one drive strength");
  for (double e : etas)
    if (!(e >= 0.0)) throw ConfigError("eta: drive strengths must be >= 0");
  const LatticeSumOptions opt = sum_options(c);
  const bool realspace = c.flag("realspace"), map = c.flag("map");
  NonlinearOptions nopt;
  nopt.t_max = c.num("t_max");
  nopt.dt = c.num("dt");
  nopt.tolerance = c.num("rk_tolerance");
  if (!(nopt.dt > 0.0 && nopt.dt <= 0.02)) throw ConfigError("dt must lie in (0, 0.02]");
  if (!(nopt.t_max > 0.0)) throw ConfigError("t_max must be positive");
  const ReflectivityOptions fit = parse_fit(c);
  const GridSpec grid = parse_grid(c);
  EmitterSet set;
  if (realspace) set = parse_array(c, lat);

  const LatticeResponse r0 = lattice_response(lat, Vec2::Zero(), opt);
  const double delta = parse_delta(c, lat, &r0);
  CsvWriter w(job.file("nonlinear.csv"),
              {"eta", "mf_re_beta", "mf_im_beta", "mf_beta_z", "mf_R", "mf_T", "mf_roots", "mf_multistable",
               "rs_R_x", "rs_T_x", "rs_converged", "rs_t_final", "rs_bounds_ok", "rs_min_beta_z", "rs_max_beta_z"});
  for (std::size_t i = 0; i < etas.size(); ++i) {
    const double eta = etas[i];
    const MeanFieldResult mf = nonlinear_meanfield(r0, delta, eta);
    std::vector<double> row{eta, mf.beta.real(), mf.beta.imag(), mf.beta_z, mf.R, mf.T, double(mf.roots),
                            mf.multistable ? 1.0 : 0.0};
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (realspace) {
      DriveSpec d;
      d.delta = delta;
      d.eta = CVec2(eta, 0.0);
      const NonlinearRealspaceResult rs = nonlinear_realspace(set, d, nopt, fit, job.threads);
      double lo = 0.0, hi = -1.0;
      if (!rs.state.beta_z.empty()) {
        lo = *std::min_element(rs.state.beta_z.begin(), rs.state.beta_z.end());
        hi = *std::max_element(rs.state.beta_z.begin(), rs.state.beta_z.end());
      }
      row.insert(row.end(), {rs.R_x, rs.T_x, rs.state.converged ? 1.0 : 0.0, rs.t_final, rs.bounds_ok ? 1.0 : 0.0,
                             lo, hi});
      if (map) write_field_csv(job.file("field_eta" + std::to_string(i) + ".csv"), field_map(rs.state, d, grid, true, job.threads));
    } else {
      row.insert(row.end(), {nan, nan, nan, nan, nan, nan, nan});
    }
    w.row(row);
  }
  json meta;
  meta["lattice"] = c.str("lattice");
  meta["delta"] = delta;
  meta["model"] = "two-level x transition; incident field -eta along x";
  meta["gamma_tilde"] = r0.gamma(0, 0).real();
  meta["omega_tilde"] = r0.omega(0, 0).real();
  if (realspace) meta["emitters"] = set.occupied_count();
  cli::write_json(job.file("summary.json"), meta);
}

void cmd_honeycomb(Job& job) {
  const Config& c = job.cfg;
  const double d_nn = c.num("d_nn");
  if (!(d_nn > 0.0)) throw ConfigError("d_nn must be positive");
  const Lattice lat = make_honeycomb(d_nn);
  const double delta = c.num("delta");
  const ZeemanField f = cli::parse_field(c);
  const CVec2 e = cli::parse_polarization(c, "e_in");
  const BZPath path = parse_path(c, lat, "path", "samples");
  const ScanAxis scan = cli::parse_axis(c, "delta", "scan_delta");
  const LatticeSumOptions opt = sum_options(c);

  const auto responses = path_responses(lat, path, opt, job.threads);
  const auto pts = band_structure(responses, path, ZeemanField{});
  CsvWriter bw(job.file("bands.csv"),
               {"segment", "s", "qx", "qy", "band", "re_e", "decay", "psi_x2", "psi_y2", "psi_z2", "converged"});
  for (const auto& p : pts)
    for (std::size_t b = 0; b < p.eigenvalues.size(); ++b)
      bw.row({double(p.segment), p.s, p.q.x(), p.q.y(), double(b), p.eigenvalues[b].real(),
              -2.0 * p.eigenvalues[b].imag(), p.content[b].x(), p.content[b].y(), p.content[b].z(),
              p.converged ? 1.0 : 0.0});

  const LatticeResponse r0 = lattice_response(lat, Vec2::Zero(), opt);
  CsvWriter sw(job.file("jones_scan.csv"), {"delta", "t_xx2", "t_yy2", "t_xy2", "t_yx2", "visibility"});
  for (int i = 0; i < scan.count; ++i) {
    const JonesMatrix j = jones(lat, r0, scan.value(i), f);
    sw.row({scan.value(i), std::norm(j.t(0, 0)), std::norm(j.t(1, 1)), std::norm(j.t(0, 1)), std::norm(j.t(1, 0)),
            visibility(j, e)});
  }
  const JonesMatrix j = jones(lat, r0, delta, f);
  const MatXc xi = sublattice_phase_matrix(lat, Vec2::Zero());
  Eigen::SelfAdjointEigenSolver<MatXc> es(xi);
  json meta;
  meta["d_nn"] = d_nn;
  meta["delta"] = delta;
  meta["field"] = field_json(f);
  meta["T"] = json::array({json::array({cplx_json(j.t(0, 0)), cplx_json(j.t(0, 1))}),
                           json::array({cplx_json(j.t(1, 0)), cplx_json(j.t(1, 1))})});
  meta["t_xx2"] = std::norm(j.t(0, 0));
  meta["t_yy2"] = std::norm(j.t(1, 1));
  meta["visibility"] = visibility(j, e);
  meta["sublattice_phase_eigenvalues"] = json::array({es.eigenvalues()(0), es.eigenvalues()(1)});
  meta["propagating_orders_at_gamma"] = detail::propagating_orders(lat, Vec2::Zero()).size();
  meta["note"] = "T is the zero-order transmission; with more than one open diffraction order it is not unitary";
  cli::write_json(job.file("jones.json"), meta);
}

std::vector<Command> commands() {
  std::vector<Command> cmds;
  cmds.push_back({"bands", "band structure and polarizability along a Brillouin-zone path",
                  with_common(join(lattice_keys("square:0.8"),
                                   std::vector<KeySpec>{{"path", "G,X,M,G", "vertex names"},
                                                        {"samples", "41", "samples per path segment"},
                                                        {"delta", "0", "detuning for the polarizability (Gamma0)"}},
                                   field_keys("muB", 0.0)),
                              "bands"),
                  cmd_bands});
  cmds.push_back({"polarizer", "visibility map over square spacing and detuning",
                  with_common(join(std::vector<KeySpec>{{"tolerance", "0.005", "accepted lattice-sum residual"},
                                                        {"e_in", "1,1", "input polarization Ex,Ey"}},
                                   axis_keys("a", 0.1, 0.95, 201, "spacing (lambda)"),
                                   axis_keys("delta", -5, 5, 201, "detuning (Gamma0)"), field_keys("muB", 3.0)),
                              "polarizer"),
                  cmd_polarizer});
  cmds.push_back({"waveplate", "phase maps and field-line scans",
                  with_common(join(std::vector<KeySpec>{{"tolerance", "0.005", "accepted lattice-sum residual"},
                                                        {"a", "0.6", "square spacing for the field-line scans"},
                                                        {"delta", "1", "detuning for the field-line scans"},
                                                        {"e_in", "1,1", "input polarization Ex,Ey"},
                                                        {"anchor", "-1.75", "mu B_x at eps = 0"}},
                                   axis_keys("map_a", 0.1, 0.95, 101, "phase-map spacing (lambda)"),
                                   axis_keys("map_delta", -5, 5, 101, "phase-map detuning (Gamma0)"),
                                   field_keys("map_muB", 3.0), axis_keys("bx", -5, 5, 401, "mu B_x line"),
                                   axis_keys("eps", -3, 3, 401, "symmetric field line parameter")),
                              "waveplate"),
                  cmd_waveplate});
  const std::vector<KeySpec> linear{{"delta", "resonance", "detuning (Gamma0) or 'resonance'"},
                                    {"e_in", "1,1", "input polarization Ex,Ey"}};
  cmds.push_back({"fieldmap", "finite-array steady state and field map",
                  with_common(join(lattice_keys("square:0.8"), linear, field_keys("muB", 1.0), array_keys(40),
                                   grid_keys(161, 81), fit_keys()),
                              "fieldmap"),
                  cmd_fieldmap});
  cmds.push_back(
      {"disorder", "thermal-disorder ensemble and disorder-averaged bands",
       with_common(join(lattice_keys("square:0.8"), linear, field_keys("muB", 1.0), array_keys(40), grid_keys(81, 41),
                        fit_keys(),
                        std::vector<KeySpec>{{"sigma_xy", "0.1", "in-plane Gaussian width per axis (lambda)"},
                                             {"sigma_z", "0", "out-of-plane Gaussian width (lambda)"},
                                             {"n_configs", "100", "configurations"},
                                             {"seed", "1", "master seed"},
                                             {"bands", "true", "also compute disorder-averaged bands"},
                                             {"band_n", "20", "lattice extent for the band average"},
                                             {"band_path", "G,X,M,G", "band path vertices"},
                                             {"band_samples", "11", "samples per band-path segment"}}),
                   "disorder"),
       cmd_disorder});
  cmds.push_back({"vacancy", "single vacancy configurations per probability",
                  with_common(join(lattice_keys("square:0.8"), linear, field_keys("muB", 1.0), array_keys(40),
                                   grid_keys(161, 81), fit_keys(),
                                   std::vector<KeySpec>{{"p", "0,0.01,0.05,0.1", "vacancy probabilities"},
                                                        {"seed", "1", "vacancy seed"},
                                                        {"spectrum_z", "3", "height of the transverse spectrum"}}),
                              "vacancy"),
                  cmd_vacancy});
  cmds.push_back(
      {"nonlinear", "saturation: mean field and per-emitter real-space solver",
       with_common(join(lattice_keys("square:0.8"), array_keys(31), grid_keys(81, 41), fit_keys(),
                        std::vector<KeySpec>{{"delta", "resonance", "detuning (Gamma0) or 'resonance'"},
                                             {"eta", "0.05,0.25,0.5,1", "drive strengths |eta| (Gamma0)"},
                                             {"realspace", "true", "run the finite-array solver"},
                                             {"map", "true", "write a field map per drive strength"},
                                             {"t_max", "400", "integration time limit (1/Gamma0)"},
                                             {"dt", "0.02", "RK4 step (1/Gamma0)"},
                                             {"rk_tolerance", "1e-8", "stop when the per-step change is below"}}),
                   "nonlinear"),
       cmd_nonlinear});
  cmds.push_back({"honeycomb-demo", "honeycomb bands and polarizer transmission",
                  with_common(join(std::vector<KeySpec>{{"tolerance", "0.005", "accepted lattice-sum residual"},
                                                        {"d_nn", "0.9", "nearest-neighbour spacing (lambda)"},
                                                        {"delta", "-0.18", "detuning (Gamma0)"},
                                                        {"e_in", "1,1", "input polarization Ex,Ey"},
                                                        {"path", "G,M,K,G", "vertex names"},
                                                        {"samples", "31", "samples per path segment"}},
                                   field_keys("muB", 5.0), axis_keys("scan_delta", -3, 3, 301, "detuning scan")),
                              "honeycomb-demo"),
                  cmd_honeycomb});
  return cmds;
}

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::InvalidParameter:
    case ErrorKind::SingularLattice: return 2;
    case ErrorKind::ResourceLimit: return 4;
    default: return 3;
  }
}

}  // namespace

int main(int argc, char** argv) {
  const auto cmds = commands();
  CLI::App app{"Coupled-dipole optics of two-dimensional emitter arrays (lambda = Gamma0 = 1)", "coopsurface"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1, 1);

  struct Bound {
    CLI::App* sub = nullptr;
    std::string config;
    std::map<std::string, std::string> flags;
  };
  std::vector<Bound> bound(cmds.size());
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    Bound& b = bound[i];
    b.sub = app.add_subcommand(cmds[i].name, cmds[i].help);
    b.sub->add_option("--config", b.config, "key = value file; flags override it")->type_name("FILE");
    for (const auto& k : cmds[i].keys)
      b.sub->add_option("--" + k.name, b.flags[k.name], k.help + " [" + k.value + "]")->type_name("VALUE");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  std::size_t which = 0;
  while (!bound[which].sub->parsed()) ++which;
  const Command& cmd = cmds[which];
  Bound& b = bound[which];

  Config cfg(cmd.name, cmd.keys);
  Job* job_ptr = nullptr;
  std::unique_ptr<Job> job;
  try {
    if (!b.config.empty()) cfg.load_file(b.config);
    for (const auto& k : cmd.keys)
      if (b.sub->count("--" + k.name) > 0) cfg.set(k.name, b.flags[k.name], "--" + k.name);
    const long threads = cfg.integer("threads", 0, 4096);
    if (cfg.str("out").empty()) throw ConfigError("out: empty output directory");
    job = std::make_unique<Job>(Job{cfg, fs::path(cfg.str("out")), thread_count(static_cast<unsigned>(threads)), {}});
    std::error_code ec;
    fs::create_directories(job->dir, ec);
    if (ec) throw ConfigError("out: cannot create '" + job->dir.string() + "': " + ec.message());
    job_ptr = job.get();
    cmd.run(*job);
    cli::write_manifest(job->dir, cfg, job->outputs, 0, "ok");
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "coopsurface " << cmd.name << ": config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    const int code = exit_code_for(e);
    std::cerr << "coopsurface " << cmd.name << ": " << e.what() << "\n";
    if (job_ptr && code != 2) {
      try {
        std::vector<std::string> present;
        for (const auto& f : job_ptr->outputs)
          if (fs::exists(job_ptr->dir / f)) present.push_back(f);
        cli::write_manifest(job_ptr->dir, cfg, present, code, e.what());
      } catch (...) {
      }
    }
    return code;
  } catch (const std::bad_alloc&) {
    std::cerr << "coopsurface " << cmd.name << ": out of memory\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "coopsurface " << cmd.name << ": " << e.what() << "\n";
    return 3;
  }
}
