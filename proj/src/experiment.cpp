#include "physs/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <regex>
#include <sstream>

#include "json.hpp"

namespace physs::experiment {
namespace fs = std::filesystem;
using json = nlohmann::json;
using infer::Point;

namespace {

std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> out(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = n == 1 ? a : a + (b - a) * i / (n - 1);
  return out;
}

GridData series(const std::vector<double>& times, Index outputs) {
  GridData g;
  g.times = times;
  g.spatial_locations = Matrix(1, 0);
  g.outputs = outputs;
  g.values.assign(times.size() * static_cast<std::size_t>(outputs), 0.0);
  g.mask.assign(g.values.size(), 0);
  return g;
}

std::string format17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- simulators

std::vector<double> pendulum_trajectory(const PendulumParams& p, const std::vector<double>& times,
                                        std::vector<double>* velocity) {
  if (!(p.step > 0.0)) throw Error(ErrorCode::InvalidArgument, "pendulum step must be positive");
  std::vector<double> out;
  out.reserve(times.size());
  if (velocity) velocity->clear();
  double theta = p.theta0, omega = p.omega0;
  long done = 0;
  for (double t : times) {
    const long target = std::lround(t / p.step);
    if (target < done) throw Error(ErrorCode::InvalidArgument, "pendulum times must be increasing");
    for (; done < target; ++done) {
      omega += p.step * (-std::sin(theta) - p.damping * omega);
      theta += p.step * omega;
    }
    out.push_back(theta);
    if (velocity) velocity->push_back(omega);
  }
  return out;
}

SplitData simulate_pendulum(const PendulumParams& p) {
  if (p.n_train < 1 || p.n_test < 1) throw Error(ErrorCode::Config, "pendulum needs train and test points");
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(p.noise_var));
  SplitData d;
  const auto tr = linspace(p.train_start, p.train_end, p.n_train);
  const auto te = linspace(p.test_start, p.test_end, p.n_test);
  d.train = series(tr, 1);
  d.test = series(te, 1);
  const auto ytr = pendulum_trajectory(p, tr);
  const auto yte = pendulum_trajectory(p, te);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    d.train.values[i] = ytr[i] + (p.noise_var > 0.0 ? normal(rng) : 0.0);
    d.train.mask[i] = 1;
  }
  for (std::size_t i = 0; i < te.size(); ++i) {
    d.test.values[i] = yte[i];
    d.test.mask[i] = 1;
  }
  return d;
}

double dipole_potential(const std::array<double, 3>& r, const std::array<double, 3>& m) {
  const double rho = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
  if (rho < 1e-6) throw Error(ErrorCode::SingularPoint, "dipole evaluated at the origin");
  return (m[0] * r[0] + m[1] * r[1] + m[2] * r[2]) / (rho * rho * rho);
}

std::array<double, 2> dipole_field(double t, double s, const DipoleParams& p) {
  const std::array<double, 3> r{t, s, p.z};
  const double rho2 = t * t + s * s + p.z * p.z;
  const double rho = std::sqrt(rho2);
  if (rho < 1e-6) throw Error(ErrorCode::SingularPoint, "dipole grid node at the origin");
  const double rho3 = rho2 * rho, rho5 = rho3 * rho2;
  const auto& m = p.moment;
  const double mr = m[0] * r[0] + m[1] * r[1] + m[2] * r[2];
  // -grad(m.r / rho^3) = -m / rho^3 + 3 (m.r) r / rho^5
  return {-m[0] / rho3 + 3.0 * mr * r[0] / rho5, -m[1] / rho3 + 3.0 * mr * r[1] / rho5};
}

SplitData simulate_dipole(const DipoleParams& p) {
  if (p.n_t < 2 || p.n_s < 2) throw Error(ErrorCode::Config, "dipole grid needs at least 2 nodes per axis");
  if (!(p.train_fraction > 0.0 && p.train_fraction < 1.0))
    throw Error(ErrorCode::Config, "train_fraction must lie in (0, 1)");
  GridData g;
  g.times = linspace(p.lo, p.hi, p.n_t);
  const auto s = linspace(p.lo, p.hi, p.n_s);
  g.spatial_locations = Eigen::Map<const Vector>(s.data(), p.n_s);
  g.outputs = 2;
  g.values.assign(static_cast<std::size_t>(p.n_t * p.n_s * 2), 0.0);
  g.mask.assign(g.values.size(), 1);
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(std::max(p.noise_var, 0.0)));
  for (Index i = 0; i < p.n_t; ++i)
    for (Index j = 0; j < p.n_s; ++j) {
      const auto h = dipole_field(g.times[static_cast<std::size_t>(i)], s[static_cast<std::size_t>(j)], p);
      g.values[static_cast<std::size_t>(g.flat(i, j, 0))] = h[0];
      g.values[static_cast<std::size_t>(g.flat(i, j, 1))] = h[1];
    }
  std::vector<Index> nodes(static_cast<std::size_t>(p.n_t * p.n_s));
  for (std::size_t k = 0; k < nodes.size(); ++k) nodes[k] = static_cast<Index>(k);
  std::shuffle(nodes.begin(), nodes.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::lround(p.train_fraction * static_cast<double>(nodes.size())));
  SplitData d{g, g};
  std::fill(d.train.mask.begin(), d.train.mask.end(), 0);
  std::fill(d.test.mask.begin(), d.test.mask.end(), 0);
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    GridData& dst = k < n_train ? d.train : d.test;
    for (Index o = 0; o < 2; ++o) {
      const auto f = static_cast<std::size_t>(nodes[k] * 2 + o);
      dst.mask[f] = 1;
      if (k < n_train && p.noise_var > 0.0) dst.values[f] += normal(rng);
    }
  }
  return d;
}

SplitData simulate_latent_force(const LatentForceParams& p) {
  PendulumParams pp;
  pp.damping = 0.0;
  pp.theta0 = p.theta0;
  pp.omega0 = p.omega0;
  pp.step = p.step;
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(std::max(p.noise_var, 0.0)));
  SplitData d;
  const auto tr = linspace(0.0, p.end, p.n_train);
  const auto te = linspace(0.0, p.end, p.n_test);
  d.train = series(tr, 2);
  d.test = series(te, 2);
  const auto ytr = pendulum_trajectory(pp, tr);
  const auto yte = pendulum_trajectory(pp, te);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    d.train.values[2 * i] = ytr[i] + (p.noise_var > 0.0 ? normal(rng) : 0.0);
    d.train.mask[2 * i] = 1;
  }
  for (std::size_t i = 0; i < te.size(); ++i) {
    d.test.values[2 * i] = yte[i];
    d.test.values[2 * i + 1] = std::sin(yte[i]);
    d.test.mask[2 * i] = d.test.mask[2 * i + 1] = 1;
  }
  return d;
}

double monotonic_truth(double t) { return 2.0 / (1.0 + std::exp(-2.0 * (t - 5.0))) + 0.05 * t; }

SplitData simulate_monotonic(const MonotonicParams& p) {
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(std::max(p.noise_var, 0.0)));
  SplitData d;
  const auto tr = linspace(p.start, p.end, p.n_train);
  const auto te = linspace(p.start, p.end, p.n_test);
  d.train = series(tr, 1);
  d.test = series(te, 1);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    d.train.values[i] = monotonic_truth(tr[i]) + (p.noise_var > 0.0 ? normal(rng) : 0.0);
    d.train.mask[i] = 1;
  }
  for (std::size_t i = 0; i < te.size(); ++i) {
    d.test.values[i] = monotonic_truth(te[i]);
    d.test.mask[i] = 1;
  }
  return d;
}

// ---------------------------------------------------------------- csv

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  for (auto& f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

bool parse_number(const std::string& s, double& v) {
  if (s.empty()) return false;
  char* end = nullptr;
  v = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

}  // namespace

GridData load_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || split_fields(line).front().empty())
    throw Error(ErrorCode::MalformedRow, path.string() + ":1: missing header");
  const auto header = split_fields(line);
  if (header.front() != "t") throw Error(ErrorCode::MalformedRow, path.string() + ":1: first column must be t");
  static const std::regex spatial_name("^[sx][0-9]*$");
  std::size_t S = 0;
  while (1 + S < header.size() && std::regex_match(header[1 + S], spatial_name)) ++S;
  std::vector<std::size_t> out_cols;
  std::optional<std::size_t> mask_col;
  for (std::size_t c = 1 + S; c < header.size(); ++c) {
    if (header[c] == "mask") mask_col = c;
    else out_cols.push_back(c);
  }
  if (out_cols.empty()) throw Error(ErrorCode::MalformedRow, path.string() + ":1: no output columns");
  const Index P = static_cast<Index>(out_cols.size());

  struct Row {
    double t;
    std::vector<double> x;
    std::vector<double> y;
    std::vector<std::uint8_t> m;
  };
  std::vector<Row> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_fields(line);
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (f.size() != header.size())
      throw Error(ErrorCode::MalformedRow, where + ": expected " + std::to_string(header.size()) + " fields");
    Row r;
    if (!parse_number(f[0], r.t) || !std::isfinite(r.t)) throw Error(ErrorCode::MalformedRow, where + ": bad time");
    for (std::size_t j = 0; j < S; ++j) {
      double v;
      if (!parse_number(f[1 + j], v) || !std::isfinite(v))
        throw Error(ErrorCode::MalformedRow, where + ": bad spatial coordinate");
      r.x.push_back(v);
    }
    bool row_on = true;
    if (mask_col) {
      double v;
      if (!parse_number(f[*mask_col], v)) throw Error(ErrorCode::MalformedRow, where + ": bad mask");
      row_on = v != 0.0;
    }
    for (std::size_t c : out_cols) {
      double v = 0.0;
      const bool present = !f[c].empty() && f[c] != "nan" && f[c] != "NaN";
      if (present && !parse_number(f[c], v)) throw Error(ErrorCode::MalformedRow, where + ": bad value");
      r.y.push_back(present ? v : 0.0);
      r.m.push_back(present && row_on && std::isfinite(v) ? 1 : 0);
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw Error(ErrorCode::NonGriddableData, path.string() + ": no data rows");

  std::map<double, Index> tmap;
  std::map<std::vector<double>, Index> smap;
  for (const auto& r : rows) {
    tmap.emplace(r.t, 0);
    smap.emplace(r.x, 0);
  }
  const double cells = static_cast<double>(tmap.size()) * static_cast<double>(smap.size()) * static_cast<double>(P);
  if (cells > 5e8) throw Error(ErrorCode::NonGriddableData, path.string() + ": grid would be too large");
  GridData g;
  g.outputs = P;
  for (auto& [t, i] : tmap) {
    i = static_cast<Index>(g.times.size());
    g.times.push_back(t);
  }
  g.spatial_locations.resize(static_cast<Index>(smap.size()), static_cast<Index>(S));
  Index si = 0;
  for (auto& [x, i] : smap) {
    i = si;
    for (std::size_t j = 0; j < S; ++j) g.spatial_locations(si, static_cast<Index>(j)) = x[j];
    ++si;
  }
  g.values.assign(static_cast<std::size_t>(cells), 0.0);
  g.mask.assign(g.values.size(), 0);
  std::vector<std::uint8_t> seen(tmap.size() * smap.size(), 0);
  for (const auto& r : rows) {
    const Index ti = tmap.at(r.t), sj = smap.at(r.x);
    auto& flag = seen[static_cast<std::size_t>(ti * g.n_space() + sj)];
    if (flag) throw Error(ErrorCode::NonGriddableData, path.string() + ": duplicate grid node");
    flag = 1;
    for (Index p = 0; p < P; ++p) {
      const auto f = static_cast<std::size_t>(g.flat(ti, sj, p));
      g.values[f] = r.y[static_cast<std::size_t>(p)];
      g.mask[f] = r.m[static_cast<std::size_t>(p)];
    }
  }
  return g;
}

void save_csv(const GridData& g, const fs::path& path, const std::vector<std::string>& names) {
  g.validate();
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "t";
  for (Index j = 0; j < g.spatial_locations.cols(); ++j) out << ",s" << (j + 1);
  for (Index p = 0; p < g.outputs; ++p)
    out << "," << (static_cast<std::size_t>(p) < names.size() ? names[static_cast<std::size_t>(p)] : "y" + std::to_string(p + 1));
  out << "\n";
  for (Index i = 0; i < g.n_times(); ++i)
    for (Index s = 0; s < g.n_space(); ++s) {
      bool any = false;
      for (Index p = 0; p < g.outputs; ++p) any = any || g.observed(i, s, p);
      if (!any) continue;
      out << format17(g.times[static_cast<std::size_t>(i)]);
      for (Index j = 0; j < g.spatial_locations.cols(); ++j) out << "," << format17(g.spatial_locations(s, j));
      for (Index p = 0; p < g.outputs; ++p) {
        out << ",";
        if (g.observed(i, s, p)) out << format17(g.value(i, s, p));
      }
      out << "\n";
    }
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

// ---------------------------------------------------------------- metrics

double gaussian_crps(double y, double mu, double sigma) {
  if (sigma <= 0.0) {
    if (y != mu) throw Error(ErrorCode::ZeroVariancePrediction, "zero predictive variance with nonzero error");
    return 0.0;
  }
  const double z = (y - mu) / sigma;
  const double Phi = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  const double phi = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return sigma * (z * (2.0 * Phi - 1.0) + 2.0 * phi - 1.0 / std::sqrt(std::numbers::pi));
}

MetricsReport compute_metrics(const Matrix& mean, const Matrix& sd, const Matrix& truth, const Matrix& mask) {
  if (mean.rows() != truth.rows() || mean.cols() != truth.cols() || sd.rows() != mean.rows() ||
      sd.cols() != mean.cols() || mask.rows() != mean.rows() || mask.cols() != mean.cols())
    throw Error(ErrorCode::ShapeMismatch, "metric inputs must share a shape");
  MetricsReport r;
  double sse = 0.0, nl = 0.0, cr = 0.0;
  std::size_t n = 0;
  for (Index i = 0; i < mean.rows(); ++i)
    for (Index p = 0; p < mean.cols(); ++p) {
      if (mask(i, p) == 0.0) continue;
      const double e = truth(i, p) - mean(i, p);
      const double s = sd(i, p);
      sse += e * e;
      if (s <= 0.0) {
        if (e != 0.0) throw Error(ErrorCode::ZeroVariancePrediction, "zero predictive variance with nonzero error");
        nl += -std::numeric_limits<double>::infinity();
      } else {
        nl += 0.5 * std::log(2.0 * std::numbers::pi * s * s) + 0.5 * e * e / (s * s);
      }
      cr += gaussian_crps(truth(i, p), mean(i, p), s);
      ++n;
    }
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "no points to score");
  r.rmse = std::sqrt(sse / static_cast<double>(n));
  r.nlpd = nl / static_cast<double>(n);
  r.crps = cr / static_cast<double>(n);
  double mu = 0.0;
  std::size_t m = 0;
  for (Index i = 0; i < mean.rows(); ++i)
    if (mask(i, 0) != 0.0) {
      mu += truth(i, 0);
      ++m;
    }
  mu /= static_cast<double>(std::max<std::size_t>(m, 1));
  double ss_res = 0.0, ss_tot = 0.0;
  for (Index i = 0; i < mean.rows(); ++i)
    if (mask(i, 0) != 0.0) {
      ss_res += std::pow(truth(i, 0) - mean(i, 0), 2);
      ss_tot += std::pow(truth(i, 0) - mu, 2);
    }
  r.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : 0.0);
  return r;
}

// ---------------------------------------------------------------- config

namespace {

void allow(const json& j, std::initializer_list<std::string_view> keys, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::Config, where + " must be an object");
  for (const auto& item : j.items())
    if (std::find(keys.begin(), keys.end(), item.key()) == keys.end())
      throw Error(ErrorCode::Config, "unknown key '" + item.key() + "' in " + where);
}

template <class T>
T get(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::Config, std::string("bad value for '") + key + "' in " + where);
  }
}

kernels::KernelSpec parse_kernel(const json& j, int active_dim, const std::string& where) {
  allow(j, {"kernel", "lengthscale", "variance", "order"}, where);
  kernels::KernelSpec k;
  k.family = kernels::parse_family(get<std::string>(j, "kernel", "matern32", where));
  k.lengthscale = get<double>(j, "lengthscale", 1.0, where);
  k.variance = get<double>(j, "variance", 1.0, where);
  k.order = get<int>(j, "order", 1, where);
  k.active_dim = active_dim;
  k.validate();
  return k;
}

stprior::LatentPrior parse_latent(const json& j, const std::string& where) {
  allow(j, {"temporal", "spatial"}, where);
  stprior::LatentPrior lp;
  if (!j.contains("temporal")) throw Error(ErrorCode::Config, where + " needs a temporal kernel");
  lp.temporal = parse_kernel(j.at("temporal"), 0, where + ".temporal");
  if (j.contains("spatial")) {
    const json& sp = j.at("spatial");
    if (!sp.is_array()) throw Error(ErrorCode::Config, where + ".spatial must be a list");
    for (std::size_t a = 0; a < sp.size(); ++a)
      lp.spatial.push_back(parse_kernel(sp[a], static_cast<int>(a) + 1, where + ".spatial"));
  }
  return lp;
}

/// Values along one axis: explicit list, linspace, or a subset of the data grid.
std::vector<double> parse_axis(const json& j, const std::vector<double>& grid, const std::string& where) {
  allow(j, {"count", "range", "from_grid", "values"}, where);
  if (j.contains("values")) return get<std::vector<double>>(j, "values", {}, where);
  if (get<bool>(j, "from_grid", false, where)) {
    if (grid.empty()) throw Error(ErrorCode::Config, where + ": no data grid to draw from");
    const int n = get<int>(j, "count", static_cast<int>(grid.size()), where);
    if (n < 1 || n > static_cast<int>(grid.size())) throw Error(ErrorCode::Config, where + ": bad count");
    std::vector<double> out;
    for (int i = 0; i < n; ++i) {
      const double pos = n == 1 ? 0.0 : static_cast<double>(grid.size() - 1) * i / (n - 1);
      out.push_back(grid[static_cast<std::size_t>(std::llround(pos))]);
    }
    return out;
  }
  const int n = get<int>(j, "count", 0, where);
  if (n < 1) throw Error(ErrorCode::Config, where + ": count must be positive");
  std::vector<double> range = get<std::vector<double>>(j, "range", {}, where);
  if (range.empty() && !grid.empty()) range = {grid.front(), grid.back()};
  if (range.size() != 2) throw Error(ErrorCode::Config, where + ": range must have two entries");
  return linspace(range[0], range[1], n);
}

std::vector<double> sorted_unique(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

std::vector<double> axis_values(const SplitData& d, Index axis) {
  std::vector<double> v;
  for (const GridData* g : {&d.train, &d.test}) {
    if (axis < 0) v.insert(v.end(), g->times.begin(), g->times.end());
    else
      for (Index i = 0; i < g->n_space(); ++i) v.push_back(g->spatial_locations(i, axis));
  }
  return sorted_unique(v);
}

Matrix tensor_grid(const std::vector<std::vector<double>>& axes) {
  Index n = 1;
  for (const auto& a : axes) n *= static_cast<Index>(a.size());
  Matrix out(n, static_cast<Index>(axes.size()));
  for (Index r = 0; r < n; ++r) {
    Index rem = r;
    for (Index c = static_cast<Index>(axes.size()) - 1; c >= 0; --c) {
      const auto& a = axes[static_cast<std::size_t>(c)];
      out(r, c) = a[static_cast<std::size_t>(rem % static_cast<Index>(a.size()))];
      rem /= static_cast<Index>(a.size());
    }
  }
  return out;
}

Matrix parse_locations(const json& j, const SplitData& data, Index S, const std::string& where) {
  if (j.is_array()) {
    Matrix out(static_cast<Index>(j.size()), S);
    for (std::size_t r = 0; r < j.size(); ++r) {
      const auto row = j[r].get<std::vector<double>>();
      if (static_cast<Index>(row.size()) != S) throw Error(ErrorCode::Config, where + ": wrong location width");
      for (Index c = 0; c < S; ++c) out(static_cast<Index>(r), c) = row[static_cast<std::size_t>(c)];
    }
    return out;
  }
  allow(j, {"axes"}, where);
  const json& axes = j.at("axes");
  if (!axes.is_array() || static_cast<Index>(axes.size()) != S)
    throw Error(ErrorCode::Config, where + ".axes needs one entry per spatial axis");
  std::vector<std::vector<double>> vals;
  for (Index a = 0; a < S; ++a) vals.push_back(parse_axis(axes[static_cast<std::size_t>(a)], axis_values(data, a), where + ".axes"));
  return tensor_grid(vals);
}

infer::TrainConfig parse_train(const json& j) {
  const std::string w = "train";
  allow(j, {"epochs", "adam_lr", "beta", "beta_warmup", "warmup_epochs", "inner_steps", "freeze_fraction",
            "batch_size", "seed", "trainable", "fd_step", "trace_every"},
        w);
  infer::TrainConfig c;
  c.epochs = get<int>(j, "epochs", c.epochs, w);
  c.adam_lr = get<double>(j, "adam_lr", c.adam_lr, w);
  c.beta = get<double>(j, "beta", c.beta, w);
  c.beta_warmup = get<double>(j, "beta_warmup", c.beta_warmup, w);
  c.warmup_epochs = get<int>(j, "warmup_epochs", c.warmup_epochs, w);
  c.inner_steps = get<int>(j, "inner_steps", c.inner_steps, w);
  c.freeze_fraction = get<double>(j, "freeze_fraction", c.freeze_fraction, w);
  c.batch_size = get<Index>(j, "batch_size", c.batch_size, w);
  c.seed = get<std::uint64_t>(j, "seed", c.seed, w);
  if (j.contains("trainable")) c.trainable = get<std::vector<std::string>>(j, "trainable", {}, w);
  c.fd_step = get<double>(j, "fd_step", c.fd_step, w);
  c.trace_every = get<int>(j, "trace_every", c.trace_every, w);
  if (c.epochs < 0 || c.inner_steps < 1 || !(c.beta > 0.0 && c.beta <= 1.0) ||
      !(c.beta_warmup > 0.0 && c.beta_warmup <= 1.0) || c.freeze_fraction < 0.0 || c.freeze_fraction > 1.0 ||
      !(c.fd_step > 0.0) || c.batch_size < 0)
    throw Error(ErrorCode::Config, "invalid train section");
  return c;
}

SplitData split_grid(const GridData& full, const json& j, const std::vector<double>* space_subset) {
  const std::string w = "data.split";
  allow(j, {"train_count", "train_fraction", "t_max", "train_space", "test", "seed"}, w);
  const double t_max = get<double>(j, "t_max", std::numeric_limits<double>::infinity(), w);
  const std::string test = get<std::string>(j, "test", "all", w);
  if (test != "all" && test != "complement") throw Error(ErrorCode::Config, w + ".test must be all or complement");
  std::mt19937_64 rng(get<std::uint64_t>(j, "seed", 0, w));
  std::vector<Index> cand;
  for (Index i = 0; i < full.n_times(); ++i) {
    if (full.times[static_cast<std::size_t>(i)] > t_max) continue;
    for (Index s = 0; s < full.n_space(); ++s) {
      if (space_subset && full.spatial_locations.cols() > 0) {
        const double x = full.spatial_locations(s, 0);
        if (std::find(space_subset->begin(), space_subset->end(), x) == space_subset->end()) continue;
      }
      bool any = false;
      for (Index p = 0; p < full.outputs; ++p) any = any || full.observed(i, s, p);
      if (any) cand.push_back(i * full.n_space() + s);
    }
  }
  std::shuffle(cand.begin(), cand.end(), rng);
  std::size_t n = cand.size();
  if (j.contains("train_count")) n = get<std::size_t>(j, "train_count", n, w);
  else if (j.contains("train_fraction")) {
    const double f = get<double>(j, "train_fraction", 1.0, w);
    if (!(f > 0.0 && f < 1.0)) throw Error(ErrorCode::Config, "train_fraction must lie in (0, 1)");
    n = static_cast<std::size_t>(std::lround(f * static_cast<double>(cand.size())));
  }
  if (n > cand.size()) throw Error(ErrorCode::Config, w + ": not enough candidate training nodes");
  SplitData d{full, full};
  std::fill(d.train.mask.begin(), d.train.mask.end(), 0);
  for (std::size_t k = 0; k < n; ++k)
    for (Index p = 0; p < full.outputs; ++p) {
      const auto f = static_cast<std::size_t>(cand[k] * full.outputs + p);
      d.train.mask[f] = full.mask[f];
      if (test == "complement") d.test.mask[f] = 0;
    }
  return d;
}

}  // namespace

// ---------------------------------------------------------------- experiment

struct Experiment::Impl {
  json config;
  fs::path base_dir;
  SplitData data;
  infer::ModelSpec spec;
  infer::Problem problem;
  std::optional<infer::Engine> engine;
  infer::TrainConfig train;
  std::vector<infer::TraceRow> trace;
  std::vector<Index> eval_outputs;
  std::vector<bool> observed_output;
  fs::path out_dir = "physs_out";
  double wall_seconds = 0.0;
  int epochs = 0;

  void build();
  std::vector<Point> test_points() const;
  MetricsReport score() const;
};

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

void Experiment::Impl::build() {
  allow(config, {"name", "model", "data", "train", "output"}, "config");
  if (!config.contains("model") || !config.contains("data"))
    throw Error(ErrorCode::Config, "config needs model and data sections");
  const json& m = config.at("model");
  const json& d = config.at("data");
  train = parse_train(config.value("train", json::object()));
  if (config.contains("output")) {
    allow(config.at("output"), {"directory"}, "output");
    out_dir = get<std::string>(config.at("output"), "directory", "physs_out", "output");
  }

  allow(m, {"mode", "latent", "latents", "num_latents", "temporal_order", "spatial_orders", "residual", "mixing",
            "physics", "noise", "inducing", "state_locations", "gauss_newton", "clip_curvature", "mean_field",
            "quadrature_order", "jitter", "diffuse_variance"},
        "model");
  spec.mode = infer::parse_mode(get<std::string>(m, "mode", "full", "model"));
  spec.orders.temporal = get<int>(m, "temporal_order", 1, "model");

  // Latents come first: their spatial kernel count fixes S.
  std::vector<stprior::LatentPrior> latents;
  if (m.contains("latents")) {
    for (const auto& lj : m.at("latents")) latents.push_back(parse_latent(lj, "model.latents"));
  } else if (m.contains("latent")) {
    latents.push_back(parse_latent(m.at("latent"), "model.latent"));
  } else {
    throw Error(ErrorCode::Config, "model needs latent or latents");
  }
  const Index S = static_cast<Index>(latents.front().spatial.size());
  for (const auto& lp : latents)
    if (static_cast<Index>(lp.spatial.size()) != S)
      throw Error(ErrorCode::Config, "every latent needs the same number of spatial kernels");
  if (m.contains("spatial_orders")) {
    spec.orders.spatial = get<std::vector<kernels::MultiIndex>>(m, "spatial_orders", {}, "model");
  } else {
    spec.orders.spatial = {kernels::MultiIndex(static_cast<std::size_t>(S), 0)};
  }
  spec.orders.validate(static_cast<std::size_t>(S));

  physics::CatalogParams cp;
  if (m.contains("physics")) {
    const json& pj = m.at("physics");
    allow(pj, {"damping", "diffusion", "reaction", "probit_scale"}, "model.physics");
    cp.damping = get<double>(pj, "damping", cp.damping, "model.physics");
    cp.diffusion = get<double>(pj, "diffusion", cp.diffusion, "model.physics");
    cp.reaction = get<double>(pj, "reaction", cp.reaction, "model.physics");
    cp.probit_scale = get<double>(pj, "probit_scale", cp.probit_scale, "model.physics");
  }
  Index Q = 1, P = 1;
  std::optional<Matrix> mixing;
  if (m.contains("residual") && !m.at("residual").is_null()) {
    const auto e = physics::catalog_lookup(get<std::string>(m, "residual", "", "model"), spec.orders, S, cp);
    if (!e.residual) throw Error(ErrorCode::Config, "catalog entry '" + e.name + "' has no residual");
    spec.residual = e.residual;
    spec.colloc_kind = e.kind;
    spec.probit_scale = e.probit_scale;
    mixing = e.mixing;
    Q = e.latents;
    P = e.outputs;
  }
  if (m.contains("mixing") && !m.at("mixing").is_null()) {
    const json& mj = m.at("mixing");
    if (mj.is_string()) {
      const std::string name = mj.get<std::string>();
      if (name == "identity") {
        mixing.reset();
      } else {
        const auto e = physics::catalog_lookup(name, spec.orders, S, cp);
        if (!e.mixing) throw Error(ErrorCode::Config, "catalog entry '" + name + "' has no mixing");
        mixing = e.mixing;
        Q = e.latents;
        P = e.outputs;
      }
    } else {
      const auto rows = mj.get<std::vector<std::vector<double>>>();
      Matrix W(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows[0].size()));
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c) W(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
      mixing = W;
      Q = W.cols() / spec.orders.D();
      P = W.rows() / spec.orders.D();
    }
  }
  Q = get<Index>(m, "num_latents", std::max<Index>(Q, static_cast<Index>(latents.size())), "model");
  if (static_cast<Index>(latents.size()) == 1 && Q > 1) latents.assign(static_cast<std::size_t>(Q), latents.front());
  if (static_cast<Index>(latents.size()) != Q) throw Error(ErrorCode::Config, "latent count does not match the model");
  spec.latents = latents;
  if (!mixing) P = Q;
  spec.outputs = P;
  if (mixing) spec.W = *mixing;

  if (m.contains("noise")) {
    const json& nj = m.at("noise");
    allow(nj, {"obs", "colloc", "boundary", "colloc_floor"}, "model.noise");
    if (nj.contains("obs")) {
      if (nj.at("obs").is_array()) spec.noise.obs = nj.at("obs").get<std::vector<double>>();
      else spec.noise.obs.assign(static_cast<std::size_t>(P), nj.at("obs").get<double>());
    }
    spec.noise.colloc = get<double>(nj, "colloc", spec.noise.colloc, "model.noise");
    spec.noise.boundary = get<double>(nj, "boundary", spec.noise.boundary, "model.noise");
    spec.noise.colloc_floor = get<double>(nj, "colloc_floor", spec.noise.colloc_floor, "model.noise");
  }
  if (static_cast<Index>(spec.noise.obs.size()) != P) spec.noise.obs.assign(static_cast<std::size_t>(P), spec.noise.obs.front());
  spec.gauss_newton = get<bool>(m, "gauss_newton", spec.gauss_newton, "model");
  spec.clip_curvature = get<bool>(m, "clip_curvature", spec.clip_curvature, "model");
  spec.mean_field = get<bool>(m, "mean_field", spec.mean_field, "model");
  spec.quadrature_order = get<int>(m, "quadrature_order", spec.quadrature_order, "model");
  spec.jitter = get<double>(m, "jitter", spec.jitter, "model");
  spec.diffuse_variance = get<double>(m, "diffuse_variance", spec.diffuse_variance, "model");

  // Data.
  allow(d, {"source", "params", "path", "train", "test", "split", "collocation", "boundary", "evaluate_outputs"}, "data");
  const std::string source = get<std::string>(d, "source", "", "data");
  const json params = d.value("params", json::object());
  auto u64 = [&](const char* k, std::uint64_t v) { return get<std::uint64_t>(params, k, v, "data.params"); };
  auto dbl = [&](const char* k, double v) { return get<double>(params, k, v, "data.params"); };
  auto int_ = [&](const char* k, int v) { return get<int>(params, k, v, "data.params"); };
  std::optional<GridData> full;
  if (source == "pendulum") {
    allow(params, {"damping", "theta0", "omega0", "step", "n_train", "train_start", "train_end", "n_test",
                   "test_start", "test_end", "noise_var", "seed"}, "data.params");
    PendulumParams p;
    p.damping = dbl("damping", p.damping);
    p.theta0 = dbl("theta0", p.theta0);
    p.omega0 = dbl("omega0", p.omega0);
    p.step = dbl("step", p.step);
    p.n_train = int_("n_train", p.n_train);
    p.train_start = dbl("train_start", p.train_start);
    p.train_end = dbl("train_end", p.train_end);
    p.n_test = int_("n_test", p.n_test);
    p.test_start = dbl("test_start", p.test_start);
    p.test_end = dbl("test_end", p.test_end);
    p.noise_var = dbl("noise_var", p.noise_var);
    p.seed = u64("seed", p.seed);
    data = simulate_pendulum(p);
  } else if (source == "dipole") {
    allow(params, {"n_t", "n_s", "lo", "hi", "z", "moment", "train_fraction", "noise_var", "seed"}, "data.params");
    DipoleParams p;
    p.n_t = int_("n_t", p.n_t);
    p.n_s = int_("n_s", p.n_s);
    p.lo = dbl("lo", p.lo);
    p.hi = dbl("hi", p.hi);
    p.z = dbl("z", p.z);
    if (params.contains("moment")) {
      const auto mv = params.at("moment").get<std::vector<double>>();
      if (mv.size() != 3) throw Error(ErrorCode::Config, "moment needs three entries");
      p.moment = {mv[0], mv[1], mv[2]};
    }
    p.train_fraction = dbl("train_fraction", p.train_fraction);
    p.noise_var = dbl("noise_var", p.noise_var);
    p.seed = u64("seed", p.seed);
    data = simulate_dipole(p);
  } else if (source == "latent_force") {
    allow(params, {"theta0", "omega0", "step", "end", "n_train", "n_test", "noise_var", "seed"}, "data.params");
    LatentForceParams p;
    p.theta0 = dbl("theta0", p.theta0);
    p.omega0 = dbl("omega0", p.omega0);
    p.step = dbl("step", p.step);
    p.end = dbl("end", p.end);
    p.n_train = int_("n_train", p.n_train);
    p.n_test = int_("n_test", p.n_test);
    p.noise_var = dbl("noise_var", p.noise_var);
    p.seed = u64("seed", p.seed);
    data = simulate_latent_force(p);
  } else if (source == "monotonic") {
    allow(params, {"n_train", "n_test", "start", "end", "noise_var", "seed"}, "data.params");
    MonotonicParams p;
    p.n_train = int_("n_train", p.n_train);
    p.n_test = int_("n_test", p.n_test);
    p.start = dbl("start", p.start);
    p.end = dbl("end", p.end);
    p.noise_var = dbl("noise_var", p.noise_var);
    p.seed = u64("seed", p.seed);
    data = simulate_monotonic(p);
  } else if (source == "csv") {
    if (d.contains("path")) {
      full = load_csv(resolve(base_dir, get<std::string>(d, "path", "", "data")));
    } else {
      data.train = load_csv(resolve(base_dir, get<std::string>(d, "train", "", "data")));
      data.test = load_csv(resolve(base_dir, get<std::string>(d, "test", "", "data")));
    }
  } else {
    throw Error(ErrorCode::Config, "unknown data source '" + source + "'");
  }
  if (full) data = SplitData{*full, *full};

  // Collocation points.
  std::vector<double> colloc_space;
  bool have_colloc_space = false;
  if (d.contains("collocation")) {
    const json& cj = d.at("collocation");
    allow(cj, {"time", "space"}, "data.collocation");
    if (!cj.contains("time")) throw Error(ErrorCode::Config, "data.collocation needs a time axis");
    const auto ct = parse_axis(cj.at("time"), axis_values(data, -1), "data.collocation.time");
    std::vector<std::vector<double>> axes;
    if (S > 0) {
      if (!cj.contains("space")) throw Error(ErrorCode::Config, "data.collocation needs space axes");
      const json& sj = cj.at("space");
      std::vector<json> list = sj.is_array() ? sj.get<std::vector<json>>() : std::vector<json>{sj};
      if (static_cast<Index>(list.size()) != S) throw Error(ErrorCode::Config, "one collocation axis per spatial axis");
      for (Index a = 0; a < S; ++a) axes.push_back(parse_axis(list[static_cast<std::size_t>(a)], axis_values(data, a), "data.collocation.space"));
      colloc_space = axes.front();
      have_colloc_space = true;
    }
    const Matrix X = S > 0 ? tensor_grid(axes) : Matrix(1, 0);
    for (double t : ct)
      for (Index r = 0; r < X.rows(); ++r) problem.collocation.push_back({t, X.row(r).transpose()});
  }
  if (full) {
    const json sj = d.value("split", json::object());
    const bool on_colloc = get<std::string>(sj, "train_space", "all", "data.split") == "collocation";
    if (on_colloc && !have_colloc_space) throw Error(ErrorCode::Config, "train_space collocation needs spatial collocation");
    data = split_grid(*full, sj, on_colloc ? &colloc_space : nullptr);
  } else if (d.contains("split")) {
    throw Error(ErrorCode::Config, "data.split only applies to a single csv path");
  }
  data.train.validate();
  data.test.validate();
  if (data.train.spatial_locations.cols() != S || data.test.spatial_locations.cols() != S)
    throw Error(ErrorCode::Config, "data spatial dimension does not match the spatial kernels");
  if (data.train.outputs != P || data.test.outputs != P)
    throw Error(ErrorCode::Config, "data output count does not match the model (" + std::to_string(P) + ")");

  // Boundary constraints.
  if (d.contains("boundary")) {
    const json& bj = d.at("boundary");
    allow(bj, {"periodic"}, "data.boundary");
    const json& pj = bj.at("periodic");
    allow(pj, {"orders", "time"}, "data.boundary.periodic");
    if (S != 1) throw Error(ErrorCode::Config, "periodic boundaries need exactly one spatial axis");
    const auto orders = get<std::vector<kernels::MultiIndex>>(pj, "orders", {{0}}, "data.boundary.periodic");
    std::vector<double> bt;
    if (pj.contains("time")) bt = parse_axis(pj.at("time"), axis_values(data, -1), "data.boundary.periodic.time");
    else
      for (const auto& c : problem.collocation) bt.push_back(c.t);
    bt = sorted_unique(bt);
    const auto xs = axis_values(data, 0);
    const Vector lo = Vector::Constant(1, xs.front()), hi = Vector::Constant(1, xs.back());
    for (double t : bt)
      for (const auto& mi : orders)
        for (Index p = 0; p < P; ++p) {
          infer::BoundaryConstraint b;
          b.t = t;
          b.x = {lo, hi};
          RowVector row = RowVector::Zero(P * spec.D());
          row(physics::component(spec.orders, p, 0, mi)) = 1.0;
          b.rows = {row, -row};
          problem.boundary.push_back(std::move(b));
        }
  }

  // Inducing / state locations.
  if (m.contains("inducing")) spec.inducing = parse_locations(m.at("inducing"), data, S, "model.inducing");
  if (m.contains("state_locations")) spec.state_locations = parse_locations(m.at("state_locations"), data, S, "model.state_locations");

  // Observations and queries.
  observed_output.assign(static_cast<std::size_t>(P), false);
  const GridData& tr = data.train;
  for (Index i = 0; i < tr.n_times(); ++i)
    for (Index s = 0; s < tr.n_space(); ++s)
      for (Index p = 0; p < P; ++p)
        if (tr.observed(i, s, p)) {
          problem.data.push_back({{tr.times[static_cast<std::size_t>(i)], tr.spatial_locations.row(s).transpose()}, p, tr.value(i, s, p)});
          observed_output[static_cast<std::size_t>(p)] = true;
        }
  problem.queries = test_points();

  if (d.contains("evaluate_outputs")) {
    eval_outputs = get<std::vector<Index>>(d, "evaluate_outputs", {}, "data");
    for (Index p : eval_outputs)
      if (p < 0 || p >= P) throw Error(ErrorCode::Config, "evaluate_outputs out of range");
  } else {
    for (Index p = 0; p < P; ++p) eval_outputs.push_back(p);
  }
  engine.emplace(spec, problem);
}

std::vector<Point> Experiment::Impl::test_points() const {
  std::vector<Point> pts;
  const GridData& te = data.test;
  for (Index i = 0; i < te.n_times(); ++i)
    for (Index s = 0; s < te.n_space(); ++s) {
      bool any = false;
      for (Index p = 0; p < te.outputs; ++p) any = any || te.observed(i, s, p);
      if (any) pts.push_back({te.times[static_cast<std::size_t>(i)], te.spatial_locations.row(s).transpose()});
    }
  return pts;
}

Experiment::Experiment(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Experiment::~Experiment() = default;
Experiment::Experiment(Experiment&&) noexcept = default;
Experiment& Experiment::operator=(Experiment&&) noexcept = default;

Experiment Experiment::from_json(const std::string& text, const fs::path& base_dir) {
  auto impl = std::make_unique<Impl>();
  try {
    impl->config = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::Config, std::string("config is not valid JSON: ") + e.what());
  }
  impl->base_dir = base_dir;
  impl->build();
  return Experiment(std::move(impl));
}

Experiment Experiment::from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str(), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

const SplitData& Experiment::data() const { return impl_->data; }
const infer::ModelSpec& Experiment::spec() const { return impl_->spec; }
const infer::Problem& Experiment::problem() const { return impl_->problem; }
infer::Engine& Experiment::engine() { return *impl_->engine; }
const infer::Engine& Experiment::engine() const { return *impl_->engine; }
const infer::TrainConfig& Experiment::train_config() const { return impl_->train; }
const std::vector<infer::TraceRow>& Experiment::trace() const { return impl_->trace; }
fs::path Experiment::output_dir() const { return impl_->out_dir; }
void Experiment::set_output_dir(const fs::path& dir) { impl_->out_dir = dir; }

Predictions Experiment::predict(const std::vector<Point>& points) const {
  const infer::Engine& e = *impl_->engine;
  const auto preds = e.predict(points);
  const Vector noise = e.observation_noise();
  const Index P = impl_->spec.outputs;
  Predictions out;
  out.points = points;
  out.mean.resize(static_cast<Index>(points.size()), P);
  out.stddev.resize(static_cast<Index>(points.size()), P);
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (Index p = 0; p < P; ++p) {
      const double v = preds[i].variance(p) + (impl_->observed_output[static_cast<std::size_t>(p)] ? noise(p) : 0.0);
      out.mean(static_cast<Index>(i), p) = preds[i].mean(p);
      out.stddev(static_cast<Index>(i), p) = std::sqrt(std::max(v, 0.0));
    }
  return out;
}

MetricsReport Experiment::Impl::score() const {
  const GridData& te = data.test;
  std::vector<Point> pts;
  std::vector<std::pair<Index, Index>> nodes;
  for (Index i = 0; i < te.n_times(); ++i)
    for (Index s = 0; s < te.n_space(); ++s) {
      bool any = false;
      for (Index p : eval_outputs) any = any || te.observed(i, s, p);
      if (!any) continue;
      pts.push_back({te.times[static_cast<std::size_t>(i)], te.spatial_locations.row(s).transpose()});
      nodes.emplace_back(i, s);
    }
  const auto preds = engine->predict(pts);
  const Vector noise = engine->observation_noise();
  const Index n = static_cast<Index>(pts.size()), k = static_cast<Index>(eval_outputs.size());
  Matrix mean(n, k), sd(n, k), truth(n, k), mask(n, k);
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < k; ++c) {
      const Index p = eval_outputs[static_cast<std::size_t>(c)];
      const auto [i, s] = nodes[static_cast<std::size_t>(r)];
      mean(r, c) = preds[static_cast<std::size_t>(r)].mean(p);
      const double v = preds[static_cast<std::size_t>(r)].variance(p) + (observed_output[static_cast<std::size_t>(p)] ? noise(p) : 0.0);
      sd(r, c) = std::sqrt(std::max(v, 0.0));
      truth(r, c) = te.value(i, s, p);
      mask(r, c) = te.observed(i, s, p) ? 1.0 : 0.0;
    }
  MetricsReport m = compute_metrics(mean, sd, truth, mask);
  m.wall_seconds = wall_seconds;
  m.epochs = epochs;
  return m;
}

MetricsReport Experiment::evaluate() const { return impl_->score(); }

MetricsReport Experiment::fit() {
  Impl& im = *impl_;
  infer::Engine& e = *im.engine;
  const auto t0 = std::chrono::steady_clock::now();
  if (im.spec.mode == infer::Mode::Eks) {
    e.eks_solve();
    im.epochs = 1;
    const auto rep = e.elbo();
    infer::TraceRow row;
    row.elbo = rep.total;
    row.ell = rep.ell;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const MetricsReport m = im.score();
    row.rmse = m.rmse;
    row.nlpd = m.nlpd;
    im.trace = {row};
  } else {
    const auto held = [&im](const infer::Engine&) {
      const MetricsReport m = im.score();
      return infer::HeldOutMetrics{m.rmse, m.nlpd};
    };
    const auto r = e.fit(im.train, held);
    im.trace = r.trace;
    im.epochs = r.epochs;
  }
  im.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return im.score();
}

void write_predictions(const Predictions& p, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  const Index S = p.points.empty() ? 0 : p.points.front().x.size();
  out << "t";
  for (Index j = 0; j < S; ++j) out << ",s" << (j + 1);
  for (Index o = 0; o < p.mean.cols(); ++o) out << ",mean" << (o + 1) << ",std" << (o + 1);
  out << "\n";
  for (std::size_t i = 0; i < p.points.size(); ++i) {
    out << format17(p.points[i].t);
    for (Index j = 0; j < S; ++j) out << "," << format17(p.points[i].x(j));
    for (Index o = 0; o < p.mean.cols(); ++o)
      out << "," << format17(p.mean(static_cast<Index>(i), o)) << "," << format17(p.stddev(static_cast<Index>(i), o));
    out << "\n";
  }
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

void write_trace(const std::vector<infer::TraceRow>& trace, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "epoch,elbo,ell,rmse,nlpd,seconds\n";
  for (const auto& r : trace)
    out << r.epoch << "," << format17(r.elbo) << "," << format17(r.ell) << "," << format17(r.rmse) << ","
        << format17(r.nlpd) << "," << format17(r.seconds) << "\n";
}

void write_metrics(const MetricsReport& m, const fs::path& path) {
  json j;
  j["rmse"] = m.rmse;
  j["nlpd"] = m.nlpd;
  j["crps"] = m.crps;
  j["r_squared"] = m.r_squared;
  j["wall_seconds"] = m.wall_seconds;
  j["epochs"] = m.epochs;
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

namespace {

constexpr char kSitesMagic[8] = {'P', 'H', 'S', 'S', 'S', 'T', '0', '1'};

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T pull(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error(ErrorCode::Io, "truncated sites file");
  return v;
}

}  // namespace

void Experiment::save_state(const fs::path& dir) const {
  fs::create_directories(dir);
  const infer::Engine& e = *impl_->engine;
  std::ofstream bin(dir / "sites.bin", std::ios::binary);
  if (!bin) throw Error(ErrorCode::Io, "cannot write sites.bin");
  bin.write(kSitesMagic, sizeof kSitesMagic);
  put<std::uint64_t>(bin, e.sites().size());
  for (const auto& s : e.sites()) {
    const auto o = ssm::site_observation(s);
    put<double>(bin, e.times()[static_cast<std::size_t>(s.time_index)]);
    put<std::uint64_t>(bin, static_cast<std::uint64_t>(s.shift.size()));
    put<std::uint64_t>(bin, static_cast<std::uint64_t>(o.rank()));
    for (Index i = 0; i < o.rank(); ++i) put<double>(bin, o.y(i));
    for (Index i = 0; i < o.rank(); ++i) put<double>(bin, o.noise(i));
    for (Index i = 0; i < o.rank(); ++i)
      for (Index c = 0; c < o.H.cols(); ++c) put<double>(bin, o.H(i, c));
  }
  if (!bin) throw Error(ErrorCode::Io, "write failed for sites.bin");
  json j;
  j["config"] = impl_->config;
  j["base_dir"] = fs::absolute(impl_->base_dir).string();
  j["hyperparameters"]["names"] = e.hyperparameters().names;
  j["hyperparameters"]["log_values"] =
      std::vector<double>(e.hyperparameters().log_values.data(),
                          e.hyperparameters().log_values.data() + e.hyperparameters().log_values.size());
  j["sites"] = "sites.bin";
  std::ofstream out(dir / "state.json");
  if (!out) throw Error(ErrorCode::Io, "cannot write state.json");
  out << j.dump(2) << "\n";
}

Experiment Experiment::load_state(const fs::path& state_json) {
  std::ifstream in(state_json);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + state_json.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("state file is not valid JSON: ") + e.what());
  }
  allow(j, {"config", "base_dir", "hyperparameters", "sites"}, "state");
  auto impl = std::make_unique<Impl>();
  impl->config = j.at("config");
  impl->base_dir = j.at("base_dir").get<std::string>();
  impl->build();
  infer::Engine& e = *impl->engine;
  const auto names = j.at("hyperparameters").at("names").get<std::vector<std::string>>();
  const auto vals = j.at("hyperparameters").at("log_values").get<std::vector<double>>();
  if (names != e.hyperparameters().names) throw Error(ErrorCode::Config, "state hyperparameters do not match the config");
  e.set_log_hyperparameters(Eigen::Map<const Vector>(vals.data(), static_cast<Index>(vals.size())));

  const fs::path sites_path = state_json.parent_path() / j.at("sites").get<std::string>();
  std::ifstream bin(sites_path, std::ios::binary);
  if (!bin) throw Error(ErrorCode::Io, "cannot open " + sites_path.string());
  char magic[8];
  bin.read(magic, sizeof magic);
  if (!bin || std::memcmp(magic, kSitesMagic, sizeof magic) != 0) throw Error(ErrorCode::Io, "bad sites file");
  const Index E = e.emitted_dim();
  std::vector<ssm::SurrogateSite> sites;
  for (std::size_t k = 0; k < e.times().size(); ++k) sites.push_back(ssm::SurrogateSite::uninformative(E, static_cast<Index>(k)));
  const auto count = pull<std::uint64_t>(bin);
  for (std::uint64_t n = 0; n < count; ++n) {
    const double t = pull<double>(bin);
    const auto dim = static_cast<Index>(pull<std::uint64_t>(bin));
    const auto r = static_cast<Index>(pull<std::uint64_t>(bin));
    if (dim != E) throw Error(ErrorCode::Config, "saved sites do not match the model");
    Vector y(r), noise(r);
    Matrix H(r, E);
    for (Index i = 0; i < r; ++i) y(i) = pull<double>(bin);
    for (Index i = 0; i < r; ++i) noise(i) = pull<double>(bin);
    for (Index i = 0; i < r; ++i)
      for (Index c = 0; c < E; ++c) H(i, c) = pull<double>(bin);
    const Index k = e.time_index(t);
    if (k < 0 || r == 0) continue;
    const Matrix HtRi = H.transpose() * noise.cwiseInverse().asDiagonal();
    auto& s = sites[static_cast<std::size_t>(k)];
    s.precision = HtRi * H;
    symmetrize(s.precision);
    s.shift = HtRi * y;
  }
  e.set_sites(std::move(sites));
  return Experiment(std::move(impl));
}

MetricsReport Experiment::run() {
  const MetricsReport m = fit();
  const fs::path dir = impl_->out_dir;
  fs::create_directories(dir);
  write_metrics(m, dir / "metrics.json");
  write_predictions(predict(impl_->test_points()), dir / "predictions.csv");
  write_trace(impl_->trace, dir / "trace.csv");
  save_state(dir);
  return m;
}

std::vector<Point> load_points(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::MalformedRow, path.string() + ":1: missing header");
  const auto header = split_fields(line);
  if (header.front() != "t") throw Error(ErrorCode::MalformedRow, path.string() + ":1: first column must be t");
  static const std::regex spatial_name("^[sx][0-9]*$");
  std::size_t S = 0;
  while (1 + S < header.size() && std::regex_match(header[1 + S], spatial_name)) ++S;
  std::vector<Point> pts;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = split_fields(line);
    if (f.size() != header.size())
      throw Error(ErrorCode::MalformedRow, path.string() + ":" + std::to_string(lineno) + ": wrong field count");
    Point p;
    p.x.resize(static_cast<Index>(S));
    bool ok = parse_number(f[0], p.t);
    for (std::size_t j = 0; j < S; ++j) ok = ok && parse_number(f[1 + j], p.x(static_cast<Index>(j)));
    if (!ok) throw Error(ErrorCode::MalformedRow, path.string() + ":" + std::to_string(lineno) + ": bad coordinate");
    pts.push_back(std::move(p));
  }
  if (pts.empty()) throw Error(ErrorCode::NonGriddableData, path.string() + ": no rows");
  return pts;
}

MetricsReport evaluate_files(const fs::path& pred_path, const fs::path& truth_path) {
  const GridData pred = load_csv(pred_path);
  const GridData truth = load_csv(truth_path);
  if (pred.outputs != 2 * truth.outputs)
    throw Error(ErrorCode::ShapeMismatch, "predictions need a mean and std column per truth output");
  if (pred.spatial_locations.cols() != truth.spatial_locations.cols())
    throw Error(ErrorCode::ShapeMismatch, "spatial dimensions differ");
  auto find_time = [&](double t) -> Index {
    for (Index i = 0; i < pred.n_times(); ++i)
      if (std::abs(pred.times[static_cast<std::size_t>(i)] - t) <= 1e-10 * std::max(1.0, std::abs(t))) return i;
    return -1;
  };
  auto find_space = [&](const RowVector& x) -> Index {
    for (Index s = 0; s < pred.n_space(); ++s)
      if (x.size() == 0 || (pred.spatial_locations.row(s) - x).cwiseAbs().maxCoeff() <= 1e-10) return s;
    return -1;
  };
  std::vector<double> mu, sd, y;
  std::vector<Index> col;
  const Index P = truth.outputs;
  Index rows = 0;
  std::vector<std::array<Index, 4>> hits;
  for (Index i = 0; i < truth.n_times(); ++i)
    for (Index s = 0; s < truth.n_space(); ++s) {
      bool any = false;
      for (Index p = 0; p < P; ++p) any = any || truth.observed(i, s, p);
      if (!any) continue;
      const Index pi = find_time(truth.times[static_cast<std::size_t>(i)]);
      const Index ps = find_space(truth.spatial_locations.row(s));
      if (pi < 0 || ps < 0) throw Error(ErrorCode::ShapeMismatch, "truth point missing from predictions");
      hits.push_back({i, s, pi, ps});
      ++rows;
    }
  Matrix M(rows, P), SD(rows, P), Y(rows, P), K(rows, P);
  for (Index r = 0; r < rows; ++r) {
    const auto [i, s, pi, ps] = hits[static_cast<std::size_t>(r)];
    for (Index p = 0; p < P; ++p) {
      M(r, p) = pred.value(pi, ps, 2 * p);
      SD(r, p) = pred.value(pi, ps, 2 * p + 1);
      Y(r, p) = truth.value(i, s, p);
      K(r, p) = truth.observed(i, s, p) && pred.observed(pi, ps, 2 * p) ? 1.0 : 0.0;
    }
  }
  return compute_metrics(M, SD, Y, K);
}

void simulate_to_dir(const std::string& name, const fs::path& dir, std::uint64_t seed) {
  SplitData d;
  if (name == "pendulum") {
    PendulumParams p;
    p.seed = seed;
    d = simulate_pendulum(p);
  } else if (name == "dipole") {
    DipoleParams p;
    p.seed = seed;
    d = simulate_dipole(p);
  } else if (name == "latent_force") {
    LatentForceParams p;
    p.seed = seed;
    d = simulate_latent_force(p);
  } else if (name == "monotonic") {
    MonotonicParams p;
    p.seed = seed;
    d = simulate_monotonic(p);
  } else {
    throw Error(ErrorCode::InvalidArgument, "unknown simulator '" + name + "'");
  }
  fs::create_directories(dir);
  save_csv(d.train, dir / "train.csv");
  save_csv(d.test, dir / "test.csv");
}

}  // namespace physs::experiment
