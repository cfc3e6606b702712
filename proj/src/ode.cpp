#include "voiceshop/ode.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "voiceshop/errors.hpp"

namespace vs::num {

namespace {

// Dormand-Prince tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
// 5th-order minus embedded 4th-order weights.
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;

constexpr double kSafety = 0.9;
constexpr double kMinGrowth = 0.2;
constexpr double kMaxGrowth = 5.0;
constexpr double kBeta = 0.04;  // PI term
constexpr double kExpo = 0.2 - kBeta * 0.75;

Tensor combo(const Tensor& y, double h, std::initializer_list<std::pair<double, const Tensor*>> terms) {
  Tensor acc = y;
  for (const auto& [coef, k] : terms)
    if (coef != 0.0) acc = add(acc, scale(*k, h * coef));
  return acc;
}

// Raw-value error combination; the error estimate never enters the graph.
double error_norm(const Tensor& y0, const Tensor& y1, double h,
                  std::initializer_list<std::pair<double, const Tensor*>> terms, const OdeSolverConfig& cfg) {
  const auto& a = y0.values();
  const auto& b = y1.values();
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double err = 0;
    for (const auto& [coef, k] : terms) err += coef * k->values()[i];
    err *= h;
    double sc = cfg.atol + cfg.rtol * std::max(std::fabs(a[i]), std::fabs(b[i]));
    acc += (err / sc) * (err / sc);
  }
  return std::sqrt(acc / static_cast<double>(std::max<std::size_t>(a.size(), 1)));
}

}  // namespace

void OdeSolverConfig::validate() const {
  if (!(rtol > 0) || !(atol > 0)) throw ContractError("OdeSolverConfig: tolerances must be positive");
  if (max_steps < 1) throw ContractError("OdeSolverConfig: max_steps must be >= 1");
  if (!(initial_step > 0)) throw ContractError("OdeSolverConfig: initial_step must be positive");
}

OdeResult dopri5_integrate(const Dynamics& f, const Tensor& z0, double t0, double t1, const OdeSolverConfig& cfg) {
  cfg.validate();
  OdeResult res;
  res.state = z0;
  if (t0 == t1) return res;
  const double dir = t1 > t0 ? 1.0 : -1.0;
  const double span = std::fabs(t1 - t0);
  double t = t0;
  double h = std::min(cfg.initial_step, span);
  double err_old = 1e-4;
  Tensor y = z0;
  Tensor k1 = f(y, t);
  ++res.evaluations;
  int trials = 0;
  while (dir * (t1 - t) > 1e-14 * std::max(1.0, std::fabs(t1))) {
    if (++trials > cfg.max_steps)
      throw DivergenceError("dopri5: exceeded max_steps=" + std::to_string(cfg.max_steps) + " at t=" +
                            std::to_string(t));
    const bool last = h >= dir * (t1 - t);
    if (last) h = dir * (t1 - t);
    const double hs = dir * h;
    Tensor k2 = f(combo(y, hs, {{a21, &k1}}), t + c2 * hs);
    Tensor k3 = f(combo(y, hs, {{a31, &k1}, {a32, &k2}}), t + c3 * hs);
    Tensor k4 = f(combo(y, hs, {{a41, &k1}, {a42, &k2}, {a43, &k3}}), t + c4 * hs);
    Tensor k5 = f(combo(y, hs, {{a51, &k1}, {a52, &k2}, {a53, &k3}, {a54, &k4}}), t + c5 * hs);
    Tensor k6 = f(combo(y, hs, {{a61, &k1}, {a62, &k2}, {a63, &k3}, {a64, &k4}, {a65, &k5}}), t + hs);
    Tensor y_new = combo(y, hs, {{b1, &k1}, {b3, &k3}, {b4, &k4}, {b5, &k5}, {b6, &k6}});
    if (!all_finite(y_new.data()))
      throw NumericError("dopri5: non-finite state at t=" + std::to_string(t));
    Tensor k7 = f(y_new, t + hs);
    res.evaluations += 6;
    double err = error_norm(y, y_new, hs, {{e1, &k1}, {e3, &k3}, {e4, &k4}, {e5, &k5}, {e6, &k6}, {e7, &k7}}, cfg);
    if (!std::isfinite(err)) throw NumericError("dopri5: non-finite error estimate");
    double fac11 = std::pow(std::max(err, 1e-300), kExpo);
    if (err <= 1.0) {
      double fac = fac11 / std::pow(err_old, kBeta) / kSafety;
      fac = std::clamp(fac, 1.0 / kMaxGrowth, 1.0 / kMinGrowth);
      err_old = std::max(err, 1e-4);
      t = last ? t1 : t + hs;
      y = y_new;
      k1 = k7;
      ++res.steps;
      h = h / fac;
    } else {
      ++res.rejected;
      h = h / std::min(1.0 / kMinGrowth, fac11 / kSafety);
    }
  }
  res.state = y;
  return res;
}

OdePath dopri5_path(const Dynamics& f, const Tensor& z0, const std::vector<double>& times,
                    const OdeSolverConfig& cfg) {
  if (times.empty()) throw ContractError("dopri5_path: no times");
  OdePath path;
  path.states.push_back(z0);
  Tensor z = z0;
  for (std::size_t i = 1; i < times.size(); ++i) {
    OdeResult r = dopri5_integrate(f, z, times[i - 1], times[i], cfg);
    z = r.state;
    path.steps += r.steps;
    path.states.push_back(z);
  }
  return path;
}

}  // namespace vs::num
