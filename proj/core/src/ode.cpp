#include "tivode/ode.hpp"

#include <algorithm>
#include <cmath>

#include "tivode/ops.hpp"

namespace tivode {

namespace {

// Dormand-Prince 5(4) tableau. b is the 5th-order solution row; e = b - b*
// gives the embedded error weights (e2 = 0 like b2).
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                 a64 = 49.0 / 176, a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784,
                 b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                 e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

// Controller clamps: standard Dormand-Prince practice.
constexpr double kShrinkLimit = 0.2;
constexpr double kGrowLimit = 5.0;

// Relative slack when deciding whether the next step lands on a grid time.
constexpr double kLandingSlack = 1e-12;

void require_finite_stage(const Tensor& k, double t, double h) {
  for (double v : k.values()) {
    if (!std::isfinite(v)) {
      throw IntegrationError("non-finite solver stage", t, h);
    }
  }
}

Tensor eval(const OdeFn& f, double t, const Tensor& y, double h, OdeStats* stats) {
  Tensor k = f(t, y);
  if (stats) ++stats->fevals;
  if (k.shape() != y.shape()) {
    throw DimensionError("dynamics returned " + shape_str(k.shape()) + " for state " +
                         shape_str(y.shape()));
  }
  require_finite_stage(k, t, h);
  return k;
}

}  // namespace

void SolverConfig::validate() const {
  if (!(h_min > 0) || !(h_min <= h_init) || !(h_init <= h_max)) {
    throw ContractError("solver config requires 0 < h_min <= h_init <= h_max");
  }
  if (!(rtol > 0) || !(atol > 0)) throw ContractError("solver tolerances must be positive");
  if (max_steps == 0) throw ContractError("max_steps must be positive");
  if (!(safety > 0) || safety >= 1.0) throw ContractError("safety must lie in (0, 1)");
}

TimeGrid::TimeGrid(std::vector<double> ts) : times(std::move(ts)) {
  if (times.empty()) throw ContractError("time grid is empty");
  double prev = -1.0;
  for (double t : times) {
    if (!std::isfinite(t)) throw InputError("time grid contains a non-finite value");
    if (t < 0.0) throw InputError("time grid contains a negative time");
    if (t <= prev) throw InputError("time grid must be strictly increasing");
    prev = t;
  }
}

Tensor rk4_step(const OdeFn& f, const Tensor& y, double t, double h) {
  if (!(h > 0)) throw ContractError("rk4_step requires h > 0");
  OdeStats* none = nullptr;
  Tensor k1 = eval(f, t, y, h, none);
  Tensor k2 = eval(f, t + 0.5 * h, add_scaled(y, {k1}, {0.5 * h}), h, none);
  Tensor k3 = eval(f, t + 0.5 * h, add_scaled(y, {k2}, {0.5 * h}), h, none);
  Tensor k4 = eval(f, t + h, add_scaled(y, {k3}, {h}), h, none);
  return add_scaled(y, {k1, k2, k3, k4}, {h / 6, h / 3, h / 3, h / 6});
}

Dopri5Step dopri5_step(const OdeFn& f, const Tensor& y, double t, double h,
                       const SolverConfig& cfg, const Tensor* k1, OdeStats* stats) {
  if (!(h > 0)) throw ContractError("dopri5_step requires h > 0");
  Tensor s1 = k1 ? *k1 : eval(f, t, y, h, stats);
  Tensor s2 = eval(f, t + c2 * h, add_scaled(y, {s1}, {h * a21}), h, stats);
  Tensor s3 = eval(f, t + c3 * h, add_scaled(y, {s1, s2}, {h * a31, h * a32}), h, stats);
  Tensor s4 =
      eval(f, t + c4 * h, add_scaled(y, {s1, s2, s3}, {h * a41, h * a42, h * a43}), h, stats);
  Tensor s5 = eval(f, t + c5 * h,
                   add_scaled(y, {s1, s2, s3, s4}, {h * a51, h * a52, h * a53, h * a54}), h,
                   stats);
  Tensor s6 = eval(
      f, t + h,
      add_scaled(y, {s1, s2, s3, s4, s5}, {h * a61, h * a62, h * a63, h * a64, h * a65}), h,
      stats);
  Tensor y_next =
      add_scaled(y, {s1, s3, s4, s5, s6}, {h * b1, h * b3, h * b4, h * b5, h * b6});
  require_finite_stage(y_next, t, h);
  Tensor s7 = eval(f, t + h, y_next, h, stats);

  const auto& yv = y.values();
  const auto& nv = y_next.values();
  const auto &v1 = s1.values(), &v3 = s3.values(), &v4 = s4.values(), &v5 = s5.values(),
             &v6 = s6.values(), &v7 = s7.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < yv.size(); ++i) {
    double err = h * (e1 * v1[i] + e3 * v3[i] + e4 * v4[i] + e5 * v5[i] + e6 * v6[i] +
                      e7 * v7[i]);
    double tol = cfg.atol + cfg.rtol * std::max(std::abs(yv[i]), std::abs(nv[i]));
    double r = err / tol;
    acc += r * r;
  }
  double err_norm = std::sqrt(acc / static_cast<double>(yv.size()));

  double factor =
      err_norm > 0.0 ? cfg.safety * std::pow(err_norm, -0.2) : kGrowLimit;
  factor = std::clamp(factor, kShrinkLimit, kGrowLimit);
  double h_next = std::clamp(h * factor, cfg.h_min, cfg.h_max);

  return Dopri5Step{std::move(y_next), std::move(s7), err_norm, h_next, err_norm <= 1.0};
}

OdeTrajectory solve_at(const OdeFn& f, const Tensor& xi0, const TimeGrid& grid,
                       const SolverConfig& cfg) {
  cfg.validate();
  if (grid.times.empty()) throw ContractError("solve_at: empty time grid");
  require_finite_stage(xi0, grid.times[0], 0.0);

  OdeTrajectory out;
  out.states.reserve(grid.size());
  out.states.push_back(xi0);
  Tensor y = xi0;
  double t = grid.times[0];
  std::size_t total_steps = 0;

  auto charge_step = [&](double h) {
    if (++total_steps > cfg.max_steps) {
      throw BudgetError("step budget exhausted", t, h);
    }
  };

  if (cfg.method == OdeMethod::rk4_fixed) {
    const double h = cfg.h_init;
    for (std::size_t gi = 1; gi < grid.size(); ++gi) {
      const double target = grid.times[gi];
      const double seg_start = t;
      std::size_t i = 0;
      while (t < target) {
        const double remaining = target - t;
        const bool landing = remaining <= h * (1.0 + kLandingSlack);
        const double h_step = landing ? remaining : h;
        charge_step(h_step);
        y = rk4_step(f, y, t, h_step);
        out.stats.fevals += 4;
        ++out.stats.accepted;
        ++i;
        t = landing ? target : seg_start + static_cast<double>(i) * h;
      }
      out.states.push_back(y);
    }
    return out;
  }

  // dopri5
  double h = std::clamp(cfg.h_init, cfg.h_min, cfg.h_max);
  Tensor k1 = eval(f, t, y, h, &out.stats);
  for (std::size_t gi = 1; gi < grid.size(); ++gi) {
    const double target = grid.times[gi];
    while (t < target) {
      const double remaining = target - t;
      const bool landing = remaining <= h * (1.0 + kLandingSlack);
      const double h_try = landing ? remaining : h;
      charge_step(h_try);
      Dopri5Step step = dopri5_step(f, y, t, h_try, cfg, &k1, &out.stats);
      if (step.accepted) {
        ++out.stats.accepted;
        y = std::move(step.y_next);
        k1 = std::move(step.k_last);
        if (landing) {
          t = target;  // keep h: a truncated step says nothing about stiffness
        } else {
          t += h_try;
          h = step.h_next;
        }
      } else {
        ++out.stats.rejected;
        if (h_try <= cfg.h_min * (1.0 + kLandingSlack)) {
          throw StiffnessError("step size collapsed to h_min with rejections", t, h_try);
        }
        h = step.h_next;
      }
    }
    out.states.push_back(y);
  }
  return out;
}

OdeTrajectory differentiable_solve(const OdeFn& f, const Tensor& xi0, const TimeGrid& grid,
                                   const SolverConfig& cfg) {
  if (!Tape::active()) {
    throw ContractError("differentiable_solve called without an active tape");
  }
  return solve_at(f, xi0, grid, cfg);
}

Tensor augment(const Tensor& xi, std::size_t extra) {
  if (extra == 0) return xi;
  std::size_t axis;
  if (xi.rank() == 3) {
    axis = 0;
  } else if (xi.rank() == 4) {
    axis = 1;
  } else {
    throw DimensionError("augment expects [C x H x W] or [B x C x H x W], got " +
                         shape_str(xi.shape()));
  }
  Shape zshape = xi.shape();
  zshape[axis] = extra;
  return concat({xi, Tensor::zeros(zshape)}, axis);
}

}  // namespace tivode
