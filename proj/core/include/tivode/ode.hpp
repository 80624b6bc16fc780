// Explicit Runge-Kutta integration of tensor-valued ODEs: classical RK4 on a
// fixed step and the adaptive Dormand-Prince 5(4) pair with FSAL reuse.
//
// Solves are differentiable by construction: state updates go through the op
// layer, so running under an active Tape records every stage
// (discretize-then-optimize). Step-size control reads raw values and is not
// differentiated. Requested output times are hit by truncating the step, not
// by dense output.
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "tivode/tensor.hpp"

namespace tivode {

using OdeFn = std::function<Tensor(double t, const Tensor& y)>;

enum class OdeMethod { rk4_fixed, dopri5 };

struct SolverConfig {
  OdeMethod method = OdeMethod::dopri5;
  double rtol = 1e-6;
  double atol = 1e-8;
  double h_init = 0.1;  // the fixed step for rk4_fixed
  double h_min = 1e-10;
  double h_max = 1.0;
  std::size_t max_steps = 100000;
  double safety = 0.9;

  void validate() const;  // throws ContractError on a bad combination
};

// Strictly increasing, finite, non-negative output times.
struct TimeGrid {
  std::vector<double> times;

  TimeGrid() = default;
  explicit TimeGrid(std::vector<double> ts);  // validates
  std::size_t size() const { return times.size(); }
};

struct OdeStats {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t fevals = 0;
};

struct OdeTrajectory {
  std::vector<Tensor> states;  // one per grid time; states[0] is the initial state
  OdeStats stats;
};

// One classical RK4 update from (t, y) with step h.
Tensor rk4_step(const OdeFn& f, const Tensor& y, double t, double h);

struct Dopri5Step {
  Tensor y_next;
  Tensor k_last;    // f(t+h, y_next); the next step's first stage under FSAL
  double err_norm;  // RMS of err / (atol + rtol*max(|y|,|y_next|)); accept iff <= 1
  double h_next;
  bool accepted;
};

// One Dormand-Prince 5(4) trial step. `k1` is f(t, y) if already known
// (FSAL); pass nullptr to have it evaluated. stats, when given, counts the
// function evaluations made.
Dopri5Step dopri5_step(const OdeFn& f, const Tensor& y, double t, double h,
                       const SolverConfig& cfg, const Tensor* k1 = nullptr,
                       OdeStats* stats = nullptr);

// Integrates from grid.times[0], emitting the state at every grid time.
// states[0] is ξ0 itself. Deterministic in (f, ξ0, grid, cfg).
OdeTrajectory solve_at(const OdeFn& f, const Tensor& xi0, const TimeGrid& grid,
                       const SolverConfig& cfg);

// solve_at with the guarantee that a tape is recording; use from training
// code where a silent non-tracked solve would be a bug.
OdeTrajectory differentiable_solve(const OdeFn& f, const Tensor& xi0, const TimeGrid& grid,
                                   const SolverConfig& cfg);

// Appends `extra` zero channels. [C x H x W] tensors grow along axis 0,
// [B x C x H x W] along axis 1. extra == 0 returns the input unchanged.
Tensor augment(const Tensor& xi, std::size_t extra);

}  // namespace tivode
