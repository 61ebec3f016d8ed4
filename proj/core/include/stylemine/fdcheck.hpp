#pragma once

// Independent gradient oracle: central finite differences in double
// precision, step 1e-4, checked against the tape's analytic gradients.
//
// Kinked ops (relu, clamp, std floor, norms at zero) report how close the
// forward pass came to a kink; inputs that land inside the margin are
// re-drawn rather than loosening the tolerance. A built-in fault-injection
// mode perturbs one backward rule by 1%, which the suite must detect — that
// guards the checker itself against going soft.

#include <functional>
#include <string>
#include <vector>

#include "stylemine/autodiff.hpp"
#include "stylemine/rng.hpp"

namespace stylemine::fdcheck {

struct FdOptions {
  double step = 1e-4;
  double rel_tol = 1e-4;
  // The forward pass must clear every kink by this much. 10x the step: a
  // one-element perturbation moves any pre-activation by far less, so no
  // finite-difference evaluation can cross a kink the probe cleared.
  double margin_threshold = 1e-3;
  int max_resamples = 8;
  // Independent random input draws per check; the reported error is the worst
  // across instances and the check passes only if every instance does.
  int instances = 50;
};

struct FdReport {
  std::string name;
  double max_rel_err = 0;
  double analytic_norm = 0;  // from the worst-error instance
  double fd_norm = 0;        // from the worst-error instance
  double kink_margin = 0;    // smallest accepted margin across instances
  int resamples = 0;         // rejected draws, summed across instances
  int instances = 0;         // instances actually evaluated
  bool pass = false;
};

std::string to_string(const FdReport& r);

// A named scalar-valued graph over a set of leaf inputs. `draw` fills the
// inputs for one attempt (attempt index varies the stream so resampling
// actually moves the point).
struct CheckSpec {
  std::string name;
  std::function<std::vector<Tensor64>(Rng&, int attempt)> draw;
  std::function<Var64(Tape64&, std::vector<Var64>&)> build;
  // 0 = use FdOptions.instances. Heavyweight extras dial this down.
  int instances_override = 0;
  // 0 = use FdOptions.margin_threshold. Deep compositions touch thousands of
  // kinked elements, so a 1e-3 margin rejects nearly every draw; they use a
  // tighter bound instead and the suite's deterministic pass at rel_tol is
  // the evidence that no draw actually crossed a kink.
  double margin_override = 0;
};

// Check one spec: per instance, draw inputs, reject draws that sit within the
// kink margin, then compare analytic and central-difference gradients
// element-wise over every input. rel = ||g_an - g_fd||_2 / max(||g_fd||_2,
// 1e-12), maximized over instances.
FdReport check_gradient(const CheckSpec& spec, Rng& rng, const FdOptions& opt = {});

// Every differentiable primitive plus composed model paths (the stylize
// pipeline gradient w.r.t. the style latent, and the stylizer training loss
// w.r.t. decoder/VAE weights).
std::vector<CheckSpec> standard_checks();

// Run the full suite. With inject_fault set, the relu backward rule is
// deliberately mis-scaled; the suite passes the meta-test iff at least one
// relu-dependent check then fails.
std::vector<FdReport> run_gradcheck_suite(uint64_t seed, bool inject_fault = false, const FdOptions& opt = {});

}  // namespace stylemine::fdcheck
