#pragma once

#include <cstdint>

#include "stylemine/paramset.hpp"

namespace stylemine {

// Polynomial learning-rate decay with a linear warm-up prefix.
//   iter <  warmup : base_lr * iter / warmup
//   iter >= warmup : base_lr * (1 - (iter-warmup)/(max-warmup))^power
// The decay phase counts iterations after the warm-up so the curve is
// continuous at iter == warmup (the rate there is exactly base_lr).
struct ScheduleSpec {
  double base_lr = 2.5e-4;
  int64_t warmup_iters = 0;
  int64_t max_iters = 1;
  double power = 0.9;

  void validate() const;
};

double learning_rate(const ScheduleSpec& spec, int64_t iter);

// SGD with momentum and decoupled-from-nothing classic L2 weight decay:
//   g = grad + weight_decay * value
//   m = momentum * m + g
//   value -= lr * m
// Throws ContractError if any entry has no gradient deposited since the last
// zero_grads(), which catches optimizer/graph wiring bugs early.
template <class T>
void sgd_step(ParamSet<T>& params, double lr, double momentum, double weight_decay) {
  for (auto& e : params) {
    if (!e.grad_set) throw ContractError("sgd_step: missing gradient for parameter " + e.name);
    T* v = e.value.ptr();
    T* g = e.grad.ptr();
    T* m = e.momentum.ptr();
    const int64_t n = e.value.numel();
    const T mu = static_cast<T>(momentum);
    const T wd = static_cast<T>(weight_decay);
    const T step = static_cast<T>(lr);
    for (int64_t i = 0; i < n; ++i) {
      T gi = g[i] + wd * v[i];
      m[i] = mu * m[i] + gi;
      v[i] -= step * m[i];
    }
  }
}

}  // namespace stylemine
