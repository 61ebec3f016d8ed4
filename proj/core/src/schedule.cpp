#include "stylemine/schedule.hpp"

#include <cmath>
#include <string>

namespace stylemine {

void ScheduleSpec::validate() const {
  if (base_lr <= 0) throw ContractError("ScheduleSpec: base_lr must be > 0");
  if (warmup_iters < 0) throw ContractError("ScheduleSpec: warmup_iters must be >= 0");
  if (max_iters <= 0) throw ContractError("ScheduleSpec: max_iters must be > 0");
  if (warmup_iters >= max_iters) throw ContractError("ScheduleSpec: warmup_iters must be < max_iters");
  if (power <= 0) throw ContractError("ScheduleSpec: power must be > 0");
}

double learning_rate(const ScheduleSpec& spec, int64_t iter) {
  spec.validate();
  if (iter < 0 || iter > spec.max_iters)
    throw ContractError("learning_rate: iter " + std::to_string(iter) + " outside [0, " +
                        std::to_string(spec.max_iters) + "]");
  if (iter < spec.warmup_iters)
    return spec.base_lr * static_cast<double>(iter) / static_cast<double>(spec.warmup_iters);
  const double progress = static_cast<double>(iter - spec.warmup_iters) /
                          static_cast<double>(spec.max_iters - spec.warmup_iters);
  return spec.base_lr * std::pow(1.0 - progress, spec.power);
}

}  // namespace stylemine
