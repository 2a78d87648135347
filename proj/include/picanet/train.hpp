#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "picanet/data.hpp"
#include "picanet/metrics.hpp"
#include "picanet/network.hpp"

namespace picanet {

// Raised when training or gradient checking hits non-finite numbers; the CLI
// maps it to exit status 2.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double base_lr = 0.01;
  double encoder_lr_multiplier = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int batch = 8;
  int max_steps = 2000;
  double decay_factor = 0.1;
  int decay_steps = 700;
  std::uint64_t seed = 0;

  void validate() const;
};

// base_lr * decay_factor^floor(step / decay_steps)
double lr_at_step(int step, const TrainConfig& cfg);

template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;  // one slot per registry entry
};

// v <- momentum*v + (g + weight_decay*p); p <- p - lr*v, with the encoder
// group's lr scaled by encoder_lr_multiplier. Non-trainable entries (BN
// running stats) are untouched.
template <typename T>
void sgd_momentum_step(ParamRegistry<T>& reg, SgdState<T>& state, const TrainConfig& cfg,
                       int step);

struct TrainHooks {
  // after each optimizer step (step is 0-based, lr the rate that was applied)
  std::function<void(int step, double lr, double loss)> on_step;
  // after each pass over the data and once more at the end if training
  // stopped mid-epoch; the report scores the first min(16, n) samples
  std::function<void(int epoch, int step, const MetricReport&)> on_epoch;
};

struct TrainOutcome {
  double final_loss = 0;
  int steps = 0;
};

// Batches follow an epoch-seeded shuffle; every sample is augmented on the
// way into a batch. A non-finite loss aborts with a NumericError naming the
// first op that produced a non-finite value on a traced replay of the
// offending batch.
template <typename T>
TrainOutcome train_model(const NetworkSpec& spec, ParamRegistry<T>& reg, ModelParams<T>& params,
                         const std::vector<Sample<T>>& data, const TrainConfig& cfg,
                         const TrainHooks& hooks = {});

}  // namespace picanet
