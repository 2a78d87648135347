#include "picanet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace picanet {

void TrainConfig::validate() const {
  if (base_lr <= 0 || encoder_lr_multiplier <= 0 || decay_factor <= 0)
    throw std::invalid_argument("train: rates must be positive");
  if (momentum < 0 || weight_decay < 0)
    throw std::invalid_argument("train: momentum/weight_decay must be non-negative");
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  if (max_steps < 0) throw std::invalid_argument("train: max_steps must be >= 0");
  if (decay_steps < 1) throw std::invalid_argument("train: decay_steps must be >= 1");
  if (max_steps > 0 && decay_steps > max_steps)
    throw std::invalid_argument("train: decay_steps must not exceed max_steps");
}

double lr_at_step(int step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("lr_at_step: step must be >= 0");
  return cfg.base_lr * std::pow(cfg.decay_factor, static_cast<double>(step / cfg.decay_steps));
}

template <typename T>
void sgd_momentum_step(ParamRegistry<T>& reg, SgdState<T>& state, const TrainConfig& cfg,
                       int step) {
  auto& entries = reg.entries();
  if (state.velocity.empty()) {
    state.velocity.resize(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i)
      state.velocity[i].assign(entries[i].tensor.numel(), T(0));
  }
  if (state.velocity.size() != entries.size())
    throw std::invalid_argument("optimizer state does not match the registry");
  const double lr = lr_at_step(step, cfg);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (!e.trainable) continue;
    const T group_lr = static_cast<T>(
        lr * (e.group == ParamGroup::encoder ? cfg.encoder_lr_multiplier : 1.0));
    const T mu = static_cast<T>(cfg.momentum);
    const T wd = static_cast<T>(cfg.weight_decay);
    T* p = e.tensor.data();
    const T* g = e.tensor.grad_data();
    T* v = state.velocity[i].data();
    for (std::size_t j = 0; j < e.tensor.numel(); ++j) {
      v[j] = mu * v[j] + (g[j] + wd * p[j]);
      p[j] -= group_lr * v[j];
    }
  }
}

namespace {

template <typename T>
Tensor<T> forward_loss(Tape<T>* tp, const NetworkSpec& spec, ModelParams<T>& params,
                       const Tensor<T>& images, const Tensor<T>& masks) {
  auto out = network_forward(tp, images, spec, params, BNMode::train);
  return deep_supervised_loss(tp, out.side_maps, masks, spec.loss_weights());
}

}  // namespace

template <typename T>
TrainOutcome train_model(const NetworkSpec& spec, ParamRegistry<T>& reg, ModelParams<T>& params,
                         const std::vector<Sample<T>>& data, const TrainConfig& cfg,
                         const TrainHooks& hooks) {
  spec.validate();
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  const int n = static_cast<int>(data.size());

  // Progress metrics on a fixed prefix of the training set: large enough to
  // show a trend, small enough that the report never dominates an epoch.
  auto epoch_report = [&](int epoch, int step) {
    if (!hooks.on_epoch) return;
    const int m = std::min(16, n);
    std::vector<Sample<T>> subset(data.begin(), data.begin() + m);
    hooks.on_epoch(epoch, step, evaluate_model(spec, params, subset, cfg.batch));
  };

  SgdState<T> state;
  TrainOutcome outcome;
  int step = 0, epoch = 0;
  while (step < cfg.max_steps) {
    std::mt19937_64 rng(cfg.seed + 0x517cc1b727220a95ULL * static_cast<std::uint64_t>(epoch + 1));
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    bool completed_epoch = true;
    for (int at = 0; at < n; at += cfg.batch) {
      if (step >= cfg.max_steps) {
        completed_epoch = false;
        break;
      }
      std::vector<Sample<T>> batch_samples;
      std::vector<int> idx;
      for (int i = at; i < std::min(n, at + cfg.batch); ++i) {
        batch_samples.push_back(augment(data[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])], rng));
        idx.push_back(static_cast<int>(batch_samples.size()) - 1);
      }
      auto [images, masks] = make_batch(batch_samples, idx);

      Tape<T> tape;
      Tensor<T> loss = forward_loss(&tape, spec, params, images, masks);
      const double loss_val = static_cast<double>(loss.data()[0]);
      if (!std::isfinite(loss_val)) {
        Tape<T> trace;
        trace.trace_nan = true;
        forward_loss(&trace, spec, params, images, masks);
        const std::string& op = trace.first_nan_op();
        throw NumericError("non-finite loss at step " + std::to_string(step) +
                           (op.empty() ? "" : ", first produced by " + op));
      }
      backward(loss, tape);
      const double lr = lr_at_step(step, cfg);
      sgd_momentum_step(reg, state, cfg, step);
      reg.zero_grads();
      outcome.final_loss = loss_val;
      outcome.steps = ++step;
      if (hooks.on_step) hooks.on_step(step - 1, lr, loss_val);
    }
    ++epoch;
    if (completed_epoch) epoch_report(epoch, step);
    if (!completed_epoch && step >= cfg.max_steps) epoch_report(epoch, step);
  }
  return outcome;
}

template void sgd_momentum_step(ParamRegistry<float>&, SgdState<float>&, const TrainConfig&, int);
template void sgd_momentum_step(ParamRegistry<double>&, SgdState<double>&, const TrainConfig&,
                                int);
template TrainOutcome train_model(const NetworkSpec&, ParamRegistry<float>&, ModelParams<float>&,
                                  const std::vector<Sample<float>>&, const TrainConfig&,
                                  const TrainHooks&);
template TrainOutcome train_model(const NetworkSpec&, ParamRegistry<double>&,
                                  ModelParams<double>&, const std::vector<Sample<double>>&,
                                  const TrainConfig&, const TrainHooks&);

}  // namespace picanet
