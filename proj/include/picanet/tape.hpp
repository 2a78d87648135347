#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "picanet/tensor.hpp"

namespace picanet {

// Ordered record of executed ops. Each record owns a backward closure that
// scatters the output gradients back onto the inputs it captured. One tape is
// owned by one logical thread; forward ops append, backward() replays in
// reverse. Ops called with a null tape run inference-only (nothing recorded).
template <typename T>
class Tape {
 public:
  void record(const char* op, std::vector<Tensor<T>> outs, std::function<void()> fn) {
    recs_.push_back({op, std::move(outs), std::move(fn)});
  }

  // Forward NaN tracing: when enabled, ops report their outputs here and the
  // first op that produced a non-finite value is remembered.
  bool trace_nan = false;
  void check_output(const char* op, const Tensor<T>& out) {
    if (!trace_nan || !nan_op_.empty()) return;
    for (const T& v : out.vals())
      if (!std::isfinite(static_cast<double>(v))) {
        nan_op_ = op;
        return;
      }
  }
  const std::string& first_nan_op() const { return nan_op_; }

  // Test hook: perturb the output gradient of every record with this op name
  // before its backward rule runs, so gradient checks against finite
  // differences must fail for that operator (negative control).
  std::string corrupt_op;

  void clear() {
    recs_.clear();
    nan_op_.clear();
  }
  std::size_t size() const { return recs_.size(); }

  void run_backward() {
    for (auto it = recs_.rbegin(); it != recs_.rend(); ++it) {
      if (!corrupt_op.empty() && corrupt_op == it->op) {
        for (auto& out : it->outs) {
          T* g = out.grad_data();
          for (std::size_t i = 0; i < out.numel(); ++i) g[i] = g[i] * T(1.02) + T(1e-3);
        }
      }
      it->fn();
    }
  }

 private:
  struct Rec {
    const char* op;
    std::vector<Tensor<T>> outs;
    std::function<void()> fn;
  };
  std::vector<Rec> recs_;
  std::string nan_op_;
};

// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse, populating grad
// on every reachable tensor that requires gradient.
template <typename T>
void backward(Tensor<T>& loss, Tape<T>& tape) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  loss.grad_data()[0] = T(1);
  tape.run_backward();
}

}  // namespace picanet
