#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "picanet/attention.hpp"
#include "picanet/ops.hpp"

namespace picanet {

enum class ParamGroup { encoder, decoder };

// Ordered name -> tensor map for parameters and BN running stats. Ordering is
// registration order and is stable across runs: it fixes both the
// initialization stream and the checkpoint layout.
template <typename T>
class ParamRegistry {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    ParamGroup group;
    bool trainable;
  };

  Tensor<T>& add(const std::string& name, Tensor<T> t, ParamGroup group, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("ParamRegistry: duplicate name " + name);
    t.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t), group, trainable});
    return entries_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamRegistry: no entry " + name);
    return entries_[it->second].tensor;
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamRegistry*>(this)->at(name);
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::size_t trainable_params() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Deterministic weight init: one seeded stream consumed in registration
// order. Draws are always double precision so float and double builds see the
// same underlying values. Conv weights are fan-based uniform (Xavier), LSTM
// recurrent matrices orthogonal (column-orthonormal), forget biases 1.
template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor<T> xavier(std::vector<int> shape, int fan_in, int fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor<T> t = Tensor<T>::zeros(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(dist(rng_));
    return t;
  }

  // rows x cols with orthonormal columns (requires rows >= cols): QR of a
  // Gaussian via modified Gram-Schmidt.
  Tensor<T> orthogonal(int rows, int cols) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> a(static_cast<std::size_t>(rows) * cols);
    for (auto& v : a) v = dist(rng_);
    for (int j = 0; j < cols; ++j) {
      for (int k = 0; k < j; ++k) {
        double dot = 0;
        for (int r = 0; r < rows; ++r)
          dot += a[static_cast<std::size_t>(r) * cols + j] * a[static_cast<std::size_t>(r) * cols + k];
        for (int r = 0; r < rows; ++r)
          a[static_cast<std::size_t>(r) * cols + j] -= dot * a[static_cast<std::size_t>(r) * cols + k];
      }
      double norm = 0;
      for (int r = 0; r < rows; ++r) {
        const double v = a[static_cast<std::size_t>(r) * cols + j];
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (int r = 0; r < rows; ++r) a[static_cast<std::size_t>(r) * cols + j] /= norm;
    }
    Tensor<T> t = Tensor<T>::zeros({rows, cols});
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(a[i]);
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

// Bias is omitted (left undefined) for convolutions whose output feeds
// straight into a batch norm: the normalization cancels any constant
// per-channel shift, so the bias would be dead weight with a zero gradient.
template <typename T>
struct ConvParams {
  Tensor<T> w, b;
};

template <typename T>
struct BNParams {
  Tensor<T> gamma, beta, run_mean, run_var;
};

template <typename T>
struct RenetParams {
  LstmParams<T> hf, hb, vf, vb;  // horizontal fwd/bwd, vertical fwd/bwd
};

template <typename T>
struct GlobalPiCANetParams {
  RenetParams<T> renet;
  ConvParams<T> logits;  // 1x1, 2*hidden -> D
  BNParams<T> bn;
};

template <typename T>
struct LocalPiCANetParams {
  ConvParams<T> context;  // context_kernel, dilated
  ConvParams<T> logits;   // 1x1, context_channels -> D̄
  BNParams<T> bn;
};

template <typename T>
ConvParams<T> add_conv(ParamRegistry<T>& reg, Initializer<T>& init, const std::string& name,
                       int cout, int cin, int kh, int kw, ParamGroup g, bool with_bias = true);

template <typename T>
BNParams<T> add_bn(ParamRegistry<T>& reg, const std::string& name, int c, ParamGroup g);

template <typename T>
LstmParams<T> add_lstm(ParamRegistry<T>& reg, Initializer<T>& init, const std::string& name,
                       int in, int hidden, ParamGroup g);

template <typename T>
RenetParams<T> add_renet(ParamRegistry<T>& reg, Initializer<T>& init, const std::string& name,
                         int in, int hidden, ParamGroup g);

template <typename T>
GlobalPiCANetParams<T> add_global_picanet(ParamRegistry<T>& reg, Initializer<T>& init,
                                          const std::string& name, int in_channels,
                                          const GlobalPiCANetConfig& cfg, ParamGroup g);

template <typename T>
LocalPiCANetParams<T> add_local_picanet(ParamRegistry<T>& reg, Initializer<T>& init,
                                        const std::string& name, int in_channels,
                                        const LocalPiCANetConfig& cfg, ParamGroup g);

namespace ops {

// Forward + backward biLSTM chains over a sequence of B x C matrices;
// per-position outputs are the two hidden states concatenated (B x 2*hidden).
template <typename T>
std::vector<Tensor<T>> bilstm_scan(Tape<T>* tp, const std::vector<Tensor<T>>& seq,
                                   const LstmParams<T>& fwd, const LstmParams<T>& bwd,
                                   int hidden);

// One horizontal biLSTM pass over rows, then one vertical pass over columns
// of the horizontal result; output has 2*hidden channels and a global
// receptive field.
template <typename T>
Tensor<T> renet_sweep(Tape<T>* tp, const Tensor<T>& f, const RenetParams<T>& p, int hidden);

template <typename T>
std::pair<Tensor<T>, AttentionField<T>> global_picanet_forward(Tape<T>* tp, const Tensor<T>& f,
                                                               const GlobalPiCANetConfig& cfg,
                                                               GlobalPiCANetParams<T>& p,
                                                               BNMode mode);

template <typename T>
std::pair<Tensor<T>, AttentionField<T>> local_picanet_forward(Tape<T>* tp, const Tensor<T>& f,
                                                              const LocalPiCANetConfig& cfg,
                                                              LocalPiCANetParams<T>& p,
                                                              BNMode mode);

}  // namespace ops
}  // namespace picanet
