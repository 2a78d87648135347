#pragma once

#include <optional>
#include <string>
#include <vector>

#include "picanet/layers.hpp"

namespace picanet {

struct EncoderSpec {
  int in_channels = 3;
  std::vector<int> channels = {16, 32, 64, 64, 128};
  std::vector<bool> pool = {true, true, false, false, false};  // 2x2/s2 after the block
  std::vector<int> dilation = {1, 1, 1, 2, 2};

  int blocks() const { return static_cast<int>(channels.size()); }
  int overall_stride() const {
    int s = 1;
    for (bool p : pool) s *= p ? 2 : 1;
    return s;
  }
  void validate() const;
};

// Placement codes, one per decoding module:
//   G global PiCANet   L local PiCANet   N plain fusion (no attention)
//   M/A max/avg pooling over the global footprint (ablation baselines)
//   m/a max/avg pooling over the local footprint
constexpr const char* kPlacementCodes = "GLNMmAa";

struct DecoderModuleSpec {
  int index = 0;  // pairs with encoder block index; modules run deepest (5) to final (1)
  char placement = 'N';
  int channels = 0;  // C^i, equals the encoder block-i channel count
  double loss_weight = 1.0;
  GlobalPiCANetConfig global;
  LocalPiCANetConfig local;
};

struct NetworkSpec {
  EncoderSpec encoder;
  std::vector<DecoderModuleSpec> decoders;  // deepest first
  int input_size = 64;

  std::string placement() const;
  void set_placement(const std::string& s);
  std::vector<double> loss_weights() const;
  void validate() const;

  // 5-block encoder, 5 decoding modules, placement "GGLLN", loss weights
  // 0.5, 0.5, 0.8, 0.8, 1 from deepest to final.
  static NetworkSpec toy(const std::string& placement = "GGLLN");
};

template <typename T>
struct EncoderBlockParams {
  ConvParams<T> conv1, conv2;
  BNParams<T> bn1;
};

template <typename T>
struct DecoderModuleParams {
  BNParams<T> pre_bn;
  ConvParams<T> fuse_in;
  std::optional<GlobalPiCANetParams<T>> global;
  std::optional<LocalPiCANetParams<T>> local;
  ConvParams<T> fusion;
  BNParams<T> post_bn;
  ConvParams<T> side;
};

template <typename T>
struct ModelParams {
  std::vector<EncoderBlockParams<T>> enc;
  std::vector<DecoderModuleParams<T>> dec;
};

// Registers every parameter of the network in a fixed order (encoder blocks
// shallow to deep, then decoder modules deep to final) and initializes them
// from one seeded stream.
template <typename T>
ModelParams<T> register_model(ParamRegistry<T>& reg, const NetworkSpec& spec,
                              std::uint64_t seed);

template <typename T>
struct NetOutputs {
  std::vector<Tensor<T>> side_maps;  // deepest first; back() is the prediction
  std::vector<std::optional<AttentionField<T>>> attention;  // per module
  Tensor<T> final_map;
};

// En^i = the block's second conv output before any ReLU; the next block
// consumes relu(En^i) (pooled where the spec says so).
template <typename T>
std::vector<Tensor<T>> encoder_forward(Tape<T>* tp, const Tensor<T>& image,
                                       const EncoderSpec& spec,
                                       std::vector<EncoderBlockParams<T>>& params, BNMode mode);

template <typename T>
struct DecoderModuleOut {
  Tensor<T> dec;
  Tensor<T> side;
  std::optional<AttentionField<T>> attention;
};

template <typename T>
DecoderModuleOut<T> decoder_module_forward(Tape<T>* tp, const Tensor<T>& en,
                                           const Tensor<T>& dec_prev,
                                           const DecoderModuleSpec& spec,
                                           DecoderModuleParams<T>& params, BNMode mode);

template <typename T>
NetOutputs<T> network_forward(Tape<T>* tp, const Tensor<T>& image, const NetworkSpec& spec,
                              ModelParams<T>& params, BNMode mode);

// sum_i w_i * mean-BCE(side_i, gt nearest-resized to side_i's extent).
// gt values must lie in [0, 1].
template <typename T>
Tensor<T> deep_supervised_loss(Tape<T>* tp, const std::vector<Tensor<T>>& side_maps,
                               const Tensor<T>& gt, const std::vector<double>& weights);

// Nearest-neighbor mask resize (keeps binary masks binary).
template <typename T>
Tensor<T> nearest_resize(const Tensor<T>& x, int ho, int wo);

}  // namespace picanet
