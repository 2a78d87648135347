#include "picanet/network.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string_view>

namespace picanet {

void EncoderSpec::validate() const {
  if (in_channels <= 0) throw std::invalid_argument("encoder: in_channels must be positive");
  if (channels.empty()) throw std::invalid_argument("encoder: needs at least one block");
  if (pool.size() != channels.size() || dilation.size() != channels.size())
    throw std::invalid_argument("encoder: channels/pool/dilation must have one entry per block");
  for (int c : channels)
    if (c <= 0) throw std::invalid_argument("encoder: block channels must be positive");
  for (int d : dilation)
    if (d <= 0) throw std::invalid_argument("encoder: dilation must be positive");
}

std::string NetworkSpec::placement() const {
  std::string s;
  for (const auto& d : decoders) s.push_back(d.placement);
  return s;
}

void NetworkSpec::set_placement(const std::string& s) {
  if (s.size() != decoders.size())
    throw std::invalid_argument("placement needs one code per decoding module (" +
                                std::to_string(decoders.size()) + "), got \"" + s + "\"");
  const std::string_view codes(kPlacementCodes);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (codes.find(s[i]) == std::string_view::npos)
      throw std::invalid_argument(std::string("unknown placement code '") + s[i] +
                                  "' (allowed: " + kPlacementCodes + ")");
    decoders[i].placement = s[i];
  }
}

std::vector<double> NetworkSpec::loss_weights() const {
  std::vector<double> w;
  for (const auto& d : decoders) w.push_back(d.loss_weight);
  return w;
}

void NetworkSpec::validate() const {
  encoder.validate();
  if (input_size <= 0) throw std::invalid_argument("input_size must be positive");
  if (input_size % encoder.overall_stride() != 0)
    throw std::invalid_argument("input_size must be divisible by the encoder stride (" +
                                std::to_string(encoder.overall_stride()) + ")");
  if (decoders.size() != static_cast<std::size_t>(encoder.blocks()))
    throw std::invalid_argument("need one decoding module per encoder block");
  const std::string_view codes(kPlacementCodes);
  for (std::size_t k = 0; k < decoders.size(); ++k) {
    const auto& d = decoders[k];
    if (d.index != encoder.blocks() - static_cast<int>(k))
      throw std::invalid_argument("decoding modules must run from the deepest block to block 1");
    if (d.channels != encoder.channels[d.index - 1])
      throw std::invalid_argument("decoding module " + std::to_string(d.index) +
                                  " must carry the paired block's channel count");
    if (codes.find(d.placement) == std::string_view::npos)
      throw std::invalid_argument(std::string("unknown placement code '") + d.placement + "'");
    if (d.loss_weight < 0) throw std::invalid_argument("loss weights must be non-negative");
    if (d.global.renet_hidden <= 0 || d.global.attn_grid_w <= 0 || d.global.attn_grid_h <= 0 ||
        d.global.dilation <= 0)
      throw std::invalid_argument("global attention config values must be positive");
    if (d.local.context_kernel <= 0 || d.local.context_dilation <= 0 ||
        d.local.context_channels <= 0 || d.local.attn_grid_w <= 0 || d.local.attn_grid_h <= 0 ||
        d.local.attend_dilation <= 0)
      throw std::invalid_argument("local attention config values must be positive");
    if (d.placement == 'L' || d.placement == 'm' || d.placement == 'a') {
      if (d.local.attn_grid_w % 2 == 0 || d.local.attn_grid_h % 2 == 0)
        throw std::invalid_argument("local attention grid extents must be odd");
      if (d.placement == 'L' && d.local.context_kernel % 2 == 0)
        throw std::invalid_argument("local context kernel must be odd");
    }
  }
}

NetworkSpec NetworkSpec::toy(const std::string& placement) {
  NetworkSpec spec;
  const double weights[] = {0.5, 0.5, 0.8, 0.8, 1.0};  // deepest to final
  for (int i = spec.encoder.blocks(); i >= 1; --i) {
    DecoderModuleSpec d;
    d.index = i;
    d.channels = spec.encoder.channels[i - 1];
    d.loss_weight = weights[spec.encoder.blocks() - i];
    spec.decoders.push_back(d);
  }
  spec.set_placement(placement);
  spec.validate();
  return spec;
}

template <typename T>
ModelParams<T> register_model(ParamRegistry<T>& reg, const NetworkSpec& spec,
                              std::uint64_t seed) {
  spec.validate();
  Initializer<T> init(seed);
  ModelParams<T> mp;
  const auto& es = spec.encoder;
  int cin = es.in_channels;
  for (int i = 0; i < es.blocks(); ++i) {
    const std::string base = "encoder.block" + std::to_string(i + 1);
    EncoderBlockParams<T> bp;
    bp.conv1 = add_conv(reg, init, base + ".conv1", es.channels[i], cin, 3, 3,
                        ParamGroup::encoder, /*with_bias=*/false);
    bp.bn1 = add_bn(reg, base + ".bn1", es.channels[i], ParamGroup::encoder);
    bp.conv2 =
        add_conv(reg, init, base + ".conv2", es.channels[i], es.channels[i], 3, 3, ParamGroup::encoder);
    mp.enc.push_back(std::move(bp));
    cin = es.channels[i];
  }
  int prev_c = es.channels.back();
  for (const auto& ds : spec.decoders) {
    const std::string base = "decoder.mod" + std::to_string(ds.index);
    DecoderModuleParams<T> dp;
    dp.pre_bn = add_bn(reg, base + ".pre_bn", ds.channels, ParamGroup::decoder);
    dp.fuse_in = add_conv(reg, init, base + ".fuse_in", ds.channels, ds.channels + prev_c, 1, 1,
                          ParamGroup::decoder);
    if (ds.placement == 'G')
      dp.global =
          add_global_picanet(reg, init, base + ".global", ds.channels, ds.global, ParamGroup::decoder);
    else if (ds.placement == 'L')
      dp.local =
          add_local_picanet(reg, init, base + ".local", ds.channels, ds.local, ParamGroup::decoder);
    const int fuse_c = ds.placement == 'N' ? ds.channels : 2 * ds.channels;
    dp.fusion = add_conv(reg, init, base + ".fusion", ds.channels, fuse_c, 1, 1,
                         ParamGroup::decoder, /*with_bias=*/false);
    dp.post_bn = add_bn(reg, base + ".post_bn", ds.channels, ParamGroup::decoder);
    dp.side = add_conv(reg, init, base + ".side", 1, ds.channels, 1, 1, ParamGroup::decoder);
    mp.dec.push_back(std::move(dp));
    prev_c = ds.channels;
  }
  return mp;
}

template <typename T>
std::vector<Tensor<T>> encoder_forward(Tape<T>* tp, const Tensor<T>& image,
                                       const EncoderSpec& spec,
                                       std::vector<EncoderBlockParams<T>>& params, BNMode mode) {
  if (image.rank() != 4 || image.dim(1) != spec.in_channels)
    throw std::invalid_argument("encoder expects N x " + std::to_string(spec.in_channels) +
                                " x H x W input");
  if (image.dim(2) % spec.overall_stride() != 0 || image.dim(3) % spec.overall_stride() != 0)
    throw std::invalid_argument("encoder input extent must be divisible by " +
                                std::to_string(spec.overall_stride()));
  if (params.size() != static_cast<std::size_t>(spec.blocks()))
    throw std::invalid_argument("encoder parameter count does not match the spec");
  std::vector<Tensor<T>> en;
  Tensor<T> x = image;
  for (int i = 0; i < spec.blocks(); ++i) {
    auto& bp = params[i];
    const int d = spec.dilation[i];
    Tensor<T> y = ops::conv2d(tp, x, bp.conv1.w, bp.conv1.b, 1, d, d);
    y = ops::batch_norm(tp, y, bp.bn1.gamma, bp.bn1.beta, mode, bp.bn1.run_mean, bp.bn1.run_var);
    y = ops::activation(tp, y, Act::relu);
    Tensor<T> e = ops::conv2d(tp, y, bp.conv2.w, bp.conv2.b, 1, d, d);
    en.push_back(e);
    if (i + 1 < spec.blocks()) {
      x = ops::activation(tp, e, Act::relu);
      if (spec.pool[i]) x = ops::max_pool2x2(tp, x);
    }
  }
  return en;
}

template <typename T>
DecoderModuleOut<T> decoder_module_forward(Tape<T>* tp, const Tensor<T>& en_raw,
                                           const Tensor<T>& dec_prev,
                                           const DecoderModuleSpec& ds,
                                           DecoderModuleParams<T>& p, BNMode mode) {
  Tensor<T> en = ops::batch_norm(tp, en_raw, p.pre_bn.gamma, p.pre_bn.beta, mode,
                                 p.pre_bn.run_mean, p.pre_bn.run_var);
  en = ops::activation(tp, en, Act::relu);
  Tensor<T> prev = dec_prev;
  if (prev.dim(2) != en.dim(2) || prev.dim(3) != en.dim(3)) {
    if (prev.dim(2) * 2 != en.dim(2) || prev.dim(3) * 2 != en.dim(3))
      throw std::invalid_argument(
          "decoder: previous map must match the feature extent or be exactly half of it");
    prev = ops::bilinear_upsample2x(tp, prev);
  }
  Tensor<T> cat = ops::concat_channels(tp, {en, prev});
  Tensor<T> f = ops::conv2d(tp, cat, p.fuse_in.w, p.fuse_in.b, 1, 1, 0);
  f = ops::activation(tp, f, Act::relu);

  DecoderModuleOut<T> out;
  Tensor<T> fuse_src = f;
  if (ds.placement != 'N') {
    Tensor<T> att;
    switch (ds.placement) {
      case 'G': {
        auto [a, field] = ops::global_picanet_forward(tp, f, ds.global, *p.global, mode);
        att = a;
        out.attention = std::move(field);
        break;
      }
      case 'L': {
        auto [a, field] = ops::local_picanet_forward(tp, f, ds.local, *p.local, mode);
        att = a;
        out.attention = std::move(field);
        break;
      }
      case 'M':
      case 'A': {
        auto pos = attention_positions(f.dim(3), f.dim(2), ds.global.attn_grid_w,
                                       ds.global.attn_grid_h, ds.global.dilation);
        att = ops::pooled_context_global(tp, f, ds.placement == 'M' ? PoolMode::max : PoolMode::avg,
                                         pos);
        break;
      }
      case 'm':
      case 'a':
        att = ops::pooled_context_local(tp, f, ds.placement == 'm' ? PoolMode::max : PoolMode::avg,
                                        ds.local.attn_grid_w, ds.local.attn_grid_h,
                                        ds.local.attend_dilation);
        break;
      default:
        throw std::invalid_argument(std::string("unknown placement code '") + ds.placement + "'");
    }
    fuse_src = ops::concat_channels(tp, {f, att});
  }
  Tensor<T> dec = ops::conv2d(tp, fuse_src, p.fusion.w, p.fusion.b, 1, 1, 0);
  dec = ops::batch_norm(tp, dec, p.post_bn.gamma, p.post_bn.beta, mode, p.post_bn.run_mean,
                        p.post_bn.run_var);
  out.dec = ops::activation(tp, dec, Act::relu);
  Tensor<T> s = ops::conv2d(tp, out.dec, p.side.w, p.side.b, 1, 1, 0);
  out.side = ops::activation(tp, s, Act::sigmoid);
  return out;
}

template <typename T>
NetOutputs<T> network_forward(Tape<T>* tp, const Tensor<T>& image, const NetworkSpec& spec,
                              ModelParams<T>& params, BNMode mode) {
  spec.validate();
  if (params.dec.size() != spec.decoders.size())
    throw std::invalid_argument("decoder parameter count does not match the spec");
  auto en = encoder_forward(tp, image, spec.encoder, params.enc, mode);
  NetOutputs<T> out;
  Tensor<T> prev = en.back();  // the deepest module fuses against the encoder's own final map
  for (std::size_t k = 0; k < spec.decoders.size(); ++k) {
    const auto& ds = spec.decoders[k];
    auto r = decoder_module_forward(tp, en[ds.index - 1], prev, ds, params.dec[k], mode);
    out.side_maps.push_back(r.side);
    out.attention.push_back(std::move(r.attention));
    prev = r.dec;
  }
  out.final_map = out.side_maps.back();
  return out;
}

template <typename T>
Tensor<T> nearest_resize(const Tensor<T>& x, int ho, int wo) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("nearest_resize: extents must be positive");
  if (ho == h && wo == w) return x;
  Tensor<T> y = Tensor<T>::zeros({n, c, ho, wo});
  const double sy = static_cast<double>(h) / ho, sx = static_cast<double>(w) / wo;
  const T* xv = x.data();
  T* yv = y.data();
  for (int i = 0; i < n * c; ++i) {
    const T* xp = xv + static_cast<std::size_t>(i) * h * w;
    T* yp = yv + static_cast<std::size_t>(i) * ho * wo;
    for (int yo = 0; yo < ho; ++yo) {
      const int ys = std::min(h - 1, static_cast<int>((yo + 0.5) * sy));
      for (int xo = 0; xo < wo; ++xo) {
        const int xs = std::min(w - 1, static_cast<int>((xo + 0.5) * sx));
        yp[static_cast<std::size_t>(yo) * wo + xo] = xp[static_cast<std::size_t>(ys) * w + xs];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> deep_supervised_loss(Tape<T>* tp, const std::vector<Tensor<T>>& side_maps,
                               const Tensor<T>& gt, const std::vector<double>& weights) {
  if (side_maps.empty() || side_maps.size() != weights.size())
    throw std::invalid_argument("deep supervision needs one weight per side map");
  if (gt.rank() != 4 || gt.dim(1) != 1)
    throw std::invalid_argument("ground truth must be N x 1 x H x W");
  for (std::size_t i = 0; i < gt.numel(); ++i) {
    const T v = gt.data()[i];
    if (!(v >= T(0) && v <= T(1)))
      throw std::invalid_argument("ground truth values must lie in [0, 1]");
  }
  std::vector<Tensor<T>> losses;
  std::vector<T> w;
  for (std::size_t i = 0; i < side_maps.size(); ++i) {
    const auto& s = side_maps[i];
    if (s.dim(0) != gt.dim(0))
      throw std::invalid_argument("side map and ground truth batch sizes differ");
    Tensor<T> target = nearest_resize(gt, s.dim(2), s.dim(3));
    losses.push_back(ops::bce_mean(tp, s, target));
    w.push_back(static_cast<T>(weights[i]));
  }
  return ops::weighted_sum_scalars(tp, losses, w);
}

template ModelParams<float> register_model(ParamRegistry<float>&, const NetworkSpec&, std::uint64_t);
template ModelParams<double> register_model(ParamRegistry<double>&, const NetworkSpec&,
                                            std::uint64_t);
template std::vector<Tensor<float>> encoder_forward(Tape<float>*, const Tensor<float>&,
                                                    const EncoderSpec&,
                                                    std::vector<EncoderBlockParams<float>>&, BNMode);
template std::vector<Tensor<double>> encoder_forward(Tape<double>*, const Tensor<double>&,
                                                     const EncoderSpec&,
                                                     std::vector<EncoderBlockParams<double>>&,
                                                     BNMode);
template DecoderModuleOut<float> decoder_module_forward(Tape<float>*, const Tensor<float>&,
                                                        const Tensor<float>&,
                                                        const DecoderModuleSpec&,
                                                        DecoderModuleParams<float>&, BNMode);
template DecoderModuleOut<double> decoder_module_forward(Tape<double>*, const Tensor<double>&,
                                                         const Tensor<double>&,
                                                         const DecoderModuleSpec&,
                                                         DecoderModuleParams<double>&, BNMode);
template NetOutputs<float> network_forward(Tape<float>*, const Tensor<float>&, const NetworkSpec&,
                                           ModelParams<float>&, BNMode);
template NetOutputs<double> network_forward(Tape<double>*, const Tensor<double>&,
                                            const NetworkSpec&, ModelParams<double>&, BNMode);
template Tensor<float> nearest_resize(const Tensor<float>&, int, int);
template Tensor<double> nearest_resize(const Tensor<double>&, int, int);
template Tensor<float> deep_supervised_loss(Tape<float>*, const std::vector<Tensor<float>>&,
                                            const Tensor<float>&, const std::vector<double>&);
template Tensor<double> deep_supervised_loss(Tape<double>*, const std::vector<Tensor<double>>&,
                                             const Tensor<double>&, const std::vector<double>&);

}  // namespace picanet
