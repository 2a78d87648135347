#include "picanet/layers.hpp"

namespace picanet {

template <typename T>
ConvParams<T> add_conv(ParamRegistry<T>& reg, Initializer<T>& init, const std::string& name,
                       int cout, int cin, int kh, int kw, ParamGroup g, bool with_bias) {
  ConvParams<T> p;
  p.w = reg.add(name + ".weight", init.xavier({cout, cin, kh, kw}, cin * kh * kw, cout * kh * kw),
                g, true);
  if (with_bias) p.b = reg.add(name + ".bias", Tensor<T>::zeros({cout}), g, true);
  return p;
}

template <typename T>
BNParams<T> add_bn(ParamRegistry<T>& reg, const std::string& name, int c, ParamGroup g) {
  BNParams<T> p;
  p.gamma = reg.add(name + ".gamma", Tensor<T>::full({c}, T(1)), g, true);
  p.beta = reg.add(name + ".beta", Tensor<T>::zeros({c}), g, true);
  p.run_mean = reg.add(name + ".running_mean", Tensor<T>::zeros({c}), g, false);
  p.run_var = reg.add(name + ".running_var", Tensor<T>::full({c}, T(1)), g, false);
  return p;
}

template <typename T>
LstmParams<T> add_lstm(ParamRegistry<T>& reg, Initializer<T>& init, const std::string& name,
                       int in, int hidden, ParamGroup g) {
  LstmParams<T> p;
  p.w_ih = reg.add(name + ".w_ih", init.xavier({4 * hidden, in}, in, 4 * hidden), g, true);
  // Orthogonal columns on the recurrent matrix (4H x H).
  p.w_hh = reg.add(name + ".w_hh", init.orthogonal(4 * hidden, hidden), g, true);
  Tensor<T> b = Tensor<T>::zeros({4 * hidden});
  for (int j = 0; j < hidden; ++j) b.data()[hidden + j] = T(1);  // forget-gate bias
  p.b = reg.add(name + ".b", std::move(b), g, true);
  return p;
}

template <typename T>
RenetParams<T> add_renet(ParamRegistry<T>& reg, Initializer<T>& init, const std::string& name,
                         int in, int hidden, ParamGroup g) {
  RenetParams<T> p;
  p.hf = add_lstm(reg, init, name + ".h_fwd", in, hidden, g);
  p.hb = add_lstm(reg, init, name + ".h_bwd", in, hidden, g);
  p.vf = add_lstm(reg, init, name + ".v_fwd", 2 * hidden, hidden, g);
  p.vb = add_lstm(reg, init, name + ".v_bwd", 2 * hidden, hidden, g);
  return p;
}

template <typename T>
GlobalPiCANetParams<T> add_global_picanet(ParamRegistry<T>& reg, Initializer<T>& init,
                                          const std::string& name, int in_channels,
                                          const GlobalPiCANetConfig& cfg, ParamGroup g) {
  GlobalPiCANetParams<T> p;
  p.renet = add_renet(reg, init, name + ".renet", in_channels, cfg.renet_hidden, g);
  const int d = cfg.attn_grid_w * cfg.attn_grid_h;
  p.logits = add_conv(reg, init, name + ".logits", d, 2 * cfg.renet_hidden, 1, 1, g,
                      !cfg.use_bn_before_softmax);
  p.bn = add_bn(reg, name + ".bn", d, g);
  return p;
}

template <typename T>
LocalPiCANetParams<T> add_local_picanet(ParamRegistry<T>& reg, Initializer<T>& init,
                                        const std::string& name, int in_channels,
                                        const LocalPiCANetConfig& cfg, ParamGroup g) {
  LocalPiCANetParams<T> p;
  p.context = add_conv(reg, init, name + ".context", cfg.context_channels, in_channels,
                       cfg.context_kernel, cfg.context_kernel, g);
  const int d = cfg.attn_grid_w * cfg.attn_grid_h;
  p.logits = add_conv(reg, init, name + ".logits", d, cfg.context_channels, 1, 1, g, false);
  p.bn = add_bn(reg, name + ".bn", d, g);
  return p;
}

namespace ops {

template <typename T>
std::vector<Tensor<T>> bilstm_scan(Tape<T>* tp, const std::vector<Tensor<T>>& seq,
                                   const LstmParams<T>& fwd, const LstmParams<T>& bwd,
                                   int hidden) {
  if (seq.empty()) throw std::invalid_argument("bilstm_scan: empty sequence");
  const int b = seq[0].dim(0);
  const int len = static_cast<int>(seq.size());
  std::vector<Tensor<T>> hs_f(len), hs_b(len);
  Tensor<T> h = Tensor<T>::zeros({b, hidden});
  Tensor<T> c = Tensor<T>::zeros({b, hidden});
  for (int t = 0; t < len; ++t) {
    auto [hn, cn] = lstm_cell(tp, seq[t], h, c, fwd);
    hs_f[t] = hn;
    h = hn;
    c = cn;
  }
  h = Tensor<T>::zeros({b, hidden});
  c = Tensor<T>::zeros({b, hidden});
  for (int t = len - 1; t >= 0; --t) {
    auto [hn, cn] = lstm_cell(tp, seq[t], h, c, bwd);
    hs_b[t] = hn;
    h = hn;
    c = cn;
  }
  std::vector<Tensor<T>> out(len);
  for (int t = 0; t < len; ++t) out[t] = concat_cols(tp, hs_f[t], hs_b[t]);
  return out;
}

template <typename T>
Tensor<T> renet_sweep(Tape<T>* tp, const Tensor<T>& f, const RenetParams<T>& p, int hidden) {
  const int n = f.dim(0), h = f.dim(2), w = f.dim(3);
  std::vector<Tensor<T>> seq(w);
  for (int x = 0; x < w; ++x) seq[x] = take_w(tp, f, x);
  std::vector<Tensor<T>> hout = bilstm_scan(tp, seq, p.hf, p.hb, hidden);
  Tensor<T> horiz = stack_w(tp, hout, n, h);
  std::vector<Tensor<T>> rows(h);
  for (int y = 0; y < h; ++y) rows[y] = take_h(tp, horiz, y);
  std::vector<Tensor<T>> vout = bilstm_scan(tp, rows, p.vf, p.vb, hidden);
  return stack_h(tp, vout, n, w);
}

template <typename T>
std::pair<Tensor<T>, AttentionField<T>> global_picanet_forward(Tape<T>* tp, const Tensor<T>& f,
                                                               const GlobalPiCANetConfig& cfg,
                                                               GlobalPiCANetParams<T>& p,
                                                               BNMode mode) {
  const int h = f.dim(2), w = f.dim(3);
  Tensor<T> ren = renet_sweep(tp, f, p.renet, cfg.renet_hidden);
  Tensor<T> logits = conv2d(tp, ren, p.logits.w, p.logits.b, 1, 1, 0);
  if (cfg.use_bn_before_softmax)
    logits = batch_norm(tp, logits, p.bn.gamma, p.bn.beta, mode, p.bn.run_mean, p.bn.run_var);
  Tensor<T> attn = channel_softmax(tp, logits);
  auto positions = attention_positions(w, h, cfg.attn_grid_w, cfg.attn_grid_h, cfg.dilation);
  Tensor<T> att = global_attend(tp, f, attn, positions);
  AttentionField<T> field{attn, cfg.attn_grid_w, cfg.attn_grid_h, cfg.dilation};
  return {att, field};
}

template <typename T>
std::pair<Tensor<T>, AttentionField<T>> local_picanet_forward(Tape<T>* tp, const Tensor<T>& f,
                                                              const LocalPiCANetConfig& cfg,
                                                              LocalPiCANetParams<T>& p,
                                                              BNMode mode) {
  const int pad = (cfg.context_kernel - 1) * cfg.context_dilation / 2;
  Tensor<T> ctx =
      activation(tp, conv2d(tp, f, p.context.w, p.context.b, 1, cfg.context_dilation, pad),
                 Act::relu);
  Tensor<T> logits = conv2d(tp, ctx, p.logits.w, p.logits.b, 1, 1, 0);
  logits = batch_norm(tp, logits, p.bn.gamma, p.bn.beta, mode, p.bn.run_mean, p.bn.run_var);
  Tensor<T> attn = channel_softmax(tp, logits);
  Tensor<T> att = local_attend(tp, f, attn, cfg.attn_grid_w, cfg.attn_grid_h, cfg.attend_dilation);
  AttentionField<T> field{attn, cfg.attn_grid_w, cfg.attn_grid_h, cfg.attend_dilation};
  return {att, field};
}

#define PICANET_INSTANTIATE_LAYER_OPS(T)                                                        \
  template std::vector<Tensor<T>> bilstm_scan<T>(Tape<T>*, const std::vector<Tensor<T>>&,      \
                                                 const LstmParams<T>&, const LstmParams<T>&,   \
                                                 int);                                         \
  template Tensor<T> renet_sweep<T>(Tape<T>*, const Tensor<T>&, const RenetParams<T>&, int);   \
  template std::pair<Tensor<T>, AttentionField<T>> global_picanet_forward<T>(                  \
      Tape<T>*, const Tensor<T>&, const GlobalPiCANetConfig&, GlobalPiCANetParams<T>&,         \
      BNMode);                                                                                 \
  template std::pair<Tensor<T>, AttentionField<T>> local_picanet_forward<T>(                   \
      Tape<T>*, const Tensor<T>&, const LocalPiCANetConfig&, LocalPiCANetParams<T>&, BNMode);

PICANET_INSTANTIATE_LAYER_OPS(float)
PICANET_INSTANTIATE_LAYER_OPS(double)

}  // namespace ops

#define PICANET_INSTANTIATE_LAYERS(T)                                                          \
  template ConvParams<T> add_conv<T>(ParamRegistry<T>&, Initializer<T>&, const std::string&,  \
                                     int, int, int, int, ParamGroup, bool);                    \
  template BNParams<T> add_bn<T>(ParamRegistry<T>&, const std::string&, int, ParamGroup);      \
  template LstmParams<T> add_lstm<T>(ParamRegistry<T>&, Initializer<T>&, const std::string&,  \
                                     int, int, ParamGroup);                                    \
  template RenetParams<T> add_renet<T>(ParamRegistry<T>&, Initializer<T>&, const std::string&, \
                                       int, int, ParamGroup);                                  \
  template GlobalPiCANetParams<T> add_global_picanet<T>(                                       \
      ParamRegistry<T>&, Initializer<T>&, const std::string&, int, const GlobalPiCANetConfig&, \
      ParamGroup);                                                                             \
  template LocalPiCANetParams<T> add_local_picanet<T>(                                         \
      ParamRegistry<T>&, Initializer<T>&, const std::string&, int, const LocalPiCANetConfig&,  \
      ParamGroup);

PICANET_INSTANTIATE_LAYERS(float)
PICANET_INSTANTIATE_LAYERS(double)

}  // namespace picanet
