#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "picanet/gradcheck.hpp"
#include "picanet/network.hpp"

using namespace picanet;
using testutil::max_abs_diff;
using testutil::randt;

namespace {

NetworkSpec micro_spec() {
  NetworkSpec ns;
  ns.encoder.channels = {4, 6};
  ns.encoder.pool = {false, false};
  ns.encoder.dilation = {1, 1};
  ns.input_size = 8;
  DecoderModuleSpec d2;
  d2.index = 2;
  d2.placement = 'G';
  d2.channels = 6;
  d2.loss_weight = 0.6;
  d2.global.renet_hidden = 2;
  d2.global.attn_grid_w = 2;
  d2.global.attn_grid_h = 2;
  d2.global.dilation = 2;
  DecoderModuleSpec d1;
  d1.index = 1;
  d1.placement = 'L';
  d1.channels = 4;
  d1.loss_weight = 1.0;
  d1.local.context_kernel = 3;
  d1.local.context_dilation = 1;
  d1.local.context_channels = 3;
  d1.local.attn_grid_w = 3;
  d1.local.attn_grid_h = 3;
  d1.local.attend_dilation = 1;
  ns.decoders = {d2, d1};
  return ns;
}

}  // namespace

TEST_CASE("encoder: toy spec feature sizes and zero propagation") {
  NetworkSpec spec = NetworkSpec::toy();
  ParamRegistry<float> reg;
  ModelParams<float> params = register_model(reg, spec, 3);

  std::mt19937_64 rng(61);
  auto img = randt<float>({1, 3, 64, 64}, rng, 0.0, 1.0);
  auto en = encoder_forward<float>(nullptr, img, spec.encoder, params.enc, BNMode::train);
  REQUIRE(en.size() == 5);
  const int sizes[5] = {64, 32, 16, 16, 16};
  const int chans[5] = {16, 32, 64, 64, 128};
  for (int i = 0; i < 5; ++i) {
    CHECK(en[static_cast<std::size_t>(i)].dim(1) == chans[i]);
    CHECK(en[static_cast<std::size_t>(i)].dim(2) == sizes[i]);
    CHECK(en[static_cast<std::size_t>(i)].dim(3) == sizes[i]);
  }

  // En is the raw second conv output: for a random image it must go negative
  // somewhere (a ReLU'd map could not)
  bool negative = false;
  for (std::size_t i = 0; i < en[0].numel(); ++i) negative |= en[0].data()[i] < 0.0f;
  CHECK(negative);

  // freshly initialized biases are zero, so a zero image yields zero features
  auto zero = Tensor<float>::zeros({1, 3, 64, 64});
  ParamRegistry<float> reg2;
  ModelParams<float> fresh = register_model(reg2, spec, 3);
  auto en0 = encoder_forward<float>(nullptr, zero, spec.encoder, fresh.enc, BNMode::train);
  for (const auto& e : en0)
    for (std::size_t i = 0; i < e.numel(); ++i) CHECK(e.data()[i] == 0.0f);
}

TEST_CASE("encoder: eval mode keeps samples independent") {
  NetworkSpec spec = NetworkSpec::toy();
  ParamRegistry<float> reg;
  ModelParams<float> params = register_model(reg, spec, 5);
  std::mt19937_64 rng(62);
  auto one = randt<float>({1, 3, 64, 64}, rng, 0.0, 1.0);
  auto two = Tensor<float>::zeros({2, 3, 64, 64});
  std::copy(one.data(), one.data() + one.numel(), two.data());
  std::mt19937_64 rng2(63);
  for (std::size_t i = 0; i < one.numel(); ++i)
    two.data()[one.numel() + i] = static_cast<float>(rng2() % 1000) / 1000.0f;

  auto a = network_forward<float>(nullptr, one, spec, params, BNMode::eval);
  auto b = network_forward<float>(nullptr, two, spec, params, BNMode::eval);
  const std::size_t plane = static_cast<std::size_t>(64) * 64;
  for (std::size_t i = 0; i < plane; ++i)
    CHECK(a.final_map.data()[i] == b.final_map.data()[i]);
}

TEST_CASE("decoder module: D^3 arithmetic, sigmoid range, upsample-iff-half") {
  std::mt19937_64 rng(64);
  DecoderModuleSpec ds;
  ds.index = 3;
  ds.placement = 'N';
  ds.channels = 64;
  ParamRegistry<float> reg;
  Initializer<float> init(7);
  DecoderModuleParams<float> p;
  p.pre_bn = add_bn(reg, "m.pre_bn", 64, ParamGroup::decoder);
  p.fuse_in = add_conv(reg, init, "m.fuse_in", 64, 64 + 64, 1, 1, ParamGroup::decoder);
  p.fusion = add_conv(reg, init, "m.fusion", 64, 64, 1, 1, ParamGroup::decoder, false);
  p.post_bn = add_bn(reg, "m.post_bn", 64, ParamGroup::decoder);
  p.side = add_conv(reg, init, "m.side", 1, 64, 1, 1, ParamGroup::decoder);

  auto en = randt<float>({1, 64, 16, 16}, rng);
  auto prev = randt<float>({1, 64, 16, 16}, rng);
  auto out = decoder_module_forward<float>(nullptr, en, prev, ds, p, BNMode::train);
  CHECK(out.dec.shape() == std::vector<int>{1, 64, 16, 16});
  CHECK(out.side.shape() == std::vector<int>{1, 1, 16, 16});
  CHECK(!out.attention.has_value());
  for (std::size_t i = 0; i < out.side.numel(); ++i) {
    CHECK(out.side.data()[i] > 0.0f);
    CHECK(out.side.data()[i] < 1.0f);
  }

  // half-resolution previous map gets upsampled, anything else is rejected
  auto prev_half = randt<float>({1, 64, 8, 8}, rng);
  auto up = decoder_module_forward<float>(nullptr, en, prev_half, ds, p, BNMode::train);
  CHECK(up.dec.shape() == std::vector<int>{1, 64, 16, 16});
  auto prev_bad = randt<float>({1, 64, 12, 12}, rng);
  CHECK_THROWS_AS(decoder_module_forward<float>(nullptr, en, prev_bad, ds, p, BNMode::train),
                  std::invalid_argument);
}

TEST_CASE("decoder module: N placement equals a zeroed-attention G module") {
  std::mt19937_64 rng(65);
  const int c = 6;
  DecoderModuleSpec dn;
  dn.index = 1;
  dn.placement = 'N';
  dn.channels = c;
  DecoderModuleSpec dg = dn;
  dg.placement = 'G';
  dg.global.renet_hidden = 2;
  dg.global.attn_grid_w = 3;
  dg.global.attn_grid_h = 3;
  dg.global.dilation = 1;

  ParamRegistry<double> rn, rg;
  Initializer<double> in1(3), in2(4);
  DecoderModuleParams<double> pn, pg;
  pn.pre_bn = add_bn(rn, "n.pre_bn", c, ParamGroup::decoder);
  pn.fuse_in = add_conv(rn, in1, "n.fuse_in", c, 2 * c, 1, 1, ParamGroup::decoder);
  pn.fusion = add_conv(rn, in1, "n.fusion", c, c, 1, 1, ParamGroup::decoder, false);
  pn.post_bn = add_bn(rn, "n.post_bn", c, ParamGroup::decoder);
  pn.side = add_conv(rn, in1, "n.side", 1, c, 1, 1, ParamGroup::decoder);

  pg.pre_bn = add_bn(rg, "g.pre_bn", c, ParamGroup::decoder);
  pg.fuse_in = add_conv(rg, in2, "g.fuse_in", c, 2 * c, 1, 1, ParamGroup::decoder);
  pg.global = add_global_picanet(rg, in2, "g.global", c, dg.global, ParamGroup::decoder);
  pg.fusion = add_conv(rg, in2, "g.fusion", c, 2 * c, 1, 1, ParamGroup::decoder, false);
  pg.post_bn = add_bn(rg, "g.post_bn", c, ParamGroup::decoder);
  pg.side = add_conv(rg, in2, "g.side", 1, c, 1, 1, ParamGroup::decoder);

  // share every fused-path parameter; route the attended half into zeros
  auto copy_into = [](const Tensor<double>& src, Tensor<double>& dst) {
    std::copy(src.data(), src.data() + src.numel(), dst.data());
  };
  copy_into(pn.fuse_in.w, pg.fuse_in.w);
  copy_into(pn.fuse_in.b, pg.fuse_in.b);
  copy_into(pn.side.w, pg.side.w);
  copy_into(pn.side.b, pg.side.b);
  for (auto& v : pg.fusion.w.vals()) v = 0.0;
  for (int co = 0; co < c; ++co)
    for (int ci = 0; ci < c; ++ci)
      pg.fusion.w.data()[co * 2 * c + ci] = pn.fusion.w.data()[co * c + ci];

  std::mt19937_64 r2(66);
  auto en = randt<double>({2, c, 6, 6}, r2);
  auto prev = randt<double>({2, c, 6, 6}, r2);
  auto a = decoder_module_forward<double>(nullptr, en, prev, dn, pn, BNMode::train);
  auto b = decoder_module_forward<double>(nullptr, en, prev, dg, pg, BNMode::train);
  CHECK(max_abs_diff(a.dec, b.dec) <= 1e-12);
  CHECK(max_abs_diff(a.side, b.side) <= 1e-12);
  CHECK(!a.attention.has_value());
  CHECK(b.attention.has_value());
}

TEST_CASE("network: side maps, monotone sizes, eval determinism, attention slots") {
  NetworkSpec spec = NetworkSpec::toy();
  ParamRegistry<float> reg;
  ModelParams<float> params = register_model(reg, spec, 9);
  std::mt19937_64 rng(67);
  auto img = randt<float>({2, 3, 64, 64}, rng, 0.0, 1.0);

  auto out = network_forward<float>(nullptr, img, spec, params, BNMode::eval);
  REQUIRE(out.side_maps.size() == 5);
  const int sizes[5] = {16, 16, 16, 32, 64};
  for (int i = 0; i < 5; ++i) {
    CHECK(out.side_maps[static_cast<std::size_t>(i)].shape() ==
          std::vector<int>{2, 1, sizes[i], sizes[i]});
    if (i > 0) CHECK(sizes[i] >= sizes[i - 1]);
  }
  CHECK(same_storage(out.final_map, out.side_maps.back()));

  // G,G,L,L,N: attention rides on the first four modules only
  REQUIRE(out.attention.size() == 5);
  CHECK(out.attention[0].has_value());
  CHECK(out.attention[1].has_value());
  CHECK(out.attention[2].has_value());
  CHECK(out.attention[3].has_value());
  CHECK(!out.attention[4].has_value());
  CHECK(out.attention[0]->grid_w == 6);
  CHECK(out.attention[2]->grid_w == 5);

  auto again = network_forward<float>(nullptr, img, spec, params, BNMode::eval);
  for (std::size_t i = 0; i < out.final_map.numel(); ++i)
    CHECK(out.final_map.data()[i] == again.final_map.data()[i]);
}

TEST_CASE("network: placement grammar round-trips and rejects junk") {
  NetworkSpec spec = NetworkSpec::toy();
  CHECK(spec.placement() == "GGLLN");
  for (const char* s : {"NNNNN", "GGNNN", "LLLLL", "MMmmN", "AAaaN", "GLNMA"}) {
    spec.set_placement(s);
    CHECK(spec.placement() == s);
    spec.validate();
  }
  CHECK_THROWS_AS(spec.set_placement("GGLL"), std::invalid_argument);   // wrong length
  CHECK_THROWS_AS(spec.set_placement("GGLLX"), std::invalid_argument);  // unknown code
  CHECK_THROWS_AS(NetworkSpec::toy("QQQQQ"), std::invalid_argument);

  // every placement variant can actually be instantiated
  for (const char* s : {"NNNNN", "GGNNN", "GGLLN", "MMmmN", "AAaaN"}) {
    ParamRegistry<float> reg;
    auto params = register_model(reg, NetworkSpec::toy(s), 11);
    CHECK(reg.trainable_params() > 0);
  }
}

TEST_CASE("network: pooled placements forward and differ from plain fusion") {
  std::mt19937_64 rng(68);
  auto img = randt<float>({1, 3, 64, 64}, rng, 0.0, 1.0);
  ParamRegistry<float> rm, rn;
  auto spec_m = NetworkSpec::toy("MMmmN");
  auto spec_n = NetworkSpec::toy("NNNNN");
  auto pm = register_model(rm, spec_m, 13);
  auto pn = register_model(rn, spec_n, 13);
  auto om = network_forward<float>(nullptr, img, spec_m, pm, BNMode::train);
  auto on = network_forward<float>(nullptr, img, spec_n, pn, BNMode::train);
  CHECK(om.final_map.shape() == on.final_map.shape());
  for (const auto& slot : om.attention) CHECK(!slot.has_value());  // pooling carries no field
  CHECK(max_abs_diff(om.final_map, on.final_map) > 0.0);
}

TEST_CASE("deep_supervised_loss: closed forms and symmetry") {
  std::mt19937_64 rng(69);
  auto gt = Tensor<double>::zeros({1, 1, 16, 16});
  for (std::size_t i = 0; i < gt.numel(); ++i) gt.data()[i] = (rng() % 2) ? 1.0 : 0.0;
  const std::vector<double> w{0.5, 0.5, 0.8, 0.8, 1.0};

  SUBCASE("uniform 0.5 prediction costs ln2 per unit weight") {
    std::vector<Tensor<double>> sides;
    for (int s : {4, 4, 8, 8, 16}) sides.push_back(Tensor<double>::full({1, 1, s, s}, 0.5));
    auto loss = deep_supervised_loss<double>(nullptr, sides, gt, w);
    CHECK(loss.data()[0] == doctest::Approx(std::log(2.0) * 3.6).epsilon(1e-12));
  }

  SUBCASE("perfect prediction is only the clamp floor away from zero") {
    std::vector<Tensor<double>> sides(5, gt);
    auto loss = deep_supervised_loss<double>(nullptr, sides, gt, w);
    CHECK(loss.data()[0] <= 3.6 * 1.2e-7);
    CHECK(loss.data()[0] >= 0.0);
  }

  SUBCASE("complement symmetry") {
    std::vector<Tensor<double>> sides;
    for (int k = 0; k < 5; ++k) sides.push_back(randt<double>({1, 1, 16, 16}, rng, 0.05, 0.95));
    auto flipped_gt = gt.clone();
    for (auto& v : flipped_gt.vals()) v = 1.0 - v;
    std::vector<Tensor<double>> flipped;
    for (const auto& s : sides) {
      auto f = s.clone();
      for (auto& v : f.vals()) v = 1.0 - v;
      flipped.push_back(f);
    }
    auto a = deep_supervised_loss<double>(nullptr, sides, gt, w);
    auto b = deep_supervised_loss<double>(nullptr, flipped, flipped_gt, w);
    CHECK(a.data()[0] == doctest::Approx(b.data()[0]).epsilon(1e-12));
  }

  SUBCASE("out-of-range targets are rejected") {
    std::vector<Tensor<double>> sides(5, Tensor<double>::full({1, 1, 16, 16}, 0.5));
    auto bad = gt.clone();
    bad.data()[0] = 1.5;
    CHECK_THROWS(deep_supervised_loss<double>(nullptr, sides, bad, w));
  }
}

TEST_CASE("nearest_resize keeps masks binary") {
  std::mt19937_64 rng(70);
  auto m = Tensor<double>::zeros({1, 1, 10, 10});
  for (std::size_t i = 0; i < m.numel(); ++i) m.data()[i] = (rng() % 2) ? 1.0 : 0.0;
  for (int s : {3, 7, 16, 25}) {
    auto r = nearest_resize<double>(m, s, s);
    REQUIRE(r.shape() == std::vector<int>{1, 1, s, s});
    for (std::size_t i = 0; i < r.numel(); ++i)
      CHECK((r.data()[i] == 0.0 || r.data()[i] == 1.0));
  }
}

TEST_CASE("whole micro network: sampled finite differences across the loss") {
  NetworkSpec ns = micro_spec();
  ParamRegistry<double> reg;
  ModelParams<double> params = register_model(reg, ns, 17);
  CHECK(reg.trainable_params() < 5000);

  // Zero-initialized biases put several pre-ReLU values exactly at the kink
  // (a 1x1 conv over an all-dead pixel outputs its bias, i.e. exactly 0), and
  // finite differences at a kink measure the two-sided slope average while the
  // analytic pass takes the relu'(0)=0 branch. Jitter every parameter so the
  // check runs at a generic, differentiable point.
  std::mt19937_64 jitter(99);
  std::uniform_real_distribution<double> jd(0.02, 0.08);
  for (auto& e : reg.entries())
    if (e.trainable)
      for (auto& v : e.tensor.vals()) v += (jitter() & 1 ? 1.0 : -1.0) * jd(jitter);

  std::mt19937_64 rng(71);
  auto img = randt<double>({1, 3, 8, 8}, rng, 0.0, 1.0, true);
  auto gt = Tensor<double>::zeros({1, 1, 8, 8});
  for (std::size_t i = 0; i < gt.numel(); ++i) gt.data()[i] = (rng() % 2) ? 1.0 : 0.0;

  std::vector<Tensor<double>> targets{img};
  for (auto& e : reg.entries())
    if (e.trainable) targets.push_back(e.tensor);
  for (unsigned sample_seed : {77u, 5u}) {
    const double err = fd_max_rel_err(
        targets,
        [=](Tape<double>* tp) mutable {
          auto pp = params;
          auto out = network_forward<double>(tp, img, ns, pp, BNMode::train);
          return deep_supervised_loss<double>(tp, out.side_maps, gt, ns.loss_weights());
        },
        1e-4, "", 20, sample_seed);
    CHECK(err <= 1e-4);
  }
}
