#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "picanet/data.hpp"
#include "picanet/image_io.hpp"
#include "picanet/train.hpp"

using namespace picanet;
using testutil::randt;

namespace {

template <typename T>
bool same_bytes(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

template <typename T>
Tensor<T> mirror_x(const Tensor<T>& t) {
  auto out = Tensor<T>::zeros(t.shape());
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.data()[(static_cast<std::size_t>(ch) * h + y) * w + x] =
            t.data()[(static_cast<std::size_t>(ch) * h + y) * w + (w - 1 - x)];
  return out;
}

// Re-derive the three draws augment() consumes so a test can pick seeds that
// force a particular flip/offset combination.
struct AugDraws {
  bool flip;
  int oy, ox;
};
AugDraws draws_for(std::uint64_t seed, int range) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> flipd(0, 1), offd(0, range);
  AugDraws d{};
  d.flip = flipd(rng) == 1;
  d.oy = offd(rng);
  d.ox = offd(rng);
  return d;
}
std::uint64_t find_seed(bool flip, int oy, int ox, int range) {
  for (std::uint64_t s = 0; s < 100000; ++s) {
    const AugDraws d = draws_for(s, range);
    if (d.flip == flip && d.oy == oy && d.ox == ox) return s;
  }
  throw std::runtime_error("no seed found for requested augment draws");
}

}  // namespace

TEST_CASE("synth_dataset: deterministic, index-stable, binary masks in bounds") {
  auto a = synth_dataset<float>(7, 3);
  auto b = synth_dataset<float>(7, 3);
  auto c = synth_dataset<float>(7, 10);
  REQUIRE(a.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(same_bytes(a[i].image, b[i].image));
    CHECK(same_bytes(a[i].mask, b[i].mask));
    CHECK(a[i].name == b[i].name);
    // sample i depends on (seed, i) only, not on n
    CHECK(same_bytes(a[i].image, c[i].image));
    CHECK(same_bytes(a[i].mask, c[i].mask));
  }
  CHECK(a[0].name == "synth0");
  CHECK(a[2].name == "synth2");
  auto d = synth_dataset<float>(8, 1);
  CHECK(!same_bytes(a[0].image, d[0].image));

  auto corpus = synth_dataset<float>(11, 100);
  for (const auto& s : corpus) {
    REQUIRE(s.image.shape() == std::vector<int>{3, 64, 64});
    REQUIRE(s.mask.shape() == std::vector<int>{1, 64, 64});
    std::size_t fg = 0;
    for (std::size_t i = 0; i < s.mask.numel(); ++i) {
      const float v = s.mask.data()[i];
      CHECK((v == 0.0f || v == 1.0f));
      fg += v == 1.0f;
    }
    const double frac = static_cast<double>(fg) / (64.0 * 64.0);
    CHECK(frac >= 0.05);
    CHECK(frac <= 0.5);
    for (std::size_t i = 0; i < s.image.numel(); ++i) {
      CHECK(s.image.data()[i] >= 0.0f);
      CHECK(s.image.data()[i] <= 1.0f);
    }
  }

  // foreground/background separation: mean per-sample |fg - bg| over this
  // 100-sample corpus measures 0.325 (0.302 on a second corpus); 0.25 leaves
  // margin without letting the generator degrade into low-contrast scenes
  double contrast = 0;
  for (const auto& s : corpus) {
    const std::size_t plane = 64 * 64;
    double fg = 0, bg = 0;
    std::size_t nfg = 0, nbg = 0;
    for (std::size_t p = 0; p < plane; ++p) {
      const bool in = s.mask.data()[p] > 0.5f;
      for (int ch = 0; ch < 3; ++ch) {
        const double v = s.image.data()[ch * plane + p];
        if (in) {
          fg += v;
          ++nfg;
        } else {
          bg += v;
          ++nbg;
        }
      }
    }
    contrast += std::abs(fg / static_cast<double>(nfg) - bg / static_cast<double>(nbg));
  }
  CHECK(contrast / 100.0 >= 0.25);

  CHECK_THROWS_AS(synth_dataset<float>(1, 0), std::invalid_argument);
}

TEST_CASE("augment: determinism, window reconstruction, forced-flip mirror") {
  auto ds = synth_dataset<float>(21, 3);
  const int S = 64, R = 72;

  SUBCASE("identical rng seeds give byte-identical batches") {
    std::mt19937_64 r1(5), r2(5), r3(6);
    for (const auto& s : ds) {
      auto a = augment(s, r1);
      auto b = augment(s, r2);
      CHECK(same_bytes(a.image, b.image));
      CHECK(same_bytes(a.mask, b.mask));
      CHECK(a.name == s.name);
    }
    auto a = augment(ds[0], r1);
    auto b = augment(ds[0], r3);
    CHECK(!same_bytes(a.image, b.image));  // draws differ for these seeds
  }

  SUBCASE("output is exactly one flip/crop window of the resized sample") {
    auto resized = bilinear_resize(ds[1].image, R, R);
    auto rmask = bilinear_resize(ds[1].mask, R, R);
    for (auto& v : rmask.vals()) v = v >= 0.5f ? 1.0f : 0.0f;

    std::mt19937_64 rng(91);
    auto out = augment(ds[1], rng);
    for (std::size_t i = 0; i < out.mask.numel(); ++i)
      CHECK((out.mask.data()[i] == 0.0f || out.mask.data()[i] == 1.0f));

    int matches = 0;
    for (int flip = 0; flip < 2; ++flip)
      for (int oy = 0; oy <= R - S; ++oy)
        for (int ox = 0; ox <= R - S; ++ox) {
          bool ok = true;
          for (int ch = 0; ch < 3 && ok; ++ch)
            for (int y = 0; y < S && ok; ++y)
              for (int x = 0; x < S && ok; ++x) {
                const int sx = flip ? R - 1 - (ox + x) : ox + x;
                ok = out.image.data()[(static_cast<std::size_t>(ch) * S + y) * S + x] ==
                     resized.data()[(static_cast<std::size_t>(ch) * R + oy + y) * R + sx];
              }
          for (int y = 0; y < S && ok; ++y)
            for (int x = 0; x < S && ok; ++x) {
              const int sx = flip ? R - 1 - (ox + x) : ox + x;
              ok = out.mask.data()[static_cast<std::size_t>(y) * S + x] ==
                   rmask.data()[(static_cast<std::size_t>(oy + y)) * R + sx];
            }
          matches += ok;
        }
    CHECK(matches == 1);  // offsets in [0, R-S], flip applied before the crop
  }

  SUBCASE("forcing the flip mirrors the matching unflipped crop") {
    const AugDraws want{true, 3, 2};
    std::mt19937_64 rf(find_seed(want.flip, want.oy, want.ox, R - S));
    std::mt19937_64 rn(find_seed(false, want.oy, R - S - want.ox, R - S));
    auto flipped = augment(ds[2], rf);
    auto plain = augment(ds[2], rn);
    CHECK(same_bytes(mirror_x(flipped.image), plain.image));
    CHECK(same_bytes(mirror_x(flipped.mask), plain.mask));
    // mirroring twice restores the flipped output: the flip is an involution
    CHECK(same_bytes(mirror_x(mirror_x(flipped.image)), flipped.image));
  }
}

TEST_CASE("make_batch stacks selected samples in order") {
  auto ds = synth_dataset<float>(13, 5, 16);
  auto [img, msk] = make_batch(ds, {4, 0, 2});
  REQUIRE(img.shape() == std::vector<int>{3, 3, 16, 16});
  REQUIRE(msk.shape() == std::vector<int>{3, 1, 16, 16});
  const std::size_t isz = ds[0].image.numel(), msz = ds[0].mask.numel();
  const int order[3] = {4, 0, 2};
  for (int n = 0; n < 3; ++n) {
    for (std::size_t i = 0; i < isz; ++i)
      CHECK(img.data()[n * isz + i] == ds[static_cast<std::size_t>(order[n])].image.data()[i]);
    for (std::size_t i = 0; i < msz; ++i)
      CHECK(msk.data()[n * msz + i] == ds[static_cast<std::size_t>(order[n])].mask.data()[i]);
  }
}

TEST_CASE("lr_at_step: staircase decay and group multiplier") {
  TrainConfig cfg;  // base 0.01, factor 0.1 every 700
  CHECK(lr_at_step(0, cfg) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(lr_at_step(699, cfg) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(lr_at_step(700, cfg) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(lr_at_step(1399, cfg) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(lr_at_step(1400, cfg) == doctest::Approx(0.0001).epsilon(1e-12));

  TrainConfig full;  // full-scale schedule: tenth at step 7000
  full.decay_steps = 7000;
  CHECK(lr_at_step(7000, full) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(lr_at_step(6999, full) == doctest::Approx(0.01).epsilon(1e-12));

  // encoder parameters run 0.1x the schedule
  CHECK(lr_at_step(0, cfg) * cfg.encoder_lr_multiplier ==
        doctest::Approx(0.001).epsilon(1e-12));
}

TEST_CASE("sgd_momentum_step: closed forms") {
  auto mk = [](ParamRegistry<double>& reg, const std::string& name, ParamGroup g,
               std::vector<double> vals, std::vector<double> grads, bool trainable = true) {
    auto t = Tensor<double>::from_data({static_cast<int>(vals.size())}, vals);
    auto& slot = reg.add(name, t, g, trainable);
    if (trainable)
      for (std::size_t i = 0; i < grads.size(); ++i) slot.grad_data()[i] = grads[i];
    return slot;
  };

  SUBCASE("no momentum, no decay: plain gradient descent") {
    ParamRegistry<double> reg;
    auto p = mk(reg, "p", ParamGroup::decoder, {1.0, 2.0}, {0.5, -0.25});
    TrainConfig cfg;
    cfg.momentum = 0;
    cfg.weight_decay = 0;
    cfg.base_lr = 0.1;
    SgdState<double> st;
    sgd_momentum_step(reg, st, cfg, 0);
    CHECK(p.data()[0] == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-15));
    CHECK(p.data()[1] == doctest::Approx(2.0 + 0.1 * 0.25).epsilon(1e-15));
  }

  SUBCASE("zero gradient with weight decay shrinks geometrically") {
    ParamRegistry<double> reg;
    auto p = mk(reg, "p", ParamGroup::decoder, {4.0}, {0.0});
    TrainConfig cfg;
    cfg.momentum = 0;
    cfg.weight_decay = 0.01;
    cfg.base_lr = 0.1;
    SgdState<double> st;
    const double shrink = 1.0 - cfg.base_lr * cfg.weight_decay;
    sgd_momentum_step(reg, st, cfg, 0);
    CHECK(p.data()[0] == doctest::Approx(4.0 * shrink).epsilon(1e-14));
    sgd_momentum_step(reg, st, cfg, 1);  // p2 = p1 - lr*wd*p1 = p0*shrink^2
    CHECK(p.data()[0] == doctest::Approx(4.0 * shrink * shrink).epsilon(1e-14));
  }

  SUBCASE("two momentum steps match the hand-unrolled recurrence") {
    ParamRegistry<double> reg;
    const double g = 0.3, p0 = 1.5;
    auto p = mk(reg, "p", ParamGroup::decoder, {p0}, {g});
    TrainConfig cfg;
    cfg.momentum = 0.9;
    cfg.weight_decay = 0;
    cfg.base_lr = 0.1;
    SgdState<double> st;
    sgd_momentum_step(reg, st, cfg, 0);  // v1 = g,        p1 = p0 - lr*g
    const double p1 = p0 - 0.1 * g;
    CHECK(p.data()[0] == doctest::Approx(p1).epsilon(1e-15));
    sgd_momentum_step(reg, st, cfg, 1);  // v2 = 0.9g + g, p2 = p1 - lr*1.9g
    CHECK(p.data()[0] == doctest::Approx(p1 - 0.1 * 1.9 * g).epsilon(1e-15));
  }

  SUBCASE("encoder group moves at 0.1x, non-trainables stay put") {
    ParamRegistry<double> reg;
    auto pe = mk(reg, "e", ParamGroup::encoder, {1.0}, {0.5});
    auto pd = mk(reg, "d", ParamGroup::decoder, {1.0}, {0.5});
    auto ps = mk(reg, "stat", ParamGroup::decoder, {3.0}, {}, false);
    TrainConfig cfg;
    cfg.momentum = 0;
    cfg.weight_decay = 0;
    cfg.base_lr = 0.1;
    SgdState<double> st;
    sgd_momentum_step(reg, st, cfg, 0);
    const double de = 1.0 - pe.data()[0], dd = 1.0 - pd.data()[0];
    CHECK(de == doctest::Approx(0.1 * dd).epsilon(1e-12));
    CHECK(ps.data()[0] == 3.0);
  }

  SUBCASE("step index picks the decayed rate") {
    ParamRegistry<double> reg;
    auto p = mk(reg, "p", ParamGroup::decoder, {1.0}, {1.0});
    TrainConfig cfg;
    cfg.momentum = 0;
    cfg.weight_decay = 0;
    SgdState<double> st;
    sgd_momentum_step(reg, st, cfg, 700);
    CHECK(p.data()[0] == doctest::Approx(1.0 - 0.001).epsilon(1e-12));
  }
}

TEST_CASE("TrainConfig::validate rejects nonsense") {
  TrainConfig ok;
  CHECK_NOTHROW(ok.validate());
  TrainConfig bad = ok;
  bad.batch = 0;
  CHECK_THROWS(bad.validate());
  bad = ok;
  bad.max_steps = -1;
  CHECK_THROWS(bad.validate());
  bad = ok;
  bad.decay_steps = 0;
  CHECK_THROWS(bad.validate());
  bad = ok;
  bad.base_lr = -0.1;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("one optimizer step telescopes: dloss ~ -lr * sum g^2") {
  NetworkSpec ns;
  ns.encoder.channels = {4, 6};
  ns.encoder.pool = {false, false};
  ns.encoder.dilation = {1, 1};
  ns.input_size = 16;
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
  d1.placement = 'N';
  d1.channels = 4;
  d1.loss_weight = 1.0;
  ns.decoders = {d2, d1};

  ParamRegistry<double> reg;
  ModelParams<double> params = register_model(reg, ns, 23);
  std::mt19937_64 jitter(97);
  std::uniform_real_distribution<double> jd(0.02, 0.08);
  for (auto& e : reg.entries())
    if (e.trainable)
      for (auto& v : e.tensor.vals()) v += (jitter() & 1 ? 1.0 : -1.0) * jd(jitter);

  auto ds = synth_dataset<double>(5, 8, 16);
  auto [img, gt] = make_batch(ds, {0, 1, 2, 3, 4, 5, 6, 7});

  auto loss_at = [&](Tape<double>* tp) {
    auto out = network_forward<double>(tp, img, ns, params, BNMode::train);
    return deep_supervised_loss<double>(tp, out.side_maps, gt, ns.loss_weights());
  };

  reg.zero_grads();
  Tape<double> tape;
  auto loss = loss_at(&tape);
  backward(loss, tape);
  double gsq = 0;
  for (auto& e : reg.entries())
    if (e.trainable && e.tensor.has_grad())
      for (std::size_t i = 0; i < e.tensor.numel(); ++i)
        gsq += static_cast<double>(e.tensor.grad()[i]) * e.tensor.grad()[i];
  REQUIRE(gsq > 0);

  TrainConfig cfg;
  cfg.momentum = 0;
  cfg.weight_decay = 0;
  cfg.base_lr = 1e-5;
  cfg.encoder_lr_multiplier = 1.0;  // same rate everywhere so the sum telescopes
  SgdState<double> st;
  sgd_momentum_step(reg, st, cfg, 0);
  const double after = loss_at(nullptr).data()[0];
  const double drop = loss.data()[0] - after;
  CHECK(drop == doctest::Approx(cfg.base_lr * gsq).epsilon(0.1));
}

TEST_CASE("train_model: 300 plain steps reduce the loss and drive the hooks") {
  NetworkSpec spec = NetworkSpec::toy("NNNNN");
  ParamRegistry<float> reg;
  ModelParams<float> params = register_model(reg, spec, 1);
  auto data = synth_dataset<float>(3, 40);

  TrainConfig cfg;
  cfg.max_steps = 300;
  cfg.decay_steps = 300;  // constant rate for this short run
  cfg.seed = 1;
  std::vector<double> losses, lrs;
  int epochs = 0;
  MetricReport last{};
  TrainHooks hooks;
  hooks.on_step = [&](int step, double lr, double loss) {
    CHECK(step == static_cast<int>(losses.size()));
    losses.push_back(loss);
    lrs.push_back(lr);
  };
  hooks.on_epoch = [&](int, int, const MetricReport& r) {
    ++epochs;
    last = r;
  };
  auto out = train_model(spec, reg, params, data, cfg, hooks);

  REQUIRE(losses.size() == 300);
  CHECK(out.steps == 300);
  CHECK(out.final_loss == losses.back());
  CHECK(lrs[0] == doctest::Approx(0.01).epsilon(1e-12));
  for (double l : losses) CHECK(std::isfinite(l));
  double head = 0, tail = 0;
  for (int i = 0; i < 50; ++i) {
    head += losses[static_cast<std::size_t>(i)];
    tail += losses[losses.size() - 50 + static_cast<std::size_t>(i)];
  }
  CHECK(tail / 50.0 < head / 50.0);

  CHECK(epochs >= 1);  // 40 samples / batch 8 = 5 batches per epoch
  CHECK(last.mae >= 0.0);
  CHECK(last.mae <= 1.0);
  CHECK(last.f_beta_max >= 0.0);
  CHECK(last.f_beta_max <= 1.0);
}

TEST_CASE("train_model: attention placements also descend") {
  NetworkSpec spec = NetworkSpec::toy();  // GGLLN
  ParamRegistry<float> reg;
  ModelParams<float> params = register_model(reg, spec, 1);
  auto data = synth_dataset<float>(3, 40);

  TrainConfig cfg;
  cfg.max_steps = 150;
  cfg.decay_steps = 150;
  cfg.seed = 1;
  std::vector<double> losses;
  TrainHooks hooks;
  hooks.on_step = [&](int, double, double loss) { losses.push_back(loss); };
  train_model(spec, reg, params, data, cfg, hooks);

  REQUIRE(losses.size() == 150);
  double head = 0, tail = 0;
  for (int i = 0; i < 30; ++i) {
    head += losses[static_cast<std::size_t>(i)];
    tail += losses[losses.size() - 30 + static_cast<std::size_t>(i)];
  }
  CHECK(tail / 30.0 < head / 30.0);
}
