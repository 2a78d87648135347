#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "picanet/layers.hpp"
#include "picanet/network.hpp"

using namespace picanet;
using testutil::max_abs_diff;
using testutil::randt;

namespace {

// Scalar-loop LSTM reference: gates i,f,g,o stacked along the 4H axis.
void scalar_lstm(const Tensor<double>& x, const Tensor<double>& h, const Tensor<double>& c,
                 const LstmParams<double>& p, Tensor<double>& hn, Tensor<double>& cn) {
  const int bsz = x.dim(0), in = x.dim(1), hid = h.dim(1);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (int b = 0; b < bsz; ++b)
    for (int j = 0; j < hid; ++j) {
      double pre[4];
      for (int g = 0; g < 4; ++g) {
        const int row = g * hid + j;
        double acc = p.b.data()[row];
        for (int k = 0; k < in; ++k) acc += p.w_ih.data()[row * in + k] * x.data()[b * in + k];
        for (int k = 0; k < hid; ++k) acc += p.w_hh.data()[row * hid + k] * h.data()[b * hid + k];
        pre[g] = acc;
      }
      const double i = sig(pre[0]), f = sig(pre[1]), g2 = std::tanh(pre[2]), o = sig(pre[3]);
      const double cv = f * c.data()[b * hid + j] + i * g2;
      cn.data()[b * hid + j] = cv;
      hn.data()[b * hid + j] = o * std::tanh(cv);
    }
}

LstmParams<double> rand_lstm(int in, int hid, std::mt19937_64& rng) {
  LstmParams<double> p;
  p.w_ih = randt<double>({4 * hid, in}, rng, -0.5, 0.5);
  p.w_hh = randt<double>({4 * hid, hid}, rng, -0.5, 0.5);
  p.b = randt<double>({4 * hid}, rng, -0.3, 0.3);
  return p;
}

}  // namespace

TEST_CASE("lstm_cell: zero everything stays at rest") {
  LstmParams<double> p;
  p.w_ih = Tensor<double>::zeros({8, 3});
  p.w_hh = Tensor<double>::zeros({8, 2});
  p.b = Tensor<double>::zeros({8});
  auto x = Tensor<double>::zeros({2, 3});
  auto h = Tensor<double>::zeros({2, 2});
  auto c = Tensor<double>::zeros({2, 2});
  auto [hn, cn] = ops::lstm_cell<double>(nullptr, x, h, c, p);
  for (std::size_t i = 0; i < hn.numel(); ++i) CHECK(hn.data()[i] == 0.0);
  for (std::size_t i = 0; i < cn.numel(); ++i) CHECK(cn.data()[i] == 0.0);
}

TEST_CASE("lstm_cell: saturated forget gate carries the cell state through") {
  std::mt19937_64 rng(51);
  const int hid = 3;
  LstmParams<double> p;
  p.w_ih = Tensor<double>::zeros({4 * hid, 2});
  p.w_hh = Tensor<double>::zeros({4 * hid, hid});
  p.b = Tensor<double>::zeros({4 * hid});
  for (int j = 0; j < hid; ++j) p.b.data()[hid + j] = 50.0;  // forget slice
  auto x = randt<double>({1, 2}, rng);
  auto h = Tensor<double>::zeros({1, hid});
  auto c = randt<double>({1, hid}, rng, -2.0, 2.0);
  auto [hn, cn] = ops::lstm_cell<double>(nullptr, x, h, c, p);
  for (int j = 0; j < hid; ++j) CHECK(cn.data()[j] == doctest::Approx(c.data()[j]).epsilon(1e-9));
}

TEST_CASE("lstm_cell: random instance matches the scalar reference") {
  std::mt19937_64 rng(52);
  const int bsz = 3, in = 4, hid = 5;
  auto p = rand_lstm(in, hid, rng);
  auto x = randt<double>({bsz, in}, rng);
  auto h = randt<double>({bsz, hid}, rng, -0.8, 0.8);
  auto c = randt<double>({bsz, hid}, rng, -0.8, 0.8);
  auto [hn, cn] = ops::lstm_cell<double>(nullptr, x, h, c, p);
  auto rh = Tensor<double>::zeros({bsz, hid});
  auto rc = Tensor<double>::zeros({bsz, hid});
  scalar_lstm(x, h, c, p, rh, rc);
  CHECK(max_abs_diff(hn, rh) <= 1e-6);
  CHECK(max_abs_diff(cn, rc) <= 1e-6);
}

TEST_CASE("bilstm_scan: length-1 sequences, zero params, reversal symmetry") {
  std::mt19937_64 rng(53);
  const int bsz = 2, in = 3, hid = 4;

  SUBCASE("length-1: both halves come from the single element") {
    auto F = rand_lstm(in, hid, rng);
    auto B = rand_lstm(in, hid, rng);
    auto x = randt<double>({bsz, in}, rng);
    auto out = ops::bilstm_scan<double>(nullptr, {x}, F, B, hid);
    REQUIRE(out.size() == 1);
    REQUIRE(out[0].shape() == std::vector<int>{bsz, 2 * hid});
    auto z = Tensor<double>::zeros({bsz, hid});
    auto [hf, cf] = ops::lstm_cell<double>(nullptr, x, z, z, F);
    auto [hb, cb] = ops::lstm_cell<double>(nullptr, x, z, z, B);
    for (int b = 0; b < bsz; ++b)
      for (int j = 0; j < hid; ++j) {
        CHECK(out[0].data()[b * 2 * hid + j] == doctest::Approx(hf.data()[b * hid + j]).epsilon(1e-12));
        CHECK(out[0].data()[b * 2 * hid + hid + j] ==
              doctest::Approx(hb.data()[b * hid + j]).epsilon(1e-12));
      }
  }

  SUBCASE("zero params give zero outputs") {
    LstmParams<double> z;
    z.w_ih = Tensor<double>::zeros({4 * hid, in});
    z.w_hh = Tensor<double>::zeros({4 * hid, hid});
    z.b = Tensor<double>::zeros({4 * hid});
    std::vector<Tensor<double>> seq;
    for (int t = 0; t < 4; ++t) seq.push_back(randt<double>({bsz, in}, rng));
    for (const auto& o : ops::bilstm_scan<double>(nullptr, seq, z, z, hid))
      for (std::size_t i = 0; i < o.numel(); ++i) CHECK(o.data()[i] == 0.0);
  }

  SUBCASE("reversed input with swapped params mirrors the output, halves swapped") {
    auto F = rand_lstm(in, hid, rng);
    auto B = rand_lstm(in, hid, rng);
    const int len = 5;
    std::vector<Tensor<double>> seq, rev;
    for (int t = 0; t < len; ++t) seq.push_back(randt<double>({bsz, in}, rng));
    for (int t = len - 1; t >= 0; --t) rev.push_back(seq[static_cast<std::size_t>(t)]);
    auto a = ops::bilstm_scan<double>(nullptr, rev, F, B, hid);
    auto b = ops::bilstm_scan<double>(nullptr, seq, B, F, hid);
    for (int t = 0; t < len; ++t)
      for (int i = 0; i < bsz; ++i)
        for (int j = 0; j < hid; ++j) {
          const auto& mirrored = b[static_cast<std::size_t>(len - 1 - t)];
          CHECK(a[static_cast<std::size_t>(t)].data()[i * 2 * hid + j] ==
                doctest::Approx(mirrored.data()[i * 2 * hid + hid + j]).epsilon(1e-12));
          CHECK(a[static_cast<std::size_t>(t)].data()[i * 2 * hid + hid + j] ==
                doctest::Approx(mirrored.data()[i * 2 * hid + j]).epsilon(1e-12));
        }
  }
}

TEST_CASE("renet_sweep: 1x1 map, zero params, global receptive field") {
  std::mt19937_64 rng(54);
  const int hid = 3;

  SUBCASE("1x1 spatial map is two nested length-1 biLSTMs") {
    RenetParams<double> p;
    p.hf = rand_lstm(4, hid, rng);
    p.hb = rand_lstm(4, hid, rng);
    p.vf = rand_lstm(2 * hid, hid, rng);
    p.vb = rand_lstm(2 * hid, hid, rng);
    auto f = randt<double>({2, 4, 1, 1}, rng);
    auto y = ops::renet_sweep<double>(nullptr, f, p, hid);
    REQUIRE(y.shape() == std::vector<int>{2, 2 * hid, 1, 1});

    auto row = Tensor<double>::zeros({2, 4});
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 4; ++c) row.data()[b * 4 + c] = f.data()[(b * 4 + c)];
    auto mid = ops::bilstm_scan<double>(nullptr, {row}, p.hf, p.hb, hid)[0];
    auto out = ops::bilstm_scan<double>(nullptr, {mid}, p.vf, p.vb, hid)[0];
    for (int b = 0; b < 2; ++b)
      for (int c = 0; c < 2 * hid; ++c)
        CHECK(y.data()[b * 2 * hid + c] == doctest::Approx(out.data()[b * 2 * hid + c]).epsilon(1e-12));
  }

  SUBCASE("zero params map everything to zero") {
    LstmParams<double> z;
    z.w_ih = Tensor<double>::zeros({4 * hid, 5});
    z.w_hh = Tensor<double>::zeros({4 * hid, hid});
    z.b = Tensor<double>::zeros({4 * hid});
    LstmParams<double> zv;
    zv.w_ih = Tensor<double>::zeros({4 * hid, 2 * hid});
    zv.w_hh = Tensor<double>::zeros({4 * hid, hid});
    zv.b = Tensor<double>::zeros({4 * hid});
    RenetParams<double> p{z, z, zv, zv};
    auto f = randt<double>({1, 5, 3, 3}, rng);
    auto y = ops::renet_sweep<double>(nullptr, f, p, hid);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
  }

  SUBCASE("perturbing one corner reaches the far corner") {
    ParamRegistry<double> reg;
    Initializer<double> init(19);
    auto p = add_renet(reg, init, "r", 2, hid, ParamGroup::decoder);
    auto f = randt<double>({1, 2, 6, 6}, rng);
    auto base = ops::renet_sweep<double>(nullptr, f, p, hid);
    auto f2 = f.clone();
    f2.data()[0] += 0.5;  // channel 0, pixel (0,0)
    auto moved = ops::renet_sweep<double>(nullptr, f2, p, hid);
    double delta = 0;
    for (int c = 0; c < 2 * hid; ++c) {
      const std::size_t far = (static_cast<std::size_t>(c) * 6 + 5) * 6 + 5;
      delta = std::max(delta, std::abs(moved.data()[far] - base.data()[far]));
    }
    CHECK(delta > 1e-12);
  }
}

TEST_CASE("initializer: determinism, orthogonality, xavier bounds") {
  SUBCASE("same seed reproduces the same registry byte for byte") {
    ParamRegistry<double> a, b;
    register_model(a, NetworkSpec::toy(), 5);
    register_model(b, NetworkSpec::toy(), 5);
    REQUIRE(a.entries().size() == b.entries().size());
    for (std::size_t i = 0; i < a.entries().size(); ++i) {
      CHECK(a.entries()[i].name == b.entries()[i].name);
      CHECK(max_abs_diff(a.entries()[i].tensor, b.entries()[i].tensor) == 0.0);
    }
  }

  SUBCASE("recurrent matrices are column-orthonormal") {
    Initializer<double> init(23);
    auto r = init.orthogonal(12, 5);
    REQUIRE(r.shape() == std::vector<int>{12, 5});
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) {
        double dot = 0;
        for (int k = 0; k < 12; ++k) dot += r.data()[k * 5 + i] * r.data()[k * 5 + j];
        CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) <= 1e-4);
      }
  }

  SUBCASE("xavier draws stay inside the fan limit") {
    Initializer<double> init(29);
    const int fi = 27, fo = 48;
    const double limit = std::sqrt(6.0 / (fi + fo));
    auto w = init.xavier({16, 3, 3, 3}, fi, fo);
    double mx = 0;
    for (std::size_t i = 0; i < w.numel(); ++i) mx = std::max(mx, std::abs(w.data()[i]));
    CHECK(mx <= limit);
    CHECK(mx > 0.5 * limit);  // and actually uses the range
  }
}

TEST_CASE("param registry: ordering, lookup, duplicates") {
  ParamRegistry<float> reg;
  reg.add("b.x", Tensor<float>::zeros({2}), ParamGroup::encoder, true);
  reg.add("a.y", Tensor<float>::full({3}, 1.0f), ParamGroup::decoder, false);
  CHECK(reg.contains("b.x"));
  CHECK(!reg.contains("c.z"));
  CHECK(reg.entries()[0].name == "b.x");  // registration order, not lexicographic
  CHECK(reg.entries()[1].name == "a.y");
  CHECK(reg.at("a.y").numel() == 3);
  CHECK(reg.trainable_params() == 2);
  CHECK_THROWS_AS(reg.add("b.x", Tensor<float>::zeros({1}), ParamGroup::encoder, true),
                  std::invalid_argument);
  CHECK_THROWS_AS(reg.at("missing"), std::out_of_range);
}

TEST_CASE("default toy network matches the hand-tallied parameter count") {
  ParamRegistry<float> reg;
  register_model(reg, NetworkSpec::toy(), 1);

  // Encoder: two 3x3 convs per block, batch norm between them. The first conv
  // feeds the norm directly so it carries no bias.
  auto enc_block = [](int cin, int c) {
    return (c * cin * 9) + (2 * c) + (c * c * 9 + c);
  };
  const std::size_t encoder = enc_block(3, 16) + enc_block(16, 32) + enc_block(32, 64) +
                              enc_block(64, 64) + enc_block(64, 128);

  // Decoder pieces. renet hidden is 32, so every LSTM has 4*32 = 128 rows.
  auto bn = [](int c) { return 2 * c; };
  auto lstm = [](int in) { return 128 * in + 128 * 32 + 128; };
  auto renet = [&](int c) { return 2 * lstm(c) + 2 * lstm(64); };
  auto global_pica = [&](int c) { return renet(c) + 36 * 64 + bn(36); };   // 6x6 grid logits
  auto local_pica = [](int c) { return (32 * c * 25 + 32) + 25 * 32 + 2 * 25; };  // 5x5 ctx+grid
  auto module = [&](int c, int prev, char place) {
    std::size_t n = bn(c);                    // pre_bn
    n += c * (c + prev) + c;                  // fuse_in
    if (place == 'G') n += global_pica(c);
    if (place == 'L') n += local_pica(c);
    n += c * (place == 'N' ? c : 2 * c);      // fusion (bias-free, feeds post_bn)
    n += bn(c);                               // post_bn
    n += c + 1;                               // side
    return n;
  };
  const std::size_t decoder = module(128, 128, 'G') + module(64, 128, 'G') +
                              module(64, 64, 'L') + module(32, 64, 'L') + module(16, 32, 'N');

  CHECK(reg.trainable_params() == encoder + decoder);

  // Running statistics ride along untrained: two per batch-norm channel.
  std::size_t running = 0;
  for (const auto& e : reg.entries())
    if (!e.trainable) running += e.tensor.numel();
  const std::size_t enc_run = 2 * (16 + 32 + 64 + 64 + 128);
  const std::size_t dec_run =
      4 * (128 + 64 + 64 + 32 + 16) + 2 * 36 + 2 * 36 + 2 * 25 + 2 * 25;
  CHECK(running == enc_run + dec_run);
}
