// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0

#include <numeric>
#include <random>
#include <set>

#include <catch2/catch_amalgamated.hpp>

#include "cstr/encoder.hpp"

using namespace cstr;
using MatF = Mat<float>;

namespace {

Image random_image(int h, int w, int c, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w, c);
  for (float& p : img.px) p = u(rng);
  return img;
}

EncoderConfig small_cfg(const std::string& spec, int side = 32, int patch = 8) {
  EncoderConfig e = parse_model_spec(spec);
  e.image_h = e.image_w = side;
  e.patch_size = patch;
  e.channels = 1;
  return e;
}

ParamStore<float> init_params(const EncoderConfig& e, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<float> s;
  init_encoder(s, e, rng);
  return s;
}

// Encoded tokens plus the retained map; values are copied out of the tape.
struct Encoded {
  MatF tokens;
  RetainedMap retained;
  int count() const { return static_cast<int>(tokens.rows()); }
};

Encoded run(const EncoderConfig& e, ParamStore<float>& s, const Image& img, EncodeTrace* trace = nullptr) {
  Tape<float> t;
  const auto st = encode(Scope<float>{t, s}, img, e, trace);
  return {st.tokens.value(), st.retained};
}

TokenState<float> fake_state(Tape<float>& t, const MatF& x) {
  TokenState<float> st;
  st.tokens = t.constant(x);
  st.retained.push_back({kClsSource});
  for (int i = 1; i < x.rows(); ++i) st.retained.push_back({i - 1});
  st.full_grid = true;
  return st;
}

}  // namespace

TEST_CASE("patchify counts and layout", "[encoder]") {
  Image img(224, 224, 3);
  for (std::size_t i = 0; i < img.px.size(); ++i) img.px[i] = static_cast<float>(i % 251) / 251.0f;
  for (int p : {8, 16, 32}) {
    const auto g = patchify<float>(img, p);
    CHECK(g.count() == (224 / p) * (224 / p));
    CHECK(g.patches.rows() == g.count());
    CHECK(g.patches.cols() == p * p * 3);
  }
  const auto g = patchify<float>(img, 16);
  CHECK(g.count() == 196);
  // Patch (1, 2): origin (16, 32); element (y=3, x=5, c=2).
  const int row = 1 * 14 + 2;
  CHECK(g.origins[row] == std::pair{16, 32});
  CHECK(g.patches(row, (3 * 16 + 5) * 3 + 2) == img.at(19, 37, 2));
  CHECK_THROWS_AS(patchify<float>(Image(30, 32, 1), 8), ShapeError);
}

TEST_CASE("standardize gives zero mean and unit variance", "[encoder][property]") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    MatF x = MatF::Random(10 + trial, 7) * (0.1f + trial) + MatF::Constant(10 + trial, 7, 3.0f * trial);
    const MatF z = standardize(x);
    CHECK(std::abs(z.mean()) < 1e-5);
    CHECK(std::abs((z.array() - z.mean()).square().mean() - 1.0f) < 1e-4);
  }
  CHECK(standardize(MatF(MatF::Constant(3, 3, 0.7f))).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("embed prepends CLS and maps every token to its patch", "[encoder]") {
  const EncoderConfig e = small_cfg("e-16,2,2");
  auto s = init_params(e, 2);
  std::mt19937_64 rng(3);
  Tape<float> t;
  const auto st = embed(Scope<float>{t, s}, patchify<float>(random_image(32, 32, 1, rng), 8));
  CHECK(st.count() == 17);
  CHECK(st.tokens.cols() == 16);
  CHECK(st.full_grid);
  REQUIRE(st.retained.size() == 17);
  CHECK(st.retained[0] == std::vector<int>{kClsSource});
  for (int i = 1; i < 17; ++i) CHECK(st.retained[i] == std::vector<int>{i - 1});
  // CLS row is the learned token plus position 0.
  CHECK(st.tokens.value().row(0) == s.value("enc.cls").row(0) + s.value("enc.pos").row(0));
}

TEST_CASE("encoder output is invariant to gray level and contrast", "[encoder][property]") {
  const EncoderConfig e = small_cfg("e-cc(1:1)-16,2,2");
  auto s = init_params(e, 4);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const Image a = random_image(32, 32, 1, rng);
    Image b = a;
    const float gain = 0.2f + 0.15f * trial, offset = 0.1f * trial;
    for (float& p : b.px) p = gain * p + offset;
    const MatF ya = run(e, s, a).tokens, yb = run(e, s, b).tokens;
    CHECK((ya - yb).cwiseAbs().maxCoeff() < 1e-3);
  }
}

TEST_CASE("adaptive windows cover the range in order", "[encoder][property]") {
  for (int n = 2; n < 50; ++n)
    for (int m = 1; m < n; ++m) {
      const auto w = adaptive_windows(n, m);
      REQUIRE(w.size() == static_cast<std::size_t>(m));
      CHECK(w.front().begin == 0);
      CHECK(w.back().end == n);
      for (int i = 0; i < m; ++i) {
        CHECK(w[i].end > w[i].begin);
        if (i > 0) {
          CHECK(w[i].begin >= w[i - 1].begin);
          CHECK(w[i].begin <= w[i - 1].end);
        }
      }
      if (n % m == 0)
        for (const auto& x : w) CHECK(x.end - x.begin == n / m);
    }
}

TEST_CASE("first_n keeps a prefix and ignores the rest", "[encoder]") {
  std::mt19937_64 rng(6);
  ParamStore<float> s;
  Tape<float> t;
  MatF x = MatF::Random(9, 4);
  const auto out = select_tokens(Scope<float>{t, s}, fake_state(t, x), SelectionScheme::kFirstN, 5);
  CHECK(out.tokens.value() == x.topRows(5));
  CHECK(out.retained[4] == std::vector<int>{3});
  CHECK_FALSE(out.full_grid);

  x.bottomRows(4).setRandom();
  x.bottomRows(4) *= 100.0f;
  const auto again = select_tokens(Scope<float>{t, s}, fake_state(t, x), SelectionScheme::kFirstN, 5);
  CHECK(again.tokens.value() == out.tokens.value());
}

TEST_CASE("1D pooling on a hand example", "[encoder]") {
  ParamStore<float> s;
  Tape<float> t;
  MatF x(5, 2);
  x << 9, 9, 1, 4, 3, 2, 5, 8, 7, 6;
  const Scope<float> sc{t, s};
  const auto avg = select_tokens(sc, fake_state(t, x), SelectionScheme::kAvgPool1D, 3);
  MatF want_avg(3, 2);
  want_avg << 9, 9, 2, 3, 6, 7;
  CHECK(avg.tokens.value() == want_avg);
  CHECK(avg.retained[1] == std::vector<int>{0, 1});
  CHECK(avg.retained[2] == std::vector<int>{2, 3});

  const auto mx = select_tokens(sc, fake_state(t, x), SelectionScheme::kMaxPool1D, 3);
  MatF want_max(3, 2);
  want_max << 9, 9, 3, 4, 7, 8;
  CHECK(mx.tokens.value() == want_max);

  CHECK_THROWS_AS(select_tokens(sc, fake_state(t, x), SelectionScheme::kAvgPool1D, 5), ShapeError);
  CHECK_THROWS_AS(select_tokens(sc, fake_state(t, x), SelectionScheme::kAvgPool1D, 1), ShapeError);
}

TEST_CASE("strided 2D merge pairs horizontal neighbours", "[encoder]") {
  std::mt19937_64 rng(7);
  ParamStore<float> s;
  init_linear(s, "enc.select.0", 4, 2, rng);
  Tape<float> t;
  const MatF x = MatF::Random(9, 2);  // CLS + 2x4 grid
  const auto out = select_tokens(Scope<float>{t, s}, fake_state(t, x), SelectionScheme::kConv2DStride, 5, 4);
  REQUIRE(out.count() == 5);
  CHECK(out.retained[1] == std::vector<int>{0, 1});
  CHECK(out.retained[4] == std::vector<int>{6, 7});
  MatF pair(1, 4);
  pair << x.row(7), x.row(8);
  const MatF want = pair * s.value("enc.select.0.w") + s.value("enc.select.0.b");
  CHECK((out.tokens.value().row(4) - want).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(out.tokens.value().row(0) == x.row(0));
  CHECK_THROWS_AS(select_tokens(Scope<float>{t, s}, fake_state(t, x), SelectionScheme::kConv2DStride, 5, 3), ShapeError);
}

TEST_CASE("cascade without reduction equals the plain encoder", "[encoder]") {
  EncoderConfig cascade = small_cfg("e-cc(6:6)-16,2,12");
  cascade.reduction_enabled = false;
  const EncoderConfig plain = small_cfg("e-16,2,12");
  auto s = init_params(cascade, 8);
  REQUIRE(s.count() == init_params(plain, 8).count());
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 3; ++trial) {
    const Image img = random_image(32, 32, 1, rng);
    EncodeTrace trace;
    const MatF a = run(cascade, s, img, &trace).tokens;
    const MatF b = run(plain, s, img).tokens;
    CHECK(a == b);
    CHECK(trace.counts == std::vector<int>{17, 17, 17});
  }
}

TEST_CASE("token counts follow the schedule for every cascade", "[encoder]") {
  std::mt19937_64 rng(10);
  const Image img = random_image(224, 224, 1, rng);
  for (const char* cc : {"cc(3:9)", "cc(6:6)", "cc(9:3)", "cc(4:4:4)", "cc(3:3:3:3)"})
    for (auto scheme : {SelectionScheme::kFirstN, SelectionScheme::kAvgPool1D, SelectionScheme::kMaxPool1D}) {
      EncoderConfig e = small_cfg(std::string("e-") + cc + "-8,2,12", 224, 16);
      e.selection = scheme;
      auto s = init_params(e, 11);
      EncodeTrace trace;
      const auto st = run(e, s, img, &trace);
      INFO(cc << " " << to_string(scheme));
      CHECK(trace.counts == token_schedule(e).counts);
      CHECK(st.count() == token_schedule(e).final_tokens());
      CHECK(st.retained.size() == static_cast<std::size_t>(st.count()));
      CHECK(st.retained[0] == std::vector<int>{kClsSource});
    }
  EncoderConfig conv = small_cfg("e-cc(6:6)-8,2,12", 224, 16);
  conv.selection = SelectionScheme::kConv2DStride;
  auto s = init_params(conv, 12);
  EncodeTrace trace;
  run(conv, s, img, &trace);
  CHECK(trace.counts == token_schedule(conv).counts);
}

TEST_CASE("pooling keeps every patch represented", "[encoder][property]") {
  std::mt19937_64 rng(13);
  const Image img = random_image(64, 64, 1, rng);
  for (auto scheme : {SelectionScheme::kAvgPool1D, SelectionScheme::kMaxPool1D, SelectionScheme::kConv2DStride}) {
    EncoderConfig e = small_cfg(scheme == SelectionScheme::kConv2DStride ? "e-cc(1:1)-8,2,2" : "e-cc(1:1:1)-8,2,3", 64, 8);
    e.selection = scheme;
    auto s = init_params(e, 14);
    const auto st = run(e, s, img);
    std::set<int> seen;
    for (std::size_t j = 1; j < st.retained.size(); ++j) seen.insert(st.retained[j].begin(), st.retained[j].end());
    CHECK(seen.size() == 64u);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 63);
  }
}

TEST_CASE("staged evaluation equals a single encode call", "[encoder]") {
  const EncoderConfig e = small_cfg("e-cc(2:1:1)-16,2,4");
  auto s = init_params(e, 15);
  std::mt19937_64 rng(16);
  const Image img = random_image(32, 32, 1, rng);
  const MatF fused = run(e, s, img).tokens;

  Tape<float> t;
  const Scope<float> sc{t, s};
  const TokenSchedule sched = token_schedule(e);
  TokenState<float> st = embed(sc, patchify<float>(img, e.patch_size));
  for (int i = 0; i < e.stages(); ++i) st = apply_stage(sc, e, sched, std::move(st), i);
  CHECK(apply_layer_norm(sc, "enc.norm", st.tokens).value() == fused);
}

TEST_CASE("first_n output ignores patches past the kept prefix", "[encoder]") {
  // With first_n after stage one, tokens beyond the kept range still shape
  // stage one through attention, so only the reduction step is isolated.
  const EncoderConfig e = small_cfg("e-cc(1:1)-16,2,2");
  auto s = init_params(e, 17);
  std::mt19937_64 rng(18);
  const Image img = random_image(32, 32, 1, rng);
  const auto st = run(e, s, img);
  CHECK(st.count() == 9);
  for (int j = 1; j < 9; ++j) CHECK(st.retained[j] == std::vector<int>{j - 1});
}

TEST_CASE("encoder rejects mismatched images", "[encoder]") {
  const EncoderConfig e = small_cfg("e-16,2,2");
  auto s = init_params(e, 19);
  CHECK_THROWS_AS(run(e, s, Image(32, 32, 3)), ShapeError);
  CHECK_THROWS_AS(run(e, s, Image(64, 32, 1)), ShapeError);
}
