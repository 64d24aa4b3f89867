// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <map>
#include <random>

#include <catch2/catch_amalgamated.hpp>

#include "cstr/model.hpp"

using namespace cstr;
using MatD = Mat<double>;

namespace {

ModelConfig toy_config(int dec_blocks = 1, int dec_dim = 8) {
  ModelConfig c;
  c.encoder = parse_model_spec("e-cc(1:1)-16,2,2");
  c.encoder.image_h = c.encoder.image_w = 32;
  c.encoder.patch_size = 8;
  c.encoder.channels = 1;
  c.decoder.blocks = dec_blocks;
  c.decoder.embed_dim = dec_dim;
  c.decoder.heads = 2;
  c.decoder.max_len = 4;
  c.charset = "abcde";
  return c;
}

MatD random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Decoder-only parameters with non-trivial values everywhere.
ParamStore<double> decoder_params(const DecoderConfig& d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<double> s;
  init_decoder(s, d, d.embed_dim, rng);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& e : s.entries())
    for (Eigen::Index i = 0; i < e.value.size(); ++i) e.value.data()[i] += n(rng);
  return s;
}

DecoderConfig toy_decoder(int blocks = 1) {
  DecoderConfig d = toy_config(blocks).decoder;
  d.charset_size = 5;
  return d;
}

Image random_image(std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(32, 32, 1);
  for (float& p : img.px) p = u(rng);
  return img;
}

double log_softmax_at(const MatD& row, int target) {
  long double mx = row.maxCoeff(), z = 0;
  for (Eigen::Index j = 0; j < row.size(); ++j) z += std::exp(static_cast<long double>(row(j)) - mx);
  return static_cast<double>(static_cast<long double>(row(target)) - mx - std::log(z));
}

}  // namespace

TEST_CASE("permutations are bijections with identity first", "[decoder]") {
  std::mt19937_64 rng(1);
  const auto perms = sample_permutations(6, 5, rng);
  REQUIRE(perms.size() == 6);
  CHECK(perms[0] == Permutation::identity(5));
  for (const auto& p : perms) {
    std::vector<int> seen(5, 0);
    for (int t = 0; t < 5; ++t) {
      ++seen[p.order[t]];
      CHECK(p.rank[p.order[t]] == t);
    }
    CHECK(seen == std::vector<int>(5, 1));
  }
  std::mt19937_64 a(7), b(7);
  CHECK(sample_permutations(4, 6, a) == sample_permutations(4, 6, b));
  CHECK_THROWS(sample_permutations(0, 3, rng));
  CHECK_THROWS(Permutation::from_order({0, 0, 1}));
  CHECK_THROWS(Permutation::from_order({0, 3}));
}

TEST_CASE("shuffled permutations are uniform", "[decoder][property]") {
  // Chi-square over the 24 orders of 4 elements, 23 dof; 49.7 is the 0.999 quantile.
  std::mt19937_64 rng(2);
  std::map<std::vector<int>, int> counts;
  const int draws = 24000;
  for (int i = 0; i < draws / 4; ++i) {
    const auto perms = sample_permutations(5, 4, rng);
    for (std::size_t j = 1; j < perms.size(); ++j) ++counts[perms[j].order];
  }
  int total = 0;
  for (auto& [k, v] : counts) total += v;
  REQUIRE(counts.size() == 24);
  const double expect = total / 24.0;
  double chi = 0;
  for (auto& [k, v] : counts) chi += (v - expect) * (v - expect) / expect;
  CHECK(chi < 49.7);
}

TEST_CASE("context masks follow decoding ranks", "[decoder]") {
  const Mask id = context_mask(Permutation::identity(4));
  for (int q = 0; q < 4; ++q)
    for (int k = 0; k < 4; ++k) CHECK(id.visible(q, k) == (k < q));

  const auto p = Permutation::from_order({2, 0, 3, 1});
  const Mask m = decoder_mask(p);
  CHECK(m.rows == 4);
  CHECK(m.cols == 5);
  for (int q = 0; q < 4; ++q) {
    CHECK(m.visible(q, 0));
    for (int k = 0; k < 4; ++k) CHECK(m.visible(q, k + 1) == (p.rank[k] < p.rank[q]));
  }
  // Position 2 goes first and sees only BOS.
  CHECK(m.count_row(2) == 1);
  CHECK(m.count_row(1) == 4);
}

TEST_CASE("later-ranked context cannot change a prediction", "[decoder][property]") {
  const DecoderConfig d = toy_decoder(2);
  auto s = decoder_params(d, 3);
  std::mt19937_64 rng(4);
  int triples = 0, control_changed = 0, controls = 0;
  for (int trial = 0; triples < 600; ++trial) {
    const int len = 1 + trial % d.max_len;
    std::vector<int> chars;
    for (int i = 0; i < len; ++i) chars.push_back(static_cast<int>(rng() % 5));
    const auto targets = with_eos(chars, d.charset_size);
    const int n = len + 1;
    const auto perm = sample_permutations(2, n, rng)[1];
    const MatD vision = random_mat(3 + trial % 4, d.embed_dim, rng);
    std::vector<int> positions(n);
    std::iota(positions.begin(), positions.end(), 0);

    Tape<double> t;
    const Scope<double> sc{t, s};
    const Mask mask = decoder_mask(perm);
    const MatD base = decode_positions(sc, d, t.constant(vision), targets, positions, mask).value();
    const int q = static_cast<int>(rng() % n);
    for (int k = 0; k < n; ++k) {
      std::vector<int> changed = targets;
      changed[k] = (changed[k] + 1 + static_cast<int>(rng() % 5)) % d.classes();
      const MatD out = decode_positions(sc, d, t.constant(vision), changed, positions, mask).value();
      if (perm.rank[k] >= perm.rank[q]) {
        CHECK(out.row(q) == base.row(q));
        ++triples;
      } else {
        ++controls;
        control_changed += out.row(q) != base.row(q);
      }
    }
  }
  CHECK(triples >= 500);
  // Earlier-ranked context does reach the query.
  CHECK(control_changed == controls);
}

TEST_CASE("identity-order loss equals step-by-step autoregressive cross-entropy", "[decoder]") {
  for (int blocks : {1, 2}) {
    const DecoderConfig d = toy_decoder(blocks);
    auto s = decoder_params(d, 5 + blocks);
    std::mt19937_64 rng(6);
    for (int len = 1; len <= d.max_len; ++len) {
      std::vector<int> chars;
      for (int i = 0; i < len; ++i) chars.push_back(static_cast<int>(rng() % 5));
      const MatD vision = random_mat(5, d.embed_dim, rng);
      Tape<double> t;
      const Scope<double> sc{t, s};
      const double plm = plm_loss(sc, d, t.constant(vision), chars, {Permutation::identity(len + 1)}).value()(0, 0);

      // Oracle: one query at a time over the bare prefix, no masking.
      const auto targets = with_eos(chars, d.charset_size);
      long double nll = 0;
      for (int step = 0; step <= len; ++step) {
        Tape<double> t2;
        const std::vector<int> prefix(targets.begin(), targets.begin() + step);
        const MatD logits = decode_step(Scope<double>{t2, s}, d, t2.constant(vision), prefix, step);
        nll -= log_softmax_at(logits.row(0), targets[step]);
      }
      const double oracle = static_cast<double>(nll / (len + 1));
      INFO("blocks " << blocks << " len " << len);
      CHECK(std::abs(plm - oracle) < 1e-6);
    }
  }
}

TEST_CASE("loss averages over permutations", "[decoder]") {
  const DecoderConfig d = toy_decoder();
  auto s = decoder_params(d, 8);
  std::mt19937_64 rng(9);
  const MatD vision = random_mat(4, d.embed_dim, rng);
  const std::vector<int> chars{1, 4, 2};
  const auto perms = sample_permutations(4, 4, rng);
  Tape<double> t;
  const Scope<double> sc{t, s};
  std::vector<Var<double>> per;
  const double total = plm_loss(sc, d, t.constant(vision), chars, perms, &per).value()(0, 0);
  REQUIRE(per.size() == 4);
  double mean = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double single = plm_loss(sc, d, t.constant(vision), chars, {perms[i]}).value()(0, 0);
    CHECK(per[i].value()(0, 0) == Catch::Approx(single).epsilon(1e-14));
    mean += single / 4;
  }
  CHECK(total == Catch::Approx(mean).epsilon(1e-14));
}

TEST_CASE("zero head gives the uniform loss", "[decoder]") {
  const DecoderConfig d = toy_decoder();
  auto s = decoder_params(d, 10);
  s.value("dec.head.w").setZero();
  s.value("dec.head.b").setZero();
  std::mt19937_64 rng(11);
  Tape<double> t;
  const auto perms = sample_permutations(3, 3, rng);
  const double loss = plm_loss(Scope<double>{t, s}, d, t.constant(random_mat(4, d.embed_dim, rng)), {0, 3}, perms).value()(0, 0);
  CHECK(std::abs(loss - std::log(6.0)) < 1e-12);
}

TEST_CASE("zeroed second block reduces to one block", "[decoder]") {
  const DecoderConfig d2 = toy_decoder(2), d1 = toy_decoder(1);
  auto s2 = decoder_params(d2, 12);
  const std::string b1 = "dec.blocks.1";
  for (const char* p : {".ctx_attn.wo.w", ".ctx_attn.wo.b", ".vis_attn.wo.w", ".vis_attn.wo.b", ".mlp.fc2.w", ".mlp.fc2.b"})
    s2.value(b1 + p).setZero();
  ParamStore<double> s1;
  for (const auto& e : s2.entries())
    if (e.name.rfind(b1, 0) != 0) s1.add(e.name, e.value);
  std::mt19937_64 rng(13);
  const MatD vision = random_mat(6, d1.embed_dim, rng);
  const auto perms = sample_permutations(3, 4, rng);
  Tape<double> t;
  const double l2 = plm_loss(Scope<double>{t, s2}, d2, t.constant(vision), {4, 0, 1}, perms).value()(0, 0);
  const double l1 = plm_loss(Scope<double>{t, s1}, d1, t.constant(vision), {4, 0, 1}, perms).value()(0, 0);
  CHECK(l1 == l2);
}

TEST_CASE("bridge projects only when widths differ", "[decoder]") {
  const auto wide = Model<double>::init(toy_config(1, 8), 14);
  CHECK(wide.params.contains("dec.bridge.w"));
  const auto same = Model<double>::init(toy_config(1, 16), 14);
  CHECK_FALSE(same.params.contains("dec.bridge.w"));

  std::mt19937_64 rng(15);
  const Image img = random_image(rng);
  Tape<double> t;
  const auto v = encode_image(Scope<double>{t, const_cast<ParamStore<double>&>(wide.params)}, wide, img);
  CHECK(v.tokens.cols() == 8);
  CHECK(v.tokens.rows() == 9);
  Tape<double> t2;
  auto& ps = const_cast<ParamStore<double>&>(same.params);
  const auto enc = encode(Scope<double>{t2, ps}, img, same.enc());
  CHECK(bridge(Scope<double>{t2, ps}, enc.tokens).value() == enc.tokens.value());
}

TEST_CASE("decoder argument errors", "[decoder]") {
  const DecoderConfig d = toy_decoder();
  auto s = decoder_params(d, 16);
  Tape<double> t;
  const Scope<double> sc{t, s};
  const auto v = t.constant(MatD::Zero(3, d.embed_dim));
  const auto id2 = std::vector{Permutation::identity(2)};
  CHECK_THROWS(plm_loss(sc, d, v, {}, id2));
  CHECK_THROWS(plm_loss(sc, d, v, {0, 1, 2, 3, 4}, {Permutation::identity(6)}));
  CHECK_THROWS(plm_loss(sc, d, v, {5}, id2));
  CHECK_THROWS(plm_loss(sc, d, v, {1}, {Permutation::identity(3)}));
  CHECK_THROWS(plm_loss(sc, d, v, {1}, {}));
  CHECK_THROWS_AS(plm_loss(sc, d, t.constant(MatD::Zero(3, 4)), {1}, id2), ShapeError);
  CHECK_THROWS(decode_step(sc, d, v, {0}, 2));
  CHECK_THROWS(decode_step(sc, d, v, {0, 1, 2, 3, 4}, 5));
}

TEST_CASE("greedy decoding stops at EOS, caps length, emits at least one character", "[decoder]") {
  auto m = Model<float>::init(toy_config(), 17);
  std::mt19937_64 rng(18);
  const Image img = random_image(rng);
  auto& bias = m.params.value("dec.head.b");
  bias.setZero();
  bias(0, m.eos_id()) = 100.0f;
  bias(0, 3) = 50.0f;
  // EOS wins everywhere, but step 0 falls back to the best character.
  CHECK(greedy_decode(m, img).ids == std::vector<int>{3});

  bias(0, m.eos_id()) = 0.0f;
  CHECK(greedy_decode(m, img).ids == std::vector<int>(4, 3));

  DecodeAttention<float> attn;
  const auto d = greedy_decode(m, img, &attn);
  REQUIRE(attn.per_char.size() == d.ids.size());
  CHECK(attn.retained.size() == 9u);
  for (const auto& w : attn.per_char) {
    float sum = 0;
    for (float x : w) sum += x;
    CHECK(std::abs(sum - 1.0f) < 1e-5);
  }
}

TEST_CASE("argmax ties resolve to the lowest index", "[decoder]") {
  Eigen::RowVectorXf r(4);
  r << 1, 3, 3, 2;
  CHECK(argmax_lowest(r) == 1);
  CHECK(argmax_lowest(r, 1) == 2);
}
