// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit 0 only when all
// selected criteria pass. Tolerances are fixed below.

#include <chrono>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cstr/flops.hpp"
#include "cstr/inference.hpp"
#include "cstr/trainer.hpp"

namespace {

using namespace cstr;
using MatD = Mat<double>;
namespace fs = std::filesystem;

// Tolerances.
constexpr double kEncFlopsTol = 0.12;
constexpr double kDecFlopsTol = 0.20;
constexpr double kFlopsSeconds = 1.0;
constexpr double kParamsTol = 0.02;
constexpr double kGradTol = 1e-4;
constexpr int kGradTrials = 100;
constexpr double kGradSeconds = 120.0;
constexpr int kMaskTriples = 500;
constexpr double kOracleTol = 1e-6;
constexpr double kDeskAccuracy = 0.95;
constexpr double kDeskGap = 0.02;

// Reference values: encoder rows tiny/small/base and decoder rows d1/d2,
// columns P = 8/16/32.
constexpr double kEncTable[3][3] = {{8.8, 2.2, 0.5}, {34.4, 8.6, 2.1}, {135.6, 33.9, 8.5}};
constexpr double kDecTable[2][3] = {{8.7, 3.5, 2.2}, {17.5, 7.0, 4.4}};
constexpr double kEncParams[3] = {5.5, 21.7, 85.8};
constexpr double kDecParams[2] = {9.6, 19.1};
constexpr double kSystemTable[3] = {5.7, 12.1, 37.4};  // standard encoder + d1, P=16
constexpr const char* kVariants[3] = {"tiny", "small", "base"};
constexpr int kPatches[3] = {8, 16, 32};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double rel(double got, double want) { return std::abs(got - want) / std::abs(want); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

MatD random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Image random_image(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w, 1);
  for (float& p : img.px) p = u(rng);
  return img;
}

Var<double> probe(Var<double> out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return weighted_sum(out, random_mat(out.rows(), out.cols(), rng));
}

// 1 ------------------------------------------------------------------------

Outcome flops_table() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_enc = 0, worst_dec = 0;
  std::string where_enc, where_dec;
  for (int v = 0; v < 3; ++v)
    for (int p = 0; p < 3; ++p) {
      EncoderConfig e = parse_model_spec(std::string("e-") + kVariants[v]);
      e.patch_size = kPatches[p];
      const double err = rel(count_encoder_flops(e, token_schedule(e)), kEncTable[v][p]);
      if (err > worst_enc) {
        worst_enc = err;
        where_enc = std::string(kVariants[v]) + "/P" + std::to_string(kPatches[p]);
      }
    }
  for (int b = 0; b < 2; ++b)
    for (int p = 0; p < 3; ++p) {
      EncoderConfig e = parse_model_spec("e-base");
      e.patch_size = kPatches[p];
      const double g = count_decoder_flops(make_decoder("d" + std::to_string(b + 1)), token_schedule(e).final_tokens());
      const double err = rel(g, kDecTable[b][p]);
      if (err > worst_dec) {
        worst_dec = err;
        where_dec = "d" + std::to_string(b + 1) + "/P" + std::to_string(kPatches[p]);
      }
    }
  const double secs = seconds_since(t0);
  return {worst_enc < kEncFlopsTol && worst_dec < kDecFlopsTol && secs < kFlopsSeconds,
          "worst encoder error " + fmt(100 * worst_enc) + "% at " + where_enc + " (tol 12%), worst decoder error " +
              fmt(100 * worst_dec) + "% at " + where_dec + " (tol 20%), " + fmt(secs * 1e3) + " ms"};
}

// 2 ------------------------------------------------------------------------

Outcome composition() {
  bool ok = true;
  double worst = 0;
  for (int v = 0; v < 3; ++v) {
    const CostReport r = report(std::string("e-") + kVariants[v], "d1", 16);
    ok = ok && r.gflops_total == r.gflops_encoder + r.gflops_decoder;
    worst = std::max(worst, rel(r.gflops_total, kSystemTable[v]));
  }
  int orderings = 0, held = 0;
  for (const char* v : kVariants)
    for (const char* d : {"d1", "d2"})
      for (int patch : kPatches) {
        const std::string s = std::string("-") + v;
        const double early = report("e-cc(3:9)" + s, d, patch).gflops_total;
        const double mid = report("e-cc(6:6)" + s, d, patch).gflops_total;
        const double late = report("e-cc(9:3)" + s, d, patch).gflops_total;
        const double standard = report("e" + s, d, patch).gflops_total;
        ++orderings;
        held += early < mid && mid < late && late < standard;
      }
  return {ok && worst < kEncFlopsTol && held == orderings,
          "standard system totals within " + fmt(100 * worst) + "% (tol 12%); cc(3:9) < cc(6:6) < cc(9:3) < standard in " +
              std::to_string(held) + "/" + std::to_string(orderings) + " variant/decoder/patch cells"};
}

// 3 ------------------------------------------------------------------------

Outcome parameters() {
  double worst = 0;
  const DecoderConfig d1 = make_decoder("d1"), d2 = make_decoder("d2");
  for (int v = 0; v < 3; ++v)
    worst = std::max(worst, rel(count_params(parse_model_spec(std::string("e-") + kVariants[v]), d1).encoder / 1e6,
                                kEncParams[v]));
  worst = std::max(worst, rel(count_params(parse_model_spec("e-base"), d1).decoder / 1e6, kDecParams[0]));
  worst = std::max(worst, rel(count_params(parse_model_spec("e-base"), d2).decoder / 1e6, kDecParams[1]));
  int pairs = 0, equal = 0;
  for (const char* v : kVariants) {
    const auto standard = count_params(parse_model_spec(std::string("e-") + v), d1);
    for (const char* cc : {"cc(3:9)", "cc(6:6)", "cc(9:3)", "cc(4:4:4)", "cc(3:3:3:3)"}) {
      const auto c = count_params(parse_model_spec(std::string("e-") + cc + "-" + v), d1);
      ++pairs;
      equal += c.encoder == standard.encoder && c.decoder == standard.decoder;
    }
  }
  return {worst < kParamsTol && equal == pairs, "worst error " + fmt(100 * worst) + "% (tol 2%); cascaded == standard in " +
                                                    std::to_string(equal) + "/" + std::to_string(pairs)};
}

// 4 ------------------------------------------------------------------------

ModelConfig toy_model(const std::string& spec, SelectionScheme scheme, int dec_dim) {
  ModelConfig c;
  c.encoder = parse_model_spec(spec);
  c.encoder.image_h = c.encoder.image_w = 16;
  c.encoder.patch_size = 8;
  c.encoder.channels = 1;
  c.encoder.selection = scheme;
  c.decoder.embed_dim = dec_dim;
  c.decoder.heads = 2;
  c.decoder.max_len = 4;
  c.charset = "abcd";
  c.init_std = 0.3;
  return c;
}

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(41);
  std::uniform_int_distribution<int> dim(1, 5);
  int trials = 0;
  double worst = 0;
  std::string worst_case;
  auto run = [&](const std::string& name, ParamStore<double>& s, auto&& f, double eps = 1e-5) {
    const auto r = grad_check(f, s, eps);
    ++trials;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_case = name + ":" + r.worst_param;
    }
  };

  for (int rep = 0; rep < 10; ++rep) {
    const int n = dim(rng), m = dim(rng), k = dim(rng) + 1;
    const std::uint64_t seed = rng();
    {
      ParamStore<double> s;
      s.add("x", random_mat(n, k, rng));
      s.add("w", random_mat(k, m, rng));
      s.add("b", random_mat(1, m, rng));
      run("linear", s, [&](Tape<double>& t, ParamStore<double>& st) {
        return probe(linear(t.param(st, "x"), t.param(st, "w"), t.param(st, "b")), seed);
      });
      run("add+scale", s, [&](Tape<double>& t, ParamStore<double>& st) {
        return probe(scale(add(t.param(st, "x"), t.param(st, "x")), 0.3), seed);
      });
    }
    {
      ParamStore<double> s;
      s.add("x", random_mat(n, k + 1, rng, 2.0));
      s.add("g", random_mat(1, k + 1, rng));
      s.add("b", random_mat(1, k + 1, rng));
      run("layer_norm", s, [&](Tape<double>& t, ParamStore<double>& st) {
        return probe(layer_norm(t.param(st, "x"), t.param(st, "g"), t.param(st, "b")), seed);
      });
      run("gelu", s, [&](Tape<double>& t, ParamStore<double>& st) { return probe(gelu(t.param(st, "x")), seed); });
    }
    {
      const int heads = 1 + rep % 2, d = 2 * heads;
      ParamStore<double> s;
      s.add("q", random_mat(n, d, rng));
      s.add("k", random_mat(m, d, rng));
      s.add("v", random_mat(m, d, rng));
      run("attention", s, [&](Tape<double>& t, ParamStore<double>& st) {
        return probe(attention(t.param(st, "q"), t.param(st, "k"), t.param(st, "v"), nullptr, heads), seed);
      });
      Mask mask(n, m, false);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j <= std::min(i, m - 1); ++j) mask.set(i, j, true);
      run("masked attention", s, [&](Tape<double>& t, ParamStore<double>& st) {
        return probe(attention(t.param(st, "q"), t.param(st, "k"), t.param(st, "v"), &mask, heads), seed);
      });
    }
    {
      const int rows = 2 * n + 1;
      ParamStore<double> s;
      s.add("x", random_mat(rows, k, rng));
      std::vector<RowWindow> w;
      for (int i = 0; i + 1 < rows; i += 2) w.push_back({i, std::min(rows, i + 3)});
      run("avg pool", s, [&](Tape<double>& t, ParamStore<double>& st) {
        return probe(pool_rows(t.param(st, "x"), w, PoolMode::kAverage), seed);
      });
      run("max pool", s, [&](Tape<double>& t, ParamStore<double>& st) {
        return probe(pool_rows(t.param(st, "x"), w, PoolMode::kMax), seed);
      });
      std::vector<std::pair<int, int>> pairs;
      for (int i = 0; i + 1 < rows; i += 2) pairs.emplace_back(i, i + 1);
      run("pair_rows+concat+gather", s, [&](Tape<double>& t, ParamStore<double>& st) {
        const auto x = t.param(st, "x");
        const auto y = concat_rows<double>({pair_rows(x, pairs), pair_rows(x, {{rows - 1, 0}})});
        return probe(gather_rows(y, {static_cast<int>(pairs.size()), 0, 0}), seed);
      });
    }
    {
      ParamStore<double> s;
      s.add("z", random_mat(n + 1, k + 1, rng, 2.0));
      std::vector<int> y;
      for (int i = 0; i <= n; ++i) y.push_back(i == 0 ? -1 : static_cast<int>(rng() % (k + 1)));
      run("cross_entropy", s, [&](Tape<double>& t, ParamStore<double>& st) {
        const auto a = cross_entropy(t.param(st, "z"), y, -1);
        const auto b = cross_entropy(gather_rows(t.param(st, "z"), {n}), {0});
        return mean_scalars<double>({a, b});
      });
    }
    {
      ParamStore<double> s;
      const int kd = 4 + 4 * (rep % 2);
      init_transformer_block(s, "b", kd, rng, 0.5);
      s.add("x", random_mat(1 + rep % 4, kd, rng));
      run("transformer block", s, [&](Tape<double>& t, ParamStore<double>& st) {
        const Scope<double> sc{t, st};
        return probe(apply_transformer_block(sc, "b", sc.p("x"), 2), seed);
      }, 1e-4);
    }
  }

  // Full encoder + decoder loss: at most 8 vision tokens, K <= 16, L <= 4.
  const std::vector<std::tuple<std::string, SelectionScheme, int>> models = {
      {"e-cc(1:1)-8,2,2", SelectionScheme::kFirstN, 8},       {"e-cc(1:1)-8,2,2", SelectionScheme::kAvgPool1D, 8},
      {"e-cc(1:1)-8,2,2", SelectionScheme::kMaxPool1D, 8},    {"e-cc(1:1)-8,2,2", SelectionScheme::kConv2DStride, 8},
      {"e-16,2,1", SelectionScheme::kFirstN, 8},              {"e-cc(1:1)-8,2,2", SelectionScheme::kFirstN, 16},
  };
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto& [spec, scheme, dec_dim] = models[i];
    auto model = Model<double>::init(toy_model(spec, scheme, dec_dim), 50 + i);
    const Image img = random_image(16, 16, rng);
    std::vector<int> chars(1 + i % 4);
    for (int& ch : chars) ch = static_cast<int>(rng() % 4);
    const auto perms = sample_permutations(i % 2 ? 16 : 4, static_cast<int>(chars.size()) + 1, rng);
    run("model " + spec + "/" + to_string(scheme), model.params, [&](Tape<double>& t, ParamStore<double>& st) {
      return sample_loss(Scope<double>{t, st}, model, img, chars, perms);
    });
  }
  const double secs = seconds_since(t0);
  return {worst < kGradTol && trials >= kGradTrials && secs < kGradSeconds,
          std::to_string(trials) + " trials, max relative error " + fmt(worst) + " at " + worst_case + " (tol 1e-4), " +
              fmt(secs) + " s"};
}

// 5 ------------------------------------------------------------------------

double log_softmax_at(const MatD& row, int target) {
  long double mx = row.maxCoeff(), z = 0;
  for (Eigen::Index j = 0; j < row.size(); ++j) z += std::exp(static_cast<long double>(row(j)) - mx);
  return static_cast<double>(static_cast<long double>(row(target)) - mx - std::log(z));
}

Outcome plm_mask() {
  auto model = Model<double>::init(toy_model("e-cc(1:1)-8,2,2", SelectionScheme::kFirstN, 8), 5);
  ModelConfig wide = model.config;
  wide.decoder.blocks = 2;
  wide.decoder.max_len = 5;
  const auto two = Model<double>::init(wide, 6);
  std::mt19937_64 rng(7);
  int triples = 0, broken = 0;
  for (int trial = 0; triples < kMaskTriples; ++trial) {
    const DecoderConfig& d = two.dec();
    auto& params = const_cast<ParamStore<double>&>(two.params);
    const int len = 1 + trial % d.max_len;
    std::vector<int> chars;
    for (int i = 0; i < len; ++i) chars.push_back(static_cast<int>(rng() % 4));
    const auto targets = with_eos(chars, d.charset_size);
    const int n = len + 1;
    const auto perm = sample_permutations(2, n, rng)[1];
    const Image img = random_image(16, 16, rng);
    std::vector<int> positions(n);
    std::iota(positions.begin(), positions.end(), 0);
    Tape<double> t;
    const Scope<double> sc{t, params};
    const Var<double> vision = encode_image(sc, two, img).tokens;
    const Mask mask = decoder_mask(perm);
    const MatD base = decode_positions(sc, d, vision, targets, positions, mask).value();
    const int q = static_cast<int>(rng() % n);
    for (int k = 0; k < n; ++k) {
      if (perm.rank[k] < perm.rank[q]) continue;
      std::vector<int> changed = targets;
      changed[k] = (changed[k] + 1 + static_cast<int>(rng() % 4)) % d.classes();
      const MatD out = decode_positions(sc, d, vision, changed, positions, mask).value();
      broken += out.row(q) != base.row(q);
      ++triples;
    }
  }

  double worst = 0;
  for (int len = 1; len <= model.dec().max_len; ++len) {
    std::vector<int> chars;
    for (int i = 0; i < len; ++i) chars.push_back(static_cast<int>(rng() % 4));
    const Image img = random_image(16, 16, rng);
    Tape<double> t;
    const Scope<double> sc{t, model.params};
    const Var<double> vision = encode_image(sc, model, img).tokens;
    const double plm = plm_loss(sc, model.dec(), vision, chars, {Permutation::identity(len + 1)}).value()(0, 0);
    const auto targets = with_eos(chars, model.dec().charset_size);
    long double nll = 0;
    for (int step = 0; step <= len; ++step) {
      Tape<double> t2;
      const std::vector<int> prefix(targets.begin(), targets.begin() + step);
      const MatD logits =
          decode_step(Scope<double>{t2, model.params}, model.dec(), t2.constant(vision.value()), prefix, step);
      nll -= log_softmax_at(logits.row(0), targets[step]);
    }
    worst = std::max(worst, std::abs(plm - static_cast<double>(nll / (len + 1))));
  }
  return {broken == 0 && triples >= kMaskTriples && worst < kOracleTol,
          std::to_string(triples) + " triples, " + std::to_string(broken) +
              " changed; identity loss vs autoregressive oracle max diff " + fmt(worst) + " (tol 1e-6)"};
}

// 6 ------------------------------------------------------------------------

Outcome cascade() {
  std::mt19937_64 rng(8);
  EncoderConfig standard = parse_model_spec("e-16,2,12");
  EncoderConfig cc = parse_model_spec("e-cc(6:6)-16,2,12");
  for (EncoderConfig* e : {&standard, &cc}) {
    e->channels = 1;
    e->patch_size = 16;
  }
  cc.reduction_enabled = false;
  ParamStore<float> s;
  init_encoder(s, standard, rng, 0.1);
  const Image img = random_image(224, 224, rng);
  Mat<float> a, b;
  {
    Tape<float> t;
    a = encode(Scope<float>{t, s}, img, standard).tokens.value();
  }
  {
    Tape<float> t;
    b = encode(Scope<float>{t, s}, img, cc).tokens.value();
  }
  const bool identical = a.rows() == b.rows() && a == b;

  int matched = 0, total = 0;
  std::string bad;
  for (const char* spec : {"e-cc(3:9)-16,2,12", "e-cc(6:6)-16,2,12", "e-cc(9:3)-16,2,12", "e-cc(4:4:4)-16,2,12",
                           "e-cc(3:3:3:3)-16,2,12"}) {
    for (auto scheme : {SelectionScheme::kFirstN, SelectionScheme::kAvgPool1D, SelectionScheme::kMaxPool1D}) {
      EncoderConfig e = parse_model_spec(spec);
      e.channels = 1;
      e.selection = scheme;
      ParamStore<float> ps;
      init_encoder(ps, e, rng, 0.1);
      EncodeTrace trace;
      Tape<float> t;
      const auto out = encode(Scope<float>{t, ps}, img, e, &trace);
      ++total;
      if (trace.counts == token_schedule(e).counts && out.count() == token_schedule(e).final_tokens())
        ++matched;
      else
        bad += std::string(" ") + spec;
    }
  }
  return {identical && matched == total,
          std::string("unreduced cc(6:6) ") + (identical ? "bit-identical" : "DIFFERS") +
              " to the 12-block encoder; token counts match the schedule in " + std::to_string(matched) + "/" +
              std::to_string(total) + bad};
}

// 7, 9 ---------------------------------------------------------------------

const std::string kDeskCharset = "0123456789ABCDEF";

RenderOptions desk_render() {
  RenderOptions o;
  o.canvas_h = o.canvas_w = 64;
  o.channels = 1;
  o.min_len = 1;
  o.max_len = 5;
  o.max_rotation_deg = 5;
  o.tight_crop = true;
  o.stretch = true;
  return o;
}

ModelConfig desk_model(const std::string& spec) {
  ModelConfig c;
  c.encoder = parse_model_spec(spec);
  c.encoder.patch_size = 8;
  c.encoder.image_h = c.encoder.image_w = 64;
  c.encoder.channels = 1;
  c.encoder.selection = SelectionScheme::kFirstN;
  c.decoder.blocks = 1;
  c.decoder.embed_dim = 64;
  c.decoder.heads = 4;
  c.decoder.max_len = 5;
  c.charset = kDeskCharset;
  c.init_std = 0.1;
  return c;
}

TrainConfig desk_training(double minutes, std::int64_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 16;
  t.perms = 4;
  t.adamw.lr = 1e-3;
  t.warmup_steps = 200;
  t.augment = false;
  t.log_every = 500;
  t.eval_every = 0;
  t.timing = true;
  t.max_wall_ms = minutes * 60000.0;
  t.seed = 11;
  return t;
}

struct DeskRun {
  Model<float> model;
  double accuracy = 0;
  std::int64_t steps = 0;
  double train_seconds = 0;
};

DeskRun train_desk(const std::string& spec, const std::vector<SampleRecord>& train_set,
                   const std::vector<SampleRecord>& held_out, double minutes, std::int64_t steps) {
  DeskRun run{Model<float>::init(desk_model(spec), 11)};
  const auto t0 = std::chrono::steady_clock::now();
  std::cerr << "training " << spec << " for up to " << minutes << " min\n";
  const TrainResult res = train(run.model, train_set, desk_training(minutes, steps), &std::cerr);
  run.train_seconds = seconds_since(t0);
  run.steps = res.steps;
  run.accuracy = evaluate_word_accuracy(run.model, held_out, Charset(kDeskCharset));
  return run;
}

Outcome attention_export(const Model<float>& model, const std::vector<SampleRecord>& held_out) {
  const fs::path root = fs::temp_directory_path() / "cstr_acceptance_attention";
  fs::remove_all(root);
  int images = 0, chars = 0, bad = 0;
  for (std::size_t i = 0; i < 50 && i < held_out.size(); ++i) {
    const fs::path dir = root / std::to_string(i);
    const AttentionMapSet set = export_attention(held_out[i].image, model, dir.string());
    ++images;
    DecodeAttention<float> attn;
    greedy_decode(model, held_out[i].image, &attn);
    std::set<int> allowed;
    for (const auto& src : attn.retained)
      for (int p : src)
        if (p != kClsSource) allowed.insert(p);
    bad += set.grids.size() != set.text.size() || set.text.empty();
    for (std::size_t c = 0; c < set.grids.size(); ++c) {
      ++chars;
      for (std::size_t p = 0; p < set.grids[c].size(); ++p)
        bad += set.grids[c][p] != 0.0 && !allowed.count(static_cast<int>(p));
      char name[32];
      std::snprintf(name, sizeof name, "char_%02zu.pgm", c);
      std::ifstream in(dir / name, std::ios::binary);
      std::string magic;
      in >> magic;
      bad += magic != "P5";
      try {
        const Image pgm = read_pnm((dir / name).string());
        bad += pgm.height != set.grid_h || pgm.width != set.grid_w || pgm.channels != 1;
      } catch (const std::exception&) {
        ++bad;
      }
    }
  }
  fs::remove_all(root);
  return {bad == 0 && chars > 0, std::to_string(images) + " images, " + std::to_string(chars) +
                                     " character maps, " + std::to_string(bad) +
                                     " violations (grid count, support outside retained patches, PGM validity)"};
}

// 8 ------------------------------------------------------------------------

Outcome determinism() {
  ModelConfig c = toy_model("e-cc(1:1)-16,2,2", SelectionScheme::kAvgPool1D, 16);
  c.encoder.image_h = c.encoder.image_w = 32;
  c.encoder.patch_size = 8;
  c.init_std = 0.02;
  RenderOptions o;
  o.canvas_h = o.canvas_w = 32;
  o.max_len = 3;
  o.min_scale = 1.0;
  o.max_rotation_deg = 0;
  const auto data = generate_corpus(3, 0, 32, Charset("abcd"), o);
  TrainConfig t;
  t.steps = 30;
  t.batch_size = 4;
  t.log_every = 1;
  t.seed = 4;
  std::string logs[2];
  Model<float> trained;
  for (auto& log : logs) {
    auto m = Model<float>::init(c, 4);
    std::ostringstream os;
    train(m, data, t, &os);
    log = os.str();
    trained = m;
  }
  const fs::path dir = fs::temp_directory_path() / "cstr_acceptance_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Checkpoint ck;
  ck.config = trained.config;
  ck.params = trained.params;
  save_checkpoint((dir / "a.ckpt").string(), ck);
  const Model<float> back = model_from_checkpoint(load_checkpoint((dir / "a.ckpt").string()));
  bool same = back.params.size() == trained.params.size();
  for (std::size_t i = 0; same && i < back.params.size(); ++i) {
    const auto& x = back.params.entries()[i].value;
    const auto& y = trained.params.entries()[i].value;
    same = x.rows() == y.rows() && x.cols() == y.cols() &&
           std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) == 0;
  }
  Checkpoint again;
  again.config = back.config;
  again.params = back.params;
  save_checkpoint((dir / "b.ckpt").string(), again);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const bool bytes = slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt");
  fs::remove_all(dir);
  const bool logs_equal = logs[0] == logs[1] && !logs[0].empty();
  return {logs_equal && same && bytes, std::string("metrics logs ") + (logs_equal ? "byte-identical" : "DIFFER") +
                                           "; checkpoint tensors " + (same ? "bitwise equal" : "DIFFER") +
                                           "; re-saved file " + (bytes ? "byte-identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  double minutes = 30;
  std::int64_t steps = 24000;
  app.add_option("--only", only, "Run only these criteria (1-9)")->delimiter(',');
  app.add_option("--minutes", minutes, "Training budget per desk model");
  app.add_option("--steps", steps, "Step cap per desk model");
  CLI11_PARSE(app, argc, argv);
  auto selected = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  int failures = 0;
  auto report_line = [&](int id, const std::string& name, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << name << ": " << o.detail << std::endl;
    failures += !o.pass;
  };
  auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    if (!selected(id)) return;
    try {
      report_line(id, name, f());
    } catch (const std::exception& e) {
      report_line(id, name, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, "FLOPs table", flops_table);
  guarded(2, "composition", composition);
  guarded(3, "parameters", parameters);
  guarded(4, "gradients", gradients);
  guarded(5, "PLM masks", plm_mask);
  guarded(6, "cascade equivalence", cascade);

  std::optional<DeskRun> cascaded;
  std::vector<SampleRecord> held_out;
  if (selected(7) || selected(9)) {
    const Charset cs(kDeskCharset);
    const auto train_set = generate_corpus(2026, 0, 20000, cs, desk_render());
    held_out = generate_corpus(2026, 20000, 2000, cs, desk_render());
    const double budget = minutes * 60 + 5;
    try {
      cascaded = train_desk("e-cc(2:2)-64,4,4", train_set, held_out, minutes, steps);
    } catch (const std::exception& e) {
      report_line(7, "desk-scale training", {false, std::string("error: ") + e.what()});
    }
    if (cascaded)
      guarded(7, "desk-scale training", [&]() -> Outcome {
        const DeskRun standard = train_desk("e-64,4,4", train_set, held_out, minutes, steps);
        const double gap = std::abs(standard.accuracy - cascaded->accuracy);
        const bool ok = cascaded->accuracy >= kDeskAccuracy && gap <= kDeskGap &&
                        cascaded->train_seconds <= budget && standard.train_seconds <= budget;
        return {ok, "cc(2:2) " + fmt(100 * cascaded->accuracy, 4) + "% in " + std::to_string(cascaded->steps) +
                        " steps / " + fmt(cascaded->train_seconds, 4) + " s; standard " +
                        fmt(100 * standard.accuracy, 4) + "% in " + std::to_string(standard.steps) + " steps / " +
                        fmt(standard.train_seconds, 4) + " s; gap " + fmt(100 * gap) + " points (need >= 95%, <= 2)"};
      });
  }
  guarded(8, "determinism", determinism);
  guarded(9, "attention export", [&]() -> Outcome {
    if (!cascaded) return {false, "no trained model (criterion 7 did not run)"};
    return attention_export(cascaded->model, held_out);
  });
  return failures == 0 ? 0 : 1;
}
