// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <catch2/catch_amalgamated.hpp>

#include "cstr/trainer.hpp"

using namespace cstr;
using Catch::Matchers::ContainsSubstring;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder = parse_model_spec("e-cc(1:1)-16,2,2");
  c.encoder.image_h = c.encoder.image_w = 32;
  c.encoder.patch_size = 8;
  c.encoder.channels = 1;
  c.decoder.blocks = 1;
  c.decoder.embed_dim = 16;
  c.decoder.heads = 2;
  c.decoder.max_len = 3;
  c.charset = "abcd";
  return c;
}

std::vector<SampleRecord> tiny_data(std::size_t n, std::uint64_t seed = 1) {
  RenderOptions o;
  o.canvas_h = o.canvas_w = 32;
  o.max_len = 3;
  o.min_scale = 1.0;
  o.max_rotation_deg = 0;
  return generate_corpus(seed, 0, n, Charset("abcd"), o);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cstr_test_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

bool same_params(const ParamStore<float>& a, const ParamStore<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.entries()[i].name != b.entries()[i].name || a.entries()[i].value != b.entries()[i].value) return false;
  return true;
}

TrainConfig quick(std::int64_t steps, int bs = 4) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = bs;
  t.log_every = 1;
  t.seed = 3;
  return t;
}

}  // namespace

TEST_CASE("AdamW matches a scalar reference", "[trainer]") {
  ParamStore<double> s;
  s.add("w", Mat<double>::Constant(1, 1, 0.8));
  AdamWConfig hp{0.01, 0.9, 0.95, 1e-8, 0.1};
  auto st = OptimState<double>::zeros(s, hp);
  long double w = 0.8L, m = 0, v = 0;
  const double grads[] = {0.5, -1.25, 3.0, 0.0, -0.1};
  for (int t = 1; t <= 5; ++t) {
    const long double g = grads[t - 1];
    s.grad("w")(0, 0) = grads[t - 1];
    adamw_step(s, st);
    m = 0.9L * m + 0.1L * g;
    v = 0.95L * v + 0.05L * g * g;
    const long double mh = m / (1 - std::pow(0.9L, t)), vh = v / (1 - std::pow(0.95L, t));
    w = (1 - 0.01L * 0.1L) * w - 0.01L * mh / (std::sqrt(vh) + 1e-8L);
    CHECK(std::abs(s.value("w")(0, 0) - static_cast<double>(w)) < 1e-12);
  }
  CHECK(st.step == 5);
}

TEST_CASE("zero gradients decay weights by exactly one minus lr times wd", "[trainer]") {
  ParamStore<double> s;
  s.add("w", Mat<double>::Constant(2, 2, 1.5));
  auto st = OptimState<double>::zeros(s, {0.1, 0.9, 0.999, 1e-8, 0.5});
  adamw_step(s, st);
  CHECK(s.value("w")(1, 1) == 1.5 * (1.0 - 0.1 * 0.5));
  adamw_step(s, st, 0.2);
  CHECK(s.value("w")(0, 0) == 1.5 * (1.0 - 0.1 * 0.5) * (1.0 - 0.2 * 0.5));
}

TEST_CASE("non-finite gradients abort the step untouched", "[trainer]") {
  ParamStore<float> s;
  s.add("a", Mat<float>::Ones(1, 2));
  s.add("b", Mat<float>::Ones(1, 2));
  auto st = OptimState<float>::zeros(s);
  s.grad("a").setConstant(0.5f);
  s.grad("b")(0, 1) = std::numeric_limits<float>::infinity();
  CHECK_THROWS_WITH(adamw_step(s, st), ContainsSubstring("'b'"));
  CHECK(s.value("a") == Mat<float>::Ones(1, 2));
  CHECK(st.step == 0);
}

TEST_CASE("global norm clipping", "[trainer]") {
  ParamStore<double> s;
  s.add("a", Mat<double>::Zero(1, 2));
  s.add("b", Mat<double>::Zero(1, 1));
  s.grad("a") << 3, 0;
  s.grad("b") << 4;
  CHECK(clip_grad_norm(s, 10.0) == Catch::Approx(5.0));
  CHECK(s.grad("a")(0, 0) == 3.0);
  CHECK(clip_grad_norm(s, 1.0) == Catch::Approx(5.0));
  CHECK(s.grad("a")(0, 0) == Catch::Approx(0.6));
  CHECK(s.grad("b")(0, 0) == Catch::Approx(0.8));
}

TEST_CASE("warmup ramps the learning rate linearly", "[trainer]") {
  TrainConfig c;
  c.adamw.lr = 1e-3;
  c.warmup_steps = 4;
  CHECK(scheduled_lr(c, 1) == Catch::Approx(2.5e-4));
  CHECK(scheduled_lr(c, 4) == Catch::Approx(1e-3));
  CHECK(scheduled_lr(c, 100) == 1e-3);
  c.warmup_steps = 0;
  CHECK(scheduled_lr(c, 1) == 1e-3);
}

TEST_CASE("checkpoints round-trip bit for bit", "[trainer]") {
  const auto dir = scratch("roundtrip");
  Checkpoint ck;
  ck.config = tiny_config();
  ck.config.seed = 42;
  auto model = Model<float>::init(ck.config, 5);
  ck.params = model.params;
  auto opt = OptimState<float>::zeros(model.params, {2e-3, 0.8, 0.9, 1e-7, 0.05});
  opt.step = 17;
  for (auto& m : opt.m) m.setRandom();
  for (auto& v : opt.v) v = v.Random(v.rows(), v.cols()).cwiseAbs();
  ck.optim = opt;
  std::mt19937_64 rng(9);
  rng.discard(123);
  ck.rng_state = rng_to_string(rng);
  ck.step = 17;
  const auto path = (dir / "a.ckpt").string();
  save_checkpoint(path, ck);
  CHECK_FALSE(fs::exists(path + ".tmp"));

  const Checkpoint back = load_checkpoint(path);
  CHECK(same_params(back.params, ck.params));
  CHECK(to_json(back.config) == to_json(ck.config));
  CHECK(back.step == 17);
  REQUIRE(back.optim.has_value());
  CHECK(back.optim->step == 17);
  CHECK(back.optim->hp.lr == 2e-3);
  CHECK(back.optim->hp.weight_decay == 0.05);
  for (std::size_t i = 0; i < opt.m.size(); ++i) {
    CHECK(back.optim->m[i] == opt.m[i]);
    CHECK(back.optim->v[i] == opt.v[i]);
  }
  std::mt19937_64 restored;
  rng_from_string(restored, back.rng_state);
  CHECK(restored() == rng());

  // Saving what was loaded reproduces the file byte for byte.
  save_checkpoint((dir / "b.ckpt").string(), back);
  CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("damaged checkpoints are rejected", "[trainer]") {
  const auto dir = scratch("damaged");
  Checkpoint ck;
  ck.config = tiny_config();
  ck.params = Model<float>::init(ck.config, 6).params;
  const auto good = dir / "good.ckpt";
  save_checkpoint(good.string(), ck);
  const std::string bytes = read_file(good);

  auto rejects = [&](const std::string& data, const std::string& msg) {
    write_file(dir / "bad.ckpt", data);
    CHECK_THROWS_WITH(load_checkpoint((dir / "bad.ckpt").string()), ContainsSubstring(msg));
  };
  rejects(bytes.substr(0, bytes.size() - 3), "truncated");
  rejects(bytes.substr(0, 10), "truncated");
  rejects(bytes + "x", "trailing bytes");
  rejects("NOTACKPT" + bytes.substr(8), "bad magic");
  std::string wrong_version = bytes;
  wrong_version[8] = 9;
  rejects(wrong_version, "version 9");

  // Rewrite the header with one tensor's shape transposed.
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 12, sizeof len);
  auto header = nlohmann::json::parse(bytes.substr(20, len));
  auto& shape = header["tensors"][0]["shape"];
  shape = {shape[1], shape[0]};
  const std::string text = header.dump();
  std::string tampered = bytes.substr(0, 12);
  const std::uint64_t new_len = text.size();
  tampered.append(reinterpret_cast<const char*>(&new_len), sizeof new_len);
  tampered += text + bytes.substr(20 + len);
  rejects(tampered, "shape mismatch for 'enc.patch.w'");

  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), CheckpointError);
  fs::remove_all(dir);
}

TEST_CASE("weights load across schedules but not across shapes", "[trainer]") {
  Checkpoint ck;
  ck.config = tiny_config();
  ck.params = Model<float>::init(ck.config, 7).params;

  ModelConfig other = tiny_config();
  other.encoder.blocks_per_stage = {2};  // same blocks, no reduction
  auto plain = Model<float>::init(other, 8);
  load_weights(plain, ck);
  CHECK(same_params(plain.params, ck.params));

  other.encoder.selection = SelectionScheme::kAvgPool1D;
  other.encoder.blocks_per_stage = {1, 1};
  auto pooled = Model<float>::init(other, 8);
  CHECK_NOTHROW(load_weights(pooled, ck));

  ModelConfig wider = tiny_config();
  wider.decoder.embed_dim = 8;
  auto w = Model<float>::init(wider, 9);
  CHECK_THROWS_WITH(load_weights(w, ck), ContainsSubstring("config mismatch"));
}

TEST_CASE("init_std scales the random weights only", "[trainer]") {
  ModelConfig wide = tiny_config();
  wide.init_std = 0.1;
  const auto a = Model<float>::init(tiny_config(), 9);
  const auto b = Model<float>::init(wide, 9);
  REQUIRE(a.params.size() == b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    const auto& ea = a.params.entries()[i];
    const auto& eb = b.params.entries()[i];
    INFO(ea.name);
    if (ea.name.ends_with(".g")) {
      CHECK(eb.value == ea.value);
      continue;
    }
    CHECK(((eb.value - 5.0f * ea.value).array().abs() <= 1e-6f * (1.0f + eb.value.array().abs())).all());
  }
  wide.init_std = 0;
  CHECK_THROWS_AS(Model<float>::init(wide, 9), ConfigError);
}

TEST_CASE("a wall-clock budget stops training early", "[trainer]") {
  auto model = Model<float>::init(tiny_config(), 3);
  TrainConfig cfg;
  cfg.steps = 1000000;
  cfg.batch_size = 2;
  cfg.max_wall_ms = 200;
  std::ostringstream log;
  const auto res = train(model, tiny_data(8), cfg, &log);
  CHECK(res.steps > 0);
  CHECK(res.steps < 1000000);
  CHECK(log.str().find("\"step\":" + std::to_string(res.steps) + ",") != std::string::npos);
}

TEST_CASE("training is deterministic for a fixed seed", "[trainer]") {
  const auto data = tiny_data(12);
  auto run = [&](std::string* log) {
    auto m = Model<float>::init(tiny_config(), 10);
    std::ostringstream os;
    train(m, data, quick(6), &os);
    *log = os.str();
    return m;
  };
  std::string a, b;
  const auto ma = run(&a), mb = run(&b);
  CHECK(a == b);
  CHECK(same_params(ma.params, mb.params));
  CHECK(a.find("\"wall_ms\":0.0") != std::string::npos);
  std::istringstream lines(a);
  int n = 0;
  for (std::string line; std::getline(lines, line); ++n) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("loss"));
    CHECK(j.at("step") == n + 1);
  }
  CHECK(n == 6);
}

TEST_CASE("resuming from a checkpoint continues the same run", "[trainer]") {
  const auto dir = scratch("resume");
  const auto data = tiny_data(10);
  auto straight = Model<float>::init(tiny_config(), 11);
  train(straight, data, quick(6, 3));

  auto first = Model<float>::init(tiny_config(), 11);
  TrainConfig half = quick(3, 3);
  half.checkpoint_path = (dir / "half.ckpt").string();
  train(first, data, half);
  const Checkpoint ck = load_checkpoint(half.checkpoint_path);
  CHECK(ck.step == 3);
  auto resumed = model_from_checkpoint(ck);
  train(resumed, data, quick(3, 3), nullptr, nullptr, &ck);
  CHECK(same_params(resumed.params, straight.params));
  fs::remove_all(dir);
}

TEST_CASE("a single sample is memorized", "[trainer]") {
  const auto data = tiny_data(1, 12);
  auto m = Model<float>::init(tiny_config(), 13);
  TrainConfig c = quick(500, 1);
  c.augment = false;
  c.adamw.lr = 3e-3;
  c.adamw.weight_decay = 0;
  const auto res = train(m, data, c);
  INFO("final loss " << res.last_loss);
  CHECK(res.last_loss < 0.01);
  CHECK(evaluate_word_accuracy(m, data, Charset("abcd")) == 1.0);
}

TEST_CASE("one permutation is the left-to-right objective", "[trainer]") {
  const auto data = tiny_data(1, 14);
  auto m = Model<float>::init(tiny_config(), 15);
  const Charset cs("abcd");
  TrainConfig c;
  c.augment = false;
  c.perms = 1;
  std::mt19937_64 rng(1);
  m.params.zero_grad();
  const double k1 = batch_loss_and_grad(m, {&data[0]}, cs, c, rng);

  Tape<float> t;
  const auto chars = cs.ids(data[0].label);
  const double ar = sample_loss(Scope<float>{t, m.params}, m, prepare_image(data[0].image, m.enc()), chars,
                                {Permutation::identity(static_cast<int>(chars.size()) + 1)})
                        .value()(0, 0);
  CHECK(k1 == ar);

  c.perms = 4;
  std::vector<double> per;
  m.params.zero_grad();
  const double k4 = batch_loss_and_grad(m, {&data[0]}, cs, c, rng, &per);
  REQUIRE(per.size() == 1);
  CHECK(k4 == per[0]);
  CHECK(std::isfinite(k4));
}

TEST_CASE("ten steps lower the batch loss for almost every seed", "[trainer][property]") {
  const Charset cs("abcd");
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto data = tiny_data(4, 100 + seed);
    auto m = Model<float>::init(tiny_config(), seed);
    TrainConfig c = quick(10, 4);
    c.augment = false;
    c.perms = 1;
    c.adamw.lr = 1e-3;
    c.seed = seed;
    std::vector<const SampleRecord*> batch;
    for (const auto& r : data) batch.push_back(&r);
    auto eval_loss = [&] {
      std::mt19937_64 rng(0);
      m.params.zero_grad();
      return batch_loss_and_grad(m, batch, cs, c, rng);
    };
    const double before = eval_loss();
    train(m, data, c);
    improved += eval_loss() < before;
  }
  CHECK(improved >= 19);
}

TEST_CASE("non-finite weights stop training with a checkpoint", "[trainer]") {
  const auto dir = scratch("diverge");
  auto m = Model<float>::init(tiny_config(), 16);
  m.params.value("dec.head.b")(0, 0) = std::numeric_limits<float>::quiet_NaN();
  TrainConfig c = quick(3);
  c.checkpoint_path = (dir / "last.ckpt").string();
  CHECK_THROWS_AS(train(m, tiny_data(4), c), TrainDiverged);
  CHECK(fs::exists(c.checkpoint_path));
  fs::remove_all(dir);
}

TEST_CASE("training rejects unusable data", "[trainer]") {
  auto m = Model<float>::init(tiny_config(), 17);
  CHECK_THROWS_AS(train(m, {}, quick(1)), DataError);
  auto data = tiny_data(2);
  data[0].label = "abcde";
  CHECK_THROWS_AS(train(m, data, quick(1)), DataError);
  data[0].label = "z";
  CHECK_THROWS_AS(train(m, data, quick(1)), DataError);
}
