// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// AdamW, the mini-batch training loop, metrics logging and checkpoints.

#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cstr/data.hpp"
#include "cstr/model.hpp"

namespace cstr {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct OptimState {
  AdamWConfig hp;
  std::vector<Mat<T>> m;
  std::vector<Mat<T>> v;
  std::int64_t step = 0;

  static OptimState zeros(const ParamStore<T>& params, AdamWConfig hp = {}) {
    OptimState s;
    s.hp = hp;
    for (const auto& e : params.entries()) {
      s.m.push_back(Mat<T>::Zero(e.value.rows(), e.value.cols()));
      s.v.push_back(Mat<T>::Zero(e.value.rows(), e.value.cols()));
    }
    return s;
  }
};

/// One AdamW step from the gradients held in `params`:
///   theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta.
/// Nothing is modified when any gradient is non-finite. `lr` overrides
/// hp.lr when positive (warmup).
template <typename T>
void adamw_step(ParamStore<T>& params, OptimState<T>& st, double lr = -1) {
  auto& entries = params.entries();
  if (st.m.size() != entries.size() || st.v.size() != entries.size())
    throw ShapeError("adamw: optimizer state has " + std::to_string(st.m.size()) + " slots for " +
                     std::to_string(entries.size()) + " parameters");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.grad.rows() != e.value.rows() || e.grad.cols() != e.value.cols() || st.m[i].rows() != e.value.rows() ||
        st.m[i].cols() != e.value.cols())
      throw ShapeError("adamw: shape mismatch for '" + e.name + "'");
    if (!all_finite(e.grad)) throw NumericError("adamw: non-finite gradient in '" + e.name + "'");
  }
  if (lr <= 0) lr = st.hp.lr;
  ++st.step;
  const double b1 = st.hp.beta1, b2 = st.hp.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  const T decay = static_cast<T>(1.0 - lr * st.hp.weight_decay);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    st.m[i] = static_cast<T>(b1) * st.m[i] + static_cast<T>(1 - b1) * e.grad;
    st.v[i] = static_cast<T>(b2) * st.v[i] + static_cast<T>(1 - b2) * e.grad.cwiseProduct(e.grad);
    const auto m_hat = st.m[i].array() / static_cast<T>(c1);
    const auto v_hat = st.v[i].array() / static_cast<T>(c2);
    e.value.array() = decay * e.value.array() - static_cast<T>(lr) * m_hat / (v_hat.sqrt() + static_cast<T>(st.hp.eps));
  }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling.
template <typename T>
double clip_grad_norm(ParamStore<T>& params, double max_norm) {
  double sq = 0;
  for (const auto& e : params.entries()) sq += e.grad.template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& e : params.entries()) e.grad *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'S', 'T', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ParamStore<float> params;
  std::optional<OptimState<float>> optim;
  std::string rng_state;  // textual std::mt19937_64 state, may be empty
  std::int64_t step = 0;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename V>
void write_pod(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V read_pod(std::istream& is, const char* what) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError(std::string("checkpoint truncated in ") + what);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  using nlohmann::json;
  std::vector<const Mat<float>*> blobs;
  json tensors = json::array();
  std::uint64_t offset = 0;
  auto add = [&](const std::string& name, const Mat<float>& m) {
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"dtype", "f32"}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(float);
    blobs.push_back(&m);
  };
  for (const auto& e : ck.params.entries()) add(e.name, e.value);
  json header = {{"config", to_json(ck.config)}, {"step", ck.step}, {"rng", ck.rng_state}};
  if (ck.optim) {
    const auto& o = *ck.optim;
    const auto& entries = ck.params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) add("adamw.m." + entries[i].name, o.m[i]);
    for (std::size_t i = 0; i < entries.size(); ++i) add("adamw.v." + entries[i].name, o.v[i]);
    header["optimizer"] = {{"step", o.step},         {"lr", o.hp.lr},   {"beta1", o.hp.beta1},
                           {"beta2", o.hp.beta2},    {"eps", o.hp.eps}, {"weight_decay", o.hp.weight_decay}};
  }
  header["tensors"] = tensors;
  header["blob_bytes"] = offset;
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw CheckpointError("cannot write checkpoint '" + path + "'");
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
    detail::write_pod<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Mat<float>* m : blobs)
      os.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(float)));
    if (!os) throw CheckpointError("write failed for checkpoint '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  using nlohmann::json;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
  const auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::read_pod<std::uint64_t>(is, "header length");
  if (len > (1ULL << 30)) throw CheckpointError("checkpoint header length implausible");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw CheckpointError("checkpoint truncated in header");

  Checkpoint ck;
  json header;
  try {
    header = json::parse(text);
    ck.config = model_config_from_json(header.at("config"));
    ck.step = header.at("step").get<std::int64_t>();
    ck.rng_state = header.at("rng").get<std::string>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
  }

  // The header must describe exactly the parameters the config implies.
  const Model<float> expect = Model<float>::init(ck.config, 0);
  const std::size_t n_params = expect.params.size();
  const bool has_optim = header.contains("optimizer");
  const auto& tensors = header.at("tensors");
  if (tensors.size() != n_params * (has_optim ? 3 : 1))
    throw CheckpointError("checkpoint tensor count does not match its config");

  std::uint64_t offset = 0;
  std::vector<Mat<float>> mats;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& t = tensors[i];
    const auto& want = expect.params.entries()[i % n_params];
    const std::string prefix = i < n_params ? "" : i < 2 * n_params ? "adamw.m." : "adamw.v.";
    const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
    if (t.at("name").get<std::string>() != prefix + want.name)
      throw CheckpointError("checkpoint tensor " + std::to_string(i) + " is '" + t.at("name").get<std::string>() +
                            "', expected '" + prefix + want.name + "'");
    if (shape.size() != 2 || shape[0] != want.value.rows() || shape[1] != want.value.cols())
      throw CheckpointError("shape mismatch for '" + want.name + "': expected " + shape_str(want.value));
    if (t.at("dtype").get<std::string>() != "f32" || t.at("offset").get<std::uint64_t>() != offset)
      throw CheckpointError("bad dtype or offset for '" + want.name + "'");
    Mat<float> m(shape[0], shape[1]);
    const auto bytes = static_cast<std::streamsize>(m.size() * sizeof(float));
    if (!is.read(reinterpret_cast<char*>(m.data()), bytes)) throw CheckpointError("checkpoint truncated in tensor data");
    offset += static_cast<std::uint64_t>(bytes);
    mats.push_back(std::move(m));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint data");

  for (std::size_t i = 0; i < n_params; ++i) ck.params.add(expect.params.entries()[i].name, std::move(mats[i]));
  if (has_optim) {
    const auto& o = header.at("optimizer");
    OptimState<float> st;
    st.step = o.at("step").get<std::int64_t>();
    st.hp = {o.at("lr").get<double>(), o.at("beta1").get<double>(), o.at("beta2").get<double>(),
             o.at("eps").get<double>(), o.at("weight_decay").get<double>()};
    for (std::size_t i = 0; i < n_params; ++i) st.m.push_back(std::move(mats[n_params + i]));
    for (std::size_t i = 0; i < n_params; ++i) st.v.push_back(std::move(mats[2 * n_params + i]));
    ck.optim = std::move(st);
  }
  return ck;
}

/// Copies checkpoint weights into `model`. The parameter sets must agree in
/// names and shapes; the token schedule and selection scheme may differ.
inline void load_weights(Model<float>& model, const Checkpoint& ck) {
  const auto& have = ck.params.entries();
  auto& want = model.params.entries();
  if (have.size() != want.size())
    throw CheckpointError("config mismatch: checkpoint has " + std::to_string(have.size()) + " parameters, model has " +
                          std::to_string(want.size()));
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (have[i].name != want[i].name || have[i].value.rows() != want[i].value.rows() ||
        have[i].value.cols() != want[i].value.cols())
      throw CheckpointError("config mismatch at parameter '" + want[i].name + "'");
  }
  for (std::size_t i = 0; i < want.size(); ++i) want[i].value = have[i].value;
}

inline Model<float> model_from_checkpoint(const Checkpoint& ck) {
  Model<float> m = Model<float>::empty(ck.config);
  for (const auto& e : ck.params.entries()) m.params.add(e.name, e.value);
  return m;
}

// ---------------------------------------------------------------------------
// Training loop

class TrainDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::int64_t steps = 1000;
  int batch_size = 32;
  int perms = 4;
  AdamWConfig adamw;
  int warmup_steps = 0;
  double clip_norm = 1.0;
  bool augment = true;
  AugmentOptions augment_opts{1.0, 0.05, 0, 0};  // out size follows the model
  int log_every = 10;
  int eval_every = 0;        // 0 disables held-out evaluation
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::string checkpoint_path;
  bool timing = false;  // when false wall_ms is logged as 0 so logs are byte-reproducible
  double max_wall_ms = 0;  // > 0 stops early once this much time has passed
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::int64_t steps = 0;
  double last_loss = 0;
  std::vector<double> losses;  // mean batch loss per step
  double last_eval_acc = -1;
};

/// Learning rate at 1-based step `step` with linear warmup.
inline double scheduled_lr(const TrainConfig& cfg, std::int64_t step) {
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.adamw.lr * static_cast<double>(step) / cfg.warmup_steps;
  return cfg.adamw.lr;
}

/// Image as the model consumes it: channels converted and resized.
inline Image prepare_image(const Image& img, const EncoderConfig& enc) {
  Image x = convert_channels(img, enc.channels);
  if (x.height != enc.image_h || x.width != enc.image_w) x = resize_bilinear(x, enc.image_h, enc.image_w);
  return x;
}

/// Mean PLM loss over one batch; gradients accumulate into model.params.
inline double batch_loss_and_grad(Model<float>& model, const std::vector<const SampleRecord*>& batch,
                                  const Charset& cs, const TrainConfig& cfg, std::mt19937_64& rng,
                                  std::vector<double>* per_sample = nullptr) {
  double total = 0;
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (const SampleRecord* rec : batch) {
    Image img = prepare_image(rec->image, model.enc());
    if (cfg.augment) {
      AugmentOptions ao = cfg.augment_opts;
      ao.out_h = model.enc().image_h;
      ao.out_w = model.enc().image_w;
      img = augment(img, rng, ao);
    }
    const std::vector<int> chars = cs.ids(rec->label);
    const auto perms = sample_permutations(cfg.perms, static_cast<int>(chars.size()) + 1, rng);
    Tape<float> tape;
    const Scope<float> sc{tape, model.params};
    const Var<float> loss = sample_loss(sc, model, img, chars, perms);
    const double l = loss.value()(0, 0);
    tape.backward(scale(loss, inv));
    total += l;
    if (per_sample) per_sample->push_back(l);
  }
  return total / static_cast<double>(batch.size());
}

/// Fraction of records whose greedy decode equals the label exactly.
inline double evaluate_word_accuracy(const Model<float>& model, const std::vector<SampleRecord>& data,
                                     const Charset& cs) {
  if (data.empty()) return 0;
  std::size_t correct = 0;
  for (const auto& rec : data) {
    const Decoded d = greedy_decode(model, prepare_image(rec.image, model.enc()));
    std::string text;
    for (int id : d.ids) text.push_back(cs.symbol(id));
    correct += text == rec.label;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

inline std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw CheckpointError("bad rng state in checkpoint");
}

/// Trains `model` in place. Shuffled epochs of mini-batches, K permutations
/// per sample, AdamW with global-norm clipping. Writes JSON lines
/// {step, loss, lr, wall_ms} every log_every steps and {step, eval_word_acc}
/// every eval_every steps. A non-finite loss or gradient stops training,
/// writes the last good weights to checkpoint_path (when set) and throws
/// TrainDiverged. `resume` continues from a saved optimizer/rng state.
inline TrainResult train(Model<float>& model, const std::vector<SampleRecord>& data, const TrainConfig& cfg,
                         std::ostream* metrics = nullptr, const std::vector<SampleRecord>* eval = nullptr,
                         const Checkpoint* resume = nullptr) {
  if (data.empty()) throw DataError("train: dataset is empty");
  if (cfg.batch_size < 1 || cfg.perms < 1 || cfg.steps < 0) throw std::invalid_argument("train: bad batch/perms/steps");
  const Charset cs(model.config.charset);
  for (const auto& rec : data) {
    if (rec.label.empty() || static_cast<int>(rec.label.size()) > model.dec().max_len)
      throw DataError("train: label '" + rec.label + "' has unsupported length");
    cs.ids(rec.label);
  }

  std::mt19937_64 rng(cfg.seed);
  OptimState<float> opt = OptimState<float>::zeros(model.params, cfg.adamw);
  std::int64_t step = 0;
  if (resume) {
    if (resume->optim) opt = *resume->optim;
    opt.hp = cfg.adamw;
    step = resume->step;
    if (!resume->rng_state.empty()) rng_from_string(rng, resume->rng_state);
  }

  auto save = [&](const std::string& path) {
    Checkpoint ck;
    ck.config = model.config;
    ck.params = model.params;
    ck.optim = opt;
    ck.rng_state = rng_to_string(rng);
    ck.step = step;
    save_checkpoint(path, ck);
  };

  // The epoch order is re-derived from (seed, epoch) so resuming lands on
  // the same batches.
  const std::size_t n = data.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  auto order_for_epoch = [&](std::int64_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(sample_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    return order;
  };

  TrainResult res;
  const auto t0 = std::chrono::steady_clock::now();
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> order;
  double interval_loss = 0;
  int interval_n = 0;
  const std::int64_t end = step + cfg.steps;
  while (step < end) {
    const std::int64_t first = step * static_cast<std::int64_t>(bs);
    std::vector<const SampleRecord*> batch;
    for (std::size_t i = 0; i < bs; ++i) {
      const std::int64_t k = first + static_cast<std::int64_t>(i);
      const std::int64_t epoch = k / static_cast<std::int64_t>(n);
      if (epoch != cached_epoch) {
        order = order_for_epoch(epoch);
        cached_epoch = epoch;
      }
      batch.push_back(&data[order[static_cast<std::size_t>(k % static_cast<std::int64_t>(n))]]);
    }

    model.params.zero_grad();
    double loss = 0;
    try {
      loss = batch_loss_and_grad(model, batch, cs, cfg, rng);
      if (!std::isfinite(loss)) throw NumericError("loss is " + std::to_string(loss));
      clip_grad_norm(model.params, cfg.clip_norm);
      adamw_step(model.params, opt, scheduled_lr(cfg, step + 1));
    } catch (const NumericError& e) {
      if (!cfg.checkpoint_path.empty()) save(cfg.checkpoint_path);
      throw TrainDiverged("training diverged at step " + std::to_string(step + 1) + ": " + e.what());
    }
    ++step;
    const bool out_of_time =
        cfg.max_wall_ms > 0 &&
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() >= cfg.max_wall_ms;
    const bool last = step == end || out_of_time;
    res.losses.push_back(loss);
    res.last_loss = loss;
    interval_loss += loss;
    ++interval_n;

    if (metrics && cfg.log_every > 0 && (step % cfg.log_every == 0 || last)) {
      const double wall = cfg.timing ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() : 0.0;
      nlohmann::json line = {{"step", step}, {"loss", interval_loss / interval_n}, {"lr", scheduled_lr(cfg, step)},
                             {"wall_ms", wall}};
      *metrics << line.dump() << '\n';
      interval_loss = 0;
      interval_n = 0;
    }
    if (eval && cfg.eval_every > 0 && (step % cfg.eval_every == 0 || last)) {
      res.last_eval_acc = evaluate_word_accuracy(model, *eval, cs);
      if (metrics) *metrics << nlohmann::json{{"step", step}, {"eval_word_acc", res.last_eval_acc}}.dump() << '\n';
    }
    if (metrics) metrics->flush();
    if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      save(cfg.checkpoint_path);
    if (out_of_time) break;
  }
  if (!cfg.checkpoint_path.empty()) save(cfg.checkpoint_path);
  res.steps = step;
  return res;
}

}  // namespace cstr
