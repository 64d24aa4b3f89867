// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// cstr: corpus generation, training, evaluation, recognition, cost tables
// and attention export. Exit codes: 0 success, 1 usage error, 2 runtime
// error.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cstr/flops.hpp"
#include "cstr/inference.hpp"
#include "cstr/trainer.hpp"

#ifndef CSTR_VERSION
#define CSTR_VERSION "0.0.0"
#endif

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
using namespace cstr;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Config keys whose flag is not the key with dashes.
const std::map<std::string, std::string>& key_aliases() {
  static const std::map<std::string, std::string> m = {
      {"encoder_spec", "--spec"},
      {"selection_scheme", "--selection"},
  };
  return m;
}

std::string flag_for_key(const std::string& key) {
  const auto it = key_aliases().find(key);
  if (it != key_aliases().end()) return it->second;
  std::string flag = "--" + key;
  std::replace(flag.begin(), flag.end(), '_', '-');
  return flag;
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

std::string scalar_to_string(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number_float()) {
    std::ostringstream os;
    os << std::setprecision(17) << v.get<double>();
    return os.str();
  }
  throw UsageError("config key '" + key + "' must be a string, number or boolean");
}

// Appends `--flag=value` for every config key the subcommand knows and the
// command line leaves unset, so explicit flags win.
std::vector<std::string> merge_config(CLI::App& sub, std::vector<std::string> args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (!path) return args;
  std::ifstream in(*path);
  if (!in) throw UsageError("cannot open config '" + *path + "'");
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config '" + *path + "': " + e.what());
  }
  if (!cfg.is_object()) throw UsageError("config '" + *path + "' must hold a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    const std::string flag = flag_for_key(key);
    if (flag == "--config" || !sub.get_option_no_throw(flag) || given_on_command_line(args, flag)) continue;
    args.push_back(flag + "=" + scalar_to_string(value, key));
  }
  return args;
}

// Every long option of `sub` with its resolved value.
json resolved_options(const CLI::App& sub) {
  json out = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help") continue;
    std::string key = name;
    std::replace(key.begin(), key.end(), '-', '_');
    if (opt->count() > 0) {
      const auto& r = opt->results();
      out[key] = r.size() == 1 ? json(r.front()) : json(r);
    } else {
      out[key] = opt->get_default_str();
    }
  }
  return out;
}

// Run record written before any work and completed at exit.
class RunManifest {
 public:
  RunManifest(const std::string& dir, const std::string& command, const std::vector<std::string>& argv,
              const json& options, std::uint64_t seed)
      : path_(fs::path(dir) / "run.json") {
    fs::create_directories(dir);
    doc_ = {{"tool", "cstr"},   {"version", CSTR_VERSION}, {"command", command},
            {"argv", argv},     {"seed", seed},            {"options", options},
            {"started_at", utc_now()}, {"status", "running"}};
    write();
  }
  json& doc() { return doc_; }
  void finish() {
    doc_["status"] = "ok";
    doc_["finished_at"] = utc_now();
    write();
  }
  void write() const {
    std::ofstream os(path_);
    if (!os) throw std::runtime_error("cannot write '" + path_.string() + "'");
    os << doc_.dump(2) << '\n';
  }

 private:
  fs::path path_;
  json doc_;
};

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool json = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON file of defaults; explicit flags win");
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_flag("--json", c.json, "Machine-readable output");
}

// Model shape options shared by train.
struct ModelOpts {
  std::string spec = "e-tiny";
  int decoder_blocks = 1;
  int decoder_dim = 768;
  int decoder_heads = 12;
  int patch = 16;
  int image_h = 224;
  int image_w = 224;
  int channels = 3;
  std::string charset = default_charset();
  int max_len = 25;
  std::string selection = "first_n";
  double init_std = kInitStd;

  ModelConfig build(std::uint64_t seed) const {
    ModelConfig c;
    c.encoder = parse_model_spec(spec);
    c.encoder.patch_size = patch;
    c.encoder.image_h = image_h;
    c.encoder.image_w = image_w;
    c.encoder.channels = channels;
    c.encoder.selection = parse_selection_scheme(selection);
    c.decoder.blocks = decoder_blocks;
    c.decoder.embed_dim = decoder_dim;
    c.decoder.heads = decoder_heads;
    c.decoder.max_len = max_len;
    c.charset = charset;
    c.decoder.charset_size = static_cast<int>(charset.size());
    c.seed = seed;
    c.init_std = init_std;
    return c;
  }
};

void add_model_options(CLI::App* sub, ModelOpts& m) {
  sub->add_option("--spec", m.spec, "Encoder spec, e.g. e-cc(6:6)-base or e-cc(2:2)-64,4,4");
  sub->add_option("--decoder-blocks", m.decoder_blocks, "Decoder blocks");
  sub->add_option("--decoder-dim", m.decoder_dim, "Decoder width");
  sub->add_option("--decoder-heads", m.decoder_heads, "Decoder heads");
  sub->add_option("--patch", m.patch, "Patch size in pixels");
  sub->add_option("--image-h", m.image_h, "Input height");
  sub->add_option("--image-w", m.image_w, "Input width");
  sub->add_option("--channels", m.channels, "Input channels (1 or 3)");
  sub->add_option("--charset", m.charset, "Symbols, in id order (default: from the corpus meta.json, else 94)");
  sub->add_option("--max-len", m.max_len, "Maximum label length");
  sub->add_option("--selection", m.selection, "Token selection: first_n|avg_pool_1d|max_pool_1d|conv2d_stride");
  sub->add_option("--init-std", m.init_std, "Standard deviation of the weight init");
}

void print_json_or(const Common& c, const json& j, const std::string& text) {
  if (c.json)
    std::cout << j.dump() << '\n';
  else
    std::cout << text;
}

// gen-data -----------------------------------------------------------------

struct GenOpts {
  std::string out;
  std::size_t count = 1000;
  std::size_t first = 0;
  RenderOptions render;
  std::string charset = default_charset();
};

int run_gen(const GenOpts& g, const Common& c, const json& options, const std::vector<std::string>& argv) {
  const Charset cs(g.charset);
  check_render_options(g.render, cs);
  RunManifest run(g.out, "gen-data", argv, options, c.seed);
  const auto records = generate_corpus(c.seed, g.first, g.count, cs, g.render);
  write_corpus(g.out, records, cs, g.render, c.seed);
  run.finish();
  print_json_or(c, {{"out", g.out}, {"count", records.size()}},
                "wrote " + std::to_string(records.size()) + " samples to " + g.out + "\n");
  return 0;
}

// train --------------------------------------------------------------------

struct TrainOpts {
  std::string manifest;
  std::string eval_manifest;
  std::string out;
  std::string resume;
  double max_minutes = 0;
  TrainConfig cfg;
};

std::string charset_from_meta(const std::string& manifest) {
  const fs::path meta = fs::path(manifest).parent_path() / "meta.json";
  if (!fs::exists(meta)) return {};
  try {
    const json j = json::parse(std::ifstream(meta));
    return j.value("charset", std::string());
  } catch (const json::exception&) {
    return {};
  }
}

int run_train(TrainOpts t, ModelOpts m, bool charset_given, const Common& c, const json& options,
              const std::vector<std::string>& argv) {
  if (!charset_given) {
    const std::string from_meta = charset_from_meta(t.manifest);
    if (!from_meta.empty()) m.charset = from_meta;
  }
  std::optional<Checkpoint> resume;
  Model<float> model;
  if (!t.resume.empty()) {
    resume = load_checkpoint(t.resume);
    model = model_from_checkpoint(*resume);
  } else {
    model = Model<float>::init(m.build(c.seed), c.seed);
  }
  t.cfg.seed = c.seed;
  t.cfg.max_wall_ms = t.max_minutes * 60000.0;
  t.cfg.checkpoint_path = (fs::path(t.out) / "model.ckpt").string();

  RunManifest run(t.out, "train", argv, options, c.seed);
  run.doc()["model"] = to_json(model.config);
  run.write();

  const Charset cs(model.config.charset);
  const auto data = load_manifest(t.manifest, cs, model.dec().max_len);
  std::vector<SampleRecord> eval;
  if (!t.eval_manifest.empty()) eval = load_manifest(t.eval_manifest, cs, model.dec().max_len);

  std::ofstream metrics(fs::path(t.out) / "metrics.jsonl");
  if (!metrics) throw std::runtime_error("cannot write metrics under '" + t.out + "'");
  const TrainResult res =
      train(model, data, t.cfg, &metrics, eval.empty() ? nullptr : &eval, resume ? &*resume : nullptr);
  run.doc()["result"] = {{"steps", res.steps}, {"last_loss", res.last_loss}};
  if (res.last_eval_acc >= 0) run.doc()["result"]["eval_word_acc"] = res.last_eval_acc;
  run.finish();

  json summary = {{"steps", res.steps}, {"last_loss", res.last_loss}, {"checkpoint", t.cfg.checkpoint_path}};
  std::ostringstream text;
  text << "steps " << res.steps << "  loss " << res.last_loss;
  if (res.last_eval_acc >= 0) {
    summary["eval_word_acc"] = res.last_eval_acc;
    text << "  eval word accuracy " << res.last_eval_acc;
  }
  text << "\ncheckpoint " << t.cfg.checkpoint_path << '\n';
  print_json_or(c, summary, text.str());
  return 0;
}

// eval / infer / attn ------------------------------------------------------

int run_eval(const std::string& ckpt, const std::string& manifest, bool normalize) {
  const Model<float> model = model_from_checkpoint(load_checkpoint(ckpt));
  const Charset cs(model.config.charset);
  const auto data = load_manifest(manifest, cs, model.dec().max_len);
  std::vector<std::string> preds, refs;
  for (const auto& rec : data) {
    preds.push_back(recognize(model, prepare_image(rec.image, model.enc())));
    refs.push_back(rec.label);
  }
  const double acc = word_accuracy(preds, refs, normalize);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    correct += normalize ? normalize_text(preds[i]) == normalize_text(refs[i]) : preds[i] == refs[i];
  std::cout << json{{"n", data.size()}, {"correct", correct}, {"word_acc", acc}}.dump() << '\n';
  return 0;
}

int run_infer(const std::string& ckpt, const std::vector<std::string>& images, const Common& c) {
  const Model<float> model = model_from_checkpoint(load_checkpoint(ckpt));
  json out = json::array();
  std::ostringstream text;
  for (const auto& path : images) {
    const std::string pred = recognize(model, prepare_image(read_pnm(path), model.enc()));
    out.push_back({{"image", path}, {"text", pred}});
    text << path << '\t' << pred << '\n';
  }
  print_json_or(c, out, text.str());
  return 0;
}

int run_attn(const std::string& ckpt, const std::string& image, const std::string& out, const Common& c,
             const json& options, const std::vector<std::string>& argv) {
  const Model<float> model = model_from_checkpoint(load_checkpoint(ckpt));
  const Image img = prepare_image(read_pnm(image), model.enc());
  RunManifest run(out, "attn", argv, options, c.seed);
  const AttentionMapSet set = export_attention(img, model, out);
  run.finish();
  json summary = {{"text", set.text}, {"grid_h", set.grid_h}, {"grid_w", set.grid_w}, {"maps", set.grids.size()},
                  {"out", out}};
  print_json_or(c, summary,
                set.text + "\n" + std::to_string(set.grids.size()) + " attention maps written to " + out + "\n");
  return 0;
}

// flops --------------------------------------------------------------------

struct FlopsOpts {
  std::string spec;
  std::string decoder = "d1";
  int patch = 16;
  int image_h = 224;
  int image_w = 224;
  CostConvention cv;
};

int run_flops(const FlopsOpts& f, const Common& c) {
  EncoderConfig base;
  base.image_h = f.image_h;
  base.image_w = f.image_w;
  const CostReport r = report(f.spec, f.decoder, f.patch, f.cv, &base);
  print_json_or(c, to_json(r), render_table(r));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cascaded-encoder scene text recognition", "cstr"};
  app.set_version_flag("--version", CSTR_VERSION);
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.option_defaults()->always_capture_default();

  Common common;

  GenOpts gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic glyph corpus");
  add_common(gen_cmd, common);
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.count, "Number of samples");
  gen_cmd->add_option("--first", gen.first, "Index of the first sample (for disjoint splits)");
  gen_cmd->add_option("--charset", gen.charset, "Symbols to draw from");
  gen_cmd->add_option("--min-len", gen.render.min_len, "Shortest label");
  gen_cmd->add_option("--max-len", gen.render.max_len, "Longest label");
  gen_cmd->add_option("--image-h", gen.render.canvas_h, "Canvas height");
  gen_cmd->add_option("--image-w", gen.render.canvas_w, "Canvas width");
  gen_cmd->add_option("--channels", gen.render.channels, "1 (PGM) or 3 (PPM)");
  gen_cmd->add_option("--min-scale", gen.render.min_scale, "Smallest glyph scale");
  gen_cmd->add_option("--max-scale", gen.render.max_scale, "Largest glyph scale");
  gen_cmd->add_option("--max-rotation", gen.render.max_rotation_deg, "Largest rotation in degrees");
  gen_cmd->add_option("--min-contrast", gen.render.min_contrast, "Smallest ink/background difference");
  gen_cmd->add_flag("--tight-crop", gen.render.tight_crop, "Text spans the canvas width");
  gen_cmd->add_flag("--stretch", gen.render.stretch, "With --tight-crop, also span the canvas height");
  gen_cmd->add_option("--max-margin", gen.render.max_margin, "Largest tight-crop margin, fraction of the canvas");

  ModelOpts model_opts;
  TrainOpts tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest");
  add_common(train_cmd, common);
  add_model_options(train_cmd, model_opts);
  train_cmd->add_option("--manifest", tr.manifest, "Training manifest (path<TAB>label)")->required();
  train_cmd->add_option("--eval-manifest", tr.eval_manifest, "Held-out manifest for periodic word accuracy");
  train_cmd->add_option("--out", tr.out, "Output directory (run.json, metrics.jsonl, model.ckpt)")->required();
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint (its model config is used)");
  train_cmd->add_option("--steps", tr.cfg.steps, "Optimizer steps");
  train_cmd->add_option("--batch-size", tr.cfg.batch_size, "Samples per step");
  train_cmd->add_option("--perms", tr.cfg.perms, "Permutations per sample");
  train_cmd->add_option("--lr", tr.cfg.adamw.lr, "Learning rate");
  train_cmd->add_option("--beta1", tr.cfg.adamw.beta1, "AdamW beta1");
  train_cmd->add_option("--beta2", tr.cfg.adamw.beta2, "AdamW beta2");
  train_cmd->add_option("--weight-decay", tr.cfg.adamw.weight_decay, "Decoupled weight decay");
  train_cmd->add_option("--warmup-steps", tr.cfg.warmup_steps, "Linear warmup steps");
  train_cmd->add_option("--clip-norm", tr.cfg.clip_norm, "Global gradient norm limit");
  train_cmd->add_option("--augment", tr.cfg.augment, "Random blur and noise (true|false)");
  train_cmd->add_option("--log-every", tr.cfg.log_every, "Steps per metrics line");
  train_cmd->add_option("--eval-every", tr.cfg.eval_every, "Steps per held-out evaluation (0: end only)");
  train_cmd->add_option("--checkpoint-every", tr.cfg.checkpoint_every, "Steps per checkpoint (0: end only)");
  train_cmd->add_option("--max-minutes", tr.max_minutes, "Stop after this much wall-clock time (0: no limit)");
  train_cmd->add_flag("--timing", tr.cfg.timing, "Log wall-clock time (logs are then not reproducible)");

  std::string ckpt, manifest, image, out;
  std::vector<std::string> images;
  bool normalize = false;
  auto* eval_cmd = app.add_subcommand("eval", "Word accuracy of a checkpoint on a manifest");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", ckpt, "Model checkpoint")->required();
  eval_cmd->add_option("--manifest", manifest, "Manifest to score")->required();
  eval_cmd->add_flag("--normalize", normalize, "Compare lowercase alphanumerics only");

  auto* infer_cmd = app.add_subcommand("infer", "Recognize text in images");
  add_common(infer_cmd, common);
  infer_cmd->add_option("--checkpoint", ckpt, "Model checkpoint")->required();
  infer_cmd->add_option("--image,images", images, "PGM/PPM images")->required();

  FlopsOpts fl;
  auto* flops_cmd = app.add_subcommand("flops", "Parameter and GFLOPs table for a configuration");
  add_common(flops_cmd, common);
  flops_cmd->add_option("--spec", fl.spec, "Encoder spec, e.g. e-cc(6:6)-base")->required();
  flops_cmd->add_option("--decoder", fl.decoder, "Decoder: d1, d2, d-tiny, d-small or d-base");
  flops_cmd->add_option("--patch", fl.patch, "Patch size");
  flops_cmd->add_option("--image-h", fl.image_h, "Input height");
  flops_cmd->add_option("--image-w", fl.image_w, "Input width");
  flops_cmd->add_option("--passes", fl.cv.passes, "Decoder forward passes per image");
  flops_cmd->add_flag("--attention", fl.cv.attention_products, "Count QK^T and PV products");
  flops_cmd->add_flag("--patch-embedding", fl.cv.patch_embedding, "Count the patch projection");

  auto* attn_cmd = app.add_subcommand("attn", "Export per-character attention maps");
  add_common(attn_cmd, common);
  attn_cmd->add_option("--checkpoint", ckpt, "Model checkpoint")->required();
  attn_cmd->add_option("--image", image, "PGM/PPM image")->required();
  attn_cmd->add_option("--out", out, "Output directory")->required();

  if (argc < 2) {
    std::cerr << app.help();
    return 1;
  }

  std::vector<std::string> args(argv + 1, argv + argc);
  if ((args.front().empty() || args.front().front() != '-') && !app.get_subcommand_no_throw(args.front())) {
    std::cerr << "unknown subcommand '" << args.front() << "'\n" << app.help();
    return 1;
  }
  const std::vector<std::string> argv_record(argv, argv + argc);
  try {
    if (auto* sub = app.get_subcommand_no_throw(args.front())) args = merge_config(*sub, std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*gen_cmd) return run_gen(gen, common, resolved_options(*gen_cmd), argv_record);
    if (*train_cmd)
      return run_train(tr, model_opts, train_cmd->count("--charset") > 0, common, resolved_options(*train_cmd),
                       argv_record);
    if (*eval_cmd) return run_eval(ckpt, manifest, normalize);
    if (*infer_cmd) return run_infer(ckpt, images, common);
    if (*flops_cmd) return run_flops(fl, common);
    if (*attn_cmd) return run_attn(ckpt, image, out, common, resolved_options(*attn_cmd), argv_record);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
