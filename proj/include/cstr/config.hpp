// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// Model specifications: cascade notation parsing, validation, and the
// per-stage vision-token schedule.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cstr {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SelectionScheme { kFirstN, kAvgPool1D, kMaxPool1D, kConv2DStride };

inline std::string to_string(SelectionScheme s) {
  switch (s) {
    case SelectionScheme::kFirstN: return "first_n";
    case SelectionScheme::kAvgPool1D: return "avg_pool_1d";
    case SelectionScheme::kMaxPool1D: return "max_pool_1d";
    case SelectionScheme::kConv2DStride: return "conv2d_stride";
  }
  return "?";
}

inline SelectionScheme parse_selection_scheme(std::string_view s) {
  if (s == "first_n") return SelectionScheme::kFirstN;
  if (s == "avg_pool_1d") return SelectionScheme::kAvgPool1D;
  if (s == "max_pool_1d") return SelectionScheme::kMaxPool1D;
  if (s == "conv2d_stride") return SelectionScheme::kConv2DStride;
  throw ConfigError("unknown selection scheme '" + std::string(s) + "'");
}

struct EncoderConfig {
  std::string variant_name = "tiny";  // tiny|small|base, or "custom"
  int patch_size = 16;
  int embed_dim = 192;
  int heads = 3;
  std::vector<int> blocks_per_stage{12};
  SelectionScheme selection = SelectionScheme::kFirstN;
  int image_h = 224;
  int image_w = 224;
  int channels = 3;
  // Test hook: when false every stage keeps its input token count, so a
  // cascade degenerates to the plain encoder with identical weights.
  bool reduction_enabled = true;

  int total_blocks() const {
    return std::accumulate(blocks_per_stage.begin(), blocks_per_stage.end(), 0);
  }
  int stages() const { return static_cast<int>(blocks_per_stage.size()); }
  bool cascaded() const { return stages() > 1; }
  int grid_h() const { return image_h / patch_size; }
  int grid_w() const { return image_w / patch_size; }
  int num_patches() const { return grid_h() * grid_w(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
};

struct DecoderConfig {
  int blocks = 1;
  int embed_dim = 768;
  int heads = 12;
  int max_len = 25;
  int charset_size = 94;

  int classes() const { return charset_size + 1; }  // characters + EOS
  int max_positions() const { return max_len + 1; }
};

/// Token counts [N_0, ..., N_C]: N_0 enters stage 1, N_i leaves stage i.
/// The final stage never reduces, so N_C == N_{C-1}.
struct TokenSchedule {
  std::vector<int> counts;

  /// Tokens processed inside each stage (length C).
  std::vector<int> stage_tokens() const {
    return {counts.begin(), counts.end() - 1};
  }
  int final_tokens() const { return counts.back(); }
  bool operator==(const TokenSchedule&) const = default;
};

struct NamedVariant {
  std::string_view name;
  int dim;
  int heads;
  int blocks;
};

inline constexpr NamedVariant kVariants[] = {
    {"tiny", 192, 3, 12},
    {"small", 384, 6, 12},
    {"base", 768, 12, 12},
};

inline std::optional<NamedVariant> find_variant(std::string_view name) {
  for (const auto& v : kVariants)
    if (v.name == name) return v;
  return std::nullopt;
}

namespace detail {

inline std::vector<int> split_ints(const std::string& s, char sep, const std::string& what) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = s.find(sep, pos);
    const std::string tok = s.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
    if (tok.empty() || tok.find_first_not_of("-0123456789") != std::string::npos)
      throw ConfigError("malformed " + what + " '" + s + "'");
    out.push_back(std::stoi(tok));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

}  // namespace detail

/// Parses `e-<variant>` / `e-cc(i:j:...:k)-<variant>` where variant is a
/// named size or a custom `dim,heads,blocks` triple. Image geometry and the
/// selection scheme keep their defaults.
inline EncoderConfig parse_model_spec(std::string_view text) {
  static const std::regex re(R"(^e-(?:cc\(([-0-9:]+)\)-)?([a-z]+|[-0-9]+,[-0-9]+,[-0-9]+)$)");
  std::smatch m;
  const std::string s(text);
  if (!std::regex_match(s, m, re)) throw ConfigError("malformed model spec '" + s + "'");

  EncoderConfig cfg;
  int total = 0;
  const std::string variant = m[2].str();
  if (variant.find(',') != std::string::npos) {
    const auto triple = detail::split_ints(variant, ',', "custom variant");
    if (triple[0] <= 0 || triple[1] <= 0 || triple[2] <= 0)
      throw ConfigError("custom variant values must be positive in '" + s + "'");
    cfg.variant_name = "custom";
    cfg.embed_dim = triple[0];
    cfg.heads = triple[1];
    total = triple[2];
  } else {
    const auto named = find_variant(variant);
    if (!named) throw ConfigError("unknown variant '" + variant + "'");
    cfg.variant_name = variant;
    cfg.embed_dim = named->dim;
    cfg.heads = named->heads;
    total = named->blocks;
  }

  if (m[1].matched) {
    cfg.blocks_per_stage = detail::split_ints(m[1].str(), ':', "cascade");
    for (int b : cfg.blocks_per_stage)
      if (b <= 0) throw ConfigError("non-positive block count in '" + s + "'");
    const int sum = cfg.total_blocks();
    if (sum != total)
      throw ConfigError("blocks sum " + std::to_string(sum) + " != " + std::to_string(total) +
                        " for variant '" + variant + "'");
  } else {
    cfg.blocks_per_stage = {total};
  }
  return cfg;
}

/// Canonical spec string; inverse of parse_model_spec on canonical inputs.
inline std::string format_model_spec(const EncoderConfig& cfg) {
  std::string out = "e-";
  if (cfg.cascaded()) {
    out += "cc(";
    for (std::size_t i = 0; i < cfg.blocks_per_stage.size(); ++i) {
      if (i) out += ':';
      out += std::to_string(cfg.blocks_per_stage[i]);
    }
    out += ")-";
  }
  if (cfg.variant_name == "custom") {
    out += std::to_string(cfg.embed_dim) + "," + std::to_string(cfg.heads) + "," +
           std::to_string(cfg.total_blocks());
  } else {
    out += cfg.variant_name;
  }
  return out;
}

/// Decoders are named by block count (d1, d2, ...). The aliases d-tiny,
/// d-small and d-base map onto those names.
inline int parse_decoder_blocks(std::string_view name) {
  if (name == "d-tiny") return 1;
  if (name == "d-small" || name == "d-base") return 2;
  if (name.size() >= 2 && name[0] == 'd' &&
      name.substr(1).find_first_not_of("0123456789") == std::string_view::npos) {
    const int b = std::stoi(std::string(name.substr(1)));
    if (b >= 1) return b;
  }
  throw ConfigError("unknown decoder '" + std::string(name) + "'");
}

inline DecoderConfig make_decoder(std::string_view name) {
  DecoderConfig d;
  d.blocks = parse_decoder_blocks(name);
  return d;
}

inline int ceil_half(int n) { return (n + 1) / 2; }

/// N_0 = patches + CLS; each stage boundary halves with ceiling division.
inline TokenSchedule token_schedule(const EncoderConfig& cfg) {
  TokenSchedule s;
  const int n0 = cfg.num_patches() + 1;
  s.counts.push_back(n0);
  int n = n0;
  for (int i = 0; i < cfg.stages(); ++i) {
    const bool boundary = i + 1 < cfg.stages();
    if (boundary && cfg.reduction_enabled) {
      n = ceil_half(n);
      if (n < 2) throw ConfigError("token schedule drops below 2 tokens at stage " + std::to_string(i + 1));
    }
    s.counts.push_back(n);
  }
  return s;
}

struct ValidationIssue {
  std::string field;
  std::string message;
};

inline std::vector<ValidationIssue> check(const EncoderConfig& enc, const DecoderConfig& dec) {
  std::vector<ValidationIssue> issues;
  auto add = [&](std::string f, std::string msg) { issues.push_back({std::move(f), std::move(msg)}); };

  if (enc.embed_dim <= 0) add("embed_dim", "must be positive");
  if (enc.heads <= 0) add("heads", "must be positive");
  else if (enc.embed_dim % enc.heads != 0) add("embed_dim", "dim not divisible by heads");
  if (enc.blocks_per_stage.empty()) add("blocks_per_stage", "at least one stage required");
  for (int b : enc.blocks_per_stage)
    if (b <= 0) add("blocks_per_stage", "non-positive block count");
  if (const auto named = find_variant(enc.variant_name)) {
    if (enc.embed_dim != named->dim || enc.heads != named->heads)
      add("variant_name", "named variant dims are fixed");
    if (enc.total_blocks() != named->blocks)
      add("blocks_per_stage", "blocks sum " + std::to_string(enc.total_blocks()) + " != " +
                                  std::to_string(named->blocks));
  } else if (enc.variant_name != "custom") {
    add("variant_name", "unknown variant '" + enc.variant_name + "'");
  }
  if (enc.patch_size <= 0) {
    add("patch_size", "must be positive");
  } else {
    if (enc.image_h <= 0 || enc.image_h % enc.patch_size != 0) add("image_h", "not divisible by patch size");
    if (enc.image_w <= 0 || enc.image_w % enc.patch_size != 0) add("image_w", "not divisible by patch size");
  }
  if (enc.channels != 1 && enc.channels != 3) add("channels", "must be 1 or 3");

  if (issues.empty()) {
    try {
      const auto sched = token_schedule(enc);
      if (enc.selection == SelectionScheme::kConv2DStride && enc.cascaded() && enc.reduction_enabled) {
        if (enc.stages() > 2) add("selection_scheme", "conv2d_stride supports a single reduction (two stages)");
        else if (enc.grid_w() % 2 != 0) add("selection_scheme", "conv2d_stride needs an even grid width");
        else if (sched.counts[1] != 1 + enc.num_patches() / 2)
          add("selection_scheme", "conv2d_stride output does not match the halved schedule");
      }
    } catch (const ConfigError& e) {
      add("blocks_per_stage", e.what());
    }
  }

  if (dec.blocks < 1) add("decoder_blocks", "must be >= 1");
  if (dec.embed_dim <= 0 || dec.heads <= 0) add("decoder_dim", "must be positive");
  else if (dec.embed_dim % dec.heads != 0) add("decoder_dim", "dim not divisible by heads");
  if (dec.max_len < 1) add("max_len", "must be >= 1");
  if (dec.charset_size < 1) add("charset", "must contain at least one symbol");
  return issues;
}

struct ValidatedConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  TokenSchedule schedule;
};

inline ValidatedConfig validate(const EncoderConfig& enc, const DecoderConfig& dec) {
  const auto issues = check(enc, dec);
  if (!issues.empty()) {
    std::string msg;
    for (const auto& i : issues) msg += (msg.empty() ? "" : "; ") + i.field + ": " + i.message;
    throw ConfigError(msg);
  }
  return {enc, dec, token_schedule(enc)};
}

/// Default 94-symbol training alphabet.
inline const std::string& default_charset() {
  static const std::string s =
      "0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
      "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
  return s;
}

/// Everything needed to rebuild a model and its data pipeline.
struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::string charset = default_charset();
  std::uint64_t seed = 0;
  double init_std = 0.02;  // truncated-normal weight init

  std::string encoder_spec() const { return format_model_spec(encoder); }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"encoder_spec", format_model_spec(c.encoder)},
      {"decoder_blocks", c.decoder.blocks},
      {"decoder_dim", c.decoder.embed_dim},
      {"decoder_heads", c.decoder.heads},
      {"patch", c.encoder.patch_size},
      {"image_h", c.encoder.image_h},
      {"image_w", c.encoder.image_w},
      {"channels", c.encoder.channels},
      {"charset", c.charset},
      {"max_len", c.decoder.max_len},
      {"selection_scheme", to_string(c.encoder.selection)},
      {"seed", c.seed},
      {"init_std", c.init_std},
  };
}

/// Reads the config document. Missing keys keep the values already in `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  try {
    if (j.contains("encoder_spec")) {
      auto enc = parse_model_spec(j.at("encoder_spec").get<std::string>());
      enc.patch_size = base.encoder.patch_size;
      enc.image_h = base.encoder.image_h;
      enc.image_w = base.encoder.image_w;
      enc.channels = base.encoder.channels;
      enc.selection = base.encoder.selection;
      base.encoder = enc;
    }
    if (j.contains("decoder_blocks")) base.decoder.blocks = j.at("decoder_blocks").get<int>();
    if (j.contains("decoder_dim")) base.decoder.embed_dim = j.at("decoder_dim").get<int>();
    if (j.contains("decoder_heads")) base.decoder.heads = j.at("decoder_heads").get<int>();
    if (j.contains("patch")) base.encoder.patch_size = j.at("patch").get<int>();
    if (j.contains("image_h")) base.encoder.image_h = j.at("image_h").get<int>();
    if (j.contains("image_w")) base.encoder.image_w = j.at("image_w").get<int>();
    if (j.contains("channels")) base.encoder.channels = j.at("channels").get<int>();
    if (j.contains("charset")) base.charset = j.at("charset").get<std::string>();
    if (j.contains("max_len")) base.decoder.max_len = j.at("max_len").get<int>();
    if (j.contains("selection_scheme"))
      base.encoder.selection = parse_selection_scheme(j.at("selection_scheme").get<std::string>());
    if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("init_std")) base.init_std = j.at("init_std").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  base.decoder.charset_size = static_cast<int>(base.charset.size());
  return base;
}

}  // namespace cstr
