// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// Closed-form parameter and forward-FLOP accounting. One multiply-add counts
// as 2 FLOPs. Element-wise work (softmax, layer norm, GELU, bias adds) is
// never counted; attention score/value products and the patch projection
// are optional terms of the convention.

#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cstr/config.hpp"

namespace cstr {

struct CostConvention {
  bool attention_products = false;  // QK^T and PV matmuls
  bool patch_embedding = false;     // patch projection in the encoder
  int passes = 4;                   // decoder forward passes per image

  std::string describe() const {
    std::string s = "MAC=2 FLOPs; linear projections";
    if (attention_products) s += " + attention score/value products";
    if (patch_embedding) s += " + patch embedding";
    s += "; element-wise ops excluded; decoder x" + std::to_string(passes) + " passes";
    return s;
  }
};

struct ParamCounts {
  std::int64_t encoder = 0;
  std::int64_t decoder = 0;  // includes the bridge and the output head
  std::int64_t bridge = 0;
  std::int64_t total() const { return encoder + decoder; }
};

inline ParamCounts count_params(const EncoderConfig& enc, const DecoderConfig& dec) {
  const std::int64_t k = enc.embed_dim, d = dec.embed_dim;
  ParamCounts c;
  c.encoder = enc.patch_dim() * k + k             // patch projection
              + k                                  // CLS
              + (enc.num_patches() + 1) * k        // positions
              + enc.total_blocks() * (12 * k * k + 13 * k) + 2 * k;
  if (enc.selection == SelectionScheme::kConv2DStride && enc.cascaded()) c.encoder += 2 * k * k + k;
  const std::int64_t classes = dec.classes(), positions = dec.max_positions();
  c.bridge = k == d ? 0 : k * d + d;
  c.decoder = c.bridge + 2 * positions * d + classes * d + d +
              dec.blocks * (16 * d * d + 21 * d) + 2 * d + d * classes + classes;
  return c;
}

inline double encoder_block_flops(double n, double k, const CostConvention& cv) {
  double macs = 12.0 * n * k * k;
  if (cv.attention_products) macs += 2.0 * n * n * k;
  return 2.0 * macs;
}

/// Encoder forward FLOPs under `sched` (GFLOPs).
inline double count_encoder_flops(const EncoderConfig& enc, const TokenSchedule& sched, const CostConvention& cv = {}) {
  const auto stage_tokens = sched.stage_tokens();
  double flops = 0;
  for (int i = 0; i < enc.stages(); ++i)
    flops += enc.blocks_per_stage[i] * encoder_block_flops(stage_tokens[i], enc.embed_dim, cv);
  if (cv.patch_embedding) flops += 2.0 * enc.num_patches() * enc.patch_dim() * enc.embed_dim;
  if (enc.selection == SelectionScheme::kConv2DStride && enc.cascaded() && enc.reduction_enabled)
    flops += 2.0 * (sched.counts[1] - 1) * 2.0 * enc.embed_dim * enc.embed_dim;
  return flops / 1e9;
}

/// One decoder block for L_eff query positions: context cross-attention
/// over BOS + L_eff context tokens, vision cross-attention over n_vis tokens,
/// the MLP and the output head. The head is charged per block so cost is
/// linear in the block count. FLOPs, not GFLOPs.
inline double decoder_block_flops(double l_eff, double n_vis, double d, double classes, const CostConvention& cv) {
  const double ctx = l_eff + 1;
  double macs = 2.0 * l_eff * d * d + 2.0 * ctx * d * d     // context attention q/out + k/v
                + 2.0 * l_eff * d * d + 2.0 * n_vis * d * d  // vision attention q/out + k/v
                + 8.0 * l_eff * d * d                        // MLP
                + l_eff * d * classes;                       // head
  if (cv.attention_products) macs += 2.0 * l_eff * ctx * d + 2.0 * l_eff * n_vis * d;
  return 2.0 * macs;
}

/// Decoder forward GFLOPs: blocks x passes full-length passes, L_eff = L + 1.
inline double count_decoder_flops(const DecoderConfig& dec, int n_vis, const CostConvention& cv = {}) {
  return cv.passes * dec.blocks *
         decoder_block_flops(dec.max_positions(), n_vis, dec.embed_dim, dec.classes(), cv) / 1e9;
}

/// One-off projection of the vision tokens to the decoder width (GFLOPs).
inline double count_bridge_flops(int vision_dim, const DecoderConfig& dec, int n_vis) {
  return vision_dim == dec.embed_dim ? 0.0 : 2.0 * n_vis * vision_dim * dec.embed_dim / 1e9;
}

struct CostReport {
  std::string encoder_spec;
  std::string decoder_name;
  int patch = 16;
  TokenSchedule schedule;
  std::int64_t params_encoder = 0;
  std::int64_t params_decoder = 0;
  double gflops_encoder = 0;
  double gflops_decoder = 0;
  double gflops_total = 0;
  std::string convention;
  EncoderConfig encoder;
  DecoderConfig decoder;
};

/// Costs for a spec string and decoder name at the given patch size on
/// 224x224 RGB inputs (unless `base` says otherwise).
inline CostReport report(const std::string& spec, const std::string& decoder_name, int patch,
                         const CostConvention& cv = {}, const EncoderConfig* base = nullptr) {
  EncoderConfig enc = parse_model_spec(spec);
  if (base) {
    enc.image_h = base->image_h;
    enc.image_w = base->image_w;
    enc.channels = base->channels;
    enc.selection = base->selection;
  }
  enc.patch_size = patch;
  const DecoderConfig dec = make_decoder(decoder_name);
  const ValidatedConfig v = validate(enc, dec);

  CostReport r;
  r.encoder_spec = format_model_spec(enc);
  r.decoder_name = "d" + std::to_string(dec.blocks);
  r.patch = patch;
  r.schedule = v.schedule;
  const ParamCounts pc = count_params(enc, dec);
  r.params_encoder = pc.encoder;
  r.params_decoder = pc.decoder;
  r.gflops_encoder = count_encoder_flops(enc, v.schedule, cv);
  r.gflops_decoder = count_decoder_flops(dec, v.schedule.final_tokens(), cv) +
                     count_bridge_flops(enc.embed_dim, dec, v.schedule.final_tokens());
  r.gflops_total = r.gflops_encoder + r.gflops_decoder;
  r.convention = cv.describe();
  r.encoder = enc;
  r.decoder = dec;
  return r;
}

inline nlohmann::json to_json(const CostReport& r) {
  return {
      {"encoder_spec", r.encoder_spec},
      {"decoder", r.decoder_name},
      {"patch", r.patch},
      {"token_schedule", r.schedule.counts},
      {"params_encoder", r.params_encoder},
      {"params_decoder", r.params_decoder},
      {"gflops_encoder", r.gflops_encoder},
      {"gflops_decoder", r.gflops_decoder},
      {"gflops_total", r.gflops_total},
      {"convention", r.convention},
  };
}

/// Text table: one ENC and one DEC row with blocks, dim, heads, params and
/// GFLOPs, then the total.
inline std::string render_table(const CostReport& r) {
  std::ostringstream os;
  os << std::fixed;
  auto row = [&](const std::string& part, const std::string& name, const std::string& blocks, int dim, int heads,
                 std::int64_t params, double gflops) {
    os << std::left << std::setw(5) << part << std::setw(22) << name << std::setw(12) << blocks << std::right
       << std::setw(6) << dim << std::setw(7) << heads << std::setw(10) << std::setprecision(1) << params / 1e6
       << " M" << std::setw(11) << std::setprecision(2) << gflops << '\n';
  };
  os << std::left << std::setw(5) << "" << std::setw(22) << "model" << std::setw(12) << "blocks" << std::right
     << std::setw(6) << "dim" << std::setw(7) << "heads" << std::setw(12) << "params" << std::setw(11)
     << "GFLOPs" << "   (P=" << r.patch << ")\n";
  std::string blocks;
  for (std::size_t i = 0; i < r.encoder.blocks_per_stage.size(); ++i)
    blocks += (i ? ":" : "") + std::to_string(r.encoder.blocks_per_stage[i]);
  row("ENC", r.encoder_spec, blocks, r.encoder.embed_dim, r.encoder.heads, r.params_encoder, r.gflops_encoder);
  row("DEC", r.decoder_name, std::to_string(r.decoder.blocks), r.decoder.embed_dim, r.decoder.heads, r.params_decoder,
      r.gflops_decoder);
  os << std::left << std::setw(5) << "" << std::setw(47) << "total" << std::right << std::setw(10)
     << std::setprecision(1) << (r.params_encoder + r.params_decoder) / 1e6 << " M" << std::setw(11)
     << std::setprecision(2) << r.gflops_total << '\n';
  os << "tokens:";
  for (int n : r.schedule.counts) os << ' ' << n;
  os << "\nconvention: " << r.convention << '\n';
  return os.str();
}

}  // namespace cstr
