#pragma once

// The generation models: a basic encoder-decoder, the single-condition
// conditional model, and the multi-condition model with a learned textual
// gate per condition. One shared convolutional encoder embeds the input
// and every conditional image; the decoder attends to the visual features,
// the visual difference bank, and the gated conditional text bank.

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "deltanet/layers.hpp"
#include "deltanet/ops.hpp"
#include "deltanet/tensor.hpp"

namespace deltanet {

// Reserved token ids, fixed project-wide.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

enum class ModelMode { Basic, Delta1, DeltaL };

// Conditional-bank ablations. Full subtracts conditional visual features;
// CondImage / CondBoth keep the raw conditional features instead, and
// CondImage / CondReport drop the text or visual bank entirely.
enum class ConditionalVariant { Full, CondImage, CondReport, CondBoth };

inline const char* to_string(ModelMode m) {
  switch (m) {
    case ModelMode::Basic: return "basic";
    case ModelMode::Delta1: return "delta1";
    case ModelMode::DeltaL: return "deltaL";
  }
  return "?";
}

inline const char* to_string(ConditionalVariant v) {
  switch (v) {
    case ConditionalVariant::Full: return "full";
    case ConditionalVariant::CondImage: return "ic";
    case ConditionalVariant::CondReport: return "rc";
    case ConditionalVariant::CondBoth: return "icrc";
  }
  return "?";
}

struct ModelConfig {
  Eigen::Index hidden = 64;            // D
  Eigen::Index visual_positions = 16;  // K, must match the encoder geometry
  Eigen::Index vocab = 200;            // E
  Eigen::Index heads = 4;              // H
  int max_conditions = 3;              // L
  Eigen::Index cond_report_len = 40;   // fixed padded conditional length
  int max_decode_len = 60;
  ModelMode mode = ModelMode::Basic;
  ConditionalVariant variant = ConditionalVariant::Full;
  bool per_condition_gate_bias = false;
  bool gate_pinned_to_one = false;  // diagnostic: force every gate to exactly 1
  std::uint64_t seed = 1;

  Eigen::Index image_channels = 1;
  Eigen::Index image_height = 32;
  Eigen::Index image_width = 32;
  Eigen::Index conv_channels = 8;
  int conv_stages = 3;
  int bilstm_layers = 2;

  bool conditional() const { return mode != ModelMode::Basic; }
  bool has_visual_bank() const {
    return conditional() && variant != ConditionalVariant::CondReport;
  }
  bool visual_bank_is_delta() const { return variant == ConditionalVariant::Full; }
  bool has_text_bank() const {
    return conditional() && variant != ConditionalVariant::CondImage;
  }
  bool uses_gate() const {
    return mode == ModelMode::DeltaL && has_text_bank() && !gate_pinned_to_one;
  }
  // Width of [h; a; (s); (c)] feeding the output projection.
  Eigen::Index combined_width() const {
    return hidden * (2 + (has_visual_bank() ? 1 : 0) + (has_text_bank() ? 1 : 0));
  }

  void validate() const {
    if (hidden < 1 || visual_positions < 1 || vocab < 5 || heads < 1 ||
        cond_report_len < 1 || max_decode_len < 1)
      throw UsageError("model config: all sizes must be positive");
    if (hidden % heads != 0)
      throw UsageError("model config: hidden " + std::to_string(hidden) +
                       " not divisible by heads " + std::to_string(heads));
    if (conditional() && max_conditions < 1)
      throw UsageError("model config: conditional mode needs max_conditions >= 1");
    const Eigen::Index k =
        (image_height >> conv_stages) * (image_width >> conv_stages);
    if (k != visual_positions)
      throw UsageError("model config: encoder yields K=" + std::to_string(k) +
                       " but visual_positions=" + std::to_string(visual_positions));
  }

  ConvEncoderConfig encoder_config() const {
    ConvEncoderConfig c;
    c.in_channels = image_channels;
    c.height = image_height;
    c.width = image_width;
    c.hidden_channels = conv_channels;
    c.stages = conv_stages;
    c.out_dim = hidden;
    return c;
  }
};

// One conditional case handed to the model: the conditional image plus the
// encoded (BOS..EOS) conditional report, not yet padded.
template <class S>
struct ConditionInput {
  Tensor<S> image;
  std::vector<int> report_ids;
};

template <class S>
struct EncodedCondition {
  Tensor<S> visual;                // K x D
  Tensor<S> text;                  // N_c x D (padded length), if text bank active
  std::vector<std::uint8_t> mask;  // per padded text position
};

template <class S>
struct EncodedInputs {
  Tensor<S> visual;  // K x D
  std::vector<EncodedCondition<S>> conditions;
};

template <class S>
struct ConditionBanks {
  Tensor<S> visual;  // (K*L) x D, delta or raw conditional features
  Tensor<S> text;    // (N_c*L) x D, gate-weighted
  std::vector<std::uint8_t> text_mask;
  bool has_visual = false;
  bool has_text = false;
};

// Attention weights recorded at one decode step, per bank, head-major.
struct StepTrace {
  int token = -1;
  double logprob = 0.0;
  Eigen::Index heads = 0;
  std::vector<double> visual;      // heads x K
  std::vector<double> delta_bank;  // heads x (K*L)
  std::vector<double> text_bank;   // heads x (N_c*L)
};

struct DecodeTrace {
  std::vector<StepTrace> steps;
};

// A per-bank, per-step attention summary averaged over heads, with bank
// rows mapped back to (condition index, spatial/token position).
struct TraceCell {
  int step = 0;
  int token = -1;
  std::string bank;  // "visual" | "delta" | "text"
  int condition = -1;
  Eigen::Index position = 0;
  double weight = 0.0;
};

enum class DecodeStrategy { Greedy, Beam };

template <class S>
struct StepResult {
  Tensor<S> probs;  // 1 x E
  Tensor<S> h;
  Tensor<S> c;
  StepTrace trace;
};

template <class S>
struct DeltaNetModel {
  ModelConfig cfg;
  ConvEncoder<S> encoder;
  EmbeddingTable<S> embedding;
  LstmCell<S> decoder;
  BiLstmEncoder<S> report_encoder;
  MultiHeadAttention<S> attn_visual;
  MultiHeadAttention<S> attn_delta;
  MultiHeadAttention<S> attn_text;
  Tensor<S> gate_wv;  // D x 1
  Tensor<S> gate_wc;  // D x 1
  Tensor<S> gate_b;   // 1x1 shared, or L x 1 per-condition
  Tensor<S> w_p;      // combined_width x E

  explicit DeltaNetModel(const ModelConfig& config) : cfg(config) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    encoder = ConvEncoder<S>(cfg.encoder_config(), rng);
    embedding = EmbeddingTable<S>(cfg.vocab, cfg.hidden, kPadId, rng);
    decoder = LstmCell<S>(cfg.hidden, cfg.hidden, rng);
    if (cfg.conditional()) {
      // Every conditional mode draws the same parameter sequence so that
      // models built from one seed share values across modes.
      report_encoder = BiLstmEncoder<S>(cfg.hidden, cfg.hidden, cfg.bilstm_layers, rng);
      attn_visual = MultiHeadAttention<S>(cfg.hidden, cfg.heads, rng);
      attn_delta = MultiHeadAttention<S>(cfg.hidden, cfg.heads, rng);
      attn_text = MultiHeadAttention<S>(cfg.hidden, cfg.heads, rng);
      gate_wv = init_projection<S>({cfg.hidden, 1}, cfg.hidden, rng);
      gate_wc = init_projection<S>({cfg.hidden, 1}, cfg.hidden, rng);
      gate_b = Tensor<S>::zeros(
          {cfg.per_condition_gate_bias ? Eigen::Index(cfg.max_conditions) : 1, 1}, true);
    } else {
      attn_visual = MultiHeadAttention<S>(cfg.hidden, cfg.heads, rng);
    }
    w_p = init_projection<S>({cfg.combined_width(), cfg.vocab}, cfg.combined_width(), rng);
  }

  std::vector<NamedTensor<S>> named_parameters() {
    std::vector<NamedTensor<S>> out;
    encoder.collect("encoder", out);
    embedding.collect("embedding", out);
    decoder.collect("decoder", out);
    attn_visual.collect("attn_visual", out);
    if (cfg.has_text_bank()) report_encoder.collect("report_encoder", out);
    if (cfg.has_visual_bank()) attn_delta.collect("attn_delta", out);
    if (cfg.has_text_bank()) attn_text.collect("attn_text", out);
    if (cfg.uses_gate()) {
      out.push_back({"gate.wv", gate_wv});
      out.push_back({"gate.wc", gate_wc});
      out.push_back({"gate.b", gate_b});
    }
    out.push_back({"w_p", w_p});
    return out;
  }

  // --- encoding -----------------------------------------------------------

  EncodedInputs<S> encode_inputs(const Tensor<S>& image,
                                 const std::vector<ConditionInput<S>>& conditions) const {
    if (!cfg.conditional() && !conditions.empty())
      throw UsageError("encode_inputs: basic mode takes no conditions");
    if (cfg.conditional() && conditions.empty())
      throw UsageError("encode_inputs: conditional mode needs at least one condition");
    if (static_cast<int>(conditions.size()) > cfg.max_conditions)
      throw UsageError("encode_inputs: " + std::to_string(conditions.size()) +
                       " conditions exceed max_conditions=" +
                       std::to_string(cfg.max_conditions));
    EncodedInputs<S> out;
    out.visual = encoder.encode(image);
    for (const auto& cond : conditions) {
      EncodedCondition<S> ec;
      ec.visual = encoder.encode(cond.image);
      if (cfg.has_text_bank()) {
        auto [ids, mask] = pad_condition_report(cond.report_ids);
        ec.text = report_encoder.encode(embedding.embed(ids));
        ec.mask = std::move(mask);
      }
      out.conditions.push_back(std::move(ec));
    }
    return out;
  }

  // Rejects over-length conditional reports instead of truncating.
  std::pair<std::vector<int>, std::vector<std::uint8_t>> pad_condition_report(
      const std::vector<int>& ids) const {
    const auto fixed = static_cast<std::size_t>(cfg.cond_report_len);
    if (ids.size() > fixed)
      throw DimensionError("conditional report of length " + std::to_string(ids.size()) +
                           " exceeds fixed length " + std::to_string(fixed));
    std::vector<int> padded = ids;
    padded.resize(fixed, kPadId);
    std::vector<std::uint8_t> mask(fixed, 0);
    for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = 1;
    return {padded, mask};
  }

  Tensor<S> delta_features(const Tensor<S>& v, const Tensor<S>& v_c) const {
    return sub(v, v_c);
  }

  // Relevance of one conditional report given both feature maps; a single
  // scalar in (0,1) per condition.
  Tensor<S> gate_weight(const Tensor<S>& v, const Tensor<S>& v_c, int index) const {
    auto z = add(matmul(mean_pool_rows(v), gate_wv), matmul(mean_pool_rows(v_c), gate_wc));
    auto b = cfg.per_condition_gate_bias ? slice_rows(gate_b, index, 1) : gate_b;
    return sigmoid(add(z, b));
  }

  ConditionBanks<S> assemble_banks(const Tensor<S>& v,
                                   const std::vector<EncodedCondition<S>>& conditions) const {
    if (conditions.empty()) throw UsageError("assemble_banks: no conditions");
    ConditionBanks<S> banks;
    if (cfg.has_visual_bank()) {
      std::vector<Tensor<S>> parts;
      for (const auto& c : conditions)
        parts.push_back(cfg.visual_bank_is_delta() ? delta_features(v, c.visual) : c.visual);
      banks.visual = concat_rows(parts);
      banks.has_visual = true;
    }
    if (cfg.has_text_bank()) {
      std::vector<Tensor<S>> parts;
      banks.text_mask.clear();
      for (std::size_t i = 0; i < conditions.size(); ++i) {
        Tensor<S> t = conditions[i].text;
        if (cfg.mode == ModelMode::DeltaL) {
          auto g = cfg.gate_pinned_to_one
                       ? Tensor<S>::scalar(S(1))
                       : gate_weight(v, conditions[i].visual, static_cast<int>(i));
          t = mul(t, g);
        }
        parts.push_back(t);
        banks.text_mask.insert(banks.text_mask.end(), conditions[i].mask.begin(),
                               conditions[i].mask.end());
      }
      banks.text = concat_rows(parts);
      banks.has_text = true;
    }
    return banks;
  }

  // --- decoding -----------------------------------------------------------

  StepResult<S> decode_step(int prev_token, const Tensor<S>& h_prev, const Tensor<S>& c_prev,
                            const Tensor<S>& v, const ConditionBanks<S>& banks) const {
    if (cfg.has_visual_bank() && !banks.has_visual)
      throw UsageError("decode_step: conditional mode is missing the visual bank");
    if (cfg.has_text_bank() && !banks.has_text)
      throw UsageError("decode_step: conditional mode is missing the text bank");
    auto x = embedding.embed({prev_token});
    auto [h, c] = decoder.step(x, h_prev, c_prev);
    auto visual = attn_visual.apply(h, v, v);
    std::vector<Tensor<S>> parts{h, visual.output};
    StepResult<S> out;
    out.trace.heads = cfg.heads;
    copy_weights(visual.weights, out.trace.visual);
    if (cfg.has_visual_bank()) {
      auto delta = attn_delta.apply(h, banks.visual, banks.visual);
      parts.push_back(delta.output);
      copy_weights(delta.weights, out.trace.delta_bank);
    }
    if (cfg.has_text_bank()) {
      auto text = attn_text.apply(h, banks.text, banks.text, banks.text_mask);
      parts.push_back(text.output);
      copy_weights(text.weights, out.trace.text_bank);
    }
    out.probs = softmax_rows(matmul(concat_cols(parts), w_p));
    out.h = h;
    out.c = c;
    return out;
  }

  // Teacher-forced loss for one example; `target` is the encoded report
  // (BOS .. EOS) and `mask` flags the real positions of target[1..].
  Tensor<S> sequence_loss(const Tensor<S>& v, const ConditionBanks<S>& banks,
                          const std::vector<int>& target,
                          const std::vector<std::uint8_t>& mask) const {
    if (target.size() < 2)
      throw UsageError("sequence_loss: target needs at least BOS and one token");
    if (mask.size() != target.size() - 1)
      throw DimensionError("sequence_loss: mask length " + std::to_string(mask.size()) +
                           " vs " + std::to_string(target.size() - 1) + " steps");
    auto h = Tensor<S>::zeros({1, cfg.hidden});
    auto c = Tensor<S>::zeros({1, cfg.hidden});
    std::vector<Tensor<S>> rows;
    std::vector<int> shifted(target.begin() + 1, target.end());
    for (std::size_t t = 0; t + 1 < target.size(); ++t) {
      auto step = decode_step(target[t], h, c, v, banks);
      h = step.h;
      c = step.c;
      rows.push_back(step.probs);
    }
    return cross_entropy(concat_rows(rows), shifted, mask);
  }

  struct Generated {
    std::vector<int> tokens;  // generated ids, EOS included when emitted
    double logprob = 0.0;
    DecodeTrace trace;
  };

  Generated generate(const Tensor<S>& image, const std::vector<ConditionInput<S>>& conditions,
                     DecodeStrategy strategy = DecodeStrategy::Greedy,
                     int beam_width = 1) const {
    auto enc = encode_inputs(image, conditions);
    ConditionBanks<S> banks;
    if (cfg.conditional()) banks = assemble_banks(enc.visual, enc.conditions);
    if (strategy == DecodeStrategy::Greedy || beam_width <= 1)
      return greedy_decode(enc.visual, banks);
    return beam_decode(enc.visual, banks, beam_width);
  }

private:
  static void copy_weights(const Tensor<S>& w, std::vector<double>& out) {
    out.resize(static_cast<std::size_t>(w.numel()));
    for (Eigen::Index i = 0; i < w.numel(); ++i)
      out[static_cast<std::size_t>(i)] = static_cast<double>(w.values()[i]);
  }

  Generated greedy_decode(const Tensor<S>& v, const ConditionBanks<S>& banks) const {
    Generated gen;
    auto h = Tensor<S>::zeros({1, cfg.hidden});
    auto c = Tensor<S>::zeros({1, cfg.hidden});
    int prev = kBosId;
    for (int t = 0; t < cfg.max_decode_len; ++t) {
      auto step = decode_step(prev, h, c, v, banks);
      h = step.h;
      c = step.c;
      Eigen::Index best = 0;
      step.probs.values().maxCoeff(&best);
      const int token = static_cast<int>(best);
      step.trace.token = token;
      step.trace.logprob = std::log(static_cast<double>(step.probs.values()[best]));
      gen.logprob += step.trace.logprob;
      gen.tokens.push_back(token);
      gen.trace.steps.push_back(std::move(step.trace));
      if (token == kEosId) break;
      prev = token;
    }
    return gen;
  }

  struct Hypothesis {
    std::vector<int> tokens;
    double logprob = 0.0;
    Tensor<S> h;
    Tensor<S> c;
    DecodeTrace trace;
    bool finished = false;
  };

  Generated beam_decode(const Tensor<S>& v, const ConditionBanks<S>& banks,
                        int width) const {
    std::vector<Hypothesis> beam(1);
    beam[0].h = Tensor<S>::zeros({1, cfg.hidden});
    beam[0].c = Tensor<S>::zeros({1, cfg.hidden});
    auto better = [](const Hypothesis& a, const Hypothesis& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      return a.tokens < b.tokens;  // deterministic tie-break: lower token ids
    };
    for (int t = 0; t < cfg.max_decode_len; ++t) {
      std::vector<Hypothesis> next;
      bool any_open = false;
      for (const auto& hyp : beam) {
        if (hyp.finished) {
          next.push_back(hyp);
          continue;
        }
        any_open = true;
        const int prev = hyp.tokens.empty() ? kBosId : hyp.tokens.back();
        auto step = decode_step(prev, hyp.h, hyp.c, v, banks);
        // Top `width` continuations of this hypothesis, ties to lower ids.
        std::vector<std::pair<double, int>> scored;
        scored.reserve(static_cast<std::size_t>(cfg.vocab));
        for (Eigen::Index e = 0; e < cfg.vocab; ++e)
          scored.emplace_back(static_cast<double>(step.probs.values()[e]),
                              static_cast<int>(e));
        std::partial_sort(scored.begin(),
                          scored.begin() + std::min<std::size_t>(scored.size(),
                                                                 static_cast<std::size_t>(width)),
                          scored.end(), [](const auto& a, const auto& b) {
                            if (a.first != b.first) return a.first > b.first;
                            return a.second < b.second;
                          });
        for (int w = 0; w < width && w < static_cast<int>(scored.size()); ++w) {
          Hypothesis ext = hyp;
          const int token = scored[w].second;
          ext.tokens.push_back(token);
          ext.logprob += std::log(scored[w].first);
          ext.h = step.h;
          ext.c = step.c;
          StepTrace trace = step.trace;
          trace.token = token;
          trace.logprob = std::log(scored[w].first);
          ext.trace.steps.push_back(std::move(trace));
          ext.finished = token == kEosId;
          next.push_back(std::move(ext));
        }
      }
      if (!any_open) break;
      std::sort(next.begin(), next.end(), better);
      if (static_cast<int>(next.size()) > width) next.resize(width);
      beam = std::move(next);
    }
    std::sort(beam.begin(), beam.end(), better);
    Generated gen;
    gen.tokens = beam.front().tokens;
    gen.logprob = beam.front().logprob;
    gen.trace = std::move(beam.front().trace);
    return gen;
  }
};

// Head-averaged attention summary over [from, to) of the generated steps.
inline std::vector<TraceCell> export_trace(const DecodeTrace& trace, const ModelConfig& cfg,
                                           std::size_t from, std::size_t to) {
  if (from >= to || to > trace.steps.size())
    throw IndexError("export_trace: span [" + std::to_string(from) + "," +
                     std::to_string(to) + ") outside " + std::to_string(trace.steps.size()) +
                     " generated steps");
  std::vector<TraceCell> cells;
  auto emit = [&](const StepTrace& st, int step, const std::string& bank,
                  const std::vector<double>& weights, Eigen::Index block) {
    if (weights.empty()) return;
    const Eigen::Index heads = st.heads;
    const Eigen::Index width = static_cast<Eigen::Index>(weights.size()) / heads;
    for (Eigen::Index pos = 0; pos < width; ++pos) {
      double avg = 0.0;
      for (Eigen::Index h = 0; h < heads; ++h)
        avg += weights[static_cast<std::size_t>(h * width + pos)];
      avg /= static_cast<double>(heads);
      TraceCell cell;
      cell.step = step;
      cell.token = st.token;
      cell.bank = bank;
      cell.condition = bank == "visual" ? -1 : static_cast<int>(pos / block);
      cell.position = bank == "visual" ? pos : pos % block;
      cell.weight = avg;
      cells.push_back(cell);
    }
  };
  for (std::size_t s = from; s < to; ++s) {
    const auto& st = trace.steps[s];
    emit(st, static_cast<int>(s), "visual", st.visual, cfg.visual_positions);
    emit(st, static_cast<int>(s), "delta", st.delta_bank, cfg.visual_positions);
    emit(st, static_cast<int>(s), "text", st.text_bank, cfg.cond_report_len);
  }
  return cells;
}

using DeltaNetModelD = DeltaNetModel<double>;

}  // namespace deltanet
