#pragma once

// Neural building blocks assembled from ops.hpp: embedding table, LSTM
// cell, stacked bidirectional LSTM encoder, multi-head attention, and a
// small convolutional visual encoder with a fixed K x D output contract.
//
// Layers are plain parameter containers; they are immutable during
// inference and exclusively owned during a training step.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "deltanet/gradcheck.hpp"
#include "deltanet/ops.hpp"
#include "deltanet/tensor.hpp"

namespace deltanet {

// Initialization conventions: uniform(-0.08, 0.08) for recurrent and
// embedding weights, scaled normal (std 1/sqrt(fan_in)) for projections,
// zeros for biases.
template <class S, class Rng>
Tensor<S> init_recurrent(Shape shape, Rng& rng) {
  return Tensor<S>::random_uniform(std::move(shape), S(-0.08), S(0.08), rng, true);
}

template <class S, class Rng>
Tensor<S> init_projection(Shape shape, Eigen::Index fan_in, Rng& rng) {
  return Tensor<S>::random_normal(std::move(shape), S(1.0 / std::sqrt(double(fan_in))), rng,
                                  true);
}

template <class S>
struct EmbeddingTable {
  Tensor<S> table;  // vocab x dim
  int pad_id = 0;

  EmbeddingTable() = default;
  template <class Rng>
  EmbeddingTable(Eigen::Index vocab, Eigen::Index dim, int pad, Rng& rng)
      : table(init_recurrent<S>({vocab, dim}, rng)), pad_id(pad) {}

  Eigen::Index vocab_size() const { return table.rows(); }
  Eigen::Index dim() const { return table.cols(); }

  Tensor<S> embed(const std::vector<int>& ids) const { return embedding_lookup(table, ids); }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    out.push_back({prefix + ".table", table});
  }
};

// Single LSTM cell; gate layout along the 4*hidden axis is [input, forget,
// cell, output]. With all-zero parameters and inputs h comes out exactly 0.
template <class S>
struct LstmCell {
  Tensor<S> wx;  // input_dim x 4*hidden
  Tensor<S> wh;  // hidden x 4*hidden
  Tensor<S> b;   // 1 x 4*hidden
  Eigen::Index hidden = 0;

  LstmCell() = default;
  template <class Rng>
  LstmCell(Eigen::Index input_dim, Eigen::Index hidden_dim, Rng& rng)
      : wx(init_recurrent<S>({input_dim, 4 * hidden_dim}, rng)),
        wh(init_recurrent<S>({hidden_dim, 4 * hidden_dim}, rng)),
        b(Tensor<S>::zeros({1, 4 * hidden_dim}, true)),
        hidden(hidden_dim) {}

  Eigen::Index input_dim() const { return wx.rows(); }

  // Shared input transform for a whole sequence: rows of matmul(x, wx).
  Tensor<S> input_transform(const Tensor<S>& x_rows) const { return matmul(x_rows, wx); }

  std::pair<Tensor<S>, Tensor<S>> step_from_transform(const Tensor<S>& xz,
                                                      const Tensor<S>& h_prev,
                                                      const Tensor<S>& c_prev) const {
    auto hc = lstm_gates(add_matmul_bias(xz, h_prev, wh, b), c_prev);
    return {slice_cols(hc, 0, hidden), slice_cols(hc, hidden, hidden)};
  }

  std::pair<Tensor<S>, Tensor<S>> step(const Tensor<S>& x, const Tensor<S>& h_prev,
                                       const Tensor<S>& c_prev) const {
    if (x.cols() != input_dim() || h_prev.cols() != hidden || c_prev.cols() != hidden)
      throw DimensionError("lstm_step: x " + shape_str(x.shape()) + ", h " +
                           shape_str(h_prev.shape()) + ", c " + shape_str(c_prev.shape()) +
                           " vs input_dim " + std::to_string(input_dim()) + ", hidden " +
                           std::to_string(hidden));
    return step_from_transform(input_transform(x), h_prev, c_prev);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    out.push_back({prefix + ".wx", wx});
    out.push_back({prefix + ".wh", wh});
    out.push_back({prefix + ".b", b});
  }
};

template <class S>
std::pair<Tensor<S>, Tensor<S>> lstm_step(const LstmCell<S>& cell, const Tensor<S>& x,
                                          const Tensor<S>& h_prev, const Tensor<S>& c_prev) {
  return cell.step(x, h_prev, c_prev);
}

// Stacked bidirectional LSTM; every layer emits the per-position
// concatenation [forward_t; backward_t] (width 2*hidden) and the final
// 2*hidden -> hidden projection is always applied.
template <class S>
struct BiLstmEncoder {
  std::vector<LstmCell<S>> forward_cells;
  std::vector<LstmCell<S>> backward_cells;
  Tensor<S> proj;    // 2*hidden x hidden
  Tensor<S> proj_b;  // 1 x hidden
  Eigen::Index hidden = 0;

  BiLstmEncoder() = default;
  template <class Rng>
  BiLstmEncoder(Eigen::Index input_dim, Eigen::Index hidden_dim, int num_layers, Rng& rng)
      : hidden(hidden_dim) {
    for (int l = 0; l < num_layers; ++l) {
      const Eigen::Index in = l == 0 ? input_dim : 2 * hidden_dim;
      forward_cells.emplace_back(in, hidden_dim, rng);
      backward_cells.emplace_back(in, hidden_dim, rng);
    }
    proj = init_projection<S>({2 * hidden_dim, hidden_dim}, 2 * hidden_dim, rng);
    proj_b = Tensor<S>::zeros({1, hidden_dim}, true);
  }

  int num_layers() const { return static_cast<int>(forward_cells.size()); }

  Tensor<S> encode(const Tensor<S>& rows) const {
    if (rows.rows() < 1)
      throw DimensionError("bilstm_encode: empty input " + shape_str(rows.shape()));
    Tensor<S> x = rows;
    for (int l = 0; l < num_layers(); ++l) {
      auto fwd = run_direction(forward_cells[l], x, /*reversed=*/false);
      auto bwd = run_direction(backward_cells[l], x, /*reversed=*/true);
      x = concat_cols<S>({fwd, bwd});
    }
    return add_rowwise(matmul(x, proj), proj_b);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    for (int l = 0; l < num_layers(); ++l) {
      forward_cells[l].collect(prefix + ".fwd" + std::to_string(l), out);
      backward_cells[l].collect(prefix + ".bwd" + std::to_string(l), out);
    }
    out.push_back({prefix + ".proj", proj});
    out.push_back({prefix + ".proj_b", proj_b});
  }

private:
  Tensor<S> run_direction(const LstmCell<S>& cell, const Tensor<S>& x, bool reversed) const {
    const Eigen::Index n = x.rows();
    auto xz = cell.input_transform(x);
    Tensor<S> h = Tensor<S>::zeros({1, hidden});
    Tensor<S> c = Tensor<S>::zeros({1, hidden});
    std::vector<Tensor<S>> states(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index t = reversed ? n - 1 - i : i;
      auto hc = cell.step_from_transform(slice_rows(xz, t, 1), h, c);
      h = hc.first;
      c = hc.second;
      states[t] = h;
    }
    return concat_rows(states);
  }
};

template <class S>
struct MhaResult {
  Tensor<S> output;   // 1 x dim
  Tensor<S> weights;  // heads x keys, each row sums to 1 over unmasked keys
};

// Scaled dot-product attention with a single query row; masked keys get
// exactly zero weight and the attention weights stay readable for tracing.
template <class S>
struct MultiHeadAttention {
  Tensor<S> wq, wk, wv, wo;  // dim x dim
  Eigen::Index heads = 0;
  Eigen::Index dim = 0;

  MultiHeadAttention() = default;
  template <class Rng>
  MultiHeadAttention(Eigen::Index model_dim, Eigen::Index num_heads, Rng& rng)
      : wq(init_projection<S>({model_dim, model_dim}, model_dim, rng)),
        wk(init_projection<S>({model_dim, model_dim}, model_dim, rng)),
        wv(init_projection<S>({model_dim, model_dim}, model_dim, rng)),
        wo(init_projection<S>({model_dim, model_dim}, model_dim, rng)),
        heads(num_heads),
        dim(model_dim) {
    if (num_heads < 1 || model_dim % num_heads != 0)
      throw DimensionError("mha: dim " + std::to_string(model_dim) +
                           " not divisible by heads " + std::to_string(num_heads));
  }

  MhaResult<S> apply(const Tensor<S>& query, const Tensor<S>& keys, const Tensor<S>& values,
                     const std::vector<std::uint8_t>& key_mask = {}) const {
    if (keys.rows() != values.rows())
      throw DimensionError("mha: keys " + shape_str(keys.shape()) + " vs values " +
                           shape_str(values.shape()));
    if (query.rows() != 1 || query.cols() != dim || keys.cols() != dim)
      throw DimensionError("mha: query " + shape_str(query.shape()) + ", keys " +
                           shape_str(keys.shape()) + " vs dim " + std::to_string(dim));
    if (!key_mask.empty()) {
      bool any = false;
      for (auto m : key_mask) any = any || (m != 0);
      if (!any) throw UsageError("mha: all keys masked");
    }
    const Eigen::Index dh = dim / heads;
    const S inv_sqrt = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));
    // The masked softmax path is used even without a mask so that masking a
    // key stays bit-identical to removing its row.
    const std::vector<std::uint8_t> mask =
        key_mask.empty() ? std::vector<std::uint8_t>(keys.rows(), 1) : key_mask;
    auto q = matmul(query, wq);
    auto k = matmul(keys, wk);
    auto v = matmul(values, wv);
    std::vector<Tensor<S>> score_rows;
    score_rows.reserve(heads);
    for (Eigen::Index h = 0; h < heads; ++h)
      score_rows.push_back(
          scale(row_dots(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh)), inv_sqrt));
    auto scores = concat_rows(score_rows);
    auto weights = masked_softmax_rows(scores, mask);
    std::vector<Tensor<S>> mixed;
    mixed.reserve(heads);
    for (Eigen::Index h = 0; h < heads; ++h)
      mixed.push_back(
          weighted_row_sum(slice_rows(weights, h, 1), slice_cols(v, h * dh, dh), mask));
    auto out = matmul(concat_cols(mixed), wo);
    return {out, weights};
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".wo", wo});
  }
};

struct ConvEncoderConfig {
  Eigen::Index in_channels = 1;
  Eigen::Index height = 32;
  Eigen::Index width = 32;
  Eigen::Index hidden_channels = 8;
  int stages = 3;  // conv3x3 + tanh + avgpool2x2 per stage
  Eigen::Index out_dim = 64;
};

// Convolutional visual encoder: `stages` rounds of 3x3 conv + tanh + 2x2
// average pooling, then a 1x1 projection to out_dim channels. Output is
// K x out_dim with K the final spatial extent, row-major over the map.
template <class S>
struct ConvEncoder {
  ConvEncoderConfig cfg;
  std::vector<Tensor<S>> kernels;  // (9*c_in) x c_out per stage
  std::vector<Tensor<S>> biases;   // 1 x c_out
  Tensor<S> proj;                  // hidden_channels x out_dim
  Tensor<S> proj_b;                // 1 x out_dim

  ConvEncoder() = default;
  template <class Rng>
  ConvEncoder(const ConvEncoderConfig& config, Rng& rng) : cfg(config) {
    if (cfg.stages < 1) throw UsageError("conv encoder: at least one stage required");
    Eigen::Index h = cfg.height, w = cfg.width, c = cfg.in_channels;
    for (int s = 0; s < cfg.stages; ++s) {
      if (h % 2 != 0 || w % 2 != 0)
        throw DimensionError("conv encoder: stage " + std::to_string(s) + " grid " +
                             std::to_string(h) + "x" + std::to_string(w) + " not poolable");
      kernels.push_back(init_projection<S>({9 * c, cfg.hidden_channels}, 9 * c, rng));
      biases.push_back(Tensor<S>::zeros({1, cfg.hidden_channels}, true));
      c = cfg.hidden_channels;
      h /= 2;
      w /= 2;
    }
    proj = init_projection<S>({c, cfg.out_dim}, c, rng);
    proj_b = Tensor<S>::zeros({1, cfg.out_dim}, true);
  }

  Eigen::Index spatial_positions() const {
    return (cfg.height >> cfg.stages) * (cfg.width >> cfg.stages);
  }

  Tensor<S> encode(const Tensor<S>& image) const {
    if (image.ndim() != 3 || image.shape()[0] != cfg.in_channels ||
        image.shape()[1] != cfg.height || image.shape()[2] != cfg.width)
      throw DimensionError("conv encoder: image " + shape_str(image.shape()) +
                           " vs configured [" + std::to_string(cfg.in_channels) + "x" +
                           std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + "]");
    Eigen::Index h = cfg.height, w = cfg.width;
    Tensor<S> x;
    for (int s = 0; s < cfg.stages; ++s) {
      auto patches = s == 0 ? im2col_image(image) : im2col_grid(x, h, w);
      x = tanh(add_rowwise(matmul(patches, kernels[s]), biases[s]));
      x = avg_pool_2x2(x, h, w);
      h /= 2;
      w /= 2;
    }
    return add_rowwise(matmul(x, proj), proj_b);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor<S>>& out) {
    for (std::size_t s = 0; s < kernels.size(); ++s) {
      out.push_back({prefix + ".conv" + std::to_string(s), kernels[s]});
      out.push_back({prefix + ".conv" + std::to_string(s) + "_b", biases[s]});
    }
    out.push_back({prefix + ".proj", proj});
    out.push_back({prefix + ".proj_b", proj_b});
  }
};

}  // namespace deltanet
