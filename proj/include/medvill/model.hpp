#pragma once

#include "medvill/autodiff.hpp"
#include "medvill/config.hpp"
#include "medvill/image.hpp"
#include "medvill/masks.hpp"
#include "medvill/params.hpp"
#include "medvill/text.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace medvill {

/// K x c grid features plus the original grid index of every row.
template <typename T>
struct VisualFeatures {
  Var<T> features;
  int grid_rows = 0;
  int grid_cols = 0;
  std::vector<int> position_ids;

  int count() const { return static_cast<int>(position_ids.size()); }
};

template <typename T>
struct JointInput {
  Var<T> embeddings;
  SequenceLayout layout;
};

/// Encoder output plus, when requested, attention weights per layer and head.
template <typename T>
struct ContextualOutput {
  Var<T> hidden;
  std::vector<std::vector<Matrix<T>>> attention;
};

template <typename T>
Var<T> param(Tape<T>& tape, const ModelParams<T>& params, const std::string& name) {
  return tape.parameter(name, params.at(name));
}

/// Output grid of the visual encoder for an image of the given side.
inline std::pair<int, int> visual_grid(const VisualEncoderConfig& vis, int height, int width) {
  int h = height, w = width;
  for (int s : vis.strides) {
    if (h % s || w % s) throw DataError("image " + std::to_string(height) + "x" + std::to_string(width) +
                                        " is not tiled by the encoder strides");
    h /= s;
    w /= s;
  }
  return {h, w};
}

/// Flattened feature grid of an image (conv stack or patch-linear encoder).
template <typename T>
VisualFeatures<T> encode_image(Tape<T>& tape, const ImageGrid& image, const ModelParams<T>& params,
                               const ModelConfig& cfg) {
  if (image.height != cfg.vis.image_size || image.width != cfg.vis.image_size) {
    throw DataError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    ", encoder expects " + std::to_string(cfg.vis.image_size) + " square");
  }
  Matrix<T> pixels(static_cast<Eigen::Index>(image.pixels.size()), 1);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) pixels(static_cast<Eigen::Index>(i), 0) = static_cast<T>(image.pixels[i]);
  Var<T> x = tape.constant(std::move(pixels));
  int h = image.height, w = image.width;
  if (cfg.vis.kind == VisualEncoderConfig::Kind::Conv) {
    for (std::size_t i = 0; i < cfg.vis.strides.size(); ++i) {
      const int k = cfg.vis.strides[i];
      const std::string p = "vis.stage" + std::to_string(i);
      x = ad::relu(ad::affine(ad::patches(x, h, w, k, k), param(tape, params, p + ".weight"),
                              param(tape, params, p + ".bias")));
      h /= k;
      w /= k;
    }
  } else {
    const int k = cfg.vis.total_stride();
    x = ad::affine(ad::patches(x, h, w, k, k), param(tape, params, "vis.patch.weight"),
                   param(tape, params, "vis.patch.bias"));
    h /= k;
    w /= k;
  }
  VisualFeatures<T> out;
  out.features = x;
  out.grid_rows = h;
  out.grid_cols = w;
  out.position_ids.resize(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h * w; ++i) out.position_ids[static_cast<std::size_t>(i)] = i;
  return out;
}

/// Feature matrix as a constant on another tape (eval-time caching).
template <typename T>
VisualFeatures<T> rebind_visual(Tape<T>& tape, const Matrix<T>& features, const VisualFeatures<T>& like) {
  VisualFeatures<T> out = like;
  out.features = tape.constant(features);
  return out;
}

/// k rows drawn without replacement; rows keep their original grid index.
template <typename T>
VisualFeatures<T> sample_visual(const VisualFeatures<T>& visual, int k, Rng& rng) {
  if (k < 1 || k > visual.count()) {
    throw DataError("cannot sample " + std::to_string(k) + " of " + std::to_string(visual.count()) + " visual features");
  }
  const std::vector<int> rows = rng.sample_without_replacement(visual.count(), k);
  VisualFeatures<T> out;
  out.grid_rows = visual.grid_rows;
  out.grid_cols = visual.grid_cols;
  out.features = ad::gather_rows(visual.features, rows);
  for (int r : rows) out.position_ids.push_back(visual.position_ids[static_cast<std::size_t>(r)]);
  return out;
}

namespace position_row {
// Rows of the position table used by each slot of the joint sequence.
inline constexpr int kCls = 0;
inline constexpr int kSepV = 1;
inline constexpr int kClsL = 2;
inline constexpr int kFirstToken = 3;
}  // namespace position_row

/// Joint input sequence:
///   visual row   = (v_i + l_{pos(i)} + s_V) W + b
///   language row = token + position + s_L
///   CLS / SEP_V  = token + position + s_V W    (V-block modality vector in d)
///   CLS_L / SEP_L = token + position + s_L
/// `language_ids` are the real (unpadded) language tokens.
template <typename T>
JointInput<T> embed_joint(Tape<T>& tape, const VisualFeatures<T>& visual, const std::vector<int>& language_ids,
                          const ModelParams<T>& params, const SequenceLayout& layout) {
  if (layout.visual_count != visual.count() || layout.text_count != static_cast<int>(language_ids.size())) {
    throw DataError("layout (K=" + std::to_string(layout.visual_count) + ", N=" + std::to_string(layout.text_count) +
                    ") does not match inputs (K=" + std::to_string(visual.count()) +
                    ", N=" + std::to_string(language_ids.size()) + ")");
  }
  const Var<T> token = param(tape, params, "embed.token");
  const Var<T> position = param(tape, params, "embed.position");
  const Var<T> proj_w = param(tape, params, "embed.visual_proj.weight");
  const Var<T> s_v = param(tape, params, "embed.modality_visual");
  const Var<T> s_l = param(tape, params, "embed.modality_language");
  if (visual.features.cols() != s_v.cols()) throw DataError("visual feature width does not match the encoder config");
  if (layout.text_count + position_row::kFirstToken >= position.rows()) {
    throw DataError("language block of " + std::to_string(layout.text_count) + " tokens exceeds the position table");
  }
  for (int id : language_ids) {
    if (id < 0 || id >= token.rows()) throw DataError("token id " + std::to_string(id) + " outside the embedding table");
  }

  Var<T> v = ad::add(visual.features, ad::gather_rows(param(tape, params, "embed.visual_location"), visual.position_ids));
  v = ad::affine(ad::add_row(v, s_v), proj_w, param(tape, params, "embed.visual_proj.bias"));

  const Var<T> vision_specials = ad::add_row(
      ad::add(ad::gather_rows(token, {token_id::kCls, token_id::kSep}),
              ad::gather_rows(position, {position_row::kCls, position_row::kSepV})),
      ad::matmul(s_v, proj_w));

  std::vector<int> ids;
  std::vector<int> rows;
  if (layout.has_language_cls) {
    ids.push_back(token_id::kCls);
    rows.push_back(position_row::kClsL);
  }
  for (std::size_t i = 0; i < language_ids.size(); ++i) {
    ids.push_back(language_ids[i]);
    rows.push_back(position_row::kFirstToken + static_cast<int>(i));
  }
  ids.push_back(token_id::kSep);
  rows.push_back(position_row::kFirstToken + layout.text_count);
  const Var<T> language =
      ad::add_row(ad::add(ad::gather_rows(token, std::move(ids)), ad::gather_rows(position, std::move(rows))), s_l);

  JointInput<T> out;
  out.layout = layout;
  out.embeddings = ad::concat_rows<T>(
      {ad::gather_rows(vision_specials, {0}), v, ad::gather_rows(vision_specials, {1}), language});
  return out;
}

/// One attention head: softmax(Q K^T / sqrt(d_k) + M) V. The probability
/// matrix (before dropout) is written to `weights` when non-null.
template <typename T>
Var<T> attention_head(Var<T> q, Var<T> k, Var<T> v, const Matrix<T>& mask, double dropout_rate, Rng* rng,
                      Matrix<T>* weights) {
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
  Var<T> probs = ad::masked_softmax(ad::scale(ad::matmul_nt(q, k), inv_scale), mask);
  if (weights) *weights = probs.value();
  if (dropout_rate > 0.0 && rng) probs = ad::dropout(probs, dropout_rate, *rng);
  return ad::matmul(probs, v);
}

/// Plain-matrix attention; no gradient recording.
template <typename T>
Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, const AttentionMask<T>& mask,
                    Matrix<T>* weights = nullptr) {
  if (q.cols() != k.cols() || k.rows() != v.rows() || mask.size() != q.rows() || mask.size() != k.rows()) {
    throw NumericError("attention: inconsistent shapes");
  }
  Tape<T> tape(false);
  return attention_head(tape.constant(q), tape.constant(k), tape.constant(v), mask.additive, 0.0, nullptr, weights)
      .value();
}

namespace detail {

template <typename T>
Var<T> multi_head_attention(Tape<T>& tape, Var<T> x, const Matrix<T>& mask, const ModelParams<T>& params,
                            const ModelConfig& cfg, const std::string& prefix, double dropout, Rng* rng,
                            std::vector<Matrix<T>>* weights) {
  const Var<T> q = ad::affine(x, param(tape, params, prefix + ".query.weight"), param(tape, params, prefix + ".query.bias"));
  const Var<T> k = ad::affine(x, param(tape, params, prefix + ".key.weight"), param(tape, params, prefix + ".key.bias"));
  const Var<T> v = ad::affine(x, param(tape, params, prefix + ".value.weight"), param(tape, params, prefix + ".value.bias"));
  const int dk = cfg.head_dim();
  std::vector<Var<T>> heads;
  for (int h = 0; h < cfg.heads; ++h) {
    Matrix<T>* w = nullptr;
    if (weights) w = &weights->emplace_back();
    heads.push_back(attention_head(ad::slice_cols(q, h * dk, dk), ad::slice_cols(k, h * dk, dk),
                                   ad::slice_cols(v, h * dk, dk), mask, dropout, rng, w));
  }
  Var<T> merged = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
  return ad::affine(merged, param(tape, params, prefix + ".output.weight"), param(tape, params, prefix + ".output.bias"));
}

template <typename T>
Var<T> norm(Tape<T>& tape, Var<T> x, const ModelParams<T>& params, const std::string& prefix, const ModelConfig& cfg) {
  return ad::layer_norm(x, param(tape, params, prefix + ".gamma"), param(tape, params, prefix + ".beta"),
                        static_cast<T>(cfg.layer_norm_eps));
}

template <typename T>
Var<T> feed_forward(Tape<T>& tape, Var<T> x, const ModelParams<T>& params, const std::string& prefix) {
  Var<T> hidden = ad::gelu(ad::affine(x, param(tape, params, prefix + ".input.weight"), param(tape, params, prefix + ".input.bias")));
  return ad::affine(hidden, param(tape, params, prefix + ".output.weight"), param(tape, params, prefix + ".output.bias"));
}

}  // namespace detail

/// Runs the stacked transformer blocks. Dropout is active only when
/// `train_mode` is set and an rng is supplied.
template <typename T>
ContextualOutput<T> forward(Tape<T>& tape, const JointInput<T>& input, const AttentionMask<T>& mask,
                            const ModelParams<T>& params, const ModelConfig& cfg, bool train_mode, Rng* rng = nullptr,
                            bool keep_attention = false) {
  if (mask.size() != input.layout.size() || input.embeddings.rows() != input.layout.size()) {
    throw DataError("mask of size " + std::to_string(mask.size()) + " does not fit a sequence of " +
                    std::to_string(input.layout.size()));
  }
  if (input.embeddings.cols() != cfg.hidden) throw DataError("embedding width does not match hidden size");
  const double dropout = train_mode && rng ? cfg.dropout : 0.0;
  ContextualOutput<T> out;
  Var<T> x = input.embeddings;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    std::vector<Matrix<T>>* weights = nullptr;
    if (keep_attention) weights = &out.attention.emplace_back();
    if (cfg.pre_norm) {
      Var<T> a = detail::multi_head_attention(tape, detail::norm(tape, x, params, p + ".attn_norm", cfg), mask.additive,
                                              params, cfg, p + ".attn", dropout, rng, weights);
      x = ad::add(x, a);
      Var<T> f = detail::feed_forward(tape, detail::norm(tape, x, params, p + ".ffn_norm", cfg), params, p + ".ffn");
      if (dropout > 0.0) f = ad::dropout(f, dropout, *rng);
      x = ad::add(x, f);
    } else {
      Var<T> a = detail::multi_head_attention(tape, x, mask.additive, params, cfg, p + ".attn", dropout, rng, weights);
      x = detail::norm(tape, ad::add(x, a), params, p + ".attn_norm", cfg);
      Var<T> f = detail::feed_forward(tape, x, params, p + ".ffn");
      if (dropout > 0.0) f = ad::dropout(f, dropout, *rng);
      x = detail::norm(tape, ad::add(x, f), params, p + ".ffn_norm", cfg);
    }
    if (!x.value().allFinite()) throw NumericError("non-finite activation after encoder layer " + std::to_string(l));
  }
  if (cfg.pre_norm) x = detail::norm(tape, x, params, "final_norm", cfg);
  out.hidden = x;
  return out;
}

/// Rows of the MLM vocabulary head for the given hidden rows.
template <typename T>
Var<T> mlm_logits(Tape<T>& tape, Var<T> hidden_rows, const ModelParams<T>& params, const ModelConfig& cfg) {
  Var<T> h = ad::gelu(ad::affine(hidden_rows, param(tape, params, "head.mlm.transform.weight"),
                                 param(tape, params, "head.mlm.transform.bias")));
  h = detail::norm(tape, h, params, "head.mlm.norm", cfg);
  return ad::affine(h, param(tape, params, "head.mlm.decoder.weight"), param(tape, params, "head.mlm.decoder.bias"));
}

/// Pooled CLS representation: CLS alone, or [CLS ; CLS_L] when the layout
/// carries a language-side CLS.
template <typename T>
Var<T> pooled_cls(const ContextualOutput<T>& out, const SequenceLayout& layout, bool use_language_cls) {
  Var<T> cls = ad::gather_rows(out.hidden, {layout.cls()});
  if (!use_language_cls) return cls;
  if (!layout.has_language_cls) throw DataError("pooled CLS_L requested on a layout without CLS_L");
  return ad::concat_cols<T>({cls, ad::gather_rows(out.hidden, {layout.cls_l()})});
}

}  // namespace medvill
