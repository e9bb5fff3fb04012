#pragma once

#include "medvill/medvill.hpp"

#include <string>
#include <vector>

namespace medvill::testing {

/// Two-layer, two-head, d=8 model used for gradient and causality checks.
inline ModelConfig small_config(MaskScheme pretrain = MaskScheme::BAR, int vocab = 12, int answers = 3) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.hidden = 8;
  cfg.ff = 16;
  cfg.dropout = 0.0;
  cfg.precision = 64;
  cfg.vis.image_size = 32;
  cfg.vis.strides = {4, 2};
  cfg.vis.mid_channels = 4;
  cfg.vis.channels = 6;
  cfg.max_len = 8;
  cfg.vocab_size = vocab;
  cfg.answer_count = answers;
  cfg.language_cls = pretrain == MaskScheme::NonCrossing;
  cfg.validate();
  return cfg;
}

/// Mask assembled quadrant by quadrant from block sizes alone, without the
/// per-entry rule used by build_mask.
inline Matrix<double> quadrant_oracle(int k, int n, MaskScheme scheme, double neg = kDefaultMaskNeg) {
  const int v = k + 2;
  const int l = n + (scheme == MaskScheme::NonCrossing ? 2 : 1);
  const int s = v + l;
  Matrix<double> m = Matrix<double>::Zero(s, s);
  switch (scheme) {
    case MaskScheme::Bi:
      break;
    case MaskScheme::NonCrossing:
      m.block(0, v, v, l).setConstant(neg);
      m.block(v, 0, l, v).setConstant(neg);
      break;
    case MaskScheme::S2S:
    case MaskScheme::BAR: {
      if (scheme == MaskScheme::S2S) m.block(0, v, v, l).setConstant(neg);
      Matrix<double> causal = Matrix<double>::Constant(l, l, neg);
      causal.triangularView<Eigen::Lower>().setZero();
      m.block(v, v, l, l) = causal;
      break;
    }
  }
  return m;
}

inline ImageGrid random_image(Rng& rng, int side = 32) {
  ImageGrid img(side, side);
  for (auto& p : img.pixels) p = rng.uniform();
  return img;
}

inline std::vector<int> random_tokens(Rng& rng, int n, int vocab) {
  std::vector<int> ids;
  for (int i = 0; i < n; ++i) ids.push_back(rng.uniform_int(token_id::kReservedCount, vocab - 1));
  return ids;
}

/// Sum of every head's loss on one fixed example; touches every parameter.
struct AllHeadsLoss {
  ModelConfig cfg;
  ImageGrid image;
  std::vector<int> tokens;
  std::vector<int> mlm_positions{1, 3};
  int answer = 1;

  Var<double> operator()(Tape<double>& tape, const ModelParams<double>& params) const {
    const VisualFeatures<double> vis = encode_image(tape, image, params, cfg);
    const MaskScheme scheme = cfg.language_cls ? MaskScheme::NonCrossing : MaskScheme::BAR;
    const auto pass = run_joint(tape, vis, tokens, params, cfg, scheme, false);
    std::vector<int> rows, targets;
    for (int p : mlm_positions) {
      rows.push_back(pass.layout.text_begin() + p);
      targets.push_back((tokens[static_cast<std::size_t>(p)] + 1) % cfg.vocab_size);
    }
    Var<double> loss = ad::softmax_cross_entropy_sum(
        mlm_logits(tape, ad::gather_rows(pass.out.hidden, rows), params, cfg), targets);
    const Var<double> pooled = pooled_cls(pass.out, pass.layout, cfg.language_cls);
    const Var<double> cls_row = ad::gather_rows(pass.out.hidden, {pass.layout.cls()});
    Matrix<double> one = Matrix<double>::Constant(1, 1, 1.0);
    loss = ad::add(loss, ad::bce_with_logits_sum(task_detail::head(tape, pooled, params, "head.irm"), one));
    loss = ad::add(loss, ad::bce_with_logits_sum(task_detail::head(tape, pooled, params, "head.match"),
                                                 Matrix<double>(Matrix<double>::Zero(1, 1))));
    Matrix<double> labels = Matrix<double>::Zero(1, kFindingCount);
    labels(0, 2) = 1.0;
    loss = ad::add(loss, ad::bce_with_logits_sum(task_detail::head(tape, cls_row, params, "head.cls"), labels));
    loss = ad::add(loss, ad::softmax_cross_entropy_sum(task_detail::head(tape, cls_row, params, "head.vqa"), {answer}));
    return loss;
  }
};

inline AllHeadsLoss make_all_heads_loss(std::uint64_t seed, MaskScheme scheme = MaskScheme::BAR) {
  AllHeadsLoss l;
  l.cfg = small_config(scheme);
  Rng rng(seed, "gradcheck");
  l.image = random_image(rng);
  l.tokens = random_tokens(rng, 4, l.cfg.vocab_size);
  return l;
}

}  // namespace medvill::testing
