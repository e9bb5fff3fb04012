#pragma once

#include "medvill/config.hpp"
#include "medvill/error.hpp"
#include "medvill/rng.hpp"
#include "medvill/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace medvill {

inline constexpr int kFindingCount = 14;

/// All trainable tensors keyed by dotted path, e.g. "layer3.attn.query.weight".
template <typename T>
struct ModelParams {
  std::map<std::string, Matrix<T>> tensors;

  const Matrix<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("missing parameter '" + name + "'");
    return it->second;
  }
  Matrix<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("missing parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, m] : tensors) n += static_cast<std::size_t>(m.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& [_, m] : tensors)
      if (!m.allFinite()) return false;
    return true;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [name, m] : tensors) out.tensors.emplace(name, m.template cast<U>());
    return out;
  }

  bool operator==(const ModelParams&) const = default;
};

/// Expected shape of every tensor for a configuration.
inline std::map<std::string, std::pair<int, int>> parameter_shapes(const ModelConfig& cfg) {
  std::map<std::string, std::pair<int, int>> s;
  const int d = cfg.hidden;
  const int c = cfg.vis.channels;
  if (cfg.vis.kind == VisualEncoderConfig::Kind::Conv) {
    int in = 1;
    for (std::size_t i = 0; i < cfg.vis.strides.size(); ++i) {
      const int k = cfg.vis.strides[i];
      const int out = i + 1 == cfg.vis.strides.size() ? c : cfg.vis.mid_channels;
      const std::string p = "vis.stage" + std::to_string(i);
      s[p + ".weight"] = {k * k * in, out};
      s[p + ".bias"] = {1, out};
      in = out;
    }
  } else {
    const int p = cfg.vis.total_stride();
    s["vis.patch.weight"] = {p * p, c};
    s["vis.patch.bias"] = {1, c};
  }
  s["embed.token"] = {cfg.vocab_size, d};
  s["embed.position"] = {cfg.position_rows(), d};
  s["embed.visual_location"] = {cfg.vis.grid_capacity(), c};
  s["embed.modality_visual"] = {1, c};
  s["embed.modality_language"] = {1, d};
  s["embed.visual_proj.weight"] = {c, d};
  s["embed.visual_proj.bias"] = {1, d};
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    for (const char* m : {".attn.query", ".attn.key", ".attn.value", ".attn.output"}) {
      s[p + m + ".weight"] = {d, d};
      s[p + m + ".bias"] = {1, d};
    }
    s[p + ".ffn.input.weight"] = {d, cfg.ff};
    s[p + ".ffn.input.bias"] = {1, cfg.ff};
    s[p + ".ffn.output.weight"] = {cfg.ff, d};
    s[p + ".ffn.output.bias"] = {1, d};
    for (const char* n : {".attn_norm", ".ffn_norm"}) {
      s[p + n + ".gamma"] = {1, d};
      s[p + n + ".beta"] = {1, d};
    }
  }
  if (cfg.pre_norm) {
    s["final_norm.gamma"] = {1, d};
    s["final_norm.beta"] = {1, d};
  }
  const int pooled = cfg.language_cls ? 2 * d : d;
  s["head.mlm.transform.weight"] = {d, d};
  s["head.mlm.transform.bias"] = {1, d};
  s["head.mlm.norm.gamma"] = {1, d};
  s["head.mlm.norm.beta"] = {1, d};
  s["head.mlm.decoder.weight"] = {d, cfg.vocab_size};
  s["head.mlm.decoder.bias"] = {1, cfg.vocab_size};
  s["head.irm.weight"] = {pooled, 1};
  s["head.irm.bias"] = {1, 1};
  s["head.match.weight"] = {pooled, 1};
  s["head.match.bias"] = {1, 1};
  s["head.cls.weight"] = {d, kFindingCount};
  s["head.cls.bias"] = {1, kFindingCount};
  s["head.vqa.weight"] = {d, cfg.answer_count};
  s["head.vqa.bias"] = {1, cfg.answer_count};
  return s;
}

/// BERT-style initialisation: N(0, 0.02) weights and tables, zero biases,
/// unit norm gains. Conv stages use He scaling. Each tensor draws from its
/// own derived stream so the result does not depend on iteration order.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> p;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    Matrix<T> m(shape.first, shape.second);
    const auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".bias") || ends_with(".beta")) {
      m.setZero();
    } else if (ends_with(".gamma")) {
      m.setOnes();
    } else {
      double stddev = 0.02;
      if (name.rfind("vis.", 0) == 0) stddev = std::sqrt(2.0 / shape.first);
      Rng rng(seed, "init:" + name);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal(0.0, stddev));
    }
    p.tensors.emplace(name, std::move(m));
  }
  return p;
}

/// Throws naming the first tensor whose shape disagrees with the config.
template <typename T>
void validate_shapes(const ModelParams<T>& params, const ModelConfig& cfg) {
  const auto shapes = parameter_shapes(cfg);
  for (const auto& [name, shape] : shapes) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end()) throw DataError("checkpoint lacks tensor '" + name + "'");
    if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
      throw DataError("tensor '" + name + "' has shape " + shape_string(it->second.rows(), it->second.cols()) +
                      ", config expects " + shape_string(shape.first, shape.second));
    }
  }
  for (const auto& [name, _] : params.tensors) {
    if (!shapes.count(name)) throw DataError("unexpected tensor '" + name + "' for this config");
  }
}

}  // namespace medvill
