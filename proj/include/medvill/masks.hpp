#pragma once

#include "medvill/error.hpp"
#include "medvill/rng.hpp"
#include "medvill/tensor.hpp"

#include <sstream>
#include <string>
#include <string_view>

namespace medvill {

enum class MaskScheme { Bi, S2S, BAR, NonCrossing };

inline std::string_view to_string(MaskScheme s) {
  switch (s) {
    case MaskScheme::Bi: return "bi";
    case MaskScheme::S2S: return "s2s";
    case MaskScheme::BAR: return "bar";
    case MaskScheme::NonCrossing: return "noncross";
  }
  return "?";
}

inline MaskScheme parse_mask_scheme(std::string_view name) {
  if (name == "bi") return MaskScheme::Bi;
  if (name == "s2s") return MaskScheme::S2S;
  if (name == "bar") return MaskScheme::BAR;
  if (name == "noncross") return MaskScheme::NonCrossing;
  throw ConfigError("unknown mask scheme '" + std::string(name) + "'");
}

/// Mixed pre-training schedule: S2S with probability s2s_prob, Bi otherwise.
struct MixedSchedule {
  double s2s_prob = 0.75;
};

/// Token-block geometry of the joint sequence:
///
///   [CLS] v_1 .. v_K [SEP_V] ([CLS_L]) w_1 .. w_N [SEP_L]
///
/// CLS, the visual positions and SEP_V form the V-block; the optional CLS_L,
/// the language positions and SEP_L form the L-block.
struct SequenceLayout {
  int visual_count = 0;
  int text_count = 0;
  bool has_language_cls = false;

  int size() const { return visual_count + text_count + (has_language_cls ? 4 : 3); }
  int cls() const { return 0; }
  int visual_begin() const { return 1; }
  int sep_v() const { return visual_count + 1; }
  int language_block_begin() const { return visual_count + 2; }
  /// Index of CLS_L, or -1 when the layout has none.
  int cls_l() const { return has_language_cls ? visual_count + 2 : -1; }
  int text_begin() const { return language_block_begin() + (has_language_cls ? 1 : 0); }
  int sep_l() const { return size() - 1; }

  bool in_vision_block(int pos) const { return pos >= 0 && pos <= sep_v(); }
  bool in_language_block(int pos) const { return pos >= language_block_begin() && pos < size(); }

  bool operator==(const SequenceLayout&) const = default;
};

inline SequenceLayout build_layout(int visual_count, int text_count, MaskScheme scheme) {
  if (visual_count < 1 || text_count < 1) {
    throw DataError("degenerate sequence: need at least one visual and one language position (K=" +
                    std::to_string(visual_count) + ", N=" + std::to_string(text_count) + ")");
  }
  return SequenceLayout{visual_count, text_count, scheme == MaskScheme::NonCrossing};
}

inline constexpr double kDefaultMaskNeg = -1e9;

/// S x S additive self-attention mask whose entries are exactly 0 (allowed)
/// or exactly `neg` (blocked).
template <typename T>
struct AttentionMask {
  Matrix<T> additive;
  SequenceLayout layout;
  MaskScheme scheme = MaskScheme::Bi;
  T neg = static_cast<T>(kDefaultMaskNeg);

  int size() const { return static_cast<int>(additive.rows()); }
  bool allowed(int query, int key) const { return additive(query, key) == T(0); }
};

/// Whether `query` may attend `key` under `scheme`. Special tokens follow the
/// rules of their block; the language-side causal rule is inclusive.
inline bool mask_allows(const SequenceLayout& layout, MaskScheme scheme, int query, int key) {
  const bool q_vision = layout.in_vision_block(query);
  const bool k_vision = layout.in_vision_block(key);
  switch (scheme) {
    case MaskScheme::Bi:
      return true;
    case MaskScheme::NonCrossing:
      return q_vision == k_vision;
    case MaskScheme::S2S:
      if (q_vision) return k_vision;
      return k_vision || key <= query;
    case MaskScheme::BAR:
      if (q_vision) return true;
      return k_vision || key <= query;
  }
  return false;
}

template <typename T = double>
AttentionMask<T> build_mask(const SequenceLayout& layout, MaskScheme scheme, T neg = static_cast<T>(kDefaultMaskNeg)) {
  if ((scheme == MaskScheme::NonCrossing) != layout.has_language_cls) {
    throw DataError(std::string("layout/scheme mismatch: ") + std::string(to_string(scheme)) +
                    (layout.has_language_cls ? " mask on a layout carrying CLS_L"
                                             : " mask on a layout without CLS_L"));
  }
  if (!(neg < T(0))) throw ConfigError("mask constant must be negative");
  const int s = layout.size();
  AttentionMask<T> mask;
  mask.layout = layout;
  mask.scheme = scheme;
  mask.neg = neg;
  mask.additive.resize(s, s);
  for (int q = 0; q < s; ++q) {
    for (int k = 0; k < s; ++k) {
      mask.additive(q, k) = mask_allows(layout, scheme, q, k) ? T(0) : neg;
    }
  }
  return mask;
}

inline MaskScheme sample_scheme(const MixedSchedule& schedule, Rng& rng) {
  if (!(schedule.s2s_prob >= 0.0 && schedule.s2s_prob <= 1.0)) {
    throw ConfigError("s2s_prob must lie in [0, 1]");
  }
  return rng.bernoulli(schedule.s2s_prob) ? MaskScheme::S2S : MaskScheme::Bi;
}

/// Row-major CSV with "0" for allowed and "-inf" for blocked entries.
template <typename T>
std::string mask_to_csv(const AttentionMask<T>& mask) {
  std::ostringstream out;
  for (int q = 0; q < mask.size(); ++q) {
    for (int k = 0; k < mask.size(); ++k) {
      if (k) out << ',';
      out << (mask.allowed(q, k) ? "0" : "-inf");
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace medvill
