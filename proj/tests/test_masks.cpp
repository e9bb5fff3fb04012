#include "support.hpp"

#include <gtest/gtest.h>

using namespace medvill;
using medvill::testing::quadrant_oracle;

namespace {

constexpr MaskScheme kSchemes[] = {MaskScheme::Bi, MaskScheme::S2S, MaskScheme::BAR, MaskScheme::NonCrossing};

std::vector<std::vector<int>> allowed_sets(const AttentionMask<double>& m) {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(m.size()));
  for (int q = 0; q < m.size(); ++q)
    for (int k = 0; k < m.size(); ++k)
      if (m.allowed(q, k)) out[static_cast<std::size_t>(q)].push_back(k);
  return out;
}

}  // namespace

TEST(Layout, SizesFollowBlockArithmetic) {
  const auto bi = build_layout(2, 2, MaskScheme::Bi);
  EXPECT_EQ(bi.size(), 7);
  for (int p = 0; p <= 3; ++p) EXPECT_TRUE(bi.in_vision_block(p));
  for (int p = 4; p <= 6; ++p) EXPECT_TRUE(bi.in_language_block(p));
  EXPECT_EQ(build_layout(256, 253, MaskScheme::Bi).size(), 512);
  const auto nc = build_layout(1, 1, MaskScheme::NonCrossing);
  EXPECT_EQ(nc.size(), 6);
  EXPECT_EQ(nc.cls_l(), 3);
  EXPECT_EQ(nc.text_begin(), 4);
  EXPECT_EQ(nc.sep_l(), 5);
}

TEST(Layout, PositionRangesPartitionTheSequence) {
  for (auto scheme : kSchemes) {
    for (int k = 1; k <= 6; ++k) {
      for (int n = 1; n <= 6; ++n) {
        const auto l = build_layout(k, n, scheme);
        std::vector<int> hits(static_cast<std::size_t>(l.size()), 0);
        ++hits[static_cast<std::size_t>(l.cls())];
        for (int i = 0; i < k; ++i) ++hits[static_cast<std::size_t>(l.visual_begin() + i)];
        ++hits[static_cast<std::size_t>(l.sep_v())];
        if (l.has_language_cls) ++hits[static_cast<std::size_t>(l.cls_l())];
        for (int i = 0; i < n; ++i) ++hits[static_cast<std::size_t>(l.text_begin() + i)];
        ++hits[static_cast<std::size_t>(l.sep_l())];
        for (int h : hits) EXPECT_EQ(h, 1);
      }
    }
  }
}

TEST(Layout, DegenerateSequencesRejected) {
  EXPECT_THROW(build_layout(0, 3, MaskScheme::Bi), DataError);
  EXPECT_THROW(build_layout(3, 0, MaskScheme::S2S), DataError);
}

TEST(Mask, BiIsAllZero) {
  const auto m = build_mask(build_layout(2, 2, MaskScheme::Bi), MaskScheme::Bi);
  EXPECT_EQ(m.size(), 7);
  EXPECT_TRUE((m.additive.array() == 0.0).all());
}

TEST(Mask, S2SHandEnumeration) {
  const auto m = build_mask(build_layout(1, 2, MaskScheme::S2S), MaskScheme::S2S);
  const auto a = allowed_sets(m);
  for (int r = 0; r <= 2; ++r) EXPECT_EQ(a[static_cast<std::size_t>(r)], (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(a[3], (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(a[4], (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(a[5], (std::vector<int>{0, 1, 2, 3, 4, 5}));
}

TEST(Mask, BarHandEnumeration) {
  const auto m = build_mask(build_layout(1, 2, MaskScheme::BAR), MaskScheme::BAR);
  const auto a = allowed_sets(m);
  for (int r = 0; r <= 2; ++r) EXPECT_EQ(a[static_cast<std::size_t>(r)].size(), 6u);
  EXPECT_EQ(a[3], (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(a[4], (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(a[5].size(), 6u);
}

TEST(Mask, MatchesQuadrantOracleForAllSmallShapes) {
  for (auto scheme : kSchemes) {
    for (int k = 1; k <= 6; ++k) {
      for (int n = 1; n <= 6; ++n) {
        const auto m = build_mask(build_layout(k, n, scheme), scheme);
        ASSERT_EQ(m.additive, quadrant_oracle(k, n, scheme)) << to_string(scheme) << " K=" << k << " N=" << n;
      }
    }
  }
}

TEST(Mask, EntriesAreZeroOrNegAndRowsNonEmpty) {
  for (auto scheme : kSchemes) {
    const auto m = build_mask(build_layout(3, 4, scheme), scheme, -7.5);
    EXPECT_TRUE((m.additive.array() == 0.0 || m.additive.array() == -7.5).all());
    for (int r = 0; r < m.size(); ++r) EXPECT_TRUE((m.additive.row(r).array() == 0.0).any());
  }
}

TEST(Mask, BarAndS2SShareLanguageRows) {
  const auto layout = build_layout(3, 5, MaskScheme::S2S);
  const auto s2s = build_mask(layout, MaskScheme::S2S);
  const auto bar = build_mask(layout, MaskScheme::BAR);
  for (int r = 0; r < layout.size(); ++r) {
    if (layout.in_language_block(r)) {
      EXPECT_EQ(s2s.additive.row(r), bar.additive.row(r));
    } else {
      EXPECT_NE(s2s.additive.row(r), bar.additive.row(r));
    }
  }
}

TEST(Mask, SymmetryByScheme) {
  for (auto scheme : kSchemes) {
    const auto m = build_mask(build_layout(2, 3, scheme), scheme);
    const bool symmetric = m.additive == m.additive.transpose();
    EXPECT_EQ(symmetric, scheme == MaskScheme::Bi || scheme == MaskScheme::NonCrossing) << to_string(scheme);
  }
}

TEST(Mask, LayoutSchemeMismatchRejected) {
  EXPECT_THROW(build_mask(build_layout(2, 2, MaskScheme::Bi), MaskScheme::NonCrossing), DataError);
  EXPECT_THROW(build_mask(build_layout(2, 2, MaskScheme::NonCrossing), MaskScheme::S2S), DataError);
}

TEST(Mask, CsvUsesZeroAndNegInf) {
  const auto m = build_mask(build_layout(1, 1, MaskScheme::S2S), MaskScheme::S2S);
  EXPECT_EQ(mask_to_csv(m), "0,0,0,-inf,-inf\n0,0,0,-inf,-inf\n0,0,0,-inf,-inf\n0,0,0,0,-inf\n0,0,0,0,0\n");
}

TEST(Mask, SchemeNamesRoundTrip) {
  for (auto scheme : kSchemes) EXPECT_EQ(parse_mask_scheme(to_string(scheme)), scheme);
  EXPECT_THROW(parse_mask_scheme("causal"), ConfigError);
}

TEST(Schedule, ExtremesAreDeterministic) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_EQ(sample_scheme({1.0}, rng), MaskScheme::S2S);
    EXPECT_EQ(sample_scheme({0.0}, rng), MaskScheme::Bi);
  }
  EXPECT_THROW(sample_scheme({1.5}, rng), ConfigError);
}

TEST(Schedule, MixtureRateNearThreeQuarters) {
  Rng rng(11, "schedule");
  int s2s = 0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) s2s += sample_scheme({0.75}, rng) == MaskScheme::S2S;
  EXPECT_NEAR(static_cast<double>(s2s) / draws, 0.75, 0.01);
}

TEST(Schedule, SameSeedSameSequence) {
  Rng a(5, "mix"), b(5, "mix");
  for (int i = 0; i < 200; ++i) EXPECT_EQ(sample_scheme({0.75}, a), sample_scheme({0.75}, b));
}
