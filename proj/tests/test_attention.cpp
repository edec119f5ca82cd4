#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "hiermusic/attention/encoder.hpp"
#include "support/dense_attention.hpp"
#include "support/gradcheck.hpp"

using namespace hiermusic;
using namespace hiermusic::attention;
using hiermusic::testing::dense_attention;
using hiermusic::testing::layout_for;
using hiermusic::testing::random_matrix;

namespace {

std::vector<int> row_cols(const AttentionMask& m, int i) {
  std::vector<int> out;
  for (int j = 0; j < m.L; ++j)
    if (m.at(i, j)) out.push_back(j);
  return out;
}

}  // namespace

// ---- masks ----------------------------------------------------------------

TEST(Mask, LocalWindowThree) {
  const auto m = build_mask(MaskKind::local, {3, 1, false}, 16);
  EXPECT_EQ(row_cols(m, 5), (std::vector<int>{4, 5, 6}));
  const auto c = build_mask(MaskKind::local, {3, 1, true}, 16);
  EXPECT_EQ(row_cols(c, 5), (std::vector<int>{3, 4, 5}));
}

TEST(Mask, DilatedStrideOne) {
  const auto m = build_mask(MaskKind::dilated, {3, 1, true}, 16);
  for (int i = 0; i < 16; ++i) {
    std::vector<int> want;
    for (int j = i % 2; j <= i; j += 2) want.push_back(j);
    EXPECT_EQ(row_cols(m, i), want) << i;
  }
  const auto b = build_mask(MaskKind::dilated, {3, 1, false}, 16);
  EXPECT_EQ(row_cols(b, 5), (std::vector<int>{1, 3, 5, 7, 9, 11, 13, 15}));
}

TEST(Mask, SparseIsLocalPlusGlobalColumns) {
  const auto m = build_mask(MaskKind::sparse, {3, 3, false}, 16);
  EXPECT_EQ(row_cols(m, 6), (std::vector<int>{0, 4, 5, 6, 7, 8, 12}));
}

TEST(Mask, InvalidParameters) {
  EXPECT_THROW(build_mask(MaskKind::local, {0, 1, false}, 8), std::invalid_argument);
  EXPECT_THROW(build_mask(MaskKind::local, {3, 1, false}, 0), std::invalid_argument);
  EXPECT_THROW(build_mask(MaskKind::multiscale, {}, 8), std::invalid_argument);
  EXPECT_THROW(parse_mask_kind("banded"), std::invalid_argument);
}

TEST(ScalePatternTest, DegenerateIsFullAtEveryScale) {
  const auto p = build_scale_pattern(std::vector<int>{4}, 16);
  for (Scale s : {Scale::note, Scale::chord, Scale::section}) {
    const auto m = scale_mask(p, s);
    EXPECT_EQ(count_token_pairs(m), 16) << static_cast<int>(s);
  }
}

TEST(ScalePatternTest, SectionBlocksFollowLengths) {
  const std::vector<int> lens = {3, 7, 3, 6};
  const auto p = build_scale_pattern(lens, 4, 3);
  ASSERT_EQ(p.L, 19);
  const auto m = scale_mask(p, Scale::section);
  std::vector<int> sec;
  for (int k = 0; k < 4; ++k)
    for (int i = 0; i < lens[static_cast<std::size_t>(k)]; ++i) sec.push_back(k);
  for (int i = 0; i < 19; ++i)
    for (int j = 0; j < 19; ++j) EXPECT_EQ(m.at(i, j), sec[static_cast<std::size_t>(i)] == sec[static_cast<std::size_t>(j)]);
}

TEST(ScalePatternTest, ChordBlocksFollowBars) {
  const auto p = build_scale_pattern(std::vector<int>{32}, 16);
  const auto m = scale_mask(p, Scale::chord);
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) EXPECT_EQ(m.at(i, j), i / 16 == j / 16);
  EXPECT_EQ(count_token_pairs(m), 2 * 256);
}

TEST(ScalePatternTest, SingleSectionEqualsFullAttention) {
  const auto m = build_mask(build_scale_pattern(std::vector<int>{24}, 8, 3));
  EXPECT_EQ(count_token_pairs(m), 24 * 24);
}

TEST(ScalePatternTest, UnionProperty) {
  const auto p = build_scale_pattern(std::vector<int>{5, 9, 4, 12}, 4, 3);
  const auto u = build_mask(p);
  const auto a = scale_mask(p, Scale::note), b = scale_mask(p, Scale::chord), c = scale_mask(p, Scale::section);
  for (std::size_t i = 0; i < u.cells.size(); ++i) EXPECT_EQ(u.cells[i], a.cells[i] | b.cells[i] | c.cells[i]);
}

TEST(ScalePatternTest, IntraAndInterSectionCoverage) {
  const auto p = build_scale_pattern(std::vector<int>{5, 9, 4, 12}, 4, 3);
  const auto m = scale_mask(p, Scale::section);
  const int nb = static_cast<int>(p.bar_groups.size());
  for (int i = 0; i < p.L; ++i) {
    for (int j = 0; j < p.L; ++j)
      if (p.section_of[static_cast<std::size_t>(i)] == p.section_of[static_cast<std::size_t>(j)]) EXPECT_TRUE(m.at(i, j));
    for (int k = 0; k < 4; ++k) EXPECT_TRUE(m.at(i, p.L + nb + k));
  }
}

TEST(ScalePatternTest, CausalSummariesOnlyOfFinishedGroups) {
  const auto p = build_scale_pattern(std::vector<int>{8, 8}, 4, 3, true);
  const auto m = build_mask(p);
  const int nb = static_cast<int>(p.bar_groups.size());
  for (int i = 0; i < p.L; ++i) {
    for (int j = i + 1; j < p.L; ++j) EXPECT_FALSE(m.at(i, j));
    for (int g = 0; g < p.G(); ++g) {
      const auto& grp = g < nb ? p.bar_groups[static_cast<std::size_t>(g)] : p.section_groups[static_cast<std::size_t>(g - nb)];
      if (m.at(i, p.L + g)) EXPECT_LT(grp.back(), i);
    }
  }
}

TEST(ScalePatternTest, UncoveredPositionsThrow) {
  std::vector<int> bars(10, 0);
  EXPECT_THROW(build_scale_pattern({{0, 4}, {5, 5}}, bars, 10), std::invalid_argument);
  EXPECT_THROW(build_scale_pattern({{0, 4}}, bars, 10), std::invalid_argument);
  EXPECT_THROW(build_scale_pattern({{0, 10}}, std::vector<int>(9, 0), 10), std::invalid_argument);
}

TEST(CountPairs, Examples) {
  EXPECT_EQ(count_attended_pairs(build_mask(MaskKind::full, {}, 16)), 256);
  EXPECT_EQ(count_attended_pairs(build_mask(MaskKind::full, {3, 1, true}, 16)), 136);
  EXPECT_EQ(count_attended_pairs(build_mask(MaskKind::local, {3, 1, true}, 16)), 45);
  const auto ms = build_mask(build_scale_pattern(std::vector<int>{3, 7, 3, 6}, 4, 3));
  EXPECT_LT(count_attended_pairs(ms), 19 * 19);
}

TEST(MaskViz, WritesPngAndPgm) {
  const auto dir = std::filesystem::temp_directory_path() / "hiermusic_maskviz";
  std::filesystem::create_directories(dir);
  const auto p = build_scale_pattern(std::vector<int>{3, 7, 3, 6}, 4, 3);
  write_mask_image((dir / "ms.png").string(), render_mask(p));
  write_mask_image((dir / "local.pgm").string(), render_mask(build_mask(MaskKind::local, {}, 16)));
  EXPECT_GT(std::filesystem::file_size(dir / "ms.png"), 100u);
  EXPECT_GT(std::filesystem::file_size(dir / "local.pgm"), 16u * 16u);
}

// ---- attention ------------------------------------------------------------

TEST(MsAttention, MatchesDenseOracle) {
  for (MaskKind kind : {MaskKind::local, MaskKind::dilated, MaskKind::sparse, MaskKind::multiscale})
    for (int L : {8, 16, 32, 64})
      for (bool causal : {false, true}) {
        AttentionConfig cfg;
        cfg.dim = 16;
        cfg.max_offset = 6;
        cfg.max_len = 64;
        std::mt19937_64 rng(static_cast<std::uint64_t>(L) * 7 + static_cast<std::uint64_t>(kind));
        nn::ParamSet ps;
        add_ms_attention(ps, "a", cfg, rng);
        for (auto& [n, p] : ps)
          if (n.find("rel_") != std::string::npos || n.find("abs_") != std::string::npos)
            p.value = random_matrix(p.value.rows(), p.value.cols(), rng, 0.5);
        const nn::Tensor x = random_matrix(static_cast<std::size_t>(L), 16, rng);
        const auto layout = layout_for(kind, L, causal);
        nn::Tape t;
        const nn::Tensor got = ms_attention(ps, t, "a", t.constant(x), layout, cfg).value();
        const nn::Tensor want = dense_attention(ps, "a", x, layout, cfg);
        EXPECT_LE(nn::max_abs_diff(got, want), 1e-6) << mask_kind_name(kind) << " L=" << L << " causal=" << causal;
      }
}

TEST(MsAttention, EqualLogitsAverageValues) {
  AttentionConfig cfg;
  cfg.dim = 8;
  cfg.heads = {2, 0, 0};
  cfg.max_offset = 4;
  cfg.max_len = 16;
  std::mt19937_64 rng(1);
  nn::ParamSet ps;
  add_ms_attention(ps, "a", cfg, rng);
  ps.at("a.q.w").value.fill(0.0);
  ps.at("a.rel_v.note").value.fill(0.0);
  const nn::Tensor x = random_matrix(10, 8, rng);
  const auto mask = build_mask(MaskKind::local, {5, 1, false}, 10);
  nn::Tape t;
  const nn::Tensor out = ms_attention(ps, t, "a", t.constant(x), uniform_layout(mask, cfg.heads), cfg).value();
  nn::Tensor v;
  nn::gemm(x, false, ps.at("a.v.w").value, false, v, false);
  for (int i = 0; i < 10; ++i) {
    const auto cols = row_cols(mask, i);
    for (std::size_t e = 0; e < 8; ++e) {
      double m = 0;
      for (int j : cols) m += v(static_cast<std::size_t>(j), e) + ps.at("a.v.b").value[e];
      EXPECT_NEAR(out(static_cast<std::size_t>(i), e), m / static_cast<double>(cols.size()), 1e-12);
    }
  }
}

TEST(MsAttention, RelativeEmbeddingsAreShiftInvariant) {
  // Identical content at every position: interior rows of a local window see
  // the same logits. A one-hot relative value table reads back the weight a
  // row puts on each offset.
  std::mt19937_64 rng(5);
  const std::size_t d = 4;
  const nn::Tensor row = random_matrix(1, d, rng);
  nn::Tensor x = nn::Tensor::matrix(20, d);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t e = 0; e < d; ++e) x(i, e) = row(0, e);
  nn::Tape t;
  auto q = t.constant(x), k = t.constant(x), zeros = t.constant(nn::Tensor::matrix(20, d));
  const auto rk = t.constant(random_matrix(9, d, rng));
  const auto cols = build_mask(MaskKind::local, {5, 1, false}, 20).columns();
  for (int off = -2; off <= 2; ++off) {
    nn::Tensor rv = nn::Tensor::matrix(9, d);
    rv(static_cast<std::size_t>(off + 4), 0) = 1.0;
    RelativePe probe{rk, t.constant(rv), 4};
    const auto w = sparse_attention(q, k, zeros, cols, &probe).value();
    EXPECT_GT(w(2, 0), 0.0);
    for (std::size_t i = 3; i < 18; ++i) EXPECT_NEAR(w(i, 0), w(2, 0), 1e-12) << off << " row " << i;
  }
}

TEST(MsAttention, GradientCheckTwoHeads) {
  AttentionConfig cfg;
  cfg.dim = 8;
  cfg.heads = {1, 0, 1};
  cfg.max_offset = 3;
  cfg.max_len = 8;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    nn::ParamSet ps;
    add_ms_attention(ps, "a", cfg, rng);
    for (auto& [n, p] : ps)
      if (n.find("rel_") != std::string::npos || n.find("abs_") != std::string::npos)
        p.value = random_matrix(p.value.rows(), p.value.cols(), rng, 0.5);
    ps.add("x", random_matrix(6, 8, rng));
    auto pat = build_scale_pattern(std::vector<int>{2, 4}, 3, 3);
    pat.heads = cfg.heads;
    const auto layout = multiscale_layout(pat);
    const nn::Tensor w = random_matrix(6, 8, rng);
    auto r = hiermusic::testing::check_gradients(ps, [&](nn::ParamSet& p, bool backprop) {
      nn::Tape t;
      auto y = ms_attention(p, t, "a", p.var(t, "x"), layout, cfg);
      auto l = nn::sum(nn::mul(y, t.constant(w)));
      if (backprop) t.backward(l);
      return l.value()[0];
    });
    EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  }
}

TEST(MsAttention, ShapeErrors) {
  AttentionConfig cfg;
  cfg.dim = 10;
  EXPECT_THROW(cfg.head_dim(), nn::ShapeError);
  cfg.dim = 16;
  std::mt19937_64 rng(1);
  nn::ParamSet ps;
  add_ms_attention(ps, "a", cfg, rng);
  nn::Tape t;
  auto x = t.constant(nn::Tensor::matrix(5, 16));
  EXPECT_THROW(ms_attention(ps, t, "a", x, uniform_layout(build_mask(MaskKind::full, {}, 6)), cfg), nn::ShapeError);
  EXPECT_THROW(ms_attention(ps, t, "a", x, uniform_layout(build_mask(MaskKind::full, {}, 5), {2, 2, 0}), cfg),
               nn::ShapeError);
}

// ---- encoder --------------------------------------------------------------

TEST(Encoder, ZeroWeightsGiveLayerNormOfInput) {
  EncoderConfig cfg;
  cfg.attn.dim = 8;
  cfg.attn.max_len = 16;
  cfg.layers = 1;
  std::mt19937_64 rng(2);
  nn::ParamSet ps;
  add_encoder(ps, "enc", cfg, rng);
  for (auto& [n, p] : ps)
    if (n.find(".attn.") != std::string::npos || n.find(".ffn.") != std::string::npos) p.value.fill(0.0);
  const nn::Tensor x = random_matrix(6, 8, rng);
  nn::Tape t;
  const auto y = encoder_forward(ps, t, "enc", t.constant(x), uniform_layout(build_mask(MaskKind::full, {}, 6)), cfg);
  nn::Tape t2;
  const auto ln = nn::layer_norm(ps, t2, "enc.layer0.ln", t2.constant(x));
  EXPECT_LE(nn::max_abs_diff(y.value(), ln.value()), 1e-12);
}

TEST(Encoder, PermutationEquivariantWithPermutedMask) {
  EncoderConfig cfg;
  cfg.attn.dim = 8;
  cfg.attn.max_len = 16;
  cfg.layers = 2;
  std::mt19937_64 rng(3);
  nn::ParamSet ps;
  add_encoder(ps, "enc", cfg, rng);
  const int L = 7;
  const nn::Tensor x = random_matrix(L, 8, rng);
  const std::vector<int> perm = {3, 0, 6, 1, 5, 2, 4};
  const auto m = build_mask(MaskKind::local, {3, 1, false}, L);
  AttentionMask pm(MaskKind::local, L);
  nn::Tensor px = nn::Tensor::matrix(L, 8);
  for (int i = 0; i < L; ++i) {
    for (int j = 0; j < L; ++j) pm.set(i, j, m.at(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]));
    for (std::size_t e = 0; e < 8; ++e) px(static_cast<std::size_t>(i), e) = x(static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]), e);
  }
  nn::Tape t;
  const auto y = encoder_forward(ps, t, "enc", t.constant(x), uniform_layout(m, cfg.attn.heads, PeMode::none), cfg).value();
  const auto py = encoder_forward(ps, t, "enc", t.constant(px), uniform_layout(pm, cfg.attn.heads, PeMode::none), cfg).value();
  for (int i = 0; i < L; ++i)
    for (std::size_t e = 0; e < 8; ++e)
      EXPECT_NEAR(py(static_cast<std::size_t>(i), e), y(static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]), e), 1e-10);
  // Positional embeddings break it.
  const auto yr = encoder_forward(ps, t, "enc", t.constant(x), uniform_layout(m, cfg.attn.heads), cfg).value();
  const auto pyr = encoder_forward(ps, t, "enc", t.constant(px), uniform_layout(pm, cfg.attn.heads), cfg).value();
  double diff = 0;
  for (int i = 0; i < L; ++i)
    for (std::size_t e = 0; e < 8; ++e)
      diff = std::max(diff, std::abs(pyr(static_cast<std::size_t>(i), e) - yr(static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]), e)));
  EXPECT_GT(diff, 1e-6);
}

TEST(Encoder, SixLayersDeterministic) {
  EncoderConfig cfg;
  cfg.attn.dim = 16;
  cfg.attn.max_len = 64;
  auto run = [&] {
    std::mt19937_64 rng(11);
    nn::ParamSet ps;
    add_encoder(ps, "enc", cfg, rng);
    const nn::Tensor x = random_matrix(24, 16, rng);
    nn::Tape t;
    return encoder_forward(ps, t, "enc", t.constant(x), multiscale_layout(build_scale_pattern(std::vector<int>{8, 16}, 8)), cfg).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Encoder, NanNamesLayer) {
  EncoderConfig cfg;
  cfg.attn.dim = 8;
  cfg.attn.max_len = 16;
  cfg.layers = 3;
  std::mt19937_64 rng(2);
  nn::ParamSet ps;
  add_encoder(ps, "enc", cfg, rng);
  ps.at("enc.layer1.ffn.fc2.b").value[0] = std::numeric_limits<double>::quiet_NaN();
  nn::Tape t;
  try {
    encoder_forward(ps, t, "enc", t.constant(random_matrix(4, 8, rng)), uniform_layout(build_mask(MaskKind::full, {}, 4)), cfg);
    FAIL() << "expected NumericError";
  } catch (const nn::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}
