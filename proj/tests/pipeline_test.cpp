#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "cgmf/pipeline.hpp"
#include "test_support.hpp"

namespace cgmf::pipeline {
namespace {

TEST(PatchTokens, DeploymentGeometries) {
  EXPECT_EQ(patch_tokens(448, 448, 14), 1024u);
  EXPECT_EQ(patch_tokens(518, 518, 14), 1369u);
  EXPECT_EQ(patch_tokens(449, 448, 14), 1024u);
  EXPECT_EQ(patch_geometry(518, 518, 14).tokens, 37u * 37u);
  EXPECT_THROW(patch_tokens(10, 10, 0), std::invalid_argument);
}

TEST(PatchTokens, Monotone) {
  for (std::size_t p = 1; p <= 20; ++p)
    for (std::size_t h = 1; h <= 60; h += 3)
      for (std::size_t w = 1; w <= 60; w += 5) {
        EXPECT_LE(patch_tokens(h, w, p), patch_tokens(h + 1, w, p));
        EXPECT_LE(patch_tokens(h, w, p), patch_tokens(h, w + 1, p));
        EXPECT_GE(patch_tokens(h, w, p), patch_tokens(h, w, p + 1));
      }
}

TEST(PlanSampling, ExactlyThirtyFourFrames) {
  const auto plan = plan_sampling(34);
  std::vector<std::size_t> all(34), inner(32);
  std::iota(all.begin(), all.end(), 0);
  std::iota(inner.begin(), inner.end(), 1);
  EXPECT_EQ(plan.sampled_indices, all);
  EXPECT_EQ(plan.kept_indices, inner);
}

TEST(PlanSampling, LongVideoUniformStride) {
  const auto plan = plan_sampling(3400);
  ASSERT_EQ(plan.sampled_indices.size(), 34u);
  for (std::size_t k = 0; k < 34; ++k) EXPECT_EQ(plan.sampled_indices[k], 100 * k);
  EXPECT_EQ(plan.kept_indices.front(), 100u);
  EXPECT_EQ(plan.kept_indices.back(), 3200u);
  EXPECT_EQ(plan.kept_indices.size(), 32u);
}

TEST(PlanSampling, ShortVideoDeduplicates) {
  // floor(k * 10 / 34) for k = 0..33 hits every index 0..9.
  std::set<std::size_t> distinct;
  for (std::size_t k = 0; k < 34; ++k) distinct.insert(k * 10 / 34);
  ASSERT_EQ(distinct.size(), 10u);
  const auto plan = plan_sampling(10);
  EXPECT_EQ(plan.sampled_indices, std::vector<std::size_t>(distinct.begin(), distinct.end()));
  EXPECT_EQ(plan.kept_indices, (std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 8}));
}

TEST(PlanSampling, DegenerateInputs) {
  EXPECT_THROW(plan_sampling(0), std::invalid_argument);
  EXPECT_TRUE(plan_sampling(1).kept_indices.empty());
  EXPECT_TRUE(plan_sampling(2).kept_indices.empty());
  EXPECT_EQ(plan_sampling(3).kept_indices, (std::vector<std::size_t>{1}));
}

TEST(PlanSampling, AlwaysThirtyTwoKeptForLongVideos) {
  for (std::size_t total = 34; total < 5000; total += 7) {
    const auto plan = plan_sampling(total);
    ASSERT_EQ(plan.sampled_indices.size(), 34u) << total;
    ASSERT_EQ(plan.kept_indices.size(), 32u) << total;
    EXPECT_TRUE(std::is_sorted(plan.sampled_indices.begin(), plan.sampled_indices.end()));
    EXPECT_EQ(std::adjacent_find(plan.sampled_indices.begin(), plan.sampled_indices.end()),
              plan.sampled_indices.end());
    EXPECT_EQ(plan.kept_indices.front(), plan.sampled_indices[1]);
    EXPECT_EQ(plan.kept_indices.back(), plan.sampled_indices[32]);
    EXPECT_LT(plan.sampled_indices.back(), total);
  }
}

TEST(PreprocessGeometry, VisualStretchAndCenteredPad) {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{480, 640}, {1080, 1920}, {448, 448}, {100, 3000}}) {
    const auto plan = preprocess_geometry(h, w);
    EXPECT_EQ(plan.visual.canvas_height, 448u);
    EXPECT_EQ(plan.visual.canvas_width, 448u);
    EXPECT_EQ(plan.visual.content_height, 448u);
    EXPECT_DOUBLE_EQ(plan.visual.scale_x * static_cast<double>(w), 448.0);
    EXPECT_DOUBLE_EQ(plan.visual.scale_y * static_cast<double>(h), 448.0);
    EXPECT_EQ(plan.spatial.canvas_height, 518u);
    EXPECT_EQ(plan.spatial.offset_y, 35u);
    EXPECT_EQ(plan.spatial.offset_x, 35u);
    EXPECT_EQ(2 * plan.spatial.offset_y + plan.spatial.content_height, 518u);
    EXPECT_EQ(2 * plan.spatial.offset_x + plan.spatial.content_width, 518u);
  }
  EXPECT_THROW(preprocess_geometry(0, 10), std::invalid_argument);
  EXPECT_THROW(preprocess_geometry(10, 10, {.visual_size = 600, .spatial_size = 518}), std::invalid_argument);
}

TEST(PreprocessGeometry, PadRegionIsZero) {
  const auto plan = preprocess_geometry(720, 1280);
  std::vector<float> content(448 * 448 * 3, 0.75f);
  const auto canvas = pad_to_canvas<float>(content, 3, plan.spatial);
  ASSERT_EQ(canvas.size(), 518u * 518u * 3u);
  for (std::size_t y = 0; y < 518; ++y)
    for (std::size_t x = 0; x < 518; ++x) {
      const bool inside = y >= 35 && y < 35 + 448 && x >= 35 && x < 35 + 448;
      for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(canvas[(y * 518 + x) * 3 + ch], inside ? 0.75f : 0.0f);
    }
}

TEST(SynthTokens, DeterministicAndShaped) {
  const auto c = testing::tiny_config();
  const auto a = synth_tokens<double>(c, 5);
  const auto b = synth_tokens<double>(c, 5);
  EXPECT_EQ(a.f_v, b.f_v);
  EXPECT_EQ(a.f_s, b.f_s);
  EXPECT_EQ(a.f_c, b.f_c);
  EXPECT_EQ(a.f_register, b.f_register);
  EXPECT_NE(synth_tokens<double>(c, 6).f_v, a.f_v);
  EXPECT_EQ(a.f_v.shape(), (Shape3{2, 4, 8}));
  EXPECT_EQ(a.f_s.shape(), (Shape3{2, 6, 6}));
  EXPECT_EQ(a.f_c.shape(), (Shape3{2, 1, 6}));
  EXPECT_EQ(a.f_register->shape(), (Shape3{2, 4, 6}));
  EXPECT_NO_THROW(validate_inputs(a, c));
}

TEST(SynthTokens, UnitSphereRows) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto c = testing::random_config(rng);
    const auto in = synth_tokens<double>(c, trial, TokenDistribution::unit_sphere);
    for (const auto* t : {&in.f_v, &in.f_s, &in.f_c, &*in.f_register})
      for (std::size_t n = 0; n < t->frames(); ++n)
        for (std::size_t m = 0; m < t->tokens(); ++m) {
          double norm = 0;
          for (double v : t->row(n, m)) norm += v * v;
          EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-9);
        }
    EXPECT_NO_THROW(validate_inputs(in, c));
  }
}

}  // namespace
}  // namespace cgmf::pipeline
