#include <gtest/gtest.h>

#include "cgmf/fusion.hpp"
#include "cgmf/gradcheck.hpp"
#include "cgmf/pipeline.hpp"
#include "test_support.hpp"

namespace cgmf {
namespace {

using testing::central_differences;
using testing::random_config;
using testing::random_tensor;
using testing::relative_error;
using testing::tiny_config;
using Tensor = TokenTensor<double>;

// Worst relative error over every input stream and parameter tensor, using the
// test-side finite-difference routine.
double worst_gradient_error(const FusionConfig& c, std::uint64_t seed) {
  auto in = pipeline::synth_tokens<double>(c, seed);
  auto w = init_weights<double>(c, seed + 1);
  Rng rng(seed + 2);
  const auto cot = random_tensor(rng, c.n_frames, c.m_visual, c.d_visual);
  auto g = fuse_backward(in, w, c, cot);
  auto loss = [&] { return testing::dot(cot, fuse(in, w, c)); };

  double worst = 0;
  worst = std::max(worst, relative_error(g.f_v.values(), central_differences(in.f_v.values(), loss)));
  worst = std::max(worst, relative_error(g.f_s.values(), central_differences(in.f_s.values(), loss)));
  worst = std::max(worst, relative_error(g.f_c.values(), central_differences(in.f_c.values(), loss)));
  auto params = parameter_views(w);
  auto grads = parameter_views(g.weights);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double e = relative_error(grads[i].values, central_differences(params[i].values, loss));
    EXPECT_LT(e, 1e-5) << params[i].name;
    worst = std::max(worst, e);
  }
  return worst;
}

TEST(FuseBackward, ZeroCotangentGivesZeroGradients) {
  const auto c = tiny_config();
  const auto in = pipeline::synth_tokens<double>(c, 1);
  auto g = fuse_backward(in, init_weights<double>(c, 2), c, Tensor(c.n_frames, c.m_visual, c.d_visual));
  for (double v : g.f_v.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.f_s.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.f_c.values()) EXPECT_EQ(v, 0.0);
  for (const auto& p : parameter_views(g.weights))
    for (double v : p.values) EXPECT_EQ(v, 0.0) << p.name;
}

TEST(FuseBackward, ResidualPathPassesCotangent) {
  auto c = tiny_config();
  c.toggles.gate = false;
  auto w = init_weights<double>(c, 3);
  std::fill(w.p_l.weight.begin(), w.p_l.weight.end(), 0.0);
  std::fill(w.p_l.bias.begin(), w.p_l.bias.end(), 0.0);
  Rng rng(4);
  const auto cot = random_tensor(rng, c.n_frames, c.m_visual, c.d_visual);
  const auto g = fuse_backward(pipeline::synth_tokens<double>(c, 5), w, c, cot);
  EXPECT_EQ(g.f_v, cot);
}

TEST(FuseBackward, FullModuleMatchesFiniteDifferences) {
  EXPECT_LT(worst_gradient_error(tiny_config(), 10), 1e-5);
}

TEST(FuseBackward, EveryToggleCombination) {
  for (unsigned mask = 0; mask < 16; ++mask) {
    auto c = tiny_config();
    c.toggles = {bool(mask & 1), bool(mask & 2), bool(mask & 4), bool(mask & 8)};
    EXPECT_LT(worst_gradient_error(c, 20 + mask), 1e-5) << "toggle mask " << mask;
  }
}

TEST(FuseBackward, RandomSmallConfigs) {
  Rng rng(99);
  for (int trial = 0; trial < 8; ++trial) {
    const auto c = random_config(rng);
    EXPECT_LT(worst_gradient_error(c, 100 + trial), 1e-5) << "trial " << trial;
  }
}

TEST(FuseBackward, CameraOnlyMemory) {
  auto c = tiny_config();
  c.m_spatial = 0;
  EXPECT_LT(worst_gradient_error(c, 40), 1e-5);
}

TEST(Gradcheck, ReportCoversEveryGroup) {
  const auto c = tiny_config();
  Rng rng(50);
  const auto report = gradcheck(pipeline::synth_tokens<double>(c, 51), init_weights<double>(c, 52), c,
                                random_tensor(rng, c.n_frames, c.m_visual, c.d_visual));
  auto reference_weights = init_weights<double>(c, 0);
  EXPECT_EQ(report.groups.size(), 3u + parameter_views(reference_weights).size());
  EXPECT_EQ(report.groups[0].name, "f_v");
  EXPECT_TRUE(report.passed(1e-5)) << report.worst();
}

TEST(Gradcheck, CorruptedGradientFails) {
  const auto c = tiny_config();
  Rng rng(53);
  const auto report = gradcheck(pipeline::synth_tokens<double>(c, 54), init_weights<double>(c, 55), c,
                                random_tensor(rng, c.n_frames, c.m_visual, c.d_visual), {.corrupt_group = "p_k.weight"});
  EXPECT_FALSE(report.passed(1e-5));
  for (const auto& g : report.groups) EXPECT_EQ(g.relative_error >= 1e-5, g.name == "p_k.weight") << g.name;
}

TEST(Gradcheck, ZeroToleranceFails) {
  const auto c = tiny_config();
  Rng rng(56);
  const auto report = gradcheck(pipeline::synth_tokens<double>(c, 57), init_weights<double>(c, 58), c,
                                random_tensor(rng, c.n_frames, c.m_visual, c.d_visual));
  EXPECT_FALSE(report.passed(0.0));
}

}  // namespace
}  // namespace cgmf
