#pragma once

// Everything upstream of fusion that needs no learned weights: frame
// sampling, patch-grid arithmetic, resize/pad placement and seeded stand-ins
// for the visual and spatial encoders.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "cgmf/fusion.hpp"
#include "cgmf/random.hpp"

namespace cgmf::pipeline {

inline constexpr std::size_t kSampledFrames = 34;
inline constexpr std::size_t kRegisterTokens = 4;

struct PatchGeometry {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t patch = 0;
  std::size_t tokens = 0;  // floor(height / patch) * floor(width / patch)
};

inline std::size_t patch_tokens(std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0) throw std::invalid_argument("patch size must be positive");
  return (height / patch) * (width / patch);
}

inline PatchGeometry patch_geometry(std::size_t height, std::size_t width, std::size_t patch) {
  return {height, width, patch, patch_tokens(height, width, patch)};
}

struct SamplingPlan {
  std::size_t total_frames = 0;
  std::vector<std::size_t> sampled_indices;  // strictly increasing
  std::vector<std::size_t> kept_indices;     // sampled minus first and last
};

/// Uniform sampling floor(k * total / 34), k = 0..33, duplicates removed, then
/// the first and last samples dropped. total >= 34 always keeps 32 frames.
inline SamplingPlan plan_sampling(std::size_t total_frames) {
  if (total_frames == 0) throw std::invalid_argument("plan_sampling: video has no frames");
  SamplingPlan plan{total_frames, {}, {}};
  for (std::size_t k = 0; k < kSampledFrames; ++k) {
    const std::size_t idx = k * total_frames / kSampledFrames;
    if (plan.sampled_indices.empty() || plan.sampled_indices.back() != idx) plan.sampled_indices.push_back(idx);
  }
  if (plan.sampled_indices.size() > 2)
    plan.kept_indices.assign(plan.sampled_indices.begin() + 1, plan.sampled_indices.end() - 1);
  return plan;
}

struct PreprocessSpec {
  std::size_t visual_size = 448;
  std::size_t spatial_size = 518;
  float pad_value = 0.0f;
};

struct Placement {
  std::size_t canvas_height = 0, canvas_width = 0;
  std::size_t offset_y = 0, offset_x = 0;  // top-left of the content on the canvas
  std::size_t content_height = 0, content_width = 0;
  double scale_y = 1.0, scale_x = 1.0;  // content size / source size
};

struct PreprocessPlan {
  Placement visual;   // source stretched to fill the visual canvas
  Placement spatial;  // visual-size content centered on a zero canvas
};

inline PreprocessPlan preprocess_geometry(std::size_t src_h, std::size_t src_w, const PreprocessSpec& spec = {}) {
  if (src_h == 0 || src_w == 0) throw std::invalid_argument("preprocess_geometry: empty source image");
  if (spec.spatial_size < spec.visual_size)
    throw std::invalid_argument("preprocess_geometry: spatial canvas smaller than the resized image");
  const double sy = static_cast<double>(spec.visual_size) / static_cast<double>(src_h);
  const double sx = static_cast<double>(spec.visual_size) / static_cast<double>(src_w);
  const std::size_t margin = (spec.spatial_size - spec.visual_size) / 2;
  return {
      {spec.visual_size, spec.visual_size, 0, 0, spec.visual_size, spec.visual_size, sy, sx},
      {spec.spatial_size, spec.spatial_size, margin, margin, spec.visual_size, spec.visual_size, sy, sx},
  };
}

/// Copies an interleaved [h x w x channels] image onto a pad-filled canvas.
template <typename T>
std::vector<T> pad_to_canvas(std::span<const T> content, std::size_t channels, const Placement& at,
                             T pad_value = T(0)) {
  if (content.size() != at.content_height * at.content_width * channels)
    throw std::invalid_argument("pad_to_canvas: content size does not match placement");
  if (at.offset_y + at.content_height > at.canvas_height || at.offset_x + at.content_width > at.canvas_width)
    throw std::invalid_argument("pad_to_canvas: content does not fit on the canvas");
  std::vector<T> canvas(at.canvas_height * at.canvas_width * channels, pad_value);
  const std::size_t row = at.content_width * channels;
  for (std::size_t y = 0; y < at.content_height; ++y) {
    auto src = content.subspan(y * row, row);
    std::copy(src.begin(), src.end(),
              canvas.begin() + static_cast<std::ptrdiff_t>(((at.offset_y + y) * at.canvas_width + at.offset_x) * channels));
  }
  return canvas;
}

enum class TokenDistribution { gaussian, unit_sphere };

namespace detail {

template <typename T>
TokenTensor<T> draw(Rng& rng, std::size_t n, std::size_t m, std::size_t d, TokenDistribution dist) {
  TokenTensor<T> t(n, m, d);
  for (T& v : t.values()) v = static_cast<T>(rng.normal());
  if (dist == TokenDistribution::unit_sphere) {
    for (std::size_t f = 0; f < n; ++f)
      for (std::size_t k = 0; k < m; ++k) {
        auto row = t.row(f, k);
        double norm = 0;
        for (T v : row) norm += static_cast<double>(v) * static_cast<double>(v);
        norm = std::sqrt(norm);
        if (norm == 0) {
          row[0] = T(1);
          continue;
        }
        for (T& v : row) v = static_cast<T>(static_cast<double>(v) / norm);
      }
  }
  return t;
}

}  // namespace detail

/// Seeded stand-in for the encoders: f_v, f_s, f_c and the 4 register tokens.
template <typename T>
FusionInputs<T> synth_tokens(const FusionConfig& c, std::uint64_t seed,
                             TokenDistribution dist = TokenDistribution::gaussian) {
  c.validate();
  Rng rng(seed);
  FusionInputs<T> in;
  in.f_v = detail::draw<T>(rng, c.n_frames, c.m_visual, c.d_visual, dist);
  in.f_s = detail::draw<T>(rng, c.n_frames, c.m_spatial, c.d_spatial, dist);
  in.f_c = detail::draw<T>(rng, c.n_frames, 1, c.d_spatial, dist);
  in.f_register = detail::draw<T>(rng, c.n_frames, kRegisterTokens, c.d_spatial, dist);
  return in;
}

}  // namespace cgmf::pipeline
