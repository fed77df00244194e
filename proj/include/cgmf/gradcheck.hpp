#pragma once

// Central-difference check of fuse_backward on the scalar <cotangent, fuse(x)>.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cgmf/fusion.hpp"

namespace cgmf {

// Groups whose exact gradient is structurally zero (e.g. a key bias under a
// softmax with no unshifted slot) would otherwise divide finite-difference
// noise by ~0.
inline constexpr double kGradientScaleFloor = 1e-3;

struct GradGroupReport {
  std::string name;
  std::size_t count = 0;
  double max_abs_error = 0;
  double max_abs_gradient = 0;
  // max |analytic - numeric| / max(max |analytic|, max |numeric|, kGradientScaleFloor)
  double relative_error = 0;
};

struct GradcheckReport {
  std::vector<GradGroupReport> groups;

  double worst() const {
    double w = 0;
    for (const auto& g : groups) w = std::max(w, g.relative_error);
    return w;
  }
  bool passed(double tolerance) const {
    return std::all_of(groups.begin(), groups.end(), [&](const auto& g) { return g.relative_error < tolerance; });
  }
};

struct GradcheckOptions {
  double step = 1e-5;
  // Test hook: scales this group's analytic gradient by 1.01 before comparing.
  std::string corrupt_group;
};

template <typename T>
T inner_product(const TokenTensor<T>& a, const TokenTensor<T>& b) {
  T total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) total += a.values()[i] * b.values()[i];
  return total;
}

namespace detail {

template <typename T>
GradGroupReport compare_group(std::string name, std::span<const T> analytic, std::span<const T> numeric) {
  GradGroupReport r{std::move(name), analytic.size()};
  double max_numeric = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    r.max_abs_error = std::max(r.max_abs_error, std::abs(static_cast<double>(analytic[i] - numeric[i])));
    r.max_abs_gradient = std::max(r.max_abs_gradient, std::abs(static_cast<double>(analytic[i])));
    max_numeric = std::max(max_numeric, std::abs(static_cast<double>(numeric[i])));
  }
  r.relative_error = r.max_abs_error / std::max({r.max_abs_gradient, max_numeric, kGradientScaleFloor});
  return r;
}

}  // namespace detail

template <typename T>
GradcheckReport gradcheck(const FusionInputs<T>& inputs, const CGMFWeights<T>& weights, const FusionConfig& config,
                          const TokenTensor<T>& cotangent, const GradcheckOptions& options = {}) {
  FusionGradients<T> analytic = fuse_backward(inputs, weights, config, cotangent);
  const T h = static_cast<T>(options.step);

  FusionInputs<T> x = inputs;
  CGMFWeights<T> w = weights;
  auto loss = [&] { return inner_product(cotangent, fuse(x, w, config)); };
  auto numeric = [&](std::span<T> values) {
    std::vector<T> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + h;
      const T up = loss();
      values[i] = saved - h;
      const T down = loss();
      values[i] = saved;
      out[i] = (up - down) / (T(2) * h);
    }
    return out;
  };
  auto maybe_corrupt = [&](const std::string& name, std::span<T> g) {
    if (name == options.corrupt_group)
      for (T& v : g) v *= T(1.01);
  };

  GradcheckReport report;
  std::pair<const char*, std::pair<TokenTensor<T>*, TokenTensor<T>*>> streams[] = {
      {"f_v", {&x.f_v, &analytic.f_v}}, {"f_s", {&x.f_s, &analytic.f_s}}, {"f_c", {&x.f_c, &analytic.f_c}}};
  for (auto& [name, pair] : streams) {
    const auto num = numeric(pair.first->values());
    maybe_corrupt(name, pair.second->values());
    report.groups.push_back(detail::compare_group<T>(name, pair.second->values(), num));
  }
  auto params = parameter_views(w);
  auto grads = parameter_views(analytic.weights);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto num = numeric(params[i].values);
    maybe_corrupt(params[i].name, grads[i].values);
    report.groups.push_back(detail::compare_group<T>(params[i].name, grads[i].values, num));
  }
  return report;
}

}  // namespace cgmf
