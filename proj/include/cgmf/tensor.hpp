#pragma once

// Dense rank-3 token tensors and the small kernel set the fusion module is
// built from. Every differentiable op has a matching *_vjp that returns the
// cotangents of its inputs (and parameters, where it has any).

#include <cmath>
#include <compare>
#include <cstddef>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "cgmf/errors.hpp"
#include "cgmf/parallel.hpp"

namespace cgmf {

struct Shape3 {
  std::size_t frames = 0;
  std::size_t tokens = 0;
  std::size_t width = 0;

  constexpr std::size_t count() const { return frames * tokens * width; }
  friend constexpr bool operator==(const Shape3&, const Shape3&) = default;
};

inline std::string to_string(const Shape3& s) {
  std::ostringstream out;
  out << "[" << s.frames << "x" << s.tokens << "x" << s.width << "]";
  return out.str();
}

/// [frames x tokens x width], row-major, width fastest.
template <typename T>
class TokenTensor {
 public:
  using value_type = T;

  TokenTensor() = default;
  TokenTensor(std::size_t frames, std::size_t tokens, std::size_t width, T fill = T(0))
      : shape_{frames, tokens, width}, data_(shape_.count(), fill) {}
  explicit TokenTensor(Shape3 shape, T fill = T(0)) : shape_(shape), data_(shape.count(), fill) {}
  TokenTensor(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.count()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + cgmf::to_string(shape_));
    }
  }

  const Shape3& shape() const { return shape_; }
  std::size_t frames() const { return shape_.frames; }
  std::size_t tokens() const { return shape_.tokens; }
  std::size_t width() const { return shape_.width; }
  std::size_t size() const { return data_.size(); }

  T& operator()(std::size_t n, std::size_t m, std::size_t d) {
    return data_[(n * shape_.tokens + m) * shape_.width + d];
  }
  const T& operator()(std::size_t n, std::size_t m, std::size_t d) const {
    return data_[(n * shape_.tokens + m) * shape_.width + d];
  }

  std::span<T> row(std::size_t n, std::size_t m) {
    return {data_.data() + (n * shape_.tokens + m) * shape_.width, shape_.width};
  }
  std::span<const T> row(std::size_t n, std::size_t m) const {
    return {data_.data() + (n * shape_.tokens + m) * shape_.width, shape_.width};
  }
  std::span<T> frame(std::size_t n) {
    return {data_.data() + n * shape_.tokens * shape_.width, shape_.tokens * shape_.width};
  }
  std::span<const T> frame(std::size_t n) const {
    return {data_.data() + n * shape_.tokens * shape_.width, shape_.tokens * shape_.width};
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  friend bool operator==(const TokenTensor&, const TokenTensor&) = default;

 private:
  Shape3 shape_{};
  std::vector<T> data_;
};

/// y = x * weight + bias, weight stored [in x out] row-major.
template <typename T>
struct LinearMap {
  std::size_t in_width = 0;
  std::size_t out_width = 0;
  std::vector<T> weight;
  std::vector<T> bias;  // empty when the map has no bias

  LinearMap() = default;
  LinearMap(std::size_t in, std::size_t out, bool with_bias = true)
      : in_width(in), out_width(out), weight(in * out, T(0)), bias(with_bias ? out : 0, T(0)) {
    if (in == 0 || out == 0) throw DimensionError("linear map widths must be positive");
  }

  bool has_bias() const { return !bias.empty(); }
  T& w(std::size_t i, std::size_t o) { return weight[i * out_width + o]; }
  const T& w(std::size_t i, std::size_t o) const { return weight[i * out_width + o]; }
  std::size_t parameter_count() const { return weight.size() + bias.size(); }

  void validate() const {
    if (weight.size() != in_width * out_width || (has_bias() && bias.size() != out_width)) {
      throw DimensionError("linear map storage inconsistent with " + std::to_string(in_width) +
                           "->" + std::to_string(out_width));
    }
  }

  friend bool operator==(const LinearMap&, const LinearMap&) = default;
};

template <typename T>
struct LayerNormParams {
  std::size_t width = 0;
  std::vector<T> gain;
  std::vector<T> shift;
  T epsilon = T(1e-6);

  LayerNormParams() = default;
  explicit LayerNormParams(std::size_t w, T eps = T(1e-6))
      : width(w), gain(w, T(1)), shift(w, T(0)), epsilon(eps) {
    if (w == 0) throw DimensionError("layer norm width must be positive");
    if (!(eps > T(0))) throw DimensionError("layer norm epsilon must be positive");
  }

  std::size_t parameter_count() const { return gain.size() + shift.size(); }

  friend bool operator==(const LayerNormParams&, const LayerNormParams&) = default;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
T sigmoid(T x) requires std::is_floating_point_v<T> {
  return detail::sigmoid_scalar(x);
}

template <typename T>
T swish(T x) requires std::is_floating_point_v<T> {
  return x * detail::sigmoid_scalar(x);
}

// d/dx [x sigma(x)] = sigma(x) (1 + x (1 - sigma(x)))
template <typename T>
T swish_derivative(T x) requires std::is_floating_point_v<T> {
  const T s = detail::sigmoid_scalar(x);
  return s * (T(1) + x * (T(1) - s));
}

// ---------------------------------------------------------------------------
// Forward ops

template <typename T>
TokenTensor<T> matmul_tokens(const TokenTensor<T>& x, const LinearMap<T>& map, unsigned threads = 1) {
  map.validate();
  detail::require(x.width() == map.in_width, "matmul_tokens: input width " + std::to_string(x.width()) +
                                                 " != map in_width " + std::to_string(map.in_width));
  TokenTensor<T> y(x.frames(), x.tokens(), map.out_width);
  parallel_for(x.frames(), threads, [&](std::size_t n) {
    for (std::size_t m = 0; m < x.tokens(); ++m) {
      auto in = x.row(n, m);
      auto out = y.row(n, m);
      if (map.has_bias()) std::copy(map.bias.begin(), map.bias.end(), out.begin());
      for (std::size_t i = 0; i < map.in_width; ++i) {
        const T xi = in[i];
        const T* wrow = map.weight.data() + i * map.out_width;
        for (std::size_t o = 0; o < map.out_width; ++o) out[o] += xi * wrow[o];
      }
    }
  });
  return y;
}

/// Normalizes each token row over the width axis, then applies gain and shift.
template <typename T>
TokenTensor<T> layer_norm(const TokenTensor<T>& x, const LayerNormParams<T>& p) {
  detail::require(x.width() == p.width, "layer_norm: input width " + std::to_string(x.width()) +
                                            " != params width " + std::to_string(p.width));
  TokenTensor<T> y(x.shape());
  const std::size_t d = x.width();
  for (std::size_t n = 0; n < x.frames(); ++n) {
    for (std::size_t m = 0; m < x.tokens(); ++m) {
      auto in = x.row(n, m);
      auto out = y.row(n, m);
      T mean = 0;
      for (T v : in) mean += v;
      mean /= T(d);
      T var = 0;
      for (T v : in) var += (v - mean) * (v - mean);
      var /= T(d);
      const T inv = T(1) / std::sqrt(var + p.epsilon);
      for (std::size_t i = 0; i < d; ++i) out[i] = (in[i] - mean) * inv * p.gain[i] + p.shift[i];
    }
  }
  return y;
}

/// Softmax over every width row, max-shifted.
template <typename T>
TokenTensor<T> softmax_rows(const TokenTensor<T>& x) {
  TokenTensor<T> y(x.shape());
  for (std::size_t n = 0; n < x.frames(); ++n) {
    for (std::size_t m = 0; m < x.tokens(); ++m) {
      auto in = x.row(n, m);
      auto out = y.row(n, m);
      if (in.empty()) continue;
      T peak = in[0];
      for (T v : in) peak = std::max(peak, v);
      T total = 0;
      for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = std::exp(in[i] - peak);
        total += out[i];
      }
      for (T& v : out) v /= total;
    }
  }
  return y;
}

template <typename T, typename Fn>
TokenTensor<T> map_elements(const TokenTensor<T>& x, Fn fn) {
  TokenTensor<T> y(x.shape());
  auto in = x.values();
  auto out = y.values();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fn(in[i]);
  return y;
}

template <typename T>
TokenTensor<T> sigmoid(const TokenTensor<T>& x) {
  return map_elements(x, [](T v) { return detail::sigmoid_scalar(v); });
}

template <typename T>
TokenTensor<T> swish(const TokenTensor<T>& x) {
  return map_elements(x, [](T v) { return v * detail::sigmoid_scalar(v); });
}

/// Concatenates along the token axis: a's tokens first, then b's.
template <typename T>
TokenTensor<T> concat_tokens(const TokenTensor<T>& a, const TokenTensor<T>& b) {
  detail::require(a.frames() == b.frames(), "concat_tokens: frame count mismatch");
  detail::require(a.width() == b.width(), "concat_tokens: width mismatch");
  TokenTensor<T> y(a.frames(), a.tokens() + b.tokens(), a.width());
  for (std::size_t n = 0; n < a.frames(); ++n) {
    auto dst = y.frame(n);
    auto fa = a.frame(n);
    auto fb = b.frame(n);
    std::copy(fa.begin(), fa.end(), dst.begin());
    std::copy(fb.begin(), fb.end(), dst.begin() + static_cast<std::ptrdiff_t>(fa.size()));
  }
  return y;
}

template <typename T>
TokenTensor<T> slice_tokens(const TokenTensor<T>& x, std::size_t begin, std::size_t count) {
  detail::require(begin + count <= x.tokens(), "slice_tokens: range out of bounds");
  TokenTensor<T> y(x.frames(), count, x.width());
  for (std::size_t n = 0; n < x.frames(); ++n) {
    auto src = x.frame(n).subspan(begin * x.width(), count * x.width());
    std::copy(src.begin(), src.end(), y.frame(n).begin());
  }
  return y;
}

/// Concatenates along the width axis; token counts and frames must agree.
template <typename T>
TokenTensor<T> concat_width(const TokenTensor<T>& a, const TokenTensor<T>& b) {
  detail::require(a.frames() == b.frames() && a.tokens() == b.tokens(),
                  "concat_width: frame/token mismatch");
  TokenTensor<T> y(a.frames(), a.tokens(), a.width() + b.width());
  for (std::size_t n = 0; n < a.frames(); ++n) {
    for (std::size_t m = 0; m < a.tokens(); ++m) {
      auto dst = y.row(n, m);
      auto ra = a.row(n, m);
      auto rb = b.row(n, m);
      std::copy(ra.begin(), ra.end(), dst.begin());
      std::copy(rb.begin(), rb.end(), dst.begin() + static_cast<std::ptrdiff_t>(ra.size()));
    }
  }
  return y;
}

template <typename T>
TokenTensor<T> add(const TokenTensor<T>& a, const TokenTensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " +
                                              to_string(b.shape()));
  TokenTensor<T> y = a;
  auto out = y.values();
  auto rb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += rb[i];
  return y;
}

template <typename T>
void accumulate(TokenTensor<T>& into, const TokenTensor<T>& b) {
  detail::require(into.shape() == b.shape(), "accumulate: shape mismatch");
  auto out = into.values();
  auto rb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += rb[i];
}

/// Multiplies each row of x by the single-width scale tensor s ([N x M x 1]).
template <typename T>
TokenTensor<T> scale_rows(const TokenTensor<T>& x, const TokenTensor<T>& s) {
  detail::require(s.width() == 1 && s.frames() == x.frames() && s.tokens() == x.tokens(),
                  "scale_rows: scale must be [N x M x 1] matching x");
  TokenTensor<T> y = x;
  for (std::size_t n = 0; n < x.frames(); ++n)
    for (std::size_t m = 0; m < x.tokens(); ++m)
      for (T& v : y.row(n, m)) v *= s(n, m, 0);
  return y;
}

template <typename T>
bool all_finite(const TokenTensor<T>& x) {
  for (T v : x.values())
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Vector-Jacobian products

template <typename T>
struct MatmulVjp {
  TokenTensor<T> input;
  LinearMap<T> map;  // gradient with the same layout as the forward map
};

template <typename T>
MatmulVjp<T> matmul_tokens_vjp(const TokenTensor<T>& x, const LinearMap<T>& map,
                               const TokenTensor<T>& cot) {
  detail::require(x.width() == map.in_width, "matmul_tokens_vjp: input width mismatch");
  detail::require(cot.shape() == Shape3{x.frames(), x.tokens(), map.out_width},
                  "matmul_tokens_vjp: cotangent shape mismatch");
  MatmulVjp<T> g{TokenTensor<T>(x.shape()), LinearMap<T>(map.in_width, map.out_width, map.has_bias())};
  for (std::size_t n = 0; n < x.frames(); ++n) {
    for (std::size_t m = 0; m < x.tokens(); ++m) {
      auto in = x.row(n, m);
      auto dy = cot.row(n, m);
      auto dx = g.input.row(n, m);
      for (std::size_t i = 0; i < map.in_width; ++i) {
        const T* wrow = map.weight.data() + i * map.out_width;
        T* gwrow = g.map.weight.data() + i * map.out_width;
        T acc = 0;
        for (std::size_t o = 0; o < map.out_width; ++o) {
          acc += wrow[o] * dy[o];
          gwrow[o] += in[i] * dy[o];
        }
        dx[i] = acc;
      }
      if (map.has_bias())
        for (std::size_t o = 0; o < map.out_width; ++o) g.map.bias[o] += dy[o];
    }
  }
  return g;
}

template <typename T>
struct LayerNormVjp {
  TokenTensor<T> input;
  LayerNormParams<T> params;  // gain/shift gradients; epsilon copied, not differentiated
};

template <typename T>
LayerNormVjp<T> layer_norm_vjp(const TokenTensor<T>& x, const LayerNormParams<T>& p,
                               const TokenTensor<T>& cot) {
  detail::require(x.width() == p.width, "layer_norm_vjp: width mismatch");
  detail::require(cot.shape() == x.shape(), "layer_norm_vjp: cotangent shape mismatch");
  LayerNormVjp<T> g{TokenTensor<T>(x.shape()), LayerNormParams<T>(p.width, p.epsilon)};
  std::fill(g.params.gain.begin(), g.params.gain.end(), T(0));
  const std::size_t d = x.width();
  std::vector<T> xhat(d), dxhat(d);
  for (std::size_t n = 0; n < x.frames(); ++n) {
    for (std::size_t m = 0; m < x.tokens(); ++m) {
      auto in = x.row(n, m);
      auto dy = cot.row(n, m);
      auto dx = g.input.row(n, m);
      T mean = 0;
      for (T v : in) mean += v;
      mean /= T(d);
      T var = 0;
      for (T v : in) var += (v - mean) * (v - mean);
      var /= T(d);
      const T inv = T(1) / std::sqrt(var + p.epsilon);
      T mean_dxhat = 0, mean_dxhat_xhat = 0;
      for (std::size_t i = 0; i < d; ++i) {
        xhat[i] = (in[i] - mean) * inv;
        dxhat[i] = dy[i] * p.gain[i];
        mean_dxhat += dxhat[i];
        mean_dxhat_xhat += dxhat[i] * xhat[i];
        g.params.gain[i] += dy[i] * xhat[i];
        g.params.shift[i] += dy[i];
      }
      mean_dxhat /= T(d);
      mean_dxhat_xhat /= T(d);
      for (std::size_t i = 0; i < d; ++i)
        dx[i] = inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
  }
  return g;
}

template <typename T>
TokenTensor<T> softmax_rows_vjp(const TokenTensor<T>& x, const TokenTensor<T>& cot) {
  detail::require(cot.shape() == x.shape(), "softmax_rows_vjp: cotangent shape mismatch");
  const TokenTensor<T> y = softmax_rows(x);
  TokenTensor<T> dx(x.shape());
  for (std::size_t n = 0; n < x.frames(); ++n) {
    for (std::size_t m = 0; m < x.tokens(); ++m) {
      auto p = y.row(n, m);
      auto dy = cot.row(n, m);
      auto out = dx.row(n, m);
      T dot = 0;
      for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * dy[i];
      for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] * (dy[i] - dot);
    }
  }
  return dx;
}

template <typename T>
TokenTensor<T> sigmoid_vjp(const TokenTensor<T>& x, const TokenTensor<T>& cot) {
  detail::require(cot.shape() == x.shape(), "sigmoid_vjp: cotangent shape mismatch");
  TokenTensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = detail::sigmoid_scalar(x.values()[i]);
    dx.values()[i] = cot.values()[i] * s * (T(1) - s);
  }
  return dx;
}

template <typename T>
TokenTensor<T> swish_vjp(const TokenTensor<T>& x, const TokenTensor<T>& cot) {
  detail::require(cot.shape() == x.shape(), "swish_vjp: cotangent shape mismatch");
  TokenTensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    dx.values()[i] = cot.values()[i] * swish_derivative(x.values()[i]);
  return dx;
}

/// Splits a concat_tokens cotangent back into the two operands' cotangents.
template <typename T>
std::pair<TokenTensor<T>, TokenTensor<T>> concat_tokens_vjp(std::size_t leading_tokens,
                                                            const TokenTensor<T>& cot) {
  detail::require(leading_tokens <= cot.tokens(), "concat_tokens_vjp: split point out of range");
  return {slice_tokens(cot, 0, leading_tokens),
          slice_tokens(cot, leading_tokens, cot.tokens() - leading_tokens)};
}

template <typename T>
std::pair<TokenTensor<T>, TokenTensor<T>> concat_width_vjp(std::size_t leading_width,
                                                           const TokenTensor<T>& cot) {
  detail::require(leading_width <= cot.width(), "concat_width_vjp: split point out of range");
  TokenTensor<T> a(cot.frames(), cot.tokens(), leading_width);
  TokenTensor<T> b(cot.frames(), cot.tokens(), cot.width() - leading_width);
  for (std::size_t n = 0; n < cot.frames(); ++n) {
    for (std::size_t m = 0; m < cot.tokens(); ++m) {
      auto src = cot.row(n, m);
      std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(leading_width), a.row(n, m).begin());
      std::copy(src.begin() + static_cast<std::ptrdiff_t>(leading_width), src.end(), b.row(n, m).begin());
    }
  }
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Uniform dispatch, used where an op is chosen at run time (tests, tooling).

enum class OpKind { identity, matmul_tokens, layer_norm, softmax_rows, sigmoid, swish, concat_tokens };

template <typename T>
struct OpCall {
  OpKind kind = OpKind::identity;
  std::vector<TokenTensor<T>> inputs;
  std::variant<std::monostate, LinearMap<T>, LayerNormParams<T>> params;
};

template <typename T>
struct VjpResult {
  std::vector<TokenTensor<T>> inputs;
  std::optional<LinearMap<T>> map;
  std::optional<LayerNormParams<T>> norm;
};

namespace detail {

template <typename T>
void require_inputs(const OpCall<T>& call, std::size_t n) {
  if (call.inputs.size() != n)
    throw DimensionError("op expects " + std::to_string(n) + " inputs, got " +
                         std::to_string(call.inputs.size()));
}

template <typename P, typename T>
const P& require_params(const OpCall<T>& call) {
  if (const auto* p = std::get_if<P>(&call.params)) return *p;
  throw std::invalid_argument("op call is missing its parameters");
}

[[noreturn]] inline void unsupported(OpKind kind) {
  throw UnsupportedOpError("no vjp registered for op kind " + std::to_string(static_cast<int>(kind)));
}

}  // namespace detail

template <typename T>
TokenTensor<T> evaluate(const OpCall<T>& call) {
  switch (call.kind) {
    case OpKind::identity:
      detail::require_inputs(call, 1);
      return call.inputs[0];
    case OpKind::matmul_tokens:
      detail::require_inputs(call, 1);
      return matmul_tokens(call.inputs[0], detail::require_params<LinearMap<T>>(call));
    case OpKind::layer_norm:
      detail::require_inputs(call, 1);
      return layer_norm(call.inputs[0], detail::require_params<LayerNormParams<T>>(call));
    case OpKind::softmax_rows:
      detail::require_inputs(call, 1);
      return softmax_rows(call.inputs[0]);
    case OpKind::sigmoid:
      detail::require_inputs(call, 1);
      return sigmoid(call.inputs[0]);
    case OpKind::swish:
      detail::require_inputs(call, 1);
      return swish(call.inputs[0]);
    case OpKind::concat_tokens:
      detail::require_inputs(call, 2);
      return concat_tokens(call.inputs[0], call.inputs[1]);
  }
  detail::unsupported(call.kind);
}

/// Gradient of <cot, op(inputs)> with respect to the inputs and parameters.
template <typename T>
VjpResult<T> vjp(const OpCall<T>& call, const TokenTensor<T>& cot) {
  VjpResult<T> r;
  switch (call.kind) {
    case OpKind::identity:
      detail::require_inputs(call, 1);
      detail::require(cot.shape() == call.inputs[0].shape(), "identity vjp: cotangent shape mismatch");
      r.inputs.push_back(cot);
      return r;
    case OpKind::matmul_tokens: {
      detail::require_inputs(call, 1);
      auto g = matmul_tokens_vjp(call.inputs[0], detail::require_params<LinearMap<T>>(call), cot);
      r.inputs.push_back(std::move(g.input));
      r.map = std::move(g.map);
      return r;
    }
    case OpKind::layer_norm: {
      detail::require_inputs(call, 1);
      auto g = layer_norm_vjp(call.inputs[0], detail::require_params<LayerNormParams<T>>(call), cot);
      r.inputs.push_back(std::move(g.input));
      r.norm = std::move(g.params);
      return r;
    }
    case OpKind::softmax_rows:
      detail::require_inputs(call, 1);
      r.inputs.push_back(softmax_rows_vjp(call.inputs[0], cot));
      return r;
    case OpKind::sigmoid:
      detail::require_inputs(call, 1);
      r.inputs.push_back(sigmoid_vjp(call.inputs[0], cot));
      return r;
    case OpKind::swish:
      detail::require_inputs(call, 1);
      r.inputs.push_back(swish_vjp(call.inputs[0], cot));
      return r;
    case OpKind::concat_tokens: {
      detail::require_inputs(call, 2);
      detail::require(cot.tokens() == call.inputs[0].tokens() + call.inputs[1].tokens(),
                      "concat_tokens vjp: cotangent token count mismatch");
      auto [a, b] = concat_tokens_vjp(call.inputs[0].tokens(), cot);
      r.inputs.push_back(std::move(a));
      r.inputs.push_back(std::move(b));
      return r;
    }
  }
  detail::unsupported(call.kind);
}

}  // namespace cgmf
