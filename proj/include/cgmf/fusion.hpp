#pragma once

// Camera-guided modality fusion.
//
// Visual tokens f_v [N x Mv x dv] query a per-frame memory built from spatial
// tokens f_s [N x Ms x ds] and one camera token f_c [N x 1 x ds]:
//
//   Q = P_Q(LN(f_v))   K = P_K(LN(f_s))   V = P_V(LN(f_s))   C = P_C(f_c)
//   B_g = geoMLP([f_s, f_c])             K += B_g, V += B_g
//   W_t = sigmoid(twMLP(f_s))            V *= W_t
//   f_hat = MultiHeadAttn(Q, [C; K], [C; V])
//   f_proj = LN(P_O(f_hat))
//   g = swish(P_g1(C)) * P_g2(C)
//   f_fused = P_L(f_proj) * g + f_v
//
// Every stage is frame-local. Both MLPs are Linear -> swish -> Linear with
// hidden width d_attn.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cgmf/errors.hpp"
#include "cgmf/random.hpp"
#include "cgmf/tensor.hpp"

namespace cgmf {

struct FusionToggles {
  bool geo_bias = true;
  bool token_weight = true;
  bool camera_memory = true;
  bool gate = true;

  friend bool operator==(const FusionToggles&, const FusionToggles&) = default;
};

struct FusionConfig {
  std::size_t n_frames = 1;
  std::size_t m_visual = 1;
  std::size_t m_spatial = 1;
  std::size_t d_visual = 1;
  std::size_t d_spatial = 1;
  std::size_t d_attn = 8;
  std::size_t n_heads = 8;
  FusionToggles toggles{};

  std::size_t head_width() const { return d_attn / n_heads; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(name, "must be >= 1");
    };
    positive(n_frames, "n_frames");
    positive(m_visual, "m_visual");
    positive(d_visual, "d_visual");
    positive(d_spatial, "d_spatial");
    positive(d_attn, "d_attn");
    positive(n_heads, "n_heads");
    if (d_attn % n_heads != 0)
      throw ConfigError("n_heads", "d_attn (" + std::to_string(d_attn) + ") is not divisible by n_heads (" +
                                       std::to_string(n_heads) + ")");
    if (m_spatial == 0 && !toggles.camera_memory)
      throw ConfigError("m_spatial", "m_spatial = 0 requires camera memory; attention memory would be empty");
  }

  friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

/// The structural rows of the ablation table.
enum class AblationVariant {
  backbone_only,  // no fusion at all; output is f_v
  shallow,        // spatial tokens through plain cross-attention (camera slot only)
  token_weight,   // + twMLP
  geo_bias,       // + twMLP + geoMLP
  full,           // + camera-conditioned gate
};

inline constexpr AblationVariant kFusionVariants[] = {AblationVariant::shallow, AblationVariant::token_weight,
                                                      AblationVariant::geo_bias, AblationVariant::full};

inline const char* variant_label(AblationVariant v) {
  switch (v) {
    case AblationVariant::backbone_only: return "backbone-ft";
    case AblationVariant::shallow: return "+spatial (shallow)";
    case AblationVariant::token_weight: return "+twMLP";
    case AblationVariant::geo_bias: return "+twMLP+geoMLP";
    case AblationVariant::full: return "full";
  }
  return "?";
}

inline FusionToggles variant_toggles(AblationVariant v) {
  switch (v) {
    case AblationVariant::backbone_only: return {false, false, false, false};
    case AblationVariant::shallow: return {false, false, true, false};
    case AblationVariant::token_weight: return {false, true, true, false};
    case AblationVariant::geo_bias: return {true, true, true, false};
    case AblationVariant::full: return {true, true, true, true};
  }
  return {};
}

template <typename T>
struct Mlp {
  LinearMap<T> hidden;
  LinearMap<T> out;

  friend bool operator==(const Mlp&, const Mlp&) = default;
};

template <typename T>
struct CGMFWeights {
  LayerNormParams<T> ln_v, ln_s;
  LinearMap<T> p_q, p_k, p_v, p_c;
  Mlp<T> geo_mlp, tw_mlp;
  LinearMap<T> p_o;
  LayerNormParams<T> ln_o;
  LinearMap<T> p_l, p_g1, p_g2;

  friend bool operator==(const CGMFWeights&, const CGMFWeights&) = default;
};

/// Allocates zeroed weights (LN gain = 1) with every shape derived from config.
template <typename T>
CGMFWeights<T> zero_weights(const FusionConfig& c) {
  c.validate();
  const std::size_t dv = c.d_visual, ds = c.d_spatial, da = c.d_attn;
  return CGMFWeights<T>{
      LayerNormParams<T>(dv), LayerNormParams<T>(ds),
      LinearMap<T>(dv, da),   LinearMap<T>(ds, da), LinearMap<T>(ds, da), LinearMap<T>(ds, da),
      Mlp<T>{LinearMap<T>(2 * ds, da), LinearMap<T>(da, da)},
      Mlp<T>{LinearMap<T>(ds, da), LinearMap<T>(da, 1)},
      LinearMap<T>(da, da),   LayerNormParams<T>(da),
      LinearMap<T>(da, dv),   LinearMap<T>(da, dv), LinearMap<T>(da, dv),
  };
}

/// A named flat view of one parameter tensor. Linear weights are [in, out].
template <typename T>
struct ParamView {
  std::string name;
  std::span<T> values;
  std::vector<std::size_t> shape;
};

// Canonical tensor order; serialization and gradient checks both use it.
template <typename W, typename Fn>
void for_each_parameter(W& w, Fn&& fn) {
  auto norm = [&](const std::string& name, auto& p) {
    fn(name + ".gain", std::span(p.gain), std::vector<std::size_t>{p.width});
    fn(name + ".shift", std::span(p.shift), std::vector<std::size_t>{p.width});
  };
  auto linear = [&](const std::string& name, auto& m) {
    fn(name + ".weight", std::span(m.weight), std::vector<std::size_t>{m.in_width, m.out_width});
    if (m.has_bias()) fn(name + ".bias", std::span(m.bias), std::vector<std::size_t>{m.out_width});
  };
  norm("ln_v", w.ln_v);
  norm("ln_s", w.ln_s);
  linear("p_q", w.p_q);
  linear("p_k", w.p_k);
  linear("p_v", w.p_v);
  linear("p_c", w.p_c);
  linear("geo_mlp.0", w.geo_mlp.hidden);
  linear("geo_mlp.1", w.geo_mlp.out);
  linear("tw_mlp.0", w.tw_mlp.hidden);
  linear("tw_mlp.1", w.tw_mlp.out);
  linear("p_o", w.p_o);
  norm("ln_o", w.ln_o);
  linear("p_l", w.p_l);
  linear("p_g1", w.p_g1);
  linear("p_g2", w.p_g2);
}

template <typename T>
std::vector<ParamView<T>> parameter_views(CGMFWeights<T>& w) {
  std::vector<ParamView<T>> out;
  for_each_parameter(w, [&](std::string name, std::span<T> v, std::vector<std::size_t> shape) {
    out.push_back({std::move(name), v, std::move(shape)});
  });
  return out;
}

template <typename T>
std::size_t parameter_count(const CGMFWeights<T>& w) {
  std::size_t total = 0;
  for_each_parameter(w, [&](const std::string&, auto v, const auto&) { total += v.size(); });
  return total;
}

/// Closed-form parameter count for a config.
inline std::size_t parameter_count(const FusionConfig& c) {
  const std::size_t dv = c.d_visual, ds = c.d_spatial, da = c.d_attn;
  auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
  return 2 * dv + 2 * ds + lin(dv, da) + 3 * lin(ds, da) + lin(2 * ds, da) + lin(da, da) + lin(ds, da) +
         lin(da, 1) + lin(da, da) + 2 * da + 3 * lin(da, dv);
}

/// Throws DimensionError naming the first tensor whose shape disagrees with config.
template <typename T>
void validate_weights(const CGMFWeights<T>& w, const FusionConfig& c) {
  const auto expected = zero_weights<T>(c);
  std::vector<std::pair<std::string, std::vector<std::size_t>>> want, have;
  for_each_parameter(expected, [&](std::string n, auto, std::vector<std::size_t> s) { want.emplace_back(n, s); });
  for_each_parameter(w, [&](std::string n, auto v, std::vector<std::size_t> s) {
    std::size_t count = 1;
    for (auto d : s) count *= d;
    if (count != v.size()) throw DimensionError(n + ": storage length does not match its declared shape");
    have.emplace_back(n, s);
  });
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (i >= have.size() || have[i].first != want[i].first)
      throw DimensionError(want[i].first + ": missing from weights");
    if (have[i].second != want[i].second) throw DimensionError(want[i].first + ": shape mismatch with config");
  }
  if (have.size() != want.size()) throw DimensionError(have[want.size()].first + ": not part of the schema");
}

struct InitOptions {
  // Zero P_L so the module starts as the identity on f_v.
  bool zero_output_projection = false;
};

/// Linear maps ~ U(-1/sqrt(in), 1/sqrt(in)) for weight and bias; LN gain 1, shift 0.
template <typename T>
CGMFWeights<T> init_weights(const FusionConfig& config, std::uint64_t seed, InitOptions options = {}) {
  CGMFWeights<T> w = zero_weights<T>(config);
  Rng rng(seed);
  auto fill = [&](LinearMap<T>& m) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.in_width));
    for (T& v : m.weight) v = static_cast<T>(rng.uniform(-bound, bound));
    for (T& v : m.bias) v = static_cast<T>(rng.uniform(-bound, bound));
  };
  for (LinearMap<T>* m : {&w.p_q, &w.p_k, &w.p_v, &w.p_c, &w.geo_mlp.hidden, &w.geo_mlp.out, &w.tw_mlp.hidden,
                          &w.tw_mlp.out, &w.p_o, &w.p_l, &w.p_g1, &w.p_g2})
    fill(*m);
  if (options.zero_output_projection) {
    std::fill(w.p_l.weight.begin(), w.p_l.weight.end(), T(0));
    std::fill(w.p_l.bias.begin(), w.p_l.bias.end(), T(0));
  }
  return w;
}

template <typename T>
struct FusionInputs {
  TokenTensor<T> f_v;  // [N x Mv x dv]
  TokenTensor<T> f_s;  // [N x Ms x ds]
  TokenTensor<T> f_c;  // [N x 1 x ds]
  std::optional<TokenTensor<T>> f_register;  // [N x 4 x ds], never read by the fusion
};

template <typename T>
void validate_inputs(const FusionInputs<T>& in, const FusionConfig& c) {
  auto check = [](const TokenTensor<T>& t, Shape3 want, const char* name) {
    if (t.shape() != want)
      throw DimensionError(std::string(name) + ": shape " + to_string(t.shape()) + ", expected " + to_string(want));
  };
  check(in.f_v, {c.n_frames, c.m_visual, c.d_visual}, "f_v");
  check(in.f_s, {c.n_frames, c.m_spatial, c.d_spatial}, "f_s");
  check(in.f_c, {c.n_frames, 1, c.d_spatial}, "f_c");
  if (in.f_register && in.f_register->frames() != c.n_frames)
    throw DimensionError("f_register: frame count disagrees with f_v");
}

template <typename T>
struct Projections {
  TokenTensor<T> q, k, v, c;
};

/// Q = P_Q(LN(f_v)), K = P_K(LN(f_s)), V = P_V(LN(f_s)), C = P_C(f_c). No LN on the camera token.
template <typename T>
Projections<T> project_qkvc(const FusionInputs<T>& in, const CGMFWeights<T>& w, unsigned threads = 1) {
  detail::require(in.f_v.frames() == in.f_s.frames() && in.f_s.frames() == in.f_c.frames(),
                  "project_qkvc: frame counts disagree");
  detail::require(in.f_c.tokens() == 1, "project_qkvc: f_c must hold one token per frame");
  const auto xs = layer_norm(in.f_s, w.ln_s);
  return {matmul_tokens(layer_norm(in.f_v, w.ln_v), w.p_q, threads), matmul_tokens(xs, w.p_k, threads),
          matmul_tokens(xs, w.p_v, threads), matmul_tokens(in.f_c, w.p_c, threads)};
}

/// Broadcasts each frame's camera row onto every spatial token: [N x Ms x 2ds].
template <typename T>
TokenTensor<T> camera_concat(const TokenTensor<T>& f_s, const TokenTensor<T>& f_c) {
  detail::require(f_c.tokens() == 1 && f_c.frames() == f_s.frames() && f_c.width() == f_s.width(),
                  "camera_concat: f_c must be [N x 1 x ds] matching f_s");
  TokenTensor<T> cam(f_s.frames(), f_s.tokens(), f_c.width());
  for (std::size_t n = 0; n < f_s.frames(); ++n)
    for (std::size_t m = 0; m < f_s.tokens(); ++m) {
      auto src = f_c.row(n, 0);
      std::copy(src.begin(), src.end(), cam.row(n, m).begin());
    }
  return concat_width(f_s, cam);
}

template <typename T>
TokenTensor<T> mlp_forward(const TokenTensor<T>& x, const Mlp<T>& mlp, unsigned threads = 1) {
  return matmul_tokens(swish(matmul_tokens(x, mlp.hidden, threads)), mlp.out, threads);
}

/// B_g = geoMLP([f_s, f_c]), [N x Ms x d_attn].
template <typename T>
TokenTensor<T> geo_bias(const TokenTensor<T>& f_s, const TokenTensor<T>& f_c, const CGMFWeights<T>& w,
                        unsigned threads = 1) {
  return mlp_forward(camera_concat(f_s, f_c), w.geo_mlp, threads);
}

/// W_t = sigmoid(twMLP(f_s)), [N x Ms x 1]. Depends on f_s only.
template <typename T>
TokenTensor<T> token_weights(const TokenTensor<T>& f_s, const CGMFWeights<T>& w, unsigned threads = 1) {
  return sigmoid(mlp_forward(f_s, w.tw_mlp, threads));
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention, frame-local, no masking.

/// Returns softmax weights laid out [N x (heads*Mq) x Mem], row = head*Mq + query.
template <typename T>
TokenTensor<T> attention_probabilities(const TokenTensor<T>& q, const TokenTensor<T>& k, std::size_t heads) {
  detail::require(q.frames() == k.frames() && q.width() == k.width(), "attention: q/k shape mismatch");
  detail::require(heads > 0 && q.width() % heads == 0, "attention: width not divisible by heads");
  detail::require(k.tokens() > 0, "attention: empty memory");
  const std::size_t dh = q.width() / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  TokenTensor<T> p(q.frames(), heads * q.tokens(), k.tokens());
  for (std::size_t n = 0; n < q.frames(); ++n)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < q.tokens(); ++i) {
        auto row = p.row(n, h * q.tokens() + i);
        const T* qi = q.row(n, i).data() + h * dh;
        for (std::size_t j = 0; j < k.tokens(); ++j) {
          const T* kj = k.row(n, j).data() + h * dh;
          T s = 0;
          for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
          row[j] = s * scale;
        }
      }
  return softmax_rows(p);
}

namespace detail {

// Softmax scores of one query against one head's keys, written into `row`.
template <typename T>
void attention_row(const T* qi, const TokenTensor<T>& k, std::size_t n, std::size_t offset, std::size_t dh,
                   T scale, std::vector<T>& row) {
  T peak = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < k.tokens(); ++j) {
    const T* kj = k.row(n, j).data() + offset;
    T s = 0;
    for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
    row[j] = s * scale;
    peak = std::max(peak, row[j]);
  }
  T total = 0;
  for (std::size_t j = 0; j < k.tokens(); ++j) {
    row[j] = std::exp(row[j] - peak);
    total += row[j];
  }
  for (std::size_t j = 0; j < k.tokens(); ++j) row[j] /= total;
}

}  // namespace detail

template <typename T>
TokenTensor<T> multi_head_attention(const TokenTensor<T>& q, const TokenTensor<T>& k, const TokenTensor<T>& v,
                                    std::size_t heads, unsigned threads = 1) {
  detail::require(q.frames() == k.frames() && k.frames() == v.frames(), "attention: frame counts disagree");
  detail::require(q.width() == k.width() && k.width() == v.width(), "attention: widths disagree");
  detail::require(k.tokens() == v.tokens(), "attention: key/value token counts disagree");
  detail::require(heads > 0 && q.width() % heads == 0, "attention: width not divisible by heads");
  detail::require(k.tokens() > 0, "attention: empty memory");
  const std::size_t dh = q.width() / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  TokenTensor<T> out(q.shape());
  parallel_for(q.frames(), threads, [&](std::size_t n) {
    std::vector<T> row(k.tokens());
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < q.tokens(); ++i) {
        detail::attention_row(q.row(n, i).data() + off, k, n, off, dh, scale, row);
        T* oi = out.row(n, i).data() + off;
        for (std::size_t j = 0; j < k.tokens(); ++j) {
          const T pj = row[j];
          const T* vj = v.row(n, j).data() + off;
          for (std::size_t e = 0; e < dh; ++e) oi[e] += pj * vj[e];
        }
      }
    }
  });
  return out;
}

template <typename T>
struct AttentionVjp {
  TokenTensor<T> q, k, v;
};

template <typename T>
AttentionVjp<T> multi_head_attention_vjp(const TokenTensor<T>& q, const TokenTensor<T>& k, const TokenTensor<T>& v,
                                         std::size_t heads, const TokenTensor<T>& cot, unsigned threads = 1) {
  detail::require(cot.shape() == q.shape(), "attention vjp: cotangent shape mismatch");
  const std::size_t dh = q.width() / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  AttentionVjp<T> g{TokenTensor<T>(q.shape()), TokenTensor<T>(k.shape()), TokenTensor<T>(v.shape())};
  parallel_for(q.frames(), threads, [&](std::size_t n) {
    std::vector<T> p(k.tokens()), dp(k.tokens());
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < q.tokens(); ++i) {
        const T* qi = q.row(n, i).data() + off;
        const T* doi = cot.row(n, i).data() + off;
        detail::attention_row(qi, k, n, off, dh, scale, p);
        T weighted = 0;
        for (std::size_t j = 0; j < k.tokens(); ++j) {
          const T* vj = v.row(n, j).data() + off;
          T s = 0;
          for (std::size_t e = 0; e < dh; ++e) s += doi[e] * vj[e];
          dp[j] = s;
          weighted += p[j] * s;
        }
        T* dqi = g.q.row(n, i).data() + off;
        for (std::size_t j = 0; j < k.tokens(); ++j) {
          const T ds = p[j] * (dp[j] - weighted) * scale;
          const T* kj = k.row(n, j).data() + off;
          T* dkj = g.k.row(n, j).data() + off;
          T* dvj = g.v.row(n, j).data() + off;
          for (std::size_t e = 0; e < dh; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
            dvj[e] += p[j] * doi[e];
          }
        }
      }
    }
  });
  return g;
}

/// f_hat = Attn(Q, [C; K], [C; V]), or Attn(Q, K, V) without the camera slot.
template <typename T>
TokenTensor<T> attend(const TokenTensor<T>& q, const TokenTensor<T>& k, const TokenTensor<T>& v,
                      const TokenTensor<T>& c, const FusionConfig& config, unsigned threads = 1) {
  detail::require(config.n_heads > 0 && q.width() % config.n_heads == 0,
                  "attend: d_attn not divisible by n_heads");
  if (!config.toggles.camera_memory) {
    if (k.tokens() == 0) throw DimensionError("attend: empty attention memory (no spatial tokens, camera slot disabled)");
    return multi_head_attention(q, k, v, config.n_heads, threads);
  }
  return multi_head_attention(q, concat_tokens(c, k), concat_tokens(c, v), config.n_heads, threads);
}

/// f_fused = P_L(LN(P_O(f_hat))) * g + f_v with g = swish(P_g1(C)) * P_g2(C), or g = 1 when the gate is off.
template <typename T>
TokenTensor<T> gate_and_fuse(const TokenTensor<T>& f_hat, const TokenTensor<T>& c, const TokenTensor<T>& f_v,
                             const CGMFWeights<T>& w, const FusionConfig& config, unsigned threads = 1) {
  detail::require(c.tokens() == 1 && c.frames() == f_v.frames(), "gate_and_fuse: C must be [N x 1 x d_attn]");
  detail::require(f_hat.frames() == f_v.frames() && f_hat.tokens() == f_v.tokens(),
                  "gate_and_fuse: f_hat and f_v disagree on frames/tokens");
  TokenTensor<T> lifted = matmul_tokens(layer_norm(matmul_tokens(f_hat, w.p_o, threads), w.ln_o), w.p_l, threads);
  detail::require(lifted.shape() == f_v.shape(), "gate_and_fuse: P_L output does not match f_v");
  if (config.toggles.gate) {
    const auto u = matmul_tokens(c, w.p_g1);
    const auto v = matmul_tokens(c, w.p_g2);
    for (std::size_t n = 0; n < f_v.frames(); ++n) {
      for (std::size_t d = 0; d < f_v.width(); ++d) {
        const T gd = swish(u(n, 0, d)) * v(n, 0, d);
        for (std::size_t m = 0; m < f_v.tokens(); ++m) lifted(n, m, d) *= gd;
      }
    }
  }
  accumulate(lifted, f_v);
  return lifted;
}

struct StageTimings {
  double project = 0, geo_bias = 0, token_weight = 0, attend = 0, gate_fuse = 0;
  double total() const { return project + geo_bias + token_weight + attend + gate_fuse; }
};

struct FuseOptions {
  unsigned threads = 1;
  StageTimings* timings = nullptr;  // seconds per stage, when set
};

namespace detail {

class StageClock {
 public:
  explicit StageClock(double* sink) : sink_(sink), start_(std::chrono::steady_clock::now()) {}
  ~StageClock() {
    if (sink_) *sink_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  StageClock(const StageClock&) = delete;
  StageClock& operator=(const StageClock&) = delete;

 private:
  double* sink_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

/// Full fusion pass; output has the shape of f_v. f_register is ignored.
template <typename T>
TokenTensor<T> fuse(const FusionInputs<T>& in, const CGMFWeights<T>& w, const FusionConfig& config,
                    FuseOptions options = {}) {
  config.validate();
  validate_inputs(in, config);
  validate_weights(w, config);
  StageTimings* t = options.timings;
  const unsigned threads = options.threads;

  Projections<T> pr = [&] {
    detail::StageClock clock(t ? &t->project : nullptr);
    return project_qkvc(in, w, threads);
  }();
  if (config.toggles.geo_bias) {
    detail::StageClock clock(t ? &t->geo_bias : nullptr);
    const auto bias = geo_bias(in.f_s, in.f_c, w, threads);
    accumulate(pr.k, bias);
    accumulate(pr.v, bias);
  }
  if (config.toggles.token_weight) {
    detail::StageClock clock(t ? &t->token_weight : nullptr);
    pr.v = scale_rows(pr.v, token_weights(in.f_s, w, threads));
  }
  TokenTensor<T> f_hat = [&] {
    detail::StageClock clock(t ? &t->attend : nullptr);
    return attend(pr.q, pr.k, pr.v, pr.c, config, threads);
  }();
  detail::StageClock clock(t ? &t->gate_fuse : nullptr);
  return gate_and_fuse(f_hat, pr.c, in.f_v, w, config, threads);
}

/// The ablation row's output: bypass for backbone_only, otherwise fuse with that row's toggles.
template <typename T>
TokenTensor<T> run_variant(AblationVariant variant, const FusionInputs<T>& in, const CGMFWeights<T>& w,
                           FusionConfig config, FuseOptions options = {}) {
  if (variant == AblationVariant::backbone_only) return in.f_v;
  config.toggles = variant_toggles(variant);
  return fuse(in, w, config, options);
}

// ---------------------------------------------------------------------------
// Reverse pass

template <typename T>
struct FusionGradients {
  TokenTensor<T> f_v, f_s, f_c;
  CGMFWeights<T> weights;
};

/// Gradients of <cotangent, fuse(inputs)> with respect to f_v, f_s, f_c and every weight.
template <typename T>
FusionGradients<T> fuse_backward(const FusionInputs<T>& in, const CGMFWeights<T>& w, const FusionConfig& config,
                                 const TokenTensor<T>& cotangent, unsigned threads = 1) {
  config.validate();
  validate_inputs(in, config);
  validate_weights(w, config);
  detail::require(cotangent.shape() == in.f_v.shape(), "fuse_backward: cotangent must match f_v");
  const auto& tg = config.toggles;

  // Forward, keeping what the reverse pass reads.
  const auto xv = layer_norm(in.f_v, w.ln_v);
  const auto xs = layer_norm(in.f_s, w.ln_s);
  const auto q = matmul_tokens(xv, w.p_q, threads);
  auto k = matmul_tokens(xs, w.p_k, threads);
  auto v = matmul_tokens(xs, w.p_v, threads);
  const auto c = matmul_tokens(in.f_c, w.p_c);

  TokenTensor<T> geo_in, geo_pre;
  if (tg.geo_bias) {
    geo_in = camera_concat(in.f_s, in.f_c);
    geo_pre = matmul_tokens(geo_in, w.geo_mlp.hidden, threads);
    const auto bias = matmul_tokens(swish(geo_pre), w.geo_mlp.out, threads);
    accumulate(k, bias);
    accumulate(v, bias);
  }
  TokenTensor<T> tw_pre, tw_logit, wt, v_biased;
  if (tg.token_weight) {
    tw_pre = matmul_tokens(in.f_s, w.tw_mlp.hidden, threads);
    tw_logit = matmul_tokens(swish(tw_pre), w.tw_mlp.out, threads);
    wt = sigmoid(tw_logit);
    v_biased = v;
    v = scale_rows(v, wt);
  }
  const auto k_mem = tg.camera_memory ? concat_tokens(c, k) : k;
  const auto v_mem = tg.camera_memory ? concat_tokens(c, v) : v;
  const auto f_hat = multi_head_attention(q, k_mem, v_mem, config.n_heads, threads);
  const auto po = matmul_tokens(f_hat, w.p_o, threads);
  const auto f_proj = layer_norm(po, w.ln_o);
  const auto lifted = matmul_tokens(f_proj, w.p_l, threads);
  TokenTensor<T> u, gv;
  if (tg.gate) {
    u = matmul_tokens(c, w.p_g1);
    gv = matmul_tokens(c, w.p_g2);
  }

  FusionGradients<T> g{cotangent, TokenTensor<T>(in.f_s.shape()), TokenTensor<T>(in.f_c.shape()),
                       zero_weights<T>(config)};
  std::fill(g.weights.ln_v.gain.begin(), g.weights.ln_v.gain.end(), T(0));
  std::fill(g.weights.ln_s.gain.begin(), g.weights.ln_s.gain.end(), T(0));
  std::fill(g.weights.ln_o.gain.begin(), g.weights.ln_o.gain.end(), T(0));

  const std::size_t N = config.n_frames, Mv = config.m_visual, dv = config.d_visual;
  TokenTensor<T> d_c(N, 1, config.d_attn);

  // f_fused = lifted * gate + f_v
  TokenTensor<T> d_lifted = cotangent;
  if (tg.gate) {
    TokenTensor<T> d_u(N, 1, dv), d_gv(N, 1, dv);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t d = 0; d < dv; ++d) {
        T d_gate = 0;
        for (std::size_t m = 0; m < Mv; ++m) d_gate += cotangent(n, m, d) * lifted(n, m, d);
        const T un = u(n, 0, d);
        const T gate = swish(un) * gv(n, 0, d);
        for (std::size_t m = 0; m < Mv; ++m) d_lifted(n, m, d) *= gate;
        d_u(n, 0, d) = d_gate * gv(n, 0, d) * swish_derivative(un);
        d_gv(n, 0, d) = d_gate * swish(un);
      }
    }
    auto g1 = matmul_tokens_vjp(c, w.p_g1, d_u);
    auto g2 = matmul_tokens_vjp(c, w.p_g2, d_gv);
    g.weights.p_g1 = std::move(g1.map);
    g.weights.p_g2 = std::move(g2.map);
    accumulate(d_c, g1.input);
    accumulate(d_c, g2.input);
  }

  auto gl = matmul_tokens_vjp(f_proj, w.p_l, d_lifted);
  g.weights.p_l = std::move(gl.map);
  auto gln = layer_norm_vjp(po, w.ln_o, gl.input);
  g.weights.ln_o = std::move(gln.params);
  auto go = matmul_tokens_vjp(f_hat, w.p_o, gln.input);
  g.weights.p_o = std::move(go.map);

  auto ga = multi_head_attention_vjp(q, k_mem, v_mem, config.n_heads, go.input, threads);
  TokenTensor<T> d_k = std::move(ga.k), d_v = std::move(ga.v);
  if (tg.camera_memory) {
    auto [dkc, dk] = concat_tokens_vjp(1, d_k);
    auto [dvc, dvv] = concat_tokens_vjp(1, d_v);
    accumulate(d_c, dkc);
    accumulate(d_c, dvc);
    d_k = std::move(dk);
    d_v = std::move(dvv);
  }

  if (tg.token_weight) {
    TokenTensor<T> d_logit(wt.shape());
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t m = 0; m < config.m_spatial; ++m) {
        T dw = 0;
        auto dvr = d_v.row(n, m);
        auto vb = v_biased.row(n, m);
        for (std::size_t e = 0; e < dvr.size(); ++e) dw += dvr[e] * vb[e];
        const T s = wt(n, m, 0);
        d_logit(n, m, 0) = dw * s * (T(1) - s);
        for (T& x : dvr) x *= s;
      }
    auto g_out = matmul_tokens_vjp(swish(tw_pre), w.tw_mlp.out, d_logit);
    auto g_hid = matmul_tokens_vjp(in.f_s, w.tw_mlp.hidden, swish_vjp(tw_pre, g_out.input));
    g.weights.tw_mlp.out = std::move(g_out.map);
    g.weights.tw_mlp.hidden = std::move(g_hid.map);
    accumulate(g.f_s, g_hid.input);
  }

  if (tg.geo_bias) {
    const auto d_bias = add(d_k, d_v);
    auto g_out = matmul_tokens_vjp(swish(geo_pre), w.geo_mlp.out, d_bias);
    auto g_hid = matmul_tokens_vjp(geo_in, w.geo_mlp.hidden, swish_vjp(geo_pre, g_out.input));
    g.weights.geo_mlp.out = std::move(g_out.map);
    g.weights.geo_mlp.hidden = std::move(g_hid.map);
    auto [d_fs, d_cam] = concat_width_vjp(config.d_spatial, g_hid.input);
    accumulate(g.f_s, d_fs);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t m = 0; m < config.m_spatial; ++m) {
        auto src = d_cam.row(n, m);
        auto dst = g.f_c.row(n, 0);
        for (std::size_t e = 0; e < src.size(); ++e) dst[e] += src[e];
      }
  }

  auto gk = matmul_tokens_vjp(xs, w.p_k, d_k);
  auto gvp = matmul_tokens_vjp(xs, w.p_v, d_v);
  g.weights.p_k = std::move(gk.map);
  g.weights.p_v = std::move(gvp.map);
  accumulate(gk.input, gvp.input);
  auto gls = layer_norm_vjp(in.f_s, w.ln_s, gk.input);
  g.weights.ln_s = std::move(gls.params);
  accumulate(g.f_s, gls.input);

  auto gq = matmul_tokens_vjp(xv, w.p_q, ga.q);
  g.weights.p_q = std::move(gq.map);
  auto glv = layer_norm_vjp(in.f_v, w.ln_v, gq.input);
  g.weights.ln_v = std::move(glv.params);
  accumulate(g.f_v, glv.input);

  auto gc = matmul_tokens_vjp(in.f_c, w.p_c, d_c);
  g.weights.p_c = std::move(gc.map);
  accumulate(g.f_c, gc.input);
  return g;
}

}  // namespace cgmf
