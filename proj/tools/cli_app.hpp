#pragma once

// The `cgmf` command line. run_cli takes argv without the program name so the
// tests can drive it in-process.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cgmf/cgmf.hpp"

namespace cgmf::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kValidation = 3, kCheckFailed = 4, kIo = 5 };

inline constexpr std::size_t kGradcheckParamLimit = 50000;

inline FusionConfig demo_config() {
  FusionConfig c;
  c.n_frames = 32;
  c.m_visual = 1024;
  c.m_spatial = 1369;
  c.d_visual = c.d_spatial = c.d_attn = 64;
  c.n_heads = 8;
  return c;
}

inline FusionConfig gradcheck_config() {
  FusionConfig c;
  c.n_frames = 2;
  c.m_visual = 4;
  c.m_spatial = 6;
  c.d_visual = 8;
  c.d_spatial = 6;
  c.d_attn = 4;
  c.n_heads = 2;
  return c;
}

namespace detail {

struct ToggleFlags {
  bool no_geo_bias = false, no_token_weight = false, no_camera_memory = false, no_gate = false;

  void attach(CLI::App* cmd) {
    cmd->add_flag("--no-geo-bias", no_geo_bias, "Disable the camera-conditioned key/value bias");
    cmd->add_flag("--no-token-weight", no_token_weight, "Disable per-token value weights");
    cmd->add_flag("--no-camera-memory", no_camera_memory, "Do not prepend the camera slot to memory");
    cmd->add_flag("--no-gate", no_gate, "Replace the camera gate with ones");
  }
  void apply(FusionConfig& c) const {
    if (no_geo_bias) c.toggles.geo_bias = false;
    if (no_token_weight) c.toggles.token_weight = false;
    if (no_camera_memory) c.toggles.camera_memory = false;
    if (no_gate) c.toggles.gate = false;
  }
};

inline io::RunConfig config_or(const std::string& path, const FusionConfig& fallback) {
  if (!path.empty()) return io::load_config(path);
  return {fallback, 0};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline void print_timings(std::ostream& out, const StageTimings& t, std::size_t tokens) {
  out << std::fixed << std::setprecision(3);
  out << "stage            ms\n";
  out << "project      " << std::setw(10) << 1e3 * t.project << "\n";
  out << "geo_bias     " << std::setw(10) << 1e3 * t.geo_bias << "\n";
  out << "token_weight " << std::setw(10) << 1e3 * t.token_weight << "\n";
  out << "attend       " << std::setw(10) << 1e3 * t.attend << "\n";
  out << "gate_fuse    " << std::setw(10) << 1e3 * t.gate_fuse << "\n";
  out << "total        " << std::setw(10) << 1e3 * t.total() << "\n";
  out << std::setprecision(0) << "throughput   " << static_cast<double>(tokens) / t.total() << " visual tokens/s\n";
  out.unsetf(std::ios::floatfield);
  out << std::setprecision(6);
}

template <typename T>
double max_abs_diff(const TokenTensor<T>& a, const TokenTensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.values()[i] - b.values()[i])));
  return m;
}

template <typename T>
double frobenius(const TokenTensor<T>& a) {
  double s = 0;
  for (T v : a.values()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

}  // namespace detail

inline int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app("Camera-guided fusion of visual and spatial token streams", "cgmf");
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  // gen
  std::string gen_config, gen_out, gen_dist = "gaussian";
  std::optional<std::uint64_t> gen_seed;
  bool gen_f32 = false;
  auto* gen = app.add_subcommand("gen", "Write a synthetic token-stream file");
  gen->add_option("--config", gen_config, "Run config (JSON)")->required();
  gen->add_option("--seed", gen_seed, "Stream seed (default: config seed)");
  gen->add_option("--out", gen_out, "Output container")->required();
  gen->add_option("--dist", gen_dist, "Token distribution")->check(CLI::IsMember({"gaussian", "unit_sphere"}));
  gen->add_flag("--f32", gen_f32, "Store as 32-bit floats");

  // init
  std::string init_config, init_out;
  std::optional<std::uint64_t> init_seed;
  bool init_zero_gate = false, init_zero_output = false, init_f32 = false;
  auto* init = app.add_subcommand("init", "Write a seeded weight file");
  init->add_option("--config", init_config, "Run config (JSON)")->required();
  init->add_option("--seed", init_seed, "Weight seed (default: config seed)");
  init->add_option("--out", init_out, "Output container")->required();
  init->add_flag("--zero-gate", init_zero_gate, "Zero the first gate projection (module becomes the identity)");
  init->add_flag("--zero-output", init_zero_output, "Zero the output lift");
  init->add_flag("--f32", init_f32, "Store as 32-bit floats");

  // fuse
  std::string fuse_config, fuse_weights, fuse_input, fuse_out;
  std::optional<std::uint64_t> fuse_seed;
  unsigned fuse_threads = 1;
  detail::ToggleFlags fuse_toggles;
  auto* fuse_cmd = app.add_subcommand("fuse", "Run the fusion module on a token stream");
  fuse_cmd->add_option("--config", fuse_config, "Run config (JSON)")->required();
  fuse_cmd->add_option("--weights", fuse_weights, "Weight file (default: seeded init from the config seed)");
  auto* fuse_in_opt = fuse_cmd->add_option("--input", fuse_input, "Token-stream file");
  auto* fuse_seed_opt = fuse_cmd->add_option("--seed", fuse_seed, "Synthesize the input stream from this seed");
  fuse_in_opt->excludes(fuse_seed_opt);
  fuse_cmd->add_option("--out", fuse_out, "Output container for f_fused");
  fuse_cmd->add_option("--threads", fuse_threads, "Worker threads")->check(CLI::PositiveNumber);
  fuse_toggles.attach(fuse_cmd);

  // gradcheck
  std::string gc_config, gc_fault;
  std::optional<std::uint64_t> gc_seed;
  double gc_tol = 1e-5;
  detail::ToggleFlags gc_toggles;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  gc->add_option("--config", gc_config, "Run config (default: N=2 Mv=4 Ms=6 dv=8 ds=6 da=4 h=2)");
  gc->add_option("--seed", gc_seed, "Seed for inputs, weights and cotangent");
  gc->add_option("--tolerance", gc_tol, "Maximum relative error per group")->check(CLI::NonNegativeNumber);
  gc->add_option("--inject-vjp-fault", gc_fault, "Scale one group's analytic gradient by 1.01")->group("");
  gc_toggles.attach(gc);

  // ablate
  std::string ab_config, ab_out;
  std::optional<std::uint64_t> ab_seed;
  auto* ab = app.add_subcommand("ablate", "Run the four ablation rows on identical inputs");
  ab->add_option("--config", ab_config, "Run config (JSON)")->required();
  ab->add_option("--seed", ab_seed, "Seed for inputs and weights");
  ab->add_option("--out", ab_out, "Write the table as JSON");

  // score
  std::string sc_records, sc_protocol, sc_out;
  auto* sc = app.add_subcommand("score", "Score a prediction file (JSON lines)");
  sc->add_option("--records", sc_records, "Records file")->required();
  sc->add_option("--protocol", sc_protocol, "Benchmark protocol")
      ->required()
      ->check(CLI::IsMember({"vsi", "sqa3d", "spbench"}));
  sc->add_option("--out", sc_out, "Write the report as JSON");

  // bench
  std::string bn_config;
  std::size_t bn_reps = 5;
  unsigned bn_threads = 1;
  bool bn_f32 = false;
  std::uint64_t bn_seed = 0;
  auto* bn = app.add_subcommand("bench", "Time repeated fuse passes");
  bn->add_option("--config", bn_config, "Run config (default: N=32 Mv=1024 Ms=1369, widths 64, h=8)");
  bn->add_option("--reps", bn_reps, "Repetitions")->check(CLI::PositiveNumber);
  bn->add_option("--threads", bn_threads, "Worker threads")->check(CLI::PositiveNumber);
  bn->add_option("--seed", bn_seed, "Seed for inputs and weights");
  bn->add_flag("--f32", bn_f32, "Compute in 32-bit floats");

  try {
    std::vector<std::string> reversed(argv.rbegin(), argv.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "cgmf: " << e.what() << "\n";
    if (auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front())
      err << "run 'cgmf " << (sub == &app ? std::string() : sub->get_name() + " ") << "--help' for usage\n";
    return kUsage;
  }

  try {
    if (gen->parsed()) {
      const auto rc = io::load_config(gen_config);
      const auto dist = gen_dist == "unit_sphere" ? pipeline::TokenDistribution::unit_sphere
                                                  : pipeline::TokenDistribution::gaussian;
      const auto in = pipeline::synth_tokens<double>(rc.fusion, gen_seed.value_or(rc.seed), dist);
      io::save_inputs(in, gen_out, gen_f32 ? io::DType::f32 : io::DType::f64);
      out << "wrote " << gen_out << ": f_v " << to_string(in.f_v.shape()) << ", f_s " << to_string(in.f_s.shape())
          << ", f_c " << to_string(in.f_c.shape()) << ", f_register " << to_string(in.f_register->shape()) << "\n";
      return kOk;
    }

    if (init->parsed()) {
      const auto rc = io::load_config(init_config);
      auto w = init_weights<double>(rc.fusion, init_seed.value_or(rc.seed), {.zero_output_projection = init_zero_output});
      if (init_zero_gate) {
        std::fill(w.p_g1.weight.begin(), w.p_g1.weight.end(), 0.0);
        std::fill(w.p_g1.bias.begin(), w.p_g1.bias.end(), 0.0);
      }
      io::save_weights(w, init_out, init_f32 ? io::DType::f32 : io::DType::f64);
      out << "wrote " << init_out << ": " << parameter_count(w) << " parameters\n";
      return kOk;
    }

    if (fuse_cmd->parsed()) {
      if (fuse_input.empty() == !fuse_seed.has_value()) {
        err << "cgmf fuse: give exactly one of --input FILE or --seed N\n";
        return kUsage;
      }
      auto rc = io::load_config(fuse_config);
      fuse_toggles.apply(rc.fusion);
      rc.fusion.validate();
      const auto in = fuse_input.empty() ? pipeline::synth_tokens<double>(rc.fusion, *fuse_seed)
                                         : io::load_inputs<double>(fuse_input);
      const auto w = fuse_weights.empty() ? init_weights<double>(rc.fusion, rc.seed)
                                          : io::load_weights<double>(fuse_weights, rc.fusion);
      StageTimings t;
      const auto fused = fuse(in, w, rc.fusion, {.threads = fuse_threads, .timings = &t});
      if (!fuse_out.empty()) {
        io::TensorContainer c;
        c.attributes()["kind"] = "cgmf-fused";
        io::add_tensor(c, "f_fused", fused, io::DType::f64);
        c.save(fuse_out);
        out << "wrote " << fuse_out << ": f_fused " << to_string(fused.shape()) << "\n";
      }
      detail::print_timings(out, t, rc.fusion.n_frames * rc.fusion.m_visual);
      return kOk;
    }

    if (gc->parsed()) {
      auto rc = detail::config_or(gc_config, gradcheck_config());
      gc_toggles.apply(rc.fusion);
      rc.fusion.validate();
      const std::size_t params = parameter_count(rc.fusion);
      if (params > kGradcheckParamLimit) {
        err << "cgmf gradcheck: config has " << params << " parameters; finite differences are only run up to "
            << kGradcheckParamLimit << ". Shrink d_visual/d_spatial/d_attn (8 is plenty) and retry.\n";
        return kValidation;
      }
      const std::uint64_t seed = gc_seed.value_or(rc.seed);
      const auto in = pipeline::synth_tokens<double>(rc.fusion, seed);
      const auto w = init_weights<double>(rc.fusion, seed + 1);
      const auto cot = pipeline::synth_tokens<double>(rc.fusion, seed + 2).f_v;
      const auto report = gradcheck(in, w, rc.fusion, cot, {.corrupt_group = gc_fault});
      out << std::left << std::setw(20) << "group" << std::right << std::setw(8) << "count" << std::setw(14)
          << "max|grad|" << std::setw(14) << "rel.err" << "\n";
      out << std::scientific << std::setprecision(3);
      for (const auto& g : report.groups)
        out << std::left << std::setw(20) << g.name << std::right << std::setw(8) << g.count << std::setw(14)
            << g.max_abs_gradient << std::setw(14) << g.relative_error
            << (g.relative_error < gc_tol ? "" : "  FAIL") << "\n";
      out << "worst " << report.worst() << " vs tolerance " << gc_tol << ": "
          << (report.passed(gc_tol) ? "PASS" : "FAIL") << "\n";
      out.unsetf(std::ios::floatfield);
      return report.passed(gc_tol) ? kOk : kCheckFailed;
    }

    if (ab->parsed()) {
      const auto rc = io::load_config(ab_config);
      const std::uint64_t seed = ab_seed.value_or(rc.seed);
      const auto in = pipeline::synth_tokens<double>(rc.fusion, seed);
      const auto w = init_weights<double>(rc.fusion, seed + 1);
      std::vector<TokenTensor<double>> outs;
      for (auto v : kFusionVariants) outs.push_back(run_variant(v, in, w, rc.fusion));

      nlohmann::json table = nlohmann::json::array();
      out << std::left << std::setw(22) << "variant" << std::right << std::setw(14) << "||out||" << std::setw(14)
          << "||out-f_v||";
      for (std::size_t j = 0; j < outs.size(); ++j) out << std::setw(12) << ("vs " + std::to_string(j));
      out << "\n" << std::scientific << std::setprecision(4);
      for (std::size_t i = 0; i < outs.size(); ++i) {
        const auto v = kFusionVariants[i];
        TokenTensor<double> delta = outs[i];
        for (std::size_t k = 0; k < delta.size(); ++k) delta.values()[k] -= in.f_v.values()[k];
        nlohmann::json row{{"variant", variant_label(v)},
                           {"norm", detail::frobenius(outs[i])},
                           {"delta_norm", detail::frobenius(delta)}};
        out << std::left << std::setw(22) << (std::to_string(i) + " " + variant_label(v)) << std::right
            << std::setw(14) << row["norm"].get<double>() << std::setw(14) << row["delta_norm"].get<double>();
        for (std::size_t j = 0; j < outs.size(); ++j) {
          const double d = detail::max_abs_diff(outs[i], outs[j]);
          row["max_diff"][variant_label(kFusionVariants[j])] = d;
          out << std::setw(12) << std::setprecision(2) << d;
        }
        out << std::setprecision(4) << "\n";
        table.push_back(row);
      }
      out.unsetf(std::ios::floatfield);
      out << std::setprecision(6);
      if (!ab_out.empty()) {
        std::ofstream f(ab_out);
        if (!f) throw IoError("cannot open '" + ab_out + "' for writing");
        f << nlohmann::json{{"seed", seed}, {"rows", table}}.dump(2) << "\n";
      }
      return kOk;
    }

    if (sc->parsed()) {
      const auto records = io::load_records(sc_records);
      const auto rep = metrics::report(records, metrics::parse_protocol(sc_protocol));
      out << std::fixed << std::setprecision(4);
      for (const auto& s : rep.subtasks) {
        out << std::left << std::setw(24) << s.subtask << std::right << std::setw(8) << s.score;
        if (s.refined_score) out << std::setw(8) << *s.refined_score;
        out << "  (n=" << s.count << ")\n";
      }
      for (const auto& [k, v] : rep.summary) out << std::left << std::setw(24) << k << std::right << std::setw(8) << v << "\n";
      out.unsetf(std::ios::floatfield);
      out << std::setprecision(6);
      for (const auto& e : rep.excluded) err << "excluded " << e << "\n";
      for (const auto& w : rep.warnings) err << "warning " << w << "\n";
      if (!sc_out.empty()) {
        std::ofstream f(sc_out);
        if (!f) throw IoError("cannot open '" + sc_out + "' for writing");
        f << io::report_to_json(rep).dump(2) << "\n";
      }
      return kOk;
    }

    if (bn->parsed()) {
      const auto rc = detail::config_or(bn_config, demo_config());
      const auto& c = rc.fusion;
      auto run = [&]<typename T>(T) {
        const auto in = pipeline::synth_tokens<T>(c, bn_seed);
        const auto w = init_weights<T>(c, bn_seed + 1);
        std::vector<double> samples;
        StageTimings last;
        for (std::size_t r = 0; r < bn_reps; ++r) {
          StageTimings t;
          const auto t0 = std::chrono::steady_clock::now();
          const auto fused = fuse(in, w, c, {.threads = bn_threads, .timings = &t});
          samples.push_back(detail::seconds_since(t0));
          if (!all_finite(fused)) throw std::runtime_error("non-finite output");
          last = t;
        }
        return std::pair{samples, last};
      };
      const auto [samples, last] = bn_f32 ? run(float{}) : run(double{});
      const double median = detail::percentile(samples, 0.5);
      const std::size_t tokens = c.n_frames * c.m_visual;
      out << "config N=" << c.n_frames << " Mv=" << c.m_visual << " Ms=" << c.m_spatial << " dv=" << c.d_visual
          << " ds=" << c.d_spatial << " da=" << c.d_attn << " h=" << c.n_heads << ", " << (bn_f32 ? "f32" : "f64")
          << ", threads=" << bn_threads << ", reps=" << samples.size() << "\n";
      out << std::fixed << std::setprecision(3);
      out << "median " << median << " s, p95 " << detail::percentile(samples, 0.95) << " s, min "
          << *std::min_element(samples.begin(), samples.end()) << " s\n";
      out << std::setprecision(0) << "throughput " << static_cast<double>(tokens) / median << " visual tokens/s\n";
      out.unsetf(std::ios::floatfield);
      out << std::setprecision(6) << "last run by stage:\n";
      detail::print_timings(out, last, tokens);
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "cgmf: invalid config: " << e.what() << "\n";
    return kValidation;
  } catch (const SchemaError& e) {
    err << "cgmf: " << e.what() << "\n";
    return kValidation;
  } catch (const IoError& e) {
    err << "cgmf: " << e.what() << "\n";
    return kIo;
  } catch (const DimensionError& e) {
    err << "cgmf: shape mismatch: " << e.what() << "\n";
    return kValidation;
  } catch (const ScoringError& e) {
    err << "cgmf: scoring failed: " << e.what() << "\n";
    return kValidation;
  } catch (const std::invalid_argument& e) {
    err << "cgmf: " << e.what() << "\n";
    return kValidation;
  }
  return kUsage;
}

}  // namespace cgmf::cli
