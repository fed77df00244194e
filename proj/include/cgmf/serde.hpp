#pragma once

// Weights, token streams, run configs and evaluation records on disk.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cgmf/container.hpp"
#include "cgmf/fusion.hpp"
#include "cgmf/metrics.hpp"
#include "json.hpp"

namespace cgmf::io {

enum class LoadMode { strict, permissive };

inline constexpr const char* kWeightsKind = "cgmf-weights";
inline constexpr const char* kTokensKind = "cgmf-tokens";

// ---------------------------------------------------------------------------
// Weights

template <typename T>
TensorContainer weights_container(const CGMFWeights<T>& w, DType dtype = DType::f64) {
  TensorContainer c;
  c.attributes()["kind"] = kWeightsKind;
  for_each_parameter(w, [&](const std::string& name, auto values, std::vector<std::size_t> shape) {
    c.add<T>(name, values, std::move(shape), dtype);
  });
  c.attributes()["epsilon"] = {{"ln_v", w.ln_v.epsilon}, {"ln_s", w.ln_s.epsilon}, {"ln_o", w.ln_o.epsilon}};
  return c;
}

template <typename T>
void save_weights(const CGMFWeights<T>& w, const std::filesystem::path& path, DType dtype = DType::f64) {
  weights_container(w, dtype).save(path);
}

/// Rebuilds weights for `expected`, checking every tensor's presence and shape.
template <typename T>
CGMFWeights<T> weights_from_container(const TensorContainer& c, const FusionConfig& expected,
                                      LoadMode mode = LoadMode::strict) {
  if (c.attributes().value("kind", std::string()) != kWeightsKind)
    throw SchemaError("container is not a weights file (kind != " + std::string(kWeightsKind) + ")");
  CGMFWeights<T> w = zero_weights<T>(expected);
  std::set<std::string> known;
  for_each_parameter(w, [&](const std::string& name, std::span<T> values, const std::vector<std::size_t>& shape) {
    known.insert(name);
    const auto* rec = c.find(name);
    if (!rec) throw SchemaError("tensor '" + name + "' missing from weights file");
    if (rec->shape != shape) {
      std::ostringstream msg;
      msg << "tensor '" << name << "' has shape " << nlohmann::json(rec->shape).dump() << ", config expects "
          << nlohmann::json(shape).dump();
      throw SchemaError(msg.str());
    }
    const auto decoded = c.values<T>(name);
    std::copy(decoded.begin(), decoded.end(), values.begin());
  });
  if (mode == LoadMode::strict) {
    std::string extra;
    for (const auto& t : c.tensors())
      if (!known.count(t.name)) extra += (extra.empty() ? "" : ", ") + t.name;
    if (!extra.empty()) throw SchemaError("unknown tensors in weights file: " + extra);
  }
  const auto& eps = c.attributes().value("epsilon", nlohmann::json::object());
  auto read_eps = [&](const char* key, LayerNormParams<T>& p) {
    if (!eps.contains(key)) return;
    const auto v = eps[key].get<double>();
    if (!(v > 0)) throw SchemaError(std::string("epsilon for ") + key + " must be positive");
    p.epsilon = static_cast<T>(v);
  };
  read_eps("ln_v", w.ln_v);
  read_eps("ln_s", w.ln_s);
  read_eps("ln_o", w.ln_o);
  return w;
}

template <typename T>
CGMFWeights<T> load_weights(const std::filesystem::path& path, const FusionConfig& expected,
                            LoadMode mode = LoadMode::strict) {
  const auto c = TensorContainer::load(path);
  try {
    return weights_from_container<T>(c, expected, mode);
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Token streams

template <typename T>
void add_tensor(TensorContainer& c, const std::string& name, const TokenTensor<T>& t, DType dtype) {
  c.add<T>(name, t.values(), {t.frames(), t.tokens(), t.width()}, dtype);
}

template <typename T>
TokenTensor<T> read_tensor(const TensorContainer& c, const std::string& name) {
  const auto& rec = c.at(name);
  if (rec.shape.size() != 3) throw SchemaError("tensor '" + name + "' is not rank 3");
  return TokenTensor<T>(Shape3{rec.shape[0], rec.shape[1], rec.shape[2]}, c.values<T>(name));
}

template <typename T>
void save_inputs(const FusionInputs<T>& in, const std::filesystem::path& path, DType dtype = DType::f64) {
  TensorContainer c;
  c.attributes()["kind"] = kTokensKind;
  add_tensor(c, "f_v", in.f_v, dtype);
  add_tensor(c, "f_s", in.f_s, dtype);
  add_tensor(c, "f_c", in.f_c, dtype);
  if (in.f_register) add_tensor(c, "f_register", *in.f_register, dtype);
  c.save(path);
}

template <typename T>
FusionInputs<T> load_inputs(const std::filesystem::path& path) {
  const auto c = TensorContainer::load(path);
  try {
    FusionInputs<T> in{read_tensor<T>(c, "f_v"), read_tensor<T>(c, "f_s"), read_tensor<T>(c, "f_c"), std::nullopt};
    if (c.contains("f_register")) in.f_register = read_tensor<T>(c, "f_register");
    return in;
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Run config
//
//   {
//     "n_frames": 2, "m_visual": 4, "m_spatial": 6,
//     "d_visual": 8, "d_spatial": 6, "d_attn": 4, "n_heads": 2,
//     "seed": 0,
//     "toggles": {"geo_bias": true, "token_weight": true,
//                 "camera_memory": true, "gate": true}
//   }
//
// "seed" and "toggles" (and each toggle) are optional; everything else is required.

struct RunConfig {
  FusionConfig fusion;
  std::uint64_t seed = 0;
};

inline RunConfig config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("", "config must be a JSON object");
  static const std::set<std::string> allowed{"n_frames", "m_visual",  "m_spatial", "d_visual", "d_spatial",
                                             "d_attn",   "n_heads",   "seed",      "toggles"};
  for (const auto& [key, _] : doc.items())
    if (!allowed.count(key)) throw ConfigError(key, "unknown field");

  auto count = [&](const char* key) -> std::size_t {
    if (!doc.contains(key)) throw ConfigError(key, "required field missing");
    const auto& v = doc[key];
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
      throw ConfigError(key, "must be a non-negative integer, got " + v.dump());
    return v.get<std::size_t>();
  };
  RunConfig rc;
  auto& f = rc.fusion;
  f.n_frames = count("n_frames");
  f.m_visual = count("m_visual");
  f.m_spatial = count("m_spatial");
  f.d_visual = count("d_visual");
  f.d_spatial = count("d_spatial");
  f.d_attn = count("d_attn");
  f.n_heads = count("n_heads");
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned()) throw ConfigError("seed", "must be a non-negative integer");
    rc.seed = doc["seed"].get<std::uint64_t>();
  }
  if (doc.contains("toggles")) {
    const auto& t = doc["toggles"];
    if (!t.is_object()) throw ConfigError("toggles", "must be an object");
    for (const auto& [key, v] : t.items()) {
      bool* slot = key == "geo_bias"        ? &f.toggles.geo_bias
                   : key == "token_weight"  ? &f.toggles.token_weight
                   : key == "camera_memory" ? &f.toggles.camera_memory
                   : key == "gate"          ? &f.toggles.gate
                                            : nullptr;
      if (!slot) throw ConfigError("toggles." + key, "unknown toggle");
      if (!v.is_boolean()) throw ConfigError("toggles." + key, "must be true or false");
      *slot = v.get<bool>();
    }
  }
  f.validate();
  return rc;
}

inline nlohmann::json config_to_json(const RunConfig& rc) {
  const auto& f = rc.fusion;
  return {{"n_frames", f.n_frames},
          {"m_visual", f.m_visual},
          {"m_spatial", f.m_spatial},
          {"d_visual", f.d_visual},
          {"d_spatial", f.d_spatial},
          {"d_attn", f.d_attn},
          {"n_heads", f.n_heads},
          {"seed", rc.seed},
          {"toggles",
           {{"geo_bias", f.toggles.geo_bias},
            {"token_weight", f.toggles.token_weight},
            {"camera_memory", f.toggles.camera_memory},
            {"gate", f.toggles.gate}}}};
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("", path.string() + ": not valid JSON: " + e.what());
  }
  return config_from_json(doc);
}

inline void save_config(const RunConfig& rc, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << config_to_json(rc).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Evaluation records: one JSON object per line,
//   {"id": "...", "subtask": "...", "answer_type": "numerical"|"multiple_choice"|"free_text",
//    "prediction": <number|string>, "ground_truth": <number|string>}
// Blank lines are skipped. Numerical answers may be given as numeric strings.

inline metrics::EvalRecord record_from_json(const nlohmann::json& j) {
  using metrics::AnswerType;
  if (!j.is_object()) throw std::invalid_argument("record must be a JSON object");
  for (const char* key : {"id", "subtask", "answer_type", "prediction", "ground_truth"})
    if (!j.contains(key)) throw std::invalid_argument(std::string("missing field '") + key + "'");
  metrics::EvalRecord r;
  r.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
  r.subtask = j.at("subtask").get<std::string>();
  const auto type = j.at("answer_type").get<std::string>();
  if (type == "numerical")
    r.answer_type = AnswerType::numerical;
  else if (type == "multiple_choice")
    r.answer_type = AnswerType::multiple_choice;
  else if (type == "free_text")
    r.answer_type = AnswerType::free_text;
  else
    throw std::invalid_argument("unknown answer_type '" + type + "'");

  auto answer = [&](const nlohmann::json& v, bool is_truth) -> metrics::Answer {
    if (r.answer_type == AnswerType::numerical) {
      if (v.is_number()) return v.get<double>();
      if (v.is_string()) {
        const auto s = v.get<std::string>();
        try {
          std::size_t used = 0;
          const double d = std::stod(s, &used);
          if (used == s.size()) return d;
        } catch (const std::exception&) {
        }
        if (is_truth) throw std::invalid_argument("numerical ground_truth '" + s + "' is not a number");
        return s;  // scored as a miss
      }
      throw std::invalid_argument("numerical answers must be numbers");
    }
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) return v.dump();
    throw std::invalid_argument("answers must be strings or numbers");
  };
  r.prediction = answer(j["prediction"], false);
  r.ground_truth = answer(j["ground_truth"], true);
  return r;
}

inline std::vector<metrics::EvalRecord> parse_records(std::istream& in, const std::string& source = "<records>") {
  std::vector<metrics::EvalRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw IoError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<metrics::EvalRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open records '" + path.string() + "'");
  return parse_records(in, path.string());
}

inline nlohmann::json report_to_json(const metrics::ScoreReport& r) {
  nlohmann::json j;
  j["protocol"] = metrics::to_string(r.protocol);
  j["overall"] = r.overall;
  j["summary"] = r.summary;
  j["subtasks"] = nlohmann::json::array();
  for (const auto& s : r.subtasks) {
    nlohmann::json e{{"subtask", s.subtask}, {"score", s.score}, {"count", s.count}};
    if (s.refined_score) e["refined_score"] = *s.refined_score;
    j["subtasks"].push_back(e);
  }
  j["excluded"] = r.excluded;
  j["warnings"] = r.warnings;
  return j;
}

}  // namespace cgmf::io
