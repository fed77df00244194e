#pragma once

// Benchmark scoring: mean relative accuracy for numerical answers, choice
// accuracy, exact match (strict and containment-relaxed) for free text, and
// the per-subtask / per-benchmark aggregation on top of them.
//
// All scores are fractions in [0, 1]. Aggregates use unrounded inputs.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cgmf/errors.hpp"

namespace cgmf::metrics {

enum class AnswerType { numerical, multiple_choice, free_text };

inline const char* to_string(AnswerType t) {
  switch (t) {
    case AnswerType::numerical: return "numerical";
    case AnswerType::multiple_choice: return "multiple_choice";
    case AnswerType::free_text: return "free_text";
  }
  return "?";
}

using Answer = std::variant<double, std::string>;

struct EvalRecord {
  std::string id;
  std::string subtask;
  AnswerType answer_type = AnswerType::numerical;
  Answer prediction;
  Answer ground_truth;
};

struct SubtaskReport {
  std::string subtask;
  double score = 0;
  std::size_t count = 0;
  std::optional<double> refined_score;  // EM@R1 alongside EM@1
};

// ---------------------------------------------------------------------------
// Numerical answers

/// {0.50, 0.55, ..., 0.95}
inline std::vector<double> default_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back((50.0 + 5.0 * k) / 100.0);
  return t;
}

// Relative errors within this distance of a threshold boundary count as on the
// boundary, which fails the strict comparison. Keeps 13/10 and 1.3/1 consistent.
inline constexpr double kBoundarySlack = 1e-9;

/// Fraction of thresholds t with |pred - truth| / |truth| < 1 - t.
inline double mean_relative_accuracy(double pred, double truth, const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw std::invalid_argument("mean_relative_accuracy: no thresholds");
  for (double t : thresholds)
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("mean_relative_accuracy: thresholds must lie in (0, 1)");
  if (!std::isfinite(pred) || !std::isfinite(truth))
    throw ScoringError("mean_relative_accuracy: non-finite value");
  if (truth == 0.0) throw ScoringError("mean_relative_accuracy: ground truth is zero; relative error undefined");
  const double rel = std::abs(pred - truth) / std::abs(truth);
  std::size_t hits = 0;
  for (double t : thresholds)
    if (rel < (1.0 - t) - kBoundarySlack) ++hits;
  return static_cast<double>(hits) / static_cast<double>(thresholds.size());
}

inline double mean_relative_accuracy(double pred, double truth) {
  return mean_relative_accuracy(pred, truth, default_thresholds());
}

// ---------------------------------------------------------------------------
// Multiple choice

/// Accepts "B", "b", "B)", "B.", "B) 3.2 m", "B. chair". Returns the uppercase letter.
inline std::optional<char> parse_choice(std::string_view text) {
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!text.empty() && is_space(text.front())) text.remove_prefix(1);
  while (!text.empty() && is_space(text.back())) text.remove_suffix(1);
  if (text.empty() || !std::isalpha(static_cast<unsigned char>(text[0]))) return std::nullopt;
  const char letter = static_cast<char>(std::toupper(static_cast<unsigned char>(text[0])));
  if (text.size() == 1) return letter;
  if (text[1] == ')' || text[1] == '.') return letter;
  return std::nullopt;
}

inline std::optional<char> answer_choice(const Answer& a) {
  if (const auto* s = std::get_if<std::string>(&a)) return parse_choice(std::string_view(*s));
  return std::nullopt;
}

/// 1 when both sides parse to the same letter. Unparseable sides score 0 and are noted in `log`.
inline double choice_score(const EvalRecord& r, std::vector<std::string>* log = nullptr) {
  const auto pred = answer_choice(r.prediction);
  const auto truth = answer_choice(r.ground_truth);
  if (!pred || !truth) {
    if (log) log->push_back(r.id + ": unparseable " + (pred ? "ground truth" : "prediction") + " choice");
    return 0.0;
  }
  return *pred == *truth ? 1.0 : 0.0;
}

inline double choice_accuracy(const std::vector<EvalRecord>& records, std::vector<std::string>* log = nullptr) {
  if (records.empty()) throw ScoringError("choice_accuracy: empty record set");
  double hits = 0;
  for (const auto& r : records) {
    if (r.answer_type != AnswerType::multiple_choice)
      throw ScoringError("choice_accuracy: record " + r.id + " is not multiple choice");
    hits += choice_score(r, log);
  }
  return hits / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Free text

/// Lowercase, drop ASCII punctuation, collapse whitespace runs, trim.
inline std::string normalize_answer(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::ispunct(c)) continue;
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

namespace detail {

inline std::vector<std::string> words(const std::string& normalized) {
  std::vector<std::string> w;
  std::size_t start = 0;
  while (start < normalized.size()) {
    const auto end = normalized.find(' ', start);
    w.push_back(normalized.substr(start, end == std::string::npos ? std::string::npos : end - start));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return w;
}

// True if `needle` occurs as a contiguous word run inside `hay`.
inline bool contains_words(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

inline std::string answer_text(const Answer& a) {
  if (const auto* s = std::get_if<std::string>(&a)) return *s;
  std::string s = std::to_string(std::get<double>(a));
  return s;
}

}  // namespace detail

/// EM@1 equality of normalized strings; with `refined`, word-level containment in either direction also counts.
inline bool exact_match(std::string_view prediction, std::string_view truth, bool refined) {
  const auto p = normalize_answer(prediction);
  const auto t = normalize_answer(truth);
  if (p == t) return true;
  if (!refined) return false;
  const auto pw = detail::words(p), tw = detail::words(t);
  return detail::contains_words(pw, tw) || detail::contains_words(tw, pw);
}

inline double exact_match(const std::vector<EvalRecord>& records, bool refined) {
  if (records.empty()) throw ScoringError("exact_match: empty record set");
  double hits = 0;
  for (const auto& r : records)
    hits += exact_match(detail::answer_text(r.prediction), detail::answer_text(r.ground_truth), refined) ? 1.0 : 0.0;
  return hits / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Aggregation

struct SpbenchScores {
  double si = 0, mv = 0, overall = 0;
};

/// SI and MV are the means of their NQ and MCQ scores; overall is the mean of SI and MV.
inline SpbenchScores spbench_aggregate(double si_nq, double si_mcq, double mv_nq, double mv_mcq) {
  SpbenchScores s;
  s.si = (si_nq + si_mcq) / 2.0;
  s.mv = (mv_nq + mv_mcq) / 2.0;
  s.overall = (s.si + s.mv) / 2.0;
  return s;
}

enum class Protocol { vsi, sqa3d, spbench };

inline const char* to_string(Protocol p) {
  switch (p) {
    case Protocol::vsi: return "vsi";
    case Protocol::sqa3d: return "sqa3d";
    case Protocol::spbench: return "spbench";
  }
  return "?";
}

inline Protocol parse_protocol(std::string_view s) {
  if (s == "vsi") return Protocol::vsi;
  if (s == "sqa3d") return Protocol::sqa3d;
  if (s == "spbench") return Protocol::spbench;
  throw std::invalid_argument("unknown protocol '" + std::string(s) + "' (expected vsi, sqa3d or spbench)");
}

/// The eight VSI-Bench subtasks in table order: four numerical, then four multiple choice.
inline const std::array<std::string_view, 8>& vsi_subtasks() {
  static const std::array<std::string_view, 8> names{"obj_count", "abs_dist", "obj_size",   "room_size",
                                                     "rel_dist",  "rel_dir",  "route_plan", "appr_order"};
  return names;
}

inline const std::array<std::string_view, 6>& sqa3d_subtasks() {
  static const std::array<std::string_view, 6> names{"what", "is", "how", "can", "which", "others"};
  return names;
}

struct ScoreReport {
  Protocol protocol = Protocol::vsi;
  std::vector<SubtaskReport> subtasks;
  double overall = 0;
  std::map<std::string, double> summary;  // protocol-specific aggregates (em1, em_r1, si, mv, ...)
  std::vector<std::string> excluded;      // records dropped from scoring, with the reason
  std::vector<std::string> warnings;      // scored-as-wrong records worth a look
};

namespace detail {

struct Bucket {
  double total = 0;
  double refined_total = 0;
  std::size_t count = 0;
};

// Per-record score by answer type; nullopt when the record is excluded.
inline std::optional<double> record_score(const EvalRecord& r, ScoreReport& out) {
  switch (r.answer_type) {
    case AnswerType::numerical: {
      const auto* p = std::get_if<double>(&r.prediction);
      const auto* t = std::get_if<double>(&r.ground_truth);
      if (!t) throw ScoringError(r.id + ": numerical record without a numeric ground truth");
      if (*t == 0.0) {
        out.excluded.push_back(r.id + ": ground truth is zero");
        return std::nullopt;
      }
      if (!p || !std::isfinite(*p)) {
        out.warnings.push_back(r.id + ": non-numeric prediction scored 0");
        return 0.0;
      }
      return mean_relative_accuracy(*p, *t);
    }
    case AnswerType::multiple_choice:
      return choice_score(r, &out.warnings);
    case AnswerType::free_text:
      return exact_match(answer_text(r.prediction), answer_text(r.ground_truth), false) ? 1.0 : 0.0;
  }
  return std::nullopt;
}

inline SubtaskReport finish(const std::string& name, const Bucket& b) {
  if (b.count == 0) throw ScoringError("subtask '" + name + "' has no scorable records");
  return {name, b.total / static_cast<double>(b.count), b.count, std::nullopt};
}

}  // namespace detail

/// Scores records under a benchmark protocol.
///
/// vsi:     every record's subtask must be one of vsi_subtasks() and all eight
///          must be present; overall = unweighted mean of the eight subtask scores.
/// sqa3d:   free-text records; subtask = question type from sqa3d_subtasks().
///          overall = EM@1 over all records, summary also carries em_r1.
/// spbench: subtask labels "si/<name>" or "mv/<name>"; NQ/MCQ split by answer
///          type, each a record-level mean; overall per spbench_aggregate.
inline ScoreReport report(const std::vector<EvalRecord>& records, Protocol protocol) {
  ScoreReport out;
  out.protocol = protocol;
  std::map<std::string, detail::Bucket> buckets;

  switch (protocol) {
    case Protocol::vsi: {
      const auto& names = vsi_subtasks();
      for (const auto& r : records) {
        if (std::find(names.begin(), names.end(), r.subtask) == names.end())
          throw ScoringError(r.id + ": unknown vsi subtask '" + r.subtask + "'");
        if (auto s = detail::record_score(r, out)) {
          buckets[r.subtask].total += *s;
          ++buckets[r.subtask].count;
        }
      }
      double sum = 0;
      for (auto name : names) {
        out.subtasks.push_back(detail::finish(std::string(name), buckets[std::string(name)]));
        sum += out.subtasks.back().score;
      }
      out.overall = sum / static_cast<double>(names.size());
      break;
    }
    case Protocol::sqa3d: {
      const auto& names = sqa3d_subtasks();
      if (records.empty()) throw ScoringError("sqa3d: empty record set");
      detail::Bucket all;
      for (const auto& r : records) {
        if (std::find(names.begin(), names.end(), r.subtask) == names.end())
          throw ScoringError(r.id + ": unknown sqa3d question type '" + r.subtask + "'");
        if (r.answer_type != AnswerType::free_text)
          throw ScoringError(r.id + ": sqa3d records must be free_text");
        const auto p = detail::answer_text(r.prediction), t = detail::answer_text(r.ground_truth);
        const double em = exact_match(p, t, false) ? 1.0 : 0.0;
        const double emr = exact_match(p, t, true) ? 1.0 : 0.0;
        for (auto* b : {&buckets[r.subtask], &all}) {
          b->total += em;
          b->refined_total += emr;
          ++b->count;
        }
      }
      for (auto name : names) {
        auto it = buckets.find(std::string(name));
        if (it == buckets.end()) continue;
        auto rep = detail::finish(it->first, it->second);
        rep.refined_score = it->second.refined_total / static_cast<double>(it->second.count);
        out.subtasks.push_back(rep);
      }
      out.overall = all.total / static_cast<double>(all.count);
      out.summary["em1"] = out.overall;
      out.summary["em_r1"] = all.refined_total / static_cast<double>(all.count);
      break;
    }
    case Protocol::spbench: {
      std::map<std::string, detail::Bucket> groups;  // si_nq, si_mcq, mv_nq, mv_mcq
      for (const auto& r : records) {
        const auto slash = r.subtask.find('/');
        const std::string subset = r.subtask.substr(0, slash);
        if ((subset != "si" && subset != "mv") || slash == std::string::npos || slash + 1 == r.subtask.size())
          throw ScoringError(r.id + ": spbench subtask must look like si/<name> or mv/<name>, got '" + r.subtask + "'");
        if (r.answer_type == AnswerType::free_text)
          throw ScoringError(r.id + ": spbench records are numerical or multiple_choice");
        if (auto s = detail::record_score(r, out)) {
          const std::string group = subset + (r.answer_type == AnswerType::numerical ? "_nq" : "_mcq");
          for (auto* b : {&buckets[r.subtask], &groups[group]}) {
            b->total += *s;
            ++b->count;
          }
        }
      }
      for (const auto& [name, b] : buckets) out.subtasks.push_back(detail::finish(name, b));
      for (const char* g : {"si_nq", "si_mcq", "mv_nq", "mv_mcq"})
        out.summary[g] = detail::finish(g, groups[g]).score;
      const auto agg = spbench_aggregate(out.summary["si_nq"], out.summary["si_mcq"], out.summary["mv_nq"],
                                         out.summary["mv_mcq"]);
      out.summary["si"] = agg.si;
      out.summary["mv"] = agg.mv;
      out.overall = agg.overall;
      break;
    }
  }
  out.summary["overall"] = out.overall;
  return out;
}

}  // namespace cgmf::metrics
