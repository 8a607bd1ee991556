#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "icm/consistency.hpp"
#include "icm/dataset.hpp"
#include "icm/predictor.hpp"
#include "icm/random.hpp"
#include "icm/scorer.hpp"
#include "icm/search.hpp"

namespace icm {

inline constexpr std::size_t kBruteForceMaxSize = 16;

struct BruteForceResult {
  Assignment assignment;
  ScoreBreakdown score;
  std::uint64_t evaluated = 0;
};

// Exhaustive search over every complete labeling, scored exactly. Among equal
// utilities the labeling that comes first in label order over sorted ids wins.
inline BruteForceResult brute_force_optimum(const Dataset& ds, LinkSet links, Predictor& predictor, double alpha,
                                            std::size_t context_budget, std::uint64_t seed) {
  const std::size_t n = ds.size();
  if (n > kBruteForceMaxSize)
    throw ConfigError("brute force supports at most " + std::to_string(kBruteForceMaxSize) + " examples");
  auto topo = std::make_shared<const LinkTopology>(std::move(links), n);
  Scorer scorer(ds, topo, predictor, ScorerConfig{alpha, ScoringMode::exact, context_budget, seed});

  const auto order = ds.sorted_indices();
  const std::size_t base = ds.label_space().size();
  std::vector<std::uint16_t> digits(n, 0);  // digits[k] labels order[k]; order[0] is most significant
  BruteForceResult best;
  bool have = false;
  while (true) {
    Assignment a(n);
    for (std::size_t i = 0; i < n; ++i) a.set(i, Label{0});
    for (std::size_t k = 0; k < n; ++k) a.set(order[k], Label{digits[k]});
    auto s = scorer.exact_utility(a);
    ++best.evaluated;
    if (!have || s.utility > best.score.utility) {
      best.assignment = Assignment(n);
      for (std::size_t i = 0; i < n; ++i) best.assignment.set(i, *a.label(i));
      best.score = s;
      have = true;
    }
    std::size_t k = n;
    for (; k > 0; --k) {
      if (++digits[k - 1] < base) break;
      digits[k - 1] = 0;
    }
    if (k == 0) return best;
  }
}

inline BruteForceResult brute_force_optimum(const Dataset& ds, Predictor& predictor, double alpha = 50.0,
                                            std::size_t context_budget = kDefaultContextBudget,
                                            std::uint64_t seed = 0) {
  return brute_force_optimum(ds, derive_links(ds), predictor, alpha, context_budget, seed);
}

// Golden labels with exactly round((1 - target) * N) of them flipped, chosen
// uniformly without replacement.
inline LabelMap perturb_labels(const LabelMap& golden, const LabelSpace& labels, double target_accuracy,
                               std::uint64_t seed) {
  if (!labels.binary()) throw ConfigError("perturb_labels needs a binary label space");
  if (!(target_accuracy >= 0.0 && target_accuracy <= 1.0)) throw ConfigError("target accuracy must lie in [0, 1]");
  for (const auto& g : golden)
    if (!g) throw EvaluationError("perturb_labels needs a golden label for every example");
  const std::size_t n = golden.size();
  const auto flips = static_cast<std::size_t>(std::llround((1.0 - target_accuracy) * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(mix64(seed ^ 0x9e7ULL));
  std::shuffle(idx.begin(), idx.end(), rng);
  LabelMap out = golden;
  for (std::size_t k = 0; k < flips; ++k) {
    auto& l = out[idx[k]];
    l = Label{static_cast<std::uint16_t>(1 - l->index)};
  }
  return out;
}

// K=0 baseline: every example labeled by the argmax of its empty-context
// prediction.
inline Assignment zero_shot_labels(const Dataset& ds, Predictor& predictor) {
  Assignment a(ds.size());
  ContextWindow empty;
  empty.budget = kDefaultContextBudget;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    empty.fingerprint = hash_combine(0x1c3ULL, i);
    a.set(i, predictor.label_distribution(empty, ds[i]).argmax());
  }
  return a;
}

struct Report {
  std::optional<double> accuracy_golden;
  std::optional<double> accuracy_planted;
  double utility = 0.0;
  double mutual_predictability = 0.0;
  std::size_t inconsistency = 0;
  double best_utility = 0.0;
  double acceptance_rate = 0.0;
  double avg_forward_passes = 0.0;
  std::uint64_t forward_passes = 0;
  std::size_t labeled = 0;
  std::size_t size = 0;
  std::size_t iterations = 0;
  std::vector<std::pair<std::string, double>> label_balance;
  double wall_clock_seconds = 0.0;
};

// Run-level figures the trace alone does not carry (e.g. work done after the
// last traced step).
struct RunTotals {
  std::optional<ScoreBreakdown> final_score;
  std::optional<std::uint64_t> forward_passes;
  double wall_clock_seconds = 0.0;
};

inline Report run_report(const std::vector<TraceRecord>& trace, const Assignment& a, const Dataset& ds,
                         const std::optional<LabelMap>& planted = std::nullopt, const RunTotals& totals = {}) {
  Report r;
  r.size = ds.size();
  r.labeled = a.labeled_count();
  r.iterations = trace.size();
  r.wall_clock_seconds = totals.wall_clock_seconds;

  if (planted) r.accuracy_planted = agreement(a, *planted);
  bool any_golden = false;
  for (std::size_t i = 0; i < ds.size(); ++i) any_golden = any_golden || ds[i].has_golden_label();
  if (any_golden) r.accuracy_golden = agreement(a, golden_labels(ds));

  std::size_t accepted = 0;
  for (const auto& t : trace) accepted += t.accepted ? 1 : 0;
  r.acceptance_rate = trace.empty() ? 0.0 : static_cast<double>(accepted) / static_cast<double>(trace.size());
  if (!trace.empty()) {
    r.utility = trace.back().utility;
    r.mutual_predictability = trace.back().mutual_predictability;
    r.inconsistency = trace.back().inconsistency;
    r.forward_passes = trace.back().forward_passes;
    r.best_utility = trace.front().utility;
    for (const auto& t : trace) r.best_utility = std::max(r.best_utility, t.utility);
  }
  if (totals.final_score) {
    r.utility = totals.final_score->utility;
    r.mutual_predictability = totals.final_score->mutual_predictability;
    r.inconsistency = totals.final_score->inconsistency;
    r.best_utility = trace.empty() ? r.utility : std::max(r.best_utility, r.utility);
  }
  if (totals.forward_passes) r.forward_passes = *totals.forward_passes;
  r.avg_forward_passes = r.labeled ? static_cast<double>(r.forward_passes) / static_cast<double>(r.labeled) : 0.0;

  std::vector<std::size_t> counts(ds.label_space().size(), 0);
  a.for_each_labeled([&](std::size_t, Label l) { ++counts[l.index]; });
  for (Label l : ds.label_space().all())
    r.label_balance.emplace_back(ds.label_space().token(l),
                                 r.labeled ? static_cast<double>(counts[l.index]) / static_cast<double>(r.labeled)
                                           : 0.0);
  return r;
}

inline nlohmann::json to_json(const Report& r) {
  nlohmann::json j = {{"utility", r.utility},
                      {"mutual_predictability", r.mutual_predictability},
                      {"inconsistency", r.inconsistency},
                      {"best_utility", r.best_utility},
                      {"acceptance_rate", r.acceptance_rate},
                      {"avg_forward_passes", r.avg_forward_passes},
                      {"forward_passes", r.forward_passes},
                      {"labeled", r.labeled},
                      {"size", r.size},
                      {"iterations", r.iterations},
                      {"wall_clock_seconds", r.wall_clock_seconds}};
  nlohmann::json balance = nlohmann::json::object();
  for (const auto& [tok, frac] : r.label_balance) balance[tok] = frac;
  j["label_balance"] = balance;
  if (r.accuracy_golden) j["accuracy_golden"] = *r.accuracy_golden;
  if (r.accuracy_planted) j["accuracy_planted"] = *r.accuracy_planted;
  return j;
}

// One key=value per line, keys sorted.
inline std::string to_flat(const Report& r) {
  std::map<std::string, std::string> kv;
  const nlohmann::json j = to_json(r);
  for (auto& [k, v] : j.items()) {
    if (v.is_object()) {
      for (auto& [k2, v2] : v.items()) kv[k + "." + k2] = v2.dump();
    } else {
      kv[k] = v.dump();
    }
  }
  std::ostringstream out;
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
  return out.str();
}

}  // namespace icm
