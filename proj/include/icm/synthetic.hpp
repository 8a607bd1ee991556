#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "icm/dataset.hpp"
#include "icm/predictor.hpp"
#include "icm/random.hpp"

namespace icm {

enum class OracleMode { planted_concept, majority_bias, non_salient };

inline std::string_view to_string(OracleMode m) {
  switch (m) {
    case OracleMode::planted_concept: return "planted_concept";
    case OracleMode::majority_bias: return "majority_bias";
    case OracleMode::non_salient: return "non_salient";
  }
  return "planted_concept";
}

inline OracleMode parse_oracle_mode(std::string_view s) {
  if (s == "planted_concept" || s == "planted") return OracleMode::planted_concept;
  if (s == "majority_bias" || s == "majority") return OracleMode::majority_bias;
  if (s == "non_salient") return OracleMode::non_salient;
  throw ConfigError("unknown oracle mode: " + std::string(s));
}

struct SyntheticTaskSpec {
  std::size_t size = 8;
  std::uint64_t planted_seed = 0;
  OracleMode oracle_mode = OracleMode::planted_concept;
  double smoothing = 1.0;
  double link_fraction = 1.0;
  // Share of the oracle's in-context inference driven by recognizing its own
  // concept rather than copying the demonstrated labels. 0 gives the pure
  // Laplace rule (s + k) / (2s + n); the rule is unchanged whenever every
  // context label agrees with the concept.
  double salience = 0.75;

  void validate() const {
    if (size < 2) throw ConfigError("synthetic task needs at least 2 examples");
    if (!(link_fraction >= 0.0 && link_fraction <= 1.0)) throw ConfigError("link_fraction must lie in [0, 1]");
    if (!(smoothing > 0.0)) throw ConfigError("smoothing must be positive");
    if (!(salience >= 0.0 && salience <= 1.0)) throw ConfigError("salience must lie in [0, 1]");
  }
};

struct SyntheticTask {
  Dataset dataset;
  LabelMap planted;  // ground truth the harness scores against
  LabelMap hidden;  // labeling the oracle itself recognizes
};

namespace detail {

// Labels respecting the pairing: exactly one True per pair, coin flips elsewhere.
inline LabelMap draw_paired_labels(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                                   Rng& rng) {
  LabelMap out(n);
  std::bernoulli_distribution coin(0.5);
  for (auto [fwd, rev] : pairs) {
    const bool fwd_true = coin(rng);
    out[fwd] = Label{static_cast<std::uint16_t>(fwd_true ? 0 : 1)};
    out[rev] = Label{static_cast<std::uint16_t>(fwd_true ? 1 : 0)};
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!out[i]) out[i] = Label{static_cast<std::uint16_t>(coin(rng) ? 0 : 1)};
  return out;
}

}  // namespace detail

// Deterministic in the spec. Pairs floor(link_fraction * N / 2) random pairs
// of examples as asymmetry partners; planted labels never set both to True.
inline SyntheticTask generate_synthetic_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  const std::size_t n = spec.size;
  const std::size_t width = std::to_string(n - 1).size();
  auto make_id = [&](std::size_t i) {
    std::string digits = std::to_string(i);
    return "s" + std::string(width - digits.size(), '0') + digits;
  };

  Rng rng(derive_seed(spec.planted_seed, 0, 0, 0x5e7));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_pairs = static_cast<std::size_t>(std::floor(spec.link_fraction * static_cast<double>(n) / 2.0));
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t p = 0; p < n_pairs; ++p) {
    std::size_t a = perm[2 * p], b = perm[2 * p + 1];
    pairs.emplace_back(std::min(a, b), std::max(a, b));
  }

  std::vector<Example> examples(n);
  for (std::size_t i = 0; i < n; ++i) {
    examples[i].id = make_id(i);
    examples[i].claim_text = "Claim: item " + examples[i].id + " has the target property.\nI think this Claim is";
  }
  for (auto [fwd, rev] : pairs) {
    const std::string a = examples[fwd].id, b = examples[rev].id;
    examples[fwd].claim_text = "Claim: Response " + a + " is better than Response " + b + ".\nI think this Claim is";
    examples[rev].claim_text = "Claim: Response " + b + " is better than Response " + a + ".\nI think this Claim is";
    examples[fwd].partner_id = b;
    examples[fwd].orientation = Orientation::forward;
    examples[rev].partner_id = a;
    examples[rev].orientation = Orientation::reverse;
  }

  SyntheticTask task;
  task.planted = detail::draw_paired_labels(n, pairs, rng);
  if (spec.oracle_mode == OracleMode::non_salient) {
    // The oracle's own concept comes from an unrelated stream.
    Rng concept_rng(derive_seed(spec.planted_seed, 0, 0, 0xc0c));
    task.hidden = detail::draw_paired_labels(n, pairs, concept_rng);
  } else {
    task.hidden = task.planted;
  }
  for (std::size_t i = 0; i < n; ++i) examples[i].set_golden_label(task.planted[i]);
  task.dataset = Dataset(std::move(examples), LabelSpace{});
  return task;
}

// Oracle that recognizes a hidden concept f. With k of n context labels
// agreeing with f and smoothing s:
//   P(f(target)) = (s + k + salience * (n - k)) / (|Y| s + n)
// and the remaining mass is split evenly over the other labels.
class ConceptOracle final : public Predictor {
 public:
  ConceptOracle(LabelSpace labels, std::unordered_map<std::string, Label> hidden, double smoothing,
                double salience, std::string name = "oracle:planted_concept")
      : Predictor(std::move(labels)),
        hidden_(std::move(hidden)),
        smoothing_(smoothing),
        salience_(salience),
        name_(std::move(name)) {}

  std::string identity() const override { return name_; }
  bool pure() const override { return true; }
  std::size_t max_in_flight() const override { return 64; }

  Label concept_of(const std::string& id) const { return hidden_.at(id); }

 protected:
  Prediction query(const ContextWindow& context, const Example& target) override {
    const double n = static_cast<double>(context.size());
    double k = 0.0;
    for (const auto& e : context.entries)
      if (hidden_.at(e.example->id) == e.label) k += 1.0;
    const std::size_t n_labels = label_space().size();
    const double total = static_cast<double>(n_labels) * smoothing_ + n;
    const double favoured = (smoothing_ + k + salience_ * (n - k)) / total;
    const double other = (smoothing_ + (1.0 - salience_) * (n - k) / static_cast<double>(n_labels - 1)) / total;
    const Label f = hidden_.at(target.id);
    std::vector<double> p(n_labels, other);
    p[f.index] = favoured;
    Prediction out = from_probabilities(p);
    out.forward_pass_cost = 1;
    return out;
  }

 private:
  std::unordered_map<std::string, Label> hidden_;
  double smoothing_;
  double salience_;
  std::string name_;
};

// Ignores the target: P(l) = (s + count of l in context) / (|Y| s + n).
class MajorityOracle final : public Predictor {
 public:
  MajorityOracle(LabelSpace labels, double smoothing) : Predictor(std::move(labels)), smoothing_(smoothing) {}

  std::string identity() const override { return "oracle:majority_bias"; }
  bool pure() const override { return true; }
  std::size_t max_in_flight() const override { return 64; }

 protected:
  Prediction query(const ContextWindow& context, const Example&) override {
    const std::size_t n_labels = label_space().size();
    std::vector<double> counts(n_labels, 0.0);
    for (const auto& e : context.entries) counts[e.label.index] += 1.0;
    const double total = static_cast<double>(n_labels) * smoothing_ + static_cast<double>(context.size());
    std::vector<double> p(n_labels);
    for (std::size_t l = 0; l < n_labels; ++l) p[l] = (smoothing_ + counts[l]) / total;
    Prediction out = from_probabilities(p);
    out.forward_pass_cost = 1;
    return out;
  }

 private:
  double smoothing_;
};

// Builds the oracle matching a synthetic task. Concept-based modes take the
// hidden labeling from the task generator, never from the dataset's golden
// labels.
inline std::unique_ptr<Predictor> make_synthetic_oracle(const SyntheticTaskSpec& spec, const SyntheticTask& task) {
  const auto& ds = task.dataset;
  if (spec.oracle_mode == OracleMode::majority_bias)
    return std::make_unique<MajorityOracle>(ds.label_space(), spec.smoothing);
  std::unordered_map<std::string, Label> hidden;
  for (std::size_t i = 0; i < ds.size(); ++i) hidden.emplace(ds[i].id, *task.hidden[i]);
  return std::make_unique<ConceptOracle>(ds.label_space(), std::move(hidden), spec.smoothing, spec.salience,
                                         "oracle:" + std::string(to_string(spec.oracle_mode)));
}

inline std::unique_ptr<Predictor> make_synthetic_oracle(const SyntheticTaskSpec& spec) {
  return make_synthetic_oracle(spec, generate_synthetic_task(spec));
}

}  // namespace icm
