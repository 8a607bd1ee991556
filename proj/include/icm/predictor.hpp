#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "icm/consistency.hpp"
#include "icm/dataset.hpp"
#include "icm/random.hpp"

namespace icm {

// Distribution over a LabelSpace, stored as natural-log probabilities.
struct Prediction {
  std::vector<double> log_probs;
  std::uint64_t forward_pass_cost = 0;

  double log_prob(Label l) const { return log_probs.at(l.index); }
  double prob(Label l) const { return std::exp(log_probs.at(l.index)); }

  // Ties go to the earliest label.
  Label argmax() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < log_probs.size(); ++i)
      if (log_probs[i] > log_probs[best]) best = i;
    return Label{static_cast<std::uint16_t>(best)};
  }
};

inline constexpr double kNormalizationTolerance = 1e-6;

// Renormalizes raw log-scores over the supplied labels (log-sum-exp).
inline Prediction normalize_log_probs(std::vector<double> raw) {
  const double mx = *std::max_element(raw.begin(), raw.end());
  double z = 0.0;
  for (double v : raw) z += std::exp(v - mx);
  const double log_z = mx + std::log(z);
  for (double& v : raw) v -= log_z;
  return Prediction{std::move(raw), 0};
}

inline Prediction from_probabilities(const std::vector<double>& p) {
  Prediction out;
  out.log_probs.reserve(p.size());
  for (double v : p) out.log_probs.push_back(std::log(v));
  return out;
}

inline bool is_normalized(const Prediction& p, double tol = kNormalizationTolerance) {
  double s = 0.0;
  for (double v : p.log_probs) s += std::exp(v);
  return std::abs(s - 1.0) <= tol;
}

struct ContextEntry {
  std::size_t index = 0;
  const Example* example = nullptr;
  Label label;
};

struct ContextWindow {
  std::vector<ContextEntry> entries;
  std::size_t budget = 0;
  std::uint64_t fingerprint = 0;  // identifies (target, members, labels, order)

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }
};

inline constexpr std::size_t kDefaultContextBudget = 160;

// Selects the labeled examples shown alongside `target`. Everything fits:
// all of them in insertion order. Otherwise examples linked to the target
// come first, then a seeded uniform sample of the rest; insertion order is
// kept within each tier.
template <class View>
ContextWindow build_context(const Dataset& ds, const View& view, const LinkTopology* topology,
                            std::size_t target, std::size_t budget, std::uint64_t epoch_seed) {
  ContextWindow w;
  w.budget = budget;
  std::vector<std::size_t> candidates;
  candidates.reserve(view.labeled_count());
  view.for_each_labeled([&](std::size_t i, Label) {
    if (i != target) candidates.push_back(i);
  });

  std::vector<std::size_t> chosen;
  chosen.reserve(std::min(budget, candidates.size()));
  if (candidates.size() <= budget) {
    chosen = std::move(candidates);
  } else {
    std::vector<char> linked(ds.size(), 0);
    if (topology)
      for (std::size_t k : topology->incident(target)) linked[topology->partner_of(k, target)] = 1;
    std::vector<std::size_t> tier1, rest;
    rest.reserve(candidates.size());
    for (std::size_t i : candidates) (linked[i] ? tier1 : rest).push_back(i);
    if (tier1.size() >= budget) {
      tier1.resize(budget);
      chosen = std::move(tier1);
    } else {
      const std::size_t need = budget - tier1.size();
      // Partial Fisher-Yates over positions, then restore insertion order.
      std::vector<std::size_t> pos(rest.size());
      std::iota(pos.begin(), pos.end(), std::size_t{0});
      SplitMix64 rng(epoch_seed);
      for (std::size_t k = 0; k < need; ++k) {
        std::uniform_int_distribution<std::size_t> d(k, pos.size() - 1);
        std::swap(pos[k], pos[d(rng)]);
      }
      pos.resize(need);
      std::sort(pos.begin(), pos.end());
      chosen = std::move(tier1);
      for (std::size_t p : pos) chosen.push_back(rest[p]);
    }
  }

  std::uint64_t fp = hash_combine(0x1c3ULL, target);
  w.entries.reserve(chosen.size());
  for (std::size_t i : chosen) {
    Label l = *view.label(i);
    w.entries.push_back({i, &ds[i], l});
    fp = hash_combine(hash_combine(fp, i), l.index);
  }
  w.fingerprint = fp;
  return w;
}

// Canonical prompt: each context claim followed by its label token, blocks
// separated by a blank line, the target claim last and ending at the label slot.
inline std::string render_prompt(const ContextWindow& w, const Example& target, const LabelSpace& labels) {
  std::string out;
  for (const auto& e : w.entries) {
    out += e.example->claim_text;
    out += ' ';
    out += labels.token(e.label);
    out += "\n\n";
  }
  out += target.claim_text;
  return out;
}

// Conditional label distribution P(y | x, context). Implementations must be
// safe to call concurrently up to max_in_flight().
class Predictor {
 public:
  explicit Predictor(LabelSpace labels) : labels_(std::move(labels)) {}
  virtual ~Predictor() = default;
  Predictor(const Predictor&) = delete;
  Predictor& operator=(const Predictor&) = delete;

  Prediction label_distribution(const ContextWindow& context, const Example& target) {
    Prediction p = query(context, target);
    forward_passes_.fetch_add(p.forward_pass_cost, std::memory_order_relaxed);
    return p;
  }

  std::uint64_t forward_passes() const noexcept { return forward_passes_.load(std::memory_order_relaxed); }
  const LabelSpace& label_space() const noexcept { return labels_; }

  virtual std::size_t max_in_flight() const { return 1; }
  virtual std::string identity() const = 0;
  // True when identical inputs always yield identical outputs.
  virtual bool pure() const { return false; }

 protected:
  // Returns the distribution with forward_pass_cost set to the backend calls
  // consumed.
  virtual Prediction query(const ContextWindow& context, const Example& target) = 0;

 private:
  LabelSpace labels_;
  std::atomic<std::uint64_t> forward_passes_{0};
};

class UniformPredictor final : public Predictor {
 public:
  using Predictor::Predictor;
  std::string identity() const override { return "oracle:uniform"; }
  bool pure() const override { return true; }
  std::size_t max_in_flight() const override { return 64; }

 protected:
  Prediction query(const ContextWindow&, const Example&) override {
    const double lp = -std::log(static_cast<double>(label_space().size()));
    return Prediction{std::vector<double>(label_space().size(), lp), 1};
  }
};

}  // namespace icm
