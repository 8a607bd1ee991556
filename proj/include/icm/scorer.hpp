#pragma once

#include <algorithm>
#include <cstdint>
#include <future>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "icm/consistency.hpp"
#include "icm/dataset.hpp"
#include "icm/predictor.hpp"
#include "icm/random.hpp"

namespace icm {

enum class ScoringMode { exact, cached };

inline std::string_view to_string(ScoringMode m) { return m == ScoringMode::exact ? "exact" : "cached"; }

inline ScoringMode parse_scoring_mode(std::string_view s) {
  if (s == "exact") return ScoringMode::exact;
  if (s == "cached") return ScoringMode::cached;
  throw ConfigError("unknown scoring mode: " + std::string(s));
}

// U = alpha * P - I, where P is the summed log-probability of every label
// given the others and I the number of violated links.
struct ScoreBreakdown {
  double alpha = 0.0;
  double mutual_predictability = 0.0;
  std::size_t inconsistency = 0;
  double utility = 0.0;
  ScoringMode mode = ScoringMode::exact;

  static ScoreBreakdown make(double alpha, double p, std::size_t i, ScoringMode mode) {
    return {alpha, p, i, alpha * p - static_cast<double>(i), mode};
  }

  friend bool operator==(const ScoreBreakdown&, const ScoreBreakdown&) = default;
};

// One cached log P(y_i | x_i, context_i) and the window it was computed on.
struct TermEntry {
  double log_prob = 0.0;
  std::vector<double> distribution;  // full log-distribution, reusable for proposals
  std::uint64_t fingerprint = 0;
  std::uint64_t epoch = 0;        // seed of the context sample
  std::uint64_t computed_at = 0;  // search step
  bool stale = false;             // last refresh failed

  friend bool operator==(const TermEntry&, const TermEntry&) = default;
};

class TermCache {
 public:
  TermCache() = default;
  explicit TermCache(std::size_t n) : entries_(n) {}

  const std::optional<TermEntry>& operator[](std::size_t i) const { return entries_[i]; }
  std::optional<TermEntry>& operator[](std::size_t i) { return entries_[i]; }
  std::size_t size() const noexcept { return entries_.size(); }

  friend bool operator==(const TermCache&, const TermCache&) = default;

 private:
  std::vector<std::optional<TermEntry>> entries_;
};

// Everything a search step mutates; copied wholesale for tentative steps.
struct SearchState {
  const Dataset* dataset = nullptr;
  Assignment assignment;
  InconsistencyIndex index;
  TermCache cache;
  ScoreBreakdown score;

  const LabelSpace& label_space() const { return dataset->label_space(); }

  friend bool operator==(const SearchState& a, const SearchState& b) {
    return a.assignment == b.assignment && a.index == b.index && a.cache == b.cache && a.score == b.score;
  }
};

struct ScorerConfig {
  double alpha = 50.0;
  ScoringMode mode = ScoringMode::cached;
  std::size_t context_budget = kDefaultContextBudget;
  std::uint64_t seed = 0;
};

class Scorer {
 public:
  struct Candidate {
    ScoreBreakdown score;
    std::vector<LabelChange> changes;
    std::vector<std::pair<std::size_t, TermEntry>> terms;  // cached mode only
  };

  static constexpr std::uint64_t kRefreshSalt = 0xf00d;

  Scorer(const Dataset& ds, std::shared_ptr<const LinkTopology> topology, Predictor& predictor, ScorerConfig cfg)
      : ds_(ds), topology_(std::move(topology)), predictor_(predictor), cfg_(cfg) {
    if (cfg_.context_budget == 0) throw ConfigError("context budget must be at least 1");
  }

  const ScorerConfig& config() const noexcept { return cfg_; }
  Predictor& predictor() noexcept { return predictor_; }
  const Dataset& dataset() const noexcept { return ds_; }
  std::uint64_t forward_passes() const noexcept { return predictor_.forward_passes(); }

  SearchState make_state() const {
    SearchState s;
    s.dataset = &ds_;
    s.assignment = Assignment(ds_.size());
    s.index = InconsistencyIndex(topology_);
    s.index.rebuild(s.assignment);
    s.cache = TermCache(ds_.size());
    s.score = ScoreBreakdown::make(cfg_.alpha, 0.0, 0, cfg_.mode);
    return s;
  }

  // Epoch seeds and the memos are scoped to a step. Within a step the
  // assignment only moves forward, so its version identifies its labels.
  void begin_step(std::uint64_t step) {
    clock_ = step;
    memo_.clear();
    terms_.clear();
  }

  template <class View>
  ContextWindow context_for(const View& view, std::size_t target, std::uint64_t epoch) const {
    return build_context(ds_, view, topology_.get(), target, cfg_.context_budget, epoch);
  }

  std::uint64_t exact_epoch(std::size_t example) const { return derive_seed(cfg_.seed, 0, example, 0); }

  // Sum over labeled examples of log P(y_i | x_i, others), one query each.
  template <class View>
  double exact_mutual_predictability(const View& view) {
    std::vector<std::size_t> targets;
    std::vector<Label> labels;
    view.for_each_labeled([&](std::size_t i, Label l) {
      targets.push_back(i);
      labels.push_back(l);
    });
    std::vector<ContextWindow> windows;
    windows.reserve(targets.size());
    for (std::size_t i : targets) windows.push_back(context_for(view, i, exact_epoch(i)));
    auto preds = predict_many(windows, targets);
    double p = 0.0;
    for (std::size_t k = 0; k < targets.size(); ++k) p += preds[k].log_prob(labels[k]);
    return p;
  }

  ScoreBreakdown exact_utility(const Assignment& a) {
    const double p = exact_mutual_predictability(a);
    return ScoreBreakdown::make(cfg_.alpha, p, inconsistency_count(a, topology_->links()), ScoringMode::exact);
  }

  // Scores the state in the configured mode and stores the result. Cached mode
  // fills any missing or failed terms and sums the rest as they stand.
  ScoreBreakdown utility(SearchState& s) {
    if (cfg_.mode == ScoringMode::exact) {
      s.score = exact_utility(s.assignment);
      return s.score;
    }
    for (std::size_t i : s.assignment.insertion_order()) {
      auto& entry = s.cache[i];
      if (!entry || entry->stale) {
        auto t = compute_term(s.assignment, i, std::nullopt);
        t.log_prob = t.distribution[s.assignment.label(i)->index];
        entry = std::move(t);
      }
    }
    s.score = cached_score(s);
    return s.score;
  }

  double current_utility(const SearchState& s) const { return s.score.utility; }
  double candidate_utility(const Candidate& c) const { return c.score.utility; }

  // Scores `s` with `changes` applied; does not touch `s`.
  Candidate evaluate(const SearchState& s, std::span<const LabelChange> changes) {
    Candidate cand;
    cand.changes.assign(changes.begin(), changes.end());
    AssignmentOverlay view(s.assignment, changes);
    std::vector<std::size_t> changed;
    for (const auto& c : changes)
      if (std::find(changed.begin(), changed.end(), c.example) == changed.end()) changed.push_back(c.example);
    const std::size_t incons = s.index.count_with(view, changed);

    if (cfg_.mode == ScoringMode::exact) {
      cand.score = ScoreBreakdown::make(cfg_.alpha, exact_mutual_predictability(view), incons, ScoringMode::exact);
      return cand;
    }

    for (std::size_t e : changed) {
      TermEntry t = compute_term(view, e, s.cache[e]);
      t.log_prob = t.distribution[view.label(e)->index];
      cand.terms.emplace_back(e, std::move(t));
    }
    double p = 0.0;
    for (std::size_t i = 0; i < ds_.size(); ++i) {
      if (!view.is_labeled(i)) continue;
      auto it = std::find_if(cand.terms.begin(), cand.terms.end(), [&](const auto& t) { return t.first == i; });
      if (it != cand.terms.end()) p += it->second.log_prob;
      else p += s.cache[i]->log_prob;
    }
    cand.score = ScoreBreakdown::make(cfg_.alpha, p, incons, ScoringMode::cached);
    return cand;
  }

  void commit(SearchState& s, Candidate cand) {
    for (const auto& c : cand.changes) {
      s.assignment.set(c.example, c.label);
      s.index.update(s.assignment, c.example);
    }
    for (auto& [e, t] : cand.terms) s.cache[e] = std::move(t);
    s.score = cand.score;
  }

  // Distribution for `target` given every other label in `s`. In cached mode
  // a term whose window is unchanged is reused without a query.
  Prediction predict(const SearchState& s, std::size_t target) {
    if (cfg_.mode == ScoringMode::exact) {
      auto w = context_for(s.assignment, target, exact_epoch(target));
      return predictor_.label_distribution(w, ds_[target]);
    }
    TermEntry t = compute_term(s.assignment, target, s.cache[target]);
    return Prediction{std::move(t.distribution), 0};
  }

  // Recomputes one cached term on a fresh context sample. Returns whether a
  // backend query was issued; an unchanged window costs nothing.
  bool refresh_term(SearchState& s, std::size_t example) {
    auto& entry = s.cache[example];
    const Label label = *s.assignment.label(example);
    const std::uint64_t epoch = derive_seed(cfg_.seed, clock_, example, kRefreshSalt);
    auto w = context_for(s.assignment, example, epoch);
    if (entry && !entry->stale && entry->fingerprint == w.fingerprint) return false;
    Prediction p;
    try {
      p = predictor_.label_distribution(w, ds_[example]);
    } catch (...) {
      if (entry) entry->stale = true;
      throw;
    }
    entry = TermEntry{p.log_prob(label), std::move(p.log_probs), w.fingerprint, epoch, clock_, false};
    s.score = cached_score(s);
    return true;
  }

  void refresh_all(SearchState& s) {
    for (std::size_t i : s.assignment.insertion_order()) refresh_term(s, i);
    s.score = cached_score(s);
  }

 private:
  ScoreBreakdown cached_score(const SearchState& s) const {
    double p = 0.0;
    for (std::size_t i = 0; i < ds_.size(); ++i)
      if (s.assignment.is_labeled(i)) p += s.cache[i]->log_prob;
    return ScoreBreakdown::make(cfg_.alpha, p, s.index.count(), ScoringMode::cached);
  }

  // Term for `example` under `view`: reuses the existing entry if its window
  // is unchanged, otherwise draws a new context sample for this step.
  template <class View>
  TermEntry compute_term(const View& view, std::size_t example, const std::optional<TermEntry>& existing) {
    std::uint64_t key = hash_combine(view_key(view), example);
    if (existing) key = hash_combine(hash_combine(hash_combine(key, existing->epoch), existing->fingerprint),
                                     existing->stale ? 1 : 2);
    if (auto it = terms_.find(key); it != terms_.end()) return it->second;
    TermEntry t = compute_term_uncached(view, example, existing);
    terms_.emplace(key, t);
    return t;
  }

  static std::uint64_t view_key(const Assignment& a) { return hash_combine(0xa55ULL, a.version()); }
  static std::uint64_t view_key(const AssignmentOverlay& v) {
    std::uint64_t h = view_key(v.base());
    for (const auto& c : v.changes()) h = hash_combine(hash_combine(h, c.example), c.label.index);
    return h;
  }

  template <class View>
  TermEntry compute_term_uncached(const View& view, std::size_t example, const std::optional<TermEntry>& existing) {
    const std::uint64_t epoch = derive_seed(cfg_.seed, clock_, example, 0);
    std::optional<ContextWindow> reused;
    if (existing && !existing->stale) {
      reused = context_for(view, example, existing->epoch);
      if (reused->fingerprint == existing->fingerprint) return *existing;
    }
    auto w = reused && existing->epoch == epoch ? std::move(*reused) : context_for(view, example, epoch);
    auto it = memo_.find(w.fingerprint);
    std::vector<double> dist;
    if (it != memo_.end()) {
      dist = it->second;
    } else {
      dist = predictor_.label_distribution(w, ds_[example]).log_probs;
      memo_.emplace(w.fingerprint, dist);
    }
    return TermEntry{0.0, std::move(dist), w.fingerprint, epoch, clock_, false};
  }

  std::vector<Prediction> predict_many(const std::vector<ContextWindow>& windows,
                                       const std::vector<std::size_t>& targets) {
    std::vector<Prediction> out(windows.size());
    const std::size_t lanes = std::max<std::size_t>(1, predictor_.max_in_flight());
    if (lanes == 1 || windows.size() < 64) {
      for (std::size_t k = 0; k < windows.size(); ++k)
        out[k] = predictor_.label_distribution(windows[k], ds_[targets[k]]);
      return out;
    }
    const std::size_t workers = std::min(lanes, std::size_t{8});
    std::vector<std::future<void>> jobs;
    for (std::size_t w = 0; w < workers; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t k = w; k < windows.size(); k += workers)
          out[k] = predictor_.label_distribution(windows[k], ds_[targets[k]]);
      }));
    }
    for (auto& j : jobs) j.get();  // rethrows the first backend failure
    return out;
  }

  const Dataset& ds_;
  std::shared_ptr<const LinkTopology> topology_;
  Predictor& predictor_;
  ScorerConfig cfg_;
  std::uint64_t clock_ = 0;
  std::unordered_map<std::uint64_t, std::vector<double>> memo_;
  std::unordered_map<std::uint64_t, TermEntry> terms_;
};

}  // namespace icm
