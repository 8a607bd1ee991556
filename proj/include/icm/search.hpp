#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "icm/consistency.hpp"
#include "icm/dataset.hpp"
#include "icm/predictor.hpp"
#include "icm/random.hpp"
#include "icm/scorer.hpp"

namespace icm {

enum class InitRegime { random, golden, worst };

inline std::string_view to_string(InitRegime r) {
  switch (r) {
    case InitRegime::random: return "random";
    case InitRegime::golden: return "golden";
    case InitRegime::worst: return "worst";
  }
  return "random";
}

inline InitRegime parse_init_regime(std::string_view s) {
  if (s == "random") return InitRegime::random;
  if (s == "golden") return InitRegime::golden;
  if (s == "worst") return InitRegime::worst;
  throw ConfigError("unknown init regime: " + std::string(s));
}

struct SearchConfig {
  std::size_t k_init = 8;
  double t0 = 10.0;
  double t_min = 0.01;
  double beta = 0.99;
  double alpha = 50.0;
  std::size_t iterations = 0;  // 0: ten passes over the dataset
  double weight_factor = 100.0;
  std::uint64_t seed = 0;
  std::size_t fix_iterations = 0;  // 0: default_fix_iterations(violated)
  ScoringMode mode = ScoringMode::cached;
  std::size_t context_budget = kDefaultContextBudget;
  std::size_t checkpoint_every = 100;
  InitRegime init = InitRegime::random;
  bool use_consistency = true;  // false drops I from U and skips repair

  void validate() const {
    if (!(t0 > t_min && t_min > 0.0)) throw ConfigError("require t0 > t_min > 0");
    if (!(beta > 0.0)) throw ConfigError("beta must be positive");
    if (!(weight_factor >= 1.0)) throw ConfigError("weight_factor must be >= 1");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
    if (context_budget == 0) throw ConfigError("context budget must be at least 1");
    if (checkpoint_every == 0) throw ConfigError("checkpoint cadence must be at least 1");
  }

  std::size_t effective_iterations(std::size_t n) const { return iterations ? iterations : 10 * n; }

  friend bool operator==(const SearchConfig&, const SearchConfig&) = default;
};

inline nlohmann::json to_json(const SearchConfig& c) {
  return {{"k_init", c.k_init},
          {"t0", c.t0},
          {"t_min", c.t_min},
          {"beta", c.beta},
          {"alpha", c.alpha},
          {"iterations", c.iterations},
          {"weight_factor", c.weight_factor},
          {"seed", c.seed},
          {"fix_iterations", c.fix_iterations},
          {"scoring_mode", std::string(to_string(c.mode))},
          {"context_budget", c.context_budget},
          {"checkpoint_every", c.checkpoint_every},
          {"init", std::string(to_string(c.init))},
          {"use_consistency", c.use_consistency}};
}

inline SearchConfig search_config_from_json(const nlohmann::json& j) {
  SearchConfig c;
  c.k_init = j.at("k_init").get<std::size_t>();
  c.t0 = j.at("t0").get<double>();
  c.t_min = j.at("t_min").get<double>();
  c.beta = j.at("beta").get<double>();
  c.alpha = j.at("alpha").get<double>();
  c.iterations = j.at("iterations").get<std::size_t>();
  c.weight_factor = j.at("weight_factor").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.fix_iterations = j.at("fix_iterations").get<std::size_t>();
  c.mode = parse_scoring_mode(j.at("scoring_mode").get<std::string>());
  c.context_budget = j.at("context_budget").get<std::size_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
  c.init = parse_init_regime(j.at("init").get<std::string>());
  c.use_consistency = j.at("use_consistency").get<bool>();
  return c;
}

struct TraceRecord {
  std::uint64_t iteration = 0;
  double temperature = 0.0;
  std::string target;
  std::string proposed;
  double delta_u = 0.0;
  bool accepted = false;
  std::size_t inconsistency = 0;  // after the step
  std::size_t labeled = 0;
  std::uint64_t forward_passes = 0;  // cumulative
  std::uint64_t rng_fingerprint = 0;
  double utility = 0.0;  // of the state kept after the step
  double mutual_predictability = 0.0;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

inline nlohmann::json to_json(const TraceRecord& r) {
  return {{"n", r.iteration},          {"T", r.temperature},     {"target", r.target},
          {"proposed", r.proposed},    {"delta_u", r.delta_u},   {"accepted", r.accepted},
          {"I", r.inconsistency},      {"labeled", r.labeled},   {"forward_passes", r.forward_passes},
          {"rng", r.rng_fingerprint},  {"U", r.utility},         {"P", r.mutual_predictability}};
}

inline TraceRecord trace_record_from_json(const nlohmann::json& j) {
  TraceRecord r;
  r.iteration = j.at("n").get<std::uint64_t>();
  r.temperature = j.at("T").get<double>();
  r.target = j.at("target").get<std::string>();
  r.proposed = j.at("proposed").get<std::string>();
  r.delta_u = j.at("delta_u").get<double>();
  r.accepted = j.at("accepted").get<bool>();
  r.inconsistency = j.at("I").get<std::size_t>();
  r.labeled = j.at("labeled").get<std::size_t>();
  r.forward_passes = j.at("forward_passes").get<std::uint64_t>();
  r.rng_fingerprint = j.at("rng").get<std::uint64_t>();
  r.utility = j.at("U").get<double>();
  r.mutual_predictability = j.at("P").get<double>();
  return r;
}

// T_n = max(T_min, T0 / (1 + beta * ln n)) for the 1-based iteration n.
inline double temperature(std::uint64_t n, const SearchConfig& cfg) {
  return std::max(cfg.t_min, cfg.t0 / (1.0 + cfg.beta * std::log(static_cast<double>(n))));
}

// Draws an example to (re)label. Unlabeled examples linked to a labeled one
// get weight `weight_factor`; every other example weight 1.
inline std::size_t sample_target(const Assignment& a, const LinkTopology& topo, double weight_factor, Rng& rng) {
  std::vector<double> w(a.size(), 1.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.is_labeled(i)) continue;
    for (std::size_t k : topo.incident(i))
      if (a.is_labeled(topo.partner_of(k, i))) {
        w[i] = weight_factor;
        break;
      }
  }
  std::discrete_distribution<std::size_t> d(w.begin(), w.end());
  return d(rng);
}

inline Label propose_label(Scorer& scorer, const SearchState& s, std::size_t target) {
  return scorer.predict(s, target).argmax();
}

// Metropolis rule: improvements always pass, otherwise pass with
// probability exp(delta / T).
inline bool accept(double delta_u, double temp, Rng& rng) {
  if (delta_u > 0.0) return true;
  return uniform01(rng) < std::exp(delta_u / temp);
}

// One annealing run over a dataset. Owns the search state; the predictor and
// dataset must outlive it.
class IcmRun {
 public:
  IcmRun(const Dataset& ds, Predictor& predictor, SearchConfig cfg, std::optional<LabelMap> reference = {})
      : IcmRun(ds, derive_links(ds), predictor, cfg, std::move(reference)) {}

  IcmRun(const Dataset& ds, LinkSet links, Predictor& predictor, SearchConfig cfg,
         std::optional<LabelMap> reference = {})
      : ds_(ds),
        cfg_(cfg),
        topology_(std::make_shared<const LinkTopology>(cfg.use_consistency ? std::move(links) : LinkSet{},
                                                       ds.size())),
        scorer_(ds, topology_, predictor, ScorerConfig{cfg.alpha, cfg.mode, cfg.context_budget, cfg.seed}),
        reference_(std::move(reference)),
        rng_(mix64(cfg.seed)),
        total_iterations_(cfg.effective_iterations(ds.size())) {
    cfg_.validate();
    state_ = scorer_.make_state();
    passes_offset_ = 0 - scorer_.forward_passes();  // count from here; wraps like the restore offset
  }

  const SearchConfig& config() const noexcept { return cfg_; }
  const SearchState& state() const noexcept { return state_; }
  const Assignment& assignment() const noexcept { return state_.assignment; }
  const std::vector<TraceRecord>& trace() const noexcept { return trace_; }
  const Dataset& dataset() const noexcept { return ds_; }
  Scorer& scorer() noexcept { return scorer_; }
  std::uint64_t iteration() const noexcept { return iteration_; }
  std::uint64_t total_iterations() const noexcept { return total_iterations_; }
  bool initialized() const noexcept { return initialized_; }
  bool finished() const noexcept { return initialized_ && iteration_ >= total_iterations_; }
  double best_utility() const noexcept { return best_utility_; }
  std::uint64_t forward_passes() const noexcept { return scorer_.forward_passes() + passes_offset_; }
  const LinkTopology& topology() const noexcept { return *topology_; }

  // Labels K random examples (or golden / flipped-golden ones for the
  // initialization ablation) and repairs them. A failure leaves the run
  // uninitialized.
  void initialize() {
    if (initialized_) return;
    const Rng saved_rng = rng_;
    try {
      do_initialize();
    } catch (...) {
      rng_ = saved_rng;
      state_ = scorer_.make_state();
      throw;
    }
  }

 private:
  void do_initialize() {
    const std::size_t n = ds_.size();
    if (cfg_.k_init > n) throw ConfigError("k_init exceeds dataset size");
    scorer_.begin_step(0);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);
    const auto& labels = ds_.label_space();
    std::uniform_int_distribution<std::uint16_t> pick(0, static_cast<std::uint16_t>(labels.size() - 1));
    std::vector<LabelChange> changes;
    for (std::size_t k = 0; k < cfg_.k_init; ++k) {
      const std::size_t i = order[k];
      Label l;
      if (cfg_.init == InitRegime::random) {
        l = Label{pick(rng_)};
      } else {
        if (!reference_ || !(*reference_)[i])
          throw ConfigError("golden/worst initialization needs a reference label for " + ds_[i].id);
        l = *(*reference_)[i];
        if (cfg_.init == InitRegime::worst)
          l = Label{static_cast<std::uint16_t>((l.index + 1) % labels.size())};
      }
      changes.push_back({i, l});
    }
    if (!changes.empty()) scorer_.commit(state_, scorer_.evaluate(state_, changes));
    if (cfg_.use_consistency) repair(state_);
    best_utility_ = state_.score.utility;
    initialized_ = true;
  }

 public:

  // One annealing iteration. On a backend failure the state and RNG are left
  // as they were before the step.
  const TraceRecord& step() {
    if (!initialized_) initialize();
    const Rng saved_rng = rng_;
    try {
      return do_step();
    } catch (...) {
      rng_ = saved_rng;
      throw;
    }
  }

  enum class Status { completed, halted };

  struct Hooks {
    std::function<void(const IcmRun&)> checkpoint;  // called every checkpoint_every steps and on exit
    std::optional<std::uint64_t> halt_after;         // stop once this iteration is reached
  };

  Status run(const Hooks& hooks = {}) {
    auto flush = [&] {
      if (hooks.checkpoint) hooks.checkpoint(*this);
    };
    try {
      initialize();
      while (!finished()) {
        if (hooks.halt_after && iteration_ >= *hooks.halt_after) {
          flush();
          return Status::halted;
        }
        step();
        if (iteration_ % cfg_.checkpoint_every == 0) flush();
      }
    } catch (const BackendError&) {
      flush();
      throw;
    }
    flush();
    return Status::completed;
  }

  // Labels whatever the annealing loop left unlabeled: argmax proposal for each
  // remaining example in dataset order, then repair.
  void complete() {
    if (!initialized_) initialize();
    std::uint64_t clock = total_iterations_ + 1;
    for (std::size_t i = 0; i < ds_.size(); ++i) {
      if (state_.assignment.is_labeled(i)) continue;
      scorer_.begin_step(clock++);
      const LabelChange change{i, propose_label(scorer_, state_, i)};
      scorer_.commit(state_, scorer_.evaluate(state_, std::span(&change, 1)));
      if (cfg_.use_consistency) repair(state_);
    }
    best_utility_ = std::max(best_utility_, state_.score.utility);
  }

  nlohmann::json checkpoint_json() const {
    nlohmann::json j;
    j["format"] = "icm-checkpoint/1";
    j["config"] = to_json(cfg_);
    j["initialized"] = initialized_;
    j["iteration"] = iteration_;
    j["total_iterations"] = total_iterations_;
    j["rng"] = rng_state(rng_);
    j["forward_passes"] = forward_passes();
    j["best_utility"] = best_utility_;
    nlohmann::json order = nlohmann::json::array();
    state_.assignment.for_each_labeled(
        [&](std::size_t i, Label l) { order.push_back({ds_[i].id, ds_.label_space().token(l)}); });
    j["assignment"] = {{"order", order}, {"version", state_.assignment.version()}};
    nlohmann::json cache = nlohmann::json::array();
    for (std::size_t i = 0; i < ds_.size(); ++i) {
      const auto& e = state_.cache[i];
      if (!e) continue;
      cache.push_back({{"id", ds_[i].id},
                       {"log_prob", e->log_prob},
                       {"distribution", e->distribution},
                       {"fingerprint", e->fingerprint},
                       {"epoch", e->epoch},
                       {"computed_at", e->computed_at},
                       {"stale", e->stale}});
    }
    j["cache"] = cache;
    j["score"] = {{"alpha", state_.score.alpha},
                  {"P", state_.score.mutual_predictability},
                  {"I", state_.score.inconsistency},
                  {"U", state_.score.utility},
                  {"mode", std::string(to_string(state_.score.mode))}};
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& r : trace_) trace.push_back(to_json(r));
    j["trace"] = trace;
    return j;
  }

  // Restores a state written by checkpoint_json() for the same dataset and
  // configuration.
  void restore(const nlohmann::json& j) {
    try {
      if (j.at("format") != "icm-checkpoint/1") throw CheckpointError("unknown checkpoint format");
      if (search_config_from_json(j.at("config")) != cfg_) throw CheckpointError("checkpoint config mismatch");
      initialized_ = j.at("initialized").get<bool>();
      iteration_ = j.at("iteration").get<std::uint64_t>();
      total_iterations_ = j.at("total_iterations").get<std::uint64_t>();
      rng_ = rng_from_state(j.at("rng").get<std::string>());
      passes_offset_ = j.at("forward_passes").get<std::uint64_t>() - scorer_.forward_passes();
      best_utility_ = j.at("best_utility").get<double>();

      std::vector<std::pair<std::size_t, Label>> ordered;
      for (const auto& item : j.at("assignment").at("order")) {
        ordered.emplace_back(index_or_throw(item.at(0).get<std::string>()),
                             label_or_throw(item.at(1).get<std::string>()));
      }
      state_ = scorer_.make_state();
      state_.assignment =
          Assignment::restore(ds_.size(), ordered, j.at("assignment").at("version").get<std::uint64_t>());
      state_.index.rebuild(state_.assignment);
      for (const auto& c : j.at("cache")) {
        TermEntry e;
        e.log_prob = c.at("log_prob").get<double>();
        e.distribution = c.at("distribution").get<std::vector<double>>();
        e.fingerprint = c.at("fingerprint").get<std::uint64_t>();
        e.epoch = c.at("epoch").get<std::uint64_t>();
        e.computed_at = c.at("computed_at").get<std::uint64_t>();
        e.stale = c.at("stale").get<bool>();
        state_.cache[index_or_throw(c.at("id").get<std::string>())] = std::move(e);
      }
      const auto& sc = j.at("score");
      state_.score = ScoreBreakdown{sc.at("alpha").get<double>(), sc.at("P").get<double>(),
                                    sc.at("I").get<std::size_t>(), sc.at("U").get<double>(),
                                    parse_scoring_mode(sc.at("mode").get<std::string>())};
      trace_.clear();
      for (const auto& r : j.at("trace")) trace_.push_back(trace_record_from_json(r));
    } catch (const nlohmann::json::exception& ex) {
      throw CheckpointError(std::string("corrupt checkpoint: ") + ex.what());
    }
  }

 private:
  std::size_t index_or_throw(const std::string& id) const {
    auto i = ds_.index_of(id);
    if (!i) throw CheckpointError("checkpoint references unknown id: " + id);
    return *i;
  }

  Label label_or_throw(const std::string& tok) const {
    auto l = ds_.label_space().find(tok);
    if (!l) throw CheckpointError("checkpoint references unknown label: " + tok);
    return *l;
  }

  FixOutcome repair(SearchState& s) {
    const std::size_t m = cfg_.fix_iterations ? cfg_.fix_iterations : default_fix_iterations(s.index.count());
    return consistency_fix(s, scorer_, m, rng_);
  }

  const TraceRecord& do_step() {
    const std::uint64_t n = iteration_ + 1;
    scorer_.begin_step(n);
    const double temp = temperature(n, cfg_);
    const std::size_t target = sample_target(state_.assignment, *topology_, cfg_.weight_factor, rng_);
    const Label proposed = propose_label(scorer_, state_, target);

    SearchState tentative = state_;
    const LabelChange change{target, proposed};
    scorer_.commit(tentative, scorer_.evaluate(tentative, std::span(&change, 1)));
    if (cfg_.use_consistency) repair(tentative);

    const double delta = tentative.score.utility - state_.score.utility;
    const bool accepted = accept(delta, temp, rng_);
    if (accepted) {
      const bool changed = tentative.assignment.labels() != state_.assignment.labels();
      state_ = std::move(tentative);
      if (changed && cfg_.mode == ScoringMode::cached) refresh_stalest(n);
      best_utility_ = std::max(best_utility_, state_.score.utility);
    }

    TraceRecord r;
    r.iteration = n;
    r.temperature = temp;
    r.target = ds_[target].id;
    r.proposed = ds_.label_space().token(proposed);
    r.delta_u = delta;
    r.accepted = accepted;
    r.inconsistency = state_.index.count();
    r.labeled = state_.assignment.labeled_count();
    r.forward_passes = forward_passes();
    r.rng_fingerprint = rng_fingerprint(rng_);
    r.utility = state_.score.utility;
    r.mutual_predictability = state_.score.mutual_predictability;
    trace_.push_back(std::move(r));
    iteration_ = n;
    return trace_.back();
  }

  // Bounds drift of cached terms: after each accepted change, recompute the
  // term that has gone longest without one.
  void refresh_stalest(std::uint64_t now) {
    std::optional<std::size_t> pick;
    std::uint64_t oldest = now;
    for (std::size_t i : state_.assignment.insertion_order()) {
      const auto& e = state_.cache[i];
      if (e && e->computed_at < oldest) {
        oldest = e->computed_at;
        pick = i;
      }
    }
    if (pick) scorer_.refresh_term(state_, *pick);
  }

  const Dataset& ds_;
  SearchConfig cfg_;
  std::shared_ptr<const LinkTopology> topology_;
  Scorer scorer_;
  std::optional<LabelMap> reference_;
  Rng rng_;
  std::uint64_t total_iterations_;
  SearchState state_;
  std::vector<TraceRecord> trace_;
  std::uint64_t iteration_ = 0;
  bool initialized_ = false;
  double best_utility_ = 0.0;
  std::uint64_t passes_offset_ = 0;
};

struct RunResult {
  Assignment assignment;
  std::vector<TraceRecord> trace;
  ScoreBreakdown score;
  double best_utility = 0.0;
  std::uint64_t forward_passes = 0;
  double wall_clock_seconds = 0.0;
};

// Initialization followed by the configured number of annealing iterations.
inline RunResult run_icm(const Dataset& ds, Predictor& predictor, const SearchConfig& cfg,
                         std::optional<LabelMap> reference = {}) {
  const auto start = std::chrono::steady_clock::now();
  RunResult out;
  if (ds.empty()) {
    out.assignment = Assignment(0);
    return out;
  }
  IcmRun run(ds, predictor, cfg, std::move(reference));
  run.run();
  out.assignment = run.assignment();
  out.trace = run.trace();
  out.score = run.state().score;
  out.best_utility = run.best_utility();
  out.forward_passes = run.forward_passes();
  out.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace icm
