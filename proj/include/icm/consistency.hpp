#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "icm/dataset.hpp"

namespace icm {

enum class LinkKind { asymmetry, answer_mismatch, custom };

inline std::string_view to_string(LinkKind k) {
  switch (k) {
    case LinkKind::asymmetry: return "asymmetry";
    case LinkKind::answer_mismatch: return "answer_mismatch";
    case LinkKind::custom: return "custom";
  }
  return "custom";
}

struct LabelPair {
  Label first;
  Label second;
  friend auto operator<=>(const LabelPair&, const LabelPair&) = default;
};

// Pairwise constraint in canonical form: id(first) < id(second), forbidden
// pairs are (label of first, label of second), sorted and unique.
struct ConsistencyLink {
  std::size_t first = 0;
  std::size_t second = 0;
  LinkKind kind = LinkKind::custom;
  std::vector<LabelPair> forbidden;

  friend bool operator==(const ConsistencyLink&, const ConsistencyLink&) = default;
};

using LinkSet = std::vector<ConsistencyLink>;

inline bool violates(const ConsistencyLink& link, Label first, Label second) {
  return std::binary_search(link.forbidden.begin(), link.forbidden.end(), LabelPair{first, second});
}

// Joint labelings of a link's endpoints that violate nothing; first label
// varies slowest.
inline std::vector<LabelPair> consistent_options(const ConsistencyLink& link, const LabelSpace& labels) {
  std::vector<LabelPair> out;
  for (Label a : labels.all())
    for (Label b : labels.all())
      if (!violates(link, a, b)) out.push_back({a, b});
  return out;
}

// Emits one asymmetry link per partner pair, one answer-mismatch link per
// same-group pair with differing final answers, and the records' custom links.
inline LinkSet derive_links(const Dataset& ds) {
  const Label yes = ds.label_space().affirmative();
  const auto& labels = ds.label_space();

  auto canonical = [&](std::size_t a, std::size_t b) {
    return ds[a].id < ds[b].id ? std::pair{a, b} : std::pair{b, a};
  };
  LinkSet links;

  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Example& e = ds[i];
    if (e.orientation && *e.orientation == Orientation::forward) {
      auto [a, b] = canonical(i, *ds.index_of(*e.partner_id));
      links.push_back({a, b, LinkKind::asymmetry, {{yes, yes}}});
    }
  }

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds[i].group_key && ds[i].final_answer) groups[*ds[i].group_key].push_back(i);
  for (const auto& [key, members] : groups)
    for (std::size_t x = 0; x < members.size(); ++x)
      for (std::size_t y = x + 1; y < members.size(); ++y)
        if (*ds[members[x]].final_answer != *ds[members[y]].final_answer) {
          auto [a, b] = canonical(members[x], members[y]);
          links.push_back({a, b, LinkKind::answer_mismatch, {{yes, yes}}});
        }

  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (const auto& c : ds[i].custom_links) {
      std::size_t other = *ds.index_of(c.other_id);
      auto [a, b] = canonical(i, other);
      const bool swapped = a != i;
      ConsistencyLink link{a, b, LinkKind::custom, {}};
      for (const auto& [la, lb] : c.forbidden) {
        Label x = *labels.find(la), y = *labels.find(lb);
        link.forbidden.push_back(swapped ? LabelPair{y, x} : LabelPair{x, y});
      }
      std::sort(link.forbidden.begin(), link.forbidden.end());
      link.forbidden.erase(std::unique(link.forbidden.begin(), link.forbidden.end()), link.forbidden.end());
      links.push_back(std::move(link));
    }
  }

  auto key = [&](const ConsistencyLink& l) {
    return std::tie(ds[l.first].id, ds[l.second].id, l.kind, l.forbidden);
  };
  std::sort(links.begin(), links.end(), [&](const auto& x, const auto& y) { return key(x) < key(y); });
  links.erase(std::unique(links.begin(), links.end()), links.end());
  return links;
}

template <class View>
bool link_violated(const ConsistencyLink& link, const View& view) {
  auto a = view.label(link.first);
  auto b = view.label(link.second);
  return a && b && violates(link, *a, *b);
}

template <class View>
std::size_t inconsistency_count(const View& view, const LinkSet& links) {
  std::size_t n = 0;
  for (const auto& l : links)
    if (link_violated(l, view)) ++n;
  return n;
}

template <class View>
std::vector<ConsistencyLink> inconsistent_pairs(const View& view, const LinkSet& links) {
  std::vector<ConsistencyLink> out;
  for (const auto& l : links)
    if (link_violated(l, view)) out.push_back(l);
  return out;
}

// Links plus per-example incidence. Immutable and shared by every copy of an
// InconsistencyIndex.
class LinkTopology {
 public:
  LinkTopology(LinkSet links, std::size_t n_examples) : links_(std::move(links)), incident_(n_examples) {
    for (std::size_t k = 0; k < links_.size(); ++k) {
      incident_[links_[k].first].push_back(k);
      incident_[links_[k].second].push_back(k);
    }
  }

  const LinkSet& links() const noexcept { return links_; }
  const ConsistencyLink& link(std::size_t k) const { return links_[k]; }
  std::span<const std::size_t> incident(std::size_t example) const { return incident_[example]; }
  bool has_links(std::size_t example) const { return !incident_[example].empty(); }
  std::size_t example_count() const noexcept { return incident_.size(); }

  std::size_t partner_of(std::size_t link, std::size_t example) const {
    const auto& l = links_[link];
    return l.first == example ? l.second : l.first;
  }

 private:
  LinkSet links_;
  std::vector<std::vector<std::size_t>> incident_;
};

// Set of violated links for one assignment version, maintained incrementally.
class InconsistencyIndex {
 public:
  InconsistencyIndex() = default;
  explicit InconsistencyIndex(std::shared_ptr<const LinkTopology> topology) : topology_(std::move(topology)) {}

  void rebuild(const Assignment& a) {
    violated_.clear();
    for (std::size_t k = 0; k < topology_->links().size(); ++k)
      if (link_violated(topology_->link(k), a)) violated_.insert(k);
    version_ = a.version();
  }

  // Rechecks the links incident to `example` after its label changed.
  void update(const Assignment& a, std::size_t example) {
    for (std::size_t k : topology_->incident(example)) {
      if (link_violated(topology_->link(k), a)) violated_.insert(k);
      else violated_.erase(k);
    }
    version_ = a.version();
  }

  std::size_t count() const noexcept { return violated_.size(); }
  const std::set<std::size_t>& violated() const noexcept { return violated_; }
  std::uint64_t version() const noexcept { return version_; }
  const LinkTopology& topology() const { return *topology_; }
  const std::shared_ptr<const LinkTopology>& topology_ptr() const noexcept { return topology_; }

  // Inconsistency count if the given examples took the labels in `view`
  // (which must agree with the indexed assignment everywhere else).
  template <class View>
  std::size_t count_with(const View& view, std::span<const std::size_t> changed) const {
    std::set<std::size_t> touched;
    for (std::size_t e : changed)
      for (std::size_t k : topology_->incident(e)) touched.insert(k);
    std::size_t n = violated_.size();
    for (std::size_t k : touched) {
      const bool before = violated_.count(k) > 0;
      const bool after = link_violated(topology_->link(k), view);
      if (before && !after) --n;
      if (!before && after) ++n;
    }
    return n;
  }

  friend bool operator==(const InconsistencyIndex& a, const InconsistencyIndex& b) {
    return a.violated_ == b.violated_ && a.version_ == b.version_;
  }

 private:
  std::shared_ptr<const LinkTopology> topology_;
  std::set<std::size_t> violated_;
  std::uint64_t version_ = 0;
};

// Repair-effort default: ten attempts per violated link, at least eight.
inline std::size_t default_fix_iterations(std::size_t violated) {
  return std::max<std::size_t>(8, 10 * violated);
}

struct FixOutcome {
  std::size_t iterations = 0;
  std::size_t applied = 0;
  std::size_t remaining = 0;  // violated links left when the loop stopped
};

// Requirements on the scorer driving consistency_fix. `evaluate` scores the
// state with a set of label changes applied without mutating it; `commit`
// applies a previously evaluated candidate.
template <class S, class State>
concept RepairScorer = requires(S& s, const State& cst, State& st, std::span<const LabelChange> ch) {
  { s.evaluate(cst, ch) } -> std::same_as<typename S::Candidate>;
  { s.candidate_utility(s.evaluate(cst, ch)) } -> std::convertible_to<double>;
  { s.current_utility(cst) } -> std::convertible_to<double>;
  s.commit(st, s.evaluate(cst, ch));
};

// Samples a violated link uniformly, scores every consistent relabeling of its
// endpoints, and applies the best one only when it strictly raises utility.
// Stops early once nothing is violated.
template <class State, class Scorer>
  requires RepairScorer<Scorer, State>
FixOutcome consistency_fix(State& state, Scorer& scorer, std::size_t max_iterations, std::mt19937_64& rng) {
  FixOutcome out;
  const LinkTopology& topo = state.index.topology();
  const LabelSpace& labels = state.label_space();
  for (std::size_t m = 0; m < max_iterations; ++m) {
    const auto& violated = state.index.violated();
    if (violated.empty()) break;
    ++out.iterations;

    std::uniform_int_distribution<std::size_t> pick(0, violated.size() - 1);
    auto it = violated.begin();
    std::advance(it, static_cast<std::ptrdiff_t>(pick(rng)));
    const ConsistencyLink& link = topo.link(*it);

    const double current = scorer.current_utility(state);
    std::optional<typename Scorer::Candidate> best;
    double best_u = 0.0;
    for (const LabelPair& opt : consistent_options(link, labels)) {
      const LabelChange changes[2] = {{link.first, opt.first}, {link.second, opt.second}};
      auto cand = scorer.evaluate(state, changes);
      const double u = scorer.candidate_utility(cand);
      if (!best || u > best_u) {
        best_u = u;
        best = std::move(cand);
      }
    }
    if (best && best_u > current) {
      scorer.commit(state, std::move(*best));
      ++out.applied;
    }
  }
  out.remaining = state.index.count();
  return out;
}

}  // namespace icm
