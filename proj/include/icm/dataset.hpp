#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "icm/error.hpp"
#include "icm/label_space.hpp"

namespace icm {

enum class Orientation { forward, reverse };

inline std::string_view to_string(Orientation o) {
  return o == Orientation::forward ? "forward" : "reverse";
}

// Passkey for reading golden labels. Every grant is counted so tests can assert
// that the labeling path never touched them.
class EvaluationAccess {
 public:
  static EvaluationAccess grant() {
    grants_counter().fetch_add(1, std::memory_order_relaxed);
    return EvaluationAccess{};
  }
  static std::uint64_t grants() { return grants_counter().load(std::memory_order_relaxed); }

 private:
  EvaluationAccess() = default;
  static std::atomic<std::uint64_t>& grants_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
  }
};

// Explicit pairwise constraint carried in a record ("links" field).
struct CustomConstraint {
  std::string other_id;
  std::vector<std::pair<std::string, std::string>> forbidden;  // (this label, other label)
  friend bool operator==(const CustomConstraint&, const CustomConstraint&) = default;
};

struct Example {
  std::string id;
  std::string claim_text;  // rendered claim, ending just before the label slot
  std::optional<std::string> group_key;
  std::optional<std::string> final_answer;
  std::optional<std::string> partner_id;
  std::optional<Orientation> orientation;
  std::vector<CustomConstraint> custom_links;

  bool has_golden_label() const noexcept { return golden_.has_value(); }
  const std::optional<Label>& golden_label(const EvaluationAccess&) const noexcept { return golden_; }
  void set_golden_label(std::optional<Label> l) { golden_ = l; }

  friend bool operator==(const Example&, const Example&) = default;

 private:
  std::optional<Label> golden_;
};

class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<Example> examples, LabelSpace label_space)
      : examples_(std::move(examples)), label_space_(std::move(label_space)) {
    index_.reserve(examples_.size());
    for (std::size_t i = 0; i < examples_.size(); ++i) {
      if (examples_[i].id.empty()) throw DatasetError("empty id");
      if (!index_.emplace(examples_[i].id, i).second)
        throw DatasetError("duplicate id: " + examples_[i].id);
    }
    for (const auto& e : examples_) validate(e);
  }

  std::size_t size() const noexcept { return examples_.size(); }
  bool empty() const noexcept { return examples_.empty(); }
  const Example& operator[](std::size_t i) const { return examples_[i]; }
  const std::vector<Example>& examples() const noexcept { return examples_; }
  const LabelSpace& label_space() const noexcept { return label_space_; }

  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // Indices ordered by id (the global id ordering).
  std::vector<std::size_t> sorted_indices() const {
    std::vector<std::size_t> idx(examples_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return examples_[a].id < examples_[b].id; });
    return idx;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.label_space_ == b.label_space_ && a.examples_ == b.examples_;
  }

 private:
  void validate(const Example& e) const {
    if (e.final_answer && !e.group_key)
      throw DatasetError("final_answer without group_key: " + e.id);
    if (e.orientation && !e.partner_id) throw DatasetError("orientation without partner: " + e.id);
    if (e.partner_id) {
      auto p = index_of(*e.partner_id);
      if (!p) throw DatasetError("dangling partner: " + e.id + " -> " + *e.partner_id);
      if (*e.partner_id == e.id) throw DatasetError("example is its own partner: " + e.id);
      const Example& partner = examples_[*p];
      if (e.orientation) {
        if (!partner.orientation || *partner.orientation == *e.orientation)
          throw DatasetError("partner orientation mismatch: " + e.id + " / " + partner.id);
        if (partner.partner_id != e.id)
          throw DatasetError("partner does not reference back: " + e.id + " / " + partner.id);
      }
    }
    for (const auto& c : e.custom_links) {
      if (c.other_id == e.id) throw DatasetError("custom link to self: " + e.id);
      if (!index_of(c.other_id)) throw DatasetError("dangling custom link: " + e.id + " -> " + c.other_id);
      if (c.forbidden.empty()) throw DatasetError("custom link with empty forbidden set: " + e.id);
      std::vector<std::pair<std::string, std::string>> seen;
      for (const auto& [a, b] : c.forbidden) {
        if (!label_space_.find(a) || !label_space_.find(b))
          throw DatasetError("custom link label not in label space: " + e.id);
        if (std::find(seen.begin(), seen.end(), std::pair{a, b}) == seen.end()) seen.emplace_back(a, b);
      }
      if (seen.size() >= label_space_.size() * label_space_.size())
        throw DatasetError("custom link forbids every label pair: " + e.id);
    }
  }

  std::vector<Example> examples_;
  LabelSpace label_space_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Record format: one JSON object per line.

namespace detail {

inline std::optional<std::string> optional_string(const nlohmann::json& rec, const char* key,
                                                  std::size_t line) {
  auto it = rec.find(key);
  if (it == rec.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw DatasetError(std::string("field '") + key + "' must be a string", line);
  return it->get<std::string>();
}

inline Example example_from_record(const nlohmann::json& rec, const LabelSpace& labels, std::size_t line) {
  if (!rec.is_object()) throw DatasetError("record is not an object", line);
  Example e;
  auto id = optional_string(rec, "id", line);
  auto claim = optional_string(rec, "claim", line);
  if (!id) throw DatasetError("missing field 'id'", line);
  if (!claim) throw DatasetError("missing field 'claim'", line);
  e.id = *id;
  e.claim_text = *claim;
  e.group_key = optional_string(rec, "group_key", line);
  e.final_answer = optional_string(rec, "final_answer", line);
  e.partner_id = optional_string(rec, "partner_id", line);
  if (auto o = optional_string(rec, "orientation", line)) {
    if (*o == "forward") e.orientation = Orientation::forward;
    else if (*o == "reverse") e.orientation = Orientation::reverse;
    else throw DatasetError("orientation must be 'forward' or 'reverse'", line);
  }
  if (auto g = optional_string(rec, "golden_label", line)) {
    auto l = labels.find(*g);
    if (!l) throw DatasetError("golden_label not in label space: " + *g, line);
    e.set_golden_label(*l);
  }
  if (auto it = rec.find("links"); it != rec.end() && !it->is_null()) {
    if (!it->is_array()) throw DatasetError("field 'links' must be an array", line);
    for (const auto& l : *it) {
      try {
        CustomConstraint c;
        c.other_id = l.at("with").get<std::string>();
        for (const auto& p : l.at("forbidden")) {
          if (!p.is_array() || p.size() != 2) throw DatasetError("forbidden entries are label pairs", line);
          c.forbidden.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
        }
        e.custom_links.push_back(std::move(c));
      } catch (const nlohmann::json::exception& ex) {
        throw DatasetError(std::string("malformed link: ") + ex.what(), line);
      }
    }
  }
  return e;
}

}  // namespace detail

inline nlohmann::json to_record(const Example& e, const LabelSpace& labels) {
  nlohmann::json rec = nlohmann::json::object();
  rec["id"] = e.id;
  rec["claim"] = e.claim_text;
  if (e.group_key) rec["group_key"] = *e.group_key;
  if (e.final_answer) rec["final_answer"] = *e.final_answer;
  if (e.partner_id) rec["partner_id"] = *e.partner_id;
  if (e.orientation) rec["orientation"] = std::string(to_string(*e.orientation));
  if (e.has_golden_label())
    rec["golden_label"] = labels.token(*e.golden_label(EvaluationAccess::grant()));
  if (!e.custom_links.empty()) {
    nlohmann::json links = nlohmann::json::array();
    for (const auto& c : e.custom_links) {
      nlohmann::json forbidden = nlohmann::json::array();
      for (const auto& [a, b] : c.forbidden) forbidden.push_back({a, b});
      links.push_back({{"with", c.other_id}, {"forbidden", forbidden}});
    }
    rec["links"] = links;
  }
  return rec;
}

// Parses a whole stream; any violation rejects the stream.
inline Dataset parse_dataset(std::istream& in, const LabelSpace& labels = LabelSpace{}) {
  std::vector<Example> examples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& ex) {
      throw DatasetError(std::string("malformed record: ") + ex.what(), line_no);
    }
    examples.push_back(detail::example_from_record(rec, labels, line_no));
  }
  return Dataset(std::move(examples), labels);
}

inline Dataset parse_dataset(const std::string& text, const LabelSpace& labels = LabelSpace{}) {
  std::istringstream in(text);
  return parse_dataset(in, labels);
}

inline Dataset load_dataset(const std::string& path, const LabelSpace& labels = LabelSpace{}) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open dataset file: " + path);
  return parse_dataset(in, labels);
}

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  for (const auto& e : ds.examples()) out << to_record(e, ds.label_space()).dump() << '\n';
}

inline std::string serialize(const Dataset& ds) {
  std::ostringstream out;
  write_dataset(out, ds);
  return out.str();
}

// ---------------------------------------------------------------------------

using LabelMap = std::vector<std::optional<Label>>;

// Partial labeling of a dataset, indexed by example position. Remembers the
// order in which examples first became labeled; context windows use it.
class Assignment {
 public:
  Assignment() = default;
  explicit Assignment(std::size_t n) : labels_(n) {}

  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t labeled_count() const noexcept { return order_.size(); }
  std::uint64_t version() const noexcept { return version_; }

  std::optional<Label> label(std::size_t i) const { return labels_[i]; }
  bool is_labeled(std::size_t i) const { return labels_[i].has_value(); }
  const std::vector<std::size_t>& insertion_order() const noexcept { return order_; }
  const LabelMap& labels() const noexcept { return labels_; }

  template <class F>
  void for_each_labeled(F&& f) const {
    for (std::size_t i : order_) f(i, *labels_[i]);
  }

  void set(std::size_t i, Label l) {
    if (!labels_[i]) order_.push_back(i);
    labels_[i] = l;
    ++version_;
  }

  // Rebuilds an assignment from its parts (checkpoint restore).
  static Assignment restore(std::size_t n, const std::vector<std::pair<std::size_t, Label>>& ordered,
                            std::uint64_t version) {
    Assignment a(n);
    for (const auto& [i, l] : ordered) a.set(i, l);
    a.version_ = version;
    return a;
  }

  friend bool operator==(const Assignment&, const Assignment&) = default;

 private:
  LabelMap labels_;
  std::vector<std::size_t> order_;
  std::uint64_t version_ = 0;
};

struct LabelChange {
  std::size_t example = 0;
  Label label;
};

// Read-only view of an Assignment with a few labels overridden. Newly labeled
// examples join the insertion order after the base ones, in change order.
class AssignmentOverlay {
 public:
  AssignmentOverlay(const Assignment& base, std::span<const LabelChange> changes)
      : base_(base), changes_(changes) {}

  std::size_t size() const noexcept { return base_.size(); }
  const Assignment& base() const noexcept { return base_; }
  std::span<const LabelChange> changes() const noexcept { return changes_; }

  std::optional<Label> label(std::size_t i) const {
    for (auto it = changes_.rbegin(); it != changes_.rend(); ++it)
      if (it->example == i) return it->label;
    return base_.label(i);
  }

  bool is_labeled(std::size_t i) const { return label(i).has_value(); }

  std::size_t labeled_count() const {
    std::size_t n = base_.labeled_count();
    for (std::size_t k = 0; k < changes_.size(); ++k)
      if (!base_.is_labeled(changes_[k].example) && first_change(k)) ++n;
    return n;
  }

  template <class F>
  void for_each_labeled(F&& f) const {
    for (std::size_t i : base_.insertion_order()) f(i, *label(i));
    for (std::size_t k = 0; k < changes_.size(); ++k) {
      const std::size_t e = changes_[k].example;
      if (!base_.is_labeled(e) && first_change(k)) f(e, *label(e));
    }
  }

 private:
  bool first_change(std::size_t k) const {
    for (std::size_t j = 0; j < k; ++j)
      if (changes_[j].example == changes_[k].example) return false;
    return true;
  }

  const Assignment& base_;
  std::span<const LabelChange> changes_;
};

// Fraction of golden-labeled examples whose assigned label matches.
inline double accuracy(const Assignment& a, const Dataset& ds) {
  const auto access = EvaluationAccess::grant();
  std::size_t with_golden = 0, correct = 0;
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& g = ds[i].golden_label(access);
    if (!g) continue;
    ++with_golden;
    auto l = a.label(i);
    if (!l) {
      missing.push_back(ds[i].id);
      continue;
    }
    if (*l == *g) ++correct;
  }
  if (with_golden == 0) throw EvaluationError("no golden labels");
  if (!missing.empty()) {
    std::string msg = "unlabeled examples with golden labels:";
    for (const auto& id : missing) msg += " " + id;
    throw EvaluationError(msg);
  }
  return static_cast<double>(correct) / static_cast<double>(with_golden);
}

inline LabelMap golden_labels(const Dataset& ds) {
  const auto access = EvaluationAccess::grant();
  LabelMap out(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) out[i] = ds[i].golden_label(access);
  return out;
}

// Agreement of a (possibly partial) labeling with a reference map over every
// example the reference covers. Unlabeled examples count as disagreements.
inline double agreement(const Assignment& a, const LabelMap& reference) {
  std::size_t total = 0, correct = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    if (!reference[i]) continue;
    ++total;
    if (a.label(i) == reference[i]) ++correct;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

inline void write_labeled(std::ostream& out, const Dataset& ds, const Assignment& a) {
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto rec = to_record(ds[i], ds.label_space());
    if (auto l = a.label(i)) {
      rec["label"] = ds.label_space().token(*l);
      rec["source"] = "icm";
    }
    out << rec.dump() << '\n';
  }
}

// Reads the "label" field of a labeled record stream back onto a dataset.
inline Assignment read_labels(std::istream& in, const Dataset& ds) {
  Assignment a(ds.size());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& ex) {
      throw DatasetError(std::string("malformed record: ") + ex.what(), line_no);
    }
    auto id = detail::optional_string(rec, "id", line_no);
    if (!id) throw DatasetError("missing field 'id'", line_no);
    auto idx = ds.index_of(*id);
    if (!idx) throw DatasetError("label for unknown id: " + *id, line_no);
    if (auto tok = detail::optional_string(rec, "label", line_no)) {
      auto l = ds.label_space().find(*tok);
      if (!l) throw DatasetError("label not in label space: " + *tok, line_no);
      a.set(*idx, *l);
    }
  }
  return a;
}

}  // namespace icm
