#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "icm/error.hpp"

namespace icm {

// Index of a label token within a LabelSpace.
struct Label {
  std::uint16_t index = 0;
  friend auto operator<=>(const Label&, const Label&) = default;
};

// Ordered set of label tokens. Order is fixed for a run: argmax ties resolve to
// the earlier label, and the first label is the affirmative one ("True") that
// the built-in constraint families forbid on both endpoints.
class LabelSpace {
 public:
  LabelSpace() : LabelSpace(std::vector<std::string>{"True", "False"}) {}

  explicit LabelSpace(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2) throw ConfigError("label space needs at least 2 labels");
    if (tokens_.size() > UINT16_MAX) throw ConfigError("label space too large");
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      for (std::size_t j = i + 1; j < tokens_.size(); ++j)
        if (tokens_[i] == tokens_[j]) throw ConfigError("duplicate label token: " + tokens_[i]);
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  bool binary() const noexcept { return tokens_.size() == 2; }
  const std::string& token(Label l) const { return tokens_.at(l.index); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  Label affirmative() const noexcept { return Label{0}; }

  std::optional<Label> find(std::string_view token) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (tokens_[i] == token) return Label{static_cast<std::uint16_t>(i)};
    return std::nullopt;
  }

  std::vector<Label> all() const {
    std::vector<Label> out;
    out.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) out.push_back(Label{static_cast<std::uint16_t>(i)});
    return out;
  }

  friend bool operator==(const LabelSpace&, const LabelSpace&) = default;

 private:
  std::vector<std::string> tokens_;
};

}  // namespace icm
