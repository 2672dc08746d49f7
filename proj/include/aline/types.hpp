#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace aline {

using Vec = std::vector<double>;

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Theta {
  Vec values;
};

struct Design {
  Vec x;
  bool operator==(const Design&) const = default;
};

struct Observation {
  Vec y;
  bool operator==(const Observation&) const = default;
};

struct HistoryPair {
  Design design;
  Observation outcome;
};

/// Ordered context set of acquired (design, outcome) pairs. Step count is the
/// list length.
class History {
 public:
  void push(Design d, Observation o) { pairs_.push_back({std::move(d), std::move(o)}); }
  std::size_t step() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }
  const std::vector<HistoryPair>& pairs() const { return pairs_; }
  const HistoryPair& operator[](std::size_t i) const { return pairs_[i]; }

 private:
  std::vector<HistoryPair> pairs_;
};

struct ParameterSubset {
  std::vector<int> indices;  // sorted, strictly increasing
};

struct PredictiveTarget {
  std::vector<Design> inputs;
  std::vector<Observation> outcomes;  // empty when true outcomes are unknown
};

/// Runtime inference goal: a parameter index subset or a set of predictive
/// target inputs.
struct TargetSpecifier {
  std::variant<ParameterSubset, PredictiveTarget> kind;

  bool is_subset() const { return std::holds_alternative<ParameterSubset>(kind); }
  bool is_predictive() const { return std::holds_alternative<PredictiveTarget>(kind); }
  const ParameterSubset& subset() const { return std::get<ParameterSubset>(kind); }
  const PredictiveTarget& predictive() const { return std::get<PredictiveTarget>(kind); }
  PredictiveTarget& predictive() { return std::get<PredictiveTarget>(kind); }

  std::size_t count() const {
    return is_subset() ? subset().indices.size() : predictive().inputs.size();
  }

  static TargetSpecifier subset_of(std::vector<int> indices) {
    return TargetSpecifier{ParameterSubset{std::move(indices)}};
  }
  static TargetSpecifier predictive_at(std::vector<Design> inputs,
                                       std::vector<Observation> outcomes = {}) {
    return TargetSpecifier{PredictiveTarget{std::move(inputs), std::move(outcomes)}};
  }
};

/// Throws InvalidArgument unless the specifier is well formed for a
/// model with `param_dim` parameters.
void validate_target(const TargetSpecifier& target, int param_dim);

}  // namespace aline
