#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace crt {

/// One named covariate column. Numeric columns are standardized (and may be
/// spline-expanded by the GAM learner); the rest are treated as already-coded
/// indicators.
struct Column {
  std::string name;
  std::vector<double> values;
  bool numeric = false;
};

/// Column-major covariate frame handed to the learners.
class Covariates {
public:
  Covariates() = default;
  explicit Covariates(std::size_t rows) : rows_(rows) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return columns_.size(); }
  const std::vector<Column>& columns() const { return columns_; }
  const Column& column(std::size_t j) const { return columns_.at(j); }
  const Column* find(std::string_view name) const;
  std::vector<std::string> names() const;

  void add(std::string name, std::vector<double> values, bool numeric);

  Covariates select(std::span<const std::string> names) const;
  Covariates subset_rows(std::span<const std::size_t> rows) const;
  Covariates with_column(std::string name, std::vector<double> values, bool numeric) const;
  /// Copy with a column's values replaced by a constant (counterfactual prediction).
  Covariates with_constant(std::string_view name, double value) const;

private:
  std::size_t rows_ = 0;
  std::vector<Column> columns_;
};

} // namespace crt
