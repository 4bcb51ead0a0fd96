#include "crt/covariates.hpp"

#include <algorithm>
#include <stdexcept>

#include "crt/error.hpp"

namespace crt {

const Column* Covariates::find(std::string_view name) const {
  for (const auto& c : columns_)
    if (c.name == name) return &c;
  return nullptr;
}

std::vector<std::string> Covariates::names() const {
  std::vector<std::string> out;
  out.reserve(columns_.size());
  for (const auto& c : columns_) out.push_back(c.name);
  return out;
}

void Covariates::add(std::string name, std::vector<double> values, bool numeric) {
  if (columns_.empty() && rows_ == 0) rows_ = values.size();
  if (values.size() != rows_)
    throw std::invalid_argument("covariate '" + name + "' has " + std::to_string(values.size()) +
                                " rows, frame has " + std::to_string(rows_));
  if (find(name)) throw std::invalid_argument("duplicate covariate '" + name + "'");
  columns_.push_back(Column{std::move(name), std::move(values), numeric});
}

Covariates Covariates::select(std::span<const std::string> names) const {
  Covariates out(rows_);
  for (const auto& n : names) {
    const Column* c = find(n);
    if (!c) throw ConfigError("unknown covariate '" + n + "'");
    out.add(c->name, c->values, c->numeric);
  }
  return out;
}

Covariates Covariates::subset_rows(std::span<const std::size_t> rows) const {
  Covariates out(rows.size());
  for (const auto& c : columns_) {
    std::vector<double> v;
    v.reserve(rows.size());
    for (auto r : rows) v.push_back(c.values[r]);
    out.add(c.name, std::move(v), c.numeric);
  }
  return out;
}

Covariates Covariates::with_column(std::string name, std::vector<double> values, bool numeric) const {
  Covariates out = *this;
  out.add(std::move(name), std::move(values), numeric);
  return out;
}

Covariates Covariates::with_constant(std::string_view name, double value) const {
  Covariates out = *this;
  for (auto& c : out.columns_)
    if (c.name == name) std::fill(c.values.begin(), c.values.end(), value);
  return out;
}

} // namespace crt
