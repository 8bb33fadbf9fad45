#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mvpp/error.hpp"

namespace mvpp {

// Colour spaces. Discrete colours are non-negative integers (a state of N or a
// label into a finite alphabet); euclidean colours are points of R^dim.
struct Discrete {
  using point_type = std::int64_t;
  using point_ref = std::int64_t;
  static constexpr bool aggregates = true;
  static constexpr const char* name = "discrete";
};

struct Euclidean {
  using point_type = std::vector<double>;
  using point_ref = std::span<const double>;
  static constexpr bool aggregates = false;
  static constexpr const char* name = "euclidean";
};

template <class Space>
class PointStore;

template <>
class PointStore<Discrete> {
 public:
  explicit PointStore(std::size_t /*dim*/ = 1) {}

  std::size_t dim() const { return 1; }
  std::size_t size() const { return points_.size(); }
  std::int64_t operator[](std::size_t i) const { return points_[i]; }

  void push_back(std::int64_t x) { points_.push_back(x); }
  void clear() { points_.clear(); }
  void reserve(std::size_t n) { points_.reserve(n); }

  static void validate(std::int64_t x) {
    if (x < 0) throw InvalidPoint("discrete colour must be >= 0, got " + std::to_string(x));
  }

 private:
  std::vector<std::int64_t> points_;
};

// Flat coordinate storage; point i occupies [i*dim, (i+1)*dim).
template <>
class PointStore<Euclidean> {
 public:
  explicit PointStore(std::size_t dim = 0) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return dim_ == 0 ? 0 : coords_.size() / dim_; }
  std::span<const double> operator[](std::size_t i) const { return {coords_.data() + i * dim_, dim_}; }
  std::span<const double> coords() const { return coords_; }

  void push_back(std::span<const double> x) {
    if (dim_ == 0) dim_ = x.size();
    if (x.size() != dim_)
      throw InvalidPoint("point of dimension " + std::to_string(x.size()) + " in a space of dimension " +
                         std::to_string(dim_));
    coords_.insert(coords_.end(), x.begin(), x.end());
  }
  void push_back(double x) { push_back(std::span<const double>(&x, 1)); }
  void clear() { coords_.clear(); }
  void reserve(std::size_t n) { coords_.reserve(n * (dim_ == 0 ? 1 : dim_)); }

  static void validate(std::span<const double> x) {
    if (x.empty()) throw InvalidPoint("euclidean point needs dimension >= 1");
    for (double c : x)
      if (!std::isfinite(c)) throw InvalidPoint("euclidean point has a non-finite coordinate");
  }

 private:
  std::size_t dim_;
  std::vector<double> coords_;
};

inline Euclidean::point_type to_owned(std::span<const double> x) { return {x.begin(), x.end()}; }
inline std::int64_t to_owned(std::int64_t x) { return x; }

}  // namespace mvpp
