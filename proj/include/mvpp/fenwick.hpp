#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mvpp {

// Binary indexed tree over a growable array of weights. Supports O(log n)
// point updates, appends, prefix sums and inverse-cdf search.
class FenwickTree {
 public:
  std::size_t size() const { return tree_.size() - 1; }
  bool empty() const { return size() == 0; }

  void clear() { tree_.assign(1, 0.0); }

  // Rebuilds from scratch in O(n).
  void assign(std::span<const double> weights) {
    tree_.assign(weights.size() + 1, 0.0);
    for (std::size_t i = 1; i <= weights.size(); ++i) {
      tree_[i] += weights[i - 1];
      const std::size_t parent = i + lowbit(i);
      if (parent <= weights.size()) tree_[parent] += tree_[i];
    }
  }

  void push_back(double w) {
    const std::size_t i = tree_.size();
    double node = w;
    for (std::size_t k = 1; k < lowbit(i); k <<= 1) node += tree_[i - k];
    tree_.push_back(node);
  }

  // weight[index] += delta, index 0-based.
  void add(std::size_t index, double delta) {
    for (std::size_t i = index + 1; i < tree_.size(); i += lowbit(i)) tree_[i] += delta;
  }

  // Sum of weights [0, count).
  double prefix(std::size_t count) const {
    double s = 0.0;
    for (std::size_t i = count; i > 0; i -= lowbit(i)) s += tree_[i];
    return s;
  }

  double total() const { return prefix(size()); }

  // Smallest 0-based index j with prefix(j + 1) > target; size() if none.
  std::size_t search(double target) const {
    std::size_t pos = 0;
    std::size_t step = 1;
    while ((step << 1) <= size()) step <<= 1;
    for (; step > 0; step >>= 1) {
      const std::size_t next = pos + step;
      if (next <= size() && tree_[next] <= target) {
        pos = next;
        target -= tree_[next];
      }
    }
    return pos;
  }

 private:
  static std::size_t lowbit(std::size_t i) { return i & (~i + 1); }

  std::vector<double> tree_ = std::vector<double>(1, 0.0);
};

}  // namespace mvpp
