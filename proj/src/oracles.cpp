#include "mqret/oracles.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace mqret::oracle {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  double mean_a = 0.0, mean_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_a += a[i];
    mean_b += b[i];
  }
  mean_a /= static_cast<double>(n);
  mean_b /= static_cast<double>(n);
  double cov = 0.0, var_a = 0.0, var_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (a[i] - mean_a) * (b[i] - mean_b);
    var_a += (a[i] - mean_a) * (a[i] - mean_a);
    var_b += (b[i] - mean_b) * (b[i] - mean_b);
  }
  if (var_a == 0.0 || var_b == 0.0) return 0.0;
  return (cov / static_cast<double>(n)) /
         (std::sqrt(var_a / static_cast<double>(n)) * std::sqrt(var_b / static_cast<double>(n)));
}

double facility_location(const std::vector<std::uint32_t>& set,
                         const std::vector<std::vector<double>>& vectors, bool shift) {
  double total = 0.0;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::uint32_t j : set) {
      if (j == i) continue;
      const double s = pearson(vectors[i], vectors[j]) + (shift ? 1.0 : 0.0);
      if (s > best) best = s;
    }
    if (best != -std::numeric_limits<double>::infinity()) total += best;
  }
  return total;
}

namespace {

// iterates over all k-subsets of [0, n)
bool next_combination(std::vector<std::uint32_t>& comb, std::size_t n) {
  const std::size_t k = comb.size();
  for (std::size_t i = k; i-- > 0;) {
    if (comb[i] + 1 <= n - (k - i)) {
      ++comb[i];
      for (std::size_t j = i + 1; j < k; ++j) comb[j] = comb[j - 1] + 1;
      return true;
    }
  }
  return false;
}

}  // namespace

BestSubset best_facility_subset(const std::vector<std::vector<double>>& vectors, std::size_t k,
                                bool shift) {
  const std::size_t n = vectors.size();
  if (k == 0 || k > n) throw std::invalid_argument("best_facility_subset: bad k");
  std::vector<std::uint32_t> comb(k);
  for (std::size_t i = 0; i < k; ++i) comb[i] = static_cast<std::uint32_t>(i);

  BestSubset best;
  best.value = -std::numeric_limits<double>::infinity();
  do {
    const double value = facility_location(comb, vectors, shift);
    if (value > best.value) {
      best.value = value;
      best.set = comb;
    }
  } while (next_combination(comb, n));
  return best;
}

BestSubset best_knn_subset(const std::vector<std::vector<double>>& vectors, std::size_t entity,
                           std::size_t k) {
  const std::size_t n = vectors.size();
  if (k == 0 || k >= n) throw std::invalid_argument("best_knn_subset: bad k");

  std::vector<std::uint32_t> candidates;
  for (std::uint32_t j = 0; j < n; ++j) {
    if (j != entity) candidates.push_back(j);
  }
  std::vector<std::uint32_t> comb(k);
  for (std::size_t i = 0; i < k; ++i) comb[i] = static_cast<std::uint32_t>(i);

  BestSubset best;
  best.value = -std::numeric_limits<double>::infinity();
  do {
    double value = 0.0;
    std::vector<std::uint32_t> subset(k);
    for (std::size_t i = 0; i < k; ++i) {
      subset[i] = candidates[comb[i]];
      value += pearson(vectors[entity], vectors[subset[i]]);
    }
    if (value > best.value + 1e-15) {
      best.value = value;
      best.set = subset;
    }
  } while (next_combination(comb, candidates.size()));
  return best;
}

std::vector<double> softmax(const std::vector<double>& scores,
                            const std::vector<std::uint8_t>& mask) {
  long double hi = -std::numeric_limits<long double>::infinity();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (mask[i] && scores[i] > hi) hi = scores[i];
  }
  long double total = 0.0L;
  std::vector<long double> e(scores.size(), 0.0L);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (mask[i]) {
      e[i] = expl(static_cast<long double>(scores[i]) - hi);
      total += e[i];
    }
  }
  std::vector<double> out(scores.size(), 0.0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (mask[i]) out[i] = static_cast<double>(e[i] / total);
  }
  return out;
}

}  // namespace mqret::oracle
