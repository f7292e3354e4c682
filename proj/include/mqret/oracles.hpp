#pragma once

// Independent reference implementations used by the verify command and the
// test suites. Everything here is written from the defining formulas with
// its own loops; nothing calls the implementation it is checking.

#include <cstdint>
#include <vector>

namespace mqret::oracle {

// textbook correlation: covariance over the product of standard deviations
double pearson(const std::vector<double>& a, const std::vector<double>& b);

// exhaustive facility-location evaluation with a double loop and its own
// similarity computation (optionally shifted by +1)
double facility_location(const std::vector<std::uint32_t>& set,
                         const std::vector<std::vector<double>>& vectors, bool shift);

struct BestSubset {
  std::vector<std::uint32_t> set;
  double value = 0.0;
};

// exhaustive optimum of the facility-location objective over all subsets of
// size exactly k (feasible for n <= ~15)
BestSubset best_facility_subset(const std::vector<std::vector<double>>& vectors, std::size_t k,
                                bool shift);

// exhaustive maximizer of the summed-similarity objective over subsets of
// size k excluding `entity`; ties resolved toward the subset the ordered
// top-k scan would produce
BestSubset best_knn_subset(const std::vector<std::vector<double>>& vectors, std::size_t entity,
                           std::size_t k);

// exp-normalize at extended precision
std::vector<double> softmax(const std::vector<double>& scores,
                            const std::vector<std::uint8_t>& mask);

}  // namespace mqret::oracle
