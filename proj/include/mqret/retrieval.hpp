#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mqret/context_db.hpp"

namespace mqret {

enum class RetrievalMode { Knn, Submodular };
enum class TemporalMode { TimeSpecific, TimeAgnostic };

const char* retrieval_mode_tag(RetrievalMode m);
const char* temporal_mode_tag(TemporalMode m);
RetrievalMode parse_retrieval_mode(const std::string& tag);
TemporalMode parse_temporal_mode(const std::string& tag);

/// Which entities each example attends over. knn mode keeps an ordered
/// neighbor list per entity (per time step when time-specific); submodular
/// mode keeps one shared set (per time step when time-specific).
struct RetrievalPlan {
  RetrievalMode mode = RetrievalMode::Knn;
  TemporalMode temporal = TemporalMode::TimeAgnostic;
  std::size_t k = 0;
  std::size_t entities = 0;
  std::size_t t_begin = 0;
  std::size_t t_end = 0;  // time range covered when time-specific
  std::vector<std::uint32_t> ids;
  std::uint64_t db_fingerprint = 0;
  std::uint64_t seed = 0;

  std::span<const std::uint32_t> neighbors(std::size_t entity, std::size_t t) const;
  std::span<const std::uint32_t> global_set(std::size_t t) const;

  std::uint64_t fingerprint() const;
};

// Pearson correlation between two equal-length vectors, each centered by its
// own mean. A zero-variance (constant) vector scores 0 against everything;
// `degenerate`, when given, is set in that case.
double pearson_similarity(std::span<const double> a, std::span<const double> b,
                          bool* degenerate = nullptr);

/// Dense pairwise similarity matrix over N vectors. `shifted` records whether
/// +1 was added to every pairwise score (restores nonnegativity for the
/// facility-location guarantee).
struct SimilarityMatrix {
  std::size_t n = 0;
  bool shifted = false;
  std::vector<double> values;  // [N x N], diagonal unused

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

SimilarityMatrix pearson_matrix(std::size_t n, std::size_t dim, const double* vectors, bool shift);

// Exact top-K neighbors of entity i by (similarity desc, id asc), self excluded.
std::vector<std::uint32_t> top_k_neighbors(const SimilarityMatrix& sim, std::size_t i,
                                           std::size_t k);

// Facility-location objective: sum over every entity i of the best
// similarity to a member of S other than i itself; an empty candidate set
// contributes 0.
double facility_location_value(const std::vector<std::uint32_t>& set,
                               const SimilarityMatrix& sim);

// Greedy maximization with cardinality k; ties broken by lower entity id.
// The lazy (priority-queue) variant returns exactly the naive sequence on
// monotone submodular instances, i.e. whenever scores are shifted.
std::vector<std::uint32_t> facility_location_greedy(const SimilarityMatrix& sim, std::size_t k,
                                                    bool lazy = true);
std::vector<std::uint32_t> facility_location_greedy_naive(const SimilarityMatrix& sim,
                                                          std::size_t k);

struct SubmodularityReport {
  bool passed = false;
  std::size_t trials = 0;
  std::size_t violations = 0;
  std::size_t monotonicity_violations = 0;
  std::string witness;  // first offending chain, human readable
};

// Samples chains S subset-of T and x not in S, checking the diminishing-returns
// inequality f(S+x)-f(S) >= f(T+x)-f(T) within `tol`, plus monotonicity.
SubmodularityReport submodularity_check(
    const std::function<double(const std::vector<std::uint32_t>&)>& f, std::size_t ground_size,
    std::size_t trials, std::uint64_t seed, double tol = 1e-9);

// k-NN retrieval over the database (Pearson scores, exact full scan).
// Time-specific plans cover every time step the database holds; time-agnostic
// plans are computed from the aggregated training-window vectors.
RetrievalPlan knn_retrieve(const ContextDb& db, std::size_t k, TemporalMode temporal);

// Global-set retrieval via facility-location greedy maximization.
RetrievalPlan submodular_retrieve(const ContextDb& db, std::size_t k, TemporalMode temporal,
                                  bool shift_scores = true);

void verify_plan(const RetrievalPlan& plan, const ContextDb& db);

void save_plan(const RetrievalPlan& plan, const std::filesystem::path& path);
RetrievalPlan load_plan(const std::filesystem::path& path);

}  // namespace mqret
