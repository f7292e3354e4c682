#include "mqret/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <queue>
#include <sstream>

#include "mqret/io.hpp"
#include "mqret/rng.hpp"

namespace mqret {

const char* retrieval_mode_tag(RetrievalMode m) {
  return m == RetrievalMode::Knn ? "knn" : "subm";
}

const char* temporal_mode_tag(TemporalMode m) {
  return m == TemporalMode::TimeSpecific ? "specific" : "agnostic";
}

RetrievalMode parse_retrieval_mode(const std::string& tag) {
  if (tag == "knn") return RetrievalMode::Knn;
  if (tag == "subm" || tag == "submodular") return RetrievalMode::Submodular;
  throw Error(ErrorKind::Parameter, "unknown retrieval mode '" + tag + "'");
}

TemporalMode parse_temporal_mode(const std::string& tag) {
  if (tag == "specific") return TemporalMode::TimeSpecific;
  if (tag == "agnostic") return TemporalMode::TimeAgnostic;
  throw Error(ErrorKind::Parameter, "unknown temporal mode '" + tag + "'");
}

// ---- plan accessors --------------------------------------------------------

std::span<const std::uint32_t> RetrievalPlan::neighbors(std::size_t entity, std::size_t t) const {
  if (mode != RetrievalMode::Knn) {
    throw Error(ErrorKind::Parameter, "plan holds a global set, not per-entity neighbors");
  }
  if (temporal == TemporalMode::TimeAgnostic) {
    return {&ids[entity * k], k};
  }
  if (t < t_begin || t >= t_end) {
    throw Error(ErrorKind::Alignment, "plan has no entry at time " + std::to_string(t));
  }
  return {&ids[((t - t_begin) * entities + entity) * k], k};
}

std::span<const std::uint32_t> RetrievalPlan::global_set(std::size_t t) const {
  if (mode != RetrievalMode::Submodular) {
    throw Error(ErrorKind::Parameter, "plan holds per-entity neighbors, not a global set");
  }
  if (temporal == TemporalMode::TimeAgnostic) {
    return {ids.data(), k};
  }
  if (t < t_begin || t >= t_end) {
    throw Error(ErrorKind::Alignment, "plan has no entry at time " + std::to_string(t));
  }
  return {&ids[(t - t_begin) * k], k};
}

std::uint64_t RetrievalPlan::fingerprint() const {
  Fingerprint fp;
  fp.update_string(retrieval_mode_tag(mode));
  fp.update_string(temporal_mode_tag(temporal));
  fp.update_u64(k);
  fp.update_u64(entities);
  fp.update_u64(t_begin);
  fp.update_u64(t_end);
  fp.update_u64(db_fingerprint);
  fp.update(ids.data(), ids.size() * sizeof(std::uint32_t));
  return fp.digest();
}

// ---- similarity -------------------------------------------------------------

double pearson_similarity(std::span<const double> a, std::span<const double> b,
                          bool* degenerate) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::Dimension, "pearson_similarity: vectors have lengths " +
                                          std::to_string(a.size()) + " and " +
                                          std::to_string(b.size()));
  }
  if (a.size() < 2) {
    throw Error(ErrorKind::Parameter, "pearson_similarity: vectors must have length >= 2");
  }
  if (degenerate) *degenerate = false;
  const std::size_t n = a.size();
  double mean_a = 0.0, mean_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_a += a[i];
    mean_b += b[i];
  }
  mean_a /= static_cast<double>(n);
  mean_b /= static_cast<double>(n);
  double dot = 0.0, norm_a = 0.0, norm_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ca = a[i] - mean_a;
    const double cb = b[i] - mean_b;
    dot += ca * cb;
    norm_a += ca * ca;
    norm_b += cb * cb;
  }
  if (norm_a == 0.0 || norm_b == 0.0) {
    // constant vector: defined as similarity 0 rather than an error
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return dot / (std::sqrt(norm_a) * std::sqrt(norm_b));
}

SimilarityMatrix pearson_matrix(std::size_t n, std::size_t dim, const double* vectors,
                                bool shift) {
  SimilarityMatrix sim;
  sim.n = n;
  sim.shifted = shift;
  sim.values.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double s = pearson_similarity({vectors + i * dim, dim}, {vectors + j * dim, dim});
      sim.values[i * n + j] = shift ? s + 1.0 : s;
    }
  }
  return sim;
}

std::vector<std::uint32_t> top_k_neighbors(const SimilarityMatrix& sim, std::size_t i,
                                           std::size_t k) {
  if (k >= sim.n) {
    throw Error(ErrorKind::Parameter, "top_k_neighbors: k = " + std::to_string(k) +
                                          " must be smaller than the entity count " +
                                          std::to_string(sim.n));
  }
  std::vector<std::uint32_t> order;
  order.reserve(sim.n - 1);
  for (std::uint32_t j = 0; j < sim.n; ++j) {
    if (j != i) order.push_back(j);
  }
  // similarity descending, then lower entity id
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const double sa = sim.at(i, a), sb = sim.at(i, b);
    if (sa != sb) return sa > sb;
    return a < b;
  });
  order.resize(k);
  return order;
}

// ---- facility location --------------------------------------------------------

double facility_location_value(const std::vector<std::uint32_t>& set,
                               const SimilarityMatrix& sim) {
  if (set.empty()) {
    throw Error(ErrorKind::Parameter, "facility_location_value: the set must be nonempty");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < sim.n; ++i) {
    double best = 0.0;  // empty max convention
    bool any = false;
    for (std::uint32_t j : set) {
      if (j == i) continue;
      const double s = sim.at(i, j);
      if (!any || s > best) {
        best = s;
        any = true;
      }
    }
    if (any) total += best;
  }
  return total;
}

namespace {

// Incremental facility-location state: per-entity best similarity to the
// selected set (self excluded). Both greedy variants use the same gain
// arithmetic so their float results are identical.
struct GreedyState {
  std::vector<double> best;
  std::vector<std::uint8_t> has;

  explicit GreedyState(std::size_t n) : best(n, 0.0), has(n, 0) {}

  double gain(std::uint32_t x, const SimilarityMatrix& sim) const {
    double total = 0.0;
    for (std::size_t i = 0; i < sim.n; ++i) {
      if (i == x) continue;
      const double s = sim.at(i, x);
      if (!has[i]) {
        total += s;
      } else if (s > best[i]) {
        total += s - best[i];
      }
    }
    return total;
  }

  void add(std::uint32_t x, const SimilarityMatrix& sim) {
    for (std::size_t i = 0; i < sim.n; ++i) {
      if (i == x) continue;
      const double s = sim.at(i, x);
      if (!has[i] || s > best[i]) {
        best[i] = s;
        has[i] = 1;
      }
    }
  }
};

}  // namespace

std::vector<std::uint32_t> facility_location_greedy_naive(const SimilarityMatrix& sim,
                                                          std::size_t k) {
  if (k > sim.n) {
    throw Error(ErrorKind::Parameter, "facility_location_greedy: k = " + std::to_string(k) +
                                          " exceeds the entity count " + std::to_string(sim.n));
  }
  GreedyState state(sim.n);
  std::vector<std::uint32_t> selected;
  std::vector<std::uint8_t> taken(sim.n, 0);
  while (selected.size() < k) {
    double best_gain = -std::numeric_limits<double>::infinity();
    std::uint32_t best_id = 0;
    for (std::uint32_t x = 0; x < sim.n; ++x) {
      if (taken[x]) continue;
      const double g = state.gain(x, sim);
      if (g > best_gain) {
        best_gain = g;
        best_id = x;
      }
    }
    state.add(best_id, sim);
    taken[best_id] = 1;
    selected.push_back(best_id);
  }
  return selected;
}

std::vector<std::uint32_t> facility_location_greedy(const SimilarityMatrix& sim, std::size_t k,
                                                    bool lazy) {
  if (!lazy) return facility_location_greedy_naive(sim, k);
  if (k > sim.n) {
    throw Error(ErrorKind::Parameter, "facility_location_greedy: k = " + std::to_string(k) +
                                          " exceeds the entity count " + std::to_string(sim.n));
  }

  GreedyState state(sim.n);
  std::vector<std::uint32_t> selected;

  struct Candidate {
    double gain;
    std::uint32_t id;
    std::size_t round;  // selection round the gain was computed in
  };
  const auto worse = [](const Candidate& a, const Candidate& b) {
    if (a.gain != b.gain) return a.gain < b.gain;
    return a.id > b.id;  // lower id wins ties
  };
  std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> heap(worse);
  for (std::uint32_t x = 0; x < sim.n; ++x) heap.push({state.gain(x, sim), x, 0});

  while (selected.size() < k && !heap.empty()) {
    Candidate top = heap.top();
    heap.pop();
    if (top.round != selected.size()) {
      // stale marginal gain; recompute and reinsert
      top.gain = state.gain(top.id, sim);
      top.round = selected.size();
      heap.push(top);
      continue;
    }
    state.add(top.id, sim);
    selected.push_back(top.id);
  }
  return selected;
}

SubmodularityReport submodularity_check(
    const std::function<double(const std::vector<std::uint32_t>&)>& f, std::size_t ground_size,
    std::size_t trials, std::uint64_t seed, double tol) {
  SubmodularityReport report;
  report.trials = trials;
  Rng rng(seed);

  const auto render = [](const std::vector<std::uint32_t>& s) {
    std::ostringstream os;
    os << "{";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "}";
    return os.str();
  };

  for (std::size_t trial = 0; trial < trials; ++trial) {
    // random chain S subset T subset ground, plus x outside S
    std::vector<std::uint32_t> small, large, outside;
    for (std::uint32_t e = 0; e < ground_size; ++e) {
      const double r = rng.uniform();
      if (r < 1.0 / 3.0) {
        small.push_back(e);
        large.push_back(e);
      } else if (r < 2.0 / 3.0) {
        large.push_back(e);
      } else {
        outside.push_back(e);
      }
    }
    std::vector<std::uint32_t> x_pool = outside;
    for (std::uint32_t e : large) {
      if (std::find(small.begin(), small.end(), e) == small.end()) x_pool.push_back(e);
    }
    if (x_pool.empty() || large.empty()) continue;
    const std::uint32_t x = x_pool[rng.below(x_pool.size())];

    std::vector<std::uint32_t> small_x = small;
    if (std::find(small_x.begin(), small_x.end(), x) == small_x.end()) small_x.push_back(x);
    std::vector<std::uint32_t> large_x = large;
    const bool x_in_large = std::find(large.begin(), large.end(), x) != large.end();
    if (!x_in_large) large_x.push_back(x);

    const double f_small = small.empty() ? 0.0 : f(small);
    const double f_small_x = f(small_x);
    const double f_large = f(large);
    const double f_large_x = x_in_large ? f_large : f(large_x);

    const double gain_small = f_small_x - f_small;
    const double gain_large = f_large_x - f_large;
    if (gain_small + tol < gain_large) {
      ++report.violations;
      if (report.witness.empty()) {
        std::ostringstream os;
        os << "diminishing returns violated: S=" << render(small) << " T=" << render(large)
           << " x=" << x << " gives gains " << gain_small << " < " << gain_large;
        report.witness = os.str();
      }
    }
    if (gain_small < -tol || gain_large < -tol) {
      ++report.monotonicity_violations;
      if (report.witness.empty()) {
        std::ostringstream os;
        os << "monotonicity violated: adding x=" << x << " to S=" << render(small) << " or T="
           << render(large) << " decreases the objective";
        report.witness = os.str();
      }
    }
  }
  report.passed = report.violations == 0 && report.monotonicity_violations == 0;
  return report;
}

// ---- retrieval over the database --------------------------------------------

namespace {

// entity-contiguous copy of all rows at one time step (db stores time-major
// per entity, so rows at a fixed t are strided)
std::vector<double> rows_at_time(const ContextDb& db, std::size_t t) {
  std::vector<double> snapshot(db.entities * db.dim);
  for (std::size_t i = 0; i < db.entities; ++i) {
    std::memcpy(&snapshot[i * db.dim], db.row(i, t), db.dim * sizeof(double));
  }
  return snapshot;
}

}  // namespace

RetrievalPlan knn_retrieve(const ContextDb& db, std::size_t k, TemporalMode temporal) {
  if (k == 0 || k >= db.entities) {
    throw Error(ErrorKind::Parameter, "knn_retrieve: need 0 < K < N, got K = " +
                                          std::to_string(k) + " with N = " +
                                          std::to_string(db.entities));
  }
  RetrievalPlan plan;
  plan.mode = RetrievalMode::Knn;
  plan.temporal = temporal;
  plan.k = k;
  plan.entities = db.entities;
  plan.db_fingerprint = db.fingerprint();
  plan.seed = db.seed;

  if (temporal == TemporalMode::TimeAgnostic) {
    const AggregatedContexts agg = aggregate(db);
    const SimilarityMatrix sim =
        pearson_matrix(db.entities, db.dim, agg.values.data(), /*shift=*/false);
    plan.ids.assign(db.entities * k, 0);
    parallel_for(db.entities, [&](std::size_t i) {
      const std::vector<std::uint32_t> nn = top_k_neighbors(sim, i, k);
      std::copy(nn.begin(), nn.end(), plan.ids.begin() + i * k);
    });
    return plan;
  }

  plan.t_begin = db.t_begin;
  plan.t_end = db.t_end;
  plan.ids.assign(db.steps() * db.entities * k, 0);
  parallel_for(db.steps(), [&](std::size_t step) {
    const std::size_t t = db.t_begin + step;
    const std::vector<double> snapshot = rows_at_time(db, t);
    const SimilarityMatrix sim =
        pearson_matrix(db.entities, db.dim, snapshot.data(), /*shift=*/false);
    for (std::size_t i = 0; i < db.entities; ++i) {
      const std::vector<std::uint32_t> nn = top_k_neighbors(sim, i, k);
      std::copy(nn.begin(), nn.end(), plan.ids.begin() + (step * db.entities + i) * k);
    }
  });
  return plan;
}

RetrievalPlan submodular_retrieve(const ContextDb& db, std::size_t k, TemporalMode temporal,
                                  bool shift_scores) {
  if (k == 0 || k > db.entities) {
    throw Error(ErrorKind::Parameter, "submodular_retrieve: need 0 < k <= N, got k = " +
                                          std::to_string(k) + " with N = " +
                                          std::to_string(db.entities));
  }
  RetrievalPlan plan;
  plan.mode = RetrievalMode::Submodular;
  plan.temporal = temporal;
  plan.k = k;
  plan.entities = db.entities;
  plan.db_fingerprint = db.fingerprint();
  plan.seed = db.seed;

  if (temporal == TemporalMode::TimeAgnostic) {
    const AggregatedContexts agg = aggregate(db);
    const SimilarityMatrix sim =
        pearson_matrix(db.entities, db.dim, agg.values.data(), shift_scores);
    plan.ids = facility_location_greedy(sim, k, /*lazy=*/shift_scores);
    return plan;
  }

  plan.t_begin = db.t_begin;
  plan.t_end = db.t_end;
  plan.ids.assign(db.steps() * k, 0);
  parallel_for(db.steps(), [&](std::size_t step) {
    const std::size_t t = db.t_begin + step;
    const std::vector<double> snapshot = rows_at_time(db, t);
    const SimilarityMatrix sim = pearson_matrix(db.entities, db.dim, snapshot.data(), shift_scores);
    const std::vector<std::uint32_t> set =
        facility_location_greedy(sim, k, /*lazy=*/shift_scores);
    std::copy(set.begin(), set.end(), plan.ids.begin() + step * k);
  });
  return plan;
}

void verify_plan(const RetrievalPlan& plan, const ContextDb& db) {
  if (plan.db_fingerprint != db.fingerprint()) {
    throw Error(ErrorKind::Staleness,
                "retrieval plan was computed from a different context database");
  }
  if (plan.entities != db.entities) {
    throw Error(ErrorKind::Staleness, "retrieval plan entity count does not match the database");
  }
}

// ---- plan files ---------------------------------------------------------------

void save_plan(const RetrievalPlan& plan, const std::filesystem::path& path) {
  std::map<std::string, std::string> kv;
  kv["plan.mode"] = retrieval_mode_tag(plan.mode);
  kv["plan.temporal"] = temporal_mode_tag(plan.temporal);
  kv["plan.k"] = std::to_string(plan.k);
  kv["plan.entities"] = std::to_string(plan.entities);
  kv["plan.t_begin"] = std::to_string(plan.t_begin);
  kv["plan.t_end"] = std::to_string(plan.t_end);
  kv["plan.db_fingerprint"] = fingerprint_hex(plan.db_fingerprint);
  kv["plan.seed"] = std::to_string(plan.seed);
  const std::string header = render_kv_text(kv);

  BinaryWriter w(path);
  w.bytes("MQPLAN\n", 7);
  w.text(header);
  w.u64(plan.ids.size());
  w.u32s(plan.ids);
  w.close();
}

RetrievalPlan load_plan(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorKind::Dependency,
                "retrieval plan '" + path.string() + "' does not exist; run retrieve first");
  }
  BinaryReader r(path);
  char magic[7];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, "MQPLAN\n", 7) != 0) {
    throw Error(ErrorKind::Format, "'" + path.string() + "' is not a retrieval plan (bad magic)");
  }
  const auto kv = parse_kv_text(r.text());
  RetrievalPlan plan;
  plan.mode = parse_retrieval_mode(kv_get(kv, "plan.mode", ""));
  plan.temporal = parse_temporal_mode(kv_get(kv, "plan.temporal", ""));
  plan.k = static_cast<std::size_t>(kv_get_i64(kv, "plan.k", 0));
  plan.entities = static_cast<std::size_t>(kv_get_i64(kv, "plan.entities", 0));
  plan.t_begin = static_cast<std::size_t>(kv_get_i64(kv, "plan.t_begin", 0));
  plan.t_end = static_cast<std::size_t>(kv_get_i64(kv, "plan.t_end", 0));
  plan.db_fingerprint = parse_fingerprint_hex(kv_get(kv, "plan.db_fingerprint", "0"));
  plan.seed = static_cast<std::uint64_t>(kv_get_i64(kv, "plan.seed", 0));

  const std::uint64_t count = r.u64();
  std::size_t expected = 0;
  const std::size_t steps = plan.t_end - plan.t_begin;
  if (plan.mode == RetrievalMode::Knn) {
    expected = plan.temporal == TemporalMode::TimeAgnostic ? plan.entities * plan.k
                                                           : steps * plan.entities * plan.k;
  } else {
    expected = plan.temporal == TemporalMode::TimeAgnostic ? plan.k : steps * plan.k;
  }
  if (count != expected) {
    throw Error(ErrorKind::Format, "plan id list holds " + std::to_string(count) +
                                       " entries, header implies " + std::to_string(expected));
  }
  plan.ids = r.u32s(count);
  r.expect_eof("plan ids");
  for (std::uint32_t id : plan.ids) {
    if (id >= plan.entities) {
      throw Error(ErrorKind::Format, "plan references entity " + std::to_string(id) +
                                         " outside the population of " +
                                         std::to_string(plan.entities));
    }
  }
  return plan;
}

}  // namespace mqret
