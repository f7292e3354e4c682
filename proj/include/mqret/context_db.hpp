#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mqret/model.hpp"

namespace mqret {

/// Frozen database of encoded contexts h0_{i,t} produced by a pretrained
/// baseline encoder, plus the training-window boundary used for retrieval
/// and aggregation. Rows cover absolute times [t_begin, t_end).
struct ContextDb {
  std::size_t entities = 0;
  std::size_t t_begin = 0;
  std::size_t t_end = 0;
  std::size_t train_end = 0;  // selection/aggregation use rows before this time
  std::size_t dim = 0;
  std::vector<std::string> entity_ids;
  std::vector<double> values;  // [N x steps x D]
  std::uint64_t checkpoint_fingerprint = 0;
  std::uint64_t panel_fingerprint = 0;
  std::uint64_t seed = 0;

  std::size_t steps() const { return t_end - t_begin; }

  const double* row(std::size_t i, std::size_t t) const {
    if (t < t_begin || t >= t_end) {
      throw Error(ErrorKind::Alignment, "database has no rows at time " + std::to_string(t));
    }
    return &values[(i * steps() + (t - t_begin)) * dim];
  }

  std::uint64_t fingerprint() const;
};

/// Per-entity time-aggregated context vectors v0_i over the training window.
struct AggregatedContexts {
  std::size_t entities = 0;
  std::size_t dim = 0;
  std::vector<double> values;  // [N x D]
  std::uint64_t db_fingerprint = 0;

  const double* row(std::size_t i) const { return &values[i * dim]; }
};

// Runs the frozen encoder of a trained baseline over every entity and stores
// rows for times in `window`. No weight updates happen. `train_end` marks the
// boundary that aggregation and retrieval-set selection are allowed to use.
ContextDb build_database(const Forecaster& base, const Panel& panel, Window window,
                         std::size_t train_end,
                         std::optional<std::size_t> expected_dim = std::nullopt);

// v0_i = sum of h0_{i,t} over the training window rows only.
AggregatedContexts aggregate(const ContextDb& db);

// Staleness guard: throws unless `db` was built by `model`'s checkpoint.
void verify_database(const ContextDb& db, const Forecaster& model);

void save_database(const ContextDb& db, const std::filesystem::path& path);
ContextDb load_database(const std::filesystem::path& path);

}  // namespace mqret
