#pragma once

#include <optional>
#include <vector>

#include "mqret/adam.hpp"
#include "mqret/context_db.hpp"
#include "mqret/model.hpp"
#include "mqret/retrieval.hpp"

namespace mqret {

struct TrainOptions {
  int epochs = 60;
  int batch_size = 32;
  AdamConfig adam;
};

struct TrainResult {
  Forecaster model;
  std::vector<double> epoch_loss;  // mean per-entity training loss per epoch
};

// Trains a forecaster on the training view by mini-batch ADAM over entities.
// Variant prerequisites:
//   ret-retrieved: db and plan;  ret-full: db only;  ret-random / baseline*: neither.
// Database rows are frozen inputs; gradients never flow into them.
// Deterministic for a fixed config seed.
TrainResult train_forecaster(const PanelView& train_view, const ModelConfig& config,
                             const TrainOptions& options, const ContextDb* db,
                             const RetrievalPlan* plan);

/// Summed pinball loss by horizon and quantile over a forecast-time range.
struct EvalResult {
  std::size_t horizons = 0;
  std::vector<double> quantiles;
  std::vector<double> loss;  // [H x Q] sums over entities and FCTs
  std::size_t fct_count = 0;
  std::size_t entity_count = 0;

  double at(std::size_t h, std::size_t q) const { return loss[h * quantiles.size() + q]; }
  // horizon_cap = 0 aggregates all horizons, otherwise horizons 1..cap
  double quantile_total(std::size_t q, std::size_t horizon_cap = 0) const;
  double total(std::size_t horizon_cap = 0) const;
};

// Sums quantile losses of the model over the test view's forecast times.
// Retrieval variants read the database rows at the exact forecast time, so
// the database must cover the test window.
EvalResult evaluate(const Forecaster& model, const PanelView& test_view, const ContextDb* db,
                    const RetrievalPlan* plan);

// Forward pass for one entity over chosen forecast times (no training).
std::vector<ForecastGrid> forecast_entity(const Forecaster& model, const PanelView& view,
                                          std::size_t entity,
                                          const std::vector<std::size_t>& fcts,
                                          const ContextDb* db, const RetrievalPlan* plan);

// rescaled metric: model loss / baseline loss (Reporting error on zero baseline)
double rescaled(double model_loss, double baseline_loss);

}  // namespace mqret
