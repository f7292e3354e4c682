#include "mqret/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "mqret/forward.hpp"
#include "mqret/io.hpp"
#include "mqret/ops.hpp"
#include "mqret/rng.hpp"

namespace mqret {

namespace {

enum class SupportKind { None, Random, Shared, PerEntity };

SupportKind support_kind(const ModelConfig& config, const RetrievalPlan* plan) {
  switch (config.variant) {
    case Variant::Baseline:
    case Variant::BaselineLarge:
      return SupportKind::None;
    case Variant::RetRandom:
      return SupportKind::Random;
    case Variant::RetFull:
      return SupportKind::Shared;
    case Variant::RetRetrieved:
      return plan->mode == RetrievalMode::Knn ? SupportKind::PerEntity : SupportKind::Shared;
  }
  return SupportKind::None;
}

// Key/value projections of the frozen rows attended at one time step, shared
// by every query of that step within one optimizer step.
struct SharedProjection {
  std::vector<std::uint32_t> support;
  std::vector<const double*> rows;
  Tensor kp;  // [S x Da]
  Tensor vp;  // [S x D]
};

class AttentionRuntime {
 public:
  AttentionRuntime(const Forecaster& model, const ContextDb* db, const RetrievalPlan* plan,
                   bool training)
      : model_(model), db_(db), plan_(plan), training_(training),
        kind_(support_kind(model.config, plan)) {}

  SupportKind kind() const { return kind_; }

  void reset() { shared_.clear(); }

  // Builds every shared projection up front so that concurrent readers never
  // mutate the cache (evaluation parallelizes across entities).
  void precompute(const std::vector<std::size_t>& times) {
    if (kind_ != SupportKind::Shared) return;
    for (std::size_t t : times) shared_at(t);
  }

  SharedProjection& shared_at(std::size_t t) {
    auto it = shared_.find(t);
    if (it != shared_.end()) return it->second;
    SharedProjection proj;
    if (model_.config.variant == Variant::RetFull) {
      proj.support.resize(db_->entities);
      for (std::size_t j = 0; j < db_->entities; ++j) {
        proj.support[j] = static_cast<std::uint32_t>(j);
      }
    } else {
      const auto set = plan_->global_set(t);
      proj.support.assign(set.begin(), set.end());
    }
    proj.rows.reserve(proj.support.size());
    for (std::uint32_t j : proj.support) proj.rows.push_back(db_->row(j, t));
    proj.kp = project_rows(proj.rows, db_->dim, model_.params.at("attn.wk"));
    proj.vp = project_rows(proj.rows, db_->dim, model_.params.at("attn.wv"));
    if (training_) {
      proj.kp.ensure_grad();
      proj.vp.ensure_grad();
    }
    return shared_.emplace(t, std::move(proj)).first->second;
  }

  // per-entity neighbor rows (knn plans)
  void neighbor_rows(std::size_t entity, std::size_t t, std::vector<std::uint32_t>& support,
                     std::vector<const double*>& rows) const {
    const auto list = plan_->neighbors(entity, t);
    support.assign(list.begin(), list.end());
    rows.clear();
    rows.reserve(support.size());
    for (std::uint32_t j : support) rows.push_back(db_->row(j, t));
  }

  // flush shared projection gradients into the projection weights
  void flush_gradients(Forecaster& model) {
    for (auto& [t, proj] : shared_) {
      project_rows_backward(proj.rows, db_->dim, proj.kp, model.params.at("attn.wk"));
      project_rows_backward(proj.rows, db_->dim, proj.vp, model.params.at("attn.wv"));
    }
  }

 private:
  const Forecaster& model_;
  const ContextDb* db_;
  const RetrievalPlan* plan_;
  bool training_;
  SupportKind kind_;
  std::map<std::size_t, SharedProjection> shared_;
};

struct FctWork {
  std::size_t t = 0;
  DecodeTrace dec;
  AttentionTrace attn;
  SharedProjection* shared = nullptr;  // borrowed
  // per-entity (knn) attention state
  std::vector<std::uint32_t> support;
  std::vector<const double*> rows;
  Tensor own_kp, own_vp;
};

struct EntityWork {
  EncoderTrace enc;
  std::vector<FctWork> fcts;
};

double entity_forward(const Forecaster& model, const PanelView& view, std::size_t entity,
                      const std::vector<std::size_t>& fcts, AttentionRuntime& attn,
                      bool training, EntityWork& work, EvalResult* eval_accum) {
  const std::size_t d = static_cast<std::size_t>(model.config.context_dim);
  const std::size_t horizons = static_cast<std::size_t>(model.config.horizons);
  const std::size_t cf = model.dims.future;
  const std::size_t q_count = model.config.quantiles.size();
  const double mu = model.norm.mu_y[entity];
  const double sd = model.norm.sd_y[entity];

  run_encoder(model, view, entity, training, work.enc);
  const Tensor& enc = work.enc.enc;

  double loss = 0.0;
  work.fcts.resize(fcts.size());
  for (std::size_t fi = 0; fi < fcts.size(); ++fi) {
    FctWork& fw = work.fcts[fi];
    fw.t = fcts[fi];
    DecodeTrace& dec = fw.dec;

    dec.query = Tensor({1, d}, std::vector<double>(enc.data.begin() + fw.t * d,
                                                   enc.data.begin() + (fw.t + 1) * d));
    if (training) dec.query.ensure_grad();

    switch (attn.kind()) {
      case SupportKind::None:
        break;
      case SupportKind::Random: {
        const double* row = &model.random_contexts.data[(entity * model.dims.weeks + fw.t) * d];
        dec.cross = Tensor({1, d}, std::vector<double>(row, row + d));
        if (training) dec.cross.ensure_grad();
        break;
      }
      case SupportKind::Shared:
      case SupportKind::PerEntity: {
        const Tensor* kp = nullptr;
        const Tensor* vp = nullptr;
        if (attn.kind() == SupportKind::Shared) {
          fw.shared = &attn.shared_at(fw.t);
          fw.support = fw.shared->support;
          kp = &fw.shared->kp;
          vp = &fw.shared->vp;
        } else {
          attn.neighbor_rows(entity, fw.t, fw.support, fw.rows);
          fw.own_kp = project_rows(fw.rows, d, model.params.at("attn.wk"));
          fw.own_vp = project_rows(fw.rows, d, model.params.at("attn.wv"));
          if (training) {
            fw.own_kp.ensure_grad();
            fw.own_vp.ensure_grad();
          }
          kp = &fw.own_kp;
          vp = &fw.own_vp;
        }
        Tensor zero_da({static_cast<std::size_t>(model.config.attn_dim)});
        fw.attn.qp = linear(dec.query, model.params.at("attn.wq"), zero_da);
        if (training) fw.attn.qp.ensure_grad();
        fw.attn.mask.assign(fw.support.size(), 1);
        for (std::size_t j = 0; j < fw.support.size(); ++j) {
          if (fw.support[j] == entity) fw.attn.mask[j] = 0;
        }
        attention_core(fw.attn, *kp, *vp, training);
        dec.cross = Tensor({1, d}, fw.attn.hcross.data);
        if (training) dec.cross.ensure_grad();
        break;
      }
    }

    dec.xf = Tensor({horizons, cf});
    for (std::size_t h = 0; h < horizons; ++h) {
      for (std::size_t c = 0; c < cf; ++c) {
        dec.xf.data[h * cf + c] =
            (view.fut(entity, fw.t + 1 + h, c) - model.norm.mu_fut[c]) / model.norm.sd_fut[c];
      }
    }
    run_decode(model, dec, training);

    for (std::size_t h = 0; h < horizons; ++h) {
      const double y_true = view.y(entity, fw.t + 1 + h);
      for (std::size_t q = 0; q < q_count; ++q) {
        const double yhat = mu + sd * dec.out.at2(h, q);
        const double term = pinball(y_true, yhat, model.config.quantiles[q]);
        loss += term;
        if (eval_accum) eval_accum->loss[h * q_count + q] += term;
      }
    }
  }
  return loss;
}

// scale: upstream gradient of the summed entity loss
void entity_backward(Forecaster& model, const PanelView& view, std::size_t entity,
                     AttentionRuntime& attn, EntityWork& work, double scale) {
  const std::size_t d = static_cast<std::size_t>(model.config.context_dim);
  const std::size_t horizons = static_cast<std::size_t>(model.config.horizons);
  const std::size_t q_count = model.config.quantiles.size();
  const double mu = model.norm.mu_y[entity];
  const double sd = model.norm.sd_y[entity];

  for (FctWork& fw : work.fcts) {
    DecodeTrace& dec = fw.dec;
    for (std::size_t h = 0; h < horizons; ++h) {
      const double y_true = view.y(entity, fw.t + 1 + h);
      for (std::size_t q = 0; q < q_count; ++q) {
        const double yhat = mu + sd * dec.out.at2(h, q);
        dec.out.grad[h * q_count + q] =
            scale * sd * pinball_grad_yhat(y_true, yhat, model.config.quantiles[q]);
      }
    }
    decode_backward(model, dec);

    if (attn.kind() == SupportKind::Shared || attn.kind() == SupportKind::PerEntity) {
      std::memcpy(fw.attn.hcross.grad.data(), dec.cross.grad.data(), d * sizeof(double));
      Tensor& kp = fw.shared ? fw.shared->kp : fw.own_kp;
      Tensor& vp = fw.shared ? fw.shared->vp : fw.own_vp;
      attention_core_backward(fw.attn, kp, vp);
      Tensor zero_da({static_cast<std::size_t>(model.config.attn_dim)});
      Tensor qp_grad(fw.attn.qp.shape, fw.attn.qp.grad);
      linear_backward(qp_grad, dec.query, model.params.at("attn.wq"), zero_da);
      if (!fw.shared) {
        project_rows_backward(fw.rows, d, fw.own_kp, model.params.at("attn.wk"));
        project_rows_backward(fw.rows, d, fw.own_vp, model.params.at("attn.wv"));
      }
    }

    // route the query gradient back into the encoder output
    double* enc_grad = &work.enc.enc.grad[fw.t * d];
    for (std::size_t c = 0; c < d; ++c) enc_grad[c] += dec.query.grad[c];
  }
  encoder_backward(model, work.enc);
}

void validate_inputs(const ModelConfig& config, const PanelView& view, const ContextDb* db,
                     const RetrievalPlan* plan) {
  switch (config.variant) {
    case Variant::Baseline:
    case Variant::BaselineLarge:
    case Variant::RetRandom:
      if (db || plan) {
        throw Error(ErrorKind::Parameter,
                    std::string("variant '") + variant_tag(config.variant) +
                        "' takes neither a context database nor a retrieval plan");
      }
      break;
    case Variant::RetFull:
      if (!db) {
        throw Error(ErrorKind::Parameter, "variant 'ret-full' requires a context database");
      }
      if (plan) {
        throw Error(ErrorKind::Parameter,
                    "variant 'ret-full' attends all entities and takes no retrieval plan");
      }
      break;
    case Variant::RetRetrieved:
      if (!db || !plan) {
        throw Error(ErrorKind::Parameter,
                    "variant 'ret-retrieved' requires a context database and a retrieval plan");
      }
      break;
  }
  if (db) {
    const Panel& panel = view.panel();
    if (db->entities != panel.entities) {
      throw Error(ErrorKind::Data, "database holds " + std::to_string(db->entities) +
                                       " entities, panel has " + std::to_string(panel.entities));
    }
    if (db->panel_fingerprint != panel.fingerprint()) {
      throw Error(ErrorKind::Staleness, "database was built from a different panel");
    }
    if (static_cast<int>(db->dim) != config.context_dim) {
      throw Error(ErrorKind::Data, "database context dim " + std::to_string(db->dim) +
                                       " does not match the model context dim " +
                                       std::to_string(config.context_dim));
    }
  }
  if (plan && db) verify_plan(*plan, *db);
}

}  // namespace

TrainResult train_forecaster(const PanelView& train_view, const ModelConfig& config,
                             const TrainOptions& options, const ContextDb* db,
                             const RetrievalPlan* plan) {
  config.validate();
  validate_inputs(config, train_view, db, plan);
  if (options.epochs < 1 || options.batch_size < 1) {
    throw Error(ErrorKind::Parameter, "epochs and batch size must be >= 1");
  }

  TrainResult result;
  result.model = init_forecaster(config, train_view);
  Forecaster& model = result.model;
  if (db) {
    model.database_fingerprint = db->fingerprint();
    if (db->t_end < train_view.target_bound()) {
      throw Error(ErrorKind::Data, "database rows end at " + std::to_string(db->t_end) +
                                       " and do not cover the training window");
    }
  }

  const std::vector<std::size_t> fcts =
      train_view.forecast_times(static_cast<std::size_t>(config.horizons));
  if (fcts.empty()) {
    throw Error(ErrorKind::Data, "training window leaves no usable forecast creation times");
  }
  const std::size_t n = train_view.panel().entities;

  model.params.ensure_grads();
  std::vector<NamedTensor*> param_ptrs = model.params.pointers();
  AdamState adam;
  adam.config = options.adam;

  AttentionRuntime attn(model, db, plan, /*training=*/true);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(config.seed, 0xE90C + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += options.batch_size) {
      const std::size_t stop = std::min(n, start + options.batch_size);
      const double batch_scale = 1.0 / static_cast<double>(stop - start);

      model.params.zero_grads();
      attn.reset();

      double batch_loss = 0.0;
      for (std::size_t bi = start; bi < stop; ++bi) {
        const std::size_t entity = order[bi];
        EntityWork work;
        const double entity_loss =
            entity_forward(model, train_view, entity, fcts, attn, true, work, nullptr);
        batch_loss += entity_loss;
        entity_backward(model, train_view, entity, attn, work, batch_scale);
      }
      attn.flush_gradients(model);

      if (!std::isfinite(batch_loss)) {
        throw Error(ErrorKind::Training,
                    "non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                        std::to_string(start));
      }
      adam_step(param_ptrs, adam);
      epoch_loss += batch_loss;
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(n));
  }
  return result;
}

double EvalResult::quantile_total(std::size_t q, std::size_t horizon_cap) const {
  const std::size_t cap = horizon_cap == 0 ? horizons : std::min(horizon_cap, horizons);
  double total = 0.0;
  for (std::size_t h = 0; h < cap; ++h) total += loss[h * quantiles.size() + q];
  return total;
}

double EvalResult::total(std::size_t horizon_cap) const {
  double sum = 0.0;
  for (std::size_t q = 0; q < quantiles.size(); ++q) sum += quantile_total(q, horizon_cap);
  return sum;
}

EvalResult evaluate(const Forecaster& model, const PanelView& test_view, const ContextDb* db,
                    const RetrievalPlan* plan) {
  model.config.validate();
  validate_inputs(model.config, test_view, db, plan);
  if (db && model.database_fingerprint != 0 && db->fingerprint() != model.database_fingerprint) {
    throw Error(ErrorKind::Staleness,
                "model was trained against a different context database");
  }

  const std::size_t horizons = static_cast<std::size_t>(model.config.horizons);
  const std::vector<std::size_t> fcts = test_view.forecast_times(horizons);
  if (fcts.empty()) {
    throw Error(ErrorKind::Data, "test window leaves no usable forecast creation times");
  }
  const std::size_t n = test_view.panel().entities;
  const std::size_t q_count = model.config.quantiles.size();

  // per-entity partials merged in entity order for determinism
  std::vector<EvalResult> partials(n);
  AttentionRuntime attn(model, db, plan, /*training=*/false);
  attn.precompute(fcts);
  parallel_for(n, [&](std::size_t i) {
    EvalResult partial;
    partial.horizons = horizons;
    partial.quantiles = model.config.quantiles;
    partial.loss.assign(horizons * q_count, 0.0);
    EntityWork work;
    entity_forward(model, test_view, i, fcts, attn, false, work, &partial);
    partials[i] = std::move(partial);
  });

  EvalResult result;
  result.horizons = horizons;
  result.quantiles = model.config.quantiles;
  result.loss.assign(horizons * q_count, 0.0);
  result.fct_count = fcts.size();
  result.entity_count = n;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < result.loss.size(); ++j) result.loss[j] += partials[i].loss[j];
  }
  return result;
}

std::vector<ForecastGrid> forecast_entity(const Forecaster& model, const PanelView& view,
                                          std::size_t entity,
                                          const std::vector<std::size_t>& fcts,
                                          const ContextDb* db, const RetrievalPlan* plan) {
  validate_inputs(model.config, view, db, plan);
  AttentionRuntime attn(model, db, plan, /*training=*/false);
  EntityWork work;
  entity_forward(model, view, entity, fcts, attn, false, work, nullptr);

  const std::size_t q_count = model.config.quantiles.size();
  const std::size_t horizons = static_cast<std::size_t>(model.config.horizons);
  const double mu = model.norm.mu_y[entity];
  const double sd = model.norm.sd_y[entity];

  std::vector<ForecastGrid> grids;
  grids.reserve(fcts.size());
  for (const FctWork& fw : work.fcts) {
    ForecastGrid grid;
    grid.entity = entity;
    grid.time = fw.t;
    grid.horizons = horizons;
    grid.quantile_count = q_count;
    grid.values.resize(horizons * q_count);
    for (std::size_t h = 0; h < horizons; ++h) {
      for (std::size_t q = 0; q < q_count; ++q) {
        grid.values[h * q_count + q] = mu + sd * fw.dec.out.at2(h, q);
      }
    }
    grids.push_back(std::move(grid));
  }
  return grids;
}

double rescaled(double model_loss, double baseline_loss) {
  if (!(baseline_loss > 0.0)) {
    throw Error(ErrorKind::Reporting,
                "rescaling requires a positive baseline loss, got " +
                    std::to_string(baseline_loss));
  }
  return model_loss / baseline_loss;
}

}  // namespace mqret
