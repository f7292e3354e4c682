#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mqret/panel.hpp"
#include "mqret/tensor.hpp"

namespace mqret {

enum class Variant { Baseline, BaselineLarge, RetRandom, RetFull, RetRetrieved };

const char* variant_tag(Variant v);
Variant parse_variant(const std::string& tag);
bool is_retrieval_variant(Variant v);

struct ConvLayerSpec {
  int kernel = 2;
  int dilation = 1;
  int filters = 12;
};

struct ModelConfig {
  int context_dim = 16;  // D, width of h_{i,t}
  std::vector<ConvLayerSpec> conv_stack = {{2, 1, 12}, {2, 2, 12}, {2, 4, 12}, {2, 8, 12}};
  int decoder_hidden = 20;
  int horizons = 8;
  std::vector<double> quantiles = {0.5, 0.9};
  Variant variant = Variant::Baseline;
  int attn_dim = 16;  // D_a
  int static_embed = 4;  // embedding width per static channel
  std::uint64_t seed = 1;

  void validate() const;
  std::string canonical_text() const;
  static ModelConfig parse(const std::string& text);
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv,
                             const std::string& prefix);
};

struct PanelDims {
  std::size_t historic = 0;
  std::size_t future = 0;
  std::size_t statics = 0;
  std::size_t entities = 0;
  std::size_t weeks = 0;
};

// Input standardization constants, frozen at training time and carried in
// the checkpoint. Per-entity target stats, per-channel covariate stats.
struct Normalizer {
  std::vector<double> mu_y, sd_y;
  std::vector<double> mu_hist, sd_hist;
  std::vector<double> mu_fut, sd_fut;
  std::vector<double> mu_stat, sd_stat;
};

struct ParamStore {
  std::vector<NamedTensor> items;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const;
  std::vector<NamedTensor*> pointers();
  std::size_t total_size() const;
  void ensure_grads();
  void zero_grads();
};

/// Spec domain types for the encoder/attention contracts.
struct EncodedContext {
  std::size_t entity = 0;
  std::size_t time = 0;
  std::vector<double> values;
};

struct CrossEntityContext {
  std::size_t entity = 0;
  std::size_t time = 0;
  std::vector<double> values;
  std::vector<std::uint32_t> support;  // attended entities, self excluded
  std::vector<double> weights;         // attention weights over `support`
};

struct ForecastGrid {
  std::size_t entity = 0;
  std::size_t time = 0;
  std::size_t horizons = 0;
  std::size_t quantile_count = 0;
  std::vector<double> values;  // [H x Q], horizon-major

  double at(std::size_t h, std::size_t q) const { return values[h * quantile_count + q]; }
};

/// The Seq2Seq quantile forecaster (baseline or retrieval-augmented).
struct Forecaster {
  ModelConfig config;
  PanelDims dims;
  ParamStore params;
  Normalizer norm;
  Tensor random_contexts;  // [N x T x D], only for the ret-random variant
  std::uint64_t panel_fingerprint = 0;
  std::uint64_t database_fingerprint = 0;  // recorded by train-ret for staleness checks

  std::size_t input_channels() const;
  std::size_t embed_width() const;
};

Forecaster init_forecaster(const ModelConfig& config, const PanelView& train_view);

// Trainable parameter count for a config on a panel with the given channel
// counts (buffers excluded).
std::size_t count_parameters(const ModelConfig& config, const PanelDims& dims);

// Sizes the baseline-large config so its parameter count matches the
// ret-full twin of `base` within 1%, by widening the conv stack and
// fine-tuning the decoder width.
ModelConfig derive_large_config(const ModelConfig& base, const PanelDims& dims);

// Runs the encoder over entity `i` for all times in [0, view.target_bound()).
// Returns [T x D]; row t is h_{i,t} and depends only on data at times <= t.
Tensor encode_entity(const Forecaster& model, const PanelView& view, std::size_t entity);

// One frozen database row handed to the attention op.
struct ContextRowRef {
  std::uint32_t entity = 0;
  std::size_t time = 0;
  std::span<const double> values;
};

// Time-aligned cross-entity attention for a single query. All rows must
// share the query's time index; the query's own entity is masked out of the
// support. wq/wk: [D x Da], wv: [D x D].
CrossEntityContext cross_entity_attention(const EncodedContext& query,
                                          const std::vector<ContextRowRef>& rows,
                                          const Tensor& wq, const Tensor& wk, const Tensor& wv);

// Decodes one forecast-creation time. `future_covs` holds raw (unnormalized)
// rows [H x C_f] for horizons 1..H. Baseline variants must pass no cross
// context and retrieval variants must pass one.
ForecastGrid decode(const Forecaster& model, const EncodedContext& query,
                    const CrossEntityContext* cross, const Tensor& future_covs);

// content-based checkpoint identity (config + buffers + parameters)
std::uint64_t checkpoint_fingerprint(const Forecaster& model);

void save_checkpoint(const Forecaster& model, const std::filesystem::path& path);
Forecaster load_checkpoint(const std::filesystem::path& path);

}  // namespace mqret
