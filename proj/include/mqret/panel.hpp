#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mqret/error.hpp"

namespace mqret {

/// Generator parameters for the synthetic substitute-product panel.
struct PanelSpec {
  std::size_t entities = 200;       // N, must be a multiple of group_size
  std::size_t weeks = 104;          // T
  std::size_t group_size = 2;       // entities per substitute cluster
  double substitution = 0.8;        // rho in [0,1]
  double noise = 0.08;              // observation noise scale (log space)
  std::size_t historic_channels = 2;
  std::size_t future_channels = 2;
  std::size_t static_channels = 2;
  std::uint64_t seed = 1;

  void validate() const;
  std::string canonical_text() const;
  static PanelSpec from_kv(const std::map<std::string, std::string>& kv, const std::string& prefix);
};

/// The dataset: per-entity target series plus historic, future-known and
/// static covariates over a common weekly calendar. Row-major layouts:
/// target [N x T], historic [N x T x Ch], future [N x T x Cf], statics [N x Cs].
struct Panel {
  std::size_t entities = 0;
  std::size_t weeks = 0;
  std::size_t historic_channels = 0;
  std::size_t future_channels = 0;
  std::size_t static_channels = 0;
  std::vector<std::string> entity_ids;
  std::vector<double> target;
  std::vector<double> historic;
  std::vector<double> future;
  std::vector<double> statics;
  std::uint64_t seed = 0;
  std::string spec_text;  // generator spec, empty for hand-built fixtures

  double y(std::size_t i, std::size_t t) const { return target[i * weeks + t]; }
  double& y(std::size_t i, std::size_t t) { return target[i * weeks + t]; }
  double hist(std::size_t i, std::size_t t, std::size_t c) const {
    return historic[(i * weeks + t) * historic_channels + c];
  }
  double fut(std::size_t i, std::size_t t, std::size_t c) const {
    return future[(i * weeks + t) * future_channels + c];
  }
  double stat(std::size_t i, std::size_t c) const { return statics[i * static_channels + c]; }

  std::uint64_t fingerprint() const;
};

/// Latent state trace kept by the generator for test oracles. Not part of
/// the panel files; reference predictors in tests consume it.
struct PanelLatents {
  std::vector<double> log_pool;    // [G x T] log group demand pool
  std::vector<double> share;       // [N x T] multiplicative share factor
  std::vector<double> share_state; // [N x T] AR state behind the share
  std::vector<double> share_innovation;  // [N x T]
  std::vector<double> market;      // [T] global market log factor
};

Panel generate(const PanelSpec& spec, PanelLatents* latents = nullptr);

/// Read view over a panel. Target access is limited to t < target_bound;
/// future-known covariates are readable everywhere (they are known apriori).
class PanelView {
 public:
  PanelView(const Panel& panel, std::size_t fct_begin, std::size_t fct_end,
            std::size_t target_bound);

  const Panel& panel() const { return *panel_; }
  std::size_t fct_begin() const { return fct_begin_; }
  std::size_t fct_end() const { return fct_end_; }
  std::size_t target_bound() const { return target_bound_; }

  double y(std::size_t i, std::size_t t) const;
  double hist(std::size_t i, std::size_t t, std::size_t c) const;
  double fut(std::size_t i, std::size_t t, std::size_t c) const;  // unrestricted
  double stat(std::size_t i, std::size_t c) const;

  // forecast creation times with all H horizons inside the view
  std::vector<std::size_t> forecast_times(std::size_t horizons) const;

 private:
  const Panel* panel_;
  std::size_t fct_begin_, fct_end_, target_bound_;
};

struct Window {
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct SplitView {
  PanelView train;
  PanelView test;
};

// Splits the calendar into the two windows. Windows must be disjoint,
// contiguous and ordered; the train view cannot read test targets.
SplitView split(const Panel& panel, Window train, Window test);

void save_panel(const Panel& panel, const std::filesystem::path& dir);
Panel load_panel(const std::filesystem::path& dir);

}  // namespace mqret
