#include "mqret/panel.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "mqret/io.hpp"
#include "mqret/rng.hpp"

namespace mqret {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kPromoRate = 0.10;
constexpr double kPromoLift = 0.25;

// AR(1) persistence of the latent components. The share state mean-reverts
// fast while the pool and market move slowly; separating the two is what
// the cross-entity signal is about.
constexpr double kSharePhi = 0.5;
constexpr double kPoolPhi = 0.95;
constexpr double kMarketPhi = 0.97;
constexpr double kShareSd = 0.55;
constexpr double kPoolSdScale = 0.06;    // times rho
constexpr double kMarketSdScale = 0.08;  // times rho

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double seasonal(std::size_t t) {
  const double phase = kTwoPi * static_cast<double>(t) / 52.0;
  return 0.35 * std::sin(phase) + 0.15 * std::cos(phase);
}

double stationary_init(Rng& rng, double phi, double sd) {
  return rng.normal() * sd / std::sqrt(1.0 - phi * phi);
}

}  // namespace

void PanelSpec::validate() const {
  if (entities == 0 || weeks == 0) {
    throw Error(ErrorKind::Parameter, "panel spec needs at least one entity and one week");
  }
  if (group_size == 0 || entities % group_size != 0) {
    throw Error(ErrorKind::Parameter, "group size " + std::to_string(group_size) +
                                          " must divide the entity count " +
                                          std::to_string(entities));
  }
  if (substitution < 0.0 || substitution > 1.0) {
    throw Error(ErrorKind::Parameter,
                "substitution strength must lie in [0,1], got " + std::to_string(substitution));
  }
  if (noise < 0.0) {
    throw Error(ErrorKind::Parameter, "noise scale must be nonnegative");
  }
  if (historic_channels < 1 || future_channels < 2 || static_channels < 1) {
    throw Error(ErrorKind::Parameter,
                "need >= 1 historic, >= 2 future-known and >= 1 static covariate channels");
  }
}

std::string PanelSpec::canonical_text() const {
  std::map<std::string, std::string> kv;
  char buf[64];
  kv["panel.entities"] = std::to_string(entities);
  kv["panel.weeks"] = std::to_string(weeks);
  kv["panel.group_size"] = std::to_string(group_size);
  std::snprintf(buf, sizeof buf, "%.17g", substitution);
  kv["panel.substitution"] = buf;
  std::snprintf(buf, sizeof buf, "%.17g", noise);
  kv["panel.noise"] = buf;
  kv["panel.historic_channels"] = std::to_string(historic_channels);
  kv["panel.future_channels"] = std::to_string(future_channels);
  kv["panel.static_channels"] = std::to_string(static_channels);
  kv["panel.seed"] = std::to_string(seed);
  return render_kv_text(kv);
}

PanelSpec PanelSpec::from_kv(const std::map<std::string, std::string>& kv,
                             const std::string& prefix) {
  PanelSpec spec;
  spec.entities = static_cast<std::size_t>(kv_get_i64(kv, prefix + "entities", 200));
  spec.weeks = static_cast<std::size_t>(kv_get_i64(kv, prefix + "weeks", 104));
  spec.group_size = static_cast<std::size_t>(kv_get_i64(kv, prefix + "group_size", 2));
  spec.substitution = kv_get_f64(kv, prefix + "substitution", 0.8);
  spec.noise = kv_get_f64(kv, prefix + "noise", 0.08);
  spec.historic_channels = static_cast<std::size_t>(kv_get_i64(kv, prefix + "historic_channels", 2));
  spec.future_channels = static_cast<std::size_t>(kv_get_i64(kv, prefix + "future_channels", 2));
  spec.static_channels = static_cast<std::size_t>(kv_get_i64(kv, prefix + "static_channels", 2));
  spec.seed = static_cast<std::uint64_t>(kv_get_i64(kv, prefix + "seed", 1));
  return spec;
}

std::uint64_t Panel::fingerprint() const {
  Fingerprint fp;
  fp.update_u64(entities);
  fp.update_u64(weeks);
  fp.update_u64(historic_channels);
  fp.update_u64(future_channels);
  fp.update_u64(static_channels);
  fp.update_u64(seed);
  for (const std::string& id : entity_ids) fp.update_string(id);
  fp.update_f64s(target);
  fp.update_f64s(historic);
  fp.update_f64s(future);
  fp.update_f64s(statics);
  return fp.digest();
}

Panel generate(const PanelSpec& spec, PanelLatents* latents) {
  spec.validate();
  const std::size_t n = spec.entities, t_len = spec.weeks, g_size = spec.group_size;
  const std::size_t groups = n / g_size;
  const double rho = spec.substitution;

  Panel panel;
  panel.entities = n;
  panel.weeks = t_len;
  panel.historic_channels = spec.historic_channels;
  panel.future_channels = spec.future_channels;
  panel.static_channels = spec.static_channels;
  panel.seed = spec.seed;
  panel.spec_text = spec.canonical_text();
  panel.target.assign(n * t_len, 0.0);
  panel.historic.assign(n * t_len * spec.historic_channels, 0.0);
  panel.future.assign(n * t_len * spec.future_channels, 0.0);
  panel.statics.assign(n * spec.static_channels, 0.0);
  panel.entity_ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "e%04zu", i);
    panel.entity_ids[i] = buf;
  }

  if (latents) {
    latents->log_pool.assign(groups * t_len, 0.0);
    latents->share.assign(n * t_len, 0.0);
    latents->share_state.assign(n * t_len, 0.0);
    latents->share_innovation.assign(n * t_len, 0.0);
    latents->market.assign(t_len, 0.0);
  }

  // Global market factor, shared by everyone; amplitude gated by rho so that
  // rho = 0 leaves unrelated groups statistically independent.
  std::vector<double> market(t_len, 0.0);
  {
    Rng rng(mix_seed(spec.seed, 1));
    const double sd = kMarketSdScale * rho;
    double m = sd > 0.0 ? stationary_init(rng, kMarketPhi, sd) : 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      market[t] = m;
      m = kMarketPhi * m + sd * rng.normal();
    }
  }
  if (latents) latents->market = market;

  // known-apriori calendar covariates, identical for every entity
  std::vector<double> calendar(t_len * spec.future_channels, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t c = 0; c < spec.future_channels; ++c) {
      const double phase = kTwoPi * static_cast<double>(t) * static_cast<double>(c / 2 + 1) / 52.0;
      calendar[t * spec.future_channels + c] = (c % 2 == 0) ? std::sin(phase) : std::cos(phase);
    }
  }

  // innovation mixing weights giving pairwise correlation -rho/(G-1)
  const double g_count = static_cast<double>(g_size);
  const double alpha = g_size > 1 ? std::sqrt(1.0 + rho / (g_count - 1.0)) : 0.0;
  const double beta = std::sqrt(1.0 - rho);

  const double pool_sd = kPoolSdScale * rho;

  parallel_for(groups, [&](std::size_t g) {
    Rng rng(mix_seed(spec.seed, 1000 + g));
    const double log_base = std::log(20.0) + 0.4 * rng.normal();

    double pool_state = pool_sd > 0.0 ? stationary_init(rng, kPoolPhi, pool_sd) : 0.0;
    std::vector<double> z(g_size);
    for (std::size_t j = 0; j < g_size; ++j) z[j] = stationary_init(rng, kSharePhi, kShareSd);

    std::vector<double> xi(g_size);
    for (std::size_t t = 0; t < t_len; ++t) {
      const double log_pool = log_base + seasonal(t) + market[t] + pool_state;
      if (latents) latents->log_pool[g * t_len + t] = log_pool;

      // anti-correlated share innovations for the NEXT step
      double xi_mean = 0.0;
      for (std::size_t j = 0; j < g_size; ++j) {
        xi[j] = rng.normal();
        xi_mean += xi[j];
      }
      xi_mean /= g_count;

      for (std::size_t j = 0; j < g_size; ++j) {
        const std::size_t i = g * g_size + j;
        const double share = 2.0 * sigmoid(z[j]);
        const bool promo = rng.bernoulli(kPromoRate);
        const double obs_noise = spec.noise * rng.normal();
        const double y = std::exp(log_pool + (promo ? kPromoLift : 0.0) + obs_noise) * share;
        panel.target[i * t_len + t] = y;

        double* hist = &panel.historic[(i * t_len + t) * spec.historic_channels];
        hist[0] = promo ? 1.0 : 0.0;
        for (std::size_t c = 1; c < spec.historic_channels; ++c) hist[c] = rng.normal();

        double* fut = &panel.future[(i * t_len + t) * spec.future_channels];
        for (std::size_t c = 0; c < spec.future_channels; ++c) {
          fut[c] = calendar[t * spec.future_channels + c];
        }

        if (latents) {
          latents->share[i * t_len + t] = share;
          latents->share_state[i * t_len + t] = z[j];
        }

        const double eta = g_size > 1 ? alpha * (xi[j] - xi_mean) + beta * xi_mean : xi[j];
        if (latents) latents->share_innovation[i * t_len + t] = eta;
        z[j] = kSharePhi * z[j] + kShareSd * eta;
      }
      pool_state = kPoolPhi * pool_state + pool_sd * rng.normal();
    }

    for (std::size_t j = 0; j < g_size; ++j) {
      const std::size_t i = g * g_size + j;
      double* st = &panel.statics[i * spec.static_channels];
      st[0] = log_base;
      if (spec.static_channels > 1) {
        st[1] = static_cast<double>(g % 7) / 7.0;  // category code
      }
      for (std::size_t c = 2; c < spec.static_channels; ++c) st[c] = rng.normal();
    }
  });

  return panel;
}

PanelView::PanelView(const Panel& panel, std::size_t fct_begin, std::size_t fct_end,
                     std::size_t target_bound)
    : panel_(&panel), fct_begin_(fct_begin), fct_end_(fct_end), target_bound_(target_bound) {}

double PanelView::y(std::size_t i, std::size_t t) const {
  if (t >= target_bound_) {
    throw Error(ErrorKind::Access, "target y(" + std::to_string(i) + ", " + std::to_string(t) +
                                       ") is outside this view's window (bound " +
                                       std::to_string(target_bound_) + ")");
  }
  return panel_->y(i, t);
}

double PanelView::hist(std::size_t i, std::size_t t, std::size_t c) const {
  if (t >= target_bound_) {
    throw Error(ErrorKind::Access, "historic covariate at t=" + std::to_string(t) +
                                       " is outside this view's window (bound " +
                                       std::to_string(target_bound_) + ")");
  }
  return panel_->hist(i, t, c);
}

double PanelView::fut(std::size_t i, std::size_t t, std::size_t c) const {
  return panel_->fut(i, t, c);
}

double PanelView::stat(std::size_t i, std::size_t c) const { return panel_->stat(i, c); }

std::vector<std::size_t> PanelView::forecast_times(std::size_t horizons) const {
  std::vector<std::size_t> times;
  for (std::size_t t = fct_begin_; t < fct_end_; ++t) {
    if (t + horizons < target_bound_) times.push_back(t);
  }
  return times;
}

SplitView split(const Panel& panel, Window train, Window test) {
  if (train.begin >= train.end || test.begin >= test.end) {
    throw Error(ErrorKind::Parameter, "split windows must be nonempty");
  }
  if (train.end > test.begin) {
    throw Error(ErrorKind::Parameter, "split windows overlap or are out of order: train ends at " +
                                          std::to_string(train.end) + ", test begins at " +
                                          std::to_string(test.begin));
  }
  if (train.end != test.begin) {
    throw Error(ErrorKind::Parameter, "split windows must be contiguous: train ends at " +
                                          std::to_string(train.end) + ", test begins at " +
                                          std::to_string(test.begin));
  }
  if (test.end > panel.weeks) {
    throw Error(ErrorKind::Parameter, "test window extends past the panel calendar");
  }
  return SplitView{PanelView(panel, train.begin, train.end, train.end),
                   PanelView(panel, test.begin, test.end, test.end)};
}

// ---- panel directory format -------------------------------------------------

namespace {

constexpr std::uint64_t kBlobMagic = 0x424c4f4231305155ULL;  // arbitrary tag

void save_blob(const std::filesystem::path& path, const std::vector<double>& values) {
  BinaryWriter w(path);
  w.u64(kBlobMagic);
  w.u64(values.size());
  w.f64s(values);
  w.close();
}

std::vector<double> load_blob(const std::filesystem::path& path, std::size_t expected) {
  BinaryReader r(path);
  if (r.u64() != kBlobMagic) {
    throw Error(ErrorKind::Format, "'" + path.string() + "' is not a panel blob");
  }
  const std::uint64_t n = r.u64();
  if (n != expected) {
    throw Error(ErrorKind::Format, "'" + path.string() + "' holds " + std::to_string(n) +
                                       " values, manifest expects " + std::to_string(expected));
  }
  std::vector<double> v = r.f64s(n);
  r.expect_eof("panel blob");
  return v;
}

}  // namespace

void save_panel(const Panel& panel, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::map<std::string, std::string> kv = parse_kv_text(panel.spec_text);
  kv["dims.entities"] = std::to_string(panel.entities);
  kv["dims.weeks"] = std::to_string(panel.weeks);
  kv["dims.historic_channels"] = std::to_string(panel.historic_channels);
  kv["dims.future_channels"] = std::to_string(panel.future_channels);
  kv["dims.static_channels"] = std::to_string(panel.static_channels);
  kv["dims.seed"] = std::to_string(panel.seed);
  kv["dims.fingerprint"] = fingerprint_hex(panel.fingerprint());
  write_text_file(dir / "manifest.txt", render_kv_text(kv));

  std::ostringstream ids;
  for (const std::string& id : panel.entity_ids) ids << id << "\n";
  write_text_file(dir / "entities.txt", ids.str());

  save_blob(dir / "target.f64", panel.target);
  save_blob(dir / "historic.f64", panel.historic);
  save_blob(dir / "future.f64", panel.future);
  save_blob(dir / "static.f64", panel.statics);
}

Panel load_panel(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.txt")) {
    throw Error(ErrorKind::Dependency, "panel directory '" + dir.string() +
                                           "' has no manifest.txt; run gen-data first");
  }
  const auto kv = load_kv_file(dir / "manifest.txt");

  Panel panel;
  panel.entities = static_cast<std::size_t>(kv_get_i64(kv, "dims.entities", 0));
  panel.weeks = static_cast<std::size_t>(kv_get_i64(kv, "dims.weeks", 0));
  panel.historic_channels = static_cast<std::size_t>(kv_get_i64(kv, "dims.historic_channels", 0));
  panel.future_channels = static_cast<std::size_t>(kv_get_i64(kv, "dims.future_channels", 0));
  panel.static_channels = static_cast<std::size_t>(kv_get_i64(kv, "dims.static_channels", 0));
  panel.seed = static_cast<std::uint64_t>(kv_get_i64(kv, "dims.seed", 0));
  if (panel.entities == 0 || panel.weeks == 0) {
    throw Error(ErrorKind::Format, "panel manifest lacks dimensions");
  }

  std::map<std::string, std::string> spec_kv;
  for (const auto& [key, value] : kv) {
    if (key.rfind("panel.", 0) == 0) spec_kv[key] = value;
  }
  panel.spec_text = render_kv_text(spec_kv);

  {
    std::istringstream ids(read_text_file(dir / "entities.txt"));
    std::string line;
    while (std::getline(ids, line)) {
      if (!line.empty()) panel.entity_ids.push_back(line);
    }
    if (panel.entity_ids.size() != panel.entities) {
      throw Error(ErrorKind::Format, "entities.txt lists " +
                                         std::to_string(panel.entity_ids.size()) +
                                         " ids, manifest expects " +
                                         std::to_string(panel.entities));
    }
  }

  panel.target = load_blob(dir / "target.f64", panel.entities * panel.weeks);
  panel.historic =
      load_blob(dir / "historic.f64", panel.entities * panel.weeks * panel.historic_channels);
  panel.future =
      load_blob(dir / "future.f64", panel.entities * panel.weeks * panel.future_channels);
  panel.statics = load_blob(dir / "static.f64", panel.entities * panel.static_channels);

  const std::string recorded = kv_get(kv, "dims.fingerprint", "");
  if (!recorded.empty() && parse_fingerprint_hex(recorded) != panel.fingerprint()) {
    throw Error(ErrorKind::Staleness,
                "panel blobs do not match the fingerprint recorded in the manifest");
  }
  return panel;
}

}  // namespace mqret
