#include "mqret/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "mqret/forward.hpp"
#include "mqret/io.hpp"
#include "mqret/ops.hpp"
#include "mqret/rng.hpp"

namespace mqret {

const char* variant_tag(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::BaselineLarge: return "baseline-large";
    case Variant::RetRandom: return "ret-random";
    case Variant::RetFull: return "ret-full";
    case Variant::RetRetrieved: return "ret-retrieved";
  }
  return "baseline";
}

Variant parse_variant(const std::string& tag) {
  if (tag == "baseline") return Variant::Baseline;
  if (tag == "baseline-large") return Variant::BaselineLarge;
  if (tag == "ret-random") return Variant::RetRandom;
  if (tag == "ret-full") return Variant::RetFull;
  if (tag == "ret-retrieved") return Variant::RetRetrieved;
  throw Error(ErrorKind::Parameter, "unknown variant tag '" + tag + "'");
}

bool is_retrieval_variant(Variant v) {
  return v == Variant::RetRandom || v == Variant::RetFull || v == Variant::RetRetrieved;
}

// ---- config ---------------------------------------------------------------

void ModelConfig::validate() const {
  if (context_dim < 1) throw Error(ErrorKind::Parameter, "context_dim must be >= 1");
  if (decoder_hidden < 1) throw Error(ErrorKind::Parameter, "decoder_hidden must be >= 1");
  if (horizons < 1) throw Error(ErrorKind::Parameter, "horizons must be >= 1");
  if (static_embed < 1) throw Error(ErrorKind::Parameter, "static_embed must be >= 1");
  if (conv_stack.empty()) throw Error(ErrorKind::Parameter, "conv stack must not be empty");
  for (const ConvLayerSpec& l : conv_stack) {
    if (l.kernel < 1 || l.dilation < 1 || l.filters < 1) {
      throw Error(ErrorKind::Parameter, "conv layer fields must all be >= 1");
    }
    if (l.filters != conv_stack.front().filters) {
      throw Error(ErrorKind::Parameter,
                  "conv stack must keep a constant filter count for the residual connections");
    }
  }
  if (quantiles.empty()) throw Error(ErrorKind::Parameter, "quantile set must not be empty");
  for (std::size_t i = 0; i < quantiles.size(); ++i) {
    if (!(quantiles[i] > 0.0 && quantiles[i] < 1.0)) {
      throw Error(ErrorKind::Parameter, "quantiles must lie in (0,1)");
    }
    if (i > 0 && quantiles[i] <= quantiles[i - 1]) {
      throw Error(ErrorKind::Parameter, "quantiles must be strictly increasing");
    }
  }
  if (is_retrieval_variant(variant) && attn_dim < 1) {
    throw Error(ErrorKind::Parameter, "retrieval variants need attn_dim >= 1");
  }
}

namespace {

std::string format_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string conv_stack_text(const std::vector<ConvLayerSpec>& stack) {
  std::ostringstream os;
  for (std::size_t i = 0; i < stack.size(); ++i) {
    if (i) os << ",";
    os << stack[i].kernel << "x" << stack[i].dilation << "x" << stack[i].filters;
  }
  return os.str();
}

std::vector<ConvLayerSpec> parse_conv_stack(const std::string& text) {
  std::vector<ConvLayerSpec> stack;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    ConvLayerSpec layer;
    if (std::sscanf(item.c_str(), "%dx%dx%d", &layer.kernel, &layer.dilation, &layer.filters) !=
        3) {
      throw Error(ErrorKind::Format, "bad conv layer '" + item + "', expected KxDILxF");
    }
    stack.push_back(layer);
  }
  if (stack.empty()) throw Error(ErrorKind::Format, "empty conv stack");
  return stack;
}

std::string quantiles_text(const std::vector<double>& quantiles) {
  std::ostringstream os;
  for (std::size_t i = 0; i < quantiles.size(); ++i) {
    if (i) os << ",";
    os << format_f64(quantiles[i]);
  }
  return os.str();
}

std::vector<double> parse_quantiles(const std::string& text) {
  std::vector<double> q;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) q.push_back(std::stod(item));
  return q;
}

}  // namespace

std::string ModelConfig::canonical_text() const {
  std::map<std::string, std::string> kv;
  kv["model.attn_dim"] = std::to_string(attn_dim);
  kv["model.context_dim"] = std::to_string(context_dim);
  kv["model.conv_stack"] = conv_stack_text(conv_stack);
  kv["model.decoder_hidden"] = std::to_string(decoder_hidden);
  kv["model.horizons"] = std::to_string(horizons);
  kv["model.quantiles"] = quantiles_text(quantiles);
  kv["model.seed"] = std::to_string(seed);
  kv["model.static_embed"] = std::to_string(static_embed);
  kv["model.variant"] = variant_tag(variant);
  return render_kv_text(kv);
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv,
                                 const std::string& prefix) {
  ModelConfig c;
  c.attn_dim = static_cast<int>(kv_get_i64(kv, prefix + "attn_dim", c.attn_dim));
  c.context_dim = static_cast<int>(kv_get_i64(kv, prefix + "context_dim", c.context_dim));
  const std::string stack = kv_get(kv, prefix + "conv_stack", "");
  if (!stack.empty()) c.conv_stack = parse_conv_stack(stack);
  c.decoder_hidden = static_cast<int>(kv_get_i64(kv, prefix + "decoder_hidden", c.decoder_hidden));
  c.horizons = static_cast<int>(kv_get_i64(kv, prefix + "horizons", c.horizons));
  const std::string q = kv_get(kv, prefix + "quantiles", "");
  if (!q.empty()) c.quantiles = parse_quantiles(q);
  c.seed = static_cast<std::uint64_t>(kv_get_i64(kv, prefix + "seed", 1));
  c.static_embed = static_cast<int>(kv_get_i64(kv, prefix + "static_embed", c.static_embed));
  c.variant = parse_variant(kv_get(kv, prefix + "variant", "baseline"));
  c.validate();
  return c;
}

ModelConfig ModelConfig::parse(const std::string& text) {
  return from_kv(parse_kv_text(text), "model.");
}

// ---- parameter store --------------------------------------------------------

Tensor& ParamStore::at(const std::string& name) {
  for (NamedTensor& item : items) {
    if (item.name == name) return item.value;
  }
  throw Error(ErrorKind::Parameter, "no parameter named '" + name + "'");
}

const Tensor& ParamStore::at(const std::string& name) const {
  for (const NamedTensor& item : items) {
    if (item.name == name) return item.value;
  }
  throw Error(ErrorKind::Parameter, "no parameter named '" + name + "'");
}

bool ParamStore::has(const std::string& name) const {
  for (const NamedTensor& item : items) {
    if (item.name == name) return true;
  }
  return false;
}

std::vector<NamedTensor*> ParamStore::pointers() {
  std::vector<NamedTensor*> out;
  out.reserve(items.size());
  for (NamedTensor& item : items) out.push_back(&item);
  return out;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const NamedTensor& item : items) n += item.value.size();
  return n;
}

void ParamStore::ensure_grads() {
  for (NamedTensor& item : items) item.value.ensure_grad();
}

void ParamStore::zero_grads() {
  for (NamedTensor& item : items) item.value.zero_grad();
}

// ---- shapes and init -----------------------------------------------------

std::size_t Forecaster::embed_width() const {
  return static_cast<std::size_t>(config.static_embed) * dims.statics;
}

std::size_t Forecaster::input_channels() const {
  return 1 + dims.historic + embed_width();
}

namespace {

struct ShapeEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t fan_in;
  std::size_t fan_out;
};

std::vector<ShapeEntry> parameter_shapes(const ModelConfig& config, const PanelDims& dims) {
  const std::size_t cs = dims.statics, ch = dims.historic, cf = dims.future;
  const std::size_t embed = static_cast<std::size_t>(config.static_embed) * cs;
  const std::size_t c_in = 1 + ch + embed;
  const std::size_t filters = static_cast<std::size_t>(config.conv_stack.front().filters);
  const std::size_t d = static_cast<std::size_t>(config.context_dim);
  const std::size_t da = static_cast<std::size_t>(config.attn_dim);
  const std::size_t hidden = static_cast<std::size_t>(config.decoder_hidden);
  const std::size_t q_count = config.quantiles.size();
  const bool retrieval = is_retrieval_variant(config.variant);

  std::vector<ShapeEntry> shapes;
  shapes.push_back({"static_embed.w", {cs, embed}, cs, embed});
  shapes.push_back({"static_embed.b", {embed}, 0, 0});
  shapes.push_back({"encoder.in.w", {c_in, filters}, c_in, filters});
  shapes.push_back({"encoder.in.b", {filters}, 0, 0});
  for (std::size_t l = 0; l < config.conv_stack.size(); ++l) {
    const auto k = static_cast<std::size_t>(config.conv_stack[l].kernel);
    shapes.push_back({"encoder.conv" + std::to_string(l) + ".kernel",
                      {k, filters, filters},
                      k * filters,
                      filters});
    shapes.push_back({"encoder.conv" + std::to_string(l) + ".bias", {filters}, 0, 0});
  }
  shapes.push_back({"encoder.out.w", {filters, d}, filters, d});
  shapes.push_back({"encoder.out.b", {d}, 0, 0});
  if (retrieval) {
    shapes.push_back({"attn.wq", {d, da}, d, da});
    shapes.push_back({"attn.wk", {d, da}, d, da});
    shapes.push_back({"attn.wv", {d, d}, d, d});
  }
  shapes.push_back({"decoder.w1_query", {d, hidden}, d, hidden});
  if (retrieval) {
    shapes.push_back({"decoder.w1_cross", {d, hidden}, d, hidden});
  }
  shapes.push_back({"decoder.w1_future", {cf, hidden}, cf, hidden});
  shapes.push_back({"decoder.b1", {hidden}, 0, 0});
  shapes.push_back({"decoder.w2", {hidden, q_count}, hidden, q_count});
  shapes.push_back({"decoder.b2", {q_count}, 0, 0});
  return shapes;
}

void fill_normalizer_channel(std::vector<double>& mu, std::vector<double>& sd,
                             std::size_t channels, const std::function<double(std::size_t,
                                                                              std::size_t,
                                                                              std::size_t)>& get,
                             std::size_t entities, std::size_t steps) {
  mu.assign(channels, 0.0);
  sd.assign(channels, 1.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double total = 0.0, total_sq = 0.0;
    const double count = static_cast<double>(entities * steps);
    for (std::size_t i = 0; i < entities; ++i) {
      for (std::size_t t = 0; t < steps; ++t) {
        const double v = get(i, t, c);
        total += v;
        total_sq += v * v;
      }
    }
    const double mean = total / count;
    const double var = std::max(total_sq / count - mean * mean, 0.0);
    mu[c] = mean;
    sd[c] = std::max(std::sqrt(var), 1e-8);
  }
}

}  // namespace

std::size_t count_parameters(const ModelConfig& config, const PanelDims& dims) {
  std::size_t total = 0;
  for (const ShapeEntry& entry : parameter_shapes(config, dims)) {
    total += Tensor::numel_of(entry.shape);
  }
  return total;
}

ModelConfig derive_large_config(const ModelConfig& base, const PanelDims& dims) {
  ModelConfig target_cfg = base;
  target_cfg.variant = Variant::RetFull;
  const std::size_t target = count_parameters(target_cfg, dims);

  ModelConfig best = base;
  best.variant = Variant::BaselineLarge;
  std::size_t best_diff = static_cast<std::size_t>(-1);

  const int base_filters = base.conv_stack.front().filters;
  const int base_hidden = base.decoder_hidden;
  for (int filters = base_filters; filters <= base_filters + 64; ++filters) {
    for (int hidden = base_hidden; hidden <= base_hidden + 64; ++hidden) {
      ModelConfig candidate = base;
      candidate.variant = Variant::BaselineLarge;
      for (ConvLayerSpec& layer : candidate.conv_stack) layer.filters = filters;
      candidate.decoder_hidden = hidden;
      const std::size_t count = count_parameters(candidate, dims);
      const std::size_t diff = count > target ? count - target : target - count;
      if (diff < best_diff) {
        best_diff = diff;
        best = candidate;
        if (diff == 0) return best;
      }
    }
  }
  return best;
}

Forecaster init_forecaster(const ModelConfig& config, const PanelView& train_view) {
  config.validate();
  const Panel& panel = train_view.panel();

  Forecaster model;
  model.config = config;
  model.dims = PanelDims{panel.historic_channels, panel.future_channels, panel.static_channels,
                         panel.entities, panel.weeks};
  model.panel_fingerprint = panel.fingerprint();

  // normalization constants from the training window only
  const std::size_t bound = train_view.target_bound();
  const std::size_t n = panel.entities;
  model.norm.mu_y.assign(n, 0.0);
  model.norm.sd_y.assign(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0, total_sq = 0.0;
    for (std::size_t t = 0; t < bound; ++t) {
      const double v = train_view.y(i, t);
      total += v;
      total_sq += v * v;
    }
    const double mean = total / static_cast<double>(bound);
    const double var = std::max(total_sq / static_cast<double>(bound) - mean * mean, 0.0);
    model.norm.mu_y[i] = mean;
    model.norm.sd_y[i] = std::max(std::sqrt(var), 1e-8);
  }
  fill_normalizer_channel(
      model.norm.mu_hist, model.norm.sd_hist, panel.historic_channels,
      [&](std::size_t i, std::size_t t, std::size_t c) { return train_view.hist(i, t, c); }, n,
      bound);
  fill_normalizer_channel(
      model.norm.mu_fut, model.norm.sd_fut, panel.future_channels,
      [&](std::size_t i, std::size_t t, std::size_t c) { return train_view.fut(i, t, c); }, n,
      bound);
  fill_normalizer_channel(
      model.norm.mu_stat, model.norm.sd_stat, panel.static_channels,
      [&](std::size_t i, std::size_t, std::size_t c) { return train_view.stat(i, c); }, n, 1);

  // deterministic init, creation order fixed by parameter_shapes
  Rng rng(mix_seed(config.seed, 7));
  for (const ShapeEntry& entry : parameter_shapes(config, model.dims)) {
    Tensor t(entry.shape);
    if (entry.fan_in > 0) {
      const double bound_u =
          std::sqrt(6.0 / static_cast<double>(entry.fan_in + entry.fan_out));
      for (double& v : t.data) v = rng.uniform(-bound_u, bound_u);
    }
    model.params.items.push_back({entry.name, std::move(t)});
  }

  if (config.variant == Variant::RetRandom) {
    // frozen noise contexts, one per (entity, time), drawn once here
    Rng ctx_rng(mix_seed(config.seed, 77));
    model.random_contexts =
        Tensor({n, panel.weeks, static_cast<std::size_t>(config.context_dim)});
    for (double& v : model.random_contexts.data) v = ctx_rng.normal();
  }
  return model;
}

// ---- encoder ----------------------------------------------------------------

namespace {

void add_channel_bias(Tensor& seq, const Tensor& bias) {
  const std::size_t width = seq.shape.back();
  const std::size_t rows = seq.size() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    double* p = &seq.data[r * width];
    for (std::size_t c = 0; c < width; ++c) p[c] += bias.data[c];
  }
}

void channel_bias_backward(const Tensor& seq_grad_holder, Tensor& bias) {
  if (!bias.has_grad()) return;
  const std::size_t width = seq_grad_holder.shape.back();
  const std::size_t rows = seq_grad_holder.size() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* g = &seq_grad_holder.grad[r * width];
    for (std::size_t c = 0; c < width; ++c) bias.grad[c] += g[c];
  }
}

}  // namespace

void run_encoder(const Forecaster& model, const PanelView& view, std::size_t entity,
                 bool with_grad, EncoderTrace& tr) {
  const Panel& panel = view.panel();
  if (panel.historic_channels != model.dims.historic) {
    throw Error(ErrorKind::Data, "panel has " + std::to_string(panel.historic_channels) +
                                     " historic covariate channels, model expects " +
                                     std::to_string(model.dims.historic));
  }
  if (panel.static_channels != model.dims.statics) {
    throw Error(ErrorKind::Data, "panel has " + std::to_string(panel.static_channels) +
                                     " static covariate channels, model expects " +
                                     std::to_string(model.dims.statics));
  }
  const std::size_t steps = view.target_bound();
  const std::size_t ch = model.dims.historic;
  const std::size_t cs = model.dims.statics;
  const std::size_t c_in = model.input_channels();
  const std::size_t embed = model.embed_width();
  const Normalizer& norm = model.norm;

  tr.statics = Tensor({1, cs});
  for (std::size_t c = 0; c < cs; ++c) {
    tr.statics.data[c] = (view.stat(entity, c) - norm.mu_stat[c]) / norm.sd_stat[c];
  }
  const Tensor& se_w = model.params.at("static_embed.w");
  const Tensor& se_b = model.params.at("static_embed.b");
  tr.embed = linear(tr.statics, se_w, se_b);

  tr.input = Tensor({1, steps, c_in});
  for (std::size_t t = 0; t < steps; ++t) {
    double* row = &tr.input.data[t * c_in];
    row[0] = (view.y(entity, t) - norm.mu_y[entity]) / norm.sd_y[entity];
    for (std::size_t c = 0; c < ch; ++c) {
      row[1 + c] = (view.hist(entity, t, c) - norm.mu_hist[c]) / norm.sd_hist[c];
    }
    for (std::size_t e = 0; e < embed; ++e) row[1 + ch + e] = tr.embed.data[e];
  }

  tr.proj = linear(tr.input, model.params.at("encoder.in.w"), model.params.at("encoder.in.b"));

  const std::size_t layer_count = model.config.conv_stack.size();
  tr.conv_pre.resize(layer_count);
  tr.conv_act.resize(layer_count);
  tr.conv_out.resize(layer_count);
  const Tensor* current = &tr.proj;
  for (std::size_t l = 0; l < layer_count; ++l) {
    const ConvLayerSpec& spec = model.config.conv_stack[l];
    const Tensor& kernel = model.params.at("encoder.conv" + std::to_string(l) + ".kernel");
    const Tensor& bias = model.params.at("encoder.conv" + std::to_string(l) + ".bias");
    tr.conv_pre[l] = causal_conv1d(*current, kernel, spec.dilation);
    add_channel_bias(tr.conv_pre[l], bias);
    tr.conv_act[l] = tanh_forward(tr.conv_pre[l]);
    tr.conv_out[l] = *current;  // residual connection
    for (std::size_t i = 0; i < tr.conv_out[l].size(); ++i) {
      tr.conv_out[l].data[i] += tr.conv_act[l].data[i];
    }
    current = &tr.conv_out[l];
  }

  tr.enc_pre = linear(*current, model.params.at("encoder.out.w"),
                      model.params.at("encoder.out.b"));
  tr.enc = tanh_forward(tr.enc_pre);

  if (with_grad) {
    tr.embed.ensure_grad();
    tr.input.ensure_grad();
    tr.proj.ensure_grad();
    for (std::size_t l = 0; l < layer_count; ++l) {
      tr.conv_pre[l].ensure_grad();
      tr.conv_act[l].ensure_grad();
      tr.conv_out[l].ensure_grad();
    }
    tr.enc_pre.ensure_grad();
    tr.enc.ensure_grad();
  }
}

void encoder_backward(Forecaster& model, EncoderTrace& tr) {
  const std::size_t layer_count = model.config.conv_stack.size();
  Tensor* last = layer_count ? &tr.conv_out[layer_count - 1] : &tr.proj;

  Tensor enc_grad_view(tr.enc.shape, tr.enc.grad);
  tanh_backward(enc_grad_view, tr.enc, tr.enc_pre);
  Tensor enc_pre_grad(tr.enc_pre.shape, tr.enc_pre.grad);
  linear_backward(enc_pre_grad, *last, model.params.at("encoder.out.w"),
                  model.params.at("encoder.out.b"));

  for (std::size_t l = layer_count; l-- > 0;) {
    Tensor* input = l == 0 ? &tr.proj : &tr.conv_out[l - 1];
    // residual: grad flows both straight through and via the conv path
    for (std::size_t i = 0; i < input->size(); ++i) {
      input->grad[i] += tr.conv_out[l].grad[i];
    }
    Tensor act_grad(tr.conv_act[l].shape, tr.conv_out[l].grad);
    tanh_backward(act_grad, tr.conv_act[l], tr.conv_pre[l]);
    channel_bias_backward(tr.conv_pre[l],
                          model.params.at("encoder.conv" + std::to_string(l) + ".bias"));
    Tensor pre_grad(tr.conv_pre[l].shape, tr.conv_pre[l].grad);
    causal_conv1d_backward(pre_grad, *input,
                           model.params.at("encoder.conv" + std::to_string(l) + ".kernel"),
                           model.config.conv_stack[l].dilation);
  }

  Tensor proj_grad(tr.proj.shape, tr.proj.grad);
  linear_backward(proj_grad, tr.input, model.params.at("encoder.in.w"),
                  model.params.at("encoder.in.b"));

  // collapse the broadcast static embedding channels over time
  const std::size_t c_in = model.input_channels();
  const std::size_t embed = model.embed_width();
  const std::size_t ch = model.dims.historic;
  const std::size_t steps = tr.input.dim(1);
  for (std::size_t t = 0; t < steps; ++t) {
    const double* g = &tr.input.grad[t * c_in];
    for (std::size_t e = 0; e < embed; ++e) tr.embed.grad[e] += g[1 + ch + e];
  }
  Tensor embed_grad(tr.embed.shape, tr.embed.grad);
  linear_backward(embed_grad, tr.statics, model.params.at("static_embed.w"),
                  model.params.at("static_embed.b"));
}

Tensor encode_entity(const Forecaster& model, const PanelView& view, std::size_t entity) {
  EncoderTrace tr;
  run_encoder(model, view, entity, /*with_grad=*/false, tr);
  const std::size_t steps = tr.enc.dim(1);
  const std::size_t d = tr.enc.dim(2);
  return Tensor({steps, d}, std::move(tr.enc.data));
}

// ---- attention ---------------------------------------------------------------

Tensor project_rows(const std::vector<const double*>& rows, std::size_t dim, const Tensor& w) {
  const std::size_t width = w.dim(1);
  Tensor out({rows.size(), width});
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const double* r = rows[j];
    double* o = &out.data[j * width];
    for (std::size_t d = 0; d < dim; ++d) {
      const double v = r[d];
      const double* wd = &w.data[d * width];
      for (std::size_t c = 0; c < width; ++c) o[c] += v * wd[c];
    }
  }
  return out;
}

void project_rows_backward(const std::vector<const double*>& rows, std::size_t dim,
                           const Tensor& proj, Tensor& w) {
  if (!w.has_grad()) return;
  const std::size_t width = w.dim(1);
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const double* r = rows[j];
    const double* g = &proj.grad[j * width];
    for (std::size_t d = 0; d < dim; ++d) {
      const double v = r[d];
      double* wg = &w.grad[d * width];
      for (std::size_t c = 0; c < width; ++c) wg[c] += v * g[c];
    }
  }
}

void attention_core(AttentionTrace& tr, const Tensor& kp, const Tensor& vp, bool with_grad) {
  const std::size_t count = kp.dim(0);
  const std::size_t da = kp.dim(1);
  const std::size_t d = vp.dim(1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(da));

  tr.scores = Tensor({count});
  for (std::size_t j = 0; j < count; ++j) {
    const double* kj = &kp.data[j * da];
    double acc = 0.0;
    for (std::size_t a = 0; a < da; ++a) acc += tr.qp.data[a] * kj[a];
    tr.scores.data[j] = acc * scale;
  }

  bool any = false;
  for (std::uint8_t m : tr.mask) any |= (m != 0);
  if (!any) {
    throw Error(ErrorKind::Retrieval,
                "attention support is empty after excluding the querying entity");
  }

  tr.alphas = masked_softmax(tr.scores, tr.mask);

  tr.hcross = Tensor({d});
  for (std::size_t j = 0; j < count; ++j) {
    const double a = tr.alphas.data[j];
    if (a == 0.0) continue;
    const double* vj = &vp.data[j * d];
    for (std::size_t c = 0; c < d; ++c) tr.hcross.data[c] += a * vj[c];
  }

  if (with_grad) {
    tr.scores.ensure_grad();
    tr.alphas.ensure_grad();
    tr.hcross.ensure_grad();
  }
}

void attention_core_backward(AttentionTrace& tr, Tensor& kp, Tensor& vp) {
  const std::size_t count = kp.dim(0);
  const std::size_t da = kp.dim(1);
  const std::size_t d = vp.dim(1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(da));

  for (std::size_t j = 0; j < count; ++j) {
    if (!tr.mask[j]) continue;
    const double* vj = &vp.data[j * d];
    double dalpha = 0.0;
    for (std::size_t c = 0; c < d; ++c) dalpha += tr.hcross.grad[c] * vj[c];
    tr.alphas.grad[j] += dalpha;
    if (vp.has_grad()) {
      const double a = tr.alphas.data[j];
      double* vg = &vp.grad[j * d];
      for (std::size_t c = 0; c < d; ++c) vg[c] += a * tr.hcross.grad[c];
    }
  }

  Tensor alpha_grad(tr.alphas.shape, tr.alphas.grad);
  masked_softmax_backward(alpha_grad, tr.alphas, tr.mask, tr.scores);

  for (std::size_t j = 0; j < count; ++j) {
    if (!tr.mask[j]) continue;
    const double ds = tr.scores.grad[j] * scale;
    const double* kj = &kp.data[j * da];
    if (tr.qp.has_grad()) {
      for (std::size_t a = 0; a < da; ++a) tr.qp.grad[a] += ds * kj[a];
    }
    if (kp.has_grad()) {
      double* kg = &kp.grad[j * da];
      for (std::size_t a = 0; a < da; ++a) kg[a] += ds * tr.qp.data[a];
    }
  }
}

CrossEntityContext cross_entity_attention(const EncodedContext& query,
                                          const std::vector<ContextRowRef>& rows,
                                          const Tensor& wq, const Tensor& wk, const Tensor& wv) {
  const std::size_t d = query.values.size();
  if (wq.rank() != 2 || wq.dim(0) != d || wk.shape != wq.shape || wv.shape !=
      std::vector<std::size_t>{d, d}) {
    throw Error(ErrorKind::Dimension, "cross_entity_attention: projection shapes do not conform");
  }

  std::vector<const double*> row_ptrs;
  row_ptrs.reserve(rows.size());
  for (const ContextRowRef& row : rows) {
    if (row.time != query.time) {
      throw Error(ErrorKind::Alignment,
                  "cross_entity_attention: query is at time " + std::to_string(query.time) +
                      " but a row of entity " + std::to_string(row.entity) + " is at time " +
                      std::to_string(row.time));
    }
    if (row.values.size() != d) {
      throw Error(ErrorKind::Dimension, "cross_entity_attention: row width " +
                                            std::to_string(row.values.size()) +
                                            " does not match query width " + std::to_string(d));
    }
    row_ptrs.push_back(row.values.data());
  }

  AttentionTrace tr;
  std::vector<const double*> query_ptr{query.values.data()};
  tr.qp = project_rows(query_ptr, d, wq);
  const Tensor kp = project_rows(row_ptrs, d, wk);
  const Tensor vp = project_rows(row_ptrs, d, wv);
  tr.mask.assign(rows.size(), 1);
  for (std::size_t j = 0; j < rows.size(); ++j) {
    if (rows[j].entity == query.entity) tr.mask[j] = 0;
  }
  attention_core(tr, kp, vp, /*with_grad=*/false);

  CrossEntityContext out;
  out.entity = query.entity;
  out.time = query.time;
  out.values = tr.hcross.data;
  for (std::size_t j = 0; j < rows.size(); ++j) {
    if (!tr.mask[j]) continue;
    out.support.push_back(rows[j].entity);
    out.weights.push_back(tr.alphas.data[j]);
  }
  return out;
}

// ---- decoder ---------------------------------------------------------------

void run_decode(const Forecaster& model, DecodeTrace& tr, bool with_grad) {
  const bool retrieval = is_retrieval_variant(model.config.variant);
  const std::size_t hidden = static_cast<std::size_t>(model.config.decoder_hidden);
  const std::size_t horizons = static_cast<std::size_t>(model.config.horizons);
  const std::size_t q_count = model.config.quantiles.size();

  tr.zero_hd = Tensor({hidden});
  tr.global_q = linear(tr.query, model.params.at("decoder.w1_query"),
                       model.params.at("decoder.b1"));
  if (retrieval) {
    tr.global_c = linear(tr.cross, model.params.at("decoder.w1_cross"), tr.zero_hd);
  }

  Tensor locals = linear(tr.xf, model.params.at("decoder.w1_future"), tr.zero_hd);
  tr.pre = std::move(locals);  // [H x Hd]
  for (std::size_t h = 0; h < horizons; ++h) {
    double* row = &tr.pre.data[h * hidden];
    for (std::size_t c = 0; c < hidden; ++c) {
      row[c] += tr.global_q.data[c];
      if (retrieval) row[c] += tr.global_c.data[c];
    }
  }
  tr.act = tanh_forward(tr.pre);
  tr.out = linear(tr.act, model.params.at("decoder.w2"), model.params.at("decoder.b2"));
  (void)q_count;

  if (with_grad) {
    tr.global_q.ensure_grad();
    if (retrieval) tr.global_c.ensure_grad();
    tr.pre.ensure_grad();
    tr.act.ensure_grad();
    tr.out.ensure_grad();
  }
}

void decode_backward(Forecaster& model, DecodeTrace& tr) {
  const bool retrieval = is_retrieval_variant(model.config.variant);
  const std::size_t hidden = static_cast<std::size_t>(model.config.decoder_hidden);
  const std::size_t horizons = static_cast<std::size_t>(model.config.horizons);

  Tensor out_grad(tr.out.shape, tr.out.grad);
  linear_backward(out_grad, tr.act, model.params.at("decoder.w2"),
                  model.params.at("decoder.b2"));
  Tensor act_grad(tr.act.shape, tr.act.grad);
  tanh_backward(act_grad, tr.act, tr.pre);

  // the global context feeds every horizon row
  Tensor global_grad({1, hidden});
  for (std::size_t h = 0; h < horizons; ++h) {
    const double* g = &tr.pre.grad[h * hidden];
    for (std::size_t c = 0; c < hidden; ++c) global_grad.data[c] += g[c];
  }

  Tensor pre_grad(tr.pre.shape, tr.pre.grad);
  linear_backward(pre_grad, tr.xf, model.params.at("decoder.w1_future"), tr.zero_hd);
  linear_backward(global_grad, tr.query, model.params.at("decoder.w1_query"),
                  model.params.at("decoder.b1"));
  if (retrieval) {
    linear_backward(global_grad, tr.cross, model.params.at("decoder.w1_cross"), tr.zero_hd);
  }
}

ForecastGrid decode(const Forecaster& model, const EncodedContext& query,
                    const CrossEntityContext* cross, const Tensor& future_covs) {
  const bool retrieval = is_retrieval_variant(model.config.variant);
  if (!retrieval && cross != nullptr) {
    throw Error(ErrorKind::Parameter,
                "decode: variant '" + std::string(variant_tag(model.config.variant)) +
                    "' takes no cross-entity context; refusing to drop it silently");
  }
  if (retrieval && cross == nullptr) {
    throw Error(ErrorKind::Parameter,
                "decode: variant '" + std::string(variant_tag(model.config.variant)) +
                    "' requires a cross-entity context");
  }
  const std::size_t horizons = static_cast<std::size_t>(model.config.horizons);
  const std::size_t cf = model.dims.future;
  if (future_covs.rank() != 2 || future_covs.dim(1) != cf) {
    throw Error(ErrorKind::Data, "decode: future covariates must be [H x " + std::to_string(cf) +
                                     "], got " + shape_string(future_covs));
  }
  if (future_covs.dim(0) < horizons) {
    throw Error(ErrorKind::Data, "decode: future covariates cover " +
                                     std::to_string(future_covs.dim(0)) + " horizons, need " +
                                     std::to_string(horizons));
  }
  const std::size_t d = static_cast<std::size_t>(model.config.context_dim);
  if (query.values.size() != d) {
    throw Error(ErrorKind::Dimension, "decode: query width " +
                                          std::to_string(query.values.size()) +
                                          " does not match context dim " + std::to_string(d));
  }

  DecodeTrace tr;
  tr.query = Tensor({1, d}, std::vector<double>(query.values));
  if (retrieval) {
    if (cross->values.size() != d) {
      throw Error(ErrorKind::Dimension, "decode: cross context width mismatch");
    }
    tr.cross = Tensor({1, d}, std::vector<double>(cross->values));
  }
  tr.xf = Tensor({horizons, cf});
  for (std::size_t h = 0; h < horizons; ++h) {
    for (std::size_t c = 0; c < cf; ++c) {
      tr.xf.data[h * cf + c] =
          (future_covs.at2(h, c) - model.norm.mu_fut[c]) / model.norm.sd_fut[c];
    }
  }
  run_decode(model, tr, /*with_grad=*/false);

  const std::size_t q_count = model.config.quantiles.size();
  ForecastGrid grid;
  grid.entity = query.entity;
  grid.time = query.time;
  grid.horizons = horizons;
  grid.quantile_count = q_count;
  grid.values.resize(horizons * q_count);
  const double mu = model.norm.mu_y[query.entity];
  const double sd = model.norm.sd_y[query.entity];
  for (std::size_t h = 0; h < horizons; ++h) {
    for (std::size_t q = 0; q < q_count; ++q) {
      grid.values[h * q_count + q] = mu + sd * tr.out.at2(h, q);
    }
  }
  return grid;
}

// ---- checkpoints ---------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'Q', 'R', 'T'};
constexpr std::uint32_t kVersion = 1;

std::string header_text(const Forecaster& model) {
  std::map<std::string, std::string> kv = parse_kv_text(model.config.canonical_text());
  kv["meta.panel_fingerprint"] = fingerprint_hex(model.panel_fingerprint);
  kv["meta.database_fingerprint"] = fingerprint_hex(model.database_fingerprint);
  kv["meta.dims_historic"] = std::to_string(model.dims.historic);
  kv["meta.dims_future"] = std::to_string(model.dims.future);
  kv["meta.dims_statics"] = std::to_string(model.dims.statics);
  kv["meta.dims_entities"] = std::to_string(model.dims.entities);
  kv["meta.dims_weeks"] = std::to_string(model.dims.weeks);
  return render_kv_text(kv);
}

struct BlobRef {
  std::string name;
  const Tensor* tensor;
};

std::vector<std::pair<std::string, std::vector<double>*>> buffer_list(Forecaster& model) {
  std::vector<std::pair<std::string, std::vector<double>*>> buffers = {
      {"buffer.norm.mu_y", &model.norm.mu_y},       {"buffer.norm.sd_y", &model.norm.sd_y},
      {"buffer.norm.mu_hist", &model.norm.mu_hist}, {"buffer.norm.sd_hist", &model.norm.sd_hist},
      {"buffer.norm.mu_fut", &model.norm.mu_fut},   {"buffer.norm.sd_fut", &model.norm.sd_fut},
      {"buffer.norm.mu_stat", &model.norm.mu_stat}, {"buffer.norm.sd_stat", &model.norm.sd_stat},
  };
  return buffers;
}

void write_blob(BinaryWriter& w, const std::string& name, const std::vector<std::size_t>& shape,
                const std::vector<double>& data) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t dim : shape) w.u64(dim);
  w.f64s(data);
}

void hash_blob(Fingerprint& fp, const std::string& name, const std::vector<std::size_t>& shape,
               const std::vector<double>& data) {
  fp.update_string(name);
  for (std::size_t dim : shape) fp.update_u64(dim);
  fp.update_f64s(data);
}

}  // namespace

std::uint64_t checkpoint_fingerprint(const Forecaster& model) {
  Fingerprint fp;
  fp.update_string(header_text(model));
  for (const NamedTensor& item : model.params.items) {
    hash_blob(fp, "param." + item.name, item.value.shape, item.value.data);
  }
  auto& mutable_model = const_cast<Forecaster&>(model);
  for (const auto& [name, values] : buffer_list(mutable_model)) {
    hash_blob(fp, name, {values->size()}, *values);
  }
  if (model.random_contexts.size() > 0) {
    hash_blob(fp, "buffer.random_contexts", model.random_contexts.shape,
              model.random_contexts.data);
  }
  return fp.digest();
}

void save_checkpoint(const Forecaster& model, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  w.text(header_text(model));
  for (const NamedTensor& item : model.params.items) {
    write_blob(w, "param." + item.name, item.value.shape, item.value.data);
  }
  auto& mutable_model = const_cast<Forecaster&>(model);
  for (const auto& [name, values] : buffer_list(mutable_model)) {
    write_blob(w, name, {values->size()}, *values);
  }
  if (model.random_contexts.size() > 0) {
    write_blob(w, "buffer.random_contexts", model.random_contexts.shape,
               model.random_contexts.data);
  }
  w.close();
}

Forecaster load_checkpoint(const std::filesystem::path& path) {
  BinaryReader r(path);
  char magic[4];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw Error(ErrorKind::Format, "'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw Error(ErrorKind::Format, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto kv = parse_kv_text(r.text());

  Forecaster model;
  model.config = ModelConfig::from_kv(kv, "model.");
  model.panel_fingerprint = parse_fingerprint_hex(kv_get(kv, "meta.panel_fingerprint", "0"));
  model.database_fingerprint =
      parse_fingerprint_hex(kv_get(kv, "meta.database_fingerprint", "0"));
  model.dims.historic = static_cast<std::size_t>(kv_get_i64(kv, "meta.dims_historic", 0));
  model.dims.future = static_cast<std::size_t>(kv_get_i64(kv, "meta.dims_future", 0));
  model.dims.statics = static_cast<std::size_t>(kv_get_i64(kv, "meta.dims_statics", 0));
  model.dims.entities = static_cast<std::size_t>(kv_get_i64(kv, "meta.dims_entities", 0));
  model.dims.weeks = static_cast<std::size_t>(kv_get_i64(kv, "meta.dims_weeks", 0));

  std::map<std::string, Tensor> blobs;
  while (!r.at_eof()) {
    const std::uint32_t name_len = r.u32();
    if (name_len > 4096) {
      throw Error(ErrorKind::Format, "checkpoint blob name of " + std::to_string(name_len) +
                                         " bytes is implausible at offset " +
                                         std::to_string(r.offset()));
    }
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) {
      throw Error(ErrorKind::Format, "checkpoint blob '" + name + "' has implausible rank " +
                                         std::to_string(rank));
    }
    std::vector<std::size_t> shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = r.u64();
    Tensor t(shape, r.f64s(Tensor::numel_of(shape)));
    blobs.emplace(std::move(name), std::move(t));
  }

  const auto take = [&](const std::string& name) -> Tensor {
    const auto it = blobs.find(name);
    if (it == blobs.end()) {
      throw Error(ErrorKind::Format, "checkpoint is missing blob '" + name + "'");
    }
    Tensor t = std::move(it->second);
    blobs.erase(it);
    return t;
  };

  for (const ShapeEntry& entry : parameter_shapes(model.config, model.dims)) {
    Tensor t = take("param." + entry.name);
    if (t.shape != entry.shape) {
      throw Error(ErrorKind::Format, "checkpoint parameter '" + entry.name +
                                         "' has unexpected shape " + shape_string(t));
    }
    model.params.items.push_back({entry.name, std::move(t)});
  }
  for (auto& [name, values] : buffer_list(model)) {
    *values = take(name).data;
  }
  if (model.config.variant == Variant::RetRandom) {
    model.random_contexts = take("buffer.random_contexts");
  }
  if (!blobs.empty()) {
    throw Error(ErrorKind::Format,
                "checkpoint has unexpected extra blob '" + blobs.begin()->first + "'");
  }
  return model;
}

}  // namespace mqret
