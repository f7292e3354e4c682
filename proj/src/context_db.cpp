#include "mqret/context_db.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "mqret/io.hpp"

namespace mqret {

std::uint64_t ContextDb::fingerprint() const {
  Fingerprint fp;
  fp.update_u64(entities);
  fp.update_u64(t_begin);
  fp.update_u64(t_end);
  fp.update_u64(train_end);
  fp.update_u64(dim);
  fp.update_u64(checkpoint_fingerprint);
  fp.update_u64(panel_fingerprint);
  fp.update_f64s(values);
  return fp.digest();
}

ContextDb build_database(const Forecaster& base, const Panel& panel, Window window,
                         std::size_t train_end, std::optional<std::size_t> expected_dim) {
  if (base.config.variant != Variant::Baseline && base.config.variant != Variant::BaselineLarge) {
    throw Error(ErrorKind::Parameter,
                "build_database: the builder checkpoint must be a trained baseline, got variant '" +
                    std::string(variant_tag(base.config.variant)) + "'");
  }
  const std::size_t d = static_cast<std::size_t>(base.config.context_dim);
  if (expected_dim && *expected_dim != d) {
    throw Error(ErrorKind::Data, "build_database: checkpoint has context dim " +
                                     std::to_string(d) + ", requested " +
                                     std::to_string(*expected_dim));
  }
  if (window.end > panel.weeks || window.begin >= window.end) {
    throw Error(ErrorKind::Parameter, "build_database: window [" + std::to_string(window.begin) +
                                          ", " + std::to_string(window.end) +
                                          ") is outside the panel calendar");
  }
  if (train_end <= window.begin) {
    throw Error(ErrorKind::Parameter,
                "build_database: the training boundary must lie inside the window");
  }
  if (base.panel_fingerprint != panel.fingerprint()) {
    throw Error(ErrorKind::Staleness,
                "build_database: the checkpoint was trained on a different panel");
  }

  ContextDb db;
  db.entities = panel.entities;
  db.t_begin = window.begin;
  db.t_end = window.end;
  db.train_end = train_end;
  db.dim = d;
  db.entity_ids = panel.entity_ids;
  db.checkpoint_fingerprint = checkpoint_fingerprint(base);
  db.panel_fingerprint = panel.fingerprint();
  db.seed = base.config.seed;
  db.values.assign(db.entities * db.steps() * d, 0.0);

  // the frozen encoder reads history from time zero so rows match encode()
  PanelView full_view(panel, 0, window.end, window.end);
  parallel_for(db.entities, [&](std::size_t i) {
    const Tensor enc = encode_entity(base, full_view, i);
    for (std::size_t t = window.begin; t < window.end; ++t) {
      std::memcpy(&db.values[(i * db.steps() + (t - window.begin)) * d], &enc.data[t * d],
                  d * sizeof(double));
    }
  });
  for (double v : db.values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::Data, "build_database: encoder produced a non-finite context");
    }
  }
  return db;
}

AggregatedContexts aggregate(const ContextDb& db) {
  const std::size_t agg_end = std::min(db.train_end, db.t_end);
  if (agg_end <= db.t_begin) {
    throw Error(ErrorKind::Parameter,
                "aggregate: database holds no rows inside the training window");
  }
  AggregatedContexts agg;
  agg.entities = db.entities;
  agg.dim = db.dim;
  agg.db_fingerprint = db.fingerprint();
  agg.values.assign(db.entities * db.dim, 0.0);
  for (std::size_t i = 0; i < db.entities; ++i) {
    double* out = &agg.values[i * db.dim];
    for (std::size_t t = db.t_begin; t < agg_end; ++t) {
      const double* row = db.row(i, t);
      for (std::size_t c = 0; c < db.dim; ++c) out[c] += row[c];
    }
  }
  return agg;
}

void verify_database(const ContextDb& db, const Forecaster& model) {
  if (db.checkpoint_fingerprint != checkpoint_fingerprint(model)) {
    throw Error(ErrorKind::Staleness,
                "context database was built from a different checkpoint (database records " +
                    fingerprint_hex(db.checkpoint_fingerprint) + ")");
  }
}

namespace {
constexpr char kDbMagic[4] = {'M', 'Q', 'D', 'B'};
constexpr std::uint32_t kDbVersion = 1;
}  // namespace

void save_database(const ContextDb& db, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.bytes(kDbMagic, sizeof kDbMagic);
  w.u32(kDbVersion);
  w.u64(db.entities);
  w.u64(db.steps());
  w.u64(db.dim);
  w.u64(db.t_begin);
  w.u64(db.train_end);
  w.u64(db.checkpoint_fingerprint);
  w.u64(db.panel_fingerprint);
  w.u64(db.seed);
  w.f64s(db.values);
  w.close();

  std::string index;
  for (const std::string& id : db.entity_ids) {
    index += id;
    index += '\n';
  }
  write_text_file(path.string() + ".idx", index);
}

ContextDb load_database(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorKind::Dependency,
                "context database '" + path.string() + "' does not exist; run build-db first");
  }
  BinaryReader r(path);
  char magic[4];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kDbMagic, sizeof kDbMagic) != 0) {
    throw Error(ErrorKind::Format, "'" + path.string() + "' is not a context database (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kDbVersion) {
    throw Error(ErrorKind::Format, "unsupported database version " + std::to_string(version));
  }
  ContextDb db;
  db.entities = r.u64();
  const std::uint64_t steps = r.u64();
  db.dim = r.u64();
  db.t_begin = r.u64();
  db.t_end = db.t_begin + steps;
  db.train_end = r.u64();
  db.checkpoint_fingerprint = r.u64();
  db.panel_fingerprint = r.u64();
  db.seed = r.u64();
  if (db.entities == 0 || steps == 0 || db.dim == 0 ||
      db.entities > (1ULL << 32) || steps * db.dim > (1ULL << 40)) {
    throw Error(ErrorKind::Format, "database header declares implausible dimensions");
  }
  db.values = r.f64s(db.entities * steps * db.dim);
  r.expect_eof("database rows");

  const std::filesystem::path index_path = path.string() + ".idx";
  if (std::filesystem::exists(index_path)) {
    std::istringstream ids(read_text_file(index_path));
    std::string line;
    while (std::getline(ids, line)) {
      if (!line.empty()) db.entity_ids.push_back(line);
    }
    if (db.entity_ids.size() != db.entities) {
      throw Error(ErrorKind::Format, "database index lists " +
                                         std::to_string(db.entity_ids.size()) +
                                         " entities, header says " + std::to_string(db.entities));
    }
  }
  for (double v : db.values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::Format, "database holds non-finite values");
    }
  }
  return db;
}

}  // namespace mqret
