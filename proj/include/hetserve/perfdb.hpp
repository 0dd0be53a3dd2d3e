#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hetserve/cluster.hpp"
#include "hetserve/error.hpp"
#include "hetserve/simulator.hpp"
#include "hetserve/workload.hpp"

namespace hetserve {

struct LoadGrid {
  std::vector<double> loads;

  static LoadGrid range(double lo, double hi, double step) {
    if (!(lo > 0.0 && step > 0.0 && hi >= lo)) throw ValidationError("load grid needs 0 < lo <= hi and step > 0");
    LoadGrid g;
    const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
    for (std::size_t i = 0; i < n; ++i) g.loads.push_back(lo + step * static_cast<double>(i));
    return g;
  }

  // The default grid: 2, 4, ..., 40 QPS.
  static LoadGrid standard() { return range(2.0, 40.0, 2.0); }

  std::size_t size() const { return loads.size(); }
  double max() const { return loads.back(); }
  double min() const { return loads.front(); }
};

inline void validate(const LoadGrid& g) {
  if (g.loads.empty()) throw ValidationError("load grid is empty");
  for (std::size_t i = 0; i < g.loads.size(); ++i) {
    if (!(g.loads[i] > 0.0)) throw ValidationError("load grid values must be positive");
    if (i > 0 && !(g.loads[i] > g.loads[i - 1])) throw ValidationError("load grid must be strictly increasing");
  }
}

struct PerfRecord {
  QuantileVector quantiles = infinite_quantiles();
  double throughput = 0.0;
  bool saturated = false;

  double p95() const { return quantiles[kP95]; }
  bool operator==(const PerfRecord&) const = default;

  static PerfRecord infeasible() { return {infinite_quantiles(), 0.0, true}; }
  static PerfRecord idle() { return {QuantileVector{}, 0.0, false}; }
};

struct PerfDb {
  ClusterSpec spec;
  std::string spec_digest;
  std::string trace_digest;
  LoadGrid grid;
  std::uint64_t seed = 0;
  // One record per grid load, in grid order.
  std::map<ReplicaShape, std::vector<PerfRecord>> records;

  std::size_t record_count() const { return records.size() * grid.size(); }

  // Largest finite P95 anywhere in the database.
  double max_finite_p95() const {
    double best = 0.0;
    for (const auto& [shape, recs] : records)
      for (const auto& r : recs)
        if (!r.saturated && std::isfinite(r.p95())) best = std::max(best, r.p95());
    return best;
  }

  std::vector<ReplicaShape> shapes(const std::string& model, const std::string& gpu) const {
    std::vector<ReplicaShape> out;
    for (const auto& [shape, recs] : records)
      if (shape.model == model && shape.gpu == gpu) out.push_back(shape);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Enumeration

inline bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

// All (tp, pp) splits of 1..gpu.count devices that survive pruning: tp a
// power of two within the intra-node limit, and the model fits in memory.
inline std::vector<ReplicaConfig> enumerate_single_replica_configs(const ModelSpec& model, const GpuSpec& gpu,
                                                                   int seq_tokens = 1) {
  std::vector<ReplicaConfig> out;
  for (int a = 1; a <= gpu.count; ++a) {
    for (int tp = 1; tp <= a; ++tp) {
      if (a % tp != 0 || !is_power_of_two(tp)) continue;
      ReplicaConfig c{model, gpu, a, tp, a / tp};
      if (validate_config(c, seq_tokens)) out.push_back(std::move(c));
    }
  }
  return out;
}

inline std::uint64_t divisor_count(int a) {
  std::uint64_t n = 0;
  for (int d = 1; d <= a; ++d)
    if (a % d == 0) ++n;
  return n;
}

struct EnumerationCount {
  std::uint64_t pre_configs = 0;   // every (tp, pp) with tp*pp = a, a in 1..d_n
  std::uint64_t post_configs = 0;  // after pruning
  std::uint64_t pre_sims = 0;      // configs x |grid|
  std::uint64_t post_sims = 0;
};

// Census without model/GPU detail: pre-pruning divisor pairs only.
inline EnumerationCount count_enumeration(std::size_t models, const std::vector<int>& gpu_counts,
                                          std::size_t grid_size) {
  EnumerationCount c;
  for (int d : gpu_counts)
    for (int a = 1; a <= d; ++a) c.pre_configs += divisor_count(a);
  c.pre_configs *= models;
  c.pre_sims = c.pre_configs * grid_size;
  return c;
}

inline EnumerationCount count_enumeration(const ClusterSpec& spec, std::size_t grid_size, int seq_tokens = 1) {
  std::vector<int> counts;
  for (const auto& g : spec.gpus) counts.push_back(g.count);
  EnumerationCount c = count_enumeration(spec.models.size(), counts, grid_size);
  for (const auto& m : spec.models)
    for (const auto& g : spec.gpus) c.post_configs += enumerate_single_replica_configs(m, g, seq_tokens).size();
  c.post_sims = c.post_configs * grid_size;
  return c;
}

// ---------------------------------------------------------------------------
// Build

inline PerfRecord to_record(const SimResult& r) { return {r.quantiles, r.throughput, r.saturated}; }

// Simulates every pruned configuration at every grid load. Cells are
// independent; with `threads` > 1 they run on a small worker pool, and the
// result does not depend on the thread count.
inline PerfDb build_db(const ClusterSpec& spec, const Trace& trace, const LoadGrid& grid, std::uint64_t seed,
                       unsigned threads = 1) {
  validate(spec);
  validate(grid);
  if (trace.model_count() != spec.models.size())
    throw ValidationError("trace quality labels do not match the cluster's model list");

  PerfDb db;
  db.spec = spec;
  db.spec_digest = digest(spec);
  db.trace_digest = digest(trace);
  db.grid = grid;
  db.seed = seed;

  const int seq = max_sequence_tokens(trace);
  std::vector<ReplicaConfig> configs;
  for (const auto& m : spec.models)
    for (const auto& g : spec.gpus)
      for (auto& c : enumerate_single_replica_configs(m, g, seq)) configs.push_back(std::move(c));

  struct Cell {
    std::size_t config;
    std::size_t load;
  };
  std::vector<Cell> cells;
  for (std::size_t i = 0; i < configs.size(); ++i)
    for (std::size_t j = 0; j < grid.size(); ++j) cells.push_back({i, j});

  std::vector<std::vector<PerfRecord>> results(configs.size(), std::vector<PerfRecord>(grid.size()));
  std::atomic<std::size_t> cursor{0};
  auto worker = [&] {
    for (std::size_t i = cursor++; i < cells.size(); i = cursor++) {
      const Cell& cell = cells[i];
      results[cell.config][cell.load] =
          to_record(simulate(configs[cell.config], spec.coeffs, trace, grid.loads[cell.load], seed, spec.sim));
    }
  };
  threads = std::max(1u, threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  for (std::size_t i = 0; i < configs.size(); ++i) db.records.emplace(configs[i].shape(), std::move(results[i]));
  return db;
}

// ---------------------------------------------------------------------------
// Lookup

// Exact at grid points, linear in between. Zero load is an idle replica;
// loads below the first grid point reuse it (latency only grows with load).
// Beyond the grid, or next to a saturated cell, the answer is the infeasible
// sentinel.
inline PerfRecord lookup(const PerfDb& db, const ReplicaShape& shape, double load) {
  auto it = db.records.find(shape);
  if (it == db.records.end())
    throw NotFoundError("no records for " + shape.model + " on " + std::to_string(shape.n_gpus) + "x" + shape.gpu +
                        " tp=" + std::to_string(shape.tp) + " pp=" + std::to_string(shape.pp));
  const auto& recs = it->second;
  const auto& loads = db.grid.loads;
  constexpr double eps = 1e-9;
  if (load <= eps) return PerfRecord::idle();
  if (load > loads.back() + eps) return PerfRecord::infeasible();
  if (load <= loads.front() + eps) return recs.front().saturated ? PerfRecord::infeasible() : recs.front();

  auto hi = static_cast<std::size_t>(std::lower_bound(loads.begin(), loads.end(), load - eps) - loads.begin());
  if (std::abs(loads[hi] - load) <= eps) return recs[hi].saturated ? PerfRecord::infeasible() : recs[hi];
  const std::size_t lo = hi - 1;
  if (recs[lo].saturated || recs[hi].saturated) return PerfRecord::infeasible();
  const double w = (load - loads[lo]) / (loads[hi] - loads[lo]);
  PerfRecord out;
  for (std::size_t q = 0; q < out.quantiles.size(); ++q)
    out.quantiles[q] = recs[lo].quantiles[q] + w * (recs[hi].quantiles[q] - recs[lo].quantiles[q]);
  out.throughput = recs[lo].throughput + w * (recs[hi].throughput - recs[lo].throughput);
  out.saturated = false;
  return out;
}

// ---------------------------------------------------------------------------
// Load distribution across data-parallel replicas

struct SplitResult {
  bool feasible = false;
  std::vector<double> loads;  // per replica
  double minmax_p95 = std::numeric_limits<double>::infinity();
};

// Number of equal steps a load is cut into: the finest grid no coarser than
// `delta` that divides `load` exactly.
inline std::size_t split_units(double load, double delta) {
  if (!(delta > 0.0)) throw ValidationError("split granularity must be > 0");
  if (load <= 0.0) return 0;
  return static_cast<std::size_t>(std::ceil(load / delta - 1e-9));
}

// Min over splits of `units` steps across replicas of the max per-replica
// latency; `latency(i, u)` is replica i's latency carrying u steps (infinite
// when saturated). Ties go to the lexicographically smallest split. Exact: the
// dynamic program only compares values, never combines them.
inline std::pair<double, std::vector<std::size_t>> minmax_split(
    std::size_t replicas, std::size_t units, const std::function<double(std::size_t, std::size_t)>& latency) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (replicas == 0) return {units == 0 ? 0.0 : inf, {}};

  std::vector<std::vector<double>> lat(replicas, std::vector<double>(units + 1));
  for (std::size_t i = 0; i < replicas; ++i)
    for (std::size_t u = 0; u <= units; ++u) lat[i][u] = latency(i, u);

  // best[i][u]: optimal value for replicas i.. carrying u steps.
  std::vector<std::vector<double>> best(replicas + 1, std::vector<double>(units + 1, inf));
  best[replicas][0] = 0.0;
  for (std::size_t i = replicas; i-- > 0;) {
    for (std::size_t u = 0; u <= units; ++u) {
      double b = inf;
      for (std::size_t v = 0; v <= u; ++v) b = std::min(b, std::max(lat[i][v], best[i + 1][u - v]));
      best[i][u] = b;
    }
  }
  const double opt = best[0][units];
  std::vector<std::size_t> split(replicas, 0);
  if (!std::isfinite(opt)) return {opt, split};
  std::size_t rem = units;
  for (std::size_t i = 0; i < replicas; ++i) {
    for (std::size_t v = 0; v <= rem; ++v) {
      if (std::max(lat[i][v], best[i + 1][rem - v]) == best[i][rem]) {
        split[i] = v;
        rem -= v;
        break;
      }
    }
  }
  return {opt, split};
}

inline SplitResult split_load(const PerfDb& db, const std::vector<ReplicaShape>& replicas, double load, double delta) {
  SplitResult out;
  const std::size_t units = split_units(load, delta);
  const double step = units == 0 ? 0.0 : load / static_cast<double>(units);
  auto [opt, split] = minmax_split(replicas.size(), units, [&](std::size_t i, std::size_t u) {
    const PerfRecord r = lookup(db, replicas[i], step * static_cast<double>(u));
    return r.saturated ? std::numeric_limits<double>::infinity() : r.p95();
  });
  out.minmax_p95 = opt;
  out.feasible = std::isfinite(opt);
  out.loads.resize(replicas.size(), 0.0);
  for (std::size_t i = 0; i < replicas.size(); ++i) out.loads[i] = step * static_cast<double>(split[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Binary format: "HSPERFDB" magic, u32 version, provenance header, then one
// block per configuration. Little-endian, 64-bit floats.

inline constexpr char kDbMagic[8] = {'H', 'S', 'P', 'E', 'R', 'F', 'D', 'B'};
inline constexpr std::uint32_t kDbVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "database format assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

inline void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ParseError("perf database truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const PerfDb& db) {
  std::string out(kDbMagic, sizeof kDbMagic);
  detail::put<std::uint32_t>(out, kDbVersion);
  detail::put_string(out, db.spec_digest);
  detail::put_string(out, db.trace_digest);
  detail::put<std::uint64_t>(out, db.seed);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(db.grid.size()));
  for (double l : db.grid.loads) detail::put<double>(out, l);
  detail::put_string(out, to_json(db.spec).dump());
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(db.records.size()));
  for (const auto& [shape, recs] : db.records) {
    detail::put_string(out, shape.model);
    detail::put_string(out, shape.gpu);
    detail::put<std::int32_t>(out, shape.n_gpus);
    detail::put<std::int32_t>(out, shape.tp);
    detail::put<std::int32_t>(out, shape.pp);
    for (const auto& r : recs) {
      for (double q : r.quantiles) detail::put<double>(out, q);
      detail::put<double>(out, r.throughput);
      detail::put<std::uint8_t>(out, r.saturated ? 1 : 0);
    }
  }
  return out;
}

inline PerfDb deserialize_db(std::string_view bytes) {
  if (bytes.size() < sizeof kDbMagic || std::memcmp(bytes.data(), kDbMagic, sizeof kDbMagic) != 0)
    throw ParseError("not a perf database (bad magic)");
  detail::Reader in(bytes.substr(sizeof kDbMagic));
  const auto version = in.get<std::uint32_t>();
  if (version != kDbVersion) throw ParseError("unsupported perf database version " + std::to_string(version));
  PerfDb db;
  db.spec_digest = in.get_string();
  db.trace_digest = in.get_string();
  db.seed = in.get<std::uint64_t>();
  const auto n_loads = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_loads; ++i) db.grid.loads.push_back(in.get<double>());
  try {
    db.spec = cluster_from_json(nlohmann::json::parse(in.get_string()));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("perf database: embedded spec: ") + e.what());
  }
  if (digest(db.spec) != db.spec_digest) throw ValidationError("perf database: embedded spec does not match its digest");
  const auto n_configs = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_configs; ++i) {
    ReplicaShape s;
    s.model = in.get_string();
    s.gpu = in.get_string();
    s.n_gpus = in.get<std::int32_t>();
    s.tp = in.get<std::int32_t>();
    s.pp = in.get<std::int32_t>();
    std::vector<PerfRecord> recs(n_loads);
    for (auto& r : recs) {
      for (double& q : r.quantiles) q = in.get<double>();
      r.throughput = in.get<double>();
      r.saturated = in.get<std::uint8_t>() != 0;
    }
    db.records.emplace(std::move(s), std::move(recs));
  }
  if (!in.done()) throw ParseError("perf database has trailing bytes");
  return db;
}

inline void save_db(const PerfDb& db, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw NotFoundError("cannot write perf database: " + path);
  const std::string bytes = serialize(db);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// `expected_spec_digest`, when given, must match the database's provenance.
inline PerfDb load_db(const std::string& path, const std::string& expected_spec_digest = {}) {
  PerfDb db = deserialize_db(read_file(path));
  if (!expected_spec_digest.empty() && expected_spec_digest != db.spec_digest)
    throw ValidationError("perf database " + path + " was built from a different cluster spec");
  return db;
}

inline std::string digest(const PerfDb& db) { return sha256_hex(serialize(db)); }

}  // namespace hetserve
