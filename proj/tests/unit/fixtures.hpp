#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hetserve/candidates.hpp"
#include "hetserve/cluster.hpp"
#include "hetserve/perfdb.hpp"
#include "hetserve/workload.hpp"

namespace fixtures {

using namespace hetserve;

// Two-model trace with the given scores; quality columns default to 1.
inline Trace scored_trace(const std::vector<double>& scores, const std::vector<double>& q_small = {},
                          const std::vector<double>& q_large = {}) {
  std::vector<Query> qs;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    Query q;
    q.id = "q" + std::to_string(i);
    q.arrival_s = 0.1 * static_cast<double>(i);
    q.input_tokens = 100;
    q.output_tokens = 50;
    q.routing_score = scores[i];
    q.quality = {q_small.empty() ? 1.0 : q_small[i], q_large.empty() ? 1.0 : q_large[i]};
    qs.push_back(q);
  }
  return Trace({"small", "large"}, std::move(qs));
}

inline std::vector<double> tenths() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0}; }

// Random two-model trace with Poisson arrivals.
inline Trace random_trace(std::size_t n, std::uint64_t seed, double rate = 10.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::exponential_distribution<double> gap(rate);
  std::uniform_int_distribution<int> in(50, 400), out(20, 200);
  std::vector<Query> qs;
  double t = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    t += gap(rng);
    const double d = u(rng);
    qs.push_back({"q" + std::to_string(i), t, in(rng), out(rng), d, {u(rng) < 1.0 - d ? 1.0 : 0.0, u(rng) < 0.9 ? 1.0 : 0.0}});
  }
  return Trace({"small", "large"}, std::move(qs));
}

inline GpuSpec gpu(const std::string& name, double cost, int count, double mem_gb = 80.0, int max_tp = 8) {
  return {name, cost, 100.0, 1000.0, mem_gb, max_tp, count, 100.0};
}

inline ModelSpec model(const std::string& name, double weight_gb) {
  return {name, weight_gb * 1e9, weight_gb * 1e9, 1e5, 32, 4096};
}

inline ClusterSpec two_type_spec() {
  ClusterSpec s;
  s.gpus = {gpu("big", 2.69, 4), gpu("cheap", 0.89, 4, 32.0)};
  s.models = {model("small", 8), model("large", 60)};
  s.sim.duration_s = 20.0;
  return s;
}

// A database whose records are written by hand: `p95(shape, load)` gives the
// value of every stored quantile; infinity marks a saturated cell.
template <typename F>
PerfDb handmade_db(const ClusterSpec& spec, const std::vector<ReplicaShape>& shapes, const LoadGrid& grid, F p95) {
  PerfDb db;
  db.spec = spec;
  db.spec_digest = digest(spec);
  db.trace_digest = "handmade";
  db.grid = grid;
  for (const auto& s : shapes) {
    auto& recs = db.records[s];
    for (double load : grid.loads) {
      const double v = p95(s, load);
      if (!std::isfinite(v)) {
        recs.push_back(PerfRecord::infeasible());
        continue;
      }
      PerfRecord r;
      r.quantiles.fill(v);
      r.throughput = load;
      recs.push_back(r);
    }
  }
  return db;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("hetserve_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
