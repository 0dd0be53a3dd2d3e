#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hetserve/error.hpp"
#include "hetserve/perfdb.hpp"

namespace hetserve {

struct LatencyCost {
  double latency = 0.0;
  double cost = 0.0;
};

// Indices of the points no other point weakly dominates (<= in both, < in
// one), ascending by cost. Identical points collapse onto the first one.
inline std::vector<std::size_t> pareto_skim(const std::vector<LatencyCost>& points) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].cost != points[b].cost) return points[a].cost < points[b].cost;
    if (points[a].latency != points[b].latency) return points[a].latency < points[b].latency;
    return a < b;
  });
  std::vector<std::size_t> out;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i : order) {
    if (points[i].latency < best) {
      out.push_back(i);
      best = points[i].latency;
    }
  }
  return out;
}

// A deployment of one model: a data-parallel group of replicas, possibly
// spanning GPU types.
struct DeploymentCandidate {
  std::string id;
  std::string model;
  std::vector<ReplicaShape> replicas;
  std::map<std::string, int> allocation;  // gpu name -> count
  double cost_per_hour = 0.0;
  double p95_ref = 0.0;
  // P95 (monotone envelope) sampled at curve_loads.
  std::vector<double> curve_loads;
  std::vector<double> curve_p95;

  int gpus_of(const std::string& gpu) const {
    auto it = allocation.find(gpu);
    return it == allocation.end() ? 0 : it->second;
  }
};

inline double allocation_cost(const ClusterSpec& spec, const std::map<std::string, int>& allocation) {
  double cost = 0.0;
  for (const auto& [gpu, n] : allocation) cost += n * spec.gpu(gpu).unit_cost_per_hour;
  return cost;
}

struct CandidateOptions {
  double ref_load = 0.0;   // load at which candidates are skimmed
  double max_load = 0.0;   // latency curves run from 0 to here
  double delta = 2.0;      // load split granularity
};

namespace detail {

inline std::vector<ReplicaShape> sorted_replicas(std::vector<ReplicaShape> r) {
  std::sort(r.begin(), r.end());
  return r;
}

// Running max, so a curve never reports lower latency at higher load.
inline void monotone_envelope(std::vector<double>& v) {
  for (std::size_t i = 1; i < v.size(); ++i) v[i] = std::max(v[i], v[i - 1]);
}

inline DeploymentCandidate make_candidate(const PerfDb& db, const std::string& model,
                                          std::vector<ReplicaShape> replicas, const CandidateOptions& opt) {
  DeploymentCandidate c;
  c.model = model;
  c.replicas = sorted_replicas(std::move(replicas));
  for (const auto& r : c.replicas) c.allocation[r.gpu] += r.n_gpus;
  c.cost_per_hour = allocation_cost(db.spec, c.allocation);
  c.p95_ref = split_load(db, c.replicas, opt.ref_load, opt.delta).minmax_p95;
  const std::size_t n = split_units(opt.max_load, opt.delta);
  for (std::size_t u = 0; u <= n; ++u) {
    const double load = n == 0 ? 0.0 : opt.max_load * static_cast<double>(u) / static_cast<double>(n);
    c.curve_loads.push_back(load);
    c.curve_p95.push_back(split_load(db, c.replicas, load, opt.delta).minmax_p95);
  }
  monotone_envelope(c.curve_p95);
  return c;
}

}  // namespace detail

// Homogeneous candidates on one GPU type: every pruned (tp, pp) shape times
// every data-parallel degree that fits, skimmed on (P95 at ref load, cost).
inline std::vector<DeploymentCandidate> gen_homog(const PerfDb& db, const std::string& model, const std::string& gpu,
                                                  const CandidateOptions& opt) {
  const int count = db.spec.gpu(gpu).count;
  const double unit = db.spec.gpu(gpu).unit_cost_per_hour;
  std::vector<std::vector<ReplicaShape>> groups;
  std::vector<LatencyCost> points;
  for (const auto& shape : db.shapes(model, gpu)) {
    for (int dp = 1; dp * shape.n_gpus <= count; ++dp) {
      std::vector<ReplicaShape> replicas(static_cast<std::size_t>(dp), shape);
      const auto split = split_load(db, replicas, opt.ref_load, opt.delta);
      if (!split.feasible) continue;
      groups.push_back(std::move(replicas));
      points.push_back({split.minmax_p95, dp * shape.n_gpus * unit});
    }
  }
  std::vector<DeploymentCandidate> out;
  for (std::size_t i : pareto_skim(points)) out.push_back(detail::make_candidate(db, model, groups[i], opt));
  return out;
}

// ---------------------------------------------------------------------------
// Multiple-choice knapsack

struct KnapsackItem {
  double cost = 0.0;
  // Latency carrying u load steps, u = 0..units.
  std::vector<double> curve;
};

struct KnapsackSolution {
  bool found = false;
  std::vector<int> choice;  // per group, -1 = nothing taken
  double latency = std::numeric_limits<double>::infinity();
  double cost = 0.0;
};

inline std::int64_t to_cents(double dollars) { return std::llround(dollars * 100.0); }

// Pick at most one item per group, total cost <= budget, minimizing the
// min-max latency of the combined replicas when `units` load steps are split
// across them. Curves are taken by their monotone envelope.
//
// For a target latency L each item can absorb cap(L) = the most steps it
// carries within L, and a selection reaches L iff its capacities sum to
// `units`. That makes the problem a plain max-capacity knapsack over cents
// for each L; the smallest feasible L (binary search over curve values) is
// the optimum, and the cheapest budget reaching it breaks ties.
inline KnapsackSolution knapsack_mck(const std::vector<std::vector<KnapsackItem>>& groups, double budget,
                                     std::size_t units) {
  if (!(budget > 0.0)) throw ValidationError("knapsack budget must be > 0");
  KnapsackSolution none;
  none.choice.assign(groups.size(), -1);
  const std::int64_t cap_cents = static_cast<std::int64_t>(std::floor(budget * 100.0 + 1e-6));

  std::vector<std::vector<std::vector<double>>> curves(groups.size());
  std::vector<std::vector<std::int64_t>> cents(groups.size());
  std::vector<double> levels;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& item : groups[g]) {
      if (item.curve.size() < units + 1) throw ValidationError("knapsack item curve shorter than the load grid");
      std::vector<double> c(item.curve.begin(), item.curve.begin() + static_cast<std::ptrdiff_t>(units + 1));
      detail::monotone_envelope(c);
      for (double v : c)
        if (std::isfinite(v)) levels.push_back(v);
      curves[g].push_back(std::move(c));
      cents[g].push_back(to_cents(item.cost));
    }
  }
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  if (levels.empty()) return none;

  const auto B = static_cast<std::size_t>(std::max<std::int64_t>(cap_cents, 0));
  // An item whose idle latency already exceeds L cannot be part of a selection reaching L.
  auto usable = [&](std::size_t g, std::size_t i, double level) { return curves[g][i][0] <= level; };
  auto capacity = [&](std::size_t g, std::size_t i, double level) -> std::size_t {
    const auto& c = curves[g][i];
    return static_cast<std::size_t>(std::upper_bound(c.begin(), c.end(), level) - c.begin()) - 1;
  };
  // tables[g][b]: best capacity from groups < g with cost at most b cents.
  auto solve = [&](double level) {
    std::vector<std::vector<std::size_t>> tables(groups.size() + 1, std::vector<std::size_t>(B + 1, 0));
    for (std::size_t g = 0; g < groups.size(); ++g) {
      auto& next = tables[g + 1];
      const auto& prev = tables[g];
      next = prev;
      for (std::size_t i = 0; i < curves[g].size(); ++i) {
        const std::int64_t w = cents[g][i];
        if (w < 0 || static_cast<std::size_t>(w) > B || !usable(g, i, level)) continue;
        const std::size_t cap = capacity(g, i, level);
        for (std::size_t b = static_cast<std::size_t>(w); b <= B; ++b)
          next[b] = std::max(next[b], std::min(units, prev[b - static_cast<std::size_t>(w)] + cap));
      }
    }
    return tables;
  };
  auto feasible = [&](double level) { return solve(level).back()[B] >= units; };

  if (!feasible(levels.back())) return none;
  std::size_t lo = 0, hi = levels.size() - 1;
  while (lo < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (feasible(levels[mid]))
      hi = mid;
    else
      lo = mid + 1;
  }
  const double level = levels[lo];
  const auto tables = solve(level);
  std::size_t b = 0;
  while (tables.back()[b] < units) ++b;

  KnapsackSolution sol;
  sol.found = true;
  sol.latency = level;
  sol.choice.assign(groups.size(), -1);
  // Walk back through the groups; prefer "take nothing", then the lowest index.
  for (std::size_t g = groups.size(); g-- > 0;) {
    const std::size_t target = tables[g + 1][b];
    if (tables[g][b] == target) continue;
    for (std::size_t i = 0; i < curves[g].size(); ++i) {
      const std::int64_t w = cents[g][i];
      if (w < 0 || static_cast<std::size_t>(w) > b || !usable(g, i, level)) continue;
      const std::size_t rest = b - static_cast<std::size_t>(w);
      if (std::min(units, tables[g][rest] + capacity(g, i, level)) == target) {
        sol.choice[g] = static_cast<int>(i);
        b = rest;
        break;
      }
    }
  }
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (sol.choice[g] >= 0) sol.cost += groups[g][static_cast<std::size_t>(sol.choice[g])].cost;
  if (units == 0) sol.latency = 0.0;
  return sol;
}

// Evenly spaced budgets o_k = B_cap * k / n, k = 1..n.
inline std::vector<double> budget_grid(double b_cap, std::size_t n) {
  std::vector<double> out;
  for (std::size_t k = 1; k <= n; ++k) out.push_back(b_cap * static_cast<double>(k) / static_cast<double>(n));
  return out;
}

// C_m: homogeneous frontiers of every GPU type plus one knapsack combination
// per budget on the grid, deduplicated and skimmed.
inline std::vector<DeploymentCandidate> gen_hetero(const PerfDb& db, const std::string& model, double b_cap,
                                                   std::size_t grid_size, const CandidateOptions& opt) {
  if (grid_size == 0) throw ValidationError("budget grid needs at least one point");
  std::vector<std::vector<DeploymentCandidate>> homog;
  for (const auto& gpu : db.spec.gpus) {
    auto front = gen_homog(db, model, gpu.name, opt);
    std::erase_if(front, [&](const DeploymentCandidate& c) { return c.cost_per_hour > b_cap + 1e-9; });
    homog.push_back(std::move(front));
  }

  const std::size_t units = split_units(opt.ref_load, opt.delta);
  const double step = units == 0 ? 0.0 : opt.ref_load / static_cast<double>(units);
  std::vector<std::vector<KnapsackItem>> groups(homog.size());
  for (std::size_t g = 0; g < homog.size(); ++g) {
    for (const auto& c : homog[g]) {
      KnapsackItem item{c.cost_per_hour, {}};
      for (std::size_t u = 0; u <= units; ++u)
        item.curve.push_back(split_load(db, c.replicas, step * static_cast<double>(u), opt.delta).minmax_p95);
      groups[g].push_back(std::move(item));
    }
  }

  std::map<std::vector<ReplicaShape>, DeploymentCandidate> pool;
  for (const auto& front : homog)
    for (const auto& c : front) pool.emplace(c.replicas, c);
  for (double o : budget_grid(b_cap, grid_size)) {
    const auto sol = knapsack_mck(groups, o, units);
    if (!sol.found) continue;
    std::vector<ReplicaShape> replicas;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (sol.choice[g] < 0) continue;
      const auto& r = homog[g][static_cast<std::size_t>(sol.choice[g])].replicas;
      replicas.insert(replicas.end(), r.begin(), r.end());
    }
    replicas = detail::sorted_replicas(std::move(replicas));
    if (!pool.contains(replicas)) pool.emplace(replicas, detail::make_candidate(db, model, replicas, opt));
  }

  std::vector<DeploymentCandidate> all;
  std::vector<LatencyCost> points;
  for (auto& [key, c] : pool) {
    if (!std::isfinite(c.p95_ref)) continue;
    points.push_back({c.p95_ref, c.cost_per_hour});
    all.push_back(std::move(c));
  }
  std::vector<DeploymentCandidate> out;
  for (std::size_t i : pareto_skim(points)) {
    out.push_back(std::move(all[i]));
    out.back().id = model + "-" + std::to_string(out.size() - 1);
  }
  return out;
}

// Per-model candidate lists plus the provenance needed downstream.
struct CandidateSet {
  std::string db_digest;
  std::string spec_digest;
  double budget = 0.0;
  std::size_t budget_grid = 0;
  CandidateOptions options;
  std::vector<std::string> models;
  std::vector<std::vector<DeploymentCandidate>> per_model;

  std::size_t model_index(const std::string& name) const {
    for (std::size_t i = 0; i < models.size(); ++i)
      if (models[i] == name) return i;
    throw NotFoundError("candidate set has no model " + name);
  }
  const DeploymentCandidate& find(std::size_t model, const std::string& id) const {
    for (const auto& c : per_model.at(model))
      if (c.id == id) return c;
    throw NotFoundError("unknown candidate id " + id);
  }
};

// Candidates for every model in the database. `ref_loads` may be empty, in
// which case each model is skimmed at max_load / M rounded to the grid.
inline CandidateSet generate_candidates(const PerfDb& db, double b_cap, std::size_t grid_size, double max_load,
                                        double delta, std::vector<double> ref_loads = {}) {
  if (!(b_cap > 0.0)) throw ValidationError("budget must be > 0");
  if (!(max_load > 0.0)) throw ValidationError("max load must be > 0");
  CandidateSet set;
  set.db_digest = digest(db);
  set.spec_digest = db.spec_digest;
  set.budget = b_cap;
  set.budget_grid = grid_size;
  set.models = db.spec.model_names();
  if (ref_loads.empty()) {
    const double expected = max_load / static_cast<double>(set.models.size());
    ref_loads.assign(set.models.size(), std::max(delta, std::round(expected / delta) * delta));
  }
  if (ref_loads.size() != set.models.size()) throw ValidationError("need one reference load per model");
  set.options = {ref_loads.front(), max_load, delta};
  for (std::size_t m = 0; m < set.models.size(); ++m) {
    CandidateOptions opt{ref_loads[m], max_load, delta};
    set.per_model.push_back(gen_hetero(db, set.models[m], b_cap, grid_size, opt));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Candidate file

inline nlohmann::json to_json(const ReplicaShape& s) {
  return {{"model", s.model}, {"gpu", s.gpu}, {"n_gpus", s.n_gpus}, {"tp", s.tp}, {"pp", s.pp}};
}

inline ReplicaShape shape_from_json(const nlohmann::json& j) {
  return {j.at("model").get<std::string>(), j.at("gpu").get<std::string>(), j.at("n_gpus").get<int>(),
          j.at("tp").get<int>(), j.at("pp").get<int>()};
}

namespace detail {

// Infinite latencies are written as null.
inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
inline double null_to_inf(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace detail

inline nlohmann::json to_json(const DeploymentCandidate& c) {
  nlohmann::json replicas = nlohmann::json::array();
  for (const auto& r : c.replicas) replicas.push_back(to_json(r));
  // (tp, pp, dp) per distinct shape
  std::map<ReplicaShape, int> dp;
  for (const auto& r : c.replicas) ++dp[r];
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& [s, n] : dp) groups.push_back({{"gpu", s.gpu}, {"tp", s.tp}, {"pp", s.pp}, {"dp", n}});
  nlohmann::json p95 = nlohmann::json::array();
  for (double v : c.curve_p95) p95.push_back(detail::finite_or_null(v));
  return {{"id", c.id},
          {"model", c.model},
          {"allocation", c.allocation},
          {"groups", groups},
          {"replicas", replicas},
          {"cost_per_hour", c.cost_per_hour},
          {"p95_ref_s", detail::finite_or_null(c.p95_ref)},
          {"curve", {{"loads", c.curve_loads}, {"p95_s", p95}}}};
}

inline DeploymentCandidate candidate_from_json(const nlohmann::json& j) {
  DeploymentCandidate c;
  c.id = j.at("id").get<std::string>();
  c.model = j.at("model").get<std::string>();
  c.allocation = j.at("allocation").get<std::map<std::string, int>>();
  for (const auto& r : j.at("replicas")) c.replicas.push_back(shape_from_json(r));
  c.cost_per_hour = j.at("cost_per_hour").get<double>();
  c.p95_ref = detail::null_to_inf(j.at("p95_ref_s"));
  c.curve_loads = j.at("curve").at("loads").get<std::vector<double>>();
  for (const auto& v : j.at("curve").at("p95_s")) c.curve_p95.push_back(detail::null_to_inf(v));
  return c;
}

inline nlohmann::json to_json(const CandidateSet& set) {
  nlohmann::json models = nlohmann::json::array();
  for (std::size_t m = 0; m < set.models.size(); ++m) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& c : set.per_model[m]) list.push_back(to_json(c));
    models.push_back({{"model", set.models[m]}, {"candidates", list}});
  }
  return {{"format", "hetserve-candidates/1"},
          {"db_digest", set.db_digest},
          {"spec_digest", set.spec_digest},
          {"budget", set.budget},
          {"budget_grid", set.budget_grid},
          {"ref_load", set.options.ref_load},
          {"max_load", set.options.max_load},
          {"delta", set.options.delta},
          {"models", models}};
}

inline CandidateSet candidates_from_json(const nlohmann::json& j) {
  CandidateSet set;
  try {
    if (j.at("format").get<std::string>() != "hetserve-candidates/1") throw ParseError("unknown candidate file format");
    set.db_digest = j.at("db_digest").get<std::string>();
    set.spec_digest = j.at("spec_digest").get<std::string>();
    set.budget = j.at("budget").get<double>();
    set.budget_grid = j.at("budget_grid").get<std::size_t>();
    set.options = {j.at("ref_load").get<double>(), j.at("max_load").get<double>(), j.at("delta").get<double>()};
    for (const auto& m : j.at("models")) {
      set.models.push_back(m.at("model").get<std::string>());
      std::vector<DeploymentCandidate> list;
      for (const auto& c : m.at("candidates")) list.push_back(candidate_from_json(c));
      set.per_model.push_back(std::move(list));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("candidate file: ") + e.what());
  }
  return set;
}

}  // namespace hetserve
