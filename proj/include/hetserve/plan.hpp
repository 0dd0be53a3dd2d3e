#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetserve/candidates.hpp"
#include "hetserve/cluster.hpp"
#include "hetserve/error.hpp"
#include "hetserve/optimizer.hpp"
#include "hetserve/simulator.hpp"
#include "hetserve/workload.hpp"

namespace hetserve {

inline constexpr const char* kParetoFormat = "hetserve-pareto/1";
inline constexpr const char* kPlanFormat = "hetserve-plan/1";
inline constexpr const char* kReplayFormat = "hetserve-replay/1";

inline nlohmann::json read_json_file(const std::string& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open " + what + ": " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(what + " " + path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw NotFoundError("cannot write " + path);
  out << j.dump(2) << '\n';
}

inline std::string digest(const CandidateSet& set) { return sha256_hex(to_json(set).dump()); }

// One evaluated decision point as stored in a Pareto file or run log.
inline nlohmann::json record_to_json(const EvalRecord& r, const CandidateSet& cands, double quality_scale) {
  nlohmann::json ids = nlohmann::json::array(), models = nlohmann::json::array();
  for (std::size_t m = 0; m < r.theta.choice.size(); ++m) {
    const auto& c = cands.per_model[m].at(r.theta.choice[m]);
    ids.push_back(c.id);
    nlohmann::json d = {{"model", cands.models[m]}, {"candidate", c.id}};
    if (m < r.models.size()) {
      d["lambda"] = r.models[m].lambda;
      d["replica_loads"] = r.models[m].replica_loads;
      d["p95_s"] = detail::finite_or_null(r.models[m].p95);
    }
    models.push_back(std::move(d));
  }
  return {{"fractions", r.theta.fractions},
          {"thresholds", r.thresholds},
          {"candidates", ids},
          {"allocation", total_allocation(r.theta, cands)},
          {"cost_per_hour", r.cost},
          {"L_p95_s", r.latency},
          {"Q", r.quality * quality_scale},
          {"saturated", r.saturated},
          {"models", models}};
}

inline EvalRecord record_from_json(const nlohmann::json& j, const CandidateSet& cands, double quality_scale) {
  EvalRecord r;
  try {
    r.theta.fractions = j.at("fractions").get<std::vector<double>>();
    r.thresholds = j.at("thresholds").get<std::vector<double>>();
    const auto ids = j.at("candidates").get<std::vector<std::string>>();
    if (ids.size() != cands.models.size()) throw ValidationError("record lists the wrong number of candidates");
    for (std::size_t m = 0; m < ids.size(); ++m) {
      const auto& list = cands.per_model[m];
      std::size_t k = 0;
      while (k < list.size() && list[k].id != ids[m]) ++k;
      if (k == list.size()) throw NotFoundError("unknown candidate id " + ids[m]);
      r.theta.choice.push_back(k);
    }
    r.cost = j.at("cost_per_hour").get<double>();
    r.latency = j.at("L_p95_s").get<double>();
    r.quality = j.at("Q").get<double>() / quality_scale;
    r.saturated = j.value("saturated", false);
    for (const auto& d : j.at("models")) {
      ModelDetail md;
      md.lambda = d.value("lambda", 0.0);
      md.replica_loads = d.value("replica_loads", std::vector<double>{});
      md.p95 = d.contains("p95_s") ? detail::null_to_inf(d.at("p95_s")) : 0.0;
      r.models.push_back(std::move(md));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("pareto record: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Plan

struct PlanModel {
  std::string model;
  DeploymentCandidate candidate;
  double lambda = 0.0;
  std::vector<double> replica_loads;
  double p95 = 0.0;
};

struct Plan {
  std::vector<std::string> models;
  std::vector<double> fractions;
  std::vector<double> thresholds;
  std::vector<PlanModel> deployments;
  double latency = 0.0;
  double quality = 0.0;  // [0,1]
  double cost = 0.0;
  double total_qps = 0.0;
  double quality_scale = 1.0;
  std::string spec_digest;
  std::string trace_digest;
};

inline Plan make_plan(const EvalRecord& r, const CandidateSet& cands, double total_qps, double quality_scale,
                      const std::string& trace_digest) {
  Plan p;
  p.models = cands.models;
  p.fractions = r.theta.fractions;
  p.thresholds = r.thresholds;
  for (std::size_t m = 0; m < cands.models.size(); ++m) {
    PlanModel pm;
    pm.model = cands.models[m];
    pm.candidate = cands.per_model[m].at(r.theta.choice[m]);
    if (m < r.models.size()) {
      pm.lambda = r.models[m].lambda;
      pm.replica_loads = r.models[m].replica_loads;
      pm.p95 = r.models[m].p95;
    }
    p.deployments.push_back(std::move(pm));
  }
  p.latency = r.latency;
  p.quality = r.quality;
  p.cost = r.cost;
  p.total_qps = total_qps;
  p.quality_scale = quality_scale;
  p.spec_digest = cands.spec_digest;
  p.trace_digest = trace_digest;
  return p;
}

inline nlohmann::json to_json(const Plan& p) {
  nlohmann::json deps = nlohmann::json::array();
  for (const auto& d : p.deployments)
    deps.push_back({{"model", d.model},
                    {"candidate", to_json(d.candidate)},
                    {"lambda", d.lambda},
                    {"replica_loads", d.replica_loads},
                    {"p95_s", detail::finite_or_null(d.p95)}});
  return {{"format", kPlanFormat},
          {"spec_digest", p.spec_digest},
          {"trace_digest", p.trace_digest},
          {"models", p.models},
          {"fractions", p.fractions},
          {"thresholds", p.thresholds},
          {"deployments", deps},
          {"L_p95_s", p.latency},
          {"Q", p.quality * p.quality_scale},
          {"quality_scale", p.quality_scale},
          {"cost_per_hour", p.cost},
          {"total_qps", p.total_qps}};
}

inline Plan plan_from_json(const nlohmann::json& j) {
  Plan p;
  try {
    if (j.at("format").get<std::string>() != kPlanFormat) throw ValidationError("not a plan file");
    p.spec_digest = j.at("spec_digest").get<std::string>();
    p.trace_digest = j.at("trace_digest").get<std::string>();
    p.models = j.at("models").get<std::vector<std::string>>();
    p.fractions = j.at("fractions").get<std::vector<double>>();
    p.thresholds = j.at("thresholds").get<std::vector<double>>();
    for (const auto& d : j.at("deployments")) {
      PlanModel pm;
      pm.model = d.at("model").get<std::string>();
      pm.candidate = candidate_from_json(d.at("candidate"));
      pm.lambda = d.at("lambda").get<double>();
      pm.replica_loads = d.at("replica_loads").get<std::vector<double>>();
      pm.p95 = detail::null_to_inf(d.at("p95_s"));
      p.deployments.push_back(std::move(pm));
    }
    p.latency = j.at("L_p95_s").get<double>();
    p.quality_scale = j.at("quality_scale").get<double>();
    p.quality = j.at("Q").get<double>() / p.quality_scale;
    p.cost = j.at("cost_per_hour").get<double>();
    p.total_qps = j.at("total_qps").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("plan: ") + e.what());
  }
  if (p.deployments.size() != p.models.size() || p.fractions.size() != p.models.size() ||
      p.thresholds.size() + 1 != p.models.size())
    throw ValidationError("plan is internally inconsistent");
  validate(RoutingConfig{p.thresholds});
  return p;
}

// ---------------------------------------------------------------------------
// Replay: route the trace by the plan's thresholds, spread each model's
// requests over its replicas by smooth weighted round-robin on the planned
// loads, and simulate every replica.

struct ReplicaUsage {
  std::string model;
  ReplicaShape shape;
  double planned_load = 0.0;
  std::uint64_t arrivals = 0;
  std::uint64_t completed = 0;
  double utilization = 0.0;  // busy time over the arrival window
};

struct ReplayReport {
  QuantileVector quantiles = infinite_quantiles();
  double quality = 0.0;
  bool saturated = false;
  std::vector<ReplicaUsage> replicas;
  double predicted_latency = 0.0;
  double predicted_quality = 0.0;

  double p95() const { return quantiles[kP95]; }
  double latency_rel_error() const { return (p95() - predicted_latency) / predicted_latency; }
};

namespace detail {

// Smooth weighted round-robin: each pick raises every weight's credit and
// charges the winner the total.
class WeightedRoundRobin {
 public:
  explicit WeightedRoundRobin(std::vector<double> weights) : w_(std::move(weights)), credit_(w_.size(), 0.0) {
    for (double v : w_) total_ += v;
  }
  bool empty() const { return !(total_ > 0.0); }
  std::size_t next() {
    std::size_t best = 0;
    for (std::size_t i = 0; i < w_.size(); ++i) {
      credit_[i] += w_[i];
      if (credit_[i] > credit_[best]) best = i;
    }
    credit_[best] -= total_;
    return best;
  }

 private:
  std::vector<double> w_;
  std::vector<double> credit_;
  double total_ = 0.0;
};

}  // namespace detail

inline ReplayReport replay(const Plan& plan, const Trace& trace, const ClusterSpec& spec, std::uint64_t seed) {
  if (trace.models() != plan.models) throw ValidationError("trace models do not match the plan");
  const RoutingConfig tau{plan.thresholds};
  ReplayReport rep;
  rep.predicted_latency = plan.latency;
  rep.predicted_quality = plan.quality;
  rep.quality = estimate_quality(trace, tau);

  std::vector<ReplicaConfig> configs;
  std::vector<std::vector<SimRequest>> streams;
  std::vector<std::size_t> first(plan.models.size());
  std::vector<detail::WeightedRoundRobin> rr;
  for (std::size_t m = 0; m < plan.deployments.size(); ++m) {
    const auto& d = plan.deployments[m];
    if (d.model != plan.models[m]) throw ValidationError("plan deployments are out of model order");
    if (d.replica_loads.size() != d.candidate.replicas.size()) throw ValidationError("plan replica loads do not match replicas");
    first[m] = configs.size();
    for (std::size_t i = 0; i < d.candidate.replicas.size(); ++i) {
      const auto& shape = d.candidate.replicas[i];
      if (shape.model != d.model) throw ValidationError("replica of " + shape.model + " listed under " + d.model);
      configs.push_back(spec.config(shape));
      streams.emplace_back();
      rep.replicas.push_back({d.model, shape, d.replica_loads[i], 0, 0, 0.0});
    }
    rr.emplace_back(d.replica_loads);
  }

  const auto requests = build_requests(trace, plan.total_qps, seed, spec.sim);
  for (const auto& req : requests) {
    const std::size_t m = route(trace.queries()[req.source], tau);
    if (rr[m].empty()) {
      // The plan gave this model no load but a query still routes to it.
      if (plan.deployments[m].candidate.replicas.empty()) throw ValidationError("query routed to a model with no replicas");
      streams[first[m]].push_back(req);
      continue;
    }
    streams[first[m] + rr[m].next()].push_back(req);
  }

  std::vector<double> all;
  for (std::size_t r = 0; r < configs.size(); ++r) {
    const auto out = simulate_requests(configs[r], spec.coeffs, streams[r], spec.sim);
    rep.replicas[r].arrivals = out.result.arrivals;
    rep.replicas[r].completed = out.result.completed;
    rep.replicas[r].utilization = out.busy_s / spec.sim.duration_s;
    rep.saturated = rep.saturated || out.result.saturated;
    all.insert(all.end(), out.latencies.begin(), out.latencies.end());
  }
  if (!rep.saturated && !all.empty()) rep.quantiles = latency_quantiles(all);
  return rep;
}

inline nlohmann::json to_json(const ReplayReport& r, double quality_scale) {
  nlohmann::json reps = nlohmann::json::array();
  for (const auto& u : r.replicas)
    reps.push_back({{"model", u.model},
                    {"replica", to_json(u.shape)},
                    {"planned_load", u.planned_load},
                    {"arrivals", u.arrivals},
                    {"completed", u.completed},
                    {"utilization", u.utilization}});
  nlohmann::json q = nlohmann::json::object();
  for (std::size_t k = 0; k < kQuantileLevels.size(); ++k)
    q["p" + std::to_string(static_cast<int>(std::lround(kQuantileLevels[k] * 100)))] = detail::finite_or_null(r.quantiles[k]);
  return {{"format", kReplayFormat},
          {"quantiles_s", q},
          {"L_p95_s", detail::finite_or_null(r.p95())},
          {"Q", r.quality * quality_scale},
          {"saturated", r.saturated},
          {"predicted_L_p95_s", r.predicted_latency},
          {"predicted_Q", r.predicted_quality * quality_scale},
          {"latency_rel_error", detail::finite_or_null(r.latency_rel_error())},
          {"replicas", reps}};
}

}  // namespace hetserve
