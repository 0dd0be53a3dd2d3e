// Command-line front end: perfdb build, candidates gen, optimize, select,
// replay, simulate.
//
// Exit codes: 0 success, 2 validation or IO failure, 3 infeasible request,
// 64 usage error.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "hetserve/candidates.hpp"
#include "hetserve/cluster.hpp"
#include "hetserve/optimizer.hpp"
#include "hetserve/perfdb.hpp"
#include "hetserve/plan.hpp"
#include "hetserve/simulator.hpp"
#include "hetserve/workload.hpp"

using namespace hetserve;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitUsage = 64;

struct UsageError : Error {
  using Error::Error;
};

LoadGrid parse_loads(const std::string& s) {
  double lo = 0, hi = 0, step = 0;
  char c1 = 0, c2 = 0;
  std::istringstream in(s);
  if (!(in >> lo >> c1 >> hi >> c2 >> step) || c1 != ':' || c2 != ':' || !in.eof())
    throw UsageError("--loads expects lo:hi:step, got '" + s + "'");
  return LoadGrid::range(lo, hi, step);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

struct PerfdbArgs {
  std::string spec, trace, loads = "2:40:2", out;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  double quality_scale = 1.0;
};

int cmd_perfdb_build(const PerfdbArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto grid = parse_loads(a.loads);
  const auto spec = load_cluster(a.spec);
  const auto trace = load_trace(a.trace, spec.model_names(), a.quality_scale);
  const unsigned threads = a.threads ? a.threads : std::max(1u, std::thread::hardware_concurrency());
  const auto db = build_db(spec, trace, grid, a.seed, threads);
  save_db(db, a.out);
  std::cout << "records " << db.record_count() << "\n"
            << "configs " << db.records.size() << "\n"
            << "build_s " << std::fixed << std::setprecision(2) << seconds_since(t0) << "\n"
            << "digest " << digest(db) << "\n";
  return kExitOk;
}

struct CandArgs {
  std::string db, out;
  double budget = 0.0;
  std::size_t grid = 10;
  std::optional<double> qps;
  double delta = 2.0;
};

int cmd_candidates_gen(const CandArgs& a) {
  if (a.grid < 10 || a.grid > 20) throw UsageError("--grid must lie in 10..20");
  const auto db = load_db(a.db);
  const double max_load = a.qps.value_or(db.grid.max());
  const auto set = generate_candidates(db, a.budget, a.grid, max_load, a.delta);
  bool any = false;
  for (std::size_t m = 0; m < set.models.size(); ++m) {
    std::cout << set.models[m] << " " << set.per_model[m].size() << "\n";
    any = any || !set.per_model[m].empty();
  }
  if (!any) std::cerr << "warning: no candidate fits within budget " << a.budget << "\n";
  write_json_file(a.out, to_json(set));
  return kExitOk;
}

CandidateSet load_candidates(const std::string& path, const PerfDb& db) {
  const auto set = candidates_from_json(read_json_file(path, "candidate file"));
  if (set.db_digest != digest(db)) throw ValidationError("candidate file " + path + " was generated from a different database");
  return set;
}

struct OptArgs {
  std::string db, cands, trace, out, log;
  double qps = 0.0, budget = 0.0;
  std::optional<double> lmax, qmin;
  std::size_t iters = 100;
  std::uint64_t seed = 0;
  double quality_scale = 1.0;
  std::string aggregation = "pooled";
  std::size_t fit_starts = 8;
};

int cmd_optimize(const OptArgs& a) {
  const auto db = load_db(a.db);
  const auto cands = load_candidates(a.cands, db);
  const auto trace = load_trace(a.trace, cands.models, a.quality_scale);
  if (digest(trace) != db.trace_digest) throw ValidationError("trace " + a.trace + " differs from the one the database was built on");
  if (a.qmin && *a.qmin / a.quality_scale >= 1.0)
    throw InfeasibleError("no feasible configuration: quality floor " + std::to_string(*a.qmin) + " is unreachable");

  auto cons = Constraints::from_spec(db.spec, a.budget, a.qps);
  cons.l_max = a.lmax;
  if (a.qmin) cons.q_min = *a.qmin / a.quality_scale;
  EvalOptions eo;
  eo.aggregation = a.aggregation == "max" ? Aggregation::max : Aggregation::pooled;
  eo.delta = cands.options.delta;
  const Evaluator eval(trace, db, cands, a.qps, eo);

  RunOptions ro;
  ro.budget_iters = a.iters;
  ro.seed = a.seed;
  ro.fit.starts = a.fit_starts;
  ro.acq.seed = a.seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = run(eval, db, db.spec, cons, ro);
  if (res.pareto.records.empty()) throw InfeasibleError("no feasible configuration under constraints");

  const std::string log_path = a.log.empty() ? a.out + ".log.jsonl" : a.log;
  std::ofstream log(log_path);
  if (!log) throw NotFoundError("cannot write " + log_path);
  for (const auto& e : res.log) {
    json rec = {{"iteration", e.iteration},
                {"record", record_to_json(e.record, cands, a.quality_scale)},
                {"hypervolume", e.hypervolume},
                {"frontier_changed", e.frontier_changed},
                {"timing_s", {{"fit", e.fit_s}, {"acq", e.acq_s}, {"eval", e.eval_s}}}};
    log << rec.dump() << '\n';
  }

  json records = json::array();
  for (const auto& r : res.pareto.records) records.push_back(record_to_json(r, cands, a.quality_scale));
  json out = {{"format", kParetoFormat},
              {"db_digest", digest(db)},
              {"candidates_digest", digest(cands)},
              {"trace_digest", db.trace_digest},
              {"spec_digest", db.spec_digest},
              {"total_qps", a.qps},
              {"budget", a.budget},
              {"quality_scale", a.quality_scale},
              {"aggregation", a.aggregation},
              {"seed", a.seed},
              {"evaluations", res.evaluations.size()},
              {"converged", res.converged},
              {"hypervolume", res.space.hypervolume(res.pareto)},
              {"records", records}};
  write_json_file(a.out, out);
  std::cout << "evaluations " << res.evaluations.size() << "\n"
            << "converged " << (res.converged ? "yes" : "no") << "\n"
            << "pareto " << res.pareto.records.size() << "\n"
            << "elapsed_s " << std::fixed << std::setprecision(1) << seconds_since(t0) << "\n";
  return kExitOk;
}

struct SelectArgs {
  std::string pareto, cands, out;
  std::optional<double> qmin, lmax;
};

int cmd_select(const SelectArgs& a) {
  if (a.qmin.has_value() == a.lmax.has_value()) throw UsageError("give exactly one of --qmin or --lmax");
  const auto pj = read_json_file(a.pareto, "pareto file");
  if (pj.value("format", "") != kParetoFormat) throw ValidationError(a.pareto + " is not a pareto file");
  const auto cands = candidates_from_json(read_json_file(a.cands, "candidate file"));
  if (digest(cands) != pj.at("candidates_digest").get<std::string>())
    throw ValidationError("candidate file " + a.cands + " does not match the pareto file");
  const double scale = pj.at("quality_scale").get<double>();
  ParetoSet ps;
  for (const auto& r : pj.at("records")) ps.records.push_back(record_from_json(r, cands, scale));
  std::optional<double> q;
  if (a.qmin) q = *a.qmin / scale;
  const auto rec = select(ps, q, a.lmax);
  const auto plan = make_plan(rec, cands, pj.at("total_qps").get<double>(), scale, pj.at("trace_digest").get<std::string>());
  write_json_file(a.out, to_json(plan));
  std::cout << record_to_json(rec, cands, scale).dump() << "\n";
  return kExitOk;
}

struct ReplayArgs {
  std::string plan, trace, spec, out;
  std::uint64_t seed = 0;
};

int cmd_replay(const ReplayArgs& a) {
  const auto plan = plan_from_json(read_json_file(a.plan, "plan"));
  const auto spec = load_cluster(a.spec);
  if (digest(spec) != plan.spec_digest) throw ValidationError("cluster spec " + a.spec + " does not match the plan");
  const auto trace = load_trace(a.trace, plan.models, plan.quality_scale);
  if (digest(trace) != plan.trace_digest) throw ValidationError("trace " + a.trace + " does not match the plan");
  const auto rep = replay(plan, trace, spec, a.seed);
  const auto j = to_json(rep, plan.quality_scale);
  if (!a.out.empty()) write_json_file(a.out, j);
  std::cout << "replay_p95_s " << j["L_p95_s"] << "\n"
            << "predicted_p95_s " << plan.latency << "\n"
            << "latency_rel_error " << j["latency_rel_error"] << "\n"
            << "Q " << rep.quality * plan.quality_scale << "\n"
            << "predicted_Q " << plan.quality * plan.quality_scale << "\n";
  return kExitOk;
}

struct SimArgs {
  std::string spec, model, gpu, trace;
  int n = 1, tp = 1, pp = 1;
  double qps = 0.0;
  std::uint64_t seed = 0;
  double quality_scale = 1.0;
};

int cmd_simulate(const SimArgs& a) {
  const auto spec = load_cluster(a.spec);
  const ReplicaConfig cfg{spec.model(a.model), spec.gpu(a.gpu), a.n, a.tp, a.pp};
  const auto trace = load_trace(a.trace, spec.model_names(), a.quality_scale);
  const auto ok = validate_config(cfg, max_sequence_tokens(trace));
  if (!ok) throw ValidationError(std::string("infeasible config: ") + to_string(ok.reason) + " (" + ok.detail + ")");
  const auto r = simulate(cfg, spec.coeffs, trace, a.qps, a.seed, spec.sim);
  json q = json::object();
  std::cout << "quantile  latency_s\n";
  for (std::size_t k = 0; k < kQuantileLevels.size(); ++k) {
    const auto key = "p" + std::to_string(static_cast<int>(std::lround(kQuantileLevels[k] * 100)));
    std::cout << std::left << std::setw(10) << key << r.quantiles[k] << "\n";
    q[key] = detail::finite_or_null(r.quantiles[k]);
  }
  std::cout << std::setw(10) << "tput" << r.throughput << "\n";
  json line = {{"quantiles_s", q},        {"throughput", r.throughput}, {"arrivals", r.arrivals},
               {"completed", r.completed}, {"dropped", r.dropped},       {"saturated", r.saturated}};
  std::cout << line.dump() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"heterogeneous LLM serving planner"};
  app.require_subcommand(1);

  auto* perfdb = app.add_subcommand("perfdb", "performance database");
  perfdb->require_subcommand(1);
  PerfdbArgs pa;
  auto* build = perfdb->add_subcommand("build", "simulate every feasible replica over a load grid");
  build->add_option("--spec", pa.spec, "cluster spec JSON")->required();
  build->add_option("--trace", pa.trace, "trace JSONL")->required();
  build->add_option("--loads", pa.loads, "load grid lo:hi:step");
  build->add_option("--seed", pa.seed);
  build->add_option("--out", pa.out, "database file")->required();
  build->add_option("--threads", pa.threads, "worker threads (0: all cores)");
  build->add_option("--quality-scale", pa.quality_scale, "divisor mapping trace quality labels to [0,1]");

  auto* candidates = app.add_subcommand("candidates", "deployment candidates");
  candidates->require_subcommand(1);
  CandArgs ca;
  auto* gen = candidates->add_subcommand("gen", "generate per-model candidate sets");
  gen->add_option("--db", ca.db)->required();
  gen->add_option("--budget", ca.budget, "budget cap per hour")->required();
  gen->add_option("--grid", ca.grid, "budget grid points (10..20)");
  gen->add_option("--qps", ca.qps, "expected total load; sets the curve range and reference loads");
  gen->add_option("--delta", ca.delta, "load split granularity");
  gen->add_option("--out", ca.out)->required();

  OptArgs oa;
  auto* opt = app.add_subcommand("optimize", "search routing and deployment jointly");
  opt->add_option("--db", oa.db)->required();
  opt->add_option("--cands", oa.cands)->required();
  opt->add_option("--trace", oa.trace)->required();
  opt->add_option("--qps", oa.qps, "total load")->required();
  opt->add_option("--budget", oa.budget)->required();
  opt->add_option("--lmax", oa.lmax, "P95 latency limit, seconds");
  opt->add_option("--qmin", oa.qmin, "quality floor on the trace's scale");
  opt->add_option("--iters", oa.iters, "iteration budget after the initial design");
  opt->add_option("--seed", oa.seed);
  opt->add_option("--out", oa.out, "pareto file")->required();
  opt->add_option("--log", oa.log, "run log (default: <out>.log.jsonl)");
  opt->add_option("--quality-scale", oa.quality_scale);
  opt->add_option("--aggregation", oa.aggregation, "system P95: pooled or max")->check(CLI::IsMember({"pooled", "max"}));
  opt->add_option("--fit-starts", oa.fit_starts, "hyperparameter restarts per fit");

  SelectArgs sa;
  auto* sel = app.add_subcommand("select", "pick one Pareto record as a plan");
  sel->add_option("--pareto", sa.pareto)->required();
  sel->add_option("--cands", sa.cands, "candidate file the pareto file refers to")->required();
  sel->add_option("--qmin", sa.qmin);
  sel->add_option("--lmax", sa.lmax);
  sel->add_option("--out", sa.out, "plan file")->required();

  ReplayArgs ra;
  auto* rep = app.add_subcommand("replay", "simulate a plan end to end");
  rep->add_option("--plan", ra.plan)->required();
  rep->add_option("--trace", ra.trace)->required();
  rep->add_option("--spec", ra.spec)->required();
  rep->add_option("--seed", ra.seed);
  rep->add_option("--out", ra.out, "report file");

  SimArgs sm;
  auto* sim = app.add_subcommand("simulate", "simulate one replica");
  sim->add_option("--spec", sm.spec)->required();
  sim->add_option("--model", sm.model)->required();
  sim->add_option("--gpu", sm.gpu)->required();
  sim->add_option("--n", sm.n)->required();
  sim->add_option("--tp", sm.tp)->required();
  sim->add_option("--pp", sm.pp)->required();
  sim->add_option("--trace", sm.trace)->required();
  sim->add_option("--qps", sm.qps)->required();
  sim->add_option("--seed", sm.seed);
  sim->add_option("--quality-scale", sm.quality_scale);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (build->parsed()) return cmd_perfdb_build(pa);
    if (gen->parsed()) return cmd_candidates_gen(ca);
    if (opt->parsed()) return cmd_optimize(oa);
    if (sel->parsed()) return cmd_select(sa);
    if (rep->parsed()) return cmd_replay(ra);
    if (sim->parsed()) return cmd_simulate(sm);
  } catch (const UsageError& e) {
    std::cerr << "usage: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return kExitInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  }
  return kExitUsage;
}
