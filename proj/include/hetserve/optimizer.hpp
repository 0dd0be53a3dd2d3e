#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "hetserve/candidates.hpp"
#include "hetserve/error.hpp"
#include "hetserve/perfdb.hpp"
#include "hetserve/surrogate.hpp"
#include "hetserve/workload.hpp"

namespace hetserve {

struct Constraints {
  double budget = 0.0;                    // B_cap, currency per hour
  std::map<std::string, int> availability;  // d_n per gpu name
  std::optional<double> l_max;            // seconds
  std::optional<double> q_min;            // (0,1)
  double total_qps = 0.0;

  static Constraints from_spec(const ClusterSpec& spec, double budget, double total_qps) {
    Constraints c;
    c.budget = budget;
    c.total_qps = total_qps;
    for (const auto& g : spec.gpus) c.availability[g.name] = g.count;
    return c;
  }
};

inline void validate(const Constraints& c) {
  if (!(c.budget > 0.0)) throw ValidationError("budget must be > 0");
  if (!(c.total_qps > 0.0)) throw ValidationError("total qps must be > 0");
  if (c.l_max && !(*c.l_max > 0.0)) throw ValidationError("latency limit must be > 0");
  if (c.q_min && !(*c.q_min > 0.0 && *c.q_min < 1.0)) throw ValidationError("quality floor must lie in (0,1)");
  for (const auto& [gpu, d] : c.availability)
    if (d < 0) throw ValidationError("availability of " + gpu + " must be >= 0");
}

// Per-gpu totals of a decision point.
inline std::map<std::string, int> total_allocation(const ThetaPoint& t, const CandidateSet& cands) {
  if (t.choice.size() != cands.models.size()) throw ValidationError("theta has the wrong number of candidate choices");
  std::map<std::string, int> out;
  for (std::size_t m = 0; m < t.choice.size(); ++m) {
    if (t.choice[m] >= cands.per_model[m].size()) throw NotFoundError("unknown candidate index for model " + cands.models[m]);
    for (const auto& [gpu, n] : cands.per_model[m][t.choice[m]].allocation) out[gpu] += n;
  }
  return out;
}

inline double theta_cost(const ThetaPoint& t, const CandidateSet& cands) {
  double cost = 0.0;
  for (std::size_t m = 0; m < t.choice.size(); ++m) cost += cands.per_model[m].at(t.choice[m]).cost_per_hour;
  return cost;
}

// Budget and availability, compared to the cent.
inline bool hard_feasible(const ThetaPoint& t, const Constraints& cons, const CandidateSet& cands) {
  const auto alloc = total_allocation(t, cands);
  if (to_cents(theta_cost(t, cands)) > to_cents(cons.budget)) return false;
  for (const auto& [gpu, n] : alloc) {
    auto it = cons.availability.find(gpu);
    if (n > (it == cons.availability.end() ? 0 : it->second)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Aggregation { pooled, max };

struct WeightedQuantiles {
  double weight = 0.0;
  QuantileVector quantiles{};
};

namespace detail {

// CDF implied by a quantile vector: zero below P50, a jump to 0.5 there, then
// linear between adjacent stored levels. `left` gives the limit from below.
inline double quantile_cdf(const QuantileVector& q, double x, bool left) {
  if (left ? x <= q[0] : x < q[0]) return 0.0;
  for (std::size_t k = 0; k + 1 < q.size(); ++k) {
    if (left ? x > q[k + 1] : x >= q[k + 1]) continue;
    if (!(q[k + 1] > q[k])) return kQuantileLevels[k + 1];
    return kQuantileLevels[k] + (kQuantileLevels[k + 1] - kQuantileLevels[k]) * (x - q[k]) / (q[k + 1] - q[k]);
  }
  return 1.0;
}

}  // namespace detail

// Smallest x with sum_r w_r F_r(x) >= level, F_r as in detail::quantile_cdf.
// The mixture CDF is piecewise linear between stored quantile values, so the
// answer is found exactly by scanning those breakpoints. Weights are
// normalized here.
inline double mixture_quantile(const std::vector<WeightedQuantiles>& parts, double level) {
  double total = 0.0;
  for (const auto& p : parts) total += p.weight;
  if (!(total > 0.0)) return 0.0;
  std::vector<double> xs;
  for (const auto& p : parts)
    if (p.weight > 0.0) xs.insert(xs.end(), p.quantiles.begin(), p.quantiles.end());
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  const auto mass = [&](double x, bool left) {
    double m = 0.0;
    for (const auto& p : parts)
      if (p.weight > 0.0) m += p.weight / total * detail::quantile_cdf(p.quantiles, x, left);
    return m;
  };
  constexpr double tol = 1e-12;
  double prev_x = 0.0, prev_m = 0.0;
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const double x = xs[j];
    if (!std::isfinite(x)) return x;
    const double below = mass(x, true);
    if (j > 0 && below >= level - tol && below > prev_m)
      return prev_x + (x - prev_x) * std::clamp((level - prev_m) / (below - prev_m), 0.0, 1.0);
    const double at = mass(x, false);
    if (at >= level - tol) return x;
    prev_x = x;
    prev_m = at;
  }
  return xs.empty() ? 0.0 : xs.back();
}

struct ModelDetail {
  double lambda = 0.0;
  std::vector<double> replica_loads;
  double p95 = 0.0;
};

struct EvalRecord {
  ThetaPoint theta;
  std::vector<double> thresholds;
  double latency = 0.0;  // system P95, seconds; the penalty value when saturated
  double quality = 0.0;  // [0,1]
  double cost = 0.0;
  bool saturated = false;
  std::vector<ModelDetail> models;
};

struct EvalOptions {
  Aggregation aggregation = Aggregation::pooled;
  double delta = 2.0;  // load split granularity
  double penalty_factor = 4.0;
};

class Evaluator {
 public:
  Evaluator(const Trace& trace, const PerfDb& db, const CandidateSet& cands, double total_qps, EvalOptions opt = {})
      : trace_(&trace), db_(&db), cands_(&cands), total_qps_(total_qps), opt_(opt) {
    if (cands.models != trace.models()) throw ValidationError("candidate models do not match trace models");
    const double grid_max = db.max_finite_p95();
    penalty_ = opt.penalty_factor * (std::isfinite(grid_max) && grid_max > 0.0 ? grid_max : 1.0);
  }

  double penalty_latency() const { return penalty_; }
  double total_qps() const { return total_qps_; }
  const CandidateSet& candidates() const { return *cands_; }
  const Trace& trace() const { return *trace_; }

  EvalRecord operator()(const ThetaPoint& t) const {
    validate(LoadFractions{t.fractions});
    EvalRecord r;
    r.theta = t;
    const auto tau = fractions_to_thresholds(LoadFractions{t.fractions}, *trace_);
    r.thresholds = tau.thresholds;
    r.quality = estimate_quality(*trace_, tau);
    r.cost = theta_cost(t, *cands_);
    std::vector<WeightedQuantiles> parts;
    double max_p95 = 0.0;
    for (std::size_t m = 0; m < t.choice.size(); ++m) {
      const auto& cand = cands_->per_model[m].at(t.choice[m]);
      ModelDetail d;
      d.lambda = t.fractions[m] * total_qps_;
      const auto split = split_load(*db_, cand.replicas, d.lambda, opt_.delta);
      if (!split.feasible) r.saturated = true;
      d.replica_loads = split.loads;
      std::vector<WeightedQuantiles> own;
      for (std::size_t i = 0; i < cand.replicas.size() && split.feasible; ++i) {
        if (split.loads[i] <= 0.0) continue;
        const auto rec = lookup(*db_, cand.replicas[i], split.loads[i]);
        own.push_back({split.loads[i] / total_qps_, rec.quantiles});
      }
      d.p95 = split.feasible ? mixture_quantile(own, kQuantileLevels[kP95]) : std::numeric_limits<double>::infinity();
      if (d.lambda > 0.0) max_p95 = std::max(max_p95, d.p95);
      parts.insert(parts.end(), own.begin(), own.end());
      r.models.push_back(std::move(d));
    }
    if (r.saturated) {
      r.latency = penalty_;
    } else {
      r.latency = opt_.aggregation == Aggregation::pooled ? mixture_quantile(parts, kQuantileLevels[kP95]) : max_p95;
      if (!(r.latency > 0.0)) r.latency = penalty_;
    }
    return r;
  }

 private:
  const Trace* trace_;
  const PerfDb* db_;
  const CandidateSet* cands_;
  double total_qps_;
  EvalOptions opt_;
  double penalty_ = 1.0;
};

// ---------------------------------------------------------------------------
// Hypervolume

struct Point2 {
  double a = 0.0;  // both coordinates minimized
  double b = 0.0;
};

inline double hypervolume_2d(std::vector<Point2> pts, Point2 ref) {
  std::erase_if(pts, [&](const Point2& p) { return !(p.a < ref.a && p.b < ref.b); });
  std::sort(pts.begin(), pts.end(), [](const Point2& x, const Point2& y) { return x.a != y.a ? x.a < y.a : x.b < y.b; });
  double area = 0.0, prev_b = ref.b;
  for (const auto& p : pts) {
    if (p.b < prev_b) {
      area += (ref.a - p.a) * (prev_b - p.b);
      prev_b = p.b;
    }
  }
  return area;
}

namespace detail {

// Nondominated staircase of `pts` inside the reference box, ascending in a.
inline std::vector<Point2> staircase(std::vector<Point2> pts, Point2 ref) {
  std::erase_if(pts, [&](const Point2& p) { return !(p.a < ref.a && p.b < ref.b); });
  std::sort(pts.begin(), pts.end(), [](const Point2& x, const Point2& y) { return x.a != y.a ? x.a < y.a : x.b < y.b; });
  std::vector<Point2> out;
  for (const auto& p : pts)
    if (out.empty() || p.b < out.back().b) out.push_back(p);
  return out;
}

// Hypervolume gained by adding p to a staircase (ascending a, descending b).
inline double hv_improvement(const std::vector<Point2>& stair, Point2 p, Point2 ref) {
  if (!(p.a < ref.a && p.b < ref.b)) return 0.0;
  // Dominated box of p minus the part the staircase already covers: sweep the
  // staircase steps to the right of p.a.
  double gain = 0.0;
  double x = p.a;
  double height = ref.b;  // lowest b covered at abscissa x
  std::size_t i = 0;
  for (; i < stair.size() && stair[i].a <= p.a; ++i) height = std::min(height, stair[i].b);
  for (;;) {
    const double next = i < stair.size() ? stair[i].a : ref.a;
    if (height > p.b) gain += (next - x) * (height - p.b);
    if (i >= stair.size()) break;
    x = next;
    height = std::min(height, stair[i].b);
    ++i;
  }
  return gain;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pareto set

struct ParetoSet {
  std::vector<EvalRecord> records;  // ascending latency

  static bool dominates(const EvalRecord& x, const EvalRecord& y) {
    return x.latency <= y.latency && x.quality >= y.quality && (x.latency < y.latency || x.quality > y.quality);
  }

  // Inserts r if nothing dominates or equals it; drops the records it dominates.
  bool insert(const EvalRecord& r) {
    for (const auto& p : records)
      if (dominates(p, r) || (p.latency == r.latency && p.quality == r.quality)) return false;
    std::erase_if(records, [&](const EvalRecord& p) { return dominates(r, p); });
    auto pos = std::lower_bound(records.begin(), records.end(), r,
                                [](const EvalRecord& x, const EvalRecord& y) { return x.latency < y.latency; });
    records.insert(pos, r);
    return true;
  }
};

// Fixed objective space used for hypervolume bookkeeping: the transforms of
// the initial design and a reference point 10% of the span beyond the worst
// observed value in each coordinate.
struct ObjectiveSpace {
  LatencyTransform latency_tf;
  QualityTransform quality_tf;
  Point2 ref;

  Point2 map(double latency, double quality) const { return {latency_tf.forward(latency), -quality_tf.forward(quality)}; }

  static ObjectiveSpace from_records(const std::vector<EvalRecord>& recs) {
    ObjectiveSpace s;
    std::vector<double> ls, qs;
    for (const auto& r : recs)
      if (!r.saturated) ls.push_back(r.latency), qs.push_back(r.quality);
    if (ls.empty())
      for (const auto& r : recs) ls.push_back(r.latency), qs.push_back(r.quality);
    s.latency_tf.fit(ls);
    s.quality_tf.fit(qs);
    double amin = std::numeric_limits<double>::infinity(), amax = -amin, bmin = amin, bmax = -amin;
    for (std::size_t i = 0; i < ls.size(); ++i) {
      const auto p = s.map(ls[i], qs[i]);
      amin = std::min(amin, p.a), amax = std::max(amax, p.a);
      bmin = std::min(bmin, p.b), bmax = std::max(bmax, p.b);
    }
    const double span_a = std::max(amax - amin, 1e-3), span_b = std::max(bmax - bmin, 1e-3);
    s.ref = {amax + 0.1 * span_a, bmax + 0.1 * span_b};
    return s;
  }

  // Reference point as raw (latency, quality).
  std::pair<double, double> raw_ref() const {
    return {latency_tf.inverse(ref.a), quality_tf.inverse(-ref.b)};
  }

  double hypervolume(const ParetoSet& p) const {
    std::vector<Point2> pts;
    for (const auto& r : p.records) pts.push_back(map(r.latency, r.quality));
    return hypervolume_2d(std::move(pts), ref);
  }
};

// ---------------------------------------------------------------------------
// Acquisition

struct AcqConfig {
  std::size_t mc_samples = 128;
  std::size_t pool_size = 512;
  std::size_t q = 1;
  std::uint64_t seed = 0;
  double mutation_step = 0.05;
};

inline void validate(const AcqConfig& a) {
  if (a.mc_samples == 0 || a.pool_size == 0) throw ValidationError("acquisition counts must be positive");
  if (a.q != 1) throw ValidationError("only sequential (q = 1) proposals are supported");
}

// Joint posterior draws in minimization space: a = latency, b = -quality.
// Rows index points (observed first, then pool), columns index samples.
struct ObjectiveSamples {
  Eigen::MatrixXd a;
  Eigen::MatrixXd b;
};

struct AcqScores {
  std::vector<double> score;
  std::vector<double> stderr_;  // MC standard error of each score
};

// Constrained NEHVI from joint samples. The first n_observed rows are the
// observed points whose sampled values form each draw's frontier. A sample
// counts only when it meets a_max (latency limit) and b_max (negated quality
// floor), both in the same space as the samples.
inline AcqScores acq_from_samples(const ObjectiveSamples& s, std::size_t n_observed, Point2 ref,
                                  std::optional<double> a_max = std::nullopt, std::optional<double> b_max = std::nullopt) {
  const auto rows = static_cast<std::size_t>(s.a.rows());
  const auto n_samples = static_cast<std::size_t>(s.a.cols());
  if (n_observed > rows) throw ValidationError("more observed rows than samples");
  const std::size_t n_pool = rows - n_observed;
  auto ok = [&](double a, double b) { return (!a_max || a <= *a_max) && (!b_max || b <= *b_max); };
  std::vector<double> sum(n_pool, 0.0), sumsq(n_pool, 0.0);
  std::vector<Point2> front;
  for (std::size_t k = 0; k < n_samples; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    front.clear();
    for (std::size_t i = 0; i < n_observed; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      if (ok(s.a(ii, kk), s.b(ii, kk))) front.push_back({s.a(ii, kk), s.b(ii, kk)});
    }
    const auto stair = detail::staircase(front, ref);
    for (std::size_t j = 0; j < n_pool; ++j) {
      const auto jj = static_cast<Eigen::Index>(n_observed + j);
      const double a = s.a(jj, kk), b = s.b(jj, kk);
      const double v = ok(a, b) ? detail::hv_improvement(stair, {a, b}, ref) : 0.0;
      sum[j] += v;
      sumsq[j] += v * v;
    }
  }
  AcqScores out;
  const double n = static_cast<double>(n_samples);
  for (std::size_t j = 0; j < n_pool; ++j) {
    const double mean = sum[j] / n;
    const double var = n > 1 ? std::max(0.0, (sumsq[j] - n * mean * mean) / (n - 1)) : 0.0;
    out.score.push_back(mean);
    out.stderr_.push_back(std::sqrt(var / n));
  }
  return out;
}

// Scores a pool with the fitted surrogates. `observed` are the unsaturated
// evaluations, `ref_raw` the frozen reference point as (latency, quality).
inline AcqScores acq_cqnehvi(const Surrogates& sur, const Encoder& enc, const std::vector<EvalRecord>& observed,
                             const std::vector<ThetaPoint>& pool, const Constraints& cons, const AcqConfig& acq,
                             std::pair<double, double> ref_raw) {
  validate(acq);
  std::vector<EncodedPoint> xs;
  for (const auto& r : observed)
    if (!r.saturated) xs.push_back(enc.encode(r.theta));
  const std::size_t n_obs = xs.size();
  for (const auto& t : pool) xs.push_back(enc.encode(t));
  const auto pl = posterior(sur.latency, xs);
  const auto pq = posterior(sur.quality, xs);
  ObjectiveSamples s;
  s.a = sample_posterior(pl, acq.mc_samples, acq.seed);
  s.b = -sample_posterior(pq, acq.mc_samples, acq.seed ^ 0x9e3779b97f4a7c15ULL);
  const Point2 ref{sur.latency_tf.forward(ref_raw.first), -sur.quality_tf.forward(ref_raw.second)};
  std::optional<double> a_max, b_max;
  if (cons.l_max) a_max = sur.latency_tf.forward(*cons.l_max);
  if (cons.q_min) b_max = -sur.quality_tf.forward(*cons.q_min);
  return acq_from_samples(s, n_obs, ref, a_max, b_max);
}

// ---------------------------------------------------------------------------
// Proposal

namespace detail {

// Uniform point on the simplex from M-1 uniforms (sorted spacings).
inline std::vector<double> simplex_point(std::vector<double> u) {
  std::sort(u.begin(), u.end());
  std::vector<double> f;
  double prev = 0.0;
  for (double v : u) {
    f.push_back(v - prev);
    prev = v;
  }
  f.push_back(1.0 - prev);
  return f;
}

inline void renormalize(std::vector<double>& f) {
  for (double& v : f) v = std::max(0.0, v);
  const double s = std::accumulate(f.begin(), f.end(), 0.0);
  if (s <= 0.0) {
    std::fill(f.begin(), f.end(), 1.0 / static_cast<double>(f.size()));
    return;
  }
  for (double& v : f) v /= s;
}

// Fractions from raw thresholds: the routing search space when load-fraction
// encoding is off.
inline std::vector<double> fractions_from_thresholds(std::vector<double> tau, const Trace& trace) {
  for (double& t : tau) t = std::clamp(t, 0.0, 1.0);
  std::sort(tau.begin(), tau.end());
  return thresholds_to_fractions(RoutingConfig{std::move(tau)}, trace).values;
}

// Quasi-random decision point number `index` of a stream keyed by seed. The
// routing part is uniform on the simplex, or uniform in threshold space when
// `threshold_trace` is given.
inline ThetaPoint quasi_random_theta(const CandidateSet& cands, std::uint64_t index, std::uint64_t seed,
                                     const Trace* threshold_trace = nullptr) {
  const std::size_t m = cands.models.size();
  // Cranley-Patterson rotation keyed by seed keeps streams distinct.
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> shift(2 * m);
  for (double& s : shift) s = unit(rng);
  auto coord = [&](std::size_t d) {
    double v = halton(index + 1, d) + shift[d];
    return v - std::floor(v);
  };
  std::vector<double> u;
  for (std::size_t i = 0; i + 1 < m; ++i) u.push_back(coord(i));
  ThetaPoint t;
  t.fractions = threshold_trace ? fractions_from_thresholds(u, *threshold_trace) : simplex_point(u);
  for (std::size_t i = 0; i < m; ++i) {
    const auto n = cands.per_model[i].size();
    t.choice.push_back(std::min(n - 1, static_cast<std::size_t>(coord(m + i) * static_cast<double>(n))));
  }
  return t;
}

inline std::vector<std::size_t> cost_order(const std::vector<DeploymentCandidate>& list) {
  std::vector<std::size_t> order(list.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return list[x].cost_per_hour < list[y].cost_per_hour; });
  return order;
}

// Neighbors of t: each routing coordinate nudged by +-step (fractions
// renormalized, or thresholds when `threshold_trace` is given); each candidate
// swapped for its cost-adjacent neighbors.
inline std::vector<ThetaPoint> mutations(const ThetaPoint& t, const CandidateSet& cands, double step,
                                         const Trace* threshold_trace = nullptr) {
  std::vector<ThetaPoint> out;
  if (threshold_trace) {
    const auto tau = fractions_to_thresholds(LoadFractions{t.fractions}, *threshold_trace).thresholds;
    for (std::size_t i = 0; i < tau.size(); ++i) {
      for (double sgn : {-1.0, 1.0}) {
        auto moved = tau;
        moved[i] += sgn * step;
        ThetaPoint n = t;
        n.fractions = fractions_from_thresholds(std::move(moved), *threshold_trace);
        out.push_back(std::move(n));
      }
    }
  } else {
    for (std::size_t i = 0; i < t.fractions.size(); ++i) {
      for (double sgn : {-1.0, 1.0}) {
        ThetaPoint n = t;
        n.fractions[i] += sgn * step;
        renormalize(n.fractions);
        out.push_back(std::move(n));
      }
    }
  }
  for (std::size_t m = 0; m < t.choice.size(); ++m) {
    const auto order = cost_order(cands.per_model[m]);
    const auto pos = static_cast<std::size_t>(std::find(order.begin(), order.end(), t.choice[m]) - order.begin());
    for (long d : {-1L, 1L}) {
      const long p = static_cast<long>(pos) + d;
      if (p < 0 || p >= static_cast<long>(order.size())) continue;
      ThetaPoint n = t;
      n.choice[m] = order[static_cast<std::size_t>(p)];
      out.push_back(std::move(n));
    }
  }
  return out;
}

inline bool simplex_ok(const std::vector<double>& f) {
  double s = 0.0;
  for (double v : f) {
    if (!(v >= 0.0 && v <= 1.0)) return false;
    s += v;
  }
  return std::abs(s - 1.0) <= kSimplexTolerance;
}

// A choice move that breaks the budget or availability, repaired by moving
// one untouched model to its costliest cheaper candidate that fits.
inline std::optional<ThetaPoint> repair_choice(const ThetaPoint& moved, const ThetaPoint& origin,
                                               const CandidateSet& cands, const Constraints& cons) {
  for (std::size_t m = 0; m < moved.choice.size(); ++m) {
    if (moved.choice[m] != origin.choice[m]) continue;
    const auto& list = cands.per_model[m];
    const auto order = cost_order(list);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if (list[*it].cost_per_hour >= list[moved.choice[m]].cost_per_hour) continue;
      ThetaPoint t = moved;
      t.choice[m] = *it;
      if (hard_feasible(t, cons, cands)) return t;
    }
  }
  return std::nullopt;
}

}  // namespace detail

// Argmax of the acquisition over `pool` after hard filtering; ties go to the
// cheaper point, then to pool order.
inline ThetaPoint argmax_acquisition(const std::vector<ThetaPoint>& pool, const std::vector<double>& scores,
                                     const CandidateSet& cands) {
  if (pool.empty()) throw InfeasibleError("no feasible configuration under constraints");
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i) {
    if (scores[i] > scores[best] ||
        (scores[i] == scores[best] && theta_cost(pool[i], cands) < theta_cost(pool[best], cands)))
      best = i;
  }
  return pool[best];
}

// Quasi-random pool plus mutation neighbors of the Pareto points, filtered by
// the hard constraints and deduplicated.
inline std::vector<ThetaPoint> build_pool(const CandidateSet& cands, const Constraints& cons, const AcqConfig& acq,
                                          const ParetoSet& pareto, std::uint64_t stream, std::uint64_t seed,
                                          const Trace* threshold_trace = nullptr) {
  std::vector<ThetaPoint> raw;
  for (std::size_t i = 0; i < acq.pool_size; ++i)
    raw.push_back(detail::quasi_random_theta(cands, stream * acq.pool_size + i, seed, threshold_trace));
  for (const auto& r : pareto.records) {
    for (auto& t : detail::mutations(r.theta, cands, acq.mutation_step, threshold_trace)) {
      if (t.choice != r.theta.choice && !hard_feasible(t, cons, cands))
        if (auto fixed = detail::repair_choice(t, r.theta, cands, cons)) raw.push_back(std::move(*fixed));
      raw.push_back(std::move(t));
    }
  }
  std::vector<ThetaPoint> out;
  std::set<std::pair<std::vector<double>, std::vector<std::size_t>>> seen;
  for (auto& t : raw) {
    if (!detail::simplex_ok(t.fractions) || !hard_feasible(t, cons, cands)) continue;
    if (!seen.emplace(t.fractions, t.choice).second) continue;
    out.push_back(std::move(t));
  }
  return out;
}

inline ThetaPoint propose(const Surrogates& sur, const Encoder& enc, const CandidateSet& cands,
                          const Constraints& cons, const AcqConfig& acq, const ParetoSet& pareto,
                          const std::vector<EvalRecord>& observed, std::pair<double, double> ref_raw,
                          std::uint64_t stream, const Trace* threshold_trace = nullptr) {
  const auto pool = build_pool(cands, cons, acq, pareto, stream, acq.seed, threshold_trace);
  if (pool.empty()) throw InfeasibleError("no feasible configuration under constraints");
  const auto scores = acq_cqnehvi(sur, enc, observed, pool, cons, acq, ref_raw);
  return argmax_acquisition(pool, scores.score, cands);
}

// ---------------------------------------------------------------------------
// Optimization loop

struct RunOptions {
  std::size_t budget_iters = 100;
  std::uint64_t seed = 0;
  std::size_t n_init = 0;  // 0: 2 * dim + 1
  std::size_t patience = 20;
  double rel_tol = 1e-6;
  // Multi-start refits happen on the first fit and every this many
  // iterations; in between the previous optimum is the only start.
  std::size_t full_refit_every = 10;
  // false: the routing block holds raw thresholds, and proposals are drawn
  // and mutated in threshold space
  bool load_fraction_encoding = true;
  bool learn_beta = true;              // false: beta frozen at 0
  bool output_transforms = true;       // false: no log/logit before standardizing
  FitOptions fit;
  AcqConfig acq;
  // When set, the search space is this explicit list of points instead of
  // the continuous simplex times the candidate lists.
  std::optional<std::vector<ThetaPoint>> domain;
};

struct LogEntry {
  std::size_t iteration = 0;  // 0 for the initial design
  EvalRecord record;
  double hypervolume = 0.0;
  bool frontier_changed = false;
  double fit_s = 0.0;
  double acq_s = 0.0;
  double eval_s = 0.0;
};

struct RunResult {
  ParetoSet pareto;
  std::vector<LogEntry> log;
  std::vector<EvalRecord> evaluations;
  ObjectiveSpace space;
  bool converged = false;
  std::size_t evaluations_to_convergence = 0;  // total evaluations when the run stopped
  std::optional<Surrogates> surrogates;
};

inline bool satisfies_soft(const EvalRecord& r, const Constraints& cons) {
  if (r.saturated) return false;
  if (cons.l_max && r.latency > *cons.l_max) return false;
  if (cons.q_min && r.quality < *cons.q_min) return false;
  return true;
}

inline RunResult run(const Evaluator& eval, const PerfDb& db, const ClusterSpec& spec, const Constraints& cons,
                     const RunOptions& opt) {
  validate(cons);
  validate(opt.acq);
  const auto& cands = eval.candidates();
  for (std::size_t m = 0; m < cands.models.size(); ++m)
    if (cands.per_model[m].empty()) throw InfeasibleError("no feasible configuration under constraints: model " + cands.models[m] + " has no candidates");

  const auto prefs = default_preferences(db, cands.models, cands.options.ref_load);
  const Encoder enc(cands, spec, eval.trace(), cons.budget, prefs, opt.load_fraction_encoding);
  FitOptions fit_opt = opt.fit;
  fit_opt.learn_beta = opt.learn_beta;
  fit_opt.output_transforms = opt.output_transforms;
  const Trace* threshold_trace = opt.load_fraction_encoding ? nullptr : &eval.trace();

  using clock = std::chrono::steady_clock;
  auto seconds = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };

  RunResult res;
  std::vector<Observation> obs;
  std::set<std::pair<std::vector<double>, std::vector<std::size_t>>> visited;
  auto record = [&](const EvalRecord& r) {
    res.evaluations.push_back(r);
    visited.emplace(r.theta.fractions, r.theta.choice);
    obs.push_back({r.theta, r.latency, r.quality});
    return satisfies_soft(r, cons) && hard_feasible(r.theta, cons, cands) ? res.pareto.insert(r) : false;
  };

  // Initial design.
  const std::size_t n_init = opt.n_init ? opt.n_init : 2 * enc.dim() + 1;
  std::vector<ThetaPoint> init;
  if (opt.domain) {
    std::vector<ThetaPoint> feasible;
    for (const auto& t : *opt.domain)
      if (hard_feasible(t, cons, cands)) feasible.push_back(t);
    std::mt19937_64 rng(opt.seed);
    std::shuffle(feasible.begin(), feasible.end(), rng);
    feasible.resize(std::min(feasible.size(), n_init));
    init = std::move(feasible);
  } else {
    const std::uint64_t tries = 200 * n_init;
    for (std::uint64_t i = 0; i < tries && init.size() < n_init; ++i) {
      auto t = detail::quasi_random_theta(cands, i, opt.seed, threshold_trace);
      if (!hard_feasible(t, cons, cands) || visited.contains({t.fractions, t.choice})) continue;
      visited.emplace(t.fractions, t.choice);
      init.push_back(std::move(t));
    }
  }
  if (init.empty()) throw InfeasibleError("no feasible configuration under constraints");
  visited.clear();
  std::vector<LogEntry> pending;
  for (const auto& t : init) {
    const auto t0 = clock::now();
    LogEntry e;
    e.record = eval(t);
    e.eval_s = seconds(t0, clock::now());
    e.frontier_changed = record(e.record);
    pending.push_back(std::move(e));
  }
  res.space = ObjectiveSpace::from_records(res.evaluations);
  {
    ParetoSet running;
    for (auto& e : pending) {
      if (satisfies_soft(e.record, cons)) running.insert(e.record);
      e.hypervolume = res.space.hypervolume(running);
      res.log.push_back(std::move(e));
    }
  }
  const auto ref_raw = res.space.raw_ref();

  double hv = res.space.hypervolume(res.pareto);
  std::size_t stable = 0;
  std::optional<Surrogates> sur;
  for (std::size_t it = 1; it <= opt.budget_iters; ++it) {
    LogEntry e;
    e.iteration = it;
    try {
      auto t0 = clock::now();
      FitOptions f = fit_opt;
      f.seed = opt.seed * 1000003ULL + it;
      const bool full = !sur || opt.full_refit_every <= 1 || it % opt.full_refit_every == 0;
      if (!full) f.starts = 0;
      sur = fit(obs, enc, f, sur ? &*sur : nullptr);
      auto t1 = clock::now();
      e.fit_s = seconds(t0, t1);

      AcqConfig acq = opt.acq;
      acq.seed = opt.acq.seed ^ (opt.seed * 0x2545F4914F6CDD1DULL + it);
      ThetaPoint next;
      if (opt.domain) {
        std::vector<ThetaPoint> pool;
        for (const auto& t : *opt.domain)
          if (hard_feasible(t, cons, cands) && !visited.contains({t.fractions, t.choice})) pool.push_back(t);
        if (pool.empty()) {
          // Every point evaluated: nothing left to learn.
          res.converged = true;
          break;
        }
        const auto scores = acq_cqnehvi(*sur, enc, res.evaluations, pool, cons, acq, ref_raw);
        next = argmax_acquisition(pool, scores.score, cands);
      } else {
        next = propose(*sur, enc, cands, cons, acq, res.pareto, res.evaluations, ref_raw, it, threshold_trace);
      }
      auto t2 = clock::now();
      e.acq_s = seconds(t1, t2);
      e.record = eval(next);
      e.eval_s = seconds(t2, clock::now());
    } catch (const Error& err) {
      throw Error("iteration " + std::to_string(it) + ": " + err.what());
    }
    e.frontier_changed = record(e.record);
    const double new_hv = res.space.hypervolume(res.pareto);
    const double rel = std::abs(new_hv - hv) / std::max(std::abs(hv), 1e-12);
    stable = rel < opt.rel_tol ? stable + 1 : 0;
    hv = new_hv;
    e.hypervolume = hv;
    res.log.push_back(std::move(e));
    if (stable >= opt.patience) {
      res.converged = true;
      break;
    }
  }
  res.evaluations_to_convergence = res.evaluations.size();
  res.surrogates = std::move(sur);
  return res;
}

// ---------------------------------------------------------------------------
// Selection and baselines

inline EvalRecord select(const ParetoSet& pareto, std::optional<double> q_min, std::optional<double> l_max) {
  if (pareto.records.empty()) throw ValidationError("empty Pareto set");
  if (q_min.has_value() == l_max.has_value()) throw ValidationError("give exactly one of a quality floor or a latency limit");
  const EvalRecord* best = nullptr;
  for (const auto& r : pareto.records) {
    if (q_min && r.quality >= *q_min && (!best || r.latency < best->latency)) best = &r;
    if (l_max && r.latency <= *l_max && (!best || r.quality > best->quality)) best = &r;
  }
  if (best) return *best;
  // Nearest records: the best quality (for a floor) or the lowest latency (for a limit).
  const EvalRecord* near = &pareto.records.front();
  for (const auto& r : pareto.records) {
    if (q_min && r.quality > near->quality) near = &r;
    if (l_max && r.latency < near->latency) near = &r;
  }
  throw InfeasibleError("no Pareto record meets the requirement; nearest has P95 " + std::to_string(near->latency) +
                        " s and quality " + std::to_string(near->quality));
}

// Every combination of a fraction grid (step 1/steps) and candidate choices.
inline std::vector<ThetaPoint> grid_domain(const CandidateSet& cands, std::size_t steps,
                                           const std::vector<std::vector<std::size_t>>& choices) {
  const std::size_t m = cands.models.size();
  std::vector<std::vector<double>> fracs;
  std::vector<std::size_t> parts(m, 0);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t i, std::size_t left) {
    if (i + 1 == m) {
      parts[i] = left;
      std::vector<double> f;
      for (auto p : parts) f.push_back(static_cast<double>(p) / static_cast<double>(steps));
      fracs.push_back(std::move(f));
      return;
    }
    for (std::size_t k = 0; k <= left; ++k) {
      parts[i] = k;
      rec(i + 1, left - k);
    }
  };
  rec(0, steps);
  std::vector<ThetaPoint> out;
  std::vector<std::size_t> idx(m, 0);
  std::function<void(std::size_t)> pick = [&](std::size_t i) {
    if (i == m) {
      for (const auto& f : fracs) out.push_back({f, idx});
      return;
    }
    for (auto c : choices[i]) {
      idx[i] = c;
      pick(i + 1);
    }
  };
  pick(0);
  return out;
}

// Pareto set from evaluating every point of `domain`.
inline ParetoSet exhaustive_frontier(const Evaluator& eval, const Constraints& cons,
                                     const std::vector<ThetaPoint>& domain) {
  ParetoSet p;
  for (const auto& t : domain) {
    if (!hard_feasible(t, cons, eval.candidates())) continue;
    const auto r = eval(t);
    if (satisfies_soft(r, cons)) p.insert(r);
  }
  return p;
}

// Each model gets an equal share of every GPU type and of the budget, and
// the candidate with the lowest P95 at its load that fits the share.
inline std::optional<EvalRecord> uniform_allocation(const Evaluator& eval, const Constraints& cons,
                                                    const std::vector<double>& fractions) {
  const auto& cands = eval.candidates();
  const auto m = cands.models.size();
  ThetaPoint t{fractions, std::vector<std::size_t>(m, 0)};
  for (std::size_t i = 0; i < m; ++i) {
    double best_l = std::numeric_limits<double>::infinity();
    std::optional<std::size_t> pick;
    for (std::size_t c = 0; c < cands.per_model[i].size(); ++c) {
      const auto& cand = cands.per_model[i][c];
      bool fits = cand.cost_per_hour <= cons.budget / static_cast<double>(m) + 1e-9;
      for (const auto& [gpu, n] : cand.allocation) {
        auto it = cons.availability.find(gpu);
        fits = fits && it != cons.availability.end() && n <= it->second / static_cast<int>(m);
      }
      if (!fits) continue;
      ThetaPoint probe = t;
      probe.choice[i] = c;
      const double l = eval(probe).models[i].p95;
      if (l < best_l) best_l = l, pick = c;
    }
    if (!pick) return std::nullopt;
    t.choice[i] = *pick;
  }
  auto r = eval(t);
  if (r.saturated) return std::nullopt;
  return r;
}

// All traffic on one model using the whole budget and availability: the
// lowest-P95 candidate of `model` at the full load.
inline std::optional<EvalRecord> best_single_model(const Evaluator& eval, const Constraints& cons, std::size_t model) {
  const auto& cands = eval.candidates();
  const auto m = cands.models.size();
  std::optional<EvalRecord> best;
  for (std::size_t c = 0; c < cands.per_model[model].size(); ++c) {
    const auto& cand = cands.per_model[model][c];
    if (to_cents(cand.cost_per_hour) > to_cents(cons.budget)) continue;
    bool fits = true;
    for (const auto& [gpu, n] : cand.allocation) {
      auto it = cons.availability.find(gpu);
      fits = fits && it != cons.availability.end() && n <= it->second;
    }
    if (!fits) continue;
    ThetaPoint t{std::vector<double>(m, 0.0), std::vector<std::size_t>(m, 0)};
    t.fractions[model] = 1.0;
    t.choice[model] = c;
    auto r = eval(t);
    if (r.saturated) continue;
    // Only the serving model's deployment counts.
    r.cost = cand.cost_per_hour;
    if (!best || r.latency < best->latency) best = std::move(r);
  }
  return best;
}

}  // namespace hetserve
