#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetserve/error.hpp"

namespace hetserve {

struct Query {
  std::string id;
  double arrival_s = 0.0;
  int input_tokens = 1;
  int output_tokens = 1;
  double routing_score = 0.0;
  // Indexed like Trace::models, normalized to [0,1].
  std::vector<double> quality;
};

// Queries ordered by arrival. The sorted score array is cached because every
// threshold/fraction conversion needs it.
class Trace {
 public:
  Trace() = default;

  Trace(std::vector<std::string> models, std::vector<Query> queries)
      : models_(std::move(models)), queries_(std::move(queries)) {
    if (queries_.empty()) throw ValidationError("empty trace");
    if (models_.empty()) throw ValidationError("trace needs at least one model");
    for (const auto& q : queries_) validate(q);
    std::stable_sort(queries_.begin(), queries_.end(),
                     [](const Query& a, const Query& b) { return a.arrival_s < b.arrival_s; });
    sorted_scores_.reserve(queries_.size());
    for (const auto& q : queries_) sorted_scores_.push_back(q.routing_score);
    std::sort(sorted_scores_.begin(), sorted_scores_.end());
  }

  const std::vector<std::string>& models() const { return models_; }
  const std::vector<Query>& queries() const { return queries_; }
  std::span<const double> sorted_scores() const { return sorted_scores_; }
  std::size_t size() const { return queries_.size(); }
  std::size_t model_count() const { return models_.size(); }
  double duration_s() const { return queries_.back().arrival_s - queries_.front().arrival_s; }

  std::size_t model_index(const std::string& name) const {
    auto it = std::find(models_.begin(), models_.end(), name);
    if (it == models_.end()) throw NotFoundError("model not in trace: " + name);
    return static_cast<std::size_t>(it - models_.begin());
  }

 private:
  void validate(const Query& q) const {
    if (!(q.arrival_s >= 0.0) || !std::isfinite(q.arrival_s))
      throw ValidationError("query " + q.id + ": arrival_s must be >= 0");
    if (q.input_tokens < 1 || q.output_tokens < 1)
      throw ValidationError("query " + q.id + ": token counts must be >= 1");
    if (!(q.routing_score >= 0.0 && q.routing_score <= 1.0))
      throw ValidationError("query " + q.id + ": routing_score outside [0,1]");
    if (q.quality.size() != models_.size())
      throw ValidationError("query " + q.id + ": quality vector does not match model list");
    for (std::size_t m = 0; m < models_.size(); ++m) {
      if (!(q.quality[m] >= 0.0 && q.quality[m] <= 1.0))
        throw ValidationError("query " + q.id + ": quality for " + models_[m] + " outside [0,1]");
    }
  }

  std::vector<std::string> models_;
  std::vector<Query> queries_;
  std::vector<double> sorted_scores_;
};

// Cut points tau_1..tau_{M-1}; tau_0 = 0 and tau_M = 1 are implicit.
struct RoutingConfig {
  std::vector<double> thresholds;

  std::size_t model_count() const { return thresholds.size() + 1; }
};

struct LoadFractions {
  std::vector<double> values;

  std::size_t model_count() const { return values.size(); }
};

struct LoadDistribution {
  std::vector<double> qps;
};

inline constexpr double kSimplexTolerance = 1e-9;

inline void validate(const RoutingConfig& tau) {
  double prev = 0.0;
  for (double t : tau.thresholds) {
    if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("threshold outside [0,1]");
    if (t < prev) throw ValidationError("thresholds must be nondecreasing");
    prev = t;
  }
}

inline void validate(const LoadFractions& f) {
  if (f.values.empty()) throw ValidationError("load fractions are empty");
  double sum = 0.0;
  for (double v : f.values) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("load fraction must be >= 0");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kSimplexTolerance)
    throw ValidationError("load fractions must sum to 1");
}

// Bins are half-open [tau_{i-1}, tau_i). A threshold at 1 closes its bin at 1,
// so a score of exactly 1 can still land below the top model.
inline std::size_t route(double score, const RoutingConfig& tau) {
  for (std::size_t i = 0; i < tau.thresholds.size(); ++i) {
    const double t = tau.thresholds[i];
    if (score < t || t >= 1.0) return i;
  }
  return tau.thresholds.size();
}

inline std::size_t route(const Query& q, const RoutingConfig& tau) {
  return route(q.routing_score, tau);
}

namespace detail {

// Number of trace scores that fall strictly below threshold t (all of them if t closes at 1).
inline std::size_t count_below(std::span<const double> sorted, double t) {
  if (t >= 1.0) return sorted.size();
  return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), t) - sorted.begin());
}

}  // namespace detail

// Type-1 empirical quantile inversion. The threshold for cut i is the smallest
// score that must go above the cut, which makes the mapping exact on the
// trace's attainable grid (multiples of 1/|trace|) up to score ties.
inline RoutingConfig fractions_to_thresholds(const LoadFractions& f, const Trace& trace) {
  validate(f);
  const auto scores = trace.sorted_scores();
  const std::size_t n = scores.size();
  RoutingConfig tau;
  tau.thresholds.reserve(f.values.size() - 1);
  double cumulative = 0.0;
  std::size_t prev_k = 0;
  for (std::size_t i = 0; i + 1 < f.values.size(); ++i) {
    cumulative += f.values[i];
    auto k = static_cast<std::size_t>(std::llround(std::clamp(cumulative, 0.0, 1.0) * static_cast<double>(n)));
    k = std::clamp(k, prev_k, n);
    prev_k = k;
    if (k == 0)
      tau.thresholds.push_back(0.0);
    else if (k == n)
      tau.thresholds.push_back(1.0);
    else
      tau.thresholds.push_back(scores[k]);
  }
  return tau;
}

inline LoadFractions thresholds_to_fractions(const RoutingConfig& tau, const Trace& trace) {
  validate(tau);
  const auto scores = trace.sorted_scores();
  const double n = static_cast<double>(scores.size());
  LoadFractions f;
  f.values.reserve(tau.model_count());
  std::size_t prev = 0;
  for (double t : tau.thresholds) {
    const std::size_t below = std::max(prev, detail::count_below(scores, t));
    f.values.push_back(static_cast<double>(below - prev) / n);
    prev = below;
  }
  f.values.push_back(static_cast<double>(scores.size() - prev) / n);
  return f;
}

// Mean over the trace of the routed model's quality label.
inline double estimate_quality(const Trace& trace, const RoutingConfig& tau) {
  if (tau.model_count() != trace.model_count())
    throw ValidationError("routing config and trace disagree on the number of models");
  double sum = 0.0;
  for (const auto& q : trace.queries()) sum += q.quality[route(q, tau)];
  return sum / static_cast<double>(trace.size());
}

inline LoadDistribution load_distribution(const LoadFractions& f, double total_qps) {
  if (!(total_qps > 0.0)) throw ValidationError("total_qps must be > 0");
  LoadDistribution w;
  w.qps.reserve(f.values.size());
  for (double v : f.values) w.qps.push_back(v * total_qps);
  return w;
}

// ---------------------------------------------------------------------------
// Trace file: one JSON object per line. `quality_scale` divides raw labels so
// that e.g. accuracy on 0-100 lands in [0,1].

inline Trace parse_trace(std::istream& in, const std::vector<std::string>& models,
                         double quality_scale = 1.0) {
  if (!(quality_scale > 0.0)) throw ValidationError("quality scale must be > 0");
  std::vector<Query> queries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("trace line " + std::to_string(line_no) + ": " + e.what());
    }
    Query q;
    try {
      const auto& id = rec.at("id");
      q.id = id.is_string() ? id.get<std::string>() : id.dump();
      q.arrival_s = rec.at("arrival_s").get<double>();
      q.input_tokens = rec.at("input_tokens").get<int>();
      q.output_tokens = rec.at("output_tokens").get<int>();
      q.routing_score = rec.at("routing_score").get<double>();
      const auto& qual = rec.at("quality");
      q.quality.reserve(models.size());
      for (const auto& name : models) {
        if (!qual.contains(name))
          throw ValidationError("trace line " + std::to_string(line_no) + ": missing quality for model " + name);
        q.quality.push_back(qual.at(name).get<double>() / quality_scale);
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("trace line " + std::to_string(line_no) + ": " + e.what());
    }
    queries.push_back(std::move(q));
  }
  if (queries.empty()) throw ValidationError("empty trace");
  return Trace(models, std::move(queries));
}

inline Trace load_trace(const std::string& path, const std::vector<std::string>& models,
                        double quality_scale = 1.0) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open trace file: " + path);
  return parse_trace(in, models, quality_scale);
}

inline void write_trace(std::ostream& out, const Trace& trace, double quality_scale = 1.0) {
  for (const auto& q : trace.queries()) {
    nlohmann::json rec;
    rec["id"] = q.id;
    rec["arrival_s"] = q.arrival_s;
    rec["input_tokens"] = q.input_tokens;
    rec["output_tokens"] = q.output_tokens;
    rec["routing_score"] = q.routing_score;
    nlohmann::json qual = nlohmann::json::object();
    for (std::size_t m = 0; m < trace.model_count(); ++m) qual[trace.models()[m]] = q.quality[m] * quality_scale;
    rec["quality"] = std::move(qual);
    out << rec.dump() << '\n';
  }
}

}  // namespace hetserve
