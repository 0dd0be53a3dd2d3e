#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "hetserve/error.hpp"
#include "hetserve/workload.hpp"

namespace hetserve {

struct GpuSpec {
  std::string name;
  double unit_cost_per_hour = 0.0;  // b_n
  double tflops = 0.0;              // effective dense throughput, TFLOP/s
  double hbm_bw = 0.0;              // achievable memory bandwidth, GB/s
  double mem_gb = 0.0;
  int max_tp = 1;
  int count = 0;                    // d_n
  double interconnect_bw = 0.0;     // GB/s
};

struct ModelSpec {
  std::string name;
  double weight_bytes = 0.0;
  double flops_per_token = 0.0;             // prefill FLOPs per input token
  double kv_bytes_per_token = 0.0;
  int n_layers = 1;
  double activation_bytes_per_token = 0.0;  // shipped across each pipeline boundary
};

// Identity of a single-replica deployment, independent of the spec objects.
struct ReplicaShape {
  std::string model;
  std::string gpu;
  int n_gpus = 1;
  int tp = 1;
  int pp = 1;

  auto operator<=>(const ReplicaShape&) const = default;
};

struct ReplicaConfig {
  ModelSpec model;
  GpuSpec gpu;
  int n_gpus = 1;
  int tp = 1;
  int pp = 1;

  ReplicaShape shape() const { return {model.name, gpu.name, n_gpus, tp, pp}; }
};

struct CalibrationCoeffs {
  std::map<int, double> tp_speedup{{1, 1.0}, {2, 0.9}, {4, 0.8}, {8, 0.7}};
  double pp_comm_alpha = 0.0;  // seconds per stage boundary
  double pp_comm_beta = 1.0;   // GB/s across a stage boundary

  double speedup(int tp) const {
    auto it = tp_speedup.find(tp);
    if (it == tp_speedup.end())
      throw ValidationError("no tensor-parallel speed-up coefficient for tp=" + std::to_string(tp));
    return it->second;
  }
};

inline void validate(const CalibrationCoeffs& k) {
  auto one = k.tp_speedup.find(1);
  if (one == k.tp_speedup.end() || one->second != 1.0)
    throw ValidationError("tp speed-up coefficient K(1) must be 1");
  double prev = 1.0;
  for (const auto& [tp, v] : k.tp_speedup) {
    if (tp < 1 || !(v > 0.0 && v <= 1.0)) throw ValidationError("tp speed-up coefficients must lie in (0,1]");
    if (v > prev) throw ValidationError("tp speed-up coefficients must be nonincreasing in tp");
    prev = v;
  }
  if (k.pp_comm_alpha < 0.0 || !(k.pp_comm_beta > 0.0))
    throw ValidationError("pipeline communication coefficients out of range");
}

inline void validate(const GpuSpec& g) {
  if (g.name.empty()) throw ValidationError("gpu without a name");
  if (!(g.unit_cost_per_hour > 0.0 && g.tflops > 0.0 && g.hbm_bw > 0.0 && g.mem_gb > 0.0 &&
        g.interconnect_bw > 0.0))
    throw ValidationError("gpu " + g.name + ": parameters must be positive");
  if (g.max_tp != 1 && g.max_tp != 2 && g.max_tp != 4 && g.max_tp != 8)
    throw ValidationError("gpu " + g.name + ": max_tp must be 1, 2, 4 or 8");
  if (g.count < 0) throw ValidationError("gpu " + g.name + ": count must be >= 0");
}

inline void validate(const ModelSpec& m) {
  if (m.name.empty()) throw ValidationError("model without a name");
  if (!(m.weight_bytes > 0.0 && m.flops_per_token > 0.0 && m.kv_bytes_per_token > 0.0) || m.n_layers < 1)
    throw ValidationError("model " + m.name + ": parameters must be positive");
  if (m.activation_bytes_per_token < 0.0)
    throw ValidationError("model " + m.name + ": activation bytes must be >= 0");
}

inline constexpr double kGiga = 1e9;
inline constexpr double kTera = 1e12;

// ---------------------------------------------------------------------------
// Feasibility

enum class Infeasibility { none, shape, tp_limit, memory };

inline const char* to_string(Infeasibility r) {
  switch (r) {
    case Infeasibility::none: return "feasible";
    case Infeasibility::shape: return "shape";
    case Infeasibility::tp_limit: return "tp-limit";
    case Infeasibility::memory: return "memory";
  }
  return "unknown";
}

struct Feasibility {
  Infeasibility reason = Infeasibility::none;
  std::string detail;

  explicit operator bool() const { return reason == Infeasibility::none; }
};

// Fraction of the model held by the heaviest pipeline stage (stages are
// ceil-balanced by layer).
inline double heaviest_stage_fraction(const ModelSpec& m, int pp) {
  const int layers_per_stage = (m.n_layers + pp - 1) / pp;
  return static_cast<double>(layers_per_stage) / static_cast<double>(m.n_layers);
}

// `seq_tokens` is the KV footprint (input + output) of the largest request the
// replica must be able to hold on its own.
inline Feasibility validate_config(const ReplicaConfig& c, int seq_tokens = 1) {
  if (c.tp < 1 || c.pp < 1 || c.tp * c.pp != c.n_gpus)
    return {Infeasibility::shape, "tp*pp must equal n_gpus"};
  if (c.pp > c.model.n_layers) return {Infeasibility::shape, "pp exceeds the layer count"};
  if (c.tp > c.gpu.max_tp)
    return {Infeasibility::tp_limit, "tp " + std::to_string(c.tp) + " exceeds max_tp " + std::to_string(c.gpu.max_tp)};
  const double frac = heaviest_stage_fraction(c.model, c.pp) / c.tp;
  const double per_gpu = c.model.weight_bytes * frac +
                         c.model.kv_bytes_per_token * static_cast<double>(std::max(seq_tokens, 1)) * frac;
  if (per_gpu > c.gpu.mem_gb * kGiga)
    return {Infeasibility::memory, "needs " + std::to_string(per_gpu / kGiga) + " GB per GPU, has " +
                                       std::to_string(c.gpu.mem_gb)};
  return {};
}

inline double kv_pool_bytes(const ReplicaConfig& c) {
  return c.gpu.mem_gb * kGiga * c.tp * c.pp - c.model.weight_bytes;
}

inline long max_batch(const ReplicaConfig& c, double avg_seq_tokens) {
  const auto ok = validate_config(c, static_cast<int>(std::ceil(avg_seq_tokens)));
  if (!ok) throw ValidationError(std::string("infeasible replica config: ") + to_string(ok.reason));
  const double per_seq = c.model.kv_bytes_per_token * avg_seq_tokens;
  return std::max(1L, static_cast<long>(std::floor(kv_pool_bytes(c) / per_seq)));
}

// ---------------------------------------------------------------------------
// Phase latency model

// Compute time of the heaviest pipeline stage for an n-token prefill.
inline double prefill_stage_time(const ReplicaConfig& c, const CalibrationCoeffs& k, long n_tokens) {
  const double work = c.model.flops_per_token * static_cast<double>(n_tokens) *
                      heaviest_stage_fraction(c.model, c.pp);
  return work / (c.gpu.tflops * kTera * c.tp * k.speedup(c.tp));
}

inline double pp_boundary_cost(const ReplicaConfig& c, const CalibrationCoeffs& k, long n_tokens) {
  return k.pp_comm_alpha + c.model.activation_bytes_per_token * static_cast<double>(n_tokens) / (k.pp_comm_beta * kGiga);
}

// Latency of one request's prefill through all stages.
inline double prefill_time(const ReplicaConfig& c, const CalibrationCoeffs& k, long n_tokens) {
  return c.pp * prefill_stage_time(c, k, n_tokens) + (c.pp - 1) * pp_boundary_cost(c, k, n_tokens);
}

// Prefill is compute-bound: a batch costs the sum of its members' stage times,
// plus one pipeline fill for the largest member.
inline double batch_prefill_time(const ReplicaConfig& c, const CalibrationCoeffs& k, std::span<const long> tokens) {
  double sum = 0.0;
  double fill = 0.0;
  for (long n : tokens) {
    const double stage = prefill_stage_time(c, k, n);
    sum += stage;
    fill = std::max(fill, stage + pp_boundary_cost(c, k, n));
  }
  return sum + (c.pp - 1) * fill;
}

// Memory-bound decode: one stage streams its weight shard plus its share of
// resident KV once per step, independent of batch size.
inline double decode_stage_time(const ReplicaConfig& c, const CalibrationCoeffs& k, double resident_tokens) {
  const double frac = heaviest_stage_fraction(c.model, c.pp) / c.tp;
  const double bytes = c.model.weight_bytes * frac + c.model.kv_bytes_per_token * resident_tokens * frac;
  return bytes / (c.gpu.hbm_bw * kGiga * k.speedup(c.tp));
}

// Per-token completion latency of a decode step.
inline double decode_step_time(const ReplicaConfig& c, const CalibrationCoeffs& k, double resident_tokens) {
  return c.pp * decode_stage_time(c, k, resident_tokens) + (c.pp - 1) * k.pp_comm_alpha;
}

// ---------------------------------------------------------------------------
// Discrete-event simulation

inline constexpr std::array<double, 6> kQuantileLevels{0.50, 0.75, 0.90, 0.95, 0.99, 1.00};
inline constexpr std::size_t kP95 = 3;

using QuantileVector = std::array<double, 6>;

inline QuantileVector infinite_quantiles() {
  QuantileVector q;
  q.fill(std::numeric_limits<double>::infinity());
  return q;
}

// Nearest-rank quantiles; sorts its argument.
inline QuantileVector latency_quantiles(std::vector<double>& latencies) {
  if (latencies.empty()) return infinite_quantiles();
  std::sort(latencies.begin(), latencies.end());
  QuantileVector q{};
  const double n = static_cast<double>(latencies.size());
  for (std::size_t i = 0; i < kQuantileLevels.size(); ++i) {
    auto rank = static_cast<std::size_t>(std::ceil(kQuantileLevels[i] * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, latencies.size());
    q[i] = latencies[rank - 1];
  }
  return q;
}

struct SimOptions {
  double duration_s = 60.0;    // arrival window
  double horizon_factor = 5.0; // simulation stops at horizon_factor * duration_s
  double queue_cap_s = 30.0;   // queued longer than this -> dropped
};

struct SimRequest {
  double arrival_s = 0.0;
  long input_tokens = 1;
  long output_tokens = 1;
  std::size_t source = 0;  // index into the trace the request was drawn from
};

struct SimResult {
  QuantileVector quantiles = infinite_quantiles();
  double throughput = 0.0;
  std::uint64_t arrivals = 0;
  std::uint64_t completed = 0;
  std::uint64_t dropped = 0;
  std::uint64_t in_flight = 0;
  bool saturated = false;

  double p95() const { return quantiles[kP95]; }
  bool operator==(const SimResult&) const = default;
};

struct SimOutcome {
  SimResult result;
  std::vector<double> latencies;  // completed requests, unsorted
  double busy_s = 0.0;
};

// Arrival stream for `offered_qps`: floor(qps * duration) requests whose gaps
// follow the trace's inter-arrival pattern, rescaled to span the window, with
// token lengths resampled from the trace by `seed`.
inline std::vector<SimRequest> build_requests(const Trace& trace, double offered_qps, std::uint64_t seed,
                                              const SimOptions& opt = {}) {
  if (!(offered_qps > 0.0)) throw ValidationError("offered_qps must be > 0");
  const auto n = static_cast<std::size_t>(std::max(1.0, std::floor(offered_qps * opt.duration_s + 1e-9)));
  const auto& qs = trace.queries();

  std::vector<double> gaps;
  gaps.reserve(qs.size());
  for (std::size_t i = 1; i < qs.size(); ++i) gaps.push_back(qs[i].arrival_s - qs[i - 1].arrival_s);
  double gap_sum = 0.0;
  for (double g : gaps) gap_sum += g;
  if (gaps.empty() || !(gap_sum > 0.0)) gaps.assign(1, 1.0);

  std::vector<double> raw(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += gaps[i % gaps.size()];
    raw[i] = total;
  }
  if (!(total > 0.0)) {
    for (std::size_t i = 0; i < n; ++i) raw[i] = static_cast<double>(i + 1);
    total = static_cast<double>(n);
  }
  const double scale = opt.duration_s / total;

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, qs.size() - 1);
  std::vector<SimRequest> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = pick(rng);
    out[i] = {raw[i] * scale, qs[src].input_tokens, qs[src].output_tokens, src};
  }
  return out;
}

// Steady-state completions per second of a replica kept full: B requests of
// mean length per cycle, where a cycle is their B prefills plus the mean
// output length in decode steps at the batch's mean residency.
inline double service_capacity(const ReplicaConfig& c, const CalibrationCoeffs& k, std::span<const SimRequest> requests) {
  if (requests.empty()) return 0.0;
  double in = 0.0, out = 0.0;
  for (const auto& r : requests) in += static_cast<double>(r.input_tokens), out += static_cast<double>(r.output_tokens);
  in /= static_cast<double>(requests.size());
  out /= static_cast<double>(requests.size());
  const double per_seq = c.model.kv_bytes_per_token * (in + out);
  const double b = std::max(1.0, std::floor(kv_pool_bytes(c) / per_seq));
  const auto n = static_cast<long>(std::lround(in));
  const double prefill = b * prefill_stage_time(c, k, n) + (c.pp - 1) * (prefill_stage_time(c, k, n) + pp_boundary_cost(c, k, n));
  const double decode = out * decode_step_time(c, k, b * (in + 0.5 * out));
  return b / (prefill + decode);
}

// One replica, one FCFS queue, continuous batching. Each tick runs a prefill
// admission pass (admit while the KV pool has room) and then one decode step.
// `requests` must be sorted by arrival.
inline SimOutcome simulate_requests(const ReplicaConfig& c, const CalibrationCoeffs& k,
                                    std::span<const SimRequest> requests, const SimOptions& opt = {}) {
  struct Running {
    double arrival;
    long remaining;
    double resident;
    double reserved;
  };

  const double horizon = opt.horizon_factor * opt.duration_s;
  const double pool = kv_pool_bytes(c);
  const double kv = c.model.kv_bytes_per_token;

  SimOutcome out;
  out.result.arrivals = requests.size();
  std::deque<std::size_t> queue;
  std::vector<Running> running;
  std::vector<long> batch_tokens;
  double free_bytes = pool;
  double resident_tokens = 0.0;
  double t = 0.0;
  double last_completion = 0.0;
  std::size_t next = 0;

  while (true) {
    while (next < requests.size() && requests[next].arrival_s <= t) queue.push_back(next++);
    while (!queue.empty() && t - requests[queue.front()].arrival_s > opt.queue_cap_s) {
      queue.pop_front();
      ++out.result.dropped;
    }

    batch_tokens.clear();
    while (!queue.empty()) {
      const SimRequest& r = requests[queue.front()];
      const double need = kv * static_cast<double>(r.input_tokens + r.output_tokens);
      if (need > free_bytes) {
        // A request that cannot fit even in an idle replica would block forever.
        if (running.empty() && batch_tokens.empty()) {
          queue.pop_front();
          ++out.result.dropped;
          continue;
        }
        break;
      }
      free_bytes -= need;
      batch_tokens.push_back(r.input_tokens);
      running.push_back({r.arrival_s, r.output_tokens, static_cast<double>(r.input_tokens), need});
      resident_tokens += static_cast<double>(r.input_tokens);
      queue.pop_front();
    }
    if (!batch_tokens.empty()) {
      const double dt = batch_prefill_time(c, k, batch_tokens);
      t += dt;
      out.busy_s += dt;
    }

    if (!running.empty()) {
      const double dt = decode_step_time(c, k, resident_tokens);
      t += dt;
      out.busy_s += dt;
      std::size_t keep = 0;
      for (std::size_t i = 0; i < running.size(); ++i) {
        Running& r = running[i];
        --r.remaining;
        r.resident += 1.0;
        resident_tokens += 1.0;
        if (r.remaining <= 0) {
          out.latencies.push_back(t - r.arrival);
          free_bytes += r.reserved;
          resident_tokens -= r.resident;
          last_completion = t;
        } else {
          running[keep++] = r;
        }
      }
      running.resize(keep);
      if (running.empty()) {
        free_bytes = pool;
        resident_tokens = 0.0;
      }
    } else if (batch_tokens.empty() && queue.empty()) {
      if (next >= requests.size()) break;
      t = requests[next].arrival_s;
    }
    if (t > horizon) break;
  }

  out.result.completed = out.latencies.size();
  out.result.in_flight = out.result.arrivals - out.result.completed - out.result.dropped;
  out.result.saturated = out.result.dropped > 0 || out.result.in_flight > 0;
  const double elapsed = std::max(opt.duration_s, last_completion);
  out.result.throughput = static_cast<double>(out.result.completed) / elapsed;
  // Nothing finished inside the horizon: fall back to the analytic estimate.
  if (out.result.saturated && out.result.completed == 0)
    out.result.throughput = std::min(service_capacity(c, k, requests), static_cast<double>(requests.size()) / opt.duration_s);
  std::vector<double> sorted = out.latencies;
  out.result.quantiles = latency_quantiles(sorted);
  return out;
}

inline SimResult simulate(const ReplicaConfig& c, const CalibrationCoeffs& k, const Trace& trace,
                          double offered_qps, std::uint64_t seed, const SimOptions& opt = {}) {
  const auto ok = validate_config(c);
  if (!ok) throw ValidationError(std::string("infeasible replica config (") + to_string(ok.reason) + "): " + ok.detail);
  const auto requests = build_requests(trace, offered_qps, seed, opt);
  return simulate_requests(c, k, requests, opt).result;
}

// Largest single-request KV footprint in a trace; used for memory pruning.
inline int max_sequence_tokens(const Trace& trace) {
  int best = 1;
  for (const auto& q : trace.queries()) best = std::max(best, q.input_tokens + q.output_tokens);
  return best;
}

}  // namespace hetserve
