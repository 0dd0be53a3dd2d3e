#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetserve/digest.hpp"
#include "hetserve/error.hpp"
#include "hetserve/simulator.hpp"

namespace hetserve {

// Everything the offline phase needs to know about the hardware and models.
struct ClusterSpec {
  std::vector<GpuSpec> gpus;
  std::vector<ModelSpec> models;
  CalibrationCoeffs coeffs;
  SimOptions sim;

  const GpuSpec& gpu(const std::string& name) const {
    for (const auto& g : gpus)
      if (g.name == name) return g;
    throw NotFoundError("unknown gpu: " + name);
  }
  const ModelSpec& model(const std::string& name) const {
    for (const auto& m : models)
      if (m.name == name) return m;
    throw NotFoundError("unknown model: " + name);
  }
  std::size_t gpu_index(const std::string& name) const {
    for (std::size_t i = 0; i < gpus.size(); ++i)
      if (gpus[i].name == name) return i;
    throw NotFoundError("unknown gpu: " + name);
  }
  std::vector<std::string> model_names() const {
    std::vector<std::string> out;
    for (const auto& m : models) out.push_back(m.name);
    return out;
  }
  ReplicaConfig config(const ReplicaShape& s) const {
    return {model(s.model), gpu(s.gpu), s.n_gpus, s.tp, s.pp};
  }
};

inline void to_json(nlohmann::json& j, const GpuSpec& g) {
  j = {{"name", g.name},     {"unit_cost_per_hour", g.unit_cost_per_hour},
       {"tflops", g.tflops}, {"hbm_bw", g.hbm_bw},
       {"mem_gb", g.mem_gb}, {"max_tp", g.max_tp},
       {"count", g.count},   {"interconnect_bw", g.interconnect_bw}};
}

inline void from_json(const nlohmann::json& j, GpuSpec& g) {
  j.at("name").get_to(g.name);
  j.at("unit_cost_per_hour").get_to(g.unit_cost_per_hour);
  j.at("tflops").get_to(g.tflops);
  j.at("hbm_bw").get_to(g.hbm_bw);
  j.at("mem_gb").get_to(g.mem_gb);
  j.at("max_tp").get_to(g.max_tp);
  j.at("count").get_to(g.count);
  j.at("interconnect_bw").get_to(g.interconnect_bw);
}

inline void to_json(nlohmann::json& j, const ModelSpec& m) {
  j = {{"name", m.name},
       {"weight_bytes", m.weight_bytes},
       {"flops_per_token", m.flops_per_token},
       {"kv_bytes_per_token", m.kv_bytes_per_token},
       {"n_layers", m.n_layers},
       {"activation_bytes_per_token", m.activation_bytes_per_token}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& m) {
  j.at("name").get_to(m.name);
  j.at("weight_bytes").get_to(m.weight_bytes);
  j.at("flops_per_token").get_to(m.flops_per_token);
  j.at("kv_bytes_per_token").get_to(m.kv_bytes_per_token);
  j.at("n_layers").get_to(m.n_layers);
  m.activation_bytes_per_token = j.value("activation_bytes_per_token", 0.0);
}

inline void to_json(nlohmann::json& j, const CalibrationCoeffs& k) {
  nlohmann::json tp = nlohmann::json::object();
  for (const auto& [deg, v] : k.tp_speedup) tp[std::to_string(deg)] = v;
  j = {{"tp_speedup", tp}, {"pp_comm_alpha", k.pp_comm_alpha}, {"pp_comm_beta", k.pp_comm_beta}};
}

inline void from_json(const nlohmann::json& j, CalibrationCoeffs& k) {
  if (j.contains("tp_speedup")) {
    k.tp_speedup.clear();
    for (const auto& [deg, v] : j.at("tp_speedup").items()) k.tp_speedup[std::stoi(deg)] = v.get<double>();
  }
  k.pp_comm_alpha = j.value("pp_comm_alpha", 0.0);
  k.pp_comm_beta = j.value("pp_comm_beta", 1.0);
}

inline void to_json(nlohmann::json& j, const SimOptions& s) {
  j = {{"duration_s", s.duration_s}, {"horizon_factor", s.horizon_factor}, {"queue_cap_s", s.queue_cap_s}};
}

inline void from_json(const nlohmann::json& j, SimOptions& s) {
  s.duration_s = j.value("duration_s", s.duration_s);
  s.horizon_factor = j.value("horizon_factor", s.horizon_factor);
  s.queue_cap_s = j.value("queue_cap_s", s.queue_cap_s);
}

inline nlohmann::json to_json(const ClusterSpec& spec) {
  return {{"gpus", spec.gpus}, {"models", spec.models}, {"coeffs", spec.coeffs}, {"simulation", spec.sim}};
}

inline void validate(const ClusterSpec& spec) {
  if (spec.gpus.empty()) throw ValidationError("cluster spec lists no gpus");
  if (spec.models.empty()) throw ValidationError("cluster spec lists no models");
  for (const auto& g : spec.gpus) validate(g);
  for (const auto& m : spec.models) validate(m);
  for (std::size_t i = 0; i < spec.gpus.size(); ++i)
    for (std::size_t j = i + 1; j < spec.gpus.size(); ++j)
      if (spec.gpus[i].name == spec.gpus[j].name) throw ValidationError("duplicate gpu " + spec.gpus[i].name);
  for (std::size_t i = 0; i < spec.models.size(); ++i)
    for (std::size_t j = i + 1; j < spec.models.size(); ++j)
      if (spec.models[i].name == spec.models[j].name) throw ValidationError("duplicate model " + spec.models[i].name);
  validate(spec.coeffs);
  if (!(spec.sim.duration_s > 0.0 && spec.sim.horizon_factor >= 1.0 && spec.sim.queue_cap_s > 0.0))
    throw ValidationError("simulation options out of range");
}

inline ClusterSpec cluster_from_json(const nlohmann::json& j) {
  ClusterSpec spec;
  try {
    j.at("gpus").get_to(spec.gpus);
    j.at("models").get_to(spec.models);
    if (j.contains("coeffs")) j.at("coeffs").get_to(spec.coeffs);
    if (j.contains("simulation")) j.at("simulation").get_to(spec.sim);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("cluster spec: ") + e.what());
  }
  validate(spec);
  return spec;
}

inline ClusterSpec load_cluster(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open cluster spec: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("cluster spec " + path + ": " + e.what());
  }
  return cluster_from_json(j);
}

// Digest over the canonical (key-sorted) serialization, so formatting changes
// in the source file do not invalidate downstream artifacts.
inline std::string digest(const ClusterSpec& spec) { return sha256_hex(to_json(spec).dump()); }

inline std::string digest(const Trace& trace) {
  std::ostringstream os;
  write_trace(os, trace);
  return sha256_hex(os.str());
}

}  // namespace hetserve
