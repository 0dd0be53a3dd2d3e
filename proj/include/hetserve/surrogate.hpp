#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/Core>
#include <ceres/gradient_problem.h>
#include <ceres/gradient_problem_solver.h>
#include <json.hpp>

#include "hetserve/candidates.hpp"
#include "hetserve/error.hpp"
#include "hetserve/workload.hpp"

namespace hetserve {

// Decision point: routing as load fractions plus one candidate index per model.
struct ThetaPoint {
  std::vector<double> fractions;
  std::vector<std::size_t> choice;

  bool operator==(const ThetaPoint&) const = default;
};

using PreferenceMatrix = Eigen::MatrixXd;  // models x gpu types, entries in [0,1]

// Kernel inputs for one point. `preference` is sum_{m,n} a_{m,n} s_{m,n}.
struct EncodedPoint {
  Eigen::VectorXd route;
  Eigen::VectorXd deploy;
  double preference = 0.0;
};

// ---------------------------------------------------------------------------
// Encoding

// Maps decision points to features. The routing block is the M-1 free load
// fractions, or the raw thresholds when load-fraction encoding is off. The
// deployment block holds, per model, the GPU counts over availability, cost
// over budget and log P95 at the reference load.
class Encoder {
 public:
  Encoder(const CandidateSet& cands, const ClusterSpec& spec, const Trace& trace, double b_cap,
          PreferenceMatrix prefs, bool load_fraction_encoding = true)
      : cands_(&cands), spec_(&spec), trace_(&trace), b_cap_(b_cap), prefs_(std::move(prefs)),
        load_fractions_(load_fraction_encoding) {
    if (!(b_cap > 0.0)) throw ValidationError("budget must be > 0");
    if (prefs_.rows() != static_cast<Eigen::Index>(cands.models.size()) ||
        prefs_.cols() != static_cast<Eigen::Index>(spec.gpus.size()))
      throw ValidationError("preference matrix shape does not match models x gpus");
    if ((prefs_.array() < 0.0).any() || (prefs_.array() > 1.0).any())
      throw ValidationError("preference matrix entries must lie in [0,1]");
  }

  std::size_t models() const { return cands_->models.size(); }
  std::size_t gpus() const { return spec_->gpus.size(); }
  std::size_t route_dim() const { return models() - 1; }
  std::size_t deploy_dim() const { return models() * (gpus() + 2); }
  std::size_t dim() const { return route_dim() + deploy_dim(); }
  const PreferenceMatrix& preferences() const { return prefs_; }
  bool load_fraction_encoding() const { return load_fractions_; }

  const DeploymentCandidate& candidate(const ThetaPoint& t, std::size_t m) const {
    if (t.choice.size() != models()) throw ValidationError("theta has the wrong number of candidate choices");
    const auto& list = cands_->per_model[m];
    if (t.choice[m] >= list.size()) throw NotFoundError("unknown candidate index for model " + cands_->models[m]);
    return list[t.choice[m]];
  }

  // a_{m,n} as counts.
  Eigen::MatrixXd allocation(const ThetaPoint& t) const {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(models()), static_cast<Eigen::Index>(gpus()));
    for (std::size_t m = 0; m < models(); ++m) {
      const auto& c = candidate(t, m);
      for (std::size_t n = 0; n < gpus(); ++n)
        a(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)) = c.gpus_of(spec_->gpus[n].name);
    }
    return a;
  }

  EncodedPoint encode(const ThetaPoint& t) const {
    if (t.fractions.size() != models()) throw ValidationError("theta has the wrong number of load fractions");
    EncodedPoint p;
    p.route.resize(static_cast<Eigen::Index>(route_dim()));
    if (load_fractions_) {
      for (std::size_t i = 0; i < route_dim(); ++i) p.route[static_cast<Eigen::Index>(i)] = t.fractions[i];
    } else {
      const auto tau = fractions_to_thresholds(LoadFractions{t.fractions}, *trace_);
      for (std::size_t i = 0; i < route_dim(); ++i) p.route[static_cast<Eigen::Index>(i)] = tau.thresholds[i];
    }
    p.deploy.resize(static_cast<Eigen::Index>(deploy_dim()));
    Eigen::Index k = 0;
    for (std::size_t m = 0; m < models(); ++m) {
      const auto& c = candidate(t, m);
      for (const auto& g : spec_->gpus) p.deploy[k++] = g.count > 0 ? static_cast<double>(c.gpus_of(g.name)) / g.count : 0.0;
      p.deploy[k++] = c.cost_per_hour / b_cap_;
      p.deploy[k++] = std::isfinite(c.p95_ref) && c.p95_ref > 0.0 ? std::log(c.p95_ref) : 0.0;
    }
    p.preference = (allocation(t).array() * prefs_.array()).sum();
    return p;
  }

 private:
  const CandidateSet* cands_;
  const ClusterSpec* spec_;
  const Trace* trace_;
  double b_cap_;
  PreferenceMatrix prefs_;
  bool load_fractions_;
};

// s_{m,n}: per model, the best single-replica latency-per-dollar on each GPU
// type, 1 / (P95 * unit cost), min-max normalized across GPU types. Measured
// at the reference load, falling back to the lightest grid load when every
// single replica saturates there.
inline PreferenceMatrix default_preferences(const PerfDb& db, const std::vector<std::string>& models,
                                            double ref_load) {
  const auto& gpus = db.spec.gpus;
  PreferenceMatrix s = PreferenceMatrix::Zero(static_cast<Eigen::Index>(models.size()),
                                              static_cast<Eigen::Index>(gpus.size()));
  for (std::size_t m = 0; m < models.size(); ++m) {
    std::vector<double> score(gpus.size(), 0.0);
    auto best_at = [&](std::size_t n, double load) {
      double best = 0.0;
      for (const auto& shape : db.shapes(models[m], gpus[n].name)) {
        const auto r = lookup(db, shape, load);
        if (!r.saturated && r.p95() > 0.0) best = std::max(best, 1.0 / (r.p95() * gpus[n].unit_cost_per_hour));
      }
      return best;
    };
    bool any = false;
    for (std::size_t n = 0; n < gpus.size(); ++n) any |= (score[n] = best_at(n, ref_load)) > 0.0;
    if (!any)
      for (std::size_t n = 0; n < gpus.size(); ++n) score[n] = best_at(n, db.grid.min());
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (double v : score)
      if (v > 0.0) lo = std::min(lo, v), hi = std::max(hi, v);
    for (std::size_t n = 0; n < gpus.size(); ++n) {
      double v = 0.0;
      if (score[n] > 0.0) v = hi > lo ? (score[n] - lo) / (hi - lo) : 1.0;
      s(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)) = v;
    }
  }
  return s;
}

inline double preference_weight(const Eigen::MatrixXd& allocation, const PreferenceMatrix& s, double beta) {
  return std::exp(beta * (allocation.array() * s.array()).sum());
}

// ---------------------------------------------------------------------------
// Kernel

inline double matern52(double r) {
  const double a = std::sqrt(5.0) * r;
  return (1.0 + a + a * a / 3.0) * std::exp(-a);
}

inline double matern32(double r) {
  const double a = std::sqrt(3.0) * r;
  return (1.0 + a) * std::exp(-a);
}

struct KernelParams {
  Eigen::VectorXd route_lengthscales;
  Eigen::VectorXd deploy_lengthscales;
  double route_scale = 1.0;   // s_tau
  double deploy_scale = 1.0;  // s_c
  double cross_scale = 1.0;   // s_x
  double phi = 0.1;           // interaction weight
  double beta = 0.01;         // preference strength
  double noise = 1e-4;        // observation noise variance

  static KernelParams defaults(std::size_t route_dim, std::size_t deploy_dim) {
    KernelParams p;
    p.route_lengthscales = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(route_dim), 0.5);
    p.deploy_lengthscales = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(deploy_dim), 0.5);
    return p;
  }
};

namespace detail {

inline double scaled_distance(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& ls) {
  if (a.size() == 0) return 0.0;
  return ((a - b).array() / ls.array()).matrix().norm();
}

}  // namespace detail

// k = s_tau*M52(route) + w*w'*s_c*M32(deploy) + phi*s_x*M52(route)*M32(deploy)
inline double kernel(const EncodedPoint& x, const EncodedPoint& y, const KernelParams& p) {
  const double a = matern52(detail::scaled_distance(x.route, y.route, p.route_lengthscales));
  const double b = matern32(detail::scaled_distance(x.deploy, y.deploy, p.deploy_lengthscales));
  const double w = std::exp(p.beta * (x.preference + y.preference));
  return p.route_scale * a + w * p.deploy_scale * b + p.phi * p.cross_scale * a * b;
}

// The routing main-effect term alone; used to check the additive split.
inline double route_kernel(const EncodedPoint& x, const EncodedPoint& y, const KernelParams& p) {
  return p.route_scale * matern52(detail::scaled_distance(x.route, y.route, p.route_lengthscales));
}

inline Eigen::MatrixXd gram(const std::vector<EncodedPoint>& xs, const KernelParams& p) {
  const auto n = static_cast<Eigen::Index>(xs.size());
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j <= i; ++j)
      k(i, j) = k(j, i) = kernel(xs[static_cast<std::size_t>(i)], xs[static_cast<std::size_t>(j)], p);
  return k;
}

inline Eigen::MatrixXd cross_gram(const std::vector<EncodedPoint>& xs, const std::vector<EncodedPoint>& ys,
                                  const KernelParams& p) {
  Eigen::MatrixXd k(static_cast<Eigen::Index>(xs.size()), static_cast<Eigen::Index>(ys.size()));
  for (std::size_t i = 0; i < xs.size(); ++i)
    for (std::size_t j = 0; j < ys.size(); ++j)
      k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = kernel(xs[i], ys[j], p);
  return k;
}

inline constexpr double kMaxRelativeJitter = 1e-6;

// Cholesky with escalating jitter, capped at kMaxRelativeJitter times the
// mean diagonal. Returns the jitter used, or nullopt on failure.
inline std::optional<double> robust_cholesky(const Eigen::MatrixXd& k, Eigen::LLT<Eigen::MatrixXd>& llt) {
  llt.compute(k);
  if (llt.info() == Eigen::Success) return 0.0;
  const double mean_diag = k.diagonal().mean();
  for (double rel = 1e-10; rel <= kMaxRelativeJitter * (1 + 1e-9); rel *= 10.0) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += rel * mean_diag;
    llt.compute(kj);
    if (llt.info() == Eigen::Success) return rel * mean_diag;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Output transforms

// log, then standardize with the sample (n-1) standard deviation.
// With `use_log` off only the standardization remains.
class LatencyTransform {
 public:
  explicit LatencyTransform(bool use_log = true) : log_(use_log) {}

  static double raw(double latency) {
    if (!(latency > 0.0)) throw ValidationError("latency must be > 0 for the log transform");
    return std::log(latency);
  }

  void fit(const std::vector<double>& latencies) {
    std::vector<double> z;
    for (double l : latencies) z.push_back(shape(l));
    std::tie(mean_, std_) = moments(z);
  }

  double forward(double latency) const { return (shape(latency) - mean_) / std_; }
  double inverse(double y) const {
    const double z = y * std_ + mean_;
    return log_ ? std::exp(z) : z;
  }
  double mean() const { return mean_; }
  double stddev() const { return std_; }

  static std::pair<double, double> moments(const std::vector<double>& z) {
    if (z.empty()) return {0.0, 1.0};
    double mean = 0.0;
    for (double v : z) mean += v;
    mean /= static_cast<double>(z.size());
    if (z.size() < 2) return {mean, 1.0};
    double ss = 0.0;
    for (double v : z) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(z.size() - 1));
    return {mean, sd > 0.0 ? sd : 1.0};
  }

 private:
  double shape(double latency) const { return log_ ? raw(latency) : latency; }

  bool log_ = true;
  double mean_ = 0.0;
  double std_ = 1.0;
};

// logit after clamping to [eps, 1-eps], then standardize. With `use_logit`
// off only the standardization remains.
class QualityTransform {
 public:
  static constexpr double kEps = 1e-6;

  explicit QualityTransform(bool use_logit = true) : logit_(use_logit) {}

  static double clamp(double q, bool* clamped = nullptr) {
    const double c = std::clamp(q, kEps, 1.0 - kEps);
    if (clamped) *clamped = c != q;
    return c;
  }
  static double raw(double q, bool* clamped = nullptr) {
    const double c = clamp(q, clamped);
    return std::log(c / (1.0 - c));
  }
  static double raw_inverse(double z) { return 1.0 / (1.0 + std::exp(-z)); }

  void fit(const std::vector<double>& qualities) {
    std::vector<double> z;
    clamped_ = 0;
    for (double q : qualities) {
      bool c = false;
      z.push_back(logit_ ? raw(q, &c) : q);
      clamped_ += c ? 1 : 0;
    }
    std::tie(mean_, std_) = LatencyTransform::moments(z);
  }

  double forward(double q) const { return ((logit_ ? raw(q) : q) - mean_) / std_; }
  double inverse(double y) const {
    const double z = y * std_ + mean_;
    return logit_ ? raw_inverse(z) : z;
  }
  double mean() const { return mean_; }
  double stddev() const { return std_; }
  // Training values that had to be clamped into (0,1).
  std::size_t clamped() const { return clamped_; }

 private:
  bool logit_ = true;
  double mean_ = 0.0;
  double std_ = 1.0;
  std::size_t clamped_ = 0;
};

// ---------------------------------------------------------------------------
// GP model

struct HyperBounds {
  double lengthscale_lo = 1e-2, lengthscale_hi = 1e2;
  double scale_lo = 1e-4, scale_hi = 1e2;
  double phi_lo = 0.0, phi_hi = 1.0;
  double beta_lo = 0.0, beta_hi = 1.0;
  double noise_lo = 1e-6, noise_hi = 1.0;
};

struct FitOptions {
  std::size_t starts = 8;
  int max_iterations = 60;
  std::uint64_t seed = 0;
  bool learn_beta = true;         // false freezes beta at 0
  bool output_transforms = true;  // false: standardize only, no log/logit
  HyperBounds bounds;
};

struct GpModel {
  std::vector<EncodedPoint> inputs;
  Eigen::VectorXd targets;  // standardized
  KernelParams params;
  Eigen::LLT<Eigen::MatrixXd> chol;
  Eigen::VectorXd alpha;
  double jitter = 0.0;
  double log_marginal_likelihood = 0.0;
};

struct Posterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Latent posterior at `pool` (observation noise not added).
inline Posterior posterior(const GpModel& gp, const std::vector<EncodedPoint>& pool) {
  Posterior out;
  const Eigen::MatrixXd ks = cross_gram(gp.inputs, pool, gp.params);
  out.mean = ks.transpose() * gp.alpha;
  const Eigen::MatrixXd v = gp.chol.matrixL().solve(ks);
  out.cov = gram(pool, gp.params) - v.transpose() * v;
  return out;
}

// n_samples joint draws (columns) from N(mean, cov), deterministic per seed.
inline Eigen::MatrixXd sample_posterior(const Posterior& post, std::size_t n_samples, std::uint64_t seed) {
  const auto n = post.mean.size();
  Eigen::MatrixXd cov = 0.5 * (post.cov + post.cov.transpose());
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::MatrixXd l;
  if (robust_cholesky(cov, llt)) {
    l = llt.matrixL();
  } else {
    // Numerically indefinite (near-duplicate points); fall back to a clipped eigen-root.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    l = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd z(n, static_cast<Eigen::Index>(n_samples));
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    for (Eigen::Index i = 0; i < n; ++i) z(i, j) = normal(rng);
  return (l * z).colwise() + post.mean;
}

namespace detail {

inline double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

// Unconstrained coordinates u for the hyperparameters; each maps through a
// sigmoid onto its box (log-space for the positive ones).
class HyperMap {
 public:
  HyperMap(std::size_t route_dim, std::size_t deploy_dim, const HyperBounds& b, bool learn_beta)
      : route_dim_(route_dim), deploy_dim_(deploy_dim), b_(b), learn_beta_(learn_beta) {}

  std::size_t size() const { return route_dim_ + deploy_dim_ + 5 + (learn_beta_ ? 1 : 0); }

  KernelParams decode(const double* u) const {
    KernelParams p;
    p.route_lengthscales.resize(static_cast<Eigen::Index>(route_dim_));
    p.deploy_lengthscales.resize(static_cast<Eigen::Index>(deploy_dim_));
    std::size_t k = 0;
    for (std::size_t i = 0; i < route_dim_; ++i) p.route_lengthscales[static_cast<Eigen::Index>(i)] = logbox(u[k++], b_.lengthscale_lo, b_.lengthscale_hi);
    for (std::size_t i = 0; i < deploy_dim_; ++i) p.deploy_lengthscales[static_cast<Eigen::Index>(i)] = logbox(u[k++], b_.lengthscale_lo, b_.lengthscale_hi);
    p.route_scale = logbox(u[k++], b_.scale_lo, b_.scale_hi);
    p.deploy_scale = logbox(u[k++], b_.scale_lo, b_.scale_hi);
    p.cross_scale = logbox(u[k++], b_.scale_lo, b_.scale_hi);
    p.phi = box(u[k++], b_.phi_lo, b_.phi_hi);
    p.noise = logbox(u[k++], b_.noise_lo, b_.noise_hi);
    p.beta = learn_beta_ ? box(u[k++], b_.beta_lo, b_.beta_hi) : 0.0;
    return p;
  }

  std::vector<double> encode(const KernelParams& p) const {
    std::vector<double> u;
    for (Eigen::Index i = 0; i < p.route_lengthscales.size(); ++i) u.push_back(unlogbox(p.route_lengthscales[i], b_.lengthscale_lo, b_.lengthscale_hi));
    for (Eigen::Index i = 0; i < p.deploy_lengthscales.size(); ++i) u.push_back(unlogbox(p.deploy_lengthscales[i], b_.lengthscale_lo, b_.lengthscale_hi));
    u.push_back(unlogbox(p.route_scale, b_.scale_lo, b_.scale_hi));
    u.push_back(unlogbox(p.deploy_scale, b_.scale_lo, b_.scale_hi));
    u.push_back(unlogbox(p.cross_scale, b_.scale_lo, b_.scale_hi));
    u.push_back(unbox(p.phi, b_.phi_lo, b_.phi_hi));
    u.push_back(unlogbox(p.noise, b_.noise_lo, b_.noise_hi));
    if (learn_beta_) u.push_back(unbox(p.beta, b_.beta_lo, b_.beta_hi));
    return u;
  }

  // d(param)/du for the box maps; for log-boxed params this is d(log param)/du.
  static double dbox(double u, double lo, double hi) {
    const double s = sigmoid(u);
    return (hi - lo) * s * (1.0 - s);
  }
  static double dlogbox(double u, double lo, double hi) { return dbox(u, std::log(lo), std::log(hi)); }

  const HyperBounds& bounds() const { return b_; }
  bool learn_beta() const { return learn_beta_; }
  std::size_t route_dim() const { return route_dim_; }
  std::size_t deploy_dim() const { return deploy_dim_; }

 private:
  static double box(double u, double lo, double hi) { return lo + (hi - lo) * sigmoid(u); }
  static double logbox(double u, double lo, double hi) { return std::exp(box(u, std::log(lo), std::log(hi))); }
  static double unbox(double v, double lo, double hi) {
    const double p = std::clamp((v - lo) / (hi - lo), 1e-9, 1.0 - 1e-9);
    return logit(p);
  }
  static double unlogbox(double v, double lo, double hi) { return unbox(std::log(v), std::log(lo), std::log(hi)); }

  std::size_t route_dim_, deploy_dim_;
  HyperBounds b_;
  bool learn_beta_;
};

// Negative log marginal likelihood and its gradient in u-coordinates.
class NegativeLml final : public ceres::FirstOrderFunction {
 public:
  NegativeLml(const std::vector<EncodedPoint>& xs, const Eigen::VectorXd& y, const HyperMap& map)
      : xs_(xs), y_(y), map_(map) {
    const auto n = static_cast<Eigen::Index>(xs.size());
    const auto dr = static_cast<Eigen::Index>(map.route_dim());
    const auto dc = static_cast<Eigen::Index>(map.deploy_dim());
    route_sq_.assign(static_cast<std::size_t>(dr), Eigen::MatrixXd::Zero(n, n));
    deploy_sq_.assign(static_cast<std::size_t>(dc), Eigen::MatrixXd::Zero(n, n));
    pref_sum_.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        const auto& a = xs[static_cast<std::size_t>(i)];
        const auto& b = xs[static_cast<std::size_t>(j)];
        for (Eigen::Index d = 0; d < dr; ++d) route_sq_[static_cast<std::size_t>(d)](i, j) = std::pow(a.route[d] - b.route[d], 2);
        for (Eigen::Index d = 0; d < dc; ++d) deploy_sq_[static_cast<std::size_t>(d)](i, j) = std::pow(a.deploy[d] - b.deploy[d], 2);
        pref_sum_(i, j) = a.preference + b.preference;
      }
    }
  }

  int NumParameters() const override { return static_cast<int>(map_.size()); }

  bool Evaluate(const double* u, double* cost, double* gradient) const override {
    const KernelParams p = map_.decode(u);
    const auto n = static_cast<Eigen::Index>(xs_.size());
    const auto dr = map_.route_dim();
    const auto dc = map_.deploy_dim();

    Eigen::MatrixXd r2 = Eigen::MatrixXd::Zero(n, n), c2 = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t d = 0; d < dr; ++d) r2 += route_sq_[d] / std::pow(p.route_lengthscales[static_cast<Eigen::Index>(d)], 2);
    for (std::size_t d = 0; d < dc; ++d) c2 += deploy_sq_[d] / std::pow(p.deploy_lengthscales[static_cast<Eigen::Index>(d)], 2);
    const Eigen::ArrayXXd r = r2.array().sqrt(), c = c2.array().sqrt();
    const Eigen::ArrayXXd er = (-std::sqrt(5.0) * r).exp(), ec = (-std::sqrt(3.0) * c).exp();
    const Eigen::ArrayXXd A = (1.0 + std::sqrt(5.0) * r + 5.0 / 3.0 * r.square()) * er;
    const Eigen::ArrayXXd B = (1.0 + std::sqrt(3.0) * c) * ec;
    const Eigen::ArrayXXd W = (p.beta * pref_sum_.array()).exp();

    Eigen::MatrixXd k = (p.route_scale * A + p.deploy_scale * W * B + p.phi * p.cross_scale * A * B).matrix();
    k.diagonal().array() += p.noise;
    Eigen::LLT<Eigen::MatrixXd> llt;
    const auto jitter = robust_cholesky(k, llt);
    if (!jitter) return false;
    const Eigen::VectorXd alpha = llt.solve(y_);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    *cost = 0.5 * y_.dot(alpha) + 0.5 * logdet + 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
    if (!std::isfinite(*cost)) return false;
    if (!gradient) return true;

    // d(-LML)/dtheta = -1/2 tr((alpha alpha^T - K^-1) dK/dtheta)
    const Eigen::MatrixXd kinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
    const Eigen::ArrayXXd G = -0.5 * (alpha * alpha.transpose() - kinv).array();
    auto contract = [&](const Eigen::ArrayXXd& dk) { return (G * dk).sum(); };

    const Eigen::ArrayXXd dA_common = 5.0 / 3.0 * (1.0 + std::sqrt(5.0) * r) * er;  // dA/dlog(l) = this * d^2/l^2
    const Eigen::ArrayXXd dB_common = 3.0 * ec;
    const Eigen::ArrayXXd route_weight = p.route_scale + p.phi * p.cross_scale * B;
    const Eigen::ArrayXXd deploy_weight = p.deploy_scale * W + p.phi * p.cross_scale * A;
    const auto& b = map_.bounds();
    std::size_t k_idx = 0;
    for (std::size_t d = 0; d < dr; ++d) {
      const double l = p.route_lengthscales[static_cast<Eigen::Index>(d)];
      const Eigen::ArrayXXd dk = route_weight * dA_common * route_sq_[d].array() / (l * l);
      gradient[k_idx] = contract(dk) * HyperMap::dlogbox(u[k_idx], b.lengthscale_lo, b.lengthscale_hi);
      ++k_idx;
    }
    for (std::size_t d = 0; d < dc; ++d) {
      const double l = p.deploy_lengthscales[static_cast<Eigen::Index>(d)];
      const Eigen::ArrayXXd dk = deploy_weight * dB_common * deploy_sq_[d].array() / (l * l);
      gradient[k_idx] = contract(dk) * HyperMap::dlogbox(u[k_idx], b.lengthscale_lo, b.lengthscale_hi);
      ++k_idx;
    }
    gradient[k_idx] = contract(p.route_scale * A) * HyperMap::dlogbox(u[k_idx], b.scale_lo, b.scale_hi);
    ++k_idx;
    gradient[k_idx] = contract(p.deploy_scale * W * B) * HyperMap::dlogbox(u[k_idx], b.scale_lo, b.scale_hi);
    ++k_idx;
    gradient[k_idx] = contract(p.phi * p.cross_scale * A * B) * HyperMap::dlogbox(u[k_idx], b.scale_lo, b.scale_hi);
    ++k_idx;
    gradient[k_idx] = contract(p.cross_scale * A * B) * HyperMap::dbox(u[k_idx], b.phi_lo, b.phi_hi);
    ++k_idx;
    gradient[k_idx] = p.noise * G.matrix().trace() * HyperMap::dlogbox(u[k_idx], b.noise_lo, b.noise_hi);
    ++k_idx;
    if (map_.learn_beta()) {
      gradient[k_idx] = contract(pref_sum_.array() * p.deploy_scale * W * B) * HyperMap::dbox(u[k_idx], b.beta_lo, b.beta_hi);
      ++k_idx;
    }
    for (std::size_t i = 0; i < k_idx; ++i)
      if (!std::isfinite(gradient[i])) return false;
    return true;
  }

 private:
  const std::vector<EncodedPoint>& xs_;
  const Eigen::VectorXd& y_;
  const HyperMap& map_;
  std::vector<Eigen::MatrixXd> route_sq_, deploy_sq_;
  Eigen::MatrixXd pref_sum_;
};

// Radical inverse in `base`; the building block of the Halton sequence.
inline double radical_inverse(std::uint64_t i, std::uint64_t base) {
  double f = 1.0, r = 0.0;
  while (i > 0) {
    f /= static_cast<double>(base);
    r += f * static_cast<double>(i % base);
    i /= base;
  }
  return r;
}

inline constexpr std::uint64_t kPrimes[] = {2,  3,  5,  7,  11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53,
                                            59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131};

inline double halton(std::uint64_t index, std::size_t dim) {
  return radical_inverse(index, kPrimes[dim % std::size(kPrimes)]);
}

}  // namespace detail

// Builds the factorized model for fixed hyperparameters.
inline GpModel condition(std::vector<EncodedPoint> xs, Eigen::VectorXd y, const KernelParams& p) {
  GpModel gp;
  gp.inputs = std::move(xs);
  gp.targets = std::move(y);
  gp.params = p;
  Eigen::MatrixXd k = gram(gp.inputs, p);
  k.diagonal().array() += p.noise;
  const auto jitter = robust_cholesky(k, gp.chol);
  if (!jitter) throw FitError("covariance factorization failed at maximum jitter");
  gp.jitter = *jitter;
  gp.alpha = gp.chol.solve(gp.targets);
  const double logdet = 2.0 * gp.chol.matrixLLT().diagonal().array().log().sum();
  gp.log_marginal_likelihood = -0.5 * gp.targets.dot(gp.alpha) - 0.5 * logdet -
                               0.5 * static_cast<double>(gp.targets.size()) * std::log(2.0 * std::numbers::pi);
  return gp;
}

// Maximizes the log marginal likelihood from `starts` quasi-random initial
// lengthscale vectors (Halton, offset by seed), phi = 0.1, beta = 0.01.
// `warm` adds the previous optimum as an extra start.
inline GpModel fit_gp(const std::vector<EncodedPoint>& xs, const Eigen::VectorXd& y, const FitOptions& opt,
                      const std::optional<KernelParams>& warm = std::nullopt) {
  if (xs.size() < 2) throw FitError("need at least two training points");
  if (!y.allFinite()) throw FitError("training targets must be finite");
  const std::size_t dr = static_cast<std::size_t>(xs.front().route.size());
  const std::size_t dc = static_cast<std::size_t>(xs.front().deploy.size());
  const detail::HyperMap map(dr, dc, opt.bounds, opt.learn_beta);

  std::vector<KernelParams> inits;
  for (std::size_t s = 0; s < opt.starts; ++s) {
    KernelParams p = KernelParams::defaults(dr, dc);
    const std::uint64_t index = opt.seed * 101 + s + 1;
    // log-uniform over [0.05, 5]
    auto draw = [&](std::size_t dim) { return std::exp(std::log(0.05) + detail::halton(index, dim) * std::log(100.0)); };
    for (std::size_t d = 0; d < dr; ++d) p.route_lengthscales[static_cast<Eigen::Index>(d)] = draw(d);
    for (std::size_t d = 0; d < dc; ++d) p.deploy_lengthscales[static_cast<Eigen::Index>(d)] = draw(dr + d);
    p.phi = 0.1;
    p.beta = opt.learn_beta ? 0.01 : 0.0;
    p.noise = 1e-3;
    inits.push_back(std::move(p));
  }
  if (warm) {
    KernelParams w = *warm;
    if (!opt.learn_beta) w.beta = 0.0;
    inits.push_back(std::move(w));
  }

  ceres::GradientProblemSolver::Options solver;
  solver.line_search_direction_type = ceres::LBFGS;
  solver.max_num_iterations = opt.max_iterations;
  solver.logging_type = ceres::SILENT;
  solver.minimizer_progress_to_stdout = false;
  solver.function_tolerance = 1e-9;
  solver.gradient_tolerance = 1e-7;

  std::optional<std::vector<double>> best_u;
  double best_cost = std::numeric_limits<double>::infinity();
  for (const auto& init : inits) {
    std::vector<double> u = map.encode(init);
    ceres::GradientProblem problem(new detail::NegativeLml(xs, y, map));
    double c0 = 0.0;
    if (!problem.Evaluate(u.data(), &c0, nullptr)) continue;
    ceres::GradientProblemSolver::Summary summary;
    ceres::Solve(solver, problem, u.data(), &summary);
    double c = 0.0;
    if (!problem.Evaluate(u.data(), &c, nullptr) || !std::isfinite(c)) continue;
    if (c < best_cost) {
      best_cost = c;
      best_u = u;
    }
  }
  if (!best_u) throw FitError("marginal likelihood could not be evaluated at any start");
  return condition(xs, y, map.decode(best_u->data()));
}

// ---------------------------------------------------------------------------
// Paired surrogates for latency and quality

struct Observation {
  ThetaPoint theta;
  double latency = 0.0;  // seconds, > 0
  double quality = 0.0;  // [0,1]
};

struct Surrogates {
  GpModel latency;
  GpModel quality;
  LatencyTransform latency_tf;
  QualityTransform quality_tf;
};

inline Surrogates fit(const std::vector<Observation>& obs, const Encoder& enc, const FitOptions& opt,
                      const Surrogates* warm = nullptr) {
  if (obs.size() < 2) throw FitError("need at least two observations");
  Surrogates s;
  s.latency_tf = LatencyTransform(opt.output_transforms);
  s.quality_tf = QualityTransform(opt.output_transforms);
  std::vector<EncodedPoint> xs;
  std::vector<double> ls, qs;
  for (const auto& o : obs) {
    xs.push_back(enc.encode(o.theta));
    ls.push_back(o.latency);
    qs.push_back(o.quality);
  }
  s.latency_tf.fit(ls);
  s.quality_tf.fit(qs);
  Eigen::VectorXd yl(static_cast<Eigen::Index>(obs.size())), yq(static_cast<Eigen::Index>(obs.size()));
  for (std::size_t i = 0; i < obs.size(); ++i) {
    yl[static_cast<Eigen::Index>(i)] = s.latency_tf.forward(ls[i]);
    yq[static_cast<Eigen::Index>(i)] = s.quality_tf.forward(qs[i]);
  }
  FitOptions lopt = opt, qopt = opt;
  qopt.seed = opt.seed + 7919;
  s.latency = fit_gp(xs, yl, lopt, warm ? std::optional(warm->latency.params) : std::nullopt);
  s.quality = fit_gp(xs, yq, qopt, warm ? std::optional(warm->quality.params) : std::nullopt);
  return s;
}

inline nlohmann::json to_json(const KernelParams& p) {
  return {{"route_lengthscales", std::vector<double>(p.route_lengthscales.data(), p.route_lengthscales.data() + p.route_lengthscales.size())},
          {"deploy_lengthscales", std::vector<double>(p.deploy_lengthscales.data(), p.deploy_lengthscales.data() + p.deploy_lengthscales.size())},
          {"route_scale", p.route_scale},
          {"deploy_scale", p.deploy_scale},
          {"cross_scale", p.cross_scale},
          {"phi", p.phi},
          {"beta", p.beta},
          {"noise", p.noise}};
}

}  // namespace hetserve
