#include <gtest/gtest.h>

#include <functional>

#include "fixtures.hpp"

using namespace hetserve;

namespace {

std::vector<std::size_t> brute_skim(const std::vector<LatencyCost>& p) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < p.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < p.size() && !dominated; ++j) {
      if (i == j) continue;
      const bool weak = p[j].latency <= p[i].latency && p[j].cost <= p[i].cost;
      const bool strict = p[j].latency < p[i].latency || p[j].cost < p[i].cost;
      // identical points: keep the first
      dominated = weak && (strict || j < i);
    }
    if (!dominated) out.push_back(i);
  }
  return out;
}

// Best min-max latency of splitting `units` across the chosen curves.
double brute_split(const std::vector<std::vector<double>>& curves, std::size_t units) {
  if (curves.empty()) return units == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t, std::size_t, double)> rec = [&](std::size_t i, std::size_t left, double worst) {
    if (i + 1 == curves.size()) {
      best = std::min(best, std::max(worst, curves[i][left]));
      return;
    }
    for (std::size_t v = 0; v <= left; ++v) rec(i + 1, left - v, std::max(worst, curves[i][v]));
  };
  rec(0, units, 0.0);
  return best;
}

std::vector<double> envelope(std::vector<double> c) {
  for (std::size_t i = 1; i < c.size(); ++i) c[i] = std::max(c[i], c[i - 1]);
  return c;
}

ReplicaShape sh(const std::string& gpu, int n = 1) { return {"small", gpu, n, n, 1}; }

}  // namespace

TEST(ParetoSkim, HandExample) {
  const std::vector<LatencyCost> p{{1, 10}, {2, 5}, {3, 6}};
  auto keep = pareto_skim(p);
  std::sort(keep.begin(), keep.end());
  EXPECT_EQ(keep, (std::vector<std::size_t>{0, 1}));
}

TEST(ParetoSkim, DuplicatesCollapse) {
  const std::vector<LatencyCost> p(5, {2.0, 3.0});
  EXPECT_EQ(pareto_skim(p), (std::vector<std::size_t>{0}));
}

TEST(ParetoSkim, MatchesQuadraticBruteForce) {
  std::mt19937_64 rng(1);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 1 + rng() % 50;
    std::vector<LatencyCost> p;
    // small integer coordinates force ties
    for (std::size_t i = 0; i < n; ++i) p.push_back({static_cast<double>(rng() % 12), static_cast<double>(rng() % 12)});
    auto got = pareto_skim(p);
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, brute_skim(p)) << inst;
  }
}

TEST(Knapsack, BudgetExcludesExpensiveItem) {
  const std::vector<std::vector<KnapsackItem>> groups{{{10.0, {0.0, 5.0}}, {20.0, {0.0, 3.0}}}};
  const auto s = knapsack_mck(groups, 15.0, 1);
  ASSERT_TRUE(s.found);
  EXPECT_EQ(s.choice, (std::vector<int>{0}));
  EXPECT_DOUBLE_EQ(s.latency, 5.0);
}

TEST(Knapsack, BudgetBelowCheapestItem) {
  const std::vector<std::vector<KnapsackItem>> groups{{{10.0, {0.0, 5.0}}, {20.0, {0.0, 3.0}}}};
  EXPECT_FALSE(knapsack_mck(groups, 5.0, 1).found);
}

TEST(Knapsack, MatchesExhaustiveSelection) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n_groups = 1 + rng() % 3, n_items = 1 + rng() % 3, units = 1 + rng() % 5;
    std::vector<std::vector<KnapsackItem>> groups(n_groups);
    for (auto& g : groups) {
      for (std::size_t i = 0; i < n_items; ++i) {
        KnapsackItem item{std::round(100.0 * (1.0 + 9.0 * u(rng))) / 100.0, {0.0}};
        double v = 0.5 * u(rng);
        for (std::size_t k = 1; k <= units; ++k) {
          v += u(rng);
          item.curve.push_back(u(rng) < 0.15 ? std::numeric_limits<double>::infinity() : v);
        }
        g.push_back(item);
      }
    }
    const double budget = std::round(100.0 * (2.0 + 20.0 * u(rng))) / 100.0;
    const auto s = knapsack_mck(groups, budget, units);

    // 4^groups selections (each group: nothing or one item)
    double best = std::numeric_limits<double>::infinity(), best_cost = 0.0;
    std::vector<int> pick(n_groups, -1);
    std::function<void(std::size_t)> rec = [&](std::size_t g) {
      if (g == n_groups) {
        std::int64_t cents = 0;
        std::vector<std::vector<double>> curves;
        for (std::size_t k = 0; k < n_groups; ++k) {
          if (pick[k] < 0) continue;
          cents += to_cents(groups[k][static_cast<std::size_t>(pick[k])].cost);
          curves.push_back(envelope(groups[k][static_cast<std::size_t>(pick[k])].curve));
        }
        if (cents > to_cents(budget)) return;
        const double l = brute_split(curves, units);
        const double cost = static_cast<double>(cents) / 100.0;
        if (l < best || (l == best && cost < best_cost)) best = l, best_cost = cost;
        return;
      }
      for (int i = -1; i < static_cast<int>(n_items); ++i) {
        pick[g] = i;
        rec(g + 1);
      }
    };
    rec(0);
    ASSERT_EQ(s.found, std::isfinite(best)) << inst;
    if (!s.found) continue;
    EXPECT_EQ(s.latency, best) << inst;
    EXPECT_EQ(to_cents(s.cost), to_cents(best_cost)) << inst;
    // the reported choice achieves the reported value
    std::vector<std::vector<double>> chosen;
    for (std::size_t g = 0; g < n_groups; ++g)
      if (s.choice[g] >= 0) chosen.push_back(envelope(groups[g][static_cast<std::size_t>(s.choice[g])].curve));
    EXPECT_EQ(brute_split(chosen, units), s.latency) << inst;
  }
}

TEST(BudgetGrid, EvenlySpaced) {
  const auto g = budget_grid(30.0, 10);
  ASSERT_EQ(g.size(), 10u);
  for (std::size_t k = 0; k < 10; ++k) EXPECT_NEAR(g[k], 3.0 * (k + 1), 1e-12);
}

TEST(GenHomog, TwoDataParallelDegreesBothKept) {
  ClusterSpec spec = fixtures::two_type_spec();
  spec.gpus[0].count = 2;
  const auto db = fixtures::handmade_db(spec, {sh("big")}, LoadGrid::range(2, 8, 2),
                                        [](const ReplicaShape&, double l) { return 1.0 + l; });
  const auto c = gen_homog(db, "small", "big", {4.0, 8.0, 2.0});
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].replicas.size(), 1u);
  EXPECT_DOUBLE_EQ(c[0].p95_ref, 5.0);
  EXPECT_EQ(c[1].replicas.size(), 2u);
  EXPECT_DOUBLE_EQ(c[1].p95_ref, 3.0);
  EXPECT_NEAR(c[1].cost_per_hour, 2 * 2.69, 1e-12);
}

TEST(GenHomog, SaturatedEverywhereIsEmpty) {
  const auto spec = fixtures::two_type_spec();
  const auto db = fixtures::handmade_db(spec, {sh("big")}, LoadGrid::range(2, 8, 2),
                                        [](const ReplicaShape&, double) { return std::numeric_limits<double>::infinity(); });
  EXPECT_TRUE(gen_homog(db, "small", "big", {8.0, 8.0, 2.0}).empty());
}

TEST(GenHetero, SingleTypeEqualsHomogeneousFrontier) {
  ClusterSpec spec = fixtures::two_type_spec();
  spec.gpus.resize(1);
  const auto db = fixtures::handmade_db(spec, {sh("big"), sh("big", 2)}, LoadGrid::range(2, 20, 2),
                                        [](const ReplicaShape& s, double l) { return 1.0 + l / s.n_gpus; });
  const CandidateOptions opt{8.0, 20.0, 2.0};
  const auto homog = gen_homog(db, "small", "big", opt);
  const auto het = gen_hetero(db, "small", 8.0, 10, opt);
  std::vector<std::vector<ReplicaShape>> a, b;
  for (const auto& c : homog)
    if (c.cost_per_hour <= 8.0) a.push_back(c.replicas);
  for (const auto& c : het) b.push_back(c.replicas);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(GenHetero, MixedCandidateWhenNeitherTypeSuffices) {
  ClusterSpec spec = fixtures::two_type_spec();
  spec.gpus[0] = fixtures::gpu("big", 1.0, 1);
  spec.gpus[1] = fixtures::gpu("cheap", 1.5, 1);
  const auto db = fixtures::handmade_db(spec, {sh("big"), sh("cheap")}, LoadGrid::range(2, 8, 2),
                                        [](const ReplicaShape&, double l) { return l <= 2.0 ? 1.0 : 3.0; });
  const auto c = gen_hetero(db, "small", 3.0, 10, {4.0, 8.0, 2.0});
  // exhaustive selection over {big, cheap, both} within budget 3: both at P95 1
  const DeploymentCandidate* mixed = nullptr;
  for (const auto& x : c)
    if (x.allocation.size() == 2) mixed = &x;
  ASSERT_NE(mixed, nullptr);
  EXPECT_DOUBLE_EQ(mixed->p95_ref, 1.0);
  EXPECT_NEAR(mixed->cost_per_hour, 2.5, 1e-12);
}

TEST(GenHetero, FrontierIsNondominatedAndWithinBudget) {
  const auto spec = fixtures::two_type_spec();
  std::vector<ReplicaShape> shapes{sh("big"), sh("big", 2), sh("cheap"), sh("cheap", 2)};
  const auto db = fixtures::handmade_db(spec, shapes, LoadGrid::range(2, 20, 2), [](const ReplicaShape& s, double l) {
    const double speed = (s.gpu == "big" ? 3.0 : 1.0) * s.n_gpus;
    return l / speed > 6.0 ? std::numeric_limits<double>::infinity() : 0.5 + l / speed;
  });
  const auto c = gen_hetero(db, "small", 9.0, 12, {10.0, 20.0, 2.0});
  ASSERT_FALSE(c.empty());
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_LE(c[i].cost_per_hour, 9.0 + 1e-9);
    EXPECT_NEAR(c[i].cost_per_hour, allocation_cost(spec, c[i].allocation), 1e-12);
    if (i > 0) {
      EXPECT_GT(c[i].cost_per_hour, c[i - 1].cost_per_hour);
      EXPECT_LT(c[i].p95_ref, c[i - 1].p95_ref);
    }
    for (std::size_t k = 1; k < c[i].curve_p95.size(); ++k) EXPECT_GE(c[i].curve_p95[k], c[i].curve_p95[k - 1]);
  }
}

TEST(CandidateSet, JsonRoundTrip) {
  const auto spec = fixtures::two_type_spec();
  std::vector<ReplicaShape> shapes{sh("big"), sh("cheap")};
  shapes.push_back({"large", "big", 2, 2, 1});
  const auto db = fixtures::handmade_db(spec, shapes, LoadGrid::range(2, 20, 2),
                                        [](const ReplicaShape&, double l) { return 1.0 + 0.1 * l; });
  const auto set = generate_candidates(db, 12.0, 10, 20.0, 2.0);
  const auto back = candidates_from_json(to_json(set));
  EXPECT_EQ(to_json(back).dump(), to_json(set).dump());
  EXPECT_EQ(back.per_model.size(), 2u);
}

TEST(Cost, ClusterAnchorsToTheCent) {
  ClusterSpec spec;
  spec.gpus = {fixtures::gpu("h100", 2.69, 12), fixtures::gpu("rtx5090", 0.89, 24)};
  EXPECT_EQ(to_cents(allocation_cost(spec, {{"h100", 12}})), 3228);
  EXPECT_EQ(to_cents(allocation_cost(spec, {{"rtx5090", 6}, {"h100", 10}})), 3224);
  EXPECT_EQ(to_cents(allocation_cost(spec, {{"rtx5090", 24}})), 2136);
  EXPECT_EQ(to_cents(allocation_cost(spec, {{"h100", 8}})), 2152);
}
