// Writes the synthetic two-model trace used by the shipped scenario.
//
// The routing score is a difficulty estimate in [0,1]: easy queries go to the
// small model first. Quality labels are per-query correctness (0 or 1) drawn
// from difficulty-dependent success rates, so the small model is nearly as good
// on easy queries and much worse on hard ones.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>
#include <json.hpp>

int main(int argc, char** argv) {
  CLI::App app{"synthetic trace generator"};
  std::string out = "trace.jsonl";
  int n = 2000;
  double rate = 20.0;
  std::uint64_t seed = 7;
  double alpha = 2.0, beta = 5.0;
  double length_skew = 0.0;
  app.add_option("--out", out, "output path");
  app.add_option("-n,--queries", n, "number of queries")->check(CLI::PositiveNumber);
  app.add_option("--rate", rate, "mean arrival rate, queries per second")->check(CLI::PositiveNumber);
  app.add_option("--seed", seed, "rng seed");
  app.add_option("--alpha", alpha, "difficulty Beta shape a")->check(CLI::PositiveNumber);
  app.add_option("--beta", beta, "difficulty Beta shape b")->check(CLI::PositiveNumber);
  app.add_option("--length-skew", length_skew, "extra output length per unit difficulty")->check(CLI::NonNegativeNumber);
  CLI11_PARSE(app, argc, argv);

  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> ga(alpha, 1.0), gb(beta, 1.0);
  std::lognormal_distribution<double> in_len(std::log(320.0), 0.6), out_len(std::log(140.0), 0.5);
  std::exponential_distribution<double> gap(rate);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::ofstream f(out);
  if (!f) {
    std::cerr << "cannot open " << out << "\n";
    return 2;
  }
  double t = 0.0;
  for (int i = 0; i < n; ++i) {
    t += gap(rng);
    const double x = ga(rng), y = gb(rng);
    const double d = x / (x + y);  // Beta(alpha, beta)
    const int input = std::clamp(static_cast<int>(std::lround(in_len(rng))), 16, 2048);
    // harder queries may produce longer answers
    const int output = std::clamp(static_cast<int>(std::lround(out_len(rng) * (1.0 + length_skew * (d - 0.5)))), 8, 1024);
    const double p_small = std::clamp(0.96 - 0.95 * d, 0.0, 1.0);
    const double p_large = std::clamp(0.97 - 0.35 * d, 0.0, 1.0);
    nlohmann::json rec;
    rec["id"] = "q" + std::to_string(i);
    rec["arrival_s"] = std::round(t * 1e6) / 1e6;
    rec["input_tokens"] = input;
    rec["output_tokens"] = output;
    rec["routing_score"] = std::round(d * 1e6) / 1e6;
    rec["quality"] = {{"small", unit(rng) < p_small ? 1 : 0}, {"large", unit(rng) < p_large ? 1 : 0}};
    f << rec.dump() << '\n';
  }
  return 0;
}
