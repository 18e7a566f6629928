#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mmoe/scheduler.hpp"

using namespace mmoe;

namespace {

StrategyConfig layer_strategy(int lo, int hi) {
  StrategyConfig s;
  s.kind = StrategyKind::mmoe_layer;
  s.k_min = lo;
  s.k_max = hi;
  return s;
}

int total(const KSchedule& ks) { return std::accumulate(ks.per_layer_k.begin(), ks.per_layer_k.end(), 0); }

}  // namespace

TEST_SUITE("k-scheduler") {

TEST_CASE("uniform sampler") {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) CHECK(sample_uniform_k(3, 3, rng) == 3);
  std::vector<int> counts(7, 0);
  const int n = 600000;
  for (int i = 0; i < n; ++i) counts[sample_uniform_k(1, 6, rng)]++;
  for (int k = 1; k <= 6; ++k) CHECK(std::abs(counts[k] / double(n) - 1.0 / 6) < 0.005);

  Rng a(42), b(42);
  for (int i = 0; i < 50; ++i) CHECK(sample_uniform_k(1, 6, a) == sample_uniform_k(1, 6, b));
}

TEST_CASE("weighted sampler probabilities") {
  auto p1 = weighted_k_probabilities(1, 6, 1.0);
  CHECK(p1[5] == doctest::Approx(6.0 / 21).epsilon(1e-12));
  auto p2 = weighted_k_probabilities(1, 6, 2.0);
  double norm = 0.0;
  for (int j = 1; j <= 6; ++j) norm += std::sqrt(j);
  CHECK(norm == doctest::Approx(10.8318).epsilon(1e-5));
  CHECK(p2[0] == doctest::Approx(0.0923).epsilon(1e-3));
  CHECK(p2[5] == doctest::Approx(0.2261).epsilon(1e-3));
  auto pinf = weighted_k_probabilities(1, 6, 1e6);
  for (double p : pinf) CHECK(p == doctest::Approx(1.0 / 6).epsilon(1e-4));
  CHECK_THROWS_AS(weighted_k_probabilities(1, 6, 0.0), ConfigError);

  Rng rng(3);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 200000; ++i) counts[sample_weighted_k(1, 6, 1e6, rng)]++;
  for (int k = 1; k <= 6; ++k) CHECK(std::abs(counts[k] / 200000.0 - 1.0 / 6) < 0.01);
}

TEST_CASE("schedule per strategy") {
  Rng rng(5);
  StrategyConfig fixed;
  fixed.kind = StrategyKind::fixed_topk;
  fixed.k_fixed = 4;
  fixed.k_min = fixed.k_max = 4;
  for (auto ev : {GranularityEvent::optimizer_step, GranularityEvent::micro_batch, GranularityEvent::forward_pass}) {
    CHECK(schedule(fixed, 6, ev, rng).per_layer_k == std::vector<int>(6, 4));
  }

  StrategyConfig global = layer_strategy(1, 6);
  global.kind = StrategyKind::mmoe_global_batch;
  auto g = schedule(global, 5, GranularityEvent::optimizer_step, rng);
  CHECK(std::all_of(g.per_layer_k.begin(), g.per_layer_k.end(), [&](int k) { return k == g.per_layer_k[0]; }));
  CHECK_THROWS_AS(schedule(global, 5, GranularityEvent::forward_pass, rng), ConfigError);
  CHECK(resample_event(StrategyKind::mmoe_global_batch) == GranularityEvent::optimizer_step);
  CHECK(resample_event(StrategyKind::mmoe_micro_batch) == GranularityEvent::micro_batch);
  CHECK(resample_event(StrategyKind::mmoe_layer) == GranularityEvent::forward_pass);

  StrategyConfig topp;
  topp.kind = StrategyKind::top_p;
  topp.p = 0.6;
  auto tp = schedule(topp, 3, GranularityEvent::forward_pass, rng);
  CHECK(tp.is_top_p());
  CHECK(*tp.top_p == 0.6);
}

TEST_CASE("layer-wise schedules are independent and uniform") {
  Rng rng(8);
  const auto s = layer_strategy(1, 6);
  const int n = 10000, L = 56;
  std::vector<std::vector<int>> draws;
  std::vector<int> counts(7, 0);
  for (int i = 0; i < n; ++i) {
    auto ks = schedule(s, L, GranularityEvent::forward_pass, rng);
    for (int k : ks.per_layer_k) counts[k]++;
    draws.push_back(ks.per_layer_k);
  }
  for (int k = 1; k <= 6; ++k) CHECK(std::abs(counts[k] / double(n * L) - 1.0 / 6) < 0.005);
  // Correlation between adjacent layers.
  double mx = 0, my = 0;
  for (auto& d : draws) mx += d[0], my += d[1];
  mx /= n, my /= n;
  double cov = 0, vx = 0, vy = 0;
  for (auto& d : draws) {
    cov += (d[0] - mx) * (d[1] - my);
    vx += (d[0] - mx) * (d[0] - mx);
    vy += (d[1] - my) * (d[1] - my);
  }
  CHECK(std::abs(cov / std::sqrt(vx * vy)) < 0.05);
}

TEST_CASE("budget hand traces") {
  Rng rng(1);
  KSchedule a;
  a.per_layer_k = {6, 6, 6, 6};
  CHECK(enforce_budget(a, 3.0, 1, 6, rng).per_layer_k == std::vector<int>{3, 3, 3, 3});
  KSchedule b;
  b.per_layer_k = {5, 1, 6, 4};
  CHECK(enforce_budget(b, 2.0, 1, 6, rng).per_layer_k == std::vector<int>{2, 1, 3, 2});
  KSchedule c;
  c.per_layer_k = {1, 2, 1, 2};
  CHECK(enforce_budget(c, 4.0, 1, 6, rng).per_layer_k == c.per_layer_k);
  CHECK_THROWS_AS(enforce_budget(a, 0.5, 1, 6, rng), ConfigError);
}

TEST_CASE("budget properties") {
  Rng rng(99);
  const auto s = layer_strategy(1, 6);
  for (int i = 0; i < 2000; ++i) {
    auto ks = schedule(s, 56, GranularityEvent::forward_pass, rng);
    auto out = enforce_budget(ks, 4.5, 1, 6, rng);
    CHECK(total(out) == std::min(total(ks), 252));
    for (int k : out.per_layer_k) CHECK((k >= 1 && k <= 6));
    CHECK(enforce_budget(out, 4.5, 1, 6, rng).per_layer_k == out.per_layer_k);
  }
}

TEST_CASE("strategy validation") {
  auto s = layer_strategy(1, 6);
  CHECK_NOTHROW(s.validate(16));
  CHECK_THROWS_AS(s.validate(4), ConfigError);
  s.k_min = 0;
  CHECK_THROWS_AS(s.validate(16), ConfigError);
  CHECK(parse_strategy_kind("mmoe-layer") == StrategyKind::mmoe_layer);
  CHECK(parse_strategy_kind("mmoe_micro_batch") == StrategyKind::mmoe_micro_batch);
  CHECK_THROWS_AS(parse_strategy_kind("random"), ConfigError);
}

}  // TEST_SUITE
