// Acceptance run: one PASS/FAIL line per criterion. Criterion 8 trains two
// models into the work directory and later criteria reuse them; finished
// runs with an identical config are reused on the next invocation.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "grad_cases.hpp"
#include "mmoe/analysis.hpp"
#include "mmoe/checkpoint.hpp"
#include "mmoe/cli.hpp"
#include "mmoe/config.hpp"
#include "mmoe/eval.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/scheduler.hpp"
#include "mmoe/trainer.hpp"

#ifndef MMOE_TREND_CONFIG
#define MMOE_TREND_CONFIG "trend.json"
#endif

namespace fs = std::filesystem;
using namespace mmoe;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << v;
  return s.str();
}

Outcome routing_math() {
  auto sel = select_topk(TensorD({1, 4}, {0.4, 0.3, 0.2, 0.1}), 2);
  const auto w = sel.token_weights(0);
  const bool weights_ok = sel.k(0) == 2 && sel.indices(0)[0] == 0 && sel.indices(0)[1] == 1 &&
                          std::abs(w[0] - 4.0 / 7) < 1e-6 && std::abs(w[1] - 3.0 / 7) < 1e-6;

  const std::size_t rows = 10000, n = 16;
  Rng rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TensorD scores({rows, n});
  for (auto& x : scores.data()) x = u(rng);
  std::vector<ExpertSelection> by_k;
  for (std::size_t k = 1; k <= n; ++k) by_k.push_back(select_topk(scores, static_cast<int>(k)));
  std::size_t violations = 0;
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t k = 1; k < n; ++k) {
      auto small = by_k[k - 1].indices(t), large = by_k[k].indices(t);
      const std::set<std::uint32_t> big(large.begin(), large.end());
      for (auto i : small) violations += big.count(i) ? 0 : 1;
    }
  }
  return {weights_ok && violations == 0, "weights " + fmt(w[0], 6) + "," + fmt(w[1], 6) + "; nesting violations " +
                                             std::to_string(violations) + " over 10000 vectors"};
}

Outcome top_p() {
  const std::size_t rows = 10000, n = 16;
  Rng rng(202);
  std::exponential_distribution<double> ex(1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t mismatches = 0, not_full = 0;
  std::vector<double> v(n);
  for (std::size_t t = 0; t < rows; ++t) {
    double z = 0.0;
    for (auto& x : v) z += (x = ex(rng));
    for (auto& x : v) x /= z;
    const double p = 1.0 - u(rng);
    const TensorD row({1, n}, v);

    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] > v[b]; });
    std::size_t expect = n;
    for (std::size_t m = 1; m <= n; ++m) {
      double c = 0.0;
      for (std::size_t i = 0; i < m; ++i) c += v[order[i]];
      if (c >= p) {
        expect = m;
        break;
      }
    }
    auto sel = select_topp(row, p);
    const bool same = sel.k(0) == expect && std::equal(sel.indices(0).begin(), sel.indices(0).end(), order.begin());
    mismatches += same ? 0 : 1;
    not_full += select_topp(row, 1.0).k(0) == n ? 0 : 1;
  }
  return {mismatches == 0 && not_full == 0,
          "oracle mismatches " + std::to_string(mismatches) + ", p=1 not N " + std::to_string(not_full)};
}

Outcome samplers() {
  const int draws = 1000000;
  Rng rng(303);
  std::vector<int> uni(7, 0), wtd(7, 0);
  for (int i = 0; i < draws; ++i) uni[static_cast<std::size_t>(sample_uniform_k(1, 6, rng))]++;
  for (int i = 0; i < draws; ++i) wtd[static_cast<std::size_t>(sample_weighted_k(1, 6, 2.0, rng))]++;
  double norm = 0.0;
  for (int k = 1; k <= 6; ++k) norm += std::sqrt(static_cast<double>(k));
  double uni_dev = 0.0, wtd_dev = 0.0, chi2 = 0.0;
  for (int k = 1; k <= 6; ++k) {
    const auto i = static_cast<std::size_t>(k);
    uni_dev = std::max(uni_dev, std::abs(uni[i] / double(draws) - 1.0 / 6));
    const double pk = std::sqrt(static_cast<double>(k)) / norm;
    wtd_dev = std::max(wtd_dev, std::abs(wtd[i] / double(draws) - pk));
    const double e = pk * draws;
    chi2 += (wtd[i] - e) * (wtd[i] - e) / e;
  }
  // Upper 0.001 quantile of chi-square with 5 degrees of freedom.
  constexpr double kChi2Crit = 20.515;
  return {uni_dev < 0.005 && wtd_dev < 0.005 && chi2 < kChi2Crit && std::abs(norm - 10.8318) < 1e-4,
          "uniform max dev " + fmt(uni_dev, 5) + ", tau=2 max dev " + fmt(wtd_dev, 5) + ", chi2 " + fmt(chi2, 2) +
              " (crit " + fmt(kChi2Crit, 3) + ")"};
}

Outcome budget() {
  const int schedules = 10000, L = 56, k_min = 1, k_max = 6;
  const double avg = 4.5;
  Rng rng(404);
  std::size_t bad_sum = 0, bad_range = 0, not_idempotent = 0, capped = 0;
  for (int s = 0; s < schedules; ++s) {
    // Vary the lower end so many schedules exceed the budget.
    const int lo = std::uniform_int_distribution<int>(k_min, k_max)(rng);
    std::uniform_int_distribution<int> pick(lo, k_max);
    KSchedule ks;
    for (int l = 0; l < L; ++l) ks.per_layer_k.push_back(pick(rng));
    const int before = std::accumulate(ks.per_layer_k.begin(), ks.per_layer_k.end(), 0);
    auto out = enforce_budget(ks, avg, k_min, k_max, rng);
    const int after = std::accumulate(out.per_layer_k.begin(), out.per_layer_k.end(), 0);
    capped += before > 252 ? 1 : 0;
    bad_sum += after == std::min(before, 252) ? 0 : 1;
    bad_range += std::all_of(out.per_layer_k.begin(), out.per_layer_k.end(), [&](int k) { return k >= k_min && k <= k_max; })
                     ? 0
                     : 1;
    not_idempotent += enforce_budget(out, avg, k_min, k_max, rng).per_layer_k == out.per_layer_k ? 0 : 1;
  }
  return {bad_sum == 0 && bad_range == 0 && not_idempotent == 0,
          std::to_string(capped) + " of 10000 over budget; sum errors " + std::to_string(bad_sum) + ", range errors " +
              std::to_string(bad_range) + ", idempotence errors " + std::to_string(not_idempotent)};
}

std::optional<double> spearman_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  auto ranks = [n](const std::vector<double>& x) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      double below = 0, equal = 0;
      for (std::size_t j = 0; j < n; ++j) {
        below += x[j] < x[i] ? 1 : 0;
        equal += (j != i && x[j] == x[i]) ? 1 : 0;
      }
      r[i] = 1.0 + below + 0.5 * equal;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (n < 2 || va == 0 || vb == 0) return std::nullopt;
  return cov / std::sqrt(va * vb);
}

Outcome metrics() {
  Rng rng(505);
  std::normal_distribution<double> nd(0.0, 1.0);
  double worst_rho = 0.0, worst_mods = 0.0;
  std::size_t undefined_mismatch = 0, tied = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(std::uniform_int_distribution<int>(2, 40)(rng));
    const bool ties = trial % 2 == 1;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = ties ? std::floor(nd(rng) * 1.5) : nd(rng);
      b[i] = ties ? std::floor(nd(rng) * 1.5) : nd(rng);
    }
    tied += ties ? 1 : 0;
    const auto got = spearman_rank(a, b), want = spearman_oracle(a, b);
    if (got.has_value() != want.has_value()) {
      ++undefined_mismatch;
    } else if (got) {
      worst_rho = std::max(worst_rho, std::abs(*got - *want));
    }
  }
  for (int trial = 0; trial < 1000; ++trial) {
    const auto rows = static_cast<std::size_t>(std::uniform_int_distribution<int>(2, 16)(rng));
    const auto cols = static_cast<std::size_t>(std::uniform_int_distribution<int>(1, 12)(rng));
    Tensor w({rows, cols});
    for (auto& x : w.data()) x = static_cast<float>(nd(rng));
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = i + 1; j < rows; ++j) {
        double dot = 0, ni = 0, nj = 0;
        for (std::size_t c = 0; c < cols; ++c) {
          const double x = w.at(i, c), y = w.at(j, c);
          dot += x * y;
          ni += x * x;
          nj += y * y;
        }
        total += std::abs(dot) / std::sqrt(ni * nj);
      }
    }
    const double want = total / (rows * (rows - 1) / 2.0);
    worst_mods = std::max(worst_mods, std::abs(mods(w) - want));
  }
  const std::vector<float> large{4, 3, 2, 1, 0}, small{0, 1, 2, 3, 4};
  const auto focused = focused_spearman(large, small, 2, 2);
  const bool focused_ok = focused && std::abs(*focused + 1.0) < 1e-12;
  return {worst_rho < 1e-9 && undefined_mismatch == 0 && worst_mods < 1e-9 && focused_ok,
          "spearman max err " + fmt(worst_rho, 12) + " (" + std::to_string(tied) + " tied vectors), mods max err " +
              fmt(worst_mods, 12) + ", focused example " + (focused ? fmt(*focused, 6) : std::string("undefined"))};
}

Outcome gradients() {
  mmoe::testing::OpGradFixture fx(11);
  double worst = 0.0;
  std::string worst_name;
  for (auto& c : fx.cases()) {
    const double e = mmoe::testing::gradient_check(c.params, c.fn);
    if (e >= worst) worst = e, worst_name = c.name;
  }
  const double model_err = mmoe::testing::model_gradient_error();
  return {worst < 1e-3 && model_err < 1e-3,
          "worst op " + worst_name + " " + fmt(worst, 8) + ", 2-layer model " + fmt(model_err, 8)};
}

Outcome checkpoint_round_trip(const fs::path& dir) {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 16;
  c.d_ff = 32;
  c.num_layers = 2;
  c.num_heads = 2;
  c.num_experts = 4;
  c.max_seq_len = 16;
  TrainConfig t;
  t.strategy.kind = StrategyKind::mmoe_layer;
  t.strategy.k_min = 1;
  t.strategy.k_max = 4;
  t.micro_batch_size = 4;
  t.global_batch_size = 4;
  t.seq_len = 16;
  t.tokens_total = 5 * 64;
  t.optimizer.lr_peak = 1e-2f;
  t.optimizer.warmup_steps = 1;
  Rng rng(derive_rng(7, "init"));
  Model m = build_model<float>(c, rng);
  SyntheticTask task;
  Trainer tr(m, t, task);
  while (!tr.done()) tr.step();

  fs::create_directories(dir);
  const CheckpointMeta meta{t.strategy, tr.state().step, task, t.seq_len};
  save_checkpoint(m, meta, dir / "a.mmoe");
  LoadedCheckpoint loaded = load_checkpoint(dir / "a.mmoe");
  save_checkpoint(loaded.model, loaded.meta, dir / "b.mmoe");
  auto read = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const bool identical = read(dir / "a.mmoe") == read(dir / "b.mmoe");
  const auto eval = make_eval_set(task, 0, 8, 16);
  const std::vector<int> ks{2, 3};
  const double before = evaluate(m, ks, eval).loss, after = evaluate(loaded.model, ks, eval).loss;
  return {identical && before == after, std::string(identical ? "bytes identical" : "bytes differ") + ", eval loss " +
                                            fmt(before, 9) + " vs " + fmt(after, 9)};
}

// Trained models and their evaluations, shared by criteria 8 to 11.
struct TrendRun {
  std::optional<LoadedCheckpoint> fixed, mmoe;
  SyntheticTask task;
  std::size_t seq_len = 0;
  std::string error;
};

Json resolved_config(const std::string& config_path, const std::vector<std::string>& overrides, const fs::path& dir) {
  Json j = read_json_file(config_path);
  for (const auto& o : overrides) apply_override(j, o);
  j["output_dir"] = dir.string();
  return to_json(run_config_from_json(j));
}

// Trains into dir unless a finished run with the same config is already there.
bool train_or_reuse(const std::string& config_path, const std::vector<std::string>& overrides, const fs::path& dir,
                    bool retrain, std::string& note) {
  // Compare in serialized form, ignoring where the run was written.
  Json want = Json::parse(resolved_config(config_path, overrides, dir).dump());
  want.erase("output_dir");
  if (!retrain && fs::exists(dir / "final.mmoe") && fs::exists(dir / "run_meta.json")) {
    Json have = read_json_file((dir / "run_meta.json").string());
    Json stored = have.value("config", Json::object());
    if (stored.is_object()) stored.erase("output_dir");
    if (stored == want && have.value("artifact_version", "") == cli::kArtifactVersion) {
      note += dir.filename().string() + " reused; ";
      return true;
    }
  }
  const auto t0 = Clock::now();
  cli::TrainArgs args;
  args.config_path = config_path;
  args.overrides = overrides;
  args.output_dir = dir.string();
  args.quiet = true;
  std::ostringstream sink;
  const int rc = cli::cmd_train(args, sink, sink);
  note += dir.filename().string() + " trained in " + fmt(seconds_since(t0), 0) + " s; ";
  return rc == cli::kExitOk;
}

Outcome trend(const std::string& config_path, const fs::path& work, bool retrain, TrendRun& run) {
  std::string note;
  try {
    if (!train_or_reuse(config_path, {}, work / "fixed", retrain, note) ||
        !train_or_reuse(config_path, {"train.strategy.kind=mmoe_layer"}, work / "mmoe", retrain, note)) {
      run.error = "training failed";
      return {false, note + run.error};
    }
    run.fixed = load_checkpoint(work / "fixed" / "final.mmoe");
    run.mmoe = load_checkpoint(work / "mmoe" / "final.mmoe");
  } catch (const std::exception& e) {
    run.error = e.what();
    return {false, note + run.error};
  }
  run.task = *run.fixed->meta.task;
  run.seq_len = *run.fixed->meta.seq_len;
  const auto eval = make_eval_set(run.task, 0, 256, run.seq_len);
  const auto patterns = parse_sweep_range("1..4");
  const auto f = sweep(run.fixed->model, patterns, eval), m = sweep(run.mmoe->model, patterns, eval);
  std::ofstream(work / "fixed" / "eval.csv") << eval_csv(f);
  std::ofstream(work / "mmoe" / "eval.csv") << eval_csv(m);

  const bool i = f[0].loss > 1.1 * f[3].loss;
  const bool ii = m[0].loss < f[0].loss;
  const bool iii = m[3].loss <= 1.05 * f[3].loss;
  auto mark = [](bool ok) { return ok ? "ok" : "no"; };
  return {i && ii && iii, note + "fixed k1/k4 " + fmt(f[0].loss) + "/" + fmt(f[3].loss) + ", mmoe k1/k4 " +
                              fmt(m[0].loss) + "/" + fmt(m[3].loss) + " [i " + mark(i) + ", ii " + mark(ii) + ", iii " +
                              mark(iii) + "]"};
}

Outcome routing_trend(TrendRun& run, const fs::path& work) {
  if (!run.fixed || !run.mmoe) return {false, "no trained models: " + run.error};
  const std::size_t tokens = 8192;
  const std::size_t num_seq = (tokens + run.seq_len - 1) / run.seq_len;
  const auto inputs = make_eval_set(run.task, 0, num_seq, run.seq_len);
  auto column = [&](Model& model, const char* name) {
    const std::size_t L = model.config.num_layers;
    const auto large = capture_trace(model, inputs, flat_schedule(L, 4));
    const auto small = capture_trace(model, inputs, flat_schedule(L, 1));
    const auto h = heatmap(large, {small}, {1}, 4);
    std::ofstream(work / name / "spearman.csv") << heatmap_csv(h);
    return h.column_mean(0);
  };
  const double f = column(run.fixed->model, "fixed"), m = column(run.mmoe->model, "mmoe");
  return {m - f >= 0.1, "mean focused spearman at k_small=1: mmoe " + fmt(m) + ", fixed " + fmt(f) + ", diff " + fmt(m - f)};
}

Outcome specialization(const TrendRun& run) {
  if (!run.fixed || !run.mmoe) return {false, "no trained models: " + run.error};
  const auto f = mods_profile(run.fixed->model), m = mods_profile(run.mmoe->model);
  int lower = 0;
  std::string cells;
  for (std::size_t l = 0; l < f.size(); ++l) {
    lower += m[l] < f[l] ? 1 : 0;
    cells += (l ? ", " : "") + fmt(m[l], 3) + "/" + fmt(f[l], 3);
  }
  return {lower >= 3, "mmoe lower on " + std::to_string(lower) + " of " + std::to_string(f.size()) +
                          " layers (mmoe/fixed: " + cells + ")"};
}

Outcome layerwise(TrendRun& run, const fs::path& work) {
  if (!run.mmoe) return {false, "no trained model: " + run.error};
  const auto eval = make_eval_set(run.task, 0, 256, run.seq_len);
  const std::vector<ActivationPattern> pats{ActivationPattern::parse("2-2-2-2"), ActivationPattern::parse("3-3-2-2"),
                                            ActivationPattern::parse("1-1-2-2")};
  const auto reports = sweep(run.mmoe->model, pats, eval);
  const std::string csv = eval_csv(reports);
  std::ofstream(work / "mmoe" / "patterns.csv") << csv;

  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  bool ok = line == "pattern,avg_k,loss,perplexity,accuracy,tokens";
  const std::vector<std::string> avg{"2.000000", "2.500000", "1.500000"};
  const std::vector<double> exact{2.0, 2.5, 1.5};
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    ok = ok && rows < 3 && fields.size() == 6 && fields[0] == pats[rows].str() && fields[1] == avg[rows] &&
         reports[rows].avg_k == exact[rows] && std::isfinite(std::stod(fields[2]));
    ++rows;
  }
  ok = ok && rows == 3;
  const double back = evaluate_pattern(run.mmoe->model, ActivationPattern::parse("2-2-3-3"), eval).loss;
  const double front = reports[1].loss;
  return {ok, std::string("csv ") + (ok ? "well formed" : "malformed") + ", avg_k 2.0/2.5/1.5; front-loaded 3-3-2-2 " +
                  fmt(front) + " vs back-loaded 2-2-3-3 " + fmt(back) + " (" +
                  (front < back ? "front better" : "back better") + ", informational)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work_dir = "acceptance_runs";
  std::string config = MMOE_TREND_CONFIG;
  std::vector<int> expect_fail;
  bool retrain = false;
  app.add_option("--work-dir", work_dir);
  app.add_option("--config", config, "training config for criteria 8-11")->check(CLI::ExistingFile);
  app.add_option("--expect-fail", expect_fail, "criteria reported but not counted in the exit status");
  app.add_flag("--retrain", retrain, "ignore cached runs");
  CLI11_PARSE(app, argc, argv);

  const fs::path work = work_dir;
  fs::create_directories(work);
  TrendRun run;
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, routing_math},
      {2, top_p},
      {3, samplers},
      {4, budget},
      {5, metrics},
      {6, gradients},
      {7, [&] { return checkpoint_round_trip(work / "roundtrip"); }},
      {8, [&] { return trend(config, work, retrain, run); }},
      {9, [&] { return routing_trend(run, work); }},
      {10, [&] { return specialization(run); }},
      {11, [&] { return layerwise(run, work); }},
  };
  // Runtime limits in seconds; criterion 8 has only an expected duration.
  const std::vector<double> limit{1, 1, 5, 2, 5, 30, 5, 0, 300, 1, 0};

  int unexpected = 0;
  std::ofstream report(work / "acceptance.txt");
  for (const auto& [id, fn] : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const double lim = limit[static_cast<std::size_t>(id - 1)];
    if (lim > 0 && secs >= lim) {
      o.pass = false;
      o.detail += "; over the " + fmt(lim, 0) + " s limit";
    }
    const bool expected = std::find(expect_fail.begin(), expect_fail.end(), id) != expect_fail.end();
    if (!o.pass && !expected) ++unexpected;
    std::string line = "criterion " + std::to_string(id) + ": " + (o.pass ? "PASS" : "FAIL") + " " + o.detail + " (" +
                       fmt(secs, 2) + " s)";
    if (!o.pass && expected) line += " [known failure]";
    std::cout << line << std::endl;
    report << line << "\n";
  }
  return unexpected == 0 ? 0 : 1;
}
