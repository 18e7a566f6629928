#include "mmoe/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mmoe/analysis.hpp"
#include "mmoe/checkpoint.hpp"
#include "mmoe/config.hpp"
#include "mmoe/eval.hpp"
#include "mmoe/ops.hpp"
#include "mmoe/trainer.hpp"

namespace fs = std::filesystem;

namespace mmoe::cli {
namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_meta(const fs::path& dir, const Json& meta) { write_text(dir / "run_meta.json", meta.dump(2) + "\n"); }

Json base_meta(const std::string& command) {
  Json m;
  m["artifact_version"] = kArtifactVersion;
  m["command"] = command;
  return m;
}

Json checkpoint_meta(const fs::path& path, const CheckpointMeta& meta) {
  Json j;
  j["file"] = path.filename().string();
  j["fnv1a64"] = hex64(fnv1a_file(path));
  j["strategy"] = to_json(meta.strategy);
  j["step"] = meta.step;
  return j;
}

SyntheticTask resolve_task(const std::optional<std::string>& task_config, const CheckpointMeta& meta) {
  if (task_config) {
    SyntheticTask t = task_from_json(read_json_file(*task_config));
    t.validate();
    return t;
  }
  if (!meta.task) throw ConfigError("checkpoint carries no task; pass --task-config");
  return *meta.task;
}

std::size_t resolve_seq_len(const std::optional<std::size_t>& flag, const CheckpointMeta& meta, const Model& model) {
  std::size_t s = flag ? *flag : meta.seq_len.value_or(model.config.max_seq_len);
  if (s == 0 || s > model.config.max_seq_len) {
    throw ConfigError("seq_len " + std::to_string(s) + " outside [1, " + std::to_string(model.config.max_seq_len) + "]");
  }
  return s;
}

void check_k(int k, const Model& model, const char* what) {
  if (k < 1 || k > static_cast<int>(model.config.num_experts)) {
    throw ConfigError(std::string(what) + " " + std::to_string(k) + " outside [1, " +
                      std::to_string(model.config.num_experts) + "]");
  }
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// Keeps the first `tokens` positions of every layer.
LogitTrace truncate_trace(const LogitTrace& t, std::size_t tokens) {
  if (tokens >= t.num_tokens) return t;
  LogitTrace out;
  out.num_layers = t.num_layers;
  out.num_tokens = tokens;
  out.num_experts = t.num_experts;
  out.schedule = t.schedule;
  out.logits.reserve(t.num_layers * tokens * t.num_experts);
  for (std::size_t l = 0; l < t.num_layers; ++l) {
    auto first = t.logits.begin() + static_cast<std::ptrdiff_t>(l * t.num_tokens * t.num_experts);
    out.logits.insert(out.logits.end(), first, first + static_cast<std::ptrdiff_t>(tokens * t.num_experts));
  }
  return out;
}

}  // namespace

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream&) {
  Json j = args.config_path.empty() ? Json::object() : read_json_file(args.config_path);
  for (const auto& o : args.overrides) apply_override(j, o);
  if (args.output_dir) j["output_dir"] = *args.output_dir;
  RunConfig cfg = run_config_from_json(j);
  cfg.validate();

  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  Json meta = base_meta("train");
  meta["seed"] = cfg.train.seed;
  meta["overrides"] = args.overrides;
  meta["config"] = to_json(cfg);
  write_meta(dir, meta);

  Rng init = derive_rng(cfg.train.seed, "init");
  Model model = build_model<float>(cfg.model, init);
  Trainer trainer(model, cfg.train, cfg.task);
  const std::int64_t total = trainer.config().total_steps();

  std::ofstream log(dir / "train_log.csv", std::ios::binary | std::ios::trunc);
  log << "step,tokens,loss,lr,mean_k\n";
  CheckpointMeta cmeta{cfg.train.strategy, 0, cfg.task, cfg.train.seq_len};
  const std::int64_t every = std::max<std::int64_t>(1, total / 20);
  while (!trainer.done()) {
    StepReport r = trainer.step();
    log << r.step << ',' << trainer.state().tokens << ',' << fmt6(r.loss) << ',' << fmt6(r.lr) << ',' << fmt6(r.mean_k) << '\n';
    if (!args.quiet && (r.step % every == 0 || r.step == total)) {
      out << "step " << r.step << "/" << total << " loss " << fmt6(r.loss) << " mean_k " << fmt6(r.mean_k) << "\n";
    }
    if (cfg.checkpoint_interval > 0 && r.step % cfg.checkpoint_interval == 0 && r.step != total) {
      cmeta.step = r.step;
      save_checkpoint(model, cmeta, dir / ("step_" + std::to_string(r.step) + ".mmoe"));
    }
  }
  log.close();
  cmeta.step = trainer.state().step;
  save_checkpoint(model, cmeta, dir / "final.mmoe");
  if (!args.quiet) out << "wrote " << (dir / "final.mmoe").string() << "\n";
  return kExitOk;
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream&) {
  LoadedCheckpoint ck = load_checkpoint(args.checkpoint);
  const SyntheticTask task = resolve_task(args.task_config, ck.meta);
  const std::size_t seq_len = resolve_seq_len(args.seq_len, ck.meta, ck.model);
  if (args.sequences == 0) throw ConfigError("--sequences must be positive");

  std::vector<ActivationPattern> patterns;
  if (args.k) patterns.push_back(ActivationPattern::flat(*args.k));
  for (const auto& p : args.patterns) patterns.push_back(ActivationPattern::parse(p));
  if (args.sweep) {
    auto s = parse_sweep_range(*args.sweep);
    patterns.insert(patterns.end(), s.begin(), s.end());
  }
  if (patterns.empty()) throw ConfigError("eval needs --k, --pattern or --sweep");
  for (const auto& p : patterns) {
    for (int k : p.group_ks) check_k(k, ck.model, "pattern k");
    expand_pattern(p, ck.model.config.num_layers);
  }
  if (task.vocab_size() > static_cast<int>(ck.model.config.vocab_size)) {
    throw ConfigError("task vocabulary exceeds the checkpoint's vocab_size");
  }

  const fs::path dir = args.output_dir;
  fs::create_directories(dir);
  Json meta = base_meta("eval");
  meta["seed"] = args.seed;
  meta["checkpoint"] = checkpoint_meta(args.checkpoint, ck.meta);
  meta["task"] = to_json(task);
  meta["seq_len"] = seq_len;
  meta["sequences"] = args.sequences;
  Json pj = Json::array();
  for (const auto& p : patterns) pj.push_back(p.str());
  meta["patterns"] = pj;
  write_meta(dir, meta);

  SequenceBatch eval = make_eval_set(task, args.seed, args.sequences, seq_len);
  std::string csv = eval_csv(sweep(ck.model, patterns, eval));
  write_text(dir / "eval.csv", csv);
  out << csv;
  return kExitOk;
}

int cmd_analyze_spearman(const SpearmanArgs& args, std::ostream& out, std::ostream&) {
  LoadedCheckpoint ck = load_checkpoint(args.checkpoint);
  const SyntheticTask task = resolve_task(args.task_config, ck.meta);
  const std::size_t seq_len = resolve_seq_len(args.seq_len, ck.meta, ck.model);
  int k_large = args.k_large.value_or(ck.meta.strategy.randomized() ? ck.meta.strategy.k_max : 6);
  check_k(k_large, ck.model, "k_large");
  if (k_large < 2) throw ConfigError("k_large must be at least 2");
  if (args.tokens == 0) throw ConfigError("--tokens must be positive");

  const fs::path dir = args.output_dir;
  fs::create_directories(dir);
  Json meta = base_meta("analyze spearman");
  meta["seed"] = args.seed;
  meta["checkpoint"] = checkpoint_meta(args.checkpoint, ck.meta);
  meta["task"] = to_json(task);
  meta["seq_len"] = seq_len;
  meta["tokens"] = args.tokens;
  meta["k_large"] = k_large;
  write_meta(dir, meta);

  const std::size_t L = ck.model.config.num_layers;
  const std::size_t num_seq = (args.tokens + seq_len - 1) / seq_len;
  SequenceBatch inputs = make_eval_set(task, args.seed, num_seq, seq_len);
  LogitTrace large = truncate_trace(capture_trace(ck.model, inputs, flat_schedule(L, k_large)), args.tokens);
  std::vector<int> ks;
  std::vector<LogitTrace> smalls;
  for (int k = 1; k < k_large; ++k) {
    ks.push_back(k);
    smalls.push_back(truncate_trace(capture_trace(ck.model, inputs, flat_schedule(L, k)), args.tokens));
  }
  if (args.save_traces) {
    save_trace(large, dir / ("trace_k" + std::to_string(k_large) + ".mmoe"));
    for (std::size_t i = 0; i < ks.size(); ++i) save_trace(smalls[i], dir / ("trace_k" + std::to_string(ks[i]) + ".mmoe"));
  }
  CorrelationHeatmap h = heatmap(large, smalls, ks, k_large);
  std::string csv = heatmap_csv(h);
  write_text(dir / "spearman.csv", csv);
  out << csv;
  for (std::size_t c = 0; c < ks.size(); ++c) {
    std::int64_t ex = 0;
    for (const auto& row : h.excluded) ex += row[c];
    if (ex > 0) out << "k_small " << ks[c] << ": " << ex << " undefined correlations excluded\n";
  }
  return kExitOk;
}

int cmd_analyze_mods(const ModsArgs& args, std::ostream& out, std::ostream&) {
  LoadedCheckpoint ck = load_checkpoint(args.checkpoint);
  std::vector<double> profile = mods_profile(ck.model);

  const fs::path dir = args.output_dir;
  fs::create_directories(dir);
  Json meta = base_meta("analyze mods");
  meta["checkpoint"] = checkpoint_meta(args.checkpoint, ck.meta);
  write_meta(dir, meta);

  std::string csv = mods_csv(profile);
  write_text(dir / "mods.csv", csv);
  out << csv;
  return kExitOk;
}

int cmd_gen_data(const GenDataArgs& args, std::ostream& out, std::ostream&) {
  Json j = args.config_path.empty() ? Json::object() : read_json_file(args.config_path);
  Json tj = j.contains("task") ? j.at("task") : Json::object();
  for (const auto& o : args.overrides) apply_override(tj, o);
  SyntheticTask task = task_from_json(tj);
  task.validate();
  if (args.tokens == 0) throw ConfigError("--tokens must be positive");

  const fs::path dir = args.output_dir;
  fs::create_directories(dir);
  Json meta = base_meta("gen-data");
  meta["seed"] = args.seed;
  meta["overrides"] = args.overrides;
  meta["task"] = to_json(task);
  meta["tokens"] = args.tokens;
  write_meta(dir, meta);

  Rng rng = derive_rng(args.seed, task.train_stream);
  TokenStream s = generate_synthetic(task, args.tokens, rng);
  std::ostringstream csv;
  csv << "position,token,text,answer\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::string name = task.token_name(s.tokens[i]);
    bool quote = name.find_first_of(",\"\n\r") != std::string::npos;
    if (quote) {
      std::string q = "\"";
      for (char c : name) q += (c == '"') ? std::string("\"\"") : std::string(1, c);
      name = q + "\"";
    }
    csv << i << ',' << s.tokens[i] << ',' << name << ',' << int(s.answer[i]) << '\n';
  }
  write_text(dir / "tokens.csv", csv.str());
  out << "wrote " << s.size() << " tokens to " << (dir / "tokens.csv").string() << "\n";
  return kExitOk;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Matryoshka MoE toy framework"};
  app.require_subcommand(1);

  TrainArgs ta;
  std::optional<std::string> strategy, tau, p, budget, seed, tokens, k, k_min, k_max;
  std::vector<std::string> sets;
  auto* train = app.add_subcommand("train", "train a model from a JSON config");
  train->add_option("--config", ta.config_path, "JSON run config")->check(CLI::ExistingFile);
  train->add_option("--set", sets, "dotted-path override, e.g. train.seq_len=48")->take_all();
  train->add_option("--strategy", strategy, "fixed_topk | top_p | mmoe_global_batch | mmoe_micro_batch | mmoe_layer");
  train->add_option("--k", k, "expert count for fixed_topk");
  train->add_option("--k-min", k_min);
  train->add_option("--k-max", k_max);
  train->add_option("--tau", tau, "capacity-aware sampling temperature");
  train->add_option("--p", p, "Top-p threshold");
  train->add_option("--budget", budget, "mean experts per layer cap");
  train->add_option("--seed", seed);
  train->add_option("--tokens", tokens, "total training tokens");
  train->add_option("--output-dir", ta.output_dir);
  train->add_flag("--quiet", ta.quiet);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint under flat k or layer-group patterns");
  eval->add_option("checkpoint", ea.checkpoint)->required();
  eval->add_option("--k", ea.k);
  eval->add_option("--pattern", ea.patterns, "hyphen-joined group ks, e.g. 3-3-2-2");
  eval->add_option("--sweep", ea.sweep, "flat k range lo..hi");
  eval->add_option("--sequences", ea.sequences);
  eval->add_option("--seq-len", ea.seq_len);
  eval->add_option("--task-config", ea.task_config, "JSON task section");
  eval->add_option("--seed", ea.seed);
  eval->add_option("--output-dir", ea.output_dir);

  auto* analyze = app.add_subcommand("analyze", "router diagnostics");
  analyze->require_subcommand(1);
  SpearmanArgs sa;
  auto* sp = analyze->add_subcommand("spearman", "focused Spearman heatmap");
  sp->add_option("checkpoint", sa.checkpoint)->required();
  sp->add_option("--k-large", sa.k_large);
  sp->add_flag("--save-traces", sa.save_traces, "also write the raw router logits (trace_k<K>.mmoe)");
  sp->add_option("--tokens", sa.tokens);
  sp->add_option("--seq-len", sa.seq_len);
  sp->add_option("--task-config", sa.task_config);
  sp->add_option("--seed", sa.seed);
  sp->add_option("--output-dir", sa.output_dir);
  ModsArgs ma;
  auto* md = analyze->add_subcommand("mods", "mean off-diagonal similarity of gating vectors");
  md->add_option("checkpoint", ma.checkpoint)->required();
  md->add_option("--output-dir", ma.output_dir);

  GenDataArgs ga;
  auto* gen = app.add_subcommand("gen-data", "dump a synthetic token stream");
  gen->add_option("--config", ga.config_path)->check(CLI::ExistingFile);
  gen->add_option("--set", ga.overrides, "task override, e.g. modulus=11")->take_all();
  gen->add_option("--tokens", ga.tokens);
  gen->add_option("--seed", ga.seed);
  gen->add_option("--output-dir", ga.output_dir);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) {
      auto add = [&](const char* path, const std::optional<std::string>& v) {
        if (v) ta.overrides.push_back(std::string(path) + "=" + *v);
      };
      add("train.strategy.kind", strategy);
      add("train.strategy.k_fixed", k);
      add("train.strategy.k_min", k_min);
      add("train.strategy.k_max", k_max);
      add("train.strategy.tau", tau);
      add("train.strategy.p", p);
      add("train.strategy.budget_avg", budget);
      add("train.seed", seed);
      add("train.tokens_total", tokens);
      ta.overrides.insert(ta.overrides.end(), sets.begin(), sets.end());
      return cmd_train(ta, out, err);
    }
    if (*eval) return cmd_eval(ea, out, err);
    if (*sp) return cmd_analyze_spearman(sa, out, err);
    if (*md) return cmd_analyze_mods(ma, out, err);
    if (*gen) return cmd_gen_data(ga, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace mmoe::cli
