#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "mmoe/checkpoint.hpp"
#include "mmoe/data.hpp"
#include "mmoe/eval.hpp"
#include "mmoe/model.hpp"
#include "mmoe/ops.hpp"
#include "mmoe/trainer.hpp"
#include "grad_cases.hpp"

using namespace mmoe;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 16;
  c.d_ff = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.num_experts = 4;
  c.max_seq_len = 16;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.strategy.kind = StrategyKind::mmoe_layer;
  t.strategy.k_min = 1;
  t.strategy.k_max = 3;
  t.optimizer.lr_peak = 3e-3f;
  t.optimizer.warmup_steps = 2;
  t.micro_batch_size = 2;
  t.global_batch_size = 4;
  t.seq_len = 12;
  t.tokens_total = 10 * 4 * 12;
  t.seed = 4;
  return t;
}

}  // namespace

TEST_SUITE("model-trainer") {

TEST_CASE("model structure and parameter count") {
  ModelConfig c = tiny_model();
  c.num_experts = 8;
  c.num_layers = 4;
  Rng rng(0);
  Model m = build_model<float>(c, rng);
  auto layers = m.moe_layers();
  REQUIRE(layers.size() == 4);
  for (auto* l : layers) CHECK(l->num_experts() == 8);

  std::size_t counted = 0;
  for (auto* p : m.parameters()) counted += p->value.numel();
  const std::size_t V = c.vocab_size, d = c.d_model, S = c.max_seq_len, N = c.num_experts, F = c.d_ff;
  const std::size_t per_layer = 2 * d + 4 * d * d + d * N + N * 2 * d * F;
  const std::size_t expect = V * d + S * d + c.num_layers * per_layer + d + d * V;
  CHECK(c.parameter_count() == expect);
  CHECK(counted == expect);

  c.expert_kind = ExpertKind::swiglu;
  CHECK(c.parameter_count() == expect + c.num_layers * N * d * F);
}

TEST_CASE("zero weights give a uniform next-token distribution") {
  Rng rng(1);
  Model m = build_model<float>(tiny_model(), rng);
  for (auto* p : m.parameters()) {
    if (p->decay) std::fill(p->value.vec().begin(), p->value.vec().end(), 0.0f);
  }
  std::vector<std::int32_t> tokens(8, 3), targets(8, 5);
  Tape<float> tape(false);
  auto out = forward(m, tape, tokens, 8, flat_schedule(2, 2));
  CHECK(cross_entropy(out.logits, targets).value().item() == doctest::Approx(std::log(12.0)).epsilon(1e-6));
}

TEST_CASE("config validation") {
  ModelConfig c = tiny_model();
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  TrainConfig t = tiny_train();
  t.global_batch_size = 5;
  CHECK_THROWS_AS(t.validate(tiny_model()), ConfigError);
  t = tiny_train();
  t.strategy.k_max = 5;
  CHECK_THROWS_AS(t.validate(tiny_model()), ConfigError);
  t = tiny_train();
  t.seq_len = 17;
  CHECK_THROWS_AS(t.validate(tiny_model()), ConfigError);
}

TEST_CASE("full model gradient check") { CHECK(mmoe::testing::model_gradient_error() < 1e-3); }

TEST_CASE("top-p forward uses per-token expert counts") {
  Rng rng(4);
  Model m = build_model<float>(tiny_model(), rng);
  std::vector<std::int32_t> tokens(8, 1);
  KSchedule ks;
  ks.top_p = 1.0;
  Tape<float> tape(false);
  auto out = forward(m, tape, tokens, 8, ks);
  for (double k : out.layer_mean_k) CHECK(k == doctest::Approx(4.0));
}

TEST_CASE("training is deterministic and reduces loss") {
  auto run = [] {
    Rng rng(derive_rng(4, "init"));
    Model m = build_model<float>(tiny_model(), rng);
    SyntheticTask task;
    Trainer tr(m, tiny_train(), task);
    std::vector<double> losses;
    while (!tr.done()) losses.push_back(tr.step().loss);
    return std::make_pair(losses, m.parameters()[0]->value.to_vector());
  };
  auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(a.first.size() == 10);
  CHECK(a.first.back() < a.first.front());
}

TEST_CASE("non-finite loss aborts naming the step") {
  Rng rng(5);
  Model m = build_model<float>(tiny_model(), rng);
  m.w_out.value[0] = std::numeric_limits<float>::quiet_NaN();
  Trainer tr(m, tiny_train(), SyntheticTask{});
  try {
    tr.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("token_copy training closes half the gap to the entropy floor") {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 64;
  c.d_ff = 64;
  c.num_layers = 2;
  c.num_heads = 4;
  c.num_experts = 4;
  c.max_seq_len = 32;
  SyntheticTask task;
  task.kind = TaskKind::token_copy;
  task.copy_vocab = 8;
  task.span_min = 2;
  task.span_max = 2;
  TrainConfig t;
  t.strategy.k_fixed = 2;
  t.strategy.k_min = t.strategy.k_max = 2;
  t.optimizer.lr_peak = 3e-3f;
  t.optimizer.warmup_steps = 20;
  t.micro_batch_size = 8;
  t.global_batch_size = 8;
  t.seq_len = 30;
  t.tokens_total = 500 * 8 * 30;
  Rng rng(derive_rng(0, "init"));
  Model m = build_model<float>(c, rng);
  Trainer tr(m, t, task);
  const double initial = tr.step().loss;
  double last = initial;
  std::vector<double> tail;
  while (!tr.done()) {
    last = tr.step().loss;
    tail.push_back(last);
  }
  double recent = 0.0;
  for (std::size_t i = tail.size() - 20; i < tail.size(); ++i) recent += tail[i];
  recent /= 20;
  // Unit of 6 tokens: 2 random symbols (ln 8 each), the rest predictable.
  const double floor = 2.0 * std::log(8.0) / 6.0;
  CHECK(tr.state().step == 500);
  CHECK(initial - recent >= 0.5 * (initial - floor));
  // Reference run: mean of the last 20 steps was 1.396.
  CHECK(recent < 1.396 + 0.05);
}

TEST_CASE("synthetic data") {
  SyntheticTask task;
  Rng a(1), b(1);
  auto s1 = generate_synthetic(task, 1000, a), s2 = generate_synthetic(task, 1000, b);
  CHECK(s1.tokens == s2.tokens);
  CHECK(s1.size() == 1000);
  CHECK(task.vocab_size() == 7 + 3 + 2);

  Rng r(2);
  auto big = generate_synthetic(task, 100000, r);
  std::set<int> seen(big.tokens.begin(), big.tokens.end());
  CHECK(static_cast<int>(seen.size()) == task.vocab_size());
  // Equations are well formed: a op b = c ;
  for (std::size_t i = 0; i + 6 <= 600; i += 6) {
    const int x = s1.tokens[i], y = s1.tokens[i + 2], z = s1.tokens[i + 4];
    const char op = task.ops[static_cast<std::size_t>(s1.tokens[i + 1] - task.modulus)];
    CHECK(apply_mod_op(op, x, y, task.modulus) == z);
    CHECK(s1.answer[i + 4] == 1);
  }
  CHECK(apply_mod_op('-', 2, 5, 7) == 4);

  SyntheticTask copy;
  copy.kind = TaskKind::token_copy;
  Rng cr(3);
  auto cs = generate_synthetic(copy, 5000, cr);
  std::set<int> cseen(cs.tokens.begin(), cs.tokens.end());
  CHECK(static_cast<int>(cseen.size()) == copy.vocab_size());

  SyntheticTask bad;
  bad.modulus = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("char_lm_from_file") {
  const auto path = std::filesystem::temp_directory_path() / "mmoe_char_lm.txt";
  {
    std::ofstream f(path);
    f << "hello world\n";
  }
  SyntheticTask task;
  task.kind = TaskKind::char_lm_from_file;
  task.path = path.string();
  CHECK(task.vocab_size() == 256);
  Rng rng(0);
  auto s = generate_synthetic(task, 30, rng);
  CHECK(s.size() == 30);
  for (std::size_t i = 0; i + 12 < 30; ++i) CHECK(s.tokens[i] == s.tokens[i + 12]);
  CHECK(std::string("hello world\n").find(static_cast<char>(s.tokens[0])) != std::string::npos);
  std::filesystem::remove(path);
  SyntheticTask missing = task;
  missing.path = "/nonexistent/file.txt";
  CHECK_THROWS_AS(SyntheticSource(missing, Rng(0)), ConfigError);
}

TEST_CASE("sequences") {
  SyntheticTask task;
  SyntheticSource src(task, Rng(1));
  auto batch = make_sequences(src, 3, 5);
  CHECK(batch.tokens() == 15);
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t i = 0; i + 1 < 5; ++i) CHECK(batch.targets[s * 5 + i] == batch.inputs[s * 5 + i + 1]);
  }
  auto part = batch.slice(1, 2);
  CHECK(part.num_sequences == 2);
  CHECK(part.inputs[0] == batch.inputs[5]);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(6);
  Model m = build_model<float>(tiny_model(), rng);
  CheckpointMeta meta{tiny_train().strategy, 12, SyntheticTask{}, 12};
  auto bytes = serialize_checkpoint(m, meta);
  REQUIRE(bytes.size() > 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MMOE");
  auto loaded = parse_checkpoint(bytes);
  CHECK(serialize_checkpoint(loaded.model, loaded.meta) == bytes);
  CHECK(loaded.meta.step == 12);
  CHECK(loaded.meta.seq_len == 12u);

  auto eval = make_eval_set(SyntheticTask{}, 0, 4, 12);
  std::vector<int> ks{2, 2};
  CHECK(evaluate(m, ks, eval).loss == evaluate(loaded.model, ks, eval).loss);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(parse_checkpoint(bad), FormatError);
  auto trunc = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 8);
  CHECK_THROWS_AS(parse_checkpoint(trunc), FormatError);
  auto version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(parse_checkpoint(version), FormatError);
}

}  // TEST_SUITE
