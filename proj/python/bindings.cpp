#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "mmoe/analysis.hpp"
#include "mmoe/checkpoint.hpp"
#include "mmoe/cli.hpp"
#include "mmoe/config.hpp"
#include "mmoe/eval.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/scheduler.hpp"

namespace py = pybind11;
using namespace mmoe;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

TensorD to_tensor(const DoubleArray& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return TensorD({rows, cols}, std::vector<double>(a.data(), a.data() + rows * cols));
}

py::tuple selection_to_py(const ExpertSelection& sel) {
  py::list idx, w;
  for (std::size_t t = 0; t < sel.num_tokens(); ++t) {
    auto i = sel.indices(t);
    auto ws = sel.token_weights(t);
    idx.append(std::vector<std::uint32_t>(i.begin(), i.end()));
    w.append(std::vector<double>(ws.begin(), ws.end()));
  }
  return py::make_tuple(idx, w);
}

py::dict report_to_py(const EvalReport& r) {
  py::dict d;
  d["pattern"] = r.pattern;
  d["per_layer_k"] = r.per_layer_k;
  d["avg_k"] = r.avg_k;
  d["loss"] = r.loss;
  d["perplexity"] = r.perplexity;
  d["accuracy"] = r.accuracy;
  d["tokens"] = r.tokens;
  return d;
}

}  // namespace

PYBIND11_MODULE(_mmoe, m) {
  m.doc() = "Matryoshka mixture-of-experts toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"mmoe"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int rc;
        {
          py::gil_scoped_release release;
          rc = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(rc, out.str(), err.str());
      },
      py::arg("args"), "Run an mmoe subcommand; returns (exit_code, stdout, stderr).");

  m.def(
      "select_topk", [](const DoubleArray& scores, int k) { return selection_to_py(select_topk(to_tensor(scores), k)); },
      py::arg("scores"), py::arg("k"), "Per-row (indices, renormalized weights) of the k highest scores.");
  m.def(
      "select_topp", [](const DoubleArray& scores, double p) { return selection_to_py(select_topp(to_tensor(scores), p)); },
      py::arg("scores"), py::arg("p"));

  m.def("spearman_rank", [](const std::vector<double>& a, const std::vector<double>& b) { return spearman_rank(a, b); },
        py::arg("a"), py::arg("b"));
  m.def(
      "focused_spearman",
      [](const std::vector<float>& large, const std::vector<float>& small, int k_large, int k_small) {
        return focused_spearman(large, small, k_large, k_small);
      },
      py::arg("logits_large"), py::arg("logits_small"), py::arg("k_large"), py::arg("k_small"));
  m.def(
      "mods",
      [](const FloatArray& w) {
        if (w.ndim() != 2) throw ShapeError("mods: expected a 2-d array");
        const auto rows = static_cast<std::size_t>(w.shape(0)), cols = static_cast<std::size_t>(w.shape(1));
        return mods(Tensor({rows, cols}, std::vector<float>(w.data(), w.data() + rows * cols)));
      },
      py::arg("gate_weights"));

  m.def("weighted_k_probabilities", &weighted_k_probabilities, py::arg("k_min"), py::arg("k_max"), py::arg("tau"));
  m.def(
      "enforce_budget",
      [](const std::vector<int>& ks, double budget_avg, int k_min, int k_max, std::uint64_t seed) {
        KSchedule s;
        s.per_layer_k = ks;
        Rng rng(seed);
        return enforce_budget(s, budget_avg, k_min, k_max, rng).per_layer_k;
      },
      py::arg("per_layer_k"), py::arg("budget_avg"), py::arg("k_min"), py::arg("k_max"), py::arg("seed") = 0);

  py::class_<LoadedCheckpoint>(m, "Checkpoint")
      .def_static(
          "load", [](const std::string& path) { return load_checkpoint(path); }, py::arg("path"))
      .def_property_readonly("step", [](const LoadedCheckpoint& c) { return c.meta.step; })
      .def_property_readonly("strategy", [](const LoadedCheckpoint& c) { return to_string(c.meta.strategy.kind); })
      .def_property_readonly("num_layers", [](const LoadedCheckpoint& c) { return c.model.config.num_layers; })
      .def_property_readonly("num_experts", [](const LoadedCheckpoint& c) { return c.model.config.num_experts; })
      .def_property_readonly("model_config", [](const LoadedCheckpoint& c) { return to_json(c.model.config).dump(); })
      .def(
          "evaluate",
          [](LoadedCheckpoint& c, const std::string& pattern, std::size_t sequences, std::uint64_t seed) {
            const SyntheticTask task = c.meta.task.value_or(SyntheticTask{});
            const std::size_t seq_len = c.meta.seq_len.value_or(c.model.config.max_seq_len);
            const auto eval = make_eval_set(task, seed, sequences, seq_len);
            return report_to_py(evaluate_pattern(c.model, ActivationPattern::parse(pattern), eval));
          },
          py::arg("pattern"), py::arg("sequences") = 64, py::arg("seed") = 0)
      .def("mods_profile", [](const LoadedCheckpoint& c) { return mods_profile(c.model); });
}
