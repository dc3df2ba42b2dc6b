#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "gpelab/cli.hpp"
#include "gpelab/encodings.hpp"
#include "gpelab/gpe.hpp"
#include "gpelab/property_lab.hpp"

namespace py = pybind11;
using namespace gpelab;

namespace {

using Vec = std::vector<double>;
using nlohmann::json;

// Python dict <-> json through the json module keeps the binding small.
json to_json(const py::object& obj) {
  if (obj.is_none()) return json::object();
  const auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
  return json::parse(text);
}

py::object from_json(const json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

py::dict record_dict(const lm::EvalRecord& r) {
  py::dict d;
  d["encoding"] = r.encoding;
  d["train_context"] = r.train_context;
  d["prompt_length"] = r.prompt_length;
  d["perplexity"] = r.perplexity;
  d["mean_attention_entropy"] = r.mean_attention_entropy;
  d["n_eval_tokens"] = r.n_eval_tokens;
  d["warning"] = r.warning;
  return d;
}

py::list records_list(const std::vector<lm::EvalRecord>& rs) {
  py::list out;
  for (const auto& r : rs) out.append(record_dict(r));
  return out;
}

lm::EvalOptions eval_options(const py::object& obj) {
  lm::EvalOptions o;
  const json j = to_json(obj);
  if (j.contains("prompt_lengths")) o.prompt_lengths = j["prompt_lengths"].get<std::vector<int>>();
  if (j.contains("seed")) o.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("token_budget")) o.token_budget = j["token_budget"].get<std::int64_t>();
  if (j.contains("entropy_tail")) o.entropy_tail = j["entropy_tail"].get<double>();
  return o;
}

cli::DataConfig data_config(const std::string& corpus, double val_fraction) {
  cli::DataConfig d;
  d.corpus = corpus;
  d.val_fraction = val_fraction;
  return d;
}

py::dict report_dict(const lab::PropertyReport& r) {
  py::dict d;
  d["encoding"] = r.encoding;
  d["dimension"] = r.dimension;
  d["convergence"] = lab::to_string(r.convergence);
  d["entropy"] = lab::to_string(r.entropy);
  py::list norm, ent;
  for (const auto& e : r.normalization.entries) norm.append(py::make_tuple(e.length, e.log_z));
  for (const auto& e : r.entropy_curve.entries) ent.append(py::make_tuple(e.length, e.entropy));
  d["normalization"] = norm;
  d["entropy_curve"] = ent;
  d["ldcp_range"] = r.ldcp.range;
  d["ldcp_unbounded_within_scan"] = r.ldcp.unbounded_within_scan;
  d["gps"] = r.gps;
  d["notes"] = r.notes;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Generalized positional encoding lab (C++ core)";
  m.attr("__version__") = cli::kVersion;

  py::register_exception<cli::UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<lm::CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

  // ---- encodings ----
  py::class_<RopeEncoding>(m, "Rope")
      .def(py::init([](double base) { return RopeEncoding{base}; }), py::arg("base") = 10000.0)
      .def_readwrite("base", &RopeEncoding::base);
  py::class_<AlibiEncoding>(m, "Alibi")
      .def(py::init([](double slope) { return AlibiEncoding{slope}; }), py::arg("slope") = 0.5)
      .def_readwrite("slope", &AlibiEncoding::slope);
  py::class_<ApeEncoding>(m, "Ape")
      .def(py::init(&make_ape), py::arg("lam") = 0.1, py::arg("delta") = 0.5,
           py::arg("beta") = 0.1, py::arg("gamma") = 0.1, py::arg("d") = 64,
           py::arg("base") = 10000.0)
      .def_property_readonly("lam", [](const ApeEncoding& e) { return e.params.lambda; })
      .def_property_readonly("delta", [](const ApeEncoding& e) { return e.params.delta; })
      .def_property_readonly("beta", [](const ApeEncoding& e) { return e.params.beta; })
      .def_property_readonly("gamma", [](const ApeEncoding& e) { return e.params.gamma; })
      .def_property_readonly("alpha", [](const ApeEncoding& e) { return e.params.alpha; });
  py::class_<CustomGpe>(m, "Custom")
      .def(py::init([](std::string name, std::function<double(RelPosition)> gain,
                       std::function<double(RelPosition)> bias) {
             CustomGpe g;
             g.name = std::move(name);
             g.gain = std::move(gain);
             g.bias = std::move(bias);
             return g;
           }),
           py::arg("name"), py::arg("gain"), py::arg("bias"),
           "Identity transform with Python gain f(n) and bias b(n).");
  m.def("identity", &identity_encoding);
  m.def("encoding_name", &encoding_name);
  m.def("alibi_slopes", &alibi_slopes, py::arg("num_heads"));
  m.def("rope_angles", &rope_angles, py::arg("d"), py::arg("base"), py::arg("n"));

  m.def(
      "gpe_score",
      [](const Vec& q, const Vec& k, RelPosition n, const Encoding& enc) {
        const auto s = gpe_score(q, k, n, enc);
        return py::make_tuple(s.total, s.multiplicative, s.bias);
      },
      py::arg("q"), py::arg("k"), py::arg("n"), py::arg("encoding"),
      "Returns (total, multiplicative, bias).");

  // ---- property lab ----
  m.def("default_grid", &lab::default_grid);
  m.def("sample_unit_vector", &lab::sample_unit_vector, py::arg("d"), py::arg("seed"),
        py::arg("index") = 0);
  m.def(
      "partial_normalization",
      [](const Vec& q, const Vec& k, const Encoding& enc, std::int64_t max_len) {
        const auto z = lab::partial_normalization(q, k, enc, max_len);
        return py::make_tuple(z.log_z, z.z ? py::cast(*z.z) : py::none());
      },
      py::arg("q"), py::arg("k"), py::arg("encoding"), py::arg("max_len"),
      "Returns (log Z_L, Z_L or None when it overflows).");
  m.def(
      "classify_convergence",
      [](const Vec& q, const Vec& k, const Encoding& enc, const std::vector<std::int64_t>& grid) {
        return lab::to_string(lab::classify_convergence(q, k, enc, grid));
      },
      py::arg("q"), py::arg("k"), py::arg("encoding"), py::arg("grid") = lab::default_grid());
  m.def(
      "truncated_entropy",
      [](const Vec& q, const Vec& k, const Encoding& enc, std::int64_t max_len) {
        return lab::truncated_entropy(q, k, enc, max_len);
      },
      py::arg("q"), py::arg("k"), py::arg("encoding"), py::arg("max_len"));
  m.def(
      "entropy_curve",
      [](const Vec& q, const Vec& k, const Encoding& enc, const std::vector<std::int64_t>& grid) {
        std::vector<std::pair<std::int64_t, double>> out;
        for (const auto& e : lab::entropy_curve(q, k, enc, grid).entries) {
          out.emplace_back(e.length, e.entropy);
        }
        return out;
      },
      py::arg("q"), py::arg("k"), py::arg("encoding"), py::arg("grid") = lab::default_grid());
  m.def(
      "mc_score_moments",
      [](const Encoding& enc, RelPosition n, int d, std::int64_t samples, std::uint64_t seed,
         const std::string& component) {
        lab::ScoreComponent c = lab::ScoreComponent::kTotal;
        if (component == "multiplicative") {
          c = lab::ScoreComponent::kMultiplicative;
        } else if (component == "bias") {
          c = lab::ScoreComponent::kBias;
        } else if (component != "total") {
          throw std::invalid_argument("component must be total, multiplicative or bias");
        }
        const auto mm = lab::mc_score_moments(enc, n, d, samples, seed, c);
        return py::make_tuple(mm.mean, mm.variance);
      },
      py::arg("encoding"), py::arg("n"), py::arg("d"), py::arg("samples"), py::arg("seed"),
      py::arg("component") = "total", "Returns (mean, unbiased variance).");
  m.def(
      "ldcp_range",
      [](const Encoding& enc, double c1, std::int64_t n_max) {
        const auto r = lab::ldcp_range(enc, c1, n_max);
        return py::make_tuple(r.range, r.unbounded_within_scan);
      },
      py::arg("encoding"), py::arg("c1"), py::arg("n_max") = 16384);
  m.def("grad_q", &lab::grad_q_analytic, py::arg("q"), py::arg("k"), py::arg("n"),
        py::arg("encoding"));
  m.def(
      "grad_check",
      [](const Vec& q, const Vec& k, RelPosition n, const Encoding& enc, double h) {
        return lab::grad_check(q, k, n, enc, h);
      },
      py::arg("q"), py::arg("k"), py::arg("n"), py::arg("encoding"), py::arg("h") = 1e-6);
  m.def(
      "gps_test",
      [](const Vec& q, const Vec& k, const Encoding& enc, RelPosition n1, RelPosition n2) {
        return lab::gps_test(q, k, enc, n1, n2);
      },
      py::arg("q"), py::arg("k"), py::arg("encoding"), py::arg("n1"), py::arg("n2"));
  m.def(
      "property_report",
      [](const Encoding& enc, int d, std::uint64_t seed, std::vector<std::int64_t> grid) {
        lab::ReportOptions o;
        if (!grid.empty()) o.grid = std::move(grid);
        return report_dict(lab::build_property_report(enc, d, seed, o));
      },
      py::arg("encoding"), py::arg("d") = 64, py::arg("seed") = 1234,
      py::arg("grid") = std::vector<std::int64_t>{});

  // ---- commands ----
  m.def(
      "analyze",
      [](const std::string& out, std::vector<std::string> encodings, int d, std::uint64_t seed,
         std::int64_t samples) {
        cli::AnalyzeConfig cfg;
        cfg.out = out;
        cfg.encodings = std::move(encodings);
        cfg.d = d;
        cfg.seed = seed;
        cfg.samples = samples;
        py::list out_reports;
        for (const auto& r : cli::cmd_analyze(cfg)) out_reports.append(report_dict(r));
        return out_reports;
      },
      py::arg("out"), py::arg("encodings") = std::vector<std::string>{"rope", "alibi", "ape"},
      py::arg("d") = 64, py::arg("seed") = 1234, py::arg("samples") = 100000);
  m.def(
      "train",
      [](const std::string& corpus, const std::string& out, const py::object& model,
         const py::object& train, double val_fraction, bool resume) {
        cli::TrainCommand cmd;
        cmd.data = data_config(corpus, val_fraction);
        cmd.model = lm::model_config_from_json(to_json(model));
        cmd.train = lm::train_config_from_json(to_json(train));
        cmd.out = out;
        cmd.resume = resume;
        py::gil_scoped_release release;
        const auto outcome = cli::cmd_train(cmd);
        py::gil_scoped_acquire acquire;
        py::list log;
        for (const auto& r : outcome.log) log.append(py::make_tuple(r.iter, r.loss, r.lr));
        return py::make_tuple(outcome.checkpoint.string(), log);
      },
      py::arg("corpus"), py::arg("out"), py::arg("model") = py::none(),
      py::arg("train") = py::none(), py::arg("val_fraction") = 0.1, py::arg("resume") = false,
      "Trains a model; `model`/`train` are dicts with the checkpoint config keys. Returns "
      "(checkpoint path, [(iter, loss, lr)]).");
  m.def(
      "evaluate",
      [](const std::string& checkpoint, const std::string& corpus, const std::string& out,
         const std::string& split, const py::object& eval, double val_fraction) {
        cli::EvalCommand cmd;
        cmd.checkpoint = checkpoint;
        cmd.data = data_config(corpus, val_fraction);
        cmd.split = cli::parse_eval_split(split);
        cmd.eval = eval_options(eval);
        cmd.out = out;
        return records_list(cli::cmd_eval(cmd));
      },
      py::arg("checkpoint"), py::arg("corpus"), py::arg("out"), py::arg("split") = "val",
      py::arg("eval") = py::none(), py::arg("val_fraction") = 0.1);
  m.def(
      "finetune",
      [](const std::string& checkpoint, const std::string& corpus, const std::string& out,
         const py::object& encoding, double fraction, int iterations,
         std::optional<double> learning_rate, const py::object& eval, double val_fraction) {
        cli::FinetuneCommand cmd;
        cmd.checkpoint = checkpoint;
        cmd.data = data_config(corpus, val_fraction);
        cmd.encoding = lm::encoding_spec_from_json(to_json(encoding));
        cmd.corpus_fraction = fraction;
        cmd.iterations = iterations;
        cmd.learning_rate = learning_rate;
        cmd.eval = eval_options(eval);
        cmd.out = out;
        const auto r = cli::cmd_finetune(cmd);
        return py::make_tuple(records_list(r.before), records_list(r.after),
                              r.checkpoint.string());
      },
      py::arg("checkpoint"), py::arg("corpus"), py::arg("out"), py::arg("encoding") = py::none(),
      py::arg("fraction") = 0.01, py::arg("iterations") = 500,
      py::arg("learning_rate") = py::none(), py::arg("eval") = py::none(),
      py::arg("val_fraction") = 0.1,
      "Swaps the encoding (default APE) and fine-tunes. Returns (before, after, checkpoint).");
  m.def(
      "sweep",
      [](const py::object& spec, const std::string& out) {
        const auto outcome = cli::cmd_sweep(cli::parse_sweep_spec(to_json(spec)), out);
        py::list cells;
        for (const auto& c : outcome.cells) {
          py::dict d;
          d["name"] = c.name;
          d["hash"] = c.hash;
          d["reused"] = c.reused;
          cells.append(d);
        }
        return py::make_tuple(cells, outcome.combined_csv.string());
      },
      py::arg("spec"), py::arg("out"));
  m.def(
      "corpus_report",
      [](const std::string& corpus, const std::string& out) {
        cli::CorpusCommand cmd;
        cmd.data.corpus = corpus;
        cmd.out = out;
        cli::cmd_corpus(cmd);
      },
      py::arg("corpus"), py::arg("out"));
  m.def(
      "read_metadata", [](const std::string& dir) { return from_json(cli::read_metadata(dir)); },
      py::arg("dir"));
}
