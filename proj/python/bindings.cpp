#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "advgrpo/errors.hpp"
#include "advgrpo/harness.hpp"

namespace py = pybind11;
using namespace advgrpo;

namespace {

RunConfig config_from(const std::string& text) { return text.empty() ? RunConfig{} : parse_config(text); }

py::dict breakdown_dict(const AccuracyBreakdown& b) {
  py::dict d;
  d["modality"] = b.modality;
  d["counts"] = b.counts;
  d["overall"] = b.overall;
  return d;
}

py::dict outcome_dict(const AttackOutcome& o) {
  py::dict d;
  d["delta"] = o.delta;
  d["success"] = o.success;
  d["clean_answer"] = o.clean_answer;
  d["attacked_answer"] = o.attacked_answer;
  d["l2"] = o.delta_l2;
  d["linf"] = o.delta_linf;
  return d;
}

ParamSet fresh_model(const RunConfig& c, std::span<const Sample> train) {
  auto p = init_params(c.policy(), c.seeds.init_seed(), c.init_scale);
  fit_input_normalization(p, train);
  return p;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Adversarially robust SFT + GRPO on a synthetic structured-output VQA task";

  static py::exception<Error> base(m, "Error", PyExc_RuntimeError);
  static py::exception<ConfigError> config_error(m, "ConfigError", base.ptr());
  static py::exception<TrainingDiverged> diverged(m, "TrainingDiverged", base.ptr());
  static py::exception<IoError> io_error(m, "IoError", base.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      PyErr_SetString(config_error.ptr(), e.what());
    } catch (const TrainingDiverged& e) {
      PyErr_SetString(diverged.ptr(), e.what());
    } catch (const IoError& e) {
      PyErr_SetString(io_error.ptr(), e.what());
    } catch (const Error& e) {
      PyErr_SetString(base.ptr(), e.what());
    }
  });

  py::class_<Sample>(m, "Sample")
      .def(py::init<>())
      .def_readwrite("image", &Sample::image)
      .def_readwrite("question", &Sample::question)
      .def_readwrite("choices", &Sample::choices)
      .def_readwrite("truth", &Sample::truth)
      .def_readwrite("modality", &Sample::modality)
      .def_readwrite("evidence", &Sample::evidence);

  py::class_<ParamSet>(m, "Model")
      .def("digest", [](const ParamSet& p) { return params_digest(p); })
      .def("answer", [](const ParamSet& p, const Sample& s) { return greedy_answer(p, s.image, s.question); })
      .def("save",
           [](const ParamSet& p, const std::filesystem::path& path, const std::string& stage) {
             write_checkpoint(path, p, {stage, 0, "", ""});
           },
           py::arg("path"), py::arg("stage") = "python");

  m.def("load_model", [](const std::filesystem::path& path) { return read_checkpoint(path).params; });

  m.def("default_config", [] { return dump_config(RunConfig{}); }, "Every config key with its default value.");
  m.def("config_hash", [](const std::string& text) { return config_hash(config_from(text)); }, py::arg("config") = "");

  m.def(
      "generate",
      [](const std::string& text) {
        const auto c = config_from(text);
        auto split = gen_dataset(make_rule(c.task, c.seeds.data_seed()), c.task, c.seeds.data_seed());
        return py::make_tuple(split.train.samples, split.test.samples);
      },
      py::arg("config") = "", "Returns (train, test) sample lists.");

  m.def(
      "sft",
      [](const std::vector<Sample>& train, const std::string& text, bool adversarial) {
        const auto c = config_from(text);
        py::gil_scoped_release release;
        const auto start = fresh_model(c, train);
        return adversarial ? train_at_sft(start, train, c.sft_config(true), c.seeds.at_sft_seed()).params
                           : train_sft(start, train, c.sft_config(false), c.seeds.sft_seed()).params;
      },
      py::arg("train"), py::arg("config") = "", py::arg("adversarial") = false);

  m.def(
      "grpo",
      [](const ParamSet& start, const std::vector<Sample>& train, const std::string& text, bool adversarial) {
        const auto c = config_from(text);
        RewardConfig rc = c.reward;
        rc.trace_len = c.task.trace_len;
        const auto rf = make_reward_fn(rc, Vocabulary::standard(c.task.vocab), AnswerSet(c.task.choices));
        GrpoResult r;
        {
          py::gil_scoped_release release;
          r = train_grpo(start, start, train, c.grpo_config(adversarial), rf,
                         adversarial ? c.seeds.at_grpo_seed() : c.seeds.grpo_seed(), adversarial);
        }
        std::vector<double> rewards;
        for (const auto& s : r.log) rewards.push_back(s.reward_mean);
        return py::make_tuple(r.params, rewards);
      },
      py::arg("model"), py::arg("train"), py::arg("config") = "", py::arg("adversarial") = false,
      "Returns (model, per-iteration mean group reward).");

  m.def(
      "evaluate",
      [](const ParamSet& p, const std::vector<Sample>& samples, int modalities, bool weighted) {
        return breakdown_dict(evaluate_clean(p, samples, modalities, weighted));
      },
      py::arg("model"), py::arg("samples"), py::arg("modalities") = 8, py::arg("weighted") = false);

  m.def(
      "attack",
      [](const ParamSet& p, const Sample& s, const std::string& kind, double epsilon, double alpha, int steps,
         const std::string& norm) {
        AttackConfig c;
        c.kind = parse_attack(kind);
        c.epsilon = epsilon;
        c.alpha = alpha > 0 ? alpha : epsilon / 4;
        c.steps = steps;
        c.norm = parse_norm(norm);
        return outcome_dict(run_attack(p, s, c));
      },
      py::arg("model"), py::arg("sample"), py::arg("kind") = "pgd", py::arg("epsilon") = 0.01, py::arg("alpha") = 0.0,
      py::arg("steps") = 10, py::arg("norm") = "linf");

  m.def(
      "certify",
      [](const ParamSet& p, const Sample& s, double sigma, int n_pred, int n_cert, double alpha, std::uint64_t seed) {
        Rng rng(seed);
        const auto c = certify(p, s, SmoothingConfig{sigma, n_pred, n_cert, alpha}, rng);
        py::dict d;
        d["prediction"] = c.prediction ? py::object(py::int_(*c.prediction)) : py::object(py::none());
        d["count"] = c.count;
        d["p_lower"] = c.p_lower;
        d["radius"] = c.radius;
        return d;
      },
      py::arg("model"), py::arg("sample"), py::arg("sigma") = 0.25, py::arg("n_pred") = 100, py::arg("n_cert") = 1000,
      py::arg("alpha") = 0.001, py::arg("seed") = 0);

  m.def(
      "run_pipeline",
      [](const std::string& text, const std::filesystem::path& out) {
        auto c = config_from(text);
        c.out = out;
        std::vector<EvalReport> reports;
        {
          py::gil_scoped_release release;
          reports = run_pipeline(c);
        }
        py::dict d;
        for (const auto& r : reports) d[py::str(r.method)] = breakdown_dict(r.clean);
        return d;
      },
      py::arg("config"), py::arg("out"), "Runs every stage into `out`; returns clean accuracy per stage.");

  m.def(
      "normalized_advantages",
      [](const std::vector<double>& r, double eps_std) { return normalized_advantages(r, eps_std); },
      py::arg("rewards"), py::arg("eps_std") = 1e-8);
  m.def(
      "clipped_surrogate",
      [](const std::vector<double>& n, const std::vector<double>& o, const std::vector<double>& a, double eps) {
        return clipped_surrogate(n, o, a, eps);
      },
      py::arg("new_logprobs"), py::arg("old_logprobs"), py::arg("advantages"), py::arg("eps_clip") = 0.2);
  m.def("aua", [](const std::vector<std::pair<double, double>>& curve) { return aua(curve); });
  m.def("inverse_normal_cdf", &inverse_normal_cdf);
  m.def("clopper_pearson_lower", &clopper_pearson_lower, py::arg("k"), py::arg("n"), py::arg("alpha"));
  m.def("certified_radius", &certified_radius, py::arg("sigma"), py::arg("p_lower"));
  m.def("aggregate_overall", [](const std::vector<double>& acc, const std::vector<long>& counts, bool weighted) {
    return aggregate_overall(acc, counts, weighted);
  }, py::arg("accuracy"), py::arg("counts"), py::arg("weighted") = false);
}
