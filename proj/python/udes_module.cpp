#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "udes/config.hpp"
#include "udes/errors.hpp"
#include "udes/harness.hpp"

namespace py = pybind11;
using namespace udes;

namespace {

std::vector<DirichletOpinion> to_opinions(const std::vector<std::vector<double>>& alphas) {
  std::vector<DirichletOpinion> out;
  out.reserve(alphas.size());
  for (const auto& a : alphas) out.push_back(DirichletOpinion::from_alpha(a));
  return out;
}

py::dict dataset_dict(const Dataset& ds) {
  py::dict d;
  d["sample_shape"] = ds.sample_shape;
  d["inputs"] = ds.inputs;
  d["labels"] = ds.labels;
  d["num_classes"] = ds.num_classes;
  return d;
}

}  // namespace

PYBIND11_MODULE(_udes, m) {
  m.doc() = "Evidential BatchEnsemble training and uncertainty-driven member selection";
  m.attr("__version__") = "0.1.0";

  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<FusionError>(m, "FusionError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def("lgamma", &udes::lgamma, py::arg("x"));
  m.def("digamma", &udes::digamma, py::arg("x"));
  m.def("trigamma", &udes::trigamma, py::arg("x"));

  m.def(
      "dirichlet_entropy",
      [](const std::vector<double>& alpha) { return dirichlet_entropy(DirichletOpinion::from_alpha(alpha)); },
      py::arg("alpha"));
  m.def(
      "mc_dirichlet_entropy",
      [](const std::vector<double>& alpha, std::size_t n, std::uint64_t seed) {
        RngStream rng(seed);
        const auto e = mc_dirichlet_entropy(alpha, n, rng);
        return py::make_tuple(e.estimate, e.std_err);
      },
      py::arg("alpha"), py::arg("n_samples"), py::arg("seed") = 0, "Returns (estimate, standard error).");
  m.def(
      "alpha_from_logits", [](const std::vector<double>& z) { return alpha_from_logits(z).alpha; }, py::arg("logits"));
  m.def(
      "elbo_loss",
      [](const std::vector<double>& alpha, int label, double kl_weight) {
        const auto p = elbo_loss(DirichletOpinion::from_alpha(alpha), label, kl_weight);
        return py::make_tuple(p.nll, p.kl, p.total);
      },
      py::arg("alpha"), py::arg("label"), py::arg("kl_weight") = 1.0, "Returns (nll, kl, total).");

  py::class_<SubjectiveOpinion>(m, "SubjectiveOpinion")
      .def(py::init<>())
      .def_readwrite("belief", &SubjectiveOpinion::belief)
      .def_readwrite("uncertainty", &SubjectiveOpinion::uncertainty)
      .def_static("from_alpha",
                  [](const std::vector<double>& a) {
                    return SubjectiveOpinion::from_dirichlet(DirichletOpinion::from_alpha(a));
                  })
      .def_static("vacuous", &SubjectiveOpinion::vacuous)
      .def("probabilities", &SubjectiveOpinion::probabilities)
      .def("to_alpha", [](const SubjectiveOpinion& o) { return o.to_dirichlet().alpha; });
  m.def("dsc_combine", &dsc_combine, py::arg("a"), py::arg("b"));
  m.def(
      "dsc_fuse_all", [](const std::vector<SubjectiveOpinion>& ops) { return dsc_fuse_all(ops); },
      py::arg("opinions"));

  m.def(
      "policy_predict",
      [](const std::vector<std::vector<double>>& alphas, const std::string& policy, std::uint64_t seed) {
        RngStream rng(seed);
        const auto ops = to_opinions(alphas);
        const auto out = policy_predict(ops, PolicySpec::parse(policy), rng);
        py::dict d;
        d["uncertainties"] = out.uncertainties;
        d["selected"] = out.selected;
        d["fused"] = out.fused;
        d["predicted"] = out.predicted;
        return d;
      },
      py::arg("member_alphas"), py::arg("policy"), py::arg("seed") = 0);

  m.def(
      "two_moons",
      [](std::size_t n, double noise, std::uint64_t seed) {
        RngStream rng(seed);
        return dataset_dict(gen_two_moons(n, noise, rng));
      },
      py::arg("n"), py::arg("noise") = 0.1, py::arg("seed") = 0);

  m.def("format_double", &format_double, py::arg("v"));

  m.def(
      "run_pipeline",
      [](const std::map<std::string, std::string>& overrides, const std::string& out_dir) {
        KvConfig kv;
        for (const auto& [k, v] : overrides) kv.set(k, v);
        const auto cfg = ExperimentConfig::from_kv(kv);
        PipelineResult r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(cfg);
          if (!out_dir.empty()) emit_report(r.eval, cfg, out_dir, r.fit);
        }
        py::list rows;
        for (const auto& row : r.eval.table.rows) {
          py::dict d;
          d["policy"] = row.policy;
          d["attack"] = row.attack;
          d["eps"] = row.eps;
          d["accuracy"] = row.accuracy;
          d["proportion"] = row.proportion;
          rows.append(d);
        }
        py::dict out;
        out["metrics"] = rows;
        out["csv"] = metrics_csv(r.eval.table);
        out["checks_pass"] = r.eval.all_checks_pass();
        py::list gaps;
        for (const auto& e : r.fit.history) gaps.append(e.entropy_gap);
        out["entropy_gap"] = gaps;
        return out;
      },
      py::arg("config") = std::map<std::string, std::string>{}, py::arg("out_dir") = "",
      "Run the seeded pipeline with flat config overrides; returns metrics rows and the CSV text.");
}
