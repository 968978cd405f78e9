#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "icwm/bounds.hpp"
#include "icwm/cartpole_env.hpp"
#include "icwm/common.hpp"
#include "icwm/config_schema.hpp"
#include "icwm/estimators.hpp"
#include "icwm/harness.hpp"
#include "icwm/tabular_env.hpp"
#include "icwm/world_model.hpp"

namespace py = pybind11;
using namespace icwm;
using nlohmann::json;

namespace {

// Plain-data crossing via the json module keeps the C++ side free of Python types.
json to_json(const py::object& obj) {
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

tabular::Dims dims_of(const std::tuple<std::size_t, std::size_t, std::size_t>& d) {
  return {std::get<0>(d), std::get<1>(d), std::get<2>(d)};
}

estimators::DiscreteContext context_of(const std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>& recs) {
  estimators::DiscreteContext c;
  for (const auto& [s, a, o] : recs) c.records.push_back({s, a, o, {}});
  return c;
}

py::array_t<double> shaped(const std::vector<double>& v, std::vector<py::ssize_t> shape) {
  py::array_t<double> out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_icwm, m) {
  m.doc() = "In-context world model toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<InsufficientDataError>(m, "InsufficientDataError", PyExc_ValueError);

  m.def("format_double", &format_double);
  m.def(
      "check_config", [](const py::object& doc, const std::string& definition) {
        return schema::check(to_json(doc), schema::shipped(), definition);
      },
      py::arg("doc"), py::arg("definition"), "Schema violations of a config document (empty when valid).");

  // Tabular environments ----------------------------------------------------
  py::class_<tabular::DiscreteEnv>(m, "DiscreteEnv")
      .def_property_readonly("dims",
                             [](const tabular::DiscreteEnv& e) {
                               return std::make_tuple(e.dims.states, e.dims.actions, e.dims.obs);
                             })
      .def_property_readonly("kind", [](const tabular::DiscreteEnv& e) { return tabular::to_string(e.kind); })
      .def_readonly("env_id", &tabular::DiscreteEnv::env_id)
      .def_property_readonly("transition",
                             [](const tabular::DiscreteEnv& e) {
                               const auto S = static_cast<py::ssize_t>(e.dims.states);
                               return shaped(e.transition, {S, static_cast<py::ssize_t>(e.dims.actions), S});
                             })
      .def_property_readonly("observation",
                             [](const tabular::DiscreteEnv& e) {
                               return shaped(e.observation, {static_cast<py::ssize_t>(e.dims.states),
                                                             static_cast<py::ssize_t>(e.dims.obs)});
                             })
      .def("to_dict", [](const tabular::DiscreteEnv& e) { return to_py(tabular::env_to_json(e)); });

  m.def(
      "sample_env_family",
      [](const py::object& config) { return tabular::sample_env_family(tabular::config_from_json(to_json(config))); },
      py::arg("config"), "Draw a family from {count, dims, concentration, determinism_fraction, kind, seed}.");

  // Estimators --------------------------------------------------------------
  m.def(
      "el_predict",
      [](const std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>& records,
         const std::tuple<std::size_t, std::size_t, std::size_t>& dims, std::size_t s, std::size_t a,
         double smoothing) {
        auto counts = estimators::ContextCounts::zeros(dims_of(dims));
        estimators::accumulate(counts, context_of(records));
        return estimators::el_predict(counts, s, a, smoothing);
      },
      py::arg("records"), py::arg("dims"), py::arg("s"), py::arg("a"), py::arg("smoothing") = 0.0);

  m.def(
      "er_predict",
      [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& tables,
         const std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>& records, std::size_t s, std::size_t a,
         const std::string& mode, const std::vector<double>& prior) {
        std::vector<estimators::TabularWorldModel> models;
        for (const auto& t : tables) {
          if (t.ndim() != 3) throw ConfigError("er_predict: tables must have shape (S, A, O)");
          estimators::TabularWorldModel wm;
          wm.dims = {static_cast<std::size_t>(t.shape(0)), static_cast<std::size_t>(t.shape(1)),
                     static_cast<std::size_t>(t.shape(2))};
          wm.probs.assign(t.data(), t.data() + t.size());
          models.push_back(std::move(wm));
        }
        const auto rm =
            mode == "argmax" ? estimators::RecognitionMode::kArgmax : estimators::RecognitionMode::kMixture;
        if (mode != "argmax" && mode != "mixture") throw ConfigError("mode must be 'argmax' or 'mixture'");
        return estimators::er_predict(models, context_of(records), s, a, rm, prior);
      },
      py::arg("tables"), py::arg("records"), py::arg("s"), py::arg("a"), py::arg("mode") = "mixture",
      py::arg("prior") = std::vector<double>{});

  m.def("tv_distance", [](const std::vector<double>& p, const std::vector<double>& q) {
    return estimators::tv_distance(p, q);
  });
  m.def("kl_divergence", [](const std::vector<double>& p, const std::vector<double>& q) {
    return estimators::kl_divergence(p, q);
  });

  // Bounds ------------------------------------------------------------------
  m.def(
      "el_threshold",
      [](const std::tuple<std::size_t, std::size_t, std::size_t>& dims, double delta) {
        return bounds::el_threshold(dims_of(dims), delta);
      },
      py::arg("dims"), py::arg("delta"));
  m.def(
      "el_bound",
      [](const std::tuple<std::size_t, std::size_t, std::size_t>& dims, double delta, double T) {
        const auto b = bounds::el_bound(dims_of(dims), delta, T);
        return std::make_pair(b.value, b.valid);
      },
      py::arg("dims"), py::arg("delta"), py::arg("T"), "Returns (bound, valid).");
  m.def("er_bound", &bounds::er_bound, py::arg("alpha"), py::arg("n_envs"), py::arg("T"), py::arg("best_tv"),
        py::arg("worst_tv"));

  // Cart-pole ---------------------------------------------------------------
  m.def(
      "cartpole_step",
      [](const std::array<double, 4>& params, const std::array<double, 4>& state, int action) {
        const cartpole::CartPoleParams p{params[0], params[1], params[2], params[3]};
        const cartpole::CartPoleState s{state[0], state[1], state[2], state[3]};
        return cartpole::step_dynamics(p, s, action).to_array();
      },
      py::arg("params"), py::arg("state"), py::arg("action"),
      "One Euler step. params = (g, m_c, m_p, l), state = (x, x_dot, theta, theta_dot).");

  m.def(
      "build_dataset",
      [](const py::object& spec, std::uint64_t seed, std::size_t threads) {
        const auto ds = cartpole::build_dataset(cartpole::spec_from_json(to_json(spec)), seed, threads);
        const auto N = static_cast<py::ssize_t>(ds.trajectories.size());
        const auto L = static_cast<py::ssize_t>(ds.spec.length);
        py::array_t<float> obs({N, L + 1, static_cast<py::ssize_t>(cartpole::kObsDim)});
        py::array_t<std::uint8_t> acts({N, L});
        for (py::ssize_t i = 0; i < N; ++i) {
          const auto& tr = ds.trajectories[static_cast<std::size_t>(i)];
          std::copy(tr.observations.begin(), tr.observations.end(), obs.mutable_data(i));
          std::copy(tr.actions.begin(), tr.actions.end(), acts.mutable_data(i));
        }
        std::vector<std::array<double, 4>> params;
        for (const auto& p : ds.env_params) params.push_back(p.to_array());
        py::dict out;
        out["observations"] = obs;
        out["actions"] = acts;
        out["env_params"] = params;
        out["spec"] = to_py(cartpole::spec_to_json(ds.spec));
        return out;
      },
      py::arg("spec"), py::arg("seed"), py::arg("threads") = 1);

  // Sequence model ----------------------------------------------------------
  py::class_<seqmodel::GsaModel>(m, "GsaModel")
      .def(py::init([](const py::object& cfg, std::uint64_t seed) {
             return seqmodel::GsaModel(seqmodel::config_from_json(to_json(cfg)), seed);
           }),
           py::arg("config"), py::arg("seed"))
      .def_static(
          "load", [](const std::string& path) { return seqmodel::load_checkpoint(path); }, py::arg("path"))
      .def_property_readonly("config",
                             [](const seqmodel::GsaModel& g) { return to_py(seqmodel::config_to_json(g.config())); })
      .def_property_readonly("parameter_count", &seqmodel::GsaModel::parameter_count)
      .def("encode", &seqmodel::GsaModel::encode_mean, py::arg("obs"))
      .def("decode", &seqmodel::GsaModel::decode_observation, py::arg("s_hat"))
      .def(
          "forward_chunkwise",
          [](seqmodel::GsaModel& g, const ad::Mat& latents, const std::vector<std::size_t>& actions,
             std::size_t batch) { return g.forward_chunkwise(latents, actions, batch); },
          py::arg("latents"), py::arg("actions"), py::arg("batch"))
      .def(
          "forward_recurrent",
          [](seqmodel::GsaModel& g, const ad::Mat& latents, const std::vector<std::size_t>& actions,
             std::size_t batch) {
            if (batch == 0 || latents.rows() % static_cast<Eigen::Index>(batch) != 0)
              throw ConfigError("rows must be a multiple of batch");
            const auto T = static_cast<std::size_t>(latents.rows()) / batch;
            auto st = seqmodel::GsaState::zeros(g.config(), batch);
            ad::Mat out(latents.rows(), latents.cols());
            for (std::size_t t = 0; t < T; ++t) {
              ad::Mat x(static_cast<Eigen::Index>(batch), latents.cols());
              std::vector<std::size_t> a(batch);
              for (std::size_t b = 0; b < batch; ++b) {
                x.row(static_cast<Eigen::Index>(b)) = latents.row(static_cast<Eigen::Index>(b * T + t));
                a[b] = actions.at(b * T + t);
              }
              const auto o = g.step(st, x, a);
              for (std::size_t b = 0; b < batch; ++b)
                out.row(static_cast<Eigen::Index>(b * T + t)) = o.h.row(static_cast<Eigen::Index>(b));
            }
            return out;
          },
          py::arg("latents"), py::arg("actions"), py::arg("batch"));

  // Harness -----------------------------------------------------------------
  m.def(
      "run_experiment",
      [](const py::object& spec) {
        const auto result = harness::run(harness::spec_from_json(to_json(spec)));
        std::ostringstream csv;
        harness::write_rows_csv(result.rows, csv);
        py::dict out;
        out["files"] = result.files;
        out["summary"] = to_py(result.summary);
        out["manifest"] = to_py(result.manifest);
        out["report_csv"] = csv.str();
        return out;
      },
      py::arg("spec"), "Run an experiment spec; outputs land in spec['out_dir'].");
}
