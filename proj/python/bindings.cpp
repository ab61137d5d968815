#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "openseg/cli.hpp"
#include "openseg/config.hpp"
#include "openseg/errors.hpp"
#include "openseg/losses.hpp"
#include "openseg/synthdata.hpp"
#include "openseg/training.hpp"

namespace py = pybind11;
using namespace openseg;

namespace {

Tensor cost_tensor(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return torch::zeros({0, 0}, torch::kFloat64);
    const auto g = static_cast<std::int64_t>(rows.front().size());
    auto t = torch::empty({static_cast<std::int64_t>(rows.size()), g}, torch::kFloat64);
    auto a = t.accessor<double, 2>();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (static_cast<std::int64_t>(rows[i].size()) != g) throw ValidationError("cost matrix rows differ in length");
        for (std::int64_t j = 0; j < g; ++j) a[static_cast<std::int64_t>(i)][j] = rows[i][static_cast<std::size_t>(j)];
    }
    return t;
}

}  // namespace

PYBIND11_MODULE(_openseg, m) {
    m.doc() = "openseg core bindings";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_IOError);

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::vector<const char*> argv{"openseg"};
            for (const auto& a : args) argv.push_back(a.c_str());
            std::ostringstream out, err;
            const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Run the command line; returns (exit_code, stdout, stderr).");

    m.def(
        "profile_defaults", [](const std::string& name) { return RunConfig::profile_defaults(name).to_json().dump(); },
        py::arg("name"));

    m.def(
        "hungarian_match",
        [](const std::vector<std::vector<double>>& cost) { return hungarian_match(cost_tensor(cost)).pairs; },
        py::arg("cost"), "Optimal (query, gt) pairs for a K x G cost matrix.");
    m.def(
        "brute_force_match",
        [](const std::vector<std::vector<double>>& cost) { return brute_force_match(cost_tensor(cost)).pairs; },
        py::arg("cost"));
    m.def(
        "assignment_cost",
        [](const std::vector<std::vector<double>>& cost, const std::vector<std::pair<int, int>>& pairs) {
            Assignment a;
            a.pairs = pairs;
            return assignment_cost(cost_tensor(cost), a);
        },
        py::arg("cost"), py::arg("pairs"));

    m.def(
        "lr_at_step",
        [](std::int64_t step, const std::string& profile) {
            return lr_at_step(step, RunConfig::profile_defaults(profile).train);
        },
        py::arg("step"), py::arg("profile") = "desk");

    m.def(
        "generate_dataset",
        [](const std::filesystem::path& out, int n_images, int n_val, std::uint64_t seed, int image_size) {
            SceneSpec spec;
            spec.seed = seed;
            spec.image_size = image_size;
            spec.min_size = std::min(spec.min_size, image_size / 4);
            spec.max_size = std::min(spec.max_size, image_size / 2);
            const auto r = generate_dataset(spec, n_images, out, n_val);
            py::dict d;
            d["images"] = r.images;
            d["instances"] = r.instances;
            d["skipped"] = r.skipped;
            d["train"] = r.train;
            d["val"] = r.val;
            d["per_class"] = r.per_class;
            return d;
        },
        py::arg("out"), py::arg("n_images"), py::arg("n_val") = -1, py::arg("seed") = 0, py::arg("image_size") = 128);
}
