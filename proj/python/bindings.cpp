#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "moba/attention.hpp"
#include "moba/errors.hpp"
#include "moba/gating.hpp"
#include "moba/harness.hpp"
#include "moba/metrics.hpp"
#include "moba/verify.hpp"

namespace py = pybind11;
using namespace moba;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

// selected[p - 1][h] = ascending 1-based blocks.
std::vector<std::vector<std::vector<std::size_t>>> selections(const RoutingTable& routing) {
  std::vector<std::vector<std::vector<std::size_t>>> out(
      routing.context_length(), std::vector<std::vector<std::size_t>>(routing.num_heads()));
  for (const RoutingRow& row : routing.rows()) out[row.query_pos - 1][row.head] = row.selected;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Block-sparse MoBA attention: kernels, oracles and verification suites.";

  auto base = py::register_exception<Error>(m, "MobaError", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<ParameterError>(m, "ParameterError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DegenerateRowError>(m, "DegenerateRowError", base.ptr());
  py::register_exception<DomainError>(m, "DomainError", base.ptr());

  m.def("seeded_random",
        [](std::vector<std::size_t> shape, std::uint64_t seed) {
          return to_array(seeded_random<double>(shape, seed));
        },
        py::arg("shape"), py::arg("seed"));

  m.def("dense_attention",
        [](const Array& q, const Array& k, const Array& v, bool causal, bool scale) {
          return to_array(dense_attention(to_tensor(q), to_tensor(k), to_tensor(v), causal, scale));
        },
        py::arg("q"), py::arg("k"), py::arg("v"), py::arg("causal") = true, py::arg("scale") = true);

  // q, k, v are [N, h, d]; the pipeline path is used.
  m.def("moba_attention",
        [](const Array& q, const Array& k, const Array& v, std::size_t block_size,
           std::size_t top_k, bool scale) {
          const Tensor tq = to_tensor(q);
          if (tq.rank() != 3) throw DimensionError("moba_attention expects [N, h, d] arrays");
          AttentionConfig config = AttentionConfig::moba(tq.dim(1), tq.dim(2), block_size, top_k);
          config.scale = scale;
          return to_array(moba_attention_pipeline(tq, to_tensor(k), to_tensor(v), config));
        },
        py::arg("q"), py::arg("k"), py::arg("v"), py::arg("block_size"), py::arg("top_k"),
        py::arg("scale") = true);

  m.def("moba_attention_reference",
        [](const Array& q, const Array& k, const Array& v, std::size_t block_size,
           std::size_t top_k, bool scale) {
          const Tensor tq = to_tensor(q), tk = to_tensor(k);
          if (tq.rank() != 3) throw DimensionError("moba_attention_reference expects [N, h, d] arrays");
          const RoutingTable routing =
              route_moba(tq, tk, make_partition(tq.dim(0), block_size), top_k);
          return to_array(moba_attention_oracle(tq, tk, to_tensor(v), routing, scale));
        },
        py::arg("q"), py::arg("k"), py::arg("v"), py::arg("block_size"), py::arg("top_k"),
        py::arg("scale") = true);

  m.def("route_moba",
        [](const Array& q, const Array& k, std::size_t block_size, std::size_t top_k) {
          const Tensor tq = to_tensor(q);
          if (tq.rank() != 3) throw DimensionError("route_moba expects [N, h, d] arrays");
          return selections(route_moba(tq, to_tensor(k), make_partition(tq.dim(0), block_size), top_k));
        },
        py::arg("q"), py::arg("k"), py::arg("block_size"), py::arg("top_k"),
        "Selected 1-based blocks indexed [position - 1][head].");

  m.def("sparsity",
        [](std::uint64_t n, std::uint64_t b, std::uint64_t k) {
          const Fraction f = sparsity_ratio(n, b, k);
          return py::make_tuple(f.num, f.den);
        },
        py::arg("context_length"), py::arg("block_size"), py::arg("top_k"),
        "Exact sparsity as (numerator, denominator).");

  m.def("flop_report",
        [](std::size_t n, std::size_t block_size, std::size_t top_k, std::size_t heads,
           std::size_t head_dim) {
          const FlopReport r =
              flop_report(AttentionConfig::moba(heads, head_dim, block_size, top_k), n);
          py::dict d;
          d["dense_flops"] = r.dense_flops;
          d["attention_flops"] = r.attention_flops;
          d["gating_flops"] = r.gating_flops;
          d["moba_flops"] = r.moba_flops;
          d["ratio"] = r.ratio;
          d["theoretical_ratio"] = r.theoretical_ratio;
          return d;
        },
        py::arg("context_length"), py::arg("block_size"), py::arg("top_k"), py::arg("num_heads") = 1,
        py::arg("head_dim") = 64);

  m.def("fit_power_law",
        [](std::vector<std::pair<double, double>> points) {
          const PowerLawFit f = fit_power_law(points);
          return py::make_tuple(f.a, f.b, f.residual);
        },
        py::arg("points"), "Least-squares fit of L = a * C^b in log space; returns (a, b, residual).");

  m.def("suites", [] {
    std::vector<std::string> names;
    for (Suite s : all_suites()) names.push_back(to_string(s));
    return names;
  });

  m.def("run_suite",
        [](const std::string& name, std::uint64_t seed) {
          const SuiteResult r = run_suite(parse_suite(name), seed);
          py::dict d;
          d["name"] = r.name;
          d["passed"] = r.passed;
          d["max_error"] = r.max_error;
          d["tolerance"] = r.tolerance;
          d["instances"] = r.instances;
          d["detail"] = r.detail;
          return d;
        },
        py::arg("name"), py::arg("seed") = 7);
}
