#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace moba {

// Oracle-equivalence and invariant suites. Each is deterministic in its seed.
enum class Suite {
  saturation,       // k >= n MoBA equals dense causal attention
  pipeline_oracle,  // block-sparse pipeline equals the gather reference
  online_softmax,   // split-and-merge softmax equals the direct one
  causality,        // suffix edits never reach prefix outputs
  gating,           // gate semantics, SWA and sink masks
  sparsity,         // closed-form sparsity values
  gradients,        // analytic backward against finite differences
  power_law,        // log-space fit recovers reference curves
  flops,            // operation counts and their scaling
  training,         // hybrid schedule on the toy model
  metrics,          // trailing and position-wise loss agree
};

struct SuiteResult {
  std::string name;
  bool passed = false;
  double max_error = 0.0;  // worst observed deviation, suite-specific units
  double tolerance = 0.0;
  std::size_t instances = 0;
  double seconds = 0.0;
  std::string detail;
};

std::span<const Suite> all_suites();
std::string to_string(Suite suite);
Suite parse_suite(const std::string& name);  // throws ConfigError

SuiteResult run_suite(Suite suite, std::uint64_t seed);

}  // namespace moba
