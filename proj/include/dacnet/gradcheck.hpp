#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dacnet/tensor.hpp"

namespace dacnet::gradcheck {

struct CheckOptions {
    float step = 1e-3f;              // central-difference step
    double tol = 1e-3;               // relative error bound
    double atol = 1e-4;              // absolute floor for near-zero gradients
    double min_pass_fraction = 0.95; // elementwise quantile that must pass
    int max_entries_per_param = 0;   // 0 = exhaustive; else sampled indices
    // Entries whose one-sided slopes disagree by more than this (relative)
    // straddle a kink (relu/maxpool); they are excluded, up to max_skipped.
    double kink_tol = 0.2;
    double max_skipped = 0.2;
    bool richardson = false;  // extrapolated oracle for high-curvature graphs
};

struct CheckResult {
    std::string name;
    bool passed = false;
    double frobenius_rel = 0.0;
    double pass_fraction = 0.0;
    double max_rel = 0.0;
    int64_t entries = 0;
    int64_t skipped = 0;
    double tol = 0.0;
};

// Compares reverse-mode gradients of sum(probe .* forward()) against central
// finite differences for every element of `params` (or a seeded sample of
// them). `forward` must rebuild its output from the current param values.
CheckResult check(const std::string& name, const std::vector<Tensor>& params,
                  const std::function<Tensor()>& forward, Rng& rng,
                  const CheckOptions& opts = {});

// Seeded fixtures covering every differentiable operation plus the composite
// forward paths. `filter` restricts to ops whose name contains it.
std::vector<CheckResult> run_suite(uint64_t seed, int repeats, const std::string& filter = "");
std::vector<std::string> suite_op_names();

}  // namespace dacnet::gradcheck
