#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "retkit/errors.hpp"

namespace retkit {

/// A scalar function with an analytic gradient, plus (optionally) its hinge
/// pre-activations so the checker can recognize kink crossings.
struct CheckableFunction {
    std::function<double(const Eigen::VectorXd&)> value;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
    std::function<std::vector<double>(const Eigen::VectorXd&)> activations; // may be empty
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::int64_t n_coords = 0;
    std::int64_t n_checked = 0;
    std::int64_t n_excluded = 0; // coordinates straddling a hinge kink
    double step = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

/// Central finite differences per coordinate against the analytic gradient.
/// Relative error uses max(1, |analytic|) in the denominator. A coordinate is
/// excluded (and counted) when a hinge activation changes sign between the
/// two perturbed points or sits within 10 * step of zero at either of them.
/// A non-deterministic value function is rejected up front.
GradCheckReport finite_diff_check(const CheckableFunction& fn, const Eigen::VectorXd& point,
                                  double step, double tolerance);

struct LossCheckSummary {
    std::string name;
    int n_points = 0;
    double max_rel_error = 0.0;
    std::int64_t n_checked = 0;
    std::int64_t n_excluded = 0;
    bool pass = false;
};

struct GradCheckSuiteReport {
    std::vector<LossCheckSummary> losses;
    double step = 0.0;
    double tolerance = 0.0;
    std::uint64_t seed = 0;
    bool all_pass = false;
};

/// Checks all four training losses (triplet, quadruplet with detached
/// margins, center, label-smoothed CE) at `n_points` random points each.
GradCheckSuiteReport run_gradcheck_suite(std::uint64_t seed, int n_points, double step,
                                         double tolerance);

} // namespace retkit
