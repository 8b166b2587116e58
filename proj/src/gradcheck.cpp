#include "retkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "retkit/losses.hpp"
#include "retkit/rng.hpp"

namespace retkit {

namespace {

bool crosses_kink(const std::vector<double>& plus, const std::vector<double>& minus, double step) {
    if (plus.size() != minus.size())
        throw ValidationError("finite_diff_check: activation count changed between evaluations");
    const double band = 10.0 * step;
    for (std::size_t i = 0; i < plus.size(); ++i) {
        if (std::abs(plus[i]) <= band || std::abs(minus[i]) <= band) return true;
        if ((plus[i] > 0.0) != (minus[i] > 0.0)) return true;
    }
    return false;
}

} // namespace

GradCheckReport finite_diff_check(const CheckableFunction& fn, const Eigen::VectorXd& point,
                                  double step, double tolerance) {
    if (step <= 0.0 || tolerance <= 0.0)
        throw ValidationError("finite_diff_check: step and tolerance must be > 0");

    const double v0 = fn.value(point);
    const double v1 = fn.value(point);
    if (std::memcmp(&v0, &v1, sizeof(double)) != 0)
        throw ValidationError("finite_diff_check: loss function is not deterministic");

    const Eigen::VectorXd analytic = fn.gradient(point);
    if (analytic.size() != point.size())
        throw ValidationError("finite_diff_check: gradient size does not match point");

    GradCheckReport report;
    report.step = step;
    report.tolerance = tolerance;
    report.n_coords = point.size();

    Eigen::VectorXd x = point;
    for (Eigen::Index c = 0; c < point.size(); ++c) {
        const double saved = x[c];
        x[c] = saved + step;
        const double f_plus = fn.value(x);
        const std::vector<double> act_plus = fn.activations ? fn.activations(x) : std::vector<double>{};
        x[c] = saved - step;
        const double f_minus = fn.value(x);
        const std::vector<double> act_minus = fn.activations ? fn.activations(x) : std::vector<double>{};
        x[c] = saved;

        if (fn.activations && crosses_kink(act_plus, act_minus, step)) {
            ++report.n_excluded;
            continue;
        }
        const double fd = (f_plus - f_minus) / (2.0 * step);
        const double rel = std::abs(fd - analytic[c]) / std::max(1.0, std::abs(analytic[c]));
        report.max_rel_error = std::max(report.max_rel_error, rel);
        ++report.n_checked;
    }
    report.pass = report.max_rel_error <= tolerance && report.n_checked > 0;
    return report;
}

// ---------------------------------------------------------------------------
// Suite adapters: each loss reshaped as a flat-vector function
// ---------------------------------------------------------------------------

namespace {

MatrixD unflatten(const Eigen::VectorXd& x, Eigen::Index rows, Eigen::Index cols,
                  Eigen::Index offset) {
    MatrixD m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = x[offset + r * cols + c];
    return m;
}

Eigen::VectorXd flatten(const MatrixD& m) {
    Eigen::VectorXd x(m.rows() * m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) x[r * m.cols() + c] = m(r, c);
    return x;
}

Eigen::VectorXd random_vector(Rng& rng, Eigen::Index n) {
    Eigen::VectorXd x(n);
    for (Eigen::Index i = 0; i < n; ++i) x[i] = rng.normal();
    return x;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
    return h;
}

LossCheckSummary check_many(const std::string& name, std::uint64_t seed, int n_points, double step,
                            double tolerance,
                            const std::function<std::pair<CheckableFunction, Eigen::VectorXd>(Rng&)>& make) {
    LossCheckSummary summary;
    summary.name = name;
    summary.n_points = n_points;
    summary.pass = true;
    Rng rng(mix64(seed ^ fnv1a(name)));
    for (int p = 0; p < n_points; ++p) {
        Rng sub = rng.substream(static_cast<std::uint64_t>(p));
        auto [fn, point] = make(sub);
        const GradCheckReport r = finite_diff_check(fn, point, step, tolerance);
        summary.max_rel_error = std::max(summary.max_rel_error, r.max_rel_error);
        summary.n_checked += r.n_checked;
        summary.n_excluded += r.n_excluded;
        summary.pass = summary.pass && r.pass;
    }
    return summary;
}

constexpr Eigen::Index kCheckBatch = 6;
constexpr Eigen::Index kCheckDim = 5;
constexpr Eigen::Index kCheckClasses = 4;

} // namespace

GradCheckSuiteReport run_gradcheck_suite(std::uint64_t seed, int n_points, double step,
                                         double tolerance) {
    if (n_points < 1) throw ValidationError("gradcheck: need at least one point");
    GradCheckSuiteReport suite;
    suite.step = step;
    suite.tolerance = tolerance;
    suite.seed = seed;

    const Eigen::Index b = kCheckBatch, dim = kCheckDim;

    const LossParams params;

    suite.losses.push_back(check_many("triplet", seed, n_points, step, tolerance, [&](Rng& rng) {
        Eigen::VectorXd x = random_vector(rng, 3 * b * dim);
        CheckableFunction fn;
        fn.value = [=](const Eigen::VectorXd& v) {
            return triplet_loss(unflatten(v, b, dim, 0), unflatten(v, b, dim, b * dim),
                                unflatten(v, b, dim, 2 * b * dim), params.triplet_margin)
                .value;
        };
        fn.gradient = [=](const Eigen::VectorXd& v) {
            return flatten(triplet_loss(unflatten(v, b, dim, 0), unflatten(v, b, dim, b * dim),
                                        unflatten(v, b, dim, 2 * b * dim), params.triplet_margin)
                               .grad_embeddings);
        };
        fn.activations = [=](const Eigen::VectorXd& v) {
            return triplet_loss(unflatten(v, b, dim, 0), unflatten(v, b, dim, b * dim),
                                unflatten(v, b, dim, 2 * b * dim), params.triplet_margin)
                .hinge_activations;
        };
        return std::make_pair(fn, x);
    }));

    suite.losses.push_back(check_many("quadruplet", seed, n_points, step, tolerance, [&](Rng& rng) {
        Eigen::VectorXd x = random_vector(rng, 4 * b * dim);
        // margins detach from the batch: freeze them at the base point
        const QuadrupletMargins margins =
            quadruplet_margins(unflatten(x, b, dim, 0), unflatten(x, b, dim, b * dim),
                               unflatten(x, b, dim, 2 * b * dim), params);
        CheckableFunction fn;
        fn.value = [=](const Eigen::VectorXd& v) {
            return quadruplet_loss_fixed_margins(unflatten(v, b, dim, 0), unflatten(v, b, dim, b * dim),
                                                 unflatten(v, b, dim, 2 * b * dim),
                                                 unflatten(v, b, dim, 3 * b * dim), margins)
                .value;
        };
        fn.gradient = [=](const Eigen::VectorXd& v) {
            return flatten(quadruplet_loss_fixed_margins(
                               unflatten(v, b, dim, 0), unflatten(v, b, dim, b * dim),
                               unflatten(v, b, dim, 2 * b * dim), unflatten(v, b, dim, 3 * b * dim),
                               margins)
                               .grad_embeddings);
        };
        fn.activations = [=](const Eigen::VectorXd& v) {
            return quadruplet_loss_fixed_margins(unflatten(v, b, dim, 0), unflatten(v, b, dim, b * dim),
                                                 unflatten(v, b, dim, 2 * b * dim),
                                                 unflatten(v, b, dim, 3 * b * dim), margins)
                .hinge_activations;
        };
        return std::make_pair(fn, x);
    }));

    suite.losses.push_back(check_many("center", seed, n_points, step, tolerance, [&](Rng& rng) {
        Eigen::VectorXd x = random_vector(rng, b * dim);
        ClassCenters centers;
        centers.centers = unflatten(random_vector(rng, 2 * dim), 2, dim, 0);
        std::vector<int> labels;
        for (Eigen::Index i = 0; i < b; ++i) labels.push_back(static_cast<int>(i % 2));
        CheckableFunction fn;
        fn.value = [=](const Eigen::VectorXd& v) {
            return center_loss({unflatten(v, b, dim, 0), labels}, centers).value;
        };
        fn.gradient = [=](const Eigen::VectorXd& v) {
            return flatten(center_loss({unflatten(v, b, dim, 0), labels}, centers).grad_embeddings);
        };
        return std::make_pair(fn, x);
    }));

    suite.losses.push_back(check_many("label_smoothed_ce", seed, n_points, step, tolerance, [&](Rng& rng) {
        Eigen::VectorXd x = random_vector(rng, b * kCheckClasses);
        std::vector<int> labels;
        for (Eigen::Index i = 0; i < b; ++i)
            labels.push_back(static_cast<int>(rng.uniform_int(kCheckClasses)));
        CheckableFunction fn;
        fn.value = [=](const Eigen::VectorXd& v) {
            return label_smoothed_ce(unflatten(v, b, kCheckClasses, 0), labels, params.label_smoothing)
                .value;
        };
        fn.gradient = [=](const Eigen::VectorXd& v) {
            return flatten(label_smoothed_ce(unflatten(v, b, kCheckClasses, 0), labels,
                                             params.label_smoothing)
                               .grad_embeddings);
        };
        return std::make_pair(fn, x);
    }));

    suite.all_pass = true;
    for (const auto& l : suite.losses) suite.all_pass = suite.all_pass && l.pass;
    return suite;
}

} // namespace retkit
