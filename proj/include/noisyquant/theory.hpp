#pragma once
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "noisyquant/error.hpp"
#include "noisyquant/rng.hpp"

namespace nq::theory {

// All closed forms below are valid on the snapshot geometry: a value at
// distance x from the decision threshold of a bin with half width b, noise
// half-range n with x <= n <= 2b - x, so the noise support crosses at most
// one threshold. The two-level quantizer maps v >= 0 to +b, v < 0 to -b.

inline void check_x_b(double x, double b) {
    if (!(b > 0.0)) throw FeasibilityError("b must be positive");
    if (!(x >= 0.0 && x <= b)) throw FeasibilityError("x must be in [0, b]");
}

inline void check_feasible(double x, double n, double b) {
    check_x_b(x, b);
    if (!(n >= x && n <= 2.0 * b - x))
        throw FeasibilityError("n must satisfy x <= n <= 2b - x");
}

// Squared error of a snapshot without noise.
inline double snapshot_qe(double x, double b) {
    check_x_b(x, b);
    return (b - x) * (b - x);
}

// E_N[QE(x+N)] = x^2 - (b/n) x^2 + n^2/3 - n b + b^2.
// The n^2/3 term follows from the defining integral
//   (1/2n) [ \int_{x-n}^{0} (z+b)^2 dz + \int_{0}^{x+n} (z-b)^2 dz ],
// whose cubic terms contribute ((x+n)^3 - (x-n)^3)/(6n) - x^2 = n^2/3;
// a linear n/3 would also be dimensionally inconsistent (length^2 expected).
inline double expected_qe_closed_form(double x, double n, double b) {
    check_feasible(x, n, b);
    return x * x - (b / n) * x * x + n * n / 3.0 - n * b + b * b;
}

// Expected QE change from adding the noise; negative means noise helps.
// D(x,n,b) = -(b/n) x^2 + 2 b x + n^2/3 - n b.
inline double delta_closed_form(double x, double n, double b) {
    check_feasible(x, n, b);
    return -(b / n) * x * x + 2.0 * b * x + n * n / 3.0 - n * b;
}

// Root of the quadratic: D <= 0 iff x <= n (1 - sqrt(n / 3b)).
inline double reduction_threshold(double n, double b) {
    if (!(n > 0.0)) throw FeasibilityError("reduction_threshold: n must be positive");
    if (!(b > 0.0)) throw FeasibilityError("reduction_threshold: b must be positive");
    if (!(n < 3.0 * b)) throw FeasibilityError("reduction_threshold: requires n < 3b");
    return n * (1.0 - std::sqrt(n / (3.0 * b)));
}

// Exact expectation without the single-crossing restriction. On an
// unclipped uniform grid with half-bin b the signed quantization error is
// a sawtooth of period 2b, so E_N[QE(x+N)] integrates in closed form for
// any n >= 0: with F an antiderivative of saw(z)^2,
//   E = (F(x+n) - F(x-n)) / (2n).
// Agrees with expected_qe_closed_form on x <= n <= 2b - x and equals
// snapshot_qe + n^2/3 when n <= x (no threshold crossed).
inline double expected_qe_exact(double x, double n, double b) {
    check_x_b(x, b);
    if (!(n >= 0.0)) throw FeasibilityError("n must be nonnegative");
    if (n == 0.0) return snapshot_qe(x, b);
    const double period = 2.0 * b;
    const double cube = b * b * b;
    auto F = [&](double z) {
        const double k = std::floor(z / period);
        const double r = z - period * k; // in [0, 2b)
        const double t = b - r;
        return k * (2.0 * cube / 3.0) + (cube - t * t * t) / 3.0;
    };
    return (F(x + n) - F(x - n)) / (2.0 * n);
}

inline double delta_exact(double x, double n, double b) {
    return expected_qe_exact(x, n, b) - snapshot_qe(x, b);
}

struct NRange {
    double lo;
    double hi;
};

inline NRange feasible_n_range(double x, double b) {
    check_x_b(x, b);
    return {x, 2.0 * b - x};
}

inline double two_level_quantize(double v, double b) { return v >= 0.0 ? b : -b; }

// Simulation unit: `instances` independently sampled noise vectors of
// length `elements`, per-element mean of the QE difference reported as
// (mean, std) across instances.
struct SnapshotSpec {
    double x = 0.1;
    double b = 1.0;
    double n = 1.4;
    size_t elements = 20;
    size_t instances = 10;
    uint64_t seed = 0;
};

struct MeanStd {
    double mean;
    double std;
};

inline MeanStd empirical_delta(const SnapshotSpec& spec) {
    check_feasible(spec.x, spec.n, spec.b);
    if (spec.elements == 0 || spec.instances == 0)
        throw ConfigError("empirical_delta: elements and instances must be >= 1");
    const double base = snapshot_qe(spec.x, spec.b);
    std::vector<double> deltas(spec.instances);
    for (size_t inst = 0; inst < spec.instances; ++inst) {
        Rng rng(Rng::sub_seed(spec.seed, inst, "empirical_delta"));
        double acc = 0.0;
        for (size_t e = 0; e < spec.elements; ++e) {
            const double noise = rng.uniform(-spec.n, spec.n);
            const double v = spec.x + noise;
            const double err = two_level_quantize(v, spec.b) - v;
            acc += err * err - base;
        }
        deltas[inst] = acc / static_cast<double>(spec.elements);
    }
    double mean = 0.0;
    for (double d : deltas) mean += d;
    mean /= static_cast<double>(spec.instances);
    double var = 0.0;
    for (double d : deltas) var += (d - mean) * (d - mean);
    const double std_dev =
        spec.instances > 1 ? std::sqrt(var / static_cast<double>(spec.instances)) : 0.0;
    return {mean, std_dev};
}

struct DeltaCurve {
    std::string sweep_name; // "n" or "x"
    std::vector<double> grid;
    std::vector<double> closed_form;
    std::vector<double> emp_mean;
    std::vector<double> emp_std;
    std::vector<uint8_t> feasible;

    void save_csv(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("DeltaCurve: cannot open " + path);
        f << "sweep_value,closed_form,emp_mean,emp_std,feasible\n";
        f.precision(17);
        for (size_t i = 0; i < grid.size(); ++i) {
            f << grid[i] << ",";
            if (feasible[i])
                f << closed_form[i] << "," << emp_mean[i] << "," << emp_std[i] << ",1\n";
            else
                f << ",,,0\n";
        }
    }
};

namespace detail {
inline DeltaCurve sweep(const std::string& name, double x_fixed, double n_fixed, double b,
                        const std::vector<double>& grid, size_t elements, size_t instances,
                        uint64_t seed, bool sweep_is_n) {
    if (grid.empty()) throw ConfigError("sweep: empty grid");
    DeltaCurve c;
    c.sweep_name = name;
    c.grid = grid;
    c.closed_form.assign(grid.size(), 0.0);
    c.emp_mean.assign(grid.size(), 0.0);
    c.emp_std.assign(grid.size(), 0.0);
    c.feasible.assign(grid.size(), 0);
    const double tol = 1e-9 * b; // absorb one-ulp grid endpoint overshoot
    for (size_t i = 0; i < grid.size(); ++i) {
        double x = sweep_is_n ? x_fixed : grid[i];
        double n = sweep_is_n ? grid[i] : n_fixed;
        if (!(x >= -tol && x <= b + tol && n >= x - tol && n <= 2.0 * b - x + tol))
            continue; // flagged, not computed
        x = std::min(std::max(x, 0.0), b);
        n = std::min(std::max(n, x), 2.0 * b - x);
        c.feasible[i] = 1;
        c.closed_form[i] = delta_closed_form(x, n, b);
        SnapshotSpec spec{x, b, n, elements, instances, Rng::sub_seed(seed, i, name)};
        const MeanStd ms = empirical_delta(spec);
        c.emp_mean[i] = ms.mean;
        c.emp_std[i] = ms.std;
    }
    return c;
}
} // namespace detail

inline DeltaCurve sweep_n(double x, double b, const std::vector<double>& n_grid,
                          size_t elements = 20, size_t instances = 10, uint64_t seed = 0) {
    return detail::sweep("n", x, 0.0, b, n_grid, elements, instances, seed, true);
}

inline DeltaCurve sweep_x(double n, double b, const std::vector<double>& x_grid,
                          size_t elements = 20, size_t instances = 10, uint64_t seed = 0) {
    return detail::sweep("x", 0.0, n, b, x_grid, elements, instances, seed, false);
}

struct McEstimate {
    double value;
    double std_error;
};

// Independent sampling oracle for the expectation.
inline McEstimate monte_carlo_expected_qe(double x, double n, double b, size_t samples,
                                          uint64_t seed) {
    check_feasible(x, n, b);
    if (samples == 0) throw ConfigError("monte_carlo_expected_qe: samples must be >= 1");
    Rng rng(Rng::sub_seed(seed, 0, "mc_expected_qe"));
    double sum = 0.0, sum_sq = 0.0;
    for (size_t i = 0; i < samples; ++i) {
        const double v = x + rng.uniform(-n, n);
        const double err = two_level_quantize(v, b) - v;
        const double qe = err * err;
        sum += qe;
        sum_sq += qe * qe;
    }
    const double mean = sum / static_cast<double>(samples);
    const double var = std::max(0.0, sum_sq / static_cast<double>(samples) - mean * mean);
    const double se = samples > 1 ? std::sqrt(var / static_cast<double>(samples - 1)) : 0.0;
    return {mean, se};
}

} // namespace nq::theory
