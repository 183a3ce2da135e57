#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "noisyquant/theory.hpp"

using namespace nq::theory;

// Test-only oracle: composite-trapezoid quadrature of the defining
// integral (1/2n) int_{x-n}^{x+n} (Q(z) - z)^2 dz on the two-level
// quantizer, split at the decision threshold so the integrand is smooth
// on each piece.
static double quadrature_expected_qe(double x, double n, double b) {
    auto piece = [&](double lo, double hi) {
        if (hi <= lo) return 0.0;
        const size_t steps = 20000;
        double acc = 0.0;
        for (size_t i = 0; i <= steps; ++i) {
            const double z = lo + (hi - lo) * static_cast<double>(i) / steps;
            const double err = (z >= 0.0 ? b : -b) - z;
            acc += (i == 0 || i == steps) ? 0.5 * err * err : err * err;
        }
        return acc * (hi - lo) / steps;
    };
    const double lo = x - n, hi = x + n;
    return (piece(lo, std::min(0.0, hi)) + piece(std::max(0.0, lo), hi)) / (2.0 * n);
}

// Test-only oracle for the unrestricted expectation: quadrature of the
// sawtooth error on an infinite uniform grid with half-bin b.
static double quadrature_expected_qe_saw(double x, double n, double b) {
    const size_t steps = 200000;
    const double lo = x - n, hi = x + n;
    double acc = 0.0;
    for (size_t i = 0; i <= steps; ++i) {
        const double z = lo + (hi - lo) * static_cast<double>(i) / steps;
        double r = std::fmod(z, 2.0 * b);
        if (r < 0.0) r += 2.0 * b;
        const double err = b - r;
        acc += (i == 0 || i == steps) ? 0.5 * err * err : err * err;
    }
    return acc * (hi - lo) / steps / (2.0 * n);
}

TEST_CASE("snapshot_qe") {
    CHECK(snapshot_qe(1.0, 1.0) == 0.0);
    CHECK(snapshot_qe(0.0, 1.0) == 1.0);
    CHECK(snapshot_qe(0.1, 1.0) == doctest::Approx(0.81));
    CHECK_THROWS_AS(snapshot_qe(1.5, 1.0), nq::FeasibilityError);
    CHECK_THROWS_AS(snapshot_qe(-0.1, 1.0), nq::FeasibilityError);
}

TEST_CASE("expected_qe closed form against quadrature and frozen values") {
    CHECK(expected_qe_closed_form(0.1, 1.4, 1.0) == doctest::Approx(0.2561905).epsilon(1e-6));
    CHECK(expected_qe_closed_form(0.2, 1.0, 1.0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    for (double x : {0.0, 0.1, 0.3, 0.5, 0.9}) {
        for (double n : {0.95, 1.0, 1.1}) {
            if (!(n >= x && n <= 2.0 - x)) continue;
            CHECK(expected_qe_closed_form(x, n, 1.0) ==
                  doctest::Approx(quadrature_expected_qe(x, n, 1.0)).epsilon(1e-6));
        }
    }
    CHECK_THROWS_AS(expected_qe_closed_form(0.5, 0.1, 1.0), nq::FeasibilityError);
}

TEST_CASE("delta closed form frozen values") {
    CHECK(delta_closed_form(0.1, 1.4, 1.0) == doctest::Approx(-0.5538095).epsilon(1e-6));
    CHECK(delta_closed_form(0.5, 0.5, 1.0) == doctest::Approx(0.0833333).epsilon(1e-4));
    const double root = reduction_threshold(1.4, 1.0);
    CHECK(delta_closed_form(root, 1.4, 1.0) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
}

TEST_CASE("algebraic identity expected - snapshot == delta") {
    for (int xi = 0; xi <= 20; ++xi)
        for (int ni = 0; ni <= 20; ++ni) {
            const double b = 1.3;
            const double x = b * xi / 20.0;
            const double n = x + (2.0 * b - 2.0 * x) * ni / 20.0;
            if (!(n > 0.0)) continue;
            const double lhs = expected_qe_closed_form(x, n, b) - snapshot_qe(x, b);
            CHECK(lhs == doctest::Approx(delta_closed_form(x, n, b)).scale(1.0).epsilon(1e-12));
        }
}

TEST_CASE("exact delta extends the windowed closed form") {
    const double b = 0.7;
    // inside the window the two forms coincide
    for (double x : {0.0, 0.1, 0.35, 0.6})
        for (double n : {0.61, 0.7, 1.0, 2.0 * b - 0.61}) {
            if (!(n >= x && n <= 2.0 * b - x)) continue;
            CHECK(delta_exact(x, n, b) ==
                  doctest::Approx(delta_closed_form(x, n, b)).scale(1.0).epsilon(1e-12));
        }
    // below the window noise cannot cross a threshold: exact penalty n^2/3
    for (double x : {0.3, 0.5, 0.7})
        for (double n : {0.05, 0.15, 0.29})
            CHECK(delta_exact(x, n, b) ==
                  doctest::Approx(n * n / 3.0).scale(1.0).epsilon(1e-12));
    // above the window (two crossings) check against quadrature
    for (double x : {0.2, 0.5, 0.7})
        for (double n : {1.3, 1.4})
            CHECK(expected_qe_exact(x, n, b) ==
                  doctest::Approx(quadrature_expected_qe_saw(x, n, b)).epsilon(1e-6));
    // an integer number of periods averages to b^2/3 regardless of x
    for (double x : {0.0, 0.4, 0.7})
        CHECK(expected_qe_exact(x, 2.0 * b, b) ==
              doctest::Approx(b * b / 3.0).epsilon(1e-12));
    CHECK(expected_qe_exact(0.2, 0.0, b) == snapshot_qe(0.2, b));
    CHECK_THROWS_AS(expected_qe_exact(0.2, -0.1, b), nq::FeasibilityError);
}

TEST_CASE("reduction threshold") {
    CHECK(reduction_threshold(1.4, 1.0) == doctest::Approx(0.4436).epsilon(1e-3));
    CHECK(reduction_threshold(3.0 - 1e-12, 1.0) == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
    CHECK(reduction_threshold(2.0, 1.0) == doctest::Approx(0.36701).epsilon(1e-4));
    CHECK_THROWS_AS(reduction_threshold(0.0, 1.0), nq::FeasibilityError);
    CHECK_THROWS_AS(reduction_threshold(3.5, 1.0), nq::FeasibilityError);
}

TEST_CASE("sign of delta flips exactly at the threshold") {
    for (int bi = 0; bi < 5; ++bi) {
        const double b = 0.5 + 0.5 * bi;
        for (int ni = 1; ni <= 50; ++ni) {
            const double n_max = 2.0 * b; // keep x = 0 feasible
            const double n = n_max * ni / 50.0;
            const double thr = reduction_threshold(n, b);
            for (int xi = 0; xi <= 50; ++xi) {
                const double x_hi = std::min(b, n);
                const double x = x_hi * xi / 50.0;
                if (!(n >= x && n <= 2.0 * b - x)) continue;
                const double d = delta_closed_form(x, n, b);
                if (x < thr - 1e-9) CHECK(d <= 1e-9);
                if (x > thr + 1e-9) CHECK(d >= -1e-9);
            }
        }
    }
}

TEST_CASE("noise always helps at the decision threshold (x = 0)") {
    for (double b : {0.5, 1.0, 2.0})
        for (int i = 1; i <= 40; ++i) {
            const double n = 2.0 * b * i / 40.0;
            CHECK(delta_closed_form(0.0, n, b) < 0.0);
        }
}

TEST_CASE("delta is homogeneous of degree 2") {
    const double x = 0.2, n = 1.1, b = 1.0;
    const double d = delta_closed_form(x, n, b);
    for (double c : {0.5, 2.0, 7.5})
        CHECK(delta_closed_form(c * x, c * n, c * b) ==
              doctest::Approx(c * c * d).epsilon(1e-12));
}

TEST_CASE("feasible_n_range") {
    auto r = feasible_n_range(0.0, 1.0);
    CHECK(r.lo == 0.0);
    CHECK(r.hi == 2.0);
    r = feasible_n_range(1.0, 1.0);
    CHECK(r.lo == 1.0);
    CHECK(r.hi == 1.0);
    r = feasible_n_range(0.3, 1.0);
    CHECK(r.lo == doctest::Approx(0.3));
    CHECK(r.hi == doctest::Approx(1.7));
    CHECK_THROWS_AS(feasible_n_range(1.5, 1.0), nq::FeasibilityError);
}

TEST_CASE("empirical delta: determinism and agreement") {
    SnapshotSpec spec{0.1, 1.0, 1.4, 20, 10, 99};
    const MeanStd a = empirical_delta(spec);
    const MeanStd b = empirical_delta(spec);
    CHECK(a.mean == b.mean);
    CHECK(a.std == b.std);
    CHECK(std::abs(a.mean - (-0.5538)) < 0.15);

    SnapshotSpec big{0.1, 1.0, 1.4, 1000000, 3, 7};
    const MeanStd c = empirical_delta(big);
    CHECK(std::abs(c.mean - delta_closed_form(0.1, 1.4, 1.0)) < 0.005);
}

TEST_CASE("sweep_n reproduces endpoint closed forms and flags infeasible points") {
    std::vector<double> grid;
    for (int i = 1; i <= 19; ++i) grid.push_back(0.1 * i);
    const DeltaCurve c = sweep_n(0.1, 1.0, grid, 20, 10, 1);
    REQUIRE(c.grid.size() == 19);
    CHECK(c.closed_form.front() == doctest::Approx(0.0033333).epsilon(1e-4));
    CHECK(c.closed_form.back() == doctest::Approx(-0.5019298).epsilon(1e-6));
    for (uint8_t f : c.feasible) CHECK(f == 1);

    // n below x is infeasible and must be flagged, not computed
    const DeltaCurve inf = sweep_n(0.5, 1.0, {0.1, 0.5, 1.0}, 20, 10, 1);
    CHECK(inf.feasible[0] == 0);
    CHECK(inf.feasible[1] == 1);
    CHECK(inf.feasible[2] == 1);
}

TEST_CASE("sweep_x brackets the sign change near the predicted threshold") {
    std::vector<double> grid;
    for (int i = 0; i <= 12; ++i) grid.push_back(0.05 * i);
    const DeltaCurve c = sweep_x(1.4, 1.0, grid, 100000, 10, 5);
    REQUIRE(c.grid.size() == 13);
    double last_neg = -1.0, first_pos = -1.0;
    for (size_t i = 0; i < c.grid.size(); ++i) {
        if (!c.feasible[i]) continue;
        if (c.emp_mean[i] < 0.0) last_neg = c.grid[i];
        if (first_pos < 0.0 && c.emp_mean[i] > 0.0 && c.grid[i] > 0.3) first_pos = c.grid[i];
    }
    CHECK(last_neg >= 0.40);
    CHECK(first_pos > 0.0);
    CHECK(first_pos <= 0.48);

    const DeltaCurve single = sweep_x(1.4, 1.0, {0.1}, 20, 10, 1);
    CHECK(single.grid.size() == 1);
    CHECK_THROWS_AS(sweep_x(1.4, 1.0, {}, 20, 10, 1), nq::ConfigError);
}

TEST_CASE("monte carlo oracle") {
    const McEstimate est = monte_carlo_expected_qe(0.1, 1.4, 1.0, 1000000, 3);
    CHECK(std::abs(est.value - 0.2561905) < 0.005);
    const McEstimate rerun = monte_carlo_expected_qe(0.1, 1.4, 1.0, 1000000, 3);
    CHECK(est.value == rerun.value);

    // one-sided case: support [0, 2b] never crosses the threshold
    const McEstimate side = monte_carlo_expected_qe(1.0, 1.0, 1.0, 1000000, 9);
    CHECK(std::abs(side.value - 1.0 / 3.0) < 0.005);
    CHECK(expected_qe_closed_form(1.0, 1.0, 1.0) == doctest::Approx(1.0 / 3.0));

    CHECK_THROWS_AS(monte_carlo_expected_qe(0.1, 1.4, 1.0, 0, 1), nq::ConfigError);
}
