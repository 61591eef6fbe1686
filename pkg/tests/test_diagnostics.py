import math
from fractions import Fraction

import numpy as np
import pytest

from shufflegrad.diagnostics import (
    brute_force_partial_average_variance,
    check_gradient_bound,
    check_value_gradient_inequality,
    estimate_variance_constants,
    finite_difference_gradient,
    optimum_component_noise,
    probe_ell_envelope,
    sample_points_around,
)
from shufflegrad.problems import (
    PhaseRetrievalProblem,
    QuarticProblem,
    TinyQuadraticProblem,
)
from shufflegrad.shuffling import without_replacement_variance_factor
from shufflegrad.smoothness import EllFunction


class _Scalar1D:
    """Minimal single-variable objective for probing curvature."""

    def __init__(self, grad, ell=None, initial=2.0):
        self._grad = grad
        self.declared_ell = ell
        self.initial_point = np.array([float(initial)])
        self.dim = 1
        self.optimum_point = None

    def full_gradient(self, w):
        return np.array([self._grad(float(w[0]))])


class TestVarianceFit:
    def test_identical_components_fit_to_zero(self):
        problem = TinyQuadraticProblem(centers=((1.0, 2.0),) * 3,
                                       initial_point=(0.0, 0.0))
        fit = estimate_variance_constants(problem, sample_points_around(problem, seed=1))
        assert fit.slope == 0.0
        assert fit.noise_sq == 0.0
        assert fit.worst_margin == 0.0

    def test_tiny_quadratic_exact_constants(self):
        # deviation of component gradients from the mean is the center
        # spread, which is 1 for the unit-ball centers at every point
        problem = TinyQuadraticProblem()
        fit = estimate_variance_constants(problem, sample_points_around(problem, seed=0))
        assert fit.slope == 0.0
        assert fit.noise_sq == pytest.approx(1.0, abs=1e-12)
        assert abs(fit.worst_margin) <= 1e-12
        assert fit.noise_std == pytest.approx(1.0, abs=1e-12)
        assert fit.sample_count == 10  # two anchors plus eight draws

    def test_quartic_variance_identity(self):
        # per-point variance is exactly 49 * ||grad F||^2 + 770/21
        problem = QuarticProblem()
        rng = np.random.default_rng(11)
        for point in (np.zeros(problem.dim), rng.normal(1.0, 0.5, problem.dim)):
            full = problem.full_gradient(point)
            dev = 0.0
            for i in range(problem.n):
                d = problem.component_gradient(point, i) - full
                dev += float(d @ d)
            v = dev / problem.n
            g_sq = float(full @ full)
            assert v == pytest.approx(49.0 * g_sq + 770.0 / 21.0, rel=1e-12)

    def test_quartic_near_stationary_fit(self):
        problem = QuarticProblem()
        rng = np.random.default_rng(np.random.SeedSequence(entropy=8, spawn_key=(0xC2,)))
        points = [np.zeros(problem.dim)]
        points += [rng.normal(0.0, 0.005, problem.dim) for _ in range(5)]
        fit = estimate_variance_constants(problem, points)
        assert fit.slope == 0.0
        assert fit.noise_sq == pytest.approx(770.0 / 21.0, abs=1e-9)

    def test_quartic_spread_fit_is_feasible(self):
        problem = QuarticProblem()
        points = sample_points_around(problem, count=6, seed=3)
        fit = estimate_variance_constants(problem, points)
        assert fit.worst_margin <= 1e-9
        assert fit.noise_sq == pytest.approx(770.0 / 21.0, rel=1e-2)
        for w in points:
            full = problem.full_gradient(w)
            g_sq = float(full @ full)
            assert 49.0 * g_sq + 770.0 / 21.0 <= fit.slope * g_sq + fit.noise_sq + 1e-9

    def test_needs_two_points(self):
        problem = TinyQuadraticProblem()
        with pytest.raises(ValueError):
            estimate_variance_constants(problem, [problem.initial_point])


class TestEnvelopeProbe:
    def test_identity_hessian(self):
        problem = TinyQuadraticProblem()
        report = probe_ell_envelope(problem, sample_points_around(problem, count=4))
        assert report.stagnated_count == 0
        assert report.violations == []
        for probe in report.probes:
            assert probe.hessian_norm == pytest.approx(1.0, abs=1e-4)
            assert probe.ell_bound == pytest.approx(1.05, abs=1e-12)

    def test_detects_undeclared_curvature(self):
        # pure quartic in one variable: curvature 12x^2 outgrows the
        # power modulus; at x = 2 the estimate is 48 against a bound
        # of 3 * 32^(2/3) * 1.05 ~ 31.8
        problem = _Scalar1D(lambda x: 4.0 * x**3)
        report = probe_ell_envelope(problem, [np.array([2.0])],
                                    ell=EllFunction.power(3.0, 2.0 / 3.0))
        assert len(report.probes) == 1
        probe = report.probes[0]
        assert probe.violated
        assert probe.hessian_norm == pytest.approx(48.0, rel=1e-3)
        assert probe.grad_norm == pytest.approx(32.0, rel=1e-3)
        assert report.violations == [0]

    def test_exponential_envelope_holds_on_grid(self):
        problem = _Scalar1D(lambda x: math.exp(x) - math.exp(-x) + x)
        report = probe_ell_envelope(
            problem, [np.array([x]) for x in np.linspace(-10.0, 10.0, 9)],
            ell=EllFunction.affine(5.0, 5.0))
        assert report.stagnated_count == 0
        assert report.violations == []

    def test_estimates_match_analytic_curvature(self):
        problem = _Scalar1D(lambda x: math.exp(x) - math.exp(-x) + x)
        xs = [0.0, 1.0, 2.0, 3.0]
        report = probe_ell_envelope(problem, [np.array([x]) for x in xs],
                                    ell=EllFunction.affine(5.0, 5.0))
        for x, probe in zip(xs, report.probes):
            expected = math.exp(x) + math.exp(-x) + 1.0
            assert probe.hessian_norm == pytest.approx(expected, rel=1e-4)

    def test_no_modulus_reports_without_verdict(self):
        problem = _Scalar1D(lambda x: 4.0 * x**3)
        report = probe_ell_envelope(problem, [np.array([2.0])])
        assert report.probes[0].ell_bound is None
        assert not report.probes[0].violated

    def test_zero_hessian_converges(self):
        problem = _Scalar1D(lambda x: 3.0)  # linear objective
        report = probe_ell_envelope(problem, [np.array([1.0])],
                                    ell=EllFunction.constant(1.0))
        assert report.stagnated_count == 0
        assert report.probes[0].hessian_norm == 0.0
        assert not report.probes[0].violated

    def test_stagnation_is_counted_not_reported(self):
        problem = TinyQuadraticProblem()
        report = probe_ell_envelope(problem, sample_points_around(problem, count=2),
                                    power_iterations=1)
        assert report.probes == ()
        assert report.stagnated_count == 4

    def test_csv_dump(self, tmp_path):
        problem = TinyQuadraticProblem()
        report = probe_ell_envelope(problem, [problem.initial_point])
        path = tmp_path / "probes.csv"
        report.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "grad_norm,hessian_estimate,ell_bound,violated"
        assert len(lines) == 2
        assert lines[1].endswith(",0")


class TestBruteForceOracle:
    def test_matches_closed_form_exactly(self):
        rng = np.random.default_rng(21)
        for n in range(2, 7):
            vectors = [rng.integers(-5, 6, size=2).astype(float) for _ in range(n)]
            rows = [np.asarray(v) for v in vectors]
            mean = sum(rows) / n
            total = sum(Fraction(float((r - mean) @ (r - mean))) for r in rows)
            for k in range(1, n + 1):
                got = brute_force_partial_average_variance(vectors, k, exact=True)
                factor = without_replacement_variance_factor(n, k)
                assert got == factor * Fraction(total, n) or \
                    abs(float(got - factor * total / n)) < 1e-12

    def test_scalar_hand_value(self):
        # components 0 and 2: k = 1 prefixes are 0 or 2, each 1 away
        # from the mean, so the average squared deviation is 1
        assert brute_force_partial_average_variance([0.0, 2.0], 1) == pytest.approx(1.0)
        assert brute_force_partial_average_variance([0.0, 2.0], 2) == 0.0

    def test_full_prefix_has_zero_variance(self):
        rng = np.random.default_rng(5)
        vectors = [rng.normal(size=3) for _ in range(5)]
        assert brute_force_partial_average_variance(vectors, 5, exact=True) == 0

    def test_domain_errors(self):
        ok = [np.zeros(2)] * 3
        with pytest.raises(ValueError):
            brute_force_partial_average_variance(ok[:1], 1)
        with pytest.raises(ValueError):
            brute_force_partial_average_variance([np.zeros(2)] * 9, 1)
        with pytest.raises(ValueError):
            brute_force_partial_average_variance(ok, 0)
        with pytest.raises(ValueError):
            brute_force_partial_average_variance(ok, 4)
        with pytest.raises(ValueError):
            brute_force_partial_average_variance([np.zeros(2), np.zeros(3)], 1)


class TestPointwiseChecks:
    def test_gradient_bound_with_fitted_constants(self):
        problem = TinyQuadraticProblem()
        check = check_gradient_bound(problem, (2.0, 2.0), variance_slope=0.0,
                                     noise_std=1.0)
        assert check.name == "component_gradient_bound"
        assert check.lhs == pytest.approx(math.sqrt(13.0))
        assert check.rhs == pytest.approx(math.sqrt(2.0) * math.sqrt(8.0) + math.sqrt(8.0),
                                          abs=1e-6)
        assert check.satisfied

    def test_gradient_bound_detects_understated_noise(self):
        problem = TinyQuadraticProblem()
        check = check_gradient_bound(problem, (0.0, 0.0), variance_slope=0.0,
                                     noise_std=0.0)
        assert not check.satisfied  # component gradients are unit vectors

    def test_value_gradient_inequality_is_tight_for_quadratics(self):
        problem = TinyQuadraticProblem()
        for w in sample_points_around(problem, count=5, seed=2):
            check = check_value_gradient_inequality(problem, w)
            assert check.satisfied
            assert check.lhs == pytest.approx(check.rhs, abs=1e-8)

    def test_value_gradient_inequality_requires_inputs(self):
        noisy = PhaseRetrievalProblem(m=40, dim=8, seed=0, noise_std=1.0)
        with pytest.raises(ValueError, match="optimum"):
            check_value_gradient_inequality(noisy, noisy.initial_point,
                                            ell=EllFunction.constant(1.0))
        assert noisy.declared_ell is None
        with pytest.raises(ValueError, match="modulus"):
            check_value_gradient_inequality(noisy, noisy.initial_point,
                                            optimum_value=0.0)


class TestOptimumNoise:
    def test_matches_declared_variance(self):
        problem = TinyQuadraticProblem()
        got = optimum_component_noise(problem)
        assert got == pytest.approx(math.sqrt(problem.gradient_variance()), rel=1e-12)

    def test_point_override(self):
        problem = TinyQuadraticProblem()
        at_start = optimum_component_noise(problem, point=problem.initial_point)
        assert at_start > optimum_component_noise(problem)

    def test_requires_known_optimum(self):
        noisy = PhaseRetrievalProblem(m=40, dim=8, seed=0, noise_std=1.0)
        with pytest.raises(ValueError):
            optimum_component_noise(noisy)


class TestSamplePoints:
    def test_anchors_prepended(self):
        problem = TinyQuadraticProblem()
        points = sample_points_around(problem, count=3, seed=0)
        assert len(points) == 5
        np.testing.assert_array_equal(points[0], problem.initial_point)
        np.testing.assert_array_equal(points[1], problem.optimum_point)

    def test_anchors_disabled(self):
        problem = TinyQuadraticProblem()
        points = sample_points_around(problem, count=3, seed=0, include_anchors=False)
        assert len(points) == 3

    def test_deterministic_and_seed_sensitive(self):
        problem = TinyQuadraticProblem()
        a = sample_points_around(problem, count=4, seed=7)
        b = sample_points_around(problem, count=4, seed=7)
        c = sample_points_around(problem, count=4, seed=8)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert any(not np.array_equal(x, y) for x, y in zip(a[2:], c[2:]))

    def test_center_and_spread(self):
        problem = TinyQuadraticProblem()
        points = sample_points_around(problem, count=4, seed=0, spread=1e-12,
                                      center=(9.0, 9.0), include_anchors=False)
        for p in points:
            np.testing.assert_allclose(p, [9.0, 9.0], atol=1e-10)

    def test_count_validation(self):
        problem = TinyQuadraticProblem()
        assert sample_points_around(problem, count=0, include_anchors=False) == []
        with pytest.raises(ValueError):
            sample_points_around(problem, count=-1)


def test_finite_difference_gradient():
    def func(w):
        return math.sin(w[0]) + w[1] ** 2

    w = np.array([0.7, -1.3])
    got = finite_difference_gradient(func, w)
    np.testing.assert_allclose(got, [math.cos(0.7), -2.6], rtol=1e-7)
