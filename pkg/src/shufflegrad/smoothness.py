"""Smoothness moduli and stepsize/epoch planning.

A smoothness modulus is a non-decreasing function ``ell`` bounding the
Hessian norm by a function of the gradient norm.  From a modulus plus a
handful of measured problem statistics, this module derives the bounded
region a run provably stays inside, the effective curvature constant on
that region, and a constant stepsize together with an epoch count for
one of six convergence recipes:

1. random reshuffling, nonconvex
2. arbitrary permutations, nonconvex
3. random reshuffling, strongly convex
4. arbitrary permutations, strongly convex
5. random reshuffling, convex
6. arbitrary permutations, convex

Recipes 1, 2, 3 and 5 bound component gradients through a variance
model (component-gradient variance <= slope * ||full gradient||^2 +
offset^2).  Recipes 4 and 6 instead take a caller-supplied bound on the
largest component gradient over the initial sublevel set, usually from
:func:`estimate_sublevel_gradient_bound`, and are flagged heuristic.

Every emitted plan stores the named inequality checks it satisfies with
their numeric margins; :func:`reevaluate_plan` re-derives each verdict
in exact rational arithmetic (logarithms evaluated at 60 significant
digits) as an independent audit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import mpmath
import numpy as np

__all__ = [
    "EllFunction",
    "ConstantsBundle",
    "PlanCheck",
    "StepsizePlan",
    "PlanInfeasibleError",
    "solve_gradient_bound",
    "component_gradient_bound",
    "constants_for_recipe",
    "candidate_stepsize",
    "stepsize_plan",
    "reevaluate_plan",
    "SublevelGradientEstimate",
    "estimate_sublevel_gradient_bound",
]

RECIPES = (1, 2, 3, 4, 5, 6)
RECIPE_NAMES = {
    1: "random reshuffling, nonconvex",
    2: "arbitrary permutations, nonconvex",
    3: "random reshuffling, strongly convex",
    4: "arbitrary permutations, strongly convex",
    5: "random reshuffling, convex",
    6: "arbitrary permutations, convex",
}
# Recipes whose constants come from the variance model rather than a
# sampled sublevel bound.
VARIANCE_RECIPES = (1, 2, 3, 5)


@dataclass(frozen=True)
class EllFunction:
    """Non-decreasing bound ell(u) on curvature at gradient norm u.

    kind: "constant", "affine", "power" (c*u**q + c0) or "custom".
    degree: growth exponent, must lie in [0, 2) (sub-quadratic).
    """

    kind: str
    params: tuple[float, ...] = ()
    degree: float = 0.0
    func: object = None

    @classmethod
    def constant(cls, c: float) -> "EllFunction":
        if c <= 0:
            raise ValueError(f"constant modulus must be positive, got {c}")
        return cls("constant", (float(c),), 0.0)

    @classmethod
    def affine(cls, base: float, slope: float) -> "EllFunction":
        if base < 0 or slope < 0 or base + slope == 0:
            raise ValueError(f"affine modulus needs base, slope >= 0 and not both 0, got ({base}, {slope})")
        return cls("affine", (float(base), float(slope)), 1.0 if slope > 0 else 0.0)

    @classmethod
    def power(cls, coeff: float, exponent: float, offset: float = 0.0) -> "EllFunction":
        if coeff <= 0 or offset < 0:
            raise ValueError(f"power modulus needs coeff > 0 and offset >= 0, got ({coeff}, {offset})")
        if not 0 <= exponent < 2:
            raise ValueError(f"growth exponent must lie in [0, 2), got {exponent}")
        return cls("power", (float(coeff), float(exponent), float(offset)), float(exponent))

    @classmethod
    def custom(cls, func, degree: float) -> "EllFunction":
        if not 0 <= degree < 2:
            raise ValueError(f"growth exponent must lie in [0, 2), got {degree}")
        return cls("custom", (), float(degree), func)

    def evaluate(self, u):
        if self.kind == "constant":
            return self.params[0] * np.ones_like(np.asarray(u, dtype=float)) if np.ndim(u) else self.params[0]
        if self.kind == "affine":
            base, slope = self.params
            return base + slope * u
        if self.kind == "power":
            coeff, exponent, offset = self.params
            return coeff * np.power(u, exponent) + offset
        return self.func(u)

    __call__ = evaluate

    def validate(self) -> None:
        """Spot-check positivity, monotonicity and sub-quadratic growth.

        Monotonicity is sampled on a log grid; sub-quadratic growth
        requires ell(u)/u^2 to fall strictly across u = 10^3..10^9.
        Raises ValueError on the first violated property.
        """
        if not self.evaluate(0.0) > 0:
            raise ValueError(f"modulus must be strictly positive at 0, got {self.evaluate(0.0)}")
        grid = np.concatenate([[0.0], np.logspace(-6, 9, 151)])
        vals = np.array([float(self.evaluate(u)) for u in grid])
        if np.any(np.diff(vals) < 0):
            i = int(np.argmax(np.diff(vals) < 0))
            raise ValueError(f"modulus decreases between u={grid[i]:.3g} and u={grid[i+1]:.3g}")
        ratios = [float(self.evaluate(10.0**k)) / 10.0 ** (2 * k) for k in range(3, 10)]
        if np.any(np.diff(ratios) >= 0):
            raise ValueError("modulus is not sub-quadratic: ell(u)/u^2 fails to decay over u=1e3..1e9")

    def describe(self) -> str:
        if self.kind == "constant":
            return f"constant {self.params[0]:g}"
        if self.kind == "affine":
            return f"affine {self.params[0]:g} + {self.params[1]:g}*u"
        if self.kind == "power":
            c, q, c0 = self.params
            return f"power {c:g}*u^{q:g} + {c0:g}"
        return f"custom (degree {self.degree:g})"

    def to_config(self) -> dict:
        if self.kind == "custom":
            raise ValueError("custom moduli cannot be serialized")
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_config(cls, cfg: dict) -> "EllFunction":
        kind = cfg.get("kind")
        params = cfg.get("params", [])
        if kind == "constant":
            return cls.constant(*params)
        if kind == "affine":
            return cls.affine(*params)
        if kind == "power":
            return cls.power(*params)
        raise ValueError(f"cannot rebuild modulus of kind {kind!r}")


def solve_gradient_bound(ell: EllFunction, budget: float) -> float:
    """Largest u with u^2 <= 2*ell(2u)*budget.

    Scans u = budget*2^k for k = -60..200 for the last sign change of
    u^2 - 2*ell(2u)*budget and bisects it for 60 iterations.  Assumes a
    single crossing on the scanned range (true for every sub-quadratic
    closed-form family here; multiple crossings would take the last).
    """
    if budget < 0:
        raise ValueError(f"budget must be non-negative, got {budget}")
    if budget == 0:
        return 0.0

    def residual(u):
        return u * u - 2.0 * float(ell.evaluate(2.0 * u)) * budget

    grid = [0.0] + [budget * 2.0**k for k in range(-60, 201)]
    vals = [residual(u) for u in grid]
    bracket = None
    for i in range(len(grid) - 1):
        if vals[i] <= 0 < vals[i + 1]:
            bracket = (grid[i], grid[i + 1])
    if bracket is None:
        raise ValueError(
            f"no crossing of u^2 = 2*ell(2u)*budget up to u={grid[-1]:.3g} "
            f"for modulus ({ell.describe()}); the modulus may grow too fast"
        )
    lo, hi = bracket
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if residual(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def component_gradient_bound(grad_bound: float, n: int, variance_slope: float,
                             noise_std: float) -> float:
    """Bound on any single component gradient implied by the variance model.

    Equals sqrt(2*(1 + n*slope)) * grad_bound + sqrt(2*n) * offset: a
    component gradient can exceed the full gradient by at most the
    worst-case share of the modeled deviation.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if variance_slope < 0 or noise_std < 0:
        raise ValueError("variance constants must be non-negative")
    return math.sqrt(2.0 * (1.0 + n * variance_slope)) * grad_bound + math.sqrt(2.0 * n) * noise_std


@dataclass(frozen=True)
class ConstantsBundle:
    """Derived constants tying one problem's statistics to one recipe.

    Fields unused by the recipe are None.  ``value_gap_bound`` caps the
    objective gap along the run, ``grad_norm_bound`` is the implied full
    gradient bound, ``component_grad_bound`` bounds any single component
    gradient, and ``smoothness_bound`` is the modulus evaluated at twice
    the component bound (the effective curvature constant).
    """

    recipe: int
    ell: EllFunction
    n: int
    initial_gap: float
    eps: float
    failure_prob: float | None = None
    variance_slope: float | None = None
    noise_std: float | None = None
    strong_convexity: float | None = None
    optimum_noise_std: float | None = None
    initial_distance_sq: float | None = None
    value_gap_bound: float | None = None
    grad_norm_bound: float | None = None
    component_grad_bound: float | None = None
    smoothness_bound: float | None = None
    gprime_heuristic: bool = False

    def report(self) -> str:
        lines = [
            f"recipe = {self.recipe} ({RECIPE_NAMES[self.recipe]})",
            f"modulus = {self.ell.describe()}",
            f"n = {self.n}",
            f"initial_gap = {self.initial_gap:.17g}",
            f"eps = {self.eps:.17g}",
        ]
        optional = [
            ("failure_prob", self.failure_prob),
            ("variance_slope", self.variance_slope),
            ("noise_std", self.noise_std),
            ("strong_convexity", self.strong_convexity),
            ("optimum_noise_std", self.optimum_noise_std),
            ("initial_distance_sq", self.initial_distance_sq),
            ("value_gap_bound", self.value_gap_bound),
            ("grad_norm_bound", self.grad_norm_bound),
            ("component_grad_bound", self.component_grad_bound),
            ("smoothness_bound", self.smoothness_bound),
        ]
        for name, val in optional:
            if val is not None:
                lines.append(f"{name} = {val:.17g}")
        if self.gprime_heuristic:
            lines.append("component_grad_bound_source = sampled heuristic")
        return "\n".join(lines)


def _need(recipe: int, **stats):
    missing = [name for name, val in stats.items() if val is None]
    if missing:
        raise ValueError(
            f"recipe {recipe} ({RECIPE_NAMES[recipe]}) needs statistics: {', '.join(missing)}"
        )


def constants_for_recipe(recipe: int, ell: EllFunction, *, initial_gap: float, n: int,
                         eps: float, variance_slope: float | None = None,
                         noise_std: float | None = None, failure_prob: float | None = None,
                         strong_convexity: float | None = None,
                         optimum_noise_std: float | None = None,
                         initial_distance_sq: float | None = None,
                         component_grad_bound_value: float | None = None,
                         gprime_heuristic: bool = False) -> ConstantsBundle:
    """Derive the constants bundle for a recipe from problem statistics."""
    if recipe not in RECIPES:
        raise ValueError(f"recipe must be one of {RECIPES}, got {recipe}")
    if initial_gap <= 0:
        raise ValueError(f"initial_gap must be positive, got {initial_gap}")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if failure_prob is not None and not 0 < failure_prob < 1:
        raise ValueError(f"failure_prob must lie in (0, 1), got {failure_prob}")

    gap_bound = grad_bound = comp_bound = None
    if recipe in VARIANCE_RECIPES:
        if recipe == 1:
            _need(recipe, variance_slope=variance_slope, noise_std=noise_std,
                  failure_prob=failure_prob)
            gap_bound = 4.0 * initial_gap / failure_prob
        elif recipe == 2:
            _need(recipe, variance_slope=variance_slope, noise_std=noise_std)
            gap_bound = 2.0 * initial_gap
        elif recipe == 3:
            _need(recipe, variance_slope=variance_slope, noise_std=noise_std,
                  failure_prob=failure_prob, strong_convexity=strong_convexity)
            gap_bound = max(
                (3.0 * noise_std**2 / (4.0 * strong_convexity)) * math.log(4.0 / eps)
                + initial_gap,
                4.0 * initial_gap / failure_prob,
            )
        else:
            _need(recipe, variance_slope=variance_slope, noise_std=noise_std,
                  failure_prob=failure_prob, optimum_noise_std=optimum_noise_std,
                  initial_distance_sq=initial_distance_sq)
            gap_bound = 4.0 * initial_gap / failure_prob
        grad_bound = solve_gradient_bound(ell, gap_bound)
        comp_bound = component_gradient_bound(grad_bound, n, variance_slope, noise_std)
    else:
        if recipe == 4:
            _need(recipe, strong_convexity=strong_convexity,
                  optimum_noise_std=optimum_noise_std,
                  component_grad_bound_value=component_grad_bound_value)
        else:
            _need(recipe, component_grad_bound_value=component_grad_bound_value,
                  initial_distance_sq=initial_distance_sq)
        comp_bound = float(component_grad_bound_value)

    smooth = float(ell.evaluate(2.0 * comp_bound))
    return ConstantsBundle(
        recipe=recipe, ell=ell, n=n, initial_gap=initial_gap, eps=eps,
        failure_prob=failure_prob, variance_slope=variance_slope, noise_std=noise_std,
        strong_convexity=strong_convexity, optimum_noise_std=optimum_noise_std,
        initial_distance_sq=initial_distance_sq, value_gap_bound=gap_bound,
        grad_norm_bound=grad_bound, component_grad_bound=comp_bound,
        smoothness_bound=smooth, gprime_heuristic=gprime_heuristic,
    )


@dataclass(frozen=True)
class PlanCheck:
    """One named inequality of a plan, in the form lhs <= rhs."""

    name: str
    lhs: float
    rhs: float

    @property
    def satisfied(self) -> bool:
        return self.lhs <= self.rhs

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs


@dataclass(frozen=True)
class StepsizePlan:
    """A constant per-epoch stepsize and epoch count for one recipe."""

    recipe: int
    eta: float
    epochs: int
    bundle: ConstantsBundle
    checks: tuple[PlanCheck, ...]
    candidate_eta: float | None = None
    target_epochs: int | None = None

    @property
    def valid(self) -> bool:
        return all(c.satisfied for c in self.checks)

    def per_step_size(self, batch_size: int = 1) -> float:
        """Per-component-step size eta / ceil(n / batch_size)."""
        steps = -(-self.bundle.n // batch_size)
        return self.eta / steps

    def report(self) -> str:
        lines = [
            self.bundle.report(),
            f"eta = {self.eta:.17g}",
            f"epochs = {self.epochs}",
        ]
        if self.candidate_eta is not None:
            lines.append(f"candidate_eta = {self.candidate_eta:.17g}")
        for c in self.checks:
            lines.append(
                f"check {c.name}: {'ok' if c.satisfied else 'VIOLATED'} "
                f"(lhs = {c.lhs:.17g}, rhs = {c.rhs:.17g}, margin = {c.margin:.17g})"
            )
        return "\n".join(lines)

    def to_config(self) -> dict:
        b = self.bundle
        return {
            "recipe": self.recipe,
            "eta": self.eta,
            "epochs": self.epochs,
            "n": b.n,
            "ell": b.ell.to_config(),
            "constants": {
                k: v
                for k, v in {
                    "initial_gap": b.initial_gap,
                    "eps": b.eps,
                    "failure_prob": b.failure_prob,
                    "variance_slope": b.variance_slope,
                    "noise_std": b.noise_std,
                    "strong_convexity": b.strong_convexity,
                    "optimum_noise_std": b.optimum_noise_std,
                    "initial_distance_sq": b.initial_distance_sq,
                    "value_gap_bound": b.value_gap_bound,
                    "grad_norm_bound": b.grad_norm_bound,
                    "component_grad_bound": b.component_grad_bound,
                    "smoothness_bound": b.smoothness_bound,
                }.items()
                if v is not None
            },
            "heuristic": b.gprime_heuristic,
        }


class PlanInfeasibleError(RuntimeError):
    """No (eta, epochs) pair satisfies the recipe's inequalities."""

    def __init__(self, message: str, checks: tuple[PlanCheck, ...] = ()):
        super().__init__(message)
        self.checks = checks


def candidate_stepsize(bundle: ConstantsBundle) -> float | None:
    """Closed-form suggested stepsize for recipes with a free stepsize.

    Returns None for recipes 3 and 4, whose stepsize is pinned to the
    epoch count.  The suggestion ignores the cube-sum constraints and
    may be reduced by the planner.
    """
    L = bundle.smoothness_bound
    n, eps = bundle.n, bundle.eps
    if bundle.recipe == 1:
        return math.sqrt(n) * eps / (2.0 * L * math.sqrt(bundle.variance_slope / n + 1.0))
    if bundle.recipe == 2:
        return eps / (L * math.sqrt(2.0 * (3.0 * bundle.variance_slope + 2.0)))
    if bundle.recipe == 5:
        return math.sqrt(n * eps) / (2.0 * L * math.sqrt(bundle.variance_slope / n + 1.0))
    if bundle.recipe == 6:
        return math.sqrt(3.0 * eps / (2.0 * L)) / bundle.component_grad_bound
    return None


def _log_sqrtn_t(n: int, t: float) -> float:
    return math.log(math.sqrt(n) * t)


def _checks_for(bundle: ConstantsBundle, eta: float, epochs: int) -> tuple[PlanCheck, ...]:
    """Named inequalities (lhs <= rhs form) for the recipe at (eta, epochs)."""
    r = bundle.recipe
    n = bundle.n
    L = bundle.smoothness_bound
    gap = bundle.initial_gap
    eps = bundle.eps
    A = bundle.variance_slope
    sig = bundle.noise_std
    delta = bundle.failure_prob
    mu = bundle.strong_convexity
    sig_star = bundle.optimum_noise_std
    T = float(epochs)
    checks: list[PlanCheck] = []

    if r == 1:
        checks.append(PlanCheck("eta_cap", eta, 1.0 / (2.0 * L * math.sqrt(A / n + 1.0))))
        cube = math.inf if sig == 0 else n * gap / (L * L * sig * sig)
        checks.append(PlanCheck("cube_sum", T * eta**3, cube))
        checks.append(PlanCheck("epoch_floor", 32.0 * gap / (eta * delta * eps * eps), T))
    elif r == 2:
        checks.append(PlanCheck("eta_cap", eta, 1.0 / (L * math.sqrt(2.0 * (3.0 * A + 2.0)))))
        cube = math.inf if sig == 0 else 2.0 * gap / (3.0 * sig * sig * L * L)
        checks.append(PlanCheck("cube_sum", T * eta**3, cube))
        checks.append(PlanCheck("epoch_floor", 8.0 * gap / (eta * eps * eps), T))
    elif r == 3:
        ln = _log_sqrtn_t(n, T)
        formula = 4.0 * ln / (mu * T)
        checks.append(PlanCheck("eta_formula", abs(eta - formula), 1e-12 * formula))
        checks.append(PlanCheck("epoch_floor_gap",
                                4.0 * math.sqrt(gap / (n * delta * eps)), T))
        ratio = T / ln
        scale = 4.0 / mu
        checks.append(PlanCheck("iteration_floor", scale * 2.0, ratio))
        checks.append(PlanCheck("curvature_cap",
                                scale * L * math.sqrt(2.0 * (3.0 * A + 2.0)), ratio))
        checks.append(PlanCheck("noise_cap",
                                scale * L * sig * math.sqrt(8.0 / (n * mu * delta * eps)), ratio))
        checks.append(PlanCheck("gap_cube",
                                scale * (T * sig * sig * L * L / (n * gap)) ** (1.0 / 3.0), ratio))
    elif r == 4:
        ln = math.log(T)
        formula = 6.0 * ln / (mu * T)
        checks.append(PlanCheck("eta_formula", abs(eta - formula), 1e-12 * formula))
        cap = math.inf if sig_star == 0 else gap * mu * mu / (9.0 * (mu * mu + L * L) * sig_star**2)
        checks.append(PlanCheck("eta_cap", eta, cap))
        checks.append(PlanCheck("epoch_floor_curvature", 12.0 * L * L * ln / (mu * mu), T))
        budget = (gap + 108.0 * (mu * mu + L * L) * sig_star**2 * ln * ln / mu**3) / (T * T)
        checks.append(PlanCheck("accuracy_budget", budget, eps))
    elif r == 5:
        d2 = bundle.initial_distance_sq
        checks.append(PlanCheck("eta_cap", eta, 1.0 / (2.0 * L * math.sqrt(A / n + 1.0))))
        cube1 = math.inf if sig == 0 else n * gap / (sig * sig * L * L)
        checks.append(PlanCheck("cube_sum_noise", T * eta**3, cube1))
        cube2 = math.inf if sig_star == 0 else 3.0 * n * d2 / (2.0 * L * sig_star**2)
        checks.append(PlanCheck("cube_sum_optimum_noise", T * eta**3, cube2))
        checks.append(PlanCheck("epoch_floor", 4.0 * d2 / (eta * delta * eps), T))
    else:
        d2 = bundle.initial_distance_sq
        gp = bundle.component_grad_bound
        checks.append(PlanCheck("eta_cap", eta, math.sqrt(3.0 * eps / (2.0 * L)) / gp))
        checks.append(PlanCheck("epoch_floor", d2 / (eta * eps), T))
    return tuple(checks)


def _free_eta_upper_bounds(bundle: ConstantsBundle) -> float:
    """Largest eta consistent with all constraints for recipes 1, 2, 5, 6.

    Combines the direct stepsize caps with the caps obtained by
    substituting the epoch floor into each cube-sum constraint, so the
    pair (eta, ceil(floor)) is feasible up to integer rounding.
    """
    r = bundle.recipe
    n, gap, eps = bundle.n, bundle.initial_gap, bundle.eps
    L = bundle.smoothness_bound
    A = bundle.variance_slope
    sig = bundle.noise_std
    delta = bundle.failure_prob
    bounds = []
    if r == 1:
        bounds.append(1.0 / (2.0 * L * math.sqrt(A / n + 1.0)))
        if sig > 0:
            bounds.append(eps * math.sqrt(n * delta / 32.0) / (L * sig))
    elif r == 2:
        bounds.append(1.0 / (L * math.sqrt(2.0 * (3.0 * A + 2.0))))
        if sig > 0:
            bounds.append(eps / (sig * L * math.sqrt(12.0)))
    elif r == 5:
        d2 = bundle.initial_distance_sq
        sig_star = bundle.optimum_noise_std
        bounds.append(1.0 / (2.0 * L * math.sqrt(A / n + 1.0)))
        if sig > 0:
            bounds.append(math.sqrt(n * gap * delta * eps / (4.0 * d2 * sig * sig * L * L)))
        if sig_star > 0:
            bounds.append(math.sqrt(3.0 * n * delta * eps / (8.0 * L * sig_star**2)))
    else:
        bounds.append(math.sqrt(3.0 * eps / (2.0 * L)) / bundle.component_grad_bound)
    return min(bounds)


def _epoch_floor(bundle: ConstantsBundle, eta: float) -> float:
    r = bundle.recipe
    gap, eps = bundle.initial_gap, bundle.eps
    if r == 1:
        return 32.0 * gap / (eta * bundle.failure_prob * eps * eps)
    if r == 2:
        return 8.0 * gap / (eta * eps * eps)
    if r == 5:
        return 4.0 * bundle.initial_distance_sq / (eta * bundle.failure_prob * eps)
    return bundle.initial_distance_sq / (eta * eps)


def _assemble(bundle: ConstantsBundle, eta: float, epochs: int,
              candidate: float | None, target: int | None) -> StepsizePlan:
    return StepsizePlan(bundle.recipe, eta, epochs, bundle,
                        _checks_for(bundle, eta, epochs),
                        candidate_eta=candidate, target_epochs=target)


def _exact_failures(plan: StepsizePlan) -> list[str]:
    return [name for name, ok in reevaluate_plan(plan) if not ok]


def _plan_free_eta(bundle: ConstantsBundle, target_epochs: int | None) -> StepsizePlan:
    """Planner for recipes 1, 2, 5, 6 (stepsize not pinned to T)."""
    candidate = candidate_stepsize(bundle)
    eta = min(candidate, _free_eta_upper_bounds(bundle))
    if target_epochs is None:
        # The stepsize starts at its combined upper bound, so rounding
        # (ceil on the epoch floor, float error on caps met with
        # equality) can leave a check violated by an ulp or an epoch.
        # Shave eta geometrically and bump the epoch count until both
        # the float checks and the exact audit pass.
        shave = 2.0**-44
        last = None
        for _ in range(120):
            epochs = max(1, math.ceil(_epoch_floor(bundle, eta)))
            plan = _assemble(bundle, eta, epochs, candidate, None)
            last = plan
            if plan.valid:
                bad = _exact_failures(plan)
                if not bad:
                    return plan
                if set(bad) == {"epoch_floor"}:
                    for extra in (1, 2, 3):
                        bumped = _assemble(bundle, eta, epochs + extra, candidate, None)
                        if bumped.valid and not _exact_failures(bumped):
                            return bumped
            eta *= 1.0 - shave
            shave = min(shave * 4.0, 0.5)
        bad = next((c for c in last.checks if not c.satisfied), None)
        detail = (f"; binding constraint {bad.name!r} (lhs = {bad.lhs:.6g}, "
                  f"rhs = {bad.rhs:.6g})") if bad else ""
        raise PlanInfeasibleError(
            f"recipe {bundle.recipe}: no feasible stepsize found{detail}", last.checks)
    # Pinned epoch count: reduce eta to meet the cube-sum bounds at that
    # count; a violated epoch floor cannot be fixed by reducing eta.
    for _ in range(60):
        plan = _assemble(bundle, eta, target_epochs, candidate, target_epochs)
        float_bad = [c.name for c in plan.checks if not c.satisfied]
        exact_bad = _exact_failures(plan) if not float_bad else float_bad
        if not exact_bad:
            return plan
        if "epoch_floor" in exact_bad:
            floor = next(c for c in plan.checks if c.name == "epoch_floor")
            raise PlanInfeasibleError(
                f"recipe {bundle.recipe}: target epoch count {target_epochs} violates "
                f"'epoch_floor' (lhs = {floor.lhs:.6g}, rhs = {floor.rhs:.6g})",
                plan.checks)
        for c in plan.checks:
            if c.name.startswith("cube_sum") and c.lhs > 0 and math.isfinite(c.rhs):
                cap = (c.rhs / target_epochs) ** (1.0 / 3.0)
                if eta > cap * (1.0 - 1e-12):
                    eta = cap * (1.0 - 1e-12)
        eta *= 1.0 - 2.0**-44
    raise PlanInfeasibleError(
        f"recipe {bundle.recipe}: could not settle a stepsize for target epoch "
        f"count {target_epochs}", plan.checks)


def _plan_pinned_eta(bundle: ConstantsBundle, target_epochs: int | None) -> StepsizePlan:
    """Fixed-point planner for recipes 3 and 4 (stepsize pinned to T).

    Starts at T = 2 and repeatedly raises T to the largest epoch floor
    implied by the current iterate, accepting the first T at which every
    inequality holds (at most 100 iterations).
    """
    r = bundle.recipe
    mu = bundle.strong_convexity
    L = bundle.smoothness_bound
    n = bundle.n

    def eta_at(T: int) -> float:
        if r == 3:
            return 4.0 * _log_sqrtn_t(n, float(T)) / (mu * T)
        return 6.0 * math.log(float(T)) / (mu * T)

    def violated_floor(T: int) -> float | None:
        """Smallest T' >= T suggested by the binding constraints, or None if feasible."""
        checks = _checks_for(bundle, eta_at(T), T)
        if all(c.satisfied for c in checks):
            return None
        proposal = float(T)
        if r == 3:
            ln = _log_sqrtn_t(n, float(T))
            for c in checks:
                if c.satisfied:
                    continue
                if c.name == "epoch_floor_gap":
                    proposal = max(proposal, c.lhs)
                else:
                    proposal = max(proposal, c.lhs * ln)
        else:
            ln = math.log(float(T))
            for c in checks:
                if c.satisfied:
                    continue
                if c.name == "epoch_floor_curvature":
                    proposal = max(proposal, c.lhs)
                elif c.name == "eta_cap":
                    proposal = max(proposal, 6.0 * ln / (mu * c.rhs))
                elif c.name == "accuracy_budget":
                    proposal = max(proposal, math.sqrt(c.lhs / c.rhs) * T)
        return max(proposal, T * 1.01)

    if target_epochs is not None:
        plan = _assemble(bundle, eta_at(target_epochs), target_epochs, None, target_epochs)
        bad_names = [c.name for c in plan.checks if not c.satisfied] or _exact_failures(plan)
        if bad_names:
            bad = next(c for c in plan.checks if c.name == bad_names[0])
            raise PlanInfeasibleError(
                f"recipe {r}: target epoch count {target_epochs} violates {bad.name!r} "
                f"(lhs = {bad.lhs:.6g}, rhs = {bad.rhs:.6g})", plan.checks)
        return plan

    T = 2
    for _ in range(100):
        proposal = violated_floor(T)
        if proposal is None:
            # Every float check holds; raising T only loosens the
            # constraints, so bump past any remaining exact-audit slack.
            for extra in range(100):
                plan = _assemble(bundle, eta_at(T + extra), T + extra, None, None)
                if plan.valid and not _exact_failures(plan):
                    return plan
            raise PlanInfeasibleError(
                f"recipe {r}: exact audit kept failing near epoch count {T}",
                plan.checks)
        T = max(T + 1, math.ceil(proposal))
    checks = _checks_for(bundle, eta_at(T), T)
    bad = next((c for c in checks if not c.satisfied), checks[0])
    raise PlanInfeasibleError(
        f"recipe {r}: epoch fixed point did not settle within 100 iterations; "
        f"binding constraint {bad.name!r} (lhs = {bad.lhs:.6g}, rhs = {bad.rhs:.6g})",
        checks)


def stepsize_plan(bundle: ConstantsBundle, target_epochs: int | None = None) -> StepsizePlan:
    """Derive (eta, epochs) satisfying every inequality of the recipe.

    Without a target the epoch count is the smallest integer satisfying
    the recipe's floor for the chosen stepsize.  With a target, the
    stepsize is reduced as needed (recipes with a free stepsize) or
    evaluated at the pinned formula (recipes 3 and 4); an unsatisfiable
    target raises :class:`PlanInfeasibleError` naming the binding
    constraint.
    """
    if target_epochs is not None and target_epochs < 1:
        raise ValueError(f"target epoch count must be >= 1, got {target_epochs}")
    if bundle.recipe in (3, 4):
        return _plan_pinned_eta(bundle, target_epochs)
    return _plan_free_eta(bundle, target_epochs)


def _frac(x: float) -> Fraction:
    return Fraction(float(x))


def reevaluate_plan(plan: StepsizePlan) -> list[tuple[str, bool]]:
    """Re-derive each plan inequality independently of the planner.

    Algebraic inequalities are decided in exact rational arithmetic
    (square roots cleared by squaring).  Inequalities involving
    logarithms (recipes 3 and 4) are decided with 60-digit arithmetic.
    """
    b = plan.bundle
    r = plan.recipe
    eta = _frac(plan.eta)
    T = Fraction(plan.epochs)
    n = Fraction(b.n)
    gap = _frac(b.initial_gap)
    eps = _frac(b.eps)
    L = _frac(b.smoothness_bound)
    results: list[tuple[str, bool]] = []

    if r in (1, 2, 5):
        A = _frac(b.variance_slope)
        sig = _frac(b.noise_std)
        if r == 1:
            delta = _frac(b.failure_prob)
            results.append(("eta_cap", 4 * eta**2 * L**2 * (A / n + 1) <= 1))
            results.append(("cube_sum", sig == 0 or T * eta**3 * L**2 * sig**2 <= n * gap))
            results.append(("epoch_floor", T * eta * delta * eps**2 >= 32 * gap))
        elif r == 2:
            results.append(("eta_cap", 2 * eta**2 * L**2 * (3 * A + 2) <= 1))
            results.append(("cube_sum", sig == 0 or 3 * T * eta**3 * sig**2 * L**2 <= 2 * gap))
            results.append(("epoch_floor", T * eta * eps**2 >= 8 * gap))
        else:
            delta = _frac(b.failure_prob)
            d2 = _frac(b.initial_distance_sq)
            sig_star = _frac(b.optimum_noise_std)
            results.append(("eta_cap", 4 * eta**2 * L**2 * (A / n + 1) <= 1))
            results.append(("cube_sum_noise", sig == 0 or T * eta**3 * sig**2 * L**2 <= n * gap))
            results.append(("cube_sum_optimum_noise",
                            sig_star == 0 or 2 * T * eta**3 * L * sig_star**2 <= 3 * n * d2))
            results.append(("epoch_floor", T * eta * delta * eps >= 4 * d2))
        return results

    if r == 6:
        d2 = _frac(b.initial_distance_sq)
        gp = _frac(b.component_grad_bound)
        results.append(("eta_cap", 2 * eta**2 * gp**2 * L <= 3 * eps))
        results.append(("epoch_floor", T * eta * eps >= d2))
        return results

    with mpmath.workdps(60):
        mu = mpmath.mpf(b.strong_convexity)
        Lm = mpmath.mpf(b.smoothness_bound)
        Tm = mpmath.mpf(plan.epochs)
        etam = mpmath.mpf(plan.eta)
        gapm = mpmath.mpf(b.initial_gap)
        epsm = mpmath.mpf(b.eps)
        if r == 3:
            A = mpmath.mpf(b.variance_slope)
            sig = mpmath.mpf(b.noise_std)
            delta = mpmath.mpf(b.failure_prob)
            nm = mpmath.mpf(b.n)
            ln = mpmath.log(mpmath.sqrt(nm) * Tm)
            formula = 4 * ln / (mu * Tm)
            results.append(("eta_formula", abs(etam - formula) <= mpmath.mpf("1e-12") * formula))
            results.append(("epoch_floor_gap", Tm**2 >= 16 * gapm / (nm * delta * epsm)))
            ratio = Tm / ln
            scale = 4 / mu
            results.append(("iteration_floor", ratio >= scale * 2))
            results.append(("curvature_cap", ratio >= scale * Lm * mpmath.sqrt(2 * (3 * A + 2))))
            results.append(("noise_cap",
                            ratio >= scale * Lm * sig * mpmath.sqrt(8 / (nm * mu * delta * epsm))))
            results.append(("gap_cube",
                            ratio**3 >= scale**3 * Tm * sig**2 * Lm**2 / (nm * gapm)))
        else:
            sig_star = mpmath.mpf(b.optimum_noise_std)
            ln = mpmath.log(Tm)
            formula = 6 * ln / (mu * Tm)
            results.append(("eta_formula", abs(etam - formula) <= mpmath.mpf("1e-12") * formula))
            cap_ok = sig_star == 0 or (
                9 * etam * (mu**2 + Lm**2) * sig_star**2 <= gapm * mu**2
            )
            results.append(("eta_cap", bool(cap_ok)))
            results.append(("epoch_floor_curvature", Tm >= 12 * Lm**2 * ln / mu**2))
            budget = (gapm + 108 * (mu**2 + Lm**2) * sig_star**2 * ln**2 / mu**3) / Tm**2
            results.append(("accuracy_budget", budget <= epsm))
    return results


@dataclass(frozen=True)
class SublevelGradientEstimate:
    """Sampled lower estimate of the largest component gradient norm
    over the initial sublevel set.  Always a heuristic: sampling can
    only certify a lower bound."""

    value: float
    samples_accepted: int
    samples_drawn: int
    heuristic: bool = True


def estimate_sublevel_gradient_bound(problem, budget: int,
                                     seed: int = 0) -> SublevelGradientEstimate:
    """Rejection-sample the initial sublevel set for component gradients.

    Draws points around the initial point (and the optimum when known),
    keeps those with objective at most the initial objective, and takes
    the max component gradient norm over kept points plus the anchors.
    Larger budgets extend the same sample stream, so the estimate is
    non-decreasing in the budget for a fixed seed.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    w0 = problem.initial_point
    f0 = problem.full_value(w0)
    center = problem.optimum_point if problem.optimum_point is not None else w0
    mu = problem.strong_convexity
    if mu and problem.optimum_value is not None:
        radius = math.sqrt(max(2.0 * (f0 - problem.optimum_value) / mu, 0.0))
    elif mu:
        radius = float(np.linalg.norm(problem.full_gradient(w0))) / mu
    else:
        radius = 2.0 * max(float(np.linalg.norm(w0 - center)), 1.0)
    radius = max(radius, 1e-12)

    best = _max_component_gradient_norm(problem, w0)
    if problem.optimum_point is not None:
        best = max(best, _max_component_gradient_norm(problem, center))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x6E,)))
    accepted = 0
    tol = abs(f0) * 1e-12 + 1e-12
    for k in range(budget):
        direction = rng.standard_normal(problem.dim)
        norm = np.linalg.norm(direction)
        if norm == 0:
            continue
        direction /= norm
        # Alternate interior and boundary samples; extrema usually sit
        # on the sublevel boundary.
        if k % 2 == 0:
            r = radius * rng.uniform() ** (1.0 / problem.dim)
        else:
            r = radius
        w = center + r * direction
        if problem.full_value(w) <= f0 + tol:
            accepted += 1
            best = max(best, _max_component_gradient_norm(problem, w))
    return SublevelGradientEstimate(best, accepted, budget)


def _max_component_gradient_norm(problem, w) -> float:
    hook = getattr(problem, "max_component_gradient_norm", None)
    if hook is not None:
        return float(hook(w))
    return max(
        float(np.linalg.norm(problem.component_gradient(w, i))) for i in range(problem.n)
    )
