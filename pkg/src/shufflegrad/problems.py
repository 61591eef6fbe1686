"""Finite-sum benchmark problems.

Every problem is F(w) = (1/n) * sum_i f(w; i) with per-component value
and gradient oracles plus vectorized full-batch versions.  Component
indices are 0-based.  Problems expose optional structure used elsewhere:
an analytic optimum when one is known, a strong convexity constant, and
a declared smoothness modulus (see :mod:`shufflegrad.smoothness`).
"""

from __future__ import annotations

import numpy as np

from .smoothness import EllFunction

__all__ = [
    "FiniteSumProblem",
    "QuarticProblem",
    "ExpStrongProblem",
    "PhaseRetrievalProblem",
    "DROProblem",
    "TinyQuadraticProblem",
    "dro_partial_objective",
    "build_problem",
]


class FiniteSumProblem:
    """Interface shared by all problems.

    Subclasses set ``n``, ``dim`` and implement ``_component_value``,
    ``_component_gradient``, ``full_value`` and ``full_gradient``.  The
    public component accessors validate inputs; inner optimization loops
    may call the underscore versions directly after validating once.
    """

    n: int
    dim: int

    def _check(self, w: np.ndarray, i: int | None = None) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise ValueError(f"point has shape {w.shape}, expected ({self.dim},)")
        if not np.isfinite(w).all():
            raise ValueError("point contains non-finite entries")
        if i is not None and not 0 <= i < self.n:
            raise IndexError(f"component index {i} out of range [0, {self.n})")
        return w

    def component_value(self, w, i: int) -> float:
        w = self._check(w, i)
        return self._component_value(w, i)

    def component_gradient(self, w, i: int) -> np.ndarray:
        w = self._check(w, i)
        return self._component_gradient(w, i)

    def _component_value(self, w: np.ndarray, i: int) -> float:
        raise NotImplementedError

    def _component_gradient(self, w: np.ndarray, i: int) -> np.ndarray:
        raise NotImplementedError

    def full_value(self, w) -> float:
        raise NotImplementedError

    def full_gradient(self, w) -> np.ndarray:
        raise NotImplementedError

    @property
    def initial_point(self) -> np.ndarray:
        return self._initial.copy()

    optimum_value: float | None = None
    strong_convexity: float | None = None
    declared_ell: EllFunction | None = None

    @property
    def optimum_point(self) -> np.ndarray | None:
        pt = getattr(self, "_optimum_point", None)
        return None if pt is None else pt.copy()


class QuarticProblem(FiniteSumProblem):
    """Separable quartic f(x; (i,k)) = x_i^4 + k*x_i on 50 coordinates.

    Components are indexed by (coordinate, offset) pairs with offsets
    -10..10, giving n = 50 * 21 = 1050.  The offsets cancel in the mean,
    so F(x) = (1/50) * sum_i x_i^4 with minimum 0 at the origin.  Flat
    component index of (coordinate c, offset k) is c*21 + (k+10).
    """

    DIM = 50
    OFFSETS = np.arange(-10, 11)

    def __init__(self):
        self.dim = self.DIM
        self.n = self.DIM * len(self.OFFSETS)
        self._coord = np.repeat(np.arange(self.DIM), len(self.OFFSETS))
        self._offset = np.tile(self.OFFSETS, self.DIM).astype(float)
        self._initial = np.ones(self.DIM)
        self._optimum_point = np.zeros(self.DIM)
        self.optimum_value = 0.0
        self.declared_ell = EllFunction.power(3.0, 2.0 / 3.0)

    def component_index(self, coordinate: int, offset: int) -> int:
        """Flat index of the component acting on ``coordinate`` with ``offset``."""
        if not 0 <= coordinate < self.DIM:
            raise IndexError(f"coordinate {coordinate} out of range")
        if not -10 <= offset <= 10:
            raise IndexError(f"offset {offset} out of range")
        return coordinate * len(self.OFFSETS) + (offset + 10)

    def _component_value(self, w, i):
        c = self._coord[i]
        return float(w[c] ** 4 + self._offset[i] * w[c])

    def _component_gradient(self, w, i):
        g = np.zeros(self.dim)
        c = self._coord[i]
        g[c] = 4.0 * w[c] ** 3 + self._offset[i]
        return g

    def full_value(self, w):
        w = np.asarray(w, dtype=float)
        return float(np.sum(w**4) / self.DIM)

    def full_gradient(self, w):
        w = np.asarray(w, dtype=float)
        return 4.0 * w**3 / self.DIM

    def max_component_gradient_norm(self, w) -> float:
        w = np.asarray(w, dtype=float)
        # max over offsets of |4w_c^3 + k| is 4|w_c|^3 + 10
        return float(4.0 * np.max(np.abs(w)) ** 3 + 10.0)


class ExpStrongProblem(FiniteSumProblem):
    """Strongly convex exponential sum on 50 coordinates.

    f(x; (j,k)) = exp(x_j - k) + exp(k - x_j) + 0.5*||x||^2 over the same
    (coordinate, offset) index set as :class:`QuarticProblem`.  Each
    component is 1-strongly convex.  By symmetry the minimizer is the
    origin.
    """

    DIM = 50
    OFFSETS = np.arange(-10, 11)

    def __init__(self):
        self.dim = self.DIM
        self.n = self.DIM * len(self.OFFSETS)
        self._coord = np.repeat(np.arange(self.DIM), len(self.OFFSETS))
        self._offset = np.tile(self.OFFSETS, self.DIM).astype(float)
        # sum_k exp(k) over k = -10..10; symmetric under k -> -k
        self._exp_sum = float(np.sum(np.exp(self.OFFSETS.astype(float))))
        self._initial = np.ones(self.DIM)
        self._optimum_point = np.zeros(self.DIM)
        self.optimum_value = self.full_value(self._optimum_point)
        self.strong_convexity = 1.0
        self.declared_ell = EllFunction.affine(5.0, 5.0)

    def component_index(self, coordinate: int, offset: int) -> int:
        if not 0 <= coordinate < self.DIM:
            raise IndexError(f"coordinate {coordinate} out of range")
        if not -10 <= offset <= 10:
            raise IndexError(f"offset {offset} out of range")
        return coordinate * len(self.OFFSETS) + (offset + 10)

    def _component_value(self, w, i):
        c = self._coord[i]
        k = self._offset[i]
        return float(np.exp(w[c] - k) + np.exp(k - w[c]) + 0.5 * np.dot(w, w))

    def _component_gradient(self, w, i):
        c = self._coord[i]
        k = self._offset[i]
        g = w.copy()
        g[c] += np.exp(w[c] - k) - np.exp(k - w[c])
        return g

    def full_value(self, w):
        w = np.asarray(w, dtype=float)
        coeff = self._exp_sum / self.n
        return float(coeff * np.sum(np.exp(w) + np.exp(-w)) + 0.5 * np.dot(w, w))

    def full_gradient(self, w):
        w = np.asarray(w, dtype=float)
        coeff = self._exp_sum / self.n
        return coeff * (np.exp(w) - np.exp(-w)) + w

    def max_component_gradient_norm(self, w) -> float:
        w = np.asarray(w, dtype=float)
        k = self.OFFSETS.astype(float)
        s = np.exp(w[:, None] - k[None, :]) - np.exp(k[None, :] - w[:, None])
        sq = np.dot(w, w) - w[:, None] ** 2 + (w[:, None] + s) ** 2
        return float(np.sqrt(np.max(sq)))


class PhaseRetrievalProblem(FiniteSumProblem):
    """Noisy quadratic measurements f(z; r) = 0.5*(y_r - (a_r.z)^2)^2.

    Measurement vectors and the true signal are drawn from
    Normal(0, 0.5*I); targets are y_r = (a_r.signal)^2 + Normal(0,
    noise_std^2) noise.  The run starts from z0 ~ Normal(5*ones, 0.5*I).
    With zero noise the true signal attains objective 0.
    """

    def __init__(self, m: int = 3000, dim: int = 100, seed: int = 0, noise_std: float = 4.0):
        if m < 1 or dim < 1:
            raise ValueError("need m >= 1 measurements and dim >= 1")
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0x50,)))
        scale = np.sqrt(0.5)
        signal = scale * rng.standard_normal(dim)
        vectors = scale * rng.standard_normal((m, dim))
        initial = 5.0 + scale * rng.standard_normal(dim)
        targets = (vectors @ signal) ** 2
        if noise_std > 0:
            targets = targets + noise_std * rng.standard_normal(m)
        self._init_from_data(vectors, targets, initial)
        self.signal = signal
        self.noise_std = float(noise_std)
        if noise_std == 0:
            self._optimum_point = signal.copy()
            self.optimum_value = 0.0

    @classmethod
    def from_data(cls, vectors, targets, initial_point) -> "PhaseRetrievalProblem":
        obj = cls.__new__(cls)
        obj._init_from_data(
            np.asarray(vectors, dtype=float),
            np.asarray(targets, dtype=float),
            np.asarray(initial_point, dtype=float),
        )
        obj.signal = None
        obj.noise_std = None
        return obj

    def _init_from_data(self, vectors, targets, initial):
        if vectors.ndim != 2 or targets.shape != (vectors.shape[0],):
            raise ValueError("vectors must be (m, dim) with matching targets (m,)")
        self.vectors = vectors
        self.targets = targets
        self.n, self.dim = vectors.shape
        self._initial = initial
        self._vector_norms = np.linalg.norm(vectors, axis=1)

    def _component_value(self, w, i):
        q = float(self.vectors[i] @ w)
        r = self.targets[i] - q * q
        return 0.5 * r * r

    def _component_gradient(self, w, i):
        a = self.vectors[i]
        q = a @ w
        return (2.0 * (q * q - self.targets[i]) * q) * a

    def full_value(self, w):
        w = np.asarray(w, dtype=float)
        q = self.vectors @ w
        r = self.targets - q * q
        return float(np.dot(r, r) / (2.0 * self.n))

    def full_gradient(self, w):
        w = np.asarray(w, dtype=float)
        q = self.vectors @ w
        return self.vectors.T @ ((2.0 / self.n) * (q * q - self.targets) * q)

    def max_component_gradient_norm(self, w) -> float:
        w = np.asarray(w, dtype=float)
        q = self.vectors @ w
        return float(np.max(np.abs(2.0 * (q * q - self.targets) * q) * self._vector_norms))


def _psi_star(t):
    """Conjugate penalty 0.25*max(t+2, 0)^2 - 1 of the chi-square divergence."""
    return 0.25 * np.square(np.maximum(t + 2.0, 0.0)) - 1.0


def _psi_star_prime(t):
    return 0.5 * np.maximum(t + 2.0, 0.0)


class DROProblem(FiniteSumProblem):
    """Distributionally robust regression over a joint (weights, shift) variable.

    Each component is psi*((loss_i(w) - theta)/lam) + theta where
    loss_i(w) = 0.5*(y_i - x_i.w)^2 + 0.1*sum_j log(1 + |w_j|) and
    psi*(t) = 0.25*max(t+2, 0)^2 - 1.  The optimization variable is the
    concatenation v = (w, theta), so dim = features + 1 with theta last.
    The log regularizer's subgradient at 0 is taken as 0.
    """

    LAM_DEFAULT = 0.01
    REG_WEIGHT = 0.1

    def __init__(self, features, targets, lam: float = LAM_DEFAULT, seed: int = 0,
                 initial_shift: float = 0.1):
        features = np.asarray(features, dtype=float)
        targets = np.asarray(targets, dtype=float)
        if features.ndim != 2 or targets.shape != (features.shape[0],):
            raise ValueError("features must be (rows, dim) with matching targets (rows,)")
        if lam <= 0:
            raise ValueError(f"lam must be positive, got {lam}")
        self.features = features
        self.targets = targets
        self.lam = float(lam)
        self.n, self.feature_dim = features.shape
        self.dim = self.feature_dim + 1
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xD0,)))
        self._initial = np.concatenate([rng.standard_normal(self.feature_dim), [initial_shift]])

    @classmethod
    def from_dataset(cls, dataset, lam: float = LAM_DEFAULT, seed: int = 0) -> "DROProblem":
        return cls(dataset.features, dataset.targets, lam=lam, seed=seed)

    def split(self, v: np.ndarray):
        """Split the joint variable into (weights, shift)."""
        return v[:-1], float(v[-1])

    def _regularizer(self, w):
        return self.REG_WEIGHT * float(np.sum(np.log1p(np.abs(w))))

    def sample_losses(self, v) -> np.ndarray:
        """Per-sample regularized losses at the weight part of ``v``."""
        w, _ = self.split(np.asarray(v, dtype=float))
        r = self.targets - self.features @ w
        return 0.5 * r * r + self._regularizer(w)

    def _component_value(self, v, i):
        w, theta = self.split(v)
        r = self.targets[i] - float(self.features[i] @ w)
        loss = 0.5 * r * r + self._regularizer(w)
        return float(_psi_star((loss - theta) / self.lam) + theta)

    def _component_gradient(self, v, i):
        w, theta = self.split(v)
        x = self.features[i]
        r = self.targets[i] - float(x @ w)
        loss = 0.5 * r * r + self._regularizer(w)
        coef = float(_psi_star_prime((loss - theta) / self.lam)) / self.lam
        loss_grad = -r * x + self.REG_WEIGHT * np.sign(w) / (1.0 + np.abs(w))
        g = np.empty(self.dim)
        g[:-1] = coef * loss_grad
        g[-1] = 1.0 - coef
        return g

    def full_value(self, v):
        v = np.asarray(v, dtype=float)
        _, theta = self.split(v)
        u = (self.sample_losses(v) - theta) / self.lam
        return float(np.mean(_psi_star(u)) + theta)

    def full_gradient(self, v):
        v = np.asarray(v, dtype=float)
        w, theta = self.split(v)
        r = self.targets - self.features @ w
        losses = 0.5 * r * r + self._regularizer(w)
        coef = _psi_star_prime((losses - theta) / self.lam) / self.lam
        reg_grad = self.REG_WEIGHT * np.sign(w) / (1.0 + np.abs(w))
        g = np.empty(self.dim)
        g[:-1] = self.features.T @ (-coef * r) / self.n + np.mean(coef) * reg_grad
        g[-1] = 1.0 - float(np.mean(coef))
        return g

    def max_component_gradient_norm(self, v) -> float:
        v = np.asarray(v, dtype=float)
        w, theta = self.split(v)
        r = self.targets - self.features @ w
        losses = 0.5 * r * r + self._regularizer(w)
        coef = _psi_star_prime((losses - theta) / self.lam) / self.lam
        reg_grad = self.REG_WEIGHT * np.sign(w) / (1.0 + np.abs(w))
        rows = -r[:, None] * self.features + reg_grad[None, :]
        sq = coef**2 * np.sum(rows * rows, axis=1) + (1.0 - coef) ** 2
        return float(np.sqrt(np.max(sq)))


def dro_partial_objective(problem: DROProblem, w, bracket=(-10.0, 10.0),
                          tol: float = 1e-8) -> float:
    """Objective at ``w`` minimized over the shift variable.

    Solves min_theta mean_i psi*((loss_i - theta)/lam) + theta by
    bracketing the root of the (non-decreasing, piecewise linear)
    derivative and bisecting with Brent's method to absolute tolerance
    ``tol`` in theta.  Raises if no bracket is found after expansion.
    """
    from scipy.optimize import brentq

    w = np.asarray(w, dtype=float)
    if w.shape == (problem.dim,):
        losses = problem.sample_losses(w)
    elif w.shape == (problem.feature_dim,):
        losses = problem.sample_losses(np.concatenate([w, [0.0]]))
    else:
        raise ValueError(f"weight vector has shape {w.shape}")
    lam = problem.lam

    def deriv(theta):
        return 1.0 - float(np.mean(_psi_star_prime((losses - theta) / lam))) / lam

    lo, hi = float(bracket[0]), float(bracket[1])
    if lo >= hi:
        raise ValueError(f"bracket must satisfy lo < hi, got {bracket}")
    for _ in range(200):
        if deriv(lo) <= 0 <= deriv(hi):
            break
        width = hi - lo
        if deriv(lo) > 0:
            lo -= width
        if deriv(hi) < 0:
            hi += width
    else:
        raise RuntimeError(f"no minimizer bracket for the shift in [{lo}, {hi}]")
    theta = brentq(deriv, lo, hi, xtol=tol * 1e-2)
    return float(np.mean(_psi_star((losses - theta) / lam)) + theta)


class TinyQuadraticProblem(FiniteSumProblem):
    """Exact-arithmetic quadratic f(w; i) = 0.5*||w - c_i||^2.

    Small integer centers keep every quantity computable by hand: the
    optimum is the center mean, the component-gradient variance is
    constant in w, and each component is 1-strongly convex with constant
    curvature 1.
    """

    def __init__(self, centers=((1, 0), (-1, 0), (0, 1), (0, -1)), initial_point=None):
        centers = np.asarray(centers, dtype=float)
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ValueError("centers must be a non-empty (n, dim) array")
        self.centers = centers
        self.n, self.dim = centers.shape
        self._mean_center = centers.mean(axis=0)
        if initial_point is None:
            initial_point = np.full(self.dim, 2.0)
        self._initial = np.asarray(initial_point, dtype=float)
        if self._initial.shape != (self.dim,):
            raise ValueError("initial_point dimension mismatch")
        self._optimum_point = self._mean_center.copy()
        self.optimum_value = self.full_value(self._mean_center)
        self.strong_convexity = 1.0
        self.declared_ell = EllFunction.constant(1.0)

    def _component_value(self, w, i):
        d = w - self.centers[i]
        return 0.5 * float(np.dot(d, d))

    def _component_gradient(self, w, i):
        return w - self.centers[i]

    def full_value(self, w):
        w = np.asarray(w, dtype=float)
        d = w[None, :] - self.centers
        return 0.5 * float(np.mean(np.sum(d * d, axis=1)))

    def full_gradient(self, w):
        w = np.asarray(w, dtype=float)
        return w - self._mean_center

    def gradient_variance(self) -> float:
        """Population variance of component gradients (constant in w)."""
        d = self.centers - self._mean_center
        return float(np.mean(np.sum(d * d, axis=1)))

    def max_component_gradient_norm(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(np.max(np.linalg.norm(w[None, :] - self.centers, axis=1)))


def build_problem(spec: dict) -> FiniteSumProblem:
    """Construct a problem from a config mapping with an ``id`` field."""
    if "id" not in spec:
        raise ValueError("problem config needs an 'id' field")
    params = {k: v for k, v in spec.items() if k != "id"}
    pid = spec["id"]
    if pid == "quartic":
        _check_keys(params, set(), pid)
        return QuarticProblem()
    if pid == "exp_strong":
        _check_keys(params, set(), pid)
        return ExpStrongProblem()
    if pid == "phase_retrieval":
        _check_keys(params, {"m", "dim", "seed", "noise_std"}, pid)
        return PhaseRetrievalProblem(**params)
    if pid == "dro":
        _check_keys(params, {"lam", "seed", "dataset"}, pid)
        from .ingest import dataset_from_config

        dataset = dataset_from_config(params.get("dataset", {"synthetic": {"seed": 7}}))
        return DROProblem.from_dataset(
            dataset, lam=params.get("lam", DROProblem.LAM_DEFAULT), seed=params.get("seed", 0)
        )
    if pid == "tiny_quadratic":
        _check_keys(params, {"centers", "initial_point"}, pid)
        return TinyQuadraticProblem(**params)
    raise ValueError(f"unknown problem id {pid!r}")


def _check_keys(params: dict, allowed: set[str], context: str) -> None:
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"unknown keys for problem {context!r}: {sorted(unknown)}")
