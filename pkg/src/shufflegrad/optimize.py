"""Epoch-based incremental gradient runners.

One epoch visits every component once in a permutation order (see
:mod:`shufflegrad.shuffling`), stepping on the mean gradient of each
batch of consecutive permutation entries.  ``step_size`` is the size of
one inner step; divide a per-epoch stepsize by the number of steps per
epoch first (:meth:`shufflegrad.smoothness.StepsizePlan.per_step_size`
does this).  A with-replacement baseline with the same evaluation
budget is provided for comparisons.

Trajectory row t (t = 1..T) holds the metrics of the iterate entering
epoch t, which is where the convergence recipes measure progress; its
evaluation counter t*n reflects the work finished when the row was
written, at the end of epoch t.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass

import numpy as np

from .shuffling import Scheme, permutation_for_epoch

__all__ = [
    "RunConfig",
    "TrajectoryRecord",
    "DivergenceError",
    "run_shuffling",
    "run_sgd",
    "averaged_iterate",
    "best_iterate",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class RunConfig:
    """Knobs shared by all runners.

    step_size: inner-step size, >= 0 (0 freezes the iterate; useful for
        plumbing tests).
    epochs: number of epochs T >= 1.
    batch_size: components per inner step, >= 1.
    initial_point: optional override of the problem's initial point.
    divergence_threshold: iterate norm and objective magnitude beyond
        which the run is declared divergent.
    track_average: maintain the running mean of the iterates entering
        each epoch.
    """

    step_size: float
    epochs: int
    batch_size: int = 1
    initial_point: np.ndarray | None = None
    divergence_threshold: float = 1e50
    track_average: bool = True

    def __post_init__(self):
        if not np.isfinite(self.step_size) or self.step_size < 0:
            raise ValueError(f"step_size must be finite and >= 0, got {self.step_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.divergence_threshold <= 0:
            raise ValueError("divergence_threshold must be positive")


@dataclass
class TrajectoryRecord:
    """Per-epoch metric rows plus the final and averaged iterates.

    Row t records the iterate entering epoch t; ``evals[t-1] = t * n``
    counts component-gradient evaluations completed through epoch t.
    ``dist_sq`` is None when the problem has no known optimum.
    ``averaged_point`` is the mean of the entering iterates, the
    quantity the convex recipes bound.
    """

    epoch: np.ndarray
    objective: np.ndarray
    grad_norm_sq: np.ndarray
    dist_sq: np.ndarray | None
    evals: np.ndarray
    wall_ms: np.ndarray
    final_point: np.ndarray
    averaged_point: np.ndarray | None

    @property
    def completed_epochs(self) -> int:
        return len(self.epoch)


class DivergenceError(RuntimeError):
    """Iterate left the finite/threshold region.

    Carries the epoch (1-based), the inner step index within it
    (0-based), the last finite objective, and the rows recorded for the
    epochs that completed.
    """

    def __init__(self, epoch: int, step_index: int, last_value: float,
                 record: TrajectoryRecord):
        super().__init__(
            f"divergence in epoch {epoch} at inner step index {step_index}; "
            f"last finite objective {last_value:.6g} after {epoch - 1} epoch(s)"
        )
        self.epoch = epoch
        self.step_index = step_index
        self.last_value = last_value
        self.record = record


def _batch_bounds(n: int, batch_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


class _Recorder:
    def __init__(self, problem, track_average: bool):
        self.problem = problem
        self.opt = problem.optimum_point
        self.rows: list[tuple] = []
        self.track_average = track_average
        self.avg = None
        self.avg_count = 0
        self.t0 = time.perf_counter()

    def entering(self, w: np.ndarray) -> None:
        if not self.track_average:
            return
        if self.avg is None:
            self.avg = w.astype(float).copy()
        else:
            self.avg += (w - self.avg) / (self.avg_count + 1)
        self.avg_count += 1

    def row(self, epoch: int, w_entering: np.ndarray) -> None:
        value = self.problem.full_value(w_entering)
        grad = self.problem.full_gradient(w_entering)
        dist = None if self.opt is None else float(np.sum((w_entering - self.opt) ** 2))
        ms = (time.perf_counter() - self.t0) * 1e3
        self.rows.append((epoch, value, float(np.dot(grad, grad)), dist,
                          epoch * self.problem.n, ms))

    def build(self, final_point: np.ndarray) -> TrajectoryRecord:
        if self.rows:
            cols = list(zip(*self.rows))
            dist = None if self.opt is None else np.array(cols[3], dtype=float)
            arrays = (np.array(cols[0], dtype=int), np.array(cols[1], dtype=float),
                      np.array(cols[2], dtype=float), dist,
                      np.array(cols[4], dtype=int), np.array(cols[5], dtype=float))
        else:
            empty = np.empty(0)
            dist = None if self.opt is None else empty.copy()
            arrays = (np.empty(0, dtype=int), empty.copy(), empty.copy(), dist,
                      np.empty(0, dtype=int), empty.copy())
        return TrajectoryRecord(
            *arrays,
            final_point=final_point.copy(),
            averaged_point=None if self.avg is None else self.avg.copy(),
        )


def _start_point(problem, config: RunConfig) -> np.ndarray:
    if config.initial_point is not None:
        return problem._check(np.asarray(config.initial_point, dtype=float)).copy()
    return problem.initial_point


def _diverged(w: np.ndarray, value: float, threshold: float) -> bool:
    return (not np.isfinite(w).all()) or (not np.isfinite(value)) \
        or abs(value) > threshold or float(np.linalg.norm(w)) > threshold


def _epoch_pass(problem, w: np.ndarray, order, bounds, step: float) -> np.ndarray:
    grad = problem._component_gradient
    for lo, hi in bounds:
        g = grad(w, int(order[lo]))
        if hi - lo > 1:
            for j in range(lo + 1, hi):
                g = g + grad(w, int(order[j]))
            g = g / (hi - lo)
        w = w - step * g
    return w


def _locate_divergence(problem, w: np.ndarray, order, bounds, step: float,
                       threshold: float) -> int:
    for j, (lo, hi) in enumerate(bounds):
        g = problem._component_gradient(w, int(order[lo]))
        for k in range(lo + 1, hi):
            g = g + problem._component_gradient(w, int(order[k]))
        w = w - step * (g / (hi - lo))
        if not np.isfinite(w).all() or float(np.linalg.norm(w)) > threshold:
            return j
    return len(bounds) - 1


def _run_epochs(problem, config: RunConfig, order_for_epoch) -> TrajectoryRecord:
    w = _start_point(problem, config)
    bounds = _batch_bounds(problem.n, config.batch_size)
    rec = _Recorder(problem, config.track_average)
    for t in range(1, config.epochs + 1):
        order = order_for_epoch(t)
        w_enter = w
        rec.entering(w_enter)
        w = _epoch_pass(problem, w_enter, order, bounds, config.step_size)
        value = problem.full_value(w) if np.isfinite(w).all() else np.nan
        if _diverged(w, value, config.divergence_threshold):
            j = _locate_divergence(problem, w_enter, order, bounds, config.step_size,
                                   config.divergence_threshold)
            raise DivergenceError(t, j, problem.full_value(w_enter), rec.build(w_enter))
        rec.row(t, w_enter)
    return rec.build(w)


def run_shuffling(problem, scheme: Scheme, config: RunConfig) -> TrajectoryRecord:
    """Run the shuffling method and record the trajectory.

    Raises :class:`DivergenceError` (with the completed-epoch rows
    attached) if an iterate leaves the finite region.
    """
    if scheme.n != problem.n:
        raise ValueError(f"scheme is for n = {scheme.n}, problem has n = {problem.n}")
    return _run_epochs(problem, config, lambda t: permutation_for_epoch(scheme, t))


_SGD_STREAM = (1,)


def run_sgd(problem, config: RunConfig, seed: int = 0) -> TrajectoryRecord:
    """With-replacement baseline matched on gradient evaluations.

    Each epoch draws n component indices uniformly with replacement
    from a stream seeded independently of the permutation streams, then
    consumes them in the same batch pattern as the shuffling runner, so
    a row again covers n evaluations.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=_SGD_STREAM))
    return _run_epochs(problem, config,
                       lambda t: rng.integers(0, problem.n, size=problem.n))


def averaged_iterate(record: TrajectoryRecord) -> np.ndarray:
    """Mean of the iterates entering epochs 1..T."""
    if record.averaged_point is None:
        raise ValueError("run was configured with track_average=False")
    return record.averaged_point.copy()


def best_iterate(record: TrajectoryRecord) -> tuple[int, float]:
    """(epoch, value) of the lowest recorded objective; earliest epoch wins ties."""
    if record.completed_epochs == 0:
        raise ValueError("record has no rows")
    i = int(np.argmin(record.objective))
    return int(record.epoch[i]), float(record.objective[i])


_CKPT_MAGIC = b"SHGRADv1"


def save_checkpoint(path, point: np.ndarray, *, epoch: int = 0,
                    seeds: tuple[int, ...] = ()) -> None:
    """Write a resumable snapshot: magic, dim, point, epoch, seeds.

    All payload words are little-endian 64-bit; epoch, the seed count
    and the seeds are unsigned integers bit-cast into the float payload,
    so the round trip is lossless.
    """
    point = np.ascontiguousarray(np.asarray(point, dtype="<f8"))
    if point.ndim != 1:
        raise ValueError("checkpoint point must be a vector")
    if epoch < 0 or any(s < 0 for s in seeds):
        raise ValueError("epoch and seeds must be non-negative")
    tail = np.array([epoch, len(seeds), *seeds], dtype="<u8").view("<f8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", point.size))
        fh.write(point.tobytes())
        fh.write(tail.tobytes())


def load_checkpoint(path) -> tuple[np.ndarray, int, tuple[int, ...]]:
    """Read a snapshot written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (dim,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + 8 * (dim + 2):
        raise ValueError(f"{path}: truncated checkpoint ({len(blob)} bytes)")
    payload = np.frombuffer(blob[16:], dtype="<f8")
    point = payload[:dim].astype(float).copy()
    ints = payload[dim:].view("<u8")
    epoch, count = int(ints[0]), int(ints[1])
    if len(ints) != 2 + count:
        raise ValueError(f"{path}: seed count {count} does not match payload")
    return point, epoch, tuple(int(s) for s in ints[2:])
