import numpy as np
import pytest

from shufflegrad.optimize import (
    DivergenceError,
    RunConfig,
    TrajectoryRecord,
    averaged_iterate,
    best_iterate,
    load_checkpoint,
    run_sgd,
    run_shuffling,
    save_checkpoint,
)
from shufflegrad.problems import QuarticProblem, TinyQuadraticProblem
from shufflegrad.shuffling import Scheme


def _two_center_problem(initial=(0.0, 0.0)):
    return TinyQuadraticProblem(centers=((1.0, 0.0), (-1.0, 0.0)),
                                initial_point=initial)


class TestHandTrace:
    """Exact two-epoch trace with per-step size 0.25 and natural order.

    Start (0, 0); within epoch 1 the iterate visits (0.25, 0) then
    (-0.0625, 0); epoch 2 ends at (-0.09765625, 0).
    """

    def run(self):
        problem = _two_center_problem()
        scheme = Scheme.fixed(2)
        config = RunConfig(step_size=0.25, epochs=2)
        return run_shuffling(problem, scheme, config)

    def test_rows_are_entering_iterates(self):
        rec = self.run()
        np.testing.assert_array_equal(rec.epoch, [1, 2])
        np.testing.assert_array_equal(rec.evals, [2, 4])
        np.testing.assert_allclose(rec.objective, [0.5, 0.501953125], rtol=0, atol=0)
        np.testing.assert_allclose(rec.grad_norm_sq, [0.0, 0.00390625], rtol=0, atol=0)
        np.testing.assert_allclose(rec.dist_sq, [0.0, 0.00390625], rtol=0, atol=0)

    def test_final_and_averaged_points(self):
        rec = self.run()
        np.testing.assert_allclose(rec.final_point, [-0.09765625, 0.0], rtol=0, atol=0)
        np.testing.assert_allclose(averaged_iterate(rec), [-0.03125, 0.0], rtol=0, atol=0)

    def test_wall_clock_monotone(self):
        rec = self.run()
        assert np.all(np.diff(rec.wall_ms) >= 0)


def test_zero_stepsize_freezes_iterate():
    problem = TinyQuadraticProblem()
    rec = run_shuffling(problem, Scheme.random_reshuffle(problem.n, seed=3),
                        RunConfig(step_size=0.0, epochs=4))
    np.testing.assert_array_equal(rec.final_point, problem.initial_point)
    assert np.all(rec.objective == rec.objective[0])
    np.testing.assert_array_equal(rec.evals, [4, 8, 12, 16])


def test_descent_on_quadratic():
    problem = TinyQuadraticProblem()
    rec = run_shuffling(problem, Scheme.shuffle_once(problem.n, seed=1),
                        RunConfig(step_size=0.05, epochs=60))
    assert rec.objective[-1] < rec.objective[0]
    assert rec.objective[-1] - problem.optimum_value < 1e-2


def test_row_count_and_eval_counter():
    problem = QuarticProblem()
    rec = run_shuffling(problem, Scheme.random_reshuffle(problem.n, seed=0),
                        RunConfig(step_size=0.01 / problem.n, epochs=5,
                                  track_average=False))
    assert rec.completed_epochs == 5
    np.testing.assert_array_equal(rec.epoch, np.arange(1, 6))
    np.testing.assert_array_equal(rec.evals, np.arange(1, 6) * problem.n)
    assert rec.averaged_point is None


def test_order_changes_trajectory():
    problem = _two_center_problem(initial=(2.0, 2.0))
    config = RunConfig(step_size=0.25, epochs=1)
    forward = run_shuffling(problem, Scheme.fixed(2, order=(0, 1)), config)
    backward = run_shuffling(problem, Scheme.fixed(2, order=(1, 0)), config)
    assert not np.allclose(forward.final_point, backward.final_point)


def test_identical_components_make_order_irrelevant():
    problem = TinyQuadraticProblem(centers=((1.0, 1.0),) * 3,
                                   initial_point=(4.0, 0.0))
    config = RunConfig(step_size=0.2, epochs=6)
    runs = [
        run_shuffling(problem, Scheme.fixed(3), config),
        run_shuffling(problem, Scheme.random_reshuffle(3, seed=9), config),
        run_sgd(problem, config, seed=5),
    ]
    for other in runs[1:]:
        np.testing.assert_array_equal(runs[0].objective, other.objective)
        np.testing.assert_array_equal(runs[0].final_point, other.final_point)


def test_shuffling_determinism():
    problem = TinyQuadraticProblem()
    config = RunConfig(step_size=0.1, epochs=10)
    a = run_shuffling(problem, Scheme.random_reshuffle(problem.n, seed=13), config)
    b = run_shuffling(problem, Scheme.random_reshuffle(problem.n, seed=13), config)
    np.testing.assert_array_equal(a.objective, b.objective)
    np.testing.assert_array_equal(a.grad_norm_sq, b.grad_norm_sq)
    np.testing.assert_array_equal(a.dist_sq, b.dist_sq)
    np.testing.assert_array_equal(a.final_point, b.final_point)


class TestSgd:
    def test_determinism_and_seed_sensitivity(self):
        problem = TinyQuadraticProblem()
        config = RunConfig(step_size=0.1, epochs=10)
        a = run_sgd(problem, config, seed=2)
        b = run_sgd(problem, config, seed=2)
        c = run_sgd(problem, config, seed=3)
        np.testing.assert_array_equal(a.objective, b.objective)
        np.testing.assert_array_equal(a.final_point, b.final_point)
        assert not np.array_equal(a.final_point, c.final_point)

    def test_matches_eval_budget(self):
        problem = TinyQuadraticProblem()
        rec = run_sgd(problem, RunConfig(step_size=0.1, epochs=3), seed=0)
        np.testing.assert_array_equal(rec.evals, [4, 8, 12])

    def test_draws_independent_of_permutation_stream(self):
        # an sgd run and a reshuffling run with the same seed must differ
        problem = TinyQuadraticProblem()
        config = RunConfig(step_size=0.1, epochs=8)
        sgd = run_sgd(problem, config, seed=7)
        shuffled = run_shuffling(problem, Scheme.random_reshuffle(problem.n, seed=7),
                                 config)
        assert not np.array_equal(sgd.final_point, shuffled.final_point)


def test_batch_means_one_step_per_epoch():
    problem = _two_center_problem(initial=(2.0, 2.0))
    rec = run_shuffling(problem, Scheme.fixed(2),
                        RunConfig(step_size=0.25, epochs=1, batch_size=2))
    # mean gradient at (2,2) is (2,2); one step of 0.25 lands at (1.5, 1.5)
    np.testing.assert_allclose(rec.final_point, [1.5, 1.5], rtol=0, atol=0)
    np.testing.assert_array_equal(rec.evals, [2])


def test_uneven_batches_cover_all_components():
    problem = TinyQuadraticProblem()  # n = 4
    rec = run_shuffling(problem, Scheme.fixed(4),
                        RunConfig(step_size=0.1, epochs=2, batch_size=3))
    assert rec.completed_epochs == 2
    np.testing.assert_array_equal(rec.evals, [4, 8])


def test_initial_point_override():
    problem = TinyQuadraticProblem()
    rec = run_shuffling(problem, Scheme.fixed(4),
                        RunConfig(step_size=0.0, epochs=1,
                                  initial_point=np.array([5.0, -1.0])))
    np.testing.assert_array_equal(rec.final_point, [5.0, -1.0])
    with pytest.raises(ValueError):
        run_shuffling(problem, Scheme.fixed(4),
                      RunConfig(step_size=0.0, epochs=1,
                                initial_point=np.zeros(3)))


def test_scheme_size_mismatch():
    problem = TinyQuadraticProblem()
    with pytest.raises(ValueError, match="n = 3"):
        run_shuffling(problem, Scheme.fixed(3), RunConfig(step_size=0.1, epochs=1))


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(step_size=-0.1, epochs=1)
    with pytest.raises(ValueError):
        RunConfig(step_size=float("nan"), epochs=1)
    with pytest.raises(ValueError):
        RunConfig(step_size=0.1, epochs=0)
    with pytest.raises(ValueError):
        RunConfig(step_size=0.1, epochs=1, batch_size=0)
    with pytest.raises(ValueError):
        RunConfig(step_size=0.1, epochs=1, divergence_threshold=0.0)


class TestDivergence:
    def test_error_carries_partial_record(self):
        problem = QuarticProblem()
        with np.errstate(over="ignore", invalid="ignore"), \
                pytest.raises(DivergenceError) as err:
            run_shuffling(problem, Scheme.fixed(problem.n),
                          RunConfig(step_size=10.0, epochs=50))
        e = err.value
        assert e.epoch >= 1
        assert 0 <= e.step_index < problem.n
        assert np.isfinite(e.last_value)
        assert e.record.completed_epochs == e.epoch - 1
        if e.record.completed_epochs:
            np.testing.assert_array_equal(e.record.epoch,
                                          np.arange(1, e.epoch))

    def test_threshold_triggers_before_overflow(self):
        problem = TinyQuadraticProblem(centers=((1.0, 0.0), (-1.0, 0.0)),
                                       initial_point=(100.0, 0.0))
        with pytest.raises(DivergenceError):
            run_shuffling(problem, Scheme.fixed(2),
                          RunConfig(step_size=0.25, epochs=3,
                                    divergence_threshold=50.0))


def _record(values):
    values = np.asarray(values, dtype=float)
    t = np.arange(1, len(values) + 1)
    return TrajectoryRecord(epoch=t, objective=values,
                            grad_norm_sq=np.zeros_like(values), dist_sq=None,
                            evals=t * 4, wall_ms=np.zeros_like(values),
                            final_point=np.zeros(2), averaged_point=None)


def test_best_iterate_selection():
    assert best_iterate(_record([3.0, 1.0, 2.0])) == (2, 1.0)
    # earliest epoch wins a tie
    assert best_iterate(_record([2.0, 1.0, 1.0])) == (2, 1.0)
    with pytest.raises(ValueError):
        best_iterate(_record([]))


def test_averaged_iterate_requires_tracking():
    problem = TinyQuadraticProblem()
    rec = run_shuffling(problem, Scheme.fixed(4),
                        RunConfig(step_size=0.1, epochs=2, track_average=False))
    with pytest.raises(ValueError):
        averaged_iterate(rec)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "state.ckpt"
        point = np.array([1.5, -2.25, 1e-300])
        save_checkpoint(path, point, epoch=17, seeds=(3, 2**63,))
        loaded, epoch, seeds = load_checkpoint(path)
        np.testing.assert_array_equal(loaded, point)
        assert epoch == 17
        assert seeds == (3, 2**63)

    def test_defaults(self, tmp_path):
        path = tmp_path / "state.ckpt"
        save_checkpoint(path, np.zeros(2))
        _, epoch, seeds = load_checkpoint(path)
        assert epoch == 0 and seeds == ()

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "state.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_rejects_truncation(self, tmp_path):
        path = tmp_path / "state.ckpt"
        save_checkpoint(path, np.arange(4.0), epoch=1, seeds=(9,))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_input_validation(self, tmp_path):
        path = tmp_path / "state.ckpt"
        with pytest.raises(ValueError):
            save_checkpoint(path, np.zeros((2, 2)))
        with pytest.raises(ValueError):
            save_checkpoint(path, np.zeros(2), epoch=-1)
