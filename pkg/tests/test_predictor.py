"""Tests for trajectory windows, differencing and the predictors."""

import logging

import numpy as np
import pytest

from conformal_cbf.barrier import ClassKappa, PotentialFieldCbf
from conformal_cbf.conformal import window_loss
from conformal_cbf.errors import InputError
from conformal_cbf.predictor import (
    CONSTANT_VELOCITY,
    GROUND_TRUTH,
    NOISE_BOUNDED,
    PredictorKind,
    SampledTrajectory,
    differentiate,
    predict,
)

CBF = PotentialFieldCbf(k_rep=2.0, rho0=10.0, delta=0.5)


def traj(agent_id, positions, start_frame=0, dt=0.1):
    return SampledTrajectory(
        agent_id=agent_id, start_frame=start_frame, dt=dt, positions=positions
    )


class TestSampledTrajectory:
    def test_accessors(self):
        t = traj(3, [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], start_frame=5)
        assert t.n_samples == 3
        assert t.end_frame == 8
        assert t.contains(5) and t.contains(7) and not t.contains(8)
        assert np.array_equal(t.position_at(6), [1.0, 0.0])
        with pytest.raises(InputError):
            t.position_at(8)

    def test_prefix(self):
        t = traj(3, [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        p = t.prefix(2)
        assert p.n_samples == 2
        assert p.start_frame == t.start_frame
        assert np.array_equal(p.positions, t.positions[:2])
        with pytest.raises(InputError):
            t.prefix(0)
        with pytest.raises(InputError):
            t.prefix(4)

    def test_validation(self):
        with pytest.raises(InputError):
            traj(1, np.zeros((0, 2)))
        with pytest.raises(InputError):
            traj(1, [[0.0, 0.0, 0.0]])
        with pytest.raises(InputError):
            traj(1, [[np.nan, 0.0]])
        with pytest.raises(InputError):
            SampledTrajectory(agent_id=1, start_frame=0, dt=0.0, positions=[[0.0, 0.0]])


class TestDifferentiate:
    def test_linear_motion_is_exact_everywhere(self):
        t = traj(1, [[0.0, 0.0], [0.1, 0.2], [0.2, 0.4], [0.3, 0.6]], dt=0.1)
        for frame in range(4):
            assert np.allclose(differentiate(t, frame), [1.0, 2.0], atol=1e-12)

    def test_stationary_is_zero(self):
        t = traj(1, [[2.0, 3.0]] * 5)
        for frame in range(5):
            assert np.array_equal(differentiate(t, frame), [0.0, 0.0])

    def test_quadratic_interior(self):
        # x(t) = t^2 sampled at dt = 0.5; central difference at t = 1 is
        # exact for a parabola: ((1.5^2 - 0.5^2) / 1.0) = 2.0
        ts = np.arange(5) * 0.5
        t = traj(1, np.stack([ts**2, np.zeros(5)], axis=1), dt=0.5)
        v = differentiate(t, 2)
        assert abs(v[0] - 2.0) <= 1e-12

    def test_edges_are_one_sided(self):
        t = traj(1, [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]], dt=1.0)
        assert np.allclose(differentiate(t, 0), [1.0, 0.0])
        assert np.allclose(differentiate(t, 2), [2.0, 0.0])
        assert np.allclose(differentiate(t, 1), [1.5, 0.0])

    def test_start_frame_shift_invariance(self):
        pos = [[0.0, 0.0], [1.0, 1.0], [1.5, 0.5], [3.0, 2.0]]
        a = traj(1, pos, start_frame=0)
        b = traj(1, pos, start_frame=100)
        for i in range(4):
            assert np.array_equal(differentiate(a, i), differentiate(b, 100 + i))

    def test_errors(self):
        single = traj(1, [[0.0, 0.0]])
        with pytest.raises(InputError):
            differentiate(single, 0)
        t = traj(1, [[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(InputError):
            differentiate(t, 2)


class TestConstantVelocity:
    def test_extrapolates_linear_motion_exactly(self):
        hist = traj(1, [[0.0, 0.0], [0.5, 0.25], [1.0, 0.5]], dt=0.1)
        out = predict(PredictorKind(kind=CONSTANT_VELOCITY), {1: hist}, 4)
        got = out[1]
        assert got.start_frame == hist.end_frame
        assert got.n_samples == 4
        expected = np.array([[1.5, 0.75], [2.0, 1.0], [2.5, 1.25], [3.0, 1.5]])
        assert np.allclose(got.positions, expected, atol=1e-12)

    def test_uses_last_displacement_only(self):
        hist = traj(1, [[9.0, 9.0], [0.0, 0.0], [1.0, 0.0]])
        out = predict(PredictorKind(kind=CONSTANT_VELOCITY), {1: hist}, 2)
        assert np.allclose(out[1].positions, [[2.0, 0.0], [3.0, 0.0]])

    def test_skips_short_history_with_warning(self, caplog):
        hist = {1: traj(1, [[0.0, 0.0]]), 2: traj(2, [[0.0, 0.0], [1.0, 0.0]])}
        with caplog.at_level(logging.WARNING, logger="conformal_cbf.predictor"):
            out = predict(PredictorKind(kind=CONSTANT_VELOCITY), hist, 3)
        assert set(out) == {2}
        assert any("skipping" in r.getMessage() for r in caplog.records)

    def test_horizon_validation(self):
        with pytest.raises(InputError):
            predict(PredictorKind(kind=CONSTANT_VELOCITY), {}, 0)


class TestGroundTruthOracle:
    def test_returns_future_bitwise(self):
        hist = traj(1, [[0.0, 0.0], [1.0, 0.0]])
        future = traj(1, [[2.0, 0.5], [3.3, 1.0], [4.0, 1.5]], start_frame=2)
        out = predict(
            PredictorKind(kind=GROUND_TRUTH), {1: hist}, 3, futures={1: future}
        )
        assert np.array_equal(out[1].positions, future.positions)
        assert out[1].start_frame == 2

    def test_truncates_to_horizon(self):
        hist = traj(1, [[0.0, 0.0], [1.0, 0.0]])
        future = traj(1, [[2.0, 0.0], [3.0, 0.0], [4.0, 0.0]], start_frame=2)
        out = predict(
            PredictorKind(kind=GROUND_TRUTH), {1: hist}, 2, futures={1: future}
        )
        assert out[1].n_samples == 2

    def test_requires_futures(self):
        hist = traj(1, [[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(InputError):
            predict(PredictorKind(kind=GROUND_TRUTH), {1: hist}, 2)

    def test_future_must_abut_history(self):
        hist = traj(1, [[0.0, 0.0], [1.0, 0.0]])
        future = traj(1, [[2.0, 0.0]], start_frame=3)
        with pytest.raises(InputError):
            predict(
                PredictorKind(kind=GROUND_TRUTH), {1: hist}, 2, futures={1: future}
            )

    def test_missing_future_skips_agent(self, caplog):
        hist = {1: traj(1, [[0.0, 0.0], [1.0, 0.0]])}
        with caplog.at_level(logging.WARNING, logger="conformal_cbf.predictor"):
            out = predict(PredictorKind(kind=GROUND_TRUTH), hist, 2, futures={})
        assert out == {}

    def test_perfect_prediction_gives_zero_window_loss(self):
        # the whole point of the oracle: replaying the future through the
        # same differencing yields a loss of exactly zero at lam = 0
        alpha = ClassKappa.linear(1.0)
        hist = traj(7, [[6.0, 0.0], [6.0, 0.5]], dt=0.1)
        future = traj(
            7, [[6.0, 1.0], [5.5, 1.5], [5.0, 2.0], [5.0, 2.5]], start_frame=2, dt=0.1
        )
        out = predict(
            PredictorKind(kind=GROUND_TRUTH), {7: hist}, 4, futures={7: future}
        )
        ego = traj(-1, [[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [0.3, 0.0]], start_frame=2, dt=0.1)
        loss = window_loss(CBF, alpha, out, {7: future}, ego, lam=0.0)
        assert loss == 0.0


class TestNoiseBoundedOracle:
    def future_fixture(self, agent_id=4, n=6):
        rng = np.random.default_rng(agent_id)
        base = np.array([5.0, 1.0]) + np.cumsum(
            rng.uniform(-0.3, 0.3, size=(n, 2)), axis=0
        )
        return traj(agent_id, base, start_frame=2, dt=0.1)

    def kind(self, value_bound, dynamics_bound, seed=0):
        return PredictorKind(
            kind=NOISE_BOUNDED,
            value_bound=value_bound,
            dynamics_bound=dynamics_bound,
            seed=seed,
        )

    def test_zero_bounds_reproduce_truth(self):
        hist = traj(4, [[5.0, 0.0], [5.0, 0.5]], dt=0.1)
        future = self.future_fixture()
        out = predict(
            self.kind(0.0, 0.0),
            {4: hist},
            6,
            futures={4: future},
            cbf=CBF,
            ego_positions=np.array([0.0, 0.0]),
        )
        assert np.array_equal(out[4].positions, future.positions)

    def test_requires_cbf_and_ego(self):
        hist = traj(4, [[5.0, 0.0], [5.0, 0.5]], dt=0.1)
        future = self.future_fixture()
        with pytest.raises(InputError):
            predict(self.kind(0.1, 0.1), {4: hist}, 6, futures={4: future})

    def test_bounds_hold_over_many_draws(self):
        # both stated bounds must hold at every instant of the returned
        # window, measured exactly the way a consumer would measure them
        value_bound, dynamics_bound = 0.5, 0.1
        violations = 0
        instants = 0
        for seed in range(40):
            rng = np.random.default_rng(1000 + seed)
            n = int(rng.integers(3, 8))
            future = traj(
                4,
                np.array([6.0, -2.0])
                + np.cumsum(rng.uniform(-0.4, 0.4, size=(n, 2)), axis=0),
                start_frame=int(rng.integers(0, 50)),
                dt=0.1,
            )
            hist = traj(
                4,
                [future.positions[0] - 0.2, future.positions[0] - 0.1],
                start_frame=future.start_frame - 2,
                dt=0.1,
            )
            ego = rng.uniform(-1.0, 1.0, size=2)
            out = predict(
                self.kind(value_bound, dynamics_bound, seed=seed),
                {4: hist},
                n,
                futures={4: future},
                cbf=CBF,
                ego_positions=ego,
            )
            got = out[4]
            from conformal_cbf.barrier import cbf_gradient

            for i in range(n):
                frame = got.start_frame + i
                instants += 1
                if (
                    np.linalg.norm(got.positions[i] - future.positions[i])
                    > value_bound + 1e-12
                ):
                    violations += 1
                _, g_true = cbf_gradient(CBF, ego, future.positions[i])
                _, g_pred = cbf_gradient(CBF, ego, got.positions[i])
                q_true = float(g_true @ differentiate(future, frame))
                q_pred = float(g_pred @ differentiate(got, frame))
                if abs(q_pred - q_true) > dynamics_bound + 1e-12:
                    violations += 1
        assert instants >= 150
        assert violations == 0

    def test_actually_perturbs(self):
        hist = traj(4, [[5.0, 0.0], [5.0, 0.5]], dt=0.1)
        future = self.future_fixture()
        out = predict(
            self.kind(0.5, 10.0, seed=3),
            {4: hist},
            6,
            futures={4: future},
            cbf=CBF,
            ego_positions=np.array([0.0, 0.0]),
        )
        assert not np.array_equal(out[4].positions, future.positions)

    def test_deterministic_per_seed(self):
        hist = traj(4, [[5.0, 0.0], [5.0, 0.5]], dt=0.1)
        future = self.future_fixture()
        kwargs = dict(futures={4: future}, cbf=CBF, ego_positions=np.array([0.0, 0.0]))
        a = predict(self.kind(0.5, 0.1, seed=9), {4: hist}, 6, **kwargs)
        b = predict(self.kind(0.5, 0.1, seed=9), {4: hist}, 6, **kwargs)
        c = predict(self.kind(0.5, 0.1, seed=10), {4: hist}, 6, **kwargs)
        assert np.array_equal(a[4].positions, b[4].positions)
        assert not np.array_equal(a[4].positions, c[4].positions)


def test_predict_output_sorted_by_agent_id():
    hists = {
        9: traj(9, [[1.0, 0.0], [1.1, 0.0]]),
        2: traj(2, [[2.0, 0.0], [2.1, 0.0]]),
        5: traj(5, [[3.0, 0.0], [3.1, 0.0]]),
    }
    out = predict(PredictorKind(kind=CONSTANT_VELOCITY), hists, 2)
    assert list(out) == [2, 5, 9]


def test_unknown_kind_rejected():
    with pytest.raises(InputError):
        PredictorKind(kind="perfect")
    with pytest.raises(InputError):
        PredictorKind(kind=CONSTANT_VELOCITY, value_bound=-1.0)
