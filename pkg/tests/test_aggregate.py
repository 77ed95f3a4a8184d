import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgrem.aggregate import (
    PenaltySchedule,
    central_update,
    collapse_lambda,
    default_schedule,
    objective,
    schedule_next,
    shrink_toward,
    theory_schedule,
)
from fedgrem.errors import ContractError


def grid_oracle_1d(t, lam, n, lo, hi, step=1e-4):
    """Full objective minimised over a center grid, inner blocks in closed form."""
    t = np.asarray(t, dtype=float)
    grid = np.arange(lo, hi + step / 2, step)
    tau = lam / math.sqrt(n)
    best = np.inf
    for chunk in np.array_split(grid, 50):
        c = chunk[:, None]
        gap = t[None, :] - c
        nu = t[None, :] - np.sign(gap) * np.minimum(np.abs(gap), tau)
        vals = (n / 2 * (nu - t) ** 2 + math.sqrt(n) * lam * np.abs(nu - c)).sum(axis=1)
        best = min(best, vals.min())
    return best


def induced_objective(center, t, lam, n):
    per = shrink_toward(center, t, lam / math.sqrt(n))
    return objective(per, center, t, lam, n)


class TestCentralUpdate:
    def test_zero_penalty(self):
        t = np.array([[0.0, 1.0], [2.0, 3.0], [5.0, -1.0]])
        res = central_update(t, 0.0, 50)
        np.testing.assert_array_equal(res.per_task, t)
        np.testing.assert_array_equal(res.center, t.mean(0))

    def test_full_collapse(self):
        res = central_update([[0.0], [2.0]], 1e6, 100)
        np.testing.assert_allclose(res.per_task, [[1.0], [1.0]])
        np.testing.assert_allclose(res.center, [1.0])

    def test_grid_oracle(self):
        t = [0.0, 0.1, 5.0]
        res = central_update(np.array(t)[:, None], 10.0, 100)
        assert res.objective <= grid_oracle_1d(t, 10.0, 100, -1.0, 6.0) + 1e-6 * 100

    def test_shrink_identity(self):
        np.testing.assert_allclose(shrink_toward(np.zeros(1), np.array([[3.0]]), 1.0), [[2.0]])

    def test_single_task_is_identity(self):
        t = np.array([[1.5, -2.0, 0.25]])
        res = central_update(t, 3.0, 10)
        np.testing.assert_array_equal(res.per_task, t)
        np.testing.assert_array_equal(res.center, t[0])
        assert res.objective == 0.0

    def test_collapse_threshold(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=(5, 3))
        lam = collapse_lambda(t, 40)
        res = central_update(t, lam, 40)
        np.testing.assert_array_equal(res.per_task, np.tile(t.mean(0), (5, 1)))

    @pytest.mark.parametrize("bad", [np.zeros((0, 2)), [[np.nan]]])
    def test_contract(self, bad):
        with pytest.raises(ContractError):
            central_update(bad, 1.0, 10)

    def test_negative_penalty_rejected(self):
        with pytest.raises(ContractError):
            central_update([[0.0], [1.0]], -1.0, 10)

    def test_segment_and_shrink_invariants(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            K, d, n = rng.integers(2, 8), rng.integers(1, 5), int(rng.integers(5, 500))
            t = rng.normal(scale=3, size=(K, d))
            lam = float(rng.uniform(0.01, 3)) * math.sqrt(n)
            res = central_update(t, lam, n)
            tau = lam / math.sqrt(n)
            for k in range(K):
                dist = np.linalg.norm(res.per_task[k] - res.center)
                assert dist == pytest.approx(max(0.0, np.linalg.norm(t[k] - res.center) - tau), abs=1e-8)
                # on the segment [center, t_k]
                seg = t[k] - res.center
                s = np.dot(res.per_task[k] - res.center, seg) / max(np.dot(seg, seg), 1e-300)
                assert -1e-9 <= s <= 1 + 1e-9
                np.testing.assert_allclose(res.per_task[k], res.center + s * seg, atol=1e-9)


@st.composite
def problems(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    K = draw(st.integers(1, 6))
    d = draw(st.integers(1, 4))
    n = draw(st.integers(1, 400))
    lam = draw(st.floats(0, 5)) * math.sqrt(n)
    return rng.normal(scale=draw(st.sampled_from([0.1, 1.0, 5.0])), size=(K, d)), lam, n, rng


@settings(max_examples=60, deadline=None)
@given(problems())
def test_beats_random_probes(prob):
    t, lam, n, rng = prob
    res = central_update(t, lam, n)
    probes = t.mean(0) + rng.normal(scale=t.std() + 1e-3, size=(200, t.shape[1]))
    probes = np.vstack([probes, t])
    best_probe = min(induced_objective(p, t, lam, n) for p in probes)
    assert res.objective <= best_probe + 1e-9 * (1 + abs(best_probe))


@settings(max_examples=40, deadline=None)
@given(problems(), st.floats(-50, 50))
def test_translation_equivariance(prob, shift):
    t, lam, n, _ = prob
    a = central_update(t, lam, n)
    b = central_update(t + shift, lam, n)
    np.testing.assert_allclose(b.per_task, a.per_task + shift, atol=1e-6 * (1 + abs(shift)))


@settings(max_examples=40, deadline=None)
@given(problems())
def test_permutation_equivariance(prob):
    t, lam, n, rng = prob
    perm = rng.permutation(t.shape[0])
    a = central_update(t, lam, n)
    b = central_update(t[perm], lam, n)
    np.testing.assert_allclose(b.per_task, a.per_task[perm], atol=1e-7)
    np.testing.assert_allclose(b.center, a.center, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(problems())
def test_monotone_in_penalty(prob):
    # lam = 0 is excluded: the center there is a convention, not an optimum
    t, lam, n, _ = prob
    dists = []
    for l in np.linspace(0.01, lam + 1, 6):
        res = central_update(t, l, n)
        dists.append(np.linalg.norm(res.per_task - res.center, axis=1))
    for a, b in zip(dists, dists[1:]):
        assert np.all(b <= a + 1e-7)


class TestSchedule:
    def test_step(self):
        s = PenaltySchedule(10.0, 0.5, 2.0, 10.0)
        assert schedule_next(s).current == 7.0

    def test_geometric(self):
        s = PenaltySchedule.start(8.0, 0.5, 0.0)
        for _ in range(3):
            s = schedule_next(s)
        assert s.current == 1.0

    def test_fixed_point(self):
        s = PenaltySchedule(3.0, 0.25, 1.5, 2.0)
        assert schedule_next(s).current == 2.0

    def test_converges_monotonically(self):
        for start in [0.0, 1.0, 50.0]:
            s = PenaltySchedule(start, 0.7, 1.2, start)
            gaps = []
            for _ in range(60):
                gaps.append(abs(s.current - s.fixed_point))
                s = schedule_next(s)
            assert all(b <= a for a, b in zip(gaps, gaps[1:]))
            assert gaps[-1] < 1e-6

    def test_constant(self):
        s = PenaltySchedule.constant(3.0)
        assert schedule_next(schedule_next(s)).current == 3.0

    def test_default_lambda0(self):
        assert default_schedule(100, 1, 1, 1, c_lambda0=1.0).lambda0 == 10.0

    def test_default_no_floor(self):
        s = default_schedule(100, 5, 2, 10, c_floor=0.0)
        assert s.additive_floor == 0.0

    def test_default_floor_value(self):
        s = default_schedule(100, 25, 2, 10, delta_conf=0.05, c_floor=1.0)
        assert s.additive_floor == pytest.approx(5 + math.sqrt(math.log(400)), abs=1e-12)
        assert s.additive_floor == pytest.approx(7.4478, abs=1e-4)

    def test_theory_preset(self):
        s = theory_schedule(100, 0.1, 0.2, 0.5, 0.01, 0.02, 1.0)
        assert s.lambda0 == pytest.approx(15 / 119 * 10 * 0.3)
        assert s.additive_floor == pytest.approx(15 * 10 * 0.05)
        assert s.decay == 0.5

    def test_invalid_decay(self):
        with pytest.raises(ContractError):
            PenaltySchedule(1.0, 1.0, 0.0, 1.0)
