"""Linear minimal-perturbation geometry: analytic bounds vs measurement."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivlc.bounds import (
    BOUND_CSV_HEADER,
    LinearIntervalModel,
    LinearTraditionalModel,
    count_violations,
    interval_bound,
    minimal_flip_delta,
    minimal_interval_perturbation,
    run_bound_trials,
    traditional_boundary_flip,
    write_bound_csv,
)
from ivlc.errors import ContractError, ValidationError
from ivlc.intervals import make_spec

from oracles import grid_min_perturbation_2d


# ---------------------------------------------------------------------------
# analytic bound alpha / ||w||_p
# ---------------------------------------------------------------------------

def test_interval_bound_l2_example():
    # ||(1.2, 1.6)||_2 = 2, alpha = 4 -> bound 2
    assert interval_bound(np.array([1.2, 1.6]), 4.0, 2) == pytest.approx(2.0, abs=1e-12)


def test_interval_bound_linf_example():
    # ||(1, 1)||_inf = 1
    assert interval_bound(np.array([1.0, 1.0]), 1.0, np.inf) == pytest.approx(1.0)


def test_interval_bound_l1_example():
    # ||(3, -4)||_1 = 7
    assert interval_bound(np.array([3.0, -4.0]), 7.0, 1) == pytest.approx(1.0)


def test_interval_bound_rejects_zero_w():
    with pytest.raises(ValidationError):
        interval_bound(np.zeros(3), 1.0, 2)


def test_interval_bound_rejects_nonpositive_alpha():
    with pytest.raises(ValidationError):
        interval_bound(np.ones(3), 0.0, 2)


@given(scale=st.floats(min_value=0.01, max_value=100.0),
       alpha=st.floats(min_value=0.1, max_value=10.0))
def test_interval_bound_inverse_homogeneous_in_w(scale, alpha):
    w = np.array([0.3, -1.1, 2.0])
    base = interval_bound(w, alpha, 2)
    scaled = interval_bound(scale * w, alpha, 2)
    assert scaled == pytest.approx(base / scale, rel=1e-9)


@given(alpha=st.floats(min_value=0.1, max_value=10.0))
def test_interval_bound_linear_in_alpha(alpha):
    w = np.array([1.0, 2.0, -0.5])
    assert interval_bound(w, 2 * alpha, 2) == pytest.approx(
        2 * interval_bound(w, alpha, 2), rel=1e-12)


def test_interval_bound_norm_ordering():
    # ||w||_1 >= ||w||_2 >= ||w||_inf, so the bounds order the other way
    rng = np.random.default_rng(7)
    for _ in range(50):
        w = rng.standard_normal(int(rng.integers(2, 20)))
        b1 = interval_bound(w, 1.0, 1)
        b2 = interval_bound(w, 1.0, 2)
        binf = interval_bound(w, 1.0, np.inf)
        assert b1 <= b2 + 1e-15
        assert b2 <= binf + 1e-15


# ---------------------------------------------------------------------------
# exact minimal interval perturbation
# ---------------------------------------------------------------------------

def _centered_instance():
    """Model and point with f(x) dead center of class-0's band."""
    spec = make_spec(0.0, 4.0, 16.0, 5, seed=0, shuffle=False)
    w = np.array([3.0, 4.0])  # ||w|| = 5
    model = LinearIntervalModel(w=w, b=0.0, spec=spec)
    # f(x) = 8 is the middle of [0, 16]
    x = np.array([0.0, 2.0])
    assert model.output(x) == pytest.approx(8.0)
    return model, x


def test_minimal_perturbation_center_of_interval():
    # from the interval center the nearest other band sits beta/2 + alpha away
    model, x = _centered_instance()
    res = minimal_interval_perturbation(model, x)
    expected = (16.0 / 2 + 4.0) / 5.0
    assert res.norm2 == pytest.approx(expected, rel=1e-9)
    assert res.source_class == 0
    assert res.target_class != 0


def test_minimal_perturbation_epsilon_is_along_w():
    model, x = _centered_instance()
    res = minimal_interval_perturbation(model, x)
    cross = res.epsilon[0] * model.w[1] - res.epsilon[1] * model.w[0]
    assert abs(cross) < 1e-12


def test_minimal_perturbation_lands_in_adjacent_class():
    model, x = _centered_instance()
    res = minimal_interval_perturbation(model, x)
    assert model.classify(x + res.epsilon) == res.target_class


def test_minimal_perturbation_anomalous_input_rejected():
    spec = make_spec(100.0, 4.0, 16.0, 5, seed=0, shuffle=False)
    model = LinearIntervalModel(w=np.array([1.0, 0.0]), b=0.0, spec=spec)
    with pytest.raises(ContractError):
        minimal_interval_perturbation(model, np.array([0.0, 0.0]))


@settings(max_examples=200)
@given(seed=st.integers(min_value=0, max_value=10 ** 6))
def test_minimal_perturbation_never_undercuts_bound(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(2, 30))
    spec = make_spec(float(rng.uniform(-5, 5)), float(rng.uniform(0.5, 4)),
                     float(rng.uniform(1, 10)), int(rng.integers(2, 8)),
                     seed=int(rng.integers(2 ** 31)))
    w = rng.standard_normal(dim)
    model = LinearIntervalModel(w=w, b=float(rng.normal()), spec=spec)
    # project a random point onto the middle of a random band
    i = int(rng.integers(spec.k))
    v = spec.interval_lower(i) + 0.5 * spec.beta
    x0 = rng.standard_normal(dim)
    x = x0 + ((v - model.output(x0)) / float(w @ w)) * w
    res = minimal_interval_perturbation(model, x)
    assert res.norm2 >= interval_bound(w, spec.alpha, 2) - 1e-9


def test_minimal_perturbation_matches_2d_grid_oracle():
    rng = np.random.default_rng(42)
    for _ in range(4):
        spec = make_spec(float(rng.uniform(-3, 3)), float(rng.uniform(1, 3)),
                         float(rng.uniform(2, 8)), 4,
                         seed=int(rng.integers(2 ** 31)))
        w = rng.standard_normal(2) * 2.0
        model = LinearIntervalModel(w=w, b=float(rng.normal()), spec=spec)
        i = int(rng.integers(spec.k))
        v = spec.interval_lower(i) + float(rng.uniform(0.2, 0.8)) * spec.beta
        x0 = rng.standard_normal(2)
        x = x0 + ((v - model.output(x0)) / float(w @ w)) * w
        res = minimal_interval_perturbation(model, x)
        oracle = grid_min_perturbation_2d(w, float(model.b), spec, x,
                                          r_max=4 * res.norm2)
        assert res.norm2 == pytest.approx(oracle, abs=1e-6)


# ---------------------------------------------------------------------------
# traditional heads: no positive floor
# ---------------------------------------------------------------------------

def _boundary_model():
    """Two-class model with x = 0 exactly on the decision boundary."""
    W = np.array([[1.0, 0.0], [-1.0, 0.0]])
    b = np.array([0.0, 0.0])
    return LinearTraditionalModel(W=W, b=b)


def test_boundary_point_flips_at_1e_minus_6():
    model = _boundary_model()
    res = traditional_boundary_flip(model, np.zeros(2), 1e-6)
    assert res.flipped


def test_flip_delta_zero_does_not_flip():
    model = _boundary_model()
    res = traditional_boundary_flip(model, np.zeros(2), 0.0)
    assert not res.flipped
    assert res.new_class == res.source_class


def test_flip_negative_delta_rejected():
    with pytest.raises(ValidationError):
        traditional_boundary_flip(_boundary_model(), np.zeros(2), -0.1)


def test_flip_identical_weight_rows_rejected():
    model = LinearTraditionalModel(W=np.array([[1.0, 1.0], [1.0, 1.0]]),
                                   b=np.array([0.0, 0.0]))
    with pytest.raises(ValidationError):
        traditional_boundary_flip(model, np.zeros(2), 0.1)


def test_flip_epsilon_norm_equals_delta():
    model = LinearTraditionalModel(W=np.array([[2.0, 1.0], [-1.0, 3.0]]),
                                   b=np.array([0.3, -0.2]))
    res = traditional_boundary_flip(model, np.array([0.5, 0.5]), 0.25)
    assert np.linalg.norm(res.epsilon) == pytest.approx(0.25, rel=1e-12)


def test_minimal_flip_delta_on_boundary_is_tiny():
    # the bisected infimum at a boundary point collapses toward zero
    assert minimal_flip_delta(_boundary_model(), np.zeros(2)) < 1e-10


def test_minimal_flip_delta_shrinks_to_zero_with_distance():
    # as x walks toward the boundary over 5 decades the flipping step
    # tracks the score gap all the way down: no positive floor
    model = _boundary_model()
    deltas = []
    for expo in range(5):
        x = np.array([10.0 ** (-expo), 0.0])
        deltas.append(minimal_flip_delta(model, x))
    assert all(a > b for a, b in zip(deltas, deltas[1:]))
    assert deltas[-1] < 1e-3
    # for this model the gap is 2*x0 and ||w2 - w1|| = 2, so delta ~= x0
    for expo, d in enumerate(deltas):
        assert d == pytest.approx(10.0 ** (-expo), rel=1e-6)


def test_minimal_flip_delta_unreachable_raises():
    # second class is a constant offset of the first: scores never cross
    model = LinearTraditionalModel(W=np.array([[1.0, 0.0], [1.0, 0.0],
                                               [0.0, 1.0]]),
                                   b=np.array([1.0, 0.0, 0.0]))
    with pytest.raises((ContractError, ValidationError)):
        minimal_flip_delta(model, np.array([5.0, 0.0]))


# ---------------------------------------------------------------------------
# randomized trial harness
# ---------------------------------------------------------------------------

def test_run_bound_trials_emits_three_rows_per_trial():
    rows = run_bound_trials(20, seed=3)
    assert len(rows) == 60
    for t in range(20):
        chunk = rows[3 * t: 3 * t + 3]
        assert [r.trial_id for r in chunk] == [t, t, t]
        assert [r.p for r in chunk] == [1.0, 2.0, math.inf]
        # measurement only attaches to the L2 row
        assert chunk[0].measured_min_norm is None
        assert chunk[1].measured_min_norm is not None
        assert chunk[2].measured_min_norm is None
        assert chunk[1].margin == pytest.approx(
            chunk[1].measured_min_norm - chunk[1].analytic_bound)


def test_run_bound_trials_no_violations():
    rows = run_bound_trials(200, seed=17)
    assert count_violations(rows) == 0


def test_run_bound_trials_reproducible():
    a = run_bound_trials(10, seed=5)
    b = run_bound_trials(10, seed=5)
    assert a == b


def test_count_violations_detects_planted_undercut():
    rows = run_bound_trials(5, seed=1)
    bad = rows[1]
    planted = type(bad)(trial_id=bad.trial_id, p=bad.p, norm_w=bad.norm_w,
                        alpha=bad.alpha, analytic_bound=bad.analytic_bound,
                        measured_min_norm=bad.analytic_bound * 0.5,
                        margin=-bad.analytic_bound * 0.5)
    assert count_violations(rows + [planted]) == 1


def test_bound_csv_layout(tmp_path):
    rows = run_bound_trials(4, seed=9)
    path = tmp_path / "bounds.csv"
    write_bound_csv(rows, str(path))
    with open(path, newline="") as f:
        got = list(csv.reader(f))
    assert got[0] == BOUND_CSV_HEADER
    assert len(got) == 1 + len(rows)
    # blank measured/margin cells off the L2 rows
    assert got[1][4] == "" and got[1][5] == ""
    assert got[2][4] != "" and got[2][5] != ""
    assert float(got[2][3]) == pytest.approx(rows[1].analytic_bound, rel=1e-9)


def test_doubling_alpha_doubles_all_bounds():
    rng = np.random.default_rng(11)
    w = rng.standard_normal(6)
    for p in (1, 2, np.inf):
        assert interval_bound(w, 2.4, p) == pytest.approx(
            2 * interval_bound(w, 1.2, p), rel=1e-12)


def test_model_validation():
    spec = make_spec(0.0, 1.0, 3.0, 3, seed=0, shuffle=False)
    with pytest.raises(ValidationError):
        LinearIntervalModel(w=np.zeros(2), b=0.0, spec=spec)
    with pytest.raises(ValidationError):
        LinearIntervalModel(w=np.eye(2), b=0.0, spec=spec)
    with pytest.raises(ValidationError):
        LinearTraditionalModel(W=np.array([[1.0, 2.0]]), b=np.array([0.0]))
    with pytest.raises(ValidationError):
        LinearTraditionalModel(W=np.eye(2), b=np.zeros(3))
