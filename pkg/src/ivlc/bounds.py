"""Minimal-perturbation geometry for pure linear models.

For f(x) = w.x + b the smallest L2 perturbation that shifts the output by
d is d*w/||w||^2, with norm |d|/||w||. For an interval head, reaching any
other class means crossing at least the gap alpha, so the minimal
adversarial norm is at least alpha/||w||_2. For a traditional (argmax)
head a point on a decision boundary flips under arbitrarily small steps,
so no positive lower bound exists. Everything here runs in float64.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, ValidationError
from .intervals import IntervalSpec, decode_output, make_spec

__all__ = [
    "LinearIntervalModel",
    "LinearTraditionalModel",
    "MinimalPerturbation",
    "FlipResult",
    "BoundTrialRow",
    "interval_bound",
    "minimal_interval_perturbation",
    "traditional_boundary_flip",
    "minimal_flip_delta",
    "run_bound_trials",
    "count_violations",
    "write_bound_csv",
]

BOUND_CSV_HEADER = ["trial_id", "||w||_p", "alpha", "analytic_bound",
                    "measured_min_norm", "margin"]


@dataclass(frozen=True)
class LinearIntervalModel:
    """f(x) = w.x + b decoded through an interval spec."""

    w: np.ndarray
    b: float
    spec: IntervalSpec

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        object.__setattr__(self, "w", w)
        if w.ndim != 1:
            raise ValidationError(f"w must be a vector, got shape {w.shape}")
        if not np.linalg.norm(w) > 0:
            raise ValidationError("w must be nonzero")

    def output(self, x) -> float:
        return float(self.w @ np.asarray(x, dtype=np.float64) + self.b)

    def classify(self, x) -> Optional[int]:
        return decode_output(self.output(x), self.spec)


@dataclass(frozen=True)
class LinearTraditionalModel:
    """k affine scores f_i(x) = W[i].x + b[i], classified by argmax."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        if W.ndim != 2 or W.shape[0] < 2:
            raise ValidationError(f"W must be [k,d] with k >= 2, got shape {W.shape}")
        if b.shape != (W.shape[0],):
            raise ValidationError(f"b shape {b.shape} does not match k={W.shape[0]}")

    def logits(self, x) -> np.ndarray:
        return self.W @ np.asarray(x, dtype=np.float64) + self.b

    def classify(self, x) -> int:
        return int(self.logits(x).argmax())


def interval_bound(w: np.ndarray, alpha: float, p) -> float:
    """alpha / ||w||_p, the minimal-perturbation floor for interval heads."""
    w = np.asarray(w, dtype=np.float64)
    if alpha <= 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    norm = float(np.linalg.norm(w, ord=p))
    if norm == 0:
        raise ValidationError("w must be nonzero")
    return alpha / norm


@dataclass(frozen=True)
class MinimalPerturbation:
    epsilon: np.ndarray
    norm2: float
    output_shift: float  # signed d: where the output moved
    source_class: int
    target_class: int


def minimal_interval_perturbation(model: LinearIntervalModel,
                                  x: np.ndarray) -> MinimalPerturbation:
    """Exact smallest-L2 perturbation landing f(x) in an adjacent interval.

    epsilon = d * w / ||w||^2 with d the signed output-distance to the
    nearest boundary of a neighboring interval. The landing point is the
    inclusive interval edge; if float rounding drops it into the gap, the
    shift is regrown by a relative 1e-12 then 1e-9 until it decodes.
    """
    spec = model.spec
    f0 = model.output(x)
    source = decode_output(f0, spec)
    if source is None:
        raise ContractError(f"x is already anomalous (f(x)={f0} decodes to no class)")
    i = spec.label_perm[source]
    candidates = []
    if i > 0:
        candidates.append((spec.interval_lower(i) - spec.alpha) - f0)  # down
    if i < spec.k - 1:
        candidates.append((spec.interval_lower(i) + spec.beta + spec.alpha) - f0)
    d = min(candidates, key=abs)
    w = model.w
    w_sq = float(w @ w)
    x = np.asarray(x, dtype=np.float64)
    for overshoot in (0.0, 1e-12, 1e-9):
        eps = (d * (1.0 + overshoot)) * w / w_sq
        target = decode_output(model.output(x + eps), spec)
        if target is not None and target != source:
            return MinimalPerturbation(
                epsilon=eps, norm2=float(np.linalg.norm(eps)),
                output_shift=d * (1.0 + overshoot),
                source_class=source, target_class=target)
    raise ContractError("perturbed output failed to decode into the adjacent "
                        "interval; geometry inconsistent")


@dataclass(frozen=True)
class FlipResult:
    epsilon: np.ndarray
    flipped: bool
    source_class: int
    new_class: int


def traditional_boundary_flip(model: LinearTraditionalModel, x: np.ndarray,
                              delta: float) -> FlipResult:
    """Step of L2 norm ``delta`` along the top-2 score difference direction.

    epsilon = delta * (w2 - w1) / ||w2 - w1||_2, where classes 1 and 2 are
    the two highest-scoring at x. On the 1-2 decision boundary any
    delta > 0 flips the argmax.
    """
    if delta < 0:
        raise ValidationError(f"delta must be >= 0, got {delta}")
    x = np.asarray(x, dtype=np.float64)
    scores = model.logits(x)
    order = np.argsort(-scores, kind="stable")
    c1, c2 = int(order[0]), int(order[1])
    direction = model.W[c2] - model.W[c1]
    norm = float(np.linalg.norm(direction))
    if norm == 0:
        raise ValidationError(f"classes {c1} and {c2} share the same weight row; "
                              f"no boundary to cross")
    eps = (delta / norm) * direction
    new_class = model.classify(x + eps)
    return FlipResult(epsilon=eps, flipped=new_class != int(scores.argmax()),
                      source_class=int(scores.argmax()), new_class=new_class)


def minimal_flip_delta(model: LinearTraditionalModel, x: np.ndarray,
                       tol: float = 1e-12, hi: float = 1.0) -> float:
    """Bisected infimum of flipping step sizes at x.

    For a linear model this converges to (score gap) / ||w2 - w1||; it is
    the empirical side of the no-positive-lower-bound statement.
    """
    for _ in range(60):
        if traditional_boundary_flip(model, x, hi).flipped:
            break
        hi *= 2.0
    else:
        raise ContractError("no flipping delta found up to astronomically large steps")
    lo = 0.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if traditional_boundary_flip(model, x, mid).flipped:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# randomized trials backing the bound-check command
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundTrialRow:
    trial_id: int
    p: float  # 1, 2, or inf; rows are emitted in this order per trial
    norm_w: float
    alpha: float
    analytic_bound: float
    measured_min_norm: Optional[float]  # filled on the p=2 row only
    margin: Optional[float]


def _random_instance(rng):
    """A random linear interval model plus a point inside a random interval."""
    dim = int(rng.integers(2, 40))
    k = int(rng.integers(2, 12))
    alpha = float(rng.uniform(0.5, 4.0))
    beta = float(rng.uniform(1.0, 12.0))
    s0 = float(rng.uniform(-10.0, 10.0))
    spec = make_spec(s0, alpha, beta, k, seed=int(rng.integers(2 ** 31)))
    w = rng.standard_normal(dim) * rng.uniform(0.5, 2.0)
    model = LinearIntervalModel(w=w, b=float(rng.normal(0, 2)), spec=spec)
    i = int(rng.integers(k))
    u = float(rng.uniform(0.0, 1.0))
    x0 = rng.standard_normal(dim)
    w_sq = float(model.w @ model.w)
    for target_u in (u, min(max(u, 1e-3), 1.0 - 1e-3)):
        v = spec.interval_lower(i) + target_u * beta
        x = x0 + ((v - model.output(x0)) / w_sq) * model.w
        if model.classify(x) is not None:
            return model, x
    raise ContractError("failed to place a point inside an interval")


def run_bound_trials(n_trials: int, seed: int) -> list:
    """Random (model, x) pairs; three rows per trial, one per norm order."""
    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(n_trials):
        model, x = _random_instance(rng)
        measured = minimal_interval_perturbation(model, x).norm2
        for p in (1, 2, np.inf):
            bound = interval_bound(model.w, model.spec.alpha, p)
            is_l2 = p == 2
            rows.append(BoundTrialRow(
                trial_id=trial, p=float(p),
                norm_w=float(np.linalg.norm(model.w, ord=p)),
                alpha=model.spec.alpha,
                analytic_bound=bound,
                measured_min_norm=measured if is_l2 else None,
                margin=measured - bound if is_l2 else None))
    return rows


def count_violations(rows, tol: float = 1e-9) -> int:
    """p=2 rows where the measured minimum undercuts the analytic bound."""
    return sum(1 for r in rows
               if r.measured_min_norm is not None
               and r.measured_min_norm < r.analytic_bound - tol)


def write_bound_csv(rows, path: str) -> None:
    def fmt(v):
        return "" if v is None else f"{v:.12g}"

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BOUND_CSV_HEADER)
        for r in rows:
            writer.writerow([r.trial_id, fmt(r.norm_w), fmt(r.alpha),
                             fmt(r.analytic_bound), fmt(r.measured_min_norm),
                             fmt(r.margin)])
