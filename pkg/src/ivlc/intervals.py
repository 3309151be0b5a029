"""Interval-label geometry: encoding, decoding, loss, convergence factor.

A class label y is mapped onto a closed real interval. The k intervals are
pairwise disjoint, all of width ``beta``, separated by gaps of width
``alpha``, starting at ``s0``. A fixed random permutation of class indices
is applied before the geometric placement, so interval order carries no
class information. The model emits one real number; membership in an
interval decodes the class, and values landing in a gap (or outside the
covered range) are anomalies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ValidationError

__all__ = [
    "IntervalSpec",
    "IntervalLabel",
    "ANOMALY",
    "make_spec",
    "encode_label",
    "encode_batch",
    "decode_output",
    "decode_batch",
    "interval_loss",
    "convergence_factor",
]

# decode_output returns an int class index, or ANOMALY (None) for values in
# a gap or outside the covered range.
ANOMALY = None


@dataclass(frozen=True)
class IntervalLabel:
    lower: float
    upper: float


@dataclass(frozen=True)
class IntervalSpec:
    """Geometry plus label permutation; the single source of truth for codec ops.

    ``label_perm[y]`` is the interval index assigned to class y;
    ``inv_perm`` undoes it.
    """

    s0: float
    alpha: float
    beta: float
    k: int
    label_perm: tuple
    inv_perm: tuple
    seed: Optional[int] = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        if self.beta <= 0:
            raise ValidationError(f"beta must be > 0, got {self.beta}")
        if self.k < 2:
            raise ValidationError(f"k must be >= 2, got {self.k}")
        if sorted(self.label_perm) != list(range(self.k)):
            raise ValidationError("label_perm is not a permutation of 0..k-1")
        for y in range(self.k):
            if self.inv_perm[self.label_perm[y]] != y:
                raise ValidationError("inv_perm does not invert label_perm")

    def interval_lower(self, i: int) -> float:
        """Lower bound of geometric interval i (before any permutation)."""
        return self.s0 + i * (self.alpha + self.beta)

    def interval_upper(self, i: int) -> float:
        return self.interval_lower(i) + self.beta

    def to_json_dict(self) -> dict:
        return {
            "s0": self.s0,
            "alpha": self.alpha,
            "beta": self.beta,
            "k": self.k,
            "label_perm": list(self.label_perm),
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "IntervalSpec":
        perm = tuple(int(p) for p in d["label_perm"])
        inv = [0] * len(perm)
        for y, p in enumerate(perm):
            inv[p] = y
        return cls(s0=float(d["s0"]), alpha=float(d["alpha"]), beta=float(d["beta"]),
                   k=int(d["k"]), label_perm=perm, inv_perm=tuple(inv),
                   seed=d.get("seed"))


def make_spec(s0: float, alpha: float, beta: float, k: int, seed: int,
              shuffle: bool = True) -> IntervalSpec:
    """Build an IntervalSpec with a seeded uniformly-random label permutation.

    ``shuffle=False`` keeps the identity permutation (interval order equals
    class order).
    """
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if shuffle:
        perm = tuple(int(p) for p in np.random.default_rng(seed).permutation(k))
    else:
        perm = tuple(range(k))
    inv = [0] * k
    for y, p in enumerate(perm):
        inv[p] = y
    return IntervalSpec(s0=float(s0), alpha=float(alpha), beta=float(beta), k=int(k),
                        label_perm=perm, inv_perm=tuple(inv), seed=int(seed))


def encode_label(y: int, spec: IntervalSpec) -> IntervalLabel:
    """Interval assigned to hard label y, after the label permutation."""
    if not 0 <= y < spec.k:
        raise ValidationError(f"label {y} out of range 0..{spec.k - 1}")
    i = spec.label_perm[y]
    lower = spec.interval_lower(i)
    return IntervalLabel(lower=lower, upper=lower + spec.beta)


def encode_batch(labels: Sequence[int], spec: IntervalSpec) -> list[IntervalLabel]:
    """Elementwise encode_label, order preserved."""
    out = []
    for idx, y in enumerate(labels):
        try:
            out.append(encode_label(int(y), spec))
        except ValidationError as exc:
            raise ValidationError(f"label at index {idx}: {exc}") from None
    return out


def decode_output(v: float, spec: IntervalSpec) -> Optional[int]:
    """Class index whose interval contains ``v``, or ANOMALY.

    Boundaries are inclusive on both ends. The floor-based index may land
    one interval low when (v - s0) is an exact multiple of (alpha + beta)
    up to float rounding, so membership is checked on the floor index and
    its successor.
    """
    v = float(v)
    if not np.isfinite(v):
        raise ValidationError(f"cannot decode non-finite value {v}")
    i = int(np.floor((v - spec.s0) / (spec.alpha + spec.beta)))
    for j in (i, i + 1):
        if 0 <= j < spec.k and spec.interval_lower(j) <= v <= spec.interval_upper(j):
            return spec.inv_perm[j]
    return ANOMALY


def decode_batch(values: np.ndarray, spec: IntervalSpec) -> list[Optional[int]]:
    return [decode_output(v, spec) for v in np.asarray(values).reshape(-1)]


def interval_loss(outputs: ad.Tensor, labels: Sequence[IntervalLabel],
                  variant: str = "l2norm") -> ad.Tensor:
    """Batch loss: L2 norm of per-example out-of-interval penalties.

    Each example pays relu(lower - f) + relu(f - upper); the batch loss is
    the plain L2 norm of that penalty vector, so the loss and its gradient
    are exactly 0 whenever every output lies inside its interval.

    ``variant="mean_square"`` swaps the norm for the mean of squared
    penalties. It is smoother to optimize but is not the definition above;
    reported numbers use "l2norm".
    """
    outputs = outputs if isinstance(outputs, ad.Tensor) else ad.Tensor(outputs)
    n = outputs.shape[0] if outputs.data.ndim > 0 else 1
    if outputs.data.ndim != 2 or outputs.shape[1] != 1:
        raise ContractError(f"interval_loss expects outputs of shape [n,1], got {outputs.shape}")
    if len(labels) != n:
        raise ContractError(f"{n} outputs but {len(labels)} interval labels")
    lower = np.array([[lab.lower] for lab in labels], dtype=outputs.dtype)
    upper = np.array([[lab.upper] for lab in labels], dtype=outputs.dtype)
    below = ad.relu(ad.sub(ad.Tensor(lower), outputs))
    above = ad.relu(ad.sub(outputs, ad.Tensor(upper)))
    penalty = ad.add(below, above)
    squared = ad.mul(penalty, penalty)
    if variant == "l2norm":
        return ad.sqrt(ad.sum_all(squared))
    if variant == "mean_square":
        return ad.mul(ad.sum_all(squared), 1.0 / n)
    raise ValidationError(f"unknown interval loss variant: {variant!r}")


def convergence_factor(spec: IntervalSpec) -> float:
    """beta / (k*(alpha+beta) - alpha): interval width over total span.

    For fixed alpha this increases monotonically with beta toward 1/k.
    """
    return spec.beta / (spec.k * (spec.alpha + spec.beta) - spec.alpha)
