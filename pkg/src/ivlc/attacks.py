"""Gradient-based evasion attacks and transfer experiments.

Crafting always differentiates the training loss with respect to the
input: softmax cross-entropy for traditional heads, the interval penalty
norm for interval heads. Batched crafting is exact for sign-based attacks
because both losses keep per-example gradient signs independent.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .errors import ContractError, TransferAbortError, ValidationError
from .intervals import IntervalSpec, encode_batch, interval_loss, make_spec
from .models import (Model, ModelConfig, TrainConfig, apply_model, build_model,
                     predict, train)
from .seeding import derive_seed

__all__ = [
    "Outcome",
    "AttackConfig",
    "ExampleRecord",
    "AttackReport",
    "attack_loss",
    "input_gradient",
    "fgsm",
    "iterative_attack",
    "craft",
    "attack_outcomes",
    "evaluate_attack",
    "transfer_attack",
    "transferability_matrix",
    "write_records_csv",
]

METHODS = ("fgsm", "bim", "pgd")


class Outcome(enum.Enum):
    """Post-attack fate of one example, judged on the victim."""
    SUCCESS = "success"   # confidently predicted as a different class
    ANOMALY = "anomaly"   # interval decode matched no interval
    FAIL = "fail"         # still classified correctly


@dataclass(frozen=True)
class AttackConfig:
    """Method plus budget. ``eta`` is the L-inf radius in input units.

    ``step_size`` defaults to eta for fgsm and eta/4 otherwise;
    ``random_start`` defaults on exactly for pgd. ``clip`` is the valid
    input range, or None to skip range clipping.
    """

    method: str
    eta: float
    iters: int = 20
    step_size: Optional[float] = None
    random_start: Optional[bool] = None
    clip: Optional[tuple] = (0.0, 1.0)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown attack method {self.method!r}, "
                                  f"expected one of {METHODS}")
        # eta 0 is a legal degenerate budget: x_adv == x, success 0
        if self.eta < 0:
            raise ValidationError(f"eta must be >= 0, got {self.eta}")
        if self.iters < 1:
            raise ValidationError(f"iters must be >= 1, got {self.iters}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValidationError(f"step_size must be > 0, got {self.step_size}")
        if self.method == "bim" and self.random_start:
            raise ValidationError("random start on bim would make it pgd")
        if self.clip is not None and self.clip[1] <= self.clip[0]:
            raise ValidationError(f"bad clip range {self.clip}")

    @property
    def effective_step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.eta if self.method == "fgsm" else self.eta / 4.0

    @property
    def effective_iters(self) -> int:
        return 1 if self.method == "fgsm" else self.iters

    @property
    def starts_random(self) -> bool:
        if self.random_start is None:
            return self.method == "pgd"
        return self.random_start


def attack_loss(model: Model, X: np.ndarray, y: np.ndarray):
    """Fresh tape with the input as the only leaf; parameters are constants.

    Returns (tape, input leaf, scalar loss).
    """
    tape = ad.Tape()
    x = tape.leaf(np.asarray(X, dtype=ad.DEFAULT_DTYPE))
    out = apply_model(model.config, model.params, x)
    if model.task == "interval":
        loss = interval_loss(out, encode_batch(y, model.spec))
    else:
        loss = ad.cross_entropy(out, y)
    return tape, x, loss


def input_gradient(model: Model, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d loss / d input, same shape as X."""
    tape, x, loss = attack_loss(model, X, y)
    return ad.backward(tape, loss)[x.node]


def _project(x_adv, x0, eta, clip):
    np.clip(x_adv, x0 - eta, x0 + eta, out=x_adv)
    if clip is not None:
        np.clip(x_adv, clip[0], clip[1], out=x_adv)
    return x_adv


def iterative_attack(model: Model, X: np.ndarray, y: np.ndarray,
                     cfg: AttackConfig, seed: int = 0,
                     indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Signed-gradient ascent inside the L-inf ball around X.

    PGD start noise is drawn per example from a stream keyed by
    (seed, example id), so results do not depend on how examples are
    batched together. ``indices`` supplies the ids; defaults to 0..n-1.
    """
    X = np.asarray(X, dtype=ad.DEFAULT_DTYPE)
    y = np.asarray(y)
    if X.shape[0] != y.shape[0]:
        raise ContractError(f"{X.shape[0]} inputs but {y.shape[0]} labels")
    ids = np.arange(X.shape[0]) if indices is None else np.asarray(indices)
    x_adv = X.copy()
    if cfg.starts_random:
        for row, ex in enumerate(ids):
            noise = np.random.default_rng((seed, int(ex))).uniform(
                -cfg.eta, cfg.eta, size=X.shape[1:])
            x_adv[row] += noise.astype(X.dtype)
        _project(x_adv, X, cfg.eta, cfg.clip)
    step = np.float32(cfg.effective_step)
    for _ in range(cfg.effective_iters):
        g = input_gradient(model, x_adv, y)
        x_adv = x_adv + step * np.sign(g, dtype=X.dtype)
        _project(x_adv, X, cfg.eta, cfg.clip)
    return x_adv


def fgsm(model: Model, X: np.ndarray, y: np.ndarray, eta: float,
         clip: Optional[tuple] = (0.0, 1.0)) -> np.ndarray:
    """Single signed-gradient step of size eta; sign(0) moves nothing."""
    cfg = AttackConfig(method="fgsm", eta=eta, clip=clip)
    return iterative_attack(model, X, y, cfg)


def craft(model: Model, X: np.ndarray, y: np.ndarray, cfg: AttackConfig,
          seed: int = 0, indices: Optional[np.ndarray] = None,
          chunk: int = 256) -> np.ndarray:
    """iterative_attack in memory-bounded chunks."""
    X = np.asarray(X, dtype=ad.DEFAULT_DTYPE)
    ids = np.arange(X.shape[0]) if indices is None else np.asarray(indices)
    out = np.empty_like(X)
    for start in range(0, X.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = iterative_attack(model, X[sl], np.asarray(y)[sl], cfg,
                                   seed=seed, indices=ids[sl])
    return out


def attack_outcomes(model: Model, X_adv: np.ndarray, y: np.ndarray) -> list:
    """Per-example Outcome under ``model``. Anomalies are not successes."""
    post = predict(model, X_adv)
    outcomes = []
    for p, label in zip(post, np.asarray(y)):
        if p == -1:
            outcomes.append(Outcome.ANOMALY)
        elif p != label:
            outcomes.append(Outcome.SUCCESS)
        else:
            outcomes.append(Outcome.FAIL)
    return outcomes


@dataclass(frozen=True)
class ExampleRecord:
    example_id: int
    true_label: int
    pre_attack_pred: int
    post_attack_pred: int
    outcome: str
    linf_norm: float
    l2_norm: float


@dataclass
class AttackReport:
    """Rates over the attacked subset plus one record per example."""

    method: str
    eta: float
    iters: int
    step_size: float
    random_start: bool
    n_attacked: int
    success_rate: float
    anomaly_rate: float
    fail_rate: float
    mean_linf: float
    mean_l2: float
    records: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d


def _build_report(cfg: AttackConfig, victim: Model, X0, X_adv, y, pre, ids):
    post = predict(victim, X_adv)
    delta = (X_adv.astype(np.float64) - X0.astype(np.float64)).reshape(len(ids), -1)
    linf = np.abs(delta).max(axis=1)
    l2 = np.sqrt((delta ** 2).sum(axis=1))
    records = []
    n_success = n_anomaly = 0
    for row, ex in enumerate(ids):
        if post[row] == -1:
            outcome = Outcome.ANOMALY
            n_anomaly += 1
        elif post[row] != y[row]:
            outcome = Outcome.SUCCESS
            n_success += 1
        else:
            outcome = Outcome.FAIL
        records.append(ExampleRecord(
            example_id=int(ex), true_label=int(y[row]),
            pre_attack_pred=int(pre[row]), post_attack_pred=int(post[row]),
            outcome=outcome.value,
            linf_norm=float(linf[row]), l2_norm=float(l2[row])))
    n = len(ids)
    return AttackReport(
        method=cfg.method, eta=cfg.eta, iters=cfg.effective_iters,
        step_size=cfg.effective_step, random_start=cfg.starts_random,
        n_attacked=n,
        success_rate=n_success / n,
        anomaly_rate=n_anomaly / n,
        fail_rate=(n - n_success - n_anomaly) / n,
        mean_linf=float(linf.mean()),
        mean_l2=float(l2.mean()),
        records=records)


def evaluate_attack(threat: Model, victim: Model, data: Dataset,
                    cfg: AttackConfig, seed: int = 0,
                    limit: Optional[int] = None) -> AttackReport:
    """Craft on ``threat``, judge on ``victim``.

    Only examples the victim classifies correctly are attacked (the rest
    are already misclassified); ``limit`` caps the subset size, keeping the
    first examples in dataset order. White box is threat=victim.
    """
    pre = predict(victim, data.X)
    ids = np.flatnonzero(pre == data.y)
    if ids.size == 0:
        raise ContractError("victim classifies nothing correctly; nothing to attack")
    if limit is not None:
        ids = ids[:limit]
    X0 = data.X[ids]
    y = data.y[ids]
    X_adv = craft(threat, X0, y, cfg, seed=seed, indices=ids)
    return _build_report(cfg, victim, X0, X_adv, y, pre[ids], ids)


def transfer_attack(oracle: Model, threat_config: ModelConfig,
                    threat_hp: TrainConfig, victim: Model,
                    train_data: Dataset, eval_data: Dataset,
                    cfg: AttackConfig, seed: int = 0,
                    threat_spec: Optional[IntervalSpec] = None,
                    threat: Optional[Model] = None,
                    limit: Optional[int] = None):
    """Black-box transfer: craft on a locally trained substitute.

    The substitute ("threat") always has the same head kind as the victim,
    but is trained from scratch on ``train_data`` relabeled by querying the
    ``oracle`` (a separately trained model, usually of the opposite head
    kind); examples the oracle flags as anomalies are dropped, and more
    than 50% anomalies aborts the run. Adversarial examples are crafted on
    the substitute and judged on the victim over ``eval_data``. Pass
    ``threat`` to reuse a substitute across budgets. Returns
    (report, threat).
    """
    if threat is not None:
        if threat.task != victim.task:
            raise ValidationError(
                f"threat head {threat.task!r} != victim head {victim.task!r}")
    else:
        if threat_config.head != victim.config.head:
            raise ValidationError(
                f"threat head {threat_config.head!r} != victim head "
                f"{victim.config.head!r}")
        oracle_preds = predict(oracle, train_data.X)
        keep = oracle_preds != -1
        anomaly_frac = 1.0 - float(keep.mean())
        if anomaly_frac > 0.5:
            raise TransferAbortError(
                f"oracle flagged {anomaly_frac:.1%} of the query set as "
                f"anomalies; substitute labels would be mostly garbage")
        relabeled = Dataset(X=train_data.X[keep], y=oracle_preds[keep],
                            k=train_data.k, norm=train_data.norm)
        if threat_config.head == "interval" and threat_spec is None:
            vspec = victim.spec
            threat_spec = make_spec(vspec.s0, vspec.alpha, vspec.beta, vspec.k,
                                    seed=derive_seed(seed, "threat-perm"))
        threat = build_model(threat_config,
                             derive_seed(seed, "threat-init"), spec=threat_spec)
        train(threat, relabeled, threat_hp)
    report = evaluate_attack(threat, victim, eval_data, cfg,
                             seed=derive_seed(seed, "threat-craft"), limit=limit)
    return report, threat


def transferability_matrix(models: dict, data: Dataset, cfg: AttackConfig,
                           seed: int = 0) -> dict:
    """Cross-model success rates: craft once per source, judge on every model.

    Returns {source name: {victim name: success rate over the victim's
    correctly classified examples}}.
    """
    clean_correct = {name: predict(m, data.X) == data.y
                     for name, m in models.items()}
    matrix = {}
    for src_name, src in models.items():
        X_adv = craft(src, data.X, data.y, cfg,
                      seed=derive_seed(seed, f"matrix-{src_name}"))
        row = {}
        for dst_name, dst in models.items():
            mask = clean_correct[dst_name]
            if not mask.any():
                row[dst_name] = float("nan")
                continue
            post = predict(dst, X_adv[mask])
            wrong = (post != data.y[mask]) & (post != -1)
            row[dst_name] = float(wrong.mean())
        matrix[src_name] = row
    return matrix


def write_records_csv(report: AttackReport, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["example_id", "true_label", "pre_attack_pred",
                         "post_attack_pred", "outcome", "linf_norm", "l2_norm"])
        for r in report.records:
            writer.writerow([r.example_id, r.true_label, r.pre_attack_pred,
                             r.post_attack_pred, r.outcome,
                             f"{r.linf_norm:.9g}", f"{r.l2_norm:.9g}"])
