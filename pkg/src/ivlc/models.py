"""Feed-forward models, training, evaluation, and checkpointing.

A model is a plain parameter list plus a config describing the stack:
optional single conv stage, then fully connected layers, then a linear
head. The head is either "traditional" (k logits, softmax cross-entropy)
or "interval" (one real output trained against interval labels).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Dataset, batch_iterator
from .errors import CheckpointError, ContractError, ValidationError
from .intervals import IntervalSpec, decode_batch, encode_batch, interval_loss
from .seeding import derive_seed

__all__ = [
    "ConvStage",
    "ModelConfig",
    "Model",
    "TrainConfig",
    "EpochStats",
    "EvalResult",
    "build_model",
    "apply_model",
    "forward",
    "predict",
    "evaluate",
    "penultimate_features",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"IVLC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvStage:
    """One valid-padding stride-1 convolution with relu, before the FC stack."""
    filters: int
    kernel: int

    def __post_init__(self):
        if self.filters < 1 or self.kernel < 1:
            raise ValidationError(f"bad conv stage: {self.filters} filters, "
                                  f"kernel {self.kernel}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description, independent of any parameter values.

    ``input_shape`` is (features,) for flat inputs or (C, H, W) for images;
    image inputs without a conv stage are flattened. ``activations`` defaults
    to relu for every hidden layer.
    """

    input_shape: tuple
    hidden: tuple
    head: str
    k: int
    activations: tuple = ()
    conv: Optional[ConvStage] = None

    def __post_init__(self):
        if self.head not in ("interval", "traditional"):
            raise ValidationError(f"head must be 'interval' or 'traditional', "
                                  f"got {self.head!r}")
        if self.k < 2:
            raise ValidationError(f"k must be >= 2, got {self.k}")
        if len(self.input_shape) not in (1, 3):
            raise ValidationError(f"input_shape must be (features,) or (C,H,W), "
                                  f"got {self.input_shape}")
        if any(w < 1 for w in self.hidden):
            raise ValidationError(f"hidden widths must be >= 1, got {self.hidden}")
        if not self.activations:
            object.__setattr__(self, "activations", ("relu",) * len(self.hidden))
        if len(self.activations) != len(self.hidden):
            raise ValidationError(f"{len(self.hidden)} hidden layers but "
                                  f"{len(self.activations)} activations")
        if self.conv is not None and len(self.input_shape) != 3:
            raise ValidationError("conv stage requires (C,H,W) input")

    @property
    def head_dim(self) -> int:
        return 1 if self.head == "interval" else self.k

    def flat_dim(self) -> int:
        """Feature count entering the FC stack."""
        if self.conv is None:
            return int(np.prod(self.input_shape))
        c, h, w = self.input_shape
        kh = kw = self.conv.kernel
        if kh > h or kw > w:
            raise ValidationError(f"conv kernel {kh} exceeds input {self.input_shape}")
        return self.conv.filters * (h - kh + 1) * (w - kw + 1)

    def param_layout(self) -> list:
        """Ordered (name, shape) pairs matching the flat parameter list."""
        layout = []
        if self.conv is not None:
            c = self.input_shape[0]
            layout.append(("conv", (self.conv.filters, c,
                                    self.conv.kernel, self.conv.kernel)))
        dims = [self.flat_dim(), *self.hidden, self.head_dim]
        for i, (fin, fout) in enumerate(zip(dims[:-1], dims[1:])):
            layout.append((f"w{i}", (fin, fout)))
            layout.append((f"b{i}", (fout,)))
        return layout

    def to_json_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "hidden": list(self.hidden),
            "head": self.head,
            "k": self.k,
            "activations": list(self.activations),
            "conv": (None if self.conv is None
                     else {"filters": self.conv.filters, "kernel": self.conv.kernel}),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        conv = d.get("conv")
        return cls(input_shape=tuple(d["input_shape"]), hidden=tuple(d["hidden"]),
                   head=d["head"], k=int(d["k"]),
                   activations=tuple(d["activations"]),
                   conv=None if conv is None else ConvStage(**conv))


@dataclass
class Model:
    """Parameters plus the config that gives them meaning.

    Interval models carry the IntervalSpec they were trained against;
    traditional models carry none.
    """

    config: ModelConfig
    params: list
    spec: Optional[IntervalSpec] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.config.head == "interval":
            if self.spec is None:
                raise ValidationError("interval-head model requires an IntervalSpec")
            if self.spec.k != self.config.k:
                raise ValidationError(f"spec has k={self.spec.k}, "
                                      f"config has k={self.config.k}")
        layout = self.config.param_layout()
        if len(self.params) != len(layout):
            raise ValidationError(f"expected {len(layout)} parameter arrays, "
                                  f"got {len(self.params)}")
        for p, (name, shape) in zip(self.params, layout):
            if p.shape != shape:
                raise ValidationError(f"parameter {name} has shape {p.shape}, "
                                      f"expected {shape}")

    @property
    def task(self) -> str:
        return self.config.head


def build_model(config: ModelConfig, seed: int,
                spec: Optional[IntervalSpec] = None) -> Model:
    """Fresh model with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init."""
    rng = np.random.default_rng(seed)
    params = []
    fan_in = None
    for name, shape in config.param_layout():
        if name == "conv":
            fan_in = int(np.prod(shape[1:]))
        elif name.startswith("w"):
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=shape).astype(ad.DEFAULT_DTYPE))
    return Model(config=config, params=params, spec=spec,
                 meta={"init_seed": int(seed), "epochs_trained": 0})


def apply_model(config: ModelConfig, params: Sequence, x,
                want_features: bool = False):
    """Forward pass over explicit parameters (taped tensors or plain arrays).

    Returns the head output [n, head_dim]; with ``want_features`` also the
    activations entering the head.
    """
    tensors = [p if isinstance(p, ad.Tensor) else ad.Tensor(p) for p in params]
    h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    i = 0
    if config.conv is not None:
        h = ad.flatten(ad.relu(ad.conv2d(h, tensors[0])))
        i = 1
    elif h.data.ndim > 2:
        h = ad.flatten(h)
    for kind in config.activations:
        h = ad.activation(ad.add(ad.matmul(h, tensors[i]), tensors[i + 1]), kind)
        i += 2
    features = h
    out = ad.add(ad.matmul(h, tensors[i]), tensors[i + 1])
    return (out, features) if want_features else out


def forward(model: Model, X: np.ndarray) -> np.ndarray:
    """Raw head output as a plain array; no tape involved."""
    return apply_model(model.config, model.params, np.asarray(X)).data


def predict(model: Model, X: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Hard predictions; -1 marks an interval anomaly (no interval matched)."""
    X = np.asarray(X)
    preds = np.empty(X.shape[0], dtype=np.int64)
    for start in range(0, X.shape[0], chunk):
        out = forward(model, X[start:start + chunk])
        if model.task == "traditional":
            preds[start:start + chunk] = out.argmax(axis=1)
        else:
            decoded = decode_batch(out[:, 0], model.spec)
            preds[start:start + chunk] = [-1 if d is None else d for d in decoded]
    return preds


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    anomaly_rate: float
    n: int


def evaluate(model: Model, data: Dataset) -> EvalResult:
    """Accuracy over a dataset; anomalies count as misclassified."""
    preds = predict(model, data.X)
    return EvalResult(accuracy=float((preds == data.y).mean()),
                      anomaly_rate=float((preds == -1).mean()),
                      n=data.n)


def penultimate_features(model: Model, X: np.ndarray) -> np.ndarray:
    """Activations feeding the head layer."""
    if not model.config.hidden and model.config.conv is None:
        raise ContractError("model has no hidden representation to export")
    _, feats = apply_model(model.config, model.params, np.asarray(X),
                           want_features=True)
    return feats.data


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    lr: float
    batch_size: int
    seed: int
    shuffle: bool = True
    loss_variant: str = "l2norm"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: Optional[float]


def _batch_loss(model: Model, leaves, Xb, yb, variant: str) -> ad.Tensor:
    out = apply_model(model.config, leaves, ad.Tensor(Xb))
    if model.task == "interval":
        return interval_loss(out, encode_batch(yb, model.spec), variant=variant)
    return ad.cross_entropy(out, yb)


def train(model: Model, data: Dataset, hp: TrainConfig,
          test_data: Optional[Dataset] = None) -> list:
    """Plain SGD, in place. Returns per-epoch stats.

    Batch order reshuffles every epoch under a seed derived from
    (hp.seed, epoch), so runs are reproducible end to end.
    """
    if data.k != model.config.k:
        raise ValidationError(f"dataset has k={data.k}, model has k={model.config.k}")
    history = []
    for epoch in range(hp.epochs):
        batch_seed = derive_seed(hp.seed, f"batch-e{epoch}")
        losses = []
        for Xb, yb in batch_iterator(data, hp.batch_size, hp.shuffle, seed=batch_seed):
            tape = ad.Tape()
            leaves = [tape.leaf(p) for p in model.params]
            loss = _batch_loss(model, leaves, Xb, yb, hp.loss_variant)
            grads = ad.backward(tape, loss)
            for i, leaf in enumerate(leaves):
                model.params[i] = model.params[i] - hp.lr * grads[leaf.node]
            losses.append(loss.item())
        history.append(EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            train_acc=evaluate(model, data).accuracy,
            test_acc=(evaluate(model, test_data).accuracy
                      if test_data is not None else None),
        ))
        model.meta["epochs_trained"] = model.meta.get("epochs_trained", 0) + 1
    return history


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config JSON, spec JSON, f32 payloads
# ---------------------------------------------------------------------------

def _json_block(d: Optional[dict]) -> bytes:
    if d is None:
        return struct.pack("<I", 0)
    raw = json.dumps(d, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(model: Model, path: str) -> None:
    """Binary snapshot: little-endian, float32 parameter payloads."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        config = model.config.to_json_dict()
        config["meta"] = model.meta
        f.write(_json_block(config))
        f.write(_json_block(model.spec.to_json_dict() if model.spec else None))
        f.write(struct.pack("<I", len(model.params)))
        for p in model.params:
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def _take(buf: bytes, offset: int, count: int, what: str):
    if offset + count > len(buf):
        raise CheckpointError(f"truncated checkpoint: wanted {count} bytes of "
                              f"{what} at offset {offset}, file has {len(buf)}")
    return buf[offset:offset + count], offset + count


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as f:
        buf = f.read()
    raw, off = _take(buf, 0, 4, "magic")
    if raw != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw!r}, "
                              f"expected {CHECKPOINT_MAGIC!r}")
    raw, off = _take(buf, off, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    def json_block(off, what):
        raw, off = _take(buf, off, 4, f"{what} length")
        n = struct.unpack("<I", raw)[0]
        if n == 0:
            return None, off
        raw, off = _take(buf, off, n, what)
        try:
            return json.loads(raw), off
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt {what} block: {exc}") from exc

    config_dict, off = json_block(off, "config")
    if config_dict is None:
        raise CheckpointError("missing config block")
    meta = config_dict.pop("meta", {})
    spec_dict, off = json_block(off, "interval spec")
    raw, off = _take(buf, off, 4, "tensor count")
    n_tensors = struct.unpack("<I", raw)[0]
    params = []
    for t in range(n_tensors):
        raw, off = _take(buf, off, 4, f"tensor {t} ndim")
        ndim = struct.unpack("<I", raw)[0]
        raw, off = _take(buf, off, 4 * ndim, f"tensor {t} shape")
        shape = struct.unpack(f"<{ndim}I", raw)
        count = int(np.prod(shape)) if ndim else 1
        raw, off = _take(buf, off, 4 * count, f"tensor {t} payload")
        params.append(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after last tensor")
    try:
        config = ModelConfig.from_json_dict(config_dict)
        spec = IntervalSpec.from_json_dict(spec_dict) if spec_dict else None
        return Model(config=config, params=params, spec=spec, meta=meta)
    except (ValidationError, KeyError) as exc:
        raise CheckpointError(f"checkpoint inconsistent: {exc}") from exc
