import numpy as np
import pytest

from ivlc.data import Dataset, synthetic_blobs
from ivlc.errors import CheckpointError, ContractError, ValidationError
from ivlc.intervals import decode_output, encode_batch, make_spec
from ivlc.models import (ConvStage, Model, ModelConfig, TrainConfig,
                         build_model, evaluate, forward, load_checkpoint,
                         penultimate_features, predict, save_checkpoint,
                         train)


def mlp_config(head="interval", hidden=(8,), k=3, input_shape=(6,),
               activations=()):
    return ModelConfig(input_shape=input_shape, hidden=hidden, head=head,
                       k=k, activations=activations)


def small_spec(k=3):
    return make_spec(0.0, 1.0, 3.0, k, seed=5)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def test_param_count_desk_architecture():
    cfg = ModelConfig(input_shape=(784,), hidden=(256, 128), head="interval",
                      k=10)
    model = build_model(cfg, seed=0, spec=make_spec(0, 4, 16, 10, seed=1))
    count = sum(p.size for p in model.params)
    assert count == 784 * 256 + 256 + 256 * 128 + 128 + 128 * 1 + 1


def test_same_seed_identical_parameters():
    cfg = mlp_config()
    a = build_model(cfg, seed=3, spec=small_spec())
    b = build_model(cfg, seed=3, spec=small_spec())
    for pa, pb in zip(a.params, b.params):
        np.testing.assert_array_equal(pa, pb)


def test_traditional_head_output_shape():
    cfg = mlp_config(head="traditional", k=10, hidden=(8,))
    model = build_model(cfg, seed=0)
    out = forward(model, np.zeros((5, 6), dtype=np.float32))
    assert out.shape == (5, 10)


def test_interval_model_requires_spec():
    with pytest.raises(ValidationError):
        build_model(mlp_config(head="interval"), seed=0)
    # k mismatch between spec and config
    with pytest.raises(ValidationError):
        build_model(mlp_config(head="interval", k=4), seed=0,
                    spec=small_spec(k=3))


def test_zero_weight_model_zero_outputs():
    cfg = mlp_config(head="traditional", hidden=())
    model = build_model(cfg, seed=0)
    model.params = [np.zeros_like(p) for p in model.params]
    out = forward(model, np.ones((3, 6), dtype=np.float32))
    np.testing.assert_array_equal(out, np.zeros((3, 3)))


def test_forward_purity_and_order():
    cfg = mlp_config(head="traditional")
    model = build_model(cfg, seed=1)
    X = np.random.default_rng(0).normal(size=(4, 6)).astype(np.float32)
    a = forward(model, X)
    b = forward(model, X)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[1:3], forward(model, X[1:3]))


def test_conv_stage_shapes():
    cfg = ModelConfig(input_shape=(1, 8, 8), hidden=(4,), head="traditional",
                      k=2, conv=ConvStage(filters=3, kernel=3))
    model = build_model(cfg, seed=0)
    out = forward(model, np.zeros((2, 1, 8, 8), dtype=np.float32))
    assert out.shape == (2, 2)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_sgd_step_matches_hand_computation():
    # 2-parameter linear interval model, one batch, one step
    spec = make_spec(0.0, 1.0, 3.0, 2, seed=0, shuffle=False)
    cfg = ModelConfig(input_shape=(1,), hidden=(), head="interval", k=2)
    model = build_model(cfg, seed=0, spec=spec)
    w0, b0 = 0.5, -3.0
    model.params[0] = np.array([[w0]], dtype=np.float32)
    model.params[1] = np.array([b0], dtype=np.float32)
    X = np.array([[2.0]], dtype=np.float32)
    y = np.array([0])
    lr = 0.1
    # loss = sqrt(p^2) = p with p = relu(lower - f); here f = 2w + b = -2
    # below the [0, 3] interval, so dL/dw = -x = -2 and dL/db = -1
    assert w0 * 2.0 + b0 < spec.interval_lower(0)
    train(model, Dataset(X=X, y=y, k=2, norm=None),
          TrainConfig(epochs=1, lr=lr, batch_size=1, seed=0, shuffle=False))
    w1 = float(model.params[0][0, 0])
    b1 = float(model.params[1][0])
    assert w1 == pytest.approx(w0 + lr * 2.0, abs=1e-6)
    assert b1 == pytest.approx(b0 + lr * 1.0, abs=1e-6)


def test_lr_cannot_be_zero_but_tiny_lr_freezes():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=1, lr=0.0, batch_size=4, seed=0)


def test_training_determinism_bit_identical(tmp_path):
    data = synthetic_blobs(3, 20, 5, 0.2, seed=11)
    cfg = mlp_config(input_shape=(5,))

    def run():
        model = build_model(cfg, seed=4, spec=small_spec())
        train(model, data, TrainConfig(epochs=3, lr=0.05, batch_size=8, seed=9))
        return model

    a, b = run(), run()
    for pa, pb in zip(a.params, b.params):
        np.testing.assert_array_equal(pa, pb)


def test_interval_blobs_reach_full_train_accuracy():
    data = synthetic_blobs(2, 40, 4, 0.05, seed=21)
    spec = small_spec(k=2)
    cfg = ModelConfig(input_shape=(4,), hidden=(8,), head="interval", k=2)
    model = build_model(cfg, seed=2, spec=spec)
    history = train(model, data,
                    TrainConfig(epochs=50, lr=0.05, batch_size=8, seed=6))
    assert history[-1].train_acc == 1.0
    # independent check that the task was actually solvable linearly
    A = np.hstack([data.X.astype(np.float64), np.ones((data.n, 1))])
    mids = np.array([spec.interval_lower(spec.label_perm[c]) + spec.beta / 2
                     for c in data.y])
    coef, *_ = np.linalg.lstsq(A, mids, rcond=None)
    fit_acc = np.mean([decode_output(float(v), spec) == t
                       for v, t in zip(A @ coef, data.y)])
    assert fit_acc == 1.0


def test_train_history_shape_and_loss_zero_when_solved():
    data = synthetic_blobs(2, 30, 4, 0.05, seed=31)
    cfg = ModelConfig(input_shape=(4,), hidden=(8,), head="interval", k=2)
    model = build_model(cfg, seed=2, spec=small_spec(k=2))
    history = train(model, data,
                    TrainConfig(epochs=60, lr=0.05, batch_size=8, seed=6),
                    test_data=data)
    assert [h.epoch for h in history] == list(range(60))
    assert all(h.test_acc is not None for h in history)
    # once every output sits strictly inside its interval the loss is 0
    assert history[-1].train_loss == 0.0


def test_train_rejects_k_mismatch():
    data = synthetic_blobs(4, 5, 6, 0.1, seed=0)
    model = build_model(mlp_config(head="traditional", k=3), seed=0)
    with pytest.raises(ValidationError):
        train(model, data, TrainConfig(epochs=1, lr=0.1, batch_size=4, seed=0))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def test_memorizer_scores_perfectly(tiny_interval_model, blob_data):
    res = evaluate(tiny_interval_model, blob_data)
    assert res.accuracy == 1.0
    assert res.anomaly_rate == 0.0


def test_all_outputs_below_s0_all_anomalous():
    cfg = ModelConfig(input_shape=(4,), hidden=(), head="interval", k=3)
    spec = make_spec(100.0, 1.0, 3.0, 3, seed=0)
    model = build_model(cfg, seed=0, spec=spec)
    data = synthetic_blobs(3, 10, 4, 0.1, seed=5)
    res = evaluate(model, data)  # outputs near 0, intervals start at 100
    assert res.accuracy == 0.0
    assert res.anomaly_rate == 1.0


def test_interval_accounting_partition(tiny_interval_model, blob_data):
    preds = predict(tiny_interval_model, blob_data.X)
    correct = (preds == blob_data.y).mean()
    anomalous = (preds == -1).mean()
    wrong = ((preds != blob_data.y) & (preds != -1)).mean()
    assert correct + anomalous + wrong == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def test_penultimate_width_and_head_recompute():
    cfg = ModelConfig(input_shape=(20,), hidden=(16, 12), head="interval",
                      k=4)
    model = build_model(cfg, seed=3, spec=make_spec(0, 1, 3, 4, seed=0))
    X = np.random.default_rng(1).normal(size=(5, 20)).astype(np.float32)
    feats = penultimate_features(model, X)
    assert feats.shape == (5, 12)
    np.testing.assert_array_equal(feats, penultimate_features(model, X))
    head_w, head_b = model.params[-2], model.params[-1]
    np.testing.assert_allclose(feats @ head_w + head_b, forward(model, X),
                               atol=1e-6)


def test_penultimate_requires_hidden_layer():
    cfg = ModelConfig(input_shape=(4,), hidden=(), head="traditional", k=2)
    model = build_model(cfg, seed=0)
    with pytest.raises(ContractError):
        penultimate_features(model, np.zeros((1, 4), dtype=np.float32))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_identical(tmp_path, tiny_interval_model,
                                            blob_data):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(tiny_interval_model, path)
    loaded = load_checkpoint(path)
    np.testing.assert_array_equal(forward(loaded, blob_data.X),
                                  forward(tiny_interval_model, blob_data.X))
    assert list(loaded.spec.label_perm) == list(tiny_interval_model.spec.label_perm)
    a = evaluate(tiny_interval_model, blob_data)
    b = evaluate(loaded, blob_data)
    assert (a.accuracy, a.anomaly_rate) == (b.accuracy, b.anomaly_rate)


def test_checkpoint_truncation_is_detected(tmp_path, tiny_interval_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_interval_model, str(path))
    blob = path.read_bytes()
    for cut in (3, 7, len(blob) // 2, len(blob) - 2):
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))


def test_checkpoint_bad_magic_and_version(tmp_path, tiny_interval_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_interval_model, str(path))
    blob = path.read_bytes()
    path.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
    path.write_bytes(blob[:4] + b"\xff\xff\xff\xff" + blob[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_checkpoint_trailing_garbage(tmp_path, tiny_traditional_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_traditional_model, str(path))
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))
