"""Command-line harness: train, eval, attack, transfer, sweep, bound-check,
export-features.

Every run is fully determined by its flags plus the single --seed; all
internal randomness (label permutation, init, batch order, PGD starts,
synthetic data) is derived from that seed by labeled splitting. Reports are
JSON for single runs and long-form CSV for sweeps, so external tools can
plot them directly. Exit codes: 0 success, 2 validation, 3 IO/parse,
4 broken internal contract.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .attacks import (AttackConfig, evaluate_attack, transfer_attack,
                      transferability_matrix, write_records_csv)
from .bounds import count_violations, run_bound_trials, write_bound_csv
from .data import Dataset, load_mnist_idx, normalize, synthetic_blobs, synthetic_digits
from .errors import ContractError, ParseError, ValidationError
from .intervals import convergence_factor, make_spec
from .models import (Model, ModelConfig, TrainConfig, build_model, evaluate,
                     load_checkpoint, penultimate_features, save_checkpoint, train)
from .seeding import derive_seed

SCHEMA_VERSION = 1
DATA_DIR_ENV = "IVLC_DATA_DIR"
DEFAULT_ETAS = [0.1, 0.2, 0.3]

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.10g}"


def _write_json(path: Path, obj: dict) -> None:
    obj = {"schema_version": SCHEMA_VERSION, **obj}
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# data resolution
# ---------------------------------------------------------------------------

def _data_dir(args):
    return args.data_dir or os.environ.get(DATA_DIR_ENV)

def _dataset_kind(args) -> str:
    if args.dataset:
        return args.dataset
    d = _data_dir(args)
    if d and all(os.path.exists(os.path.join(d, f))
                 for pair in MNIST_FILES.values() for f in pair):
        return "mnist"
    return "digits"


def _load_split(args, split: str, n: int) -> Dataset:
    kind = _dataset_kind(args)
    if kind == "mnist":
        d = _data_dir(args)
        if not d:
            raise ValidationError(f"mnist needs --data-dir or ${DATA_DIR_ENV}")
        img, lab = MNIST_FILES[split]
        raw = load_mnist_idx(os.path.join(d, img), os.path.join(d, lab), limit=n)
        return normalize(raw, 0.0, 1.0)
    if kind == "digits":
        return synthetic_digits(n, derive_seed(args.seed, f"data-{split}"))
    if kind == "blobs":
        per_class = -(-n // args.k)  # ceil
        # centers must be split-independent or train/test distributions diverge
        centers = np.random.default_rng(
            derive_seed(args.seed, "data-centers")).uniform(
                -2.0, 2.0, size=(args.k, args.blob_dim))
        return synthetic_blobs(args.k, per_class, args.blob_dim, args.blob_spread,
                               derive_seed(args.seed, f"data-{split}"),
                               centers=centers).take(n)
    raise ValidationError(f"unknown dataset kind {kind!r}")


def _load_data(args):
    return (_load_split(args, "train", args.train_n),
            _load_split(args, "test", args.test_n))


def _parse_hidden(s: str) -> tuple:
    try:
        return tuple(int(t) for t in s.split(",") if t.strip())
    except ValueError:
        raise ValidationError(f"bad --hidden value {s!r}, expected e.g. '256,128'")


def _default_lr(task: str) -> float:
    return 0.05 if task == "interval" else 0.1


def _default_batch(task: str) -> int:
    # interval heads need small batches: the batch-L2 loss normalizes the
    # per-example gradient by the batch residual norm, and large batches
    # destabilize training
    return 8 if task == "interval" else 64


def _default_activation(task: str) -> str:
    return "sigmoid" if task == "interval" else "relu"


def _model_config(args, task: str, data: Dataset) -> ModelConfig:
    hidden = _parse_hidden(args.hidden)
    act = args.activation or _default_activation(task)
    return ModelConfig(input_shape=tuple(data.X.shape[1:]), hidden=hidden,
                       head=task, k=args.k, activations=(act,) * len(hidden))


def _build_fresh_model(args, task: str, data: Dataset, seed_ns: str = "") -> Model:
    spec = None
    if task == "interval":
        spec = make_spec(args.s0, args.alpha, args.beta, args.k,
                         seed=derive_seed(args.seed, seed_ns + "perm"))
    config = _model_config(args, task, data)
    return build_model(config, derive_seed(args.seed, seed_ns + "init"), spec=spec)


def _etas(args) -> list:
    return args.eta if args.eta else list(DEFAULT_ETAS)


def _attack_config(args, eta: float, clip) -> AttackConfig:
    return AttackConfig(method=args.attack, eta=eta, iters=args.iters,
                        step_size=args.step_size, clip=clip)


def _check_task_flag(args, model: Model) -> None:
    if args.task and args.task != model.task:
        raise ValidationError(f"--task {args.task} but checkpoint head is "
                              f"{model.task}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _write_history(history, path: Path) -> None:
    with open(path, "w", newline="") as f:
        f.write("epoch,train_loss,train_acc,test_acc\n")
        for h in history:
            f.write(f"{h.epoch},{_fmt(h.train_loss)},{_fmt(h.train_acc)},"
                    f"{_fmt(h.test_acc)}\n")


def cmd_train(args) -> int:
    out = _out_dir(args)
    task = args.task or "interval"
    train_data, test_data = _load_data(args)
    model = _build_fresh_model(args, task, train_data)
    hp = TrainConfig(epochs=args.epochs, lr=args.lr or _default_lr(task),
                     batch_size=args.batch_size or _default_batch(task),
                     seed=derive_seed(args.seed, "train"),
                     loss_variant=args.loss_variant)
    history = train(model, train_data, hp, test_data=test_data)
    model.meta.update(dataset=_dataset_kind(args), seed=args.seed, task=task,
                      lr=hp.lr, batch_size=hp.batch_size)
    save_checkpoint(model, str(out / "model.ckpt"))
    _write_history(history, out / "history.csv")
    last = history[-1]
    print(f"trained {task} model: train_acc={last.train_acc:.4f} "
          f"test_acc={last.test_acc:.4f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'history.csv'}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    model = load_checkpoint(args.checkpoint)
    _check_task_flag(args, model)
    _, test_data = _load_data(args)
    result = evaluate(model, test_data)
    _write_json(out / "eval.json", {
        "command": "eval", "task": model.task, "n": result.n,
        "accuracy": result.accuracy, "anomaly_rate": result.anomaly_rate,
    })
    print(f"accuracy={result.accuracy:.4f} anomaly_rate={result.anomaly_rate:.4f} "
          f"n={result.n}")
    return 0


def cmd_attack(args) -> int:
    out = _out_dir(args)
    model = load_checkpoint(args.checkpoint)
    _check_task_flag(args, model)
    _, test_data = _load_data(args)
    clip = test_data.norm
    reports = []
    for eta in _etas(args):
        cfg = _attack_config(args, eta, clip)
        report = evaluate_attack(model, model, test_data, cfg,
                                 seed=derive_seed(args.seed, f"attack-eta{eta:g}"),
                                 limit=args.limit)
        write_records_csv(report, str(out / f"outcomes_{cfg.method}_eta{eta:g}.csv"))
        reports.append(report.to_json_dict())
        print(f"{cfg.method} eta={eta:g}: success={report.success_rate:.4f} "
              f"anomaly={report.anomaly_rate:.4f} over {report.n_attacked}")
    _write_json(out / "attack_report.json", {
        "command": "attack", "task": model.task, "dataset": _dataset_kind(args),
        "seed": args.seed, "reports": reports,
    })
    print(f"wrote {out / 'attack_report.json'}")
    return 0


def cmd_transfer(args) -> int:
    out = _out_dir(args)
    victim = load_checkpoint(args.victim)
    _check_task_flag(args, victim)
    if args.self_transfer:
        oracle = victim
    elif args.oracle:
        oracle = load_checkpoint(args.oracle)
    else:
        raise ValidationError("transfer needs --oracle (or --self-transfer)")
    train_data, test_data = _load_data(args)
    threat_task = victim.task
    threat_config = _model_config(args, threat_task, train_data)
    threat_hp = TrainConfig(epochs=args.epochs,
                            lr=args.lr or _default_lr(threat_task),
                            batch_size=args.batch_size or _default_batch(threat_task),
                            seed=derive_seed(args.seed, "threat-train"))
    direction = f"{oracle.task[:3]}2{victim.task[:3]}".upper()
    threat = victim if args.self_transfer else None
    reports = []
    for eta in _etas(args):
        cfg = _attack_config(args, eta, test_data.norm)
        report, threat = transfer_attack(
            oracle, threat_config, threat_hp, victim, train_data, test_data,
            cfg, seed=args.seed, threat=threat, limit=args.limit)
        write_records_csv(report,
                          str(out / f"transfer_outcomes_{cfg.method}_eta{eta:g}.csv"))
        reports.append(report.to_json_dict())
        print(f"{direction} {cfg.method} eta={eta:g}: "
              f"success={report.success_rate:.4f} "
              f"anomaly={report.anomaly_rate:.4f} over {report.n_attacked}")
    _write_json(out / "transfer_report.json", {
        "command": "transfer", "direction": direction,
        "oracle_task": oracle.task, "victim_task": victim.task,
        "threat_task": threat_task,
        "threat": {"hidden": list(threat_config.hidden),
                   "epochs": threat_hp.epochs, "lr": threat_hp.lr,
                   "batch_size": threat_hp.batch_size},
        "seed": args.seed, "reports": reports,
    })
    print(f"wrote {out / 'transfer_report.json'}")
    return 0


def _parse_grid(s: str, what: str) -> list:
    try:
        values = [float(t) for t in s.split(",") if t.strip()]
    except ValueError:
        raise ValidationError(f"bad {what} list {s!r}")
    if not values:
        raise ValidationError(f"empty {what} list")
    return values


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    alphas = _parse_grid(args.alphas, "--alphas")
    betas = _parse_grid(args.betas, "--betas")
    grid = [(a, b) for a in alphas for b in betas]
    if len(grid) > 64 and not args.force:
        raise ValidationError(f"{len(grid)} grid points > 64; pass --force to run")
    train_data, test_data = _load_data(args)
    etas = _etas(args)
    rows = []
    models = {}
    for alpha, beta in grid:
        tag = f"a{alpha:g}-b{beta:g}"
        spec = make_spec(args.s0, alpha, beta, args.k,
                         seed=derive_seed(args.seed, f"perm-{tag}"))
        config = _model_config(args, "interval", train_data)
        model = build_model(config, derive_seed(args.seed, f"init-{tag}"), spec=spec)
        hp = TrainConfig(epochs=args.epochs, lr=args.lr or _default_lr("interval"),
                         batch_size=args.batch_size or _default_batch("interval"),
                         seed=derive_seed(args.seed, f"train-{tag}"))
        history = train(model, train_data, hp, test_data=test_data)
        C = convergence_factor(spec)
        for h in history:
            rows.append((alpha, beta, C, h.epoch, h.train_acc, None, None))
        final_epoch = history[-1].epoch
        final_acc = history[-1].train_acc
        for eta in etas:
            cfg = _attack_config(args, eta, test_data.norm)
            report = evaluate_attack(model, model, test_data, cfg,
                                     seed=derive_seed(args.seed,
                                                      f"attack-{tag}-eta{eta:g}"),
                                     limit=args.limit)
            rows.append((alpha, beta, C, final_epoch, final_acc, eta,
                         report.success_rate))
            print(f"{tag} eta={eta:g}: success={report.success_rate:.4f}")
        models[f"int_{tag}"] = model
    with open(out / "sweep.csv", "w", newline="") as f:
        f.write("alpha,beta,C,epoch,train_acc,attack_eta,success_rate\n")
        for alpha, beta, C, epoch, acc, eta, rate in rows:
            f.write(f"{_fmt(alpha)},{_fmt(beta)},{_fmt(C)},{epoch},{_fmt(acc)},"
                    f"{_fmt(eta)},{_fmt(rate)}\n")
    print(f"wrote {out / 'sweep.csv'}")
    if args.matrix:
        tra = _build_fresh_model(args, "traditional", train_data, seed_ns="matrix-")
        hp = TrainConfig(epochs=args.epochs, lr=args.lr or _default_lr("traditional"),
                         batch_size=args.batch_size or _default_batch("traditional"),
                         seed=derive_seed(args.seed, "matrix-train"))
        train(tra, train_data, hp)
        models["traditional"] = tra
        subset = test_data.take(min(args.matrix_n, test_data.n))
        cfg = _attack_config(args, etas[0], test_data.norm)
        matrix = transferability_matrix(models, subset, cfg,
                                        seed=derive_seed(args.seed, "matrix"))
        _write_json(out / "matrix.json", {"command": "sweep-matrix",
                                          "eta": etas[0], "matrix": matrix})
        print(f"wrote {out / 'matrix.json'}")
    return 0


def cmd_bound_check(args) -> int:
    out = _out_dir(args)
    rows = run_bound_trials(args.trials, seed=args.seed)
    violations = count_violations(rows)
    write_bound_csv(rows, str(out / "bounds.csv"))
    _write_json(out / "bounds.json", {
        "command": "bound-check", "trials": args.trials, "seed": args.seed,
        "violations": violations,
    })
    print(f"{args.trials} trials, {violations} bound violations")
    print(f"wrote {out / 'bounds.csv'}")
    return 0


def cmd_export_features(args) -> int:
    out = _out_dir(args)
    model = load_checkpoint(args.checkpoint)
    _check_task_flag(args, model)
    train_data, test_data = _load_data(args)
    data = train_data if args.split == "train" else test_data
    feats = penultimate_features(model, data.X)
    path = out / "features.csv"
    with open(path, "w", newline="") as f:
        width = feats.shape[1]
        f.write("example_id,label," + ",".join(f"f{i + 1}" for i in range(width)))
        f.write("\n")
        for i in range(feats.shape[0]):
            f.write(f"{i},{data.y[i]}," +
                    ",".join(f"{v:.7g}" for v in feats[i]) + "\n")
    print(f"wrote {path} ({feats.shape[0]} rows, {feats.shape[1]} features)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=["traditional", "interval"],
                   help="model head kind (transfer: the substitute's head)")
    p.add_argument("--s0", type=float, default=0.0, help="lowest interval lower bound")
    p.add_argument("--alpha", type=float, default=4.0, help="gap between intervals")
    p.add_argument("--beta", type=float, default=16.0, help="interval width")
    p.add_argument("--k", type=int, default=10, help="class count")
    p.add_argument("--eta", type=float, action="append",
                   help="attack budget, repeatable (default 0.1 0.2 0.3)")
    p.add_argument("--iters", type=int, default=20, help="bim/pgd iterations")
    p.add_argument("--step-size", type=float, default=None,
                   help="bim/pgd step (default eta/4)")
    p.add_argument("--attack", choices=["fgsm", "bim", "pgd"], default="pgd")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=None,
                   help="default 0.05 interval / 0.1 traditional")
    p.add_argument("--batch-size", type=int, default=None,
                   help="default 8 interval / 64 traditional")
    p.add_argument("--activation", choices=["relu", "sigmoid"], default=None,
                   help="hidden activation (default sigmoid interval / "
                        "relu traditional)")
    p.add_argument("--seed", type=int, default=0,
                   help="master seed; all sub-seeds derive from it")
    p.add_argument("--data-dir", default=None,
                   help=f"IDX directory (fallback: ${DATA_DIR_ENV})")
    p.add_argument("--dataset", choices=["mnist", "digits", "blobs"], default=None,
                   help="default: mnist when IDX files are found, else digits")
    p.add_argument("--train-n", type=int, default=10000)
    p.add_argument("--test-n", type=int, default=10000)
    p.add_argument("--blob-dim", type=int, default=32)
    p.add_argument("--blob-spread", type=float, default=0.15)
    p.add_argument("--hidden", default="256,128", help="FC widths, comma-separated")
    p.add_argument("--loss-variant", choices=["l2norm", "mean_square"],
                   default="l2norm")
    p.add_argument("--limit", type=int, default=None,
                   help="cap on attacked examples")
    p.add_argument("--out", default="ivlc_out", help="output directory")
    p.add_argument("--config", default=None,
                   help="JSON file of flag defaults (CLI flags win)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivlc",
        description="Train interval-output and traditional classifiers, attack "
                    "them, and verify linear-model perturbation bounds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, write checkpoint + history")
    p.set_defaults(func=cmd_train)
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.set_defaults(func=cmd_eval)
    p.add_argument("--checkpoint", required=True)
    _add_common(p)

    p = sub.add_parser("attack", help="white-box attack on a checkpoint")
    p.set_defaults(func=cmd_attack)
    p.add_argument("--checkpoint", required=True)
    _add_common(p)

    p = sub.add_parser("transfer", help="black-box transfer via a substitute model")
    p.set_defaults(func=cmd_transfer)
    p.add_argument("--victim", required=True, help="victim checkpoint path")
    p.add_argument("--oracle", default=None,
                   help="labeling-oracle checkpoint (opposite head kind)")
    p.add_argument("--self-transfer", action="store_true",
                   help="use the victim itself as substitute (white-box check)")
    _add_common(p)

    p = sub.add_parser("sweep", help="alpha/beta grid: convergence + robustness CSV")
    p.set_defaults(func=cmd_sweep)
    p.add_argument("--alphas", default="4", help="comma list of alpha values")
    p.add_argument("--betas", default="16", help="comma list of beta values")
    p.add_argument("--force", action="store_true", help="allow > 64 grid points")
    p.add_argument("--matrix", action="store_true",
                   help="also emit the cross-model transferability matrix")
    p.add_argument("--matrix-n", type=int, default=200,
                   help="examples used for the matrix")
    _add_common(p)

    p = sub.add_parser("bound-check", help="randomized linear-model bound trials")
    p.set_defaults(func=cmd_bound_check)
    p.add_argument("--trials", type=int, default=1000)
    _add_common(p)

    p = sub.add_parser("export-features", help="penultimate-layer features CSV")
    p.set_defaults(func=cmd_export_features)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    _add_common(p)

    parser._command_parsers = dict(sub.choices)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    try:
        with open(known.config) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad config file {known.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ParseError(f"config file {known.config} must hold a JSON object")
    defaults = {k.replace("-", "_"): v for k, v in cfg.items()}
    # each subparser re-parses into a fresh namespace, so defaults must be
    # planted per-subcommand; top-level set_defaults never reaches them
    matched = set()
    for sub_parser in parser._command_parsers.values():
        dests = {a.dest for a in sub_parser._actions}
        hit = {k: v for k, v in defaults.items() if k in dests}
        matched.update(hit)
        sub_parser.set_defaults(**hit)
    unknown = sorted(set(defaults) - matched)
    if unknown:
        raise ParseError(f"unknown config keys: {', '.join(unknown)}")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"internal contract broken: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
