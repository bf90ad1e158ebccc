"""Command-line interface: ``qforest <command> [options]``.

Commands
    train          train an FTN classifier from a run config
    embed          canonicalize a trained FTN and embed it as a w=0 circuit model
    encode         raise w from 0 to 1 with retraining after every increment
    eval           loss and accuracy (plus success statistics for circuit models)
    verify         check the structural invariants of a model container
    train-direct   Riemannian training of Haar-random circuits at w=1
    config-schema  print the run config with every default

Exit codes: 0 success, 1 other qforest error, 2 missing path or bad usage,
3 training diverged, 4 wrong model kind, 5 encoding stopped before w=1,
6 verification failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .adiabatic import (
    TRAJECTORY_COLUMNS,
    DirectConfig,
    EncodeConfig,
    adiabatic_encode,
    haar_random_qftn,
    train_direct,
)
from .container import load_model, read_header, save_model
from .data_io import ImageDataset, downscale, load_cifar10, load_mnist, resolve_data_path
from .embedding import embed_ftn
from .errors import ArgumentError, DivergenceError, KindError, QForestError
from .ftn import (
    FTNClassifier,
    TrainConfig,
    canonicalize_ftn,
    evaluate,
    ftn_forward,
    prepare_leaves,
    train_ftn,
)
from .qsim import forest_sim_forward, qftn_evaluate, qftn_forward
from .ttn import INIT_SCHEMES, isometry_residuals

log = logging.getLogger("qforest")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING = 2
EXIT_DIVERGED = 3
EXIT_KIND = 4
EXIT_PARTIAL = 5
EXIT_VERIFY = 6

ISOMETRY_TOL = 1e-10
ORTHOGONALITY_TOL = 1e-9
PSD_TOL = 1e-10
EXACTNESS_TOL = 1e-9


# -- run configuration ------------------------------------------------------


@dataclass
class DatasetSpec:
    name: str = "mnist"
    train_images: str = "mnist/train-images-idx3-ubyte"
    train_labels: str = "mnist/train-labels-idx1-ubyte"
    test_images: str | None = None
    test_labels: str | None = None
    train_batches: list[str] = field(default_factory=list)
    test_batches: list[str] = field(default_factory=list)
    downscale: int = 16
    subset: int = 0
    test_subset: int = 0
    seed: int = 0
    synthetic_size: int = 256
    synthetic_side: int = 8
    synthetic_channels: int = 1


@dataclass
class ModelSpec:
    d: int = 10
    k: int = 1
    shifts: list[list[int]] | None = None
    init: str = "averaging"
    init_noise: float = 0.1
    seed: int = 0


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    encode: EncodeConfig = field(default_factory=EncodeConfig)
    direct: DirectConfig = field(default_factory=DirectConfig)
    out: str = "runs/default"

    def __post_init__(self):
        if self.model.init not in INIT_SCHEMES:
            raise ArgumentError(f"model.init must be one of {INIT_SCHEMES}")
        if self.model.d < 1 or self.model.k < 1:
            raise ArgumentError("model.d and model.k must be positive")


FIELD_DOCS = {
    "dataset.name": "mnist (IDX files), cifar10 (binary batches) or synthetic (seeded random images)",
    "dataset.train_images": "IDX image file; relative paths also resolve under $QFOREST_DATA_DIR",
    "dataset.train_labels": "IDX label file",
    "dataset.test_images": "optional held-out IDX image file",
    "dataset.test_labels": "optional held-out IDX label file",
    "dataset.train_batches": "CIFAR-10 binary batch files for training",
    "dataset.test_batches": "CIFAR-10 binary batch files for evaluation",
    "dataset.downscale": "target side length L (power of two)",
    "dataset.subset": "seeded training subset size, 0 keeps everything",
    "dataset.test_subset": "seeded held-out subset size, 0 keeps everything",
    "dataset.seed": "seed for subset selection and synthetic images",
    "dataset.synthetic_size": "number of synthetic images",
    "dataset.synthetic_side": "side length of synthetic images",
    "dataset.synthetic_channels": "channels of synthetic images",
    "model.d": "number of trees, equal to the number of classes",
    "model.k": "channels per pixel; bond dimension chi = 2**k",
    "model.shifts": "per-tree (vertical, horizontal) cyclic shifts; null uses the default table",
    "model.init": "gaussian (i.i.d., std chi**-0.5) or averaging (trees start as (1, mean intensity) plus noise)",
    "model.init_noise": "noise std added by the averaging init",
    "model.seed": "parameter initialization seed",
    "train": "Adam settings for FTN training",
    "encode": "adiabatic schedule and Riemannian SGD settings",
    "direct": "Riemannian SGD settings for Haar-random training at w=1",
    "out": "output directory",
}


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ArgumentError(f"unknown config keys in {where}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    parts = {
        "dataset": DatasetSpec,
        "model": ModelSpec,
        "train": TrainConfig,
        "encode": EncodeConfig,
        "direct": DirectConfig,
    }
    kwargs = {}
    for key, cls in parts.items():
        if key in data:
            section = data.pop(key)
            if not isinstance(section, dict):
                raise ArgumentError(f"config section {key!r} must be an object")
            kwargs[key] = _build(cls, section, key)
    return _build(RunConfig, {**data, **kwargs}, "top level")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def config_schema() -> dict:
    return {"defaults": asdict(RunConfig()), "fields": FIELD_DOCS}


# -- datasets ---------------------------------------------------------------


def _existing(path) -> Path:
    p = resolve_data_path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return p


def synthetic_dataset(n: int, side: int, channels: int, classes: int, seed: int) -> ImageDataset:
    """Seeded uniform-random images with uniformly random labels."""
    rng = np.random.default_rng(seed)
    images = rng.random((n, side, side, channels))
    labels = rng.integers(0, classes, size=n)
    return ImageDataset(images, labels, classes)


def load_datasets(spec: DatasetSpec, classes: int = 10) -> tuple[ImageDataset, ImageDataset | None]:
    if spec.name == "mnist":
        train = load_mnist(_existing(spec.train_images), _existing(spec.train_labels))
        test = None
        if spec.test_images:
            test = load_mnist(_existing(spec.test_images), _existing(spec.test_labels))
    elif spec.name == "cifar10":
        if not spec.train_batches:
            raise ArgumentError("dataset.train_batches is empty")
        train = load_cifar10([_existing(p) for p in spec.train_batches])
        test = load_cifar10([_existing(p) for p in spec.test_batches]) if spec.test_batches else None
    elif spec.name == "synthetic":
        train = synthetic_dataset(
            spec.synthetic_size, spec.synthetic_side, spec.synthetic_channels, classes, spec.seed
        )
        test = None
    else:
        raise ArgumentError(f"unknown dataset {spec.name!r}")
    if spec.subset:
        train = train.subset(spec.subset, spec.seed)
    if test is not None and spec.test_subset:
        test = test.subset(spec.test_subset, spec.seed + 1)
    if spec.downscale and train.side != spec.downscale:
        train = downscale(train, spec.downscale)
        test = downscale(test, spec.downscale) if test is not None else None
    return train, test


# -- metrics ----------------------------------------------------------------


def append_csv(path: Path, rows: list[dict], columns: list[str]) -> Path:
    """Append rows, writing the header only when the file is new."""
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


TRAIN_COLUMNS = ["epoch", "train_loss", "train_acc", "test_loss", "test_acc"]
# Wall-clock time differs between otherwise identical runs, so it goes to a
# separate file and the metrics CSVs stay byte-for-byte reproducible.
TIMING_COLUMNS = ["epoch", "wall_seconds"]
STEP_COLUMNS = [
    "step", "w", "epochs", "loss_before", "loss_after", "threshold", "train_acc",
    "success_prob", "srpg", "grad_norm_mean", "grad_norm_std",
]
EVAL_COLUMNS = ["model", "kind", "split", "w", "n", "loss", "acc", "success_prob_mean", "success_prob_min", "srpg_mean"]


# -- commands ---------------------------------------------------------------


def _out_dir(args, cfg: RunConfig | None) -> Path:
    out = Path(args.out or (cfg.out if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.dataset.seed = cfg.model.seed = cfg.train.seed = cfg.encode.seed = cfg.direct.seed = args.seed
    if args.subset is not None:
        cfg.dataset.subset = args.subset
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train, test = load_datasets(cfg.dataset, cfg.model.d)
    model = FTNClassifier.random(
        train.side, cfg.model.k, cfg.model.d, cfg.model.seed, cfg.model.shifts,
        init=cfg.model.init, noise=cfg.model.init_noise,
    )
    if train.channels != cfg.model.k:
        raise ArgumentError(f"dataset has {train.channels} channels, model.k = {cfg.model.k}")
    try:
        model, history = train_ftn(model, train, cfg.train, test)
    except DivergenceError as exc:
        if exc.checkpoint is not None:
            save_model(exc.checkpoint, out / "ftn_checkpoint.qf")
        append_csv(out / "train_metrics.csv", exc.log or [], TRAIN_COLUMNS)
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_model(model, out / "ftn.qf")
    append_csv(out / "train_metrics.csv", history, TRAIN_COLUMNS)
    append_csv(out / "train_timing.csv", history, TIMING_COLUMNS)
    last = history[-1] if history else {"train_loss": math.nan, "train_acc": math.nan}
    print(f"saved {out / 'ftn.qf'}: train loss {last['train_loss']:.6f} acc {last['train_acc']:.4f}")
    return EXIT_OK


def _probe_images(model, cfg: RunConfig | None, count: int = 100) -> np.ndarray:
    if cfg is not None and cfg.dataset is not None and cfg.dataset.name != "synthetic":
        train, _ = load_datasets(cfg.dataset, model.num_classes)
        if len(train):
            return train.images[:count]
    rng = np.random.default_rng(0)
    return rng.random((count, model.side, model.side, model.channels))


def cmd_embed(args) -> int:
    cfg = _config(args) if args.config else None
    kind = read_header(_existing(args.model))["kind"]
    if kind == "qftn":
        raise KindError(f"{args.model} already holds an embedded circuit model; refusing to embed again")
    ftn = load_model(args.model, kind="ftn")
    q = embed_ftn(canonicalize_ftn(ftn))
    images = _probe_images(ftn, cfg)
    residual = float(np.abs(qftn_forward(q, images, 0.0)[0] - ftn_forward(ftn, images)).max())
    out = _out_dir(args, cfg)
    path = save_model(q, out / "qftn_w0.qf")
    print(f"saved {path}: max |logit difference| over {len(images)} images = {residual:.3e}")
    return EXIT_OK if residual < EXACTNESS_TOL else EXIT_VERIFY


def cmd_encode(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    model = load_model(_existing(args.model), kind="qftn")
    train, test = load_datasets(cfg.dataset, model.num_classes)
    try:
        encoded, traj = adiabatic_encode(model, train, cfg.encode, test)
    except DivergenceError as exc:
        print(f"encoding diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    append_csv(out / "trajectory.csv", traj.rows, TRAJECTORY_COLUMNS)
    append_csv(out / "encode_steps.csv", traj.steps, STEP_COLUMNS)
    header = ",".join(f"w={w!r}" for w in [model.w] + traj.w_values)
    for name, initial, per_step in (
        ("success_per_sample.csv", traj.initial_success, traj.step_success),
        ("srpg_per_sample.csv", traj.initial_srpg, traj.step_srpg),
    ):
        table = np.stack([initial] + per_step, axis=1)
        np.savetxt(out / name, table, delimiter=",", fmt="%.17g", header=header, comments="")
    name = "qftn_encoded.qf" if traj.completed else "qftn_partial.qf"
    save_model(encoded, out / name)
    if not traj.completed:
        print(f"epoch budget exhausted at w={traj.last_w}; saved {out / name}", file=sys.stderr)
        return EXIT_PARTIAL
    final = traj.steps[-1]
    print(
        f"saved {out / name}: w=1 loss {final['loss_after']:.6f} acc {final['train_acc']:.4f} "
        f"success_prob {final['success_prob']:.12f}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_model(_existing(args.model))
    train, test = load_datasets(cfg.dataset, model.num_classes)
    data = train if args.split == "train" else test
    if data is None:
        raise ArgumentError("config has no held-out split")
    if len(data) == 0:
        raise ArgumentError("cannot evaluate on an empty dataset")
    row = {"model": str(args.model), "split": args.split, "n": len(data)}
    if isinstance(model, FTNClassifier):
        row["kind"] = "ftn"
        row["loss"], row["acc"] = evaluate(model, data)
        print(f"ftn {args.split}: loss {row['loss']!r} acc {row['acc']!r}")
    else:
        row["kind"] = "qftn"
        w = model.w if args.w is None else args.w
        ev = qftn_evaluate(model, data, w)
        row.update(
            w=w, loss=ev["loss"], acc=ev["acc"],
            success_prob_mean=float(ev["success_prob"].mean()),
            success_prob_min=float(ev["success_prob"].min()),
            srpg_mean=float(ev["srpg"].mean()),
        )
        print(
            f"qftn {args.split} w={w}: loss {row['loss']!r} acc {row['acc']!r} "
            f"success_prob mean {row['success_prob_mean']:.12f} min {row['success_prob_min']:.12f}"
        )
    out = Path(args.out) if args.out else None
    if out is not None:
        append_csv(out / "eval.csv", [row], EVAL_COLUMNS)
    return EXIT_OK


def verify_model(model, verbose: bool = False) -> list[str]:
    """Run the invariant checks for a model; returns failure messages."""
    failures = []
    report = print if verbose else (lambda *_: None)
    for i, p in enumerate(model.parameters()):
        if not np.all(np.isfinite(p)):
            failures.append(f"parameter array {i} has non-finite entries")
    if failures:
        return failures
    if isinstance(model, FTNClassifier):
        if not model.is_canonical:
            report("forest is not canonical; isometry checks skipped")
            return failures
        for l, res in enumerate(isometry_residuals(model.levels)):
            for t, j in np.ndindex(res.shape):
                ok = res[t, j] <= ISOMETRY_TOL
                report(f"tree {t} level {l} node {j}: isometry residual {res[t, j]:.3e} {'ok' if ok else 'FAIL'}")
                if not ok:
                    failures.append(f"tree {t}, level {l}, node {j}: isometry residual {res[t, j]:.3e}")
        return failures
    stacks = model.gate_stacks()
    for l, U in enumerate(stacks):
        n = U.shape[-1]
        err = np.linalg.norm(np.swapaxes(U, -1, -2) @ U - np.eye(n), axis=(-2, -1))
        if l == len(stacks) - 1:
            err = err[:, None]
        for t, j in np.ndindex(err.shape):
            ok = err[t, j] <= ORTHOGONALITY_TOL
            where = f"tree {t} top gate" if l == len(stacks) - 1 else f"tree {t} level {l} node {j}"
            report(f"{where}: orthogonality error {err[t, j]:.3e} {'ok' if ok else 'FAIL'}")
            if not ok:
                failures.append(f"{where}: orthogonality error {err[t, j]:.3e}")
    if failures:
        return failures
    if np.any(model.scales <= 0):
        failures.append("non-positive top scale factor")
    rng = np.random.default_rng(0)
    probe = rng.random((8, model.side, model.side, model.channels))
    final, states = forest_sim_forward(stacks, prepare_leaves(model, probe), model.w)
    for l, rho in enumerate(states):
        asym = float(np.abs(rho - np.swapaxes(rho, -1, -2)).max())
        eig = float(np.linalg.eigvalsh((rho + np.swapaxes(rho, -1, -2)) / 2).min())
        tr = np.trace(rho, axis1=-2, axis2=-1)
        report(f"states after level {l - 1}: asymmetry {asym:.2e}, min eigenvalue {eig:.2e}, trace in [{tr.min():.3e}, {tr.max():.3e}]")
        if asym > PSD_TOL or eig < -PSD_TOL or tr.min() <= 0 or tr.max() > 1 + 1e-12:
            failures.append(f"weighted states after level {l - 1} violate symmetry, PSD or trace bounds")
    if model.w == 1.0:
        tr = np.trace(final, axis1=-2, axis2=-1)
        if np.abs(tr - 1).max() > 1e-9:
            failures.append(f"w = 1 but success probability deviates from 1 by {np.abs(tr - 1).max():.3e}")
    return failures


def cmd_verify(args) -> int:
    model = load_model(_existing(args.model))
    kind = "ftn" if isinstance(model, FTNClassifier) else "qftn"
    failures = verify_model(model, verbose=args.verbose)
    for f in failures:
        print(f"FAIL {f}")
    print(f"{kind} model {args.model}: {'all checks passed' if not failures else f'{len(failures)} failures'}")
    return EXIT_OK if not failures else EXIT_VERIFY


def cmd_train_direct(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train, test = load_datasets(cfg.dataset, cfg.model.d)
    if train.channels != cfg.model.k:
        raise ArgumentError(f"dataset has {train.channels} channels, model.k = {cfg.model.k}")
    model = haar_random_qftn(train.side, cfg.model.k, cfg.model.d, cfg.model.seed, cfg.model.shifts)
    try:
        model, rows = train_direct(model, train, cfg.direct, test)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    append_csv(out / "direct_metrics.csv", rows, TRAJECTORY_COLUMNS)
    append_csv(out / "direct_timing.csv", rows[1:], TIMING_COLUMNS)
    save_model(model, out / "qftn_direct.qf")
    last = rows[-1]
    print(
        f"saved {out / 'qftn_direct.qf'}: loss {last['train_loss']:.6f} acc {last['train_acc']:.4f} "
        f"first-gate gradient norm {last['grad_norm_mean']:.3e} +- {last['grad_norm_std']:.3e}"
    )
    return EXIT_OK


def cmd_config_schema(args) -> int:
    print(json.dumps(config_schema(), indent=2))
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (JSON)")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default: hardware count)")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--subset", type=int, default=None, help="override dataset.subset")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="qforest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train an FTN").set_defaults(func=cmd_train)
    p = sub.add_parser("embed", parents=[common], help="embed a trained FTN at w=0")
    p.add_argument("model")
    p.set_defaults(func=cmd_embed)
    p = sub.add_parser("encode", parents=[common], help="adiabatic encoding to w=1")
    p.add_argument("model")
    p.set_defaults(func=cmd_encode)
    p = sub.add_parser("eval", parents=[common], help="evaluate a model")
    p.add_argument("model")
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--w", type=float, default=None, help="acceptance weight (circuit models)")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("verify", parents=[common], help="check model invariants")
    p.add_argument("model")
    p.set_defaults(func=cmd_verify)
    sub.add_parser("train-direct", parents=[common], help="Haar-random training at w=1").set_defaults(
        func=cmd_train_direct
    )
    sub.add_parser("config-schema", parents=[common], help="print config defaults").set_defaults(
        func=cmd_config_schema
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except KindError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_KIND
    except QForestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
