"""Command-line entry point: ``sslstm synth|train|eval|gradcheck|experiment``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 training or
evaluation failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .data import Dataset, SplitSpec, apply_normalizer, fit_normalizer, load_dataset, save_dataset
from .ensemble import EnsembleSpec, build_multi_source
from .errors import ConfigError, DataError, SslstmError
from .experiments import ExperimentConfig, run_experiment, table_json
from .metrics import metrics_report
from .network import NetworkDims, init_params
from .numcore import RngStream
from .synthetic import SyntheticConfig, make_synthetic
from .training import EpochSnapshot, TrainConfig, evaluate_model, train_recordings
from .variants import Variant

log = logging.getLogger("sslstm")

METRICS = ("mean_f1", "mean_f1_excl_null", "sensitivity")


def _read_json(path: str | Path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunConfig:
    """One training or evaluation run; relative paths resolve against the config file."""

    dataset: Path
    split: SplitSpec
    train: TrainConfig
    metric: str = "mean_f1"
    target_specificity: float = 0.9
    normalize: bool = True
    out: Path | None = None
    base: Path = field(default_factory=Path)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        obj = _read_json(path, "run config")
        for key in ("dataset", "split"):
            if key not in obj:
                raise ConfigError(f"{path}: run config lacks {key!r}")
        metric = obj.get("metric", "mean_f1")
        if metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        try:
            train = TrainConfig.from_json(obj.get("train", {}))
            split = SplitSpec.from_json(obj["split"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SslstmError):
                raise
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
        out = obj.get("out")
        return cls(
            dataset=base / obj["dataset"],
            split=split,
            train=train,
            metric=metric,
            target_specificity=float(obj.get("target_specificity", 0.9)),
            normalize=bool(obj.get("normalize", True)),
            out=None if out is None else base / out,
            base=base,
        )


def _prepare(cfg: RunConfig):
    ds = load_dataset(cfg.dataset)
    tr, va, te = cfg.split.resolve(ds.recordings)
    if not tr:
        raise ConfigError("split selects no training recordings")
    if not va:
        raise ConfigError("split selects no validation recordings")
    if cfg.normalize:
        stats = fit_normalizer(tr)
        tr, va, te = ([apply_normalizer(r, stats) for r in rs] for rs in (tr, va, te))
    return ds, tr, va, te


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    variant = getattr(args, "variant", None)
    delta = getattr(args, "delta", None)
    if delta is not None:
        if variant not in (None, "delay"):
            raise ConfigError("--delta only applies to the delay variant")
        cfg.variant = Variant.delay(seconds=delta)
    elif variant == "delay":
        if cfg.variant.kind != "delay":
            raise ConfigError("--variant delay needs --delta SECONDS or a delay in the config")
    elif variant is not None:
        cfg.variant = Variant(variant)
    return cfg


def _describe_variant(v: Variant, rate: float) -> str:
    if v.kind != "delay":
        return v.kind
    return f"delay Δ={v.delta} samples ({v.delta / rate:g} s at {rate:g} Hz)"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = SyntheticConfig.from_json(_read_json(args.config, "synthetic config")) if args.config else SyntheticConfig()
    ds = make_synthetic(cfg, args.seed or 0)
    out = Path(args.out or "synthetic")
    manifest = save_dataset(ds, out)
    print(f"wrote {len(ds.recordings)} recordings to {manifest}")
    return 0


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigError("train needs --config RUN.json")
    cfg = RunConfig.load(args.config)
    cfg.train = _apply_overrides(cfg.train, args)
    out = Path(args.out) if args.out else cfg.out
    if out is None:
        raise ConfigError("no output directory (set 'out' in the config or pass --out)")
    ds, tr, va, _ = _prepare(cfg)
    variant = cfg.train.variant.resolve(ds.sample_rate)
    cfg.train.variant = variant
    digest = cfg.train.digest()
    out.mkdir(parents=True, exist_ok=True)
    log_lines: list[str] = []

    def emit(line: str) -> None:
        print(line, flush=True)
        log_lines.append(line)

    emit(f"variant {_describe_variant(variant, ds.sample_rate)}")
    emit(f"train {len(tr)} recordings, validation {len(va)} recordings, config {digest}")

    def on_epoch(snap: EpochSnapshot) -> None:
        name = f"epoch_{snap.epoch:03d}"
        checkpoint.save(snap.params, out / f"{name}.sslm")
        _write_json(
            out / f"{name}.json",
            {"epoch": snap.epoch, "val_score": snap.val_score, "train_loss": snap.train_loss, "config_hash": digest},
        )
        emit(f"epoch {snap.epoch} train_loss {snap.train_loss:.6f} val_{cfg.metric} {snap.val_score:.6f}")

    result = train_recordings(cfg.train, tr, va, ds.n_classes, cfg.metric, ds.null_class, on_epoch)
    emit(f"best epoch {result.best.epoch} val_{cfg.metric} {result.best.val_score:.6f}")
    _write_json(
        out / "run.json",
        {
            "config_hash": digest,
            "train": cfg.train.to_json(),
            "metric": cfg.metric,
            "best_epoch": result.best.epoch,
            "epochs": [
                {"epoch": s.epoch, "val_score": s.val_score, "train_loss": s.train_loss} for s in result.snapshots
            ],
        },
    )
    (out / "train.log").write_text("\n".join(log_lines) + "\n")
    return 0


def load_run(run_dir: str | Path) -> tuple[Variant, list[EpochSnapshot]]:
    """Variant and snapshots of a finished training run directory."""
    run_dir = Path(run_dir)
    meta_path = run_dir / "run.json"
    if not meta_path.exists():
        raise DataError(f"{run_dir} is not a training run directory (no run.json)")
    meta = json.loads(meta_path.read_text())
    snaps = []
    for entry in meta["epochs"]:
        params = checkpoint.load(run_dir / f"epoch_{entry['epoch']:03d}.sslm")
        snaps.append(EpochSnapshot(entry["epoch"], params, entry["val_score"], entry["train_loss"]))
    return Variant.from_json(meta["train"]["variant"]), snaps


def _parse_runs(items: Sequence[str]) -> dict[str, str]:
    runs = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--runs entries look like NAME=DIR, got {item!r}")
        runs[name] = path
    return runs


def _check_dims(params, ds: Dataset, where: str) -> None:
    d = params.dims
    if d.n_inputs != ds.n_channels or d.n_classes != ds.n_classes:
        raise DataError(
            f"{where}: checkpoint expects {d.n_inputs} channels and {d.n_classes} classes, "
            f"dataset has {ds.n_channels} channels and {ds.n_classes} classes"
        )


def cmd_eval(args) -> int:
    if not args.config:
        raise ConfigError("eval needs --config RUN.json")
    cfg = RunConfig.load(args.config)
    ds, _, va, te = _prepare(cfg)
    recs = va if args.split == "val" else te
    if not recs:
        raise ConfigError(f"split selects no {args.split} recordings")

    if args.ensemble:
        if not args.runs:
            raise ConfigError("--ensemble needs --runs NAME=DIR ...")
        loaded = {name: load_run(path) for name, path in _parse_runs(args.runs).items()}
        variants = {name: v for name, (v, _) in loaded.items()}
        if Path(args.ensemble).suffix == ".json":
            spec = EnsembleSpec.from_json(_read_json(args.ensemble, "ensemble spec"))
        else:
            spec = EnsembleSpec.parse(args.ensemble, variants, args.rule)
        for name, (_, snaps) in loaded.items():
            for s in snaps:
                _check_dims(s.params, ds, f"{name} epoch {s.epoch}")
        predictor = build_multi_source(spec, {name: snaps for name, (_, snaps) in loaded.items()})
        print(f"ensemble {spec} ({spec.size} members, rule {spec.rule})")
        for src in spec.sources:
            print(f"  source {src.run_id}: {src.count} members, {src.variant}")
        series = predictor.predict(recs)
        model = {"ensemble": spec.to_json()}
    else:
        if not args.snapshot:
            raise ConfigError("eval needs --snapshot FILE or --ensemble SPEC")
        params = checkpoint.load(args.snapshot)
        _check_dims(params, ds, str(args.snapshot))
        variant = _apply_overrides(TrainConfig(variant=cfg.train.variant), args).variant.resolve(ds.sample_rate)
        series = evaluate_model(params, recs, variant)
        model = {"snapshot": Path(args.snapshot).name, "variant": variant.to_json()}

    valid = np.concatenate([s.valid for s in series])
    pred = np.concatenate([s.predictions() for s in series])
    true = np.concatenate([r.labels for r in recs])
    scores = np.concatenate([s.probs[:, 1] for s in series]) if cfg.metric == "sensitivity" else None
    report = metrics_report(pred, true, valid, ds.class_names, ds.null_class, scores, cfg.target_specificity)
    report["model"] = model
    report["split"] = args.split
    report["recordings"] = [r.id for r in recs]
    text = format_report(report)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "metrics.json", report)
        (out / "metrics.txt").write_text(text)
    return 0


def format_report(report: dict) -> str:
    lines = [f"{'class':<16}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>10}"]
    for name, r in report["per_class"].items():
        lines.append(f"{name:<16}{r['precision']:>10.4f}{r['recall']:>10.4f}{r['f1']:>10.4f}{r['support']:>10d}")
    lines.append(f"mean-F1 {report['mean_f1']:.4f}")
    if report["mean_f1_excl_null"] is not None:
        lines.append(f"mean-F1 (null excluded) {report['mean_f1_excl_null']:.4f}")
    lines.append(f"accuracy {report['accuracy']:.4f}")
    if "binary" in report:
        b = report["binary"]
        lines.append(f"sensitivity {b['sensitivity']:.4f} at specificity {b['specificity']:.4f} (threshold {b['threshold']})")
    return "\n".join(lines) + "\n"


GRADCHECK_DIMS = {"n_inputs": 6, "n_hidden": 16, "n_classes": 4, "n_layers": 2, "window": 8, "batch": 3}


def cmd_gradcheck(args) -> int:
    from .network import gradient_check

    dims = dict(GRADCHECK_DIMS)
    if args.config:
        extra = _read_json(args.config, "gradcheck config")
        unknown = set(extra) - set(dims)
        if unknown:
            raise ConfigError(f"unknown gradcheck keys {sorted(unknown)}")
        dims.update(extra)
    seed = args.seed or 0
    net = init_params(NetworkDims(dims["n_inputs"], dims["n_hidden"], dims["n_classes"], dims["n_layers"]), seed)
    rng = RngStream(seed, "gradcheck-data")
    b, length = dims["batch"], dims["window"]
    X = rng.normal_array(0.0, 1.0, b * length * dims["n_inputs"]).reshape(b, length, dims["n_inputs"])
    Y = np.array([rng.integer(0, dims["n_classes"] - 1) for _ in range(b * length)]).reshape(b, length)
    mask = np.ones((b, length), dtype=bool)

    def corrupt(grads) -> None:
        grads.layers[0].w_h *= 1.01

    err = gradient_check(net, X, Y, mask, grad_transform=corrupt if args.corrupt else None)
    ok = err <= args.threshold
    print(f"max relative error {err!r} threshold {args.threshold!r} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 4


def cmd_experiment(args) -> int:
    config = ExperimentConfig.from_json(_read_json(args.config, "experiment config")) if args.config else None
    table = run_experiment(args.name, args.seed or 0, config, args.full_scale)
    text = table.render()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.name}.txt").write_text(text)
        (out / f"{args.name}.json").write_text(table_json(table))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sslstm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help: str):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help=out_help)

    def variant_flags(sp):
        sp.add_argument("--variant", choices=("standard", "delay", "inverse"))
        sp.add_argument("--delta", type=float, metavar="SECONDS", help="delay in seconds (implies --variant delay)")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, "output directory for CSVs and manifest")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one model and save per-epoch snapshots")
    common(sp, "snapshot directory")
    variant_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a snapshot or an ensemble")
    common(sp, "directory for metrics.json and metrics.txt")
    variant_flags(sp)
    sp.add_argument("--snapshot", help="checkpoint file")
    sp.add_argument("--ensemble", help="composition such as LSTM(6)+DLY(7)+INV(7), or a JSON spec file")
    sp.add_argument("--runs", nargs="+", metavar="NAME=DIR", help="training run directories for the ensemble")
    sp.add_argument("--rule", choices=("top", "last"), default="top", help="epoch selection rule")
    sp.add_argument("--split", choices=("val", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="compare BPTT gradients with finite differences")
    common(sp, "unused")
    sp.add_argument("--threshold", type=float, default=1e-4)
    sp.add_argument("--corrupt", action="store_true", help="perturb one analytic gradient (the check must fail)")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("experiment", help="run a named study and print its table")
    common(sp, "directory for the table (text and JSON)")
    sp.add_argument("name", choices=("delay-sweep", "inverse-fusion", "hypav", "multi-source"))
    sp.add_argument("--full-scale", action="store_true", help="published recipe on a user-supplied dataset")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SslstmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
