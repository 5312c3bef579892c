"""Synthetic desk-scale versions of the delay, inverse, HYPAV and multi-source studies.

Each experiment returns a :class:`Table`. Datasets and training seeds are
derived from the experiment seed, so every table is reproducible bit for bit.
Runs are sequential; results are keyed by run name, never by completion order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .batching import HypavConfig
from .data import Dataset, Recording, SplitSpec, apply_normalizer, fit_normalizer, load_dataset
from .ensemble import EnsembleSpec, build_multi_source, fuse_scores
from .errors import ConfigError, DataError
from .synthetic import SyntheticConfig, make_synthetic
from .training import TrainConfig, TrainResult, evaluate_model, score_series, train_recordings
from .variants import Variant

COMPOSITIONS = (
    "LSTM(20)",
    "DLY(20)",
    "INV(20)",
    "LSTM(10)+DLY(10)",
    "LSTM(10)+INV(10)",
    "DLY(10)+INV(10)",
    "LSTM(6)+DLY(7)+INV(7)",
)


@dataclass
class Table:
    title: str
    columns: list[str]
    rows: list[list]

    def render(self) -> str:
        cells = [[_fmt(v) for v in row] for row in self.rows]
        widths = [max(len(c), *(len(r[i]) for r in cells)) if cells else len(c) for i, c in enumerate(self.columns)]
        line = "  ".join(c.ljust(w) for c, w in zip(self.columns, widths))
        out = [self.title, line, "-" * len(line)]
        out += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
        return "\n".join(out) + "\n"

    def to_json(self) -> dict:
        return {"title": self.title, "columns": self.columns, "rows": self.rows}


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def mean_std(values: Sequence[float]) -> str:
    a = np.asarray(values, dtype=np.float64)
    return f"{a.mean():.4f} ± {a.std():.4f}"


@dataclass
class DeskScale:
    """Network and optimizer settings small enough for a laptop CPU."""

    n_hidden: int = 32
    n_layers: int = 2
    learning_rate: float = 0.01
    dropout_p: float = 0.0
    batch_size: int = 32
    window_seconds: float = 1.0
    epochs: int = 10
    # synthetic data size; a fifth of the recordings go to validation and another fifth to test
    n_recordings: int = 20
    length: int = 3000
    # HYPAV draws, scaled to the desk-scale batch size
    hypav_window_range: tuple[float, float] = (0.5, 2.0)
    hypav_batch_choices: tuple[int, ...] = (16, 32, 64)

    def hypav(self, enabled: bool) -> HypavConfig:
        if not enabled:
            return HypavConfig.fixed(self.window_seconds, self.batch_size)
        return HypavConfig(self.hypav_window_range, self.hypav_batch_choices, True)

    def train_config(self, variant: Variant, seed: int, hypav: bool = False, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            variant=variant,
            epochs=epochs or self.epochs,
            learning_rate=self.learning_rate,
            dropout_p=self.dropout_p,
            clip_norm=10.0,
            hypav=self.hypav(hypav),
            seed=seed,
            n_hidden=self.n_hidden,
            n_layers=self.n_layers,
        )


FULL_SCALE = DeskScale(
    n_hidden=256,
    learning_rate=1e-3,
    dropout_p=0.5,
    batch_size=128,
    window_seconds=1.0,
    epochs=50,
    hypav_batch_choices=(64, 128, 256),
)


def delay_dataset(seed: int, n_recordings: int = 20, length: int = 3000) -> Dataset:
    """Pre-onset cues only: recoverable with look-ahead, invisible to a causal model."""
    cfg = SyntheticConfig(n_recordings=n_recordings, length=length, label_modes="pre_onset(5)")
    return make_synthetic(cfg, seed)


def mixed_dataset(seed: int, n_recordings: int = 20, length: int = 3000) -> Dataset:
    """Class 1 labels precede its event, class 2 labels follow its event."""
    cfg = SyntheticConfig(n_recordings=n_recordings, length=length, label_modes=["pre_onset(5)", "post_offset(5)"])
    return make_synthetic(cfg, seed)


def holdout(ds: Dataset, n_val: int, n_test: int) -> tuple[list[Recording], list[Recording], list[Recording]]:
    recs = ds.recordings
    n_train = len(recs) - n_val - n_test
    if n_train < 1 or n_val < 1:
        raise ConfigError(f"{len(recs)} recordings cannot hold {n_val} validation and {n_test} test recordings")
    return recs[:n_train], recs[n_train : n_train + n_val], recs[n_train + n_val :]


@dataclass
class Splits:
    train: list[Recording]
    val: list[Recording]
    test: list[Recording]
    n_classes: int
    null_class: int | None = 0


def synthetic_splits(ds: Dataset) -> Splits:
    n_hold = max(1, len(ds.recordings) // 5)
    tr, va, te = holdout(ds, n_hold, n_hold)
    return Splits(tr, va, te, ds.n_classes, ds.null_class)


def manifest_splits(manifest: str, split: SplitSpec) -> Splits:
    """Real-data splits, z-scored with training statistics."""
    ds = load_dataset(manifest)
    tr, va, te = split.resolve(ds.recordings)
    if not tr or not va:
        raise DataError("split leaves no training or validation recordings")
    stats = fit_normalizer(tr)
    norm = lambda rs: [apply_normalizer(r, stats) for r in rs]  # noqa: E731
    return Splits(norm(tr), norm(va), norm(te), ds.n_classes, ds.null_class)


def run(splits: Splits, cfg: TrainConfig) -> TrainResult:
    return train_recordings(cfg, splits.train, splits.val, splits.n_classes, "mean_f1", splits.null_class)


def heldout_score(splits: Splits, result: TrainResult, variant: Variant | None = None) -> float:
    recs = splits.test or splits.val
    return score_series(evaluate_model(result.best.params, recs, variant or result.variant), recs, splits.n_classes)


# ---------------------------------------------------------------------------


def delay_sweep(seeds: Sequence[int], deltas: Sequence[int] = (0, 1, 3, 5, 8), scale: DeskScale = DeskScale()) -> Table:
    val = {d: [] for d in deltas}
    test = {d: [] for d in deltas}
    rate = 30.0
    for seed in seeds:
        ds = delay_dataset(seed, scale.n_recordings, scale.length)
        rate = ds.sample_rate
        splits = synthetic_splits(ds)
        for d in deltas:
            res = run(splits, scale.train_config(Variant.delay(d), seed))
            val[d].append(res.best.val_score)
            test[d].append(heldout_score(splits, res))
    rows = [[d, round(d / rate, 4), mean_std(val[d]), mean_std(test[d])] for d in deltas]
    return Table("Delay sweep (pre_onset(5) cues)", ["delta", "delta_s", "val mean-F1", "test mean-F1"], rows)


def train_sources(
    splits: Splits, seed: int, scale: DeskScale, hypav: bool, delay: int = 5, epochs: int | None = None
) -> dict[str, TrainResult]:
    variants = {"LSTM": Variant.standard(), "DLY": Variant.delay(delay), "INV": Variant.inverse()}
    return {name: run(splits, scale.train_config(v, seed, hypav, epochs)) for name, v in variants.items()}


def inverse_fusion_scores(splits: Splits, runs: dict[str, TrainResult]) -> dict[str, float]:
    recs = splits.test or splits.val
    fwd = evaluate_model(runs["LSTM"].best.params, recs, Variant.standard())
    inv = evaluate_model(runs["INV"].best.params, recs, Variant.inverse())
    fused = [fuse_scores([a, b]) for a, b in zip(fwd, inv)]
    return {
        "LSTM": score_series(fwd, recs, splits.n_classes),
        "INV": score_series(inv, recs, splits.n_classes),
        "LSTM&INV": score_series(fused, recs, splits.n_classes),
    }


def inverse_fusion(seeds: Sequence[int], scale: DeskScale = DeskScale()) -> Table:
    scores: dict[str, list[float]] = {"LSTM": [], "INV": [], "LSTM&INV": []}
    for seed in seeds:
        splits = synthetic_splits(mixed_dataset(seed, scale.n_recordings, scale.length))
        variants = {"LSTM": Variant.standard(), "INV": Variant.inverse()}
        runs = {k: run(splits, scale.train_config(v, seed)) for k, v in variants.items()}
        for k, v in inverse_fusion_scores(splits, runs).items():
            scores[k].append(v)
    return Table("Inverse fusion (pre/post cues)", ["model", "test mean-F1"], [[k, mean_std(v)] for k, v in scores.items()])


HYPAV_SCALE = DeskScale(epochs=15, n_recordings=10, length=1500, batch_size=16, hypav_batch_choices=(8, 16, 32))
MULTI_SOURCE_SCALE = DeskScale(epochs=20)


def hypav_study(seeds: Sequence[int], scale: DeskScale = HYPAV_SCALE, delay: int = 5) -> Table:
    """Each strategy with and without HYPAV; LSTM&INV fuses the two single runs of the same seed."""
    names = ["LSTM", "DLY", "INV", "LSTM&INV"]
    scores = {(n, h): [] for n in names for h in (True, False)}
    for seed in seeds:
        splits = synthetic_splits(mixed_dataset(seed, scale.n_recordings, scale.length))
        for h in (True, False):
            runs = train_sources(splits, seed, scale, h, delay)
            fusion = inverse_fusion_scores(splits, runs)
            scores[("LSTM", h)].append(fusion["LSTM"])
            scores[("INV", h)].append(fusion["INV"])
            scores[("LSTM&INV", h)].append(fusion["LSTM&INV"])
            scores[("DLY", h)].append(heldout_score(splits, runs["DLY"]))
    rows = [[n, mean_std(scores[(n, True)]), mean_std(scores[(n, False)])] for n in names]
    return Table(f"HYPAV ({len(seeds)} seeds, test mean-F1)", ["strategy", "w/ HYPAV", "w/o"], rows)


def ensemble_scores(
    splits: Splits, runs: dict[str, TrainResult], compositions: Sequence[str] = COMPOSITIONS, rule: str = "top"
) -> dict[str, float]:
    variants = {k: r.variant for k, r in runs.items()}
    snaps = {k: r.snapshots for k, r in runs.items()}
    recs = splits.test or splits.val
    out = {}
    for comp in compositions:
        predictor = build_multi_source(EnsembleSpec.parse(comp, variants, rule), snaps)
        out[comp] = score_series(predictor.predict(recs), recs, splits.n_classes)
    return out


def multi_source(seeds: Sequence[int], scale: DeskScale = MULTI_SOURCE_SCALE, hypav: bool = False) -> Table:
    per = {c: [] for c in COMPOSITIONS}
    for seed in seeds:
        splits = synthetic_splits(mixed_dataset(seed, scale.n_recordings, scale.length))
        runs = train_sources(splits, seed, scale, hypav)
        for c, v in ensemble_scores(splits, runs).items():
            per[c].append(v)
    rows = []
    for c in COMPOSITIONS:
        a = np.asarray(per[c])
        rows.append([c, mean_std(a), float(a.min()), float(np.median(a)), float(a.max())])
    return Table("Multi-source ensembles (test mean-F1)", ["ensemble", "mean ± std", "min", "median", "max"], rows)


EXPERIMENTS: dict[str, Callable[..., Table]] = {
    "delay-sweep": delay_sweep,
    "inverse-fusion": inverse_fusion,
    "hypav": hypav_study,
    "multi-source": multi_source,
}

DEFAULT_SEEDS = {"delay-sweep": 3, "inverse-fusion": 5, "hypav": 30, "multi-source": 5}


@dataclass
class ExperimentConfig:
    """Optional overrides read from ``--config``.

    With ``full_scale`` the experiment trains on ``manifest`` under ``split``
    using the published hyper-parameters instead of synthetic data.
    """

    n_seeds: int | None = None
    scale: dict = field(default_factory=dict)
    deltas: list[int] | None = None
    manifest: str | None = None
    split: dict | None = None

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment config keys {sorted(unknown)}")
        return cls(**obj)

    def desk_scale(self, base: DeskScale) -> DeskScale:
        try:
            kw = dict(self.scale)
            for key in ("hypav_window_range", "hypav_batch_choices"):
                if key in kw:
                    kw[key] = tuple(kw[key])
            return replace(base, **kw)
        except TypeError as exc:
            raise ConfigError(f"bad scale override: {exc}") from None


def run_experiment(name: str, seed: int = 0, config: ExperimentConfig | None = None, full_scale: bool = False) -> Table:
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    config = config or ExperimentConfig()
    seeds = [seed + i for i in range(config.n_seeds or DEFAULT_SEEDS[name])]
    if full_scale:
        return _full_scale(name, seeds, config)
    defaults = {"hypav": HYPAV_SCALE, "multi-source": MULTI_SOURCE_SCALE}
    scale = config.desk_scale(defaults.get(name, DeskScale()))
    if name == "delay-sweep" and config.deltas is not None:
        return delay_sweep(seeds, config.deltas, scale)
    return EXPERIMENTS[name](seeds, scale=scale)


def _full_scale(name: str, seeds: Sequence[int], config: ExperimentConfig) -> Table:
    """Published-recipe runs on a user-supplied dataset export (hours of CPU time)."""
    if not config.manifest or not config.split:
        raise DataError("--full-scale needs 'manifest' and 'split' in the experiment config")
    splits = manifest_splits(config.manifest, SplitSpec.from_json(config.split))
    scale = config.desk_scale(FULL_SCALE)
    rate = splits.train[0].sample_rate
    if name == "delay-sweep":
        deltas = config.deltas or [0, 3, 6, 9, 12, 15, 21, 30]
        rows = []
        for d in deltas:
            vals = [heldout_score(splits, run(splits, scale.train_config(Variant.delay(d), s))) for s in seeds]
            rows.append([d, round(d / rate, 4), mean_std(vals)])
        return Table("Delay sweep (full scale)", ["delta", "delta_s", "test mean-F1"], rows)
    if name in ("inverse-fusion", "hypav"):
        hyp = name == "hypav"
        scores: dict[str, list[float]] = {}
        for s in seeds:
            runs = train_sources(splits, s, scale, hyp, delay=int(0.7 * rate + 0.5))
            for k, v in inverse_fusion_scores(splits, runs).items():
                scores.setdefault(k, []).append(v)
        return Table(f"{name} (full scale)", ["model", "test mean-F1"], [[k, mean_std(v)] for k, v in scores.items()])
    per: dict[str, list[float]] = {}
    for s in seeds:
        runs = train_sources(splits, s, scale, True, delay=int(0.7 * rate + 0.5))
        for c, v in ensemble_scores(splits, runs).items():
            per.setdefault(c, []).append(v)
    return Table("Multi-source ensembles (full scale)", ["ensemble", "test mean-F1"], [[c, mean_std(v)] for c, v in per.items()])


def table_json(table: Table) -> str:
    return json.dumps(table.to_json(), indent=2, sort_keys=True) + "\n"
