"""Training loop: Adam on truncated-BPTT gradients with per-epoch snapshots.

Every epoch ends with a validation pass and an :class:`EpochSnapshot`; all
snapshots are kept because epoch-wise bagging draws its ensemble members
from them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .batching import HypavConfig, stateful_batches
from .data import Dataset, Recording, SplitSpec
from .errors import ConfigError, EvaluationError, ShapeError, TrainingError
from .metrics import confusion, mean_f1, sensitivity_at_specificity
from .network import (
    LayerState,
    NetworkDims,
    NetworkParams,
    backward_window,
    forward_window,
    init_params,
    zero_state,
)
from .numcore import RngStream, stream_id
from .variants import (
    ProbSeries,
    Variant,
    align_delayed,
    delay_targets,
    invert_recording,
    uninvert_probs,
)

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    variant: Variant = field(default_factory=Variant.standard)
    epochs: int = 30
    learning_rate: float = 1e-3
    dropout_p: float = 0.5
    clip_norm: float = 10.0
    hypav: HypavConfig = field(default_factory=HypavConfig.fixed)
    seed: int = 0
    n_hidden: int = 256
    n_layers: int = 2

    def __post_init__(self):
        if isinstance(self.variant, (str, dict)):
            self.variant = Variant.from_json(self.variant)
        if isinstance(self.hypav, dict):
            self.hypav = HypavConfig.from_json(self.hypav)
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")

    def to_json(self) -> dict:
        return {
            "variant": self.variant.to_json(),
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "dropout_p": self.dropout_p,
            "clip_norm": self.clip_norm,
            "hypav": self.hypav.to_json(),
            "seed": self.seed,
            "n_hidden": self.n_hidden,
            "n_layers": self.n_layers,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys {sorted(unknown)}")
        return cls(**obj)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()])


@dataclass
class EpochSnapshot:
    epoch: int  # 1-based
    params: NetworkParams
    val_score: float
    train_loss: float


@dataclass
class TrainResult:
    snapshots: list[EpochSnapshot]
    best: EpochSnapshot
    variant: Variant


def global_norm(arrays: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays))


def clip_by_global_norm(grads: NetworkParams, clip_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``clip_norm``; returns the original norm."""
    norm = global_norm(grads.arrays())
    if norm > clip_norm:
        scale = clip_norm / norm
        for g in grads.arrays():
            g *= scale
    return norm


def adam_step(
    params: NetworkParams,
    grads: NetworkParams,
    state: AdamState,
    lr: float,
    clip_norm: float | None = None,
) -> tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam update, in place. Gradients are clipped first when ``clip_norm`` is set."""
    if [a.shape for a in params.arrays()] != [g.shape for g in grads.arrays()]:
        raise ShapeError("gradient shapes do not match parameters")
    if clip_norm is not None:
        clip_by_global_norm(grads, clip_norm)
    state.step += 1
    c1 = 1.0 - BETA1**state.step
    c2 = 1.0 - BETA2**state.step
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state


# ---------------------------------------------------------------------------
# inference and validation


def predict_recording(params: NetworkParams, rec: Recording) -> np.ndarray:
    """Stream a whole recording from a zero state; returns (T, C) probabilities."""
    if rec.n_channels != params.dims.n_inputs:
        raise ShapeError(f"{rec.id}: {rec.n_channels} channels, network expects {params.dims.n_inputs}")
    probs, _, _ = forward_window(params, rec.features[None], zero_state(params, 1), "infer")
    return probs[0]


def evaluate_model(params: NetworkParams, recordings: Sequence[Recording], variant: Variant) -> list[ProbSeries]:
    """Per-recording probability series under the variant's time alignment."""
    out = []
    for rec in recordings:
        if variant.kind == "inverse":
            raw = predict_recording(params, invert_recording(rec))
            out.append(uninvert_probs(ProbSeries(raw, np.ones(len(rec), dtype=bool))))
        else:
            raw = predict_recording(params, rec)
            out.append(align_delayed(raw, variant.resolve(rec.sample_rate).delta))
    return out


def score_series(
    series: Sequence[ProbSeries],
    recordings: Sequence[Recording],
    n_classes: int,
    metric: str = "mean_f1",
    null_class: int | None = 0,
    target_spec: float = 0.9,
) -> float:
    """Pool valid timestamps over recordings and compute ``metric``.

    ``mean_f1`` (multiclass), ``mean_f1_excl_null``, or ``sensitivity``
    (binary; class 1 is positive, scored at ``target_spec`` specificity).
    """
    valid = np.concatenate([s.valid for s in series])
    true = np.concatenate([r.labels for r in recordings])
    if not valid.any():
        raise EvaluationError("no valid predictions to score")
    if metric == "sensitivity":
        scores = np.concatenate([s.probs[:, 1] for s in series])
        return sensitivity_at_specificity(scores[valid], true[valid] == 1, target_spec)[0]
    pred = np.concatenate([s.predictions() for s in series])
    cm = confusion(pred, true, valid, n_classes)
    if metric == "mean_f1":
        return mean_f1(cm)
    if metric == "mean_f1_excl_null":
        return mean_f1(cm, exclude_null=True, null_class=null_class)
    raise ConfigError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# training


def _training_view(recordings: Sequence[Recording], variant: Variant):
    """Recordings and per-recording (targets, mask) as the network sees them."""
    if variant.kind == "inverse":
        recs = [invert_recording(r) for r in recordings]
        return recs, None
    if variant.kind == "delay":
        return list(recordings), [delay_targets(r.labels, variant.delta) for r in recordings]
    return list(recordings), None


def train_recordings(
    config: TrainConfig,
    train_recs: Sequence[Recording],
    val_recs: Sequence[Recording],
    n_classes: int,
    val_metric: str = "mean_f1",
    null_class: int | None = 0,
    on_epoch: Callable[[EpochSnapshot], None] | None = None,
) -> TrainResult:
    if not train_recs:
        raise ConfigError("empty training split")
    if not val_recs:
        raise ConfigError("empty validation split")
    rate = train_recs[0].sample_rate
    variant = config.variant.resolve(rate)
    dims = NetworkDims(train_recs[0].n_channels, config.n_hidden, n_classes, config.n_layers)
    params = init_params(dims, config.seed)
    adam = AdamState.zeros_like(params)
    recs, targets = _training_view(train_recs, variant)

    snapshots: list[EpochSnapshot] = []
    for epoch in range(1, config.epochs + 1):
        dropout_rng = RngStream(config.seed, stream_id("dropout", epoch))
        states: list[LayerState] | None = None
        loss_sum, count = 0.0, 0
        for batch in stateful_batches(recs, config.hypav, config.seed, epoch, targets):
            n_lanes = batch.X.shape[0]
            if states is None or states[0].h.shape[0] != n_lanes:
                states = zero_state(params, n_lanes)
            for s in states:
                s.reset(batch.reset_flags)
            _, states, cache = forward_window(params, batch.X, states, "train", config.dropout_p, dropout_rng)
            grads, loss = backward_window(params, cache, batch.Y, batch.loss_mask)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged (non-finite) in epoch {epoch}")
            n = int(batch.loss_mask.sum())
            if n == 0:
                continue
            loss_sum += loss * n
            count += n
            adam_step(params, grads, adam, config.learning_rate, config.clip_norm)
        if not all(np.isfinite(a).all() for a in params.arrays()):
            raise TrainingError(f"parameters became non-finite in epoch {epoch}")
        train_loss = loss_sum / count if count else 0.0
        val_score = score_series(evaluate_model(params, val_recs, variant), val_recs, n_classes, val_metric, null_class)
        snap = EpochSnapshot(epoch, params.copy(), val_score, train_loss)
        snapshots.append(snap)
        log.info("epoch %d train_loss %.6f val %.6f", epoch, train_loss, val_score)
        if on_epoch is not None:
            on_epoch(snap)

    best = snapshots[0]
    for s in snapshots[1:]:
        if s.val_score > best.val_score:
            best = s
    return TrainResult(snapshots, best, variant)


def train(
    config: TrainConfig,
    dataset: Dataset,
    split: SplitSpec,
    val_metric: str = "mean_f1",
    on_epoch: Callable[[EpochSnapshot], None] | None = None,
) -> TrainResult:
    """Train on the split's training recordings, validating after every epoch.

    The best snapshot maximizes the validation score; ties go to the earlier epoch.
    """
    train_recs, val_recs, _ = split.resolve(dataset.recordings)
    return train_recordings(config, train_recs, val_recs, dataset.n_classes, val_metric, dataset.null_class, on_epoch)
