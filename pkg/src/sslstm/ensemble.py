"""Score-level fusion, epoch-wise bagging and multi-source ensembles."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Recording
from .errors import ConfigError, EvaluationError
from .training import EpochSnapshot, evaluate_model
from .variants import ProbSeries, Variant, align_for_fusion

RULES = ("top", "last")

# short source tags used in composition strings such as "LSTM(6)+DLY(7)+INV(7)"
_TAG_KIND = {"LSTM": "standard", "DLY": "delay", "INV": "inverse"}
_SOURCE_RE = re.compile(r"^([A-Za-z][\w.-]*)\((\d+)\)$")


def fuse_scores(members: Sequence[ProbSeries]) -> ProbSeries:
    """Mean probability over the members valid at each timestamp."""
    if not members:
        raise ValueError("cannot fuse an empty member list")
    stacked, valid, counts = align_for_fusion(members)
    weights = np.stack([m.valid for m in members]).astype(np.float64)
    total = np.einsum("mt,mtc->tc", weights, stacked)
    n_classes = stacked.shape[2]
    probs = np.full(total.shape, 1.0 / n_classes)
    probs[valid] = total[valid] / counts[valid, None]
    return ProbSeries(probs, valid)


def _cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    picked = probs[np.arange(len(targets)), targets]
    return float(-np.mean(np.log(picked)))


def fused_ce(members: Sequence[ProbSeries], targets) -> tuple[float, list[float]]:
    """Cross-entropy of the fused probabilities and of every member, on timestamps where all members are valid."""
    if not members:
        raise ValueError("cannot fuse an empty member list")
    targets = np.asarray(targets, dtype=np.int64)
    joint = np.logical_and.reduce([m.valid for m in members])
    if not joint.any():
        raise EvaluationError("members share no valid timestamp")
    fused = fuse_scores(members)
    t = targets[joint]
    return _cross_entropy(fused.probs[joint], t), [_cross_entropy(m.probs[joint], t) for m in members]


def select_bagged(snapshots: Sequence[EpochSnapshot], m: int, rule: str = "top") -> list[EpochSnapshot]:
    """Pick ``m`` snapshots, returned in ascending epoch order.

    ``top``: highest validation score, ties to the earlier epoch.
    ``last``: the final ``m`` epochs.
    """
    if m < 0 or m > len(snapshots):
        raise ValueError(f"cannot select {m} of {len(snapshots)} snapshots")
    if rule == "top":
        ranked = sorted(snapshots, key=lambda s: (-s.val_score, s.epoch))[:m]
    elif rule == "last":
        ranked = sorted(snapshots, key=lambda s: s.epoch)[len(snapshots) - m :]
    else:
        raise ValueError(f"unknown selection rule {rule!r}")
    return sorted(ranked, key=lambda s: s.epoch)


@dataclass(frozen=True)
class SourceSpec:
    run_id: str
    variant: Variant
    count: int

    def to_json(self) -> dict:
        return {"run_id": self.run_id, "variant": self.variant.to_json(), "count": self.count}

    @classmethod
    def from_json(cls, obj: dict) -> "SourceSpec":
        return cls(obj["run_id"], Variant.from_json(obj["variant"]), int(obj["count"]))


@dataclass(frozen=True)
class EnsembleSpec:
    sources: tuple[SourceSpec, ...]
    rule: str = "top"

    def __post_init__(self):
        if not self.sources:
            raise ConfigError("ensemble needs at least one source")
        if any(s.count < 0 for s in self.sources):
            raise ConfigError("member counts must be nonnegative")
        if self.size < 1:
            raise ConfigError("ensemble needs at least one member")
        if self.rule not in RULES:
            raise ConfigError(f"unknown selection rule {self.rule!r}")

    @property
    def size(self) -> int:
        return sum(s.count for s in self.sources)

    def __str__(self) -> str:
        return "+".join(f"{s.run_id}({s.count})" for s in self.sources)

    @classmethod
    def parse(cls, text: str, variants: Mapping[str, Variant] | None = None, rule: str = "top") -> "EnsembleSpec":
        """Parse ``LSTM(6)+DLY(7)+INV(7)``; run ids map to variants via ``variants`` or the default tags."""
        sources = []
        for part in text.replace(" ", "").split("+"):
            m = _SOURCE_RE.match(part)
            if not m:
                raise ConfigError(f"bad ensemble term {part!r}")
            run_id, count = m.group(1), int(m.group(2))
            if variants is not None and run_id in variants:
                variant = variants[run_id]
            elif run_id in _TAG_KIND and _TAG_KIND[run_id] != "delay":
                variant = Variant(_TAG_KIND[run_id])
            else:
                raise ConfigError(f"no variant known for ensemble source {run_id!r}")
            sources.append(SourceSpec(run_id, variant, count))
        return cls(tuple(sources), rule)

    def to_json(self) -> dict:
        return {"sources": [s.to_json() for s in self.sources], "rule": self.rule, "size": self.size}

    @classmethod
    def from_json(cls, obj: dict) -> "EnsembleSpec":
        spec = cls(tuple(SourceSpec.from_json(s) for s in obj["sources"]), obj.get("rule", "top"))
        if "size" in obj and obj["size"] != spec.size:
            raise ConfigError(f"ensemble size {obj['size']} != sum of member counts {spec.size}")
        return spec


@dataclass
class FusedPredictor:
    members: list[tuple[Variant, EpochSnapshot]]

    def predict(self, recordings: Sequence[Recording]) -> list[ProbSeries]:
        per_member = [evaluate_model(snap.params, recordings, variant) for variant, snap in self.members]
        return [fuse_scores([series[i] for series in per_member]) for i in range(len(recordings))]


def build_multi_source(spec: EnsembleSpec, runs: Mapping[str, Sequence[EpochSnapshot]]) -> FusedPredictor:
    members = []
    for src in spec.sources:
        if src.count == 0:
            continue
        snaps = runs.get(src.run_id)
        if snaps is None:
            raise ConfigError(f"no training run named {src.run_id!r}")
        if len(snaps) < src.count:
            raise ConfigError(f"run {src.run_id!r} has {len(snaps)} snapshots, {src.count} requested")
        members.extend((src.variant, s) for s in select_bagged(snaps, src.count, spec.rule))
    return FusedPredictor(members)
