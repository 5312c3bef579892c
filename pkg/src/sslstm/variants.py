"""Delay and inverse training strategies.

Both leave the network untouched and only rearrange data:

* delay: the target of input step ``s`` is the label of ``s - delta``; at
  inference the prediction emitted at step ``s`` belongs to timestamp
  ``s - delta`` and the last ``delta`` timestamps have no prediction.
* inverse: the network is trained and run on time-reversed recordings and
  its outputs are reversed back, so timestamp ``t`` is predicted from
  ``x_t`` and the state accumulated over ``x_T .. x_{t+1}``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Recording
from .errors import ConfigError, ShapeError


@dataclass
class ProbSeries:
    probs: np.ndarray  # (T, C)
    valid: np.ndarray  # (T,) bool

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.probs.ndim != 2 or self.valid.shape != (self.probs.shape[0],):
            raise ShapeError(f"probs {self.probs.shape} and valid {self.valid.shape} disagree")

    def __len__(self) -> int:
        return self.probs.shape[0]

    def predictions(self) -> np.ndarray:
        """Arg-max class per timestamp (meaningful only where valid)."""
        return np.argmax(self.probs, axis=1)


@dataclass(frozen=True)
class DelaySpec:
    delta_seconds: float
    sample_rate: float

    @property
    def delta_samples(self) -> int:
        return delta_to_samples(self.delta_seconds, self.sample_rate)


def delta_to_samples(delta_seconds: float, sample_rate: float) -> int:
    """Round ``delta_seconds * sample_rate`` half away from zero."""
    if delta_seconds < 0 or sample_rate < 0:
        raise ValueError("delay and sample rate must be nonnegative")
    return int(math.floor(delta_seconds * sample_rate + 0.5))


_VARIANT_RE = re.compile(r"^(standard|inverse|delay)(?::(\d+)|@([0-9.]+)s)?$")


@dataclass(frozen=True)
class Variant:
    """Training strategy. A delay is given in samples or in seconds (resolved later)."""

    kind: str = "standard"
    delta_samples: int | None = None
    delta_seconds: float | None = None

    def __post_init__(self):
        if self.kind not in ("standard", "delay", "inverse"):
            raise ConfigError(f"unknown variant {self.kind!r}")
        if self.kind == "delay" and self.delta_samples is None and self.delta_seconds is None:
            raise ConfigError("delay variant needs delta_samples or delta_seconds")

    @classmethod
    def standard(cls) -> "Variant":
        return cls("standard")

    @classmethod
    def inverse(cls) -> "Variant":
        return cls("inverse")

    @classmethod
    def delay(cls, samples: int | None = None, seconds: float | None = None) -> "Variant":
        return cls("delay", samples, seconds)

    def resolve(self, sample_rate: float) -> "Variant":
        if self.kind != "delay" or self.delta_samples is not None:
            return self
        return replace(self, delta_samples=delta_to_samples(self.delta_seconds, sample_rate))

    @property
    def delta(self) -> int:
        if self.kind != "delay":
            return 0
        if self.delta_samples is None:
            raise ConfigError("delay in seconds not resolved to samples yet")
        return self.delta_samples

    def __str__(self) -> str:
        if self.kind != "delay":
            return self.kind
        if self.delta_samples is not None:
            return f"delay:{self.delta_samples}"
        return f"delay@{self.delta_seconds}s"

    @classmethod
    def parse(cls, text: str) -> "Variant":
        """``standard``, ``inverse``, ``delay:15`` (samples) or ``delay@0.5s``."""
        m = _VARIANT_RE.match(text.strip())
        if not m:
            raise ConfigError(f"bad variant {text!r}")
        kind, samples, seconds = m.groups()
        if kind == "delay":
            return cls.delay(int(samples) if samples else None, float(seconds) if seconds else None)
        if samples or seconds:
            raise ConfigError(f"{kind} takes no delay: {text!r}")
        return cls(kind)

    def to_json(self) -> dict:
        return {"kind": self.kind, "delta_samples": self.delta_samples, "delta_seconds": self.delta_seconds}

    @classmethod
    def from_json(cls, obj) -> "Variant":
        if isinstance(obj, str):
            return cls.parse(obj)
        return cls(obj["kind"], obj.get("delta_samples"), obj.get("delta_seconds"))


def delay_targets(labels: np.ndarray, delta_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Shift labels ``delta`` steps later; the first ``delta`` steps have no target."""
    labels = np.asarray(labels, dtype=np.int64)
    t_len = len(labels)
    if delta_samples < 0 or delta_samples >= t_len:
        raise ValueError(f"delay {delta_samples} must lie in [0, {t_len})")
    targets = np.zeros(t_len, dtype=np.int64)
    mask = np.zeros(t_len, dtype=bool)
    targets[delta_samples:] = labels[: t_len - delta_samples]
    mask[delta_samples:] = True
    return targets, mask


def align_delayed(raw_probs: np.ndarray, delta_samples: int) -> ProbSeries:
    """Move the output of input step ``s`` to timestamp ``s - delta``; the tail becomes invalid."""
    raw_probs = np.asarray(raw_probs, dtype=np.float64)
    t_len, n_classes = raw_probs.shape
    if delta_samples == 0:
        return ProbSeries(raw_probs, np.ones(t_len, dtype=bool))
    if delta_samples >= t_len:
        raise ValueError(f"delay {delta_samples} must be shorter than the recording ({t_len})")
    probs = np.full((t_len, n_classes), 1.0 / n_classes)
    probs[: t_len - delta_samples] = raw_probs[delta_samples:]
    valid = np.zeros(t_len, dtype=bool)
    valid[: t_len - delta_samples] = True
    return ProbSeries(probs, valid)


def invert_recording(rec: Recording) -> Recording:
    return replace(
        rec,
        features=rec.features[::-1].copy(),
        labels=rec.labels[::-1].copy(),
        timestamps=None if rec.timestamps is None else rec.timestamps[::-1].copy(),
    )


def uninvert_probs(p: ProbSeries) -> ProbSeries:
    return ProbSeries(p.probs[::-1].copy(), p.valid[::-1].copy())


def align_for_fusion(series: Sequence[ProbSeries]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack members and count, per timestamp, how many have a valid prediction.

    Returns ``(stacked (M, T, C), joint_valid (T,), counts (T,))`` where a
    timestamp is jointly valid when at least one member is valid there.
    """
    if not series:
        raise ValueError("no members to align")
    shape = series[0].probs.shape
    for s in series:
        if s.probs.shape != shape:
            raise ShapeError(f"member shape {s.probs.shape} != {shape}")
    stacked = np.stack([s.probs for s in series])
    valid = np.stack([s.valid for s in series])
    counts = valid.sum(axis=0)
    return stacked, counts > 0, counts
