"""Synthetic sporadic-activity datasets.

Background is white Gaussian noise. Events of class ``c`` (``c >= 1``; 0 is
the null class) add a cosine burst at ``2 + c`` Hz onto channels
``c mod D`` and ``(c + 1) mod D``. The burst envelope is a Hann window
raised to a floor of one half, so the first and last samples of an event
are visible above the noise.

Per-class label modes decide which samples carry the class label:

* ``onset``            -- the event itself
* ``pre_onset(k)``     -- the ``k`` samples just before the event starts
* ``post_offset(k)``   -- the ``k`` samples just after it ends

Pre-onset labels can only be recovered by a model that sees the future,
post-offset labels by one that remembers the past.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, Recording
from .errors import ConfigError
from .numcore import RngStream

_MODE_RE = re.compile(r"^(onset|pre_onset|post_offset)(?:\((\d+)\))?$")


@dataclass(frozen=True)
class LabelMode:
    kind: str = "onset"
    k: int = 0

    @classmethod
    def parse(cls, spec: "str | LabelMode") -> "LabelMode":
        if isinstance(spec, LabelMode):
            return spec
        m = _MODE_RE.match(spec.replace(" ", ""))
        if not m:
            raise ConfigError(f"bad label mode {spec!r}")
        kind, k = m.group(1), int(m.group(2) or 0)
        if kind != "onset" and k < 1:
            raise ConfigError(f"{kind} needs a positive sample count, e.g. {kind}(5)")
        return cls(kind, k)

    def __str__(self) -> str:
        return self.kind if self.kind == "onset" else f"{self.kind}({self.k})"


@dataclass
class SyntheticConfig:
    n_channels: int = 3
    n_classes: int = 3
    n_recordings: int = 20
    length: int = 3000
    sample_rate: float = 30.0
    event_rate: float = 0.5  # events per second
    event_len: tuple[int, int] = (20, 40)  # samples
    noise_sd: float = 0.1
    amplitude: float = 1.0
    # one mode for every event class, or a list with one entry per event class
    label_modes: str | list[str] = "onset"
    class_weights: list[float] | None = None
    n_subjects: int | None = None

    def modes(self) -> list[LabelMode]:
        n_events = self.n_classes - 1
        raw = self.label_modes
        if isinstance(raw, (str, LabelMode)):
            raw = [raw] * n_events
        if len(raw) != n_events:
            raise ConfigError(f"{len(raw)} label modes for {n_events} event classes")
        return [LabelMode.parse(m) for m in raw]

    def weights(self) -> np.ndarray:
        w = np.ones(self.n_classes - 1) if self.class_weights is None else np.asarray(self.class_weights, float)
        if len(w) != self.n_classes - 1 or (w < 0).any() or w.sum() <= 0:
            raise ConfigError("class_weights needs one nonnegative weight per event class")
        return w / w.sum()

    def guard(self) -> int:
        """Minimum spacing between consecutive events (holds both label spans plus a quiet margin)."""
        return 2 * max(m.k for m in self.modes()) + 4

    def mean_gap(self) -> float:
        """Mean extra spacing between events beyond the guards and the event itself."""
        lo, hi = self.event_len
        return self.sample_rate / self.event_rate - self.guard() - (lo + hi) / 2.0

    def validate(self) -> None:
        if self.n_classes < 2 or self.n_channels < 1:
            raise ConfigError("need at least two classes and one channel")
        if self.n_recordings < 1 or self.length < 1:
            raise ConfigError("need at least one non-empty recording")
        lo, hi = self.event_len
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid event length range {self.event_len}")
        if self.noise_sd < 0 or self.event_rate < 0:
            raise ConfigError("noise_sd and event_rate must be nonnegative")
        self.modes()
        self.weights()
        if self.event_rate > 0:
            if self.mean_gap() < 0:
                raise ConfigError(
                    f"event rate {self.event_rate}/s cannot be packed: events need "
                    f"{self.guard() + (lo + hi) / 2:.1f} samples each"
                )
            if self.length < 2 * self.guard() + hi:
                raise ConfigError("recordings too short to hold a single event")

    def to_json(self) -> dict:
        d = asdict(self)
        d["event_len"] = list(self.event_len)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticConfig":
        obj = dict(obj)
        if "event_len" in obj:
            obj["event_len"] = tuple(obj["event_len"])
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic config keys {sorted(unknown)}")
        return cls(**obj)


def event_waveform(c: int, length: int, sample_rate: float, amplitude: float = 1.0) -> np.ndarray:
    n = np.arange(length)
    hann = np.sin(np.pi * n / (length - 1)) ** 2 if length > 1 else np.ones(1)
    envelope = 0.5 + 0.5 * hann
    return amplitude * envelope * np.cos(2 * np.pi * (2 + c) * n / sample_rate)


def event_channels(c: int, n_channels: int) -> list[int]:
    return sorted({c % n_channels, (c + 1) % n_channels})


def expected_class_priors(cfg: SyntheticConfig) -> np.ndarray:
    """Long-run label frequencies implied by the configuration."""
    cfg.validate()
    priors = np.zeros(cfg.n_classes)
    if cfg.event_rate == 0:
        priors[0] = 1.0
        return priors
    per_sample = cfg.event_rate / cfg.sample_rate
    lo, hi = cfg.event_len
    for c, (mode, w) in enumerate(zip(cfg.modes(), cfg.weights()), start=1):
        span = (lo + hi) / 2.0 if mode.kind == "onset" else mode.k
        priors[c] = per_sample * w * span
    priors[0] = 1.0 - priors[1:].sum()
    return priors


def _make_recording(cfg: SyntheticConfig, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    t_len, d = cfg.length, cfg.n_channels
    x = rng.normal_array(0.0, cfg.noise_sd, t_len * d).reshape(t_len, d)
    y = np.zeros(t_len, dtype=np.int64)
    if cfg.event_rate == 0:
        return x, y
    modes = cfg.modes()
    cum_w = np.cumsum(cfg.weights())
    guard = cfg.guard()
    mean_gap = cfg.mean_gap()
    lo, hi = cfg.event_len
    pos = 0
    while True:
        extra = -mean_gap * math.log(1.0 - rng.uniform()) if mean_gap > 0 else 0.0
        start = pos + guard + int(extra + 0.5)
        length = rng.integer(lo, hi)
        c = 1 + int(np.searchsorted(cum_w, rng.uniform(), side="right"))
        c = min(c, cfg.n_classes - 1)
        if start + length + guard > t_len:
            break
        wave = event_waveform(c, length, cfg.sample_rate, cfg.amplitude)
        for ch in event_channels(c, d):
            x[start : start + length, ch] += wave
        mode = modes[c - 1]
        if mode.kind == "onset":
            y[start : start + length] = c
        elif mode.kind == "pre_onset":
            y[start - mode.k : start] = c
        else:
            y[start + length : start + length + mode.k] = c
        pos = start + length
    return x, y


def make_synthetic(cfg: SyntheticConfig, seed: int) -> Dataset:
    """Generate a dataset fully determined by ``(cfg, seed)``."""
    cfg.validate()
    n_subjects = cfg.n_subjects or cfg.n_recordings
    recs = []
    for i in range(cfg.n_recordings):
        rng = RngStream(seed, "synthetic").split("recording", i)
        x, y = _make_recording(cfg, rng)
        subject = str(i % n_subjects + 1)
        run = str(i // n_subjects + 1)
        recs.append(Recording(f"subject{subject}_run{run}", subject, run, x, y, float(cfg.sample_rate)))
    names = ["null"] + [f"event{c}" for c in range(1, cfg.n_classes)]
    return Dataset(recs, names, 0, float(cfg.sample_rate))
