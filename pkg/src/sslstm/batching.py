"""Stateful mini-batching with hyper-parameters drawn as random variables.

The training recordings are concatenated into one timeline which is cut
into ``B`` contiguous, near-equal lanes. Lane ``j`` always continues where
it stopped in the previous batch, so LSTM state can be carried from one
window to the next. A window never straddles two recordings: it is cut at
the boundary, the remainder is masked, and the lane resets its state at the
start of the next recording.

Randomized per epoch: batch size and lane start offsets. Randomized per
batch: window length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .data import Recording
from .errors import ConfigError
from .numcore import RngStream, stream_id


@dataclass
class HypavConfig:
    window_len_range: tuple[float, float] = (0.5, 2.0)  # seconds
    batch_size_choices: tuple[int, ...] = (64, 128, 256)
    resample_offsets: bool = True
    fixed_window_len: float | None = None  # seconds
    fixed_batch_size: int | None = None

    def __post_init__(self):
        lo, hi = self.window_len_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid window length range {self.window_len_range}")
        if not self.batch_size_choices or min(self.batch_size_choices) < 1:
            raise ConfigError("batch_size_choices must be nonempty positive counts")
        if self.fixed_window_len is not None and self.fixed_window_len <= 0:
            raise ConfigError("fixed_window_len must be positive")
        if self.fixed_batch_size is not None and self.fixed_batch_size < 1:
            raise ConfigError("fixed_batch_size must be positive")

    @classmethod
    def fixed(cls, window_len: float = 1.0, batch_size: int = 128) -> "HypavConfig":
        """Constant window length and batch size, no offset resampling."""
        return cls(
            window_len_range=(window_len, window_len),
            batch_size_choices=(batch_size,),
            resample_offsets=False,
            fixed_window_len=window_len,
            fixed_batch_size=batch_size,
        )

    def max_window_seconds(self) -> float:
        return self.fixed_window_len if self.fixed_window_len is not None else self.window_len_range[1]

    def to_json(self) -> dict:
        return {
            "window_len_range": list(self.window_len_range),
            "batch_size_choices": list(self.batch_size_choices),
            "resample_offsets": self.resample_offsets,
            "fixed_window_len": self.fixed_window_len,
            "fixed_batch_size": self.fixed_batch_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HypavConfig":
        obj = dict(obj)
        if "window_len_range" in obj:
            obj["window_len_range"] = tuple(obj["window_len_range"])
        if "batch_size_choices" in obj:
            obj["batch_size_choices"] = tuple(obj["batch_size_choices"])
        return cls(**obj)


@dataclass
class Batch:
    X: np.ndarray  # (B, L, D), zero where masked
    Y: np.ndarray  # (B, L) class ids, 0 where masked
    reset_flags: np.ndarray  # (B,) zero the lane's state before this batch
    loss_mask: np.ndarray  # (B, L)
    positions: np.ndarray  # (B, L) index into the concatenated timeline, -1 for padding


def seconds_to_samples(seconds: float, sample_rate: float) -> int:
    return max(1, int(math.floor(seconds * sample_rate + 0.5)))


def stateful_batches(
    recordings: Sequence[Recording],
    hypav: HypavConfig,
    epoch_seed: int,
    epoch_index: int,
    targets: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
) -> Iterator[Batch]:
    """Yield the batches of one epoch.

    ``targets`` optionally replaces each recording's labels with
    ``(target_ids, target_mask)`` (used by the delay variant); masked targets
    are excluded from the loss.
    """
    if not recordings:
        raise ConfigError("no training recordings")
    rate = recordings[0].sample_rate
    if any(r.sample_rate != rate for r in recordings):
        raise ConfigError("recordings have different sample rates")
    lengths = np.array([len(r) for r in recordings])
    if seconds_to_samples(hypav.max_window_seconds(), rate) > lengths.min():
        raise ConfigError(
            f"window of {hypav.max_window_seconds()} s exceeds the shortest recording ({lengths.min()} samples)"
        )
    if targets is None:
        targets = [(r.labels, np.ones(len(r), dtype=bool)) for r in recordings]
    starts = np.concatenate([[0], np.cumsum(lengths)])
    total = int(starts[-1])
    d = recordings[0].n_channels

    rng = RngStream(epoch_seed, stream_id("hypav", epoch_index))
    if hypav.fixed_batch_size is not None:
        n_lanes = hypav.fixed_batch_size
    else:
        choices = hypav.batch_size_choices
        n_lanes = choices[rng.integer(0, len(choices) - 1)]
    if n_lanes > total:
        raise ConfigError(f"batch size {n_lanes} exceeds the {total} available samples")

    def draw_window() -> int:
        if hypav.fixed_window_len is not None:
            return seconds_to_samples(hypav.fixed_window_len, rate)
        return seconds_to_samples(rng.uniform(*hypav.window_len_range), rate)

    window = draw_window()
    lane_end = np.array([(j + 1) * total // n_lanes for j in range(n_lanes)])
    pos = np.array([j * total // n_lanes for j in range(n_lanes)])
    if hypav.resample_offsets:
        pos = pos + np.array([rng.integer(0, window - 1) for _ in range(n_lanes)])
    fresh = np.ones(n_lanes, dtype=bool)

    while np.all(pos < lane_end):
        X = np.zeros((n_lanes, window, d))
        Y = np.zeros((n_lanes, window), dtype=np.int64)
        mask = np.zeros((n_lanes, window), dtype=bool)
        positions = np.full((n_lanes, window), -1, dtype=np.int64)
        reset = fresh.copy()
        for j in range(n_lanes):
            p = int(pos[j])
            r = int(np.searchsorted(starts, p, side="right")) - 1
            local = p - int(starts[r])
            if local == 0:
                reset[j] = True
            n = min(window, int(starts[r + 1]) - p, int(lane_end[j]) - p)
            X[j, :n] = recordings[r].features[local : local + n]
            y, m = targets[r]
            Y[j, :n] = y[local : local + n]
            mask[j, :n] = m[local : local + n]
            positions[j, :n] = np.arange(p, p + n)
            pos[j] = p + n
        fresh[:] = False
        yield Batch(X, Y, reset, mask, positions)
        window = draw_window()
