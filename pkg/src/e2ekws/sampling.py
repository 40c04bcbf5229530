"""IOU-based positive/negative window sampling, swap augmentation and hard-negative mining."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Window:
    """Half-open frame interval ``[start, end)``."""

    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid window [{self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start


@dataclass
class SampledExample:
    window: Window
    positive: bool
    source: str = "sampled"  # or "swap_augmented"
    split: int | None = None
    frames: np.ndarray | None = None
    utt_index: int | None = None

    def frame_order(self) -> np.ndarray:
        """Utterance frame indices making up this example, in presentation order."""
        w = self.window
        if self.source == "swap_augmented":
            return np.r_[np.arange(self.split, w.end), np.arange(w.start, self.split)]
        return np.arange(w.start, w.end)


def iou(g: Window, w: Window) -> float:
    inter = max(0, min(g.end, w.end) - max(g.start, w.start))
    union = max(g.end, w.end) - min(g.start, w.start)
    return inter / union


def _slice(frames, example):
    return None if frames is None else frames[example.frame_order()]


def sample_positive(gt: Window, num_frames: int, rng, iou_p: float = 0.95,
                    max_attempts: int = 100, frames=None) -> SampledExample:
    """Jitter both ends of ``gt``; the exact window is the fallback.

    Jitter range per end is the largest shift that alone keeps IOU >= iou_p,
    i.e. ``floor(len * (1 - iou_p))`` for shrinking and
    ``floor(len * (1/iou_p - 1))`` for growing.
    """
    n = len(gt)
    grow = int(np.floor(n * (1.0 / iou_p - 1.0) + 1e-9))
    shrink = int(np.floor(n * (1.0 - iou_p) + 1e-9))
    slack = max(grow, shrink)
    for _ in range(max_attempts):
        if slack == 0:
            break
        ds, de = rng.integers(-slack, slack + 1, size=2)
        start, end = gt.start + int(ds), gt.end + int(de)
        if start < 0 or end > num_frames or end <= start:
            continue
        w = Window(start, end)
        if iou(gt, w) >= iou_p:
            ex = SampledExample(w, True)
            ex.frames = _slice(frames, ex)
            return ex
    ex = SampledExample(gt, True)
    ex.frames = _slice(frames, ex)
    return ex


def sample_negatives(gt: Window, num_frames: int, rng, max_count: int = 20,
                     iou_n: float = 0.5, max_attempts: int = 400,
                     length_range=(0.5, 1.5), min_length: int = 1,
                     frames=None) -> list[SampledExample]:
    """Random windows with IOU <= iou_n and length in ``(lo, hi]`` x the keyword length.

    The lower bound is exclusive so a keyword filling the whole utterance
    yields no negatives.
    """
    out = []
    n = len(gt)
    lo = max(min_length, int(np.floor(length_range[0] * n + 1e-9)) + 1)
    hi = int(np.floor(length_range[1] * n))
    for _ in range(max_attempts):
        if len(out) >= max_count:
            break
        length = int(rng.integers(lo, hi + 1)) if hi >= lo else lo
        if length > num_frames:
            continue
        start = int(rng.integers(0, num_frames - length + 1))
        w = Window(start, start + length)
        if iou(gt, w) <= iou_n:
            ex = SampledExample(w, False)
            ex.frames = _slice(frames, ex)
            out.append(ex)
    return out


def swap_augment(gt: Window, rng, count: int = 10, jitter: float = 0.1,
                 frames=None) -> list[SampledExample]:
    """Split ``gt`` near its middle and swap the halves, ``count`` times."""
    n = len(gt)
    if n < 2:
        return []
    max_shift = int(np.floor(jitter * n))
    mid = gt.start + n // 2
    out = []
    for _ in range(count):
        split = mid + int(rng.integers(-max_shift, max_shift + 1))
        split = min(max(split, gt.start + 1), gt.end - 1)
        ex = SampledExample(gt, False, "swap_augmented", split)
        ex.frames = _slice(frames, ex)
        out.append(ex)
    return out


def mine_hard_negatives(losses, rng, n_hard: int = 50, n_rand: int = 50) -> list:
    """Keep the ``n_hard`` highest-loss items plus ``n_rand`` random others.

    ``losses`` is a list of ``(example, loss)`` pairs. Ties in loss keep the
    original order. Selected items are returned as ``(example, loss)`` pairs,
    hard ones first.
    """
    if not losses:
        return []
    values = np.array([loss for _, loss in losses], dtype=np.float64)
    order = np.argsort(-values, kind="stable")
    hard = order[:n_hard]
    rest = order[n_hard:]
    k = min(n_rand, len(rest))
    rand = rng.choice(rest, size=k, replace=False) if k else np.array([], dtype=int)
    return [losses[i] for i in list(hard) + list(np.sort(rand))]
