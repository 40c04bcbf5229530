"""Synthetic labeled keyword corpus.

Each utterance is background babble, optional silence, one keyword (the chain
states in order, each held for a geometric number of frames), optional
silence, and more babble. Frames are 13-dim pseudo-cepstra: the mean vector of
the frame's emission source plus isotropic Gaussian noise.

Babble is a sequence of pseudo-phones drawn from distractor means and, with
probability ``babble_kw_fraction``, from keyword-state means. Babble may also
contain partial keywords (a prefix or suffix of the chain) and swapped keywords
(second half before first half). All babble frames are labeled background, so
identical acoustics carry different labels depending on context.

Keyword-state labels are exact by default. ``label_jitter`` moves each internal
state boundary by up to that many frames, and ``flat_start_labels`` splits the
keyword window evenly across the chain, as a naive first-pass aligner would.
The keyword window itself is always exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .features import read_features, write_features
from .sampling import Window

LABEL_MAGIC = b"KWSL"
LABEL_VERSION = 1


class CorpusError(ValueError):
    pass


@dataclass
class SynthConfig:
    num_states: int = 20
    keyword_chain_len: int = 18
    feature_dim: int = 13
    state_mean_separation: float = 4.0
    noise_sigma: float = 1.6
    kw_mean_dwell: float = 4.0
    silence_mean_dwell: float = 12.0
    babble_mean_dwell: float = 4.0
    silence_prob: float = 0.5
    min_frames: int = 250
    max_frames: int = 400
    n_distractors: int = 12
    babble_kw_fraction: float = 0.3
    max_confusers: int = 2
    confuser_prob: float = 0.5
    swap_fraction: float = 0.3
    label_jitter: int = 0
    flat_start_labels: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise CorpusError("noise_sigma must be positive")
        if self.keyword_chain_len > self.num_states - 2:
            raise CorpusError("keyword_chain_len must leave room for silence and background")
        if self.min_frames > self.max_frames:
            raise CorpusError("min_frames > max_frames")

    @property
    def silence_state(self) -> int:
        return self.keyword_chain_len

    @property
    def background_state(self) -> int:
        return self.keyword_chain_len + 1


@dataclass
class SynthUtterance:
    features: np.ndarray
    state_labels: np.ndarray
    keyword_window: Window
    id: str = ""
    sources: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return len(self.state_labels)


def state_means(config: SynthConfig) -> np.ndarray:
    """Emission means: keyword states, silence, then distractor phones.

    Depends only on ``config.seed``; the closest pair is exactly
    ``state_mean_separation`` apart.
    """
    rng = np.random.default_rng([config.seed, 0x5EED])
    n = config.keyword_chain_len + 1 + config.n_distractors
    g = rng.standard_normal((n, config.feature_dim))
    diff = g[:, None, :] - g[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    dist[np.diag_indices(n)] = np.inf
    return g * (config.state_mean_separation / dist.min())


def _geometric(rng, mean, size=None):
    return rng.geometric(1.0 / mean, size=size)


def _babble(rng, config, length, n_kw):
    src = np.empty(length, dtype=np.int64)
    pos = 0
    distractor0 = n_kw + 1
    while pos < length:
        dur = int(_geometric(rng, config.babble_mean_dwell))
        if rng.random() < config.babble_kw_fraction:
            phone = int(rng.integers(0, n_kw))
        else:
            phone = distractor0 + int(rng.integers(0, config.n_distractors))
        src[pos : pos + dur] = phone
        pos += dur
    return src


def _confuser(rng, config, n_kw):
    """Emission source run for a partial or swapped keyword."""
    durs = _geometric(rng, config.kw_mean_dwell, size=n_kw)
    seq = np.repeat(np.arange(n_kw), durs)
    if rng.random() < config.swap_fraction:
        cut = len(seq) // 2
        return np.r_[seq[cut:], seq[:cut]]
    keep = int(rng.integers(int(0.3 * n_kw), int(0.7 * n_kw) + 1))
    keep_frames = int(durs[:keep].sum())
    if rng.random() < 0.5:
        return seq[:keep_frames]
    return seq[len(seq) - int(durs[-keep:].sum()) :]


def _jittered_labels(rng, durs, jitter):
    """Keyword-state labels whose internal boundaries are shifted by up to
    ``jitter`` frames each, as an imperfect aligner would place them. Order is
    kept and every state keeps at least one frame."""
    n = len(durs)
    bounds = np.cumsum(durs)
    if jitter > 0 and n > 1:
        bounds[:-1] += rng.integers(-jitter, jitter + 1, size=n - 1)
        total = bounds[-1]
        for k in range(n - 1):
            lo = (bounds[k - 1] if k else 0) + 1
            bounds[k] = min(max(bounds[k], lo), total - (n - 1 - k))
    return np.repeat(np.arange(n), np.diff(np.r_[0, bounds]))


def generate_utterance(config: SynthConfig, rng, means=None, uid: str = "") -> SynthUtterance:
    means = state_means(config) if means is None else means
    n_kw = config.keyword_chain_len
    sil, bg = config.silence_state, config.background_state

    kw_durs = _geometric(rng, config.kw_mean_dwell, size=n_kw)
    kw_src = np.repeat(np.arange(n_kw), kw_durs)
    if config.flat_start_labels:
        kw_labels = (np.arange(len(kw_src)) * n_kw) // len(kw_src)
    else:
        kw_labels = _jittered_labels(rng, kw_durs, config.label_jitter)
    sil_pre = int(_geometric(rng, config.silence_mean_dwell)) if rng.random() < config.silence_prob else 0
    sil_post = int(_geometric(rng, config.silence_mean_dwell)) if rng.random() < config.silence_prob else 0
    total = int(rng.integers(config.min_frames, config.max_frames + 1))
    core = len(kw_src) + sil_pre + sil_post
    rest = max(total - core, 2)
    lead = int(rng.integers(1, rest))
    trail = rest - lead

    src_lead = _babble(rng, config, lead, n_kw)
    src_trail = _babble(rng, config, trail, n_kw)
    # confusers are pasted into babble clear of the segment edges; a later one may overwrite an earlier one
    for _ in range(config.max_confusers):
        if rng.random() >= config.confuser_prob:
            continue
        run = _confuser(rng, config, n_kw)
        segs = [s for s in (src_lead, src_trail) if len(s) >= len(run) + 2]
        if not segs:
            continue
        seg = segs[int(rng.integers(0, len(segs)))]
        at = int(rng.integers(1, len(seg) - len(run)))
        seg[at : at + len(run)] = run

    src = np.concatenate([
        src_lead,
        np.full(sil_pre, n_kw),
        kw_src,
        np.full(sil_post, n_kw),
        src_trail,
    ])
    labels = np.concatenate([
        np.full(lead, bg),
        np.full(sil_pre, sil),
        kw_labels,
        np.full(sil_post, sil),
        np.full(trail, bg),
    ]).astype(np.int64)
    noise = rng.standard_normal((len(src), config.feature_dim)) * config.noise_sigma
    feats = means[src] + noise
    kw_start = lead + sil_pre
    return SynthUtterance(feats, labels, Window(kw_start, kw_start + len(kw_src)), uid, src)


def generate_utterances(config: SynthConfig, n: int, seed: int = 0, prefix: str = "utt"):
    """``n`` utterances, each from its own RNG stream keyed by (seed, index)."""
    if n < 1:
        raise CorpusError("n must be >= 1")
    means = state_means(config)
    return [
        generate_utterance(config, np.random.default_rng([seed, i]), means, f"{prefix}{i:05d}")
        for i in range(n)
    ]


def keyword_window_from_labels(labels, first_kw: int, last_kw: int) -> Window | None:
    labels = np.asarray(labels)
    kw = np.flatnonzero((labels >= first_kw) & (labels <= last_kw))
    if kw.size == 0:
        return None
    return Window(int(kw[0]), int(kw[-1]) + 1)


def write_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise CorpusError("labels must fit in u16")
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC + struct.pack("<I", LABEL_VERSION))
        f.write(labels.astype("<u2").tobytes())


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != LABEL_MAGIC:
        raise CorpusError(f"{path}: not a KWSL label file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != LABEL_VERSION:
        raise CorpusError(f"{path}: unsupported label file version {version}")
    if (len(raw) - 8) % 2:
        raise CorpusError(f"{path}: truncated label file")
    return np.frombuffer(raw, dtype="<u2", offset=8).astype(np.int64)


def write_corpus(utterances, out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write feature and label files plus a JSON-lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w") as f:
        for utt in utterances:
            feat_rel = f"feats/{utt.id}.kwsf"
            lab_rel = f"labels/{utt.id}.kwsl"
            write_features(out_dir / feat_rel, utt.features)
            write_labels(out_dir / lab_rel, utt.state_labels)
            row = {
                "id": utt.id,
                "features_path": feat_rel,
                "labels_path": lab_rel,
                "kw_start_frame": utt.keyword_window.start,
                "kw_end_frame": utt.keyword_window.end,
            }
            f.write(json.dumps(row) + "\n")
    return manifest


def generate_corpus(config: SynthConfig, n: int, out_dir, seed: int = 0, prefix: str = "utt") -> Path:
    utts = generate_utterances(config, n, seed, prefix)
    for u in utts:
        # stored precision is what the pipeline sees after loading
        u.features = u.features.astype(np.float32)
    path = write_corpus(utts, out_dir)
    with open(Path(out_dir) / "synth_config.json", "w") as f:
        json.dump({"config": asdict(config), "n": n, "seed": seed}, f, indent=1)
    return path


def read_manifest(path) -> list[dict]:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: bad JSON ({exc.msg})") from None
    return rows


def load_corpus(manifest_path) -> list[SynthUtterance]:
    """Load every utterance listed in a manifest (paths relative to the manifest)."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    utts = []
    for row in read_manifest(manifest_path):
        feats = read_features(base / row["features_path"]).astype(np.float64)
        labels_path = row.get("labels_path")
        labels = read_labels(base / labels_path) if labels_path else None
        if labels is not None and len(labels) != len(feats):
            raise CorpusError(f"{row['id']}: {len(labels)} labels for {len(feats)} frames")
        start, end = row.get("kw_start_frame"), row.get("kw_end_frame")
        window = Window(int(start), int(end)) if start is not None and end is not None else None
        utts.append(SynthUtterance(feats, labels, window, row["id"]))
    return utts
