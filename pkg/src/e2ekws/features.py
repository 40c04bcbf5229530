"""Acoustic frontend: MFCC extraction, context stacking and feature files."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

FEATURE_MAGIC = b"KWSF"
FEATURE_VERSION = 1
FRAME_HOP_SEC = 0.010


class FeatureError(ValueError):
    """Raised for invalid audio or malformed feature files."""


class EmptyInputError(FeatureError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate <= 0:
            raise FeatureError("sample_rate must be positive")


@dataclass
class MfccConfig:
    window_sec: float = 0.025
    hop_sec: float = 0.010
    n_fft: int = 512
    n_mels: int = 40
    n_ceps: int = 13
    preemphasis: float = 0.97
    log_floor: float = 1e-10
    low_hz: float = 0.0
    high_hz: float | None = None
    cmn: bool = False


@dataclass
class FrameFeatures:
    frames: np.ndarray
    frame_hop: float = FRAME_HOP_SEC

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=float) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, low_hz=0.0, high_hz=None):
    """Triangular filters on the mel scale, evaluated at FFT bin frequencies.

    Returns an ``(n_mels, n_fft // 2 + 1)`` matrix.
    """
    high_hz = sample_rate / 2 if high_hz is None else high_hz
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (centre - lower)
    falling = (upper - bins) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(x, frame_len, hop):
    n_frames = (len(x) - frame_len) // hop + 1
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def compute_mfcc(audio: AudioBuffer, config: MfccConfig | None = None) -> np.ndarray:
    """Return a ``T x n_ceps`` MFCC matrix for ``audio``.

    Pipeline per frame: pre-emphasis, Hann window, power spectrum, mel
    filterbank, floored log, orthonormal DCT-II truncated to ``n_ceps``.
    """
    config = config or MfccConfig()
    if config.n_mels < config.n_ceps:
        raise FeatureError("n_mels must be >= n_ceps")
    x = np.asarray(audio.samples, dtype=np.float64)
    if x.ndim != 1:
        raise FeatureError("audio must be mono")
    if not np.all(np.isfinite(x)):
        raise FeatureError("audio contains non-finite samples")
    frame_len = int(round(config.window_sec * audio.sample_rate))
    hop = int(round(config.hop_sec * audio.sample_rate))
    if len(x) < frame_len:
        raise EmptyInputError(
            f"audio has {len(x)} samples, shorter than one {frame_len}-sample window"
        )
    if frame_len > config.n_fft:
        raise FeatureError("n_fft smaller than the analysis window")

    emphasized = np.empty_like(x)
    emphasized[0] = x[0]
    emphasized[1:] = x[1:] - config.preemphasis * x[:-1]

    frames = frame_signal(emphasized, frame_len, hop) * np.hanning(frame_len)
    power = np.abs(np.fft.rfft(frames, n=config.n_fft, axis=1)) ** 2 / config.n_fft
    fbank = mel_filterbank(
        config.n_mels, config.n_fft, audio.sample_rate, config.low_hz, config.high_hz
    )
    log_energy = np.log(np.maximum(power @ fbank.T, config.log_floor))
    ceps = dct(log_energy, type=2, norm="ortho", axis=1)[:, : config.n_ceps]
    if config.cmn:
        ceps = ceps - ceps.mean(axis=0, keepdims=True)
    return ceps


def stack_context(mfcc: np.ndarray, delta: int = 9) -> FrameFeatures:
    """Concatenate rows ``t - delta .. t + delta`` for every frame ``t``.

    Rows outside the utterance are replaced by the nearest edge row, so the
    output keeps the input's row count.
    """
    mfcc = np.asarray(mfcc)
    if mfcc.ndim != 2 or mfcc.shape[0] < 1:
        raise FeatureError("expected a non-empty T x D matrix")
    if delta < 0:
        raise FeatureError("delta must be non-negative")
    T = mfcc.shape[0]
    offsets = np.arange(-delta, delta + 1)
    idx = np.clip(np.arange(T)[:, None] + offsets[None, :], 0, T - 1)
    return FrameFeatures(mfcc[idx].reshape(T, -1))


def read_wav(path) -> AudioBuffer:
    """Read a mono 16-bit PCM, 16 kHz RIFF file."""
    with wave.open(str(path), "rb") as w:
        if w.getcomptype() != "NONE":
            raise FeatureError(f"{path}: compressed WAV not supported")
        if w.getnchannels() != 1:
            raise FeatureError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise FeatureError(f"{path}: expected 16-bit PCM")
        if w.getframerate() != 16000:
            raise FeatureError(f"{path}: sample rate {w.getframerate()} Hz, need 16000 (no resampling)")
        data = w.readframes(w.getnframes())
    return AudioBuffer(np.frombuffer(data, dtype="<i2").copy(), 16000)


def write_wav(path, audio: AudioBuffer) -> None:
    samples = np.asarray(audio.samples)
    if samples.dtype != np.int16:
        samples = np.clip(np.round(samples), -32768, 32767).astype(np.int16)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(samples.astype("<i2").tobytes())


def write_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise FeatureError("features must be a 2-D matrix")
    T, d = frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, T, d))
        f.write(np.ascontiguousarray(frames).tobytes())


def read_features(path) -> np.ndarray:
    """Load a feature dump as a float32 ``T x d`` matrix."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise FeatureError(f"{path}: not a KWSF feature file")
    version, T, d = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise FeatureError(f"{path}: unsupported feature file version {version}")
    if len(raw) != 16 + 4 * T * d:
        raise FeatureError(f"{path}: truncated feature file")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(T, d).copy()
