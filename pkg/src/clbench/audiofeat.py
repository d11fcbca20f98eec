"""Audio ingestion and features: PCM16 WAV decode, fixed-length trim/pad,
Hann STFT, HTK-mel log filterbank energies, time pooling, and a seeded
Gaussian-cluster generator used by the synthetic desk-scale streams.

Everything here is a pure function of its inputs; identical bytes in give
identical features out.
"""

from __future__ import annotations

import hashlib
import struct
import wave
from dataclasses import dataclass

import numpy as np

__all__ = [
    "WavFormatError",
    "PcmClip",
    "LogMelConfig",
    "read_wav",
    "trim_pad",
    "frame_count",
    "logmel",
    "pool",
    "extract_file",
    "sample_cluster",
    "synth_features",
    "write_feature_cache",
    "read_feature_cache",
]

FEATURE_CACHE_MAGIC = b"FEA1"

POOL_MODES = ("mean-over-time", "mean-std-over-time")


class WavFormatError(ValueError):
    """Raised for files that are not mono 16-bit PCM RIFF/WAVE."""


@dataclass
class PcmClip:
    sample_rate: int
    samples: np.ndarray  # float64 in [-1, 1]


@dataclass(frozen=True)
class LogMelConfig:
    sample_rate: int = 16000
    fft_size: int = 1024
    hop: int = 512
    mel_bins: int = 64
    fmin: float = 0.0
    fmax: float | None = None  # None -> Nyquist
    log_floor: float = 1e-10
    clip_seconds: float = 10.0

    def __post_init__(self):
        fmax = self.sample_rate / 2 if self.fmax is None else self.fmax
        object.__setattr__(self, "fmax", float(fmax))
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError("need 0 <= fmin < fmax <= sample_rate/2")
        if self.hop > self.fft_size or self.hop < 1:
            raise ValueError("need 1 <= hop <= fft_size")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be > 0")


def read_wav(path) -> PcmClip:
    """Decode a mono 16-bit PCM WAV; samples scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            comptype = wf.getcomptype()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise WavFormatError(f"{path}: not a decodable WAV file ({exc})") from exc
    if comptype != "NONE":
        raise WavFormatError(f"{path}: compressed WAV ({comptype}) not supported")
    if n_channels != 1:
        raise WavFormatError(f"{path}: expected mono, got {n_channels} channels")
    if sampwidth != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * sampwidth}-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return PcmClip(sample_rate=rate, samples=samples)


def trim_pad(clip: PcmClip, clip_seconds: float) -> PcmClip:
    """Force the clip to exactly sample_rate * clip_seconds samples.

    Long clips keep their head; short clips get trailing zeros.
    """
    if clip_seconds <= 0:
        raise ValueError("clip_seconds must be > 0")
    target = int(round(clip.sample_rate * clip_seconds))
    samples = clip.samples
    if samples.size >= target:
        samples = samples[:target].copy()
    else:
        samples = np.concatenate([samples, np.zeros(target - samples.size)])
    return PcmClip(clip.sample_rate, samples)


def frame_count(n_samples: int, fft_size: int, hop: int) -> int:
    if n_samples < fft_size:
        raise ValueError(f"clip of {n_samples} samples shorter than one {fft_size}-sample frame")
    return 1 + (n_samples - fft_size) // hop


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: LogMelConfig) -> np.ndarray:
    """Peak frequency (Hz) of each triangular filter."""
    edges = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.mel_bins + 2)
    return _mel_to_hz(edges)[1:-1]


def mel_filterbank(cfg: LogMelConfig) -> np.ndarray:
    """(mel_bins, fft_size//2 + 1) triangular filters on the HTK mel scale."""
    edges_hz = _mel_to_hz(
        np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.mel_bins + 2)
    )
    bin_hz = np.arange(cfg.fft_size // 2 + 1) * (cfg.sample_rate / cfg.fft_size)
    lower = edges_hz[:-2, None]
    center = edges_hz[1:-1, None]
    upper = edges_hz[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def logmel(clip: PcmClip, cfg: LogMelConfig) -> np.ndarray:
    """(frames, mel_bins) natural-log mel power spectrogram.

    Hann-windowed magnitude STFT, power, HTK triangular mel filterbank,
    then ln(power + log_floor); the floor keeps silence finite.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"clip sample rate {clip.sample_rate} != configured {cfg.sample_rate} "
            "(no resampling)"
        )
    n_frames = frame_count(clip.samples.size, cfg.fft_size, cfg.hop)
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(cfg.fft_size) / cfg.fft_size)
    frames = clip.samples[idx] * window
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    mel_power = power @ mel_filterbank(cfg).T
    out = np.log(mel_power + cfg.log_floor)
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite log-mel output")
    return out


def pool(features: np.ndarray, mode: str) -> np.ndarray:
    """Collapse (frames, bins) to a fixed vector: per-bin mean, optionally
    with population std appended."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.size == 0:
        raise ValueError("features must be a non-empty (frames, bins) matrix")
    if mode == "mean-over-time":
        return features.mean(axis=0)
    if mode == "mean-std-over-time":
        return np.concatenate([features.mean(axis=0), features.std(axis=0)])
    raise ValueError(f"unknown pooling mode {mode!r}; valid: {POOL_MODES}")


def pooled_dim(cfg: LogMelConfig, mode: str) -> int:
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return cfg.mel_bins * (2 if mode == "mean-std-over-time" else 1)


def extract_file(path, cfg: LogMelConfig, mode: str = "mean-over-time") -> np.ndarray:
    """WAV file to pooled feature vector: decode, trim/pad, log-mel, pool."""
    clip = read_wav(path)
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"{path}: sample rate {clip.sample_rate} != configured {cfg.sample_rate} "
            "(no resampling)"
        )
    return pool(logmel(trim_pad(clip, cfg.clip_seconds), cfg), mode)


def sample_cluster(mean, sigma: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """n isotropic-Gaussian draws around a mean feature vector."""
    if sigma <= 0:
        raise ValueError("cluster sigma must be > 0")
    if n < 1:
        raise ValueError("need n >= 1 samples")
    mean = np.asarray(mean, dtype=np.float64)
    return mean[None, :] + sigma * rng.standard_normal((n, mean.size))


def synth_features(class_means: dict, sigma: float, n_per_class: int, seed: int):
    """Labeled Gaussian features: n_per_class draws around each class mean.

    Returns (X, labels) with labels repeating the mapping's keys in insertion
    order; the same seed reproduces the sample set exactly.
    """
    rng = np.random.default_rng(seed)
    blocks, labels = [], []
    for label, mean in class_means.items():
        blocks.append(sample_cluster(mean, sigma, n_per_class, rng))
        labels.extend([label] * n_per_class)
    return np.vstack(blocks), labels


def cache_key(*parts: bytes) -> bytes:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part)
    return digest.digest()


def write_feature_cache(path, key: bytes, features: np.ndarray) -> None:
    """FEA1 cache: magic, 32-byte key hash, count, dim, f32 little-endian."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("feature cache expects a (count, dim) matrix")
    if len(key) != 32:
        raise ValueError("cache key must be a 32-byte digest")
    with open(path, "wb") as fh:
        fh.write(FEATURE_CACHE_MAGIC)
        fh.write(key)
        fh.write(struct.pack("<II", features.shape[0], features.shape[1]))
        fh.write(features.astype("<f4").tobytes())


def read_feature_cache(path, expected_key: bytes):
    """Load a FEA1 cache; returns None when the key hash does not match."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURE_CACHE_MAGIC:
        raise ValueError(f"{path}: bad feature cache magic")
    key = blob[4:36]
    if key != expected_key:
        return None
    count, dim = struct.unpack_from("<II", blob, 36)
    data = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=44)
    return data.reshape(count, dim).astype(np.float64)
