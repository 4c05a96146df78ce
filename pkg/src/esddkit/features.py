"""MEL, CQT and gammatone (GAM) log-power spectrograms plus the .feat file format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from . import SAMPLE_RATE
from .audio import AudioClip
from .errors import BadFeatureFile, BandOverflow, ConfigMismatch

KINDS = ("MEL", "CQT", "GAM")
FEAT_MAGIC = b"ESDDFEAT"
VARIANCE_FLOOR = 1e-8
GAMMATONE_ORDER = 4


@dataclass(frozen=True)
class SpectrogramConfig:
    kind: str = "GAM"
    n_bands: int = 64
    window_len: int = 400
    hop_len: int = 160
    f_min: float = 50.0
    f_max: float = 8000.0
    bins_per_octave: int = 12
    log_floor: float = 1e-10
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigMismatch(f"unknown spectrogram kind {self.kind!r}")
        for name in ("n_bands", "window_len", "hop_len", "bins_per_octave", "sample_rate"):
            if getattr(self, name) <= 0:
                raise ConfigMismatch(f"{name} must be positive")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ConfigMismatch(
                f"need 0 <= f_min < f_max <= {self.sample_rate / 2}, got {self.f_min}, {self.f_max}"
            )
        if self.hop_len > self.window_len:
            raise ConfigMismatch("hop_len must not exceed window_len")
        if self.log_floor <= 0:
            raise ConfigMismatch("log_floor must be positive")

    @property
    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop_len + 1


def default_config(kind: str, **overrides) -> SpectrogramConfig:
    """Default geometry per kind: 25 ms window, 10 ms hop, 64 bands; CQT 84 bands from C1."""
    kind = kind.upper()
    if kind == "CQT":
        base = SpectrogramConfig(kind="CQT", n_bands=84, f_min=32.7, bins_per_octave=12)
    else:
        base = SpectrogramConfig(kind=kind)
    return replace(base, **overrides)


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray
    kind: str
    config_hash: str

    @property
    def n_bands(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _frames(clip: AudioClip, cfg: SpectrogramConfig) -> np.ndarray:
    n = clip.samples.shape[0]
    if cfg.window_len > n:
        raise ConfigMismatch(f"window_len {cfg.window_len} exceeds clip length {n}")
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigMismatch(
            f"clip rate {clip.sample_rate} differs from config rate {cfg.sample_rate}"
        )
    return sliding_window_view(clip.samples, cfg.window_len)[:: cfg.hop_len]


def stft_power(clip: AudioClip, cfg: SpectrogramConfig) -> np.ndarray:
    """Hann-windowed |STFT|^2, shape (window_len // 2 + 1, n_frames)."""
    frames = _frames(clip, cfg)
    window = get_window("hann", cfg.window_len)
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real**2 + spec.imag**2).T


def fft_frequencies(cfg: SpectrogramConfig) -> np.ndarray:
    return np.arange(cfg.window_len // 2 + 1) * cfg.sample_rate / cfg.window_len


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def erb_rate(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f))


def erb_rate_to_hz(e):
    return (10.0 ** (np.asarray(e) / 21.4) - 1.0) / 0.00437


def erb_bandwidth(f):
    return 24.7 * (4.37 * np.asarray(f) / 1000.0 + 1.0)


def band_centers(cfg: SpectrogramConfig) -> np.ndarray:
    """Center frequency (Hz) of every band of ``cfg``."""
    if cfg.kind == "MEL":
        edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_bands + 2))
        return edges[1:-1]
    if cfg.kind == "GAM":
        return erb_rate_to_hz(np.linspace(erb_rate(cfg.f_min), erb_rate(cfg.f_max), cfg.n_bands))
    return cfg.f_min * 2.0 ** (np.arange(cfg.n_bands) / cfg.bins_per_octave)


@lru_cache(maxsize=32)
def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """Triangular mel filters, each row normalised to unit area.

    A filter narrower than the FFT bin spacing collapses onto the nearest bin
    so that no row is empty.
    """
    freqs = fft_frequencies(cfg)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_bands + 2))
    fb = np.zeros((cfg.n_bands, freqs.size))
    for k in range(cfg.n_bands):
        lo, mid, hi = edges[k : k + 3]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[k] = np.maximum(0.0, np.minimum(up, down))
        if fb[k].sum() <= 0:
            fb[k, np.argmin(np.abs(freqs - mid))] = 1.0
    return fb / fb.sum(axis=1, keepdims=True)


@lru_cache(maxsize=32)
def gammatone_weights(cfg: SpectrogramConfig) -> np.ndarray:
    """Magnitude response of 4th-order gammatone filters sampled at the FFT bins."""
    freqs = fft_frequencies(cfg)
    centers = band_centers(cfg)
    bw = 1.019 * erb_bandwidth(centers)
    x = (freqs[None, :] - centers[:, None]) / bw[:, None]
    return (1.0 + x**2) ** (-GAMMATONE_ORDER / 2.0)


@lru_cache(maxsize=32)
def cqt_kernels(cfg: SpectrogramConfig) -> np.ndarray:
    """Spectral CQT kernels, shape (n_bands, window_len), complex.

    Each temporal kernel is a Hann-windowed complex exponential of length
    Q * sr / f_k (capped at the frame length), centred in the frame and
    normalised to unit gain at its own centre frequency.
    """
    nyquist = cfg.sample_rate / 2
    centers = band_centers(cfg)
    if centers[-1] >= nyquist:
        raise BandOverflow(
            f"top CQT band {centers[-1]:.1f} Hz reaches Nyquist {nyquist:.0f} Hz"
        )
    q = 1.0 / (2.0 ** (1.0 / cfg.bins_per_octave) - 1.0)
    n = cfg.window_len
    kernels = np.zeros((cfg.n_bands, n), dtype=np.complex128)
    for k, fk in enumerate(centers):
        length = min(n, int(np.ceil(q * cfg.sample_rate / fk)))
        win = get_window("hann", length)
        t = np.arange(length) - (length - 1) / 2.0
        start = (n - length) // 2
        kernels[k, start : start + length] = (
            win * np.exp(2j * np.pi * fk * t / cfg.sample_rate) / win.sum()
        )
    return np.fft.fft(kernels, axis=1)


def _log_floor(power: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    return np.log(np.maximum(power, cfg.log_floor))


def _check_kind(cfg: SpectrogramConfig, kind: str) -> None:
    if cfg.kind != kind:
        raise ConfigMismatch(f"expected a {kind} config, got {cfg.kind}")


def mel_spectrogram(clip: AudioClip, cfg: SpectrogramConfig) -> Spectrogram:
    _check_kind(cfg, "MEL")
    power = mel_filterbank(cfg) @ stft_power(clip, cfg)
    return Spectrogram(_log_floor(power, cfg), "MEL", cfg.config_hash)


def gam_spectrogram(clip: AudioClip, cfg: SpectrogramConfig) -> Spectrogram:
    _check_kind(cfg, "GAM")
    power = gammatone_weights(cfg) @ stft_power(clip, cfg)
    return Spectrogram(_log_floor(power, cfg), "GAM", cfg.config_hash)


def cqt_spectrogram(clip: AudioClip, cfg: SpectrogramConfig) -> Spectrogram:
    _check_kind(cfg, "CQT")
    kernels = cqt_kernels(cfg)
    spectrum = np.fft.fft(_frames(clip, cfg), axis=1)
    # Parseval: <x, k> = <X, K> / N
    coeffs = spectrum @ kernels.conj().T / cfg.window_len
    power = (coeffs.real**2 + coeffs.imag**2).T
    return Spectrogram(_log_floor(power, cfg), "CQT", cfg.config_hash)


FRONTENDS = {"MEL": mel_spectrogram, "CQT": cqt_spectrogram, "GAM": gam_spectrogram}


def spectrogram(clip: AudioClip, cfg: SpectrogramConfig) -> Spectrogram:
    return FRONTENDS[cfg.kind](clip, cfg)


def normalize(spec: Spectrogram) -> Spectrogram:
    """Per-utterance standardisation; near-constant inputs map to zeros."""
    return replace(spec, values=normalize_values(spec.values))


def normalize_values(values: np.ndarray) -> np.ndarray:
    mu = values.mean()
    var = values.var()
    if var < VARIANCE_FLOOR:
        return np.zeros_like(values)
    return (values - mu) / np.sqrt(var)


def encode_feat(values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4")
    bands, frames = values.shape
    return FEAT_MAGIC + struct.pack("<II", bands, frames) + values.tobytes()


def decode_feat(data: bytes) -> np.ndarray:
    if len(data) < 16 or data[:8] != FEAT_MAGIC:
        raise BadFeatureFile("missing ESDDFEAT header")
    bands, frames = struct.unpack_from("<II", data, 8)
    if len(data) != 16 + 4 * bands * frames:
        raise BadFeatureFile(f"expected {bands}x{frames} float32 payload, got {len(data) - 16} bytes")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(bands, frames).astype(np.float64)


def write_feat(path, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_feat(values))


def read_feat(path) -> np.ndarray:
    return decode_feat(Path(path).read_bytes())
