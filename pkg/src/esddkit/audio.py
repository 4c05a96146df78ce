"""WAV decoding/encoding, fixed-length clips and windowed-sinc resampling."""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import CLIP_SECONDS, SAMPLE_RATE
from .errors import ClipTooShort, EmptyAudio, MalformedWav, UnsupportedEncoding

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

RESAMPLE_TAPS = 64
KAISER_BETA = 8.6
RESAMPLE_ROLLOFF = 0.95


@dataclass(frozen=True)
class AudioClip:
    """A mono, fixed-length (4 s) waveform."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        expected = self.sample_rate * CLIP_SECONDS
        if self.samples.ndim != 1 or self.samples.shape[0] != expected:
            raise ValueError(
                f"clip must hold exactly {expected} samples, got shape {self.samples.shape}"
            )
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("clip contains non-finite samples")

    @classmethod
    def from_array(cls, samples, sample_rate: int, min_fraction: float = 0.5) -> "AudioClip":
        """Pad or truncate ``samples`` to 4 s; reject clips under ``min_fraction`` of that."""
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size == 0:
            raise EmptyAudio("audio has zero frames")
        target = sample_rate * CLIP_SECONDS
        if samples.shape[0] < min_fraction * target:
            raise ClipTooShort(
                f"{samples.shape[0]} samples is under {min_fraction:.0%} of a {CLIP_SECONDS} s clip"
            )
        return cls(fit_length(samples, target), sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.shape[0] >= n:
        return x[:n].copy()
    out = np.zeros(n, dtype=np.float64)
    out[: x.shape[0]] = x
    return out


def _iter_chunks(data: bytes, start: int):
    pos = start
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise MalformedWav(f"chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes) -> tuple[np.ndarray, int]:
    """Decode RIFF/WAVE bytes into a mono float64 array in [-1, 1] and its rate.

    Supports PCM16 and IEEE float32, mono or stereo (stereo is averaged).
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedWav("missing RIFF/WAVE header")
    fmt = None
    payload = None
    for cid, body in _iter_chunks(data, 12):
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedWav("fmt chunk shorter than 16 bytes")
            fmt = body
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise MalformedWav("missing fmt or data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise MalformedWav("extensible fmt chunk too short")
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{channels} channels (only mono/stereo supported)")
    if rate <= 0:
        raise MalformedWav("sample rate is zero")

    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncoding(f"format tag 0x{tag:04x} with {bits} bits per sample")
    if block_align != channels * dtype.itemsize:
        raise MalformedWav(f"block_align {block_align} inconsistent with format")

    n_frames = len(payload) // block_align
    if n_frames == 0:
        raise EmptyAudio("data chunk holds zero frames")
    raw = np.frombuffer(payload[: n_frames * block_align], dtype=dtype)
    samples = raw.reshape(n_frames, channels).astype(np.float64) * scale
    mono = samples.mean(axis=1) if channels == 2 else samples[:, 0]
    if not np.all(np.isfinite(mono)):
        raise MalformedWav("non-finite float samples")
    return mono, rate


def load_wav(path, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Read a WAV file as a 4 s mono clip at ``target_rate``."""
    data = Path(path).read_bytes()
    samples, rate = decode_wav(data)
    # keep a margin of taps past 4 s so the resampler sees real context at the tail
    keep = int(np.ceil(CLIP_SECONDS * rate)) + RESAMPLE_TAPS
    samples = samples[:keep]
    n_in = samples.shape[0]
    if rate != target_rate:
        samples = resample_array(samples, rate, target_rate)
        # track the true resampled duration, not the padded margin
        n_in = int(round(n_in * target_rate / rate))
        samples = samples[:n_in]
    return AudioClip.from_array(samples, target_rate)


def encode_wav_pcm16(samples: np.ndarray, sample_rate: int) -> bytes:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path, clip: AudioClip) -> None:
    Path(path).write_bytes(encode_wav_pcm16(clip.samples, clip.sample_rate))


def _kaiser(u: np.ndarray, half: float) -> np.ndarray:
    r = np.clip(1.0 - (u / half) ** 2, 0.0, None)
    return np.i0(KAISER_BETA * np.sqrt(r)) / np.i0(KAISER_BETA)


def resample_array(x: np.ndarray, src_rate: int, dst_rate: int) -> np.ndarray:
    """Band-limited resampling with a 64-tap Kaiser-windowed sinc.

    Output length is ``ceil(len(x) * dst / src)``. Tap weights are renormalised
    per output sample over the in-range taps, so constant signals stay constant
    up to the clip edges.
    """
    if src_rate <= 0 or dst_rate <= 0:
        raise ValueError("sample rates must be positive")
    x = np.asarray(x, dtype=np.float64)
    if src_rate == dst_rate:
        return x.copy()
    n_out = int(np.ceil(x.shape[0] * dst_rate / src_rate))
    cutoff = min(1.0, dst_rate / src_rate) * RESAMPLE_ROLLOFF
    half = RESAMPLE_TAPS // 2
    offsets = np.arange(-half + 1, half + 1)
    out = np.empty(n_out)
    chunk = 8192
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(start + chunk, n_out))
        pos = n * (src_rate / dst_rate)
        base = np.floor(pos).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        dist = pos[:, None] - idx
        h = cutoff * np.sinc(cutoff * dist) * _kaiser(dist, half)
        valid = (idx >= 0) & (idx < x.shape[0])
        h = np.where(valid, h, 0.0)
        h /= h.sum(axis=1, keepdims=True)
        out[n] = np.sum(h * x[np.clip(idx, 0, x.shape[0] - 1)], axis=1)
    return out


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    y = resample_array(clip.samples, clip.sample_rate, target_rate)
    return AudioClip(fit_length(y, target_rate * CLIP_SECONDS), target_rate)
