import struct

import numpy as np
import pytest

from esddkit.audio import (
    AudioClip,
    decode_wav,
    encode_wav_pcm16,
    load_wav,
    resample,
    resample_array,
)
from esddkit.errors import ClipTooShort, EmptyAudio, MalformedWav, UnsupportedEncoding

SR = 16000
N = 4 * SR


def _wav_bytes(frames: np.ndarray, rate: int, tag: int = 1, bits: int = 16, extensible: bool = False) -> bytes:
    """Hand-built RIFF container so the decoder is tested against the format, not against itself."""
    frames = np.asarray(frames)
    channels = 1 if frames.ndim == 1 else frames.shape[1]
    if tag == 1:
        payload = frames.astype("<i2").tobytes()
    else:
        payload = frames.astype("<f4").tobytes()
    block = channels * bits // 8
    if extensible:
        fmt = struct.pack("<HHIIHHHHI", 0xFFFE, channels, rate, rate * block, block, bits, 22, bits, 0)
        fmt += struct.pack("<H", tag) + b"\x00" * 14
    else:
        fmt = struct.pack("<HHIIHH", tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"LIST" + struct.pack("<I", 4) + b"INFO"
    body += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_silence_loads_as_zeros(tmp_path):
    p = tmp_path / "s.wav"
    p.write_bytes(_wav_bytes(np.zeros(N, dtype=np.int16), SR))
    clip = load_wav(p)
    assert clip.samples.shape == (N,)
    assert not clip.samples.any()


def test_short_clip_is_padded(tmp_path):
    p = tmp_path / "half.wav"
    p.write_bytes(_wav_bytes(np.full(2 * SR, 1000, dtype=np.int16), SR))
    clip = load_wav(p)
    assert clip.samples.shape == (N,)
    assert np.all(clip.samples[: 2 * SR] == 1000 / 32768)
    assert not clip.samples[2 * SR :].any()


def test_full_scale_pcm16_scaling(tmp_path):
    p = tmp_path / "sq.wav"
    p.write_bytes(_wav_bytes(np.full(N, 32767, dtype=np.int16), SR))
    assert np.allclose(load_wav(p).samples, 32767 / 32768, atol=0, rtol=0)


def test_stereo_is_averaged_and_float32_supported():
    left = np.linspace(-0.5, 0.5, 100, dtype=np.float32)
    right = -left * 0.5
    data = _wav_bytes(np.stack([left, right], axis=1), SR, tag=3, bits=32)
    mono, rate = decode_wav(data)
    assert rate == SR
    np.testing.assert_allclose(mono, (left.astype(np.float64) + right) / 2, atol=1e-7)


def test_extensible_pcm():
    x = np.arange(-50, 50, dtype=np.int16)
    mono, _ = decode_wav(_wav_bytes(x, SR, extensible=True))
    np.testing.assert_array_equal(mono, x / 32768)


def test_encoder_roundtrip():
    x = np.random.default_rng(0).uniform(-0.9, 0.9, 1000)
    y, rate = decode_wav(encode_wav_pcm16(x, 22050))
    assert rate == 22050
    assert np.max(np.abs(x - y)) <= 0.5 / 32768 + 1e-12


@pytest.mark.parametrize(
    "data, exc",
    [
        (b"not a wav at all", MalformedWav),
        (b"RIFF\x00\x00\x00\x00WAVE", MalformedWav),
    ],
)
def test_malformed(data, exc):
    with pytest.raises(exc):
        decode_wav(data)


def test_truncated_chunk():
    data = _wav_bytes(np.zeros(100, dtype=np.int16), SR)
    with pytest.raises(MalformedWav):
        decode_wav(data[:-20])


def test_unsupported_encoding():
    data = bytearray(_wav_bytes(np.zeros(100, dtype=np.int16), SR))
    data[20:22] = struct.pack("<H", 2)  # ADPCM tag
    with pytest.raises(UnsupportedEncoding):
        decode_wav(bytes(data))


def test_empty_audio():
    with pytest.raises(EmptyAudio):
        decode_wav(_wav_bytes(np.zeros(0, dtype=np.int16), SR))


def test_too_short_rejected():
    with pytest.raises(ClipTooShort):
        AudioClip.from_array(np.ones(N // 2 - 1), SR)
    assert AudioClip.from_array(np.ones(N // 2), SR).samples.shape == (N,)


def test_clip_invariants():
    with pytest.raises(ValueError):
        AudioClip(np.zeros(N - 1), SR)
    bad = np.zeros(N)
    bad[3] = np.nan
    with pytest.raises(ValueError):
        AudioClip(bad, SR)


def test_resample_identity_is_bit_exact():
    x = np.random.default_rng(1).standard_normal(N)
    clip = AudioClip(x, SR)
    out = resample(clip, SR)
    assert out.samples.tobytes() == clip.samples.tobytes()


def test_resample_sine_peak():
    t = np.arange(4 * 48000) / 48000
    clip = AudioClip(np.sin(2 * np.pi * 1000 * t), 48000)
    out = resample(clip, SR)
    assert out.samples.shape == (N,)
    spec = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(N, 1 / SR)
    assert abs(freqs[np.argmax(spec)] - 1000) <= SR / N


@pytest.mark.parametrize("src", [8000, 22050, 44100, 48000])
def test_resample_preserves_dc(src):
    y = resample_array(np.full(4 * src, 0.5), src, SR)
    assert np.max(np.abs(y - 0.5)) < 1e-6


def test_load_resamples_to_pipeline_rate(tmp_path):
    p = tmp_path / "hi.wav"
    t = np.arange(4 * 22050) / 22050
    p.write_bytes(_wav_bytes(np.round(8000 * np.sin(2 * np.pi * 440 * t)).astype(np.int16), 22050))
    clip = load_wav(p)
    assert clip.sample_rate == SR and clip.samples.shape == (N,)
    # the tail must carry signal, not padding
    assert np.abs(clip.samples[-SR // 10 :]).max() > 0.1
