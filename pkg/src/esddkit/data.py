"""Manifests, deterministic synthetic audio, and the scene/event test-case splits.

The synthetic corpus mirrors the structure of a real environmental-sound
deepfake corpus: every clip has a source dataset, an audio kind (scene or
event), a label, and for fakes the generator that produced it.

Bonafide scenes are stationary filtered-noise textures; bonafide events are a
few transient bursts over a noise floor. Fakes start from a fresh bonafide-style
clip and pass it through one of two artifact families:

* ``rank_reduce``: low-rank approximation of the STFT magnitude followed by
  iterative phase reconstruction (labelled TTA-like),
* ``envelope_smooth``: each spectral frame's magnitude is smoothed across
  frequency and resynthesised with the original phase (labelled ATA-like).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from . import CLIP_SECONDS, SAMPLE_RATE
from .audio import encode_wav_pcm16
from .errors import BadHeader, EmptySplit, InvalidRow, IoError

MANIFEST_HEADER = ("path", "label", "generator_id", "source_id", "audio_kind", "split")
LABELS = ("bonafide", "fake")
KINDS = ("scene", "event")
SPLITS = ("dev", "test")
FAMILIES = ("rank_reduce", "envelope_smooth")

RESYNTH_NPERSEG = 512
RESYNTH_HOP = 128


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    generator_id: str
    source_id: str
    audio_kind: str
    split: str
    seen_source: bool | None = None
    seen_generator: bool | None = None

    @property
    def clip_id(self) -> str:
        return Path(self.path).stem

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"


def technique_of(generator_id: str) -> str:
    """TTA / ATA / none from a generator id.

    Synthetic ids start with ``rr`` (rank_reduce, TTA-like) or ``es``
    (envelope_smooth, ATA-like); ids carrying a literal ``tta``/``ata`` prefix
    are also recognised.
    """
    g = generator_id.lower()
    if g == "none":
        return "none"
    if g.startswith(("rr", "tta")):
        return "TTA"
    if g.startswith(("es", "ata")):
        return "ATA"
    return "none"


def _validate(row: dict, lineno: int) -> ManifestEntry:
    for name in MANIFEST_HEADER:
        if not row.get(name):
            raise InvalidRow(f"row {lineno}: field '{name}' is empty")
    if row["label"] not in LABELS:
        raise InvalidRow(f"row {lineno}: field 'label' must be bonafide or fake, got {row['label']!r}")
    if (row["label"] == "bonafide") != (row["generator_id"] == "none"):
        raise InvalidRow(
            f"row {lineno}: field 'generator_id' must be 'none' exactly for bonafide rows "
            f"(label={row['label']}, generator_id={row['generator_id']})"
        )
    if row["audio_kind"] not in KINDS:
        raise InvalidRow(f"row {lineno}: field 'audio_kind' must be scene or event, got {row['audio_kind']!r}")
    if row["split"] not in SPLITS:
        raise InvalidRow(f"row {lineno}: field 'split' must be dev or test, got {row['split']!r}")
    return ManifestEntry(*(row[name] for name in MANIFEST_HEADER))


def parse_manifest(text: str) -> list[ManifestEntry]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != MANIFEST_HEADER:
        raise BadHeader(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
    entries = []
    for lineno, values in enumerate(reader, start=2):
        if not values:
            continue
        if len(values) != len(MANIFEST_HEADER):
            raise InvalidRow(f"row {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(values)}")
        entries.append(_validate(dict(zip(MANIFEST_HEADER, values)), lineno))
    return entries


def load_manifest(path) -> list[ManifestEntry]:
    return parse_manifest(Path(path).read_text())


def format_manifest(entries) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for e in entries:
        writer.writerow([getattr(e, name) for name in MANIFEST_HEADER])
    return buf.getvalue()


def write_manifest(entries, path) -> None:
    Path(path).write_text(format_manifest(entries))


# synthetic corpus ------------------------------------------------------------


@dataclass(frozen=True)
class SourceSpec:
    """One bonafide source dataset.

    Scene sources use ``tilt`` (spectral slope, power ~ f^-tilt),
    ``modulation_depth`` and ``n_resonances``; event sources use
    ``burst_count`` and ``burst_duration`` (seconds).
    """

    source_id: str
    kind: str
    splits: tuple[str, ...] = ("dev", "test")
    tilt: float = 1.0
    tilt_jitter: float = 0.3
    modulation_depth: float = 0.3
    n_resonances: int = 3
    burst_count: tuple[int, int] = (1, 5)
    burst_duration: tuple[float, float] = (0.1, 0.6)
    floor_db: float = -35.0


@dataclass(frozen=True)
class GeneratorSpec:
    generator_id: str
    family: str
    rank: int = 2
    iterations: int = 32
    width: int = 7
    splits: tuple[str, ...] = ("dev", "test")

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown generator family {self.family!r}")
        if self.rank < 1 or self.width < 1 or self.iterations < 0:
            raise ValueError("rank >= 1, width >= 1 and iterations >= 0 required")


@dataclass(frozen=True)
class SyntheticSpec:
    sources: tuple[SourceSpec, ...]
    generators: tuple[GeneratorSpec, ...]
    n_clips: dict = field(default_factory=lambda: {"dev": 100, "test": 50})
    seed: int = 0
    sample_rate: int = SAMPLE_RATE

    def cells(self):
        """Yield (split, source, generator-or-None) for every populated cell."""
        for split in SPLITS:
            n = int(self.n_clips.get(split, 0))
            if n <= 0:
                continue
            for src in self.sources:
                if split not in src.splits:
                    continue
                yield split, src, None, n
                for gen in self.generators:
                    if split in gen.splits:
                        yield split, src, gen, n


def default_spec(seed: int = 0, n_dev: int = 100, n_test: int = 50) -> SyntheticSpec:
    """Two kinds x (bonafide + two generators) for training; the test split keeps
    both and adds one unseen parameterization per family and one held-out source
    per kind, so every seen/unseen cell has TTA and ATA fakes."""
    return SyntheticSpec(
        sources=(
            SourceSpec("scene_a", "scene", tilt=1.0, modulation_depth=0.3),
            SourceSpec("event_a", "event", burst_count=(1, 5)),
            SourceSpec("scene_b", "scene", splits=("test",), tilt=1.6, modulation_depth=0.5, n_resonances=5),
            SourceSpec("event_b", "event", splits=("test",), burst_count=(2, 5), burst_duration=(0.05, 0.3)),
        ),
        generators=(
            GeneratorSpec("rr_r1", "rank_reduce", rank=1),
            GeneratorSpec("es_w7", "envelope_smooth", width=7),
            GeneratorSpec("rr_r3", "rank_reduce", rank=3, splits=("test",)),
            GeneratorSpec("es_w11", "envelope_smooth", width=11, splits=("test",)),
        ),
        n_clips={"dev": n_dev, "test": n_test},
        seed=seed,
    )


def acceptance_spec(seed: int = 0) -> SyntheticSpec:
    """600 dev / 300 test clips: 2 kinds x (bonafide + 2 generators), with the
    envelope_smooth width held out of training."""
    return SyntheticSpec(
        sources=(SourceSpec("scene_a", "scene"), SourceSpec("event_a", "event")),
        generators=(
            GeneratorSpec("rr_r1", "rank_reduce", rank=1),
            GeneratorSpec("es_w7", "envelope_smooth", width=7, splits=("dev",)),
            GeneratorSpec("es_w11", "envelope_smooth", width=11, splits=("test",)),
        ),
        n_clips={"dev": 100, "test": 50},
        seed=seed,
    )


_WINDOW = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(RESYNTH_NPERSEG) / RESYNTH_NPERSEG)


def _stft(x: np.ndarray) -> np.ndarray:
    """(bins, frames) STFT with a periodic Hann window and reflect-padded, centred frames."""
    half = RESYNTH_NPERSEG // 2
    padded = np.pad(x, half, mode="reflect")
    padded = np.pad(padded, (0, (-(padded.size - RESYNTH_NPERSEG)) % RESYNTH_HOP))
    frames = sliding_window_view(padded, RESYNTH_NPERSEG)[::RESYNTH_HOP]
    return np.fft.rfft(frames * _WINDOW, axis=1).T


def _istft(z: np.ndarray, n: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`_stft`, trimmed to ``n`` samples."""
    frames = np.fft.irfft(z.T, n=RESYNTH_NPERSEG, axis=1) * _WINDOW
    count = frames.shape[0]
    length = (count - 1) * RESYNTH_HOP + RESYNTH_NPERSEG
    y = np.zeros(length)
    norm = np.zeros(length)
    for k in range(RESYNTH_NPERSEG // RESYNTH_HOP):
        sl = slice(k * RESYNTH_HOP, k * RESYNTH_HOP + count * RESYNTH_HOP)
        y[sl] += frames[:, sl.start : sl.start + RESYNTH_HOP].reshape(-1)
        norm[sl] += np.tile(_WINDOW[sl.start : sl.start + RESYNTH_HOP] ** 2, count)
    y /= np.maximum(norm, 1e-10)
    half = RESYNTH_NPERSEG // 2
    out = np.zeros(n)
    seg = y[half : half + n]
    out[: seg.size] = seg
    return out


def rank_reduce(x: np.ndarray, rank: int, iterations: int = 32, rng=None, phase_init: str = "random") -> np.ndarray:
    """Rank-``rank`` approximation of |STFT| resynthesised by iterative phase reconstruction.

    ``phase_init`` is ``"random"`` (drawn from ``rng``) or ``"exact"`` (the
    input's own phase). With full rank, exact phase and zero iterations the
    input comes back up to STFT round-off.
    """
    z = _stft(x)
    mag = np.abs(z)
    u, s, vt = np.linalg.svd(mag, full_matrices=False)
    r = min(rank, s.size)
    approx = np.maximum((u[:, :r] * s[:r]) @ vt[:r], 0.0)
    if phase_init == "exact":
        phasor = _unit(z)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        phasor = np.exp(1j * rng.uniform(-np.pi, np.pi, size=mag.shape))
    for _ in range(iterations):
        phasor = _unit(_stft(_istft(approx * phasor, x.size)))
    return _istft(approx * phasor, x.size)


def _unit(z: np.ndarray) -> np.ndarray:
    m = np.abs(z)
    return np.where(m > 0, z / np.where(m > 0, m, 1.0), 1.0)


def envelope_smooth(x: np.ndarray, width: int) -> np.ndarray:
    """Smooth each frame's magnitude across ``width`` frequency bins; keep the phase."""
    z = _stft(x)
    mag = np.abs(z)
    if width > 1:
        kernel = np.hanning(width + 2)[1:-1]
        kernel /= kernel.sum()
        pad = width // 2
        padded = np.pad(mag, ((pad, width - 1 - pad), (0, 0)), mode="reflect")
        mag = np.apply_along_axis(lambda col: np.convolve(col, kernel, mode="valid"), 0, padded)
    return _istft(mag * _unit(z), x.size)


def _colored_noise(rng, n, sr, tilt, n_res):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    shape = 1.0 / np.maximum(f, 20.0) ** (tilt / 2.0)
    for _ in range(n_res):
        fc = np.exp(rng.uniform(np.log(150.0), np.log(5000.0)))
        bw = fc * rng.uniform(0.05, 0.2)
        shape = shape * (1.0 + rng.uniform(1.0, 4.0) * np.exp(-0.5 * ((f - fc) / bw) ** 2))
    y = np.fft.irfft(spec * shape, n)
    return y / (np.std(y) + 1e-12)


def _scene(rng, src: SourceSpec, n, sr):
    tilt = src.tilt + rng.uniform(-src.tilt_jitter, src.tilt_jitter)
    y = _colored_noise(rng, n, sr, tilt, src.n_resonances)
    t = np.arange(n) / sr
    rate = rng.uniform(0.2, 2.0)
    y *= 1.0 + src.modulation_depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return y


def _burst(rng, length, sr):
    t = np.arange(length) / sr
    if rng.random() < 0.5:
        f0 = rng.uniform(120.0, 900.0)
        glide = rng.uniform(-0.3, 0.3)
        inst = f0 * (1.0 + glide * t / max(t[-1], 1e-9))
        phase = 2 * np.pi * np.cumsum(inst) / sr
        sig = sum(rng.uniform(0.2, 1.0) / h * np.sin(h * phase) for h in range(1, 7) if h * f0 < sr / 2.2)
    else:
        b, a = [1.0], [1.0, -rng.uniform(0.0, 0.95)]
        sig = lfilter(b, a, rng.standard_normal(length))
    attack = max(1, int(0.005 * sr))
    env = np.exp(-t * rng.uniform(3.0, 20.0))
    env[:attack] *= np.linspace(0, 1, attack)
    sig = sig * env
    return sig / (np.max(np.abs(sig)) + 1e-12)


def _event(rng, src: SourceSpec, n, sr):
    floor = _colored_noise(rng, n, sr, 1.0, 0) * 10 ** (src.floor_db / 20.0)
    y = floor
    for _ in range(rng.integers(src.burst_count[0], src.burst_count[1] + 1)):
        length = int(rng.uniform(*src.burst_duration) * sr)
        start = rng.integers(0, n - length)
        y[start : start + length] += _burst(rng, length, sr) * rng.uniform(0.3, 1.0)
    return y


def _bonafide(rng, src, n, sr):
    return _scene(rng, src, n, sr) if src.kind == "scene" else _event(rng, src, n, sr)


def _apply_generator(rng, x, gen: GeneratorSpec):
    if gen.family == "rank_reduce":
        return rank_reduce(x, gen.rank, gen.iterations, rng)
    return envelope_smooth(x, gen.width)


def _level(rng, y):
    target = 10 ** (rng.uniform(-26.0, -16.0) / 20.0)
    y = y * target / (np.sqrt(np.mean(y**2)) + 1e-12)
    peak = np.max(np.abs(y))
    return y * (0.95 / peak) if peak > 0.95 else y


def synthesize_clip(spec: SyntheticSpec, src: SourceSpec, gen: GeneratorSpec | None, index: int) -> np.ndarray:
    """One clip, driven by its own rng stream."""
    n = spec.sample_rate * CLIP_SECONDS
    key = sum(ord(c) * 31**i for i, c in enumerate(f"{src.source_id}/{gen.generator_id if gen else 'none'}")) % 2**31
    rng = np.random.default_rng([spec.seed, key, index])
    y = _bonafide(rng, src, n, spec.sample_rate)
    if gen is not None:
        y = _apply_generator(rng, y, gen)
    return _level(rng, y)


def synthesize_dataset(spec: SyntheticSpec, out_dir) -> list[ManifestEntry]:
    """Write WAVs under ``out_dir/<kind>/<generator_id>/<clip_id>.wav`` plus ``manifest.csv``."""
    out_dir = Path(out_dir)
    entries = []
    try:
        for split, src, gen, n in spec.cells():
            gid = gen.generator_id if gen else "none"
            folder = out_dir / src.kind / gid
            folder.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                index = i if split == "dev" else i + 1_000_000
                clip_id = f"{split}_{src.source_id}_{gid}_{i:04d}"
                y = synthesize_clip(spec, src, gen, index)
                (folder / f"{clip_id}.wav").write_bytes(encode_wav_pcm16(y, spec.sample_rate))
                rel = f"{src.kind}/{gid}/{clip_id}.wav"
                entries.append(ManifestEntry(rel, "fake" if gen else "bonafide", gid, src.source_id, src.kind, split))
        write_manifest(entries, out_dir / "manifest.csv")
    except OSError as exc:
        raise IoError(f"cannot write synthetic data under {out_dir}: {exc}") from exc
    return entries


# test cases ------------------------------------------------------------------

CASES = {
    "1": (("scene",), ("scene",)),
    "2": (("event",), ("event",)),
    "3a": (("scene",), ("event",)),
    "3b": (("event",), ("scene",)),
    "joint": (("scene", "event"), ("scene", "event")),
}


@dataclass(frozen=True)
class TestCasePlan:
    case: str
    train_kinds: tuple[str, ...]
    test_kinds: tuple[str, ...]

    __test__ = False  # not a pytest class

    @classmethod
    def named(cls, case: str) -> "TestCasePlan":
        case = str(case).lower()
        if case not in CASES:
            raise ValueError(f"unknown test case {case!r}; expected one of {sorted(CASES)}")
        train, test = CASES[case]
        return cls(case, train, test)

    @property
    def train_kind(self) -> str:
        return "+".join(self.train_kinds)

    @property
    def test_kind(self) -> str:
        return "+".join(self.test_kinds)


def split_test_cases(manifest, plan: TestCasePlan | str):
    """(train, test) rows: train from the dev split, test from the test split."""
    if isinstance(plan, str):
        plan = TestCasePlan.named(plan)
    if not manifest:
        raise EmptySplit("manifest is empty")
    train = [e for e in manifest if e.split == "dev" and e.audio_kind in plan.train_kinds]
    test = [e for e in manifest if e.split == "test" and e.audio_kind in plan.test_kinds]
    if not train:
        raise EmptySplit(f"case {plan.case}: no dev rows of kind {plan.train_kind}")
    if not test:
        raise EmptySplit(f"case {plan.case}: no test rows of kind {plan.test_kind}")
    return train, test


def mark_seen_axes(test_entries, train_entries) -> list[ManifestEntry]:
    """Flag whether each test row's source / generator occurs in training (bonafide counts as seen)."""
    sources = {e.source_id for e in train_entries}
    generators = {e.generator_id for e in train_entries}
    return [
        replace(e, seen_source=e.source_id in sources,
                seen_generator=e.generator_id == "none" or e.generator_id in generators)
        for e in test_entries
    ]


def generator_classes(entries) -> dict[str, int]:
    """Class index per generator id: 0 for bonafide, 1.. for fake generators in sorted order."""
    gens = sorted({e.generator_id for e in entries if e.generator_id != "none"})
    return {"none": 0, **{g: i + 1 for i, g in enumerate(gens)}}
