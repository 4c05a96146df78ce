import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import cross_val_predict

from esddkit import data as D
from esddkit.audio import AudioClip, load_wav
from esddkit.errors import BadHeader, EmptySplit, InvalidRow, IoError
from esddkit.features import default_config, spectrogram

HEADER = "path,label,generator_id,source_id,audio_kind,split\n"


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    spec = D.default_spec(seed=3, n_dev=1, n_test=1)
    return spec, out, D.synthesize_dataset(spec, out)


def test_manifest_roundtrip(tmp_path):
    entries = [
        D.ManifestEntry("scene/none/a.wav", "bonafide", "none", "s1", "scene", "dev"),
        D.ManifestEntry("event/g1/b.wav", "fake", "g1", "s2", "event", "test"),
    ]
    D.write_manifest(entries, tmp_path / "m.csv")
    assert D.load_manifest(tmp_path / "m.csv") == entries


def test_manifest_validation():
    assert D.parse_manifest(HEADER) == []
    with pytest.raises(InvalidRow, match=r"row 2.*generator_id"):
        D.parse_manifest(HEADER + "a.wav,bonafide,g1,s,scene,dev\n")
    with pytest.raises(InvalidRow, match=r"row 3.*audio_kind"):
        D.parse_manifest(HEADER + "a.wav,fake,g1,s,scene,dev\nb.wav,fake,g1,s,music,dev\n")
    with pytest.raises(InvalidRow, match="split"):
        D.parse_manifest(HEADER + "a.wav,fake,g1,s,scene,train\n")
    with pytest.raises(BadHeader):
        D.parse_manifest("path,label\n")


def test_technique_naming():
    assert [D.technique_of(g) for g in ("rr_r1", "es_w7", "none", "tta_x", "other")] == [
        "TTA", "ATA", "none", "TTA", "none"]


def test_spec_validation():
    with pytest.raises(ValueError):
        D.GeneratorSpec("x", "rank_reduce", rank=0)
    with pytest.raises(ValueError):
        D.GeneratorSpec("x", "blur")


def test_counting():
    spec = D.SyntheticSpec(
        sources=(D.SourceSpec("s", "scene"), D.SourceSpec("e", "event")),
        generators=(D.GeneratorSpec("rr_r1", "rank_reduce", rank=1), D.GeneratorSpec("es_w7", "envelope_smooth")),
        n_clips={"dev": 50},
    )
    assert sum(n for *_, n in spec.cells()) == 300
    acc = D.acceptance_spec()
    assert sum(n for split, *_, n in acc.cells() if split == "dev") == 600
    assert sum(n for split, *_, n in acc.cells() if split == "test") == 300


def test_synthesized_layout_and_clips(tiny):
    spec, out, entries = tiny
    assert len(entries) == sum(n for *_, n in spec.cells())
    assert D.load_manifest(out / "manifest.csv") == entries
    for e in entries:
        assert e.path == f"{e.audio_kind}/{e.generator_id}/{e.clip_id}.wav"
        clip = load_wav(out / e.path)
        assert clip.samples.shape == (64000,) and np.all(np.isfinite(clip.samples))
        assert np.abs(clip.samples).max() <= 0.95 + 1e-4


def test_synthesis_is_deterministic(tmp_path):
    spec = D.SyntheticSpec(
        sources=(D.SourceSpec("s", "scene"),), generators=(D.GeneratorSpec("rr_r1", "rank_reduce", rank=1),),
        n_clips={"dev": 1, "test": 1},
    )
    D.synthesize_dataset(spec, tmp_path / "a")
    D.synthesize_dataset(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 5
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    spec = D.SyntheticSpec(sources=(D.SourceSpec("s", "scene"),), generators=(), n_clips={"dev": 1})
    with pytest.raises(IoError):
        D.synthesize_dataset(spec, blocker / "sub")


def test_rank_reduce_lossless_limit(rng):
    x = rng.standard_normal(16000) * 0.1
    y = D.rank_reduce(x, rank=10**6, iterations=0, phase_init="exact")
    assert np.sqrt(np.mean((x - y) ** 2)) < 1e-6


def test_artifacts_change_the_clip():
    spec = D.acceptance_spec()
    for src in spec.sources:
        x = D.synthesize_clip(spec, src, None, 0)
        assert not np.array_equal(D.rank_reduce(x, 1, iterations=4), x)
        assert not np.array_equal(D.envelope_smooth(x, 7), x)


def test_envelope_smooth_width_one_is_identity(rng):
    x = rng.standard_normal(8000) * 0.1
    assert np.sqrt(np.mean((D.envelope_smooth(x, 1) - x) ** 2)) < 1e-6


def test_case_filters(tiny):
    _, _, entries = tiny
    train, test = D.split_test_cases(entries, "1")
    assert all(e.audio_kind == "scene" for e in train + test)
    train, test = D.split_test_cases(entries, "3b")
    assert all(e.audio_kind == "event" and e.split == "dev" for e in train)
    assert all(e.audio_kind == "scene" and e.split == "test" for e in test)
    train, _ = D.split_test_cases(entries, "joint")
    assert len(train) == sum(e.split == "dev" for e in entries)


def test_cases_partition(tiny):
    _, _, entries = tiny
    union = set()
    for case in ("1", "2"):
        train, test = D.split_test_cases(entries, case)
        assert not {e.clip_id for e in train} & {e.clip_id for e in test}
        union |= {e.path for e in train + test}
    assert union == {e.path for e in entries}


def test_empty_split():
    only_scene = [D.ManifestEntry("a.wav", "bonafide", "none", "s", "scene", "dev"),
                  D.ManifestEntry("b.wav", "bonafide", "none", "s", "scene", "test")]
    with pytest.raises(EmptySplit):
        D.split_test_cases(only_scene, "2")
    with pytest.raises(EmptySplit):
        D.split_test_cases([], "1")
    with pytest.raises(ValueError):
        D.TestCasePlan.named("4")


def test_seen_axes(tiny):
    _, _, entries = tiny
    train, test = D.split_test_cases(entries, "joint")
    marked = D.mark_seen_axes(test, train)
    by_id = {e.clip_id: e for e in marked}
    assert by_id["test_scene_a_rr_r1_0000"].seen_generator is True
    assert by_id["test_scene_a_rr_r3_0000"].seen_generator is False
    assert by_id["test_event_b_es_w7_0000"].seen_generator is True
    assert by_id["test_scene_b_none_0000"].seen_source is False
    assert by_id["test_event_b_none_0000"].seen_generator is True
    cells = {(e.seen_source, e.seen_generator) for e in marked if e.is_fake}
    assert cells == {(True, True), (True, False), (False, True), (False, False)}


def test_generator_classes(tiny):
    _, _, entries = tiny
    train, _ = D.split_test_cases(entries, "joint")
    assert D.generator_classes(train) == {"none": 0, "es_w7": 1, "rr_r1": 2}


@pytest.mark.slow
def test_mean_band_energy_probe():
    """A linear model on mean band energies separates rank-reduced fakes, but not perfectly."""
    spec = D.acceptance_spec(seed=0)
    gen = spec.generators[0]
    cfg = default_config("GAM")
    rows, labels = [], []
    for src in spec.sources:
        for g in (None, gen):
            for i in range(40):
                x = D.synthesize_clip(spec, src, g, i)
                rows.append(spectrogram(AudioClip.from_array(x, 16000), cfg).values.mean(axis=1))
                labels.append(int(g is not None))
    x, y = np.array(rows), np.array(labels)
    x = (x - x.mean(0)) / x.std(0)
    p = cross_val_predict(LogisticRegression(max_iter=3000), x, y, cv=5, method="predict_proba")[:, 1]
    score = roc_auc_score(y, p)
    assert 0.7 < score < 1.0
