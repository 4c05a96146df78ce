"""Acceptance suite. Each test records one PASS/FAIL line for its criterion."""

import itertools
import json
import time
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from esddkit import data as ds
from esddkit import metrics as mt
from esddkit import report as rp
from esddkit.audio import AudioClip, load_wav
from esddkit.cli import main
from esddkit.features import band_centers, default_config, normalize, spectrogram, write_feat
from esddkit.mixup import MixupConfig, mixup_batch
from esddkit.model import BackboneConfig, init_model, load_checkpoint, predict_scores
from esddkit.training import TrainingData, plain_stage, run_stage, run_three_stage

import gradcases
from conftest import fd_rel_error
from oracles import brute_auc, random_scores, sweep_eer

SR = 16000
SMALL = BackboneConfig(blocks=((4, 3, 1, 2), (8, 3, 1, 2)), embedding_dim=8)


def cli(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, argv
    return code


def extract(entries, root, out, kinds=("GAM",)):
    for kind in kinds:
        cfg = default_config(kind)
        (out / kind).mkdir(parents=True, exist_ok=True)
        for e in entries:
            write_feat(out / kind / f"{e.clip_id}.feat", normalize(spectrogram(load_wav(root / e.path), cfg)).values)


def load(entries, out, kind):
    from esddkit.features import read_feat

    return np.stack([read_feat(out / kind / f"{e.clip_id}.feat") for e in entries])


def training_data(entries, feats):
    classes = ds.generator_classes(entries)
    return TrainingData(feats, np.array([e.is_fake for e in entries], dtype=np.int64),
                        np.array([classes[e.generator_id] for e in entries], dtype=np.int64)), classes


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """The 600 dev / 300 test acceptance corpus with all three spectrograms."""
    root = tmp_path_factory.mktemp("desk")
    entries = ds.synthesize_dataset(ds.acceptance_spec(seed=0), root / "data")
    extract(entries, root / "data", root / "feats", ("GAM", "MEL", "CQT"))
    train, test = ds.split_test_cases(entries, "joint")
    return root, train, ds.mark_seen_axes(test, train)


@pytest.mark.criterion(1)
def test_criterion_1_gradients(acceptance):
    start = time.perf_counter()
    worst, failing = 0.0, []
    cases = {**gradcases.PRIMITIVES, **gradcases.LOSSES}
    for name, build in cases.items():
        for seed in range(5):
            fn, arrays = build(np.random.default_rng(seed))
            err = fd_rel_error(fn, arrays, eps=1e-3)
            worst = max(worst, err)
            if not err < 1e-4:
                failing.append(f"{name}/{seed}")
    elapsed = time.perf_counter() - start
    ok = not failing and elapsed < 60
    acceptance(1, ok, f"{len(cases)} ops x 5 instances, worst rel err {worst:.2e} (< 1e-4), "
                      f"{elapsed:.1f}s (< 60s){'; failing ' + ', '.join(failing) if failing else ''}")
    assert ok


@pytest.mark.criterion(2)
def test_criterion_2_metric_oracles(acceptance):
    rng = np.random.default_rng(2)
    auc_err = eer_err = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 501))
        scores, labels = random_scores(rng, n)
        s = mt.ScoreSet([f"c{i}" for i in range(n)], scores, labels)
        auc_err = max(auc_err, abs(mt.auc(s) - brute_auc(scores, labels)))
        eer_err = max(eer_err, abs(mt.eer(s) - sweep_eer(scores, labels)))
    ok = auc_err < 1e-9 and eer_err < 5e-3
    acceptance(2, ok, f"200 sets: max |AUC-brute| {auc_err:.1e} (< 1e-9), max |EER-sweep| {eer_err:.1e} (< 5e-3)")
    assert ok


@pytest.mark.criterion(3)
def test_criterion_3_frontends(acceptance):
    rng = np.random.default_rng(3)
    t = np.arange(4 * SR) / SR
    freqs = rng.uniform(100, 6000, 20)
    worst = {}
    for kind in ("MEL", "CQT", "GAM"):
        cfg = default_config(kind)
        centers = band_centers(cfg)
        worst[kind] = 0
        for f in freqs:
            clip = AudioClip(0.5 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)), SR)
            peak = np.argmax(spectrogram(clip, cfg).values, axis=0)
            worst[kind] = max(worst[kind], int(np.abs(peak - np.argmin(np.abs(centers - f))).max()))
    cfg = default_config("CQT")
    centers = band_centers(cfg)
    shifts = set()
    for k in rng.choice(np.arange(10, cfg.n_bands - cfg.bins_per_octave), 5, replace=False):
        a = np.argmax(spectrogram(AudioClip(0.5 * np.sin(2 * np.pi * centers[k] * t), SR), cfg).values, axis=0)
        b = np.argmax(spectrogram(AudioClip(0.5 * np.sin(2 * np.pi * 2 * centers[k] * t), SR), cfg).values, axis=0)
        shifts |= set((b - a).tolist())
    ok = max(worst.values()) <= 1 and shifts == {cfg.bins_per_octave}
    acceptance(3, ok, f"20 tones, worst band offset {worst} (<= 1); CQT octave shifts {sorted(shifts)} "
                      f"(== {cfg.bins_per_octave})")
    assert ok


@pytest.mark.criterion(4)
def test_criterion_4_three_stage_protocol(acceptance, tmp_path):
    spec = ds.default_spec(seed=0, n_dev=1, n_test=1)
    entries = ds.synthesize_dataset(spec, tmp_path / "data")
    train, _ = ds.split_test_cases(entries, "joint")
    extract(train, tmp_path / "data", tmp_path / "feats")
    data, classes = training_data(train, load(train, tmp_path / "feats", "GAM"))
    model = init_model(BackboneConfig(), n_aux_classes=len(classes))
    _, log = run_three_stage(model, data, checkpoint_dir=tmp_path)
    recs = log.records
    lrs = [sorted({r["learning_rate"] for r in recs if r["stage"] == s}) for s in (1, 2, 3)]
    losses = [sorted({tuple(r["losses"]) for r in recs if r["stage"] == s}) for s in (1, 2, 3)]
    s2 = load_checkpoint((tmp_path / "stage2.ckpt").read_bytes())
    s3 = load_checkpoint((tmp_path / "stage3.ckpt").read_bytes())
    backbone = [n for n in s2.params if n in s2.groups["backbone"]]
    frozen = all(s2.params[n].tobytes() == s3.params[n].tobytes() for n in backbone)
    head_moved = any(s2.params[n].tobytes() != s3.params[n].tobytes() for n in s3.groups["head"])
    ok = (len(recs) == 35 and [r["stage"] for r in recs] == [1] * 20 + [2] * 10 + [3] * 5
          and lrs == [[5e-4], [1e-5], [1e-6]]
          and losses == [[("asoftmax", "center", "contrastive")], [("cross_entropy",)], [("cross_entropy",)]]
          and frozen and head_moved)
    acceptance(4, ok, f"{len(recs)} records, lrs {lrs}, losses {[list(x[0]) for x in losses]}, "
                      f"backbone bit-identical over stage 3: {frozen} ({len(backbone)} tensors), head updated: {head_moved}")
    assert ok


@pytest.mark.criterion(5)
def test_criterion_5_desk_scale_learning(acceptance, desk):
    root, train, test = desk
    data, classes = training_data(train, load(train, root / "feats", "GAM"))
    x_test = load(test, root / "feats", "GAM")
    seen = np.array([bool(e.seen_generator) for e in test])
    y = np.array([e.is_fake for e in test], dtype=int)
    aucs, times = [], []
    for seed in (0, 1, 2):
        model = init_model(BackboneConfig(), seed=seed, n_aux_classes=len(classes))
        start = time.perf_counter()
        model, _ = run_three_stage(model, data, seed=seed)
        times.append(time.perf_counter() - start)
        scores = predict_scores(model, x_test)
        aucs.append(roc_auc_score(y[seen], scores[seen]))
        np.save(root / f"gam_scores_seed{seed}.npy", scores)
    spread = max(aucs) - min(aucs)
    ok = min(aucs) >= 0.95 and spread < 0.05 and max(times) <= 600
    acceptance(5, ok, f"seen-generator AUC per seed {[round(a, 4) for a in aucs]} (>= 0.95), spread {spread:.4f} "
                      f"(< 0.05), train time {[round(t) for t in times]}s (<= 600s), "
                      f"{len(train)} train / {len(test)} test clips, {int(seen.sum())} seen-generator test clips")
    assert ok


@pytest.mark.criterion(6)
def test_criterion_6_protocol_structure(acceptance, tmp_path):
    cli("synth-data", "--out", tmp_path / "data", "--clips-dev", 3, "--clips-test", 2, "--seed", 6)
    manifest = tmp_path / "data" / "manifest.csv"
    cfg = tmp_path / "small.cfg"
    cfg.write_text("[backbone]\nblocks = 4:3:2:2, 8:3:1:2\nembedding_dim = 8\n")
    reports = []
    for kind in ("GAM", "CQT", "MEL"):
        cli("extract", "--manifest", manifest, "--kind", kind, "--out", tmp_path / "feats")
        for case in ("1", "2", "3a", "3b"):
            run = tmp_path / "runs" / f"{kind}_{case}"
            cli("train", "--manifest", manifest, "--features", tmp_path / "feats", "--kind", kind, "--case", case,
                "--config", cfg, "--strategy", "plain", "--epochs", 2, "--out", run)
            cli("eval", "--checkpoint", run / "model.ckpt", "--manifest", manifest, "--features", tmp_path / "feats",
                "--kind", kind, "--case", case, "--out", run / "eval")
            reports.append(run / "eval" / "report.json")
    for case in ("1", "2"):
        members = [tmp_path / "runs" / f"{k}_{case}" / "eval" / "scores.csv" for k in ("GAM", "CQT", "MEL")]
        cli("ensemble", *members, "--out", tmp_path / "runs" / f"ens_{case}")
        reports.append(tmp_path / "runs" / f"ens_{case}" / "report.json")
    run = tmp_path / "runs" / "GAM_joint"
    cli("train", "--manifest", manifest, "--features", tmp_path / "feats", "--config", cfg, "--strategy", "plain",
        "--epochs", 2, "--out", run)
    cli("eval", "--checkpoint", run / "model.ckpt", "--manifest", manifest, "--features", tmp_path / "feats",
        "--seen-report", "--out", run / "eval")
    reports.append(run / "eval" / "report.json")
    cli("report", *reports, "--out", tmp_path / "report")

    tables = json.loads((tmp_path / "report" / "tables.json").read_text())
    for key, schema in (("test_case_1", "test_case"), ("test_case_2", "test_case"), ("cross", "cross")):
        jsonschema.validate(tables[key], rp.SCHEMAS[schema])
    for t in tables["seen"]:
        jsonschema.validate(t, rp.SCHEMAS["seen"])
    rows_1 = [r["system"] for r in tables["test_case_1"]["rows"]]
    grid = {(r["system"], r["train_kind"], r["test_kind"]) for r in tables["cross"]["rows"]}
    seen_rows = [r["test"] for r in tables["seen"][0]["rows"]]
    files = sorted(p.name for p in (tmp_path / "report").iterdir())
    ok = (rows_1 == ["GAM", "CQT", "MEL", "All Spec. (ensemble)"]
          and [r["system"] for r in tables["test_case_2"]["rows"]] == rows_1
          and {(s, a, b) for s in ("GAM", "CQT", "MEL") for a in ("scene", "event") for b in ("scene", "event")} <= grid
          and seen_rows == ["Test 01", "Test 02", "Test 03", "Test 04", "Average"]
          and all(r["TTA"] is not None and r["ATA"] is not None for r in tables["seen"][0]["rows"])
          and {"test_case_1.csv", "cross.csv", "seen_gam.csv", "test_cases.png", "cross.png", "seen_gam.png"} <= set(files))
    acceptance(6, ok, f"case tables {len(rows_1)} rows each, cross grid {len(grid)} rows, seen matrix {seen_rows}, "
                      f"schemas validated, files {files}")
    assert ok


@pytest.mark.criterion(7)
def test_criterion_7_mixup(acceptance):
    rng = np.random.default_rng(7)
    cfg = MixupConfig(alpha=0.5, apply_probability=1.0)
    simplex = envelope = True
    lams = []
    for _ in range(10000):
        b = int(rng.integers(2, 6))
        x = rng.standard_normal((b, 3, 4))
        y = rng.dirichlet([1.0, 1.0], size=b)
        mx, my, lam = mixup_batch(x, y, cfg, rng)
        lams.append(lam)
        simplex &= bool(np.all(my >= 0) and np.allclose(my.sum(axis=1), 1.0, atol=1e-12))
        # each mixed row must sit between its own input and some other row, elementwise
        for i in range(b):
            envelope &= any(
                np.all(mx[i] >= np.minimum(x[i], x[j]) - 1e-12) and np.all(mx[i] <= np.maximum(x[i], x[j]) + 1e-12)
                for j in range(b) if j != i
            )
    x = rng.standard_normal((4, 3, 4))
    y = np.eye(2)[[0, 1, 1, 0]]
    ix, iy, _ = mixup_batch(x, y, cfg, rng, lam=1.0)
    identity = ix.tobytes() == x.tobytes() and iy.tobytes() == y.tobytes()
    mean = float(np.mean(lams))
    ok = simplex and envelope and identity and 0.48 <= mean <= 0.52
    acceptance(7, ok, f"10000 draws: labels on simplex {simplex}, within envelope {envelope}, "
                      f"lam=1 identity {identity}, mean lam {mean:.4f} (in [0.48, 0.52])")
    assert ok


def _pipeline(root: Path):
    cli("synth-data", "--out", root / "data", "--clips-dev", 1, "--clips-test", 1, "--seed", 8)
    manifest = root / "data" / "manifest.csv"
    cli("extract", "--manifest", manifest, "--kind", "GAM", "--out", root / "feats")
    cli("train", "--manifest", manifest, "--features", root / "feats", "--seed", 8, "--out", root / "run")
    cli("eval", "--checkpoint", root / "run" / "model.ckpt", "--manifest", manifest, "--features", root / "feats",
        "--seen-report", "--out", root / "eval")


@pytest.mark.criterion(8)
def test_criterion_8_determinism(acceptance, tmp_path):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    names = ["eval/scores.csv", "run/model.ckpt", "run/stage1.ckpt", "run/stage2.ckpt", "run/stage3.ckpt"]
    same = {n: (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names}
    ok = all(same.values())
    acceptance(8, ok, f"two synth-data -> extract -> train (35 epochs) -> eval runs, byte-identical: {same}")
    assert ok


@pytest.mark.criterion(9)
def test_criterion_9_ensemble(acceptance, desk):
    root, train, test = desk
    members = []
    for kind in ("GAM", "MEL", "CQT"):
        data, classes = training_data(train, load(train, root / "feats", kind))
        model = init_model(SMALL, seed=9, n_aux_classes=len(classes))
        model, _, _ = run_stage(model, data, plain_stage(2), seed=9)
        scores = predict_scores(model, load(test, root / "feats", kind))
        members.append(mt.ScoreSet([e.clip_id for e in test], scores, [e.is_fake for e in test]))
    n = len(test)
    ref = mt.fuse_scores(members)
    shuffles = [np.random.default_rng(s).permutation(n) for s in range(3)]
    perm_ok = True
    for order in itertools.permutations(range(3)):
        for rows in ([np.arange(n)] * 3, shuffles):
            fused = mt.fuse_scores([members[i].subset(rows[i]) for i in order])
            back = dict(zip(fused.clip_ids, fused.scores))
            perm_ok &= all(back[c] == s for c, s in zip(ref.clip_ids, ref.scores))
    # fused rows come back ordered by clip id, so compare against id-sorted members
    members = [m.sorted() for m in members]
    assert all(np.array_equal(m.clip_ids, ref.clip_ids) for m in members)
    idem = all(mt.fuse_scores([m] * k).scores.tobytes() == m.scores.tobytes() for m in members for k in (2, 3))
    stack = np.stack([m.scores for m in members])
    inside = bool(np.all(ref.scores >= stack.min(axis=0)) and np.all(ref.scores <= stack.max(axis=0)))
    ok = perm_ok and idem and inside
    acceptance(9, ok, f"{n} test clips x 3 spectrograms: permutation-invariant over 6 member orders x clip "
                      f"shuffles {perm_ok}, idempotent on duplicates {idem}, inside member envelope {inside}")
    assert ok
