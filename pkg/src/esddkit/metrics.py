"""Detection metrics, score fusion and the seen/unseen breakdown.

Scores are probabilities of *fake*; fake is the positive class everywhere.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import BadHeader, ClipMismatch, EmptyScoreSet, InvalidRow, LabelMismatch, OneClassOnly

SCORE_HEADER = (
    "clip_id", "score", "label", "generator_id", "source_id",
    "audio_kind", "seen_source", "seen_generator", "technique",
)
TECHNIQUES = ("TTA", "ATA", "none")
META_FIELDS = ("label", "generator_id", "source_id", "audio_kind", "seen_source", "seen_generator", "technique")


@dataclass
class ScoreSet:
    """Column-oriented score table; one row per clip."""

    clip_ids: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    generator_id: np.ndarray | None = None
    source_id: np.ndarray | None = None
    audio_kind: np.ndarray | None = None
    seen_source: np.ndarray | None = None
    seen_generator: np.ndarray | None = None
    technique: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.clip_ids)
        self.clip_ids = np.asarray(self.clip_ids, dtype=object)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        defaults = {
            "generator_id": np.where(self.labels == 0, "none", "unknown") if n else [],
            "source_id": ["unknown"] * n,
            "audio_kind": ["scene"] * n,
            "seen_source": [True] * n,
            "seen_generator": [True] * n,
            "technique": ["none"] * n,
        }
        for name, default in defaults.items():
            value = getattr(self, name)
            value = default if value is None else value
            dtype = bool if name.startswith("seen_") else object
            setattr(self, name, np.asarray(value, dtype=dtype).reshape(-1))
        for name in ("scores", "labels") + tuple(defaults):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"column {name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if not np.all(np.isfinite(self.scores)) or np.any((self.scores < 0) | (self.scores > 1)):
            raise ValueError("scores must be finite and lie in [0, 1]")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 (bonafide) or 1 (fake)")

    def __len__(self):
        return self.scores.shape[0]

    def subset(self, mask) -> "ScoreSet":
        mask = np.asarray(mask)
        return ScoreSet(**{name: getattr(self, name)[mask] for name in _COLUMNS})

    def sorted(self) -> "ScoreSet":
        return self.subset(np.argsort(self.clip_ids.astype(str), kind="stable"))


_COLUMNS = ("clip_ids", "scores", "labels") + META_FIELDS[1:]


def _require_nonempty(s: ScoreSet):
    if len(s) == 0:
        raise EmptyScoreSet("score set has no entries")


def _require_both(s: ScoreSet):
    _require_nonempty(s)
    n_pos = int(s.labels.sum())
    if n_pos == 0 or n_pos == len(s):
        raise OneClassOnly("both bonafide and fake entries are required")


def accuracy(s: ScoreSet, threshold: float = 0.5) -> float:
    _require_nonempty(s)
    return float(np.mean((s.scores >= threshold).astype(np.int64) == s.labels))


def confusion(s: ScoreSet, threshold: float = 0.5) -> np.ndarray:
    """Rows are the true label, columns the prediction (0 bonafide, 1 fake)."""
    _require_nonempty(s)
    pred = (s.scores >= threshold).astype(np.int64)
    out = np.zeros((2, 2), dtype=np.int64)
    np.add.at(out, (s.labels, pred), 1)
    return out


def f1(s: ScoreSet, threshold: float = 0.5) -> float:
    c = confusion(s, threshold)
    tp, fp, fn = c[1, 1], c[0, 1], c[1, 0]
    if tp == 0:
        return 0.0
    return float(2 * tp / (2 * tp + fp + fn))


def auc(s: ScoreSet) -> float:
    """Mann-Whitney statistic: P(fake score > bonafide score), ties count one half."""
    _require_both(s)
    ranks = rankdata(s.scores)
    pos = s.labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def error_rates(scores, labels, thresholds):
    """(FPR, FNR) at each threshold under the rule "predict fake iff score >= t"."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    t = np.asarray(thresholds, dtype=np.float64)
    fpr = 1.0 - np.searchsorted(neg, t, side="left") / neg.size
    fnr = np.searchsorted(pos, t, side="left") / pos.size
    return fpr, fnr


def crossing_rate(fpr: np.ndarray, fnr: np.ndarray) -> float:
    """Where FPR - FNR changes sign along a threshold-ordered curve, linearly interpolated."""
    d = fpr - fnr
    exact = np.flatnonzero(d == 0)
    if exact.size:
        return float(fpr[exact[0]])
    j = int(np.flatnonzero(d < 0)[0])
    i = j - 1
    a = d[i] / (d[i] - d[j])
    return float(fpr[i] + a * (fpr[j] - fpr[i]))


def eer(s: ScoreSet) -> float:
    """Equal error rate over the operating points at every distinct score plus +inf."""
    _require_both(s)
    thresholds = np.append(np.unique(s.scores), np.inf)
    return crossing_rate(*error_rates(s.scores, s.labels, thresholds))


@dataclass
class MetricBlock:
    n: int
    acc: float
    f1: float
    auc: float | None
    eer: float | None
    confusion: list

    def to_dict(self) -> dict:
        return {"n": self.n, "acc": self.acc, "f1": self.f1, "auc": self.auc, "eer": self.eer,
                "confusion": self.confusion}


def metric_block(s: ScoreSet, threshold: float = 0.5) -> MetricBlock:
    """All four metrics; auc/eer are None when a class is missing."""
    both = 0 < int(s.labels.sum()) < len(s)
    return MetricBlock(
        n=len(s),
        acc=accuracy(s, threshold),
        f1=f1(s, threshold),
        auc=auc(s) if both else None,
        eer=eer(s) if both else None,
        confusion=confusion(s, threshold).tolist(),
    )


SEEN_CELLS = (
    ("Test 01", True, True),
    ("Test 02", True, False),
    ("Test 03", False, True),
    ("Test 04", False, False),
)


def seen_matrix(s: ScoreSet) -> list[dict]:
    """Four seen-source x seen-generator cells plus an average row, each with TTA and ATA EER.

    A cell's bonafide rows are those whose source matches the cell's source
    axis; its fake rows must also match the generator axis and technique.
    Missing combinations give None and are skipped by the average.
    """
    rows = []
    for name, seen_src, seen_gen in SEEN_CELLS:
        row = {"test": name, "seen_source": seen_src, "seen_generator": seen_gen}
        for tech in ("TTA", "ATA"):
            bona = (s.labels == 0) & (s.seen_source == seen_src)
            fake = (s.labels == 1) & (s.seen_source == seen_src) & (s.seen_generator == seen_gen) & (s.technique == tech)
            row[tech] = eer(s.subset(bona | fake)) if bona.any() and fake.any() else None
        rows.append(row)
    avg = {"test": "Average", "seen_source": None, "seen_generator": None}
    for tech in ("TTA", "ATA"):
        vals = [r[tech] for r in rows if r[tech] is not None]
        avg[tech] = float(np.mean(vals)) if vals else None
    rows.append(avg)
    return rows


BREAKDOWN_AXES = ("audio_kind", "generator_id", "source_id", "technique", "seen_source", "seen_generator")


@dataclass
class EvalReport:
    overall: MetricBlock
    breakdowns: dict = field(default_factory=dict)
    seen: list | None = None
    context: dict = field(default_factory=dict)

    @property
    def accuracy(self):
        return self.overall.acc

    @property
    def f1(self):
        return self.overall.f1

    @property
    def auc(self):
        return self.overall.auc

    @property
    def eer(self):
        return self.overall.eer

    @property
    def confusion(self):
        return np.asarray(self.overall.confusion)

    def to_dict(self) -> dict:
        out = {**self.context, **self.overall.to_dict()}
        out["breakdowns"] = {
            axis: {key: block.to_dict() for key, block in blocks.items()} for axis, blocks in self.breakdowns.items()
        }
        if self.seen is not None:
            out["seen_matrix"] = self.seen
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _axis_key(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def evaluate(s: ScoreSet, axes=(), seen_report: bool = False, threshold: float = 0.5, context=None) -> EvalReport:
    """Overall metrics, one block per value of each breakdown axis, optionally the seen matrix."""
    _require_nonempty(s)
    breakdowns = {}
    for axis in axes:
        if axis not in BREAKDOWN_AXES:
            raise ValueError(f"unknown breakdown axis {axis!r}; expected one of {BREAKDOWN_AXES}")
        column = getattr(s, axis)
        keys = sorted({_axis_key(v) for v in column})
        breakdowns[axis] = {
            k: metric_block(s.subset(np.array([_axis_key(v) == k for v in column])), threshold) for k in keys
        }
    return EvalReport(
        overall=metric_block(s, threshold),
        breakdowns=breakdowns,
        seen=seen_matrix(s) if seen_report else None,
        context=dict(context or {}),
    )


def fuse_scores(sets, method: str = "mean") -> ScoreSet:
    """Per-clip arithmetic mean of member scores; metadata comes from the first member.

    Output rows are ordered by clip id so the result does not depend on member order.
    """
    if method != "mean":
        raise ValueError(f"unsupported fusion method {method!r}; only 'mean' is available")
    sets = [s.sorted() for s in sets]
    if not sets:
        raise ValueError("nothing to fuse")
    ref = sets[0]
    for k, s in enumerate(sets[1:], start=1):
        if len(s) != len(ref) or np.any(s.clip_ids != ref.clip_ids):
            diff = sorted(set(ref.clip_ids) ^ set(s.clip_ids), key=str)
            if not diff:
                n = min(len(s), len(ref))
                diff = [ref.clip_ids[np.flatnonzero(s.clip_ids[:n] != ref.clip_ids[:n])[0]]] if n else ["?"]
            raise ClipMismatch(f"member {k} covers different clips; first mismatching id: {diff[0]}")
        for name in ("labels",) + META_FIELDS[1:]:
            bad = np.flatnonzero(getattr(s, name) != getattr(ref, name))
            if bad.size:
                raise LabelMismatch(f"member {k} disagrees on {name} for clip {ref.clip_ids[bad[0]]}")
    # summing in sorted order per clip makes the result bit-independent of member order
    stack = np.sort(np.stack([s.scores for s in sets]), axis=0)
    fused = stack.sum(axis=0) / len(sets)
    # keep the mean inside the member envelope despite float rounding
    fused = np.clip(fused, stack[0], stack[-1])
    return ScoreSet(**{**{n: getattr(ref, n) for n in _COLUMNS}, "scores": fused})


# serialisation ---------------------------------------------------------------


def _fmt_bool(v) -> str:
    return "true" if v else "false"


def format_scores(s: ScoreSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_HEADER)
    for i in range(len(s)):
        w.writerow([
            s.clip_ids[i], repr(float(s.scores[i])), int(s.labels[i]), s.generator_id[i], s.source_id[i],
            s.audio_kind[i], _fmt_bool(s.seen_source[i]), _fmt_bool(s.seen_generator[i]), s.technique[i],
        ])
    return buf.getvalue()


def write_scores(s: ScoreSet, path) -> None:
    Path(path).write_text(format_scores(s))


def _parse_bool(text: str, lineno: int, name: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise InvalidRow(f"row {lineno}: field '{name}' must be true/false, got {text!r}")


def _parse_score(text: str, lineno: int) -> float:
    # comma decimals ("0,98") are accepted as dot decimals
    try:
        return float(text.strip().replace(",", "."))
    except ValueError:
        raise InvalidRow(f"row {lineno}: field 'score' is not a number: {text!r}") from None


def parse_scores(text: str) -> ScoreSet:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != SCORE_HEADER:
        raise BadHeader(f"score header must be {','.join(SCORE_HEADER)}, got {header}")
    cols = {name: [] for name in SCORE_HEADER}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(SCORE_HEADER):
            raise InvalidRow(f"row {lineno}: expected {len(SCORE_HEADER)} fields, got {len(row)}")
        rec = dict(zip(SCORE_HEADER, row))
        score = _parse_score(rec["score"], lineno)
        if not (np.isfinite(score) and 0 <= score <= 1):
            raise InvalidRow(f"row {lineno}: field 'score' must lie in [0, 1], got {score}")
        if rec["label"] not in ("0", "1"):
            raise InvalidRow(f"row {lineno}: field 'label' must be 0 or 1, got {rec['label']!r}")
        if rec["technique"] not in TECHNIQUES:
            raise InvalidRow(f"row {lineno}: field 'technique' must be one of {TECHNIQUES}")
        cols["clip_id"].append(rec["clip_id"])
        cols["score"].append(score)
        cols["label"].append(int(rec["label"]))
        for name in ("generator_id", "source_id", "audio_kind", "technique"):
            cols[name].append(rec[name])
        for name in ("seen_source", "seen_generator"):
            cols[name].append(_parse_bool(rec[name], lineno, name))
    return ScoreSet(
        clip_ids=cols["clip_id"], scores=cols["score"], labels=cols["label"],
        generator_id=cols["generator_id"], source_id=cols["source_id"], audio_kind=cols["audio_kind"],
        seen_source=cols["seen_source"], seen_generator=cols["seen_generator"], technique=cols["technique"],
    )


def read_scores(path) -> ScoreSet:
    return parse_scores(Path(path).read_text())
