"""Result tables and figures built from evaluation reports.

Every evaluation report carries a context block (case, system name, train and
test kinds). From a collection of them this module builds

* per-case tables for the scene-only and event-only cases, one row per
  system (single spectrograms and fused ensembles),
* a cross table of train kind x test kind,
* the seen-source x seen-generator EER matrix with TTA/ATA columns,

validates each against a JSON schema, and writes CSV/TSV files plus PNG
figures.
"""

from __future__ import annotations

import csv
import io
import json
import re
from pathlib import Path

import jsonschema

from .metrics import EvalReport

METRIC_KEYS = ("acc", "f1", "auc", "eer")
KIND_ORDER = ("scene", "event")

_metric = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
_system_row = {
    "type": "object",
    "required": ["system", *METRIC_KEYS],
    "properties": {"system": {"type": "string"}, **{k: _metric for k in METRIC_KEYS}},
}

SCHEMAS = {
    "test_case": {
        "type": "object",
        "required": ["case", "kind", "rows"],
        "properties": {
            "case": {"enum": ["1", "2"]},
            "kind": {"enum": list(KIND_ORDER)},
            "rows": {"type": "array", "minItems": 1, "items": _system_row},
        },
    },
    "cross": {
        "type": "object",
        "required": ["rows"],
        "properties": {
            "rows": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["system", "train_kind", "test_kind", *METRIC_KEYS],
                    "properties": {
                        "system": {"type": "string"},
                        "train_kind": {"enum": list(KIND_ORDER)},
                        "test_kind": {"enum": list(KIND_ORDER)},
                        **{k: _metric for k in METRIC_KEYS},
                    },
                },
            }
        },
    },
    "seen": {
        "type": "object",
        "required": ["system", "rows"],
        "properties": {
            "system": {"type": "string"},
            "rows": {
                "type": "array",
                "minItems": 5,
                "maxItems": 5,
                "items": {
                    "type": "object",
                    "required": ["test", "seen_source", "seen_generator", "TTA", "ATA"],
                    "properties": {
                        "test": {"enum": ["Test 01", "Test 02", "Test 03", "Test 04", "Average"]},
                        "seen_source": {"type": ["boolean", "null"]},
                        "seen_generator": {"type": ["boolean", "null"]},
                        "TTA": _metric,
                        "ATA": _metric,
                    },
                },
            },
        },
    },
}

CASE_KINDS = {"1": ("scene", "scene"), "2": ("event", "event"), "3a": ("scene", "event"), "3b": ("event", "scene")}


def validate(table: dict, name: str) -> dict:
    jsonschema.validate(table, SCHEMAS[name])
    return table


def _as_dict(report) -> dict:
    return report.to_dict() if isinstance(report, EvalReport) else dict(report)


def _metrics(d: dict) -> dict:
    return {k: d.get(k) for k in METRIC_KEYS}


def case_table(reports, case: str) -> dict:
    """Rows for one single-kind case, in input order."""
    rows = [{"system": d["system"], **_metrics(d)} for d in map(_as_dict, reports) if str(d.get("case")) == case]
    return validate({"case": case, "kind": CASE_KINDS[case][0], "rows": rows}, "test_case")


def cross_table(reports) -> dict:
    """Train kind x test kind rows from the single-kind and crossed cases."""
    rows = []
    for d in map(_as_dict, reports):
        case = str(d.get("case"))
        if case not in CASE_KINDS:
            continue
        train, test = CASE_KINDS[case]
        rows.append({"system": d["system"], "train_kind": train, "test_kind": test, **_metrics(d)})
    rows.sort(key=lambda r: (r["system"], KIND_ORDER.index(r["train_kind"]), KIND_ORDER.index(r["test_kind"])))
    return validate({"rows": rows}, "cross")


def seen_table(report) -> dict:
    d = _as_dict(report)
    if "seen_matrix" not in d:
        raise ValueError(f"report for {d.get('system')!r} has no seen/unseen matrix; evaluate with the seen report on")
    return validate({"system": d["system"], "rows": d["seen_matrix"]}, "seen")


def build_tables(reports) -> dict:
    """Every table the inputs support. Keys: test_case_1, test_case_2, cross, seen (list)."""
    reports = [_as_dict(r) for r in reports]
    cases = {str(d.get("case")) for d in reports}
    out: dict = {}
    for case in ("1", "2"):
        if case in cases:
            out[f"test_case_{case}"] = case_table(reports, case)
    if cases & set(CASE_KINDS):
        out["cross"] = cross_table(reports)
    seen = [seen_table(d) for d in reports if "seen_matrix" in d]
    if seen:
        out["seen"] = seen
    return out


# delimited output --------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_rows(rows, columns, delimiter: str = ",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def format_metrics_table(rows, label: str = "system") -> str:
    """Fixed-width text table for terminal output."""
    header = f"{label:<28}" + "".join(f"{k.upper():>8}" for k in METRIC_KEYS)
    lines = [header, "-" * len(header)]
    for r in rows:
        vals = "".join(f"{'-' if r.get(k) is None else format(r[k], '.2f'):>8}" for k in METRIC_KEYS)
        lines.append(f"{str(r.get(label)):<28}{vals}")
    return "\n".join(lines)


def _slug(text: str) -> str:
    return re.sub(r"[^0-9a-z]+", "_", text.lower()).strip("_") or "system"


def write_report(reports, out_dir, delimiter: str = ",", figures: bool = True) -> list[Path]:
    """Write tables (delimited + JSON) and figures; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = build_tables(reports)
    ext = "tsv" if delimiter == "\t" else "csv"
    written = []

    def emit(name, text):
        path = out_dir / name
        path.write_text(text)
        written.append(path)

    for case in ("1", "2"):
        t = tables.get(f"test_case_{case}")
        if t:
            emit(f"test_case_{case}.{ext}", format_rows(t["rows"], ("system", *METRIC_KEYS), delimiter))
    if "cross" in tables:
        emit(f"cross.{ext}", format_rows(tables["cross"]["rows"], ("system", "train_kind", "test_kind", *METRIC_KEYS), delimiter))
    for t in tables.get("seen", []):
        emit(f"seen_{_slug(t['system'])}.{ext}", format_rows(t["rows"], ("test", "seen_source", "seen_generator", "TTA", "ATA"), delimiter))
    emit("tables.json", json.dumps(tables, indent=2, sort_keys=True) + "\n")
    if figures:
        written.extend(render_figures(tables, out_dir))
    return written


# figures -------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    return path


def render_figures(tables: dict, out_dir) -> list[Path]:
    plt = _pyplot()
    out_dir = Path(out_dir)
    paths = []

    cases = [tables[k] for k in ("test_case_1", "test_case_2") if k in tables]
    if cases:
        fig, axes = plt.subplots(1, len(cases), figsize=(5.5 * len(cases), 3.6), squeeze=False)
        for ax, t in zip(axes[0], cases):
            systems = [r["system"] for r in t["rows"]]
            width = 0.8 / len(METRIC_KEYS)
            for i, k in enumerate(METRIC_KEYS):
                vals = [r[k] if r[k] is not None else 0.0 for r in t["rows"]]
                ax.bar([x + i * width for x in range(len(systems))], vals, width, label=k.upper())
            ax.set_xticks([x + 0.4 - width / 2 for x in range(len(systems))])
            ax.set_xticklabels(systems, rotation=20, ha="right", fontsize=8)
            ax.set_ylim(0, 1.05)
            ax.set_title(f"case {t['case']} ({t['kind']})")
        axes[0][0].legend(fontsize=7, ncol=4, loc="lower left")
        paths.append(_save(fig, out_dir / "test_cases.png"))
        plt.close(fig)

    if "cross" in tables:
        systems = sorted({r["system"] for r in tables["cross"]["rows"]})
        fig, axes = plt.subplots(1, len(systems), figsize=(3.4 * len(systems), 3.2), squeeze=False)
        for ax, system in zip(axes[0], systems):
            grid = [[float("nan")] * 2 for _ in range(2)]
            for r in tables["cross"]["rows"]:
                if r["system"] == system and r["auc"] is not None:
                    grid[KIND_ORDER.index(r["train_kind"])][KIND_ORDER.index(r["test_kind"])] = r["auc"]
            im = ax.imshow(grid, vmin=0.5, vmax=1.0, cmap="viridis")
            for i in range(2):
                for j in range(2):
                    if grid[i][j] == grid[i][j]:
                        ax.text(j, i, f"{grid[i][j]:.2f}", ha="center", va="center", color="w", fontsize=9)
            ax.set_xticks(range(2))
            ax.set_xticklabels(KIND_ORDER)
            ax.set_yticks(range(2))
            ax.set_yticklabels(KIND_ORDER)
            ax.set_xlabel("test kind")
            ax.set_ylabel("train kind")
            ax.set_title(f"{system}: AUC", fontsize=9)
        fig.colorbar(im, ax=list(axes[0]), shrink=0.8)
        fig.savefig(out_dir / "cross.png", dpi=120, metadata={"Software": None})
        paths.append(out_dir / "cross.png")
        plt.close(fig)

    for t in tables.get("seen", []):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        labels = [r["test"] for r in t["rows"]]
        for i, tech in enumerate(("TTA", "ATA")):
            vals = [r[tech] if r[tech] is not None else 0.0 for r in t["rows"]]
            ax.bar([x + i * 0.4 for x in range(len(labels))], vals, 0.4, label=tech)
        ax.set_xticks([x + 0.2 for x in range(len(labels))])
        ax.set_xticklabels(labels, fontsize=8)
        ax.set_ylabel("EER")
        ax.set_title(f"{t['system']}: seen/unseen EER", fontsize=9)
        ax.legend(fontsize=8)
        paths.append(_save(fig, out_dir / f"seen_{_slug(t['system'])}.png"))
        plt.close(fig)
    return paths
