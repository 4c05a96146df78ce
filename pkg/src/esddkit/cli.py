"""``esdd`` command line: synth-data, extract, train, eval, ensemble, report.

Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 numeric failure.
Settings come from built-in defaults, then ``--config``, then ``ESDD_SEED``,
then explicit flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import data as ds
from . import metrics as mt
from . import report as rp
from .audio import load_wav
from .config import RunConfig, load_config
from .errors import ConfigError, ConfigMismatch, ESDDError, IoError
from .features import normalize, read_feat, spectrogram, write_feat
from .model import init_model, load_checkpoint, predict_scores, save_checkpoint
from .training import TrainingData, run_three_stage, stage_dict

logger = logging.getLogger("esddkit")

DEFAULTS = RunConfig()
FEATURE_INDEX = "index.json"
EVAL_AXES = ("audio_kind", "generator_id", "seen_source", "seen_generator", "technique")


class _Tracked(argparse.Action):
    """Store the value and remember that the flag was given explicitly."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace._explicit = getattr(namespace, "_explicit", set()) | {self.dest}


class _TrackedTrue(_Tracked):
    def __init__(self, option_strings, dest, default=False, help=None):
        super().__init__(option_strings, dest, nargs=0, default=default, help=help)

    def __call__(self, parser, namespace, values, option_string=None):
        super().__call__(parser, namespace, True, option_string)


def _csv_of(kind):
    def parse(text):
        try:
            return tuple(kind(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values, got {text!r}") from None

    return parse


# flag dest -> (section, key) in RunConfig
FLAG_KEYS = {
    "seed": ("run", "seed"),
    "kind": ("spectrogram", "kind"),
    "strategy": ("training", "strategy"),
    "epochs": ("training", "plain_epochs"),
    "stage_epochs": ("training", "epochs"),
    "learning_rates": ("training", "learning_rates"),
    "batch_size": ("training", "batch_size"),
    "preset": ("data", "preset"),
    "clips_dev": ("data", "clips_dev"),
    "clips_test": ("data", "clips_test"),
}


def _settings(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    for dest in getattr(args, "_explicit", set()):
        if dest in FLAG_KEYS:
            cfg.set(*FLAG_KEYS[dest], getattr(args, dest))
    return cfg


def _d(section, key):
    return DEFAULTS.get(section, key)


def _add_common(p, seed=False):
    p.add_argument("--config", default=None, help="run configuration file (flat key = value with [sections])")
    if seed:
        p.add_argument("--seed", type=int, default=_d("run", "seed"), action=_Tracked,
                       help="random seed (ESDD_SEED overrides the config file; this flag overrides both)")


def _add_kind(p):
    p.add_argument("--kind", type=str.upper, choices=("MEL", "CQT", "GAM"), default=_d("spectrogram", "kind"),
                   action=_Tracked, help="spectrogram frontend")


def _add_case(p):
    p.add_argument("--case", choices=sorted(ds.CASES), default="joint",
                   help="test case: 1 scene, 2 event, 3a scene->event, 3b event->scene, joint both kinds")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="esdd", description="Environmental sound deepfake detection toolkit.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a deterministic synthetic corpus", formatter_class=fmt)
    _add_common(p, seed=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=("default", "acceptance"), default=_d("data", "preset"), action=_Tracked,
                   help="default: held-out source and generator; acceptance: held-out generator only")
    p.add_argument("--clips-dev", type=int, default=_d("data", "clips_dev"), action=_Tracked,
                   help="clips per (source, generator) cell in the dev split")
    p.add_argument("--clips-test", type=int, default=_d("data", "clips_test"), action=_Tracked,
                   help="clips per (source, generator) cell in the test split")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("extract", help="compute normalised spectrogram .feat files", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--manifest", required=True, help="manifest CSV; WAV paths are relative to its folder")
    _add_kind(p)
    p.add_argument("--out", required=True, help="feature root; files go to <out>/<KIND>/<clip_id>.feat")
    p.add_argument("--workers", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a detector on the dev split of a test case", formatter_class=fmt)
    _add_common(p, seed=True)
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--features", required=True, help="feature root written by extract")
    _add_kind(p)
    _add_case(p)
    p.add_argument("--strategy", choices=("three-stage", "plain"), default=_d("training", "strategy"), action=_Tracked,
                   help="three-stage metric-learning schedule or a single cross-entropy stage")
    p.add_argument("--epochs", type=int, default=_d("training", "plain_epochs"), action=_Tracked,
                   help="epochs for --strategy plain")
    p.add_argument("--stage-epochs", type=_csv_of(int), default=_d("training", "epochs"), action=_Tracked,
                   help="epochs of stages 1,2,3 for --strategy three-stage")
    p.add_argument("--learning-rates", type=_csv_of(float), default=_d("training", "learning_rates"),
                   action=_Tracked, help="learning rates of stages 1,2,3")
    p.add_argument("--batch-size", type=int, default=_d("training", "batch_size"), action=_Tracked,
                   help="minibatch size")
    p.add_argument("--out", required=True, help="run directory for checkpoints and the training log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score the test split and compute metrics", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--features", required=True, help="feature root written by extract")
    _add_kind(p)
    _add_case(p)
    p.add_argument("--system", default=None, help="row label in reports (default: the spectrogram kind)")
    p.add_argument("--seen-report", action=_TrackedTrue, help="add the seen-source x seen-generator EER matrix")
    p.add_argument("--out", required=True, help="directory for scores.csv and report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="mean-fuse score files and evaluate", formatter_class=fmt)
    p.add_argument("scores", nargs="+", help="two or more scores.csv files over the same clips")
    p.add_argument("--system", default="All Spec. (ensemble)", help="row label in reports")
    p.add_argument("--case", choices=sorted(ds.CASES), default=None,
                   help="test case label (default: taken from the first member's report.json)")
    p.add_argument("--seen-report", action=_TrackedTrue, help="add the seen-source x seen-generator EER matrix")
    p.add_argument("--out", required=True, help="directory for scores.csv and report.json")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("report", help="tables and figures from report.json files", formatter_class=fmt)
    p.add_argument("reports", nargs="+", help="report.json files written by eval or ensemble")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--delimiter", choices=("comma", "tab"), default="comma", help="field separator of table files")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    p.set_defaults(func=cmd_report)
    return parser


# commands ------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _settings(args)
    maker = ds.acceptance_spec if cfg.get("data", "preset") == "acceptance" else ds.default_spec
    spec = maker(cfg.seed)
    counts = {"dev": cfg.get("data", "clips_dev"), "test": cfg.get("data", "clips_test")}
    if min(counts.values()) < 0:
        raise ConfigError("clip counts must be >= 0")
    spec = replace(spec, n_clips=counts)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    entries = ds.synthesize_dataset(spec, out)
    print(out / "manifest.csv")
    logger.info("%d clips written", len(entries))
    return 0


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _extract_one(job):
    wav, feat, spec_cfg = job
    try:
        values = normalize(spectrogram(load_wav(wav), spec_cfg)).values
        write_feat(feat, values)
        return None
    except ESDDError as exc:
        return f"{wav}: {exc}"
    except OSError as exc:
        return f"{wav}: {exc}"


def _read_index(path: Path) -> dict:
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return {}


def cmd_extract(args) -> int:
    cfg = _settings(args)
    spec_cfg = cfg.spectrogram()
    manifest = Path(args.manifest)
    entries = ds.load_manifest(manifest)
    root = manifest.parent
    out = Path(args.out) / spec_cfg.kind
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    index_path = out / FEATURE_INDEX
    index = _read_index(index_path)

    jobs, keys, failures = [], {}, []
    skipped = 0
    for e in entries:
        wav = root / e.path
        feat = out / f"{e.clip_id}.feat"
        try:
            wav_hash = _sha256(wav)
        except OSError as exc:
            failures.append(f"{wav}: {exc}")
            continue
        known = index.get(e.clip_id, {})
        if (known.get("wav") == wav_hash and known.get("config") == spec_cfg.config_hash
                and feat.exists() and known.get("feat") == _sha256(feat)):
            skipped += 1
            continue
        jobs.append((wav, feat, spec_cfg))
        keys[str(wav)] = (e.clip_id, wav_hash, feat)

    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_extract_one, jobs, chunksize=8))
    else:
        results = [_extract_one(j) for j in jobs]

    for job, err in zip(jobs, results):
        if err is not None:
            failures.append(err)
            continue
        clip_id, wav_hash, feat = keys[str(job[0])]
        index[clip_id] = {"wav": wav_hash, "config": spec_cfg.config_hash, "feat": _sha256(feat)}
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    written = len(jobs) - sum(r is not None for r in results)
    print(f"extract {spec_cfg.kind}: {written} written, {skipped} up to date, {len(failures)} failed")
    for msg in failures:
        print(f"error: {msg}", file=sys.stderr)
    return IoError.exit_code if failures else 0


def _load_features(entries, features_root, kind: str) -> np.ndarray:
    folder = Path(features_root) / kind
    missing = [e.clip_id for e in entries if not (folder / f"{e.clip_id}.feat").exists()]
    if missing:
        raise IoError(
            f"{len(missing)} feature file(s) missing under {folder} (first: {missing[0]}); "
            f"run `esdd extract --manifest <manifest> --kind {kind} --out {features_root}` first"
        )
    return np.stack([read_feat(folder / f"{e.clip_id}.feat") for e in entries])


def cmd_train(args) -> int:
    cfg = _settings(args)
    kind = cfg.spectrogram().kind
    train, _ = ds.split_test_cases(ds.load_manifest(args.manifest), args.case)
    classes = ds.generator_classes(train)
    features = _load_features(train, args.features, kind)
    data = TrainingData(
        features,
        labels=np.array([e.is_fake for e in train], dtype=np.int64),
        class_ids=np.array([classes[e.generator_id] for e in train], dtype=np.int64),
    )
    stages = cfg.stages()
    model = init_model(cfg.backbone(), n_classes=2, seed=cfg.seed, n_aux_classes=len(classes))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from exc
    model, log = run_three_stage(
        model, data, seed=cfg.seed, mixup_cfg=cfg.mixup(), loss_cfg=cfg.loss_settings(),
        batch_size=cfg.get("training", "batch_size"), checkpoint_dir=out, stages=stages,
    )
    (out / "model.ckpt").write_bytes(save_checkpoint(model))
    log.write(out / "train_log.jsonl")
    run = {
        "case": args.case,
        "kind": kind,
        "strategy": cfg.get("training", "strategy"),
        "seed": cfg.seed,
        "classes": classes,
        "stages": [stage_dict(s) for s in stages],
        "n_train": len(train),
    }
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    print(f"trained {len(log.records)} epoch(s); checkpoint {out / 'model.ckpt'}")
    return 0


def _score_set(entries, scores) -> mt.ScoreSet:
    return mt.ScoreSet(
        clip_ids=[e.clip_id for e in entries],
        scores=scores,
        labels=[int(e.is_fake) for e in entries],
        generator_id=[e.generator_id for e in entries],
        source_id=[e.source_id for e in entries],
        audio_kind=[e.audio_kind for e in entries],
        seen_source=[bool(e.seen_source) for e in entries],
        seen_generator=[bool(e.seen_generator) for e in entries],
        technique=[ds.technique_of(e.generator_id) for e in entries],
    )


def _write_eval(out, scores: mt.ScoreSet, report: mt.EvalReport) -> None:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        mt.write_scores(scores, out / "scores.csv")
        (out / "report.json").write_text(report.to_json() + "\n")
    except OSError as exc:
        raise IoError(f"cannot write results to {out}: {exc}") from exc
    rows = [{"system": report.context.get("system", ""), **report.overall.to_dict()}]
    print(rp.format_metrics_table(rows))
    if report.seen is not None:
        print()
        print(f"{'':<10}{'TTA':>8}{'ATA':>8}")
        for r in report.seen:
            cells = "".join(f"{'-' if r[t] is None else format(r[t], '.3f'):>8}" for t in ("TTA", "ATA"))
            print(f"{r['test']:<10}{cells}")


def cmd_eval(args) -> int:
    cfg = _settings(args)
    kind = cfg.spectrogram().kind
    ckpt = Path(args.checkpoint)
    try:
        model = load_checkpoint(ckpt.read_bytes())
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {ckpt}: {exc}") from exc
    run_file = ckpt.parent / "run.json"
    if run_file.exists():
        trained_kind = json.loads(run_file.read_text()).get("kind")
        if trained_kind and trained_kind != kind:
            raise ConfigMismatch(f"checkpoint was trained on {trained_kind} features, --kind is {kind}")
    plan = ds.TestCasePlan.named(args.case)
    train, test = ds.split_test_cases(ds.load_manifest(args.manifest), plan)
    test = ds.mark_seen_axes(test, train)
    scores = predict_scores(model, _load_features(test, args.features, kind))
    s = _score_set(test, scores)
    context = {"case": plan.case, "system": args.system or kind, "kind": kind,
               "train_kind": plan.train_kind, "test_kind": plan.test_kind}
    report = mt.evaluate(s, EVAL_AXES, seen_report=args.seen_report, context=context)
    _write_eval(args.out, s, report)
    return 0


def cmd_ensemble(args) -> int:
    if len(args.scores) < 2:
        raise ConfigError("ensemble needs at least two score files")
    try:
        members = [mt.read_scores(p) for p in args.scores]
    except OSError as exc:
        raise IoError(f"cannot read score file: {exc}") from exc
    fused = mt.fuse_scores(members)
    context = {"system": args.system, "members": list(args.scores)}
    sibling = Path(args.scores[0]).parent / "report.json"
    if sibling.exists():
        member_ctx = json.loads(sibling.read_text())
        for key in ("case", "train_kind", "test_kind"):
            if key in member_ctx:
                context[key] = member_ctx[key]
    if args.case is not None:
        plan = ds.TestCasePlan.named(args.case)
        context.update(case=plan.case, train_kind=plan.train_kind, test_kind=plan.test_kind)
    report = mt.evaluate(fused, EVAL_AXES, seen_report=args.seen_report, context=context)
    _write_eval(args.out, fused, report)
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.append(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        if "system" not in reports[-1]:
            raise ConfigError(f"{path} has no system field; was it written by eval or ensemble?")
    delimiter = "\t" if args.delimiter == "tab" else ","
    try:
        paths = rp.write_report(reports, args.out, delimiter=delimiter, figures=not args.no_figures)
    except OSError as exc:
        raise IoError(f"cannot write report to {args.out}: {exc}") from exc
    tables = rp.build_tables(reports)
    for case in ("1", "2"):
        t = tables.get(f"test_case_{case}")
        if t:
            print(f"case {case} ({t['kind']})")
            print(rp.format_metrics_table(t["rows"]))
            print()
    for p in paths:
        print(p)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except ESDDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IoError.exit_code
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
