"""bundleforge command line.

Typical run, all artifacts under one directory::

    bundleforge synth --out run
    bundleforge feedback --out run
    bundleforge train-teacher --out run
    bundleforge train --out run --distill logits
    bundleforge eval --out run --distill logits
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .checkpoint import CheckpointError
from .config import ExperimentConfig, load_config
from .corpus import (
    ConfigError,
    DataFormatError,
    Scenario,
    compute_popularity,
    dataset_checksum,
    load_dataset,
    save_dataset,
)
from .diet import DistillMode, Variant
from .evaluation import (
    case_report,
    reports_to_json,
    score_distribution,
    write_histogram_csv,
)
from .feedback import FeedbackTable

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5


class MissingArtifact(Exception):
    def __init__(self, path, producer: str):
        super().__init__(f"{path} not found; run `bundleforge {producer}` first")


# -- artifact locations ------------------------------------------------------

def _data_dir(args, cfg) -> Path:
    return Path(cfg.data_dir) if cfg.data_dir else Path(args.out) / "data"


def _model_name(args) -> str:
    if getattr(args, "model", "student") == "teacher":
        return "teacher"
    return f"student_{args.distill}"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


def _load_data(args, cfg):
    d = _data_dir(args, cfg)
    _require(d / "bundles.tsv", "synth")
    return load_dataset(d)


def _load_feedback(args):
    return FeedbackTable.load(_require(Path(args.out) / "feedback.bndf", "feedback"))


def _load_teacher(args):
    return ex.load_teacher(_require(Path(args.out) / "teacher.bndc", "train-teacher"))


def _load_model(args, cfg, data):
    name = _model_name(args)
    if name == "teacher":
        return _load_teacher(args), name
    path = _require(Path(args.out) / f"{name}.bndc", f"train --distill {args.distill}")
    return ex.load_student(path, data, _load_feedback(args)), name


def _write_json(path: Path, payload) -> None:
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=2, sort_keys=True)
    path.write_text(text + "\n")


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg):
    data = ex.synth(cfg)
    d = _data_dir(args, cfg)
    save_dataset(d, data)
    digest = dataset_checksum(d)
    _write_json(Path(args.out) / "synth.json", {
        "items": data.corpus.n, "users": data.interactions.n_users, "bundles": len(data.bundles),
        "interactions": data.interactions.nnz, "sha256": digest,
    })
    return (f"synth: {data.corpus.n} items, {data.interactions.n_users} users, {len(data.bundles)} bundles, "
            f"{data.interactions.nnz} interactions -> {d} (sha256 {digest[:12]})")


def cmd_feedback(args, cfg):
    data = _load_data(args, cfg)
    fb = ex.feedback(cfg, data)
    path = Path(args.out) / "feedback.bndf"
    fb.save(path)
    return f"feedback: {fb.n}x{fb.dim} LightGCN item features -> {path}"


def _train_summary(name, history, path):
    return f"{name}: best epoch {history.best_epoch}, val recall@20 {history.best_recall:.4f} -> {path}"


def cmd_train_teacher(args, cfg):
    data = _load_data(args, cfg)
    teacher, history = ex.teacher(cfg, data)
    path = Path(args.out) / "teacher.bndc"
    ex.save_model(path, teacher)
    (Path(args.out) / "teacher_log.tsv").write_text(history.to_tsv())
    return _train_summary("train-teacher", history, path)


def cmd_train(args, cfg):
    data = _load_data(args, cfg)
    fb = _load_feedback(args)
    mode = DistillMode(args.distill)
    teacher = None if mode is DistillMode.NONE else _load_teacher(args)
    student, history = ex.student(cfg, data, fb, teacher, mode)
    name = f"student_{mode.value}"
    path = Path(args.out) / f"{name}.bndc"
    ex.save_model(path, student)
    (Path(args.out) / f"{name}_log.tsv").write_text(history.to_tsv())
    return _train_summary(f"train[{mode.value}]", history, path)


def _scenarios(args, cfg):
    return [args.scenario] if args.scenario else list(cfg.scenarios)


def cmd_eval(args, cfg):
    data = _load_data(args, cfg)
    model, name = _load_model(args, cfg, data)
    reports = ex.evaluate_model(cfg, data, model, _scenarios(args, cfg))
    path = Path(args.out) / f"eval_{name}.json"
    _write_json(path, reports_to_json(reports, model=name, seed=cfg.seed,
                                      head_ratio=cfg.head_ratio, tail_ratio=cfg.tail_ratio))
    k = cfg.ks[0]
    parts = [f"{r.scenario}={_fmt(r.get(f'recall@{k}'))} (n={r.count})" for r in reports]
    return f"eval[{name}] recall@{k}: " + " ".join(parts) + f" -> {path}"


def cmd_sweep(args, cfg):
    data = _load_data(args, cfg)
    fb = _load_feedback(args)
    base = _require(Path(args.out) / "student_none.bndc", "train --distill none")
    diet = _require(Path(args.out) / f"student_{args.distill}.bndc", f"train --distill {args.distill}")
    models = {"backbone": ex.load_student(base, data, fb), "diet": ex.load_student(diet, data, fb)}
    rows = ex.sweep(cfg, data, models)
    out = Path(args.out)
    _write_json(out / "sweep.json", {"seed": cfg.seed, "rows": rows})
    k = cfg.ks[0]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ratio", "count", f"backbone_recall@{k}", f"diet_recall@{k}", "improvement_pct"])
        for r in rows:
            b, d = r["reports"]["backbone"]["metrics"], r["reports"]["diet"]["metrics"]
            imp = r["improvement_pct"][f"recall@{k}"]
            w.writerow([r["ratio"], r["count"], "" if b is None else f"{b[f'recall@{k}']:.6f}",
                        "" if d is None else f"{d[f'recall@{k}']:.6f}", "" if imp is None else f"{imp:.3f}"])
    imps = " ".join(f"{r['ratio']}:{_fmt(r['improvement_pct'][f'recall@{k}'])}" for r in rows)
    return f"sweep: pop2lt recall@{k} improvement % by ratio {imps} -> {out / 'sweep.csv'}"


def cmd_ablate(args, cfg):
    data = _load_data(args, cfg)
    fb = _load_feedback(args)
    variants = [Variant.FULL, Variant.WO_UI, Variant.WO_MM, Variant.WO_BI]
    if args.variant != "all":
        variants = [Variant.FULL, Variant(args.variant)]
    results = {}
    for v in variants:
        model, history = ex.student(cfg, data, fb, None, DistillMode.NONE, v)
        reports = ex.evaluate_model(cfg, data, model, _scenarios(args, cfg))
        results[v.value] = {"best_epoch": history.best_epoch, "reports": [r.to_json() for r in reports]}
    path = Path(args.out) / "ablate.json"
    _write_json(path, {"seed": cfg.seed, "variants": results})
    k = cfg.ks[0]
    parts = []
    for name, res in results.items():
        rec = next((r["metrics"] for r in res["reports"] if r["scenario"] == "pop2lt"), None)
        parts.append(f"{name}={_fmt(None if rec is None else rec[f'recall@{k}'])}")
    return f"ablate pop2lt recall@{k}: " + " ".join(parts) + f" -> {path}"


def cmd_report(args, cfg):
    data = _load_data(args, cfg)
    model, name = _load_model(args, cfg, data)
    profile = compute_popularity(data.interactions, cfg.head_ratio, cfg.tail_ratio)
    cases = ex.eval_cases(cfg, data, [args.scenario or Scenario.POP_TO_LT.value])
    flat = [c for v in cases.values() for c in v]
    out = Path(args.out)
    dist = score_distribution(model, flat, profile, cfg.bins)
    hist_path = out / f"histogram_{name}.csv"
    write_histogram_csv(hist_path, dist)
    case_path = out / f"cases_{name}.csv"
    with open(case_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bundle", "rank", "item", "logit", "score", "popularity", "is_target"])
        for c in flat[: args.cases]:
            for r in case_report(model, c, profile, args.k_report, data.corpus.item_ids):
                w.writerow([data.bundles.ids[c.bundle], r["rank"], r["item"], f"{r['logit']:.9g}",
                            f"{r['score']:.9g}", r["popularity"], int(r["is_target"])])
    return (f"report[{name}]: {int(dist['lt'].sum())} long-tail / {int(dist['pop'].sum())} popular target "
            f"scores -> {hist_path}; {min(len(flat), args.cases)} case studies -> {case_path}")


COMMANDS = {
    "synth": cmd_synth,
    "feedback": cmd_feedback,
    "train-teacher": cmd_train_teacher,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", default=None, help="artifact directory")
    common.add_argument("--distill", choices=[m.value for m in DistillMode], default="logits")
    common.add_argument("--scenario", choices=[s.value for s in Scenario if s is not Scenario.MIXED])
    common.add_argument("--head-ratio", type=float)
    common.add_argument("--tail-ratio", type=float)
    common.add_argument("--k", help="comma-separated cutoffs, e.g. 20,40")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bundleforge", description="Debiased product bundling experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("eval", "report"):
            sp.add_argument("--model", choices=["student", "teacher"], default="student")
        if name == "ablate":
            sp.add_argument("--variant", choices=["all"] + [v.value for v in Variant if v is not Variant.FULL],
                            default="all")
        if name == "report":
            sp.add_argument("--cases", type=int, default=10, help="number of case studies")
            sp.add_argument("--k-report", type=int, default=5, help="rows per case study")
    return p


def resolve_config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.head_ratio is not None:
        overrides["head_ratio"] = args.head_ratio
    if args.tail_ratio is not None:
        overrides["tail_ratio"] = args.tail_ratio
    if args.k:
        overrides["ks"] = args.k
    if args.out is not None:
        overrides["out"] = args.out
    cfg = load_config(args.config, overrides)
    args.out = cfg.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        print(COMMANDS[args.command](args, cfg))
        return 0
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error[missing]: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DataFormatError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"error[checkpoint]: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, ValueError, KeyError) as exc:
        print(f"error[runtime]: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
