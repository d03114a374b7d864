"""Ranking metrics and scenario-sliced evaluation."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import (
    BundleTable,
    BundlingCase,
    PopClass,
    PopularityProfile,
    Scenario,
    compute_popularity,
    label_case,
    make_scenario_cases,
)

DEFAULT_KS = (20, 40)
CHUNK = 128


@dataclass
class MetricsReport:
    scenario: str
    count: int
    metrics: dict | None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"scenario": self.scenario, "count": self.count, "metrics": self.metrics}
        out.update(self.extra)
        return out

    def get(self, name: str):
        return None if self.metrics is None else self.metrics.get(name)


@dataclass(frozen=True)
class RankedList:
    case_id: int
    items: np.ndarray


def _order(scores: np.ndarray) -> np.ndarray:
    # descending score, ties by ascending item id
    return np.argsort(-scores, kind="stable")


def rank_case(logits, case: BundlingCase) -> RankedList:
    scores = np.asarray(logits, dtype=np.float64).reshape(-1)
    order = _order(scores)
    keep = ~np.isin(order, np.asarray(case.query, dtype=np.int64))
    return RankedList(case.bundle, order[keep])


def recall_at_k(ranked, targets, k: int) -> float:
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    targets = set(int(t) for t in targets)
    if not targets:
        raise ValueError("recall needs a non-empty target set")
    items = ranked.items if isinstance(ranked, RankedList) else np.asarray(ranked)
    hits = sum(1 for i in items[:k].tolist() if i in targets)
    return hits / len(targets)


def ndcg_at_k(ranked, targets, k: int) -> float:
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    targets = set(int(t) for t in targets)
    if not targets:
        raise ValueError("ndcg needs a non-empty target set")
    items = ranked.items if isinstance(ranked, RankedList) else np.asarray(ranked)
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(items[:k].tolist()) if i in targets)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(len(targets), k)))
    return dcg / idcg


def case_metrics(logits, case: BundlingCase, ks=DEFAULT_KS) -> dict:
    ranked = rank_case(logits, case)
    out = {}
    for k in ks:
        out[f"recall@{k}"] = recall_at_k(ranked, case.target, k)
        out[f"ndcg@{k}"] = ndcg_at_k(ranked, case.target, k)
    return out


def metric_names(ks) -> list:
    return [f"{m}@{k}" for k in ks for m in ("recall", "ndcg")]


def eval_threads() -> int:
    raw = os.environ.get("BUNDLEFORGE_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def score_cases(model, cases: Sequence[BundlingCase], threads: int | None = None) -> np.ndarray:
    """Logits for every case, scored in fixed-size chunks.

    Chunk boundaries do not depend on the thread count, so serial and parallel
    runs give identical numbers.
    """
    if not cases:
        return np.zeros((0, 0), dtype=np.float32)
    chunks = [cases[s:s + CHUNK] for s in range(0, len(cases), CHUNK)]
    threads = eval_threads() if threads is None else threads

    def run(chunk):
        return model.score([c.query for c in chunk])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts, axis=0)


def _sorted_cases(cases):
    return sorted(cases, key=lambda c: (c.bundle, c.query, c.target))


def evaluate(model, cases_by_scenario: dict, ks=DEFAULT_KS, threads: int | None = None) -> list:
    """Per-scenario mean of per-case metrics, one report per scenario."""
    reports = []
    for scenario, cases in cases_by_scenario.items():
        name = Scenario(scenario).value if isinstance(scenario, (Scenario, str)) else str(scenario)
        cases = _sorted_cases(cases)
        if not cases:
            reports.append(MetricsReport(name, 0, None))
            continue
        logits = score_cases(model, cases, threads)
        rows = [case_metrics(logits[j], c, ks) for j, c in enumerate(cases)]
        metrics = {m: float(np.mean([r[m] for r in rows])) for m in metric_names(ks)}
        reports.append(MetricsReport(name, len(cases), metrics))
    return reports


def label_breakdown(cases, profile: PopularityProfile) -> dict:
    """Count cases by the popularity label of their query/target split."""
    out = {s.value: 0 for s in Scenario if s is not Scenario.OVERALL}
    for c in cases:
        out[label_case(c.query, c.target, profile).value] += 1
    return out


def reports_to_json(reports, **extra) -> str:
    payload = {"reports": [r.to_json() for r in reports]}
    payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True)


# -- popularity sweep ------------------------------------------------------

def improvement_pct(new: float | None, base: float | None) -> float | None:
    if new is None or base is None or base == 0:
        return None
    return (new - base) / base * 100.0


def pop_to_lt_cases(table: BundleTable, bundle_ids, profile) -> list:
    cases = []
    for b in sorted(int(x) for x in bundle_ids):
        cases.extend(make_scenario_cases(table[b], profile, Scenario.POP_TO_LT, bundle=b))
    return cases


def popularity_sweep(
    models: dict, table: BundleTable, bundle_ids, counts, ratios=(0.5, 0.4, 0.3, 0.2, 0.1), ks=DEFAULT_KS,
    threads: int | None = None,
) -> list:
    """Pop-to-LT reports for each head/tail ratio and each named model.

    ``models`` maps a slot name (e.g. ``"backbone"``, ``"diet"``) to a model.
    Each row also carries the relative Recall@k improvement of the second slot
    over the first.
    """
    rows = []
    names = list(models)
    for r in ratios:
        profile = compute_popularity(counts, r, r)
        cases = pop_to_lt_cases(table, bundle_ids, profile)
        row = {"ratio": r, "count": len(cases), "reports": {}}
        for name in names:
            rep = evaluate(models[name], {Scenario.POP_TO_LT: cases}, ks, threads)[0]
            row["reports"][name] = rep.to_json()
        if len(names) >= 2:
            base, new = row["reports"][names[0]], row["reports"][names[1]]
            row["improvement_pct"] = {
                m: improvement_pct(
                    None if new["metrics"] is None else new["metrics"][m],
                    None if base["metrics"] is None else base["metrics"][m],
                )
                for m in metric_names(ks)
            }
        rows.append(row)
    return rows


# -- score distribution and case study --------------------------------------

def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def histogram(values, bins: int = 50, upper: float | None = None) -> tuple:
    """Counts over ``bins`` uniform bins on ``[0, upper]`` (default: max value)."""
    values = np.asarray(values, dtype=np.float64)
    if upper is None:
        upper = float(values.max()) if len(values) else 1.0
    if upper <= 0:
        upper = 1.0
    edges = np.linspace(0.0, upper, bins + 1)
    idx = np.clip(np.floor(values / upper * bins).astype(np.int64), 0, bins - 1)
    return np.bincount(idx, minlength=bins), edges


def score_distribution(model, cases, profile: PopularityProfile, bins: int = 50, threads=None) -> dict:
    """Softmax probability of each target, split into long-tail and popular targets."""
    cases = _sorted_cases(cases)
    groups = {"lt": [], "pop": []}
    if cases:
        probs = softmax_np(score_cases(model, cases, threads))
        for j, c in enumerate(cases):
            for t in c.target:
                cls = profile.classes[t]
                if cls == PopClass.TAIL:
                    groups["lt"].append(probs[j, t])
                elif cls == PopClass.HEAD:
                    groups["pop"].append(probs[j, t])
    upper = max([max(v) for v in groups.values() if v] or [1.0])
    out = {"upper": upper}
    for name, vals in groups.items():
        counts, edges = histogram(vals, bins, upper)
        out[name] = counts
        out["edges"] = edges
    return out


def write_histogram_csv(path, dist: dict) -> None:
    edges = dist["edges"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "lt_count", "pop_count"])
        for b in range(len(edges) - 1):
            w.writerow([f"{edges[b]:.9g}", f"{edges[b + 1]:.9g}", int(dist["lt"][b]), int(dist["pop"][b])])


def case_report(model, case: BundlingCase, profile: PopularityProfile, k: int = 5, item_ids=None) -> list:
    """Top-k completion candidates with logits, softmax scores and popularity tags."""
    logits = np.asarray(model.score([case.query]))[0]
    probs = softmax_np(logits)
    ranked = rank_case(logits, case)
    targets = set(case.target)
    rows = []
    for pos, item in enumerate(ranked.items[:k].tolist(), start=1):
        rows.append({
            "rank": pos,
            "item": item if item_ids is None else item_ids[item],
            "logit": float(logits[item]),
            "score": float(probs[item]),
            "popularity": PopClass(int(profile.classes[item])).name,
            "is_target": item in targets,
        })
    return rows


def write_case_report_csv(path, rows: list, bundle) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bundle", "rank", "item", "logit", "score", "popularity", "is_target"])
        for r in rows:
            w.writerow([bundle, r["rank"], r["item"], f"{r['logit']:.9g}", f"{r['score']:.9g}",
                        r["popularity"], int(r["is_target"])])
