"""Consistency, accuracy and efficiency metrics for unlearning runs."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .dataio import InteractionDataset
from .mfmodel import ModelState, predict_pairs, rank_items, user_scores

DEFAULT_KS = (10, 20, 50)


def repredict_score(model: ModelState, pairs) -> float:
    """Mean raw score of the model on ``pairs`` (no squashing)."""
    pairs = np.asarray(list(pairs) if isinstance(pairs, (set, frozenset)) else pairs,
                       dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("re-predict score needs at least one pair")
    return float(np.mean(predict_pairs(model, pairs)))


def _check_unique(lst, name):
    if len(set(lst)) != len(lst):
        raise ValueError(f"{name} contains duplicate items")


def rbo(list_a: Sequence, list_b: Sequence, p: float = 0.9, k: int | None = None,
        variant: Literal["min", "extrapolated"] = "extrapolated") -> float:
    """Rank-biased overlap of two rankings evaluated to depth ``k``.

    ``min`` is the truncated sum ``(1 - p) sum_d p^(d-1) A_d``; ``extrapolated``
    adds ``A_k p^k``, assuming the depth-``k`` agreement continues forever.
    Depth is capped at the shorter list.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("persistence p must lie in (0, 1)")
    if variant not in ("min", "extrapolated"):
        raise ValueError(f"unknown RBO variant {variant!r}")
    a, b = list(list_a), list(list_b)
    _check_unique(a, "list_a")
    _check_unique(b, "list_b")
    depth = min(len(a), len(b)) if k is None else min(k, len(a), len(b))
    if depth == 0:
        return 0.0
    seen_a, seen_b = set(), set()
    overlap = 0
    total = 0.0
    agreement = 0.0
    for d in range(1, depth + 1):
        x, y = a[d - 1], b[d - 1]
        if x == y:
            overlap += 1
        else:
            overlap += (x in seen_b) + (y in seen_a)
        seen_a.add(x)
        seen_b.add(y)
        agreement = overlap / d
        total += p ** (d - 1) * agreement
    value = (1.0 - p) * total
    if variant == "extrapolated":
        value += agreement * p ** depth
    return min(1.0, max(0.0, value))


def recall_ndcg(ranked: Sequence[int], relevant, k: int) -> tuple[float, float]:
    rel = set(int(v) for v in relevant)
    if not rel:
        raise ValueError("no relevant items")
    top = list(ranked)[:k]
    hits = [1.0 if int(v) in rel else 0.0 for v in top]
    dcg = sum(g / math.log2(i + 2) for i, g in enumerate(hits))
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(rel))))
    return sum(hits) / len(rel), dcg / idcg


def _ranking(model: ModelState, ds: InteractionDataset, u: int, k: int) -> np.ndarray:
    return rank_items(user_scores(model, u), k, ds.by_user(u))


def recall_at_k(model: ModelState, ds: InteractionDataset, u: int, k: int) -> float:
    """Test-set recall of ``u``'s top ``k`` among items not trained on."""
    return recall_ndcg(_ranking(model, ds, u, k), ds.test_items(u), k)[0]


def ndcg_at_k(model: ModelState, ds: InteractionDataset, u: int, k: int) -> float:
    """Binary-gain NDCG of ``u``'s top ``k`` among items not trained on."""
    return recall_ndcg(_ranking(model, ds, u, k), ds.test_items(u), k)[1]


def accuracy_report(model: ModelState, ds: InteractionDataset, users, ks=DEFAULT_KS):
    """Mean recall/NDCG over ``users`` that have test positives."""
    recall = {k: [] for k in ks}
    ndcg = {k: [] for k in ks}
    kmax = max(ks)
    for u in users:
        test = ds.test_items(int(u))
        if len(test) == 0:
            continue
        ranked = _ranking(model, ds, int(u), kmax)
        for k in ks:
            r, n = recall_ndcg(ranked, test, k)
            recall[k].append(r)
            ndcg[k].append(n)
    mean = lambda xs: float(np.mean(xs)) if xs else float("nan")
    return {k: mean(v) for k, v in recall.items()}, {k: mean(v) for k, v in ndcg.items()}


def consistency_report(model_u: ModelState, model_gold: ModelState, users,
                       ds: InteractionDataset, ks=DEFAULT_KS, p: float = 0.9,
                       variant: str = "extrapolated") -> dict[int, float]:
    """Per-user mean RBO@k between the two models' top-k lists.

    Candidates exclude each user's training items in ``ds`` (the remaining
    data), so forgotten items stay rankable.
    """
    kmax = max(ks)
    scores = {k: [] for k in ks}
    for u in users:
        u = int(u)
        excl = ds.by_user(u)
        top_u = rank_items(user_scores(model_u, u), kmax, excl).tolist()
        top_g = rank_items(user_scores(model_gold, u), kmax, excl).tolist()
        for k in ks:
            scores[k].append(rbo(top_u, top_g, p, k, variant))
    return {k: float(np.mean(v)) if v else float("nan") for k, v in scores.items()}


def speedup(retrain_seconds: float, unlearn_seconds: float) -> float:
    if retrain_seconds <= 0 or unlearn_seconds <= 0:
        raise ValueError("running times must be positive")
    return retrain_seconds / unlearn_seconds


# reports -----------------------------------------------------------------


@dataclass
class EvalReport:
    method_name: str
    user_scope: Literal["forgetting_users", "all_users"]
    repredict_score: float = float("nan")
    rbo_at: dict = field(default_factory=dict)
    recall_at: dict = field(default_factory=dict)
    ndcg_at: dict = field(default_factory=dict)
    runtime_seconds: float = float("nan")
    speedup_vs_retrain: float | None = None


TIMING_COLUMNS = ("runtime_seconds", "speedup_vs_retrain")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def report_columns(ks=DEFAULT_KS) -> list[str]:
    return (["method", "user_scope", "repredict_score"]
            + [f"rbo@{k}" for k in ks] + [f"recall@{k}" for k in ks]
            + [f"ndcg@{k}" for k in ks] + list(TIMING_COLUMNS))


def reports_to_csv(reports: Sequence[EvalReport], ks=DEFAULT_KS, timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = report_columns(ks)
    if not timing:
        cols = cols[:-len(TIMING_COLUMNS)]
    w.writerow(cols)
    for r in reports:
        row = [r.method_name, r.user_scope, _fmt(r.repredict_score)]
        row += [_fmt(r.rbo_at.get(k)) for k in ks]
        row += [_fmt(r.recall_at.get(k)) for k in ks]
        row += [_fmt(r.ndcg_at.get(k)) for k in ks]
        if timing:
            row += [_fmt(r.runtime_seconds), _fmt(r.speedup_vs_retrain)]
        w.writerow(row)
    return buf.getvalue()


def _cell(x, digits=4) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return f"{x:.{digits}f}"


def reports_to_markdown(reports: Sequence[EvalReport], ks=DEFAULT_KS, title: str = "") -> str:
    """Three tables: consistency and accuracy for forgetting users, efficiency."""
    fu = [r for r in reports if r.user_scope == "forgetting_users"]
    out = [f"# {title}" if title else "# Unlearning benchmark", ""]

    out += ["## Consistency (forgetting users, training set)", "",
            "| Method | Re-Predict Score | " + " | ".join(f"RBO@{k}" for k in ks) + " |",
            "|---|---|" + "---|" * len(ks)]
    for r in fu:
        out.append(f"| {r.method_name} | {_cell(r.repredict_score)} | "
                   + " | ".join(_cell(r.rbo_at.get(k)) for k in ks) + " |")

    out += ["", "## Accuracy (forgetting users, test set)", "",
            "| Method | " + " | ".join(f"Recall@{k}" for k in ks) + " | "
            + " | ".join(f"NDCG@{k}" for k in ks) + " |",
            "|---|" + "---|" * (2 * len(ks))]
    for r in fu:
        out.append(f"| {r.method_name} | " + " | ".join(_cell(r.recall_at.get(k)) for k in ks)
                   + " | " + " | ".join(_cell(r.ndcg_at.get(k)) for k in ks) + " |")

    out += ["", "## Efficiency (all users, training set)", "",
            "| Method | Running-time (seconds) | Speed-up |", "|---|---|---|"]
    for r in fu:
        out.append(f"| {r.method_name} | {_cell(r.runtime_seconds, 2)} | "
                   f"{_cell(r.speedup_vs_retrain, 2)} |")
    return "\n".join(out) + "\n"
