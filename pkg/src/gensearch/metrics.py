"""Offline evaluation: Recall@K, MRR and valid-path rate, overall and by slice."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .decoding import Retriever, rank_results, valid_rate
from .sim import Corpus, SearchLogRecord, SearchSimulator

SLICES = ("all", "head", "tail", "new_user", "existing_user")


@dataclass
class EvalRecord:
    query_id: int
    user_id: int
    query_tokens: list[int]
    positives: frozenset[int]
    head: bool = True
    new_user: bool = False


@dataclass
class EvalSplit:
    kind: str  # "RK" or "CK"
    records: list[EvalRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("RK", "CK"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        for r in self.records:
            if not r.positives:
                raise ValueError("every evaluation record needs at least one positive")


def recall_at_k(ranked: Sequence[int], positives, K: int) -> float:
    if K < 1:
        raise ValueError("K must be >= 1")
    pos = set(positives)
    return len(pos.intersection(ranked[:K])) / len(pos)


def reciprocal_rank(ranked: Sequence[int], positives) -> float:
    """1 / rank of the first positive; 0 when none was retrieved."""
    pos = set(positives)
    for rank, item in enumerate(ranked, start=1):
        if item in pos:
            return 1.0 / rank
    return 0.0


def build_splits(corpus: Corpus, simulator: SearchSimulator, records: Sequence[SearchLogRecord] | None = None,
                 rk_top_m: int = 5, seed: int = 0) -> tuple[EvalSplit, EvalSplit]:
    """RK positives: top-M candidates by system reward. CK positives: simulated clicks.

    CK records with no click are dropped.
    """
    records = corpus.split("test") if records is None else records
    rng = np.random.default_rng(seed)
    rk, ck = EvalSplit("RK"), EvalSplit("CK")
    for rec in records:
        cands = np.array(rec.candidates)
        scores = simulator.system_rewards(rec.query_id, rec.user_id, cands)
        shown = cands[np.argsort(-scores, kind="stable")]
        meta = dict(query_id=rec.query_id, user_id=rec.user_id, query_tokens=list(rec.query_tokens),
                    head=corpus.queries[rec.query_id].head, new_user=corpus.is_new_user(rec.user_id))
        rk.records.append(EvalRecord(positives=frozenset(int(i) for i in shown[:rk_top_m]), **meta))
        outcomes = simulator.simulate_interactions(shown, rec.query_id, rec.user_id, rng)
        clicked = frozenset(o.item_id for o in outcomes if o.click)
        if clicked:
            ck.records.append(EvalRecord(positives=clicked, **meta))
    return rk, ck


def _in_slice(rec: EvalRecord, name: str) -> bool:
    return {
        "all": True,
        "head": rec.head,
        "tail": not rec.head,
        "new_user": rec.new_user,
        "existing_user": not rec.new_user,
    }[name]


@dataclass
class Retrieval:
    items: list[int]
    valid_rate: float


def retrieve_all(retriever: Retriever, records: Sequence[EvalRecord], constrained: bool = True,
                 cache: dict | None = None) -> list[Retrieval]:
    """Run retrieval once per distinct (query, user) pair."""
    cache = {} if cache is None else cache
    out = []
    for rec in records:
        key = (rec.query_id, rec.user_id, constrained)
        if key not in cache:
            paths = retriever.search(rec.query_tokens, rec.user_id, constrained=constrained)
            cache[key] = Retrieval([r.item_id for r in rank_results(paths, retriever.trie)],
                                   valid_rate(paths, retriever.trie))
        out.append(cache[key])
    return out


def metrics_from_retrievals(split: EvalSplit, retrievals: Sequence[Retrieval], K: int,
                            slices: Sequence[str] = SLICES) -> dict[str, dict[str, float]]:
    if not split.records:
        raise ValueError("cannot evaluate an empty split")
    if K < 1:
        raise ValueError("K must be >= 1")
    out = {}
    for name in slices:
        idx = [i for i, r in enumerate(split.records) if _in_slice(r, name)]
        if not idx:
            continue
        rec = [recall_at_k(retrievals[i].items, split.records[i].positives, K) for i in idx]
        rr = [reciprocal_rank(retrievals[i].items, split.records[i].positives) for i in idx]
        vr = [retrievals[i].valid_rate for i in idx]
        out[name] = {"recall_at_k": float(np.mean(rec)), "mrr": float(np.mean(rr)),
                     "valid_rate": float(np.mean(vr)), "n": len(idx)}
    return out


def evaluate(retriever: Retriever, split: EvalSplit, K: int, slices: Sequence[str] = SLICES,
             constrained: bool = True, cache: dict | None = None) -> dict[str, dict[str, float]]:
    """Recall@K, MRR and valid-path rate, overall ("all") and per slice."""
    if not split.records:
        raise ValueError("cannot evaluate an empty split")
    retrievals = retrieve_all(retriever, split.records, constrained, cache)
    return metrics_from_retrievals(split, retrievals, K, slices)


EVAL_HEADER = ["split", "decoding", "slice", "n_records", "K", "recall_at_k", "mrr", "valid_rate"]


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_HEADER)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.9g}" if isinstance(row[k], float) else row[k]) for k in EVAL_HEADER})


def metric_rows(split_name: str, decoding: str, K: int, result: dict[str, dict[str, float]]) -> list[dict]:
    return [{"split": split_name, "decoding": decoding, "slice": s, "n_records": m["n"], "K": K,
             "recall_at_k": m["recall_at_k"], "mrr": m["mrr"], "valid_rate": m["valid_rate"]}
            for s, m in result.items()]


def write_plot_data(path: str | Path, rows: list[dict]) -> None:
    """Long-form ``metric,slice,value`` file; metric names are split.decoding.name."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "slice", "value"])
        for row in rows:
            for name in ("recall_at_k", "mrr", "valid_rate"):
                w.writerow([f"{row['split']}.{row['decoding']}.{name}", row["slice"], f"{float(row[name]):.9g}"])
