"""Unified pre-training: residual contrastive alignment, codebook loss and
reject-sampled next-token prediction, optimized jointly in one step.

The batched objective takes an optional :class:`Frozen` snapshot holding
every stop-gradient quantity (prefix sums of latents, quantized vectors) and
the argmin code assignments. Passing the snapshot taken at the unperturbed
point makes the objective a smooth function of the parameters whose exact
gradient is the analytic one, which is what the finite-difference tests use.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codebook import entries_grad_to_params, quantize_batch, utilization
from .models import (
    codebook_entries,
    decoder_backward,
    decoder_forward,
    encode_items,
    item_backward,
    item_forward,
    pad_tokens,
    query_backward,
    query_forward,
)
from .numeric import ParamStore, clip_global_norm, log_softmax, make_optimizer, zeros_like_params
from .sim import Corpus, SearchLogRecord

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class PretrainConfig:
    tau: float = 0.1
    lambda_contrast: float = 1.0
    lambda_codebook: float = 1.0
    lambda_ntp: float = 1.0
    label_weights: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    alpha1: float = 1.0
    alpha2: float = 0.25
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    optimizer: str = "sgd"
    grad_clip: float = 5.0
    steps: int = 600
    n_negatives: int = 64
    hard_fraction: float = 1.0
    refresh_every: int = 100
    residual: bool = True
    coarse_to_fine: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if min(self.lambda_contrast, self.lambda_codebook, self.lambda_ntp) < 0:
            raise ValueError("loss weights must be >= 0")
        w = self.label_weights
        if len(w) != 4 or w[0] != 0.0 or any(b < a for a, b in zip(w, w[1:])):
            raise ValueError("label weights need w(0)=0 and must be non-decreasing in grade")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ValueError("alpha1 and alpha2 must be > 0")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError("hard_fraction must lie in [0, 1]")

    def n_hard(self, level: int, k: int) -> int:
        """Hard-negative budget at ``level``: ramps linearly to
        ``hard_fraction * n_negatives`` at the deepest level."""
        if level <= 1 or k <= 1:
            return 0
        return int(np.ceil(self.n_negatives * self.hard_fraction * (level - 1) / (k - 1)))


# ---------------------------------------------------------------------------
# single-anchor reference operations

def l2_similarity(q, d) -> float:
    q = np.asarray(q, dtype=float)
    d = np.asarray(d, dtype=float)
    if q.shape != d.shape:
        raise ValueError("l2_similarity needs equal dimensions")
    diff = q - d
    return float(1.0 - diff @ diff)


def contrastive_term(q, positive, negatives, tau: float):
    """Softmax contrastive loss with L2 similarity.

    Returns ``(loss, {"q", "positive", "negatives"})``. With no negatives the
    denominator equals the numerator and the loss is 0.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    q = np.asarray(q, dtype=float)
    X = np.vstack([np.asarray(positive, dtype=float)[None, :]] + [np.asarray(n, dtype=float)[None, :] for n in negatives])
    diff = q[None, :] - X
    z = (1.0 - (diff * diff).sum(axis=1)) / tau
    logp = log_softmax(z)
    p = np.exp(logp)
    dz = p.copy()
    dz[0] -= 1.0
    dsim = dz / tau
    dX = 2.0 * dsim[:, None] * diff
    dq = -dX.sum(axis=0)
    return float(-logp[0]), {"q": dq, "positive": dX[0], "negatives": dX[1:]}


def residual_contrastive_loss(q, D, negative_sets: Sequence, tau: float, residual: bool = True):
    """Sum over levels of the contrastive term on sg[sum_{m<n} d_m] + d_n.

    Gradient at level n reaches only ``D[n]`` (the prefix sum is blocked) and
    ``q``. ``negative_sets[n]`` are the level-n negative vectors.
    """
    D = np.asarray(D, dtype=float)
    k = D.shape[0]
    if len(negative_sets) != k:
        raise ValueError("need one negative set per level")
    dq = np.zeros_like(np.asarray(q, dtype=float))
    dD = np.zeros_like(D)
    dnegs = []
    total = 0.0
    prefix = np.zeros(D.shape[1])
    for n in range(k):
        pos = prefix + D[n] if residual else D[n]
        loss, g = contrastive_term(q, pos, negative_sets[n], tau)
        total += loss
        dq += g["q"]
        dD[n] += g["positive"]
        dnegs.append(g["negatives"])
        prefix = prefix + D[n]
    return total, {"q": dq, "D": dD, "negatives": dnegs}


def ntp_loss(params: ParamStore, q, user_id: int, path, grade: int, label_weights=(0.0, 0.5, 1.0, 2.0),
             prefix_vecs=None):
    """Reject-sampled next-token loss ``-w(grade) * sum_n log p(s_n | q, u, s_<n)``.

    Returns ``(loss, grads, dq)``; grade-0 paths give exactly zero loss and
    gradients. ``prefix_vecs`` defaults to the codebook entries of ``path``.
    """
    w = float(label_weights[grade])
    path = np.asarray(path, dtype=int)[None, :]
    k = path.shape[1]
    grads = {n: np.zeros_like(v) for n, v in params.tensors.items()
             if n.startswith("decoder.") or n == "query.user_emb"}
    q = np.asarray(q, dtype=float)
    if w == 0.0:
        return 0.0, grads, np.zeros_like(q)
    if prefix_vecs is None:
        prefix_vecs = codebook_entries(params)[np.arange(k), path[0]]
    logp, cache = decoder_forward(params, q[None, :], np.array([user_id]), path, np.asarray(prefix_vecs)[None])
    picked = logp[0, np.arange(k), path[0]]
    loss = -w * float(picked.sum())
    dlogits = w * np.exp(logp)
    dlogits[0, np.arange(k), path[0]] -= w
    dq, _ = decoder_backward(params, cache, dlogits, grads)
    return loss, grads, dq[0]


# ---------------------------------------------------------------------------
# negative sampling

def in_batch_pool(anchor: SearchLogRecord, batch: Sequence[SearchLogRecord], relevant) -> np.ndarray:
    """Candidates of the other records in the batch that are not relevant to the anchor query."""
    others = [c for rec in batch if rec is not anchor for c in rec.candidates]
    pool = np.unique(np.array(others, dtype=int))
    if len(relevant):
        pool = pool[~np.isin(pool, np.fromiter(relevant, dtype=int, count=len(relevant)))]
    return pool


def _take(pool: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if n <= 0 or pool.size == 0:
        return pool[:0]
    if pool.size <= n:
        return pool
    return pool[np.sort(rng.choice(pool.size, size=n, replace=False))]


@dataclass
class SidPrefixIndex:
    """Item ids grouped by the first ``n`` codes of their current path."""

    paths: np.ndarray
    buckets: dict[tuple[int, ...], np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, paths: np.ndarray) -> "SidPrefixIndex":
        buckets: dict[tuple[int, ...], list[int]] = {}
        for item, path in enumerate(paths.tolist()):
            for n in range(1, len(path)):
                buckets.setdefault(tuple(path[:n]), []).append(item)
        return cls(paths, {p: np.array(v, dtype=int) for p, v in buckets.items()})

    def bucket(self, prefix) -> np.ndarray:
        return self.buckets.get(tuple(int(x) for x in prefix), np.zeros(0, dtype=int))


def _exclusion_mask(anchor: SearchLogRecord, relevant, size: int) -> np.ndarray:
    mask = np.zeros(size, dtype=bool)
    ids = [i for i in relevant if 0 <= i < size] + [i for i in anchor.positives() if 0 <= i < size]
    mask[ids] = True
    return mask


def sample_negatives(level: int, anchor: SearchLogRecord, positive: int, batch: Sequence[SearchLogRecord],
                     sid_index: SidPrefixIndex | None, relevant, n_negatives: int,
                     rng: np.random.Generator, pool: np.ndarray | None = None,
                     excluded: np.ndarray | None = None, max_hard: int | None = None) -> list[int]:
    """Negative item ids for one anchor at ``level`` (1-based).

    Level 1 draws uniformly from the in-batch pool. Deeper levels draw items
    that share the positive's first ``level - 1`` codes and are not relevant
    to the anchor query, then pad with in-batch negatives. ``pool`` and the
    boolean ``excluded`` table may be precomputed once per anchor record.
    ``max_hard`` caps the prefix-sharing share (default: all of them).
    """
    if excluded is None:
        size = max([positive, *relevant, *anchor.candidates, *(c for r in batch for c in r.candidates)]) + 1
        if sid_index is not None:
            size = max(size, len(sid_index.paths))
        excluded = _exclusion_mask(anchor, relevant, size)
    if pool is None:
        pool = in_batch_pool(anchor, batch, np.flatnonzero(excluded))
    if level <= 1 or sid_index is None:
        return _take(pool, n_negatives, rng).tolist()
    bucket = sid_index.bucket(sid_index.paths[positive][: level - 1])
    hard_pool = bucket[~excluded[bucket] & (bucket != positive)]
    cap = n_negatives if max_hard is None else min(max_hard, n_negatives)
    hard = _take(hard_pool, cap, rng)
    if hard.size >= n_negatives:
        return hard.tolist()
    pad = _take(pool[~np.isin(pool, hard)], n_negatives - hard.size, rng)
    return hard.tolist() + pad.tolist()


# ---------------------------------------------------------------------------
# batched objective

@dataclass
class PreparedBatch:
    q_ids: np.ndarray
    q_mask: np.ndarray
    q_lens: np.ndarray
    users: np.ndarray
    item_ids: np.ndarray
    f_ids: np.ndarray
    f_mask: np.ndarray
    f_lens: np.ndarray
    anchor_rec: np.ndarray
    anchor_pos: np.ndarray
    neg_idx: np.ndarray  # (k, A, J) item columns of each anchor's negatives, -1 padded
    ntp_rec: np.ndarray
    ntp_item: np.ndarray
    ntp_w: np.ndarray


@dataclass
class Frozen:
    """Stop-gradient values and code assignments at the unperturbed point."""

    paths: np.ndarray  # (U, k)
    D: np.ndarray  # (U, k, dim)
    E: np.ndarray  # (U, k, dim)


def prepare_batch(records: Sequence[SearchLogRecord], corpus: Corpus, params: ParamStore, cfg: PretrainConfig,
                  k: int, relevant_by_query: dict[int, set[int]], sid_index: SidPrefixIndex | None,
                  rng: np.random.Generator) -> PreparedBatch:
    anchors = []  # (record index, positive item, negatives per level)
    ntp = []
    for r, rec in enumerate(records):
        relevant = relevant_by_query.get(rec.query_id, set())
        excluded = _exclusion_mask(rec, relevant, len(corpus.items))
        pool = in_batch_pool(rec, records, np.flatnonzero(excluded))
        for item, grade in zip(rec.candidates, rec.labels):
            if grade <= 0:
                continue
            ntp.append((r, item, cfg.label_weights[grade]))
            if cfg.coarse_to_fine:
                negs = [sample_negatives(n, rec, item, records, sid_index, relevant, cfg.n_negatives, rng,
                                         pool, excluded, cfg.n_hard(n, k)) for n in range(1, k + 1)]
            else:
                shared = sample_negatives(1, rec, item, records, None, relevant, cfg.n_negatives, rng,
                                          pool, excluded)
                negs = [shared] * k
            anchors.append((r, item, negs))
    item_set = {c for rec in records for c in rec.candidates}
    for _, _, negs in anchors:
        for level_negs in negs:
            item_set.update(level_negs)
    item_ids = np.array(sorted(item_set), dtype=int)
    col = {int(i): j for j, i in enumerate(item_ids)}
    A, U = len(anchors), len(item_ids)
    J = max([len(level) for _, _, negs in anchors for level in negs], default=0)
    neg_idx = np.full((k, A, J), -1, dtype=int)
    for a, (_, _, negs) in enumerate(anchors):
        for n in range(k):
            neg_idx[n, a, : len(negs[n])] = [col[i] for i in negs[n]]
    q_ids, q_mask, q_lens = pad_tokens([rec.query_tokens for rec in records], params["query.tok_emb"].shape[0])
    f_ids, f_mask, f_lens = pad_tokens([corpus.items[i].feature_tokens for i in item_ids],
                                       params["item.feat_emb"].shape[0])
    users = np.array([rec.user_id for rec in records], dtype=int)
    users[(users < 0) | (users >= params["query.user_emb"].shape[0])] = 0
    return PreparedBatch(
        q_ids, q_mask, q_lens, users, item_ids, f_ids, f_mask, f_lens,
        anchor_rec=np.array([a[0] for a in anchors], dtype=int),
        anchor_pos=np.array([col[a[1]] for a in anchors], dtype=int),
        neg_idx=neg_idx,
        ntp_rec=np.array([t[0] for t in ntp], dtype=int),
        ntp_item=np.array([col[t[1]] for t in ntp], dtype=int),
        ntp_w=np.array([t[2] for t in ntp], dtype=float),
    )


def _batched_contrast(Qa, C, pos, neg_idx, tau):
    """Mean softmax-contrastive loss over anchors for one level.

    Anchor ``a`` scores its positive column ``pos[a]`` against the columns
    ``neg_idx[a]`` (-1 entries are padding). Returns (loss, dQa (A, dim),
    dC (U, dim)).
    """
    A = Qa.shape[0]
    cols = np.concatenate([pos[:, None], neg_idx], axis=1)
    valid = cols >= 0
    safe = np.where(valid, cols, 0)
    diff = Qa[:, None, :] - C[safe]
    z = np.where(valid, (1.0 - np.einsum("ajd,ajd->aj", diff, diff)) / tau, -np.inf)
    zmax = z[:, :1]  # positive column is always valid
    zmax = np.maximum(zmax, z.max(axis=1, keepdims=True))
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    loss = float(np.sum(zmax[:, 0] + np.log(denom[:, 0]) - z[:, 0])) / A
    G = ez / denom
    G[:, 0] -= 1.0
    dS = G / (tau * A)
    # sim = 1 - ||q - c||^2
    dQa = -2.0 * np.einsum("aj,ajd->ad", dS, diff)
    dense = np.zeros((A, C.shape[0]))
    rows = np.broadcast_to(np.arange(A)[:, None], cols.shape)
    dense[rows[valid], cols[valid]] = dS[valid]
    dC = 2.0 * (dense.T @ Qa - C * dense.sum(axis=0)[:, None])
    return loss, dQa, dC


def unified_objective(params: ParamStore, batch: PreparedBatch, cfg: PretrainConfig,
                      frozen: Frozen | None = None):
    """Weighted sum of the three losses and its gradient.

    Returns ``(report, grads, frozen)``; ``report`` holds the pre-update loss
    components.
    """
    grads = zeros_like_params(params)
    Q, qcache = query_forward(params, batch.q_ids, batch.q_mask, batch.q_lens, batch.users)
    D, icache = item_forward(params, batch.f_ids, batch.f_mask, batch.f_lens)
    U, k, dim = D.shape
    entries = codebook_entries(params)
    if frozen is None:
        paths, E0 = quantize_batch(D, entries)
        frozen = Frozen(paths, D.copy(), E0.copy())
    E = entries[np.arange(k)[None, :], frozen.paths]
    dQ = np.zeros_like(Q)
    dD = np.zeros_like(D)

    # contrastive alignment
    l_con = 0.0
    if len(batch.anchor_rec):
        Qa = Q[batch.anchor_rec]
        dQa = np.zeros_like(Qa)
        prefix = np.zeros((U, dim))
        for n in range(k):
            C = prefix + D[:, n] if cfg.residual else D[:, n]
            loss, gQa, gC = _batched_contrast(Qa, C, batch.anchor_pos, batch.neg_idx[n], cfg.tau)
            l_con += loss
            dQa += cfg.lambda_contrast * gQa
            dD[:, n] += cfg.lambda_contrast * gC
            prefix = prefix + frozen.D[:, n]
        np.add.at(dQ, batch.anchor_rec, dQa)

    # codebook: alpha1 pulls entries toward sg[d], alpha2 commits d toward sg[e]
    diff1 = frozen.D - E
    diff2 = D - frozen.E
    l_cb = float(cfg.alpha1 * np.sum(diff1 * diff1) + cfg.alpha2 * np.sum(diff2 * diff2)) / U
    dE = -2.0 * cfg.alpha1 * diff1 * (cfg.lambda_codebook / U)
    dD += 2.0 * cfg.alpha2 * diff2 * (cfg.lambda_codebook / U)
    dEntries = np.zeros_like(entries)
    for n in range(k):
        np.add.at(dEntries[n], frozen.paths[:, n], dE[:, n])
    for name, g in entries_grad_to_params(params, dEntries).items():
        grads[name] += g

    # reject-sampled next-token prediction; prefix vectors are straight-through
    l_ntp = 0.0
    n_pairs = len(batch.ntp_rec)
    if n_pairs:
        it = batch.ntp_item
        st_value = frozen.E[it] + (D[it] - frozen.D[it])
        tgt = frozen.paths[it]
        logp, dcache = decoder_forward(params, Q[batch.ntp_rec], batch.users[batch.ntp_rec], tgt, st_value)
        picked = np.take_along_axis(logp, tgt[:, :, None], axis=2)[:, :, 0]
        l_ntp = float(-(batch.ntp_w * picked.sum(axis=1)).sum()) / n_pairs
        scale = (cfg.lambda_ntp * batch.ntp_w / n_pairs)[:, None, None]
        dlogits = np.exp(logp) * scale
        np.put_along_axis(dlogits, tgt[:, :, None],
                          np.take_along_axis(dlogits, tgt[:, :, None], axis=2) - scale, axis=2)
        dq_ntp, dprefix = decoder_backward(params, dcache, dlogits, grads)
        np.add.at(dQ, batch.ntp_rec, dq_ntp)
        np.add.at(dD, it, dprefix)

    query_backward(params, qcache, dQ, grads)
    item_backward(params, icache, dD, grads)
    total = cfg.lambda_contrast * l_con + cfg.lambda_codebook * l_cb + cfg.lambda_ntp * l_ntp
    report = {"L_contrast": l_con, "L_codebook": l_cb, "L_NTP": l_ntp, "L_total": total}
    return report, grads, frozen


# ---------------------------------------------------------------------------
# training loop

METRIC_HEADER = ["step", "L_contrast", "L_codebook", "L_NTP", "L_total"]


class Pretrainer:
    """Owns the parameters during pre-training and runs :meth:`step` on batches."""

    def __init__(self, corpus: Corpus, params: ParamStore, cfg: PretrainConfig, k: int):
        cfg.validate()
        self.corpus = corpus
        self.params = params
        self.cfg = cfg
        self.k = k
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum)
        self.train_records = corpus.split("train")
        self.relevant = corpus.query_relevant_items()
        self.sid_index: SidPrefixIndex | None = None
        self.perplexity: list[float] = [float("nan")] * k
        self._order = np.zeros(0, dtype=int)
        self._cursor = 0
        self.history: list[dict] = []

    def refresh_index(self) -> None:
        paths = item_paths(self.params, self.corpus)
        self.sid_index = SidPrefixIndex.build(paths)
        self.perplexity = utilization(paths.tolist())

    def next_batch(self) -> list[SearchLogRecord]:
        if self._cursor + self.cfg.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.train_records))
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + self.cfg.batch_size]
        self._cursor += self.cfg.batch_size
        return [self.train_records[i] for i in idx]

    def step(self, records: Sequence[SearchLogRecord]) -> dict:
        if not records:
            raise ValueError("batch must be non-empty")
        batch = prepare_batch(records, self.corpus, self.params, self.cfg, self.k, self.relevant,
                              self.sid_index, self.rng)
        report, grads, _ = unified_objective(self.params, batch, self.cfg)
        if not all(math.isfinite(v) for v in report.values()):
            raise TrainingDivergedError(f"non-finite loss at step {self.params.step}: {report}")
        if self.cfg.lambda_contrast == self.cfg.lambda_codebook == self.cfg.lambda_ntp == 0.0:
            return report
        clip_global_norm(grads, self.cfg.grad_clip)
        self.optimizer.step(self.params, grads)
        return report

    def run(self, steps: int | None = None, metrics_path=None, log_every: int = 100) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        fh = writer = None
        if metrics_path is not None:
            fh = open(metrics_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(METRIC_HEADER + [f"perplexity_l{n + 1}" for n in range(self.k)])
        t0 = time.time()
        try:
            for s in range(steps):
                if s % self.cfg.refresh_every == 0:
                    self.refresh_index()
                report = self.step(self.next_batch())
                row = {"step": s, **report}
                self.history.append(row)
                if writer:
                    writer.writerow([s] + [f"{report[h]:.9g}" for h in METRIC_HEADER[1:]]
                                    + [f"{p:.9g}" for p in self.perplexity])
                if log_every and s % log_every == 0:
                    log.info("step %d total=%.4f contrast=%.4f codebook=%.4f ntp=%.4f (%.1fs)", s,
                             report["L_total"], report["L_contrast"], report["L_codebook"], report["L_NTP"],
                             time.time() - t0)
        finally:
            if fh:
                fh.close()
        self.refresh_index()
        return self.history


def item_paths(params: ParamStore, corpus: Corpus) -> np.ndarray:
    """Current semantic-ID path of every item, shape (n_items, k)."""
    D = encode_items([it.feature_tokens for it in corpus.items], params)
    paths, _ = quantize_batch(D, codebook_entries(params))
    return paths
