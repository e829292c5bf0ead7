"""Search preference optimization: group-relative policy updates on
beam-sampled semantic-ID paths, anchored to a frozen reference policy.

Each round samples queries, decodes G trie-valid paths per query, exposes
the top-M of them (by system reward) to the simulated user, scores every
path with a blend of system and interaction reward, normalizes rewards
within the group and applies one ratio-plus-KL update to the query encoder
and the decoder. The codebook and item encoder stay fixed so the trie built
at pre-training time remains valid.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decoding import Retriever, beam_search, rank_results, valid_rate
from .metrics import EvalSplit, evaluate
from .models import codebook_entries, decoder_backward, decoder_forward, encode_query, pad_tokens, query_backward, query_forward
from .numeric import ParamStore, clip_global_norm, make_optimizer, zeros_like_params
from .sim import SearchLogRecord, SearchSimulator, interaction_reward
from .trie import SidTrie

log = logging.getLogger(__name__)

ADV_EPS = 1e-8
SPO_PARAM_PREFIXES = ("query.", "decoder.")


def combine_reward(r_system, r_interaction, gamma1: float, gamma2: float):
    r_system = np.asarray(r_system, dtype=float)
    r_interaction = np.asarray(r_interaction, dtype=float)
    if not (np.all(np.isfinite(r_system)) and np.all(np.isfinite(r_interaction))):
        raise ValueError("rewards must be finite")
    out = gamma1 * r_system + gamma2 * r_interaction
    return float(out) if out.ndim == 0 else out


def group_advantage(rewards) -> np.ndarray:
    """(R_i - mean) / (population std + eps); exactly zero for a constant group."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("group advantage needs at least 2 rewards")
    if np.all(r == r[0]):
        # the float mean of equal values need not equal them, and eps would amplify the residue
        return np.zeros_like(r)
    centered = r - r.mean()
    return centered / (np.sqrt(np.mean(centered * centered)) + ADV_EPS)


def kl_estimate(logp, ref_logp):
    """Per-token r - ln r - 1 with r = pi_ref / pi_theta; non-negative."""
    log_r = np.asarray(ref_logp, dtype=float) - np.asarray(logp, dtype=float)
    out = np.expm1(log_r) - log_r
    return float(out) if out.ndim == 0 else out


@dataclass
class GenerationGroup:
    """G decoded paths for one (query, user) with everything recorded at collection time."""

    query_tokens: list[int]
    user_id: int
    paths: np.ndarray  # (G, k)
    old_logp: np.ndarray  # (G, k) per-level log-probs of the collecting policy
    prefix_vecs: np.ndarray  # (G, k, dim) codebook vectors of each path
    rewards: np.ndarray  # (G,)
    advantages: np.ndarray = field(default=None)  # (G,)
    query_id: int = -1

    def __post_init__(self):
        self.paths = np.asarray(self.paths, dtype=int)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if self.paths.shape[0] < 2:
            raise ValueError("a generation group needs G >= 2 paths")
        if self.advantages is None:
            self.advantages = group_advantage(self.rewards)

    @property
    def G(self) -> int:
        return self.paths.shape[0]


@dataclass
class SpoConfig:
    gamma1: float = 0.5
    gamma2: float = 0.5
    beta: float = 0.01
    G: int = 8
    M: int = 4
    lr: float = 1e-3
    optimizer: str = "adam"
    grad_clip: float = 5.0
    queries_per_round: int = 32
    beam_size: int = 32
    rounds: int = 20
    probe_size: int = 200
    K: int = 50
    reference: str = ""  # version id of the reference checkpoint
    seed: int = 0

    def validate(self) -> None:
        if self.gamma1 + self.gamma2 <= 0:
            raise ValueError("gamma1 + gamma2 must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if not 1 <= self.M <= self.G:
            raise ValueError("need 1 <= M <= G")
        if self.beam_size < self.G:
            raise ValueError("beam_size must be >= G")


def _policy_logp(params: ParamStore, groups: Sequence[GenerationGroup]):
    """Log-probs (sum G, k) of every group's paths under ``params`` plus backward caches."""
    W = params["decoder.heads"].shape[1]
    for g in groups:
        if g.paths.min() < 0 or g.paths.max() >= W or g.paths.shape[1] != params["decoder.heads"].shape[0]:
            raise ValueError(f"path codes must lie in [0, {W}) with length k")
    ids, mask, lens = pad_tokens([g.query_tokens for g in groups], params["query.tok_emb"].shape[0])
    users = np.array([g.user_id for g in groups], dtype=int)
    users[(users < 0) | (users >= params["query.user_emb"].shape[0])] = 0
    Q, qcache = query_forward(params, ids, mask, lens, users)
    owner = np.repeat(np.arange(len(groups)), [g.G for g in groups])
    paths = np.concatenate([g.paths for g in groups])
    prefix_vecs = np.concatenate([g.prefix_vecs for g in groups])
    logp, dcache = decoder_forward(params, Q[owner], users[owner], paths, prefix_vecs)
    picked = np.take_along_axis(logp, paths[:, :, None], axis=2)[:, :, 0]
    return picked, logp, owner, paths, Q, qcache, dcache


def spo_loss(groups: Sequence[GenerationGroup], params: ParamStore, ref_params: ParamStore, beta: float):
    """Ratio-weighted advantage objective with a per-token KL penalty.

    L = -mean_groups (1/G) sum_i (1/k) sum_n [ratio_in * A_i - beta * kl_in]
    where ratio_in = pi_theta / pi_old (denominator recorded, no gradient).
    Returns ``(loss, grads)`` with gradients for the query encoder and decoder.
    """
    if not groups:
        raise ValueError("spo_loss needs at least one group")
    grads = zeros_like_params(params)
    picked, logp, owner, paths, Q, qcache, dcache = _policy_logp(params, groups)
    ref_picked = _policy_logp(ref_params, groups)[0]
    old = np.concatenate([g.old_logp for g in groups])
    adv = np.concatenate([g.advantages for g in groups])
    n_groups = len(groups)
    k = paths.shape[1]
    # per-path weight 1 / (n_groups * G * k)
    w = np.concatenate([np.full(g.G, 1.0 / (n_groups * g.G * k)) for g in groups])
    ratio = np.exp(picked - old)
    log_r = ref_picked - picked
    kl = np.expm1(log_r) - log_r
    loss = -float(np.sum(w[:, None] * (ratio * adv[:, None] - beta * kl)))
    # d ratio / d logp = ratio ; d kl / d logp = 1 - r
    dpicked = -w[:, None] * (ratio * adv[:, None] - beta * (1.0 - np.exp(log_r)))
    dlogits = -np.exp(logp) * dpicked[:, :, None]
    np.put_along_axis(dlogits, paths[:, :, None],
                      np.take_along_axis(dlogits, paths[:, :, None], axis=2) + dpicked[:, :, None], axis=2)
    dq_rows, _ = decoder_backward(params, dcache, dlogits, grads)
    dQ = np.zeros_like(Q)
    np.add.at(dQ, owner, dq_rows)
    query_backward(params, qcache, dQ, grads)
    return loss, grads


def mean_kl(groups: Sequence[GenerationGroup], params: ParamStore, ref_params: ParamStore) -> float:
    picked = _policy_logp(params, groups)[0]
    ref = _policy_logp(ref_params, groups)[0]
    return float(np.mean(kl_estimate(picked, ref)))


# ---------------------------------------------------------------------------
# collection


def _representatives(paths, trie: SidTrie, simulator: SearchSimulator, query_id: int, user_id: int):
    """Per path, the stored item with the highest system reward and that reward."""
    items, rewards = [], []
    for path in paths:
        stored = np.array(sorted(set(trie.resolve(path))), dtype=int)
        r = simulator.system_rewards(query_id, user_id, stored)
        j = int(np.argmax(r))
        items.append(int(stored[j]))
        rewards.append(float(r[j]))
    return np.array(items, dtype=int), np.array(rewards)


def path_rewards(paths, query_id: int, user_id: int, trie: SidTrie, simulator: SearchSimulator,
                 cfg: SpoConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Combined reward per path.

    The top-M paths by system reward are shown in that order, each through its
    best item; unexposed paths get zero interaction reward. With ``rng`` None
    the expected interaction reward replaces a sampled one.
    """
    items, r_sys = _representatives(paths, trie, simulator, query_id, user_id)
    shown = np.argsort(-r_sys, kind="stable")[: cfg.M]
    r_int = np.zeros(len(paths))
    if rng is None:
        r_int[shown] = simulator.expected_interaction_rewards(items[shown], query_id)
    else:
        for pos, outcome in zip(shown, simulator.simulate_interactions(items[shown], query_id, user_id, rng)):
            r_int[pos] = interaction_reward(outcome)
    return combine_reward(r_sys, r_int, cfg.gamma1, cfg.gamma2)


def collect_group(record: SearchLogRecord, params: ParamStore, trie: SidTrie, simulator: SearchSimulator,
                  cfg: SpoConfig, rng: np.random.Generator, entries: np.ndarray | None = None):
    """Decode G valid paths for one record and score them; None if fewer than 2 paths exist."""
    entries = codebook_entries(params) if entries is None else entries
    n_users = params["query.user_emb"].shape[0]
    user = record.user_id if 0 <= record.user_id < n_users else 0
    q = encode_query(record.query_tokens, user, params)
    found = beam_search(q, user, params, cfg.beam_size, cfg.G, trie, entries)
    if len(found) < 2:
        return None
    paths = np.array([p for p, _ in found], dtype=int)
    k = paths.shape[1]
    prefix_vecs = entries[np.arange(k)[None, :], paths]
    logp, _ = decoder_forward(params, np.repeat(q[None], len(paths), axis=0), np.full(len(paths), user),
                              paths, prefix_vecs)
    old = np.take_along_axis(logp, paths[:, :, None], axis=2)[:, :, 0]
    rewards = path_rewards(paths, record.query_id, record.user_id, trie, simulator, cfg, rng)
    return GenerationGroup(list(record.query_tokens), user, paths, old, prefix_vecs, rewards,
                           query_id=record.query_id)


def probe_reward(params: ParamStore, records: Sequence[SearchLogRecord], trie: SidTrie,
                 simulator: SearchSimulator, cfg: SpoConfig) -> float:
    """Mean expected combined reward of the policy's top-G paths over probe records."""
    entries = codebook_entries(params)
    vals = []
    n_users = params["query.user_emb"].shape[0]
    for rec in records:
        user = rec.user_id if 0 <= rec.user_id < n_users else 0
        q = encode_query(rec.query_tokens, user, params)
        found = beam_search(q, user, params, cfg.beam_size, cfg.G, trie, entries)
        if not found:
            continue
        paths = [p for p, _ in found]
        vals.append(float(np.mean(path_rewards(paths, rec.query_id, rec.user_id, trie, simulator, cfg))))
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# rounds


@dataclass
class RoundReport:
    round: int
    mean_reward: float
    mean_kl: float
    valid_rate: float
    recall_at_k: float = float("nan")
    mrr: float = float("nan")
    probe_reward: float = float("nan")
    n_groups: int = 0
    drift: float = 0.0


ROUND_HEADER = ["round", "mean_reward", "mean_kl", "valid_rate", "recall_at_k", "mrr", "probe_reward",
                "n_groups", "drift"]


def _spo_names(params: ParamStore) -> list[str]:
    return [n for n in params.trainable() if n.startswith(SPO_PARAM_PREFIXES)]


def spo_round(records: Sequence[SearchLogRecord], params: ParamStore, ref_params: ParamStore, trie: SidTrie,
              simulator: SearchSimulator, cfg: SpoConfig, optimizer, rng: np.random.Generator,
              round_index: int = 0) -> RoundReport:
    """Collect one group per record, then apply a single update to ``params``.

    ``ref_params`` is read only. Raises ValueError on an empty trie.
    """
    cfg.validate()
    if len(trie) == 0:
        raise ValueError("SPO needs a non-empty trie")
    entries = codebook_entries(params)
    groups = []
    n_valid = n_paths = 0
    for rec in records:
        g = collect_group(rec, params, trie, simulator, cfg, rng, entries)
        if g is None:
            continue
        groups.append(g)
        n_paths += g.G
        n_valid += sum(1 for p in g.paths.tolist() if trie.resolve(p))
    if not groups:
        return RoundReport(round_index, float("nan"), float("nan"), 1.0, n_groups=0)
    before = np.concatenate([params[n].ravel() for n in _spo_names(params)])
    kl = mean_kl(groups, params, ref_params)
    _, grads = spo_loss(groups, params, ref_params, cfg.beta)
    update = {n: grads[n] for n in _spo_names(params)}
    clip_global_norm(update, cfg.grad_clip)
    optimizer.step(params, update)
    after = np.concatenate([params[n].ravel() for n in _spo_names(params)])
    return RoundReport(
        round=round_index,
        mean_reward=float(np.mean(np.concatenate([g.rewards for g in groups]))),
        mean_kl=kl,
        valid_rate=n_valid / n_paths,
        n_groups=len(groups),
        drift=float(np.linalg.norm(after - before)),
    )


class SpoTrainer:
    """Runs SPO rounds against a fixed reference and logs a round CSV."""

    def __init__(self, params: ParamStore, ref_params: ParamStore, trie: SidTrie, simulator: SearchSimulator,
                 train_records: Sequence[SearchLogRecord], cfg: SpoConfig,
                 probe_records: Sequence[SearchLogRecord] = (), probe_split: EvalSplit | None = None):
        cfg.validate()
        if len(trie) == 0:
            raise ValueError("SPO needs a non-empty trie")
        self.params = params
        self.ref_params = ref_params
        self.trie = trie
        self.simulator = simulator
        self.records = list(train_records)
        self.cfg = cfg
        self.probe_records = list(probe_records)
        self.probe_split = probe_split
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = make_optimizer(cfg.optimizer, cfg.lr)
        self.reports: list[RoundReport] = []

    def probe(self) -> dict:
        out = {}
        if self.probe_records:
            out["probe_reward"] = probe_reward(self.params, self.probe_records, self.trie, self.simulator, self.cfg)
        if self.probe_split is not None and self.probe_split.records:
            res = evaluate(Retriever(self.params, self.trie, self.cfg.beam_size, self.cfg.beam_size),
                           self.probe_split, self.cfg.K, slices=("all",))["all"]
            out["recall_at_k"] = res["recall_at_k"]
            out["mrr"] = res["mrr"]
        return out

    def run(self, rounds: int | None = None, csv_path=None) -> list[RoundReport]:
        rounds = self.cfg.rounds if rounds is None else rounds
        fh = writer = None
        if csv_path is not None:
            fh = open(csv_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(ROUND_HEADER)
        try:
            initial = self.probe()
            self.initial_probe = initial
            for r in range(rounds):
                idx = self.rng.choice(len(self.records), size=min(self.cfg.queries_per_round, len(self.records)),
                                      replace=False)
                report = spo_round([self.records[i] for i in idx], self.params, self.ref_params, self.trie,
                                   self.simulator, self.cfg, self.optimizer, self.rng, r)
                for key, val in self.probe().items():
                    setattr(report, key, val)
                self.reports.append(report)
                if writer:
                    writer.writerow([f"{getattr(report, h):.9g}" if isinstance(getattr(report, h), float)
                                     else getattr(report, h) for h in ROUND_HEADER])
                    fh.flush()
                log.info("round %d reward=%.4f kl=%.5f valid=%.3f probe=%.4f mrr=%.4f", r, report.mean_reward,
                         report.mean_kl, report.valid_rate, report.probe_reward, report.mrr)
        finally:
            if fh:
                fh.close()
        return self.reports
