"""Trie-constrained beam search over the semantic-ID decoder."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import codebook_entries, encode_query, level_log_probs
from .numeric import ParamStore
from .trie import SidTrie

PRODUCTION_BEAM_SIZE = 256  # beam width for large catalogues; the small defaults below suit the simulator


@dataclass
class RankedItem:
    item_id: int
    score: float
    path: tuple[int, ...]


def beam_search(q, user_id: int, params: ParamStore, beam_size: int, top_n: int,
                trie: SidTrie | None = None, entries: np.ndarray | None = None) -> list[tuple[tuple[int, ...], float]]:
    """Top paths by total log-probability, best first.

    At each level every beam is extended by all codes (or only the trie's
    feasible continuations) and the best ``beam_size`` extensions survive.
    Equal scores are ordered lexicographically by path.
    """
    if not beam_size >= top_n >= 1:
        raise ValueError("need beam_size >= top_n >= 1")
    k, W = params["decoder.heads"].shape[:2]
    if entries is None:
        entries = codebook_entries(params)
    q = np.asarray(q, dtype=float)
    prefixes = np.zeros((1, 0), dtype=int)
    scores = np.zeros(1)
    for level in range(k):
        logp = level_log_probs(params, q, user_id, prefixes, entries)
        if trie is None:
            beam_idx = np.repeat(np.arange(len(prefixes)), W)
            codes = np.tile(np.arange(W), len(prefixes))
        else:
            allowed = [trie.feasible(p) for p in prefixes.tolist()]
            beam_idx = np.repeat(np.arange(len(prefixes)), [len(a) for a in allowed])
            codes = np.fromiter(itertools.chain.from_iterable(allowed), dtype=int, count=len(beam_idx))
        if codes.size == 0:
            return []
        cand = scores[beam_idx] + logp[beam_idx, codes]
        new_prefixes = np.concatenate([prefixes[beam_idx], codes[:, None]], axis=1)
        keys = tuple(new_prefixes[:, c] for c in range(level, -1, -1)) + (-cand,)
        order = np.lexsort(keys)[:beam_size]
        prefixes = new_prefixes[order]
        scores = cand[order]
    return [(tuple(int(c) for c in p), float(s)) for p, s in zip(prefixes[:top_n], scores[:top_n])]


def rank_results(paths: Sequence[tuple[Sequence[int], float]], trie: SidTrie) -> list[RankedItem]:
    """Flatten scored paths into items: path order, then ascending item id."""
    out: list[RankedItem] = []
    seen: set[int] = set()
    for path, score in paths:
        for item in trie.resolve(path):
            if item in seen:
                continue
            seen.add(item)
            out.append(RankedItem(item, float(score), tuple(path)))
    return out


def valid_rate(paths: Sequence[tuple[Sequence[int], float]], trie: SidTrie) -> float:
    if not paths:
        return 1.0
    return sum(1 for p, _ in paths if trie.resolve(p)) / len(paths)


def exhaustive_paths(q, user_id: int, params: ParamStore, entries: np.ndarray | None = None):
    """Score all W^k paths one prefix at a time (reference for small k, W)."""
    k, W = params["decoder.heads"].shape[:2]
    if entries is None:
        entries = codebook_entries(params)
    q = np.asarray(q, dtype=float)
    out = []
    for path in itertools.product(range(W), repeat=k):
        total = 0.0
        for level in range(k):
            lp = level_log_probs(params, q, user_id, np.array(path[:level], dtype=int)[None, :], entries)[0]
            total = total + lp[path[level]]
        out.append((path, float(total)))
    out.sort(key=lambda t: (-t[1], t[0]))
    return out


class Retriever:
    """Query tokens -> ranked items, for evaluation and serving."""

    def __init__(self, params: ParamStore, trie: SidTrie, beam_size: int = 32, top_n: int = 16):
        self.params = params
        self.trie = trie
        self.beam_size = beam_size
        self.top_n = top_n
        self.entries = codebook_entries(params)

    def search(self, query_tokens, user_id: int, top_n: int | None = None, constrained: bool = True,
               beam_size: int | None = None):
        top_n = self.top_n if top_n is None else top_n
        beam = max(self.beam_size if beam_size is None else beam_size, top_n)
        n_users = self.params["query.user_emb"].shape[0]
        user = user_id if 0 <= user_id < n_users else 0
        q = encode_query(query_tokens, user, self.params)
        return beam_search(q, user, self.params, beam, top_n, self.trie if constrained else None, self.entries)
