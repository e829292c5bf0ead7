"""Synthetic search-log simulator.

Items and queries live in a hidden topic space (topic -> subtopic -> leaf).
The model never sees the topic vectors; it sees feature/query token ids that
are deterministic functions of them (topic word, subtopic word, and sign bits
of a few random hyperplanes). Graded labels threshold a noisy cosine between
query and item topic vectors.

Corpus file layout (one line each, space separated ``key=value`` fields)::

    #gensearch-corpus v1
    #config <CorpusConfig fields in declaration order>
    item id=<int> quality=<real> live=<0|1> feats=<int,...> topic=<real,...>
    query id=<int> head=<0|1> tokens=<int,...> topic=<real,...>
    record id=<int> split=<train|test> query=<int> user=<int> tokens=<int,...> cand=<int,...> labels=<int,...>

Integers are decimal; reals are written with 9 significant digits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

OOV = 0
MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _r9(x):
    """Round to the 9 significant digits used on disk so files round-trip exactly."""
    return np.vectorize(lambda v: float(f"{v:.9g}"), otypes=[float])(x)


@dataclass
class CorpusConfig:
    n_items: int = 2000
    n_queries: int = 500
    n_users: int = 200
    n_topics: int = 10
    zipf_exponent: float = 1.1
    seed: int = 0
    n_subtopics: int = 5
    latent_dim: int = 16
    n_hash: int = 8
    n_noise_tokens: int = 16
    n_sessions: int = 5000
    n_exposed: int = 8
    n_unexposed: int = 8
    subtopic_spread: float = 0.6
    item_spread: float = 0.35
    query_spread: float = 0.3
    label_noise: float = 0.04
    relevant_threshold: float = 0.75
    grade2_threshold: float = 0.85
    test_fraction: float = 0.2
    new_user_fraction: float = 0.2
    new_user_session_rate: float = 0.3
    live_toggle_fraction: float = 0.1

    def validate(self) -> None:
        if self.n_items < 10:
            raise ValueError("n_items must be >= 10")
        if self.n_topics < 2:
            raise ValueError("n_topics must be >= 2")
        if self.n_topics > self.n_items:
            raise ValueError("degenerate config: n_topics > n_items")
        if self.n_exposed < 1 or self.n_unexposed < 1:
            raise ValueError("records need exposed items and unexposed negatives")
        if self.n_exposed + self.n_unexposed > self.n_items:
            raise ValueError("more candidates per record than items")

    @property
    def n_existing_users(self) -> int:
        return max(1, int(round(self.n_users * (1.0 - self.new_user_fraction))))

    @property
    def query_vocab_size(self) -> int:
        return 1 + self.n_topics + self.n_topics * self.n_subtopics + 2 * self.n_hash + self.n_noise_tokens

    @property
    def feature_vocab_size(self) -> int:
        return 1 + self.n_topics + self.n_topics * self.n_subtopics + 2 * self.n_hash + self.n_noise_tokens


@dataclass
class Item:
    item_id: int
    topic_vector: np.ndarray
    feature_tokens: list[int]
    quality: float
    live: bool = True


@dataclass
class Query:
    query_id: int
    topic_vector: np.ndarray
    tokens: list[int]
    head: bool


@dataclass
class SearchLogRecord:
    record_id: int
    query_id: int
    query_tokens: list[int]
    user_id: int
    candidates: list[int]
    labels: list[int]
    split: str = "train"

    def positives(self) -> list[int]:
        return [c for c, l in zip(self.candidates, self.labels) if l > 0]


@dataclass
class InteractionOutcome:
    item_id: int
    click: bool
    watch_fraction: float


@dataclass
class Corpus:
    config: CorpusConfig
    items: list[Item]
    queries: list[Query]
    records: list[SearchLogRecord]
    _topics: np.ndarray | None = field(default=None, repr=False)

    @property
    def item_topics(self) -> np.ndarray:
        if self._topics is None:
            self._topics = np.stack([it.topic_vector for it in self.items])
        return self._topics

    def split(self, name: str) -> list[SearchLogRecord]:
        return [r for r in self.records if r.split == name]

    def is_new_user(self, user_id: int) -> bool:
        return user_id >= self.config.n_existing_users

    def relevance(self, query_id: int, item_ids) -> np.ndarray:
        """Hidden relevance: cosine of topic vectors clipped to [0, 1]."""
        q = self.queries[query_id].topic_vector
        return np.clip(self.item_topics[np.asarray(item_ids, dtype=int)] @ q, 0.0, 1.0)

    def query_relevant_items(self) -> dict[int, set[int]]:
        """Items labeled relevant for each query anywhere in the training split."""
        out: dict[int, set[int]] = {}
        for rec in self.records:
            if rec.split != "train":
                continue
            out.setdefault(rec.query_id, set()).update(rec.positives())
        return out


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def zipf_probabilities(n: int, exponent: float) -> np.ndarray:
    p = np.arange(1, n + 1, dtype=float) ** (-exponent)
    return p / p.sum()


def grade_label(noisy_cos: float, quality: float, cfg: CorpusConfig) -> int:
    """0 irrelevant, 1 relevant low quality, 2 relevant, 3 relevant high quality."""
    if noisy_cos < cfg.relevant_threshold:
        return 0
    if quality < 0.2:
        return 1
    if noisy_cos < cfg.grade2_threshold:
        return 1
    return 3 if quality >= 0.6 else 2


class _Vocab:
    """Token-id layout shared by the query and feature vocabularies."""

    def __init__(self, cfg: CorpusConfig):
        self.cfg = cfg
        self.topic0 = 1
        self.sub0 = self.topic0 + cfg.n_topics
        self.hash0 = self.sub0 + cfg.n_topics * cfg.n_subtopics
        self.noise0 = self.hash0 + 2 * cfg.n_hash

    def tokens(self, vec, topic, sub, planes, rng) -> list[int]:
        cfg = self.cfg
        toks = [self.topic0 + topic, self.sub0 + topic * cfg.n_subtopics + sub]
        bits = (planes @ vec) > 0
        toks += [self.hash0 + 2 * h + int(b) for h, b in enumerate(bits)]
        if cfg.n_noise_tokens:
            toks.append(self.noise0 + int(rng.integers(cfg.n_noise_tokens)))
        return toks


def generate_corpus(config: CorpusConfig) -> Corpus:
    """Build items, a Zipf-distributed query pool and graded search sessions."""
    cfg = config
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    ld = cfg.latent_dim
    n_sub_total = cfg.n_topics * cfg.n_subtopics

    topics = _unit(rng.normal(size=(cfg.n_topics, ld)))
    subs = _unit(np.repeat(topics, cfg.n_subtopics, axis=0)
                 + cfg.subtopic_spread * rng.normal(size=(n_sub_total, ld)) / math.sqrt(ld))
    item_planes = rng.normal(size=(cfg.n_hash, ld))
    query_planes = rng.normal(size=(cfg.n_hash, ld))
    vocab = _Vocab(cfg)

    # Every topic gets at least one item so n_topics <= n_items is meaningful.
    item_sub = rng.integers(n_sub_total, size=cfg.n_items)
    item_sub[: cfg.n_topics] = np.arange(cfg.n_topics) * cfg.n_subtopics
    item_vecs = _r9(_unit(subs[item_sub] + cfg.item_spread * rng.normal(size=(cfg.n_items, ld)) / math.sqrt(ld)))
    quality = _r9(rng.beta(2.0, 2.0, size=cfg.n_items))
    items = []
    for i in range(cfg.n_items):
        s = int(item_sub[i])
        toks = vocab.tokens(item_vecs[i], s // cfg.n_subtopics, s % cfg.n_subtopics, item_planes, rng)
        items.append(Item(i, item_vecs[i], toks, float(quality[i]), True))

    query_sub = rng.integers(n_sub_total, size=cfg.n_queries)
    query_vecs = _r9(_unit(subs[query_sub] + cfg.query_spread * rng.normal(size=(cfg.n_queries, ld)) / math.sqrt(ld)))
    n_head = max(1, int(round(0.2 * cfg.n_queries)))
    queries = []
    for j in range(cfg.n_queries):
        s = int(query_sub[j])
        toks = vocab.tokens(query_vecs[j], s // cfg.n_subtopics, s % cfg.n_subtopics, query_planes, rng)
        queries.append(Query(j, query_vecs[j], toks, j < n_head))

    cos = query_vecs @ item_vecs.T
    pool = min(cfg.n_items, 3 * cfg.n_exposed)
    far = min(cfg.n_items - cfg.n_unexposed, max(pool, 100))
    order = np.argsort(-cos, axis=1, kind="stable")

    zipf = zipf_probabilities(cfg.n_queries, cfg.zipf_exponent)
    n_test = int(round(cfg.test_fraction * cfg.n_sessions))
    n_train = cfg.n_sessions - n_test
    records = []
    for r in range(cfg.n_sessions):
        qid = int(rng.choice(cfg.n_queries, p=zipf))
        is_test = r >= n_train
        if is_test and rng.random() < cfg.new_user_session_rate and cfg.n_existing_users < cfg.n_users:
            user = int(rng.integers(cfg.n_existing_users, cfg.n_users))
        else:
            user = int(rng.integers(cfg.n_existing_users))
        noisy = cos[qid, order[qid, :pool]] + 0.05 * rng.normal(size=pool)
        exposed_idx = rng.choice(pool, size=cfg.n_exposed, replace=False, p=_softmax(noisy / 0.05))
        exposed = [int(order[qid, k]) for k in exposed_idx]
        exposed.sort(key=lambda i: -cos[qid, i])
        unexposed = [int(i) for i in rng.choice(order[qid, far:], size=cfg.n_unexposed, replace=False)]
        labels = []
        for i in exposed:
            labels.append(grade_label(cos[qid, i] + cfg.label_noise * rng.normal(), quality[i], cfg))
        if max(labels) == 0:
            labels[0] = 1
        cands = exposed + unexposed
        labels += [0] * len(unexposed)
        perm = rng.permutation(len(cands))
        records.append(SearchLogRecord(
            record_id=r, query_id=qid, query_tokens=list(queries[qid].tokens), user_id=user,
            candidates=[cands[p] for p in perm], labels=[labels[p] for p in perm],
            split="test" if is_test else "train",
        ))
    return Corpus(cfg, items, queries, records)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# persistence

def _ints(xs) -> str:
    return ",".join(str(int(x)) for x in xs)


def _reals(xs) -> str:
    return ",".join(f"{float(x):.9g}" for x in xs)


def _coerce(value: str, typ):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "str": str}[typ]
    return typ(value)


def format_config_line(cfg: CorpusConfig) -> str:
    parts = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        parts.append(f"{f.name}={v:.9g}" if isinstance(v, float) else f"{f.name}={v}")
    return "#config " + " ".join(parts)


def parse_config_line(line: str) -> CorpusConfig:
    kv = dict(tok.split("=", 1) for tok in line.split()[1:])
    cfg = CorpusConfig()
    for f in fields(cfg):
        if f.name in kv:
            setattr(cfg, f.name, _coerce(kv[f.name], f.type))
    return cfg


def format_record(rec: SearchLogRecord) -> str:
    return (f"record id={rec.record_id} split={rec.split} query={rec.query_id} user={rec.user_id} "
            f"tokens={_ints(rec.query_tokens)} cand={_ints(rec.candidates)} labels={_ints(rec.labels)}")


def parse_record(line: str) -> SearchLogRecord:
    kv = dict(tok.split("=", 1) for tok in line.split()[1:])
    return SearchLogRecord(
        record_id=int(kv["id"]), query_id=int(kv["query"]),
        query_tokens=[int(x) for x in kv["tokens"].split(",")], user_id=int(kv["user"]),
        candidates=[int(x) for x in kv["cand"].split(",")], labels=[int(x) for x in kv["labels"].split(",")],
        split=kv["split"],
    )


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    lines = ["#gensearch-corpus v1", format_config_line(corpus.config)]
    for it in corpus.items:
        lines.append(f"item id={it.item_id} quality={it.quality:.9g} live={int(it.live)} "
                     f"feats={_ints(it.feature_tokens)} topic={_reals(it.topic_vector)}")
    for q in corpus.queries:
        lines.append(f"query id={q.query_id} head={int(q.head)} tokens={_ints(q.tokens)} topic={_reals(q.topic_vector)}")
    lines.extend(format_record(r) for r in corpus.records)
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus(path: str | Path) -> Corpus:
    items, queries, records = [], [], []
    cfg = None
    with open(path) as fh:
        first = fh.readline().strip()
        if first != "#gensearch-corpus v1":
            raise ValueError(f"{path}: not a corpus file (bad header {first!r})")
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            try:
                kind = line.split(" ", 1)[0]
                if kind == "#config":
                    cfg = parse_config_line(line)
                    continue
                if kind == "record":
                    records.append(parse_record(line))
                    continue
                kv = dict(tok.split("=", 1) for tok in line.split()[1:])
                if kind == "item":
                    items.append(Item(int(kv["id"]), np.array([float(x) for x in kv["topic"].split(",")]),
                                      [int(x) for x in kv["feats"].split(",")], float(kv["quality"]),
                                      kv["live"] == "1"))
                elif kind == "query":
                    queries.append(Query(int(kv["id"]), np.array([float(x) for x in kv["topic"].split(",")]),
                                         [int(x) for x in kv["tokens"].split(",")], kv["head"] == "1"))
                else:
                    raise ValueError(f"unknown line kind {kind!r}")
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if cfg is None:
        raise ValueError(f"{path}: missing #config line")
    return Corpus(cfg, items, queries, records)


# ---------------------------------------------------------------------------
# reward system and user model

def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & MASK64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & MASK64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & MASK64
        return x ^ (x >> np.uint64(31))


def hashed_uniform(seed: int, *keys) -> np.ndarray:
    """Deterministic U[0,1) noise keyed by integers (broadcasts over arrays)."""
    h = _splitmix64(np.asarray(seed, dtype=np.uint64))
    for k in keys:
        with np.errstate(over="ignore"):
            h = _splitmix64(h ^ np.asarray(k, dtype=np.int64).astype(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass
class RewardConfig:
    w_relevance: float = 0.65
    w_quality: float = 0.25
    w_noise: float = 0.10
    seed: int = 0
    attractiveness_power: float = 4.0


def system_reward_value(relevance, quality, noise, cfg: RewardConfig):
    """Blend of hidden relevance, quality and noise, clipped to [0, 1]."""
    r = cfg.w_relevance * relevance + cfg.w_quality * quality + cfg.w_noise * noise
    return np.clip(r, 0.0, 1.0)


def attention(rank) -> np.ndarray:
    """Examination probability at 1-based rank: 1 / log2(rank + 1)."""
    return 1.0 / np.log2(np.asarray(rank, dtype=float) + 1.0)


def sample_clicks(attractiveness, rng: np.random.Generator) -> np.ndarray:
    a = np.asarray(attractiveness, dtype=float)
    p = attention(np.arange(1, a.size + 1)) * a
    return rng.random(a.size) < p


class SearchSimulator:
    """Reward system and position-biased user model over a corpus."""

    def __init__(self, corpus: Corpus, reward: RewardConfig | None = None):
        self.corpus = corpus
        self.reward = reward or RewardConfig(seed=corpus.config.seed)
        self._quality = np.array([it.quality for it in corpus.items])

    def system_rewards(self, query_id: int, user_id: int, item_ids) -> np.ndarray:
        ids = np.asarray(item_ids, dtype=int)
        rel = self.corpus.relevance(query_id, ids)
        noise = hashed_uniform(self.reward.seed, query_id, user_id, ids)
        return system_reward_value(rel, self._quality[ids], noise, self.reward)

    def system_reward(self, query_id: int, user_id: int, item_id: int) -> float:
        if not 0 <= item_id < len(self.corpus.items):
            raise KeyError(f"unknown item {item_id}")
        return float(self.system_rewards(query_id, user_id, [item_id])[0])

    def attractiveness(self, query_id: int, item_ids) -> np.ndarray:
        ids = np.asarray(item_ids, dtype=int)
        rel = self.corpus.relevance(query_id, ids)
        return rel ** self.reward.attractiveness_power * (0.6 + 0.4 * self._quality[ids])

    def simulate_interactions(self, ranked_items, query_id: int, user_id: int,
                              rng: np.random.Generator) -> list[InteractionOutcome]:
        if len(ranked_items) == 0:
            raise ValueError("ranked list must be non-empty")
        ids = np.asarray(ranked_items, dtype=int)
        clicks = sample_clicks(self.attractiveness(query_id, ids), rng)
        rel = self.corpus.relevance(query_id, ids)
        out = []
        for item, clicked, r in zip(ids, clicks, rel):
            watch = float(rng.beta(1.0 + 4.0 * r, 1.0 + 4.0 * (1.0 - r))) if clicked else 0.0
            out.append(InteractionOutcome(int(item), bool(clicked), watch))
        return out

    def expected_interaction_rewards(self, ranked_items, query_id: int) -> np.ndarray:
        """E[click * (0.5 + 0.5 * watch)] per rank, for noise-free probes."""
        ids = np.asarray(ranked_items, dtype=int)
        if ids.size == 0:
            return np.zeros(0)
        rel = self.corpus.relevance(query_id, ids)
        p_click = attention(np.arange(1, ids.size + 1)) * self.attractiveness(query_id, ids)
        mean_watch = (1.0 + 4.0 * rel) / 6.0
        return p_click * (0.5 + 0.5 * mean_watch)


def interaction_reward(outcome: InteractionOutcome) -> float:
    return float(outcome.click) * (0.5 + 0.5 * outcome.watch_fraction)


def live_toggle_events(corpus: Corpus, n_ticks: int, seed: int | None = None) -> list[list[tuple[int, bool]]]:
    """Per simulated tick, the (item_id, now_live) changes for the toggling subset.

    A ``live_toggle_fraction`` of items flip state at random ticks; the rest
    stay live throughout.
    """
    cfg = corpus.config
    rng = np.random.default_rng(cfg.seed + 7919 if seed is None else seed)
    n_toggle = int(round(cfg.live_toggle_fraction * len(corpus.items)))
    toggling = rng.choice(len(corpus.items), size=n_toggle, replace=False)
    state = {int(i): corpus.items[int(i)].live for i in toggling}
    events: list[list[tuple[int, bool]]] = []
    for _ in range(n_ticks):
        tick = []
        for i in toggling:
            if rng.random() < 0.25:
                state[int(i)] = not state[int(i)]
                tick.append((int(i), state[int(i)]))
        events.append(tick)
    return events


def corpus_summary(corpus: Corpus) -> dict:
    recs = corpus.records
    return {
        "config": asdict(corpus.config),
        "n_records": len(recs),
        "n_train": sum(r.split == "train" for r in recs),
        "n_test": sum(r.split == "test" for r in recs),
        "mean_positives": float(np.mean([len(r.positives()) for r in recs])),
    }
