"""Query encoder, item encoder and the autoregressive semantic-ID decoder.

All three are embedding-bag + small MLP networks with hand-written
backward passes. Batched functions return a cache consumed by the matching
``*_backward`` which accumulates into a gradient dict keyed like the
:class:`~gensearch.numeric.ParamStore`.

Parameter names::

    query.tok_emb    (Vq, dim)        query.user_emb (n_users, dim)
    query.w1         (hq, 2*dim)      query.b1       (hq,)
    query.w2         (dim, hq)        query.b2       (dim,)
    item.feat_emb    (Vf, dim)        item.slot_proj (k, dim, dim)
    codebook.basis   (k, W, dim)  frozen   codebook.map (k, dim, dim)
    codebook.entries (k, W, dim)  only when codebook_mode == "direct"
    decoder.prefix_emb (k-1, W, dim)  decoder.w_ctx (hd, 3*dim)
    decoder.b_ctx    (hd,)            decoder.heads (k, W, hd)
    decoder.head_bias (k, W)
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .numeric import ParamStore, log_softmax, xavier_uniform


@dataclass
class ModelConfig:
    dim: int = 32
    k: int = 3
    W: int = 64
    query_hidden: int = 64
    decoder_hidden: int = 128
    query_vocab: int = 100
    feature_vocab: int = 100
    n_users: int = 200
    codebook_mode: str = "simvq"
    basis_scale: float = 1.0
    map_scale: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.W < 2:
            raise ValueError("W must be >= 2")
        if self.codebook_mode not in ("simvq", "direct"):
            raise ValueError(f"unknown codebook_mode {self.codebook_mode!r}")
        if self.basis_scale <= 0 or self.map_scale <= 0:
            raise ValueError("basis_scale and map_scale must be > 0")


def init_params(cfg: ModelConfig) -> ParamStore:
    """Embeddings ~ N(0, 0.02^2), MLP weights Xavier-uniform, decoder heads zero.

    The codebook basis has rows of norm about ``basis_scale`` and the map
    starts at ``map_scale * I``, so initial entries sit at the scale of the
    freshly initialized item latents while the map's gradient keeps the
    basis' unit scale. The direct table starts from the same entries.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, k, W = cfg.dim, cfg.k, cfg.W
    p = ParamStore()
    p.add("query.tok_emb", rng.normal(0.0, 0.02, size=(cfg.query_vocab, d)))
    p.add("query.user_emb", rng.normal(0.0, 0.02, size=(cfg.n_users, d)))
    p.add("query.w1", xavier_uniform(rng, cfg.query_hidden, 2 * d))
    p.add("query.b1", np.zeros(cfg.query_hidden))
    p.add("query.w2", xavier_uniform(rng, d, cfg.query_hidden))
    p.add("query.b2", np.zeros(d))
    p.add("item.feat_emb", rng.normal(0.0, 0.02, size=(cfg.feature_vocab, d)))
    p.add("item.slot_proj", np.stack([xavier_uniform(rng, d, d) for _ in range(k)]))
    basis = rng.normal(0.0, cfg.basis_scale / np.sqrt(d), size=(k, W, d))
    p.add("codebook.basis", basis, frozen=True)
    if cfg.codebook_mode == "simvq":
        p.add("codebook.map", np.stack([cfg.map_scale * np.eye(d)] * k))
    else:
        p.add("codebook.entries", cfg.map_scale * basis)
    p.add("decoder.prefix_emb", rng.normal(0.0, 0.02, size=(max(k - 1, 0), W, d)))
    p.add("decoder.w_ctx", xavier_uniform(rng, cfg.decoder_hidden, 3 * d))
    p.add("decoder.b_ctx", np.zeros(cfg.decoder_hidden))
    p.add("decoder.heads", np.zeros((k, W, cfg.decoder_hidden)))
    p.add("decoder.head_bias", np.zeros((k, W)))
    return p


def codebook_entries(params: ParamStore) -> np.ndarray:
    """Effective (k, W, dim) codebook: basis @ map, or the direct table."""
    if "codebook.entries" in params:
        return params["codebook.entries"]
    return np.einsum("kwi,kij->kwj", params["codebook.basis"], params["codebook.map"])


def pad_tokens(token_lists, vocab: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad ragged token lists; ids outside the vocabulary map to OOV id 0."""
    n = len(token_lists)
    lens = np.array([len(t) for t in token_lists], dtype=int)
    if n and lens.min() == 0:
        raise ValueError("token lists must be non-empty")
    ids = np.zeros((n, int(lens.max()) if n else 0), dtype=int)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
    ids[(ids < 0) | (ids >= vocab)] = 0
    mask = np.arange(ids.shape[1])[None, :] < lens[:, None]
    return ids, mask, lens


def _pool_forward(table, ids, mask, lens):
    emb = table[ids] * mask[..., None]
    return emb.sum(axis=1) / lens[:, None]


def _pool_backward(grad_table, ids, mask, lens, dpooled):
    g = np.broadcast_to((dpooled / lens[:, None])[:, None, :], ids.shape + (dpooled.shape[1],))
    np.add.at(grad_table, ids[mask], g[mask])


# ---------------------------------------------------------------------------
# query encoder

def query_forward(params: ParamStore, ids, mask, lens, users):
    pooled = _pool_forward(params["query.tok_emb"], ids, mask, lens)
    x = np.concatenate([pooled, params["query.user_emb"][users]], axis=1)
    h = np.tanh(x @ params["query.w1"].T + params["query.b1"])
    q = h @ params["query.w2"].T + params["query.b2"]
    return q, (ids, mask, lens, users, x, h)


def query_backward(params: ParamStore, cache, dq, grads) -> None:
    ids, mask, lens, users, x, h = cache
    d = params["query.tok_emb"].shape[1]
    grads["query.w2"] += dq.T @ h
    grads["query.b2"] += dq.sum(axis=0)
    da = (dq @ params["query.w2"]) * (1.0 - h * h)
    grads["query.w1"] += da.T @ x
    grads["query.b1"] += da.sum(axis=0)
    dx = da @ params["query.w1"]
    _pool_backward(grads["query.tok_emb"], ids, mask, lens, dx[:, :d])
    np.add.at(grads["query.user_emb"], users, dx[:, d:])


def encode_query(query_tokens, user_id: int, params: ParamStore) -> np.ndarray:
    ids, mask, lens = pad_tokens([list(query_tokens)], params["query.tok_emb"].shape[0])
    users = np.array([user_id])
    users[(users < 0) | (users >= params["query.user_emb"].shape[0])] = 0
    q, _ = query_forward(params, ids, mask, lens, users)
    return q[0]


# ---------------------------------------------------------------------------
# item encoder

def item_forward(params: ParamStore, ids, mask, lens):
    pooled = _pool_forward(params["item.feat_emb"], ids, mask, lens)
    D = np.matmul(pooled[None], params["item.slot_proj"].transpose(0, 2, 1)).transpose(1, 0, 2)
    return D, (ids, mask, lens, pooled)


def item_backward(params: ParamStore, cache, dD, grads) -> None:
    ids, mask, lens, pooled = cache
    dDk = dD.transpose(1, 0, 2)
    grads["item.slot_proj"] += np.matmul(dDk.transpose(0, 2, 1), pooled[None])
    dpooled = np.matmul(dDk, params["item.slot_proj"]).sum(axis=0)
    _pool_backward(grads["item.feat_emb"], ids, mask, lens, dpooled)


def encode_item(feature_tokens, params: ParamStore) -> np.ndarray:
    """The k latent vectors (k, dim) of one item."""
    ids, mask, lens = pad_tokens([list(feature_tokens)], params["item.feat_emb"].shape[0])
    D, _ = item_forward(params, ids, mask, lens)
    return D[0]


def encode_items(feature_lists, params: ParamStore, chunk: int = 4096) -> np.ndarray:
    out = []
    for s in range(0, len(feature_lists), chunk):
        ids, mask, lens = pad_tokens(feature_lists[s : s + chunk], params["item.feat_emb"].shape[0])
        out.append(item_forward(params, ids, mask, lens)[0])
    return np.concatenate(out) if out else np.zeros((0,) + params["item.slot_proj"].shape[:2])


# ---------------------------------------------------------------------------
# decoder

def decoder_forward(params: ParamStore, q, users, paths, prefix_vecs):
    """Per-level log-probabilities (n, k, W) under teacher forcing.

    ``prefix_vecs[:, m]`` is the quantized vector of code ``paths[:, m]``; the
    context of level ``l`` sums prefix embeddings and prefix vectors of levels
    ``m < l`` only, so later codes can never leak into earlier levels.
    """
    n, k = paths.shape
    P = params["decoder.prefix_emb"]
    d = q.shape[1]
    contrib = np.zeros((n, k, d))
    for m in range(k - 1):
        contrib[:, m] = P[m, paths[:, m]] + prefix_vecs[:, m]
    pref = np.zeros((n, k, d))
    if k > 1:
        pref[:, 1:] = np.cumsum(contrib[:, :-1], axis=1)
    u = params["query.user_emb"][users]
    ctx = np.concatenate([np.broadcast_to(q[:, None], (n, k, d)), np.broadcast_to(u[:, None], (n, k, d)), pref], axis=2)
    h = np.tanh(ctx @ params["decoder.w_ctx"].T + params["decoder.b_ctx"])
    logits = np.matmul(h.transpose(1, 0, 2), params["decoder.heads"].transpose(0, 2, 1)).transpose(1, 0, 2)
    logits = logits + params["decoder.head_bias"][None]
    logp = log_softmax(logits, axis=2)
    return logp, (paths, users, ctx, h, logp)


def decoder_backward(params: ParamStore, cache, dlogits, grads) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate decoder grads; return (dq, dprefix_vecs)."""
    paths, users, ctx, h, _ = cache
    n, k = paths.shape
    d = ctx.shape[2] // 3
    dl = dlogits.transpose(1, 0, 2)
    grads["decoder.heads"] += np.matmul(dl.transpose(0, 2, 1), h.transpose(1, 0, 2))
    grads["decoder.head_bias"] += dlogits.sum(axis=0)
    dh = np.matmul(dl, params["decoder.heads"]).transpose(1, 0, 2)
    da = dh * (1.0 - h * h)
    grads["decoder.w_ctx"] += da.reshape(-1, da.shape[2]).T @ ctx.reshape(-1, ctx.shape[2])
    grads["decoder.b_ctx"] += da.sum(axis=(0, 1))
    dctx = da @ params["decoder.w_ctx"]
    dq = dctx[:, :, :d].sum(axis=1)
    np.add.at(grads["query.user_emb"], users, dctx[:, :, d : 2 * d].sum(axis=1))
    dpref = dctx[:, :, 2 * d :]
    dcontrib = np.zeros((n, k, d))
    if k > 1:
        # contribution of level m feeds every level l > m
        dcontrib[:, :-1] = np.cumsum(dpref[:, :0:-1], axis=1)[:, ::-1]
    for m in range(k - 1):
        np.add.at(grads["decoder.prefix_emb"][m], paths[:, m], dcontrib[:, m])
    return dq, dcontrib


def level_log_probs(params: ParamStore, q, user_id: int, prefixes: np.ndarray, entries: np.ndarray | None = None):
    """Log-probabilities (B, W) of the next code for B prefixes of equal length."""
    prefixes = np.asarray(prefixes, dtype=int)
    if prefixes.ndim == 1:
        prefixes = prefixes[None, :]
    B, level = prefixes.shape
    k = params["decoder.heads"].shape[0]
    if level > k - 1:
        raise ValueError(f"prefix length {level} exceeds k-1 = {k - 1}")
    if entries is None:
        entries = codebook_entries(params)
    d = q.shape[0]
    pref = np.zeros((B, d))
    for m in range(level):
        pref += params["decoder.prefix_emb"][m, prefixes[:, m]] + entries[m, prefixes[:, m]]
    u = params["query.user_emb"][user_id]
    ctx = np.concatenate([np.broadcast_to(q, (B, d)), np.broadcast_to(u, (B, d)), pref], axis=1)
    h = np.tanh(ctx @ params["decoder.w_ctx"].T + params["decoder.b_ctx"])
    logits = h @ params["decoder.heads"][level].T + params["decoder.head_bias"][level]
    return log_softmax(logits, axis=1)


def decode_step(q, user_id: int, prefix, params: ParamStore) -> np.ndarray:
    """Distribution over the W codes at level len(prefix)+1."""
    prefix = np.asarray(prefix, dtype=int).reshape(1, -1)
    W = params["decoder.heads"].shape[1]
    if prefix.size and (prefix.min() < 0 or prefix.max() >= W):
        raise ValueError("prefix codes must lie in [0, W)")
    return np.exp(level_log_probs(params, np.asarray(q, dtype=float), user_id, prefix)[0])


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic      8 bytes  b"GSRCHCKP"
#   version    u32      1
#   meta_len   u32, meta bytes (UTF-8 "key=value" lines)
#   n_tensors  u32
#   per tensor: name_len u16, name bytes, frozen u8, ndim u8,
#               shape u64 * ndim, data float64 * prod(shape)
# All integers and floats little-endian.

CKPT_MAGIC = b"GSRCHCKP"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, params: ParamStore, meta: dict[str, str] | None = None) -> str:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    meta_bytes = "".join(f"{k}={v}\n" for k, v in sorted((meta or {}).items())).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, value in params.tensors.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", int(name in params.frozen), value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()[:12]


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict[str, str], str]:
    """Return (params, meta, version id) where the id hashes the file bytes."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    off = 8
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = dict(line.split("=", 1) for line in data[off : off + meta_len].decode().splitlines() if line)
    off += meta_len
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    params = ParamStore()
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nl].decode()
        off += nl
        frozen, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        params.add(name, arr, frozen=bool(frozen))
    return params, meta, hashlib.sha256(data).hexdigest()[:12]


def model_config_to_meta(cfg: ModelConfig) -> dict[str, str]:
    return {f"model.{k}": str(v) for k, v in asdict(cfg).items()}


def model_config_from_meta(meta: dict[str, str]) -> ModelConfig:
    cfg = ModelConfig()
    for f in fields(cfg):
        key = f"model.{f.name}"
        if key in meta:
            typ = {"int": int, "float": float, "str": str}[f.type] if isinstance(f.type, str) else f.type
            setattr(cfg, f.name, typ(meta[key]))
    return cfg
