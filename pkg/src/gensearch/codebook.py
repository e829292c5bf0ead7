"""Multi-level codebook: nearest-neighbour quantization into semantic IDs.

Entries at level n are ``basis[n] @ map[n]`` with a frozen Gaussian basis and
a learnable square map (a scaled identity at init), or a directly learnable table in
the ``direct`` ablation.
"""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

import numpy as np

Path_ = tuple[int, ...]


def format_path(path: Sequence[int]) -> str:
    """'17-203-5' style serialization used in logs, snapshots and responses."""
    return "-".join(str(int(s)) for s in path)


def parse_path(text: str) -> Path_:
    try:
        return tuple(int(s) for s in text.strip().split("-"))
    except ValueError as exc:
        raise ValueError(f"malformed semantic-ID path {text!r}") from exc


def nearest_codes(latents: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """argmin_j ||x - entries[j]||^2 per row; ties go to the lowest index.

    np.argmin returns the first minimum, which is the tie-break we want.
    """
    d2 = ((latents[:, None, :] - entries[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def quantize(D: np.ndarray, entries: np.ndarray) -> tuple[Path_, np.ndarray]:
    """Quantize one item's (k, dim) latents against (k, W, dim) entries."""
    D = np.asarray(D, dtype=float)
    if D.shape[0] != entries.shape[0]:
        raise ValueError(f"expected {entries.shape[0]} latents, got {D.shape[0]}")
    path = tuple(int(nearest_codes(D[n : n + 1], entries[n])[0]) for n in range(D.shape[0]))
    E = np.stack([entries[n, s] for n, s in enumerate(path)])
    return path, E


def quantize_batch(D: np.ndarray, entries: np.ndarray, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized quantization of (n, k, dim) latents -> (paths (n, k), E (n, k, dim))."""
    n, k, _ = D.shape
    paths = np.zeros((n, k), dtype=int)
    for level in range(k):
        C = entries[level]
        c2 = (C * C).sum(axis=1)
        for s in range(0, n, chunk):
            X = D[s : s + chunk, level]
            # expanded form is fast but can misorder near-ties; re-resolve exactly on the shortlist
            approx = (X * X).sum(axis=1, keepdims=True) - 2.0 * X @ C.T + c2[None, :]
            best = approx.min(axis=1, keepdims=True)
            close = approx <= best + 1e-9 * (1.0 + np.abs(best))
            for r in np.nonzero(close.sum(axis=1) > 1)[0]:
                cand = np.nonzero(close[r])[0]
                exact = ((X[r][None, :] - C[cand]) ** 2).sum(axis=1)
                close[r] = False
                close[r, cand[np.argmin(exact)]] = True
            paths[s : s + chunk, level] = np.argmax(close, axis=1)
    E = entries[np.arange(k)[None, :], paths]
    return paths, E


def codebook_loss(D: np.ndarray, E: np.ndarray, alpha1: float, alpha2: float):
    """Codebook + commitment loss over k levels.

    Returns ``(loss, dE, dD)``: ``dE`` is the gradient the codebook receives
    (alpha1 term only, encoder side held constant) and ``dD`` the gradient the
    encoder receives (alpha2 term only, codebook side held constant).
    """
    D = np.asarray(D, dtype=float)
    E = np.asarray(E, dtype=float)
    if D.shape != E.shape:
        raise ValueError("D and E must have the same shape")
    diff = D - E
    sq = float(np.sum(diff * diff))
    loss = alpha1 * sq + alpha2 * sq
    dE = -2.0 * alpha1 * diff
    dD = 2.0 * alpha2 * diff
    return loss, dE, dD


def entries_grad_to_params(params, dEntries: np.ndarray) -> dict[str, np.ndarray]:
    """Chain d(loss)/d(entries) into the codebook's learnable tensor."""
    if "codebook.entries" in params:
        return {"codebook.entries": dEntries}
    return {"codebook.map": np.einsum("kwi,kwj->kij", params["codebook.basis"], dEntries)}


class StraightThrough:
    """Forward value is the quantized vector; backward passes grads to the latent unchanged."""

    def __init__(self, d: np.ndarray, e: np.ndarray):
        d = np.asarray(d, dtype=float)
        e = np.asarray(e, dtype=float)
        if d.shape != e.shape:
            raise ValueError("straight-through needs equal shapes")
        self.value = e.copy()

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        return np.array(upstream, dtype=float, copy=True)


def straight_through(d: np.ndarray, e: np.ndarray) -> StraightThrough:
    return StraightThrough(d, e)


def utilization(assignments: Iterable[Sequence[int]]) -> list[float]:
    """Per-level perplexity exp(H) of code usage."""
    paths = [tuple(p) for p in assignments]
    if not paths:
        raise ValueError("utilization needs at least one assignment")
    out = []
    for level in range(len(paths[0])):
        counts = np.array(list(Counter(p[level] for p in paths).values()), dtype=float)
        freq = counts / counts.sum()
        out.append(float(np.exp(-np.sum(freq * np.log(freq)))))
    return out
