"""Dense parameter storage, optimizers and the finite-difference gradient harness.

Every loss in the package returns ``(value, grads)`` with hand-derived
gradients; :func:`grad_check` compares those against central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

DTYPE = np.float64


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss evaluates to NaN or Inf."""


class ParamStore:
    """Named float64 tensors with matching gradient accumulators.

    Parameters listed in ``frozen`` are stored (and checkpointed) but never
    touched by an optimizer.
    """

    def __init__(self, tensors: dict[str, np.ndarray] | None = None, frozen: Iterable[str] = ()):
        self.tensors: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set(frozen)
        self.step = 0
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> None:
        arr = np.array(value, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self.tensors[name] = arr
        self.grads[name] = np.zeros_like(arr)
        if frozen:
            self.frozen.add(name)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[str]:
        return [n for n in self.tensors if n not in self.frozen]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.grads[name] += g

    def copy(self) -> "ParamStore":
        out = ParamStore(frozen=self.frozen)
        for name, value in self.tensors.items():
            out.tensors[name] = value.copy()
            out.grads[name] = np.zeros_like(value)
        out.step = self.step
        return out

    def flat_trainable(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = self.trainable() if names is None else list(names)
        return np.concatenate([self.tensors[n].ravel() for n in names]) if names else np.zeros(0)

    def equals(self, other: "ParamStore") -> bool:
        if set(self.tensors) != set(other.tensors):
            return False
        return all(np.array_equal(self.tensors[n], other.tensors[n]) for n in self.tensors)


def zeros_like_params(params: ParamStore) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in params.tensors.items()}


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


def softmax_xent(logits: np.ndarray, target_index: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of a single logit vector against a target index.

    Returns the loss ``-log softmax(logits)[target]`` and its gradient with
    respect to the logits, ``softmax(logits) - onehot(target)``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("softmax_xent needs a non-empty 1-D logit vector")
    if not 0 <= target_index < logits.size:
        raise IndexError(f"target index {target_index} outside [0, {logits.size})")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[target_index] -= 1.0
    return float(-logp[target_index]), grad


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    epsilon: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst < tol


def grad_check(
    loss_fn: Callable[[ParamStore], tuple[float, dict[str, np.ndarray]]],
    params: ParamStore,
    epsilon: float = 1e-6,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(params)`` must return ``(loss, grads)``; only the loss is used
    at perturbed points. Parameters are restored in place afterwards.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    base_loss, analytic = loss_fn(params)
    if not math.isfinite(base_loss):
        raise NonFiniteLossError("loss is non-finite at the unperturbed point")
    report: dict[str, float] = {}
    for name in (names if names is not None else params.trainable()):
        tensor = params.tensors[name]
        grad = analytic.get(name, np.zeros_like(tensor))
        flat = tensor.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            plus, _ = loss_fn(params)
            flat[i] = orig - epsilon
            minus, _ = loss_fn(params)
            flat[i] = orig
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NonFiniteLossError(f"non-finite loss while perturbing {name!r}[{i}]")
            fd[i] = (plus - minus) / (2.0 * epsilon)
        a = grad.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-8)
        report[name] = float(np.max(np.abs(a - fd) / denom)) if a.size else 0.0
    return GradCheckReport(report, epsilon)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class SGD:
    lr: float
    momentum: float = 0.9
    _velocity: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        for name in params.trainable():
            g = grads.get(name)
            if g is None:
                continue
            v = self._velocity.get(name)
            if v is None:
                v = self._velocity[name] = np.zeros_like(g)
            v *= self.momentum
            v += g
            params.tensors[name] -= self.lr * v
        params.step += 1


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _t: int = 0

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self._t += 1
        c1 = 1.0 - self.beta1**self._t
        c2 = 1.0 - self.beta2**self._t
        for name in params.trainable():
            g = grads.get(name)
            if g is None:
                continue
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params.tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        params.step += 1


def make_optimizer(name: str, lr: float, momentum: float = 0.9):
    if name == "sgd":
        return SGD(lr=lr, momentum=momentum)
    if name == "adam":
        return Adam(lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")
