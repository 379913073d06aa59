"""Dense numeric kernels and masked affine layers.

Everything downstream (the H-LSTM cell, the grow/prune algorithms, the
synthesis flow) is built on the primitives here: a deterministic matmul,
masked linear layers whose gradients are accumulated for *all* entries
(dormant connections included, so growth can rank them later), elementwise
activations with analytic derivatives, order-statistic thresholds, and a
mask-respecting SGD step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

FLOAT = np.float64


class ContractViolation(ValueError):
    """A caller broke an operation precondition (shape/range mismatch)."""


class NumericAbort(RuntimeError):
    """A non-finite value surfaced where the contract requires finiteness."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded RNG; identical seed gives an identical draw sequence."""
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense product C[i,j] = sum_k A[i,k] B[k,j], fixed summation order.

    Delegates to numpy's BLAS path, which is bit-deterministic across runs
    for identical inputs and a fixed thread configuration.
    """
    a = np.asarray(a, dtype=FLOAT)
    b = np.asarray(b, dtype=FLOAT)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


class ActivationKind(Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"


def activation_forward(kind: ActivationKind, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=FLOAT)
    if kind is ActivationKind.SIGMOID:
        # numerically stable split on sign
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out
    if kind is ActivationKind.TANH:
        return np.tanh(v)
    if kind is ActivationKind.RELU:
        return np.maximum(v, 0.0)
    raise ContractViolation(f"unknown activation {kind!r}")


def activation_backward(kind: ActivationKind, out: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Analytic derivative expressed through the cached forward output."""
    if kind is ActivationKind.SIGMOID:
        return d_out * out * (1.0 - out)
    if kind is ActivationKind.TANH:
        return d_out * (1.0 - out * out)
    if kind is ActivationKind.RELU:
        return d_out * (out > 0.0)
    raise ContractViolation(f"unknown activation {kind!r}")


@dataclass
class MaskedLinear:
    """Affine layer y = (W*Msk) x + b with full-gradient accumulation.

    The mask gates the forward value and the SGD update, *not* the gradient:
    grad_w is accumulated for every entry so dormant connections keep a
    usable gradient signal for the growth algorithms.
    """

    w: np.ndarray
    mask: np.ndarray
    b: np.ndarray
    name: str = "layer"
    grad_w: np.ndarray = field(init=False)
    grad_b: np.ndarray = field(init=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=FLOAT)
        self.mask = np.asarray(self.mask, dtype=FLOAT)
        self.b = np.asarray(self.b, dtype=FLOAT)
        if self.w.ndim != 2 or self.w.shape != self.mask.shape:
            raise ContractViolation(
                f"{self.name}: W{self.w.shape} and Msk{self.mask.shape} must be equal 2-D shapes")
        if self.b.shape != (self.w.shape[0],):
            raise ContractViolation(f"{self.name}: bias shape {self.b.shape} != ({self.w.shape[0]},)")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ContractViolation(f"{self.name}: mask entries must be 0 or 1")
        self.grad_w = np.zeros_like(self.w)
        self.grad_b = np.zeros_like(self.b)
        self.apply_mask()

    @classmethod
    def dense(cls, out_dim: int, in_dim: int, rng: np.random.Generator | None = None,
              name: str = "layer") -> "MaskedLinear":
        if rng is None:
            w = np.zeros((out_dim, in_dim), dtype=FLOAT)
        else:
            bound = 1.0 / math.sqrt(max(in_dim, 1))
            w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        return cls(w=w, mask=np.ones((out_dim, in_dim)), b=np.zeros(out_dim), name=name)

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    def effective(self) -> np.ndarray:
        return self.w * self.mask

    def apply_mask(self) -> None:
        self.w *= self.mask

    def active_count(self) -> int:
        return int(self.mask.sum())

    def zero_grads(self) -> None:
        self.grad_w[...] = 0.0
        self.grad_b[...] = 0.0

    def forward(self, x: np.ndarray) -> np.ndarray:
        """y = (W*Msk) x + b. Accepts a vector (in,) or a batch (B, in)."""
        x = np.asarray(x, dtype=FLOAT)
        if x.shape[-1] != self.in_dim:
            raise ContractViolation(
                f"{self.name}: input width {x.shape[-1]} != expected {self.in_dim}")
        return x @ self.effective().T + self.b

    def backward(self, x: np.ndarray, d_y: np.ndarray) -> np.ndarray:
        """Accumulate grad_w (unmasked) and grad_b; return dL/dx.

        grad_w is intentionally *not* masked: dormant-connection gradients
        must survive for growth ranking.
        """
        x = np.asarray(x, dtype=FLOAT)
        d_y = np.asarray(d_y, dtype=FLOAT)
        if d_y.shape[-1] != self.out_dim or x.shape[-1] != self.in_dim:
            raise ContractViolation(
                f"{self.name}: backward shapes x{x.shape}, dy{d_y.shape} vs "
                f"W{self.w.shape}")
        if x.ndim == 1:
            self.grad_w += np.outer(d_y, x)
            self.grad_b += d_y
        else:
            self.grad_w += d_y.T @ x
            self.grad_b += d_y.sum(axis=0)
        return d_y @ self.effective()

    def active_rows(self) -> np.ndarray:
        return np.flatnonzero(self.mask.any(axis=1))

    def active_cols(self) -> np.ndarray:
        return np.flatnonzero(self.mask.any(axis=0))


def percentile_threshold(values, q: float, direction: str = "smallest") -> float:
    """k-th order statistic with k = ceil(q*n), from the stated direction.

    q=0 returns a sentinel that selects no elements downstream (-inf for
    "smallest" selections of the form x <= thr, +inf for "largest" with
    x >= thr).
    """
    vals = np.asarray(list(values), dtype=FLOAT)
    if vals.size == 0:
        raise ContractViolation("percentile_threshold on empty list")
    if not 0.0 <= q <= 1.0:
        raise ContractViolation(f"quantile {q} outside [0, 1]")
    if direction not in ("smallest", "largest"):
        raise ContractViolation(f"direction {direction!r}")
    n = vals.size
    k = min(max(int(math.ceil(q * n)), 1), n)
    if q == 0.0:
        return -math.inf if direction == "smallest" else math.inf
    ordered = np.sort(vals)
    return float(ordered[k - 1] if direction == "smallest" else ordered[n - k])


def sgd_step(layer: MaskedLinear, lr: float, weight_decay: float = 0.0) -> None:
    """W <- W - lr (grad + wd W) on active entries only; gradients cleared.

    Bias updates are applied only to rows that still have at least one
    active connection, so dead output units keep a zero bias.
    """
    if not np.all(np.isfinite(layer.grad_w)) or not np.all(np.isfinite(layer.grad_b)):
        raise NumericAbort(f"non-finite gradient in layer {layer.name!r}")
    layer.w -= lr * layer.mask * (layer.grad_w + weight_decay * layer.w)
    live = layer.mask.any(axis=1)
    layer.b[live] -= lr * (layer.grad_b[live] + weight_decay * layer.b[live])
    layer.apply_mask()
    layer.zero_grads()


def sgd_update(value: np.ndarray, grad: np.ndarray, lr: float, weight_decay: float = 0.0) -> None:
    """Plain (unmasked) SGD update for dense parameters such as embeddings."""
    if not np.all(np.isfinite(grad)):
        raise NumericAbort("non-finite gradient in dense parameter")
    value -= lr * (grad + weight_decay * value)
