"""Transformer building blocks: RMSNorm, scaled dot-product multi-head
attention, position-wise feed-forward, and absolute-time encodings.

Weight containers hold plain float64 arrays (or tape variables after
``bind``); the forward functions accept either.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Var
from .errors import ConfigError, InputError, ShapeError

EPS_NORM = 1e-6

# Absolute-time encoding wavelengths, geometric from 1 s to 1e4 s; the
# slowest component keeps second-spaced timestamps distinct over hours.
TIME_WAVELENGTH_MIN = 1.0
TIME_WAVELENGTH_MAX = 1.0e4

Tensor = Array | Var
MapFn = Callable[[str, Tensor], Tensor]


def as_var(x: Tensor) -> Var:
    return x if isinstance(x, Var) else ad.const(x)


def uniform_init(rng: np.random.Generator, rows: int, cols: int) -> Array:
    """Scaled-uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(rows)
    return rng.uniform(-bound, bound, size=(rows, cols))


def rmsnorm(x: Var | Array, gain: Tensor, eps: float = EPS_NORM) -> Var:
    """Row-wise RMS normalization: out_ij = gain_j * x_ij / sqrt(mean_j(x_ij^2) + eps)."""
    x = as_var(x)
    gain = as_var(gain)
    if gain.shape != (1, x.shape[1]):
        raise ShapeError(f"rmsnorm gain {gain.shape} does not match row width {x.shape[1]}")
    mean_sq = ad.row_means(ad.mul(x, x))
    inv_rms = ad.pow_const(ad.add_const(mean_sq, eps), -0.5)
    return ad.mul(ad.mul(x, inv_rms), gain)


def time_encode(timestamps, d: int) -> Array:
    """Sinusoidal encoding of absolute timestamps (seconds) into d components.

    Deterministic, bounded in [-1, 1], identical rows for identical
    timestamps.  Even columns carry sin, odd columns cos, over geometric
    wavelengths spanning seconds to hours.
    """
    ts = np.asarray(timestamps, dtype=np.float64).ravel()
    if not np.all(np.isfinite(ts)):
        raise InputError("timestamps contain non-finite values")
    if np.any(ts < 0):
        raise InputError("timestamps must be nonnegative seconds")
    if d < 1:
        raise ConfigError(f"encoding dimension must be >= 1, got {d}")
    n_freq = (d + 1) // 2
    if n_freq == 1:
        wavelengths = np.array([math.sqrt(TIME_WAVELENGTH_MIN * TIME_WAVELENGTH_MAX)])
    else:
        exponents = np.linspace(0.0, 1.0, n_freq)
        wavelengths = TIME_WAVELENGTH_MIN * (TIME_WAVELENGTH_MAX / TIME_WAVELENGTH_MIN) ** exponents
    angles = 2.0 * math.pi * ts[:, None] / wavelengths[None, :]
    out = np.zeros((ts.size, d))
    out[:, 0::2] = np.sin(angles[:, : out[:, 0::2].shape[1]])
    out[:, 1::2] = np.cos(angles[:, : out[:, 1::2].shape[1]])
    return out


@dataclass
class AttentionWeights:
    """Per-head query/key/value projections plus the output projection."""

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    @property
    def heads(self) -> int:
        return len(self.wq)

    @classmethod
    def seeded(cls, d: int, heads: int, rng: np.random.Generator) -> "AttentionWeights":
        if heads < 1 or d % heads != 0:
            raise ConfigError(f"model dim {d} not divisible by {heads} heads")
        d_h = d // heads
        return cls(
            wq=[uniform_init(rng, d, d_h) for _ in range(heads)],
            wk=[uniform_init(rng, d, d_h) for _ in range(heads)],
            wv=[uniform_init(rng, d, d_h) for _ in range(heads)],
            wo=uniform_init(rng, d, d),
        )

    @classmethod
    def identity(cls, d: int) -> "AttentionWeights":
        """Single head with identity projections, for oracle tests."""
        eye = np.eye(d)
        return cls(wq=[eye.copy()], wk=[eye.copy()], wv=[eye.copy()], wo=eye.copy())

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i in range(self.heads):
            yield f"{prefix}.h{i}.wq", self.wq[i]
            yield f"{prefix}.h{i}.wk", self.wk[i]
            yield f"{prefix}.h{i}.wv", self.wv[i]
        yield f"{prefix}.wo", self.wo

    def map_tensors(self, prefix: str, fn: MapFn) -> "AttentionWeights":
        return AttentionWeights(
            wq=[fn(f"{prefix}.h{i}.wq", w) for i, w in enumerate(self.wq)],
            wk=[fn(f"{prefix}.h{i}.wk", w) for i, w in enumerate(self.wk)],
            wv=[fn(f"{prefix}.h{i}.wv", w) for i, w in enumerate(self.wv)],
            wo=fn(f"{prefix}.wo", self.wo),
        )


def multi_head_attention(
    q_in: Var | Array,
    kv_in: Var | Array,
    w: AttentionWeights,
) -> tuple[Var, list[Var]]:
    """Scaled dot-product attention of q_in rows over kv_in rows.

    Returns the projected output (same row count as q_in) and the
    per-head attention maps.  Self-attention is the kv_in == q_in case.
    """
    q_in = as_var(q_in)
    kv_in = as_var(kv_in)
    d = q_in.shape[1]
    if kv_in.shape[1] != d:
        raise ShapeError(f"query dim {d} vs key/value dim {kv_in.shape[1]}")
    if d % w.heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {w.heads} heads")
    attn_maps: list[Var] = []
    head_outs: list[Var] = []
    for h in range(w.heads):
        wq, wk, wv = as_var(w.wq[h]), as_var(w.wk[h]), as_var(w.wv[h])
        d_h = wq.shape[1]
        q = ad.matmul(q_in, wq)
        k = ad.matmul(kv_in, wk)
        v = ad.matmul(kv_in, wv)
        logits = ad.smul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_h))
        attn = ad.softmax_rows(logits, 1.0)
        attn_maps.append(attn)
        head_outs.append(ad.matmul(attn, v))
    merged = head_outs[0] if len(head_outs) == 1 else ad.hcat(head_outs)
    out = ad.matmul(merged, as_var(w.wo))
    return out, attn_maps


@dataclass
class FeedForwardWeights:
    """Two-layer position-wise transform, hidden width 4*d, SiLU activation."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def seeded(cls, d: int, rng: np.random.Generator) -> "FeedForwardWeights":
        hidden = 4 * d
        return cls(
            w1=uniform_init(rng, d, hidden),
            b1=np.zeros((1, hidden)),
            w2=uniform_init(rng, hidden, d),
            b2=np.zeros((1, d)),
        )

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2

    def map_tensors(self, prefix: str, fn: MapFn) -> "FeedForwardWeights":
        return FeedForwardWeights(
            w1=fn(f"{prefix}.w1", self.w1),
            b1=fn(f"{prefix}.b1", self.b1),
            w2=fn(f"{prefix}.w2", self.w2),
            b2=fn(f"{prefix}.b2", self.b2),
        )


def silu(x: Var) -> Var:
    return ad.mul(x, ad.sigmoid(x))


def feed_forward(x: Var | Array, w: FeedForwardWeights) -> Var:
    """Shape-preserving position-wise feed-forward block."""
    x = as_var(x)
    w1, b1, w2, b2 = as_var(w.w1), as_var(w.b1), as_var(w.w2), as_var(w.b2)
    if x.shape[1] != w1.shape[0]:
        raise ShapeError(f"feed_forward input width {x.shape[1]} vs {w1.shape[0]}")
    hidden = silu(ad.add(ad.matmul(x, w1), b1))
    return ad.add(ad.matmul(hidden, w2), b2)
