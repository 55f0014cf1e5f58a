"""Cross-attention relevance scoring between a text query and visual tokens.

Queries come from the text stream, keys from the visual stream; the
per-token relevance is the maximum attention weight any head at any
query position places on that token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Var
from .errors import InputError, ShapeError
from .layers import AttentionWeights, MapFn, Tensor, as_var

# Stabilizer in the relevance normalization p_i = r_i / (sum_j r_j + EPS_REL).
EPS_REL = 1e-8


@dataclass
class AttentionMap:
    """Per-head attention weights, shape (heads, query_len, token_count)."""

    weights: Array

    @property
    def heads(self) -> int:
        return self.weights.shape[0]

    @property
    def query_len(self) -> int:
        return self.weights.shape[1]

    @property
    def token_count(self) -> int:
        return self.weights.shape[2]

    def validate(self, atol: float = 1e-9) -> None:
        if np.any(self.weights < 0) or np.any(self.weights > 1):
            raise InputError("attention weights outside [0, 1]")
        sums = self.weights.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > atol):
            raise InputError("attention rows do not sum to 1")


@dataclass
class ScoringWeights:
    """Stacked cross-attention scoring layers.

    Depth 1 is the default; deeper stacks re-score after feeding the
    value-projected visual stream back as the next layer's key source.
    """

    layers: list[AttentionWeights]

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def heads(self) -> int:
        return self.layers[0].heads

    @classmethod
    def seeded(cls, d: int, heads: int, depth: int, rng: np.random.Generator) -> "ScoringWeights":
        return cls([AttentionWeights.seeded(d, heads, rng) for _ in range(depth)])

    @classmethod
    def identity(cls, d: int) -> "ScoringWeights":
        return cls([AttentionWeights.identity(d)])

    def named_tensors(self, prefix: str = "scoring") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_tensors(f"{prefix}.l{i}")

    def map_tensors(self, fn: MapFn, prefix: str = "scoring") -> "ScoringWeights":
        return ScoringWeights(
            [layer.map_tensors(f"{prefix}.l{i}", fn) for i, layer in enumerate(self.layers)]
        )


def score(x: Var | Array, q: Var | Array, w: ScoringWeights) -> tuple[AttentionMap, Var]:
    """Score visual tokens against the query.

    Returns the final layer's attention map and the relevance row vector
    r in [0, 1]^M, r_i = max over heads and query positions of the
    attention weight on token i.  Ties route the gradient to the first
    maximal (head-major, then query-position) slot.
    """
    x = as_var(x)
    q = as_var(q)
    m, d = x.shape
    l, dq = q.shape
    if m == 0 or l == 0:
        raise InputError("scoring requires nonempty visual and query streams")
    if dq != d:
        raise ShapeError(f"query dim {dq} does not match token dim {d}")

    x_cur = x
    attn_vars: list[Var] = []
    for depth_idx, layer in enumerate(w.layers):
        attn_vars = []
        values: list[Var] = []
        for h in range(layer.heads):
            wq, wk = as_var(layer.wq[h]), as_var(layer.wk[h])
            d_h = wq.shape[1]
            logits = ad.smul(
                ad.matmul(ad.matmul(q, wq), ad.transpose(ad.matmul(x_cur, wk))),
                1.0 / math.sqrt(d_h),
            )
            attn_vars.append(ad.softmax_rows(logits, 1.0))
            if depth_idx + 1 < w.depth:
                values.append(ad.matmul(x_cur, as_var(layer.wv[h])))
        if depth_idx + 1 < w.depth:
            merged = values[0] if len(values) == 1 else ad.hcat(values)
            x_cur = ad.matmul(merged, as_var(layer.wo))

    stacked = attn_vars[0] if len(attn_vars) == 1 else ad.vcat(attn_vars)
    relevance = ad.colmax(stacked)
    amap = AttentionMap(np.stack([a.value for a in attn_vars], axis=0))
    return amap, relevance


def normalize_relevance(r) -> tuple[Array, float]:
    """Normalized relevance p_i = r_i / (sum r + eps) and its entropy H(p).

    H uses the 0*log(0) := 0 convention; an all-zero r yields p = 0, H = 0.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise InputError("relevance values must be finite and nonnegative")
    p = r / (r.sum() + EPS_REL)
    positive = p > 0
    entropy = float(-(p[positive] * np.log(p[positive])).sum())
    return p, entropy
