"""Temporal re-encoding of the kept token sequence.

Kept tokens receive their absolute-time encodings once, then pass
through a stack of pre-norm residual blocks (RMSNorm -> self-attention
-> add; RMSNorm -> feed-forward -> add).  Depth 0 is the re-encoding
ablation and is an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ShapeError
from .layers import (
    AttentionWeights,
    FeedForwardWeights,
    MapFn,
    Tensor,
    as_var,
    feed_forward,
    multi_head_attention,
    rmsnorm,
    time_encode,
)


@dataclass
class ReencoderBlock:
    gain_attn: Tensor
    gain_ffn: Tensor
    attn: AttentionWeights
    ffn: FeedForwardWeights

    @classmethod
    def seeded(cls, d: int, heads: int, rng: np.random.Generator) -> "ReencoderBlock":
        return cls(
            gain_attn=np.ones((1, d)),
            gain_ffn=np.ones((1, d)),
            attn=AttentionWeights.seeded(d, heads, rng),
            ffn=FeedForwardWeights.seeded(d, rng),
        )

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gain_attn", self.gain_attn
        yield f"{prefix}.gain_ffn", self.gain_ffn
        yield from self.attn.named_tensors(f"{prefix}.attn")
        yield from self.ffn.named_tensors(f"{prefix}.ffn")

    def map_tensors(self, prefix: str, fn: MapFn) -> "ReencoderBlock":
        return ReencoderBlock(
            gain_attn=fn(f"{prefix}.gain_attn", self.gain_attn),
            gain_ffn=fn(f"{prefix}.gain_ffn", self.gain_ffn),
            attn=self.attn.map_tensors(f"{prefix}.attn", fn),
            ffn=self.ffn.map_tensors(f"{prefix}.ffn", fn),
        )


@dataclass
class ReencoderStack:
    """Residual re-encoding blocks; an empty stack disables re-encoding."""

    blocks: list[ReencoderBlock]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @classmethod
    def seeded(cls, d: int, heads: int, depth: int, rng: np.random.Generator) -> "ReencoderStack":
        return cls([ReencoderBlock.seeded(d, heads, rng) for _ in range(depth)])

    def named_tensors(self, prefix: str = "reencoder") -> Iterator[tuple[str, Tensor]]:
        for i, block in enumerate(self.blocks):
            yield from block.named_tensors(f"{prefix}.b{i}")

    def map_tensors(self, fn: MapFn, prefix: str = "reencoder") -> "ReencoderStack":
        return ReencoderStack(
            [b.map_tensors(f"{prefix}.b{i}", fn) for i, b in enumerate(self.blocks)]
        )


def reencode(
    z: Var | ad.Array,
    timestamps,
    stack: ReencoderStack,
    add_time: bool = True,
) -> Var:
    """Re-encode kept tokens, preserving shape and row order.

    Time encodings of the tokens' original absolute timestamps are added
    once before the first block.  ``add_time=False`` drops the
    positional term (used by permutation-equivariance checks).
    """
    z = as_var(z)
    if stack.depth == 0:
        return z
    n, d = z.shape
    ts = np.asarray(timestamps, dtype=np.float64).ravel()
    if ts.size != n:
        raise ShapeError(f"{ts.size} timestamps for {n} kept tokens")
    if add_time:
        z = ad.add(z, ad.const(time_encode(ts, d)))
    for block in stack.blocks:
        normed = rmsnorm(z, block.gain_attn)
        attn_out, _ = multi_head_attention(normed, normed, block.attn)
        z = ad.add(z, attn_out)
        normed = rmsnorm(z, block.gain_ffn)
        z = ad.add(z, feed_forward(normed, block.ffn))
    return z
