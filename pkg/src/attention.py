"""Attention primitives: self-attention, KV/QKV fusion with support images, cross-attention.

Token matrices are ``(L, C)``; a leading batch axis is accepted wherever the operation is
batch-independent. Gates are boolean key masks, ``False`` entries get exactly zero weight.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .errors import GateLengthError, SampleSizeError, ShapeMismatchError


class Attention(nn.Module):
    """Multi-head attention projections shared by every branch that uses them."""

    def __init__(
        self,
        query_dim: int,
        context_dim: int | None = None,
        heads: int = 4,
        dim_head: int = 16,
    ) -> None:
        super().__init__()
        inner_dim = heads * dim_head
        context_dim = context_dim or query_dim
        self.heads = heads
        self.dim_head = dim_head
        self.query_dim = query_dim
        self.context_dim = context_dim
        self.to_q = nn.Linear(query_dim, inner_dim, bias=False)
        self.to_k = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_v = nn.Linear(context_dim, inner_dim, bias=False)
        self.to_out = nn.Linear(inner_dim, query_dim)

    @property
    def scale(self) -> float:
        return self.dim_head**-0.5


@dataclass
class KVSet:
    """Keys and values of support tokens, with the support index each token came from."""

    keys: torch.Tensor
    values: torch.Tensor
    origin: torch.Tensor
    gate: torch.Tensor | None = None

    def __post_init__(self) -> None:
        length = self.keys.shape[0]
        if self.values.shape[0] != length or self.origin.shape[0] != length:
            raise ShapeMismatchError("keys, values and origin must share their token count")
        if self.gate is not None and self.gate.shape[0] != length:
            raise GateLengthError(f"gate has {self.gate.shape[0]} entries for {length} tokens")

    def __len__(self) -> int:
        return int(self.keys.shape[0])


def attention_probs(
    query: torch.Tensor,
    key: torch.Tensor,
    scale: float,
    gate: torch.Tensor | None = None,
) -> torch.Tensor:
    """Softmax(QKᵀ·scale) over the last axis; gated-out keys are set to -inf before the softmax."""
    scores = torch.matmul(query, key.transpose(-1, -2)) * scale
    if gate is not None:
        scores = scores.masked_fill(~gate, float("-inf"))
    return scores.softmax(dim=-1)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    return x.unflatten(-1, (heads, -1)).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    return x.transpose(-3, -2).flatten(-2)


def _check_width(x: torch.Tensor, expected: int, what: str) -> None:
    if x.shape[-1] != expected:
        raise ShapeMismatchError(f"{what} width {x.shape[-1]} does not match projection input {expected}")


def _attend(
    p: Attention,
    x: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    gate: torch.Tensor | None = None,
) -> torch.Tensor:
    q = _split_heads(p.to_q(x), p.heads)
    k = _split_heads(keys, p.heads)
    v = _split_heads(values, p.heads)
    probs = attention_probs(q, k, p.scale, gate)
    return p.to_out(_merge_heads(torch.matmul(probs, v)))


def project_kv(
    x: torch.Tensor, p: Attention, origin: int = 0, gate: torch.Tensor | None = None
) -> KVSet:
    _check_width(x, p.context_dim, "support")
    return KVSet(
        keys=p.to_k(x),
        values=p.to_v(x),
        origin=torch.full((x.shape[0],), origin, dtype=torch.long),
        gate=None if gate is None else gate.bool(),
    )


def self_attn(x: torch.Tensor, p: Attention) -> torch.Tensor:
    _check_width(x, p.query_dim, "feature")
    return _attend(p, x, p.to_k(x), p.to_v(x))


def attend_with_supports(x_q: torch.Tensor, kvs: Sequence[KVSet], p: Attention) -> torch.Tensor:
    """Query rows attend over [K_q, K_s1, …, K_sn] / [V_q, V_s1, …, V_sn]."""
    _check_width(x_q, p.query_dim, "query")
    keys = torch.cat([p.to_k(x_q), *(kv.keys for kv in kvs)], dim=0)
    values = torch.cat([p.to_v(x_q), *(kv.values for kv in kvs)], dim=0)
    gate = None
    if any(kv.gate is not None for kv in kvs):
        own = torch.ones(x_q.shape[0], dtype=torch.bool, device=x_q.device)
        gate = torch.cat(
            [own, *(kv.gate if kv.gate is not None else torch.ones(len(kv), dtype=torch.bool) for kv in kvs)]
        )
    return _attend(p, x_q, keys, values, gate)


def fusion_attn(
    x_q: torch.Tensor,
    supports: Sequence[torch.Tensor],
    p: Attention,
    gate: torch.Tensor | Sequence[torch.Tensor] | None = None,
) -> torch.Tensor:
    """KV fusion self-attention; reuses the self-attention weights for the support tokens."""
    gates = _split_gate(gate, supports)
    kvs = [project_kv(support, p, index, g) for index, (support, g) in enumerate(zip(supports, gates))]
    return attend_with_supports(x_q, kvs, p)


def qkv_fusion_attn(
    x_q: torch.Tensor,
    x_s: torch.Tensor | Sequence[torch.Tensor],
    p: Attention,
    gate: torch.Tensor | Sequence[torch.Tensor] | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Joint attention over concatenated query and support tokens.

    Rows are computed independently, so the query rows are exactly :func:`fusion_attn`.
    Support rows attend over the query keys plus every support's keys. With several supports
    the support output is stacked along a leading axis.
    """
    single = isinstance(x_s, torch.Tensor)
    supports = [x_s] if single else list(x_s)
    gates = _split_gate(gate, supports)
    kvs = [project_kv(support, p, index, g) for index, (support, g) in enumerate(zip(supports, gates))]
    query_out = attend_with_supports(x_q, kvs, p)

    keys = torch.cat([p.to_k(x_q), *(kv.keys for kv in kvs)], dim=0)
    values = torch.cat([p.to_v(x_q), *(kv.values for kv in kvs)], dim=0)
    joint_gate = None
    if any(g is not None for g in gates):
        joint_gate = torch.cat(
            [
                torch.ones(x_q.shape[0], dtype=torch.bool),
                *(kv.gate if kv.gate is not None else torch.ones(len(kv), dtype=torch.bool) for kv in kvs),
            ]
        )
    support_out = [_attend(p, support, keys, values, joint_gate) for support in supports]
    if single:
        return query_out, support_out[0]
    return query_out, torch.stack(support_out) if support_out else x_q.new_zeros((0, *x_q.shape))


def cross_attn(
    x: torch.Tensor,
    tokens: torch.Tensor,
    p: Attention,
    gate: torch.Tensor | None = None,
) -> torch.Tensor:
    """Queries from ``x``, keys and values from a token sequence."""
    _check_width(x, p.query_dim, "feature")
    _check_width(tokens, p.context_dim, "token")
    if gate is not None and gate.shape[-1] != tokens.shape[-2]:
        raise GateLengthError(f"gate has {gate.shape[-1]} entries for {tokens.shape[-2]} tokens")
    return _attend(p, x, p.to_k(tokens), p.to_v(tokens), None if gate is None else gate.bool())


def sample_support_kv(kvs: Sequence[KVSet], target_len: int, seed: int) -> KVSet:
    """Uniform sample without replacement of ``target_len`` pooled (key, value) pairs.

    Selected indices are kept in pool order, so sampling the whole pool is the identity.
    """
    total = sum(len(kv) for kv in kvs)
    if not 1 <= target_len <= total:
        raise SampleSizeError(f"cannot sample {target_len} tokens from a pool of {total}")
    keys = torch.cat([kv.keys for kv in kvs], dim=0)
    values = torch.cat([kv.values for kv in kvs], dim=0)
    origin = torch.cat([kv.origin for kv in kvs], dim=0)
    gate = None
    if any(kv.gate is not None for kv in kvs):
        gate = torch.cat(
            [kv.gate if kv.gate is not None else torch.ones(len(kv), dtype=torch.bool) for kv in kvs]
        )
    generator = torch.Generator().manual_seed(seed)
    index = torch.randperm(total, generator=generator)[:target_len].sort().values
    return KVSet(
        keys=keys.index_select(0, index),
        values=values.index_select(0, index),
        origin=origin.index_select(0, index),
        gate=None if gate is None else gate.index_select(0, index),
    )


def _split_gate(
    gate: torch.Tensor | Sequence[torch.Tensor] | None, supports: Sequence[torch.Tensor]
) -> list[torch.Tensor | None]:
    if gate is None:
        return [None] * len(supports)
    if isinstance(gate, torch.Tensor):
        lengths = [support.shape[0] for support in supports]
        if gate.shape[0] != sum(lengths):
            raise GateLengthError(f"gate has {gate.shape[0]} entries for {sum(lengths)} support tokens")
        return list(torch.split(gate, lengths))
    gates = list(gate)
    if len(gates) != len(supports):
        raise GateLengthError(f"got {len(gates)} gates for {len(supports)} supports")
    for g, support in zip(gates, supports):
        if g.shape[0] != support.shape[0]:
            raise GateLengthError(f"gate has {g.shape[0]} entries for {support.shape[0]} tokens")
    return gates
