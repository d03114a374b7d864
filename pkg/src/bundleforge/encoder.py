"""Hierarchical self-attention backbone shared by teacher and student.

The attention operator is deliberately bare: one key and one query projection
reused at every layer, no value projection, residual, normalisation or
feed-forward block::

    A = (H W_K) (H W_Q)^T / sqrt(d)
    H <- softmax(A) H
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import (
    ParamTable,
    ShapeError,
    Tensor,
    as_tensor,
    concat_rows,
    derive_seed,
    matmul,
    mean_rows,
    reshape,
    softmax_rows,
    stack_rows,
    take_rows,
    transpose,
    xavier_init,
)

FUSION_ROWS = ("content", "feedback", "bundle")


@dataclass
class AttentionStack:
    w_key: Tensor
    w_query: Tensor
    layers: int

    @classmethod
    def create(cls, params: ParamTable, prefix: str, d: int, layers: int, seed: int) -> "AttentionStack":
        wk = params.add(f"{prefix}.w_key", xavier_init(d, d, derive_seed(seed, f"{prefix}.w_key")))
        wq = params.add(f"{prefix}.w_query", xavier_init(d, d, derive_seed(seed, f"{prefix}.w_query")))
        return cls(wk, wq, layers)

    @property
    def d(self) -> int:
        return self.w_key.shape[0]


@dataclass
class FusionParams:
    w_content: Tensor | None
    w_feedback: Tensor | None
    item_embedding: Tensor | None


def self_attend(H: Tensor, stack: AttentionStack) -> Tensor:
    """Apply ``stack.layers`` rounds of the attention recurrence to ``(..., r, d)``."""
    if H.shape[-1] != stack.d:
        raise ShapeError(f"self_attend width {H.shape[-1]} != projection width {stack.d}")
    scale = 1.0 / math.sqrt(H.shape[-1])
    for _ in range(stack.layers):
        keys = matmul(H, stack.w_key)
        queries = matmul(H, stack.w_query)
        A = matmul(keys, transpose(queries)) * scale
        H = matmul(softmax_rows(A), H)
    return H


def content_feature(text, media, map_text: Tensor | None = None, map_media: Tensor | None = None) -> Tensor:
    """``average(t, m)``, optionally after per-modality linear maps."""
    t = as_tensor(text)
    m = as_tensor(media, like=t)
    if map_text is not None:
        t = matmul(t, map_text)
    if map_media is not None:
        m = matmul(m, map_media)
    if t.shape != m.shape:
        raise ShapeError(f"text {t.shape} and media {m.shape} differ; map them to a common width first")
    return (t + m) * 0.5


def fuse_items(content, feedback, params: FusionParams, rows: Sequence[str] = FUSION_ROWS) -> Tensor:
    """Stack the fusion rows for a block of items: ``(n, d_*) -> (n, len(rows), d)``."""
    parts = []
    for row in rows:
        if row == "content":
            parts.append(matmul(as_tensor(content), params.w_content))
        elif row == "feedback":
            parts.append(matmul(as_tensor(feedback), params.w_feedback))
        elif row == "bundle":
            parts.append(params.item_embedding)
        else:
            raise ValueError(f"unknown fusion row {row!r}")
    return stack_rows(parts)


def fuse_item(t_i, m_i, p_i, v_i, params: FusionParams, map_text=None, map_media=None) -> Tensor:
    """``F_i = concat(W_c c_i, W_p p_i, v_i)`` for one item, shape ``3 x d``."""
    def row(x):
        return x if isinstance(x, Tensor) else as_tensor(np.atleast_2d(x))

    c = content_feature(row(t_i), row(m_i), map_text, map_media)
    one = FusionParams(params.w_content, params.w_feedback, row(v_i))
    F = fuse_items(c, row(p_i), one)
    return reshape(F, F.shape[-2:])


def encode_item(F: Tensor, stack: AttentionStack) -> Tensor:
    """Attend over the fusion rows and average: ``(..., r, d) -> (..., 1, d)``."""
    return mean_rows(self_attend(F, stack))


def encode_items(F: Tensor, stack: AttentionStack) -> Tensor:
    """Batched :func:`encode_item` returning an ``n x d`` item matrix."""
    out = encode_item(F, stack)
    return reshape(out, (F.shape[0], F.shape[-1]))


def encode_bundle(item_reprs, stack: AttentionStack) -> Tensor:
    """``e_b`` for one partial bundle from its ``1 x d`` item representations."""
    if isinstance(item_reprs, Tensor):
        E = item_reprs
    else:
        if not item_reprs:
            raise ValueError("cannot encode an empty bundle")
        E = concat_rows(list(item_reprs))
    if E.shape[-2] == 0:
        raise ValueError("cannot encode an empty bundle")
    return mean_rows(self_attend(E, stack))


def encode_bundles(item_matrix: Tensor, queries: Sequence[Sequence[int]], stack: AttentionStack) -> Tensor:
    """``e_b`` for many partial bundles at once, ``B x d`` in input order.

    Queries of equal length are attended together as one ``g x r x d`` block,
    so no padding or masking is involved.
    """
    if any(len(q) == 0 for q in queries):
        raise ValueError("cannot encode an empty bundle")
    by_len: dict[int, list[int]] = {}
    for pos, q in enumerate(queries):
        by_len.setdefault(len(q), []).append(pos)
    blocks, order = [], []
    d = item_matrix.shape[-1]
    for r in sorted(by_len):
        positions = by_len[r]
        idx = np.asarray([queries[p] for p in positions], dtype=np.int64)
        E = take_rows(item_matrix, idx)
        e = encode_bundle(E, stack)
        blocks.append(reshape(e, (len(positions), d)))
        order.extend(positions)
    out = blocks[0] if len(blocks) == 1 else concat_rows(blocks)
    if order == sorted(order):
        return out
    inverse = np.empty(len(order), dtype=np.int64)
    inverse[np.asarray(order)] = np.arange(len(order))
    return take_rows(out, inverse)


def score_all(e_b: Tensor, item_matrix: Tensor) -> Tensor:
    """Inner-product logits of every item: ``(B x d) . (n x d)^T``."""
    if e_b.shape[-1] != item_matrix.shape[-1]:
        raise ShapeError(f"score_all width mismatch: {e_b.shape} vs {item_matrix.shape}")
    return matmul(e_b, transpose(item_matrix))
