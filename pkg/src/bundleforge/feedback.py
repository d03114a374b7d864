"""Item-level user-feedback features from LightGCN trained with BPR."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .corpus import InteractionMatrix, load_features, save_features
from .numerics import AdamState, ParamTable, SplitMix64, adam_step, derive_seed, xavier_init

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    n_users: int
    n_items: int
    adj: sp.csr_matrix  # (m + n) x (m + n), users first

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items


@dataclass(frozen=True, eq=False)
class FeedbackTable:
    features: np.ndarray

    def __post_init__(self):
        self.features.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def save(self, path) -> None:
        save_features(path, self.features)

    @classmethod
    def load(cls, path) -> "FeedbackTable":
        return cls(np.array(load_features(path), dtype=np.float32))


def build_graph(D: InteractionMatrix) -> BipartiteGraph:
    """Symmetric normalised adjacency ``D^-1/2 A D^-1/2`` of the user-item graph."""
    m, n = D.n_users, D.n_items
    R = D.to_csr()
    R.data[:] = 1.0
    du = np.asarray(R.sum(axis=1)).ravel()
    di = np.asarray(R.sum(axis=0)).ravel()
    inv_u = np.where(du > 0, 1.0 / np.sqrt(np.maximum(du, 1)), 0.0)
    inv_i = np.where(di > 0, 1.0 / np.sqrt(np.maximum(di, 1)), 0.0)
    norm = sp.diags(inv_u) @ R @ sp.diags(inv_i)
    adj = sp.bmat([[None, norm], [norm.T, None]], format="csr", dtype=np.float64)
    if adj.shape != (m + n, m + n):
        adj.resize((m + n, m + n))
    adj.sort_indices()
    return BipartiteGraph(m, n, adj)


def propagate(E0: np.ndarray, graph: BipartiteGraph, K: int = 2) -> np.ndarray:
    """Mean of ``E^(0..K)`` with ``E^(k+1) = A_norm E^(k)``."""
    if K < 0:
        raise ValueError("K must be >= 0")
    acc = np.array(E0, dtype=np.float64)
    layer = acc
    for _ in range(K):
        layer = graph.adj @ layer
        acc = acc + layer
    return acc / (K + 1)


def _sample_negatives(users, n_items, positives: np.ndarray, rng: SplitMix64, max_rounds: int = 50):
    neg = rng.integers(n_items, len(users))
    for _ in range(max_rounds):
        bad = np.isin(users * n_items + neg, positives)
        if not bad.any():
            break
        neg[bad] = rng.integers(n_items, int(bad.sum()))
    return neg


def bpr_loss_and_grad(E: np.ndarray, u, i, j, E0: np.ndarray, reg: float):
    """BPR loss on propagated rows plus L2 on the ego rows, and its gradients.

    Returns ``(loss, grad_E, grad_E0_reg)``; the caller maps ``grad_E`` back
    through the (symmetric) propagation operator.
    """
    B = len(u)
    eu, ei, ej = E[u], E[i], E[j]
    x = (eu * ei).sum(1) - (eu * ej).sum(1)
    loss = float(np.logaddexp(0.0, -x).mean())
    reg_term = 0.5 * (np.square(E0[u]).sum() + np.square(E0[i]).sum() + np.square(E0[j]).sum()) / B
    loss += reg * float(reg_term)
    dx = -0.5 * (1.0 - np.tanh(0.5 * x)) / B  # d softplus(-x) / dx = -sigmoid(-x)
    gE = np.zeros_like(E)
    np.add.at(gE, u, dx[:, None] * (ei - ej))
    np.add.at(gE, i, dx[:, None] * eu)
    np.add.at(gE, j, -dx[:, None] * eu)
    g0 = np.zeros_like(E0)
    for idx in (u, i, j):
        np.add.at(g0, idx, reg * E0[idx] / B)
    return loss, gE, g0


def train_feedback(
    D: InteractionMatrix,
    d: int = 64,
    K: int = 2,
    epochs: int = 30,
    lr: float = 0.01,
    neg_per_pos: int = 1,
    seed: int = 0,
    batch_size: int = 2048,
    reg: float = 1e-4,
) -> FeedbackTable:
    if D.nnz == 0:
        raise ValueError("train_feedback needs at least one interaction")
    graph = build_graph(D)
    m, n = D.n_users, D.n_items
    params = ParamTable()
    E0 = params.add("ego", xavier_init(m + n, d, derive_seed(seed, "ego")))
    E0.data = E0.data.astype(np.float64)
    adam = AdamState(lr=lr)
    positives = np.unique(D.users * n + D.items)
    rng = SplitMix64(derive_seed(seed, "bpr"))
    users = np.repeat(D.users, neg_per_pos)
    items = np.repeat(D.items, neg_per_pos)

    for epoch in range(epochs):
        order = rng.permutation(len(users))
        u_all, i_all = users[order], items[order]
        j_all = _sample_negatives(u_all, n, positives, rng)
        total = 0.0
        for start in range(0, len(u_all), batch_size):
            u = u_all[start:start + batch_size]
            i = i_all[start:start + batch_size] + m
            j = j_all[start:start + batch_size] + m
            E = propagate(E0.data, graph, K)
            loss, gE, g0 = bpr_loss_and_grad(E, u, i, j, E0.data, reg)
            E0.grad = propagate(gE, graph, K) + g0
            adam_step(params, adam)
            total += loss * len(u)
        log.debug("feedback epoch %d bpr %.5f", epoch, total / len(u_all))

    final = propagate(E0.data, graph, K)
    return FeedbackTable(final[m:].astype(np.float32))
