"""Oracle evaluation passes and the graph-smoothing diagnostic."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..encoder import ModelParams
from ..graphgen import ClientDataset, Graph, PropagationMatrix, connectivity_index
from ..numkit import PROB_EPS, softmax_rows


def _matrix(a_tilde) -> np.ndarray | None:
    if a_tilde is None:
        return None
    if isinstance(a_tilde, PropagationMatrix):
        return a_tilde.matrix
    return np.asarray(a_tilde, dtype=np.float64)


def row_logits(params: ModelParams, a_tilde, dataset: ClientDataset) -> np.ndarray:
    """Logits for every stacked row.

    A row of client k scores a_kk h(x) + sum_{j != k} a_kj hbar_j, with
    hbar_j the exact mean hidden vector of client j.  ``a_tilde=None``
    means no propagation (plain MLP).
    """
    st = dataset.stacked
    h = np.maximum(st.features @ params.w1, 0.0) @ params.w2
    a = _matrix(a_tilde)
    if a is None:
        return h
    n = dataset.n_clients
    if a.shape != (n, n):
        raise ValueError(f"propagation matrix is {a.shape}, dataset has {n} clients")
    counts = np.diff(st.offsets)
    means = np.zeros((n, h.shape[1]))
    nz = counts > 0
    means[nz] = np.add.reduceat(h, st.offsets[:-1][nz], axis=0) / counts[nz, None]
    diag = np.diag(a).copy()
    ctx = a @ means - diag[:, None] * means
    return diag[st.owner, None] * h + ctx[st.owner]


def score(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Mean cross-entropy and argmax accuracy (ties go to the lower class)."""
    if len(logits) == 0:
        raise ValueError("cannot score an empty split")
    prob = softmax_rows(logits)
    loss = float(-np.sum(labels * np.log(np.maximum(prob, PROB_EPS))) / len(labels))
    acc = float(np.mean(np.argmax(prob, axis=1) == np.argmax(labels, axis=1)))
    return loss, acc


def evaluate_splits(
    params: ModelParams, a_tilde, dataset: ClientDataset, splits: Sequence[int]
) -> dict[int, tuple[float, float]]:
    """Score several splits from one forward pass; empty splits give NaN."""
    logits = row_logits(params, a_tilde, dataset)
    st = dataset.stacked
    out = {}
    for s in splits:
        mask = st.splits == s
        out[s] = score(logits[mask], st.labels[mask]) if mask.any() else (np.nan, np.nan)
    return out


def evaluate(params: ModelParams, a_tilde, dataset: ClientDataset, split: int) -> tuple[float, float]:
    st = dataset.stacked
    mask = st.splits == split
    if not mask.any():
        raise ValueError(f"split {split} has no rows")
    return score(row_logits(params, a_tilde, dataset)[mask], st.labels[mask])


@dataclass(frozen=True)
class HeterogeneityReport:
    kappa_sq: float
    lhs: float
    bound: float
    index: float
    n: int

    @property
    def scaled_bound(self) -> float:
        """N * bound, which sum_k |g_k - gbar|^2 can never exceed."""
        return self.bound * self.n

    @property
    def holds(self) -> bool:
        return self.lhs <= self.bound + 1e-9


def empirical_heterogeneity(per_client_gradients, graph: Graph) -> HeterogeneityReport:
    """kappa^2 over edges, the dispersion sum_k |g_k - gbar|^2 and kappa^2 lambda_max(B_N L^+)."""
    g = np.asarray(per_client_gradients, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    if len(g) != graph.n:
        raise ValueError(f"{len(g)} gradients for a graph with {graph.n} clients")
    if not graph.is_connected():
        raise ValueError("heterogeneity bound needs a connected client graph")
    kappa_sq = 0.0
    for i, j in graph.edges:
        d = g[i] - g[j]
        kappa_sq += float(d @ d)
    dev = g - g.mean(axis=0)
    lhs = float(np.sum(dev * dev))
    index = connectivity_index(graph)
    return HeterogeneityReport(kappa_sq, lhs, kappa_sq * index, index, graph.n)
