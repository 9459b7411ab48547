"""Weighted-KNN pseudo-labelling and reliable-pair selection.

All functions are pure and operate on numpy arrays.  Candidate sets are the
``(n, C)`` boolean masks used by :mod:`pals.data`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ZERO_MASS = 1e-12
_CHUNK = 1024


@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray       # (n, K) int, most similar first
    similarities: np.ndarray  # (n, K) cosine similarities

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass
class PseudoState:
    pseudo_labels: np.ndarray
    posteriors: np.ndarray
    agreements: np.ndarray
    budget: int
    reliable_idx: np.ndarray
    reliable_labels: np.ndarray

    @property
    def n_selected(self) -> int:
        return int(self.reliable_idx.size)


def normalize_rows(z: np.ndarray) -> np.ndarray:
    """Unit-normalise rows; zero rows stay zero so their similarities are 0."""
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return np.divide(z, norms, out=np.zeros_like(z, dtype=float), where=norms > 0)


def _top_k_rows(sims: np.ndarray, k: int, row_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` columns per row by (similarity desc, column index asc)."""
    n_rows, n_cols = sims.shape
    part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(sims, part, axis=1).min(axis=1)
    # argpartition picks arbitrarily among values tied at the k-th place
    ambiguous = np.flatnonzero((sims >= kth[:, None]).sum(axis=1) > k)
    for r in ambiguous:
        part[r] = np.lexsort((np.arange(n_cols), -sims[r]))[:k]
    vals = np.take_along_axis(sims, part, axis=1)
    order = np.lexsort((part, -vals), axis=1)
    idx = np.take_along_axis(part, order, axis=1)
    return idx, np.take_along_axis(vals, order, axis=1)


def knn_search(bank: np.ndarray, k: int) -> NeighborList:
    """Exact cosine KNN of every row against all other rows of ``bank``."""
    bank = np.asarray(bank, dtype=float)
    n = bank.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= K < n, got K={k}, n={n}")
    unit = normalize_rows(bank)
    idx = np.empty((n, k), dtype=np.int64)
    sim = np.empty((n, k))
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        s = unit[start:stop] @ unit.T
        s[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        idx[start:stop], sim[start:stop] = _top_k_rows(s, k)
    return NeighborList(idx, sim)


def knn_query(bank: np.ndarray, queries: np.ndarray, k: int) -> NeighborList:
    """Cosine KNN of external ``queries`` against ``bank`` (no self-exclusion)."""
    bank = np.asarray(bank, dtype=float)
    if not 1 <= k <= bank.shape[0]:
        raise ValueError(f"need 1 <= K <= {bank.shape[0]}, got {k}")
    unit = normalize_rows(bank)
    q = normalize_rows(np.asarray(queries, dtype=float))
    idx = np.empty((q.shape[0], k), dtype=np.int64)
    sim = np.empty((q.shape[0], k))
    for start in range(0, q.shape[0], _CHUNK):
        stop = min(start + _CHUNK, q.shape[0])
        idx[start:stop], sim[start:stop] = _top_k_rows(q[start:stop] @ unit.T, k)
    return NeighborList(idx, sim)


def _vote(nbrs: NeighborList, member: np.ndarray) -> np.ndarray:
    # neighbours accumulated in rank order so the sums are reproducible
    scores = np.zeros((nbrs.indices.shape[0], member.shape[1]))
    for j in range(nbrs.k):
        scores += nbrs.similarities[:, j, None] * member[nbrs.indices[:, j]]
    return scores


def weighted_pseudo_labels(nbrs: NeighborList, candidates: np.ndarray) -> np.ndarray:
    """Similarity-weighted vote over the neighbours' candidate sets."""
    return np.argmax(_vote(nbrs, candidates), axis=1)


def knn_posteriors(nbrs: NeighborList, pseudo_labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Class posteriors from the neighbours' pseudo-labels.

    Rows whose total similarity mass is at most ``ZERO_MASS`` fall back to the
    uniform distribution.
    """
    onehot = np.eye(num_classes)[pseudo_labels]
    scores = _vote(nbrs, onehot)
    z = scores.sum(axis=1, keepdims=True)
    ok = z[:, 0] > ZERO_MASS
    post = np.full_like(scores, 1.0 / num_classes)
    post[ok] = scores[ok] / z[ok]
    return post


def class_budget(posteriors: np.ndarray, candidates: np.ndarray, delta: float) -> tuple[np.ndarray, int]:
    """Per-class agreement counts and the delta-quantile budget ``m``.

    The quantile is lower nearest-rank: element ``floor(delta * (C - 1))`` of
    the ascending counts, so ``delta=0`` gives the minimum.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    n, C = posteriors.shape
    top = np.argmax(posteriors, axis=1)
    agree = candidates[np.arange(n), top]
    a = np.bincount(top[agree], minlength=C)
    m = int(np.sort(a)[int(np.floor(delta * (C - 1)))])
    return a, m


def select_reliable(posteriors: np.ndarray, candidates: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Pick up to ``m`` top-posterior eligible samples per class, then dedupe.

    Returns ``(sample_indices, labels)`` sorted by sample index.  A sample
    chosen by several classes keeps the one with the largest posterior
    (lowest class on ties); classes losing samples this way are not refilled.
    """
    n, C = posteriors.shape
    if m <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    chosen = np.zeros((n, C), dtype=bool)
    order_idx = np.arange(n)
    for c in range(C):
        elig = np.flatnonzero(candidates[:, c])
        if elig.size == 0:
            continue
        rank = np.lexsort((order_idx[elig], -posteriors[elig, c]))
        chosen[elig[rank[:m]], c] = True
    picked = np.flatnonzero(chosen.any(axis=1))
    masked = np.where(chosen[picked], posteriors[picked], -np.inf)
    return picked, np.argmax(masked, axis=1)


def pseudo_label_step(features: np.ndarray, candidates: np.ndarray, k: int, delta: float) -> PseudoState:
    """Full pass: KNN, pseudo-labels, posteriors, budget, reliable pairs."""
    C = candidates.shape[1]
    nbrs = knn_search(features, k)
    yhat = weighted_pseudo_labels(nbrs, candidates)
    post = knn_posteriors(nbrs, yhat, C)
    a, m = class_budget(post, candidates, delta)
    idx, lab = select_reliable(post, candidates, m)
    return PseudoState(yhat, post, a, m, idx, lab)
