"""Attentional aggregation over a k-nearest-neighbour keypoint graph.

Forward pass and hand-written backward pass of one residual node update::

    alpha_ij = softmax_j(q_i . k_j),  m_i = sum_j alpha_ij v_j
    x_i' = x_i + W2 tanh(W1 m_i + b1) + b2

with ``q = Wq x``, ``k = Wk x`` and ``v = Wv x``. Logits are not scaled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyNeighborhood, ShapeMismatch, TooFewPoints

PARAM_NAMES = ("Wq", "Wk", "Wv", "W1", "b1", "W2", "b2")


def knn_graph(points, k):
    """Indices of the k nearest other points for each point; ties by lower index."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if k < 1 or n <= k:
        raise TooFewPoints(f"need more than k={k} points, got {n}")
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


@dataclass
class AttentionParams:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def dim(self):
        return self.Wq.shape[0]

    @classmethod
    def random(cls, dim, rng, scale=None):
        s = scale if scale is not None else 1.0 / np.sqrt(dim)
        mats = {n: rng.standard_normal((dim, dim)) * s for n in ("Wq", "Wk", "Wv", "W1", "W2")}
        return cls(b1=rng.standard_normal(dim) * s, b2=rng.standard_normal(dim) * s, **mats)

    def as_dict(self):
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def check(self):
        d = self.dim
        for n in PARAM_NAMES:
            a = getattr(self, n)
            want = (d,) if n.startswith("b") else (d, d)
            if a.shape != want:
                raise ShapeMismatch(f"{n} has shape {a.shape}, expected {want}")
            if not np.all(np.isfinite(a)):
                raise ShapeMismatch(f"{n} has non-finite entries")


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check(features, params, neighbors):
    X = np.asarray(features, dtype=float)
    nbr = np.asarray(neighbors, dtype=int)
    params.check()
    if X.ndim != 2 or X.shape[1] != params.dim:
        raise ShapeMismatch(f"features must be (N, {params.dim}), got {X.shape}")
    if nbr.ndim != 2 or nbr.shape[0] != X.shape[0]:
        raise ShapeMismatch("neighbor lists must be (N, k)")
    if nbr.shape[1] == 0:
        raise EmptyNeighborhood("neighbor lists are empty")
    return X, nbr


def attention_weights(features, params, neighbors):
    X, nbr = _check(features, params, neighbors)
    Q, K = X @ params.Wq.T, X @ params.Wk.T
    return _softmax(np.einsum("id,ikd->ik", Q, K[nbr]))


def attention_message(i, features, params, neighbors):
    """Message for node ``i`` given its neighbor list ``neighbors[i]``."""
    X = np.asarray(features, dtype=float)
    nb = np.asarray(neighbors[i], dtype=int)
    if nb.size == 0:
        raise EmptyNeighborhood(f"node {i} has no neighbors")
    q = params.Wq @ X[i]
    keys = X[nb] @ params.Wk.T
    vals = X[nb] @ params.Wv.T
    alpha = _softmax(keys @ q)
    return alpha @ vals


def node_update(features, params, neighbors, return_cache=False):
    X, nbr = _check(features, params, neighbors)
    Q, K, V = X @ params.Wq.T, X @ params.Wk.T, X @ params.Wv.T
    alpha = _softmax(np.einsum("id,ikd->ik", Q, K[nbr]))
    m = np.einsum("ik,ikd->id", alpha, V[nbr])
    h = np.tanh(m @ params.W1.T + params.b1)
    out = X + h @ params.W2.T + params.b2
    if return_cache:
        return out, dict(X=X, nbr=nbr, Q=Q, K=K, V=V, alpha=alpha, m=m, h=h)
    return out


def node_update_backward(grad_out, params, cache):
    """Gradients of a scalar loss given ``grad_out = dL/d(output)``.

    Returns ``(grad_features, {param name: grad})``.
    """
    G = np.asarray(grad_out, dtype=float)
    X, nbr, Q, K, V = cache["X"], cache["nbr"], cache["Q"], cache["K"], cache["V"]
    alpha, m, h = cache["alpha"], cache["m"], cache["h"]
    n, d = X.shape
    grads = {"W2": G.T @ h, "b2": G.sum(axis=0)}
    dz = (G @ params.W2) * (1.0 - h**2)
    grads["W1"] = dz.T @ m
    grads["b1"] = dz.sum(axis=0)
    dm = dz @ params.W1

    Vn, Kn = V[nbr], K[nbr]
    dalpha = np.einsum("id,ikd->ik", dm, Vn)
    dlogit = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    dV = np.zeros_like(V)
    np.add.at(dV, nbr, alpha[:, :, None] * dm[:, None, :])
    dQ = np.einsum("ik,ikd->id", dlogit, Kn)
    dK = np.zeros_like(K)
    np.add.at(dK, nbr, dlogit[:, :, None] * Q[:, None, :])

    grads["Wq"] = dQ.T @ X
    grads["Wk"] = dK.T @ X
    grads["Wv"] = dV.T @ X
    dX = G + dQ @ params.Wq + dK @ params.Wk + dV @ params.Wv
    return dX, grads
