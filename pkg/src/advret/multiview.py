"""Viewers, multi-view representations and counter-viewers for one (query, doc) pair."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import DivergedError

logger = logging.getLogger(__name__)


# --- K-Means -------------------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_trace: list[float]
    n_iter: int

    @property
    def inertia(self) -> float:
        return self.inertia_trace[-1]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    N = len(X)
    centers = [int(rng.integers(N))]
    closest = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, n):
        total = closest.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(N), centers)
            nxt = int(rng.choice(remaining)) if len(remaining) else int(rng.integers(N))
        else:
            nxt = int(rng.choice(N, p=closest / total))
        centers.append(nxt)
        closest = np.minimum(closest, _sq_dists(X, X[[nxt]])[:, 0])
    return X[centers].copy()


def kmeans(X: np.ndarray, n: int, seed: int, max_iter: int = 50, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding.

    An empty cluster takes over the point currently farthest from its centroid.
    Stops when assignments stop changing, the relative inertia drop falls
    below ``tol``, or after ``max_iter`` updates. ``labels`` are always the
    nearest-centroid assignment for the returned centroids.
    """
    X = np.asarray(X, dtype=np.float64)
    N = len(X)
    if N < n:
        raise ValueError("fewer candidates than viewers")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    C = kmeans_plusplus(X, n, rng)
    D = _sq_dists(X, C)
    labels = D.argmin(1)
    trace = [float(D[np.arange(N), labels].sum())]
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(n):
            members = labels == j
            if members.any():
                C[j] = X[members].mean(0)
        for j in range(n):
            if not (labels == j).any():
                far = int(D[np.arange(N), labels].argmax())
                C[j] = X[far]
                labels[far] = j
                D = _sq_dists(X, C)
        D = _sq_dists(X, C)
        new_labels = D.argmin(1)
        inertia = float(D[np.arange(N), new_labels].sum())
        trace.append(inertia)
        prev = trace[-2]
        stable = np.array_equal(new_labels, labels)
        labels = new_labels
        if stable or (prev > 0 and (prev - inertia) / prev < tol) or inertia == 0.0:
            break
    return KMeansResult(C, labels, trace, it)


def check_kmeans_invariants(X: np.ndarray, result: KMeansResult, rtol: float = 1e-12) -> None:
    """Assert monotone inertia and that every point sits with its nearest centroid."""
    tr = result.inertia_trace
    for a, b in zip(tr, tr[1:]):
        assert b <= a + rtol * max(abs(a), 1.0), f"inertia increased: {a} -> {b}"
    D = _sq_dists(np.asarray(X, dtype=np.float64), result.centroids)
    own = D[np.arange(len(X)), result.labels]
    assert np.all(own <= D.min(1) + 1e-12 * np.maximum(1.0, D.min(1))), "assignment is not a fixed point"


def derive_viewers(candidate_embeddings: np.ndarray, n: int, seed: int,
                   max_iter: int = 50, tol: float = 1e-6, check: bool = False) -> np.ndarray:
    res = kmeans(candidate_embeddings, n, seed, max_iter, tol)
    if check:
        check_kmeans_invariants(candidate_embeddings, res)
    return res.centroids


# --- view generator ------------------------------------------------------------


@dataclass
class ViewGenConfig:
    lam: float = 10.0
    n: int = 5
    epochs: int = 1
    learning_rate: float = 1e-6
    kmeans_iterations: int = 50
    distinct_views: bool = False
    activation: str = "relu"
    init_scale: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")


_COS_EPS = 1e-12


class ViewGenerator:
    """One dense layer ``w_i = act(A_doc w_d + A_view v_i + b)``.

    Initialised near the averaging map ``(w_d + v_i) / 2`` plus seeded noise.
    """

    def __init__(self, dim: int, seed: int = 0, activation: str = "relu", init_scale: float = 0.1):
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, init_scale / np.sqrt(2 * dim), size=(dim, 2 * dim))
        self.A = np.hstack([0.5 * np.eye(dim), 0.5 * np.eye(dim)]) + noise
        self.b = np.zeros(dim)
        self.activation = activation

    @classmethod
    def identity(cls, dim: int) -> "ViewGenerator":
        g = cls(dim, activation="linear", init_scale=0.0)
        g.A = np.hstack([np.eye(dim), np.zeros((dim, dim))])
        return g

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def pre(self, w_d: np.ndarray, V: np.ndarray) -> np.ndarray:
        return w_d @ self.A[:, :self.dim].T + V @ self.A[:, self.dim:].T + self.b

    def forward(self, w_d: np.ndarray, V: np.ndarray) -> np.ndarray:
        Z = self.pre(w_d, V)
        return np.maximum(Z, 0.0) if self.activation == "relu" else Z

    def act_grad(self, w_d: np.ndarray, V: np.ndarray) -> np.ndarray:
        Z = self.pre(w_d, V)
        return (Z > 0).astype(float) if self.activation == "relu" else np.ones_like(Z)

    def backward_doc(self, w_d: np.ndarray, V: np.ndarray, dW: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. ``w_d`` given upstream ``dW = dL/dW`` (n x dim)."""
        dZ = dW * self.act_grad(w_d, V)
        return dZ.sum(0) @ self.A[:, :self.dim]

    def backward_params(self, w_d: np.ndarray, V: np.ndarray, dW: np.ndarray):
        dZ = dW * self.act_grad(w_d, V)
        X = np.hstack([np.broadcast_to(w_d, V.shape), V])
        return dZ.T @ X, dZ.sum(0)


def _cos_matrix(W: np.ndarray):
    norms = np.sqrt((W * W).sum(1) + _COS_EPS)
    G = W @ W.T
    return G / np.outer(norms, norms), norms


def view_loss(W: np.ndarray, V: np.ndarray, w_d: np.ndarray, lam: float,
              distinct: bool = False) -> tuple[float, np.ndarray]:
    """Square loss plus ``lam`` times the pairwise-cosine term, and ``dL/dW``.

    The cosine term is ``-sum_{i != j} cos(w_i, w_j)``; ``distinct=True`` flips its sign.
    """
    n = len(W)
    sq = float(((W - V) ** 2).sum() + ((W - w_d) ** 2).sum())
    dW = 2.0 * (W - V) + 2.0 * (W - w_d)
    if n > 1 and lam:
        sign = 1.0 if distinct else -1.0
        Cm, norms = _cos_matrix(W)
        off = ~np.eye(n, dtype=bool)
        cos_term = sign * float(Cm[off].sum())
        # d/dw_i of sum_{i!=j} cos(w_i,w_j), each unordered pair counted twice
        M = np.where(off, 1.0, 0.0)
        unit_part = (M @ (W / norms[:, None])) / norms[:, None]
        radial = (Cm * M).sum(1)[:, None] * W / (norms ** 2)[:, None]
        dW = dW + lam * sign * 2.0 * (unit_part - radial)
        return sq + lam * cos_term, dW
    return sq, dW


def generate_views(w_d: np.ndarray, V: np.ndarray, config: ViewGenConfig,
                   generator: ViewGenerator | None = None) -> tuple[np.ndarray, ViewGenerator, list[float]]:
    """Train the generator by SGD on the view loss and return ``(W, generator, trace)``."""
    config.validate()
    gen = generator or ViewGenerator(len(w_d), config.seed, config.activation, config.init_scale)
    trace = []
    for _ in range(config.epochs):
        W = gen.forward(w_d, V)
        loss, dW = view_loss(W, V, w_d, config.lam, config.distinct_views)
        if not np.isfinite(loss):
            raise DivergedError("diverged")
        trace.append(loss)
        gA, gb = gen.backward_params(w_d, V, dW)
        gen.A -= config.learning_rate * gA
        gen.b -= config.learning_rate * gb
    return gen.forward(w_d, V), gen, trace


# --- counter-viewers -----------------------------------------------------------


def counter_viewers(current_vec: np.ndarray, doc_matrix: np.ndarray, excluded: Sequence[int],
                    n: int, tie_rank: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings of the ``n`` corpus documents with the largest dot product to
    ``current_vec``, skipping positions in ``excluded`` (the candidate set and
    the target itself). Returns ``(U, positions)``.
    """
    s = (doc_matrix * current_vec).sum(1)
    mask = np.ones(len(s), dtype=bool)
    mask[np.asarray(list(excluded), dtype=np.int64)] = False
    eligible = np.flatnonzero(mask)
    if len(eligible) < n:
        logger.warning("only %d eligible counter-viewers (wanted %d)", len(eligible), n)
    tie = tie_rank[eligible] if tie_rank is not None else eligible
    order = np.lexsort((tie, -s[eligible]))[:n]
    pos = eligible[order]
    return doc_matrix[pos].copy(), pos


@dataclass
class ViewBundle:
    V: np.ndarray
    W: np.ndarray
    U: np.ndarray
    w_d: np.ndarray
    generator: ViewGenerator | None = None
    counter_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n(self) -> int:
        return len(self.V)

    def validate(self) -> None:
        dim = len(self.w_d)
        if len(self.W) != len(self.V):
            raise ValueError("|W| must equal |V|")
        if len(self.U) > len(self.V):
            raise ValueError("|U| must not exceed n")
        for name in ("V", "W", "U"):
            arr = getattr(self, name)
            if arr.size and arr.shape[1] != dim:
                raise ValueError(f"{name} has wrong dimensionality")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")


def dump_bundle(bundle: ViewBundle, path: str | Path) -> None:
    dim = len(bundle.w_d)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{bundle.n} {dim}\n")
        for label, arr in (("V", bundle.V), ("W", bundle.W), ("U", bundle.U)):
            for i, row in enumerate(arr, 1):
                fh.write(f"{label}_{i}\t{','.join(repr(float(x)) for x in row)}\n")


def load_bundle(path: str | Path) -> ViewBundle:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        n, dim = int(header[0]), int(header[1])
        groups: dict[str, list[np.ndarray]] = {"V": [], "W": [], "U": []}
        for lineno, line in enumerate(fh, 2):
            label, _, vals = line.rstrip("\n").partition("\t")
            kind = label.split("_")[0]
            if kind not in groups or not vals:
                raise ValueError(f"{path}: line {lineno}: malformed bundle line")
            groups[kind].append(np.array([float(x) for x in vals.split(",")]))
    as_arr = {k: np.array(v).reshape(-1, dim) for k, v in groups.items()}
    if len(as_arr["V"]) != n:
        raise ValueError(f"{path}: header says n={n}, found {len(as_arr['V'])} viewers")
    return ViewBundle(as_arr["V"], as_arr["W"], as_arr["U"], np.zeros(dim))
