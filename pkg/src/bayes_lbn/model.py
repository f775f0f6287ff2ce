"""Linear structural equation models, DAGs and exact covariance algebra.

Node identity is index based (0 .. p-1).  A weight matrix ``B`` follows the
convention ``B[j, k] = weight of the edge k -> j``, so that ``X = B X + eps``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, stats

# |x| below this is treated as a structural zero of an analytic precision matrix
ZERO_TOL = 1e-12
MAX_ENUMERATION_P = 12


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a covariance block is not numerically positive definite."""


class Dag:
    """Directed acyclic graph on nodes ``0 .. p-1``.

    ``edges`` holds ordered pairs ``(j, k)`` meaning ``j -> k``; the
    adjacency matrix has rows as parents and columns as children.
    """

    __slots__ = ("p", "edges", "_order")

    def __init__(self, p: int, edges: Iterable[tuple[int, int]] = ()):
        if p < 0:
            raise ValueError(f"node count must be non-negative, got {p}")
        edges = frozenset((int(j), int(k)) for j, k in edges)
        for j, k in edges:
            if j == k:
                raise ValueError(f"self-loop on node {j}")
            if not (0 <= j < p and 0 <= k < p):
                raise ValueError(f"edge ({j}, {k}) out of range for p={p}")
        self.p = p
        self.edges = edges
        self._order = _topological_sort(p, edges)

    @classmethod
    def from_adjacency(cls, adjacency) -> "Dag":
        a = np.asarray(adjacency, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("adjacency must be a square matrix")
        rows, cols = np.nonzero(a)
        return cls(a.shape[0], zip(rows.tolist(), cols.tolist()))

    @property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.p, self.p), dtype=bool)
        for j, k in self.edges:
            a[j, k] = True
        return a

    def parents(self, k: int) -> set[int]:
        return {j for j, c in self.edges if c == k}

    def children(self, j: int) -> set[int]:
        return {k for pa, k in self.edges if pa == j}

    def ancestors(self, k: int) -> set[int]:
        seen: set[int] = set()
        stack = list(self.parents(k))
        while stack:
            j = stack.pop()
            if j not in seen:
                seen.add(j)
                stack.extend(self.parents(j))
        return seen

    def descendants(self, j: int) -> set[int]:
        seen: set[int] = set()
        stack = list(self.children(j))
        while stack:
            k = stack.pop()
            if k not in seen:
                seen.add(k)
                stack.extend(self.children(k))
        return seen

    def topological_order(self) -> tuple[int, ...]:
        """Canonical ordering: among available sources, lowest index first."""
        return self._order

    def subgraph(self, nodes: Iterable[int]) -> "Dag":
        """Induced subgraph, relabelled to ``0 .. len(nodes)-1`` in sorted order."""
        nodes = sorted(nodes)
        pos = {v: i for i, v in enumerate(nodes)}
        return Dag(len(nodes), [(pos[j], pos[k]) for j, k in self.edges if j in pos and k in pos])

    def moral_graph(self) -> np.ndarray:
        """Symmetric boolean adjacency of the moralized (undirected) graph."""
        return moral_adjacency(self.adjacency)

    def moral_degree(self) -> int:
        if self.p == 0:
            return 0
        return int(self.moral_graph().sum(axis=1).max())

    def __eq__(self, other) -> bool:
        return isinstance(other, Dag) and self.p == other.p and self.edges == other.edges

    def __hash__(self) -> int:
        return hash((self.p, self.edges))

    def __repr__(self) -> str:
        return f"Dag(p={self.p}, edges={sorted(self.edges)})"


def moral_adjacency(a: np.ndarray) -> np.ndarray:
    """Moralize a boolean adjacency matrix (``a[j, k]`` means ``j -> k``)."""
    a = np.asarray(a, dtype=bool)
    ai = a.astype(np.int64)
    m = a | a.T | ((ai @ ai.T) > 0)
    np.fill_diagonal(m, False)
    return m


def _topological_sort(p: int, edges: frozenset) -> tuple[int, ...]:
    indeg = [0] * p
    children: list[list[int]] = [[] for _ in range(p)]
    for j, k in edges:
        indeg[k] += 1
        children[j].append(k)
    heap = [v for v in range(p) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for c in children[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, c)
    if len(order) != p:
        raise ValueError("graph contains a directed cycle")
    return tuple(order)


# --------------------------------------------------------------------------
# error laws


@dataclass(frozen=True)
class Gaussian:
    variance: float
    kind: str = field(default="gaussian", init=False)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.normal(0.0, np.sqrt(self.variance), size)


@dataclass(frozen=True)
class Uniform:
    half_width: float
    kind: str = field(default="uniform", init=False)

    @property
    def variance(self) -> float:
        return self.half_width**2 / 3.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(-self.half_width, self.half_width, size)


@dataclass(frozen=True)
class TruncatedGaussian:
    """Normal(0, parent_variance) conditioned on ``|x| < bound``."""

    parent_variance: float
    bound: float
    kind: str = field(default="truncated_gaussian", init=False)

    @property
    def variance(self) -> float:
        s = np.sqrt(self.parent_variance)
        a = self.bound / s
        return float(stats.truncnorm.var(-a, a, scale=s))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        s = np.sqrt(self.parent_variance)
        out = np.empty(size)
        filled = 0
        while filled < size:
            draw = rng.normal(0.0, s, 2 * (size - filled) + 16)
            draw = draw[np.abs(draw) < self.bound]
            take = min(size - filled, draw.size)
            out[filled:filled + take] = draw[:take]
            filled += take
        return out


@dataclass(frozen=True)
class StudentT:
    df: float
    kind: str = field(default="student_t", init=False)

    @property
    def variance(self) -> float:
        if self.df <= 2:
            raise ValueError("Student t variance is infinite for df <= 2")
        return self.df / (self.df - 2.0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.standard_t(self.df, size)


ErrorLaw = Gaussian | Uniform | TruncatedGaussian | StudentT

_LAW_TYPES = {cls.kind: cls for cls in (Gaussian, Uniform, TruncatedGaussian, StudentT)}


def law_to_dict(law: ErrorLaw) -> dict:
    d = {k: v for k, v in law.__dict__.items() if k != "kind"}
    return {"kind": law.kind, **d}


def law_from_dict(d: dict) -> ErrorLaw:
    d = dict(d)
    try:
        cls = _LAW_TYPES[d.pop("kind")]
    except KeyError as exc:
        raise ValueError(f"unknown error law {exc}") from None
    return cls(**d)


# --------------------------------------------------------------------------
# linear SEM


@dataclass(frozen=True, eq=False)
class LinearSemModel:
    """Linear SEM ``X = B X + eps`` with independent, mean-zero errors."""

    B: np.ndarray
    sigma2: np.ndarray
    error_law: tuple = ()

    def __post_init__(self):
        B = np.array(self.B, dtype=float)
        sigma2 = np.array(self.sigma2, dtype=float).reshape(-1)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ValueError("B must be square")
        if B.shape[0] != sigma2.size:
            raise ValueError("sigma2 length does not match B")
        if np.any(np.diag(B) != 0):
            raise ValueError("B must have a zero diagonal (no self-loops)")
        if not np.all(sigma2 > 0):
            raise ValueError("error variances must be strictly positive")
        laws = tuple(self.error_law) or tuple(Gaussian(float(v)) for v in sigma2)
        if len(laws) != sigma2.size:
            raise ValueError("one error law per node is required")
        law_var = np.array([law.variance for law in laws])
        if not np.allclose(law_var, sigma2, rtol=1e-9, atol=0):
            raise ValueError("error-law variances disagree with sigma2")
        B.setflags(write=False)
        sigma2.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "error_law", laws)
        # rejects cyclic support
        object.__setattr__(self, "_dag", Dag.from_adjacency(B.T != 0))

    @property
    def p(self) -> int:
        return self.sigma2.size

    @property
    def dag(self) -> Dag:
        return self._dag

    def weight(self, parent: int, child: int) -> float:
        return float(self.B[child, parent])

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "B": self.B.tolist(),
            "sigma2": self.sigma2.tolist(),
            "error_law": [law_to_dict(law) for law in self.error_law],
            "edges": sorted([list(e) for e in self.dag.edges]),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSemModel":
        laws = tuple(law_from_dict(x) for x in d.get("error_law", ()))
        return cls(np.asarray(d["B"], dtype=float), np.asarray(d["sigma2"], dtype=float), laws)


def chain_model(p: int, beta: float, sigma2: float = 1.0) -> LinearSemModel:
    """``X_{j+1} = beta X_j + eps_{j+1}`` with equal error variances."""
    B = np.zeros((p, p))
    for j in range(1, p):
        B[j, j - 1] = beta
    return LinearSemModel(B, np.full(p, float(sigma2)))


def star_model(p: int, beta: float, sigma2: float = 1.0) -> LinearSemModel:
    """Node 0 is the parent of every other node."""
    B = np.zeros((p, p))
    B[1:, 0] = beta
    return LinearSemModel(B, np.full(p, float(sigma2)))


# --------------------------------------------------------------------------
# covariance algebra


def spd_inverse(a: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky."""
    a = np.asarray(a, dtype=float)
    try:
        c, lower = linalg.cho_factor(a, lower=True, check_finite=True)
    except linalg.LinAlgError:
        eig = np.linalg.eigvalsh((a + a.T) / 2)
        raise SingularMatrixError(
            f"matrix is not positive definite (smallest eigenvalue {eig[0]:.3e}, "
            f"condition estimate {abs(eig[-1]) / max(abs(eig[0]), 1e-300):.3e})"
        ) from None
    inv = linalg.cho_solve((c, lower), np.eye(a.shape[0]))
    return (inv + inv.T) / 2


def precision_from_model(model: LinearSemModel) -> np.ndarray:
    """``(I - B)^T diag(1/sigma2) (I - B)``."""
    m = np.eye(model.p) - model.B
    omega = m.T @ (m / model.sigma2[:, None])
    return (omega + omega.T) / 2


def covariance_from_model(model: LinearSemModel) -> np.ndarray:
    """``(I - B)^{-1} diag(sigma2) (I - B)^{-T}``."""
    # I - B is a permuted triangular matrix, so the solve is exact up to rounding
    inv = linalg.solve(np.eye(model.p) - model.B, np.eye(model.p))
    sigma = (inv * model.sigma2) @ inv.T
    return (sigma + sigma.T) / 2


def precision_offdiag(model: LinearSemModel, j: int, k: int) -> float:
    """Entry ``Omega[k, j]`` written in terms of edge weights.

    Sum of the direct-edge terms in both directions and one term per common
    child of ``j`` and ``k``.
    """
    if j == k:
        raise ValueError("precision_offdiag needs j != k")
    B, s2 = model.B, model.sigma2
    value = -B[j, k] / s2[j] - B[k, j] / s2[k]
    common = model.dag.children(j) & model.dag.children(k)
    for ell in common:
        value += B[ell, k] * B[ell, j] / s2[ell]
    return float(value)


def precision_diagonal(model: LinearSemModel) -> np.ndarray:
    """``1/sigma_k^2 + sum over children l of beta_{k,l}^2 / sigma_l^2``."""
    return 1.0 / model.sigma2 + (model.B**2 / model.sigma2[:, None]).sum(axis=0)


def sub_precision(sigma, subset: Sequence[int]) -> np.ndarray:
    """Inverse of the covariance block on ``subset`` (not a block of Omega).

    ``sigma`` may be a covariance matrix or a :class:`LinearSemModel`.
    Rows/columns follow the order of ``subset``.
    """
    if isinstance(sigma, LinearSemModel):
        sigma = covariance_from_model(sigma)
    subset = list(subset)
    if not subset:
        raise ValueError("subset must be non-empty")
    block = np.asarray(sigma, dtype=float)[np.ix_(subset, subset)]
    return spd_inverse(block)


def support(omega: np.ndarray, tol: float = ZERO_TOL) -> np.ndarray:
    return np.abs(omega) >= tol


# --------------------------------------------------------------------------
# orderings


def is_valid_ordering(dag: Dag, pi: Sequence[int]) -> bool:
    pi = list(pi)
    if sorted(pi) != list(range(dag.p)):
        return False
    pos = {v: i for i, v in enumerate(pi)}
    return all(pos[j] < pos[k] for j, k in dag.edges)


def topological_orderings(dag: Dag) -> list[tuple[int, ...]]:
    """Every valid ordering, lexicographically sorted.  Refused for p > 12."""
    if dag.p > MAX_ENUMERATION_P:
        raise ValueError(f"ordering enumeration refused for p={dag.p} > {MAX_ENUMERATION_P}")
    parents = [dag.parents(k) for k in range(dag.p)]
    out: list[tuple[int, ...]] = []

    def extend(prefix: list[int], placed: set[int]):
        if len(prefix) == dag.p:
            out.append(tuple(prefix))
            return
        for v in range(dag.p):
            if v not in placed and parents[v] <= placed:
                prefix.append(v)
                placed.add(v)
                extend(prefix, placed)
                placed.remove(v)
                prefix.pop()

    extend([], set())
    return out
