"""Synthetic scenarios: random DAGs under a moral-degree cap, weights, errors.

Randomness comes from numpy's PCG64 generator; every function takes a seed
(or a Generator) and is deterministic given it.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import (
    Dag,
    Gaussian,
    LinearSemModel,
    StudentT,
    TruncatedGaussian,
    Uniform,
    moral_adjacency,
)

GAUSSIAN_EQUAL_VAR = "gaussian"
SUBGAUSSIAN_MIX = "subgaussian_mix"
STUDENT_T = "student_t"
ERROR_SPECS = (GAUSSIAN_EQUAL_VAR, SUBGAUSSIAN_MIX, STUDENT_T)

Q_STEP = 0.001


class DataFormatError(ValueError):
    """Malformed dataset file."""


@dataclass(frozen=True)
class ScenarioSpec:
    p: int
    d_M_cap: int
    n: int
    error_spec: str = GAUSSIAN_EQUAL_VAR
    weight_range: tuple[float, float] = (0.5, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.d_M_cap < 1:
            raise ValueError("d_M_cap must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.error_spec not in ERROR_SPECS:
            raise ValueError(f"unknown error_spec {self.error_spec!r}; choose from {ERROR_SPECS}")
        lo, hi = self.weight_range
        if not 0 < lo < hi:
            raise ValueError("weight_range must satisfy 0 < min < max")
        object.__setattr__(self, "weight_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_range"] = list(self.weight_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown ScenarioSpec keys: {sorted(unknown)}")
        d = dict(d)
        if "weight_range" in d:
            d["weight_range"] = tuple(d["weight_range"])
        return cls(**d)


@dataclass
class Dataset:
    x: np.ndarray
    column_names: list[str] = field(default_factory=list)
    provenance: ScenarioSpec | str = "external"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("dataset must be a non-empty n x p matrix")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("dataset contains non-finite entries")
        if not self.column_names:
            self.column_names = [f"X{j + 1}" for j in range(self.x.shape[1])]
        if len(self.column_names) != self.x.shape[1]:
            raise ValueError("column_names length does not match the data")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def initial_edge_probability(p: int, d_M_cap: int) -> float:
    return min(1.0, 3.0 * d_M_cap / p)


def _draw_adjacency(p: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Edges ``order[a] -> order[b]`` for ``a < b``, each kept with probability ``q``."""
    order = rng.permutation(p)
    draws = rng.random((p, p))
    keep = np.triu(draws < q, 1)
    adj = np.zeros((p, p), dtype=bool)
    adj[np.ix_(order, order)] = keep
    return adj


def generate_dag(p: int, d_M_cap: int, seed=None) -> Dag:
    """Erdos-Renyi DAG along a random order, redrawn until the moral degree fits.

    The first draw uses edge probability ``min(1, 3 d_M_cap / p)``; each
    rejected draw lowers it by 0.001 (floored at 0, which yields the empty
    graph, so the loop terminates).
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    rng = _rng(seed)
    q = initial_edge_probability(p, d_M_cap)
    while True:
        adj = _draw_adjacency(p, q, rng)
        if moral_adjacency(adj).sum(axis=1).max() <= d_M_cap:
            return Dag.from_adjacency(adj)
        q = max(0.0, round(q - Q_STEP, 12))


def assign_weights(dag: Dag, weight_range=(0.5, 1.0), seed=None, sigma2=None, error_law=()) -> LinearSemModel:
    """Uniform magnitudes in ``weight_range`` with equiprobable signs."""
    lo, hi = weight_range
    rng = _rng(seed)
    B = np.zeros((dag.p, dag.p))
    for j, k in sorted(dag.edges):
        mag = rng.uniform(lo, hi)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        B[k, j] = sign * mag
    if sigma2 is None:
        sigma2 = [law.variance for law in error_law] if error_law else np.ones(dag.p)
    return LinearSemModel(B, np.asarray(sigma2, dtype=float), tuple(error_law))


def error_laws(error_spec: str, p: int) -> tuple:
    """Per-node error distributions for a named scenario."""
    if error_spec == GAUSSIAN_EQUAL_VAR:
        return tuple(Gaussian(2.0) for _ in range(p))
    if error_spec == SUBGAUSSIAN_MIX:
        cycle = (Uniform(2.5), Gaussian(2.0), TruncatedGaussian(10.0, 2.5))
        return tuple(cycle[j % 3] for j in range(p))
    if error_spec == STUDENT_T:
        return tuple(StudentT(10.0) for _ in range(p))
    raise ValueError(f"unknown error_spec {error_spec!r}")


def sample(model: LinearSemModel, n: int, error_spec: str | None = None, seed=None) -> Dataset:
    """Draw ``n`` i.i.d. observations.

    Errors come from ``model.error_law`` unless ``error_spec`` names a scenario,
    in which case that scenario's laws replace them.
    """
    rng = _rng(seed)
    laws = error_laws(error_spec, model.p) if error_spec is not None else model.error_law
    eps = np.empty((n, model.p))
    for j, law in enumerate(laws):
        eps[:, j] = law.sample(rng, n)
    x = np.zeros((n, model.p))
    B = model.B
    for j in model.dag.topological_order():
        pa = np.flatnonzero(B[j])
        x[:, j] = eps[:, j]
        if pa.size:
            x[:, j] += x[:, pa] @ B[j, pa]
    return Dataset(x, provenance="model")


def make_scenario(spec: ScenarioSpec, data_seed=None) -> tuple[LinearSemModel, Dataset]:
    """Ground-truth model and dataset for a scenario; bit-identical per seed.

    ``data_seed`` overrides the stream used for the observations only, so
    several sample sizes can share one graph.
    """
    ss = np.random.SeedSequence(spec.seed)
    dag_seed, weight_seed, own_data_seed = (np.random.default_rng(s) for s in ss.spawn(3))
    if data_seed is None:
        data_seed = own_data_seed
    dag = generate_dag(spec.p, spec.d_M_cap, dag_seed)
    laws = error_laws(spec.error_spec, spec.p)
    model = assign_weights(dag, spec.weight_range, weight_seed, error_law=laws)
    data = sample(model, spec.n, seed=data_seed)
    data.provenance = spec
    return model, data


def sample_covariance(data) -> tuple[np.ndarray, int]:
    """Mean-centred covariance with the 1/n divisor, and the sample count."""
    x = np.asarray(getattr(data, "x", data), dtype=float)
    if x.ndim != 2:
        raise ValueError("data must be an n x p matrix")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 observations, got {n}")
    centered = x - x.mean(axis=0)
    s = centered.T @ centered / n
    return (s + s.T) / 2, n


# --------------------------------------------------------------------------
# CSV / JSON


def format_float(v: float) -> str:
    return f"{float(v):.17g}"


def dataset_to_csv(data: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(data.column_names)
    for row in data.x:
        w.writerow([format_float(v) for v in row])
    return buf.getvalue()


def write_dataset(data: Dataset, path) -> None:
    Path(path).write_text(dataset_to_csv(data), encoding="utf-8")


def parse_dataset(text: str, source: str = "<string>") -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataFormatError(f"{source}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataFormatError(f"{source}: duplicate column names in header")
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(
                f"{source}: line {lineno}: expected {len(header)} fields, found {len(row)}"
            )
        parsed = []
        for col, cell in zip(header, row):
            try:
                v = float(cell)
            except ValueError:
                raise DataFormatError(
                    f"{source}: line {lineno}, column {col!r}: non-numeric value {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise DataFormatError(f"{source}: line {lineno}, column {col!r}: non-finite value {cell!r}")
            parsed.append(v)
        values.append(parsed)
    if not values:
        raise DataFormatError(f"{source}: no observations")
    return Dataset(np.array(values, dtype=float), header, "external")


def read_dataset(path) -> Dataset:
    path = Path(path)
    return parse_dataset(path.read_text(encoding="utf-8"), str(path))


def scenario_to_json(spec: ScenarioSpec) -> str:
    return json.dumps(spec.to_dict(), indent=2, sort_keys=True)


def scenario_from_json(text: str) -> ScenarioSpec:
    return ScenarioSpec.from_dict(json.loads(text))


def column_names_for(p: int) -> Sequence[str]:
    return [f"X{j + 1}" for j in range(p)]
