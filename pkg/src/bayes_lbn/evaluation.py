"""Metrics, identifiability checks, theory quantities and the replication sweep."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bagus import BagusConfig
from .datagen import ERROR_SPECS, ScenarioSpec, make_scenario
from .learner import learn_structure
from .model import (
    ZERO_TOL,
    Dag,
    LinearSemModel,
    covariance_from_model,
    is_valid_ordering,
    sub_precision,
)

logger = logging.getLogger(__name__)

THEORY_MAX_P = 60


# --------------------------------------------------------------------------
# metrics


def _edge_set(g) -> tuple[int | None, frozenset]:
    if isinstance(g, Dag):
        return g.p, g.edges
    return None, frozenset(tuple(e) for e in g)


def hamming_distance(g1, g2) -> int:
    """Size of the symmetric difference of the directed edge sets."""
    p1, e1 = _edge_set(g1)
    p2, e2 = _edge_set(g2)
    if p1 is not None and p2 is not None and p1 != p2:
        raise ValueError(f"graphs have different node counts ({p1} vs {p2})")
    return len(e1 ^ e2)


def edge_confusion(truth, estimate) -> dict:
    _, t = _edge_set(truth)
    _, e = _edge_set(estimate)
    return {
        "true_positives": len(t & e),
        "false_positives": len(e - t),
        "false_negatives": len(t - e),
    }


def ordering_correct(dag: Dag, pi_hat: Sequence[int]) -> bool:
    """Each element, read from the back, is a sink of the graph left so far.

    Equivalent to ``pi_hat`` being a topological ordering of ``dag``.
    """
    return is_valid_ordering(dag, pi_hat)


# --------------------------------------------------------------------------
# identifiability


@dataclass
class IdentifiabilityReport:
    forward_ok: bool
    backward_ok: bool
    forward_margin: float | None
    backward_margin: float | None
    backward_margins: list[dict] = field(default_factory=list)
    forward_margins: list[dict] = field(default_factory=list)
    ordering: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return asdict(self)


def check_identifiability(model: LinearSemModel, ordering: Sequence[int] | None = None) -> IdentifiabilityReport:
    """Evaluate the forward and backward uncertainty-level conditions on the true covariance.

    Backward: within every leading set of the ordering, the last node has a
    strictly smaller precision diagonal than each of its ancestors.
    Forward: given the preceding nodes, each node has a strictly smaller
    conditional variance than each of its descendants.
    """
    dag = model.dag
    pi = tuple(ordering) if ordering is not None else dag.topological_order()
    if not is_valid_ordering(dag, pi):
        raise ValueError("ordering is not a topological ordering of the model's DAG")
    sigma = covariance_from_model(model)
    back = []
    for r in range(1, len(pi)):
        lead = list(pi[: r + 1])
        j = pi[r]
        inv = sub_precision(sigma, lead)
        jj = inv[r, r]
        for ell in sorted(dag.ancestors(j)):
            back.append({"step": r + 1, "node": j, "ancestor": ell, "margin": float(inv[lead.index(ell), lead.index(ell)] - jj)})
    fwd = []
    for r in range(len(pi)):
        j = pi[r]
        prev = list(pi[:r])
        cv_j = 1.0 / sub_precision(sigma, prev + [j])[-1, -1]
        for k in sorted(dag.descendants(j)):
            cv_k = 1.0 / sub_precision(sigma, prev + [k])[-1, -1]
            fwd.append({"step": r + 1, "node": j, "descendant": k, "margin": float(cv_k - cv_j)})
    bmin = min((b["margin"] for b in back), default=None)
    fmin = min((f["margin"] for f in fwd), default=None)
    return IdentifiabilityReport(
        forward_ok=fmin is None or fmin > 0,
        backward_ok=bmin is None or bmin > 0,
        forward_margin=fmin,
        backward_margin=bmin,
        backward_margins=back,
        forward_margins=fwd,
        ordering=pi,
    )


# --------------------------------------------------------------------------
# theory quantities


def _leading_precision(model: LinearSemModel, lead: Sequence[int]) -> np.ndarray:
    """Precision of an ancestrally closed node set, from the truncated SEM.

    Exact (no matrix inversion), so structural zeros are exact zeros.
    """
    idx = list(lead)
    Bs = model.B[np.ix_(idx, idx)]
    m = np.eye(len(idx)) - Bs
    return m.T @ (m / model.sigma2[idx][:, None])


def kronecker_restricted_norm(omega: np.ndarray, tol: float = ZERO_TOL) -> float:
    """max-row-abs-sum of ``(omega kron omega)`` restricted to the support of ``omega``.

    Row ``(i, j)`` sums ``|omega_ik| |omega_jl|`` over support pairs ``(k, l)``,
    which is ``(|omega| M |omega|)_ij`` with ``M`` the support indicator.
    """
    a = np.abs(omega)
    mask = a >= tol
    g = a @ mask.astype(float) @ a
    return float(g[mask].max())


@dataclass
class TheoryReport:
    p: int
    k1: float
    k2: float
    tau_min: float | None
    theta_min: float | None
    M_Sigma: float
    M_Gamma_max: float
    M_Gamma_min: float
    M_Gamma_by_step: list[float]
    d: int
    d_M: int
    forward_ok: bool
    backward_ok: bool
    ordering: tuple[int, ...]
    cancellations: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ordering"] = list(self.ordering)
        return d


def theory_report(model: LinearSemModel, ordering: Sequence[int] | None = None) -> TheoryReport:
    """Numerical values of the quantities entering the consistency conditions.

    Sub-models are the leading sets of the ordering of sizes ``p, p-1, .., 2``.
    """
    p = model.p
    if p > THEORY_MAX_P:
        raise ValueError(f"theory_report is limited to p <= {THEORY_MAX_P} (got {p})")
    dag = model.dag
    pi = tuple(ordering) if ordering is not None else dag.topological_order()
    if not is_valid_ordering(dag, pi):
        raise ValueError("ordering is not a topological ordering of the model's DAG")
    sigma = covariance_from_model(model)
    eig = np.linalg.eigvalsh(sigma)

    m_gamma = []
    theta = math.inf
    d = 1
    cancellations = []
    for size in range(p, 0, -1):
        lead = list(pi[:size])
        om = _leading_precision(model, lead)
        nz = np.abs(om) >= ZERO_TOL
        d = max(d, int(nz.sum(axis=0).max()))
        sub_dag = [(a, b) for a, b in dag.edges if a in lead and b in lead]
        pos = {v: i for i, v in enumerate(lead)}
        for a, b in sub_dag:
            theta = min(theta, abs(om[pos[b], pos[a]]))
        # moral-graph pairs of the sub-model whose entry vanishes by cancellation
        sub_moral = Dag(p, sub_dag).moral_graph()
        for a, b in itertools.combinations(lead, 2):
            if sub_moral[a, b] and not nz[pos[a], pos[b]]:
                cancellations.append({"size": size, "pair": [a, b]})
        if size >= 2 or p == 1:
            m_gamma.append(kronecker_restricted_norm(om))

    tau = math.inf
    for r in range(1, p):
        lead = list(pi[: r + 1])
        om = _leading_precision(model, lead)
        j = pi[r]
        for ell in dag.ancestors(j):
            tau = min(tau, om[lead.index(ell), lead.index(ell)] - om[r, r])

    ident = check_identifiability(model, pi)
    return TheoryReport(
        p=p,
        k1=float(eig[0]),
        k2=float(np.diag(sigma).max()),
        tau_min=None if math.isinf(tau) else float(tau),
        theta_min=None if math.isinf(theta) else float(theta),
        M_Sigma=float(np.abs(sigma).sum(axis=1).max()),
        M_Gamma_max=float(max(m_gamma)),
        M_Gamma_min=float(min(m_gamma)),
        M_Gamma_by_step=[float(v) for v in m_gamma],
        d=d,
        d_M=dag.moral_degree(),
        forward_ok=ident.forward_ok,
        backward_ok=ident.backward_ok,
        ordering=pi,
        cancellations=cancellations,
    )


def chain_star_closed_forms(kind: str, p: int, beta: float, sigma2: float) -> dict:
    """Closed-form operator-norm quantities for chain and star graphs.

    Chain: ``X_{j+1} = beta X_j + eps``; star: ``X_{j+1} = beta X_1 + eps``;
    every error variance equals ``sigma2``.
    """
    b = abs(beta)
    s4 = sigma2**2
    if kind == "chain":
        if b >= 1:
            raise ValueError("chain closed forms need |beta| < 1")
        return {
            "M_Gamma_max": (b**4 + 2 * b**3 + 4 * b**2 + 2 * b + 1) / s4,
            "M_Gamma_min": (b**4 + 2 * b**3 + 3 * b**2 + 2 * b + 1) / s4,
            "M_Sigma": (1 - b**p) * (1 - b ** (p + 1)) / ((1 - b) * (1 - b**2)) * sigma2,
            "M_Sigma_bound": sigma2 / ((1 - b) * (1 - b**2)),
            "k1_bound": sigma2 / (1 + b) ** 2,
            "tau_min_bound": b**2 / sigma2,
            "theta_min_bound": b / sigma2,
        }
    if kind == "star":
        m = p - 1
        return {
            "M_Gamma_max": (2 * m**2 * b**4 + 2 * m**2 * b**3 + 3 * m * b**2 + 2 * m * b + 1) / s4,
            "M_Gamma_min": (2 * b**4 + 2 * b**3 + 3 * b**2 + 2 * b + 1) / s4,
            "M_Sigma": max(m * b + 1, m * b**2 + b + 1) * sigma2,
            "M_Sigma_bound": None,
            "k1_bound": None,
            "tau_min_bound": None,
            "theta_min_bound": None,
        }
    raise ValueError(f"kind must be 'chain' or 'star', got {kind!r}")


# --------------------------------------------------------------------------
# hyper-parameter recommendation


@dataclass
class HyperparamRecommendation:
    config: BagusConfig | None
    constants: dict
    values: dict
    constraints: dict
    T_log_odds_interval: tuple[float, float] | None
    B0_window: tuple[float, float]

    @property
    def admissible(self) -> bool:
        return all(self.constraints.values())

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict() if self.config else None,
            "constants": self.constants,
            "values": self.values,
            "constraints": self.constraints,
            "admissible": self.admissible,
            "T_log_odds_interval": list(self.T_log_odds_interval) if self.T_log_odds_interval else None,
            "B0_window": list(self.B0_window),
        }


def recommend_hyperparams(report: TheoryReport, n: float, p: int, epsilon1: float) -> HyperparamRecommendation:
    """Construct hyper-parameters from model constants and check each constraint.

    Constraints that the construction meets with equality where a strict
    inequality is required (``1/nu0 > C4 n/p`` and the open ``T`` interval)
    are reported as satisfiable when a value arbitrarily close to the
    constructed one satisfies them.
    """
    if not epsilon1 > 0:
        raise ValueError("epsilon1 must be positive")
    k1, mg, mg_min, ms, d = report.k1, report.M_Gamma_max, report.M_Gamma_min, report.M_Sigma, report.d
    tau_min = report.tau_min if report.tau_min is not None else math.inf
    theta_min = report.theta_min if report.theta_min is not None else math.inf

    candidates = [
        1 / (6 * mg * ms),
        1 / (6 * mg**2 * ms**3),
        k1**2 / (4 * mg),
        tau_min / (4 * mg),
        d * theta_min / (2 * mg),
        k1**2 * p / (2 * epsilon1),
    ]
    C3 = 0.5 * min(candidates)
    C1 = C3 / 10
    C2 = d * theta_min / (2 * mg)
    C4 = C1 + ms**2 * 2 * (C1 + C3) * mg + 6 * (C1 + C3) ** 2 * mg**2 * ms**3

    nu1 = p * (1 + epsilon1) / (n * C3)
    nu0 = p / (n * C4)
    tau = n * C3 / (2 * p)
    eta = nu1**2 / (nu1**2 + nu0**2 * epsilon1)
    T = nu0 * eta / (nu1 * (1 - eta) + nu0 * eta)

    rhs_min = min(tau_min, 2 * theta_min * d, k1**2, 2 / (3 * ms), 2 / (3 * mg * ms**3)) / (4 * mg)
    exponent = 2 * (C2 - C3) * mg_min * (C4 - C3) * n / p**2
    eta_lhs = nu1**2 * (1 - eta) / (nu0**2 * eta)
    # theta_min margin left after the estimation error bound
    t_width = (theta_min - 2 * (C1 + C3) * mg / d) * (1 / nu0 - 1 / nu1)
    t_lo = math.log(nu0 * eta / (nu1 * (1 - eta)))
    b0_lo = 1 / k1 + 2 * (C1 + C3) * mg
    b0_hi = math.sqrt(2 * n * nu0)

    constraints = {
        "C2>C3>0": bool(C2 > C3 > 0),
        "C3*eps1<=k1^2*p/2": bool(C3 * epsilon1 <= k1**2 * p / 2),
        "C1+C3<min(...)/(4*M_Gamma_max)": bool(C1 + C3 < rhs_min),
        "1/nu1=C3/(1+eps1)*n/p": bool(math.isclose(1 / nu1, C3 / (1 + epsilon1) * n / p, rel_tol=1e-12)),
        "1/nu0>C4*n/p": bool(C4 > 0),
        "eta_bound": bool(eta_lhs <= epsilon1 * math.exp(min(exponent, 700.0)) * (1 + 1e-12)),
        "tau<=C3*n/(2p)": bool(tau <= C3 * n / (2 * p) * (1 + 1e-12)),
        "T_interval_nonempty": bool(t_width > 0),
        "B0_window_nonempty": bool(b0_lo < b0_hi),
        "nu1>nu0": bool(nu1 > nu0),
    }
    config = None
    try:
        config = BagusConfig(
            nu0=nu0,
            nu1=nu1,
            eta=eta,
            tau=tau,
            threshold_T=T,
            spectral_bound_B0=0.5 * (b0_lo + b0_hi) if b0_lo < b0_hi else None,
        )
    except ValueError as exc:
        constraints["config_constructible"] = False
        logger.info("recommended hyper-parameters are not a valid config: %s", exc)
    return HyperparamRecommendation(
        config=config,
        constants={"C1": C1, "C2": C2, "C3": C3, "C4": C4, "epsilon1": epsilon1},
        values={"nu0": nu0, "nu1": nu1, "tau": tau, "eta": eta, "T": T},
        constraints=constraints,
        T_log_odds_interval=(t_lo, t_lo + t_width) if t_width > 0 else None,
        B0_window=(b0_lo, b0_hi),
    )


# --------------------------------------------------------------------------
# replication sweep


@dataclass(frozen=True)
class SweepCell:
    p: int
    d_M: int
    n: int
    error_spec: str = "gaussian"


@dataclass
class ReplicationRow:
    p: int
    d_M: int
    n: int
    error_spec: str
    replication: int
    seed: int
    hamming: int | None
    ordering_ok: bool | None
    runtime_ms: float
    error: str | None = None


@dataclass
class CellSummary:
    cell: SweepCell
    replications: int
    completed: int
    failed: int
    mean_hamming: float
    sd_hamming: float
    ordering_ok_rate: float
    mean_runtime_ms: float

    @property
    def C(self) -> float:
        return self.cell.n / math.log(self.cell.p) if self.cell.p > 1 else math.inf


@dataclass
class SweepResult:
    rows: list[ReplicationRow]
    cells: list[CellSummary]
    master_seed: int
    replications: int

    def summary(self, p: int, d_M: int, n: int, error_spec: str = "gaussian") -> CellSummary:
        key = SweepCell(p, d_M, n, error_spec)
        for c in self.cells:
            if c.cell == key:
                return c
        raise KeyError(key)

    def hamming_values(self, cell: SweepCell) -> list[int | None]:
        return [
            r.hamming
            for r in self.rows
            if SweepCell(r.p, r.d_M, r.n, r.error_spec) == cell
        ]

    def raw_csv(self, include_runtime: bool = True) -> str:
        cols = ["p", "d_M", "n", "error_spec", "replication", "seed", "hamming", "ordering_ok"]
        if include_runtime:
            cols.append("runtime_ms")
        cols.append("error")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            d = asdict(r)
            d["ordering_ok"] = "" if r.ordering_ok is None else int(r.ordering_ok)
            d["hamming"] = "" if r.hamming is None else r.hamming
            d["runtime_ms"] = f"{r.runtime_ms:.3f}"
            d["error"] = r.error or ""
            w.writerow([d[c] for c in cols])
        return buf.getvalue()

    def aggregate_csv(self) -> str:
        cols = ["p", "d_M", "n", "error_spec", "C", "replications", "completed", "failed",
                "mean_hamming", "sd_hamming", "ordering_ok_rate"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for c in self.cells:
            w.writerow([
                c.cell.p, c.cell.d_M, c.cell.n, c.cell.error_spec, f"{c.C:.17g}",
                c.replications, c.completed, c.failed,
                f"{c.mean_hamming:.17g}", f"{c.sd_hamming:.17g}", f"{c.ordering_ok_rate:.17g}",
            ])
        return buf.getvalue()


def replication_seeds(master_seed: int, cell: SweepCell, replication: int) -> tuple[int, int]:
    """(graph seed, data seed) for one replication.

    The graph seed ignores ``n`` so every sample size of a (p, d_M, error)
    setting sees the same graphs; the data seed depends on ``n`` as well.
    """
    code = ERROR_SPECS.index(cell.error_spec)
    g = np.random.SeedSequence([master_seed, cell.p, cell.d_M, code, replication])
    graph_seed = int(g.generate_state(1, np.uint64)[0] >> np.uint64(1))
    dsq = np.random.SeedSequence([master_seed, cell.p, cell.d_M, code, replication, cell.n])
    data_seed = int(dsq.generate_state(1, np.uint64)[0] >> np.uint64(1))
    return graph_seed, data_seed


def run_replication(cell: SweepCell, replication: int, master_seed: int, config: BagusConfig | None) -> ReplicationRow:
    graph_seed, data_seed = replication_seeds(master_seed, cell, replication)
    start = time.perf_counter()
    try:
        spec = ScenarioSpec(p=cell.p, d_M_cap=cell.d_M, n=cell.n, error_spec=cell.error_spec, seed=graph_seed)
        model, data = make_scenario(spec, data_seed=data_seed)
        result = learn_structure(data, config)
        hamming = hamming_distance(model.dag, result.to_dag())
        ok = ordering_correct(model.dag, result.ordering_hat)
        err = None
    except Exception as exc:  # recorded per replication, excluded from aggregates
        hamming, ok, err = None, None, f"{type(exc).__name__}: {exc}"
    runtime = (time.perf_counter() - start) * 1000
    return ReplicationRow(cell.p, cell.d_M, cell.n, cell.error_spec, replication, graph_seed,
                          hamming, ok, runtime, err)


def _run_task(args):
    return run_replication(*args)


def aggregate(rows: Iterable[ReplicationRow], cells: Sequence[SweepCell], replications: int) -> list[CellSummary]:
    by_cell: dict[SweepCell, list[ReplicationRow]] = {c: [] for c in cells}
    for r in rows:
        by_cell[SweepCell(r.p, r.d_M, r.n, r.error_spec)].append(r)
    out = []
    for cell in cells:
        rs = by_cell[cell]
        good = [r for r in rs if r.error is None]
        h = np.array([r.hamming for r in good], dtype=float)
        out.append(CellSummary(
            cell=cell,
            replications=replications,
            completed=len(good),
            failed=len(rs) - len(good),
            mean_hamming=float(h.mean()) if h.size else math.nan,
            sd_hamming=float(h.std(ddof=1)) if h.size > 1 else 0.0,
            ordering_ok_rate=float(np.mean([r.ordering_ok for r in good])) if good else math.nan,
            mean_runtime_ms=float(np.mean([r.runtime_ms for r in rs])) if rs else math.nan,
        ))
    return out


def expand_grid(p: Sequence[int], d_M: Sequence[int], n: Sequence[int], error_spec: Sequence[str] = ("gaussian",)) -> list[SweepCell]:
    return [SweepCell(a, b, c, e) for a, b, e, c in itertools.product(p, d_M, error_spec, n)]


def run_sweep(
    cells: Sequence[SweepCell],
    replications: int,
    config: BagusConfig | None = None,
    parallelism: int = 1,
    master_seed: int = 0,
) -> SweepResult:
    """Simulate, learn and score every (cell, replication); deterministic per master seed."""
    cells = list(cells)
    if not cells:
        raise ValueError("sweep grid is empty")
    if replications < 1:
        raise ValueError("replications must be >= 1")
    tasks = [(cell, rep, master_seed, config) for cell in cells for rep in range(replications)]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            rows = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * parallelism))))
    else:
        rows = [_run_task(t) for t in tasks]
    for r in rows:
        if r.error:
            logger.warning("replication failed (p=%d d_M=%d n=%d rep=%d): %s", r.p, r.d_M, r.n, r.replication, r.error)
    return SweepResult(rows=rows, cells=aggregate(rows, cells, replications), master_seed=master_seed,
                       replications=replications)


def default_parallelism() -> int:
    env = os.environ.get("BAYES_LBN_THREADS")
    if env:
        return max(1, int(env))
    return 1
