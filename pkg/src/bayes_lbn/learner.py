"""Backward ordering and parent recovery by repeated precision MAP fits.

At each step the remaining variables' sample covariance is refit, the node
with the smallest estimated precision diagonal is taken as the next-to-last
element of the ordering, and its parents are the remaining nodes whose slab
inclusion probability with it reaches the threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bagus import BagusConfig, fit_map
from .datagen import sample_covariance
from .model import Dag

logger = logging.getLogger(__name__)

DEFAULT_GAP_TOL = 1e-6


@dataclass
class StepDiagnostic:
    step: int
    chosen: int
    remaining: list[int]
    diagonal: list[float]
    gap: float
    near_tie: bool
    chosen_inclusion: dict[int, float]
    parents: list[int]
    converged: bool
    iters: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["chosen_inclusion"] = {str(k): v for k, v in self.chosen_inclusion.items()}
        return d


@dataclass
class LearnResult:
    ordering_hat: tuple[int, ...]
    edges_hat: frozenset[tuple[int, int]]
    step_diagnostics: list[StepDiagnostic]
    config_used: BagusConfig
    n: float
    edge_inclusion: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.ordering_hat)

    def to_dag(self) -> Dag:
        return Dag(self.p, self.edges_hat)

    @property
    def converged(self) -> bool:
        return all(s.converged for s in self.step_diagnostics)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "n": self.n,
            "ordering": list(self.ordering_hat),
            "edges": [
                {"parent": j, "child": k, "inclusion_probability": self.edge_inclusion.get((j, k))}
                for j, k in sorted(self.edges_hat)
            ],
            "config": self.config_used.to_dict(),
            "steps": [s.to_dict() for s in self.step_diagnostics],
        }


def _resolve_input(data, sigma_hat, n):
    if data is not None:
        S, count = sample_covariance(data)
        return S, float(count)
    if sigma_hat is None or n is None:
        raise ValueError("provide either data or (sigma_hat, n)")
    return np.asarray(sigma_hat, dtype=float), float(n)


def learn_structure(
    data=None,
    config: BagusConfig | None = None,
    *,
    sigma_hat=None,
    n: float | None = None,
    warm_start: bool = False,
    gap_tol: float = DEFAULT_GAP_TOL,
    record_parents: bool = True,
) -> LearnResult:
    """Estimate a topological ordering and edge set.

    Pass raw observations as ``data`` (an ``n x p`` array or a Dataset), or a
    precomputed covariance as ``sigma_hat`` together with the sample size ``n``.
    """
    S, n = _resolve_input(data, sigma_hat, n)
    p = S.shape[0]
    if p < 1:
        raise ValueError("need at least one variable")
    cfg = (config or BagusConfig()).resolved(int(n))
    T = cfg.threshold_T

    remaining = list(range(p))
    ordering_rev: list[int] = []
    edges: set[tuple[int, int]] = set()
    edge_prob: dict[tuple[int, int], float] = {}
    steps: list[StepDiagnostic] = []
    prev_omega = None
    prev_nodes: list[int] | None = None

    for r in range(1, p):
        sub = S[np.ix_(remaining, remaining)]
        init = None
        if warm_start and prev_omega is not None:
            keep = [prev_nodes.index(v) for v in remaining]
            init = prev_omega[np.ix_(keep, keep)]
        fit = fit_map(sub, n, cfg, omega_init=init)
        diag = np.diag(fit.omega_hat)
        pos = int(np.argmin(diag))  # first occurrence = lowest original index
        chosen = remaining[pos]
        sorted_diag = np.sort(diag)
        gap = float(sorted_diag[1] - sorted_diag[0])
        row = fit.inclusion_prob[pos]
        incl = {remaining[i]: float(row[i]) for i in range(len(remaining)) if i != pos}
        parents = sorted(k for k, prob in incl.items() if prob >= T)
        if record_parents:
            for k in parents:
                edges.add((k, chosen))
                edge_prob[(k, chosen)] = incl[k]
        notes = list(fit.warnings)
        if n < len(remaining):
            notes.append(f"n={n:g} is smaller than the number of remaining variables {len(remaining)}")
        steps.append(
            StepDiagnostic(
                step=r,
                chosen=chosen,
                remaining=list(remaining),
                diagonal=[float(v) for v in diag],
                gap=gap,
                near_tie=gap < gap_tol,
                chosen_inclusion=incl,
                parents=parents if record_parents else [],
                converged=fit.converged,
                iters=fit.iters,
                warnings=notes,
            )
        )
        if not fit.converged:
            logger.info("step %d: solver did not converge", r)
        ordering_rev.append(chosen)
        prev_omega, prev_nodes = fit.omega_hat, list(remaining)
        remaining.pop(pos)

    ordering = tuple(remaining + ordering_rev[::-1])
    return LearnResult(
        ordering_hat=ordering,
        edges_hat=frozenset(edges),
        step_diagnostics=steps,
        config_used=cfg,
        n=n,
        edge_inclusion=edge_prob,
    )


def learn_ordering_only(data=None, config: BagusConfig | None = None, **kwargs) -> LearnResult:
    """As :func:`learn_structure` but without parent bookkeeping."""
    return learn_structure(data, config, record_parents=False, **kwargs)
