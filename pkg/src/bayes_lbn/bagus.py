"""Spike-and-slab MAP estimation of a sparse precision matrix.

Off-diagonal entries carry a two-component Laplace mixture prior (a narrow
spike with scale ``nu0`` and a wide slab with scale ``nu1``), diagonal
entries an exponential prior with rate ``tau``.  The MAP estimate minimises

    (n/2) [tr(S Omega) - log det Omega] + sum_{j<k} pen(Omega_jk) + tau tr(Omega)

with ``pen(t) = -log(eta/(2 nu1) e^{-|t|/nu1} + (1-eta)/(2 nu0) e^{-|t|/nu0})``.

``pen`` is concave in ``|t|``, so its tangent at the current iterate is a
weighted-l1 majoriser.  Each EM iteration computes the slab responsibilities
(E-step) and then minimises the weighted-l1 surrogate by primal block
coordinate descent over columns (M-step).  Every column update is an exact
block minimisation, so the objective never increases and the iterate stays
positive definite.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numba import njit
from scipy import linalg
from scipy.special import expit

from .model import SingularMatrixError, spd_inverse

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BagusConfig:
    """Prior hyper-parameters and solver controls.

    ``nu0=None`` means the sample-size dependent default ``sqrt(1/(100 n))``;
    call :meth:`resolved` to fill it in.
    """

    nu0: float | None = None
    nu1: float = 1.0
    eta: float = 0.5
    tau: float = 1e-4
    threshold_T: float = 0.5
    spectral_bound_B0: float | None = None
    max_outer_iters: int = 100
    tol: float = 1e-4
    inner_max_iters: int = 200
    inner_tol: float = 1e-6

    def __post_init__(self):
        if self.nu0 is not None:
            if not self.nu0 > 0:
                raise ValueError(f"nu0 must be positive, got {self.nu0}")
            if not self.nu1 >= self.nu0:
                raise ValueError(f"nu1 must be >= nu0, got nu1={self.nu1}, nu0={self.nu0}")
        if not self.nu1 > 0:
            raise ValueError(f"nu1 must be positive, got {self.nu1}")
        if not 0 < self.eta < 1:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0 < self.threshold_T < 1:
            raise ValueError(f"threshold_T must lie in (0, 1), got {self.threshold_T}")
        if self.spectral_bound_B0 is not None and not self.spectral_bound_B0 > 0:
            raise ValueError("spectral_bound_B0 must be positive or None")
        if self.max_outer_iters < 1 or self.inner_max_iters < 1:
            raise ValueError("iteration limits must be positive")
        if not (self.tol > 0 and self.inner_tol > 0):
            raise ValueError("tolerances must be positive")

    @staticmethod
    def default_nu0(n: int) -> float:
        return math.sqrt(1.0 / (100.0 * n))

    def resolved(self, n: int) -> "BagusConfig":
        if self.nu0 is not None:
            return self
        return replace(self, nu0=self.default_nu0(n))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BagusConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown BagusConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PrecisionFit:
    omega_hat: np.ndarray
    inclusion_prob: np.ndarray
    objective_trace: list[float]
    converged: bool
    iters: int
    spectral_norm: float
    warnings: list[str] = field(default_factory=list)

    def support(self, T: float) -> set[tuple[int, int]]:
        return threshold_support(self, T)


# --------------------------------------------------------------------------
# prior pieces


def _log_slab_odds(theta, nu0: float, nu1: float, eta: float):
    a = np.abs(theta)
    return (math.log(eta / nu1) - math.log((1 - eta) / nu0)) + a * (1.0 / nu0 - 1.0 / nu1)


def inclusion_probability(theta, config: BagusConfig):
    """Posterior probability that ``theta`` came from the slab component."""
    cfg = _require_nu0(config)
    out = expit(_log_slab_odds(theta, cfg.nu0, cfg.nu1, cfg.eta))
    return float(out) if np.ndim(out) == 0 else out


def spike_slab_penalty(theta, config: BagusConfig):
    """Negative log of the mixture prior density at ``theta``."""
    cfg = _require_nu0(config)
    a = np.abs(theta)
    out = -np.logaddexp(
        math.log(cfg.eta / (2 * cfg.nu1)) - a / cfg.nu1,
        math.log((1 - cfg.eta) / (2 * cfg.nu0)) - a / cfg.nu0,
    )
    return float(out) if np.ndim(out) == 0 else out


def penalty_weights(omega: np.ndarray, config: BagusConfig) -> np.ndarray:
    """Slope of the penalty in ``|theta|`` at each entry (E-step weights)."""
    prob = inclusion_probability(omega, config)
    return prob / config.nu1 + (1.0 - prob) / config.nu0


def _require_nu0(config: BagusConfig) -> BagusConfig:
    if config.nu0 is None:
        raise ValueError("config.nu0 is unresolved; call config.resolved(n) first")
    return config


# --------------------------------------------------------------------------
# objective


def _cholesky_logdet(omega: np.ndarray) -> float:
    try:
        c = linalg.cholesky(omega, lower=True)
    except linalg.LinAlgError:
        raise SingularMatrixError("omega is not positive definite") from None
    return 2.0 * float(np.log(np.diag(c)).sum())


def negative_log_posterior(omega, sigma_hat, n: float, config: BagusConfig) -> float:
    omega = np.asarray(omega, dtype=float)
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    cfg = _require_nu0(config)
    logdet = _cholesky_logdet(omega)
    value = 0.5 * n * (float(np.sum(sigma_hat * omega)) - logdet)
    iu = np.triu_indices(omega.shape[0], 1)
    if iu[0].size:
        value += float(np.sum(spike_slab_penalty(omega[iu], cfg)))
    return value + cfg.tau * float(np.trace(omega))


def stationarity_residual(omega, sigma_hat, n: float, config: BagusConfig) -> float:
    """Largest KKT violation of the MAP problem at ``omega``, divided by ``n``.

    Off-diagonal entries are treated as one symmetric parameter each.
    """
    omega = np.asarray(omega, dtype=float)
    cfg = _require_nu0(config)
    w = spd_inverse(omega)
    grad = n * (np.asarray(sigma_hat, dtype=float) - w)
    diag = 0.5 * np.diag(grad) + cfg.tau
    slope = penalty_weights(omega, cfg)
    off = ~np.eye(omega.shape[0], dtype=bool)
    nz = off & (omega != 0)
    zero = off & (omega == 0)
    res = [np.abs(diag).max()]
    if nz.any():
        res.append(np.abs(grad[nz] + slope[nz] * np.sign(omega[nz])).max())
    if zero.any():
        res.append(np.maximum(np.abs(grad[zero]) - slope[zero], 0.0).max())
    return float(max(res)) / n


# --------------------------------------------------------------------------
# solver


@njit(cache=True)
def _m_step(S, n, tau, weights, omega, max_sweeps, tol):
    """Weighted-l1 penalised Gaussian MAP by primal column-wise descent.

    Minimises (n/2)[tr(S O) - logdet O] + sum_{j<k} w_jk |O_jk| + tau tr(O),
    starting from ``omega`` (modified in place).  Returns the sweep count.
    """
    p = S.shape[0]
    m = p - 1
    idx = np.empty(m, np.int64)
    A = np.empty((m, m))
    beta = np.empty(m)
    u = np.empty(m)
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        W = np.linalg.inv(omega)
        max_change = 0.0
        for j in range(p):
            pos = 0
            for i in range(p):
                if i != j:
                    idx[pos] = i
                    pos += 1
            w22 = W[j, j]
            # inverse of the complementary block of omega
            for a in range(m):
                ia = idx[a]
                for b in range(m):
                    A[a, b] = W[ia, idx[b]] - W[ia, j] * W[idx[b], j] / w22
            c = n * S[j, j] + 2.0 * tau
            for a in range(m):
                beta[a] = omega[idx[a], j]
            for a in range(m):
                acc = 0.0
                for b in range(m):
                    acc += A[a, b] * beta[b]
                u[a] = acc
            for _ in range(max_sweeps):
                dmax = 0.0
                for a in range(m):
                    old = beta[a]
                    z = c * (u[a] - A[a, a] * old) + n * S[idx[a], j]
                    lam = weights[idx[a], j]
                    if z > lam:
                        new = -(z - lam) / (c * A[a, a])
                    elif z < -lam:
                        new = -(z + lam) / (c * A[a, a])
                    else:
                        new = 0.0
                    d = new - old
                    if d != 0.0:
                        for b in range(m):
                            u[b] += A[b, a] * d
                        beta[a] = new
                        if abs(d) > dmax:
                            dmax = abs(d)
                if dmax < tol:
                    break
            for a in range(m):
                acc = 0.0
                for b in range(m):
                    acc += A[a, b] * beta[b]
                u[a] = acc
            gamma = n / c
            quad = 0.0
            for a in range(m):
                quad += beta[a] * u[a]
            new_diag = gamma + quad
            change = abs(new_diag - omega[j, j])
            omega[j, j] = new_diag
            for a in range(m):
                ia = idx[a]
                d = abs(beta[a] - omega[ia, j])
                if d > change:
                    change = d
                omega[ia, j] = beta[a]
                omega[j, ia] = beta[a]
            if change > max_change:
                max_change = change
            # block-inverse update of W for the new column
            W[j, j] = 1.0 / gamma
            for a in range(m):
                ia = idx[a]
                W[ia, j] = -u[a] / gamma
                W[j, ia] = -u[a] / gamma
                for b in range(m):
                    W[ia, idx[b]] = A[a, b] + u[a] * u[b] / gamma
        if max_change < tol:
            break
    return sweeps


def _initial_omega(sigma_hat: np.ndarray) -> np.ndarray:
    d = np.diag(sigma_hat).astype(float)
    eps = 1e-4 * d.mean()
    if not eps > 0:
        eps = 1e-4
    return np.diag(1.0 / (d + eps))


def fit_map(
    sigma_hat,
    n: float,
    config: BagusConfig | None = None,
    omega_init: np.ndarray | None = None,
) -> PrecisionFit:
    """MAP precision estimate for a sample covariance ``sigma_hat`` of ``n`` samples."""
    S = np.asarray(sigma_hat, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise ValueError("sigma_hat must be a non-empty square matrix")
    if not np.allclose(S, S.T, rtol=0, atol=1e-10 * max(1.0, np.abs(S).max())):
        raise ValueError("sigma_hat must be symmetric")
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    S = (S + S.T) / 2
    cfg = (config or BagusConfig()).resolved(int(n))
    p = S.shape[0]
    notes: list[str] = []

    if p == 1:
        omega = np.array([[n / (n * S[0, 0] + 2.0 * cfg.tau)]])
        obj = negative_log_posterior(omega, S, n, cfg)
        return _finish(omega, [obj], True, 0, cfg, notes)

    if omega_init is not None:
        omega = np.array(omega_init, dtype=float)
        try:
            linalg.cholesky(omega, lower=True)
        except linalg.LinAlgError:
            notes.append("omega_init not positive definite; using diagonal start")
            omega = _initial_omega(S)
    else:
        omega = _initial_omega(S)

    trace = [negative_log_posterior(omega, S, n, cfg)]
    converged = False
    iters = 0
    for it in range(cfg.max_outer_iters):
        weights = penalty_weights(omega, cfg)
        candidate = omega.copy()
        _m_step(S, float(n), cfg.tau, weights, candidate, cfg.inner_max_iters, cfg.inner_tol)
        candidate = (candidate + candidate.T) / 2
        try:
            obj = negative_log_posterior(candidate, S, n, cfg)
        except SingularMatrixError:
            notes.append(f"iteration {it + 1}: M-step produced a non-SPD iterate; step rejected")
            break
        if not np.isfinite(obj):
            notes.append(f"iteration {it + 1}: non-finite objective; step rejected")
            break
        iters = it + 1
        change = float(np.abs(candidate - omega).max())
        omega = candidate
        trace.append(obj)
        if change < cfg.tol:
            converged = True
            break
    if not converged:
        notes.append(f"EM did not converge within {cfg.max_outer_iters} iterations")
    return _finish(omega, trace, converged, iters, cfg, notes)


def _finish(omega, trace, converged, iters, cfg: BagusConfig, notes) -> PrecisionFit:
    prob = inclusion_probability(omega, cfg)
    prob = np.atleast_2d(prob)
    np.fill_diagonal(prob, 1.0)
    spectral = float(np.linalg.eigvalsh(omega)[-1])
    if cfg.spectral_bound_B0 is not None and spectral > cfg.spectral_bound_B0:
        msg = f"spectral norm {spectral:.4g} exceeds B0={cfg.spectral_bound_B0:.4g}"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    for msg in notes:
        logger.debug(msg)
    return PrecisionFit(
        omega_hat=omega,
        inclusion_prob=prob,
        objective_trace=[float(v) for v in trace],
        converged=converged,
        iters=iters,
        spectral_norm=spectral,
        warnings=list(notes),
    )


def threshold_support(fit: PrecisionFit, T: float) -> set[tuple[int, int]]:
    """Unordered pairs ``(j, k)``, ``j < k``, with inclusion probability >= T."""
    if not 0 < T < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {T}")
    prob = fit.inclusion_prob
    j, k = np.nonzero(np.triu(prob >= T, 1))
    return set(zip(j.tolist(), k.tolist()))
