"""ICA-based LiNGAM estimator.

The pipeline is: centre and whiten, symmetric FastICA with several random
restarts (best negentropy objective wins), permute the unmixing rows so the
diagonal has no small entries, normalise rows to get ``B = I - W'``, then search
for the causal order that makes ``B`` as close to strictly lower triangular as
possible.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.integrate
import scipy.optimize
import scipy.stats

from mblingam import kernels
from mblingam.model import CausalOrder, ConnectionMatrix, DataMatrix, LingamEstimate

log = logging.getLogger(__name__)

# largest m for which the causal order is searched exhaustively
EXHAUSTIVE_ORDER_MAX = 8
# the max-over-restarts non-Gaussianity statistic must exceed this quantile of
# its Gaussian-data null before an estimate is considered reliable
RELIABILITY_QUANTILE = 0.99


class RankDeficiencyError(ValueError):
    """The sample covariance is singular."""


class DegenerateMatrixError(ValueError):
    """No row permutation gives the unmixing matrix a nonzero diagonal."""


NONLINEARITIES = {"tanh": kernels.TANH, "cube": kernels.CUBE}


def _gauss_moments(nonlinearity):
    if nonlinearity == "cube":
        # G(u) = u^4 / 4 under N(0, 1): mean 3/4, variance (105 - 9) / 16
        return 0.75, 6.0

    def logcosh(u):
        a = abs(u)
        return a + math.log1p(math.exp(-2.0 * a)) - math.log(2.0)

    pdf = scipy.stats.norm.pdf
    mean = scipy.integrate.quad(lambda u: logcosh(u) * pdf(u), -np.inf, np.inf, epsabs=1e-14)[0]
    second = scipy.integrate.quad(lambda u: logcosh(u) ** 2 * pdf(u), -np.inf, np.inf, epsabs=1e-14)[0]
    return mean, second - mean**2


GAUSS_MOMENTS = {name: _gauss_moments(name) for name in NONLINEARITIES}


@dataclass(frozen=True)
class IcaConfig:
    restarts: int = 8
    max_iterations: int = 1000
    convergence_tol: float = 1e-7
    nonlinearity: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be > 0")
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")


@dataclass(frozen=True)
class IcaResult:
    unmixing: np.ndarray
    objective: float
    converged: bool
    best_restart: int


def restart_inits(seed: int, restarts: int, m: int) -> np.ndarray:
    """Initial matrices for every restart; restart r takes block r of one stream."""
    return np.random.default_rng(np.random.SeedSequence(int(seed))).standard_normal((restarts, m, m))


def _run_ica(values, idx, inits, cfg):
    mean_ref, _ = GAUSS_MOMENTS[cfg.nonlinearity]
    status, unmixing, obj, conv, best = kernels.fit_unmixing(
        values,
        idx,
        inits,
        cfg.max_iterations,
        cfg.convergence_tol,
        NONLINEARITIES[cfg.nonlinearity],
        mean_ref,
    )
    if status == kernels.STATUS_RANK_DEFICIENT:
        raise RankDeficiencyError("sample covariance is rank deficient")
    return IcaResult(unmixing, float(obj), bool(conv), int(best))


def fastica(data: DataMatrix, cfg: IcaConfig = IcaConfig()) -> IcaResult:
    """Symmetric FastICA with random restarts.

    Returns the unmixing matrix of the restart with the largest negentropy
    objective (ties go to the lower restart index). The unmixing matrix acts on
    centred data and produces components with identity sample covariance.
    """
    values = data.values
    idx = np.arange(values.shape[1])
    res = _run_ica(values, idx, restart_inits(cfg.seed, cfg.restarts, data.m), cfg)
    if not res.converged:
        log.warning("FastICA hit max_iterations=%d without converging", cfg.max_iterations)
    return res


def permute_rows_nonzero_diag(w):
    """Row permutation minimising ``sum_i 1 / |w_perm[i, i]|``.

    Returns ``(perm, w[perm])`` where ``perm[i]`` is the original row moved to
    position ``i``.
    """
    w = np.asarray(w, dtype=float)
    absw = np.abs(w)
    with np.errstate(divide="ignore"):
        # cost[i, r]: put original row r at position i
        cost = np.where(absw.T > 0.0, 1.0 / absw.T, np.inf)
    try:
        pos, rows = scipy.optimize.linear_sum_assignment(cost)
    except ValueError as exc:
        raise DegenerateMatrixError("every row permutation leaves a zero on the diagonal") from exc
    perm = rows[np.argsort(pos)]
    return perm, w[perm]


def estimate_b(w_permuted) -> ConnectionMatrix:
    """``B = I - W'`` where ``W'`` is ``w_permuted`` with rows scaled to unit diagonal."""
    w = np.asarray(w_permuted, dtype=float)
    d = np.diag(w)
    if np.any(d == 0.0):
        raise DegenerateMatrixError("zero on the diagonal of the permuted unmixing matrix")
    b = -w / d[:, None]
    np.fill_diagonal(b, 0.0)
    return ConnectionMatrix(b)


@lru_cache(maxsize=None)
def _permutations(m):
    perms = np.array(list(itertools.permutations(range(m))), dtype=np.intp)
    upper = [(a, c) for a in range(m) for c in range(a + 1, m)]
    return perms, upper


def _exhaustive_order(b):
    perms, upper = _permutations(b.shape[0])
    b2 = b * b
    cost = np.zeros(len(perms))
    for a, c in upper:
        cost += b2[perms[:, a], perms[:, c]]
    # permutations are generated lexicographically, argmin returns the first
    return tuple(perms[int(np.argmin(cost))])


def _greedy_order(b):
    b2 = b * b
    remaining = list(range(b.shape[0]))
    order = []
    while remaining:
        mass = [b2[i, remaining].sum() for i in remaining]
        pick = remaining[int(np.argmin(mass))]
        order.append(pick)
        remaining.remove(pick)
    return tuple(order)


def find_causal_order(b_hat: ConnectionMatrix) -> CausalOrder:
    """Order minimising the squared mass above the diagonal of ``P B P^T``.

    Exhaustive over all permutations for ``m <= 8``; beyond that a greedy
    elimination repeatedly takes the variable with the least remaining
    incoming mass, which is only approximate.
    """
    b = np.asarray(b_hat.b)
    if b.shape[0] <= EXHAUSTIVE_ORDER_MAX:
        return CausalOrder(_exhaustive_order(b))
    return CausalOrder(_greedy_order(b))


def _estimate_from_unmixing(unmixing):
    _, w_perm = permute_rows_nonzero_diag(unmixing)
    b_hat = estimate_b(w_perm)
    return find_causal_order(b_hat), b_hat


def reliability_threshold(m: int, n: int, nonlinearity: str = "tanh") -> float:
    """Objective value below which the data look Gaussian to the estimator."""
    _, var_ref = GAUSS_MOMENTS[nonlinearity]
    return float(scipy.stats.chi2.ppf(RELIABILITY_QUANTILE, m) * var_ref / n)


def lingam_fit(data: DataMatrix, cfg: IcaConfig = IcaConfig()) -> LingamEstimate:
    ica = fastica(data, cfg)
    order, b_hat = _estimate_from_unmixing(ica.unmixing)
    threshold = reliability_threshold(data.m, data.n, cfg.nonlinearity)
    reliable = ica.objective > threshold
    if not reliable:
        log.warning("ICA objective %.3g is at Gaussian noise level; estimate unreliable", ica.objective)
    return LingamEstimate(
        order=order,
        b_hat=b_hat,
        ica_objective=ica.objective,
        restarts_used=cfg.restarts,
        converged=ica.converged,
        best_restart=ica.best_restart,
        approximate_order=data.m > EXHAUSTIVE_ORDER_MAX,
        diagnostics={"reliable": reliable, "reliability_threshold": threshold},
    )
