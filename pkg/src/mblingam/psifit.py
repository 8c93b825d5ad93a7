"""Scaling-law fits to multiscale bootstrap counts and p-value extrapolation.

The normalised bootstrap z-value ``sigma * z(sigma^2)`` is modelled by one of
two families ``psi(sigma^2 | beta)``:

* ``poly(h)``: ``sum_j beta_j s^j`` for ``j < h``
* ``sing(h)``: ``beta_0 + sum_{j=1}^{h-2} beta_j s^j / (1 + beta_{h-1} (sigma - 1))``
  with ``0 <= beta_{h-1} <= 1``

where ``s = sigma^2``. The parameters are fitted by binomial maximum
likelihood on the raw counts, candidates are ranked by AIC, and the winner is
extrapolated to ``s = -1`` by a truncated Taylor series around ``s = 1``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.optimize
import scipy.special

from mblingam.model import HypothesisId

log = logging.getLogger(__name__)

MAX_ITER = 500
GRAD_TOL = 1e-8
MAX_DERIV = 4
# grid of start values for the denominator parameter of the sing family
SING_START_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


class NoConvergedFitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# standard normal
# ---------------------------------------------------------------------------


def normal_cdf(x):
    """Standard normal distribution function."""
    return scipy.special.ndtr(x)


def normal_quantile(p):
    """Inverse of :func:`normal_cdf`; raises on ``p`` outside ``(0, 1)``."""
    arr = np.asarray(p, dtype=float)
    if np.any(~(arr > 0.0) | ~(arr < 1.0)):
        raise ValueError("normal_quantile needs 0 < p < 1")
    out = scipy.special.ndtri(arr)
    return float(out) if np.ndim(p) == 0 else out


def z_value(count, q_effective):
    """``-Phi^-1(C / Q)`` with the fraction clipped to ``[1/(2Q), 1 - 1/(2Q)]``."""
    q = np.asarray(q_effective, dtype=float)
    if np.any(q < 1):
        raise ValueError("Q_effective must be >= 1")
    frac = np.clip(np.asarray(count, dtype=float) / q, 0.5 / q, 1.0 - 0.5 / q)
    # for Q == 1 the clip collapses to 1/2
    return -scipy.special.ndtri(frac)


# ---------------------------------------------------------------------------
# psi models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PsiModel:
    kind: str
    beta: tuple[float, ...]

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta)
        object.__setattr__(self, "beta", beta)
        h = len(beta)
        if self.kind == "poly":
            if h < 1:
                raise ValueError("poly needs h >= 1")
        elif self.kind == "sing":
            if h < 3:
                raise ValueError("sing needs h >= 3")
            if not 0.0 <= beta[-1] <= 1.0:
                raise ValueError("sing needs 0 <= beta[h-1] <= 1")
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def h(self) -> int:
        return len(self.beta)

    @property
    def name(self) -> str:
        return f"{self.kind}{self.h}"


def parse_kind(name: str) -> tuple[str, int]:
    """``"poly2"`` -> ``("poly", 2)``."""
    for kind in ("poly", "sing"):
        if name.startswith(kind) and name[len(kind):].isdigit():
            return kind, int(name[len(kind):])
    raise ValueError(f"bad model name {name!r}")


def _binom_series_coeffs(s0, j, order):
    # (s0 + t)^j as coefficients of t^0..t^order
    return np.array([math.comb(j, k) * s0 ** (j - k) if k <= j else 0.0 for k in range(order + 1)])


def _sqrt_series_coeffs(s0, order):
    # sqrt(s0 + t) = sqrt(s0) * sum_k binom(1/2, k) (t / s0)^k
    out = np.empty(order + 1)
    c = 1.0
    for k in range(order + 1):
        out[k] = math.sqrt(s0) * c / s0**k
        c *= (0.5 - k) / (k + 1)
    return out


def _series_div(num, den):
    q = np.zeros_like(num)
    for k in range(len(num)):
        q[k] = (num[k] - np.dot(den[1 : k + 1], q[k - 1 :: -1][:k])) / den[0]
    return q


def psi_eval(model: PsiModel, sigma_sq: float) -> float:
    return float(psi_derivs(model, sigma_sq, 0)[0])


def psi_derivs(model: PsiModel, sigma_sq: float, j_max: int) -> np.ndarray:
    """``[psi, dpsi/ds, ..., d^j_max psi/ds^j_max]`` at ``s = sigma_sq``.

    Derivatives are exact: the model is expanded as a truncated power series in
    ``t = s - sigma_sq`` (the sing family through the series of ``sqrt(s)``).
    """
    if not 0 <= j_max <= MAX_DERIV:
        raise ValueError(f"j_max must be in [0, {MAX_DERIV}]")
    beta = model.beta
    s0 = float(sigma_sq)
    if model.kind == "poly":
        out = np.zeros(j_max + 1)
        # the constant term only touches psi itself, which keeps the
        # infinite intercept of a saturated fit out of the derivatives
        out[0] = beta[0]
        for j, b in enumerate(beta[1:], start=1):
            if b == 0.0:
                continue
            out += b * _binom_series_coeffs(s0, j, j_max)
    else:
        if not s0 > 0:
            raise ValueError("the sing model needs sigma_sq > 0")
        num = np.zeros(j_max + 1)
        for j in range(1, model.h - 1):
            num += beta[j] * _binom_series_coeffs(s0, j, j_max)
        den = beta[-1] * _sqrt_series_coeffs(s0, j_max)
        den[0] += 1.0 - beta[-1]
        out = _series_div(num, den)
        out[0] += beta[0]
    fact = np.array([math.factorial(k) for k in range(j_max + 1)], dtype=float)
    return out * fact


def _design(kind, h, s, b_last=None):
    # the sing family is linear in beta[:-1] once beta[-1] is fixed

    if kind == "poly":
        return np.vander(s, h, increasing=True)
    den = 1.0 + b_last * (np.sqrt(s) - 1.0)
    cols = [np.ones_like(s)] + [s**j / den for j in range(1, h - 1)]
    return np.column_stack(cols)


def _psi_and_jac(kind, beta, s):
    h = len(beta)
    if kind == "poly":
        x = np.vander(s, h, increasing=True)
        return x @ beta, x
    b_last = beta[-1]
    sig = np.sqrt(s)
    den = 1.0 + b_last * (sig - 1.0)
    num = sum(beta[j] * s**j for j in range(1, h - 1))
    jac = np.empty((len(s), h))
    jac[:, 0] = 1.0
    for j in range(1, h - 1):
        jac[:, j] = s**j / den
    jac[:, -1] = -num * (sig - 1.0) / den**2
    return beta[0] + num / den, jac


# ---------------------------------------------------------------------------
# binomial likelihood
# ---------------------------------------------------------------------------


def _log_binom(q, c):
    return scipy.special.gammaln(q + 1) - scipy.special.gammaln(c + 1) - scipy.special.gammaln(q - c + 1)


def _mills(u):
    # phi(u) / Phi(u), stable in both tails
    return np.exp(-0.5 * u * u - 0.5 * math.log(2 * math.pi) - scipy.special.log_ndtr(u))


def nll_and_grad(kind, beta, counts, q_eff, sigma_sq):
    """Negative binomial log likelihood of the counts and its gradient in beta.

    The success probability at scale ``d`` is ``Phi(-psi(s_d) / sigma_d)``.
    """
    beta = np.asarray(beta, dtype=float)
    c = np.asarray(counts, dtype=float)
    q = np.asarray(q_eff, dtype=float)
    s = np.asarray(sigma_sq, dtype=float)
    sig = np.sqrt(s)
    psi, jac = _psi_and_jac(kind, beta, s)
    u = -psi / sig
    nll = -np.sum(c * scipy.special.log_ndtr(u) + (q - c) * scipy.special.log_ndtr(-u) + _log_binom(q, c))
    dpsi = (c * _mills(u) - (q - c) * _mills(-u)) / sig
    return float(nll), jac.T @ dpsi


@dataclass(frozen=True)
class PsiFitResult:
    model: PsiModel
    nll: float
    aic: float
    converged: bool
    z_values: tuple[tuple[float, float], ...] = ()
    saturated: str | None = None
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model.name,
            "beta": list(self.model.beta),
            "nll": self.nll,
            "aic": self.aic,
            "converged": self.converged,
            "saturated": self.saturated,
            "iterations": self.iterations,
            "z_values": [{"sigma": a, "normalized_z": b} for a, b in self.z_values],
        }


def _clean(counts, q_eff, sigma_sq):
    c = np.asarray(counts, dtype=float)
    q = np.asarray(q_eff, dtype=float)
    s = np.asarray(sigma_sq, dtype=float)
    keep = q > 0
    return c[keep], q[keep], s[keep]


def _normalized_z(c, q, s):
    return np.sqrt(s) * z_value(c, q)


def _wls_start(kind, h, c, q, s):
    sig = np.sqrt(s)
    z = z_value(c, q)
    y = sig * z
    frac = np.clip(c / q, 0.5 / q, 1 - 0.5 / q)
    var = s * frac * (1 - frac) / (q * np.exp(-z * z) / (2 * math.pi))
    w = np.sqrt(1.0 / var)

    def solve(x):
        coef, *_ = np.linalg.lstsq(x * w[:, None], y * w, rcond=None)
        resid = float(np.sum((w * (x @ coef - y)) ** 2))
        return coef, resid

    if kind == "poly":
        return solve(_design(kind, h, s))[0]
    best = None
    for b_last in SING_START_GRID:
        coef, resid = solve(_design(kind, h, s, b_last))
        if best is None or resid < best[1]:
            best = (np.append(coef, b_last), resid)
    return best[0]


def _saturation(c, q):
    if np.all(c == 0):
        return "low", math.inf
    if np.all(c == q):
        return "high", -math.inf
    return None, None


def fit_binomial_ml(counts, q_eff, sigma_sq, kind: str = "poly", h: int = 1) -> PsiFitResult:
    """Maximum-likelihood ``psi`` fit of the given family to per-scale counts.

    Scales with ``Q_d = 0`` are ignored. Tables whose counts are all 0 (or all
    ``Q_d``) have no finite maximiser and come back as a flagged constant fit
    whose p-value is exactly 0 (or 1).
    """
    c, q, s = _clean(counts, q_eff, sigma_sq)
    if len(c) < h:
        raise ValueError(f"{kind}{h} needs at least {h} scales with Q_d >= 1, got {len(c)}")
    zdiag = tuple(zip(np.sqrt(s).tolist(), _normalized_z(c, q, s).tolist()))

    sat, beta0 = _saturation(c, q)
    if sat is not None:
        log.warning("saturated count table (%s); p-value forced to %d", sat, 0 if sat == "low" else 1)
        return PsiFitResult(PsiModel("poly", (beta0,)), 0.0, 2.0, True, zdiag, sat, 0)

    x0 = _wls_start(kind, h, c, q, s)
    bounds = None
    if kind == "sing":
        bounds = [(None, None)] * (h - 1) + [(0.0, 1.0)]
    res = _minimize(kind, x0, c, q, s, bounds)
    beta = res.x
    nll = float(res.fun)
    converged = bool(np.all(np.isfinite(beta)) and res.nit < MAX_ITER)
    if not converged:
        log.warning("%s%d fit did not converge (%s)", kind, h, res.message)
    model = PsiModel(kind, tuple(beta))
    return PsiFitResult(model, nll, 2.0 * nll + 2.0 * h, converged, zdiag, None, int(res.nit))


def _minimize(kind, x0, c, q, s, bounds):
    return scipy.optimize.minimize(
        lambda b: nll_and_grad(kind, b, c, q, s),
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": MAX_ITER, "gtol": GRAD_TOL, "ftol": 1e-15},
    )


def select_model(fits: Sequence[PsiFitResult]) -> PsiFitResult:
    """Converged fit with the smallest AIC; ties go to fewer parameters, then poly."""
    ok = [f for f in fits if f.converged]
    if not ok:
        raise NoConvergedFitError("no candidate psi fit converged")
    return min(ok, key=lambda f: (f.aic, f.model.h, f.model.kind != "poly"))


def extrapolate_pvalue(best: PsiFitResult | PsiModel, h: int = 3) -> float:
    """``Phi(-sum_{j<h} (-2)^j / j! * psi^(j)(1))``: Taylor step from s=1 to s=-1."""
    if h < 1:
        raise ValueError("h must be >= 1")
    model = best.model if isinstance(best, PsiFitResult) else best
    if h - 1 > MAX_DERIV:
        raise ValueError(f"h must be <= {MAX_DERIV + 1}")
    derivs = psi_derivs(model, 1.0, h - 1)
    if not np.isfinite(derivs[0]):
        return float(normal_cdf(-derivs[0]))
    arg = sum((-2.0) ** j / math.factorial(j) * derivs[j] for j in range(h))
    return float(normal_cdf(-arg))


# ---------------------------------------------------------------------------
# per-hypothesis reports
# ---------------------------------------------------------------------------

DEFAULT_CANDIDATES = ("poly1", "poly2", "poly3", "sing3")
REPORT_CSV_COLUMNS = ("effect", "cause", "sign", "p_bp", "p_mb", "model_kind", "aic")


def bp_scale_index(sigma_sq) -> int:
    """Index of the scale closest to ``sigma^2 = 1`` (first one on ties)."""
    return int(np.argmin(np.abs(np.asarray(sigma_sq, dtype=float) - 1.0)))


@dataclass(frozen=True)
class HypothesisPvalue:
    hypothesis: HypothesisId
    p_bp: float
    p_mb: float
    best: PsiFitResult
    fits: tuple[PsiFitResult, ...]
    flags: tuple[str, ...] = ()


def pvalues_for_counts(counts, q_eff, sigma_sq, h: int = 3, candidates=DEFAULT_CANDIDATES):
    """Fit every candidate family, pick by AIC and extrapolate.

    Returns ``(p_bp, p_mb, best_fit, all_fits, flags)``. Candidates with more
    parameters than usable scales are skipped.
    """
    counts = np.asarray(counts)
    q_eff = np.asarray(q_eff)
    sigma_sq = np.asarray(sigma_sq, dtype=float)
    usable = int(np.sum(q_eff > 0))
    k = bp_scale_index(np.where(q_eff > 0, sigma_sq, np.inf))
    p_bp = float(counts[k] / q_eff[k])
    flags = []
    fits = []
    for name in candidates:
        kind, nparam = parse_kind(name)
        if nparam > usable:
            continue
        fits.append(fit_binomial_ml(counts, q_eff, sigma_sq, kind, nparam))
    if not fits:
        raise ValueError("no candidate model fits the available scales")
    try:
        best = select_model(fits)
    except NoConvergedFitError:
        flags.append("unconverged")
        best = min(fits, key=lambda f: (f.aic, f.model.h, f.model.kind != "poly"))
    if best.saturated:
        flags.append("saturated")
    return p_bp, extrapolate_pvalue(best, h), best, tuple(fits), tuple(flags)


@dataclass(frozen=True)
class PvalueReport:
    variable_names: tuple[str, ...]
    h: int
    bp_sigma_sq: float
    entries: tuple[HypothesisPvalue, ...]
    candidates: tuple[str, ...] = DEFAULT_CANDIDATES

    def get(self, hyp) -> HypothesisPvalue:
        for e in self.entries:
            if e.hypothesis == hyp:
                return e
        raise KeyError(hyp)

    def to_rows(self):
        names = self.variable_names
        for e in self.entries:
            yield {
                "effect": names[e.hypothesis.effect],
                "cause": names[e.hypothesis.cause],
                "sign": e.hypothesis.sign_symbol,
                "p_bp": repr(e.p_bp),
                "p_mb": repr(e.p_mb),
                "model_kind": e.best.model.name,
                "aic": repr(e.best.aic),
            }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.to_rows())
        return buf.getvalue()

    def to_dict(self) -> dict:
        names = self.variable_names
        return {
            "variables": list(names),
            "h": self.h,
            "bp_sigma_sq": self.bp_sigma_sq,
            "candidates": list(self.candidates),
            "hypotheses": [
                {
                    "label": e.hypothesis.label,
                    "effect": names[e.hypothesis.effect],
                    "cause": names[e.hypothesis.cause],
                    "sign": e.hypothesis.sign_symbol,
                    "p_bp": e.p_bp,
                    "p_mb": e.p_mb,
                    "model_kind": e.best.model.name,
                    "aic": e.best.aic,
                    "flags": list(e.flags),
                    "best": e.best.to_dict(),
                    "candidate_fits": [f.to_dict() for f in e.fits],
                }
                for e in self.entries
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def compute_report(table, h: int = 3, candidates=DEFAULT_CANDIDATES) -> PvalueReport:
    """p-values for every hypothesis of a :class:`~mblingam.msboot.BpCountTable`."""
    sig = table.plan.sigma_sq
    entries = []
    for k, hyp in enumerate(table.hypotheses):
        p_bp, p_mb, best, fits, flags = pvalues_for_counts(table.counts[k], table.q_effective, sig, h, candidates)
        entries.append(HypothesisPvalue(hyp, p_bp, p_mb, best, fits, flags))
    k = bp_scale_index(np.where(table.q_effective > 0, sig, np.inf))
    return PvalueReport(table.variable_names, h, float(sig[k]), tuple(entries), tuple(candidates))
