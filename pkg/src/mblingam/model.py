"""Domain types for linear acyclic structural equation models.

Variables are indexed from 0 inside the library. Human-facing labels such as
``H_21^+`` use 1-based indices, matching the usual notation ``x_1 .. x_m``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

# reconstruction residual allowed for (I - B)^-1
INVERSE_TOL = 1e-10


class SingularMatrixError(ValueError):
    """``I - B`` could not be inverted (cyclic or degenerate model)."""


class CyclicModelError(ValueError):
    """The connection matrix does not describe a DAG."""


@dataclass(frozen=True)
class DataMatrix:
    """Observations with variables in rows and samples in columns."""

    values: np.ndarray
    variable_names: tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float, order="C")
        if values.ndim != 2:
            raise ValueError("data must be a 2-d array (variables x samples)")
        m, n = values.shape
        if m < 2:
            raise ValueError(f"need at least 2 variables, got {m}")
        if n < m:
            raise ValueError(f"need at least as many samples as variables ({n} < {m})")
        if not np.all(np.isfinite(values)):
            raise ValueError("data contains non-finite entries")
        values.setflags(write=False)
        names = tuple(self.variable_names) or tuple(f"x{i + 1}" for i in range(m))
        if len(names) != m:
            raise ValueError(f"{len(names)} variable names for {m} variables")
        if len(set(names)) != m:
            raise ValueError("variable names must be unique")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "variable_names", names)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_samples(cls, rows, names: Sequence[str] = ()) -> "DataMatrix":
        """Build from a samples x variables table (one sample per row)."""
        return cls(np.asarray(rows, dtype=float).T, tuple(names))


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ConnectionMatrix:
    """Direct effects; ``b[i, j]`` is the effect of ``x_j`` on ``x_i``."""

    b: np.ndarray

    def __post_init__(self):
        b = np.array(self.b, dtype=float)
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ValueError("connection matrix must be square")
        if np.any(np.diag(b) != 0.0):
            raise ValueError("connection matrix must have a zero diagonal")
        object.__setattr__(self, "b", _readonly(b))

    @property
    def m(self) -> int:
        return self.b.shape[0]

    def is_acyclic(self) -> bool:
        return topological_order(self.b) is not None

    def permuted(self, perm) -> "ConnectionMatrix":
        """Relabel variables: new variable ``a`` is old variable ``perm[a]``."""
        perm = np.asarray(perm)
        return ConnectionMatrix(self.b[np.ix_(perm, perm)])


@dataclass(frozen=True)
class TotalEffectMatrix:
    """``a = (I - B)^-1``; ``a[j, i]`` is the total effect of ``x_i`` on ``x_j``."""

    a: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", _readonly(self.a))


@dataclass(frozen=True)
class CausalOrder:
    """Variables listed from most upstream to most downstream."""

    order: tuple[int, ...]

    def __post_init__(self):
        order = tuple(int(v) for v in self.order)
        if sorted(order) != list(range(len(order))):
            raise ValueError(f"not a permutation: {order}")
        object.__setattr__(self, "order", order)

    @property
    def m(self) -> int:
        return len(self.order)

    def position(self) -> np.ndarray:
        """``k(i)``: position of every variable in the order (0-based)."""
        pos = np.empty(self.m, dtype=np.int64)
        pos[list(self.order)] = np.arange(self.m)
        return pos

    def precedes(self, j: int, i: int) -> bool:
        """True when ``x_j`` comes before ``x_i``."""
        pos = self.position()
        return bool(pos[j] < pos[i])


POSITIVE = 1
NEGATIVE = -1


@dataclass(frozen=True, order=True)
class HypothesisId:
    """``x_effect`` is directly caused by ``x_cause`` with the given sign."""

    effect: int
    cause: int
    sign: int = POSITIVE

    def __post_init__(self):
        if self.effect == self.cause:
            raise ValueError("effect and cause must differ")
        if self.sign not in (POSITIVE, NEGATIVE):
            raise ValueError(f"sign must be +1 or -1, got {self.sign!r}")

    @property
    def sign_symbol(self) -> str:
        return "+" if self.sign == POSITIVE else "-"

    @property
    def label(self) -> str:
        return f"H_{self.effect + 1}{self.cause + 1}^{self.sign_symbol}"

    @classmethod
    def parse(cls, label: str) -> "HypothesisId":
        """Inverse of :attr:`label` for single-digit indices, e.g. ``H_21^+``."""
        body = label.strip()
        if not body.startswith("H_") or "^" not in body:
            raise ValueError(f"bad hypothesis label {label!r}")
        idx, sym = body[2:].split("^")
        if len(idx) != 2 or sym not in "+-" or len(sym) != 1:
            raise ValueError(f"bad hypothesis label {label!r}")
        return cls(int(idx[0]) - 1, int(idx[1]) - 1, POSITIVE if sym == "+" else NEGATIVE)


def all_hypotheses(m: int) -> list[HypothesisId]:
    """The ``2 m (m - 1)`` signed pairwise hypotheses in a fixed order."""
    return [
        HypothesisId(i, j, s)
        for i in range(m)
        for j in range(m)
        if i != j
        for s in (POSITIVE, NEGATIVE)
    ]


def topological_order(b) -> tuple[int, ...] | None:
    """A causal order compatible with the support of ``b``, or None if cyclic."""
    support = np.asarray(b) != 0.0
    m = support.shape[0]
    remaining = list(range(m))
    order = []
    while remaining:
        # a source has no incoming edge from the remaining variables
        sources = [i for i in remaining if not support[i, remaining].any()]
        if not sources:
            return None
        order.append(sources[0])
        remaining.remove(sources[0])
    return tuple(order)


def total_effects(b: ConnectionMatrix) -> TotalEffectMatrix:
    """Invert ``I - B`` by LU with partial pivoting and check the residual."""
    m = b.m
    eye = np.eye(m)
    i_minus_b = eye - b.b
    try:
        with warnings.catch_warnings():
            # exact singularity is reported below as an error instead
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(i_minus_b, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularMatrixError(str(exc)) from exc
    if np.any(np.diag(lu[0]) == 0.0):
        raise SingularMatrixError("I - B is singular")
    a = scipy.linalg.lu_solve(lu, eye)
    resid = np.max(np.abs(a @ i_minus_b - eye))
    if not resid < INVERSE_TOL:
        raise SingularMatrixError(f"I - B is ill-conditioned (residual {resid:.3g})")
    return TotalEffectMatrix(a)


@dataclass(frozen=True)
class LingamEstimate:
    """Output of one LiNGAM fit."""

    order: CausalOrder
    b_hat: ConnectionMatrix
    ica_objective: float
    restarts_used: int
    converged: bool = True
    best_restart: int = 0
    approximate_order: bool = False
    diagnostics: dict = field(default_factory=dict, compare=False)


def hypothesis_indicator(est: LingamEstimate, h: HypothesisId) -> int:
    """1 if ``x_cause`` precedes ``x_effect`` and the coefficient has ``h.sign``.

    An estimated coefficient that is exactly zero matches neither sign.
    """
    if not est.order.precedes(h.cause, h.effect):
        return 0
    coef = est.b_hat.b[h.effect, h.cause]
    return int(np.sign(coef) == h.sign)


def indicator_matrix(position: np.ndarray, b_hat: np.ndarray) -> np.ndarray:
    """All indicators at once: ``out[i, j, s]`` for sign index s (0: +, 1: -).

    Vectorised twin of :func:`hypothesis_indicator` used in the bootstrap loop.
    """
    before = position[None, :] < position[:, None]
    out = np.empty(b_hat.shape + (2,), dtype=np.int64)
    out[..., 0] = before & (b_hat > 0.0)
    out[..., 1] = before & (b_hat < 0.0)
    return out
