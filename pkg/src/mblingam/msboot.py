"""Multiscale bootstrap resampling and event counting.

For every scale ``d`` of a :class:`ScalePlan` the data columns are resampled
with replacement ``Q`` times at size ``n*_d``, LiNGAM is refitted on every
replicate and the signed pairwise hypotheses that hold are counted.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from mblingam.lingam import (
    DegenerateMatrixError,
    IcaConfig,
    RankDeficiencyError,
    _estimate_from_unmixing,
    _run_ica,
)
from mblingam.model import NEGATIVE, POSITIVE, DataMatrix, HypothesisId, all_hypotheses, indicator_matrix
from mblingam.parallel import ordered_map
from mblingam.seeding import rng_for

log = logging.getLogger(__name__)

# a scale with fewer successful replicates than this fraction of Q aborts the run
MIN_EFFECTIVE_FRACTION = 0.5

COUNT_CSV_COLUMNS = ("effect", "cause", "sign", "scale_index", "sigma_sq", "n_star", "count", "Q_effective")


class ScalePlanError(ValueError):
    pass


class BootstrapFailure(RuntimeError):
    """Too many replicates failed at some scale."""


class CountTableFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleEntry:
    n_star: int
    sigma_sq: float


@dataclass(frozen=True)
class ScalePlan:
    entries: tuple[ScaleEntry, ...]
    n: int
    Q: int

    def __post_init__(self):
        if len(self.entries) < 2:
            raise ScalePlanError("a scale plan needs at least 2 scales")
        if self.Q < 1:
            raise ScalePlanError("Q must be >= 1")
        prev = -math.inf
        for e in self.entries:
            if e.n_star < 2:
                raise ScalePlanError(f"bootstrap sample size {e.n_star} < 2")
            if not math.isclose(e.sigma_sq, self.n / e.n_star, rel_tol=1e-9):
                raise ScalePlanError("sigma_sq must equal n / n_star")
            if not e.sigma_sq > prev:
                raise ScalePlanError("scales must be strictly increasing")
            prev = e.sigma_sq

    @property
    def D(self) -> int:
        return len(self.entries)

    @property
    def n_star(self) -> np.ndarray:
        return np.array([e.n_star for e in self.entries], dtype=np.int64)

    @property
    def sigma_sq(self) -> np.ndarray:
        return np.array([e.sigma_sq for e in self.entries])

    @classmethod
    def from_sizes(cls, n: int, n_stars, Q: int) -> "ScalePlan":
        sizes = sorted(set(int(v) for v in n_stars), reverse=True)
        return cls(tuple(ScaleEntry(s, n / s) for s in sizes), int(n), int(Q))


def build_scale_plan(n: int, sigma_sq_min: float = 1 / 9, sigma_sq_max: float = 9.0, D: int = 13, Q: int = 1000) -> ScalePlan:
    """Geometric ladder of ``D`` target scales over ``[sigma_sq_min, sigma_sq_max]``.

    Each target is turned into the nearest integer sample size ``n* >= 2`` and
    the scale is recomputed as ``n / n*``; sizes hit twice are kept once.
    """
    if not 0 < sigma_sq_min < sigma_sq_max:
        raise ScalePlanError(f"invalid scale range [{sigma_sq_min}, {sigma_sq_max}]")
    if D < 2:
        raise ScalePlanError("need D >= 2 scales")
    if n / sigma_sq_max < 2:
        raise ScalePlanError(f"n / sigma_sq_max = {n / sigma_sq_max:.3g} < 2")
    targets = np.geomspace(sigma_sq_min, sigma_sq_max, D)
    sizes = [max(2, math.floor(n / t + 0.5)) for t in targets]
    if len(set(sizes)) < 2:
        raise ScalePlanError("fewer than 2 distinct bootstrap sample sizes after rounding")
    return ScalePlan.from_sizes(n, sizes, Q)


def resample(data: DataMatrix, n_star: int, seed: int) -> DataMatrix:
    """Draw ``n_star`` columns uniformly with replacement."""
    if n_star < 2:
        raise ValueError("n_star must be >= 2")
    idx = np.random.default_rng(np.random.SeedSequence(int(seed))).integers(0, data.n, n_star)
    return DataMatrix(data.values[:, idx], data.variable_names)


@dataclass
class BpCountTable:
    """Event counts ``counts[h, d]`` for hypothesis ``hypotheses[h]`` at scale ``d``."""

    plan: ScalePlan
    hypotheses: list[HypothesisId]
    counts: np.ndarray
    q_effective: np.ndarray
    variable_names: tuple[str, ...]
    failures: np.ndarray = field(default=None)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.q_effective = np.asarray(self.q_effective, dtype=np.int64)
        if self.failures is None:
            self.failures = self.plan.Q - self.q_effective
        if self.counts.shape != (len(self.hypotheses), self.plan.D):
            raise ValueError("counts shape does not match hypotheses x scales")
        if np.any(self.counts < 0) or np.any(self.counts > self.q_effective[None, :]):
            raise ValueError("counts must lie in [0, Q_effective]")

    @property
    def m(self) -> int:
        return len(self.variable_names)

    def index(self, h: HypothesisId) -> int:
        return self.hypotheses.index(h)

    def row(self, h: HypothesisId) -> np.ndarray:
        return self.counts[self.index(h)]

    def fractions(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.counts / self.q_effective[None, :]

    # ---- serialisation -------------------------------------------------

    def to_rows(self):
        names = self.variable_names
        for k, h in enumerate(self.hypotheses):
            for d, e in enumerate(self.plan.entries):
                yield {
                    "effect": names[h.effect],
                    "cause": names[h.cause],
                    "sign": h.sign_symbol,
                    "scale_index": d + 1,
                    "sigma_sq": repr(float(e.sigma_sq)),
                    "n_star": e.n_star,
                    "count": int(self.counts[k, d]),
                    "Q_effective": int(self.q_effective[d]),
                }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=COUNT_CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.to_rows())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "variables": list(self.variable_names),
            "n": self.plan.n,
            "Q": self.plan.Q,
            "scales": [
                {"scale_index": d + 1, "sigma_sq": e.sigma_sq, "n_star": e.n_star, "Q_effective": int(self.q_effective[d])}
                for d, e in enumerate(self.plan.entries)
            ],
            "counts": [
                {
                    "effect": self.variable_names[h.effect],
                    "cause": self.variable_names[h.cause],
                    "sign": h.sign_symbol,
                    "counts": [int(c) for c in self.counts[k]],
                }
                for k, h in enumerate(self.hypotheses)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> "BpCountTable":
        try:
            names = tuple(obj["variables"])
            scales = sorted(obj["scales"], key=lambda s: s["scale_index"])
            plan = ScalePlan(
                tuple(ScaleEntry(int(s["n_star"]), float(s["sigma_sq"])) for s in scales),
                int(obj["n"]),
                int(obj["Q"]),
            )
            q_eff = [int(s["Q_effective"]) for s in scales]
            lookup = {v: i for i, v in enumerate(names)}
            hyps, rows = [], []
            for rec in obj["counts"]:
                sign = _parse_sign(rec["sign"])
                hyps.append(HypothesisId(lookup[rec["effect"]], lookup[rec["cause"]], sign))
                rows.append([int(c) for c in rec["counts"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise CountTableFormatError(f"malformed count table: {exc}") from exc
        try:
            return cls(plan, hyps, np.array(rows, dtype=np.int64).reshape(len(hyps), plan.D), q_eff, names)
        except ValueError as exc:
            raise CountTableFormatError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "BpCountTable":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CountTableFormatError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(obj)

    @classmethod
    def from_csv(cls, text: str) -> "BpCountTable":
        """Parse the CSV contract; variable order follows first appearance."""
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or tuple(reader.fieldnames) != COUNT_CSV_COLUMNS:
            raise CountTableFormatError(f"expected header {','.join(COUNT_CSV_COLUMNS)}")
        names: list[str] = []
        scales: dict[int, tuple[float, int, int]] = {}
        cells: dict[tuple[str, str, int], dict[int, int]] = {}
        for lineno, rec in enumerate(reader, start=2):
            try:
                effect, cause = rec["effect"], rec["cause"]
                sign = _parse_sign(rec["sign"])
                d = int(rec["scale_index"])
                sig = float(rec["sigma_sq"])
                n_star = int(rec["n_star"])
                count = int(rec["count"])
                q_eff = int(rec["Q_effective"])
            except (TypeError, ValueError) as exc:
                raise CountTableFormatError(f"line {lineno}: {exc}") from exc
            if effect == cause:
                raise CountTableFormatError(f"line {lineno}: effect equals cause")
            for v in (effect, cause):
                if v not in names:
                    names.append(v)
            prev = scales.setdefault(d, (sig, n_star, q_eff))
            if prev != (sig, n_star, q_eff):
                raise CountTableFormatError(f"line {lineno}: inconsistent data for scale {d}")
            key = (effect, cause, sign)
            if d in cells.setdefault(key, {}):
                raise CountTableFormatError(f"line {lineno}: duplicate row")
            cells[key][d] = count
        if not cells:
            raise CountTableFormatError("count table has no rows")
        order = sorted(scales)
        if order != list(range(1, len(order) + 1)):
            raise CountTableFormatError("scale_index values must be 1..D")
        entries = tuple(ScaleEntry(scales[d][1], scales[d][0]) for d in order)
        n = round(float(np.median([e.sigma_sq * e.n_star for e in entries])))
        q_eff = [scales[d][2] for d in order]
        try:
            plan = ScalePlan(entries, n, max(q_eff))
        except ScalePlanError as exc:
            raise CountTableFormatError(str(exc)) from exc
        lookup = {v: i for i, v in enumerate(names)}
        hyps, rows = [], []
        for (effect, cause, sign), per_scale in cells.items():
            if sorted(per_scale) != order:
                raise CountTableFormatError(f"hypothesis {effect}<-{cause} missing scales")
            hyps.append(HypothesisId(lookup[effect], lookup[cause], sign))
            rows.append([per_scale[d] for d in order])
        try:
            return cls(plan, hyps, np.array(rows, dtype=np.int64), q_eff, tuple(names))
        except ValueError as exc:
            raise CountTableFormatError(str(exc)) from exc


def _parse_sign(s) -> int:
    if s in ("+", "positive", 1, "1"):
        return POSITIVE
    if s in ("-", "negative", -1, "-1"):
        return NEGATIVE
    raise ValueError(f"bad sign {s!r}")


def _count_scale(values, n_star, d, Q, cfg, master_seed):
    """Counts ``(m, m, 2)`` and the number of failed replicates for one scale."""
    m, n = values.shape
    tally = np.zeros((m, m, 2), dtype=np.int64)
    failed = 0
    for q in range(Q):
        # one stream per replicate: resampling indices first, then ICA restarts
        rng = rng_for(master_seed, d, q)
        idx = rng.integers(0, n, n_star)
        inits = rng.standard_normal((cfg.restarts, m, m))
        try:
            ica = _run_ica(values, idx, inits, cfg)
            order, b_hat = _estimate_from_unmixing(ica.unmixing)
        except (RankDeficiencyError, DegenerateMatrixError):
            failed += 1
            continue
        tally += indicator_matrix(order.position(), b_hat.b)
    return tally, failed


def count_events(
    data: DataMatrix,
    plan: ScalePlan,
    cfg: IcaConfig = IcaConfig(),
    master_seed: int = 0,
    threads: int = 1,
) -> BpCountTable:
    """Bootstrap-event counts for every signed pairwise hypothesis and scale.

    Replicate ``q`` of scale ``d`` draws its randomness from
    ``(master_seed, d, q)`` alone, so the table is the same for any ``threads``.
    """
    if plan.n != data.n:
        raise ScalePlanError(f"plan built for n={plan.n}, data has n={data.n}")
    values = np.ascontiguousarray(data.values)
    tasks = [(values, e.n_star, d, plan.Q, cfg, master_seed) for d, e in enumerate(plan.entries)]
    results = ordered_map(_count_scale, tasks, threads)

    hyps = all_hypotheses(data.m)
    counts = np.zeros((len(hyps), plan.D), dtype=np.int64)
    failures = np.zeros(plan.D, dtype=np.int64)
    for d, (tally, failed) in enumerate(results):
        failures[d] = failed
        for k, h in enumerate(hyps):
            counts[k, d] = tally[h.effect, h.cause, 0 if h.sign == POSITIVE else 1]
    q_eff = plan.Q - failures
    if failures.any():
        log.warning("failed bootstrap replicates per scale: %s", failures.tolist())
    bad = np.flatnonzero(q_eff < MIN_EFFECTIVE_FRACTION * plan.Q)
    if bad.size:
        raise BootstrapFailure(f"too many failed replicates at scales {(bad + 1).tolist()}")
    return BpCountTable(plan, hyps, counts, q_eff, data.variable_names, failures)
