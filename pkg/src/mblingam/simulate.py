"""Synthetic LiNGAM data and the calibration experiment harness.

``run_experiment`` repeats the full procedure (generate, multiscale bootstrap,
fit, extrapolate) on many independent datasets drawn from one model and
summarises how the ordinary and multiscale p-values are distributed.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.stats

from mblingam.lingam import IcaConfig
from mblingam.model import (
    ConnectionMatrix,
    CyclicModelError,
    DataMatrix,
    HypothesisId,
    all_hypotheses,
    total_effects,
)
from mblingam.msboot import build_scale_plan, count_events
from mblingam.parallel import ordered_map
from mblingam.psifit import DEFAULT_CANDIDATES, compute_report
from mblingam.seeding import derive_seed

log = logging.getLogger(__name__)

# the run aborts when more than this fraction of datasets fail
MAX_FAILED_FRACTION = 0.10
DEFAULT_ALPHAS = tuple(round(0.01 * k, 2) for k in range(1, 100))


class ExperimentError(RuntimeError):
    pass


def _open_unit(rng, count):
    # uniform on the open interval (0, 1)
    return (rng.integers(0, 1 << 53, count) + 0.5) / float(1 << 53)


def sample_laplace(scale_b: float, count: int, seed=None, rng=None) -> np.ndarray:
    """Laplace(0, scale_b) draws by inverting the distribution function.

    The variance is ``2 * scale_b**2``.
    """
    if not scale_b > 0:
        raise ValueError("scale_b must be > 0")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(int(seed or 0)))
    u = _open_unit(rng, count) - 0.5
    return -scale_b * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def laplace_noise(variance: float = 2.0) -> Callable:
    """Noise sampler ``(rng, m, n) -> (m, n)`` with Laplace rows of the given variance."""
    scale = math.sqrt(variance / 2.0)

    def draw(rng, m, n):
        return sample_laplace(scale, m * n, rng=rng).reshape(m, n)

    return draw


def generate_dataset(b, n: int, noise_variance: float = 2.0, seed: int = 0, allow_cyclic: bool = False, sampler=None) -> DataMatrix:
    """``x = (I - B)^-1 e`` with independent external influences ``e``.

    ``B`` must describe a DAG unless ``allow_cyclic`` is set, in which case
    any ``B`` with invertible ``I - B`` is accepted (used for the symmetric
    two-variable boundary model).
    """
    bm = b if isinstance(b, ConnectionMatrix) else ConnectionMatrix(b)
    if not allow_cyclic and not bm.is_acyclic():
        raise CyclicModelError("connection matrix has a directed cycle")
    a = total_effects(bm).a
    draw = sampler or laplace_noise(noise_variance)
    e = draw(np.random.default_rng(np.random.SeedSequence(int(seed))), bm.m, n)
    return DataMatrix(a @ e)


def implied_covariance(b, noise_variance: float = 2.0) -> np.ndarray:
    """``(I - B)^-1 diag(v) (I - B)^-T`` for i.i.d. noise of variance ``v``."""
    bm = b if isinstance(b, ConnectionMatrix) else ConnectionMatrix(b)
    a = total_effects(bm).a
    return noise_variance * a @ a.T


def two_variable_model(b: float) -> np.ndarray:
    """Symmetric two-variable model: each variable feeds the other with weight b."""
    return np.array([[0.0, b], [b, 0.0]])


def six_variable_model(b: float) -> np.ndarray:
    """Six-variable DAG with every present edge weighted b."""
    mask = np.array(
        [
            [0, 0, 0, 0, 0, 0],
            [1, 0, 0, 0, 0, 0],
            [1, 0, 0, 0, 0, 0],
            [1, 1, 0, 0, 0, 0],
            [0, 1, 0, 1, 0, 0],
            [1, 1, 1, 0, 1, 0],
        ],
        dtype=float,
    )
    return b * mask


@dataclass(frozen=True)
class SimConfig:
    model: tuple[tuple[float, ...], ...]
    n: int = 1000
    datasets: int = 200
    noise_variance: float = 2.0
    sigma_sq_min: float = 1 / 9
    sigma_sq_max: float = 9.0
    num_scales: int = 13
    replicates: int = 500
    ica: IcaConfig = IcaConfig()
    h: int = 3
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHAS
    master_seed: int = 0
    focus: str = "H_21^+"
    allow_cyclic: bool = False
    candidates: tuple[str, ...] = DEFAULT_CANDIDATES
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "model", tuple(tuple(float(v) for v in row) for row in self.model))
        if not self.noise_variance > 0:
            raise ValueError("noise variance must be > 0")
        if self.datasets < 1:
            raise ValueError("datasets must be >= 1")
        if any(not 0 < a < 1 for a in self.alpha_grid):
            raise ValueError("alpha values must lie in (0, 1)")
        if self.h < 1:
            raise ValueError("h must be >= 1")
        b = ConnectionMatrix(np.array(self.model))
        if not self.allow_cyclic and not b.is_acyclic():
            raise CyclicModelError("model has a directed cycle; set allow_cyclic for feedback models")
        HypothesisId.parse(self.focus)

    @property
    def b(self) -> np.ndarray:
        return np.array(self.model)

    @property
    def m(self) -> int:
        return len(self.model)

    def plan(self):
        return build_scale_plan(self.n, self.sigma_sq_min, self.sigma_sq_max, self.num_scales, self.replicates)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = [list(r) for r in self.model]
        d["alpha_grid"] = list(self.alpha_grid)
        d["candidates"] = list(self.candidates)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "SimConfig":
        obj = dict(obj)
        if "ica" in obj:
            obj["ica"] = IcaConfig(**obj["ica"])
        for key in ("alpha_grid", "candidates"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _preset(name, b, m, datasets, q):
    if m == 2:
        model, focus, cyclic = two_variable_model(b), "H_21^+", b != 0.0
    else:
        model, focus, cyclic = six_variable_model(b), "H_32^+", False
    return SimConfig(model=model, datasets=datasets, replicates=q, focus=focus, allow_cyclic=cyclic, name=name)


_MODELS = {
    "2var-b0": (0.0, 2),
    "2var-b001": (0.01, 2),
    "2var-b01": (0.1, 2),
    "6var-b0": (0.0, 6),
    "6var-b05": (0.5, 6),
}

PRESETS = {}
for _key, (_b, _m) in _MODELS.items():
    PRESETS[f"paper-{_key}"] = _preset(f"paper-{_key}", _b, _m, 1280, 1000)
    PRESETS[f"desk-{_key}"] = _preset(f"desk-{_key}", _b, _m, 200, 500)


def preset(name: str, **overrides) -> SimConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class CalibrationReport:
    """p-values of every hypothesis over the datasets of one experiment."""

    config: SimConfig
    hypotheses: list[HypothesisId]
    dataset_index: np.ndarray
    p_bp: np.ndarray
    p_mb: np.ndarray
    failed: list[int] = field(default_factory=list)

    def column(self, hyp) -> int:
        if isinstance(hyp, str):
            hyp = HypothesisId.parse(hyp)
        return self.hypotheses.index(hyp)

    def pvalues(self, hyp) -> tuple[np.ndarray, np.ndarray]:
        k = self.column(hyp)
        return self.p_bp[:, k], self.p_mb[:, k]

    def rejection_curve(self, hyp, alphas=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(alpha, Prob{p_bp < alpha}, Prob{p_mb < alpha})``."""
        alphas = np.asarray(self.config.alpha_grid if alphas is None else alphas, dtype=float)
        bp, mb = self.pvalues(hyp)
        return alphas, (bp[:, None] < alphas).mean(axis=0), (mb[:, None] < alphas).mean(axis=0)

    def ks_distance(self, hyp) -> tuple[float, float]:
        bp, mb = self.pvalues(hyp)
        return ks_uniform(bp), ks_uniform(mb)

    def summary(self, hyp=None) -> dict:
        hyp = hyp or self.config.focus
        ks_bp, ks_mb = self.ks_distance(hyp)
        _, r_bp, r_mb = self.rejection_curve(hyp, [0.05])
        return {
            "hypothesis": hyp if isinstance(hyp, str) else hyp.label,
            "datasets": int(len(self.dataset_index)),
            "failed": len(self.failed),
            "ks_bp": ks_bp,
            "ks_mb": ks_mb,
            "reject_bp_0.05": float(r_bp[0]),
            "reject_mb_0.05": float(r_mb[0]),
        }

    # ---- serialisation -------------------------------------------------

    def raw_csv(self, hyps=None) -> str:
        hyps = [self.config.focus] if hyps is None else hyps
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "hypothesis", "p_bp", "p_mb"])
        for hyp in hyps:
            label = hyp if isinstance(hyp, str) else hyp.label
            bp, mb = self.pvalues(hyp)
            for ds, a, b in zip(self.dataset_index, bp, mb):
                w.writerow([int(ds), label, repr(float(a)), repr(float(b))])
        return buf.getvalue()

    def curves_csv(self, hyp=None) -> str:
        alphas, r_bp, r_mb = self.rejection_curve(hyp or self.config.focus)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["alpha", "prob_bp", "prob_mb"])
        for a, b, c in zip(alphas, r_bp, r_mb):
            w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        per_h = []
        for k, hyp in enumerate(self.hypotheses):
            alphas, r_bp, r_mb = self.rejection_curve(hyp)
            ks_bp, ks_mb = self.ks_distance(hyp)
            per_h.append(
                {
                    "hypothesis": hyp.label,
                    "p_bp": self.p_bp[:, k].tolist(),
                    "p_mb": self.p_mb[:, k].tolist(),
                    "ks_bp": ks_bp,
                    "ks_mb": ks_mb,
                    "rejection_bp": r_bp.tolist(),
                    "rejection_mb": r_mb.tolist(),
                }
            )
        return {
            "config": self.config.to_dict(),
            "datasets": self.dataset_index.tolist(),
            "failed": list(self.failed),
            "alpha_grid": list(self.config.alpha_grid),
            "summary": self.summary(),
            "hypotheses": per_h,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def ks_uniform(p) -> float:
    """Kolmogorov-Smirnov distance between a sample and Uniform(0, 1)."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return math.nan
    return float(scipy.stats.kstest(p, "uniform").statistic)


def dataset_seeds(master_seed: int, k: int) -> tuple[int, int]:
    """(data seed, bootstrap seed) for dataset ``k``."""
    return derive_seed(master_seed, k, 0), derive_seed(master_seed, k, 1)


def run_dataset(cfg: SimConfig, k: int):
    """p-values of all hypotheses on dataset ``k``; ``None`` on failure."""
    data_seed, boot_seed = dataset_seeds(cfg.master_seed, k)
    try:
        data = generate_dataset(cfg.b, cfg.n, cfg.noise_variance, data_seed, allow_cyclic=cfg.allow_cyclic)
        table = count_events(data, cfg.plan(), cfg.ica, boot_seed)
        report = compute_report(table, cfg.h, cfg.candidates)
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        log.warning("dataset %d failed: %s", k, exc)
        return None
    return (
        np.array([e.p_bp for e in report.entries]),
        np.array([e.p_mb for e in report.entries]),
    )


def run_experiment(cfg: SimConfig, threads: int = 1, progress=None) -> CalibrationReport:
    """Run the calibration experiment; deterministic given ``cfg.master_seed``."""
    hyps = all_hypotheses(cfg.m)
    results = []
    done = 0
    # chunks keep the pool busy while still allowing progress messages
    chunk = max(1, threads or 1) * 4
    for start in range(0, cfg.datasets, chunk):
        ks = range(start, min(cfg.datasets, start + chunk))
        results.extend(ordered_map(run_dataset, [(cfg, k) for k in ks], threads))
        done += len(ks)
        if progress is not None:
            progress(done, cfg.datasets)

    failed = [k for k, r in enumerate(results) if r is None]
    if len(failed) > MAX_FAILED_FRACTION * cfg.datasets:
        raise ExperimentError(f"{len(failed)} of {cfg.datasets} datasets failed")
    ok = [k for k, r in enumerate(results) if r is not None]
    p_bp = np.array([results[k][0] for k in ok]).reshape(len(ok), len(hyps))
    p_mb = np.array([results[k][1] for k in ok]).reshape(len(ok), len(hyps))
    return CalibrationReport(cfg, hyps, np.array(ok, dtype=np.int64), p_bp, p_mb, failed)
