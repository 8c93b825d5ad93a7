"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The calibration criteria (1 and 2) share a single run of the desk-2var-b0
preset at master seed 0, which takes roughly half an hour on one core. Set
MBLINGAM_ACCEPTANCE_THREADS to spread it over more processes; the result does
not depend on the worker count.
"""
import itertools
import math
import os

import numpy as np
import pytest

from conftest import record_criterion
from mblingam.cli import main
from mblingam.lingam import IcaConfig, lingam_fit, permute_rows_nonzero_diag
from mblingam.parallel import default_threads
from mblingam.psifit import PsiModel, extrapolate_pvalue, fit_binomial_ml, nll_and_grad, normal_cdf
from mblingam.seeding import derive_seed
from mblingam.simulate import (
    generate_dataset,
    implied_covariance,
    preset,
    run_experiment,
    six_variable_model,
    two_variable_model,
)

THREADS = int(os.environ.get("MBLINGAM_ACCEPTANCE_THREADS", default_threads()))

# criterion 7: recovery fraction seen in the pilot (100 of 100 runs at seeds
# derived from 7), less a margin of 5 runs; never below the 0.8 floor
RECOVERY_PILOT = 1.00
RECOVERY_THRESHOLD = max(0.8, RECOVERY_PILOT - 0.05)


def check(number, title, passed, detail):
    record_criterion(number, title, bool(passed), detail)
    assert passed, detail


@pytest.fixture(scope="module")
def desk_b0():
    cfg = preset("desk-2var-b0", master_seed=0)
    return run_experiment(cfg, threads=THREADS)


def test_criterion_1_calibration_improvement(desk_b0):
    ks_bp, ks_mb = desk_b0.ks_distance("H_21^+")
    check(
        1,
        "KS(p_mb) < KS(p_bp) for H_21^+ on desk-2var-b0",
        ks_mb < ks_bp,
        f"KS(mb)={ks_mb:.4f} KS(bp)={ks_bp:.4f} over {len(desk_b0.dataset_index)} datasets",
    )


def test_criterion_2_rejection_rate(desk_b0):
    _, r_bp, r_mb = desk_b0.rejection_curve("H_21^+", [0.05])
    r_bp, r_mb = float(r_bp[0]), float(r_mb[0])
    check(
        2,
        "Prob{p_mb<0.05} in [0.01, 0.12] and below Prob{p_bp<0.05}",
        0.01 <= r_mb <= 0.12 and r_bp > r_mb,
        f"Prob(mb<.05)={r_mb:.3f} Prob(bp<.05)={r_bp:.3f}",
    )


def test_criterion_3_h1_reproduces_bootstrap_probability():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        q = int(rng.integers(1, 5001))
        c = int(rng.integers(0, q + 1))
        fit = fit_binomial_ml([c], [q], [1.0], "poly", 1)
        worst = max(worst, abs(extrapolate_pvalue(fit, 1) - c / q))
    check(3, "poly h=1 at sigma^2=1 reproduces C/Q", worst <= 1e-10, f"max error {worst:.2e} over 1000 tables")


def test_criterion_4_polynomial_taylor_exactness():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(2000):
        beta = rng.normal(0, 1.5, int(rng.integers(1, 4)))
        want = normal_cdf(-np.polyval(beta[::-1], -1.0))
        worst = max(worst, abs(extrapolate_pvalue(PsiModel("poly", tuple(beta)), 3) - want))
    check(4, "h=3 extrapolation of degree <= 2 poly equals Phi(-psi(-1))", worst <= 1e-12, f"max error {worst:.2e}")


def _rel_grad_error(kind, beta, c, q, s, step=1e-6):
    _, g = nll_and_grad(kind, beta, c, q, s)
    fd = np.empty_like(beta)
    for k in range(len(beta)):
        e = np.zeros_like(beta)
        e[k] = step
        fd[k] = (nll_and_grad(kind, beta + e, c, q, s)[0] - nll_and_grad(kind, beta - e, c, q, s)[0]) / (2 * step)
    return float(np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd))))


def test_criterion_5_gradient_correctness():
    rng = np.random.default_rng(5)
    s = 1000.0 / np.array([9000, 6240, 4327, 3000, 2080, 1442, 1000, 693, 481, 333, 231, 160, 111])
    worst = {}
    for kind in ("poly", "sing"):
        worst[kind] = 0.0
        for _ in range(100):
            h = int(rng.integers(1, 5)) if kind == "poly" else int(rng.integers(3, 5))
            beta = rng.normal(0, 0.7, h)
            if kind == "sing":
                beta[-1] = rng.uniform(0.05, 0.95)
            q = rng.integers(1, 2000, s.size)
            c = rng.integers(0, q + 1)
            worst[kind] = max(worst[kind], _rel_grad_error(kind, beta, c, q, s))
    ok = max(worst.values()) < 1e-6
    check(5, "analytic NLL gradients match central differences", ok, f"max rel error poly={worst['poly']:.1e} sing={worst['sing']:.1e}")


def _brute_force_min(w):
    m = w.shape[0]
    perms = np.array(list(itertools.permutations(range(m))))
    with np.errstate(divide="ignore"):
        inv = 1.0 / np.abs(w)
    return float(inv[perms, np.arange(m)].sum(axis=1).min())


def test_criterion_6_permutation_oracle():
    worst = 0.0
    for m in range(2, 7):
        rng = np.random.default_rng(60 + m)
        for _ in range(1000):
            w = rng.normal(size=(m, m))
            _, wp = permute_rows_nonzero_diag(w)
            got = float(np.sum(1.0 / np.abs(np.diag(wp))))
            want = _brute_force_min(w)
            worst = max(worst, abs(got - want) / want)
    check(6, "Hungarian permutation equals exhaustive minimum, m = 2..6", worst <= 1e-12, f"max rel gap {worst:.1e} over 5000 matrices")


def test_criterion_7_lingam_recovery():
    b = six_variable_model(0.5)
    edges = list(zip(*np.nonzero(b)))
    hits = 0
    for k in range(100):
        data = generate_dataset(b, 1000, seed=derive_seed(7, k))
        pos = lingam_fit(data, IcaConfig(seed=derive_seed(7, k, 1))).order.position()
        hits += all(pos[j] < pos[i] for i, j in edges)
    frac = hits / 100
    check(7, "six-variable b=0.5 order recovery", frac >= RECOVERY_THRESHOLD, f"{hits}/100 runs, threshold {RECOVERY_THRESHOLD:.2f}")


MODELS_8 = {
    "2var b=0": (two_variable_model(0.0), True),
    "2var b=0.01": (two_variable_model(0.01), True),
    "2var b=0.1": (two_variable_model(0.1), True),
    "6var b=0": (six_variable_model(0.0), False),
    "6var b=0.5": (six_variable_model(0.5), False),
}


def test_criterion_8_generator_covariance():
    n = 100_000
    worst = 0.0
    details = []
    for k, (label, (b, cyclic)) in enumerate(MODELS_8.items()):
        x = generate_dataset(b, n, seed=derive_seed(8, k), allow_cyclic=cyclic).values
        x = x - x.mean(axis=1, keepdims=True)
        cov = x @ x.T / n
        # standard error of each sample covariance from the per-sample products
        se = np.sqrt((x[:, None, :] * x[None, :, :]).var(axis=2) / n)
        iu = np.triu_indices(b.shape[0])
        z = np.abs(cov - implied_covariance(b))[iu] / se[iu]
        worst = max(worst, float(z.max()))
        details.append(f"{label}: {z.max():.2f}")
    check(8, "sample covariance within 3 SE of (I-B)^-1 2I (I-B)^-T", worst < 3.0, "max |z| " + ", ".join(details))


def _outputs(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism_across_threads(tmp_path):
    d = generate_dataset(six_variable_model(0.5), 500, seed=9)
    data_csv = tmp_path / "data.csv"
    np.savetxt(data_csv, d.values.T, delimiter=",", header=",".join(f"v{i}" for i in range(1, 7)), comments="", fmt="%.17g")
    small = ["--replicates", "20", "--num-scales", "4", "--restarts", "3", "--seed", "11"]
    runs = {}
    for threads in ("1", "2", "4"):
        out = tmp_path / f"t{threads}"
        assert main(["analyze", str(data_csv), "-o", str(out / "analyze"), "--threads", threads] + small) == 0
        assert main(["fit", str(out / "analyze" / "counts.csv"), "-o", str(out / "fit"), "--threads", threads]) == 0
        sim = ["simulate", "--preset", "desk-2var-b01", "--datasets", "6", "-o", str(out / "simulate"), "--threads", threads]
        assert main(sim + small) == 0
        runs[threads] = _outputs(out)
    same = runs["1"] == runs["2"] == runs["4"]
    check(9, "byte-identical CLI outputs for --threads 1, 2, 4", same and len(runs["1"]) == 9, f"{len(runs['1'])} files compared")
