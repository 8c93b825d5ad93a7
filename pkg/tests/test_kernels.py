import os
import subprocess
import sys

import numpy as np
import pytest

from mblingam import kernels
from mblingam._accel import HAVE_NUMBA
from mblingam.lingam import GAUSS_MOMENTS, restart_inits
from mblingam.simulate import generate_dataset, six_variable_model, two_variable_model

GREF = GAUSS_MOMENTS["tanh"][0]


def test_expneg_accuracy():
    a = np.concatenate([np.linspace(0.0, kernels.EXP_ARG_CAP, 200001), [1e-300, 1e-8, 0.5]])
    rel = np.abs(kernels.expneg_nb(a) / np.exp(-a) - 1.0)
    assert rel.max() < 1e-12


def test_log1p_unit_accuracy():
    e = np.concatenate([np.linspace(0.0, 1.0, 200001)[1:], [1e-300, 1e-12, 1e-5]])
    rel = np.abs(kernels.log1p_unit_nb(e) / np.log1p(e) - 1.0)
    assert rel.max() < 1e-12
    assert kernels.log1p_unit_nb(np.zeros(1))[0] == 0.0


@pytest.mark.parametrize("nonlin", [kernels.TANH, kernels.CUBE])
def test_objective_backends_agree(nonlin):
    rng = np.random.default_rng(4)
    z = rng.laplace(size=(3, 2000))
    w = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    gref = GREF if nonlin == kernels.TANH else 0.75
    a = kernels._objective_nb(w, np.ascontiguousarray(z), nonlin, gref)
    b = kernels._objective_np(w, z, nonlin, gref)
    assert a == pytest.approx(b, rel=1e-10)


@pytest.mark.parametrize("nonlin", [kernels.TANH, kernels.CUBE])
def test_update_backends_agree(nonlin):
    rng = np.random.default_rng(5)
    z = np.ascontiguousarray(rng.laplace(size=(4, 3000)))
    w = np.linalg.qr(rng.normal(size=(4, 4)))[0]
    np.testing.assert_allclose(kernels._ica_update_nb(w, z, nonlin), kernels._ica_update_np(w, z, nonlin), atol=1e-11)


@pytest.mark.parametrize(
    "b, n",
    [(two_variable_model(0.0), 1000), (six_variable_model(0.5), 1000), (two_variable_model(0.1), 333)],
)
def test_fit_unmixing_backends_agree(b, n):
    data = generate_dataset(b, n, seed=11, allow_cyclic=True)
    values = np.ascontiguousarray(data.values)
    idx = np.random.default_rng(1).integers(0, n, n)
    inits = restart_inits(2, 8, data.m)
    call = (values, idx, inits, 1000, 1e-7, kernels.TANH, GREF)
    s1, w1, o1, c1, r1 = kernels.fit_unmixing_nb(*call)
    s2, w2, o2, c2, r2 = kernels.fit_unmixing_np(*call)
    assert s1 == s2 == kernels.STATUS_OK
    assert c1 and c2
    assert r1 == r2
    assert o1 == pytest.approx(o2, rel=1e-6)
    np.testing.assert_allclose(w1, w2, atol=1e-5)


def test_rank_deficient_status():
    x = np.random.default_rng(0).normal(size=300)
    values = np.ascontiguousarray(np.vstack([x, 2.0 * x]))
    idx = np.arange(300)
    inits = restart_inits(0, 2, 2)
    for fn in (kernels.fit_unmixing_nb, kernels.fit_unmixing_np):
        assert fn(values, idx, inits, 100, 1e-7, kernels.TANH, GREF)[0] == kernels.STATUS_RANK_DEFICIENT


def test_unmixing_whitens():
    data = generate_dataset(six_variable_model(0.5), 2000, seed=3)
    values = np.ascontiguousarray(data.values)
    idx = np.arange(data.n)
    w = kernels.fit_unmixing(values, idx, restart_inits(0, 4, 6), 1000, 1e-7, kernels.TANH, GREF)[1]
    x = values - values.mean(axis=1, keepdims=True)
    y = w @ x
    np.testing.assert_allclose(y @ y.T / data.n, np.eye(6), atol=1e-8)


def test_env_flag_selects_numpy_backend():
    code = "from mblingam import kernels, _accel; print(_accel.USE_NUMBA, kernels.fit_unmixing is kernels.fit_unmixing_np)"
    env = dict(os.environ, MBLINGAM_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.split() == ["False", "True"]
    env.pop("MBLINGAM_DISABLE_NUMBA")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.split() == [str(HAVE_NUMBA), str(not HAVE_NUMBA)]
