import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from mblingam.lingam import IcaConfig
from mblingam.model import HypothesisId, all_hypotheses
from mblingam.msboot import (
    BootstrapFailure,
    BpCountTable,
    CountTableFormatError,
    ScaleEntry,
    ScalePlan,
    ScalePlanError,
    build_scale_plan,
    count_events,
    resample,
)
from mblingam.simulate import generate_dataset, two_variable_model

FAST = IcaConfig(restarts=2)


def test_default_plan_n1000():
    plan = build_scale_plan(1000)
    assert plan.D == 13 and plan.Q == 1000
    assert plan.n_star.tolist() == [9000, 6240, 4327, 3000, 2080, 1442, 1000, 693, 481, 333, 231, 160, 111]
    assert plan.sigma_sq[0] == pytest.approx(1 / 9)
    assert plan.sigma_sq[6] == 1.0
    assert plan.sigma_sq[-1] == pytest.approx(1000 / 111)


def test_plan_deduplicates_rounded_sizes():
    # the two largest targets (4 and 3.37) both round to n* = 3
    plan = build_scale_plan(10, 1 / 9, 4.0, 13, Q=10)
    assert plan.n_star.tolist() == [90, 67, 50, 37, 27, 20, 15, 11, 8, 6, 5, 3]


@settings(max_examples=100, deadline=None)
@given(st.integers(20, 100_000), st.integers(2, 30))
def test_plan_invariants(n, d):
    plan = build_scale_plan(n, D=d, Q=7)
    s = plan.sigma_sq
    assert np.all(np.diff(s) > 0)
    assert np.all(plan.n_star >= 2)
    np.testing.assert_allclose(s * plan.n_star, n, rtol=1e-12)
    assert plan.D <= d


def test_plan_errors():
    with pytest.raises(ScalePlanError):
        build_scale_plan(10, 1.0, 9.0)
    with pytest.raises(ScalePlanError):
        build_scale_plan(1000, 2.0, 1.0)
    with pytest.raises(ScalePlanError):
        ScalePlan((ScaleEntry(100, 1.0),), 100, 10)
    with pytest.raises(ScalePlanError):
        ScalePlan((ScaleEntry(100, 1.0), ScaleEntry(50, 3.0)), 100, 10)


def test_resample_uniform():
    data = generate_dataset(two_variable_model(0.0), 50, seed=0, allow_cyclic=True)
    data_idx = type(data)(np.vstack([np.arange(50.0), np.arange(50.0) ** 2]))
    out = resample(data_idx, 100_000, seed=3)
    counts = np.bincount(out.values[0].astype(int), minlength=50)
    assert scipy.stats.chisquare(counts).pvalue > 1e-3
    np.testing.assert_array_equal(out.values[1], out.values[0] ** 2)
    np.testing.assert_array_equal(resample(data, 77, 5).values, resample(data, 77, 5).values)


@pytest.fixture(scope="module")
def null_table():
    data = generate_dataset(two_variable_model(0.0), 1000, seed=21, allow_cyclic=True)
    plan = ScalePlan.from_sizes(1000, [3000, 1000, 333], 300)
    return data, plan, count_events(data, plan, FAST, master_seed=4)


def test_pair_counts_partition_replicates(null_table):
    # exactly one direction and one sign per unordered pair per replicate
    _, _, table = null_table
    for i in range(2):
        for j in range(i + 1, 2):
            total = sum(table.row(HypothesisId(a, c, s)) for a, c in ((i, j), (j, i)) for s in (1, -1))
            np.testing.assert_array_equal(total, table.q_effective)


def test_null_model_expected_fractions_near_quarter():
    # symmetry holds for the expectation over datasets, a single dataset can be
    # far from it; 100 datasets x 20 replicates keep the standard error near 0.03
    plan = ScalePlan.from_sizes(1000, [3000, 1000, 333], 20)
    total = np.zeros((4, 3))
    for k in range(100):
        data = generate_dataset(two_variable_model(0.0), 1000, seed=1000 + k, allow_cyclic=True)
        total += count_events(data, plan, FAST, master_seed=k).fractions()
    frac = total / 100
    assert np.all((frac > 0.15) & (frac < 0.35)), frac


def test_counts_independent_of_threads(null_table):
    data, plan, table = null_table
    again = count_events(data, plan, FAST, master_seed=4, threads=2)
    np.testing.assert_array_equal(again.counts, table.counts)
    other = count_events(data, plan, FAST, master_seed=5)
    assert not np.array_equal(other.counts, table.counts)


def test_strong_edge_dominates():
    data = generate_dataset(np.array([[0.0, 0.0], [0.8, 0.0]]), 1000, seed=2)
    plan = ScalePlan.from_sizes(1000, [1000, 500], 100)
    table = count_events(data, plan, IcaConfig())
    assert table.row(HypothesisId.parse("H_21^+"))[0] >= 90


def _split_entropy(fractions):
    f = np.where(fractions > 0, fractions, 1.0)
    return -(fractions * np.log(f)).sum(axis=0)


def test_split_entropy_grows_with_scale():
    plan = build_scale_plan(1000, Q=40)
    entropy = np.zeros(plan.D)
    for k in range(20):
        data = generate_dataset(two_variable_model(0.1), 1000, seed=500 + k, allow_cyclic=True)
        entropy += _split_entropy(count_events(data, plan, FAST, master_seed=k).fractions())
    rho = scipy.stats.spearmanr(plan.sigma_sq, entropy / 20).statistic
    assert rho > 0


def test_plan_data_mismatch():
    data = generate_dataset(two_variable_model(0.0), 500, seed=1, allow_cyclic=True)
    with pytest.raises(ScalePlanError):
        count_events(data, build_scale_plan(1000, Q=2), FAST)


def test_failed_replicates_abort():
    # a constant variable makes every resample rank deficient
    x = np.random.default_rng(0).laplace(size=200)
    data = type(generate_dataset(two_variable_model(0.0), 10, allow_cyclic=True))(np.vstack([x, np.ones(200)]))
    with pytest.raises(BootstrapFailure):
        count_events(data, ScalePlan.from_sizes(200, [200, 100], 5), FAST)


def _toy_table():
    plan = ScalePlan.from_sizes(100, [300, 100, 33], 20)
    hyps = all_hypotheses(3)
    rng = np.random.default_rng(0)
    q_eff = np.array([20, 19, 20])
    counts = rng.integers(0, 20, (len(hyps), 3)) % (q_eff[None, :] + 1)
    return BpCountTable(plan, hyps, counts, q_eff, ("a", "b", "c"))


def test_csv_roundtrip():
    t = _toy_table()
    back = BpCountTable.from_csv(t.to_csv())
    np.testing.assert_array_equal(back.counts, t.counts)
    np.testing.assert_array_equal(back.q_effective, t.q_effective)
    np.testing.assert_array_equal(back.plan.sigma_sq, t.plan.sigma_sq)
    assert back.hypotheses == t.hypotheses
    assert back.variable_names == t.variable_names
    assert back.to_csv() == t.to_csv()


def test_json_roundtrip():
    t = _toy_table()
    back = BpCountTable.from_json(t.to_json())
    np.testing.assert_array_equal(back.counts, t.counts)
    assert back.to_json() == t.to_json()


def test_csv_header_line():
    first = _toy_table().to_csv().splitlines()[:2]
    assert first[0] == "effect,cause,sign,scale_index,sigma_sq,n_star,count,Q_effective"
    assert first[1].startswith("a,b,+,1,0.3333333333333333,300,")


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda ls: ["effect,cause,sign"] + ls[1:], "header"),
        (lambda ls: ls[:3] + [ls[3].replace(",+,", ",?,")] + ls[4:], "line 4"),
        (lambda ls: ls[:2] + [ls[2].rsplit(",", 2)[0] + ",x,20"] + ls[3:], "line 3"),
        (lambda ls: ls + [ls[1]], "duplicate"),
        (lambda ls: ls[:1] + ls[2:], "missing scales"),
        (lambda ls: ls[:1], "no rows"),
    ],
)
def test_csv_schema_violations(mutate, message):
    lines = _toy_table().to_csv().splitlines()
    with pytest.raises(CountTableFormatError, match=message):
        BpCountTable.from_csv("\n".join(mutate(lines)) + "\n")


def test_count_exceeding_q_rejected():
    lines = _toy_table().to_csv().splitlines()
    parts = lines[1].split(",")
    parts[6] = "21"
    lines[1] = ",".join(parts)
    with pytest.raises(CountTableFormatError):
        BpCountTable.from_csv("\n".join(lines) + "\n")
