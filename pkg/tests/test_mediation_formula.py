from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genius_nie.dataset import Dataset
from genius_nie.errors import EmptyCell, InvalidParameter, MissingLatentColumns, RankDeficient
from genius_nie.mediation_formula import (
    DiscreteMediationTable,
    nie_naive,
    nie_oracle,
    rr_nie_plugin,
)
from genius_nie.simulation import DgpConfig, generate_dataset


def test_naive_degenerate_design():
    a = np.array([0, 1, 0, 1, 1, 0], dtype=float)
    with pytest.raises(RankDeficient):
        nie_naive(Dataset(a.copy(), a.copy(), a))


@pytest.mark.slow
def test_naive_large_n_known_coefficients():
    rng = np.random.default_rng(0)
    n = 100_000
    a = (rng.random(n) < 0.4).astype(float)
    m = 3 * a + rng.standard_normal(n)
    y = 2 * m + a + rng.standard_normal(n)
    est = nie_naive(Dataset(y, m, a))
    assert abs(est.nie - 6) < 4 * est.se_delta


@pytest.mark.slow
def test_naive_consistent_under_exposure_outcome_confounding_only():
    data = generate_dataset(DgpConfig("a", 100_000, seed=3))
    est = nie_naive(data)
    assert abs(est.nie - 1) < 4 * est.se_delta


def test_naive_invariant_to_affine_covariate_recoding():
    rng = np.random.default_rng(1)
    n = 400
    c = rng.standard_normal((n, 2))
    a = (rng.random(n) < 0.5).astype(float)
    m = a + c @ [0.5, -1] + rng.standard_normal(n)
    y = m + a + c @ [1, 1] + rng.standard_normal(n)
    base = nie_naive(Dataset(y, m, a, c))
    recoded = nie_naive(Dataset(y, m, a, 3.0 * c + np.array([10.0, -4.0])))
    assert recoded.theta_m == pytest.approx(base.theta_m, rel=1e-10)
    assert recoded.beta_a == pytest.approx(base.beta_a, rel=1e-10)


def test_naive_product_and_bootstrap():
    data = generate_dataset(DgpConfig("a", 500, seed=2))
    est = nie_naive(data, 1.0, 0.0, inference="bootstrap", B=100, seed=1)
    assert est.nie == est.theta_m * est.beta_a
    assert est.method == "naive"
    assert est.bootstrap.n_failed == 0


def test_oracle_requires_latents():
    data = generate_dataset(DgpConfig("b", 200, seed=1))
    with pytest.raises(MissingLatentColumns):
        nie_oracle(Dataset(data.y, data.m, data.a))


def test_oracle_constant_latent_is_rank_deficient():
    data = generate_dataset(DgpConfig("b", 200, seed=1))
    with pytest.raises(RankDeficient):
        nie_oracle(Dataset(data.y, data.m, data.a, latent_u=np.zeros(200)))


def test_oracle_uses_true_mediator():
    data = generate_dataset(DgpConfig("d", 2000, seed=4))
    est = nie_oracle(data)
    swapped = nie_oracle(Dataset(data.y, data.true_m, data.a, latent_u=data.latent_u,
                                 latent_w=data.latent_w))
    assert est.nie == pytest.approx(swapped.nie, rel=1e-12)


@pytest.mark.slow
def test_oracle_large_n():
    data = generate_dataset(DgpConfig("b", 100_000, seed=6))
    est = nie_oracle(data)
    assert abs(est.nie - 1) < 4 * est.se_delta


# ---------------------------------------------------------------------------
# Risk-ratio plug-in
# ---------------------------------------------------------------------------


def _enumerate_rr(counts, ia, ias, ic):
    """Brute-force: loop over every cell with exact fractions."""
    _, nm, _, _ = counts.shape

    def n_cell(y, m, a):
        return int(counts[y, m, a, ic])

    def tot(a):
        return sum(n_cell(y, m, a) for y in (0, 1) for m in range(nm))

    num = den = Fraction(0)
    for m in range(nm):
        n_ma = n_cell(0, m, ia) + n_cell(1, m, ia)
        n_mas = n_cell(0, m, ias) + n_cell(1, m, ias)
        if n_ma == 0 and n_mas == 0:
            continue
        risk = Fraction(n_cell(1, m, ia), n_ma)
        num += risk * Fraction(n_ma, tot(ia))
        den += risk * Fraction(n_mas, tot(ias))
    return num / den


def test_rr_fixture_2x2x2():
    counts = np.zeros((2, 2, 2, 2), dtype=int)
    # [y, m, a, c]
    counts[:, :, :, 0] = [[[30, 20], [10, 25]], [[5, 10], [15, 40]]]
    counts[:, :, :, 1] = [[[12, 8], [9, 3]], [[4, 6], [7, 11]]]
    table = DiscreteMediationTable(counts)
    for c in (0, 1):
        res = rr_nie_plugin(table, 1, 0, c)
        assert res.rr == float(_enumerate_rr(counts, 1, 0, c))
        assert res.rr == pytest.approx(res.numerator / res.denominator, rel=1e-15)


@settings(max_examples=40, deadline=None)
@given(counts=st.lists(st.integers(1, 60), min_size=8, max_size=8))
def test_rr_matches_enumeration_on_random_tables(counts):
    arr = np.array(counts).reshape(2, 2, 2, 1)
    table = DiscreteMediationTable(arr)
    assert rr_nie_plugin(table, 1, 0, 0).rr == float(_enumerate_rr(arr, 1, 0, 0))


@settings(max_examples=30, deadline=None)
@given(counts=st.lists(st.integers(1, 60), min_size=8, max_size=8), k=st.integers(2, 1000))
def test_rr_invariant_to_count_scaling(counts, k):
    arr = np.array(counts).reshape(2, 2, 2, 1)
    assert rr_nie_plugin(DiscreteMediationTable(arr * k), 1, 0, 0).rr == \
        rr_nie_plugin(DiscreteMediationTable(arr), 1, 0, 0).rr


def test_rr_unchanged_mediator_distribution():
    counts = np.zeros((2, 3, 2, 1), dtype=int)
    counts[0, :, 0, 0] = [10, 20, 30]
    counts[1, :, 0, 0] = [5, 5, 5]
    counts[0, :, 1, 0] = [2, 11, 8]
    counts[1, :, 1, 0] = [7, 9, 22]  # m-marginal at a=1 is (9, 20, 30) ...
    counts[:, :, 1, 0] *= 1
    # force f(m|a=1) == f(m|a=0) = (15, 25, 35) / 75
    counts[0, :, 1, 0] = [8, 12, 20]
    counts[1, :, 1, 0] = [7, 13, 15]
    assert rr_nie_plugin(DiscreteMediationTable(counts), 1, 0, 0).rr == 1.0


def test_rr_identical_arms():
    counts = np.arange(1, 17).reshape(2, 2, 2, 2)
    assert rr_nie_plugin(DiscreteMediationTable(counts), 1, 1, 0).rr == 1.0


def test_rr_empty_cell():
    counts = np.ones((2, 2, 2, 1), dtype=int)
    counts[:, 1, 1, 0] = 0  # m=1 never seen at a=1 but seen at a=0
    with pytest.raises(EmptyCell):
        rr_nie_plugin(DiscreteMediationTable(counts), 1, 0, 0)


def test_rr_table_validation():
    with pytest.raises(InvalidParameter):
        DiscreteMediationTable(np.ones((3, 2, 2, 1)))
    with pytest.raises(InvalidParameter):
        DiscreteMediationTable(-np.ones((2, 2, 2, 1)))
    with pytest.raises(InvalidParameter):
        DiscreteMediationTable(np.zeros((2, 2, 2, 1)))


def test_rr_from_records_with_labels():
    records = [(y, m, a, "x", 1 + y + 2 * (m == "hi") + 3 * a)
               for y in (0, 1) for m in ("lo", "hi") for a in (0, 1)]
    table = DiscreteMediationTable.from_records(records)
    assert table.c_levels == ("x",)
    assert set(table.m_levels) == {"lo", "hi"}
    assert rr_nie_plugin(table, 1, 0, "x").rr > 0
