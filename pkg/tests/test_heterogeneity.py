import numpy as np
import pytest
from scipy.integrate import trapezoid

from honestforest.effects import GateTable, estimate_gates
from honestforest.errors import UsageError
from honestforest.heterogeneity import (_lloyd, cluster_profile, density_csv, epanechnikov_density,
                                        gate_minus_ate_tests, kmeanspp_cluster, silverman_bandwidth,
                                        wald_equality)


def _mixture():
    rng = np.random.default_rng(7)
    return np.concatenate([rng.normal(-2, 0.5, 60), rng.normal(0, 0.3, 50),
                           rng.normal(1.5, 0.4, 70), rng.normal(4, 0.6, 40)])


# --------------------------------------------------------------------------
# Wald test


def test_wald_two_groups_closed_form():
    r = wald_equality(gate=[0.02, 0.0], se=[0.01, 0.01])
    assert r.statistic == pytest.approx(2.0, abs=1e-12)
    assert r.df == 1
    assert r.p == pytest.approx(0.15729920705028105, abs=1e-12)


def test_wald_matches_precision_weighted_form():
    # sum of w_j (g_j - weighted mean)^2 with w = 1/se^2, evaluated independently
    gate, se = [0.01, 0.03, 0.02, 0.05], [0.01, 0.02, 0.015, 0.01]
    r = wald_equality(gate=gate, se=se)
    assert r.statistic == pytest.approx(8.371134020618559, rel=1e-10)
    assert r.p == pytest.approx(0.03893300807835359, rel=1e-8)
    flipped = wald_equality(gate=gate[::-1], se=se[::-1])
    assert flipped.statistic == pytest.approx(r.statistic, rel=1e-12)


def test_wald_identical_gates():
    r = wald_equality(gate=[0.03, 0.03, 0.03], se=[0.01, 0.02, 0.01])
    assert r.statistic == 0.0 and r.p == 1.0 and r.df == 2


def test_wald_drops_zero_se_groups():
    with pytest.warns(RuntimeWarning, match="dropped"):
        r = wald_equality(gate=[0.02, 0.0, 0.5], se=[0.01, 0.01, 0.0], labels=["a", "b", "c"])
    assert r.dropped == ["c"]
    assert r.statistic == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(UsageError), pytest.warns(RuntimeWarning):
        wald_equality(gate=[0.1, 0.2], se=[0.0, 0.1])


def test_wald_on_gate_table(small_fit):
    sample, res = small_fit
    z = sample.column("rec_education")[res.forest.honest_idx]
    gates = estimate_gates(res.iates, z, 3, 0, variable="rec_education")
    r = wald_equality(gates)
    assert r.df == gates.n_groups - 1
    assert 0.0 <= r.p <= 1.0


# --------------------------------------------------------------------------
# GATE - ATE tests


def _gate_table():
    return GateTable("rec_income", (3, 0), [1.0, 2.0, 3.0],
                     gate=np.array([0.010, 0.020, 0.045]), gate_se=np.array([0.01, 0.01, 0.01]),
                     deviation=np.array([-0.015, -0.005, 0.02]),
                     deviation_se=np.array([0.005, 0.004, 0.01]),
                     p=np.ones(3), sizes=np.array([10, 10, 10]), masses=np.array([0.4, 0.4, 0.2]),
                     ate=0.025, ate_se=0.005)


def test_gate_minus_ate_layout():
    t = gate_minus_ate_tests(_gate_table())
    np.testing.assert_allclose(t.delta, [-0.015, -0.005, 0.02], atol=1e-15)
    np.testing.assert_allclose(t.p, [0.0026997960632601, 0.2112995473337, 0.0455002638963], rtol=1e-9)
    rows = t.to_csv().splitlines()
    assert rows[0] == "group,delta,se,p"
    group, delta, se, p = rows[1].split(",")
    assert (float(group), float(delta), float(se)) == (1.0, pytest.approx(-1.5), pytest.approx(0.5))
    assert float(p) == pytest.approx(0.26997960632601, rel=1e-9)
    assert "Delta" in t.render("income").splitlines()[0]


# --------------------------------------------------------------------------
# k-means


def test_k_one_returns_the_mean():
    x = _mixture()
    r = kmeanspp_cluster(x, k=1)
    assert np.all(r.labels == 0)
    assert r.centers[0, 0] == pytest.approx(x.mean(), abs=1e-12)


def test_separated_point_masses():
    x = np.array([5, 0, 1, 0, 5, 1, 0, 5], dtype=float)
    r = kmeanspp_cluster(x, k=3, seed=4)
    np.testing.assert_allclose(r.centers.ravel(), [0, 1, 5])
    assert r.inertia == 0.0
    np.testing.assert_array_equal(r.labels, [2, 0, 1, 0, 2, 1, 0, 2])


def test_lloyd_matches_reference_from_same_start():
    # final centers from a reference Lloyd implementation started at the same centers
    x = _mixture()[:, None]
    labels, centers, obj, _, _ = _lloyd(x, np.array([[-1.0], [0.5], [1.0], [3.0]]), 1e-12, 1000)
    np.testing.assert_allclose(centers.ravel(), [-2.1234003023987253, -0.019821234634227136,
                                                 1.4382800991269586, 4.023468985155207], atol=1e-12)
    assert obj == pytest.approx(36.77739805976945, rel=1e-12)


def test_restarts_reach_the_reference_optimum():
    r = kmeanspp_cluster(_mixture(), k=4, seed=0)
    # best of 50 reference restarts
    assert r.inertia <= 36.72665297846696 * (1 + 1e-9)
    assert np.all(np.diff(r.centers.ravel()) > 0)


def test_objective_never_increases():
    r = kmeanspp_cluster(_mixture(), k=5, seed=2)
    assert np.all(np.diff(r.history) <= 1e-12)


def test_kmeans_determinism_and_errors():
    x = _mixture()
    a, b = kmeanspp_cluster(x, k=5, seed=9), kmeanspp_cluster(x, k=5, seed=9)
    assert np.array_equal(a.labels, b.labels) and a.inertia == b.inertia
    for k in (0, len(x) + 1):
        with pytest.raises(UsageError):
            kmeanspp_cluster(x, k=k)
    with pytest.raises(UsageError):
        kmeanspp_cluster([1.0, 1.0, 2.0], k=3)
    with pytest.raises(UsageError):
        kmeanspp_cluster([1.0, np.nan, 2.0], k=2)


def test_cluster_profile():
    labels = np.array([0, 0, 1, 1, 1])
    summary = cluster_profile(labels, [0.01, 0.03, 0.05, 0.06, 0.07],
                              {"income": [2, 4, 5, 5, 5], "constant": [1, 1, 1, 1, 1]})
    np.testing.assert_allclose(summary.mean_effect, [0.02, 0.06])
    np.testing.assert_allclose(summary.descriptors["income"], [3, 5])
    np.testing.assert_allclose(summary.descriptors["constant"], [1, 1])
    np.testing.assert_allclose(summary.shares, [0.4, 0.6])
    rows = summary.to_csv().splitlines()
    assert rows[0] == "row,1,2,all"
    assert rows[-1] == "Total,2,3,5"
    with pytest.raises(UsageError):
        cluster_profile(np.array([0, 2]), [0.1, 0.2], {})


# --------------------------------------------------------------------------
# density


def test_epanechnikov_density_integrates_to_one():
    x = _mixture()
    grid, dens = epanechnikov_density(x, n_grid=4001)
    assert trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)
    assert np.all(dens >= 0)


def test_silverman_bandwidth_by_hand():
    x = np.arange(1.0, 11.0)
    sd = np.std(x, ddof=1)
    iqr = 7.75 - 3.25
    assert silverman_bandwidth(x) == pytest.approx(0.9 * min(sd, iqr / 1.349) * 10 ** -0.2, rel=1e-12)
    with pytest.raises(UsageError):
        epanechnikov_density(np.ones(5))


def test_density_csv_layout():
    text = density_csv([0.0, 1.0], [0.5, 0.25], header_lines=["x"])
    assert text.splitlines() == ["# x", "grid,density", "0.0,0.5", "1.0,0.25"]
