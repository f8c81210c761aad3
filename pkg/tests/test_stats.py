import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as hst
from hypothesis.extra import numpy as hnp

from lesionlm import stats as st

from oracles import bh_loop, t_two_sided_p


def test_fisher_z():
    assert st.fisher_z(0.0) == 0.0
    assert st.fisher_z(0.5) == pytest.approx(0.5493061443340549, abs=1e-15)
    r = np.linspace(-0.9, 0.9, 7)
    np.testing.assert_array_equal(st.fisher_z(-r), -st.fisher_z(r))
    with pytest.warns(UserWarning, match="clamped"):
        assert np.isfinite(st.fisher_z(1.0))


def test_t_worked_example_against_quadrature():
    t, p, df, deg = st.one_sample_ttest(np.array([1.0, 2.0, 3.0]))
    assert t == pytest.approx(2 / (1 / math.sqrt(3)), rel=1e-12)
    assert df == 2 and not deg
    assert p == pytest.approx(t_two_sided_p(t, 2), rel=1e-9)
    assert p == pytest.approx(0.0742, abs=1e-4)
    t2, p2, _, _ = st.paired_ttest(np.array([1.0, 2.0, 3.0]), np.zeros(3))
    assert (t2, p2) == (t, p)


def test_degenerate_conventions():
    t, p, _, deg = st.paired_ttest(np.ones(4), np.ones(4))
    assert (t, p, deg) == (0.0, 1.0, True)
    t, p, _, deg = st.one_sample_ttest(np.full(4, 2.0), 2.0)
    assert (t, p, deg) == (0.0, 1.0, True)
    t, p, _, deg = st.one_sample_ttest(np.full(4, 3.0), 0.0)
    assert deg and t == 0.0 and p == 0.0
    t, _, _, _ = st.paired_ttest(np.array([1.0, -1.0]), np.zeros(2))
    assert t == 0.0
    with pytest.raises(ValueError):
        st.one_sample_ttest(np.array([1.0]))


@given(hnp.arrays(np.float64, (6, 3), elements=hst.floats(-10, 10)),
       hnp.arrays(np.float64, (6, 3), elements=hst.floats(-10, 10)), hst.floats(-100, 100))
def test_t_symmetries(a, b, c):
    t1, p1, _, _ = st.paired_ttest(a, b)
    t2, p2, _, _ = st.paired_ttest(b, a)
    np.testing.assert_allclose(t1, -t2, atol=1e-9)
    np.testing.assert_allclose(p1, p2, atol=1e-12)
    s1, q1, _, d1 = st.one_sample_ttest(a, 0.5)
    s2, q2, _, d2 = st.one_sample_ttest(a + c, 0.5 + c)
    ok = ~d1 & ~d2 & (a.std(axis=0) > 1e-3)
    np.testing.assert_allclose(s1[ok], s2[ok], rtol=1e-6, atol=1e-6)


def test_bh_worked_example():
    q, sig = st.fdr_correct([0.01, 0.02, 0.03, 0.04, 0.05], 0.05, "BH")
    assert sig.all()
    np.testing.assert_allclose(q, 0.05)
    assert not st.fdr_correct(np.ones(10), 0.05)[1].any()
    assert st.fdr_correct([0.005], 0.01)[1].all()
    with pytest.raises(ValueError):
        st.fdr_correct([], 0.05)
    with pytest.raises(ValueError):
        st.fdr_correct([0.5, 1.5], 0.05)


def test_bh_matches_loop_oracle_on_1000_vectors():
    rng = np.random.default_rng(0)
    for i in range(1000):
        m = int(rng.integers(1, 60))
        p = rng.random(m) ** rng.uniform(1, 6)
        if i % 4 == 0:
            p = np.round(p, 2)  # exercise ties and exact threshold hits
        q_level = float(rng.choice([0.01, 0.05, 0.1, 0.2]))
        _, sig = st.fdr_correct(p, q_level, "BH")
        assert sig.tolist() == bh_loop(p.tolist(), q_level)


def test_sig_implies_q_below_level_and_by_is_stricter():
    rng = np.random.default_rng(1)
    p = rng.random(200) ** 4
    q, sig = st.fdr_correct(p, 0.05, "BH")
    assert (q[sig] <= 0.05).all()
    _, sig_by = st.fdr_correct(p, 0.05, "BY")
    assert not (sig_by & ~sig).any()


@given(hnp.arrays(np.float64, hst.integers(1, 40), elements=hst.floats(0, 1)))
def test_fdr_monotone_and_contains_bonferroni(p):
    _, sig = st.fdr_correct(p, 0.05)
    bonf = p <= 0.05 / len(p)
    assert not (bonf & ~sig).any()
    if sig.any():
        assert (sig | (p > p[sig].max())).all()


def test_conjunction():
    a = np.array([True, False, True])
    b = np.array([True, True, False])
    np.testing.assert_array_equal(st.conjunction_mask(a, a), a)
    assert not st.conjunction_mask(a, np.zeros(3, bool)).any()
    np.testing.assert_array_equal(st.conjunction_mask(a, b), st.conjunction_mask(b, a))
    np.testing.assert_array_equal(st.conjunction_mask([a, b]), [True, False, False])
    with pytest.raises(ValueError):
        st.conjunction_mask(a, np.ones(4, bool))


def test_minmax_rectify():
    np.testing.assert_array_equal(st.minmax_rectify([0.0, 5.0, 10.0]), [0, 0.5, 1])
    np.testing.assert_array_equal(st.minmax_rectify([-4.0, 0.0, 2.0, 4.0]), [0, 0, 0.5, 1])
    with pytest.raises(ValueError):
        st.minmax_rectify([3.0, 3.0])


@given(hnp.arrays(np.float64, 10, elements=hst.floats(-50, 50)))
def test_minmax_range_and_order(t):
    if np.ptp(np.maximum(t, 0)) == 0:
        return
    out = st.minmax_rectify(t)
    assert out.min() == 0.0 and out.max() == 1.0
    pos = t > 0
    assert (np.argsort(out[pos], kind="stable") == np.argsort(t[pos], kind="stable")).all() or \
        len(np.unique(t[pos])) < pos.sum()


def test_lpi_hand_cases():
    eps = 1e-6
    v = st.lpi(np.array([1.0, 0.0, 0.5, 0.6, 0.0]),
               [np.array([0.0, 1.0, 0.5, 0.2, 0.0]), np.array([0.0, 1.0, 0.5, 0.4, 0.0])], eps).values
    np.testing.assert_allclose(v, [1 / (1 + eps), -1 / (1 + eps), 0.0, 0.3 / (0.9 + eps), 0.0],
                               rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        st.lpi(np.ones(2), [np.ones(2)], 0.0)


def test_lpi_mask_and_bounds():
    rng = np.random.default_rng(0)
    raw = [rng.standard_normal(100) * s for s in (1, 2, 3)]
    norm = [st.minmax_rectify(r) for r in raw]
    mask = rng.random(100) < 0.5
    m = st.lpi(norm[0], norm[1:], 1e-6, mask, "A")
    assert m.defined.tolist() == mask.tolist()
    vals = m.values[m.defined]
    assert ((vals > -1) & (vals < 1)).all()


@given(hst.floats(0.01, 100))
def test_lpi_scale_free(c):
    rng = np.random.default_rng(7)
    raw = [rng.standard_normal(30) for _ in range(3)]
    a = st.lpi(st.minmax_rectify(raw[0]), [st.minmax_rectify(r) for r in raw[1:]], 1e-6).values
    b = st.lpi(st.minmax_rectify(c * raw[0]), [st.minmax_rectify(c * r) for r in raw[1:]],
               1e-6).values
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_cross_model_average():
    x = st.LpiMap(np.array([0.2, np.nan, 0.4]), "A", 1e-6)
    assert st.cross_model_average([x]).values.tobytes() == x.values.tobytes()
    y = st.LpiMap(np.array([-0.2, np.nan, 0.1]), "A", 1e-6)
    z = st.LpiMap(np.array([0.3, np.nan, np.nan]), "A", 1e-6)
    avg = st.cross_model_average([x, y, z]).values
    np.testing.assert_allclose(avg[[0, 2]], [0.1, 0.25])
    assert np.isnan(avg[1])
    with pytest.raises(ValueError):
        st.cross_model_average([])
    with pytest.raises(ValueError):
        st.cross_model_average([x, st.LpiMap(x.values, "B", 1e-6)])


def test_roi_summary(tmp_path):
    r = np.arange(10.0)
    rois = {"a": [3], "b": [0, 1, 2], "c": list(range(3, 10))}
    s = st.roi_summary(r, rois)
    assert s["a"] == 3.0
    assert (s["b"] * 3 + s["c"] * 7) / 10 == pytest.approx(r.mean())
    assert set(st.roi_summary(np.full(10, 0.3), rois).values()) == {0.3}
    with pytest.raises(ValueError):
        st.roi_summary(r, {"e": []})
    with pytest.raises(IndexError):
        st.roi_summary(r, {"e": [10]})
    (tmp_path / "r.json").write_text('{"x": [1, 2]}')
    assert st.load_rois(tmp_path / "r.json") == {"x": [1, 2]}
