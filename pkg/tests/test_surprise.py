import numpy as np
import pytest

from conftest import assert_grads_match

from routelab.surprise import (
    RouterParams,
    causal_moving_average,
    change_surprise,
    gating_signals,
    kl_isotropic,
    probabilistic_or_gate,
    static_surprise,
    surprise_bundle,
)
from routelab.tensor import Tensor, constant, mean_all, mul, scale_rows, add, mean_square


def general_gaussian_kl(mu_p, mu_q, cov_p, cov_q):
    """Independent oracle: the full multivariate-normal divergence."""
    d = len(mu_p)
    inv_q = np.linalg.inv(cov_q)
    diff = np.asarray(mu_q, dtype=np.float64) - np.asarray(mu_p, dtype=np.float64)
    _, logdet_p = np.linalg.slogdet(cov_p)
    _, logdet_q = np.linalg.slogdet(cov_q)
    return 0.5 * (logdet_q - logdet_p + np.trace(inv_q @ cov_p) + diff @ inv_q @ diff - d)


# ---------------------------------------------------------------------------
# divergence proxy
# ---------------------------------------------------------------------------

def test_kl_identical_means_is_zero():
    mu = np.array([0.3, -1.2, 4.0])
    assert kl_isotropic(mu, mu, 1.5) == 0.0


def test_kl_closed_form_example():
    # ||(1,2) - (0,0)||^2 / (2*2) = 5/4; the general formula gives the same
    got = kl_isotropic(np.array([1.0, 2.0]), np.zeros(2), 2.0)
    assert got == pytest.approx(1.25, rel=1e-12)
    oracle = general_gaussian_kl(np.array([1.0, 2.0]), np.zeros(2),
                                 2.0 * np.eye(2), 2.0 * np.eye(2))
    assert got == pytest.approx(oracle, rel=1e-9)


def test_kl_scales_quadratically():
    mu_p, mu_q = np.array([1.0, -2.0, 0.5]), np.array([0.2, 0.0, 1.0])
    base = kl_isotropic(mu_p, mu_q, 3.0)
    assert kl_isotropic(4.0 * mu_p, 4.0 * mu_q, 3.0) == pytest.approx(16.0 * base, rel=1e-9)


def test_kl_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        kl_isotropic(np.zeros(2), np.ones(2), 0.0)


def test_kl_matches_general_gaussian_form_100_draws(rng):
    for _ in range(100):
        d = int(rng.integers(2, 16))
        mu_p = rng.standard_normal(d)
        mu_q = rng.standard_normal(d)
        k = float(rng.uniform(0.1, 5.0))
        cov = k * np.eye(d)
        mine = kl_isotropic(mu_p, mu_q, k)
        oracle = general_gaussian_kl(mu_p, mu_q, cov, cov)
        assert mine == pytest.approx(oracle, rel=1e-6, abs=1e-12)


# ---------------------------------------------------------------------------
# static / change surprise
# ---------------------------------------------------------------------------

def test_static_surprise_zero_row():
    delta = Tensor(np.zeros((3, 4)))
    np.testing.assert_array_equal(static_surprise(delta).data, np.zeros(3))


def test_static_surprise_unit_row():
    delta = Tensor(np.ones((1, 4)))
    assert float(static_surprise(delta).data[0]) == 1.0


def test_static_surprise_matches_scalar_oracle(rng):
    row = rng.standard_normal(8).astype(np.float32)
    got = static_surprise(Tensor(row[None, :])).data[0]
    assert got == pytest.approx(float(np.sum(row.astype(np.float64) ** 2)) / 8, rel=1e-5)


def test_change_surprise_perfect_prior(rng):
    delta = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    np.testing.assert_array_equal(change_surprise(delta, delta).data, np.zeros(3))


def test_change_surprise_zero_prior_equals_static(rng):
    delta = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    zero = Tensor(np.zeros((3, 4)))
    np.testing.assert_allclose(change_surprise(delta, zero).data,
                               static_surprise(delta).data, rtol=1e-6)


def test_change_surprise_scalar_oracle(rng):
    d_row = rng.standard_normal(6).astype(np.float32)
    p_row = rng.standard_normal(6).astype(np.float32)
    got = change_surprise(Tensor(d_row[None]), Tensor(p_row[None])).data[0]
    want = np.mean((d_row.astype(np.float64) - p_row.astype(np.float64)) ** 2)
    assert got == pytest.approx(want, rel=1e-5)


# ---------------------------------------------------------------------------
# moving average
# ---------------------------------------------------------------------------

def test_ma_constant_fixed_point():
    out = causal_moving_average(np.full(5, 3.0), decay=0.7, init=3.0)
    np.testing.assert_allclose(out, np.full(5, 3.0), rtol=1e-6)


def test_ma_decay_to_zero_tracks_input(rng):
    d = rng.uniform(0.1, 2.0, 6).astype(np.float32)
    out = causal_moving_average(d, decay=1e-7)
    np.testing.assert_allclose(out, d, rtol=1e-5)


def test_ma_hand_recurrence():
    d = np.array([1.0, 0.0, 0.0], dtype=np.float32)
    out = causal_moving_average(d, decay=0.9, init=0.5)
    # hand recurrence: ma_0 = 0.9*0.5 + 0.1*1 = 0.55; then decays by 0.9
    np.testing.assert_allclose(out, [0.55, 0.495, 0.4455], rtol=1e-6)


def test_ma_default_init_is_first_value(rng):
    d = rng.uniform(0.1, 1.0, 4).astype(np.float32)
    out = causal_moving_average(d, decay=0.9)
    assert out[0] == pytest.approx(d[0], rel=1e-6)


def test_ma_is_causal(rng):
    d = rng.uniform(0.1, 1.0, 8).astype(np.float32)
    out = causal_moving_average(d, decay=0.8)
    d2 = d.copy()
    d2[5:] += 10.0
    out2 = causal_moving_average(d2, decay=0.8)
    np.testing.assert_array_equal(out[:5], out2[:5])


def test_ma_rejects_bad_decay():
    with pytest.raises(ValueError):
        causal_moving_average(np.ones(3), decay=1.0)


# ---------------------------------------------------------------------------
# gating signals
# ---------------------------------------------------------------------------

def _params(o_ce=1.0, m_cu=1.0, b_ce=1.0, b_cu=1.0):
    return RouterParams(o_ce=Tensor(np.float32(o_ce), requires_grad=True),
                        m_cu=Tensor(np.float32(m_cu), requires_grad=True),
                        beta_ce=b_ce, beta_cu=b_cu)


def test_ce_reduces_to_difference_at_unit_offset(rng):
    d_st = Tensor(rng.uniform(0, 1, 5).astype(np.float32))
    d_ch = Tensor(rng.uniform(0, 1, 5).astype(np.float32))
    ce, _ = gating_signals(d_st, d_ch, np.zeros(5, dtype=np.float32), _params())
    np.testing.assert_allclose(ce.data, d_st.data - d_ch.data, atol=1e-7)


def test_cu_zero_at_steady_state(rng):
    d_st = rng.uniform(0.2, 1.0, 5).astype(np.float32)
    _, cu = gating_signals(Tensor(d_st), Tensor(d_st), d_st, _params())
    np.testing.assert_allclose(cu.data, np.zeros(5), atol=1e-7)


def test_ce_gradient_wrt_offset_is_reciprocal(rng):
    for o in (0.5, 1.0, 2.0):
        p = _params(o_ce=o)
        d_st = Tensor(rng.uniform(0, 1, 4).astype(np.float32))
        d_ch = Tensor(rng.uniform(0, 1, 4).astype(np.float32))
        ma = rng.uniform(0, 1, 4).astype(np.float32)
        assert_grads_match(lambda: mean_all(gating_signals(d_st, d_ch, ma, p)[0]), [p.o_ce])
        # analytic value: d(mean ce)/d o_ce = 1/o_ce
        assert p.o_ce.grad == pytest.approx(1.0 / o, rel=1e-3)


def test_cu_offset_initialisation_identity(rng):
    # with the default init the first moving-average value equals d_st_0,
    # so cu_0 = d_st_0 * (1 - m_cu)
    d_st = rng.uniform(0.2, 1.0, 6).astype(np.float32)
    m_cu = 1.7
    ma = causal_moving_average(d_st, decay=0.9)
    p = _params(m_cu=m_cu)
    _, cu = gating_signals(Tensor(d_st), Tensor(d_st * 0), ma, p)
    assert cu.data[0] == pytest.approx(d_st[0] * (1 - m_cu), rel=1e-5)


# ---------------------------------------------------------------------------
# probabilistic OR
# ---------------------------------------------------------------------------

def test_or_gate_limits():
    far_neg = Tensor(np.full(3, -80.0, dtype=np.float32))
    g = probabilistic_or_gate(far_neg, far_neg, 1.0, 1.0)
    np.testing.assert_allclose(g.data, np.zeros(3), atol=1e-6)


def test_or_gate_half_half():
    zero = Tensor(np.zeros(1))
    g = probabilistic_or_gate(zero, zero, 1.0, 1.0)  # a = b = 0.5
    assert float(g.data[0]) == pytest.approx(0.75, abs=1e-7)


def test_or_gate_dominates_components_and_stays_in_unit_interval(rng):
    ce = Tensor(rng.standard_normal(1000).astype(np.float32) * 3)
    cu = Tensor(rng.standard_normal(1000).astype(np.float32) * 3)
    g = probabilistic_or_gate(ce, cu, 1.3, 0.7).data
    a = 1 / (1 + np.exp(-1.3 * ce.data))
    b = 1 / (1 + np.exp(-0.7 * cu.data))
    assert np.all(g >= np.maximum(a, b) - 1e-7)
    assert np.all((g >= 0) & (g <= 1))


def test_or_gate_two_forms_agree(rng):
    ce = Tensor(rng.standard_normal(1000).astype(np.float32))
    cu = Tensor(rng.standard_normal(1000).astype(np.float32))
    g = probabilistic_or_gate(ce, cu, 2.0, 2.0).data
    a = 1 / (1 + np.exp(-2.0 * ce.data.astype(np.float64)))
    b = 1 / (1 + np.exp(-2.0 * cu.data.astype(np.float64)))
    alt = 1.0 - (1.0 - a) * (1.0 - b)
    np.testing.assert_allclose(g, alt, atol=1e-7)


def test_or_gate_symmetric(rng):
    ce = Tensor(rng.standard_normal(64).astype(np.float32))
    cu = Tensor(rng.standard_normal(64).astype(np.float32))
    g1 = probabilistic_or_gate(ce, cu, 1.0, 1.0).data
    g2 = probabilistic_or_gate(cu, ce, 1.0, 1.0).data
    np.testing.assert_allclose(g1, g2, atol=1e-7)


def test_or_gate_monotone_in_both_signals(rng):
    ce = rng.standard_normal(200).astype(np.float32)
    cu = rng.standard_normal(200).astype(np.float32)
    g = probabilistic_or_gate(Tensor(ce), Tensor(cu), 1.0, 1.0).data
    g_up_ce = probabilistic_or_gate(Tensor(ce + 0.3), Tensor(cu), 1.0, 1.0).data
    g_up_cu = probabilistic_or_gate(Tensor(ce), Tensor(cu + 0.3), 1.0, 1.0).data
    assert np.all(g_up_ce >= g - 1e-7)
    assert np.all(g_up_cu >= g - 1e-7)


def test_monotone_in_static_surprise(rng):
    # raising d_st with everything else fixed never lowers the gate
    d_ch = Tensor(rng.uniform(0, 1, 50).astype(np.float32))
    ma = rng.uniform(0, 1, 50).astype(np.float32)
    p = _params(o_ce=1.3, m_cu=0.8, b_ce=2.0, b_cu=1.5)
    lo = rng.uniform(0, 1, 50).astype(np.float32)
    hi = lo + rng.uniform(0, 1, 50).astype(np.float32)
    g_lo = probabilistic_or_gate(*gating_signals(Tensor(lo), d_ch, ma, p), p.beta_ce, p.beta_cu).data
    g_hi = probabilistic_or_gate(*gating_signals(Tensor(hi), d_ch, ma, p), p.beta_ce, p.beta_cu).data
    assert np.all(g_hi >= g_lo - 1e-7)


# ---------------------------------------------------------------------------
# full gating path gradient
# ---------------------------------------------------------------------------

def test_full_gating_path_gradient(rng):
    # residuals -> surprises -> signals -> gate -> gated residual, with the
    # moving average held as the frozen statistic it is in the forward pass
    for _ in range(20):
        delta = Tensor((0.5 * rng.standard_normal((4, 3))).astype(np.float32), requires_grad=True)
        delta_hat = Tensor((0.5 * rng.standard_normal((4, 3))).astype(np.float32), requires_grad=True)
        x = Tensor((0.5 * rng.standard_normal((4, 3))).astype(np.float32), requires_grad=True)
        p = _params(o_ce=1.2, m_cu=0.9, b_ce=1.5, b_cu=1.5)
        ma = causal_moving_average(np.mean(delta.data ** 2, axis=-1), decay=0.9)

        def path():
            d_st = static_surprise(delta)
            d_ch = change_surprise(delta, delta_hat)
            ce, cu = gating_signals(d_st, d_ch, ma, p)
            g = probabilistic_or_gate(ce, cu, p.beta_ce, p.beta_cu)
            return mean_square(add(x, scale_rows(delta, g)))

        assert_grads_match(path, [delta, delta_hat, x, p.o_ce, p.m_cu])


def test_surprise_bundle_assembles_consistently(rng):
    delta = Tensor(rng.standard_normal((2, 5, 3)).astype(np.float32))
    delta_hat = Tensor(rng.standard_normal((2, 5, 3)).astype(np.float32))
    p = _params(b_ce=2.0, b_cu=3.0)
    b = surprise_bundle(delta, delta_hat, p)
    assert b.d_st.data.shape == (2, 5)
    assert np.all(b.d_st.data >= 0) and np.all(b.d_ch.data >= 0)
    assert np.all((b.g_cont.data >= 0) & (b.g_cont.data <= 1))
