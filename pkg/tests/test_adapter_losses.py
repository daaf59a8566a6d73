import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from stylebend.adapter import RectAdapter, RectificationFactors, predict_factors, rectify, rectify_stage
from stylebend.losses import LossBreakdown, cyclic_chain, stats_l1, total_loss
from stylebend.perturb import GlobalStatsBank, Mode, perturb_local
from stylebend.stats import ChannelStats, channel_stats
from stylebend.tensor import ShapeError, Tensor, precision
from stylebend.verify import OracleAdapter, gradcheck, oracle_inverse, rectify_long


def _adapter(C=4, rng=None, scale=1.0, random_out=False):
    rng = rng if rng is not None else np.random.default_rng(0)
    ad = RectAdapter({0: C}, reduction=2, scale=scale, rng=rng)
    if random_out:
        ad.params[0]["w2"].data = rng.normal(0, 3.0, size=ad.params[0]["w2"].shape)
        ad.params[0]["b2"].data = rng.normal(0, 3.0, size=ad.params[0]["b2"].shape)
    return ad


def test_zero_weights_give_zero_factors(f64, rng):
    ad = _adapter(rng=rng)
    for p in ad.parameters():
        p.data[...] = 0
    f = predict_factors(Tensor(rng.normal(size=(2, 4, 3, 3))), ad, 0)
    assert not f.alpha_rect.data.any() and not f.beta_rect.data.any()


def test_default_init_is_identity(f64, rng):
    ad = _adapter(rng=rng)
    F = Tensor(rng.normal(size=(2, 4, 3, 3)))
    np.testing.assert_array_equal(rectify_stage(F, ad, 0, True).data, F.data)


@pytest.mark.parametrize("scale", [1.0, 0.5])
def test_outputs_bounded(f64, rng, scale):
    ad = _adapter(rng=rng, scale=scale, random_out=True)
    f = predict_factors(Tensor(rng.normal(size=(8, 4, 3, 3)) * 10), ad, 0)
    assert np.abs(f.alpha_rect.data).max() <= scale
    assert np.abs(f.beta_rect.data).max() <= scale
    assert (1 + f.beta_rect.data > 0).all()


def test_scale_range():
    with pytest.raises(ValueError):
        RectAdapter({0: 4}, scale=1.5)
    with pytest.raises(ValueError):
        RectAdapter({0: 4}, scale=0.0)


def test_param_shapes():
    ad = RectAdapter({0: 16, 1: 32}, reduction=4)
    p = ad.params[1]
    assert p["w1"].shape == (8, 64) and p["w2"].shape == (64, 8)
    assert sorted(ad.to_entries())[:4] == ["adapter.stage0.b1", "adapter.stage0.b2",
                                           "adapter.stage0.w1", "adapter.stage0.w2"]


def test_missing_stage_and_channel_mismatch(rng):
    ad = _adapter()
    with pytest.raises(KeyError):
        predict_factors(Tensor(np.ones((1, 4, 2, 2))), ad, 3)
    with pytest.raises(ShapeError):
        predict_factors(Tensor(np.ones((1, 5, 2, 2))), ad, 0)


def test_rectify_identity_and_long_form(f64, rng):
    F = rng.normal(size=(2, 3, 5, 5))
    z = RectificationFactors(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(rectify(Tensor(F), z).data, F)
    a, b = rng.uniform(-1, 1, (2, 3)), rng.uniform(-0.9, 1, (2, 3))
    got = rectify(Tensor(F), RectificationFactors(Tensor(a), Tensor(b))).data
    np.testing.assert_allclose(got, rectify_long(F, a, b), atol=1e-10, rtol=0)


def test_rectify_shape_mismatch():
    with pytest.raises(ShapeError):
        rectify(Tensor(np.ones((1, 3, 2, 2))), RectificationFactors(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2)))))


def test_rectify_stage_disabled(rng):
    F = Tensor(rng.normal(size=(1, 4, 2, 2)))
    assert rectify_stage(F, _adapter(random_out=True), 0, False) is F


def test_oracle_inverse_restores_stats_and_map(f64, rng):
    F = rng.normal(1.0, 2.0, size=(3, 4, 6, 6))
    a = rng.uniform(0.2, 3, (3, 4)) - 1
    b = rng.uniform(0.2, 3, (3, 4)) - 1
    F_p = perturb_local(Tensor(F), Tensor(a), Tensor(b))
    F_r = rectify(F_p, oracle_inverse(a, b))
    s0, s1 = channel_stats(Tensor(F)), channel_stats(F_r)
    np.testing.assert_allclose(s1.mu.data, s0.mu.data, rtol=1e-6)
    np.testing.assert_allclose(s1.sigma.data, s0.sigma.data, rtol=1e-6)
    np.testing.assert_allclose(F_r.data, F, rtol=1e-6, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 3, 3), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (2, 3), elements=st.floats(-1, 1)),
       hnp.arrays(np.float64, (2, 3), elements=st.floats(-1, 1)), st.floats(-3, 3))
def test_rectify_affine_in_F(F, a, b, c):
    with precision(np.float64):
        f = RectificationFactors(Tensor(a), Tensor(b))
        lhs = rectify(Tensor(c * F), f).data
        rhs = c * rectify(Tensor(F), f).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * max(1, np.abs(rhs).max()))


def test_predict_factors_gradcheck(f64, rng):
    ad = _adapter(rng=rng, random_out=True)
    ad.params[0]["w2"].data *= 0.1

    def fn(F, w1, w2):
        ad.params[0]["w1"], ad.params[0]["w2"] = w1, w2
        f = predict_factors(F, ad, 0)
        return f.alpha_rect * 2.0 + f.beta_rect
    inputs = [rng.normal(1.0, 1.0, size=(2, 4, 3, 3)), ad.params[0]["w1"].data.copy(), ad.params[0]["w2"].data.copy()]
    assert gradcheck(fn, inputs, rng) < 1e-4


def _st(mu, sigma):
    with precision(np.float64):
        return ChannelStats(Tensor(np.array(mu, dtype=float)), Tensor(np.array(sigma, dtype=float)), 1e-5)


def test_stats_l1_hand_value():
    a = _st([[0.0, 0.0]], [[1.0, 1.0]])
    b = _st([[0.1, 0.3]], [[1.2, 1.0]])
    assert stats_l1(a, b).item() == pytest.approx(0.3, abs=1e-12)
    assert stats_l1(a, b).item() == stats_l1(b, a).item()
    assert stats_l1(a, a).item() == 0.0


def test_stats_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        stats_l1(_st([[0.0]], [[1.0]]), _st([[0.0, 1.0]], [[1.0, 1.0]]))


def test_chain_identity_with_zero_noise(f64, rng):
    F = Tensor(rng.normal(size=(2, 4, 3, 3)))
    z = Tensor(np.zeros((2, 4)))
    r1, r2 = cyclic_chain(F, z, z, Mode.LOCAL, None, _adapter(rng=rng), 0)
    np.testing.assert_array_equal(r1.data, F.data)
    np.testing.assert_array_equal(r2.data, F.data)
    assert r1.shape == r2.shape == F.shape


@pytest.mark.parametrize("mode", [Mode.LOCAL, Mode.GLOBAL])
def test_chain_with_oracle_adapter(f64, rng, mode):
    F = Tensor(rng.normal(1.0, 1.0, size=(2, 4, 6, 6)))
    clean = channel_stats(F)
    bank = GlobalStatsBank()
    bank.set(0, np.array([0.5, 1.5, 1.0, 2.0]))
    a = Tensor(rng.uniform(0.2, 3, (2, 4)) - 1)
    b = Tensor(rng.uniform(0.2, 3, (2, 4)) - 1)
    r1, r2 = cyclic_chain(F, a, b, mode, bank, OracleAdapter({0: clean}), 0)
    s2 = channel_stats(r2)
    np.testing.assert_allclose(s2.mu.data, clean.mu.data, rtol=1e-6)
    np.testing.assert_allclose(s2.sigma.data, clean.sigma.data, rtol=1e-6)
    lb = total_loss(Tensor(np.zeros((2, 1, 2, 2))), np.zeros((2, 1, 2, 2)), [clean], [channel_stats(r1)], [s2])
    assert lb.l_cyc.item() + lb.l_align.item() < 1e-8


def test_chain_without_cycle(f64, rng):
    F = Tensor(rng.normal(size=(1, 4, 3, 3)))
    a = Tensor(np.full((1, 4), 0.2))
    _, r2 = cyclic_chain(F, a, a, Mode.LOCAL, None, _adapter(), 0, cycle=False)
    assert r2 is None


def _loss_inputs(rng, n_stages=2):
    stats = lambda: _st(rng.normal(size=(2, 3)), rng.uniform(0.5, 2, (2, 3)))
    with precision(np.float64):
        logits = Tensor(rng.normal(size=(2, 1, 4, 4)))
    mask = (rng.uniform(size=(2, 1, 4, 4)) > 0.5).astype(float)
    return logits, mask, [stats() for _ in range(n_stages)], [stats() for _ in range(n_stages)], \
        [stats() for _ in range(n_stages)]


@pytest.mark.parametrize("cyc,align", [(False, False), (True, False), (False, True), (True, True)])
def test_total_is_unit_weight_sum(rng, cyc, align):
    lb = total_loss(*_loss_inputs(rng), use_cyc=cyc, use_align=align)
    assert isinstance(lb, LossBreakdown)
    assert lb.total.item() - (lb.l_bce.item() + lb.l_cyc.item() + lb.l_align.item()) == 0.0
    assert (lb.l_cyc.item() > 0) == cyc and (lb.l_align.item() > 0) == align
    assert min(lb.values().values()) >= 0


def test_stage_averaging(rng):
    logits, mask, o, r, r2 = _loss_inputs(rng)
    lb = total_loss(logits, mask, o, r, r2)
    want = np.mean([stats_l1(a, b).item() for a, b in zip(o, r2)])
    assert lb.l_cyc.item() == pytest.approx(want, rel=1e-12)


def test_cyc_requires_chain(rng):
    logits, mask, o, r, _ = _loss_inputs(rng, 1)
    with pytest.raises(ValueError):
        total_loss(logits, mask, o, r, [None])


def test_perfect_prediction_total_near_zero(rng):
    logits, mask, o, _, _ = _loss_inputs(rng, 1)
    with precision(np.float64):
        perfect = Tensor(np.where(mask > 0, 30.0, -30.0))
    lb = total_loss(perfect, mask, o, o, o)
    assert lb.total.item() < 1e-6


def test_total_gradient_wrt_adapter(f64, rng):
    F0 = rng.normal(1.0, 1.0, size=(2, 4, 4, 4))
    ad = _adapter(rng=rng)
    ad.params[0]["w2"].data = rng.normal(0, 0.3, size=ad.params[0]["w2"].shape)
    a = Tensor(rng.normal(0, 0.3, (2, 4)))
    b = Tensor(rng.normal(0, 0.3, (2, 4)))
    target = channel_stats(Tensor(F0))
    mask = np.ones((2, 1, 4, 4))

    def fn(w1, b1, w2, b2):
        ad.params[0].update(w1=w1, b1=b1, w2=w2, b2=b2)
        r1, r2 = cyclic_chain(Tensor(F0), a, b, Mode.LOCAL, None, ad, 0)
        logits = r1.mean(axis=1, keepdims=True)
        return total_loss(logits, mask, [target], [channel_stats(r1)], [channel_stats(r2)]).total
    inputs = [ad.params[0][k].data.copy() for k in ("w1", "b1", "w2", "b2")]
    assert gradcheck(fn, inputs, rng) < 1e-4
