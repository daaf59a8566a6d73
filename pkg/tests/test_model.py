import numpy as np
import pytest

from stylebend.model import (EmptyForegroundError, Encoder, Episode, FewShotModel, Hooks, RunMode,
                             encode, iou, masked_prototype, match, miou, plan_for_batch, run_batch,
                             run_episode)
from stylebend.perturb import PerturbConfig
from stylebend.tensor import Tensor, precision
from stylebend.verify import gradcheck


def _episode(rng, K=1, size=16, cls=0, style="s"):
    def pair():
        img = rng.uniform(size=(3, size, size))
        m = np.zeros((1, size, size), dtype=np.uint8)
        r = rng.integers(0, size // 2)
        m[0, r:r + size // 2, 2:size // 2 + 2] = 1
        return img, m
    return Episode([pair() for _ in range(K)], pair(), cls, style)


def test_episode_validation(rng):
    img = np.zeros((3, 8, 8))
    with pytest.raises(ValueError):
        Episode([], (img, np.zeros((1, 8, 8))), 0, "s")
    with pytest.raises(ValueError):
        Episode([(img, np.full((1, 8, 8), 2))], (img, np.zeros((1, 8, 8))), 0, "s")
    with pytest.raises(EmptyForegroundError):
        Episode([(img, np.zeros((1, 8, 8)))], (img, np.zeros((1, 8, 8))), 0, "s")


def test_encoder_shapes_and_size():
    enc = Encoder()
    n = sum(p.data.size for p in enc.parameters())
    assert 60_000 < n < 80_000
    with precision(np.float64):
        out, trace = encode(Tensor(np.zeros((2, 3, 32, 32))), enc)
    assert out.shape == (2, 64, 4, 4)
    assert [t.F_o.mu.shape for t in trace] == [(2, 16), (2, 32), (2, 64)]


def test_encoder_deterministic(rng):
    x = rng.uniform(size=(1, 3, 16, 16))
    a, _ = encode(Tensor(x), Encoder(rng=np.random.default_rng(5)))
    b, _ = encode(Tensor(x), Encoder(rng=np.random.default_rng(5)))
    np.testing.assert_array_equal(a.data, b.data)


def test_zero_init_adapter_hook_is_identity(rng):
    model = FewShotModel.create(seed=1)
    x = Tensor(rng.uniform(size=(2, 3, 16, 16)))
    plain, _ = encode(x, model.encoder)
    hooked, _ = encode(x, model.encoder, Hooks(adapter=model.adapter, rectify=True))
    np.testing.assert_array_equal(plain.data, hooked.data)


def test_prototype_examples(f64, rng):
    F = Tensor(rng.normal(size=(1, 3, 4, 4)))
    p = masked_prototype(F, [np.ones((1, 4, 4))])
    np.testing.assert_allclose(p.data, F.data.mean(axis=(0, 2, 3)), atol=1e-12)
    m = np.zeros((1, 4, 4))
    m[0, 2, 1] = 1
    np.testing.assert_allclose(masked_prototype(F, [m]).data, F.data[0, :, 2, 1], atol=1e-15)


def test_prototype_two_shot_loop_oracle(f64, rng):
    f = rng.normal(size=(3, 4, 4))
    F = Tensor(np.stack([f, f]))
    m1 = (rng.uniform(size=(1, 4, 4)) > 0.5).astype(float)
    m1[0, 0, 0] = 1
    m2 = 1 - m1
    got = masked_prototype(F, [m1, m2]).data
    acc, cnt = np.zeros(3), 0.0
    for k, mk in enumerate([m1, m2]):
        for i in range(4):
            for j in range(4):
                acc += F.data[k, :, i, j] * mk[0, i, j]
                cnt += mk[0, i, j]
    np.testing.assert_allclose(got, acc / cnt, atol=1e-12)


def test_prototype_downsamples_mask(f64):
    F = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    m = np.zeros((1, 8, 8))
    m[0, :4, :4] = 1
    np.testing.assert_allclose(masked_prototype(F, [m]).data, [0.0, 4.0])


def test_prototype_empty_mask(f64):
    with pytest.raises(EmptyForegroundError):
        masked_prototype(Tensor(np.ones((1, 2, 2, 2))), [np.zeros((1, 8, 8))])


def test_match_examples(f64):
    p = Tensor(np.array([1.0, 2.0, 0.0]))
    q = np.zeros((3, 1, 2))
    q[:, 0, 0] = [2.0, 4.0, 0.0]
    q[:, 0, 1] = [0.0, 0.0, 5.0]
    out = match(Tensor(q), p, tau=10.0).data
    assert out.shape == (1, 1, 2)
    assert out[0, 0, 0] == pytest.approx(10.0, abs=1e-9)
    assert out[0, 0, 1] == 0.0


def test_match_loop_oracle(f64, rng):
    q = rng.normal(size=(4, 3, 5))
    p = rng.normal(size=4)
    got = match(Tensor(q), Tensor(p), tau=7.0).data
    for i in range(3):
        for j in range(5):
            v = q[:, i, j]
            want = 7.0 * float(v @ p) / (np.sqrt(v @ v + 1e-12) * np.sqrt(p @ p))
            assert got[0, i, j] == pytest.approx(want, abs=1e-12)
    assert np.abs(got).max() <= 7.0


def test_match_rejects_zero_prototype(f64):
    with pytest.raises(EmptyForegroundError):
        match(Tensor(np.ones((2, 2, 2))), Tensor(np.zeros(2)))


def test_iou_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    gt = np.zeros((4, 4), bool)
    gt[:, :2] = True
    both = gt.copy()
    both[:, 2:] = True
    assert iou(both, gt) == 0.5
    shifted = np.zeros((4, 4), bool)
    shifted[:, 1:3] = True
    assert iou(shifted, gt) == pytest.approx(1 / 3)


def test_miou_class_averaging():
    ones = np.ones((2, 2))
    zeros = np.zeros((2, 2))
    # class a: IoUs 1 and 0 -> 0.5; class b: 1 -> mean 0.75
    assert miou([ones, zeros, ones], [ones, ones, ones], ["a", "a", "b"]) == 0.75
    with pytest.raises(ValueError):
        miou([], [])


def test_eval_is_side_effect_free(rng):
    model = FewShotModel.create(seed=0)
    model.bank.set(0, np.ones(16))
    before = {k: v.copy() for k, v in model.to_entries().items()}
    run_episode(_episode(rng), model, RunMode.EVAL)
    after = model.to_entries()
    assert before.keys() == after.keys()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_baseline_train_updates_bank(rng):
    model = FewShotModel.create(seed=0)
    res = run_batch([_episode(rng)], model, RunMode.BASELINE_TRAIN)
    assert sorted(model.bank.mu_datum) == [0, 1, 2]
    assert res.loss.l_cyc.item() == 0.0 and np.isfinite(res.loss.total.item())


def test_adapter_train_without_stats_losses_is_bce_only(rng):
    model = FewShotModel.create(seed=0)
    run_batch([_episode(rng)], model, RunMode.BASELINE_TRAIN)
    res = run_batch([_episode(rng)], model, RunMode.ADAPTER_TRAIN, np.random.default_rng(0),
                    use_cyc=False, use_align=False)
    assert res.loss.total.item() == res.loss.l_bce.item()


def test_adapter_train_needs_rng(rng):
    with pytest.raises(ValueError):
        run_batch([_episode(rng)], FewShotModel.create(seed=0), RunMode.ADAPTER_TRAIN)


def test_plan_shares_factors_within_episode(rng):
    model = FewShotModel.create(seed=0, perturb=PerturbConfig(p_local=1.0))
    eps = [_episode(rng, K=2), _episode(rng, K=2)]
    plan = plan_for_batch(model, eps, np.random.default_rng(0))
    a = plan.alpha[0]
    assert a.shape == (6, 16)
    np.testing.assert_array_equal(a[0], a[2])
    assert not np.array_equal(a[0], a[3])


def test_global_draw_falls_back_without_bank(rng):
    model = FewShotModel.create(seed=0, perturb=PerturbConfig(p_local=0.0, p_global=1.0))
    plan = plan_for_batch(model, [_episode(rng)], np.random.default_rng(0))
    assert all(m.value == "none" for m in plan.modes[0])


def test_replicated_supports_match_one_shot(rng):
    model = FewShotModel.create(seed=2)
    ep1 = _episode(rng)
    ep5 = Episode(ep1.supports * 5, ep1.query, ep1.class_id, ep1.style_id)
    r1 = run_episode(ep1, model, RunMode.EVAL)
    r5 = run_episode(ep5, model, RunMode.EVAL)
    np.testing.assert_allclose(r1.logits.data, r5.logits.data, atol=1e-5)


def test_episode_backward_gradcheck(f64):
    rng = np.random.default_rng(7)
    model = FewShotModel.create(channels=(4, 4, 4), seed=3)
    img = rng.uniform(size=(3, 16, 16))
    m = np.zeros((1, 16, 16), dtype=np.uint8)
    m[0, :, :8] = 1
    ep = Episode([(img, m)], (img[:, ::-1].copy(), m), 0, "s")
    st = model.encoder.stages[0]
    names = ("wa", "bb")

    def fn(wa, bb):
        st["wa"], st["bb"] = wa, bb
        return run_batch([ep], model, RunMode.BASELINE_TRAIN).loss.total
    inputs = [st[k].data.copy() for k in names]
    assert gradcheck(fn, inputs, rng) < 1e-4
