import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stylebend import netpbm
from stylebend.dataset import load_manifest, load_test_episodes, load_train_pool, sample_episodes
from stylebend.synth import (CLASS_TABLE, FG_FRACTION, DatasetManifest, DomainStyle, apply_style,
                             build_benchmark, count_summary, default_styles, render_content,
                             render_sample, shape_class, tree_hash)


def test_style_validation():
    with pytest.raises(ValueError):
        DomainStyle("x", gain=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        DomainStyle("x", gamma=5.0)
    with pytest.raises(ValueError):
        DomainStyle("x", gain=(1.0, 1.0))
    assert DomainStyle("x").is_identity


def test_identity_style_keeps_pixels(rng):
    img = rng.uniform(size=(3, 8, 8))
    np.testing.assert_array_equal(apply_style(img, DomainStyle("s"), rng), img)


def test_style_formula(rng):
    img = rng.uniform(size=(3, 4, 4))
    s = DomainStyle("t", gain=(0.5, 0.5, 0.5), bias=(0.1, 0.2, 0.3), gamma=2.0)
    want = np.clip(0.5 * img ** 2 + np.array([0.1, 0.2, 0.3])[:, None, None], 0, 1)
    np.testing.assert_allclose(apply_style(img, s, rng), want)


@pytest.mark.parametrize("cid", range(len(CLASS_TABLE)))
def test_every_class_renders_valid_mask(cid):
    img, mask = render_content(shape_class(cid), np.random.default_rng(cid), 32)
    assert img.shape == (3, 32, 32) and mask.shape == (1, 32, 32)
    frac = mask.mean()
    assert FG_FRACTION[0] <= frac <= FG_FRACTION[1]
    assert set(np.unique(mask)) <= {0, 1}


def test_styles_share_content():
    styles = default_styles()
    masks = [render_sample(shape_class(2), styles[s], np.random.default_rng(9), 32)[1] for s in styles]
    for m in masks[1:]:
        np.testing.assert_array_equal(m, masks[0])


def test_manifest_validation():
    with pytest.raises(ValueError):
        DatasetManifest(train_classes=[0, 1], test_classes=[1, 2]).validate()
    with pytest.raises(ValueError):
        DatasetManifest(target_styles=["source"]).validate()
    with pytest.raises(ValueError):
        DatasetManifest(image_size=36).validate()
    DatasetManifest().validate()


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest(seed=11, image_size=48, shots=[1])
    m.dump(tmp_path / "m.json")
    assert DatasetManifest.load(tmp_path / "m.json") == m


def test_default_counts():
    c = count_summary(DatasetManifest())
    assert c["train_samples"] == 2000
    assert c["test_episodes"] == 3 * 2 * 200
    assert c["test_samples"] == 3 * 200 * (2 + 6)


def test_generation_is_deterministic(tmp_path, tiny_manifest, tiny_data):
    assert build_benchmark(tiny_manifest, tmp_path / "again", jobs=2) == tree_hash(tiny_data)
    files = sum(1 for p in tiny_data.rglob("*") if p.is_file())
    assert files == count_summary(tiny_manifest)["files"]


def test_loaded_benchmark(tiny_data, tiny_manifest):
    assert load_manifest(tiny_data) == tiny_manifest
    pool = load_train_pool(tiny_data)
    assert len(pool) == 48
    assert set(pool.by_class) == set(tiny_manifest.train_classes)
    for sid in tiny_manifest.target_styles:
        eps = load_test_episodes(tiny_data, sid, 5)
        assert len(eps) == 6 and all(len(e.supports) == 5 for e in eps)
        assert {e.class_id for e in eps} <= set(tiny_manifest.test_classes)
        assert {e.style_id for e in eps} == {sid}
    with pytest.raises(ValueError):
        load_test_episodes(tiny_data, "target1", 3)


def test_sampled_episodes_stay_in_class(tiny_data):
    pool = load_train_pool(tiny_data)
    eps = sample_episodes(pool, 20, 2, np.random.default_rng(0))
    assert all(e.class_id in pool.by_class for e in eps)
    again = sample_episodes(pool, 20, 2, np.random.default_rng(0))
    np.testing.assert_array_equal(eps[7].query[0], again[7].query[0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_netpbm_round_trip(tmp_path_factory, h, w, seed):
    d = tmp_path_factory.mktemp("pnm")
    r = np.random.default_rng(seed)
    img = r.integers(0, 256, size=(3, h, w)) / 255.0
    mask = r.integers(0, 2, size=(1, h, w))
    netpbm.write_ppm(d / "a.ppm", img)
    netpbm.write_pgm(d / "a.pgm", mask)
    np.testing.assert_allclose(netpbm.read_ppm(d / "a.ppm"), img, atol=1e-6)
    np.testing.assert_array_equal(netpbm.read_pgm(d / "a.pgm"), mask)


def test_netpbm_rejects(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P5\n1 1\n255\n\0")
    with pytest.raises(ValueError):
        netpbm.read_ppm(tmp_path / "x.ppm")
    (tmp_path / "y.pgm").write_bytes(b"P5\n1 1\n65535\n\0\0")
    with pytest.raises(ValueError):
        netpbm.read_pgm(tmp_path / "y.pgm")
    with pytest.raises(ValueError):
        netpbm.write_ppm(tmp_path / "z.ppm", np.zeros((2, 2)))


def test_netpbm_header_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# hi\n2 1\n255\n\xff\x00")
    np.testing.assert_array_equal(netpbm.read_pgm(tmp_path / "c.pgm"), [[[1, 0]]])
