"""Glyph generation, rendering, preprocessing, file format, and splits."""

import numpy as np
import pytest

from cycleid import dataset as D
from cycleid.dataset import (
    DatasetFile,
    apply_pose_transform,
    build_dataset,
    generate_identity,
    glyph_polygon,
    jitter_view,
    polygon_area,
    preprocess,
    render,
    split,
)


def test_identity_generation_deterministic():
    a = generate_identity(3, 99)
    b = generate_identity(3, 99)
    assert a == b


def test_identities_pairwise_distinct():
    idents = [generate_identity(i, 7) for i in range(20)]
    params = [i.stroke_params for i in idents]
    assert len(set(params)) == 20
    # renders must differ too, not just parameters
    imgs = [render(i, D.FRONTAL, 40).tobytes() for i in idents]
    assert len(set(imgs)) == 20


def test_glyph_area_is_substantial():
    # every glyph polygon covers >5% of the canvas (shoelace oracle)
    for i in range(20):
        xs, ys = glyph_polygon(generate_identity(i, 11), 40)
        assert polygon_area(xs, ys) > 0.05 * 40 * 40


def test_profile_is_exact_warp_of_frontal():
    ident = generate_identity(0, 5)
    frontal = render(ident, D.FRONTAL, 40)
    profile = render(ident, D.PROFILE, 40)
    np.testing.assert_array_equal(profile, apply_pose_transform(frontal))


def test_poses_visibly_differ():
    for i in range(10):
        ident = generate_identity(i, 13)
        f = render(ident, D.FRONTAL, 40)
        p = render(ident, D.PROFILE, 40)
        assert np.mean(f != p) > 0.05


def test_render_rejects_bad_args():
    ident = generate_identity(0, 0)
    with pytest.raises(ValueError, match="side"):
        render(ident, D.FRONTAL, 8)
    with pytest.raises(ValueError, match="pose"):
        render(ident, 2, 40)


def test_jitter_is_seeded_and_bounded():
    img = render(generate_identity(0, 1), D.FRONTAL, 40)
    a = jitter_view(img, np.random.default_rng(4))
    b = jitter_view(img, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    c = jitter_view(img, np.random.default_rng(5))
    assert a.tobytes() != c.tobytes()
    assert a.dtype == np.uint8


# ---------------------------------------------------------------------------
# preprocessing

def test_preprocess_value_mapping():
    raw = np.zeros((40, 40), dtype=np.uint8)
    assert preprocess(raw, 38).data.min() == -1.0
    raw[:] = 255
    assert preprocess(raw, 38).data.max() == 1.0
    raw[:] = 128
    mid = float(preprocess(raw, 38).data[0, 0, 0])
    assert abs(mid - (128 / 127.5 - 1.0)) < 1e-6


def test_preprocess_shapes_and_range():
    rng = np.random.default_rng(0)
    for _ in range(10):
        raw = rng.integers(0, 256, (40, 40)).astype(np.uint8)
        t = preprocess(raw, 38, rng=rng)
        assert t.data.shape == (1, 38, 38)
        assert t.data.min() >= -1.0 and t.data.max() <= 1.0


def test_preprocess_center_crop_without_rng():
    raw = np.arange(40 * 40, dtype=np.uint8).reshape(40, 40)
    t1 = preprocess(raw, 38)
    t2 = preprocess(raw, 38)
    np.testing.assert_array_equal(t1.data, t2.data)
    np.testing.assert_allclose(
        t1.data[0], raw[1:39, 1:39].astype(np.float32) / 127.5 - 1.0,
        rtol=1e-6)


def test_preprocess_crop_too_large():
    with pytest.raises(ValueError, match="crop"):
        preprocess(np.zeros((40, 40), dtype=np.uint8), 41)


# ---------------------------------------------------------------------------
# dataset assembly and file format

def test_build_dataset_counts_and_labels():
    ds = build_dataset(4, 3, 2, 40, 21)
    assert ds.num_samples == 4 * 5
    assert ds.images.shape == (20, 40, 40)
    assert sorted(set(ds.identity_labels.tolist())) == [0, 1, 2, 3]
    for i in range(4):
        poses = ds.pose_labels[ds.identity_labels == i]
        assert int((poses == D.FRONTAL).sum()) == 3
        assert int((poses == D.PROFILE).sum()) == 2


def test_build_dataset_deterministic():
    a = build_dataset(3, 2, 2, 40, 8)
    b = build_dataset(3, 2, 2, 40, 8)
    np.testing.assert_array_equal(a.images, b.images)


def test_dataset_file_roundtrip(tmp_path):
    ds = build_dataset(3, 2, 1, 40, 17)
    p = tmp_path / "d.bin"
    ds.save(p)
    back = DatasetFile.load(p)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.identity_labels, ds.identity_labels)
    np.testing.assert_array_equal(back.pose_labels, ds.pose_labels)
    assert (back.num_identities, back.frontal_views,
            back.profile_views, back.side) == (3, 2, 1, 40)


def test_dataset_file_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        DatasetFile.load(p)


def test_dataset_file_rejects_truncation(tmp_path):
    ds = build_dataset(2, 1, 1, 40, 2)
    p = tmp_path / "d.bin"
    ds.save(p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(ValueError, match="truncated"):
        DatasetFile.load(p)


def test_build_dataset_rejects_zero_counts():
    with pytest.raises(ValueError):
        build_dataset(0, 1, 1, 40, 0)
    with pytest.raises(ValueError):
        build_dataset(2, 0, 1, 40, 0)


# ---------------------------------------------------------------------------
# splits

def test_split_identity_disjoint_over_many_seeds():
    ds = build_dataset(10, 1, 1, 40, 3)
    for seed in range(100):
        tr, te = split(ds, 0.8, seed)
        assert not (set(tr) & set(te))
        assert sorted(tr + te) == list(range(10))
        assert len(tr) >= 1 and len(te) >= 1


def test_split_deterministic():
    ds = build_dataset(10, 1, 1, 40, 3)
    assert split(ds, 0.7, 42) == split(ds, 0.7, 42)


def test_split_extreme_fractions_clamped():
    ds = build_dataset(5, 1, 1, 40, 3)
    tr, te = split(ds, 0.999, 0)
    assert len(tr) == 4 and len(te) == 1
    tr, te = split(ds, 0.001, 0)
    assert len(tr) == 1 and len(te) == 4


def test_split_rejects_bad_fraction():
    ds = build_dataset(4, 1, 1, 40, 3)
    with pytest.raises(ValueError, match="train_fraction"):
        split(ds, 1.0, 0)


def test_indices_for_selects_identities():
    ds = build_dataset(4, 2, 1, 40, 6)
    idx = ds.indices_for([1, 3])
    assert set(ds.identity_labels[idx].tolist()) == {1, 3}
    assert len(idx) == 2 * 3
