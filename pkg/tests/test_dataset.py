import numpy as np
import pytest

from vce.dataset import (Split, augment, denormalize, extract_pairs,
                         load_manifest, make_split, normalize, save_manifest)
from vce.dataset import test_pairs as roi_test_pairs
from vce.phantom import PhantomRecipe, PhantomVolume, generate


def vol(seed=0, depth=16, modality="T1", **kw):
    return generate(PhantomRecipe(seed=seed, depth=depth, modality=modality, **kw))


def test_pair_count_depth_16():
    assert len(extract_pairs(vol())) == 10


def test_pair_count_depth_7():
    v = vol(depth=16)
    v7 = PhantomVolume(pre=v.pre[:, :, :7], post=v.post[:, :, :7],
                       roi=v.roi[:, :, :7], modality=v.modality, seed=v.seed)
    pairs = extract_pairs(v7)
    assert len(pairs) == 1
    assert np.array_equal(pairs[0].y, v7.pre)


def test_depth_too_small():
    v = vol()
    with pytest.raises(ValueError):
        extract_pairs(PhantomVolume(pre=v.pre[:, :, :6], post=v.post[:, :, :6],
                                    roi=v.roi[:, :, :6], modality="T1", seed=0))


def test_central_slice_alignment():
    v = vol(seed=2)
    for p in extract_pairs(v):
        assert np.array_equal(p.y[:, :, 3], v.pre[:, :, p.slice_index])
        assert np.array_equal(p.x, v.post[:, :, p.slice_index])


def test_diff_identity():
    for p in extract_pairs(vol(seed=3)):
        pre_c = p.y[:, :, 3]
        assert np.allclose(p.diff + pre_c, p.x, atol=1e-3)


def test_zero_enhancement_zero_diff():
    v = vol(seed=1, tumor_count=0, enhancement_fraction=0.0, noise_sigma=0.0)
    for p in extract_pairs(v):
        assert not p.diff.any()


def test_normalize_t1_identity():
    p = extract_pairs(vol(seed=4, modality="T1"))[0]
    q = normalize(p)
    assert q is p
    assert q.norm_factor == 1.0


def test_normalize_t1w():
    p = extract_pairs(vol(seed=4, modality="T1w"))[0]
    q = normalize(p)
    assert q.norm_factor == pytest.approx(float(p.y.max()))
    assert float(q.y.max()) == pytest.approx(1.0)
    assert np.allclose(q.x * q.norm_factor, p.x, rtol=1e-6)


def test_normalize_roundtrip():
    p = extract_pairs(vol(seed=5, modality="T1w"))[2]
    back = denormalize(normalize(p))
    for a, b in ((back.y, p.y), (back.x, p.x), (back.diff, p.diff)):
        assert np.allclose(a, b, rtol=1e-6)


def test_normalize_rejects_nonpositive():
    p = extract_pairs(vol(seed=4, modality="T1w"))[0]
    p.y = np.zeros_like(p.y)
    with pytest.raises(ValueError):
        normalize(p)


class _FixedRng:
    """rng stub returning preset quarter-turns, angle, and crop offsets."""

    def __init__(self, k=0, angle=0.0, offsets=(0, 0)):
        self.k, self.angle, self._off = k, angle, list(offsets)

    def integers(self, lo, hi):
        if hi == 4 and lo == 0:
            return self.k
        return self._off.pop(0)

    def uniform(self, lo, hi):
        return self.angle


def test_augment_identity():
    p = extract_pairs(vol(seed=6))[0]
    q = augment(p, _FixedRng(k=0, angle=0.0))
    assert np.array_equal(q.y, p.y)
    assert np.array_equal(q.x, p.x)
    assert np.array_equal(q.roi, p.roi)


def test_augment_quarter_turn_group():
    p = extract_pairs(vol(seed=6))[0]
    once = augment(augment(p, _FixedRng(k=1)), _FixedRng(k=1))
    twice = augment(p, _FixedRng(k=2))
    assert np.allclose(once.x, twice.x)
    assert np.array_equal(once.roi, twice.roi)


def test_augment_preserves_roi_mass_quarter_turns():
    p = extract_pairs(vol(seed=7))[3]
    for k in range(4):
        q = augment(p, _FixedRng(k=k))
        assert q.roi.sum() == p.roi.sum()


def test_augment_joint_transform_marker():
    p = extract_pairs(vol(seed=6))[0]
    p.y = p.y.copy()
    p.x = p.x.copy()
    p.y[10, 20, 3] = 9999.0
    p.x[10, 20] = 9999.0
    rng = np.random.default_rng(0)
    q = augment(p, rng)
    iy = np.unravel_index(np.argmax(q.y[:, :, 3]), q.x.shape)
    ix = np.unravel_index(np.argmax(q.x), q.x.shape)
    assert iy == ix


def test_augment_crop():
    p = extract_pairs(vol(seed=6))[0]
    q = augment(p, _FixedRng(k=0, offsets=(5, 7)), crop=(32, 48))
    assert q.x.shape == (32, 48)
    assert q.y.shape == (32, 48, 7)
    assert np.array_equal(q.x, p.x[5:37, 7:55])


def test_augment_crop_too_large():
    p = extract_pairs(vol(seed=6))[0]
    with pytest.raises(ValueError):
        augment(p, _FixedRng(), crop=(128, 128))


def test_split_disjoint():
    with pytest.raises(ValueError):
        Split(train_ids=[0, 1], val_ids=[1], test_ids=[2])


def test_make_split():
    vols = [vol(seed=s) for s in range(8)]
    s = make_split(vols, n_train=5, n_test=2, seed=1)
    assert len(s.train_ids) == 5 and len(s.test_ids) == 2 and len(s.val_ids) == 1
    assert all(vols[i].roi.any() for i in s.test_ids)
    assert sorted(s.train_ids + s.val_ids + s.test_ids) == list(range(8))


def test_make_split_too_many():
    vols = [vol(seed=s) for s in range(3)]
    with pytest.raises(ValueError):
        make_split(vols, n_train=3, n_test=1)


def test_test_pairs_roi_filter():
    vols = [vol(seed=s) for s in range(4)]
    s = make_split(vols, n_train=2, n_test=1, seed=0)
    pairs = roi_test_pairs(vols, s)
    assert pairs
    for p in pairs:
        assert p.roi.any()
        assert p.volume_id in s.test_ids


def test_manifest_roundtrip(tmp_path):
    s = Split(train_ids=[0, 2], val_ids=[3], test_ids=[1])
    files = ["v0", "v1", "v2", "v3"]
    path = tmp_path / "dataset.json"
    save_manifest(path, files, s, seed=42)
    back_files, back_split, seed = load_manifest(path)
    assert back_files == files and seed == 42
    assert back_split.train_ids == s.train_ids
    assert back_split.test_ids == s.test_ids
