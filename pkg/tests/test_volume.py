import numpy as np
import pytest

from voxelgat.volume import (DegenerateChannelError, EmptyBrainError, LabelVolume,
                             MultiModalVolume, crop_to_brain, pad_to_shape, read_vxg,
                             remap_brats_labels, rescale_percentile, write_vxg, znormalize)

from conftest import naive_percentile


def vol(ch, **kw):
    return MultiModalVolume(np.asarray(ch, dtype=float), **kw)


def test_crop_full_box_is_identity(rng):
    v = vol(rng.uniform(1, 2, (4, 5, 6, 7)))
    c, off = crop_to_brain(v)
    assert off == (0, 0, 0)
    assert np.array_equal(c.channels, v.channels)


def test_crop_single_voxel():
    ch = np.zeros((4, 10, 10, 10))
    ch[2, 5, 5, 5] = 3.0
    c, off = crop_to_brain(vol(ch))
    assert c.shape == (1, 1, 1) and off == (5, 5, 5)


def test_crop_centered_blob():
    ch = np.zeros((4, 32, 32, 32))
    ch[:, 11:21, 11:21, 11:21] = 1.0
    c, off = crop_to_brain(vol(ch))
    # enumerate the box by scanning every voxel
    nz = [(i, j, k) for i in range(32) for j in range(32) for k in range(32)
          if ch[:, i, j, k].any()]
    lo = tuple(min(p[a] for p in nz) for a in range(3))
    hi = tuple(max(p[a] for p in nz) for a in range(3))
    assert c.shape == tuple(h - l + 1 for l, h in zip(lo, hi)) == (10, 10, 10)
    assert off == lo


def test_crop_all_zero_raises():
    with pytest.raises(EmptyBrainError):
        crop_to_brain(vol(np.zeros((4, 3, 3, 3))))


def test_rescale_constant_channel():
    v = rescale_percentile(vol(np.full((4, 3, 3, 3), 7.0)))
    assert np.all(v.channels == 1.0)


def test_rescale_percentile_linear_interpolation():
    vals = np.arange(1, 1001, dtype=float).reshape(10, 10, 10)
    ch = np.stack([vals] * 4)
    assert naive_percentile(vals.ravel(), 99.5) == pytest.approx(995.005, abs=1e-9)
    v = rescale_percentile(vol(ch))
    assert v.channels[0].max() == 1.0
    assert v.channels[0].ravel()[0] == pytest.approx(1 / 995.005, rel=1e-12)
    assert v.channels[0].ravel()[-1] == 1.0


def test_rescale_output_in_unit_interval(rng):
    v = rescale_percentile(vol(rng.uniform(0, 50, (4, 6, 6, 6))))
    assert v.channels.min() >= 0 and v.channels.max() <= 1


def test_rescale_degenerate_channel():
    ch = np.ones((4, 3, 3, 3))
    ch[1] = 0
    with pytest.raises(DegenerateChannelError):
        rescale_percentile(vol(ch))


def test_znormalize_constant_channel_maps_to_zero(rng):
    ch = rng.uniform(1, 2, (4, 4, 4, 4))
    ch[2] = 5.0
    v = znormalize(vol(ch))
    assert np.all(v.channels[2] == 0)


def test_znormalize_two_values():
    ch = np.ones((4, 2, 2, 2))
    ch[0] = np.array([0, 2] * 4, dtype=float).reshape(2, 2, 2)
    v = znormalize(vol(ch))
    assert sorted(set(v.channels[0].ravel().tolist())) == [-1.0, 1.0]


def test_znormalize_statistics_and_idempotence(rng):
    ch = np.zeros((4, 8, 8, 8))
    ch[:, 2:6, 2:6, 2:6] = rng.uniform(0.1, 1, (4, 4, 4, 4))
    v = znormalize(vol(ch))
    m = v.brain_mask
    for c in v.channels:
        assert abs(c[m].mean()) < 1e-6 and abs(c[m].std() - 1) < 1e-6
        assert np.all(c[~m] == 0)
    again = znormalize(v)
    assert np.max(np.abs(again.channels - v.channels)) < 1e-9


def test_rescale_then_znormalize_preserves_order(rng):
    ch = rng.uniform(1, 100, (4, 5, 5, 5))
    v = znormalize(rescale_percentile(vol(ch)))
    for c in range(4):
        raw, out = ch[c].ravel(), v.channels[c].ravel()
        o = np.argsort(raw, kind="stable")
        assert np.all(np.diff(out[o]) >= 0)


def test_normalization_is_bit_reproducible(rng):
    ch = rng.uniform(1, 100, (4, 6, 6, 6))
    a = znormalize(rescale_percentile(vol(ch)))
    b = znormalize(rescale_percentile(vol(ch.copy())))
    assert a.channels.tobytes() == b.channels.tobytes()


def test_pad_to_own_shape_is_identity(rng):
    v = vol(rng.uniform(1, 2, (4, 3, 4, 5)))
    p, off = pad_to_shape(v, v.shape)
    assert off == (0, 0, 0) and np.array_equal(p.channels, v.channels)


def test_pad_adds_one_voxel_border():
    v = vol(np.ones((4, 3, 3, 3)))
    p, off = pad_to_shape(v, (5, 5, 5))
    assert off == (1, 1, 1)
    inner = np.zeros((5, 5, 5), bool)
    inner[1:4, 1:4, 1:4] = True
    assert np.all(p.channels[:, inner] == 1) and np.all(p.channels[:, ~inner] == 0)


def test_pad_smaller_target_raises():
    with pytest.raises(ValueError):
        pad_to_shape(vol(np.ones((4, 3, 3, 3))), (2, 5, 5))


def test_pad_then_crop_round_trip(rng):
    v = vol(rng.uniform(1, 2, (4, 3, 4, 5)))
    p, _ = pad_to_shape(v, (9, 8, 11))
    c, _ = crop_to_brain(p)
    assert np.array_equal(c.channels, v.channels)
    # crop . pad . crop is idempotent on the cropped content
    c2, _ = crop_to_brain(pad_to_shape(c, (12, 12, 12))[0])
    assert np.array_equal(c2.channels, c.channels)


def test_invalid_spacing():
    with pytest.raises(ValueError):
        vol(np.ones((4, 2, 2, 2)), spacing=(1.0, 0.0, 1.0))


def test_brats_label_remap():
    assert remap_brats_labels(np.array([0, 1, 2, 4])).tolist() == [0, 1, 2, 3]


def test_vxg_round_trip(tmp_path, rng):
    v = vol(rng.uniform(0, 1, (4, 3, 4, 5)).astype(np.float32))
    lab = LabelVolume(rng.integers(0, 4, (3, 4, 5)))
    write_vxg(tmp_path / "a.vxg", v, lab)
    v2, lab2 = read_vxg(tmp_path / "a.vxg")
    assert np.array_equal(v2.channels, v.channels)
    assert np.array_equal(lab2.labels, lab.labels)
    raw = (tmp_path / "a.vxg").read_bytes()
    assert raw[:4] == b"VXG1"
    assert np.frombuffer(raw[4:20], "<u4").tolist() == [3, 4, 5, 4]
    write_vxg(tmp_path / "b.vxg", v)
    assert read_vxg(tmp_path / "b.vxg")[1] is None


def test_nifti_round_trip(tmp_path, rng):
    nib = pytest.importorskip("nibabel")
    from voxelgat.volume import load_nifti_case, write_nifti_labels

    affine = np.diag([1.0, 1.0, 2.0, 1.0])
    paths = {}
    for m in ("t1", "t1ce", "t2", "flair"):
        p = tmp_path / f"case_{m}.nii.gz"
        nib.save(nib.Nifti1Image(rng.uniform(0, 5, (4, 5, 6)).astype(np.float32), affine), p)
        paths[m] = str(p)
    seg = tmp_path / "case_seg.nii.gz"
    nib.save(nib.Nifti1Image(np.array([0, 1, 2, 4] * 30, np.uint8).reshape(4, 5, 6), affine), seg)
    v, lab, aff = load_nifti_case(paths, str(seg))
    assert v.shape == (4, 5, 6) and v.spacing == (1.0, 1.0, 2.0)
    assert set(np.unique(lab.labels)) == {0, 1, 2, 3}
    write_nifti_labels(tmp_path / "out.nii.gz", lab, aff)
    back = np.asarray(nib.load(tmp_path / "out.nii.gz").dataobj)
    assert np.array_equal(back, np.asarray(nib.load(seg).dataobj))
