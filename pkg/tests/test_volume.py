import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subfork.errors import BoundsError, FormatError, ShapeError, ValidationError
from subfork.volume import (LabelVolume, PhantomSpec, ScalarVolume, apply_mask, embed_labels, extract_slice,
                            insert_slice, load_volume, make_phantom, save_volume, stack_slices)


def ramp(shape=(4, 5, 6)):
    i, j, k = np.indices(shape)
    return ScalarVolume((i + 10 * j + 100 * k).astype(np.float64))


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32, np.float64])
def test_roundtrip_is_bit_exact(tmp_path, dtype):
    rng = np.random.default_rng(0)
    data = (rng.random((4, 3, 5)) * 100).astype(dtype)
    v = ScalarVolume(data, (0.5, 1.0, 2.0))
    p = tmp_path / "v.vvol"
    save_volume(v, p)
    w = load_volume(p)
    assert w.data.dtype == data.dtype
    assert np.array_equal(w.data, data)
    assert w.spacing == (0.5, 1.0, 2.0)
    q = tmp_path / "w.vvol"
    save_volume(w, q)
    assert p.read_bytes() == q.read_bytes()


def test_zero_volume_roundtrip(tmp_path):
    v = ScalarVolume(np.zeros((4, 4, 4), np.float32))
    save_volume(v, tmp_path / "z.vvol")
    w = load_volume(tmp_path / "z.vvol")
    assert w.dims == (4, 4, 4) and not w.data.any()


def test_payload_is_x_fastest(tmp_path):
    v = ramp((2, 3, 4))
    save_volume(v, tmp_path / "r.vvol")
    raw = (tmp_path / "r.vvol").read_bytes()
    payload = raw[raw.index(b"\n") + 1:]
    flat = np.frombuffer(payload, "<f8")
    # x varies fastest: the first values step by 1, then by 10
    assert flat[:3].tolist() == [0.0, 1.0, 10.0]


def test_truncated_payload(tmp_path):
    header = {"format": "vvol", "version": 1, "dims": [2, 2, 2], "spacing": [1, 1, 1], "dtype": "f32",
              "kind": "scalar"}
    p = tmp_path / "t.vvol"
    p.write_bytes(json.dumps(header).encode() + b"\n" + np.zeros(7, "<f4").tobytes())
    with pytest.raises(FormatError):
        load_volume(p)


def test_malformed_header(tmp_path):
    p = tmp_path / "bad.vvol"
    p.write_bytes(b"not json\n\x00\x00")
    with pytest.raises(FormatError):
        load_volume(p)


def test_label_value_above_n_labels(tmp_path):
    lv = LabelVolume(np.zeros((2, 2, 2), np.uint8), 7)
    p = tmp_path / "l.vvol"
    save_volume(lv, p)
    raw = bytearray(p.read_bytes())
    raw[-1] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(ValidationError):
        load_volume(p)


def test_label_roundtrip(tmp_path):
    lv = LabelVolume(np.arange(8, dtype=np.uint8).reshape(2, 2, 2), 7, (1, 2, 3))
    save_volume(lv, tmp_path / "l.vvol")
    w = load_volume(tmp_path / "l.vvol")
    assert isinstance(w, LabelVolume) and w.n_labels == 7
    assert np.array_equal(w.data, lv.data)


def test_nonfinite_rejected():
    with pytest.raises(ValidationError):
        ScalarVolume(np.full((2, 2, 2), np.nan))


def test_axial_slice_values():
    v = ramp()
    s = extract_slice(v, "axial", 3)
    i, j = np.indices((4, 5))
    assert np.array_equal(s.values, i + 10 * j + 300)
    assert (s.width, s.height) == (4, 5)


def test_sagittal_and_coronal_slices():
    v = ramp()
    j, k = np.indices((5, 6))
    assert np.array_equal(extract_slice(v, "sagittal", 2).values, 2 + 10 * j + 100 * k)
    i, k = np.indices((4, 6))
    assert np.array_equal(extract_slice(v, "coronal", 1).values, i + 10 + 100 * k)


def test_slice_out_of_range():
    v = ramp()
    with pytest.raises(BoundsError):
        extract_slice(v, "axial", v.dims[2])
    with pytest.raises(BoundsError):
        extract_slice(v, "axial", -1)


@pytest.mark.parametrize("axis", ["axial", "sagittal", "coronal"])
def test_extract_insert_identity(axis):
    v = ramp()
    w = ScalarVolume(np.zeros(v.dims))
    ax = {"axial": 2, "sagittal": 0, "coronal": 1}[axis]
    for k in range(v.dims[ax]):
        w = insert_slice(w, extract_slice(v, axis, k))
    assert np.array_equal(w.data, v.data)


@given(st.tuples(*[st.integers(1, 5)] * 3), st.sampled_from(["axial", "sagittal", "coronal"]))
@settings(max_examples=30, deadline=None)
def test_slicing_partition(dims, axis):
    v = ScalarVolume(np.arange(np.prod(dims), dtype=np.float64).reshape(dims))
    st_ = stack_slices(v, axis)
    assert sorted(st_.ravel().tolist()) == sorted(v.data.ravel().tolist())


def test_apply_mask_cases():
    v = ramp((3, 3, 3))
    empty = LabelVolume(np.zeros((3, 3, 3), np.uint8), 2)
    assert not apply_mask(v, empty, {1, 2}).data.any()
    full = LabelVolume(np.ones((3, 3, 3), np.uint8), 2)
    assert np.array_equal(apply_mask(v, full, {1}).data, v.data)
    one = np.zeros((3, 3, 3), np.uint8)
    one[1, 2, 0] = 1
    out = apply_mask(v, LabelVolume(one, 1), {1}).data
    assert out[1, 2, 0] == v.data[1, 2, 0] and np.count_nonzero(out) == 1
    with pytest.raises(ShapeError):
        apply_mask(v, LabelVolume(np.zeros((2, 3, 3), np.uint8), 1), {1})


@given(st.integers(0, 2 ** 16))
@settings(max_examples=25, deadline=None)
def test_apply_mask_introduces_no_new_values(seed):
    rng = np.random.default_rng(seed)
    v = ScalarVolume(rng.integers(1, 5, (4, 4, 4)).astype(float))
    m = LabelVolume(rng.integers(0, 4, (4, 4, 4)), 3)
    out = apply_mask(v, m, {1, 3}).data
    assert set(np.unique(out)) <= {0.0} | set(np.unique(v.data))


def test_embed_labels():
    base = LabelVolume(np.full((3, 3, 3), 2, np.uint8), 13)
    deep0 = LabelVolume(np.zeros((3, 3, 3), np.uint8), 7)
    assert np.array_equal(embed_labels(base, deep0, 13).data, base.data)
    zero = LabelVolume(np.zeros((3, 3, 3), np.uint8), 13)
    d = np.zeros((3, 3, 3), np.uint8)
    d[1, 1, 1] = 1
    deep = LabelVolume(d, 7)
    out = embed_labels(zero, deep, 13)
    assert out.data[1, 1, 1] == 14 and out.n_labels == 20
    once = embed_labels(base, deep, 13)
    twice = embed_labels(once, deep, 13)
    assert np.array_equal(once.data, twice.data)
    with pytest.raises(ValidationError):
        embed_labels(base, deep, 250)
    with pytest.raises(ShapeError):
        embed_labels(base, LabelVolume(np.zeros((2, 3, 3), np.uint8), 7), 13)


def _spec(**kw):
    d = {"dims": [16, 16, 16], "background_mean": 0.1, "noise_sigma": 0.0,
         "structures": [{"label": 1, "center": [8, 8, 8], "radii": [4, 3, 2], "mean_intensity": 0.7}]}
    d.update(kw)
    return d


def test_phantom_zero_noise():
    mri, lab = make_phantom(_spec(), 0)
    inside = lab.data == 1
    assert inside.sum() > 0
    assert np.all(mri.data[inside] == 0.7) and np.all(mri.data[~inside] == 0.1)
    assert inside[8, 8, 8] and not inside[13, 8, 8]


def test_phantom_deterministic():
    s = _spec(noise_sigma=0.05, center_jitter=1.0)
    a, b = make_phantom(s, 4), make_phantom(s, 4)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)
    c = make_phantom(s, 5)
    assert not np.array_equal(a[0].data, c[0].data)


def test_phantom_overlap_takes_later_label():
    s = _spec(structures=[
        {"label": 1, "center": [6, 8, 8], "radii": [4, 4, 4], "mean_intensity": 0.5},
        {"label": 2, "center": [10, 8, 8], "radii": [4, 4, 4], "mean_intensity": 0.9}])
    mri, lab = make_phantom(s, 0)
    assert lab.data[8, 8, 8] == 2 and mri.data[8, 8, 8] == 0.9
    assert lab.data[3, 8, 8] == 1


def test_phantom_outside_grid():
    with pytest.raises(ValidationError):
        make_phantom(_spec(structures=[{"label": 1, "center": [2, 8, 8], "radii": [4, 2, 2],
                                        "mean_intensity": 1.0}]), 0)


def test_bundled_deep7_loads():
    from subfork.cli import resolve_data
    spec = PhantomSpec.load(resolve_data("deep7"))
    mri, lab = make_phantom(spec, 0)
    assert lab.n_labels == 7 and mri.dims == (64, 64, 64)
    assert set(np.unique(lab.data)) == set(range(8))
    assert 0.0 <= mri.data.min() and mri.data.max() <= 1.0
