import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsiwin import datacube
from hsiwin.datacube import DataFormatError, HyperCube, LabelMap, SynthSpec


def write_raw_cube(root, name, h, w, b, values):
    hdr = {"height": h, "width": w, "bands": b, "dtype": "f32le", "interleave": "bsq", "payload": f"{name}.bin"}
    (root / f"{name}.hdr.json").write_text(json.dumps(hdr))
    (root / f"{name}.bin").write_bytes(np.asarray(values, dtype="<f4").tobytes())
    return root / f"{name}.hdr.json"


def test_load_cube_tiny_layout(tmp_path):
    path = write_raw_cube(tmp_path, "c", 2, 2, 1, [0, 1, 2, 3])
    cube = datacube.load_cube(path)
    assert cube.data.shape == (2, 2, 1)
    assert cube.data[1, 1, 0] == 3
    assert cube.data[0, 1, 0] == 1
    assert cube.band_mask == (0,)


def test_load_cube_band_sequential_order(tmp_path):
    # band 0 holds 0..3, band 1 holds 10..13
    path = write_raw_cube(tmp_path, "c", 2, 2, 2, [0, 1, 2, 3, 10, 11, 12, 13])
    cube = datacube.load_cube(path)
    np.testing.assert_array_equal(cube.data[:, :, 1], [[10, 11], [12, 13]])


def test_load_cube_short_payload(tmp_path):
    path = write_raw_cube(tmp_path, "c", 2, 2, 1, [0, 1, 2, 3])
    (tmp_path / "c.bin").write_bytes(b"\0" * 12)
    with pytest.raises(DataFormatError, match="length mismatch"):
        datacube.load_cube(path)


def test_load_cube_nonfinite_reports_position(tmp_path):
    path = write_raw_cube(tmp_path, "c", 2, 2, 1, [0, 1, np.nan, 3])
    with pytest.raises(DataFormatError, match=r"row=1, col=0, band=0"):
        datacube.load_cube(path)


def test_load_cube_missing_header(tmp_path):
    with pytest.raises(FileNotFoundError):
        datacube.load_cube(tmp_path / "nope")


def test_load_cube_ip_shape(tmp_path):
    vals = np.arange(145 * 145 * 200, dtype=np.float32) % 997
    path = write_raw_cube(tmp_path, "ip", 145, 145, 200, vals)
    cube = datacube.load_cube(path)
    assert cube.data.shape == (145, 145, 200)
    assert cube.data.size == 145 * 145 * 200


def test_cube_round_trip(tmp_path, rng):
    data = rng.normal(size=(5, 7, 3)).astype(np.float32)
    cube = HyperCube(data, band_mask=(0, 4, 9), wavelengths=(400.0, 500.0, 600.0))
    datacube.save_cube(cube, tmp_path / "scene")
    back = datacube.load_cube(tmp_path / "scene")
    np.testing.assert_array_equal(back.data, data)
    assert back.band_mask == (0, 4, 9)
    assert back.wavelengths == (400.0, 500.0, 600.0)


def test_labels_tiny_counts(tmp_path):
    lm = LabelMap(np.array([[0, 1], [1, 2]], dtype=np.int32), 2)
    assert lm.class_counts() == {1: 2, 2: 1}
    datacube.save_labels(lm, tmp_path / "gt")
    back = datacube.load_labels(tmp_path / "gt.gt.json")
    np.testing.assert_array_equal(back.labels, lm.labels)
    assert back.class_counts() == {1: 2, 2: 1}
    assert len(back.palette) == 2


def test_labels_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        LabelMap(np.array([[0, 5], [1, 2]], dtype=np.int32), 2)
    # same check fires when reading from disk
    (tmp_path / "g.gt.bin").write_bytes(np.array([0, 5, 1, 2], dtype="<u2").tobytes())
    (tmp_path / "g.gt.json").write_text(json.dumps({"height": 2, "width": 2, "num_classes": 2}))
    with pytest.raises(ValueError):
        datacube.load_labels(tmp_path / "g")


def test_labels_ip_style_total(tmp_path, rng):
    # 16 classes, 10249 labelled pixels on a 145 x 145 grid
    counts = np.full(16, 10249 // 16)
    counts[: 10249 % 16] += 1
    flat = np.zeros(145 * 145, dtype=np.int32)
    pos = rng.permutation(flat.size)[:10249]
    flat[pos] = np.repeat(np.arange(1, 17), counts)
    lm = LabelMap(flat.reshape(145, 145), 16)
    datacube.save_labels(lm, tmp_path / "ip")
    back = datacube.load_labels(tmp_path / "ip")
    assert sum(back.class_counts().values()) == 10249


def test_labels_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        datacube.load_labels(tmp_path / "absent")


def test_drop_bands_counts():
    cube = HyperCube(np.zeros((2, 2, 224), dtype=np.float32))
    discard = list(range(104, 109)) + list(range(150, 164)) + list(range(219, 224))
    assert len(discard) == 24
    out = datacube.drop_bands(cube, discard)
    assert out.bands == 200
    assert not set(discard) & set(out.band_mask)


def test_drop_bands_identity_and_mask():
    data = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
    cube = HyperCube(data)
    assert datacube.drop_bands(cube, []) is cube
    out = datacube.drop_bands(cube, [0, 2])
    assert out.band_mask == (1,)
    np.testing.assert_array_equal(out.data[..., 0], data[..., 1])


def test_drop_bands_uses_original_indices():
    cube = datacube.drop_bands(HyperCube(np.zeros((1, 1, 5), dtype=np.float32)), [1])
    out = datacube.drop_bands(cube, [3])
    assert out.band_mask == (0, 2, 4)
    with pytest.raises(ValueError):
        datacube.drop_bands(cube, [1])  # already gone


def test_drop_bands_rejects_duplicates_and_normalized():
    cube = HyperCube(np.zeros((1, 1, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        datacube.drop_bands(cube, [1, 1])
    with pytest.raises(ValueError):
        datacube.drop_bands(datacube.normalize(cube), [0])


@pytest.mark.parametrize(
    "band, expected",
    [([0, 10], [-1, 1]), ([7, 7, 7], [0, 0, 0]), ([2, 4, 6], [-1, 0, 1])],
)
def test_normalize_examples(band, expected):
    data = np.array(band, dtype=np.float32).reshape(1, -1, 1)
    out = datacube.normalize(HyperCube(data))
    np.testing.assert_allclose(out.data.ravel(), expected, atol=1e-7)
    assert out.normalized


def test_normalize_twice_rejected():
    cube = datacube.normalize(HyperCube(np.ones((1, 2, 1), dtype=np.float32)))
    with pytest.raises(ValueError):
        datacube.normalize(cube)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(1, 6),
    st.integers(1, 4),
    st.floats(-1e3, 1e3),
    st.floats(0.0, 1e3),
    st.integers(0, 2**32 - 1),
)
def test_normalize_range_property(h, w, b, offset, spread, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    data = (offset + spread * rng.random((h, w, b))).astype(np.float32)
    out = datacube.normalize(HyperCube(data)).data
    assert out.min() >= -1.0 and out.max() <= 1.0
    for k in range(b):
        band = data[..., k].astype(np.float64)
        if band.max() > band.min():
            # band extremes map onto the endpoints
            assert out[..., k].min() == -1.0
            assert out[..., k].max() == 1.0
        else:
            assert np.all(out[..., k] == 0.0)


def test_normalize_global_scale():
    data = np.array([[[0.0, 5.0], [10.0, 5.0]]], dtype=np.float32)
    out = datacube.normalize(HyperCube(data), per_band=False).data
    np.testing.assert_allclose(out[0, :, 1], [0.0, 0.0])
    np.testing.assert_allclose(out[0, :, 0], [-1.0, 1.0])


def test_synth_deterministic():
    a = datacube.synth_dataset(SynthSpec(), seed=7)
    b = datacube.synth_dataset(SynthSpec(), seed=7)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].labels.tobytes() == b[1].labels.tobytes()
    c = datacube.synth_dataset(SynthSpec(), seed=8)
    assert a[0].data.tobytes() != c[0].data.tobytes()


def test_synth_zero_noise_equals_means():
    cube, labels = datacube.synth_dataset(SynthSpec(noise=0.0), seed=3)
    flat = cube.data.reshape(-1, cube.bands)
    lab = labels.labels.ravel()
    for c in range(labels.num_classes + 1):
        rows = flat[lab == c]
        if len(rows):
            assert np.all(rows == rows[0])


def test_synth_all_classes_present():
    for seed in range(10):
        _, labels = datacube.synth_dataset(SynthSpec(height=24, width=24, num_classes=6, regions=8), seed)
        assert set(np.unique(labels.labels)) >= set(range(1, 7))


def test_synth_nearest_mean_oracle(toy_raw):
    cube, labels = toy_raw
    means = datacube.class_means(cube, labels)
    pred = datacube.nearest_mean_predict(cube, means)
    m = labels.labels > 0
    oa = float((pred[m] == labels.labels[m]).mean())
    assert oa >= 0.99


@pytest.mark.parametrize("kw", [{"num_classes": 0}, {"num_classes": 1}, {"bands": 0}, {"noise": -1.0}])
def test_synth_spec_validation(kw):
    with pytest.raises(ValueError):
        datacube.synth_dataset(SynthSpec(**kw), seed=0)
