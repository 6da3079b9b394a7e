import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from crackinspect.imaging import (
    Annotation,
    ImageFormatError,
    Polyline,
    components_to_mask,
    connected_components,
    downsample,
    downsampled_shape,
    load_annotation,
    load_image,
    load_mask,
    quantize,
    rasterize_annotation,
    save_annotation,
    save_image,
    save_mask,
)

from oracles import ordered_components


def _write_pgm(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


# -- loading -----------------------------------------------------------------

def test_load_pgm_linear_map(tmp_path):
    p = tmp_path / "a.pgm"
    _write_pgm(p, [[0, 255], [128, 64]])
    img = load_image(p)
    assert img.dtype == np.float64
    assert img.tolist() == [[0.0, 1.0], [128 / 255, 64 / 255]]


def test_load_png(tmp_path):
    p = tmp_path / "a.png"
    Image.fromarray(np.array([[10, 20, 30]], dtype=np.uint8), mode="L").save(p)
    assert load_image(p).tolist() == [[10 / 255, 20 / 255, 30 / 255]]


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="file not found"):
        load_image(tmp_path / "nope.pgm")


def test_sixteen_bit_png_rejected(tmp_path):
    p = tmp_path / "deep.png"
    Image.fromarray(np.full((3, 3), 4000, dtype=np.uint16)).save(p)
    with pytest.raises(ImageFormatError, match="unsupported bit depth"):
        load_image(p)


def test_dimension_overflow(tmp_path, monkeypatch):
    import crackinspect.imaging as imaging

    p = tmp_path / "big.pgm"
    _write_pgm(p, np.zeros((4, 5)))
    monkeypatch.setattr(imaging, "MAX_PIXELS", 19)
    with pytest.raises(ImageFormatError, match="dimension overflow"):
        load_image(p)


@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))))
@settings(max_examples=40)
def test_image_round_trip(tmp_path_factory, raw):
    d = tmp_path_factory.mktemp("img")
    img = raw / 255.0
    for name in ("x.pgm", "x.png"):
        save_image(img, d / name)
        assert np.array_equal(load_image(d / name), img)


def test_quantize_matches_round_trip(tmp_path):
    img = np.random.default_rng(3).random((7, 9))
    save_image(img, tmp_path / "q.pgm")
    assert np.array_equal(load_image(tmp_path / "q.pgm"), quantize(img))


# -- masks ---------------------------------------------------------------------

@given(arrays(np.bool_, st.tuples(st.integers(1, 16), st.integers(1, 16))))
@settings(max_examples=40)
def test_mask_round_trip(tmp_path_factory, mask):
    d = tmp_path_factory.mktemp("mask")
    save_mask(mask, d / "m.pgm")
    assert np.array_equal(load_mask(d / "m.pgm"), mask)


def test_full_mask_payload_is_255(tmp_path):
    p = tmp_path / "m.pgm"
    save_mask(np.ones((3, 4), dtype=bool), p)
    payload = p.read_bytes()[-12:]
    assert payload == bytes([255] * 12)
    assert p.read_bytes().startswith(b"P5")


def test_mask_value_seven_rejected(tmp_path):
    p = tmp_path / "bad.pgm"
    _write_pgm(p, [[0, 255], [7, 0]])
    with pytest.raises(ImageFormatError, match="mask pixel not 0 or 255"):
        load_mask(p)


# -- downsampling ------------------------------------------------------------

def test_downsample_camera_to_vga_shape():
    assert downsampled_shape((2748, 3840), 0.1667) == (458, 640)


def test_downsample_identity_copy():
    img = np.random.default_rng(0).random((5, 6))
    out = downsample(img, 1.0)
    assert np.array_equal(out, img) and out is not img


def test_downsample_constant_half():
    out = downsample(np.full((4, 4), 0.5), 0.5)
    assert out.shape == (2, 2) and np.all(out == 0.5)


def test_downsample_block_average():
    img = np.arange(16, dtype=float).reshape(4, 4) / 15
    out = downsample(img, 0.5)
    expect = img.reshape(2, 2, 2, 2).mean(axis=(1, 3))
    assert np.allclose(out, expect, atol=1e-15)


@pytest.mark.parametrize("factor", [0.0, -0.5, 1.5])
def test_downsample_bad_factor(factor):
    with pytest.raises(ValueError):
        downsample(np.zeros((4, 4)), factor)


@given(st.integers(1, 40), st.integers(1, 40), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_downsample_constant_exact(h, w, factor, value):
    out = downsample(np.full((h, w), value), factor)
    assert out.shape == downsampled_shape((h, w), factor)
    assert min(out.shape) >= 1
    assert np.all(out == value)


# -- connected components ----------------------------------------------------

def test_empty_mask_no_components():
    assert connected_components(np.zeros((5, 5), dtype=bool)) == []


def test_diagonal_pixels_join():
    m = np.zeros((3, 3), dtype=bool)
    m[0, 0] = m[1, 1] = True
    comps = connected_components(m)
    assert len(comps) == 1 and comps[0].area == 2


def test_blob_order_seven_then_three():
    m = np.zeros((10, 10), dtype=bool)
    m[0, 0:3] = True  # 3-pixel blob, earlier position
    m[5:7, 5:8] = True
    m[7, 5] = True  # 7-pixel blob
    comps = connected_components(m)
    assert [c.area for c in comps] == [7, 3]
    assert [set(c.pixels) for c in comps] == ordered_components(m)
    assert comps[1].bounding_box == (0, 0, 0, 2)


def test_equal_area_tiebreak_by_position():
    m = np.zeros((6, 6), dtype=bool)
    m[4, 4:6] = True
    m[0, 3:5] = True
    comps = connected_components(m)
    assert [c.bounding_box[:2] for c in comps] == [(0, 3), (4, 4)]


def test_components_match_flood_fill_on_random_masks():
    rng = np.random.default_rng(12345)
    for trial in range(1000):
        density = rng.uniform(0.05, 0.6)
        m = rng.random((32, 32)) < density
        got = [set(c.pixels) for c in connected_components(m)]
        assert got == ordered_components(m), f"trial {trial}"


@given(arrays(np.bool_, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_components_partition_mask(m):
    comps = connected_components(m)
    assert sum(c.area for c in comps) == int(m.sum())
    assert np.array_equal(components_to_mask(comps, m.shape), m)
    seen = set()
    for c in comps:
        assert c.area == len(c.pixels) > 0
        assert not (seen & c.pixels)
        seen |= c.pixels
    assert [c.id for c in comps] == list(range(len(comps)))


# -- annotations ---------------------------------------------------------------

def test_annotation_round_trip_and_raster(tmp_path):
    ann = Annotation("t0", 20, 30, [Polyline([(10.0, 2.0), (10.0, 27.0)], 3.0)],
                     [(0, 0), (0, 29), (19, 29), (19, 0)])
    save_annotation(ann, tmp_path / "a.json")
    back = load_annotation(tmp_path / "a.json")
    assert back.to_dict() == ann.to_dict()
    m = rasterize_annotation(back)
    assert m.shape == (20, 30)
    # A horizontal stroke of width 3 covers rows 9..11 between the endpoints.
    assert m[9:12, 2:28].all()
    assert not m[:8].any() and not m[13:].any()
    assert len(connected_components(m)) == 1


def test_hairline_stroke_stays_connected():
    ann = Annotation("t", 40, 40, [Polyline([(1.0, 1.0), (37.3, 29.9)], 1.0)])
    assert len(connected_components(rasterize_annotation(ann))) == 1


def test_annotation_rejects_bad_width():
    with pytest.raises(ValueError):
        Annotation.from_dict({"tile_id": "t", "height": 5, "width": 5,
                              "cracks": [{"vertices": [[0, 0], [1, 1]], "width": 0}]})
