import math

import numpy as np
import pytest
from PIL import Image

from xrayseq.errors import DecodeError
from xrayseq.images import (
    ArraySource,
    ImageFolder,
    RawImage,
    assemble_batch,
    check_image_tensor,
    collapse_channels,
    load_grayscale,
    resize_normalize,
    to_channels,
)
from xrayseq.metadata import LABEL_INDEX
from xrayseq.samples import SampleSet


def reference_bilinear(grid, out_h, out_w):
    """Scalar half-pixel-centre bilinear resampler with edge clamping."""
    in_h, in_w = len(grid), len(grid[0])
    out = [[0.0] * out_w for _ in range(out_h)]

    def coord(d, n_in, n_out):
        src = (d + 0.5) * n_in / n_out - 0.5
        src = max(src, 0.0)
        lo = min(int(math.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        return lo, hi, src - lo

    for i in range(out_h):
        y0, y1, fy = coord(i, in_h, out_h)
        for j in range(out_w):
            x0, x1, fx = coord(j, in_w, out_w)
            top = grid[y0][x0] * (1 - fx) + grid[y0][x1] * fx
            bottom = grid[y1][x0] * (1 - fx) + grid[y1][x1] * fx
            out[i][j] = top * (1 - fy) + bottom * fy
    return out


def test_load_8bit_png(tmp_path):
    arr = (np.arange(1024 * 1024) % 256).astype(np.uint8).reshape(1024, 1024)
    Image.fromarray(arr, mode="L").save(tmp_path / "x.png")
    raw = load_grayscale(tmp_path / "x.png")
    assert raw.pixels.shape == (1024, 1024)
    assert raw.max_value == 255
    assert raw.pixels.min() == 0 and raw.pixels.max() == 255
    np.testing.assert_array_equal(raw.pixels, arr)


def test_load_rgb_equal_channels(tmp_path, rng):
    gray = rng.integers(0, 256, size=(40, 30), dtype=np.uint8)
    Image.fromarray(np.stack([gray] * 3, axis=-1), mode="RGB").save(tmp_path / "c.png")
    np.testing.assert_array_equal(load_grayscale(tmp_path / "c.png").pixels, gray)


def test_load_16bit_keeps_range(tmp_path):
    arr = np.array([[0, 1000], [40000, 65535]], dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "d.png")
    raw = load_grayscale(tmp_path / "d.png")
    assert raw.max_value == 65535
    np.testing.assert_array_equal(raw.pixels, arr)
    out = resize_normalize(raw, 2)
    np.testing.assert_allclose(out, arr / 65535.0, atol=1e-7)


def test_truncated_png(tmp_path, rng):
    Image.fromarray(rng.integers(0, 256, (64, 64), dtype=np.uint8), mode="L").save(tmp_path / "t.png")
    data = (tmp_path / "t.png").read_bytes()
    (tmp_path / "t.png").write_bytes(data[: len(data) // 2])
    with pytest.raises(DecodeError):
        load_grayscale(tmp_path / "t.png")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_grayscale(tmp_path / "none.png")


@pytest.mark.parametrize("value,expected", [(255, 1.0), (0, 0.0)])
def test_constant_images(value, expected):
    out = resize_normalize(RawImage(np.full((1024, 1024), value, np.uint8), 255.0))
    assert out.shape == (128, 128)
    assert np.all(out == expected)


def test_upsample_matches_reference():
    grid = [[0, 255], [255, 0]]
    expected = np.array(reference_bilinear(grid, 128, 128)) / 255.0
    out = resize_normalize(RawImage(np.array(grid, np.uint8), 255.0))
    np.testing.assert_allclose(out, expected, atol=1e-6)
    centre = out[60:68, 60:68]
    np.testing.assert_allclose(centre, expected[60:68, 60:68], atol=1e-6)


def test_downsample_matches_reference(rng):
    grid = rng.integers(0, 256, size=(37, 53)).tolist()
    expected = np.array(reference_bilinear(grid, 16, 16)) / 255.0
    out = resize_normalize(RawImage(np.array(grid, np.uint8), 255.0), 16)
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_resize_idempotent(rng):
    once = resize_normalize(RawImage(rng.integers(0, 256, (300, 200), dtype=np.uint8), 255.0))
    twice = resize_normalize(once)
    np.testing.assert_allclose(once, twice, atol=1e-6)
    check_image_tensor(to_channels(once, 1))


def test_channel_replication(rng):
    img = rng.random((128, 128)).astype(np.float32)
    three = to_channels(img, 3)
    assert three.shape == (128, 128, 3)
    assert np.array_equal(three[..., 0], three[..., 2])
    assert np.array_equal(collapse_channels(three), img)


def _sample(i, target="Mass"):
    return SampleSet(i, 1, "PA", (f"a{i}", f"b{i}", f"c{i}"), (0, 1, 2), target, frozenset({target}))


def test_assemble_batch(rng):
    images = {f"{p}{i}": rng.random((128, 128)) for i in range(2) for p in "abc"}
    for channels in (1, 3):
        source = ArraySource(images, channels=channels)
        batch = assemble_batch([_sample(0), _sample(1, "No Finding")], source)
        assert batch.first.shape == (2, 128, 128, channels)
        assert batch.targets.shape == (2, 15)
        assert batch.targets[1, LABEL_INDEX["No Finding"]] == 1
        np.testing.assert_array_equal(batch.targets.sum(axis=1), [1, 1])
        np.testing.assert_allclose(batch.second[1, ..., 0], images["b1"], atol=1e-7)
        again = assemble_batch([_sample(0), _sample(1, "No Finding")], source, workers=3)
        for x, y in zip(batch.inputs, again.inputs):
            assert x.tobytes() == y.tobytes()


def test_assemble_batch_error_names_sample():
    with pytest.raises(FileNotFoundError, match="sample 7"):
        assemble_batch([_sample(7)], ArraySource({}))


def test_image_folder_cache(tmp_path, rng):
    img = rng.integers(0, 256, (256, 256), dtype=np.uint8)
    Image.fromarray(img, mode="L").save(tmp_path / "p.png")
    cached = ImageFolder(tmp_path, cache_dir=tmp_path / "cache")
    first = cached("p.png")
    assert len(list((tmp_path / "cache").iterdir())) == 1
    fresh = ImageFolder(tmp_path, cache_dir=tmp_path / "cache")("p.png")
    plain = ImageFolder(tmp_path)("p.png")
    assert first.tobytes() == fresh.tobytes() == plain.tobytes()
    check_image_tensor(first)
