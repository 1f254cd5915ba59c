import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pneunet.datapipe import (
    AugmentationConfig, ArrayDataset, DatasetIndex, DecodeError, ImageBuffer,
    augment, bilinear_resize_array, decode_image, hflip, resize_bilinear,
    rotate, scan_dataset, shuffled_indices, to_tensor,
)


def gray(arr):
    return ImageBuffer(np.asarray(arr, dtype=np.uint8))


def make_pgm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes()


# ---------------------------------------------------------------------------
# scan_dataset


def _make_tree(root, spec):
    for split, classes in spec.items():
        for cls, n in classes.items():
            d = root / split / cls
            d.mkdir(parents=True)
            for i in range(n):
                (d / f"img{i:03d}.pgm").write_bytes(
                    make_pgm(np.full((4, 4), 128, np.uint8)))


def test_scan_counts_fixture(tmp_path):
    _make_tree(tmp_path, {"train": {"NORMAL": 2, "PNEUMONIA": 3},
                          "test": {"NORMAL": 1, "PNEUMONIA": 1},
                          "val": {"NORMAL": 1, "PNEUMONIA": 0}})
    index = scan_dataset(tmp_path)
    counts = index.counts()
    assert counts["train"] == {"total": 5, "NORMAL": 2, "PNEUMONIA": 3}
    assert counts["test"]["total"] == 2
    labels = [label for _, label in index.entries["train"]]
    assert sorted(labels) == [0, 0, 1, 1, 1]


def test_scan_missing_split(tmp_path):
    (tmp_path / "train" / "NORMAL").mkdir(parents=True)
    with pytest.raises(FileNotFoundError, match="split"):
        scan_dataset(tmp_path)


def test_scan_empty_root(tmp_path):
    with pytest.raises(FileNotFoundError):
        scan_dataset(tmp_path / "nothing")


def test_scan_unknown_class_folder_rejected(tmp_path):
    _make_tree(tmp_path, {"train": {"NORMAL": 1, "PNEUMONIA": 1},
                          "test": {"NORMAL": 1, "PNEUMONIA": 1},
                          "val": {"NORMAL": 1, "PNEUMONIA": 1}})
    (tmp_path / "train" / "COVID").mkdir()
    with pytest.raises(ValueError, match="unknown class"):
        scan_dataset(tmp_path)


def test_scan_deterministic_lexicographic(tmp_path):
    _make_tree(tmp_path, {"train": {"NORMAL": 3, "PNEUMONIA": 2},
                          "test": {"NORMAL": 1, "PNEUMONIA": 1},
                          "val": {"NORMAL": 1, "PNEUMONIA": 1}})
    a = scan_dataset(tmp_path).entries["train"]
    b = scan_dataset(tmp_path).entries["train"]
    assert a == b
    paths = [str(p) for p, _ in a]
    assert paths == sorted(paths)


# ---------------------------------------------------------------------------
# decode_image


def test_decode_pgm_exact_bytes():
    data = make_pgm(np.array([[0, 85], [170, 255]], np.uint8))
    img = decode_image(data, "pgm")
    assert img.channels == 1
    assert np.array_equal(img.pixels[:, :, 0], [[0, 85], [170, 255]])


def test_decode_pgm_with_comment():
    data = b"P5\n# a comment\n2 2\n255\n" + bytes([1, 2, 3, 4])
    img = decode_image(data)
    assert np.array_equal(img.pixels[:, :, 0], [[1, 2], [3, 4]])


def test_decode_truncated_pgm_never_partial():
    data = make_pgm(np.zeros((4, 4), np.uint8))[:-3]
    with pytest.raises(DecodeError, match="truncated"):
        decode_image(data)


def test_decode_jpeg_roundtrip_mid_gray():
    # encode a uniform mid-gray with a reference encoder, decode, compare
    buf = io.BytesIO()
    Image.fromarray(np.full((16, 16), 128, np.uint8), "L").save(
        buf, format="JPEG", quality=95)
    img = decode_image(buf.getvalue())
    assert img.channels == 1
    assert np.all(np.abs(img.pixels.astype(int) - 128) <= 2)


def test_decode_png_grayscale_stays_1ch():
    buf = io.BytesIO()
    Image.fromarray(np.arange(16, dtype=np.uint8).reshape(4, 4), "L").save(
        buf, format="PNG")
    img = decode_image(buf.getvalue())
    assert img.channels == 1
    assert np.array_equal(img.pixels[:, :, 0],
                          np.arange(16, dtype=np.uint8).reshape(4, 4))


def test_decode_rgb_png_stays_3ch():
    buf = io.BytesIO()
    rgb = np.random.default_rng(0).integers(0, 255, (5, 6, 3), dtype=np.uint8)
    Image.fromarray(rgb, "RGB").save(buf, format="PNG")
    img = decode_image(buf.getvalue())
    assert img.channels == 3
    assert np.array_equal(img.pixels, rgb)


def test_decode_unknown_format():
    with pytest.raises(DecodeError, match="unrecognized"):
        decode_image(b"GIF89a....")


def test_decode_empty_payload():
    with pytest.raises(DecodeError, match="empty"):
        decode_image(b"")


def test_decode_corrupt_jpeg():
    with pytest.raises(DecodeError):
        decode_image(b"\xff\xd8\xff\xe0garbage")


# ---------------------------------------------------------------------------
# resize_bilinear


def test_resize_same_size_bitwise(rng):
    img = gray(rng.integers(0, 256, (7, 5), dtype=np.uint8))
    out = resize_bilinear(img, 5, 7)
    assert np.array_equal(out.pixels, img.pixels)


def test_resize_1x1_constant():
    out = resize_bilinear(gray([[77]]), 4, 3)
    assert out.pixels.shape == (3, 4, 1)
    assert np.all(out.pixels == 77)


def test_resize_zero_target_rejected(rng):
    img = gray(rng.integers(0, 256, (4, 4), dtype=np.uint8))
    with pytest.raises(ValueError, match=">= 1"):
        resize_bilinear(img, 0, 4)


def test_resize_2x2_to_4x4_interpolation_oracle():
    # Oracle: direct evaluation of the half-pixel formula per output pixel,
    # computed independently of the vectorized implementation.
    src = np.array([[0.0, 2.0], [2.0, 4.0]])

    def sample(y, x):
        sy = np.clip((y + 0.5) * (2 / 4) - 0.5, 0, 1)
        sx = np.clip((x + 0.5) * (2 / 4) - 0.5, 0, 1)
        y0, x0 = int(np.floor(sy)), int(np.floor(sx))
        y1, x1 = min(y0 + 1, 1), min(x0 + 1, 1)
        wy, wx = sy - y0, sx - x0
        return ((1 - wy) * (1 - wx) * src[y0, x0] + (1 - wy) * wx * src[y0, x1]
                + wy * (1 - wx) * src[y1, x0] + wy * wx * src[y1, x1])

    expected = np.array([[sample(y, x) for x in range(4)] for y in range(4)])
    got = bilinear_resize_array(src, 4, 4)
    assert np.allclose(got, expected)
    # corners replicate the corner pixels; center follows the blend
    assert got[0, 0] == 0.0 and got[3, 3] == 4.0
    assert got[1, 1] == sample(1, 1)


def test_resize_float_grid_and_uint8_agree(rng):
    img = gray(rng.integers(0, 256, (6, 8), dtype=np.uint8))
    out = resize_bilinear(img, 16, 12)
    ref = bilinear_resize_array(img.pixels.astype(np.float64), 12, 16)
    assert np.array_equal(out.pixels,
                          np.clip(np.rint(ref), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# augment


def test_hflip_mirror():
    out = hflip(gray([[1, 2], [3, 4]]))
    assert np.array_equal(out.pixels[:, :, 0], [[2, 1], [4, 3]])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_hflip_involution(seed):
    img = gray(np.random.default_rng(seed).integers(0, 256, (5, 7), dtype=np.uint8))
    assert np.array_equal(hflip(hflip(img)).pixels, img.pixels)


def test_rotate_zero_identity(rng):
    img = gray(rng.integers(0, 256, (6, 6), dtype=np.uint8))
    assert np.array_equal(rotate(img, 0.0).pixels, img.pixels)


def test_rotate_180_point_symmetry():
    out = rotate(gray([[1, 2], [3, 4]]), 180.0)
    assert np.array_equal(out.pixels[:, :, 0], [[4, 3], [2, 1]])


def test_rotate_90_of_square(rng):
    img = gray(rng.integers(0, 256, (5, 5), dtype=np.uint8))
    out = rotate(img, 90.0)
    # positive angle = clockwise in screen orientation = np.rot90(k=-1)
    expected = np.rot90(img.pixels[:, :, 0], k=-1)
    assert np.array_equal(out.pixels[:, :, 0], expected)


def test_augment_preserves_shape_and_range(rng):
    img = gray(rng.integers(0, 256, (16, 16), dtype=np.uint8))
    cfg = AugmentationConfig(hflip_prob=0.5, rotation_max_degrees=10)
    out = augment(img, cfg, rng)
    assert out.pixels.shape == img.pixels.shape


def test_augmentation_config_validation():
    with pytest.raises(ValueError, match="hflip_prob"):
        AugmentationConfig(hflip_prob=1.5)
    with pytest.raises(ValueError, match="rotation"):
        AugmentationConfig(rotation_max_degrees=-1)


# ---------------------------------------------------------------------------
# to_tensor


def test_to_tensor_range_endpoints():
    img = gray([[0, 255]])
    t = to_tensor(img, 1)
    assert t.shape == (1, 1, 2)
    assert t.data[0, 0, 0] == 0.0
    assert t.data[0, 0, 1] == 1.0


def test_to_tensor_replicates_gray_to_3ch():
    t = to_tensor(gray([[128]]), 3)
    assert t.shape == (3, 1, 1)
    assert np.allclose(t.data, 128 / 255)


def test_to_tensor_rejects_3_to_1():
    img = ImageBuffer(np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(ValueError, match="channels"):
        to_tensor(img, 1)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_to_tensor_always_in_unit_interval(seed):
    img = gray(np.random.default_rng(seed).integers(0, 256, (4, 4), dtype=np.uint8))
    t = to_tensor(img, 3)
    assert np.all((t.data >= 0) & (t.data <= 1))


# ---------------------------------------------------------------------------
# shuffle + batches


def test_shuffled_indices_is_permutation():
    order = shuffled_indices(100, seed=42, epoch=3)
    assert sorted(order) == list(range(100))


def test_shuffled_indices_deterministic_and_epoch_dependent():
    assert shuffled_indices(50, 1, 0) == shuffled_indices(50, 1, 0)
    assert shuffled_indices(50, 1, 0) != shuffled_indices(50, 1, 1)
    assert shuffled_indices(50, 1, 0) != shuffled_indices(50, 2, 0)


def _dataset(n=10, size=16):
    rng = np.random.default_rng(0)
    imgs = [rng.integers(0, 256, (size, size), dtype=np.uint8) for _ in range(n)]
    labels = rng.integers(0, 2, n)
    return ArrayDataset({"train": (imgs, labels)}, channels=1)


def test_partial_batch_emitted():
    ds = _dataset(10)
    batches = list(ds.batches("train", 16))
    assert len(batches) == 1
    assert batches[0][0].shape == (10, 1, 16, 16)


def test_batch_count_matches_ceil():
    ds = _dataset(50)
    assert len(list(ds.batches("train", 16))) == -(-50 // 16)


def test_same_seed_same_order():
    ds = _dataset(20)
    run1 = [yb.tolist() for _, yb in ds.batches("train", 8, shuffle_seed=5, epoch=0)]
    run2 = [yb.tolist() for _, yb in ds.batches("train", 8, shuffle_seed=5, epoch=0)]
    assert run1 == run2


def test_epoch_covers_split_exactly_once():
    ds = _dataset(23)
    seen = []
    for xb, yb in ds.batches("train", 8, shuffle_seed=7, epoch=2):
        seen.extend(np.asarray(xb.data[:, 0] * 255).astype(np.uint8).reshape(len(yb), -1)[:, 0].tolist())
    assert len(seen) == 23
    # multiset equality against the raw images' first pixels
    raw = [int(img[0, 0]) for img in ds.splits["train"][0]]
    assert sorted(seen) == sorted(raw)


def test_labels_aligned_with_samples():
    rng = np.random.default_rng(1)
    # label == first pixel value so alignment is directly checkable
    imgs, labels = [], []
    for i in range(12):
        label = i % 2
        img = np.full((8, 8), label * 255, np.uint8)
        imgs.append(img)
        labels.append(label)
    ds = ArrayDataset({"train": (imgs, labels)}, channels=1)
    for xb, yb in ds.batches("train", 5, shuffle_seed=3, epoch=1):
        firsts = xb.data[:, 0, 0, 0]
        assert np.array_equal((firsts > 0.5).astype(int), yb)


def test_empty_split_rejected():
    ds = ArrayDataset({"train": ([], [])}, channels=1)
    with pytest.raises(ValueError, match="empty"):
        list(ds.batches("train", 4))


def test_augment_does_not_change_labels_or_dims():
    ds = _dataset(9)
    plain = list(ds.batches("train", 4, shuffle_seed=1, epoch=0))
    augd = list(ds.batches("train", 4, shuffle_seed=1, epoch=0, augment=True))
    for (xa, ya), (xb, yb) in zip(plain, augd):
        assert xa.shape == xb.shape
        assert np.array_equal(ya, yb)
