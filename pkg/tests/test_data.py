import numpy as np
import pytest

from meatvit.data import (
    HEADER_BYTES,
    Dataset,
    TaskFamily,
    batch_iter,
    dataset_from_bytes,
    dataset_to_bytes,
    family_shift,
    generate_task,
    load_raw_dataset,
    resize_nearest,
    write_raw_dataset,
)
from meatvit.errors import ConfigError, FormatError


def small_dataset(n=12, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, 3, 4, 4)).astype(np.float64) / 255.0
    return Dataset(pixels, rng.integers(0, classes, size=n), classes)


def test_generate_deterministic():
    fam = TaskFamily("bars", 10, "gray", seed=3)
    a_train, a_test = generate_task(fam, 100, 50)
    b_train, b_test = generate_task(fam, 100, 50)
    assert dataset_to_bytes(a_train) == dataset_to_bytes(b_train)
    assert dataset_to_bytes(a_test) == dataset_to_bytes(b_test)


def test_generate_class_balance():
    train, _ = generate_task(TaskFamily("grid", 10, "cool", seed=1), 1000, 100)
    np.testing.assert_array_equal(np.bincount(train.labels, minlength=10), [100] * 10)


def test_generate_unbalanced_request_rejected():
    with pytest.raises(ConfigError):
        generate_task(TaskFamily("bars", 10), 105, 100)


@pytest.mark.parametrize("kind", ["bars", "blobs", "grid", "rings"])
def test_generate_each_kind(kind):
    train, test = generate_task(TaskFamily(kind, 4, "warm", seed=2), 40, 20)
    assert train.images.shape == (40, 3, 32, 32)
    assert train.images.min() >= 0.0 and train.images.max() <= 1.0
    assert not np.array_equal(train.images[:20], test.images)


def test_disjoint_palettes_shift_channel_means():
    a, _ = generate_task(TaskFamily("bars", 10, "warm", seed=1), 200, 10)
    b, _ = generate_task(TaskFamily("bars", 10, "cool", seed=1), 200, 10)
    assert family_shift(a, b).max() > 0.1


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        TaskFamily("spirals")


def test_normalize_once():
    ds = small_dataset()
    mean, std = ds.channel_stats()
    once = ds.normalize(mean, std)
    twice = once.normalize(mean, std)
    assert twice is once
    np.testing.assert_allclose(once.images.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)


# ---------------------------------------------------------------- container


def test_container_roundtrip_pixels(tmp_path):
    ds = small_dataset()
    path = tmp_path / "d.meatdat"
    write_raw_dataset(ds, path)
    back = load_raw_dataset(path)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert dataset_to_bytes(back) == path.read_bytes()


def test_container_size_arithmetic():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.integers(0, 256, (100, 3, 32, 32)) / 255.0, rng.integers(0, 10, 100), 10)
    assert len(dataset_to_bytes(ds)) == HEADER_BYTES + 307_200 + 100


@pytest.mark.parametrize("offset, field", [(8, "count"), (12, "channels"), (24, "num_classes")])
def test_corrupt_header_names_field(offset, field):
    raw = bytearray(dataset_to_bytes(small_dataset()))
    raw[offset:offset + 4] = (0).to_bytes(4, "little")
    with pytest.raises(FormatError) as exc:
        dataset_from_bytes(bytes(raw))
    assert exc.value.field == field
    assert exc.value.offset == offset


def test_bad_magic():
    raw = b"XXXXXXXX" + dataset_to_bytes(small_dataset())[8:]
    with pytest.raises(FormatError, match="magic"):
        dataset_from_bytes(raw)


def test_truncated_file_reports_offset():
    raw = dataset_to_bytes(small_dataset())
    with pytest.raises(FormatError) as exc:
        dataset_from_bytes(raw[:-3])
    assert exc.value.field == "labels"
    assert exc.value.offset == len(raw) - 3


def test_label_overflow_reports_offset():
    ds = small_dataset(n=5, classes=3)
    raw = bytearray(dataset_to_bytes(ds))
    raw[-2] = 7
    with pytest.raises(FormatError) as exc:
        dataset_from_bytes(bytes(raw))
    assert exc.value.field == "labels"
    assert exc.value.offset == len(raw) - 2


def test_resize_nearest():
    ds = small_dataset()
    up = resize_nearest(ds, 8)
    assert up.images.shape == (12, 3, 8, 8)
    np.testing.assert_array_equal(up.images[:, :, ::2, ::2], ds.images)


# ---------------------------------------------------------------- batching


def test_batch_sizes():
    ds = small_dataset(n=10)
    assert [len(y) for _, y in batch_iter(ds, 4, seed=0)] == [4, 4, 2]


def test_batch_same_seed_same_order():
    ds = small_dataset(n=10)
    a = np.concatenate([y for _, y in batch_iter(ds, 3, seed=5)])
    b = np.concatenate([y for _, y in batch_iter(ds, 3, seed=5)])
    np.testing.assert_array_equal(a, b)


def test_batch_epoch_is_a_partition():
    ds = small_dataset(n=17)
    ds.labels = np.arange(17)
    ds.num_classes = 17
    seen = np.concatenate([y for _, y in batch_iter(ds, 4, seed=1)])
    np.testing.assert_array_equal(np.sort(seen), np.arange(17))


def test_batch_size_must_be_positive():
    with pytest.raises(ConfigError):
        list(batch_iter(small_dataset(), 0))
