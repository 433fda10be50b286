import os
import struct
from pathlib import Path

import numpy as np
import pytest

from tenconv.data import (
    LabeledImageSet,
    batches,
    load_cifar,
    load_mnist,
    make_synthetic,
)
from tenconv.errors import DataEmpty, FormatError


def write_idx_pair(tmp_path, images, labels):
    """images uint8 [N, H, W], labels uint8 [N]."""
    n, h, w = images.shape
    img_path = tmp_path / "images-idx3-ubyte"
    lbl_path = tmp_path / "labels-idx1-ubyte"
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.tobytes())
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())
    return img_path, lbl_path


class TestMnistLoader:
    def test_fixture_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(10, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=10, dtype=np.uint8)
        img_path, lbl_path = write_idx_pair(tmp_path, images, labels)
        ds = load_mnist(img_path, lbl_path)
        assert ds.images.shape == (10, 1, 28, 28)
        np.testing.assert_array_equal(ds.labels, labels)
        np.testing.assert_allclose(ds.images[:, 0] * 255.0, images, atol=1e-12)

    def test_pixel_255_scales_to_one(self, tmp_path):
        images = np.full((2, 4, 4), 255, dtype=np.uint8)
        labels = np.zeros(2, dtype=np.uint8)
        ds = load_mnist(*write_idx_pair(tmp_path, images, labels))
        assert ds.images.max() == 1.0

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        images = np.zeros((4, 8, 8), dtype=np.uint8)
        labels = np.zeros(4, dtype=np.uint8)
        img_path, lbl_path = write_idx_pair(tmp_path, images, labels)
        raw = img_path.read_bytes()
        img_path.write_bytes(raw[:-10])
        with pytest.raises(FormatError) as exc:
            load_mnist(img_path, lbl_path)
        assert "256" in str(exc.value) and "246" in str(exc.value)

    def test_bad_magic(self, tmp_path):
        images = np.zeros((2, 4, 4), dtype=np.uint8)
        labels = np.zeros(2, dtype=np.uint8)
        img_path, lbl_path = write_idx_pair(tmp_path, images, labels)
        raw = bytearray(img_path.read_bytes())
        raw[3] = 0x42
        img_path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_mnist(img_path, lbl_path)

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((3, 4, 4), dtype=np.uint8)
        labels = np.zeros(3, dtype=np.uint8)
        img_path, lbl_path = write_idx_pair(tmp_path, images, labels)
        with open(lbl_path, "wb") as f:
            f.write(struct.pack(">II", 0x00000801, 5))
            f.write(np.zeros(5, dtype=np.uint8).tobytes())
        with pytest.raises(FormatError):
            load_mnist(img_path, lbl_path)

    def test_loader_determinism(self, tmp_path):
        rng = np.random.default_rng(1)
        images = rng.integers(0, 256, size=(6, 5, 5), dtype=np.uint8)
        labels = rng.integers(0, 10, size=6, dtype=np.uint8)
        paths = write_idx_pair(tmp_path, images, labels)
        a = load_mnist(*paths)
        b = load_mnist(*paths)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    def test_real_t10k_if_available(self):
        root = os.environ.get("TENCONV_DATA_DIR")
        if not root:
            pytest.skip("TENCONV_DATA_DIR not set; real MNIST unavailable in this environment")
        img = Path(root) / "mnist" / "t10k-images-idx3-ubyte"
        lbl = Path(root) / "mnist" / "t10k-labels-idx1-ubyte"
        if not img.exists():
            pytest.skip(f"{img} not present")
        ds = load_mnist(img, lbl)
        assert len(ds) == 10_000


class TestCifarLoader:
    def make_batch(self, tmp_path, n, variant=10, name="batch.bin"):
        rng = np.random.default_rng(n)
        label_bytes = 1 if variant == 10 else 2
        records = []
        pixels = []
        for i in range(n):
            img = rng.integers(0, 256, size=3072, dtype=np.uint8)
            pixels.append(img)
            if variant == 10:
                head = bytes([i % 10])
            else:
                head = bytes([i % 20, i % 100])  # coarse, fine
            records.append(head + img.tobytes())
        path = tmp_path / name
        path.write_bytes(b"".join(records))
        return path, np.stack(pixels)

    def test_single_record_round_trip(self, tmp_path):
        path, pixels = self.make_batch(tmp_path, 1)
        ds = load_cifar([path], variant=10)
        assert ds.images.shape == (1, 3, 32, 32)
        np.testing.assert_allclose(
            ds.images.reshape(1, 3072) * 255.0, pixels, atol=1e-12
        )
        assert ds.labels[0] == 0

    def test_five_batches_concatenate(self, tmp_path):
        paths = [self.make_batch(tmp_path, 20, name=f"b{i}.bin")[0] for i in range(5)]
        ds = load_cifar(paths, variant=10)
        assert len(ds) == 100
        assert ds.class_count == 10

    def test_cifar100_uses_fine_label(self, tmp_path):
        path, _ = self.make_batch(tmp_path, 30, variant=100)
        ds = load_cifar([path], variant=100)
        assert ds.class_count == 100
        np.testing.assert_array_equal(ds.labels, np.arange(30) % 100)

    def test_bad_record_size(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(FormatError):
            load_cifar([path], variant=10)


class TestSynthetic:
    @staticmethod
    def nearest_mean_accuracy(ds):
        flat = ds.images.reshape(len(ds), -1)
        means = np.stack([flat[ds.labels == k].mean(axis=0) for k in range(ds.class_count)])
        d = ((flat[:, None, :] - means[None]) ** 2).sum(axis=2)
        return float((np.argmin(d, axis=1) == ds.labels).mean())

    def test_margin_three_is_linearly_separable(self):
        ds = make_synthetic(2, 100, geometry=(1, 6, 6), seed=0, margin=3.0)
        assert self.nearest_mean_accuracy(ds) == 1.0

    def test_zero_margin_is_chance_level(self):
        ds = make_synthetic(2, 300, geometry=(1, 6, 6), seed=0, margin=0.0)
        acc = self.nearest_mean_accuracy(ds)
        assert 0.35 < acc < 0.65

    def test_same_seed_identical_bytes(self):
        a = make_synthetic(3, 10, seed=5)
        b = make_synthetic(3, 10, seed=5)
        assert a.images.tobytes() == b.images.tobytes()

    def test_values_in_unit_interval(self):
        ds = make_synthetic(4, 50, seed=2, margin=5.0, sigma=0.3)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


class TestBatches:
    def test_partial_batch_sizes(self):
        ds = make_synthetic(2, 50, seed=1)  # N = 100
        sizes = [len(labels) for _, labels in batches(ds, 64, seed=0, epoch=0)]
        assert sizes == [64, 36]

    def test_epochs_get_different_true_permutations(self):
        ds = make_synthetic(2, 30, seed=1)
        ds.images[:, 0, 0, 0] = np.arange(60) / 60.0  # tag samples
        seen = []
        for epoch in (0, 1):
            tags = np.concatenate(
                [imgs[:, 0, 0, 0] for imgs, _ in batches(ds, 16, seed=3, epoch=epoch)]
            )
            seen.append(tags)
            assert sorted(tags.tolist()) == sorted(ds.images[:, 0, 0, 0].tolist())
        assert not np.array_equal(seen[0], seen[1])

    def test_concatenated_batches_are_dataset_multiset(self):
        ds = make_synthetic(3, 17, seed=4)
        got = np.concatenate([imgs for imgs, _ in batches(ds, 10, seed=0, epoch=2)])
        want = np.sort(ds.images.reshape(len(ds), -1), axis=0)
        np.testing.assert_array_equal(np.sort(got.reshape(len(ds), -1), axis=0), want)

    def test_empty_and_bad_sizes(self):
        ds = make_synthetic(2, 5, seed=1)
        with pytest.raises(DataEmpty):
            list(batches(ds, 0, seed=0, epoch=0))
        with pytest.raises(DataEmpty):
            LabeledImageSet(np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=np.int64), 2)

    def test_subset_seeded(self):
        ds = make_synthetic(2, 50, seed=1)
        a = ds.subset(20, seed=9)
        b = ds.subset(20, seed=9)
        assert len(a) == 20
        assert np.array_equal(a.images, b.images)
