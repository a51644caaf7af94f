import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpsa_lab import data as D
from gpsa_lab.errors import ConfigError, ContractError, FormatError


def write_idx(path, arr, magic):
    arr = np.asarray(arr, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


@pytest.fixture
def idx_pair(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(1, 3, 4) * 20
    write_idx(tmp_path / "img.idx", img, D.IDX_IMAGES)
    write_idx(tmp_path / "lbl.idx", [7], D.IDX_LABELS)
    return tmp_path / "img.idx", tmp_path / "lbl.idx", img


class TestIdx:
    def test_single_image_round_trip(self, idx_pair):
        ip, lp, img = idx_pair
        s = D.load_idx(ip, lp)
        assert len(s) == 1 and s.labels.tolist() == [7]
        assert s.image_shape == (1, 3, 4)
        restored = s.images * s.stats.std[:, None, None] + s.stats.mean[:, None, None]
        np.testing.assert_allclose(restored[0, 0], img[0], atol=1e-9)

    def test_truncated_payload(self, idx_pair):
        ip, lp, _ = idx_pair
        raw = ip.read_bytes()
        ip.write_bytes(raw[:-3])
        with pytest.raises(FormatError, match="byte offset"):
            D.load_idx(ip, lp)

    def test_truncated_header(self, tmp_path):
        (tmp_path / "x").write_bytes(b"\x00\x00")
        with pytest.raises(FormatError, match="byte offset 2"):
            D.load_idx(tmp_path / "x", tmp_path / "x")

    def test_bad_magic(self, idx_pair):
        ip, lp, _ = idx_pair
        with pytest.raises(FormatError, match="magic"):
            D.load_idx(lp, ip)

    def test_count_mismatch(self, idx_pair, tmp_path):
        ip, _, _ = idx_pair
        write_idx(tmp_path / "two.idx", [1, 2], D.IDX_LABELS)
        with pytest.raises(FormatError, match="1 images but 2 labels"):
            D.load_idx(ip, tmp_path / "two.idx")

    def test_full_mnist_counts(self):
        root = os.environ.get(D.DATA_ROOT_ENV)
        ip = Path(root or "/nonexistent") / "train-images-idx3-ubyte"
        if not ip.is_file():
            pytest.skip("MNIST not present under the data root")
        s = D.load_idx(ip, ip.with_name("train-labels-idx1-ubyte"))
        raw = ip.with_name("train-labels-idx1-ubyte").read_bytes()[8:]
        assert len(s) == 60000
        np.testing.assert_array_equal(s.class_counts(), np.bincount(np.frombuffer(raw, np.uint8), minlength=10))


def cifar_bytes(labels, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(len(labels), 3072), dtype=np.uint8)
    recs = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    return recs.tobytes(), pixels


class TestCifar:
    def test_two_records(self, tmp_path):
        raw, pixels = cifar_bytes([3, 9])
        (tmp_path / "b.bin").write_bytes(raw)
        imgs, labels = D.read_cifar_records(tmp_path / "b.bin")
        assert labels.tolist() == [3, 9]
        assert imgs.shape == (2, 3, 32, 32)
        # CHW: channel 1, row 2, col 5 sits at 1024 + 2*32 + 5
        assert imgs[1, 1, 2, 5] == pixels[1, 1024 + 69]
        np.testing.assert_array_equal(imgs.reshape(2, -1), pixels)
        s = D.load_cifar_binary(tmp_path / "b.bin")
        assert s.labels.tolist() == [3, 9] and s.num_classes == 10

    def test_wrong_size(self, tmp_path):
        raw, _ = cifar_bytes([1])
        (tmp_path / "b.bin").write_bytes(raw + b"\x00")
        with pytest.raises(FormatError, match="multiple of 3073"):
            D.load_cifar_binary(tmp_path / "b.bin")

    def test_test_split_uses_train_stats(self, tmp_path):
        for name, labels, seed in (("tr.bin", [0, 1, 2], 1), ("te.bin", [4], 2)):
            (tmp_path / name).write_bytes(cifar_bytes(labels, seed)[0])
        tr = D.load_cifar_binary(tmp_path / "tr.bin")
        te = D.load_cifar_binary(tmp_path / "te.bin", "test", stats=tr.stats)
        assert te.stats is tr.stats
        raw, _ = D.read_cifar_records(tmp_path / "te.bin")
        np.testing.assert_allclose(te.images, tr.stats.apply(raw.astype(float)))

    def test_missing_root(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            D.cifar10_files(tmp_path)

    def test_env_root_unset(self, monkeypatch):
        monkeypatch.delenv(D.DATA_ROOT_ENV, raising=False)
        with pytest.raises(ConfigError, match=D.DATA_ROOT_ENV):
            D.data_root()


def balanced(per_class=100, classes=10, split="train"):
    return D.synthetic_blobs(classes, per_class, 8, seed=0, channels=1, split=split)


class TestSubsample:
    def test_identity_at_one(self):
        s = balanced(10)
        sub = D.subsample(s, D.SubsampleSpec(1.0, seed=3))
        np.testing.assert_array_equal(sub.indices, s.indices)
        np.testing.assert_array_equal(sub.images, s.images)

    def test_tenth_of_hundred(self):
        sub = D.subsample(balanced(), D.SubsampleSpec(0.1))
        assert sub.class_counts().tolist() == [10] * 10

    def test_seeds(self):
        s = balanced()
        a = D.subsample(s, D.SubsampleSpec(0.3, seed=1))
        b = D.subsample(s, D.SubsampleSpec(0.3, seed=1))
        c = D.subsample(s, D.SubsampleSpec(0.3, seed=2))
        np.testing.assert_array_equal(a.indices, b.indices)
        assert not np.array_equal(a.indices, c.indices)
        np.testing.assert_array_equal(a.class_counts(), c.class_counts())

    def test_nested(self):
        s = balanced()
        small = D.subsample(s, D.SubsampleSpec(0.1, seed=5))
        big = D.subsample(s, D.SubsampleSpec(0.3, seed=5))
        assert set(small.indices) <= set(big.indices)

    def test_test_split_untouched(self):
        s = balanced(split="test")
        assert D.subsample(s, D.SubsampleSpec(0.1)) is s

    def test_epoch_multiplier(self):
        assert D.SubsampleSpec(0.1).epoch_multiplier == 10
        assert D.SubsampleSpec(0.3).epoch_multiplier == 3
        assert D.SubsampleSpec(1.0).epoch_multiplier == 1
        with pytest.raises(ConfigError):
            D.SubsampleSpec(0.0)

    @settings(max_examples=40, deadline=None)
    @given(counts=st.lists(st.integers(1, 30), min_size=1, max_size=5),
           f=st.floats(0.01, 1.0), seed=st.integers(0, 1000))
    def test_per_class_counts(self, counts, f, seed):
        labels = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
        s = D.make_set(np.zeros((len(labels), 1, 2, 2)), labels, "train", len(counts))
        sub = D.subsample(s, D.SubsampleSpec(f, seed))
        expected = [max(1, int(np.floor(f * n + 1e-9))) for n in counts]
        assert sub.class_counts().tolist() == expected
        assert len(set(sub.indices)) == len(sub)


class TestNormalization:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 100.0), shift=st.floats(-50, 50))
    def test_train_stats(self, seed, scale, shift):
        raw = shift + scale * np.random.default_rng(seed).random((6, 3, 4, 4))
        s = D.make_set(raw, np.zeros(6, dtype=int), "train", 1)
        mean = s.images.mean(axis=(0, 2, 3))
        std = s.images.std(axis=(0, 2, 3))
        assert np.all(np.abs(mean) < 1e-6)
        assert np.all(np.abs(std - 1) <= 1e-3)

    def test_immutable(self):
        s = balanced(2)
        with pytest.raises(ValueError):
            s.images[0, 0, 0, 0] = 1.0

    def test_bad_labels(self):
        with pytest.raises(ContractError):
            D.make_set(np.zeros((2, 1, 2, 2)), [0, 3], "train", num_classes=3)
        with pytest.raises(ContractError):
            D.make_set(np.zeros((1, 1, 2, 2)), [0], "valid", num_classes=1)


def patch_means(images, p=4):
    n, c, h, w = images.shape
    return images.reshape(n, c, h // p, p, w // p, p).mean(axis=(3, 5)).reshape(n, -1)


class TestSyntheticBlobs:
    def test_reproducible(self):
        a = D.synthetic_blobs(4, 10, 16, seed=9)
        b = D.synthetic_blobs(4, 10, 16, seed=9)
        assert a.images.tobytes() == b.images.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_labels_uniform(self):
        s = D.synthetic_blobs(5, 12, 16, seed=1)
        assert s.class_counts().tolist() == [12] * 5

    def test_linear_probe(self):
        s = D.synthetic_blobs(10, 50, 32, seed=0)
        x = patch_means(s.images)
        x = np.concatenate([x, np.ones((len(x), 1))], axis=1)
        y = np.eye(10)[s.labels]
        w = np.linalg.solve(x.T @ x + 1e-3 * np.eye(x.shape[1]), x.T @ y)
        acc = np.mean((x @ w).argmax(1) == s.labels)
        assert acc > 0.95
