import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from fedmdcg.data import (CIFAR_BATCH_RECORDS, CIFAR_RECORD_BYTES,
                          FormatError, LabelCounter, PartitionSpec,
                          aggregate_label_distribution, count_labels,
                          dirichlet_partition, load_cifar10, load_idx,
                          make_blobs, split_test_evenly)


def write_idx_pair(directory: Path, images: np.ndarray, labels: np.ndarray,
                   split: str = "train", gz: bool = False) -> None:
    n, rows, cols = images.shape
    prefix = "train" if split == "train" else "t10k"
    img = struct.pack(">IIII", 0x803, n, rows, cols) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes()
    opener = gzip.open if gz else open
    suffix = ".gz" if gz else ""
    with opener(directory / f"{prefix}-images-idx3-ubyte{suffix}", "wb") as f:
        f.write(img)
    with opener(directory / f"{prefix}-labels-idx1-ubyte{suffix}", "wb") as f:
        f.write(lab)


class TestIdxReader:
    @pytest.mark.parametrize("gz", [False, True])
    def test_roundtrip(self, tmp_path, gz):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(20, 5, 4))
        labels = rng.integers(0, 3, size=20)
        write_idx_pair(tmp_path, images, labels, gz=gz)
        ds = load_idx(tmp_path, "train", name="toy")
        assert len(ds) == 20
        assert ds.sample_shape == (1, 5, 4)
        assert ds.class_count == int(labels.max()) + 1
        assert np.array_equal(ds.labels, labels)
        assert np.allclose(ds.images[:, 0], images / 255.0)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_bad_magic(self, tmp_path):
        blob = struct.pack(">IIII", 0x9999, 1, 2, 2) + bytes(4)
        (tmp_path / "train-images-idx3-ubyte").write_bytes(blob)
        (tmp_path / "train-labels-idx1-ubyte").write_bytes(
            struct.pack(">II", 0x801, 1) + bytes(1))
        with pytest.raises(FormatError, match="magic"):
            load_idx(tmp_path, "train")

    def test_truncated_data(self, tmp_path):
        blob = struct.pack(">IIII", 0x803, 4, 2, 2) + bytes(7)
        (tmp_path / "train-images-idx3-ubyte").write_bytes(blob)
        (tmp_path / "train-labels-idx1-ubyte").write_bytes(
            struct.pack(">II", 0x801, 4) + bytes(4))
        with pytest.raises(FormatError, match="truncated"):
            load_idx(tmp_path, "train")

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_idx(tmp_path, "train")

    def test_count_mismatch(self, tmp_path):
        write_idx_pair(tmp_path, np.zeros((3, 2, 2)), np.zeros(3))
        (tmp_path / "train-labels-idx1-ubyte").write_bytes(
            struct.pack(">II", 0x801, 2) + bytes(2))
        with pytest.raises(FormatError, match="mismatch"):
            load_idx(tmp_path, "train")


FMNIST_DIR = Path(os.environ.get("FEDMDCG_DATA_DIR", "data")) / "fmnist"


@pytest.mark.skipif(not FMNIST_DIR.exists(),
                    reason="FMNIST IDX files not present (set FEDMDCG_DATA_DIR)")
def test_fmnist_train_file_shape():
    ds = load_idx(FMNIST_DIR, "train", name="fmnist")
    assert len(ds) == 60000
    assert ds.sample_shape == (1, 28, 28)
    assert ds.class_count == 10


class TestCifarReader:
    def _write_batches(self, directory: Path, split: str, rng) -> np.ndarray:
        names = ([f"data_batch_{i}.bin" for i in range(1, 6)]
                 if split == "train" else ["test_batch.bin"])
        labels = []
        for name in names:
            recs = rng.integers(0, 256, size=(CIFAR_BATCH_RECORDS,
                                              CIFAR_RECORD_BYTES)).astype(np.uint8)
            recs[:, 0] = rng.integers(0, 10, size=CIFAR_BATCH_RECORDS)
            labels.append(recs[:, 0].astype(np.int64))
            (directory / name).write_bytes(recs.tobytes())
        return np.concatenate(labels)

    def test_train_layout(self, tmp_path):
        labels = self._write_batches(tmp_path, "train", np.random.default_rng(0))
        ds = load_cifar10(tmp_path, "train")
        assert len(ds) == 50000
        assert ds.sample_shape == (3, 32, 32)
        assert ds.class_count == 10
        assert np.array_equal(ds.labels, labels)

    def test_test_layout(self, tmp_path):
        self._write_batches(tmp_path, "test", np.random.default_rng(1))
        ds = load_cifar10(tmp_path, "test")
        assert len(ds) == 10000

    def test_wrong_record_size(self, tmp_path):
        (tmp_path / "data_batch_1.bin").write_bytes(bytes(100))
        with pytest.raises(FormatError, match="records"):
            load_cifar10(tmp_path, "train")

    def test_label_out_of_range(self, tmp_path):
        recs = np.zeros((CIFAR_BATCH_RECORDS, CIFAR_RECORD_BYTES), dtype=np.uint8)
        recs[0, 0] = 11
        for i in range(1, 6):
            (tmp_path / f"data_batch_{i}.bin").write_bytes(recs.tobytes())
        with pytest.raises(FormatError, match="label"):
            load_cifar10(tmp_path, "train")


class TestBlobs:
    def test_balanced_and_bounded(self):
        ds = make_blobs(4, 2, 100, 3.0, seed=1)
        assert len(ds) == 400
        assert np.array_equal(np.bincount(ds.labels), [100] * 4)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert ds.sample_shape == (1, 1, 2)

    def test_deterministic(self):
        a = make_blobs(3, 5, 50, 4.0, seed=9)
        b = make_blobs(3, 5, 50, 4.0, seed=9)
        assert np.array_equal(a.images, b.images)

    def test_classes_separated(self):
        ds = make_blobs(4, 8, 200, 6.0, seed=2)
        x = ds.images.reshape(len(ds), -1)
        means = np.stack([x[ds.labels == y].mean(axis=0) for y in range(4)])
        gaps = [np.linalg.norm(means[a] - means[b])
                for a in range(4) for b in range(a + 1, 4)]
        assert min(gaps) > 0.2


class TestDirichletPartition:
    @pytest.mark.parametrize("omega", [0.1, 1.0, 10.0])
    def test_exact_disjoint_cover(self, omega):
        ds = make_blobs(4, 2, 100, 3.0, seed=3)
        parts = dirichlet_partition(ds, PartitionSpec(omega, 7, seed=11))
        merged = np.concatenate(parts)
        assert len(merged) == len(ds)
        assert len(np.unique(merged)) == len(ds)

    def test_deterministic(self):
        ds = make_blobs(4, 2, 100, 3.0, seed=3)
        spec = PartitionSpec(0.5, 5, seed=4)
        a = dirichlet_partition(ds, spec)
        b = dirichlet_partition(ds, spec)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_large_omega_near_uniform(self):
        ds = make_blobs(2, 2, 10000, 3.0, seed=5)
        parts = dirichlet_partition(ds, PartitionSpec(1e4, 10, seed=6))
        for idx in parts:
            counts = np.bincount(ds.labels[idx], minlength=2)
            # each client should hold each class's share within 5% of 1/10
            assert np.abs(counts / 10000 - 0.1).max() < 0.005

    def test_entropy_monotone_in_omega(self):
        ds = make_blobs(4, 2, 100, 3.0, seed=7)

        def mean_entropy(omega, seed):
            parts = dirichlet_partition(ds, PartitionSpec(omega, 10, seed=seed))
            ent = []
            for idx in parts:
                if idx.size == 0:
                    ent.append(0.0)
                    continue
                p = np.bincount(ds.labels[idx], minlength=4) / idx.size
                p = p[p > 0]
                ent.append(float(-(p * np.log(p)).sum()))
            return float(np.mean(ent))

        wins = sum(mean_entropy(10.0, s) > mean_entropy(0.1, s) for s in range(20))
        assert wins >= 18

    def test_empty_dataset_rejected(self):
        ds = make_blobs(2, 2, 5, 3.0, seed=8)
        empty = ds.subset(np.array([], dtype=np.int64))
        with pytest.raises(ValueError):
            dirichlet_partition(empty, PartitionSpec(1.0, 2, seed=0))

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError):
            PartitionSpec(0.0, 2, seed=0)
        with pytest.raises(ValueError):
            PartitionSpec(1.0, 0, seed=0)


class TestLabelCounting:
    def test_empty_indices(self):
        ds = make_blobs(3, 2, 10, 3.0, seed=0)
        counter = count_labels(ds, np.array([], dtype=np.int64))
        assert np.array_equal(counter.counts, [0, 0, 0])
        assert counter.total == 0

    def test_single_class_subset(self):
        ds = make_blobs(3, 2, 10, 3.0, seed=0)
        idx = np.flatnonzero(ds.labels == 1)
        counter = count_labels(ds, idx)
        assert np.array_equal(counter.counts, [0, 10, 0])

    def test_full_blobs(self):
        ds = make_blobs(4, 2, 100, 3.0, seed=0)
        counter = count_labels(ds, np.arange(len(ds)))
        assert np.array_equal(counter.counts, [100, 100, 100, 100])

    def test_out_of_range_rejected(self):
        ds = make_blobs(2, 2, 5, 3.0, seed=0)
        with pytest.raises(IndexError):
            count_labels(ds, np.array([999]))


class TestAggregateLabelDistribution:
    def test_single_counter(self):
        out = aggregate_label_distribution([LabelCounter(np.array([1, 3]))])
        assert np.array_equal(out.probs, [0.25, 0.75])

    def test_two_counters(self):
        out = aggregate_label_distribution([LabelCounter(np.array([1, 0])),
                                            LabelCounter(np.array([0, 1]))])
        assert np.array_equal(out.probs, [0.5, 0.5])

    def test_all_zero_uniform(self):
        out = aggregate_label_distribution([LabelCounter(np.zeros(4, dtype=np.int64))])
        assert np.array_equal(out.probs, np.full(4, 0.25))

    def test_sums_to_one_and_permutation_equivariant(self):
        rng = np.random.default_rng(10)
        counters = [LabelCounter(rng.integers(0, 50, 6)) for _ in range(5)]
        a = aggregate_label_distribution(counters)
        b = aggregate_label_distribution(counters[::-1])
        assert abs(a.probs.sum() - 1.0) < 1e-12
        assert np.array_equal(a.probs, b.probs)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_label_distribution([])


class TestSplitTestEvenly:
    def test_single_client_gets_all(self):
        ds = make_blobs(2, 2, 10, 3.0, seed=0)
        parts = split_test_evenly(ds, 1, seed=0)
        assert np.array_equal(parts[0], np.arange(len(ds)))

    def test_near_equal_sizes(self):
        ds = make_blobs(2, 2, 5, 3.0, seed=0)  # 10 samples
        parts = split_test_evenly(ds, 4, seed=0)
        assert sorted(len(p) for p in parts) == [2, 2, 3, 3]
        merged = np.concatenate(parts)
        assert len(np.unique(merged)) == 10

    def test_deterministic(self):
        ds = make_blobs(2, 2, 50, 3.0, seed=0)
        a = split_test_evenly(ds, 3, seed=5)
        b = split_test_evenly(ds, 3, seed=5)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
