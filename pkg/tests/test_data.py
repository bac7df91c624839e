import struct

import numpy as np
import pytest

from bfel import data
from bfel.data import (
    DataFormatError,
    Dataset,
    PartitionError,
    PartitionMode,
    PartitionPlan,
)


def write_idx_pair(tmp_path, pixels, labels):
    """Build a raw IDX image/label pair byte by byte."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    img = tmp_path / "images.idx"
    lab = tmp_path / "labels.idx"
    img.write_bytes(struct.pack(">IIII", 0x803, n, rows, cols) + pixels.tobytes())
    lab.write_bytes(
        struct.pack(">II", 0x801, n) + np.asarray(labels, dtype=np.uint8).tobytes()
    )
    return img, lab


class TestIdx:
    def test_two_image_fixture_scaling_endpoints(self, tmp_path):
        pixels = np.zeros((2, 2, 2), dtype=np.uint8)
        pixels[1, :, :] = 255
        img, lab = write_idx_pair(tmp_path, pixels, [3, 7])
        ds = data.load_idx(img, lab)
        assert len(ds) == 2
        assert np.array_equal(ds.samples[0], np.zeros((2, 2)))
        assert np.array_equal(ds.samples[1], np.ones((2, 2)))
        assert list(ds.labels) == [3, 7]

    def test_bad_magic_on_labels(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), [0])
        # image magic in the label file slot
        lab.write_bytes(struct.pack(">II", 0x803, 1) + b"\x00")
        with pytest.raises(DataFormatError, match="bad magic"):
            data.load_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        img, _ = write_idx_pair(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), [0, 1])
        lab = tmp_path / "short-labels.idx"
        lab.write_bytes(struct.pack(">II", 0x801, 1) + b"\x00")
        with pytest.raises(DataFormatError, match="count mismatch"):
            data.load_idx(img, lab)

    def test_truncated_file(self, tmp_path):
        img, lab = write_idx_pair(tmp_path, np.zeros((2, 3, 3), dtype=np.uint8), [0, 1])
        img.write_bytes(img.read_bytes()[:-5])
        with pytest.raises(DataFormatError, match="truncated"):
            data.load_idx(img, lab)

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.integers(0, 256, (5, 4, 4)) / 255.0, rng.integers(0, 3, 5), 3)
        img, lab = tmp_path / "i.idx", tmp_path / "l.idx"
        data.save_idx(ds, img, lab)
        back = data.load_idx(img, lab)
        assert np.array_equal(back.samples, ds.samples)
        assert np.array_equal(back.labels, ds.labels)


class TestBfeldata:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        ds = Dataset(rng.random((7, 3, 5)), rng.integers(0, 4, 7), 4)
        path = tmp_path / "d.bfel"
        data.save_bfeldata(ds, path)
        back = data.load_bfeldata(path)
        assert np.array_equal(back.samples, ds.samples)
        assert np.array_equal(back.labels, ds.labels)
        assert back.class_count == 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bfel"
        path.write_bytes(b"NOTBFEL!" + b"\x00" * 32)
        with pytest.raises(DataFormatError, match="bad magic"):
            data.load_bfeldata(path)


class TestPartition:
    def test_iid_two_clients(self):
        ds = data.synth_blobs(2, 5, 2, 0.1, seed=0)
        parts = data.partition(ds, PartitionPlan(2, PartitionMode.IID, seed=1))
        assert [len(p) for p in parts] == [5, 5]
        all_samples = np.concatenate([p.samples for p in parts])
        assert sorted(map(tuple, all_samples)) == sorted(map(tuple, ds.samples))

    def test_iid_remainder_to_earliest(self):
        ds = data.synth_blobs(1, 11, 2, 0.1, seed=0)
        parts = data.partition(ds, PartitionPlan(3, PartitionMode.IID, seed=1))
        assert [len(p) for p in parts] == [4, 4, 3]

    def test_noniid_shards_limit_distinct_labels(self):
        ds = data.synth_blobs(10, 100, 2, 0.1, seed=2)
        plan = PartitionPlan(5, PartitionMode.NONIID_SHARDS, shards_per_client=2, seed=3)
        parts = data.partition(ds, plan)
        distinct = [len(set(p.labels.tolist())) for p in parts]
        # fine shards: roughly 2 labels per client, never close to all 10
        assert np.mean(distinct) < 4

    def test_noniid_exhaustive_disjoint(self):
        ds = data.synth_blobs(4, 25, 3, 0.2, seed=4)
        plan = PartitionPlan(5, PartitionMode.NONIID_SHARDS, shards_per_client=2, seed=5)
        parts = data.partition(ds, plan)
        assert sum(len(p) for p in parts) == len(ds)

    def test_seed_determinism(self):
        ds = data.synth_blobs(3, 30, 2, 0.2, seed=6)
        for mode in PartitionMode:
            plan = PartitionPlan(3, mode, shards_per_client=2, seed=7)
            a = data.partition(ds, plan)
            b = data.partition(ds, plan)
            for pa, pb in zip(a, b):
                assert np.array_equal(pa.samples, pb.samples)
                assert np.array_equal(pa.labels, pb.labels)

    def test_too_many_shards(self):
        ds = data.synth_blobs(2, 2, 2, 0.1, seed=0)
        plan = PartitionPlan(4, PartitionMode.NONIID_SHARDS, shards_per_client=2, seed=0)
        with pytest.raises(PartitionError):
            data.partition(ds, plan)


class TestSynthBlobs:
    def test_counts(self):
        ds = data.synth_blobs(2, 3, 4, 0.5, seed=0)
        assert len(ds) == 6
        assert list(np.bincount(ds.labels)) == [3, 3]

    def test_zero_spread_nearest_centroid_perfect(self):
        ds = data.synth_blobs(4, 10, 3, 0.0, seed=1)
        centers = np.stack(
            [ds.samples[ds.labels == c][0] for c in range(4)]
        )
        dists = np.linalg.norm(ds.samples[:, None] - centers[None], axis=2)
        assert np.array_equal(dists.argmin(axis=1), ds.labels)

    def test_seed_determinism(self):
        a = data.synth_blobs(3, 5, 2, 0.3, seed=42)
        b = data.synth_blobs(3, 5, 2, 0.3, seed=42)
        assert np.array_equal(a.samples, b.samples)
