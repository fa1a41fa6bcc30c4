import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim import data
from fedsim.errors import ConfigurationError, DomainError, FormatError


def small_dataset(seed=0):
    return data.gen_synthetic(4, 6, 25, 3.0, seed)


class TestGenSynthetic:
    def test_label_histogram(self):
        ds = small_dataset()
        assert np.array_equal(ds.class_counts(), [25, 25, 25, 25])

    def test_determinism(self):
        a, b = small_dataset(7), small_dataset(7)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        assert not np.array_equal(small_dataset(0).features,
                                  small_dataset(1).features)

    def test_class_means_near_targets(self):
        ds = data.gen_synthetic(3, 8, 2000, 5.0, 11)
        for c in range(3):
            mean = ds.features[ds.labels == c].mean(axis=0)
            assert np.linalg.norm(mean) == pytest.approx(5.0, abs=0.25)

    def test_bad_parameters(self):
        with pytest.raises(ConfigurationError):
            data.gen_synthetic(1, 6, 10, 3.0, 0)
        with pytest.raises(ConfigurationError):
            data.gen_synthetic(3, 0, 10, 3.0, 0)
        with pytest.raises(ConfigurationError):
            data.gen_synthetic(3, 6, 10, -1.0, 0)

    def test_separation_six_linearly_separable(self):
        # centralized-training oracle: a least-squares linear classifier on
        # one-hot targets should reach >= 99% held-out accuracy
        train, test = data.synthetic_train_test(10, 32, 300, 100, 6.0, 0)
        X = np.hstack([train.features, np.ones((len(train), 1))])
        T = np.eye(10)[train.labels]
        W, *_ = np.linalg.lstsq(X, T, rcond=None)
        Xt = np.hstack([test.features, np.ones((len(test), 1))])
        acc = float(np.mean(np.argmax(Xt @ W, axis=1) == test.labels))
        assert acc >= 0.99


class TestSyntheticTrainTest:
    def test_shapes_and_balance(self):
        train, test = data.synthetic_train_test(5, 8, 40, 15, 3.0, 2)
        assert np.array_equal(train.class_counts(), [40] * 5)
        assert np.array_equal(test.class_counts(), [15] * 5)

    def test_splits_share_class_structure(self):
        train, test = data.synthetic_train_test(4, 16, 400, 150, 4.0, 3)
        for c in range(4):
            mtr = train.features[train.labels == c].mean(axis=0)
            mte = test.features[test.labels == c].mean(axis=0)
            assert np.linalg.norm(mtr - mte) < 1.0


class TestLoadIdx:
    def _write_pair(self, tmp_path, images, labels):
        n, r, c = images.shape
        img = tmp_path / "img.idx"
        lab = tmp_path / "lab.idx"
        img.write_bytes(struct.pack(">IIII", 0x803, n, r, c) +
                        images.astype(np.uint8).tobytes())
        lab.write_bytes(struct.pack(">II", 0x801, len(labels)) +
                        np.asarray(labels, dtype=np.uint8).tobytes())
        return img, lab

    def test_round_trip_pixels(self, tmp_path):
        images = np.arange(2 * 2 * 3, dtype=np.uint8).reshape(2, 2, 3)
        img, lab = self._write_pair(tmp_path, images, [1, 0])
        ds = data.load_idx(img, lab)
        assert ds.features.shape == (2, 6)
        assert np.array_equal(ds.labels, [1, 0])
        # standardization is invertible: recover the raw scaled pixels
        raw = images.reshape(2, 6) / 255.0
        back = ds.features * raw.std() + raw.mean()
        assert np.allclose(back, raw, atol=1e-12)

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((2, 2, 2), dtype=np.uint8)
        img, lab = self._write_pair(tmp_path, images, [0, 1, 1])
        with pytest.raises(FormatError, match="2 items.*3"):
            data.load_idx(img, lab)

    def test_bad_magic_names_offset(self, tmp_path):
        images = np.zeros((1, 2, 2), dtype=np.uint8)
        img, lab = self._write_pair(tmp_path, images, [0])
        img.write_bytes(b"\x00\x00\x09\x99" + img.read_bytes()[4:])
        with pytest.raises(FormatError, match="offset 0"):
            data.load_idx(img, lab)

    def test_truncated_payload(self, tmp_path):
        images = np.zeros((2, 2, 2), dtype=np.uint8)
        img, lab = self._write_pair(tmp_path, images, [0, 1])
        img.write_bytes(img.read_bytes()[:-1])
        with pytest.raises(FormatError, match="offset"):
            data.load_idx(img, lab)

    def test_empty_file(self, tmp_path):
        images = np.zeros((1, 2, 2), dtype=np.uint8)
        img, lab = self._write_pair(tmp_path, images, [0])
        img.write_bytes(b"")
        with pytest.raises(FormatError):
            data.load_idx(img, lab)


class TestLargestRemainder:
    def test_exact_conservation(self):
        out = data._largest_remainder(10, np.array([0.3, 0.3, 0.4]))
        assert out.sum() == 10

    def test_ties_to_lowest_index(self):
        out = data._largest_remainder(3, np.array([0.5, 0.5]))
        assert np.array_equal(out, [2, 1])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 500), st.integers(0, 2 ** 31 - 1), st.integers(1, 12))
    def test_conservation_property(self, total, seed, m):
        rng = np.random.default_rng(seed)
        q = rng.dirichlet(np.full(m, 0.2))
        out = data._largest_remainder(total, q)
        assert out.sum() == total
        assert (out >= 0).all()


class TestDirichletPartition:
    def test_single_client_gets_everything(self):
        ds = small_dataset()
        part = data.dirichlet_partition(ds, 1, 0.5, 0)
        assert len(part.client_indices[0]) == len(ds)
        assert np.allclose(part.distributions[0], ds.class_counts() / len(ds))

    def test_conservation_and_disjointness(self):
        ds = small_dataset(3)
        part = data.dirichlet_partition(ds, 6, 0.2, 9)
        assert np.array_equal(part.counts.sum(axis=0), ds.class_counts())
        all_idx = np.concatenate(part.client_indices)
        assert len(all_idx) == len(ds)
        assert len(np.unique(all_idx)) == len(ds)

    def test_counts_match_labels(self):
        ds = small_dataset(5)
        part = data.dirichlet_partition(ds, 4, 0.3, 1)
        for m in range(4):
            got = np.bincount(ds.labels[part.client_indices[m]], minlength=4)
            assert np.array_equal(got, part.counts[m])

    def test_huge_alpha_near_uniform(self):
        ds = data.gen_synthetic(4, 4, 400, 3.0, 0)
        for seed in range(5):
            part = data.dirichlet_partition(ds, 4, 1e6, seed)
            assert np.all(np.abs(part.counts - 100) <= 5)  # within 5% of 100

    def test_determinism(self):
        ds = small_dataset(2)
        a = data.dirichlet_partition(ds, 5, 0.1, 42)
        b = data.dirichlet_partition(ds, 5, 0.1, 42)
        for ia, ib in zip(a.client_indices, b.client_indices):
            assert np.array_equal(ia, ib)

    def test_empty_client_flagged(self):
        ds = data.gen_synthetic(2, 3, 2, 3.0, 0)  # 4 samples over many clients
        with pytest.warns(UserWarning, match="zero samples"):
            part = data.dirichlet_partition(ds, 10, 0.05, 0)
        assert part.empty_clients
        for m in part.empty_clients:
            assert len(part.client_indices[m]) == 0

    def test_bad_args(self):
        ds = small_dataset()
        with pytest.raises(ConfigurationError):
            data.dirichlet_partition(ds, 0, 0.1, 0)
        with pytest.raises(ConfigurationError):
            data.dirichlet_partition(ds, 3, 0.0, 0)

    def test_report_round_trips_counts(self):
        ds = small_dataset(4)
        part = data.dirichlet_partition(ds, 3, 0.5, 7)
        rep = part.report()
        assert rep["clients"] == 3
        assert np.array_equal(np.array(rep["counts"]), part.counts)


class TestExponentialImbalance:
    def test_identity_at_one(self):
        ds = small_dataset()
        assert data.exponential_imbalance(ds, 1.0, 0) is ds

    def test_profile(self):
        ds = data.gen_synthetic(4, 4, 100, 3.0, 0)
        out = data.exponential_imbalance(ds, 10.0, 0)
        counts = out.class_counts()
        expect = [round(100 * 10 ** (-c / 3)) for c in range(4)]
        assert np.array_equal(counts, expect)
        assert counts[0] == 100 and counts[-1] == 10

    def test_ratio_below_one_rejected(self):
        with pytest.raises(ConfigurationError):
            data.exponential_imbalance(small_dataset(), 0.5, 0)

    def test_class_driven_to_zero_rejected(self):
        ds = data.gen_synthetic(3, 4, 4, 3.0, 0)
        with pytest.raises(ConfigurationError, match="zero samples"):
            data.exponential_imbalance(ds, 100.0, 0)


class TestMetaAndPoison:
    def test_class_distribution(self):
        ds = small_dataset(1)
        part = data.dirichlet_partition(ds, 3, 0.5, 0)
        a = data.class_distribution(part, 0)
        assert a.sum() == pytest.approx(1.0)

    def test_class_distribution_empty_client(self):
        ds = data.gen_synthetic(2, 3, 2, 3.0, 0)
        with pytest.warns(UserWarning):
            part = data.dirichlet_partition(ds, 8, 0.05, 1)
        m = part.empty_clients[0]
        with pytest.raises(DomainError):
            data.class_distribution(part, m)

    def test_sample_meta_set_balanced(self):
        ds = small_dataset(2)
        idx = data.sample_meta_set(ds, 3, 0)
        assert np.array_equal(np.bincount(ds.labels[idx], minlength=4), [3] * 4)

    def test_sample_meta_set_insufficient(self):
        ds = data.gen_synthetic(2, 3, 2, 3.0, 0)
        with pytest.raises(ConfigurationError):
            data.sample_meta_set(ds, 5, 0)

    def test_augment_with_meta_updates_counts(self):
        ds = small_dataset(3)
        part = data.dirichlet_partition(ds, 4, 0.2, 0)
        meta = data.sample_meta_set(ds, 2, 1)
        combined, counts = data.augment_with_meta(part.client_indices[0], meta, ds)
        assert len(combined) == len(part.client_indices[0]) + len(meta)
        assert np.array_equal(counts, part.counts[0] + 2)

    def test_poison_labels_seeded_and_in_range(self):
        labels = np.zeros(200, dtype=np.intp)
        a = data.poison_labels(labels, 4, 5)
        b = data.poison_labels(labels, 4, 5)
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() < 4
        assert len(np.unique(a)) > 1
