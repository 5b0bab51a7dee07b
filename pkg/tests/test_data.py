import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from admm_softmax.data import (
    RawImageSet,
    SplitSpec,
    images_to_dataset,
    load_csv,
    one_hot,
    parse_idx,
    split,
    split_indices,
    write_csv,
    write_idx,
)
from admm_softmax.errors import CountMismatch, FormatError, InsufficientExamples, LabelOutOfRange
from admm_softmax.model import Dataset

from conftest import mnist_paths


@pytest.fixture
def idx_pair(tmp_path):
    pixels = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    raw = RawImageSet(pixels, np.array([7, 2], dtype=np.uint8))
    paths = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(*paths, raw)
    return paths, raw


class TestParseIdx:
    def test_fixture_bytes(self, idx_pair):
        (img, lab), raw = idx_pair
        assert img.read_bytes()[:16] == struct.pack(">IIII", 0x803, 2, 3, 4)
        back = parse_idx(img, lab)
        np.testing.assert_array_equal(back.pixels, raw.pixels)
        np.testing.assert_array_equal(back.labels, [7, 2])
        assert (back.count, back.height, back.width) == (2, 3, 4)

    def test_swapped_magic(self, idx_pair):
        (img, lab), _ = idx_pair
        with pytest.raises(FormatError):
            parse_idx(img, img)
        with pytest.raises(FormatError):
            parse_idx(lab, lab)

    def test_truncated(self, idx_pair, tmp_path):
        (img, lab), _ = idx_pair
        short = tmp_path / "short.idx"
        short.write_bytes(img.read_bytes()[:-1])
        with pytest.raises(FormatError):
            parse_idx(short, lab)
        short.write_bytes(img.read_bytes()[:10])
        with pytest.raises(FormatError):
            parse_idx(short, lab)

    def test_trailing_bytes(self, idx_pair, tmp_path):
        (img, lab), _ = idx_pair
        long = tmp_path / "long.idx"
        long.write_bytes(lab.read_bytes() + b"\x01")
        with pytest.raises(FormatError) as exc:
            parse_idx(img, long)
        assert exc.value.offset == 10

    def test_count_mismatch(self, idx_pair, tmp_path):
        (img, _), _ = idx_pair
        lab = tmp_path / "lab3.idx"
        lab.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
        with pytest.raises(CountMismatch):
            parse_idx(img, lab)

    def test_real_mnist(self):
        paths = mnist_paths()
        if paths is None:
            pytest.skip("MNIST IDX files not available")
        raw = parse_idx(*paths)
        assert (raw.count, raw.height, raw.width) == (60000, 28, 28)
        assert set(np.unique(raw.labels)) == set(range(10))


class TestOneHot:
    def test_identity(self):
        np.testing.assert_array_equal(one_hot([0, 1, 2], 3), np.eye(3))

    def test_empty(self):
        assert one_hot(np.array([], dtype=int), 4).shape == (4, 0)

    def test_loop_oracle(self, rng):
        labels = rng.integers(0, 7, 50)
        C = one_hot(labels, 7)
        expect = np.zeros((7, 50))
        for j, k in enumerate(labels):
            expect[k, j] = 1.0
        np.testing.assert_array_equal(C, expect)
        np.testing.assert_array_equal(C.sum(axis=0), 1.0)

    @pytest.mark.parametrize("labels", [[0, 3], [-1, 0]])
    def test_out_of_range(self, labels):
        with pytest.raises(LabelOutOfRange):
            one_hot(labels, 3)


class TestSplit:
    def test_deterministic(self):
        spec = SplitSpec(5, 3, 2, seed=9)
        for a, b in zip(split_indices(20, spec), split_indices(20, spec)):
            np.testing.assert_array_equal(a, b)

    def test_seed_matters(self):
        a = split_indices(100, SplitSpec(50, 25, 25, seed=0))[0]
        b = split_indices(100, SplitSpec(50, 25, 25, seed=1))[0]
        assert not np.array_equal(a, b)

    def test_three_singletons(self):
        parts = split_indices(3, SplitSpec(1, 1, 1))
        assert sorted(np.concatenate(parts)) == [0, 1, 2]

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(0, 200), data=st.data())
    def test_partition_property(self, n, data):
        a = data.draw(st.integers(0, n))
        b = data.draw(st.integers(0, n - a))
        c = n - a - b
        parts = split_indices(n, SplitSpec(a, b, c, seed=data.draw(st.integers(0, 100))))
        assert [len(p) for p in parts] == [a, b, c]
        np.testing.assert_array_equal(np.sort(np.concatenate(parts)), np.arange(n))

    def test_sequential(self):
        tr, va, te = split_indices(10, SplitSpec(4, 3, 2, sequential=True))
        np.testing.assert_array_equal(tr, [0, 1, 2, 3])
        np.testing.assert_array_equal(te, [7, 8])

    def test_insufficient(self):
        with pytest.raises(InsufficientExamples):
            split_indices(5, SplitSpec(3, 2, 1))

    def test_split_datasets(self, rng):
        D = rng.standard_normal((3, 12))
        labels = rng.integers(0, 2, 12)
        data = Dataset(D, one_hot(labels, 2), labels)
        tr, va, te = split(data, SplitSpec(6, 4, 2, seed=3))
        idx = split_indices(12, SplitSpec(6, 4, 2, seed=3))
        np.testing.assert_array_equal(va.D, D[:, idx[1]])
        np.testing.assert_array_equal(te.labels, labels[idx[2]])
        assert tr.n_examples == 6

    def test_mnist_class_proportions(self):
        paths = mnist_paths()
        if paths is None:
            pytest.skip("MNIST IDX files not available")
        labels = parse_idx(*paths).labels
        overall = np.bincount(labels, minlength=10) / labels.size
        for part in split_indices(labels.size, SplitSpec(40000, 10000, 10000, seed=0)):
            frac = np.bincount(labels[part], minlength=10) / part.size
            assert np.max(np.abs(frac - overall)) <= 0.03


class TestImagesToDataset:
    def test_pixels_scaled_with_bias(self, idx_pair):
        _, raw = idx_pair
        data = images_to_dataset(raw, n_classes=10)
        assert data.D.shape == (13, 2)
        np.testing.assert_array_equal(data.D[:-1, 1], raw.pixels[1].ravel() / 255.0)
        np.testing.assert_array_equal(data.D[-1], 1.0)
        assert data.C[7, 0] == 1.0 and data.C[2, 1] == 1.0


class TestCsv:
    def test_fixture(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1.5,2,0\n-3,4.25,1\n")
        data = load_csv(p)
        np.testing.assert_array_equal(data.D, [[1.5, -3.0], [2.0, 4.25], [1.0, 1.0]])
        np.testing.assert_array_equal(data.labels, [0, 1])
        np.testing.assert_array_equal(data.C, np.eye(2))

    def test_label_column_and_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y,a,b\n2,1,2\n0,3,4\n")
        data = load_csv(p, label_column="y", header=True, append_bias=False, n_classes=3)
        np.testing.assert_array_equal(data.D, [[1.0, 3.0], [2.0, 4.0]])
        np.testing.assert_array_equal(data.labels, [2, 0])
        assert data.C.shape == (3, 2)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,0\n3,4,1\n5,1\n")
        with pytest.raises(FormatError) as exc:
            load_csv(p)
        assert exc.value.line == 3
        assert "line 3" in str(exc.value)

    @pytest.mark.parametrize("text", ["1,x,0\n", "1,2,0.5\n", ""])
    def test_bad_content(self, tmp_path, text):
        p = tmp_path / "d.csv"
        p.write_text(text)
        with pytest.raises(FormatError):
            load_csv(p)

    def test_round_trip(self, tmp_path, rng):
        D = np.vstack([rng.standard_normal((4, 9)), np.ones(9)])
        labels = rng.integers(0, 3, 9)
        data = Dataset(D, one_hot(labels, 3), labels, bias_appended=True)
        write_csv(tmp_path / "d.csv", data, header=True)
        back = load_csv(tmp_path / "d.csv", header=True, n_classes=3)
        np.testing.assert_array_equal(back.D, D)
        np.testing.assert_array_equal(back.labels, labels)
