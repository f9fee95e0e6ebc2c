import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuia_lab.data import (
    Dataset,
    load_images,
    partition,
    quantize,
    read_pnm,
    save_images,
    split_pretrain,
    synthesize,
    write_pnm,
)
from fuia_lab.errors import DataFormatError
from fuia_lab.fed import pretrain
from fuia_lab.nn import ModelSpec, accuracy
from fuia_lab.rng import derive_rng


def _pnm_tree(root, files):
    for (label, name), payload in files.items():
        d = root / str(label)
        d.mkdir(parents=True, exist_ok=True)
        (d / name).write_bytes(payload)
    return root


class TestLoadImages:
    def test_all_white_pgm(self, tmp_path):
        _pnm_tree(tmp_path, {(0, "a.pgm"): b"P5\n3 2\n255\n" + bytes([255] * 6)})
        ds = load_images(tmp_path, class_count=2)
        assert len(ds) == 1
        assert ds.images.shape == (1, 1, 2, 3)
        assert np.all(ds.images == 1.0)

    def test_ppm_values(self, tmp_path):
        body = bytes([0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60])
        _pnm_tree(tmp_path, {(1, "b.ppm"): b"P6\n# comment\n2 2\n255\n" + body})
        ds = load_images(tmp_path, class_count=2)
        expected = np.frombuffer(body, dtype=np.uint8).reshape(2, 2, 3).transpose(2, 0, 1) / 255.0
        assert np.array_equal(ds.images[0], expected)
        assert ds.labels.tolist() == [1]

    @pytest.mark.parametrize("fmt", ["pnm", "idx"])
    def test_round_trip_after_quantization(self, tmp_path, fmt):
        rng = np.random.default_rng(0)
        channels = 3 if fmt == "pnm" else 1
        ds = Dataset(rng.uniform(size=(7, channels, 4, 5)), rng.integers(0, 3, size=7), 3)
        target = tmp_path / ("tree" if fmt == "pnm" else "train-images.idx")
        save_images(ds, target, fmt)
        back = load_images(target, fmt, class_count=3)
        expected = quantize(ds.images) / 255.0
        if fmt == "pnm":
            # class directories are read in label order
            order = np.argsort(ds.labels, kind="stable")
            expected, labels = expected[order], ds.labels[order]
        else:
            labels = ds.labels
        assert np.array_equal(back.images, expected)
        assert np.array_equal(back.labels, labels)

    def test_label_out_of_range(self, tmp_path):
        _pnm_tree(tmp_path, {(5, "a.pgm"): b"P5\n1 1\n255\n\x00"})
        with pytest.raises(DataFormatError, match="out of range"):
            load_images(tmp_path, class_count=5)

    @pytest.mark.parametrize("payload", [
        b"P2\n1 1\n255\n0",
        b"P5\n1 x\n255\n\x00",
        b"P5\n2 2\n255\n\x00",
        b"P5\n",
    ])
    def test_malformed_header(self, tmp_path, payload):
        (tmp_path / "bad.pgm").write_bytes(payload)
        with pytest.raises(DataFormatError):
            read_pnm(tmp_path / "bad.pgm")

    def test_write_uses_rounding_rule(self, tmp_path):
        write_pnm(tmp_path / "x.pgm", np.array([[[0.5, 1.3, -0.2, 0.002]]]))
        assert (tmp_path / "x.pgm").read_bytes().endswith(bytes([128, 255, 0, 1]))

    def test_dataset_rejects_bad_labels(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((2, 1, 2, 2)), [0, 2], 2)


class TestSynthesize:
    def test_deterministic(self):
        a, b = synthesize(4, 5, (1, 8, 8), 3), synthesize(4, 5, (1, 8, 8), 3)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert synthesize(4, 5, (1, 8, 8), 4).images.tobytes() != a.images.tobytes()

    def test_linear_probe_separates_two_classes(self):
        ds = synthesize(2, 50, (1, 8, 8), 0)
        spec = ModelSpec.mlp((1, 8, 8), [], 2)
        w = pretrain(spec, ds, epochs=100, lr=0.5, batch_size=0, seed=0)
        assert accuracy(spec, w, ds.images, ds.labels) >= 0.95

    def test_shape_and_range(self):
        ds = synthesize(12, 3, (3, 10, 10), 1)
        assert ds.images.shape == (36, 3, 10, 10)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert np.bincount(ds.labels).tolist() == [3] * 12

    def test_rejects_degenerate_input(self):
        with pytest.raises(ValueError):
            synthesize(3, 0)
        with pytest.raises(ValueError):
            synthesize(1, 5)


class TestPartition:
    def test_single_client(self):
        ds = synthesize(3, 4, (1, 4, 4), 0)
        plan = partition(ds, 1, "iid", 0)
        assert np.all(plan.assignment == 0)

    @pytest.mark.parametrize("mode, extra", [("iid", {}), ("count", {"per_client": 8})])
    def test_eight_per_client(self, mode, extra):
        ds = synthesize(10, 8, (1, 4, 4), 0)
        plan = partition(ds, 10, mode, 1, **extra)
        assert plan.counts().tolist() == [8] * 10
        assert sorted(np.concatenate([plan.indices(k) for k in range(10)]).tolist()) == list(range(80))

    def test_dirichlet_matches_reference_draw(self):
        ds = synthesize(5, 20, (1, 4, 4), 0)
        plan = partition(ds, 4, "dirichlet", 9, alpha=0.3)
        rng = derive_rng(9, "partition", "dirichlet")
        expected = np.zeros(4, dtype=np.int64)
        for cls in range(5):
            members = np.flatnonzero(ds.labels == cls)
            counts = rng.multinomial(members.size, rng.dirichlet(np.full(4, 0.3)))
            rng.permutation(members.size)
            expected += counts
        assert plan.counts().tolist() == expected.tolist()
        assert plan.counts().sum() == len(ds)

    def test_count_overflow(self):
        ds = synthesize(2, 5, (1, 4, 4), 0)
        with pytest.raises(ValueError):
            partition(ds, 3, "count", 0, per_client=4)

    def test_count_leaves_rest_unassigned(self):
        ds = synthesize(2, 10, (1, 4, 4), 0)
        plan = partition(ds, 3, "count", 0, per_client=4)
        assert (plan.assignment == -1).sum() == 8

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 60), k=st.integers(1, 12), seed=st.integers(0, 2**16),
           mode=st.sampled_from(["iid", "dirichlet"]))
    def test_exact_cover(self, n, k, seed, mode):
        ds = Dataset(np.zeros((n, 1, 1, 1)), np.arange(n) % 3, 3)
        plan = partition(ds, k, mode, seed, alpha=0.5)
        assert plan.assignment.min() >= 0 and plan.assignment.max() < k
        assert plan.counts().sum() == n
        again = partition(ds, k, mode, seed, alpha=0.5)
        assert np.array_equal(plan.assignment, again.assignment)


class TestSplitPretrain:
    def _indexed(self, n=100):
        # each image carries its own index so subsets can be traced back
        return Dataset(np.arange(n, dtype=float).reshape(n, 1, 1, 1) / n, np.zeros(n, dtype=int), 2)

    def test_sizes(self):
        pre, priv = split_pretrain(self._indexed(), 0.8, 0)
        assert (len(pre), len(priv)) == (80, 20)

    def test_disjoint_cover(self):
        pre, priv = split_pretrain(self._indexed(), 0.8, 0)
        a = set(np.round(pre.images.reshape(-1) * 100).astype(int))
        b = set(np.round(priv.images.reshape(-1) * 100).astype(int))
        assert a.isdisjoint(b) and a | b == set(range(100))

    def test_deterministic(self):
        ds = self._indexed()
        assert split_pretrain(ds, 0.8, 5)[1].images.tobytes() == split_pretrain(ds, 0.8, 5)[1].images.tobytes()

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_fraction_bounds(self, fraction):
        with pytest.raises(ValueError):
            split_pretrain(self._indexed(10), fraction)
