import gzip
import hashlib
import importlib.util
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from earlycrop.data import (
    CheckpointVersionError,
    ConfigError,
    FormatError,
    checkpoint_bytes,
    csr_bytes,
    csr_disk_estimate,
    load_checkpoint,
    load_csv,
    load_idx,
    load_mask,
    load_node_mask,
    make_synthetic,
    mask_bytes,
    model_masks,
    read_idx,
    save_checkpoint,
    save_mask,
    save_node_mask,
    write_idx,
)
from earlycrop.lifecycle import DetectorState
from earlycrop.models import cnn, mlp, predict
from earlycrop.structured import NodeMask

ROOT = Path(__file__).resolve().parents[1]
IDX_SHA256 = "7e046854484d44b1b88f1c1275ee18aff61ca193f53f65c55e1542f02679b778"
CKPT_SHA256 = "5f9f4426adf80a96c6cdfc00e31e4931feb89396202425132c0189cc3dd30816"


def fixture_builders():
    spec = importlib.util.spec_from_file_location("make_fixtures", ROOT / "scripts" / "make_fixtures.py")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


class TestSynthetic:
    def test_moons_on_unit_arcs(self):
        data = make_synthetic("two_moons", 1000, noise=0.0, seed=0)
        x = np.concatenate([data.x_train, data.x_test])
        y = np.concatenate([data.y_train, data.y_test])
        upper = x[y == 0]
        lower = x[y == 1] - np.array([1.0, 0.5])
        np.testing.assert_allclose(np.hypot(*upper.T), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.hypot(*lower.T), 1.0, atol=1e-12)
        assert (upper[:, 1] >= -1e-12).all() and (lower[:, 1] <= 1e-12).all()

    @pytest.mark.parametrize("name", ["two_moons", "spirals", "sine_regression"])
    def test_deterministic(self, name):
        a, b = make_synthetic(name, 200, 0.2, seed=4), make_synthetic(name, 200, 0.2, seed=4)
        assert a.x_train.tobytes() == b.x_train.tobytes()
        assert a.y_test.tobytes() == b.y_test.tobytes()

    def test_split_sizes(self):
        data = make_synthetic("spirals", 101, seed=1)
        assert len(data.x_train) + len(data.x_test) == 101
        assert len(data.x_train) == 81

    def test_sine_exact_without_noise(self):
        data = make_synthetic("sine_regression", 50, noise=0.0, seed=2)
        assert np.array_equal(data.y_train, np.sin(data.x_train))
        assert data.task == "regression"

    def test_errors(self):
        with pytest.raises(ConfigError):
            make_synthetic("circles", 100)
        with pytest.raises(ConfigError):
            make_synthetic("two_moons", 9)


class TestIdx:
    def test_header_example(self, tmp_path):
        path = tmp_path / "a.idx"
        path.write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4]) + bytes(range(24)))
        arr = read_idx(path)
        assert arr.shape == (2, 3, 4)
        assert arr.dtype == np.uint8
        assert arr[1, 2, 3] == 23

    def test_truncated_payload_names_counts(self, tmp_path):
        path = tmp_path / "t.idx"
        path.write_bytes(bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4]) + bytes(20))
        with pytest.raises(FormatError, match="byte 16: expected 24 bytes, found 20"):
            read_idx(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.idx"
        path.write_bytes(bytes([1, 0, 8, 1, 0, 0, 0, 1, 7]))
        with pytest.raises(FormatError, match="byte 0"):
            read_idx(path)

    def test_gzip_and_big_endian_floats(self, tmp_path):
        arr = np.array([[1.5, -2.0], [0.25, 8.0]], dtype=np.float32)
        plain = tmp_path / "f.idx"
        write_idx(plain, arr)
        assert plain.read_bytes()[2] == 0x0D
        zipped = tmp_path / "f.idx.gz"
        zipped.write_bytes(gzip.compress(plain.read_bytes()))
        np.testing.assert_array_equal(read_idx(zipped), arr)

    def test_image_label_pair(self, tmp_path):
        write_idx(tmp_path / "x.idx", np.full((10, 4, 4), 255, dtype=np.uint8))
        write_idx(tmp_path / "y.idx", np.arange(10, dtype=np.uint8) % 3)
        data = load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
        assert data.x_train.shape == (8, 4, 4, 1)
        assert data.x_train.max() == 1.0
        assert data.n_classes == 3

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "x.idx", np.zeros((10, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "y.idx", np.zeros(9, dtype=np.uint8))
        with pytest.raises(FormatError):
            load_idx(tmp_path / "x.idx", tmp_path / "y.idx")


class TestCsv:
    def test_shape(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b,label\n1,2,0\n3,4,1\n5,6,0\n")
        data = load_csv(path)
        assert data.inputs.shape == (3, 2)
        assert sorted(data.targets.tolist()) == [0, 0, 1]

    def test_regression_schema(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text("x,y\n" + "".join(f"{i},{i * 0.5}\n" for i in range(10)))
        data = load_csv(path, {"task": "regression"})
        assert data.y_train.shape == (8, 1)

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,x\n")
        with pytest.raises(FormatError):
            load_csv(path)


class TestCsr:
    def test_example(self):
        mask = np.zeros((100, 100), dtype=bool)
        mask.flat[np.random.default_rng(0).choice(10_000, 500, replace=False)] = True
        assert csr_disk_estimate(mask).csr_bytes == 2202

    def test_empty(self):
        assert csr_bytes(37, 0) == 2 * 38

    def test_dense_exceeds_dense_half_precision(self):
        est = csr_disk_estimate(np.ones((20, 30)))
        assert est.csr_bytes > 2 * 20 * 30
        assert est.dense_bytes == 4 * 20 * 30

    def test_wide_index_variant(self):
        assert csr_disk_estimate(np.eye(10)).csr_bytes_32bit_index == 2 * 10 + 4 * 10 + 4 * 11

    def test_model_sums_layers(self):
        model = mlp([4, 6, 2], seed=0)
        assert csr_disk_estimate(model).csr_bytes == csr_bytes(6, 24) + csr_bytes(2, 12)

    def test_conv_kernels_as_matrices(self):
        model = cnn((5, 5, 2), channels=(3,), n_out=2, seed=0)
        assert csr_disk_estimate(model).csr_bytes == csr_bytes(3, 3 * 2 * 9) + csr_bytes(2, 2 * 27)

    @given(rows=st.integers(1, 50), cols=st.integers(1, 50), a=st.integers(0, 2500), b=st.integers(0, 2500))
    def test_monotone_in_nnz(self, rows, cols, a, b):
        lo, hi = sorted((min(a, rows * cols), min(b, rows * cols)))
        assert csr_bytes(rows, lo) <= csr_bytes(rows, hi)


class TestCheckpoint:
    @pytest.fixture
    def pruned_cnn(self):
        model = cnn((6, 6, 2), channels=(3, 4), n_out=3, hidden=(5,), activation="tanh", seed=9)
        rng = np.random.default_rng(0)
        for layer in model.layers:
            layer.weight_mask = rng.uniform(size=layer.weight.shape) > 0.3
            layer.weight = layer.weight * layer.weight_mask
        return model

    def test_round_trip(self, tmp_path, pruned_cnn):
        save_checkpoint(pruned_cnn, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        x = np.random.default_rng(1).standard_normal((20, 6, 6, 2))
        a, b = predict(pruned_cnn, x), predict(loaded, x)
        assert np.abs(a - b).max() / np.abs(a).max() <= 1e-5
        for la, lb in zip(pruned_cnn.layers, loaded.layers):
            assert la.weight_mask.tobytes() == lb.weight_mask.tobytes()
            assert la.kind == lb.kind and la.activation == lb.activation

    def test_detector_round_trip(self, tmp_path, tanh_mlp):
        state = DetectorState.start(np.array([1.0, 2.0]), th=0.1, normalization="theta0")
        state.delta_history = [0.0, 0.5, 0.75]
        state.delta1 = 0.5
        state.triggered_epoch = 2
        save_checkpoint(tanh_mlp, tmp_path / "d.ckpt", detector=state)
        _, loaded = load_checkpoint(tmp_path / "d.ckpt", with_detector=True)
        assert loaded.delta_history == [0.0, 0.5, 0.75]
        assert loaded.triggered_epoch == 2 and loaded.normalization == "theta0"

    def test_corrupted_magic(self, tmp_path, tanh_mlp):
        blob = bytearray(checkpoint_bytes(tanh_mlp))
        blob[0] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_version_mismatch(self, tmp_path, tanh_mlp):
        blob = bytearray(checkpoint_bytes(tanh_mlp))
        blob[8] = 99
        (tmp_path / "v.ckpt").write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_truncated(self, tmp_path, tanh_mlp):
        (tmp_path / "t.ckpt").write_bytes(checkpoint_bytes(tanh_mlp)[:-3])
        with pytest.raises(FormatError, match="byte"):
            load_checkpoint(tmp_path / "t.ckpt")


class TestMasks:
    def test_round_trip_bit_exact(self, tmp_path, small_cnn):
        rng = np.random.default_rng(2)
        for layer in small_cnn.layers:
            layer.weight_mask = rng.uniform(size=layer.weight.shape) > 0.5
        save_mask(tmp_path / "m.bin", model_masks(small_cnn))
        for (i, m), layer in zip(load_mask(tmp_path / "m.bin"), small_cnn.layers):
            assert m.shape == layer.weight_mask.shape
            assert np.array_equal(m, layer.weight_mask)

    def test_node_mask_round_trip(self, tmp_path):
        mask = NodeMask((0, 2), (np.array([1, 0, 1], dtype=bool), np.array([0, 1], dtype=bool)))
        save_node_mask(tmp_path / "n.bin", mask)
        loaded = load_node_mask(tmp_path / "n.bin")
        assert loaded.layers == (0, 2)
        assert [k.tolist() for k in loaded.keep] == [[True, False, True], [False, True]]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTAMASK" + bytes(10))
        with pytest.raises(FormatError):
            load_mask(tmp_path / "x.bin")

    def test_empty(self):
        assert mask_bytes([]).startswith(b"ECRPMASK")


class TestGoldenFiles:
    def test_idx_fixture(self, fixtures_dir, tmp_path):
        golden = (fixtures_dir / "golden_2x3x4.idx").read_bytes()
        assert hashlib.sha256(golden).hexdigest() == IDX_SHA256
        write_idx(tmp_path / "fresh.idx", fixture_builders().golden_idx())
        assert (tmp_path / "fresh.idx").read_bytes() == golden
        arr = read_idx(fixtures_dir / "golden_2x3x4.idx")
        assert arr.shape == (2, 3, 4) and arr[1, 2, 3] == 230

    def test_checkpoint_fixture(self, fixtures_dir):
        golden = (fixtures_dir / "golden_mlp.ckpt").read_bytes()
        assert hashlib.sha256(golden).hexdigest() == CKPT_SHA256
        builders = fixture_builders()
        assert checkpoint_bytes(builders.golden_model(), builders.golden_detector()) == golden

    def test_checkpoint_fixture_values(self, fixtures_dir):
        model, detector = load_checkpoint(fixtures_dir / "golden_mlp.ckpt", with_detector=True)
        np.testing.assert_array_equal(model.layers[0].weight, [[0.5, 0.0], [0.25, 2.0], [0.0, 0.125]])
        np.testing.assert_array_equal(model.layers[0].weight_mask, [[1, 0], [1, 1], [0, 1]])
        assert model.head == "regression"
        assert detector.delta_history == [0.0, 1.0, 1.5] and detector.th == 0.05
        out = predict(model, np.array([[1.0, 1.0]]))
        b1 = float(np.float32(0.1)), float(np.float32(-0.2)), 0.0
        hidden = np.tanh([0.5 + b1[0], 2.25 + b1[1], 0.125])
        expected = 1.5 * hidden[0] - 0.5 * hidden[1] + 0.25 * hidden[2] + float(np.float32(0.05))
        assert out[0, 0] == pytest.approx(expected, rel=1e-12)
