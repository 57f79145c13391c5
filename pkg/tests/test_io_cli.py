"""File formats and the command-line interface (run in-process)."""

import json
import struct

import numpy as np
import pytest

import hednet.gradcheck
from hednet import cli
from hednet.core import SparseTensor
from hednet.errors import ConfigError, FormatError
from hednet.fileio import (fnv1a64, load_config, read_points_bin,
                           read_points_csv, read_sparse_tensor, read_weights,
                           save_config, tensor_digest, write_sparse_tensor,
                           write_weights)
from hednet.network import (NetworkConfig, StagePlan, VoxelGridSpec,
                            config_to_dict, init_weights)
from hednet.oracle import random_sparse_tensor


def small_config(**kw):
    base = dict(
        dimensionality=3,
        grid=VoxelGridSpec((0.0, 0.0, 0.0), (1.6, 1.6, 0.8), (0.1, 0.1, 0.1)),
        stem_channels=4, stages=(StagePlan(8, 2),),
        sed_scales=2, m=1, ded_count=1, ded_scales=2, ded_m=1)
    base.update(kw)
    return NetworkConfig(**base)


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "net.json"
    save_config(p, small_config())
    return str(p)


@pytest.fixture
def weights_path(tmp_path, cfg_path):
    p = tmp_path / "w.hedw"
    write_weights(p, init_weights(small_config(), 0))
    return str(p)


@pytest.fixture
def points_path(tmp_path):
    p = tmp_path / "cloud.csv"
    rng = np.random.default_rng(0)
    pts = rng.random((200, 4)) * [1.6, 1.6, 0.8, 1.0]
    lines = ["x,y,z,intensity"]
    lines += [",".join(f"{v:.6f}" for v in row) for row in pts]
    p.write_text("\n".join(lines) + "\n")
    return str(p)


class TestSparseTensorFormat:
    def test_round_trip(self, tmp_path):
        t = random_sparse_tensor(1, (6, 7, 8), 0.2, 3, batch_size=2,
                                 dtype=np.float32)
        path = tmp_path / "t.spt"
        write_sparse_tensor(path, t)
        back = read_sparse_tensor(path)
        assert np.array_equal(back.coords, t.coords)
        assert np.array_equal(back.features, t.features)
        assert back.spatial_shape == t.spatial_shape
        assert back.batch_size == t.batch_size

    def test_empty_round_trip(self, tmp_path):
        t = SparseTensor.empty((4, 4), 2, dtype=np.float32)
        path = tmp_path / "t.spt"
        write_sparse_tensor(path, t)
        back = read_sparse_tensor(path)
        assert back.num_active == 0 and back.channels == 2

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.spt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            read_sparse_tensor(path)

    def test_truncated(self, tmp_path):
        t = random_sparse_tensor(1, (6, 6), 0.3, 2, dtype=np.float32)
        path = tmp_path / "t.spt"
        write_sparse_tensor(path, t)
        data = path.read_bytes()
        path.write_bytes(data[:-7])
        with pytest.raises(FormatError):
            read_sparse_tensor(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "t.spt"
        path.write_bytes(b"SPT1" + struct.pack("<IBI", 9, 2, 1) + b"\x00" * 24)
        with pytest.raises(FormatError):
            read_sparse_tensor(path)


class TestWeightsFormat:
    def test_round_trip_preserves_order(self, tmp_path):
        w = init_weights(small_config(), 7)
        path = tmp_path / "w.hedw"
        write_weights(path, w)
        back = read_weights(path)
        assert list(back) == list(w)
        assert all(np.array_equal(back[k], w[k]) for k in w)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "w.hedw"
        write_weights(path, {"a": np.ones((2, 2), dtype=np.float32)})
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            read_weights(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.hedw"
        path.write_bytes(b"XXXX" + b"\x00" * 8)
        with pytest.raises(FormatError):
            read_weights(path)


class TestPointReaders:
    def test_csv_happy_path(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y,z,intensity\n1,2,3,4\n5,6,7,8\n")
        pts = read_points_csv(p)
        assert pts.shape == (2, 4)
        assert pts[1, 3] == 8.0

    def test_csv_bad_header(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(FormatError):
            read_points_csv(p)

    def test_csv_field_count_names_line(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y,z\n1,2,3\n1,2\n")
        with pytest.raises(FormatError, match="line 3"):
            read_points_csv(p)

    def test_csv_non_numeric_names_line(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("x,y,z\n1,2,zzz\n")
        with pytest.raises(FormatError, match="line 2"):
            read_points_csv(p)

    def test_bin_round_trip(self, tmp_path):
        pts = np.arange(8, dtype="<f4").reshape(2, 4)
        p = tmp_path / "a.bin"
        p.write_bytes(pts.tobytes())
        assert np.array_equal(read_points_bin(p), pts.astype(np.float64))

    def test_bin_bad_size(self, tmp_path):
        p = tmp_path / "a.bin"
        p.write_bytes(b"\x00" * 13)
        with pytest.raises(FormatError):
            read_points_bin(p)


class TestConfigFile:
    def test_round_trip(self, tmp_path, cfg_path):
        cfg = load_config(cfg_path)
        assert cfg == small_config()

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(FormatError):
            load_config(p)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "bad.json"
        data = config_to_dict(small_config())
        data["whatever"] = 1
        p.write_text(json.dumps(data))
        with pytest.raises(ConfigError):
            load_config(p)


class TestDigest:
    def test_fnv_known_vectors(self):
        # standard FNV-1a 64 test vectors
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_tensor_digest_stable(self):
        x = np.arange(6, dtype=np.float64).reshape(2, 3)
        assert tensor_digest(x) == tensor_digest(x.copy())
        assert tensor_digest(x) != tensor_digest(x + 1)
        assert tensor_digest(x) != tensor_digest(x.astype(np.float32))


class TestCli:
    def test_voxelize_and_forward(self, tmp_path, cfg_path, weights_path,
                                  points_path, capsys):
        out = tmp_path / "vox.spt"
        assert cli.main(["voxelize", "--config", cfg_path, "--input",
                         points_path, "--output", str(out)]) == 0
        t = read_sparse_tensor(out)
        assert t.num_active > 0
        report = tmp_path / "report.json"
        bev = tmp_path / "bev.npy"
        assert cli.main(["forward", "--config", cfg_path, "--weights",
                         weights_path, "--input", points_path,
                         "--output", str(bev), "--report", str(report)]) == 0
        rep = json.loads(report.read_text())
        arr = np.load(bev)
        assert tuple(rep["output_shape"]) == arr.shape
        assert rep["digest"] == tensor_digest(arr)
        captured = capsys.readouterr()
        assert "digest:" in captured.out

    def test_forward_threads_flag_is_bitwise_stable(self, tmp_path, cfg_path,
                                                    weights_path, points_path):
        digests = []
        for threads in (1, 4):
            report = tmp_path / f"r{threads}.json"
            assert cli.main(["forward", "--config", cfg_path, "--weights",
                             weights_path, "--input", points_path,
                             "--threads", str(threads),
                             "--report", str(report)]) == 0
            digests.append(json.loads(report.read_text())["digest"])
        assert digests[0] == digests[1]

    def test_missing_input_exit_2(self, tmp_path, cfg_path):
        assert cli.main(["voxelize", "--config", cfg_path, "--input",
                         str(tmp_path / "nope.csv"),
                         "--output", str(tmp_path / "o.spt")]) == 2

    def test_malformed_csv_exit_3(self, tmp_path, cfg_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("x,y,z\n1,2\n")
        assert cli.main(["voxelize", "--config", cfg_path, "--input",
                         str(bad), "--output", str(tmp_path / "o.spt")]) == 3
        assert "line 2" in capsys.readouterr().err

    def test_config_weight_mismatch_exit_4(self, tmp_path, cfg_path,
                                           points_path):
        other = small_config(stem_channels=8, stages=(StagePlan(16, 2),))
        wpath = tmp_path / "other.hedw"
        write_weights(wpath, init_weights(other, 0))
        assert cli.main(["forward", "--config", cfg_path, "--weights",
                         str(wpath), "--input", points_path]) == 4

    def test_invalid_config_exit_4(self, tmp_path, points_path):
        p = tmp_path / "bad.json"
        data = config_to_dict(small_config())
        data["surprise"] = True
        p.write_text(json.dumps(data))
        assert cli.main(["voxelize", "--config", str(p), "--input",
                         points_path, "--output",
                         str(tmp_path / "o.spt")]) == 4

    def test_gradcheck_pass(self, cfg_path, capsys):
        assert cli.main(["gradcheck", "--config", cfg_path, "--seed", "7",
                         "--layer", "ss"]) == 0
        assert "gradcheck passed" in capsys.readouterr().out

    def test_gradcheck_all_layers(self, cfg_path):
        assert cli.main(["gradcheck", "--config", cfg_path]) == 0

    def test_gradcheck_detects_broken_backward_exit_5(self, cfg_path,
                                                      monkeypatch):
        real = hednet.gradcheck.conv_backward

        def corrupted(ctx, grad_out):
            gi, gw, gb = real(ctx, grad_out)
            return gi * 1.01, gw, gb        # 1% error must be flagged

        monkeypatch.setattr(hednet.gradcheck, "conv_backward", corrupted)
        assert cli.main(["gradcheck", "--config", cfg_path,
                         "--layer", "rs"]) == 5

    def test_init_weights_and_bench(self, tmp_path, cfg_path, capsys):
        wpath = tmp_path / "w.hedw"
        assert cli.main(["init-weights", "--config", cfg_path, "--seed", "3",
                         "--output", str(wpath)]) == 0
        report = tmp_path / "bench.json"
        assert cli.main(["bench", "--config", cfg_path, "--weights",
                         str(wpath), "--density", "0.02", "--repeats", "3",
                         "--report", str(report)]) == 0
        rep = json.loads(report.read_text())
        assert rep["digests_identical"] is True
        assert rep["repeats"] == 3
        assert any(layer["name"] == "voxelize" for layer in rep["layers"])
