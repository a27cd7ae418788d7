import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from structmask import fileio
from structmask.cli import main
from structmask.config import defaults, parse_config
from structmask.errors import ConfigError, FormatError

TINY = """\
experiment = expander
n = 24
m = 12
d = 3
s = 2
iterations = 3
epochs = 1
samples_per_epoch = 64
test_size = 64
batch_size = 32
lr = 0.05
noise_scale = 0.1
seed = 5
"""


class TestMatrixFormat:
    def test_header_sizes(self):
        assert len(fileio.encode_matrix(np.zeros((3, 5)))) == 24 + 8 * 15
        binary = fileio.encode_matrix(np.array([[1, 0, 1], [0, 1, 1]], dtype=np.uint8))
        assert len(binary) - 24 == 6
        assert binary[:8] == b"GLDM0001"

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(0, 5), st.integers(0, 5))))
    def test_round_trip_bit_identical(self, a):
        back, end = fileio._decode(fileio.encode_matrix(a), 0)
        assert back.tobytes() == a.tobytes() and back.shape == a.shape

    def test_files_and_records(self, tmp_path, rng):
        a, b = rng.standard_normal((2, 3)), (rng.random((4, 4)) < 0.5).astype(np.uint8)
        fileio.write_matrix(tmp_path / "a", a)
        np.testing.assert_array_equal(fileio.read_matrix(tmp_path / "a"), a)
        fileio.write_matrices(tmp_path / "ab", [a, b])
        ra, rb = fileio.read_matrices(tmp_path / "ab")
        np.testing.assert_array_equal(ra, a)
        assert rb.dtype == np.uint8 and np.array_equal(rb, b)

    def test_rejections(self, tmp_path):
        good = fileio.encode_matrix(np.ones((2, 2)))
        (tmp_path / "m").write_bytes(b"GLDM0002" + good[8:])
        with pytest.raises(FormatError, match="magic"):
            fileio.read_matrix(tmp_path / "m")
        (tmp_path / "m").write_bytes(good[:-1])
        with pytest.raises(FormatError, match="size mismatch"):
            fileio.read_matrix(tmp_path / "m")
        (tmp_path / "m").write_bytes(good + b"\0")
        with pytest.raises(FormatError, match="trailing"):
            fileio.read_matrix(tmp_path / "m")
        with pytest.raises(FormatError):
            fileio.encode_matrix(np.array([0, 2]), binary=True)

    def test_pgm(self, tmp_path):
        fileio.write_pgm(tmp_path / "p.pgm", np.array([[0.0, 1.0], [0.5, 1.0]]))
        np.testing.assert_array_equal(fileio.read_pgm(tmp_path / "p.pgm"), [[0, 255], [128, 255]])


class TestConfig:
    def test_group_testing_defaults(self):
        c = defaults("group_testing")
        assert (c.m, c.n, c.d, c.s, c.nnlad_sigma, c.nnlad_tau, c.positive_threshold) == (248, 961, 31, 80, 0.1, 0.6, 0.01)
        assert (c.iterations, c.test_iterations, c.average_loss) == (200, 1000, True)

    def test_paper_training_settings(self):
        c = defaults("single_pixel")
        assert (c.lr, c.beta1, c.beta2, c.batch_size, c.samples_per_epoch, c.test_size) == \
            (0.0002, 0.9, 0.999, 512, 50000, 10000)
        assert (c.sa_tau0, c.sa_decay) == (0.0012, 0.9997)
        e = defaults("expander")
        assert (e.m, e.n, e.d, e.s, e.sa_tau0, e.sa_decay) == (250, 784, 7, 40, 0.003, 0.9998)

    def test_parse_and_text_round_trip(self):
        c = parse_config(TINY)
        assert c.solver == "e_iht" and c.m == 12 and c.loss == "l1"
        assert parse_config(c.to_text()) == c

    @pytest.mark.parametrize("text, key", [
        ("bogus = 1", "bogus"),
        ("experiment = expander\nd = 300", "d"),
        ("m = x", "m"),
        ("experiment = group_testing\nsolver = iht", "solver"),
        ("m = 3\nm = 4", "m"),
        ("lr = -1", "lr"),
    ])
    def test_field_level_errors(self, text, key):
        with pytest.raises(ConfigError, match=key):
            parse_config(text)


def read_rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


class TestCli:
    @pytest.fixture
    def cfg(self, tmp_path):
        path = tmp_path / "tiny.cfg"
        path.write_text(TINY)
        return path

    def test_train_outputs_and_manifest(self, cfg, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        for name in ("metrics.csv", "mask.gldm", "checkpoint.gldm", "manifest.txt", "masks/phi.pgm"):
            assert (out / name).exists()
        listed = {}
        for line in (out / "manifest.txt").read_text().splitlines():
            parts = line.split()
            if parts[0] == "file":
                listed[parts[1]] = parts[2]
        assert "mask.gldm" in listed and "masks/phi.pgm" in listed
        assert all(fileio.sha256_file(out / k) == v for k, v in listed.items())
        assert list(read_rows(out / "metrics.csv")[0]) == ["epoch", "split", "metric", "value", "seed"]

    def test_eval_twice_identical(self, cfg, tmp_path):
        main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")])
        mask = str(tmp_path / "t" / "mask.gldm")
        for d in ("e1", "e2"):
            assert main(["eval", "--config", str(cfg), "--mask", mask, "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "e1" / "metrics.csv").read_bytes() == (tmp_path / "e2" / "metrics.csv").read_bytes()

    def test_sweep_row_groups(self, cfg, tmp_path):
        out = tmp_path / "sw"
        assert main(["sweep", "--config", str(cfg), "--field", "m", "--values", "10,12", "--out", str(out)]) == 0
        rows = read_rows(out / "metrics.csv")
        assert [r["m"] for r in rows] == sorted(r["m"] for r in rows)
        assert {r["m"] for r in rows} == {"10", "12"}
        assert (out / "m=10" / "mask.gldm").exists()

    def test_override_and_seed(self, cfg, tmp_path):
        out = tmp_path / "o"
        assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "9", "--override", "epochs=0"]) == 0
        rows = read_rows(out / "metrics.csv")
        assert {r["seed"] for r in rows} == {"9"} and {r["epoch"] for r in rows} == {"0"}

    def test_baseline(self, cfg, tmp_path):
        assert main(["baseline", "--config", str(cfg), "--kind", "greedy", "--out", str(tmp_path / "b")]) == 0
        assert any(r["metric"] == "acceptance_rate" for r in read_rows(tmp_path / "b" / "metrics.csv"))

    def test_invalid_config_exits_non_zero(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("experiment = expander\nd = 999\n")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
        assert "d:" in capsys.readouterr().err
        assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
