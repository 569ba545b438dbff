import csv
import io
import json
import os

import numpy as np
import pytest

from fedguard import cli, experiment as ex, federation
from fedguard.exceptions import ConfigError, ProtocolError
from fedguard.nn import loss_and_grad


MNIST_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.pardir, "data", "mnist")
HAVE_MNIST = os.path.exists(os.path.join(MNIST_DIR, "train-images-idx3-ubyte.gz"))


def synthetic_config(**kw):
    raw = {
        "clients": 4,
        "local_epochs": 1,
        "batch_size": 32,
        "rounds": 3,
        "model": "small_mlp",
        "dataset": {"source": "synthetic", "n": 400, "test_n": 100},
    }
    raw.update(kw)
    return raw


@pytest.fixture
def config_file(tmp_path):
    def write(**kw):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(synthetic_config(**kw)))
        return str(path)
    return write


class TestParseConfig:
    def test_defaults(self):
        cfg = ex.parse_config("{}")
        assert (cfg.clients, cfg.fraction, cfg.local_epochs, cfg.batch_size) == (10, 1.0, 10, 124)
        assert (cfg.learning_rate, cfg.rounds, cfg.threshold_rule) == (0.1, 10, "median")
        assert cfg.attack is None

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            ex.parse_config('{"learning_rate": -1}')

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key.*modee"):
            ex.parse_config('{"modee": 1}')

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="partition.shards"):
            ex.parse_config('{"partition": {"shards": 2}}')

    def test_malformed_location(self):
        with pytest.raises(ConfigError, match="line 2, column"):
            ex.parse_config('{\n  "rounds": ,\n}')

    def test_attack_section(self):
        cfg = ex.parse_config('{"attack": {"targets": [3], "std": 2.0}}')
        spec = cfg.attack.to_spec()
        assert spec.targets == {3} and spec.kind.std == 2.0

    def test_attack_target_out_of_range(self):
        with pytest.raises(ConfigError):
            ex.parse_config('{"clients": 2, "attack": {"targets": [5]}}')


def test_convergence_round():
    assert ex.convergence_round([2.0, 1.5, 1.04, 1.0]) == 3
    assert ex.convergence_round([1.0]) == 1
    assert ex.first_round_reaching([3.0, 2.0, 1.0], 2.0) == 2
    assert ex.first_round_reaching([3.0], 2.0) is None


def test_csv_formatting():
    assert ex._fmt(0.1234567891234) == "0.123456789"
    assert ex._fmt(True) == "true" and ex._fmt(None) == ""


class TestRun:
    def test_csv_counting_contract(self, tmp_path):
        cfg = ex.parse_config(json.dumps(synthetic_config()))
        assert ex.run(cfg, str(tmp_path)) == ex.EXIT_OK
        text = (tmp_path / "metrics.csv").read_text()
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ex.CSV_HEADER
        body = rows[1:]
        globals_ = [r for r in body if r[2] == "global"]
        assert len(globals_) == 2 * 3
        summary = json.loads((tmp_path / "summary.json").read_text())
        participants = 2 * 3 * 4
        assert len(body) == 2 * 3 + participants
        assert {r[0] for r in body} == {"fedavg", "secure"}
        assert all(r[4] == "" and r[5] == "" for r in body if r[0] == "fedavg")
        assert set(summary["runs"]) == {"fedavg", "secure"}
        assert summary["checksums"]["partition_plan"]

    def test_byte_identical_rerun(self, tmp_path):
        cfg = ex.parse_config(json.dumps(synthetic_config()))
        ex.run(cfg, str(tmp_path / "a"))
        ex.run(cfg, str(tmp_path / "b"))
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()

    def test_attack_detected_in_summary(self, tmp_path):
        raw = synthetic_config(
            clients=10, local_epochs=2, batch_size=64, rounds=2,
            dataset={"source": "synthetic", "n": 2000, "test_n": 200},
            attack={"targets": [1, 2], "std": 1.0},
        )
        assert ex.run(ex.parse_config(json.dumps(raw)), str(tmp_path)) == ex.EXIT_OK
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["runs"]["secure"]["banned"] == [1, 2]
        assert summary["runs"]["fedavg"]["banned"] == []

    def test_missing_idx_files(self, tmp_path):
        cfg = ex.parse_config(json.dumps({"dataset": {"dir": str(tmp_path / "nowhere")}}))
        assert ex.run(cfg, str(tmp_path / "out")) == ex.EXIT_IO

    def test_protocol_error_exit(self, tmp_path, monkeypatch):
        def nobody(*args):
            raise ProtocolError("all clients banned before round 1")

        monkeypatch.setattr(federation, "participants", nobody)
        cfg = ex.parse_config(json.dumps(synthetic_config()))
        assert ex.run(cfg, str(tmp_path)) == ex.EXIT_PROTOCOL


class TestGradcheck:
    @pytest.mark.parametrize("name", ["small_mlp", "paper_cnn"])
    def test_passes(self, name):
        code, err = ex.gradcheck(name, seed=3, out=lambda s: None)
        assert code == 0 and err <= 1e-4

    def test_fault_injected(self):
        def broken(spec, params, batch):
            value, grads = loss_and_grad(spec, params, batch)
            return value, grads.map(lambda g: g * 1.01)

        lines = []
        code, err = ex.gradcheck("small_mlp", grad_fn=broken, out=lines.append)
        assert code == ex.EXIT_CHECK_FAILED and err > 1e-4
        assert "FAIL" in lines[0]


class TestPartitionStats:
    @pytest.mark.skipif(not HAVE_MNIST, reason="MNIST IDX files not found in data/mnist")
    def test_full_mnist_iid(self):
        cfg = ex.parse_config(json.dumps({"dataset": {"dir": MNIST_DIR}}))
        rows = ex.partition_stats(cfg, out=lambda s: None)
        assert [n for _, n, _ in rows] == [6000] * 10
        assert all(d == 10 for _, _, d in rows)

    def test_iid(self):
        cfg = ex.parse_config(json.dumps(synthetic_config(clients=10, dataset={"source": "synthetic", "n": 1000})))
        rows = ex.partition_stats(cfg, out=lambda s: None)
        assert [n for _, n, _ in rows] == [100] * 10

    def test_noniid_equal(self):
        raw = synthetic_config(clients=10, partition={"scheme": "noniid_equal"},
                               dataset={"source": "synthetic", "n": 1000})
        rows = ex.partition_stats(ex.parse_config(json.dumps(raw)), out=lambda s: None)
        assert len({n for _, n, _ in rows}) == 1
        assert max(d for _, _, d in rows) <= 4

    def test_noniid_unequal(self):
        raw = synthetic_config(clients=10, partition={"scheme": "noniid_unequal"},
                               dataset={"source": "synthetic", "n": 1000})
        rows = ex.partition_stats(ex.parse_config(json.dumps(raw)), out=lambda s: None)
        sizes = [n for _, n, _ in rows]
        assert min(sizes) < max(sizes)


class TestCli:
    def test_run(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main(["run", "--config", config_file(), "--seed", "4", "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["seeds"]["master_seed"] == 4

    def test_gradcheck(self, capsys):
        assert cli.main(["gradcheck", "--spec", "paper_cnn", "--seed", "1"]) == 0
        assert "max_rel_error" in capsys.readouterr().out

    def test_partition_stats(self, config_file, capsys):
        assert cli.main(["partition-stats", "--config", config_file()]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 4 and lines[0].startswith("client=0 n_c=100")

    def test_bad_config(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"rounds": -3}')
        assert cli.main(["run", "--config", str(path)]) == 2
        assert "rounds" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert cli.main(["partition-stats", "--config", str(tmp_path / "none.json")]) == 2

    def test_threads_env(self, config_file, tmp_path, monkeypatch):
        path = config_file()
        monkeypatch.setenv("FEDGUARD_THREADS", "0")
        cli.main(["run", "--config", path, "--out", str(tmp_path / "seq")])
        monkeypatch.setenv("FEDGUARD_THREADS", "3")
        cli.main(["run", "--config", path, "--out", str(tmp_path / "par")])
        assert (tmp_path / "seq" / "metrics.csv").read_bytes() == (tmp_path / "par" / "metrics.csv").read_bytes()


def test_paired_runs_share_initial_weights():
    cfg = ex.parse_config(json.dumps(synthetic_config(rounds=1)))
    histories, summary = ex.run_experiments(cfg)
    assert [h[0].mode for h in histories] == ["fedavg", "secure"]
    assert summary["client_sizes"] == {"0": 100, "1": 100, "2": 100, "3": 100}
    train, _ = ex.load_datasets(cfg)
    spec = ex.model_spec(cfg, train)
    for mode in ("fedavg", "secure"):
        w0 = federation.start_server(cfg.federation(mode), spec).global_params
        assert ex._digest(w0.to_bytes()) == summary["checksums"]["initial_params"]
    assert ex.plan_checksum(ex.make_plan(cfg, train)) == summary["checksums"]["partition_plan"]
