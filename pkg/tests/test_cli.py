import csv
import hashlib
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from tnet.analysis import DEFAULT_OVERHEAD
from tnet.cli import parse_ranks, run
from tnet.tensor_core import save_tensor

REFERENCE_ARCH = {"n_hg": 4, "hg_depth": 4, "hg_subnet": 3, "b_depth": 2,
                  "f_in": 128, "f_out": 128, "kernel_h": 3, "kernel_w": 3}
TOY_ARCH = dict(REFERENCE_ARCH, n_hg=2, hg_depth=2, f_in=8, f_out=8)


def invoke(*argv):
    out = io.StringIO()
    code = run(list(argv), out)
    return code, out.getvalue()


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def arch_file(tmp_path):
    path = tmp_path / "arch.json"
    path.write_text(json.dumps(REFERENCE_ARCH))
    return path


@pytest.fixture
def weights(tmp_path, rng):
    path = tmp_path / "w.tnt"
    save_tensor(path, rng.standard_normal((3, 4, 5)))
    return path


class TestParseRanks:
    def test_list(self):
        assert parse_ranks("1,4,4") == (1, 4, 4)

    def test_full(self):
        assert parse_ranks("full") == "full"

    @pytest.mark.parametrize("text", ["1,,2", "a,b", "0,1", "-1", ""])
    def test_malformed(self, text):
        with pytest.raises(Exception):
            parse_ranks(text)


class TestAnalyze:
    def test_table3_row(self, arch_file):
        code, text = invoke("analyze", "--arch", str(arch_file), "--tucker-ranks", "2,2,2,2,96,96,3,3")
        assert code == 0
        row = [line for line in text.splitlines() if line.startswith("tucker")][0]
        assert row.rstrip().endswith("5.2x")
        computed = float(row.split()[5].rstrip("x"))
        assert abs(computed - 5.2) <= 0.15

    def test_mps_chain(self):
        code, text = invoke("analyze", "--mps-ranks", "1,4,4,12,24,110,9,3,1")
        assert code == 0
        row = [line for line in text.splitlines() if line.startswith("mps")][0]
        assert "465530" in row

    def test_overhead_flag(self):
        _, text = invoke("analyze", "--overhead", "0", "--tucker-ranks", "4,4,3,2,96,96,3,3")
        row = [line for line in text.splitlines() if line.startswith("tucker")][0]
        assert float(row.split()[5].rstrip("x")) == pytest.approx(14_155_776 / 7_987_263, abs=0.005)

    def test_overhead_from_arch_file(self, tmp_path):
        path = tmp_path / "a.json"
        path.write_text(json.dumps(dict(REFERENCE_ARCH, overhead_params=5)))
        _, text = invoke("analyze", "--arch", str(path))
        assert text.splitlines()[1].split()[3] == "5"

    def test_csv(self, tmp_path):
        target = tmp_path / "out.csv"
        assert invoke("analyze", "--tucker-ranks", "full", "--csv", str(target))[0] == 0
        raw = target.read_bytes()
        assert b"\r" not in raw
        rows = list(csv.reader(io.StringIO(raw.decode())))
        assert rows[0] == ["method", "ranks", "tensorized", "overhead", "total", "ratio"]
        assert float(rows[2][5]) < 1.0
        assert int(rows[1][3]) == DEFAULT_OVERHEAD

    def test_malformed_ranks(self):
        assert invoke("analyze", "--tucker-ranks", "2,x")[0] == 1

    def test_rank_out_of_range(self):
        assert invoke("analyze", "--tucker-ranks", "9,4,3,2,128,128,3,3")[0] == 1

    def test_missing_arch(self, tmp_path):
        assert invoke("analyze", "--arch", str(tmp_path / "none.json"))[0] == 1

    def test_unknown_flag(self):
        assert invoke("analyze", "--bogus")[0] == 1


class TestTables:
    @pytest.mark.parametrize("name,rows", [("table2", 14), ("table3", 8)])
    def test_tables(self, name, rows):
        code, text = invoke(name)
        assert code == 0
        assert len(text.splitlines()) == rows + 1
        assert "reported" in text.splitlines()[0]


class TestDecompose:
    def test_full_tucker_round_trip(self, tmp_path, weights):
        before = digest(weights)
        out = tmp_path / "d"
        code, text = invoke("decompose", "--input", str(weights), "--method", "tucker",
                            "--ranks", "full", "--out", str(out))
        assert code == 0 and "method tucker" in text
        code, text = invoke("reconstruct-error", "--bundle", str(out), "--against", str(weights))
        assert code == 0
        assert float(text) <= 1e-10
        assert digest(weights) == before
        meta = json.loads((out / "meta.json").read_text())
        assert meta["method"] == "tucker" and meta["ranks"] == [3, 4, 5]

    def test_mps(self, tmp_path, weights):
        out = tmp_path / "m"
        code, _ = invoke("decompose", "--input", str(weights), "--method", "mps",
                         "--mps-ranks", "1,3,5,1", "--out", str(out))
        assert code == 0
        _, text = invoke("reconstruct-error", "--bundle", str(out), "--against", str(weights))
        assert float(text) <= 1e-10

    def test_truncated_error_matches_meta(self, tmp_path, weights):
        out = tmp_path / "t"
        invoke("decompose", "--input", str(weights), "--ranks", "2,2,2", "--out", str(out))
        _, text = invoke("reconstruct-error", "--bundle", str(out), "--against", str(weights))
        meta = json.loads((out / "meta.json").read_text())
        assert float(text) == pytest.approx(meta["relative_error"], rel=1e-12)
        assert 0 < float(text) < 1

    def test_missing_input(self, tmp_path):
        assert invoke("decompose", "--input", str(tmp_path / "no.tnt"), "--ranks", "1",
                      "--out", str(tmp_path / "x"))[0] == 1

    def test_missing_ranks(self, tmp_path, weights):
        assert invoke("decompose", "--input", str(weights), "--out", str(tmp_path / "x"))[0] == 1

    def test_rank_too_large(self, tmp_path, weights):
        assert invoke("decompose", "--input", str(weights), "--ranks", "4,4,4",
                      "--out", str(tmp_path / "x"))[0] == 1

    def test_missing_bundle(self, tmp_path, weights):
        assert invoke("reconstruct-error", "--bundle", str(tmp_path / "none"),
                      "--against", str(weights))[0] == 1


class TestTrainToy:
    def test_seed_required(self):
        assert invoke("train-toy", "--steps", "1")[0] == 1

    def test_byte_identical_logs(self, tmp_path):
        arch = tmp_path / "toy.json"
        arch.write_text(json.dumps(TOY_ARCH))
        logs = []
        for k in range(2):
            target = tmp_path / f"log{k}.csv"
            code, _ = invoke("train-toy", "--seed", "42", "--steps", "3", "--arch", str(arch),
                             "--ranks", "full", "--csv", str(target))
            assert code == 0
            logs.append(target.read_bytes())
        assert logs[0] == logs[1]
        lines = logs[0].decode().split("\n")
        assert lines[0] == "step,loss"
        assert len(lines) == 3 + 2 + 1 and lines[-1] == ""
        assert float(lines[1].split(",")[1]) == pytest.approx(0.0276, abs=1e-3)

    def test_stdout_and_bundle(self, tmp_path):
        code, text = invoke("train-toy", "--seed", "1", "--steps", "1", "--ranks", "1,1,1,1,2,2,1,1",
                            "--out", str(tmp_path / "b"))
        assert code == 0 and text.startswith("step,loss\n")
        assert json.loads((tmp_path / "b" / "meta.json").read_text())["ranks"] == [1, 1, 1, 1, 2, 2, 1, 1]
        assert (tmp_path / "b" / "arch.json").exists()

    def test_divergence_exit_code(self):
        code, _ = invoke("train-toy", "--seed", "1", "--steps", "3", "--lr", "1e300")
        assert code == 2


class TestBench:
    def test_seed_required(self):
        assert invoke("bench", "--runs", "1")[0] == 1

    def test_small_run(self, tmp_path):
        target = tmp_path / "b.csv"
        code, text = invoke("bench", "--seed", "0", "--ranks", "128,64,1", "--runs", "1", "--warmup", "0",
                            "--csv", str(target))
        assert code == 0
        assert "hardware" in text
        rows = list(csv.DictReader(io.StringIO(target.read_text())))
        ratios = {int(r["rank"]): float(r["mac_ratio"]) for r in rows}
        assert ratios[128] < 1 < ratios[64] < ratios[1]

    def test_rank_above_channels(self):
        assert invoke("bench", "--seed", "0", "--ranks", "129", "--runs", "1")[0] == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tnet", "table2"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "6.25x" in proc.stdout


def test_entry_point_usage_error():
    proc = subprocess.run([sys.executable, "-m", "tnet"], capture_output=True, text=True)
    assert proc.returncode == 1
