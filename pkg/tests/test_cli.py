import json
import subprocess
import sys

import pytest

from msmlp.bench import records_from_csv
from msmlp.cli import main
from msmlp.flops import FlopsReport


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_presets_lists_everything(capsys):
    code, out, _ = run(capsys, "presets")
    assert code == 0
    names = out.split()
    assert "ms-mlp-t" in names and "tiny-desk" in names and "ablation-isolated" in names


def test_flops_tiny(capsys):
    code, out, _ = run(capsys, "flops", "--preset", "ms-mlp-t")
    assert code == 0
    assert "28.66M" in out and "4.44G" in out


def test_flops_json_and_csv(capsys, tmp_path):
    path = tmp_path / "f.csv"
    code, out, _ = run(capsys, "flops", "--preset", "ms-mlp-s", "--csv", str(path), "--json")
    assert code == 0
    summary = json.loads(out)
    rep = FlopsReport.from_csv(path.read_text())
    assert rep.total_macs == summary["total_macs"]
    assert rep.total_params == summary["total_params"]
    assert (tmp_path / "f_flops.png").stat().st_size > 0


def test_flops_bad_image_size(capsys):
    code, _, err = run(capsys, "flops", "--preset", "ms-mlp-t", "--image-size", "100")
    assert code == 2 and "divisible" in err


def test_params(capsys):
    code, out, _ = run(capsys, "params", "--preset", "tiny-desk")
    assert code == 0 and "14,376" in out


def test_unknown_preset_is_usage_error(capsys):
    code, _, err = run(capsys, "params", "--preset", "nope")
    assert code == 2 and "unknown preset" in err


def test_unknown_subcommand_and_flag(capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "presets", "--bogus")[0] == 2
    assert run(capsys)[0] == 2


def test_gradcheck_primitives(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "7", "--skip-model", "--json")
    assert code == 0
    assert json.loads(out)["failed"] == []


def test_gradcheck_full(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "7")
    assert code == 0 and "passed" in out


def test_gradcheck_impossible_tolerance_fails(capsys):
    code, out, _ = run(capsys, "gradcheck", "--skip-model", "--primitive-tol", "0")
    assert code == 1 and "FAIL" in out


def test_oracle(capsys):
    code, out, _ = run(capsys, "oracle", "--cases", "12", "--json")
    assert code == 0
    d = json.loads(out)
    assert d["cases"] == 12 and d["max_abs_dev"] <= 1e-10


def test_oracle_is_deterministic(capsys):
    a = run(capsys, "oracle", "--cases", "5", "--seed", "3", "--json")[1]
    b = run(capsys, "oracle", "--cases", "5", "--seed", "3", "--json")[1]
    assert a == b


def test_oracle_fails_on_negative_tolerance(capsys):
    assert run(capsys, "oracle", "--cases", "3", "--tol", "-1")[0] == 1


def test_bench_writes_two_rows(capsys, tmp_path):
    path = tmp_path / "out.csv"
    code, _, _ = run(capsys, "bench", "--op", "mix-shift", "--sizes", "28x28,56x56", "--channels", "96",
                     "--reps", "5", "--csv", str(path))
    assert code == 0
    recs = records_from_csv(path.read_text())
    assert [(r.h, r.w) for r in recs] == [(28, 28), (56, 56)]
    assert (tmp_path / "out_scaling.png").exists()


def test_bench_four_sizes_reports_slope(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--op", "mix-shift", "--sizes", "8x8,16x16,24x24,32x32",
                       "--channels", "10", "--reps", "3", "--json")
    assert code == 0
    assert json.loads(out)["slope"] is not None


@pytest.mark.parametrize("argv", [
    ["bench", "--op", "attention", "--sizes", "8x8"],
    ["bench", "--op", "mix-shift", "--sizes", "8by8"],
    ["bench", "--op", "mix-shift", "--sizes", "8x8", "--reps", "2"],
])
def test_bench_usage_errors(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_train_short(capsys, tmp_path):
    path = tmp_path / "hist.csv"
    code, out, _ = run(capsys, "train", "--preset", "tiny-desk", "--steps", "4", "--seed", "0", "--lr", "1e-3",
                       "--csv", str(path))
    assert code == 0
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss,acc" and len(lines) == 5
    assert (tmp_path / "hist_training.png").exists()


def test_train_min_acc_failure(capsys):
    assert run(capsys, "train", "--steps", "1", "--min-acc", "1.01", "--no-plot")[0] == 1


def test_train_rejects_wrong_task_shape(capsys):
    assert run(capsys, "train", "--preset", "ms-mlp-t", "--steps", "1")[0] == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "msmlp", "params", "--preset", "tiny-desk"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "14,376" in res.stdout
