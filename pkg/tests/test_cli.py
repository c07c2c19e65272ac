import subprocess
import sys

import pytest

from esmoe.cli import KEYS, UsageError, build_parser, load_config_file, main, resolve, run_dir
from esmoe.io import load_dataset, read_pgm

SMALL = ["--epochs", "1", "--n-train", "32", "--n-val", "16", "--image-size", "16", "--out-channels", "4"]


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_train_twice_identical_csv(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["train", *SMALL, "--out", str(a)], capsys)[0] == 0
    assert run(["train", *SMALL, "--out", str(b)], capsys)[0] == 0
    (da,), (db,) = list(a.iterdir()), list(b.iterdir())
    assert da.name == db.name and da.name.endswith("-seed1")
    assert (da / "report.csv").read_bytes() == (db / "report.csv").read_bytes()
    assert (da / "config.yaml").exists() and (da / "model.esmo").exists()


def test_seed_only_changes_suffix(tmp_path):
    s = resolve(build_parser().parse_args(["train"]))
    a = run_dir(s, tmp_path)
    b = run_dir({**s, "seed": 9}, tmp_path)
    c = run_dir({**s, "epochs": 3}, tmp_path)
    assert a.name.split("-")[0] == b.name.split("-")[0] != c.name.split("-")[0]
    assert b.name.endswith("-seed9")


def test_eval_counter_untrained(capsys):
    code, out, _ = run(["eval", "--samples", "50"], capsys)
    assert code == 0
    assert "expert_evaluations=100" in out


def test_eval_from_checkpoint(tmp_path, capsys):
    run(["train", *SMALL, "--out", str(tmp_path)], capsys)
    ckpt = next(tmp_path.glob("*/model.esmo"))
    code, out, _ = run(["eval", *SMALL, "--checkpoint", str(ckpt), "--samples", "10", "--k", "2"], capsys)
    assert code == 0 and "expert_evaluations=20" in out


def test_eval_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "x.esmo"
    bad.write_bytes(b"nope")
    code, _, err = run(["eval", "--checkpoint", str(bad)], capsys)
    assert code == 2 and "magic" in err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("epochs: 7\nseed: 4\nkernels: [3, 5, 7, 9]\n")
    s = resolve(build_parser().parse_args(["train", "--config", str(cfg), "--seed", "5"]))
    assert s["epochs"] == 7 and s["seed"] == 5 and s["kernels"] == [3, 5, 7, 9]
    assert s["lb_weight"] == KEYS["lb_weight"].default


def test_unknown_key_names_line(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("epochs: 2\nfoo: 1\n")
    code, _, err = run(["train", "--config", str(cfg)], capsys)
    assert code == 2 and "bad.yaml:2: unknown key 'foo'" in err


def test_wrong_type_in_file(tmp_path):
    cfg = tmp_path / "t.yaml"
    cfg.write_text("epochs: many\n")
    with pytest.raises(UsageError, match="t.yaml:1"):
        load_config_file(cfg)


def test_invalid_values_exit_2(capsys):
    assert run(["train", "--k", "9"], capsys)[0] == 2
    assert run(["eval", "--epochs", "abc"], capsys)[0] == 2
    assert run(["nonsense"], capsys)[0] == 2
    assert run([], capsys)[0] == 2


def test_help_exits_0(capsys):
    assert run(["train", "--help"], capsys)[0] == 0


def test_gradcheck_small(capsys):
    code, out, _ = run(["gradcheck", "--gradcheck-channels", "4", "--gradcheck-size", "6"], capsys)
    assert code == 0 and "worst relative error" in out and "FAIL" not in out


def test_bench_csv(tmp_path, capsys):
    csv_path = tmp_path / "b.csv"
    argv = ["bench", "--bench-channels", "4", "--bench-size", "16", "--repetitions", "30", "--csv", str(csv_path), "--out", str(tmp_path)]
    code, out, _ = run([*argv, "--all-k"], capsys)
    assert code == 0 and "K=4" in out
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "config_id,mode,K,E,median_us,p10,p90,counter" and len(lines) == 6
    assert run([*argv, "--max-ratio", "0.0"], capsys)[0] == 1


def test_route_viz_and_dataset_export(tmp_path, capsys):
    code, out, _ = run(["route-viz", "--samples", "3", "--out-dir", str(tmp_path / "maps")], capsys)
    assert code == 0
    maps = sorted((tmp_path / "maps").glob("*.pgm"))
    assert len(maps) == 4 and read_pgm(maps[0]).shape == (32, 3 * 32 + 2)
    path = tmp_path / "d.esmd"
    assert run(["dataset-export", "--samples", "8", "--output", str(path)], capsys)[0] == 0
    X, y, radii = load_dataset(path)
    assert X.shape == (8, 3, 32, 32) and radii == (1.0, 2.0, 3.0, 5.0)


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "esmoe.cli", "eval", "--samples", "4"], capture_output=True, text=True)
    assert res.returncode == 0 and "expert_evaluations=8" in res.stdout
