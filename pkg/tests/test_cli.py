import json
import subprocess
import sys

import pytest

from dpo3d import cli
from dpo3d import experiments as ex


def run(*args) -> int:
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert run("gen", "--preset", "smoke", "--out", out) == 0
    assert run("pretrain", "--preset", "smoke", "--out", out) == 0
    return out


def test_gen_and_pretrain_outputs(workdir, capsys):
    for name in ("source.dpo1", "source.dpo1.json", "stream.dpo1", "stream.dpo1.json",
                 "theta_s.dpow"):
        assert (workdir / name).exists()
    side = json.loads((workdir / "stream.dpo1.json").read_text())
    assert side["role"] == "stream" and side["batch_size"] == 4


def test_adapt_writes_log_report_and_metrics(workdir, capsys):
    assert run("adapt", "--preset", "smoke", "--out", workdir) == 0
    lines = (workdir / "log.jsonl").read_text().splitlines()
    assert len(lines) == 4
    assert {"t", "mode", "c_ema", "n_high"} <= set(json.loads(lines[0]))
    report = json.loads((workdir / "report.json").read_text())
    assert report["n_batches"] == 4
    csv = (workdir / "metrics.csv").read_text().splitlines()
    assert csv[0].startswith("method,ap_3d,ap_bev") and csv[1].startswith("dpo,")
    assert capsys.readouterr().out.startswith("method,")


def test_adapt_flags(workdir, capsys):
    assert run("adapt", "--preset", "smoke", "--out", workdir, "--no-adapt", "--pretty") == 0
    out = capsys.readouterr().out
    assert "no-adapt" in out and "," not in out.splitlines()[0]
    assert run("adapt", "--preset", "smoke", "--out", workdir, "--c-stop", "1e12") == 0
    modes = [json.loads(x)["mode"] for x in (workdir / "log.jsonl").read_text().splitlines()]
    assert modes[-1] == "inference"


def test_eval(workdir, capsys):
    assert run("eval", "--preset", "smoke", "--out", workdir) == 0
    assert (workdir / "eval.csv").read_text().startswith("method,ap_3d,ap_bev,tp,fp,fn")


def test_ablate_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("ablate", "--preset", "smoke", "--seeds", "0", "--out", a) == 0
    assert run("ablate", "--preset", "smoke", "--seeds", "0", "--out", b) == 0
    text = (a / "ablation.csv").read_text()
    assert text == (b / "ablation.csv").read_text()
    rows = text.splitlines()
    assert rows[0] == ",".join(ex.CSV_COLUMNS)
    assert [r.split(",")[0] for r in rows[1:]] == ["oracle"] + [n for n, _ in ex.VARIANTS]


def test_sweep(tmp_path, capsys):
    assert run("sweep", "--preset", "smoke", "--out", tmp_path,
               "--param", "rho", "--values", "1e-4,1e-2") == 0
    rows = (tmp_path / "sweep_rho.csv").read_text().splitlines()
    assert rows[0] == "param,value,ap_3d,ap_bev,stop_batch" and len(rows) == 3


def test_config_file(tmp_path, capsys):
    ini = tmp_path / "r.ini"
    ini.write_text("[run]\nname = x\nseed = 1\n[grid]\nheight = 20\nwidth = 20\n"
                   "[pretrain]\nn_scenes = 4\nepochs = 1\n[stream]\nn_batches = 1\nbatch_size = 2\n")
    assert run("gen", "--config", ini, "--out", tmp_path) == 0


@pytest.mark.parametrize("args", [
    ("bogus",),
    ("adapt", "--preset", "nope"),
    ("sweep", "--param", "rho", "--values", "a,b", "--preset", "smoke"),
    ("sweep", "--param", "zeta", "--values", "1"),
    ("gen", "--preset", "smoke", "--config", "x.ini"),
])
def test_usage_errors_exit_1(args, tmp_path, capsys):
    with_out = list(args) + ["--out", str(tmp_path)] if args[0] != "bogus" else list(args)
    try:
        code = cli.main(with_out)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


def test_missing_files_exit_2(tmp_path, capsys):
    assert run("adapt", "--preset", "smoke", "--out", tmp_path) == 2
    assert run("gen", "--config", tmp_path / "absent.ini", "--out", tmp_path) == 2
    (tmp_path / "theta_s.dpow").write_bytes(b"junk")
    assert run("eval", "--preset", "smoke", "--out", tmp_path) == 2


def test_numerical_failure_exit_3(workdir, monkeypatch, capsys):
    def boom(*a, **k):
        raise FloatingPointError("diverged")
    monkeypatch.setattr(ex, "run_variant", boom)
    assert run("adapt", "--preset", "smoke", "--out", workdir) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "dpo3d.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "ablate" in res.stdout
