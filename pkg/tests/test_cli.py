import json
import subprocess
import sys

import pytest

from sgdlimit import __version__
from sgdlimit.cli import (
    EXIT_CHECK,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    SCHEMAS,
    ConfigError,
    config_hash,
    main,
    parse_pairs,
    resolve_config,
)

SMALL_OLM = ["--override", "n=6", "--override", "d=10", "--override", "kappa=2"]


def run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = main([args[0], "--out", str(out), *args[1:]])
    return code, out


def data_lines(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


def test_parse_pairs_comments_and_blanks():
    pairs = parse_pairs(["# comment", "", "a = 1", "b=x=y  # trailing"], "cfg")
    assert pairs == {"a": "1", "b": "x=y"}


@pytest.mark.parametrize("line", ["novalue", "=3"])
def test_parse_pairs_rejects_malformed(line):
    with pytest.raises(ConfigError):
        parse_pairs([line], "cfg")


def test_resolve_precedence():
    cfg = resolve_config("kernel-baseline", {"trials": "50", "d": "30"}, {"trials": "60"}, seed=7)
    assert cfg["trials"] == 60 and cfg["d"] == 30 and cfg["seed"] == 7 and cfg["n"] == 10


@pytest.mark.parametrize(
    "command, pairs",
    [
        ("kernel-baseline", {"bogus": "1"}),
        ("kernel-baseline", {"trials": "many"}),
        ("kernel-baseline", {"trials": "0"}),
        ("kernel-baseline", {"n": "50"}),
        ("sgd-vs-limit", {"etas": "0.01,0.02"}),
        ("olm-recover", {"dist": "cauchy"}),
        ("motor", {"dim": "4"}),
    ],
)
def test_resolve_rejects(command, pairs):
    with pytest.raises(ConfigError):
        resolve_config(command, pairs, {})


def test_every_schema_has_seed():
    assert all("seed" in s for s in SCHEMAS.values())


def test_config_hash_depends_on_values():
    a = resolve_config("kernel-baseline", {}, {})
    b = resolve_config("kernel-baseline", {}, {"trials": "10"})
    assert config_hash("kernel-baseline", a) == config_hash("kernel-baseline", dict(a))
    assert config_hash("kernel-baseline", a) != config_hash("kernel-baseline", b)


def test_unknown_key_is_usage_error(tmp_path, capsys):
    code, _ = run(tmp_path, "verify-derivatives", "--override", "colour=blue")
    assert code == EXIT_USAGE
    assert "colour" in capsys.readouterr().err


def test_bad_config_file_is_usage_error(tmp_path):
    code, _ = run(tmp_path, "kernel-baseline", "--config", str(tmp_path / "missing.cfg"))
    assert code == EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("trials 5\n")
    code, _ = run(tmp_path, "kernel-baseline", "--config", str(bad))
    assert code == EXIT_USAGE


def test_missing_subcommand_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_kernel_baseline_from_config_file(tmp_path, capsys):
    cfg = tmp_path / "kb.cfg"
    cfg.write_text("# kernel regime\nd = 40\nn = 10\ntrials = 200\n")
    code, out = run(tmp_path, "kernel-baseline", "--config", str(cfg))
    assert code == EXIT_OK
    report = json.loads((out / "kernel-baseline_report.json").read_text())
    assert 0.70 <= report["normalized_mean_loss"] <= 0.80
    assert report["expected"] == pytest.approx(0.75)
    assert json.loads(capsys.readouterr().out)["status"] == "ok"
    assert len(data_lines(out / "kernel_baseline.csv")) == 201


def test_kernel_baseline_range_failure(tmp_path):
    code, _ = run(tmp_path, "kernel-baseline", "--override", "lo=0.9", "--override", "hi=1.0")
    assert code == EXIT_CHECK


def test_headers_record_provenance(tmp_path):
    code, out = run(tmp_path, "kernel-baseline", "--seed", "3", "--override", "trials=20")
    assert code == EXIT_OK
    cfg = resolve_config("kernel-baseline", {}, {"trials": "20"}, seed=3)
    for name in ("kernel_baseline.csv", "kernel_baseline.gp"):
        head = (out / name).read_text().splitlines()[:4]
        assert head[0] == f"# sgdlimit {__version__} kernel-baseline"
        assert head[1] == f"# config_sha256={config_hash('kernel-baseline', cfg)}"
        assert head[2] == "# seeds=3"
        assert "trials=20" in head[3]
    report = json.loads((out / "kernel-baseline_report.json").read_text())
    assert report["_header"][2] == "seeds=3"


def test_plot_script_references_csv(tmp_path):
    _, out = run(tmp_path, "kernel-baseline", "--override", "trials=20")
    gp = (out / "kernel_baseline.gp").read_text()
    assert "'kernel_baseline.csv'" in gp and "set output 'kernel_baseline.png'" in gp


def test_olm_recover_undersampled_reports_failure(tmp_path):
    code, out = run(tmp_path, "olm-recover", "--override", "n=2", "--override", "seeds=1", "--override", "target=1e-3")
    assert code == EXIT_OK
    report = json.loads((out / "olm-recover_report.json").read_text())
    assert report["success_rate"] == {"2": 0.0}
    rows = data_lines(out / "olm_success.csv")
    assert rows[0] == "n,trials,successes,success_rate"
    assert rows[1].startswith("2,1,0,")
    assert (out / "olm_recover.gp").exists()


def test_olm_flow_slopes(tmp_path):
    code, out = run(tmp_path, "olm-flow", *SMALL_OLM)
    assert code == EXIT_OK
    report = json.loads((out / "olm-flow_report.json").read_text())
    assert report["worst_slope_rel_error"] <= 0.01
    assert report["R_final"] < report["R_initial"]


def test_olm_flow_divergence_is_numerical_failure(tmp_path, capsys):
    code, _ = run(tmp_path, "olm-flow", *SMALL_OLM, "--override", "T=200", "--override", "dt=50")
    assert code == EXIT_NUMERICAL
    err = json.loads(capsys.readouterr().err)
    assert err["status"] == "numerical_failure" and err["error"] == "DivergenceError"


def test_verify_derivatives_single_point(tmp_path):
    code, out = run(tmp_path, "verify-derivatives", "--override", "points=1")
    assert code == EXIT_OK
    rows = data_lines(out / "verify_derivatives.csv")
    assert rows[0] == "model,point,check,error,tol,passed"
    assert all(r.endswith(",1") for r in rows[1:])


def test_verify_derivatives_zero_tolerance_names_check(tmp_path):
    code, out = run(tmp_path, "verify-derivatives", "--override", "points=1", "--override", "tol_first=0")
    assert code == EXIT_CHECK
    report = json.loads((out / "verify-derivatives_report.json").read_text())
    assert "dphi" in report["first_failure"]


def test_motor_short_run(tmp_path):
    args = ["--override", "seeds=2", "--override", "T=0.05", "--override", "dt=0.005"]
    code, out = run(tmp_path, "motor", *args, "--override", "expected_speed=limit", name="limit")
    assert code == EXIT_OK
    report = json.loads((out / "motor_report.json").read_text())
    assert report["measured_speed"] == pytest.approx(0.375, rel=1e-3)
    for name in ("motor_ensemble.csv", "motor_path.csv", "motor.gp"):
        assert (out / name).exists()
    code, _ = run(tmp_path, "motor", *args, name="claimed")
    assert code == EXIT_CHECK


def test_sgd_vs_limit_is_byte_identical(tmp_path):
    args = ["--override", "seeds=4", "--override", "T=0.05", "--override", "etas=0.05,0.025", "--override", "sde_dt=0.01"]
    code_a, a = run(tmp_path, "sgd-vs-limit", *args, name="a")
    code_b, b = run(tmp_path, "sgd-vs-limit", *args, name="b")
    assert code_a == code_b and code_a in (EXIT_OK, EXIT_CHECK)
    for name in ("sgd_vs_limit.csv", "sgd_vs_limit.gp"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len(data_lines(a / "sgd_vs_limit.csv")) == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "sgdlimit", "kernel-baseline", "--out", str(tmp_path), "--override", "trials=5",
         "--override", "lo=0", "--override", "hi=1"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == EXIT_OK, proc.stderr
    assert json.loads(proc.stdout)["command"] == "kernel-baseline"
