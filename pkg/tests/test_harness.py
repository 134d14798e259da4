import pytest

from toksoft.harness import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, SUMMARY_FILE, load_config_file, main
from toksoft.metrics import read_metrics
from toksoft.tools.tools import OUT_DIR_ENV


def test_train_writes_one_row_per_env_step(tmp_path):
    out = tmp_path / "run.csv"
    code = main(["--quiet", "train", "--env", "expr", "--algo", "etpo", "--seed", "0",
                 "--steps", "500", "--out", str(out)])
    assert code == EXIT_OK
    log = read_metrics(out)
    assert len(log) == 500
    assert log.column("env_step") == list(range(1, 501))


def test_verify_passes(tmp_path, capsys):
    code = main(["verify", "--instances", "10", "--seed", "7", "--fixed-point", "1", "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    assert "PASS max_residual=" in capsys.readouterr().out


def test_verify_failure_exits_2(tmp_path, capsys):
    code = main(["verify", "--instances", "2", "--seed", "1", "--fixed-point", "1",
                 "--fixed-point-tol", "0", "--out-dir", str(tmp_path)])
    assert code == EXIT_VERIFY
    assert capsys.readouterr().out.startswith("FAIL")


def test_bad_beta_is_a_config_error(tmp_path, capsys):
    code = main(["train", "--beta", "-1", "--out", str(tmp_path / "x.csv")])
    assert code == EXIT_CONFIG
    assert "beta" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("env=tabular\ntemperature=3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG


def test_cli_flags_override_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small tabular run\nenv=tabular\nalgo=etpo\nsteps=50\nbatch_size=4\n")
    out = tmp_path / "run.csv"
    assert main(["--quiet", "train", "--config", str(cfg), "--steps", "30", "--out", str(out)]) == EXIT_OK
    assert len(read_metrics(out)) == 30


def test_train_uses_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path))
    code = main(["--quiet", "train", "--env", "tabular", "--algo", "ppo_kl", "--steps", "20", "--seed", "3"])
    assert code == EXIT_OK
    assert (tmp_path / "ppo_kl_beta1_seed3.csv").is_file()


@pytest.mark.slow
def test_sweep_then_report(tmp_path, capsys):
    code = main(["--quiet", "sweep", "--seeds", "2", "--algos", "etpo,ppo_kl", "--env", "tabular",
                 "--steps", "20", "--batch", "4", "--workers", "1", "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    assert len(list(tmp_path.glob("*.csv"))) == 4
    summary = (tmp_path / SUMMARY_FILE).read_text()
    assert "etpo_beta1" in summary and "ppo_kl_beta1" in summary
    assert "±" in summary

    (tmp_path / SUMMARY_FILE).unlink()
    capsys.readouterr()
    assert main(["report", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / SUMMARY_FILE).read_text() == summary
    assert "etpo_beta1" in capsys.readouterr().out


def test_report_on_empty_dir(tmp_path):
    assert main(["report", "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_config_file_values_are_literal(tmp_path, monkeypatch):
    monkeypatch.setenv("TOKSOFT_STEPS", "999")
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps=${TOKSOFT_STEPS}\nenv=tabular\n")
    assert load_config_file(str(cfg)) == {"steps": "${TOKSOFT_STEPS}", "env": "tabular"}
