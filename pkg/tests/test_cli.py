import json

import pytest
from hypothesis import given, strategies as st

from feddhad import cli
from feddhad.config import ExperimentConfig, loads, parse_config
from feddhad.errors import ConfigError

FAST = ["N=4", "C=0.5", "T=2", "per_class_count=30", "dim=4", "class_count=3", "hidden=[6]", "balanced_per_class=3"]


def ov(items):
    return [x for item in items for x in ("--override", item)]


def test_defaults_match_protocol_settings():
    c = parse_config(None, [])
    assert (c.federation.device_count, c.federation.selection_fraction, c.experiment.rounds) == (100, 0.1, 500)
    assert (c.federation.local_epochs, c.federation.batch_size, c.federation.lr, c.federation.lr_decay) == (5, 10, 0.1, 0.99)


def test_empty_file_is_defaults(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("")
    assert parse_config(p, []) == ExperimentConfig()


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[federation]\nbogus = 3\n")
    with pytest.raises(ConfigError, match="bogus"):
        parse_config(p, [])
    with pytest.raises(ConfigError):
        parse_config(None, ["nope=1"])


def test_parse_error_has_line_info(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[experiment]\nseed = = 3\n")
    with pytest.raises(ConfigError, match="line 2"):
        parse_config(p, [])


def test_validation_names_field():
    with pytest.raises(ConfigError, match="selection fraction"):
        parse_config(None, ["C=0"])
    with pytest.raises(ConfigError, match="method"):
        parse_config(None, ["method=fedprox"])


def test_aliases_and_dotted_keys():
    c = parse_config(None, ["N=20", "tau=2", "T=7", "federation.batch_size=4", "lr=0.05"])
    assert (c.federation.device_count, c.federation.local_epochs, c.experiment.rounds) == (20, 2, 7)
    assert c.federation.batch_size == 4 and c.federation.lr == 0.05


@given(
    st.sampled_from(["fedavg", "feddh", "fedad", "feddhad", "feddhe"]),
    st.integers(0, 2**31),
    st.floats(0.01, 1.0),
    st.lists(st.integers(1, 64), min_size=0, max_size=3),
    st.one_of(st.none(), st.floats(0.0, 1.0)),
)
def test_config_round_trip(method, seed, frac, hidden, target):
    c = parse_config(None, [f"method={method}", f"seed={seed}"])
    c.federation.selection_fraction = frac
    c.federation.device_count = 100
    c.model.hidden = hidden
    c.experiment.target_accuracy = target
    assert loads(c.to_toml()) == c


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "r"
    code = cli.main(["run", "--seed", "1", "--method", "feddhad", "--out", str(out), *ov(FAST)])
    assert code == 0
    assert (out / "metrics.csv").exists() and (out / "summary.json").exists()
    s = json.loads((out / "summary.json").read_text())
    assert s["method"] == "feddhad" and s["seed"] == 1


def test_run_with_config_file(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[experiment]\nmethod = "feddh"\n')
    out = tmp_path / "r"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out), *ov(FAST)]) == 0
    assert json.loads((out / "summary.json").read_text())["method"] == "feddh"


def test_sweep_writes_one_summary_per_pair(tmp_path):
    out = tmp_path / "s"
    code = cli.main(["sweep", "--methods", "fedavg,feddhad", "--seeds", "1..5", "--out", str(out), *ov(FAST)])
    assert code == 0
    assert len(list(out.rglob("summary.json"))) == 10


def test_seed_parsing():
    assert cli.parse_seeds("1..5") == [1, 2, 3, 4, 5]
    assert cli.parse_seeds("3,1") == [3, 1]
    with pytest.raises(ConfigError):
        cli.parse_seeds("a..b")


def test_verify_passes(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "inequality gap <= 1e-12" in out and "FAIL" not in out


def test_oracle_reports_correlation(tmp_path, capsys):
    code = cli.main(["oracle", "--devices", "12", "--per-class", "40", "--budget", "100", "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "oracle.json").read_text())
    assert len(report["gamma"]) == 12


def test_config_error_exit_code(capsys):
    assert cli.main(["run", "--override", "C=1.5"]) == cli.EXIT_CODES["config"]
    assert "selection fraction must be in (0,1]" in capsys.readouterr().err


def test_missing_config_file_is_config_error(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "missing.toml")]) == cli.EXIT_CODES["config"]


def test_usage_error_prints_synopsis(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = cli.main(["run", "--out", str(blocker / "sub"), *ov(FAST)])
    assert code == cli.EXIT_CODES["io"]
