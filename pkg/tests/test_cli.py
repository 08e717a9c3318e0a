"""End-to-end command line behaviour: exit codes, output root, parallel runs."""

import json
import math

import pytest

from equation_cases import _TINY, _copy_root, _tiny_cfg
from vidtta import cli


def _sets(*extra):
    out = []
    for s in list(_TINY) + list(extra):
        out += ["--set", s]
    return out


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert cli.main(["run", "--out", str(tmp_path), "--set", "nonsense"]) == cli.EXIT_USAGE
    assert cli.main(["run", "--out", str(tmp_path), "--set", "adapt.tau=3"]) == cli.EXIT_USAGE
    assert cli.main(["run", "--out", str(tmp_path), "--jobs", "0"]) == cli.EXIT_USAGE


def test_missing_checkpoint_exits_2(tmp_path, capsys):
    assert cli.main(["generate", "--out", str(tmp_path)] + _sets()) == cli.EXIT_OK
    assert cli.main(["run", "--out", str(tmp_path)] + _sets()) == cli.EXIT_DATA
    assert "missing checkpoint" in capsys.readouterr().err
    assert cli.main(["inspect", str(tmp_path / "nowhere")]) == cli.EXIT_DATA


def test_env_output_root_and_full_pipeline(tmp_path, monkeypatch, capsys):
    root = tmp_path / "env_root"
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(root))
    assert cli.main(["generate"] + _sets()) == 0
    assert cli.main(["train"] + _sets()) == 0
    assert cli.main(["run", "--methods", "iss,ditta"] + _sets()) == 0
    table = capsys.readouterr().out
    assert "ditta" in table and "config_digest" in table
    for name in ("results.csv", "timings.csv", "table.txt", "experiment.json", "segmenter.npz"):
        assert (root / name).is_file()
    digest = json.loads((root / "experiment.json").read_text())["digest"]
    for row in cli.read_csv(root / "results.csv"):
        assert row["config_digest"] == digest
    result = json.loads(next((root / "runs").rglob("result.json")).read_text())
    assert result["experiment_digest"] == digest
    assert cli.main(["inspect", str(root / "runs" / "ditta_r0.3"), "--images", str(tmp_path / "png")]) == 0
    assert list((tmp_path / "png").rglob("*.png"))


def test_parallel_run_matches_serial(tmp_path):
    a, b = _copy_root(tmp_path / "a"), _copy_root(tmp_path / "b")
    cfg = _tiny_cfg("methods=[iss,zero_shot,ditta]")
    cli.cmd_run(cfg, a, jobs=1)
    cli.cmd_run(cfg, b, jobs=2)
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_mixed_digests_refused(tmp_path):
    out = _copy_root(tmp_path / "x")
    cli.cmd_run(_tiny_cfg("methods=[iss]"), out)
    rows = cli.read_csv(out / "results.csv")
    rows[0] = {**rows[0], "config_digest": "0" * 16}
    with pytest.raises(cli.DataError, match="different configs"):
        cli.aggregate_rows(rows)


def test_table_recomputable_from_csv(tmp_path):
    out = _copy_root(tmp_path / "x")
    cli.cmd_run(_tiny_cfg("methods=[iss,ditta]"), out)
    digest = cli.read_csv(out / "results.csv")[0]["config_digest"]
    summary = cli.aggregate_rows(cli.read_csv(out / "results.csv"), cli.read_csv(out / "timings.csv"))
    assert cli.format_table(summary, digest) == (out / "table.txt").read_text()
    assert not any(math.isnan(s["miou"]) for s in summary)
