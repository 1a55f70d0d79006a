from __future__ import annotations

import json

import pytest

from triad.cli import main


def write_spec(tmp_path, body: str):
    path = tmp_path / "exp.toml"
    path.write_text(body)
    return path


def test_sim_and_export(tmp_path, capsys):
    spec = write_spec(tmp_path, 'scenario = "simultaneous-exit"\nseed = 2\nduration_s = 18\n'
                                'output_dir = "out"\n')
    assert main(["sim", "--spec", str(spec)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["scenario"] == "simultaneous-exit" and summary["seed"] == 2
    trace = tmp_path / "out" / "trace.csv"
    assert trace.is_file()

    assert main(["export", "--trace", str(trace), "--kind", "access"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "node,local_reads,peer_reads,external_reads,bootstrap_seeds"
    assert len(out.splitlines()) == 4

    dest = tmp_path / "err.csv"
    assert main(["export", "--trace", str(trace), "--kind", "error", "--out", str(dest)]) == 0
    assert dest.read_text().startswith("event_nanos,node,phase,oracle_error_nanos,epsilon_nanos\n")


def test_sim_overrides(tmp_path, capsys):
    spec = write_spec(tmp_path, 'scenario = "no-attack"\nduration_s = 12\n')
    assert main(["sim", "--spec", str(spec), "--seed", "5", "--output-dir", str(tmp_path / "o")]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 5
    assert (tmp_path / "o" / "summary.json").is_file()


@pytest.mark.parametrize("body, message", [
    ('scenario = "nope"\n', "unknown scenario"),
    ('seed = 1\n', "scenario"),
    ('scenario = "x"\nschedule = "missing.sched"\n', "schedule file"),
])
def test_sim_errors(tmp_path, capsys, body, message):
    spec = write_spec(tmp_path, body)
    assert main(["sim", "--spec", str(spec)]) == 2
    assert message in capsys.readouterr().err


def test_sim_bad_schedule_reports_line(tmp_path, capsys):
    (tmp_path / "s.sched").write_text("0 FORCE_EXIT node=1\n5 BOGUS\n")
    spec = write_spec(tmp_path, 'scenario = "x"\nschedule = "s.sched"\n')
    assert main(["sim", "--spec", str(spec)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_export_errors(tmp_path, capsys):
    assert main(["export", "--trace", str(tmp_path / "none.csv"), "--kind", "rtt"]) == 2
    assert "not found" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["export", "--trace", "x", "--kind", "latency"])


def test_export_empty_trace(tmp_path, capsys):
    trace = tmp_path / "t.csv"
    trace.write_text("event_nanos,node,kind,value_nanos,epsilon_nanos,oracle_error_nanos\n")
    assert main(["export", "--trace", str(trace), "--kind", "epoch"]) == 0
    assert capsys.readouterr().out == "event_nanos,node,epoch_length_nanos\n"


def test_node_config_errors(tmp_path, capsys):
    assert main(["node", "--config", str(tmp_path / "missing.toml")]) == 2
    assert "not found" in capsys.readouterr().err


def test_query_without_client_key(tmp_path, capsys):
    (tmp_path / "k.toml").write_text('[keys]\n"1" = "' + "00" * 32 + '"\n')
    code = main(["query", "--node", "127.0.0.1:9", "--node-id", "1", "--client-id", "7",
                 "--key-file", str(tmp_path / "k.toml")])
    assert code == 2
    assert "client 7" in capsys.readouterr().err


def test_query_timeout(tmp_path, capsys):
    (tmp_path / "k.toml").write_text('[keys]\n"7" = "' + "00" * 32 + '"\n')
    code = main(["query", "--node", "127.0.0.1:9", "--node-id", "1", "--client-id", "7",
                 "--key-file", str(tmp_path / "k.toml"), "--timeout", "0.2"])
    assert code == 1
