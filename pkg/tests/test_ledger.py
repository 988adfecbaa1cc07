from datetime import datetime

import pytest

from cicreg.ledger import LEDGER_FILENAME, RunCommand, RunManifest, list_runs, open_ledger, record_run
from cicreg.records import format_record, parse_record
from cicreg.timestamps import utc_now


@pytest.fixture
def ledger(tmp_path):
    yield open_ledger(tmp_path / "ledger")


def make_manifest(command=RunCommand.REGISTER, method="cicreg", elapsed=1.5):
    return RunManifest(
        command=command,
        method=method,
        inputs="m.mvol,f.mvol",
        output="run/",
        tool_version="0.1.0",
        seed=42,
        timestamp=datetime(2024, 5, 1, 12, 30, 15, 123456),
        elapsed_seconds=elapsed,
    )


def test_open_creates_the_database(tmp_path):
    open_ledger(tmp_path / "new" / "dir")
    # Should create the directory and the SQLite file
    assert (tmp_path / "new" / "dir" / LEDGER_FILENAME).is_file()


def test_open_rejects_a_file(tmp_path):
    path = tmp_path / "not_a_dir"
    path.write_text("x")
    with pytest.raises(NotADirectoryError):
        open_ledger(path)


def test_record_assigns_increasing_ids(ledger):
    first = record_run(ledger, make_manifest())
    second = record_run(ledger, make_manifest(RunCommand.EVALUATE))
    assert first.id is not None
    assert second.id > first.id


def test_list_runs_filters_by_command(ledger):
    record_run(ledger, make_manifest(elapsed=1.0))
    record_run(ledger, make_manifest(RunCommand.WARP))
    record_run(ledger, make_manifest(elapsed=2.0, method="baseline"))

    everything = list_runs(ledger)
    assert [run.command for run in everything] == [RunCommand.REGISTER, RunCommand.WARP, RunCommand.REGISTER]

    registrations = list_runs(ledger, "register")
    assert [(run.method, run.elapsed_seconds) for run in registrations] == [("cicreg", 1.0), ("baseline", 2.0)]


def test_list_runs_rejects_unknown_command(ledger):
    with pytest.raises(ValueError):
        list_runs(ledger, "train")


def test_runs_survive_reopening(tmp_path):
    record_run(open_ledger(tmp_path), make_manifest())
    runs = list_runs(open_ledger(tmp_path))
    assert len(runs) == 1
    assert runs[0].timestamp == datetime(2024, 5, 1, 12, 30, 15, 123456)


def test_manifest_record_form():
    record = make_manifest().as_record()
    assert "id" not in record
    assert record["command"] == "register"
    assert record["timestamp"] == "2024-05-01T12:30:15"
    assert parse_record(format_record(record))["seed"] == 42


def test_default_timestamp_is_naive_utc():
    before = utc_now().replace(microsecond=0)
    manifest = RunManifest(command=RunCommand.JACOBIAN)
    assert manifest.timestamp.tzinfo is None
    assert manifest.timestamp >= before


def test_default_timestamp_round_trips_through_the_ledger(ledger):
    manifest = RunManifest(command=RunCommand.REGISTER, elapsed_seconds=0.5)
    stamp = manifest.timestamp
    record_run(ledger, manifest)
    stored = list_runs(ledger)[0]
    assert stored.timestamp == stamp
    assert stored.timestamp.tzinfo is None
