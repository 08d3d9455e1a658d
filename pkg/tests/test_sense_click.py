from pathlib import Path

from click.testing import CliRunner

from peerscore.scripts.peerscore import cli


def test_sense_requires_peer(tmp_path: Path) -> None:
    runner = CliRunner()
    result = runner.invoke(cli, ["--out", str(tmp_path / "trace.tsv"), "sense"])
    assert result.exit_code == 1


def test_sense_outbound_limit(tmp_path: Path) -> None:
    runner = CliRunner()
    result = runner.invoke(
        cli,
        ["--out", str(tmp_path / "trace.tsv"), "sense", "--peer", "127.0.0.1", "--max-outbound", "11"],
    )
    assert result.exit_code == 1


def test_sense_bad_peer(tmp_path: Path) -> None:
    runner = CliRunner()
    result = runner.invoke(
        cli, ["--out", str(tmp_path / "trace.tsv"), "sense", "--peer", "127.0.0.1:notaport"]
    )
    assert result.exit_code == 2
    assert "Error:" in result.output


def test_sense_unreachable_peer(tmp_path: Path) -> None:
    out = tmp_path / "trace.tsv"
    runner = CliRunner()
    result = runner.invoke(
        cli,
        [
            "--out",
            str(out),
            "sense",
            "--peer",
            "127.0.0.1:1",
            "--handshake-timeout",
            "0.5",
            "--run-seconds",
            "1",
        ],
    )
    assert result.exit_code == 0, result.output
    assert f"Wrote 0 events from 0 session(s) to {out}" in result.output
