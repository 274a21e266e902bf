import json

import pytest

from mlmi_cli.utils.reporter import publish_report

pytestmark = pytest.mark.unit

HEADERS = ["Pattern", "MA", "Count"]
ROWS = [[1, "o", 3], [2, "x", 1]]


def test_publish_text(capsys):
    publish_report(ROWS, HEADERS, "Missing data patterns")
    out = capsys.readouterr().out
    assert out.startswith("\nMissing data patterns\n")
    assert "Pattern" in out


def test_publish_json_has_no_title(capsys):
    publish_report(ROWS, HEADERS, "Missing data patterns", output_format="json")
    data = json.loads(capsys.readouterr().out)
    assert data["cli_output"][0] == {"Pattern": 1, "MA": "o", "Count": 3}


def test_publish_writes_delimited_file(tmp_path, capsys):
    target = tmp_path / "reports" / "patterns.tsv"
    publish_report(ROWS, HEADERS, "Missing data patterns", out_path=target, sep="\t")
    assert target.read_text().splitlines() == ["Pattern\tMA\tCount", "1\to\t3", "2\tx\t1"]
