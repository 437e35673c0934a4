from __future__ import annotations

import json
import time

import numpy as np
import pytest

from core.errors import InvalidArgumentError
from core.schemas.report import RunManifest
from core.services import export_service as export


def test_csv_cells():
    text = export.csv_text(("a", "b", "c", "d"), [(1, 0.1, None, True)])
    assert text == "a,b,c,d\n1,0.10000000000000001,,1\n"


def test_csv_round_trips_floats():
    value = 1.0 / 3.0
    line = export.csv_text(("x",), [(np.float64(value),)]).splitlines()[1]
    assert float(line) == value


def test_parallel_map_keeps_order():
    def slow_square(n: int) -> int:
        time.sleep(0.001 * (5 - n))
        return n * n

    assert export.parallel_map(slow_square, range(5), threads=3) == [0, 1, 4, 9, 16]
    with pytest.raises(InvalidArgumentError):
        export.parallel_map(slow_square, [1], threads=0)


def test_map_columns_is_independent_of_threads():
    X = np.arange(30.0).reshape(3, 10)
    single = export.map_columns(lambda block: block * 2.0, X, threads=1, size=4)
    several = export.map_columns(lambda block: block * 2.0, X, threads=3, size=4)
    assert np.array_equal(single, several)
    assert np.array_equal(single, 2.0 * X)
    assert export.chunk_ranges(10, 4) == [(0, 4), (4, 8), (8, 10)]


def test_svg_rendering():
    figure = export.Figure("a < b", "t", "y").line("p", [0, 1], [0.5, 0.5]).scatter("q", [0.2], [np.nan])
    svg = export.render_svg(figure)
    assert svg.startswith("<svg")
    assert "a &lt; b" in svg
    assert "polyline" in svg
    assert "<circle" not in svg


def test_output_directory_tracks_files(tmp_path):
    out = export.OutputDirectory(tmp_path / "run")
    out.csv("tables/t.csv", ("x",), [(1,)])
    out.json("summary.json", {"b": 1, "a": 2})
    out.text("notes.txt", "hello\n")
    out.json("summary.json", {"a": 3})
    assert out.outputs == ["tables/t.csv", "summary.json", "notes.txt"]
    assert (tmp_path / "run" / "tables" / "t.csv").read_text() == "x\n1\n"

    manifest = RunManifest(command="verify", config_digest="abc", seed=7, code_version="0.1.0")
    path = export.write_manifest(out, manifest)
    written = json.loads(path.read_text())
    assert written["outputs"][-1] == "manifest.json"
    assert written["configDigest"] == "abc"
    assert written["seed"] == 7
