import numpy as np
import pytest

from api.v1.pipeline.repository import SURVEY_COLUMNS, PipelineRepository
from core.exceptions import IngestError
from core.schema import SourceSet
from optimizer.schema import SourceGrid
from tests.conftest import straight_survey

HEADER = ",".join(SURVEY_COLUMNS)


@pytest.fixture
def repository():
    return PipelineRepository()


def _write(tmp_path, *rows, header=HEADER):
    path = tmp_path / "survey.csv"
    path.write_text("\n".join([header, *rows]) + "\n")
    return path


def test_survey_round_trip(tmp_path, repository, survey):
    path = repository.write_survey(survey, tmp_path / "survey.csv")
    loaded = repository.ingest_survey(path)
    np.testing.assert_array_equal(loaded.times, survey.times)
    np.testing.assert_array_equal(loaded.positions, survey.positions)
    np.testing.assert_array_equal(loaded.concentrations, survey.concentrations)
    np.testing.assert_allclose(loaded.wind, survey.wind, atol=1e-12)


def test_northerly_wind_blows_south(tmp_path, repository):
    path = _write(tmp_path, "0,0,0,100,1800,5,0", "1,0,50,100,1801,5,90")
    survey = repository.ingest_survey(path)
    np.testing.assert_allclose(survey.wind, [[0.0, -5.0], [-5.0, 0.0]], atol=1e-12)


def test_missing_file(tmp_path, repository):
    with pytest.raises(IngestError):
        repository.ingest_survey(tmp_path / "absent.csv")


def test_wrong_header(tmp_path, repository):
    path = _write(tmp_path, "0,0,0,100,1800,5,0", "1,0,50,100,1801,5,0", header="t,x,y,z,c,u,d")
    with pytest.raises(IngestError) as info:
        repository.ingest_survey(path)
    assert info.value.line == 1


@pytest.mark.parametrize(
    "rows, line",
    [
        (["0,0,0,100,1800,5,0", "1,0,50,100,abc,5,0"], 3),
        (["0,0,0,100,1800,5,0", "1,0,50,100,1801,5,0", "1,0,100,100,1802,5,0"], 4),
        (["0,0,0,100,1800,5,0", "1,0,50,-3,1801,5,0"], 3),
        (["0,0,0,100,1800,-5,0", "1,0,50,100,1801,5,0"], 2),
        (["0,0,0,100,1800,5,0"], 3),
    ],
)
def test_bad_rows_name_their_line(tmp_path, repository, rows, line):
    with pytest.raises(IngestError) as info:
        repository.ingest_survey(_write(tmp_path, *rows))
    assert info.value.line == line
    assert info.value.record()["line"] == line
    assert f"line {line}" in str(info.value)


def test_sources_round_trip(tmp_path, repository):
    sources = SourceSet.from_arrays([[100.0, 200.0], [-50.5, 3.25]], [10.0, 20.0], [0.1, 0.02])
    path = repository.write_frame(repository.sources_frame(sources), tmp_path / "sources.csv")
    loaded = repository.read_sources(path)
    np.testing.assert_array_equal(loaded.locations(), sources.locations())
    np.testing.assert_array_equal(loaded.rates(), sources.rates())
    np.testing.assert_array_equal(loaded.half_widths(), sources.half_widths())


def test_json_is_sorted_and_stable(tmp_path, repository):
    first = repository.write_json({"b": 1, "a": np.float64(0.5)}, tmp_path / "one.json").read_bytes()
    second = repository.write_json({"a": 0.5, "b": 1}, tmp_path / "two.json").read_bytes()
    assert first == second
    assert first.index(b'"a"') < first.index(b'"b"')
    assert repository.read_json(tmp_path / "one.json") == {"a": 0.5, "b": 1}


def test_grid_values_round_trip(tmp_path, repository):
    grid = SourceGrid(origin=(-100.0, 0.0), cell_size=50.0, nx=3, ny=2)
    values = np.linspace(0.0, 1.0, 6)
    repository.write_grid(grid, values, tmp_path / "grid.csv")
    np.testing.assert_array_equal(repository.read_grid_values(grid, tmp_path / "grid.csv"), values)
    frame = repository.read_frame(tmp_path / "grid.csv")
    assert frame.loc[1, "east_m"] == -25.0 and frame.loc[3, "north_m"] == 75.0
    with pytest.raises(IngestError):
        repository.read_grid_values(SourceGrid(cell_size=50.0, nx=2, ny=2), tmp_path / "grid.csv")


def test_error_record_needs_an_existing_directory(tmp_path, repository):
    record = {"error": "UsageError", "message": "no trace"}
    assert repository.write_error(record, tmp_path / "missing") is None
    path = repository.write_error(record, tmp_path)
    assert repository.read_json(path) == record


def test_written_survey_uses_the_ingest_header(tmp_path, repository):
    path = repository.write_survey(straight_survey(n=3), tmp_path / "survey.csv")
    assert path.read_text().splitlines()[0] == HEADER
