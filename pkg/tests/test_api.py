import pytest
from fastapi.testclient import TestClient

from core.deps import get_output_root
from main import app
from tests.conftest import write_short_trace


@pytest.fixture
def client(tmp_path):
    app.dependency_overrides[get_output_root] = lambda: tmp_path
    yield TestClient(app)
    app.dependency_overrides.clear()


def test_root(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json() == {"status": "ok", "service": "plumeseek"}


def test_index(client):
    assert client.get("/v1").json() == {"status": "ok"}


def test_report_without_trace_is_bad_request(client):
    response = client.post("/pipeline/report", json={"out_dir": "run"})
    assert response.status_code == 400
    detail = response.json()["detail"]
    assert detail["error"] == "UsageError"
    assert detail["stage"] == "report"


def test_unknown_key_is_bad_request(client):
    response = client.post("/pipeline/simulate", json={"out_dir": "run", "overrides": ["synth.nope=1"]})
    assert response.status_code == 400
    assert response.json()["detail"]["error"] == "ConfigError"


def test_simulate_into_the_output_root(client, tmp_path):
    overrides = ["synth.domain_east_m=4000", "synth.domain_north_m=4000", "synth.duration_s=150", "synth.source_count=1"]
    response = client.post("/pipeline/simulate", json={"out_dir": "run", "overrides": overrides, "seed": 3})
    assert response.status_code == 200
    body = response.json()
    assert body["stage"] == "simulate"
    assert "survey.csv" in body["artifacts"]
    assert body["summary"]["measurements"] == 49
    assert (tmp_path / "run" / "survey.csv").is_file()


def test_corrupt_grid_spec_is_a_server_error(client, tmp_path):
    write_short_trace(tmp_path / "run")
    (tmp_path / "run" / "grid_spec.json").write_text("{}")
    response = client.post("/pipeline/report", json={"out_dir": "run"})
    assert response.status_code == 500
    assert response.json()["detail"]["error"] == "KeyError"
    assert (tmp_path / "run" / "error.json").is_file()
