import csv

import pytest
from fastapi.testclient import TestClient

from cmmsim.service import app

client = TestClient(app)
TINY = {"n_vehicles": 3, "n_steps": 12, "comm_range_m": 2000.0}


def test_health():
    assert client.get("/health").json() == {"status": "ok"}


def test_validate_good_and_bad():
    ok = client.post("/validate", json={"config": TINY}).json()
    assert ok["valid"] and ok["config"]["n_vehicles"] == 3
    bad = client.post("/validate", json={"config": {"n_vehicles": 3, "bogus": 1}}).json()
    assert not bad["valid"] and "bogus" in bad["problems"][0]


def test_run_writes_reports(tmp_path):
    resp = client.post("/run", json={"config": TINY, "out_dir": str(tmp_path), "seeds": 2,
                                     "fusion": "decentralized_rand"})
    assert resp.status_code == 200, resp.text
    data = resp.json()
    assert set(data["files"]) == {"steps", "summary", "links"}
    assert [r["seed"] for r in data["summary"]] == ["0", "1", "mean", "std"]
    assert all(r["mechanism"] == "decentralized_rand" for r in data["summary"])
    with open(data["files"]["steps"], newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 2 * 12 * 3


def test_run_rejects_bad_config(tmp_path):
    resp = client.post("/run", json={"config": {"n_steps": -1, "zzz": 0}, "out_dir": str(tmp_path)})
    assert resp.status_code == 422
    assert "zzz" in resp.json()["problems"][0]


def test_run_rejects_unknown_request_field(tmp_path):
    resp = client.post("/run", json={"config": TINY, "out_dir": str(tmp_path), "speed": 3})
    assert resp.status_code == 422


def test_run_reports_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    resp = client.post("/run", json={"config": TINY, "out_dir": str(blocker / "sub")})
    assert resp.status_code == 400
    assert "cannot create output directory" in resp.json()["detail"]


def test_synth_map(tmp_path):
    out = tmp_path / "map.yaml"
    data = client.post("/synth-map", json={"out": str(out), "extent_m": 1000, "spacing_m": 250}).json()
    assert out.exists() and data["n_segments"] == 10
    assert client.post("/synth-map", json={"out": str(out), "extent_m": -1}).status_code == 422


@pytest.mark.parametrize("route", ["/run", "/validate"])
def test_config_must_be_mapping(route, tmp_path):
    body = {"config": [1, 2]}
    if route == "/run":
        body["out_dir"] = str(tmp_path)
    assert client.post(route, json=body).status_code == 422
