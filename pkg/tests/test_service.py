"""Live service: REST surface, websocket protocol, recording and replay."""

import json
import time

import numpy as np
import pytest
from starlette.testclient import TestClient

import coassist
from coassist.config import from_profile
from coassist.control import GameWeights, build_game_controller
from coassist.dynamics import simulate_episode
from coassist.episodes import load_episode
from coassist.predictor import PredictorConfig, init_model, save_model
from coassist.service import ServiceSettings, create_app


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("svc")
    (data_dir / "models").mkdir()
    pcfg = PredictorConfig(input_features=8, window_k=25, horizon=10, dof=2,
                           recurrent_layers=1, hidden_size=8, fc_hidden=8)
    save_model(init_model(pcfg, seed=0), data_dir / "models" / "base.json")
    app = create_app(ServiceSettings(config=from_profile("desk"),
                                     data_dir=data_dir))
    with TestClient(app) as client:
        yield client, data_dir


class Ws:
    """Envelope bookkeeping around the raw test websocket."""

    def __init__(self, raw):
        self.raw = raw
        self.seq = 0
        self.last_server_seq = 0

    def send(self, kind, **payload):
        self.seq += 1
        self.raw.send_json({"kind": kind, "seq": self.seq,
                            "schema_version": 1, "payload": payload})
        return self.seq

    def recv(self):
        doc = self.raw.receive_json()
        assert set(doc) == {"kind", "seq", "schema_version", "payload"}
        assert doc["schema_version"] == 1
        assert doc["seq"] > self.last_server_seq
        self.last_server_seq = doc["seq"]
        return doc

    def recv_kind(self, kind, limit=20000):
        seen = []
        for _ in range(limit):
            doc = self.recv()
            seen.append(doc)
            if doc["kind"] == kind:
                return doc, seen
        raise AssertionError(f"no {kind} message within {limit}")

    def rpc(self, kind, **payload):
        """Send and wait for the acknowledging message of the same kind."""
        seq = self.send(kind, **payload)
        doc, _ = self.recv_kind(kind)
        assert doc["payload"]["ack"] == seq
        return doc["payload"]


@pytest.fixture()
def ws(service):
    client, _ = service
    with client.websocket_connect("/ws") as raw:
        w = Ws(raw)
        hello = w.recv()
        assert hello["kind"] == "hello"
        w.hello = hello["payload"]
        yield w


def test_health_and_registries(service):
    client, _ = service
    doc = client.get("/health").json()
    assert doc["status"] == "ok"
    assert doc["version"] == coassist.__version__
    assert doc["schema_version"] == 1
    assert doc["profile"] == "desk"
    assert client.get("/models").json()["models"][0]["name"] == "base"
    assert client.get("/recordings").json()["recordings"] == []
    assert client.get("/recordings/nope").status_code == 404


def test_hello_summary(ws):
    h = ws.hello
    assert h["dof"] == 2 and h["force_cap"] == 30.0
    assert h["rate_hz"] == 125.0
    assert h["controllers"] == ["MG", "IMP", "GT"]
    assert "linear" in h["trajectories"] and "eval" in h["trajectories"]
    assert h["models"] == ["base"]
    s = h["session"]
    assert s["status"] == "idle" and s["controller"] == "GT"
    assert s["dt"] == 1.0 / 125.0
    assert len(s["path"]) == 120
    assert s["obstacle"]["arc_fraction"] == 0.5
    assert s["steps"] == int(np.ceil(s["duration"] / s["dt"]))


def test_configure_round_trip(ws):
    p = ws.rpc("configure", rate_hz=50.0, duration=0.5, human="synthetic",
               realtime=False, trajectory="curved")
    assert p["dt"] == 1.0 / 50.0
    assert p["steps"] == 25
    assert p["trajectory"] == "curved" and p["human"] == "synthetic"
    assert p["status"] == "idle" and p["realtime"] is False


def test_configure_rejections(ws):
    seq = ws.send("configure", controller="PD")
    doc, _ = ws.recv_kind("error")
    assert "controller" in doc["payload"]["message"]
    assert doc["payload"]["ack"] == seq
    ws.send("configure", rate_hz=0.0)
    doc, _ = ws.recv_kind("error")
    assert "rate_hz" in doc["payload"]["message"]
    ws.send("configure", zoom=3)
    doc, _ = ws.recv_kind("error")
    assert "unknown configure keys" in doc["payload"]["message"]
    ws.send("configure", duration=500.0)
    doc, _ = ws.recv_kind("error")
    assert "duration" in doc["payload"]["message"]


def test_envelope_robustness(ws):
    ws.raw.send_text("{oops")
    assert "not valid JSON" in ws.recv()["payload"]["message"]
    ws.raw.send_text(json.dumps([1, 2]))
    assert "JSON object" in ws.recv()["payload"]["message"]
    ws.send("state_update", x=[0, 0])
    assert "unknown kind" in ws.recv()["payload"]["message"]
    ws.raw.send_json({"kind": "stop", "seq": 99, "schema_version": 2,
                      "payload": {}})
    assert "schema_version" in ws.recv()["payload"]["message"]
    ws.raw.send_json({"kind": "stop", "seq": 100, "schema_version": 1,
                      "payload": [1]})
    assert "payload must be an object" in ws.recv()["payload"]["message"]


def test_synthetic_run_streams_and_finishes(ws):
    ws.rpc("configure", rate_hz=50.0, duration=0.4, human="synthetic",
           realtime=False, trajectory="linear")
    p = ws.rpc("start")
    assert p["steps"] == 20 and p["resumed"] is False
    assert p["dt"] == 1.0 / 50.0
    stop, seen = ws.recv_kind("stop")
    states = [d for d in seen if d["kind"] == "state_update"]
    assert len(states) == 20
    assert [d["payload"]["step"] for d in states] == list(range(1, 21))
    # record timestamps are the pre-step grid times
    for d in states:
        assert d["payload"]["t"] == (d["payload"]["step"] - 1) * (1.0 / 50.0)
    assert not any(d["kind"] == "prediction_update" for d in seen)
    assert stop["payload"]["reason"] == "finished"
    assert stop["payload"]["status"] == "done"
    # a finished session starts over, not resumes
    p = ws.rpc("start")
    assert p["resumed"] is False
    ws.recv_kind("stop")


def test_model_predictions_stream(ws):
    ws.rpc("configure", rate_hz=50.0, duration=0.4, human="synthetic",
           realtime=False, model="base", prediction_every=1)
    ws.rpc("start")
    stop, seen = ws.recv_kind("stop")
    preds = [d for d in seen if d["kind"] == "prediction_update"]
    assert preds, "model in the loop must stream predictions"
    pts = preds[-1]["payload"]["points"]
    assert len(pts) == 10 and len(pts[0]) == 2
    assert preds[-1]["payload"]["pick_index"] == 4


def test_force_input_applies_and_clamps(ws):
    ws.rpc("configure", rate_hz=50.0, duration=2.0, human="live",
           realtime=False, model=None)
    ws.rpc("start")
    ws.send("force_input", u=[60.0, 0.0])
    stop, seen = ws.recv_kind("stop")
    last = [d for d in seen if d["kind"] == "state_update"][-1]["payload"]
    assert np.linalg.norm(last["u_h"]) == pytest.approx(30.0, abs=1e-9)
    assert last["u_h"][1] == 0.0
    assert last["x"][0] > 0.0
    ws.send("force_input", u=[1.0, 2.0, 3.0])
    doc, _ = ws.recv_kind("error")
    assert "2 finite values" in doc["payload"]["message"]


def test_pause_and_resume(ws):
    ws.rpc("configure", rate_hz=200.0, duration=5.0, human="synthetic",
           realtime=True)
    ws.rpc("start")
    ws.recv_kind("state_update")
    seq = ws.send("configure", rate_hz=100.0)
    doc, _ = ws.recv_kind("error")
    assert "stop the running session" in doc["payload"]["message"]
    seq = ws.send("stop")
    stop, _ = ws.recv_kind("stop")
    assert stop["payload"]["ack"] == seq
    assert stop["payload"]["status"] == "paused"
    paused_at = stop["payload"]["steps"]
    assert 0 < paused_at < 1000
    p = ws.rpc("start")
    assert p["resumed"] is True
    nxt, _ = ws.recv_kind("state_update")
    assert nxt["payload"]["step"] == paused_at + 1
    ws.send("stop")
    ws.recv_kind("stop")


def test_record_export_and_bit_exact_replay(service, ws):
    client, data_dir = service
    ws.rpc("configure", rate_hz=125.0, duration=0.6, human="synthetic",
           realtime=False, trajectory="curved")
    p = ws.rpc("record_toggle", on=True)
    assert p["recording"] is True and p["buffered"] == 0
    ws.rpc("start")
    ws.recv_kind("stop")
    p = ws.rpc("export")
    rec_id, steps = p["id"], p["steps"]
    assert steps == 75 and p["path"].endswith(f"{rec_id}.jsonl")
    listed = client.get("/recordings").json()["recordings"]
    assert any(r["id"] == rec_id and r["human"] == "synthetic"
               and r["controller"] == "GT" for r in listed)
    doc = client.get(f"/recordings/{rec_id}").json()
    assert len(doc["records"]["t"]) == 75
    assert doc["meta"]["plant"]["dt"] == 1.0 / 125.0

    ep = load_episode(data_dir / "recordings" / rec_id)
    ctrl = build_game_controller(ep.meta.plant, GameWeights.default(2),
                                 pick_index=4)
    replay = simulate_episode(ep.meta.plant, ep.meta.spec, ep.meta.obstacle,
                              None, ctrl, force_sequence=ep.u_h)
    assert np.array_equal(replay.x, ep.x)
    assert np.array_equal(replay.v, ep.v)
    assert np.array_equal(replay.u_r, ep.u_r)
    assert np.array_equal(replay.x_ref_r, ep.x_ref_r)

    # the export consumed the buffer
    ws.send("export")
    doc, _ = ws.recv_kind("error")
    assert "nothing recorded" in doc["payload"]["message"]


def test_transfer_request_flow(service, ws):
    client, data_dir = service
    ws.rpc("configure", rate_hz=125.0, duration=0.6, human="synthetic",
           realtime=False, trajectory="linear")
    ws.rpc("record_toggle", on=True)
    ws.rpc("start")
    ws.recv_kind("stop")
    rec_id = ws.rpc("export")["id"]

    seq = ws.send("tl_request", model="base", epochs=2, recordings=[rec_id])
    ack, _ = ws.recv_kind("tl_request")
    assert ack["payload"]["ack"] == seq
    assert ack["payload"]["accepted"] is True
    assert ack["payload"]["recordings"] == [rec_id]
    result, _ = ws.recv_kind("tl_result")
    p = result["payload"]
    assert p["base_model"] == "base" and p["episodes"] == 1
    assert p["recurrent_unchanged"] is True
    assert 0 < p["trainable_params"] < p["total_params"]
    assert p["model"].startswith("tl_")
    assert np.isfinite(p["e_rms_base"]) and np.isfinite(p["e_rms_tuned"])
    assert p["hot_swapped"] is False
    assert (data_dir / "models" / f"{p['model']}.json").exists()
    names = [m["name"] for m in client.get("/models").json()["models"]]
    assert p["model"] in names


def test_transfer_request_rejections(ws):
    ws.send("tl_request", model="missing")
    doc, _ = ws.recv_kind("error")
    assert "unknown model" in doc["payload"]["message"]
    # a too-short recording is accepted for queuing but fails in training
    ws.rpc("configure", rate_hz=125.0, duration=0.2, human="synthetic",
           realtime=False)
    ws.rpc("record_toggle", on=True)
    ws.rpc("start")
    ws.recv_kind("stop")
    rec_id = ws.rpc("export")["id"]
    ws.send("tl_request", model="base", epochs=1, recordings=[rec_id])
    ws.recv_kind("tl_request")
    doc, _ = ws.recv_kind("error")
    assert "too short" in doc["payload"]["message"]
    ws.send("tl_request", model="base", epochs=0)
    doc, _ = ws.recv_kind("error")
    assert "epochs" in doc["payload"]["message"]


def test_disconnect_flushes_recording(service):
    client, data_dir = service
    before = set(client.get("/recordings").json()["recordings"][i]["id"]
                 for i in range(len(client.get("/recordings").json()["recordings"])))
    with client.websocket_connect("/ws") as raw:
        w = Ws(raw)
        w.recv()
        w.rpc("configure", rate_hz=125.0, duration=0.6, human="synthetic",
              realtime=False)
        w.rpc("record_toggle", on=True)
        w.rpc("start")
        w.recv_kind("stop")
        # leave without exporting
    for _ in range(50):
        after = {r["id"] for r in client.get("/recordings").json()["recordings"]}
        if after - before:
            break
        time.sleep(0.05)
    assert after - before, "disconnect must flush the recording buffer"


def test_sessions_are_independent(service):
    client, _ = service
    with client.websocket_connect("/ws") as raw_a, \
            client.websocket_connect("/ws") as raw_b:
        a, b = Ws(raw_a), Ws(raw_b)
        ha, hb = a.recv()["payload"], b.recv()["payload"]
        assert ha["id"] != hb["id"]
        pa = a.rpc("configure", rate_hz=50.0)
        assert pa["rate_hz"] == 50.0
        pb = b.rpc("configure")
        assert pb["rate_hz"] == 125.0
