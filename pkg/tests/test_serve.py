import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from evflight.config import RunConfig
from evflight.evolve import LinearController
from evflight.serve import build_app


def make_app(tmp_path, with_controller=False):
    cfg = RunConfig.defaults()
    cfg.override("serve", "realtime", False)
    cfg.override("run", "seed", 5)
    if with_controller:
        path = tmp_path / "controller.json"
        LinearController(np.random.default_rng(0).uniform(-0.1, 0.1, (4, 9))).save(path)
        cfg.override("serve", "controller_path", str(path))
    return build_app(cfg)


def recv_until(ws, want_type, limit=500):
    for _ in range(limit):
        msg = json.loads(ws.receive_text())
        if msg["type"] == want_type:
            return msg
    raise AssertionError(f"no {want_type} message within {limit} frames")


class TestServe:
    def test_hello_echoes_config(self, tmp_path):
        app = make_app(tmp_path)
        with TestClient(app) as client:
            with client.websocket_connect("/ws") as ws:
                hello = json.loads(ws.receive_text())
                assert hello["type"] == "hello"
                assert hello["config"]["seed"] == 5
                assert hello["config"]["control_hz"] == 50.0

    def test_setpoint_acknowledged_and_in_telemetry(self, tmp_path):
        app = make_app(tmp_path)
        with TestClient(app) as client:
            with client.websocket_connect("/ws") as ws:
                recv_until(ws, "hello", 2)
                ws.send_text(json.dumps({"type": "setpoint", "nu": [0, 0.5, 0], "omega_z": 0.0}))
                ack = recv_until(ws, "ack")
                assert ack["what"] == "setpoint"
                assert ack["setpoint"] == [0.0, 0.5, 0.0]
                tele = recv_until(ws, "telemetry")
                # after the ack, the next telemetry frames echo the setpoint
                for _ in range(5):
                    if tele["setpoint"] == [0.0, 0.5, 0.0]:
                        break
                    tele = recv_until(ws, "telemetry")
                assert tele["setpoint"] == [0.0, 0.5, 0.0]

    def test_telemetry_schema_and_activity_bounds(self, tmp_path):
        app = make_app(tmp_path)
        with TestClient(app) as client:
            with client.websocket_connect("/ws") as ws:
                recv_until(ws, "hello", 2)
                tele = recv_until(ws, "telemetry")
                for key in ("t", "p", "q", "nu_hat", "nu_gt", "omega_z_hat",
                            "setpoint", "cmd", "activity"):
                    assert key in tele
                assert len(tele["p"]) == 3 and len(tele["q"]) == 4 and len(tele["cmd"]) == 4
                assert all(0.0 <= a <= 1.0 for a in tele["activity"])

    def test_reset_reports_seed(self, tmp_path):
        app = make_app(tmp_path)
        with TestClient(app) as client:
            with client.websocket_connect("/ws") as ws:
                recv_until(ws, "hello", 2)
                ws.send_text(json.dumps({"type": "reset"}))
                ack = recv_until(ws, "ack")
                assert ack["what"] == "reset"
                assert isinstance(ack["seed"], int)
                ws.send_text(json.dumps({"type": "reset"}))
                ack2 = recv_until(ws, "ack")
                assert ack2["seed"] == ack["seed"] + 1

    def test_pause_toggles(self, tmp_path):
        app = make_app(tmp_path)
        with TestClient(app) as client:
            with client.websocket_connect("/ws") as ws:
                recv_until(ws, "hello", 2)
                ws.send_text(json.dumps({"type": "pause"}))
                ack = recv_until(ws, "ack")
                assert ack["paused"] is True
                ws.send_text(json.dumps({"type": "pause"}))
                ack = recv_until(ws, "ack")
                assert ack["paused"] is False

    def test_mode_switch_rejected_without_controller(self, tmp_path):
        app = make_app(tmp_path, with_controller=False)
        with TestClient(app) as client:
            with client.websocket_connect("/ws") as ws:
                recv_until(ws, "hello", 2)
                ws.send_text(json.dumps({"type": "mode", "controller": "evolved"}))
                msg = recv_until(ws, "error")
                assert "controller" in msg["reason"]

    def test_mode_switch_with_controller(self, tmp_path):
        app = make_app(tmp_path, with_controller=True)
        with TestClient(app) as client:
            with client.websocket_connect("/ws") as ws:
                recv_until(ws, "hello", 2)
                ws.send_text(json.dumps({"type": "mode", "controller": "pi", "frisbee": True}))
                ack = recv_until(ws, "ack")
                assert ack["mode"] == "pi" and ack["frisbee"] is True
                tele = recv_until(ws, "telemetry")
                for _ in range(5):
                    if tele["mode"] == "pi":
                        break
                    tele = recv_until(ws, "telemetry")
                assert tele["mode"] == "pi"

    def test_healthz(self, tmp_path):
        app = make_app(tmp_path)
        with TestClient(app) as client:
            assert client.get("/healthz").json() == {"ok": True}
