"""Flight-console session endpoint: one WebSocket drives one live
simulated-observables closed loop.

Wire protocol (JSON). Client to server:
  {"type": "setpoint", "nu": [x, y, z], "omega_z": w}
  {"type": "mode", "controller": "evolved"|"pi", "frisbee": bool}
  {"type": "reset"}
  {"type": "pause"}
Server to client: a hello with the config echo, an ack per command, and
telemetry frames at the configured rate (default 20 Hz):
  {"type": "telemetry", "t": s, "p": [3], "q": [4], "nu_hat": [3],
   "nu_gt": [3], "omega_z_hat": w, "setpoint": [3], "cmd": [4],
   "activity": [per-layer fractions]}
"""

from __future__ import annotations

import asyncio
import json

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .control import CONTROL_DT, RuntimeCoeffs, frisbee_setpoint, pi_step, smooth_scale
from .evolve import LinearController, controller_output
from .homography import CameraModel
from .quadsim import (
    QuadParams,
    QuadState,
    ground_truth_observables,
    out_of_bounds,
    quat_from_perturbation,
    quat_to_euler,
    step_control_tick,
)


class Session:
    """One live closed-loop episode with adjustable setpoint and mode."""

    def __init__(self, cfg, controller: LinearController | None):
        self.cfg = cfg
        self.cam = CameraModel()
        self.params = QuadParams()
        self.coeffs = RuntimeCoeffs()
        self.controller = controller
        self.mode = "evolved" if controller is not None else "pi"
        self.frisbee = False
        self.nu_sp = np.zeros(3)
        self.omega_z_sp = 0.0
        self.paused = False
        self.seed = int(cfg["run"]["seed"])
        self.episode = 0
        self.activity = [0.0, 0.0, 0.0, 0.0, 0.0]
        self.reset()

    def reset(self) -> int:
        """Restart from a randomized initial state; returns the episode seed."""
        self.episode += 1
        episode_seed = self.seed + self.episode
        self.rng = np.random.default_rng(episode_seed)
        p = np.array([0.0, 0.0, 2.0]) + self.rng.uniform(-0.25, 0.25, 3)
        self.state = QuadState.hover(1, pos=p, params=self.params)
        self.state.q = quat_from_perturbation(self.rng.uniform(-0.02, 0.02, (1, 3)))
        self.t = 0.0
        self.integrator = np.zeros(4)
        self.smoothed = np.zeros(4)
        self.last_cmd = np.zeros(4)
        self.last_obs = np.zeros(4)
        self.last_nu_gt = np.zeros(3)
        return episode_seed

    def tick(self):
        """Advance one 50 Hz control step."""
        sample = ground_truth_observables(self.state, self.cam, self.params,
                                          rng=self.rng, noise_std=0.025)
        obs = sample.obs_body[0]
        self.smoothed = smooth_scale(obs, self.smoothed, self.coeffs)
        roll, pitch, yaw = quat_to_euler(self.state.q)
        nu_sp = self.nu_sp
        if self.frisbee:
            nu_sp = frisbee_setpoint(nu_sp, float(yaw[0]))
        if self.mode == "pi" or self.controller is None:
            err = np.concatenate([nu_sp - self.smoothed[:3],
                                  [self.omega_z_sp - self.smoothed[3]]])
            cmd, self.integrator = pi_step(err, self.integrator, self.coeffs, CONTROL_DT)
        else:
            inputs = np.concatenate(
                [obs, [abs(float(roll[0])), abs(float(pitch[0]))], nu_sp]
            )
            cmd = controller_output(self.controller.M, inputs)
            if self.omega_z_sp != 0.0:
                cmd = np.clip(cmd + np.array([0.0, 0.0, 0.0, self.omega_z_sp]), -1.0, 1.0)
        self.state = step_control_tick(self.state, cmd[None], self.params)
        self.t += CONTROL_DT
        self.last_cmd = cmd
        self.last_obs = self.smoothed.copy()
        self.last_nu_gt = sample.nu_body_true[0]
        if out_of_bounds(self.state, self.params)[0]:
            self.reset()

    def telemetry(self) -> dict:
        return {
            "type": "telemetry",
            "t": round(self.t, 6),
            "p": [float(v) for v in self.state.p[0]],
            "q": [float(v) for v in self.state.q[0]],
            "nu_hat": [float(v) for v in self.last_obs[:3]],
            "nu_gt": [float(v) for v in self.last_nu_gt],
            "omega_z_hat": float(self.last_obs[3]),
            "setpoint": [float(v) for v in self.nu_sp],
            "omega_z_sp": float(self.omega_z_sp),
            "cmd": [float(v) for v in self.last_cmd],
            "activity": [float(a) for a in self.activity],
            "mode": self.mode,
            "frisbee": self.frisbee,
            "paused": self.paused,
            "episode": self.episode,
        }


def build_app(cfg, console_dist=None) -> FastAPI:
    app = FastAPI(title="evflight console endpoint")
    controller = None
    if cfg["serve"]["controller_path"]:
        controller = LinearController.load(cfg["serve"]["controller_path"])
    app.state.busy = False

    @app.get("/healthz")
    def healthz():
        return {"ok": True}

    # host the built console when available (frontend/dist)
    import os

    if console_dist is None:
        here = os.path.dirname(os.path.dirname(os.path.dirname(os.path.dirname(__file__))))
        console_dist = os.path.join(here, "frontend", "dist")
    if os.path.isdir(console_dist):
        from fastapi.staticfiles import StaticFiles

        app.mount("/console", StaticFiles(directory=console_dist, html=True), name="console")

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        if app.state.busy:
            await ws.send_text(json.dumps({"type": "error", "reason": "session busy"}))
            await ws.close(code=1013)
            return
        app.state.busy = True
        session = Session(cfg, controller)
        telemetry_dt = 1.0 / cfg["serve"]["telemetry_hz"]
        realtime = cfg["serve"]["realtime"]
        inbox: asyncio.Queue = asyncio.Queue()

        async def reader():
            while True:
                inbox.put_nowait(await ws.receive_text())

        reader_task = asyncio.create_task(reader())
        try:
            await ws.send_text(json.dumps({
                "type": "hello",
                "config": {
                    "seed": cfg["run"]["seed"],
                    "controller": session.mode,
                    "telemetry_hz": cfg["serve"]["telemetry_hz"],
                    "control_hz": 1.0 / CONTROL_DT,
                },
            }))
            next_emit = 0.0
            while True:
                if reader_task.done():
                    reader_task.result()  # surfaces the disconnect
                # drain pending client commands without blocking the loop
                while not inbox.empty():
                    raw = inbox.get_nowait()
                    msg = json.loads(raw)
                    ack = {"type": "ack", "what": msg.get("type")}
                    if msg.get("type") == "setpoint":
                        session.nu_sp = np.asarray(msg.get("nu", [0, 0, 0]), dtype=float)
                        session.omega_z_sp = float(msg.get("omega_z", 0.0))
                        ack["setpoint"] = [float(v) for v in session.nu_sp]
                        ack["omega_z"] = session.omega_z_sp
                    elif msg.get("type") == "mode":
                        want = msg.get("controller", session.mode)
                        if want == "evolved" and controller is None:
                            ack = {"type": "error", "reason": "no evolved controller configured"}
                        else:
                            session.mode = want
                        session.frisbee = bool(msg.get("frisbee", session.frisbee))
                        ack["mode"] = session.mode
                        ack["frisbee"] = session.frisbee
                    elif msg.get("type") == "reset":
                        ack["seed"] = session.reset()
                    elif msg.get("type") == "pause":
                        session.paused = not session.paused
                        ack["paused"] = session.paused
                    else:
                        ack = {"type": "error", "reason": f"unknown message {msg.get('type')!r}"}
                    await ws.send_text(json.dumps(ack))
                if not session.paused:
                    session.tick()
                    if session.t + 1e-9 >= next_emit:
                        await ws.send_text(json.dumps(session.telemetry()))
                        next_emit += telemetry_dt
                if realtime:
                    await asyncio.sleep(CONTROL_DT if not session.paused else 0.05)
                else:
                    await asyncio.sleep(0)
        except WebSocketDisconnect:
            pass
        finally:
            reader_task.cancel()
            app.state.busy = False

    return app
