"""Live interaction service.

A websocket session drives the same StepEngine the offline rollouts use: the
operator streams force samples in, the server paces the plant at the session
rate and streams state and intent predictions back.  The sample time is tied
to the rate (dt = 1/rate), so a 60 Hz session integrates the same continuous
plant with a coarser ZOH step and the physics stay correct.  Recordings are
ordinary episodes; a logged session replays bit-exactly through
simulate_episode with the recorded forces.

Session lifecycle: idle -> running -> paused <-> running -> done.  ``stop``
mid-trajectory pauses (the engine and recording buffer survive and ``start``
resumes); the loop reaching the end of the trajectory finishes the session.
A client disconnect pauses the session and flushes any recording buffer to
disk so nothing is lost.

Message envelope (both directions)::

    {"kind": str, "seq": int, "schema_version": 1, "payload": {...}}

Client kinds: configure, start, force_input, stop, record_toggle, export,
tl_request.  The server acknowledges each of these with a message of the same
kind (payload carries "ack": client seq), except force_input which is a
fire-and-forget stream.  Server-initiated kinds: hello, state_update,
prediction_update, tl_result, error.
"""

from __future__ import annotations

import asyncio
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import __version__, pipeline
from .config import RunConfig, from_profile
from .control import build_game_controller
from .dynamics import (GAME, IMPEDANCE, MANUAL_GUIDANCE, TRAJECTORY_KINDS,
                       EffortState, Episode, EpisodeMeta, StepEngine,
                       TrajectorySpec, human_force, human_intent,
                       obstacle_vigilance, place_obstacle)
from .episodes import load_episode, meta_to_dict, save_episode
from .predictor import load_model, save_model

PROTOCOL_VERSION = 1
CONTROLLERS = (MANUAL_GUIDANCE, IMPEDANCE, GAME)
IDLE, RUNNING, PAUSED, DONE = "idle", "running", "paused", "done"
MAX_RATE_HZ = 1000.0


@dataclass
class ServiceSettings:
    config: RunConfig
    data_dir: Path = Path("coassist_data")
    model_path: str | None = None
    static_dir: Path | None = None


class ServiceState:
    """Model registry and recording store shared by all sessions."""

    def __init__(self, settings: ServiceSettings):
        self.settings = settings
        self.config = settings.config
        self.data_dir = Path(settings.data_dir)
        self.models_dir = self.data_dir / "models"
        self.recordings_dir = self.data_dir / "recordings"
        self.models_dir.mkdir(parents=True, exist_ok=True)
        self.recordings_dir.mkdir(parents=True, exist_ok=True)
        self.models = {}
        for path in sorted(self.models_dir.glob("*.json")):
            try:
                self.models[path.stem] = load_model(path)
            except Exception:
                continue              # ignore foreign files in the directory
        if settings.model_path:
            path = Path(settings.model_path)
            self.models[path.stem] = load_model(path)
        self._rec_counter = len(list(self.recordings_dir.glob("*.meta.json")))
        self._session_counter = 0

    def next_recording_id(self) -> str:
        self._rec_counter += 1
        return f"rec_{self._rec_counter:04d}"

    def next_session_id(self) -> str:
        self._session_counter += 1
        return f"session_{self._session_counter:04d}"

    def model_summaries(self) -> list[dict]:
        out = []
        for name, model in sorted(self.models.items()):
            cfg = model.config
            out.append({"name": name, "model_id": model.model_id,
                        "window_k": cfg.window_k, "horizon": cfg.horizon,
                        "dof": cfg.dof})
        return out

    def recording_ids(self) -> list[str]:
        return sorted(p.name[:-len(".meta.json")]
                      for p in self.recordings_dir.glob("*.meta.json"))

    def recording_summaries(self) -> list[dict]:
        out = []
        for rec_id in self.recording_ids():
            with open(self.recordings_dir / f"{rec_id}.meta.json") as fh:
                meta = json.load(fh)
            out.append({"id": rec_id, "human": meta.get("human_id"),
                        "model": meta.get("model_id"),
                        "controller": meta.get("controller"),
                        "trajectory": (meta.get("trajectory") or {}).get("kind")})
        return out

    def load_recordings(self, rec_ids=None, human_id: str | None = None):
        """Episodes for transfer: explicit ids, or every recording by a human.

        Returns (ids, episodes) in matching order.
        """
        if rec_ids is None:
            rec_ids = [s["id"] for s in self.recording_summaries()
                       if human_id is None or s["human"] == human_id]
        episodes = []
        for rec_id in rec_ids:
            base = self.recordings_dir / str(rec_id)
            if not base.with_name(base.name + ".meta.json").exists():
                raise SessionError(f"unknown recording {rec_id!r}")
            episodes.append(load_episode(base))
        if not episodes:
            raise SessionError("no exported recordings available for transfer")
        return list(rec_ids), episodes


def _finite_or_none(row) -> list:
    return [float(v) if math.isfinite(v) else None for v in row]


def _episode_doc(episode: Episode) -> dict:
    return {"meta": meta_to_dict(episode.meta), "tag": episode.tag,
            "records": {
                "t": [float(v) for v in episode.t],
                "x": episode.x.tolist(),
                "v": episode.v.tolist(),
                "u_h": episode.u_h.tolist(),
                "x_ref_r": episode.x_ref_r.tolist(),
                "x_ref_h_true": [_finite_or_none(r) for r in episode.x_ref_h_true],
                "u_r": episode.u_r.tolist()}}


class SessionError(ValueError):
    pass


@dataclass
class _Recorder:
    d: int
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    v: list = field(default_factory=list)
    u_h: list = field(default_factory=list)
    x_ref_r: list = field(default_factory=list)
    x_ref_h_true: list = field(default_factory=list)
    u_r: list = field(default_factory=list)

    def push(self, rec, x_int):
        t, x, v, u_h, x_ref_r, u_r = rec
        self.t.append(t)
        self.x.append(x)
        self.v.append(v)
        self.u_h.append(np.asarray(u_h, dtype=float))
        self.x_ref_r.append(x_ref_r)
        self.x_ref_h_true.append(x_int)
        self.u_r.append(u_r)

    def __len__(self):
        return len(self.t)

    def to_episode(self, tag: str, meta: EpisodeMeta) -> Episode:
        return Episode(t=np.asarray(self.t), x=np.asarray(self.x),
                       v=np.asarray(self.v), u_h=np.asarray(self.u_h),
                       x_ref_r=np.asarray(self.x_ref_r),
                       x_ref_h_true=np.asarray(self.x_ref_h_true),
                       u_r=np.asarray(self.u_r), tag=tag, meta=meta)


class WsSession:
    """State machine behind one websocket connection."""

    def __init__(self, ws: WebSocket, state: ServiceState):
        self.ws = ws
        self.state = state
        self.cfg = state.config
        self.id = state.next_session_id()
        self.seq = 0
        self.send_lock = asyncio.Lock()
        self.run_task: asyncio.Task | None = None
        self.running = False
        self.status = IDLE
        self.engine: StepEngine | None = None
        self.recorder: _Recorder | None = None
        self.recording = False
        self.u_live = np.zeros(self.cfg.dof)
        self.predictor = None
        self.predictor_name = None
        self._build_session(controller=GAME, trajectory="linear",
                            duration=self.cfg.duration, human="live",
                            model=None, rate_hz=self.cfg.rate_hz,
                            obstacle_fraction=0.5, prediction_every=5,
                            alpha=self.cfg.alpha, realtime=True)

    # outgoing --------------------------------------------------------------
    async def send(self, kind: str, payload: dict):
        self.seq += 1
        doc = {"kind": kind, "seq": self.seq,
               "schema_version": PROTOCOL_VERSION, "payload": payload}
        async with self.send_lock:
            await self.ws.send_text(json.dumps(doc))

    async def error(self, message: str, ack=None):
        payload = {"message": message}
        if ack is not None:
            payload["ack"] = ack
        await self.send("error", payload)

    # configuration ---------------------------------------------------------
    def _build_session(self, *, controller, trajectory, duration, human, model,
                       rate_hz, obstacle_fraction, prediction_every, alpha,
                       realtime):
        if controller not in CONTROLLERS:
            raise SessionError(f"controller must be one of {CONTROLLERS}")
        if trajectory not in TRAJECTORY_KINDS:
            raise SessionError(f"trajectory must be one of {TRAJECTORY_KINDS}")
        if not 0.0 < float(duration) <= 120.0:
            raise SessionError("duration must lie in (0, 120] s")
        if human not in ("live", "synthetic"):
            raise SessionError("human must be 'live' or 'synthetic'")
        if not 0.0 < float(rate_hz) <= MAX_RATE_HZ:
            raise SessionError(f"rate_hz must lie in (0, {MAX_RATE_HZ:.0f}]")
        cfg = self.cfg
        dt = 1.0 / float(rate_hz)   # sample time follows the rate
        plant = dataclasses.replace(cfg.plant(), dt=dt)
        if controller == IMPEDANCE:
            from .metrics import impedance_variant
            plant = impedance_variant(plant)
            ctrl = IMPEDANCE
        elif controller == MANUAL_GUIDANCE:
            ctrl = MANUAL_GUIDANCE
        else:
            weights = cfg.weights()
            if alpha != cfg.alpha:
                from .control import GameWeights
                weights = GameWeights.default(d=cfg.dof, alpha=float(alpha),
                                              q_pos=cfg.q_pos, q_vel=cfg.q_vel,
                                              r=cfg.r_effort)
            ctrl = build_game_controller(plant, weights, cfg.pick_index)
        spec = TrajectorySpec(trajectory, d=cfg.dof, duration=float(duration))
        obstacle = None
        if obstacle_fraction is not None:
            obstacle = place_obstacle(spec, float(obstacle_fraction))
        predictor = None
        if model is not None:
            if model not in self.state.models:
                raise SessionError(f"unknown model {model!r}; see /models")
            predictor = self.state.models[model]
            if predictor.config.dof != cfg.dof:
                raise SessionError("model dof does not match the session")
        self.plant = plant
        self.controller = ctrl
        self.controller_tag = controller
        self.spec = spec
        self.obstacle = obstacle
        self.human_mode = human
        self.human = cfg.human() if human == "synthetic" else None
        self.predictor = predictor
        self.predictor_name = model
        self.rate_hz = float(rate_hz)
        self.realtime = bool(realtime)
        self.prediction_every = max(1, int(prediction_every))
        self.alpha = float(alpha)
        self.engine = None
        self.effort = EffortState()
        self.recorder = None
        self.status = IDLE
        self._obstacle_doc = None
        if obstacle is not None:
            self._obstacle_doc = {
                "center": [float(v) for v in obstacle.center[:2]],
                "half_width": float(obstacle.half_width),
                "arc_fraction": float(obstacle.arc_fraction)}

    def _session_summary(self) -> dict:
        n_path = 120
        s = np.linspace(0.0, self.spec.arc_length, n_path)
        path = [list(map(float, self.spec.point_at_arc(v)[:2])) for v in s]
        return {"id": self.id, "status": self.status,
                "controller": self.controller_tag, "trajectory": self.spec.kind,
                "duration": self.spec.duration, "dt": self.plant.dt,
                "human": self.human_mode, "model": self.predictor_name,
                "rate_hz": self.rate_hz, "realtime": self.realtime,
                "alpha": self.alpha,
                "force_cap": self.cfg.force_cap, "path": path,
                "obstacle": self._obstacle_doc,
                "steps": math.ceil(self.spec.duration / self.plant.dt)}

    # message handlers ------------------------------------------------------
    async def on_configure(self, seq, payload):
        if self.running:
            raise SessionError("stop the running session before reconfiguring")
        merged = {"controller": self.controller_tag,
                  "trajectory": self.spec.kind, "duration": self.spec.duration,
                  "human": self.human_mode, "model": self.predictor_name,
                  "rate_hz": self.rate_hz, "realtime": self.realtime,
                  "obstacle_fraction": (self.obstacle.arc_fraction
                                        if self.obstacle else None),
                  "prediction_every": self.prediction_every,
                  "alpha": self.alpha}
        unknown = sorted(set(payload) - set(merged))
        if unknown:
            raise SessionError(f"unknown configure keys: {unknown}")
        merged.update(payload)
        self._build_session(**merged)
        summary = self._session_summary()
        summary["ack"] = seq
        await self.send("configure", summary)

    async def on_start(self, seq, payload):
        if self.running:
            raise SessionError("session already running")
        resumed = (self.status == PAUSED and self.engine is not None
                   and not self.engine.finished)
        if not resumed:
            self.engine = StepEngine(self.plant, self.spec, self.controller,
                                     predictor=self.predictor)
            self.effort = EffortState()
            self.u_live = np.zeros(self.cfg.dof)
            if self.recording:
                self.recorder = _Recorder(self.cfg.dof)
        self.running = True
        self.status = RUNNING
        self.run_task = asyncio.create_task(self._run())
        await self.send("start", {"ack": seq, "steps": self.engine.n_steps,
                                  "dt": self.plant.dt, "resumed": resumed,
                                  "status": self.status})

    async def on_force_input(self, seq, payload):
        u = np.asarray(payload.get("u", ()), dtype=float)
        if u.shape != (self.cfg.dof,) or not np.all(np.isfinite(u)):
            raise SessionError(f"force_input needs {self.cfg.dof} finite values")
        norm = float(np.linalg.norm(u))
        cap = self.cfg.force_cap
        if norm > cap:
            u = u * (cap / norm)
        self.u_live = u

    async def on_stop(self, seq, payload):
        steps = await self._halt()
        if self.engine is not None and self.engine.finished:
            self.status = DONE
        elif self.engine is not None:
            self.status = PAUSED
        else:
            self.status = IDLE
        await self.send("stop", {"ack": seq, "steps": steps,
                                 "reason": "stopped", "status": self.status})

    async def on_record_toggle(self, seq, payload):
        on = bool(payload.get("on", not self.recording))
        if on and not self.recording and self.recorder is None:
            self.recorder = _Recorder(self.cfg.dof)
        self.recording = on
        await self.send("record_toggle",
                        {"ack": seq, "recording": self.recording,
                         "buffered": len(self.recorder) if self.recorder else 0})

    def _export(self) -> tuple[str, int]:
        if self.recorder is None or len(self.recorder) == 0:
            raise SessionError("nothing recorded yet")
        meta = EpisodeMeta(plant=self.plant, spec=self.spec,
                           obstacle=self.obstacle,
                           human_id=self.human_mode, model_id=self.predictor_name,
                           controller=self.controller_tag, seed=None,
                           human=self.human, context="live")
        episode = self.recorder.to_episode(self.controller_tag, meta)
        rec_id = self.state.next_recording_id()
        save_episode(episode, self.state.recordings_dir / rec_id)
        # export consumes the buffer; a live recording starts a fresh one
        self.recorder = _Recorder(self.cfg.dof) if self.recording else None
        return rec_id, len(episode)

    async def on_export(self, seq, payload):
        rec_id, steps = self._export()
        await self.send("export", {
            "ack": seq, "id": rec_id, "steps": steps,
            "path": str(self.state.recordings_dir / rec_id) + ".jsonl"})

    async def on_tl_request(self, seq, payload):
        base_name = payload.get("model", self.predictor_name)
        if base_name is None:
            raise SessionError("no model to adapt: configure one or pass 'model'")
        if base_name not in self.state.models:
            raise SessionError(f"unknown model {base_name!r}; see /models")
        base = self.state.models[base_name]
        epochs = int(payload.get("epochs", 10))
        if not 1 <= epochs <= 500:
            raise SessionError("epochs must be 1..500")
        hot_swap = bool(payload.get("hot_swap", False))
        rec_ids, episodes = self.state.load_recordings(
            payload.get("recordings"), human_id=self.human_mode)
        await self.send("tl_request", {
            "ack": seq, "accepted": True, "model": base_name, "epochs": epochs,
            "recordings": rec_ids, "episodes": len(episodes)})
        cfg = self.cfg
        seed = int(payload.get("seed", cfg.seed))

        def work():
            return pipeline.transfer_learn_on_episodes(
                base, episodes, epochs=epochs, batch_size=cfg.batch_size,
                lr=cfg.learning_rate, seed=seed, target=cfg.target,
                horizons=list(cfg.horizons))

        try:
            result = await asyncio.to_thread(work)
        except Exception as exc:
            await self.error(f"transfer failed: {exc}", ack=seq)
            return
        name = f"tl_{result.model.model_id[:8]}"
        self.state.models[name] = result.model
        save_model(result.model, self.state.models_dir / f"{name}.json")
        swapped = False
        if hot_swap and not self.running and self.controller_tag == GAME:
            self.predictor = result.model
            self.predictor_name = name
            swapped = True
        full = base.config.horizon
        await self.send("tl_result", {
            "model": name, "model_id": result.model.model_id,
            "base_model": base_name, "episodes": len(episodes),
            "e_rms_base": result.base_eval["e_rms"][full],
            "e_rms_tuned": result.tuned_eval["e_rms"][full],
            "improvement": result.improvement(full),
            "trainable_params": result.trainable_params,
            "total_params": result.total_params,
            "recurrent_unchanged": result.recurrent_unchanged,
            "hot_swapped": swapped})

    # simulation loop -------------------------------------------------------
    def _human_sample(self):
        engine = self.engine
        if self.human_mode == "synthetic":
            x_int = human_intent(self.spec, self.obstacle, self.human, engine.t)
            u_h = human_force(self.human, engine.x, engine.v, x_int)
            vig = obstacle_vigilance(self.spec, self.obstacle, self.human,
                                     engine.t)
            u_h = self.effort.advance(self.human, engine.x, x_int,
                                      self.plant.dt, vig) * u_h
            return u_h, x_int
        return self.u_live, np.full(self.cfg.dof, np.nan)

    async def _run(self):
        engine = self.engine
        dt_wall = 1.0 / self.rate_hz
        loop = asyncio.get_running_loop()
        # anchor so a resumed session keeps the per-step cadence
        t0 = loop.time() - engine.step_index * dt_wall
        try:
            while self.running and not engine.finished:
                if self.realtime:
                    target = t0 + (engine.step_index + 1) * dt_wall
                    delay = target - loop.time()
                    if delay > 0.0:
                        await asyncio.sleep(delay)
                    due = int((loop.time() - t0) / dt_wall) + 1
                    budget = max(1, min(due - engine.step_index, 8))
                else:
                    budget = 32
                for _ in range(budget):
                    if engine.finished or not self.running:
                        break
                    u_h, x_int = self._human_sample()
                    rec = engine.step(u_h)
                    if self.recording and self.recorder is not None:
                        self.recorder.push(rec, x_int)
                    await self._send_state(rec)
                    if engine.diverged is not None:
                        self.running = False
                        self.status = PAUSED
                        await self.error(engine.diverged)
                        break
                    if (self.predictor is not None
                            and engine.last_prediction is not None
                            and engine.step_index % self.prediction_every == 0):
                        await self._send_prediction()
                if not self.realtime:
                    await asyncio.sleep(0)
            if engine.finished:
                self.running = False
                self.status = DONE
                await self.send("stop", {"steps": engine.step_index,
                                         "reason": "finished",
                                         "status": self.status})
        except (WebSocketDisconnect, RuntimeError):
            self.running = False
            self.status = PAUSED

    async def _send_state(self, rec):
        t, x, v, u_h, x_ref_r, u_r = rec
        await self.send("state_update", {
            "step": self.engine.step_index, "t": float(t),
            "x": [float(a) for a in x], "v": [float(a) for a in v],
            "u_h": [float(a) for a in u_h], "u_r": [float(a) for a in u_r],
            "x_ref_r": [float(a) for a in x_ref_r],
            "obstacle": self._obstacle_doc,
            "recording": self.recording})

    async def _send_prediction(self):
        pred = self.engine.last_prediction
        await self.send("prediction_update", {
            "step": self.engine.step_index, "t": float(self.engine.t),
            "pick_index": int(self.engine.pick),
            "points": [[float(a) for a in row[:2]] for row in pred]})

    async def _halt(self) -> int:
        self.running = False
        if self.run_task is not None:
            try:
                await self.run_task
            except asyncio.CancelledError:
                pass
            self.run_task = None
        return self.engine.step_index if self.engine is not None else 0

    # dispatch --------------------------------------------------------------
    HANDLERS = {"configure": on_configure, "start": on_start,
                "force_input": on_force_input, "stop": on_stop,
                "record_toggle": on_record_toggle, "export": on_export,
                "tl_request": on_tl_request}

    async def handle(self, raw: str):
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError:
            await self.error("message is not valid JSON")
            return
        if not isinstance(doc, dict):
            await self.error("message must be a JSON object")
            return
        kind = doc.get("kind")
        seq = doc.get("seq")
        version = doc.get("schema_version")
        payload = doc.get("payload", {})
        if version != PROTOCOL_VERSION:
            await self.error(f"schema_version {version!r} unsupported", ack=seq)
            return
        if kind not in self.HANDLERS:
            await self.error(f"unknown kind {kind!r}", ack=seq)
            return
        if not isinstance(payload, dict):
            await self.error("payload must be an object", ack=seq)
            return
        try:
            await self.HANDLERS[kind](self, seq, payload)
        except SessionError as exc:
            await self.error(str(exc), ack=seq)

    async def hello(self):
        await self.send("hello", {
            "schema_version": PROTOCOL_VERSION, "version": __version__,
            "id": self.id,
            "dof": self.cfg.dof, "rate_hz": self.cfg.rate_hz,
            "force_cap": self.cfg.force_cap,
            "controllers": list(CONTROLLERS),
            "trajectories": list(TRAJECTORY_KINDS),
            "models": [m["name"] for m in self.state.model_summaries()],
            "session": self._session_summary()})

    async def close(self):
        """Client gone: pause the loop and flush any recording to disk."""
        await self._halt()
        if self.status == RUNNING:
            self.status = PAUSED
        if self.recorder is not None and len(self.recorder) > 0:
            try:
                self._export()
            except SessionError:
                pass


def create_app(settings: ServiceSettings | None = None) -> FastAPI:
    if settings is None:
        settings = ServiceSettings(config=from_profile("desk"))
    state = ServiceState(settings)
    app = FastAPI(title="coassist live service")
    app.state.coassist = state

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__,
                "schema_version": PROTOCOL_VERSION,
                "profile": state.config.profile,
                "rate_hz": state.config.rate_hz,
                "models": len(state.models)}

    @app.get("/models")
    def models():
        return {"models": state.model_summaries()}

    @app.get("/recordings")
    def recordings():
        return {"recordings": state.recording_summaries()}

    @app.get("/recordings/{rec_id}")
    def recording(rec_id: str):
        base = state.recordings_dir / rec_id
        if not (state.recordings_dir / f"{rec_id}.meta.json").exists():
            return JSONResponse(status_code=404,
                                content={"error": f"unknown recording {rec_id!r}"})
        return _episode_doc(load_episode(base))

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        session = WsSession(ws, state)
        await session.hello()
        try:
            while True:
                raw = await ws.receive_text()
                await session.handle(raw)
        except WebSocketDisconnect:
            pass
        finally:
            await session.close()

    if settings.static_dir is not None and Path(settings.static_dir).is_dir():
        app.mount("/", StaticFiles(directory=settings.static_dir, html=True),
                  name="ui")
    return app
