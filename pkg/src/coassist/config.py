"""Run configuration: profile defaults, YAML overlay, object factories.

Two built-in profiles: "paper" mirrors the full-scale experimental setup
(deep network, long window, 60 episodes per round); "desk" is a scaled-down
variant with the same structure that trains in minutes on one core, used by
the test suite and for local runs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import yaml

from .control import GameWeights, build_game_controller
from .dynamics import HumanModel, PlantParams
from .predictor import PredictorConfig


@dataclass
class RunConfig:
    profile: str = "paper"
    seed: int = 0
    # plant
    dof: int = 2
    mass: float = 10.0            # [kg]
    damping: float = 100.0        # [N s/m]
    stiffness: float = 0.0        # [N/m]
    dt: float = 0.008             # [s]
    # cooperative game
    alpha: float = 0.8
    q_pos: float = 1.0
    q_vel: float = 1e-4
    r_effort: float = 5e-4
    pick_index: int = 20
    # predictor
    recurrent_layers: int = 3
    hidden_size: int = 250
    fc_hidden: int = 128
    window_k: int = 125
    horizon: int = 50
    horizons: tuple = (5, 10, 20, 50)
    # training
    epochs: int = 25
    batch_size: int = 64
    learning_rate: float = 1e-3
    n_episodes: int = 60
    n_iterations: int = 3
    tol: float = 1e-4
    target: str = "measured"
    train_frac: float = 0.8
    # episodes
    episodes_per_kind: int = 20   # batch generation default
    duration: float = 10.0        # [s]
    force_noise_sigma: float = 0.0  # [N]
    # synthetic human
    human_kh: float = 300.0       # [N/m]
    human_ch: float = 30.0        # [N s/m]
    detour_amplitude: float = 0.05  # [m]
    detour_sigma: float = 0.05    # [m] arc length
    force_cap: float = 30.0       # [N]
    relax_rate: float = 0.0       # [1/s] effort adaptation; 0 = fixed gains
    relax_floor: float = 0.25
    track_scale: float = 0.02     # [m]
    wander_amplitude: float = 0.0   # [m] persistent path preference; 0 = off
    wander_wavelength: float = 0.35  # [m] arc length
    wander_phase: float = 1.0     # [rad]
    # live service
    host: str = "127.0.0.1"
    port: int = 8700
    rate_hz: float = 125.0

    def validate(self) -> "RunConfig":
        if self.horizon < 1 or self.window_k < 1:
            raise ValueError("window_k and horizon must be positive")
        bad = [h for h in self.horizons if not 1 <= h <= self.horizon]
        if bad:
            raise ValueError(f"horizons {bad} fall outside 1..{self.horizon}")
        if not 1 <= self.pick_index <= self.horizon:
            raise ValueError(f"pick_index {self.pick_index} outside "
                             f"1..{self.horizon}")
        if self.n_episodes < 2:
            raise ValueError("n_episodes must be at least 2 (held-out split)")
        if self.episodes_per_kind < 1:
            raise ValueError("episodes_per_kind must be at least 1")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train_frac must lie in (0, 1)")
        if self.target not in ("measured", "intent"):
            raise ValueError("target must be 'measured' or 'intent'")
        return self

    # factories ------------------------------------------------------------
    def plant(self) -> PlantParams:
        return PlantParams(d=self.dof, m=self.mass, c=self.damping,
                           k=self.stiffness, dt=self.dt)

    def human(self) -> HumanModel:
        return HumanModel(d=self.dof, k_h=self.human_kh, c_h=self.human_ch,
                          detour_amplitude=self.detour_amplitude,
                          detour_sigma=self.detour_sigma,
                          force_cap=self.force_cap,
                          relax_rate=self.relax_rate,
                          relax_floor=self.relax_floor,
                          track_scale=self.track_scale,
                          wander_amplitude=self.wander_amplitude,
                          wander_wavelength=self.wander_wavelength,
                          wander_phase=self.wander_phase)

    def weights(self) -> GameWeights:
        return GameWeights.default(d=self.dof, alpha=self.alpha,
                                   q_pos=self.q_pos, q_vel=self.q_vel,
                                   r=self.r_effort)

    def controller(self):
        return build_game_controller(self.plant(), self.weights(),
                                     self.pick_index)

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(input_features=4 * self.dof,
                               window_k=self.window_k, horizon=self.horizon,
                               dof=self.dof,
                               recurrent_layers=self.recurrent_layers,
                               hidden_size=self.hidden_size,
                               fc_hidden=self.fc_hidden)


_DESK_OVERRIDES = dict(profile="desk", recurrent_layers=2, hidden_size=32,
                       fc_hidden=64, window_k=25, horizon=10, pick_index=4,
                       horizons=(2, 5, 10), n_episodes=10, episodes_per_kind=10,
                       duration=20.0, epochs=15, relax_rate=1.2,
                       track_scale=0.012, wander_amplitude=0.009)

PROFILES = {"paper": {}, "desk": _DESK_OVERRIDES}

_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def from_profile(name: str) -> RunConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; expected one of "
                         f"{sorted(PROFILES)}")
    return replace(RunConfig(), **PROFILES[name])


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    unknown = sorted(set(overrides) - _FIELD_NAMES)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    clean = {}
    for key, value in overrides.items():
        if key == "horizons":
            value = tuple(int(v) for v in value)
        clean[key] = value
    return replace(cfg, **clean)


def load_config(path=None, profile: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Profile defaults, then the YAML file, then explicit overrides."""
    doc = {}
    if path is not None:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    name = profile or doc.get("profile") or "paper"
    cfg = from_profile(name)
    doc.pop("profile", None)
    cfg = apply_overrides(cfg, doc)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()
