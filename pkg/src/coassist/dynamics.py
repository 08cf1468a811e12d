"""Cartesian impedance plant, reference trajectories and the synthetic human.

The plant is a virtual mass-spring-damper rendered at a robot end-effector
with d translational DoFs.  Human and robot forces enter through the same
input matrix; integration is exact zero-order-hold at a fixed sample time.
The synthetic human is a PD law pulling toward an intent trajectory, which
deviates from the nominal reference around a randomly placed obstacle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

SCHEMA_VERSION = 1

# Controller tags understood by simulate_episode.
MANUAL_GUIDANCE = "MG"
IMPEDANCE = "IMP"
GAME = "GT"


def _as_diag_vector(value, d: int, name: str) -> np.ndarray:
    """Accept a scalar, length-d vector or d x d diagonal matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(d, float(arr))
    if arr.ndim == 1:
        if arr.shape[0] != d:
            raise ValueError(f"{name}: expected length {d}, got {arr.shape[0]}")
        return arr.copy()
    if arr.ndim == 2 and arr.shape == (d, d):
        if np.any(arr - np.diag(np.diag(arr)) != 0.0):
            raise ValueError(f"{name}: matrix must be diagonal")
        return np.diag(arr).copy()
    raise ValueError(f"{name}: expected scalar, vector or diagonal matrix")


@dataclass(frozen=True)
class PlantParams:
    """Rendered impedance: inertia, damping, stiffness diagonals plus sample time."""

    d: int                    # translational DoFs
    m: np.ndarray             # inertia diagonal [kg]
    c: np.ndarray             # damping diagonal [N·s/m]
    k: np.ndarray             # stiffness diagonal [N/m]
    dt: float = 0.008         # sample time [s]

    def __init__(self, d: int = 2, m=10.0, c=100.0, k=0.0, dt: float = 0.008):
        if d < 1:
            raise ValueError("d must be >= 1")
        object.__setattr__(self, "d", int(d))
        object.__setattr__(self, "m", _as_diag_vector(m, d, "m"))
        object.__setattr__(self, "c", _as_diag_vector(c, d, "c"))
        object.__setattr__(self, "k", _as_diag_vector(k, d, "k"))
        object.__setattr__(self, "dt", float(dt))
        if np.any(self.m <= 0.0):
            raise ValueError("inertia diagonal must be positive")
        if np.any(self.c < 0.0) or np.any(self.k < 0.0):
            raise ValueError("damping and stiffness must be non-negative")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")

    @property
    def M(self) -> np.ndarray:
        return np.diag(self.m)

    @property
    def C(self) -> np.ndarray:
        return np.diag(self.c)

    @property
    def K(self) -> np.ndarray:
        return np.diag(self.k)

    def with_added_mass(self, extra_m) -> "PlantParams":
        """Plant carrying an extra rigid load (co-manipulated object)."""
        return PlantParams(self.d, self.m + _as_diag_vector(extra_m, self.d, "extra_m"),
                           self.c, self.k, self.dt)


@dataclass
class PlantState:
    """Position/velocity sample of the end-effector."""

    x: np.ndarray             # [m]
    v: np.ndarray             # [m/s]
    t: float = 0.0            # [s]

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.x, self.v])


def build_state_space(p: PlantParams):
    """State-space matrices of the impedance plant, z = [x, v].

    A = [[0, I], [-M^-1 K, -M^-1 C]];  B_h = B_r = [[0], [M^-1]].
    """
    d = p.d
    minv = 1.0 / p.m
    A = np.zeros((2 * d, 2 * d))
    A[:d, d:] = np.eye(d)
    A[d:, :d] = -np.diag(minv * p.k)
    A[d:, d:] = -np.diag(minv * p.c)
    B = np.zeros((2 * d, d))
    B[d:, :] = np.diag(minv)
    return A, B, B.copy()


def discretize(A: np.ndarray, B: np.ndarray, dt: float):
    """Exact zero-order-hold discretization via the augmented matrix exponential."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    n = A.shape[0]
    m = B.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A
    aug[:n, n:] = B
    ead = expm(aug * dt)
    return ead[:n, :n], ead[:n, n:]


# ---------------------------------------------------------------------------
# Reference trajectories.
#
# All shapes are parametrized by arc length s in [0, L] and traversed at
# constant speed L/duration.  The planar shapes live in the first two
# coordinates; remaining coordinates stay at the start value.
# ---------------------------------------------------------------------------

TRAJECTORY_KINDS = ("linear", "curved", "sinusoidal", "eval")


class _PathShape:
    """Arc-length parametrized planar path: point(s) and unit tangent(s)."""

    length: float

    def point2(self, s: float) -> tuple[float, float]:
        raise NotImplementedError

    def tangent2(self, s: float) -> tuple[float, float]:
        raise NotImplementedError


class _LinearShape(_PathShape):
    def __init__(self, length: float):
        self.length = length

    def point2(self, s):
        return s, 0.0

    def tangent2(self, s):
        return 1.0, 0.0


class _HalfArcShape(_PathShape):
    def __init__(self, radius: float):
        self.radius = radius
        self.length = math.pi * radius

    def point2(self, s):
        th = math.pi - s / self.radius
        return self.radius * (1.0 + math.cos(th)), self.radius * math.sin(th)

    def tangent2(self, s):
        th = math.pi - s / self.radius
        return math.sin(th), -math.cos(th)


class _SineShape(_PathShape):
    """y = amplitude * sin(2*pi*x / wavelength) over x in [0, span]."""

    _TABLE = 4096

    def __init__(self, amplitude: float, wavelength: float, span: float):
        self.amplitude = amplitude
        self.wavelength = wavelength
        self.span = span
        xs = np.linspace(0.0, span, self._TABLE)
        slope = self._slope(xs)
        ds = np.sqrt(1.0 + slope**2)
        # cumulative arc length by trapezoid; inverted by interpolation
        s_of_x = np.concatenate([[0.0], np.cumsum((ds[1:] + ds[:-1]) * 0.5 * np.diff(xs))])
        self._xs = xs
        self._s_of_x = s_of_x
        self.length = float(s_of_x[-1])

    def _slope(self, x):
        w = 2.0 * math.pi / self.wavelength
        return self.amplitude * w * np.cos(w * x)

    def point2(self, s):
        x = float(np.interp(s, self._s_of_x, self._xs))
        w = 2.0 * math.pi / self.wavelength
        return x, self.amplitude * math.sin(w * x)

    def tangent2(self, s):
        x = float(np.interp(s, self._s_of_x, self._xs))
        dy = float(self._slope(np.asarray(x)))
        n = math.hypot(1.0, dy)
        return 1.0 / n, dy / n


class _SCurveShape(_PathShape):
    """Two opposite quarter arcs: smooth S from (0,0) to (2r, 2r)."""

    def __init__(self, radius: float):
        self.radius = radius
        self.length = math.pi * radius

    def point2(self, s):
        r = self.radius
        half = self.length / 2.0
        if s <= half:
            th = 1.5 * math.pi + s / r
            return r * math.cos(th), r + r * math.sin(th)
        th = math.pi - (s - half) / r
        return 2.0 * r + r * math.cos(th), r + r * math.sin(th)

    def tangent2(self, s):
        r = self.radius
        half = self.length / 2.0
        if s <= half:
            th = 1.5 * math.pi + s / r
            return -math.sin(th), math.cos(th)
        th = math.pi - (s - half) / r
        return math.sin(th), -math.cos(th)


def _make_shape(kind: str, params: dict) -> _PathShape:
    if kind == "linear":
        return _LinearShape(params.get("length", 0.4))
    if kind == "curved":
        return _HalfArcShape(params.get("radius", 0.2))
    if kind == "sinusoidal":
        return _SineShape(params.get("amplitude", 0.05),
                          params.get("wavelength", 0.2),
                          params.get("span", 0.4))
    if kind == "eval":
        return _SCurveShape(params.get("radius", 0.1))
    raise ValueError(f"unknown trajectory kind: {kind!r} (expected one of {TRAJECTORY_KINDS})")


@dataclass
class TrajectorySpec:
    """Nominal robot reference: shape, start offset and traversal time."""

    kind: str
    d: int = 2
    start: np.ndarray | None = None
    duration: float = 10.0    # [s]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        if self.kind != "linear" and self.d < 2:
            raise ValueError(f"{self.kind} trajectory needs d >= 2")
        if self.start is None:
            self.start = np.zeros(self.d)
        else:
            self.start = np.asarray(self.start, dtype=float)
            if self.start.shape != (self.d,):
                raise ValueError("start must have length d")
        self._shape = _make_shape(self.kind, self.params)

    @property
    def arc_length(self) -> float:
        return self._shape.length

    @property
    def path_speed(self) -> float:
        return self._shape.length / self.duration

    def arc_position(self, t: float) -> float:
        """Arc coordinate at time t; clamps to the endpoint past the duration."""
        if t < 0.0:
            raise ValueError("t must be >= 0")
        return self._shape.length * min(t, self.duration) / self.duration

    def point_at_arc(self, s: float) -> np.ndarray:
        px, py = self._shape.point2(min(max(s, 0.0), self._shape.length))
        out = self.start.copy()
        out[0] += px
        if self.d >= 2:
            out[1] += py
        return out

    def tangent_at_arc(self, s: float) -> np.ndarray:
        tx, ty = self._shape.tangent2(min(max(s, 0.0), self._shape.length))
        out = np.zeros(self.d)
        out[0] = tx
        if self.d >= 2:
            out[1] = ty
        return out


def nominal_position(spec: TrajectorySpec, t: float) -> np.ndarray:
    """Nominal reference position at time t (clamped past the endpoint)."""
    return spec.point_at_arc(spec.arc_position(t))


def nominal_velocity(spec: TrajectorySpec, t: float) -> np.ndarray:
    """Nominal reference velocity; zero once the endpoint is reached."""
    if t < 0.0:
        raise ValueError("t must be >= 0")
    if t >= spec.duration:
        return np.zeros(spec.d)
    return spec.tangent_at_arc(spec.arc_position(t)) * spec.path_speed


@dataclass
class Obstacle:
    """Obstacle sitting on the nominal path at a fractional arc position."""

    center: np.ndarray        # [m]
    half_width: float         # [m]
    arc_fraction: float       # in the allowed placement band

    ARC_BAND = (0.25, 0.75)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.half_width <= 0.0:
            raise ValueError("half_width must be positive")
        lo, hi = self.ARC_BAND
        if not lo <= self.arc_fraction <= hi:
            raise ValueError(f"arc_fraction {self.arc_fraction} outside placement band [{lo}, {hi}]")


def place_obstacle(spec: TrajectorySpec, arc_fraction: float, half_width: float = 0.02) -> Obstacle:
    """Place an obstacle on the nominal path at the given arc fraction."""
    center = spec.point_at_arc(arc_fraction * spec.arc_length)
    return Obstacle(center=center, half_width=half_width, arc_fraction=arc_fraction)


def random_obstacle(spec: TrajectorySpec, rng: np.random.Generator,
                    half_width: float = 0.02) -> Obstacle:
    lo, hi = Obstacle.ARC_BAND
    return place_obstacle(spec, float(rng.uniform(lo, hi)), half_width)


@dataclass
class HumanModel:
    """PD reaction of the human limb plus the detour that shapes their intent.

    With relax_rate > 0 the rollout additionally scales the PD output by an
    effort factor that decays toward relax_floor while the intent is tracked
    well and recovers toward 1 when tracking degrades (see EffortState): a
    user eases off once the assistance proves accurate and re-engages when
    it does not.  The default relax_rate of 0 keeps the classic fixed-gain
    limb model.
    """

    d: int = 2
    k_h: np.ndarray = 300.0   # limb stiffness diagonal [N/m]
    c_h: np.ndarray = 30.0    # limb damping diagonal [N·s/m]
    detour_amplitude: float = 0.05   # lateral deviation peak [m]
    detour_sigma: float = 0.05       # bump width along the arc [m]
    force_cap: float = 30.0          # [N]
    relax_rate: float = 0.0          # effort adaptation rate [1/s]; 0 = off
    relax_floor: float = 0.25        # minimum effort scale when fully relaxed
    track_scale: float = 0.02        # [m] intent error restoring full effort
    wander_amplitude: float = 0.0    # [m] persistent lateral preference; 0 = off
    wander_wavelength: float = 0.35  # [m] of arc length
    wander_phase: float = 1.0        # [rad]

    def __post_init__(self):
        self.k_h = _as_diag_vector(self.k_h, self.d, "k_h")
        self.c_h = _as_diag_vector(self.c_h, self.d, "c_h")
        if np.any(self.k_h < 0.0) or np.any(self.c_h < 0.0):
            raise ValueError("human gains must be non-negative")
        if self.force_cap <= 0.0:
            raise ValueError("force_cap must be positive")
        if self.relax_rate < 0.0:
            raise ValueError("relax_rate must be non-negative")
        if not 0.0 < self.relax_floor <= 1.0:
            raise ValueError("relax_floor must lie in (0, 1]")
        if self.track_scale <= 0.0:
            raise ValueError("track_scale must be positive")
        if self.wander_amplitude < 0.0:
            raise ValueError("wander_amplitude must be non-negative")
        if self.wander_wavelength <= 0.0:
            raise ValueError("wander_wavelength must be positive")

    def scaled(self, gain_scale: float) -> "HumanModel":
        """A different user: same structure, gains scaled multiplicatively."""
        return replace(self, k_h=self.k_h * gain_scale, c_h=self.c_h * gain_scale)


class EffortState:
    """First-order effort adaptation of the synthetic human.

    The scale lambda starts at 1 (fully engaged) and relaxes toward a target
    set by how well the plant currently tracks the intent:

        target = floor + (1 - floor) * min(1, (|x - x_ref_h| / track_scale)^2)
        lambda <- lambda + dt * rate * (target - lambda)

    The quadratic ramp keeps a well-assisted user (error well under
    track_scale) near the floor while an unassisted user stays close to full
    effort.  Trust builds slowly but alarm is fast: when the target exceeds
    the current scale (tracking just degraded) the rate is ALARM_RATIO times
    relax_rate, so the user re-engages within a fraction of a second instead
    of being dragged through their intended detour.  A vigilance input in
    [0, 1] (obstacle proximity, see obstacle_vigilance) raises the target
    regardless of tracking quality: near the obstacle the user pays full
    attention and never cedes the avoidance to the robot, however smooth the
    ride.  Deterministic, so episodes remain bit-reproducible.
    """

    ALARM_RATIO = 5.0

    def __init__(self):
        self.scale = 1.0

    def advance(self, human: HumanModel, x: np.ndarray, x_ref_h: np.ndarray,
                dt: float, vigilance: float = 0.0) -> float:
        """Effort scale for the current step; updates the state afterwards."""
        out = self.scale
        if human.relax_rate > 0.0:
            err = float(np.linalg.norm(x - x_ref_h)) / human.track_scale
            drive = max(min(1.0, err * err), min(1.0, vigilance))
            target = human.relax_floor + (1.0 - human.relax_floor) * drive
            rate = human.relax_rate * (self.ALARM_RATIO if target > self.scale else 1.0)
            lam = self.scale + dt * rate * (target - self.scale)
            self.scale = min(1.0, max(human.relax_floor, lam))
        return out


def obstacle_vigilance(spec: TrajectorySpec, obstacle: Obstacle | None,
                       human: HumanModel, t: float) -> float:
    """How much attention the obstacle demands right now, in [0, 1].

    Follows the same arc-length Gaussian as the avoidance detour but half
    again as wide, so attention ramps up before the deviation starts.
    """
    if obstacle is None:
        return 0.0
    s = spec.arc_position(t)
    s_obs = obstacle.arc_fraction * spec.arc_length
    width = 1.5 * human.detour_sigma
    return math.exp(-0.5 * ((s - s_obs) / width) ** 2)


def human_intent(spec: TrajectorySpec, obstacle: Obstacle | None,
                 human: HumanModel, t: float) -> np.ndarray:
    """Trajectory the human wants to follow: nominal plus personal deviations.

    Two lateral terms ride on the local left normal of the path.  The
    avoidance detour is a Gaussian bump in arc length centered on the
    obstacle.  The wander term, when enabled, is a sinusoid in arc length:
    the user's persistent preference for a slightly different path than the
    programmed one (they never track the nominal exactly), which is what an
    intent model can learn and a stiff nominal-tracking assist fights.
    """
    pos = nominal_position(spec, t)
    lateral = 0.0
    s = spec.arc_position(t)
    if obstacle is not None:
        if spec.d < 2:
            raise ValueError("obstacle avoidance needs d >= 2")
        if human.detour_amplitude <= obstacle.half_width:
            raise ValueError("detour_amplitude must exceed the obstacle half_width")
        s_obs = obstacle.arc_fraction * spec.arc_length
        lateral += human.detour_amplitude * math.exp(
            -0.5 * ((s - s_obs) / human.detour_sigma) ** 2)
    if human.wander_amplitude > 0.0:
        if spec.d < 2:
            raise ValueError("path wander needs d >= 2")
        lateral += human.wander_amplitude * math.sin(
            2.0 * math.pi * s / human.wander_wavelength + human.wander_phase)
    if lateral == 0.0:
        return pos
    tan = spec.tangent_at_arc(s)
    normal = np.zeros(spec.d)
    normal[0] = -tan[1]
    normal[1] = tan[0]
    return pos + lateral * normal


def human_force(human: HumanModel, x: np.ndarray, v: np.ndarray,
                x_ref_h: np.ndarray) -> np.ndarray:
    """Attractive PD toward the intent, saturated at the force cap."""
    u = human.k_h * (x_ref_h - x) - human.c_h * v
    norm = float(np.linalg.norm(u))
    if norm > human.force_cap:
        u = u * (human.force_cap / norm)
    return u


# ---------------------------------------------------------------------------
# Episode rollout
# ---------------------------------------------------------------------------

@dataclass
class EpisodeMeta:
    """Everything needed to reproduce or reinterpret a recorded rollout."""

    plant: PlantParams
    spec: TrajectorySpec
    obstacle: Obstacle | None
    human_id: str
    model_id: str | None
    controller: str
    seed: int | None
    schema_version: int = SCHEMA_VERSION
    human: HumanModel | None = None
    context: str | None = None       # e.g. "new_user", "object"

    @property
    def kind(self) -> str:
        return self.spec.kind


@dataclass
class Episode:
    """Uniformly sampled record of one interaction rollout."""

    t: np.ndarray             # (L,) [s], exactly n*dt
    x: np.ndarray             # (L, d) measured position [m]
    v: np.ndarray             # (L, d) measured velocity [m/s]
    u_h: np.ndarray           # (L, d) human force [N]
    x_ref_r: np.ndarray       # (L, d) nominal robot reference [m]
    x_ref_h_true: np.ndarray  # (L, d) ground-truth intent [m]; NaN if unknown
    u_r: np.ndarray           # (L, d) robot assistive force [N]
    tag: str                  # controller tag for every record
    meta: EpisodeMeta

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def dt(self) -> float:
        return self.meta.plant.dt

    def features(self) -> np.ndarray:
        """Predictor input features, ordered (x, v, u_h, x_ref_r) -> (L, 4d)."""
        return np.hstack([self.x, self.v, self.u_h, self.x_ref_r])


class SimulationBlowup(RuntimeError):
    """State exceeded the configured bound; carries the partial episode."""

    def __init__(self, message: str, episode: Episode):
        super().__init__(message)
        self.episode = episode


class _RecordBuffer:
    def __init__(self, n: int, d: int):
        self.t = np.zeros(n)
        self.x = np.zeros((n, d))
        self.v = np.zeros((n, d))
        self.u_h = np.zeros((n, d))
        self.x_ref_r = np.zeros((n, d))
        self.x_ref_h_true = np.zeros((n, d))
        self.u_r = np.zeros((n, d))
        self.count = 0

    def push(self, t, x, v, u_h, x_ref_r, x_ref_h, u_r):
        i = self.count
        self.t[i] = t
        self.x[i] = x
        self.v[i] = v
        self.u_h[i] = u_h
        self.x_ref_r[i] = x_ref_r
        self.x_ref_h_true[i] = x_ref_h
        self.u_r[i] = u_r
        self.count += 1

    def to_episode(self, tag: str, meta: EpisodeMeta) -> Episode:
        n = self.count
        return Episode(self.t[:n].copy(), self.x[:n].copy(), self.v[:n].copy(),
                       self.u_h[:n].copy(), self.x_ref_r[:n].copy(),
                       self.x_ref_h_true[:n].copy(), self.u_r[:n].copy(), tag, meta)


class PlantStepper:
    """Exact ZOH stepping of the impedance plant; inputs held over each dt.

    The total force input per step is u_h + u_r + K*x_anchor, where x_anchor
    is the spring equilibrium (the moving nominal reference for impedance
    control; irrelevant when the stiffness is zero).
    """

    def __init__(self, plant: PlantParams):
        self.plant = plant
        A, B, _ = build_state_space(plant)
        self.A = A
        self.A_d, self.B_d = discretize(A, B, plant.dt)

    def step(self, z: np.ndarray, force: np.ndarray) -> np.ndarray:
        return self.A_d @ z + self.B_d @ force


class StepEngine:
    """One control step of the robot side: reference, assistance, plant update.

    The offline rollout and the live service both drive this class, so a
    recording replayed through simulate_episode retraces the exact same
    floating-point sequence.  The caller supplies the human force each step;
    everything else (nominal reference, predictor window, game feedback, ZOH
    plant update) happens here.
    """

    def __init__(self, plant: PlantParams, spec: TrajectorySpec, controller,
                 predictor=None, blowup_limit: float = 50.0):
        if spec.d != plant.d:
            raise ValueError("trajectory and plant dimension mismatch")
        self.is_game = not isinstance(controller, str)
        self.tag = GAME if self.is_game else controller
        if self.tag not in (MANUAL_GUIDANCE, IMPEDANCE, GAME):
            raise ValueError(f"unknown controller {controller!r}")
        self.plant = plant
        self.spec = spec
        self.controller = controller
        self.predictor = predictor
        self.blowup_limit = blowup_limit
        self.stepper = PlantStepper(plant)
        if self.is_game and not np.allclose(controller.A, self.stepper.A,
                                            atol=1e-12):
            raise ValueError("game controller was built for a different plant")
        d = plant.d
        self.pick = controller.pick_index if self.is_game else 1
        self.window = None
        if self.is_game and predictor is not None:
            self.window = np.zeros((predictor.config.window_k, 4 * d))
        self.z = np.concatenate([spec.start, np.zeros(d)])
        self.step_index = 0
        self.last_prediction = None       # (N, d) when a predictor runs
        self.diverged: str | None = None

    @property
    def d(self) -> int:
        return self.plant.d

    @property
    def t(self) -> float:
        return self.step_index * self.plant.dt

    @property
    def x(self) -> np.ndarray:
        return self.z[:self.plant.d]

    @property
    def v(self) -> np.ndarray:
        return self.z[self.plant.d:]

    @property
    def n_steps(self) -> int:
        return math.ceil(self.spec.duration / self.plant.dt)

    @property
    def finished(self) -> bool:
        return self.step_index >= self.n_steps

    def step(self, u_h: np.ndarray):
        """Advance one sample; returns (t, x, v, u_h, x_ref_r, u_r) as recorded.

        The returned position/velocity are the pre-step values the forces
        acted on.  Sets ``diverged`` when the new state leaves the bound.
        """
        from . import control as _control  # control depends on dynamics

        d = self.plant.d
        dt = self.plant.dt
        t = self.step_index * dt
        z = self.z
        x = z[:d]
        v = z[d:]
        u_h = np.asarray(u_h, dtype=float)
        x_ref_r = nominal_position(self.spec, t)

        if self.is_game:
            t_pick = t + self.pick * dt
            z_nom = np.concatenate([nominal_position(self.spec, t_pick),
                                    nominal_velocity(self.spec, t_pick)])
            if self.predictor is not None:
                feats = np.concatenate([x, v, u_h, x_ref_r])
                if self.step_index == 0:
                    self.window[:] = feats     # replicate the first sample
                else:
                    self.window[:-1] = self.window[1:]
                    self.window[-1] = feats
                pred = self.predictor.predict(self.window)
                self.last_prediction = pred
                z_ref_h = _control.reference_from_prediction(pred, x, self.pick, dt)
            else:
                # No model yet: the nominal path stands in for the human
                # intent, routed through the same pick/backward-difference
                # arithmetic as a real prediction so that a predictor emitting
                # the nominal is bit-identical to this bootstrap.
                pos = z_nom[:d]
                prev = (x if self.pick == 1 else
                        nominal_position(self.spec, t + (self.pick - 1) * dt))
                z_ref_h = np.concatenate([pos, (pos - prev) / dt])
            z_ref = _control.shared_reference(z_ref_h, z_nom, self.controller)
            u_r = _control.robot_action(self.controller, z, z_ref)
        else:
            u_r = np.zeros(d)

        record = (t, x.copy(), v.copy(), u_h, x_ref_r, u_r)
        force = u_h + u_r + self.plant.k * x_ref_r  # spring anchored at the nominal
        self.z = self.stepper.step(z, force)
        self.step_index += 1
        if not np.all(np.isfinite(self.z)) or np.max(np.abs(self.z)) > self.blowup_limit:
            self.diverged = (f"state exceeded {self.blowup_limit} at step "
                             f"{self.step_index} (max |z| = "
                             f"{np.max(np.abs(self.z)):.3g})")
        return record


def simulate_episode(plant: PlantParams, spec: TrajectorySpec, obstacle: Obstacle | None,
                     human: HumanModel | None, controller, predictor=None, seed: int = 0,
                     *, force_noise_sigma: float = 0.0, blowup_limit: float = 50.0,
                     force_sequence: np.ndarray | None = None,
                     human_id: str = "synthetic", model_id: str | None = None,
                     context: str | None = None) -> Episode:
    """Fixed-step closed-loop rollout of one trajectory.

    ``controller`` is "MG", "IMP" or a game controller object (from
    control.build_game_controller).  For the game controller, ``predictor``
    supplies the intent estimate; without one the nominal reference stands in
    (the data-collection bootstrap).  ``force_sequence`` replays logged human
    forces instead of evaluating the synthetic human.

    Raises SimulationBlowup (partial episode attached) if any state component
    exceeds ``blowup_limit``.
    """
    if force_sequence is None and human is None:
        raise ValueError("need a human model or a replay force sequence")
    engine = StepEngine(plant, spec, controller, predictor=predictor,
                        blowup_limit=blowup_limit)
    d = plant.d
    n_steps = engine.n_steps
    rng = np.random.default_rng(seed)
    effort = EffortState()
    buf = _RecordBuffer(n_steps, d)
    meta = EpisodeMeta(plant=plant, spec=spec, obstacle=obstacle, human_id=human_id,
                       model_id=model_id, controller=engine.tag, seed=seed,
                       human=human, context=context)

    for n in range(n_steps):
        t = n * plant.dt
        if force_sequence is not None:
            u_h = np.asarray(force_sequence[n], dtype=float)
            x_int = np.full(d, np.nan)
        else:
            x_int = human_intent(spec, obstacle, human, t)
            u_h = human_force(human, engine.x, engine.v, x_int)
            if force_noise_sigma > 0.0:
                u_h = u_h + rng.normal(0.0, force_noise_sigma, size=d)
            vig = obstacle_vigilance(spec, obstacle, human, t)
            u_h = effort.advance(human, engine.x, x_int, plant.dt, vig) * u_h

        rec_t, x, v, u_h, x_ref_r, u_r = engine.step(u_h)
        buf.push(rec_t, x, v, u_h, x_ref_r, x_int, u_r)
        if engine.diverged is not None:
            raise SimulationBlowup(engine.diverged, buf.to_episode(engine.tag, meta))

    return buf.to_episode(engine.tag, meta)
