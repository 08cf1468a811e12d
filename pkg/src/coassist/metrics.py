"""Prediction-error and effort metrics, plus the controller comparison study."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import stdtr

from .dynamics import (IMPEDANCE, MANUAL_GUIDANCE, GAME, HumanModel, PlantParams,
                       TrajectorySpec, random_obstacle, simulate_episode)


def _window_rms(pred: np.ndarray, actual: np.ndarray, horizon: int | None) -> np.ndarray:
    """Per-window RMS position error over the first ``horizon`` predicted steps."""
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match "
                         f"target shape {actual.shape}")
    n = pred.shape[1]
    h = n if horizon is None else int(horizon)
    if not 1 <= h <= n:
        raise ValueError(f"horizon {h} outside 1..{n}")
    sq = np.sum((pred[:, :h] - actual[:, :h]) ** 2, axis=2)
    return np.sqrt(np.mean(sq, axis=1))


def e_rms(pred: np.ndarray, actual: np.ndarray, horizon: int | None = None) -> float:
    """Mean over windows of the per-window RMS error [m]."""
    return float(np.mean(_window_rms(pred, actual, horizon)))


def e_max(pred: np.ndarray, actual: np.ndarray, horizon: int | None = None) -> float:
    """Worst window's RMS error [m]."""
    return float(np.max(_window_rms(pred, actual, horizon)))


def f_rms(forces: np.ndarray) -> float:
    """Root mean square of the force norm over an episode [N]."""
    forces = np.atleast_2d(np.asarray(forces, dtype=float))
    return float(np.sqrt(np.mean(np.sum(forces ** 2, axis=1))))


@dataclass
class WelchResult:
    statistic: float
    dof: float
    p_value: float
    alternative: str


def welch_t_test(a, b, alternative: str = "two-sided") -> WelchResult:
    """Welch's unequal-variance t-test.

    ``alternative`` "less" tests mean(a) < mean(b).  The p-value comes from
    the t distribution CDF with Welch-Satterthwaite degrees of freedom.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ValueError("need at least two samples per group")
    va = a.var(ddof=1) / na
    vb = b.var(ddof=1) / nb
    denom = np.sqrt(va + vb)
    if denom == 0.0:
        raise ValueError("zero variance in both groups")
    t = (a.mean() - b.mean()) / denom
    dof = (va + vb) ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
    if alternative == "less":
        p = float(stdtr(dof, t))
    elif alternative == "greater":
        p = float(stdtr(dof, -t))
    elif alternative == "two-sided":
        p = float(2.0 * stdtr(dof, -abs(t)))
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return WelchResult(statistic=float(t), dof=float(dof), p_value=p,
                       alternative=alternative)


def impedance_variant(plant: PlantParams, stiffness: float = 200.0,
                      damping_ratio: float = 0.9) -> PlantParams:
    """Passive impedance rendering: stiff spring to the reference, near-critical
    damping, no active assistance."""
    k = np.full(plant.d, float(stiffness))
    c = damping_ratio * 2.0 * np.sqrt(k * plant.m)
    return PlantParams(d=plant.d, m=plant.m, c=c, k=k, dt=plant.dt)


@dataclass
class ComparisonResult:
    """Matched-seed effort comparison across the three operating modes."""

    f_rms: dict               # tag -> (n_episodes,) array [N]
    tests: dict               # (tag_a, tag_b) -> WelchResult, two-sided
    n_episodes: int

    def mean(self, tag: str) -> float:
        return float(np.mean(self.f_rms[tag]))

    def rows(self) -> list:
        """Long-format per-episode rows for the CSV export."""
        return [{"controller": tag, "episode": i, "f_rms": self.f_rms[tag][i]}
                for tag in sorted(self.f_rms)
                for i in range(self.n_episodes)]


def compare_controllers(plant: PlantParams, controller, human: HumanModel,
                        n_episodes: int, seed: int, *, predictor,
                        kinds=("linear", "curved", "sinusoidal"),
                        duration: float = 10.0, force_noise_sigma: float = 0.0,
                        imp_stiffness: float = 200.0,
                        imp_damping_ratio: float = 0.9) -> ComparisonResult:
    """Human effort under manual guidance, passive impedance and game assistance.

    Every arm replays the same episode setup (trajectory, obstacle, human,
    noise seed); only the robot side changes.  Manual guidance and the game
    controller share the zero-stiffness plant, the impedance arm renders the
    stiff variant.  The game arm runs with the trained model in the loop and
    is skipped entirely when ``predictor`` is None (baselines only).
    """
    if n_episodes < 2:
        raise ValueError("need at least two episodes for the comparison")
    imp_plant = impedance_variant(plant, imp_stiffness, imp_damping_ratio)
    arms = {MANUAL_GUIDANCE: (plant, MANUAL_GUIDANCE, None),
            IMPEDANCE: (imp_plant, IMPEDANCE, None)}
    if predictor is not None:
        arms[GAME] = (plant, controller, predictor)
    forces = {tag: np.empty(n_episodes) for tag in arms}
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    for i, child in enumerate(children):
        s_obs, s_sim = (int(v) for v in child.generate_state(2))
        spec = TrajectorySpec(kinds[i % len(kinds)], d=plant.d, duration=duration)
        obstacle = random_obstacle(spec, np.random.default_rng(s_obs))
        for tag, (arm_plant, ctrl, pred) in arms.items():
            ep = simulate_episode(arm_plant, spec, obstacle, human, ctrl,
                                  predictor=pred, seed=s_sim,
                                  force_noise_sigma=force_noise_sigma)
            forces[tag][i] = f_rms(ep.u_h)
    pairs = [(MANUAL_GUIDANCE, IMPEDANCE)]
    if predictor is not None:
        pairs = [(GAME, MANUAL_GUIDANCE), (GAME, IMPEDANCE)] + pairs
    tests = {pair: welch_t_test(forces[pair[0]], forces[pair[1]])
             for pair in pairs}
    return ComparisonResult(f_rms=forces, tests=tests, n_episodes=n_episodes)


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    """Plain CSV with repr-formatted floats, so identical runs write identical
    bytes."""
    if columns is None:
        columns = list(rows[0].keys()) if rows else []

    def fmt(v):
        # np.float64 subclasses float but reprs as "np.float64(...)", so
        # numpy scalars must be unwrapped before the plain-float branch.
        if isinstance(v, np.floating):
            return repr(float(v))
        if isinstance(v, np.integer):
            return str(int(v))
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(row.get(c, "")) for c in columns) + "\n")
