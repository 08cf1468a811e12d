"""Shared fixtures and stand-ins for the unit suites."""

from dataclasses import dataclass

import numpy as np

from coassist.dynamics import TrajectorySpec, nominal_position


@dataclass
class _StubConfig:
    window_k: int
    horizon: int
    dof: int


class NominalPredictor:
    """Predictor facade that emits the nominal path for the next N samples.

    Row i of each prediction is the nominal position at t + (i+1)*dt, computed
    with the same arithmetic as the engine's no-model bootstrap, so a rollout
    with this stub must be bit-identical to one with predictor=None.  The stub
    counts calls to know the current step; the engine queries it exactly once
    per control step, in order.
    """

    def __init__(self, spec: TrajectorySpec, dt: float, window_k: int = 20,
                 horizon: int = 50):
        self.spec = spec
        self.dt = dt
        self.config = _StubConfig(window_k=window_k, horizon=horizon, dof=spec.d)
        self.model_id = "nominal-stub"
        self._n = 0

    def predict(self, window: np.ndarray) -> np.ndarray:
        t = self._n * self.dt
        self._n += 1
        return np.stack([nominal_position(self.spec, t + (i + 1) * self.dt)
                         for i in range(self.config.horizon)])

    def reset(self):
        self._n = 0


class ConstantPredictor:
    """Predicts a fixed point regardless of the window contents."""

    def __init__(self, point, window_k: int = 20, horizon: int = 50):
        self.point = np.asarray(point, dtype=float)
        self.config = _StubConfig(window_k=window_k, horizon=horizon,
                                  dof=self.point.size)
        self.model_id = "constant-stub"

    def predict(self, window: np.ndarray) -> np.ndarray:
        return np.tile(self.point, (self.config.horizon, 1))
