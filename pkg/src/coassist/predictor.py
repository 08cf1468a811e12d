"""Recurrent intent predictor.

Stacked LSTM over a sliding window of interaction features, with a small
tanh head that emits the next N positions in one shot.  Forward pass,
backpropagation through time and the Adam update are written out explicitly
in numpy (float64) so the gradients can be verified against finite
differences and the update rule can honor per-block freeze masks during
transfer learning.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

SCHEMA_VERSION = 1
FREEZE_POLICIES = ("none", "freeze_recurrent")


class ModelFormatError(ValueError):
    """Serialized model is missing sections or has wrong shapes."""


class NonFiniteLossError(FloatingPointError):
    """Training produced NaN or inf; carries the offending batch row."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


@dataclass(frozen=True)
class PredictorConfig:
    input_features: int       # features per timestep, 4 * dof
    window_k: int             # lookback length k
    horizon: int              # predicted steps N
    dof: int                  # workspace dimension d
    recurrent_layers: int = 3
    hidden_size: int = 250
    fc_hidden: int = 128

    def __post_init__(self):
        for name in ("input_features", "window_k", "horizon", "dof",
                     "recurrent_layers", "hidden_size", "fc_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.input_features != 4 * self.dof:
            raise ValueError("input_features must equal 4 * dof "
                             "(position, velocity, human force, robot reference)")

    @property
    def output_size(self) -> int:
        return self.horizon * self.dof


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: stable for large |x| and a single vectorized pass
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def param_shapes(cfg: PredictorConfig) -> dict[str, tuple[int, ...]]:
    """Canonical block names and shapes, in declaration order."""
    h = cfg.hidden_size
    shapes: dict[str, tuple[int, ...]] = {}
    f_in = cfg.input_features
    for layer in range(cfg.recurrent_layers):
        shapes[f"lstm{layer}.w_x"] = (4 * h, f_in)
        shapes[f"lstm{layer}.w_h"] = (4 * h, h)
        shapes[f"lstm{layer}.b"] = (4 * h,)
        f_in = h
    shapes["head.w1"] = (cfg.fc_hidden, h)
    shapes["head.b1"] = (cfg.fc_hidden,)
    shapes["head.w2"] = (cfg.output_size, cfg.fc_hidden)
    shapes["head.b2"] = (cfg.output_size,)
    return shapes


def init_params(cfg: PredictorConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(-s, s) with s = sqrt(1/fan_in) per block; forget bias starts at 1."""
    rng = np.random.default_rng(seed)
    h = cfg.hidden_size
    params: dict[str, np.ndarray] = {}
    f_in = cfg.input_features
    for layer in range(cfg.recurrent_layers):
        sx = (1.0 / f_in) ** 0.5
        sh = (1.0 / h) ** 0.5
        params[f"lstm{layer}.w_x"] = rng.uniform(-sx, sx, size=(4 * h, f_in))
        params[f"lstm{layer}.w_h"] = rng.uniform(-sh, sh, size=(4 * h, h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        params[f"lstm{layer}.b"] = b
        f_in = h
    s1 = (1.0 / h) ** 0.5
    s2 = (1.0 / cfg.fc_hidden) ** 0.5
    params["head.w1"] = rng.uniform(-s1, s1, size=(cfg.fc_hidden, h))
    params["head.b1"] = np.zeros(cfg.fc_hidden)
    params["head.w2"] = rng.uniform(-s2, s2, size=(cfg.output_size, cfg.fc_hidden))
    params["head.b2"] = np.zeros(cfg.output_size)
    return params


def _forward(cfg: PredictorConfig, params: dict[str, np.ndarray], x: np.ndarray,
             need_cache: bool):
    """Run the network on a normalized batch (B, k, F).

    Returns (out, cache) with out of shape (B, horizon * dof).  The per-layer
    input transform is one big GEMM over all timesteps; only the recurrent
    term runs step by step.
    """
    b, k, _ = x.shape
    h = cfg.hidden_size
    need_layers = need_cache is True       # "head" caches activations only
    layers = []
    inp = x
    for layer in range(cfg.recurrent_layers):
        w_x = params[f"lstm{layer}.w_x"]
        w_h = params[f"lstm{layer}.w_h"]
        bias = params[f"lstm{layer}.b"]
        pre_x = inp.reshape(b * k, -1) @ w_x.T
        pre_x = pre_x.reshape(b, k, 4 * h) + bias
        hs = np.zeros((b, k, h))
        # gate layout (i, f, o, g): one sigmoid over the first three blocks
        sg = np.empty((b, k, 3 * h)) if need_layers else None
        gg = np.empty((b, k, h)) if need_layers else None
        cs = np.empty((b, k, h)) if need_layers else None
        tc = np.empty((b, k, h)) if need_layers else None
        h_t = np.zeros((b, h))
        c_t = np.zeros((b, h))
        for t in range(k):
            pre = pre_x[:, t] + h_t @ w_h.T
            s_t = _sigmoid(pre[:, :3 * h])
            g_t = np.tanh(pre[:, 3 * h:])
            c_t = s_t[:, h:2 * h] * c_t + s_t[:, :h] * g_t
            tc_t = np.tanh(c_t)
            h_t = s_t[:, 2 * h:] * tc_t
            hs[:, t] = h_t
            if need_layers:
                sg[:, t] = s_t
                gg[:, t] = g_t
                cs[:, t] = c_t
                tc[:, t] = tc_t
        if need_layers:
            layers.append({"x": inp, "h": hs, "s": sg, "g": gg, "c": cs,
                           "tc": tc})
        inp = hs
    h_top = inp[:, -1]
    a1 = h_top @ params["head.w1"].T + params["head.b1"]
    z1 = np.tanh(a1)
    out = z1 @ params["head.w2"].T + params["head.b2"]
    cache = None
    if need_cache:
        cache = {"layers": layers, "h_top": h_top, "z1": z1}
    return out, cache


def forward_loss(cfg: PredictorConfig, params: dict[str, np.ndarray],
                 x: np.ndarray, y: np.ndarray) -> float:
    """Mean squared error over a normalized batch, no gradients."""
    out, _ = _forward(cfg, params, np.asarray(x, dtype=float), need_cache=False)
    diff = out - y.reshape(out.shape)
    return float(np.mean(diff * diff))


def loss_and_gradients(cfg: PredictorConfig, params: dict[str, np.ndarray],
                       x: np.ndarray, y: np.ndarray, frozen=frozenset()):
    """MSE loss plus exact gradients for every parameter block.

    x: (B, k, F) normalized windows, y: (B, N*dof) normalized targets.
    Blocks named in ``frozen`` get no gradient entry; when every recurrent
    block is frozen the backward pass stops after the head (head gradients
    only need the cached forward activations, so the result is unchanged).
    Raises NonFiniteLossError when the loss or any gradient blows up.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(x.shape[0], -1)
    recurrent_names = [name for name in params if name.startswith("lstm")]
    skip_recurrent = bool(frozen) and all(name in frozen for name in recurrent_names)
    out, cache = _forward(cfg, params, x, need_cache="head" if skip_recurrent else True)
    diff = out - y
    per_sample = np.mean(diff * diff, axis=1)
    loss = float(np.mean(per_sample))
    if not np.isfinite(loss):
        bad = int(np.flatnonzero(~np.isfinite(per_sample))[0]) \
            if np.any(~np.isfinite(per_sample)) else 0
        raise NonFiniteLossError(f"non-finite loss at batch index {bad}", bad)

    b, k, _ = x.shape
    h = cfg.hidden_size
    grads: dict[str, np.ndarray] = {}

    d_out = (2.0 / diff.size) * diff
    z1 = cache["z1"]
    grads["head.w2"] = d_out.T @ z1
    grads["head.b2"] = d_out.sum(axis=0)
    d_z1 = d_out @ params["head.w2"]
    d_a1 = d_z1 * (1.0 - z1 * z1)
    grads["head.w1"] = d_a1.T @ cache["h_top"]
    grads["head.b1"] = d_a1.sum(axis=0)

    if skip_recurrent:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteLossError(f"non-finite gradient in block {name}")
        return loss, grads

    # gradient w.r.t. each layer's hidden sequence; only the last step of the
    # top layer is driven by the head
    d_h_seq = np.zeros((b, k, h))
    d_h_seq[:, -1] = d_a1 @ params["head.w1"]

    for layer in range(cfg.recurrent_layers - 1, -1, -1):
        lc = cache["layers"][layer]
        w_h = params[f"lstm{layer}.w_h"]
        w_x = params[f"lstm{layer}.w_x"]
        sg, gg, cs, tc, hs = lc["s"], lc["g"], lc["c"], lc["tc"], lc["h"]
        d_pre = np.empty((b, k, 4 * h))
        d_sig = np.empty((b, 3 * h))
        d_c = np.zeros((b, h))
        d_h_rec = np.zeros((b, h))
        for t in range(k - 1, -1, -1):
            s_t = sg[:, t]
            tc_t = tc[:, t]
            d_h = d_h_seq[:, t] + d_h_rec
            d_c = d_c + d_h * s_t[:, 2 * h:] * (1.0 - tc_t * tc_t)
            c_prev = cs[:, t - 1] if t > 0 else 0.0
            d_sig[:, :h] = d_c * gg[:, t]             # input gate
            d_sig[:, h:2 * h] = d_c * c_prev          # forget gate
            d_sig[:, 2 * h:] = d_h * tc_t             # output gate
            d_pre[:, t, :3 * h] = d_sig * s_t * (1.0 - s_t)
            d_pre[:, t, 3 * h:] = d_c * s_t[:, :h] * (1.0 - gg[:, t] ** 2)
            d_h_rec = d_pre[:, t] @ w_h
            d_c = d_c * s_t[:, h:2 * h]
        flat_pre = d_pre.reshape(b * k, 4 * h)
        grads[f"lstm{layer}.w_x"] = flat_pre.T @ lc["x"].reshape(b * k, -1)
        grads[f"lstm{layer}.b"] = flat_pre.sum(axis=0)
        d_wh = d_pre[:, 1:].reshape(b * (k - 1), 4 * h).T \
            @ hs[:, :-1].reshape(b * (k - 1), h) if k > 1 \
            else np.zeros((4 * h, h))
        grads[f"lstm{layer}.w_h"] = d_wh
        if layer > 0:
            d_h_seq = (flat_pre @ w_x).reshape(b, k, h)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"non-finite gradient in block {name}")
    return loss, grads


@dataclass
class Normalization:
    """Feature and target statistics for whitening (all scales must be > 0)."""

    x_mean: np.ndarray        # (input_features,)
    x_std: np.ndarray         # (input_features,)
    y_mean: np.ndarray        # (dof,) per output coordinate
    y_std: np.ndarray         # (dof,)

    def __post_init__(self):
        self.x_mean = np.asarray(self.x_mean, dtype=float)
        self.x_std = np.asarray(self.x_std, dtype=float)
        self.y_mean = np.asarray(self.y_mean, dtype=float)
        self.y_std = np.asarray(self.y_std, dtype=float)
        if np.any(self.x_std <= 0) or np.any(self.y_std <= 0):
            raise ValueError("normalization scales must be strictly positive")

    @classmethod
    def identity(cls, cfg: PredictorConfig) -> "Normalization":
        return cls(np.zeros(cfg.input_features), np.ones(cfg.input_features),
                   np.zeros(cfg.dof), np.ones(cfg.dof))

    def norm_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def norm_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    def denorm_y(self, yn: np.ndarray) -> np.ndarray:
        return yn * self.y_std + self.y_mean


@dataclass
class PredictorModel:
    """Config, parameters and whitening stats; the unit the pipeline ships around."""

    config: PredictorConfig
    params: dict[str, np.ndarray]
    norm: Normalization
    model_id: str = ""

    def predict(self, window: np.ndarray) -> np.ndarray:
        """One raw window (k, F) of features to (N, dof) predicted positions."""
        window = np.asarray(window, dtype=float)
        if window.shape != (self.config.window_k, self.config.input_features):
            raise ValueError(f"window shape {window.shape} does not match "
                             f"({self.config.window_k}, {self.config.input_features})")
        xn = self.norm.norm_x(window)[None]
        out, _ = _forward(self.config, self.params, xn, need_cache=False)
        yn = out.reshape(self.config.horizon, self.config.dof)
        return self.norm.denorm_y(yn)

    def predict_batch(self, windows: np.ndarray) -> np.ndarray:
        """(B, k, F) raw windows to (B, N, dof) predicted positions."""
        xn = self.norm.norm_x(np.asarray(windows, dtype=float))
        out, _ = _forward(self.config, self.params, xn, need_cache=False)
        yn = out.reshape(-1, self.config.horizon, self.config.dof)
        return yn * self.norm.y_std + self.norm.y_mean

    def copy(self) -> "PredictorModel":
        return PredictorModel(config=self.config,
                              params={k: v.copy() for k, v in self.params.items()},
                              norm=Normalization(self.norm.x_mean.copy(),
                                                 self.norm.x_std.copy(),
                                                 self.norm.y_mean.copy(),
                                                 self.norm.y_std.copy()),
                              model_id=self.model_id)


def init_model(cfg: PredictorConfig, seed: int = 0,
               norm: Normalization | None = None) -> PredictorModel:
    params = init_params(cfg, seed)
    if norm is None:
        norm = Normalization.identity(cfg)
    model = PredictorModel(config=cfg, params=params, norm=norm)
    model.model_id = params_digest(model)[:12]
    return model


def params_digest(model: PredictorModel) -> str:
    """SHA-256 over every parameter byte, for bit-identity checks."""
    digest = hashlib.sha256()
    for name in sorted(model.params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(model.params[name]).tobytes())
    return digest.hexdigest()


@dataclass
class TrainState:
    """Adam moments plus the set of frozen parameter blocks."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    freeze: frozenset = frozenset()
    policy: str = "none"


def new_train_state(model: PredictorModel) -> TrainState:
    return TrainState(m={k: np.zeros_like(p) for k, p in model.params.items()},
                      v={k: np.zeros_like(p) for k, p in model.params.items()})


def set_freeze(state: TrainState, policy: str, model: PredictorModel) -> TrainState:
    if policy not in FREEZE_POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}; "
                         f"expected one of {FREEZE_POLICIES}")
    if policy == "freeze_recurrent":
        state.freeze = frozenset(k for k in model.params if k.startswith("lstm"))
    else:
        state.freeze = frozenset()
    state.policy = policy
    return state


def optimizer_step(model: PredictorModel, grads: dict[str, np.ndarray],
                   state: TrainState, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update; frozen blocks keep both parameters and moments."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in model.params.items():
        if name in state.freeze:
            continue
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def trainable_counts(model: PredictorModel, state: TrainState) -> tuple[int, int]:
    """(trainable, total) parameter counts under the current freeze mask."""
    total = sum(p.size for p in model.params.values())
    trainable = sum(p.size for k, p in model.params.items() if k not in state.freeze)
    return trainable, total


def _hex_list(arr: np.ndarray) -> list[str]:
    return [float(v).hex() for v in np.asarray(arr, dtype=float).reshape(-1)]


def _from_hex(values, shape, name: str) -> np.ndarray:
    try:
        arr = np.array([float.fromhex(v) for v in values], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad float encoding in {name}: {exc}") from None
    if arr.size != int(np.prod(shape)):
        raise ModelFormatError(f"{name}: expected {tuple(shape)} "
                               f"({int(np.prod(shape))} values), got {arr.size}")
    return arr.reshape(shape)


def save_model(model: PredictorModel, path) -> None:
    """Bit-exact JSON serialization (floats stored as C99 hex strings)."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "intent-predictor",
        "model_id": model.model_id,
        "config": asdict(model.config),
        "normalization": {
            "x_mean": _hex_list(model.norm.x_mean),
            "x_std": _hex_list(model.norm.x_std),
            "y_mean": _hex_list(model.norm.y_mean),
            "y_std": _hex_list(model.norm.y_std),
        },
        "params": {name: {"shape": list(p.shape), "data": _hex_list(p)}
                   for name, p in sorted(model.params.items())},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path) -> PredictorModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not valid JSON ({exc})") from None
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ModelFormatError(f"{path}: schema_version {version!r}, "
                               f"expected {SCHEMA_VERSION}")
    for section in ("config", "normalization", "params"):
        if section not in doc:
            raise ModelFormatError(f"{path}: missing section {section!r}")
    try:
        cfg = PredictorConfig(**doc["config"])
    except TypeError as exc:
        raise ModelFormatError(f"{path}: bad config ({exc})") from None
    ns = doc["normalization"]
    for key in ("x_mean", "x_std", "y_mean", "y_std"):
        if key not in ns:
            raise ModelFormatError(f"{path}: normalization missing {key!r}")
    norm = Normalization(
        x_mean=_from_hex(ns["x_mean"], (cfg.input_features,), "x_mean"),
        x_std=_from_hex(ns["x_std"], (cfg.input_features,), "x_std"),
        y_mean=_from_hex(ns["y_mean"], (cfg.dof,), "y_mean"),
        y_std=_from_hex(ns["y_std"], (cfg.dof,), "y_std"))
    expected = param_shapes(cfg)
    params: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        if name not in doc["params"]:
            raise ModelFormatError(f"{path}: missing parameter block {name!r}")
        entry = doc["params"][name]
        if tuple(entry.get("shape", ())) != shape:
            raise ModelFormatError(f"{path}: {name} shape {entry.get('shape')} "
                                   f"does not match {list(shape)}")
        params[name] = _from_hex(entry["data"], shape, name)
    extra = set(doc["params"]) - set(expected)
    if extra:
        raise ModelFormatError(f"{path}: unknown parameter blocks {sorted(extra)}")
    return PredictorModel(config=cfg, params=params, norm=norm,
                          model_id=doc.get("model_id", ""))
