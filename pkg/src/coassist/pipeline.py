"""Dataset construction and the retraining loops around the predictor.

Covers the full offline path: roll out episodes, slice them into sliding
windows, fit whitening stats once on the bootstrap data, train, then
alternate collect/retrain with the current model in the loop.  Transfer to a
new context reuses the recurrent stack and fine-tunes the head only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import control, metrics
from .dynamics import (GAME, Episode, HumanModel, PlantParams,
                       SimulationBlowup, TrajectorySpec, random_obstacle,
                       simulate_episode)
from .predictor import (Normalization, PredictorConfig, PredictorModel,
                        init_model, loss_and_gradients, new_train_state,
                        optimizer_step, params_digest, set_freeze,
                        trainable_counts)

TRAIN_KINDS = ("linear", "curved", "sinusoidal")
TRANSFER_CONTEXTS = ("new_trajectory", "new_user", "object")
TARGET_MODES = ("measured", "intent")


def make_windows(episode: Episode, k: int, horizon: int,
                 target: str = "measured"):
    """Slice one episode into (inputs, targets).

    Window ending at sample T (1-based, T in [k, L-N]) uses feature rows
    T-k+1..T and targets rows T+1..T+N, giving L-k-N+1 windows.  An episode
    shorter than k+N yields zero windows, not an error.  Targets are the
    measured positions by default; "intent" trains on the ground-truth
    reference instead (synthetic data only).
    """
    if target not in TARGET_MODES:
        raise ValueError(f"target must be one of {TARGET_MODES}")
    length = len(episode)
    count = max(0, length - k - horizon + 1)
    feats = episode.features()
    source = episode.x if target == "measured" else episode.x_ref_h_true
    if target == "intent" and count and not np.all(np.isfinite(source)):
        raise ValueError("intent targets requested but the episode has no "
                         "ground-truth reference")
    d = episode.d
    x = np.empty((count, k, feats.shape[1]))
    y = np.empty((count, horizon, d))
    for w in range(count):
        x[w] = feats[w:w + k]
        y[w] = source[w + k:w + k + horizon]
    return x, y


def fit_normalization(x: np.ndarray, y: np.ndarray) -> Normalization:
    """Whitening stats: per feature column for inputs, per coordinate for targets.

    Population standard deviation; constant features get scale 1 so they pass
    through unscaled.
    """
    if x.size == 0:
        raise ValueError("cannot fit normalization on an empty window set")

    def stats(a):
        flat = a.reshape(-1, a.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std[std == 0.0] = 1.0
        return mean, std

    x_mean, x_std = stats(x)
    y_mean, y_std = stats(y)
    return Normalization(x_mean=x_mean, x_std=x_std, y_mean=y_mean, y_std=y_std)


@dataclass
class Dataset:
    """Episodes plus their stacked window tensors."""

    episodes: list
    k: int
    horizon: int
    target: str = "measured"
    x: np.ndarray = field(default=None, repr=False)    # (W, k, 4d)
    y: np.ndarray = field(default=None, repr=False)    # (W, N, d)

    @classmethod
    def from_episodes(cls, episodes, k: int, horizon: int,
                      target: str = "measured") -> "Dataset":
        xs, ys = [], []
        for ep in episodes:
            x, y = make_windows(ep, k, horizon, target)
            xs.append(x)
            ys.append(y)
        return cls(episodes=list(episodes), k=k, horizon=horizon, target=target,
                   x=np.concatenate(xs), y=np.concatenate(ys))

    @property
    def n_windows(self) -> int:
        return self.x.shape[0]

    def split(self, train_frac: float = 0.8):
        """Deterministic by-episode split; held-out episodes never share windows
        with training ones."""
        n = len(self.episodes)
        n_train = max(1, min(n - 1, int(round(train_frac * n)))) if n > 1 else n
        train = Dataset.from_episodes(self.episodes[:n_train], self.k,
                                      self.horizon, self.target)
        held = Dataset.from_episodes(self.episodes[n_train:], self.k,
                                     self.horizon, self.target) if n_train < n else None
        return train, held


def collect_episodes(plant: PlantParams, controller, human: HumanModel | None,
                     n_episodes: int, seed: int, *, predictor: PredictorModel | None = None,
                     kinds=TRAIN_KINDS, d: int = 2, duration: float = 10.0,
                     force_noise_sigma: float = 0.0, context: str | None = None,
                     human_sampler=None) -> list:
    """Roll out a batch of episodes with per-episode derived seeds.

    Trajectory kinds cycle through ``kinds``; the obstacle position is drawn
    per episode.  ``human_sampler(rng, human)`` may return a perturbed human
    model (user variability).
    """
    children = np.random.SeedSequence(seed).spawn(n_episodes)
    episodes = []
    for i, child in enumerate(children):
        s_obs, s_sim = (int(v) for v in child.generate_state(2))
        rng = np.random.default_rng(s_obs)
        spec = TrajectorySpec(kinds[i % len(kinds)], d=d, duration=duration)
        obstacle = random_obstacle(spec, rng)
        hm = human_sampler(rng, human) if human_sampler is not None else human
        episodes.append(simulate_episode(
            plant, spec, obstacle, hm, controller, predictor=predictor,
            seed=s_sim, force_noise_sigma=force_noise_sigma, context=context,
            model_id=predictor.model_id if predictor is not None else None))
    return episodes


def uniform_gain_sampler(low: float = 0.5, high: float = 1.5):
    """Per-episode human strength variation for population-style datasets."""
    def sample(rng: np.random.Generator, human: HumanModel) -> HumanModel:
        return human.scaled(float(rng.uniform(low, high)))
    return sample


def train_model(model: PredictorModel, dataset: Dataset, *, epochs: int = 25,
                batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
                state=None, freeze: str = "none"):
    """Minibatch Adam over the normalized windows, mutating ``model`` in place.

    Returns (state, history) where history is the mean training loss per
    epoch.  Whitening stats are taken from the model and never refitted here.
    """
    xn = model.norm.norm_x(dataset.x)
    yn = model.norm.norm_y(dataset.y).reshape(dataset.n_windows, -1)
    if state is None:
        state = new_train_state(model)
    set_freeze(state, freeze, model)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        order = rng.permutation(dataset.n_windows)
        total = 0.0
        for start in range(0, dataset.n_windows, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_gradients(model.config, model.params,
                                             xn[idx], yn[idx],
                                             frozen=state.freeze)
            optimizer_step(model, grads, state, lr=lr)
            total += loss * idx.size
        history.append(total / dataset.n_windows)
    model.model_id = params_digest(model)[:12]
    return state, history


def predict_dataset(model: PredictorModel, dataset: Dataset,
                    chunk: int = 256) -> np.ndarray:
    """Open-loop predictions for every window, chunked to bound memory."""
    out = np.empty_like(dataset.y)
    for start in range(0, dataset.n_windows, chunk):
        out[start:start + chunk] = model.predict_batch(dataset.x[start:start + chunk])
    return out


def evaluate_model(model: PredictorModel, dataset: Dataset,
                   horizons=None) -> dict:
    """Windowed prediction error on a dataset, per requested horizon."""
    if horizons is None:
        horizons = [model.config.horizon]
    pred = predict_dataset(model, dataset)
    report = {"e_rms": {}, "e_max": {}}
    for h in horizons:
        report["e_rms"][h] = metrics.e_rms(pred, dataset.y, horizon=h)
        report["e_max"][h] = metrics.e_max(pred, dataset.y, horizon=h)
    return report


@dataclass
class EvalReport:
    """Prediction and effort metrics for one model over a set of episodes."""

    model_id: str
    seed: int
    e_rms: dict               # horizon -> [m]
    e_max: dict               # horizon -> [m]
    f_rms: float              # mean over episodes [N]
    per_episode: list         # dicts: kind, n_windows, f_rms, e_rms, e_max

    def rows(self, model_label: str | None = None) -> list:
        """Long-format rows (model, horizon, e_rms, e_max, f_rms, seed)."""
        label = model_label if model_label is not None else self.model_id
        return [{"model": label, "horizon": h, "e_rms": self.e_rms[h],
                 "e_max": self.e_max[h], "f_rms": self.f_rms, "seed": self.seed}
                for h in sorted(self.e_rms)]


EVAL_COLUMNS = ("model", "horizon", "e_rms", "e_max", "f_rms", "seed")


def evaluate_report(model: PredictorModel, episodes, horizons=None,
                    seed: int = 0) -> EvalReport:
    """Score a model on whole episodes: windowed errors plus human effort.

    Errors always compare predictions against the measured positions, whatever
    target the model was trained on.  Overall e_rms weights every window
    equally across episodes; e_max is the worst window anywhere.
    """
    cfg = model.config
    if horizons is None:
        horizons = [cfg.horizon]
    per_episode = []
    weighted = {h: 0.0 for h in horizons}
    worst = {h: 0.0 for h in horizons}
    total_windows = 0
    efforts = []
    for ep in episodes:
        x, y = make_windows(ep, cfg.window_k, cfg.horizon, target="measured")
        entry = {"kind": ep.meta.kind, "n_windows": x.shape[0],
                 "f_rms": metrics.f_rms(ep.u_h), "e_rms": {}, "e_max": {}}
        efforts.append(entry["f_rms"])
        if x.shape[0] > 0:
            pred = model.predict_batch(x)
            for h in horizons:
                entry["e_rms"][h] = metrics.e_rms(pred, y, horizon=h)
                entry["e_max"][h] = metrics.e_max(pred, y, horizon=h)
                weighted[h] += entry["e_rms"][h] * x.shape[0]
                worst[h] = max(worst[h], entry["e_max"][h])
            total_windows += x.shape[0]
        per_episode.append(entry)
    if total_windows == 0:
        raise ValueError("no evaluation windows: every episode is shorter "
                         f"than k+N = {cfg.window_k + cfg.horizon} samples")
    return EvalReport(model_id=model.model_id, seed=seed,
                      e_rms={h: weighted[h] / total_windows for h in horizons},
                      e_max=dict(worst), f_rms=float(np.mean(efforts)),
                      per_episode=per_episode)


@dataclass
class IterationRecord:
    iteration: int
    n_episodes: int
    final_loss: float
    e_rms: dict               # horizon -> [m]
    e_max: dict               # horizon -> [m]
    model_id: str


@dataclass
class IterateResult:
    models: list              # M_0 .. M_K
    records: list             # IterationRecord per model
    converged: bool
    datasets: list = field(default=None, repr=False)
    aborted: str | None = None    # blow-up diagnostic when a round failed

    @property
    def final(self) -> PredictorModel:
        return self.models[-1]


def iterate(plant: PlantParams, controller, human: HumanModel, cfg: PredictorConfig,
            *, n_iterations: int = 3, n_episodes: int = 10, epochs: int = 25,
            batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
            tol: float | None = 1e-4, kinds=TRAIN_KINDS, duration: float = 10.0,
            force_noise_sigma: float = 0.0, target: str = "measured",
            horizons=None, train_frac: float = 0.8, keep_datasets: bool = False,
            log=None) -> IterateResult:
    """Alternating collect / retrain.

    The bootstrap dataset D_0 is collected with the game controller tracking
    the nominal reference alone (no model in the loop); M_0 trains from
    scratch on it and the whitening stats fitted there stay frozen.  Every
    later round collects D_k with M_{k-1} assisting and warm-starts M_k from
    M_{k-1} on D_k.

    Errors are measured the way they would be on the robot: each model is
    scored on episodes executed with that very model in the loop.  For M_k
    with k < K that is the held-out split of D_{k+1}; the last model gets a
    small fresh batch of its own.  The bootstrap round therefore pays for its
    own prediction jitter, and the trend over records reflects how the
    assisted system behaves, not how well a model fits the previous round's
    data.  Stops early once successive in-loop e_rms values at the full
    horizon move by less than ``tol`` (None always runs every round).
    """
    if controller is None or isinstance(controller, str):
        raise ValueError("iterate needs a game controller instance")
    horizons = _full_horizons(cfg, horizons)
    root = np.random.SeedSequence(seed)
    s_init, s_collect, s_train = (int(v) for v in root.generate_state(3))
    # one extra collection seed for the final model's evaluation batch
    collect_seeds = [int(v) for v in
                     np.random.SeedSequence(s_collect).generate_state(n_iterations + 2)]
    train_seeds = [int(v) for v in
                   np.random.SeedSequence(s_train).generate_state(n_iterations + 1)]

    def note(msg):
        if log is not None:
            log(msg)

    note(f"collecting bootstrap data ({n_episodes} episodes)")
    episodes = collect_episodes(plant, controller, human, n_episodes,
                                collect_seeds[0], predictor=None, kinds=kinds,
                                d=plant.d, duration=duration,
                                force_noise_sigma=force_noise_sigma)
    data = Dataset.from_episodes(episodes, cfg.window_k, cfg.horizon, target)
    train_ds, held_ds = data.split(train_frac)
    norm = fit_normalization(train_ds.x, train_ds.y)
    model = init_model(cfg, seed=s_init, norm=norm)
    _, history = train_model(model, train_ds, epochs=epochs, batch_size=batch_size,
                             lr=lr, seed=train_seeds[0])
    models = [model]
    losses = [history[-1] if history else float("nan")]
    records = []
    datasets = [data] if keep_datasets else None
    note(f"M_0 trained, final loss {losses[0]:.6f}")

    def score(k: int, eval_ds: Dataset) -> float:
        report = evaluate_model(models[k], eval_ds, horizons)
        records.append(IterationRecord(k, n_episodes, losses[k],
                                       report["e_rms"], report["e_max"],
                                       models[k].model_id))
        cur = report["e_rms"][cfg.horizon]
        note(f"M_{k}: e_rms@{cfg.horizon} = {cur:.5f} m with M_{k} assisting")
        return cur

    converged = False
    aborted = None
    prev = None
    for it in range(1, n_iterations + 1):
        note(f"iteration {it}: collecting with M_{it - 1} in the loop")
        try:
            episodes = collect_episodes(plant, controller, human, n_episodes,
                                        collect_seeds[it], predictor=models[-1],
                                        kinds=kinds, d=plant.d, duration=duration,
                                        force_noise_sigma=force_noise_sigma)
        except SimulationBlowup as exc:
            # A diverging closed loop poisons the round; keep what we have.
            aborted = f"iteration {it} aborted: {exc}"
            note(aborted)
            break
        data = Dataset.from_episodes(episodes, cfg.window_k, cfg.horizon, target)
        train_ds, held_ds = data.split(train_frac)
        cur = score(it - 1, held_ds if held_ds is not None else train_ds)
        if tol is not None and prev is not None and abs(cur - prev) < tol:
            converged = True
            note(f"converged: |delta e_rms| = {abs(cur - prev):.2e} < {tol:.2e}")
            break
        prev = cur
        model = models[-1].copy()
        _, history = train_model(model, train_ds, epochs=epochs,
                                 batch_size=batch_size, lr=lr,
                                 seed=train_seeds[it])
        models.append(model)
        losses.append(history[-1] if history else float("nan"))
        if keep_datasets:
            datasets.append(data)
        note(f"M_{it} trained, final loss {losses[-1]:.6f}")
    if len(records) < len(models):
        # newest model has no in-loop measurement yet
        k = len(models) - 1
        n_eval = max(2, len(kinds))
        note(f"measuring M_{k} on {n_eval} fresh episodes")
        try:
            eval_eps = collect_episodes(plant, controller, human, n_eval,
                                        collect_seeds[n_iterations + 1],
                                        predictor=models[-1], kinds=kinds,
                                        d=plant.d, duration=duration,
                                        force_noise_sigma=force_noise_sigma)
            score(k, Dataset.from_episodes(eval_eps, cfg.window_k, cfg.horizon,
                                           target))
        except SimulationBlowup as exc:
            msg = f"final evaluation aborted: {exc}"
            aborted = f"{aborted}; {msg}" if aborted else msg
            note(msg)
            bad = {h: float("nan") for h in horizons}
            records.append(IterationRecord(k, n_episodes, losses[-1], bad,
                                           dict(bad), models[-1].model_id))
    return IterateResult(models=models, records=records, converged=converged,
                         datasets=datasets, aborted=aborted)


def make_transfer_context(name: str, plant: PlantParams, controller,
                          human: HumanModel, *, user_scale: float = 1.5,
                          extra_mass: float = 5.0, object_damping_scale: float = 2.0):
    """Plant, controller, human and trajectory kinds for a transfer context.

    new_trajectory keeps everything but switches to the held-out S-curve;
    new_user scales the human's PD gains; object adds carried mass (the
    controller is rebuilt for the heavier plant) and doubles the human's
    damping.
    """
    if name not in TRANSFER_CONTEXTS:
        raise ValueError(f"unknown transfer context {name!r}; "
                         f"expected one of {TRANSFER_CONTEXTS}")
    if name == "new_trajectory":
        return plant, controller, human, ("eval",)
    if name == "new_user":
        return plant, controller, human.scaled(user_scale), TRAIN_KINDS
    heavy = plant.with_added_mass(extra_mass)
    weights = controller.weights
    if weights is None:
        raise ValueError("object context needs the controller's weights to "
                         "rebuild it for the loaded plant")
    heavy_ctrl = control.build_game_controller(heavy, weights,
                                               controller.pick_index)
    slow_human = dataclasses.replace(human, c_h=human.c_h * object_damping_scale)
    return heavy, heavy_ctrl, slow_human, TRAIN_KINDS


@dataclass
class TransferResult:
    model: PredictorModel
    base_eval: dict           # base model on the held-out context data
    tuned_eval: dict          # fine-tuned model, same data
    history: list
    trainable_params: int
    total_params: int
    context: str
    recurrent_unchanged: bool = True

    def improvement(self, horizon: int) -> float:
        """Relative e_rms reduction of the tuned model at a horizon."""
        base = self.base_eval["e_rms"][horizon]
        tuned = self.tuned_eval["e_rms"][horizon]
        return (base - tuned) / base if base > 0 else 0.0


def _recurrent_digest(model: PredictorModel) -> bytes:
    import hashlib
    h = hashlib.sha256()
    for name in sorted(model.params):
        if name.startswith("lstm"):
            h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.digest()


def _finetune_head(base: PredictorModel, train_ds: Dataset, *, epochs: int,
                   batch_size: int, lr: float, seed: int):
    """Head-only retraining; recurrent params and moments stay untouched."""
    tuned = base.copy()
    before = _recurrent_digest(tuned)
    state = new_train_state(tuned)
    _, history = train_model(tuned, train_ds, epochs=epochs,
                             batch_size=batch_size, lr=lr, seed=seed,
                             state=state, freeze="freeze_recurrent")
    trainable, total = trainable_counts(tuned, state)
    unchanged = _recurrent_digest(tuned) == before
    return tuned, history, trainable, total, unchanged


def _full_horizons(cfg, horizons):
    horizons = list(horizons) if horizons is not None else [cfg.horizon]
    if cfg.horizon not in horizons:
        horizons.append(cfg.horizon)
    return horizons


def transfer_learn(base: PredictorModel, plant: PlantParams, controller,
                   human: HumanModel, *, context: str, n_episodes: int = 3,
                   n_eval_episodes: int | None = None, epochs: int = 25,
                   batch_size: int = 64, lr: float = 1e-3,
                   seed: int = 0, duration: float = 10.0,
                   force_noise_sigma: float = 0.0, target: str = "measured",
                   horizons=None, log=None) -> TransferResult:
    """Adapt a trained model to a new context by retraining the head only.

    Data comes from the new context with the base model still in the loop:
    ``n_episodes`` for tuning plus ``n_eval_episodes`` fresh ones (default:
    enough to cover every trajectory kind) reserved for the before/after
    comparison, so both sets see the same kind mix.  The recurrent stack is
    frozen (parameters and optimizer moments), so the fine-tuned model is
    bit-identical to the base everywhere but the head.
    """
    cfg = base.config
    horizons = _full_horizons(cfg, horizons)
    ctx_plant, ctx_ctrl, ctx_human, kinds = make_transfer_context(
        context, plant, controller, human)
    if n_eval_episodes is None:
        n_eval_episodes = max(len(kinds), n_episodes // 2)
    root = np.random.SeedSequence(seed)
    s_collect, s_train = (int(v) for v in root.generate_state(2))
    total_eps = n_episodes + n_eval_episodes
    if log is not None:
        log(f"collecting {total_eps} episodes in context {context!r} "
            f"({n_episodes} tune / {n_eval_episodes} eval)")
    episodes = collect_episodes(ctx_plant, ctx_ctrl, ctx_human, total_eps,
                                s_collect, predictor=base, kinds=kinds,
                                d=ctx_plant.d, duration=duration,
                                force_noise_sigma=force_noise_sigma,
                                context=context)
    train_ds = Dataset.from_episodes(episodes[:n_episodes], cfg.window_k,
                                     cfg.horizon, target)
    eval_ds = Dataset.from_episodes(episodes[n_episodes:], cfg.window_k,
                                    cfg.horizon, target)
    base_eval = evaluate_model(base, eval_ds, horizons)
    tuned, history, trainable, total, unchanged = _finetune_head(
        base, train_ds, epochs=epochs, batch_size=batch_size, lr=lr,
        seed=s_train)
    tuned_eval = evaluate_model(tuned, eval_ds, horizons)
    if log is not None:
        h = cfg.horizon
        log(f"e_rms@{h}: base {base_eval['e_rms'][h]:.5f} m, "
            f"tuned {tuned_eval['e_rms'][h]:.5f} m")
    return TransferResult(model=tuned, base_eval=base_eval, tuned_eval=tuned_eval,
                          history=history, trainable_params=trainable,
                          total_params=total, context=context,
                          recurrent_unchanged=unchanged)


def transfer_learn_on_episodes(base: PredictorModel, episodes, *,
                               epochs: int = 25, batch_size: int = 64,
                               lr: float = 1e-3, seed: int = 0,
                               target: str = "measured", horizons=None,
                               context: str = "live") -> TransferResult:
    """Head-only fine-tuning on episodes that already exist (e.g. recordings).

    Unlike transfer_learn there is no fresh collection: the supplied episodes
    are both the tuning set and the before/after yardstick, so the reported
    e_rms numbers are in-sample.
    """
    cfg = base.config
    horizons = _full_horizons(cfg, horizons)
    if not episodes:
        raise ValueError("no episodes supplied for transfer")
    data = Dataset.from_episodes(episodes, cfg.window_k, cfg.horizon, target)
    if data.n_windows == 0:
        need = cfg.window_k + cfg.horizon
        dt = episodes[0].meta.plant.dt
        raise ValueError(
            f"episodes are too short for transfer: windowing needs more than "
            f"{need} samples, i.e. over {need * dt:.2f} s at "
            f"{1.0 / dt:.0f} steps/s")
    base_eval = evaluate_model(base, data, horizons)
    tuned, history, trainable, total, unchanged = _finetune_head(
        base, data, epochs=epochs, batch_size=batch_size, lr=lr, seed=seed)
    tuned_eval = evaluate_model(tuned, data, horizons)
    return TransferResult(model=tuned, base_eval=base_eval, tuned_eval=tuned_eval,
                          history=history, trainable_params=trainable,
                          total_params=total, context=context,
                          recurrent_unchanged=unchanged)
