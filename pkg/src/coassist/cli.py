"""Command line entry points for the assistive-control pipeline.

Every run is fully determined by (config, seed): artifacts contain no
timestamps or hostnames, so repeating a command reproduces them byte for
byte.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as config_mod
from . import episodes as episodes_io
from . import metrics, pipeline
from .control import CareError
from .dynamics import (GAME, IMPEDANCE, MANUAL_GUIDANCE, TRAJECTORY_KINDS,
                       SimulationBlowup)
from .episodes import FormatError
from .predictor import ModelFormatError, load_model, save_model


def _build_parser() -> argparse.ArgumentParser:
    # The four run-level flags are accepted before or after the subcommand;
    # the copies on the parent use SUPPRESS so a missing local flag keeps
    # the value parsed at the top level.
    common = argparse.ArgumentParser(add_help=False)
    hide = dict(default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--config", metavar="YAML", **hide)
    common.add_argument("--profile", choices=sorted(config_mod.PROFILES), **hide)
    common.add_argument("--seed", type=int, **hide)
    common.add_argument("--out", metavar="PATH", **hide)

    parser = argparse.ArgumentParser(
        prog="coassist",
        description="cooperative game assistance: data, training, evaluation, "
                    "live service")
    parser.add_argument("--config", metavar="YAML", default=None,
                        help="configuration file overlaying the profile")
    parser.add_argument("--profile", choices=sorted(config_mod.PROFILES),
                        default=None, help="baseline parameter profile")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides config)")
    parser.add_argument("--out", default=None, metavar="PATH",
                        help="output path (directory or file, per command)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common],
                       help="roll out and store synthetic episodes")
    p.add_argument("--controller", choices=[MANUAL_GUIDANCE, IMPEDANCE, GAME],
                   default=GAME)
    p.add_argument("--episodes", type=int, default=None,
                   help="total count (default: episodes_per_kind per kind)")
    p.add_argument("--with-model", metavar="MODEL", default=None,
                   help="predictor file to close the loop with")
    p.add_argument("--kinds", default=None,
                   help="comma separated trajectory kinds")

    p = sub.add_parser("train", parents=[common],
                       help="train a predictor on a stored dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--base", default=None, help="warm-start model file")
    p.add_argument("--freeze", choices=["none", "freeze_recurrent"],
                   default="none")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("iterate", parents=[common],
                       help="alternating collect/retrain rounds")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--tol", type=float, default=None,
                   help="stop when |delta e_rms| falls below this; "
                        "negative disables early stopping")
    p.add_argument("--save-data", action="store_true",
                   help="also store every round's episodes")

    p = sub.add_parser("transfer", parents=[common],
                       help="adapt a model to a new context")
    p.add_argument("--base", required=True, help="trained model file")
    p.add_argument("--context", choices=sorted(pipeline.TRANSFER_CONTEXTS),
                   required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("eval", parents=[common],
                       help="windowed prediction error on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("compare", parents=[common],
                       help="effort comparison MG / IMP / GT")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--with-model", metavar="MODEL", default=None)

    p = sub.add_parser("serve", parents=[common],
                       help="run the live interaction service")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--model", default=None, help="predictor to preload")
    p.add_argument("--data-dir", default="coassist_data",
                   help="directory for recordings and uploaded models")
    p.add_argument("--static", default=None,
                   help="directory with the built operator UI to serve at /")
    return parser


def _require_out(args) -> str:
    if not args.out:
        raise ValueError(f"{args.command} needs --out")
    return args.out


def _load_config(args) -> config_mod.RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return config_mod.load_config(args.config, profile=args.profile,
                                  overrides=overrides)


def _provenance(cfg, extra: dict) -> dict:
    doc = {"config": asdict(cfg)}
    doc["config"]["horizons"] = list(cfg.horizons)
    doc.update(extra)
    return doc


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args)
    kinds = tuple(args.kinds.split(",")) if args.kinds else pipeline.TRAIN_KINDS
    for kind in kinds:
        if kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind: {kind!r} "
                             f"(expected one of {TRAJECTORY_KINDS})")
    n = (args.episodes if args.episodes is not None
         else cfg.episodes_per_kind * len(kinds))
    plant = cfg.plant()
    human = cfg.human()
    predictor = None
    if args.controller == GAME:
        ctrl = cfg.controller()
        if args.with_model:
            predictor = load_model(args.with_model)
    elif args.controller == IMPEDANCE:
        plant = metrics.impedance_variant(plant)
        ctrl = IMPEDANCE
    else:
        ctrl = MANUAL_GUIDANCE
    eps = pipeline.collect_episodes(plant, ctrl, human, n, cfg.seed,
                                    predictor=predictor, kinds=kinds,
                                    d=cfg.dof, duration=cfg.duration,
                                    force_noise_sigma=cfg.force_noise_sigma)
    episodes_io.save_dataset(out, eps, provenance=_provenance(
        cfg, {"controller": args.controller, "episodes": n,
              "kinds": list(kinds),
              "model": Path(args.with_model).name if args.with_model else None}))
    samples = eps[0].t.shape[0] if eps else 0
    print(f"wrote {n} episodes ({samples} samples each) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args)
    eps, _ = episodes_io.load_dataset(args.data)
    if args.base:
        model = load_model(args.base)
        pcfg = model.config
    else:
        pcfg = cfg.predictor_config()
        model = None
    ds = pipeline.Dataset.from_episodes(eps, pcfg.window_k, pcfg.horizon,
                                        cfg.target)
    if model is None:
        norm = pipeline.fit_normalization(ds.x, ds.y)
        from .predictor import init_model
        model = init_model(pcfg, seed=cfg.seed, norm=norm)
    epochs = args.epochs if args.epochs is not None else cfg.epochs
    _, history = pipeline.train_model(model, ds, epochs=epochs,
                                      batch_size=cfg.batch_size,
                                      lr=cfg.learning_rate, seed=cfg.seed,
                                      freeze=args.freeze)
    save_model(model, out)
    loss = history[-1] if history else float("nan")
    print(f"trained {epochs} epochs on {ds.n_windows} windows, "
          f"final loss {loss:.6f}; model {model.model_id} -> {out}")
    return 0


def _iterate_rows(records, horizons, seed):
    # Long format, one row per (model, horizon): the retraining curve over
    # iterations on one axis and the lookahead on the other.
    return [{"model": rec.model_id, "iteration": rec.iteration, "horizon": h,
             "e_rms": rec.e_rms[h], "e_max": rec.e_max[h],
             "final_loss": rec.final_loss, "seed": seed}
            for rec in records for h in horizons if h in rec.e_rms]


def cmd_iterate(args) -> int:
    cfg = _load_config(args)
    out = Path(_require_out(args))
    out.mkdir(parents=True, exist_ok=True)
    n_iter = args.iterations if args.iterations is not None else cfg.n_iterations
    n_eps = args.episodes if args.episodes is not None else cfg.n_episodes
    epochs = args.epochs if args.epochs is not None else cfg.epochs
    tol = cfg.tol if args.tol is None else (None if args.tol < 0 else args.tol)
    ctrl = cfg.controller()
    result = pipeline.iterate(cfg.plant(), ctrl, cfg.human(),
                              cfg.predictor_config(), n_iterations=n_iter,
                              n_episodes=n_eps, epochs=epochs,
                              batch_size=cfg.batch_size, lr=cfg.learning_rate,
                              seed=cfg.seed, tol=tol, duration=cfg.duration,
                              force_noise_sigma=cfg.force_noise_sigma,
                              target=cfg.target, horizons=cfg.horizons,
                              train_frac=cfg.train_frac,
                              keep_datasets=args.save_data, log=print)
    for i, model in enumerate(result.models):
        save_model(model, out / f"model_{i}.json")
    horizons = sorted(set(list(cfg.horizons) + [cfg.horizon]))
    metrics.write_csv(out / "metrics.csv",
                      _iterate_rows(result.records, horizons, cfg.seed))
    if args.save_data:
        for i, data in enumerate(result.datasets):
            episodes_io.save_dataset(out / f"round_{i}", data.episodes,
                                     provenance=_provenance(cfg, {"round": i}))
    if result.aborted:
        print(result.aborted)
    full = cfg.horizon
    first = result.records[0].e_rms[full]
    last = result.records[-1].e_rms[full]
    print(f"{len(result.models)} models -> {out}; e_rms@{full} "
          f"{first:.5f} -> {last:.5f} m"
          + (" (converged)" if result.converged else ""))
    return 0


def cmd_transfer(args) -> int:
    cfg = _load_config(args)
    out = Path(_require_out(args))
    out.mkdir(parents=True, exist_ok=True)
    base = load_model(args.base)
    n_eps = args.episodes if args.episodes is not None else 3
    epochs = args.epochs if args.epochs is not None else cfg.epochs
    res = pipeline.transfer_learn(base, cfg.plant(), cfg.controller(),
                                  cfg.human(), context=args.context,
                                  n_episodes=n_eps, epochs=epochs,
                                  batch_size=cfg.batch_size,
                                  lr=cfg.learning_rate, seed=cfg.seed,
                                  duration=cfg.duration,
                                  force_noise_sigma=cfg.force_noise_sigma,
                                  target=cfg.target, horizons=cfg.horizons,
                                  log=print)
    save_model(res.model, out / "model_tl.json")
    horizons = sorted(set(list(cfg.horizons) + [base.config.horizon]))
    rows = [{"horizon": h, "e_rms_base": res.base_eval["e_rms"][h],
             "e_rms_tuned": res.tuned_eval["e_rms"][h],
             "e_max_base": res.base_eval["e_max"][h],
             "e_max_tuned": res.tuned_eval["e_max"][h],
             "improvement": res.improvement(h)} for h in horizons
            if h in res.base_eval["e_rms"]]
    metrics.write_csv(out / "transfer.csv", rows)
    frac = res.trainable_params / res.total_params
    full = base.config.horizon
    print(f"context {res.context}: e_rms@{full} improved "
          f"{100 * res.improvement(full):.1f}% "
          f"({res.trainable_params}/{res.total_params} params trainable, "
          f"{100 * frac:.1f}%)")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = load_model(args.model)
    eps, _ = episodes_io.load_dataset(args.data)
    horizons = sorted({h for h in list(cfg.horizons) + [model.config.horizon]
                       if h <= model.config.horizon})
    report = pipeline.evaluate_report(model, eps, horizons=horizons,
                                      seed=cfg.seed)
    for h in horizons:
        print(f"horizon {h:>3}: e_rms {report.e_rms[h]:.5f} m, "
              f"e_max {report.e_max[h]:.5f} m")
    print(f"f_rms {report.f_rms:.3f} N over {len(report.per_episode)} episodes")
    if args.out:
        metrics.write_csv(args.out, report.rows())
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    predictor = load_model(args.with_model) if args.with_model else None
    res = metrics.compare_controllers(cfg.plant(), cfg.controller(), cfg.human(),
                                      args.episodes, cfg.seed,
                                      predictor=predictor,
                                      duration=cfg.duration,
                                      force_noise_sigma=cfg.force_noise_sigma)
    for tag in res.f_rms:
        print(f"{tag}: mean f_rms {res.mean(tag):.3f} N")
    for (a, b), t in res.tests.items():
        print(f"{a} vs {b}: t = {t.statistic:.3f}, p = {t.p_value:.4g}")
    if args.out:
        metrics.write_csv(args.out, res.rows())
    return 0


def cmd_serve(args) -> int:
    cfg = _load_config(args)
    import uvicorn

    from .service import ServiceSettings, create_app
    settings = ServiceSettings(config=cfg, data_dir=Path(args.data_dir),
                               model_path=args.model,
                               static_dir=Path(args.static) if args.static
                               else None)
    app = create_app(settings)
    uvicorn.run(app, host=args.host or cfg.host, port=args.port or cfg.port,
                log_level="info")
    return 0


_COMMANDS = {"generate": cmd_generate, "train": cmd_train,
             "iterate": cmd_iterate, "transfer": cmd_transfer,
             "eval": cmd_eval, "compare": cmd_compare, "serve": cmd_serve}

_USER_ERRORS = (ValueError, KeyError, FileNotFoundError, NotADirectoryError,
                IsADirectoryError, FormatError, ModelFormatError, CareError,
                SimulationBlowup)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
