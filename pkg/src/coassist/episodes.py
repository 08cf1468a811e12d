"""Episode and dataset files: line-delimited JSON records plus sidecar metadata.

Layout of a dataset directory:

    manifest.json            index of episode basenames + provenance
    ep_0000.jsonl            one JSON object per record
    ep_0000.meta.json        plant / trajectory / obstacle / human / seed

Floats round-trip exactly through Python's repr-based JSON encoding, so a
save/load cycle is bit-preserving.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .dynamics import (SCHEMA_VERSION, Episode, EpisodeMeta, HumanModel, Obstacle,
                       PlantParams, TrajectorySpec)


class FormatError(ValueError):
    """A file does not match the expected schema."""


def _vec(a) -> list:
    return [float(x) for x in np.asarray(a).ravel()]


def _opt_vec(row) -> list | None:
    if np.any(np.isnan(row)):
        return None
    return _vec(row)


def meta_to_dict(meta: EpisodeMeta) -> dict:
    out = {
        "schema_version": meta.schema_version,
        "plant": {"d": meta.plant.d, "m": _vec(meta.plant.m), "c": _vec(meta.plant.c),
                  "k": _vec(meta.plant.k), "dt": meta.plant.dt},
        "trajectory": {"kind": meta.spec.kind, "d": meta.spec.d,
                       "start": _vec(meta.spec.start), "duration": meta.spec.duration,
                       "params": dict(meta.spec.params)},
        "obstacle": None,
        "human_id": meta.human_id,
        "model_id": meta.model_id,
        "controller": meta.controller,
        "seed": meta.seed,
        "human": None,
        "context": meta.context,
    }
    if meta.obstacle is not None:
        out["obstacle"] = {"center": _vec(meta.obstacle.center),
                           "half_width": meta.obstacle.half_width,
                           "arc_fraction": meta.obstacle.arc_fraction}
    if meta.human is not None:
        out["human"] = {"d": meta.human.d, "k_h": _vec(meta.human.k_h),
                        "c_h": _vec(meta.human.c_h),
                        "detour_amplitude": meta.human.detour_amplitude,
                        "detour_sigma": meta.human.detour_sigma,
                        "force_cap": meta.human.force_cap,
                        "relax_rate": meta.human.relax_rate,
                        "relax_floor": meta.human.relax_floor,
                        "track_scale": meta.human.track_scale,
                        "wander_amplitude": meta.human.wander_amplitude,
                        "wander_wavelength": meta.human.wander_wavelength,
                        "wander_phase": meta.human.wander_phase}
    return out


def meta_from_dict(doc: dict) -> EpisodeMeta:
    try:
        if doc["schema_version"] != SCHEMA_VERSION:
            raise FormatError(f"unsupported schema_version {doc['schema_version']}")
        plant = PlantParams(d=doc["plant"]["d"], m=doc["plant"]["m"], c=doc["plant"]["c"],
                            k=doc["plant"]["k"], dt=doc["plant"]["dt"])
        tr = doc["trajectory"]
        spec = TrajectorySpec(kind=tr["kind"], d=tr["d"], start=np.asarray(tr["start"]),
                              duration=tr["duration"], params=tr.get("params") or {})
        obstacle = None
        if doc.get("obstacle") is not None:
            ob = doc["obstacle"]
            obstacle = Obstacle(center=np.asarray(ob["center"]),
                                half_width=ob["half_width"], arc_fraction=ob["arc_fraction"])
        human = None
        if doc.get("human") is not None:
            hu = doc["human"]
            human = HumanModel(d=hu["d"], k_h=hu["k_h"], c_h=hu["c_h"],
                               detour_amplitude=hu["detour_amplitude"],
                               detour_sigma=hu["detour_sigma"], force_cap=hu["force_cap"],
                               relax_rate=hu.get("relax_rate", 0.0),
                               relax_floor=hu.get("relax_floor", 0.25),
                               track_scale=hu.get("track_scale", 0.02),
                               wander_amplitude=hu.get("wander_amplitude", 0.0),
                               wander_wavelength=hu.get("wander_wavelength", 0.35),
                               wander_phase=hu.get("wander_phase", 1.0))
    except KeyError as e:
        raise FormatError(f"episode metadata missing field {e}") from None
    return EpisodeMeta(plant=plant, spec=spec, obstacle=obstacle,
                       human_id=doc.get("human_id", "unknown"), model_id=doc.get("model_id"),
                       controller=doc.get("controller", "MG"), seed=doc.get("seed"),
                       human=human, context=doc.get("context"))


def save_episode(episode: Episode, base: Path) -> None:
    """Write ``<base>.jsonl`` (records) and ``<base>.meta.json`` (sidecar)."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(base.with_suffix(".jsonl"), "w") as fh:
        for i in range(len(episode)):
            rec = {"t": float(episode.t[i]), "x": _vec(episode.x[i]), "v": _vec(episode.v[i]),
                   "u_h": _vec(episode.u_h[i]), "x_ref_r": _vec(episode.x_ref_r[i]),
                   "x_ref_h_true": _opt_vec(episode.x_ref_h_true[i]),
                   "u_r": _vec(episode.u_r[i]), "tag": episode.tag}
            fh.write(json.dumps(rec) + "\n")
    with open(base.with_suffix(".meta.json"), "w") as fh:
        json.dump(meta_to_dict(episode.meta), fh, indent=1)
        fh.write("\n")


def load_episode(base: Path) -> Episode:
    base = Path(base)
    meta_path = base.with_suffix(".meta.json")
    try:
        with open(meta_path) as fh:
            meta = meta_from_dict(json.load(fh))
    except json.JSONDecodeError as e:
        raise FormatError(f"{meta_path}: corrupt metadata ({e})") from None
    d = meta.plant.d
    rows = {k: [] for k in ("t", "x", "v", "u_h", "x_ref_r", "x_ref_h_true", "u_r")}
    tag = meta.controller
    jsonl = base.with_suffix(".jsonl")
    with open(jsonl) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{jsonl}:{lineno}: corrupt record ({e})") from None
            try:
                rows["t"].append(rec["t"])
                for key in ("x", "v", "u_h", "x_ref_r", "u_r"):
                    val = rec[key]
                    if len(val) != d:
                        raise FormatError(f"{jsonl}:{lineno}: {key} has length "
                                          f"{len(val)}, expected {d}")
                    rows[key].append(val)
                xh = rec["x_ref_h_true"]
                rows["x_ref_h_true"].append([math.nan] * d if xh is None else xh)
                tag = rec["tag"]
            except KeyError as e:
                raise FormatError(f"{jsonl}:{lineno}: record missing field {e}") from None
    if not rows["t"]:
        raise FormatError(f"{jsonl}: no records")
    return Episode(t=np.asarray(rows["t"]), x=np.asarray(rows["x"]), v=np.asarray(rows["v"]),
                   u_h=np.asarray(rows["u_h"]), x_ref_r=np.asarray(rows["x_ref_r"]),
                   x_ref_h_true=np.asarray(rows["x_ref_h_true"]), u_r=np.asarray(rows["u_r"]),
                   tag=tag, meta=meta)


def episode_to_csv(episode: Episode, path: Path) -> None:
    """Flat CSV export for plotting."""
    d = episode.d
    cols = (["t"] + [f"x{i}" for i in range(d)] + [f"v{i}" for i in range(d)]
            + [f"u_h{i}" for i in range(d)] + [f"x_ref_r{i}" for i in range(d)]
            + [f"x_ref_h_true{i}" for i in range(d)] + [f"u_r{i}" for i in range(d)]
            + ["tag"])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(episode)):
            vals = ([repr(float(episode.t[i]))]
                    + [repr(float(v)) for v in episode.x[i]]
                    + [repr(float(v)) for v in episode.v[i]]
                    + [repr(float(v)) for v in episode.u_h[i]]
                    + [repr(float(v)) for v in episode.x_ref_r[i]]
                    + [repr(float(v)) for v in episode.x_ref_h_true[i]]
                    + [repr(float(v)) for v in episode.u_r[i]]
                    + [episode.tag])
            fh.write(",".join(vals) + "\n")


def save_dataset(directory: Path, episodes: list[Episode], provenance: dict | None = None) -> None:
    """Write all episodes plus a manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, ep in enumerate(episodes):
        name = f"ep_{i:04d}"
        save_episode(ep, directory / name)
        names.append(name)
    manifest = {"schema_version": SCHEMA_VERSION, "episodes": names,
                "provenance": provenance or {}}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def load_dataset(directory: Path) -> tuple[list[Episode], dict]:
    directory = Path(directory)
    try:
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{directory}: not a dataset directory (no manifest.json)") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{directory}/manifest.json: corrupt ({e})") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"unsupported dataset schema_version {manifest.get('schema_version')}")
    episodes = [load_episode(directory / name) for name in manifest["episodes"]]
    return episodes, manifest.get("provenance", {})
