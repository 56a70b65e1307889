"""Command-line entry point: ``biteacq <command> [--config PATH] [--seed N] [--out DIR] [--jobs N]``.

Config files are JSON objects with flat dotted keys (``"train.lr": 0.001``).
Flags override file values, which override command defaults. The resolved
config is written to ``<out>/config.json``.

Exit codes: 0 success, 1 validation error (nothing was run), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .tensor import sequential

logger = logging.getLogger("biteacq")


class ConfigError(ValueError):
    """Invalid configuration; reported before any work starts."""


# --------------------------------------------------------------- defaults

SCENE_KEYS = {"scene.n_items": 5, "scene.noise_sigma": 0.0, "scene.env_counts": None,
              "scene.env_mix": None, "scene.items": None}

DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-scenes": {"seed": 0, "n": 10, **SCENE_KEYS},
    "gen-trials": {"seed": 0, "trials_per_config": 10, "items": None, "symmetric": [], "oracle": None},
    "train": {
        "seed": 0, "trials": None, "trials_per_config": 10, "truth_seed": 0, "oracle": None,
        "data.scenes": 200, "data.items_per_scene": 5, "data.val_fraction": 0.15,
        "model.tiny": False, "holdout_item": None,
        "train.lr": 5e-3, "train.momentum": 0.9, "train.batch_size": 32, "train.max_epochs": 40,
        "train.patience": 8, "train.color_augment": True,
    },
    "eval": {
        "seed": 1, "checkpoint": None, "trials": None, "trials_per_config": 10, "truth_seed": 0, "oracle": None,
        "data.scenes": 120, "data.items_per_scene": 5, "ooc_category": None,
    },
    "classify-env": {"seed": 0, "scene": None, "perception.roi_scale": 2.0, "perception.occupy_height_mm": 10.0,
                     "perception.supermajority": 2 / 3, "perception.grid": 3},
    "analyze": {"seed": 0, "trials": None, "hypotheses": None, "alpha": 0.05, "m": None, "max_total": 200,
                "mirror_symmetric": False},
    "simulate": {"seed": 0, "plates": 10, "predictor": "oracle", "checkpoint": None, "oracle": None,
                 "max_attempts": 100, **{**SCENE_KEYS, "scene.n_items": 10,
                                         "scene.env_counts": {"ISO": 4, "WALL": 4, "STACK": 2}}},
}

PATH_KEYS = {"trials", "oracle", "checkpoint", "scene", "hypotheses"}


def load_config(command: str, path: str | None, overrides: dict[str, Any]) -> dict[str, Any]:
    cfg = dict(DEFAULTS[command])
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object with flat dotted keys")
        for k, v in data.items():
            if isinstance(v, dict) and k not in cfg:
                raise ConfigError(f"nested key {k!r}: use flat dotted keys")
            if k not in cfg:
                raise ConfigError(f"unknown key {k!r} for {command}; known: {sorted(cfg)}")
            cfg[k] = v
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    _validate(command, cfg)
    return cfg


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _validate(command: str, cfg: dict[str, Any]) -> None:
    _need(isinstance(cfg["seed"], int) and 0 <= cfg["seed"] < 2 ** 64, "seed must be an unsigned 64-bit integer")
    for k in PATH_KEYS & set(cfg):
        if cfg[k] is not None:
            _need(Path(cfg[k]).exists(), f"{k}: path does not exist: {cfg[k]}")
    if "scene.n_items" in cfg:
        _need(isinstance(cfg["scene.n_items"], int) and cfg["scene.n_items"] >= 0, "scene.n_items must be >= 0")
        _need(float(cfg["scene.noise_sigma"]) >= 0, "scene.noise_sigma must be >= 0")
        if cfg["scene.env_counts"] is not None:
            _need(sum(cfg["scene.env_counts"].values()) == cfg["scene.n_items"],
                  "scene.env_counts must sum to scene.n_items")
    if command == "gen-scenes":
        _need(isinstance(cfg["n"], int) and cfg["n"] >= 0, "n must be >= 0")
    elif command == "gen-trials":
        _need(isinstance(cfg["trials_per_config"], int) and cfg["trials_per_config"] >= 1,
              "trials_per_config must be >= 1")
    elif command == "train":
        _need(cfg["data.scenes"] >= 1, "data.scenes must be >= 1")
        _need(0 < cfg["data.val_fraction"] < 1, "data.val_fraction must be in (0, 1)")
        _need(cfg["train.lr"] >= 0 and 0 <= cfg["train.momentum"] < 1, "need lr >= 0 and momentum in [0, 1)")
        _need(cfg["train.batch_size"] >= 2 and cfg["train.max_epochs"] >= 1 and cfg["train.patience"] >= 1,
              "batch_size >= 2, max_epochs >= 1 and patience >= 1 required")
    elif command == "eval":
        _need(cfg["checkpoint"] is not None, "eval needs a checkpoint")
        if cfg["ooc_category"] is not None:
            from .stats import CATEGORIES
            _need(cfg["ooc_category"] in CATEGORIES, f"ooc_category must be one of {CATEGORIES}")
    elif command == "classify-env":
        _need(cfg["scene"] is not None, "classify-env needs a scene directory")
    elif command == "analyze":
        _need(cfg["trials"] is not None, "analyze needs a trials CSV")
        _need(0 < cfg["alpha"] < 1, "alpha must be in (0, 1)")
        _need(cfg["m"] is None or cfg["m"] >= 1, "m must be >= 1")
    elif command == "simulate":
        _need(cfg["predictor"] in ("oracle", "model", "random"), "predictor must be oracle, model or random")
        _need(cfg["predictor"] != "model" or cfg["checkpoint"] is not None, "the model predictor needs a checkpoint")
        _need(cfg["plates"] >= 0, "plates must be >= 0")
        _need(cfg["max_attempts"] >= cfg["scene.n_items"], "max_attempts must be >= scene.n_items")


# ------------------------------------------------------------- helpers

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _scene_config(cfg):
    from .scene import SceneConfig
    kw = {"n_items": cfg["scene.n_items"], "noise_sigma": float(cfg["scene.noise_sigma"])}
    if cfg["scene.env_counts"] is not None:
        kw["env_counts"] = dict(cfg["scene.env_counts"])
    if cfg["scene.env_mix"] is not None:
        kw["env_mix"] = dict(cfg["scene.env_mix"])
    if cfg["scene.items"] is not None:
        kw["items"] = list(cfg["scene.items"])
    return SceneConfig(**kw)


def _oracle(cfg):
    from .scene import OracleTable, default_oracle
    return OracleTable.from_csv(cfg["oracle"]) if cfg.get("oracle") else default_oracle()


def _truth(cfg, seed_key: str = "truth_seed"):
    from .experiments import truth_table
    from .stats import ingest_trials, success_table
    if cfg.get("trials"):
        return success_table(ingest_trials(cfg["trials"]))
    return truth_table(_oracle(cfg), cfg["trials_per_config"], cfg[seed_key])


def _map(fn: Callable, args: list, jobs: int) -> list:
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, args))
    return [fn(a) for a in args]


# ------------------------------------------------------------- commands

def _gen_one(args):
    from .scene import generate_scene, write_scene
    cfg, i, out = args
    scene = generate_scene(_scene_config(cfg), seed=cfg["seed"], index=i)
    write_scene(scene, out / f"scene_{i:04d}")
    return {"id": f"scene_{i:04d}", "items": len(scene.items),
            "envs": [str(it.spec.env_label) for it in scene.items]}


def cmd_gen_scenes(cfg, out: Path, jobs: int) -> dict:
    manifest = _map(_gen_one, [(cfg, i, out) for i in range(cfg["n"])], jobs)
    _write_json(out / "manifest.json", {"scenes": manifest})
    return {"scenes": len(manifest)}


def cmd_gen_trials(cfg, out: Path, jobs: int) -> dict:
    from .scene import generate_trial_dataset
    from .stats import write_trials
    oracle = _oracle(cfg)
    records = generate_trial_dataset(oracle, cfg["trials_per_config"], cfg["seed"], items=cfg["items"],
                                     symmetric=cfg["symmetric"])
    write_trials(records, out / "trials.csv")
    oracle.to_csv(out / "oracle.csv")
    return {"trials": len(records)}


def cmd_train(cfg, out: Path, jobs: int) -> dict:
    from .experiments import ALL_ITEMS, build_crops, stratified_split
    from .model import Model, SpanetConfig, TrainHyper, save_checkpoint, train
    truth = _truth(cfg)
    mcfg = SpanetConfig.tiny(seed=cfg["seed"]) if cfg["model.tiny"] else SpanetConfig(seed=cfg["seed"])
    crops = build_crops(cfg["data.scenes"], cfg["seed"], ALL_ITEMS, cfg["data.items_per_scene"], mcfg.input_size)
    if cfg["holdout_item"] is not None:
        crops = crops.where(lambda it, e: it != cfg["holdout_item"])
    hyper = TrainHyper(cfg["train.lr"], cfg["train.momentum"], cfg["train.batch_size"], cfg["train.max_epochs"],
                       cfg["train.patience"], cfg["seed"], bool(cfg["train.color_augment"]))
    tr, va = stratified_split(list(zip(crops.categories, crops.envs)), cfg["data.val_fraction"], cfg["seed"])
    data = crops.dataset(truth)
    model = Model(mcfg, enforce_budget=not cfg["model.tiny"])
    hist = train(model, data.subset(tr), data.subset(va), hyper)
    save_checkpoint(model, out / "model.span", {"best_epoch": hist.best_epoch, "best_val_loss": hist.best_val,
                                                "stopped_epoch": hist.stopped_epoch,
                                                "holdout_item": cfg["holdout_item"]})
    hist.to_csv(out / "history.csv")
    return {"train_samples": int(len(tr)), "val_samples": int(len(va)), "best_epoch": hist.best_epoch,
            "best_val_loss": hist.best_val}


def cmd_eval(cfg, out: Path, jobs: int) -> dict:
    from .experiments import ALL_ITEMS, build_crops, evaluate, holdout_item, similarity_for
    from .model import load_checkpoint
    model, meta = load_checkpoint(cfg["checkpoint"])
    truth = _truth(cfg)
    crops = build_crops(cfg["data.scenes"], cfg["seed"], ALL_ITEMS, cfg["data.items_per_scene"],
                        model.config.input_size)
    metrics: dict[str, Any] = {"checkpoint": str(cfg["checkpoint"]), "n_crops": len(crops)}
    held = holdout_item(cfg["ooc_category"]) if cfg["ooc_category"] else meta.get("holdout_item")
    if held:
        metrics["held_out"] = held
        metrics["in_class"] = evaluate(model, crops.where(lambda it, e: it != held), truth).to_json()
        metrics["out_of_class"] = evaluate(model, crops.where(lambda it, e: it == held), truth).to_json()
        sim = similarity_for(model, crops, truth, held)
        metrics["similarity"] = sim.to_json()
        metrics["nearest_group"] = sim.nearest_group[held]
    else:
        ev = evaluate(model, crops, truth)
        metrics.update(ev.to_json())
    _write_json(out / "metrics.json", metrics)
    return {k: v for k, v in metrics.items() if not isinstance(v, dict)}


def cmd_classify_env(cfg, out: Path, jobs: int) -> dict:
    from .perception import PerceptionParams, perceive
    from .scene import read_scene
    scene = read_scene(cfg["scene"])
    params = PerceptionParams(roi_scale=float(cfg["perception.roi_scale"]),
                              occupy_height_mm=float(cfg["perception.occupy_height_mm"]),
                              supermajority=float(cfg["perception.supermajority"]), grid=int(cfg["perception.grid"]))
    res = perceive(scene.rgb, scene.depth, params)
    items = [{"index": i, "bbox": [int(v) for v in p.segment.bbox], "area": int(p.segment.area),
              "env": str(p.env), "axis": p.axis.as_list()} for i, p in enumerate(res.items)]
    report = {"plate": {"cx": res.plate.cx, "cy": res.plate.cy, "r": res.plate.r},
              "plane": {"a": res.plane.a, "b": res.plane.b, "c": res.plane.c, "rms": res.plane.rms},
              "items": items}
    _write_json(out / "env.json", report)
    return {"items": len(items)}


def cmd_analyze(cfg, out: Path, jobs: int) -> dict:
    from .stats import analyze, default_hypotheses, ingest_trials, load_hypotheses
    records = ingest_trials(cfg["trials"], mirror_symmetric=bool(cfg["mirror_symmetric"]))
    hyps = load_hypotheses(cfg["hypotheses"]) if cfg["hypotheses"] else default_hypotheses()
    report = analyze(records, hyps, cfg["alpha"], cfg["m"], int(cfg["max_total"]))
    _write_json(out / "report.json", report)
    return {"tests": len(report["tests"]),
            "significant_corrected": sum(r["significant_corrected"] for r in report["tests"])}


def _sim_one(args):
    from .model import load_checkpoint
    from .policy import ModelPredictor, OraclePredictor, RandomPredictor, simulate_feeding
    from .scene import generate_scene
    cfg, i, out = args
    oracle = _oracle(cfg)
    if cfg["predictor"] == "model":
        pred = ModelPredictor(load_checkpoint(cfg["checkpoint"])[0])
    elif cfg["predictor"] == "random":
        pred = RandomPredictor()
    else:
        pred = OraclePredictor(oracle)
    scene = generate_scene(_scene_config(cfg), seed=cfg["seed"], index=i)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg["seed"], i, 0x5151])))
    log = simulate_feeding(scene, pred, oracle, rng, cfg["max_attempts"])
    log.write(out, f"plate_{i:04d}")
    return log.summary()


def cmd_simulate(cfg, out: Path, jobs: int) -> dict:
    rows = _map(_sim_one, [(cfg, i, out) for i in range(cfg["plates"])], jobs)
    att = [r["attempts"] for r in rows]
    acq = sum(r["items_acquired"] for r in rows)
    summary = {"plates": len(rows), "predictor": cfg["predictor"],
               "mean_attempts": float(np.mean(att)) if att else 0.0,
               "success_fraction": acq / sum(att) if att and sum(att) else 0.0,
               "items_acquired": acq, "runs": rows}
    _write_json(out / "summary.json", summary)
    return {k: v for k, v in summary.items() if k != "runs"}


COMMANDS: dict[str, Callable] = {
    "gen-scenes": cmd_gen_scenes, "gen-trials": cmd_gen_trials, "train": cmd_train, "eval": cmd_eval,
    "classify-env": cmd_classify_env, "analyze": cmd_analyze, "simulate": cmd_simulate,
}


# ----------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="biteacq", description="Desk-scale bite acquisition pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with flat dotted keys")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory (default runs/<command>-<timestamp>)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("-v", "--verbose", action="store_true")
        p.add_argument("--sequential", action="store_true",
                       help="strict sequential mode (single-threaded BLAS) for bit-reproducible runs")
        return p

    p = common(sub.add_parser("gen-scenes", help="write synthetic RGBD plate scenes"))
    p.add_argument("--n", type=int, help="number of scenes")
    p.add_argument("--n-items", dest="scene.n_items", type=int)
    p.add_argument("--noise-sigma", dest="scene.noise_sigma", type=float)
    p = common(sub.add_parser("gen-trials", help="simulate a trial CSV against the oracle"))
    p.add_argument("--trials-per-config", dest="trials_per_config", type=int)
    p.add_argument("--oracle", help="oracle CSV (default built-in table)")
    p = common(sub.add_parser("train", help="train a model on generated crops"))
    p.add_argument("--trials", help="trial CSV used as ground truth")
    p.add_argument("--scenes", dest="data.scenes", type=int)
    p.add_argument("--epochs", dest="train.max_epochs", type=int)
    p.add_argument("--holdout-item", dest="holdout_item")
    p.add_argument("--tiny", dest="model.tiny", action="store_const", const=True)
    p.add_argument("--no-color-augment", dest="train.color_augment", action="store_const", const=False)
    p = common(sub.add_parser("eval", help="score a checkpoint on fresh crops"))
    p.add_argument("--checkpoint")
    p.add_argument("--trials", help="trial CSV used as ground truth")
    p.add_argument("--scenes", dest="data.scenes", type=int)
    p.add_argument("--ooc-category", dest="ooc_category")
    p = common(sub.add_parser("classify-env", help="perceive one scene directory"))
    p.add_argument("--scene")
    p = common(sub.add_parser("analyze", help="Fisher exact tests with a Bonferroni gate"))
    p.add_argument("--trials")
    p.add_argument("--hypotheses", help="JSON list of hypothesis specs")
    p.add_argument("--m", type=int, help="number of comparisons for the corrected threshold")
    p.add_argument("--max-total", dest="max_total", type=int)
    p = common(sub.add_parser("simulate", help="run full-plate feeding simulations"))
    p.add_argument("--plates", type=int)
    p.add_argument("--predictor", choices=["oracle", "model", "random"])
    p.add_argument("--checkpoint")
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    skip = {"command", "config", "out", "jobs", "verbose", "sequential"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip}
    try:
        cfg = load_config(args.command, args.config, overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out = Path(args.out) if args.out else Path("runs") / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "config.json", {"command": args.command, **cfg})
        except OSError as exc:
            raise ConfigError(f"output directory not writable: {exc}") from exc
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        with sequential() if args.sequential else contextlib.nullcontext():
            result = COMMANDS[args.command](cfg, out, args.jobs)
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        logger.debug("command failed", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "out": str(out), **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
