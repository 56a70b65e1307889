"""Argmax acquisition policy and the full-plate feeding simulation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .model import Model, predict_batch
from .perception import EnvClass, PerceptionParams, PlateCircle, detect_plate, perceive
from .scene import OracleTable, Scene, crop_item, sample_trial
from .stats import ACTIONS, CATEGORIES


class ActionId(IntEnum):
    VS_0 = 0
    VS_90 = 1
    TV_0 = 2
    TV_90 = 3
    TA_0 = 4
    TA_90 = 5

    @property
    def label(self) -> str:
        return ACTIONS[self.value]

    @classmethod
    def parse(cls, text: str) -> "ActionId":
        return cls(ACTIONS.index(text))


class PolicyError(ValueError):
    pass


def select_action(rates, feasible=None, item_ids: Sequence[int] | None = None) -> tuple[int, ActionId, float]:
    """Global argmax over feasible (item, action) pairs.

    Ties go to the lowest item id, then the lowest action ordinal.
    """
    r = np.asarray(rates, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != len(ActionId):
        raise PolicyError(f"rates must be items x {len(ActionId)}, got {r.shape}")
    ok = np.ones(r.shape, dtype=bool) if feasible is None else np.asarray(feasible, dtype=bool)
    if ok.shape != r.shape:
        raise PolicyError("feasibility mask shape differs from rates")
    if not ok.any():
        raise PolicyError("no feasible (item, action) pair")
    ids = list(range(r.shape[0])) if item_ids is None else [int(i) for i in item_ids]
    if len(ids) != r.shape[0]:
        raise PolicyError("item_ids length differs from rates rows")
    best_val = np.max(r[ok])
    cands = [(ids[i], a) for i, a in zip(*np.nonzero(ok & (r == best_val)))]
    item, action = min(cands)
    return item, ActionId(int(action)), float(best_val)


# ---------------------------------------------------------------- predictors

@dataclass
class Observation:
    """What the policy sees for one item at one step."""

    item_id: int
    category: str  # ground truth, only oracle predictors may use it
    env: EnvClass  # perceived
    bbox: tuple[int, int, int, int]
    crop: np.ndarray


class Predictor(Protocol):
    name: str

    def __call__(self, observations: Sequence[Observation], rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class OraclePredictor:
    oracle: OracleTable
    name: str = "oracle"

    def __call__(self, observations, rng):
        return np.array([self.oracle.rates(o.category, o.env) for o in observations]).reshape(-1, 6)


@dataclass
class ModelPredictor:
    model: Model
    name: str = "model"

    def __call__(self, observations, rng):
        if not observations:
            return np.zeros((0, 6))
        preds = predict_batch(self.model, [o.crop for o in observations], [str(o.env) for o in observations])
        return np.array([p.rates for p in preds])


@dataclass
class RandomPredictor:
    """Uniform scores: a random item and a random action every step."""

    name: str = "random"

    def __call__(self, observations, rng):
        return rng.random((len(observations), 6))


# ---------------------------------------------------------------- simulation

@dataclass
class AttemptRecord:
    step: int
    item_id: int
    category: str
    env: str
    action: str
    pred_rate: float
    true_rate: float
    outcome: str

    def __post_init__(self):
        if self.outcome not in ("success", "failure"):
            raise ValueError(f"outcome must be success or failure, got {self.outcome!r}")


@dataclass
class RunLog:
    seed: int
    predictor: str
    n_items: int
    attempts: list[AttemptRecord] = field(default_factory=list)
    categories: dict[int, str] = field(default_factory=dict)

    @property
    def acquired(self) -> int:
        return sum(a.outcome == "success" for a in self.attempts)

    @property
    def n_attempts(self) -> int:
        return len(self.attempts)

    @property
    def success_fraction(self) -> float:
        return self.acquired / self.n_attempts if self.attempts else 0.0

    def summary(self) -> dict:
        return {"seed": self.seed, "predictor": self.predictor, "n_items": self.n_items,
                "items_acquired": self.acquired, "attempts": self.n_attempts,
                "success_fraction": self.success_fraction}

    def write(self, directory, stem: str = "run") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "item_id", "category", "env", "action", "pred_rate", "true_rate", "outcome"])
            for a in self.attempts:
                w.writerow([a.step, a.item_id, a.category, a.env, a.action, repr(a.pred_rate), repr(a.true_rate),
                            a.outcome])
        (d / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def _match_segments(scene: Scene, segments) -> list[int | None]:
    """Scene item id for each perceived segment, by largest mask overlap."""
    out = []
    for seg in segments:
        best, best_ov = None, 0
        for it in scene.items:
            ov = int(np.count_nonzero(seg.mask & it.mask))
            if ov > best_ov:
                best, best_ov = it.item_id, ov
        out.append(best)
    return out


def observe(scene: Scene, plate: PlateCircle, params: PerceptionParams | None = None) -> list[Observation]:
    """Perceive the current scene and attach crops; items are listed by id."""
    res = perceive(scene.rgb, scene.depth, params, plate=plate)
    ids = _match_segments(scene, [p.segment for p in res.items])
    by_id = {it.item_id: it for it in scene.items}
    obs = []
    for pid, p in zip(ids, res.items):
        if pid is None or any(o.item_id == pid for o in obs):
            continue
        crop, _ = crop_item(scene.rgb, p.segment.bbox)
        obs.append(Observation(pid, by_id[pid].spec.category, p.env, tuple(p.segment.bbox), crop))
    obs.sort(key=lambda o: o.item_id)
    return obs


def simulate_feeding(scene: Scene, predictor: Predictor, oracle: OracleTable, rng: np.random.Generator,
                     max_attempts: int | None = None, params: PerceptionParams | None = None,
                     feasible=None) -> RunLog:
    """Run the argmax policy until the plate is empty or attempts run out.

    Outcomes are drawn against the oracle at each item's true environment.
    A failure leaves the scene untouched; a success removes the item and the
    scene is re-rendered and re-perceived. ``feasible`` is an optional
    callable (observations) -> bool mask emulating planning failures.
    """
    if not scene.items:
        raise PolicyError("scene has no items")
    n0 = len(scene.items)
    max_attempts = 3 * n0 if max_attempts is None else int(max_attempts)
    if max_attempts < n0:
        raise PolicyError(f"max_attempts ({max_attempts}) must be >= number of items ({n0})")
    log = RunLog(scene.seed, getattr(predictor, "name", type(predictor).__name__), n0,
                 categories={it.item_id: it.spec.category for it in scene.items})
    plate = detect_plate(scene.depth, params)
    obs = observe(scene, plate, params)
    for step in range(max_attempts):
        if not scene.items:
            break
        if not obs:
            raise PolicyError(f"perception found no items while {len(scene.items)} remain")
        rates = np.asarray(predictor(obs, rng), dtype=np.float64)
        if rates.shape != (len(obs), 6):
            raise PolicyError(f"predictor returned {rates.shape} for {len(obs)} items")
        mask = None if feasible is None else feasible(obs)
        item_id, action, pred = select_action(rates, mask, [o.item_id for o in obs])
        truth = next(it for it in scene.items if it.item_id == item_id)
        o = next(o for o in obs if o.item_id == item_id)
        true_env = truth.spec.env_label
        ok = sample_trial(truth.spec.category, true_env, int(action), oracle, rng)
        log.attempts.append(AttemptRecord(step, item_id, truth.spec.category, str(o.env), action.label, pred,
                                          oracle.prob(truth.spec.category, true_env, int(action)),
                                          "success" if ok else "failure"))
        if ok:
            scene = scene.without(item_id, rng)
            obs = observe(scene, plate, params) if scene.items else []
    return log


def geometric_expectation(scene: Scene, oracle: OracleTable) -> float:
    """Expected attempts if every item is tried with its best action until it comes off: sum of 1/p_best."""
    total = 0.0
    for it in scene.items:
        _, p = oracle.best(it.spec.category, it.spec.env_label)
        total += math.inf if p == 0 else 1.0 / p
    return total


# ------------------------------------------------------------------- report

def regret_report(model_logs: Sequence[RunLog], oracle_logs: Sequence[RunLog]) -> dict:
    """Per-category and overall success fractions and attempt counts, model vs oracle."""
    ms, os_ = [lg.seed for lg in model_logs], [lg.seed for lg in oracle_logs]
    if ms != os_:
        raise PolicyError("model and oracle runs must cover identical seeds in the same order")

    def tally(logs):
        per = {c: [0, 0] for c in CATEGORIES}
        acq = att = items = 0
        for lg in logs:
            for a in lg.attempts:
                per.setdefault(a.category, [0, 0])
                per[a.category][0] += a.outcome == "success"
                per[a.category][1] += 1
            acq += lg.acquired
            att += lg.n_attempts
            items += lg.n_items
        return {
            "success_fraction": acq / att if att else 0.0,
            "attempts": att,
            "items": items,
            "items_acquired": acq,
            "mean_attempts_per_plate": att / len(logs) if logs else 0.0,
            "per_category": {c: {"success_fraction": (s / n if n else None), "attempts": n}
                             for c, (s, n) in per.items()},
        }

    m, o = tally(model_logs), tally(oracle_logs)
    return {"plates": len(ms), "model": m, "oracle": o, "gap": o["success_fraction"] - m["success_fraction"]}


def logs_to_json(logs: Sequence[RunLog]) -> list[dict]:
    return [{**lg.summary(), "attempts_log": [asdict(a) for a in lg.attempts]} for lg in logs]
