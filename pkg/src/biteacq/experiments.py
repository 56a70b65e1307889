"""Crop datasets built from generated scenes, and the in-class / out-of-class experiments."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ENVS, Dataset, History, Model, SpanetConfig, TrainHyper, build_model, env_onehot, \
    prepare_crop_u8, train
from .scene import ITEM_TYPES, OracleTable, PackingError, SceneConfig, axis_in_crop, crop_item, \
    default_oracle, generate_scene, generate_trial_dataset, items_of
from .stats import CATEGORIES, ProposalScore, SimilarityReport, SuccessTable, expected_success_of_proposal, \
    ooc_similarity, random_proposal_expectation, success_table, target_vector

logger = logging.getLogger(__name__)

ALL_ITEMS = tuple(ITEM_TYPES)


def truth_table(oracle: OracleTable | None = None, trials_per_config: int = 10, seed: int = 0,
                items: Sequence[str] = ALL_ITEMS) -> SuccessTable:
    """Empirical success table from simulated trials; the ground truth that models are scored against."""
    return success_table(generate_trial_dataset(oracle or default_oracle(), trials_per_config, seed, items=items))


@dataclass
class CropSet:
    images: np.ndarray  # uint8 [N,3,S,S]
    items: list[str]
    envs: list[str]
    axes: np.ndarray  # [N,4] crop-normalised ground-truth axis

    def __len__(self) -> int:
        return len(self.items)

    @property
    def categories(self) -> list[str]:
        return [ITEM_TYPES[i].category for i in self.items]

    def subset(self, idx) -> "CropSet":
        idx = np.asarray(idx, dtype=int)
        return CropSet(self.images[idx], [self.items[i] for i in idx], [self.envs[i] for i in idx], self.axes[idx])

    def where(self, keep) -> "CropSet":
        return self.subset([i for i in range(len(self)) if keep(self.items[i], self.envs[i])])

    def dataset(self, truth: SuccessTable) -> Dataset:
        targets = np.stack([target_vector(truth, it, e, ax) for it, e, ax in zip(self.items, self.envs, self.axes)])
        return Dataset(self.images, env_onehot(self.envs), targets.astype(np.float32))


def build_crops(n_scenes: int, seed: int, items: Sequence[str] = ALL_ITEMS, n_items: int = 5,
                input_size: int = 288, noise_sigma: float = 0.0) -> CropSet:
    """Crops of every item in ``n_scenes`` generated scenes.

    Items and environment labels are assigned round-robin so every
    (item, env) pair is equally represented.
    """
    images, names, envs, axes = [], [], [], []
    cfg = SceneConfig(n_items=n_items, noise_sigma=noise_sigma)
    k = 0
    for s in range(n_scenes):
        reqs = []
        for _ in range(n_items):
            reqs.append((items[k % len(items)], ENVS[(k // len(items)) % len(ENVS)]))
            k += 1
        for retry in range(20):
            try:
                scene = generate_scene(cfg, seed=seed, index=s + 1_000_003 * retry, requests=reqs)
                break
            except PackingError:
                continue
        else:
            raise PackingError(f"scene {s} could not be packed")
        for it in scene.items:
            crop, box = crop_item(scene.rgb, it.bbox)
            images.append(prepare_crop_u8(crop, input_size))
            names.append(it.spec.item)
            envs.append(str(it.spec.env_label))
            axes.append(axis_in_crop(it.axis, box))
    if not images:
        return CropSet(np.zeros((0, 3, input_size, input_size), np.uint8), [], [], np.zeros((0, 4)))
    return CropSet(np.stack(images), names, envs, np.array(axes))


def stratified_split(keys: Sequence, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/validation indices with each key's samples split in the same proportion."""
    rng = np.random.Generator(np.random.PCG64(seed))
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    tr, va = [], []
    for k in sorted(groups, key=str):
        idx = np.array(groups[k])
        rng.shuffle(idx)
        n_val = int(round(len(idx) * val_fraction))
        if len(idx) > 1:
            n_val = min(max(n_val, 1), len(idx) - 1)
        va.extend(idx[:n_val].tolist())
        tr.extend(idx[n_val:].tolist())
    return np.array(sorted(tr), dtype=int), np.array(sorted(va), dtype=int)


def fit(crops: CropSet, truth: SuccessTable, config: SpanetConfig | None = None, hyper: TrainHyper | None = None,
        val_fraction: float = 0.15, enforce_budget: bool = True) -> tuple[Model, History]:
    """Train a fresh model with a validation split stratified by (category, env)."""
    hyper = hyper or TrainHyper()
    tr, va = stratified_split(list(zip(crops.categories, crops.envs)), val_fraction, hyper.seed)
    data = crops.dataset(truth)
    model = build_model(config or SpanetConfig(seed=hyper.seed), enforce_budget=enforce_budget)
    t0 = time.time()
    hist = train(model, data.subset(tr), data.subset(va), hyper)
    logger.info("trained %d samples in %.1fs (best epoch %d)", len(tr), time.time() - t0, hist.best_epoch)
    return model, hist


def predict_rates(model: Model, crops: CropSet, batch_size: int = 64) -> np.ndarray:
    """Clamped rate predictions [N,6] for stored crops."""
    out = []
    for s in range(0, len(crops), batch_size):
        x = crops.images[s:s + batch_size].astype(model.dtype) / model.dtype.type(255.0)
        out.append(np.clip(model.infer(x, env_onehot(crops.envs[s:s + batch_size]))[:, 4:], 0.0, 1.0))
    return np.concatenate(out) if out else np.zeros((0, 6))


@dataclass
class Evaluation:
    score: ProposalScore
    random_baseline: float
    n: int

    def to_json(self) -> dict:
        s = self.score
        return {"expected_success": s.mean, "stderr": s.stderr, "best_possible": s.benchmark, "regret": s.regret,
                "random_baseline": self.random_baseline, "n": self.n}


def evaluate(model: Model, crops: CropSet, truth: SuccessTable) -> Evaluation:
    rates = predict_rates(model, crops)
    samples = [(it, e, r) for it, e, r in zip(crops.items, crops.envs, rates)]
    score = expected_success_of_proposal(samples, truth)
    return Evaluation(score, random_proposal_expectation([(it, e) for it, e, _ in samples], truth), len(samples))


def item_profile(truth: SuccessTable, item: str) -> np.ndarray:
    """An item's success-rate vector averaged over environments."""
    return np.mean([truth.rates(item, e) for e in ENVS], axis=0)


@dataclass
class OOCFold:
    category: str
    held_out: str
    in_class: Evaluation
    out_of_class: Evaluation
    similarity: SimilarityReport
    history: History = field(repr=False, default=None)

    @property
    def nearest_group_correct(self) -> bool:
        return self.similarity.nearest_group[self.held_out] == self.category

    def to_json(self) -> dict:
        return {"category": self.category, "held_out": self.held_out, "in_class": self.in_class.to_json(),
                "out_of_class": self.out_of_class.to_json(), "similarity": self.similarity.to_json(),
                "nearest_group_correct": self.nearest_group_correct}


def holdout_item(category: str) -> str:
    """The item left out of training in a category's fold (its first listed item)."""
    return items_of(category)[0]


def similarity_for(model: Model, crops: CropSet, truth: SuccessTable, held_out: str) -> SimilarityReport:
    """Softmax-L2 similarity of the held-out item's mean prediction to every other item's ground truth."""
    sub = crops.where(lambda it, e: it == held_out)
    pred = predict_rates(model, sub).mean(axis=0)
    refs = {it: item_profile(truth, it) for it in truth.items() if it != held_out}
    return ooc_similarity({held_out: pred}, refs, {it: ITEM_TYPES[it].category for it in refs})


def ooc_fold(category: str, train_crops: CropSet, test_crops: CropSet, truth: SuccessTable,
             config: SpanetConfig | None = None, hyper: TrainHyper | None = None,
             enforce_budget: bool = True) -> tuple[OOCFold, Model]:
    held = holdout_item(category)
    model, hist = fit(train_crops.where(lambda it, e: it != held), truth, config, hyper,
                      enforce_budget=enforce_budget)
    ic = evaluate(model, test_crops.where(lambda it, e: it != held), truth)
    ooc = evaluate(model, test_crops.where(lambda it, e: it == held), truth)
    sim = similarity_for(model, test_crops, truth, held)
    return OOCFold(category, held, ic, ooc, sim, hist), model


def ooc_experiment(train_crops: CropSet, test_crops: CropSet, truth: SuccessTable,
                   categories: Sequence[str] = CATEGORIES, config: SpanetConfig | None = None,
                   hyper: TrainHyper | None = None) -> list[OOCFold]:
    return [ooc_fold(c, train_crops, test_crops, truth, config, hyper)[0] for c in categories]
