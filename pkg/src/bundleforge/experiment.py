"""Pipeline stages shared by the command line and the end-to-end tests.

Every stage derives its randomness from the root seed:
``derive_seed(root, stage)``, with the stage given by name.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .checkpoint import load_checkpoint, load_meta, restore_into, save_checkpoint
from .config import ExperimentConfig
from .corpus import Dataset, Scenario, Split, build_eval_cases, compute_popularity, split_bundles, synth_generate
from .diet import DistillMode, Student, Teacher, Variant, train_student, train_teacher
from .evaluation import evaluate, popularity_sweep
from .feedback import FeedbackTable, train_feedback
from .numerics import derive_seed


def split_for(data: Dataset, seed: int) -> np.ndarray:
    return split_bundles(data.bundles, derive_seed(seed, "split"))


def synth(cfg: ExperimentConfig) -> Dataset:
    return synth_generate(replace(cfg.synth, seed=derive_seed(cfg.seed, "synth")))


def feedback(cfg: ExperimentConfig, data: Dataset) -> FeedbackTable:
    f = cfg.feedback
    return train_feedback(
        data.interactions, d=f.d, K=f.layers, epochs=f.epochs, lr=f.lr, reg=f.reg, batch_size=f.batch_size,
        seed=derive_seed(cfg.seed, "feedback"),
    )


def teacher(cfg: ExperimentConfig, data: Dataset):
    return train_teacher(data.corpus, data.bundles, split_for(data, cfg.seed), cfg.train)


def student(cfg: ExperimentConfig, data: Dataset, fb, teach, distill=None, variant=Variant.FULL):
    train = cfg.train if distill is None else replace(cfg.train, distill=DistillMode(distill))
    return train_student(data.corpus, data.bundles, split_for(data, cfg.seed), fb, teach, train, variant)


def eval_cases(cfg: ExperimentConfig, data: Dataset, scenarios=None) -> dict:
    profile = compute_popularity(data.interactions, cfg.head_ratio, cfg.tail_ratio)
    ids = np.flatnonzero(split_for(data, cfg.seed) == Split.TEST)
    scenarios = cfg.scenarios if scenarios is None else scenarios
    return build_eval_cases(data.bundles, ids, profile, scenarios, derive_seed(cfg.seed, "eval"))


def evaluate_model(cfg: ExperimentConfig, data: Dataset, model, scenarios=None) -> list:
    return evaluate(model, eval_cases(cfg, data, scenarios), cfg.ks)


def sweep(cfg: ExperimentConfig, data: Dataset, models: dict) -> list:
    ids = np.flatnonzero(split_for(data, cfg.seed) == Split.TEST)
    return popularity_sweep(models, data.bundles, ids, data.interactions.counts, cfg.sweep_ratios, cfg.ks)


# -- model persistence -------------------------------------------------------

def save_model(path, model) -> None:
    save_checkpoint(path, model.params, model.meta)


def load_teacher(path) -> Teacher:
    meta = load_meta(path)
    t = Teacher(meta["n_items"], meta["d"], meta["bundle_layers"])
    restore_into(t.params, load_checkpoint(path), str(path))
    return t.freeze()


def load_student(path, data: Dataset, fb) -> Student:
    meta = load_meta(path)
    s = Student(
        data.corpus, fb, meta["d"], meta["item_layers"], meta["bundle_layers"],
        variant=meta["variant"], content_path=meta["content_path"],
    )
    restore_into(s.params, load_checkpoint(path), str(path))
    return s


def recall_in(reports, scenario, k: int = 20):
    """Recall@k of one scenario from a report list (None if absent or empty)."""
    name = Scenario(scenario).value
    for r in reports:
        if r.scenario == name:
            return r.get(f"recall@{k}")
    return None
