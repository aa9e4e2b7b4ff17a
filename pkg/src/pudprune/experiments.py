"""Desk-scale experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import data, trainer
from .config import PipelineConfig
from .data import LabeledDataset, UnlabeledDataset
from .model import Model, collect_gamma

log = logging.getLogger(__name__)


@dataclass
class TrendSetup:
    """The synthetic teacher/student setting used for the trend experiments."""

    class_count: int = 8
    widths: tuple[int, ...] = (16, 32, 64, 64)
    n_teacher: int = 20000
    n_labeled: int = 100
    n_unlabeled: int = 5000
    n_test: int = 1000
    bias_shift: float = 0.3
    teacher_iterations: int = 1500
    teacher_lr: float = 0.05
    teacher_batch: int = 64
    data_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    pipeline: PipelineConfig = field(default_factory=lambda: PipelineConfig(
        lam=0.15, iterations_sparse=400, lr_sparse=0.01, lr_finetune=0.005,
        widths=(16, 32, 64, 64)))


@dataclass
class Teacher:
    model: Model
    unlabeled: UnlabeledDataset
    test: LabeledDataset
    accuracy: float
    seconds: float


def train_teacher(setup: TrendSetup) -> Teacher:
    """Pretrain the teacher on a large labeled pool of the synthetic task."""
    t0 = time.time()
    big, unlabeled, test = data.synth_generate(setup.data_seed, setup.class_count, setup.n_teacher,
                                               setup.n_unlabeled, setup.bias_shift, setup.n_test)
    cfg = setup.pipeline.replace(widths=setup.widths, class_count=setup.class_count)
    model = trainer.new_teacher(cfg, big, setup.data_seed)
    trainer.pretrain(model, big, setup.teacher_iterations, setup.teacher_lr, setup.teacher_batch,
                     seed=setup.data_seed)
    acc = trainer.evaluate(model, test)
    return Teacher(model, unlabeled, test, acc, time.time() - t0)


def labeled_subset(setup: TrendSetup, seed: int) -> LabeledDataset:
    """The small labeled pool for one repetition (fresh draw per seed)."""
    lab, _, _ = data.synth_generate(1000 + seed, setup.class_count, setup.n_labeled, 0, 0.0,
                                    n_test=0)
    return lab


def run_cell(teacher: Teacher, setup: TrendSetup, toggles, seed: int) -> float:
    cfg = trainer.cell_config(setup.pipeline.replace(seed=seed), toggles)
    res = trainer.run_pipeline(teacher.model, labeled_subset(setup, seed), teacher.unlabeled,
                               cfg, teacher.test)
    return res.accuracy["final"]


def ablation(teacher: Teacher, setup: TrendSetup, grid=trainer.ABLATION_GRID) -> dict[str, list[float]]:
    """Final accuracy of every toggle row of ``grid`` for every seed."""
    out: dict[str, list[float]] = {}
    for toggles in grid:
        name = trainer.cell_name(toggles)
        for seed in setup.seeds:
            t0 = time.time()
            acc = run_cell(teacher, setup, toggles, seed)
            log.info("cell %s seed %d accuracy %.4f (%.0fs)", name, seed, acc, time.time() - t0)
            out.setdefault(name, []).append(acc)
    return out


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


# ----------------------------------------------------------------------------
# sparsity response

@dataclass
class SparsitySetup:
    lams: tuple[float, ...] = (0.0, 0.001, 0.01, 0.1)
    widths: tuple[int, ...] = (8, 16, 16, 16)
    n_labeled: int = 256
    iterations: int = 150
    lr: float = 0.01
    seed: int = 0


def sparsity_sweep(setup: SparsitySetup = SparsitySetup()) -> dict[float, float]:
    """Final ||Gamma||_1 after labeled-only sparse training at each lambda,
    all runs starting from the same initialization and data stream."""
    lab, _, _ = data.synth_generate(setup.seed, 8, setup.n_labeled, 0, 0.0, n_test=0)
    base = PipelineConfig(widths=setup.widths, seed=setup.seed, iterations_sparse=setup.iterations,
                          lr_sparse=setup.lr).labeled_only()
    init = trainer.new_teacher(base, lab, setup.seed)
    out = {}
    for lam in setup.lams:
        model = copy.deepcopy(init)
        trainer.sparse_retrain(model, None, lab, None, base.replace(lam=lam))
        out[lam] = float(np.abs(collect_gamma(model).values()).sum())
    return out
