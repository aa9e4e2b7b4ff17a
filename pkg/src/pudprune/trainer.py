"""Sparse retraining with unlabeled data, pruning and fine-tuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from . import losses
from . import tensor as T
from .config import PipelineConfig
from .data import Batch, LabeledDataset, UnlabeledDataset, channel_stats, sample_minibatch
from .errors import NumericError
from .model import Model, PruneReport, build, collect_gamma, prune_fraction, toy_cnn
from .tensor import Tensor

log = logging.getLogger(__name__)


def lr_at(iteration: int, total: int, base: float, kind: str) -> float:
    """Piecewise-constant learning rate; a drop applies once
    ``iteration >= ceil(fraction * total)``."""
    if kind == "halves-drop-0.1":
        marks, factor = (0.5, 0.75), 0.1
    elif kind == "milestones-40-70-90-drop-0.3":
        marks, factor = (0.4, 0.7, 0.9), 0.3
    else:
        return base
    drops = sum(iteration >= math.ceil(m * total) for m in marks)
    return base * factor ** drops


class SGD:
    """SGD with momentum (velocity form); weight decay only on ``*.weight``."""

    def __init__(self, params: list[tuple[str, Tensor]], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in params}

    def step(self, grads: T.Gradients, lr: float, extra: dict[str, np.ndarray] | None = None):
        for name, t in self.params:
            g = grads[t.node].data if t.node in grads else np.zeros_like(t.data)
            if extra and name in extra:
                g = g + extra[name]
            if self.weight_decay and name.endswith(".weight"):
                g = g + self.weight_decay * t.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data -= lr * v


def make_discriminator(feature_shape: tuple[int, int, int], seed: int) -> Model:
    """Two 3x3 convs (C -> C -> 2C) with ReLU, global average pool and a
    single-logit dense head."""
    c, h, w = feature_shape
    specs = [L.conv(c), L.relu(), L.conv(2 * c), L.relu(), L.avgpool(min(h, w)), L.flatten(),
             L.dense(1)]
    return build(specs, seed, feature_shape, split_index=1)


def disc_logits(D: Model, h: Tensor) -> Tensor:
    return T.reshape(D.forward(h), (h.shape[0],))


def discriminator_step(h_labeled: np.ndarray, h_unlabeled: np.ndarray, D: Model, opt: SGD,
                       lr: float, balance: float) -> float:
    """One SGD step on the discriminator loss; features are constants here."""
    n_l = len(h_labeled)
    z = disc_logits(D, Tensor(np.concatenate([h_labeled, h_unlabeled])))
    loss = losses.discriminator_loss_from_logits(T.rows(z, 0, n_l), T.rows(z, n_l, z.shape[0]),
                                                 balance)
    opt.step(T.backward(loss), lr)
    return loss.item()


@dataclass
class StepOutcome:
    parts: dict[str, float]
    total: float
    disc: float | None = None


def student_loss(batch: Batch, logits: Tensor, features: Tensor | None, model: Model,
                 D: Model | None, config: PipelineConfig, lam: float) -> tuple[Tensor, losses.LossParts]:
    n_l, n = batch.n_labeled, batch.size
    lab = T.rows(logits, 0, n_l)
    unl = T.rows(logits, n_l, n)
    parts = losses.LossParts(supervision=losses.supervision_loss(lab, batch.y_labeled)
                             if n_l else 0.0)
    if config.distillation and config.alpha > 0:
        terms = []
        if batch.n_unlabeled:
            terms.append(losses.distillation_loss(unl, batch.teacher_unlabeled, config.tau,
                                                  weighted=config.confidence_weighting))
        if config.distill_on_labeled and n_l:
            terms.append(losses.distillation_loss(lab, batch.teacher_labeled, config.tau,
                                                  weighted=False))
        if terms:
            parts.distillation = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    if config.adversarial and config.beta > 0 and D is not None and batch.n_unlabeled and n_l:
        z = disc_logits(D, features)
        parts.adversarial = losses.aligner_loss_from_logits(
            T.rows(z, n_l, n), T.rows(z, 0, n_l) if config.literal_eq10_aligner else None)
    if config.rademacher and config.eta > 0:
        parts.rademacher = losses.rademacher_loss(logits)
    if lam > 0:
        parts.l1 = losses.l1_sparsity(collect_gamma(model).values())[0]
    return losses.total_loss(parts, config.weights(lam)), parts


def student_step(batch: Batch, model: Model, D: Model | None, config: PipelineConfig,
                 opt: SGD, lr: float, lam: float, disc_opt: SGD | None = None,
                 disc_lr: float = 0.0, balance: float = 1.0) -> StepOutcome:
    """Forward the student once, update D on the detached aligner features
    (when given ``disc_opt``), then take one SGD step on the combined loss."""
    model.train()
    x = model.prepare(np.concatenate([batch.x_labeled, batch.x_unlabeled]))
    features = model.f1(x)
    logits = model.f2(features)
    disc = None
    if D is not None and disc_opt is not None and batch.n_unlabeled and batch.n_labeled:
        h = features.data
        disc = discriminator_step(h[:batch.n_labeled], h[batch.n_labeled:], D, disc_opt,
                                  disc_lr, balance)
    try:
        total, parts = student_loss(batch, logits, features, model, D, config, lam)
    except NumericError as exc:
        log.error("non-finite loss; gamma L1=%s, logits range=[%s, %s]",
                  np.abs(collect_gamma(model).values()).sum(), logits.data.min(), logits.data.max())
        raise NumericError(f"{exc}; aborting training") from None
    grads = T.backward(total)
    extra = None
    if lam > 0:
        extra = {f"{i}.gamma": lam * np.sign(norm.gamma.data) for i, norm in model.norm_layers()}
    opt.step(grads, lr, extra)
    return StepOutcome(parts.values(), total.item(), disc)


# ----------------------------------------------------------------------------
# metrics

FIELDS = ("stage", "iteration", "supervision", "distillation", "adversarial", "rademacher",
          "l1", "total", "disc", "gamma_l1", "lr", "accuracy")


@dataclass
class MetricsRecord:
    stage: str
    iteration: int
    supervision: float
    distillation: float
    adversarial: float
    rademacher: float
    l1: float
    total: float
    disc: float | None
    gamma_l1: float
    lr: float
    accuracy: float | None = None

    def line(self) -> str:
        vals = []
        for name in FIELDS:
            v = getattr(self, name)
            vals.append(f"{name}={'nan' if v is None else (repr(v) if isinstance(v, float) else v)}")
        return " ".join(vals)


def parse_metrics_line(line: str) -> dict[str, str]:
    return dict(kv.split("=", 1) for kv in line.split())


class MetricsLog:
    """Append-only record list, mirrored to a file when a path is given."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[MetricsRecord] = []
        self.path = Path(path) if path else None
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("a", encoding="utf-8")

    def append(self, rec: MetricsRecord) -> None:
        last = self.records[-1] if self.records else None
        if last is not None and rec.stage == last.stage and rec.iteration <= last.iteration:
            raise ValueError(f"metrics iteration {rec.iteration} after {last.iteration}")
        self.records.append(rec)
        if self._fh:
            self._fh.write(rec.line() + "\n")
            self._fh.flush()

    def write_summary(self, summary: dict) -> None:
        if self._fh:
            self._fh.write("# summary\n")
            for k, v in summary.items():
                self._fh.write(f"{k}={v}\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


# ----------------------------------------------------------------------------
# stages

def evaluate(model: Model, dataset: LabeledDataset, batch_size: int = 500) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    logits = model.predict(dataset.images, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def _stage_rng(config: PipelineConfig, stage: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, stage])


def _run_stage(stage: str, model: Model, teacher: Model | None, labeled: LabeledDataset,
               unlabeled: UnlabeledDataset | None, config: PipelineConfig, iterations: int,
               base_lr: float, lam: float, metrics: MetricsLog, stage_code: int) -> Model:
    rng = _stage_rng(config, stage_code)
    use_unlabeled = unlabeled is not None and len(unlabeled) > 0 and config.batch_unlabeled > 0
    sizes = (config.batch_labeled, config.batch_unlabeled if use_unlabeled else 0)
    needs_teacher = config.distillation and config.alpha > 0
    D = disc_opt = None
    balance = 1.0
    if use_unlabeled and config.adversarial and config.beta > 0:
        D = make_discriminator(model.shapes()[model.split_index], config.seed + 7919 * stage_code)
        disc_opt = SGD(D.parameters(), config.momentum)
        balance = config.disc_balance or len(unlabeled) / len(labeled)
    opt = SGD(model.parameters(), config.momentum, config.weight_decay)
    for it in range(iterations):
        lr = lr_at(it, iterations, base_lr, config.lr_schedule)
        batch = sample_minibatch(labeled, unlabeled if use_unlabeled else None, sizes,
                                 teacher if needs_teacher else None, rng, config.tau,
                                 config.augment, config.confidence_tau)
        out = student_step(batch, model, D, config, opt, lr, lam, disc_opt,
                           lr_at(it, iterations, config.disc_lr, config.lr_schedule), balance)
        gamma_l1 = float(np.abs(collect_gamma(model).values()).sum())
        metrics.append(MetricsRecord(stage, it, total=out.total, disc=out.disc,
                                     gamma_l1=gamma_l1, lr=lr, **out.parts))
    return model


def sparse_retrain(model: Model, teacher: Model | None, labeled: LabeledDataset,
                   unlabeled: UnlabeledDataset | None, config: PipelineConfig,
                   metrics: MetricsLog | None = None, iterations: int | None = None):
    """Train with the full objective including the L1 penalty on gammas.

    ``model`` is modified in place (callers start it as a copy of the teacher).
    """
    metrics = metrics if metrics is not None else MetricsLog()
    n = config.iterations_sparse if iterations is None else iterations
    _run_stage("sparse", model, teacher, labeled, unlabeled, config, n, config.lr_sparse,
               config.lam, metrics, 1)
    return model, metrics


def finetune(model: Model, teacher: Model | None, labeled: LabeledDataset,
             unlabeled: UnlabeledDataset | None, config: PipelineConfig,
             metrics: MetricsLog | None = None, iterations: int | None = None):
    """Retrain the pruned network; the L1 term is always off here."""
    metrics = metrics if metrics is not None else MetricsLog()
    if not config.finetune_unlabeled:
        config = config.labeled_only().replace(lr_schedule=config.lr_schedule)
        unlabeled = None
    n = config.iterations_finetune if iterations is None else iterations
    _run_stage("finetune", model, teacher, labeled, unlabeled, config, n, config.lr_finetune,
               0.0, metrics, 2)
    return model, metrics


def pretrain(model: Model, labeled: LabeledDataset, iterations: int, lr: float,
             batch_size: int = 64, seed: int = 0, schedule: str = "halves-drop-0.1",
             metrics: MetricsLog | None = None, gamma_lam: float = 0.0,
             augment: bool = True) -> Model:
    """Plain supervised training, used to produce teachers."""
    cfg = PipelineConfig(lam=gamma_lam, seed=seed, batch_labeled=batch_size, lr_sparse=lr,
                         augment=augment).labeled_only().replace(lr_schedule=schedule)
    if model.input_mean is None:
        model.input_mean, model.input_std = channel_stats(labeled.images)
    metrics = metrics if metrics is not None else MetricsLog()
    return _run_stage("pretrain", model, None, labeled, None, cfg, iterations, lr, gamma_lam,
                      metrics, 0)


def new_teacher(config: PipelineConfig, labeled: LabeledDataset, seed: int) -> Model:
    model = build(toy_cnn(config.widths, config.class_count, labeled.images.shape[1],
                          labeled.images.shape[2]), seed, labeled.images.shape[1:])
    if config.norm_mean is not None:
        model.input_mean = np.asarray(config.norm_mean)
        model.input_std = np.asarray(config.norm_std)
    else:
        model.input_mean, model.input_std = channel_stats(labeled.images)
    return model


@dataclass
class PipelineResult:
    model: Model
    report: PruneReport
    metrics: MetricsLog
    accuracy: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        out = {f"accuracy_{k}": v for k, v in self.accuracy.items()}
        out.update(params_before=self.report.params_before, params_after=self.report.params_after,
                   flops_before=self.report.flops_before, flops_after=self.report.flops_after,
                   channels_pruned=self.report.pruned_count, threshold=self.report.threshold)
        return out


def run_pipeline(teacher: Model, labeled: LabeledDataset, unlabeled: UnlabeledDataset | None,
                 config: PipelineConfig, test: LabeledDataset | None = None,
                 metrics: MetricsLog | None = None) -> PipelineResult:
    """Sparse retraining, global-threshold pruning, fine-tuning, evaluation."""
    metrics = metrics if metrics is not None else MetricsLog(config.metrics_path)
    student = copy.deepcopy(teacher)
    acc = {}
    if test is not None:
        acc["teacher"] = evaluate(teacher, test)
    sparse_retrain(student, teacher, labeled, unlabeled, config, metrics)
    if test is not None:
        acc["sparse"] = evaluate(student, test)
    student, report = prune_fraction(student, config.prune_fraction, config.guard)
    if test is not None:
        acc["pruned"] = evaluate(student, test)
    finetune(student, teacher, labeled, unlabeled, config, metrics)
    if test is not None:
        acc["final"] = evaluate(student, test)
    result = PipelineResult(student, report, metrics, acc)
    metrics.write_summary(result.summary())
    return result


ABLATION_GRID = (
    # distillation, confidence, adversarial, rademacher
    (False, False, False, False),
    (True, False, False, False),
    (True, True, False, False),
    (True, True, True, False),
    (True, True, False, True),
    (True, True, True, True),
)


def cell_name(toggles) -> str:
    return "d{:d}c{:d}a{:d}r{:d}".format(*toggles)


def cell_config(config: PipelineConfig, toggles) -> PipelineConfig:
    distill, conf, adv, rad = toggles
    if not any(toggles):
        return config.labeled_only()
    return config.replace(distillation=distill, confidence_weighting=conf, adversarial=adv,
                          rademacher=rad)
