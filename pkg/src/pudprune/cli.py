"""Command-line entry point: ``pudprune <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.
Failures print one line ``error category=<Category> message=<text>`` to
stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data, model as M, trainer
from .config import PipelineConfig, load_config
from .errors import ConfigError, PUDError, UsageError

log = logging.getLogger("pudprune")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, applied after the file (repeatable)")
    p.add_argument("--seed", type=int, help="shortcut for --override seed=N")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")
    flags = {
        "in": dict(dest="inp", metavar="CKPT", help="input checkpoint"),
        "out": dict(metavar="PATH", help="output path"),
        "teacher": dict(metavar="CKPT", help="frozen teacher checkpoint"),
        "data-labeled": dict(metavar="FILE", help="CIFAR-10 binary batch of labeled images"),
        "data-unlabeled": dict(metavar="FILE", help="CFTD tensor file of unlabeled images"),
        "data-test": dict(metavar="FILE", help="CIFAR-10 binary batch of test images"),
    }
    for name in names:
        p.add_argument(f"--{name}", **flags[name])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pudprune", description="Channel pruning with unlabeled data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write the synthetic task to disk")
    _common(p, "out")
    p.add_argument("--n-teacher", type=int, default=20000)
    p.add_argument("--n-labeled", type=int, default=100)
    p.add_argument("--n-unlabeled", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--bias-shift", type=float, default=0.3)

    p = sub.add_parser("pretrain", help="train a teacher on labeled data")
    _common(p, "data-labeled", "data-test", "out")
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=64)

    p = sub.add_parser("train-sparse", help="sparse retraining initialized from --in")
    _common(p, "in", "teacher", "data-labeled", "data-unlabeled", "out")

    p = sub.add_parser("prune", help="global-threshold channel pruning")
    _common(p, "in", "out")

    p = sub.add_parser("finetune", help="fine-tune a pruned checkpoint")
    _common(p, "in", "teacher", "data-labeled", "data-unlabeled", "out")

    p = sub.add_parser("eval", help="print accuracy=<float>")
    _common(p, "in", "data-test")

    for name, text in (("pipeline", "sparse retraining, pruning, fine-tuning and evaluation"),
                       ("ablate", "run the component toggle grid, one metrics file per cell")):
        p = sub.add_parser(name, help=text)
        _common(p, "teacher", "data-labeled", "data-unlabeled", "data-test", "out")
    return parser


# ----------------------------------------------------------------------------
# helpers

def _config(args) -> PipelineConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _require(args, *names: str) -> None:
    for name in names:
        if getattr(args, name.replace("-", "_")) is None:
            flag = "--in" if name == "inp" else f"--{name}"
            raise UsageError(f"{flag} is required for {args.command}")


def _check_inputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"input file {p} does not exist")


def _check_output(path, force: bool, is_dir: bool = False) -> Path:
    out = Path(path)
    if out.exists() and not force and (not is_dir or any(out.iterdir())):
        raise UsageError(f"{out} exists; pass --force to overwrite")
    return out


def _labeled(path, cfg: PipelineConfig) -> data.LabeledDataset:
    ds = data.load_cifar10(path)
    return data.LabeledDataset(ds.images, ds.labels, cfg.class_count)


def _unlabeled(path, like: data.LabeledDataset | None) -> data.UnlabeledDataset | None:
    if path is None:
        return None
    hw = like.images.shape[2:] if like is not None else None
    return data.load_tensor_file(path, hw)


def _save(model, path, cfg: PipelineConfig, iteration: int, stage: str) -> None:
    M.save(model, path, iteration=iteration, rng_state={"seed": cfg.seed, "stage": stage})


# ----------------------------------------------------------------------------
# commands

def cmd_synth_data(args, cfg: PipelineConfig) -> None:
    _require(args, "out")
    out = _check_output(args.out, args.force, is_dir=True)
    big, unl, test = data.synth_generate(cfg.seed, cfg.class_count, args.n_teacher,
                                         args.n_unlabeled, args.bias_shift, args.n_test)
    small, _, _ = data.synth_generate(cfg.seed + 1000, cfg.class_count, args.n_labeled, 0, 0.0,
                                      n_test=0)
    out.mkdir(parents=True, exist_ok=True)
    data.write_cifar10(out / "teacher.bin", big)
    data.write_cifar10(out / "labeled.bin", small)
    data.write_cifar10(out / "test.bin", test)
    data.write_tensor_file(out / "unlabeled.cftd", unl.images)
    print(f"wrote={out} teacher={len(big)} labeled={len(small)} unlabeled={len(unl)} "
          f"test={len(test)}")


def cmd_pretrain(args, cfg: PipelineConfig) -> None:
    _require(args, "data_labeled", "out")
    _check_inputs(args.data_labeled, args.data_test)
    out = _check_output(args.out, args.force)
    lab = _labeled(args.data_labeled, cfg)
    model = trainer.new_teacher(cfg, lab, cfg.seed)
    trainer.pretrain(model, lab, args.iterations, args.lr, args.batch, seed=cfg.seed,
                     metrics=trainer.MetricsLog(cfg.metrics_path))
    _save(model, out, cfg, args.iterations, "pretrain")
    if args.data_test:
        print(f"accuracy={trainer.evaluate(model, _labeled(args.data_test, cfg))!r}")


def _stage_inputs(args, cfg):
    _require(args, "inp", "data_labeled", "out")
    teacher_path = args.teacher or args.inp
    _check_inputs(args.inp, teacher_path, args.data_labeled, args.data_unlabeled)
    out = _check_output(args.out, args.force)
    lab = _labeled(args.data_labeled, cfg)
    unl = _unlabeled(args.data_unlabeled, lab)
    student = M.load(args.inp).model
    teacher = M.load(teacher_path).model
    return student, teacher, lab, unl, out


def cmd_train_sparse(args, cfg: PipelineConfig) -> None:
    student, teacher, lab, unl, out = _stage_inputs(args, cfg)
    metrics = trainer.MetricsLog(cfg.metrics_path)
    trainer.sparse_retrain(student, teacher, lab, unl, cfg, metrics)
    _save(student, out, cfg, cfg.iterations_sparse, "sparse")


def cmd_prune(args, cfg: PipelineConfig) -> None:
    _require(args, "inp", "out")
    _check_inputs(args.inp)
    out = _check_output(args.out, args.force)
    ck = M.load(args.inp)
    pruned, report = M.prune_fraction(ck.model, cfg.prune_fraction, cfg.guard)
    _save(pruned, out, cfg, ck.iteration, "pruned")
    text = report.to_text()
    Path(str(out) + ".report.txt").write_text(text)
    sys.stdout.write(text)


def cmd_finetune(args, cfg: PipelineConfig) -> None:
    student, teacher, lab, unl, out = _stage_inputs(args, cfg)
    metrics = trainer.MetricsLog(cfg.metrics_path)
    trainer.finetune(student, teacher, lab, unl, cfg, metrics)
    _save(student, out, cfg, cfg.iterations_finetune, "finetune")


def cmd_eval(args, cfg: PipelineConfig) -> None:
    _require(args, "inp", "data_test")
    _check_inputs(args.inp, args.data_test)
    model = M.load(args.inp).model
    print(f"accuracy={trainer.evaluate(model, _labeled(args.data_test, cfg))!r}")


def _pipeline_inputs(args, cfg):
    _require(args, "teacher", "data_labeled", "out")
    _check_inputs(args.teacher, args.data_labeled, args.data_unlabeled, args.data_test)
    lab = _labeled(args.data_labeled, cfg)
    unl = _unlabeled(args.data_unlabeled, lab)
    test = _labeled(args.data_test, cfg) if args.data_test else None
    return M.load(args.teacher).model, lab, unl, test


def cmd_pipeline(args, cfg: PipelineConfig) -> None:
    out = _check_output(args.out, args.force)
    teacher, lab, unl, test = _pipeline_inputs(args, cfg)
    metrics_path = cfg.metrics_path or str(out) + ".metrics"
    if Path(metrics_path).exists():
        if not args.force:
            raise UsageError(f"{metrics_path} exists; pass --force to overwrite")
        Path(metrics_path).unlink()
    result = trainer.run_pipeline(teacher, lab, unl, cfg.replace(metrics_path=metrics_path), test)
    result.metrics.close()
    _save(result.model, out, cfg, cfg.iterations_finetune, "final")
    lines = [result.report.to_text()]
    lines += [f"{k}={v!r}\n" for k, v in result.accuracy.items()]
    lines += ["# config\n"] + [f"{l}\n" for l in cfg.to_lines()]
    Path(str(out) + ".report.txt").write_text("".join(lines))
    sys.stdout.write("".join(lines[:1 + len(result.accuracy)]))


def cmd_ablate(args, cfg: PipelineConfig) -> None:
    out = _check_output(args.out, args.force, is_dir=True)
    teacher, lab, unl, test = _pipeline_inputs(args, cfg)
    if unl is None:
        raise UsageError("ablate needs --data-unlabeled")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for toggles in trainer.ABLATION_GRID:
        name = trainer.cell_name(toggles)
        path = out / f"{name}.metrics"
        path.unlink(missing_ok=True)
        cell = trainer.cell_config(cfg, toggles).replace(metrics_path=str(path))
        result = trainer.run_pipeline(teacher, lab, unl, cell, test)
        result.metrics.close()
        acc = result.accuracy.get("final", float("nan"))
        rows.append(f"{name} accuracy={acc!r}")
        print(rows[-1], flush=True)
    (out / "ablation.txt").write_text("\n".join(rows) + "\n")


COMMANDS = {
    "synth-data": cmd_synth_data, "pretrain": cmd_pretrain, "train-sparse": cmd_train_sparse,
    "prune": cmd_prune, "finetune": cmd_finetune, "eval": cmd_eval, "pipeline": cmd_pipeline,
    "ablate": cmd_ablate,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_RUNTIME


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except (PUDError, OSError, ValueError, ArithmeticError) as exc:
        category = getattr(exc, "category", "RuntimeError")
        message = " ".join(str(exc).split())
        print(f"error category={category} message={message}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
