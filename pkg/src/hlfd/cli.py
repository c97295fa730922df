"""``hlfd`` command line.

Every subcommand writes its files under ``--out``, prints one summary line
and leaves a ``summary.txt`` whose only nondeterministic line is the
timestamp. Exit codes: 0 ok, 2 configuration error, 3 I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import reports
from .autodiff import NonFiniteError, Tensor
from .checkpoint import CheckpointError, file_digest, load_checkpoint, save_checkpoint
from .config import CliConfig, ConfigError, dump_config, load_config, with_seed
from .data import SegvError, load_segv, save_segv, split, synth_generate
from .gradsuite import run_suite
from .metrics import gradcam, heatmap_contrast, write_pgm, write_ppm_heat
from .nets import TeacherNet
from .training import (STUDENT_MODES, DivergenceError, TeacherCache, distill_student, evaluate,
                       run_experiment, train_teacher)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def threads_from_env(environ=os.environ) -> int:
    raw = environ.get("HLFD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"HLFD_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError(EXIT_CONFIG, f"HLFD_THREADS must be >= 1, got {n}")
    return n


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {exc}") from None
    return out


def _load_dataset(path):
    if path is None:
        raise CliError(EXIT_CONFIG, "--data is required")
    try:
        return load_segv(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"dataset not found: {path}") from None


def _load_net(path, kind: type | None = None):
    if path is None:
        raise CliError(EXIT_CONFIG, "a checkpoint path is required")
    try:
        net = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"checkpoint not found: {path}") from None
    if kind is not None and not isinstance(net, kind):
        raise CliError(EXIT_CONFIG, f"{path} holds a {net.kind}, expected a {kind.kind}")
    return net


def _splits(cfg: CliConfig, samples):
    train, test = split(samples, cfg.data.train_fraction, cfg.data.split_seed)
    if cfg.data.train_limit:
        train = train[:cfg.data.train_limit]
    return train, test


def _input_size(samples) -> tuple[int, int]:
    return tuple(samples[0].mask.shape)


def _finish(out: Path, command: str, line: str, fields: dict) -> None:
    reports.write_text(out / "summary.txt", reports.human_summary(command, {"result": line, **fields}))
    print(line)


def _fmt(x: float) -> str:
    return f"{x:.4f}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: CliConfig, args) -> int:
    out = _out_dir(args.out)
    path = out / args.file
    samples = synth_generate(cfg.synth)
    save_segv(path, samples)
    frac = np.array([s.mask.mean() for s in samples])
    line = (f"synth: {len(samples)} samples -> {path} (foreground fraction mean {_fmt(frac.mean())}, "
            f"min {_fmt(frac.min())}, max {_fmt(frac.max())})")
    _finish(out, "synth", line, {"samples": len(samples), "dataset": path.name,
                                 "dataset_sha256": file_digest(path)})
    return EXIT_OK


def cmd_train_teacher(cfg: CliConfig, args) -> int:
    out = _out_dir(args.out)
    samples = _load_dataset(args.data)
    train, test = _splits(cfg, samples)
    seed = args.seed if args.seed is not None else cfg.train.seeds[0]
    net_cfg = cfg.net.build("teacher", _input_size(samples))
    teacher, record = train_teacher(cfg.teacher_config(), train, net_cfg, seed=seed)
    ckpt = out / "teacher.ckpt"
    save_checkpoint(ckpt, teacher)
    result = evaluate(teacher, test, workers=args.threads)
    reports.write_text(out / "teacher_log.csv", reports.training_log_csv([record]))
    reports.write_text(out / "teacher_eval.csv", reports.summary_csv([reports.eval_summary_row("teacher", seed, result)]))
    line = (f"train-teacher: seed {seed}, {len(record.epochs)} epochs, test dsc {_fmt(result.dsc)}, "
            f"rvd {_fmt(result.rvd)} -> {ckpt}")
    _finish(out, "train-teacher", line, {"checkpoint_sha256": file_digest(ckpt),
                                         "parameters": teacher.num_parameters()})
    return EXIT_OK


def cmd_distill(cfg: CliConfig, args) -> int:
    out = _out_dir(args.out)
    samples = _load_dataset(args.data)
    train, test = _splits(cfg, samples)
    mode = args.mode
    teacher = None
    teacher_hash = ""
    if mode != "no_kd":
        teacher = _load_net(args.teacher, TeacherNet)
        teacher_hash = file_digest(args.teacher)
    train_cfg = cfg.train_config(mode=mode)
    student_cfg = cfg.net.build("student", _input_size(samples))
    cache = None
    if teacher is not None:
        cache = TeacherCache(teacher, train, cfg.distill, transforms=range(8) if train_cfg.augment else (0,))
    records, rows = [], []
    for seed in train_cfg.seeds:
        student, record = distill_student(train_cfg, teacher, train, seed=seed, net_cfg=student_cfg, cache=cache)
        save_checkpoint(out / f"student_{mode}_seed{seed}.ckpt", student)
        record.eval = evaluate(student, test, workers=args.threads)
        records.append(record)
        rows.append(reports.eval_summary_row(mode, seed, record.eval))
    if teacher is not None and file_digest(args.teacher) != teacher_hash:
        raise CliError(EXIT_NUMERIC, "the teacher checkpoint changed during distillation")
    dscs = np.array([r.eval.dsc for r in records])
    rvds = np.array([r.eval.rvd for r in records])
    rows.append((mode, "all", float(dscs.mean()), float(dscs.std()), float(rvds.mean()), float(rvds.std())))
    reports.write_text(out / "train_log.csv", reports.training_log_csv(records))
    reports.write_text(out / "eval_summary.csv", reports.summary_csv(rows))
    line = (f"distill: mode {mode}, seeds {','.join(map(str, train_cfg.seeds))}, "
            f"test dsc {_fmt(dscs.mean())} +/- {_fmt(dscs.std())}")
    fields = {f"student_seed{r.seed}_sha256": file_digest(out / f"student_{mode}_seed{r.seed}.ckpt") for r in records}
    if teacher is not None:
        fields["teacher_sha256"] = teacher_hash
    _finish(out, "distill", line, fields)
    return EXIT_OK


def cmd_eval(cfg: CliConfig, args) -> int:
    out = _out_dir(args.out)
    samples = _load_dataset(args.data)
    net = _load_net(args.checkpoint)
    if args.split == "all":
        subset = samples
    else:
        train, test = _splits(cfg, samples)
        subset = test if args.split == "test" else train
    if tuple(net.cfg.input_size) != _input_size(subset):
        raise CliError(EXIT_CONFIG, f"checkpoint expects {net.cfg.input_size} images, dataset has {_input_size(subset)}")
    result = evaluate(net, subset, workers=args.threads)
    reports.write_text(out / "eval.csv", reports.summary_csv([reports.eval_summary_row(net.kind, net.cfg.seed, result)]))
    reports.write_text(out / "per_sample.csv", reports.per_sample_csv(result))
    line = (f"eval: {net.kind} on {len(subset)} {args.split} samples, dsc {_fmt(result.dsc)}, "
            f"rvd {_fmt(result.rvd)} ({result.rvd_excluded} without foreground)")
    _finish(out, "eval", line, {"checkpoint_sha256": file_digest(args.checkpoint)})
    return EXIT_OK


def _teacher_for_run(cfg: CliConfig, args, train, out: Path):
    if args.teacher:
        return _load_net(args.teacher, TeacherNet)
    seed = cfg.train.seeds[0]
    teacher, record = train_teacher(cfg.teacher_config(), train, cfg.net.build("teacher", _input_size(train)), seed=seed)
    save_checkpoint(out / "teacher.ckpt", teacher)
    reports.write_text(out / "teacher_log.csv", reports.training_log_csv([record]))
    return teacher


def cmd_sweep(cfg: CliConfig, args) -> int:
    out = _out_dir(args.out)
    samples = _load_dataset(args.data)
    train, test = _splits(cfg, samples)
    teacher = _teacher_for_run(cfg, args, train, out)
    report = run_experiment(cfg.train_config(), train, test, modes=(), teacher=teacher, sensitivity=True,
                            student_net=cfg.net.build("student", _input_size(samples)), workers=args.threads)
    reports.write_text(out / "sweep.csv", reports.sweep_csv(report.sensitivity))
    means = []
    for beta, lam in dict.fromkeys((r.beta, r.lam) for r in report.sensitivity):
        d = np.mean([r.dsc for r in report.sensitivity if (r.beta, r.lam) == (beta, lam)])
        means.append(f"({beta:g},{lam:g}) {_fmt(d)}")
    line = "sweep: hlfd mean dsc " + ", ".join(means)
    _finish(out, "sweep", line, {"rows": len(report.sensitivity)})
    return EXIT_OK


def cmd_experiment(cfg: CliConfig, args) -> int:
    out = _out_dir(args.out)
    samples = _load_dataset(args.data)
    train, test = _splits(cfg, samples)
    teacher = _teacher_for_run(cfg, args, train, out)
    report = run_experiment(cfg.train_config(), train, test, modes=args.modes, teacher=teacher,
                            sensitivity=args.sensitivity,
                            student_net=cfg.net.build("student", _input_size(samples)), workers=args.threads)
    records = [r.record for r in report.rows]
    for r in report.rows:
        save_checkpoint(out / f"student_{r.mode}_seed{r.seed}.ckpt", r.student)
    reports.write_text(out / "train_log.csv", reports.training_log_csv(records))
    reports.write_text(out / "summary.csv", reports.summary_csv(reports.experiment_summary_rows(report)))
    if args.sensitivity:
        reports.write_text(out / "sweep.csv", reports.sweep_csv(report.sensitivity))
    summary = report.summary()
    parts = [f"{m} {_fmt(s['dsc_mean'])} +/- {_fmt(s['dsc_std'])}" for m, s in summary.items()]
    line = f"experiment: teacher dsc {_fmt(report.teacher_eval.dsc)}; " + "; ".join(parts)
    _finish(out, "experiment", line, {"teacher_dsc": report.teacher_eval.dsc})
    return EXIT_OK


def cmd_gradcheck(cfg: CliConfig, args) -> int:
    out = _out_dir(args.out)
    results = run_suite()
    rows = [(r.name, r.error, r.passed, r.failure) for r in results]
    reports.write_text(out / "gradcheck.csv", reports.render_csv(("case", "max_rel_error", "passed", "failure"), rows))
    failed = [r.name for r in results if not r.passed]
    worst = max(results, key=lambda r: r.error)
    line = (f"gradcheck: {len(results) - len(failed)}/{len(results)} cases within 1e-4, "
            f"worst {worst.name} {worst.error:.2e}")
    if failed:
        line += f"; FAILED: {', '.join(failed)}"
    _finish(out, "gradcheck", line, {"cases": len(results)})
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_gradcam(cfg: CliConfig, args) -> int:
    out = _out_dir(args.out)
    samples = _load_dataset(args.data)
    net = _load_net(args.checkpoint)
    if args.split == "all":
        subset = samples
    else:
        train, test = _splits(cfg, samples)
        subset = test if args.split == "test" else train
    if args.count:
        subset = subset[:args.count]
    rows = []
    focused = counted = 0
    for sample in subset:
        stem = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in sample.id)
        for tap in ("early", "late"):
            heat = gradcam(net, Tensor(sample.image), tap=tap)
            inside, outside = heatmap_contrast(heat, sample.mask)
            rows.append((sample.id, tap, inside, outside))
            write_pgm(out / f"{stem}_{tap}.pgm", heat)
            write_ppm_heat(out / f"{stem}_{tap}.ppm", sample.image[0], heat, sample.mask)
            if tap == "early" and sample.mask.any():
                counted += 1
                focused += inside > outside
    reports.write_text(out / "gradcam.csv", reports.render_csv(("id", "tap", "inside_mean", "outside_mean"), rows))
    frac = focused / counted if counted else float("nan")
    line = f"gradcam: {len(subset)} samples, early-tap heatmap brighter inside the mask on {_fmt(frac)} of them"
    _finish(out, "gradcam", line, {"samples": len(subset)})
    return EXIT_OK


def cmd_config(cfg: CliConfig, args) -> int:
    """Print the effective configuration (every key, defaults included)."""
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train-teacher": cmd_train_teacher, "distill": cmd_distill, "eval": cmd_eval,
    "sweep": cmd_sweep, "experiment": cmd_experiment, "gradcheck": cmd_gradcheck, "gradcam": cmd_gradcam,
    "config": cmd_config,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser, with_defaults: bool) -> None:
    # subparsers must not write defaults over values given before the subcommand
    d = (lambda v: v) if with_defaults else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--config", metavar="PATH", default=d(None), help="flat key=value configuration file")
    parser.add_argument("--seed", type=int, default=d(None),
                        help="pin a single training seed (and the synthetic generator)")
    parser.add_argument("--out", metavar="DIR", default=d("hlfd_out"), help="output directory (default: hlfd_out)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False), help="log progress to standard error")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hlfd", description="Hierarchical layer-selective feedback "
                                     "distillation for binary segmentation, at desk scale.")
    _add_common(parser, True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_common(p, False)
        return p

    p = add("synth", "generate the synthetic blob dataset as a SEGV1 file")
    p.add_argument("--file", default="dataset.segv1", help="file name inside --out")

    p = add("train-teacher", "train the teacher encoder-decoder")
    p.add_argument("--data", required=True)

    p = add("distill", "train students from a frozen teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", help="teacher checkpoint (not needed for no_kd)")
    p.add_argument("--mode", choices=STUDENT_MODES, default="hlfd")

    for name, text in (("eval", "evaluate a checkpoint (DSC/RVD)"), ("gradcam", "write Grad-CAM heatmaps")):
        p = add(name, text)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("test", "train", "all"), default="test")
        if name == "gradcam":
            p.add_argument("--count", type=int, default=8, help="number of samples (0 for all)")

    p = add("sweep", "run the beta/lambda sensitivity grid")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", help="teacher checkpoint; trained from the config if omitted")

    p = add("experiment", "teacher plus every student mode over every seed")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", help="teacher checkpoint; trained from the config if omitted")
    p.add_argument("--modes", nargs="+", choices=STUDENT_MODES, default=list(STUDENT_MODES))
    p.add_argument("--sensitivity", action="store_true", default=False)

    add("gradcheck", "finite-difference check of every op and loss")
    add("config", "print the effective configuration")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args.threads = threads_from_env()
        cfg = load_config(args.config) if args.config else CliConfig()
        cfg = with_seed(cfg, args.seed)
        return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"hlfd {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"hlfd {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        print(f"hlfd {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SegvError, CheckpointError) as exc:
        print(f"hlfd {args.command}: {exc.kind}: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"hlfd {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"hlfd {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
