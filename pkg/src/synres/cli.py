"""Command-line surface: train, eval, bench, gen-data.

Every command is deterministic given its flags and seeds (wall-clock columns
excluded). Exit codes: 0 ok, 2 config/validation error, 3 numeric abort,
4 I/O error, 5 corrupt checkpoint.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .datagen import TaskSpec, build_task_data, gen_copy, gen_kv_recall, layout_for
from .evalsuite import (
    DEFAULT_BENCH_LENS,
    DEFAULT_NOISE_LEVELS,
    coherence_curve,
    latency_bench,
    noise_robustness,
    perplexity,
    retention_probe,
)
from .model import GateMode, ModelConfig, count_flops, init_params
from .numcore import NumericError, Rng
from .persist import (
    CheckpointError,
    ConfigError,
    MetricsRow,
    MetricsSink,
    RunSpec,
    config_text,
    load_checkpoint,
    load_config,
    load_dataset,
    save_checkpoint,
    save_config,
    save_dataset,
)
from .train import TrainingAbort, run_training


def _dtype_of(precision: int):
    return {32: np.float32, 64: np.float64}[precision]


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _run_id(*parts) -> str:
    return hashlib.sha256("|".join(str(p) for p in parts).encode()).hexdigest()[:12]


def _add_task_flags(p: argparse.ArgumentParser):
    p.add_argument("--task", choices=["copy", "kv_recall", "corpus"], help="task kind")
    p.add_argument("--vocab-size", type=int, default=64, help="vocabulary size for synthetic tasks")
    p.add_argument("--seq-len", type=int, help="sequence length")
    p.add_argument("--pairs", type=int, help="key-value pairs per row (kv_recall)")
    p.add_argument("--distances", type=_int_list, help="comma list of probe distances (kv_recall)")
    p.add_argument("--samples", type=int, default=1024, help="rows to generate")
    p.add_argument("--task-seed", type=int, default=0, help="data generation seed")
    p.add_argument("--corpus", help="corpus file path (corpus task)")
    p.add_argument("--val-fraction", type=float, default=0.1)


def _task_from_flags(args) -> TaskSpec:
    if args.task is None:
        raise ConfigError("no task given: pass --task or --data")
    if args.task == "kv_recall":
        if args.distances:
            return TaskSpec.kv_recall(
                distances=args.distances, samples=args.samples, seed=args.task_seed,
                seq_len=args.seq_len, pairs=args.pairs, val_fraction=args.val_fraction,
            )
        if args.seq_len is None or args.pairs is None:
            raise ConfigError("kv_recall needs --distances or both --seq-len and --pairs")
        return TaskSpec(
            kind="kv_recall", seq_len=args.seq_len, pairs=args.pairs,
            samples=args.samples, seed=args.task_seed, val_fraction=args.val_fraction,
        )
    if args.task == "corpus":
        if args.corpus is None or args.seq_len is None:
            raise ConfigError("corpus task needs --corpus and --seq-len")
        return TaskSpec(
            kind="corpus", seq_len=args.seq_len, seed=args.task_seed,
            corpus_path=args.corpus, val_fraction=args.val_fraction,
        )
    if args.seq_len is None:
        raise ConfigError("copy task needs --seq-len")
    return TaskSpec(
        kind="copy", seq_len=args.seq_len, samples=args.samples,
        seed=args.task_seed, val_fraction=args.val_fraction,
    )


def _generate_eval_data(args):
    if getattr(args, "data", None):
        batch, spec, layout = load_dataset(args.data)
        return batch, spec, layout
    spec = _task_from_flags(args)
    vocab = 261 if spec.kind == "corpus" else args.vocab_size
    layout = layout_for(spec, vocab)
    if spec.kind == "corpus":
        _, val = build_task_data(spec, layout)
        return val, spec, layout
    gen = gen_copy if spec.kind == "copy" else gen_kv_recall
    return gen(spec, layout, Rng(spec.seed)), spec, layout


def _emit(rows: list[str], out: str | None, name: str):
    text = "\n".join(rows) + "\n"
    if out:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        (path / name).write_text(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def cmd_train(args) -> int:
    spec = load_config(args.config)
    if spec.model is None or spec.train is None or spec.task is None:
        raise ConfigError(f"{args.config}: train needs [model], [train], and [task] sections")
    model_cfg, train_cfg, task = spec.model, spec.train, spec.task
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.gate_mode is not None:
        model_cfg = replace(model_cfg, gate_mode=GateMode(args.gate_mode))
    train_cfg = train_cfg.resolve(model_cfg.vocab_size)
    resolved = RunSpec(model=model_cfg, train=train_cfg, task=task)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.txt", resolved)

    layout = layout_for(task, model_cfg.vocab_size)
    data = build_task_data(task, layout)
    run_id = _run_id(config_text(resolved), train_cfg.seed)
    mode = model_cfg.gate_mode.value
    best_ppl = float("inf")

    with MetricsSink(out / "metrics.csv") as sink:

        def emit_metrics(rep):
            for phase, metric, value in (
                ("train", "loss", rep.mean_loss),
                ("train", "ce", rep.mean_ce),
                ("train", "reg", rep.mean_reg),
                ("train", "lr", rep.lr),
                ("train", "decay_triggered", float(rep.decay_triggered)),
                ("val", "perplexity", rep.val_ppl),
            ):
                sink.write(MetricsRow(
                    run_id=run_id, epoch=rep.epoch, phase=phase, metric=metric,
                    value=value, gate_mode=mode, seed=train_cfg.seed, wall_ms=rep.wall_ms,
                ))

        def on_epoch(params, rep):
            nonlocal best_ppl
            save_checkpoint(out / "last.ckpt", params, train_cfg, train_cfg.seed, rep.epoch)
            if rep.val_ppl < best_ppl:
                best_ppl = rep.val_ppl
                save_checkpoint(out / "best.ckpt", params, train_cfg, train_cfg.seed, rep.epoch)

        run_training(
            model_cfg, train_cfg, data,
            metrics_sink=emit_metrics, on_epoch=on_epoch,
            dtype=_dtype_of(args.precision),
        )
    return 0


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.params
    if args.precision is not None:
        target = _dtype_of(args.precision)
        for _, t in params.named_tensors():
            t.data = t.data.astype(target)
    mode = GateMode(args.gate_mode) if args.gate_mode else params.config.gate_mode
    dataset, task, layout = _generate_eval_data(args)
    if dataset.seq_len > params.config.max_seq_len:
        raise ConfigError(
            f"dataset seq_len {dataset.seq_len} exceeds model max {params.config.max_seq_len}"
        )
    if layout.vocab_size != params.config.vocab_size:
        raise ConfigError(
            f"dataset vocab {layout.vocab_size} != model vocab {params.config.vocab_size}"
        )
    wanted = set(args.metrics.split(",")) if args.metrics != "all" else {
        "perplexity", "retention", "noise", "coherence"
    }
    run_id = _run_id("eval", args.checkpoint, task, mode.value, args.seed)

    def row(metric, value, phase="eval"):
        return MetricsRow(
            run_id=run_id, epoch=ckpt.epoch, phase=phase, metric=metric,
            value=value, gate_mode=mode.value, seed=ckpt.seed, wall_ms=0.0,
        ).as_csv()

    rows = [",".join(("run_id", "epoch", "phase", "metric", "value", "gate_mode", "seed", "wall_ms"))]
    if "perplexity" in wanted:
        rows.append(row("perplexity", perplexity(params, dataset, mode=mode)))
    if "retention" in wanted and dataset.meta is not None:
        report = retention_probe(params, dataset, layout, mode=mode)
        rows.append(row("retention_percent", report.aggregate_percent))
        for d in sorted(report.per_distance):
            rows.append(row(f"retention_at_{d}", 100.0 * report.per_distance[d]))
    if "noise" in wanted:
        grid = noise_robustness(
            params, dataset, layout, levels=args.noise_levels, rng=Rng(args.seed), mode=mode
        )
        for level, err in grid.rows:
            rows.append(row(f"error_rate_at_noise_{int(level)}", err))
    if "coherence" in wanted and dataset.meta is None:
        for t, acc, count in coherence_curve(params, dataset, mode=mode):
            if count:
                rows.append(row(f"coherence_at_{t}", acc))
    _emit(rows, args.out, "eval.csv")
    return 0


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------


def cmd_bench(args) -> int:
    if bool(args.checkpoint) == bool(args.config):
        raise ConfigError("bench needs exactly one of --ckpt or --config")
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint).params
    else:
        spec = load_config(args.config)
        if spec.model is None:
            raise ConfigError(f"{args.config}: bench needs a [model] section")
        params = init_params(spec.model, Rng(args.seed), dtype=_dtype_of(args.precision))
    cfg = params.config

    curves = {}
    for mode in (GateMode.LEARNED, GateMode.DISABLED):
        curves[mode] = latency_bench(
            params, seq_lens=args.seq_lens, repetitions=args.reps, mode=mode, seed=args.seed
        )
    rows = ["seq_len,gate_mode,median_ms,flops"]
    for mode, curve in curves.items():
        for r in curve.rows:
            rows.append(f"{r.seq_len},{mode.value},{r.median_ms!r},{r.flops}")
    ratios = ["seq_len,latency_ratio,flop_delta"]
    for on, off in zip(curves[GateMode.LEARNED].rows, curves[GateMode.DISABLED].rows):
        gate_cost = count_flops(cfg, on.seq_len, GateMode.LEARNED).gate
        assert on.flops - off.flops == gate_cost
        ratios.append(f"{on.seq_len},{on.median_ms / off.median_ms!r},{on.flops - off.flops}")
    _emit(rows, args.out, "bench.csv")
    _emit(ratios, args.out, "overhead.csv")
    return 0


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    base = replace(_task_from_flags(args), seed=args.seed) if args.seed is not None else _task_from_flags(args)
    if base.kind == "corpus":
        raise ConfigError("gen-data writes synthetic tasks; corpus data is loaded from file")
    vocab = args.vocab_size
    layout = layout_for(base, vocab)
    gen = gen_copy if base.kind == "copy" else gen_kv_recall
    batch = gen(base, layout, Rng(base.seed))
    save_dataset(args.out, batch, base, layout)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synres",
        description="gated-attention micro language model: train, evaluate, benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop from a config file")
    p_train.add_argument("config", help="path to the run config")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--seed", type=int, help="override the training seed")
    p_train.add_argument("--gate-mode", choices=[m.value for m in GateMode])
    p_train.add_argument("--precision", type=int, choices=[32, 64], default=32)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    p_eval.add_argument("checkpoint", help="checkpoint path")
    p_eval.add_argument("--data", help="dataset artifact written by gen-data")
    _add_task_flags(p_eval)
    p_eval.add_argument("--noise-levels", type=_int_list, default=DEFAULT_NOISE_LEVELS)
    p_eval.add_argument("--metrics", default="all",
                        help="comma list of perplexity,retention,noise,coherence")
    p_eval.add_argument("--gate-mode", choices=[m.value for m in GateMode])
    p_eval.add_argument("--seed", type=int, default=0, help="noise evaluation seed")
    p_eval.add_argument("--precision", type=int, choices=[32, 64],
                        help="cast loaded parameters before evaluating")
    p_eval.add_argument("--out", help="directory for CSV output (default stdout)")
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="latency and flop accounting per gate mode")
    p_bench.add_argument("--ckpt", dest="checkpoint", help="checkpoint path")
    p_bench.add_argument("--config", help="config file (random init)")
    p_bench.add_argument("--seq-lens", type=_int_list, default=DEFAULT_BENCH_LENS)
    p_bench.add_argument("--reps", type=int, default=20)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--precision", type=int, choices=[32, 64], default=32)
    p_bench.add_argument("--out", help="directory for CSV output (default stdout)")
    p_bench.set_defaults(func=cmd_bench)

    p_gen = sub.add_parser("gen-data", help="write a reproducible dataset artifact")
    _add_task_flags(p_gen)
    p_gen.add_argument("--out", required=True, help="artifact path")
    p_gen.add_argument("--seed", type=int, help="override the task seed")
    p_gen.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except CheckpointError as err:
        print(f"error: corrupt checkpoint: {err}", file=sys.stderr)
        return 5
    except (TrainingAbort, NumericError) as err:
        print(f"error: numeric abort: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
