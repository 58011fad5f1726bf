"""Command-line entry point.

Subcommands cover the full experiment cycle: generate data, train (three
objective presets), analyze layer similarity, build a depth schedule, evaluate
a model or subset, time the depth sweep, and aggregate evaluation files into
a depth-vs-error table.  Every data-producing command takes a flat key=value
config file whose resolved hash is recorded in a meta.json sidecar, all logs
go to stderr, and tabular outputs get a rendered PNG next to them.

Exit codes: 0 ok, 2 configuration problem, 3 data problem, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import re
import sys
from pathlib import Path

from .errors import ConfigError, DataError, NumericError

_REQUIRED = object()

CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "task.vocab": (int, 17),
    "task.d_in": (int, 16),
    "task.min_labels": (int, 3),
    "task.max_labels": (int, 10),
    "task.max_repeats": (int, 3),
    "task.noise": (float, 0.1),
    "data.train_size": (int, _REQUIRED),
    "data.val_size": (int, _REQUIRED),
    "data.test_size": (int, _REQUIRED),
    "data.seed": (int, 0),
    "encoder.layers": (int, 8),
    "encoder.d_model": (int, 64),
    "encoder.d_ff": (int, 128),
    "encoder.heads": (int, 4),
    "encoder.keep_prob": (float, 0.9),
    "encoder.inter_weight": (float, 2.0 / 3.0),
    "encoder.seed": (int, 0),
    "train.epochs": (int, _REQUIRED),
    "train.batch_size": (int, 16),
    "train.peak_lr": (float, _REQUIRED),
    "train.warmup_steps": (int, 1000),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.98),
    "train.eps": (float, 1e-9),
    "train.clip_norm": (float, 5.0),
    "train.seed": (int, 0),
    "baseline_b.inter_weight": (float, 0.3),
    "analyze.max_rows": (int, 2000),
    "analyze.seed": (int, 0),
}


def parse_config(path) -> dict:
    """Flat key=value file with # comments; unknown or duplicate keys are fatal."""
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"no config file at {path}") from None
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
        raw[key] = value
    resolved = {}
    for key, (typ, default) in CONFIG_SCHEMA.items():
        if key in raw:
            try:
                resolved[key] = typ(raw[key])
            except ValueError:
                raise ConfigError(
                    f"config key {key!r} needs a {typ.__name__}, got {raw[key]!r}"
                ) from None
        elif default is _REQUIRED:
            raise ConfigError(f"config key {key!r} is required")
        else:
            resolved[key] = default
    return resolved


def config_hash(cfg: dict) -> str:
    text = "".join(
        f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in sorted(cfg.items())
    )
    return hashlib.sha256(text.encode()).hexdigest()


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def _write_meta(out_dir, **fields) -> None:
    _write_json(Path(out_dir) / "meta.json", fields)


def _task_spec(cfg):
    from .train import SyntheticTaskSpec

    return SyntheticTaskSpec(
        vocab=cfg["task.vocab"],
        d_in=cfg["task.d_in"],
        min_labels=cfg["task.min_labels"],
        max_labels=cfg["task.max_labels"],
        max_repeats=cfg["task.max_repeats"],
        noise=cfg["task.noise"],
    )


MODES = ("pruning-aware", "baseline-a", "baseline-b")


def build_encoder_config(cfg: dict, mode: str, depth: int | None, seed: int):
    """Translate a config plus training preset into the model configuration.

    pruning-aware: taps at quarter and half depth, heavy tap weight, layer
    skipping on.  baseline-a: plain training, no taps, no skipping.
    baseline-b: one tap at half depth with a light weight, skipping on.
    """
    from .encoder import EncoderConfig

    layers = cfg["encoder.layers"] if depth is None else depth
    common = dict(
        layers=layers,
        d_model=cfg["encoder.d_model"],
        d_ff=cfg["encoder.d_ff"],
        heads=cfg["encoder.heads"],
        vocab=cfg["task.vocab"],
        d_in=cfg["task.d_in"],
        seed=seed,
    )
    if mode == "pruning-aware":
        if layers < 4:
            raise ConfigError("pruning-aware training needs at least 4 layers for its two taps")
        taps = tuple(sorted({max(1, layers // 4), layers // 2}))
        return EncoderConfig(
            keep_prob=cfg["encoder.keep_prob"],
            branch_positions=taps,
            inter_weight=cfg["encoder.inter_weight"],
            **common,
        )
    if mode == "baseline-a":
        return EncoderConfig(keep_prob=1.0, branch_positions=(), inter_weight=0.0, **common)
    if mode == "baseline-b":
        if layers < 2:
            raise ConfigError("baseline-b needs at least 2 layers to place its tap")
        return EncoderConfig(
            keep_prob=cfg["encoder.keep_prob"],
            branch_positions=(max(1, layers // 2),),
            inter_weight=cfg["baseline_b.inter_weight"],
            **common,
        )
    raise ConfigError(f"unknown training mode {mode!r}")


def cmd_gen_data(args) -> int:
    from .train import generate_split, save_dataset

    cfg = parse_config(args.config)
    spec = _task_spec(cfg)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    sizes = {}
    for split in ("train", "val", "test"):
        n = cfg[f"data.{split}_size"]
        save_dataset(out / split, generate_split(spec, n, cfg["data.seed"], split))
        sizes[split] = n
        _log(f"wrote {n} utterances to {out / split}")
    _write_meta(out, command="gen-data", config_hash=config_hash(cfg), sizes=sizes)
    return 0


def cmd_train(args) -> int:
    from . import figures
    from .encoder import EncoderModel
    from .train import TrainConfig, load_curve_rows, load_dataset, train

    cfg = parse_config(args.config)
    seed = cfg["train.seed"] if args.seed is None else args.seed
    enc_cfg = build_encoder_config(cfg, args.mode, args.depth, seed)
    utts = load_dataset(Path(args.data) / "train")
    tc = TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        peak_lr=cfg["train.peak_lr"],
        warmup_steps=cfg["train.warmup_steps"],
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        eps=cfg["train.eps"],
        clip_norm=cfg["train.clip_norm"],
        seed=seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(
        EncoderModel(enc_cfg),
        utts,
        tc,
        out_dir=out,
        resume=args.resume,
        stop_after_epoch=args.stop_after_epoch,
        log=_log,
    )
    _write_meta(
        out,
        command="train",
        config_hash=config_hash(cfg),
        mode=args.mode,
        depth=enc_cfg.layers,
        seed=seed,
        epochs_run=result.epochs_run,
    )
    figures.render_loss_curve(load_curve_rows(out / "loss_curve.csv"), out / "loss_curve.png")
    _log(f"trained {result.epochs_run} epochs into {out}")
    return 0


def cmd_analyze(args) -> int:
    from . import figures
    from .encoder import load_checkpoint
    from .svcca import collect_activations, save_dumps, similarity_csv, similarity_matrix
    from .train import load_dataset

    cfg = parse_config(args.config)
    model = load_checkpoint(args.model)
    utts = load_dataset(Path(args.data) / args.split)
    dumps = collect_activations(
        model, utts, max_rows=cfg["analyze.max_rows"], seed=cfg["analyze.seed"]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dumps(out / "dumps", dumps)
    matrix = similarity_matrix([d.data for d in dumps])
    (out / "similarity.csv").write_text(similarity_csv(matrix))
    figures.render_similarity_heatmap(matrix, out / "similarity.png")
    _write_meta(
        out,
        command="analyze",
        config_hash=config_hash(cfg),
        split=args.split,
        rows=int(dumps[0].data.shape[0]),
        layers=len(dumps),
    )
    _log(f"similarity over {len(dumps)} layer states written to {out}")
    return 0


def cmd_prune(args) -> int:
    from . import figures
    from .encoder import load_checkpoint
    from .prune import export_submodel, run_contiguous_prune, run_iterative_prune, save_schedule
    from .train import load_dataset

    cfg = parse_config(args.config)
    model = load_checkpoint(args.model)
    utts = load_dataset(Path(args.data) / args.split)
    if not (0.0 < args.val_fraction <= 1.0):
        raise ConfigError(f"--val-fraction must lie in (0, 1], got {args.val_fraction}")
    if args.val_fraction < 1.0:
        utts = utts[: max(1, int(round(args.val_fraction * len(utts))))]
    if args.strategy == "iterative":
        schedule = run_iterative_prune(model, utts, args.target_depth, jobs=args.jobs)
    else:
        schedule = run_contiguous_prune(model, utts, args.target_depth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_schedule(out / "schedule.json", schedule)
    figures.render_schedule(schedule, out / "schedule.png")
    if args.export_dir is not None:
        export_dir = Path(args.export_dir)
        export_dir.mkdir(parents=True, exist_ok=True)
        for row in schedule:
            export_submodel(model, row.subset, export_dir / f"d{row.depth}.pctc")
        _log(f"exported {len(schedule)} submodels to {export_dir}")
    _write_meta(
        out,
        command="prune",
        config_hash=config_hash(cfg),
        strategy=args.strategy,
        target_depth=args.target_depth,
        utterances=len(utts),
    )
    for row in schedule:
        _log(f"depth {row.depth}: subset {list(row.subset)} ter {row.ter:.4f}")
    return 0


def _parse_subset(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"--subset needs comma-separated layer indices, got {text!r}") from None


def cmd_eval(args) -> int:
    from .encoder import load_checkpoint
    from .prune import load_schedule
    from .train import evaluate, load_dataset

    cfg = parse_config(args.config)
    if args.subset is not None and args.schedule is not None:
        raise ConfigError("pass either --subset or --schedule, not both")
    model = load_checkpoint(args.model)
    utts = load_dataset(Path(args.data) / args.split)
    subset = None
    if args.subset is not None:
        subset = _parse_subset(args.subset)
    elif args.schedule is not None:
        if args.depth is None:
            raise ConfigError("--schedule needs --depth to pick a row")
        rows = {r.depth: r for r in load_schedule(args.schedule)}
        if args.depth not in rows:
            raise DataError(f"schedule has no depth {args.depth} row")
        subset = rows[args.depth].subset
    report = evaluate(model, utts, subset=subset)
    payload = {
        "config_hash": config_hash(cfg),
        "depth": len(subset) if subset is not None else model.config.layers,
        "mean_loss": report.mean_loss,
        "n_utterances": report.n_utterances,
        "split": args.split,
        "subset": list(subset) if subset is not None else None,
        "ter": report.ter,
        "total_edits": report.total_edits,
        "total_tokens": report.total_tokens,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, payload)
    _log(f"ter {report.ter:.4f} over {report.n_utterances} utterances -> {out}")
    return 0


def cmd_bench(args) -> int:
    from . import figures
    from .bench import bench_csv, benchmark_depths
    from .encoder import load_checkpoint
    from .train import load_dataset

    cfg = parse_config(args.config)
    model = load_checkpoint(args.model)
    utts = load_dataset(Path(args.data) / args.split)
    depths = None
    if args.depths is not None:
        depths = [int(d) for d in args.depths.split(",") if d.strip()]
    try:
        rows = benchmark_depths(model, utts, depths=depths, reps=args.reps, warmup=args.warmup)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(bench_csv(rows))
    figures.render_bench(rows, out / "bench.png")
    _write_meta(
        out,
        command="bench",
        config_hash=config_hash(cfg),
        reps=args.reps,
        warmup=args.warmup,
        utterances=len(utts),
    )
    for row in rows:
        _log(f"depth {row.depth}: {row.median_ms:.2f} ms, speedup {row.speedup:.2f}x")
    return 0


EVAL_NAME = re.compile(r"^(?P<curve>[A-Za-z0-9][A-Za-z0-9_-]*)_d(?P<depth>\d+)\.json$")


def cmd_report(args) -> int:
    from . import figures

    src = Path(args.evals)
    if not src.is_dir():
        raise DataError(f"no evaluation directory at {src}")
    curves: dict[str, list[tuple[int, float, float]]] = {}
    for path in sorted(src.iterdir()):
        m = EVAL_NAME.match(path.name)
        if m is None:
            continue
        try:
            payload = json.loads(path.read_text())
            point = (int(m.group("depth")), float(payload["ter"]), float(payload["mean_loss"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"unreadable evaluation file {path.name}: {e}") from e
        curves.setdefault(m.group("curve"), []).append(point)
    if not curves:
        raise DataError(f"no NAME_dDEPTH.json evaluation files in {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["curve,depth,ter,loss"]
    for name in sorted(curves):
        for depth, ter, loss in sorted(curves[name]):
            lines.append(f"{name},{depth},{ter!r},{loss!r}")
    (out / "depth_curves.csv").write_text("\n".join(lines) + "\n")
    figures.render_depth_curves(
        {name: [(d, t) for d, t, _ in pts] for name, pts in curves.items()},
        out / "depth_curves.png",
    )
    _log(f"aggregated {sum(len(v) for v in curves.values())} points into {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctcprune",
        description="Train once, run at any depth: CTC encoder training, "
        "layer-similarity analysis, depth pruning, and benchmarking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/val/test splits of the synthetic task")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite an existing directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train an encoder with one of the objective presets")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory holding the train/ split")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, default="pruning-aware")
    p.add_argument("--depth", type=int, default=None, help="override encoder.layers")
    p.add_argument("--seed", type=int, default=None, help="override train.seed and the init seed")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stop-after-epoch", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("analyze", help="layer-similarity matrix from activation dumps")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("prune", help="build a depth schedule from a trained model")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("intermediate", "iterative"), default="intermediate",
                   help="intermediate keeps the bottom-d layers; iterative searches subsets")
    p.add_argument("--target-depth", type=int, required=True)
    p.add_argument("--val-fraction", type=float, default=1.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--export-dir", default=None, help="also write one checkpoint per depth")
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("eval", help="token error rate of a model, subset, or schedule row")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--subset", default=None, help="comma-separated layer positions")
    p.add_argument("--schedule", default=None, help="schedule.json to pick a subset from")
    p.add_argument("--depth", type=int, default=None, help="row of --schedule to use")
    p.add_argument("--out", required=True, help="where to write the result JSON")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="wall-clock timing across depths")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--depths", default=None, help="comma-separated, descending")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("report", help="aggregate NAME_dDEPTH.json evals into a depth table")
    p.add_argument("--evals", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        _log(f"configuration error: {e}")
        return 2
    except DataError as e:
        _log(f"data error: {e}")
        return 3
    except NumericError as e:
        _log(f"numeric error: {e}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
