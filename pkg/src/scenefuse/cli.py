"""Command-line entry point.

Subcommands: generate, train, predict, eval, aggregate, bench.
Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from scenefuse import config as cfgmod
from scenefuse import pipeline
from scenefuse.config import ConfigError, RunConfig
from scenefuse.formats import (
    FormatError,
    load_checkpoint,
    read_predictions,
    read_scenes,
    restore_parameters,
    save_checkpoint,
    write_predictions,
    write_scenes,
)
from scenefuse.fusion import FUSIONS, REGIMES, attention_score_count
from scenefuse.metrics import MetricsError
from scenefuse.model import make_batch
from scenefuse.numerics import NumericsError
from scenefuse.objective import TrainingError
from scenefuse.scene import SceneError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("scenefuse")

BENCH_COLUMNS = ("fusion", "regime", "latent_ratio", "params", "attention_scores",
                 "closed_form_scores", "attention_flops", "wall_ms_median", "passes", "minADE")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    git_describe: str
    outputs: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        key = f"{self.command}:{self.config_hash}:{self.seed}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def write(self, path) -> None:
        data = dataclasses.asdict(self)
        data["run_id"] = self.run_id
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# ----------------------------------------------------------------------------
# helpers


def _load_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config else RunConfig()
    return pipeline.with_seed(cfg, args.seed)


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required for this command")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required for this command")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _new_manifest(command: str, cfg: RunConfig) -> RunManifest:
    return RunManifest(command, cfgmod.config_hash(cfg), cfg.train.seed, git_describe())


def _load_model(cfg: RunConfig, ckpt: Path, scenes):
    arrays, meta = load_checkpoint(ckpt)
    if meta.get("config_hash") != cfgmod.config_hash(cfg):
        log.warning("checkpoint config hash %s differs from current config %s",
                    meta.get("config_hash"), cfgmod.config_hash(cfg))
    model = pipeline.build_model(cfg, pipeline.scene_shapes(scenes, cfg.model.modalities))
    restore_parameters(model, arrays)
    return model


# ----------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args)
    man = _new_manifest("generate", cfg)
    t0 = time.perf_counter()
    scenes = pipeline.make_scenes(cfg, args.split, args.count)
    write_scenes(out, scenes)
    man.timings["generate_s"] = time.perf_counter() - t0
    man.outputs["scenes"] = str(out)
    man.write(_manifest_path(out))
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    scenes = read_scenes(_require(args.scenes, "scenes"))
    out = _require_out(args)
    man = _new_manifest("train", cfg)
    t0 = time.perf_counter()
    model, result = pipeline.fit(cfg, scenes, callback=lambda s, v: print(f"step {s} loss {v:.6f}"))
    man.timings["train_s"] = time.perf_counter() - t0
    save_checkpoint(out, model.named_parameters(), man.config_hash, {"manifest": man.run_id})
    curve = out.with_name(out.name + ".loss.csv")
    with open(curve, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "classification", "regression"])
        for i, (a, b, c) in enumerate(zip(result.losses, result.classification, result.regression)):
            w.writerow([i, repr(a), repr(b), repr(c)])
    man.outputs.update(checkpoint=str(out), loss_curve=str(curve))
    man.write(_manifest_path(out))
    print(f"final loss {result.losses[-1]:.6f}; checkpoint {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    scenes = read_scenes(_require(args.scenes, "scenes"))
    ckpt = _require(args.checkpoint, "checkpoint")
    out = _require_out(args)
    man = _new_manifest("predict", cfg)
    t0 = time.perf_counter()
    model = _load_model(cfg, ckpt, scenes)
    preds = pipeline.predict(model, scenes)
    write_predictions(out, preds, man.run_id)
    man.timings["predict_s"] = time.perf_counter() - t0
    man.outputs["predictions"] = str(out)
    man.write(_manifest_path(out))
    print(f"wrote {len(preds)} predictions to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    scenes = read_scenes(_require(args.scenes, "scenes"))
    if args.predictions:
        preds = read_predictions(_require(args.predictions, "predictions"))
    elif args.checkpoint:
        preds = pipeline.predict(_load_model(cfg, _require(args.checkpoint, "checkpoint"), scenes), scenes)
    else:
        raise UsageError("eval needs --predictions or --checkpoint")
    man = _new_manifest("eval", cfg)
    t0 = time.perf_counter()
    report = pipeline.evaluate_predictions(preds, scenes, cfg.metrics)
    man.timings["eval_s"] = time.perf_counter() - t0
    text = f"# manifest {man.run_id}\n" + report.to_text()
    print(text, end="")
    if args.out:
        out = _require_out(args)
        out.write_text(text)
        csv_path = out.with_suffix(".csv")
        csv_path.write_text(f"# manifest {man.run_id}\n" + report.to_csv())
        man.outputs.update(report=str(out), csv=str(csv_path))
        man.write(_manifest_path(out))
    return EXIT_OK


def cmd_aggregate(args) -> int:
    cfg = _load_config(args)
    preds = read_predictions(_require(args.predictions, "predictions"))
    out = _require_out(args)
    man = _new_manifest("aggregate", cfg)
    t0 = time.perf_counter()
    reduced = pipeline.aggregate_predictions(preds, cfg.aggregation)
    write_predictions(out, reduced, man.run_id)
    man.timings["aggregate_s"] = time.perf_counter() - t0
    man.outputs["predictions"] = str(out)
    man.write(_manifest_path(out))
    print(f"aggregated {len(reduced)} predictions to {cfg.aggregation.modes_out} modes -> {out}")
    return EXIT_OK


def bench_rows(cfg: RunConfig, fusions, regimes, ratios, passes: int, train_steps: int | None,
               bench_rows_count: int = 64, progress=None):
    """One dict per (fusion, regime, ratio) config with cost and quality columns."""
    train_scenes = pipeline.make_scenes(cfg, "train") if train_steps != 0 else None
    eval_scenes = pipeline.make_scenes(cfg, "eval")
    eval_batch = make_batch(eval_scenes, cfg.model.modalities)
    timing_batch = eval_batch.subset(range(min(bench_rows_count, eval_batch.size)))
    shapes = eval_batch.shapes()
    rows = []
    for fusion in fusions:
        for regime in regimes:
            for ratio in ratios:
                enc = dataclasses.replace(cfg.model.encoder, fusion=fusion, regime=regime,
                                          latent_ratio=None if ratio is None else float(ratio))
                run = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, encoder=enc))
                if train_steps:
                    run = dataclasses.replace(run, train=dataclasses.replace(run.train, steps=train_steps))
                if train_steps != 0:
                    model, _ = pipeline.fit(run, train_scenes)
                else:
                    model = pipeline.build_model(run, shapes)
                wall, scores = pipeline.time_forward(model, timing_batch, passes)
                report = pipeline.evaluate_predictions(pipeline.predict(model, eval_scenes), eval_scenes,
                                                       run.metrics)
                row = {
                    "fusion": fusion, "regime": regime,
                    "latent_ratio": "none" if ratio is None else repr(float(ratio)),
                    "params": model.num_parameters(),
                    "attention_scores": scores,
                    "closed_form_scores": attention_score_count(enc, {m: shapes[m] for m in run.model.modalities}),
                    "attention_flops": 4 * enc.block.hidden * scores,
                    "wall_ms_median": repr(1e3 * wall),
                    "passes": passes,
                    "minADE": repr(report.min_ade),
                }
                rows.append(row)
                if progress:
                    progress(row)
    return rows


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args)
    if args.passes < 30:
        raise UsageError("--passes must be at least 30")
    for f in args.fusions:
        if f not in FUSIONS:
            raise UsageError(f"unknown fusion {f!r}; choose from {FUSIONS}")
    for r in args.regimes:
        if r not in REGIMES:
            raise UsageError(f"unknown regime {r!r}; choose from {REGIMES}")
    try:
        ratios = [None if r == "none" else float(r) for r in args.ratios]
    except ValueError as exc:
        raise UsageError(f"bad --ratios value: {exc}") from exc
    if any(r is not None and not 0 < r <= 1 for r in ratios):
        raise UsageError("latent ratios must lie in (0, 1] or be 'none'")
    if args.train_steps is not None and args.train_steps < 0:
        raise UsageError("--train-steps must be >= 0")
    if args.train_scenes or args.eval_scenes:
        data = dataclasses.replace(cfg.data, train_scenes=args.train_scenes or cfg.data.train_scenes,
                                   eval_scenes=args.eval_scenes or cfg.data.eval_scenes)
        cfg = dataclasses.replace(cfg, data=data)
    man = _new_manifest("bench", cfg)
    t0 = time.perf_counter()
    rows = bench_rows(cfg, args.fusions, args.regimes, ratios, args.passes, args.train_steps,
                      progress=lambda r: print(",".join(str(r[c]) for c in BENCH_COLUMNS), flush=True))
    buf = io.StringIO()
    buf.write(f"# manifest {man.run_id}\n")
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out.write_text(buf.getvalue())
    man.timings["bench_s"] = time.perf_counter() - t0
    man.outputs["csv"] = str(out)
    man.write(_manifest_path(out))
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenefuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        sp.add_argument("--config", help="run config JSON (defaults built in)")
        sp.add_argument("--seed", type=int, help="override generator and training seeds")
        sp.add_argument("--out", help="output path")
        if "scenes" in flags:
            sp.add_argument("--scenes", help="scene JSONL file")
        if "checkpoint" in flags:
            sp.add_argument("--checkpoint", help="checkpoint file")
        if "predictions" in flags:
            sp.add_argument("--predictions", help="prediction JSONL file")
        return sp

    g = common(sub.add_parser("generate", help="write synthetic scenes"))
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.add_argument("--count", type=int, help="number of scenes (default from config)")
    g.set_defaults(fn=cmd_generate)
    common(sub.add_parser("train", help="train a model"), "scenes").set_defaults(fn=cmd_train)
    common(sub.add_parser("predict", help="write predictions"), "scenes", "checkpoint").set_defaults(fn=cmd_predict)
    common(sub.add_parser("eval", help="compute metrics"), "scenes", "checkpoint",
           "predictions").set_defaults(fn=cmd_eval)
    common(sub.add_parser("aggregate", help="reduce prediction modes"), "predictions").set_defaults(fn=cmd_aggregate)
    b = common(sub.add_parser("bench", help="fusion x regime x latent-ratio sweep"))
    b.add_argument("--fusions", nargs="+", default=list(FUSIONS))
    b.add_argument("--regimes", nargs="+", default=list(REGIMES))
    b.add_argument("--ratios", nargs="+", default=["0.25", "0.5", "1.0"])
    b.add_argument("--passes", type=int, default=30)
    b.add_argument("--train-steps", type=int, help="override training steps per config (0 = untrained)")
    b.add_argument("--train-scenes", type=int)
    b.add_argument("--eval-scenes", type=int)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NumericsError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, FormatError, SceneError, MetricsError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
