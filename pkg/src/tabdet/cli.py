"""Command line: ``tabdet gen-data | train | eval | sweep | gradcheck``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Output
directories default to subdirectories of ``$TABDET_OUT`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_params
from .evaluation import MetricsReport
from .gradcheck import corrupted_backward, model_gradcheck
from .model import Detector, ModelConfig
from .reports import line_chart_svg, text_table, write_csv
from .synthdata import (Annotation, AnnotationFile, DatasetSplit, GenConfig, generate_dataset, make_splits,
                        read_dataset, write_annotations, write_dataset)
from .trainer import TrainerConfig, evaluate_model, predict_arrays, run_training

OUT_ENV = "TABDET_OUT"
SPLITS = ("labeled", "unlabeled", "validation", "all")
SWEEP_PARAMS = ("threshold", "topk", "queries")


class CommandError(Exception):
    """A runtime failure reported with exit code 1."""


def default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def _fraction(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"fraction must lie in (0, 1), got {v}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- gen-data ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    n_val = args.val if args.val is not None else int(round(args.count / 4))
    docs = generate_dataset(args.count + n_val, args.seed, GenConfig(size=args.size))
    split = make_splits(args.count, args.fraction, args.seed, n_val=n_val)
    out = Path(args.out) if args.out else default_out("data")
    write_dataset(out, docs, split)
    print(f"wrote {args.count} training images ({len(split.labeled)} labeled) "
          f"and {n_val} validation images to {out}")
    return 0


# -- train ----------------------------------------------------------------------------------

def load_trainer_config(path: str | None) -> TrainerConfig:
    return TrainerConfig.from_json(path) if path else TrainerConfig()


def resplit(split: DatasetSplit, fraction: float) -> DatasetSplit:
    """Re-draw labeled/unlabeled when the config asks for another fraction."""
    if abs(fraction - split.fraction) < 1e-12:
        return split
    n_train = len(split.labeled) + len(split.unlabeled)
    new = make_splits(n_train, fraction, split.seed, n_val=0)
    return DatasetSplit(new.labeled, new.unlabeled, split.validation, fraction, split.seed)


def train_run(cfg: TrainerConfig, data: Path, out: Path, quiet: bool = False):
    docs, split = read_dataset(data)
    split = resplit(split, cfg.label_fraction)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "version": __version__, "data": str(data),
                "out": str(out), "started": _now()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))

    def log(entry):
        if not quiet:
            ap = f" AP50 {entry['AP50']:.4f}" if "AP50" in entry else ""
            print(f"epoch {entry['epoch']:>3}  L {entry['L']:.4f}  L_s {entry['L_s']:.4f}  "
                  f"L_u {entry['L_u']:.4f}{ap}", flush=True)

    res = run_training(docs, split, cfg, out_dir=out, log=log)
    if res.final is not None:
        res.final.write(out / "metrics.json", out / "metrics.txt")
    write_csv(out / "losses.csv", res.losses, ["step", "epoch", "lr", "L", "L_s", "L_u", "alpha", "n_pseudo"])
    cols = ["epoch", "step", "L", "L_s", "L_u", "lr", "mAP", "AP50", "AP75", "AR"]
    write_csv(out / "curves.csv", res.history, cols)
    ep = [h["epoch"] for h in res.history]
    series = {"loss": (ep, [h["L"] for h in res.history])}
    if res.history and "AP50" in res.history[0]:
        series["AP50"] = (ep, [h["AP50"] for h in res.history])
    (out / "curves.svg").write_text(line_chart_svg(series, title="training"))
    manifest["finished"] = _now()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return res


def cmd_train(args) -> int:
    cfg = load_trainer_config(args.config)
    if args.supervised_only:
        cfg = replace(cfg, supervised_only=True, alpha=0.0)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out) if args.out else default_out(f"train-seed{cfg.seed}")
    res = train_run(cfg, Path(args.data), out)
    if res.final is not None:
        print(res.final.to_text(), end="")
    print(f"run directory: {out}")
    return 0


# -- eval -------------------------------------------------------------------------------------

def load_detector(checkpoint: Path, config: str | None = None) -> Detector:
    params, meta = load_params(checkpoint)
    if config:
        raw = json.loads(Path(config).read_text())
        mcfg = ModelConfig(**raw.get("model", raw))
    else:
        mcfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta.get("model", {}).items()})
    model = Detector(mcfg)
    model.load_state_dict(params)
    return model


def cmd_eval(args) -> int:
    model = load_detector(Path(args.checkpoint), args.config)
    docs, split = read_dataset(args.data)
    ids = set(range(len(docs))) if args.split == "all" else set(getattr(split, args.split))
    sel = [d for d in docs if d.id in ids]
    if not sel:
        raise CommandError(f"split '{args.split}' is empty")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval-{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    boxes, scores = predict_arrays(model, sel)
    preds = AnnotationFile(images=[{"id": d.id, "file": f"images/{d.id:05d}.pgm", "width": d.width,
                                    "height": d.height} for d in sel])
    for d in sel:
        for b, s in zip(boxes[d.id], scores[d.id]):
            preds.annotations.append(Annotation(d.id, np.clip(b, 1e-9, 1.0), float(s)))
    write_annotations(out / "predictions.json", preds)
    report = evaluate_model(model, sel)
    report.write(out / "metrics.json", out / "metrics.txt")
    print(report.to_text(), end="")
    return 0


# -- sweep ------------------------------------------------------------------------------------

def sweep_config(cfg: TrainerConfig, param: str, value) -> TrainerConfig:
    if param == "threshold":
        return replace(cfg, threshold=float(value))
    if param == "topk":
        return replace(cfg, topk=int(value))
    return replace(cfg, model={**cfg.model, "queries": int(value)})


def run_sweep(cfg: TrainerConfig, param: str, values: list, data: Path, out: Path) -> list[dict]:
    rows = []
    for v in sorted(values):
        res = train_run(sweep_config(cfg, param, v), data, out / f"{param}-{v}", quiet=True)
        m = res.final or MetricsReport(0.0, 0.0, 0.0, 0.0)
        rows.append({"value": v, "AP": m.mAP, "AP50": m.AP50, "AP75": m.AP75})
        print(f"{param}={v}: AP {m.mAP:.4f}  AP50 {m.AP50:.4f}  AP75 {m.AP75:.4f}", flush=True)
    cols = ["value", "AP", "AP50", "AP75"]
    write_csv(out / "sweep.csv", rows, cols)
    (out / "sweep.txt").write_text(text_table(rows, cols))
    return rows


def cmd_sweep(args) -> int:
    cast = float if args.param == "threshold" else int
    try:
        values = [cast(v) for v in args.values]
    except ValueError:
        args.parser.error(f"--values for {args.param} must be {cast.__name__}s")
    cfg = load_trainer_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out) if args.out else default_out(f"sweep-{args.param}")
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(cfg, args.param, values, Path(args.data), out)
    print(text_table(rows, ["value", "AP", "AP50", "AP75"]), end="")
    return 0


# -- gradcheck ----------------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    mcfg = ModelConfig.tiny()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        mcfg = ModelConfig(**raw.get("model", raw))
    t0 = time.perf_counter()
    if args.corrupt:
        with corrupted_backward(args.corrupt):
            rep = model_gradcheck(mcfg, args.size, args.images, args.seed, args.max_coords)
    else:
        rep = model_gradcheck(mcfg, args.size, args.images, args.seed, args.max_coords)
    rows = [{"module": k, "max_rel_error": f"{e:.3e}", "worst_param": n}
            for k, (e, n) in sorted(rep.per_module().items())]
    print(text_table(rows, ["module", "max_rel_error", "worst_param"]), end="")
    status = "PASS" if rep.passed(args.tol) else "FAIL"
    print(f"{status}: max relative error {rep.max_rel_error:.3e} at {rep.worst_param} "
          f"({rep.n_coords} coordinates, {time.perf_counter() - t0:.1f}s, tolerance {args.tol:g})")
    return 0 if rep.passed(args.tol) else 1


# -- entry point ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabdet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--out")
    g.add_argument("--count", type=_positive_int, default=200, help="training images")
    g.add_argument("--val", type=int, default=None, help="validation images (default count/4)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--fraction", type=_fraction, default=0.1, help="labeled share of the training images")
    g.add_argument("--size", type=int, default=128, help="page side in pixels (multiple of 8)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="teacher-student training run")
    t.add_argument("--config", help="JSON trainer config")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--supervised-only", action="store_true", help="alpha = 0 and no teacher")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True, choices=SPLITS)
    e.add_argument("--config", help="model config JSON overriding the checkpoint's")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train and evaluate once per parameter value")
    s.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    s.add_argument("--values", required=True, nargs="+")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep, parser=s)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    c.add_argument("--config", help="model config JSON (default: tiny)")
    c.add_argument("--size", type=int, default=32)
    c.add_argument("--images", type=_positive_int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-coords", type=_positive_int, default=None,
                   help="check a seeded subset of coordinates in larger parameters")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--corrupt", help=argparse.SUPPRESS)  # negative-control hook: tensor op name
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
