"""``loraens`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 divergence during training.  Verbosity comes from ``LENS_LOG``
(a logging level name such as ``INFO``).  Every output file is written to a
temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .adapters import ConfigError
from .backbone import ModelConfig, count_parameters
from .checkpoint import CheckpointError
from .config import RunConfig
from .data import CORRUPTION_KINDS, Dataset, corrupt, gen_ood, gen_synthetic, read_dataset, write_dataset
from .diversity import summarize
from .ensemble import build_model, member_attention_weights, member_updates, predict_logits
from .gradcheck import run_gradcheck
from .metrics import fit_temperature, ood_scores, report_from_logits, temperature_scale
from .training import DivergenceError, train_run

log = logging.getLogger("loraens")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
CHECKPOINT_NAME = "model.lens"
HISTORY_NAME = "history.jsonl"
RESOLVED_NAME = "resolved_config.json"


def _write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    sys.stdout.write(text)
    if out:
        _write_atomic(out, text)


def _read_lds(path) -> Dataset:
    if not Path(path).is_file():
        raise ConfigError(f"dataset not found: {path}")
    return read_dataset(path)


def _check_geometry(ds: Dataset, cfg: ModelConfig, what: str) -> None:
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    if ds.geometry != want or ds.num_classes != cfg.num_classes:
        raise ConfigError(f"{what}: dataset geometry {ds.geometry} with {ds.num_classes} classes does not match "
                          f"model {want} with {cfg.num_classes} classes")


def _load_run(ckpt: str):
    path = Path(ckpt)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    rc = RunConfig.load(path.parent / RESOLVED_NAME)
    model = build_model(rc.model, rc.seed)
    try:
        model.load_state_dict(checkpoint.load(path))
    except KeyError as exc:
        raise ConfigError(f"checkpoint does not match its config: {exc}") from exc
    return rc, model


def _overrides(args) -> dict:
    return {"seed": args.seed, "out_dir": args.out, "jobs": args.jobs, "ensemble_size": args.members,
            "rank": args.rank, "init_scale": args.gain}


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    rc = RunConfig.load(args.config).with_overrides(**_overrides(args))
    if rc.train_data:
        train = _read_lds(rc.train_data)
        _check_geometry(train, rc.model, "train_data")
    else:
        train = gen_synthetic(rc.data, "train", rc.seed)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.info("training %s with %d members on %d samples", rc.model.method, rc.model.ensemble_size, len(train))
    result = train_run(rc.model, rc.train, train, rc.seed, history_path=out / HISTORY_NAME)
    checkpoint.save(out / CHECKPOINT_NAME, result.model.state_dict())
    rc.save(out / RESOLVED_NAME)
    print(json.dumps({"checkpoint": str(out / CHECKPOINT_NAME), "steps": result.steps,
                      "final": result.history[-1] if result.history else None}))
    return EXIT_OK


def _eval_logits(rc, model, ds: Dataset) -> np.ndarray:
    _check_geometry(ds, rc.model, "dataset")
    return predict_logits(model, ds.images, seed=rc.seed, jobs=rc.jobs)


def cmd_eval(args) -> int:
    rc, model = _load_run(args.checkpoint)
    ds = _read_lds(args.data)
    T = 1.0 if args.temperature is None else args.temperature
    if T <= 0:
        raise ConfigError("temperature must be > 0")
    report = report_from_logits(_eval_logits(rc, model, ds), ds.labels, T)
    _emit(report.to_dict(), args.out or str(Path(args.checkpoint).parent / "eval_report.json"))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    rc, model = _load_run(args.checkpoint)
    ds = _read_lds(args.data)
    T = fit_temperature(_eval_logits(rc, model, ds), ds.labels)
    _emit({"temperature": T}, args.out)
    return EXIT_OK


def cmd_ood_eval(args) -> int:
    rc, model = _load_run(args.checkpoint)
    din, dout = _read_lds(args.in_data), _read_lds(args.out_data)
    if din.geometry != dout.geometry:
        raise ConfigError(f"in/out geometry mismatch: {din.geometry} vs {dout.geometry}")
    T = 1.0 if args.temperature is None else args.temperature
    pin = temperature_scale(_eval_logits(rc, model, din), T)
    pout = temperature_scale(predict_logits(model, dout.images, seed=rc.seed, jobs=rc.jobs), T)
    res = ood_scores(pin, pout)
    res["temperature"] = T
    _emit(res, args.out or str(Path(args.checkpoint).parent / "ood_report.json"))
    return EXIT_OK


def cmd_shift_eval(args) -> int:
    rc, model = _load_run(args.checkpoint)
    ds = _read_lds(args.data)
    _check_geometry(ds, rc.model, "dataset")
    severities = [args.severity] if args.severity is not None else [1, 2, 3, 4, 5]
    kinds = args.kinds or list(CORRUPTION_KINDS)
    table = {}
    for kind in kinds:
        table[kind] = {}
        for s in severities:
            images = corrupt(ds.images, kind, s, seed=rc.seed)
            logits = predict_logits(model, images, seed=rc.seed, jobs=rc.jobs)
            table[kind][str(s)] = report_from_logits(logits, ds.labels).accuracy
    mean = {str(s): float(np.mean([table[k][str(s)] for k in kinds])) for s in severities}
    _emit({"accuracy": table, "mean_accuracy": mean}, args.out)
    return EXIT_OK


def param_table(cfg: ModelConfig) -> dict:
    counts = count_parameters(cfg)
    single = count_parameters(cfg.replace(method="single", ensemble_size=1, backbone_trainable=None))
    counts["single_total"] = single["total"]
    counts["ratio"] = counts["total"] / single["total"]
    return counts


def cmd_param_count(args) -> int:
    if args.config:
        cfg = RunConfig.load(args.config).model
    elif args.profile == "vit-b32":
        cfg = ModelConfig.vit_base_32(method="lora", rank=8)
    else:
        cfg = ModelConfig(method="lora")
    kw = {k: v for k, v in (("method", args.method), ("ensemble_size", args.members), ("rank", args.rank))
          if v is not None}
    cfg = cfg.replace(**kw).validate() if kw else cfg
    table = param_table(cfg)
    if args.json:
        _emit(table, None)
    else:
        for key in ("total", "trainable", "per_member_overhead", "backbone", "single_total"):
            print(f"{key:20s} {table[key]:>14,d}")
        print(f"{'ratio':20s} {table['ratio']:>14.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(probes=args.probes, model_probes=max(args.probes, 100), tol=args.tol)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:20s} max_rel_err={r.max_error:.3e} probes={r.probes}")
    if failed:
        print("gradcheck failed: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_analyze_diversity(args) -> int:
    ds = _read_lds(args.data)
    probs, updates, finals, init = [], [], [], None
    for ck in args.checkpoints:
        rc, model = _load_run(ck)
        probs.append(temperature_scale(_eval_logits(rc, model, ds), 1.0))
        updates.extend(member_updates(model, args.role))
        w0, fin = member_attention_weights(model, args.role)
        init = w0 if init is None else init
        finals.extend(fin)
    probs = np.concatenate(probs, axis=0)
    if probs.shape[0] < 2:
        raise ConfigError("diversity analysis needs at least two members")
    summary = summarize(probs, updates, init, finals, top_k=args.top_k, threshold=args.threshold,
                        export=not args.no_export)
    _emit(summary.to_dict(), args.out)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    seed = rc.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train", gen_synthetic(rc.data, "train", seed)), ("test", gen_synthetic(rc.data, "test", seed)),
                     ("ood", gen_ood(rc.data, seed))):
        write_dataset(out / f"{name}.lds", ds)
        print(out / f"{name}.lds")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loraens", description="LoRA ensembles on a micro vision transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--jobs", type=int)
    t.add_argument("--members", type=int)
    t.add_argument("--rank", type=int)
    t.add_argument("--gain", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="calibration report for a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--temperature", type=float)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("calibrate", help="fit a temperature on a validation dataset")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)

    o = sub.add_parser("ood-eval", help="AUROC/AUPRC/FPR@95 from maximum softmax probability")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--in-data", required=True)
    o.add_argument("--out-data", required=True)
    o.add_argument("--temperature", type=float)
    o.add_argument("--out")
    o.set_defaults(func=cmd_ood_eval)

    s = sub.add_parser("shift-eval", help="accuracy under synthetic corruptions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--severity", type=int, choices=range(1, 6))
    s.add_argument("--kinds", nargs="+", choices=CORRUPTION_KINDS)
    s.add_argument("--out")
    s.set_defaults(func=cmd_shift_eval)

    pc = sub.add_parser("param-count", help="parameter accounting")
    pc.add_argument("--config")
    pc.add_argument("--profile", choices=("micro", "vit-b32"), default="micro")
    pc.add_argument("--method")
    pc.add_argument("--members", type=int)
    pc.add_argument("--rank", type=int)
    pc.add_argument("--json", action="store_true")
    pc.set_defaults(func=cmd_param_count)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the micro model")
    g.add_argument("--probes", type=int, default=24)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("analyze-diversity", help="function- and weight-space diversity of members")
    d.add_argument("checkpoints", nargs="+")
    d.add_argument("--data", required=True)
    d.add_argument("--role", default="value", choices=("query", "key", "value", "output"))
    d.add_argument("--top-k", type=int, default=16)
    d.add_argument("--threshold", type=float, default=0.3)
    d.add_argument("--no-export", action="store_true", help="omit the function-space matrix")
    d.add_argument("--out")
    d.set_defaults(func=cmd_analyze_diversity)

    gd = sub.add_parser("gen-data", help="write synthetic train/test/ood LDS1 files")
    gd.add_argument("--config")
    gd.add_argument("--seed", type=int)
    gd.add_argument("--out", required=True)
    gd.set_defaults(func=cmd_gen_data)
    return p


def _configure_logging() -> None:
    level = os.environ.get("LENS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING) if not level.isdigit() else int(level),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
