"""Command-line entry point: ``hsiwin <subcommand> [options]``.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 audit failure.
Inputs are validated and all work is done in memory before anything is
written, so a failed command leaves no partial output behind.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datacube, pipeline
from .datacube import SynthSpec
from .network import build_model, count_flops, count_params, load_checkpoint, load_model_config
from .pipeline import AuditFailure, ExperimentConfig, PipelineError, stage
from .sampling import (
    TEST,
    audit_partition,
    baseline_pixel_sample,
    leakage_free_sample,
    patch_overlap_audit,
    WindowPartition,
)
from .train_eval import predict

log = logging.getLogger("hsiwin")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_AUDIT = 0, 1, 2, 3

REFERENCE_PARAMS = 373_000
PARAM_TOLERANCE = 0.10


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _rates_arg(text: str):
    vals = _float_list(text)
    return vals[0] if len(vals) == 1 else vals


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--seed", type=int, help="random seed (overrides the config)")
    g.add_argument("--out", "-o", help="output directory (or file prefix for synth)")
    g.add_argument("--threads", type=int, help="BLAS thread limit")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="hsiwin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic scene")
    p.add_argument("--h", type=int, default=64)
    p.add_argument("--w", type=int, default=64)
    p.add_argument("--b", type=int, default=16)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--regions", type=int, default=24)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--unlabeled-fraction", type=float, default=0.25)

    p = sub.add_parser("sample", parents=[common], help="leakage-free window partition and audit")
    p.add_argument("--labels", help="label map (prefix or .gt.json)")
    p.add_argument("--window", type=int)
    p.add_argument("--rate", type=_rates_arg, help="uniform rate or comma list per class")

    p = sub.add_parser("audit-baseline", parents=[common], help="pixel-random vs window split leakage")
    p.add_argument("--labels")
    p.add_argument("--rate", type=float, default=0.25)
    p.add_argument("--radii", type=_int_list, default=[0, 1, 2, 3])
    p.add_argument("--window", type=int, default=8)

    p = sub.add_parser("train", parents=[common], help="run the training pipeline")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")

    p = sub.add_parser("eval", parents=[common], help="score a trained model")
    p.add_argument("--run", help="training output directory (checkpoint, partition, resolved config)")
    p.add_argument("--checkpoint", help="checkpoint prefix or .ckpt.json")
    p.add_argument("--partition", help="partition JSON")
    p.add_argument("--with-truth", action="store_true", help="render ground truth beside the prediction")
    p.add_argument("--full-map", action="store_true", help="predict every window, not just the test set")

    p = sub.add_parser("cost", parents=[common], help="parameter and FLOP accounting")
    p.add_argument("--model", default="hefcn-default", help="model config name or path")
    p.add_argument("--bands", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--height", type=int, default=145)
    p.add_argument("--width", type=int, default=145)
    p.add_argument("--timing-window", type=int, default=8)
    p.add_argument("--timing-windows", type=int, default=4, help="windows to time when no data is given")

    p = sub.add_parser("sweep", parents=[common], help="repeat the pipeline over settings")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--windows", type=_int_list)
    g.add_argument("--fractions", type=_float_list)
    p.add_argument("--epochs", type=int)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _need(value, flag: str):
    if value is None:
        raise CLIError(f"{flag} is required")
    return value


def _load_json_config(path: str | None) -> tuple[dict, Path | None]:
    if path is None:
        return {}, None
    p = Path(path)
    with stage("cli: config"):
        if not p.is_file():
            raise FileNotFoundError(f"config not found: {p}")
        with open(p) as fh:
            return json.load(fh), p.parent


def _experiment(args, require_out: bool = True) -> ExperimentConfig:
    if args.config is None:
        raise CLIError("--config <experiment.json> is required")
    with stage("cli: config"):
        cfg = pipeline.load_experiment(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "epochs", None) is not None:
            cfg.train = {**cfg.train, "epochs": args.epochs}
        if args.out is not None:
            cfg.out = args.out
        elif cfg.out is not None and not Path(cfg.out).is_absolute():
            cfg.out = str(Path(args.config).parent / cfg.out)
        cfg.validate()
    if require_out and cfg.out is None:
        raise CLIError("no output directory: pass --out or set 'out' in the config")
    return cfg


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = _need(args.out, "--out")
    spec = SynthSpec(
        height=args.h,
        width=args.w,
        bands=args.b,
        num_classes=args.k,
        regions=args.regions,
        separation=args.separation,
        noise=args.noise,
        unlabeled_fraction=args.unlabeled_fraction,
    )
    with stage("datacube: synth_dataset"):
        spec.validate()
        cube, labels = datacube.synth_dataset(spec, seed=args.seed if args.seed is not None else 0)
    with stage("datacube: write"):
        hdr = datacube.save_cube(cube, out)
        meta = datacube.save_labels(labels, out)
    _emit(f"wrote {hdr} and {meta} ({spec.height}x{spec.width}x{spec.bands}, K={spec.num_classes})")
    return EXIT_OK


def cmd_sample(args) -> int:
    d, base = _load_json_config(args.config)
    labels_path = args.labels or d.get("labels")
    labels_path = _need(labels_path, "--labels")
    if args.labels is None and base is not None and not Path(labels_path).is_absolute():
        labels_path = str(base / labels_path)
    window = args.window if args.window is not None else d.get("window")
    window = int(_need(window, "--window"))
    rates = args.rate if args.rate is not None else d.get("rates", 0.3)
    seed = args.seed if args.seed is not None else int(d.get("seed", 0))
    if window < 1:
        raise CLIError(f"--window must be >= 1, got {window}")

    with stage("datacube: load_labels"):
        labels = datacube.load_labels(labels_path)
    with stage("sampling: leakage_free_sample"):
        part = leakage_free_sample(None, labels, window, rates, seed)
    with stage("sampling: audit_partition"):
        report = audit_partition(part, labels)

    rows, cols = part.grid_dims
    n_train, n_test = len(part.windows(1)), len(part.windows(2))
    _emit(
        f"windows: {part.num_windows} ({rows}x{cols} of {window}x{window}); "
        f"train {n_train}, test {n_test}, unassigned {part.num_windows - n_train - n_test}"
    )
    _emit(f"leakage pixels: {report.leakage_pixel_count}; uncovered labelled pixels: "
          f"{report.uncovered_labelled_pixel_count}")
    _emit("audit: " + ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in report.flags.items()))
    if args.out is not None:
        out = Path(args.out)
        with stage("cli: write"):
            out.mkdir(parents=True, exist_ok=True)
            part.save(out / "partition.json")
            (out / "audit.json").write_text(_dump(report.to_json()))
    if not report.passed:
        raise AuditFailure(report)
    return EXIT_OK


def audit_baseline_table(labels, rate: float, radii, window: int, seed: int) -> str:
    """CSV rows comparing patch overlap of a pixel-random split with window leakage."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["method", "radius", "overlapping_test_pixels", "test_pixels", "fraction"])
    split = baseline_pixel_sample(labels, rate, seed)
    for r in radii:
        res = patch_overlap_audit(split, r)
        wr.writerow(["pixel_random", r, res["overlapping_test_pixel_count"], res["test_pixel_count"],
                     f"{res['fraction']:.6f}"])
    part = leakage_free_sample(None, labels, window, rate, seed)
    report = audit_partition(part, labels)
    n_test = sum(report.test_pixels.values())
    # windows are forwarded whole, so a test pixel can only see its own window
    for r in radii:
        wr.writerow(["leakage_free", r, report.leakage_pixel_count, n_test,
                     f"{report.leakage_pixel_count / n_test if n_test else 0.0:.6f}"])
    return buf.getvalue()


def cmd_audit_baseline(args) -> int:
    d, base = _load_json_config(args.config)
    labels_path = args.labels or d.get("labels")
    labels_path = _need(labels_path, "--labels")
    if args.labels is None and base is not None and not Path(labels_path).is_absolute():
        labels_path = str(base / labels_path)
    if any(r < 0 for r in args.radii):
        raise CLIError("radii must be >= 0")
    seed = args.seed if args.seed is not None else int(d.get("seed", 0))
    with stage("datacube: load_labels"):
        labels = datacube.load_labels(labels_path)
    with stage("sampling: audit"):
        table = audit_baseline_table(labels, args.rate, args.radii, args.window, seed)
    _emit(table)
    if args.out is not None:
        with stage("cli: write"):
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "audit_baseline.csv").write_text(table)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    result = pipeline.run_training(cfg)
    with stage("cli: write"):
        paths = pipeline.write_training_outputs(result, cfg.out)
    last = result.history[-1]
    _emit(
        f"trained {len(result.history)} epochs: loss {result.history[0].mean_loss:.4f} -> "
        f"{last.mean_loss:.4f}, train OA {last.train_oa:.4f}"
    )
    _emit(f"checkpoint: {paths['checkpoint']}")
    return EXIT_OK


def _resolve_eval_inputs(args):
    run = Path(args.run) if args.run else None
    config = args.config or (str(run / "resolved_config.json") if run else None)
    ckpt = args.checkpoint or (str(run / "model") if run else None)
    part = args.partition or (str(run / "partition.json") if run else None)
    if config is None or ckpt is None or part is None:
        raise CLIError("eval needs --run <dir> or all of --config, --checkpoint and --partition")
    return config, ckpt, part


def cmd_eval(args) -> int:
    config, ckpt, part_path = _resolve_eval_inputs(args)
    with stage("cli: config"):
        cfg = pipeline.load_experiment(config)
    out = args.out or (args.run if args.run else cfg.out)
    if out is None:
        raise CLIError("no output directory: pass --out")
    with stage("network: load_checkpoint"):
        model = load_checkpoint(ckpt)
    with stage("sampling: load_partition"):
        part = WindowPartition.load(part_path)
    result = pipeline.run_eval(cfg, model, part, full_map=args.full_map, with_truth=args.with_truth)
    with stage("cli: write"):
        pipeline.write_eval_outputs(result, out)
    r = result.report
    _emit(f"OA {r.oa:.4f}  AA {r.aa:.4f}  kappa {r.kappa:.4f}  ({r.n_test_pixels} test pixels)")
    return EXIT_OK


def cost_report(model, height: int, width: int, timing: dict | None = None) -> dict:
    params = count_params(model)
    rel = abs(params - REFERENCE_PARAMS) / REFERENCE_PARAMS
    report = {
        "params": params,
        "flops_mac2": count_flops(model, height, width, mac_flops=2),
        "flops_mac1": count_flops(model, height, width, mac_flops=1),
        "conv_flops_mac2": count_flops(model, height, width, mac_flops=2, elementwise=False),
        "conv_flops_mac1": count_flops(model, height, width, mac_flops=1, elementwise=False),
        "input": [height, width],
        "reference_params": REFERENCE_PARAMS,
        "relative_deviation": rel,
        "within_tolerance": bool(rel <= PARAM_TOLERANCE),
    }
    if timing:
        report.update(timing)
    return report


def cmd_cost(args) -> int:
    timing = None
    if args.config is not None:
        cfg = _experiment(args, require_out=False)
        cube, labels = pipeline.prepare_data(cfg)
        with stage("network: config"):
            model = build_model(cfg.model_config(cube.bands, labels.num_classes), seed=cfg.seed)
        part, _ = pipeline.make_partition(cfg, cube, labels)
        h, w = cube.height, cube.width
        with stage("train_eval: predict"):
            t0 = time.perf_counter()
            predict(model, cube, part, TEST)
            elapsed = time.perf_counter() - t0
        timing = {"inference_seconds": elapsed, "timed_windows": len(part.windows(TEST))}
    else:
        overrides = {}
        if args.bands is not None:
            overrides["input_bands"] = args.bands
        if args.classes is not None:
            overrides["num_classes"] = args.classes
        with stage("network: config"):
            mcfg = load_model_config(args.model, **overrides)
            model = build_model(mcfg, seed=args.seed or 0)
        h, w = args.height, args.width
        n, tw = args.timing_windows, args.timing_window
        if n > 0:
            rng = np.random.Generator(np.random.PCG64(0))
            x = rng.uniform(-1, 1, size=(n, mcfg.input_bands, tw, tw)).astype(np.float32)
            t0 = time.perf_counter()
            model.forward(x, training=False)
            timing = {"inference_seconds": time.perf_counter() - t0, "timed_windows": n}
    report = cost_report(model, h, w, timing)
    verdict = "within" if report["within_tolerance"] else "outside"
    _emit(_dump(report))
    _emit(f"params {report['params']:,} vs reference {REFERENCE_PARAMS:,}: {verdict} +/-{PARAM_TOLERANCE:.0%}")
    if args.out is not None:
        with stage("cli: write"):
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "cost.json").write_text(_dump(report))
    return EXIT_OK


SWEEP_FIELDS = ["setting", "value", "seed", "status", "train_windows", "test_windows",
                "leakage", "oa", "aa", "kappa", "message"]


def sweep_rows(cfg: ExperimentConfig, kind: str, values) -> list[dict]:
    """Run the pipeline once per distinct setting; seeds are ``cfg.seed + index``."""
    seen = []
    for v in values:
        if v not in seen:
            seen.append(v)
    rows = []
    for i, v in enumerate(seen):
        run_cfg = replace(cfg, seed=cfg.seed + i)
        if kind == "window":
            run_cfg.window = int(v)
        else:
            run_cfg.train_fraction = float(v)
        row = dict.fromkeys(SWEEP_FIELDS, "")
        row.update(setting=kind, value=v, seed=run_cfg.seed)
        try:
            run_cfg.validate()
            result = pipeline.run_training(run_cfg)
            ev = pipeline.run_eval(run_cfg, result.model, result.partition)
        except (PipelineError, AuditFailure, ValueError) as exc:
            if isinstance(exc, PipelineError) and not exc.is_validation:
                raise
            log.warning("sweep %s=%s skipped: %s", kind, v, exc)
            row.update(status="skipped", message=str(exc))
            rows.append(row)
            continue
        part = result.partition
        row.update(
            status="ok",
            train_windows=len(part.windows(1)),
            test_windows=len(part.windows(2)),
            leakage=result.audit.leakage_pixel_count,
            oa=f"{ev.report.oa:.6f}",
            aa=f"{ev.report.aa:.6f}",
            kappa=f"{ev.report.kappa:.6f}",
        )
        rows.append(row)
    return rows


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    if args.windows is not None:
        kind, values = "window", args.windows
        if any(v < 1 for v in values):
            raise CLIError("window sizes must be >= 1")
    else:
        kind, values = "fraction", args.fractions
        if any(not 0 < v <= 1 for v in values):
            raise CLIError("fractions must lie in (0, 1]")
    rows = sweep_rows(cfg, kind, values)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    wr.writeheader()
    wr.writerows(rows)
    with stage("cli: write"):
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(buf.getvalue())
    _emit(buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "sample": cmd_sample,
    "audit-baseline": cmd_audit_baseline,
    "train": cmd_train,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "sweep": cmd_sweep,
}


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise CLIError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except CLIError as exc:
        print(f"hsiwin {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except AuditFailure as exc:
        print(f"hsiwin {args.command}: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except PipelineError as exc:
        print(f"hsiwin {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if exc.is_validation else EXIT_RUNTIME
    except (ValueError, FileNotFoundError) as exc:
        print(f"hsiwin {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        print(f"hsiwin {args.command}: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
