"""Command-line entry point: ``latent-steer <command> [options]``.

Exit status is 0 on success, 2 on usage or configuration errors (including
banks without labels where labels are needed) and 1 on runtime failures.
Diagnostics go to standard error; summaries go to standard output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .featurebank import HeadId, MissingLabelsError, load_bank, save_bank, synth_bank
from .hmc import load_checkpoint, save_checkpoint
from .metrics import evaluate_curves, write_sweep_csv
from .pipeline import (SWEEP_AXES, ConfigError, RunConfig, calibration_set, fit, make_banks,
                       n_workers, select, stability, sweep, write_resolved)
from .plot import write_svg
from .rsa import RsaReport
from .scorer import AnomalyCurve, infer, labels_to_frames, read_curve_csv, write_curves

log = logging.getLogger("latent_steer")


class UsageError(Exception):
    """Bad command-line input detected after parsing."""


# flag -> (config key, type)
OVERRIDE_FLAGS = {
    "--n-layers": ("synth.n_layers", int),
    "--n-heads-per-layer": ("synth.n_heads_per_layer", int),
    "--d-model": ("synth.d_model", int),
    "--d-head": ("synth.d_head", int),
    "--n-normal": ("synth.n_normal", int),
    "--n-anomalous": ("synth.n_anomalous", int),
    "--planted": ("synth.n_planted", int),
    "--delta": ("synth.delta", float),
    "--noise-sigma": ("synth.noise_sigma", float),
    "--context-signal": ("synth.context_signal", float),
    "--segments-per-video": ("synth.segments_per_video", int),
    "--sample-seed": ("synth.sample_seed", int),
    "--k": ("rsa.k", int),
    "--metric": ("rsa.metric", str),
    "--ratio-normal": ("rsa.ratio_normal", float),
    "--variant": ("hmc.variant", str),
    "--d-hidden": ("hmc.d_hidden", int),
    "--rank": ("hmc.r", int),
    "--epochs": ("train.epochs", int),
    "--batch-size": ("train.batch_size", int),
    "--lr": ("train.learning_rate", float),
    "--lambda-reg": ("train.lambda_reg", float),
    "--loss-reduction": ("train.loss_reduction", str),
    "--sigma-g": ("inference.sigma_g", float),
    "--tau": ("inference.tau_anomaly", float),
}


def _parse_set(item: str):
    if "=" not in item:
        raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(args) -> RunConfig:
    """Config file, then ``--set`` pairs, then dedicated flags (flags win)."""
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = dict(_parse_set(s) for s in args.set or ())
    for flag, (key, _) in OVERRIDE_FLAGS.items():
        value = getattr(args, _dest(flag))
        if value is not None:
            overrides[key] = value
    if args.balanced is not None:
        overrides["rsa.balanced"] = args.balanced
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    return cfg.with_overrides(overrides) if overrides else cfg


def _dest(flag: str) -> str:
    return "ovr_" + flag.lstrip("-").replace("-", "_")


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="JSON run configuration")
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. train.epochs=200 (repeatable)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir", help="directory for outputs and the resolved config")
    g.add_argument("--balanced", dest="balanced", action="store_true", default=None,
                   help="undersample to rsa.ratio_normal before selection and training")
    g.add_argument("--no-balanced", dest="balanced", action="store_false")
    for flag, (key, typ) in OVERRIDE_FLAGS.items():
        g.add_argument(flag, dest=_dest(flag), type=typ, metavar=key.split(".")[1].upper(),
                       help=f"sets {key}")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="latent-steer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic feature bank")
    p.add_argument("--out", help="bank base path (default: OUT_DIR/calibration or OUT_DIR/holdout)")
    p.add_argument("--format", choices=("binary", "json"), default="binary")
    p.add_argument("--holdout", action="store_true",
                   help="write the held-out twin (same geometry, fresh draws)")

    p = sub.add_parser("rsa", parents=[common], help="rank heads and select experts")
    p.add_argument("bank")
    p.add_argument("--out", help="report path (default: OUT_DIR/rsa_report.json)")

    p = sub.add_parser("train", parents=[common], help="train controller and scorer")
    p.add_argument("bank")
    p.add_argument("--report", required=True, help="selection report from `rsa`")
    p.add_argument("--out", help="checkpoint path (default: OUT_DIR/checkpoint.lsck)")

    p = sub.add_parser("infer", parents=[common], help="score a bank into anomaly curves")
    p.add_argument("bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="curve directory (default: OUT_DIR/curves)")

    p = sub.add_parser("eval", parents=[common], help="frame-level AUC / AP of curves")
    p.add_argument("curves", help="curve directory written by `infer`")
    p.add_argument("--labels", help="labeled bank, for curves written without labels")
    p.add_argument("--use", choices=("smooth", "raw"), default="smooth")
    p.add_argument("--out", help="report path (default: OUT_DIR/eval.json)")

    p = sub.add_parser("sweep", parents=[common], help="AUC / AP along one hyperparameter axis")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--bank", help="calibration bank (default: synthesize from config)")
    p.add_argument("--holdout-bank", help="evaluation bank (required with --bank)")
    p.add_argument("--out", help="CSV path (default: OUT_DIR/sweep_<axis>.csv)")

    p = sub.add_parser("stability", parents=[common], help="selection stability across seeds")
    p.add_argument("bank", nargs="?", help="labeled bank (default: synthesize from config)")
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--fraction", type=float, default=0.5, help="share of videos kept per seed")

    p = sub.add_parser("plot", parents=[common], help="render one curve CSV as SVG")
    p.add_argument("curve", help="per-video CSV written by `infer`")
    p.add_argument("--out", help="SVG path (default: next to the CSV)")
    return parser


# ---------------------------------------------------------------------------
# commands

def _out(args, cfg: RunConfig, default: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else Path(cfg.out_dir) / default


def _summary(bank) -> dict:
    doc = {"segments": len(bank), "videos": len(bank.video_ids()), "heads": len(bank.heads),
           "d_model": bank.meta.d_model, "d_head": bank.meta.d_head,
           "fingerprint": bank.fingerprint()}
    if bank.has_labels:
        y = bank.labels()
        doc.update(normal=int((y == 0).sum()), anomalous=int((y == 1).sum()))
    return doc


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = cfg.synth_spec(holdout=args.holdout)
    bank = synth_bank(spec)
    path = save_bank(bank, _out(args, cfg, "holdout" if args.holdout else "calibration"),
                    args.format)
    doc = _summary(bank)
    doc.update(path=str(path), planted=[str(h) for h, _ in spec.planted_heads])
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_rsa(args, cfg: RunConfig) -> int:
    bank = load_bank(args.bank)
    report = select(bank, cfg)
    path = _out(args, cfg, "rsa_report.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.dumps() + "\n")
    print(json.dumps({"report": str(path), "selected": [str(h) for h in report.selected],
                      **report.notes}, sort_keys=True))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    bank = load_bank(args.bank)
    try:
        report = RsaReport.from_json(json.loads(Path(args.report).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise UsageError(f"{args.report}: not a selection report ({e})") from e
    if report.bank_fingerprint != calibration_set(bank, cfg).fingerprint():
        log.warning("report was computed on a different calibration set than this bank/config")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    result = fit(bank, report.selected, cfg, log_path=log_path)
    path = save_checkpoint(result["params"], _out(args, cfg, "checkpoint.lsck"), seed=cfg.seed,
                           epoch=cfg.train.epochs, selected=report.selected)
    last = result["state"].loss_history[-1] if result["state"].loss_history else {}
    print(json.dumps({"checkpoint": str(path), "train_log": str(log_path),
                      "variant": cfg.hmc.variant, "final": last}, sort_keys=True))
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    bank = load_bank(args.bank)
    params, header = load_checkpoint(args.checkpoint)
    if not header.get("selected"):
        raise UsageError(f"{args.checkpoint} does not record its selected heads")
    selected = [HeadId(*h) for h in header["selected"]]
    curves = infer(bank, params, selected, cfg.inference_config())
    out_dir = _out(args, cfg, "curves")
    summary = write_curves(curves, out_dir)
    flagged = sum(len(c.flags) for c in curves.values())
    print(json.dumps({"curves": str(out_dir), "summary": str(summary), "videos": len(curves),
                      "flagged_segments": flagged}, sort_keys=True))
    return 0


def _load_curves(curve_dir: Path, labels_bank: Optional[str]) -> dict[str, AnomalyCurve]:
    summary_path = curve_dir / "summary.json"
    if not summary_path.exists():
        raise UsageError(f"{curve_dir} has no summary.json; pass a directory written by `infer`")
    summary = json.loads(summary_path.read_text())
    bank_labels = {}
    if labels_bank:
        bank = load_bank(labels_bank)
        bank.labels()
        by_video: dict[str, list] = {}
        for r in bank.records:
            by_video.setdefault(r.video_id, []).append(r)
        bank_labels = {v: recs for v, recs in by_video.items()}
    curves = {}
    for entry in summary["videos"]:
        vid = entry["video_id"]
        data = read_curve_csv(curve_dir / entry["csv"])
        labels = data.get("label")
        if vid in bank_labels:
            labels = labels_to_frames(bank_labels[vid], len(data["raw"]))
        if labels is None:
            raise MissingLabelsError(f"no frame labels for video {vid}; pass --labels BANK")
        curves[vid] = AnomalyCurve(vid, np.asarray(entry["segment_probs"]), data["raw"],
                                   data["smooth"], [], (), labels, entry.get("class_name"))
    if not curves:
        raise UsageError(f"{curve_dir}: no curves listed")
    return curves


def cmd_eval(args, cfg: RunConfig) -> int:
    curves = _load_curves(Path(args.curves), args.labels)
    report = evaluate_curves(curves, use=args.use)
    path = _out(args, cfg, "eval.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.dumps() + "\n")
    print(json.dumps({"auc": report.auc, "ap": report.ap, "report": str(path)}, sort_keys=True))
    return 0


def _parse_values(axis: str, raw: str) -> list:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise UsageError("--values must list at least one value")
    cast = int if axis == "k_experts" else float
    try:
        return [cast(v) for v in items]
    except ValueError as e:
        raise UsageError(f"bad --values for {axis}: {e}") from e


def cmd_sweep(args, cfg: RunConfig) -> int:
    values = _parse_values(args.axis, args.values)
    banks = None
    if args.bank:
        if not args.holdout_bank:
            raise UsageError("--bank needs --holdout-bank to evaluate on")
        banks = (load_bank(args.bank), load_bank(args.holdout_bank))
    rows = sweep(cfg, args.axis, values, banks=banks)
    path = write_sweep_csv(rows, _out(args, cfg, f"sweep_{args.axis}.csv"))
    for r in rows:
        print(f"{r['parameter']}={r['value']}\tauc={r['auc']:.6f}\tap={r['ap']:.6f}\t"
              f"selected={','.join(r['selected'])}")
    print(f"wrote {path}", file=sys.stderr)
    return 0


def cmd_stability(args, cfg: RunConfig) -> int:
    if args.n_seeds < 2:
        raise UsageError("--n-seeds must be >= 2 to compare selections")
    if not 0.0 < args.fraction <= 1.0:
        raise UsageError("--fraction must lie in (0, 1]")
    bank = load_bank(args.bank) if args.bank else make_banks(cfg)[0]
    result = stability(bank, cfg, args.n_seeds, args.fraction)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "stability.json").write_text(json.dumps(result.to_json(), indent=1, sort_keys=True) + "\n")
    with open(out_dir / "stability_selected.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "selected"])
        for row in result.table():
            w.writerow([row["seed"], " ".join(row["selected"])])
    print(json.dumps({"identical": result.identical,
                      "min_jaccard": float(result.matrix.min()),
                      "output": str(out_dir / "stability.json")}, sort_keys=True))
    return 0


def cmd_plot(args, cfg: RunConfig) -> int:
    src = Path(args.curve)
    if not src.is_file():
        raise UsageError(f"{src}: no such curve file")
    try:
        data = read_curve_csv(src)
    except (ValueError, KeyError) as e:
        raise UsageError(str(e)) from e
    out = Path(args.out) if args.out else src.with_suffix(".svg")
    write_svg(data, out, title=src.stem)
    print(str(out))
    return 0


COMMANDS = {"synth": cmd_synth, "rsa": cmd_rsa, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "sweep": cmd_sweep, "stability": cmd_stability, "plot": cmd_plot}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        n_workers()
        write_resolved(cfg, cfg.out_dir)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, MissingLabelsError) as e:
        print(f"latent-steer {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("traceback", exc_info=True)
        print(f"latent-steer {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
