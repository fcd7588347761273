"""``qnnharden`` command line.

Subcommands: fixture, analyze, protect, inject, campaign. Options can also be
set through ``QNNH_*`` environment variables (flags win). Exit codes: 0 ok,
1 consistency check failed, 2 usage error, 3 I/O or parse error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _env(name, default):
    return os.environ.get("QNNH_" + name, default)


def _thresholds(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    try:
        out = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None
    if any(not 0 <= t <= 1 for t in out):
        raise argparse.ArgumentTypeError("thresholds must lie in [0, 1]")
    return out


def _bool_env(name) -> bool:
    return _env(name, "0").lower() in ("1", "true", "yes", "on")


def _emit(args, summary: dict, lines: list):
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _criticality_table(profile, total, thresholds):
    from .analysis import select_critical

    rows = []
    for t in thresholds:
        k = len(select_critical(profile, t))
        rows.append({"nvf": t, "neurons": k, "portion": k / total if total else 0.0})
    return rows


# --- subcommands -------------------------------------------------------------------


def cmd_fixture(args) -> int:
    from . import io
    from .data import blobs16d
    from .fixture import build_fixture

    os.makedirs(args.out, exist_ok=True)
    fx = build_fixture(args.seed)
    io.save_model(fx.net, os.path.join(args.out, "model.json"))
    io.save_dataset(fx.train, os.path.join(args.out, "train.csv"))
    io.save_dataset(fx.test, os.path.join(args.out, "test.csv"))
    io.save_dataset(blobs16d("train", args.seed), os.path.join(args.out, "blobs16d_train.csv"))
    io.save_dataset(blobs16d("test", args.seed), os.path.join(args.out, "blobs16d_test.csv"))
    acc = fx.accuracies()
    _emit(args, {"command": "fixture", "seed": args.seed, "out": args.out, **acc},
          [f"{k}: {v:.4f}" for k, v in acc.items()])
    return EXIT_OK


def cmd_analyze(args) -> int:
    from . import io
    from .analysis import analyze
    from .campaign import DEFAULT_THRESHOLDS

    net = io.load_model(args.model)
    ds = io.load_dataset(args.dataset)
    if len(ds) == 0:
        raise UsageError("analysis dataset is empty")
    profile = analyze(net, ds, bisect=args.bisect, verify=args.verify,
                      negative_offset=not args.compat_negative_bits, workers=args.workers)
    io.save_profile(profile, args.out)
    table = _criticality_table(profile, net.neuron_count, DEFAULT_THRESHOLDS)
    lines = ["NVF(%)  #neurons  portion(%)"]
    lines += [f"{100 * r['nvf']:>6g}  {r['neurons']:>8d}  {100 * r['portion']:>9.2f}" for r in table]
    _emit(args, {"command": "analyze", "neurons": net.neuron_count, "inputs": profile.inputs_seen,
                 "max_nvf": profile.max_nvf, "criticality": table}, lines)
    return EXIT_OK


def cmd_protect(args) -> int:
    from . import engine, io
    from .analysis import select_critical
    from .transform import OddParameterError, evenize, split_neurons, triplicate_neurons

    net = io.load_model(args.model)
    profile = io.load_profile(args.profile)
    for layer, lv in profile.layers.items():
        if layer not in net.tap_position or len(lv.nvf) != net.units(layer):
            raise UsageError("profile does not match the model")
    critical = select_critical(profile, args.threshold)
    source = net
    if args.mode == "split":
        if not args.no_evenize:
            source = evenize(net, critical)
        try:
            pn = split_neurons(source, critical)
        except OddParameterError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    else:
        pn = triplicate_neurons(source, critical)
    io.save_model(pn.net, args.out_model)
    io.save_plan(pn.plan, args.out_plan)

    summary = {"command": "protect", "mode": args.mode, "threshold": args.threshold,
               "protected": len(critical), "added_neurons": pn.added_neurons,
               "neurons_before": net.neuron_count, "neurons_after": pn.net.neuron_count}
    lines = [f"protected {len(critical)} neurons ({args.mode}): "
             f"{net.neuron_count} -> {pn.net.neuron_count} neurons (+{pn.added_neurons})"]
    status = EXIT_OK
    if args.dataset:
        ds = io.load_dataset(args.dataset)
        x = engine.quantize_input(net, ds.features)
        same = bool(np.array_equal(engine.logits_batch(source, x), engine.logits_batch(pn.net, x)))
        summary["fault_free_equivalent"] = same
        lines.append("fault-free equivalence: " + ("ok" if same else "MISMATCH"))
        status = EXIT_OK if same else EXIT_CHECK
    _emit(args, summary, lines)
    return status


def cmd_inject(args) -> int:
    from . import io
    from .faultsim import FaultSpec, VariantUnderTest, evaluate_fault
    from .network import NeuronId
    from .transform import ProtectedNetwork

    net = io.load_model(args.model)
    ds = io.load_dataset(args.dataset)
    if len(ds) == 0:
        raise UsageError("dataset is empty")
    if args.plan:
        plan = io.load_plan(args.plan, mode=args.mode)
        variant = VariantUnderTest.from_protected(ProtectedNetwork(net, plan, args.model))
    else:
        variant = VariantUnderTest.unprotected(net)
    fault = FaultSpec(NeuronId(args.layer, args.unit), args.bit)
    out = evaluate_fault(variant, ds, fault)
    _emit(args, {"command": "inject", "variant": variant.kind, "layer": args.layer, "unit": args.unit,
                 "bit": args.bit, "accuracy": out.accuracy, "flips": out.per_input_flips},
          [f"{variant.kind}: accuracy {out.accuracy:.4f}, {out.per_input_flips} of {len(ds)} predictions flipped"])
    return EXIT_OK


def cmd_campaign(args) -> int:
    from . import io
    from .campaign import CampaignConfig, check_report, run_campaign, write_report

    net = io.load_model(args.model)
    profile = io.load_profile(args.profile)
    ds = io.load_dataset(args.dataset)
    if len(ds) == 0:
        raise UsageError("test dataset is empty")
    cfg = CampaignConfig(
        confidence=args.confidence,
        margin=args.margin,
        seed=args.seed,
        nvf_thresholds=args.thresholds,
        exhaustive=args.exhaustive,
        accounting=args.accounting,
        workers=args.workers,
    )
    report = run_campaign(net, profile, ds, cfg)
    paths = write_report(report, args.out, plots=args.plots)
    problems = check_report(report)
    summary = {
        "command": "campaign",
        "files": [os.path.basename(p) for p in paths],
        "consistency": problems,
        "rows": [
            {k: getattr(r, k) for k in ("variant", "threshold", "accuracy_loss", "critical_fault_fraction",
                                        "neuron_count", "sample_size")}
            for r in report.rows
        ],
    }
    lines = [f"wrote {p}" for p in paths] + [f"consistency: {p}" for p in problems]
    _emit(args, summary, lines)
    return EXIT_CHECK if problems else EXIT_OK


# --- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qnnharden", description="Fault-vulnerability analysis and hardening of int8 networks.")
    p.add_argument("--json", action="store_true", default=_bool_env("JSON"), help="print a JSON summary")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    workers = int(_env("WORKERS", "1"))

    f = sub.add_parser("fixture", help="train and quantize the bundled fixture MLP")
    f.add_argument("--out", default="fixture")
    f.add_argument("--seed", type=int, default=int(_env("SEED", "42")))
    f.set_defaults(func=cmd_fixture)

    a = sub.add_parser("analyze", help="compute the per-neuron vulnerability profile")
    a.add_argument("model")
    a.add_argument("dataset")
    a.add_argument("--out", default="profile.csv")
    a.add_argument("--bisect", action="store_true", help="interval-certified bisection instead of a full scan")
    a.add_argument("--verify", action="store_true", help="cross-check bisection against the scan")
    a.add_argument("--compat-negative-bits", action="store_true",
                   help="map negative perturbations without the +1 bit offset")
    a.add_argument("--workers", type=int, default=workers)
    a.set_defaults(func=cmd_analyze)

    pr = sub.add_parser("protect", help="split or triplicate the critical neurons")
    pr.add_argument("model")
    pr.add_argument("profile")
    pr.add_argument("--threshold", type=float, default=float(_env("THRESHOLD", "0.2")))
    pr.add_argument("--mode", choices=("split", "tmr"), default=_env("MODE", "split"))
    pr.add_argument("--out-model", default="protected.json")
    pr.add_argument("--out-plan", default="plan.csv")
    pr.add_argument("--no-evenize", action="store_true", help="refuse odd parameters instead of evenizing")
    pr.add_argument("--dataset", help="check fault-free equivalence on this dataset")
    pr.set_defaults(func=cmd_protect)

    i = sub.add_parser("inject", help="evaluate one bit-flip fault")
    i.add_argument("model")
    i.add_argument("dataset")
    i.add_argument("--plan", help="protection plan CSV (omit for an unprotected model)")
    i.add_argument("--mode", choices=("split", "tmr"), default=None, help="mode of an empty plan")
    i.add_argument("--layer", type=int, required=True)
    i.add_argument("--unit", type=int, required=True)
    i.add_argument("--bit", type=int, required=True)
    i.set_defaults(func=cmd_inject)

    c = sub.add_parser("campaign", help="three-variant fault-injection sweep")
    c.add_argument("model")
    c.add_argument("profile")
    c.add_argument("dataset")
    c.add_argument("--out", default="report")
    c.add_argument("--seed", type=int, default=int(_env("SEED", "0")))
    c.add_argument("--confidence", type=float, default=float(_env("CONFIDENCE", "0.95")))
    c.add_argument("--margin", type=float, default=float(_env("MARGIN", "0.01")))
    c.add_argument("--thresholds", type=_thresholds,
                   default=_thresholds(_env("THRESHOLDS", "0,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5")))
    c.add_argument("--exhaustive", action="store_true", default=_bool_env("EXHAUSTIVE"),
                   help="enumerate every fault instead of sampling")
    c.add_argument("--accounting", choices=("pair", "fault"), default=_env("ACCOUNTING", "pair"))
    c.add_argument("--workers", type=int, default=workers)
    c.add_argument("--plots", action="store_true", help="also write SVG charts (needs matplotlib)")
    c.set_defaults(func=cmd_campaign)
    return p


def main(argv=None) -> int:
    from .io import FormatError

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except (ValueError, argparse.ArgumentTypeError) as exc:  # malformed QNNH_* value
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
