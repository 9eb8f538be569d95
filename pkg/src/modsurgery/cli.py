"""Operator commands: synth | train | train-ref | surgery | verify | diagnose |
sweep | report.

Every command reads one JSON config (or a named --profile) and writes its
artifacts into the output directory. Exit codes: 0 success, 1 check failure,
2 usage error. Environment variables are never read; runs are reproducible
from the config alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import certificate as certmod
from . import pipeline
from .diagnostics import sweep_rows_to_csv
from .params import load_store

PREFIX_USAGE = "usage error:"
PREFIX_CHECK = "check failure:"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modsurgery",
        description="Train a multimodal backbone, delete a modality by weight "
                    "surgery, and certify the deletion.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="pipeline config JSON")
        p.add_argument("--profile", choices=pipeline.PROFILES,
                       help="built-in defaults when no --config is given")
        p.add_argument("--out", type=Path, help="output directory (overrides config)")

    for name, help_text in (
        ("synth", "generate the synthetic corpus (.mbds)"),
        ("train", "train the backbone (model.mbdp + loss_log.csv)"),
        ("train-ref", "train the deletion reference (reference.mbdp)"),
        ("surgery", "select candidates, modify weights, issue the certificate"),
        ("diagnose", "run the certificate's test-suite spec"),
        ("report", "regenerate figure-backing CSVs from stored artifacts"),
    ):
        p = sub.add_parser(name, help=help_text)
        add_config_args(p)

    p = sub.add_parser("sweep", help="one-factor-at-a-time sensitivity sweep")
    add_config_args(p)
    p.add_argument("--axis", required=True, choices=pipeline.SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 0.5,1,2,4")

    p = sub.add_parser("verify", help="verify a deletion certificate")
    p.add_argument("certificate", type=Path)
    p.add_argument("post_store", type=Path)
    p.add_argument("--pre-store", type=Path, default=None)
    return parser


def load_config(args: argparse.Namespace) -> pipeline.PipelineConfig:
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        try:
            config = pipeline.PipelineConfig.load(args.config)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise UsageError(f"malformed config {args.config}: {err}") from err
    elif args.profile is not None:
        config = pipeline.profile(args.profile)
    else:
        raise UsageError("one of --config or --profile is required")
    if args.out is not None:
        config.output_dir = str(args.out)
    return config


class UsageError(Exception):
    pass


def _require(path: Path, what: str) -> None:
    if not path.exists():
        raise UsageError(f"missing input: {what} not found at {path}")


def cmd_synth(config: pipeline.PipelineConfig) -> int:
    out = pipeline.stage_synth(config, config.output_dir)
    print(f"wrote {out}")
    return 0


def cmd_train(config: pipeline.PipelineConfig) -> int:
    _require(pipeline.paths(config.output_dir)["dataset"], "dataset (run synth)")
    out = pipeline.stage_train(config, config.output_dir)
    print(f"wrote {out}")
    return 0


def cmd_train_ref(config: pipeline.PipelineConfig) -> int:
    _require(pipeline.paths(config.output_dir)["dataset"], "dataset (run synth)")
    out = pipeline.stage_train_reference(config, config.output_dir)
    print(f"wrote {out}")
    return 0


def cmd_surgery(config: pipeline.PipelineConfig) -> int:
    p = pipeline.paths(config.output_dir)
    _require(p["dataset"], "dataset (run synth)")
    _require(p["model"], "trained model (run train)")
    artifacts = pipeline.stage_surgery(config, config.output_dir)
    if artifacts.empty_selection:
        print("warning: empty candidate selection; certificate covers a no-op")
    print(f"mode={artifacts.plan.mode} selected={len(artifacts.plan.indices)} "
          f"sigma={artifacts.plan.sigma:.6g}")
    print(f"wrote {p['post']}")
    print(f"wrote {p['certificate']}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    _require(args.certificate, "certificate")
    _require(args.post_store, "post-surgery store")
    cert = certmod.load_certificate(args.certificate)
    post = load_store(args.post_store)
    pre = None
    if args.pre_store is not None:
        _require(args.pre_store, "pre-surgery store")
        pre = load_store(args.pre_store)
    report = certmod.verify(cert, post, pre)
    for line in report.lines():
        print(line)
    if report.passed:
        print("ALL CHECKS PASS")
        return 0
    print(f"{PREFIX_CHECK} certificate verification failed "
          f"({', '.join(report.failed_names())})")
    return 1


def cmd_diagnose(config: pipeline.PipelineConfig) -> int:
    p = pipeline.paths(config.output_dir)
    for key, what in (("dataset", "dataset"), ("model", "model"),
                      ("post", "post-surgery store"), ("certificate", "certificate")):
        _require(p[key], what)
    summary = pipeline.run_diagnostics(config, config.output_dir)
    for name, ok in summary["checks"].items():
        print(f"CHECK {name} {'PASS' if ok else 'FAIL'}")
    if all(summary["checks"].values()):
        print("ALL CHECKS PASS")
        return 0
    failed = [n for n, ok in summary["checks"].items() if not ok]
    print(f"{PREFIX_CHECK} diagnostics failed ({', '.join(failed)})")
    return 1


def cmd_sweep(config: pipeline.PipelineConfig, axis: str, values: list[float]) -> int:
    p = pipeline.paths(config.output_dir)
    _require(p["dataset"], "dataset")
    _require(p["model"], "model")
    rows = pipeline.run_sweep(config, config.output_dir, axis, values)
    out = Path(config.output_dir) / f"sweep_{axis}.csv"
    out.write_text(sweep_rows_to_csv(rows))
    print(f"wrote {out}")
    failures = [r for r in rows if r.get("error")]
    for row in failures:
        print(f"warning: value {row['value']} failed: {row['error']}")
    return 0


def cmd_report(config: pipeline.PipelineConfig) -> int:
    summary = pipeline.stage_report(config, config.output_dir)
    print(f"wrote {pipeline.paths(config.output_dir)['report_summary']}")
    for name, path in summary["artifacts"].items():
        print(f"  {name}: {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args)
        config = load_config(args)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "train-ref":
            return cmd_train_ref(config)
        if args.command == "surgery":
            return cmd_surgery(config)
        if args.command == "diagnose":
            return cmd_diagnose(config)
        if args.command == "sweep":
            values = [float(v) for v in args.values.split(",") if v.strip()]
            return cmd_sweep(config, args.axis, values)
        if args.command == "report":
            return cmd_report(config)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as err:
        print(f"{PREFIX_USAGE} {err}", file=sys.stderr)
        return 2
    except certmod.CertificateFormatError as err:
        print(f"{PREFIX_USAGE} malformed certificate: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
