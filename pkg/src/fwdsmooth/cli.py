"""Command-line entry point: ``fwdsmooth {simulate,variance-study,estimate,verify}``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical error during a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .errors import (
    CapacityError,
    DegenerateBackwardKernelError,
    DegenerateWeightsError,
    NumericalError,
    ParameterDomainError,
)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("fwdsmooth")


def _csv_list(text):
    return [s for s in (t.strip() for t in text.split(",")) if s]


def _int_list(text):
    return [int(s) for s in _csv_list(text)]


def _model_arg(text):
    """``lgssm``/``sv``/``hmm`` (default parameters), a JSON file or inline JSON."""
    if text in ("lgssm", "sv"):
        return json.loads(json.dumps(ex.LGSSM_STAR if text == "lgssm" else ex.SV_STAR))
    if text == "hmm":
        return {"model": "hmm", "params": {
            "initial": [1 / 3] * 3,
            "transition": [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]],
            "emission": [[0.7, 0.2, 0.1], [0.1, 0.7, 0.2], [0.2, 0.1, 0.7]],
        }}
    p = Path(text)
    return json.loads(p.read_text()) if p.exists() else json.loads(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fwdsmooth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override its fields)")
    common.add_argument("--preset", choices=sorted(ex.PRESETS))
    common.add_argument("--model", type=_model_arg, help="lgssm | sv | hmm | model JSON (file or inline)")
    common.add_argument("--n", type=int, help="horizon (observations y_0..y_n)")
    common.add_argument("--particles", type=int)
    common.add_argument("--replicates", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--estimators", type=_csv_list, help="comma list of fs,ffbs,path,fixedlag")
    common.add_argument("--checkpoints", type=_int_list, help="comma list of time indices")
    common.add_argument("--lag", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--warmup", type=int)
    common.add_argument("--mode", choices=("rml", "online-em", "batch-em"))
    common.add_argument("--iterations", type=int, help="batch-em iterations")
    common.add_argument("--window", type=int, help="tail-average window")
    common.add_argument("--data", help="data CSV (step,state,observation) instead of simulating")
    common.add_argument("--workers", type=int, help="worker processes for replicates")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    for name, helptext in (
        ("simulate", "simulate a data record"),
        ("variance-study", "replicate smoothers over one data record"),
        ("estimate", "run RML, online EM or batch EM"),
        ("verify", "run the cross-oracle checks"),
    ):
        sub.add_parser(name, parents=[common], help=helptext)
    return parser


_FLAG_FIELDS = (
    "model", "n", "particles", "replicates", "seed", "estimators", "checkpoints", "lag", "alpha",
    "warmup", "mode", "iterations", "window", "data", "workers", "out",
)


def _config(args) -> ex.ExperimentConfig:
    file_cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {f: getattr(args, f) for f in _FLAG_FIELDS}
    overrides["command"] = args.command
    return ex.build_config(args.preset, file_cfg, overrides)


def cmd_simulate(cfg) -> int:
    out = ex.ensure_dir(cfg.out)
    xs, ys = ex.simulate_data(cfg)
    ex.write_data(out / "data.csv", xs, ys)
    ex.write_json(out / "data.json", {"seed": cfg.seed, "n": cfg.n, "model": cfg.model, "seed_rule": "SeedSequence(seed)"})
    print(out / "data.csv")
    return EXIT_OK


def cmd_variance_study(cfg) -> int:
    out = ex.ensure_dir(cfg.out)
    records, summary = ex.variance_study(cfg)
    ex.write_run_records(out / "records.csv", records)
    ex.write_timings(out / "timings.csv", records)
    ex.write_json(out / "summary.json", summary)
    for est, entry in summary["estimators"].items():
        print(f"{est}: slope of log variance vs log n = {entry['slope']}")
    return EXIT_OK


def cmd_estimate(cfg) -> int:
    out = ex.ensure_dir(cfg.out)
    trace, summary = ex.estimate(cfg)
    with open(out / "trace.csv", "w", newline="") as fh:
        ex.write_estimation_trace(fh, trace)
    ex.write_json(out / "summary.json", summary)
    print(json.dumps(summary.get("tail_average", summary["final"])))
    return EXIT_OK


def cmd_verify(cfg) -> int:
    results = ex.verify(cfg.seed)
    print(json.dumps({"passed": all(r["passed"] for r in results), "checks": results}, indent=2))
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_VERIFY


COMMANDS = {
    "simulate": cmd_simulate,
    "variance-study": cmd_variance_study,
    "estimate": cmd_estimate,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg)
    except (NumericalError, DegenerateWeightsError, DegenerateBackwardKernelError, CapacityError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ParameterDomainError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
