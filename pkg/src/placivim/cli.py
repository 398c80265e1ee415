"""Command line entry point: ``python -m placivim <command> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ivim, phantom, pipeline, registration, srr
from .pipeline import NUMERICAL_ERRORS, VALIDATION_ERRORS, StageError

log = logging.getLogger("placivim")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise pipeline.ConfigError(f"config {p} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise pipeline.ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise pipeline.ConfigError("config must be a JSON object")
    return data


def cmd_phantom(args) -> int:
    spec_dict = _read_config(args.spec)
    bvalues = spec_dict.pop("bvalues", list(ivim.DEFAULT_BVALUES))
    spec_dict["seed"] = args.seed
    spec = phantom.PhantomSpec.from_dict(spec_dict)
    path = pipeline.run_phantom(spec, args.out, bvalues)
    print(path)
    return EXIT_OK


def cmd_srr(args) -> int:
    cfg = pipeline.build_dataclass(srr.SrrConfig, _read_config(args.config))
    path = pipeline.run_srr(args.manifest, args.out, cfg)
    print(path)
    return EXIT_OK


def cmd_register_interb(args) -> int:
    cfg = pipeline.build_dataclass(registration.RegConfig, _read_config(args.config))
    print(pipeline.run_interb(args.series, args.out, cfg, args.threads))
    return EXIT_OK


def cmd_coregister(args) -> int:
    cfg = pipeline.build_dataclass(registration.RegConfig, _read_config(args.config))
    print(pipeline.run_coregister(args.series, args.anat, args.out, cfg, args.threads))
    return EXIT_OK


def cmd_fit(args) -> int:
    overrides = _read_config(args.config)
    print(pipeline.run_fit(args.series, args.mask, args.method, args.out, args.seed, overrides,
                           args.threads))
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = [pipeline.evaluate(args.series, m, args.mask, args.subject, args.correction, args.gt)
            for m in args.maps]
    from .metrics import write_report_csv

    print(write_report_csv(args.out, rows))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _read_config(args.config)
    voxels = args.voxels if args.voxels is not None else cfg.get("n_voxels", 10_000)
    iters = args.iters if args.iters is not None else cfg.get("iters", 5000)
    threads = sorted({1, args.threads})
    report = pipeline.run_bench(voxels, iters, args.seed, threads, args.out, args.repeats)
    for r in report["rows"]:
        print(f"threads={r['threads']} rw={r['rw_seconds']:.3f}s pcn={r['pcn_seconds']:.3f}s "
              f"reduction={pipeline.format_reduction(r['reduction_percent'])}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg_dict = _read_config(args.config)
    if args.out is not None:
        cfg_dict["out_dir"] = args.out
    cfg_dict["seed"] = args.seed
    if args.threads is not None:
        cfg_dict["threads"] = args.threads
    if args.methods:
        cfg_dict["methods"] = args.methods
    cfg = pipeline.PipelineConfig.from_dict(cfg_dict)
    summary = pipeline.run_pipeline(cfg)
    print(summary["report"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="placivim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic dataset")
    s.add_argument("--spec", help="JSON phantom settings (optional)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("srr", help="reconstruct the isotropic anatomy from the stacks")
    s.add_argument("--manifest", required=True, help="dataset manifest listing stacks and geometry")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_srr)

    for name, func in (("register-interb", cmd_register_interb), ("coregister", cmd_coregister)):
        s = sub.add_parser(name, help=f"{name.replace('-', ' ')} motion correction")
        s.add_argument("--series", required=True, help="series index or dataset manifest")
        if name == "coregister":
            s.add_argument("--anat", required=True, help="anatomical reference volume")
        s.add_argument("--config")
        s.add_argument("--out", required=True)
        s.add_argument("--threads", type=int, default=1)
        s.set_defaults(func=func)

    s = sub.add_parser("fit", help="estimate IVIM maps")
    s.add_argument("--method", required=True, choices=("pcn", "rw", "lsq", "seg"))
    s.add_argument("--series", required=True)
    s.add_argument("--mask", required=True, help="mask volume or dataset manifest")
    s.add_argument("--config", help="JSON sampler settings")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("eval", help="ROI report for fitted maps")
    s.add_argument("--series", required=True)
    s.add_argument("--maps", required=True, nargs="+")
    s.add_argument("--mask", required=True)
    s.add_argument("--gt", help="dataset manifest for ground-truth comparison")
    s.add_argument("--subject", default="phantom")
    s.add_argument("--correction", default="")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time rw against pCN")
    s.add_argument("--config")
    s.add_argument("--voxels", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("pipeline", help="run every stage end to end")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--threads", type=int)
    s.add_argument("--methods", nargs="+", choices=("pcn", "rw", "lsq", "seg"))
    s.set_defaults(func=cmd_pipeline)
    return p


def _classify(exc: BaseException) -> int:
    inner = exc.original if isinstance(exc, StageError) else exc
    if isinstance(inner, NUMERICAL_ERRORS):
        return EXIT_NUMERICAL
    if isinstance(inner, VALIDATION_ERRORS):
        return EXIT_VALIDATION
    return EXIT_NUMERICAL


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except (StageError, *VALIDATION_ERRORS, *NUMERICAL_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _classify(exc)


if __name__ == "__main__":
    sys.exit(main())
