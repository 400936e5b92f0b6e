"""Command-line entry point: ``trapsim run | replay | list-experiments``.

A run configuration is a TOML document::

    experiment = "hydro"
    output = "runs/hydro"      # optional, default "trapsim-out/<experiment>"
    plot = true                # optional

    [params]
    N = [64, 256]
    replicas = 200

Unknown keys and out-of-range values are rejected before any computation
(exit code 2). Runtime failures exit with code 1. Both write a structured
error into ``summary.json`` when the output directory is usable.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from .experiments import REGISTRY, ConfigError, resolve_params
from .svgplot import line_chart
from .walk import TrajectoryFileError, load_trajectory

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
_TOP_KEYS = {"experiment", "output", "plot", "params"}


def _plain(v):
    """Convert numpy scalars/arrays and tuples into JSON-friendly values."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    return v


def _cell(v) -> str:
    v = _plain(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return json.dumps(v)
    return str(v)


def results_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    extra = sorted(set(doc) - _TOP_KEYS)
    if extra:
        raise ConfigError(f"unknown top-level key(s): {', '.join(extra)}")
    name = doc.get("experiment")
    if name not in REGISTRY:
        raise ConfigError(f"unknown experiment {name!r}; see `trapsim list-experiments`")
    params = doc.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("[params] must be a table")
    plot = doc.get("plot", True)
    if not isinstance(plot, bool):
        raise ConfigError("plot must be a boolean")
    output = doc.get("output", f"trapsim-out/{name}")
    if not isinstance(output, str):
        raise ConfigError("output must be a string path")
    return {"experiment": name, "output": output, "plot": plot,
            "params": resolve_params(REGISTRY[name], params)}


def _write_summary(outdir: Path, summary: dict) -> None:
    (outdir / "summary.json").write_text(json.dumps(_plain(summary), indent=2, sort_keys=True) + "\n")


def _fallback_output(args) -> Path | None:
    # best effort: where should the error summary go for an invalid config?
    target = args.output
    if target is None:
        try:
            with open(args.config, "rb") as fh:
                target = tomllib.load(fh).get("output")
        except (OSError, tomllib.TOMLDecodeError):
            return None
    if not isinstance(target, str):
        return None
    try:
        Path(target).mkdir(parents=True, exist_ok=True)
    except OSError:
        return None
    return Path(target)


def cmd_run(args) -> int:
    outdir = None
    try:
        cfg = load_config(args.config)
        outdir = Path(args.output or cfg["output"])
        try:
            outdir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            outdir = None
            raise ConfigError(f"output directory not writable: {exc}") from None
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if outdir is None:
            outdir = _fallback_output(args)
        if outdir is not None:
            _write_summary(outdir, {"status": "error", "error": {"kind": "config", "message": str(exc)}})
        return EXIT_CONFIG

    exp = REGISTRY[cfg["experiment"]]
    summary = {"experiment": exp.name, "config": cfg, "seeds": cfg["params"].get("seeds", [])}
    try:
        res = exp.run(cfg["params"])
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_summary(outdir, {**summary, "status": "error", "error": {"kind": "config", "message": str(exc)}})
        return EXIT_CONFIG
    except Exception as exc:  # solver or simulation failure: report, do not crash
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        _write_summary(outdir, {**summary, "status": "error",
                                "error": {"kind": type(exc).__name__, "message": str(exc)}})
        return EXIT_FAILURE

    (outdir / "results.csv").write_text(results_csv(res.rows, res.columns))
    summary.update(status="ok", verdicts=res.verdicts, metrics=res.metrics,
                   passed=all(bool(v) for v in res.verdicts.values()))
    ses = [r["se"] for r in res.rows if "se" in r] + [r["mc_se"] for r in res.rows if "mc_se" in r]
    if ses:
        summary["standard_errors"] = ses
    if cfg["plot"] and res.plot:
        pl = res.plot
        (outdir / "plot.svg").write_text(line_chart(pl["series"], pl.get("title", ""), pl.get("xlabel", ""),
                                                    pl.get("ylabel", ""), logx=pl.get("logx", False)))
    _write_summary(outdir, summary)
    for k, v in res.verdicts.items():
        print(f"{k}: {'pass' if v else 'FAIL'}")
    print(f"wrote {outdir / 'results.csv'}")
    if args.strict and not summary["passed"]:
        return EXIT_FAILURE
    return EXIT_OK


def replay_summary(traj, spec, top: int = 10) -> str:
    lines = [f"segments: {len(traj)}", f"total time: {traj.total_time!r}"]
    if spec is not None:
        lines.insert(0, f"torus: d={spec.d} N={spec.N}")
    if len(traj):
        occ = np.bincount(traj.sites, weights=traj.holdings)
        order = np.lexsort((np.arange(occ.size), -occ))[: min(top, np.count_nonzero(occ))]
        lines.append("top occupation sites:")
        for x in order:
            label = str(spec.coords(int(x))) if spec is not None and x < spec.n_sites else str(int(x))
            lines.append(f"  {label}: {float(occ[x])!r}")
    return "\n".join(lines)


def cmd_replay(args) -> int:
    try:
        with open(args.file, "rb") as fh:
            traj, spec = load_trajectory(fh)
    except (OSError, TrajectoryFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(replay_summary(traj, spec))
    return EXIT_OK


def cmd_list(args) -> int:
    for name, exp in REGISTRY.items():
        print(f"{name}: {exp.description}")
        if args.verbose:
            for k, v in exp.defaults.items():
                print(f"    {k} = {json.dumps(v)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trapsim", description="Trap-model simulation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a TOML config")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="override the output directory")
    r.add_argument("--strict", action="store_true", help="exit 1 when a verdict fails")
    r.set_defaults(func=cmd_run)
    rp = sub.add_parser("replay", help="summarise a TRAJ trajectory file")
    rp.add_argument("file")
    rp.set_defaults(func=cmd_replay)
    ls = sub.add_parser("list-experiments", help="list experiment names and parameters")
    ls.add_argument("-v", "--verbose", action="store_true")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
