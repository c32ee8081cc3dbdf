"""Command line entry point: simulate, detect, eval, roc and baseline.

Exit status is 0 on success, 1 on usage errors and 2 on data errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .detector import estimate_trace, fuse_trace, trace_origin
from .errors import OppraimError
from .evaluation import BaselineKind, compute_metrics, label_epochs, roc_sweep, run_baseline
from .sim import apply_attack, simulate
from .trace import load_anchor_db, load_trace, save_anchor_db, save_trace

ANCHORS_SUFFIX = ".anchors.csv"
TIMING_SUFFIX = ".timing"
REPORT_GRID = np.round(np.arange(0.05, 1.0, 0.05), 2)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def bundled_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("oppraim.configs").iterdir() if p.name.endswith(".toml"))


def resolve_config(name: str) -> RunConfig:
    path = Path(name)
    if path.exists():
        return load_config(path)
    stem = name[:-5] if name.endswith(".toml") else name
    if stem in bundled_configs():
        with resources.as_file(resources.files("oppraim.configs") / f"{stem}.toml") as p:
            return load_config(p)
    raise FileNotFoundError(f"config {name!r} not found (bundled: {', '.join(bundled_configs())})")


def _anchors_for(trace: str, anchors: str | None):
    return load_anchor_db(anchors or trace + ANCHORS_SUFFIX)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def parse_grid(spec: str) -> np.ndarray:
    """``start:stop:n`` (inclusive linspace) or a comma-separated list."""
    try:
        if ":" in spec:
            a, b, n = spec.split(":")
            return np.linspace(float(a), float(b), int(n))
        return np.array([float(x) for x in spec.split(",") if x.strip()])
    except ValueError:
        raise UsageError(f"bad grid spec {spec!r}; use start:stop:n or a,b,c") from None


def write_verdicts(path, verdicts):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,f_t,attack\n")
        for v in verdicts:
            f = "" if v.likelihood is None else repr(float(v.likelihood))
            a = "" if v.attack is None else str(int(v.attack))
            fh.write(f"{v.timestamp!r},{f},{a}\n")


def read_verdicts(path):
    """(timestamps, scores, flags) with None for indeterminate records."""
    t, s, a = [], [], []
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty verdict file")
    if lines[0].replace(" ", "") in ("t,f_t,attack", "t,score,attack"):
        lines = lines[1:]
    for i, ln in enumerate(lines, start=2):
        parts = ln.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}:{i}: expected t,f_t,attack")
        t.append(float(parts[0]))
        s.append(float(parts[1]) if parts[1] else None)
        a.append(None if parts[2] == "" else parts[2] in ("1", "true", "True"))
    return t, s, a


def _detect(frames, db, cfg: RunConfig):
    local = trace_origin(frames)
    t0 = time.perf_counter()
    _, ests = estimate_trace(frames, db, cfg.sampling, cfg.ranging, local)
    verdicts = fuse_trace(frames, ests, cfg.detector, local)
    return verdicts, (time.perf_counter() - t0) / max(len(frames), 1)


def cmd_simulate(args):
    cfg = resolve_config(args.config)
    if cfg.scenario is None:
        raise ValueError("config has no [scenario] section")
    frames, world = simulate(cfg.scenario)
    if cfg.attacks:
        sched = cfg.schedule(frames, world.local)
        frames = apply_attack(frames, sched, world.db, cfg.scenario.rng_seed, cfg.noise, cfg.ranging,
                              world.local, world.radius)
    save_trace(frames, args.out)
    save_anchor_db(world.db, args.anchors or args.out + ANCHORS_SUFFIX)
    print(f"wrote {len(frames)} frames to {args.out}", file=sys.stderr)


def cmd_detect(args):
    cfg = resolve_config(args.config)
    frames = load_trace(args.trace)
    verdicts, per_epoch = _detect(frames, _anchors_for(args.trace, args.anchors), cfg)
    write_verdicts(args.out, verdicts)
    Path(args.out + TIMING_SUFFIX).write_text(f"runtime_per_epoch_s: {per_epoch!r}\n")
    print(f"{len(verdicts)} verdicts, {per_epoch * 1e3:.1f} ms/epoch", file=sys.stderr)


def _report_lines(rep, roc) -> list[str]:
    d = rep.as_dict()
    lines = [f"{k}: {_fmt(v)}" for k, v in d.items()]
    lines.append("roc: " + ";".join(f"{lam:g}/{_fmt(p)}/{_fmt(q)}" for lam, p, q in roc))
    return lines


def cmd_eval(args):
    frames = load_trace(args.trace)
    t, scores, flags = read_verdicts(args.verdicts)
    labels = label_epochs(frames)
    runtime = None
    timing = Path(args.verdicts + TIMING_SUFFIX)
    if timing.exists():
        runtime = float(timing.read_text().split(":", 1)[1])
    rep = compute_metrics(flags, labels, timestamps=t, runtime_per_epoch=runtime)
    roc = roc_sweep(scores, labels, REPORT_GRID)
    rep.roc = roc
    rep.per_trace = [args.trace]
    lines = _report_lines(rep, roc) + [f"trace: {args.trace}", f"verdicts: {args.verdicts}"]
    Path(args.out).write_text("\n".join(lines) + "\n")


def cmd_roc(args):
    cfg = resolve_config(args.config)
    grid = parse_grid(args.grid)
    frames = load_trace(args.trace)
    verdicts, _ = _detect(frames, _anchors_for(args.trace, args.anchors), cfg)
    pts = roc_sweep([v.likelihood for v in verdicts], label_epochs(frames), grid)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("lambda,ptp,pfp\n")
        for lam, p, q in pts:
            fh.write(f"{lam!r},{'' if p is None else repr(p)},{'' if q is None else repr(q)}\n")


def cmd_baseline(args):
    try:
        kind = BaselineKind[args.kind.upper()]
    except KeyError:
        raise UsageError(f"unknown baseline {args.kind!r}; choose from "
                         + ", ".join(k.name.lower() for k in BaselineKind)) from None
    cfg = resolve_config(args.config) if args.config else RunConfig()
    frames = load_trace(args.trace)
    out = run_baseline(kind, frames, args.threshold, _anchors_for(args.trace, args.anchors),
                       cfg.noise, cfg.ranging)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("t,score,attack\n")
        for v in out:
            s = "" if v.score is None else repr(float(v.score))
            a = "" if v.attack is None else str(int(v.attack))
            fh.write(f"{float(v.timestamp)!r},{s},{a}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oppraim", description="Location spoofing detection from opportunistic ranging.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="synthesize a trace (and its anchor database)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--anchors", help="anchor database path (default: <out>.anchors.csv)")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("detect", help="run the detector over a trace")
    d.add_argument("--trace", required=True)
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--anchors")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score verdicts against trace labels")
    e.add_argument("--verdicts", required=True)
    e.add_argument("--trace", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("roc", help="ROC sweep of the detector over a threshold grid")
    r.add_argument("--trace", required=True)
    r.add_argument("--config", required=True)
    r.add_argument("--grid", required=True, help="start:stop:n or a,b,c inside (0, 1)")
    r.add_argument("--out", required=True)
    r.add_argument("--anchors")
    r.set_defaults(func=cmd_roc)

    b = sub.add_parser("baseline", help="run a comparison baseline")
    b.add_argument("--kind", required=True, help="kalman_residual, network_distance or secure_fusion")
    b.add_argument("--trace", required=True)
    b.add_argument("--threshold", required=True, type=float, help="score threshold in meters")
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--anchors")
    b.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (OppraimError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
