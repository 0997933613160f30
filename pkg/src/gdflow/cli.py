"""Command-line entry point: ``python -m gdflow <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Machine-readable output goes to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import pointcloud as pc
from .metrics import METRICS, SizeMismatchError, evaluate
from .model import VARIANTS, CheckpointError, ModelConfig, denoise, load_checkpoint
from .ode import GridError, IntegratorConfig
from .spectral import RangeError, bernstein_response, closed_form_response, normalize_coefficients, write_response_csv
from .trainer import TrainConfig, make_pairs, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

SECTIONS = {
    "model": ModelConfig,
    "integrator": IntegratorConfig,
    "train": TrainConfig,
}
REQUIRED = {"train": ("iterations",)}
EXTRA_KEYS = {"val_sigma": float, "val_seed": int}


def config_keys() -> dict[str, list[str]]:
    keys = {name: [f.name for f in fields(cls) if f.name != "integrator"] for name, cls in SECTIONS.items()}
    keys["data"] = sorted(EXTRA_KEYS)
    return keys


def parse_run_config(doc: dict) -> tuple[ModelConfig, TrainConfig, dict]:
    """Validate a run configuration document; raises ValueError naming the offending key."""
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    allowed = config_keys()
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    for section, keys in allowed.items():
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise ValueError(f"config section {section!r} must be an object")
        bad = set(body) - set(keys)
        if bad:
            raise ValueError(f"unknown key(s) in {section!r}: {sorted(bad)}")
        for key in REQUIRED.get(section, ()):
            if key not in body:
                raise ValueError(f"missing required key {section}.{key}")
    try:
        integ = IntegratorConfig(**doc.get("integrator", {}))
        mcfg = ModelConfig(**doc.get("model", {}), integrator=integ)
        tcfg = TrainConfig(**doc["train"])
    except TypeError as exc:
        raise ValueError(str(exc)) from None
    data = {"val_sigma": 0.02, "val_seed": 0}
    data.update(doc.get("data", {}))
    return mcfg, tcfg, data


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _log(msg: str):
    print(msg, file=sys.stderr)


def cmd_synth(args) -> int:
    if args.noise < 0:
        raise UsageError("--noise must be >= 0")
    if args.n < 8:
        raise UsageError("--n must be >= 8")
    clean = pc.synth(args.shape, args.n, args.seed)
    noisy = pc.add_noise(clean, pc.NoiseSpec(args.noise, args.seed + 1))
    pc.save(noisy, args.out)
    if args.clean:
        pc.save(clean, args.clean)
    return 0


def _load_dir(path: str) -> list:
    files = sorted(glob.glob(os.path.join(path, "*.xyz")) + glob.glob(os.path.join(path, "*.ply")))
    if not files:
        raise FileNotFoundError(f"no .xyz or .ply files in {path}")
    return [pc.load(f) for f in files]


def cmd_train(args) -> int:
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    try:
        mcfg, tcfg, data = parse_run_config(doc)
    except ValueError as exc:
        raise UsageError(f"invalid config: {exc}") from None
    train_clouds = _load_dir(args.data)
    val_clouds = _load_dir(args.val)
    pairs = make_pairs(val_clouds, data["val_sigma"], data["val_seed"])
    res = train(mcfg, train_clouds, pairs, tcfg, out_dir=args.out)
    _log(f"trained {tcfg.iterations} iterations; best val CD {res.best_val:.6g} (initial {res.initial_val:.6g})")
    return 0


def _parse_fractions(text: str | None):
    if not text:
        return None
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad --snapshots value {text!r}") from None


def _snapshot_path(out: str, frac: float) -> str:
    root, ext = os.path.splitext(out)
    return f"{root}.t{frac:g}{ext}"


def cmd_denoise(args) -> int:
    ckpt = os.path.join(args.ckpt, "best") if os.path.isdir(os.path.join(args.ckpt, "best")) else args.ckpt
    params, cfg = load_checkpoint(ckpt)
    noisy = pc.load(args.inp)
    fractions = _parse_fractions(args.snapshots)
    if fractions is None:
        out = denoise(noisy, params, cfg, args.variant)[0]
        pc.save(out, args.out)
        return 0
    outs = denoise(noisy, params, cfg, args.variant, fractions)
    for frac, cloud in zip(fractions, outs):
        pc.save(cloud, _snapshot_path(args.out, frac))
    return 0


def cmd_eval(args) -> int:
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise UsageError(f"unknown metrics {sorted(unknown)}; choose from {','.join(METRICS)}")
    ref, test = pc.load(args.ref), pc.load(args.test)
    try:
        report = evaluate(ref, test, metrics)
    except SizeMismatchError as exc:
        raise UsageError(str(exc)) from None
    print(report.to_json())
    return 0


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


def cmd_filter_response(args) -> int:
    if args.grid < 2:
        raise UsageError("--grid must be >= 2")
    lam = np.linspace(0.0, 1.0, args.grid)
    if args.theta is None:
        raise UsageError("--theta is required")
    theta = _floats(args.theta)
    try:
        if args.basis == "bernstein" or args.filter == "bernstein":
            if args.K is not None and len(theta) != args.K + 1:
                raise UsageError(f"--K {args.K} needs {args.K + 1} coefficients, got {len(theta)}")
            t = np.asarray(theta)
            if args.raw:
                t = normalize_coefficients(t).data
            elif np.any(t <= 0):
                raise RangeError("bernstein coefficients must be positive (use --raw for unconstrained values)")
            resp = bernstein_response(t, lam)
        elif args.filter:
            resp = closed_form_response(args.filter, theta, lam)
        else:
            raise UsageError("give --basis bernstein or --filter NAME")
    except RangeError as exc:
        raise UsageError(str(exc)) from None
    if args.out:
        write_response_csv(args.out, lam, resp)
    else:
        write_response_csv(sys.stdout, lam, resp)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all()
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        line = f"{status} {r.name} max_error={r.max_error:.3e}"
        if r.detail:
            line += f" ({r.detail})"
        print(line)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gdflow", description="Graph-ODE point-cloud denoising")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic clean/noisy cloud pair")
    s.add_argument("--shape", required=True, choices=pc.SHAPES)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.0, help="noise std relative to the bounding-box diagonal")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--clean")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="directory of clean training clouds")
    t.add_argument("--val", required=True, help="directory of clean validation clouds")
    t.add_argument("--out", required=True, help="output directory (log.csv, best/, final/)")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="denoise a cloud with a checkpoint")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--variant", choices=VARIANTS)
    d.add_argument("--snapshots", help="comma-separated fractions of the integration time")
    d.add_argument("--seed", type=int, default=0, help="accepted for symmetry; denoising is deterministic")
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("eval", help="compare two clouds")
    e.add_argument("--ref", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--metrics", default=",".join(METRICS))
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("filter-response", help="export a filter response curve as CSV")
    f.add_argument("--basis", choices=("bernstein",))
    f.add_argument("--filter", choices=("ppr", "gnn-lf", "gnn-hf", "chebyshev", "vanilla", "bernstein"))
    f.add_argument("--K", type=int)
    f.add_argument("--theta")
    f.add_argument("--raw", action="store_true", help="treat bernstein theta as raw values to normalize")
    f.add_argument("--grid", type=int, default=256)
    f.add_argument("--out")
    f.set_defaults(func=cmd_filter_response)

    st = sub.add_parser("selftest", help="run numerical self-checks")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _log(str(exc))
        return 2
    except (CheckpointError, GridError, pc.ParseError, pc.EmptyCloudError, FileNotFoundError) as exc:
        _log(f"error: {exc}")
        return 1
    except (ArithmeticError, ValueError, RuntimeError, OSError) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
