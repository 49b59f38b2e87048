"""Command-line front end: ``lab <subcommand> ...``.

Every subcommand writes its outputs plus a ``manifest.json`` (config, seed,
file checksums, stage timings) into the output location.  Exit codes: 0 on
success, 1 on usage errors, 2 on precondition errors, 3 on numerical
conditioning failures.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _complex(text: str) -> complex:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected x,y but got {text!r}")
    return complex(float(parts[0]), float(parts[1]))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lab", description="LQG metric laboratory")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config; flags override its keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="cap on worker and BLAS threads")
        return sp

    sp = common(sub.add_parser("sample-field", help="sample a GFF variant into an LQGF file"))
    sp.add_argument("--kind", choices=["fb", "zb", "wp", "wedge", "cone", "bead"])
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--alpha", type=float, help="singularity for --kind wedge or cone")
    sp.add_argument("--weight", type=float, help="bead weight in (0, gamma^2/2)")
    sp.add_argument("--nx", type=int)
    sp.add_argument("--ny", type=int)
    sp.add_argument("--spacing", type=float)
    sp.add_argument("--method", choices=["auto", "cholesky", "fft", "spectral"])
    sp.add_argument("--out", required=True)

    sp = common(sub.add_parser("measure", help="GMC area or boundary measure of a field"))
    sp.add_argument("--field", required=True)
    sp.add_argument("--kind", choices=["area", "boundary"])
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--out", required=True)

    sp = common(sub.add_parser("metric", help="LFPP distances between point pairs"))
    sp.add_argument("--field", required=True)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--d-gamma", dest="d_gamma", type=float)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--from", dest="src", type=_complex, action="append")
    sp.add_argument("--to", dest="dst", type=_complex, action="append")
    sp.add_argument("--normalize", action="store_true", default=None)
    sp.add_argument("--out", required=True)

    sp = common(sub.add_parser("sle", help="sample a chordal SLE_kappa(rho1; rho2) trace"))
    sp.add_argument("--kappa", type=float)
    sp.add_argument("--rho1", type=float)
    sp.add_argument("--rho2", type=float)
    sp.add_argument("--dt", type=float)
    sp.add_argument("--T", dest="T", type=float)
    sp.add_argument("--points", type=int)
    sp.add_argument("--out", required=True)

    sp = common(sub.add_parser("glue-compare", help="glued vs direct metric along a trace"))
    sp.add_argument("--field", required=True)
    sp.add_argument("--trace", required=True)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--d-gamma", dest="d_gamma", type=float)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--mode", choices=["restricted_field", "internal"])
    sp.add_argument("--max-crossings", dest="max_crossings", type=int)
    sp.add_argument("--out", required=True)

    sp = common(sub.add_parser("experiment", help="run a named Monte Carlo experiment"))
    sp.add_argument("name")
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--out")

    sp = common(sub.add_parser("estimate-dgamma", help="fit d_gamma from metric ball volumes"))
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--n", type=int)
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--out")
    return p


DEFAULTS = {
    "sample-field": {"kind": "fb", "gamma": 1.0, "nx": 128, "ny": 64, "spacing": 1 / 64, "seed": 0,
                     "method": "auto", "alpha": 0.0, "weight": None},
    "measure": {"kind": "area", "eps": None, "gamma": None},
    "metric": {"gamma": None, "d_gamma": None, "eps": None, "src": None, "dst": None,
               "normalize": False},
    "sle": {"kappa": 2.0, "rho1": 0.0, "rho2": 0.0, "dt": 1e-4, "T": 1.0, "points": 1000, "seed": 0},
    "glue-compare": {"gamma": None, "d_gamma": None, "eps": None, "pairs": 40, "seed": 0,
                     "mode": "restricted_field", "max_crossings": 50},
    "experiment": {"seeds": None, "out": "."},
    "estimate-dgamma": {"gamma": 8 ** 0.5 / 3 ** 0.5, "seeds": None, "out": "."},
}

_META = {"config", "threads", "command", "out", "name", "field", "trace"}


def merged_config(args) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    from .core import load_config

    cfg = dict(DEFAULTS.get(args.command, {}))
    if args.config:
        cfg.update(load_config(args.config))
    for k, v in vars(args).items():
        if k in ("config", "threads", "command") or v is None:
            continue
        cfg[k] = v
    return cfg


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, cfg: dict, files, timings: dict) -> Path:
    from . import __version__

    clean = {k: (f"{v.real},{v.imag}" if isinstance(v, complex) else v) for k, v in cfg.items()}
    clean = json.loads(json.dumps(clean, default=lambda v: [f"{z.real},{z.imag}" for z in v]
                                  if isinstance(v, list) else str(v)))
    blob = json.dumps(clean, sort_keys=True).encode()
    manifest = {
        "config": clean,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": cfg.get("seed"),
        "code_version": __version__,
        "files": [{"path": os.path.relpath(f, out_dir), "sha256": sha256_of(f)} for f in files],
        "timings": timings,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _params(cfg, need_d=False, field=None):
    from .core import derive_params
    from .errors import PreconditionError

    gamma = cfg.get("gamma")
    if gamma is None and field is not None and field.gamma == field.gamma:
        gamma = field.gamma
    if gamma is None:
        raise PreconditionError("--gamma is required")
    p = derive_params(gamma, cfg.get("d_gamma"), seed=int(cfg.get("seed") or 0))
    return p.require_dgamma() if need_d else p


def _out_file(path) -> tuple[Path, Path]:
    path = Path(path)
    out_dir = path.parent if str(path.parent) else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    return path, out_dir


class _Timer:
    """Wall-clock seconds per named stage."""

    def __init__(self):
        self.t = {}

    @contextlib.contextmanager
    def __call__(self, name):
        t0 = time.perf_counter()
        yield
        self.t[name] = round(time.perf_counter() - t0, 6)


def cmd_sample_field(cfg, tm):
    from . import fields
    from .core import Grid, derive_params, make_rng
    from .errors import PreconditionError

    kind = cfg["kind"]
    nx, ny, s = int(cfg["nx"]), int(cfg["ny"]), float(cfg["spacing"])
    rng = make_rng(int(cfg["seed"]), "sample-field", kind)
    with tm("sample"):
        if kind == "fb":
            f = fields.sample_free_boundary_half_plane(Grid.half_plane(nx, ny, s), rng, cfg["method"])
        elif kind == "zb":
            method = "auto" if cfg["method"] in ("fft",) else cfg["method"]
            f = fields.sample_zero_boundary(Grid.half_plane(nx, ny, s), rng, method)
        elif kind == "wp":
            f = fields.sample_whole_plane(Grid.centered(nx, ny, s), rng)
        elif kind == "cone":
            p = derive_params(float(cfg["gamma"]))
            f = fields.sample_cone(p, float(cfg["alpha"]), Grid.centered(nx, ny, s), rng)
        else:
            # strip R x [0, pi]: spacing is pi/(ny-1) and column nx//2 is t = 0
            p = derive_params(float(cfg["gamma"]))
            strip = Grid.strip(nx, ny, -(nx // 2) * math.pi / (ny - 1))
            if kind == "wedge":
                f = fields.sample_wedge(p, float(cfg["alpha"]), strip, rng)
            else:
                if cfg.get("weight") is None:
                    raise PreconditionError("--kind bead needs --weight")
                f = fields.sample_bead(p, float(cfg["weight"]), strip, rng)
    from dataclasses import replace

    f = replace(f, gamma=float(cfg["gamma"]))
    path, out_dir = _out_file(cfg["out"])
    with tm("write"):
        fields.write_field(path, f)
    return out_dir, [path]


def cmd_measure(cfg, tm):
    from . import fields, gmc

    f = fields.read_field(cfg["field"])
    p = _params(cfg, field=f)
    eps = cfg["eps"] if cfg["eps"] is not None else 2 * f.grid.spacing
    with tm("measure"):
        m = (gmc.area_measure if cfg["kind"] == "area" else gmc.boundary_measure)(f, p, float(eps))
    path, out_dir = _out_file(cfg["out"])
    with tm("write"):
        gmc.write_csv(m, path)
    return out_dir, [path]


def cmd_metric(cfg, tm):
    from . import fields, lfpp
    from .errors import PreconditionError

    f = fields.read_field(cfg["field"])
    p = _params(cfg, need_d=True, field=f)
    src, dst = cfg.get("src") or [], cfg.get("dst") or []
    src = [complex(z) if not isinstance(z, str) else _complex(z) for z in src]
    dst = [complex(z) if not isinstance(z, str) else _complex(z) for z in dst]
    if not src or len(src) != len(dst):
        raise PreconditionError("give matching --from and --to points")
    eps = float(cfg["eps"]) if cfg["eps"] is not None else max(f.grid.spacing, f.grid.spacing ** 0.5)
    with tm("oracle"):
        o = lfpp.build_oracle(f, p, eps, normalize=bool(cfg["normalize"]))
    with tm("query"):
        d = o.pair_distances(list(zip(src, dst)))
    path, out_dir = _out_file(cfg["out"])
    report = {"epsilon": eps, "xi": o.xi, "normalize": bool(cfg["normalize"]),
              "pairs": [{"from": [a.real, a.imag], "to": [b.real, b.imag], "distance": float(x)}
                        for a, b, x in zip(src, dst, d)]}
    path.write_text(json.dumps(report, indent=2) + "\n")
    return out_dir, [path]


def cmd_sle(cfg, tm):
    from . import sle
    from .core import make_rng

    rng = make_rng(int(cfg["seed"]), "sle")
    with tm("driving"):
        d = sle.sample_driving(float(cfg["kappa"]), float(cfg["rho1"]), float(cfg["rho2"]),
                               float(cfg["dt"]), float(cfg["T"]), rng)
    with tm("trace"):
        tr = sle.extract_trace(d, int(cfg["points"]))
    path, out_dir = _out_file(cfg["out"])
    sle.write_trace_csv(tr, path)
    return out_dir, [path]


def cmd_glue_compare(cfg, tm):
    from . import fields, glue, sle
    from .core import make_rng

    f = fields.read_field(cfg["field"])
    p = _params(cfg, need_d=True, field=f)
    tr = sle.read_trace_csv(cfg["trace"], kappa=p.gamma ** 2)
    eps = float(cfg["eps"]) if cfg["eps"] is not None else max(f.grid.spacing, f.grid.spacing ** 0.5)
    seed = int(cfg["seed"])
    kw = dict(mode=cfg["mode"], max_crossings=int(cfg["max_crossings"]))
    with tm("glue"):
        rep = glue.glued_vs_direct(f, p, tr, eps, int(cfg["pairs"]), rng=make_rng(seed, "glue-cli"), **kw)
    with tm("baseline"):
        zero = fields.constant_field(f.grid, 0.0)
        base = glue.glued_vs_direct(zero, p, tr, eps, int(cfg["pairs"]),
                                    rng=make_rng(seed, "glue-cli-baseline"), **kw)
    out = {"median_rel_discrepancy": rep.median_rel_discrepancy, "p90": rep.p90,
           "baseline": base.median_rel_discrepancy, "resolution": f.grid.spacing,
           "params": {"gamma": p.gamma, "d_gamma": p.d_gamma, "xi": p.xi, "epsilon": eps},
           "locality_ok": rep.locality_ok(), "report": rep.to_dict()}
    path, out_dir = _out_file(cfg["out"])
    path.write_text(json.dumps(out, indent=2, default=float) + "\n")
    return out_dir, [path]


def cmd_experiment(cfg, tm, name=None):
    from . import xlab

    name = name or cfg["name"]
    exp_cfg = {k: v for k, v in cfg.items() if k not in _META and k not in ("seeds",)}
    seeds = cfg.get("seeds")
    with tm(name):
        res = xlab.run_experiment(name, exp_cfg, int(seeds) if seeds is not None else None)
    out_dir = Path(cfg.get("out") or ".")
    files = res.write(out_dir)
    return out_dir, [Path(f) for f in files]


def cmd_estimate_dgamma(cfg, tm):
    return cmd_experiment(cfg, tm, "dgamma")


COMMANDS = {
    "sample-field": cmd_sample_field,
    "measure": cmd_measure,
    "metric": cmd_metric,
    "sle": cmd_sle,
    "glue-compare": cmd_glue_compare,
    "experiment": cmd_experiment,
    "estimate-dgamma": cmd_estimate_dgamma,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    if args.threads:
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    from .errors import ConditioningError, PreconditionError

    try:
        cfg = merged_config(args)
        tm = _Timer()
        out_dir, files = COMMANDS[args.command](cfg, tm)
        cfg["threads"] = args.threads
        write_manifest(out_dir, cfg, files, tm.t)
    except PreconditionError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except ConditioningError as exc:
        sys.stderr.write(f"numerical conditioning failure: {exc}\n")
        return 3
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
