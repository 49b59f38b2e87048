"""Experiment harness: exponent fits and the quantitative bounds, Monte Carlo over seeds.

Every experiment returns an :class:`ExperimentResult` holding its full
sample table, the fits and a summary; ``write`` emits ``samples.csv``,
``fit.json`` and ``plot.svg``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import stats

from . import fields, gmc, glue, lfpp, sle
from .core import Grid, LqgParams, derive_params, make_rng
from .errors import PreconditionError

# ------------------------------------------------------------------ fitting


@dataclass(frozen=True, eq=False)
class ExponentFit:
    xs: np.ndarray = dc_field(repr=False)
    ys: np.ndarray = dc_field(repr=False)
    slope: float
    intercept: float
    r2: float
    ci95: tuple
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2,
                "ci95": list(self.ci95), "n": int(len(self.xs)), "degenerate": self.degenerate}


def _linfit(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx <= 0:
        return float("nan"), float("nan"), 0.0
    slope = ((x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    syy = ((y - ym) ** 2).sum()
    r2 = 1.0 if syy <= 0 else 1.0 - ((y - intercept - slope * x) ** 2).sum() / syy
    return float(slope), float(intercept), float(min(1.0, max(0.0, r2)))


def _resample(n_items, groups, rng):
    if groups is None:
        return rng.integers(0, n_items, n_items)
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    pick = rng.choice(uniq, size=len(uniq), replace=True)
    return np.concatenate([np.flatnonzero(groups == g) for g in pick])


def _ci(slope, boot):
    boot = np.asarray([b for b in boot if np.isfinite(b)])
    if boot.size == 0:
        return (slope, slope)
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return (float(min(lo, slope)), float(max(hi, slope)))


def fit_exponent(xs, ys, groups=None, n_boot: int = 1000, rng=None) -> ExponentFit:
    """Least-squares slope of ``ys`` on ``xs`` with a bootstrap CI.

    With ``groups`` (for instance seeds) whole groups are resampled.
    """
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    ok = np.isfinite(xs) & np.isfinite(ys)
    xs, ys = xs[ok], ys[ok]
    g = None if groups is None else np.asarray(groups)[ok]
    if len(xs) < 2:
        raise PreconditionError("need at least two points to fit")
    slope, intercept, r2 = _linfit(xs, ys)
    rng = rng if rng is not None else np.random.default_rng(0)
    boot = []
    for _ in range(n_boot):
        idx = _resample(len(xs), g, rng)
        boot.append(_linfit(xs[idx], ys[idx])[0])
    return ExponentFit(xs, ys, slope, intercept, r2, _ci(slope, boot), r2 < 0.5)


def _rank_quantile(v, q):
    v = np.sort(v)
    return v[min(v.size - 1, max(0, math.ceil(q * v.size) - 1))]


def _envelope_points(xs, ys, q, bins):
    """Per-bin nearest-rank ``q`` quantiles of ``xs`` and ``ys``.

    Pairing the same quantile of both coordinates makes the envelope exact for
    any increasing relation ``y = g(x)``, however wide the bins are.
    """
    ux = np.unique(xs)
    if len(ux) <= bins:
        labels = np.searchsorted(ux, xs)
        nb = len(ux)
    else:
        edges = np.quantile(xs, np.linspace(0, 1, bins + 1))
        labels = np.clip(np.searchsorted(edges, xs, side="right") - 1, 0, bins - 1)
        nb = bins
    cx, cy = [], []
    for k in range(nb):
        sel = labels == k
        if sel.any():
            cx.append(_rank_quantile(xs[sel], q))
            cy.append(_rank_quantile(ys[sel], q))
    return np.array(cx), np.array(cy)


def envelope_fit(xs, ys, q: float, bins: int = 8, groups=None, n_boot: int = 1000,
                 rng=None) -> ExponentFit:
    """Regression of the per-bin ``q`` quantile of ``ys`` against ``xs``."""
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    ok = np.isfinite(xs) & np.isfinite(ys)
    xs, ys = xs[ok], ys[ok]
    g = None if groups is None else np.asarray(groups)[ok]
    cx, cy = _envelope_points(xs, ys, q, bins)
    if len(cx) < 2:
        raise PreconditionError("need at least two bins to fit an envelope")
    slope, intercept, r2 = _linfit(cx, cy)
    rng = rng if rng is not None else np.random.default_rng(0)
    boot = []
    for _ in range(n_boot):
        idx = _resample(len(xs), g, rng)
        bx, by = _envelope_points(xs[idx], ys[idx], q, bins)
        if len(bx) >= 2:
            boot.append(_linfit(bx, by)[0])
    return ExponentFit(cx, cy, slope, intercept, r2, _ci(slope, boot), r2 < 0.5)


# ----------------------------------------------------------------- results


@dataclass(eq=False)
class ExperimentResult:
    name: str
    columns: dict
    fits: dict = dc_field(default_factory=dict)
    summary: dict = dc_field(default_factory=dict)
    plot: tuple | None = None  # (x column, y column, fit name)

    def write(self, out_dir) -> list:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        names = list(self.columns)
        n = len(next(iter(self.columns.values()))) if names else 0
        p = os.path.join(out_dir, "samples.csv")
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            cols = [np.asarray(self.columns[k]).tolist() for k in names]
            for i in range(n):
                w.writerow([c[i] for c in cols])
        paths.append(p)
        p = os.path.join(out_dir, "fit.json")
        with open(p, "w") as fh:
            json.dump({"experiment": self.name,
                       "fits": {k: v.to_dict() for k, v in self.fits.items()},
                       "summary": _jsonable(self.summary)}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(p)
        if self.plot is not None:
            p = os.path.join(out_dir, "plot.svg")
            self._plot(p)
            paths.append(p)
        return paths

    def _plot(self, path):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        xk, yk, fk = self.plot
        # fixed salt keeps svg element ids, and so the file bytes, reproducible
        plt.rcParams["svg.hashsalt"] = "lqglab"
        fig, ax = plt.subplots(figsize=(5, 4))
        x = np.asarray(self.columns[xk], float)
        y = np.asarray(self.columns[yk], float)
        ax.scatter(x, y, s=6, alpha=0.5)
        if fk in self.fits:
            f = self.fits[fk]
            xx = np.linspace(np.nanmin(x), np.nanmax(x), 50)
            ax.plot(xx, f.intercept + f.slope * xx, "r-", label=f"slope {f.slope:.3f}")
            ax.legend()
        ax.set_xlabel(xk)
        ax.set_ylabel(yk)
        ax.set_title(self.name)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else str(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


# ----------------------------------------------------------- single-field ops


def thick_point_max(field: fields.GridField, eps_ladder, window=(-0.5, 0.5)) -> np.ndarray:
    """``max_x h_eps(x) / log(1/eps)`` over boundary cells in ``window``, per eps."""
    grid = field.grid
    bc = grid.boundary_cells
    x = grid.cell_point(bc).real
    sel = (x >= window[0]) & (x <= window[1])
    if not sel.any():
        raise PreconditionError("window contains no boundary cells")
    out = []
    for e in eps_ladder:
        if not 0 < e < 1:
            raise PreconditionError("eps must lie in (0, 1)")
        h = fields.boundary_average_values(field, e)[sel]
        out.append(h.max() / math.log(1 / e))
    return np.array(out)


def arc_cells(grid: Grid, a: float, r: float, theta=(math.pi / 6, 5 * math.pi / 6)) -> np.ndarray:
    th = np.linspace(theta[0], theta[1], max(8, int(4 * r * (theta[1] - theta[0]) / grid.spacing)))
    return np.unique(grid.nearest_cell(a + r * np.exp(1j * th)))


def distance_integral_bound(field, params: LqgParams, oracle: lfpp.DistanceOracle, a: float,
                            r: float, per_octave: int = 8) -> dict:
    """Ratio of ``fd(a, a + rK)`` to the integral of ``exp(xi (h_{e^-t}(a) - Q t))``
    over ``t >= log(1/r)``; below the resolution the integral is closed with
    its conditional mean."""
    grid = field.grid
    xi, Q = oracle.xi, params.Q
    radii = np.concatenate([[r], fields.radius_ladder(r, 2 * grid.spacing, per_octave)])
    if len(radii) < 2:
        raise PreconditionError("radius ladder below r is empty at this resolution")
    h = fields.semicircle_average(field, a, radii)
    t = -np.log(radii)
    f = np.exp(xi * (h - Q * t))
    body = float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(t)))
    # conditional mean of the unresolved part: Y keeps drift -Q and variance rate 2
    tail = float(f[-1] / (xi * Q - xi * xi))
    total = body + tail
    src = grid.nearest_cell(complex(a, 0.0))[()]
    d = oracle.distances_from(np.array([src]))
    fd = float(d.ravel()[arc_cells(grid, a, r)].min())
    return {"fd": fd, "integral": total, "ratio": fd / total, "tail_fraction": tail / total,
            "widen": tail / total > 0.05, "integrand_sup": float(f.max()),
            "sup_ratio": total / float(f.max())}


def random_intervals(grid: Grid, lengths, count_per_length: int, rng,
                     region=(0.1, 0.9)) -> list:
    """Boundary intervals ``[a, a + l]`` inside ``region`` or its mirror, avoiding 0."""
    out = []
    x0, x1, _, _ = grid.extent
    lo, hi = region
    for ell in lengths:
        for _ in range(count_per_length):
            side = 1 if rng.random() < 0.5 else -1
            if hi - lo <= ell:
                continue
            a = lo + (hi - lo - ell) * rng.random()
            iv = (a, a + ell) if side > 0 else (-a - ell, -a)
            if iv[0] >= x0 and iv[1] <= x1:
                out.append(iv)
    return out


def snap_interval(grid: Grid, a: float, b: float):
    """Endpoints moved to boundary cell centres."""
    ca = grid.cell_point(grid.nearest_cell(complex(a, 0.0)))[()].real
    cb = grid.cell_point(grid.nearest_cell(complex(b, 0.0)))[()].real
    return float(ca), float(cb)


# -------------------------------------------------------------- experiments

def _fb(nx, ny, spacing, seed, *keys):
    grid = Grid.half_plane(nx, ny, spacing)
    return fields.sample_free_boundary_half_plane(grid, make_rng(seed, "fb", *keys))


def _params(cfg) -> LqgParams:
    return derive_params(float(cfg["gamma"]), cfg.get("d_gamma"), int(cfg.get("seed", 0)))


def _lfpp_eps(cfg, spacing):
    """LFPP mollification scale: ``c * spacing^p`` (defaults 1 and 1/2), at least one cell."""
    e = float(cfg.get("eps_coef", 1.0)) * spacing ** float(cfg.get("eps_power", 0.5))
    return max(e, spacing)


def _gmc_eps(cfg, spacing):
    """GMC regularization scale: ``c * spacing^p`` (defaults 2 and 1), at least two cells."""
    e = float(cfg.get("gmc_eps_coef", 2.0)) * spacing ** float(cfg.get("gmc_eps_power", 1.0))
    return max(e, 2 * spacing)


def _res(cfg):
    """``(nx, ny, spacing)`` of the default half-plane box ``[-1, 1] x [0, 1]``."""
    n = int(cfg["n"])
    width = float(cfg.get("width", 2.0))
    return n, n // 2, width / (n - 1)


DEFAULTS = {
    "thick_point": {"n": 512, "resolutions": [128, 256, 512], "seeds": 20, "window": [-0.5, 0.5],
                    "common_eps": 1 / 16, "gamma": 1.0},
    "distance_integral": {"n": 256, "gamma": math.sqrt(8 / 3), "d_gamma": 4.0, "a": 0.0,
                          "radii": [1 / 8, 1 / 32], "seeds": 200},
    "distance_vs_nu": {"n": 512, "gamma": math.sqrt(8 / 3), "d_gamma": 4.0, "seeds": 30,
                       "lengths": [1 / 64, 1 / 32, 1 / 16, 1 / 8, 1 / 4], "per_length": 4,
                       "resolutions": [256, 512]},
    "holder": {"n": 512, "gamma": math.sqrt(8 / 3), "d_gamma": 4.0, "seeds": 50,
               "points_per_seed": 8, "slack": 0.15},
    "bottleneck": {"kappa": 2.0, "traces": 100, "dt": 1e-4, "T": 1.0, "n_points": 2000,
                   "pairs": 60, "box": [-0.5, 0.5, 0.1, 1.0], "kappas": [1.0, 2.0, 3.0]},
    "volume_bound": {"gamma": math.sqrt(8 / 3), "d_gamma": 4.0, "seeds": 30,
                     "resolutions": [256, 512], "u": 0.05,
                     "intervals": [[0.1, 0.3], [0.3, 0.5], [-0.5, -0.3], [-0.3, -0.1], [0.2, 0.6],
                                   [-0.6, -0.2]],
                     "deltas": [0.05, 0.1, 0.2, 0.4]},
    "dgamma": {"n": 512, "gamma": math.sqrt(8 / 3), "d0": 3.0, "iterations": 5, "seeds": 50,
               "centers": 6, "s_count": 10},
    "covariance": {"nx": 128, "ny": 64, "spacing": 1 / 16, "replicas": 2000, "pairs": 200,
                   "gamma": 1.0},
    "gaussian": {"nx": 128, "ny": 64, "spacing": 1 / 16, "replicas": 2000, "gamma": 1.0,
                 "a": 0.5, "r_hi": 1.0, "r_lo": 0.25},
    "gluing": {"gamma": math.sqrt(8 / 3), "d_gamma": 4.0, "resolutions": [128, 256, 512],
               "seeds": 8, "pairs": 40, "box_half_width": 0.7, "eps_coef": 3.0, "eps_power": 1.0,
               "sle_T": 0.25, "sle_dt": 1e-5, "sle_stride": 2, "max_crossings": 50, "baseline_kappa": 2.0},
}


def config_for(name: str, cfg: dict | None = None) -> dict:
    if name not in DEFAULTS:
        raise PreconditionError(f"unknown experiment {name!r}; choose from {sorted(DEFAULTS)}")
    out = dict(DEFAULTS[name])
    out.update(cfg or {})
    return out


def run_thick_point(cfg: dict, seeds: int | None = None) -> ExperimentResult:
    cfg = config_for("thick_point", cfg)
    seeds = int(seeds or cfg["seeds"])
    rows = {"seed": [], "n": [], "eps": [], "ratio": []}
    coarsest = _res({"n": min(cfg["resolutions"])})[2]
    if cfg["common_eps"] < 2 * coarsest:
        raise PreconditionError("common_eps must be resolved on the coarsest grid")
    for n in cfg["resolutions"]:
        nx, ny, s = _res({"n": n})
        # 2s, 4s, ... up to 1/4, plus the common scale
        ladder = sorted({float(e) for e in 2 * s * 2.0 ** np.arange(20) if e <= 0.25}
                        | {float(cfg["common_eps"])})
        for seed in range(seeds):
            f = _fb(nx, ny, s, seed, "thick", n)
            r = thick_point_max(f, ladder, tuple(cfg["window"]))
            for e, v in zip(ladder, r):
                rows["seed"].append(seed)
                rows["n"].append(n)
                rows["eps"].append(e)
                rows["ratio"].append(v)
    cols = {k: np.array(v) for k, v in rows.items()}
    summary = {}
    for n in cfg["resolutions"]:
        sel = cols["n"] == n
        finest = cols["eps"][sel].min()
        summary[f"finest_eps_{n}"] = float(finest)
        summary[f"mean_ratio_finest_{n}"] = float(cols["ratio"][sel & (cols["eps"] == finest)].mean())
        summary[f"mean_ratio_common_{n}"] = float(
            cols["ratio"][sel & np.isclose(cols["eps"], cfg["common_eps"])].mean())
    common = [summary[f"mean_ratio_common_{n}"] for n in cfg["resolutions"]]
    finest = [summary[f"mean_ratio_finest_{n}"] for n in cfg["resolutions"]]
    summary["common_nonincreasing"] = bool(np.all(np.diff(common) <= 0))
    summary["finest_nonincreasing"] = bool(np.all(np.diff(finest) <= 0))
    summary["finest_ratio_top"] = finest[-1]
    cols["log_inv_eps"] = np.log(1 / cols["eps"])
    return ExperimentResult("thick_point", cols, {}, summary, ("log_inv_eps", "ratio", ""))


def run_distance_integral(cfg: dict, seeds: int | None = None) -> ExperimentResult:
    cfg = config_for("distance_integral", cfg)
    seeds = int(seeds or cfg["seeds"])
    p = _params(cfg)
    nx, ny, s = _res(cfg)
    eps = _lfpp_eps(cfg, s)
    rows = {"seed": [], "r": [], "fd": [], "integral": [], "ratio": [], "tail_fraction": [],
            "integrand_sup": [], "sup_ratio": []}
    for seed in range(seeds):
        f = _fb(nx, ny, s, seed, "dub")
        o = lfpp.build_oracle(f, p, eps, normalize=True)
        for r in cfg["radii"]:
            res = distance_integral_bound(f, p, o, float(cfg["a"]), float(r))
            rows["seed"].append(seed)
            rows["r"].append(r)
            for k in ("fd", "integral", "ratio", "tail_fraction", "integrand_sup", "sup_ratio"):
                rows[k].append(res[k])
    cols = {k: np.array(v) for k, v in rows.items()}
    p99 = {str(r): float(np.quantile(cols["ratio"][cols["r"] == r], 0.99)) for r in cfg["radii"]}
    vals = list(p99.values())
    summary = {"p99": p99, "p99_ratio": max(vals) / min(vals),
               "stable_within_2": bool(max(vals) / min(vals) <= 2.0),
               "max_tail_fraction": float(cols["tail_fraction"].max())}
    # the integral is controlled by its largest integrand value times an O(1) width
    w99 = {str(r): float(np.quantile(cols["sup_ratio"][cols["r"] == r], 0.99)) for r in cfg["radii"]}
    summary["sup_ratio_p99"] = w99
    summary["sup_ratio_stable_within_2"] = bool(max(w99.values()) / min(w99.values()) <= 2.0)
    cols["log_r"] = np.log(cols["r"])
    cols["log_ratio"] = np.log(cols["ratio"])
    return ExperimentResult("distance_integral", cols, {}, summary, ("log_r", "log_ratio", ""))


def distance_vs_nu_samples(field, params, cfg, rng, eps, gmc_eps):
    grid = field.grid
    o = lfpp.build_oracle(field, params, eps, normalize=True)
    coord = gmc.boundary_length_coordinate(gmc.boundary_measure(field, params, gmc_eps))
    out = []
    for a, b in random_intervals(grid, cfg["lengths"], int(cfg["per_length"]), rng):
        a, b = snap_interval(grid, a, b)
        if a == b:
            continue
        d = lfpp.boundary_distance(o, a, b)
        nu = coord.interval_mass(a, b)
        out.append((a, b, d, nu))
    return out


def run_distance_vs_nu(cfg: dict, seeds: int | None = None) -> ExperimentResult:
    cfg = config_for("distance_vs_nu", cfg)
    seeds = int(seeds or cfg["seeds"])
    p = _params(cfg)
    rows = {"seed": [], "n": [], "a": [], "b": [], "fd": [], "nu": []}
    for n in cfg["resolutions"]:
        nx, ny, s = _res({"n": n})
        for seed in range(seeds):
            f = _fb(nx, ny, s, seed, "dnu", n)
            rng = make_rng(seed, "dnu-intervals")
            for a, b, d, nu in distance_vs_nu_samples(f, p, cfg, rng, _lfpp_eps(cfg, s), _gmc_eps(cfg, s)):
                for k, v in zip(rows, (seed, n, a, b, d, nu)):
                    rows[k].append(v)
    cols = {k: np.array(v) for k, v in rows.items()}
    cols["log_nu"] = np.log(cols["nu"])
    cols["log_fd"] = np.log(cols["fd"])
    fits = {}
    for n in cfg["resolutions"]:
        sel = cols["n"] == n
        fits[f"slope_{n}"] = fit_exponent(cols["log_nu"][sel], cols["log_fd"][sel],
                                          groups=cols["seed"][sel], rng=make_rng(0, "boot", n))
    top = fits[f"slope_{cfg['resolutions'][-1]}"]
    c = [fits[f"slope_{n}"].ci95 for n in cfg["resolutions"]]
    overlap = max(x[0] for x in c) <= min(x[1] for x in c)
    summary = {"target": 2.0 / p.with_dgamma(float(cfg["d_gamma"])).d_gamma,
               "slope_top": top.slope, "ci_overlap": bool(overlap)}
    fits["slope"] = top
    return ExperimentResult("distance_vs_nu", cols, fits, summary, ("log_nu", "log_fd", "slope"))


def run_holder(cfg: dict, seeds: int | None = None) -> ExperimentResult:
    cfg = config_for("holder", cfg)
    seeds = int(seeds or cfg["seeds"])
    p = _params(cfg)
    nx, ny, s = _res(cfg)
    eps = _lfpp_eps(cfg, s)
    bs = [b for b in 2.0 ** -np.arange(1, 12) if b >= 4 * s and b <= 0.5]
    rows = {"seed": [], "a": [], "b": [], "fd": []}
    positive = True
    for seed in range(seeds):
        f = _fb(nx, ny, s, seed, "holder")
        o = lfpp.build_oracle(f, p, eps, normalize=True)
        rng = make_rng(seed, "holder-points")
        for a in rng.uniform(-0.5, 0.5, int(cfg["points_per_seed"])):
            src = f.grid.nearest_cell(complex(a, 0.0))[()]
            a_c = f.grid.cell_point(src)[()].real
            d = o.distances_from(np.array([src])).ravel()
            targets = f.grid.nearest_cell(a_c + 1j * np.array(bs))
            for b, t in zip(bs, targets):
                rows["seed"].append(seed)
                rows["a"].append(a_c)
                rows["b"].append(b)
                rows["fd"].append(d[t])
            nb = f.grid.nearest_cell(complex(a_c + f.grid.spacing, 0.0))[()]
            positive &= bool(d[nb] > 0)
    cols = {k: np.array(v) for k, v in rows.items()}
    cols["log_b"] = np.log(cols["b"])
    cols["log_fd"] = np.log(cols["fd"])
    up = envelope_fit(cols["log_b"], cols["log_fd"], 0.95, groups=cols["seed"], rng=make_rng(0, "hu"))
    lo = envelope_fit(cols["log_b"], cols["log_fd"], 0.05, groups=cols["seed"], rng=make_rng(0, "hl"))
    xi, Q = p.xi, p.Q
    slack = float(cfg["slack"])
    med = [np.median(cols["fd"][cols["b"] == b]) for b in sorted(bs)]
    summary = {"lower_target": xi * (Q - 2), "upper_target": xi * (Q + 2),
               "upper_envelope_slope": up.slope, "lower_envelope_slope": lo.slope,
               "brackets": bool(up.slope >= xi * (Q - 2) - slack and lo.slope <= xi * (Q + 2) + slack),
               "boundary_distance_positive": positive,
               "medians_decrease_to_zero": bool(np.all(np.diff(med) >= 0))}
    return ExperimentResult("holder", cols, {"upper": up, "lower": lo}, summary,
                            ("log_b", "log_fd", "upper"))


def straight_bottleneck(n: int = 200) -> ExponentFit:
    tr = glue.straight_trace(0.0, 1.0, n)
    b = sle.bottleneck_statistics(tr, (-1, 1, 0, 1), 200, np.random.default_rng(0))
    return envelope_fit(np.log(b.endpoint_distance), np.log(b.diameter), 0.95)


def run_bottleneck(cfg: dict, seeds: int | None = None) -> ExperimentResult:
    cfg = config_for("bottleneck", cfg)
    traces = int(seeds or cfg["traces"])
    rows = {"kappa": [], "trace": [], "dist": [], "diam": []}
    for kappa in sorted(set(cfg["kappas"]) | {cfg["kappa"]}):
        for i in range(traces if kappa == cfg["kappa"] else max(10, traces // 4)):
            rng = make_rng(i, "bottleneck", kappa)
            d = sle.sample_driving(kappa, 0.0, 0.0, float(cfg["dt"]), float(cfg["T"]), rng)
            tr = sle.extract_trace(d, int(cfg["n_points"]))
            b = sle.bottleneck_statistics(tr, tuple(cfg["box"]), int(cfg["pairs"]), rng)
            rows["kappa"].extend([kappa] * len(b.diameter))
            rows["trace"].extend([i] * len(b.diameter))
            rows["dist"].extend(b.endpoint_distance.tolist())
            rows["diam"].extend(b.diameter.tolist())
    cols = {k: np.array(v) for k, v in rows.items()}
    cols["log_dist"] = np.log(cols["dist"])
    cols["log_diam"] = np.log(cols["diam"])
    fits = {}
    for kappa in sorted(set(cols["kappa"].tolist())):
        sel = cols["kappa"] == kappa
        fits[f"zeta_{kappa:g}"] = envelope_fit(cols["log_dist"][sel], cols["log_diam"][sel], 0.95,
                                               groups=cols["trace"][sel], rng=make_rng(0, "bz", kappa))
    main = fits[f"zeta_{cfg['kappa']:g}"]
    ks = sorted(set(cols["kappa"].tolist()))
    zs = [fits[f"zeta_{k:g}"].slope for k in ks]
    summary = {"zeta": main.slope, "ci95": list(main.ci95), "ci_excludes_zero": bool(main.ci95[0] > 0),
               "zeta_by_kappa": dict(zip([f"{k:g}" for k in ks], zs)),
               "nonincreasing_in_kappa": bool(np.all(np.diff(zs) <= 0))}
    fits["zeta"] = main
    return ExperimentResult("bottleneck", cols, fits, summary,
                            ("log_dist", "log_diam", "zeta"))


def boundary_volume_samples(field, params, cfg, d_gamma, eps, gmc_eps):
    grid = field.grid
    o = lfpp.build_oracle(field, params, eps, normalize=True)
    mu = gmc.area_measure(field, params, gmc_eps)
    coord = gmc.boundary_length_coordinate(gmc.boundary_measure(field, params, gmc_eps))
    u = float(cfg["u"])
    out = []
    for a, b in cfg["intervals"]:
        a, b = snap_interval(grid, a, b)
        nu = coord.interval_mass(a, b)
        cells = lfpp.boundary_cells_in(grid, a, b)
        dist = o.distances_from(cells, limit=max(cfg["deltas"]))
        for delta in cfg["deltas"]:
            mass = float(mu.cell_mass[dist < delta].sum())
            ok = nu >= 4 * delta ** (d_gamma / 2 - 2 * u)
            out.append((a, b, delta, nu, mass, mass / (delta ** (d_gamma / 2) * nu), ok))
    return out


def run_volume_bound(cfg: dict, seeds: int | None = None) -> ExperimentResult:
    cfg = config_for("volume_bound", cfg)
    seeds = int(seeds or cfg["seeds"])
    p = _params(cfg)
    dg = float(cfg["d_gamma"])
    rows = {"seed": [], "n": [], "a": [], "b": [], "delta": [], "nu": [], "mu_ball": [], "ratio": [],
            "qualifies": []}
    for n in cfg["resolutions"]:
        nx, ny, s = _res({"n": n})
        for seed in range(seeds):
            f = _fb(nx, ny, s, seed, "vol", n)
            for rec in boundary_volume_samples(f, p, cfg, dg, _lfpp_eps(cfg, s), _gmc_eps(cfg, s)):
                for k, v in zip(rows, (seed, n) + rec):
                    rows[k].append(v)
    cols = {k: np.array(v) for k, v in rows.items()}
    summary = {}
    mins = {}
    for n in cfg["resolutions"]:
        per_seed = []
        for seed in range(seeds):
            sel = (cols["n"] == n) & (cols["seed"] == seed) & cols["qualifies"]
            if sel.any():
                per_seed.append(cols["ratio"][sel].min())
        if not per_seed:
            raise PreconditionError(f"no (interval, delta) pair meets the precondition at n={n}")
        mins[n] = float(np.median(per_seed))
        summary[f"M_hat_median_{n}"] = mins[n]
        summary[f"qualifying_fraction_{n}"] = float(cols["qualifies"][cols["n"] == n].mean())
    vals = list(mins.values())
    summary["factor"] = max(vals) / min(vals)
    summary["stable_within_3"] = bool(summary["factor"] <= 3.0)
    # monotonicity in delta at a fixed interval
    mono = True
    for n in cfg["resolutions"]:
        for seed in range(seeds):
            for a, b in cfg["intervals"]:
                sel = (cols["n"] == n) & (cols["seed"] == seed) & np.isclose(
                    cols["a"], snap_interval(Grid.half_plane(*_res({"n": n})), a, b)[0])
                m = cols["mu_ball"][sel]
                mono &= bool(np.all(np.diff(m) >= 0))
    summary["mass_increases_with_delta"] = mono
    cols["log_delta"] = np.log(cols["delta"])
    cols["log_ratio"] = np.log(cols["ratio"])
    return ExperimentResult("volume_bound", cols, {}, summary, ("log_delta", "log_ratio", ""))


def ball_volume_samples(field, params, xi, eps, gmc_eps, centers: int, s_count: int, rng,
                        inner: float = 0.5):
    """``(s, mu(B_s(z)))`` for mu-typical centres ``z`` with ``|z| <= inner``.

    Radii run from the distance reached at Euclidean radius ``2 eps`` to 0.9 of
    the distance to the edge of the grid, log-spaced.
    """
    grid = field.grid
    o = lfpp.build_oracle(field, params, eps, xi=xi, normalize=True)
    mu = gmc.area_measure(field, params, gmc_eps).cell_mass
    pts = grid.points
    allowed = np.abs(pts) <= inner
    cells = glue.sample_typical_cells(mu, allowed, centers, rng)
    edge = np.zeros(grid.shape, bool)
    edge[[0, -1], :] = True
    edge[:, [0, -1]] = True
    out = []
    for c in cells:
        d = o.distances_from(np.array([c]))
        zc = grid.cell_point(c)[()]
        ring = np.abs(np.abs(pts - zc) - 2 * eps) < grid.spacing
        s_lo = float(np.median(d[ring]))
        s_hi = 0.9 * float(d[edge].min())
        if not s_hi > s_lo:
            continue
        s_values = np.exp(np.linspace(math.log(s_lo), math.log(s_hi), s_count))
        flat = d.ravel()
        order = np.argsort(flat, kind="stable")
        cm = np.cumsum(mu.ravel()[order])
        idx = np.searchsorted(flat[order], s_values, side="left")
        vol = cm[np.maximum(idx - 1, 0)]
        out.extend((int(c), float(s), float(v)) for s, v in zip(s_values, vol))
    return out


def estimate_dgamma(field_list, params: LqgParams, cfg: dict | None = None,
                    rng=None) -> tuple[ExponentFit, list]:
    """Slope of ``log mu(B_s)`` on ``log s`` with ``xi = gamma / d`` updated by
    fixed-point iteration from ``d0``.  Returns the last fit and the iterates."""
    cfg = config_for("dgamma", cfg)
    d = float(cfg["d0"])
    history = []
    fit = None
    for it in range(int(cfg["iterations"])):
        xs, ys, gs = [], [], []
        for k, f in enumerate(field_list):
            s = f.grid.spacing
            r = make_rng(k, "dgamma-centres", it) if rng is None else rng
            for c, sv, vol in ball_volume_samples(f, params, params.gamma / d, _lfpp_eps(cfg, s),
                                                  _gmc_eps(cfg, s), int(cfg["centers"]),
                                                  int(cfg["s_count"]), r):
                xs.append(math.log(sv))
                ys.append(math.log(vol))
                gs.append(k)
        fit = fit_exponent(xs, ys, groups=gs, rng=make_rng(it, "dgamma-boot"))
        history.append({"d_in": d, "d_out": fit.slope, "ci95": list(fit.ci95)})
        d = fit.slope
    return fit, history


def run_dgamma(cfg: dict, seeds: int | None = None) -> ExperimentResult:
    cfg = config_for("dgamma", cfg)
    seeds = int(seeds or cfg["seeds"])
    p = derive_params(float(cfg["gamma"]))
    n = int(cfg["n"])
    s = 2.0 / (n - 1)
    grid = Grid.centered(n, n, s)
    fl = [fields.sample_whole_plane(grid, make_rng(seed, "wp", n)) for seed in range(seeds)]
    fit, hist = estimate_dgamma(fl, p, cfg)
    cols = {"log_s": fit.xs, "log_mu": fit.ys}
    summary = {"d_hat": fit.slope, "ci95": list(fit.ci95), "history": hist,
               "ci_lower_above_2": bool(fit.ci95[0] > 2), "ci_width": fit.ci95[1] - fit.ci95[0],
               "more_seeds_needed": bool(fit.ci95[1] - fit.ci95[0] > 1.0)}
    return ExperimentResult("dgamma", cols, {"d_gamma": fit}, summary, ("log_s", "log_mu", "d_gamma"))


def flat_dgamma_slope(n: int = 129, eps: float | None = None) -> float:
    """Ball-volume slope for ``h = 0`` (Euclidean area, slope 2 up to the octile lattice)."""
    grid = Grid.centered(n, n, 2.0 / (n - 1))
    f = fields.constant_field(grid, 0.0, bc="whole_plane_mod_const")
    p = derive_params(1.0, 4.0)
    eps = eps or 4 * grid.spacing
    xs, ys = [], []
    for c, sv, vol in ball_volume_samples(f, p, p.xi, eps, 2 * grid.spacing, 1, 10,
                                          np.random.default_rng(0), inner=0.05):
        xs.append(math.log(sv))
        ys.append(math.log(vol))
    return _linfit(xs, ys)[0]


def batch_semicircle_average(field, xs, radii) -> np.ndarray:
    """Semicircle averages ``h_r(x)`` for many ``(x, r)`` in one evaluation,
    with a common (largest) node count."""
    xs = np.asarray(xs, float)
    radii = np.asarray(radii, float)
    if np.any(radii < 2 * field.grid.spacing * (1 - 1e-12)):
        raise PreconditionError("radius below resolution 2*spacing")
    n = fields._node_count(float(radii.max()), "semicircle", field.grid.spacing)
    pts, w = fields._arc_points(0j, np.ones(1), "semicircle", field.grid.spacing, n)
    arcs = xs[:, None] + radii[:, None] * pts
    vals, valid = field.evaluate(arcs)
    if not np.all(valid):
        raise PreconditionError("averaging arc leaves the grid")
    return vals @ w


def covariance_modulus_check(field_list, pairs) -> dict:
    """Empirical ``E|h_r(z) - h_s(w)|^2`` against ``4 (|z - w| + |r - s|) / (r ^ s)``
    for boundary points ``z, w``; ``pairs`` holds rows ``(z, r, w, s)``."""
    pairs = np.asarray(pairs, float).reshape(-1, 4)
    # any iterable of fields; only the per-field differences are kept
    diffs = np.array([batch_semicircle_average(f, pairs[:, 0], pairs[:, 1])
                      - batch_semicircle_average(f, pairs[:, 2], pairs[:, 3]) for f in field_list])
    m2 = (diffs ** 2).mean(axis=0)
    bound = 4 * (np.abs(pairs[:, 0] - pairs[:, 2]) + np.abs(pairs[:, 1] - pairs[:, 3])) / np.minimum(
        pairs[:, 1], pairs[:, 3])
    se = (diffs ** 2).std(axis=0) / math.sqrt(len(diffs))
    violated = m2 > bound + 3 * se
    return {"second_moment": m2, "bound": bound, "violated": violated,
            "violation_rate": float(violated.mean())}


def random_modulus_pairs(grid: Grid, count: int, rng, r_range=None, x_range=(-1.5, 1.5)):
    s = grid.spacing
    lo, hi = r_range or (2 * s, 1.0)
    out = []
    for _ in range(count):
        z, w = rng.uniform(*x_range, 2)
        r, t = np.exp(rng.uniform(math.log(lo), math.log(hi), 2))
        out.append((z, r, w, t))
    return np.array(out)


def increment_statistics(field_list, a: float, r_hi: float, r_lo: float) -> dict:
    """Variance of ``h_{r_lo}(a) - h_{r_hi}(a)`` against ``2 log(r_hi / r_lo)``."""
    inc = np.array([_increment(f, a, r_hi, r_lo) for f in field_list])
    return _increment_summary(inc, r_hi, r_lo)


def _increment(f, a, r_hi, r_lo) -> float:
    return float(fields.semicircle_average(f, a, r_lo) - fields.semicircle_average(f, a, r_hi))


def _increment_summary(inc, r_hi, r_lo) -> dict:
    target = 2 * math.log(r_hi / r_lo)
    return {"variance": float(inc.var(ddof=1)), "target": target,
            "ratio": float(inc.var(ddof=1) / target), "mean": float(inc.mean())}


def sup_increment_samples(field_list, Q: float, t0: float = 0.0) -> np.ndarray:
    """``sup_{s >= t0} Y_s - Y_{t0}`` with ``Y_t = h_{e^-t}(0) - Q t`` from the
    exact radial process of each field (up to its resolved horizon)."""
    return np.array([_sup_increment(f, Q, t0) for f in field_list])


def _sup_increment(f, Q, t0) -> float:
    rp = f.radial
    if rp is None or rp.kind != "semicircle" or abs(rp.center) > 0:
        raise PreconditionError("fields need the refined semicircle process at 0")
    sel = rp.t >= t0
    y = rp.process[sel] - Q * rp.t[sel]
    return float(y.max() - y[0])


def run_covariance(cfg: dict, seeds: int | None = None) -> ExperimentResult:
    cfg = config_for("covariance", cfg)
    reps = int(seeds or cfg["replicas"])
    grid = Grid.half_plane(int(cfg["nx"]), int(cfg["ny"]), float(cfg["spacing"]))
    # generator: refined fields carry a long radial process, so they are not kept
    fl = (fields.sample_free_boundary_half_plane(grid, make_rng(i, "cov")) for i in range(reps))
    pairs = random_modulus_pairs(grid, int(cfg["pairs"]), make_rng(0, "cov-pairs"))
    res = covariance_modulus_check(fl, pairs)
    cols = {"z": pairs[:, 0], "r": pairs[:, 1], "w": pairs[:, 2], "s": pairs[:, 3],
            "second_moment": res["second_moment"], "bound": res["bound"],
            "violated": res["violated"].astype(int)}
    return ExperimentResult("covariance", cols, {}, {"violation_rate": res["violation_rate"]},
                            ("bound", "second_moment", ""))


def run_gaussian(cfg: dict, seeds: int | None = None) -> ExperimentResult:
    cfg = config_for("gaussian", cfg)
    reps = int(seeds or cfg["replicas"])
    p = derive_params(float(cfg["gamma"]))
    grid = Grid.half_plane(int(cfg["nx"]), int(cfg["ny"]), float(cfg["spacing"]))
    a, r_hi, r_lo = float(cfg["a"]), float(cfg["r_hi"]), float(cfg["r_lo"])
    rows = []
    for i in range(reps):
        f = fields.sample_free_boundary_half_plane(grid, make_rng(i, "gauss"))
        rows.append((_increment(f, a, r_hi, r_lo), _increment(f, 0.0, r_hi, r_lo), _sup_increment(f, p.Q, 0.0)))
    rows = np.array(rows)
    inc = _increment_summary(rows[:, 0], r_hi, r_lo)
    inc0 = _increment_summary(rows[:, 1], r_hi, r_lo)
    z = rows[:, 2]
    ks = stats.kstest(z, stats.expon(scale=1 / p.Q).cdf)
    summary = {"increment": inc, "increment_at_origin": inc0, "ks_pvalue": float(ks.pvalue),
               "ks_statistic": float(ks.statistic), "mean_sup": float(z.mean()), "Q": p.Q,
               "q_log2": float(np.mean(z <= math.log(2)))}
    return ExperimentResult("gaussian", {"sup_increment": z}, {}, summary, None)


# ---------------------------------------------------------------- gluing


def gluing_box(n: int, half_width: float):
    """Half-plane box ``[-w, w] x [0, w]`` with ``n x n/2`` cells."""
    s = 2 * half_width / (n - 1)
    return Grid.half_plane(n, n // 2, s)


def wedge_like_field(grid: Grid, params: LqgParams, seed: int, alpha: float, key=()):
    f = fields.sample_free_boundary_half_plane(grid, make_rng(seed, "glue-field", *key))
    with np.errstate(divide="ignore"):
        sing = -alpha * np.log(np.abs(grid.points))
    return f.shifted(np.where(np.isfinite(sing), sing, 0.0))


def exiting_trace(kappa: float, grid: Grid, seed: int, T: float, dt: float, stride: int,
                  max_attempts: int = 20) -> sle.SleTrace:
    """Chordal SLE trace from 0 that leaves the grid's rectangle before time ``T``."""
    x0, x1, y0, y1 = grid.extent
    for attempt in range(max_attempts):
        rng = make_rng(seed, "glue-trace", kappa, attempt)
        d = sle.sample_driving(kappa, 0.0, 0.0, dt, T, rng)
        tr = sle.extract_trace(d, d.n_steps // stride + 1)
        p = tr.points
        out = (p.real < x0) | (p.real > x1) | (p.imag > y1)
        if out.any():
            k = int(np.argmax(out)) + 1
            return tr.truncated(k)
    raise PreconditionError("trace did not leave the box; increase sle_T")


def run_gluing(cfg: dict, seeds: int | None = None) -> ExperimentResult:
    cfg = config_for("gluing", cfg)
    seeds = int(seeds or cfg["seeds"])
    p = _params(cfg)
    alpha = p.gamma - 2 / p.gamma
    kappa = p.gamma ** 2
    rows = {"n": [], "seed": [], "pair": [], "d_direct": [], "d_glued": [], "rel": [], "kind": []}
    summary = {}
    biggest = gluing_box(max(cfg["resolutions"]), cfg["box_half_width"])
    traces = {}
    for seed in range(seeds):
        traces[seed] = tuple(exiting_trace(k, biggest, seed, cfg["sle_T"], cfg["sle_dt"], cfg["sle_stride"])
                             for k in (kappa, cfg["baseline_kappa"]))
    for n in cfg["resolutions"]:
        grid = gluing_box(n, cfg["box_half_width"])
        eps = _lfpp_eps(cfg, grid.spacing)
        for seed in range(seeds):
            tr, trb = traces[seed]
            f = wedge_like_field(grid, p, seed, alpha, (n,))
            rep = glue.glued_vs_direct(f, p, tr, eps, int(cfg["pairs"]), rng=make_rng(seed, "glue-q", n),
                                       max_crossings=int(cfg["max_crossings"]))
            zero = fields.constant_field(grid, 0.0)
            base = glue.glued_vs_direct(zero, p, trb, eps, int(cfg["pairs"]),
                                        rng=make_rng(seed, "glue-b", n),
                                        max_crossings=int(cfg["max_crossings"]))
            for kind, r in (("field", rep), ("baseline", base)):
                m = len(r.rel)
                rows["n"].extend([n] * m)
                rows["seed"].extend([seed] * m)
                rows["pair"].extend(range(m))
                rows["d_direct"].extend(r.d_direct.tolist())
                rows["d_glued"].extend(r.d_glued.tolist())
                rows["rel"].extend(r.rel.tolist())
                rows["kind"].extend([kind] * m)
    cols = {k: np.array(v) for k, v in rows.items()}
    med = []
    for n in cfg["resolutions"]:
        sel = cols["n"] == n
        f_med = float(np.median(np.abs(cols["rel"][sel & (cols["kind"] == "field")])))
        b_med = float(np.median(np.abs(cols["rel"][sel & (cols["kind"] == "baseline")])))
        summary[f"median_{n}"] = f_med
        summary[f"baseline_{n}"] = b_med
        summary[f"p90_{n}"] = float(np.quantile(np.abs(cols["rel"][sel & (cols["kind"] == "field")]), 0.9))
        summary[f"min_rel_{n}"] = float(cols["rel"][sel & (cols["kind"] == "field")].min())
        med.append(f_med - b_med)
    summary["excess_medians"] = med
    summary["nonincreasing"] = bool(np.all(np.diff(med) <= 0))
    summary["top_excess"] = med[-1]
    summary["top_within_10pct"] = bool(med[-1] <= 0.10)
    summary["locality_all_pairs"] = bool(np.all(cols["rel"][cols["kind"] == "field"] >= -0.02))
    summary["locality_violations"] = int(np.sum(cols["rel"][cols["kind"] == "field"] < -0.02))
    cols["log_d_direct"] = np.log(cols["d_direct"])
    return ExperimentResult("gluing", cols, {}, summary, ("log_d_direct", "rel", ""))


RUNNERS = {
    "thick_point": run_thick_point,
    "distance_integral": run_distance_integral,
    "distance_vs_nu": run_distance_vs_nu,
    "holder": run_holder,
    "bottleneck": run_bottleneck,
    "volume_bound": run_volume_bound,
    "dgamma": run_dgamma,
    "covariance": run_covariance,
    "gaussian": run_gaussian,
    "gluing": run_gluing,
}


def run_experiment(name: str, cfg: dict | None = None, seeds: int | None = None) -> ExperimentResult:
    if name not in RUNNERS:
        raise PreconditionError(f"unknown experiment {name!r}; choose from {sorted(RUNNERS)}")
    return RUNNERS[name](cfg or {}, seeds)


# ------------------------------------------------------------------ caching

def source_digest() -> str:
    """SHA-256 over the package sources, so cached results follow code changes."""
    import hashlib

    here = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for name in sorted(os.listdir(here)):
        if name.endswith((".py", ".pyx")) and name != "cli.py":
            with open(os.path.join(here, name), "rb") as fh:
                h.update(name.encode() + b"\0" + fh.read())
    return h.hexdigest()


def cache_key(name: str, cfg: dict | None, seeds: int | None) -> str:
    import hashlib

    blob = json.dumps({"name": name, "cfg": _jsonable(config_for(name, cfg)), "seeds": seeds,
                       "src": source_digest()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cached_run(name: str, cfg: dict | None, seeds: int | None, cache_dir) -> dict:
    """Summary of an experiment, recomputed only when config, seeds or code change."""
    out = os.path.join(cache_dir, f"{name}-{cache_key(name, cfg, seeds)}")
    path = os.path.join(out, "fit.json")
    if not os.path.exists(path):
        run_experiment(name, cfg, seeds).write(out)
    with open(path) as fh:
        return json.load(fh)
