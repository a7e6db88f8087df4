"""Command-line scenario runner: ``btwalk <scenario> [--config ...]``.

Every scenario writes a CSV (or JSON) table to ``--out`` plus a JSON sidecar
with fitted estimates and test p-values.  Exit codes: 0 ok, 2 a built-in check
failed, 3 bad configuration (the message names the field).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import law as lawmod
from ._io import read_csv, write_csv, write_json

SCENARIOS = ("env-report", "tail-w-m", "tail-maxl", "maxln-converge", "nbm-check", "tree-equivalence",
             "spine-check", "pij-table", "mto-check", "ladder-report")
P_MIN = 1e-3


class ConfigError(ValueError):
    def __init__(self, fld, msg):
        super().__init__(f"{fld}: {msg}")
        self.field = fld


class MalformedCSV(ValueError):
    code = "MALFORMED_CSV"


@dataclass
class ScenarioConfig:
    scenario: str = "env-report"
    law: str = "A"
    samples: int = 10_000
    seed: int = 0
    replicas: int = 1
    max_steps: int = 10**7
    max_nodes: int = 2_000_000
    barrier: float | None = None
    freeze_eps: float = 1e-3
    eps_w: float = 1e-3
    window: int = 5
    max_depth: int = 400
    n: int = 1
    k_values: list = field(default_factory=lambda: [1, 3])
    stars: list = field(default_factory=lambda: [[1.0], [0.6, 0.4], [1.25]])
    A_list: list = field(default_factory=lambda: [4, 8, 16, 32])
    i_max: int = 10
    j_max: int = 30
    t: int = 0
    grid_points: int = 40
    grid_max: float = 10.0
    format: str = "csv"

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError("scenario", f"unknown scenario {self.scenario!r}")
        for name in ("samples", "replicas", "max_steps", "max_nodes", "n", "i_max", "j_max",
                     "grid_points", "window", "max_depth"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.format not in ("csv", "json"):
            raise ConfigError("format", f"must be csv or json, got {self.format!r}")
        if self.barrier is not None and not self.barrier > 0:
            raise ConfigError("barrier", "must be positive")
        for name in ("freeze_eps", "eps_w"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(name, "must lie in (0, 1)")
        if self.samples < self.replicas:
            raise ConfigError("replicas", "more replicas than samples")
        return self

    @classmethod
    def from_mapping(cls, d: dict):
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigError(k, "unknown configuration field")
        return cls(**d)

    def load_law(self) -> lawmod.ReproductionLaw:
        try:
            if self.law.upper() in ("A", "B", "C"):
                return lawmod.load_reference(self.law)
            return lawmod.ReproductionLaw.from_json(self.law)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError("law", str(exc)) from exc

    def split(self):
        """Sample counts per replica (the first ones take the remainder)."""
        q, r = divmod(self.samples, self.replicas)
        return [q + (1 if i < r else 0) for i in range(self.replicas)]


# -- replica workers (top level so they pickle) ------------------------------------

def _w_pairs(args):
    from .env import DepthPolicy, EnvTree, sample_w_pair
    law_d, seed, replica, m, barrier, pol, max_nodes = args
    law = lawmod.ReproductionLaw.from_dict(law_d)
    policy = DepthPolicy(**pol)
    env = EnvTree(law, seed, 0, max_nodes=max_nodes)
    out = np.full((m, 3), np.nan)
    for s in range(m):
        p, env, _, _ = sample_w_pair(law, seed, (replica << 32) | s, barrier, policy, env)
        out[s] = (p.W_inf, p.M_e, float(p.censored))
    return out


def _excursions(args):
    from .walk import annealed_excursions
    law_d, seed, replica, m, n, max_steps, max_nodes = args
    law = lawmod.ReproductionLaw.from_dict(law_d)
    b = annealed_excursions(law, n, m, seed, replica, "walk", max_steps, max_nodes)
    return np.column_stack([b.max_lt, b.max_nonroot, b.tau_n, b.Z1, b.root_children, b.censored])


def _trees(args):
    from .ltgw import sample_trees
    law_d, seed, replica, m, k, full, max_nodes = args
    law = lawmod.ReproductionLaw.from_dict(law_d)
    t = sample_trees(law, k, m, seed, replica, full=full, max_nodes=max_nodes)
    return np.column_stack([t.Mstar, t.Z[:, 1], t.root_children, t.censored, t.L1, t.M1])


def _spine(args):
    from .spine import first_spine_transitions
    law_d, seed, replica, m, max_steps, max_nodes = args
    law = lawmod.ReproductionLaw.from_dict(law_d)
    ty, c = first_spine_transitions(law, m, (int(seed) << 8) + replica, max_steps, max_nodes)
    return np.column_stack([ty, c])


def _workers() -> int:
    v = os.environ.get("BTW_THREADS", "1")
    try:
        n = int(v)
    except ValueError as exc:
        raise ConfigError("BTW_THREADS", f"not an integer: {v!r}") from exc
    if n < 1:
        raise ConfigError("BTW_THREADS", "must be >= 1")
    return n


def run_replicas(fn, jobs):
    """Run ``fn`` over replica jobs and concatenate in replica order."""
    nw = min(_workers(), len(jobs))
    if nw <= 1:
        parts = [fn(j) for j in jobs]
    else:
        with ProcessPoolExecutor(nw) as ex:
            parts = list(ex.map(fn, jobs))
    return np.concatenate(parts, axis=0)


# -- scenarios --------------------------------------------------------------------

@dataclass
class Result:
    header: list
    rows: list
    summary: dict
    notes: list = field(default_factory=list)
    ok: bool = True
    plot: dict | None = None


def _log_grid(x, points):
    x = np.asarray(x, float)
    top = float(np.nanmax(x)) if x.size else 1.0
    return np.unique(np.geomspace(1.0, max(top, 1.0 + 1e-9), points))


def _tail_fit(x, S, cnt, min_count=50):
    """log-log fit over the top-1% tail down to the last grid point with enough exceedances."""
    from .stats import RangeEmpty, loglog_fit
    sel = (S <= 1e-2) & (cnt >= min_count)
    if sel.sum() < 4:
        return None
    try:
        slope, icpt, r2 = loglog_fit(x[sel], S[sel], min_points=4)
    except RangeEmpty:
        return None
    return {"slope": slope, "intercept": icpt, "r2": r2, "fit_range": [float(x[sel][0]), float(x[sel][-1])],
            "c_unit_slope": float(np.exp(np.mean(np.log(S[sel]) + np.log(x[sel]))))}


def sc_env_report(cfg, law):
    rows_c, kap = lawmod.validate_law(law)
    rows = [(float(t), lawmod.psi(law, float(t))) for t in np.linspace(0, 4, 17)]
    summary = {"law": law.name, "kappa": kap.value if kap else None,
               "conditions": [dataclasses.asdict(r) for r in rows_c]}
    bad = [r.name for r in rows_c if not r.ok and r.fatal]
    if bad:
        raise ConfigError("law", f"condition violated: {bad[0]}")
    return Result(["t", "psi"], rows, summary, ["psi(t) = sum_b p_b sum_j A^t (dimensionless)"])


def sc_tail_w_m(cfg, law):
    from .env import default_barrier
    from .stats import TooFewSamples, hill, survival_curve
    barrier = cfg.barrier or default_barrier(law)
    pol = {"freeze_eps": cfg.freeze_eps, "eps_w": cfg.eps_w, "window": cfg.window, "max_depth": cfg.max_depth}
    jobs = [(law.to_dict(), cfg.seed, r, m, barrier, pol, cfg.max_nodes) for r, m in enumerate(cfg.split())]
    data = run_replicas(_w_pairs, jobs)
    ok = data[:, 2] == 0
    W, M = data[ok, 0], data[ok, 1]
    grid = _log_grid(np.concatenate([W, M]), cfg.grid_points)
    SW, nW = survival_curve(W, grid)
    SM, nM = survival_curve(M, grid)
    joint = np.array([np.mean((W >= g) & (M >= g)) for g in grid])
    summary = {"samples": int(data.shape[0]), "censored": int((~ok).sum())}
    for name, x in (("W_inf", W), ("M_e", M)):
        try:
            h = hill(x, smooth=4)
            summary[f"hill_{name}"] = {"index": h.index, "se": h.se, "k": h.k_order}
        except TooFewSamples as exc:
            summary[f"hill_{name}"] = {"error": str(exc)}
    rows = [(float(g), float(a), float(b), float(c), int(d), int(e))
            for g, a, b, c, d, e in zip(grid, SW, SM, joint, nW, nM)]
    return Result(["x", "S_W", "S_Me", "S_joint", "n_W", "n_Me"], rows, summary,
                  ["S_*: empirical P(X >= x); censored environments are dropped and counted in the sidecar"],
                  plot={"x": grid, "series": {"W_inf": SW, "M_e": SM}})


def sc_tail_maxl(cfg, law):
    from .stats import survival_curve
    jobs = [(law.to_dict(), cfg.seed, r, m, cfg.n, cfg.max_steps, cfg.max_nodes) for r, m in enumerate(cfg.split())]
    data = run_replicas(_excursions, jobs)
    mx, cens = data[:, 0], data[:, 5].astype(bool)
    grid = _log_grid(mx, cfg.grid_points)
    S, cnt = survival_curve(mx, grid, cens)
    fit = _tail_fit(grid, S, cnt)
    kap = lawmod.solve_kappa(law).value
    summary = {"samples": int(mx.shape[0]), "censored": int(cens.sum()), "kappa": kap, "fit": fit,
               "moments": {str(p): float(np.mean(mx.astype(float) ** p)) for p in (1, 2, 3, 4)}}
    if math.isfinite(kap):
        summary["predicted_slope"] = -1.0 if kap < 2 else -kap / 2
    rows = [(float(g), float(s), int(c)) for g, s, c in zip(grid, S, cnt)]
    notes = ["survival: Kaplan-Meier P(max edge local time at tau_n >= x); capped runs are right-censored",
             "fit: " + ("none" if fit is None else f"slope={fit['slope']:.6g} intercept={fit['intercept']:.6g}")]
    return Result(["x", "survival", "at_risk"], rows, summary, notes, plot={"x": grid, "series": {"max_L": S}})


def sc_maxln(cfg, law):
    from .stats import ks_censored_bounds
    n = cfg.n
    jobs = [(law.to_dict(), cfg.seed, r, m, n, True, cfg.max_nodes) for r, m in enumerate(cfg.split())]
    t = run_replicas(_trees, jobs)
    x, cens = t[:, 0] / n, t[:, 3].astype(bool)
    pol = {"freeze_eps": cfg.freeze_eps, "eps_w": cfg.eps_w, "window": cfg.window, "max_depth": cfg.max_depth}
    from .env import default_barrier
    jobs = [(law.to_dict(), cfg.seed + 1, r, m, cfg.barrier or default_barrier(law), pol, cfg.max_nodes)
            for r, m in enumerate(cfg.split())]
    wm = run_replicas(_w_pairs, jobs)
    M = wm[wm[:, 2] == 0, 1]
    best, worst = ks_censored_bounds(x, cens, M)
    grid = np.quantile(np.concatenate([x, M]), np.linspace(0.02, 0.98, 20))
    Fx = np.searchsorted(np.sort(x), grid, side="right") / x.shape[0]
    FM = np.searchsorted(np.sort(M), grid, side="right") / M.shape[0]
    summary = {"n": n, "samples": int(x.shape[0]), "censored": int(cens.sum()), "ks_best": best,
               "ks_worst": worst, "domination_gap": float((Fx - FM).max())}
    rows = [(float(g), float(a), float(b)) for g, a, b in zip(grid, Fx, FM)]
    return Result(["t", "F_max_over_n", "F_Me"], rows, summary,
                  ["F_*: empirical CDFs at t; max over tau_n from annealed trees with root type n"],
                  plot={"x": grid, "series": {"max/n": 1 - Fx, "M_e": 1 - FM}})


def _walk_star_counts(weights, k, num, seed):
    from .env import EnvTree
    from .walk import run_excursions
    from .rng import substream
    env = EnvTree.star(weights)
    rng = substream(seed, 0x57A2, k)
    out = np.zeros((num, len(weights)), np.int64)
    for s in range(num):
        run_excursions(env, k, rng)
        out[s] = env.lt[1:1 + len(weights)]
    return out


def sc_nbm(cfg, law):
    from .ltgw import offspring_batch
    from .stats import chi_square_two_sample
    rows, ok = [], True
    for si, w in enumerate(cfg.stars):
        for k in cfg.k_values:
            a = _walk_star_counts(w, int(k), cfg.samples, cfg.seed + si)
            b = offspring_batch(int(k), w, cfg.samples, seed=(cfg.seed << 16) + 97 * si + int(k), method="nb")
            r = chi_square_two_sample(a, b)
            ok &= r.p_value > P_MIN
            rows.append((json.dumps(w), int(k), r.value, r.p_value))
    return Result(["weights", "k", "chi2", "p_value"], rows, {"all_pass": bool(ok)},
                  ["walk crossing counts vs negative multinomial sampler; pass when p > 0.001"], ok=ok)


def sc_tree_eq(cfg, law):
    from .stats import chi_square_two_sample
    jobs = [(law.to_dict(), cfg.seed, r, m, 1, cfg.max_steps, cfg.max_nodes) for r, m in enumerate(cfg.split())]
    w = run_replicas(_excursions, jobs)
    jobs = [(law.to_dict(), cfg.seed, r, m, 1, False, cfg.max_nodes) for r, m in enumerate(cfg.split())]
    t = run_replicas(_trees, jobs)
    a = np.column_stack([w[:, 4], w[:, 3]])
    b = np.column_stack([t[:, 2], t[:, 1]])
    r = chi_square_two_sample(a, b)
    ok = r.p_value > P_MIN
    return Result(["statistic", "value"], [("chi2", r.value), ("p_value", r.p_value)],
                  {"chi2": r.value, "p_value": r.p_value, "pass": ok},
                  ["joint law of (root children, Z1): walk n=1 vs tree k=1"], ok=ok)


def sc_spine(cfg, law):
    from .rw1d import sample_paths, tilt
    from .rng import substream
    from .spine import PijTable, spine_increments
    from .stats import chi_square_gof, ks_two_sample
    tab = PijTable(law)
    sums = []
    for i in range(1, cfg.i_max + 1):
        probs, tail = tab.row(i)
        sums.append((i, float(probs.sum()), tail))
    jobs = [(law.to_dict(), cfg.seed, r, m, cfg.max_steps, cfg.max_nodes) for r, m in enumerate(cfg.split())]
    d = run_replicas(_spine, jobs)
    ty = d[d[:, 1] == 0, 0].astype(np.int64)
    probs, _ = tab.row(1)
    J = int(ty.max())
    obs = np.bincount(ty, minlength=J + 1)[1:]
    exp = np.zeros(J)
    m = min(J, probs.shape[0])
    exp[:m] = probs[:m]
    exp[-1] += max(0.0, 1.0 - exp.sum())
    from .stats import pooled_categories
    cell = pooled_categories(exp * obs.sum())
    chi = chi_square_gof(np.bincount(cell, obs), np.bincount(cell, exp))
    inc = spine_increments(law, cfg.samples, 1, cfg.seed)
    ref = sample_paths(tilt(law, 1.0), 1, cfg.samples, substream(cfg.seed, 0x5D4))[:, 0]
    ks = ks_two_sample(inc, ref)
    row_ok = all(abs(s - 1) < 1e-6 for _, s, _ in sums)
    ok = row_ok and chi.p_value > P_MIN and ks.p_value > P_MIN
    summary = {"row_sums_ok": row_ok, "chi2": chi.value, "chi2_p": chi.p_value, "censored": int((d[:, 1] != 0).sum()),
               "ks": ks.value, "ks_p": ks.p_value}
    return Result(["i", "row_sum", "tail_bound"], sums, summary, ["row sums of p_ij over j"], ok=ok)


def sc_pij(cfg, law):
    from .spine import PijTable
    tab = PijTable(law)
    rows = []
    for i in range(1, cfg.i_max + 1):
        _, tail = tab.row(i)
        rows.extend((i, j, tab[i, j], tail) for j in range(1, cfg.j_max + 1))
    return Result(["i", "j", "p_ij", "row_tail_bound"], rows, {"i_max": cfg.i_max, "j_max": cfg.j_max},
                  ["p_ij: spine type-chain transition probability",
                   "row_tail_bound: bound on the row mass beyond the tabulated range"])


def sc_mto(cfg, law):
    from .rw1d import change_of_measure_check, default_boxes, many_to_one_check
    rows, ok = [], True
    kap = lawmod.solve_kappa(law).value
    for box in default_boxes():
        r = many_to_one_check(law, box, cfg.samples, cfg.seed)
        rows.append(("many-to-one", box.name, r.lhs, r.lhs_se, r.rhs, r.rhs_se, r.z))
        ok &= r.agrees()
        if math.isfinite(kap):
            c = change_of_measure_check(law, box, cfg.samples, cfg.seed)
            rows.append(("change-of-measure", box.name, c.lhs, c.lhs_se, c.rhs, c.rhs_se, c.z))
            ok &= c.agrees()
    return Result(["identity", "box", "lhs", "lhs_se", "rhs", "rhs_se", "z"], rows, {"all_within_4se": bool(ok)},
                  ["z: |lhs - rhs| / combined SE; pass when z <= 4"], ok=ok)


def sc_ladder(cfg, law):
    from .rw1d import ladder_renewal, tilt_kappa, NotNormalized
    try:
        tl = tilt_kappa(law)
    except NotNormalized as exc:
        raise ConfigError("law", str(exc)) from exc
    grid = np.linspace(0.0, cfg.grid_max, cfg.grid_points)
    est = ladder_renewal(tl, grid, cfg.samples, cfg.seed, max_steps=cfg.max_steps)
    rows = []
    for e in est.values():
        rows.extend(e.rows())
    summary = {k: {"limit": float(e.values[-1]), "se": float(e.se[-1])} for k, e in est.items()}
    return Result(["x", "estimate", "se", "kind"], rows, summary,
                  ["renewal functions of the kappa-tilted walk; descending kinds cut 1e-6 below the grid"])


HANDLERS = {"env-report": sc_env_report, "tail-w-m": sc_tail_w_m, "tail-maxl": sc_tail_maxl,
            "maxln-converge": sc_maxln, "nbm-check": sc_nbm, "tree-equivalence": sc_tree_eq,
            "spine-check": sc_spine, "pij-table": sc_pij, "mto-check": sc_mto, "ladder-report": sc_ladder}


# -- plotting ------------------------------------------------------------------

def _svg(fig, path):
    import matplotlib
    matplotlib.rcParams["svg.hashsalt"] = "btwalk"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})


def emit_plot(csv_path, out_path, fit: bool = True):
    """Log-log scatter of every numeric column against the first, with a fitted slope for the first series."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .stats import RangeEmpty, loglog_fit
    try:
        header, rows = read_csv(csv_path)
        data = np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(len(rows), len(header))
    except (ValueError, OSError) as exc:
        raise MalformedCSV(f"{csv_path}: {exc}") from exc
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(header[0])
    slope = None
    series = [i for i, h in enumerate(header[1:], 1) if not h.startswith(("n_", "at_risk"))]
    for j, i in enumerate(series):
        x, y = data[:, 0], data[:, i]
        m = (x > 0) & (y > 0)
        if not m.any():
            continue
        ax.plot(x[m], y[m], "o", ms=3, label=header[i])
        if fit and j == 0:
            try:
                slope, icpt, _ = loglog_fit(x[m], y[m])
                ax.plot(x[m], np.exp(icpt) * x[m] ** slope, "-", lw=1, label=f"slope {slope:.3f}")
            except RangeEmpty:
                pass
    if series and len(rows):
        ax.legend(fontsize=8)
    _svg(fig, out_path)
    plt.close(fig)
    return slope


# -- entry point -----------------------------------------------------------------

def run_scenario(cfg: ScenarioConfig, out_dir, plot=None) -> int:
    cfg.validate()
    law = cfg.load_law()
    res = HANDLERS[cfg.scenario](cfg, law)
    out = Path(out_dir)
    stem = cfg.scenario.replace("-", "_")
    if cfg.format == "csv":
        table = write_csv(out / f"{stem}.csv", res.header, res.rows, res.notes)
    else:
        table = write_json(out / f"{stem}.json", {"header": res.header, "rows": res.rows, "notes": res.notes})
    meta = {"scenario": cfg.scenario, "config": dataclasses.asdict(cfg), "ok": res.ok, **res.summary}
    write_json(out / f"{stem}.summary.json", meta)
    if plot:
        if res.plot is None:
            raise ConfigError("plot", f"{cfg.scenario} has no survival series to plot")
        names = list(res.plot["series"])
        cols = [res.plot["x"]] + [res.plot["series"][k] for k in names]
        tmp = write_csv(out / f"{stem}.plot.csv", ["x"] + names, list(zip(*[np.asarray(c, float).tolist() for c in cols])))
        emit_plot(tmp, plot)
    return 0 if res.ok else 2


def build_parser():
    p = argparse.ArgumentParser(prog="btwalk", description="Biased-walk-on-tree scenario runner")
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--config", help="JSON file with ScenarioConfig fields")
    p.add_argument("--law", help="law JSON path or A/B/C")
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicas", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--plot")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        d = {}
        if args.config:
            try:
                d = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError("config", str(exc)) from exc
            if not isinstance(d, dict):
                raise ConfigError("config", "top level must be an object")
        d["scenario"] = args.scenario
        for k in ("law", "seed", "replicas", "samples", "n", "format"):
            v = getattr(args, k)
            if v is not None:
                d[k] = v
        cfg = ScenarioConfig.from_mapping(d)
        code = run_scenario(cfg, args.out, args.plot)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    print(f"{args.scenario}: {'ok' if code == 0 else 'check failed'} -> {args.out}")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
