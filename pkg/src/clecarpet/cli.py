"""Command-line front end: ``clecarpet <subcommand> [options]``.

Every run writes ``manifest.json`` plus its artifacts into the output
directory (``--out``, else ``$CLECARPET_OUT``, else ``./clecarpet-out``) and
nowhere else.  Exit codes: 0 ok, 2 configuration error (JSON on stderr),
3 self-test failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ConfigError, __version__
from .carpet import Disconnected, SnapError, boundary_diameter, chem_dist, distance_field, rasterize_carpet, render_field, write_pgm
from .config import RunConfig, dump_config, load_config
from .manifest import RunManifest
from .pool import ordered_map
from .rng import RNG_ALGORITHM, child_rng, make_rng
from .soup import CUTOFF_NOTE, NoDomainLoop, RESTRICTION_NOTE, sample_ensemble, write_ensemble_text
from . import levy, stats

SUBCOMMANDS = ("sample", "carpet", "dist", "median", "report", "levy", "render", "selftest")
OUT_ENV = "CLECARPET_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_SELFTEST = 0, 2, 3

_NOTES = {
    "sample": [RESTRICTION_NOTE, CUTOFF_NOTE],
    "carpet": [RESTRICTION_NOTE, CUTOFF_NOTE, "carpet rasterized by cell centres; prime ends are not resolved"],
    "dist": [RESTRICTION_NOTE, CUTOFF_NOTE, "distances are epsilon-box counts on the raster"],
    "median": [RESTRICTION_NOTE, CUTOFF_NOTE, "finite-volume median replaces the half-plane median"],
    "report": [RESTRICTION_NOTE, CUTOFF_NOTE, "finite-volume median replaces the half-plane median"],
    "levy": ["tau is the first grid time t >= 1 with X_t - I_t <= eta"],
    "render": [RESTRICTION_NOTE, CUTOFF_NOTE],
    "selftest": [],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clecarpet", description="CLE carpet chemical-distance experiments")
    p.add_argument("--version", action="version", version=f"clecarpet {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML config file")
        s.add_argument("--set", action="append", default=[], metavar="JSON", help="JSON override object (repeatable)")
        s.add_argument("--manifest", help="replay the run recorded in this manifest.json")
        s.add_argument("--kappa", type=float, nargs="+")
        s.add_argument("--eps", type=float, nargs="+")
        s.add_argument("--grid", type=int)
        s.add_argument("--replicas", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--format", choices=("csv", "json"))
        if name == "levy":
            s.add_argument("--paths", type=int)
            s.add_argument("--horizon", type=float)
        if name == "dist":
            s.add_argument("--points", type=float, nargs="+", help="x_z y_z x_w y_w [...]")
        if name == "render":
            s.add_argument("--source", type=float, nargs=2)
    return p


def _flag_overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.format is not None:
        o["format"] = args.format
    if args.kappa is not None:
        o.setdefault("soup", {})["kappa"] = args.kappa[0]
        o.setdefault("levy", {})["kappa"] = list(args.kappa)
    if args.grid is not None:
        o.setdefault("carpet", {})["grid"] = args.grid
    if args.eps is not None:
        o.setdefault("carpet", {})["eps"] = list(args.eps)
        o.setdefault("render", {})["eps"] = args.eps[0]
    if args.replicas is not None:
        o.setdefault("stats", {})["replicas"] = args.replicas
    if getattr(args, "paths", None) is not None:
        o.setdefault("levy", {})["paths"] = args.paths
    if getattr(args, "horizon", None) is not None:
        o.setdefault("levy", {})["horizon"] = args.horizon
    if getattr(args, "points", None) is not None:
        if len(args.points) % 4:
            raise ConfigError("--points takes groups of four numbers")
        o.setdefault("dist", {})["points"] = np.reshape(args.points, (-1, 4)).tolist()
    if getattr(args, "source", None) is not None:
        o.setdefault("render", {})["source"] = list(args.source)
    return o


def resolve(args) -> tuple[RunConfig, RunManifest]:
    """Configuration and manifest for parsed arguments (fresh run or replay)."""
    if args.manifest:
        if args.config or args.set or _flag_overrides(args):
            raise ConfigError("--manifest replays a run; only --out and --threads may be given with it")
        try:
            man = RunManifest.load(args.manifest)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read manifest: {exc}") from exc
        if man.subcommand != args.command:
            raise ConfigError(f"manifest is for {man.subcommand!r}, not {args.command!r}")
        cfg = RunConfig.from_dict(man.config).validate()
        return cfg, man
    cfg = load_config(args.config, [*args.set, _flag_overrides(args)])
    notes = list(_NOTES[args.command]) + [f"rng: {RNG_ALGORITHM}"]
    man = RunManifest(master_seed=cfg.seed, subcommand=args.command, config=cfg.to_dict(), approximation_notes=notes)
    return cfg, man


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "clecarpet-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(out: Path, stem: str, rows: list, fmt: str) -> Path:
    path = out / f"{stem}.{fmt}"
    path.write_text(stats.write_rows(rows, fmt))
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not serializable: {type(x)}")


def _soup_base(cfg: RunConfig):
    return replace(cfg.soup, seed=cfg.seed)


def _ensemble_task(args):
    base, index = args
    ens, _ = stats.replica_ensemble(base, index)
    if ens is None:
        raise NoDomainLoop(f"replica {index} has no domain loop after 10 tries")
    return ens


def _ensembles(cfg: RunConfig, count: int, workers: int) -> list:
    base = _soup_base(cfg)
    return ordered_map(_ensemble_task, [(base, i) for i in range(count)], workers)


# -- subcommands ---------------------------------------------------------------

def cmd_sample(cfg, man, out, workers, args) -> int:
    for i, ens in enumerate(_ensembles(cfg, cfg.stats.replicas, workers)):
        ens.manifest = man
        write_ensemble_text(ens, out / f"ensemble_{i:03d}.txt")
    return EXIT_OK


def cmd_carpet(cfg, man, out, workers, args) -> int:
    for i, ens in enumerate(_ensembles(cfg, cfg.stats.replicas, workers)):
        write_pgm(rasterize_carpet(ens, cfg.carpet.grid), out / f"carpet_{i:03d}.pgm", man.hash)
    return EXIT_OK


def cmd_dist(cfg, man, out, workers, args) -> int:
    ens = _ensembles(cfg, 1, 1)[0]
    mask = rasterize_carpet(ens, cfg.carpet.grid)
    pts = np.asarray(cfg.dist.points, dtype=float).reshape(-1, 4)
    if len(pts) == 0:
        cells = stats.connected_pairs([(mask, e) for e in cfg.eps_list], cfg.dist.count, make_rng(cfg.seed, 1))[0]
        pts = np.hstack([mask.cell_center(cells[:, 0], cells[:, 1]), mask.cell_center(cells[:, 2], cells[:, 3])])
    rows = []
    for k, (xz, yz, xw, yw) in enumerate(pts):
        for e in cfg.eps_list:
            row = {"pair": k, "x_z": xz, "y_z": yz, "x_w": xw, "y_w": yw, "eps": e}
            try:
                c = chem_dist(mask, e, (xz, yz), (xw, yw), refine=True)
                row.update(boxes=c.boxes, area_estimate=c.area_estimate, exact_area=c.exact_area, status="ok")
            except (Disconnected, SnapError) as exc:
                row.update(boxes=-1, area_estimate=math.inf, exact_area=math.inf, status=type(exc).__name__)
            row["manifest_hash"] = man.hash
            rows.append(row)
    _emit(out, "dist", rows, cfg.format)
    return EXIT_OK


def cmd_median(cfg, man, out, workers, args) -> int:
    table = stats.estimate_quantiles(
        cfg.soup.kappa, cfg.eps_list, cfg.stats.p_list, cfg.stats.replicas, _soup_base(cfg),
        n=cfg.carpet.grid, net_count=cfg.carpet.net_count, workers=workers,
    )
    table.manifest_hash = man.hash
    if cfg.format == "json":
        _write_json(out / "quantiles.json", table.to_dict())
    else:
        _emit(out, "quantiles", table.rows(), "csv")
    return EXIT_OK


def _mask_task(args):
    base, index, n, eps_list, net_count = args
    for j in range(10):
        try:
            mask = rasterize_carpet(sample_ensemble(stats.replica_config(base, index, j)), n)
            return mask, [boundary_diameter(mask, e, net_count) for e in eps_list]
        except (NoDomainLoop, Disconnected):
            continue
    raise NoDomainLoop(f"replica {index} failed 10 tries")


def cmd_report(cfg, man, out, workers, args) -> int:
    eps = cfg.eps_list
    if len(eps) < 2:
        raise ConfigError("report needs at least two eps values")
    R = cfg.stats.replicas
    if R < 2:
        raise ConfigError("report needs at least two replicas")
    base = _soup_base(cfg)
    res = ordered_map(_mask_task, [(base, i, cfg.carpet.grid, eps, cfg.carpet.net_count) for i in range(R)], workers)
    masks = [m for m, _ in res]
    table = stats.quantile_table_from_diameters(cfg.soup.kappa, eps, sorted({*cfg.stats.p_list, 0.5}),
                                                [d for _, d in res], seed=cfg.seed)
    comp = stats.comparability_report(table, cfg.stats.m0, cfg.stats.band)
    m_hat = table.m_hat
    e_lo, e_hi = eps[0], eps[1]
    rng = make_rng(cfg.seed, 2)
    samples, floors_lo, floors_hi, defects, dns = [], [], [], [], []
    for k, mask in enumerate(masks):
        diam = float(np.ptp(np.argwhere(mask.inside), axis=0).max() * mask.h)
        P_lo, P_hi = stats.connected_pairs([(mask, e_lo), (mask, e_hi)], cfg.stats.pairs, rng)
        s_lo = stats.normalized_metric_sample(mask, e_lo, m_hat[0], 0, None, pairs=P_lo)
        s_hi = stats.normalized_metric_sample(mask, e_hi, m_hat[1], 0, None, pairs=P_hi)
        samples.append(s_lo)
        try:
            floors_lo.append(stats.posdef_floor(s_lo, 0.1 * diam))
            floors_hi.append(stats.posdef_floor(s_hi, 0.1 * diam))
        except ConfigError:
            pass
        defects.append(stats.geodesic_midpoint_defect(mask, e_lo, m_hat[0], P_lo[: min(50, len(P_lo))]).median)
        dns.append(stats.dn_distance(s_hi, s_lo))
    try:
        hf = stats.holder_fit(samples)
        holder = {"slope": hf.slope, "ci_low": hf.ci[0], "ci_high": hf.ci[1], "pairs": hf.pairs}
    except (ConfigError, ValueError) as exc:
        holder = {"slope": math.nan, "ci_low": math.nan, "ci_high": math.nan, "pairs": 0, "error": str(exc)}
    f_lo = min(floors_lo) if floors_lo else math.nan
    f_hi = min(floors_hi) if floors_hi else math.nan
    rows = [
        {"statistic": "comparability_spread", "value": comp.max_spread, "passed": comp.passed},
        {"statistic": "monotone_in_p", "value": float(table.monotone_in_p()), "passed": table.monotone_in_p()},
        {"statistic": "median_loglog_slope", "value": stats.median_loglog_slope(table), "passed": True},
        {"statistic": "holder_slope", "value": holder["slope"], "passed": bool(holder["ci_low"] > 0)},
        {"statistic": f"posdef_floor_eps_{e_hi:.6g}", "value": f_hi, "passed": bool(f_hi > 0)},
        {"statistic": f"posdef_floor_eps_{e_lo:.6g}", "value": f_lo, "passed": bool(f_lo > 0)},
        {"statistic": "posdef_floor_ratio", "value": f_lo / f_hi if f_hi > 0 else math.nan,
         "passed": bool(f_hi > 0 and f_lo >= 0.5 * f_hi)},
        {"statistic": "midpoint_defect_median", "value": float(np.median(defects)), "passed": True},
        {"statistic": "dn_distance_mean", "value": float(np.mean(dns)), "passed": bool(np.all(np.isfinite(dns)))},
    ]
    for r in rows:
        r["manifest_hash"] = man.hash
    if cfg.format == "json":
        _write_json(out / "report.json", {
            "rows": rows, "comparability": comp.rows(), "comparability_diagnostics": comp.diagnostics,
            "holder": holder, "quantiles": table.rows(), "manifest_hash": man.hash,
        })
    else:
        _emit(out, "report", rows, "csv")
        _emit(out, "comparability", [dict(r, manifest_hash=man.hash) for r in comp.rows()], "csv")
    return EXIT_OK


def cmd_levy(cfg, man, out, workers, args) -> int:
    L = cfg.levy
    rows = []
    for i, kappa in enumerate(L.kappa):
        p = levy.params_from_kappa(kappa)
        rng = make_rng(cfg.seed, 3, i)
        est, se = levy.positivity_estimate(p, L.positivity_draws, child_rng(rng, 0))
        row = {
            "kappa": kappa, "alpha": p.alpha, "u": p.u, "skew_beta": p.skew_beta, "positivity": p.positivity,
            "positivity_estimate": est, "positivity_se": se,
            "tau_slope_single": math.nan, "tau_slope_pair": math.nan, "tau_slope_conditioned": math.nan,
            "jump_sum_slope": math.nan, "inf_log_slope": math.nan, "top_decade_ratio": math.nan,
        }
        skipped = []
        try:
            tau = levy.tau_statistics(p, L.paths, L.horizon, child_rng(rng, 1), dt=L.dt, workers=workers)
            row.update(tau_slope_single=tau.slope_single, tau_slope_pair=tau.slope_pair,
                       tau_slope_conditioned=tau.slope_conditioned)
        except ConfigError as exc:
            skipped.append(f"tau: {exc}")
        try:
            _, _, slope = levy.jump_sum_means(p, L.n_list, L.paths, child_rng(rng, 2), cutoff=L.cutoff,
                                              workers=workers)
            row["jump_sum_slope"] = slope
        except ConfigError as exc:
            skipped.append(f"jumps: {exc}")
        Ms = [m for m in L.M_list if m <= L.horizon]
        try:
            mom = levy.infimum_moments(p, Ms, L.paths, child_rng(rng, 3), dt=L.dt, workers=workers)
            row.update(inf_log_slope=mom.log_slope, top_decade_ratio=mom.decade_ratio)
        except ConfigError as exc:
            skipped.append(f"moments: {exc}")
        row["skipped"] = "; ".join(skipped)
        row["manifest_hash"] = man.hash
        rows.append(row)
    _emit(out, "levy", rows, cfg.format)
    return EXIT_OK


def cmd_render(cfg, man, out, workers, args) -> int:
    ens = _ensembles(cfg, 1, 1)[0]
    mask = rasterize_carpet(ens, cfg.carpet.grid)
    # a source inside a hole moves to the nearest carpet cell
    r, c = mask.snap(cfg.render.source, 4 * cfg.soup.domain_radius)
    field_ = distance_field(mask, cfg.render_eps, mask.cell_center(r, c))
    render_field(mask, field_, out / "field.png", man.hash)
    return EXIT_OK


def cmd_selftest(cfg, man, out, workers, args) -> int:
    from .checks import run_selftest

    results = run_selftest(seed=cfg.seed)
    rows = [{"check": name, "passed": ok, "detail": detail, "manifest_hash": man.hash} for name, ok, detail in results]
    _emit(out, "selftest", rows, cfg.format)
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']}: {r['detail']}")
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_SELFTEST


_COMMANDS = {
    "sample": cmd_sample, "carpet": cmd_carpet, "dist": cmd_dist, "median": cmd_median,
    "report": cmd_report, "levy": cmd_levy, "render": cmd_render, "selftest": cmd_selftest,
}


def _fail(kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}, sort_keys=True) + "\n")
    return EXIT_CONFIG


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg, man = resolve(args)
        out = _out_dir(args)
    except ConfigError as exc:
        return _fail("config", str(exc))
    (out / "manifest.json").write_text(man.to_json())
    (out / "config.toml").write_text(dump_config(cfg))
    try:
        return _COMMANDS[args.command](cfg, man, out, args.threads, args)
    except (ConfigError, SnapError) as exc:
        return _fail("config", str(exc))
    except (NoDomainLoop, Disconnected) as exc:
        return _fail("sampling", str(exc))


if __name__ == "__main__":
    sys.exit(main())
