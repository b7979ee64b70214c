"""Command-line driver.

    guidecache <subcommand> [--config PATH] [--seed N] [--workers N] [--out DIR] [key=value ...]

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
Artifacts go to ``<out>/<name>/``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .cache import (
    CachePolicy,
    RankConfig,
    RankObjective,
    bank_from_file,
    bank_to_file,
    collect_calibration_data,
    fit_bank,
    optimize_ranks,
    uniform_configs,
)
from .config import ExperimentConfig, load_config
from .diffusion import (
    ConfigurationError,
    GuidanceSchedule,
    NumericalDivergenceError,
    build_noise_schedule,
    make_grid,
    sample,
)
from .evo import make_probes, optimize_schedule
from .experiments import Testbed, bench, repro_fig2, sparse_schedule
from .metrics import DistReport, assemble_report, dump_report, histogram_rows, wasserstein_to_density, write_histogram_csv
from .toy import BlockNet, GaussianMixture, MixtureDenoiser, mixture_guided_target

log = logging.getLogger("guidecache")


# -- helpers -----------------------------------------------------------------

def _noise(cfg: ExperimentConfig):
    n = cfg.noise
    return build_noise_schedule(n.kind, n.T_max, n.params)


def _mixture(cfg: ExperimentConfig) -> GaussianMixture:
    m = cfg.model.mixture
    try:
        return GaussianMixture(m.weights, m.means, m.variances, m.labels)
    except ValueError as err:
        raise ConfigurationError(f"model.mixture: {err}") from err


def _model(cfg: ExperimentConfig, sched):
    if cfg.model.type == "mixture":
        return MixtureDenoiser(_mixture(cfg), sched)
    if cfg.model.type == "blocknet":
        b = cfg.model.blocknet
        return BlockNet.build(sched, D=b.D, d=b.d, N=b.N, n_classes=b.n_classes, hidden=b.hidden, seed=b.seed,
                              embed_scale=b.embed_scale, readout_scale=b.readout_scale, zero_blocks=b.zero_blocks)
    raise ConfigurationError(f"model.type must be 'mixture' or 'blocknet', got {cfg.model.type!r}")


def _dim(cfg: ExperimentConfig) -> int:
    return _mixture(cfg).dim if cfg.model.type == "mixture" else cfg.model.blocknet.D


def _classes(cfg: ExperimentConfig) -> list[int]:
    if cfg.model.type == "mixture":
        return _mixture(cfg).classes if cfg.model.cond is not None else []
    return list(range(cfg.model.blocknet.n_classes))


def _blocknet(cfg: ExperimentConfig, sched, cmd: str) -> BlockNet:
    if cfg.model.type != "blocknet":
        raise ConfigurationError(f"{cmd} needs model.type=blocknet")
    return _model(cfg, sched)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _prepare(cfg: ExperimentConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config_echo.json", cfg.to_dict())
    return out


def _resolve_schedule(cfg: ExperimentConfig, path: str | None, grid) -> GuidanceSchedule:
    """--schedule, else a schedule.json already in the output directory,
    else the fixed sparse schedule from the cache section."""
    candidates = [Path(path)] if path else [cfg.out_dir / "schedule.json"]
    for p in candidates:
        if p.exists():
            gs = GuidanceSchedule.from_dict(json.loads(p.read_text()))
            if len(gs) != grid.T:
                raise ConfigurationError(f"schedule {p} has {len(gs)} steps but grid.T is {grid.T}")
            return gs
        if path:
            raise ConfigurationError(f"schedule file {p} not found")
    c, g = cfg.cache, cfg.guidance
    if any(not 0 <= i < grid.T for i in c.active):
        raise ConfigurationError("cache.active indices must lie in [0, grid.T)")
    return sparse_schedule(grid.T, c.active, c.w_active, g.tau_value, g.w_max)


def _testbed(cfg: ExperimentConfig, sched, net: BlockNet, w_star, grid) -> Testbed:
    classes = _classes(cfg)
    return Testbed(net, sched, grid, w_star,
                   make_probes(cfg.cache.n_calib, net.W_x.shape[1], classes, 1000 + cfg.seed),
                   make_probes(cfg.ranks.n_eval, net.W_x.shape[1], classes, 2000 + cfg.seed),
                   CachePolicy(cfg.cache.refresh_period, cfg.cache.guidance_rule))


def _rank_bounds(cfg: ExperimentConfig, d: int) -> tuple[int, int, int]:
    r = cfg.ranks
    r_max = d if r.r_max is None else r.r_max
    budget = r.K * r_max * 3 // 4 if r.budget is None else r.budget
    if not 1 <= r.r_min <= r_max or budget < r.K * r.r_min:
        raise ConfigurationError(f"infeasible rank settings r_min={r.r_min}, r_max={r_max}, budget={budget}")
    return r.r_min, r_max, budget


# -- subcommands ---------------------------------------------------------------

def cmd_sample(cfg: ExperimentConfig, args) -> dict:
    out = _prepare(cfg)
    sched = _noise(cfg)
    model = _model(cfg, sched)
    s = cfg.sample
    grid = make_grid(s.steps, sched.T_max)
    w = cfg.guidance.w_const if s.w is None else s.w
    if s.schedule:
        gs = GuidanceSchedule.from_dict(json.loads(Path(s.schedule).read_text()))
        if len(gs) != s.steps:
            raise ConfigurationError(f"schedule has {len(gs)} steps, sample.steps is {s.steps}")
    else:
        gs = GuidanceSchedule.constant(s.steps, w, min(cfg.guidance.tau_value, w), max(w, cfg.guidance.w_max))
    cond = cfg.model.cond
    x_T = np.random.default_rng(cfg.seed).standard_normal((s.n_samples, _dim(cfg)))
    traj = sample(x_T, grid, gs, model, sched, seed=cfg.seed, cond=cond, keep_states=False)
    one = sample(x_T[:1], grid, gs, model, sched, seed=cfg.seed, cond=cond)
    one.to_csv(out / "trajectory.csv")
    dist = DistReport(sample_count=s.n_samples)
    artifacts = {"trajectory": "trajectory.csv"}
    if cfg.model.type == "mixture" and _dim(cfg) == 1 and cond is not None:
        gm = _mixture(cfg)
        target = mixture_guided_target(gm.select(cond), gm, w)
        dist.wasserstein1 = wasserstein_to_density(traj.x0, target.x, target.p)
    if _dim(cfg) == 1:
        write_histogram_csv(out / "samples_hist.csv", histogram_rows(traj.x0, 80))
        artifacts["histogram"] = "samples_hist.csv"
    report = assemble_report([traj], [traj.ledger], dist, gs, None, cfg.to_dict(), artifacts,
                             {"command": "sample", "forward_passes_per_sample": traj.ledger.total_passes})
    dump_report(report, out / "report.json")
    return report


def cmd_optimize_schedule(cfg: ExperimentConfig, args) -> dict:
    out = _prepare(cfg)
    sched = _noise(cfg)
    model = _model(cfg, sched)
    ecfg = cfg.evo_config()
    classes = _classes(cfg)
    if cfg.model.type == "mixture" and cfg.model.cond is not None:
        classes = [cfg.model.cond]
    res = optimize_schedule(ecfg, model, sched, D=_dim(cfg), classes=classes, workers=cfg.n_workers,
                            callback=lambda rec: log.info("generation %(g)d best %(best_fitness).6g", rec))
    grid = make_grid(ecfg.T, sched.T_max)
    _write_json(out / "schedule.json", res.schedule.to_dict(grid))
    res.write_log(out / "search_log.jsonl")
    report = assemble_report(None, None, DistReport(mse_to_reference=res.state.best_loss), res.schedule, None,
                             cfg.to_dict(), {"schedule": "schedule.json", "search_log": "search_log.jsonl"},
                             {"command": "optimize-schedule", "lam": res.lam, "source": res.source,
                              "cfg_steps": res.schedule.cfg_steps, "generations": len(res.log)})
    dump_report(report, out / "report.json")
    return report


def cmd_fit_calibration(cfg: ExperimentConfig, args) -> dict:
    out = _prepare(cfg)
    sched = _noise(cfg)
    net = _blocknet(cfg, sched, "fit-calibration")
    grid = make_grid(cfg.grid.T, sched.T_max)
    w_star = _resolve_schedule(cfg, args.schedule, grid)
    tb = _testbed(cfg, sched, net, w_star, grid)
    inc = collect_calibration_data(net, tb.calibration_runs(), tb.policy, sched)
    bank = fit_bank(inc, cfg.cache.ridge)
    for lc in bank.layers:
        lc.fit_stats["warnings"] = list(inc.warnings)
    bank_to_file(bank, out / "bank.json")
    layers = [dict(layer=i, **lc.fit_stats) for i, lc in enumerate(bank.layers)]
    report = assemble_report(None, None, None, w_star, None, cfg.to_dict(), {"bank": "bank.json"},
                             {"command": "fit-calibration", "layers": layers})
    dump_report(report, out / "report.json")
    return report


def cmd_optimize_ranks(cfg: ExperimentConfig, args) -> dict:
    out = _prepare(cfg)
    sched = _noise(cfg)
    net = _blocknet(cfg, sched, "optimize-ranks")
    grid = make_grid(cfg.grid.T, sched.T_max)
    w_star = _resolve_schedule(cfg, args.schedule, grid)
    bank_path = Path(args.bank) if args.bank else out / "bank.json"
    if not bank_path.exists():
        raise ConfigurationError(f"calibration bank {bank_path} not found; run fit-calibration first")
    bank = bank_from_file(bank_path)
    tb = _testbed(cfg, sched, net, w_star, grid)
    r_min, r_max, budget = _rank_bounds(cfg, net.d)
    K = cfg.ranks.K
    if not 1 <= K <= net.N:
        raise ConfigurationError(f"ranks.K must lie in [1, {net.N}]")
    target = None
    if cfg.ranks.target_weight > 0:
        raise ConfigurationError("ranks.target_weight needs an analytic target; BlockNet has none")
    obj = RankObjective(net, bank, w_star, tb.eval_set, sched, grid, tb.policy, target, cfg.ranks.target_weight)
    res = optimize_ranks(obj, K, r_min, r_max, budget, net.N, max_sweeps=cfg.ranks.max_sweeps)
    uniform = {str(c.ranks[0]): obj(c) for c in uniform_configs(K, r_min, r_max, budget, net.N)}
    doc = dict(res.config.to_dict(), objective=res.objective, accepted=res.accepted, sweeps=res.sweeps,
               non_unimodal_regions=res.non_unimodal, uniform_objectives=uniform, n_evals=obj.n_evals)
    _write_json(out / "ranks.json", doc)
    report = assemble_report(None, None, DistReport(mse_to_reference=res.objective), w_star, res.config,
                             cfg.to_dict(), {"ranks": "ranks.json"}, {"command": "optimize-ranks"})
    dump_report(report, out / "report.json")
    return report


def cmd_bench(cfg: ExperimentConfig, args) -> dict:
    out = _prepare(cfg)
    sched = _noise(cfg)
    net = _blocknet(cfg, sched, "bench")
    grid = make_grid(cfg.grid.T, sched.T_max)
    w_star = _resolve_schedule(cfg, args.schedule, grid)
    tb = _testbed(cfg, sched, net, w_star, grid)
    bank_path = Path(args.bank) if args.bank else out / "bank.json"
    bank = bank_from_file(bank_path) if bank_path.exists() else None
    ranks_path = Path(args.ranks) if args.ranks else out / "ranks.json"
    rank_cfg = RankConfig.from_dict(json.loads(ranks_path.read_text())) if ranks_path.exists() else None
    rows = bench(tb, bank, rank_cfg, cfg.guidance.w_const)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].to_dict()))
        writer.writeheader()
        for r in rows:
            writer.writerow(r.to_dict())
    report = assemble_report(None, None, None, w_star, rank_cfg, cfg.to_dict(), {"bench": "bench.csv"},
                             {"command": "bench", "rows": [r.to_dict() for r in rows],
                              "cache_enabled": bank is not None})
    dump_report(report, out / "report.json")
    return report


def cmd_repro_fig2(cfg: ExperimentConfig, args) -> dict:
    out = _prepare(cfg)
    sched = _noise(cfg)
    if cfg.model.type != "mixture" or cfg.model.cond is None:
        raise ConfigurationError("repro-fig2 needs a conditional mixture model")
    ecfg = cfg.evo_config()
    f = cfg.fig2
    res = repro_fig2(ecfg, _mixture(cfg), cfg.model.cond, sched, f.n_samples, f.n_random, f.T_const,
                     cfg.seed, cfg.n_workers)
    grid = res.grid_sparse
    _write_json(out / "schedule.json", res.search.schedule.to_dict(grid))
    res.search.write_log(out / "search_log.jsonl")
    artifacts = {"schedule": "schedule.json", "search_log": "search_log.jsonl", "w1_table": "w1_table.csv"}
    for name, rows in res.histograms().items():
        fn = f"hist_{name}.csv"
        write_histogram_csv(out / fn, rows)
        artifacts[f"hist_{name}"] = fn
    table = res.table()
    with open(out / "w1_table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pipeline", "w1", "forward_passes", "cfg_steps"])
        for row in table:
            writer.writerow([row["pipeline"], row["w1"], row["forward_passes"], row["cfg_steps"]])
    p = res.panels
    extra = {
        "command": "repro-fig2",
        "table": table,
        "pass_counts": [row["forward_passes"] for row in table],
        "checks": {
            "constant_w1_below_0.05": p["constant-cfg"].w1 <= 0.05,
            "optimized_within_1.5x": p["optimized-sparse"].w1 <= 1.5 * p["constant-cfg"].w1,
            "optimized_active_le_8": res.search.schedule.cfg_steps <= 8,
            "cond_only_ge_2x": p["conditional-only"].w1 >= 2 * p["optimized-sparse"].w1,
            "random_median_ge_2x": res.random_median_w1 >= 2 * p["optimized-sparse"].w1,
        },
    }
    ledgers = [pp.ledger for pp in p.values()] + [pp.ledger for pp in res.random_panels]
    report = assemble_report(list(p.values()) + res.random_panels, ledgers,
                             DistReport(wasserstein1=p["optimized-sparse"].w1, sample_count=f.n_samples),
                             res.search.schedule, None, cfg.to_dict(), artifacts, extra)
    dump_report(report, out / "report.json")
    return report


COMMANDS = {
    "sample": (cmd_sample, None),
    "optimize-schedule": (cmd_optimize_schedule, None),
    "fit-calibration": (cmd_fit_calibration, None),
    "optimize-ranks": (cmd_optimize_ranks, None),
    "repro-fig2": (cmd_repro_fig2, "fig2"),
    "bench": (cmd_bench, None),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidecache", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", help="output root; artifacts go to OUT/<name>/")
        p.add_argument("-v", "--verbose", action="store_true")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides")
        if name == "sample":
            p.add_argument("--steps", type=int, help="sampling steps (sample.steps)")
        if name in ("fit-calibration", "optimize-ranks", "bench"):
            p.add_argument("--schedule", help="schedule.json from optimize-schedule")
        if name in ("optimize-ranks", "bench"):
            p.add_argument("--bank", help="bank.json from fit-calibration")
        if name == "bench":
            p.add_argument("--ranks", help="ranks.json from optimize-ranks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    fn, preset = COMMANDS[args.command]
    overrides = list(args.overrides)
    for flag, key in (("seed", "seed"), ("workers", "workers"), ("out", "out"), ("steps", "sample.steps")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    try:
        cfg = load_config(args.config, overrides, preset=preset)
        t0 = time.perf_counter()
        fn(cfg, args)
        log.info("%s finished in %.1f s; artifacts in %s", args.command, time.perf_counter() - t0, cfg.out_dir)
    except ConfigurationError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NumericalDivergenceError as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
