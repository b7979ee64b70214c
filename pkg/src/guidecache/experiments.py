"""End-to-end pipelines: the four-panel sparse-guidance comparison on a 1D
mixture, the BlockNet caching testbed and the compute benchmark."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cache import (
    CachedPredictor,
    CachePolicy,
    CalibrationBank,
    RankConfig,
    SamplingRun,
    collect_calibration_data,
    fit_bank,
)
from .diffusion import GuidanceSchedule, NoiseSchedule, TimestepGrid, build_noise_schedule, make_grid, sample
from .evo import EvoConfig, Probes, SearchResult, make_probes, optimize_schedule, reference_outputs
from .metrics import PassLedger, histogram_rows, merge_ledgers, wasserstein_to_density
from .toy import BlockNet, GaussianMixture, GridDensity, MixtureDenoiser, mixture_guided_target

# Two overlapping equal-variance components. With equal variances the CFG
# sampler converges to the tilted density p_u (p_c / p_u)^w, so the tilt is a
# valid analytic target.
FIG2_MIXTURE = dict(weights=[0.5, 0.5], means=[[-0.5], [0.5]], variances=[1.5, 1.5], labels=[0, 1])
FIG2_COND = 1


def fig2_mixture() -> GaussianMixture:
    return GaussianMixture(**FIG2_MIXTURE)


def fig2_evo_config(seed: int = 0) -> EvoConfig:
    # tau = 1 makes thresholding continuous: CFG at w = 1 is the conditional
    # prediction, so dropping a step below tau never jumps the update.
    return EvoConfig(P=32, G=100, sigma0=2.0, eta=1.0, lam=0.02, tau=1.0, w_max=8.0,
                     w_const=1.5, w_init=1.5, T=50, T_ref=1000, n_probes=128, seed=seed, max_active=8)


@dataclass
class Panel:
    name: str
    samples: np.ndarray
    w1: float
    passes: int
    cfg_steps: int
    schedule: GuidanceSchedule
    ledger: PassLedger


def run_panel(name, x_T, grid, gsched, model, sched, cond, target: GridDensity) -> Panel:
    traj = sample(x_T, grid, gsched, model, sched, cond=cond, keep_states=False)
    x0 = traj.x0
    return Panel(name, x0, wasserstein_to_density(x0, target.x, target.p), traj.ledger.total_passes,
                 traj.ledger.uncond_passes, gsched, traj.ledger)


def random_sparse_schedules(n: int, T: int, k: int, w: float, tau: float, w_max: float, rng) -> list[GuidanceSchedule]:
    out = []
    for _ in range(n):
        sw = np.zeros(T)
        sw[rng.choice(T, size=k, replace=False)] = w
        out.append(GuidanceSchedule(sw, tau, w_max))
    return out


@dataclass
class Fig2Result:
    target: GridDensity
    panels: dict[str, Panel]
    random_panels: list[Panel]
    search: SearchResult
    grid_sparse: TimestepGrid

    @property
    def random_median_w1(self) -> float:
        return float(np.median([p.w1 for p in self.random_panels]))

    def table(self) -> list[dict]:
        rows = [{"pipeline": p.name, "w1": p.w1, "forward_passes": p.passes, "cfg_steps": p.cfg_steps}
                for p in self.panels.values()]
        rand = self.random_panels
        rows.insert(2, {"pipeline": "random-sparse", "w1": self.random_median_w1,
                        "forward_passes": int(np.median([p.passes for p in rand])),
                        "cfg_steps": int(np.median([p.cfg_steps for p in rand])),
                        "w1_all": [p.w1 for p in rand]})
        return rows

    def histograms(self, bins: int = 80) -> dict[str, list]:
        lo, hi = float(self.target.x[0]), float(self.target.x[-1])
        span = max(abs(lo), abs(hi)) / 2
        rng_ = (-span, span)
        out = {name: histogram_rows(p.samples, bins, rng_) for name, p in self.panels.items()}
        out["random-sparse"] = histogram_rows(np.concatenate([p.samples for p in self.random_panels]), bins, rng_)
        dens = np.interp(0.5 * (np.linspace(*rng_, bins + 1)[1:] + np.linspace(*rng_, bins + 1)[:-1]),
                         self.target.x, self.target.p)
        edges = np.linspace(*rng_, bins + 1)
        out["target"] = [(float(edges[i]), float(edges[i + 1]), float(dens[i])) for i in range(bins)]
        return out


def repro_fig2(evo_cfg: EvoConfig | None = None, gm: GaussianMixture | None = None, cond: int = FIG2_COND,
               sched: NoiseSchedule | None = None, n_samples: int = 10_000, n_random: int = 10,
               T_const: int = 1000, seed: int = 0, workers: int = 1, callback=None) -> Fig2Result:
    """Constant CFG over T_const steps against three T-step pipelines:
    conditional only, random sparse guidance and searched sparse guidance.

    Random schedules use the same number of active steps as the searched one
    (``max_active``, else its realized count) at scale w_const.
    """
    cfg = evo_cfg or fig2_evo_config(seed)
    gm = gm or fig2_mixture()
    sched = sched or build_noise_schedule("linear-beta", 1000)
    model = MixtureDenoiser(gm, sched)
    target = mixture_guided_target(gm.select(cond), gm, cfg.w_const)
    rng = np.random.default_rng(seed)
    x_T = rng.standard_normal((n_samples, gm.dim))

    probes = make_probes(cfg.n_probes, gm.dim, [cond], cfg.seed + 1)
    search = optimize_schedule(cfg, model, sched, probes=probes, workers=workers, callback=callback)

    g_const = make_grid(T_const, sched.T_max)
    g_sparse = make_grid(cfg.T, sched.T_max)
    panels = {
        "constant-cfg": run_panel("constant-cfg", x_T, g_const, GuidanceSchedule.constant(T_const, cfg.w_const),
                                  model, sched, cond, target),
        "conditional-only": run_panel("conditional-only", x_T, g_sparse,
                                      GuidanceSchedule(np.zeros(cfg.T), cfg.tau, cfg.w_max), model, sched, cond, target),
        "optimized-sparse": run_panel("optimized-sparse", x_T, g_sparse, search.schedule, model, sched, cond, target),
    }
    k = cfg.max_active if cfg.max_active is not None else search.schedule.cfg_steps
    w_rand = max(cfg.w_const, cfg.tau)
    randoms = [run_panel(f"random-sparse-{i}", x_T, g_sparse, s, model, sched, cond, target)
               for i, s in enumerate(random_sparse_schedules(n_random, cfg.T, k, w_rand, cfg.tau, cfg.w_max, rng))]
    return Fig2Result(target, panels, randoms, search, g_sparse)


# -- BlockNet caching testbed ---------------------------------------------

TESTBED_ACTIVE = (2, 6, 11, 17, 24, 31, 39, 46)


@dataclass
class Testbed:
    net: BlockNet
    sched: NoiseSchedule
    grid: TimestepGrid
    w_star: GuidanceSchedule
    calib: Probes
    eval_set: Probes
    policy: CachePolicy = field(default_factory=CachePolicy)

    def calibration_runs(self) -> list[SamplingRun]:
        return [SamplingRun(self.calib.x_T, self.grid, self.w_star, self.calib.cond)]


def sparse_schedule(T: int, active, w: float, tau: float, w_max: float) -> GuidanceSchedule:
    sw = np.zeros(T)
    sw[list(active)] = w
    return GuidanceSchedule(sw, tau, w_max)


def blocknet_testbed(seed: int = 0, N: int = 8, d: int = 8, embed_scale: float = 0.3, T: int = 50,
                     n_calib: int = 256, n_eval: int = 64, active=TESTBED_ACTIVE, w: float = 2.0,
                     tau: float = 1.0, w_max: float = 3.0, refresh_period: int = 2,
                     sched: NoiseSchedule | None = None) -> Testbed:
    """A 1D, 2-class BlockNet with a fixed 8-of-50 guidance schedule.

    The small embedding scale keeps the tanh blocks mildly nonlinear, so a
    linear calibration of feature increments is accurate at full rank while
    truncation still costs quality.
    """
    sched = sched or build_noise_schedule("linear-beta", 1000)
    net = BlockNet.build(sched, D=1, d=d, N=N, n_classes=2, seed=seed, embed_scale=embed_scale)
    return Testbed(
        net, sched, make_grid(T, sched.T_max), sparse_schedule(T, active, w, tau, w_max),
        make_probes(n_calib, 1, [0, 1], 1000 + seed), make_probes(n_eval, 1, [0, 1], 2000 + seed),
        CachePolicy(refresh_period),
    )


def calibrate(tb: Testbed, ridge: float = 1e-6) -> CalibrationBank:
    inc = collect_calibration_data(tb.net, tb.calibration_runs(), tb.policy, tb.sched)
    bank = fit_bank(inc, ridge)
    for lc in bank.layers:
        lc.fit_stats["warnings"] = list(inc.warnings)
    return bank


# -- benchmark -------------------------------------------------------------

@dataclass
class BenchRow:
    name: str
    total_passes: int
    cfg_steps: int
    mac_estimate: int
    cache_fallbacks: int
    calibrated_blocks: int
    compute_fraction: float
    mse_to_full: float
    pass_identity: bool
    mac_additive: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def bench(tb: Testbed, bank: CalibrationBank | None, rank_cfg: RankConfig | None, w_const: float = 1.5,
          probes: Probes | None = None) -> list[BenchRow]:
    """Constant-CFG without caching versus the sparse schedule with and
    without calibrated caching, on the same noise."""
    probes = probes or tb.eval_set
    T = tb.grid.T
    runs = [
        ("constant-cfg", GuidanceSchedule.constant(T, w_const), tb.net),
        ("sparse", tb.w_star, tb.net),
    ]
    if bank is not None:
        runs.append(("sparse+cache", tb.w_star, CachedPredictor(tb.net, bank, tb.policy, rank_cfg)))
    rows = []
    base_macs = None
    full_sparse = None
    for name, gs, model in runs:
        traj = sample(probes.x_T, tb.grid, gs, model, tb.sched, cond=probes.cond, keep_states=False)
        led = traj.ledger
        if base_macs is None:
            base_macs = led.mac_estimate
        if name == "sparse":
            full_sparse = traj.x0
        mse = float(np.mean((traj.x0 - full_sparse) ** 2)) if full_sparse is not None else float("nan")
        summed = merge_ledgers(traj.step_ledgers)
        rows.append(BenchRow(
            name, led.total_passes, gs.cfg_steps, led.mac_estimate, led.cache_fallbacks,
            int(sum(led.calibrated_blocks)), led.mac_estimate / base_macs, mse,
            led.total_passes == T + gs.cfg_steps,
            summed.mac_estimate == led.mac_estimate and summed.counts() == led.counts(),
        ))
    return rows
