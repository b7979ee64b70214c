"""Evolutionary search for sparse per-step guidance schedules.

The search distribution lives in logit space: a center ``mu`` decodes to
base scales ``w_max * sigmoid(mu)``, candidates are Gaussian perturbations of
those scales, and the center moves toward rank-weighted candidate logits.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from .diffusion import (
    GuidanceSchedule,
    NoiseSchedule,
    NumericalDivergenceError,
    TimestepGrid,
    make_grid,
    sample,
)


@dataclass
class EvoConfig:
    P: int = 16
    G: int = 10
    sigma0: float = 0.5
    eta: float = 1.0
    lam: float | None = None  # None: median quality loss of the first population
    tau: float = 0.15
    w_max: float = 3.0
    w_const: float = 1.5
    w_init: float | None = None  # None: start the center at w_const
    T: int = 50
    T_ref: int = 1000
    n_probes: int = 32
    seed: int = 0
    return_best: bool = True
    logit_clip: float = 1e-6
    max_active: int | None = None  # keep only the k largest scales of each candidate

    def __post_init__(self):
        if self.P < 2 or self.G < 1 or self.sigma0 <= 0 or self.eta <= 0:
            raise ValueError("need P >= 2, G >= 1, sigma0 > 0, eta > 0")
        if self.T_ref < self.T:
            raise ValueError("T_ref must be >= T")
        if self.max_active is not None and not 0 <= self.max_active <= self.T:
            raise ValueError("max_active must lie in [0, T]")


@dataclass
class Candidate:
    w: np.ndarray
    delta: np.ndarray
    fitness: float = -math.inf
    quality_loss: float = math.inf
    sparsity: float = 0.0
    raw: np.ndarray | None = None  # pre-projection scales when max_active is set


@dataclass
class EvoState:
    mu: np.ndarray
    g: int = 0
    best_w: GuidanceSchedule | None = None
    best_fitness: float = -math.inf
    best_loss: float = math.inf


@dataclass
class Probes:
    """Fixed (x_T, condition) pairs; ``cond`` is None or an int array."""

    x_T: np.ndarray
    cond: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x_T)


def make_probes(n: int, D: int, classes, seed: int) -> Probes:
    rng = np.random.default_rng(seed)
    x_T = rng.standard_normal((n, D))
    cond = rng.choice(np.asarray(classes), size=n) if classes else None
    return Probes(x_T, cond)


def decode_center(mu, w_max: float) -> np.ndarray:
    return w_max * expit(np.asarray(mu, dtype=float))


def encode_scales(w, w_max: float, clip: float = 1e-6) -> np.ndarray:
    """Inverse of decode_center with the ratio clamped into [clip, 1 - clip]."""
    return logit(np.clip(np.asarray(w, dtype=float) / w_max, clip, 1.0 - clip))


def keep_largest(w, k: int) -> np.ndarray:
    """Zero all but the k largest entries; ties keep the earlier index."""
    w = np.asarray(w, dtype=float)
    out = np.zeros_like(w)
    if k > 0:
        idx = np.argsort(-w, kind="stable")[:k]
        out[idx] = w[idx]
    return out


def sparsity(w, tau: float) -> float:
    w = np.asarray(w)
    return (w.size - np.count_nonzero(w >= tau)) / w.size


def spawn_population(state: EvoState, cfg: EvoConfig, rng) -> list[Candidate]:
    if state.g >= cfg.G:
        raise ValueError("search already finished")
    sigma_noise = cfg.sigma0 * (1.0 - state.g / cfg.G)
    w_base = decode_center(state.mu, cfg.w_max)
    out = []
    for _ in range(cfg.P):
        delta = rng.normal(0.0, sigma_noise, size=w_base.shape)
        out.append(Candidate(np.clip(w_base + delta, 0.0, cfg.w_max), delta))
    return out


def reference_outputs(probes: Probes, model, sched: NoiseSchedule, w_const: float, T_ref: int) -> np.ndarray:
    grid = make_grid(T_ref, sched.T_max)
    traj = sample(probes.x_T, grid, GuidanceSchedule.constant(T_ref, w_const), model, sched,
                  cond=probes.cond, keep_states=False)
    return traj.x0


def quality_loss(w: GuidanceSchedule, probes: Probes, model, sched: NoiseSchedule,
                 grid: TimestepGrid, ref_outputs) -> float:
    """Mean over probes of the squared distance to the reference outputs."""
    ref = np.asarray(ref_outputs)
    if len(ref) != len(probes):
        raise ValueError(f"{len(probes)} probes but {len(ref)} reference outputs")
    x0 = sample(probes.x_T, grid, w, model, sched, cond=probes.cond, keep_states=False).x0
    return float(np.mean(np.sum((x0 - ref).reshape(len(ref), -1) ** 2, axis=1)))


def fitness(candidate: Candidate, lam: float) -> float:
    candidate.fitness = -candidate.quality_loss + lam * candidate.sparsity
    return candidate.fitness


def rank_weights(fitnesses) -> np.ndarray:
    """a_i = d_i / (P - 1) - 0.5 with d_i the ascending rank; ties go to the
    lower index first."""
    f = np.asarray(fitnesses, dtype=float)
    P = f.size
    if P < 2:
        raise ValueError("rank weights need P >= 2")
    order = np.argsort(f, kind="stable")
    ranks = np.empty(P)
    ranks[order] = np.arange(P)
    return ranks / (P - 1) - 0.5


def update_center(state: EvoState, candidates, weights, eta: float, w_max: float,
                  tau: float = 0.0, clip: float = 1e-6) -> EvoState:
    P = len(candidates)
    step = np.zeros_like(state.mu)
    for cand, a in zip(candidates, weights):
        w = cand.w if cand.raw is None else cand.raw
        step += a * (encode_scales(w, w_max, clip) - state.mu)
    new = replace(state, mu=state.mu + eta / P * step, g=state.g + 1)
    for cand in candidates:
        if cand.fitness > new.best_fitness:
            w = np.where(cand.w >= tau, cand.w, 0.0)
            new.best_w = GuidanceSchedule(w, tau, w_max)
            new.best_fitness = cand.fitness
            new.best_loss = cand.quality_loss
    return new


@dataclass
class SearchResult:
    schedule: GuidanceSchedule
    state: EvoState
    lam: float
    log: list[dict] = field(default_factory=list)
    source: str = "center"

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec) + "\n")


def optimize_schedule(cfg: EvoConfig, model, sched: NoiseSchedule, probes: Probes | None = None,
                      ref_outputs=None, D: int = 1, classes=None, workers: int = 1,
                      callback=None) -> SearchResult:
    """Run G generations of the search and return the thresholded schedule.

    The returned schedule is the better of the decoded final center and the
    best candidate seen (``cfg.return_best``); entries below tau are zeroed.
    Candidates whose sampling diverges get fitness -inf. With
    ``cfg.max_active`` every evaluated schedule keeps only its largest
    entries, which fixes the guidance budget instead of pricing it via lam.
    """
    rng = np.random.default_rng(cfg.seed)
    grid = make_grid(cfg.T, sched.T_max)
    if probes is None:
        probes = make_probes(cfg.n_probes, D, classes, cfg.seed + 1)
    if ref_outputs is None:
        ref_outputs = reference_outputs(probes, model, sched, cfg.w_const, cfg.T_ref)

    def evaluate(w) -> float:
        try:
            with np.errstate(over="raise", invalid="raise"):
                loss = quality_loss(GuidanceSchedule(w, cfg.tau, cfg.w_max), probes, model, sched, grid, ref_outputs)
        except (NumericalDivergenceError, FloatingPointError):
            return math.inf
        return loss if math.isfinite(loss) else math.inf

    w_init = cfg.w_const if cfg.w_init is None else cfg.w_init
    state = EvoState(mu=encode_scales(np.full(cfg.T, w_init), cfg.w_max, cfg.logit_clip))
    lam = cfg.lam
    log = []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for _ in range(cfg.G):
            sigma_noise = cfg.sigma0 * (1.0 - state.g / cfg.G)
            cands = spawn_population(state, cfg, rng)
            if cfg.max_active is not None:
                # the center still moves toward the unprojected scales
                for c in cands:
                    c.raw, c.w = c.w, keep_largest(c.w, cfg.max_active)
            ws = [c.w for c in cands]
            losses = list(pool.map(evaluate, ws)) if pool else [evaluate(w) for w in ws]
            if lam is None:
                finite = [v for v in losses if math.isfinite(v)]
                lam = float(np.median(finite)) if finite else 1.0
            for c, loss in zip(cands, losses):
                c.quality_loss = loss
                c.sparsity = sparsity(c.w, cfg.tau)
                fitness(c, lam)
            weights = rank_weights([c.fitness for c in cands])
            state = update_center(state, cands, weights, cfg.eta, cfg.w_max, cfg.tau, cfg.logit_clip)
            fits = np.array([c.fitness for c in cands])
            rec = {
                "g": state.g,
                "best_fitness": state.best_fitness,
                "mean_fitness": float(np.mean(fits[np.isfinite(fits)])) if np.any(np.isfinite(fits)) else None,
                "mse_best": state.best_loss,
                "sigma_noise": sigma_noise,
                "active_steps_best": state.best_w.cfg_steps if state.best_w is not None else None,
            }
            log.append(rec)
            if callback is not None:
                callback(rec)
    finally:
        if pool is not None:
            pool.shutdown()

    w_center = decode_center(state.mu, cfg.w_max)
    if cfg.max_active is not None:
        w_center = keep_largest(w_center, cfg.max_active)
    w_center = np.where(w_center >= cfg.tau, w_center, 0.0)
    center = Candidate(w_center, np.zeros(cfg.T), quality_loss=evaluate(w_center),
                       sparsity=sparsity(w_center, cfg.tau))
    fitness(center, lam)
    result = SearchResult(GuidanceSchedule(w_center, cfg.tau, cfg.w_max), state, lam, log, "center")
    if cfg.return_best and state.best_w is not None and state.best_fitness > center.fitness:
        result.schedule = state.best_w
        result.source = "best"
    return result
