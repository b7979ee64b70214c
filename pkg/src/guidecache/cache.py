"""Feature caching with low-rank incremental calibration.

On a reuse step every block output is predicted from the cached features of
the last full compute:

    h_out ~= cached_out + A_r (h_in - cached_in)

where A_r is the rank-r SVD truncation of a per-layer calibration matrix A
fitted by ridge least squares on recorded feature increments. Blocks are
grouped into K consecutive regions that share one rank.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .diffusion import GuidanceSchedule, NoiseSchedule, TimestepGrid, sample
from .metrics import PassLedger, wasserstein_to_density
from .toy import BlockNet, FeatureTap, blocknet_forward

log = logging.getLogger(__name__)

COND, UNCOND = "cond", "uncond"


@dataclass
class CachePolicy:
    refresh_period: int = 2
    guidance_rule: bool = True

    def __post_init__(self):
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")

    def is_full_step(self, step: int) -> bool:
        return step % self.refresh_period == 0


@dataclass
class CacheState:
    """Per-run cache: features of the last full compute of each branch, and
    which branches ran at the previous and current step."""

    features: dict = field(default_factory=dict)
    last_full_step: dict = field(default_factory=dict)
    ran_prev: set = field(default_factory=set)
    ran_now: set = field(default_factory=set)
    step: int = -1
    t: int | None = None

    def observe(self, t: int) -> None:
        if t != self.t:
            self.step += 1
            self.t = t
            self.ran_prev, self.ran_now = self.ran_now, set()

    def valid(self, branch: str, policy: CachePolicy) -> bool:
        if branch not in self.features:
            return False
        return branch in self.ran_prev or not policy.guidance_rule

    def decide(self, t: int, branch: str, policy: CachePolicy) -> str:
        """'full', 'reuse' or 'fallback' for this branch at timestep t."""
        self.observe(t)
        reuse = not policy.is_full_step(self.step)
        mode = "full"
        if reuse:
            mode = "reuse" if self.valid(branch, policy) else "fallback"
        self.ran_now.add(branch)
        return mode

    def store(self, branch: str, tap: FeatureTap) -> None:
        self.features[branch] = (tap.inputs, tap.outputs)
        self.last_full_step[branch] = self.step


def _branch(cond) -> str:
    return UNCOND if cond is None else COND


@dataclass
class LayerCalibration:
    A: np.ndarray
    fit_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.U, self.S, self.Vt = np.linalg.svd(self.A)

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def factors(self, r: int):
        return self.U[:, :r], self.S[:r], self.Vt[:r]

    def matrix(self, r: int) -> np.ndarray:
        U, S, Vt = self.factors(r)
        return (U * S) @ Vt

    def apply(self, delta, r: int) -> np.ndarray:
        """Rows of ``delta`` mapped through U_r S_r V_r^T at cost r*(d_in+d_out)."""
        U, S, Vt = self.factors(r)
        return ((delta @ Vt.T) * S) @ U.T


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype=d["dtype"]).reshape(d["shape"]).copy()


@dataclass
class CalibrationBank:
    layers: list[LayerCalibration]
    ranks: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.ranks:
            self.ranks = [lc.d for lc in self.layers]

    def __len__(self) -> int:
        return len(self.layers)

    def apply(self, layer: int, delta, r: int | None = None) -> np.ndarray:
        return self.layers[layer].apply(delta, self.ranks[layer] if r is None else r)

    def to_json(self) -> str:
        payload = {
            "format": "calibration-bank/1",
            "ranks": [int(r) for r in self.ranks],
            "layers": [{"A": _encode(lc.A), "fit_stats": lc.fit_stats} for lc in self.layers],
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationBank":
        d = json.loads(text)
        layers = [LayerCalibration(_decode(e["A"]), e.get("fit_stats", {})) for e in d["layers"]]
        return cls(layers, list(d["ranks"]))


def truncate_rank(bank: CalibrationBank, layer: int, r: int):
    """Set the layer's working rank and return its top-r singular triplets."""
    d = bank.layers[layer].d
    if r < 1:
        raise ValueError("rank must be >= 1")
    if r > d:
        warnings.warn(f"rank {r} exceeds width {d}; clamped", stacklevel=2)
        r = d
    bank.ranks[layer] = r
    return bank.layers[layer].factors(r)


def region_map(N: int, K: int) -> list[int]:
    """Block -> region for K consecutive regions of floor(N/K) blocks; the
    remainder joins the last region."""
    if not 1 <= K <= N:
        raise ValueError(f"need 1 <= K <= N, got K={K}, N={N}")
    size = N // K
    return [min(layer // size, K - 1) for layer in range(N)]


@dataclass
class RankConfig:
    ranks: list[int]
    N: int
    budget: int
    r_min: int = 1
    r_max: int | None = None

    def __post_init__(self):
        self.ranks = [int(r) for r in self.ranks]
        self.region_map = region_map(self.N, self.K)
        if sum(self.ranks) > self.budget:
            raise ValueError(f"ranks {self.ranks} exceed budget {self.budget}")
        hi = self.r_max if self.r_max is not None else max(self.ranks)
        if any(r < self.r_min or r > hi for r in self.ranks):
            raise ValueError(f"ranks {self.ranks} outside [{self.r_min}, {hi}]")

    @property
    def K(self) -> int:
        return len(self.ranks)

    def rank_for(self, layer: int) -> int:
        return self.ranks[self.region_map[layer]]

    def with_rank(self, k: int, r: int) -> "RankConfig":
        ranks = list(self.ranks)
        ranks[k] = r
        return RankConfig(ranks, self.N, self.budget, self.r_min, self.r_max)

    def to_dict(self) -> dict:
        return {"K": self.K, "ranks": self.ranks, "budget": self.budget,
                "region_map": self.region_map, "r_min": self.r_min, "r_max": self.r_max}

    @classmethod
    def from_dict(cls, d: dict) -> "RankConfig":
        return cls(d["ranks"], len(d["region_map"]), d["budget"], d.get("r_min", 1), d.get("r_max"))


def cached_forward(net: BlockNet, state: CacheState, bank: CalibrationBank | None, rank_cfg: RankConfig | None,
                   x_t, t: int, cond, policy: CachePolicy, ledger: PassLedger | None = None) -> np.ndarray:
    """One branch evaluation under the caching policy.

    Full-compute steps refresh the branch's cache. Reuse steps apply the
    calibrated correction; if the branch did not run at the previous step
    its cache is stale, so the branch is recomputed and a fallback recorded.
    """
    branch = _branch(cond)
    mode = state.decide(t, branch, policy)
    if mode == "reuse":
        if ledger is not None and branch == UNCOND:
            ledger.uncond_reads.append((state.step, branch in state.ran_prev))
        x = np.asarray(x_t, dtype=float)
        h = net.embed(x, t, cond)
        cin, cout = state.features[branch]
        for layer in range(net.N):
            r = rank_cfg.rank_for(layer) if rank_cfg is not None else bank.ranks[layer]
            h = cout[layer] + bank.apply(layer, h - cin[layer], r)
            if ledger is not None:
                ledger.record_calibrated_block(layer, r * 2 * net.d * len(h))
        return net.readout(x, t, h).reshape(x.shape)
    if mode == "fallback" and ledger is not None:
        ledger.cache_fallbacks += 1
    tap = FeatureTap()
    out = blocknet_forward(net, x_t, t, cond, tap=tap, ledger=ledger)
    state.store(branch, tap)
    return out


class CachedPredictor:
    """Noise predictor that runs ``net`` under a caching policy.

    Holds a fresh CacheState; use one instance per sampling run.
    """

    def __init__(self, net: BlockNet, bank: CalibrationBank | None, policy: CachePolicy,
                 rank_cfg: RankConfig | None = None):
        self.net, self.bank, self.policy, self.rank_cfg = net, bank, policy, rank_cfg
        self.state = CacheState()

    def __call__(self, x, t, cond=None, ledger=None):
        return cached_forward(self.net, self.state, self.bank, self.rank_cfg, x, t, cond, self.policy, ledger)


@dataclass
class Increments:
    """Row-paired input/output feature increments per layer."""

    d_in: list[list[np.ndarray]]
    d_out: list[list[np.ndarray]]
    warnings: list[str] = field(default_factory=list)

    def matrices(self, layer: int):
        if not self.d_in[layer]:
            d = 0
            return np.zeros((0, d)), np.zeros((0, d))
        return np.vstack(self.d_in[layer]), np.vstack(self.d_out[layer])

    def n_pairs(self, layer: int) -> int:
        return int(sum(len(a) for a in self.d_in[layer]))


class _RecordingPredictor:
    """Full compute everywhere; at every step where the cached pipeline would
    reuse, records (h - cached) increments instead."""

    def __init__(self, net: BlockNet, policy: CachePolicy, inc: Increments, branches):
        self.net, self.policy, self.inc, self.branches = net, policy, inc, set(branches)
        self.state = CacheState()

    def __call__(self, x, t, cond=None, ledger=None):
        branch = _branch(cond)
        mode = self.state.decide(t, branch, self.policy)
        tap = FeatureTap()
        out = blocknet_forward(self.net, x, t, cond, tap=tap, ledger=ledger)
        if mode == "reuse":
            if branch in self.branches:
                cin, cout = self.state.features[branch]
                for layer in range(self.net.N):
                    self.inc.d_in[layer].append(np.atleast_2d(tap.inputs[layer] - cin[layer]))
                    self.inc.d_out[layer].append(np.atleast_2d(tap.outputs[layer] - cout[layer]))
        else:
            self.state.store(branch, tap)
        return out


@dataclass
class SamplingRun:
    x_T: np.ndarray
    grid: TimestepGrid
    gsched: GuidanceSchedule
    cond: object = None


def collect_calibration_data(net: BlockNet, runs, policy: CachePolicy, sched: NoiseSchedule,
                             branches=(COND, UNCOND)) -> Increments:
    inc = Increments([[] for _ in range(net.N)], [[] for _ in range(net.N)])
    for run in runs:
        rec = _RecordingPredictor(net, policy, inc, branches)
        sample(run.x_T, run.grid, run.gsched, rec, sched, cond=run.cond, keep_states=False)
    n = inc.n_pairs(0) if net.N else 0
    if n < net.d:
        msg = f"only {n} increment pairs for width {net.d}: calibration is rank deficient"
        inc.warnings.append(msg)
        log.warning(msg)
    return inc


def fit_calibration(d_in, d_out, ridge: float = 1e-6) -> LayerCalibration:
    """Closed-form ridge fit of d_out ~ d_in A^T.

    ``ridge`` is relative: the penalty is ridge * trace(d_in^T d_in) / d.
    """
    X = np.atleast_2d(np.asarray(d_in, dtype=float))
    Y = np.atleast_2d(np.asarray(d_out, dtype=float))
    if len(X) == 0:
        raise ValueError("need at least one increment pair")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    d = X.shape[1]
    gram = X.T @ X
    lam = ridge * np.trace(gram) / d
    if ridge == 0 and np.linalg.matrix_rank(gram) < d:
        raise np.linalg.LinAlgError("singular normal equations; use ridge > 0")
    At = scipy.linalg.solve(gram + lam * np.eye(d), X.T @ Y, assume_a="pos")
    A = At.T
    resid = Y - X @ At
    stats = {
        "n_pairs": int(len(X)),
        "ridge": float(ridge),
        "residual_fro": float(np.linalg.norm(resid)),
        "target_fro": float(np.linalg.norm(Y)),
        "rank_deficient": bool(len(X) < d),
    }
    return LayerCalibration(A, stats)


def fit_bank(inc: Increments, ridge: float = 1e-6) -> CalibrationBank:
    return CalibrationBank([fit_calibration(*inc.matrices(layer), ridge) for layer in range(len(inc.d_in))])


def truncation_residual(lc: LayerCalibration, d_in, d_out, r: int) -> float:
    return float(np.linalg.norm(np.asarray(d_out) - lc.apply(np.asarray(d_in), r)))


class RankObjective:
    """Output-space MSE of the cached pipeline against full compute on a
    fixed evaluation set, memoized by rank tuple.

    ``target``/``target_weight`` add a 1D W1 term against a tabulated density.
    """

    def __init__(self, net: BlockNet, bank: CalibrationBank, w_star: GuidanceSchedule, eval_set,
                 sched: NoiseSchedule, grid: TimestepGrid, policy: CachePolicy | None = None,
                 target=None, target_weight: float = 0.0):
        self.net, self.bank, self.w_star, self.eval_set = net, bank, w_star, eval_set
        self.sched, self.grid = sched, grid
        self.policy = policy or CachePolicy()
        self.target, self.target_weight = target, target_weight
        self.reference = sample(eval_set.x_T, grid, w_star, net, sched, cond=eval_set.cond, keep_states=False).x0
        self.cache: dict[tuple, float] = {}
        self.n_evals = 0

    def outputs(self, rank_cfg: RankConfig):
        pred = CachedPredictor(self.net, self.bank, self.policy, rank_cfg)
        traj = sample(self.eval_set.x_T, self.grid, self.w_star, pred, self.sched,
                      cond=self.eval_set.cond, keep_states=False)
        return traj

    def __call__(self, rank_cfg: RankConfig) -> float:
        key = tuple(rank_cfg.ranks)
        if key not in self.cache:
            x0 = self.outputs(rank_cfg).x0
            val = float(np.mean(np.sum((x0 - self.reference).reshape(len(x0), -1) ** 2, axis=1)))
            if self.target is not None and self.target_weight > 0:
                val += self.target_weight * wasserstein_to_density(x0, self.target.x, self.target.p)
            self.cache[key] = val
            self.n_evals += 1
        return self.cache[key]


def quality_objective(rank_cfg: RankConfig, objective: RankObjective) -> float:
    return objective(rank_cfg)


def bracket_search(f, lo: int, hi: int):
    """Discrete bracketing search for an argmin on [lo, hi].

    Evaluates (lo, mid, hi) and keeps the half holding the best value until
    hi - lo <= 1. Returns (best_rank, best_value, edge_hits) where edge_hits
    counts iterations whose best point sat on the bracket edge.
    """
    seen: dict[int, float] = {}

    def val(r):
        if r not in seen:
            seen[r] = f(r)
        return seen[r]

    edge_hits = 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        v_lo, v_mid, v_hi = val(lo), val(mid), val(hi)
        if v_mid < min(v_lo, v_hi):
            lo, hi = (lo, mid) if v_lo <= v_hi else (mid, hi)
        elif v_lo <= v_hi:
            edge_hits += 1
            hi = mid
        else:
            edge_hits += 1
            lo = mid
    val(lo)
    val(hi)
    best = min(seen, key=lambda r: (seen[r], r))
    return best, seen[best], edge_hits


@dataclass
class RankSearchResult:
    config: RankConfig
    objective: float
    accepted: list[dict] = field(default_factory=list)
    sweeps: int = 0
    non_unimodal: list[int] = field(default_factory=list)


def optimize_ranks(objective, K: int, r_min: int, r_max: int, budget: int, N: int,
                   init: list[int] | None = None, max_sweeps: int = 3) -> RankSearchResult:
    """Coordinate descent over region ranks with an inner bracketing search.

    A coordinate move is accepted only if it strictly lowers the objective
    and keeps sum(ranks) <= budget. The default start is the largest uniform
    rank the budget allows.
    """
    if init is None:
        r0 = min(r_max, budget // K)
        if r0 < r_min:
            raise ValueError("budget cannot fit r_min in every region")
        init = [r0] * K
    cfg = RankConfig(init, N, budget, r_min, r_max)
    best = objective(cfg)
    accepted = [{"sweep": 0, "region": None, "ranks": list(cfg.ranks), "objective": best}]
    non_unimodal = []
    sweeps = 0
    for sweep in range(1, max_sweeps + 1):
        sweeps = sweep
        changed = False
        for k in range(K):
            hi = min(r_max, budget - (sum(cfg.ranks) - cfg.ranks[k]))
            if hi < r_min:
                continue
            r, v, edges = bracket_search(lambda r: objective(cfg.with_rank(k, r)), r_min, hi)
            if edges >= 2:
                non_unimodal.append(k)
                log.info("region %d: best rank on a bracket edge %d times", k, edges)
            if v < best and r != cfg.ranks[k]:
                cfg = cfg.with_rank(k, r)
                best = v
                changed = True
                accepted.append({"sweep": sweep, "region": k, "ranks": list(cfg.ranks), "objective": v})
        if not changed:
            break
    return RankSearchResult(cfg, best, accepted, sweeps, non_unimodal)


def uniform_configs(K: int, r_min: int, r_max: int, budget: int, N: int) -> list[RankConfig]:
    return [RankConfig([r] * K, N, budget, r_min, r_max)
            for r in range(r_min, r_max + 1) if r * K <= budget]


def bank_to_file(bank: CalibrationBank, path) -> None:
    with open(path, "w") as fh:
        fh.write(bank.to_json())


def bank_from_file(path) -> CalibrationBank:
    with open(path) as fh:
        return CalibrationBank.from_json(fh.read())


def macs_per_row(net: BlockNet, rank: int) -> tuple[int, int]:
    """(full block, calibrated block) multiply-accumulates per sample row."""
    return net.block_macs(), rank * 2 * net.d


def rank_budget_fraction(cfg: RankConfig, d: int) -> float:
    return sum(cfg.ranks) / (cfg.K * d) if d else math.nan
