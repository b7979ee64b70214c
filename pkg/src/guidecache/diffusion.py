"""Noise schedules, the DDIM update, per-step classifier-free guidance and
the sparse-guidance sampling loop.

Conventions: timesteps run over 1..T_max on the training grid and
``alpha_bar(0) == 1`` stands for clean data. States are arrays of shape
``(D,)`` or ``(n, D)``; every operation here broadcasts over the leading
batch axis.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .metrics import PassLedger


class ConfigurationError(ValueError):
    pass


class NumericalDivergenceError(FloatingPointError):
    def __init__(self, timestep: int, message: str | None = None):
        self.timestep = timestep
        super().__init__(message or f"non-finite state at timestep {timestep}")


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.ndim != 1 or ab.size < 1:
            raise ConfigurationError("alpha_bar must be a non-empty 1D sequence")
        if not (ab[0] <= 1.0 and ab[-1] > 0.0):
            raise ConfigurationError("alpha_bar must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ConfigurationError("alpha_bar must be strictly decreasing in t")

    @property
    def T_max(self) -> int:
        return int(self.alpha_bar.size)

    def abar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T_max:
            raise ConfigurationError(f"timestep {t} outside 0..{self.T_max}")
        return float(self.alpha_bar[t - 1])

    def beta_coef(self, t: int, t_prev: int) -> float:
        """Noise coefficient of the deterministic DDIM step t -> t_prev.

        With sigma = 0 the update reads x_prev = sqrt(a_prev / a_t) x_t + beta * eps.
        """
        a_t, a_p = self.abar(t), self.abar(t_prev)
        return math.sqrt(1.0 - a_p) - math.sqrt(a_p * (1.0 - a_t) / a_t)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha_bar": self.alpha_bar.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(np.asarray(d["alpha_bar"], dtype=float), d.get("kind", "custom"))


def build_noise_schedule(kind: str = "linear-beta", T_max: int = 1000, params=None) -> NoiseSchedule:
    """Build alpha_bar on the training grid.

    ``linear-beta`` takes ``params = (beta_start, beta_end)``; ``cosine``
    takes ``params = (offset_s, beta_max)`` and clips each beta at beta_max.
    """
    if T_max < 2:
        raise ConfigurationError("T_max must be >= 2")
    if kind == "linear-beta":
        b0, b1 = params if params is not None else (1e-4, 0.02)
        if not (0 < b0 < 1 and 0 < b1 < 1):
            raise ConfigurationError("beta endpoints must lie in (0, 1)")
        betas = np.linspace(b0, b1, T_max)
        alpha_bar = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        s, beta_max = params if params is not None else (0.008, 0.999)
        if not (0 < s < 1 and 0 < beta_max < 1):
            raise ConfigurationError("cosine parameters must lie in (0, 1)")
        steps = np.arange(T_max + 1) / T_max
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], beta_max)
        alpha_bar = np.cumprod(1.0 - betas)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(alpha_bar, kind)


@dataclass(frozen=True)
class TimestepGrid:
    steps: np.ndarray

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=int)
        object.__setattr__(self, "steps", steps)
        if steps.ndim != 1 or steps.size < 1:
            raise ConfigurationError("grid needs at least one timestep")
        if np.any(np.diff(steps) >= 0) or steps[-1] < 1:
            raise ConfigurationError("grid must be strictly decreasing and >= 1")

    @property
    def T(self) -> int:
        return int(self.steps.size)

    def pairs(self):
        """Yield (t, t_prev) for every step; the last step lands on 0."""
        nxt = np.append(self.steps[1:], 0)
        return list(zip(self.steps.tolist(), nxt.tolist()))

    def __len__(self) -> int:
        return self.T


def make_grid(T: int, T_max: int) -> TimestepGrid:
    """Uniform stride T_max, T_max - k, ... with k = T_max // T."""
    if not 1 <= T <= T_max:
        raise ConfigurationError(f"need 1 <= T <= T_max, got T={T}")
    stride = T_max // T
    return TimestepGrid(T_max - stride * np.arange(T))


@dataclass
class GuidanceSchedule:
    """Per-step guidance scales; entries below ``tau`` mean conditional-only."""

    w: np.ndarray
    tau: float = 0.0
    w_max: float = np.inf

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).ravel()
        if self.tau < 0:
            raise ConfigurationError("tau must be >= 0")
        if np.any(self.w < 0) or np.any(self.w > self.w_max):
            raise ConfigurationError("guidance scales must lie in [0, w_max]")

    @classmethod
    def constant(cls, T: int, w: float, tau: float = 0.0, w_max: float | None = None):
        return cls(np.full(T, float(w)), tau, w if w_max is None else w_max)

    def __len__(self) -> int:
        return int(self.w.size)

    @property
    def active(self) -> np.ndarray:
        return self.w >= self.tau

    @property
    def cfg_steps(self) -> int:
        return int(np.count_nonzero(self.active))

    def to_dict(self, grid: TimestepGrid | None = None) -> dict:
        d = {"w": self.w.tolist(), "tau": float(self.tau), "w_max": float(self.w_max)}
        d["grid"] = grid.steps.tolist() if grid is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceSchedule":
        return cls(np.asarray(d["w"], dtype=float), float(d["tau"]), float(d["w_max"]))


class NoisePredictor(Protocol):
    def __call__(self, x, t: int, cond=None, ledger: PassLedger | None = None) -> np.ndarray: ...


def ddim_step(x_t, eps, t: int, t_prev: int, sched: NoiseSchedule, sigma_t: float = 0.0, noise=None):
    a_t, a_p = sched.abar(t), sched.abar(t_prev)
    if not t > t_prev >= 0:
        raise ConfigurationError(f"need t > t_prev >= 0, got {t}, {t_prev}")
    dir_var = 1.0 - a_p - sigma_t**2
    if sigma_t < 0 or dir_var < 0:
        raise ValueError(f"invalid sigma_t={sigma_t} for step {t}->{t_prev}")
    x0_hat = (x_t - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
    out = math.sqrt(a_p) * x0_hat + math.sqrt(dir_var) * eps
    if sigma_t > 0:
        if noise is None:
            raise ValueError("noise is required when sigma_t > 0")
        out = out + sigma_t * noise
    return out


def apply_cfg(eps_u, eps_c, w_t: float):
    return eps_u + w_t * (eps_c - eps_u)


def guided_prediction(x_t, t: int, w_t: float, tau: float, model, ledger: PassLedger, cond=None):
    """Thresholded guidance: full CFG when w_t >= tau, conditional-only otherwise."""
    eps_c = model(x_t, t, cond, ledger)
    ledger.cond_passes += 1
    if w_t >= tau:
        eps_u = model(x_t, t, None, ledger)
        ledger.uncond_passes += 1
        return apply_cfg(eps_u, eps_c, w_t)
    return eps_c


@dataclass
class Trajectory:
    timesteps: list[int]
    states: list[np.ndarray]
    ledger: PassLedger
    step_ledgers: list[PassLedger] = field(default_factory=list)

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1]

    @property
    def xT(self) -> np.ndarray:
        return self.states[0]

    def to_csv(self, path, index: int = 0) -> None:
        """Write one trajectory (row ``index`` of a batch) as CSV."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            first = np.atleast_2d(self.states[0])
            D = first.shape[-1]
            writer.writerow(["step_index", "timestep"] + [f"component_{j}" for j in range(D)])
            for i, (t, x) in enumerate(zip(self.timesteps, self.states)):
                row = np.atleast_2d(x)[index]
                writer.writerow([i, t] + [repr(float(v)) for v in row])


def sample(
    x_T,
    grid: TimestepGrid,
    gsched: GuidanceSchedule,
    model,
    sched: NoiseSchedule,
    seed: int = 0,
    cond=None,
    sigma=0.0,
    keep_states: bool = True,
) -> Trajectory:
    """Run the guided DDIM sampler over ``grid``.

    With ``keep_states=False`` only x_T and x_0 are stored.
    """
    if len(gsched) != grid.T:
        raise ConfigurationError(f"schedule length {len(gsched)} != grid length {grid.T}")
    sigmas = np.broadcast_to(np.asarray(sigma, dtype=float), (grid.T,))
    rng = np.random.default_rng(seed) if np.any(sigmas > 0) else None
    x = np.array(x_T, dtype=float, copy=True)
    states = [x]
    timesteps = [int(grid.steps[0])]
    step_ledgers = []
    for i, (t, t_prev) in enumerate(grid.pairs()):
        led = PassLedger()
        eps = guided_prediction(x, t, float(gsched.w[i]), gsched.tau, model, led, cond)
        noise = rng.standard_normal(x.shape) if sigmas[i] > 0 else None
        x = ddim_step(x, eps, t, t_prev, sched, float(sigmas[i]), noise)
        if not np.all(np.isfinite(x)):
            raise NumericalDivergenceError(t)
        step_ledgers.append(led)
        if keep_states or i == grid.T - 1:
            states.append(x)
            timesteps.append(t_prev)
    total = PassLedger()
    for led in step_ledgers:
        total = total + led
    return Trajectory(timesteps, states, total, step_ledgers)


def deviation_scale(eps_c, eps_u, w_t: float, w_prev: float, t: int, t_prev: int, sched: NoiseSchedule, exact: bool = True):
    """Shift of x_{t_prev} when the step t -> t_prev uses w_prev instead of w_t."""
    if exact:
        coef = sched.beta_coef(t, t_prev)
    else:
        coef = math.sqrt(sched.abar(t_prev) / sched.abar(t))
    return coef * (w_prev - w_t) * (np.asarray(eps_c) - np.asarray(eps_u))


def deviation_switch(eps_c, eps_u, w_t: float, t: int, t_prev: int, sched: NoiseSchedule):
    """Shift of x_{t_prev} when CFG at scale w_t is replaced by conditional-only."""
    return sched.beta_coef(t, t_prev) * (1.0 - w_t) * (np.asarray(eps_c) - np.asarray(eps_u))
