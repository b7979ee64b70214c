"""Analytic toy denoisers.

``MixtureDenoiser`` returns the exact optimal noise prediction for isotropic
Gaussian-mixture data, so sampling needs no training. ``BlockNet`` is a frozen
random residual network with observable per-block features; it stands in for
a transformer when exercising feature caching.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .diffusion import NoiseSchedule
from .metrics import PassLedger


@dataclass
class GaussianMixture:
    """Isotropic mixture; ``labels[k]`` is the class of component k.

    A variance of 0 is accepted and means a point mass.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        self.means = np.asarray(self.means, dtype=float)
        if self.means.ndim == 1:
            self.means = self.means[:, None]
        self.variances = np.asarray(self.variances, dtype=float).ravel()
        K = self.weights.size
        if self.means.shape[0] != K or self.variances.size != K:
            raise ValueError("weights, means and variances disagree on component count")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(self.variances < 0):
            raise ValueError("variances must be >= 0")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int).ravel()

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def classes(self) -> list[int]:
        return [] if self.labels is None else sorted(set(self.labels.tolist()))

    def select(self, label: int) -> "GaussianMixture":
        """Renormalized sub-mixture of the components carrying ``label``."""
        mask = self.labels == label
        if not np.any(mask):
            raise KeyError(f"no component with label {label}")
        w = self.weights[mask]
        return GaussianMixture(w / w.sum(), self.means[mask], self.variances[mask], self.labels[mask])

    def marginal(self, a: float) -> "GaussianMixture":
        """Law of sqrt(a) x0 + sqrt(1-a) z for x0 from this mixture."""
        return GaussianMixture(self.weights, math.sqrt(a) * self.means,
                               a * self.variances + (1.0 - a), self.labels)

    def _component_logpdf(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.dim:
            x = x.reshape(-1, self.dim)
        D = self.dim
        sq = np.sum((x[:, None, :] - self.means[None]) ** 2, axis=-1)
        v = self.variances[None]
        return np.log(self.weights)[None] - 0.5 * D * np.log(2 * np.pi * v) - 0.5 * sq / v, x

    def logpdf(self, x) -> np.ndarray:
        lp, _ = self._component_logpdf(x)
        return logsumexp(lp, axis=1)

    def score(self, x) -> np.ndarray:
        lp, x = self._component_logpdf(x)
        r = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        diff = (x[:, None, :] - self.means[None]) / self.variances[None, :, None]
        return -np.einsum("nk,nkd->nd", r, diff)

    def sample(self, n: int, rng) -> np.ndarray:
        k = rng.choice(self.weights.size, size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k])[:, None] * rng.standard_normal((n, self.dim))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "labels": None if self.labels is None else self.labels.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(d["weights"], d["means"], d["variances"], d.get("labels"))


def exact_eps(gm: GaussianMixture, x_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Optimal noise prediction -sqrt(1 - a_t) * grad log p_t(x_t).

    p_t is the mixture with means sqrt(a_t) m_k and variances
    a_t s_k^2 + 1 - a_t. Responsibilities are normalized in log space.
    """
    a = sched.abar(t)
    x = np.asarray(x_t, dtype=float)
    xs = x.reshape(-1, gm.dim)
    means = math.sqrt(a) * gm.means
    v = a * gm.variances + (1.0 - a)
    if gm.dim == 1:
        diff = xs - means[:, 0]  # (n, K)
        sq = diff * diff
    else:
        diff = xs[:, None, :] - means[None]
        sq = np.sum(diff * diff, axis=-1)
    lp = np.log(gm.weights) - 0.5 * gm.dim * np.log(v) - 0.5 * sq / v
    lp -= lp.max(axis=1, keepdims=True)
    r = np.exp(lp)
    r /= r.sum(axis=1, keepdims=True)
    if gm.dim == 1:
        eps = np.sum(r * diff / v, axis=1, keepdims=True)
    else:
        eps = np.einsum("nk,nkd->nd", r / v, diff)
    return (math.sqrt(1.0 - a) * eps).reshape(x.shape)


class MixtureDenoiser:
    """Exact conditional / unconditional predictors for a labelled mixture.

    ``cond=None`` is the null condition (the full mixture); an integer picks
    the sub-mixture with that label; an integer array conditions row-wise.
    """

    def __init__(self, gm: GaussianMixture, sched: NoiseSchedule, conditionals: dict | None = None):
        self.gm = gm
        self.sched = sched
        self.conditionals = dict(conditionals) if conditionals else {c: gm.select(c) for c in gm.classes}

    def __call__(self, x, t, cond=None, ledger: PassLedger | None = None):
        if cond is None:
            return exact_eps(self.gm, x, t, self.sched)
        if np.ndim(cond) == 0:
            return exact_eps(self.conditionals[int(cond)], x, t, self.sched)
        x = np.asarray(x, dtype=float)
        cond = np.asarray(cond)
        out = np.empty_like(x)
        for c in np.unique(cond):
            rows = cond == c
            out[rows] = exact_eps(self.conditionals[int(c)], x[rows], t, self.sched)
        return out

    def to_dict(self) -> dict:
        return {
            "type": "mixture",
            "mixture": self.gm.to_dict(),
            "conditionals": {str(k): v.to_dict() for k, v in self.conditionals.items()},
            "schedule": self.sched.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureDenoiser":
        conds = {int(k): GaussianMixture.from_dict(v) for k, v in d["conditionals"].items()}
        return cls(GaussianMixture.from_dict(d["mixture"]), NoiseSchedule.from_dict(d["schedule"]), conds)


@dataclass
class GridDensity:
    x: np.ndarray
    p: np.ndarray
    log_normalizer: float

    def cdf(self) -> np.ndarray:
        c = np.concatenate([[0.0], np.cumsum(0.5 * (self.p[1:] + self.p[:-1]) * np.diff(self.x))])
        return c / c[-1]

    def mean(self) -> float:
        return float(np.trapezoid(self.x * self.p, self.x))


def mixture_guided_target(gm_c: GaussianMixture, gm_u: GaussianMixture, w: float,
                          grid=None) -> GridDensity:
    """Normalized 1D density proportional to p_u * (p_c / p_u)**w on a grid."""
    if w < 0:
        raise ValueError("w must be >= 0")
    if gm_c.dim != 1 or gm_u.dim != 1:
        raise ValueError("guided target is tabulated for 1D mixtures only")
    if grid is None:
        spread = 10.0 * math.sqrt(max(gm_c.variances.max(), gm_u.variances.max(), 1.0))
        lo = min(gm_c.means.min(), gm_u.means.min()) - spread
        hi = max(gm_c.means.max(), gm_u.means.max()) + spread
        grid = np.linspace(lo, hi, 40001)
    x = np.asarray(grid, dtype=float)
    lt = (1.0 - w) * gm_u.logpdf(x) + w * gm_c.logpdf(x)
    m = lt.max()
    if not np.isfinite(m):
        raise ValueError("guided tilt has no mass on the grid")
    unnorm = np.exp(lt - m)
    # mass still present at the grid edges means the tilt is not integrable
    # (or the grid is too narrow); either way the result would be wrong
    if max(unnorm[0], unnorm[-1]) > 1e-10:
        raise ValueError("guided tilt is not normalizable on the grid")
    z = np.trapezoid(unnorm, x)
    return GridDensity(x, unnorm / z, float(m + math.log(z)))


def timestep_embedding(t: float, T_max: int, dim: int = 8) -> np.ndarray:
    """Sinusoidal features of t / T_max at octave frequencies."""
    s = t / T_max
    freqs = np.pi / 2 * 2.0 ** np.arange(dim // 2)
    return np.concatenate([np.sin(freqs * s), np.cos(freqs * s)])


class FeatureTap:
    """Records (h_in, h_out) for every block of one forward pass."""

    def __init__(self):
        self.inputs: list[np.ndarray] = []
        self.outputs: list[np.ndarray] = []

    def record(self, layer: int, h_in, h_out) -> None:
        self.inputs.append(h_in)
        self.outputs.append(h_out)


def _spectral_rescale(W: np.ndarray, bound: float) -> np.ndarray:
    norm = np.linalg.norm(W, 2)
    return W if norm == 0 else W * (bound / norm)


@dataclass
class BlockNet:
    """Frozen residual stack h -> h + W2 tanh(W1 h) between an affine
    embedding and an affine readout.

    The readout adds the analytic predictor for N(0, I) data,
    sqrt(1 - a_t) * x, so sampled states stay O(1) despite random weights.
    """

    W_x: np.ndarray
    W_t: np.ndarray
    E_c: np.ndarray
    b: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    R: np.ndarray
    r_b: np.ndarray
    alpha_bar: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, sched: NoiseSchedule, D: int = 1, d: int = 8, N: int = 8, n_classes: int = 2,
              hidden: int | None = None, seed: int = 0, spectral_bound: float = 0.5,
              embed_scale: float = 1.0, readout_scale: float = 0.5, zero_blocks: bool = False) -> "BlockNet":
        hidden = 4 * d if hidden is None else hidden
        rng = np.random.default_rng(seed)
        t_dim = 8
        W_x = rng.standard_normal((d, D)) * embed_scale / math.sqrt(D)
        W_t = rng.standard_normal((d, t_dim)) * embed_scale / math.sqrt(t_dim)
        E_c = rng.standard_normal((n_classes + 1, d)) * embed_scale
        b = rng.standard_normal(d) * 0.1 * embed_scale
        per = math.sqrt(spectral_bound)
        W1 = np.stack([_spectral_rescale(rng.standard_normal((hidden, d)), per) for _ in range(N)])
        W2 = np.stack([_spectral_rescale(rng.standard_normal((d, hidden)), per) for _ in range(N)])
        if zero_blocks:
            W1[:] = 0.0
            W2[:] = 0.0
        R = rng.standard_normal((D, d)) * readout_scale / math.sqrt(d)
        r_b = np.zeros(D)
        meta = dict(D=D, d=d, N=N, n_classes=n_classes, hidden=hidden, spectral_bound=spectral_bound,
                    embed_scale=embed_scale, readout_scale=readout_scale, zero_blocks=zero_blocks)
        return cls(W_x, W_t, E_c, b, W1, W2, R, r_b, sched.alpha_bar.copy(), seed, meta)

    @property
    def N(self) -> int:
        return self.W1.shape[0]

    @property
    def d(self) -> int:
        return self.W1.shape[2]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def T_max(self) -> int:
        return self.alpha_bar.size

    def block_macs(self) -> int:
        """Full-block cost per sample row: d_in*d_hidden + d_hidden*d_out."""
        return self.d * self.hidden + self.hidden * self.d

    def cond_index(self, cond, n: int):
        null = self.E_c.shape[0] - 1
        if cond is None:
            return np.full(n, null)
        return np.broadcast_to(np.asarray(cond, dtype=int), (n,))

    def embed(self, x, t: int, cond) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        temb = timestep_embedding(t, self.T_max)
        return x @ self.W_x.T + temb @ self.W_t.T + self.E_c[self.cond_index(cond, len(x))] + self.b

    def block(self, layer: int, h) -> np.ndarray:
        return h + np.tanh(h @ self.W1[layer].T) @ self.W2[layer].T

    def readout(self, x, t: int, h) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = self.alpha_bar[t - 1]
        return math.sqrt(1.0 - a) * x + h @ self.R.T + self.r_b

    def __call__(self, x, t, cond=None, ledger: PassLedger | None = None):
        return blocknet_forward(self, x, t, cond, ledger=ledger)

    def to_dict(self) -> dict:
        arrays = {k: getattr(self, k).tolist() for k in ("W_x", "W_t", "E_c", "b", "W1", "W2", "R", "r_b", "alpha_bar")}
        return {"type": "blocknet", "seed": self.seed, "meta": self.meta, **arrays}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockNet":
        arrays = {k: np.asarray(d[k], dtype=float) for k in ("W_x", "W_t", "E_c", "b", "W1", "W2", "R", "r_b", "alpha_bar")}
        return cls(**arrays, seed=d.get("seed", 0), meta=d.get("meta", {}))


def blocknet_forward(net: BlockNet, x_t, t: int, cond=None, tap: FeatureTap | None = None,
                     ledger: PassLedger | None = None) -> np.ndarray:
    x = np.asarray(x_t, dtype=float)
    h = net.embed(x, t, cond)
    macs = net.block_macs() * len(h)
    for layer in range(net.N):
        h_out = net.block(layer, h)
        if tap is not None:
            tap.record(layer, h, h_out)
        if ledger is not None:
            ledger.record_full_block(layer, macs)
        h = h_out
    return net.readout(x, t, h).reshape(x.shape)


def model_to_json(model) -> str:
    return json.dumps(model.to_dict())


def model_from_json(text: str):
    d = json.loads(text)
    if d["type"] == "mixture":
        return MixtureDenoiser.from_dict(d)
    if d["type"] == "blocknet":
        return BlockNet.from_dict(d)
    raise ValueError(f"unknown model type {d['type']!r}")
