"""Distribution distances, pass/MAC accounting and report assembly.

The distances here stand in for FID at toy scale: 1D Wasserstein-1 and the
energy distance for D >= 2. They are never comparable to image-model FIDs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class PassLedger:
    """Exact count of forward passes and block evaluations for one run.

    ``full_blocks`` and ``calibrated_blocks`` are per-layer counts of block
    evaluations (one per batched call). MACs are per sample row.
    """

    cond_passes: int = 0
    uncond_passes: int = 0
    cache_fallbacks: int = 0
    full_blocks: list[int] = field(default_factory=list)
    calibrated_blocks: list[int] = field(default_factory=list)
    mac_estimate: int = 0
    uncond_reads: list[tuple[int, bool]] = field(default_factory=list)

    @property
    def total_passes(self) -> int:
        return self.cond_passes + self.uncond_passes

    def _grow(self, n_layers: int) -> None:
        for counts in (self.full_blocks, self.calibrated_blocks):
            if len(counts) < n_layers:
                counts.extend([0] * (n_layers - len(counts)))

    def record_full_block(self, layer: int, macs: int) -> None:
        self._grow(layer + 1)
        self.full_blocks[layer] += 1
        self.mac_estimate += int(macs)

    def record_calibrated_block(self, layer: int, macs: int) -> None:
        self._grow(layer + 1)
        self.calibrated_blocks[layer] += 1
        self.mac_estimate += int(macs)

    def __add__(self, other: "PassLedger") -> "PassLedger":
        out = PassLedger(
            cond_passes=self.cond_passes + other.cond_passes,
            uncond_passes=self.uncond_passes + other.uncond_passes,
            cache_fallbacks=self.cache_fallbacks + other.cache_fallbacks,
            mac_estimate=self.mac_estimate + other.mac_estimate,
            uncond_reads=self.uncond_reads + other.uncond_reads,
        )
        n = max(len(self.full_blocks), len(other.full_blocks))
        out._grow(n)
        for src in (self, other):
            for i, v in enumerate(src.full_blocks):
                out.full_blocks[i] += v
            for i, v in enumerate(src.calibrated_blocks):
                out.calibrated_blocks[i] += v
        return out

    def counts(self) -> dict[str, int]:
        """The export form: flat counts only."""
        return {
            "cond_passes": self.cond_passes,
            "uncond_passes": self.uncond_passes,
            "cached_blocks": int(sum(self.calibrated_blocks)),
            "calibrated_blocks": int(sum(self.calibrated_blocks)),
            "cache_fallbacks": self.cache_fallbacks,
            "mac_estimate": self.mac_estimate,
        }

    def to_json(self) -> str:
        return json.dumps(self.counts(), indent=2)


def merge_ledgers(ledgers: Sequence[PassLedger]) -> PassLedger:
    """Sum ledgers in index order."""
    total = PassLedger()
    for led in ledgers:
        total = total + led
    return total


@dataclass
class DistReport:
    wasserstein1: float | None = None
    energy_distance: float | None = None
    mse_to_reference: float | None = None
    sample_count: int = 0


def wasserstein_1d(a, b) -> float:
    """Exact W1 between two empirical 1D distributions.

    Equal counts use the sorted coupling; otherwise the quantile functions
    are integrated over the merged breakpoints.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # W1 = int_0^1 |F_a^-1(q) - F_b^-1(q)| dq, piecewise constant in q.
    qa = np.arange(1, a.size + 1) / a.size
    qb = np.arange(1, b.size + 1) / b.size
    q = np.union1d(qa, qb)
    widths = np.diff(np.concatenate([[0.0], q]))
    ia = np.minimum(np.searchsorted(qa, q - 1e-15), a.size - 1)
    ib = np.minimum(np.searchsorted(qb, q - 1e-15), b.size - 1)
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))


def wasserstein_to_density(samples, grid, density) -> float:
    """W1 between an empirical sample and a density tabulated on a grid.

    Computed as the integral of |F_emp - F| over the grid with the trapezoid
    rule, so the grid must cover the sample support.
    """
    x = np.asarray(grid, dtype=float)
    p = np.asarray(density, dtype=float)
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    if s[0] < x[0] or s[-1] > x[-1]:
        raise ValueError("samples fall outside the density grid")
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(x))])
    cdf /= cdf[-1]
    ecdf = np.searchsorted(s, x, side="right") / s.size
    return float(np.trapezoid(np.abs(ecdf - cdf), x))


def energy_distance(a, b) -> float:
    """2E|X-Y| - E|X-X'| - E|Y-Y'| over all empirical pairs (V-statistic)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")

    def mean_dist(u, v):
        # chunked to keep memory bounded at 1e4 x 1e4
        total = 0.0
        for i in range(0, len(u), 1024):
            diff = u[i : i + 1024, None, :] - v[None, :, :]
            total += np.sqrt(np.sum(diff * diff, axis=-1)).sum()
        return total / (len(u) * len(v))

    return float(2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b))


def count_passes(w, tau: float) -> tuple[int, int]:
    """(total forward passes, CFG steps) implied by a guidance schedule."""
    w = np.asarray(w, dtype=float)
    cfg_steps = int(np.count_nonzero(w >= tau))
    return w.size + cfg_steps, cfg_steps


def histogram_rows(samples, bins=80, range=None) -> list[tuple[float, float, float]]:
    density, edges = np.histogram(np.asarray(samples).ravel(), bins=bins, range=range, density=True)
    return [(float(edges[i]), float(edges[i + 1]), float(density[i])) for i in np.arange(len(density))]


def write_histogram_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "density"])
        writer.writerows(rows)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def assemble_report(
    trajectories=None,
    ledgers=None,
    dist: DistReport | None = None,
    schedule=None,
    rank_cfg=None,
    config: dict | None = None,
    artifacts: dict | None = None,
    extra: dict | None = None,
) -> dict:
    """Build one JSON-ready experiment report; missing pieces become null."""
    ledgers = list(ledgers or [])
    total = merge_ledgers(ledgers)
    report = {
        "schema_version": SCHEMA_VERSION,
        "note": "distances are toy-scale W1 / energy distance, not FID",
        "config": _jsonable(config) if config is not None else None,
        "n_trajectories": len(trajectories) if trajectories is not None else 0,
        "ledger_totals": total.counts(),
        "metrics": _jsonable(asdict(dist)) if dist is not None else None,
        "schedule": _jsonable(schedule.to_dict()) if schedule is not None else None,
        "rank_config": _jsonable(rank_cfg.to_dict()) if rank_cfg is not None else None,
        "artifacts": _jsonable(artifacts or {}),
    }
    if extra:
        report.update(_jsonable(extra))
    return report


def dump_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
