"""Fit PerfParams to the published completion times.

The fit is a deterministic numpy grid search. The bare-metal row fixes the
reference CPU work. The composition constants (CPU-bound fraction, usable
parallelism, per-VM contention) and the 2048 MiB memory slowdown are then
chosen to minimise the worst relative error over the virtualized rows, using
scheduler shares sampled from the credit scheduler for each configuration.
Results are memoised, so calibrating twice returns the identical object.
"""

from __future__ import annotations

import csv
import io
import logging
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from cachetools import LRUCache, cached

from .exceptions import FitDivergedError, IOFailedError, NoBaselineRowError
from .perf_model import direct_seconds, effective_capacity, eq1_estimate
from .reference_data import COMPLETION_TARGETS, CompletionTarget, reference_job
from .share_cache import ShareSampler
from .types import MachineSpec, PerfParams

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT_PCT = 15.0
FLAG_THRESHOLD_PCT = 10.0

# Memory slowdown anchors: 8192 MiB is the reference, 3072 MiB sits inside the
# measured band, 2048 MiB is fitted and 512 MiB extends the 2048-3072 slope.
MEM_ANCHORS = (512.0, 2048.0, 3072.0, 8192.0)
MEM_3072 = 1.01
MEM_2048_MAX = 1.5

_PHI_STEP = 0.05
_BETA_STEP = 0.01
_MEM_STEP = 0.01
_BETA_MAX = 0.5

RESIDUAL_HEADER = ("conf_id", "t_paper", "t_model", "residual_pct")


@dataclass(frozen=True)
class ResidualRow:
    conf_id: str
    t_paper: float
    t_model: float

    @property
    def residual_pct(self) -> float:
        return 100.0 * (self.t_model - self.t_paper) / self.t_paper

    def to_dict(self) -> dict:
        return {
            "conf_id": self.conf_id,
            "t_paper": self.t_paper,
            "t_model": self.t_model,
            "residual_pct": self.residual_pct,
        }


@dataclass(frozen=True)
class CalibrationResult:
    """Fitted parameters plus how far the model lands from each target."""

    params: PerfParams
    residuals: tuple[ResidualRow, ...]

    @property
    def max_residual_pct(self) -> float:
        return max((abs(r.residual_pct) for r in self.residuals), default=0.0)

    def flagged(self, threshold: float = FLAG_THRESHOLD_PCT) -> list[ResidualRow]:
        """Rows whose absolute residual exceeds *threshold* percent."""
        return [r for r in self.residuals if abs(r.residual_pct) > threshold]

    def residual_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(RESIDUAL_HEADER)
        for row in self.residuals:
            writer.writerow(
                [row.conf_id, f"{row.t_paper:.3f}", f"{row.t_model:.3f}", f"{row.residual_pct:.3f}"]
            )
        return buffer.getvalue()

    def write_residuals(self, path: Path | str) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.residual_csv(), encoding="utf-8")
        except OSError as exc:
            raise IOFailedError(f"cannot write residuals to {path}: {exc}", path=str(path)) from exc
        return path


def mem_curve_for(mem_2048: float) -> tuple[tuple[float, float], ...]:
    """Memory curve through the fixed anchors with the 2048 MiB point at *mem_2048*."""
    mem_512 = mem_2048 + 1.5 * (mem_2048 - MEM_3072)
    return tuple(zip(MEM_ANCHORS, (mem_512, mem_2048, MEM_3072, 1.0), strict=True))


def _slowdown_coefficients(memory: float) -> tuple[float, float]:
    # Every anchor is linear in the fitted point x, so slowdown(memory) = a * x + b.
    def at(x: float) -> float:
        ys = [y for _, y in mem_curve_for(x)]
        return float(np.interp(memory, MEM_ANCHORS, ys))

    base = at(0.0)
    return at(1.0) - base, base


def measured_capacity(target: CompletionTarget, machine: MachineSpec) -> float:
    """CPUs one domain of *target* gets from the credit scheduler."""
    domains = target.domains()
    shares = ShareSampler.get_instance().shares(machine, domains)
    first = domains[0]
    return effective_capacity(first, target.n_vm, machine, share=shares[first.domain_id])


def _baseline(targets: Sequence[CompletionTarget]) -> CompletionTarget:
    for target in targets:
        if target.is_baseline:
            return target
    raise NoBaselineRowError(
        "calibration needs the bare-metal baseline row",
        details={"conf_ids": [t.conf_id for t in targets]},
    )


def score(
    params: PerfParams,
    targets: Iterable[CompletionTarget] = COMPLETION_TARGETS,
    machine: MachineSpec | None = None,
) -> CalibrationResult:
    """Evaluate *params* against *targets* without fitting anything."""
    machine = machine or MachineSpec()
    job = reference_job(params)
    rows = []
    for target in targets:
        if target.is_baseline:
            t_model = direct_seconds(params, job, machine)
        else:
            dom = target.domains()[0]
            share = measured_capacity(target, machine)
            t_model = eq1_estimate(params, dom, job, target.n_vm, machine=machine, share=share)
        rows.append(ResidualRow(target.conf_id, target.t_paper, t_model))
    return CalibrationResult(params=params, residuals=tuple(rows))


def _worst_error(
    phi: np.ndarray,
    d: np.ndarray,
    beta: np.ndarray,
    x: np.ndarray,
    *,
    k: float,
    t_base: float,
    host: tuple[float, float],
    pcpus: int,
    rows: list[tuple[float, float, int, tuple[float, float]]],
) -> np.ndarray:
    host_slowdown = host[0] * x + host[1]
    host_factor = phi / np.minimum(pcpus, d) + 1.0 - phi
    work = t_base / (host_slowdown * host_factor)

    worst = np.zeros(np.broadcast_shapes(phi.shape, d.shape, beta.shape, x.shape))
    for t_paper, capacity, n_vm, (a, b) in rows:
        slowdown = a * x + b
        usable = np.minimum(capacity, d)
        t_model = k + slowdown * (1.0 + beta * (n_vm - 1)) * work * (phi / usable + 1.0 - phi)
        worst = np.maximum(worst, np.abs(t_model - t_paper) / t_paper)
    return worst


def _axes(phi, d, beta, x) -> tuple[np.ndarray, ...]:
    return (
        np.asarray(phi, dtype=float)[:, None, None, None],
        np.asarray(d, dtype=float)[None, :, None, None],
        np.asarray(beta, dtype=float)[None, None, :, None],
        np.asarray(x, dtype=float)[None, None, None, :],
    )


def _around(center: float, step: float, lo: float, hi: float) -> np.ndarray:
    return np.unique(np.clip(np.linspace(center - step, center + step, 21), lo, hi))


def _fit(
    targets: tuple[CompletionTarget, ...], machine: MachineSpec, base: PerfParams
) -> PerfParams:
    baseline = _baseline(targets)
    vm_targets = [t for t in targets if not t.is_baseline]

    if not vm_targets:
        logger.info("Only the baseline row is available; fitting cpu_work alone")
        flat = tuple((m, 1.0) for m in MEM_ANCHORS)
        return replace(
            base,
            mem_curve=flat,
            cpu_bound_fraction=1.0,
            max_parallelism=None,
            contention_per_vm=0.0,
            reference_cpu_work=baseline.t_paper * machine.pcpus,
            literal_eq1=False,
        )

    rows = [
        (
            t.t_paper,
            measured_capacity(t, machine),
            t.n_vm,
            _slowdown_coefficients(t.domains()[0].memory),
        )
        for t in vm_targets
    ]
    context = {
        "k": base.k_setup_shutdown,
        "t_base": baseline.t_paper,
        "host": _slowdown_coefficients(machine.total_memory),
        "pcpus": machine.pcpus,
        "rows": rows,
    }

    phi_grid = np.linspace(0.0, 1.0, 21)
    d_grid = np.arange(1, machine.pcpus + 1, dtype=float)
    beta_grid = np.round(np.arange(0.0, _BETA_MAX + 1e-9, _BETA_STEP), 6)
    mem_grid = np.round(np.arange(MEM_3072, MEM_2048_MAX + 1e-9, _MEM_STEP), 6)

    worst = _worst_error(*_axes(phi_grid, d_grid, beta_grid, mem_grid), **context)
    i, j, b, m = np.unravel_index(int(np.argmin(worst)), worst.shape)
    phi, d, beta, mem = phi_grid[i], d_grid[j], beta_grid[b], mem_grid[m]
    logger.debug(
        "Coarse fit: phi=%.3f d=%d beta=%.3f m2048=%.3f max_err=%.4f",
        phi, d, beta, mem, worst[i, j, b, m],
    )

    fine_phi = _around(phi, _PHI_STEP, 0.0, 1.0)
    fine_beta = _around(beta, _BETA_STEP, 0.0, _BETA_MAX)
    fine_mem = _around(mem, _MEM_STEP, MEM_3072, MEM_2048_MAX)
    fine = _worst_error(*_axes(fine_phi, [d], fine_beta, fine_mem), **context)
    i, _, b, m = np.unravel_index(int(np.argmin(fine)), fine.shape)
    if fine[i, 0, b, m] < worst.min():
        phi, beta, mem = fine_phi[i], fine_beta[b], fine_mem[m]

    host_slowdown = context["host"][0] * mem + context["host"][1]
    work = baseline.t_paper / (host_slowdown * (phi / min(machine.pcpus, d) + 1.0 - phi))
    return replace(
        base,
        mem_curve=mem_curve_for(float(mem)),
        cpu_bound_fraction=float(phi),
        max_parallelism=None if d >= machine.pcpus else int(d),
        contention_per_vm=float(beta),
        reference_cpu_work=float(work),
        literal_eq1=False,
    )


_CACHE: LRUCache = LRUCache(maxsize=32)
_CACHE_LOCK = threading.Lock()


@cached(cache=_CACHE, lock=_CACHE_LOCK)
def _calibrate(
    targets: tuple[CompletionTarget, ...], machine: MachineSpec, base: PerfParams
) -> CalibrationResult:
    params = _fit(targets, machine, base)
    result = score(params, targets, machine)
    if result.max_residual_pct > DIVERGENCE_LIMIT_PCT:
        raise FitDivergedError(
            f"best fit misses by {result.max_residual_pct:.1f}% "
            f"(limit {DIVERGENCE_LIMIT_PCT:.0f}%)",
            residuals={r.conf_id: r.residual_pct for r in result.residuals},
        )
    for row in result.flagged():
        logger.warning(
            "Calibration residual for %s is %.1f%% (model %.0f s, measured %.0f s)",
            row.conf_id, row.residual_pct, row.t_model, row.t_paper,
        )
    logger.info(
        "Calibrated: cpu_work=%.1f phi=%.2f beta=%.3f max residual %.2f%%",
        params.reference_cpu_work,
        params.cpu_bound_fraction,
        params.contention_per_vm,
        result.max_residual_pct,
    )
    return result


def calibrate(
    targets: Iterable[CompletionTarget] | None = None,
    machine: MachineSpec | None = None,
    base: PerfParams | None = None,
) -> CalibrationResult:
    """Fit performance parameters to *targets* (the published rows by default).

    Raises:
        NoBaselineRowError: when no bare-metal row is present.
        FitDivergedError: when the best fit misses some row by more than 15%.
    """
    return _calibrate(
        tuple(targets if targets is not None else COMPLETION_TARGETS),
        machine or MachineSpec(),
        base or PerfParams(),
    )


def clear_calibration_cache() -> None:
    with _CACHE_LOCK:
        _CACHE.clear()
