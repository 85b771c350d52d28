"""Neuron-adaptive dropout planning.

Pipeline: unit importance -> variation trigger -> Hessian eigen-gap base
rate per probed device -> sample-weighted base rate -> straggler-bounded
keep fraction per device -> per-unit drop probabilities -> masks.

Execution-time ratios (the base rate and the per-device ratio
ET_max / ET_k) are keep fractions. Per-unit rates are drop probabilities.
``strict_literal=True`` instead uses the per-device ratio directly as a
drop rate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import nn
from .errors import DomainError, NumericalError, StructuralError

D_CAP = 0.95


@dataclass(frozen=True)
class ImportanceVector:
    scores: np.ndarray
    round_tag: int = 0


def importance_scores(spec: nn.ModelSpec, params: np.ndarray, activation_batch=None, round_tag: int = 0) -> ImportanceVector:
    """Sum of absolute incoming weights of every hidden unit.

    ``activation_batch`` is accepted for interface parity with
    feature-map scoring of convolutional filters; dense units ignore it.
    """
    if activation_batch is not None and len(activation_batch) == 0:
        raise DomainError("activation batch is empty")
    layers = spec.unpack(params)
    scores = [np.abs(W).sum(axis=1) for W, _ in layers[:-1]]
    flat = np.concatenate(scores) if scores else np.zeros(0)
    return ImportanceVector(flat, round_tag)


def normalized_scores(spec: nn.ModelSpec, scores: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance scores within each hidden layer."""
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (spec.n_hidden_units,):
        raise StructuralError("one score per hidden unit is required")
    out = np.zeros_like(scores)
    for s in spec.hidden_slices():
        seg = scores[s]
        sd = seg.std()
        out[s] = (seg - seg.mean()) / sd if sd > 0 else 0.0
    return out


def aggregate_importance(vectors: list[ImportanceVector], sample_counts) -> ImportanceVector:
    n = np.asarray(sample_counts, dtype=float)
    S = np.stack([v.scores for v in vectors])
    return ImportanceVector(n @ S / n.sum(), max(v.round_tag for v in vectors))


def variation(current: ImportanceVector, previous: ImportanceVector) -> float:
    if current.scores.shape != previous.scores.shape:
        raise StructuralError("importance vectors differ in length")
    return float(np.linalg.norm(current.scores - previous.scores))


@dataclass(frozen=True)
class TriggerState:
    """Variation trigger.

    In warmup it fires once ``patience`` consecutive observations have
    not decreased (the first observation counts). Afterwards it fires
    whenever an observation is below the previous one.
    """

    interval: int = 5
    patience: int = 3
    phase: str = "warmup"
    rounds_without_decrease: int = 0
    last_delta: float | None = None
    last_importance: ImportanceVector | None = None

    def __post_init__(self) -> None:
        if self.interval < 1 or self.patience < 1:
            raise DomainError("trigger interval and patience must be >= 1")


def should_update(state: TriggerState, delta: float) -> tuple[bool, TriggerState]:
    prev = state.last_delta
    decreased = prev is not None and delta < prev
    if state.phase == "warmup":
        counter = 0 if decreased else state.rounds_without_decrease + 1
        if counter >= state.patience:
            return True, replace(state, phase="tracking", rounds_without_decrease=0, last_delta=delta)
        return False, replace(state, rounds_without_decrease=counter, last_delta=delta)
    return decreased, replace(state, last_delta=delta)


def base_rate(hessian: nn.HessianBlock, lipschitz: float) -> float:
    """m / h for the first spectral gap wider than 4 * lipschitz; 1.0 if none.

    ``m`` is the 1-based index of the lower eigenvalue of the gap.
    """
    eig = np.asarray(hessian.eigenvalues, dtype=float)
    if eig.size == 0:
        raise DomainError("empty Hessian spectrum")
    if lipschitz < 0:
        raise DomainError("Lipschitz constant must be non-negative")
    if np.any(np.diff(eig) < 0):
        raise DomainError("eigenvalues must be sorted ascending")
    wide = np.flatnonzero(np.diff(eig) > 4.0 * lipschitz)
    if wide.size == 0:
        return 1.0
    return (wide[0] + 1) / hessian.rank_estimate


def aggregate_base_rates(per_device_rates, sample_counts) -> float:
    r = np.asarray(per_device_rates, dtype=float)
    n = np.asarray(sample_counts, dtype=float)
    if r.shape != n.shape or r.size == 0:
        raise StructuralError("one rate per sample count is required")
    if np.any(r <= 0) or np.any(r > 1) or np.any(n <= 0):
        raise DomainError("rates must be in (0, 1] and counts positive")
    return float(n @ r / n.sum())


def lipschitz_of_hessian(
    hessian_at: Callable[[np.ndarray], np.ndarray],
    center: np.ndarray,
    *,
    radius: float = 1e-2,
    probes: int = 8,
    rng: np.random.Generator,
    max_retries: int = 5,
) -> float:
    """Largest ||H(c + d1) - H(c + d2)||_2 / ||d1 - d2|| over random probe pairs."""
    center = np.asarray(center, dtype=float)
    best = 0.0
    for _ in range(probes):
        for _attempt in range(max_retries):
            d1 = rng.normal(size=center.shape)
            d2 = rng.normal(size=center.shape)
            d1 *= radius / np.linalg.norm(d1)
            d2 *= radius / np.linalg.norm(d2)
            gap = np.linalg.norm(d1 - d2)
            if gap > 1e-9 * radius:
                break
        else:
            raise NumericalError("degenerate Lipschitz probes after retries")
        diff = hessian_at(center + d1) - hessian_at(center + d2)
        best = max(best, float(np.linalg.norm(diff, 2)) / gap)
    return best


def lipschitz_estimate(
    spec: nn.ModelSpec,
    params_before: np.ndarray,
    params_after: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    *,
    block_id: int = -1,
    radius: float = 1e-2,
    probes: int = 8,
    seed: int = 0,
    cap: int = 512,
) -> float:
    """Lipschitz constant of B(delta) = H(W' + delta) - grad L(W) around W'.

    The gradient term is taken at the pre-training parameters ``W`` and
    does not move with delta, so only the block Hessian varies. Probes
    perturb the chosen block only.
    """
    before = np.asarray(params_before, dtype=float)
    after = np.asarray(params_after, dtype=float)
    if before.shape != (spec.n_params,) or after.shape != (spec.n_params,):
        raise StructuralError("parameter states do not match the model")
    sl = spec.block_slice(block_id)

    def hessian_at(block_values):
        w = after.copy()
        w[sl] = block_values
        return nn.hessian_block(spec, w, x, y, block_id, cap=cap).block

    rng = np.random.default_rng(seed)
    return lipschitz_of_hessian(hessian_at, after[sl], radius=radius, probes=probes, rng=rng)


@dataclass(frozen=True)
class DeviceTimeModel:
    et_base: np.ndarray  # full-model round time per device (seconds)
    et_max_base: float

    def __post_init__(self) -> None:
        et = np.asarray(self.et_base, dtype=float)
        if np.any(et <= 0) or self.et_max_base <= 0:
            raise DomainError("execution times must be positive")
        object.__setattr__(self, "et_base", et)

    @classmethod
    def from_times(cls, et_base) -> "DeviceTimeModel":
        """Reference time is the slowest device's full-model round time.

        Taking the maximum over every device is what makes d_avg = 1 a
        plan without any dropout.
        """
        et = np.asarray(et_base, dtype=float)
        if et.size == 0:
            raise DomainError("no devices")
        return cls(et, float(et.max()))


@dataclass(frozen=True)
class DropoutPlan:
    base_rate: float
    et_max: float
    per_device_rate: np.ndarray  # mean drop rate D_k
    per_unit_rate: np.ndarray  # (devices, units) drop probabilities
    keep_fraction: np.ndarray
    saturated: np.ndarray  # True where some unit hit the cap

    @classmethod
    def no_dropout(cls, device_count: int, unit_count: int) -> "DropoutPlan":
        return cls(
            1.0,
            float("inf"),
            np.zeros(device_count),
            np.zeros((device_count, unit_count)),
            np.ones(device_count),
            np.zeros(device_count, dtype=bool),
        )


def _capped_rates(share: np.ndarray, mean_rate: float, cap: float) -> tuple[np.ndarray, bool]:
    """Rates proportional to ``share`` with the given mean, water-filled under ``cap``."""
    n = share.size
    budget = n * mean_rate
    rates = share * budget
    fixed = np.zeros(n, dtype=bool)
    while np.any(rates[~fixed] > cap):
        fixed |= rates > cap
        left = budget - cap * fixed.sum()
        free = ~fixed
        rates = np.where(fixed, cap, 0.0)
        if free.any() and left > 0:
            rates[free] = share[free] / share[free].sum() * left
    return rates, bool(fixed.any())


def plan_rates(
    d_avg: float,
    time_model: DeviceTimeModel,
    importance: ImportanceVector,
    spec: nn.ModelSpec,
    devices=None,
    *,
    d_cap: float = D_CAP,
    strict_literal: bool = False,
) -> DropoutPlan:
    """Per-device and per-unit drop rates for the next rounds.

    The slowest reference device is allowed ET_max = d_avg * ET_max_base;
    each device keeps min(ET_max / ET_k, 1) of its units on average, and
    less important units are dropped more often.
    """
    if not 0 < d_avg <= 1:
        raise DomainError(f"base rate must be in (0, 1], got {d_avg}")
    if importance.scores.shape != (spec.n_hidden_units,):
        raise StructuralError("importance vector does not match the model")
    ids = np.arange(time_model.et_base.size) if devices is None else np.asarray(devices, dtype=np.intp)
    et_max = time_model.et_max_base * d_avg
    ratio = np.minimum(et_max / time_model.et_base[ids], 1.0)
    drop = ratio if strict_literal else 1.0 - ratio
    drop = np.minimum(drop, d_cap)

    z = -normalized_scores(spec, importance.scores)
    share = np.exp(z - z.max()) if z.size else z
    share = share / share.sum() if z.size else share
    N = time_model.et_base.size
    per_device = np.zeros(N)
    per_unit = np.zeros((N, spec.n_hidden_units))
    saturated = np.zeros(N, dtype=bool)
    for k, D in zip(ids, drop):
        per_device[k] = D
        if share.size:
            per_unit[k], saturated[k] = _capped_rates(share, D, d_cap)
    return DropoutPlan(float(d_avg), float(et_max), per_device, per_unit, 1.0 - per_device, saturated)


@dataclass(frozen=True)
class UnitMask:
    values: np.ndarray
    dropped: np.ndarray

    @property
    def keep(self) -> np.ndarray:
        return ~self.dropped


def sample_mask(plan: DropoutPlan, device_id: int, rng: np.random.Generator) -> UnitMask:
    """Inverted-dropout mask: 1/(1-d) with probability 1-d, else 0."""
    d = plan.per_unit_rate[device_id]
    if np.any(d >= 1):
        raise DomainError("drop rates must be below 1")
    dropped = rng.random(d.size) < d
    return UnitMask(np.where(dropped, 0.0, 1.0 / (1.0 - d)), dropped)
