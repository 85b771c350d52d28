"""Server-side aggregation: FedAvg, non-IID-aware weighting, masked averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .data import Dataset
from .divergence import DEGREE_FLOOR, ControlParams, NonIIDReport, noniid_degree
from .errors import ConfigError, DomainError, StructuralError

ALL_DROPPED_MASS = 1e-12


@dataclass(frozen=True)
class AggregationWeights:
    q: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 1 or q.size == 0:
            raise StructuralError("aggregation weights must be a non-empty vector")
        if np.any(q <= 0) or abs(q.sum() - 1.0) > 1e-9:
            raise DomainError(f"aggregation weights must be positive and sum to 1, got {q}")
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class LearningSchedule:
    lr_model: float = 0.1
    decay_model: float = 0.99
    lr_upsilon: float = 1e-2
    decay_upsilon: float = 0.99
    lr_bias: float = 1e-2
    decay_bias: float = 0.99

    def __post_init__(self) -> None:
        for name in ("lr_model", "lr_upsilon", "lr_bias"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("decay_model", "decay_upsilon", "decay_bias"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in (0, 1]")

    def at(self, step: int) -> tuple[float, float, float]:
        """(model, upsilon, bias) rates after ``step`` decays."""
        return (
            nn.decayed_lr(self.lr_model, self.decay_model, step),
            nn.decayed_lr(self.lr_upsilon, self.decay_upsilon, step),
            nn.decayed_lr(self.lr_bias, self.decay_bias, step),
        )


@dataclass(frozen=True)
class UpdateBundle:
    """One device's upload: its local model and which coordinates it trained.

    ``coord_keep`` is None when the device trained the full model.
    """

    device_id: int
    params: np.ndarray
    sample_count: int
    unit_keep: np.ndarray | None = None
    coord_keep: np.ndarray | None = None

    @classmethod
    def build(cls, spec: nn.ModelSpec, device_id: int, params, sample_count: int, unit_keep=None):
        params = np.asarray(params, dtype=float)
        if params.shape != (spec.n_params,):
            raise StructuralError(f"device {device_id}: params shape {params.shape} != ({spec.n_params},)")
        coord = None
        if unit_keep is not None:
            unit_keep = np.asarray(unit_keep, dtype=bool)
            if not unit_keep.all():
                coord = spec.coordinate_keep(unit_keep)
        return cls(device_id, params, int(sample_count), unit_keep, coord)


def fedavg_weights(bundles: Sequence[UpdateBundle]) -> AggregationWeights:
    if not bundles:
        raise DomainError("no bundles to aggregate")
    n = np.array([b.sample_count for b in bundles], dtype=float)
    return AggregationWeights(n / n.sum())


def feddh_weights(bundles: Sequence[UpdateBundle], report: NonIIDReport) -> AggregationWeights:
    """q_k proportional to n_k / degree_k over the selected devices."""
    if not bundles:
        raise DomainError("no bundles to aggregate")
    n = np.array([b.sample_count for b in bundles], dtype=float)
    deg = report.degree[[b.device_id for b in bundles]]
    if np.any(deg < DEGREE_FLOOR):
        raise DomainError("non-IID degrees must be clamped before weighting")
    a = n / deg
    return AggregationWeights(a / a.sum())


def _stack(bundles: Sequence[UpdateBundle]) -> tuple[np.ndarray, np.ndarray | None]:
    W = np.stack([b.params for b in bundles])
    if all(b.coord_keep is None for b in bundles):
        return W, None
    keep = np.stack([np.ones(W.shape[1], bool) if b.coord_keep is None else b.coord_keep for b in bundles])
    return W, keep


def masked_aggregate(
    global_prev: np.ndarray,
    bundles: Sequence[UpdateBundle],
    weights: AggregationWeights,
) -> np.ndarray:
    """Per-coordinate weighted mean over the devices that kept each coordinate.

    Coordinates dropped by every device keep their previous global value.
    """
    q = weights.q
    if q.size != len(bundles):
        raise StructuralError("one weight per bundle is required")
    W, keep = _stack(bundles)
    if W.shape[1] != np.shape(global_prev)[0]:
        raise StructuralError("bundle parameters do not match the global model")
    if keep is None:
        return q @ W
    mass = q @ keep
    num = q @ (W * keep)
    out = np.array(global_prev, dtype=float)
    ok = mass > ALL_DROPPED_MASS
    out[ok] = num[ok] / mass[ok]
    return out


def _reaggregate(global_prev, bundles, js_values, cp: ControlParams) -> np.ndarray:
    report = noniid_degree(js_values, cp)
    return masked_aggregate(global_prev, bundles, feddh_weights(bundles, report))


def control_gradients(
    cp: ControlParams,
    bundles: Sequence[UpdateBundle],
    report: NonIIDReport,
    validation: Dataset,
    spec: nn.ModelSpec,
    global_prev: np.ndarray,
    mode: str = "analytic",
    eps: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the validation loss of the aggregate w.r.t. (upsilon, bias).

    Only selected devices get non-zero entries.
    """
    if len(validation) == 0:
        raise ConfigError("control-parameter update needs a non-empty validation set")
    ids = np.array([b.device_id for b in bundles])
    g_u = np.zeros_like(cp.upsilon)
    g_b = np.zeros_like(cp.bias)
    x, y = validation.features, validation.labels

    if mode == "finite_diff":
        def loss_at(c):
            w = _reaggregate(global_prev, bundles, report.js, c)
            return nn.forward(spec, w, x, y)[1]

        for k in ids:
            for field, out in (("upsilon", g_u), ("bias", g_b)):
                hi, lo = cp.copy(), cp.copy()
                getattr(hi, field)[k] += eps
                getattr(lo, field)[k] -= eps
                out[k] = (loss_at(hi) - loss_at(lo)) / (2 * eps)
        return g_u, g_b

    if mode != "analytic":
        raise ConfigError(f"unknown gradient mode {mode!r}")
    q = feddh_weights(bundles, report).q
    W, keep = _stack(bundles)
    w = masked_aggregate(global_prev, bundles, AggregationWeights(q))
    _, g = nn.value_and_grad(spec, w, x, y)
    # d w_i / d q_j = keep_ji (w_ji - w_i) / sum_{j' keeping i} q_j'
    if keep is None:
        s = (W - w) @ g
    else:
        mass = q @ keep
        scale = np.where(mass > ALL_DROPPED_MASS, 1.0 / np.where(mass > 0, mass, 1.0), 0.0)
        s = (keep * (W - w)) @ (g * scale)
    deg = report.degree[ids]
    dF_dD = -(q / deg) * (s - q @ s)
    active = (cp.upsilon[ids] * report.js[ids] + cp.bias[ids]) > DEGREE_FLOOR
    g_u[ids] = np.where(active, report.js[ids] * dF_dD, 0.0)
    g_b[ids] = np.where(active, dF_dD, 0.0)
    return g_u, g_b


def update_control_params(
    cp: ControlParams,
    bundles: Sequence[UpdateBundle],
    report: NonIIDReport,
    validation: Dataset,
    *,
    spec: nn.ModelSpec,
    global_prev: np.ndarray,
    lr_upsilon: float,
    lr_bias: float,
    mode: str = "analytic",
) -> ControlParams:
    """One gradient step on the selected devices' control parameters.

    Afterwards each bias is raised just enough that the degree stays above
    the floor, which keeps the map differentiable at the next step.
    """
    g_u, g_b = control_gradients(cp, bundles, report, validation, spec, global_prev, mode)
    out = ControlParams(cp.upsilon - lr_upsilon * g_u, cp.bias - lr_bias * g_b)
    moved = np.flatnonzero((g_u != 0) | (g_b != 0))
    floor = 2 * DEGREE_FLOOR - out.upsilon[moved] * report.js[moved]
    out.bias[moved] = np.maximum(out.bias[moved], floor)
    return out


def theorem2_gap(n, gamma) -> float:
    """Weighted non-IID level under n/Gamma weighting minus that under n weighting.

    Never positive: weighting by n_k / Gamma_k can only lower the
    Gamma-weighted average compared with plain sample-count weighting.
    """
    n = np.asarray(n, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if n.shape != gamma.shape or n.ndim != 1 or n.size == 0:
        raise StructuralError("n and gamma must be equal-length non-empty vectors")
    if np.any(n <= 0) or np.any(gamma <= 0):
        raise DomainError("theorem2_gap needs positive sample counts and gammas")
    p_opt = (n / gamma) / np.sum(n / gamma)
    p_avg = n / n.sum()
    return float(p_opt @ gamma - p_avg @ gamma)
