"""Label-distribution divergences and non-IID degree estimation.

All logarithms are natural.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from . import nn
from .data import Dataset, LabelDistribution
from .errors import DomainError, NumericalError, StructuralError

DEGREE_FLOOR = 1e-6


def _probs(p) -> np.ndarray:
    return p.probs if isinstance(p, LabelDistribution) else np.asarray(p, dtype=float)


def kl(p, q) -> float:
    """Kullback-Leibler divergence KL(p || q) with 0 * log(0/.) = 0."""
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise StructuralError(f"distributions differ in length: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise DomainError("KL undefined: p has mass where q has none")
    return float(max(np.sum(p[support] * np.log(p[support] / q[support])), 0.0))


def js(p_k, p_m) -> float:
    """Jensen-Shannon divergence between a device distribution and the global one."""
    p, q = _probs(p_k), _probs(p_m)
    if p.shape != q.shape:
        raise StructuralError(f"distributions differ in length: {p.shape} vs {q.shape}")
    mid = 0.5 * (p + q)
    return min(0.5 * kl(p, mid) + 0.5 * kl(q, mid), float(np.log(2.0)))


@dataclass
class ControlParams:
    """Per-device coefficients of the linear map from JS divergence to degree."""

    upsilon: np.ndarray
    bias: np.ndarray

    @classmethod
    def initial(cls, device_count: int) -> "ControlParams":
        return cls(np.ones(device_count), np.zeros(device_count))

    def copy(self) -> "ControlParams":
        return ControlParams(self.upsilon.copy(), self.bias.copy())


@dataclass(frozen=True)
class NonIIDReport:
    js: np.ndarray
    degree: np.ndarray


def noniid_degree(js_values, cp: ControlParams, floor: float = DEGREE_FLOOR) -> NonIIDReport:
    js_values = np.asarray(js_values, dtype=float)
    if js_values.shape != cp.upsilon.shape:
        raise StructuralError("one JS value per device is required")
    if np.any(js_values < -1e-12) or np.any(js_values > np.log(2) + 1e-12):
        raise DomainError("JS divergences must lie in [0, ln 2]")
    degree = np.maximum(cp.upsilon * js_values + cp.bias, floor)
    return NonIIDReport(js_values, degree)


def per_class_gradients(spec: nn.ModelSpec, params: np.ndarray, balanced: Dataset) -> list[np.ndarray]:
    """Gradient of the mean loss restricted to each class of a balanced set."""
    grads = []
    for c in range(balanced.class_count):
        idx = np.flatnonzero(balanced.labels == c)
        if idx.size == 0:
            raise DomainError(f"balanced set has no samples of class {c}")
        grads.append(nn.backward(spec, params, balanced.features[idx], balanced.labels[idx]))
    return grads


def estimate_distribution(per_class_grads, estimation_beta: float) -> LabelDistribution:
    """Softmax of beta / ||grad_i||^2 over classes.

    Classes whose loss the model has already driven down (small gradient)
    are estimated to be common on the device.
    """
    if len(per_class_grads) < 2:
        raise DomainError("need gradients for at least two classes")
    sq = np.array([float(np.dot(g, g)) for g in per_class_grads])
    if np.any(sq <= 0) or not np.all(np.isfinite(sq)):
        raise NumericalError(
            "zero or non-finite per-class gradient norm; enlarge the balanced split"
        )
    logits = estimation_beta / sq
    logits -= logits.max()
    w = np.exp(logits)
    return LabelDistribution(w / w.sum())


@dataclass(frozen=True)
class GammaOracle:
    """Ground-truth non-IID measure F_k(w*) - F_k(w_k*) per device."""

    gamma: np.ndarray
    global_loss: np.ndarray  # F_k(w*)
    local_loss: np.ndarray  # F_k(w_k*)
    converged: np.ndarray
    residual_grad_norm: np.ndarray


def _fit(spec, x, y, w0, l2, budget, tol):
    def objective(w):
        loss, g = nn.value_and_grad(spec, w, x, y)
        return loss + 0.5 * l2 * w @ w, g + l2 * w

    res = optimize.minimize(
        objective, w0, jac=True, method="L-BFGS-B", options={"maxiter": budget, "gtol": tol}
    )
    _, g = objective(res.x)
    return res.x, float(np.linalg.norm(g))


def gamma_oracle(
    devices: list[Dataset],
    model_spec: nn.ModelSpec,
    training_budget: int = 500,
    l2: float = 1e-3,
    tol: float = 1e-7,
    seed: int = 0,
) -> GammaOracle:
    """Train pooled and per-device optima and report the local loss gap.

    Both objectives carry the same small ridge term so the optima exist
    even on separable local data; the reported losses include it. Only a
    test oracle: nothing at run time depends on it.
    """
    if not devices:
        raise DomainError("no devices")
    pooled = Dataset.concat(devices)
    w0 = np.zeros(model_spec.n_params)
    if model_spec.hidden_sizes:
        w0 = model_spec.init_params(np.random.default_rng(seed))
    w_star, res_star = _fit(model_spec, pooled.features, pooled.labels, w0, l2, training_budget, tol)

    def reg_loss(w, d):
        return nn.forward(model_spec, w, d.features, d.labels)[1] + 0.5 * l2 * w @ w

    gamma, glob, loc, ok, resid = [], [], [], [], []
    for d in devices:
        w_k, r_k = _fit(model_spec, d.features, d.labels, w_star.copy(), l2, training_budget, tol)
        f_glob, f_loc = reg_loss(w_star, d), reg_loss(w_k, d)
        gamma.append(f_glob - f_loc)
        glob.append(f_glob)
        loc.append(f_loc)
        resid.append(r_k)
        ok.append(r_k <= 1e3 * tol and res_star <= 1e3 * tol)
    return GammaOracle(np.array(gamma), np.array(glob), np.array(loc), np.array(ok), np.array(resid))


def pearson(x, y) -> tuple[float, float]:
    """Pearson r and its two-sided p-value (t distribution, n-2 dof)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise StructuralError("pearson needs two equal-length 1-D samples")
    n = x.size
    if n < 3:
        raise DomainError("pearson needs at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise DomainError("pearson undefined for a constant sample")
    r = float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), n - 2))
