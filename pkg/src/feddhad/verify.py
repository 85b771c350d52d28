"""Golden formula checks and the weighting-inequality witness.

Each check returns ``(passed, detail)``. The registry backs the ``verify``
subcommand and the golden test suite.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import aggregation as agg
from . import dropout as dd
from . import nn
from .config import ConfigError, parse_config
from .data import (
    Dataset,
    LabelDistribution,
    dirichlet_partition,
    generate_synthetic,
    label_distribution,
    server_splits,
)
from .divergence import (
    ControlParams,
    estimate_distribution,
    gamma_oracle,
    js,
    kl,
    noniid_degree,
    pearson,
)
from .simulation import DeviceProfile, evaluate, round_time

TOL = 1e-9
CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {}


def check(name: str):
    def register(fn):
        CHECKS[name] = fn
        return fn

    return register


def close(got, want, tol: float = TOL) -> tuple[bool, str]:
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    err = float(np.max(np.abs(got - want))) if got.size else 0.0
    return bool(got.shape == want.shape and err <= tol), f"got {np.round(got, 12).tolist()}, want {np.round(want, 12).tolist()}"


def raises(fn, exc_type) -> bool:
    try:
        fn()
    except exc_type:
        return True
    return False


def _ds(x, y, c):
    return Dataset(np.asarray(x, dtype=float), np.asarray(y), c)


# nn-engine


@check("nn: uniform logits over 2 classes give loss ln 2")
def _():
    spec = nn.ModelSpec((3, 2))
    x = np.random.default_rng(0).normal(size=(5, 3))
    _, loss, _ = nn.forward(spec, np.zeros(spec.n_params), x, np.array([0, 1, 0, 1, 1]))
    return close(loss, math.log(2))


@check("nn: identity mask leaves the loss unchanged")
def _():
    spec = nn.ModelSpec((4, 6, 3))
    rng = np.random.default_rng(1)
    w, x, y = spec.init_params(rng), rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
    a = nn.forward(spec, w, x, y)[1]
    b = nn.forward(spec, w, x, y, mask=np.ones(6))[1]
    return a == b, f"{a!r} vs {b!r}"


@check("nn: dense 2->3 layer costs 15 forward FLOPs per sample")
def _():
    meter = nn.FlopMeter()
    spec = nn.ModelSpec((2, 3))
    nn.forward(spec, np.zeros(spec.n_params), np.ones((1, 2)), np.array([0]), meter=meter)
    return meter.forward_flops == 15, f"{meter.forward_flops} FLOPs"


@check("nn: symmetric two-class batch gives bias gradients summing to zero")
def _():
    spec = nn.ModelSpec((2, 2))
    x = np.array([[1.0, 2.0], [1.0, 2.0]])
    g = nn.backward(spec, np.zeros(spec.n_params), x, np.array([0, 1]))
    return close(g[-2:].sum(), 0.0)


@check("nn: a dropped unit gets exactly zero incoming-weight gradient")
def _():
    spec = nn.ModelSpec((3, 4, 2))
    rng = np.random.default_rng(2)
    w = spec.init_params(rng)
    mask = np.array([2.0, 0.0, 2.0, 2.0])
    g = nn.backward(spec, w, rng.normal(size=(6, 3)), rng.integers(0, 2, 6), mask=mask)
    W1 = g[: 3 * 4].reshape(4, 3)
    return bool(np.all(W1[1] == 0.0) and g[12 + 1] == 0.0), f"row {W1[1].tolist()}"


@check("nn: sgd step with zero gradient is the identity")
def _():
    return close(nn.sgd_step(np.array([1.0, 2.0]), np.zeros(2), 0.1), [1.0, 2.0])


@check("nn: sgd step 1.0 - 0.1 * 2.0 = 0.8")
def _():
    return close(nn.sgd_step(np.array([1.0]), np.array([2.0]), 0.1), [0.8])


@check("nn: learning rate after 10 decays of 0.99 is 0.1 * 0.99^10")
def _():
    return close(nn.decayed_lr(0.1, 0.99, 10), 0.09043820750088045)


@check("nn: quadratic 0.5(3w1^2 + w2^2) has eigenvalues (1, 3) and rank 2")
def _():
    hb = nn.HessianBlock.from_matrix(np.diag([3.0, 1.0]))
    ok, detail = close(hb.eigenvalues, [1.0, 3.0])
    return ok and hb.rank_estimate == 2, detail


# data-heterogeneity


@check("data: tight two-class clusters are learnable by a logistic model")
def _():
    ds = generate_synthetic(2, 2, 50, 0.1, seed=7)
    spec = nn.ModelSpec((2, 2))
    w = nn.local_sgd(spec, np.zeros(spec.n_params), ds.features, ds.labels, epochs=50, batch_size=10, lr=0.5, rng=np.random.default_rng(0))
    acc = float(np.mean(nn.predict(spec, w, ds.features) == ds.labels))
    return acc > 0.95, f"train accuracy {acc}"


@check("data: same seed gives identical datasets")
def _():
    a, b = generate_synthetic(3, 4, 20, 0.5, 11), generate_synthetic(3, 4, 20, 0.5, 11)
    return bool(np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)), ""


@check("data: zero spread puts every sample on its class mean")
def _():
    ds = generate_synthetic(3, 4, 10, 0.0, 5)
    ok = all(np.ptp(ds.features[ds.labels == c], axis=0).max() == 0 for c in range(3))
    return ok, ""


@check("data: a single device receives every sample")
def _():
    ds = generate_synthetic(4, 3, 10, 0.5, 0)
    plan = dirichlet_partition(ds, 1, 0.5, 0)
    return bool(np.array_equal(plan.device_indices[0], np.arange(len(ds)))), ""


@check("data: per-class allocations sum to the class totals")
def _():
    ds = generate_synthetic(5, 3, 37, 0.5, 0)
    plan = dirichlet_partition(ds, 9, 0.3, 4)
    counts = sum(np.bincount(ds.labels[ix], minlength=5) for ix in plan.device_indices)
    return bool(np.array_equal(counts, np.full(5, 37))), f"{counts.tolist()}"


@check("data: concentration 1e4 gives near-uniform devices (TV <= 0.05 over 20 seeds)")
def _():
    ds = Dataset(np.zeros((10 * 1000, 1)), np.repeat(np.arange(10), 1000), 10)
    tv = np.zeros(10)
    for seed in range(20):
        plan = dirichlet_partition(ds, 10, 1e4, seed)
        tv += [0.5 * np.abs(label_distribution(ds, ix).probs - 0.1).sum() for ix in plan.device_indices]
    worst = float((tv / 20).max())
    return worst <= 0.05, f"worst mean TV {worst:.4f}"


@check("data: labels {0,0,1,1} give [0.5, 0.5]")
def _():
    return close(label_distribution(_ds(np.zeros((4, 1)), [0, 0, 1, 1], 2)).probs, [0.5, 0.5])


@check("data: one sample of class 2 gives a point mass")
def _():
    return close(label_distribution(_ds(np.zeros((1, 1)), [2], 3)).probs, [0.0, 0.0, 1.0])


@check("data: 5 per class over 2 classes gives a balanced split of 10")
def _():
    ds = generate_synthetic(2, 2, 20, 0.5, 0)
    bal, _, _ = server_splits(ds, 5, 0.1, 0)
    ok, detail = close(label_distribution(bal).probs, [0.5, 0.5])
    return ok and len(bal) == 10, detail


@check("data: zero validation fraction gives an empty validation set")
def _():
    _, val, _ = server_splits(generate_synthetic(2, 2, 20, 0.5, 0), 5, 0.0, 0)
    return len(val) == 0, f"{len(val)} samples"


# divergence


@check("divergence: kl(P, P) = 0")
def _():
    return close(kl([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]), 0.0)


@check("divergence: kl([1,0], [0.5,0.5]) = ln 2")
def _():
    return close(kl([1.0, 0.0], [0.5, 0.5]), math.log(2))


@check("divergence: kl([0.5,0.5], [0.25,0.75]) = 0.5 ln 2 + 0.5 ln(2/3)")
def _():
    return close(kl([0.5, 0.5], [0.25, 0.75]), 0.5 * math.log(2) + 0.5 * math.log(2 / 3))


@check("divergence: js(P, P) = 0")
def _():
    return close(js([0.1, 0.9], [0.1, 0.9]), 0.0)


@check("divergence: js([1,0], [0.5,0.5]) = 0.5 ln(4/3) + 0.25 ln(2/3) + 0.25 ln 2")
def _():
    want = 0.5 * math.log(4 / 3) + 0.5 * (0.5 * math.log(2 / 3) + 0.5 * math.log(2))
    return close(js([1.0, 0.0], [0.5, 0.5]), want)


@check("divergence: js of disjoint supports = ln 2")
def _():
    return close(js([1.0, 0.0], [0.0, 1.0]), math.log(2))


@check("divergence: initial control params give degree = js")
def _():
    v = np.array([0.1, 0.4])
    return close(noniid_degree(v, ControlParams.initial(2)).degree, v)


@check("divergence: upsilon 2, bias 0.1, js 0.3 give degree 0.7")
def _():
    cp = ControlParams(np.array([2.0]), np.array([0.1]))
    return close(noniid_degree(np.array([0.3]), cp).degree, [0.7])


@check("divergence: negative degrees are clamped to the floor")
def _():
    cp = ControlParams(np.array([0.0]), np.array([-1.0]))
    return close(noniid_degree(np.array([0.3]), cp).degree, [1e-6])


@check("divergence: equal gradient norms estimate a uniform distribution")
def _():
    g = [np.ones(3)] * 4
    return close(estimate_distribution(g, 1.0).probs, [0.25] * 4)


@check("divergence: beta 1, squared norms (1, 2) estimate (0.6225, 0.3775)")
def _():
    g = [np.array([1.0]), np.array([math.sqrt(2.0)])]
    e1, eh = math.e, math.exp(0.5)
    return close(estimate_distribution(g, 1.0).probs, [e1 / (e1 + eh), eh / (e1 + eh)])


@check("divergence: IID equal partitions have gamma within 0.02 of 0")
def _():
    ds = generate_synthetic(3, 4, 1000, 0.8, 3)
    order = np.argsort(np.arange(len(ds)) % 4, kind="stable")
    parts = [ds.subset(ix) for ix in np.split(order, 4)]
    g = gamma_oracle(parts, nn.ModelSpec((4, 3))).gamma
    return bool(np.all(np.abs(g) <= 0.02)), f"gamma {np.round(g, 4).tolist()}"


@check("divergence: a single-class device has a larger gamma than an IID device")
def _():
    ds = generate_synthetic(3, 4, 120, 0.8, 3)
    single = ds.subset(np.flatnonzero(ds.labels == 0)[:60])
    iid = ds.subset(np.arange(60))
    rest = ds.subset(np.arange(60, len(ds)))
    g = gamma_oracle([single, iid, rest], nn.ModelSpec((4, 3))).gamma
    return bool(g[0] > g[1]), f"single {g[0]:.4f}, iid {g[1]:.4f}"


@check("divergence: pearson of y = 2x + 1 is 1")
def _():
    x = np.arange(6.0)
    return close(pearson(x, 2 * x + 1)[0], 1.0)


@check("divergence: pearson of y = -x is -1")
def _():
    x = np.arange(6.0)
    return close(pearson(x, -x)[0], -1.0)


@check("divergence: pearson((1,2,3), (1,3,2)) = 0.5")
def _():
    return close(pearson([1.0, 2.0, 3.0], [1.0, 3.0, 2.0])[0], 0.5)


# aggregation


def _bundles(values, counts, coord_keep=None):
    out = []
    for k, (v, n) in enumerate(zip(values, counts)):
        keep = None if coord_keep is None else coord_keep[k]
        out.append(agg.UpdateBundle(k, np.atleast_1d(np.asarray(v, dtype=float)), n, None, keep))
    return out


@check("aggregation: fedavg weights for n = (100, 300) are (0.25, 0.75)")
def _():
    return close(agg.fedavg_weights(_bundles([0, 0], [100, 300])).q, [0.25, 0.75])


@check("aggregation: equal sample counts over 10 devices give 0.1 each")
def _():
    return close(agg.fedavg_weights(_bundles([0] * 10, [7] * 10)).q, [0.1] * 10)


@check("aggregation: a single device gets weight 1")
def _():
    return close(agg.fedavg_weights(_bundles([0], [5])).q, [1.0])


@check("aggregation: equal degrees reduce feddh weights to fedavg")
def _():
    b = _bundles([0, 0, 0], [10, 20, 70])
    rep = noniid_degree(np.full(3, 0.2), ControlParams.initial(3))
    return close(agg.feddh_weights(b, rep).q, agg.fedavg_weights(b).q, 1e-15)


@check("aggregation: n = (100, 300), degrees (1, 2) give weights (0.4, 0.6)")
def _():
    rep = noniid_degree(np.array([1.0, 2.0]) * 0.25, ControlParams(np.full(2, 4.0), np.zeros(2)))
    return close(agg.feddh_weights(_bundles([0, 0], [100, 300]), rep).q, [0.4, 0.6])


@check("aggregation: no drops, q = (0.5, 0.5), values (1, 3) average to 2")
def _():
    b = _bundles([1.0, 3.0], [1, 1])
    return close(agg.masked_aggregate(np.zeros(1), b, agg.AggregationWeights([0.5, 0.5])), [2.0])


@check("aggregation: one device dropped the coordinate, the other's value stands")
def _():
    b = _bundles([5.0, 2.0], [1, 1], [np.array([False]), np.array([True])])
    return close(agg.masked_aggregate(np.zeros(1), b, agg.AggregationWeights([0.4, 0.6])), [2.0])


@check("aggregation: a coordinate dropped everywhere keeps its previous value")
def _():
    b = _bundles([5.0, 2.0], [1, 1], [np.array([False]), np.array([False])])
    return close(agg.masked_aggregate(np.array([0.7]), b, agg.AggregationWeights([0.4, 0.6])), [0.7])


def _control_fixture(identical: bool):
    spec = nn.ModelSpec((3, 2))
    rng = np.random.default_rng(4)
    base = rng.normal(size=spec.n_params)
    params = [base, base] if identical else [base, base + rng.normal(size=spec.n_params)]
    b = [agg.UpdateBundle(k, p, 10 + k) for k, p in enumerate(params)]
    val = Dataset(rng.normal(size=(12, 3)), rng.integers(0, 2, 12), 2)
    cp = ControlParams.initial(2)
    rep = noniid_degree(np.array([0.2, 0.5]), cp)
    return spec, b, val, cp, rep, base


@check("aggregation: zero validation gradient leaves control params unchanged")
def _():
    # zero model on a symmetric validation batch has zero gradient
    spec = nn.ModelSpec((2, 2))
    val = _ds([[1.0, 1.0], [1.0, 1.0]], [0, 1], 2)
    zero = np.zeros(spec.n_params)
    b = [agg.UpdateBundle(0, zero, 3), agg.UpdateBundle(1, zero, 5)]
    cp = ControlParams(np.array([1.0, 1.5]), np.array([0.05, 0.1]))
    rep = noniid_degree(np.array([0.2, 0.5]), cp)
    out = agg.update_control_params(cp, b, rep, val, spec=spec, global_prev=zero, lr_upsilon=0.1, lr_bias=0.1)
    return close(np.concatenate([out.upsilon, out.bias]), np.concatenate([cp.upsilon, cp.bias]), 0.0)


@check("aggregation: identical uploads give zero control gradients")
def _():
    spec, b, val, cp, rep, base = _control_fixture(True)
    g_u, g_b = agg.control_gradients(cp, b, rep, val, spec, base)
    return close(np.concatenate([g_u, g_b]), np.zeros(4), 1e-15)


@check("aggregation: inequality gap for n = (1,1), gamma = (1,2) is -1/6")
def _():
    return close(agg.theorem2_gap([1, 1], [1, 2]), -1 / 6)


@check("aggregation: inequality gap with equal gammas is 0")
def _():
    return close(agg.theorem2_gap([3, 5, 9], [0.4, 0.4, 0.4]), 0.0, 1e-15)


@check("aggregation: inequality gap <= 1e-12 on 1,000 random instances")
def _():
    worst = theorem2_witness(1000, seed=0)
    return worst <= 1e-12, f"largest gap {worst:.3e}"


def theorem2_witness(count: int, seed: int = 0) -> float:
    """Largest gap over random instances of sizes 2 to 20."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(count):
        size = rng.integers(2, 21)
        n = rng.integers(1, 1000, size)
        gamma = rng.uniform(1e-3, 5.0, size)
        worst = max(worst, agg.theorem2_gap(n, gamma))
    return float(worst)


# adaptive-dropout


@check("dropout: a unit with all-zero incoming weights scores lowest")
def _():
    spec = nn.ModelSpec((3, 4, 2))
    w = spec.init_params(np.random.default_rng(0))
    w[3:6] = 0.0  # unit 1
    s = dd.importance_scores(spec, w).scores
    return int(np.argmin(s)) == 1, f"scores {np.round(s, 4).tolist()}"


@check("dropout: identical weight rows give identical scores")
def _():
    spec = nn.ModelSpec((3, 4, 2))
    w = spec.init_params(np.random.default_rng(0))
    w[3:6] = w[0:3]
    s = dd.importance_scores(spec, w).scores
    return s[0] == s[1], f"{s[0]} vs {s[1]}"


@check("dropout: doubling a layer keeps the normalized-score order")
def _():
    spec = nn.ModelSpec((3, 5, 2))
    w = spec.init_params(np.random.default_rng(3))
    s1 = dd.importance_scores(spec, w).scores
    w2 = w.copy()
    w2[: 3 * 5] *= 2
    s2 = dd.importance_scores(spec, w2).scores
    same = np.array_equal(np.argsort(dd.normalized_scores(spec, s1)), np.argsort(dd.normalized_scores(spec, s2)))
    ok, detail = close(s2, 2 * s1, 1e-12)
    return ok and same, detail


@check("dropout: variation of identical vectors is 0")
def _():
    v = dd.ImportanceVector(np.array([1.0, 2.0]))
    return close(dd.variation(v, v), 0.0)


@check("dropout: variation of (1,2) and (1,5) is 3")
def _():
    return close(dd.variation(dd.ImportanceVector(np.array([1.0, 2.0])), dd.ImportanceVector(np.array([1.0, 5.0]))), 3.0)


@check("dropout: variation is symmetric")
def _():
    a, b = dd.ImportanceVector(np.array([0.3, -1.0, 2.0])), dd.ImportanceVector(np.array([1.0, 4.0, 0.5]))
    return dd.variation(a, b) == dd.variation(b, a), ""


def trigger_trace(deltas, patience=3, state=None) -> list[bool]:
    state = dd.TriggerState(patience=patience) if state is None else state
    fired = []
    for d in deltas:
        f, state = dd.should_update(state, d)
        fired.append(f)
    return fired


@check("dropout: strictly decreasing variation never fires in warmup")
def _():
    fired = trigger_trace([5.0, 4.0, 3.0, 2.0, 1.0, 0.5])
    return not any(fired), f"{fired}"


@check("dropout: constant variation fires on the 3rd observation")
def _():
    fired = trigger_trace([2.0, 2.0, 2.0])
    return fired == [False, False, True], f"{fired}"


@check("dropout: after warmup, (5, 5, 4) fires at the 4")
def _():
    state = dd.TriggerState(phase="tracking")
    fired = trigger_trace([5.0, 5.0, 4.0], state=state)
    return fired == [False, False, True], f"{fired}"


def _hb(eigs):
    return nn.HessianBlock.from_matrix(np.diag(eigs))


@check("dropout: eigenvalues (1,3), L 0.1 give base rate 0.5")
def _():
    return close(dd.base_rate(_hb([1.0, 3.0]), 0.1), 0.5)


@check("dropout: eigenvalues (1, 1.1, 1.2), L 1 fall back to 1.0")
def _():
    return close(dd.base_rate(_hb([1.0, 1.1, 1.2]), 1.0), 1.0)


@check("dropout: eigenvalues (0, 10), L 0 give base rate 0.5")
def _():
    # the zero eigenvalue counts toward h, so the spectrum is passed explicitly
    hb = nn.HessianBlock(np.diag([0.0, 10.0]), -1, np.array([0.0, 10.0]), 2, np.array([0.0, 10.0]))
    return close(dd.base_rate(hb, 0.0), 0.5)


@check("dropout: equal rates aggregate to that rate")
def _():
    return close(dd.aggregate_base_rates([0.5, 0.5], [3, 17]), 0.5)


@check("dropout: rates (0.4, 0.8), counts (1, 3) aggregate to 0.7")
def _():
    return close(dd.aggregate_base_rates([0.4, 0.8], [1, 3]), 0.7)


@check("dropout: a single device's rate passes through")
def _():
    return close(dd.aggregate_base_rates([0.37], [9]), 0.37)


@check("dropout: ET (10, 20), d_avg 0.5 give ET_max 10, keep (1, 0.5), drop (0, 0.5)")
def _():
    spec = nn.ModelSpec((2, 4, 2))
    tm = dd.DeviceTimeModel.from_times([10.0, 20.0])
    plan = dd.plan_rates(0.5, tm, dd.ImportanceVector(np.arange(4.0)), spec)
    ok, detail = close(np.concatenate([[plan.et_max], plan.keep_fraction, plan.per_device_rate]), [10, 1, 0.5, 0, 0.5])
    return ok, detail


@check("dropout: two equal units with D = 0.3 each get rate 0.3")
def _():
    spec = nn.ModelSpec((2, 2, 2))
    tm = dd.DeviceTimeModel([10.0], 7.0)
    plan = dd.plan_rates(1.0, tm, dd.ImportanceVector(np.array([1.0, 1.0])), spec)
    return close(plan.per_unit_rate[0], [0.3, 0.3], 1e-12)


@check("dropout: the fastest device is never dropped")
def _():
    spec = nn.ModelSpec((2, 3, 2))
    tm = dd.DeviceTimeModel.from_times([3.0, 9.0, 5.0, 4.0])
    plan = dd.plan_rates(0.4, tm, dd.ImportanceVector(np.arange(3.0)), spec)
    return plan.per_device_rate[0] == 0.0 and np.all(plan.per_unit_rate[0] == 0), ""


@check("dropout: rate 0 gives mask value 1 with certainty")
def _():
    plan = dd.DropoutPlan.no_dropout(1, 50)
    m = dd.sample_mask(plan, 0, np.random.default_rng(0))
    return bool(np.all(m.values == 1.0) and not m.dropped.any()), ""


@check("dropout: rate 0.5 gives masks in {0, 2} with mean 1 +- 0.02 over 1e5 draws")
def _():
    plan = dd.DropoutPlan(1.0, 1.0, np.array([0.5]), np.full((1, 100_000), 0.5), np.array([0.5]), np.zeros(1, bool))
    m = dd.sample_mask(plan, 0, np.random.default_rng(0))
    mean = float(m.values.mean())
    ok = set(np.unique(m.values).tolist()) <= {0.0, 2.0} and abs(mean - 1) <= 0.02
    return ok and np.array_equal(m.dropped, m.values == 0), f"mean {mean:.4f}"


@check("dropout: a constant Hessian has Lipschitz estimate <= 1e-6")
def _():
    H = np.diag([3.0, 1.0])
    est = dd.lipschitz_of_hessian(lambda w: H, np.zeros(2), rng=np.random.default_rng(0))
    return est <= 1e-6 and est >= 0, f"estimate {est}"


@check("dropout: doubling the probe radius changes the estimate by < 2x")
def _():
    spec = nn.ModelSpec((3, 3))
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(20, 3)), rng.integers(0, 3, 20)
    w = rng.normal(size=spec.n_params) * 0.3
    a = dd.lipschitz_estimate(spec, w, w, x, y, radius=1e-2, seed=1)
    b = dd.lipschitz_estimate(spec, w, w, x, y, radius=2e-2, seed=1)
    ratio = max(a, b) / min(a, b)
    return ratio < 2, f"{a:.4g} vs {b:.4g}"


# orchestrator


def _profile(k, rate, bw, n=10):
    return DeviceProfile(k, _ds(np.zeros((n, 1)), np.zeros(n, int), 2), rate, bw)


@check("orchestrator: identical profiles without dropout give any device's time")
def _():
    p = [_profile(k, 0.5, 1e3) for k in range(3)]
    t, times = round_time(p, [400.0] * 3, [2.0] * 3)
    return close([t], [times[0]])


@check("orchestrator: device times (3 s, 7 s) give a 7 s round")
def _():
    p = [_profile(0, 1.0, 1e9), _profile(1, 1.0, 1e9)]
    t, _ = round_time(p, [0.0, 0.0], [3.0, 7.0])
    return close(t, 7.0)


@check("orchestrator: keep fraction 0.5 roughly halves a compute-bound device's time")
def _():
    from .simulation import device_mflops

    spec = nn.ModelSpec((20, 64, 10))
    p = _profile(0, 1.0, 1e9)
    keep = np.arange(64) % 2 == 0
    full = p.time(spec.kept_params() * 4, device_mflops(spec, 100, 5))
    half = p.time(spec.kept_params(keep) * 4, device_mflops(spec, 100, 5, keep))
    ratio = half / full
    return abs(ratio - 0.5) <= 0.05, f"ratio {ratio:.4f}"


@check("orchestrator: perfectly separated data is classified with accuracy 1")
def _():
    spec = nn.ModelSpec((2, 2))
    w = np.array([1.0, 0.0, -1.0, 0.0, 0.0, 0.0])
    test = _ds([[2.0, 0.0], [3.0, 1.0], [-2.0, 0.0], [-1.0, 5.0]], [0, 0, 1, 1], 2)
    return close(evaluate(spec, w, test)[0], 1.0)


@check("orchestrator: uniform logits on balanced 4 classes give chance accuracy")
def _():
    spec = nn.ModelSpec((3, 4))
    test = _ds(np.random.default_rng(0).normal(size=(40, 3)), np.repeat(np.arange(4), 10), 4)
    acc = evaluate(spec, np.zeros(spec.n_params), test)[0]
    return abs(acc - 0.25) <= 0.1, f"accuracy {acc}"


@check("orchestrator: accuracy matches a brute-force recount")
def _():
    spec = nn.ModelSpec((4, 5, 3))
    rng = np.random.default_rng(9)
    w = spec.init_params(rng)
    test = _ds(rng.normal(size=(50, 4)), rng.integers(0, 3, 50), 3)
    logits = nn.forward(spec, w, test.features, test.labels)[0]
    recount = sum(int(np.argmax(row) == lab) for row, lab in zip(logits, test.labels)) / 50
    return close(evaluate(spec, w, test)[0], recount, 0.0)


# cli-io


@check("config: empty file gives the default federation settings")
def _():
    c = parse_config(None, [])
    f = c.federation
    got = [f.device_count, f.selection_fraction, f.local_epochs, f.batch_size, f.lr, f.lr_decay]
    return close(got, [100, 0.1, 5, 10, 0.1, 0.99])


@check("config: override method=feddhad changes only the method")
def _():
    a, b = parse_config(None, ["method=feddhad"]), parse_config(None, [])
    b.experiment.method = "feddhad"
    return a == b, a.method


@check("config: C=1.5 is rejected with the selection-fraction message")
def _():
    try:
        parse_config(None, ["C=1.5"])
    except ConfigError as exc:
        return str(exc) == "selection fraction must be in (0,1]", str(exc)
    return False, "accepted"


def run_checks(names=None) -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        if names is not None and name not in names:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out


__all__ = ["CHECKS", "run_checks", "theorem2_witness", "trigger_trace", "LabelDistribution"]
