"""Round protocol, simulated wall clock and metric recording.

Random streams are keyed by purpose so that methods sharing a seed see
the same data, device profiles, device selections and batch orders;
only dropout masks draw from a method-specific stream.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import aggregation as agg
from . import dropout as dd
from . import nn
from .config import METHODS, ExperimentConfig
from .data import (
    Dataset,
    dirichlet_partition,
    generate_synthetic,
    global_distribution,
    label_distribution,
    server_splits,
    stratified_split,
)
from .divergence import (
    ControlParams,
    estimate_distribution,
    gamma_oracle,
    js,
    noniid_degree,
    pearson,
    per_class_gradients,
)
from .errors import FedError

log = logging.getLogger(__name__)

# stream tags
_PROFILE, _SELECT, _SHUFFLE, _MASK, _PROBE, _INIT = range(6)

CSV_HEADER = "round,wall_clock_s,accuracy,loss,cum_mflops"


def fmt(x: float) -> str:
    """Float with 9 significant digits."""
    return format(float(x), ".9g")


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    data: Dataset
    compute_rate: float  # seconds per MFLOP
    bandwidth: float  # bytes per second, each direction

    def __post_init__(self) -> None:
        if not (self.compute_rate > 0 and self.bandwidth > 0):
            raise ValueError("compute_rate and bandwidth must be positive")

    @property
    def n_k(self) -> int:
        return len(self.data)

    def time(self, kept_bytes: float, mflops: float) -> float:
        return 2.0 * kept_bytes / self.bandwidth + mflops * self.compute_rate


def round_time(profiles, kept_bytes, mflops) -> tuple[float, np.ndarray]:
    """Synchronous round time: the slowest device's download+upload+compute."""
    times = np.array([p.time(b, m) for p, b, m in zip(profiles, kept_bytes, mflops)])
    if times.size == 0:
        return 0.0, times
    return float(times.max()), times


def evaluate(spec: nn.ModelSpec, params: np.ndarray, test: Dataset) -> tuple[float, float]:
    if len(test) == 0:
        raise ValueError("test set is empty")
    _, loss, _ = nn.forward(spec, params, test.features, test.labels)
    acc = float(np.mean(nn.predict(spec, params, test.features) == test.labels))
    return acc, float(loss)


@dataclass
class Environment:
    """Everything that depends on the seed but not on the method."""

    spec: nn.ModelSpec
    profiles: list[DeviceProfile]
    test: Dataset
    balanced: Dataset
    validation: Dataset
    js_true: np.ndarray
    et_base: np.ndarray  # full-model round time per device
    init_params: np.ndarray

    @property
    def device_count(self) -> int:
        return len(self.profiles)

    @property
    def sample_counts(self) -> np.ndarray:
        return np.array([p.n_k for p in self.profiles])


def device_mflops(spec: nn.ModelSpec, n_k: int, epochs: int, unit_keep=None) -> float:
    """Forward plus backward MFLOPs of ``epochs`` local passes."""
    fwd = spec.flops_per_sample(unit_keep)
    return n_k * epochs * fwd * (1 + nn.BACKWARD_FACTOR) / 1e6


def build_environment(config: ExperimentConfig) -> Environment:
    d, fed, dev = config.data, config.federation, config.devices
    seed = config.seed
    data_seed = seed if d.data_seed is None else d.data_seed
    pool = generate_synthetic(d.class_count, d.dim, d.per_class_count, d.cluster_spread, data_seed, d.modes_per_class)
    test, train = stratified_split(pool, d.test_fraction, data_seed + 1)
    balanced, validation, train = server_splits(train, d.balanced_per_class, d.validation_fraction, data_seed + 2)
    plan = dirichlet_partition(train, fed.device_count, d.partition_beta, data_seed + 3)
    parts = [train.subset(ix) for ix in plan.device_indices]

    rng = np.random.default_rng([seed, _PROFILE])
    compute = dev.compute_rate * dev.compute_span ** rng.random(fed.device_count)
    bandwidth = dev.bandwidth / dev.bandwidth_span ** rng.random(fed.device_count)
    profiles = [DeviceProfile(k, parts[k], float(compute[k]), float(bandwidth[k])) for k in range(fed.device_count)]

    spec = nn.ModelSpec((d.dim, *config.model.hidden, d.class_count))
    dists = [label_distribution(p) for p in parts]
    p_m = global_distribution(dists, plan.sizes)
    js_true = np.array([js(p, p_m) for p in dists])
    full_bytes = spec.kept_params() * nn.BYTES_PER_PARAM
    et_base = np.array(
        [p.time(full_bytes, device_mflops(spec, p.n_k, fed.local_epochs)) for p in profiles]
    )
    init = spec.init_params(np.random.default_rng([seed, _INIT]))
    return Environment(spec, profiles, test, balanced, validation, js_true, et_base, init)


@dataclass
class RoundMetrics:
    round: int
    wall_clock_s: float
    accuracy: float
    loss: float
    cum_mflops: float
    keep_fractions: dict[int, float] = field(default_factory=dict)
    weights: dict[int, float] = field(default_factory=dict)
    round_time_s: float = 0.0
    replanned: bool = False

    def csv_row(self) -> str:
        return ",".join(
            [str(self.round), fmt(self.wall_clock_s), fmt(self.accuracy), fmt(self.loss), fmt(self.cum_mflops)]
        )

    def detail(self) -> dict:
        return {
            "round": self.round,
            "round_time_s": float(fmt(self.round_time_s)),
            "replanned": self.replanned,
            "keep_fractions": {str(k): float(fmt(v)) for k, v in self.keep_fractions.items()},
            "weights": {str(k): float(fmt(v)) for k, v in self.weights.items()},
        }


@dataclass
class SimState:
    config: ExperimentConfig
    env: Environment
    params: np.ndarray
    round: int = 0
    wall_clock_s: float = 0.0
    cum_mflops: float = 0.0
    accuracy: float = float("nan")
    loss: float = float("nan")
    control: ControlParams | None = None
    js_used: np.ndarray | None = None  # JS values fed to the degree map
    estimated: dict[int, np.ndarray] = field(default_factory=dict)  # feddhe estimates
    trigger: dd.TriggerState | None = None
    plan: dd.DropoutPlan | None = None

    @property
    def method(self) -> str:
        return self.config.method

    @property
    def method_code(self) -> int:
        return METHODS.index(self.method)


def uses_feddh(method: str) -> bool:
    return method in ("feddh", "feddhad", "feddhe")


def uses_dropout(method: str) -> bool:
    return method in ("fedad", "feddhad")


def init_state(config: ExperimentConfig, env: Environment | None = None) -> SimState:
    env = build_environment(config) if env is None else env
    state = SimState(config, env, env.init_params.copy())
    N = env.device_count
    if uses_feddh(config.method):
        state.control = ControlParams.initial(N)
        # feddhe starts from uniform degrees until devices are estimated
        state.js_used = env.js_true.copy() if config.method != "feddhe" else np.zeros(N)
    if uses_dropout(config.method):
        state.trigger = dd.TriggerState(config.fedad.interval, config.fedad.patience)
        state.plan = dd.DropoutPlan.no_dropout(N, env.spec.n_hidden_units)
    state.accuracy, state.loss = evaluate(env.spec, state.params, env.test)
    return state


def select_devices(seed: int, t: int, device_count: int, fraction: float) -> np.ndarray:
    m = max(1, int(round(device_count * fraction)))
    rng = np.random.default_rng([seed, _SELECT, t])
    return np.sort(rng.choice(device_count, size=m, replace=False))


@dataclass(frozen=True)
class _LocalResult:
    bundle: agg.UpdateBundle
    mflops: float
    kept_bytes: float
    keep_fraction: float


def _train_device(state: SimState, k: int, t: int, lr: float) -> _LocalResult:
    cfg, env = state.config, state.env
    profile = env.profiles[k]
    unit_keep = values = None
    if state.plan is not None:
        mask = dd.sample_mask(state.plan, k, np.random.default_rng([cfg.seed, _MASK, state.method_code, t, k]))
        unit_keep, values = mask.keep, mask.values
    meter = nn.FlopMeter()
    w = nn.local_sgd(
        env.spec,
        state.params,
        profile.data.features,
        profile.data.labels,
        epochs=cfg.federation.local_epochs,
        batch_size=cfg.federation.batch_size,
        lr=lr,
        rng=np.random.default_rng([cfg.seed, _SHUFFLE, t, k]),
        mask=values,
        meter=meter,
    )
    bundle = agg.UpdateBundle.build(env.spec, k, w, profile.n_k, unit_keep)
    kept_bytes = env.spec.kept_params(unit_keep) * nn.BYTES_PER_PARAM
    frac = 1.0 if unit_keep is None else float(unit_keep.mean()) if unit_keep.size else 1.0
    return _LocalResult(bundle, meter.cumulative_mflops, kept_bytes, frac)


def _refresh_estimates(state: SimState, bundles) -> None:
    """FedDHE: estimate label distributions of first-time participants."""
    env, beta = state.env, state.config.feddh.estimation_beta
    for b in bundles:
        if b.device_id not in state.estimated:
            grads = per_class_gradients(env.spec, b.params, env.balanced)
            state.estimated[b.device_id] = estimate_distribution(grads, beta).probs
    ids = np.array(sorted(state.estimated))
    n = env.sample_counts[ids].astype(float)
    P = np.stack([state.estimated[k] for k in ids])
    p_m = n @ P / n.sum()
    p_m /= p_m.sum()
    for k, p in zip(ids, P):
        state.js_used[k] = js(p, p_m)


def _replan(state: SimState, bundles, global_prev: np.ndarray, t: int) -> None:
    cfg, env = state.config.fedad, state.env
    rates, scores = [], []
    for b in bundles:
        data = env.profiles[b.device_id].data
        if cfg.fixed_base_rate is not None:
            rates.append(cfg.fixed_base_rate)
        else:
            H = nn.hessian_block(env.spec, b.params, data.features, data.labels, cfg.hessian_block, cfg.hessian_cap, cfg.rank_tol)
            L = dd.lipschitz_estimate(
                env.spec,
                global_prev,
                b.params,
                data.features,
                data.labels,
                block_id=cfg.hessian_block,
                radius=cfg.probe_radius,
                probes=cfg.lipschitz_probes,
                seed=int(np.random.default_rng([state.config.seed, _PROBE, t, b.device_id]).integers(2**63)),
                cap=cfg.hessian_cap,
            )
            rates.append(dd.base_rate(H, L))
        scores.append(dd.importance_scores(env.spec, b.params, round_tag=t))
    n = [b.sample_count for b in bundles]
    d_avg = dd.aggregate_base_rates(rates, n)
    importance = dd.aggregate_importance(scores, n)
    time_model = dd.DeviceTimeModel.from_times(env.et_base)
    state.plan = dd.plan_rates(d_avg, time_model, importance, env.spec, d_cap=cfg.d_cap, strict_literal=cfg.strict_literal)
    log.info("round %d: replanned dropout, d_avg=%.4f, mean D=%.4f", t, d_avg, state.plan.per_device_rate.mean())


def run_round(state: SimState, config: ExperimentConfig | None = None) -> tuple[SimState, RoundMetrics]:
    """Advance one round: select, train locally, aggregate, adapt."""
    config = state.config if config is None else config
    env, fed = state.env, config.federation
    t = state.round + 1
    selected = select_devices(config.seed, t, env.device_count, fed.selection_fraction)
    lr = nn.decayed_lr(fed.lr, fed.lr_decay, t - 1)

    def work(k):
        try:
            return _train_device(state, int(k), t, lr)
        except FedError as exc:
            raise type(exc)(f"round {t}, device {k}: {exc}") from exc

    if config.experiment.workers > 1:
        with ThreadPoolExecutor(config.experiment.workers) as pool:
            results = list(pool.map(work, selected))
    else:
        results = [work(k) for k in selected]
    bundles = [r.bundle for r in results]
    global_prev = state.params

    if uses_feddh(state.method):
        if state.method == "feddhe":
            _refresh_estimates(state, bundles)
        report = noniid_degree(state.js_used, state.control)
        weights = agg.feddh_weights(bundles, report)
    else:
        weights = agg.fedavg_weights(bundles)
    state.params = agg.masked_aggregate(global_prev, bundles, weights)

    if uses_feddh(state.method):
        dh = config.feddh
        state.control = agg.update_control_params(
            state.control,
            bundles,
            report,
            env.validation,
            spec=env.spec,
            global_prev=global_prev,
            lr_upsilon=nn.decayed_lr(dh.lr_upsilon, dh.decay_upsilon, t - 1),
            lr_bias=nn.decayed_lr(dh.lr_bias, dh.decay_bias, t - 1),
            mode=dh.gradient_mode,
        )

    replanned = False
    if uses_dropout(state.method) and t % config.fedad.interval == 0:
        current = dd.importance_scores(env.spec, state.params, round_tag=t)
        previous = state.trigger.last_importance
        fire = False
        if previous is not None:
            fire, state.trigger = dd.should_update(state.trigger, dd.variation(current, previous))
        state.trigger = replace(state.trigger, last_importance=current)
        if fire:
            _replan(state, bundles, global_prev, t)
            replanned = True

    step_time, _ = round_time([env.profiles[k] for k in selected], [r.kept_bytes for r in results], [r.mflops for r in results])
    state.round = t
    state.wall_clock_s += step_time
    state.cum_mflops += sum(r.mflops for r in results)
    if t % config.experiment.eval_stride == 0 or t == config.experiment.rounds:
        state.accuracy, state.loss = evaluate(env.spec, state.params, env.test)
    metrics = RoundMetrics(
        t,
        state.wall_clock_s,
        state.accuracy,
        state.loss,
        state.cum_mflops,
        {int(k): r.keep_fraction for k, r in zip(selected, results)},
        {int(k): float(q) for k, q in zip(selected, weights.q)},
        step_time,
        replanned,
    )
    return state, metrics


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    initial_accuracy: float
    initial_loss: float
    rounds: list[RoundMetrics]

    @property
    def final_accuracy(self) -> float:
        return self.rounds[-1].accuracy if self.rounds else self.initial_accuracy

    @property
    def final_loss(self) -> float:
        return self.rounds[-1].loss if self.rounds else self.initial_loss

    @property
    def total_mflops(self) -> float:
        return self.rounds[-1].cum_mflops if self.rounds else 0.0

    @property
    def wall_clock_s(self) -> float:
        return self.rounds[-1].wall_clock_s if self.rounds else 0.0

    def time_to_target(self, target: float | None = None) -> float | None:
        target = self.config.experiment.target_accuracy if target is None else target
        if target is None:
            return None
        if self.initial_accuracy >= target:
            return 0.0
        for m in self.rounds:
            if m.accuracy >= target:
                return m.wall_clock_s
        return None

    def summary(self) -> dict:
        ttt = self.time_to_target()
        return {
            "method": self.config.method,
            "seed": self.config.seed,
            "rounds": len(self.rounds),
            "initial_accuracy": float(fmt(self.initial_accuracy)),
            "final_accuracy": float(fmt(self.final_accuracy)),
            "final_loss": float(fmt(self.final_loss)),
            "target_accuracy": self.config.experiment.target_accuracy,
            "time_to_target_s": None if ttt is None else float(fmt(ttt)),
            "wall_clock_s": float(fmt(self.wall_clock_s)),
            "total_mflops": float(fmt(self.total_mflops)),
            "config": self.config.to_dict(),
        }


def simulate(config: ExperimentConfig, env: Environment | None = None) -> ExperimentResult:
    """Run rounds in memory; stops early at the target when configured."""
    state = init_state(config, env)
    result = ExperimentResult(config, state.accuracy, state.loss, [])
    target = config.experiment.target_accuracy
    for _ in range(config.experiment.rounds):
        state, metrics = run_round(state)
        result.rounds.append(metrics)
        if config.experiment.stop_at_target and target is not None and metrics.accuracy >= target:
            break
    return result


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(result: ExperimentResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {
        "metrics": out / "metrics.csv",
        "summary": out / "summary.json",
        "rounds": out / "rounds.jsonl",
        "config": out / "config.toml",
    }
    try:
        _atomic_write(paths["metrics"], "\n".join([CSV_HEADER, *(m.csv_row() for m in result.rounds)]) + "\n")
        _atomic_write(paths["rounds"], "".join(json.dumps(m.detail(), sort_keys=True) + "\n" for m in result.rounds))
        _atomic_write(paths["config"], result.config.to_toml())
        _atomic_write(paths["summary"], json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write outputs: {exc.strerror}", exc.filename) from exc
    return paths


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    result = simulate(config)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


@dataclass(frozen=True)
class CorrelationStudy:
    js: np.ndarray
    gamma: np.ndarray
    r: float
    p: float
    converged_fraction: float


def correlation_study(
    device_count: int = 100,
    concentration: float = 0.5,
    *,
    class_count: int = 10,
    dim: int = 20,
    per_class_count: int = 3000,
    cluster_spread: float = 1.0,
    training_budget: int = 500,
    seed: int = 0,
) -> CorrelationStudy:
    """JS divergence against the ground-truth gap for logistic models.

    The defaults give devices a few hundred samples each and overlapping
    classes; with tiny devices every local fit interpolates its data and
    the gap is dominated by overfitting rather than label skew.
    """
    pool = generate_synthetic(class_count, dim, per_class_count, cluster_spread, seed)
    plan = dirichlet_partition(pool, device_count, concentration, seed + 1)
    parts = [pool.subset(ix) for ix in plan.device_indices]
    dists = [label_distribution(p) for p in parts]
    p_m = global_distribution(dists, plan.sizes)
    js_values = np.array([js(p, p_m) for p in dists])
    oracle = gamma_oracle(parts, nn.ModelSpec((dim, class_count)), training_budget=training_budget, seed=seed)
    r, p = pearson(js_values, oracle.gamma)
    return CorrelationStudy(js_values, oracle.gamma, r, p, float(oracle.converged.mean()))
