"""Action-value critic trained on the experience memory.

Three networks cooperate: an online Q-network scores (task, state, action),
a slowly-tracking target copy supplies stable regression targets, and a
V-network is fit by expectile regression

    L_v = E[ |tau - 1(u < 0)| * u^2 ],   u = Q_target(s, a) - V(s)

so that for tau near 1, V(s) approaches the best Q value among actions the
data actually contains. The online Q then regresses onto r + gamma * V(s')
with plain squared error (bootstrap dropped on terminal steps). An optional
twin Q pair takes the elementwise minimum of two heads to damp
overestimation on sparse-reward data.

``tabular_iql_oracle`` computes the same fixed point exactly on enumerable
state/action spaces, which is what the network tests compare against.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .experience import EnvState, ExperienceMemory, MemoryStep, Task
from .neuralnet import (
    LossResult,
    NetConfig,
    TextScalarNet,
    adam_init,
    adam_update_inplace,
    load_checkpoint,
    save_checkpoint,
)
from .seeding import child_seed

THREE_ENCODER = "three"
FIVE_ENCODER = "five"

_LAYOUT_FIELDS = {
    # Field tuples are kept sorted so concat order is recoverable from names.
    THREE_ENCODER: ("action", "state", "task"),
    FIVE_ENCODER: ("action", "free_look", "inventory", "observation", "task"),
}


@dataclass(frozen=True)
class IqlConfig:
    tau: float = 0.9
    gamma: float = 0.9
    epochs: int = 20
    batch_size: int = 128
    target_update_coefficient: float = 0.995
    twin_q: bool = False
    seed: int = 0
    lr: float = 3e-4
    vocab_size: int = 8192
    embed_dim: int = 64
    hidden_dim: int = 128
    encoder_layout: str = THREE_ENCODER

    def validate(self) -> None:
        if not 0.5 < self.tau < 1.0:
            raise ConfigError(f"tau must be in (0.5, 1), got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.target_update_coefficient <= 1.0:
            raise ConfigError("target_update_coefficient must be in [0, 1]")
        if self.encoder_layout not in _LAYOUT_FIELDS:
            raise ConfigError(f"unknown encoder_layout {self.encoder_layout!r}")


def q_net_config(cfg: IqlConfig) -> NetConfig:
    return NetConfig(_LAYOUT_FIELDS[cfg.encoder_layout], cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim)


def v_net_config(cfg: IqlConfig) -> NetConfig:
    fields = tuple(f for f in _LAYOUT_FIELDS[cfg.encoder_layout] if f != "action")
    return NetConfig(fields, cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim)


@dataclass
class CriticParams:
    """All learnable tensors: online Q (one or two heads), targets, and V."""

    cfg: IqlConfig
    q: dict[str, np.ndarray]
    q_target: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    q2: dict[str, np.ndarray] | None = None
    q2_target: dict[str, np.ndarray] | None = None


def init_critic(cfg: IqlConfig) -> CriticParams:
    cfg.validate()
    from .neuralnet import init_params

    q = init_params(q_net_config(cfg), child_seed(cfg.seed, "q1"))
    v = init_params(v_net_config(cfg), child_seed(cfg.seed, "v"))
    q2 = init_params(q_net_config(cfg), child_seed(cfg.seed, "q2")) if cfg.twin_q else None
    return CriticParams(
        cfg=cfg,
        q=q,
        q_target={k: p.copy() for k, p in q.items()},
        v=v,
        q2=q2,
        q2_target=None if q2 is None else {k: p.copy() for k, p in q2.items()},
    )


def _field_texts(layout: str, task: Task, state: EnvState, action: str | None) -> dict[str, str]:
    if layout == THREE_ENCODER:
        texts = {"task": task.description, "state": state.combined_text()}
    else:
        texts = {
            "task": task.description,
            "observation": state.observation,
            "free_look": state.free_look,
            "inventory": state.inventory,
        }
    if action is not None:
        texts["action"] = action
    return texts


def _q_samples(cfg: IqlConfig, triples) -> list[dict[str, tuple[int, ...]]]:
    net = TextScalarNet(q_net_config(cfg), {})
    return [net.prepare(_field_texts(cfg.encoder_layout, t, s, a)) for t, s, a in triples]


def _v_samples(cfg: IqlConfig, pairs) -> list[dict[str, tuple[int, ...]]]:
    net = TextScalarNet(v_net_config(cfg), {})
    return [net.prepare(_field_texts(cfg.encoder_layout, t, s, None)) for t, s in pairs]


def q_forward(params: CriticParams, task: Task, state: EnvState, action: str) -> float:
    """Scalar Q(s, a) from the first online head."""
    net = TextScalarNet(q_net_config(params.cfg), params.q)
    return net.value(_q_samples(params.cfg, [(task, state, action)])[0])


def v_forward(params: CriticParams, task: Task, state: EnvState) -> float:
    net = TextScalarNet(v_net_config(params.cfg), params.v)
    return net.value(_v_samples(params.cfg, [(task, state)])[0])


def twin_q_forward(params: CriticParams, task: Task, state: EnvState, action: str) -> float:
    """min(Q1, Q2); requires the twin head to be present."""
    if params.q2 is None:
        raise ConfigError("twin Q requested but only one head is present")
    sample = _q_samples(params.cfg, [(task, state, action)])
    q1 = TextScalarNet(q_net_config(params.cfg), params.q).value(sample[0])
    q2 = TextScalarNet(q_net_config(params.cfg), params.q2).value(sample[0])
    return min(q1, q2)


def action_values(params: CriticParams, task: Task, state: EnvState,
                  actions: list[str]) -> list[float]:
    """Batched critic values for candidate actions (min over twins if present)."""
    if not actions:
        return []
    samples = _q_samples(params.cfg, [(task, state, a) for a in actions])
    vals = TextScalarNet(q_net_config(params.cfg), params.q).value_batch(samples)
    if params.q2 is not None:
        vals = np.minimum(vals, TextScalarNet(q_net_config(params.cfg), params.q2).value_batch(samples))
    return [float(x) for x in vals]


def expectile_loss(u, tau: float):
    """Asymmetric squared penalty |tau - 1(u < 0)| * u^2 (elementwise)."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    u = np.asarray(u, dtype=float)
    weight = np.where(u < 0.0, 1.0 - tau, tau)
    out = weight * u * u
    return float(out) if out.ndim == 0 else out


def _target_q_batch(params: CriticParams, samples) -> np.ndarray:
    vals = TextScalarNet(q_net_config(params.cfg), params.q_target).value_batch(samples)
    if params.q2_target is not None:
        vals = np.minimum(
            vals, TextScalarNet(q_net_config(params.cfg), params.q2_target).value_batch(samples)
        )
    return vals


def loss_v(batch: list[MemoryStep], params: CriticParams, tau: float | None = None) -> float:
    """Mean expectile loss of Q_target(s, a) - V(s); targets are frozen."""
    if not batch:
        raise ValueError("empty batch")
    tau = params.cfg.tau if tau is None else tau
    q_samples = _q_samples(params.cfg, [(m.task, m.step.state, m.step.action) for m in batch])
    v_samples = _v_samples(params.cfg, [(m.task, m.step.state) for m in batch])
    tq = _target_q_batch(params, q_samples)
    v = TextScalarNet(v_net_config(params.cfg), params.v).value_batch(v_samples)
    return float(np.mean(expectile_loss(tq - v, tau)))


def loss_q(batch: list[MemoryStep], params: CriticParams, gamma: float | None = None) -> float:
    """Mean squared Bellman residual vs. r + gamma * V(s'), masked on done."""
    if not batch:
        raise ValueError("empty batch")
    gamma = params.cfg.gamma if gamma is None else gamma
    targets = _bellman_targets(batch, params, gamma)
    q_samples = _q_samples(params.cfg, [(m.task, m.step.state, m.step.action) for m in batch])
    q1 = TextScalarNet(q_net_config(params.cfg), params.q).value_batch(q_samples)
    total = np.mean((q1 - targets) ** 2)
    heads = 1
    if params.q2 is not None:
        q2 = TextScalarNet(q_net_config(params.cfg), params.q2).value_batch(q_samples)
        total = total + np.mean((q2 - targets) ** 2)
        heads = 2
    return float(total / heads)


def _bellman_targets(batch: list[MemoryStep], params: CriticParams, gamma: float) -> np.ndarray:
    rewards = np.array([m.step.reward for m in batch], dtype=float)
    done = np.array([m.step.done for m in batch], dtype=float)
    next_samples = _v_samples(params.cfg, [(m.task, m.step.next_state) for m in batch])
    v_next = TextScalarNet(v_net_config(params.cfg), params.v).value_batch(next_samples)
    return rewards + gamma * (1.0 - done) * v_next


def target_update(online: dict[str, np.ndarray], target: dict[str, np.ndarray],
                  rho: float) -> dict[str, np.ndarray]:
    """Polyak step target' = rho * target + (1 - rho) * online, elementwise."""
    if set(online) != set(target):
        raise ValueError("online/target parameter names differ")
    out = {}
    for name, p in online.items():
        if p.shape != target[name].shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {target[name].shape}")
        out[name] = rho * target[name] + (1.0 - rho) * p
    return out


def _target_update_inplace(online: dict[str, np.ndarray], target: dict[str, np.ndarray],
                           rho: float) -> None:
    # same arithmetic as target_update, without reallocating
    for name, p in online.items():
        t = target[name]
        t *= rho
        t += (1.0 - rho) * p


def v_loss_fn(params: CriticParams, tau: float):
    """Loss closure for the V parameters only (Q targets are stop-gradient)."""

    def fn(v_params: dict[str, np.ndarray], batch: list[MemoryStep],
           need_grads: bool = True) -> LossResult:
        q_samples = _q_samples(params.cfg, [(m.task, m.step.state, m.step.action) for m in batch])
        v_samples = _v_samples(params.cfg, [(m.task, m.step.state) for m in batch])
        tq = _target_q_batch(params, q_samples)
        net = TextScalarNet(v_net_config(params.cfg), v_params)
        v, cache = net.forward(v_samples)
        u = tq - v
        weight = np.where(u < 0.0, 1.0 - tau, tau)
        per_sample = weight * u * u
        # d/dv of |tau-1(u<0)| u^2 with u = tq - v is -2 w u
        grads = net.backward(cache, -2.0 * weight * u / len(batch)) if need_grads else {}
        return LossResult(float(per_sample.mean()), grads, per_sample)

    return fn


def q_loss_fn(params: CriticParams, gamma: float):
    """Loss closure for one online Q head (V on next states is stop-gradient)."""

    def fn(q_params: dict[str, np.ndarray], batch: list[MemoryStep],
           need_grads: bool = True) -> LossResult:
        targets = _bellman_targets(batch, params, gamma)
        q_samples = _q_samples(params.cfg, [(m.task, m.step.state, m.step.action) for m in batch])
        net = TextScalarNet(q_net_config(params.cfg), q_params)
        q, cache = net.forward(q_samples)
        residual = q - targets
        per_sample = residual**2
        grads = net.backward(cache, 2.0 * residual / len(batch)) if need_grads else {}
        return LossResult(float(per_sample.mean()), grads, per_sample)

    return fn


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss_v: float
    mean_loss_q: float
    wall_ms: float


def train_iql(mem: ExperienceMemory, cfg: IqlConfig) -> tuple[CriticParams, list[EpochStats]]:
    """The retrospection loop: fit V by expectile regression, fit Q to the
    bootstrapped target, then let the target network track the online one.

    Per batch: one adaptive step on V from loss_v, one on each online Q head
    from loss_q, then a Polyak target update. Fully determined by cfg.seed.
    """
    cfg.validate()
    if not mem.step_view:
        raise ValueError("cannot train on an empty memory")
    params = init_critic(cfg)
    opt_v = adam_init(params.v, lr=cfg.lr)
    opt_q = adam_init(params.q, lr=cfg.lr)
    opt_q2 = adam_init(params.q2, lr=cfg.lr) if params.q2 is not None else None
    rho = cfg.target_update_coefficient
    batches_per_epoch = max(1, math.ceil(len(mem.step_view) / cfg.batch_size))

    log: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        sum_v = 0.0
        sum_q = 0.0
        for b in range(batches_per_epoch):
            batch = mem.sample_batch(cfg.batch_size, child_seed(cfg.seed, "batch", epoch, b))

            result_v = v_loss_fn(params, cfg.tau)(params.v, batch)
            _check_finite(result_v.value, "loss_v", epoch, b)
            opt_v = adam_update_inplace(params.v, result_v.grads, opt_v)

            result_q = q_loss_fn(params, cfg.gamma)(params.q, batch)
            _check_finite(result_q.value, "loss_q", epoch, b)
            opt_q = adam_update_inplace(params.q, result_q.grads, opt_q)
            batch_loss_q = result_q.value

            if params.q2 is not None:
                result_q2 = q_loss_fn(params, cfg.gamma)(params.q2, batch)
                _check_finite(result_q2.value, "loss_q2", epoch, b)
                opt_q2 = adam_update_inplace(params.q2, result_q2.grads, opt_q2)
                batch_loss_q = 0.5 * (batch_loss_q + result_q2.value)

            _target_update_inplace(params.q, params.q_target, rho)
            if params.q2 is not None:
                _target_update_inplace(params.q2, params.q2_target, rho)

            sum_v += result_v.value
            sum_q += batch_loss_q
        log.append(
            EpochStats(
                epoch=epoch,
                mean_loss_v=sum_v / batches_per_epoch,
                mean_loss_q=sum_q / batches_per_epoch,
                wall_ms=(time.perf_counter() - started) * 1000.0,
            )
        )
    return params, log


def _check_finite(value: float, name: str, epoch: int, batch: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{name} became non-finite at epoch {epoch}, batch {batch}")


def weighted_expectile(values, weights, tau: float, tol: float = 1e-12) -> float:
    """Minimizer of sum_i w_i |tau - 1(v_i < m)| (v_i - m)^2 over m.

    The derivative in m is continuous, piecewise linear and strictly
    increasing, so bisection on it converges unconditionally.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= tol:
        return lo

    def slope(m: float) -> float:
        w = weights * np.where(values < m, 1.0 - tau, tau)
        return float(np.sum(2.0 * w * (m - values)))

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol:
            break
    return 0.5 * (lo + hi)


def tabular_iql_oracle(dataset, tau: float, gamma: float, tol: float = 1e-10,
                       max_sweeps: int = 100_000):
    """Exact IQL fixed point over the dataset's empirical distribution.

    Accepts Steps or MemorySteps; states are keyed by their rendered text
    (prefixed with the task id when present). Returns (q_table, v_table)
    mapping (state_key, action) -> Q and state_key -> V. Unseen next states
    contribute V = 0, which only matters for non-terminal dataset edges.
    """
    transitions: dict[tuple, list[tuple[float, bool, tuple]]] = {}
    for item in dataset:
        if isinstance(item, MemoryStep):
            task_id, step = item.task.id, item.step
        else:
            task_id, step = "", item
        skey = (task_id, *step.state.text_key())
        nkey = (task_id, *step.next_state.text_key())
        transitions.setdefault((skey, step.action), []).append((step.reward, step.done, nkey))
    if not transitions:
        raise ValueError("empty dataset")

    by_state: dict[tuple, list[tuple[str, int]]] = {}
    for (skey, action), items in transitions.items():
        by_state.setdefault(skey, []).append((action, len(items)))

    q = {key: 0.0 for key in transitions}
    v = {skey: 0.0 for skey in by_state}
    for sweep in range(max_sweeps):
        delta = 0.0
        for key, items in transitions.items():
            total = 0.0
            for reward, done, nkey in items:
                total += reward + (0.0 if done else gamma * v.get(nkey, 0.0))
            new_q = total / len(items)
            delta = max(delta, abs(new_q - q[key]))
            q[key] = new_q
        for skey, actions in by_state.items():
            vals = [q[(skey, a)] for a, _ in actions]
            weights = [c for _, c in actions]
            new_v = weighted_expectile(vals, weights, tau)
            delta = max(delta, abs(new_v - v[skey]))
            v[skey] = new_v
        if delta < tol:
            return q, v
    raise NumericError(f"tabular oracle did not converge in {max_sweeps} sweeps")


ARCH_Q_SINGLE = "q_single"
ARCH_Q_TWIN = "q_twin"
ARCH_V = "v"


def save_critic(q_path, v_path, params: CriticParams) -> None:
    """Write the online Q head(s) and the V network as two checkpoint files."""
    cfg = params.cfg
    header = dict(vocab_size=cfg.vocab_size, embed_dim=cfg.embed_dim,
                  hidden_dim=cfg.hidden_dim, seed=cfg.seed)
    if params.q2 is None:
        save_checkpoint(q_path, params.q, architecture_id=ARCH_Q_SINGLE, **header)
    else:
        merged = {f"q1.{k}": p for k, p in params.q.items()}
        merged.update({f"q2.{k}": p for k, p in params.q2.items()})
        save_checkpoint(q_path, merged, architecture_id=ARCH_Q_TWIN, **header)
    save_checkpoint(v_path, params.v, architecture_id=ARCH_V, **header)


def _fields_from_params(params: dict[str, np.ndarray]) -> tuple[str, ...]:
    fields = sorted({name.split(".")[1] for name in params if name.startswith("enc.")})
    return tuple(fields)


def _layout_for_fields(fields: tuple[str, ...]) -> str:
    for layout, expected in _LAYOUT_FIELDS.items():
        if fields == expected:
            return layout
    raise ConfigError(f"checkpoint encoder fields {fields} match no known layout")


def load_critic(q_path, v_path=None) -> CriticParams:
    """Rebuild critic params for inference from checkpoint files.

    The V network is optional at inference time (action rescoring only needs
    Q); when absent, a zero-initialized V of the right shape is used.
    """
    header, raw = load_checkpoint(q_path)
    if header["architecture_id"] == ARCH_Q_TWIN:
        q = {k[len("q1."):]: p for k, p in raw.items() if k.startswith("q1.")}
        q2 = {k[len("q2."):]: p for k, p in raw.items() if k.startswith("q2.")}
        if set(q) != set(q2) or not q:
            raise ConfigError("twin checkpoint must hold matching q1./q2. parameter sets")
    elif header["architecture_id"] == ARCH_Q_SINGLE:
        q, q2 = raw, None
    else:
        raise ConfigError(f"not a Q checkpoint: {header['architecture_id']!r}")

    layout = _layout_for_fields(_fields_from_params(q))
    cfg = IqlConfig(
        twin_q=q2 is not None,
        seed=header["seed"],
        vocab_size=header["vocab_size"],
        embed_dim=header["embed_dim"],
        hidden_dim=header["hidden_dim"],
        encoder_layout=layout,
    )
    _validate_shapes(q, q_net_config(cfg), q_path)
    if q2 is not None:
        _validate_shapes(q2, q_net_config(cfg), q_path)

    if v_path is not None:
        v_header, v = load_checkpoint(v_path)
        if v_header["architecture_id"] != ARCH_V:
            raise ConfigError(f"not a V checkpoint: {v_header['architecture_id']!r}")
        _validate_shapes(v, v_net_config(cfg), v_path)
    else:
        v = {k: np.zeros(s) for k, s in v_net_config(cfg).param_shapes().items()}
    return CriticParams(
        cfg=cfg,
        q=q,
        q_target={k: p.copy() for k, p in q.items()},
        v=v,
        q2=q2,
        q2_target=None if q2 is None else {k: p.copy() for k, p in q2.items()},
    )


def _validate_shapes(params: dict[str, np.ndarray], net_cfg: NetConfig, path) -> None:
    expected = net_cfg.param_shapes()
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"{path}: parameter names mismatch (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
