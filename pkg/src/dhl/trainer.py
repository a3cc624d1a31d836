"""Optimisation: Adam + cosine decay, the loss-weighting network, bi-level updates.

The weighted objective is ``L_p + w_e * L_e + w_r * L_r`` where each weight
comes from a small sigmoid MLP (parameters ``alpha``) fed with the detached
loss of the level above. Three training modes share one loop:

``bilevel``
    one unrolled gradient step on theta, a hypergradient step on alpha,
    then the real Adam step on theta with the refreshed weights;
``joint``
    alpha is just another parameter of the same objective (this collapses
    the weights towards zero);
``fixed-weights``
    both weights pinned to 1.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from dhl import autodiff as ad
from dhl.autodiff import Tape, Tensor
from dhl.data import TrainingInstance
from dhl.errors import DegenerateGradientError, NumericOverflowError, ShapeError
from dhl.model import (
    ModelConfig,
    batch_losses,
    batch_row_losses,
    bind,
    forward_chunks,
    xavier_uniform,
)

log = logging.getLogger(__name__)

MODES = ("bilevel", "joint", "fixed-weights")
WEIGHTNET_HIDDEN = 100
WEIGHTNET_NAMES = ("weightnet.w1", "weightnet.b1", "weightnet.w2", "weightnet.b2")

Params = dict[str, np.ndarray]


class TrainingDivergedError(NumericOverflowError):
    pass


# ------------------------------------------------------------------ weight net


def init_weightnet(seed: int = 0, hidden: int = WEIGHTNET_HIDDEN, zero: bool = False) -> Params:
    """1 -> hidden -> 1 MLP, tanh inside, sigmoid on the output."""
    rng = np.random.default_rng(seed)
    if zero:
        w1, w2 = np.zeros((1, hidden)), np.zeros((hidden, 1))
    else:
        w1, w2 = xavier_uniform(rng, (1, hidden)), xavier_uniform(rng, (hidden, 1))
    return {"weightnet.w1": w1, "weightnet.b1": np.zeros((1, hidden)),
            "weightnet.w2": w2, "weightnet.b2": np.zeros((1, 1))}


def weightnet_apply(net: Mapping[str, Tensor], losses: Tensor) -> Tensor:
    """Column of loss values (``n x 1``) -> column of weights in (0, 1)."""
    hidden = ad.tanh(losses @ net["weightnet.w1"] + net["weightnet.b1"])
    return ad.sigmoid(hidden @ net["weightnet.w2"] + net["weightnet.b2"])


def weight_forward(net: Params, loss_value) -> np.ndarray | float:
    """Weight(s) for detached loss value(s); scalar in, float out."""
    values = np.asarray(loss_value, dtype=np.float64)
    out = weightnet_apply(bind(net), Tensor(values.reshape(-1, 1))).data[:, 0]
    return float(out[0]) if values.ndim == 0 else out


def weightnet_vjp(net: Params, inputs: Mapping[str, np.ndarray],
                  cotangents: Mapping[str, np.ndarray]) -> Params:
    """Gradient w.r.t. alpha of ``sum_k sum_u cot[k][u] * w(inputs[k][u])``."""
    tape = Tape()
    p = tape.leaves(net)
    total = None
    for key, x in inputs.items():
        w = weightnet_apply(p, Tensor(np.asarray(x, dtype=np.float64).reshape(-1, 1)))
        term = ad.sum(w * Tensor(np.asarray(cotangents[key], dtype=np.float64).reshape(-1, 1)))
        total = term if total is None else total + term
    if total is None:
        return {k: np.zeros_like(v) for k, v in net.items()}
    ad.backward(total)
    return {k: tape.grad(v).copy() for k, v in p.items()}


# ------------------------------------------------------------------ optimisers


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()})


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray], lr: float) -> Params:
    """Bias-corrected Adam; mutates ``state`` and returns new parameter arrays."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ShapeError(f"adam: gradient {g.shape} vs parameter {value.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(value))
        v = state.v.setdefault(name, np.zeros_like(value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        out[name] = value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def axpy(a: float, x: Mapping[str, np.ndarray], y: Mapping[str, np.ndarray]) -> Params:
    """``y + a * x`` per entry."""
    return {k: y[k] + a * x[k] for k in y}


def global_norm(x: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(float(np.sum([np.vdot(v, v) for v in x.values()])))


# ----------------------------------------------------------- bi-level problem


class Evaluation(Protocol):
    """A taped forward pass at fixed theta.

    ``units[level]`` holds the inner (soft-label) loss per weight unit: one
    batch-mean value, or one value per instance. ``grad(weights)`` returns
    the theta-gradient of ``mean_u sum_k weights[k][u] * L_k[u]`` and may be
    called repeatedly with different weights.
    """

    units: dict[str, np.ndarray]

    def grad(self, weights: Mapping[str, np.ndarray]) -> Params: ...


class BilevelObjective(Protocol):
    """Level losses of one fixed batch as a function of theta."""

    levels: tuple[str, ...]

    def evaluate(self, theta: Params) -> Evaluation: ...

    def losses(self, theta: Params) -> dict[str, np.ndarray]: ...

    def outer(self, theta: Params) -> tuple[float, Params]: ...


class _DhlEvaluation:
    def __init__(self, objective: "DhlObjective", theta: Params):
        self._objective = objective
        self._tape = Tape()
        self._leaves = bind(theta, self._tape)
        self._traces = forward_chunks(self._leaves, objective.config, objective.instances,
                                      objective.adjacency)
        self.units = objective._units(self._traces)

    def grad(self, weights):
        obj = self._objective
        n = len(obj.instances)
        row_w = {}
        for level, w in weights.items():
            w = np.asarray(w, dtype=np.float64)
            row_w[level] = np.full(n, w[0]) if obj.granularity == "batch" else w
        per_level = batch_losses(self._traces, obj.config, soft=True, weights=row_w)
        total = None
        for level in obj.levels:
            total = per_level[level] if total is None else total + per_level[level]
        ad.backward(total)
        return {k: self._tape.grad(v).copy() for k, v in self._leaves.items()}


class DhlObjective:
    """The DHL model on one batch, with batch-mean or per-instance weight units."""

    def __init__(self, config: ModelConfig, instances: Sequence[TrainingInstance],
                 adjacency, granularity: str = "batch"):
        if not instances:
            raise ValueError("batch must be non-empty")
        if granularity not in ("batch", "instance"):
            raise ValueError(f"unknown weight granularity {granularity!r}")
        self.config = config
        self.instances = list(instances)
        self.adjacency = adjacency
        self.granularity = granularity
        self.levels = config.levels

    def _units(self, traces) -> dict[str, np.ndarray]:
        rows = batch_row_losses(traces, self.config, soft=True)
        if self.granularity == "batch":
            return {k: np.array([v.mean()]) for k, v in rows.items()}
        return rows

    def evaluate(self, theta):
        return _DhlEvaluation(self, theta)

    def losses(self, theta):
        traces = forward_chunks(bind(theta), self.config, self.instances, self.adjacency)
        return self._units(traces)

    def outer(self, theta):
        tape = Tape()
        p = bind(theta, tape)
        traces = forward_chunks(p, self.config, self.instances, self.adjacency)
        per_level = batch_losses(traces, self.config, soft=False)
        total = None
        for level in self.levels:
            total = per_level[level] if total is None else total + per_level[level]
        ad.backward(total)
        return total.item(), {k: tape.grad(v).copy() for k, v in p.items()}


class _ToyEvaluation:
    def __init__(self, objective: "ScalarToyObjective", theta: Params):
        self._theta = float(theta["theta"][0, 0])
        self.units = objective.losses(theta)

    def grad(self, weights):
        return {"theta": np.array([[2.0 * float(weights["entity"][0]) * self._theta]])}


class ScalarToyObjective:
    """Two-level problem with one scalar parameter.

    ``L_type`` is the constant ``type_loss`` and ``L_entity = theta^2``, so
    ``L_in = type_loss + w(type_loss) * theta^2`` and
    ``L_out = type_loss + theta^2``.
    """

    levels = ("type", "entity")

    def __init__(self, type_loss: float = 0.5):
        self.type_loss = float(type_loss)

    def evaluate(self, theta):
        return _ToyEvaluation(self, theta)

    def losses(self, theta):
        t = float(theta["theta"][0, 0])
        return {"type": np.array([self.type_loss]), "entity": np.array([t * t])}

    def outer(self, theta):
        t = float(theta["theta"][0, 0])
        return self.type_loss + t * t, {"theta": np.array([[2.0 * t]])}


# weight for level X is computed from the loss of the level above
WEIGHT_INPUT = {"entity": "type", "attribute": "entity"}


def compute_weights(net: Params, units: Mapping[str, np.ndarray], levels: Sequence[str],
                    mode: str = "bilevel") -> dict[str, np.ndarray]:
    out = {levels[0]: np.ones_like(units[levels[0]])}
    for level in levels[1:]:
        if mode == "fixed-weights":
            out[level] = np.ones_like(units[level])
        else:
            out[level] = np.atleast_1d(weight_forward(net, units[WEIGHT_INPUT[level]]))
    return out


def _check_finite(units):
    for level, v in units.items():
        if not np.isfinite(v).all():
            raise NumericOverflowError(f"non-finite {level} loss: {v}")


@dataclass
class InnerStep:
    theta_star: Params
    units: dict[str, np.ndarray]
    weights: dict[str, np.ndarray]
    grad: Params
    evaluation: Evaluation


def inner_step(objective: BilevelObjective, theta: Params, net: Params, eta: float,
               mode: str = "bilevel", weights: Mapping[str, np.ndarray] | None = None,
               evaluation: Evaluation | None = None) -> InnerStep:
    """One plain gradient step on the weighted inner loss.

    The weights are computed from the detached unit losses and act as
    constants w.r.t. theta; ``weights`` overrides them.
    """
    ev = evaluation if evaluation is not None else objective.evaluate(theta)
    _check_finite(ev.units)
    if weights is None:
        weights = compute_weights(net, ev.units, objective.levels, mode)
    grad = ev.grad(weights)
    theta_star = dict(theta) if eta == 0.0 else axpy(-eta, grad, theta)
    return InnerStep(theta_star, ev.units, dict(weights), grad, ev)


def hypergradient(objective: BilevelObjective, theta: Params, net: Params, eta: float,
                  inner: InnerStep | None = None, radius: float = 0.01) -> Params:
    """d L_out(theta*(alpha)) / d alpha through one unrolled step.

    With g = grad L_out at theta*, the result is
    ``-eta * (d^2 L_in / d alpha d theta)^T g``. Because the weights only
    scale the level losses, the mixed term is the weight-network Jacobian
    times the directional derivative of each level loss along g, taken as a
    central difference with step ``radius / |g|`` (weight inputs held at
    their theta values).
    """
    if eta < 0:
        raise ValueError("eta must be non-negative")
    if eta == 0.0:
        return {k: np.zeros_like(v) for k, v in net.items()}
    if inner is None:
        inner = inner_step(objective, theta, net, eta)
    _, g = objective.outer(inner.theta_star)
    g_norm = global_norm(g)
    if g_norm < 1e-12:
        raise DegenerateGradientError("outer gradient vanished; hypergradient is zero")
    r = radius / g_norm
    plus = objective.losses(axpy(r, g, theta))
    minus = objective.losses(axpy(-r, g, theta))
    units = inner.units
    n_units = len(units[objective.levels[0]])
    inputs, cot = {}, {}
    for level in objective.levels[1:]:
        inputs[level] = units[WEIGHT_INPUT[level]]
        cot[level] = -eta * (plus[level] - minus[level]) / (2.0 * r) / n_units
    return weightnet_vjp(net, inputs, cot)


def brute_force_hypergradient(objective: BilevelObjective, theta: Params, net: Params,
                              eta: float, h: float = 1e-5) -> Params:
    """Central differences of ``L_out(inner_step(theta, alpha))`` over alpha."""

    def f(alpha: Params) -> float:
        return objective.outer(inner_step(objective, theta, alpha, eta).theta_star)[0]

    return ad.finite_diff_gradient(f, net, h)


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    model_lr: float = 1e-3
    weightnet_lr: float = 1e-5
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    mode: str = "bilevel"
    weight_granularity: str = "batch"
    outer_optimizer: str = "sgd"
    max_steps: int | None = None

    def __post_init__(self):
        if self.model_lr <= 0 or self.weightnet_lr < 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ValueError("outer_optimizer must be 'sgd' or 'adam'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BiLevelSnapshot:
    step: int
    loss_type: float
    loss_entity: float
    loss_attr: float | None
    omega_e: float
    omega_r: float | None
    lr: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: Params
    weightnet: Params
    snapshots: list[BiLevelSnapshot]
    best_params: Params
    best_weightnet: Params
    best_epoch: int
    best_dev: dict | None
    history: list[dict]
    adam: AdamState
    steps: int


def effective_mode(config: ModelConfig, train: TrainConfig) -> str:
    return "fixed-weights" if not config.use_hier_weights else train.mode


def train(
    instances: Sequence[TrainingInstance],
    config: ModelConfig,
    train_config: TrainConfig,
    params: Params,
    weightnet: Params,
    adjacency,
    dev_instances: Sequence[TrainingInstance] | None = None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Mini-batch training; keeps the parameters with the best dev entity accuracy."""
    from dhl.metrics import evaluate_model  # local: metrics imports model

    instances = list(instances)
    if not instances:
        raise ValueError("no training instances")
    mode = effective_mode(config, train_config)
    rng = np.random.default_rng(train_config.seed)
    n_batches = math.ceil(len(instances) / train_config.batch_size)
    total_steps = n_batches * train_config.epochs
    if train_config.max_steps is not None:
        total_steps = min(total_steps, train_config.max_steps)

    theta = {k: v.copy() for k, v in params.items()}
    alpha = {k: v.copy() for k, v in weightnet.items()}
    adam = AdamState.for_params(theta)
    alpha_adam = AdamState.for_params(alpha)
    snapshots: list[BiLevelSnapshot] = []
    history: list[dict] = []
    best = (copy.deepcopy(theta), copy.deepcopy(alpha), 0, None)
    best_acc = -1.0
    step = 0

    for epoch in range(train_config.epochs):
        order = rng.permutation(len(instances))
        for b in range(n_batches):
            if step >= total_steps:
                break
            batch = [instances[i] for i in
                     order[b * train_config.batch_size:(b + 1) * train_config.batch_size]]
            lr = cosine_lr(step, total_steps, train_config.model_lr)
            objective = DhlObjective(config, batch, adjacency, train_config.weight_granularity)
            try:
                theta, alpha, snap = train_step(objective, theta, alpha, adam, alpha_adam,
                                                 lr, mode, train_config)
            except NumericOverflowError as exc:
                raise TrainingDivergedError(
                    f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            snap.step = step
            snapshots.append(snap)
            step += 1
        record = {"epoch": epoch, "steps": step}
        if dev_instances:
            reports = evaluate_model(theta, config, dev_instances, adjacency)
            record["dev"] = {lv: r.to_json() for lv, r in reports.items()}
            acc = reports["entity"].acc
            if acc > best_acc:
                best_acc = acc
                best = (copy.deepcopy(theta), copy.deepcopy(alpha), epoch, record["dev"])
        history.append(record)
        log.info("epoch %d done (%d steps)%s", epoch, step,
                 f", dev entity acc {record['dev']['entity']['acc']:.4f}" if "dev" in record else "")
        if on_epoch is not None:
            on_epoch(epoch, record)
        if step >= total_steps:
            break

    if not dev_instances:
        best = (copy.deepcopy(theta), copy.deepcopy(alpha), len(history) - 1, None)
    return TrainResult(theta, alpha, snapshots, best[0], best[1], best[2], best[3],
                       history, adam, step)


def _snapshot(units, weights, levels, lr) -> BiLevelSnapshot:
    has_attr = "attribute" in levels
    return BiLevelSnapshot(
        step=0,
        loss_type=float(units["type"].mean()),
        loss_entity=float(units["entity"].mean()),
        loss_attr=float(units["attribute"].mean()) if has_attr else None,
        omega_e=float(weights["entity"].mean()),
        omega_r=float(weights["attribute"].mean()) if has_attr else None,
        lr=lr,
    )


def train_step(objective: BilevelObjective, theta: Params, alpha: Params, adam: AdamState,
               alpha_adam: AdamState, lr: float, mode: str, tc: TrainConfig):
    """One batch update; returns ``(theta, alpha, snapshot)``."""
    levels = objective.levels
    ev = objective.evaluate(theta)
    _check_finite(ev.units)
    if mode == "bilevel":
        inner = inner_step(objective, theta, alpha, lr, evaluation=ev)
        if lr > 0 and tc.weightnet_lr > 0:
            try:
                hg = hypergradient(objective, theta, alpha, lr, inner)
            except DegenerateGradientError:
                hg = {k: np.zeros_like(v) for k, v in alpha.items()}
            if tc.outer_optimizer == "adam":
                alpha = adam_step(alpha_adam, alpha, hg, tc.weightnet_lr)
            else:
                alpha = axpy(-tc.weightnet_lr, hg, alpha)
        # theta* is discarded; the real step uses the refreshed weights
        weights = compute_weights(alpha, ev.units, levels, mode)
        grad = ev.grad(weights)
    else:
        weights = compute_weights(alpha, ev.units, levels, mode)
        grad = ev.grad(weights)
        if mode == "joint":
            # alpha is an ordinary parameter of the weighted loss
            n = len(ev.units[levels[0]])
            inputs = {lv: ev.units[WEIGHT_INPUT[lv]] for lv in levels[1:]}
            cot = {lv: ev.units[lv] / n for lv in levels[1:]}
            alpha = adam_step(alpha_adam, alpha, weightnet_vjp(alpha, inputs, cot), lr)
    theta = adam_step(adam, theta, grad, lr)
    return theta, alpha, _snapshot(ev.units, weights, levels, lr)
