"""Finite-difference checks for every differentiable piece of the model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from dhl import autodiff as ad
from dhl.autodiff import Tape, Tensor
from dhl.data import DialogRecord, GoalHierarchyDataset, GoalVocabulary
from dhl.model import (
    ModelConfig,
    batch_losses,
    bind,
    cross_attention,
    forward_chunks,
    fuse_logits,
    init_params,
    lstm_encode,
)
from dhl.trainer import ScalarToyObjective, hypergradient, init_weightnet

DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def to_json(self) -> dict:
        return {"name": self.name, "max_rel_error": self.max_rel_error, "tol": self.tol,
                "passed": self.passed, "seconds": round(self.seconds, 3)}


Builder = Callable[[Mapping[str, Tensor]], Tensor]


def compare(build: Builder, inputs: Mapping[str, np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` maps named tensors to a scalar; it runs once on tracked leaves
    and many times on untracked ones.
    """
    tape = Tape()
    leaves = tape.leaves(inputs)
    ad.backward(build(leaves))
    analytic = {k: tape.grad(v) for k, v in leaves.items()}
    numeric = ad.finite_diff_gradient(
        lambda arrs: build({k: Tensor(v) for k, v in arrs.items()}).item(), inputs, h)
    return ad.max_relative_error(analytic, numeric)


def _projected(rng: np.random.Generator, op: Callable[..., Tensor]) -> Builder:
    """Scalarise an op's output with a fixed random projection."""
    cache: dict[tuple, np.ndarray] = {}

    def build(t):
        out = op(t)
        if out.shape not in cache:
            cache[out.shape] = rng.normal(size=out.shape)
        return ad.sum(out * Tensor(cache[out.shape]))

    return build


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict]]:
    """Name -> (op over named tensors, inputs)."""
    n = rng.normal
    probs = rng.uniform(0.1, 1.0, size=(3, 4))
    return {
        "add": (lambda t: t["a"] + t["b"], {"a": n(size=(3, 4)), "b": n(size=(1, 4))}),
        "sub": (lambda t: t["a"] - t["b"], {"a": n(size=(3, 4)), "b": n(size=(3, 1))}),
        "mul": (lambda t: t["a"] * t["b"], {"a": n(size=(3, 4)), "b": n(size=(3, 4))}),
        "scale": (lambda t: t["a"] * 2.5, {"a": n(size=(2, 3))}),
        "matmul": (lambda t: t["a"] @ t["b"], {"a": n(size=(3, 4)), "b": n(size=(4, 2))}),
        "tanh": (lambda t: ad.tanh(t["a"]), {"a": n(size=(3, 4))}),
        "sigmoid": (lambda t: ad.sigmoid(t["a"]), {"a": 3 * n(size=(3, 4))}),
        "exp": (lambda t: ad.exp(t["a"]), {"a": n(size=(3, 4))}),
        "softmax_rows": (lambda t: ad.softmax_rows(t["a"]), {"a": n(size=(3, 5))}),
        "cross_entropy": (lambda t: ad.cross_entropy(t["p"], t["y"]),
                          {"p": probs, "y": rng.uniform(size=(3, 4))}),
        "sum": (lambda t: (ad.sum(t["a"], axis=0) @ ad.sum(t["a"], axis=1)) * ad.sum(t["a"]),
                {"a": n(size=(3, 3))}),
        "mean": (lambda t: ad.mean(t["a"] * t["a"]), {"a": n(size=(3, 4))}),
        "transpose": (lambda t: ad.transpose(t["a"]), {"a": n(size=(2, 5))}),
        "reshape": (lambda t: ad.reshape(t["a"], 5, 2) * ad.reshape(t["a"], 5, 2),
                    {"a": n(size=(2, 5))}),
        "concat": (lambda t: ad.concat([ad.concat([t["a"], t["b"]], axis=1), t["c"]], axis=0),
                   {"a": n(size=(2, 3)), "b": n(size=(2, 2)), "c": n(size=(1, 5))}),
        "slice_cols": (lambda t: ad.slice_cols(t["a"], 1, 4), {"a": n(size=(3, 5))}),
        "tile_rows": (lambda t: ad.tile_rows(t["a"], 3), {"a": n(size=(2, 4))}),
        "gather_rows": (lambda t: ad.gather_rows(t["a"], np.array([0, 2, 2, 1, 0])),
                        {"a": n(size=(3, 4))}),
        "lstm_cell": (lambda t: ad.lstm_cell(t["x"], t["s"], t["w"], t["b"]),
                      {"x": n(size=(2, 3)), "s": n(size=(2, 8)), "w": 0.5 * n(size=(7, 16)),
                       "b": n(size=(1, 16))}),
    }


def check_ops(seed: int = 0, tol: float = DEFAULT_TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (op, inputs) in op_cases(rng).items():
        start = time.perf_counter()
        err = compare(_projected(rng, op), inputs)
        results.append(CheckResult(f"op:{name}", err, tol, time.perf_counter() - start))
    return results


def _lstm_inputs(rng, d, h):
    inputs = {f"x{j}": rng.normal(size=(2, d)) for j in range(3)}
    for gate in ("input", "forget", "cell", "output"):
        inputs[f"w_{gate}"] = 0.5 * rng.normal(size=(h, d + h))
        inputs[f"b_{gate}"] = 0.1 * rng.normal(size=(1, h))
    return inputs


def check_lstm(seed: int = 0, tol: float = DEFAULT_TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 1)
    inputs = _lstm_inputs(rng, 3, 4)
    results = []
    for fused in (True, False):
        def op(t, fused=fused):
            lstm = {k: v for k, v in t.items() if not k.startswith("x")}
            states, last = lstm_encode([t[f"x{j}"] for j in range(3)], lstm, fused=fused)
            return ad.concat([states[0], last], axis=1)

        start = time.perf_counter()
        err = compare(_projected(rng, op), inputs)
        results.append(CheckResult(f"lstm:{'fused' if fused else 'composite'}", err, tol,
                                   time.perf_counter() - start))
    return results


def check_attention_and_fusion(seed: int = 0, tol: float = DEFAULT_TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 2)
    batch, steps, d, h = 2, 3, 3, 4
    att_inputs = {"q": rng.normal(size=(batch, h)), "peers": rng.normal(size=(steps * batch, d)),
                  "k": rng.normal(size=(d, h)), "v": rng.normal(size=(d, h))}

    def att(t):
        distilled, weights = cross_attention(t["q"], t["peers"], t["k"], t["v"], steps)
        return ad.concat([distilled, weights], axis=1)

    adjacency = np.where(rng.uniform(size=(3, 5)) < 0.5, 1.0, 1e-3)
    fuse_inputs = {"low": rng.normal(size=(batch, 5)), "high": rng.normal(size=(batch, 3))}
    results = []
    for name, op, inputs in (("cross_attention", att, att_inputs),
                             ("fuse_logits", lambda t: fuse_logits(t["low"], t["high"], adjacency)[0],
                              fuse_inputs)):
        start = time.perf_counter()
        err = compare(_projected(rng, op), inputs)
        results.append(CheckResult(name, err, tol, time.perf_counter() - start))
    return results


def tiny_problem(seed: int = 0, n_dialogs: int = 6, prefix_len: int = 2):
    """A d=4 three-level model (vocabularies 3/5/4) on random dialogs."""
    rng = np.random.default_rng(seed + 3)
    vocabs = {
        "type": GoalVocabulary.from_names("type", [f"t{i}" for i in range(3)]),
        "entity": GoalVocabulary.from_names("entity", [f"e{i}" for i in range(5)]),
        "attribute": GoalVocabulary.from_names("attribute", [f"a{i}" for i in range(4)]),
    }
    length = prefix_len + 1
    records = [
        DialogRecord(f"d{k}", tuple(int(x) for x in rng.integers(3, size=length)),
                     tuple(int(x) for x in rng.integers(5, size=length)),
                     tuple(int(x) for x in rng.integers(4, size=length)))
        for k in range(n_dialogs)
    ]
    ds = GoalHierarchyDataset.build(vocabs, records)
    instances = [inst for inst in ds.instances if inst.prefix_len == prefix_len]
    config = ModelConfig(n_types=3, n_entities=5, n_attributes=4, embed_dim=4, hidden_dim=4,
                         soft_s0=0.5)
    return config, init_params(config, seed), instances, ds.adjacency


def check_model(seed: int = 0, tol: float = DEFAULT_TOL) -> list[CheckResult]:
    config, params, instances, adjacency = tiny_problem(seed)
    weights = {"type": np.ones(len(instances)),
               "entity": np.full(len(instances), 0.7),
               "attribute": np.full(len(instances), 0.4)}

    def build(p):
        traces = forward_chunks(p, config, instances, adjacency)
        losses = batch_losses(traces, config, soft=True, weights=weights)
        return losses["type"] + losses["entity"] + losses["attribute"]

    start = time.perf_counter()
    err = compare(build, params)
    return [CheckResult("model:dhl_d4", err, tol, time.perf_counter() - start)]


def weightnet_jacobian(net: Mapping[str, np.ndarray], x: float) -> dict[str, np.ndarray]:
    """d w(x) / d alpha written out by hand (independent of the tape)."""
    w1, b1, w2, b2 = (net[k] for k in ("weightnet.w1", "weightnet.b1", "weightnet.w2",
                                       "weightnet.b2"))
    a = np.tanh(x * w1 + b1)                      # 1 x hidden
    z = float((a @ w2 + b2)[0, 0])
    s = 1.0 / (1.0 + np.exp(-z))
    dz = s * (1.0 - s)
    da = dz * w2.T * (1.0 - a * a)                # 1 x hidden
    return {"weightnet.w1": da * x, "weightnet.b1": da,
            "weightnet.w2": dz * a.T, "weightnet.b2": np.array([[dz]])}


def toy_hypergradient_oracle(net, theta: float, eta: float, type_loss: float):
    """Closed form for the scalar toy: 2 theta* (-eta 2 theta) w'(alpha)."""
    w = weightnet_jacobian(net, type_loss)
    hidden = np.tanh(type_loss * net["weightnet.w1"] + net["weightnet.b1"])
    s = 1.0 / (1.0 + np.exp(-float((hidden @ net["weightnet.w2"] + net["weightnet.b2"])[0, 0])))
    theta_star = theta - eta * 2.0 * s * theta
    factor = 2.0 * theta_star * (-eta * 2.0 * theta)
    return {k: factor * v for k, v in w.items()}


def check_hypergradient_toy(seed: int = 0, tol: float = DEFAULT_TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed + 4)
    net = init_weightnet(seed)
    net = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in net.items()}
    theta, eta, type_loss = 1.3, 0.1, 0.8
    start = time.perf_counter()
    got = hypergradient(ScalarToyObjective(type_loss), {"theta": np.array([[theta]])}, net, eta)
    want = toy_hypergradient_oracle(net, theta, eta, type_loss)
    err = ad.max_relative_error(got, want)
    return [CheckResult("hypergradient:scalar_toy", err, tol, time.perf_counter() - start)]


def run_all(seed: int = 0, tol: float = DEFAULT_TOL) -> list[CheckResult]:
    results: list[CheckResult] = []
    for check in (check_ops, check_lstm, check_attention_and_fusion, check_model,
                  check_hypergradient_toy):
        results.extend(check(seed, tol))
    return results
