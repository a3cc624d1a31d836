"""Command-line entry point: ``dhl {gen-data,train,eval,predict,grad-check}``.

Machine-readable output goes to stdout as one JSON document (or JSONL);
diagnostics go to stderr. Exit codes: 0 ok, 1 runtime or numeric failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from dhl import checkpoint as ckpt_io
from dhl import data as D
from dhl.errors import CheckpointError, DataError, NumericOverflowError, ShapeError
from dhl.gradcheck import DEFAULT_TOL, run_all
from dhl.metrics import evaluate_model
from dhl.model import ModelConfig, bind, forward, init_params
from dhl.trainer import (
    MODES,
    WEIGHT_INPUT,
    TrainConfig,
    init_weightnet,
    train,
    weight_forward,
)

log = logging.getLogger("dhl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
ABLATIONS = ("att", "weight", "soft")


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, ensure_ascii=False) + "\n")
    sys.stdout.flush()


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(args) -> int:
    text = D.generate_synthetic(
        args.types, args.entities, args.attrs, args.dialogs,
        len_range=(args.len_min, args.len_max), drift=args.drift, seed=args.seed,
        concentration=args.concentration, close_on_final=args.close_on_final)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_text(out, text)
    vocabs, records = D.parse_dialogs(text.splitlines())
    summary = {
        "out": str(out),
        "dialogs": len(records),
        "instances": sum(len(r.type_seq) - 1 for r in records),
        "vocab_sizes": {lv: len(v) for lv, v in vocabs.items()},
    }
    if args.split_dir:
        split_dir = Path(args.split_dir)
        split_dir.mkdir(parents=True, exist_ok=True)
        parts = D.split_dataset(records, seed=args.seed)
        summary["splits"] = {}
        for name, part in zip(("train", "dev", "test"), parts):
            D.write_dialogs_jsonl(split_dir / f"{name}.jsonl", part, vocabs)
            summary["splits"][name] = len(part)
    _emit(summary)
    return EXIT_OK


# --------------------------------------------------------------------- train


@dataclass
class RunConfig:
    train: str | None = None
    dev: str | None = None
    out: str | None = None
    embed_dim: int = 256
    hidden_dim: int = 256
    s0: float = 0.02
    epsilon: float = D.DEFAULT_EPSILON
    ablate: list = field(default_factory=list)
    lr: float = 1e-3
    weightnet_lr: float = 1e-5
    epochs: int = 30
    batch: int = 128
    seed: int = 0
    mode: str = "bilevel"
    weight_granularity: str = "batch"
    outer_optimizer: str = "sgd"
    max_steps: int | None = None

    @classmethod
    def resolve(cls, file_values: dict, overrides: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("train", "dev", "out"):
            if not getattr(self, name):
                raise UsageError(f"--{name} is required (flag or config key)")
        if isinstance(self.ablate, str):
            self.ablate = [a for a in self.ablate.split(",") if a]
        bad = sorted(set(self.ablate) - set(ABLATIONS))
        if bad:
            raise UsageError(f"unknown ablations {bad}; choose from {list(ABLATIONS)}")
        self.ablate = sorted(set(self.ablate))
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {list(MODES)}")
        for name in ("embed_dim", "hidden_dim", "epochs", "batch"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise UsageError(f"{name} must be a positive integer, got {value!r}")
        if not 0.0 <= self.s0 <= 1.0:
            raise UsageError(f"s0 must lie in [0, 1], got {self.s0}")
        if self.lr <= 0 or self.weightnet_lr < 0:
            raise UsageError("learning rates must be positive")

    def model_config(self, vocabs) -> ModelConfig:
        return ModelConfig(
            n_types=len(vocabs["type"]), n_entities=len(vocabs["entity"]),
            n_attributes=len(vocabs["attribute"]) if "attribute" in vocabs else 0,
            embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
            use_cross_attention="att" not in self.ablate,
            use_hier_weights="weight" not in self.ablate,
            use_soft_label="soft" not in self.ablate,
            soft_s0=self.s0, epsilon=self.epsilon)

    def train_config(self) -> TrainConfig:
        return TrainConfig(model_lr=self.lr, weightnet_lr=self.weightnet_lr, epochs=self.epochs,
                           batch_size=self.batch, seed=self.seed, mode=self.mode,
                           weight_granularity=self.weight_granularity,
                           outer_optimizer=self.outer_optimizer, max_steps=self.max_steps)


def _read_config_file(path) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    return values


def cmd_train(args) -> int:
    overrides = {"train": args.train, "dev": args.dev, "out": args.out, "lr": args.lr,
                 "epochs": args.epochs, "batch": args.batch, "seed": args.seed, "s0": args.s0,
                 "ablate": args.ablate, "mode": args.mode, "embed_dim": args.embed_dim,
                 "hidden_dim": args.hidden_dim, "weightnet_lr": args.weightnet_lr,
                 "max_steps": args.max_steps}
    try:
        run = RunConfig.resolve(_read_config_file(args.config), overrides)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc

    vocabs, train_records = D.load_dialogs_jsonl(run.train)
    vocabs, dev_records = D.load_dialogs_jsonl(run.dev, vocabs)
    train_ds = D.GoalHierarchyDataset.build(vocabs, train_records, epsilon=run.epsilon)
    dev_ds = D.GoalHierarchyDataset.build(vocabs, dev_records, adjacency_from=train_records,
                                          epsilon=run.epsilon)
    model_config = run.model_config(vocabs)
    train_config = run.train_config()

    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(asdict(run), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    log.info("training on %d instances, dev %d", len(train_ds.instances), len(dev_ds.instances))
    result = train(train_ds.instances, model_config, train_config,
                   init_params(model_config, run.seed), init_weightnet(run.seed),
                   train_ds.adjacency, dev_ds.instances)

    with open(out / "snapshots.jsonl", "w", encoding="utf-8") as fh:
        for snap in result.snapshots:
            fh.write(json.dumps(snap.to_json()) + "\n")
    best = ckpt_io.training_checkpoint(
        model_config, result.best_params, result.best_weightnet, vocabs, train_ds.adjacency,
        train_config.to_dict(), extra={"best_epoch": result.best_epoch})
    ckpt_io.save(best, out / "checkpoint.dhl")
    last = ckpt_io.training_checkpoint(
        model_config, result.params, result.weightnet, vocabs, train_ds.adjacency,
        train_config.to_dict(), adam=result.adam, extra={"steps": result.steps})
    ckpt_io.save(last, out / "last.dhl")

    reports = evaluate_model(result.best_params, model_config, dev_ds.instances,
                             train_ds.adjacency)
    metrics = [r.to_json() for r in reports.values()]
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
    _emit(metrics)
    return EXIT_OK


# ---------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    if args.baseline is None and not args.ckpt:
        raise UsageError("--ckpt is required unless --baseline next is given")
    if args.ckpt and args.baseline is None:
        ckpt = ckpt_io.load(args.ckpt)
        vocabs = ckpt.vocabs()
        _, records = D.load_dialogs_jsonl(args.data, vocabs, extend=False)
        config, params, adjacency = ckpt.model_config(), ckpt.params(), ckpt.adjacency()
    else:
        vocabs, records = D.load_dialogs_jsonl(args.data)
        config = ModelConfig(
            n_types=len(vocabs["type"]), n_entities=len(vocabs["entity"]),
            n_attributes=len(vocabs["attribute"]) if "attribute" in vocabs else 0)
        params, adjacency = None, None
    instances = D.expand_instances(records)
    if instances and instances[0].levels != config.levels:
        raise UsageError(f"data levels {instances[0].levels} do not match model levels "
                         f"{config.levels}")
    reports = evaluate_model(params, config, instances, adjacency, baseline=args.baseline,
                             workers=args.workers)
    payload = [r.to_json() for r in reports.values()]
    if args.per_level:
        for item in payload:
            _emit(item)
    else:
        _emit(payload)
    return EXIT_OK


# ------------------------------------------------------------------- predict


def _split_names(text: str | None) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()] if text else []


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def cmd_predict(args) -> int:
    ckpt = ckpt_io.load(args.ckpt)
    config, vocabs = ckpt.model_config(), ckpt.vocabs()
    given = {"type": _split_names(args.types), "entity": _split_names(args.entities),
             "attribute": _split_names(args.attrs)}
    if "attribute" not in config.levels and given["attribute"]:
        raise UsageError("this model has no attribute level; drop --attrs")
    levels = config.levels
    lengths = {lv: len(given[lv]) for lv in levels}
    if len(set(lengths.values())) != 1 or lengths["type"] == 0:
        raise UsageError(f"goal lists must be non-empty and equally long, got {lengths}")
    unknown = {lv: [n for n in given[lv] if n not in vocabs[lv].index] for lv in levels}
    unknown = {lv: names for lv, names in unknown.items() if names}
    if unknown:
        detail = "; ".join(f"{lv}: {', '.join(n)}" for lv, n in unknown.items())
        raise UsageError(f"out-of-vocabulary goals ({detail})")

    prefixes = {lv: tuple(vocabs[lv].ids_of(given[lv])) for lv in levels}
    inst = D.TrainingInstance("predict", lengths["type"], prefixes, None, None)
    trace = forward(bind(ckpt.params()), config, [inst], ckpt.adjacency())
    result: dict = {"prefix_len": inst.prefix_len, "next": {}}
    probs = {}
    for lv in levels:
        logits = trace.logits[lv].data[0]
        probs[lv] = _softmax(logits)
        k = int(np.argmax(logits))
        result["next"][lv] = {"goal": vocabs[lv].names[k], "prob": float(probs[lv][k])}

    if args.explain:
        explain: dict = {"attention": {}, "fusion": {}, "omega": {}}
        for name, weights in trace.attention.items():
            explain["attention"][name] = weights.data[0].tolist()
        for lv, contribution in trace.fusion.items():
            pre = trace.pre_logits[lv].data[0]
            post = trace.logits[lv].data[0]
            delta = contribution.data[0]
            top = np.argsort(-delta, kind="stable")[:5]
            k = int(np.argmax(post))
            explain["fusion"][lv] = {
                "top5": [{"goal": vocabs[lv].names[i], "pre": float(pre[i]),
                          "post": float(post[i]), "delta": float(delta[i])} for i in top],
                "contribution": float(delta[k]),
            }
        net = ckpt.weightnet()
        if net and config.use_hier_weights:
            for lv in levels[1:]:
                # no label at inference: the upper level's own confidence stands in for its loss
                proxy = float(-np.log(max(probs[WEIGHT_INPUT[lv]].max(), 1e-12)))
                explain["omega"][lv] = {"loss_proxy": proxy, "omega": weight_forward(net, proxy)}
        result["explain"] = explain
    _emit(result)
    return EXIT_OK


# ---------------------------------------------------------------- grad-check


def cmd_grad_check(args) -> int:
    results = run_all(args.seed, args.tol)
    passed = all(r.passed for r in results)
    _emit({"seed": args.seed, "tol": args.tol, "passed": passed,
           "checks": [r.to_json() for r in results]})
    if not passed:
        failing = [r.name for r in results if not r.passed]
        print(f"grad-check failed: {', '.join(failing)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dhl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic hierarchical goal corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--types", type=int, default=5)
    g.add_argument("--entities", type=int, default=20)
    g.add_argument("--attrs", type=int, default=0)
    g.add_argument("--dialogs", type=int, default=2000)
    g.add_argument("--len-min", type=int, default=8)
    g.add_argument("--len-max", type=int, default=16)
    g.add_argument("--drift", type=float, default=0.3)
    g.add_argument("--concentration", type=float, default=D.TRANSITION_CONCENTRATION)
    g.add_argument("--close-on-final", action="store_true",
                   help="end every dialog on its designated final type")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split-dir", help="also write train/dev/test.jsonl here (65/10/25)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write checkpoint, logs and metrics")
    t.add_argument("--train")
    t.add_argument("--dev")
    t.add_argument("--out")
    t.add_argument("--config", help="JSON file with flat keys; flags take precedence")
    t.add_argument("--lr", type=float)
    t.add_argument("--weightnet-lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--s0", type=float)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--hidden-dim", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--ablate", help="comma list from att,weight,soft")
    t.add_argument("--mode", choices=MODES)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint or the Next baseline")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--baseline", choices=["next"])
    e.add_argument("--per-level", action="store_true", help="one JSON line per level")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict the next goals for one context")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--types", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--attrs")
    p.add_argument("--explain", action="store_true")
    p.set_defaults(func=cmd_predict)

    c = sub.add_parser("grad-check", help="finite-difference check of every gradient")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=DEFAULT_TOL)
    c.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericOverflowError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
