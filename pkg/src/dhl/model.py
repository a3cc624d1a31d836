"""The hierarchical goal planner: per-level LSTMs, cross attention, fusion.

Parameters are a flat ``dict[str, np.ndarray]`` so they can be copied,
checkpointed and perturbed without touching any tape. A forward pass binds
them to tensors (tracked on a :class:`~dhl.autodiff.Tape` when gradients are
wanted) and processes a batch of instances at once. Shorter prefixes are padded
on the left; masked steps leave the LSTM state at zero and receive no
attention, so padding never changes a result.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from dhl import autodiff as ad
from dhl.autodiff import Tape, Tensor
from dhl.data import DEFAULT_EPSILON, LEVELS, AdjacencyMatrix, TrainingInstance
from dhl.errors import ShapeError

GATES = ("input", "forget", "cell", "output")
# attention pairs: name -> (query level, peer level)
ATTENTION = {"type2entity": ("type", "entity"), "entity2type": ("entity", "type")}
_ATTN_PREFIX = {"type2entity": "t2e_attn", "entity2type": "e2t_attn"}
# the head of level X consumes the attention whose peer is X
_HEAD_ATTENTION = {"entity": "type2entity", "type": "entity2type"}


@dataclass(frozen=True)
class ModelConfig:
    n_types: int
    n_entities: int
    n_attributes: int = 0
    embed_dim: int = 256
    hidden_dim: int = 256
    use_cross_attention: bool = True
    use_hier_weights: bool = True
    use_soft_label: bool = True
    soft_s0: float = 0.02
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.embed_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("embed_dim and hidden_dim must be positive")
        if not 0.0 <= self.soft_s0 < 1.0:
            raise ValueError(f"soft_s0 must lie in [0, 1), got {self.soft_s0}")
        if self.n_types < 1 or self.n_entities < 1 or self.n_attributes < 0:
            raise ValueError("vocabulary sizes must be positive")

    @property
    def levels(self) -> tuple[str, ...]:
        return LEVELS if self.n_attributes > 0 else LEVELS[:2]

    def vocab_size(self, level: str) -> int:
        return {"type": self.n_types, "entity": self.n_entities,
                "attribute": self.n_attributes}[level]

    def head_input_dim(self, level: str) -> int:
        if self.use_cross_attention and level in _HEAD_ATTENTION:
            return 2 * self.hidden_dim
        return self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Name -> shape of every learnable array, in a fixed order."""
    d, h = config.embed_dim, config.hidden_dim
    shapes: dict[str, tuple[int, int]] = {}
    for level in config.levels:
        n = config.vocab_size(level)
        shapes[f"{level}_embed"] = (n, d)
        for gate in GATES:
            shapes[f"{level}_lstm.w_{gate}"] = (h, d + h)
            shapes[f"{level}_lstm.b_{gate}"] = (1, h)
    if config.use_cross_attention:
        for prefix in _ATTN_PREFIX.values():
            shapes[f"{prefix}.key"] = (d, h)
            shapes[f"{prefix}.value"] = (d, h)
    for level in config.levels:
        n = config.vocab_size(level)
        shapes[f"{level}_head.w1"] = (config.head_input_dim(level), h)
        shapes[f"{level}_head.b1"] = (1, h)
        shapes[f"{level}_head.w2"] = (h, n)
        shapes[f"{level}_head.b2"] = (1, n)
    return shapes


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        tail = name.rsplit(".", 1)[-1]
        if tail.startswith("b"):
            params[name] = np.ones(shape) if tail == "b_forget" else np.zeros(shape)
        else:
            params[name] = xavier_uniform(rng, shape)
    return params


def bind(params: Mapping[str, np.ndarray], tape: Tape | None = None) -> dict[str, Tensor]:
    """Wrap arrays as tensors; as tape leaves when ``tape`` is given."""
    if tape is None:
        return {k: Tensor(v) for k, v in params.items()}
    return tape.leaves(params)


# ------------------------------------------------------------------ building blocks


def _masked(new: Tensor, old: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return new
    return new * Tensor(mask) + old * Tensor(1.0 - mask)


def lstm_encode(embeddings: Sequence[Tensor], lstm: Mapping[str, Tensor],
                fused: bool = True,
                masks: Sequence[np.ndarray | None] | None = None) -> tuple[list[Tensor], Tensor]:
    """Run an LSTM from zero state over ``embeddings`` (each ``batch x d``).

    ``lstm`` maps ``w_input`` ... ``b_output`` to tensors. Returns every
    hidden state and the last one. ``fused=False`` composes the step from
    elementary ops instead of :func:`~dhl.autodiff.lstm_cell`; both give the
    same values and gradients. ``masks[j]`` (``batch x 1`` of 0/1, or None
    for all ones) freezes the state of rows whose sequence has not started.
    """
    if not embeddings:
        raise ShapeError("lstm_encode needs at least one step")
    hidden = lstm["w_input"].rows
    d = embeddings[0].cols
    if lstm["w_input"].cols != d + hidden:
        raise ShapeError(
            f"lstm weights {lstm['w_input'].shape} do not fit input dim {d} + hidden {hidden}")
    w_all = ad.transpose(ad.concat([lstm[f"w_{g}"] for g in GATES], axis=0))
    b_all = ad.concat([lstm[f"b_{g}"] for g in GATES], axis=1)
    batch = embeddings[0].rows
    masks = list(masks) if masks is not None else [None] * len(embeddings)
    states = []
    if fused:
        hc = Tensor(np.zeros((batch, 2 * hidden)))
        for x, m in zip(embeddings, masks):
            hc = _masked(ad.lstm_cell(x, hc, w_all, b_all), hc, m)
            states.append(ad.slice_cols(hc, 0, hidden))
        return states, states[-1]
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    for x, m in zip(embeddings, masks):
        h_old, c_old = h, c
        z = ad.concat([x, h], axis=1) @ w_all + b_all
        i = ad.sigmoid(ad.slice_cols(z, 0, hidden))
        f = ad.sigmoid(ad.slice_cols(z, hidden, 2 * hidden))
        g = ad.tanh(ad.slice_cols(z, 2 * hidden, 3 * hidden))
        o = ad.sigmoid(ad.slice_cols(z, 3 * hidden, 4 * hidden))
        c = f * c + i * g
        h = o * ad.tanh(c)
        h, c = _masked(h, h_old, m), _masked(c, c_old, m)
        states.append(h)
    return states, h


MASKED_SCORE = -1e30


def cross_attention(query: Tensor, peer_embeddings: Tensor, key_proj: Tensor,
                    value_proj: Tensor, steps: int,
                    mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Softmax-normalised exponential-kernel attention over a peer prefix.

    ``query`` is ``batch x h``; ``peer_embeddings`` stacks the prefix
    time-major (row ``j * batch + b`` is step ``j`` of instance ``b``).
    Returns the distilled ``batch x h`` vector and the ``batch x steps``
    weight rows. ``mask`` (``batch x steps`` booleans) marks real steps;
    padded steps get exactly zero weight.
    """
    if steps < 1:
        raise ShapeError("cross attention needs a non-empty prefix")
    batch, h = query.shape
    if peer_embeddings.rows != steps * batch:
        raise ShapeError(
            f"peer embeddings have {peer_embeddings.rows} rows, expected {steps} x {batch}")
    keys = peer_embeddings @ key_proj
    values = peer_embeddings @ value_proj
    if keys.cols != h:
        raise ShapeError(f"key projection gives width {keys.cols}, query has {h}")
    scores = ad.sum(ad.tile_rows(query, steps) * keys, axis=1)
    scores = ad.transpose(ad.reshape(scores, steps, batch)) * (1.0 / math.sqrt(key_proj.rows))
    if mask is not None and not mask.all():
        scores = scores + Tensor(np.where(mask, 0.0, MASKED_SCORE))
    weights = ad.softmax_rows(scores)
    col = ad.reshape(ad.transpose(weights), steps * batch, 1)
    mixed = ad.reshape(values * col, steps, batch * h)
    return ad.reshape(ad.sum(mixed, axis=0), batch, h), weights


def fuse_logits(low_logits: Tensor, high_logits: Tensor, adjacency) -> tuple[Tensor, Tensor]:
    """Add ``softmax(high) @ C`` to the low-level logits.

    Returns the fused logits and the added contribution.
    """
    values = adjacency.values if isinstance(adjacency, AdjacencyMatrix) else np.asarray(adjacency)
    if values.shape != (high_logits.cols, low_logits.cols):
        raise ShapeError(
            f"adjacency {values.shape} does not match high {high_logits.cols} "
            f"x low {low_logits.cols}")
    contribution = ad.softmax_rows(high_logits) @ Tensor(values)
    return low_logits + contribution, contribution


def mlp_head(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    hidden = ad.tanh(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return hidden @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def soft_label(target_id: int, final_goal_id: int, vocab_size: int, prefix_len: int,
               s0: float, enabled: bool = True) -> np.ndarray:
    """Target distribution: ``1 - s_p`` on the next goal, ``s_p`` on the final goal.

    ``s_p = s0 * min(L / 10, 1)``; one-hot when disabled or when the next
    goal is the final goal.
    """
    if not (0 <= target_id < vocab_size and 0 <= final_goal_id < vocab_size):
        raise IndexError(f"goal ids ({target_id}, {final_goal_id}) outside [0, {vocab_size})")
    if not 0.0 <= s0 < 1.0:
        raise ValueError(f"s0 must lie in [0, 1), got {s0}")
    out = np.zeros(vocab_size)
    out[target_id] = 1.0
    if enabled and target_id != final_goal_id:
        s_p = s0 * min(prefix_len / 10.0, 1.0)
        out[target_id] = 1.0 - s_p
        out[final_goal_id] = s_p
    return out


def argmax_ids(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax, ties going to the smallest id."""
    return np.asarray(logits).argmax(axis=1)


# ------------------------------------------------------------------- forward


@dataclass
class ForwardTrace:
    """Everything one forward pass computed for a batch.

    ``steps`` is the longest prefix in the batch; ``states`` and attention
    columns are left-padded to it. ``pre_logits`` are head outputs; ``logits`` are post-fusion (the type
    level is never fused, so both coincide there). ``fusion`` holds the
    additive ``softmax(high) @ C`` term per fused level.
    """

    instances: list[TrainingInstance]
    steps: int
    hidden: dict[str, Tensor]
    states: dict[str, list[Tensor]]
    attention: dict[str, Tensor] = field(default_factory=dict)
    pre_logits: dict[str, Tensor] = field(default_factory=dict)
    logits: dict[str, Tensor] = field(default_factory=dict)
    fusion: dict[str, Tensor] = field(default_factory=dict)

    @property
    def levels(self) -> tuple[str, ...]:
        return tuple(lv for lv in LEVELS if lv in self.logits)

    def attention_rows(self, name: str) -> np.ndarray:
        return self.attention[name].data


def forward(
    p: Mapping[str, Tensor],
    config: ModelConfig,
    instances: Sequence[TrainingInstance],
    adjacency: Mapping[str, AdjacencyMatrix],
) -> ForwardTrace:
    """Batched forward pass; prefixes may differ in length.

    ``p`` is the output of :func:`bind`. ``adjacency`` maps the fused (low)
    level to its matrix: ``{"entity": C_pe, "attribute": C_er}``.
    """
    if not instances:
        raise ShapeError("forward needs at least one instance")
    levels = config.levels
    for inst in instances:
        if inst.levels != levels:
            raise ShapeError(f"instance levels {inst.levels} do not match model levels {levels}")
    batch = len(instances)
    lengths = np.array([inst.prefix_len for inst in instances])
    if lengths.min() < 1:
        raise ShapeError("every instance needs a non-empty prefix")
    steps = int(lengths.max())
    # left padding: row b is real from step steps - lengths[b] on
    valid = np.arange(steps)[None, :] >= (steps - lengths)[:, None]
    masks = [None if valid[:, j].all() else valid[:, j:j + 1].astype(np.float64)
             for j in range(steps)]

    embedded: dict[str, Tensor] = {}
    hidden: dict[str, Tensor] = {}
    states: dict[str, list[Tensor]] = {}
    for level in levels:
        ids = np.zeros((batch, steps), dtype=np.int64)
        for b, inst in enumerate(instances):
            ids[b, steps - lengths[b]:] = inst.prefixes[level]
        # time-major stacking: row j * batch + b
        embedded[level] = ad.gather_rows(p[f"{level}_embed"], ids.T.reshape(-1))
        steps_in = [ad.gather_rows(p[f"{level}_embed"], ids[:, j]) for j in range(steps)]
        lstm = {k.split(".", 1)[1]: v for k, v in p.items() if k.startswith(f"{level}_lstm.")}
        states[level], hidden[level] = lstm_encode(steps_in, lstm, masks=masks)

    trace = ForwardTrace(list(instances), steps, hidden, states)
    head_inputs = {level: hidden[level] for level in levels}
    if config.use_cross_attention:
        for name, (query_level, peer_level) in ATTENTION.items():
            prefix = _ATTN_PREFIX[name]
            distilled, weights = cross_attention(
                hidden[query_level], embedded[peer_level],
                p[f"{prefix}.key"], p[f"{prefix}.value"], steps, valid)
            trace.attention[name] = weights
            head_inputs[peer_level] = ad.concat([hidden[peer_level], distilled], axis=1)

    for level in levels:
        trace.pre_logits[level] = mlp_head(head_inputs[level], p, f"{level}_head")
    trace.logits["type"] = trace.pre_logits["type"]
    trace.logits["entity"], trace.fusion["entity"] = fuse_logits(
        trace.pre_logits["entity"], trace.logits["type"], adjacency["entity"])
    if "attribute" in levels:
        trace.logits["attribute"], trace.fusion["attribute"] = fuse_logits(
            trace.pre_logits["attribute"], trace.logits["entity"], adjacency["attribute"])
    if batch != trace.logits["type"].rows:
        raise ShapeError("internal batch mismatch")
    return trace


def target_matrix(trace: ForwardTrace, level: str, config: ModelConfig,
                  soft: bool = True) -> np.ndarray:
    n = config.vocab_size(level)
    enabled = soft and config.use_soft_label
    return np.stack([
        soft_label(inst.targets[level], inst.finals[level], n, inst.prefix_len,
                   config.soft_s0, enabled)
        for inst in trace.instances
    ])


def level_loss(trace: ForwardTrace, level: str, config: ModelConfig,
               soft: bool = True, row_weights: np.ndarray | None = None) -> Tensor:
    """Cross entropy of the post-fusion softmax against (soft) next-goal labels.

    ``row_weights`` scales each instance's term (still averaged over rows).
    """
    targets = target_matrix(trace, level, config, soft)
    if row_weights is not None:
        targets = targets * np.asarray(row_weights, dtype=np.float64).reshape(-1, 1)
    return ad.cross_entropy(ad.softmax_rows(trace.logits[level]), targets)


def row_losses(trace: ForwardTrace, level: str, config: ModelConfig, soft: bool = True) -> np.ndarray:
    """Per-instance loss values (no tape), used as weight-network inputs."""
    targets = target_matrix(trace, level, config, soft)
    probs = ad.softmax_rows(Tensor(trace.logits[level].data)).data
    return -(targets * np.log(np.maximum(probs, ad.LOG_CLAMP))).sum(axis=1)


def predict_next(trace: ForwardTrace, level: str) -> np.ndarray:
    """Predicted next-goal id for every instance in the trace."""
    return argmax_ids(trace.logits[level].data)


def forward_chunks(p, config, instances, adjacency, chunk_size: int | None = None) -> list[ForwardTrace]:
    """Forward over consecutive chunks of ``instances`` (one chunk by default)."""
    instances = list(instances)
    size = chunk_size or max(len(instances), 1)
    return [forward(p, config, instances[i:i + size], adjacency)
            for i in range(0, len(instances), size)]


def batch_losses(
    traces: Sequence[ForwardTrace],
    config: ModelConfig,
    soft: bool = True,
    weights: Mapping[str, np.ndarray] | None = None,
) -> dict[str, Tensor]:
    """Batch-mean loss per level over the traces of one batch.

    ``weights[level]``, when given, holds one multiplier per instance in
    trace order (the traces' instance lists concatenated).
    """
    total = sum(len(t.instances) for t in traces)
    out: dict[str, Tensor] = {}
    for level in config.levels:
        acc = None
        offset = 0
        for t in traces:
            n = len(t.instances)
            rw = None if weights is None or level not in weights else weights[level][offset:offset + n]
            term = level_loss(t, level, config, soft, rw) * (n / total)
            acc = term if acc is None else acc + term
            offset += n
        out[level] = acc
    return out


def batch_row_losses(traces: Sequence[ForwardTrace], config: ModelConfig,
                     soft: bool = True) -> dict[str, np.ndarray]:
    return {level: np.concatenate([row_losses(t, level, config, soft) for t in traces])
            for level in config.levels}
