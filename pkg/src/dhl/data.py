"""Goal-sequence data: vocabularies, JSONL dialogs, adjacency, instances.

A dialog carries one goal sequence per level (type, entity and optionally
attribute) of equal length. Every prefix of length ``L`` (``1 <= L < n``)
becomes one :class:`TrainingInstance` whose targets are the goals at
position ``L``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from dhl.errors import (
    DataError,
    FractionSumError,
    LengthMismatchError,
    ParseError,
    SequenceTooShortError,
    VocabularyError,
)

LEVELS = ("type", "entity", "attribute")
DEFAULT_EPSILON = 1e-3
DEFAULT_FRACTIONS = (0.65, 0.10, 0.25)

_SEQ_FIELD = {"type": "goal_types", "entity": "goal_entities", "attribute": "goal_attributes"}
_FINAL_FIELD = {
    "type": "final_goal_type",
    "entity": "final_goal_entity",
    "attribute": "final_goal_attribute",
}


@dataclass(frozen=True)
class GoalVocabulary:
    level: str
    names: tuple[str, ...]
    index: Mapping[str, int] = field(repr=False, compare=False)

    @classmethod
    def from_names(cls, level: str, names: Iterable[str]) -> "GoalVocabulary":
        if level not in LEVELS:
            raise ValueError(f"unknown level {level!r}")
        names = tuple(names)
        index = {n: i for i, n in enumerate(names)}
        if len(index) != len(names):
            raise VocabularyError(f"{level} vocabulary has duplicate names")
        return cls(level, names, index)

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise VocabularyError(f"unknown {self.level} goal {name!r}") from None

    def ids_of(self, names: Sequence[str]) -> list[int]:
        unknown = [n for n in names if n not in self.index]
        if unknown:
            raise VocabularyError(f"unknown {self.level} goals: {', '.join(unknown)}")
        return [self.index[n] for n in names]


@dataclass(frozen=True)
class DialogRecord:
    dialog_id: str
    type_seq: tuple[int, ...]
    entity_seq: tuple[int, ...]
    attribute_seq: tuple[int, ...] | None = None
    final_type: int | None = None
    final_entity: int | None = None
    final_attribute: int | None = None

    def __post_init__(self):
        lengths = {"types": len(self.type_seq), "entities": len(self.entity_seq)}
        if self.attribute_seq is not None:
            lengths["attributes"] = len(self.attribute_seq)
        if len(set(lengths.values())) != 1:
            raise LengthMismatchError(self.dialog_id, lengths)
        if len(self.type_seq) < 2:
            raise SequenceTooShortError(self.dialog_id, len(self.type_seq))
        # final goals default to the closing goal of each sequence
        for level in LEVELS:
            seq = self.seq(level)
            if seq is not None and getattr(self, f"final_{level}") is None:
                object.__setattr__(self, f"final_{level}", seq[-1])

    def __len__(self) -> int:
        return len(self.type_seq)

    @property
    def levels(self) -> tuple[str, ...]:
        return LEVELS if self.attribute_seq is not None else LEVELS[:2]

    def seq(self, level: str) -> tuple[int, ...] | None:
        return getattr(self, f"{level}_seq")

    def final(self, level: str) -> int | None:
        return getattr(self, f"final_{level}")


@dataclass(frozen=True)
class AdjacencyMatrix:
    high_level: str
    low_level: str
    values: np.ndarray
    epsilon: float

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TrainingInstance:
    dialog_id: str
    prefix_len: int
    prefixes: Mapping[str, tuple[int, ...]]
    targets: Mapping[str, int] | None
    finals: Mapping[str, int] | None

    @property
    def levels(self) -> tuple[str, ...]:
        return tuple(level for level in LEVELS if level in self.prefixes)


# ------------------------------------------------------------------- loading


class _VocabBuilder:
    def __init__(self, vocabs: Mapping[str, GoalVocabulary] | None, extend: bool):
        self.names = {lv: list(v.names) for lv, v in (vocabs or {}).items()}
        self.index = {lv: dict(v.index) for lv, v in (vocabs or {}).items()}
        self.extend = extend

    def ids(self, level: str, names: Sequence[str], line_no: int) -> tuple[int, ...]:
        names_list = self.names.setdefault(level, [])
        index = self.index.setdefault(level, {})
        out = []
        unknown = []
        for n in names:
            if n not in index:
                if not self.extend:
                    unknown.append(n)
                    continue
                index[n] = len(names_list)
                names_list.append(n)
            out.append(index.get(n, -1))
        if unknown:
            raise VocabularyError(
                f"line {line_no}: unknown {level} goals: {', '.join(sorted(set(unknown)))}"
            )
        return tuple(out)

    def build(self) -> dict[str, GoalVocabulary]:
        return {lv: GoalVocabulary.from_names(lv, self.names[lv])
                for lv in LEVELS if lv in self.names}


def _string_list(obj: dict, key: str, line_no: int) -> list[str] | None:
    value = obj.get(key)
    if value is None:
        return None
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ParseError(line_no, f"field {key!r} must be an array of strings")
    return value


def parse_dialogs(
    lines: Iterable[str],
    vocabs: Mapping[str, GoalVocabulary] | None = None,
    *,
    extend: bool = True,
) -> tuple[dict[str, GoalVocabulary], list[DialogRecord]]:
    """Parse JSONL dialog lines into records.

    With ``vocabs`` given, ids continue from those vocabularies; with
    ``extend=False`` any goal outside them raises :class:`VocabularyError`.
    """
    builder = _VocabBuilder(vocabs, extend)
    records: list[DialogRecord] = []
    with_attrs: bool | None = None
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ParseError(line_no, "expected a JSON object")
        dialog_id = obj.get("dialog_id", str(line_no))
        if not isinstance(dialog_id, str):
            raise ParseError(line_no, "dialog_id must be a string")
        types = _string_list(obj, "goal_types", line_no)
        entities = _string_list(obj, "goal_entities", line_no)
        attrs = _string_list(obj, "goal_attributes", line_no)
        if types is None or entities is None:
            raise ParseError(line_no, "goal_types and goal_entities are required")
        if with_attrs is None:
            with_attrs = attrs is not None
        elif with_attrs != (attrs is not None):
            raise ParseError(line_no, "goal_attributes must be present on every line or none")
        lengths = {"types": len(types), "entities": len(entities)}
        if attrs is not None:
            lengths["attributes"] = len(attrs)
        if len(set(lengths.values())) != 1:
            raise LengthMismatchError(dialog_id, lengths)
        if len(types) < 2:
            raise SequenceTooShortError(dialog_id, len(types))

        seqs = {"type": types, "entity": entities}
        if attrs is not None:
            seqs["attribute"] = attrs
        kwargs = {}
        for level, names in seqs.items():
            kwargs[f"{level}_seq"] = builder.ids(level, names, line_no)
            final_name = obj.get(_FINAL_FIELD[level])
            if final_name is not None:
                if not isinstance(final_name, str):
                    raise ParseError(line_no, f"{_FINAL_FIELD[level]} must be a string")
                kwargs[f"final_{level}"] = builder.ids(level, [final_name], line_no)[0]
        records.append(DialogRecord(dialog_id=dialog_id, **kwargs))
    return builder.build(), records


def load_dialogs_jsonl(
    path,
    vocabs: Mapping[str, GoalVocabulary] | None = None,
    *,
    extend: bool = True,
) -> tuple[dict[str, GoalVocabulary], list[DialogRecord]]:
    with open(path, encoding="utf-8") as fh:
        return parse_dialogs(fh, vocabs, extend=extend)


def record_to_json(record: DialogRecord, vocabs: Mapping[str, GoalVocabulary]) -> str:
    obj: dict = {"dialog_id": record.dialog_id}
    levels = record.levels
    for level in levels:
        obj[_SEQ_FIELD[level]] = [vocabs[level].names[i] for i in record.seq(level)]
    for level in levels:
        obj[_FINAL_FIELD[level]] = vocabs[level].names[record.final(level)]
    return json.dumps(obj, ensure_ascii=False)


def dumps_dialogs(records: Sequence[DialogRecord], vocabs: Mapping[str, GoalVocabulary]) -> str:
    return "".join(record_to_json(r, vocabs) + "\n" for r in records)


def write_dialogs_jsonl(path, records, vocabs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_dialogs(records, vocabs))


# ------------------------------------------------------------ transformations


def build_adjacency(
    records: Iterable[DialogRecord],
    high: GoalVocabulary,
    low: GoalVocabulary,
    epsilon: float = DEFAULT_EPSILON,
) -> AdjacencyMatrix:
    """1.0 where a high/low goal pair shares a turn in some dialog, else epsilon."""
    if not 0.0 < epsilon < 0.1:
        raise ValueError(f"epsilon must lie in (0, 0.1), got {epsilon}")
    values = np.full((len(high), len(low)), epsilon)
    for rec in records:
        hs, ls = rec.seq(high.level), rec.seq(low.level)
        if hs is None or ls is None:
            continue
        values[list(hs), list(ls)] = 1.0
    return AdjacencyMatrix(high.level, low.level, values, epsilon)


def expand_instances(records: Iterable[DialogRecord]) -> list[TrainingInstance]:
    out = []
    for rec in records:
        levels = rec.levels
        finals = {lv: rec.final(lv) for lv in levels}
        for L in range(1, len(rec)):
            out.append(TrainingInstance(
                dialog_id=rec.dialog_id,
                prefix_len=L,
                prefixes={lv: rec.seq(lv)[:L] for lv in levels},
                targets={lv: rec.seq(lv)[L] for lv in levels},
                finals=finals,
            ))
    return out


def split_dataset(
    records: Sequence[DialogRecord],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> tuple[list[DialogRecord], list[DialogRecord], list[DialogRecord]]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise FractionSumError("need three non-negative fractions")
    if abs(float(np.sum(fractions)) - 1.0) > 1e-9:
        raise FractionSumError(f"fractions must sum to 1, got {np.sum(fractions)!r}")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round((fractions[0] + fractions[1]) * n)) - n_train
    shuffled = [records[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_dev], shuffled[n_train + n_dev:]


@dataclass
class GoalHierarchyDataset:
    """Records of one split plus the adjacency matrices used for fusion.

    The adjacency always comes from the training split, so dev and test
    datasets are built with the training records passed as ``adjacency_from``.
    """

    vocabs: dict[str, GoalVocabulary]
    records: list[DialogRecord]
    adjacency: dict[str, AdjacencyMatrix]
    instances: list[TrainingInstance]

    @property
    def levels(self) -> tuple[str, ...]:
        return LEVELS if "attribute" in self.vocabs else LEVELS[:2]

    @classmethod
    def build(
        cls,
        vocabs: Mapping[str, GoalVocabulary],
        records: Sequence[DialogRecord],
        adjacency_from: Sequence[DialogRecord] | None = None,
        epsilon: float = DEFAULT_EPSILON,
    ) -> "GoalHierarchyDataset":
        source = records if adjacency_from is None else adjacency_from
        vocabs = dict(vocabs)
        adjacency = {"entity": build_adjacency(source, vocabs["type"], vocabs["entity"], epsilon)}
        if "attribute" in vocabs:
            adjacency["attribute"] = build_adjacency(
                source, vocabs["entity"], vocabs["attribute"], epsilon)
        return cls(vocabs, list(records), adjacency, expand_instances(records))


# ------------------------------------------------------------------ synthetic

TRANSITION_CONCENTRATION = 0.05


def entity_blocks(n_types: int, n_entities: int) -> list[range]:
    """Contiguous disjoint entity ranges, one per type, sizes differing by at most 1."""
    base, extra = divmod(n_entities, n_types)
    blocks, start = [], 0
    for k in range(n_types):
        size = base + (1 if k < extra else 0)
        blocks.append(range(start, start + size))
        start += size
    return blocks


def _names(prefix: str, n: int) -> list[str]:
    width = len(str(max(n - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def generate_synthetic(
    n_types: int,
    n_entities: int,
    n_attributes: int,
    n_dialogs: int,
    len_range: tuple[int, int] = (4, 8),
    drift: float = 0.3,
    seed: int = 0,
    concentration: float = TRANSITION_CONCENTRATION,
    close_on_final: bool = False,
) -> str:
    """Seeded hierarchical goal corpus as JSONL text.

    Types follow a random Markov chain; at each step, with probability
    ``drift``, the dialog jumps to its own designated final type instead,
    and with ``close_on_final`` the last step is always that final type.
    Each type owns a disjoint block of entities, and within one dialog every
    type is bound to a single entity of its block, so revisiting a type
    revisits its entity. Each entity has one fixed attribute. The final goals
    written for a dialog are its last-step goals. ``concentration`` is the
    Dirichlet parameter of the transition rows; smaller is more predictable.
    """
    lines, _ = _generate(n_types, n_entities, n_attributes, n_dialogs, len_range, drift, seed,
                         concentration, close_on_final)
    return "".join(lines)


def _generate(n_types, n_entities, n_attributes, n_dialogs, len_range, drift, seed,
              concentration=TRANSITION_CONCENTRATION, close_on_final=False):
    """Returns the JSONL lines and each dialog's designated final type index."""
    len_min, len_max = len_range
    if n_types < 1 or n_entities < 1 or n_dialogs < 1:
        raise DataError("n_types, n_entities and n_dialogs must be positive")
    if n_attributes < 0:
        raise DataError("n_attributes must be >= 0")
    if n_entities < n_types:
        raise DataError(
            f"need at least one entity per type ({n_entities} entities < {n_types} types)")
    if len_min < 2 or len_max < len_min:
        raise DataError(f"invalid length range [{len_min}, {len_max}]")
    if not 0.0 <= drift <= 1.0:
        raise DataError(f"drift must lie in [0, 1], got {drift}")
    if concentration <= 0:
        raise DataError("concentration must be positive")

    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.full(n_types, concentration), size=n_types)
    blocks = entity_blocks(n_types, n_entities)
    attr_of = rng.integers(n_attributes, size=n_entities) if n_attributes else None
    type_names = _names("T", n_types)
    entity_names = _names("E", n_entities)
    attr_names = _names("A", n_attributes)
    id_width = len(str(n_dialogs - 1))

    lines: list[str] = []
    designated: list[int] = []
    for d in range(n_dialogs):
        length = int(rng.integers(len_min, len_max + 1))
        final_type = int(rng.integers(n_types))
        bound = [blocks[k][int(rng.integers(len(blocks[k])))] for k in range(n_types)]
        types = [int(rng.integers(n_types))]
        for _ in range(length - 1):
            if rng.random() < drift:
                types.append(final_type)
            else:
                types.append(int(rng.choice(n_types, p=transition[types[-1]])))
        if close_on_final:
            types[-1] = final_type
        entities = [bound[t] for t in types]
        obj = {
            "dialog_id": f"syn-{d:0{id_width}d}",
            "goal_types": [type_names[t] for t in types],
            "goal_entities": [entity_names[e] for e in entities],
        }
        if attr_of is not None:
            obj["goal_attributes"] = [attr_names[attr_of[e]] for e in entities]
        obj["final_goal_type"] = obj["goal_types"][-1]
        obj["final_goal_entity"] = obj["goal_entities"][-1]
        if attr_of is not None:
            obj["final_goal_attribute"] = obj["goal_attributes"][-1]
        lines.append(json.dumps(obj, ensure_ascii=False) + "\n")
        designated.append(final_type)
    return lines, designated


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="\n")
