import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhl.data import (
    DialogRecord,
    GoalHierarchyDataset,
    build_adjacency,
    dumps_dialogs,
    entity_blocks,
    expand_instances,
    generate_synthetic,
    load_dialogs_jsonl,
    parse_dialogs,
    split_dataset,
    _generate,
)
from dhl.errors import (
    DataError,
    FractionSumError,
    LengthMismatchError,
    ParseError,
    SequenceTooShortError,
    VocabularyError,
)


def line(types, entities, **extra):
    obj = {"dialog_id": extra.pop("dialog_id", "d"), "goal_types": types,
           "goal_entities": entities, **extra}
    return json.dumps(obj)


def test_shared_entity_gets_one_id():
    vocabs, recs = parse_dialogs([
        line(["QA", "Music Rec"], ["Jay Chou", "Rice Field"], dialog_id="a"),
        line(["Chit-chat", "Music Rec"], ["Jay Chou", "Nunchucks"], dialog_id="b"),
    ])
    jay = vocabs["entity"].id_of("Jay Chou")
    assert recs[0].entity_seq[0] == recs[1].entity_seq[0] == jay
    assert len(vocabs["type"]) == 3
    assert vocabs["type"].names == ("QA", "Music Rec", "Chit-chat")


def test_length_mismatch_names_dialog():
    with pytest.raises(LengthMismatchError, match="bad"):
        parse_dialogs([line(["a", "b", "c"], ["x", "y", "z", "w"], dialog_id="bad")])


def test_too_short_rejected():
    with pytest.raises(SequenceTooShortError):
        parse_dialogs([line(["a"], ["x"])])


def test_parse_error_carries_line_number():
    with pytest.raises(ParseError, match="2"):
        parse_dialogs([line(["a", "b"], ["x", "y"]), "{not json"])


def test_final_goal_defaults_to_last_and_explicit_is_kept():
    _, recs = parse_dialogs([line(["a", "b"], ["x", "y"]),
                             line(["a", "b"], ["x", "y"], final_goal_entity="z")])
    assert recs[0].final_entity == recs[0].entity_seq[-1]
    assert recs[1].final_entity == 2


def test_closed_vocabulary_rejects_unknown_names():
    vocabs, _ = parse_dialogs([line(["a", "b"], ["x", "y"])])
    with pytest.raises(VocabularyError, match="q"):
        parse_dialogs([line(["a", "b"], ["x", "q"])], vocabs, extend=False)


def test_adjacency_worked_example():
    # four entities, the dialog uses ids 2 and 3
    vocabs2, _ = parse_dialogs([line(["t0", "t1"], ["e0", "e1"]),
                                line(["t0", "t0"], ["e2", "e3"])])
    eps = 1e-3
    _, recs3 = parse_dialogs([line(["t0", "t1"], ["e2", "e3"])], vocabs2)
    assert recs3[0].type_seq == (0, 1) and recs3[0].entity_seq == (2, 3)
    adj = build_adjacency(recs3, vocabs2["type"], vocabs2["entity"], eps)
    assert adj.values[0, 2] == adj.values[1, 3] == 1.0
    assert adj.values[0, 3] == adj.values[1, 2] == eps
    # oracle: enumerate positions directly
    expected = np.full((2, 4), eps)
    for r in recs3:
        for t, e in zip(r.type_seq, r.entity_seq):
            expected[t, e] = 1.0
    assert np.array_equal(adj.values, expected)


def test_adjacency_empty_and_repeated():
    vocabs, recs = parse_dialogs([line(["a", "b"], ["x", "y"])] * 5)
    assert np.all(build_adjacency([], vocabs["type"], vocabs["entity"]).values == 1e-3)
    adj = build_adjacency(recs, vocabs["type"], vocabs["entity"])
    assert set(np.unique(adj.values)) == {1e-3, 1.0}
    assert adj.values[0, 0] == 1.0


def test_adjacency_epsilon_range():
    vocabs, recs = parse_dialogs([line(["a", "b"], ["x", "y"])])
    with pytest.raises(ValueError):
        build_adjacency(recs, vocabs["type"], vocabs["entity"], epsilon=0.1)


def test_expand_instances_counts_and_order():
    rec2 = DialogRecord("a", (0, 1), (0, 1))
    rec6 = DialogRecord("b", tuple(range(6)), tuple(range(6)))
    assert len(expand_instances([rec2])) == 1
    inst = expand_instances([rec6])
    assert [i.prefix_len for i in inst] == [1, 2, 3, 4, 5]
    assert all(i.targets["entity"] == rec6.entity_seq[i.prefix_len] for i in inst)
    assert len(expand_instances([rec6] * 10)) == 50


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(2, 12), min_size=1, max_size=20))
def test_expand_count_is_sum_of_lengths_minus_one(lengths):
    recs = [DialogRecord(str(k), (0,) * n, (0,) * n) for k, n in enumerate(lengths)]
    assert len(expand_instances(recs)) == sum(n - 1 for n in lengths)


def test_split_sizes_and_determinism():
    recs = [DialogRecord(str(k), (0, 1), (0, 1)) for k in range(100)]
    train, dev, test = split_dataset(recs, (0.65, 0.10, 0.25), seed=3)
    assert (len(train), len(dev), len(test)) == (65, 10, 25)
    again = split_dataset(recs, (0.65, 0.10, 0.25), seed=3)
    assert [r.dialog_id for r in again[0]] == [r.dialog_id for r in train]
    everything = split_dataset(recs, (1, 0, 0))
    assert len(everything[0]) == 100 and not everything[1] and not everything[2]
    with pytest.raises(FractionSumError):
        split_dataset(recs, (0.5, 0.2, 0.2))


def test_generator_drift_one_ends_on_designated_final():
    lines, designated = _generate(5, 20, 0, 50, (4, 8), 1.0, 9)
    for text, final in zip(lines, designated):
        assert json.loads(text)["goal_types"][-1] == f"T{final}"


def test_generator_close_on_final_only_rewrites_the_last_step():
    open_lines, designated = _generate(5, 20, 2, 60, (3, 9), 0.3, 4)
    closed_lines, same = _generate(5, 20, 2, 60, (3, 9), 0.3, 4, close_on_final=True)
    assert same == designated
    ended_elsewhere = 0
    for a, b, final in zip(open_lines, closed_lines, designated):
        a, b = json.loads(a), json.loads(b)
        assert b["goal_types"][-1] == b["final_goal_type"] == f"T{final}"
        assert a["goal_types"][:-1] == b["goal_types"][:-1]
        assert a["goal_entities"][:-1] == b["goal_entities"][:-1]
        ended_elsewhere += a["goal_types"][-1] != f"T{final}"
    # without closing, drift 0.3 leaves many dialogs ending away from their final type
    assert ended_elsewhere > 10


def test_generator_is_deterministic_and_seed_sensitive():
    a = generate_synthetic(5, 20, 3, 40, (3, 6), 0.3, seed=42)
    assert a == generate_synthetic(5, 20, 3, 40, (3, 6), 0.3, seed=42)
    assert a != generate_synthetic(5, 20, 3, 40, (3, 6), 0.3, seed=43)


def test_entity_blocks_partition():
    blocks = entity_blocks(5, 20)
    assert [len(b) for b in blocks] == [4] * 5
    assert sorted(e for b in blocks for e in b) == list(range(20))


def test_generator_entities_stay_in_their_type_block(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(generate_synthetic(5, 20, 0, 200, (4, 8), 0.3, seed=1))
    vocabs, recs = load_dialogs_jsonl(path)
    for r in recs:
        for t, e in zip(r.type_seq, r.entity_seq):
            tname = vocabs["type"].names[t]
            ename = vocabs["entity"].names[e]
            assert int(ename[1:]) // 4 == int(tname[1:])


def test_generator_rejects_bad_parameters():
    for args in [(5, 3, 0, 10), (0, 5, 0, 10), (5, 20, 0, 0), (5, 20, -1, 10)]:
        with pytest.raises(DataError):
            generate_synthetic(*args)
    with pytest.raises(DataError):
        generate_synthetic(5, 20, 0, 10, (5, 4))
    with pytest.raises(DataError):
        generate_synthetic(5, 20, 0, 10, drift=1.5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4))
def test_generate_load_dump_round_trip(seed, n_attrs):
    text = generate_synthetic(4, 9, n_attrs, 15, (2, 6), 0.4, seed=seed)
    vocabs, recs = parse_dialogs(text.splitlines())
    assert dumps_dialogs(recs, vocabs) == text


def test_adjacency_has_one_entry_per_entity_with_disjoint_blocks():
    text = generate_synthetic(5, 20, 0, 400, (8, 16), 0.3, seed=0)
    vocabs, recs = parse_dialogs(text.splitlines())
    assert len(vocabs["entity"]) == 20
    adj = build_adjacency(recs, vocabs["type"], vocabs["entity"])
    assert int((adj.values == 1.0).sum()) == 20


def test_dataset_builds_adjacency_from_given_source():
    text = generate_synthetic(3, 6, 2, 30, (3, 5), 0.3, seed=2)
    vocabs, recs = parse_dialogs(text.splitlines())
    ds = GoalHierarchyDataset.build(vocabs, recs[20:], adjacency_from=recs[:20])
    expected = build_adjacency(recs[:20], vocabs["type"], vocabs["entity"])
    assert np.array_equal(ds.adjacency["entity"].values, expected.values)
    assert ds.levels == ("type", "entity", "attribute")
    assert len(ds.instances) == sum(len(r) - 1 for r in recs[20:])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.text(max_size=40), min_size=1, max_size=4))
def test_malformed_lines_raise_data_errors_or_stay_in_bounds(lines):
    try:
        vocabs, recs = parse_dialogs(lines)
    except DataError:
        return
    for r in recs:
        for lv in r.levels:
            assert all(0 <= i < len(vocabs[lv]) for i in r.seq(lv))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.fixed_dictionaries({}, optional={
    "goal_types": st.lists(st.sampled_from(["a", "b", 1]), max_size=4),
    "goal_entities": st.lists(st.sampled_from(["x", "y"]), max_size=4),
    "goal_attributes": st.lists(st.sampled_from(["p", "q"]), max_size=4),
    "final_goal_entity": st.sampled_from(["x", "z", 3]),
    "dialog_id": st.sampled_from(["d", 7]),
}), min_size=1, max_size=4))
def test_structured_fuzz_never_yields_out_of_bounds_ids(objs):
    try:
        vocabs, recs = parse_dialogs(json.dumps(o) for o in objs)
    except DataError:
        return
    for r in recs:
        for lv in r.levels:
            assert all(0 <= i < len(vocabs[lv]) for i in r.seq(lv))
            assert 0 <= r.final(lv) < len(vocabs[lv])
