import warnings

import pytest
from hypothesis import given, settings, strategies as st

from dfst.errors import InfeasibleError, IntegrityError, ParseError, PreconditionError, RunawayExpertError
from dfst.fst_core import ExpertTask, expert_spec, input_world
from dfst.grid_env import MOTION_DELTAS, read_answer
from dfst.pto_data import (
    Pto,
    count_up_to,
    ds_sample,
    dumps_dataset,
    load_dataset,
    loads_dataset,
    record_pto,
    save_dataset,
    select_pairs,
    stratum_sizes,
)


def replay_world(pto: Pto):
    w = input_world(pto.task.alphabet, pto.a, pto.b)
    col = row = 0
    for s, m in zip(pto.s, pto.m):
        w.write((col, row), s)
        dc, dr = MOTION_DELTAS[m]
        col, row = col + dc, row + dr
    return w


def test_record_pto_add2_one_plus_one():
    pto = record_pto(expert_spec("add2"), "add2", "1", "1")
    pto.validate()
    assert pto.replay_consistent()
    assert read_answer(replay_world(pto)) == "10"


def test_record_pto_rejects_bad_operand():
    with pytest.raises(PreconditionError):
        record_pto(expert_spec("add2"), "add2", "12", "1")
    with pytest.raises(PreconditionError):
        record_pto(expert_spec("add2"), "add2", "", "1")


def test_record_pto_runaway():
    with pytest.raises(RunawayExpertError):
        record_pto(expert_spec("mult2"), "mult2", "111", "111", max_steps=10)


def test_add2_traces_within_reference_bound_up_to_two_digits():
    # our add2 expert stays under 70 steps through two-digit operands
    strs = ["0", "1", "00", "01", "10", "11"]
    for a in strs:
        for b in strs:
            assert len(record_pto(expert_spec("add2"), "add2", a, b)) <= 70


@pytest.mark.parametrize(
    "radix, p, n, sizes",
    [(2, 1, 20, (4, 4, 12)), (10, 1, 225, (100, 100, 25)), (2, 1, 750, (4, 4, 742)), (10, 1, 10000, (100, 100, 9800))],
)
def test_stratum_sizes(radix, p, n, sizes):
    assert stratum_sizes(radix, p, n) == sizes


@given(st.sampled_from([2, 3, 10]), st.integers(1, 4))
def test_stratum1_closed_form(radix, p):
    closed = radix**2 * (radix**p - 1) ** 2 // (radix - 1) ** 2
    assert count_up_to(radix, p) ** 2 == closed


def test_ds_sample_add2():
    ds = ds_sample(2, "add2", 1, 3, 20, seed=0)
    ds.check()
    assert len(ds.records) == 20
    assert ds.manifest == {"exhaustive": 4, "same_digit": 4, "random": 12}
    assert all(r.replay_consistent() for r in ds.records)
    pairs = [(r.a, r.b) for r in ds.records]
    assert pairs[:4] == [("0", "0"), ("0", "1"), ("1", "0"), ("1", "1")]
    assert pairs[4:8] == [("000", "000"), ("000", "111"), ("111", "000"), ("111", "111")]


def test_ds_sample_add10_counts():
    ds = ds_sample(10, "add10", 1, 3, 225, seed=3)
    assert ds.manifest == {"exhaustive": 100, "same_digit": 100, "random": 25}
    assert len({(r.a, r.b) for r in ds.records}) == 225


def test_same_digit_overlap_when_q_equals_p():
    pairs, manifest = select_pairs(2, 1, 1, 4, seed=0)
    assert manifest == {"exhaustive": 4, "same_digit": 0, "random": 0}
    assert len(pairs) == 4


def test_infeasible_and_precondition():
    with pytest.raises(InfeasibleError):
        select_pairs(2, 1, 1, 5, seed=0)
    with pytest.raises(PreconditionError):
        select_pairs(2, 1, 3, 5, seed=0)
    with pytest.raises(PreconditionError):
        select_pairs(2, 2, 1, 50, seed=0)


def test_ds_sample_deterministic():
    a = dumps_dataset(ds_sample(2, "mult2", 1, 3, 40, seed=9))
    b = dumps_dataset(ds_sample(2, "mult2", 1, 3, 40, seed=9))
    c = dumps_dataset(ds_sample(2, "mult2", 1, 3, 40, seed=10))
    assert a == b and a != c


def test_ds_sample_radix_mismatch():
    with pytest.raises(PreconditionError):
        ds_sample(10, "add2", 1, 3, 20)


def test_save_load_roundtrip(tmp_path):
    ds = ds_sample(2, "add2", 1, 3, 20, seed=1)
    path = tmp_path / "d.pto"
    save_dataset(ds, path)
    again = load_dataset(path)
    assert again == ds


def test_truncated_file():
    text = dumps_dataset(ds_sample(2, "add2", 1, 3, 20, seed=1))
    with pytest.raises(ParseError):
        loads_dataset(text[: len(text) // 2])
    with pytest.raises(ParseError):
        loads_dataset("")


def test_wrong_radix_digit():
    text = dumps_dataset(ds_sample(2, "add2", 1, 3, 20, seed=1))
    lines = text.split("\n")
    a, rest = lines[3].split("\t", 1)
    lines[3] = "2" + a[1:] + "\t" + rest
    with pytest.raises(IntegrityError):
        loads_dataset("\n".join(lines))


def test_bad_token():
    text = dumps_dataset(ds_sample(2, "add2", 1, 3, 20, seed=1))
    lines = text.split("\n")
    fields = lines[2].split("\t")
    fields[3] = "9" + fields[3][1:]
    lines[2] = "\t".join(fields)
    with pytest.raises(IntegrityError):
        loads_dataset("\n".join(lines))


def test_missing_record_breaks_manifest():
    text = dumps_dataset(ds_sample(2, "add2", 1, 3, 20, seed=1))
    lines = text.split("\n")
    del lines[5]
    with pytest.raises(IntegrityError):
        loads_dataset("\n".join(lines))


def test_long_traces_warn():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds_sample(2, "add2", 1, 3, 20, seed=0)
    # the longest add2 trace on three-digit operands is 80 steps, ten above the reference bound
    msgs = [str(w.message) for w in caught]
    assert len(msgs) == 1 and "80 steps" in msgs[0]


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(list(ExpertTask)), st.text("0123456789", min_size=1, max_size=6),
       st.text("0123456789", min_size=1, max_size=6))
def test_replay_consistency_property(task, a, b):
    digits = "0123456789"[: task.radix]
    a = "".join(digits[int(c) % task.radix] for c in a)
    b = "".join(digits[int(c) % task.radix] for c in b)[:3]
    pto = record_pto(expert_spec(task), task, a, b)
    pto.validate()
    assert pto.replay_consistent()
