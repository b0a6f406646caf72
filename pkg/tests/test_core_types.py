import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from flextender.core_types import (ClusterConfig, ConfigError, ExecResult, ExecStatus, Transaction, Value,
                                   quorum_size, removal_threshold, value_digest)

# sha256 over the canonical encoding of a Value with no txs and no results
EMPTY_DIGEST = "ec68ab42e7c25a3033bd73613e8a21084d1713496bde5e05e5928498a5585c57"


@pytest.mark.parametrize("n,f,q", [(4, 1, 3), (7, 2, 5), (10, 3, 7)])
def test_quorum_size(n, f, q):
    assert quorum_size(ClusterConfig(n, f)) == q


@pytest.mark.parametrize("n,f,t", [(4, 1, 2), (7, 2, 3), (1, 0, 1)])
def test_removal_threshold(n, f, t):
    assert removal_threshold(ClusterConfig(n, f)) == t


@given(st.integers(0, 30), st.integers(0, 10))
def test_quorum_intersection(f, extra):
    cfg = ClusterConfig(3 * f + 1 + extra, f)
    q = quorum_size(cfg)
    assert 2 * q - cfg.n >= f + 1
    if extra == 0:
        assert q + removal_threshold(cfg) > cfg.n


def test_cluster_validation():
    with pytest.raises(ConfigError):
        ClusterConfig(3, 1)
    with pytest.raises(ConfigError):
        ClusterConfig(4, 1, ("a", "b", "c", "c"))
    with pytest.raises(ConfigError):
        ClusterConfig(4, 1, ("a", "b"))
    assert ClusterConfig(4, 1).node_ids == ("n0", "n1", "n2", "n3")


def test_proposer_rotation():
    cl = ClusterConfig(4, 1)
    assert [cl.proposer(0, r) for r in range(5)] == ["n0", "n1", "n2", "n3", "n0"]
    assert cl.proposer(3, 2) == "n1"


def test_empty_value_digest_pinned():
    # canonical empty form: length-prefixed "0" tx count, then "0" result count
    raw = (1).to_bytes(4, "big") + b"0" + (1).to_bytes(4, "big") + b"0"
    assert Value().canonical_bytes() == raw
    assert hashlib.sha256(raw).hexdigest() == EMPTY_DIGEST
    assert Value().digest == EMPTY_DIGEST


def _res(txid, status=ExecStatus.OK, bal=90):
    return ExecResult(txid, frozenset({"a", "b"}), (("a", bal), ("b", 110)), status)


def test_identical_values_same_digest():
    t = Transaction("tx1", "a", "b", 10)
    assert Value((t,), (_res("tx1"),)).digest == Value((t,), (_res("tx1"),)).digest


def test_one_result_differs():
    t = Transaction("tx1", "a", "b", 10)
    assert Value((t,), (_res("tx1"),)).digest != Value((t,), (_res("tx1", bal=91),)).digest
    assert Value((t,), (_res("tx1"),)).digest != Value((t,), (_res("tx1", ExecStatus.INSUFFICIENT),)).digest


def test_origin_height_not_in_digest():
    t = Transaction("tx1", "a", "b", 10)
    assert Value((t,), (_res("tx1"),), 0).digest == Value((t,), (_res("tx1"),), 5).digest


def test_misaligned_results_rejected():
    t = Transaction("tx1", "a", "b", 10)
    with pytest.raises(ValueError):
        Value((t, t), (_res("tx1"),))


def test_negative_amount_rejected():
    with pytest.raises(ValueError):
        Transaction("x", "a", "b", -1)


names = st.text("abcxyz", min_size=1, max_size=3)
txs_st = st.lists(st.builds(Transaction, st.uuids().map(lambda u: u.hex[:6]), names, names,
                            st.integers(0, 1000)), max_size=8)


@settings(max_examples=1000)
@given(txs_st)
def test_digest_is_pure(txs):
    res = tuple(ExecResult(t.txid, frozenset(t.accounts), tuple(sorted((a, 1) for a in t.accounts))) for t in txs)
    v = Value(tuple(txs), res)
    assert value_digest(v) == value_digest(Value(tuple(txs), res))
    assert value_digest(v) == v.digest


def test_subsequence():
    t = [Transaction(f"t{i}", "a", "b", 1) for i in range(3)]
    full = Value(tuple(t))
    assert Value((t[0], t[2])).is_subsequence_of(full)
    assert not Value((t[2], t[0])).is_subsequence_of(full)


def test_transaction_json_roundtrip():
    t = Transaction("tx9", "a", "b", 3, "grp")
    assert Transaction.from_json(t.to_json()) == t
