import pytest

from flextender.consensus import (ExclusionKind, Node, Precommit, Prevote, Propose, Step, TimerConfig,
                                  TimerKind)
from flextender.core_types import ClusterConfig, ConfigError
from flextender.policy import EndorsementView, Leaf, PolicyBinding, Trigger, parse_trigger

from helpers import CL4, TX1, TX2, TX3, node, notes, proto, sends, timers, tx, value
from oracles import brute_extract

E, OPP = EndorsementView.ENDORSE, EndorsementView.OPPOSE_RESULT
IF_FIRST, ALWAYS = ExclusionKind.REMOVE_IF_FIRST, ExclusionKind.REMOVE_ALWAYS
V = value([TX1, TX2, TX3])
D = V.digest


def views(v=V, **over):
    return tuple((t, over.get(t, E)) for t in v.txids)


def prop(v=V, r=0, vr=-1, rr=-1, h=0):
    return Propose(h, r, CL4.proposer(h, r), v.digest, vr, rr, v)


def pv(sender, d=D, r=0, end=None, con=True):
    return Prevote(0, r, sender, d, end, con)


def pc(sender, d=D, r=0, excl=()):
    return Precommit(0, r, sender, d, tuple(excl))


def votes(out):
    """Prevotes that count toward consensus (endorse-only ones excluded)."""
    return [m for m in sends(out, Prevote) if m.con]


class Rig:
    """Drives one node by hand."""

    def __init__(self, me="n3", cfg=None, **kw):
        self.n = node(me, cfg, **kw)
        self.start = self.n.start()

    def put(self, *msgs):
        out = []
        for m in msgs:
            out += self.n.deliver(m)
        return out

    def fire(self, kind, r, h=0):
        return self.n.on_timer(kind, h, r)

    @property
    def s(self):
        return self.n.s


# -- startRound --------------------------------------------------------------

def test_genesis_proposer_sends_fresh_value():
    out = node("n0", mempool=[TX1, TX2, TX3]).start()
    (p,) = sends(out, Propose)
    assert (p.vr, p.rr, p.value) == (-1, -1, V)
    ev = [n.data["event"] for n in notes(out, "PHASE")]
    assert ev[:2] == ["round", "propose"]


def test_non_proposer_arms_propose_timer():
    rig = Rig("n3")
    (t,) = timers(rig.start)
    assert (t.kind, t.round, t.duration) == (TimerKind.PROPOSE, 0, 200)
    assert not sends(rig.start)


def _examined_round0(rig, excl_by=("n0", "n1"), excl=(("tx1", IF_FIRST),)):
    rig.put(prop())
    return rig.put(*[pc(s, excl=excl if s in excl_by else ()) for s in ("n0", "n1", "n2")])


def test_reproposal_drops_backed_tx():
    rig = Rig("n1")
    out = _examined_round0(rig)
    (p,) = [m for m in sends(out, Propose) if m.round == 1]
    assert p.hash_only and p.removed == ("tx1",) and p.rr == 0 and p.ref_digest == D
    assert p.digest == value([TX2, TX3]).digest
    (rm,) = notes(out, "REMOVE")
    assert rm.data["txid"] == "tx1"


def test_full_payload_reproposal_when_hash_only_off():
    rig = Rig("n1", proto(hash_only_reproposal=False))
    (p,) = [m for m in sends(_examined_round0(rig), Propose) if m.round == 1]
    assert p.value == value([TX2, TX3]) and p.rr == 0


def test_valid_value_reproposed_unchanged():
    rig = Rig("n1")
    rig.put(prop(), pv("n0", end=views()), pv("n2", end=views()))
    assert rig.s.valid_value == V and rig.s.valid_round == 0
    rig.put(pc("n0", None), pc("n2", None))
    out = rig.fire(TimerKind.PRECOMMIT, 0)
    (p,) = sends(out, Propose)
    assert (p.round, p.vr, p.rr, p.value) == (1, 0, 0, V)


# -- on_propose_new -------------------------------------------------------------

def test_genesis_prevote_carries_views():
    out = Rig("n3").put(prop())
    (m,) = sends(out, Prevote)
    assert m.digest == D and m.con and m.endorsements == views()


def test_opinion_and_insufficient_views():
    poor = tx("tx9", "zz", "a", 10)  # zz has no balance
    v = value([TX1, poor])
    out = Rig("n3", opinions={"tx1": OPP}, oppose_insufficient=True).put(prop(v))
    (m,) = sends(out, Prevote)
    assert dict(m.endorsements) == {"tx1": OPP, "tx9": OPP}


def test_reference_accepted_when_removal_backed():
    rig = Rig("n3")
    _examined_round0(rig)
    assert (rig.s.round, rig.s.ref_round, rig.s.ref_value) == (1, 0, V)
    v2 = value([TX2, TX3])
    out = rig.put(Propose(0, 1, "n1", v2.digest, -1, 0, None, D, ("tx1",)))
    (m,) = sends(out, Prevote)
    assert m.digest == v2.digest and m.round == 1


def test_reference_without_backing_is_nil():
    rig = Rig("n3")
    _examined_round0(rig, excl_by=("n0",))
    v2 = value([TX1, TX3])
    out = rig.put(Propose(0, 1, "n1", v2.digest, -1, 0, None, D, ("tx2",)))
    assert not votes(out)
    (m,) = votes(rig.fire(TimerKind.PROPOSE, 1))
    assert m.digest is None


def test_reference_must_remove_first_removable():
    rig = Rig("n3")
    _examined_round0(rig, excl=(("tx1", IF_FIRST), ("tx2", IF_FIRST)))
    v2 = value([TX1, TX3])
    out = rig.put(Propose(0, 1, "n1", v2.digest, -1, 0, None, D, ("tx2",)))
    assert not votes(out)
    (m,) = votes(rig.fire(TimerKind.PROPOSE, 1))
    assert m.digest is None


def test_fresh_proposal_after_examined_is_nil():
    rig = Rig("n3")
    _examined_round0(rig)
    v2 = value([TX3])
    (m,) = votes(rig.put(Propose(0, 1, "n1", v2.digest, -1, -1, v2)))
    assert m.digest is None


def test_tampered_results_prevote_nil():
    bad = V.__class__(V.txs, (V.exec_results[1], V.exec_results[0], V.exec_results[2]))
    out = Rig("n3").put(Propose(0, 0, "n0", bad.digest, value=bad))
    assert sends(out, Prevote)[0].digest is None


def test_wrong_proposer_ignored():
    assert Rig("n3").put(Propose(0, 0, "n2", D, value=V)) == []


# -- on_propose_requeued ------------------------------------------------------

def _round0_qc_then_round1(rig, prevoters=("n0", "n1", "n2"), end=True):
    rig.put(prop(), *[pv(s, end=views() if end else None) for s in prevoters])
    rig.put(pc("n0", None), pc("n1", None), pc("n2", None))
    return rig.fire(TimerKind.PRECOMMIT, 0)


def test_requeued_endorsed_value_gets_prevote():
    rig = Rig("n3")
    _round0_qc_then_round1(rig)
    out = rig.put(prop(r=1, vr=0, rr=0))
    (m,) = sends(out, Prevote)
    assert m.digest == D and m.endorsements is None


def test_requeued_without_endorsements_is_nil():
    rig = Rig("n3", cfg=proto(bindings=[PolicyBinding("*", Leaf("n2"))]))
    _round0_qc_then_round1(rig, prevoters=("n0", "n1"), end=False)
    assert not sends(rig.put(prop(r=1, vr=0, rr=0)), Prevote)
    (m,) = sends(rig.fire(TimerKind.PROPOSE, 1), Prevote)
    assert m.digest is None


def test_requeued_conflicting_lock_is_nil():
    rig = Rig("n3")
    rig.put(prop(), pv("n0", None), pv("n1", None), pv("n2", None))
    rig.put(pc("n0", None), pc("n1", None), pc("n2", None))
    rig.fire(TimerKind.PRECOMMIT, 0)
    other = value([TX3])
    rig.put(prop(other, r=1), *[pv(s, other.digest, 1, views(other)) for s in ("n0", "n1")])
    assert rig.s.locked_round == 1 and rig.s.locked_value == other
    rig.put(pc("n0", None, 1), pc("n1", None, 1), pc("n2", None, 1))
    rig.fire(TimerKind.PRECOMMIT, 1)
    # round-0 endorsing prevotes for V show up late
    rig.put(pv("n0", end=views()), pv("n2", end=views()), pv("n1", end=views()))
    (m,) = sends(rig.put(prop(r=2, vr=0, rr=0)), Prevote)
    assert m.digest is None


# -- prevote timer ----------------------------------------------------------------

def test_prevote_timer_on_mixed_quorum_once():
    rig = Rig("n3")
    rig.put(prop())
    out = rig.put(pv("n0", None), pv("n1", None))
    assert [t.kind for t in timers(out)] == [TimerKind.PREVOTE]
    assert not timers(rig.put(pv("n2", None)))


def test_con_false_not_counted():
    rig = Rig("n3")
    rig.put(prop())
    out = rig.put(pv("n0", None), pv("n1", end=views(), con=False))
    assert not timers(out)


# -- lock, timeout, rapid removal -------------------------------------------------

def test_lock_on_full_endorsement():
    rig = Rig("n3")
    rig.put(prop())
    out = rig.put(pv("n0", end=views()), pv("n1", end=views()))
    (c,) = sends(out, Precommit)
    assert c.digest == D and c.exclusions == ()
    assert rig.s.locked_value == V and rig.s.locked_round == 0


def test_split_endorsements_aggregate_to_lock():
    rig = Rig("n3")
    rig.put(prop(), pv("n0", end=views()))
    out = rig.put(pv("n1", end=views(tx2=OPP)), pv("n1", end=views(tx1=OPP)))
    (c,) = sends(out, Precommit)
    assert c.digest == D and not c.exclusions


def test_lock_via_reference_round_endorsements():
    rig = Rig("n3")
    _round0_qc_then_round1(rig)
    rig.put(prop(r=1, vr=0, rr=0))
    out = rig.put(pv("n0", r=1), pv("n2", r=1))
    (c,) = sends(out, Precommit)
    assert c.digest == D and c.round == 1 and rig.s.locked_round == 1


def _silent_endorser_cfg(trigger=None):
    b = PolicyBinding("c", Leaf("n2"), trigger or Trigger())
    return proto(bindings=[b])


@pytest.mark.parametrize("trigger,kind", [(parse_trigger({"custom": "ok"}), IF_FIRST), (None, ALWAYS)])
def test_timeout_suggests_removal(trigger, kind):
    rig = Rig("n3", _silent_endorser_cfg(trigger))
    rig.put(prop(), pv("n0", end=views(tx2=E)), pv("n1", end=views()), pv("n2"))
    (c,) = sends(rig.fire(TimerKind.PREVOTE, 0), Precommit)
    assert c.digest == D and c.exclusions == (("tx2", kind),)


def test_nil_timeout():
    rig = Rig("n3")
    rig.put(prop(), pv("n0", None))
    rig.put(pv("n1", value([TX1]).digest))
    (c,) = sends(rig.fire(TimerKind.PREVOTE, 0), Precommit)
    assert c.digest is None


def test_rapid_removal_on_veto():
    cfg = proto(bindings=[PolicyBinding("a", Leaf("n2"))])
    rig = Rig("n3", cfg)
    rig.put(prop(), pv("n0", end=views()), pv("n1", end=views()))
    out = rig.put(pv("n2", end=views(tx1=OPP)))
    (c,) = sends(out, Precommit)
    assert c.exclusions == (("tx1", IF_FIRST),)
    assert any(n.data.get("event") == "rapid" for n in notes(out, "PHASE"))


def test_rapid_removal_waits_for_pending():
    cfg = proto(bindings=[PolicyBinding("a", Leaf("n2")), PolicyBinding("c", Leaf("n1"))])
    rig = Rig("n3", cfg)
    rig.put(prop(), pv("n0", end=views()), pv("n1", end=((("tx1", E), ("tx3", E)))))
    out = rig.put(pv("n2", end=views(tx1=OPP)))
    assert not sends(out, Precommit)


# -- precommit clauses --------------------------------------------------------------

def test_commit_on_clean_quorum():
    rig = Rig("n3")
    rig.put(prop())
    out = rig.put(pc("n0"), pc("n1"), pc("n2"))
    (d,) = notes(out, "DECIDE")
    assert d.data["txs"] == ["tx1", "tx2", "tx3"] and rig.s.h == 1
    assert rig.s.decision[0] == V and rig.s.locked_round == -1


def test_examined_sets_ref_and_advances():
    rig = Rig("n3")
    out = _examined_round0(rig)
    assert not notes(out, "DECIDE")
    assert (rig.s.ref_round, rig.s.ref_value, rig.s.round) == (0, V, 1)


def test_longer_examined_value_does_not_replace_ref():
    rig = Rig("n3")
    _examined_round0(rig)
    bigger = value([TX1, TX2, TX3, tx("tx4", "g", "h")])
    rig.put(prop(bigger, r=1), *[pc(s, bigger.digest, 1, (("tx4", IF_FIRST),)) for s in ("n0", "n1", "n2")])
    assert rig.s.ref_round == 0 and rig.s.ref_value == V


def test_shorter_examined_value_replaces_ref():
    rig = Rig("n3")
    _examined_round0(rig)
    smaller = value([TX3])
    rig.put(prop(smaller, r=1), *[pc(s, smaller.digest, 1, (("tx3", IF_FIRST),)) for s in ("n0", "n1", "n2")])
    assert rig.s.ref_round == 1 and rig.s.ref_value == smaller


# -- timeouts ---------------------------------------------------------------------

def test_crashed_proposer_nil_prevote():
    rig = Rig("n3")
    (m,) = sends(rig.fire(TimerKind.PROPOSE, 0), Prevote)
    assert m.digest is None


def test_stale_propose_timer_ignored():
    rig = Rig("n3")
    rig.put(prop())
    assert rig.fire(TimerKind.PROPOSE, 0) == []


def test_precommit_timeout_rotates():
    rig = Rig("n0", mempool=[TX1])
    out = rig.fire(TimerKind.PRECOMMIT, 0)
    assert rig.s.round == 1 and not sends(out, Propose)
    rig2 = Rig("n3")
    rig2.put(pc("n0", None), pc("n1", None), pc("n2", None))
    rig2.fire(TimerKind.PRECOMMIT, 0)
    assert rig2.s.round == 1
    assert CL4.proposer(0, 1) == "n1"


def test_timer_after_commit_ignored():
    rig = Rig("n3")
    rig.put(prop(), pc("n0"), pc("n1"), pc("n2"))
    assert rig.fire(TimerKind.PREVOTE, 0) == []


def test_round_skip_on_f_plus_1_senders():
    rig = Rig("n3")
    rig.put(pv("n0", None, r=4), pv("n1", None, r=4))
    assert rig.s.round == 4


# -- endorse-only and conflicts -------------------------------------------------------

def test_late_endorser_sends_con_false():
    rig = Rig("n3")
    rig.fire(TimerKind.PROPOSE, 0)
    out = rig.put(prop())
    (m,) = sends(out, Prevote)
    assert not m.con and m.endorsements == views()


def test_late_non_endorser_silent():
    rig = Rig("n3", proto(bindings=[PolicyBinding("*", Leaf("n0"))]))
    rig.fire(TimerKind.PROPOSE, 0)
    assert not sends(rig.put(prop()), Prevote)


def test_no_duplicate_endorsement_for_second_proposal():
    rig = Rig("n3")
    rig.fire(TimerKind.PROPOSE, 0)
    rig.put(prop())
    other = value([TX1])
    out = rig.put(Propose(0, 0, "n0", other.digest, value=other))
    assert not sends(out, Prevote)


def test_equivocation_nil_precommit():
    rig = Rig("n3")
    rig.put(prop())
    other = value([TX1])
    out = rig.put(Propose(0, 0, "n0", other.digest, value=other))
    (c,) = sends(out, Precommit)
    assert c.digest is None


def test_conflict_after_precommit_ignored():
    rig = Rig("n3")
    rig.put(prop(), pv("n0", end=views()), pv("n1", end=views()))
    assert rig.s.step is Step.PRECOMMIT
    other = value([TX1])
    assert not sends(rig.put(Propose(0, 0, "n0", other.digest, value=other)), Precommit)


def test_duplicate_proposal_no_action():
    rig = Rig("n3")
    rig.put(prop())
    assert rig.put(prop()) == []


# -- Extract -------------------------------------------------------------------------

@pytest.mark.parametrize("excl,expected", [
    ({"tx1": IF_FIRST}, ("tx2", "tx3")),
    ({"tx1": IF_FIRST, "tx2": IF_FIRST}, ("tx2", "tx3")),
    ({"tx3": ALWAYS, "tx1": IF_FIRST}, ("tx2",)),
    ({"tx2": IF_FIRST, "tx3": ALWAYS}, ("tx1",)),
    ({}, ("tx1", "tx2", "tx3")),
])
def test_extract(excl, expected):
    rig = Rig("n3")
    ex = tuple(excl.items())
    _examined_round0(rig, excl_by=("n0", "n1"), excl=ex)
    got = rig.n.extract(0, V)
    assert got.txids == expected
    backed, always = rig.n.removable(0, V)
    dropped = brute_extract(V.txids, set(backed), always)
    assert tuple(t for t in V.txids if t not in dropped) == expected


def test_extract_below_threshold_keeps_all():
    rig = Rig("n3")
    _examined_round0(rig, excl_by=("n0",))
    assert rig.n.extract(0, V).txids == V.txids


# -- config and messages ------------------------------------------------------------

def test_timer_config():
    t = TimerConfig.for_delta(100)
    assert [t.timeout(TimerKind.PREVOTE, r) for r in range(3)] == [200, 300, 400]
    with pytest.raises(ConfigError):
        TimerConfig(200, 100, 150, 100, 200, 100, 100)
    with pytest.raises(ConfigError):
        TimerConfig(200, -1, 200, 100, 200, 100, 100)


def test_message_shape():
    with pytest.raises(ValueError):
        Prevote(0, 0, "n0", None, (("tx1", E),))
    with pytest.raises(ValueError):
        Precommit(0, 0, "n0", None, (("tx1", IF_FIRST),))
    a = Prevote(0, 0, "n0", D, (("tx2", E), ("tx1", E)))
    b = Prevote(0, 0, "n0", D, (("tx1", E), ("tx2", E)))
    assert a == b and hash(a) == hash(b)
    assert pv("n0", con=False) != pv("n0")


def test_unknown_node_rejected():
    with pytest.raises(ConfigError):
        Node("zz", proto())


def test_replay_is_pure():
    script = [prop(), pv("n0", end=views()), pv("n1", end=views(tx2=OPP)), pc("n0", excl=(("tx2", IF_FIRST),)),
              pc("n1"), pc("n2", None)]

    def run():
        rig = Rig("n3")
        outs = [rig.start] + [rig.n.deliver(m) for m in script] + [rig.fire(TimerKind.PRECOMMIT, 0)]
        return outs, rig.s.fingerprint()
    assert run() == run()
