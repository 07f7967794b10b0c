from pathlib import Path

import pytest

from fdh.model import (
    Fact,
    FreshnessViolation,
    K,
    Out,
    PremiseMissing,
    Rule,
    State,
    check_trace,
    forward_step,
    fresh_rule,
    md_dh_rules,
    run_sequence,
    trace_admissible,
)
from fdh.modelparse import WellformednessError, parse_formula, parse_model
from fdh.parser import parse_term
from fdh.rewrite import normalize
from fdh.sorts import Sort
from fdh.terms import G, Name, Subst, Var, exp

MODELS = Path(__file__).resolve().parent.parent / "models"

T = parse_term


def N(s, **kw):
    return normalize(parse_term(s, **kw))


class TestParseModels:
    def test_elgamal(self):
        p = parse_model((MODELS / "elgamal.fdh").read_text())
        assert p.name == "ElGamal"
        assert [r.name for r in p.rules] == [
            "KeyGen",
            "CompromiseKey",
            "BobEncrypts",
            "AliceReceives",
        ]
        assert len(p.lemmas) == 3
        assert p.lemma("executable").mode == "exists_trace"
        assert p.lemma("secrecy").mode == "all_traces"
        # let-inlining: Bob's output contains pka^y expanded
        bob = p.rules[2]
        out = bob.conclusions[0]
        want = N("<g^(y:FrE), g^(m:FrE) . (g^(ka:E))^(y:FrE)>")
        assert normalize(out.args[0]) == want
        assert not p.warnings

    def test_mqv(self):
        p = parse_model((MODELS / "mqv.fdh").read_text())
        assert len(p.rules) == 6
        assert len(p.restrictions) == 1
        recv = next(r for r in p.rules if r.name == "ReceiverRole")
        kab = next(f for f in recv.actions if f.name == "RunningR").args[2]
        # expanded receiver key has 4 root factors
        from fdh.rewrite import root_terms

        assert len(root_terms(normalize(kab))) == 4

    def test_unbound_conclusion_variable(self):
        bad = """
theory Bad
begin
rule Leak: [] --> [ Out(x) ]
end
"""
        with pytest.raises(WellformednessError):
            parse_model(bad)

    def test_fr_needs_fresh_variable(self):
        bad = """
theory Bad
begin
rule R: [ Fr(x:E) ] --> [ Out(x) ]
end
"""
        with pytest.raises(WellformednessError):
            parse_model(bad)

    def test_c1_lint_warns_on_bare_group_variable(self):
        src = """
theory Warny
begin
rule R: [ In(v:G) ] --> [ Out(v:G) ]
end
"""
        p = parse_model(src)
        assert p.warnings


class TestMdRules:
    def test_send_recv(self):
        rules = {r.name: r for r in md_dh_rules()}
        send = rules["send"]
        assert send.premises[0].name == "K"
        assert send.actions[0].name == "K"
        assert send.conclusions[0].name == "In"
        assert rules["recv"].premises[0].name == "Out"

    def test_constants(self):
        rules = {r.name: r for r in md_dh_rules()}
        assert any(str(f.args[0]) == "1" for f in rules["one"].conclusions)
        assert any(str(f.args[0]) == "0" for f in rules["zero"].conclusions)

    def test_mu_rule(self):
        rules = {r.name: r for r in md_dh_rules()}
        mu = rules["mu"]
        assert mu.premises[0].name == "K"
        assert str(mu.conclusions[0].args[0]).startswith("mu(")

    def test_operator_rules_are_internal(self):
        ops = [r for r in md_dh_rules() if r.name.startswith("op_")]
        assert ops and all(r.internal for r in ops)
        assert all(not r.internal for r in md_dh_rules() if not r.name.startswith("op_"))


class TestForwardEngine:
    def mk_keygen_instance(self):
        p = parse_model((MODELS / "elgamal.fdh").read_text())
        keygen = p.rules[0]
        ska = Name("ska1", Sort.FRE)
        s = Subst.of(
            {
                Var("ska", Sort.FRE): ska,
                Var("A", Sort.PUBLIC): Name("Alice", Sort.PUBLIC),
            }
        )
        return keygen.apply(s), ska

    def test_keygen_produces_conclusions(self):
        inst, ska = self.mk_keygen_instance()
        st = State()
        st = forward_step(st, fresh_rule(ska))
        st = forward_step(st, inst)
        assert any(f.name == "PubKey" for f in st.persistent)
        assert any(f.name == "Out" for f in st.linear)

    def test_linear_fact_consumed_once(self):
        inst, ska = self.mk_keygen_instance()
        st = forward_step(State(), fresh_rule(ska))
        st = forward_step(st, inst)
        with pytest.raises(PremiseMissing):
            forward_step(st, inst)

    def test_freshness_violation(self):
        ska = Name("ska1", Sort.FRE)
        st = forward_step(State(), fresh_rule(ska))
        with pytest.raises(FreshnessViolation):
            forward_step(st, fresh_rule(ska))

    def test_premise_matching_modulo_theory(self):
        # a premise In(g^x . g^y) matches a conclusion In(g^(x+y))
        a = Name("a", Sort.FRE)
        b = Name("b", Sort.FRE)
        t1 = N("g^(~a + ~b)")
        t2 = N("g^(~a) . g^(~b)")
        give = Rule("give", (), (), (Fact("In", (t1,)),))
        take = Rule("take", (Fact("In", (t2,)),), (Fact("Got", (t2,)),), ())
        st = forward_step(State(), give)
        st = forward_step(st, take)
        assert len(st.trace) == 2


class TestCheckTrace:
    def test_exists_witness(self):
        f = parse_formula("Ex msg #i #j. BSent(msg)@i & AReceived(msg)@j")
        m = N("g^(~m)")
        trace = [(Fact("BSent", (m,)),), (Fact("AReceived", (m,)),)]
        assert check_trace(trace, f)
        assert not check_trace([trace[0]], f)

    def test_vacuous_universal(self):
        f = parse_formula(
            "All msg #i. SecretB(msg)@i ==> not (Ex #j. K(msg)@j)"
        )
        assert check_trace([], f)

    def test_secrecy_violated(self):
        f = parse_formula(
            "All m #i. Sec(m)@i ==> not (Ex #j. K(m)@j)"
        )
        m = N("g^(~m)")
        good = [(Fact("Sec", (m,)),)]
        bad = good + [(Fact("K", (m,)),)]
        assert check_trace(good, f)
        assert not check_trace(bad, f)

    def test_timepoint_order(self):
        f = parse_formula("All #i #j. A()@i & B()@j ==> #i < #j")
        tr = [(Fact("A", ()),), (Fact("B", ()),)]
        assert check_trace(tr, f)
        assert not check_trace(list(reversed(tr)), f)

    def test_restriction_filter(self):
        from fdh.model import Restriction

        r = Restriction("neq", parse_formula("All a b #i. Neq(a, b)@i ==> not (a = b)"))
        x = Name("x", Sort.PUBLIC)
        y = Name("y", Sort.PUBLIC)
        ok = [(Fact("Neq", (x, y)),)]
        bad = [(Fact("Neq", (x, x)),)]
        assert trace_admissible(ok, [r])
        assert not trace_admissible(bad, [r])

    def test_equality_modulo_theory(self):
        f = parse_formula("All x y #i. Same(x, y)@i ==> x = y")
        t1 = N("g^(~a + ~b)")
        t2 = N("g^(~a) . g^(~b)")
        assert check_trace([(Fact("Same", (t1, t2)),)], f)


class TestReplayDeterminism:
    def test_same_sequence_same_trace(self):
        inst_src = []
        ska = Name("k", Sort.FRE)
        inst_src.append(fresh_rule(ska))
        out_rule = Rule("outg", (Fact("Fr", (ska,)),), (K(exp(G, ska)),),
                        (Out(exp(G, ska)),))
        inst_src.append(out_rule)
        t1 = run_sequence(inst_src).trace
        t2 = run_sequence(inst_src).trace
        assert t1 == t2
