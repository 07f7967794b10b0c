"""Multiset-rewriting protocol representation and ground execution.

Rules are premise/action/conclusion fact lists over sorted terms.  The
forward engine executes ground rule instances (the attack-replay oracle);
lemmas are first-order trace formulas evaluated over finite traces.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .rewrite import normalize
from .sorts import Sort, sort_leq
from .terms import (
    App,
    EG,
    FreshSource,
    G,
    MU,
    Name,
    ONE,
    PAIR,
    SENC,
    Subst,
    Term,
    Var,
    ZERO,
    apply_subst,
    mk_app,
    variables,
)

SPECIAL_FACTS = ("K", "In", "Out", "Fr")


class WellformednessError(Exception):
    pass


class PremiseMissing(Exception):
    pass


class FreshnessViolation(Exception):
    pass


@dataclass(frozen=True)
class Fact:
    name: str
    args: tuple[Term, ...]
    persistent: bool = False

    @property
    def special(self) -> str:
        return self.name if self.name in SPECIAL_FACTS else "none"

    def map_args(self, f) -> "Fact":
        return Fact(self.name, tuple(f(a) for a in self.args), self.persistent)

    def normalized(self) -> "Fact":
        return self.map_args(normalize)

    def __str__(self):
        bang = "!" if self.persistent else ""
        return f"{bang}{self.name}(" + ", ".join(str(a) for a in self.args) + ")"


def K(t: Term) -> Fact:
    return Fact("K", (t,), persistent=True)


def In(t: Term) -> Fact:
    return Fact("In", (t,))


def Out(t: Term) -> Fact:
    return Fact("Out", (t,))


def Fr(t: Term) -> Fact:
    return Fact("Fr", (t,))


@dataclass(frozen=True)
class Rule:
    name: str
    premises: tuple[Fact, ...]
    actions: tuple[Fact, ...]
    conclusions: tuple[Fact, ...]
    internal: bool = False  # DH-operator deduction rules stay out of search

    def facts(self) -> Iterable[Fact]:
        return itertools.chain(self.premises, self.actions, self.conclusions)

    def vars(self) -> set[Var]:
        out: set[Var] = set()
        for f in self.facts():
            for a in f.args:
                out |= variables(a)
        return out

    def apply(self, s: Subst) -> "Rule":
        return Rule(
            self.name,
            tuple(f.map_args(lambda t: normalize(apply_subst(s, t))) for f in self.premises),
            tuple(f.map_args(lambda t: normalize(apply_subst(s, t))) for f in self.actions),
            tuple(f.map_args(lambda t: normalize(apply_subst(s, t))) for f in self.conclusions),
            self.internal,
        )

    def rename_apart(self, fresh: FreshSource) -> tuple["Rule", Subst]:
        ren = Subst.of({v: fresh.var(f"{v.name}_", v.sort) for v in self.vars()})
        return self.apply(ren), ren

    def is_ground(self) -> bool:
        return not self.vars()

    def __str__(self):
        p = ", ".join(map(str, self.premises))
        a = ", ".join(map(str, self.actions))
        c = ", ".join(map(str, self.conclusions))
        mid = f"--[{a}]->" if a else "-->"
        return f"rule {self.name}: [{p}] {mid} [{c}]"


# --- lemma formulas -------------------------------------------------------------


@dataclass(frozen=True)
class Formula:
    pass


@dataclass(frozen=True)
class FQuant(Formula):
    kind: str  # "all" | "ex"
    vars: tuple[Var, ...]
    body: Formula


@dataclass(frozen=True)
class FConn(Formula):
    kind: str  # "and" | "or" | "imp" | "not"
    parts: tuple[Formula, ...]


@dataclass(frozen=True)
class FFact(Formula):
    fact: Fact
    tp: Term  # temporal variable or index


@dataclass(frozen=True)
class FEq(Formula):
    lhs: Term
    rhs: Term


@dataclass(frozen=True)
class FTime(Formula):
    kind: str  # "less" | "eq"
    lhs: Term
    rhs: Term


@dataclass(frozen=True)
class FFalse(Formula):
    pass


@dataclass(frozen=True)
class Lemma:
    name: str
    mode: str  # "all_traces" | "exists_trace"
    formula: Formula


@dataclass(frozen=True)
class Restriction:
    name: str
    formula: Formula


@dataclass
class Protocol:
    name: str
    rules: list[Rule]
    lemmas: list[Lemma]
    restrictions: list[Restriction]
    builtins: tuple[str, ...] = ()
    warnings: list[str] = field(default_factory=list)

    def lemma(self, name: str) -> Lemma:
        for l in self.lemmas:
            if l.name == name:
                return l
        raise KeyError(f"no lemma named {name!r}")

    def all_rules(self) -> list[Rule]:
        if not hasattr(self, "_all_rules_cache") or self._all_rules_cache is None:
            self._all_rules_cache = self.rules + md_dh_rules()
        return self._all_rules_cache


# --- message deduction ----------------------------------------------------------


_MD_CACHE: list[Rule] = []


def md_dh_rules() -> list[Rule]:
    """The fixed adversary deduction rules.  Per-operator rules are flagged
    internal: the backward search represents them algebraically, only the
    forward engine and graph reconstruction use them."""
    if _MD_CACHE:
        return list(_MD_CACHE)
    m = Var("m", Sort.MSG)
    f = Var("f", Sort.FRE)
    n = Var("n", Sort.FRESH)
    p = Var("p", Sort.PUBLIC)
    tg = Var("t", Sort.G)
    te = Var("t", Sort.E)
    ug = Var("u", Sort.G)
    ue = Var("u", Sort.E)
    k = Var("k", Sort.MSG)
    rules = [
        Rule("send", (K(m),), (K(m),), (In(m),)),
        Rule("recv", (Out(m),), (), (K(m),)),
        Rule("pubG", (), (K(G),), (K(G), Out(G))),
        Rule("pub", (), (K(p),), (K(p), Out(p))),
        Rule("fresh_adv", (Fr(n),), (K(n),), (K(n), Out(n))),
        Rule("zero", (), (K(ZERO),), (K(ZERO), Out(ZERO))),
        Rule("one", (), (K(ONE),), (K(ONE), Out(ONE))),
        Rule("eG", (), (K(EG),), (K(EG), Out(EG))),
        Rule("FrE", (Fr(f),), (K(f),), (K(f), Out(f))),
        Rule("mu", (K(tg),), (K(mk_app(MU, (tg,))),), (K(mk_app(MU, (tg,))),)),
    ]
    # user-theory constructors/destructors
    a, b = Var("a", Sort.MSG), Var("b", Sort.MSG)
    rules += [
        Rule("pair", (K(a), K(b)), (K(mk_app(PAIR, (a, b))),), (K(mk_app(PAIR, (a, b))),)),
        Rule("fst", (K(mk_app(PAIR, (a, b))),), (K(a),), (K(a),)),
        Rule("snd", (K(mk_app(PAIR, (a, b))),), (K(b),), (K(b),)),
        Rule("senc", (K(a), K(k)), (K(mk_app(SENC, (a, k))),), (K(mk_app(SENC, (a, k))),)),
        Rule("sdec", (K(mk_app(SENC, (a, k))), K(k)), (K(a),), (K(a),)),
    ]
    # DH operator rules: algebraic-internal
    from .terms import ADD, EXP, GINV, GMUL, INV, MUL, NEG

    vg1, vg2 = Var("v1", Sort.G), Var("v2", Sort.G)
    ve1, ve2 = Var("w1", Sort.E), Var("w2", Sort.E)
    ops = [
        ("op_exp", (K(vg1), K(ve1)), mk_app(EXP, (vg1, ve1))),
        ("op_gmul", (K(vg1), K(vg2)), mk_app(GMUL, (vg1, vg2))),
        ("op_ginv", (K(vg1),), mk_app(GINV, (vg1,))),
        ("op_mul", (K(ve1), K(ve2)), mk_app(MUL, (ve1, ve2))),
        ("op_add", (K(ve1), K(ve2)), mk_app(ADD, (ve1, ve2))),
        ("op_neg", (K(ve1),), mk_app(NEG, (ve1,))),
        ("op_inv", (K(ve1),), mk_app(INV, (ve1,))),
    ]
    for nm, prem, out in ops:
        rules.append(Rule(nm, prem, (K(out),), (K(out),), internal=True))
    _MD_CACHE.extend(rules)
    return list(_MD_CACHE)


FRESH_RULE_NAME = "Fresh"


def fresh_rule(name: Name) -> Rule:
    """The distinguished instance-unique rule creating a fresh name."""
    return Rule(FRESH_RULE_NAME, (), (), (Fr(name),))


# --- ground forward execution -----------------------------------------------------


@dataclass
class State:
    linear: dict[Fact, int] = field(default_factory=dict)
    persistent: set[Fact] = field(default_factory=set)
    created: set[Name] = field(default_factory=set)
    trace: list[tuple[Fact, ...]] = field(default_factory=list)

    def copy(self) -> "State":
        return State(dict(self.linear), set(self.persistent),
                     set(self.created), list(self.trace))

    def count(self, f: Fact) -> int:
        if f.persistent:
            return 1 if f in self.persistent else 0
        return self.linear.get(f, 0)

    def add(self, f: Fact):
        if f.persistent:
            self.persistent.add(f)
        else:
            self.linear[f] = self.linear.get(f, 0) + 1

    def remove(self, f: Fact):
        n = self.linear.get(f, 0)
        if n <= 1:
            self.linear.pop(f, None)
        else:
            self.linear[f] = n - 1


def forward_step(state: State, instance: Rule) -> State:
    """Apply a ground rule instance: consume linear premises (present modulo
    the equational theory via normal forms), add conclusions, append the
    action multiset to the trace."""
    if not instance.is_ground():
        raise PremiseMissing(f"instance {instance.name} is not ground")
    inst = Rule(
        instance.name,
        tuple(f.normalized() for f in instance.premises),
        tuple(f.normalized() for f in instance.actions),
        tuple(f.normalized() for f in instance.conclusions),
        instance.internal,
    )
    out = state.copy()
    if inst.name == FRESH_RULE_NAME:
        (fact,) = inst.conclusions
        name = fact.args[0]
        assert isinstance(name, Name)
        if name in out.created:
            raise FreshnessViolation(f"fresh name {name} created twice")
        out.created.add(name)
    need: dict[Fact, int] = {}
    for f in inst.premises:
        if f.persistent:
            if f not in out.persistent:
                raise PremiseMissing(f"{inst.name}: missing persistent {f}")
        else:
            need[f] = need.get(f, 0) + 1
    for f, n in need.items():
        if out.linear.get(f, 0) < n:
            raise PremiseMissing(f"{inst.name}: missing {f}")
    for f in inst.premises:
        if not f.persistent:
            out.remove(f)
    for f in inst.conclusions:
        out.add(f)
    out.trace.append(inst.actions)
    return out


def run_sequence(instances: Iterable[Rule]) -> State:
    st = State()
    for inst in instances:
        st = forward_step(st, inst)
    return st


# --- trace formula evaluation ------------------------------------------------------


def _term_universe(trace: list[tuple[Fact, ...]]) -> list[Term]:
    from .terms import subterms

    seen = []
    for acts in trace:
        for f in acts:
            for a in f.args:
                for s in subterms(a):
                    ns = normalize(s)
                    if ns not in seen:
                        seen.append(ns)
    return seen


def check_trace(trace: list[tuple[Fact, ...]], formula: Formula) -> bool:
    """First-order evaluation over a finite trace; message quantifiers range
    over the trace's term universe, timepoint quantifiers over indices."""
    universe = _term_universe(trace)
    tps = list(range(len(trace)))

    def ev(f: Formula, env: dict[Var, object]) -> bool:
        if isinstance(f, FFalse):
            return False
        if isinstance(f, FQuant):
            domains = []
            for v in f.vars:
                domains.append(tps if v.sort == Sort.TEMPORAL else universe)
            combos = itertools.product(*domains)
            if f.kind == "all":
                return all(ev(f.body, {**env, **dict(zip(f.vars, c))}) for c in combos)
            return any(ev(f.body, {**env, **dict(zip(f.vars, c))}) for c in combos)
        if isinstance(f, FConn):
            if f.kind == "not":
                return not ev(f.parts[0], env)
            if f.kind == "and":
                return all(ev(p, env) for p in f.parts)
            if f.kind == "or":
                return any(ev(p, env) for p in f.parts)
            if f.kind == "imp":
                return (not ev(f.parts[0], env)) or ev(f.parts[1], env)
        if isinstance(f, FFact):
            i = _tp_value(f.tp, env)
            if i is None or not (0 <= i < len(trace)):
                return False
            want = f.fact.map_args(lambda t: normalize(_subst_env(t, env)))
            return any(
                got.name == want.name and got.args == want.args
                for got in trace[i]
            )
        if isinstance(f, FEq):
            return normalize(_subst_env(f.lhs, env)) == normalize(_subst_env(f.rhs, env))
        if isinstance(f, FTime):
            i, j = _tp_value(f.lhs, env), _tp_value(f.rhs, env)
            if i is None or j is None:
                return False
            return i < j if f.kind == "less" else i == j
        raise TypeError(f"bad formula node {f}")

    return ev(formula, {})


def _tp_value(t: Term, env) -> Optional[int]:
    if isinstance(t, Var):
        v = env.get(t)
        return v if isinstance(v, int) else None
    return None


def _subst_env(t: Term, env) -> Term:
    bind = {v: val for v, val in env.items() if isinstance(val, Term)}
    if not bind:
        return t
    return apply_subst(Subst.of(bind), t)


def trace_satisfies_lemma(trace, lemma: Lemma) -> bool:
    """Mode-aware: an exists-trace lemma is witnessed by a satisfying trace;
    an all-traces lemma is falsified when the trace satisfies its negation."""
    return check_trace(trace, lemma.formula)


def trace_admissible(trace, restrictions: list[Restriction]) -> bool:
    return all(check_trace(trace, r.formula) for r in restrictions)
