"""The backward constraint-solving calculus.

Goals are reduced by case-splitting rules; non-DH facts use plain
unification (cleaned of DH subterms), DH facts use root-term unification
in the simplified theory plus exact linear algebra over rational-function
fields.  Adversarial K goals classify exponents into leaked and secret
sets, unify indicators against network outputs, and solve the resulting
combination equations.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import algebra
from .algebra import (
    AlgebraError,
    Classification,
    NoSolution,
    abstract_term,
    gauss_solve,
    linearize_products,
    match_coefficients,
    mu_abstract,
    solutions_to_substitutions,
    to_poly,
)
from .constraints import (
    ConstraintSystem,
    Contradiction,
    Edge,
    Filter,
    Goal,
    KSolutionRecord,
    Node,
    UnsupportedFormula,
    system_signature,
)
from .indicators import indicator, is_trivial_indicator, no_canc_term
from .model import (
    Fact,
    FConn,
    FEq,
    FFact,
    FFalse,
    Formula,
    FQuant,
    FTime,
    Lemma,
    Protocol,
    Rule,
    fresh_rule,
    md_dh_rules,
    FRESH_RULE_NAME,
)
from .rewrite import enf_of, gnf_of, normalize, root_terms
from .sorts import Sort, sort_leq
from .terms import (
    ADD,
    App,
    EG,
    EXP,
    FreshSource,
    G,
    INV,
    MU,
    MUL,
    NEG,
    Name,
    ONE,
    PAIR,
    SDEC,
    SENC,
    Subst,
    Term,
    Var,
    ZERO,
    apply_subst,
    mk_app,
    term_key,
    variables,
)
from .unify import (
    MGUCapExceeded,
    NoUnifier,
    UnificationProblem,
    generalize,
    generalize_H,
    has_unifier,
    root_combinations,
    unify_simp,
)


@dataclass
class StepDescriptor:
    gid: int
    rule: str
    target: str
    cases: int

    def to_json(self) -> dict:
        return {
            "goal": self.gid,
            "rule": self.rule,
            "target": self.target,
            "cases": self.cases,
        }


@dataclass
class Verdict:
    status: str  # "proved" | "attack" | "bound_exceeded"
    lemma: str
    mode: str
    assumptions: tuple = ()  # NoCanc pairs for conditional proofs
    graph: object = None  # DependencyGraph on attack
    trace: tuple = ()
    open_systems: int = 0
    steps: int = 0
    elapsed: float = 0.0
    script: tuple = ()  # replayable decision list

    def to_json(self) -> dict:
        return {
            "v": 1,
            "status": self.status,
            "lemma": self.lemma,
            "mode": self.mode,
            "assumptions": [f"NoCanc({a}, {b})" for a, b in self.assumptions],
            "open_systems": self.open_systems,
            "steps": self.steps,
            "elapsed": round(self.elapsed, 3),
            "has_graph": self.graph is not None,
        }


# --- lemma conversion -----------------------------------------------------------


def _nnf(f: Formula, neg: bool) -> Formula:
    if isinstance(f, FQuant):
        kind = f.kind if not neg else ("ex" if f.kind == "all" else "all")
        return FQuant(kind, f.vars, _nnf(f.body, neg))
    if isinstance(f, FConn):
        if f.kind == "not":
            return _nnf(f.parts[0], not neg)
        if f.kind == "imp":
            a, b = f.parts
            if neg:
                return FConn("and", (_nnf(a, False), _nnf(b, True)))
            return FConn("or", (_nnf(a, True), _nnf(b, False)))
        kind = f.kind if not neg else ("or" if f.kind == "and" else "and")
        return FConn(kind, tuple(_nnf(p, neg) for p in f.parts))
    if isinstance(f, FFalse):
        return FConn("not", (FFalse(),)) if neg else f
    if neg:
        return FConn("not", (f,))
    return f


def init_system(protocol: Protocol, lemma: Lemma,
                fresh: Optional[FreshSource] = None) -> list[ConstraintSystem]:
    """Constraint systems for the lemma's negation (all-traces) or the lemma
    itself (exists-trace); a disjunction yields several systems."""
    fresh = fresh or FreshSource(1)
    f = _nnf(lemma.formula, neg=(lemma.mode == "all_traces"))

    base = ConstraintSystem(fresh)
    for r in protocol.restrictions:
        _install_restriction(base, r.formula)

    systems: list[ConstraintSystem] = []

    def build(sys: ConstraintSystem, g: Formula, ren: Subst):
        if isinstance(g, FQuant):
            if g.kind != "ex":
                raise UnsupportedFormula(
                    "universal quantification must appear negated"
                )
            bind = {}
            for v in g.vars:
                if v.sort == Sort.TEMPORAL:
                    bind[v] = fresh.var(f"tp_{v.name}_", Sort.TEMPORAL)
                else:
                    bind[v] = fresh.var(f"{v.name}_", v.sort)
            build(sys, g.body, ren.compose(Subst.of(bind)))
            return
        if isinstance(g, FConn) and g.kind == "and":
            for p in g.parts:
                if _is_disjunctive(p):
                    raise UnsupportedFormula("disjunction under conjunction")
            for p in g.parts:
                build_part(sys, p, ren)
            systems.append(sys)
            return
        if isinstance(g, FConn) and g.kind == "or":
            for p in g.parts:
                build(sys.clone(), p, ren)
            return
        build_part(sys, g, ren)
        systems.append(sys)

    def build_part(sys: ConstraintSystem, g: Formula, ren: Subst):
        if isinstance(g, FConn) and g.kind == "and":
            for p in g.parts:
                build_part(sys, p, ren)
            return
        if isinstance(g, FQuant) and g.kind == "ex":
            bind = {}
            for v in g.vars:
                if v.sort == Sort.TEMPORAL:
                    bind[v] = fresh.var(f"tp_{v.name}_", Sort.TEMPORAL)
                else:
                    bind[v] = fresh.var(f"{v.name}_", v.sort)
            build_part(sys, g.body, ren.compose(Subst.of(bind)))
            return
        if isinstance(g, FFact):
            fact = g.fact.map_args(lambda t: normalize(apply_subst(ren, t)))
            tp = apply_subst(ren, g.tp)
            sys.add_goal("action", (fact, tp))
            return
        if isinstance(g, FEq):
            sys.add_goal(
                "eq",
                (
                    normalize(apply_subst(ren, g.lhs)),
                    normalize(apply_subst(ren, g.rhs)),
                ),
            )
            return
        if isinstance(g, FTime):
            sys.pending_time.append(
                (g.kind, apply_subst(ren, g.lhs), apply_subst(ren, g.rhs))
            )
            return
        if isinstance(g, FQuant) and g.kind == "all":
            # NNF of a negated existential: every body atom must be a negated
            # fact, i.e. a trace filter with the quantified message variables
            # as wildcards
            facts: list[Fact] = []

            def collect_neg(b: Formula):
                if isinstance(b, FConn) and b.kind == "and":
                    for p in b.parts:
                        collect_neg(p)
                    return
                if (
                    isinstance(b, FConn)
                    and b.kind == "not"
                    and isinstance(b.parts[0], FFact)
                ):
                    facts.append(b.parts[0].fact)
                    return
                raise UnsupportedFormula(f"unsupported universal part {b}")

            collect_neg(g.body)
            wc = tuple(v for v in g.vars if v.sort != Sort.TEMPORAL)
            for fa in facts:
                fact = fa.map_args(lambda t: normalize(apply_subst(ren, t)))
                sys.filters.append(Filter(fact, wc))
            return
        if isinstance(g, FConn) and g.kind == "not":
            inner = g.parts[0]
            if isinstance(inner, FFalse):
                return  # trivially true
            if isinstance(inner, FEq):
                sys.diseqs.add(
                    (
                        normalize(apply_subst(ren, inner.lhs)),
                        normalize(apply_subst(ren, inner.rhs)),
                    )
                )
                return
            if isinstance(inner, FQuant) and inner.kind == "ex":
                _install_filter(sys, inner, ren)
                return
            if isinstance(inner, FFact):
                fact = inner.fact.map_args(lambda t: normalize(apply_subst(ren, t)))
                sys.filters.append(Filter(fact, ()))
                return
            raise UnsupportedFormula(f"unsupported negated part {inner}")
        if isinstance(g, FFalse):
            raise Contradiction("formula is false")
        raise UnsupportedFormula(f"unsupported formula part {g}")

    def _is_disjunctive(p: Formula) -> bool:
        return isinstance(p, FConn) and p.kind == "or"

    out = []
    try:
        build(base, f, Subst())
    except Contradiction:
        return []
    for sys in systems:
        try:
            sys.saturate()
            out.append(sys)
        except Contradiction:
            continue
    return out


def _install_filter(sys: ConstraintSystem, q: FQuant, ren: Subst):
    body = q.body
    facts: list[FFact] = []

    def collect(g: Formula):
        if isinstance(g, FConn) and g.kind == "and":
            for p in g.parts:
                collect(p)
            return
        if isinstance(g, FFact):
            facts.append(g)
            return
        raise UnsupportedFormula(f"unsupported filter body {g}")

    collect(body)
    wc = tuple(v for v in q.vars if v.sort != Sort.TEMPORAL)
    for ff in facts:
        fact = ff.fact.map_args(lambda t: normalize(apply_subst(ren, t)))
        sys.filters.append(Filter(fact, wc))


def _install_restriction(sys: ConstraintSystem, f: Formula):
    """Neq-style restrictions: All vars #i. Fact(args)@i ==> not (a = b)."""
    g = f
    qvars: list[Var] = []
    while isinstance(g, FQuant) and g.kind == "all":
        qvars.extend(g.vars)
        g = g.body
    if (
        isinstance(g, FConn)
        and g.kind == "imp"
        and isinstance(g.parts[0], FFact)
        and isinstance(g.parts[1], FConn)
        and g.parts[1].kind == "not"
        and isinstance(g.parts[1].parts[0], FEq)
    ):
        fact = g.parts[0].fact
        eq = g.parts[1].parts[0]
        # Fact(a, b) with conclusion not(a = b): equivalent to a trace filter
        # on Fact instances whose arguments coincide
        if (
            len(fact.args) == 2
            and {str(eq.lhs), str(eq.rhs)} == {str(fact.args[0]), str(fact.args[1])}
        ):
            v = Var("_rx", Sort.MSG)
            sys.filters.append(
                Filter(Fact(fact.name, (v, v)), (v,) + tuple(qvars))
            )
            return
    raise UnsupportedFormula(f"unsupported restriction shape: {f}")


# --- source enumeration -----------------------------------------------------------


@dataclass(frozen=True)
class SourceRef:
    """A DH (or Msg) subterm reachable by the adversary from an Out
    conclusion: `path` lists destructor steps, `keys` the encryption keys
    that must be known along the way."""

    term: Term
    node: Optional[int]  # existing node id, or None for a fresh rule instance
    rule_name: str
    cidx: int
    path: tuple = ()
    keys: tuple = ()

    def label(self) -> str:
        where = f"#{self.node}" if self.node is not None else "new"
        return f"{self.rule_name}[{where}].{self.cidx}:{self.term}"


def _reachable_subterms(t: Term) -> list[tuple[Term, tuple, tuple]]:
    """(subterm, destructor path, keys needed)."""
    out = [(t, (), ())]
    if isinstance(t, App) and t.sym == PAIR:
        for tag, child in (("fst", t.args[0]), ("snd", t.args[1])):
            for s, p, k in _reachable_subterms(child):
                out.append((s, (tag,) + p, k))
    if isinstance(t, App) and t.sym == SENC:
        for s, p, k in _reachable_subterms(t.args[0]):
            out.append((s, ("sdec",) + p, (t.args[1],) + k))
    return out


_STATIC_SOURCES: dict[int, list[SourceRef]] = {}


def _static_sources(proto: Protocol) -> list[SourceRef]:
    key = id(proto)
    if key not in _STATIC_SOURCES:
        refs = []
        for rule in proto.all_rules():
            if rule.internal:
                continue
            for cidx, f in enumerate(rule.conclusions):
                if f.name != "Out":
                    continue
                for s, path, keys in _reachable_subterms(normalize(f.args[0])):
                    refs.append(SourceRef(s, None, rule.name, cidx, path, keys))
        _STATIC_SOURCES[key] = refs
    return _STATIC_SOURCES[key]


def out_sources(sys: ConstraintSystem, proto: Protocol,
                want: Callable[[Term], bool]) -> list[SourceRef]:
    """Out-fact subterms the adversary can reach, from existing nodes and
    from fresh instances of every non-internal rule."""
    refs: list[SourceRef] = []
    for nid, node in sorted(sys.nodes.items()):
        if node.internal:
            continue
        for cidx, f in enumerate(node.rule.conclusions):
            if f.name != "Out":
                continue
            for s, path, keys in _reachable_subterms(normalize(f.args[0])):
                if want(s):
                    refs.append(SourceRef(s, nid, node.rule.name, cidx, path, keys))
    for ref in _static_sources(proto):
        if want(ref.term):
            refs.append(ref)
    return refs


def _materialize_source(sys: ConstraintSystem, proto: Protocol,
                        ref: SourceRef, before: Optional[int]) -> SourceRef:
    """Instantiate a fresh-rule source as a node constraint (renamed apart),
    keeping existing-node sources as they are."""
    if ref.node is not None:
        if before is not None and ref.node != before:
            sys.add_order(ref.node, before)
        return ref
    rule = next(r for r in proto.all_rules() if r.name == ref.rule_name)
    node = sys.new_node(rule)
    _register_node(sys, node)
    if before is not None:
        sys.add_order(node.nid, before)
    out_fact = node.rule.conclusions[ref.cidx]
    for s, path, keys in _reachable_subterms(normalize(out_fact.args[0])):
        if path == ref.path:
            return SourceRef(s, node.nid, node.rule.name, ref.cidx, path, keys)
    raise Contradiction("source path vanished under instantiation")


def _register_node(sys: ConstraintSystem, node: Node):
    """Post-creation bookkeeping: premise goals, K-action leak entries."""
    for pidx, f in enumerate(node.rule.premises):
        sys.add_goal("premise", (node.nid, pidx))
    for f in node.rule.actions:
        if f.name == "K" and sort_leq(f.args[0].sort, Sort.E):
            sys.leaked.add((normalize(f.args[0]), node.nid))


# --- the solver -------------------------------------------------------------------


class Solver:
    def __init__(self, proto: Protocol, lemma: Lemma,
                 fresh: Optional[FreshSource] = None,
                 depth_bound: int = 28,
                 step_limit: int = 200000,
                 hints: Optional[list[dict]] = None,
                 probe_budget: int = 80,
                 refute_budget: int = 1600,
                 node_bound: int = 16):
        self.proto = proto
        self.lemma = lemma
        self.fresh = fresh or FreshSource(1)
        self.depth_bound = depth_bound
        self.step_limit = step_limit
        self.steps = 0
        self.hints = list(hints or [])
        self._hint_idx = 0
        self.probe_budget = probe_budget
        self.refute_budget = refute_budget
        self.node_bound = node_bound
        self.bound_hits = 0
        self.assumptions: set = set()
        self.open_count = 0
        self.script: list[dict] = []
        self._probe_cache: dict = {}
        self._probe_depth = 0
        self.extraction_failures = 0
        self._seen: dict[str, int] = {}

    # --- goal scheduling ----------------------------------------------------

    def delay_class(self, sys: ConstraintSystem, g: Goal) -> int:
        """Spec-facing delay classes: 0 state premises, 1 actions/equalities,
        2 K over non-variables, 3 K over FrE variables, 4 K over E vars."""
        if g.kind == "premise":
            nid, pidx = g.data
            fact = sys.nodes[nid].rule.premises[pidx]
            if fact.name == "K":
                t = normalize(fact.args[0])
                if isinstance(t, Var):
                    if t.sort == Sort.FRE:
                        return 3
                    if sort_leq(t.sort, Sort.E):
                        return 4
                    return 2
                if any(v.sort == Sort.VARE for v in variables(t)):
                    return 5  # wait for the adversary-choice variables
                return 2
            return 0
        if g.kind in ("action", "eq", "dhsolve", "eqk"):
            return 1
        return 2

    def _sched_priority(self, sys: ConstraintSystem, g: Goal) -> tuple:
        # scheduler order: state premises, then eager K-FrE goals, then
        # actions/equalities, then remaining K goals, E-variable K last
        cls = self.delay_class(sys, g)
        order = {0: 0, 3: 1, 1: 2, 2: 3, 4: 4, 5: 5}[cls]
        return (order, g.gid)

    def pick_goal(self, sys: ConstraintSystem) -> Optional[Goal]:
        if not sys.goals:
            return None
        hint = self._peek_hint()
        if hint is not None:
            for g in sys.goals.values():
                if self._hint_matches(sys, g, hint):
                    return g
        return min(sys.goals.values(), key=lambda g: self._sched_priority(sys, g))

    def _peek_hint(self) -> Optional[dict]:
        if self._hint_idx < len(self.hints):
            return self.hints[self._hint_idx]
        return None

    def _hint_matches(self, sys: ConstraintSystem, g: Goal, hint: dict) -> bool:
        rule = self.rule_name_for(sys, g)
        if hint.get("rule") not in (None, rule):
            return False
        target = hint.get("target")
        return target is None or target in self.describe_goal(sys, g)

    # --- descriptive API ------------------------------------------------------

    def rule_name_for(self, sys: ConstraintSystem, g: Goal) -> str:
        if g.kind == "action":
            fact, _ = g.data
            has_dh = any(sort_leq(a.sort, Sort.G) or sort_leq(a.sort, Sort.E)
                         for a in fact.args)
            return "C_@" if has_dh else "S_@"
        if g.kind == "premise":
            nid, pidx = g.data
            fact = sys.nodes[nid].rule.premises[pidx]
            if fact.name == "Fr":
                return "S_Fr"
            if fact.name == "In":
                return "S_In"
            if fact.name == "K":
                t = normalize(fact.args[0])
                if isinstance(t, App) and t.sym == MU:
                    return "C_mu"
                if isinstance(t, Var) and sort_leq(t.sort, Sort.E):
                    return "C_varK"
                if sort_leq(t.sort, Sort.G) or sort_leq(t.sort, Sort.E):
                    return "C_PremK"
                return "S_PremK"
            has_dh = any(sort_leq(a.sort, Sort.G) or sort_leq(a.sort, Sort.E)
                         for a in fact.args)
            return "C_Prem" if has_dh else "S_Prem"
        if g.kind == "eq":
            a, b = g.data
            if isinstance(a, Var) or isinstance(b, Var):
                if _dh_sorted(a) or _dh_sorted(b):
                    return "C_var"
            if _dh_sorted(a) and _dh_sorted(b):
                return "C_EqSimp"
            return "C_comb" if (_has_dh_subterm(a) or _has_dh_subterm(b)) else "S_="
        if g.kind == "dhsolve":
            return "C_=K" if g.data[5] else "C_="
        if g.kind == "eqk":
            return "C_EqSimpK"
        return "?"

    def describe_goal(self, sys: ConstraintSystem, g: Goal) -> str:
        if g.kind == "premise":
            nid, pidx = g.data
            fact = sys.nodes[nid].rule.premises[pidx]
            return f"{fact} @ #{nid} ({sys.nodes[nid].rule.name})"
        if g.kind == "action":
            fact, tp = g.data
            return f"{fact} @ {tp}"
        if g.kind == "eq":
            return f"{g.data[0]} = {g.data[1]}"
        if g.kind == "dhsolve":
            return f"{g.data[0]} ~ {g.data[1]}"
        if g.kind == "eqk":
            return f"K-combine {g.data[0]}"
        return str(g)

    def applicable_steps(self, sys: ConstraintSystem) -> list[StepDescriptor]:
        out = []
        saved = (self.bound_hits, self.extraction_failures)
        for g in sorted(sys.goals.values(), key=lambda g: self._sched_priority(sys, g)):
            try:
                children = self.expand(sys, g)
                out.append(
                    StepDescriptor(
                        g.gid,
                        self.rule_name_for(sys, g),
                        self.describe_goal(sys, g),
                        len(children),
                    )
                )
            except Contradiction:
                out.append(
                    StepDescriptor(g.gid, self.rule_name_for(sys, g),
                                   self.describe_goal(sys, g), 0)
                )
        self.bound_hits, self.extraction_failures = saved
        return out

    # --- expansion dispatch ----------------------------------------------------

    def expand(self, sys: ConstraintSystem, goal: Goal) -> list[ConstraintSystem]:
        """All case-split children of applying the goal's rule.  Children
        that are immediately contradictory are dropped."""
        kind = goal.kind
        if kind == "action":
            children = self._solve_action(sys, goal)
        elif kind == "premise":
            children = self._solve_premise(sys, goal)
        elif kind == "eq":
            children = self._solve_eq(sys, goal)
        elif kind == "dhsolve":
            children = self._solve_dh(sys, goal)
        elif kind == "eqk":
            children = self._solve_eqk(sys, goal)
        else:
            raise Contradiction(f"unknown goal kind {kind}")
        return children

    # each helper clones sys per case, removes the goal, mutates, saturates

    def _child(self, sys: ConstraintSystem, goal: Goal) -> ConstraintSystem:
        child = sys.clone()
        child.goals.pop(goal.gid, None)
        return child

    def _finish(self, child: ConstraintSystem, s: Optional[Subst] = None
                ) -> Optional[ConstraintSystem]:
        try:
            if s is not None and s.bindings:
                child.apply(s)
            else:
                child.saturate()
            self._propagate(child)
            if self._protocol_nodes(child) > self.node_bound:
                self.bound_hits += 1
                return None
            return child
        except Contradiction as e:
            return None

    def _protocol_nodes(self, sys: ConstraintSystem) -> int:
        proto_names = {r.name for r in self.proto.rules}
        return sum(1 for n in sys.nodes.values() if n.rule.name in proto_names)

    def _propagate(self, sys: ConstraintSystem):
        """Deterministic closures: Fr premises get Fresh sources, In premises
        get send sources, already-satisfied goals are discharged."""
        for _ in range(200):
            changed = False
            for g in list(sys.goals.values()):
                if g.gid not in sys.goals:
                    continue
                if g.kind == "premise":
                    nid, pidx = g.data
                    node = sys.nodes.get(nid)
                    if node is None:
                        sys.goals.pop(g.gid, None)
                        changed = True
                        continue
                    if any(e.dst == (nid, pidx) for e in sys.edges):
                        sys.goals.pop(g.gid, None)
                        changed = True
                        continue
                    fact = node.rule.premises[pidx]
                    if fact.name == "Fr":
                        src = sys.new_node(
                            Rule(FRESH_RULE_NAME, (), (), (fact,)), rename=False
                        )
                        sys.edges.add(Edge((src.nid, 0), (nid, pidx)))
                        sys.add_order(src.nid, nid)
                        sys.goals.pop(g.gid, None)
                        changed = True
                        continue
                    if fact.name == "In":
                        send = next(
                            r for r in md_dh_rules() if r.name == "send"
                        )
                        m = fact.args[0]
                        inst = send.apply(Subst.of({Var("m", Sort.MSG): m}))
                        node2 = sys.new_node(inst, rename=False)
                        _register_node(sys, node2)
                        sys.edges.add(Edge((node2.nid, 0), (nid, pidx)))
                        sys.add_order(node2.nid, nid)
                        # inherit K ancestry for loop pruning
                        newk = [
                            gg
                            for gg in sys.goals.values()
                            if gg.kind == "premise" and gg.data[0] == node2.nid
                        ]
                        for gg in newk:
                            sys._k_ancestry[gg.gid] = sys.ancestry(g.gid)
                        sys.goals.pop(g.gid, None)
                        changed = True
                        continue
                    if fact.name == "K":
                        t = normalize(fact.args[0])
                        if _k_trivial(t):
                            sys.ksolutions.append(
                                KSolutionRecord(nid, pidx, t, "const")
                            )
                            sys.goals.pop(g.gid, None)
                            changed = True
                            continue
                        if not isinstance(t, Var) and t in sys.leaked_terms_before(nid):
                            sys.ksolutions.append(
                                KSolutionRecord(nid, pidx, t, "derive")
                            )
                            sys.goals.pop(g.gid, None)
                            changed = True
                            continue
                if g.kind == "eq":
                    a, b = g.data
                    if normalize(a) == normalize(b):
                        sys.goals.pop(g.gid, None)
                        changed = True
            self._resolve_pending_time(sys)
            if not changed:
                break
        sys.saturate()

    def _resolve_pending_time(self, sys: ConstraintSystem):
        rest = []
        for kind, a, b in sys.pending_time:
            ia = sys.tp_bindings.get(a) if isinstance(a, Var) else a
            ib = sys.tp_bindings.get(b) if isinstance(b, Var) else b
            if ia is None or ib is None:
                rest.append((kind, a, b))
                continue
            if kind == "less":
                sys.add_order(ia, ib)
            else:
                if ia != ib:
                    sys._merge_nodes(ia, ib)
        sys.pending_time = rest

    # --- S_@/C_@: action goals ---------------------------------------------------

    def _solve_action(self, sys: ConstraintSystem, goal: Goal
                      ) -> list[ConstraintSystem]:
        fact, tp = goal.data
        children = []
        candidates: list[tuple[Optional[int], Rule]] = []
        for nid, node in sorted(sys.nodes.items()):
            if any(
                a.name == fact.name and len(a.args) == len(fact.args)
                for a in node.rule.actions
            ):
                candidates.append((nid, node.rule))
        for rule in self.proto.all_rules():
            if rule.internal:
                continue
            if any(
                a.name == fact.name and len(a.args) == len(fact.args)
                for a in rule.actions
            ):
                candidates.append((None, rule))
        for nid, rule in candidates:
            for aidx, act in enumerate(rule.actions):
                if act.name != fact.name or len(act.args) != len(fact.args):
                    continue
                child = self._child(sys, goal)
                if nid is None:
                    node = child.new_node(rule)
                    _register_node(child, node)
                else:
                    node = child.nodes[nid]
                got = node.rule.actions[aidx]
                if isinstance(tp, Var):
                    child.tp_bindings[tp] = node.nid
                for x, y in zip(fact.args, got.args):
                    child.add_goal("eq", (x, y))
                done = self._finish(child)
                if done is not None:
                    children.append(done)
        return children

    # --- premise dispatch ----------------------------------------------------------

    def _solve_premise(self, sys: ConstraintSystem, goal: Goal
                       ) -> list[ConstraintSystem]:
        nid, pidx = goal.data
        node = sys.nodes[nid]
        fact = node.rule.premises[pidx]
        if fact.name == "K":
            return self._solve_k(sys, goal, nid, pidx, normalize(fact.args[0]))
        return self._solve_state_premise(sys, goal, nid, pidx, fact)

    def _solve_state_premise(self, sys, goal, nid, pidx, fact
                             ) -> list[ConstraintSystem]:
        children = []
        # existing conclusions first, then fresh instances of each rule
        for src_nid, src in sorted(sys.nodes.items()):
            if src.internal:
                continue
            for cidx, conc in enumerate(src.rule.conclusions):
                if conc.name != fact.name or len(conc.args) != len(fact.args):
                    continue
                if not conc.persistent and any(
                    e.src == (src_nid, cidx) for e in sys.edges
                ):
                    continue  # linear conclusion already consumed
                child = self._child(sys, goal)
                child.edges.add(Edge((src_nid, cidx), (nid, pidx)))
                if src_nid != nid:
                    child.add_order(src_nid, nid)
                for x, y in zip(fact.args, conc.args):
                    child.add_goal("eq", (x, y))
                done = self._finish(child)
                if done is not None:
                    children.append(done)
        for rule in self.proto.all_rules():
            if rule.internal:
                continue
            for cidx, conc in enumerate(rule.conclusions):
                if conc.name != fact.name or len(conc.args) != len(fact.args):
                    continue
                child = self._child(sys, goal)
                src = child.new_node(rule)
                _register_node(child, src)
                child.edges.add(Edge((src.nid, cidx), (nid, pidx)))
                child.add_order(src.nid, nid)
                got = child.nodes[src.nid].rule.conclusions[cidx]
                for x, y in zip(fact.args, got.args):
                    child.add_goal("eq", (x, y))
                done = self._finish(child)
                if done is not None:
                    children.append(done)
        return children

    # --- equality goals ---------------------------------------------------------------

    def _solve_eq(self, sys: ConstraintSystem, goal: Goal) -> list[ConstraintSystem]:
        a, b = (normalize(goal.data[0]), normalize(goal.data[1]))
        if a == b:
            child = self._child(sys, goal)
            done = self._finish(child)
            return [done] if done is not None else []
        # C_var: direct instantiation
        for x, y in ((a, b), (b, a)):
            if isinstance(x, Var) and x not in variables(y):
                try:
                    s = Subst.of({x: y})
                except Exception:
                    continue
                child = self._child(sys, goal)
                done = self._finish(child, s)
                return [done] if done is not None else []
        if _dh_sorted(a) and _dh_sorted(b):
            return self._c_eqsimp(sys, goal, a, b)
        return self._c_comb(sys, goal, a, b)

    def _c_comb(self, sys, goal, a, b) -> list[ConstraintSystem]:
        res = _comb_unify(a, b)
        if res is None:
            return []
        msg_bind, dh_pairs = res
        child = self._child(sys, goal)
        for x, y in dh_pairs:
            child.add_goal("eq", (x, y))
        done = self._finish(child, Subst.of(msg_bind) if msg_bind else None)
        return [done] if done is not None else []

    def _c_eqsimp(self, sys, goal, t, h) -> list[ConstraintSystem]:
        """Root-combination unification in the simplified theory, then the
        generalized algebraic equality."""
        verdict = no_canc_term(t)
        assumptions = verdict.pairs if not verdict.holds else ()
        children = []
        evars = sorted(
            {
                v
                for v in variables(t) | variables(h)
                if sort_leq(v.sort, Sort.E) and v.sort != Sort.FRE
            },
            key=term_key,
        )
        try:
            combos = root_combinations(t, h, self.fresh)
        except Exception:
            return []
        ranked = []
        for prob in combos:
            try:
                sigmas = unify_simp(prob, self.fresh)
            except NoUnifier:
                continue
            except MGUCapExceeded as e:
                sys.diagnostics.append(f"MGU cap exceeded on {t} = {h}")
                sigmas = e.partial
            for sigma in sigmas:
                comp = prob.presubst.compose(sigma)
                comp = comp.restrict(lambda v: not v.name.startswith("·f"))
                ranked.append((_subst_weight(comp), comp))
        # simplest unifiers first: atom images before composite/inverted ones
        ranked.sort(key=lambda p: p[0])
        for _, comp in ranked:
            gen = generalize(comp, evars, self.fresh)
            child = self._child(sys, goal)
            child.nocanc_assumptions |= set(assumptions)
            gt = normalize(apply_subst(gen.subst, t))
            gh = normalize(apply_subst(gen.subst, h))
            child.add_goal(
                "dhsolve",
                (gt, gh, tuple(gen.fresh_unknowns), (), (), False),
            )
            done = self._finish(child, gen.subst)
            if done is not None:
                children.append(done)
        return children

    # --- C_= / C_=K: the algebra chain ------------------------------------------------

    def _solve_dh(self, sys: ConstraintSystem, goal: Goal) -> list[ConstraintSystem]:
        t, h, unknowns, secret, leaked, is_k = goal.data
        # substitutions may have instantiated stored unknowns or introduced
        # new ones (a later generalization re-binds Y to Y' + ...); all
        # solver-generated unknowns carry the reserved name prefix
        unknowns = set(u for u in unknowns if isinstance(u, Var))
        for v in variables(t) | variables(h):
            if v.name.startswith("·"):
                unknowns.add(v)
        unknowns = tuple(sorted(unknowns, key=term_key))
        children = []
        ab = mu_abstract([t, h], self.fresh)
        for case in ab.cases:
            child = self._child(sys, goal)
            try:
                res = self._algebra_case(child, t, h, unknowns, secret, leaked, ab, case)
            except (NoSolution, Contradiction):
                continue
            except AlgebraError as e:
                sys.diagnostics.append(f"algebra: {e}")
                continue
            if res is not None:
                children.append(res)
        return children

    def _algebra_case(self, child, t, h, unknowns, secret, leaked, ab, case):
        mu_syms: dict[Term, Term] = {}
        for s, mt in ab.atoms.items():
            rep = case.rep_of(mt) if any(m == mt for m, _ in case.rep) else s
            if rep == s:
                mu_syms[s] = mt
        ta = abstract_term(t, case, ab)
        ha = abstract_term(h, case, ab)
        side = [
            (abstract_term(x, case, ab), abstract_term(y, case, ab))
            for x, y in case.side_equations
        ]
        unknown_set = set(unknowns)
        secret_set = {normalize(x) for x in secret}
        leak_set = {normalize(x) for x in leaked}
        # honest solving: everything that is not an unknown is leaked
        atoms = _exp_atoms(ta) | _exp_atoms(ha)
        for x, y in side:
            atoms |= _exp_atoms(x) | _exp_atoms(y)
        for a in atoms:
            if a in unknown_set or a in secret_set:
                continue
            leak_set.add(a)
        cls = Classification(leaked=leak_set, secret=secret_set,
                             unknowns=unknown_set)
        for s in mu_syms:
            cls.nonzero_syms.add(s)
        lsys = match_coefficients(
            to_poly(ta, cls), to_poly(ha, cls), list(unknowns), cls.nonzero_syms
        )
        for x, y in side:
            extra = match_coefficients(
                to_poly(x, cls), to_poly(y, cls), list(unknowns), cls.nonzero_syms
            )
            lsys.rows.extend(extra.rows)
        lsys.mu_defs = dict(mu_syms)
        lsys, pmap = linearize_products(lsys, self.fresh)
        space = gauss_solve(lsys)
        # solved product unknowns are recovered by unification
        prod_subst = {}
        for z, um in pmap.items():
            if z in space.solved and not space.solved[z].coeffs:
                expr = space.solved[z].const
                if len(expr.num.terms) > 1:
                    raise algebra.NonlinearBeyondScope(
                        f"product {um} solves to a sum"
                    )
        sols = solutions_to_substitutions(space, self.fresh)
        sigma = sols[0]
        # fold product unknowns back: X*Y = value
        for z, um in pmap.items():
            val = sigma.get(z)
            if val is None:
                continue
            factors = [u for u, k in um for _ in range(k)]
            zvar = self.fresh.var("·zz", Sort.E)
            bind = {}
            bind[factors[0]] = (
                normalize(mk_app(MUL, (val, mk_app(INV, (zvar,)))))
                if len(factors) > 1
                else val
            )
            if len(factors) > 1:
                bind[factors[1]] = zvar
            sigma = sigma.compose(Subst.of(bind))
        sigma = sigma.restrict(lambda v: not v.name.startswith("·Z"))
        return self._finish(child, sigma)

    # --- adversarial K goals ------------------------------------------------------------

    def _solve_k(self, sys, goal, nid, pidx, t) -> list[ConstraintSystem]:
        ancestry = sys.ancestry(goal.gid)
        # inverses are free adversary steps, so a derivation of K(t) that
        # needs an earlier K(t) or K(inverse of t) is never minimal
        tk = _abs_key(t)
        if any(tk == _abs_key(a) for a in ancestry):
            return []
        if _k_trivial(t):
            child = self._child(sys, goal)
            child.ksolutions.append(KSolutionRecord(nid, pidx, t, "const"))
            done = self._finish(child)
            return [done] if done is not None else []
        if not isinstance(t, Var) and t in sys.leaked_terms_before(nid):
            child = self._child(sys, goal)
            child.ksolutions.append(KSolutionRecord(nid, pidx, t, "derive"))
            done = self._finish(child)
            return [done] if done is not None else []
        if isinstance(t, App) and t.sym == MU:
            return self._c_mu(sys, goal, nid, pidx, t, ancestry)
        if isinstance(t, Var) and sort_leq(t.sort, Sort.E):
            return self._c_vark(sys, goal, nid, pidx, t, ancestry)
        if _dh_sorted(t):
            return self._c_premk(sys, goal, nid, pidx, t, ancestry)
        return self._k_msg(sys, goal, nid, pidx, t, ancestry)

    def _k_msg(self, sys, goal, nid, pidx, t, ancestry) -> list[ConstraintSystem]:
        """Non-DH adversary knowledge: receive a reachable subterm of some
        output, or construct with a public constructor."""
        children = []
        anc = ancestry + (t,)
        for ref in out_sources(sys, self.proto, lambda s: s.sort == t.sort or True):
            if _dh_sorted(ref.term) and not _dh_sorted(t):
                continue
            child = self._child(sys, goal)
            try:
                mref = _materialize_source(child, self.proto, ref, nid)
            except Contradiction:
                continue
            child.add_goal("eq", (t, mref.term))
            for key in mref.keys:
                kg = child.add_goal(
                    "premise", _mk_k_need(child, key, nid), ancestry=anc
                )
            child.ksolutions.append(
                KSolutionRecord(
                    nid, pidx, t, "recv",
                    ((mref.node, mref.cidx, mref.path),),
                )
            )
            done = self._finish(child)
            if done is not None:
                children.append(done)
        if isinstance(t, App) and t.sym in (PAIR, SENC):
            child = self._child(sys, goal)
            subgoals = []
            for a in t.args:
                subgoals.append(
                    child.add_goal("premise", _mk_k_need(child, a, nid), ancestry=anc)
                )
            child.ksolutions.append(
                KSolutionRecord(nid, pidx, t, "combine-user")
            )
            done = self._finish(child)
            if done is not None:
                children.append(done)
        if isinstance(t, (Name,)) and t.sort == Sort.FRESH:
            # adversary-generated fresh value
            child = self._child(sys, goal)
            rule = next(r for r in md_dh_rules() if r.name == "fresh_adv")
            inst = rule.apply(Subst.of({Var("n", Sort.FRESH): t}))
            node = child.new_node(inst, rename=False)
            _register_node(child, node)
            child.add_order(node.nid, nid)
            child.ksolutions.append(KSolutionRecord(nid, pidx, t, "fresh"))
            done = self._finish(child)
            if done is not None:
                children.append(done)
        if isinstance(t, Var) and t.sort in (Sort.MSG, Sort.PUBLIC):
            # instantiate a variable the adversary freely chooses
            child = self._child(sys, goal)
            pub = self.fresh.name("adv", Sort.PUBLIC)
            done = self._finish(child, Subst.of({t: pub}))
            if done is not None:
                child2 = done
                child2.ksolutions.append(KSolutionRecord(nid, pidx, pub, "const"))
                children.append(child2)
        return children

    def _c_mu(self, sys, goal, nid, pidx, t, ancestry) -> list[ConstraintSystem]:
        children = []
        anc = ancestry + (t,)
        # (i) derive the argument, then hash it
        child = self._child(sys, goal)
        rule = next(r for r in md_dh_rules() if r.name == "mu")
        inst = rule.apply(Subst.of({Var("t", Sort.G): t.args[0]}))
        node = child.new_node(inst, rename=False)
        _register_node(child, node)
        for gg in list(child.goals.values()):
            if gg.kind == "premise" and gg.data[0] == node.nid:
                child._k_ancestry[gg.gid] = anc
        child.add_order(node.nid, nid)
        child.ksolutions.append(
            KSolutionRecord(nid, pidx, t, "mu", ((node.nid, 0, ()),))
        )
        done = self._finish(child)
        if done is not None:
            children.append(done)
        # (ii) receive the hash itself from an output
        for ref in out_sources(sys, self.proto,
                               lambda s: isinstance(s, App) and s.sym == MU):
            child = self._child(sys, goal)
            try:
                mref = _materialize_source(child, self.proto, ref, nid)
            except Contradiction:
                continue
            child.add_goal("eq", (t.args[0], mref.term.args[0]))
            for key in mref.keys:
                child.add_goal("premise", _mk_k_need(child, key, nid), ancestry=anc)
            child.ksolutions.append(
                KSolutionRecord(nid, pidx, t, "recv",
                                ((mref.node, mref.cidx, mref.path),))
            )
            done = self._finish(child)
            if done is not None:
                children.append(done)
        return children

    def _c_vark(self, sys, goal, nid, pidx, v, ancestry) -> list[ConstraintSystem]:
        children = []
        anc = ancestry + (v,)
        cases: list[tuple[str, Optional[Subst], Optional[Rule]]] = []
        rules = {r.name: r for r in md_dh_rules()}
        if v.sort != Sort.FRE:
            cases.append(("zero", Subst.of({v: ZERO}), rules["zero"]))
            cases.append(("one", Subst.of({v: ONE}), rules["one"]))
            fr = self.fresh.name("fe", Sort.FRE)
            cases.append(("fresh", Subst.of({v: fr}), None))
        for label, s, const_rule in cases:
            child = self._child(sys, goal)
            if label == "fresh":
                rule = rules["FrE"]
                inst = rule.apply(Subst.of({Var("f", Sort.FRE): s.get(v)}))
                node = child.new_node(inst, rename=False)
                _register_node(child, node)
                child.add_order(node.nid, nid)
                child.ksolutions.append(
                    KSolutionRecord(nid, pidx, s.get(v), "fresh")
                )
            else:
                node = child.new_node(const_rule, rename=False)
                _register_node(child, node)
                child.add_order(node.nid, nid)
                child.ksolutions.append(
                    KSolutionRecord(nid, pidx, s.get(v), "const")
                )
            done = self._finish(child, s)
            if done is not None:
                children.append(done)
        # unify with an E-sorted output root
        def unifiable(x, y):
            return has_unifier(UnificationProblem(((x, y),)), self.fresh)

        for ref in out_sources(sys, self.proto, lambda s: sort_leq(s.sort, Sort.E)):
            try:
                roots = root_terms(ref.term)
            except Exception:
                continue
            if not any(unifiable(v, r) for r in roots):
                continue
            base = self._child(sys, goal)
            try:
                mref = _materialize_source(base, self.proto, ref, nid)
            except Contradiction:
                continue
            for r in root_terms(mref.term):
                if not unifiable(v, r):
                    continue
                child = base.clone()
                child.add_goal("eq", (v, r))
                for key in mref.keys:
                    child.add_goal(
                        "premise", _mk_k_need(child, key, nid), ancestry=anc
                    )
                child.ksolutions.append(
                    KSolutionRecord(
                        nid, pidx, v, "recv",
                        ((mref.node, mref.cidx, mref.path),),
                    )
                )
                done = self._finish(child)
                if done is not None:
                    children.append(done)
        return children

    # --- C_PremK ---------------------------------------------------------------------

    def _c_premk(self, sys, goal, nid, pidx, t, ancestry) -> list[ConstraintSystem]:
        anc = ancestry + (t,)
        if self._k_refuted(sys, t, nid):
            return []  # memoized refutation: K(t) has no model here
        verdict = no_canc_term(t)
        assumptions = verdict.pairs if not verdict.holds else ()
        rts = root_terms(t)
        if len(rts) > 6:
            self.bound_hits += 1
            sys.diagnostics.append(f"K target with {len(rts)} roots exceeds bound")
            return []
        base_leaked = sys.leaked_terms_before(nid)
        # exponents to classify: E variables and hash subterms of t; probe
        # each once, then split only over the ones that can actually leak
        ve = _classifiable_exponents(t) - base_leaked
        leakable = sorted(
            (e for e in ve if self._probe_leakable(sys, e, nid)), key=term_key
        )
        never = ve - set(leakable)
        children = []
        for leak_choice in _subsets(leakable):
            leak_set = base_leaked | set(leak_choice)
            secrets = (ve - set(leak_choice)) | never
            # candidate sources per root under this leak hypothesis
            inds = {r: indicator(r, leak_set) for r in rts}
            needed = [r for r in rts if not is_trivial_indicator(inds[r])]
            per_root: list[list[SourceRef]] = []
            ok = True
            for r in needed:
                cands = []
                for ref in out_sources(sys, self.proto,
                                       lambda s: _dh_sorted(s) and sort_leq(s.sort, t.sort if sort_leq(t.sort, Sort.G) else Sort.E)):
                    if self._indicator_compatible(inds[r], ref.term, leak_set):
                        cands.append(ref)
                if not cands:
                    ok = False
                    break
                per_root.append(cands)
            if not ok:
                continue
            if not needed:
                # everything constructible from the leaked set
                child = self._child(sys, goal)
                for e in leak_choice:
                    self._spawn_leak_goal(child, e, nid, anc)
                child.secret |= secrets
                child.ksolutions.append(
                    KSolutionRecord(nid, pidx, t, "derive")
                )
                done = self._finish(child)
                if done is not None:
                    children.append(done)
                continue
            seen_picks: set = set()
            n_picks = 0
            for picks in itertools.product(*per_root):
                n_picks += 1
                if n_picks > 256:
                    self.bound_hits += 1
                    sys.diagnostics.append("source combination bound exceeded")
                    break
                # skip permutations of identical source selections
                pick_key = tuple(
                    sorted(
                        (p.rule_name, -1 if p.node is None else p.node,
                         p.cidx, p.path)
                        for p in picks
                    )
                )
                if (pick_key, tuple(leak_choice)) in seen_picks:
                    continue
                seen_picks.add((pick_key, tuple(leak_choice)))
                # pre-test: some pairing of indicators must unify before any
                # child system is built (most tuples die right here)
                pre_inds = {r: inds[r] for r in needed}
                pre_probs = self._eqk_pairings(
                    needed, pre_inds, [p.term for p in picks]
                )
                if not any(
                    self._has_unifier(prob) for prob in pre_probs
                ):
                    continue
                base = self._child(sys, goal)
                try:
                    mpicks = []
                    seen_new: dict[tuple, SourceRef] = {}
                    for ref in picks:
                        key = (ref.rule_name, ref.node, ref.cidx, ref.path)
                        if ref.node is None and key in seen_new:
                            mpicks.append(seen_new[key])
                            continue
                        m = _materialize_source(base, self.proto, ref, nid)
                        mpicks.append(m)
                        if ref.node is None:
                            seen_new[key] = m
                except Contradiction:
                    continue
                # classify the exponents of the chosen sources as well
                ve2 = set()
                for m in mpicks:
                    ve2 |= _classifiable_exponents(m.term)
                ve2 -= leak_set | secrets | base_leaked
                leakable2 = sorted(
                    (e for e in ve2 if self._probe_leakable(sys, e, nid)),
                    key=term_key,
                )
                never2 = ve2 - set(leakable2)
                for choice2 in _subsets(leakable2):
                    child = base.clone()
                    for e in leak_choice:
                        self._spawn_leak_goal(child, e, nid, anc)
                    for e in choice2:
                        self._spawn_leak_goal(child, e, nid, anc)
                    child.secret |= secrets | (set(ve2) - set(choice2)) | never2
                    child.nocanc_assumptions |= set(assumptions)
                    child.add_goal(
                        "eqk",
                        (
                            t,
                            tuple(
                                (m.term, m.node, m.cidx, m.path, m.keys)
                                for m in mpicks
                            ),
                            frozenset(leak_set | set(choice2)),
                            nid,
                            pidx,
                        ),
                        ancestry=anc,
                    )
                    done = self._finish(child)
                    if done is not None:
                        children.append(done)
        return children

    def _has_unifier(self, prob: UnificationProblem) -> bool:
        return has_unifier(prob, self.fresh)

    def _spawn_leak_goal(self, child, e, before_nid, ancestry):
        """K(e)@j_e with j_e < i, registering e in the leaked ledger."""
        e = normalize(e)
        rules = {r.name: r for r in md_dh_rules()}
        send = rules["send"]
        inst = send.apply(Subst.of({Var("m", Sort.MSG): e}))
        node = child.new_node(inst, rename=False)
        child.add_order(node.nid, before_nid)
        _register_node(child, node)
        for gg in list(child.goals.values()):
            if gg.kind == "premise" and gg.data[0] == node.nid:
                child._k_ancestry[gg.gid] = ancestry

    def _adversary_context_key(self, sys: ConstraintSystem, t: Term) -> str:
        """Canonical rendering of everything a pure K(t) probe can depend
        on: the target, protocol and freshness node instances, ledgers."""
        proto_names = {r.name for r in self.proto.rules}
        names: dict[str, str] = {}

        def tv(x: Term) -> str:
            if isinstance(x, Var):
                if x.name not in names:
                    names[x.name] = f"v{len(names)}"
                return f"{names[x.name]}:{x.sort.value}"
            if isinstance(x, Name):
                if x.name not in names:
                    names[x.name] = f"n{len(names)}"
                return f"~{names[x.name]}:{x.sort.value}"
            return x.sym.name + "(" + ",".join(tv(a) for a in x.args) + ")"

        def rl(r) -> str:
            return r.name + "|".join(
                f.name + "(" + ",".join(tv(a) for a in f.args) + ")"
                for f in r.facts()
            )

        parts = [tv(normalize(t))]
        keep = [
            n.rule
            for n in sys.nodes.values()
            if n.rule.name in proto_names or n.rule.name == FRESH_RULE_NAME
        ]
        keep.sort(key=lambda r: (r.name, str(r)))
        parts.extend(rl(r) for r in keep)
        parts.append("L:" + ",".join(sorted(tv(normalize(e)) for e, _ in sys.leaked)))
        parts.append("S:" + ",".join(sorted(tv(normalize(e)) for e in sys.secret)))
        return "§".join(parts)

    def _k_refuted(self, sys: ConstraintSystem, t: Term, nid: int) -> bool:
        """Bounded refutation of K(t) on a stripped clone (the target goal
        alone, same nodes and ledgers).  Dropping the other goals only makes
        the probe more satisfiable, so a fully closed probe soundly closes
        the calling branch.  Results are memoized per adversary context."""
        if self._probe_depth >= 4:
            return False
        key = ("refute", self._adversary_context_key(sys, t))
        hit = self._probe_cache.get(key)
        if hit is not None:
            return hit
        probe = sys.clone()
        probe.depth = 0
        probe.goals = {}
        probe._k_ancestry = {}
        rules = {r.name: r for r in md_dh_rules()}
        inst = rules["send"].apply(Subst.of({Var("m", Sort.MSG): t}))
        node = probe.new_node(inst, rename=False)
        _register_node(probe, node)
        self._probe_cache[key] = False  # optimistic while in progress
        self._probe_depth += 1
        saved_bound_hits = self.bound_hits
        try:
            try:
                probe.saturate()
                self._propagate(probe)
            except Contradiction:
                self._probe_cache[key] = True
                return True
            res = self._bounded_search(
                probe, budget=self.refute_budget, depth=12
            )
            closed = res == "closed" and self.bound_hits == saved_bound_hits
            self._probe_cache[key] = closed
            return closed
        finally:
            self._probe_depth -= 1
            self.bound_hits = saved_bound_hits

    def _probe_leakable(self, sys, e, nid) -> bool:
        """Bounded eager attempt at K(e): when every branch closes quickly,
        the exponent cannot be leaked and the case split is pruned."""
        e = normalize(e)
        key = _canonical_key(e, sys)
        if key in self._probe_cache:
            return self._probe_cache[key]
        if self._probe_depth >= 4:
            return True  # inconclusive: keep both branches
        # optimistic while in progress, so mutually recursive probes terminate
        self._probe_cache[key] = True
        self._probe_depth += 1
        saved_bound_hits = self.bound_hits
        try:
            probe = sys.clone()
            probe.depth = 0
            self._spawn_leak_goal(probe, e, nid, ())
            try:
                probe.saturate()
                self._propagate(probe)
            except Contradiction:
                self._probe_cache[key] = False
                return False
            res = self._bounded_search(probe, budget=self.probe_budget, depth=6)
            self._probe_cache[key] = res != "closed"
            return self._probe_cache[key]
        finally:
            self._probe_depth -= 1
            self.bound_hits = saved_bound_hits

    def _bounded_search(self, sys, budget: int, depth: int) -> str:
        """Returns 'closed' when all branches die within the budget,
        'open' otherwise (inconclusive or a solved system)."""
        stack = [sys]
        used = 0
        while stack:
            cur = stack.pop()
            if cur.is_solved():
                return "open"
            used += 1
            if used > budget or cur.depth > depth:
                return "open"
            goal = self.pick_goal(cur)
            if goal is None:
                return "open"
            try:
                kids = self.expand(cur, goal)
            except Contradiction:
                continue
            if len(kids) > 1:
                for k in kids:
                    k.depth = cur.depth + 1
            stack.extend(kids)
        return "closed"

    def _indicator_compatible(self, ind: Term, source_term: Term,
                              leak_set) -> bool:
        if not _dh_sorted(source_term):
            return False
        try:
            roots = root_terms(source_term)
        except Exception:
            return False
        for r in roots:
            try:
                rind = indicator(r, leak_set)
            except Exception:
                continue
            if is_trivial_indicator(rind):
                continue
            if rind.sort != ind.sort and not (
                sort_leq(rind.sort, Sort.G) and sort_leq(ind.sort, Sort.G)
            ) and not (sort_leq(rind.sort, Sort.E) and sort_leq(ind.sort, Sort.E)):
                continue
            # sum-splitting cannot rescue a single failed root equation
            # (the split variable is no more general than the original)
            if has_unifier(UnificationProblem(((ind, rind),)), self.fresh):
                return True
        return False

    # --- C_EqSimpK -------------------------------------------------------------------

    def _solve_eqk(self, sys, goal: Goal) -> list[ConstraintSystem]:
        t, sources, leak_set, nid, pidx = goal.data
        anc = sys.ancestry(goal.gid)
        leak_terms = set(leak_set)
        secrets = set(sys.secret)
        rts = root_terms(t)
        inds = {r: indicator(r, leak_terms) for r in rts}
        needed = [r for r in rts if not is_trivial_indicator(inds[r])]
        src_terms = [s[0] for s in sources]
        children = []
        # pair each needed root with the roots of its chosen source
        # (with sum-splitting across repeated picks)
        pairings = self._eqk_pairings(needed, inds, src_terms)
        for prob in pairings:
            try:
                sigmas = unify_simp(prob, self.fresh)
            except NoUnifier:
                continue
            except MGUCapExceeded as e:
                sys.diagnostics.append(f"MGU cap exceeded in K-combination")
                sigmas = e.partial
            for sigma in sigmas:
                comp = prob.presubst.compose(sigma)
                comp = comp.restrict(lambda v: not v.name.startswith("·f"))
                evars = sorted(
                    {
                        v
                        for st in [t] + src_terms
                        for v in variables(st)
                        if sort_leq(v.sort, Sort.E) and v.sort != Sort.FRE
                    },
                    key=term_key,
                )
                gen = generalize_H(
                    comp, t, src_terms, secrets, evars, self.fresh
                )
                child = self._child(sys, goal)
                st = Subst.of(dict(gen.subst.bindings))
                gt = normalize(apply_subst(st, t))
                gsrc = [normalize(apply_subst(st, s)) for s in src_terms]
                # the adversary combination: sum_i X_i * h_i + X_{n+1}
                xs = [self.fresh.var("·X", Sort.VARE) for _ in gsrc]
                xext = self.fresh.var("·X", Sort.VARE)
                parts = []
                g_sorted = sort_leq(t.sort, Sort.G)
                for x, hsrc in zip(xs, gsrc):
                    he = _exponent_of(hsrc)
                    parts.append(mk_app(MUL, (x, he)) if he != ONE else x)
                parts.append(xext)
                # secret monomials of the sources may be cancelled via W terms
                sh = _secret_monos_of(gsrc, secrets, gt)
                ws = [self.fresh.var("·W", Sort.VARE) for _ in sh]
                for w, e in zip(ws, sh):
                    parts.append(mk_app(MUL, (w, e)))
                rhs = normalize(mk_app(ADD, parts) if len(parts) > 1 else parts[0])
                lhs = _exponent_of(gt)
                unknowns = tuple(gen.fresh_unknowns) + tuple(xs) + (xext,) + tuple(ws)
                child.add_goal(
                    "dhsolve",
                    (
                        normalize(lhs),
                        rhs,
                        unknowns,
                        tuple(sorted(secrets, key=term_key)),
                        tuple(sorted(leak_terms, key=term_key)),
                        True,
                    ),
                    ancestry=anc,
                )
                # K goals for the combination exponents
                for x in xs + [xext]:
                    self._spawn_k_goal(child, x, nid, anc)
                if ws:
                    wterm = normalize(
                        mk_app(
                            EXP,
                            (
                                G,
                                mk_app(
                                    ADD,
                                    tuple(
                                        mk_app(MUL, (w, e))
                                        for w, e in zip(ws, sh)
                                    ),
                                )
                                if len(ws) > 1
                                else mk_app(MUL, (ws[0], sh[0])),
                            ),
                        )
                    )
                    self._spawn_k_goal(child, wterm, nid, anc)
                child.ksolutions.append(
                    KSolutionRecord(
                        nid,
                        pidx,
                        t,
                        "combine",
                        tuple((s[1], s[2], s[3]) for s in sources),
                        tuple(xs),
                        (xext,) + tuple(ws),
                    )
                )
                for s in sources:
                    for keyterm in s[4]:
                        child.add_goal(
                            "premise", _mk_k_need(child, keyterm, nid), ancestry=anc
                        )
                done = self._finish(child, st)
                if done is not None:
                    children.append(done)
        return children

    def _eqk_pairings(self, needed, inds, src_terms) -> list[UnificationProblem]:
        """Indicator equations per root; when two roots share a source, the
        source root's E variable is split into a sum."""
        if not needed:
            return [UnificationProblem(())]
        # each needed root i is paired against its own source term i
        out: list[UnificationProblem] = []
        choices: list[list[Term]] = []
        for i, r in enumerate(needed):
            src = src_terms[i] if i < len(src_terms) else src_terms[-1]
            roots = root_terms(src)
            choices.append(roots)
        n_combo = 0
        for combo in itertools.product(*choices):
            n_combo += 1
            if n_combo > 128:
                self.bound_hits += 1
                break
            # repeated (source position, root) pairs need sum-splitting
            groups: dict[Term, list[int]] = {}
            for i, r in enumerate(combo):
                groups.setdefault(r, []).append(i)
            split: dict[Var, Term] = {}
            occ: dict[int, Subst] = {}
            ok = True
            for r, poss in groups.items():
                if len(poss) < 2:
                    continue
                evars = sorted(
                    {v for v in variables(r) if v.sort in (Sort.E, Sort.VARE)},
                    key=term_key,
                )
                if not evars:
                    continue
                e = evars[0]
                fs = [self.fresh.var("·f", Sort.E) for _ in poss]
                split[e] = mk_app(ADD, fs)
                for k, pos in enumerate(poss):
                    occ[pos] = Subst.of({e: fs[k]})
            try:
                presubst = Subst.of(split)
            except Exception:
                continue
            eqs = []
            for i, r in enumerate(combo):
                s = occ.get(i)
                rr = r
                if s is not None:
                    rr = normalize(apply_subst(s, rr))
                elif split:
                    rr = normalize(apply_subst(presubst, rr))
                try:
                    rts = root_terms(rr)
                except Exception:
                    ok = False
                    break
                if len(rts) != 1:
                    ok = False
                    break
                # unify the indicators, not the roots themselves
                eqs.append((inds[needed[i]], rr))
            if ok:
                out.append(UnificationProblem(tuple(eqs), presubst))
        return out

    def _spawn_k_goal(self, child, term: Term, before_nid, ancestry):
        rules = {r.name: r for r in md_dh_rules()}
        send = rules["send"]
        inst = send.apply(Subst.of({Var("m", Sort.MSG): term}))
        node = child.new_node(inst, rename=False)
        child.add_order(node.nid, before_nid)
        _register_node(child, node)
        for gg in list(child.goals.values()):
            if gg.kind == "premise" and gg.data[0] == node.nid:
                child._k_ancestry[gg.gid] = ancestry

    # --- search ------------------------------------------------------------------------

    def solve(self) -> Verdict:
        t0 = time.time()
        systems = init_system(self.proto, self.lemma, self.fresh)
        stack = [(s, []) for s in reversed(systems)]
        open_hit = 0
        while stack:
            sys, path = stack.pop()
            self.steps += 1
            if self.steps > self.step_limit:
                return Verdict(
                    "bound_exceeded", self.lemma.name, self.lemma.mode,
                    tuple(sorted(self.assumptions, key=str)),
                    open_systems=len(stack) + 1, steps=self.steps,
                    elapsed=time.time() - t0,
                )
            if sys.is_solved():
                verdict = self._try_extract(sys, path, t0)
                if verdict is not None:
                    return verdict
                self.extraction_failures += 1
                continue
            if sys.depth > self.depth_bound:
                open_hit += 1
                continue
            goal = self.pick_goal(sys)
            hint = self._peek_hint()
            hinted = hint is not None and self._hint_matches(sys, goal, hint)
            if hinted:
                self._hint_idx += 1
            try:
                kids = self.expand(sys, goal)
            except Contradiction:
                continue
            if len(kids) > 1:
                for k in kids:
                    k.depth = sys.depth + 1
            # transposition pruning: a system already reached at a depth no
            # worse than this one is being handled elsewhere
            pruned = []
            for ci, k in enumerate(kids):
                sig = system_signature(k)
                prev = self._seen.get(sig)
                if prev is not None and prev <= k.depth:
                    continue
                self._seen[sig] = k.depth
                pruned.append((ci, k))
            self.assumptions |= sys.nocanc_assumptions
            case_order = pruned
            if hinted and hint.get("case") is not None:
                ci = hint["case"]
                case_order.sort(key=lambda p: (p[0] != ci,))
            for ci, k in reversed(case_order):
                self.assumptions |= k.nocanc_assumptions
                stack.append(
                    (k, path + [
                        {
                            "rule": self.rule_name_for(sys, goal),
                            "target": self.describe_goal(sys, goal),
                            "case": ci,
                        }
                    ])
                )
        status = (
            "proved"
            if open_hit == 0 and self.extraction_failures == 0
            and self.bound_hits == 0
            else "bound_exceeded"
        )
        return Verdict(
            status, self.lemma.name, self.lemma.mode,
            tuple(sorted(self.assumptions, key=str)) if status == "proved" else (),
            open_systems=open_hit + self.extraction_failures + self.bound_hits,
            steps=self.steps, elapsed=time.time() - t0,
        )

    def _try_extract(self, sys, path, t0) -> Optional[Verdict]:
        from .depgraph import extract_model, trace_of, validate
        from .model import trace_admissible, trace_satisfies_lemma

        try:
            graph = extract_model(sys, self.proto)
        except Exception as e:
            sys.diagnostics.append(f"extraction failed: {e}")
            return None
        issues = validate(graph)
        if issues:
            sys.diagnostics.append(f"graph invalid: {issues}")
            return None
        trace = trace_of(graph)
        if not trace_admissible(trace, self.proto.restrictions):
            return None
        if not trace_satisfies_lemma(trace, _solver_lemma(self.lemma)):
            return None
        return Verdict(
            "attack", self.lemma.name, self.lemma.mode, (),
            graph=graph, trace=tuple(trace), steps=self.steps,
            elapsed=time.time() - t0, script=tuple(path),
        )


def _solver_lemma(lemma: Lemma) -> Lemma:
    """The formula a found model must satisfy: the lemma itself for
    exists-trace, its negation for all-traces."""
    if lemma.mode == "exists_trace":
        return lemma
    return Lemma(lemma.name, lemma.mode, _nnf(lemma.formula, True))


# --- small helpers ------------------------------------------------------------------


def _dh_sorted(t: Term) -> bool:
    return sort_leq(t.sort, Sort.G) or sort_leq(t.sort, Sort.E)


def _has_dh_subterm(t: Term) -> bool:
    from .terms import subterms

    return any(_dh_sorted(s) for s in subterms(t))


def _k_trivial(t: Term) -> bool:
    t = normalize(t)
    if t in (ZERO, ONE, EG, G):
        return True
    if isinstance(t, Name) and t.sort in (Sort.PUBLIC, Sort.PUBG):
        return True
    return False


def _comb_unify(a: Term, b: Term):
    """Syntactic unification treating DH-sorted subterms as opaque; returns
    (msg bindings, dh equation pairs) or None."""
    msg_bind: dict[Var, Term] = {}
    dh_pairs: list[tuple[Term, Term]] = []

    def walk(x: Term, y: Term) -> bool:
        x = _resolve(x)
        y = _resolve(y)
        if _dh_sorted(x) and _dh_sorted(y):
            if x != y:
                dh_pairs.append((x, y))
            return True
        if isinstance(x, Var) and x.sort == Sort.MSG:
            if x == y:
                return True
            if x in variables(y):
                return False
            msg_bind[x] = y
            return True
        if isinstance(y, Var) and y.sort == Sort.MSG:
            return walk(y, x)
        if isinstance(x, Var) or isinstance(y, Var):
            # sorted variable against a term: delegate to eq machinery
            if sort_leq(y.sort, x.sort) if isinstance(x, Var) else sort_leq(x.sort, y.sort):
                dh_pairs.append((x, y))
                return True
            return False
        if isinstance(x, Name) or isinstance(y, Name):
            return x == y
        if isinstance(x, App) and isinstance(y, App):
            if x.sym != y.sym or len(x.args) != len(y.args):
                return False
            return all(walk(p, q) for p, q in zip(x.args, y.args))
        return False

    def _resolve(t: Term) -> Term:
        while isinstance(t, Var) and t in msg_bind:
            t = msg_bind[t]
        return t

    if not walk(a, b):
        return None
    out = {}
    for v in msg_bind:
        img = msg_bind[v]
        for _ in range(len(msg_bind) + 1):
            nxt = apply_subst(Subst.of(msg_bind), img)
            if nxt == img:
                break
            img = nxt
        out[v] = img
    return out, dh_pairs


def _mk_k_need(child: ConstraintSystem, term: Term, before: int) -> tuple:
    """A K(t)@j goal realized as a send-node premise with j < before."""
    rules = {r.name: r for r in md_dh_rules()}
    send = rules["send"]
    inst = send.apply(Subst.of({Var("m", Sort.MSG): term}))
    node = child.new_node(inst, rename=False)
    child.add_order(node.nid, before)
    for f in node.rule.actions:
        if f.name == "K" and sort_leq(f.args[0].sort, Sort.E):
            child.leaked.add((normalize(f.args[0]), node.nid))
    return (node.nid, 0)


def _exp_atoms(t: Term) -> set[Term]:
    """All exponent atoms of a normalized DH term."""
    t = normalize(t)
    out: set[Term] = set()
    if sort_leq(t.sort, Sort.G):
        entries = [m for (_b, m), _n in gnf_of(t)]
    elif sort_leq(t.sort, Sort.E):
        entries = [m for m, _n in enf_of(t)]
    else:
        return out
    for m in entries:
        for a, _k in m:
            out.add(a)
    return out


def _classifiable_exponents(t: Term) -> set[Term]:
    """E variables and hash subterms appearing in t (candidates for the
    leaked/secret case split)."""
    out = set()
    for a in _exp_atoms(t):
        if isinstance(a, Var) and sort_leq(a.sort, Sort.E):
            out.add(a)
        elif isinstance(a, Name) and a.sort == Sort.FRE:
            out.add(a)
        elif isinstance(a, App) and a.sym == MU:
            out.add(a)
            for b in _exp_atoms(a.args[0]):
                if isinstance(b, (Var, Name)) and sort_leq(b.sort, Sort.E):
                    out.add(b)
                elif isinstance(b, App) and b.sym == MU:
                    out.add(b)
    return out


def _subsets(items: list):
    for r in range(len(items), -1, -1):
        for combo in itertools.combinations(items, r):
            yield combo


def _exponent_of(t: Term) -> Term:
    """The exponent expression of a G term (sum over factors); E terms are
    returned unchanged."""
    t = normalize(t)
    if sort_leq(t.sort, Sort.E):
        return t
    from .rewrite import term_of_mono

    parts = []
    for (base, m), n in gnf_of(t):
        if base != G:
            raise Contradiction(f"group base {base} is not the generator")
        unit = term_of_mono(m)
        if n < 0:
            unit = mk_app(NEG, (unit,))
        parts.extend([unit] * abs(n))
    if not parts:
        return ZERO
    return normalize(parts[0] if len(parts) == 1 else mk_app(ADD, parts))


def _secret_monos_of(terms: Iterable[Term], secrets: set[Term], t: Term) -> list[Term]:
    from .rewrite import term_of_mono

    secret_set = {normalize(x) for x in secrets}
    t_monos = set()
    for m in _monos_of(t):
        t_monos.add(m)
    out = []
    for h in terms:
        for m in _monos_of(h):
            atoms = _exp_atoms(m)
            if any(a in secret_set for a in atoms) and m not in t_monos and m not in out:
                out.append(m)
    return out


def _monos_of(t: Term) -> list[Term]:
    from .rewrite import term_of_mono

    t = normalize(t)
    if sort_leq(t.sort, Sort.G):
        return [term_of_mono(m) for (_b, m), _n in gnf_of(t)]
    if sort_leq(t.sort, Sort.E):
        return [term_of_mono(m) for m, _n in enf_of(t)]
    return []


def _matching_root(term: Term, root: Term) -> Term:
    for r in root_terms(term):
        if r == root:
            return r
    return root


def _canonical_key(t: Term, sys: ConstraintSystem) -> str:
    """Structure key with variables renamed by first occurrence; variables
    created by an existing freshness node are tagged, since their
    leakability differs from unconstrained ones."""
    fr_bound = set()
    for node in sys.nodes.values():
        if node.rule.name == FRESH_RULE_NAME:
            arg = node.rule.conclusions[0].args[0]
            if isinstance(arg, Var):
                fr_bound.add(arg)
    names: dict[str, str] = {}

    def go(x: Term) -> str:
        if isinstance(x, Var):
            if x.name not in names:
                names[x.name] = f"v{len(names)}"
            tag = "!fr" if x in fr_bound else ""
            return f"{names[x.name]}:{x.sort.value}{tag}"
        if isinstance(x, Name):
            return f"~{x.name}:{x.sort.value}"
        return x.sym.name + "(" + ",".join(go(a) for a in x.args) + ")"

    return go(normalize(t))


def _subst_weight(s: Subst) -> int:
    """Complexity of a unifier's images (atom bindings weigh least)."""
    from .terms import subterms

    w = 0
    for _, t in s.bindings:
        for x in subterms(t):
            w += 3 if isinstance(x, App) and x.sym.name in ("inv", "neg") else 1
    return w


def _abs_key(t: Term) -> str:
    """Ancestry key ignoring the free inverse operations."""
    t = normalize(t)
    if sort_leq(t.sort, Sort.G):
        from .terms import GINV

        u = normalize(mk_app(GINV, (t,)))
    elif sort_leq(t.sort, Sort.E):
        u = normalize(mk_app(NEG, (t,)))
    else:
        u = t
    return min(str(t), str(u))
