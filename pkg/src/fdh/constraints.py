"""Constraint systems for the backward search.

A system is one node of the proof search tree: node constraints (rule
instances at timepoints), edges, open goals, the timepoint order, the
leaked/secret ledgers and the non-cancellation assumption ledger.  Systems
are cloned before mutation; the fresh-name source is session-shared.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .model import Fact, Rule, fresh_rule, FRESH_RULE_NAME
from .rewrite import normalize
from .sorts import Sort, sort_leq
from .terms import (
    App,
    FreshSource,
    Name,
    Subst,
    Term,
    Var,
    apply_subst,
    variables,
)


class Contradiction(Exception):
    """Raised while transforming a system whose constraints became
    unsatisfiable; carries the reason for the closed branch."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class UnsupportedFormula(Exception):
    pass


@dataclass(frozen=True)
class Node:
    nid: int
    rule: Rule
    internal: bool = False

    def __str__(self):
        return f"#{self.nid}:{self.rule.name}"


@dataclass(frozen=True)
class Edge:
    src: tuple[int, int]  # (node, conclusion index)
    dst: tuple[int, int]  # (node, premise index)

    def __str__(self):
        return f"({self.src[0]},{self.src[1]}) -> ({self.dst[0]},{self.dst[1]})"


# goal kinds: premise | action | eq | dhsolve | eqk
@dataclass(frozen=True)
class Goal:
    gid: int
    kind: str
    data: tuple

    def __str__(self):
        return f"g{self.gid}:{self.kind}{tuple(str(x) for x in self.data)}"


@dataclass(frozen=True)
class Filter:
    """A trace must not contain an instance of this action pattern; the
    wildcard variables are existential."""

    fact: Fact
    wildcards: tuple[Var, ...]

    def __str__(self):
        return f"never {self.fact}"


@dataclass
class KSolutionRecord:
    """How a solved K premise is realized; used for graph extraction."""

    node: int
    pidx: int
    term: Term
    method: str  # "recv" | "combine" | "derive" | "mu" | "const" | "fresh"
    sources: tuple = ()  # ((node id, conc index, path), ...) path in {fst, snd, sdec}
    exponents: tuple = ()  # per-source exponent terms (group combination)
    extra: tuple = ()  # extra multiplicand exponent terms g^e

    def map_terms(self, f):
        return KSolutionRecord(
            self.node,
            self.pidx,
            f(self.term),
            self.method,
            self.sources,
            tuple(f(t) for t in self.exponents),
            tuple(f(t) for t in self.extra),
        )


class ConstraintSystem:
    def __init__(self, fresh: FreshSource):
        self.fresh = fresh
        self.nodes: dict[int, Node] = {}
        self.edges: set[Edge] = set()
        self.order: set[tuple[int, int]] = set()  # strict i < j
        self.goals: dict[int, Goal] = {}
        self.tp_bindings: dict[Var, int] = {}
        self.pending_time: list[tuple[str, Term, Term]] = []  # (less/eq, a, b)
        self.filters: list[Filter] = []
        self.diseqs: set[tuple[Term, Term]] = set()
        self.leaked: set[tuple[Term, int]] = set()
        self.secret: set[Term] = set()
        self.nocanc_assumptions: set[tuple[Term, Term]] = set()
        self.ksolutions: list[KSolutionRecord] = []
        self.history: list[dict] = []
        self.diagnostics: list[str] = []
        self.subst = Subst()
        self.depth = 0
        self._gid = itertools.count(1)
        self._k_ancestry: dict[int, tuple[Term, ...]] = {}

    # --- bookkeeping ------------------------------------------------------

    def clone(self) -> "ConstraintSystem":
        out = ConstraintSystem(self.fresh)
        out.nodes = dict(self.nodes)
        out.edges = set(self.edges)
        out.order = set(self.order)
        out.goals = dict(self.goals)
        out.tp_bindings = dict(self.tp_bindings)
        out.pending_time = list(self.pending_time)
        out.filters = list(self.filters)
        out.diseqs = set(self.diseqs)
        out.leaked = set(self.leaked)
        out.secret = set(self.secret)
        out.nocanc_assumptions = set(self.nocanc_assumptions)
        out.ksolutions = list(self.ksolutions)
        out.history = list(self.history)
        out.diagnostics = list(self.diagnostics)
        out.subst = self.subst
        out.depth = self.depth
        out._gid = itertools.count(next(self._gid))
        out._k_ancestry = dict(self._k_ancestry)
        return out

    def new_node(self, rule: Rule, internal: bool = False,
                 rename: bool = True) -> Node:
        nid = self.fresh._next()
        inst = rule
        if rename:
            inst, _ = rule.rename_apart(self.fresh)
        node = Node(nid, inst, internal)
        self.nodes[nid] = node
        return node

    def add_goal(self, kind: str, data: tuple, ancestry: tuple = ()) -> Goal:
        g = Goal(next(self._gid), kind, data)
        self.goals[g.gid] = g
        if ancestry:
            self._k_ancestry[g.gid] = ancestry
        return g

    def ancestry(self, gid: int) -> tuple[Term, ...]:
        return self._k_ancestry.get(gid, ())

    def add_order(self, a: int, b: int):
        if a == b:
            raise Contradiction(f"timepoint cycle at {a}")
        self.order.add((a, b))

    def time_less(self, a: int, b: int) -> bool:
        seen = set()
        stack = [a]
        while stack:
            x = stack.pop()
            for (p, q) in self.order:
                if p == x and q not in seen:
                    if q == b:
                        return True
                    seen.add(q)
                    stack.append(q)
        return False

    def check_order_acyclic(self):
        # DFS cycle detection on the order relation
        adj: dict[int, list[int]] = {}
        for a, b in self.order:
            adj.setdefault(a, []).append(b)
        color: dict[int, int] = {}

        def visit(x):
            color[x] = 1
            for y in adj.get(x, []):
                c = color.get(y)
                if c == 1:
                    raise Contradiction("timepoint order has a cycle")
                if c is None:
                    visit(y)
            color[x] = 2

        for x in list(adj):
            if color.get(x) is None:
                visit(x)

    def k_action_entries(self):
        """Leaked-set extraction interface (exponent, timepoint)."""
        return list(self.leaked)

    def leaked_terms_before(self, i: int) -> set[Term]:
        # one backward reachability pass instead of per-entry queries
        preds: set[int] = set()
        radj: dict[int, list[int]] = {}
        for a, b in self.order:
            radj.setdefault(b, []).append(a)
        stack = [i]
        while stack:
            x = stack.pop()
            for a in radj.get(x, ()):
                if a not in preds:
                    preds.add(a)
                    stack.append(a)
        return {normalize(e) for e, j in self.leaked if j in preds and j != i}

    def all_leaked_terms(self) -> set[Term]:
        return {normalize(e) for e, _ in self.leaked}

    # --- substitution and saturation ---------------------------------------

    def apply(self, s: Subst):
        """Apply a substitution everywhere, then re-check structural
        invariants (may raise Contradiction)."""
        if not s.bindings:
            self.saturate()
            return
        self.subst = self.subst.compose(s)

        def f(t: Term) -> Term:
            return normalize(apply_subst(s, t))

        self.nodes = {
            nid: Node(n.nid, n.rule.apply(s), n.internal)
            for nid, n in self.nodes.items()
        }
        self.goals = {
            gid: Goal(g.gid, g.kind, tuple(_map_goal_datum(d, f) for d in g.data))
            for gid, g in self.goals.items()
        }
        self.filters = [
            Filter(flt.fact.map_args(f), flt.wildcards) for flt in self.filters
        ]
        self.diseqs = {(f(a), f(b)) for a, b in self.diseqs}
        self.leaked = {(f(e), j) for e, j in self.leaked}
        self.secret = {f(e) for e in self.secret}
        self.nocanc_assumptions = {
            (f(a), f(b)) for a, b in self.nocanc_assumptions
        }
        self.ksolutions = [r.map_terms(f) for r in self.ksolutions]
        self._k_ancestry = {
            gid: tuple(f(t) for t in ts) for gid, ts in self._k_ancestry.items()
        }
        self.saturate()

    def saturate(self):
        """Fixpoint of structural rules: fresh-source merging, linear-use
        merging, filter and disequality checks, ledger consistency, order
        acyclicity."""
        for _ in range(50):
            if not self._saturate_round():
                break
        self.check_order_acyclic()

    def _saturate_round(self) -> bool:
        changed = False
        changed |= self._merge_equal_fresh_nodes()
        changed |= self._enforce_linear_conclusions()
        self._check_filters()
        self._check_diseqs()
        self._check_ledgers()
        return changed

    def _merge_equal_fresh_nodes(self) -> bool:
        byname: dict[Term, int] = {}
        for nid, node in sorted(self.nodes.items()):
            if node.rule.name != FRESH_RULE_NAME:
                continue
            arg = normalize(node.rule.conclusions[0].args[0])
            if arg in byname and byname[arg] != nid:
                self._merge_nodes(byname[arg], nid)
                return True
            byname[arg] = nid
        return False

    def _enforce_linear_conclusions(self) -> bool:
        outs: dict[tuple[int, int], list[Edge]] = {}
        for e in self.edges:
            outs.setdefault(e.src, []).append(e)
        for (nid, cidx), es in outs.items():
            node = self.nodes.get(nid)
            if node is None or len(es) < 2:
                continue
            fact = node.rule.conclusions[cidx]
            if fact.persistent:
                continue
            # two consumers of a linear conclusion: the consumers must be the
            # same node (merge) or the branch is dead
            dsts = sorted({e.dst[0] for e in es})
            if len(dsts) == 1:
                if len({e.dst for e in es}) > 1:
                    raise Contradiction(
                        f"linear conclusion {fact} consumed twice by node {dsts[0]}"
                    )
                # duplicate edges to the same premise: dedupe
                keep = es[0]
                for e in es[1:]:
                    self.edges.discard(e)
                return True
            self._merge_nodes(dsts[0], dsts[1])
            return True
        return False

    def _merge_nodes(self, a: int, b: int):
        """Identify node constraints a and b (same rule instance)."""
        na, nb = self.nodes.get(a), self.nodes.get(b)
        if na is None or nb is None:
            return
        if na.rule.name != nb.rule.name:
            raise Contradiction(
                f"nodes {na} and {nb} must coincide but have different rules"
            )
        # unify the two instances fact-by-fact (syntactic/equational via the
        # solver's Eq goals would be overkill here: instances of the same
        # rule differ only in variable images, so match argumentwise)
        eqs: list[tuple[Term, Term]] = []
        for fa, fb in zip(
            list(na.rule.facts()), list(nb.rule.facts())
        ):
            if fa.name != fb.name or len(fa.args) != len(fb.args):
                raise Contradiction(f"rule instances diverge: {fa} vs {fb}")
            for x, y in zip(fa.args, fb.args):
                if normalize(x) != normalize(y):
                    eqs.append((x, y))
        # rewire b -> a
        del self.nodes[b]
        self.edges = {
            Edge(
                (a if e.src[0] == b else e.src[0], e.src[1]),
                (a if e.dst[0] == b else e.dst[0], e.dst[1]),
            )
            for e in self.edges
        }
        self.order = {
            (a if x == b else x, a if y == b else y) for x, y in self.order
        }
        if any(x == y for x, y in self.order):
            raise Contradiction("node merge created a timepoint cycle")
        self.tp_bindings = {
            v: (a if i == b else i) for v, i in self.tp_bindings.items()
        }
        self.leaked = {(e, a if j == b else j) for e, j in self.leaked}
        for rec in self.ksolutions:
            if rec.node == b:
                rec.node = a
            rec.sources = tuple(
                (a if s[0] == b else s[0],) + tuple(s[1:]) for s in rec.sources
            )
        self.goals = {
            gid: Goal(g.gid, g.kind, tuple(a if d == b else d for d in g.data))
            for gid, g in self.goals.items()
        }
        # the instances must now unify; emit equality goals for the solver
        for x, y in eqs:
            self.add_goal("eq", (x, y))

    def _check_filters(self):
        for flt in self.filters:
            patt = flt.fact.normalized()
            for node in self.nodes.values():
                for act in node.rule.actions:
                    if act.name != patt.name or len(act.args) != len(patt.args):
                        continue
                    got = act.normalized()
                    if _definite_match(patt, got, flt.wildcards):
                        raise Contradiction(
                            f"trace filter violated: {got} at {node}"
                        )

    def _check_diseqs(self):
        for a, b in self.diseqs:
            if normalize(a) == normalize(b):
                raise Contradiction(f"disequality violated: {a} = {b}")

    def _check_ledgers(self):
        leaked = self.all_leaked_terms()
        for s in self.secret:
            if normalize(s) in leaked:
                raise Contradiction(f"secret exponent {s} was leaked")

    # --- reporting -----------------------------------------------------------

    def is_solved(self) -> bool:
        return not self.goals

    def summary(self) -> dict:
        return {
            "nodes": {nid: str(n.rule) for nid, n in sorted(self.nodes.items())},
            "edges": sorted(str(e) for e in self.edges),
            "goals": {gid: str(g) for gid, g in sorted(self.goals.items())},
            "leaked": sorted(f"{t} @ {j}" for t, j in self.leaked),
            "secret": sorted(str(t) for t in self.secret),
            "nocanc_assumptions": sorted(
                f"({a}, {b})" for a, b in self.nocanc_assumptions
            ),
            "diagnostics": list(self.diagnostics),
        }


def system_signature(sys: ConstraintSystem) -> str:
    """Canonical content signature: node ids and variable names abstracted,
    so systems that differ only by renaming collide."""
    names: dict[str, str] = {}

    def tv(t: Term) -> str:
        if isinstance(t, Var):
            if t.name not in names:
                names[t.name] = f"v{len(names)}"
            return f"{names[t.name]}:{t.sort.value}"
        if isinstance(t, Name):
            if t.name not in names:
                names[t.name] = f"n{len(names)}"
            return f"~{names[t.name]}:{t.sort.value}"
        return t.sym.name + "(" + ",".join(tv(a) for a in t.args) + ")"

    def fact_s(f) -> str:
        return f.name + "(" + ",".join(tv(a) for a in f.args) + ")"

    def rule_s(r) -> str:
        return (
            r.name
            + "[" + ";".join(fact_s(f) for f in r.premises)
            + "|" + ";".join(fact_s(f) for f in r.actions)
            + "|" + ";".join(fact_s(f) for f in r.conclusions) + "]"
        )

    nid_order = sorted(sys.nodes)
    pos = {nid: i for i, nid in enumerate(nid_order)}
    parts = [rule_s(sys.nodes[n].rule) for n in nid_order]
    parts.append(
        "E:" + ";".join(
            sorted(f"{pos[e.src[0]]}.{e.src[1]}>{pos[e.dst[0]]}.{e.dst[1]}"
                   for e in sys.edges if e.src[0] in pos and e.dst[0] in pos)
        )
    )
    parts.append(
        "O:" + ";".join(sorted(f"{pos[a]}<{pos[b]}" for a, b in sys.order
                               if a in pos and b in pos))
    )
    goal_strs = []
    for g in sys.goals.values():
        ds = []
        for d in g.data:
            if isinstance(d, Term):
                ds.append(tv(d))
            elif isinstance(d, Fact):
                ds.append(fact_s(d))
            elif isinstance(d, int):
                ds.append(str(pos.get(d, d)))
            elif isinstance(d, (tuple, frozenset)):
                ds.append(str(len(d)))
            else:
                ds.append(str(d))
        goal_strs.append(g.kind + "(" + ",".join(ds) + ")")
    parts.append("G:" + ";".join(sorted(goal_strs)))
    parts.append("L:" + ";".join(sorted(tv(e) for e, _ in sys.leaked)))
    parts.append("S:" + ";".join(sorted(tv(e) for e in sys.secret)))
    import hashlib

    return hashlib.sha1("||".join(parts).encode()).hexdigest()


def _map_goal_datum(d, f):
    if isinstance(d, Term):
        return f(d)
    if isinstance(d, Fact):
        return d.map_args(f)
    if isinstance(d, tuple):
        return tuple(_map_goal_datum(x, f) for x in d)
    if isinstance(d, frozenset):
        return frozenset(_map_goal_datum(x, f) for x in d)
    return d


def _definite_match(patt: Fact, got: Fact, wildcards: tuple[Var, ...]) -> bool:
    """True when got is definitely an instance of patt: pattern wildcards
    match anything, every other pattern position must be equal."""
    wc = set(wildcards)

    def m(p: Term, g: Term) -> bool:
        if isinstance(p, Var) and p in wc:
            return True
        return normalize(p) == normalize(g)

    return all(m(p, g) for p, g in zip(patt.args, got.args))
