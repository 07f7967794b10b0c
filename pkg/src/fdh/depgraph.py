"""Dependency graphs: construction from solved systems, validity checking,
trace extraction and export.

Extraction grounds the solved constraint system, then synthesizes the
adversary deduction chains (recv, destructors, operator applications) that
realize every solved K premise, so the graph replays end-to-end through
the forward engine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .constraints import ConstraintSystem, Edge, KSolutionRecord
from .model import (
    Fact,
    FRESH_RULE_NAME,
    PremiseMissing,
    Protocol,
    Rule,
    State,
    forward_step,
    md_dh_rules,
)
from .rewrite import enf_of, gnf_of, normalize, term_of_mono
from .sorts import Sort, sort_leq
from .terms import (
    ADD,
    App,
    EG,
    EXP,
    FreshSource,
    G,
    GINV,
    GMUL,
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
    variables,
)


class NotWellFormed(Exception):
    pass


@dataclass
class DependencyGraph:
    nodes: list[tuple[int, Rule]]  # (node id, ground instance), topological
    edges: set[tuple[tuple[int, int], tuple[int, int]]]

    def index_of(self, nid: int) -> int:
        for i, (n, _) in enumerate(self.nodes):
            if n == nid:
                return i
        raise KeyError(nid)

    def rule_of(self, nid: int) -> Rule:
        for n, r in self.nodes:
            if n == nid:
                return r
        raise KeyError(nid)


def validate(g: DependencyGraph) -> list[str]:
    """The four dependency-graph conditions; violations are returned as
    data, an empty list means the graph is valid."""
    issues = []
    pos = {nid: i for i, (nid, _) in enumerate(g.nodes)}
    # 1. edges go forward and relate equal facts modulo the theory
    for (i, u), (j, v) in g.edges:
        if i not in pos or j not in pos:
            issues.append(f"edge references missing node {i} or {j}")
            continue
        if pos[i] >= pos[j]:
            issues.append(f"edge {(i, u)} -> {(j, v)} does not go forward")
        src = g.rule_of(i)
        dst = g.rule_of(j)
        if u >= len(src.conclusions) or v >= len(dst.premises):
            issues.append(f"edge {(i, u)} -> {(j, v)} has a bad index")
            continue
        cf = src.conclusions[u].normalized()
        pf = dst.premises[v].normalized()
        if cf.name != pf.name or cf.args != pf.args:
            issues.append(f"edge facts differ: {cf} vs {pf}")
    # 2. every premise has exactly one incoming edge
    incoming: dict[tuple[int, int], int] = {}
    for (_, dst) in [(e[0], e[1]) for e in g.edges]:
        incoming[dst] = incoming.get(dst, 0) + 1
    for nid, rule in g.nodes:
        for pidx in range(len(rule.premises)):
            n = incoming.get((nid, pidx), 0)
            if n != 1:
                issues.append(
                    f"premise ({nid},{pidx}) {rule.premises[pidx]} has "
                    f"{n} incoming edges"
                )
    # 3. linear conclusions have at most one outgoing edge
    outgoing: dict[tuple[int, int], int] = {}
    for (src, _) in g.edges:
        outgoing[src] = outgoing.get(src, 0) + 1
    for nid, rule in g.nodes:
        for cidx, f in enumerate(rule.conclusions):
            if not f.persistent and outgoing.get((nid, cidx), 0) > 1:
                issues.append(f"linear conclusion ({nid},{cidx}) {f} used twice")
    # 4. fresh-creating instances are unique
    seen: dict[Term, int] = {}
    for nid, rule in g.nodes:
        if rule.name == FRESH_RULE_NAME:
            arg = normalize(rule.conclusions[0].args[0])
            if arg in seen:
                issues.append(f"fresh name {arg} created twice")
            seen[arg] = nid
    return issues


def trace_of(g: DependencyGraph) -> list[tuple[Fact, ...]]:
    return [tuple(f.normalized() for f in rule.actions) for _, rule in g.nodes]


def replay(g: DependencyGraph) -> State:
    """Run the instances through the forward engine in graph order."""
    st = State()
    for _, rule in g.nodes:
        st = forward_step(st, rule)
    return st


# --- extraction -------------------------------------------------------------------


class _Builder:
    """Synthesizes adversary deduction nodes providing K facts."""

    def __init__(self, sys: ConstraintSystem, fresh: FreshSource):
        self.sys = sys
        self.fresh = fresh
        self.nodes: dict[int, Rule] = {}
        self.edges: set[Edge] = set()
        self.order: set[tuple[int, int]] = set()
        self.providers: dict[Term, tuple[int, int]] = {}
        self.recv_for: dict[tuple[int, int], int] = {}
        self._md = {r.name: r for r in md_dh_rules()}

    def new_node(self, rule: Rule, after: Iterable[int] = (),
                 before: Iterable[int] = ()) -> int:
        nid = self.fresh._next()
        self.nodes[nid] = rule
        for a in after:
            self.order.add((a, nid))
        for b in before:
            self.order.add((nid, b))
        return nid

    def register(self, term: Term, node: int, cidx: int):
        self.providers.setdefault(normalize(term), (node, cidx))

    def provider(self, term: Term) -> Optional[tuple[int, int]]:
        return self.providers.get(normalize(term))

    def scan_existing(self):
        for nid, node in self.sys.nodes.items():
            for cidx, f in enumerate(node.rule.conclusions):
                if f.name == "K":
                    self.register(f.args[0], nid, cidx)

    def recv_node(self, src: tuple[int, int]) -> int:
        """The unique recv node consuming an Out conclusion."""
        if src in self.recv_for:
            return self.recv_for[src]
        out_fact = self._conclusion(src)
        m = out_fact.args[0]
        inst = self._md["recv"].apply(Subst.of({Var("m", Sort.MSG): m}))
        nid = self.new_node(inst, after=[src[0]])
        self.edges.add(Edge(src, (nid, 0)))
        self.recv_for[src] = nid
        self.register(m, nid, 0)
        return nid

    def _conclusion(self, ref: tuple[int, int]) -> Fact:
        nid, cidx = ref
        if nid in self.sys.nodes:
            return self.sys.nodes[nid].rule.conclusions[cidx].normalized()
        return self.nodes[nid].conclusions[cidx].normalized()

    def op(self, name: str, args: list[Term], out: Term) -> tuple[int, int]:
        """An operator/constructor node [K(args)] -> K(out)."""
        out = normalize(out)
        got = self.provider(out)
        if got is not None:
            return got
        arg_refs = [self.build(a) for a in args]
        rule = self._md[name]
        # instantiate by matching premises positionally
        prem_facts = tuple(Fact("K", (normalize(a),), persistent=True)
                           for a in args)
        inst = Rule(
            name,
            prem_facts,
            (Fact("K", (out,), persistent=True),),
            (Fact("K", (out,), persistent=True),),
            internal=rule.internal,
        )
        nid = self.new_node(inst, after=[r[0] for r in arg_refs])
        for pidx, r in enumerate(arg_refs):
            self.edges.add(Edge(r, (nid, pidx)))
        self.register(out, nid, 0)
        return (nid, 0)

    def const(self, t: Term) -> tuple[int, int]:
        t = normalize(t)
        got = self.provider(t)
        if got is not None:
            return got
        if t == ZERO:
            rule, name = self._md["zero"], "zero"
        elif t == ONE:
            rule, name = self._md["one"], "one"
        elif t == EG:
            rule, name = self._md["eG"], "eG"
        elif t == G:
            rule, name = self._md["pubG"], "pubG"
        elif isinstance(t, Name) and t.sort == Sort.PUBLIC:
            rule = self._md["pub"].apply(Subst.of({Var("p", Sort.PUBLIC): t}))
            name = "pub"
        else:
            raise NotWellFormed(f"no constant rule for {t}")
        nid = self.new_node(rule if name != "pub" else rule)
        for cidx, f in enumerate(self.nodes[nid].conclusions):
            if f.name == "K":
                self.register(t, nid, cidx)
                return (nid, cidx)
        raise NotWellFormed(f"constant rule for {t} lacks a K conclusion")

    def build(self, t: Term) -> tuple[int, int]:
        """A node conclusion providing K(t), synthesizing deduction steps
        from already-known facts."""
        t = normalize(t)
        got = self.provider(t)
        if got is not None:
            return got
        if t in (ZERO, ONE, EG, G) or (
            isinstance(t, Name) and t.sort == Sort.PUBLIC
        ):
            return self.const(t)
        if isinstance(t, App) and t.sym == MU:
            inner = self.build(t.args[0])
            return self.op("mu", [t.args[0]], t)
        if isinstance(t, App) and t.sym == PAIR:
            return self.op("pair", [t.args[0], t.args[1]], t)
        if isinstance(t, App) and t.sym == SENC:
            return self.op("senc", [t.args[0], t.args[1]], t)
        if sort_leq(t.sort, Sort.E):
            return self._build_e(t)
        if sort_leq(t.sort, Sort.G):
            return self._build_g(t)
        raise NotWellFormed(f"cannot deduce K({t})")

    def _build_e(self, t: Term) -> tuple[int, int]:
        e = enf_of(t)
        if len(e) == 0:
            return self.const(ZERO)
        if len(e) > 1 or abs(e[0][1]) > 1:
            parts = []
            for m, n in e:
                unit = term_of_mono(m)
                if n < 0:
                    unit = mk_app(NEG, (unit,))
                parts.extend([unit] * abs(n))
            ref = self.build(parts[0])
            acc = parts[0]
            for p in parts[1:]:
                acc2 = normalize(mk_app(ADD, (acc, p)))
                ref = self.op("op_add", [acc, p], acc2)
                acc = acc2
            return ref
        (m, n) = e[0]
        if n < 0:
            pos = term_of_mono(m)
            self.build(pos)
            return self.op("op_neg", [pos], t)
        if len(m) == 0:
            return self.const(ONE)
        if len(m) == 1 and m[0][1] == 1:
            atom = m[0][0]
            if isinstance(atom, App) and atom.sym == MU:
                self.build(atom.args[0])
                return self.op("mu", [atom.args[0]], atom)
            if isinstance(atom, App) and atom.sym == INV:
                self.build(atom.args[0])
                return self.op("op_inv", [atom.args[0]], t)
            raise NotWellFormed(f"exponent atom {atom} is not adversary-known")
        # a product: peel one unit off
        units = []
        for atom, k in m:
            unit = atom if k > 0 else mk_app(INV, (atom,))
            units.extend([unit] * abs(k))
        ref = self.build(units[0])
        acc = units[0]
        for u in units[1:]:
            if isinstance(u, App) and u.sym == INV:
                self.build(u.args[0])
                self.op("op_inv", [u.args[0]], normalize(u))
            acc2 = normalize(mk_app(MUL, (acc, u)))
            ref = self.op("op_mul", [acc, u], acc2)
            acc = acc2
        return ref

    def _build_g(self, t: Term) -> tuple[int, int]:
        gn = gnf_of(t)
        if len(gn) == 0:
            return self.const(EG)
        parts = []
        for (base, m), n in gn:
            unit = base if not m else mk_app(EXP, (base, term_of_mono(m)))
            if n < 0:
                unit = mk_app(GINV, (unit,))
            parts.extend([normalize(unit)] * abs(n))
        refs = []
        for p in parts:
            refs.append(self._build_g_factor(p))
        acc = parts[0]
        ref = refs[0]
        for p in parts[1:]:
            acc2 = normalize(mk_app(GMUL, (acc, p)))
            ref = self.op("op_gmul", [acc, p], acc2)
            acc = acc2
        return ref

    def _build_g_factor(self, t: Term) -> tuple[int, int]:
        t = normalize(t)
        got = self.provider(t)
        if got is not None:
            return got
        if isinstance(t, App) and t.sym == GINV:
            self.build(t.args[0])
            return self.op("op_ginv", [t.args[0]], t)
        if isinstance(t, App) and t.sym == EXP:
            base, e = t.args
            self.build(base)
            self.build(e)
            return self.op("op_exp", [base, e], t)
        if t == G or t == EG:
            return self.const(t)
        raise NotWellFormed(f"group factor {t} is not adversary-known")


def _grounding(sys: ConstraintSystem, fresh: FreshSource) -> Subst:
    vs: set[Var] = set()
    for node in sys.nodes.values():
        vs |= node.rule.vars()
    bind: dict[Var, Term] = {}
    for v in sorted(vs, key=lambda v: v.name):
        if v.sort == Sort.TEMPORAL:
            continue
        if v.sort in (Sort.E, Sort.VARE, Sort.FRE):
            bind[v] = fresh.name(f"w{v.name.strip(chr(183))}_", Sort.FRE)
        elif v.sort == Sort.FRESH:
            bind[v] = fresh.name(f"n{v.name}_", Sort.FRESH)
        elif v.sort in (Sort.PUBLIC,):
            bind[v] = fresh.name(f"P{v.name}_", Sort.PUBLIC)
        elif v.sort == Sort.PUBG:
            bind[v] = G
        elif v.sort == Sort.MSG:
            bind[v] = fresh.name(f"P{v.name}_", Sort.PUBLIC)
        elif v.sort == Sort.G:
            bind[v] = normalize(
                mk_app(EXP, (G, fresh.name(f"w{v.name}_", Sort.FRE)))
            )
    return Subst.of(bind)


def extract_model(sys: ConstraintSystem, proto: Protocol) -> DependencyGraph:
    """Ground the solved system and realize it as a dependency graph."""
    if sys.goals:
        raise NotWellFormed("system still has open goals")
    work = sys.clone()
    ground = _grounding(work, work.fresh)
    if ground.bindings:
        work.apply(ground)

    builder = _Builder(work, work.fresh)
    builder.scan_existing()

    # realize solved K premises in creation order (providers accumulate)
    records = sorted(work.ksolutions, key=lambda r: r.node)
    for rec in records:
        node = work.nodes.get(rec.node)
        if node is None:
            continue
        if rec.pidx >= len(node.rule.premises):
            continue
        target = normalize(node.rule.premises[rec.pidx].args[0])
        ref = _realize(builder, work, rec, target)
        builder.edges.add(Edge(ref, (rec.node, rec.pidx)))
        builder.order.add((ref[0], rec.node))

    # remaining K premises without records (discharged as trivially known)
    all_edges = set(work.edges) | builder.edges
    incoming = {e.dst for e in all_edges}
    for nid, node in list(work.nodes.items()):
        for pidx, f in enumerate(node.rule.premises):
            if (nid, pidx) in incoming:
                continue
            if f.name == "K":
                ref = builder.build(f.args[0])
                builder.edges.add(Edge(ref, (nid, pidx)))
                builder.order.add((ref[0], nid))
                incoming.add((nid, pidx))
            else:
                raise NotWellFormed(f"premise {f} of {node} has no source")

    nodes: dict[int, Rule] = {
        nid: n.rule for nid, n in work.nodes.items()
    }
    nodes.update(builder.nodes)
    edges = {(*e.src, *e.dst) for e in set(work.edges) | builder.edges}
    order = set(work.order) | builder.order
    for (i, u, j, v) in edges:
        order.add((i, j))

    topo = _toposort(set(nodes), order)
    glist = [(nid, nodes[nid]) for nid in topo]
    g = DependencyGraph(
        glist, {((i, u), (j, v)) for (i, u, j, v) in edges}
    )
    return g


def _realize(builder: _Builder, work: ConstraintSystem,
             rec: KSolutionRecord, target: Term) -> tuple[int, int]:
    got = builder.provider(target)
    if got is not None and rec.method in ("derive", "const", "fresh", "recv", "mu"):
        return got
    if rec.method == "const":
        return builder.const(target)
    if rec.method in ("derive", "fresh"):
        return builder.build(target)
    if rec.method == "mu":
        return builder.build(target)
    if rec.method == "recv":
        (src, cidx, path) = rec.sources[0]
        return _receive_path(builder, (src, cidx), path, target)
    if rec.method == "combine-user":
        return builder.build(target)
    if rec.method == "combine":
        # target = prod_i h_i ^ x_i * g^(extras)
        factors: list[Term] = []
        for (src, cidx, path), x in zip(rec.sources, rec.exponents):
            href = _receive_path(builder, (src, cidx), path, None)
            h = _provided_term(builder, work, href)
            xv = normalize(x)
            builder.build(xv)
            powed = normalize(mk_app(EXP, (h, xv)))
            builder.op("op_exp", [h, xv], powed)
            factors.append(powed)
        for extra in rec.extra:
            ev = normalize(extra)
            if sort_leq(ev.sort, Sort.E):
                ev = normalize(mk_app(EXP, (G, ev)))
            builder.build(ev)
            factors.append(ev)
        if not factors:
            return builder.build(target)
        acc = factors[0]
        ref = builder.provider(acc) or builder.build(acc)
        for p in factors[1:]:
            acc2 = normalize(mk_app(GMUL, (acc, p)) if sort_leq(acc.sort, Sort.G)
                             else mk_app(ADD, (acc, p)))
            name = "op_gmul" if sort_leq(acc.sort, Sort.G) else "op_add"
            ref = builder.op(name, [acc, p], acc2)
            acc = acc2
        if normalize(acc) != normalize(target):
            # the combination may be partial (free unknowns chose 0/1):
            # fall back to structural deduction
            return builder.build(target)
        return ref
    return builder.build(target)


def _provided_term(builder: _Builder, work: ConstraintSystem,
                   ref: tuple[int, int]) -> Term:
    nid, cidx = ref
    if nid in work.nodes:
        f = work.nodes[nid].rule.conclusions[cidx]
    else:
        f = builder.nodes[nid].conclusions[cidx]
    return normalize(f.args[0])


def _receive_path(builder: _Builder, src: tuple[int, int], path: tuple,
                  target: Optional[Term]) -> tuple[int, int]:
    nid = builder.recv_node(src)
    ref = (nid, 0)
    cur = _provided_term(builder, builder.sys, ref)
    for step in path:
        if step == "fst":
            nxt = normalize(cur.args[0])
            ref = builder.op("fst", [cur], nxt)
            cur = nxt
        elif step == "snd":
            nxt = normalize(cur.args[1])
            ref = builder.op("snd", [cur], nxt)
            cur = nxt
        elif step == "sdec":
            key = normalize(cur.args[1])
            builder.build(key)
            nxt = normalize(cur.args[0])
            ref = builder.op("sdec", [cur, key], nxt)
            cur = nxt
    return ref


def _toposort(nodes: set[int], order: set[tuple[int, int]]) -> list[int]:
    adj: dict[int, set[int]] = {n: set() for n in nodes}
    indeg: dict[int, int] = {n: 0 for n in nodes}
    for a, b in order:
        if a in nodes and b in nodes and b not in adj[a]:
            adj[a].add(b)
            indeg[b] += 1
    ready = sorted([n for n in nodes if indeg[n] == 0])
    out = []
    while ready:
        n = ready.pop(0)
        out.append(n)
        for m in sorted(adj[n]):
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
        ready.sort()
    if len(out) != len(nodes):
        raise NotWellFormed("dependency order has a cycle")
    return out


# --- exports -----------------------------------------------------------------------


def to_json(g: DependencyGraph) -> dict:
    return {
        "v": 1,
        "nodes": [
            {
                "id": nid,
                "rule": rule.name,
                "premises": [str(f) for f in rule.premises],
                "actions": [str(f) for f in rule.actions],
                "conclusions": [str(f) for f in rule.conclusions],
            }
            for nid, rule in g.nodes
        ],
        "edges": [
            {"src": [i, u], "dst": [j, v]} for (i, u), (j, v) in sorted(g.edges)
        ],
        "trace": [[str(f) for f in acts] for acts in trace_of(g)],
    }


def to_dot(g: DependencyGraph) -> str:
    lines = ["digraph attack {", "  rankdir=TB;", "  node [shape=box];"]
    for nid, rule in g.nodes:
        label = f"#{nid} {rule.name}"
        acts = ", ".join(str(f) for f in rule.actions)
        if acts:
            label += f"\\n{acts}"
        label = label.replace('"', "'")
        lines.append(f'  n{nid} [label="{label}"];')
    for (i, u), (j, v) in sorted(g.edges):
        fact = str(g.rule_of(i).conclusions[u]).replace('"', "'")
        lines.append(f'  n{i} -> n{j} [label="{fact}"];')
    lines.append("}")
    return "\n".join(lines)
