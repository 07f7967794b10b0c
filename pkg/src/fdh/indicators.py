"""Leaked-set tracking, indicators, and non-cancellation checks.

The indicator of a root term is the residue an adversary still needs after
removing everything constructible from the leaked exponents.  Hash (mu)
subterms are opaque: they count as leaked only when the whole term was
leaked or every exponent inside is leaked; one secret exponent keeps the
entire mu term secret.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .rewrite import (
    EMPTY_MONO,
    Mono,
    NotNormalForm,
    enf_of,
    gnf_of,
    is_normal,
    normalize,
    root_terms,
    term_of_mono,
)
from .sorts import Sort, sort_leq
from .terms import (
    App,
    EG,
    EXP,
    INV,
    MU,
    Name,
    ONE,
    Term,
    Var,
    mk_app,
    subterms,
)


class NotRootTerm(Exception):
    pass


# --- leaked sets --------------------------------------------------------------


@dataclass(frozen=True)
class LeakedSet:
    """Exponents known to the adversary, with the timepoints they leak at."""

    entries: frozenset = frozenset()  # of (Term, timepoint-id)

    def terms(self) -> frozenset:
        return frozenset(e for e, _ in self.entries)

    def __contains__(self, t: Term) -> bool:
        return normalize(t) in self.terms()

    def __iter__(self):
        return iter(self.terms())


def leaked_set(system, i) -> LeakedSet:
    """Exponents e with a node constraint j:ru, K(e) in acts(ru) and j < i.

    `system` must expose k_action_entries() -> iterable of (term, timepoint)
    and time_less(a, b) -> bool.
    """
    out = set()
    for e, j in system.k_action_entries():
        if system.time_less(j, i):
            out.add((normalize(e), j))
    return LeakedSet(frozenset(out))


# --- indicators ---------------------------------------------------------------


def _mu_is_leaked(t: Term, leaked: frozenset) -> bool:
    """A mu term is leaked if it was leaked wholesale or every exponent atom
    inside it is leaked."""
    if t in leaked:
        return True
    arg = t.args[0]
    for (base, m), _ in gnf_of(arg):
        for atom, _k in m:
            if not _atom_is_leaked(atom, leaked):
                return False
    return True


def _atom_is_leaked(atom: Term, leaked: frozenset) -> bool:
    if isinstance(atom, App) and atom.sym == MU:
        return _mu_is_leaked(atom, leaked)
    if isinstance(atom, App) and atom.sym == INV:
        # opaque inverted sum: leaked iff the inverted term's atoms all are
        return all(
            _atom_is_leaked(a, leaked)
            for m, _ in enf_of(atom.args[0])
            for a, _k in m
        )
    return atom in leaked


def _residual_mono(m: Mono, leaked: frozenset) -> Mono:
    """Drop leaked atoms; inv applications are dropped (exponents become
    positive)."""
    out = []
    for atom, k in m:
        if _atom_is_leaked(atom, leaked):
            continue
        out.append((atom, abs(k)))
    return tuple(out)


def indicator(t: Term, L: Iterable[Term]) -> Term:
    """Indicator of a root term relative to the leaked exponent set L.

    Trivial indicators are eG (sort G) or 1 (sort E)."""
    leaked = frozenset(normalize(x) for x in L)
    if not is_normal(t):
        raise NotRootTerm(f"not a normal form: {t}")
    if sort_leq(t.sort, Sort.G):
        g = gnf_of(t)
        if len(g) != 1 or abs(g[0][1]) != 1:
            raise NotRootTerm(f"not a root term: {t}")
        (base, m), _n = g[0]
        res = _residual_mono(m, leaked)
        if isinstance(base, Var):
            # bare G variables are removed by the g^e model discipline; keep
            # the variable itself as its own indicator
            return base if not res else mk_app(EXP, (base, term_of_mono(res)))
        if not res:
            return EG
        return mk_app(EXP, (base, term_of_mono(res)))
    if sort_leq(t.sort, Sort.E):
        e = enf_of(t)
        if len(e) != 1 or abs(e[0][1]) != 1:
            raise NotRootTerm(f"not a root term: {t}")
        m, _n = e[0]
        res = _residual_mono(m, leaked)
        return ONE if not res else term_of_mono(res)
    raise NotRootTerm(f"indicator needs a DH term, got {t} : {t.sort.value}")


def is_trivial_indicator(t: Term) -> bool:
    return t == EG or t == ONE


# --- non-cancellation ---------------------------------------------------------


@dataclass(frozen=True)
class NoCancVerdict:
    status: str  # "holds" | "unknown"
    witness: Optional[str] = None  # AllFresh | Thm4Case1 | Thm4Case2
    pairs: tuple = ()  # failing pairs when unknown

    @property
    def holds(self) -> bool:
        return self.status == "holds"


HOLDS_VACUOUS = NoCancVerdict("holds", "Vacuous")


def _root_parts(t: Term):
    """(sign, mono) of a root term; G roots also return the base."""
    if sort_leq(t.sort, Sort.G):
        g = gnf_of(t)
        if len(g) != 1 or abs(g[0][1]) != 1:
            raise NotRootTerm(f"not a root term: {t}")
        (base, m), n = g[0]
        return n, base, m
    e = enf_of(t)
    if len(e) != 1 or abs(e[0][1]) != 1:
        raise NotRootTerm(f"not a root term: {t}")
    m, n = e[0]
    return n, None, m


def _is_fre_atom(a: Term) -> bool:
    return (isinstance(a, Var) and a.sort == Sort.FRE) or (
        isinstance(a, Name) and a.sort == Sort.FRE
    )


def _is_mu_atom(a: Term) -> bool:
    return isinstance(a, App) and a.sym == MU


def _mu_arg_vars(m: Mono) -> set[Var]:
    out: set[Var] = set()
    for atom, _ in m:
        if _is_mu_atom(atom):
            out |= {v for v in subterms(atom.args[0]) if isinstance(v, Var)}
    return out


def no_canc_pair(X: Term, Y: Term) -> NoCancVerdict:
    """Sound, incomplete check that the root term X can never be cancelled
    out by the root term Y (and never collapses to the identity itself)."""
    sx, _bx, mx = _root_parts(X)
    sy, _by, my = _root_parts(Y)

    def all_fresh(m: Mono) -> bool:
        return all(_is_fre_atom(a) and k == 1 for a, k in m)

    if sx > 0 and sy > 0 and mx and all_fresh(mx) and all_fresh(my):
        return NoCancVerdict("holds", "AllFresh")

    # Theorem-4 style conditions: X is a positive product of distinct FrE
    # atoms and at least one mu term; the minus needed for cancellation can
    # then only arise from an E-variable of Y that occurs inside one of X's
    # mu arguments, which is impossible by recursion through the hash.
    def mu_guarded_x(m: Mono) -> bool:
        has_mu = False
        for a, k in m:
            if k != 1:
                return False
            if _is_mu_atom(a):
                has_mu = True
            elif not _is_fre_atom(a):
                return False
        return has_mu

    def y_side_ok(m: Mono, x_mu_vars: set[Var]) -> bool:
        for a, k in m:
            if k != 1:
                return False
            if _is_mu_atom(a) or _is_fre_atom(a):
                continue
            if isinstance(a, Var) and sort_leq(a.sort, Sort.E):
                if a not in x_mu_vars:
                    return False
                continue
            return False
        return True

    if sx > 0 and sy > 0 and mu_guarded_x(mx):
        xvars = _mu_arg_vars(mx)
        if y_side_ok(my, xvars):
            case = "Thm4Case1" if not any(_is_mu_atom(a) for a, _ in my) else "Thm4Case2"
            return NoCancVerdict("holds", case)

    return NoCancVerdict("unknown", pairs=((X, Y),))


def no_canc_term(t: Term) -> NoCancVerdict:
    """NoCanc over all ordered pairs of distinct root terms of t."""
    rts = root_terms(t)
    failing = []
    witness = "Vacuous"
    for X in rts:
        for Y in rts:
            if X == Y:
                continue
            v = no_canc_pair(X, Y)
            if not v.holds:
                failing.extend(v.pairs)
            else:
                witness = v.witness
    if failing:
        return NoCancVerdict("unknown", pairs=tuple(failing))
    return NoCancVerdict("holds", witness)


def no_canc_prime(X: Term, t: Term) -> NoCancVerdict:
    """NoCanc(X, Y) for all root terms Y of t other than X."""
    rts = root_terms(t)
    failing = []
    witness = "Vacuous"
    for Y in rts:
        if Y == X:
            continue
        v = no_canc_pair(X, Y)
        if not v.holds:
            failing.extend(v.pairs)
        else:
            witness = v.witness
    if failing:
        return NoCancVerdict("unknown", pairs=tuple(failing))
    return NoCancVerdict("holds", witness)
